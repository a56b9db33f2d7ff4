//! Dense layers with hand-derived gradients and the two optimizers.
//!
//! All operations are batched: a batch is an `Array2` with one sample per row.
//! Single-sample use is a batch of one.
//!
//! Two gradient paths exist. [`DenseLayer::ff_grad`] is the layer-local
//! gradient of the goodness loss and never produces a gradient for the
//! layer's input. [`DenseLayer::backward`] and [`bp_backward`] implement
//! ordinary reverse-mode differentiation for the backpropagation baselines.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};

use crate::error::{ensure, invalid, Result};
use crate::numerics::{init_dense, InitSpec, RngStream};

/// Norms at or below this are treated as zero by [`l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

/// Which side of the goodness threshold a sample should be pushed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

impl Polarity {
    fn sign(self) -> f64 {
        match self {
            Polarity::Positive => -1.0,
            Polarity::Negative => 1.0,
        }
    }
}

/// Fully connected layer `a = f(W x + b)`, `W` stored as `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    weights: Array2<f64>,
    bias: Array1<f64>,
    activation: Activation,
}

/// Values recorded by a forward pass over a batch.
#[derive(Clone, Debug)]
pub struct LayerTape {
    /// Layer input, `batch × in`.
    pub input: Array2<f64>,
    /// `W x + b`, `batch × out`.
    pub pre_activation: Array2<f64>,
    /// Activation output before any normalization, `batch × out`.
    pub output: Array2<f64>,
    /// Per-sample goodness `‖a‖²`.
    pub goodness: Array1<f64>,
    /// Per-sample `‖a‖₂`.
    pub norm: Array1<f64>,
}

impl LayerTape {
    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

/// Gradient with respect to one layer's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &DenseLayer) -> Self {
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &LayerGrad) {
        self.weights += &other.weights;
        self.bias += &other.bias;
    }

    /// Flattened view matching [`DenseLayer::param`] indexing.
    pub fn get(&self, idx: usize) -> f64 {
        let nw = self.weights.len();
        if idx < nw {
            self.weights.as_slice().expect("standard layout")[idx]
        } else {
            self.bias[idx - nw]
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().chain(self.bias.iter()).all(|v| v.is_finite())
    }

    fn same_shape(&self, layer: &DenseLayer) -> bool {
        self.weights.dim() == layer.weights.dim() && self.bias.len() == layer.bias.len()
    }
}

impl DenseLayer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self> {
        ensure(weights.nrows() >= 1 && weights.ncols() >= 1, || {
            "weight matrix must be non-empty".into()
        })?;
        ensure(bias.len() == weights.nrows(), || {
            format!("bias length {} does not match {} output units", bias.len(), weights.nrows())
        })?;
        Ok(Self {
            weights: weights.as_standard_layout().into_owned(),
            bias,
            activation,
        })
    }

    /// Kaiming-uniform weights, zero bias.
    pub fn init(rng: &mut RngStream, fan_in: usize, fan_out: usize, activation: Activation) -> Result<Self> {
        let (w, b) = init_dense(rng, fan_in, fan_out, InitSpec::kaiming_uniform(fan_in))?;
        Self::new(w, b, activation)
    }

    pub fn input_width(&self) -> usize {
        self.weights.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.weights.nrows()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn weights(&self) -> &Array2<f64> {
        &self.weights
    }

    pub fn bias(&self) -> &Array1<f64> {
        &self.bias
    }

    pub fn param_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    /// Flat parameter access: row-major weights followed by the bias.
    pub fn param(&self, idx: usize) -> f64 {
        let nw = self.weights.len();
        if idx < nw {
            self.weights.as_slice().expect("standard layout")[idx]
        } else {
            self.bias[idx - nw]
        }
    }

    pub fn param_mut(&mut self, idx: usize) -> &mut f64 {
        let nw = self.weights.len();
        if idx < nw {
            &mut self.weights.as_slice_mut().expect("standard layout")[idx]
        } else {
            &mut self.bias[idx - nw]
        }
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<LayerTape> {
        ensure(x.ncols() == self.input_width(), || {
            format!("input width {} does not match layer input {}", x.ncols(), self.input_width())
        })?;
        let mut pre = x.dot(&self.weights.t());
        pre += &self.bias;
        let output = match self.activation {
            Activation::Relu => pre.mapv(|z| z.max(0.0)),
            Activation::Linear => pre.clone(),
        };
        let goodness = output.map_axis(Axis(1), |row| row.dot(&row));
        let norm = goodness.mapv(f64::sqrt);
        Ok(LayerTape {
            input: x.to_owned(),
            pre_activation: pre,
            output,
            goodness,
            norm,
        })
    }

    pub fn forward_one(&self, x: &[f64]) -> Result<LayerTape> {
        let view = ArrayView2::from_shape((1, x.len()), x).map_err(|e| invalid(e.to_string()))?;
        self.forward(view)
    }

    fn check_tape(&self, tape: &LayerTape) -> Result<()> {
        ensure(
            tape.input.ncols() == self.input_width() && tape.output.ncols() == self.output_width(),
            || "tape was not recorded by this layer".into(),
        )
    }

    /// Batch-mean gradient of the goodness loss with respect to this layer's
    /// own parameters.
    ///
    /// `∂ℓ/∂g = s·σ(s(g−τ))` with `s = −1` for positive samples and `+1` for
    /// negative ones; `∂g/∂z = 2a ⊙ f'(z)`, which equals `2a` for both ReLU
    /// and linear activations.
    pub fn ff_grad(&self, tape: &LayerTape, tau: f64, polarity: Polarity) -> Result<LayerGrad> {
        self.check_tape(tape)?;
        let batch = tape.batch_size().max(1) as f64;
        let s = polarity.sign();
        let coeff = tape.goodness.mapv(|g| 2.0 * s * sigmoid(s * (g - tau)) / batch);
        let delta = &tape.output * &coeff.insert_axis(Axis(1));
        Ok(self.param_grad(delta.view(), tape.input.view()))
    }

    /// Reverse-mode step: gradient of a downstream loss with respect to the
    /// parameters and the input, given `∂loss/∂output`.
    pub fn backward(&self, tape: &LayerTape, upstream: ArrayView2<f64>) -> Result<(LayerGrad, Array2<f64>)> {
        self.check_tape(tape)?;
        ensure(upstream.dim() == tape.output.dim(), || {
            format!("upstream gradient shape {:?} does not match output {:?}", upstream.dim(), tape.output.dim())
        })?;
        let mut delta = upstream.to_owned();
        if self.activation == Activation::Relu {
            Zip::from(&mut delta)
                .and(&tape.pre_activation)
                .for_each(|d, &z| {
                    if z <= 0.0 {
                        *d = 0.0
                    }
                });
        }
        let grad = self.param_grad(delta.view(), tape.input.view());
        let input_grad = delta.dot(&self.weights);
        Ok((grad, input_grad))
    }

    fn param_grad(&self, delta: ArrayView2<f64>, input: ArrayView2<f64>) -> LayerGrad {
        LayerGrad {
            weights: delta.t().dot(&input),
            bias: delta.sum_axis(Axis(0)),
        }
    }
}

/// Backpropagates `output_grad` through a stack of layers whose tapes were
/// recorded in order. Returns per-layer gradients and the gradient with
/// respect to the stack input.
pub fn bp_backward(
    layers: &[DenseLayer],
    tapes: &[LayerTape],
    output_grad: ArrayView2<f64>,
) -> Result<(Vec<LayerGrad>, Array2<f64>)> {
    ensure(layers.len() == tapes.len() && !layers.is_empty(), || {
        format!("{} layers but {} tapes", layers.len(), tapes.len())
    })?;
    let mut grads = Vec::with_capacity(layers.len());
    let mut upstream = output_grad.to_owned();
    for (layer, tape) in layers.iter().zip(tapes).rev() {
        let (g, dx) = layer.backward(tape, upstream.view())?;
        grads.push(g);
        upstream = dx;
    }
    grads.reverse();
    Ok((grads, upstream))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Goodness loss of one sample.
pub fn ff_layer_loss(goodness: f64, tau: f64, polarity: Polarity) -> f64 {
    softplus(polarity.sign() * (goodness - tau))
}

/// Returns `v / ‖v‖₂`, or zeros when the norm is at most [`NORM_EPS`].
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > NORM_EPS {
        v.iter().map(|x| x / norm).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Row-wise [`l2_normalize`] in place.
pub fn l2_normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > NORM_EPS {
            row /= norm;
        } else {
            row.fill(0.0);
        }
    }
}

#[derive(Clone, Debug)]
pub struct CceOutput {
    pub probs: Vec<f64>,
    pub loss: f64,
    pub logit_grad: Vec<f64>,
}

fn softmax_into(logits: ArrayView1<f64>, out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

fn cce_from_logits(logits: ArrayView1<f64>, target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target]
}

/// Softmax, cross-entropy against `target` and `∂loss/∂logits = p − 1_target`.
pub fn softmax_cce(logits: &[f64], target: usize) -> Result<CceOutput> {
    ensure(target < logits.len(), || {
        format!("target {target} out of range for {} classes", logits.len())
    })?;
    let view = ArrayView1::from(logits);
    let mut probs = vec![0.0; logits.len()];
    softmax_into(view, &mut probs);
    let loss = cce_from_logits(view, target);
    let mut logit_grad = probs.clone();
    logit_grad[target] -= 1.0;
    Ok(CceOutput {
        probs,
        loss,
        logit_grad,
    })
}

/// Batched cross-entropy.
#[derive(Clone, Debug)]
pub struct BatchCce {
    pub probs: Array2<f64>,
    /// Per-sample losses.
    pub losses: Array1<f64>,
    /// Gradient of the batch-mean loss with respect to the logits.
    pub logit_grad: Array2<f64>,
}

impl BatchCce {
    pub fn mean_loss(&self) -> f64 {
        self.losses.mean().unwrap_or(0.0)
    }
}

pub fn softmax_cce_batch(logits: ArrayView2<f64>, targets: &[usize]) -> Result<BatchCce> {
    ensure(logits.nrows() == targets.len(), || {
        format!("{} logit rows but {} targets", logits.nrows(), targets.len())
    })?;
    let q = logits.ncols();
    if let Some(&bad) = targets.iter().find(|&&t| t >= q) {
        return Err(invalid(format!("target {bad} out of range for {q} classes")));
    }
    let batch = targets.len().max(1) as f64;
    let mut probs = Array2::zeros(logits.raw_dim());
    let mut losses = Array1::zeros(targets.len());
    for (i, (row, &t)) in logits.rows().into_iter().zip(targets).enumerate() {
        softmax_into(row, probs.row_mut(i).as_slice_mut().expect("contiguous row"));
        losses[i] = cce_from_logits(row, t);
    }
    let mut logit_grad = probs.clone();
    for (i, &t) in targets.iter().enumerate() {
        logit_grad[[i, t]] -= 1.0;
    }
    logit_grad /= batch;
    Ok(BatchCce {
        probs,
        losses,
        logit_grad,
    })
}

fn check_grads(layers: &[DenseLayer], grads: &[LayerGrad]) -> Result<()> {
    ensure(
        layers.len() == grads.len() && layers.iter().zip(grads).all(|(l, g)| g.same_shape(l)),
        || "gradient shapes do not match parameters".into(),
    )
}

/// SGD with momentum and L2 weight decay.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

/// Velocity buffers for [`SgdConfig`], one per layer.
#[derive(Clone, Debug)]
pub struct SgdState {
    pub config: SgdConfig,
    velocity: Vec<LayerGrad>,
}

impl SgdState {
    pub fn new(config: SgdConfig, layers: &[DenseLayer]) -> Self {
        Self {
            config,
            velocity: layers.iter().map(LayerGrad::zeros_like).collect(),
        }
    }

    /// `v ← μv + (∇ + λθ)`, `θ ← θ − γv`.
    pub fn step(&mut self, layers: &mut [DenseLayer], grads: &[LayerGrad]) -> Result<()> {
        check_grads(layers, grads)?;
        ensure(self.velocity.len() == layers.len(), || "optimizer state belongs to another parameter set".into())?;
        let SgdConfig {
            lr,
            weight_decay,
            momentum,
        } = self.config;
        for ((layer, grad), vel) in layers.iter_mut().zip(grads).zip(&mut self.velocity) {
            Zip::from(&mut layer.weights)
                .and(&grad.weights)
                .and(&mut vel.weights)
                .for_each(|p, &g, v| {
                    *v = momentum * *v + g + weight_decay * *p;
                    *p -= lr * *v;
                });
            Zip::from(&mut layer.bias)
                .and(&grad.bias)
                .and(&mut vel.bias)
                .for_each(|p, &g, v| {
                    *v = momentum * *v + g + weight_decay * *p;
                    *p -= lr * *v;
                });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<LayerGrad>,
    second: Vec<LayerGrad>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, layers: &[DenseLayer]) -> Self {
        Self {
            config,
            first: layers.iter().map(LayerGrad::zeros_like).collect(),
            second: layers.iter().map(LayerGrad::zeros_like).collect(),
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, layers: &mut [DenseLayer], grads: &[LayerGrad]) -> Result<()> {
        check_grads(layers, grads)?;
        ensure(self.first.len() == layers.len(), || "optimizer state belongs to another parameter set".into())?;
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        };
        for (((layer, grad), m), v) in layers
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            Zip::from(&mut layer.weights)
                .and(&grad.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            Zip::from(&mut layer.bias)
                .and(&grad.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::make_rng;
    use ndarray::array;
    use proptest::prelude::*;

    fn scalar_layer(w: f64) -> DenseLayer {
        DenseLayer::new(array![[w]], array![0.0], Activation::Linear).unwrap()
    }

    fn random_layer(rng: &mut RngStream, fan_in: usize, fan_out: usize, act: Activation) -> DenseLayer {
        let mut layer = DenseLayer::init(rng, fan_in, fan_out, act).unwrap();
        for i in fan_in * fan_out..layer.param_count() {
            *layer.param_mut(i) = 0.3 * rng.standard_normal();
        }
        layer
    }

    fn random_batch(rng: &mut RngStream, rows: usize, cols: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((rows, cols), || rng.standard_normal())
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    #[test]
    fn identity_relu_forward() {
        let layer = DenseLayer::new(Array2::eye(2), Array1::zeros(2), Activation::Relu).unwrap();
        let tape = layer.forward_one(&[1.0, -1.0]).unwrap();
        assert_eq!(tape.output.row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(tape.goodness[0], 1.0);
    }

    #[test]
    fn identity_linear_forward() {
        let layer = DenseLayer::new(Array2::eye(2), Array1::zeros(2), Activation::Linear).unwrap();
        let tape = layer.forward_one(&[3.0, 4.0]).unwrap();
        assert_eq!(tape.output.row(0).to_vec(), vec![3.0, 4.0]);
        assert_eq!(tape.goodness[0], 25.0);
        assert_eq!(tape.norm[0], 5.0);
    }

    #[test]
    fn zero_input_zero_goodness() {
        let mut rng = make_rng(1, 0);
        let layer = DenseLayer::init(&mut rng, 4, 3, Activation::Relu).unwrap();
        let tape = layer.forward_one(&[0.0; 4]).unwrap();
        assert!(tape.output.iter().all(|&a| a == 0.0));
        assert_eq!(tape.goodness[0], 0.0);
    }

    #[test]
    fn forward_rejects_wrong_width() {
        let layer = scalar_layer(1.0);
        assert!(layer.forward_one(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
        assert_eq!(l2_normalize(&[0.0, 1.0, 0.0]), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn softplus_loss_values() {
        assert!((ff_layer_loss(80.0, 80.0, Polarity::Positive) - 2f64.ln()).abs() < 1e-15);
        assert!((ff_layer_loss(80.0, 80.0, Polarity::Negative) - 2f64.ln()).abs() < 1e-15);
        let far_pos = ff_layer_loss(130.0, 80.0, Polarity::Positive);
        // ln(1 + e^-50) = e^-50 to double precision.
        assert!((far_pos - (-50f64).exp()).abs() / far_pos < 1e-12, "{far_pos}");
        assert!((ff_layer_loss(130.0, 80.0, Polarity::Negative) - 50.0).abs() < 1e-12);
        assert!(softplus(1000.0).is_finite());
    }

    fn ff_loss_mean(layer: &DenseLayer, x: &Array2<f64>, tau: f64, pol: Polarity) -> f64 {
        let tape = layer.forward(x.view()).unwrap();
        tape.goodness.iter().map(|&g| ff_layer_loss(g, tau, pol)).sum::<f64>() / x.nrows() as f64
    }

    #[test]
    fn ff_grad_matches_central_differences() {
        let mut rng = make_rng(5, 0);
        for act in [Activation::Relu, Activation::Linear] {
            for pol in [Polarity::Positive, Polarity::Negative] {
                let layer = random_layer(&mut rng, 5, 7, act);
                let x = random_batch(&mut rng, 3, 5);
                let tau = 4.0;
                let tape = layer.forward(x.view()).unwrap();
                let grad = layer.ff_grad(&tape, tau, pol).unwrap();
                let h = 1e-6;
                let mut worst: f64 = 0.0;
                for i in 0..layer.param_count() {
                    let mut plus = layer.clone();
                    *plus.param_mut(i) += h;
                    let mut minus = layer.clone();
                    *minus.param_mut(i) -= h;
                    let fd = (ff_loss_mean(&plus, &x, tau, pol) - ff_loss_mean(&minus, &x, tau, pol)) / (2.0 * h);
                    worst = worst.max(rel_err(grad.get(i), fd));
                }
                assert!(worst < 1e-5, "{act:?} {pol:?}: {worst}");
            }
        }
    }

    #[test]
    fn dead_relu_has_zero_ff_grad() {
        let layer = DenseLayer::new(-Array2::eye(3), Array1::zeros(3), Activation::Relu).unwrap();
        let tape = layer.forward_one(&[1.0, 2.0, 3.0]).unwrap();
        for pol in [Polarity::Positive, Polarity::Negative] {
            let g = layer.ff_grad(&tape, 3.0, pol).unwrap();
            assert!(g.weights.iter().chain(g.bias.iter()).all(|&v| v == 0.0));
        }
    }

    #[test]
    fn saturated_positive_grad_vanishes() {
        let layer = DenseLayer::new(Array2::eye(2) * 10.0, Array1::zeros(2), Activation::Relu).unwrap();
        let tape = layer.forward_one(&[1.0, 1.0]).unwrap();
        // g = 200, tau = 2: sigmoid(-198) ~ 1e-86.
        let g = layer.ff_grad(&tape, 2.0, Polarity::Positive).unwrap();
        let max = g.weights.iter().fold(0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-80, "{max}");
        let g = layer.ff_grad(&tape, 2.0, Polarity::Negative).unwrap();
        assert!(g.weights[[0, 0]] > 1.0);
    }

    #[test]
    fn stale_tape_rejected() {
        let mut rng = make_rng(1, 0);
        let a = DenseLayer::init(&mut rng, 3, 4, Activation::Relu).unwrap();
        let b = DenseLayer::init(&mut rng, 4, 4, Activation::Relu).unwrap();
        let tape = a.forward_one(&[1.0, 0.0, 0.0]).unwrap();
        assert!(b.ff_grad(&tape, 1.0, Polarity::Positive).is_err());
    }

    #[test]
    fn linear_layer_row_gradient() {
        let mut rng = make_rng(2, 0);
        let layer = DenseLayer::init(&mut rng, 3, 4, Activation::Linear).unwrap();
        let x = [0.5, -1.0, 2.0];
        let tape = layer.forward_one(&x).unwrap();
        let mut up = Array2::zeros((1, 4));
        up[[0, 0]] = 1.0;
        let (g, _) = bp_backward(std::slice::from_ref(&layer), std::slice::from_ref(&tape), up.view()).unwrap();
        assert_eq!(g[0].weights.row(0).to_vec(), x.to_vec());
        assert!(g[0].weights.rows().into_iter().skip(1).all(|r| r.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn bp_backward_matches_central_differences() {
        let mut rng = make_rng(8, 0);
        let layers = vec![
            random_layer(&mut rng, 4, 6, Activation::Relu),
            random_layer(&mut rng, 6, 5, Activation::Relu),
            random_layer(&mut rng, 5, 3, Activation::Linear),
        ];
        let x = random_batch(&mut rng, 4, 4);
        let targets = [0usize, 2, 1, 2];
        let loss = |layers: &[DenseLayer], x: &Array2<f64>| {
            let mut h = x.clone();
            for l in layers {
                h = l.forward(h.view()).unwrap().output;
            }
            softmax_cce_batch(h.view(), &targets).unwrap().mean_loss()
        };
        let mut tapes = Vec::new();
        let mut h = x.clone();
        for l in &layers {
            let t = l.forward(h.view()).unwrap();
            h = t.output.clone();
            tapes.push(t);
        }
        let cce = softmax_cce_batch(h.view(), &targets).unwrap();
        let (grads, dx) = bp_backward(&layers, &tapes, cce.logit_grad.view()).unwrap();
        let step = 1e-6;
        for (li, layer) in layers.iter().enumerate() {
            for i in 0..layer.param_count() {
                let mut plus = layers.clone();
                *plus[li].param_mut(i) += step;
                let mut minus = layers.clone();
                *minus[li].param_mut(i) -= step;
                let fd = (loss(&plus, &x) - loss(&minus, &x)) / (2.0 * step);
                assert!(rel_err(grads[li].get(i), fd) < 1e-5, "layer {li} param {i}");
            }
        }
        for r in 0..x.nrows() {
            for c in 0..x.ncols() {
                let mut plus = x.clone();
                plus[[r, c]] += step;
                let mut minus = x.clone();
                minus[[r, c]] -= step;
                let fd = (loss(&layers, &plus) - loss(&layers, &minus)) / (2.0 * step);
                assert!(rel_err(dx[[r, c]], fd) < 1e-5);
            }
        }
    }

    #[test]
    fn softmax_cce_examples() {
        let out = softmax_cce(&[0.3; 16], 5).unwrap();
        assert!(out.probs.iter().all(|&p| (p - 1.0 / 16.0).abs() < 1e-15));
        assert!((out.loss - 16f64.ln()).abs() < 1e-12);
        let mut logits = vec![0.0; 16];
        logits[0] = 1000.0;
        let out = softmax_cce(&logits, 0).unwrap();
        assert!(out.loss.abs() < 1e-12 && out.loss.is_finite());
        assert!(out.probs.iter().all(|p| p.is_finite()));
        assert!(softmax_cce(&logits, 16).is_err());
    }

    #[test]
    fn softmax_cce_gradient_check() {
        let mut rng = make_rng(12, 0);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..16).map(|_| 2.0 * rng.standard_normal()).collect();
            let target = rng.index(16);
            let out = softmax_cce(&logits, target).unwrap();
            let loss = |l: &[f64]| softmax_cce(l, target).unwrap().loss;
            for i in 0..16 {
                // Five-point central stencil; keeps round-off below 1e-12.
                let h = 1e-3;
                let at = |d: f64| {
                    let mut l = logits.clone();
                    l[i] += d;
                    loss(&l)
                };
                let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
                let err = (out.logit_grad[i] - fd).abs() / out.logit_grad[i].abs().max(fd.abs()).max(1e-3);
                assert!(err < 1e-8, "{err}");
            }
        }
    }

    #[test]
    fn sgd_single_step() {
        let mut layers = vec![scalar_layer(1.0)];
        let cfg = SgdConfig { lr: 0.1, weight_decay: 0.0, momentum: 0.9 };
        let mut state = SgdState::new(cfg, &layers);
        let g = LayerGrad { weights: array![[0.5]], bias: array![0.0] };
        state.step(&mut layers, &[g]).unwrap();
        assert!((layers[0].weights()[[0, 0]] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_fixed_point() {
        let mut layers = vec![scalar_layer(0.7)];
        let cfg = SgdConfig { lr: 0.1, weight_decay: 0.0, momentum: 0.9 };
        let mut state = SgdState::new(cfg, &layers);
        let zero = LayerGrad::zeros_like(&layers[0]);
        for _ in 0..10 {
            state.step(&mut layers, std::slice::from_ref(&zero)).unwrap();
        }
        assert_eq!(layers[0].weights()[[0, 0]], 0.7);
    }

    #[test]
    fn sgd_pure_weight_decay() {
        let mut layers = vec![scalar_layer(1.0)];
        let cfg = SgdConfig { lr: 0.1, weight_decay: 0.1, momentum: 0.0 };
        let mut state = SgdState::new(cfg, &layers);
        let zero = LayerGrad::zeros_like(&layers[0]);
        let mut expected = 1.0;
        for _ in 0..5 {
            state.step(&mut layers, std::slice::from_ref(&zero)).unwrap();
            expected *= 0.99;
            assert!((layers[0].weights()[[0, 0]] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn sgd_momentum_recurrence() {
        // v1 = 0.5, v2 = 0.9*0.5 + 0.5 = 0.95; theta = 1 - 0.1*(0.5 + 0.95)
        let mut layers = vec![scalar_layer(1.0)];
        let cfg = SgdConfig { lr: 0.1, weight_decay: 0.0, momentum: 0.9 };
        let mut state = SgdState::new(cfg, &layers);
        let g = LayerGrad { weights: array![[0.5]], bias: array![0.0] };
        state.step(&mut layers, std::slice::from_ref(&g)).unwrap();
        state.step(&mut layers, std::slice::from_ref(&g)).unwrap();
        assert!((layers[0].weights()[[0, 0]] - 0.855).abs() < 1e-15);
    }

    #[test]
    fn optimizer_shape_mismatch() {
        let mut layers = vec![scalar_layer(1.0)];
        let bad = LayerGrad { weights: array![[0.5, 0.1]], bias: array![0.0] };
        let mut sgd = SgdState::new(SgdConfig { lr: 0.1, weight_decay: 0.0, momentum: 0.0 }, &layers);
        assert!(sgd.step(&mut layers, std::slice::from_ref(&bad)).is_err());
        let mut adam = AdamState::new(AdamConfig::with_lr(0.1), &layers);
        assert!(adam.step(&mut layers, std::slice::from_ref(&bad)).is_err());
    }

    #[test]
    fn adam_first_step() {
        let mut layers = vec![scalar_layer(0.0)];
        let mut state = AdamState::new(AdamConfig::with_lr(0.001), &layers);
        let g = LayerGrad { weights: array![[1.0]], bias: array![0.0] };
        state.step(&mut layers, &[g]).unwrap();
        let update = layers[0].weights()[[0, 0]];
        assert!((-0.001..=-0.000999).contains(&update), "{update}");
        assert_eq!(layers[0].bias()[0], 0.0);
    }

    #[test]
    fn adam_steady_state_step_is_lr() {
        let mut layers = vec![scalar_layer(0.0)];
        let mut state = AdamState::new(AdamConfig::with_lr(0.01), &layers);
        let g = LayerGrad { weights: array![[-3.0]], bias: array![0.0] };
        let mut prev = 0.0;
        for _ in 0..5000 {
            state.step(&mut layers, std::slice::from_ref(&g)).unwrap();
            let now = layers[0].weights()[[0, 0]];
            let step = now - prev;
            prev = now;
            assert!((step - 0.01).abs() < 1e-6);
        }
        assert_eq!(state.steps_taken(), 5000);
    }

    proptest! {
        #[test]
        fn normalized_rows_have_unit_norm(v in proptest::collection::vec(-1e3f64..1e3, 1..20)) {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let u = l2_normalize(&v);
            let un = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > NORM_EPS {
                prop_assert!((un - 1.0).abs() < 1e-12);
                let again = l2_normalize(&u);
                for (a, b) in again.iter().zip(&u) {
                    prop_assert!((a - b).abs() < 1e-15);
                }
            } else {
                prop_assert_eq!(un, 0.0);
            }
        }

        #[test]
        fn softplus_loss_is_finite_nonnegative(g in -1e300f64..1e300, tau in -1e6f64..1e6) {
            for pol in [Polarity::Positive, Polarity::Negative] {
                let l = ff_layer_loss(g, tau, pol);
                prop_assert!(l.is_finite() && l >= 0.0);
            }
        }

        #[test]
        fn batched_ff_grad_is_mean_of_single_grads(seed in 0u64..1000) {
            let mut rng = make_rng(seed, 0);
            let layer = random_layer(&mut rng, 3, 4, Activation::Relu);
            let x = random_batch(&mut rng, 5, 3);
            let batch = layer.ff_grad(&layer.forward(x.view()).unwrap(), 2.0, Polarity::Positive).unwrap();
            let mut sum = LayerGrad::zeros_like(&layer);
            for row in x.rows() {
                let t = layer.forward_one(row.as_slice().unwrap()).unwrap();
                sum.add_assign(&layer.ff_grad(&t, 2.0, Polarity::Positive).unwrap());
            }
            for i in 0..layer.param_count() {
                prop_assert!((batch.get(i) - sum.get(i) / 5.0).abs() < 1e-12);
            }
        }
    }
}
