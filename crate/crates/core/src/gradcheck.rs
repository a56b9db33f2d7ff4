//! Central finite-difference checks of every analytic gradient path.
//!
//! Each path draws random instances (small shapes, random parameters and
//! inputs, frozen channel randomness) and compares every parameter's
//! analytic derivative with `(f(θ+h) − f(θ−h)) / 2h`. Coordinates whose
//! perturbation flips a ReLU or quantizer decision are piecewise points of the
//! loss and are skipped and counted.

use ndarray::Array2;

use crate::channel::{ChannelConfig, ChannelDraw, ChannelKind, OutputStage};
use crate::error::{ensure, Result};
use crate::layers::{softmax_cce_batch, Activation, DenseLayer, LayerGrad, Polarity};
use crate::models::{Architecture, BpAutoencoder, CodeParams};
use crate::numerics::{make_rng, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradPath {
    /// Goodness loss of one layer with respect to its own parameters.
    FfLayerLocal,
    /// Softmax cross-entropy of the classifier.
    Classifier,
    /// Whole pipeline with power normalization, fading and noise.
    BpContinuous,
    /// Whole pipeline with the sign quantizer and its straight-through rule.
    BpQuantized,
}

impl GradPath {
    pub const ALL: [GradPath; 4] =
        [GradPath::FfLayerLocal, GradPath::Classifier, GradPath::BpContinuous, GradPath::BpQuantized];

    pub fn as_str(self) -> &'static str {
        match self {
            GradPath::FfLayerLocal => "ff-layer-local",
            GradPath::Classifier => "classifier",
            GradPath::BpContinuous => "bp-continuous",
            GradPath::BpQuantized => "bp-quantized-ste",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub instances: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self { instances: 20, step: 1e-5, tolerance: 1e-5, floor: 1e-4, seed: 0 }
    }
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PathReport {
    pub path: GradPath,
    pub instances: usize,
    pub coordinates: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckReport {
    pub paths: Vec<PathReport>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.paths.iter().all(|p| p.passed)
    }

    pub fn to_text(&self) -> String {
        self.paths
            .iter()
            .map(|p| {
                format!(
                    "{} {}: instances={} coordinates={} skipped={} max_rel_error={:.3e}\n",
                    if p.passed { "PASS" } else { "FAIL" },
                    p.path.as_str(),
                    p.instances,
                    p.coordinates,
                    p.skipped,
                    p.max_rel_error
                )
            })
            .collect()
    }
}

/// Outcome of one parameter perturbation.
struct Probe {
    loss: f64,
    /// Signature of the piecewise region (ReLU masks, quantizer signs).
    region: Vec<bool>,
}

#[derive(Default)]
struct Tally {
    coordinates: usize,
    skipped: usize,
    max_rel_error: f64,
}

impl Tally {
    /// Compares the analytic gradient of every parameter in `layers` against
    /// central differences of `f`.
    fn check<F>(&mut self, layers: &mut [DenseLayer], grads: &[LayerGrad], cfg: &GradcheckConfig, f: F)
    where
        F: Fn(&[DenseLayer]) -> Probe,
    {
        let base_region = f(layers).region;
        for li in 0..layers.len() {
            for pi in 0..layers[li].param_count() {
                let orig = layers[li].param(pi);
                *layers[li].param_mut(pi) = orig + cfg.step;
                let plus = f(layers);
                *layers[li].param_mut(pi) = orig - cfg.step;
                let minus = f(layers);
                *layers[li].param_mut(pi) = orig;
                if plus.region != base_region || minus.region != base_region {
                    self.skipped += 1;
                    continue;
                }
                let numeric = (plus.loss - minus.loss) / (2.0 * cfg.step);
                let err = relative_error(grads[li].get(pi), numeric, cfg.floor);
                self.coordinates += 1;
                self.max_rel_error = self.max_rel_error.max(err);
            }
        }
    }

    fn report(self, path: GradPath, cfg: &GradcheckConfig) -> PathReport {
        PathReport {
            path,
            instances: cfg.instances,
            coordinates: self.coordinates,
            skipped: self.skipped,
            max_rel_error: self.max_rel_error,
            // A path that checked nothing has not been verified.
            passed: self.coordinates > 0 && self.max_rel_error < cfg.tolerance,
        }
    }
}

fn relu_region(layers: &[DenseLayer], x: &Array2<f64>) -> (Array2<f64>, Vec<bool>) {
    let mut region = Vec::new();
    let mut h = x.clone();
    for l in layers {
        let tape = l.forward(h.view()).expect("shapes fixed by construction");
        if l.activation() == Activation::Relu {
            region.extend(tape.pre_activation.iter().map(|&z| z > 0.0));
        }
        h = tape.output;
    }
    (h, region)
}

fn random_rows(rng: &mut RngStream, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.standard_normal())
}

fn random_messages(rng: &mut RngStream, q: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.index(q)).collect()
}

fn check_ff_layer(cfg: &GradcheckConfig, rng: &mut RngStream) -> Result<PathReport> {
    let mut tally = Tally::default();
    for inst in 0..cfg.instances {
        let fan_in = 2 + rng.index(6);
        let fan_out = 2 + rng.index(6);
        let act = if inst % 4 == 3 { Activation::Linear } else { Activation::Relu };
        let mut layer = vec![DenseLayer::init(rng, fan_in, fan_out, act)?];
        let mut x = random_rows(rng, 4, fan_in);
        crate::layers::l2_normalize_rows(&mut x);
        // Thresholds spread around the initial goodness keep both softplus
        // branches exercised.
        let tau = fan_out as f64 * (0.05 + rng.uniform());
        let pol = if inst % 2 == 0 { Polarity::Positive } else { Polarity::Negative };
        let tape = layer[0].forward(x.view())?;
        let grad = layer[0].ff_grad(&tape, tau, pol)?;
        tally.check(&mut layer, &[grad], cfg, |ls| {
            let t = ls[0].forward(x.view()).expect("fixed shapes");
            let loss = t.goodness.iter().map(|&g| crate::layers::ff_layer_loss(g, tau, pol)).sum::<f64>()
                / t.batch_size() as f64;
            Probe { loss, region: t.pre_activation.iter().map(|&z| z > 0.0).collect() }
        });
    }
    Ok(tally.report(GradPath::FfLayerLocal, cfg))
}

fn check_classifier(cfg: &GradcheckConfig, rng: &mut RngStream) -> Result<PathReport> {
    let mut tally = Tally::default();
    for _ in 0..cfg.instances {
        let width = 2 + rng.index(10);
        let q = 2 + rng.index(8);
        let mut layer = vec![DenseLayer::init(rng, width, q, Activation::Linear)?];
        let x = random_rows(rng, 5, width);
        let targets = random_messages(rng, q, 5);
        let tape = layer[0].forward(x.view())?;
        let cce = softmax_cce_batch(tape.output.view(), &targets)?;
        let (grad, _) = layer[0].backward(&tape, cce.logit_grad.view())?;
        tally.check(&mut layer, &[grad], cfg, |ls| {
            let t = ls[0].forward(x.view()).expect("fixed shapes");
            let loss = softmax_cce_batch(t.output.view(), &targets).expect("valid targets").mean_loss();
            Probe { loss, region: Vec::new() }
        });
    }
    Ok(tally.report(GradPath::Classifier, cfg))
}

fn random_bp(rng: &mut RngStream, stage: OutputStage) -> Result<BpAutoencoder> {
    let k = 2 + rng.index(2) as u32;
    let n = (k as usize) + 1 + rng.index(3);
    let arch = Architecture { encoder_layers: 2, decoder_layers: 2, width: 3 + rng.index(5) };
    BpAutoencoder::new(CodeParams::new(k, n)?, arch, stage, rng)
}

/// Loss of a BP model with the encoder output replaced by `stage_fn(a)`.
fn bp_loss<S>(
    encoder: &[DenseLayer],
    decoder: &[DenseLayer],
    q: usize,
    msgs: &[usize],
    channel: &ChannelConfig,
    draw: &ChannelDraw,
    stage_fn: S,
) -> Probe
where
    S: Fn(&Array2<f64>) -> (Array2<f64>, Vec<bool>),
{
    let one_hot = crate::models::one_hot_batch(msgs, q).expect("valid messages");
    let (a, mut region) = relu_region(encoder, &one_hot);
    let (x, stage_region) = stage_fn(&a);
    region.extend(stage_region);
    let y = draw.apply(channel, x.view()).expect("fixed shapes");
    let (logits, dec_region) = relu_region(decoder, &y);
    region.extend(dec_region);
    let loss = softmax_cce_batch(logits.view(), msgs).expect("valid messages").mean_loss();
    Probe { loss, region }
}

fn check_bp(cfg: &GradcheckConfig, rng: &mut RngStream, stage: OutputStage) -> Result<PathReport> {
    let mut tally = Tally::default();
    for inst in 0..cfg.instances {
        // Tiny random networks occasionally map a block to zero; redraw those.
        let (mut model, channel, msgs, draw, fwd) = loop {
            let mut model = random_bp(rng, stage)?;
            if stage == OutputStage::Quantize {
                // Shrink the encoder output so that part of it sits inside
                // the straight-through window.
                let last = model.encoder.last_mut().expect("non-empty");
                for i in 0..last.param_count() {
                    *last.param_mut(i) *= 0.3;
                }
            }
            let params = model.params();
            let kind = if inst % 2 == 0 { ChannelKind::Rbf } else { ChannelKind::Awgn };
            let channel = ChannelConfig::new(kind, params.rate(), -2.0 + 8.0 * rng.uniform(), params.n())?;
            let msgs = random_messages(rng, params.q(), 6);
            let draw = ChannelDraw::sample(&channel, msgs.len(), rng);
            let fwd = match model.forward_with(&msgs, &channel, &draw) {
                Ok(f) if f.encoder_output.rows().into_iter().all(|r| r.dot(&r) > 1e-6) => f,
                _ => continue,
            };
            break (model, channel, msgs, draw, fwd);
        };
        let params = model.params();
        let cce = softmax_cce_batch(fwd.logits.view(), &msgs)?;
        let grads = model.backward(&fwd, cce.logit_grad.view())?;
        let q = params.q();
        let a0 = fwd.encoder_output.clone();

        // Encoder side: for the quantizer, the straight-through rule is the
        // exact derivative of the linearized quantizer
        // x = sign(a₀) + 1{|a₀|<1}·(a − a₀).
        let stage_fn = |a: &Array2<f64>| -> (Array2<f64>, Vec<bool>) {
            match stage {
                OutputStage::Normalize => (crate::channel::normalize_power_rows(a.view()).expect("finite"), Vec::new()),
                OutputStage::Quantize => {
                    let mut x = a0.mapv(crate::channel::sign);
                    ndarray::Zip::from(&mut x).and(a).and(&a0).for_each(|x, &a, &a0| {
                        if a0.abs() < 1.0 {
                            *x += a - a0;
                        }
                    });
                    (x, Vec::new())
                }
            }
        };
        let decoder = model.decoder.clone();
        tally.check(&mut model.encoder, &grads.encoder, cfg, |enc| {
            bp_loss(enc, &decoder, q, &msgs, &channel, &draw, stage_fn)
        });
        let encoder = model.encoder.clone();
        // Decoder side: the true pipeline, quantizer included.
        tally.check(&mut model.decoder, &grads.decoder, cfg, |dec| {
            bp_loss(&encoder, dec, q, &msgs, &channel, &draw, |a| {
                let x = stage.apply(a.view()).expect("finite");
                (x, a.iter().map(|&v| v >= 0.0).collect())
            })
        });
        if stage == OutputStage::Quantize {
            ensure(a0.iter().any(|v| v.abs() < 1.0), || "no encoder output inside the straight-through window".into())?;
        }
    }
    Ok(tally.report(
        match stage {
            OutputStage::Normalize => GradPath::BpContinuous,
            OutputStage::Quantize => GradPath::BpQuantized,
        },
        cfg,
    ))
}

/// Runs one path with its own random stream.
pub fn check_path(path: GradPath, cfg: &GradcheckConfig) -> Result<PathReport> {
    ensure(cfg.instances >= 1 && cfg.step > 0.0 && cfg.tolerance > 0.0 && cfg.floor > 0.0, || {
        format!("invalid gradcheck settings {cfg:?}")
    })?;
    let mut rng = make_rng(cfg.seed, path as u64);
    match path {
        GradPath::FfLayerLocal => check_ff_layer(cfg, &mut rng),
        GradPath::Classifier => check_classifier(cfg, &mut rng),
        GradPath::BpContinuous => check_bp(cfg, &mut rng, OutputStage::Normalize),
        GradPath::BpQuantized => check_bp(cfg, &mut rng, OutputStage::Quantize),
    }
}

pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let paths = GradPath::ALL.iter().map(|&p| check_path(p, cfg)).collect::<Result<_>>()?;
    Ok(GradcheckReport { paths })
}
