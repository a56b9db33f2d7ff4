//! Autoencoder assembly: the forward-forward autoencoder with its classifier
//! head, the backpropagation autoencoder, and the contrastive input builder.

use ndarray::{concatenate, Array2, ArrayView2, Axis};

use crate::channel::{ChannelConfig, ChannelDraw, OutputStage};
use crate::error::{ensure, invalid, Result};
use crate::layers::{
    bp_backward, ff_layer_loss, l2_normalize_rows, softmax_cce_batch, Activation, BatchCce, DenseLayer,
    LayerGrad, LayerTape, Polarity,
};
use crate::numerics::RngStream;

/// Message alphabet and blocklength.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CodeParams {
    k: u32,
    n: usize,
}

impl CodeParams {
    pub fn new(k: u32, n: usize) -> Result<Self> {
        ensure((1..=16).contains(&k), || format!("bits per message must be in 1..=16, got {k}"))?;
        ensure(n >= 1, || "blocklength must be at least 1".into())?;
        Ok(Self { k, n })
    }

    pub fn k(&self) -> u32 {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// Alphabet size `2^k`.
    pub fn q(&self) -> usize {
        1usize << self.k
    }

    pub fn rate(&self) -> f64 {
        self.k as f64 / self.n as f64
    }
}

impl Default for CodeParams {
    fn default() -> Self {
        Self { k: 4, n: 7 }
    }
}

/// Layer counts and hidden width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub width: usize,
}

impl Architecture {
    fn validate(&self) -> Result<()> {
        ensure(self.encoder_layers >= 1 && self.decoder_layers >= 1 && self.width >= 1, || {
            format!("invalid architecture {self:?}")
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PassKind {
    Positive,
    Negative,
    Neutral,
}

impl PassKind {
    fn polarity(self) -> Option<Polarity> {
        match self {
            PassKind::Positive => Some(Polarity::Positive),
            PassKind::Negative => Some(Polarity::Negative),
            PassKind::Neutral => None,
        }
    }
}

pub fn one_hot(m: usize, q: usize) -> Result<Vec<f64>> {
    ensure(m < q, || format!("message {m} out of range for alphabet size {q}"))?;
    let mut v = vec![0.0; q];
    v[m] = 1.0;
    Ok(v)
}

/// Contrastive FF input `(1_m ‖ label half)` of width `2q`.
pub fn build_input(m: usize, kind: PassKind, rng: &mut RngStream, q: usize) -> Result<Vec<f64>> {
    let mut v = one_hot(m, q)?;
    v.resize(2 * q, 0.0);
    match kind {
        PassKind::Positive => v[q + m] = 1.0,
        PassKind::Negative => v[q + wrong_message(m, q, rng)?] = 1.0,
        PassKind::Neutral => {}
    }
    Ok(v)
}

/// Uniform draw from the alphabet with `m` removed.
fn wrong_message(m: usize, q: usize, rng: &mut RngStream) -> Result<usize> {
    ensure(q >= 2, || "negative samples need at least two messages".into())?;
    let r = rng.index(q - 1);
    Ok(if r >= m { r + 1 } else { r })
}

/// Batched [`build_input`], one row per message.
pub fn build_inputs(messages: &[usize], kind: PassKind, rng: &mut RngStream, q: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((messages.len(), 2 * q));
    for (mut row, &m) in out.rows_mut().into_iter().zip(messages) {
        let v = build_input(m, kind, rng, q)?;
        row.assign(&ndarray::ArrayView1::from(&v));
    }
    Ok(out)
}

pub fn one_hot_batch(messages: &[usize], q: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((messages.len(), q));
    for (i, &m) in messages.iter().enumerate() {
        ensure(m < q, || format!("message {m} out of range for alphabet size {q}"))?;
        out[[i, m]] = 1.0;
    }
    Ok(out)
}

/// Argmax with ties resolved toward the smallest index.
pub fn decode(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

pub fn decode_rows(p: ArrayView2<f64>) -> Vec<usize> {
    p.rows().into_iter().map(|r| decode(r.as_slice().expect("row-major"))).collect()
}

/// Output of one forward-forward network pass over a batch.
#[derive(Clone, Debug)]
pub struct FfNetOutput {
    pub tapes: Vec<LayerTape>,
    /// Unit-norm activities, one matrix per layer.
    pub activities: Vec<Array2<f64>>,
    /// Batch-mean goodness loss per layer; empty for neutral passes.
    pub losses: Vec<f64>,
}

impl FfNetOutput {
    pub fn mean_goodness(&self) -> Vec<f64> {
        self.tapes.iter().map(|t| t.goodness.mean().unwrap_or(0.0)).collect()
    }
}

/// Normalizes the input, then per layer: forward, goodness loss, normalize.
pub fn ff_net_forward(
    layers: &[DenseLayer],
    x0: ArrayView2<f64>,
    kind: PassKind,
    thresholds: &[f64],
) -> Result<FfNetOutput> {
    ensure(layers.len() == thresholds.len(), || {
        format!("{} layers but {} thresholds", layers.len(), thresholds.len())
    })?;
    let mut x = x0.to_owned();
    l2_normalize_rows(&mut x);
    let mut out = FfNetOutput {
        tapes: Vec::with_capacity(layers.len()),
        activities: Vec::with_capacity(layers.len()),
        losses: Vec::new(),
    };
    for (layer, &tau) in layers.iter().zip(thresholds) {
        let tape = layer.forward(x.view())?;
        if let Some(pol) = kind.polarity() {
            let mean = tape.goodness.iter().map(|&g| ff_layer_loss(g, tau, pol)).sum::<f64>()
                / tape.batch_size().max(1) as f64;
            out.losses.push(mean);
        }
        let mut a = tape.output.clone();
        l2_normalize_rows(&mut a);
        x = a.clone();
        out.tapes.push(tape);
        out.activities.push(a);
    }
    Ok(out)
}

/// Number of trainable scalars in a layer list.
pub fn count_layer_parameters(layers: &[DenseLayer]) -> usize {
    layers.iter().map(DenseLayer::param_count).sum()
}

/// Encoder trained layer-by-layer on goodness, decoder likewise, plus a
/// softmax classifier reading the concatenated decoder activities.
#[derive(Clone, Debug, PartialEq)]
pub struct FfAutoencoder {
    params: CodeParams,
    stage: OutputStage,
    pub(crate) encoder: Vec<DenseLayer>,
    pub(crate) decoder: Vec<DenseLayer>,
    pub(crate) classifier: DenseLayer,
}

/// Everything recorded by one autoencoder pass.
#[derive(Clone, Debug)]
pub struct FfPass {
    pub encoder: FfNetOutput,
    /// Channel input.
    pub codewords: Array2<f64>,
    pub received: Array2<f64>,
    pub decoder: FfNetOutput,
    pub classifier_tape: LayerTape,
    pub cce: BatchCce,
}

impl FfPass {
    /// Per-layer losses, encoder first.
    pub fn layer_losses(&self) -> Vec<f64> {
        self.encoder.losses.iter().chain(&self.decoder.losses).copied().collect()
    }

    pub fn decisions(&self) -> Vec<usize> {
        decode_rows(self.cce.probs.view())
    }
}

impl FfAutoencoder {
    pub fn new(params: CodeParams, arch: Architecture, stage: OutputStage, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let (q, n, w) = (params.q(), params.n(), arch.width);
        let mut encoder = Vec::with_capacity(arch.encoder_layers);
        let mut fan_in = 2 * q;
        for i in 0..arch.encoder_layers {
            let last = i + 1 == arch.encoder_layers;
            let (out, act) = if last { (n, Activation::Linear) } else { (w, Activation::Relu) };
            encoder.push(DenseLayer::init(rng, fan_in, out, act)?);
            fan_in = out;
        }
        let mut decoder = Vec::with_capacity(arch.decoder_layers);
        fan_in = n;
        for _ in 0..arch.decoder_layers {
            decoder.push(DenseLayer::init(rng, fan_in, w, Activation::Relu)?);
            fan_in = w;
        }
        let classifier = DenseLayer::init(rng, arch.decoder_layers * w, q, Activation::Linear)?;
        Self::from_parts(params, stage, encoder, decoder, classifier)
    }

    /// Assembles a model, checking the shape chain.
    pub fn from_parts(
        params: CodeParams,
        stage: OutputStage,
        encoder: Vec<DenseLayer>,
        decoder: Vec<DenseLayer>,
        classifier: DenseLayer,
    ) -> Result<Self> {
        let (q, n) = (params.q(), params.n());
        ensure(!encoder.is_empty() && !decoder.is_empty(), || "encoder and decoder need layers".into())?;
        check_chain(&encoder, 2 * q, n)?;
        let enc_last = encoder.last().expect("non-empty");
        ensure(enc_last.activation() == Activation::Linear, || "last encoder layer must be linear".into())?;
        ensure(
            encoder[..encoder.len() - 1].iter().all(|l| l.activation() == Activation::Relu),
            || "hidden encoder layers must use ReLU".into(),
        )?;
        let w = decoder[0].output_width();
        ensure(decoder.iter().all(|l| l.output_width() == w && l.activation() == Activation::Relu), || {
            "decoder layers must share one width and use ReLU".into()
        })?;
        check_chain(&decoder, n, w)?;
        ensure(
            classifier.input_width() == decoder.len() * w
                && classifier.output_width() == q
                && classifier.activation() == Activation::Linear,
            || format!("classifier must map {} -> {q} linearly", decoder.len() * w),
        )?;
        Ok(Self {
            params,
            stage,
            encoder,
            decoder,
            classifier,
        })
    }

    pub fn params(&self) -> CodeParams {
        self.params
    }

    pub fn stage(&self) -> OutputStage {
        self.stage
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            encoder_layers: self.encoder.len(),
            decoder_layers: self.decoder.len(),
            width: self.decoder[0].output_width(),
        }
    }

    pub fn encoder(&self) -> &[DenseLayer] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[DenseLayer] {
        &self.decoder
    }

    pub fn classifier(&self) -> &DenseLayer {
        &self.classifier
    }

    /// Goodness thresholds: each layer's output width.
    pub fn encoder_thresholds(&self) -> Vec<f64> {
        self.encoder.iter().map(|l| l.output_width() as f64).collect()
    }

    pub fn decoder_thresholds(&self) -> Vec<f64> {
        self.decoder.iter().map(|l| l.output_width() as f64).collect()
    }

    pub fn count_parameters(&self) -> usize {
        count_layer_parameters(&self.encoder) + count_layer_parameters(&self.decoder) + self.classifier.param_count()
    }

    /// All layers in order: encoder, decoder, classifier.
    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.encoder.iter().chain(&self.decoder).chain(std::iter::once(&self.classifier))
    }

    /// Full pass: contrastive input, encoder, output stage, channel, decoder,
    /// classifier. Negative labels are drawn before the channel.
    pub fn pass(&self, messages: &[usize], kind: PassKind, cfg: &ChannelConfig, rng: &mut RngStream) -> Result<FfPass> {
        let inputs = build_inputs(messages, kind, rng, self.params.q())?;
        let draw = ChannelDraw::sample(cfg, messages.len(), rng);
        self.pass_with(messages, inputs.view(), kind, cfg, &draw)
    }

    /// [`pass`](Self::pass) with explicit inputs and channel randomness.
    pub fn pass_with(
        &self,
        messages: &[usize],
        inputs: ArrayView2<f64>,
        kind: PassKind,
        cfg: &ChannelConfig,
        draw: &ChannelDraw,
    ) -> Result<FfPass> {
        ensure(cfg.n == self.params.n(), || format!("channel blocklength {} but model emits {}", cfg.n, self.params.n()))?;
        let encoder = ff_net_forward(&self.encoder, inputs, kind, &self.encoder_thresholds())?;
        let code = encoder.activities.last().expect("non-empty encoder");
        let codewords = self.stage.apply(code.view())?;
        let received = draw.apply(cfg, codewords.view())?;
        let (decoder, classifier_tape, cce) = self.receive(received.view(), messages, kind)?;
        Ok(FfPass {
            encoder,
            codewords,
            received,
            decoder,
            classifier_tape,
            cce,
        })
    }

    fn receive(
        &self,
        received: ArrayView2<f64>,
        messages: &[usize],
        kind: PassKind,
    ) -> Result<(FfNetOutput, LayerTape, BatchCce)> {
        let decoder = ff_net_forward(&self.decoder, received, kind, &self.decoder_thresholds())?;
        let features = self.features(&decoder)?;
        let classifier_tape = self.classifier.forward(features.view())?;
        let cce = softmax_cce_batch(classifier_tape.output.view(), messages)?;
        Ok((decoder, classifier_tape, cce))
    }

    fn features(&self, decoder: &FfNetOutput) -> Result<Array2<f64>> {
        let views: Vec<_> = decoder.activities.iter().map(|a| a.view()).collect();
        concatenate(Axis(1), &views).map_err(|e| invalid(e.to_string()))
    }

    /// Channel input for each message under the neutral label.
    pub fn encode(&self, messages: &[usize]) -> Result<Array2<f64>> {
        let q = self.params.q();
        let mut inputs = Array2::zeros((messages.len(), 2 * q));
        for (i, &m) in messages.iter().enumerate() {
            ensure(m < q, || format!("message {m} out of range for alphabet size {q}"))?;
            inputs[[i, m]] = 1.0;
        }
        let enc = ff_net_forward(&self.encoder, inputs.view(), PassKind::Neutral, &self.encoder_thresholds())?;
        self.stage.apply(enc.activities.last().expect("non-empty encoder").view())
    }

    /// Class probabilities for received blocks.
    pub fn probabilities(&self, received: ArrayView2<f64>) -> Result<Array2<f64>> {
        let decoder = ff_net_forward(&self.decoder, received, PassKind::Neutral, &self.decoder_thresholds())?;
        let features = self.features(&decoder)?;
        let logits = self.classifier.forward(features.view())?.output;
        let targets = vec![0; logits.nrows()];
        Ok(softmax_cce_batch(logits.view(), &targets)?.probs)
    }

    pub fn decode_received(&self, received: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(decode_rows(self.probabilities(received)?.view()))
    }
}

fn check_chain(layers: &[DenseLayer], input: usize, output: usize) -> Result<()> {
    let mut width = input;
    for (i, l) in layers.iter().enumerate() {
        ensure(l.input_width() == width, || {
            format!("layer {i} expects width {} but receives {width}", l.input_width())
        })?;
        width = l.output_width();
    }
    ensure(width == output, || format!("stack emits width {width}, expected {output}"))
}

/// End-to-end autoencoder trained by backpropagation.
#[derive(Clone, Debug, PartialEq)]
pub struct BpAutoencoder {
    params: CodeParams,
    stage: OutputStage,
    pub(crate) encoder: Vec<DenseLayer>,
    pub(crate) decoder: Vec<DenseLayer>,
}

/// Forward record of a [`BpAutoencoder`] pass.
#[derive(Clone, Debug)]
pub struct BpForward {
    pub messages: Vec<usize>,
    pub encoder_tapes: Vec<LayerTape>,
    /// Encoder output before the output stage.
    pub encoder_output: Array2<f64>,
    /// Channel input.
    pub codewords: Array2<f64>,
    pub gains: Vec<f64>,
    pub received: Array2<f64>,
    pub decoder_tapes: Vec<LayerTape>,
    pub logits: Array2<f64>,
}

#[derive(Clone, Debug)]
pub struct BpGrads {
    pub encoder: Vec<LayerGrad>,
    pub decoder: Vec<LayerGrad>,
}

impl BpAutoencoder {
    pub fn new(params: CodeParams, arch: Architecture, stage: OutputStage, rng: &mut RngStream) -> Result<Self> {
        arch.validate()?;
        let (q, n, w) = (params.q(), params.n(), arch.width);
        let stack = |rng: &mut RngStream, input: usize, output: usize, count: usize| -> Result<Vec<DenseLayer>> {
            let mut layers = Vec::with_capacity(count);
            let mut fan_in = input;
            for i in 0..count {
                let last = i + 1 == count;
                let (out, act) = if last { (output, Activation::Linear) } else { (w, Activation::Relu) };
                layers.push(DenseLayer::init(rng, fan_in, out, act)?);
                fan_in = out;
            }
            Ok(layers)
        };
        let encoder = stack(rng, q, n, arch.encoder_layers)?;
        let decoder = stack(rng, n, q, arch.decoder_layers)?;
        Self::from_parts(params, stage, encoder, decoder)
    }

    pub fn from_parts(
        params: CodeParams,
        stage: OutputStage,
        encoder: Vec<DenseLayer>,
        decoder: Vec<DenseLayer>,
    ) -> Result<Self> {
        let (q, n) = (params.q(), params.n());
        ensure(!encoder.is_empty() && !decoder.is_empty(), || "encoder and decoder need layers".into())?;
        check_chain(&encoder, q, n)?;
        check_chain(&decoder, n, q)?;
        for stack in [&encoder, &decoder] {
            let (last, hidden) = stack.split_last().expect("non-empty");
            ensure(
                last.activation() == Activation::Linear && hidden.iter().all(|l| l.activation() == Activation::Relu),
                || "hidden layers must use ReLU and output layers must be linear".into(),
            )?;
        }
        Ok(Self {
            params,
            stage,
            encoder,
            decoder,
        })
    }

    pub fn params(&self) -> CodeParams {
        self.params
    }

    pub fn stage(&self) -> OutputStage {
        self.stage
    }

    pub fn encoder(&self) -> &[DenseLayer] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[DenseLayer] {
        &self.decoder
    }

    pub fn count_parameters(&self) -> usize {
        count_layer_parameters(&self.encoder) + count_layer_parameters(&self.decoder)
    }

    pub fn layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.encoder.iter().chain(&self.decoder)
    }

    /// Encoder stack on one-hot inputs, before the output stage.
    pub fn encoder_forward(&self, messages: &[usize]) -> Result<(Vec<LayerTape>, Array2<f64>)> {
        let mut x = one_hot_batch(messages, self.params.q())?;
        let mut tapes = Vec::with_capacity(self.encoder.len());
        for layer in &self.encoder {
            let tape = layer.forward(x.view())?;
            x = tape.output.clone();
            tapes.push(tape);
        }
        Ok((tapes, x))
    }

    pub fn decoder_forward(&self, received: ArrayView2<f64>) -> Result<(Vec<LayerTape>, Array2<f64>)> {
        let mut x = received.to_owned();
        let mut tapes = Vec::with_capacity(self.decoder.len());
        for layer in &self.decoder {
            let tape = layer.forward(x.view())?;
            x = tape.output.clone();
            tapes.push(tape);
        }
        Ok((tapes, x))
    }

    pub fn forward(&self, messages: &[usize], cfg: &ChannelConfig, rng: &mut RngStream) -> Result<BpForward> {
        let draw = ChannelDraw::sample(cfg, messages.len(), rng);
        self.forward_with(messages, cfg, &draw)
    }

    pub fn forward_with(&self, messages: &[usize], cfg: &ChannelConfig, draw: &ChannelDraw) -> Result<BpForward> {
        ensure(cfg.n == self.params.n(), || format!("channel blocklength {} but model emits {}", cfg.n, self.params.n()))?;
        let (encoder_tapes, encoder_output) = self.encoder_forward(messages)?;
        let codewords = self.stage.apply(encoder_output.view())?;
        let received = draw.apply(cfg, codewords.view())?;
        let (decoder_tapes, logits) = self.decoder_forward(received.view())?;
        Ok(BpForward {
            messages: messages.to_vec(),
            encoder_tapes,
            encoder_output,
            codewords,
            gains: draw.gains.clone(),
            received,
            decoder_tapes,
            logits,
        })
    }

    /// Decoder gradients and `∂loss/∂y`.
    pub fn decoder_backward(&self, fwd: &BpForward, logit_grad: ArrayView2<f64>) -> Result<(Vec<LayerGrad>, Array2<f64>)> {
        bp_backward(&self.decoder, &fwd.decoder_tapes, logit_grad)
    }

    /// Encoder gradients given `∂loss/∂(encoder output)`, i.e. after the
    /// output stage has already been differentiated.
    pub fn encoder_backward(&self, tapes: &[LayerTape], output_grad: ArrayView2<f64>) -> Result<Vec<LayerGrad>> {
        Ok(bp_backward(&self.encoder, tapes, output_grad)?.0)
    }

    /// Full backpropagation: decoder, channel (`∂y/∂x = h`), output stage
    /// (exact normalization Jacobian or STE), encoder.
    pub fn backward(&self, fwd: &BpForward, logit_grad: ArrayView2<f64>) -> Result<BpGrads> {
        let (decoder, dy) = self.decoder_backward(fwd, logit_grad)?;
        let mut dx = dy;
        for (mut row, &h) in dx.rows_mut().into_iter().zip(&fwd.gains) {
            row *= h;
        }
        let da = self.stage.backward(fwd.encoder_output.view(), dx.view())?;
        let encoder = self.encoder_backward(&fwd.encoder_tapes, da.view())?;
        Ok(BpGrads { encoder, decoder })
    }

    pub fn encode(&self, messages: &[usize]) -> Result<Array2<f64>> {
        let (_, a) = self.encoder_forward(messages)?;
        self.stage.apply(a.view())
    }

    pub fn probabilities(&self, received: ArrayView2<f64>) -> Result<Array2<f64>> {
        let (_, logits) = self.decoder_forward(received)?;
        let targets = vec![0; logits.nrows()];
        Ok(softmax_cce_batch(logits.view(), &targets)?.probs)
    }

    pub fn decode_received(&self, received: ArrayView2<f64>) -> Result<Vec<usize>> {
        let (_, logits) = self.decoder_forward(received)?;
        Ok(decode_rows(logits.view()))
    }
}

/// Either trained model type.
#[derive(Clone, Debug, PartialEq)]
pub enum AnyModel {
    Ff(FfAutoencoder),
    Bp(BpAutoencoder),
}

impl AnyModel {
    pub fn params(&self) -> CodeParams {
        match self {
            AnyModel::Ff(m) => m.params(),
            AnyModel::Bp(m) => m.params(),
        }
    }

    pub fn stage(&self) -> OutputStage {
        match self {
            AnyModel::Ff(m) => m.stage(),
            AnyModel::Bp(m) => m.stage(),
        }
    }

    pub fn count_parameters(&self) -> usize {
        match self {
            AnyModel::Ff(m) => m.count_parameters(),
            AnyModel::Bp(m) => m.count_parameters(),
        }
    }

    pub fn layers(&self) -> Vec<&DenseLayer> {
        match self {
            AnyModel::Ff(m) => m.layers().collect(),
            AnyModel::Bp(m) => m.layers().collect(),
        }
    }

    pub fn encode(&self, messages: &[usize]) -> Result<Array2<f64>> {
        match self {
            AnyModel::Ff(m) => m.encode(messages),
            AnyModel::Bp(m) => m.encode(messages),
        }
    }

    pub fn decode_received(&self, received: ArrayView2<f64>) -> Result<Vec<usize>> {
        match self {
            AnyModel::Ff(m) => m.decode_received(received),
            AnyModel::Bp(m) => m.decode_received(received),
        }
    }
}

impl From<FfAutoencoder> for AnyModel {
    fn from(m: FfAutoencoder) -> Self {
        AnyModel::Ff(m)
    }
}

impl From<BpAutoencoder> for AnyModel {
    fn from(m: BpAutoencoder) -> Self {
        AnyModel::Bp(m)
    }
}
