//! The three trainers: forward-forward, end-to-end backpropagation, and
//! alternating backpropagation/policy-gradient training.
//!
//! Each trainer owns its model, optimizer state and random streams and
//! advances one iteration per [`Trainer::step`] call:
//!
//! * forward-forward: one batch through positive, negative and neutral
//!   passes; each encoder/decoder layer takes an SGD step on its own goodness
//!   gradient, then the classifier takes an SGD step on the neutral-pass CCE.
//! * backpropagation: one batch, one Adam step on all parameters.
//! * alternating: `rounds` decoder batches with the true gradient followed by
//!   `rounds` encoder batches with the score-function gradient estimate.

use std::fmt::Write as _;

use ndarray::{Array1, Array2, Axis};

use crate::channel::{ChannelConfig, ChannelDraw, ChannelKind, OutputStage};
use crate::error::{ensure, invalid, Error, Result};
use crate::eval::{fmt_f64, EvalSet};
use crate::layers::{
    softmax_cce_batch, AdamConfig, AdamState, DenseLayer, LayerGrad, Polarity, SgdConfig, SgdState,
};
use crate::models::{AnyModel, Architecture, BpAutoencoder, CodeParams, FfAutoencoder, PassKind};
use crate::numerics::{make_rng, RngStream};

/// Stream ids derived from the run seed.
pub const STREAM_INIT: u64 = 0;
pub const STREAM_TRAIN: u64 = 1;
pub const STREAM_EVAL_SET: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Ff,
    Bp,
    BpRl,
}

impl Algorithm {
    pub fn as_str(self) -> &'static str {
        match self {
            Algorithm::Ff => "ff",
            Algorithm::Bp => "bp",
            Algorithm::BpRl => "bp-rl",
        }
    }
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ff" => Ok(Algorithm::Ff),
            "bp" => Ok(Algorithm::Bp),
            "bp-rl" => Ok(Algorithm::BpRl),
            other => Err(invalid(format!("unknown algorithm `{other}` (expected ff, bp or bp-rl)"))),
        }
    }
}

/// Exploration settings of the alternating trainer.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RlConfig {
    /// Standard deviation of the Gaussian exploration noise.
    pub sigma: f64,
    /// Batches per decoder phase and per encoder phase.
    pub rounds: usize,
}

impl Default for RlConfig {
    fn default() -> Self {
        Self { sigma: 0.1, rounds: 10 }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub algorithm: Algorithm,
    pub channel: ChannelKind,
    pub stage: OutputStage,
    pub train_ebn0_db: f64,
    pub code: CodeParams,
    pub arch: Architecture,
    pub iterations: usize,
    pub batch_size: usize,
    /// Adam learning rate (backpropagation trainers).
    pub lr: f64,
    /// SGD settings of the goodness-trained layers.
    pub ff_net: SgdConfig,
    /// SGD settings of the classifier.
    pub ff_classifier: SgdConfig,
    pub rl: RlConfig,
    pub seed: u64,
    /// Log every `eval_stride` iterations; 0 disables logging.
    pub eval_stride: usize,
    pub eval_blocks: usize,
}

impl TrainConfig {
    /// Published hyperparameters for `algorithm`.
    pub fn defaults(algorithm: Algorithm) -> Self {
        let (arch, iterations, eval_stride) = match algorithm {
            Algorithm::Bp => (Architecture { encoder_layers: 2, decoder_layers: 2, width: 16 }, 5000, 10),
            Algorithm::BpRl => (Architecture { encoder_layers: 2, decoder_layers: 2, width: 16 }, 18000, 1),
            Algorithm::Ff => (Architecture { encoder_layers: 4, decoder_layers: 4, width: 80 }, 8200, 5),
        };
        Self {
            algorithm,
            channel: ChannelKind::Awgn,
            stage: OutputStage::Normalize,
            train_ebn0_db: 5.0,
            code: CodeParams::default(),
            arch,
            iterations,
            batch_size: 250,
            lr: 0.001,
            ff_net: SgdConfig { lr: 0.001, weight_decay: 0.0003, momentum: 0.9 },
            ff_classifier: SgdConfig { lr: 0.005, weight_decay: 0.003, momentum: 0.9 },
            rl: RlConfig::default(),
            seed: 0,
            eval_stride,
            eval_blocks: 1000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.batch_size >= 1, || "batch_size must be at least 1".into())?;
        ensure(self.lr > 0.0, || "lr must be positive".into())?;
        for (name, sgd) in [("ff_net", &self.ff_net), ("ff_classifier", &self.ff_classifier)] {
            ensure(sgd.lr > 0.0 && sgd.weight_decay >= 0.0 && (0.0..1.0).contains(&sgd.momentum), || {
                format!("{name}: invalid SGD settings {sgd:?}")
            })?;
        }
        ensure(self.rl.sigma > 0.0 && self.rl.rounds >= 1, || {
            format!("invalid exploration settings {:?}", self.rl)
        })?;
        self.train_channel().map(|_| ())
    }

    pub fn train_channel(&self) -> Result<ChannelConfig> {
        ChannelConfig::new(self.channel, self.code.rate(), self.train_ebn0_db, self.code.n())
    }
}

/// One logged point of a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    /// BLER on the fixed evaluation set at the training Eb/N0.
    pub bler: f64,
    /// Per-layer goodness losses (positive + negative) for forward-forward,
    /// otherwise the CCE loss.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if let Some(last) = self.rows.last() {
            ensure(row.iteration > last.iteration, || "log iterations must increase".into())?;
        }
        self.rows.push(row);
        Ok(())
    }

    /// First logged iteration with BLER strictly below `threshold`.
    pub fn first_below(&self, threshold: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.bler < threshold).map(|r| r.iteration)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("iter,bler\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{}", r.iteration, fmt_f64(r.bler));
        }
        out
    }
}

/// Diagnostics of one forward-forward iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct FfStepStats {
    pub positive_losses: Vec<f64>,
    pub negative_losses: Vec<f64>,
    pub positive_goodness: Vec<f64>,
    pub negative_goodness: Vec<f64>,
    pub positive_cce: f64,
    pub negative_cce: f64,
    pub neutral_cce: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum StepStats {
    Ff(FfStepStats),
    /// Mean CCE of the (last) batch.
    Cce(f64),
}

impl StepStats {
    pub fn losses(&self) -> Vec<f64> {
        match self {
            StepStats::Ff(s) => s.positive_losses.iter().zip(&s.negative_losses).map(|(p, n)| p + n).collect(),
            StepStats::Cce(l) => vec![*l],
        }
    }
}

fn check_finite(value: f64, what: &'static str, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { what, iteration })
    }
}

fn check_params<'a>(layers: impl IntoIterator<Item = &'a DenseLayer>, iteration: usize) -> Result<()> {
    let finite = layers
        .into_iter()
        .all(|l| l.weights().iter().chain(l.bias().iter()).all(|v| v.is_finite()));
    if finite {
        Ok(())
    } else {
        Err(Error::NonFinite { what: "parameters", iteration })
    }
}

fn sample_messages(rng: &mut RngStream, q: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.index(q)).collect()
}

/// Forward-forward trainer.
#[derive(Clone, Debug)]
pub struct FfTrainer {
    cfg: TrainConfig,
    channel: ChannelConfig,
    model: FfAutoencoder,
    encoder_opt: Vec<SgdState>,
    decoder_opt: Vec<SgdState>,
    classifier_opt: SgdState,
    rng: RngStream,
    iteration: usize,
}

impl FfTrainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        ensure(cfg.algorithm == Algorithm::Ff, || "forward-forward trainer needs algorithm ff".into())?;
        cfg.validate()?;
        let model = FfAutoencoder::new(cfg.code, cfg.arch, cfg.stage, &mut make_rng(cfg.seed, STREAM_INIT))?;
        Self::from_model(cfg, model)
    }

    /// Continues training from an existing model with fresh optimizer state.
    pub fn from_model(cfg: &TrainConfig, model: FfAutoencoder) -> Result<Self> {
        let per_layer = |layers: &[DenseLayer]| {
            layers
                .iter()
                .map(|l| SgdState::new(cfg.ff_net, std::slice::from_ref(l)))
                .collect::<Vec<_>>()
        };
        Ok(Self {
            channel: cfg.train_channel()?,
            encoder_opt: per_layer(model.encoder()),
            decoder_opt: per_layer(model.decoder()),
            classifier_opt: SgdState::new(cfg.ff_classifier, std::slice::from_ref(model.classifier())),
            cfg: cfg.clone(),
            model,
            rng: make_rng(cfg.seed, STREAM_TRAIN),
            iteration: 0,
        })
    }

    pub fn model(&self) -> &FfAutoencoder {
        &self.model
    }

    pub fn into_model(self) -> FfAutoencoder {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self) -> Result<FfStepStats> {
        let it = self.iteration + 1;
        let q = self.cfg.code.q();
        let messages = sample_messages(&mut self.rng, q, self.cfg.batch_size);
        let pos = self.model.pass(&messages, PassKind::Positive, &self.channel, &mut self.rng)?;
        let neg = self.model.pass(&messages, PassKind::Negative, &self.channel, &mut self.rng)?;
        let neutral = self.model.pass(&messages, PassKind::Neutral, &self.channel, &mut self.rng)?;
        for l in pos.layer_losses().iter().chain(&neg.layer_losses()) {
            check_finite(*l, "goodness loss", it)?;
        }
        check_finite(neutral.cce.mean_loss(), "classifier loss", it)?;

        // Layer-local updates: layer j only ever sees its own tapes.
        let enc_thr = self.model.encoder_thresholds();
        let dec_thr = self.model.decoder_thresholds();
        let stacks = [
            (&mut self.model.encoder, &mut self.encoder_opt, &pos.encoder.tapes, &neg.encoder.tapes, &enc_thr),
            (&mut self.model.decoder, &mut self.decoder_opt, &pos.decoder.tapes, &neg.decoder.tapes, &dec_thr),
        ];
        for (layers, opts, pos_tapes, neg_tapes, thresholds) in stacks {
            for (j, layer) in layers.iter_mut().enumerate() {
                let mut grad = layer.ff_grad(&pos_tapes[j], thresholds[j], Polarity::Positive)?;
                grad.add_assign(&layer.ff_grad(&neg_tapes[j], thresholds[j], Polarity::Negative)?);
                opts[j].step(std::slice::from_mut(layer), &[grad])?;
            }
        }

        let (cls_grad, _) = self
            .model
            .classifier
            .backward(&neutral.classifier_tape, neutral.cce.logit_grad.view())?;
        self.classifier_opt
            .step(std::slice::from_mut(&mut self.model.classifier), &[cls_grad])?;
        check_params(self.model.layers(), it)?;

        self.iteration = it;
        Ok(FfStepStats {
            positive_losses: pos.layer_losses(),
            negative_losses: neg.layer_losses(),
            positive_goodness: pos.encoder.mean_goodness().into_iter().chain(pos.decoder.mean_goodness()).collect(),
            negative_goodness: neg.encoder.mean_goodness().into_iter().chain(neg.decoder.mean_goodness()).collect(),
            positive_cce: pos.cce.mean_loss(),
            negative_cce: neg.cce.mean_loss(),
            neutral_cce: neutral.cce.mean_loss(),
        })
    }
}

/// End-to-end backpropagation trainer (STE through the quantizer).
#[derive(Clone, Debug)]
pub struct BpTrainer {
    cfg: TrainConfig,
    channel: ChannelConfig,
    model: BpAutoencoder,
    encoder_opt: AdamState,
    decoder_opt: AdamState,
    rng: RngStream,
    iteration: usize,
}

impl BpTrainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        ensure(cfg.algorithm == Algorithm::Bp, || "backpropagation trainer needs algorithm bp".into())?;
        cfg.validate()?;
        let model = BpAutoencoder::new(cfg.code, cfg.arch, cfg.stage, &mut make_rng(cfg.seed, STREAM_INIT))?;
        let adam = AdamConfig::with_lr(cfg.lr);
        Ok(Self {
            channel: cfg.train_channel()?,
            encoder_opt: AdamState::new(adam, model.encoder()),
            decoder_opt: AdamState::new(adam, model.decoder()),
            cfg: cfg.clone(),
            model,
            rng: make_rng(cfg.seed, STREAM_TRAIN),
            iteration: 0,
        })
    }

    pub fn model(&self) -> &BpAutoencoder {
        &self.model
    }

    pub fn into_model(self) -> BpAutoencoder {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn step(&mut self) -> Result<f64> {
        let it = self.iteration + 1;
        let messages = sample_messages(&mut self.rng, self.cfg.code.q(), self.cfg.batch_size);
        let fwd = self.model.forward(&messages, &self.channel, &mut self.rng)?;
        let cce = softmax_cce_batch(fwd.logits.view(), &messages)?;
        check_finite(cce.mean_loss(), "CCE loss", it)?;
        let grads = self.model.backward(&fwd, cce.logit_grad.view())?;
        self.encoder_opt.step(&mut self.model.encoder, &grads.encoder)?;
        self.decoder_opt.step(&mut self.model.decoder, &grads.decoder)?;
        check_params(self.model.layers(), it)?;
        self.iteration = it;
        Ok(cce.mean_loss())
    }
}

/// Score-function gradient of `J = (1/B) Σ_b ℓ_b · log p(x_p,b | x_b)` with
/// respect to the policy mean `x`, for Gaussian exploration
/// `x_p = x + w`, `w ~ N(0, σ² I)`: `(1/B) · ℓ_b · (x_p − x) / σ²`.
pub fn score_function_gradient(losses: &Array1<f64>, perturbation: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let batch = losses.len().max(1) as f64;
    let coeff = losses.mapv(|l| l / (sigma * sigma * batch));
    perturbation * &coeff.insert_axis(Axis(1))
}

/// Alternating trainer: true-gradient decoder phases and policy-gradient
/// encoder phases. The channel (and the quantizer, when enabled) is treated
/// as a black box by the encoder.
#[derive(Clone, Debug)]
pub struct BpRlTrainer {
    cfg: TrainConfig,
    channel: ChannelConfig,
    model: BpAutoencoder,
    encoder_opt: AdamState,
    decoder_opt: AdamState,
    rng: RngStream,
    iteration: usize,
}

impl BpRlTrainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        ensure(cfg.algorithm == Algorithm::BpRl, || "alternating trainer needs algorithm bp-rl".into())?;
        cfg.validate()?;
        let model = BpAutoencoder::new(cfg.code, cfg.arch, cfg.stage, &mut make_rng(cfg.seed, STREAM_INIT))?;
        let adam = AdamConfig::with_lr(cfg.lr);
        Ok(Self {
            channel: cfg.train_channel()?,
            encoder_opt: AdamState::new(adam, model.encoder()),
            decoder_opt: AdamState::new(adam, model.decoder()),
            cfg: cfg.clone(),
            model,
            rng: make_rng(cfg.seed, STREAM_TRAIN),
            iteration: 0,
        })
    }

    pub fn model(&self) -> &BpAutoencoder {
        &self.model
    }

    pub fn into_model(self) -> BpAutoencoder {
        self.model
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// One decoder batch with the encoder frozen.
    pub fn decoder_round(&mut self) -> Result<f64> {
        let messages = sample_messages(&mut self.rng, self.cfg.code.q(), self.cfg.batch_size);
        let fwd = self.model.forward(&messages, &self.channel, &mut self.rng)?;
        let cce = softmax_cce_batch(fwd.logits.view(), &messages)?;
        check_finite(cce.mean_loss(), "decoder CCE loss", self.iteration + 1)?;
        let (grads, _) = self.model.decoder_backward(&fwd, cce.logit_grad.view())?;
        self.decoder_opt.step(&mut self.model.decoder, &grads)?;
        check_params(&self.model.decoder, self.iteration + 1)?;
        Ok(cce.mean_loss())
    }

    /// One encoder batch with the decoder frozen.
    pub fn encoder_round(&mut self) -> Result<f64> {
        let sigma = self.cfg.rl.sigma;
        let messages = sample_messages(&mut self.rng, self.cfg.code.q(), self.cfg.batch_size);
        let (tapes, a) = self.model.encoder_forward(&messages)?;
        let perturbation = Array2::from_shape_simple_fn(a.raw_dim(), || sigma * self.rng.standard_normal());
        // The exploration noise sits on the policy output: after power
        // normalization, or before the quantizer when quantizing.
        let (policy_mean, x_p) = match self.model.stage() {
            OutputStage::Normalize => {
                let x = self.model.stage().apply(a.view())?;
                let x_p = &x + &perturbation;
                (x, x_p)
            }
            OutputStage::Quantize => {
                let a_p = &a + &perturbation;
                (a.clone(), self.model.stage().apply(a_p.view())?)
            }
        };
        let draw = ChannelDraw::sample(&self.channel, messages.len(), &mut self.rng);
        let y = draw.apply(&self.channel, x_p.view())?;
        let (_, logits) = self.model.decoder_forward(y.view())?;
        let cce = softmax_cce_batch(logits.view(), &messages)?;
        let surrogate: f64 = cce
            .losses
            .iter()
            .zip(perturbation.rows())
            .map(|(l, w)| -l * w.dot(&w) / (2.0 * sigma * sigma))
            .sum::<f64>()
            / messages.len() as f64;
        check_finite(surrogate, "policy surrogate", self.iteration + 1)?;
        let d_mean = score_function_gradient(&cce.losses, &perturbation, sigma);
        let d_a = match self.model.stage() {
            OutputStage::Normalize => self.model.stage().backward(a.view(), d_mean.view())?,
            OutputStage::Quantize => d_mean,
        };
        debug_assert_eq!(policy_mean.dim(), d_a.dim());
        let grads = self.model.encoder_backward(&tapes, d_a.view())?;
        self.encoder_opt.step(&mut self.model.encoder, &grads)?;
        check_params(&self.model.encoder, self.iteration + 1)?;
        Ok(cce.mean_loss())
    }

    /// One iteration: a full decoder phase then a full encoder phase.
    pub fn step(&mut self) -> Result<f64> {
        let mut loss = 0.0;
        for _ in 0..self.cfg.rl.rounds {
            loss = self.decoder_round()?;
        }
        for _ in 0..self.cfg.rl.rounds {
            self.encoder_round()?;
        }
        self.iteration += 1;
        Ok(loss)
    }
}

/// Any of the three trainers behind one interface.
#[derive(Clone, Debug)]
pub enum Trainer {
    Ff(FfTrainer),
    Bp(BpTrainer),
    BpRl(BpRlTrainer),
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        Ok(match cfg.algorithm {
            Algorithm::Ff => Trainer::Ff(FfTrainer::new(cfg)?),
            Algorithm::Bp => Trainer::Bp(BpTrainer::new(cfg)?),
            Algorithm::BpRl => Trainer::BpRl(BpRlTrainer::new(cfg)?),
        })
    }

    pub fn step(&mut self) -> Result<StepStats> {
        Ok(match self {
            Trainer::Ff(t) => StepStats::Ff(t.step()?),
            Trainer::Bp(t) => StepStats::Cce(t.step()?),
            Trainer::BpRl(t) => StepStats::Cce(t.step()?),
        })
    }

    pub fn iteration(&self) -> usize {
        match self {
            Trainer::Ff(t) => t.iteration(),
            Trainer::Bp(t) => t.iteration(),
            Trainer::BpRl(t) => t.iteration(),
        }
    }

    /// BLER of the current parameters on `set`.
    pub fn bler(&self, set: &EvalSet) -> Result<f64> {
        match self {
            Trainer::Ff(t) => set.bler(t.model()),
            Trainer::Bp(t) => set.bler(t.model()),
            Trainer::BpRl(t) => set.bler(t.model()),
        }
    }

    pub fn snapshot(&self) -> AnyModel {
        match self {
            Trainer::Ff(t) => AnyModel::Ff(t.model().clone()),
            Trainer::Bp(t) => AnyModel::Bp(t.model().clone()),
            Trainer::BpRl(t) => AnyModel::Bp(t.model().clone()),
        }
    }

    pub fn into_model(self) -> AnyModel {
        match self {
            Trainer::Ff(t) => AnyModel::Ff(t.into_model()),
            Trainer::Bp(t) => AnyModel::Bp(t.into_model()),
            Trainer::BpRl(t) => AnyModel::Bp(t.into_model()),
        }
    }
}

/// The fixed evaluation set a run logs against.
pub fn convergence_eval_set(cfg: &TrainConfig) -> Result<EvalSet> {
    Ok(EvalSet::new(
        cfg.code,
        cfg.train_channel()?,
        cfg.eval_blocks,
        &mut make_rng(cfg.seed, STREAM_EVAL_SET),
    ))
}

/// What a run hook wants the loop to do next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

/// Runs `cfg.iterations` iterations, logging every `cfg.eval_stride`.
///
/// `hook` sees the trainer after every iteration (and the new log row when
/// one was written) and may stop the run early.
pub fn run_training<F>(cfg: &TrainConfig, mut hook: F) -> Result<(AnyModel, TrainLog)>
where
    F: FnMut(&Trainer, Option<&LogRow>) -> Result<Control>,
{
    let mut trainer = Trainer::new(cfg)?;
    let eval_set = if cfg.eval_stride > 0 { Some(convergence_eval_set(cfg)?) } else { None };
    let mut log = TrainLog::default();
    for _ in 0..cfg.iterations {
        let stats = trainer.step()?;
        let it = trainer.iteration();
        let mut row = None;
        if let Some(set) = eval_set.as_ref().filter(|_| it % cfg.eval_stride == 0) {
            log.push(LogRow {
                iteration: it,
                bler: trainer.bler(set)?,
                losses: stats.losses(),
            })?;
            row = log.rows.last();
        }
        if hook(&trainer, row)? == Control::Stop {
            break;
        }
    }
    Ok((trainer.into_model(), log))
}

pub fn train_ff(cfg: &TrainConfig) -> Result<(FfAutoencoder, TrainLog)> {
    ensure(cfg.algorithm == Algorithm::Ff, || "train_ff needs algorithm ff".into())?;
    match run_training(cfg, |_, _| Ok(Control::Continue))? {
        (AnyModel::Ff(m), log) => Ok((m, log)),
        _ => unreachable!("forward-forward trainer yields a forward-forward model"),
    }
}

pub fn train_bp(cfg: &TrainConfig) -> Result<(BpAutoencoder, TrainLog)> {
    ensure(cfg.algorithm == Algorithm::Bp, || "train_bp needs algorithm bp".into())?;
    match run_training(cfg, |_, _| Ok(Control::Continue))? {
        (AnyModel::Bp(m), log) => Ok((m, log)),
        _ => unreachable!("backpropagation trainer yields a backpropagation model"),
    }
}

pub fn train_bp_rl(cfg: &TrainConfig) -> Result<(BpAutoencoder, TrainLog)> {
    ensure(cfg.algorithm == Algorithm::BpRl, || "train_bp_rl needs algorithm bp-rl".into())?;
    match run_training(cfg, |_, _| Ok(Control::Continue))? {
        (AnyModel::Bp(m), log) => Ok((m, log)),
        _ => unreachable!("alternating trainer yields a backpropagation model"),
    }
}

/// Gradient slot for one layer, kept for callers that assemble gradients
/// manually.
pub fn zero_grads(layers: &[DenseLayer]) -> Vec<LayerGrad> {
    layers.iter().map(LayerGrad::zeros_like).collect()
}
