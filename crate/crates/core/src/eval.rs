//! Monte-Carlo block error rate estimation, Eb/N0 sweeps, reference curves
//! and the complexity models (pipeline timing, gradient memory).
//!
//! Simulation runs in chunks of [`CHUNK_BLOCKS`] blocks. Chunk `c` of a point
//! draws from `rng.derive(c)` and chunks are reduced in index order, stopping
//! at the first chunk where the error target is met. Results therefore do not
//! depend on how many worker threads evaluated the chunks.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;

use crate::channel::{ChannelConfig, ChannelDraw};
use crate::error::{ensure, Error, Result};
use crate::layers::DenseLayer;
use crate::models::{AnyModel, Architecture, BpAutoencoder, CodeParams, FfAutoencoder};
use crate::training::{train_ff, Algorithm, TrainConfig};
use crate::numerics::RngStream;

pub const CHUNK_BLOCKS: u64 = 1000;

/// Anything that maps messages to channel symbols and back.
pub trait Transceiver: Sync {
    fn code_params(&self) -> CodeParams;
    fn encode(&self, messages: &[usize]) -> Result<Array2<f64>>;
    fn decode(&self, received: ArrayView2<f64>) -> Result<Vec<usize>>;
}

impl Transceiver for FfAutoencoder {
    fn code_params(&self) -> CodeParams {
        self.params()
    }

    fn encode(&self, messages: &[usize]) -> Result<Array2<f64>> {
        FfAutoencoder::encode(self, messages)
    }

    fn decode(&self, received: ArrayView2<f64>) -> Result<Vec<usize>> {
        self.decode_received(received)
    }
}

impl Transceiver for BpAutoencoder {
    fn code_params(&self) -> CodeParams {
        self.params()
    }

    fn encode(&self, messages: &[usize]) -> Result<Array2<f64>> {
        BpAutoencoder::encode(self, messages)
    }

    fn decode(&self, received: ArrayView2<f64>) -> Result<Vec<usize>> {
        self.decode_received(received)
    }
}

impl Transceiver for AnyModel {
    fn code_params(&self) -> CodeParams {
        self.params()
    }

    fn encode(&self, messages: &[usize]) -> Result<Array2<f64>> {
        AnyModel::encode(self, messages)
    }

    fn decode(&self, received: ArrayView2<f64>) -> Result<Vec<usize>> {
        self.decode_received(received)
    }
}

/// Uncoded BPSK: bit `i` of the message is sent as symbol `i` (`0 → +1`,
/// `1 → −1`) and detected by sign.
#[derive(Clone, Copy, Debug)]
pub struct UncodedBpsk {
    params: CodeParams,
}

impl UncodedBpsk {
    pub fn new(k: u32) -> Result<Self> {
        Ok(Self {
            params: CodeParams::new(k, k as usize)?,
        })
    }
}

impl Transceiver for UncodedBpsk {
    fn code_params(&self) -> CodeParams {
        self.params
    }

    fn encode(&self, messages: &[usize]) -> Result<Array2<f64>> {
        let k = self.params.n();
        let mut x = Array2::zeros((messages.len(), k));
        for (mut row, &m) in x.rows_mut().into_iter().zip(messages) {
            ensure(m < self.params.q(), || format!("message {m} out of range"))?;
            for (i, v) in row.iter_mut().enumerate() {
                *v = if (m >> i) & 1 == 0 { 1.0 } else { -1.0 };
            }
        }
        Ok(x)
    }

    fn decode(&self, received: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(received
            .rows()
            .into_iter()
            .map(|row| row.iter().enumerate().filter(|(_, &y)| y < 0.0).fold(0, |m, (i, _)| m | (1 << i)))
            .collect())
    }
}

/// Monte-Carlo stopping rule for one Eb/N0 point.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopRule {
    pub min_errors: u64,
    pub max_blocks: u64,
}

impl Default for StopRule {
    fn default() -> Self {
        Self {
            min_errors: 100,
            max_blocks: 1_000_000,
        }
    }
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        ensure(self.max_blocks >= 1, || "max_blocks must be at least 1".into())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlerPoint {
    pub ebn0_db: f64,
    pub bler: f64,
    pub errors: u64,
    pub blocks: u64,
}

impl BlerPoint {
    /// Binomial standard error of the estimate.
    pub fn std_error(&self) -> f64 {
        (self.bler * (1.0 - self.bler) / self.blocks as f64).sqrt()
    }
}

/// Simulates one chunk of `blocks` blocks and returns the number of errors.
pub fn count_errors<T: Transceiver + ?Sized>(
    model: &T,
    cfg: &ChannelConfig,
    blocks: usize,
    rng: &mut RngStream,
) -> Result<u64> {
    let q = model.code_params().q();
    let messages: Vec<usize> = (0..blocks).map(|_| rng.index(q)).collect();
    let x = model.encode(&messages)?;
    let draw = ChannelDraw::sample(cfg, blocks, rng);
    let y = draw.apply(cfg, x.view())?;
    let decided = model.decode(y.view())?;
    Ok(decided.iter().zip(&messages).filter(|(a, b)| a != b).count() as u64)
}

/// Block error rate of `model` on `cfg` under `stop`.
pub fn estimate_bler<T: Transceiver + ?Sized>(
    model: &T,
    cfg: &ChannelConfig,
    stop: StopRule,
    rng: &RngStream,
) -> Result<BlerPoint> {
    stop.validate()?;
    ensure(cfg.n == model.code_params().n(), || {
        format!("channel blocklength {} does not match model blocklength {}", cfg.n, model.code_params().n())
    })?;
    let chunks = stop.max_blocks.div_ceil(CHUNK_BLOCKS);
    let chunk_len = |c: u64| CHUNK_BLOCKS.min(stop.max_blocks - c * CHUNK_BLOCKS);
    let wave = rayon::current_num_threads().max(1) as u64;
    let (mut errors, mut blocks) = (0u64, 0u64);
    let mut next = 0u64;
    while next < chunks {
        let end = (next + wave).min(chunks);
        let results: Vec<Result<u64>> = (next..end)
            .into_par_iter()
            .map(|c| count_errors(model, cfg, chunk_len(c) as usize, &mut rng.derive(c)))
            .collect();
        for (c, r) in (next..end).zip(results) {
            errors += r?;
            blocks += chunk_len(c);
            if errors >= stop.min_errors {
                return Ok(point(cfg.ebn0_db, errors, blocks));
            }
        }
        next = end;
    }
    Ok(point(cfg.ebn0_db, errors, blocks))
}

fn point(ebn0_db: f64, errors: u64, blocks: u64) -> BlerPoint {
    BlerPoint {
        ebn0_db,
        bler: errors as f64 / blocks as f64,
        errors,
        blocks,
    }
}

/// Eb/N0 grid and per-point stopping rule.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepSpec {
    pub ebn0_db: Vec<f64>,
    pub stop: StopRule,
}

impl SweepSpec {
    /// `start, start + step, …` up to and including `stop` (within 1e-9).
    pub fn grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>> {
        ensure(step > 0.0 && stop >= start, || format!("invalid grid {start}..{stop} step {step}"))?;
        let count = ((stop - start) / step + 1e-9).floor() as usize + 1;
        Ok((0..count).map(|i| start + i as f64 * step).collect())
    }

    pub fn validate(&self) -> Result<()> {
        ensure(!self.ebn0_db.is_empty(), || "Eb/N0 grid is empty".into())?;
        ensure(self.ebn0_db.windows(2).all(|w| w[0] < w[1]), || {
            "Eb/N0 grid must be strictly increasing".into()
        })?;
        self.stop.validate()
    }
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            ebn0_db: Self::grid(-4.0, 20.0, 1.0).expect("static grid"),
            stop: StopRule::default(),
        }
    }
}

/// One [`BlerPoint`] per grid entry; point `i` uses `rng.derive(i)`.
pub fn sweep<T: Transceiver + ?Sized>(
    model: &T,
    spec: &SweepSpec,
    channel: &ChannelConfig,
    rng: &RngStream,
) -> Result<Vec<BlerPoint>> {
    spec.validate()?;
    spec.ebn0_db
        .par_iter()
        .enumerate()
        .map(|(i, &db)| estimate_bler(model, &channel.with_ebn0(db)?, spec.stop, &rng.derive(i as u64)))
        .collect()
}

/// Held-out blocks with frozen messages and channel randomness, used to
/// track convergence during training.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub messages: Vec<usize>,
    pub draw: ChannelDraw,
    pub channel: ChannelConfig,
}

impl EvalSet {
    pub fn new(params: CodeParams, channel: ChannelConfig, blocks: usize, rng: &mut RngStream) -> Self {
        let messages = (0..blocks).map(|_| rng.index(params.q())).collect();
        let draw = ChannelDraw::sample(&channel, blocks, rng);
        Self {
            messages,
            draw,
            channel,
        }
    }

    pub fn bler<T: Transceiver + ?Sized>(&self, model: &T) -> Result<f64> {
        if self.messages.is_empty() {
            return Ok(0.0);
        }
        let x = model.encode(&self.messages)?;
        let y = self.draw.apply(&self.channel, x.view())?;
        let decided = model.decode(y.view())?;
        let errors = decided.iter().zip(&self.messages).filter(|(a, b)| a != b).count();
        Ok(errors as f64 / self.messages.len() as f64)
    }
}

/// Q(x) = ½ erfc(x / √2).
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / std::f64::consts::SQRT_2)
}

/// Analytic BLER of uncoded BPSK carrying `k` bits.
pub fn uncoded_bpsk_reference(ebn0_db: f64, k: u32) -> Result<f64> {
    ensure(k >= 1, || "k must be at least 1".into())?;
    let p = q_function((2.0 * 10f64.powf(ebn0_db / 10.0)).sqrt());
    Ok(1.0 - (1.0 - p).powi(k as i32))
}

/// Time units to update an `N`-layer network: `(2N, N + 1)` for
/// backpropagation and a pipelined layer-local update respectively.
pub fn pipeline_timing_model(layers: usize) -> Result<(usize, usize)> {
    ensure(layers >= 1, || "layer count must be at least 1".into())?;
    Ok((2 * layers, layers + 1))
}

/// Gradient accounting mode for [`gradient_memory`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientStorage {
    /// Every parameter's gradient is held at once.
    EndToEnd,
    /// Gradients exist for one layer at a time.
    LayerLocal,
}

/// Number of gradient scalars that must be held simultaneously.
pub fn gradient_memory(layers: &[&DenseLayer], storage: GradientStorage) -> usize {
    let counts = layers.iter().map(|l| l.param_count());
    match storage {
        GradientStorage::EndToEnd => counts.sum(),
        GradientStorage::LayerLocal => counts.max().unwrap_or(0),
    }
}

/// [`gradient_memory`] for a model under the storage its trainer implies.
pub fn gradient_memory_report(model: &AnyModel) -> usize {
    let storage = match model {
        AnyModel::Ff(_) => GradientStorage::LayerLocal,
        AnyModel::Bp(_) => GradientStorage::EndToEnd,
    };
    gradient_memory(&model.layers(), storage)
}

/// Formats a float with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sweep_csv(points: &[BlerPoint]) -> String {
    let mut out = String::from("EbN0_dB,bler,errors,blocks\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", fmt_f64(p.ebn0_db), fmt_f64(p.bler), p.errors, p.blocks);
    }
    out
}

/// One cell of a network-size table.
#[derive(Clone, Debug, PartialEq)]
pub struct SizeCell {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub width: usize,
    /// NaN (written as `NaN`) when `failure` is set.
    pub bler: f64,
    /// Training diverged or the trained encoder emitted an all-zero codeword.
    pub failure: Option<String>,
}

pub fn size_sweep_csv(cells: &[SizeCell]) -> String {
    let mut out = String::from("L,K,W,bler\n");
    for c in cells {
        let _ = writeln!(out, "{},{},{},{}", c.encoder_layers, c.decoder_layers, c.width, fmt_f64(c.bler));
    }
    out
}

/// Network sizes of a size sweep.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SizeGrid {
    pub encoder_layers: Vec<usize>,
    pub decoder_layers: Vec<usize>,
    pub widths: Vec<usize>,
}

impl Default for SizeGrid {
    fn default() -> Self {
        Self {
            encoder_layers: vec![2, 3, 4],
            decoder_layers: vec![2, 3, 4],
            widths: vec![16, 80],
        }
    }
}

impl SizeGrid {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("encoder_layers", &self.encoder_layers),
            ("decoder_layers", &self.decoder_layers),
            ("widths", &self.widths),
        ] {
            ensure(!v.is_empty() && v.iter().all(|&x| x >= 1), || format!("size grid `{name}` must be non-empty and positive"))?;
        }
        Ok(())
    }

    /// Cells in output order: width, then encoder depth, then decoder depth.
    pub fn cells(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for &w in &self.widths {
            for &l in &self.encoder_layers {
                for &k in &self.decoder_layers {
                    out.push((l, k, w));
                }
            }
        }
        out
    }
}

/// Trains one forward-forward model per grid cell with `base`'s
/// hyperparameters and evaluates it on `eval_channel`. Cell `i` evaluates
/// with `rng.derive(i)`. A cell that diverges or ends with a zero-energy
/// codeword is recorded with its failure; other errors abort the sweep.
pub fn size_sweep(
    base: &TrainConfig,
    grid: &SizeGrid,
    eval_channel: &ChannelConfig,
    stop: StopRule,
    rng: &RngStream,
) -> Result<Vec<SizeCell>> {
    ensure(base.algorithm == Algorithm::Ff, || "size sweep trains forward-forward models".into())?;
    grid.validate()?;
    grid.cells()
        .into_iter()
        .enumerate()
        .map(|(i, (l, k, w))| {
            let mut cfg = base.clone();
            cfg.arch = Architecture { encoder_layers: l, decoder_layers: k, width: w };
            cfg.eval_stride = 0;
            let outcome = train_ff(&cfg)
                .and_then(|(model, _)| estimate_bler(&model, eval_channel, stop, &rng.derive(i as u64)));
            let (bler, failure) = match outcome {
                Ok(point) => (point.bler, None),
                Err(e @ (Error::DegenerateInput(_) | Error::NonFinite { .. })) => (f64::NAN, Some(e.to_string())),
                Err(e) => return Err(e),
            };
            Ok(SizeCell { encoder_layers: l, decoder_layers: k, width: w, bler, failure })
        })
        .collect()
}

/// Linear interpolation in `log10(BLER)` of the first Eb/N0 at which the
/// curve reaches `target`. `None` if it never does.
pub fn ebn0_at_bler(points: &[BlerPoint], target: f64) -> Option<f64> {
    let idx = points.iter().position(|p| p.bler <= target)?;
    if idx == 0 {
        return Some(points[0].ebn0_db);
    }
    let (a, b) = (&points[idx - 1], &points[idx]);
    if b.bler <= 0.0 {
        return Some(b.ebn0_db);
    }
    let (la, lb, lt) = (a.bler.log10(), b.bler.log10(), target.log10());
    let t = if la == lb { 1.0 } else { (la - lt) / (la - lb) };
    Some(a.ebn0_db + t * (b.ebn0_db - a.ebn0_db))
}
