//! Encoder output stages and the stochastic channels.
//!
//! A block of `n` real symbols passes through `y = h·x + w` where `w` is
//! i.i.d. N(0, σ²) with `σ² = (2R·Eb/N0)⁻¹`. On the AWGN channel `h = 1`; on
//! the Rayleigh block-fading channel one `h` with E[h²] = 1 is drawn per block
//! and held over all of its symbols. The receiver sees `y` only.

use ndarray::{Array2, ArrayView2, Axis, Zip};

use crate::error::{ensure, Error, Result};
use crate::layers::NORM_EPS;
use crate::numerics::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ChannelKind {
    Awgn,
    /// Real-valued Rayleigh block fading.
    Rbf,
}

impl ChannelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChannelKind::Awgn => "awgn",
            ChannelKind::Rbf => "rbf",
        }
    }
}

impl std::str::FromStr for ChannelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "awgn" => Ok(ChannelKind::Awgn),
            "rbf" => Ok(ChannelKind::Rbf),
            other => Err(Error::InvalidArgument(format!("unknown channel kind `{other}` (expected awgn or rbf)"))),
        }
    }
}

/// How the encoder output is mapped onto channel symbols.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OutputStage {
    /// Scale each block to energy `n`.
    Normalize,
    /// BPSK by sign, `sign(0) = +1`.
    Quantize,
}

impl OutputStage {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputStage::Normalize => "normalize",
            OutputStage::Quantize => "quantize",
        }
    }

    /// Applies the stage to every row of `a`.
    pub fn apply(self, a: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            OutputStage::Normalize => normalize_power_rows(a),
            OutputStage::Quantize => Ok(a.mapv(sign)),
        }
    }

    /// Backward rule of the stage: the exact Jacobian for normalization and
    /// the saturated straight-through estimator for quantization.
    pub fn backward(self, a: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure(a.dim() == upstream.dim(), || {
            format!("stage input {:?} and upstream {:?} differ in shape", a.dim(), upstream.dim())
        })?;
        match self {
            OutputStage::Normalize => Ok(normalize_power_backward(a, upstream)),
            OutputStage::Quantize => {
                let mut out = upstream.to_owned();
                Zip::from(&mut out).and(&a).for_each(|d, &a| *d *= ste_mask(a));
                Ok(out)
            }
        }
    }
}

impl std::str::FromStr for OutputStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalize" => Ok(OutputStage::Normalize),
            "quantize" => Ok(OutputStage::Quantize),
            other => Err(Error::InvalidArgument(format!(
                "unknown output stage `{other}` (expected normalize or quantize)"
            ))),
        }
    }
}

/// σ² = 1 / (2R · 10^(Eb/N0 / 10)).
pub fn noise_variance(rate: f64, ebn0_db: f64) -> Result<f64> {
    ensure(rate > 0.0 && rate.is_finite(), || format!("code rate must be positive, got {rate}"))?;
    ensure(!ebn0_db.is_nan() && ebn0_db != f64::NEG_INFINITY, || {
        format!("Eb/N0 must be a number or +inf, got {ebn0_db}")
    })?;
    Ok(1.0 / (2.0 * rate * 10f64.powf(ebn0_db / 10.0)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelConfig {
    pub kind: ChannelKind,
    /// Code rate `k / n`.
    pub rate: f64,
    /// `+inf` gives a noiseless channel.
    pub ebn0_db: f64,
    /// Blocklength.
    pub n: usize,
    /// Replaces the Rayleigh draw by a constant gain (no randomness consumed).
    pub fixed_gain: Option<f64>,
}

impl ChannelConfig {
    pub fn new(kind: ChannelKind, rate: f64, ebn0_db: f64, n: usize) -> Result<Self> {
        ensure(n >= 1, || "blocklength must be at least 1".into())?;
        noise_variance(rate, ebn0_db)?;
        Ok(Self {
            kind,
            rate,
            ebn0_db,
            n,
            fixed_gain: None,
        })
    }

    pub fn with_ebn0(self, ebn0_db: f64) -> Result<Self> {
        Self::new(self.kind, self.rate, ebn0_db, self.n).map(|c| Self {
            fixed_gain: self.fixed_gain,
            ..c
        })
    }

    pub fn with_fixed_gain(self, gain: f64) -> Self {
        Self {
            fixed_gain: Some(gain),
            ..self
        }
    }

    pub fn noise_variance(&self) -> f64 {
        noise_variance(self.rate, self.ebn0_db).expect("validated at construction")
    }

    fn draw_gain(&self, rng: &mut RngStream) -> f64 {
        match (self.kind, self.fixed_gain) {
            (ChannelKind::Awgn, _) => 1.0,
            (ChannelKind::Rbf, Some(g)) => g,
            (ChannelKind::Rbf, None) => rng.rayleigh(),
        }
    }
}

/// Per-block channel randomness: one gain and `n` unit-variance noise draws
/// per block. Kept separate from the codewords so a realization can be
/// frozen and replayed (fixed evaluation sets, finite-difference checks).
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelDraw {
    pub gains: Vec<f64>,
    pub noise: Array2<f64>,
}

impl ChannelDraw {
    /// Draws `blocks` realizations. Per block the gain is drawn first, then the
    /// `n` noise samples.
    pub fn sample(cfg: &ChannelConfig, blocks: usize, rng: &mut RngStream) -> Self {
        let mut gains = Vec::with_capacity(blocks);
        let mut noise = Array2::zeros((blocks, cfg.n));
        for mut row in noise.rows_mut() {
            gains.push(cfg.draw_gain(rng));
            row.iter_mut().for_each(|w| *w = rng.standard_normal());
        }
        Self { gains, noise }
    }

    pub fn blocks(&self) -> usize {
        self.gains.len()
    }

    /// `y = h·x + σ·w` for every block.
    pub fn apply(&self, cfg: &ChannelConfig, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure(x.dim() == self.noise.dim(), || {
            format!("codeword batch {:?} does not match channel draw {:?}", x.dim(), self.noise.dim())
        })?;
        let sigma = cfg.noise_variance().sqrt();
        let mut y = x.to_owned();
        for ((mut row, w), &h) in y.rows_mut().into_iter().zip(self.noise.rows()).zip(&self.gains) {
            Zip::from(&mut row).and(&w).for_each(|v, &w| *v = h * *v + sigma * w);
        }
        Ok(y)
    }
}

/// Result of sending one block.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    pub y: Vec<f64>,
    pub gain: f64,
}

pub fn transmit(cfg: &ChannelConfig, x: &[f64], rng: &mut RngStream) -> Result<Transmission> {
    ensure(x.len() == cfg.n, || format!("codeword length {} but blocklength {}", x.len(), cfg.n))?;
    let view = ArrayView2::from_shape((1, x.len()), x).expect("single row");
    let (y, gains) = transmit_batch(cfg, view, rng)?;
    Ok(Transmission {
        y: y.into_raw_vec_and_offset().0,
        gain: gains[0],
    })
}

/// Sends every row of `x` as an independent block.
pub fn transmit_batch(cfg: &ChannelConfig, x: ArrayView2<f64>, rng: &mut RngStream) -> Result<(Array2<f64>, Vec<f64>)> {
    ensure(x.ncols() == cfg.n, || format!("codeword length {} but blocklength {}", x.ncols(), cfg.n))?;
    let draw = ChannelDraw::sample(cfg, x.nrows(), rng);
    let y = draw.apply(cfg, x)?;
    Ok((y, draw.gains))
}

pub(crate) fn sign(a: f64) -> f64 {
    if a >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

fn ste_mask(a: f64) -> f64 {
    if a.abs() < 1.0 {
        1.0
    } else {
        0.0
    }
}

/// `x = √n · a / ‖a‖₂`.
pub fn normalize_power(a: &[f64]) -> Result<Vec<f64>> {
    let norm = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > NORM_EPS) {
        return Err(Error::DegenerateInput(format!("cannot normalize a block of norm {norm}")));
    }
    let scale = (a.len() as f64).sqrt() / norm;
    Ok(a.iter().map(|v| v * scale).collect())
}

pub fn normalize_power_rows(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let scale_n = (a.ncols() as f64).sqrt();
    let mut out = a.to_owned();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !(norm > NORM_EPS) {
            return Err(Error::DegenerateInput(format!("cannot normalize block {i} of norm {norm}")));
        }
        row *= scale_n / norm;
    }
    Ok(out)
}

/// Vector-Jacobian product of [`normalize_power_rows`]:
/// `∂a = √n/‖a‖ · (∂x − u (u·∂x))` with `u = a/‖a‖`.
pub fn normalize_power_backward(a: ArrayView2<f64>, upstream: ArrayView2<f64>) -> Array2<f64> {
    let scale_n = (a.ncols() as f64).sqrt();
    let mut out = upstream.to_owned();
    for ((mut d, a_row), _) in out.rows_mut().into_iter().zip(a.rows()).zip(0..) {
        let norm = a_row.dot(&a_row).sqrt();
        if !(norm > NORM_EPS) {
            d.fill(0.0);
            continue;
        }
        let proj = a_row.dot(&d) / norm;
        Zip::from(&mut d).and(&a_row).for_each(|d, &a| *d = scale_n / norm * (*d - a / norm * proj));
    }
    out
}

/// BPSK quantization, `sign(0) = +1`.
pub fn quantize_sign(a: &[f64]) -> Vec<f64> {
    a.iter().map(|&v| sign(v)).collect()
}

/// Saturated straight-through estimator: passes `upstream` where `|a| < 1`.
pub fn ste_backward(a: &[f64], upstream: &[f64]) -> Result<Vec<f64>> {
    ensure(a.len() == upstream.len(), || {
        format!("STE input length {} but upstream length {}", a.len(), upstream.len())
    })?;
    Ok(a.iter().zip(upstream).map(|(&a, &u)| u * ste_mask(a)).collect())
}

/// Per-row energy `‖x‖²`.
pub fn block_energy(x: ArrayView2<f64>) -> Vec<f64> {
    x.map_axis(Axis(1), |r| r.dot(&r)).to_vec()
}
