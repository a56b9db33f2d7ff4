//! Seeded random streams, sampling primitives and parameter initialization.
//!
//! Every stochastic step in the crate draws from an [`RngStream`]. A stream is
//! a ChaCha8 generator keyed by `(seed, stream_id)`: the seed selects the key
//! and the id selects one of 2^64 independent keystreams, so workers can be
//! handed disjoint substreams without coordination.

use ndarray::{Array1, Array2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{ensure, Result};

/// A reproducible random stream identified by `(seed, stream_id)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Child stream keyed by this stream's identity and `key`.
    ///
    /// The result does not depend on how many values were drawn from `self`,
    /// so children can be created in any order from any thread.
    pub fn derive(&self, key: u64) -> Self {
        let child_seed = splitmix64(self.seed ^ splitmix64(self.stream_id.wrapping_add(0x5851_F42D)));
        Self::new(child_seed, key)
    }

    /// One standard normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform index on `0..bound`.
    pub fn index(&mut self, bound: usize) -> usize {
        self.inner.random_range(0..bound)
    }

    /// One Rayleigh draw with unit second moment.
    pub fn rayleigh(&mut self) -> f64 {
        // Inverse CDF with scale 1/sqrt(2): H = sqrt(-ln U), U in (0, 1].
        let u = 1.0 - self.uniform();
        (-u.ln()).sqrt()
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn make_rng(seed: u64, stream_id: u64) -> RngStream {
    RngStream::new(seed, stream_id)
}

/// `n` i.i.d. draws from N(mean, std²).
pub fn sample_gaussian(rng: &mut RngStream, mean: f64, std: f64, n: usize) -> Result<Vec<f64>> {
    ensure(std >= 0.0 && std.is_finite(), || {
        format!("standard deviation must be finite and non-negative, got {std}")
    })?;
    Ok((0..n).map(|_| mean + std * rng.standard_normal()).collect())
}

/// `n` i.i.d. Rayleigh draws with scale 1/√2, i.e. E[H²] = 1.
pub fn sample_rayleigh(rng: &mut RngStream, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.rayleigh()).collect()
}

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitScheme {
    KaimingUniform,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InitSpec {
    pub scheme: InitScheme,
    pub fan_in: usize,
}

impl InitSpec {
    pub fn kaiming_uniform(fan_in: usize) -> Self {
        Self {
            scheme: InitScheme::KaimingUniform,
            fan_in,
        }
    }

    /// Half-width of the uniform weight distribution (ReLU gain, `sqrt(6 / fan_in)`).
    pub fn bound(&self) -> f64 {
        match self.scheme {
            InitScheme::KaimingUniform => (6.0 / self.fan_in as f64).sqrt(),
            InitScheme::Zeros => 0.0,
        }
    }
}

/// Draws a `fan_out × fan_in` weight matrix and a zero bias.
pub fn init_dense(
    rng: &mut RngStream,
    fan_in: usize,
    fan_out: usize,
    spec: InitSpec,
) -> Result<(Array2<f64>, Array1<f64>)> {
    ensure(fan_in >= 1 && fan_out >= 1, || {
        format!("layer dimensions must be positive, got {fan_in} -> {fan_out}")
    })?;
    ensure(spec.fan_in == fan_in, || {
        format!("init spec fan_in {} does not match layer fan_in {fan_in}", spec.fan_in)
    })?;
    let bound = spec.bound();
    let weights = match spec.scheme {
        InitScheme::Zeros => Array2::zeros((fan_out, fan_in)),
        InitScheme::KaimingUniform => {
            Array2::from_shape_simple_fn((fan_out, fan_in), || bound * (2.0 * rng.uniform() - 1.0))
        }
    };
    Ok((weights, Array1::zeros(fan_out)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean_var(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn same_key_reproduces_draws() {
        let a = sample_gaussian(&mut make_rng(42, 0), 0.0, 1.0, 100).unwrap();
        let b = sample_gaussian(&mut make_rng(42, 0), 0.0, 1.0, 100).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 100_000;
        let a = sample_gaussian(&mut make_rng(42, 0), 0.0, 1.0, n).unwrap();
        let b = sample_gaussian(&mut make_rng(42, 1), 0.0, 1.0, n).unwrap();
        let (ma, va) = mean_var(&a);
        let (mb, vb) = mean_var(&b);
        let cov = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n as f64 - 1.0);
        let corr = cov / (va * vb).sqrt();
        assert!(corr.abs() < 0.01, "correlation {corr}");
    }

    #[test]
    fn distinct_seeds_differ() {
        let a = make_rng(42, 0).next_u64();
        let b = make_rng(43, 0).next_u64();
        assert_ne!(a, b);
    }

    #[test]
    fn derive_ignores_parent_position() {
        let parent = make_rng(7, 3);
        let mut advanced = parent.clone();
        advanced.next_u64();
        assert_eq!(parent.derive(5).next_u64(), advanced.derive(5).next_u64());
        assert_ne!(parent.derive(5).next_u64(), parent.derive(6).next_u64());
    }

    #[test]
    fn degenerate_gaussian() {
        let mut rng = make_rng(1, 0);
        assert_eq!(sample_gaussian(&mut rng, 0.0, 0.0, 5).unwrap(), vec![0.0; 5]);
        assert_eq!(sample_gaussian(&mut rng, 3.0, 0.0, 1).unwrap(), vec![3.0]);
    }

    #[test]
    fn negative_std_is_rejected() {
        assert!(sample_gaussian(&mut make_rng(1, 0), 0.0, -1.0, 3).is_err());
    }

    #[test]
    fn gaussian_moments() {
        let xs = sample_gaussian(&mut make_rng(9, 0), 0.0, 1.0, 1_000_000).unwrap();
        let (mean, var) = mean_var(&xs);
        // Standard error of the mean is 1e-3; of the variance about 1.4e-3.
        assert!(mean.abs() < 3e-3, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "variance {var}");
    }

    #[test]
    fn rayleigh_moments() {
        let hs = sample_rayleigh(&mut make_rng(11, 0), 1_000_000);
        assert!(hs.iter().all(|&h| h >= 0.0));
        let n = hs.len() as f64;
        let second = hs.iter().map(|h| h * h).sum::<f64>() / n;
        let mean = hs.iter().sum::<f64>() / n;
        assert!((second - 1.0).abs() < 0.01, "E[H^2] = {second}");
        let expected_mean = std::f64::consts::PI.sqrt() / 2.0;
        assert!((mean - expected_mean).abs() / expected_mean < 0.01, "E[H] = {mean}");
    }

    #[test]
    fn kaiming_bounds_and_zero_bias() {
        let mut rng = make_rng(3, 0);
        let (w, b) = init_dense(&mut rng, 6, 40, InitSpec::kaiming_uniform(6)).unwrap();
        assert!(b.iter().all(|&v| v == 0.0));
        assert!(w.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert!(InitSpec::kaiming_uniform(1).bound() > 0.0);
    }

    #[test]
    fn kaiming_is_centered() {
        let mut rng = make_rng(4, 0);
        let (w, _) = init_dense(&mut rng, 16, 6250, InitSpec::kaiming_uniform(16)).unwrap();
        let mean = w.mean().unwrap();
        assert!(mean.abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn zero_dimensions_are_rejected() {
        let mut rng = make_rng(3, 0);
        assert!(init_dense(&mut rng, 0, 4, InitSpec::kaiming_uniform(0)).is_err());
        assert!(init_dense(&mut rng, 4, 0, InitSpec::kaiming_uniform(4)).is_err());
    }
}
