//! Classical colored-noise bath: three independent stationary
//! Ornstein–Uhlenbeck processes `B_x, B_y, B_z` coupled to the collective
//! spin through `B_x J_x + B_y J_y + B_z J_z`.
//!
//! Random streams: a path seed selects a ChaCha8 key, and channel `k`
//! (0 = x, 1 = y, 2 = z) reads stream `k` of that key. Ensemble members get
//! their path seed from [`derive_seed`], so every `(trajectory, channel)`
//! pair has its own stream regardless of the order in which work runs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::spin::{CollectiveOperators, Operator};
use crate::{Error, Real, Result};

/// Stationary OU law with autocorrelation `sigma_sq * exp(-alpha * tau)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OuParams<T: Real> {
    alpha: T,
    sigma_sq: T,
}

impl<T: Real> OuParams<T> {
    pub fn new(alpha: T, sigma_sq: T) -> Result<Self> {
        if !(alpha > T::zero()) || !alpha.is_finite() {
            return Err(Error::InvalidParams(format!("alpha must be positive, got {alpha}")));
        }
        if !(sigma_sq >= T::zero()) || !sigma_sq.is_finite() {
            return Err(Error::InvalidParams(format!(
                "sigma_sq must be non-negative, got {sigma_sq}"
            )));
        }
        Ok(Self { alpha, sigma_sq })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn sigma_sq(&self) -> T {
        self.sigma_sq
    }

    /// Stationary autocorrelation at lag `tau`.
    pub fn autocorrelation(&self, tau: T) -> T {
        self.sigma_sq * (-self.alpha * tau.abs()).exp()
    }
}

/// Three noise channels sampled on a uniform grid of step `dt`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoisePath<T: Real> {
    dt: T,
    channels: [Vec<T>; 3],
    seed: u64,
}

impl<T: Real> NoisePath<T> {
    /// Builds a path from explicit samples.
    pub fn from_samples(dt: T, bx: Vec<T>, by: Vec<T>, bz: Vec<T>, seed: u64) -> Result<Self> {
        if bx.is_empty() || bx.len() != by.len() || bx.len() != bz.len() {
            return Err(Error::InvalidParams(
                "noise channels must be non-empty and of equal length".into(),
            ));
        }
        if !(dt > T::zero()) {
            return Err(Error::InvalidParams(format!("dt must be positive, got {dt}")));
        }
        Ok(Self {
            dt,
            channels: [bx, by, bz],
            seed,
        })
    }

    /// An all-zero path of `len` samples.
    pub fn silent(len: usize, dt: T) -> Result<Self> {
        let z = vec![T::zero(); len];
        Self::from_samples(dt, z.clone(), z.clone(), z, 0)
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn len(&self) -> usize {
        self.channels[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Samples of channel `k` (0 = x, 1 = y, 2 = z).
    pub fn channel(&self, k: usize) -> &[T] {
        &self.channels[k]
    }

    /// `(B_x, B_y, B_z)` at grid index `i`.
    pub fn at(&self, i: usize) -> Result<[T; 3]> {
        if i >= self.len() {
            return Err(Error::OutOfRange {
                index: i,
                len: self.len(),
            });
        }
        Ok([self.channels[0][i], self.channels[1][i], self.channels[2][i]])
    }
}

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of ensemble member `index` under `master`.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    mix64(mix64(master) ^ index.wrapping_mul(0xd6e8_feb8_6659_fd93))
}

fn channel_rng(seed: u64, channel: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(channel);
    rng
}

/// Samples `n_steps` grid values of each channel.
///
/// The first value is drawn from the stationary law `N(0, sigma_sq)`; later
/// values use the exact transition
/// `B' = B e^{-alpha dt} + sqrt(sigma_sq (1 - e^{-2 alpha dt})) xi`.
pub fn sample_ou_path<T: Real>(
    params: &OuParams<T>,
    n_steps: usize,
    dt: T,
    seed: u64,
) -> Result<NoisePath<T>> {
    if n_steps == 0 {
        return Err(Error::InvalidParams("noise path needs at least one step".into()));
    }
    if !(dt > T::zero()) || !dt.is_finite() {
        return Err(Error::InvalidParams(format!("dt must be positive, got {dt}")));
    }
    if params.sigma_sq().is_zero() {
        let mut path = NoisePath::silent(n_steps, dt)?;
        path.seed = seed;
        return Ok(path);
    }
    let decay = (-params.alpha() * dt).exp();
    let kick = (params.sigma_sq() * (T::one() - decay * decay)).sqrt();
    let stationary = params.sigma_sq().sqrt();
    let channel = |k: u64| {
        let mut rng = channel_rng(seed, k);
        let mut normal = || T::of(StandardNormal.sample(&mut rng));
        let mut b = stationary * normal();
        let mut out = Vec::with_capacity(n_steps);
        out.push(b);
        for _ in 1..n_steps {
            b = b * decay + kick * normal();
            out.push(b);
        }
        out
    };
    Ok(NoisePath {
        dt,
        channels: [channel(0), channel(1), channel(2)],
        seed,
    })
}

/// `B_x[i] J_x + B_y[i] J_y + B_z[i] J_z`.
pub fn noise_hamiltonian<T: Real>(
    path: &NoisePath<T>,
    step_index: usize,
    ops: &CollectiveOperators<T>,
) -> Result<Operator<T>> {
    let b = path.at(step_index)?;
    let mut h = Operator::zeros(ops.dim());
    for (k, coeff) in b.iter().enumerate() {
        if !coeff.is_zero() {
            h = h.add_scaled(*coeff, ops.get(k))?;
        }
    }
    Ok(h)
}
