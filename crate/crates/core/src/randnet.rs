//! The randomized input layer `f(s; φ)` and its mixture prior.
//!
//! A draw from the prior is the identity kernel with probability
//! `alpha`, otherwise a `k x k` convolution kernel whose entries are
//! i.i.d. Xavier-normal, `Normal(0, sqrt(2 / (fan_in + fan_out)))` with
//! `fan = channels * k * k`. With those fans the expected output variance
//! equals the input variance. The layer has no bias and no activation, so
//! it keeps the spatial layout of its input while scrambling low-level
//! colour and texture statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{ops, Graph, Scalar, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    /// Probability of drawing the identity kernel.
    pub alpha: f64,
    pub kernel_size: usize,
    pub n_in: usize,
    pub n_out: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            kernel_size: 3,
            n_in: 3,
            n_out: 3,
        }
    }
}

impl PriorConfig {
    pub fn with_channels(alpha: f64, channels: usize) -> Self {
        Self {
            alpha,
            n_in: channels,
            n_out: channels,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel size {} must be odd",
                self.kernel_size
            )));
        }
        if self.n_in != self.n_out || self.n_in == 0 {
            return Err(Error::config(format!(
                "randomizer must preserve channels, got {} -> {}",
                self.n_in, self.n_out
            )));
        }
        Ok(())
    }

    pub fn fan_in(&self) -> usize {
        self.n_in * self.kernel_size * self.kernel_size
    }

    pub fn fan_out(&self) -> usize {
        self.n_out * self.kernel_size * self.kernel_size
    }

    /// Standard deviation of a non-identity kernel entry.
    pub fn xavier_std(&self) -> f64 {
        (2.0 / (self.fan_in() + self.fan_out()) as f64).sqrt()
    }
}

/// A sampled randomizer kernel. Never trained.
#[derive(Clone, Debug, PartialEq)]
pub struct RandomNetParams<T> {
    pub kernel: Tensor<T>,
    pub is_identity: bool,
}

impl<T: Scalar> RandomNetParams<T> {
    pub fn identity(channels: usize, kernel_size: usize) -> Self {
        let k = kernel_size;
        let mut kernel = Tensor::zeros(&[channels, channels, k, k]);
        let c = k / 2;
        for ch in 0..channels {
            kernel.data_mut()[((ch * channels + ch) * k + c) * k + c] = T::one();
        }
        Self {
            kernel,
            is_identity: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    /// Short hex digest of the kernel bytes.
    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for v in self.kernel.data() {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Draws `φ ~ P(φ)` from a seeded generator.
pub fn sample_params<T: Scalar>(prior: &PriorConfig, rng_seed: u64) -> RandomNetParams<T> {
    sample_params_with(prior, &mut ChaCha8Rng::seed_from_u64(rng_seed))
}

pub fn sample_params_with<T: Scalar, R: Rng + ?Sized>(
    prior: &PriorConfig,
    rng: &mut R,
) -> RandomNetParams<T> {
    let u: f64 = rng.random();
    if u < prior.alpha {
        return RandomNetParams::identity(prior.n_in, prior.kernel_size);
    }
    let k = prior.kernel_size;
    RandomNetParams {
        kernel: Tensor::randn(&[prior.n_out, prior.n_in, k, k], prior.xavier_std(), rng),
        is_identity: false,
    }
}

/// Applies `φ` as a stride-1, zero-padded convolution without bias.
pub fn randomize<T: Scalar>(obs: &Tensor<T>, phi: &RandomNetParams<T>) -> Result<Tensor<T>> {
    check_input(obs.shape(), phi)?;
    if phi.is_identity {
        return Ok(obs.clone());
    }
    let k = phi.kernel_size();
    ops::conv2d(obs, &phi.kernel, None, 1, (k - 1) / 2)
}

/// Graph version of [`randomize`]; `φ` enters as a constant.
pub fn randomize_var<T: Scalar>(g: &mut Graph<T>, x: Var, phi: &RandomNetParams<T>) -> Result<Var> {
    check_input(g.try_value(x)?.shape(), phi)?;
    if phi.is_identity {
        return Ok(x);
    }
    let k = phi.kernel_size();
    let w = g.constant(phi.kernel.clone());
    g.conv2d(x, w, None, 1, (k - 1) / 2)
}

fn check_input<T: Scalar>(shape: &[usize], phi: &RandomNetParams<T>) -> Result<()> {
    if shape.len() != 4 || shape[1] != phi.channels() {
        return Err(Error::dim("randomize", shape, phi.kernel.shape()));
    }
    Ok(())
}

/// Per-coordinate scaling used for low-dimensional state inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagonalParams<T> {
    pub scales: Vec<T>,
}

impl<T: Scalar> DiagonalParams<T> {
    pub const LOW: f64 = 0.8;
    pub const HIGH: f64 = 1.2;

    pub fn ones(d: usize) -> Self {
        Self {
            scales: vec![T::one(); d],
        }
    }

    pub fn sample<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Self {
        let dist = Uniform::new(Self::LOW, Self::HIGH).expect("valid range");
        Self {
            scales: (0..d).map(|_| T::lit(dist.sample(rng))).collect(),
        }
    }

    /// Scales the trailing axis of `state` (a single vector or a batch).
    pub fn apply(&self, state: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.scales.len();
        if state.shape().last() != Some(&d) {
            return Err(Error::dim("diagonal_randomize", state.shape(), &[d]));
        }
        let mut out = state.clone();
        out.zero_grad();
        for row in out.data_mut().chunks_mut(d) {
            row.iter_mut().zip(&self.scales).for_each(|(x, &s)| *x *= s);
        }
        Ok(out)
    }

    pub fn hash_hex(&self) -> String {
        let mut h = Sha256::new();
        for v in &self.scales {
            h.update(v.to_f64_lossy().to_le_bytes());
        }
        h.finalize()
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect()
    }
}

/// Multiplies a state vector by a fresh diagonal with entries in `U(0.8, 1.2)`.
pub fn diagonal_randomize<T: Scalar>(state: &Tensor<T>, rng_seed: u64) -> Result<Tensor<T>> {
    let d = *state
        .shape()
        .last()
        .ok_or_else(|| Error::contract("0-d state"))?;
    DiagonalParams::sample(d, &mut ChaCha8Rng::seed_from_u64(rng_seed)).apply(state)
}
