use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::rng;

/// Fixed (non-learned) embeddings of the scalar inputs: diffusion time `t`,
/// jump target time `s`, and guidance scale `omega`. All share dimension `dim`.
///
/// `t` and `s` are embedded through `c_noise` with sinusoids on geometric
/// frequency ladders; the `s` ladder sits halfway between the `t` rungs so that
/// the additive combination stays asymmetric in `(t, s)`. `omega` uses random
/// Fourier features with frequencies drawn once from N(0, 1).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Embedder {
    pub dim: usize,
    pub time_freqs: Vec<f64>,
    pub aux_freqs: Vec<f64>,
    pub omega_freqs: Vec<f64>,
}

impl Embedder {
    pub fn new(dim: usize, max_freq: f64, seed: u64) -> Result<Self> {
        if dim < 2 || dim % 2 != 0 {
            return Err(Error::Argument(format!("embedding dimension must be even and >= 2, got {dim}")));
        }
        if !(max_freq >= 1.0) {
            return Err(Error::Argument(format!("max embedding frequency must be >= 1, got {max_freq}")));
        }
        let half = dim / 2;
        let ratio = if half > 1 {
            max_freq.ln() / (half - 1) as f64
        } else {
            0.0
        };
        let time_freqs = (0..half).map(|k| (ratio * k as f64).exp()).collect();
        let aux_freqs = (0..half).map(|k| (ratio * (k as f64 + 0.5)).exp()).collect();
        let mut r = rng::child(seed, &[0x0e6a]);
        let omega_freqs = (0..half).map(|_| rng::normal(&mut r)).collect();
        Ok(Embedder {
            dim,
            time_freqs,
            aux_freqs,
            omega_freqs,
        })
    }

    fn sinusoid(freqs: &[f64], x: f64, out: &mut [f64]) {
        let half = freqs.len();
        for (k, f) in freqs.iter().enumerate() {
            let (s, c) = (f * x).sin_cos();
            out[k] += s;
            out[half + k] += c;
        }
    }

    /// Adds the embedding of a noise level (already mapped through `c_noise`).
    pub fn add_time(&self, c_noise: f64, out: &mut [f64]) {
        Self::sinusoid(&self.time_freqs, c_noise, out);
    }

    pub fn add_aux_time(&self, c_noise: f64, out: &mut [f64]) {
        Self::sinusoid(&self.aux_freqs, c_noise, out);
    }

    pub fn add_omega(&self, omega: f64, out: &mut [f64]) {
        Self::sinusoid(&self.omega_freqs, 2.0 * PI * omega, out);
    }

    pub fn time(&self, c_noise: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.add_time(c_noise, &mut v);
        v
    }

    pub fn aux_time(&self, c_noise: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.add_aux_time(c_noise, &mut v);
        v
    }

    pub fn omega(&self, omega: f64) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        self.add_omega(omega, &mut v);
        v
    }
}

/// Learned condition embedding: one row per label plus a final row for the
/// null label.
#[derive(Debug, Clone, PartialEq)]
pub struct CondTable {
    pub n_labels: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl CondTable {
    pub fn random<R: Rng + ?Sized>(n_labels: usize, dim: usize, scale: f64, rng: &mut R) -> Self {
        let values = (0..(n_labels + 1) * dim).map(|_| scale * rng::normal(rng)).collect();
        CondTable {
            n_labels,
            dim,
            values,
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.dim..(r + 1) * self.dim]
    }
}
