use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::condition::Cond;
use crate::error::{Error, Result};
use crate::rng;

/// One diagonal-covariance Gaussian component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Per-label Gaussian mixtures `p(x | label)` with label prior weights.
///
/// The null condition refers to the marginal mixture, the weight-averaged
/// union of all labels' components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionedMixture {
    dim: usize,
    label_weights: Vec<f64>,
    labels: Vec<Vec<Component>>,
    #[serde(skip)]
    marginal: Vec<Component>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn normalize_log_weights(logw: &mut [f64]) {
    let lse = log_sum_exp(logw);
    logw.iter_mut().for_each(|l| *l = (*l - lse).exp());
}

impl ConditionedMixture {
    pub fn new(label_weights: Vec<f64>, labels: Vec<Vec<Component>>) -> Result<Self> {
        if labels.is_empty() || labels.iter().any(|l| l.is_empty()) {
            return Err(Error::config("mixture", "every label needs at least one component"));
        }
        if label_weights.len() != labels.len() {
            return Err(Error::config("mixture.label_weights", "one weight per label required"));
        }
        let dim = labels[0][0].mean.len();
        if dim == 0 {
            return Err(Error::config("mixture", "dimension must be positive"));
        }
        let check_simplex = |w: &[f64], field: &str| -> Result<()> {
            if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::config(field, format!("weights must be nonnegative and sum to 1, got {w:?}")));
            }
            Ok(())
        };
        check_simplex(&label_weights, "mixture.label_weights")?;
        for (li, comps) in labels.iter().enumerate() {
            let w: Vec<f64> = comps.iter().map(|c| c.weight).collect();
            check_simplex(&w, &format!("mixture.label{li}"))?;
            for c in comps {
                if c.mean.len() != dim || c.var.len() != dim {
                    return Err(Error::config(format!("mixture.label{li}"), "component dimension mismatch"));
                }
                if c.var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || c.mean.iter().any(|m| !m.is_finite()) {
                    return Err(Error::config(
                        format!("mixture.label{li}"),
                        "variances must be strictly positive and means finite",
                    ));
                }
            }
        }
        let mut m = ConditionedMixture {
            dim,
            label_weights,
            labels,
            marginal: Vec::new(),
        };
        m.rebuild_marginal();
        Ok(m)
    }

    fn rebuild_marginal(&mut self) {
        self.marginal = self
            .labels
            .iter()
            .zip(&self.label_weights)
            .flat_map(|(comps, &lw)| {
                comps.iter().map(move |c| Component {
                    weight: lw * c.weight,
                    ..c.clone()
                })
            })
            .collect();
    }

    /// Restores derived state after deserialization.
    pub fn revalidated(self) -> Result<Self> {
        Self::new(self.label_weights, self.labels)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_weights(&self) -> &[f64] {
        &self.label_weights
    }

    pub fn label_components(&self) -> &[Vec<Component>] {
        &self.labels
    }

    pub fn components(&self, cond: Cond) -> Result<&[Component]> {
        match cond {
            Cond::Null => Ok(&self.marginal),
            Cond::Label(l) => self
                .labels
                .get(l)
                .map(|v| v.as_slice())
                .ok_or_else(|| Error::Argument(format!("label {l} out of range ({} labels)", self.labels.len()))),
        }
    }

    /// Global mean vector and scalar standard deviation (root of the average
    /// per-coordinate variance) of the marginal.
    pub fn global_moments(&self) -> (Vec<f64>, f64) {
        let d = self.dim;
        let mut mean = vec![0.0; d];
        for c in &self.marginal {
            for i in 0..d {
                mean[i] += c.weight * c.mean[i];
            }
        }
        let mut var = 0.0;
        for c in &self.marginal {
            for i in 0..d {
                var += c.weight * (c.var[i] + (c.mean[i] - mean[i]).powi(2));
            }
        }
        (mean, (var / d as f64).sqrt())
    }

    /// Affine rescaling to zero mean and global standard deviation `sigma_data`.
    pub fn standardized(mut self, sigma_data: f64) -> Self {
        let (mean, std) = self.global_moments();
        let k = sigma_data / std;
        for comps in &mut self.labels {
            for c in comps {
                for i in 0..self.dim {
                    c.mean[i] = (c.mean[i] - mean[i]) * k;
                    c.var[i] *= k * k;
                }
            }
        }
        self.rebuild_marginal();
        self
    }

    /// Random mixture: component means uniform in `[-1, 1]^dim`, per-coordinate
    /// standard deviations uniform in `[0.5, 1] * spread`, weights proportional
    /// to `0.5 + Exp(1)` draws (no vanishing components), equal label weights; standardized to `sigma_data`.
    pub fn random<R: Rng + ?Sized>(
        rng: &mut R,
        dim: usize,
        n_labels: usize,
        n_components: usize,
        spread: f64,
        sigma_data: f64,
    ) -> Result<Self> {
        if n_labels == 0 || n_components == 0 || dim == 0 {
            return Err(Error::config("mixture", "dim, labels and components must be positive"));
        }
        let labels = (0..n_labels)
            .map(|_| {
                let raw: Vec<f64> = (0..n_components).map(|_| 0.5 - (1.0 - rng::uniform(rng)).ln()).collect();
                let total: f64 = raw.iter().sum();
                raw.into_iter()
                    .map(|w| Component {
                        weight: w / total,
                        mean: (0..dim).map(|_| 2.0 * rng::uniform(rng) - 1.0).collect(),
                        var: (0..dim)
                            .map(|_| (spread * (0.5 + 0.5 * rng::uniform(rng))).powi(2))
                            .collect(),
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let lw = vec![1.0 / n_labels as f64; n_labels];
        Ok(Self::new(lw, labels)?.standardized(sigma_data))
    }

    /// Mixture over smooth random signals of length `dim`, for the intensity
    /// control task. Each component mean is a sum of three low-frequency
    /// sinusoids under a smooth random envelope, so the frame-wise loudness
    /// varies along the signal; `noise` is the per-coordinate standard
    /// deviation relative to the signal scale before standardization.
    pub fn smooth_signals<R: Rng + ?Sized>(
        rng: &mut R,
        dim: usize,
        n_labels: usize,
        n_components: usize,
        noise: f64,
        sigma_data: f64,
    ) -> Result<Self> {
        if dim < 8 || n_labels == 0 || n_components == 0 {
            return Err(Error::config("mixture", "signal mixtures need dim >= 8 and positive counts"));
        }
        let labels = (0..n_labels)
            .map(|li| {
                (0..n_components)
                    .map(|_| {
                        let mut mean = vec![0.0; dim];
                        let env_phase = 2.0 * PI * rng::uniform(rng);
                        let env_depth = 0.3 + 0.6 * rng::uniform(rng);
                        for h in 0..3 {
                            let freq = (li + 2 + 2 * h) as f64 + rng::uniform(rng);
                            let phase = 2.0 * PI * rng::uniform(rng);
                            let amp = 1.0 / (1.0 + h as f64);
                            for (i, m) in mean.iter_mut().enumerate() {
                                *m += amp * (2.0 * PI * freq * i as f64 / dim as f64 + phase).sin();
                            }
                        }
                        for (i, m) in mean.iter_mut().enumerate() {
                            let x = i as f64 / dim as f64;
                            *m *= 1.0 + env_depth * (2.0 * PI * x + env_phase).sin();
                        }
                        Component {
                            weight: 1.0 / n_components as f64,
                            mean,
                            var: vec![noise * noise; dim],
                        }
                    })
                    .collect::<Vec<_>>()
            })
            .collect();
        let lw = vec![1.0 / n_labels as f64; n_labels];
        Ok(Self::new(lw, labels)?.standardized(sigma_data))
    }

    fn pick<R: Rng + ?Sized>(rng: &mut R, weights: impl Iterator<Item = f64>) -> usize {
        let u = rng::uniform(rng);
        let mut acc = 0.0;
        let mut last = 0;
        for (i, w) in weights.enumerate() {
            acc += w;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    /// Draws `(x, label)` from the joint distribution.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let label = Self::pick(rng, self.label_weights.iter().cloned());
        (self.sample_label(rng, label), label)
    }

    pub fn sample_label<R: Rng + ?Sized>(&self, rng: &mut R, label: usize) -> Vec<f64> {
        let comps = &self.labels[label];
        let k = Self::pick(rng, comps.iter().map(|c| c.weight));
        let c = &comps[k];
        c.mean
            .iter()
            .zip(&c.var)
            .map(|(m, v)| m + v.sqrt() * rng::normal(rng))
            .collect()
    }

    pub fn sample_cond<R: Rng + ?Sized>(&self, rng: &mut R, cond: Cond) -> Vec<f64> {
        match cond {
            Cond::Label(l) => self.sample_label(rng, l),
            Cond::Null => self.sample(rng).0,
        }
    }

    /// Per-component log of `w_k N(x; mu_k, diag(var_k) + t^2 I)`.
    fn component_log_weights(comps: &[Component], x: &[f64], t: f64) -> Vec<f64> {
        let t2 = t * t;
        comps
            .iter()
            .map(|c| {
                let mut lp = c.weight.ln();
                for i in 0..x.len() {
                    let v = c.var[i] + t2;
                    let d = x[i] - c.mean[i];
                    lp -= 0.5 * ((2.0 * PI * v).ln() + d * d / v);
                }
                lp
            })
            .collect()
    }

    /// Log density of the noised distribution `p_t(x | cond)`.
    pub fn log_density(&self, x: &[f64], t: f64, cond: Cond) -> Result<f64> {
        let comps = self.components(cond)?;
        if x.len() != self.dim {
            return Err(Error::shape(self.dim, x.len(), "sample"));
        }
        Ok(log_sum_exp(&Self::component_log_weights(comps, x, t)))
    }

    /// Posterior over labels for a clean sample.
    pub fn label_posterior(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut lp: Vec<f64> = (0..self.n_labels())
            .map(|l| Ok(self.label_weights[l].ln() + self.log_density(x, 0.0, Cond::Label(l))?))
            .collect::<Result<_>>()?;
        normalize_log_weights(&mut lp);
        Ok(lp)
    }

    /// Exact posterior mean `E[x0 | x_t = z, cond]` under `x_t = x0 + t eps`.
    pub fn posterior_mean(&self, z: &[f64], t: f64, cond: Cond) -> Result<Vec<f64>> {
        if !(t > 0.0) {
            return Err(Error::Domain(format!("denoising needs t > 0, got {t}")));
        }
        if z.len() != self.dim {
            return Err(Error::shape(self.dim, z.len(), "sample"));
        }
        let comps = self.components(cond)?;
        let mut resp = Self::component_log_weights(comps, z, t);
        normalize_log_weights(&mut resp);
        let t2 = t * t;
        let mut out = vec![0.0; self.dim];
        for (c, r) in comps.iter().zip(&resp) {
            if *r == 0.0 {
                continue;
            }
            for i in 0..self.dim {
                let shrink = c.var[i] / (c.var[i] + t2);
                out[i] += r * (c.mean[i] + shrink * (z[i] - c.mean[i]));
            }
        }
        Ok(out)
    }
}
