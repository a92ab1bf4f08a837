//! Sample-quality metrics: energy distance, Bayes-classifier condition
//! accuracy, and the step-count trade-off report.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::condition::Cond;
use crate::distill::StudentModel;
use crate::error::{Error, Result};
use crate::sampler::{pairwise_mean_l2, sample_from, shared_noises, SamplerConfig};
use crate::teacher::ConditionedMixture;
use crate::{par, rng};

fn l2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn mean_pair_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let rows = par::map_slice(a, |_, x| b.iter().map(|y| l2(x, y)).sum::<f64>());
    rows.into_iter().sum::<f64>() / (a.len() * b.len()) as f64
}

fn check_sets(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<usize> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Argument("energy distance needs nonempty sets".into()));
    }
    let d = a[0].len();
    for x in a.iter().chain(b) {
        if x.len() != d {
            return Err(Error::shape(d, x.len(), "energy distance point"));
        }
    }
    Ok(d)
}

/// `2 E|a - b| - E|a - a'| - E|b - b'|`, averaging over all ordered pairs
/// (including a point with itself), so identical sets give exactly 0.
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    check_sets(a, b)?;
    let ab = mean_pair_distance(a, b);
    let aa = mean_pair_distance(a, a);
    let bb = mean_pair_distance(b, b);
    Ok((2.0 * ab - aa - bb).max(0.0))
}

/// Energy distance and the fraction of `permutations` label shuffles of the
/// pooled set whose statistic is at least as large (permutation p-value).
pub fn energy_permutation_test(a: &[Vec<f64>], b: &[Vec<f64>], permutations: usize, seed: u64) -> Result<(f64, f64)> {
    check_sets(a, b)?;
    let pooled: Vec<&Vec<f64>> = a.iter().chain(b).collect();
    let n = pooled.len();
    // full distance matrix once; every permutation reuses it
    let dist: Vec<Vec<f64>> = par::map_range(n, |i| (0..n).map(|j| l2(pooled[i], pooled[j])).collect());
    let stat = |idx: &[usize]| -> f64 {
        let (sa, sb) = idx.split_at(a.len());
        let mean = |x: &[usize], y: &[usize]| -> f64 {
            x.iter().map(|&i| y.iter().map(|&j| dist[i][j]).sum::<f64>()).sum::<f64>() / (x.len() * y.len()) as f64
        };
        2.0 * mean(sa, sb) - mean(sa, sa) - mean(sb, sb)
    };
    let ident: Vec<usize> = (0..n).collect();
    let observed = stat(&ident);
    let null = par::map_range(permutations, |p| {
        let mut r = rng::child(seed, &[5, p as u64]);
        let mut idx = ident.clone();
        use rand::seq::SliceRandom;
        idx.shuffle(&mut r);
        stat(&idx)
    });
    let exceed = null.iter().filter(|&&v| v >= observed).count();
    Ok((observed.max(0.0), (exceed + 1) as f64 / (permutations + 1) as f64))
}

/// Fraction of samples whose Bayes-optimal label under `mixture` equals the
/// intended label. Null intents are skipped; an empty set gives 0.
pub fn condition_accuracy(samples: &[Vec<f64>], intended: &[Cond], mixture: &ConditionedMixture) -> Result<f64> {
    if samples.len() != intended.len() {
        return Err(Error::shape(samples.len(), intended.len(), "intended labels"));
    }
    let hits = par::map_slice(samples, |i, x| -> Result<Option<bool>> {
        let Cond::Label(l) = intended[i] else {
            return Ok(None);
        };
        let post = mixture.label_posterior(x)?;
        let best = post
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        Ok(Some(best == l))
    });
    let mut n = 0usize;
    let mut good = 0usize;
    for h in hits {
        if let Some(ok) = h? {
            n += 1;
            good += ok as usize;
        }
    }
    Ok(if n == 0 { 0.0 } else { good as f64 / n as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRow {
    pub steps: usize,
    pub omega: f64,
    pub nu: f64,
    pub gamma: f64,
    pub energy_distance: f64,
    pub condition_accuracy: f64,
    pub preservation_vs_1step: f64,
    pub wall_ms: u64,
}

impl TradeoffRow {
    pub const CSV_HEADER: &'static str =
        "steps,omega,nu,gamma,energy_distance,condition_accuracy,preservation_vs_1step,wall_ms";

    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.steps,
            self.omega,
            self.nu,
            self.gamma,
            self.energy_distance,
            self.condition_accuracy,
            self.preservation_vs_1step,
            self.wall_ms
        )
    }
}

/// Settings of a trade-off report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffSpec {
    pub steps: Vec<usize>,
    /// `(omega, nu)` pairs.
    pub guidance: Vec<(f64, f64)>,
    pub gamma: f64,
    pub samples: usize,
    pub seed: u64,
    pub record_timing: bool,
}

/// For each step count and `(omega, nu)`: energy distance of conditional
/// samples to `reference`, condition accuracy, and mean distance to the 1-step
/// samples from the same initial noises.
///
/// Chains cycle through the labels; `reference` should be drawn from the
/// matching label mix (see [`labelled_reference`]).
pub fn tradeoff_report(
    student: &StudentModel,
    mixture: &ConditionedMixture,
    reference: &[Vec<f64>],
    spec: &TradeoffSpec,
) -> Result<Vec<TradeoffRow>> {
    let noises = shared_noises(student, spec.seed, spec.samples);
    let labels: Vec<Cond> = (0..spec.samples).map(|i| Cond::Label(i % mixture.n_labels())).collect();
    let run = |steps: usize, omega: f64, nu: f64| -> Result<Vec<Vec<f64>>> {
        let out = par::map_range(spec.samples, |i| {
            let cfg = SamplerConfig {
                steps,
                gamma: spec.gamma,
                nu,
                omega,
                cond: labels[i],
                seed: spec.seed,
            };
            sample_from(student, &cfg, std::slice::from_ref(&noises[i])).map(|mut v| v.remove(0))
        });
        out.into_iter().collect()
    };
    let mut rows = Vec::new();
    for &(omega, nu) in &spec.guidance {
        let one = run(1, omega, nu)?;
        for &steps in &spec.steps {
            let start = Instant::now();
            let xs = if steps == 1 { one.clone() } else { run(steps, omega, nu)? };
            let wall_ms = if spec.record_timing {
                start.elapsed().as_millis() as u64
            } else {
                0
            };
            rows.push(TradeoffRow {
                steps,
                omega,
                nu,
                gamma: spec.gamma,
                energy_distance: energy_distance(&xs, reference)?,
                condition_accuracy: condition_accuracy(&xs, &labels, mixture)?,
                preservation_vs_1step: pairwise_mean_l2(&xs, &one)?,
                wall_ms,
            });
        }
    }
    Ok(rows)
}

/// `n` data samples whose labels cycle through `0..n_labels`, matching the
/// label assignment of [`tradeoff_report`].
pub fn labelled_reference(mixture: &ConditionedMixture, n: usize, seed: u64) -> Vec<Vec<f64>> {
    par::map_range(n, |i| {
        let mut r = rng::child(seed, &[6, i as u64]);
        mixture.sample_label(&mut r, i % mixture.n_labels())
    })
}

/// `n` draws from `p(x | cond)` with per-item streams.
pub fn data_samples(mixture: &ConditionedMixture, cond: Cond, n: usize, seed: u64) -> Vec<Vec<f64>> {
    par::map_range(n, |i| {
        let mut r = rng::child(seed, &[7, i as u64]);
        mixture.sample_cond(&mut r, cond)
    })
}
