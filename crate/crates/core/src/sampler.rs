//! Multistep sampling with gamma-controlled renoising and nu-blended
//! conditional/unconditional jumps. All jumps use the EMA network.

use serde::{Deserialize, Serialize};

use crate::condition::Cond;
use crate::diffusion::{karras_grid, KarrasGrid};
use crate::distill::{StudentModel, Which};
use crate::error::{Error, Result};
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub steps: usize,
    pub gamma: f64,
    pub nu: f64,
    pub omega: f64,
    pub cond: Cond,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 1,
            gamma: 0.0,
            nu: 1.0,
            omega: 3.5,
            cond: Cond::Null,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Argument("sampling needs at least one step".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Argument(format!("gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !self.nu.is_finite() || !self.omega.is_finite() {
            return Err(Error::Argument("nu and omega must be finite".into()));
        }
        Ok(())
    }
}

/// One step of a chain: the jump from `t` to `t_tilde`, then renoising to `t_next`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub t: f64,
    pub t_tilde: f64,
    pub t_next: f64,
    pub jumped: Vec<f64>,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutput {
    pub initial: Vec<f64>,
    pub sample: Vec<f64>,
    pub trace: Vec<TraceStep>,
}

/// Sampling grid for `steps` jumps: `steps + 1` Karras points from `sigma_max` to `sigma_min`.
pub fn sampling_grid(student: &StudentModel, steps: usize) -> Result<KarrasGrid> {
    karras_grid(&student.schedule, steps + 1)
}

/// `nu G(z, c) + (1 - nu) G(z, null)`; a single branch when the other has weight 0
/// or the condition is null.
pub fn blended_jump(student: &StudentModel, z: &[f64], cond: Cond, omega: f64, nu: f64, t: f64, s: f64) -> Result<Vec<f64>> {
    if cond.is_null() || nu == 0.0 {
        return student.jump(Which::Ema, z, Cond::Null, omega, t, s);
    }
    if nu == 1.0 {
        return student.jump(Which::Ema, z, cond, omega, t, s);
    }
    let gc = student.jump(Which::Ema, z, cond, omega, t, s)?;
    let gu = student.jump(Which::Ema, z, Cond::Null, omega, t, s)?;
    Ok(gc.iter().zip(&gu).map(|(c, u)| nu * c + (1.0 - nu) * u).collect())
}

/// Hook applied to the jumped state before renoising, given the step index,
/// the state at `t_n`, `t_n`, and the jumped state.
pub type Correction<'a> = dyn FnMut(usize, &[f64], f64, &mut Vec<f64>) -> Result<()> + 'a;

/// Runs one chain from `initial` (the state at `sigma_max`).
pub fn run_chain(
    student: &StudentModel,
    cfg: &SamplerConfig,
    grid: &KarrasGrid,
    initial: Vec<f64>,
    rng: &mut rng::Stream,
    mut correction: Option<&mut Correction<'_>>,
) -> Result<SampleOutput> {
    cfg.validate()?;
    if grid.len() != cfg.steps + 1 {
        return Err(Error::Argument("sampling grid does not match the step count".into()));
    }
    if initial.len() != student.data_dim() {
        return Err(Error::shape(student.data_dim(), initial.len(), "initial noise"));
    }
    let sigma_min = student.schedule.sigma_min;
    let keep = (1.0 - cfg.gamma * cfg.gamma).sqrt();
    let mut z = initial.clone();
    let mut trace = Vec::with_capacity(cfg.steps);
    for n in 0..cfg.steps {
        let (t, t_next) = (grid.t(n), grid.t(n + 1));
        let t_tilde = (keep * t_next).max(sigma_min);
        let mut jumped = blended_jump(student, &z, cfg.cond, cfg.omega, cfg.nu, t, t_tilde)?;
        if let Some(c) = correction.as_deref_mut() {
            c(n, &z, t, &mut jumped)?;
        }
        let last = n + 1 == cfg.steps;
        let state = if last || cfg.gamma == 0.0 {
            jumped.clone()
        } else {
            let eps = rng::normal_vec(rng, jumped.len());
            jumped
                .iter()
                .zip(&eps)
                .map(|(a, e)| a + cfg.gamma * t_next * e)
                .collect()
        };
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("sampler state diverged at step {n}")));
        }
        trace.push(TraceStep {
            t,
            t_tilde,
            t_next,
            jumped,
            state: state.clone(),
        });
        z = state;
    }
    Ok(SampleOutput {
        initial,
        sample: z,
        trace,
    })
}

/// Stream of chain `chain` under `seed`: the initial noise is drawn first,
/// renoising draws follow.
pub fn chain_stream(seed: u64, chain: u64) -> rng::Stream {
    rng::child(seed, &[3, chain])
}

/// Draws a chain's initial state `sigma_max * eps` from its stream.
pub fn initial_noise(student: &StudentModel, r: &mut rng::Stream) -> Vec<f64> {
    let t0 = student.schedule.sigma_max;
    rng::normal_vec(r, student.data_dim()).into_iter().map(|e| t0 * e).collect()
}

/// Samples chain `chain`, from `initial` when given.
pub fn sample(student: &StudentModel, cfg: &SamplerConfig, chain: u64, initial: Option<Vec<f64>>) -> Result<SampleOutput> {
    cfg.validate()?;
    let grid = sampling_grid(student, cfg.steps)?;
    let mut r = chain_stream(cfg.seed, chain);
    let z0 = match initial {
        Some(z) => z,
        None => initial_noise(student, &mut r),
    };
    run_chain(student, cfg, &grid, z0, &mut r, None)
}

/// Final samples of chains `0..n`, in chain order.
pub fn sample_batch(student: &StudentModel, cfg: &SamplerConfig, n: usize) -> Result<Vec<Vec<f64>>> {
    let out = par::try_map_range(n, |i| sample(student, cfg, i as u64, None).map(|o| o.sample))?;
    Ok(out)
}

/// Final samples of chains started from the given initial states.
pub fn sample_from(student: &StudentModel, cfg: &SamplerConfig, initials: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    par::map_slice(initials, |i, z| sample(student, cfg, i as u64, Some(z.clone())).map(|o| o.sample))
        .into_iter()
        .collect()
}

/// `n` shared initial states `sigma_max * eps` drawn from chain streams of `seed`.
pub fn shared_noises(student: &StudentModel, seed: u64, n: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|i| initial_noise(student, &mut chain_stream(seed, i as u64)))
        .collect()
}

/// Mean over `noises` of `|sample(steps_a) - sample(steps_b)|` with the same
/// initial states, condition, omega and nu.
pub fn preservation_distance(
    student: &StudentModel,
    steps_a: usize,
    steps_b: usize,
    gamma: f64,
    noises: &[Vec<f64>],
    base: &SamplerConfig,
) -> Result<f64> {
    if noises.is_empty() {
        return Err(Error::Argument("preservation distance needs at least one noise".into()));
    }
    let run = |steps| {
        let cfg = SamplerConfig {
            steps,
            gamma,
            ..base.clone()
        };
        sample_from(student, &cfg, noises)
    };
    let a = run(steps_a)?;
    let b = run(steps_b)?;
    pairwise_mean_l2(&a, &b)
}

/// Mean L2 distance between matched rows of two sets.
pub fn pairwise_mean_l2(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape(a.len(), b.len(), "matched sample sets"));
    }
    let total: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt())
        .sum();
    Ok(total / a.len() as f64)
}
