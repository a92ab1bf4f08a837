//! Heun integration of the probability-flow ODE over grid segments and the
//! classifier-free-guided endpoint combination.

use crate::condition::Cond;
use crate::diffusion::KarrasGrid;
use crate::error::{Error, Result};
use crate::par;
use crate::teacher::{pf_ode_rhs, Denoiser};

/// Largest number of ODE steps a training target may take.
pub const MAX_ODE_STEPS: usize = 39;

/// One Heun predictor-corrector step from `t` to `u`.
pub fn heun_step<D: Denoiser + ?Sized>(teacher: &D, z: &[f64], cond: Cond, t: f64, u: f64) -> Result<Vec<f64>> {
    let h = u - t;
    let d0 = pf_ode_rhs(teacher, z, t, cond)?;
    let pred: Vec<f64> = z.iter().zip(&d0).map(|(a, d)| a + h * d).collect();
    let d1 = pf_ode_rhs(teacher, &pred, u, cond)?;
    Ok(z
        .iter()
        .zip(d0.iter().zip(&d1))
        .map(|(a, (p, q))| a + 0.5 * h * (p + q))
        .collect())
}

/// Integrates from grid point `t_idx` down to grid point `u_idx >= t_idx`,
/// one Heun step per grid interval.
///
/// `max_steps` caps the number of intervals; exceeding it is an argument error.
pub fn heun_solve<D: Denoiser + ?Sized>(
    teacher: &D,
    z: &[f64],
    cond: Cond,
    grid: &KarrasGrid,
    t_idx: usize,
    u_idx: usize,
    max_steps: Option<usize>,
) -> Result<Vec<f64>> {
    if u_idx < t_idx || u_idx >= grid.len() {
        return Err(Error::Argument(format!(
            "solver needs grid indices t <= u < {}, got t={t_idx}, u={u_idx}",
            grid.len()
        )));
    }
    if let Some(cap) = max_steps {
        if u_idx - t_idx > cap {
            return Err(Error::Argument(format!(
                "solver span of {} steps exceeds the budget of {cap}",
                u_idx - t_idx
            )));
        }
    }
    let mut cur = z.to_vec();
    for i in t_idx..u_idx {
        cur = heun_step(teacher, &cur, cond, grid.t(i), grid.t(i + 1))?;
        if cur.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "solver state diverged between t={} and t={}",
                grid.t(i),
                grid.t(i + 1)
            )));
        }
    }
    Ok(cur)
}

/// Guided solve `omega * Solver(z, c) + (1 - omega) * Solver(z, null)`.
///
/// A null condition runs one trajectory (both branches coincide); `omega` of
/// exactly 1 or 0 returns the surviving branch unchanged.
#[allow(clippy::too_many_arguments)]
pub fn cfg_solve<D: Denoiser + ?Sized>(
    teacher: &D,
    z: &[f64],
    cond: Cond,
    omega: f64,
    grid: &KarrasGrid,
    t_idx: usize,
    u_idx: usize,
    max_steps: Option<usize>,
) -> Result<Vec<f64>> {
    let run = |c: Cond| heun_solve(teacher, z, c, grid, t_idx, u_idx, max_steps);
    if cond.is_null() || omega == 0.0 {
        return run(Cond::Null);
    }
    if omega == 1.0 {
        return run(cond);
    }
    let (c, u) = par::join(|| run(cond), || run(Cond::Null));
    let (c, u) = (c?, u?);
    Ok(c.iter().zip(&u).map(|(a, b)| omega * a + (1.0 - omega) * b).collect())
}
