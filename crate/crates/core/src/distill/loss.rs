use rand::Rng;
use serde::{Deserialize, Serialize};

use super::student::{StudentModel, Which};
use super::DistillConfig;
use crate::condition::Cond;
use crate::diffusion::{dsm_weight, sample_mixed_time, KarrasGrid};
use crate::error::{Error, Result};
use crate::netcore::CondNetGrads;
use crate::solver::cfg_solve;
use crate::teacher::TeacherModel;
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    /// Squared L2 at the jump target time `s`.
    L2STime,
    /// Squared L2 after transporting both sides to `sigma_min` with the EMA net.
    L2ZeroTime,
    /// Normalized teacher hidden-feature distance at time `s`.
    TeacherFeature,
}

impl Distance {
    pub const ALL: [Distance; 3] = [Distance::L2ZeroTime, Distance::L2STime, Distance::TeacherFeature];

    pub fn name(self) -> &'static str {
        match self {
            Distance::L2STime => "l2_s_time",
            Distance::L2ZeroTime => "l2_zero_time",
            Distance::TeacherFeature => "teacher_feature",
        }
    }

    pub fn parse(s: &str) -> Option<Distance> {
        Distance::ALL.into_iter().find(|d| d.name() == s)
    }
}

/// Random choices behind one item of the trajectory loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemDraw {
    pub z0: Vec<f64>,
    pub label: usize,
    pub cond: Cond,
    pub t_idx: usize,
    pub s_idx: usize,
    pub u_idx: usize,
    pub omega: f64,
    pub eps: Vec<f64>,
}

/// Random choices behind one item of the student DSM loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DsmDraw {
    pub z0: Vec<f64>,
    pub cond: Cond,
    pub t: f64,
    pub omega: f64,
    pub eps: Vec<f64>,
}

fn uniform_index<R: Rng + ?Sized>(rng: &mut R, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn drop_label<R: Rng + ?Sized>(rng: &mut R, label: usize, p_uncond: f64) -> Cond {
    if rng::uniform(rng) < p_uncond {
        Cond::Null
    } else {
        Cond::Label(label)
    }
}

impl ItemDraw {
    /// Grid indices `t_idx <= u_idx <= s_idx` (times `t >= u >= s`).
    ///
    /// `t` is uniform over all but the last grid point, `s` uniform over the
    /// points at or after `t`, `u` uniform over the points strictly after `t`
    /// up to `s` and within the solver budget. When `s == t`, `u = t`.
    pub fn sample<R: Rng + ?Sized>(
        rng: &mut R,
        z0: Vec<f64>,
        label: usize,
        grid: &KarrasGrid,
        cfg: &DistillConfig,
    ) -> Self {
        let last = grid.last();
        let t_idx = uniform_index(rng, 0, last - 1);
        let s_idx = uniform_index(rng, t_idx, last);
        let u_idx = if s_idx == t_idx {
            t_idx
        } else {
            uniform_index(rng, t_idx + 1, s_idx.min(t_idx + cfg.max_ode_steps))
        };
        let omega = cfg.omega_min + (cfg.omega_max - cfg.omega_min) * rng::uniform(rng);
        let cond = drop_label(rng, label, cfg.p_uncond);
        let eps = rng::normal_vec(rng, z0.len());
        ItemDraw {
            z0,
            label,
            cond,
            t_idx,
            s_idx,
            u_idx,
            omega,
            eps,
        }
    }

    fn validate(&self, grid: &KarrasGrid, max_steps: usize) -> Result<()> {
        let ok = self.t_idx <= self.u_idx
            && self.u_idx <= self.s_idx
            && self.s_idx < grid.len()
            && (self.u_idx > self.t_idx || self.s_idx == self.t_idx)
            && self.u_idx - self.t_idx <= max_steps;
        if !ok {
            return Err(Error::Invariant(format!(
                "grid indices violate t > u >= s: t={}, u={}, s={}",
                self.t_idx, self.u_idx, self.s_idx
            )));
        }
        Ok(())
    }
}

impl DsmDraw {
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, z0: Vec<f64>, label: usize, student: &StudentModel, cfg: &DistillConfig) -> Self {
        let t = sample_mixed_time(rng, &student.schedule);
        let omega = cfg.omega_min + (cfg.omega_max - cfg.omega_min) * rng::uniform(rng);
        let cond = drop_label(rng, label, cfg.p_uncond);
        let eps = rng::normal_vec(rng, z0.len());
        DsmDraw {
            z0,
            cond,
            t,
            omega,
            eps,
        }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Target of the trajectory loss: teacher guided solve from `t` to `u`, then
/// the EMA jump from `u` to `s`.
pub fn ctm_target(
    student: &StudentModel,
    teacher: &TeacherModel,
    grid: &KarrasGrid,
    draw: &ItemDraw,
    max_steps: usize,
) -> Result<Vec<f64>> {
    let (t, u, s) = (grid.t(draw.t_idx), grid.t(draw.u_idx), grid.t(draw.s_idx));
    let zt: Vec<f64> = draw.z0.iter().zip(&draw.eps).map(|(a, e)| a + t * e).collect();
    let zu = cfg_solve(
        teacher,
        &zt,
        draw.cond,
        draw.omega,
        grid,
        draw.t_idx,
        draw.u_idx,
        Some(max_steps),
    )?;
    student.jump(Which::Ema, &zu, draw.cond, draw.omega, u, s)
}

/// Distance between a fixed target and an estimate, with its gradient with
/// respect to the estimate. Both samples live at time `s`.
pub fn distance_grad(
    distance: Distance,
    student: &StudentModel,
    teacher: &TeacherModel,
    cond: Cond,
    omega: f64,
    s: f64,
    target: &[f64],
    est: &[f64],
) -> Result<(f64, Vec<f64>)> {
    match distance {
        Distance::L2STime => Ok((
            sq_dist(target, est),
            est.iter().zip(target).map(|(e, t)| 2.0 * (e - t)).collect(),
        )),
        Distance::L2ZeroTime => {
            let sigma_min = student.schedule.sigma_min;
            let a = student.jump(Which::Ema, target, cond, omega, s, sigma_min)?;
            let (b, tape) = student.jump_taped(Which::Ema, est, cond, omega, s, sigma_min)?;
            let up: Vec<f64> = b.iter().zip(&a).map(|(x, y)| 2.0 * (x - y)).collect();
            let (_, g) = student.jump_backward(Which::Ema, &tape, &up, false)?;
            Ok((sq_dist(&a, &b), g))
        }
        Distance::TeacherFeature => {
            let net = teacher.neural()?;
            let feats = net.features(target, s, cond)?;
            net.feature_distance_grad(est, s, cond, &feats)
        }
    }
}

/// Loss of one trajectory-loss item and its gradient for the online network.
pub fn ctm_item(
    student: &StudentModel,
    teacher: &TeacherModel,
    grid: &KarrasGrid,
    draw: &ItemDraw,
    cfg: &DistillConfig,
) -> Result<(f64, CondNetGrads)> {
    draw.validate(grid, cfg.max_ode_steps)?;
    if draw.s_idx == draw.t_idx {
        return Ok((0.0, student.online.zero_grads()));
    }
    let (t, s) = (grid.t(draw.t_idx), grid.t(draw.s_idx));
    let target = ctm_target(student, teacher, grid, draw, cfg.max_ode_steps)?;
    let zt: Vec<f64> = draw.z0.iter().zip(&draw.eps).map(|(a, e)| a + t * e).collect();
    let (est, tape) = student.jump_taped(Which::Online, &zt, draw.cond, draw.omega, t, s)?;
    let (loss, g_est) = distance_grad(cfg.distance, student, teacher, draw.cond, draw.omega, s, &target, &est)?;
    let (grads, _) = student.jump_backward(Which::Online, &tape, &g_est, true)?;
    Ok((loss, grads.expect("parameter gradients requested")))
}

/// Loss `|z0 - g(z_t, t, t)|^2` of one item (optionally weighted by `w(t)`).
pub fn dsm_item(student: &StudentModel, draw: &DsmDraw, weighted: bool) -> Result<(f64, CondNetGrads)> {
    let zt: Vec<f64> = draw.z0.iter().zip(&draw.eps).map(|(a, e)| a + draw.t * e).collect();
    let (g, tape) = student.g_taped(Which::Online, &zt, draw.cond, draw.omega, draw.t, draw.t)?;
    let w = if weighted {
        dsm_weight(draw.t, student.schedule.sigma_data)
    } else {
        1.0
    };
    let loss = w * sq_dist(&draw.z0, &g);
    let up: Vec<f64> = g.iter().zip(&draw.z0).map(|(a, b)| 2.0 * w * (a - b)).collect();
    let (grads, _) = student.jump_backward(Which::Online, &tape, &up, true)?;
    Ok((loss, grads.expect("parameter gradients requested")))
}

fn batch_mean<T: Sync>(
    student: &StudentModel,
    items: &[T],
    f: impl Fn(&T) -> Result<(f64, CondNetGrads)> + Sync + Send,
    what: &str,
) -> Result<(f64, CondNetGrads)> {
    let results = par::map_slice(items, |_, it| f(it));
    let n = items.len().max(1) as f64;
    let mut loss = 0.0;
    let mut grads = student.online.zero_grads();
    for (i, r) in results.into_iter().enumerate() {
        let (l, g) = r?;
        if !l.is_finite() {
            return Err(Error::NonFinite(format!("{what} loss of batch item {i} is {l}")));
        }
        loss += l;
        grads.add_scaled(&g, 1.0 / n);
    }
    Ok((loss / n, grads))
}

/// Batch mean of the trajectory loss and its online-parameter gradient.
pub fn ctm_loss(
    student: &StudentModel,
    teacher: &TeacherModel,
    grid: &KarrasGrid,
    draws: &[ItemDraw],
    cfg: &DistillConfig,
) -> Result<(f64, CondNetGrads)> {
    batch_mean(student, draws, |d| ctm_item(student, teacher, grid, d, cfg), "trajectory")
}

pub fn dsm_loss(student: &StudentModel, draws: &[DsmDraw], cfg: &DistillConfig) -> Result<(f64, CondNetGrads)> {
    batch_mean(student, draws, |d| dsm_item(student, d, cfg.dsm_weighted), "DSM")
}

/// `|g_ctm| / |g_dsm|` over the final layer, or 0 when `g_dsm` vanishes.
pub fn adaptive_lambda(g_ctm_last: &[f64], g_dsm_last: &[f64]) -> f64 {
    let n = |g: &[f64]| g.iter().map(|x| x * x).sum::<f64>().sqrt();
    let d = n(g_dsm_last);
    if d == 0.0 {
        0.0
    } else {
        n(g_ctm_last) / d
    }
}
