//! The student jump model and its training: trajectory-consistency loss
//! against guided teacher solves, auxiliary DSM loss, adaptive weighting and
//! the EMA target.

mod loss;
mod student;

pub use loss::{
    adaptive_lambda, ctm_item, ctm_loss, ctm_target, distance_grad, dsm_item, dsm_loss, Distance, DsmDraw, ItemDraw,
};
pub use student::{JumpTape, StudentModel, Which};

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::diffusion::{karras_grid, KarrasGrid};
use crate::error::{Error, Result};
use crate::netcore::{RAdam, RAdamHyper};
use crate::teacher::{ConditionedMixture, TeacherModel};
use crate::{par, rng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaMode {
    Adaptive,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillConfig {
    pub n_grid: usize,
    pub mu_ema: f64,
    pub omega_min: f64,
    pub omega_max: f64,
    pub p_uncond: f64,
    pub lr: f64,
    pub max_ode_steps: usize,
    pub distance: Distance,
    pub lambda: LambdaMode,
    pub batch: usize,
    pub iterations: usize,
    pub hidden: Vec<usize>,
    pub init_from_teacher: bool,
    /// Weight the student DSM loss by `w(t)` instead of leaving it unweighted.
    pub dsm_weighted: bool,
    /// Record wall-clock milliseconds in the log (otherwise 0, keeping logs reproducible).
    pub record_timing: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            n_grid: 40,
            mu_ema: 0.999,
            omega_min: 2.0,
            omega_max: 5.0,
            p_uncond: 0.1,
            lr: 8.0e-5,
            max_ode_steps: crate::solver::MAX_ODE_STEPS,
            distance: Distance::L2STime,
            lambda: LambdaMode::Adaptive,
            batch: 32,
            iterations: 20_000,
            hidden: vec![128, 128],
            init_from_teacher: true,
            dsm_weighted: false,
            record_timing: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_grid < 2 {
            return Err(Error::config("distill.n_grid", "need at least 2 grid points"));
        }
        if !(self.omega_min <= self.omega_max) {
            return Err(Error::config("distill.omega_min", "omega_min must not exceed omega_max"));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::config("distill.p_uncond", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.mu_ema) {
            return Err(Error::config("distill.mu_ema", "must lie in [0, 1]"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("distill.lr", "must be nonnegative"));
        }
        if self.max_ode_steps == 0 {
            return Err(Error::config("distill.max_ode_steps", "must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("distill.batch", "must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("distill.hidden", "hidden widths must be positive"));
        }
        if let LambdaMode::Fixed(v) = self.lambda {
            if !(v >= 0.0) {
                return Err(Error::config("distill.lambda", "fixed weight must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iter: usize,
    pub loss_ctm: f64,
    pub loss_dsm: f64,
    pub lambda: f64,
    pub grad_norm: f64,
    pub wall_ms: u64,
    /// Random words consumed by this iteration's item streams.
    pub rng_cursor: u128,
}

/// Draws of one training iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDraws {
    pub iter: usize,
    pub ctm: Vec<ItemDraw>,
    pub dsm: Vec<DsmDraw>,
}

#[derive(Debug, Clone)]
pub struct DistillRun {
    /// Last good state (the state before the failing iteration on abort).
    pub student: StudentModel,
    pub log: Vec<LogRow>,
    /// Draws of iteration 0, for replaying the first logged losses.
    pub first_draws: Option<IterationDraws>,
    /// Why training stopped early, if it did.
    pub aborted: Option<String>,
}

/// Draws a training iteration's batch; each item has its own stream.
pub fn draw_iteration(
    mixture: &ConditionedMixture,
    student: &StudentModel,
    grid: &KarrasGrid,
    cfg: &DistillConfig,
    seed: u64,
    iter: usize,
) -> (IterationDraws, u128) {
    let items = par::map_range(cfg.batch, |i| {
        let mut r = rng::child(seed, &[2, iter as u64, i as u64]);
        let (z0, label) = mixture.sample(&mut r);
        let ctm = ItemDraw::sample(&mut r, z0.clone(), label, grid, cfg);
        let dsm = DsmDraw::sample(&mut r, z0, label, student, cfg);
        (ctm, dsm, rng::cursor(&r))
    });
    let mut draws = IterationDraws {
        iter,
        ctm: Vec::with_capacity(cfg.batch),
        dsm: Vec::with_capacity(cfg.batch),
    };
    let mut cursor = 0;
    for (c, d, k) in items {
        draws.ctm.push(c);
        draws.dsm.push(d);
        cursor += k;
    }
    (draws, cursor)
}

/// Initial student for a distillation run.
///
/// A neural teacher brings its own schedule and embedder; with the analytic
/// teacher, `schedule` and a fresh `embed_dim`-wide embedder are used.
pub fn init_student(
    teacher: &TeacherModel,
    mixture: &ConditionedMixture,
    schedule: &crate::diffusion::Schedule,
    cfg: &DistillConfig,
    embed_dim: usize,
    seed: u64,
) -> Result<StudentModel> {
    let mut r = rng::child(seed, &[0x57]);
    match teacher {
        TeacherModel::Neural(n, schedule) if cfg.init_from_teacher => {
            StudentModel::from_teacher(n, &cfg.hidden, *schedule, &mut r)
        }
        TeacherModel::Neural(n, schedule) => {
            StudentModel::random(mixture.dim(), &cfg.hidden, mixture.n_labels(), n.embed.clone(), *schedule, &mut r)
        }
        TeacherModel::Analytic(_) => {
            let embed = crate::netcore::Embedder::new(embed_dim, 16.0, seed)?;
            StudentModel::random(
                mixture.dim(),
                &cfg.hidden,
                mixture.n_labels(),
                embed,
                *schedule,
                &mut r,
            )
        }
    }
}

/// One optimization step: losses, weighting, RAdam update and EMA update.
pub fn train_step(
    student: &mut StudentModel,
    opt: &mut RAdam,
    teacher: &TeacherModel,
    grid: &KarrasGrid,
    draws: &IterationDraws,
    cfg: &DistillConfig,
) -> Result<(f64, f64, f64, f64)> {
    let (loss_ctm, g_ctm) = ctm_loss(student, teacher, grid, &draws.ctm, cfg)?;
    let (loss_dsm, g_dsm) = dsm_loss(student, &draws.dsm, cfg)?;
    let lambda = match cfg.lambda {
        LambdaMode::Adaptive => adaptive_lambda(g_ctm.last_layer(&student.online), g_dsm.last_layer(&student.online)),
        LambdaMode::Fixed(v) => v,
    };
    let mut total = g_ctm;
    total.add_scaled(&g_dsm, lambda);
    let grad_norm = total.norm();
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm is {grad_norm}")));
    }
    opt.step(&mut student.online.blocks_with_grads(&total))?;
    student.ema_update(cfg.mu_ema)?;
    Ok((loss_ctm, loss_dsm, lambda, grad_norm))
}

/// Trains `student` in place for `cfg.iterations` steps.
///
/// A failing iteration stops training; the returned run then holds the state
/// from before that iteration and the reason in `aborted`.
pub fn train_student(
    mut student: StudentModel,
    teacher: &TeacherModel,
    mixture: &ConditionedMixture,
    cfg: &DistillConfig,
    seed: u64,
) -> Result<DistillRun> {
    cfg.validate()?;
    if cfg.distance == Distance::TeacherFeature {
        teacher.neural()?;
    }
    let grid = karras_grid(&student.schedule, cfg.n_grid)?;
    let mut opt = RAdam::new(RAdamHyper {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut log = Vec::with_capacity(cfg.iterations);
    let mut first_draws = None;
    let mut aborted = None;
    for iter in 0..cfg.iterations {
        let start = Instant::now();
        let (draws, cursor) = draw_iteration(mixture, &student, &grid, cfg, seed, iter);
        let before = student.clone();
        match train_step(&mut student, &mut opt, teacher, &grid, &draws, cfg) {
            Ok((loss_ctm, loss_dsm, lambda, grad_norm)) => {
                log.push(LogRow {
                    iter,
                    loss_ctm,
                    loss_dsm,
                    lambda,
                    grad_norm,
                    wall_ms: if cfg.record_timing {
                        start.elapsed().as_millis() as u64
                    } else {
                        0
                    },
                    rng_cursor: cursor,
                });
            }
            Err(e) => {
                log::error!("distillation aborted at iteration {iter}: {e}");
                let detail = match &e {
                    Error::NonFinite(_) => format!(
                        "iteration {iter}: {e}; draws: {}",
                        serde_json::to_string(&draws).unwrap_or_default()
                    ),
                    _ => format!("iteration {iter}: {e}"),
                };
                student = before;
                aborted = Some(detail);
                break;
            }
        }
        if iter == 0 {
            first_draws = Some(draws);
        }
    }
    Ok(DistillRun {
        student,
        log,
        first_draws,
        aborted,
    })
}
