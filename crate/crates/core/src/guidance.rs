//! Inference-time control of the intensity envelope of generated signals:
//! loss-based guidance through the student's full jump, and optimization of
//! the initial noise.
//!
//! A sample of dimension `D` is read as a signal over its coordinates. Its
//! intensity curve is the sliding-window RMS (`D - W + 1` frames) in dB,
//! smoothed by a Savitzky-Golay filter over the same window.

use serde::{Deserialize, Serialize};
use std::f64::consts::{LN_10, PI};

use crate::condition::Cond;
use crate::distill::{JumpTape, StudentModel, Which};
use crate::error::{Error, Result};
use crate::netcore::Adam;
use crate::sampler::{chain_stream, initial_noise, run_chain, sampling_grid, SampleOutput, SamplerConfig};

/// RMS floor applied before taking the logarithm.
pub const RMS_FLOOR: f64 = 1e-8;

/// Savitzky-Golay smoothing weights for a centered window of odd length
/// `window` and polynomial order `order < window`, from the normal equations.
pub fn savgol_coefficients(window: usize, order: usize) -> Result<Vec<f64>> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Argument(format!("filter window must be odd and positive, got {window}")));
    }
    if order >= window {
        return Err(Error::Argument(format!("filter order {order} must be below the window {window}")));
    }
    let h = (window / 2) as i64;
    let m = order + 1;
    // normal matrix A^T A with A[j][k] = j^k
    let mut ata = vec![vec![0.0; m]; m];
    for j in -h..=h {
        let x = j as f64;
        for r in 0..m {
            for c in 0..m {
                ata[r][c] += x.powi((r + c) as i32);
            }
        }
    }
    // solve A^T A v = e_0; the smoothing weight of offset j is sum_k v_k j^k
    let mut rhs = vec![0.0; m];
    rhs[0] = 1.0;
    let v = solve(ata, rhs)?;
    Ok((-h..=h)
        .map(|j| (0..m).map(|k| v[k] * (j as f64).powi(k as i32)).sum())
        .collect())
}

/// Gaussian elimination with partial pivoting on a small dense system.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Result<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("nonempty range");
        if a[piv][col].abs() < 1e-300 {
            return Err(Error::Domain("singular normal equations".into()));
        }
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            for c in col..n {
                a[r][c] -= f * a[col][c];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Ok(x)
}

/// Smoothing filter order used for a window: 2, or less for tiny windows.
pub fn filter_order(window: usize) -> usize {
    2.min(window.saturating_sub(1))
}

/// Default window for a signal of length `d`: `d / 8` rounded to an odd number.
pub fn default_window(d: usize) -> usize {
    let w = (d / 8).max(1);
    if w % 2 == 0 {
        w + 1
    } else {
        w
    }
}

fn check_window(len: usize, window: usize) -> Result<()> {
    if window == 0 || window % 2 == 0 {
        return Err(Error::Argument(format!("window must be odd and positive, got {window}")));
    }
    if window > len {
        return Err(Error::Argument(format!("window {window} exceeds signal length {len}")));
    }
    Ok(())
}

fn frame_rms(x: &[f64], window: usize) -> Vec<f64> {
    (0..x.len() - window + 1)
        .map(|f| (x[f..f + window].iter().map(|v| v * v).sum::<f64>() / window as f64).sqrt())
        .collect()
}

fn smooth(values: &[f64], coeffs: &[f64]) -> Vec<f64> {
    let n = values.len() as i64;
    let h = (coeffs.len() / 2) as i64;
    (0..n)
        .map(|i| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| c * values[(i + k as i64 - h).clamp(0, n - 1) as usize])
                .sum()
        })
        .collect()
}

/// Transpose of [`smooth`].
fn smooth_transpose(grad: &[f64], coeffs: &[f64]) -> Vec<f64> {
    let n = grad.len() as i64;
    let h = (coeffs.len() / 2) as i64;
    let mut out = vec![0.0; grad.len()];
    for i in 0..n {
        for (k, c) in coeffs.iter().enumerate() {
            out[(i + k as i64 - h).clamp(0, n - 1) as usize] += c * grad[i as usize];
        }
    }
    out
}

/// Smoothed dB intensity curve of `x` (length `len - window + 1`).
pub fn intensity_feature(x: &[f64], window: usize) -> Result<Vec<f64>> {
    check_window(x.len(), window)?;
    let db: Vec<f64> = frame_rms(x, window)
        .into_iter()
        .map(|r| 20.0 * r.max(RMS_FLOOR).log10())
        .collect();
    let coeffs = savgol_coefficients(window, filter_order(window))?;
    Ok(smooth(&db, &coeffs))
}

/// Gradient of `<upstream, intensity_feature(x)>` with respect to `x`.
pub fn intensity_feature_backward(x: &[f64], window: usize, upstream: &[f64]) -> Result<Vec<f64>> {
    check_window(x.len(), window)?;
    let rms = frame_rms(x, window);
    if upstream.len() != rms.len() {
        return Err(Error::shape(rms.len(), upstream.len(), "intensity upstream gradient"));
    }
    let coeffs = savgol_coefficients(window, filter_order(window))?;
    let g_db = smooth_transpose(upstream, &coeffs);
    let mut gx = vec![0.0; x.len()];
    for (f, (&r, &g)) in rms.iter().zip(&g_db).enumerate() {
        if r <= RMS_FLOOR {
            continue;
        }
        // d(20 log10 r)/dr = 20 / (r ln 10); dr/dx_k = x_k / (W r)
        let scale = g * 20.0 / (LN_10 * r) / (window as f64 * r);
        for k in f..f + window {
            gx[k] += scale * x[k];
        }
    }
    Ok(gx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetShape {
    Flat,
    RampUp,
    RampDown,
    Triangle,
    Vee,
    Sine,
}

impl TargetShape {
    pub const ALL: [TargetShape; 6] = [
        TargetShape::Flat,
        TargetShape::RampUp,
        TargetShape::RampDown,
        TargetShape::Triangle,
        TargetShape::Vee,
        TargetShape::Sine,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TargetShape::Flat => "flat",
            TargetShape::RampUp => "ramp-up",
            TargetShape::RampDown => "ramp-down",
            TargetShape::Triangle => "triangle",
            TargetShape::Vee => "vee",
            TargetShape::Sine => "sine",
        }
    }

    pub fn parse(s: &str) -> Option<TargetShape> {
        TargetShape::ALL.into_iter().find(|t| t.name() == s)
    }

    /// Profile in `[-1, 1]` at position `u` in `[0, 1]`.
    pub fn profile(self, u: f64) -> f64 {
        match self {
            TargetShape::Flat => 0.0,
            TargetShape::RampUp => 2.0 * u - 1.0,
            TargetShape::RampDown => 1.0 - 2.0 * u,
            TargetShape::Triangle => 1.0 - 2.0 * (2.0 * u - 1.0).abs(),
            TargetShape::Vee => 2.0 * (2.0 * u - 1.0).abs() - 1.0,
            TargetShape::Sine => (2.0 * PI * u).sin(),
        }
    }
}

/// Target intensity curve and the window that defines the feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceTarget {
    pub y: Vec<f64>,
    pub window: usize,
}

impl GuidanceTarget {
    pub fn new(y: Vec<f64>, window: usize) -> Result<Self> {
        if window == 0 || window % 2 == 0 {
            return Err(Error::Argument(format!("window must be odd and positive, got {window}")));
        }
        if y.is_empty() || y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("target curve must be nonempty and finite".into()));
        }
        Ok(GuidanceTarget { y, window })
    }

    /// `base_db + amplitude_db * profile` over the frames of a length-`d` signal.
    pub fn from_shape(shape: TargetShape, d: usize, window: usize, base_db: f64, amplitude_db: f64) -> Result<Self> {
        check_window(d, window)?;
        let frames = d - window + 1;
        let y = (0..frames)
            .map(|f| {
                let u = if frames > 1 { f as f64 / (frames - 1) as f64 } else { 0.5 };
                base_db + amplitude_db * shape.profile(u)
            })
            .collect();
        Self::new(y, window)
    }

    pub fn mse(&self, x: &[f64]) -> Result<f64> {
        let f = intensity_feature(x, self.window)?;
        if f.len() != self.y.len() {
            return Err(Error::shape(self.y.len(), f.len(), "intensity frames"));
        }
        Ok(f.iter().zip(&self.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / f.len() as f64)
    }

    /// MSE and its gradient with respect to `x`.
    pub fn mse_grad(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let f = intensity_feature(x, self.window)?;
        if f.len() != self.y.len() {
            return Err(Error::shape(self.y.len(), f.len(), "intensity frames"));
        }
        let n = f.len() as f64;
        let up: Vec<f64> = f.iter().zip(&self.y).map(|(a, b)| 2.0 * (a - b) / n).collect();
        let mse = f.iter().zip(&self.y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
        Ok((mse, intensity_feature_backward(x, self.window, &up)?))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoPolicy {
    /// Step of length `scale * t_n` along the normalized gradient.
    GradNorm { scale: f64 },
    /// `rho` times the raw gradient.
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub sampler: SamplerConfig,
    pub rho: RhoPolicy,
    /// Iterations of initial-noise optimization.
    pub iterations: usize,
    pub adam_lr: f64,
    /// Guidance scale and blend of the one-step generator used while optimizing.
    pub opt_omega: f64,
    pub opt_nu: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            sampler: SamplerConfig {
                steps: 16,
                gamma: 0.0,
                nu: 2.0,
                omega: 3.5,
                cond: Cond::Null,
                seed: 0,
            },
            rho: RhoPolicy::GradNorm { scale: 1.5 },
            iterations: 70,
            adam_lr: 1.0,
            opt_omega: 3.5,
            opt_nu: 1.0,
        }
    }
}

/// Gradient of `MSE(f(G(z, cond, omega, t, sigma_min)), y)` with respect to `z`.
pub fn jump_loss_grad(
    student: &StudentModel,
    target: &GuidanceTarget,
    z: &[f64],
    cond: Cond,
    omega: f64,
    t: f64,
) -> Result<(f64, Vec<f64>)> {
    let (x, tape) = student.jump_taped(Which::Ema, z, cond, omega, t, student.schedule.sigma_min)?;
    let (mse, gx) = target.mse_grad(&x)?;
    let (_, gz) = student.jump_backward(Which::Ema, &tape, &gx, false)?;
    Ok((mse, gz))
}

/// Guided chain `chain`: multistep sampling with a loss-gradient correction of
/// each jumped state. Returns the output and the per-step correction norms.
pub fn guided_sample(
    student: &StudentModel,
    target: &GuidanceTarget,
    cfg: &GuidanceConfig,
    chain: u64,
    initial: Option<Vec<f64>>,
) -> Result<(SampleOutput, Vec<f64>)> {
    let sc = &cfg.sampler;
    sc.validate()?;
    let grid = sampling_grid(student, sc.steps)?;
    let mut r = chain_stream(sc.seed, chain);
    let z0 = match initial {
        Some(z) => z,
        None => initial_noise(student, &mut r),
    };
    let mut corrections = Vec::with_capacity(sc.steps);
    let mut correct = |n: usize, z: &[f64], t: f64, jumped: &mut Vec<f64>| -> Result<()> {
        let active = match cfg.rho {
            RhoPolicy::GradNorm { scale } => scale != 0.0,
            RhoPolicy::Fixed(v) => v != 0.0,
        };
        if !active {
            corrections.push(0.0);
            return Ok(());
        }
        let (_, g) = jump_loss_grad(student, target, z, sc.cond, sc.omega, t)?;
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() {
            log::warn!("guidance step {n}: non-finite gradient, correction skipped");
            corrections.push(0.0);
            return Ok(());
        }
        let rho = match cfg.rho {
            RhoPolicy::GradNorm { scale } if norm > 0.0 => scale * t / norm,
            RhoPolicy::GradNorm { .. } => 0.0,
            RhoPolicy::Fixed(v) => v,
        };
        jumped.iter_mut().zip(&g).for_each(|(a, b)| *a -= rho * b);
        corrections.push(rho * norm);
        Ok(())
    };
    let out = run_chain(student, sc, &grid, z0, &mut r, Some(&mut correct))?;
    Ok((out, corrections))
}

/// Optimizes the initial state of chain `chain` against the target through the
/// one-step generator, then samples from it with the configured sampler.
/// Returns the optimized initial state, the output and the loss per iteration.
pub fn zt_optimize(
    student: &StudentModel,
    target: &GuidanceTarget,
    cfg: &GuidanceConfig,
    chain: u64,
    initial: Option<Vec<f64>>,
) -> Result<(Vec<f64>, SampleOutput, Vec<f64>)> {
    let sc = &cfg.sampler;
    sc.validate()?;
    let grid = sampling_grid(student, sc.steps)?;
    let mut r = chain_stream(sc.seed, chain);
    let mut z = match initial {
        Some(z) => z,
        None => initial_noise(student, &mut r),
    };
    let t0 = student.schedule.sigma_max;
    let sigma_min = student.schedule.sigma_min;
    let mut adam = Adam::new(cfg.adam_lr, z.len());
    let mut losses = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let (x, tapes) = one_step_taped(student, &z, sc.cond, cfg.opt_omega, cfg.opt_nu, t0, sigma_min)?;
        let (mse, gx) = target.mse_grad(&x)?;
        let mut g = vec![0.0; z.len()];
        for (w, tape) in &tapes {
            let up: Vec<f64> = gx.iter().map(|v| w * v).collect();
            let (_, gz) = student.jump_backward(Which::Ema, tape, &up, false)?;
            g.iter_mut().zip(&gz).for_each(|(a, b)| *a += b);
        }
        losses.push(mse);
        if g.iter().any(|v| !v.is_finite()) {
            log::warn!("initial-noise optimization iteration {it}: non-finite gradient, stopping");
            break;
        }
        adam.step(&mut z, &g)?;
    }
    let out = run_chain(student, sc, &grid, z.clone(), &mut r, None)?;
    Ok((z, out, losses))
}

/// The nu-blended one-step jump with one tape per active branch.
fn one_step_taped(
    student: &StudentModel,
    z: &[f64],
    cond: Cond,
    omega: f64,
    nu: f64,
    t: f64,
    s: f64,
) -> Result<(Vec<f64>, Vec<(f64, JumpTape)>)> {
    let branches: Vec<(f64, Cond)> = if cond.is_null() || nu == 0.0 {
        vec![(1.0, Cond::Null)]
    } else if nu == 1.0 {
        vec![(1.0, cond)]
    } else {
        vec![(nu, cond), (1.0 - nu, Cond::Null)]
    };
    let mut x = vec![0.0; z.len()];
    let mut tapes = Vec::with_capacity(branches.len());
    for (w, c) in branches {
        let (y, tape) = student.jump_taped(Which::Ema, z, c, omega, t, s)?;
        x.iter_mut().zip(&y).for_each(|(a, b)| *a += w * b);
        tapes.push((w, tape));
    }
    Ok((x, tapes))
}
