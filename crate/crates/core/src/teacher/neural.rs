use serde::{Deserialize, Serialize};

use super::mixture::ConditionedMixture;
use crate::condition::Cond;
use crate::diffusion::{dsm_weight, precondition, sample_mixed_time, sample_train_time, Schedule, TimeMode};
use crate::error::{Error, Result};
use crate::netcore::{Checkpoint, CondNet, CondNetGrads, Embedder, RAdam, RAdamHyper, Trace};
use crate::{par, rng};

/// Neural denoiser `D(z, t, c) = c_skip z + c_out F(c_in z, c_noise, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NeuralDenoiser {
    pub net: CondNet,
    pub embed: Embedder,
    pub sigma_data: f64,
}

/// Forward state kept for backpropagating through the teacher at one input.
pub struct TeacherPass {
    pub trace: Trace,
    pub c_in: f64,
    pub cond: Cond,
}

impl NeuralDenoiser {
    pub fn data_dim(&self) -> usize {
        self.net.data_dim
    }

    fn pass(&self, z: &[f64], t: f64, cond: Cond) -> Result<TeacherPass> {
        let p = precondition(t, self.sigma_data)?;
        let scaled: Vec<f64> = z.iter().map(|v| p.c_in * v).collect();
        let e = self.embed.time(p.c_noise);
        let x = self.net.input(&scaled, &e, cond)?;
        Ok(TeacherPass {
            trace: self.net.mlp.forward_trace(&x)?,
            c_in: p.c_in,
            cond,
        })
    }

    pub fn denoise(&self, z: &[f64], t: f64, cond: Cond) -> Result<Vec<f64>> {
        let p = precondition(t, self.sigma_data)?;
        let scaled: Vec<f64> = z.iter().map(|v| p.c_in * v).collect();
        let e = self.embed.time(p.c_noise);
        let f = self.net.mlp.eval(&self.net.input(&scaled, &e, cond)?)?;
        Ok(z.iter().zip(&f).map(|(zi, fi)| p.c_skip * zi + p.c_out * fi).collect())
    }

    /// Hidden activations at `(z, t, cond)`, each rescaled to unit L2 norm
    /// (zero vectors stay zero).
    pub fn features(&self, z: &[f64], t: f64, cond: Cond) -> Result<Vec<Vec<f64>>> {
        let pass = self.pass(z, t, cond)?;
        Ok(pass.trace.hidden.iter().map(|h| normalized(h).0).collect())
    }

    /// `sum_m |TN_m(z) - target_m|^2` and its gradient with respect to `z`.
    pub fn feature_distance_grad(
        &self,
        z: &[f64],
        t: f64,
        cond: Cond,
        target: &[Vec<f64>],
    ) -> Result<(f64, Vec<f64>)> {
        let pass = self.pass(z, t, cond)?;
        if target.len() != pass.trace.hidden.len() {
            return Err(Error::shape(pass.trace.hidden.len(), target.len(), "feature layers"));
        }
        let mut dist = 0.0;
        let mut hidden_grads = Vec::with_capacity(target.len());
        for (h, tgt) in pass.trace.hidden.iter().zip(target) {
            let (n, norm) = normalized(h);
            let diff: Vec<f64> = n.iter().zip(tgt).map(|(a, b)| a - b).collect();
            dist += diff.iter().map(|d| d * d).sum::<f64>();
            // d/dh of |h/|h| - tgt|^2 = 2 (I - n n^T) diff / |h|
            let g = if norm > 0.0 {
                let nd: f64 = n.iter().zip(&diff).map(|(a, b)| a * b).sum();
                n.iter()
                    .zip(&diff)
                    .map(|(&ni, &di)| 2.0 * (di - ni * nd) / norm)
                    .collect()
            } else {
                vec![0.0; h.len()]
            };
            hidden_grads.push(g);
        }
        let (_, gx) = self.net.backward(&pass.trace, pass.cond, None, &hidden_grads, false)?;
        Ok((dist, gx.iter().map(|g| g * pass.c_in).collect()))
    }

    pub fn to_checkpoint(&self, schedule: &Schedule) -> Checkpoint {
        let mut ck = Checkpoint::new("teacher");
        ck.set_meta("sigma_data", self.sigma_data);
        ck.set_meta("schedule", schedule);
        ck.put_embedder(&self.embed);
        ck.put_condnet("net", &self.net);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Schedule)> {
        ck.expect_kind("teacher")?;
        let net = ck.get_condnet("net")?;
        let embed = ck.get_embedder()?;
        if embed.dim != net.embed_dim() {
            return Err(Error::Checkpoint("embedding width mismatch".into()));
        }
        Ok((
            NeuralDenoiser {
                net,
                embed,
                sigma_data: ck.meta("sigma_data")?,
            },
            ck.meta("schedule")?,
        ))
    }
}

pub(crate) fn normalized(h: &[f64]) -> (Vec<f64>, f64) {
    let norm = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        (h.iter().map(|v| v / norm).collect(), norm)
    } else {
        (vec![0.0; h.len()], 0.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherTrainConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
    pub max_freq: f64,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    pub p_uncond: f64,
    /// Decay of the parameter average returned as the trained teacher; 0 disables averaging.
    pub ema: f64,
    /// Draw half of the training times from the warped-uniform high-noise
    /// range instead of using the log-normal alone.
    pub mixed_time: bool,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            hidden: vec![64, 64],
            embed_dim: 32,
            max_freq: 16.0,
            iterations: 8000,
            batch: 64,
            lr: 2e-3,
            p_uncond: 0.1,
            ema: 0.999,
            mixed_time: false,
        }
    }
}

impl TeacherTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("teacher.hidden", "hidden widths must be positive"));
        }
        if self.batch == 0 {
            return Err(Error::config("teacher.batch", "must be positive"));
        }
        if !(0.0..=1.0).contains(&self.p_uncond) {
            return Err(Error::config("teacher.p_uncond", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return Err(Error::config("teacher.ema", "must lie in [0, 1]"));
        }
        if !(self.lr >= 0.0) {
            return Err(Error::config("teacher.lr", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherLogRow {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Weighted DSM loss `w(t) |z0 - D(z0 + t eps, t, c)|^2` of one item and its
/// parameter gradient.
pub fn teacher_dsm_item(
    model: &NeuralDenoiser,
    z0: &[f64],
    cond: Cond,
    t: f64,
    eps: &[f64],
) -> Result<(f64, CondNetGrads)> {
    let p = precondition(t, model.sigma_data)?;
    let zt: Vec<f64> = z0.iter().zip(eps).map(|(a, e)| a + t * e).collect();
    let scaled: Vec<f64> = zt.iter().map(|v| p.c_in * v).collect();
    let x = model.net.input(&scaled, &model.embed.time(p.c_noise), cond)?;
    let trace = model.net.mlp.forward_trace(&x)?;
    let w = dsm_weight(t, model.sigma_data);
    let mut loss = 0.0;
    let mut up = Vec::with_capacity(z0.len());
    for i in 0..z0.len() {
        let d = p.c_skip * zt[i] + p.c_out * trace.output[i];
        let r = d - z0[i];
        loss += w * r * r;
        up.push(2.0 * w * r * p.c_out);
    }
    let (g, _) = model.net.backward(&trace, cond, Some(&up), &[], true)?;
    Ok((loss, g.expect("parameter gradients requested")))
}

/// Fits a neural denoiser to `mixture` by weighted denoising score matching
/// with log-normal time sampling and label dropout (`p_uncond`), so the same
/// network also serves as the unconditional denoiser.
pub fn train_teacher(
    mixture: &ConditionedMixture,
    schedule: &Schedule,
    cfg: &TeacherTrainConfig,
    seed: u64,
) -> Result<(NeuralDenoiser, Vec<TeacherLogRow>)> {
    cfg.validate()?;
    let mut init = rng::child(seed, &[0x7ea]);
    let net = CondNet::random(mixture.dim(), &cfg.hidden, cfg.embed_dim, mixture.n_labels(), &mut init)?;
    let embed = Embedder::new(cfg.embed_dim, cfg.max_freq, seed)?;
    let mut model = NeuralDenoiser {
        net,
        embed,
        sigma_data: schedule.sigma_data,
    };
    let mut averaged = model.net.clone();
    let mut opt = RAdam::new(RAdamHyper {
        lr: cfg.lr,
        ..Default::default()
    });
    let mut log = Vec::with_capacity(cfg.iterations);
    for iter in 0..cfg.iterations {
        let items = par::try_map_range(cfg.batch, |i| {
            let mut r = rng::child(seed, &[1, iter as u64, i as u64]);
            let (z0, label) = mixture.sample(&mut r);
            let cond = if rng::uniform(&mut r) < cfg.p_uncond {
                Cond::Null
            } else {
                Cond::Label(label)
            };
            let t = if cfg.mixed_time {
                sample_mixed_time(&mut r, schedule)
            } else {
                sample_train_time(&mut r, TimeMode::LogNormal, schedule)
            };
            let eps = rng::normal_vec(&mut r, z0.len());
            teacher_dsm_item(&model, &z0, cond, t, &eps)
        })?;
        let n = cfg.batch as f64;
        let loss = items.iter().map(|(l, _)| l).sum::<f64>() / n;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("teacher DSM loss diverged at iteration {iter}: {loss}")));
        }
        let mut grads = model.net.zero_grads();
        for (_, g) in &items {
            grads.add_scaled(g, 1.0 / n);
        }
        let grad_norm = grads.norm();
        opt.step(&mut model.net.blocks_with_grads(&grads))?;
        averaged.ema_toward(&model.net, cfg.ema)?;
        log.push(TeacherLogRow { iter, loss, grad_norm });
    }
    if cfg.ema > 0.0 {
        model.net = averaged;
    }
    Ok((model, log))
}
