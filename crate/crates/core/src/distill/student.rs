use rand::Rng;

use crate::condition::Cond;
use crate::diffusion::{precondition, Schedule};
use crate::error::{Error, Result};
use crate::netcore::{Checkpoint, CondNet, CondNetGrads, Embedder, Mlp, Trace};
use crate::teacher::NeuralDenoiser;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Online,
    Ema,
}

/// Student jump model: online parameters, their EMA target and the fixed
/// embeddings of `t`, `s` and `omega`.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentModel {
    pub online: CondNet,
    pub ema: CondNet,
    pub embed: Embedder,
    pub schedule: Schedule,
}

/// Forward record of one jump, enough to backpropagate to parameters and input.
#[derive(Debug, Clone)]
pub struct JumpTape {
    /// `None` for the boundary case `s == t`, where the jump is the identity.
    inner: Option<JumpInner>,
}

#[derive(Debug, Clone)]
struct JumpInner {
    trace: Trace,
    cond: Cond,
    ratio: f64,
    c_skip: f64,
    c_out: f64,
    c_in: f64,
}

impl StudentModel {
    pub fn random<R: Rng + ?Sized>(
        data_dim: usize,
        hidden: &[usize],
        n_labels: usize,
        embed: Embedder,
        schedule: Schedule,
        rng: &mut R,
    ) -> Result<Self> {
        let online = CondNet::random(data_dim, hidden, embed.dim, n_labels, rng)?;
        Ok(StudentModel {
            ema: online.clone(),
            online,
            embed,
            schedule,
        })
    }

    /// Student whose network starts from the teacher's weights.
    ///
    /// Each student layer holds the teacher layer in its leading block. Extra
    /// units keep their random incoming weights; their outgoing weights into
    /// teacher units are zeroed, so with zero `s`/`omega` embeddings the student
    /// output equals the teacher network output. The condition table is copied.
    pub fn from_teacher<R: Rng + ?Sized>(
        teacher: &NeuralDenoiser,
        hidden: &[usize],
        schedule: Schedule,
        rng: &mut R,
    ) -> Result<Self> {
        let tw = teacher.net.mlp.widths().to_vec();
        let mut s = Self::random(
            teacher.data_dim(),
            hidden,
            teacher.net.n_labels(),
            teacher.embed.clone(),
            schedule,
            rng,
        )?;
        let sw = s.online.mlp.widths().to_vec();
        if sw.len() != tw.len() || sw.iter().zip(&tw).any(|(a, b)| a < b) {
            return Err(Error::Argument(format!(
                "student widths {sw:?} cannot hold teacher widths {tw:?}"
            )));
        }
        let mut params = s.online.mlp.params().to_vec();
        let tp = teacher.net.mlp.params();
        for l in 0..tw.len() - 1 {
            let (swr, sbr) = s.online.mlp.layer_ranges(l);
            let (twr, tbr) = teacher.net.mlp.layer_ranges(l);
            let (s_in, t_in, t_out) = (sw[l], tw[l], tw[l + 1]);
            for r in 0..t_out {
                for c in 0..s_in {
                    params[swr.start + r * s_in + c] = if c < t_in { tp[twr.start + r * t_in + c] } else { 0.0 };
                }
                params[sbr.start + r] = tp[tbr.start + r];
            }
        }
        s.online.mlp = Mlp::from_params(&sw, params)?;
        s.online.cond = teacher.net.cond.clone();
        s.ema = s.online.clone();
        Ok(s)
    }

    pub fn data_dim(&self) -> usize {
        self.online.data_dim
    }

    pub fn n_labels(&self) -> usize {
        self.online.n_labels()
    }

    pub fn net(&self, which: Which) -> &CondNet {
        match which {
            Which::Online => &self.online,
            Which::Ema => &self.ema,
        }
    }

    fn embedding(&self, t: f64, s: f64, omega: f64) -> Result<Vec<f64>> {
        let pt = precondition(t, self.schedule.sigma_data)?;
        let ps = precondition(s, self.schedule.sigma_data)?;
        let mut e = vec![0.0; self.embed.dim];
        self.embed.add_time(pt.c_noise, &mut e);
        self.embed.add_aux_time(ps.c_noise, &mut e);
        self.embed.add_omega(omega, &mut e);
        Ok(e)
    }

    fn check_times(t: f64, s: f64) -> Result<()> {
        if !(s > 0.0) {
            return Err(Error::Domain(format!("jump target time must be positive, got {s}")));
        }
        if t < s {
            return Err(Error::Argument(format!("jump needs t >= s, got t={t}, s={s}")));
        }
        Ok(())
    }

    /// `g(z, t, s) = c_skip(t) z + c_out(t) NN([c_in(t) z, e(t, s, omega, cond)])`.
    pub fn g_theta(&self, which: Which, z: &[f64], cond: Cond, omega: f64, t: f64, s: f64) -> Result<Vec<f64>> {
        Self::check_times(t, s)?;
        let net = self.net(which);
        let p = precondition(t, self.schedule.sigma_data)?;
        let scaled: Vec<f64> = z.iter().map(|v| p.c_in * v).collect();
        let f = net.mlp.eval(&net.input(&scaled, &self.embedding(t, s, omega)?, cond)?)?;
        Ok(z.iter().zip(&f).map(|(a, b)| p.c_skip * a + p.c_out * b).collect())
    }

    /// `G(z, t, s) = (s/t) z + (1 - s/t) g(z, t, s)`; exactly `z` when `s == t`.
    pub fn jump(&self, which: Which, z: &[f64], cond: Cond, omega: f64, t: f64, s: f64) -> Result<Vec<f64>> {
        Self::check_times(t, s)?;
        if s == t {
            return Ok(z.to_vec());
        }
        let ratio = s / t;
        let g = self.g_theta(which, z, cond, omega, t, s)?;
        Ok(z.iter().zip(&g).map(|(a, b)| ratio * a + (1.0 - ratio) * b).collect())
    }

    /// Jump plus the record needed by [`StudentModel::jump_backward`].
    pub fn jump_taped(
        &self,
        which: Which,
        z: &[f64],
        cond: Cond,
        omega: f64,
        t: f64,
        s: f64,
    ) -> Result<(Vec<f64>, JumpTape)> {
        Self::check_times(t, s)?;
        if s == t {
            return Ok((z.to_vec(), JumpTape { inner: None }));
        }
        let (out, inner) = self.taped_inner(which, z, cond, omega, t, s, s / t)?;
        Ok((out, JumpTape { inner: Some(inner) }))
    }

    /// `g(z, t, s)` plus its record; the tape backpropagates `g` itself.
    pub fn g_taped(
        &self,
        which: Which,
        z: &[f64],
        cond: Cond,
        omega: f64,
        t: f64,
        s: f64,
    ) -> Result<(Vec<f64>, JumpTape)> {
        Self::check_times(t, s)?;
        let (out, inner) = self.taped_inner(which, z, cond, omega, t, s, 0.0)?;
        Ok((out, JumpTape { inner: Some(inner) }))
    }

    #[allow(clippy::too_many_arguments)]
    fn taped_inner(
        &self,
        which: Which,
        z: &[f64],
        cond: Cond,
        omega: f64,
        t: f64,
        s: f64,
        ratio: f64,
    ) -> Result<(Vec<f64>, JumpInner)> {
        let net = self.net(which);
        let p = precondition(t, self.schedule.sigma_data)?;
        let scaled: Vec<f64> = z.iter().map(|v| p.c_in * v).collect();
        let trace = net.mlp.forward_trace(&net.input(&scaled, &self.embedding(t, s, omega)?, cond)?)?;
        let out = z
            .iter()
            .zip(&trace.output)
            .map(|(a, f)| ratio * a + (1.0 - ratio) * (p.c_skip * a + p.c_out * f))
            .collect();
        Ok((
            out,
            JumpInner {
                trace,
                cond,
                ratio,
                c_skip: p.c_skip,
                c_out: p.c_out,
                c_in: p.c_in,
            },
        ))
    }

    /// Gradients of `<upstream, jump output>` with respect to the parameters
    /// of the network that ran the forward pass (when `want_params`) and to `z`.
    pub fn jump_backward(
        &self,
        which: Which,
        tape: &JumpTape,
        upstream: &[f64],
        want_params: bool,
    ) -> Result<(Option<CondNetGrads>, Vec<f64>)> {
        let net = self.net(which);
        let Some(j) = &tape.inner else {
            let grads = want_params.then(|| net.zero_grads());
            return Ok((grads, upstream.to_vec()));
        };
        if upstream.len() != net.data_dim {
            return Err(Error::shape(net.data_dim, upstream.len(), "jump upstream gradient"));
        }
        let a = 1.0 - j.ratio;
        let out_grad: Vec<f64> = upstream.iter().map(|u| a * j.c_out * u).collect();
        let (grads, gx) = net.backward(&j.trace, j.cond, Some(&out_grad), &[], want_params)?;
        let gz = upstream
            .iter()
            .zip(&gx)
            .map(|(u, g)| (j.ratio + a * j.c_skip) * u + j.c_in * g)
            .collect();
        Ok((grads, gz))
    }

    /// `ema <- mu * ema + (1 - mu) * online`.
    pub fn ema_update(&mut self, mu: f64) -> Result<()> {
        self.ema.ema_toward(&self.online, mu)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new("student");
        ck.set_meta("schedule", self.schedule);
        ck.put_embedder(&self.embed);
        ck.put_condnet("online", &self.online);
        ck.put_condnet("ema", &self.ema);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("student")?;
        let online = ck.get_condnet("online")?;
        let ema = ck.get_condnet("ema")?;
        let embed = ck.get_embedder()?;
        if online.mlp.widths() != ema.mlp.widths() || embed.dim != online.embed_dim() {
            return Err(Error::Checkpoint("student network shapes are inconsistent".into()));
        }
        Ok(StudentModel {
            online,
            ema,
            embed,
            schedule: ck.meta("schedule")?,
        })
    }
}
