//! Teacher denoisers: the exact posterior mean of a conditioned Gaussian
//! mixture and a neural denoiser fit by weighted denoising score matching.

mod mixture;
mod neural;

pub use mixture::{Component, ConditionedMixture};
pub use neural::{
    teacher_dsm_item, train_teacher, NeuralDenoiser, TeacherLogRow, TeacherPass, TeacherTrainConfig,
};

use crate::condition::Cond;
use crate::diffusion::Schedule;
use crate::error::{Error, Result};

/// Anything that estimates `E[z0 | z_t, cond]`.
pub trait Denoiser: Sync {
    fn denoise(&self, z: &[f64], t: f64, cond: Cond) -> Result<Vec<f64>>;
    fn dim(&self) -> usize;
}

impl Denoiser for ConditionedMixture {
    fn denoise(&self, z: &[f64], t: f64, cond: Cond) -> Result<Vec<f64>> {
        self.posterior_mean(z, t, cond)
    }

    fn dim(&self) -> usize {
        ConditionedMixture::dim(self)
    }
}

impl Denoiser for NeuralDenoiser {
    fn denoise(&self, z: &[f64], t: f64, cond: Cond) -> Result<Vec<f64>> {
        NeuralDenoiser::denoise(self, z, t, cond)
    }

    fn dim(&self) -> usize {
        self.data_dim()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TeacherModel {
    Analytic(ConditionedMixture),
    Neural(NeuralDenoiser, Schedule),
}

impl TeacherModel {
    pub fn neural(&self) -> Result<&NeuralDenoiser> {
        match self {
            TeacherModel::Neural(n, _) => Ok(n),
            TeacherModel::Analytic(_) => Err(Error::UnsupportedVariant(
                "the analytic teacher has no hidden layers",
            )),
        }
    }

    /// Channel-normalized hidden activations at `(z, t, cond)`.
    pub fn features(&self, z: &[f64], t: f64, cond: Cond) -> Result<Vec<Vec<f64>>> {
        self.neural()?.features(z, t, cond)
    }
}

impl Denoiser for TeacherModel {
    fn denoise(&self, z: &[f64], t: f64, cond: Cond) -> Result<Vec<f64>> {
        match self {
            TeacherModel::Analytic(m) => m.posterior_mean(z, t, cond),
            TeacherModel::Neural(n, _) => n.denoise(z, t, cond),
        }
    }

    fn dim(&self) -> usize {
        match self {
            TeacherModel::Analytic(m) => m.dim(),
            TeacherModel::Neural(n, _) => n.data_dim(),
        }
    }
}

/// Probability-flow ODE velocity `(z - D(z, t, cond)) / t`.
pub fn pf_ode_rhs<D: Denoiser + ?Sized>(teacher: &D, z: &[f64], t: f64, cond: Cond) -> Result<Vec<f64>> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("the ODE velocity needs t > 0, got {t}")));
    }
    let d = teacher.denoise(z, t, cond)?;
    Ok(z.iter().zip(&d).map(|(a, b)| (a - b) / t).collect())
}
