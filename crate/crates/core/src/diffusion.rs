//! Variance-exploding schedule, EDM preconditioning, Karras time grids,
//! training-time samplers, forward noising and the identity latent codec.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub sigma_data: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            sigma_data: 0.5,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max && self.sigma_max.is_finite()) {
            return Err(Error::config(
                "schedule.sigma_min",
                format!("need 0 < sigma_min < sigma_max, got {} / {}", self.sigma_min, self.sigma_max),
            ));
        }
        if !(self.rho > 0.0) {
            return Err(Error::config("schedule.rho", "rho must be positive"));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::config("schedule.sigma_data", "sigma_data must be positive"));
        }
        Ok(())
    }

    /// Terminal time `T`.
    pub fn t_max(&self) -> f64 {
        self.sigma_max
    }

    /// Maps `xi` in `[0, 1]` onto the rho-warped time axis.
    pub fn warp(&self, xi: f64) -> f64 {
        let inv = 1.0 / self.rho;
        let a = self.sigma_max.powf(inv);
        let b = self.sigma_min.powf(inv);
        (a + xi * (b - a)).powf(self.rho)
    }
}

/// EDM preconditioning coefficients at one noise level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precondition(t: f64, sigma_data: f64) -> Result<Precond> {
    if !(t > 0.0) {
        return Err(Error::Domain(format!("preconditioning needs t > 0, got {t}")));
    }
    let s2 = sigma_data * sigma_data;
    let denom = t * t + s2;
    Ok(Precond {
        c_skip: s2 / denom,
        c_out: t * sigma_data / denom.sqrt(),
        c_in: 1.0 / denom.sqrt(),
        c_noise: 0.25 * t.ln(),
    })
}

/// DSM loss weight `(t^2 + sigma_data^2) / (t sigma_data)^2`; it cancels `c_out^2`.
pub fn dsm_weight(t: f64, sigma_data: f64) -> f64 {
    (t * t + sigma_data * sigma_data) / (t * sigma_data).powi(2)
}

/// Strictly decreasing time points, `points[0] = sigma_max`, last = `sigma_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KarrasGrid {
    points: Vec<f64>,
}

impl KarrasGrid {
    pub fn new(schedule: &Schedule, n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::Argument(format!("a Karras grid needs at least 2 points, got {n}")));
        }
        let mut points: Vec<f64> = (0..n)
            .map(|i| schedule.warp(i as f64 / (n - 1) as f64))
            .collect();
        // pin the endpoints against powf round-off
        points[0] = schedule.sigma_max;
        points[n - 1] = schedule.sigma_min;
        Self::from_points(points)
    }

    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::Argument("a grid needs at least 2 points".into()));
        }
        if points.windows(2).any(|w| !(w[0] > w[1])) || !(points[points.len() - 1] >= 0.0) {
            return Err(Error::Argument("grid points must be strictly decreasing and nonnegative".into()));
        }
        Ok(KarrasGrid { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn t(&self, i: usize) -> f64 {
        self.points[i]
    }

    pub fn last(&self) -> usize {
        self.points.len() - 1
    }

    /// Index of an exact grid point.
    pub fn index_of(&self, t: f64) -> Option<usize> {
        self.points.iter().position(|&p| p == t)
    }
}

pub fn karras_grid(schedule: &Schedule, n: usize) -> Result<KarrasGrid> {
    KarrasGrid::new(schedule, n)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TimeMode {
    /// `exp(g)`, `g ~ N(-1.2, 1.2^2)`.
    LogNormal,
    /// Warped `xi ~ U[0, 0.7]`.
    KarrasUniform,
}

pub const LOGNORMAL_MEAN: f64 = -1.2;
pub const LOGNORMAL_STD: f64 = 1.2;
pub const XI_MAX: f64 = 0.7;

pub fn sample_train_time<R: Rng + ?Sized>(rng: &mut R, mode: TimeMode, schedule: &Schedule) -> f64 {
    match mode {
        TimeMode::LogNormal => (LOGNORMAL_MEAN + LOGNORMAL_STD * rng::normal(rng)).exp(),
        TimeMode::KarrasUniform => schedule.warp(XI_MAX * rng::uniform(rng)),
    }
}

/// Half log-normal, half warped-uniform, chosen per draw.
pub fn sample_mixed_time<R: Rng + ?Sized>(rng: &mut R, schedule: &Schedule) -> f64 {
    let mode = if rng::uniform(rng) < 0.5 {
        TimeMode::LogNormal
    } else {
        TimeMode::KarrasUniform
    };
    sample_train_time(rng, mode, schedule)
}

/// `z_t = z0 + t * eps`.
pub fn add_noise(z0: &[f64], t: f64, eps: &[f64]) -> Result<Vec<f64>> {
    if z0.len() != eps.len() {
        return Err(Error::shape(z0.len(), eps.len(), "noise"));
    }
    if !(t > 0.0) {
        return Err(Error::Domain(format!("noising needs t > 0, got {t}")));
    }
    Ok(z0.iter().zip(eps).map(|(z, e)| z + t * e).collect())
}

/// Encoder/decoder pair between data and latent space; the identity here.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityCodec;

impl IdentityCodec {
    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    pub fn decode(&self, z: &[f64]) -> Vec<f64> {
        z.to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precondition_values() {
        let p = precondition(0.5, 0.5).unwrap();
        assert!((p.c_skip - 0.5).abs() < 1e-15);
        let p = precondition(0.25, 0.25).unwrap();
        assert!((p.c_out - 0.25 / 2f64.sqrt()).abs() < 1e-12);
        assert!((p.c_out - 0.17678).abs() < 1e-5);
        let p = precondition(1.0, 0.5).unwrap();
        assert!((p.c_in - 1.0 / 1.25f64.sqrt()).abs() < 1e-15);
        assert!((p.c_in - 0.89443).abs() < 1e-5);
        assert_eq!(precondition(1.0, 0.5).unwrap().c_noise, 0.0);
        assert!(precondition(0.0, 0.5).is_err());
        assert!(precondition(-1.0, 0.5).is_err());
    }

    #[test]
    fn precondition_closed_forms_pointwise() {
        for &sd in &[0.25, 0.5, 1.3] {
            for &t in &[0.002, 0.1, 0.7, 3.0, 80.0] {
                let p = precondition(t, sd).unwrap();
                let r = (t * t + sd * sd).sqrt();
                assert!((p.c_skip - sd * sd / (r * r)).abs() < 1e-14);
                assert!((p.c_out - t * sd / r).abs() < 1e-14 * (t * sd / r).max(1.0));
                assert!((p.c_in - 1.0 / r).abs() < 1e-14 / r);
                assert!((p.c_noise - t.ln() / 4.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn dsm_weight_at_sigma_data() {
        let sd = 0.5;
        assert!((dsm_weight(sd, sd) - 2.0 / (sd * sd)).abs() < 1e-12);
    }

    #[test]
    fn grid_endpoints_and_linear_case() {
        let s = Schedule::default();
        let g = karras_grid(&s, 2).unwrap();
        assert_eq!(g.points(), &[80.0, 0.002]);
        let g = karras_grid(&s, 40).unwrap();
        assert_eq!(g.t(0), 80.0);
        assert_eq!(g.t(39), 0.002);
        let lin = Schedule {
            sigma_min: 1e-300,
            sigma_max: 80.0,
            rho: 1.0,
            sigma_data: 0.5,
        };
        // rho = 1, sigma_min -> 0: midpoint of [80, 0]
        let g = karras_grid(&lin, 3).unwrap();
        assert!((g.t(1) - 40.0).abs() < 1e-12);
        assert!(karras_grid(&s, 1).is_err());
    }

    #[test]
    fn grid_monotone_for_many_shapes() {
        for n in [2, 3, 10, 40, 257] {
            for rho in [0.5, 1.0, 3.0, 7.0, 12.0] {
                let s = Schedule {
                    rho,
                    ..Default::default()
                };
                let g = karras_grid(&s, n).unwrap();
                assert!(g.points().windows(2).all(|w| w[0] > w[1]));
                assert_eq!(g.t(0), s.sigma_max);
                assert_eq!(g.t(n - 1), s.sigma_min);
            }
        }
    }

    #[test]
    fn warp_endpoints() {
        let s = Schedule::default();
        assert!((s.warp(0.0) - 80.0).abs() < 1e-10);
        assert!((s.warp(1.0) - 0.002).abs() < 1e-12);
    }

    #[test]
    fn karras_uniform_in_range() {
        let s = Schedule::default();
        let mut r = rng::root(1);
        for _ in 0..10_000 {
            let t = sample_train_time(&mut r, TimeMode::KarrasUniform, &s);
            assert!(t > 0.0 && t <= s.sigma_max);
            assert!(t >= s.warp(XI_MAX) * (1.0 - 1e-12));
        }
    }

    #[test]
    fn add_noise_cases() {
        assert_eq!(add_noise(&[0.0, 0.0], 2.0, &[1.0, -1.0]).unwrap(), vec![2.0, -2.0]);
        let z = add_noise(&[1.5, -0.5], 1e-12, &[3.0, 4.0]).unwrap();
        assert!((z[0] - 1.5).abs() < 1e-11 && (z[1] + 0.5).abs() < 1e-11);
        assert!(add_noise(&[0.0], 1.0, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn identity_codec() {
        let x = vec![0.1, -3.0, f64::MIN_POSITIVE];
        let c = IdentityCodec;
        let back = c.decode(&c.encode(&x));
        assert!(back.iter().zip(&x).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
