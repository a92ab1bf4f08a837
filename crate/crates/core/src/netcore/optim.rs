//! RAdam (used for all network training) and plain Adam (used for
//! initial-noise optimization).

use crate::error::{Error, Result};

/// A named parameter block with its gradient.
pub struct ParamBlock<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub grads: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct RAdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for RAdamHyper {
    fn default() -> Self {
        RAdamHyper {
            lr: 8.0e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Rectified Adam.
///
/// While the length of the approximated simple moving average `rho_t` is at
/// most 4 the adaptive learning rate is intractable and the update falls back
/// to bias-corrected momentum SGD; afterwards the adaptive step is scaled by
/// the variance rectification term `r_t`.
#[derive(Debug, Clone)]
pub struct RAdam {
    pub hyper: RAdamHyper,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl RAdam {
    pub fn new(hyper: RAdamHyper) -> Self {
        RAdam {
            hyper,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every block. Gradients are checked first, so a
    /// non-finite gradient leaves all parameters and moments untouched.
    pub fn step(&mut self, blocks: &mut [ParamBlock<'_>]) -> Result<()> {
        for b in blocks.iter() {
            if b.values.len() != b.grads.len() {
                return Err(Error::shape(b.values.len(), b.grads.len(), "optimizer block"));
            }
            if b.grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    block: b.name.clone(),
                });
            }
        }
        if self.m.is_empty() {
            self.m = blocks.iter().map(|b| vec![0.0; b.values.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != blocks.len()
            || self.m.iter().zip(blocks.iter()).any(|(m, b)| m.len() != b.values.len())
        {
            return Err(Error::Argument("parameter blocks changed shape between optimizer steps".into()));
        }

        self.step += 1;
        let RAdamHyper { lr, beta1, beta2, eps } = self.hyper;
        let t = self.step as f64;
        let b1t = beta1.powf(t);
        let b2t = beta2.powf(t);
        let rho_inf = 2.0 / (1.0 - beta2) - 1.0;
        let rho_t = rho_inf - 2.0 * t * b2t / (1.0 - b2t);
        let rect = (rho_t > 4.0).then(|| {
            ((rho_t - 4.0) * (rho_t - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho_t)).sqrt()
        });

        for ((b, m), v) in blocks.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..b.values.len() {
                let g = b.grads[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / (1.0 - b1t);
                let delta = match rect {
                    Some(r) => {
                        let v_hat = (v[i] / (1.0 - b2t)).sqrt();
                        lr * r * m_hat / (v_hat + eps)
                    }
                    None => lr * m_hat,
                };
                b.values[i] -= delta;
            }
        }
        Ok(())
    }
}

/// Adam on a single vector.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, dim: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) -> Result<()> {
        if x.len() != self.m.len() || g.len() != x.len() {
            return Err(Error::shape(self.m.len(), g.len(), "adam vector"));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient { block: "z_init".into() });
        }
        self.step += 1;
        let t = self.step as f64;
        let (c1, c2) = (1.0 - self.beta1.powf(t), 1.0 - self.beta2.powf(t));
        for i in 0..x.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g[i] * g[i];
            x[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + self.eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(hyper: RAdamHyper, grads: impl Fn(usize) -> f64, steps: usize, x0: f64) -> Vec<f64> {
        let mut opt = RAdam::new(hyper);
        let mut x = [x0];
        let mut traj = Vec::new();
        for k in 0..steps {
            let g = [grads(k)];
            opt.step(&mut [ParamBlock {
                name: "x".into(),
                values: &mut x,
                grads: &g,
            }])
            .unwrap();
            traj.push(x[0]);
        }
        traj
    }

    /// Scalar RAdam recurrence written out independently.
    fn oracle(lr: f64, g: f64, steps: usize, x0: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let rho_inf = 2.0 / (1.0 - b2) - 1.0;
        let (mut m, mut v, mut x) = (0.0, 0.0, x0);
        let mut out = Vec::new();
        for k in 1..=steps {
            let kf = k as f64;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(k as i32));
            let rho = rho_inf - 2.0 * kf * b2.powi(k as i32) / (1.0 - b2.powi(k as i32));
            if rho > 4.0 {
                let l = 1.0 / ((v / (1.0 - b2.powi(k as i32))).sqrt() + eps);
                let r = ((rho - 4.0) * (rho - 2.0) * rho_inf / ((rho_inf - 4.0) * (rho_inf - 2.0) * rho)).sqrt();
                x -= lr * r * mh * l;
            } else {
                x -= lr * mh;
            }
            out.push(x);
        }
        out
    }

    #[test]
    fn zero_gradient_or_zero_lr_leaves_params() {
        let t = run(RAdamHyper::default(), |_| 0.0, 20, 1.5);
        assert!(t.iter().all(|&x| x == 1.5));
        let h = RAdamHyper {
            lr: 0.0,
            ..Default::default()
        };
        let t = run(h, |k| (k as f64).sin() + 0.3, 20, 1.5);
        assert!(t.iter().all(|&x| x == 1.5));
    }

    #[test]
    fn constant_gradient_matches_recurrence() {
        let h = RAdamHyper {
            lr: 1e-2,
            ..Default::default()
        };
        let got = run(h, |_| 0.7, 100, 2.0);
        let want = oracle(1e-2, 0.7, 100, 2.0);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0), "{a} vs {b}");
        }
        // first steps are un-rectified momentum steps of size lr * g
        assert!((got[0] - (2.0 - 1e-2 * 0.7)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_block() {
        let mut opt = RAdam::new(RAdamHyper::default());
        let mut x = [1.0, 2.0];
        let g = [0.1, f64::NAN];
        let err = opt
            .step(&mut [ParamBlock {
                name: "mlp.layer1.bias".into(),
                values: &mut x,
                grads: &g,
            }])
            .unwrap_err();
        assert!(err.to_string().contains("mlp.layer1.bias"));
        assert_eq!(x, [1.0, 2.0]);
        assert_eq!(opt.steps_taken(), 0);
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut opt = Adam::new(0.1, 2);
        let mut x = [3.0, -2.0];
        for _ in 0..500 {
            let g = [2.0 * x[0], 2.0 * x[1]];
            opt.step(&mut x, &g).unwrap();
        }
        assert!(x[0].abs() < 1e-2 && x[1].abs() < 1e-2);
    }
}
