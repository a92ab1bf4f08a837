use rand::Rng;
use std::hash::{Hash, Hasher};

use super::embed::CondTable;
use super::mlp::{Mlp, Trace};
use crate::condition::Cond;
use crate::error::{Error, Result};

/// Parameter store of a conditioned denoiser network: an MLP over
/// `[scaled sample, embedding]` plus the learned condition table.
///
/// The embedding half of the input is the sum of fixed time/guidance
/// embeddings supplied by the caller and the learned row of the condition.
#[derive(Debug, Clone, PartialEq)]
pub struct CondNet {
    pub mlp: Mlp,
    pub cond: CondTable,
    pub data_dim: usize,
}

/// Gradients with the same layout as [`CondNet`].
#[derive(Debug, Clone, PartialEq)]
pub struct CondNetGrads {
    pub mlp: Vec<f64>,
    pub cond: Vec<f64>,
}

impl CondNet {
    pub fn random<R: Rng + ?Sized>(
        data_dim: usize,
        hidden: &[usize],
        embed_dim: usize,
        n_labels: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut widths = Vec::with_capacity(hidden.len() + 2);
        widths.push(data_dim + embed_dim);
        widths.extend_from_slice(hidden);
        widths.push(data_dim);
        let mlp = Mlp::random(&widths, rng)?;
        let cond = CondTable::random(n_labels, embed_dim, 0.5, rng);
        Ok(CondNet {
            mlp,
            cond,
            data_dim,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.cond.dim
    }

    pub fn n_labels(&self) -> usize {
        self.cond.n_labels
    }

    pub fn cond_row(&self, cond: Cond) -> Result<usize> {
        match cond {
            Cond::Label(l) if l >= self.cond.n_labels => Err(Error::Argument(format!(
                "label {l} out of range for a model with {} labels",
                self.cond.n_labels
            ))),
            c => Ok(c.row(self.cond.n_labels)),
        }
    }

    /// Builds the MLP input `[scaled_z, fixed_embed + cond_row]`.
    pub fn input(&self, scaled_z: &[f64], fixed_embed: &[f64], cond: Cond) -> Result<Vec<f64>> {
        if scaled_z.len() != self.data_dim {
            return Err(Error::shape(self.data_dim, scaled_z.len(), "sample"));
        }
        let row = self.cond.row(self.cond_row(cond)?);
        let mut x = Vec::with_capacity(self.data_dim + row.len());
        x.extend_from_slice(scaled_z);
        x.extend(fixed_embed.iter().zip(row).map(|(a, b)| a + b));
        Ok(x)
    }

    /// Runs the MLP backward and splits the input gradient into the sample part
    /// and the condition-table gradient.
    pub fn backward(
        &self,
        trace: &Trace,
        cond: Cond,
        out_grad: Option<&[f64]>,
        hidden_grads: &[Vec<f64>],
        want_params: bool,
    ) -> Result<(Option<CondNetGrads>, Vec<f64>)> {
        let (mlp_grads, mut gx) = self.mlp.backward(trace, out_grad, hidden_grads, want_params)?;
        let grads = match mlp_grads {
            Some(mlp) => {
                let mut cond_grad = vec![0.0; self.cond.values.len()];
                let r = self.cond_row(cond)?;
                let d = self.cond.dim;
                cond_grad[r * d..(r + 1) * d].copy_from_slice(&gx[self.data_dim..]);
                Some(CondNetGrads {
                    mlp,
                    cond: cond_grad,
                })
            }
            None => None,
        };
        gx.truncate(self.data_dim);
        Ok((grads, gx))
    }

    pub fn zero_grads(&self) -> CondNetGrads {
        CondNetGrads {
            mlp: vec![0.0; self.mlp.params().len()],
            cond: vec![0.0; self.cond.values.len()],
        }
    }

    pub fn param_count(&self) -> usize {
        self.mlp.params().len() + self.cond.values.len()
    }

    pub fn block_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.mlp.block_ranges("mlp.").into_iter().map(|(n, _)| n).collect();
        names.push("cond_table".into());
        names
    }

    /// Mutable parameter blocks paired with the matching gradient blocks.
    pub fn blocks_with_grads<'a>(
        &'a mut self,
        grads: &'a CondNetGrads,
    ) -> Vec<super::optim::ParamBlock<'a>> {
        let ranges = self.mlp.block_ranges("mlp.");
        let mut out: Vec<super::optim::ParamBlock<'a>> = self
            .mlp
            .named_blocks_mut("mlp.")
            .into_iter()
            .zip(ranges)
            .map(|((name, values), (_, range))| super::optim::ParamBlock {
                name,
                values,
                grads: &grads.mlp[range],
            })
            .collect();
        out.push(super::optim::ParamBlock {
            name: "cond_table".into(),
            values: &mut self.cond.values,
            grads: &grads.cond,
        });
        out
    }

    /// `self <- mu * self + (1 - mu) * online`, elementwise.
    pub fn ema_toward(&mut self, online: &CondNet, mu: f64) -> Result<()> {
        if self.mlp.widths() != online.mlp.widths() || self.cond.values.len() != online.cond.values.len() {
            return Err(Error::Argument("EMA target and online network shapes differ".into()));
        }
        let mix = |a: &mut f64, b: f64| *a = mu * *a + (1.0 - mu) * b;
        self.mlp
            .params_mut()
            .iter_mut()
            .zip(online.mlp.params())
            .for_each(|(a, &b)| mix(a, b));
        self.cond
            .values
            .iter_mut()
            .zip(&online.cond.values)
            .for_each(|(a, &b)| mix(a, b));
        Ok(())
    }

    /// Hash of the exact parameter bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.mlp.widths().hash(&mut h);
        for p in self.mlp.params().iter().chain(&self.cond.values) {
            p.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn all_finite(&self) -> bool {
        self.mlp.all_finite() && self.cond.values.iter().all(|v| v.is_finite())
    }
}

impl CondNetGrads {
    pub fn add_scaled(&mut self, other: &CondNetGrads, a: f64) {
        self.mlp.iter_mut().zip(&other.mlp).for_each(|(x, &y)| *x += a * y);
        self.cond.iter_mut().zip(&other.cond).for_each(|(x, &y)| *x += a * y);
    }

    pub fn scale(&mut self, a: f64) {
        self.mlp.iter_mut().chain(self.cond.iter_mut()).for_each(|x| *x *= a);
    }

    pub fn norm(&self) -> f64 {
        self.mlp
            .iter()
            .chain(&self.cond)
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    /// L2 norm of the gradient restricted to the final MLP layer.
    pub fn last_layer_norm(&self, net: &CondNet) -> f64 {
        self.mlp[net.mlp.last_layer_range()]
            .iter()
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn last_layer<'a>(&'a self, net: &CondNet) -> &'a [f64] {
        &self.mlp[net.mlp.last_layer_range()]
    }

    /// Sums gradient sets in slice order.
    pub fn sum(items: &[CondNetGrads], like: &CondNet) -> CondNetGrads {
        let mut acc = like.zero_grads();
        for g in items {
            acc.add_scaled(g, 1.0);
        }
        acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn net() -> CondNet {
        let mut r = rng::root(4);
        CondNet::random(2, &[8, 8], 4, 3, &mut r).unwrap()
    }

    #[test]
    fn cond_gradient_lands_in_its_row() {
        let n = net();
        let e = vec![0.1, 0.2, 0.3, 0.4];
        for cond in [Cond::Label(1), Cond::Null] {
            let x = n.input(&[0.5, -0.5], &e, cond).unwrap();
            let tr = n.mlp.forward_trace(&x).unwrap();
            let (g, gz) = n.backward(&tr, cond, Some(&[1.0, -1.0]), &[], true).unwrap();
            let g = g.unwrap();
            assert_eq!(gz.len(), 2);
            let r = cond.row(3);
            for (i, v) in g.cond.iter().enumerate() {
                if i / 4 == r {
                    assert!(v.abs() > 0.0);
                } else {
                    assert_eq!(*v, 0.0);
                }
            }
        }
    }

    #[test]
    fn rejects_out_of_range_label() {
        let n = net();
        assert!(n.input(&[0.0, 0.0], &[0.0; 4], Cond::Label(3)).is_err());
    }

    #[test]
    fn ema_extremes() {
        let online = net();
        let mut r = rng::root(99);
        let original = CondNet::random(2, &[8, 8], 4, 3, &mut r).unwrap();
        let mut ema = original.clone();
        ema.ema_toward(&online, 1.0).unwrap();
        assert_eq!(ema, original);
        ema.ema_toward(&online, 0.0).unwrap();
        assert_eq!(ema, online);
    }

    #[test]
    fn blocks_cover_parameters() {
        let mut n = net();
        let g = n.zero_grads();
        let count = n.param_count();
        let blocks = n.blocks_with_grads(&g);
        assert_eq!(blocks.iter().map(|b| b.values.len()).sum::<usize>(), count);
        assert!(blocks.iter().all(|b| b.values.len() == b.grads.len()));
    }
}
