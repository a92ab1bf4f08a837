use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Fully connected network: SiLU on hidden layers, identity on the output layer.
///
/// Parameters live in one flat vector. Layer `l` maps `widths[l]` inputs to
/// `widths[l + 1]` outputs and stores its weight matrix row-major
/// (`widths[l + 1] x widths[l]`) followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Values recorded by a forward pass, enough to run the backward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub input: Vec<f64>,
    /// Pre-activation of every layer (hidden layers and output).
    pub pre: Vec<Vec<f64>>,
    /// SiLU activation of every hidden layer.
    pub hidden: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub(crate) fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

impl Mlp {
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::Argument(format!(
                "layer widths must have at least two positive entries, got {widths:?}"
            )));
        }
        let n = Self::param_count(widths);
        Ok(Mlp {
            widths: widths.to_vec(),
            params: vec![0.0; n],
        })
    }

    /// Weights drawn from N(0, 1/fan_in), biases zero.
    pub fn random<R: Rng + ?Sized>(widths: &[usize], rng: &mut R) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        for l in 0..net.n_layers() {
            let fan_in = net.widths[l] as f64;
            let (w, _) = net.layer_ranges(l);
            for p in &mut net.params[w] {
                *p = rng::normal(rng) / fan_in.sqrt();
            }
        }
        Ok(net)
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let net = Self::zeros(widths)?;
        if params.len() != net.params.len() {
            return Err(Error::shape(net.params.len(), params.len(), "mlp parameters"));
        }
        Ok(Mlp {
            widths: net.widths,
            params,
        })
    }

    fn param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_hidden(&self) -> usize {
        self.widths.len() - 2
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Flat index ranges of the weight matrix and bias of layer `l`.
    pub fn layer_ranges(&self, l: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        let start: usize = self.widths[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
        let w_end = start + n_in * n_out;
        (start..w_end, w_end..w_end + n_out)
    }

    /// Flat index range covering the last layer's weights and bias.
    pub fn last_layer_range(&self) -> std::ops::Range<usize> {
        let (w, b) = self.layer_ranges(self.n_layers() - 1);
        w.start..b.end
    }

    /// Weight (`.weight`) and bias (`.bias`) blocks with their names.
    pub fn named_blocks_mut(&mut self, prefix: &str) -> Vec<(String, &mut [f64])> {
        let sizes: Vec<(usize, usize)> = self
            .widths
            .windows(2)
            .map(|w| (w[0] * w[1], w[1]))
            .collect();
        let mut out = Vec::with_capacity(2 * sizes.len());
        let mut rest: &mut [f64] = &mut self.params;
        for (l, (nw, nb)) in sizes.into_iter().enumerate() {
            let (w, tail) = rest.split_at_mut(nw);
            let (b, tail) = tail.split_at_mut(nb);
            out.push((format!("{prefix}layer{l}.weight"), w));
            out.push((format!("{prefix}layer{l}.bias"), b));
            rest = tail;
        }
        out
    }

    /// Block names and ranges in the same order as [`Mlp::named_blocks_mut`].
    pub fn block_ranges(&self, prefix: &str) -> Vec<(String, std::ops::Range<usize>)> {
        (0..self.n_layers())
            .flat_map(|l| {
                let (w, b) = self.layer_ranges(l);
                [
                    (format!("{prefix}layer{l}.weight"), w),
                    (format!("{prefix}layer{l}.bias"), b),
                ]
            })
            .collect()
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(Error::shape(self.input_dim(), input.len(), "mlp input"));
        }
        Ok(())
    }

    /// Output and hidden activations (one vector per hidden layer).
    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
        let trace = self.forward_trace(input)?;
        Ok((trace.output, trace.hidden))
    }

    /// Output only, without keeping intermediate activations.
    pub fn eval(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.check_input(input)?;
        let mut x = input.to_vec();
        for l in 0..self.n_layers() {
            let mut z = self.affine(l, &x);
            if l + 1 < self.n_layers() {
                z.iter_mut().for_each(|v| *v = silu(*v));
            }
            x = z;
        }
        Ok(x)
    }

    pub fn forward_trace(&self, input: &[f64]) -> Result<Trace> {
        self.check_input(input)?;
        let n = self.n_layers();
        let mut pre: Vec<Vec<f64>> = Vec::with_capacity(n);
        let mut hidden: Vec<Vec<f64>> = Vec::with_capacity(n - 1);
        for l in 0..n {
            let z = self.affine(l, if l == 0 { input } else { &hidden[l - 1] });
            if l + 1 < n {
                hidden.push(z.iter().map(|&v| silu(v)).collect());
            }
            pre.push(z);
        }
        let output = pre[n - 1].clone();
        Ok(Trace {
            input: input.to_vec(),
            pre,
            hidden,
            output,
        })
    }

    fn affine(&self, l: usize, x: &[f64]) -> Vec<f64> {
        let (wr, br) = self.layer_ranges(l);
        let n_in = self.widths[l];
        let w = &self.params[wr];
        let b = &self.params[br];
        b.iter()
            .enumerate()
            .map(|(r, &bias)| {
                let row = &w[r * n_in..(r + 1) * n_in];
                bias + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Gradients of `<out_grad, output> + sum_m <hidden_grads[m], hidden_m>` with
    /// respect to the parameters (when `want_params`) and the input.
    ///
    /// `hidden_grads` may be empty (no upstream on hidden layers) or hold one
    /// vector per hidden layer; `out_grad` may be `None` when only hidden
    /// activations feed the objective.
    pub fn backward(
        &self,
        trace: &Trace,
        out_grad: Option<&[f64]>,
        hidden_grads: &[Vec<f64>],
        want_params: bool,
    ) -> Result<(Option<Vec<f64>>, Vec<f64>)> {
        let n = self.n_layers();
        if let Some(g) = out_grad {
            if g.len() != self.output_dim() {
                return Err(Error::shape(self.output_dim(), g.len(), "upstream gradient"));
            }
        }
        if !hidden_grads.is_empty() {
            if hidden_grads.len() != self.n_hidden() {
                return Err(Error::shape(
                    self.n_hidden(),
                    hidden_grads.len(),
                    "hidden upstream gradients",
                ));
            }
            for (m, g) in hidden_grads.iter().enumerate() {
                if g.len() != self.widths[m + 1] {
                    return Err(Error::shape(self.widths[m + 1], g.len(), "hidden upstream gradient"));
                }
            }
        }
        if trace.pre.len() != n || trace.input.len() != self.input_dim() {
            return Err(Error::Argument("trace does not belong to this network".into()));
        }

        let mut grads = want_params.then(|| vec![0.0; self.params.len()]);
        // delta = d objective / d pre-activation of the current layer
        let mut delta: Vec<f64> = match out_grad {
            Some(g) => g.to_vec(),
            None => vec![0.0; self.output_dim()],
        };
        for l in (0..n).rev() {
            let n_in = self.widths[l];
            let (wr, br) = self.layer_ranges(l);
            let x: &[f64] = if l == 0 { &trace.input } else { &trace.hidden[l - 1] };
            if let Some(g) = grads.as_mut() {
                let (gw, gb) = (&mut g[wr.clone()], br);
                for (r, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        let row = &mut gw[r * n_in..(r + 1) * n_in];
                        row.iter_mut().zip(x).for_each(|(gw, &xi)| *gw += d * xi);
                    }
                }
                g[gb].iter_mut().zip(&delta).for_each(|(gb, &d)| *gb += d);
            }
            let w = &self.params[wr];
            let mut dx = vec![0.0; n_in];
            for (r, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    let row = &w[r * n_in..(r + 1) * n_in];
                    dx.iter_mut().zip(row).for_each(|(dx, &wv)| *dx += d * wv);
                }
            }
            if l == 0 {
                return Ok((grads, dx));
            }
            // dx is the gradient wrt hidden activation l-1; add its direct upstream
            if let Some(h) = hidden_grads.get(l - 1) {
                dx.iter_mut().zip(h).for_each(|(a, &b)| *a += b);
            }
            delta = dx
                .iter()
                .zip(&trace.pre[l - 1])
                .map(|(&g, &z)| g * silu_grad(z))
                .collect();
        }
        unreachable!("network has at least one layer")
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}
