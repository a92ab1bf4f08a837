//! Parameter checkpoints: a JSON document of named arrays behind a version header.
//!
//! ```json
//! {
//!   "format": "ctm-checkpoint",
//!   "version": 1,
//!   "kind": "student",
//!   "meta": { "sigma_data": 0.5, ... },
//!   "arrays": [ { "name": "online.mlp", "shape": [4354], "data": [ ... ] }, ... ]
//! }
//! ```
//!
//! Floats are written in shortest round-trip form and parsed with correct
//! rounding, so save/load reproduces every parameter bit-exactly.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use std::path::Path;

use super::condnet::CondNet;
use super::embed::{CondTable, Embedder};
use super::mlp::Mlp;
use crate::error::{Error, Result};

pub const FORMAT: &str = "ctm-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub meta: Map<String, Value>,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(kind: &str) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            kind: kind.into(),
            meta: Map::new(),
            arrays: Vec::new(),
        }
    }

    pub fn put(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        self.arrays.push(NamedArray {
            name: name.into(),
            shape: shape.to_vec(),
            data: data.to_vec(),
        });
    }

    pub fn get(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing array `{name}`")))
    }

    pub fn set_meta(&mut self, key: &str, value: impl Serialize) {
        self.meta
            .insert(key.into(), serde_json::to_value(value).expect("meta value serializes"));
    }

    pub fn meta<T: for<'de> Deserialize<'de>>(&self, key: &str) -> Result<T> {
        let v = self
            .meta
            .get(key)
            .ok_or_else(|| Error::Checkpoint(format!("missing meta field `{key}`")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::Checkpoint(format!("meta field `{key}`: {e}")))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", self.kind)));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        if let Some(a) = self.arrays.iter().find(|a| a.data.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("array `{}` holds non-finite values", a.name)));
        }
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text)?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", ck.version)));
        }
        for a in &ck.arrays {
            if a.shape.iter().product::<usize>() != a.data.len() {
                return Err(Error::Checkpoint(format!("array `{}` does not match its shape", a.name)));
            }
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn put_condnet(&mut self, prefix: &str, net: &CondNet) {
        self.set_meta(&format!("{prefix}.widths"), net.mlp.widths());
        self.set_meta(&format!("{prefix}.n_labels"), net.cond.n_labels);
        self.put(&format!("{prefix}.mlp"), &[net.mlp.params().len()], net.mlp.params());
        self.put(
            &format!("{prefix}.cond"),
            &[net.cond.n_labels + 1, net.cond.dim],
            &net.cond.values,
        );
    }

    pub fn get_condnet(&self, prefix: &str) -> Result<CondNet> {
        let widths: Vec<usize> = self.meta(&format!("{prefix}.widths"))?;
        let n_labels: usize = self.meta(&format!("{prefix}.n_labels"))?;
        let mlp = Mlp::from_params(&widths, self.get(&format!("{prefix}.mlp"))?.data.clone())?;
        let cond = self.get(&format!("{prefix}.cond"))?;
        if cond.shape.len() != 2 || cond.shape[0] != n_labels + 1 {
            return Err(Error::Checkpoint(format!("bad condition table shape {:?}", cond.shape)));
        }
        let dim = cond.shape[1];
        let data_dim = mlp.output_dim();
        if mlp.input_dim() != data_dim + dim {
            return Err(Error::Checkpoint("network input width does not match embedding".into()));
        }
        Ok(CondNet {
            mlp,
            cond: CondTable {
                n_labels,
                dim,
                values: cond.data.clone(),
            },
            data_dim,
        })
    }

    pub fn put_embedder(&mut self, e: &Embedder) {
        self.set_meta("embed.dim", e.dim);
        self.put("embed.time_freqs", &[e.time_freqs.len()], &e.time_freqs);
        self.put("embed.aux_freqs", &[e.aux_freqs.len()], &e.aux_freqs);
        self.put("embed.omega_freqs", &[e.omega_freqs.len()], &e.omega_freqs);
    }

    pub fn get_embedder(&self) -> Result<Embedder> {
        Ok(Embedder {
            dim: self.meta("embed.dim")?,
            time_freqs: self.get("embed.time_freqs")?.data.clone(),
            aux_freqs: self.get("embed.aux_freqs")?.data.clone(),
            omega_freqs: self.get("embed.omega_freqs")?.data.clone(),
        })
    }
}
