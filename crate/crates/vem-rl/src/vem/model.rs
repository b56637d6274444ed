//! Value-model parameterizations and the frozen prediction-only handle.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::env::{EnvSpec, State};
use crate::policy::TemplateSpace;
use crate::util::{content_hash_hex, f64s_from_le_bytes, f64s_to_le_bytes};

use super::{encode, sim_state_key, EncoderConfig};

#[derive(Debug, Error)]
pub enum VemIoError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("feature dimension mismatch: model expects {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Tabular,
    Linear,
    Mlp,
    /// Exact state-action table (used by the theory module); predictions
    /// are raw Q values and are not squashed into [0,1].
    QTable,
}

/// Trainable value model. Training code mutates this; inference goes
/// through [`FrozenValueModel`], which exposes prediction only.
#[derive(Debug, Clone, PartialEq)]
pub enum ValueModel {
    Tabular {
        /// feature-hash -> (label sum, count); prediction is the exact mean.
        cells: BTreeMap<u64, (f64, u64)>,
        /// Prediction for unseen cells.
        prior: f64,
        dim: usize,
    },
    Linear {
        w: Vec<f64>,
        b: f64,
    },
    Mlp {
        dim: usize,
        hidden: usize,
        w1: Vec<f64>,
        b1: Vec<f64>,
        w2: Vec<f64>,
        b2: f64,
    },
    QTable {
        /// (state key, template index) -> value.
        table: BTreeMap<(u64, u32), f64>,
        default: f64,
    },
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl ValueModel {
    pub fn kind(&self) -> ModelKind {
        match self {
            ValueModel::Tabular { .. } => ModelKind::Tabular,
            ValueModel::Linear { .. } => ModelKind::Linear,
            ValueModel::Mlp { .. } => ModelKind::Mlp,
            ValueModel::QTable { .. } => ModelKind::QTable,
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ValueModel::Tabular { dim, .. } => *dim,
            ValueModel::Linear { w, .. } => w.len(),
            ValueModel::Mlp { dim, .. } => *dim,
            ValueModel::QTable { .. } => 0,
        }
    }

    /// Prediction from a feature vector. Not applicable to `QTable`.
    pub fn predict_features(&self, x: &[f64]) -> Result<f64, VemIoError> {
        match self {
            ValueModel::Tabular { cells, prior, dim } => {
                if x.len() != *dim {
                    return Err(VemIoError::DimMismatch { expected: *dim, got: x.len() });
                }
                let key = super::feature_key(x);
                Ok(match cells.get(&key) {
                    Some((sum, count)) => sum / *count as f64,
                    None => *prior,
                })
            }
            ValueModel::Linear { w, b } => {
                if x.len() != w.len() {
                    return Err(VemIoError::DimMismatch { expected: w.len(), got: x.len() });
                }
                let z: f64 = w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b;
                Ok(sigmoid(z))
            }
            ValueModel::Mlp { dim, hidden, w1, b1, w2, b2 } => {
                if x.len() != *dim {
                    return Err(VemIoError::DimMismatch { expected: *dim, got: x.len() });
                }
                let mut z = *b2;
                for h in 0..*hidden {
                    let mut a = b1[h];
                    let row = &w1[h * dim..(h + 1) * dim];
                    for (wi, xi) in row.iter().zip(x) {
                        a += wi * xi;
                    }
                    z += w2[h] * a.tanh();
                }
                Ok(sigmoid(z))
            }
            ValueModel::QTable { .. } => Err(VemIoError::Malformed(
                "QTable models predict from (state, template), not features".into(),
            )),
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            ValueModel::Tabular { cells, .. } => cells
                .values()
                .flat_map(|(s, c)| [*s, *c as f64])
                .collect(),
            ValueModel::Linear { w, b } => {
                let mut p = w.clone();
                p.push(*b);
                p
            }
            ValueModel::Mlp { w1, b1, w2, b2, .. } => {
                let mut p = w1.clone();
                p.extend_from_slice(b1);
                p.extend_from_slice(w2);
                p.push(*b2);
                p
            }
            ValueModel::QTable { table, .. } => table.values().copied().collect(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelHeader {
    kind: ModelKind,
    dim: usize,
    hidden: usize,
    prior: f64,
    #[serde(default)]
    cell_keys: Vec<u64>,
    #[serde(default)]
    table_keys: Vec<(u64, u32)>,
    content_hash: String,
}

/// A trained model frozen for inference. Holds the model by value and
/// offers no mutation path; policy training relies on this immutability.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenValueModel {
    model: ValueModel,
}

impl FrozenValueModel {
    pub fn freeze(model: ValueModel) -> FrozenValueModel {
        FrozenValueModel { model }
    }

    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }

    /// Builds the exact-table variant from `(state key, template) -> value`
    /// entries.
    pub fn from_q_entries(
        entries: impl IntoIterator<Item = ((u64, u32), f64)>,
        default: f64,
    ) -> FrozenValueModel {
        FrozenValueModel {
            model: ValueModel::QTable { table: entries.into_iter().collect(), default },
        }
    }

    pub fn predict_features(&self, x: &[f64]) -> Result<f64, VemIoError> {
        self.model.predict_features(x)
    }

    /// Q(s, a) for a template-indexed action.
    pub fn predict_sa(
        &self,
        env: &EnvSpec,
        ts: &TemplateSpace,
        state: &State,
        template: usize,
        encoder: &EncoderConfig,
    ) -> f64 {
        match &self.model {
            ValueModel::QTable { table, default } => {
                let key = (sim_state_key(env, state), template as u32);
                table.get(&key).copied().unwrap_or(*default)
            }
            _ => {
                let action = ts.decode(env, template);
                let x = encode(env, state, &action, encoder);
                self.model.predict_features(&x).expect("encoder dim matches model")
            }
        }
    }

    /// Content hash of the serialized parameter block; changes iff the
    /// parameters change.
    pub fn content_hash(&self) -> String {
        content_hash_hex(&f64s_to_le_bytes(&self.model.params()))
    }

    pub fn save(&self, path: &Path) -> Result<(), VemIoError> {
        let block = f64s_to_le_bytes(&self.model.params());
        let header = ModelHeader {
            kind: self.model.kind(),
            dim: self.model.dim(),
            hidden: match &self.model {
                ValueModel::Mlp { hidden, .. } => *hidden,
                _ => 0,
            },
            prior: match &self.model {
                ValueModel::Tabular { prior, .. } => *prior,
                ValueModel::QTable { default, .. } => *default,
                _ => 0.0,
            },
            cell_keys: match &self.model {
                ValueModel::Tabular { cells, .. } => cells.keys().copied().collect(),
                _ => Vec::new(),
            },
            table_keys: match &self.model {
                ValueModel::QTable { table, .. } => table.keys().copied().collect(),
                _ => Vec::new(),
            },
            content_hash: content_hash_hex(&block),
        };
        let mut bytes = serde_json::to_vec(&header)
            .map_err(|e| VemIoError::Malformed(e.to_string()))?;
        bytes.push(b'\n');
        bytes.extend_from_slice(&block);
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FrozenValueModel, VemIoError> {
        let bytes = fs::read(path)?;
        let nl = bytes
            .iter()
            .position(|b| *b == b'\n')
            .ok_or_else(|| VemIoError::Malformed("missing header newline".into()))?;
        let header: ModelHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| VemIoError::Malformed(e.to_string()))?;
        let block = f64s_from_le_bytes(&bytes[nl + 1..])
            .ok_or_else(|| VemIoError::Malformed("parameter block not 8-byte aligned".into()))?;
        if content_hash_hex(&bytes[nl + 1..]) != header.content_hash {
            return Err(VemIoError::Malformed("content hash mismatch".into()));
        }
        let model = match header.kind {
            ModelKind::Tabular => {
                if block.len() != header.cell_keys.len() * 2 {
                    return Err(VemIoError::Malformed("tabular block size mismatch".into()));
                }
                let cells = header
                    .cell_keys
                    .iter()
                    .zip(block.chunks_exact(2))
                    .map(|(k, sc)| (*k, (sc[0], sc[1] as u64)))
                    .collect();
                ValueModel::Tabular { cells, prior: header.prior, dim: header.dim }
            }
            ModelKind::Linear => {
                if block.len() != header.dim + 1 {
                    return Err(VemIoError::Malformed("linear block size mismatch".into()));
                }
                let b = block[header.dim];
                ValueModel::Linear { w: block[..header.dim].to_vec(), b }
            }
            ModelKind::Mlp => {
                let (d, h) = (header.dim, header.hidden);
                let expect = h * d + h + h + 1;
                if block.len() != expect {
                    return Err(VemIoError::Malformed("mlp block size mismatch".into()));
                }
                let w1 = block[..h * d].to_vec();
                let b1 = block[h * d..h * d + h].to_vec();
                let w2 = block[h * d + h..h * d + 2 * h].to_vec();
                let b2 = block[h * d + 2 * h];
                ValueModel::Mlp { dim: d, hidden: h, w1, b1, w2, b2 }
            }
            ModelKind::QTable => {
                if block.len() != header.table_keys.len() {
                    return Err(VemIoError::Malformed("qtable block size mismatch".into()));
                }
                let table = header.table_keys.iter().copied().zip(block).collect();
                ValueModel::QTable { table, default: header.prior }
            }
        };
        Ok(FrozenValueModel { model })
    }
}
