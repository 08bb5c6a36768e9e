use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::optim::OptimizerConfig;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"TSPR";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint {field}: {message}")]
    Format { field: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn format_err(field: impl Into<String>, message: impl Into<String>) -> CheckpointError {
    CheckpointError::Format {
        field: field.into(),
        message: message.into(),
    }
}

/// Optimizer progress stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub step: u64,
    pub learning_rate: f64,
    pub optimizer: OptimizerConfig,
    pub best_validation: Option<f64>,
    pub stale_validations: usize,
}

impl TrainState {
    pub fn fresh(optimizer: OptimizerConfig) -> Self {
        Self {
            step: 0,
            learning_rate: optimizer.learning_rate,
            optimizer,
            best_validation: None,
            stale_validations: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainState,
}

/// Parameters, running statistics, velocities and training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model<f32>,
    /// One per parameter, in parameter order.
    pub velocities: Vec<Tensor<f32>>,
    pub state: TrainState,
}

impl Checkpoint {
    pub fn fresh(model: Model<f32>, optimizer: OptimizerConfig) -> Self {
        let velocities = model
            .params
            .iter()
            .map(|p| Tensor::zeros(p.value.dims()))
            .collect();
        Self {
            model,
            velocities,
            state: TrainState::fresh(optimizer),
        }
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<f32>)> {
        let mut out = Vec::new();
        for p in self.model.params.iter() {
            out.push((p.name.clone(), &p.value));
        }
        for (p, v) in self.model.params.iter().zip(&self.velocities) {
            out.push((format!("velocity.{}", p.name), v));
        }
        for (name, s) in &self.model.stats.entries {
            out.push((format!("stats.{name}.mean"), &s.mean));
            out.push((format!("stats.{name}.var"), &s.var));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, CheckpointError> {
        let header = Header {
            model: self.model.config.clone(),
            train: self.state.clone(),
        };
        let text = serde_json::to_string(&header).map_err(|e| format_err("config", e.to_string()))?;
        let tensors = self.named_tensors();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in tensors {
            let name_len =
                u16::try_from(name.len()).map_err(|_| format_err("name", format!("{name} too long")))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.dims() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            out.push(DTYPE_F32);
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(format_err(
                "magic",
                format!("expected \"TSPR\", found {:?}", String::from_utf8_lossy(magic)),
            ));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(format_err(
                "version",
                format!("unsupported version {version}, expected {VERSION}"),
            ));
        }
        let len = r.u32("config length")? as usize;
        let text =
            std::str::from_utf8(r.take(len, "config")?).map_err(|e| format_err("config", e.to_string()))?;
        let header: Header = serde_json::from_str(text).map_err(|e| format_err("config", e.to_string()))?;
        let mut model =
            Model::<f32>::new(header.model, 0).map_err(|e| format_err("config", e.to_string()))?;
        let mut velocities: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
        let mut seen_params = vec![false; model.params.len()];
        let mut seen_stats = vec![[false; 2]; model.stats.entries.len()];

        let count = r.u32("tensor count")?;
        for _ in 0..count {
            let name_len = r.u16("name length")? as usize;
            let name = std::str::from_utf8(r.take(name_len, "name")?)
                .map_err(|e| format_err("name", e.to_string()))?
                .to_string();
            let rank = r.u8(&format!("{name} rank"))? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(r.u32(&format!("{name} dims"))? as usize);
            }
            let dtype = r.u8(&format!("{name} dtype"))?;
            if dtype != DTYPE_F32 {
                return Err(format_err(
                    format!("{name} dtype"),
                    format!("unsupported dtype {dtype}"),
                ));
            }
            let n: usize = dims.iter().product();
            let raw = r.take(n * 4, &format!("{name} payload"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let tensor = Tensor::new(&dims, data).map_err(|e| format_err(&name, e.to_string()))?;

            let check = |expected: &[usize]| {
                if expected == dims.as_slice() {
                    Ok(())
                } else {
                    Err(format_err(
                        format!("{name} dims"),
                        format!("expected {expected:?}, found {dims:?}"),
                    ))
                }
            };
            if let Some(p) = name.strip_prefix("velocity.") {
                let i = model
                    .params
                    .position(p)
                    .ok_or_else(|| format_err("name", format!("unknown velocity {name}")))?;
                check(model.params.at(i).value.dims())?;
                velocities[i] = Some(tensor);
            } else if let Some(rest) = name.strip_prefix("stats.") {
                let (layer, which) = rest
                    .rsplit_once('.')
                    .ok_or_else(|| format_err("name", format!("malformed stats tensor {name}")))?;
                let i = model
                    .stats
                    .position(layer)
                    .ok_or_else(|| format_err("name", format!("unknown stats layer {name}")))?;
                let stats = &mut model.stats.entries[i].1;
                let (slot, k) = match which {
                    "mean" => (&mut stats.mean, 0),
                    "var" => (&mut stats.var, 1),
                    _ => return Err(format_err("name", format!("malformed stats tensor {name}"))),
                };
                check(slot.dims())?;
                *slot = tensor;
                seen_stats[i][k] = true;
            } else {
                let i = model
                    .params
                    .position(&name)
                    .ok_or_else(|| format_err("name", format!("unknown parameter {name}")))?;
                check(model.params.at(i).value.dims())?;
                model.params.at_mut(i).value = tensor;
                seen_params[i] = true;
            }
        }
        if r.pos != bytes.len() {
            return Err(format_err(
                "payload",
                format!("{} trailing bytes", bytes.len() - r.pos),
            ));
        }
        if let Some(i) = seen_params.iter().position(|s| !s) {
            return Err(format_err(&model.params.at(i).name, "missing from checkpoint"));
        }
        if let Some(i) = seen_stats.iter().position(|s| !(s[0] && s[1])) {
            return Err(format_err(
                format!("stats.{}", model.stats.entries[i].0),
                "missing from checkpoint",
            ));
        }
        let velocities = velocities
            .into_iter()
            .enumerate()
            .map(|(i, v)| {
                v.ok_or_else(|| {
                    format_err(
                        format!("velocity.{}", model.params.at(i).name),
                        "missing from checkpoint",
                    )
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            model,
            velocities,
            state: header.train,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, bytes).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                format_err(
                    field,
                    format!(
                        "needs {n} bytes at offset {}, file has {}",
                        self.pos,
                        self.bytes.len()
                    ),
                )
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self, field: &str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, field)?[0])
    }

    fn u16(&mut self, field: &str) -> Result<u16, CheckpointError> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &str) -> Result<u32, CheckpointError> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Saves the model with zero velocities and a fresh training state.
pub fn save_checkpoint(model: &Model<f32>, path: &Path) -> Result<(), CheckpointError> {
    Checkpoint::fresh(model.clone(), OptimizerConfig::default()).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    Checkpoint::load(path)
}
