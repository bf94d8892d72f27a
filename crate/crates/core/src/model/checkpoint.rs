//! Checkpoint files: a JSON header plus a sibling `.f64` payload holding the
//! flat parameter array as little-endian 64-bit floats.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Arch, Model, ParamVector};
use crate::error::{Error, Result};
use crate::systems::SystemRef;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub arch: Vec<usize>,
    pub seed: u64,
    /// Set when the checkpoint stands for an analytic system instead of a
    /// network; the payload is then empty.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<SystemRef>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub model: Model,
}

impl Checkpoint {
    pub fn from_params(theta: ParamVector, seed: u64) -> Self {
        Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_FORMAT_VERSION,
                arch: theta.arch().widths().to_vec(),
                seed,
                oracle: None,
            },
            model: Model::Net(theta),
        }
    }

    pub fn oracle(system: &SystemRef) -> Result<Self> {
        let spec = system.build()?;
        Ok(Self {
            header: CheckpointHeader {
                format_version: CHECKPOINT_FORMAT_VERSION,
                arch: Vec::new(),
                seed: 0,
                oracle: Some(system.clone()),
            },
            model: Model::Oracle(spec),
        })
    }

    pub fn payload_path(header_path: &Path) -> PathBuf {
        header_path.with_extension("f64")
    }

    pub fn params(&self) -> Option<&ParamVector> {
        match &self.model {
            Model::Net(theta) => Some(theta),
            Model::Oracle(_) => None,
        }
    }

    pub fn save(&self, header_path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.header)?;
        fs::write(header_path, json).map_err(|e| Error::io(header_path, e))?;
        let values: &[f64] = self.params().map_or(&[], |t| t.values());
        let payload = Self::payload_path(header_path);
        fs::write(&payload, f64s_to_le_bytes(values)).map_err(|e| Error::io(&payload, e))
    }

    pub fn load(header_path: &Path) -> Result<Self> {
        let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
        let header: CheckpointHeader = serde_json::from_str(&text)?;
        if header.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Corrupt {
                path: header_path.into(),
                reason: format!("unsupported format version {}", header.format_version),
            });
        }
        if let Some(system) = &header.oracle {
            let spec = system.build()?;
            return Ok(Self {
                header,
                model: Model::Oracle(spec),
            });
        }
        let arch = Arch::new(&header.arch)?;
        let payload = Self::payload_path(header_path);
        let bytes = fs::read(&payload).map_err(|e| Error::io(&payload, e))?;
        let values = f64s_from_le_bytes(&bytes).ok_or_else(|| Error::Corrupt {
            path: payload.clone(),
            reason: format!("{} bytes is not a whole number of f64 values", bytes.len()),
        })?;
        if values.len() != arch.param_count() {
            return Err(Error::Corrupt {
                path: payload,
                reason: format!(
                    "architecture {:?} needs {} values, file holds {}",
                    header.arch,
                    arch.param_count(),
                    values.len()
                ),
            });
        }
        let theta = ParamVector::from_values(arch, values)?;
        Ok(Self {
            header,
            model: Model::Net(theta),
        })
    }
}

pub(crate) fn f64s_to_le_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn f64s_from_le_bytes(bytes: &[u8]) -> Option<Vec<f64>> {
    if !bytes.len().is_multiple_of(8) {
        return None;
    }
    Some(
        bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    )
}
