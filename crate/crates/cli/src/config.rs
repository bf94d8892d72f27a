//! Settings layering: built-in defaults, then the `--config` file, then
//! command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use shnn::integrators::FpiConfig;
use shnn::systems::SystemRef;

pub const DEFAULT_OUT_DIR: &str = "shnn-out";

/// Contents of a `--config` file. Every key is optional. Sections are
/// merged key by key over the defaults of the matching subcommand.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub system: Option<SystemRef>,
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dataset: Option<Value>,
    pub train: Option<Value>,
    pub eval: Option<Value>,
    pub integrate: Option<Value>,
    pub profile: Option<Value>,
    pub grad_check: Option<Value>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Applies `patch` over `base`. Objects merge recursively; anything else
/// replaces. Keys unknown to `base` at the top level are rejected.
pub fn overlay<T: Serialize + DeserializeOwned>(
    base: T,
    patch: Option<&Value>,
    section: &str,
) -> Result<T> {
    let Some(patch) = patch else {
        return Ok(base);
    };
    let mut merged = serde_json::to_value(&base)?;
    let (Value::Object(dst), Value::Object(src)) = (&mut merged, patch) else {
        bail!("config section `{section}` must be an object");
    };
    for (k, v) in src {
        match dst.get_mut(k) {
            Some(slot) => merge(slot, v),
            None => bail!("config section `{section}` has no key `{k}`"),
        }
    }
    serde_json::from_value(merged).with_context(|| format!("config section `{section}`"))
}

fn merge(dst: &mut Value, src: &Value) {
    match (dst, src) {
        // Tagged enums switch variant wholesale.
        (Value::Object(d), Value::Object(s))
            if !(s.contains_key("kind") && d.get("kind") != s.get("kind")) =>
        {
            for (k, v) in s {
                match d.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        d.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (d, s) => *d = s.clone(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSettings {
    pub n_train: usize,
    pub n_val: usize,
    pub n_steps: usize,
    pub dt: f64,
    pub noise_coeff: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub grid_n: usize,
    /// Values of the coordinates not spanned by the grid.
    pub base: Option<Vec<f64>>,
    pub drift_steps: usize,
    pub drift_h: f64,
    pub drift_y0: Option<Vec<f64>>,
    pub fpi: FpiConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            grid_n: 33,
            base: None,
            drift_steps: 1000,
            drift_h: 0.01,
            drift_y0: None,
            fpi: FpiConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegrateSettings {
    pub method: String,
    pub h: f64,
    pub steps: usize,
    pub y0: Option<Vec<f64>>,
    pub fpi: FpiConfig,
}

impl Default for IntegrateSettings {
    fn default() -> Self {
        Self {
            method: "implicit_midpoint".into(),
            h: 0.01,
            steps: 1000,
            y0: None,
            fpi: FpiConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckSettings {
    pub hidden: Vec<usize>,
    pub tau: usize,
    pub h: f64,
    pub eps: f64,
    /// Largest acceptable normwise relative error.
    pub tol: f64,
    pub noise_coeff: f64,
    pub fpi: FpiConfig,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            hidden: vec![8],
            tau: 4,
            h: 0.01,
            eps: 1e-5,
            tol: 1e-4,
            noise_coeff: 0.01,
            fpi: FpiConfig::with_tol(1e-12),
            seed: 0,
        }
    }
}

/// Snapshot of the resolved settings written next to the outputs.
#[derive(Debug, Serialize)]
pub struct RunConfig<'a, T: Serialize> {
    pub command: &'a str,
    pub seed: Option<u64>,
    pub system: Option<&'a SystemRef>,
    pub data: Option<&'a Path>,
    pub checkpoint: Option<&'a Path>,
    pub out_dir: &'a Path,
    pub settings: &'a T,
}

impl<T: Serialize> RunConfig<'_, T> {
    pub fn save(&self) -> Result<()> {
        let path = self
            .out_dir
            .join(format!("{}_config.json", self.command.replace('-', "_")));
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;
    use shnn::train::{Shooting, TrainConfig};

    #[test]
    fn overlay_merges_nested_keys() {
        let patch = json!({"tau": 3, "fpi": {"tol": 1e-8}});
        let cfg = overlay(TrainConfig::default(), Some(&patch), "train").unwrap();
        assert_eq!(cfg.tau, 3);
        assert_eq!(cfg.fpi.tol, 1e-8);
        assert_eq!(cfg.fpi.max_iters, FpiConfig::default().max_iters);
        assert_eq!(cfg.batch_size, TrainConfig::default().batch_size);
    }

    #[test]
    fn overlay_switches_tagged_variant() {
        let patch = json!({"shooting": {"kind": "multiple", "segment_len": 3}});
        let cfg = overlay(TrainConfig::default(), Some(&patch), "train").unwrap();
        assert_eq!(cfg.shooting, Shooting::Multiple { segment_len: 3 });
    }

    #[test]
    fn overlay_rejects_unknown_keys() {
        let patch = json!({"taus": 3});
        assert!(overlay(TrainConfig::default(), Some(&patch), "train").is_err());
        let patch = json!([1, 2]);
        assert!(overlay(TrainConfig::default(), Some(&patch), "train").is_err());
    }

    #[test]
    fn file_config_rejects_unknown_sections() {
        assert!(serde_json::from_str::<FileConfig>(r#"{"trian": {}}"#).is_err());
        let ok: FileConfig = serde_json::from_str(
            r#"{"seed": 3, "system": {"name": "coupled_ho", "params": {"alpha": 0.2}}}"#,
        )
        .unwrap();
        assert_eq!(ok.seed, Some(3));
        assert_eq!(ok.system.unwrap().params["alpha"], 0.2);
    }
}
