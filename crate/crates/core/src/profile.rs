//! Peak memory and wall time of one training iteration, adjoint against
//! backprop, across rollout lengths.
//!
//! The batch is processed window by window on the calling thread so every
//! byte is attributed to one engine; the meter only sees this thread.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{sample_batch, Dataset, Split};
use crate::error::{Error, Result};
use crate::integrators::FpiConfig;
use crate::memory::{charge, f64_bytes, MeterSession};
use crate::model::{init_params, ParamVector, DEFAULT_HIDDEN};
use crate::train::{window_gradient, Adam, GradMode, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DEFAULT_PROFILE_STEPS: [usize; 4] = [4, 8, 16, 32];

/// Fixed-point sweeps per implicit step while profiling.
pub const PROFILE_FPI_ITERS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    pub steps: Vec<usize>,
    pub batch_size: usize,
    /// Stored steps per rollout step; `None` picks the largest stride up to
    /// 10 that fits the longest rollout into the stored horizon.
    pub stride: Option<usize>,
    /// Defaults to a fixed [`PROFILE_FPI_ITERS`] sweeps per step, no early
    /// exit, so every rollout step does the same work.
    pub fpi: FpiConfig,
    pub seed: u64,
    pub hidden: Vec<usize>,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        Self {
            steps: DEFAULT_PROFILE_STEPS.to_vec(),
            batch_size: 512,
            stride: None,
            fpi: FpiConfig {
                max_iters: PROFILE_FPI_ITERS,
                early_exit: false,
                ..FpiConfig::default()
            },
            seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub grad_mode: GradMode,
    pub n_steps: usize,
    pub peak_bytes: u64,
    pub wall_seconds: f64,
    pub batch_size: usize,
    pub h: f64,
}

/// One gradient evaluation plus optimizer update over `windows`, metered.
fn one_iteration(
    theta: &ParamVector,
    windows: &[Vec<crate::phase::PhasePoint>],
    h: f64,
    cfg: &TrainConfig,
) -> Result<(u64, f64)> {
    let session = MeterSession::start()?;
    let start = Instant::now();
    let mut params = theta.clone();
    let mut adam = Adam::new(theta.len());
    let mut grad = vec![0.0; theta.len()];
    let _held = charge(f64_bytes(grad.len()));
    for w in windows {
        let g = window_gradient(theta, w, h, cfg)?;
        for (a, b) in grad.iter_mut().zip(&g.grad) {
            *a += b / windows.len() as f64;
        }
    }
    adam.step(params.values_mut(), &grad, cfg.lr0)?;
    let wall = start.elapsed().as_secs_f64();
    let peak = session.peak_bytes() as u64;
    if peak == 0 || !(wall > 0.0) {
        return Err(Error::InvalidConfig(
            "memory instrumentation recorded nothing".into(),
        ));
    }
    Ok((peak, wall))
}

pub fn run_profile(dataset: &Dataset, cfg: &ProfileConfig) -> Result<Vec<ProfileRecord>> {
    cfg.fpi.validate()?;
    let longest = *cfg
        .steps
        .iter()
        .max()
        .ok_or_else(|| Error::InvalidConfig("no step counts to profile".into()))?;
    if cfg.steps.contains(&0) || cfg.batch_size == 0 {
        return Err(Error::InvalidConfig(
            "step counts and batch size must be >= 1".into(),
        ));
    }
    let stride = match cfg.stride {
        Some(s) => s,
        None => (dataset.manifest.n_steps / longest).min(10),
    };
    if stride == 0 || stride * longest > dataset.manifest.n_steps {
        return Err(Error::InvalidConfig(format!(
            "dataset stores {} steps, too few for {longest}-step rollouts",
            dataset.manifest.n_steps
        )));
    }
    let h = stride as f64 * dataset.manifest.dt;
    let arch = crate::model::Arch::with_hidden(dataset.manifest.d, &cfg.hidden)?;
    let theta = init_params(arch.widths(), cfg.seed)?;
    let mut out = Vec::new();
    for &n in &cfg.steps {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let batch = sample_batch(dataset, Split::Train, cfg.batch_size, n, stride, &mut rng)?;
        for mode in [GradMode::Adjoint, GradMode::Backprop] {
            let tcfg = TrainConfig {
                tau: n,
                stride,
                grad_mode: mode,
                fpi: cfg.fpi,
                ..TrainConfig::default()
            };
            let (peak_bytes, wall_seconds) = one_iteration(&theta, &batch.windows, h, &tcfg)?;
            out.push(ProfileRecord {
                grad_mode: mode,
                n_steps: n,
                peak_bytes,
                wall_seconds,
                batch_size: cfg.batch_size,
                h,
            });
        }
    }
    Ok(out)
}

pub fn write_profile_csv<W: Write>(records: &[ProfileRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in records {
        w.serialize(r)?;
    }
    w.flush()
        .map_err(|e| Error::io(std::path::Path::new("<csv>"), e))?;
    Ok(())
}

pub fn read_profile_csv<R: std::io::Read>(input: R) -> Result<Vec<ProfileRecord>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
