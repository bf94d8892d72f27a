//! Noisy trajectory datasets: generation, storage and window sampling.
//!
//! A dataset directory holds `manifest.json`, `clean.f64` and `noisy.f64`.
//! Both payloads are little-endian `f64`, row-major
//! `[n_traj, n_steps + 1, 2d]`, training trajectories first.

use std::fs;
use std::io::Write;
use std::ops::Range;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrators::reference_integrate;
use crate::model::checkpoint::{f64s_from_le_bytes, f64s_to_le_bytes};
use crate::phase::{Hamiltonian, HamiltonianField, PhasePoint};
use crate::systems::{SystemRef, SystemSpec};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const DEFAULT_DT: f64 = 0.001;
pub const DEFAULT_N_STEPS: usize = 64;
pub const DEFAULT_NOISE: f64 = 0.01;
pub const FULL_N_TRAIN: usize = 16_384;
pub const FULL_N_VAL: usize = 8_192;
pub const SMOKE_N_TRAIN: usize = 1_024;
pub const SMOKE_N_VAL: usize = 256;

const MANIFEST_FILE: &str = "manifest.json";
const CLEAN_FILE: &str = "clean.f64";
const NOISY_FILE: &str = "noisy.f64";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub system: SystemRef,
    pub d: usize,
    pub n_train: usize,
    pub n_val: usize,
    /// Stored steps per trajectory; each trajectory holds `n_steps + 1` points.
    pub n_steps: usize,
    pub dt: f64,
    pub noise_coeff: f64,
    /// Initial-condition box, one interval per phase-space coordinate.
    pub bounds: Vec<(f64, f64)>,
    pub seed: u64,
}

impl DatasetManifest {
    /// Defaults for `spec`: its domain, `dt = 0.001`, 64 steps, noise 0.01.
    pub fn new(spec: &SystemSpec, n_train: usize, n_val: usize, seed: u64) -> Self {
        Self {
            format_version: DATASET_FORMAT_VERSION,
            system: SystemRef::from(spec),
            d: spec.half_dim(),
            n_train,
            n_val,
            n_steps: DEFAULT_N_STEPS,
            dt: DEFAULT_DT,
            noise_coeff: DEFAULT_NOISE,
            bounds: spec.domain.clone(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.format_version != DATASET_FORMAT_VERSION {
            return bad(format!(
                "unsupported dataset format version {}",
                self.format_version
            ));
        }
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        if !(self.noise_coeff >= 0.0) || !self.noise_coeff.is_finite() {
            return bad(format!(
                "noise_coeff must be >= 0, got {}",
                self.noise_coeff
            ));
        }
        if self.n_steps == 0 {
            return bad("n_steps must be >= 1".into());
        }
        if self.n_train + self.n_val == 0 {
            return bad("dataset needs at least one trajectory".into());
        }
        if self.bounds.len() != 2 * self.d {
            return bad(format!(
                "expected {} bounds, got {}",
                2 * self.d,
                self.bounds.len()
            ));
        }
        check_bounds(&self.bounds)
    }

    pub fn n_traj(&self) -> usize {
        self.n_train + self.n_val
    }

    pub fn state_dim(&self) -> usize {
        2 * self.d
    }

    fn traj_len(&self) -> usize {
        (self.n_steps + 1) * self.state_dim()
    }
}

fn check_bounds(bounds: &[(f64, f64)]) -> Result<()> {
    if bounds.is_empty() {
        return Err(Error::InvalidConfig("empty bounds".into()));
    }
    for &(lo, hi) in bounds {
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(Error::InvalidConfig(format!(
                "invalid interval [{lo}, {hi}]"
            )));
        }
    }
    Ok(())
}

fn uniform_point(rng: &mut ChaCha8Rng, bounds: &[(f64, f64)]) -> PhasePoint {
    PhasePoint::from_coords(
        bounds
            .iter()
            .map(|&(lo, hi)| lo + (hi - lo) * rng.random::<f64>())
            .collect(),
    )
}

/// `n` i.i.d. uniform points in the box (one interval per coordinate).
pub fn sample_initial_conditions(
    n: usize,
    bounds: &[(f64, f64)],
    seed: u64,
) -> Result<Vec<PhasePoint>> {
    if n == 0 {
        return Err(Error::InvalidConfig(
            "need at least one initial condition".into(),
        ));
    }
    check_bounds(bounds)?;
    if !bounds.len().is_multiple_of(2) {
        return Err(Error::InvalidConfig(
            "bounds must cover (q, p) pairs".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n).map(|_| uniform_point(&mut rng, bounds)).collect())
}

/// As [`sample_initial_conditions`], rejecting points at or above the
/// system's energy cap.
pub fn sample_system_initial_conditions(
    spec: &SystemSpec,
    n: usize,
    bounds: &[(f64, f64)],
    seed: u64,
) -> Result<Vec<PhasePoint>> {
    let Some(cap) = spec.energy_cap else {
        return sample_initial_conditions(n, bounds, seed);
    };
    if n == 0 {
        return Err(Error::InvalidConfig(
            "need at least one initial condition".into(),
        ));
    }
    check_bounds(bounds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    let max_draws = 10_000 * n.max(1);
    for _ in 0..max_draws {
        let y = uniform_point(&mut rng, bounds);
        if spec.energy(&y) < cap {
            out.push(y);
            if out.len() == n {
                return Ok(out);
            }
        }
    }
    Err(Error::InvalidConfig(format!(
        "bounds admit too few initial conditions below energy {cap}"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
}

/// Clean and noisy trajectories plus the manifest that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    clean: Vec<f64>,
    noisy: Vec<f64>,
}

/// Reference trajectory of one initial condition with its own noise stream.
fn generate_one(
    spec: &SystemSpec,
    m: &DatasetManifest,
    id: usize,
    y0: &PhasePoint,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let traj = reference_integrate(&HamiltonianField(spec), y0, m.dt, m.n_steps)?;
    let clean: Vec<f64> = traj
        .points
        .iter()
        .flat_map(|p| p.as_slice().iter().copied())
        .collect();
    let noisy = if m.noise_coeff == 0.0 {
        clean.clone()
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(m.seed);
        rng.set_stream(1 + id as u64);
        clean
            .iter()
            .map(|&c| {
                let e: f64 = rng.sample(StandardNormal);
                c + m.noise_coeff * e
            })
            .collect()
    };
    Ok((clean, noisy))
}

/// Integrates every initial condition with the reference solver and adds
/// `noise_coeff · N(0, 1)` to every stored scalar. Output does not depend
/// on the number of threads.
pub fn generate_dataset(spec: &SystemSpec, manifest: DatasetManifest) -> Result<Dataset> {
    manifest.validate()?;
    if manifest.d != spec.half_dim() || manifest.system.name != spec.name {
        return Err(Error::InvalidConfig(format!(
            "manifest describes `{}` (d = {}), system is `{}` (d = {})",
            manifest.system.name,
            manifest.d,
            spec.name,
            spec.half_dim()
        )));
    }
    let ics =
        sample_system_initial_conditions(spec, manifest.n_traj(), &manifest.bounds, manifest.seed)?;
    let run = |(id, y0): (usize, &PhasePoint)| {
        generate_one(spec, &manifest, id, y0).map_err(|e| e.at_step(id))
    };
    #[cfg(feature = "parallel")]
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = {
        use rayon::prelude::*;
        ics.par_iter().enumerate().map(run).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let parts: Vec<Result<(Vec<f64>, Vec<f64>)>> = ics.iter().enumerate().map(run).collect();
    let mut clean = Vec::with_capacity(manifest.n_traj() * manifest.traj_len());
    let mut noisy = Vec::with_capacity(clean.capacity());
    for part in parts {
        let (c, n) = part?;
        clean.extend_from_slice(&c);
        noisy.extend_from_slice(&n);
    }
    Ok(Dataset {
        manifest,
        clean,
        noisy,
    })
}

impl Dataset {
    pub fn from_arrays(
        manifest: DatasetManifest,
        clean: Vec<f64>,
        noisy: Vec<f64>,
    ) -> Result<Self> {
        manifest.validate()?;
        let want = manifest.n_traj() * manifest.traj_len();
        if clean.len() != want || noisy.len() != want {
            return Err(Error::InvalidConfig(format!(
                "dataset arrays need {want} values, got {} clean and {} noisy",
                clean.len(),
                noisy.len()
            )));
        }
        Ok(Self {
            manifest,
            clean,
            noisy,
        })
    }

    pub fn clean(&self) -> &[f64] {
        &self.clean
    }

    pub fn noisy(&self) -> &[f64] {
        &self.noisy
    }

    pub fn split_ids(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => 0..self.manifest.n_train,
            Split::Val => self.manifest.n_train..self.manifest.n_traj(),
        }
    }

    fn point(&self, data: &[f64], traj: usize, step: usize) -> PhasePoint {
        let n = self.manifest.state_dim();
        let off = traj * self.manifest.traj_len() + step * n;
        PhasePoint::from_coords(data[off..off + n].iter().copied().collect())
    }

    /// Noisy observation of trajectory `traj` (global id) at `step`.
    pub fn observation(&self, traj: usize, step: usize) -> PhasePoint {
        self.point(&self.noisy, traj, step)
    }

    pub fn clean_point(&self, traj: usize, step: usize) -> PhasePoint {
        self.point(&self.clean, traj, step)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))
        };
        write(
            MANIFEST_FILE,
            serde_json::to_string_pretty(&self.manifest)?.as_bytes(),
        )?;
        write(CLEAN_FILE, &f64s_to_le_bytes(&self.clean))?;
        write(NOISY_FILE, &f64s_to_le_bytes(&self.noisy))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: DatasetManifest = serde_json::from_str(&text)?;
        manifest.validate().map_err(|e| Error::Corrupt {
            path: mpath.clone(),
            reason: e.to_string(),
        })?;
        let want = manifest.n_traj() * manifest.traj_len();
        let read = |name: &str| -> Result<Vec<f64>> {
            let p = dir.join(name);
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            match f64s_from_le_bytes(&bytes) {
                Some(v) if v.len() == want => Ok(v),
                _ => Err(Error::Corrupt {
                    path: p,
                    reason: format!("expected {want} f64 values, file has {} bytes", bytes.len()),
                }),
            }
        };
        let clean = read(CLEAN_FILE)?;
        let noisy = read(NOISY_FILE)?;
        Ok(Self {
            manifest,
            clean,
            noisy,
        })
    }

    /// One row per stored point: split, trajectory, step, time, clean and
    /// noisy coordinates.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let d = self.manifest.d;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec![
            "split".to_string(),
            "traj".into(),
            "step".into(),
            "t".into(),
        ];
        for kind in ["clean", "noisy"] {
            header.extend((1..=d).map(|i| format!("{kind}_q{i}")));
            header.extend((1..=d).map(|i| format!("{kind}_p{i}")));
        }
        w.write_record(&header)?;
        for split in [Split::Train, Split::Val] {
            for traj in self.split_ids(split) {
                for step in 0..=self.manifest.n_steps {
                    let mut row = vec![
                        if split == Split::Train {
                            "train"
                        } else {
                            "val"
                        }
                        .to_string(),
                        traj.to_string(),
                        step.to_string(),
                        format!("{}", step as f64 * self.manifest.dt),
                    ];
                    row.extend(
                        self.clean_point(traj, step)
                            .as_slice()
                            .iter()
                            .map(|v| v.to_string()),
                    );
                    row.extend(
                        self.observation(traj, step)
                            .as_slice()
                            .iter()
                            .map(|v| v.to_string()),
                    );
                    w.write_record(&row)?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(Path::new("<csv>"), e))?;
        Ok(())
    }
}

/// Observation windows drawn from one split.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    /// `[batch][τ + 1]` noisy states; the first point is the initial condition.
    pub windows: Vec<Vec<PhasePoint>>,
    pub start_indices: Vec<usize>,
    pub trajectory_ids: Vec<usize>,
}

impl TrajectoryBatch {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }
}

/// Draws `batch_size` windows of `τ + 1` points spaced `stride` stored
/// steps apart, with trajectory and start index uniform.
pub fn sample_batch(
    dataset: &Dataset,
    split: Split,
    batch_size: usize,
    tau: usize,
    stride: usize,
    rng: &mut impl Rng,
) -> Result<TrajectoryBatch> {
    if tau == 0 || stride == 0 || batch_size == 0 {
        return Err(Error::InvalidConfig(
            "tau, stride and batch size must be >= 1".into(),
        ));
    }
    let span = tau * stride;
    if span > dataset.manifest.n_steps {
        return Err(Error::InvalidConfig(format!(
            "window of {tau} steps at stride {stride} needs {span} stored steps, dataset has {}",
            dataset.manifest.n_steps
        )));
    }
    let ids = dataset.split_ids(split);
    if ids.is_empty() {
        return Err(Error::InvalidConfig(format!("{split:?} split is empty")));
    }
    let max_start = dataset.manifest.n_steps - span;
    let mut batch = TrajectoryBatch {
        windows: Vec::with_capacity(batch_size),
        start_indices: Vec::with_capacity(batch_size),
        trajectory_ids: Vec::with_capacity(batch_size),
    };
    for _ in 0..batch_size {
        let traj = rng.random_range(ids.clone());
        let start = rng.random_range(0..=max_start);
        batch.windows.push(
            (0..=tau)
                .map(|k| dataset.observation(traj, start + k * stride))
                .collect(),
        );
        batch.start_indices.push(start);
        batch.trajectory_ids.push(traj);
    }
    Ok(batch)
}
