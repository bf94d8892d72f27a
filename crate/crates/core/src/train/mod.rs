//! Training loop and evaluation.
//!
//! Each batch rolls out `τ` implicit-midpoint steps from every window start,
//! takes the gradient of the squared trajectory loss (adjoint or backprop),
//! and applies one Adam update. The learning rate is cut on validation
//! plateaus.

mod eval;
mod optim;

use std::ops::Range;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use eval::{
    energy_drift, energy_drift_with, evaluate_ood, parse_report_csv, report_csv, report_markdown,
    EvalReport, GridPoint, GridSpec, TableRow,
};
pub use optim::{Adam, Plateau, PlateauConfig};

use crate::adjoint::{adjoint_window, backprop_window, LossPartials, Quadrature, WindowGradient};
use crate::data::{sample_batch, Dataset, Split, TrajectoryBatch};
use crate::error::{check_dim, Error, Result};
use crate::integrators::{integrate, FpiConfig, GuessSource, Method};
use crate::model::{init_params, Arch, NetHamiltonian, ParamVector, DEFAULT_HIDDEN};
use crate::phase::{AdjointState, HamiltonianField, PhasePoint};

/// `Σ_{k=1..τ} ‖y_pred(t_k) − y_obs(t_k)‖²` with its partials
/// `2 (y_pred − y_obs)`. The initial point of each window is excluded.
pub fn loss(pred: &[PhasePoint], obs: &[PhasePoint]) -> Result<(f64, LossPartials)> {
    check_dim("prediction window", obs.len(), pred.len())?;
    if pred.len() < 2 {
        return Err(Error::InvalidConfig(
            "loss window needs at least two points".into(),
        ));
    }
    let mut total = 0.0;
    let mut partials = Vec::with_capacity(pred.len() - 1);
    for (p, o) in pred.iter().zip(obs).skip(1) {
        check_dim("observation", p.dim(), o.dim())?;
        let r = p.sub(o);
        total += r.norm_sq();
        partials.push(AdjointState::from_coords(
            r.as_slice().iter().map(|v| 2.0 * v).collect(),
        ));
    }
    if !total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok((total, LossPartials::new(partials)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradMode {
    #[default]
    Adjoint,
    Backprop,
}

/// Single shooting integrates the whole window from its first observation.
/// Multiple shooting restarts from the observation at every segment start;
/// `segment_len` counts points, consecutive segments share an endpoint, and
/// no continuity penalty is added.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Shooting {
    #[default]
    Single,
    Multiple {
        segment_len: usize,
    },
}

impl Shooting {
    /// Point ranges of the segments of a window with `tau` steps.
    pub fn segments(&self, tau: usize) -> Vec<Range<usize>> {
        match *self {
            #[allow(clippy::single_range_in_vec_init)]
            Shooting::Single => vec![0..tau + 1],
            Shooting::Multiple { segment_len } => {
                let step = segment_len - 1;
                (0..tau)
                    .step_by(step)
                    .map(|s| s..(s + segment_len).min(tau + 1))
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Steps per rollout window.
    pub tau: usize,
    /// Stored dataset steps per training step; `h = stride · dt`.
    pub stride: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Updates per epoch; `None` means one pass worth of windows,
    /// `ceil(n_train / batch_size)`.
    pub batches_per_epoch: Option<usize>,
    pub lr0: f64,
    pub scheduler: PlateauConfig,
    pub shooting: Shooting,
    pub grad_mode: GradMode,
    pub quadrature: Quadrature,
    pub fpi: FpiConfig,
    pub seed: u64,
    pub hidden: Vec<usize>,
    /// Fixed batches used to measure train and validation loss each epoch.
    pub probe_batches: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 6,
            stride: 1,
            batch_size: 512,
            epochs: 25,
            batches_per_epoch: None,
            lr0: 0.01,
            scheduler: PlateauConfig::default(),
            shooting: Shooting::Single,
            grad_mode: GradMode::Adjoint,
            quadrature: Quadrature::Midpoint,
            fpi: FpiConfig::default(),
            seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            probe_batches: 2,
        }
    }
}

impl TrainConfig {
    /// Reduced-scale settings for a 1024-trajectory dataset stored with
    /// [`SMOKE_N_STEPS`] steps: coarse training steps so the motion over a
    /// window stands well above the observation noise.
    pub fn smoke() -> Self {
        Self {
            stride: SMOKE_STRIDE,
            epochs: 10,
            batches_per_epoch: Some(SMOKE_BATCHES_PER_EPOCH),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.tau == 0 {
            return bad("tau must be >= 1");
        }
        if self.stride == 0 {
            return bad("stride must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.batches_per_epoch == Some(0) {
            return bad("batches_per_epoch must be >= 1");
        }
        if !(self.lr0 >= 0.0) || !self.lr0.is_finite() {
            return bad("lr0 must be finite and >= 0");
        }
        if !(self.scheduler.factor > 0.0 && self.scheduler.factor <= 1.0) {
            return bad("scheduler factor must be in (0, 1]");
        }
        if self.probe_batches == 0 {
            return bad("probe_batches must be >= 1");
        }
        if let Shooting::Multiple { segment_len } = self.shooting {
            if segment_len < 2 {
                return bad("multiple shooting needs segment_len >= 2");
            }
        }
        self.fpi.validate()
    }

    pub fn arch(&self, d: usize) -> Result<Arch> {
        Arch::with_hidden(d, &self.hidden)
    }
}

/// Stored steps per trajectory in the smoke dataset preset.
pub const SMOKE_N_STEPS: usize = 320;
pub const SMOKE_STRIDE: usize = 50;
pub const SMOKE_BATCHES_PER_EPOCH: usize = 40;

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Loss and gradient of one window under the configured shooting scheme.
pub fn window_gradient(
    theta: &ParamVector,
    window: &[PhasePoint],
    h: f64,
    cfg: &TrainConfig,
) -> Result<WindowGradient> {
    let tau = window.len().saturating_sub(1);
    let mut total = WindowGradient {
        loss: 0.0,
        grad: vec![0.0; theta.len()],
        unconverged: 0,
        steps: 0,
    };
    for seg in cfg.shooting.segments(tau) {
        let obs = &window[seg];
        let g = match cfg.grad_mode {
            GradMode::Adjoint => adjoint_window(theta, obs, h, &cfg.fpi, cfg.quadrature)?,
            GradMode::Backprop => backprop_window(theta, obs, h, &cfg.fpi)?,
        };
        total.loss += g.loss;
        add_into(&mut total.grad, &g.grad);
        total.unconverged += g.unconverged;
        total.steps += g.steps;
    }
    Ok(total)
}

/// Forward-only loss of one window.
pub fn window_loss(
    theta: &ParamVector,
    window: &[PhasePoint],
    h: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let tau = window.len().saturating_sub(1);
    let field = HamiltonianField(&NetHamiltonian(theta));
    let mut total = 0.0;
    for seg in cfg.shooting.segments(tau) {
        let obs = &window[seg];
        let hints = (cfg.fpi.guess == GuessSource::Observation).then_some(obs);
        let fwd = integrate(
            &field,
            &obs[0],
            h,
            obs.len() - 1,
            &Method::ImplicitMidpoint,
            &cfg.fpi,
            hints,
        )?;
        total += loss(&fwd.trajectory.points, obs)?.0;
    }
    Ok(total)
}

/// Windows per reduction chunk. Chunks are summed internally in order and
/// then combined in chunk order, so the result does not depend on how many
/// threads run them.
const CHUNK: usize = 16;

fn chunked<T: Send>(
    n: usize,
    f: impl Fn(Range<usize>) -> Result<T> + Sync + Send,
) -> Result<Vec<T>> {
    let ranges: Vec<Range<usize>> = (0..n)
        .step_by(CHUNK)
        .map(|s| s..(s + CHUNK).min(n))
        .collect();
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        ranges.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        ranges.into_iter().map(f).collect()
    }
}

/// Batch-mean loss and gradient with convergence bookkeeping.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub unconverged: usize,
    pub steps: usize,
}

pub fn batch_gradient(
    theta: &ParamVector,
    windows: &[Vec<PhasePoint>],
    h: f64,
    cfg: &TrainConfig,
) -> Result<BatchGradient> {
    if windows.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let parts = chunked(windows.len(), |r| {
        let mut acc = WindowGradient {
            loss: 0.0,
            grad: vec![0.0; theta.len()],
            unconverged: 0,
            steps: 0,
        };
        for w in &windows[r] {
            let g = window_gradient(theta, w, h, cfg)?;
            acc.loss += g.loss;
            add_into(&mut acc.grad, &g.grad);
            acc.unconverged += g.unconverged;
            acc.steps += g.steps;
        }
        Ok(acc)
    })?;
    let mut out = BatchGradient {
        loss: 0.0,
        grad: vec![0.0; theta.len()],
        unconverged: 0,
        steps: 0,
    };
    for p in parts {
        out.loss += p.loss;
        add_into(&mut out.grad, &p.grad);
        out.unconverged += p.unconverged;
        out.steps += p.steps;
    }
    let inv = 1.0 / windows.len() as f64;
    out.loss *= inv;
    out.grad.iter_mut().for_each(|g| *g *= inv);
    Ok(out)
}

/// Batch-mean forward loss.
pub fn batch_loss(
    theta: &ParamVector,
    windows: &[Vec<PhasePoint>],
    h: f64,
    cfg: &TrainConfig,
) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let parts = chunked(windows.len(), |r| {
        windows[r]
            .iter()
            .try_fold(0.0, |acc, w| Ok(acc + window_loss(theta, w, h, cfg)?))
    })?;
    Ok(parts.into_iter().sum::<f64>() / windows.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub theta: ParamVector,
    /// Entry 0 is measured before any update.
    pub metrics: Vec<EpochMetrics>,
}

/// RNG streams derived from the training seed.
const BATCH_STREAM: u64 = 0;
const TRAIN_PROBE_STREAM: u64 = 1;
const VAL_PROBE_STREAM: u64 = 2;

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn probe(
    dataset: &Dataset,
    split: Split,
    cfg: &TrainConfig,
    stream: u64,
) -> Result<Vec<Vec<PhasePoint>>> {
    let mut rng = stream_rng(cfg.seed, stream);
    let mut windows = Vec::new();
    for _ in 0..cfg.probe_batches {
        windows.extend(
            sample_batch(
                dataset,
                split,
                cfg.batch_size,
                cfg.tau,
                cfg.stride,
                &mut rng,
            )?
            .windows,
        );
    }
    Ok(windows)
}

/// Network initialized from `cfg.seed` for the dataset's dimension.
pub fn initial_params(dataset: &Dataset, cfg: &TrainConfig) -> Result<ParamVector> {
    init_params(cfg.arch(dataset.manifest.d)?.widths(), cfg.seed)
}

fn aborted(epoch: usize, batch: usize, e: Error) -> Error {
    if e.is_numerical() {
        Error::TrainingAborted {
            epoch,
            batch,
            reason: e.to_string(),
        }
    } else {
        e
    }
}

/// Trains `theta` on the dataset's training split. `on_epoch` sees every
/// metrics row as soon as it is recorded.
pub fn train(
    dataset: &Dataset,
    theta: ParamVector,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_dim(
        "network input",
        dataset.manifest.state_dim(),
        theta.arch().state_dim(),
    )?;
    if dataset.split_ids(Split::Val).is_empty() {
        return Err(Error::InvalidConfig(
            "training needs a non-empty validation split".into(),
        ));
    }
    let h = cfg.stride as f64 * dataset.manifest.dt;
    let start = Instant::now();
    let train_probe = probe(dataset, Split::Train, cfg, TRAIN_PROBE_STREAM)?;
    let val_probe = probe(dataset, Split::Val, cfg, VAL_PROBE_STREAM)?;
    let mut theta = theta;
    let mut adam = Adam::new(theta.len());
    let mut sched = Plateau::new(cfg.lr0, cfg.scheduler);
    let mut rng = stream_rng(cfg.seed, BATCH_STREAM);
    let batches = cfg
        .batches_per_epoch
        .unwrap_or_else(|| dataset.manifest.n_train.div_ceil(cfg.batch_size));
    let mut metrics = Vec::with_capacity(cfg.epochs + 1);

    let measure = |theta: &ParamVector, epoch: usize, lr: f64| -> Result<EpochMetrics> {
        let train_loss =
            batch_loss(theta, &train_probe, h, cfg).map_err(|e| aborted(epoch, 0, e))?;
        let val_loss = batch_loss(theta, &val_probe, h, cfg).map_err(|e| aborted(epoch, 0, e))?;
        Ok(EpochMetrics {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    };

    let m0 = measure(&theta, 0, sched.lr())?;
    on_epoch(&m0);
    metrics.push(m0);
    for epoch in 1..=cfg.epochs {
        let lr = sched.lr();
        for b in 0..batches {
            let TrajectoryBatch { windows, .. } = sample_batch(
                dataset,
                Split::Train,
                cfg.batch_size,
                cfg.tau,
                cfg.stride,
                &mut rng,
            )?;
            let g = batch_gradient(&theta, &windows, h, cfg).map_err(|e| aborted(epoch, b, e))?;
            if !g.loss.is_finite() {
                return Err(aborted(epoch, b, Error::NonFinite("batch loss")));
            }
            if 2 * g.unconverged > g.steps {
                return Err(Error::TrainingAborted {
                    epoch,
                    batch: b,
                    reason: format!(
                        "{} of {} implicit solves did not reach tol {:e} in {} iterations",
                        g.unconverged, g.steps, cfg.fpi.tol, cfg.fpi.max_iters
                    ),
                });
            }
            adam.step(theta.values_mut(), &g.grad, lr)
                .map_err(|e| aborted(epoch, b, e))?;
        }
        let mut m = measure(&theta, epoch, lr)?;
        sched.observe(m.val_loss);
        m.wall_time_s = start.elapsed().as_secs_f64();
        on_epoch(&m);
        metrics.push(m);
    }
    Ok(TrainOutcome { theta, metrics })
}

/// First epoch after which validation loss improved by less than 1% for
/// three consecutive epochs; `None` if that never happens.
pub fn saturation_epoch(metrics: &[EpochMetrics]) -> Option<usize> {
    let mut run = 0;
    for w in metrics.windows(2) {
        let (prev, cur) = (w[0].val_loss, w[1].val_loss);
        if cur > prev * 0.99 {
            run += 1;
            if run == 3 {
                return Some(w[1].epoch);
            }
        } else {
            run = 0;
        }
    }
    None
}

/// Metrics as CSV: `epoch,train_loss,val_loss,lr,wall_time_s`.
pub fn write_metrics_csv<W: std::io::Write>(metrics: &[EpochMetrics], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for m in metrics {
        w.serialize(m)?;
    }
    if metrics.is_empty() {
        w.write_record(["epoch", "train_loss", "val_loss", "lr", "wall_time_s"])?;
    }
    w.flush()
        .map_err(|e| Error::io(std::path::Path::new("<csv>"), e))?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(input: R) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_reader(input);
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}
