use serde::{Deserialize, Serialize};
use smallvec::SmallVec;

use crate::error::{Error, Result};

/// Where the fixed-point iteration starts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuessSource {
    /// Explicit RK2 estimate of the next state.
    #[default]
    Predictor,
    /// A supplied hint, typically the noisy observation at the target time.
    Observation,
    /// The current state.
    PreviousState,
}

/// Fixed-point iteration settings.
///
/// With `early_exit` the iteration stops once the infinity-norm change
/// between successive iterates drops to `tol`; without it exactly
/// `max_iters` sweeps run. Contraction needs `h·L < 2`, `L` bounding the
/// Hessian norm of `H`; step sizes are never adapted.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpiConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub guess: GuessSource,
    pub early_exit: bool,
}

impl Default for FpiConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-10,
            guess: GuessSource::Predictor,
            early_exit: true,
        }
    }
}

impl FpiConfig {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidConfig("fpi max_iters must be >= 1".into()));
        }
        if !(self.tol > 0.0) || !self.tol.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "fpi tol must be positive, got {}",
                self.tol
            )));
        }
        Ok(())
    }
}

/// Diagnostics of one implicit solve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub iterations_used: usize,
    pub final_residual: f64,
    pub converged: bool,
}

impl StepReport {
    pub(crate) fn explicit() -> Self {
        Self {
            iterations_used: 0,
            final_residual: 0.0,
            converged: true,
        }
    }
}

pub(crate) type Buf = SmallVec<[f64; 8]>;

/// Runs `x ← map(x)` from `x0`. Non-convergence is reported, not raised;
/// a non-finite iterate is an error.
pub(crate) fn solve(
    x0: Buf,
    cfg: &FpiConfig,
    mut map: impl FnMut(&[f64], &mut [f64]),
    observer: &mut dyn FnMut(usize, &[f64], f64),
) -> Result<(Buf, StepReport)> {
    let mut cur = x0;
    let mut next = cur.clone();
    let mut residual = f64::INFINITY;
    let mut iterations_used = 0;
    for k in 1..=cfg.max_iters {
        map(&cur, &mut next);
        if !next.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("fixed-point iterate (step too large?)"));
        }
        residual = cur
            .iter()
            .zip(&next)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()));
        std::mem::swap(&mut cur, &mut next);
        iterations_used = k;
        observer(k, &cur, residual);
        if cfg.early_exit && residual <= cfg.tol {
            break;
        }
    }
    Ok((
        cur,
        StepReport {
            iterations_used,
            final_residual: residual,
            converged: residual <= cfg.tol,
        },
    ))
}
