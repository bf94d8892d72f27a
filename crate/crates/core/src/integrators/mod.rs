//! Symplectic one-step methods and trajectory integration.

mod fpi;
mod step;
mod tableau;

use std::io::Write;

pub(crate) use fpi::{solve as solve_fixed_point, Buf};
pub use fpi::{FpiConfig, GuessSource, StepReport};
pub use step::{
    implicit_midpoint_step, implicit_midpoint_step_observed, prk_step, rk2_predictor,
    symplectic_euler_step,
};
pub use tableau::{
    check_symplectic_tableau, tableau_by_name, PrkTableau, SymplecticReport, TABLEAU_NAMES,
};

use crate::error::{check_dim, Error, Result};
use crate::phase::{PhasePoint, VectorField};

/// Fixed-point tolerance of the reference solver.
pub const REFERENCE_TOL: f64 = 1e-13;

#[derive(Clone, Debug, PartialEq)]
pub enum Method {
    /// RK2 predictor (or other configured guess) + fixed-point corrector.
    ImplicitMidpoint,
    /// Staggered explicit update; symplectic for separable `H` only.
    SymplecticEuler,
    /// Explicit midpoint RK2, not symplectic.
    Rk2,
    Prk(PrkTableau),
}

pub const METHOD_NAMES: [&str; 4] = ["implicit_midpoint", "symplectic_euler", "rk2", "gauss2"];

impl Method {
    /// `implicit_midpoint`, `symplectic_euler`, `rk2`, `gauss2`, or
    /// `prk:<tableau>` for any registry tableau.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "implicit_midpoint" => Ok(Method::ImplicitMidpoint),
            "symplectic_euler" => Ok(Method::SymplecticEuler),
            "rk2" => Ok(Method::Rk2),
            "gauss2" => Ok(Method::Prk(PrkTableau::gauss2())),
            _ => match name.strip_prefix("prk:") {
                Some(t) => Ok(Method::Prk(tableau_by_name(t)?)),
                None => Err(Error::UnknownName {
                    kind: "method",
                    name: name.into(),
                }),
            },
        }
    }

    pub fn name(&self) -> String {
        match self {
            Method::ImplicitMidpoint => "implicit_midpoint".into(),
            Method::SymplecticEuler => "symplectic_euler".into(),
            Method::Rk2 => "rk2".into(),
            Method::Prk(t) if t.name == "gauss2" => "gauss2".into(),
            Method::Prk(t) => format!("prk:{}", t.name),
        }
    }

    /// Symplectic for every Hamiltonian (the staggered Euler update is not).
    pub fn is_symplectic(&self) -> bool {
        match self {
            Method::ImplicitMidpoint => true,
            Method::SymplecticEuler | Method::Rk2 => false,
            Method::Prk(t) => t.is_symplectic(),
        }
    }

    pub fn step(
        &self,
        f: &impl VectorField,
        y: &PhasePoint,
        h: f64,
        cfg: &FpiConfig,
        hint: Option<&PhasePoint>,
    ) -> Result<(PhasePoint, StepReport)> {
        match self {
            Method::ImplicitMidpoint => implicit_midpoint_step(f, y, h, cfg, hint),
            Method::SymplecticEuler => {
                Ok((symplectic_euler_step(f, y, h)?, StepReport::explicit()))
            }
            Method::Rk2 => Ok((rk2_predictor(f, y, h)?, StepReport::explicit())),
            Method::Prk(t) => prk_step(t, f, y, h, cfg),
        }
    }
}

/// States at `t_0 + i·h`, `i = 0..=n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub h: f64,
    pub points: Vec<PhasePoint>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.points.len().saturating_sub(1)
    }

    pub fn last(&self) -> &PhasePoint {
        self.points.last().expect("trajectory holds at least y0")
    }

    /// CSV with header `t,q1..qd,p1..pd`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let d = self.points.first().map_or(0, |p| p.half_dim());
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["t".to_string()];
        header.extend((1..=d).map(|i| format!("q{i}")));
        header.extend((1..=d).map(|i| format!("p{i}")));
        w.write_record(&header)?;
        for (i, y) in self.points.iter().enumerate() {
            let mut row = vec![format!("{}", i as f64 * self.h)];
            row.extend(y.as_slice().iter().map(|v| format!("{v:e}")));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Integration {
    pub trajectory: Trajectory,
    pub reports: Vec<StepReport>,
}

impl Integration {
    pub fn unconverged_steps(&self) -> usize {
        self.reports.iter().filter(|r| !r.converged).count()
    }
}

/// Integrates `n ≥ 1` steps. With [`GuessSource::Observation`], `hints[i]`
/// seeds the step that produces point `i` (so `hints` must hold `n + 1`
/// points aligned with the trajectory).
pub fn integrate(
    f: &impl VectorField,
    y0: &PhasePoint,
    h: f64,
    n: usize,
    method: &Method,
    cfg: &FpiConfig,
    hints: Option<&[PhasePoint]>,
) -> Result<Integration> {
    if n == 0 {
        return Err(Error::InvalidConfig(
            "integrate needs at least one step".into(),
        ));
    }
    if let Some(hints) = hints {
        check_dim("observation hints", n + 1, hints.len())?;
    }
    let mut points = Vec::with_capacity(n + 1);
    let mut reports = Vec::with_capacity(n);
    points.push(y0.clone());
    for i in 0..n {
        let hint = hints.map(|hs| &hs[i + 1]);
        let (next, rep) = method
            .step(f, &points[i], h, cfg, hint)
            .map_err(|e| e.at_step(i))?;
        points.push(next);
        reports.push(rep);
    }
    Ok(Integration {
        trajectory: Trajectory { h, points },
        reports,
    })
}

/// Two-stage Gauss–Legendre (order 4, symplectic) at fixed-point tolerance
/// [`REFERENCE_TOL`]; used to generate ground-truth data.
pub fn reference_integrate(
    f: &impl VectorField,
    y0: &PhasePoint,
    h: f64,
    n: usize,
) -> Result<Trajectory> {
    let cfg = FpiConfig {
        max_iters: 100,
        tol: REFERENCE_TOL,
        ..FpiConfig::default()
    };
    Ok(integrate(f, y0, h, n, &Method::Prk(PrkTableau::gauss2()), &cfg, None)?.trajectory)
}
