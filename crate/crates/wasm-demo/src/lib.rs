//! Browser bindings: roll out a benchmark system, check a tableau, trace a
//! fixed-point solve. Results cross the boundary as flat `f64` arrays or
//! JSON strings.

use shnn::integrators::{
    check_symplectic_tableau, implicit_midpoint_step_observed, integrate, tableau_by_name,
    FpiConfig, GuessSource, Method, PrkTableau,
};
use shnn::systems::{by_name, SystemSpec};
use shnn::{Hamiltonian, HamiltonianField, PhasePoint};
use wasm_bindgen::prelude::*;

const MAX_STEPS: usize = 200_000;

fn system(name: &str, alpha: f64) -> Result<SystemSpec, String> {
    let mut params = std::collections::BTreeMap::new();
    if name == "coupled_ho" {
        params.insert("alpha".to_string(), alpha);
    }
    by_name(name, &params).map_err(|e| e.to_string())
}

fn state(spec: &SystemSpec, y0: &[f64]) -> Result<PhasePoint, String> {
    if y0.len() != 2 * spec.half_dim() {
        return Err(format!(
            "{} needs {} initial values, got {}",
            spec.name,
            2 * spec.half_dim(),
            y0.len()
        ));
    }
    PhasePoint::from_flat(y0).map_err(|e| e.to_string())
}

/// Rows of `[q.., p.., H]`, one per point including `y0`.
pub fn simulate_rows(
    name: &str,
    alpha: f64,
    method: &str,
    y0: &[f64],
    h: f64,
    steps: usize,
) -> Result<Vec<f64>, String> {
    if steps == 0 || steps > MAX_STEPS {
        return Err(format!("steps must be in 1..={MAX_STEPS}"));
    }
    let spec = system(name, alpha)?;
    let method = Method::from_name(method).map_err(|e| e.to_string())?;
    let y0 = state(&spec, y0)?;
    let run = integrate(
        &HamiltonianField(&spec),
        &y0,
        h,
        steps,
        &method,
        &FpiConfig::with_tol(1e-12),
        None,
    )
    .map_err(|e| e.to_string())?;
    let mut out = Vec::with_capacity(run.trajectory.points.len() * (y0.dim() + 1));
    for p in &run.trajectory.points {
        out.extend_from_slice(p.as_slice());
        out.push(spec.energy(p));
    }
    Ok(out)
}

pub fn tableau_source(name: &str) -> Result<String, String> {
    let t = tableau_by_name(name).map_err(|e| e.to_string())?;
    serde_json::to_string_pretty(&t).map_err(|e| e.to_string())
}

pub fn tableau_check(json: &str) -> Result<String, String> {
    let t: PrkTableau = serde_json::from_str(json).map_err(|e| e.to_string())?;
    let report = check_symplectic_tableau(&t).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}

/// Infinity-norm differences between successive iterates of one implicit
/// midpoint solve.
pub fn fpi_residuals(
    name: &str,
    alpha: f64,
    y0: &[f64],
    h: f64,
    guess: &str,
) -> Result<Vec<f64>, String> {
    let spec = system(name, alpha)?;
    let y0 = state(&spec, y0)?;
    let guess = match guess {
        "predictor" => GuessSource::Predictor,
        "previous_state" => GuessSource::PreviousState,
        other => return Err(format!("unknown guess `{other}`")),
    };
    let cfg = FpiConfig {
        max_iters: 60,
        tol: 1e-15,
        guess,
        early_exit: true,
    };
    let mut residuals = Vec::new();
    implicit_midpoint_step_observed(
        &HamiltonianField(&spec),
        &y0,
        h,
        &cfg,
        None,
        &mut |_, _, r| residuals.push(r),
    )
    .map_err(|e| e.to_string())?;
    Ok(residuals)
}

#[wasm_bindgen]
pub fn simulate(
    system: &str,
    alpha: f64,
    method: &str,
    y0: Vec<f64>,
    h: f64,
    steps: usize,
) -> Result<Vec<f64>, JsError> {
    simulate_rows(system, alpha, method, &y0, h, steps).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn tableau_json(name: &str) -> Result<String, JsError> {
    tableau_source(name).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn tableau_report(json: &str) -> Result<String, JsError> {
    tableau_check(json).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn fpi_trace(
    system: &str,
    alpha: f64,
    y0: Vec<f64>,
    h: f64,
    guess: &str,
) -> Result<Vec<f64>, JsError> {
    fpi_residuals(system, alpha, &y0, h, guess).map_err(|e| JsError::new(&e))
}
