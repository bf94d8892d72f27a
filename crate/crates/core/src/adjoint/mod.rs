//! Gradients of the trajectory loss with respect to the network parameters.
//!
//! [`solve_adjoint_accumulate`] runs the costate backward with implicit
//! midpoint and folds `λᵀ ∂f/∂θ` into one accumulator, so activation memory
//! does not depend on the window length. [`backprop_window`] records the
//! whole forward solve instead and is kept as a reference.

mod backprop;

pub use backprop::{backprop_through_solver, backprop_window};

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::integrators::{
    integrate, solve_fixed_point, Buf, FpiConfig, GuessSource, Method, StepReport,
};
use crate::memory::{charge, f64_bytes};
use crate::model::{hess_state, pullback, HessianBlocks, NetHamiltonian, ParamVector};
use crate::phase::{AdjointState, HamiltonianField, PhasePoint};
use crate::train::loss;

/// `∂L/∂y(t_k)` for the observed steps `k = 1..=τ`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPartials {
    per_step: Vec<AdjointState>,
}

impl LossPartials {
    pub fn new(per_step: Vec<AdjointState>) -> Result<Self> {
        if per_step.is_empty() {
            return Err(Error::InvalidConfig(
                "loss partials need at least one observed step".into(),
            ));
        }
        let dim = per_step[0].as_slice().len();
        for p in &per_step {
            check_dim("loss partial", dim, p.as_slice().len())?;
            if !p.is_finite() {
                return Err(Error::NonFinite("loss partial"));
            }
        }
        Ok(Self { per_step })
    }

    /// Only the final step carries a loss term.
    pub fn terminal_only(tau: usize, terminal: AdjointState) -> Result<Self> {
        let d = terminal.half_dim();
        let mut per_step = vec![AdjointState::zeros(d); tau.saturating_sub(1)];
        per_step.push(terminal);
        Self::new(per_step)
    }

    pub fn steps(&self) -> usize {
        self.per_step.len()
    }

    /// Partial at observed step `k` (1-based).
    pub fn at(&self, k: usize) -> &AdjointState {
        &self.per_step[k - 1]
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            per_step: self
                .per_step
                .iter()
                .map(|a| AdjointState::from_coords(a.as_slice().iter().map(|v| c * v).collect()))
                .collect(),
        }
    }
}

/// `λ(T) = 2 (y_pred(T) − y_obs(T))`.
pub fn terminal_conditions(pred: &PhasePoint, obs: &PhasePoint) -> Result<AdjointState> {
    check_dim("terminal observation", pred.dim(), obs.dim())?;
    Ok(AdjointState::from_coords(
        pred.as_slice()
            .iter()
            .zip(obs.as_slice())
            .map(|(a, b)| 2.0 * (a - b))
            .collect(),
    ))
}

/// Costate tangent from precomputed Hessian blocks:
/// `dλ_q/dt = −H_qp λ_q + H_qq λ_p`, `dλ_p/dt = −H_pp λ_q + H_pq λ_p`.
pub fn adjoint_rhs_blocks(blocks: &HessianBlocks, lambda: &AdjointState) -> Result<AdjointState> {
    check_dim("costate", 2 * blocks.half_dim(), lambda.as_slice().len())?;
    let (lq, lp) = (lambda.lambda_q(), lambda.lambda_p());
    let a = blocks.hqp.mul_vec(lq);
    let b = blocks.hqq.mul_vec(lp);
    let c = blocks.hpp.mul_vec(lq);
    let e = blocks.hpq.mul_vec(lp);
    Ok(AdjointState::from_coords(
        a.iter()
            .zip(&b)
            .map(|(a, b)| b - a)
            .chain(c.iter().zip(&e).map(|(c, e)| e - c))
            .collect(),
    ))
}

/// Right-hand side of the costate equation at `(θ, y)`; equals `−(∂f/∂y)ᵀ λ`.
pub fn adjoint_rhs(
    theta: &ParamVector,
    y: &PhasePoint,
    lambda: &AdjointState,
) -> Result<AdjointState> {
    check_dim("costate", y.dim(), lambda.as_slice().len())?;
    adjoint_rhs_blocks(&hess_state(theta, y)?, lambda)
}

/// How `∫ λᵀ ∂f/∂θ dt` is discretized over each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quadrature {
    /// `h/2` on each boundary costate, state at the step midpoint. This is
    /// the exact discrete adjoint of implicit midpoint and reproduces
    /// backpropagation through the solver.
    #[default]
    Midpoint,
    /// `h/2` on each boundary, integrand evaluated at the boundary state.
    /// Converges to the same gradient at O(h²) but does not match
    /// backpropagation exactly.
    EndpointTrapezoid,
}

/// Running parameter gradient plus the most recent integrand.
#[derive(Debug)]
pub struct GradAccumulator {
    grad: Vec<f64>,
    last_integrand: Vec<f64>,
    _held: crate::memory::Charge,
}

impl GradAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            grad: vec![0.0; len],
            last_integrand: vec![0.0; len],
            _held: charge(f64_bytes(2 * len)),
        }
    }

    pub fn len(&self) -> usize {
        self.grad.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grad.is_empty()
    }

    /// `grad += weight · integrand`; keeps `integrand` as the last one seen.
    pub fn add(&mut self, weight: f64, integrand: &[f64]) -> Result<()> {
        check_dim("gradient integrand", self.grad.len(), integrand.len())?;
        if !integrand.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("gradient integrand"));
        }
        for (g, v) in self.grad.iter_mut().zip(integrand) {
            *g += weight * v;
        }
        self.last_integrand.copy_from_slice(integrand);
        Ok(())
    }

    pub fn last_integrand(&self) -> &[f64] {
        &self.last_integrand
    }

    pub fn grad(&self) -> &[f64] {
        &self.grad
    }

    pub fn into_grad(self) -> Vec<f64> {
        self.grad
    }
}

/// Result of one backward adjoint solve.
#[derive(Clone, Debug)]
pub struct AdjointSolution {
    pub grad: Vec<f64>,
    /// `dL/dy(0)`.
    pub lambda0: AdjointState,
    pub reports: Vec<StepReport>,
}

fn add_into(a: &mut AdjointState, b: &AdjointState) {
    for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
        *x += y;
    }
}

/// One backward implicit-midpoint step of the costate with the Hessian
/// frozen at the step midpoint: `λ_n = λ_{n+1} + h·Fᵀ(λ_n + λ_{n+1})/2`.
fn costate_step(
    blocks: &HessianBlocks,
    next: &AdjointState,
    h: f64,
    cfg: &FpiConfig,
) -> Result<(AdjointState, StepReport)> {
    // With R = −Fᵀ the update is implicit midpoint for dλ/dt = R(λ) run at −h.
    let rhs = |l: &[f64]| {
        adjoint_rhs_blocks(
            blocks,
            &AdjointState::from_coords(l.iter().copied().collect()),
        )
    };
    let guess: Buf = match cfg.guess {
        GuessSource::Predictor => {
            let k1 = rhs(next.as_slice())?;
            let mid: Buf = next
                .as_slice()
                .iter()
                .zip(k1.as_slice())
                .map(|(l, k)| l - 0.5 * h * k)
                .collect();
            let k2 = rhs(&mid)?;
            next.as_slice()
                .iter()
                .zip(k2.as_slice())
                .map(|(l, k)| l - h * k)
                .collect()
        }
        GuessSource::Observation | GuessSource::PreviousState => Buf::from_slice(next.as_slice()),
    };
    let l1 = next.as_slice();
    let (sol, report) = solve_fixed_point(
        guess,
        cfg,
        |cur, out| {
            let avg: Buf = cur.iter().zip(l1).map(|(a, b)| 0.5 * (a + b)).collect();
            let r = rhs(&avg).expect("costate dimension checked");
            for ((o, l), rv) in out.iter_mut().zip(l1).zip(r.as_slice()) {
                *o = l - h * rv;
            }
        },
        &mut |_, _, _| {},
    )?;
    Ok((AdjointState::from_coords(sol.into_iter().collect()), report))
}

/// Integrates the costate from `t_τ` back to `t_0` over the stored forward
/// states, adding each step's loss partial as a jump and accumulating the
/// parameter gradient in place.
pub fn solve_adjoint_accumulate(
    theta: &ParamVector,
    states: &[PhasePoint],
    partials: &LossPartials,
    h: f64,
    cfg: &FpiConfig,
    quadrature: Quadrature,
) -> Result<AdjointSolution> {
    cfg.validate()?;
    let tau = partials.steps();
    if states.len() != tau + 1 {
        return Err(Error::InvalidConfig(format!(
            "adjoint needs {} forward checkpoints for {tau} observed steps, got {}",
            tau + 1,
            states.len()
        )));
    }
    let dim = theta.arch().state_dim();
    for s in states {
        check_dim("checkpoint", dim, s.dim())?;
    }
    check_dim("loss partial", dim, partials.at(1).as_slice().len())?;

    let mut acc = GradAccumulator::new(theta.len());
    let mut reports = Vec::with_capacity(tau);
    let mut lambda = partials.at(tau).clone();
    if quadrature == Quadrature::EndpointTrapezoid {
        let g = pullback(theta, &states[tau], lambda.as_slice())?.1;
        acc.add(0.5 * h, &g)?;
    }
    for n in (0..tau).rev() {
        let mid = states[n].midpoint(&states[n + 1]);
        let blocks = hess_state(theta, &mid)?;
        let (prev, report) = costate_step(&blocks, &lambda, h, cfg).map_err(|e| e.at_step(n))?;
        reports.push(report);
        match quadrature {
            Quadrature::Midpoint => {
                let avg = AdjointState::from_coords(
                    prev.as_slice()
                        .iter()
                        .zip(lambda.as_slice())
                        .map(|(a, b)| 0.5 * (a + b))
                        .collect(),
                );
                let g = pullback(theta, &mid, avg.as_slice())?.1;
                acc.add(h, &g)?;
            }
            Quadrature::EndpointTrapezoid => {
                // Interior boundaries are shared by two intervals; the jump
                // part of the right-hand one is added after the jump below.
                let g = pullback(theta, &states[n], prev.as_slice())?.1;
                acc.add(if n > 0 { h } else { 0.5 * h }, &g)?;
            }
        }
        lambda = prev;
        if n > 0 {
            let jump = partials.at(n);
            if !jump.is_zero() {
                add_into(&mut lambda, jump);
                if quadrature == Quadrature::EndpointTrapezoid {
                    let g = pullback(theta, &states[n], jump.as_slice())?.1;
                    acc.add(0.5 * h, &g)?;
                }
            }
        }
        if !lambda.is_finite() {
            return Err(Error::NonFinite("costate").at_step(n));
        }
    }
    reports.reverse();
    Ok(AdjointSolution {
        grad: acc.into_grad(),
        lambda0: lambda,
        reports,
    })
}

/// Loss and gradient of one observation window.
#[derive(Clone, Debug)]
pub struct WindowGradient {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub unconverged: usize,
    pub steps: usize,
}

/// Forward implicit-midpoint rollout from `obs[0]`, squared loss against
/// `obs[1..]`, then the adjoint backward solve.
pub fn adjoint_window(
    theta: &ParamVector,
    obs: &[PhasePoint],
    h: f64,
    cfg: &FpiConfig,
    quadrature: Quadrature,
) -> Result<WindowGradient> {
    if obs.len() < 2 {
        return Err(Error::InvalidConfig(
            "observation window needs at least two points".into(),
        ));
    }
    let tau = obs.len() - 1;
    let field = HamiltonianField(&NetHamiltonian(theta));
    let hints = (cfg.guess == GuessSource::Observation).then_some(obs);
    let fwd = integrate(
        &field,
        &obs[0],
        h,
        tau,
        &Method::ImplicitMidpoint,
        cfg,
        hints,
    )?;
    let states = &fwd.trajectory.points;
    let _checkpoints = charge(f64_bytes(states.len() * obs[0].dim()));
    let (value, partials) = loss(states, obs)?;
    let sol = solve_adjoint_accumulate(theta, states, &partials, h, cfg, quadrature)?;
    let unconverged = fwd.unconverged_steps() + sol.reports.iter().filter(|r| !r.converged).count();
    Ok(WindowGradient {
        loss: value,
        grad: sol.grad,
        unconverged,
        steps: 2 * tau,
    })
}

/// One parameter's gradient under the three methods. `rel_error` is the
/// largest pairwise difference divided by the largest finite-difference
/// entry, so its maximum over rows is the normwise relative error.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckRow {
    pub index: usize,
    pub adjoint: f64,
    pub backprop: f64,
    pub finite_difference: f64,
    pub rel_error: f64,
}

/// Compares adjoint, backprop and central finite differences (step `eps`)
/// of the window loss for every parameter.
pub fn grad_check(
    theta: &ParamVector,
    obs: &[PhasePoint],
    h: f64,
    cfg: &FpiConfig,
    eps: f64,
) -> Result<Vec<GradCheckRow>> {
    if !(eps > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "finite-difference step must be positive, got {eps}"
        )));
    }
    let adj = adjoint_window(theta, obs, h, cfg, Quadrature::Midpoint)?;
    let bp = backprop_window(theta, obs, h, cfg)?;
    let field_loss = |t: &ParamVector| -> Result<f64> {
        let hints = (cfg.guess == GuessSource::Observation).then_some(obs);
        let fwd = integrate(
            &HamiltonianField(&NetHamiltonian(t)),
            &obs[0],
            h,
            obs.len() - 1,
            &Method::ImplicitMidpoint,
            cfg,
            hints,
        )?;
        Ok(loss(&fwd.trajectory.points, obs)?.0)
    };
    let mut fd = Vec::with_capacity(theta.len());
    let mut probe = theta.clone();
    for k in 0..theta.len() {
        let v = theta.values()[k];
        probe.values_mut()[k] = v + eps;
        let plus = field_loss(&probe)?;
        probe.values_mut()[k] = v - eps;
        let minus = field_loss(&probe)?;
        probe.values_mut()[k] = v;
        fd.push((plus - minus) / (2.0 * eps));
    }
    let scale = fd
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    Ok((0..theta.len())
        .map(|k| {
            let (a, b, f) = (adj.grad[k], bp.grad[k], fd[k]);
            GradCheckRow {
                index: k,
                adjoint: a,
                backprop: b,
                finite_difference: f,
                rel_error: (a - b).abs().max((a - f).abs()).max((b - f).abs()) / scale,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests;
