use super::WindowGradient;
use crate::error::{check_dim, Error, Result};
use crate::integrators::{solve_fixed_point, Buf, FpiConfig, GuessSource, StepReport};
use crate::memory::{charge, f64_bytes};
use crate::model::engine::Tape;
use crate::model::{field_taped, pullback_taped, ParamVector};
use crate::phase::PhasePoint;
use crate::train::loss;

/// Everything the reverse pass needs from one forward step.
struct StepRecord {
    /// Tapes of the RK2 predictor at `y_n` and at its half step.
    predictor: Option<(Tape<f64>, Tape<f64>)>,
    /// Tape of the field at each fixed-point midpoint, in iteration order.
    iterates: Vec<Tape<f64>>,
}

fn taped_finite(theta: &ParamVector, y: &PhasePoint) -> Result<(Tape<f64>, PhasePoint)> {
    let (tape, v) = field_taped(theta, y);
    if v.is_finite() {
        Ok((tape, v))
    } else {
        Err(Error::NonFinite("vector field"))
    }
}

fn forward_step(
    theta: &ParamVector,
    y: &PhasePoint,
    h: f64,
    cfg: &FpiConfig,
    hint: Option<&PhasePoint>,
) -> Result<(PhasePoint, StepReport, StepRecord)> {
    let (guess, predictor) = match cfg.guess {
        GuessSource::Predictor => {
            let (t1, k1) = taped_finite(theta, y)?;
            let ymid = y.axpy(0.5 * h, &k1);
            let (t2, k2) = taped_finite(theta, &ymid)?;
            (y.axpy(h, &k2), Some((t1, t2)))
        }
        GuessSource::PreviousState => (y.clone(), None),
        GuessSource::Observation => {
            let hint = hint.ok_or_else(|| {
                Error::InvalidConfig("observation guess requested without a hint".into())
            })?;
            check_dim("observation hint", y.dim(), hint.dim())?;
            (hint.clone(), None)
        }
    };
    let mut iterates = Vec::new();
    let y0 = y.as_slice();
    let (sol, report) = solve_fixed_point(
        Buf::from_slice(guess.as_slice()),
        cfg,
        |cur, out| {
            let mid =
                PhasePoint::from_coords(y0.iter().zip(cur).map(|(a, b)| 0.5 * (a + b)).collect());
            let (tape, v) = field_taped(theta, &mid);
            for ((o, a), fv) in out.iter_mut().zip(y0).zip(v.as_slice()) {
                *o = a + h * fv;
            }
            iterates.push(tape);
        },
        &mut |_, _, _| {},
    )?;
    Ok((
        PhasePoint::from_coords(sol.into_iter().collect()),
        report,
        StepRecord {
            predictor,
            iterates,
        },
    ))
}

fn add_scaled(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

/// Reverse of one forward step: takes `dL/dy_{n+1}`, adds the parameter
/// contribution to `grad`, returns the step's contribution to `dL/dy_n`.
fn reverse_step(
    theta: &ParamVector,
    rec: &StepRecord,
    guess: GuessSource,
    h: f64,
    ybar_next: &[f64],
    grad: &mut [f64],
) -> Buf {
    let mut ybar = Buf::from_elem(0.0, ybar_next.len());
    let mut c = Buf::from_slice(ybar_next);
    // y^(k) = y_n + h f((y_n + y^(k-1))/2)
    for tape in rec.iterates.iter().rev() {
        add_scaled(&mut ybar, 1.0, &c);
        let (s, p) = pullback_taped(theta, tape, &c);
        add_scaled(grad, h, &p);
        add_scaled(&mut ybar, 0.5 * h, &s);
        c = s.iter().map(|v| 0.5 * h * v).collect();
    }
    match guess {
        GuessSource::Predictor => {
            // y^(0) = y_n + h f(y_n + (h/2) f(y_n))
            let (t1, t2) = rec.predictor.as_ref().expect("predictor tapes recorded");
            add_scaled(&mut ybar, 1.0, &c);
            let v2: Buf = c.iter().map(|v| h * v).collect();
            let (mid_bar, p2) = pullback_taped(theta, t2, &v2);
            add_scaled(grad, 1.0, &p2);
            add_scaled(&mut ybar, 1.0, &mid_bar);
            let v1: Buf = mid_bar.iter().map(|v| 0.5 * h * v).collect();
            let (s1, p1) = pullback_taped(theta, t1, &v1);
            add_scaled(grad, 1.0, &p1);
            add_scaled(&mut ybar, 1.0, &s1);
        }
        GuessSource::PreviousState => add_scaled(&mut ybar, 1.0, &c),
        GuessSource::Observation => {}
    }
    ybar
}

/// Gradient of one window by recording the complete forward solve,
/// predictor and every fixed-point iterate included, and reversing it.
pub fn backprop_window(
    theta: &ParamVector,
    obs: &[PhasePoint],
    h: f64,
    cfg: &FpiConfig,
) -> Result<WindowGradient> {
    cfg.validate()?;
    if obs.len() < 2 {
        return Err(Error::InvalidConfig(
            "observation window needs at least two points".into(),
        ));
    }
    if h == 0.0 || !h.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "step size must be finite and non-zero, got {h}"
        )));
    }
    let tau = obs.len() - 1;
    let dim = theta.arch().state_dim();
    for o in obs {
        check_dim("observation", dim, o.dim())?;
    }
    let mut states = Vec::with_capacity(tau + 1);
    let mut records = Vec::with_capacity(tau);
    let mut unconverged = 0;
    states.push(obs[0].clone());
    let _states_held = charge(f64_bytes((tau + 1) * dim));
    for n in 0..tau {
        let (next, report, rec) =
            forward_step(theta, &states[n], h, cfg, Some(&obs[n + 1])).map_err(|e| e.at_step(n))?;
        if !report.converged {
            unconverged += 1;
        }
        states.push(next);
        records.push(rec);
    }
    let (value, partials) = loss(&states, obs)?;
    let mut grad = vec![0.0; theta.len()];
    let _grad_held = charge(f64_bytes(theta.len()));
    let mut ybar = Buf::from_slice(partials.at(tau).as_slice());
    for n in (0..tau).rev() {
        ybar = reverse_step(theta, &records[n], cfg.guess, h, &ybar, &mut grad);
        if n > 0 {
            add_scaled(&mut ybar, 1.0, partials.at(n).as_slice());
        }
    }
    if !grad.iter().all(|g| g.is_finite()) {
        return Err(Error::NonFinite("backprop gradient"));
    }
    Ok(WindowGradient {
        loss: value,
        grad,
        unconverged,
        steps: tau,
    })
}

/// Mean loss and mean gradient over a batch of windows, processed in order.
pub fn backprop_through_solver(
    theta: &ParamVector,
    windows: &[Vec<PhasePoint>],
    h: f64,
    cfg: &FpiConfig,
) -> Result<(f64, Vec<f64>)> {
    if windows.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; theta.len()];
    for w in windows {
        let wg = backprop_window(theta, w, h, cfg)?;
        total += wg.loss;
        add_scaled(&mut grad, 1.0, &wg.grad);
    }
    let inv = 1.0 / windows.len() as f64;
    grad.iter_mut().for_each(|g| *g *= inv);
    Ok((total * inv, grad))
}
