use smallvec::SmallVec;

use super::fpi::{solve, Buf, FpiConfig, GuessSource, StepReport};
use super::tableau::PrkTableau;
use crate::error::{check_dim, Error, Result};
use crate::phase::{PhasePoint, VectorField};

fn check_step(h: f64) -> Result<()> {
    if h == 0.0 || !h.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "step size must be finite and non-zero, got {h}"
        )));
    }
    Ok(())
}

fn eval_finite(f: &impl VectorField, y: &PhasePoint) -> Result<PhasePoint> {
    let v = f.eval(y);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite("vector field"))
    }
}

/// Explicit midpoint RK2: `y + h·f(y + (h/2)·f(y))`.
pub fn rk2_predictor(f: &impl VectorField, y: &PhasePoint, h: f64) -> Result<PhasePoint> {
    check_step(h)?;
    let k1 = eval_finite(f, y)?;
    let k2 = eval_finite(f, &y.axpy(0.5 * h, &k1))?;
    Ok(y.axpy(h, &k2))
}

/// One implicit midpoint step `y' = y + h·f((y + y')/2)` solved by
/// fixed-point iteration from the configured initial guess.
pub fn implicit_midpoint_step(
    f: &impl VectorField,
    y: &PhasePoint,
    h: f64,
    cfg: &FpiConfig,
    hint: Option<&PhasePoint>,
) -> Result<(PhasePoint, StepReport)> {
    implicit_midpoint_step_observed(f, y, h, cfg, hint, &mut |_, _, _| {})
}

/// As [`implicit_midpoint_step`], calling `observer(k, iterate, residual)`
/// after every sweep.
pub fn implicit_midpoint_step_observed(
    f: &impl VectorField,
    y: &PhasePoint,
    h: f64,
    cfg: &FpiConfig,
    hint: Option<&PhasePoint>,
    observer: &mut dyn FnMut(usize, &[f64], f64),
) -> Result<(PhasePoint, StepReport)> {
    check_step(h)?;
    cfg.validate()?;
    let guess = match cfg.guess {
        GuessSource::Predictor => rk2_predictor(f, y, h)?,
        GuessSource::PreviousState => y.clone(),
        GuessSource::Observation => {
            let hint = hint.ok_or_else(|| {
                Error::InvalidConfig("observation guess requested without a hint".into())
            })?;
            check_dim("observation hint", y.dim(), hint.dim())?;
            hint.clone()
        }
    };
    let y0 = y.as_slice();
    let (sol, report) = solve(
        Buf::from_slice(guess.as_slice()),
        cfg,
        |cur, out| {
            let mid =
                PhasePoint::from_coords(y0.iter().zip(cur).map(|(a, b)| 0.5 * (a + b)).collect());
            let v = f.eval(&mid);
            for ((o, a), fv) in out.iter_mut().zip(y0).zip(v.as_slice()) {
                *o = a + h * fv;
            }
        },
        observer,
    )?;
    Ok((PhasePoint::from_coords(sol.into_iter().collect()), report))
}

/// Staggered symplectic Euler: `q' = q + h·∂H/∂p(q, p)`, then
/// `p' = p − h·∂H/∂q(q', p)`. Explicit; symplectic for separable `H`.
pub fn symplectic_euler_step(f: &impl VectorField, y: &PhasePoint, h: f64) -> Result<PhasePoint> {
    check_step(h)?;
    let d = y.half_dim();
    let v1 = eval_finite(f, y)?;
    let mut next = y.clone();
    for i in 0..d {
        next.as_mut_slice()[i] += h * v1.as_slice()[i];
    }
    let v2 = eval_finite(f, &next)?;
    for i in d..2 * d {
        next.as_mut_slice()[i] += h * v2.as_slice()[i];
    }
    Ok(next)
}

/// One step of a general partitioned Runge–Kutta scheme. Stage slopes are
/// found by fixed-point iteration starting from `f(y)` in every stage;
/// explicit tableaux converge in `s + 1` sweeps.
pub fn prk_step(
    tableau: &PrkTableau,
    f: &impl VectorField,
    y: &PhasePoint,
    h: f64,
    cfg: &FpiConfig,
) -> Result<(PhasePoint, StepReport)> {
    check_step(h)?;
    cfg.validate()?;
    tableau.validate()?;
    let s = tableau.stages();
    let d = y.half_dim();
    let (q, p) = (y.q(), y.p());
    let f0 = eval_finite(f, y)?;
    // slopes laid out [K_1..K_s | L_1..L_s], each of length d
    let mut init: Buf = SmallVec::with_capacity(2 * s * d);
    for _ in 0..s {
        init.extend_from_slice(f0.q());
    }
    for _ in 0..s {
        init.extend_from_slice(f0.p());
    }
    let (slopes, report) = solve(
        init,
        cfg,
        |cur, out| {
            let (k, l) = cur.split_at(s * d);
            for i in 0..s {
                let mut stage = PhasePoint::zeros(d);
                let st = stage.as_mut_slice();
                for c in 0..d {
                    let mut qi = q[c];
                    let mut pi = p[c];
                    for j in 0..s {
                        qi += h * tableau.a_q[i][j] * k[j * d + c];
                        pi += h * tableau.a_p[i][j] * l[j * d + c];
                    }
                    st[c] = qi;
                    st[d + c] = pi;
                }
                let v = f.eval(&stage);
                out[i * d..(i + 1) * d].copy_from_slice(v.q());
                out[s * d + i * d..s * d + (i + 1) * d].copy_from_slice(v.p());
            }
        },
        &mut |_, _, _| {},
    )?;
    let (k, l) = slopes.split_at(s * d);
    let mut next = y.clone();
    let out = next.as_mut_slice();
    for c in 0..d {
        for i in 0..s {
            out[c] += h * tableau.b_q[i] * k[i * d + c];
            out[d + c] += h * tableau.b_p[i] * l[i * d + c];
        }
    }
    if !next.is_finite() {
        return Err(Error::NonFinite("prk update"));
    }
    Ok((next, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(v: &[f64]) -> PhasePoint {
        PhasePoint::from_flat(v).unwrap()
    }

    fn sho(y: &PhasePoint) -> PhasePoint {
        pt(&[y.p()[0], -y.q()[0]])
    }

    fn zero(y: &PhasePoint) -> PhasePoint {
        PhasePoint::zeros(y.half_dim())
    }

    #[test]
    fn predictor_values() {
        let y = pt(&[0.4, -0.1]);
        assert_eq!(rk2_predictor(&zero, &y, 0.3).unwrap(), y);
        let r = rk2_predictor(&sho, &pt(&[1.0, 0.0]), 0.2).unwrap();
        assert!((r.q()[0] - 0.98).abs() < 1e-15 && (r.p()[0] + 0.2).abs() < 1e-15);
        assert!(rk2_predictor(&sho, &y, 0.0).is_err());
        let blowup =
            |_: &PhasePoint| PhasePoint::from_coords([f64::NAN, 0.0].into_iter().collect());
        assert!(matches!(
            rk2_predictor(&blowup, &y, 0.1),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn predictor_is_consistent() {
        let y = pt(&[1.0, 0.5]);
        for h in [1e-2, 1e-3, 1e-4] {
            let r = rk2_predictor(&sho, &y, h).unwrap();
            assert!(r.max_abs_diff(&y) <= 1.2 * h);
        }
    }

    #[test]
    fn implicit_midpoint_trivial_cases() {
        let cfg = FpiConfig::with_tol(1e-12);
        let y = pt(&[0.3, 0.7]);
        let (y1, rep) = implicit_midpoint_step(&zero, &y, 0.1, &cfg, None).unwrap();
        assert_eq!(y1, y);
        assert_eq!(rep.iterations_used, 1);
        assert!(rep.converged);
        let origin = pt(&[0.0, 0.0]);
        let (y1, _) = implicit_midpoint_step(&sho, &origin, 0.1, &cfg, None).unwrap();
        assert_eq!(y1, origin);
    }

    #[test]
    fn observation_guess_needs_hint() {
        let cfg = FpiConfig {
            guess: GuessSource::Observation,
            ..FpiConfig::default()
        };
        let y = pt(&[1.0, 0.0]);
        assert!(implicit_midpoint_step(&sho, &y, 0.1, &cfg, None).is_err());
        let hint = pt(&[0.99, -0.1]);
        let (y1, rep) = implicit_midpoint_step(&sho, &y, 0.1, &cfg, Some(&hint)).unwrap();
        assert!(rep.converged);
        assert!((y1.norm_sq() - 1.0).abs() < 1e-9);
        assert!(implicit_midpoint_step(&sho, &y, 0.1, &cfg, Some(&pt(&[0.0; 4]))).is_err());
    }

    #[test]
    fn implicit_midpoint_divergence_is_error() {
        let stiff = |y: &PhasePoint| y.scale(1e3).axpy(0.0, y);
        let cfg = FpiConfig {
            guess: GuessSource::PreviousState,
            max_iters: 500,
            ..FpiConfig::default()
        };
        let r = implicit_midpoint_step(
            &|y: &PhasePoint| stiff(y).scale(1e3),
            &pt(&[1.0, 1.0]),
            1.0,
            &cfg,
            None,
        );
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }

    #[test]
    fn symplectic_euler_values() {
        let y = pt(&[1.0, 0.0]);
        let y1 = symplectic_euler_step(&sho, &y, 0.1).unwrap();
        assert_eq!(y1.as_slice(), &[1.0, -0.1]);
        let y = pt(&[0.2, -0.4]);
        assert_eq!(symplectic_euler_step(&zero, &y, 0.1).unwrap(), y);
    }

    #[test]
    fn symplectic_euler_round_trip_is_second_order() {
        for h in [0.1, 0.05] {
            let y = pt(&[1.0, 0.0]);
            let back =
                symplectic_euler_step(&sho, &symplectic_euler_step(&sho, &y, h).unwrap(), -h)
                    .unwrap();
            // forward then backward leaves (h², h³)
            assert!((back.q()[0] - 1.0 - h * h).abs() < 1e-14);
            assert!((back.p()[0] - h * h * h).abs() < 1e-14);
        }
    }

    #[test]
    fn prk_midpoint_matches_implicit_midpoint() {
        let cfg = FpiConfig::with_tol(1e-14);
        let y = pt(&[0.8, 0.3]);
        let (a, _) = prk_step(&PrkTableau::implicit_midpoint(), &sho, &y, 0.1, &cfg).unwrap();
        let (b, _) = implicit_midpoint_step(&sho, &y, 0.1, &cfg, None).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-13);
    }

    #[test]
    fn prk_explicit_euler_is_euler() {
        let cfg = FpiConfig::with_tol(1e-14);
        let y = pt(&[0.8, 0.3]);
        let (a, rep) = prk_step(&PrkTableau::explicit_euler(), &sho, &y, 0.1, &cfg).unwrap();
        assert_eq!(a, y.axpy(0.1, &sho(&y)));
        assert!(rep.iterations_used <= 2);
    }
}
