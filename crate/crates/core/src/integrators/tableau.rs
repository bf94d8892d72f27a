//! Partitioned Runge–Kutta coefficient sets and the symplecticity test.
//!
//! The q-partition uses `(a_q, b_q, c_q)`, the p-partition `(a_p, b_p, c_p)`.
//! A PRK scheme applied to an autonomous Hamiltonian is symplectic when
//! `b_q = b_p` and `b_i·A_ij + B_j·a_ji − b_i·B_j = 0` for all stage pairs,
//! with lowercase letters for the q-partition and capitals for the
//! p-partition. Equal nodes `c_q = c_p` are additionally needed once time
//! enters the Hamiltonian explicitly; that residual is reported but does not
//! decide the verdict, since every system here is autonomous.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TABLEAU_NAMES: [&str; 4] = [
    "implicit_midpoint",
    "symplectic_euler",
    "gauss2",
    "explicit_euler",
];

const SYMPLECTIC_TOL: f64 = 1e-12;
const CONSISTENCY_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrkTableau {
    pub name: String,
    pub a_q: Vec<Vec<f64>>,
    pub b_q: Vec<f64>,
    pub c_q: Vec<f64>,
    pub a_p: Vec<Vec<f64>>,
    pub b_p: Vec<f64>,
    pub c_p: Vec<f64>,
}

/// Residuals of the three families of symplecticity conditions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymplecticReport {
    pub symplectic: bool,
    /// `max |b_i − B_i|`
    pub weights: f64,
    /// `max |c_i − C_i|`, relevant for time-dependent Hamiltonians only.
    pub nodes: f64,
    /// `max |b_i A_ij + B_j a_ji − b_i B_j|`
    pub coupling: f64,
    /// Largest of the weight and coupling residuals.
    pub max_violation: f64,
}

impl PrkTableau {
    pub fn stages(&self) -> usize {
        self.b_q.len()
    }

    fn check_dims(&self) -> Result<()> {
        let s = self.b_q.len();
        if s == 0 {
            return Err(Error::InvalidConfig(format!(
                "tableau `{}` has no stages",
                self.name
            )));
        }
        let square = |m: &Vec<Vec<f64>>| m.len() == s && m.iter().all(|r| r.len() == s);
        let ok = square(&self.a_q)
            && square(&self.a_p)
            && self.c_q.len() == s
            && self.b_p.len() == s
            && self.c_p.len() == s;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!(
                "tableau `{}` arrays disagree on the stage count {s}",
                self.name
            )))
        }
    }

    /// Checks array shapes and row-sum consistency `c_i = Σ_j a_ij`.
    pub fn validate(&self) -> Result<()> {
        self.check_dims()?;
        for (a, c, part) in [(&self.a_q, &self.c_q, "q"), (&self.a_p, &self.c_p, "p")] {
            for (row, &ci) in a.iter().zip(c) {
                let sum: f64 = row.iter().sum();
                if (sum - ci).abs() > CONSISTENCY_TOL {
                    return Err(Error::InvalidConfig(format!(
                        "tableau `{}`: {part}-partition node {ci} differs from row sum {sum}",
                        self.name
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn is_symplectic(&self) -> bool {
        check_symplectic_tableau(self).is_ok_and(|r| r.symplectic)
    }

    /// True when no stage depends on itself or a later stage.
    pub fn is_explicit(&self) -> bool {
        let strictly_lower = |m: &Vec<Vec<f64>>| {
            m.iter()
                .enumerate()
                .all(|(i, r)| r[i..].iter().all(|&v| v == 0.0))
        };
        strictly_lower(&self.a_q) && strictly_lower(&self.a_p)
    }

    /// Same coefficients on both partitions.
    fn uniform(name: &str, a: Vec<Vec<f64>>, b: Vec<f64>) -> Self {
        let c: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        Self {
            name: name.into(),
            a_q: a.clone(),
            b_q: b.clone(),
            c_q: c.clone(),
            a_p: a,
            b_p: b,
            c_p: c,
        }
    }

    pub fn implicit_midpoint() -> Self {
        Self::uniform("implicit_midpoint", vec![vec![0.5]], vec![1.0])
    }

    /// Explicit in q, implicit in p: `p' = p − h ∂H/∂q(q, p')`,
    /// `q' = q + h ∂H/∂p(q, p')`.
    pub fn symplectic_euler() -> Self {
        Self {
            name: "symplectic_euler".into(),
            a_q: vec![vec![0.0]],
            b_q: vec![1.0],
            c_q: vec![0.0],
            a_p: vec![vec![1.0]],
            b_p: vec![1.0],
            c_p: vec![1.0],
        }
    }

    /// Two-stage Gauss–Legendre collocation, order 4.
    pub fn gauss2() -> Self {
        let r = 3f64.sqrt() / 6.0;
        Self::uniform(
            "gauss2",
            vec![vec![0.25, 0.25 - r], vec![0.25 + r, 0.25]],
            vec![0.5, 0.5],
        )
    }

    pub fn explicit_euler() -> Self {
        Self::uniform("explicit_euler", vec![vec![0.0]], vec![1.0])
    }
}

/// Registry lookup.
pub fn tableau_by_name(name: &str) -> Result<PrkTableau> {
    match name {
        "implicit_midpoint" => Ok(PrkTableau::implicit_midpoint()),
        "symplectic_euler" => Ok(PrkTableau::symplectic_euler()),
        "gauss2" => Ok(PrkTableau::gauss2()),
        "explicit_euler" => Ok(PrkTableau::explicit_euler()),
        _ => Err(Error::UnknownName {
            kind: "tableau",
            name: name.into(),
        }),
    }
}

pub fn check_symplectic_tableau(t: &PrkTableau) -> Result<SymplecticReport> {
    t.check_dims()?;
    let s = t.stages();
    let max_diff = |x: &[f64], y: &[f64]| {
        x.iter()
            .zip(y)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    };
    let weights = max_diff(&t.b_q, &t.b_p);
    let nodes = max_diff(&t.c_q, &t.c_p);
    let mut coupling = 0.0f64;
    for i in 0..s {
        for j in 0..s {
            let r = t.b_q[i] * t.a_p[i][j] + t.b_p[j] * t.a_q[j][i] - t.b_q[i] * t.b_p[j];
            coupling = coupling.max(r.abs());
        }
    }
    let max_violation = weights.max(coupling);
    Ok(SymplecticReport {
        symplectic: max_violation <= SYMPLECTIC_TOL,
        weights,
        nodes,
        coupling,
        max_violation,
    })
}
