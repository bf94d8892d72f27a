//! Closed-form benchmark Hamiltonians.
//!
//! | name           | H                                               | d |
//! |----------------|-------------------------------------------------|---|
//! | `double_well`  | p²/2 + q⁴/4 − q²/2                              | 1 |
//! | `coupled_ho`   | p²/2 + q²/2 + α·p·q                             | 1 |
//! | `henon_heiles` | (p_x²+p_y²)/2 + (q_x²+q_y²)/2 + q_x²q_y − q_y³/3 | 2 |
//!
//! Hénon–Heiles states are ordered `(q_x, q_y, p_x, p_y)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phase::{Hamiltonian, PhasePoint, StateGradient};

pub const SYSTEM_NAMES: [&str; 3] = ["double_well", "coupled_ho", "henon_heiles"];

/// Default coupling of the coupled oscillator.
pub const DEFAULT_ALPHA: f64 = 0.5;

/// Escape energy of the Hénon–Heiles potential.
pub const HENON_HEILES_ESCAPE_ENERGY: f64 = 1.0 / 6.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SystemKind {
    DoubleWell,
    CoupledHo { alpha: f64 },
    HenonHeiles,
}

/// A benchmark system: Hamiltonian, vector field and sampling domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SystemSpec {
    pub name: String,
    pub kind: SystemKind,
    /// Closed interval per coordinate, ordered like a [`PhasePoint`].
    pub domain: Vec<(f64, f64)>,
    pub params: BTreeMap<String, f64>,
    /// Initial conditions are rejected at or above this energy.
    pub energy_cap: Option<f64>,
}

impl SystemSpec {
    pub fn half_dim(&self) -> usize {
        match self.kind {
            SystemKind::DoubleWell | SystemKind::CoupledHo { .. } => 1,
            SystemKind::HenonHeiles => 2,
        }
    }

    pub fn true_h(&self, y: &PhasePoint) -> f64 {
        self.energy(y)
    }

    pub fn true_dynamics(&self, y: &PhasePoint) -> PhasePoint {
        self.field(y)
    }

    /// Separable systems `H = T(p) + V(q)`; the staggered symplectic Euler
    /// update is symplectic only for these.
    pub fn is_separable(&self) -> bool {
        match self.kind {
            SystemKind::CoupledHo { alpha } => alpha == 0.0,
            _ => true,
        }
    }

    pub fn with_domain(mut self, domain: Vec<(f64, f64)>) -> Result<Self> {
        if domain.len() != 2 * self.half_dim() {
            return Err(Error::DimensionMismatch {
                what: "system domain",
                expected: 2 * self.half_dim(),
                got: domain.len(),
            });
        }
        self.domain = domain;
        Ok(self)
    }
}

impl Hamiltonian for SystemSpec {
    fn half_dim(&self) -> usize {
        SystemSpec::half_dim(self)
    }

    fn energy(&self, y: &PhasePoint) -> f64 {
        let s = y.as_slice();
        match self.kind {
            SystemKind::DoubleWell => {
                let (q, p) = (s[0], s[1]);
                0.5 * p * p + 0.25 * q.powi(4) - 0.5 * q * q
            }
            SystemKind::CoupledHo { alpha } => {
                let (q, p) = (s[0], s[1]);
                0.5 * p * p + 0.5 * q * q + alpha * p * q
            }
            SystemKind::HenonHeiles => {
                let (qx, qy, px, py) = (s[0], s[1], s[2], s[3]);
                0.5 * (px * px + py * py) + 0.5 * (qx * qx + qy * qy) + qx * qx * qy
                    - qy.powi(3) / 3.0
            }
        }
    }

    fn gradient(&self, y: &PhasePoint) -> StateGradient {
        let s = y.as_slice();
        let (dq, dp): (Vec<f64>, Vec<f64>) = match self.kind {
            SystemKind::DoubleWell => (vec![s[0].powi(3) - s[0]], vec![s[1]]),
            SystemKind::CoupledHo { alpha } => {
                (vec![s[0] + alpha * s[1]], vec![s[1] + alpha * s[0]])
            }
            SystemKind::HenonHeiles => {
                let (qx, qy, px, py) = (s[0], s[1], s[2], s[3]);
                (
                    vec![qx + 2.0 * qx * qy, qy + qx * qx - qy * qy],
                    vec![px, py],
                )
            }
        };
        StateGradient {
            dq: dq.into_iter().collect(),
            dp: dp.into_iter().collect(),
        }
    }
}

pub fn double_well() -> SystemSpec {
    SystemSpec {
        name: "double_well".into(),
        kind: SystemKind::DoubleWell,
        domain: vec![(-1.0, 1.0); 2],
        params: BTreeMap::new(),
        energy_cap: None,
    }
}

/// `|α| < 1` keeps orbits bounded; `|α| = 1` is accepted but degenerate.
pub fn coupled_ho(alpha: f64) -> Result<SystemSpec> {
    if !alpha.is_finite() || alpha.abs() > 1.0 {
        return Err(Error::InvalidConfig(format!(
            "coupled oscillator needs |alpha| <= 1, got {alpha}"
        )));
    }
    Ok(SystemSpec {
        name: "coupled_ho".into(),
        kind: SystemKind::CoupledHo { alpha },
        domain: vec![(-1.0, 1.0); 2],
        params: BTreeMap::from([("alpha".to_string(), alpha)]),
        energy_cap: None,
    })
}

pub fn henon_heiles() -> SystemSpec {
    SystemSpec {
        name: "henon_heiles".into(),
        kind: SystemKind::HenonHeiles,
        domain: vec![(-1.0, 1.0); 4],
        params: BTreeMap::new(),
        energy_cap: Some(HENON_HEILES_ESCAPE_ENERGY),
    }
}

/// Serializable reference to a registry system plus parameter overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemRef {
    pub name: String,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl SystemRef {
    pub fn named(name: &str) -> Self {
        Self {
            name: name.into(),
            params: BTreeMap::new(),
        }
    }

    pub fn with_param(mut self, key: &str, value: f64) -> Self {
        self.params.insert(key.into(), value);
        self
    }

    pub fn build(&self) -> Result<SystemSpec> {
        by_name(&self.name, &self.params)
    }
}

impl From<&SystemSpec> for SystemRef {
    fn from(spec: &SystemSpec) -> Self {
        Self {
            name: spec.name.clone(),
            params: spec.params.clone(),
        }
    }
}

/// Registry lookup. Recognized parameters: `alpha` (coupled oscillator).
pub fn by_name(name: &str, params: &BTreeMap<String, f64>) -> Result<SystemSpec> {
    let allowed: &[&str] = match name {
        "coupled_ho" => &["alpha"],
        "double_well" | "henon_heiles" => &[],
        _ => {
            return Err(Error::UnknownName {
                kind: "system",
                name: name.into(),
            })
        }
    };
    if let Some(key) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(Error::InvalidConfig(format!(
            "system `{name}` has no parameter `{key}`"
        )));
    }
    match name {
        "double_well" => Ok(double_well()),
        "coupled_ho" => coupled_ho(params.get("alpha").copied().unwrap_or(DEFAULT_ALPHA)),
        _ => Ok(henon_heiles()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(v: &[f64]) -> PhasePoint {
        PhasePoint::from_flat(v).unwrap()
    }

    #[test]
    fn double_well_values() {
        let s = double_well();
        assert_eq!(s.true_h(&pt(&[0.0, 0.0])), 0.0);
        assert_eq!(s.true_dynamics(&pt(&[0.0, 0.0])).as_slice(), &[0.0, 0.0]);
        assert_eq!(s.true_h(&pt(&[1.0, 0.0])), -0.25);
        assert_eq!(s.true_dynamics(&pt(&[1.0, 0.0])).as_slice(), &[0.0, 0.0]);
        assert_eq!(s.true_h(&pt(&[0.0, 1.0])), 0.5);
    }

    #[test]
    fn coupled_ho_values() {
        let s = coupled_ho(0.0).unwrap();
        assert_eq!(s.true_dynamics(&pt(&[0.3, -0.2])).as_slice(), &[-0.2, -0.3]);
        let s = coupled_ho(0.5).unwrap();
        assert_eq!(s.true_h(&pt(&[1.0, 1.0])), 1.5);
        assert_eq!(s.true_dynamics(&pt(&[1.0, 2.0])).as_slice(), &[2.5, -2.0]);
        assert!(coupled_ho(1.0).is_ok());
        assert!(coupled_ho(1.5).is_err());
    }

    #[test]
    fn henon_heiles_values() {
        let s = henon_heiles();
        assert_eq!(s.true_h(&pt(&[0.0; 4])), 0.0);
        assert_eq!(s.true_dynamics(&pt(&[0.0; 4])).as_slice(), &[0.0; 4]);
        assert!((s.true_h(&pt(&[0.0, 1.0, 0.0, 0.0])) - 1.0 / 6.0).abs() < 1e-15);
        // q̇ = p, ṗ_x = −q_x − 2q_xq_y, ṗ_y = −q_y − q_x² + q_y²
        let f = s.true_dynamics(&pt(&[0.5, 0.2, 0.1, -0.3]));
        assert_eq!(f.as_slice(), &[0.1, -0.3, -0.5 - 0.2, -0.2 - 0.25 + 0.04]);
    }

    #[test]
    fn registry() {
        let none = BTreeMap::new();
        for name in SYSTEM_NAMES {
            assert_eq!(by_name(name, &none).unwrap().name, name);
        }
        assert!(matches!(
            by_name("pendulum", &none),
            Err(Error::UnknownName { .. })
        ));
        let alpha = BTreeMap::from([("alpha".to_string(), 0.25)]);
        assert_eq!(
            by_name("coupled_ho", &alpha).unwrap().kind,
            SystemKind::CoupledHo { alpha: 0.25 }
        );
        assert!(by_name("double_well", &alpha).is_err());
    }
}
