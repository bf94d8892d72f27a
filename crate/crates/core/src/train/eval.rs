use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::integrators::{integrate, FpiConfig, Method};
use crate::phase::{Hamiltonian, HamiltonianField, PhasePoint};
use crate::systems::SystemSpec;

/// Uniform `n × n` grid over two phase-space coordinates; all other
/// coordinates are held at `base`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub axes: (usize, usize),
    pub ranges: [(f64, f64); 2],
    pub base: Vec<f64>,
}

impl GridSpec {
    /// `n` points per axis over the system domain: `(q, p)` for one degree
    /// of freedom, the `(q_y, p_y)` slice at `q_x = p_x = 0` for two.
    pub fn for_system(spec: &SystemSpec, n: usize) -> Self {
        let d = spec.half_dim();
        let axes = if d == 1 { (0, 1) } else { (1, 3) };
        Self {
            n,
            axes,
            ranges: [spec.domain[axes.0], spec.domain[axes.1]],
            base: vec![0.0; 2 * d],
        }
    }

    pub fn validate(&self, spec: &SystemSpec) -> Result<()> {
        let dim = 2 * spec.half_dim();
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n < 2 {
            return bad(format!(
                "grid needs at least 2 points per axis, got {}",
                self.n
            ));
        }
        check_dim("grid base point", dim, self.base.len())?;
        let (a, b) = self.axes;
        if a == b || a >= dim || b >= dim {
            return bad(format!(
                "grid axes {:?} invalid for dimension {dim}",
                self.axes
            ));
        }
        for (k, &(lo, hi)) in [a, b].iter().zip(&self.ranges) {
            let (dlo, dhi) = spec.domain[*k];
            if !(lo < hi) || lo < dlo || hi > dhi {
                return bad(format!(
                    "grid range [{lo}, {hi}] on axis {k} not inside domain [{dlo}, {dhi}]"
                ));
            }
        }
        for (k, &v) in self.base.iter().enumerate() {
            let (dlo, dhi) = spec.domain[k];
            if k != a && k != b && !(dlo..=dhi).contains(&v) {
                return bad(format!("grid base value {v} on axis {k} outside domain"));
            }
        }
        Ok(())
    }

    fn coord(&self, axis: usize, i: usize) -> f64 {
        let (lo, hi) = self.ranges[axis];
        lo + (hi - lo) * i as f64 / (self.n - 1) as f64
    }

    pub fn points(&self) -> Vec<(f64, f64, PhasePoint)> {
        let mut out = Vec::with_capacity(self.n * self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                let (x, y) = (self.coord(0, i), self.coord(1, j));
                let mut v = self.base.clone();
                v[self.axes.0] = x;
                v[self.axes.1] = y;
                out.push((x, y, PhasePoint::from_coords(v.into_iter().collect())));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    /// Mean `|H_true − (H_pred + offset)|` over the grid.
    pub h_l1_mean: f64,
    pub h_l1_max: f64,
    /// Mean `|H_true − H_pred|` without alignment.
    pub h_l1_raw_mean: f64,
    /// Mean Euclidean norm of `f_true − f_pred`.
    pub dyn_l2_mean: f64,
    /// Filled in by callers that also run a long rollout.
    pub energy_drift: Option<f64>,
    pub grid: GridSpec,
    /// `mean(H_true − H_pred)`; `H` is only identifiable up to a constant.
    pub alignment_offset: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub x: f64,
    pub y: f64,
    pub h_true: f64,
    pub h_pred: f64,
    pub h_err: f64,
    pub dyn_err: f64,
}

/// Compares `model` with the system on the grid.
pub fn evaluate_ood(
    model: &(impl Hamiltonian + ?Sized),
    spec: &SystemSpec,
    grid: &GridSpec,
) -> Result<(EvalReport, Vec<GridPoint>)> {
    grid.validate(spec)?;
    check_dim("model half dimension", spec.half_dim(), model.half_dim())?;
    let mut rows: Vec<GridPoint> = grid
        .points()
        .into_iter()
        .map(|(x, y, p)| {
            let ft = spec.field(&p);
            let fp = model.field(&p);
            GridPoint {
                x,
                y,
                h_true: spec.energy(&p),
                h_pred: model.energy(&p),
                h_err: 0.0,
                dyn_err: ft.sub(&fp).norm_sq().sqrt(),
            }
        })
        .collect();
    if !rows
        .iter()
        .all(|r| r.h_pred.is_finite() && r.dyn_err.is_finite())
    {
        return Err(Error::NonFinite("model output on evaluation grid"));
    }
    let n = rows.len() as f64;
    let offset = rows.iter().map(|r| r.h_true - r.h_pred).sum::<f64>() / n;
    let raw = rows
        .iter()
        .map(|r| (r.h_true - r.h_pred).abs())
        .sum::<f64>()
        / n;
    for r in &mut rows {
        r.h_err = (r.h_true - (r.h_pred + offset)).abs();
    }
    let report = EvalReport {
        system: spec.name.clone(),
        h_l1_mean: rows.iter().map(|r| r.h_err).sum::<f64>() / n,
        h_l1_max: rows.iter().fold(0.0, |m, r| m.max(r.h_err)),
        h_l1_raw_mean: raw,
        dyn_l2_mean: rows.iter().map(|r| r.dyn_err).sum::<f64>() / n,
        energy_drift: None,
        grid: grid.clone(),
        alignment_offset: offset,
    };
    Ok((report, rows))
}

/// `max_t |H(y(t)) − H(y0)|` along an implicit-midpoint rollout of the
/// model's own dynamics.
pub fn energy_drift(
    model: &(impl Hamiltonian + ?Sized),
    y0: &PhasePoint,
    h: f64,
    n: usize,
    cfg: &FpiConfig,
) -> Result<f64> {
    energy_drift_with(model, &Method::ImplicitMidpoint, y0, h, n, cfg)
}

pub fn energy_drift_with(
    model: &(impl Hamiltonian + ?Sized),
    method: &Method,
    y0: &PhasePoint,
    h: f64,
    n: usize,
    cfg: &FpiConfig,
) -> Result<f64> {
    check_dim("initial state", 2 * model.half_dim(), y0.dim())?;
    if n == 0 {
        return Ok(0.0);
    }
    let traj = integrate(&HamiltonianField(model), y0, h, n, method, cfg, None)?.trajectory;
    let e0 = model.energy(y0);
    let drift = traj
        .points
        .iter()
        .fold(0.0f64, |m, p| m.max((model.energy(p) - e0).abs()));
    if drift.is_finite() {
        Ok(drift)
    } else {
        Err(Error::NonFinite("energy along rollout"))
    }
}

/// One system's row of the comparison table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub system: String,
    pub h_l1_mean: f64,
    pub h_l1_raw_mean: f64,
    pub runtime_s: f64,
}

const TABLE_HEADER: [&str; 4] = ["system", "h_l1_mean", "h_l1_raw_mean", "runtime_s"];

pub fn report_csv(rows: &[TableRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    w.write_record(TABLE_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn parse_report_csv(text: &str) -> Result<Vec<TableRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

pub fn report_markdown(rows: &[TableRow]) -> String {
    let mut s = String::from(
        "| System | Mean abs. error (aligned) | Mean abs. error (raw) | Runtime (s) |\n",
    );
    s.push_str("|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.5} | {:.5} | {:.2} |\n",
            r.system, r.h_l1_mean, r.h_l1_raw_mean, r.runtime_s
        ));
    }
    s
}
