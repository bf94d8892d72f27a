use smallvec::SmallVec;

use crate::error::{check_dim, Error, Result};

/// Inline storage for phase-space coordinates; no heap use for d ≤ 2.
pub type Coords = SmallVec<[f64; 4]>;

/// Canonical state `(q, p)` stored flat as `[q_1..q_d, p_1..p_d]`.
///
/// The same layout doubles as a tangent vector (vector-field values).
#[derive(Clone, Debug, PartialEq)]
pub struct PhasePoint {
    coords: Coords,
}

impl PhasePoint {
    pub fn new(q: &[f64], p: &[f64]) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::InvalidConfig("phase point needs d >= 1".into()));
        }
        check_dim("phase point momentum", q.len(), p.len())?;
        let coords: Coords = q.iter().chain(p).copied().collect();
        if !coords.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("phase point"));
        }
        Ok(Self { coords })
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self> {
        if flat.is_empty() || !flat.len().is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!(
                "flat phase point needs an even, non-zero length (got {})",
                flat.len()
            )));
        }
        let d = flat.len() / 2;
        Self::new(&flat[..d], &flat[d..])
    }

    /// Builds a point without validation. Length must be even.
    pub fn from_coords(coords: Coords) -> Self {
        debug_assert!(coords.len().is_multiple_of(2) && !coords.is_empty());
        Self { coords }
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            coords: SmallVec::from_elem(0.0, 2 * d),
        }
    }

    pub fn half_dim(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn q(&self) -> &[f64] {
        &self.coords[..self.half_dim()]
    }

    pub fn p(&self) -> &[f64] {
        &self.coords[self.half_dim()..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn into_coords(self) -> Coords {
        self.coords
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|v| v.is_finite())
    }

    /// `self + a * other`
    pub fn axpy(&self, a: f64, other: &PhasePoint) -> PhasePoint {
        debug_assert_eq!(self.dim(), other.dim());
        let coords = self
            .coords
            .iter()
            .zip(&other.coords)
            .map(|(x, y)| x + a * y)
            .collect();
        PhasePoint { coords }
    }

    pub fn midpoint(&self, other: &PhasePoint) -> PhasePoint {
        debug_assert_eq!(self.dim(), other.dim());
        let coords = self
            .coords
            .iter()
            .zip(&other.coords)
            .map(|(x, y)| 0.5 * (x + y))
            .collect();
        PhasePoint { coords }
    }

    pub fn sub(&self, other: &PhasePoint) -> PhasePoint {
        self.axpy(-1.0, other)
    }

    pub fn scale(&self, a: f64) -> PhasePoint {
        PhasePoint {
            coords: self.coords.iter().map(|x| a * x).collect(),
        }
    }

    /// Infinity-norm distance.
    pub fn max_abs_diff(&self, other: &PhasePoint) -> f64 {
        self.coords
            .iter()
            .zip(&other.coords)
            .fold(0.0, |m, (x, y)| m.max((x - y).abs()))
    }

    pub fn norm_sq(&self) -> f64 {
        self.coords.iter().map(|x| x * x).sum()
    }
}

/// Costate `(λ_q, λ_p)`, laid out like a [`PhasePoint`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdjointState {
    coords: Coords,
}

impl AdjointState {
    pub fn new(lambda_q: &[f64], lambda_p: &[f64]) -> Result<Self> {
        check_dim("costate", lambda_q.len(), lambda_p.len())?;
        let coords: Coords = lambda_q.iter().chain(lambda_p).copied().collect();
        if !coords.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("costate"));
        }
        Ok(Self { coords })
    }

    pub fn zeros(d: usize) -> Self {
        Self {
            coords: SmallVec::from_elem(0.0, 2 * d),
        }
    }

    pub fn from_coords(coords: Coords) -> Self {
        debug_assert!(coords.len().is_multiple_of(2));
        Self { coords }
    }

    pub fn half_dim(&self) -> usize {
        self.coords.len() / 2
    }

    pub fn lambda_q(&self) -> &[f64] {
        &self.coords[..self.half_dim()]
    }

    pub fn lambda_p(&self) -> &[f64] {
        &self.coords[self.half_dim()..]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.coords
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    pub fn is_zero(&self) -> bool {
        self.coords.iter().all(|&v| v == 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.coords.iter().all(|v| v.is_finite())
    }
}

/// `(∂H/∂q, ∂H/∂p)` at one phase point.
#[derive(Clone, Debug, PartialEq)]
pub struct StateGradient {
    pub dq: Coords,
    pub dp: Coords,
}

impl StateGradient {
    /// Hamilton's equations: `(∂H/∂p, −∂H/∂q)`.
    pub fn canonical_field(&self) -> PhasePoint {
        let coords = self
            .dp
            .iter()
            .copied()
            .chain(self.dq.iter().map(|v| -v))
            .collect();
        PhasePoint::from_coords(coords)
    }
}

/// An autonomous vector field on phase space.
pub trait VectorField {
    fn eval(&self, y: &PhasePoint) -> PhasePoint;
}

impl<F> VectorField for F
where
    F: Fn(&PhasePoint) -> PhasePoint,
{
    fn eval(&self, y: &PhasePoint) -> PhasePoint {
        self(y)
    }
}

/// A scalar Hamiltonian with an exact state gradient.
pub trait Hamiltonian {
    fn half_dim(&self) -> usize;
    fn energy(&self, y: &PhasePoint) -> f64;
    fn gradient(&self, y: &PhasePoint) -> StateGradient;

    fn field(&self, y: &PhasePoint) -> PhasePoint {
        self.gradient(y).canonical_field()
    }
}

/// Adapts a [`Hamiltonian`] into its canonical [`VectorField`].
pub struct HamiltonianField<'a, H: ?Sized>(pub &'a H);

impl<H: Hamiltonian + ?Sized> VectorField for HamiltonianField<'_, H> {
    fn eval(&self, y: &PhasePoint) -> PhasePoint {
        self.0.field(y)
    }
}
