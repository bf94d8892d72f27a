//! Feed-forward tanh network `H(θ; q, p)` and its derivatives.
//!
//! Parameters are a flat vector; each layer stores its weight matrix
//! (row-major, `fan_out × fan_in`) followed by its bias. Hidden layers use
//! tanh, the scalar output layer is affine.

pub(crate) mod checkpoint;
pub(crate) mod engine;

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smallvec::SmallVec;

use crate::error::{check_dim, Error, Result};
use crate::memory::{charge, f64_bytes};
use crate::phase::{AdjointState, Coords, Hamiltonian, PhasePoint, StateGradient};
use crate::systems::SystemSpec;

pub use checkpoint::{Checkpoint, CheckpointHeader, CHECKPOINT_FORMAT_VERSION};
use engine::{backward, Dual, Tape};

/// Hidden widths used throughout the benchmarks.
pub const DEFAULT_HIDDEN: [usize; 3] = [16, 32, 16];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerLayout {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weights: Range<usize>,
    pub bias: Range<usize>,
}

/// Validated layer widths `[2d, h_1, …, 1]` with precomputed offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Arch {
    widths: Vec<usize>,
    layers: Vec<LayerLayout>,
}

impl Arch {
    pub fn new(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::InvalidArch(format!(
                "need at least input and output widths, got {widths:?}"
            )));
        }
        if widths.contains(&0) {
            return Err(Error::InvalidArch(format!("zero width in {widths:?}")));
        }
        if !widths[0].is_multiple_of(2) {
            return Err(Error::InvalidArch(format!(
                "input width {} is not an even state dimension",
                widths[0]
            )));
        }
        if *widths.last().unwrap() != 1 {
            return Err(Error::InvalidArch(format!(
                "output width must be 1, got {widths:?}"
            )));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for pair in widths.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let weights = offset..offset + fan_in * fan_out;
            let bias = weights.end..weights.end + fan_out;
            offset = bias.end;
            layers.push(LayerLayout {
                fan_in,
                fan_out,
                weights,
                bias,
            });
        }
        Ok(Self {
            widths: widths.to_vec(),
            layers,
        })
    }

    /// `[2d, hidden…, 1]`
    pub fn with_hidden(d: usize, hidden: &[usize]) -> Result<Self> {
        let mut widths = vec![2 * d];
        widths.extend_from_slice(hidden);
        widths.push(1);
        Self::new(&widths)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn layers(&self) -> &[LayerLayout] {
        &self.layers
    }

    pub fn state_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn half_dim(&self) -> usize {
        self.widths[0] / 2
    }

    pub fn param_count(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.end)
    }
}

/// Network weights and biases together with their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    arch: Arch,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn from_values(arch: Arch, values: Vec<f64>) -> Result<Self> {
        check_dim("parameter vector", arch.param_count(), values.len())?;
        Ok(Self { arch, values })
    }

    pub fn zeros(arch: Arch) -> Self {
        let values = vec![0.0; arch.param_count()];
        Self { arch, values }
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn check_state(&self, y: &PhasePoint) -> Result<()> {
        check_dim("network input", self.arch.state_dim(), y.dim())
    }
}

/// Seeded initialization: weights `U(−1/√fan_in, 1/√fan_in)`, biases zero.
pub fn init_params(arch: &[usize], seed: u64) -> Result<ParamVector> {
    let arch = Arch::new(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = vec![0.0; arch.param_count()];
    for layer in arch.layers() {
        let scale = 1.0 / (layer.fan_in as f64).sqrt();
        for w in &mut values[layer.weights.clone()] {
            *w = rng.random_range(-scale..scale);
        }
    }
    Ok(ParamVector { arch, values })
}

pub fn eval_h(theta: &ParamVector, y: &PhasePoint) -> Result<f64> {
    theta.check_state(y)?;
    Ok(Tape::record(theta, y.as_slice()).1)
}

pub fn grad_state(theta: &ParamVector, y: &PhasePoint) -> Result<StateGradient> {
    theta.check_state(y)?;
    Ok(grad_unchecked(theta, y))
}

/// Canonical vector field `(∂H/∂p, −∂H/∂q)`.
pub fn dynamics(theta: &ParamVector, y: &PhasePoint) -> Result<PhasePoint> {
    Ok(grad_state(theta, y)?.canonical_field())
}

fn grad_unchecked(theta: &ParamVector, y: &PhasePoint) -> StateGradient {
    let (tape, _) = Tape::record(theta, y.as_slice());
    let mut gx: Coords = SmallVec::from_elem(0.0, y.dim());
    backward(theta, &tape, &mut gx, None);
    let d = y.half_dim();
    StateGradient {
        dq: gx[..d].iter().copied().collect(),
        dp: gx[d..].iter().copied().collect(),
    }
}

/// Canonical field at `y` together with the forward tape that produced it.
pub(crate) fn field_taped(theta: &ParamVector, y: &PhasePoint) -> (Tape<f64>, PhasePoint) {
    let (tape, _) = Tape::record(theta, y.as_slice());
    let mut gx: Coords = SmallVec::from_elem(0.0, y.dim());
    backward(theta, &tape, &mut gx, None);
    let d = y.half_dim();
    let g = StateGradient {
        dq: gx[..d].iter().copied().collect(),
        dp: gx[d..].iter().copied().collect(),
    };
    (tape, g.canonical_field())
}

/// Dense row-major `n × n` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SquareMatrix {
    n: usize,
    data: SmallVec<[f64; 4]>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self {
            n,
            data: SmallVec::from_elem(0.0, n * n),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// `M x`
    pub fn mul_vec(&self, x: &[f64]) -> Coords {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.get(i, j) * x[j]).sum())
            .collect()
    }

    /// `Mᵀ x`
    pub fn tr_mul_vec(&self, x: &[f64]) -> Coords {
        (0..self.n)
            .map(|j| (0..self.n).map(|i| self.get(i, j) * x[i]).sum())
            .collect()
    }

    pub fn max_abs_diff(&self, other: &SquareMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Second derivatives of `H` split into `d × d` blocks.
/// `hqp[i][j] = ∂²H/∂q_i∂p_j`, `hpq[i][j] = ∂²H/∂p_i∂q_j`.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianBlocks {
    pub hqq: SquareMatrix,
    pub hqp: SquareMatrix,
    pub hpq: SquareMatrix,
    pub hpp: SquareMatrix,
}

impl HessianBlocks {
    pub fn half_dim(&self) -> usize {
        self.hqq.size()
    }

    /// Largest violation of `Hqq = Hqqᵀ`, `Hpp = Hppᵀ`, `Hqp = Hpqᵀ`.
    pub fn symmetry_defect(&self) -> f64 {
        self.hqq
            .max_abs_diff(&self.hqq.transpose())
            .max(self.hpp.max_abs_diff(&self.hpp.transpose()))
            .max(self.hqp.max_abs_diff(&self.hpq.transpose()))
    }
}

/// Forward-over-reverse Hessian: one dual sweep per coordinate direction.
pub fn hess_state(theta: &ParamVector, y: &PhasePoint) -> Result<HessianBlocks> {
    theta.check_state(y)?;
    let n = y.dim();
    let d = y.half_dim();
    let (tape, _) = Tape::record(theta, y.as_slice());
    let mut full = SquareMatrix::zeros(n);
    let mut seed = vec![0.0; n];
    let mut gx = vec![Dual::new(0.0, 0.0); n];
    for k in 0..n {
        seed.iter_mut().for_each(|s| *s = 0.0);
        seed[k] = 1.0;
        backward(theta, &tape.lift(theta, &seed), &mut gx, None);
        for (i, g) in gx.iter().enumerate() {
            full.set(i, k, g.eps);
        }
    }
    let block = |r0: usize, c0: usize| {
        let mut m = SquareMatrix::zeros(d);
        for i in 0..d {
            for j in 0..d {
                m.set(i, j, full.get(r0 + i, c0 + j));
            }
        }
        m
    };
    Ok(HessianBlocks {
        hqq: block(0, 0),
        hqp: block(0, d),
        hpq: block(d, 0),
        hpp: block(d, d),
    })
}

/// Pullback of the cotangent `v` through the canonical field `f(θ, y)`:
/// returns `((∂f/∂y)ᵀ v, (∂f/∂θ)ᵀ v)`.
///
/// Since `vᵀ f = ∇H · w` with `w = (−v_p, v_q)`, both parts come from a
/// single dual sweep seeded with `w`.
pub fn pullback(theta: &ParamVector, y: &PhasePoint, v: &[f64]) -> Result<(Coords, Vec<f64>)> {
    theta.check_state(y)?;
    check_dim("pullback cotangent", y.dim(), v.len())?;
    let (tape, _) = Tape::record(theta, y.as_slice());
    Ok(pullback_taped(theta, &tape, v))
}

pub(crate) fn pullback_taped(
    theta: &ParamVector,
    tape: &Tape<f64>,
    v: &[f64],
) -> (Coords, Vec<f64>) {
    let d = v.len() / 2;
    let seed: Coords = v[d..]
        .iter()
        .map(|x| -x)
        .chain(v[..d].iter().copied())
        .collect();
    let lifted = tape.lift(theta, &seed);
    let mut gx = vec![Dual::new(0.0, 0.0); v.len()];
    let mut gt = vec![Dual::new(0.0, 0.0); theta.len()];
    let _held =
        charge(std::mem::size_of::<Dual>() * (gx.len() + gt.len()) + f64_bytes(theta.len()));
    backward(theta, &lifted, &mut gx, Some(&mut gt));
    (
        gx.iter().map(|g| g.eps).collect(),
        gt.iter().map(|g| g.eps).collect(),
    )
}

/// `λᵀ ∂f/∂θ` at `(θ, y)`.
pub fn vjp_params(theta: &ParamVector, y: &PhasePoint, lambda: &AdjointState) -> Result<Vec<f64>> {
    Ok(pullback(theta, y, lambda.as_slice())?.1)
}

/// The network bound to its parameters, usable wherever a [`Hamiltonian`]
/// is expected. Panics on dimension mismatch; use the free functions for
/// checked access.
#[derive(Clone, Copy, Debug)]
pub struct NetHamiltonian<'a>(pub &'a ParamVector);

impl Hamiltonian for NetHamiltonian<'_> {
    fn half_dim(&self) -> usize {
        self.0.arch.half_dim()
    }

    fn energy(&self, y: &PhasePoint) -> f64 {
        eval_h(self.0, y).expect("state dimension matches network input")
    }

    fn gradient(&self, y: &PhasePoint) -> StateGradient {
        assert_eq!(y.dim(), self.0.arch.state_dim(), "state dimension mismatch");
        grad_unchecked(self.0, y)
    }
}

/// Either a trained network or an analytic system standing in for one.
#[derive(Clone, Debug)]
pub enum Model {
    Net(ParamVector),
    Oracle(SystemSpec),
}

impl Hamiltonian for Model {
    fn half_dim(&self) -> usize {
        match self {
            Model::Net(theta) => theta.arch.half_dim(),
            Model::Oracle(spec) => spec.half_dim(),
        }
    }

    fn energy(&self, y: &PhasePoint) -> f64 {
        match self {
            Model::Net(theta) => NetHamiltonian(theta).energy(y),
            Model::Oracle(spec) => spec.energy(y),
        }
    }

    fn gradient(&self, y: &PhasePoint) -> StateGradient {
        match self {
            Model::Net(theta) => NetHamiltonian(theta).gradient(y),
            Model::Oracle(spec) => spec.gradient(y),
        }
    }
}
