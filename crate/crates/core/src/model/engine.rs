//! Reverse-mode sweep specialized to dense tanh layers.
//!
//! The sweep is generic over [`Real`], so running it on [`Dual`] inputs gives
//! forward-over-reverse second derivatives: seeding the input tangent with a
//! direction `w` makes the tangent part of the state gradient equal `∇²H·w`
//! and the tangent part of the parameter gradient equal `∂(∇H·w)/∂θ`.

use std::ops::{Add, AddAssign, Mul, Sub};

use super::ParamVector;
use crate::memory::{charge, Charge};

pub(crate) trait Real:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + AddAssign
{
    const ZERO: Self;
    const ONE: Self;
    fn constant(v: f64) -> Self;
    fn scale(self, w: f64) -> Self;
    fn tanh(self) -> Self;
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;

    fn constant(v: f64) -> Self {
        v
    }

    fn scale(self, w: f64) -> Self {
        self * w
    }

    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// First-order dual number `re + eps·ε`, `ε² = 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl AddAssign for Dual {
    fn add_assign(&mut self, o: Dual) {
        self.re += o.re;
        self.eps += o.eps;
    }
}

impl Real for Dual {
    const ZERO: Self = Dual { re: 0.0, eps: 0.0 };
    const ONE: Self = Dual { re: 1.0, eps: 0.0 };

    fn constant(v: f64) -> Self {
        Dual::new(v, 0.0)
    }

    fn scale(self, w: f64) -> Self {
        Dual::new(self.re * w, self.eps * w)
    }

    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, self.eps * (1.0 - t * t))
    }
}

/// Layer inputs recorded by a forward pass: `acts[0]` is the network input,
/// `acts[l]` the post-activation output of hidden layer `l`.
#[derive(Clone, Debug)]
pub(crate) struct Tape<T> {
    acts: Vec<Vec<T>>,
    _charge: Charge,
}

impl<T> Tape<T> {
    fn new(acts: Vec<Vec<T>>) -> Self {
        let bytes = acts
            .iter()
            .map(|a| a.len() * std::mem::size_of::<T>())
            .sum();
        Self {
            acts,
            _charge: charge(bytes),
        }
    }
}

impl<T: Real> Tape<T> {
    pub fn record(params: &ParamVector, x: &[T]) -> (Tape<T>, T) {
        let layers = params.arch().layers();
        let w = params.values();
        let mut acts: Vec<Vec<T>> = Vec::with_capacity(layers.len());
        acts.push(x.to_vec());
        for (l, layer) in layers.iter().enumerate() {
            let input = &acts[l];
            let mut out = Vec::with_capacity(layer.fan_out);
            for i in 0..layer.fan_out {
                let row = &w[layer.weights.start + i * layer.fan_in..][..layer.fan_in];
                let mut z = T::constant(w[layer.bias.start + i]);
                for (a, &wij) in input.iter().zip(row) {
                    z += a.scale(wij);
                }
                out.push(z);
            }
            if l + 1 == layers.len() {
                return (Tape::new(acts), out[0]);
            }
            acts.push(out.into_iter().map(T::tanh).collect());
        }
        unreachable!("architecture has at least one layer")
    }
}

impl Tape<f64> {
    /// Pushes the input tangent `seed` through recorded primal activations.
    pub fn lift(&self, params: &ParamVector, seed: &[f64]) -> Tape<Dual> {
        let layers = params.arch().layers();
        let w = params.values();
        let mut acts: Vec<Vec<Dual>> = Vec::with_capacity(self.acts.len());
        acts.push(
            self.acts[0]
                .iter()
                .zip(seed)
                .map(|(&re, &eps)| Dual::new(re, eps))
                .collect(),
        );
        for l in 1..self.acts.len() {
            let layer = &layers[l - 1];
            let input = &acts[l - 1];
            let out = self.acts[l]
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let row = &w[layer.weights.start + i * layer.fan_in..][..layer.fan_in];
                    let dz: f64 = input.iter().zip(row).map(|(x, &wij)| x.eps * wij).sum();
                    Dual::new(a, (1.0 - a * a) * dz)
                })
                .collect();
            acts.push(out);
        }
        Tape::new(acts)
    }
}

/// Reverse sweep from the scalar output. Writes `∂H/∂x` into `grad_x` and,
/// when requested, `∂H/∂θ` into `grad_theta` (every entry is overwritten).
pub(crate) fn backward<T: Real>(
    params: &ParamVector,
    tape: &Tape<T>,
    grad_x: &mut [T],
    mut grad_theta: Option<&mut [T]>,
) {
    let layers = params.arch().layers();
    let w = params.values();
    let mut delta: Vec<T> = vec![T::ONE];
    for (l, layer) in layers.iter().enumerate().rev() {
        let input = &tape.acts[l];
        if let Some(gt) = grad_theta.as_deref_mut() {
            for (i, &di) in delta.iter().enumerate() {
                gt[layer.bias.start + i] = di;
                let row = &mut gt[layer.weights.start + i * layer.fan_in..][..layer.fan_in];
                for (g, &a) in row.iter_mut().zip(input) {
                    *g = di * a;
                }
            }
        }
        let mut g = vec![T::ZERO; layer.fan_in];
        for (i, &di) in delta.iter().enumerate() {
            let row = &w[layer.weights.start + i * layer.fan_in..][..layer.fan_in];
            for (gj, &wij) in g.iter_mut().zip(row) {
                *gj += di.scale(wij);
            }
        }
        if l == 0 {
            grad_x.copy_from_slice(&g);
        } else {
            delta = g
                .into_iter()
                .zip(input)
                .map(|(gj, &a)| gj * (T::ONE - a * a))
                .collect();
        }
    }
}
