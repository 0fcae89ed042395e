//! Reverse-mode automatic differentiation over scalars.
//!
//! A [`Tape`] records every arithmetic operation applied to its [`Var`]s.
//! Calling [`Tape::gradient`] on an output walks the recording backwards and
//! returns the partial derivative of that output with respect to every node.
//!
//! Numeric code in this crate is written against the [`Real`] trait so the
//! same routine runs on plain `f64` (evaluation, metrics) and on [`Var`]
//! (optimization).
//!
//! ```
//! use contactfit_core::autodiff::{Real, Tape};
//!
//! let tape = Tape::new();
//! let x = tape.var(3.0);
//! let y = x * x + x.sin();
//! let grads = tape.gradient(y);
//! assert!((grads.wrt(x) - (6.0 + 3.0f64.cos())).abs() < 1e-12);
//! ```

use alloc::vec;
use alloc::vec::Vec;
use core::cell::RefCell;
use core::fmt;
use core::ops::{Add, AddAssign, Div, Mul, Neg, Sub};

const NONE: u32 = u32::MAX;

#[derive(Clone, Copy)]
struct Node {
    parents: [u32; 2],
    partials: [f64; 2],
}

/// Operation recording for reverse-mode differentiation.
///
/// The tape is append-only; [`Tape::clear`] resets it between evaluations
/// while keeping the allocation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            nodes: RefCell::new(Vec::with_capacity(capacity)),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node. Outstanding `Var`s must not be used after this.
    pub fn clear(&mut self) {
        self.nodes.get_mut().clear();
    }

    /// A new independent variable (a leaf with no parents).
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(NONE, 0.0, NONE, 0.0);
        Var {
            tape: self,
            idx,
            val: value,
        }
    }

    /// A constant bound to this tape. Constants take no tape space.
    pub fn constant(&self, value: f64) -> Var<'_> {
        Var {
            tape: self,
            idx: NONE,
            val: value,
        }
    }

    fn push(&self, p0: u32, d0: f64, p1: u32, d1: f64) -> u32 {
        let mut nodes = self.nodes.borrow_mut();
        let idx = nodes.len();
        assert!(idx < NONE as usize, "tape overflow");
        nodes.push(Node {
            parents: [p0, p1],
            partials: [d0, d1],
        });
        idx as u32
    }

    fn unary<'t>(&'t self, a: Var<'t>, val: f64, da: f64) -> Var<'t> {
        if a.idx == NONE {
            return self.constant(val);
        }
        let idx = self.push(a.idx, da, NONE, 0.0);
        Var { tape: self, idx, val }
    }

    fn binary<'t>(&'t self, a: Var<'t>, da: f64, b: Var<'t>, db: f64, val: f64) -> Var<'t> {
        match (a.idx == NONE, b.idx == NONE) {
            (true, true) => self.constant(val),
            (false, true) => self.unary(a, val, da),
            (true, false) => self.unary(b, val, db),
            (false, false) => {
                let idx = self.push(a.idx, da, b.idx, db);
                Var { tape: self, idx, val }
            }
        }
    }

    /// Back-propagates from `output` and returns adjoints for every node.
    pub fn gradient(&self, output: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let mut adjoint = vec![0.0; nodes.len()];
        if output.idx == NONE {
            return Gradients { adjoint };
        }
        adjoint[output.idx as usize] = 1.0;
        for i in (0..=output.idx as usize).rev() {
            let g = adjoint[i];
            if g == 0.0 {
                continue;
            }
            let node = nodes[i];
            for k in 0..2 {
                let p = node.parents[k];
                if p != NONE {
                    adjoint[p as usize] += node.partials[k] * g;
                }
            }
        }
        Gradients { adjoint }
    }
}

/// Adjoints produced by [`Tape::gradient`].
pub struct Gradients {
    adjoint: Vec<f64>,
}

impl Gradients {
    /// d(output)/d(var). Zero for constants and nodes unrelated to the output.
    pub fn wrt(&self, var: Var<'_>) -> f64 {
        if var.idx == NONE {
            0.0
        } else {
            self.adjoint.get(var.idx as usize).copied().unwrap_or(0.0)
        }
    }
}

/// A scalar recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    idx: u32,
    val: f64,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("idx", &self.idx)
            .field("val", &self.val)
            .finish()
    }
}

impl<'t> Var<'t> {
    pub fn is_constant(&self) -> bool {
        self.idx == NONE
    }
}

/// Scalar abstraction shared by `f64` and [`Var`].
pub trait Real:
    Copy
    + fmt::Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
    + AddAssign
{
    fn value(self) -> f64;
    /// A constant living in the same context as `self`.
    fn lift(self, v: f64) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero_like(self) -> Self {
        self.lift(0.0)
    }

    fn square(self) -> Self {
        self * self
    }
}

impl Real for f64 {
    fn value(self) -> f64 {
        self
    }
    fn lift(self, v: f64) -> Self {
        v
    }
    fn sqrt(self) -> Self {
        libm::sqrt(self)
    }
    fn sin(self) -> Self {
        libm::sin(self)
    }
    fn cos(self) -> Self {
        libm::cos(self)
    }
    fn exp(self) -> Self {
        libm::exp(self)
    }
    fn ln(self) -> Self {
        libm::log(self)
    }
}

impl<'t> Real for Var<'t> {
    fn value(self) -> f64 {
        self.val
    }
    fn lift(self, v: f64) -> Self {
        self.tape.constant(v)
    }
    // The derivative at zero is taken as zero (subgradient of the norm).
    fn sqrt(self) -> Self {
        let s = libm::sqrt(self.val);
        let d = if s > 0.0 { 0.5 / s } else { 0.0 };
        self.tape.unary(self, s, d)
    }
    fn sin(self) -> Self {
        self.tape
            .unary(self, libm::sin(self.val), libm::cos(self.val))
    }
    fn cos(self) -> Self {
        self.tape
            .unary(self, libm::cos(self.val), -libm::sin(self.val))
    }
    fn exp(self) -> Self {
        let e = libm::exp(self.val);
        self.tape.unary(self, e, e)
    }
    fn ln(self) -> Self {
        self.tape.unary(self, libm::log(self.val), 1.0 / self.val)
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.tape.binary(self, 1.0, rhs, 1.0, self.val + rhs.val)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.tape.binary(self, 1.0, rhs, -1.0, self.val - rhs.val)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.tape
            .binary(self, rhs.val, rhs, self.val, self.val * rhs.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.tape
            .binary(self, 1.0 / rhs.val, rhs, -q / rhs.val, q)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.tape.unary(self, -self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.tape.unary(self, self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.tape.unary(self, self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        if rhs == 0.0 {
            return self.tape.constant(0.0);
        }
        self.tape.unary(self, self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self.tape.unary(self, self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> AddAssign for Var<'t> {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}
