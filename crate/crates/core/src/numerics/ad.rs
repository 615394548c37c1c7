//! Reverse-mode differentiation on a scalar tape.
//!
//! Every differentiable computation in the crate is written once, generically
//! over [`Scalar`], and instantiated either with plain `f64` (fast path) or
//! with [`Var`] (recorded on a [`Tape`] for gradients). A `Var` without a tape
//! is a constant and costs nothing to create, so generic code can build
//! literals through [`Scalar::cst`] without touching any tape.

use std::cell::RefCell;
use std::fmt;
use std::ops::{Add, Div, Mul, Neg, Sub};

use super::NumericsError;

/// Arithmetic needed by generic model code.
pub trait Scalar:
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
{
    fn cst(v: f64) -> Self;
    fn value(&self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    fn sigmoid(self) -> Self {
        let v = self.value();
        // Branch keeps exp() from overflowing for large |v|.
        if v >= 0.0 {
            let e = (-self).exp();
            Self::one() / (e + 1.0)
        } else {
            let e = self.exp();
            e / (e + 1.0)
        }
    }

    fn powi(self, n: i32) -> Self {
        let mut acc = Self::one();
        let base = if n < 0 { Self::one() / self } else { self };
        for _ in 0..n.unsigned_abs() {
            acc = acc * base;
        }
        acc
    }

    fn abs(self) -> Self {
        if self.value() < 0.0 {
            -self
        } else {
            self
        }
    }

    /// Rectifier; the derivative at exactly 0 is taken as 0.
    fn relu(self) -> Self {
        if self.value() > 0.0 {
            self
        } else {
            self * 0.0
        }
    }

    fn max(self, other: Self) -> Self {
        if self.value() >= other.value() {
            self
        } else {
            other
        }
    }

    fn min(self, other: Self) -> Self {
        if self.value() <= other.value() {
            self
        } else {
            other
        }
    }
}

impl Scalar for f64 {
    fn cst(v: f64) -> Self {
        v
    }
    fn value(&self) -> f64 {
        *self
    }
    fn exp(self) -> Self {
        f64::exp(self)
    }
    fn ln(self) -> Self {
        f64::ln(self)
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
}

#[derive(Clone, Copy)]
struct Node {
    parents: [(usize, f64); 2],
    arity: u8,
}

/// Append-only record of elementary operations.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Registers an independent variable.
    pub fn var(&self, value: f64) -> Var<'_> {
        let idx = self.push(Node {
            parents: [(0, 0.0); 2],
            arity: 0,
        });
        Var {
            val: value,
            node: Some((self, idx)),
        }
    }

    pub fn vars(&self, values: &[f64]) -> Vec<Var<'_>> {
        values.iter().map(|&v| self.var(v)).collect()
    }

    fn push(&self, node: Node) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        nodes.len() - 1
    }

    /// Adjoints of every tape node with respect to `output`.
    pub fn adjoints(&self, output: &Var<'_>) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let mut adj = vec![0.0; nodes.len()];
        let Some((_, out)) = output.node else {
            return adj;
        };
        adj[out] = 1.0;
        for i in (0..=out).rev() {
            let a = adj[i];
            if a == 0.0 {
                continue;
            }
            let node = nodes[i];
            for &(p, d) in &node.parents[..node.arity as usize] {
                adj[p] += a * d;
            }
        }
        adj
    }

    /// Gradient of `output` with respect to the given inputs.
    pub fn gradient(&self, output: &Var<'_>, inputs: &[Var<'_>]) -> Vec<f64> {
        let adj = self.adjoints(output);
        inputs
            .iter()
            .map(|v| v.node.map_or(0.0, |(_, i)| adj[i]))
            .collect()
    }
}

/// A scalar that may be recorded on a tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    val: f64,
    node: Option<(&'t Tape, usize)>,
}

impl fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some((_, i)) => write!(f, "Var({}, #{})", self.val, i),
            None => write!(f, "Var({})", self.val),
        }
    }
}

impl<'t> Var<'t> {
    pub fn constant(val: f64) -> Self {
        Var { val, node: None }
    }

    pub fn is_recorded(&self) -> bool {
        self.node.is_some()
    }

    fn unary(self, val: f64, d: f64) -> Self {
        match self.node {
            None => Var::constant(val),
            Some((tape, i)) => Var {
                val,
                node: Some((
                    tape,
                    tape.push(Node {
                        parents: [(i, d), (0, 0.0)],
                        arity: 1,
                    }),
                )),
            },
        }
    }

    fn binary(self, other: Self, val: f64, da: f64, db: f64) -> Self {
        match (self.node, other.node) {
            (None, None) => Var::constant(val),
            (Some(_), None) => self.unary(val, da),
            (None, Some(_)) => other.unary(val, db),
            (Some((tape, i)), Some((_, j))) => Var {
                val,
                node: Some((
                    tape,
                    tape.push(Node {
                        parents: [(i, da), (j, db)],
                        arity: 2,
                    }),
                )),
            },
        }
    }
}

impl<'t> Add for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: Self) -> Self {
        self.binary(rhs, self.val + rhs.val, 1.0, 1.0)
    }
}

impl<'t> Sub for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: Self) -> Self {
        self.binary(rhs, self.val - rhs.val, 1.0, -1.0)
    }
}

impl<'t> Mul for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: Self) -> Self {
        self.binary(rhs, self.val * rhs.val, rhs.val, self.val)
    }
}

impl<'t> Div for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: Self) -> Self {
        let q = self.val / rhs.val;
        self.binary(rhs, q, 1.0 / rhs.val, -q / rhs.val)
    }
}

impl<'t> Neg for Var<'t> {
    type Output = Var<'t>;
    fn neg(self) -> Self {
        self.unary(-self.val, -1.0)
    }
}

impl<'t> Add<f64> for Var<'t> {
    type Output = Var<'t>;
    fn add(self, rhs: f64) -> Self {
        self.unary(self.val + rhs, 1.0)
    }
}

impl<'t> Sub<f64> for Var<'t> {
    type Output = Var<'t>;
    fn sub(self, rhs: f64) -> Self {
        self.unary(self.val - rhs, 1.0)
    }
}

impl<'t> Mul<f64> for Var<'t> {
    type Output = Var<'t>;
    fn mul(self, rhs: f64) -> Self {
        self.unary(self.val * rhs, rhs)
    }
}

impl<'t> Div<f64> for Var<'t> {
    type Output = Var<'t>;
    fn div(self, rhs: f64) -> Self {
        self.unary(self.val / rhs, 1.0 / rhs)
    }
}

impl<'t> Scalar for Var<'t> {
    fn cst(v: f64) -> Self {
        Var::constant(v)
    }
    fn value(&self) -> f64 {
        self.val
    }
    fn exp(self) -> Self {
        let e = self.val.exp();
        self.unary(e, e)
    }
    fn ln(self) -> Self {
        self.unary(self.val.ln(), 1.0 / self.val)
    }
    fn tanh(self) -> Self {
        let t = self.val.tanh();
        self.unary(t, 1.0 - t * t)
    }
    fn sqrt(self) -> Self {
        let s = self.val.sqrt();
        self.unary(s, 0.5 / s)
    }
    fn sigmoid(self) -> Self {
        let s = if self.val >= 0.0 {
            1.0 / (1.0 + (-self.val).exp())
        } else {
            let e = self.val.exp();
            e / (1.0 + e)
        };
        self.unary(s, s * (1.0 - s))
    }
}

/// Pins a closure to the higher-ranked signature expected by [`grad`] and
/// [`descend`](super::descend); closures annotated by hand do not infer it.
pub fn objective<F>(f: F) -> F
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
{
    f
}

/// Value and gradient of `f` at `x`.
///
/// Fails if the value or any gradient coordinate is non-finite, naming the
/// first offending coordinate.
pub fn value_and_grad<F>(f: &F, x: &[f64]) -> Result<(f64, Vec<f64>), NumericsError>
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t> + ?Sized,
{
    let tape = Tape::new();
    let vars = tape.vars(x);
    let out = f(&vars);
    if !out.val.is_finite() {
        return Err(NumericsError::NonFiniteValue { value: out.val });
    }
    let g = tape.gradient(&out, &vars);
    if let Some(coord) = g.iter().position(|v| !v.is_finite()) {
        return Err(NumericsError::NonFiniteGradient {
            coord,
            value: g[coord],
        });
    }
    Ok((out.val, g))
}

pub fn grad<F>(f: &F, x: &[f64]) -> Result<Vec<f64>, NumericsError>
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t> + ?Sized,
{
    value_and_grad(f, x).map(|(_, g)| g)
}

/// Evaluates `f` without recording anything.
pub fn eval<F>(f: &F, x: &[f64]) -> f64
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t> + ?Sized,
{
    let vars: Vec<Var<'_>> = x.iter().map(|&v| Var::constant(v)).collect();
    f(&vars).val
}

/// Default step for [`central_difference`].
pub const FD_STEP: f64 = 1e-5;

/// Central finite-difference gradient.
pub fn central_difference<F>(f: &F, x: &[f64], h: f64) -> Vec<f64>
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t> + ?Sized,
{
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = eval(f, &probe);
            probe[i] = orig - h;
            let down = eval(f, &probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Relative discrepancy used by every gradient check in the crate:
/// `|a - b| / max(|a|, |b|, 1)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compares the tape gradient against central differences.
pub fn check_gradient<F>(f: &F, x: &[f64]) -> Result<GradCheck, NumericsError>
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t> + ?Sized,
{
    let analytic = grad(f, x)?;
    let numeric = central_difference(f, x, FD_STEP);
    let max_rel_error = analytic
        .iter()
        .zip(&numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max);
    Ok(GradCheck {
        analytic,
        numeric,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sq<'t>(x: &[Var<'t>]) -> Var<'t> {
        x.iter().fold(Var::constant(0.0), |acc, &v| acc + v * v)
    }

    #[test]
    fn quadratic_gradient() {
        let g = grad(&sq, &[1.0, 2.0]).unwrap();
        assert_eq!(g, vec![2.0, 4.0]);
    }

    #[test]
    fn linear_sum_gradient_is_ones() {
        let f = objective(|x| { x.iter().fold(Var::constant(0.0), |a, &v| a + v) });
        let g = grad(&f, &[3.0, -1.5, 7.25]).unwrap();
        assert_eq!(g, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn reused_variable_accumulates() {
        let f = objective(|x| { x[0] * x[0] * x[0] + x[0].exp() });
        let g = grad(&f, &[0.7]).unwrap();
        assert!((g[0] - (3.0 * 0.49 + 0.7f64.exp())).abs() < 1e-12);
    }

    #[test]
    fn transcendental_ops_match_finite_differences() {
        let f = objective(|x| {
            (x[0] * x[1]).tanh() + (x[1] * x[1] + 1.0).ln() + x[2].sigmoid() * x[0].sqrt()
                - x[2] / (x[0] + 2.0)
                + x[1].powi(3)
        });
        let chk = check_gradient(&f, &[0.8, -0.3, 1.7]).unwrap();
        assert!(chk.passes(1e-6), "{chk:?}");
    }

    #[test]
    fn non_finite_gradient_names_coordinate() {
        let f = objective(|x| { x[0] + x[1].sqrt() });
        match grad(&f, &[1.0, 0.0]) {
            Err(NumericsError::NonFiniteGradient { coord, .. }) => assert_eq!(coord, 1),
            other => panic!("expected non-finite gradient, got {other:?}"),
        }
    }

    #[test]
    fn constants_do_not_touch_the_tape() {
        let tape = Tape::new();
        let x = tape.var(2.0);
        let c = Var::constant(3.0) * Var::constant(4.0);
        assert!(!c.is_recorded());
        let y = x * c;
        assert_eq!(tape.len(), 2);
        assert_eq!(tape.gradient(&y, &[x]), vec![12.0]);
    }

    #[test]
    fn sigmoid_is_stable_at_extremes() {
        assert_eq!(Scalar::sigmoid(800.0f64), 1.0);
        assert_eq!(Scalar::sigmoid(-800.0f64), 0.0);
        let tape = Tape::new();
        let x = tape.var(-800.0);
        let s = x.sigmoid();
        assert!(tape.gradient(&s, &[x])[0].is_finite());
    }
}
