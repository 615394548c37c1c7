//! Causal primitives: typed six-tuples `(I, O, C, F, A, U)`.
//!
//! A primitive is either atomic (one executor plus activation and
//! uncertainty maps) or a composite produced by the algebra. Both evaluate
//! through [`Primitive::eval`], generic over [`Scalar`], so composites are
//! differentiable in all of their children's parameters.

mod executor;
mod library;

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{descend, objective, Descent, NumericsError, OptimizerConfig, Rng, Scalar, Var};
use crate::types::{TypeError, TypeSig};

pub use executor::{softmax, Executor, Nonlinearity, RuleOp};
pub use library::{seed_library, LIBRARY_SIZE};

/// Abstraction layers, ordered from concrete to abstract.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Layer {
    Phys,
    Func,
    Event,
    Rule,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::Phys, Layer::Func, Layer::Event, Layer::Rule];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Layer::Phys => "Phys",
            Layer::Func => "Func",
            Layer::Event => "Event",
            Layer::Rule => "Rule",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Named slot values.
pub type ValueMap = BTreeMap<String, Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PrimitiveError {
    #[error("slot `{slot}`: {reason}")]
    Signature { slot: String, reason: String },
    #[error("condition references missing slot `{slot}` (index {index})")]
    MissingSlot { slot: String, index: usize },
    #[error("executor mismatch: {0}")]
    Shape(String),
    #[error("invalid primitive: {0}")]
    Invalid(String),
    #[error("unsupported document version {0}")]
    Version(u32),
    #[error(transparent)]
    Type(#[from] TypeError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("json: {0}")]
    Json(String),
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
}

/// Steepness of soft threshold predicates.
const THRESHOLD_SHARPNESS: f64 = 10.0;

/// Condition over input slot values, evaluated to a truth degree in [0,1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Predicate {
    Threshold {
        slot: String,
        index: usize,
        value: f64,
        above: bool,
    },
    Equality {
        slot: String,
        index: usize,
        value: f64,
        tol: f64,
    },
    And(Vec<Predicate>),
}

impl Predicate {
    fn check(&self, sig: &TypeSig) -> Result<(), PrimitiveError> {
        match self {
            Predicate::Threshold { slot, index, .. } | Predicate::Equality { slot, index, .. } => {
                match sig.get(slot) {
                    Some(s) if *index < s.ty.flat_dim() => Ok(()),
                    _ => Err(PrimitiveError::MissingSlot {
                        slot: slot.clone(),
                        index: *index,
                    }),
                }
            }
            Predicate::And(parts) => parts.iter().try_for_each(|p| p.check(sig)),
        }
    }

    fn truth<S: Scalar>(&self, sig: &TypeSig, x: &[S]) -> S {
        match self {
            Predicate::Threshold {
                slot,
                index,
                value,
                above,
            } => {
                let v = x[slot_offset(sig, slot) + index];
                let d = (v - *value) * THRESHOLD_SHARPNESS;
                if *above {
                    d.sigmoid()
                } else {
                    (-d).sigmoid()
                }
            }
            Predicate::Equality {
                slot,
                index,
                value,
                tol,
            } => {
                let d = (x[slot_offset(sig, slot) + index] - *value) / *tol;
                (-(d * d)).exp()
            }
            Predicate::And(parts) => parts.iter().fold(S::one(), |a, p| a * p.truth(sig, x)),
        }
    }

    pub(crate) fn prefixed(&self, prefix: &str) -> Predicate {
        match self {
            Predicate::Threshold {
                slot,
                index,
                value,
                above,
            } => Predicate::Threshold {
                slot: format!("{prefix}.{slot}"),
                index: *index,
                value: *value,
                above: *above,
            },
            Predicate::Equality {
                slot,
                index,
                value,
                tol,
            } => Predicate::Equality {
                slot: format!("{prefix}.{slot}"),
                index: *index,
                value: *value,
                tol: *tol,
            },
            Predicate::And(parts) => Predicate::And(parts.iter().map(|p| p.prefixed(prefix)).collect()),
        }
    }
}

fn slot_offset(sig: &TypeSig, name: &str) -> usize {
    let mut off = 0;
    for s in sig.slots() {
        if s.name == name {
            return off;
        }
        off += s.ty.flat_dim();
    }
    panic!("slot `{name}` validated at construction")
}

/// Activation map `A`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Constant(f64),
    /// `sigmoid(bias + Σ w_k c_k(x))`; parameters are the bias followed by one
    /// weight per condition.
    Logistic,
}

/// Uncertainty map `U = u0 + u1·mean(x²) + u2·mean(y²)` with fixed
/// nonnegative coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Uncertainty {
    pub u0: f64,
    pub u1: f64,
    pub u2: f64,
}

impl Default for Uncertainty {
    fn default() -> Self {
        Uncertainty {
            u0: 0.01,
            u1: 0.01,
            u2: 0.01,
        }
    }
}

impl Uncertainty {
    pub const ZERO: Uncertainty = Uncertainty {
        u0: 0.0,
        u1: 0.0,
        u2: 0.0,
    };

    fn eval<S: Scalar>(&self, x: &[S], y: &[S]) -> S {
        S::cst(self.u0) + mean_sq(x) * self.u1 + mean_sq(y) * self.u2
    }
}

fn mean_sq<S: Scalar>(v: &[S]) -> S {
    if v.is_empty() {
        return S::zero();
    }
    v.iter().fold(S::zero(), |a, &b| a + b * b) / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Body {
    Atomic {
        executor: Executor,
        activation: Activation,
        uncertainty: Uncertainty,
        /// Squash unit-typed outputs through a sigmoid.
        squash: bool,
        params: Vec<f64>,
    },
    /// `second ∘ first`; `gather[k]` is the flat output index of `first`
    /// feeding flat input `k` of `second`.
    Seq {
        first: Box<Primitive>,
        second: Box<Primitive>,
        gather: Vec<usize>,
    },
    Par {
        left: Box<Primitive>,
        right: Box<Primitive>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub id: String,
    pub layer: Layer,
    pub in_sig: TypeSig,
    pub out_sig: TypeSig,
    pub conditions: Vec<Predicate>,
    pub body: Body,
}

/// Result of evaluating a primitive: activation, outputs, uncertainty.
#[derive(Debug, Clone, PartialEq)]
pub struct Eval<S> {
    pub a: S,
    pub y: Vec<S>,
    pub u: S,
}

/// Construction recipe for an atomic primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveSpec {
    pub id: String,
    pub layer: Layer,
    pub in_sig: TypeSig,
    pub out_sig: TypeSig,
    #[serde(default)]
    pub conditions: Vec<Predicate>,
    pub executor: Executor,
    pub activation: Activation,
    #[serde(default)]
    pub uncertainty: Uncertainty,
    #[serde(default = "default_squash")]
    pub squash: bool,
}

fn default_squash() -> bool {
    true
}

impl PrimitiveSpec {
    pub fn new(id: &str, layer: Layer, in_sig: TypeSig, out_sig: TypeSig, executor: Executor) -> Self {
        PrimitiveSpec {
            id: id.to_string(),
            layer,
            in_sig,
            out_sig,
            conditions: vec![],
            executor,
            activation: Activation::Constant(1.0),
            uncertainty: Uncertainty::default(),
            squash: true,
        }
    }

    pub fn with_conditions(mut self, conditions: Vec<Predicate>) -> Self {
        self.conditions = conditions;
        self.activation = Activation::Logistic;
        self
    }
}

/// Builds a primitive with parameters drawn uniformly from [-0.1, 0.1].
pub fn make_primitive(spec: PrimitiveSpec, rng: &mut Rng) -> Result<Primitive, PrimitiveError> {
    let n_act = match spec.activation {
        Activation::Constant(_) => 0,
        Activation::Logistic => 1 + spec.conditions.len(),
    };
    let mut params = spec.executor.init_params(rng);
    params.extend((0..n_act).map(|_| rng.random_range(-0.1..=0.1)));
    let p = Primitive {
        id: spec.id,
        layer: spec.layer,
        in_sig: spec.in_sig,
        out_sig: spec.out_sig,
        conditions: spec.conditions,
        body: Body::Atomic {
            executor: spec.executor,
            activation: spec.activation,
            uncertainty: spec.uncertainty,
            squash: spec.squash,
            params,
        },
    };
    p.validate()?;
    Ok(p)
}

const DOC_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PrimitiveDoc {
    version: u32,
    primitive: Primitive,
}

impl Primitive {
    /// Linear map `y = W x + b` with `W` given row-major (out × in).
    pub fn linear(
        id: &str,
        layer: Layer,
        in_sig: TypeSig,
        out_sig: TypeSig,
        weights: &[f64],
        bias: &[f64],
    ) -> Result<Self, PrimitiveError> {
        let (n_in, n_out) = (in_sig.flat_dim(), out_sig.flat_dim());
        let mut params = weights.to_vec();
        params.extend_from_slice(bias);
        let p = Primitive {
            id: id.to_string(),
            layer,
            in_sig,
            out_sig,
            conditions: vec![],
            body: Body::Atomic {
                executor: Executor::AffineNet {
                    widths: vec![n_in, n_out],
                    nonlinearity: Nonlinearity::Identity,
                },
                activation: Activation::Constant(1.0),
                uncertainty: Uncertainty::ZERO,
                squash: false,
                params,
            },
        };
        p.validate()?;
        Ok(p)
    }

    /// Identity map on `sig` with activation 1 and zero uncertainty.
    pub fn identity(id: &str, layer: Layer, sig: TypeSig) -> Self {
        let d = sig.flat_dim();
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            w[i * d + i] = 1.0;
        }
        Self::linear(id, layer, sig.clone(), sig, &w, &vec![0.0; d]).expect("square identity")
    }

    pub fn constant(id: &str, layer: Layer, in_sig: TypeSig, out_sig: TypeSig, value: Vec<f64>) -> Result<Self, PrimitiveError> {
        let p = Primitive {
            id: id.to_string(),
            layer,
            in_sig,
            out_sig,
            conditions: vec![],
            body: Body::Atomic {
                executor: Executor::Constant { value },
                activation: Activation::Constant(1.0),
                uncertainty: Uncertainty::ZERO,
                squash: false,
                params: vec![],
            },
        };
        p.validate()?;
        Ok(p)
    }

    pub fn is_atomic(&self) -> bool {
        matches!(self.body, Body::Atomic { .. })
    }

    pub fn in_dim(&self) -> usize {
        self.in_sig.flat_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.out_sig.flat_dim()
    }

    pub fn n_params(&self) -> usize {
        match &self.body {
            Body::Atomic { params, .. } => params.len(),
            Body::Seq { first, second, .. } => first.n_params() + second.n_params(),
            Body::Par { left, right } => left.n_params() + right.n_params(),
        }
    }

    /// All parameters, children in order for composites.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        self.collect_params(&mut out);
        out
    }

    fn collect_params(&self, out: &mut Vec<f64>) {
        match &self.body {
            Body::Atomic { params, .. } => out.extend_from_slice(params),
            Body::Seq { first, second, .. } => {
                first.collect_params(out);
                second.collect_params(out);
            }
            Body::Par { left, right } => {
                left.collect_params(out);
                right.collect_params(out);
            }
        }
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), PrimitiveError> {
        if p.len() != self.n_params() {
            return Err(PrimitiveError::Shape(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                p.len()
            )));
        }
        self.assign_params(p);
        Ok(())
    }

    fn assign_params(&mut self, p: &[f64]) {
        match &mut self.body {
            Body::Atomic { params, .. } => params.copy_from_slice(p),
            Body::Seq { first, second, .. } => {
                let n = first.n_params();
                first.assign_params(&p[..n]);
                second.assign_params(&p[n..]);
            }
            Body::Par { left, right } => {
                let n = left.n_params();
                left.assign_params(&p[..n]);
                right.assign_params(&p[n..]);
            }
        }
    }

    pub fn with_params(mut self, p: &[f64]) -> Result<Self, PrimitiveError> {
        self.set_params(p)?;
        Ok(self)
    }

    /// Copy under a new id.
    pub fn renamed(&self, id: &str) -> Primitive {
        Primitive {
            id: id.to_string(),
            ..self.clone()
        }
    }

    /// Executor family, or the composition operator for composites.
    pub fn family(&self) -> &'static str {
        match &self.body {
            Body::Atomic { executor, .. } => executor.family(),
            Body::Seq { .. } => "seq",
            Body::Par { .. } => "par",
        }
    }

    /// True if any atomic executor inside has derivative kinks.
    pub fn has_kinks(&self) -> bool {
        match &self.body {
            Body::Atomic { executor, .. } => executor.has_kinks(),
            Body::Seq { first, second, .. } => first.has_kinks() || second.has_kinks(),
            Body::Par { left, right } => left.has_kinks() || right.has_kinks(),
        }
    }

    pub fn validate(&self) -> Result<(), PrimitiveError> {
        for c in &self.conditions {
            c.check(&self.in_sig)?;
        }
        match &self.body {
            Body::Atomic {
                executor,
                activation,
                uncertainty,
                params,
                ..
            } => {
                if let Some(d) = executor.in_dim() {
                    if d != self.in_dim() {
                        return Err(PrimitiveError::Shape(format!(
                            "{} executor reads {d} values but in_sig has {}",
                            executor.family(),
                            self.in_dim()
                        )));
                    }
                }
                if executor.out_dim() != self.out_dim() {
                    return Err(PrimitiveError::Shape(format!(
                        "{} executor writes {} values but out_sig has {}",
                        executor.family(),
                        executor.out_dim(),
                        self.out_dim()
                    )));
                }
                if let Executor::AffineNet { widths, .. } = executor {
                    if widths.len() < 2 || widths.contains(&0) {
                        return Err(PrimitiveError::Shape(format!("bad widths {widths:?}")));
                    }
                }
                if let Executor::SoftRule { .. } = executor {
                    if !self.in_mask().iter().all(|&u| u) {
                        return Err(PrimitiveError::Invalid(
                            "soft rules need unit-interval inputs".into(),
                        ));
                    }
                }
                if let Executor::Constant { value } = executor {
                    check_values(&self.out_sig, value)?;
                }
                let n_act = match activation {
                    Activation::Constant(a) => {
                        if !(0.0..=1.0).contains(a) {
                            return Err(PrimitiveError::Invalid(format!("activation {a}")));
                        }
                        0
                    }
                    Activation::Logistic => 1 + self.conditions.len(),
                };
                if params.len() != executor.n_params() + n_act {
                    return Err(PrimitiveError::Shape(format!(
                        "expected {} parameters, got {}",
                        executor.n_params() + n_act,
                        params.len()
                    )));
                }
                if params.iter().any(|v| !v.is_finite()) {
                    return Err(PrimitiveError::Invalid("non-finite parameter".into()));
                }
                let Uncertainty { u0, u1, u2 } = *uncertainty;
                if !(u0 >= 0.0 && u1 >= 0.0 && u2 >= 0.0) {
                    return Err(PrimitiveError::Invalid("negative uncertainty coefficient".into()));
                }
                Ok(())
            }
            Body::Seq { first, second, gather } => {
                first.validate()?;
                second.validate()?;
                if gather.len() != second.in_dim() || gather.iter().any(|&g| g >= first.out_dim()) {
                    return Err(PrimitiveError::Shape("bad sequential gather map".into()));
                }
                Ok(())
            }
            Body::Par { left, right } => {
                left.validate()?;
                right.validate()
            }
        }
    }

    fn in_mask(&self) -> Vec<bool> {
        self.in_sig.slots().iter().flat_map(|s| s.ty.unit_mask()).collect()
    }

    fn out_mask(&self) -> Vec<bool> {
        self.out_sig.slots().iter().flat_map(|s| s.ty.unit_mask()).collect()
    }

    /// Evaluates with explicit parameters (length `n_params`), no checks.
    pub fn eval<S: Scalar>(&self, params: &[S], x: &[S]) -> Eval<S> {
        match &self.body {
            Body::Atomic {
                executor,
                activation,
                uncertainty,
                squash,
                ..
            } => {
                let ne = executor.n_params();
                let mut y = executor.forward(&params[..ne], x);
                if *squash && !executor.bounded_output() {
                    for (v, unit) in y.iter_mut().zip(self.out_mask()) {
                        if unit {
                            *v = v.sigmoid();
                        }
                    }
                }
                let a = match activation {
                    Activation::Constant(a) => S::cst(*a),
                    Activation::Logistic => {
                        let ap = &params[ne..];
                        let z = self
                            .conditions
                            .iter()
                            .enumerate()
                            .fold(ap[0], |acc, (k, c)| acc + ap[k + 1] * c.truth(&self.in_sig, x));
                        z.sigmoid()
                    }
                };
                let u = uncertainty.eval(x, &y);
                Eval { a, y, u }
            }
            Body::Seq { first, second, gather } => {
                let n1 = first.n_params();
                let e1 = first.eval(&params[..n1], x);
                let x2: Vec<S> = gather.iter().map(|&g| e1.y[g]).collect();
                let e2 = second.eval(&params[n1..], &x2);
                Eval {
                    a: e1.a * e2.a,
                    y: e2.y,
                    u: e1.u + e2.u,
                }
            }
            Body::Par { left, right } => {
                let n1 = left.n_params();
                let d1 = left.in_dim();
                let e1 = left.eval(&params[..n1], &x[..d1]);
                let e2 = right.eval(&params[n1..], &x[d1..]);
                let mut y = e1.y;
                y.extend(e2.y);
                Eval {
                    a: e1.a * e2.a,
                    y,
                    u: e1.u + e2.u,
                }
            }
        }
    }

    /// Evaluates with the stored parameters, checking conformance of inputs
    /// and outputs.
    pub fn activate_flat(&self, x: &[f64]) -> Result<Eval<f64>, PrimitiveError> {
        check_values(&self.in_sig, x)?;
        let e = self.eval(&self.params(), x);
        check_values(&self.out_sig, &e.y)?;
        if !(e.a.is_finite() && (0.0..=1.0).contains(&e.a)) {
            return Err(PrimitiveError::Invalid(format!("activation {} outside [0,1]", e.a)));
        }
        if !(e.u.is_finite() && e.u >= 0.0) {
            return Err(PrimitiveError::Invalid(format!("uncertainty {}", e.u)));
        }
        Ok(e)
    }

    /// Named-slot variant of [`activate_flat`](Self::activate_flat).
    pub fn activate(&self, inputs: &ValueMap) -> Result<(f64, ValueMap, f64), PrimitiveError> {
        let x = flatten(&self.in_sig, inputs)?;
        let e = self.activate_flat(&x)?;
        Ok((e.a, unflatten(&self.out_sig, &e.y), e.u))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PrimitiveDoc {
            version: DOC_VERSION,
            primitive: self.clone(),
        })
        .expect("primitives serialize")
    }

    pub fn from_json(s: &str) -> Result<Self, PrimitiveError> {
        let doc: PrimitiveDoc = serde_json::from_str(s).map_err(|e| PrimitiveError::Json(e.to_string()))?;
        if doc.version != DOC_VERSION {
            return Err(PrimitiveError::Version(doc.version));
        }
        doc.primitive.validate()?;
        Ok(doc.primitive)
    }

    /// Random input conforming to `in_sig`: unit positions in [0,1], others
    /// in [-1,1].
    pub fn random_input(&self, rng: &mut Rng) -> Vec<f64> {
        random_value(&self.in_sig, rng)
    }
}

pub fn random_value(sig: &TypeSig, rng: &mut Rng) -> Vec<f64> {
    sig.slots()
        .iter()
        .flat_map(|s| s.ty.unit_mask())
        .map(|unit| {
            if unit {
                rng.random_range(0.0..=1.0)
            } else {
                rng.random_range(-1.0..=1.0)
            }
        })
        .collect()
}

/// Checks a flat value against a signature, naming the first bad slot.
pub fn check_values(sig: &TypeSig, x: &[f64]) -> Result<(), PrimitiveError> {
    if x.len() != sig.flat_dim() {
        return Err(PrimitiveError::Signature {
            slot: sig.slots().first().map_or("<none>".into(), |s| s.name.clone()),
            reason: format!("expected {} values, got {}", sig.flat_dim(), x.len()),
        });
    }
    let mut off = 0;
    for s in sig.slots() {
        let d = s.ty.flat_dim();
        for (k, unit) in s.ty.unit_mask().into_iter().enumerate() {
            let v = x[off + k];
            if !v.is_finite() {
                return Err(PrimitiveError::Signature {
                    slot: s.name.clone(),
                    reason: format!("non-finite value at index {k}"),
                });
            }
            if unit && !(0.0..=1.0).contains(&v) {
                return Err(PrimitiveError::Signature {
                    slot: s.name.clone(),
                    reason: format!("value {v} at index {k} outside [0,1] for {}", s.ty),
                });
            }
        }
        off += d;
    }
    Ok(())
}

pub fn flatten(sig: &TypeSig, values: &ValueMap) -> Result<Vec<f64>, PrimitiveError> {
    let mut x = Vec::with_capacity(sig.flat_dim());
    for s in sig.slots() {
        let v = values.get(&s.name).ok_or_else(|| PrimitiveError::Signature {
            slot: s.name.clone(),
            reason: "missing".into(),
        })?;
        if v.len() != s.ty.flat_dim() {
            return Err(PrimitiveError::Signature {
                slot: s.name.clone(),
                reason: format!("expected {} values, got {}", s.ty.flat_dim(), v.len()),
            });
        }
        x.extend_from_slice(v);
    }
    if let Some(extra) = values.keys().find(|k| sig.get(k).is_none()) {
        return Err(PrimitiveError::Signature {
            slot: extra.clone(),
            reason: "not in signature".into(),
        });
    }
    Ok(x)
}

pub fn unflatten(sig: &TypeSig, x: &[f64]) -> ValueMap {
    let mut out = ValueMap::new();
    let mut off = 0;
    for s in sig.slots() {
        let d = s.ty.flat_dim();
        out.insert(s.name.clone(), x[off..off + d].to_vec());
        off += d;
    }
    out
}

/// Shannon entropy (bits) of a 16-bin histogram over the sample range.
pub fn histogram_entropy(values: &[f64], bins: usize) -> f64 {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || hi - lo <= 0.0 {
        return 0.0;
    }
    let mut counts = vec![0usize; bins];
    for &v in values {
        let b = (((v - lo) / (hi - lo)) * bins as f64) as usize;
        counts[b.min(bins - 1)] += 1;
    }
    let n = values.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum()
}

pub const ENTROPY_BINS: usize = 16;

/// Mean per-output-dimension histogram entropy of the executor outputs.
pub fn estimate_entropy(p: &Primitive, samples: &[Vec<f64>]) -> Result<f64, PrimitiveError> {
    if samples.len() < 2 {
        return Err(PrimitiveError::TooFewSamples {
            need: 2,
            got: samples.len(),
        });
    }
    let outputs = samples
        .iter()
        .map(|x| p.activate_flat(x).map(|e| e.y))
        .collect::<Result<Vec<_>, _>>()?;
    let d = p.out_dim();
    if d == 0 {
        return Ok(0.0);
    }
    let total: f64 = (0..d)
        .map(|k| {
            let col: Vec<f64> = outputs.iter().map(|y| y[k]).collect();
            histogram_entropy(&col, ENTROPY_BINS)
        })
        .sum();
    Ok(total / d as f64)
}

/// Mean squared error of the primitive's outputs on a flat dataset.
pub fn dataset_mse(p: &Primitive, data: &[(Vec<f64>, Vec<f64>)]) -> f64 {
    let params = p.params();
    let total: f64 = data
        .iter()
        .map(|(x, t)| {
            let y = p.eval(&params, x).y;
            y.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / t.len().max(1) as f64
        })
        .sum();
    total / data.len().max(1) as f64
}

/// Fits all parameters to minimize mean squared output error.
pub fn fit_primitive(
    p: &Primitive,
    data: &[(Vec<f64>, Vec<f64>)],
    cfg: &OptimizerConfig,
) -> Result<(Primitive, Descent), PrimitiveError> {
    if data.is_empty() {
        return Err(PrimitiveError::TooFewSamples { need: 1, got: 0 });
    }
    for (x, t) in data {
        if x.len() != p.in_dim() || t.len() != p.out_dim() {
            return Err(PrimitiveError::Shape(format!(
                "sample shapes ({}, {}) do not match ({}, {})",
                x.len(),
                t.len(),
                p.in_dim(),
                p.out_dim()
            )));
        }
    }
    let inputs: Vec<Vec<Var<'static>>> = data
        .iter()
        .map(|(x, _)| x.iter().map(|&v| Var::constant(v)).collect())
        .collect();
    let scale = 1.0 / (data.len() * p.out_dim().max(1)) as f64;
    let loss = objective(|theta| {
        let mut total = Var::constant(0.0);
        for ((_, t), x) in data.iter().zip(&inputs) {
            let y = p.eval(theta, x).y;
            for (yi, &ti) in y.into_iter().zip(t) {
                let d = yi - ti;
                total = total + d * d;
            }
        }
        total * scale
    });
    let run = descend(&loss, &p.params(), cfg, None)?;
    let fitted = p.clone().with_params(&run.x)?;
    Ok((fitted, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, rng};
    use crate::types::CausalType;

    fn phys(n: &str) -> TypeSig {
        TypeSig::of(&[(n, CausalType::PHYS)])
    }

    #[test]
    fn identity_echoes_inputs() {
        let p = Primitive::identity("id", Layer::Phys, phys("x"));
        let e = p.activate_flat(&[0.7]).unwrap();
        assert_eq!(e.y, vec![0.7]);
        assert_eq!(e.a, 1.0);
        assert_eq!(e.u, 0.0);
    }

    #[test]
    fn linear_executor_and_its_gradient() {
        let p = Primitive::linear("lin", Layer::Phys, phys("x"), phys("y"), &[2.0], &[0.0]).unwrap();
        assert_eq!(p.activate_flat(&[0.5]).unwrap().y, vec![1.0]);
        let f = objective(|theta| p.eval(theta, &[Var::constant(0.5)]).y[0]);
        let chk = check_gradient(&f, &p.params()).unwrap();
        assert!(chk.passes(1e-4));
        assert!((chk.analytic[0] - 0.5).abs() < 1e-12 && (chk.analytic[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_ignores_input() {
        let p = Primitive::constant("c", Layer::Phys, phys("x"), phys("y"), vec![4.0]).unwrap();
        assert_eq!(p.n_params(), 0);
        for x in [-1.0, 0.0, 3.0] {
            assert_eq!(p.activate_flat(&[x]).unwrap().y, vec![4.0]);
        }
        let samples: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        assert_eq!(estimate_entropy(&p, &samples).unwrap(), 0.0);
    }

    #[test]
    fn signature_violation_names_slot() {
        let sig = TypeSig::of(&[("x", CausalType::PHYS), ("r", CausalType::RULE)]);
        let p = Primitive::identity("id", Layer::Rule, sig);
        match p.activate_flat(&[0.0, 1.5]) {
            Err(PrimitiveError::Signature { slot, .. }) => assert_eq!(slot, "r"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn condition_on_missing_slot_rejected() {
        let spec = PrimitiveSpec::new(
            "p",
            Layer::Phys,
            phys("x"),
            phys("y"),
            Executor::AffineNet {
                widths: vec![1, 1],
                nonlinearity: Nonlinearity::Identity,
            },
        )
        .with_conditions(vec![Predicate::Threshold {
            slot: "z".into(),
            index: 0,
            value: 0.0,
            above: true,
        }]);
        assert!(matches!(
            make_primitive(spec, &mut rng(0)),
            Err(PrimitiveError::MissingSlot { .. })
        ));
    }

    #[test]
    fn entropy_of_four_equal_bins_is_two_bits() {
        let v: Vec<f64> = (0..400).map(|i| (i % 4) as f64).collect();
        assert!((histogram_entropy(&v, 16) - 2.0).abs() < 1e-12);
        assert!(estimate_entropy(&Primitive::identity("i", Layer::Phys, phys("x")), &[vec![1.0]]).is_err());
    }

    #[test]
    fn fit_linear_slope() {
        let p = Primitive::linear("lin", Layer::Phys, phys("x"), phys("y"), &[0.0], &[0.0]).unwrap();
        let data: Vec<(Vec<f64>, Vec<f64>)> = (0..100)
            .map(|i| {
                let x = -1.0 + 2.0 * i as f64 / 99.0;
                (vec![x], vec![3.0 * x])
            })
            .collect();
        let (fit, run) = fit_primitive(&p, &data, &OptimizerConfig::gd(0.4, 3000)).unwrap();
        assert!((fit.params()[0] - 3.0).abs() < 1e-6);
        assert!(run.is_monotone());
    }

    #[test]
    fn zero_budget_leaves_params() {
        let p = Primitive::linear("lin", Layer::Phys, phys("x"), phys("y"), &[0.3], &[0.1]).unwrap();
        let data = vec![(vec![1.0], vec![2.0])];
        let (fit, _) = fit_primitive(&p, &data, &OptimizerConfig::gd(0.1, 0)).unwrap();
        assert_eq!(fit.params(), p.params());
    }

    #[test]
    fn json_roundtrip() {
        for p in seed_library(7) {
            let q = Primitive::from_json(&p.to_json()).unwrap();
            assert_eq!(p, q);
        }
    }
}
