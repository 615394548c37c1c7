//! Sequential and parallel composition, the abstraction order, and an
//! axiom-checking harness.
//!
//! Axioms hold as behavioral equality on probe inputs. Composition trees are
//! never normalized, so two sides of an axiom are structurally different
//! primitives that must agree on outputs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;
use crate::primitives::{Body, Primitive, PrimitiveError};
use crate::types::{signatures_compatible, Binding, TypeSig};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AlgebraError {
    #[error("cannot compose `{first}` then `{second}`: input slot `{slot}` has no compatible output")]
    Incompatible {
        first: String,
        second: String,
        slot: String,
    },
    #[error("slot name collision `{0}` in parallel composition")]
    SlotCollision(String),
    #[error("registering {low} ⪯ {high} would create a cycle")]
    Cycle { low: String, high: String },
    #[error("unknown primitive `{0}`")]
    Unknown(String),
    #[error("expression parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error(transparent)]
    Primitive(#[from] PrimitiveError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Operator {
    Seq,
    Par,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeRecord {
    pub operator: Operator,
    pub children: (String, String),
    /// Input slot of the right child → output slot of the left child (⊗ only).
    pub binding: Binding,
}

/// `p2 ∘ p1`, gated by slot-level type compatibility.
pub fn compose_seq(p1: &Primitive, p2: &Primitive) -> Result<Primitive, AlgebraError> {
    compose_seq_record(p1, p2).map(|(p, _)| p)
}

pub fn compose_seq_record(p1: &Primitive, p2: &Primitive) -> Result<(Primitive, CompositeRecord), AlgebraError> {
    let binding = signatures_compatible(&p1.out_sig, &p2.in_sig).ok_or_else(|| {
        let slot = p2
            .in_sig
            .slots()
            .iter()
            .find(|i| signatures_compatible(&p1.out_sig, &TypeSig::of(&[(i.name.as_str(), i.ty.clone())])).is_none())
            .map_or_else(String::new, |s| s.name.clone());
        AlgebraError::Incompatible {
            first: p1.id.clone(),
            second: p2.id.clone(),
            slot,
        }
    })?;
    let mut offsets = BTreeMap::new();
    let mut off = 0;
    for s in p1.out_sig.slots() {
        offsets.insert(s.name.as_str(), off);
        off += s.ty.flat_dim();
    }
    let mut gather = Vec::with_capacity(p2.in_dim());
    for (i, o) in &binding {
        let start = offsets[o.as_str()];
        let dim = p2.in_sig.get(i).expect("bound slot").ty.flat_dim();
        gather.extend(start..start + dim);
    }
    let p = Primitive {
        id: format!("seq({},{})", p1.id, p2.id),
        layer: p1.layer.max(p2.layer),
        in_sig: p1.in_sig.clone(),
        out_sig: p2.out_sig.clone(),
        conditions: p1.conditions.clone(),
        body: Body::Seq {
            first: Box::new(p1.clone()),
            second: Box::new(p2.clone()),
            gather,
        },
    };
    p.validate()?;
    let record = CompositeRecord {
        operator: Operator::Seq,
        children: (p1.id.clone(), p2.id.clone()),
        binding,
    };
    Ok((p, record))
}

/// Slot prefix for a child of a parallel composite. Parallel children keep
/// their (already prefixed) names so that ⊕ is associative on slot names.
fn slot_prefix(p: &Primitive) -> Option<String> {
    if matches!(p.body, Body::Par { .. }) {
        return None;
    }
    Some(
        p.id.chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '_' { c } else { '_' })
            .collect(),
    )
}

fn namespaced(p: &Primitive) -> (TypeSig, TypeSig, Vec<crate::primitives::Predicate>) {
    match slot_prefix(p) {
        None => (p.in_sig.clone(), p.out_sig.clone(), p.conditions.clone()),
        Some(pre) => (
            p.in_sig.prefixed(&pre),
            p.out_sig.prefixed(&pre),
            p.conditions.iter().map(|c| c.prefixed(&pre)).collect(),
        ),
    }
}

/// Simultaneous activation: disjoint-union signatures, `A = A₁·A₂`,
/// `U = U₁ + U₂`.
pub fn compose_par(p1: &Primitive, p2: &Primitive) -> Result<Primitive, AlgebraError> {
    let (in1, out1, c1) = namespaced(p1);
    let (in2, out2, c2) = namespaced(p2);
    let collision = |e: crate::types::TypeError| match e {
        crate::types::TypeError::DuplicateSlot(s) => AlgebraError::SlotCollision(s),
        other => AlgebraError::Primitive(other.into()),
    };
    let in_sig = in1.concat(&in2).map_err(collision)?;
    let out_sig = out1.concat(&out2).map_err(collision)?;
    let mut conditions = c1;
    conditions.extend(c2);
    let p = Primitive {
        id: format!("par({},{})", p1.id, p2.id),
        layer: p1.layer.max(p2.layer),
        in_sig,
        out_sig,
        conditions,
        body: Body::Par {
            left: Box::new(p1.clone()),
            right: Box::new(p2.clone()),
        },
    };
    p.validate()?;
    Ok(p)
}

/// Largest absolute difference over outputs, activation and uncertainty.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Discrepancy {
    pub output: f64,
    pub activation: f64,
    pub uncertainty: f64,
}

impl Discrepancy {
    pub fn max(&self) -> f64 {
        self.output.max(self.activation).max(self.uncertainty)
    }

    fn merge(&mut self, o: Discrepancy) {
        self.output = self.output.max(o.output);
        self.activation = self.activation.max(o.activation);
        self.uncertainty = self.uncertainty.max(o.uncertainty);
    }
}

/// Permutation taking `b`'s flat layout to `a`'s, matching slots by name.
fn name_permutation(a: &TypeSig, b: &TypeSig) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    let mut b_off = BTreeMap::new();
    let mut off = 0;
    for s in b.slots() {
        b_off.insert(s.name.as_str(), (off, &s.ty));
        off += s.ty.flat_dim();
    }
    let mut perm = Vec::with_capacity(a.flat_dim());
    for s in a.slots() {
        let (start, ty) = b_off.get(s.name.as_str())?;
        if *ty != &s.ty {
            return None;
        }
        perm.extend(*start..*start + s.ty.flat_dim());
    }
    Some(perm)
}

/// Compares two primitives on probes drawn over `a`'s input signature,
/// matching slots by name (canonical reordering). `None` when the slot sets
/// differ.
pub fn behavioral_discrepancy(a: &Primitive, b: &Primitive, probes: &[Vec<f64>]) -> Option<Discrepancy> {
    let in_perm = name_permutation(&b.in_sig, &a.in_sig)?;
    let out_perm = name_permutation(&a.out_sig, &b.out_sig)?;
    let (pa, pb) = (a.params(), b.params());
    let mut d = Discrepancy::default();
    for x in probes {
        let xb: Vec<f64> = in_perm.iter().map(|&i| x[i]).collect();
        let ea = a.eval(&pa, x);
        let eb = b.eval(&pb, &xb);
        let out = out_perm
            .iter()
            .enumerate()
            .map(|(k, &j)| (ea.y[k] - eb.y[j]).abs())
            .fold(0.0, f64::max);
        d.merge(Discrepancy {
            output: out,
            activation: (ea.a - eb.a).abs(),
            uncertainty: (ea.u - eb.u).abs(),
        });
    }
    Some(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axiom {
    SeqAssociativity,
    ParAssociativity,
    ParCommutativity,
    Distributivity,
}

impl Axiom {
    pub const ALL: [Axiom; 4] = [
        Axiom::SeqAssociativity,
        Axiom::ParAssociativity,
        Axiom::ParCommutativity,
        Axiom::Distributivity,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomResult {
    pub axiom: Axiom,
    pub triples_checked: usize,
    pub max_discrepancy: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxiomReport {
    pub results: Vec<AxiomResult>,
}

impl AxiomReport {
    pub fn pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }
}

fn probes_for(p: &Primitive, n: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    (0..n).map(|_| p.random_input(rng)).collect()
}

/// Discrepancy of one axiom on one triple; `None` when the triple does not
/// compose as that axiom requires.
pub fn axiom_discrepancy(
    axiom: Axiom,
    (p1, p2, p3): (&Primitive, &Primitive, &Primitive),
    n_probes: usize,
    rng: &mut Rng,
) -> Option<f64> {
    match axiom {
        Axiom::SeqAssociativity => {
            let left = compose_seq(&compose_seq(p1, p2).ok()?, p3).ok()?;
            let right = compose_seq(p1, &compose_seq(p2, p3).ok()?).ok()?;
            let probes = probes_for(&left, n_probes, rng);
            behavioral_discrepancy(&left, &right, &probes).map(|d| d.max())
        }
        Axiom::ParAssociativity => {
            let (p1, p2, p3) = distinct_ids(p1, p2, p3);
            let left = compose_par(&compose_par(&p1, &p2).ok()?, &p3).ok()?;
            let right = compose_par(&p1, &compose_par(&p2, &p3).ok()?).ok()?;
            let probes = probes_for(&left, n_probes, rng);
            behavioral_discrepancy(&left, &right, &probes).map(|d| d.max())
        }
        Axiom::ParCommutativity => {
            let (p1, p2, _) = distinct_ids(p1, p2, p3);
            let left = compose_par(&p1, &p2).ok()?;
            let right = compose_par(&p2, &p1).ok()?;
            let probes = probes_for(&left, n_probes, rng);
            behavioral_discrepancy(&left, &right, &probes).map(|d| d.max())
        }
        Axiom::Distributivity => distributivity_discrepancy(p1, p2, p3, n_probes, rng),
    }
}

/// Gives the three primitives pairwise distinct ids so parallel slot
/// namespaces cannot collide.
fn distinct_ids(p1: &Primitive, p2: &Primitive, p3: &Primitive) -> (Primitive, Primitive, Primitive) {
    (p1.renamed(&format!("{}_1", p1.id)), p2.renamed(&format!("{}_2", p2.id)), p3.renamed(&format!("{}_3", p3.id)))
}

/// `P1⊗(P2⊕P3)` against `(P1⊗P2)⊕(P1'⊗P3)` where `P1'` is a renamed copy
/// of `P1` reading the same input. Only executor outputs are compared: the
/// duplicated `P1` contributes its activation and uncertainty twice on the
/// right-hand side, so the product and sum laws cannot agree there.
fn distributivity_discrepancy(
    p1: &Primitive,
    p2: &Primitive,
    p3: &Primitive,
    n_probes: usize,
    rng: &mut Rng,
) -> Option<f64> {
    let (p1, p2, p3) = distinct_ids(p1, p2, p3);
    let p1b = p1.renamed(&format!("{}_dup", p1.id));
    let left = compose_seq(&p1, &compose_par(&p2, &p3).ok()?).ok()?;
    let right = compose_par(&compose_seq(&p1, &p2).ok()?, &compose_seq(&p1b, &p3).ok()?).ok()?;
    let (pl, pr) = (left.params(), right.params());
    let mut worst = 0.0f64;
    for _ in 0..n_probes {
        let x = left.random_input(rng);
        let mut xx = x.clone();
        xx.extend_from_slice(&x);
        let yl = left.eval(&pl, &x).y;
        let yr = right.eval(&pr, &xx).y;
        if yl.len() != yr.len() {
            return None;
        }
        worst = yl.iter().zip(&yr).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
    }
    Some(worst)
}

/// Checks every axiom on every triple that composes as the axiom requires.
pub fn check_axioms(
    triples: &[(Primitive, Primitive, Primitive)],
    n_probes: usize,
    tol: f64,
    rng: &mut Rng,
) -> AxiomReport {
    let results = Axiom::ALL
        .iter()
        .map(|&axiom| {
            let mut checked = 0;
            let mut worst = 0.0f64;
            for (a, b, c) in triples {
                if let Some(d) = axiom_discrepancy(axiom, (a, b, c), n_probes, rng) {
                    checked += 1;
                    worst = worst.max(d);
                }
            }
            AxiomResult {
                axiom,
                triples_checked: checked,
                max_discrepancy: worst,
                pass: worst <= tol,
            }
        })
        .collect();
    AxiomReport { results }
}

/// Evidence recorded when a pair is registered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub probes: usize,
    pub max_error: f64,
}

/// Behavioral check of `low ⪯ high`: matching slot names and types (up to
/// order), layer order respected, and max output error within `gamma`.
pub fn is_abstraction_of(low: &Primitive, high: &Primitive, probes: &[Vec<f64>], gamma: f64) -> (bool, Certificate) {
    let fail = Certificate {
        probes: probes.len(),
        max_error: f64::INFINITY,
    };
    if probes.is_empty() || low.layer > high.layer {
        return (false, fail);
    }
    let Some(d) = behavioral_discrepancy(low, high, probes) else {
        return (false, fail);
    };
    let cert = Certificate {
        probes: probes.len(),
        max_error: d.output,
    };
    (d.output <= gamma, cert)
}

/// Transitively closed, acyclic abstraction order over primitive ids.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AbstractionRegistry {
    closure: BTreeSet<(String, String)>,
    certificates: BTreeMap<String, BTreeMap<String, Certificate>>,
}

impl AbstractionRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Reflexive query.
    pub fn precedes(&self, low: &str, high: &str) -> bool {
        low == high || self.closure.contains(&(low.to_string(), high.to_string()))
    }

    pub fn register(&mut self, low: &str, high: &str, cert: Certificate) -> Result<(), AlgebraError> {
        if low == high {
            return Ok(());
        }
        if self.precedes(high, low) {
            return Err(AlgebraError::Cycle {
                low: low.into(),
                high: high.into(),
            });
        }
        let below: Vec<String> = std::iter::once(low.to_string())
            .chain(self.closure.iter().filter(|(_, h)| h == low).map(|(l, _)| l.clone()))
            .collect();
        let above: Vec<String> = std::iter::once(high.to_string())
            .chain(self.closure.iter().filter(|(l, _)| l == high).map(|(_, h)| h.clone()))
            .collect();
        for l in &below {
            for h in &above {
                self.closure.insert((l.clone(), h.clone()));
            }
        }
        self.certificates
            .entry(low.to_string())
            .or_default()
            .insert(high.to_string(), cert);
        Ok(())
    }

    /// Directly registered pairs with their certificates.
    pub fn direct(&self) -> impl Iterator<Item = (&str, &str, &Certificate)> {
        self.certificates
            .iter()
            .flat_map(|(l, m)| m.iter().map(move |(h, c)| (l.as_str(), h.as_str(), c)))
    }

    pub fn pairs(&self) -> impl Iterator<Item = &(String, String)> {
        self.closure.iter()
    }

    pub fn is_acyclic(&self) -> bool {
        self.closure.iter().all(|(l, h)| l != h && !self.closure.contains(&(h.clone(), l.clone())))
    }
}

/// Composition expression: `seq(a,b)`, `par(a,b)`, nested, over primitive ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expr {
    Leaf(String),
    Seq(Box<Expr>, Box<Expr>),
    Par(Box<Expr>, Box<Expr>),
}

impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expr::Leaf(id) => f.write_str(id),
            Expr::Seq(a, b) => write!(f, "seq({a},{b})"),
            Expr::Par(a, b) => write!(f, "par({a},{b})"),
        }
    }
}

impl FromStr for Expr {
    type Err = AlgebraError;

    fn from_str(s: &str) -> Result<Self, AlgebraError> {
        let bytes = s.as_bytes();
        let mut pos = 0;
        let e = parse_expr(bytes, &mut pos)?;
        if pos != bytes.len() {
            return Err(AlgebraError::Parse {
                pos,
                msg: "trailing input".into(),
            });
        }
        Ok(e)
    }
}

fn parse_expr(b: &[u8], pos: &mut usize) -> Result<Expr, AlgebraError> {
    let start = *pos;
    while *pos < b.len() && (b[*pos].is_ascii_alphanumeric() || b[*pos] == b'_') {
        *pos += 1;
    }
    if *pos == start {
        return Err(AlgebraError::Parse {
            pos: start,
            msg: "expected identifier".into(),
        });
    }
    let name = std::str::from_utf8(&b[start..*pos]).expect("ascii");
    if *pos < b.len() && b[*pos] == b'(' && (name == "seq" || name == "par") {
        *pos += 1;
        let lhs = parse_expr(b, pos)?;
        expect(b, pos, b',')?;
        let rhs = parse_expr(b, pos)?;
        expect(b, pos, b')')?;
        return Ok(if name == "seq" {
            Expr::Seq(Box::new(lhs), Box::new(rhs))
        } else {
            Expr::Par(Box::new(lhs), Box::new(rhs))
        });
    }
    Ok(Expr::Leaf(name.to_string()))
}

fn expect(b: &[u8], pos: &mut usize, c: u8) -> Result<(), AlgebraError> {
    if *pos < b.len() && b[*pos] == c {
        *pos += 1;
        Ok(())
    } else {
        Err(AlgebraError::Parse {
            pos: *pos,
            msg: format!("expected `{}`", c as char),
        })
    }
}

impl Expr {
    /// Builds the composite over a library keyed by id.
    pub fn build(&self, lib: &BTreeMap<String, Primitive>) -> Result<Primitive, AlgebraError> {
        match self {
            Expr::Leaf(id) => lib.get(id).cloned().ok_or_else(|| AlgebraError::Unknown(id.clone())),
            Expr::Seq(a, b) => compose_seq(&a.build(lib)?, &b.build(lib)?),
            Expr::Par(a, b) => compose_par(&a.build(lib)?, &b.build(lib)?),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Expr::Leaf(_) => 0,
            Expr::Seq(a, b) | Expr::Par(a, b) => 1 + a.depth().max(b.depth()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use crate::primitives::Layer;
    use crate::types::CausalType;

    fn phys(n: &str) -> TypeSig {
        TypeSig::of(&[(n, CausalType::PHYS)])
    }

    fn lin(id: &str, w: f64) -> Primitive {
        Primitive::linear(id, Layer::Phys, phys("x"), phys("x"), &[w], &[0.0]).unwrap()
    }

    #[test]
    fn chain_of_linear_maps() {
        let c = compose_seq(&compose_seq(&lin("a", 2.0), &lin("b", 3.0)).unwrap(), &lin("c", 0.5)).unwrap();
        assert_eq!(c.activate_flat(&[1.0]).unwrap().y, vec![3.0]);
    }

    #[test]
    fn identity_then_p_is_p() {
        let p = lin("p", -1.7);
        let id = Primitive::identity("id", Layer::Phys, phys("x"));
        let c = compose_seq(&id, &p).unwrap();
        let probes: Vec<Vec<f64>> = (0..32).map(|i| vec![i as f64 / 10.0 - 1.6]).collect();
        assert_eq!(behavioral_discrepancy(&c, &p, &probes).unwrap().output, 0.0);
    }

    #[test]
    fn incompatible_composition_rejected() {
        let r = Primitive::identity("r", Layer::Rule, TypeSig::of(&[("r", CausalType::RULE)]));
        assert!(matches!(compose_seq(&lin("a", 1.0), &r), Err(AlgebraError::Incompatible { .. })));
    }

    #[test]
    fn par_doubles_slots_and_multiplies_activation() {
        let p = lin("p", 1.0);
        let pp = compose_par(&p, &p.renamed("q")).unwrap();
        assert_eq!(pp.in_sig.len(), 2);
        assert!(compose_par(&p, &p).is_err());
    }

    #[test]
    fn registry_closure_and_cycles() {
        let c = Certificate {
            probes: 1,
            max_error: 0.0,
        };
        let mut r = AbstractionRegistry::new();
        r.register("a", "b", c).unwrap();
        r.register("b", "c", c).unwrap();
        assert!(r.precedes("a", "c"));
        assert!(r.precedes("a", "a"));
        assert!(r.register("c", "a", c).is_err());
        assert!(r.is_acyclic());
    }

    #[test]
    fn expression_roundtrip() {
        for s in ["a", "seq(a,b)", "par(seq(a,b),par(c,d_2))"] {
            assert_eq!(s.parse::<Expr>().unwrap().to_string(), s);
        }
        assert!("seq(a)".parse::<Expr>().is_err());
    }

    #[test]
    fn axioms_on_linear_triple() {
        let t = vec![(lin("a", 2.0), lin("b", -1.0), lin("c", 0.25))];
        let rep = check_axioms(&t, 32, 1e-12, &mut rng(1));
        assert!(rep.pass(), "{rep:?}");
        assert!(rep.results.iter().all(|r| r.triples_checked == 1));
    }
}
