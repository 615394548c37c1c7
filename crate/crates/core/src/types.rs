//! Causal types, subtyping and slot-level signature matching.
//!
//! Base kinds are mutually incomparable; all structure comes from the
//! constructors. Types print to and parse from a canonical text form such as
//! `Tensor[Phys;3,3]` or `Func[State->Event]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum BaseKind {
    Phys,
    State,
    Event,
    Rule,
}

impl BaseKind {
    pub const ALL: [BaseKind; 4] = [BaseKind::Phys, BaseKind::State, BaseKind::Event, BaseKind::Rule];

    pub fn name(self) -> &'static str {
        match self {
            BaseKind::Phys => "Phys",
            BaseKind::State => "State",
            BaseKind::Event => "Event",
            BaseKind::Rule => "Rule",
        }
    }

    /// Values of this kind are truth degrees or probabilities in [0,1].
    pub fn is_unit_interval(self) -> bool {
        matches!(self, BaseKind::State | BaseKind::Rule)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CausalType {
    Base(BaseKind),
    Tensor { elem: Box<CausalType>, dims: Vec<usize> },
    Func { from: Box<CausalType>, to: Box<CausalType> },
    Product(Vec<CausalType>),
    Sum(Vec<CausalType>),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TypeError {
    #[error("parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },
    #[error("invalid type: {0}")]
    Invalid(String),
    #[error("duplicate slot name `{0}`")]
    DuplicateSlot(String),
}

impl CausalType {
    pub const PHYS: CausalType = CausalType::Base(BaseKind::Phys);
    pub const STATE: CausalType = CausalType::Base(BaseKind::State);
    pub const EVENT: CausalType = CausalType::Base(BaseKind::Event);
    pub const RULE: CausalType = CausalType::Base(BaseKind::Rule);

    pub fn tensor(elem: CausalType, dims: &[usize]) -> Self {
        CausalType::Tensor {
            elem: Box::new(elem),
            dims: dims.to_vec(),
        }
    }

    pub fn func(from: CausalType, to: CausalType) -> Self {
        CausalType::Func {
            from: Box::new(from),
            to: Box::new(to),
        }
    }

    pub fn validate(&self) -> Result<(), TypeError> {
        match self {
            CausalType::Base(_) => Ok(()),
            CausalType::Tensor { elem, dims } => {
                if dims.is_empty() || dims.contains(&0) {
                    return Err(TypeError::Invalid(format!("tensor dims {dims:?}")));
                }
                elem.validate()
            }
            CausalType::Func { from, to } => {
                from.validate()?;
                to.validate()
            }
            CausalType::Product(parts) | CausalType::Sum(parts) => {
                if parts.is_empty() {
                    return Err(TypeError::Invalid("empty product or sum".into()));
                }
                parts.iter().try_for_each(CausalType::validate)
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            CausalType::Base(_) => 0,
            CausalType::Tensor { elem, .. } => 1 + elem.depth(),
            CausalType::Func { from, to } => 1 + from.depth().max(to.depth()),
            CausalType::Product(p) | CausalType::Sum(p) => {
                1 + p.iter().map(CausalType::depth).max().unwrap_or(0)
            }
        }
    }

    /// Length of the flat real vector carrying a value of this type.
    pub fn flat_dim(&self) -> usize {
        match self {
            CausalType::Base(_) => 1,
            CausalType::Tensor { elem, dims } => dims.iter().product::<usize>() * elem.flat_dim(),
            CausalType::Func { from, to } => from.flat_dim() * to.flat_dim(),
            CausalType::Product(p) => p.iter().map(CausalType::flat_dim).sum(),
            CausalType::Sum(p) => p.iter().map(CausalType::flat_dim).max().unwrap_or(0),
        }
    }

    /// Per-position flag: must the value lie in [0,1]?
    pub fn unit_mask(&self) -> Vec<bool> {
        match self {
            CausalType::Base(k) => vec![k.is_unit_interval()],
            CausalType::Tensor { elem, dims } => {
                let m = elem.unit_mask();
                let n: usize = dims.iter().product();
                m.iter().copied().cycle().take(n * m.len()).collect()
            }
            CausalType::Func { .. } => vec![false; self.flat_dim()],
            CausalType::Product(p) => p.iter().flat_map(CausalType::unit_mask).collect(),
            CausalType::Sum(p) => {
                // A position is constrained only if every alternative covering
                // it constrains it.
                let dim = self.flat_dim();
                let masks: Vec<Vec<bool>> = p.iter().map(CausalType::unit_mask).collect();
                (0..dim)
                    .map(|i| masks.iter().all(|m| m.get(i).copied().unwrap_or(true)))
                    .collect()
            }
        }
    }

    /// The dominant base kind (first base reached depth-first).
    pub fn head_kind(&self) -> BaseKind {
        match self {
            CausalType::Base(k) => *k,
            CausalType::Tensor { elem, .. } => elem.head_kind(),
            CausalType::Func { to, .. } => to.head_kind(),
            CausalType::Product(p) | CausalType::Sum(p) => p[0].head_kind(),
        }
    }

    pub fn constructor_index(&self) -> usize {
        match self {
            CausalType::Base(_) => 0,
            CausalType::Tensor { .. } => 1,
            CausalType::Func { .. } => 2,
            CausalType::Product(_) => 3,
            CausalType::Sum(_) => 4,
        }
    }
}

impl fmt::Display for CausalType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CausalType::Base(k) => f.write_str(k.name()),
            CausalType::Tensor { elem, dims } => {
                let d: Vec<String> = dims.iter().map(usize::to_string).collect();
                write!(f, "Tensor[{elem};{}]", d.join(","))
            }
            CausalType::Func { from, to } => write!(f, "Func[{from}->{to}]"),
            CausalType::Product(p) => write!(f, "Product[{}]", join(p)),
            CausalType::Sum(p) => write!(f, "Sum[{}]", join(p)),
        }
    }
}

fn join(parts: &[CausalType]) -> String {
    parts.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

struct Parser<'a> {
    src: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
    fn err<T>(&self, msg: impl Into<String>) -> Result<T, TypeError> {
        Err(TypeError::Parse {
            pos: self.pos,
            msg: msg.into(),
        })
    }

    fn eat(&mut self, s: &str) -> bool {
        if self.src[self.pos..].starts_with(s.as_bytes()) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<(), TypeError> {
        if self.eat(s) {
            Ok(())
        } else {
            self.err(format!("expected `{s}`"))
        }
    }

    fn ident(&mut self) -> &str {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_alphabetic() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("")
    }

    fn number(&mut self) -> Result<usize, TypeError> {
        let start = self.pos;
        while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        let s = std::str::from_utf8(&self.src[start..self.pos]).unwrap_or("");
        match s.parse::<usize>() {
            Ok(n) if n > 0 && !s.starts_with('0') => Ok(n),
            _ => {
                self.pos = start;
                self.err("expected positive integer without leading zeros")
            }
        }
    }

    fn list(&mut self) -> Result<Vec<CausalType>, TypeError> {
        let mut parts = vec![self.ty()?];
        while self.eat(",") {
            parts.push(self.ty()?);
        }
        self.expect("]")?;
        Ok(parts)
    }

    fn ty(&mut self) -> Result<CausalType, TypeError> {
        let start = self.pos;
        let name = self.ident().to_string();
        let t = match name.as_str() {
            "Phys" => CausalType::PHYS,
            "State" => CausalType::STATE,
            "Event" => CausalType::EVENT,
            "Rule" => CausalType::RULE,
            "Tensor" => {
                self.expect("[")?;
                let elem = self.ty()?;
                self.expect(";")?;
                let mut dims = vec![self.number()?];
                while self.eat(",") {
                    dims.push(self.number()?);
                }
                self.expect("]")?;
                CausalType::tensor(elem, &dims)
            }
            "Func" => {
                self.expect("[")?;
                let from = self.ty()?;
                self.expect("->")?;
                let to = self.ty()?;
                self.expect("]")?;
                CausalType::func(from, to)
            }
            "Product" => {
                self.expect("[")?;
                CausalType::Product(self.list()?)
            }
            "Sum" => {
                self.expect("[")?;
                CausalType::Sum(self.list()?)
            }
            other => {
                self.pos = start;
                return self.err(format!("unknown type constructor `{other}`"));
            }
        };
        Ok(t)
    }
}

impl FromStr for CausalType {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, TypeError> {
        let mut p = Parser {
            src: s.as_bytes(),
            pos: 0,
        };
        let t = p.ty()?;
        if p.pos != s.len() {
            return p.err("trailing input");
        }
        Ok(t)
    }
}

impl TryFrom<String> for CausalType {
    type Error = TypeError;
    fn try_from(s: String) -> Result<Self, TypeError> {
        s.parse()
    }
}

impl From<CausalType> for String {
    fn from(t: CausalType) -> String {
        t.to_string()
    }
}

/// `a ≤ b` in the subtype order.
pub fn is_subtype(a: &CausalType, b: &CausalType) -> bool {
    use CausalType::*;
    match (a, b) {
        (Base(x), Base(y)) => x == y,
        (Tensor { elem: e1, dims: d1 }, Tensor { elem: e2, dims: d2 }) => {
            d1 == d2 && is_subtype(e1, e2)
        }
        (Func { from: f1, to: t1 }, Func { from: f2, to: t2 }) => {
            is_subtype(f2, f1) && is_subtype(t1, t2)
        }
        (Product(p), Product(q)) | (Sum(p), Sum(q)) => {
            p.len() == q.len() && p.iter().zip(q).all(|(x, y)| is_subtype(x, y))
        }
        _ => false,
    }
}

/// Similarity in [0,1]: 1 for equal types, the mean of component
/// similarities under a shared constructor of equal arity, 0 otherwise.
pub fn type_similarity(a: &CausalType, b: &CausalType) -> f64 {
    use CausalType::*;
    if a == b {
        return 1.0;
    }
    match (a, b) {
        (Tensor { elem: e1, dims: d1 }, Tensor { elem: e2, dims: d2 }) => {
            (type_similarity(e1, e2) + if d1 == d2 { 1.0 } else { 0.0 }) / 2.0
        }
        (Func { from: f1, to: t1 }, Func { from: f2, to: t2 }) => {
            (type_similarity(f1, f2) + type_similarity(t1, t2)) / 2.0
        }
        (Product(p), Product(q)) | (Sum(p), Sum(q)) if p.len() == q.len() => {
            p.iter().zip(q).map(|(x, y)| type_similarity(x, y)).sum::<f64>() / p.len() as f64
        }
        _ => 0.0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub name: String,
    pub ty: CausalType,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct TypeSig {
    slots: Vec<Slot>,
}

impl TypeSig {
    pub fn new(slots: Vec<(String, CausalType)>) -> Result<Self, TypeError> {
        let mut seen = std::collections::HashSet::new();
        let mut out = Vec::with_capacity(slots.len());
        for (name, ty) in slots {
            if !is_identifier(&name) {
                return Err(TypeError::Invalid(format!("slot name `{name}`")));
            }
            if !seen.insert(name.clone()) {
                return Err(TypeError::DuplicateSlot(name));
            }
            ty.validate()?;
            out.push(Slot { name, ty });
        }
        Ok(TypeSig { slots: out })
    }

    /// Convenience for literals; panics on invalid input.
    pub fn of(slots: &[(&str, CausalType)]) -> Self {
        Self::new(slots.iter().map(|(n, t)| (n.to_string(), t.clone())).collect())
            .expect("valid signature literal")
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Slot> {
        self.slots.iter().find(|s| s.name == name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.slots.iter().position(|s| s.name == name)
    }

    pub fn flat_dim(&self) -> usize {
        self.slots.iter().map(|s| s.ty.flat_dim()).sum()
    }

    /// Same signature with every slot name prefixed by `prefix.`.
    pub fn prefixed(&self, prefix: &str) -> TypeSig {
        TypeSig {
            slots: self
                .slots
                .iter()
                .map(|s| Slot {
                    name: format!("{prefix}.{}", s.name),
                    ty: s.ty.clone(),
                })
                .collect(),
        }
    }

    pub fn concat(&self, other: &TypeSig) -> Result<TypeSig, TypeError> {
        let all = self
            .slots
            .iter()
            .chain(&other.slots)
            .map(|s| (s.name.clone(), s.ty.clone()))
            .collect();
        TypeSig::new(all)
    }
}

fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '.')
}

impl fmt::Display for TypeSig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.slots.iter().map(|s| format!("{}:{}", s.name, s.ty)).collect();
        write!(f, "({})", parts.join(","))
    }
}

impl FromStr for TypeSig {
    type Err = TypeError;

    fn from_str(s: &str) -> Result<Self, TypeError> {
        let inner = s
            .strip_prefix('(')
            .and_then(|r| r.strip_suffix(')'))
            .ok_or(TypeError::Parse {
                pos: 0,
                msg: "signature must be parenthesized".into(),
            })?;
        if inner.is_empty() {
            return Ok(TypeSig::default());
        }
        // Split on commas at bracket depth 0.
        let mut slots = Vec::new();
        let mut depth = 0i32;
        let mut start = 0;
        let bytes = inner.as_bytes();
        for i in 0..=bytes.len() {
            let at_end = i == bytes.len();
            if !at_end {
                match bytes[i] {
                    b'[' => depth += 1,
                    b']' => depth -= 1,
                    _ => {}
                }
            }
            if at_end || (bytes[i] == b',' && depth == 0) {
                let part = &inner[start..i];
                let (name, ty) = part.split_once(':').ok_or(TypeError::Parse {
                    pos: start + 1,
                    msg: "expected `name:type`".into(),
                })?;
                let ty = ty.parse::<CausalType>().map_err(|e| match e {
                    TypeError::Parse { pos, msg } => TypeError::Parse {
                        pos: pos + start + name.len() + 2,
                        msg,
                    },
                    other => other,
                })?;
                slots.push((name.to_string(), ty));
                start = i + 1;
            }
        }
        TypeSig::new(slots)
    }
}

impl TryFrom<String> for TypeSig {
    type Error = TypeError;
    fn try_from(s: String) -> Result<Self, TypeError> {
        s.parse()
    }
}

impl From<TypeSig> for String {
    fn from(t: TypeSig) -> String {
        t.to_string()
    }
}

/// Input slot name → output slot name, in input-slot order.
pub type Binding = Vec<(String, String)>;

/// Binds every input slot to the first output slot it is a subtype of.
///
/// Outputs may feed several inputs, so per-input first match is also the
/// lexicographically first total map. `None` when some input has no match.
pub fn signatures_compatible(out_sig: &TypeSig, in_sig: &TypeSig) -> Option<Binding> {
    in_sig
        .slots()
        .iter()
        .map(|i| {
            out_sig
                .slots()
                .iter()
                .find(|o| is_subtype(&i.ty, &o.ty))
                .map(|o| (i.name.clone(), o.name.clone()))
        })
        .collect()
}

/// Mean over input slots of the best output-slot similarity; 0 for an empty
/// input signature.
pub fn signature_similarity(out_sig: &TypeSig, in_sig: &TypeSig) -> f64 {
    if in_sig.is_empty() {
        return 0.0;
    }
    in_sig
        .slots()
        .iter()
        .map(|i| {
            out_sig
                .slots()
                .iter()
                .map(|o| type_similarity(&o.ty, &i.ty))
                .fold(0.0, f64::max)
        })
        .sum::<f64>()
        / in_sig.len() as f64
}

/// Random well-formed type of at most `depth` constructor levels over the
/// given base kinds.
pub fn random_type(rng: &mut Rng, depth: usize, kinds: &[BaseKind]) -> CausalType {
    let base = || CausalType::Base(kinds[0]);
    let pick_base = |rng: &mut Rng| CausalType::Base(kinds[rng.random_range(0..kinds.len())]);
    if depth == 0 || rng.random_bool(0.4) {
        return if kinds.is_empty() { base() } else { pick_base(rng) };
    }
    match rng.random_range(0..4) {
        0 => {
            let nd = rng.random_range(1..=2);
            let dims: Vec<usize> = (0..nd).map(|_| rng.random_range(1..=3)).collect();
            CausalType::tensor(random_type(rng, depth - 1, kinds), &dims)
        }
        1 => CausalType::func(random_type(rng, depth - 1, kinds), random_type(rng, depth - 1, kinds)),
        2 => CausalType::Product(
            (0..rng.random_range(1..=3))
                .map(|_| random_type(rng, depth - 1, kinds))
                .collect(),
        ),
        _ => CausalType::Sum(
            (0..rng.random_range(1..=3))
                .map(|_| random_type(rng, depth - 1, kinds))
                .collect(),
        ),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_roundtrip() {
        for s in [
            "Phys",
            "Tensor[Phys;3,3]",
            "Func[State->Event]",
            "Product[Phys,Tensor[Rule;2],Sum[Event,State]]",
            "Func[Func[Phys->State]->Tensor[Event;1]]",
        ] {
            let t: CausalType = s.parse().unwrap();
            assert_eq!(t.to_string(), s);
        }
    }

    #[test]
    fn parse_rejects_garbage() {
        for s in ["", "Phys ", "Tensor[Phys;0]", "Tensor[Phys;03]", "Product[]", "Foo", "Func[Phys]"] {
            assert!(s.parse::<CausalType>().is_err(), "{s}");
        }
    }

    #[test]
    fn tensor_dims_must_match() {
        let a = CausalType::tensor(CausalType::PHYS, &[3]);
        let b = CausalType::tensor(CausalType::PHYS, &[4]);
        assert!(!is_subtype(&a, &b));
        assert!(is_subtype(&a, &a));
    }

    #[test]
    fn binding_examples() {
        let out = TypeSig::of(&[("a", CausalType::PHYS)]);
        let b = signatures_compatible(&out, &TypeSig::of(&[("x", CausalType::PHYS)])).unwrap();
        assert_eq!(b, vec![("x".to_string(), "a".to_string())]);
        assert!(signatures_compatible(&out, &TypeSig::of(&[("x", CausalType::RULE)])).is_none());
    }

    #[test]
    fn binding_picks_first_output() {
        let out = TypeSig::of(&[("a", CausalType::STATE), ("b", CausalType::PHYS), ("c", CausalType::PHYS)]);
        let inp = TypeSig::of(&[("x", CausalType::PHYS), ("y", CausalType::PHYS)]);
        let b = signatures_compatible(&out, &inp).unwrap();
        assert_eq!(b[0].1, "b");
        assert_eq!(b[1].1, "b");
    }

    #[test]
    fn similarity_examples() {
        assert_eq!(type_similarity(&CausalType::PHYS, &CausalType::PHYS), 1.0);
        assert_eq!(type_similarity(&CausalType::PHYS, &CausalType::RULE), 0.0);
        let a = CausalType::Product(vec![CausalType::PHYS, CausalType::STATE]);
        let b = CausalType::Product(vec![CausalType::PHYS, CausalType::EVENT]);
        assert_eq!(type_similarity(&a, &b), 0.5);
    }

    #[test]
    fn signature_text_roundtrip() {
        let s: TypeSig = "(x:Phys,v:Tensor[Phys;3,2],r:Product[Rule,State])".parse().unwrap();
        assert_eq!(s.len(), 3);
        assert_eq!(s.to_string().parse::<TypeSig>().unwrap(), s);
        assert!("(x:Phys,x:Rule)".parse::<TypeSig>().is_err());
        assert_eq!("()".parse::<TypeSig>().unwrap(), TypeSig::default());
    }

    #[test]
    fn flat_dims_and_masks() {
        let t: CausalType = "Product[Tensor[Phys;2,3],Rule]".parse().unwrap();
        assert_eq!(t.flat_dim(), 7);
        let m = t.unit_mask();
        assert_eq!(m.iter().filter(|&&b| b).count(), 1);
        assert!(m[6]);
    }
}
