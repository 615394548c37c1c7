//! Causal execution graphs: construction from a routing matrix,
//! differentiable message passing, intervention, optimization passes and
//! structural-model extraction.

mod export;
mod passes;
mod scm;
mod train;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Mat, NumericsError, Scalar};
use crate::primitives::{Primitive, PrimitiveError, ValueMap};
use crate::types::{is_subtype, signatures_compatible, TypeSig};

pub use export::TRACE_HEADER;
pub use passes::{
    abstract_chains, merge, prune, random_dag, verify_equivalence, EquivalenceReport, PassConfig, PassOutcome,
};
pub use scm::{extract_scm, ScmDescription, ScmEdge, ScmEquation};
pub use train::{fit_ceg, Example};

/// Default causal-edge threshold.
pub const TAU: f64 = 0.1;
/// Early-stop tolerance on the max state change per step.
pub const STOP_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CegError {
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("duplicate node id `{0}`")]
    DuplicateNode(String),
    #[error("no initial value for source node `{0}`")]
    MissingSource(String),
    #[error("edge {src}->{dst}: {msg}")]
    Edge { src: String, dst: String, msg: String },
    #[error("value for `{node}` has length {got}, expected {expected}")]
    Dimension { node: String, expected: usize, got: usize },
    #[error("data edges would form a cycle through `{0}`")]
    Cycle(String),
    #[error("step count must be at least 1")]
    Steps,
    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { need: usize, got: usize },
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("unsupported graph document version {0}")]
    Version(u32),
    #[error("json: {0}")]
    Json(String),
    #[error(transparent)]
    Primitive(#[from] PrimitiveError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CegNode {
    pub id: String,
    pub prim: Primitive,
    /// Affine map on the aggregated input: `d×d` weights then `d` biases.
    pub adapter: Vec<f64>,
}

impl CegNode {
    pub fn new(id: &str, prim: Primitive) -> Self {
        let d = prim.in_dim();
        CegNode {
            id: id.to_string(),
            adapter: identity_affine(d, d),
            prim,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.prim.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.prim.out_dim()
    }

    fn n_params(&self) -> usize {
        self.prim.n_params() + self.adapter.len()
    }
}

/// Data-flow edge; `msg` is a two-layer affine net `out_dim(src) → in_dim(dst) → in_dim(dst)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataEdge {
    pub src: usize,
    pub dst: usize,
    pub msg: Vec<f64>,
}

/// Causal edge; `proj` is an `in_dim(dst) × out_dim(src)` linear map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalEdge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
    pub proj: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ceg {
    pub nodes: Vec<CegNode>,
    pub data_edges: Vec<DataEdge>,
    pub causal_edges: Vec<CausalEdge>,
    pub outputs: Vec<usize>,
    /// Input perturbation accumulated by passes since the reference graph.
    #[serde(default)]
    pub pass_eps: f64,
}

/// `rows×cols` identity-like weights (ones on the diagonal) plus zero bias.
fn identity_affine(rows: usize, cols: usize) -> Vec<f64> {
    let mut p = vec![0.0; rows * cols + rows];
    for i in 0..rows.min(cols) {
        p[i * cols + i] = 1.0;
    }
    p
}

/// `W x + b` with `W` row-major `rows × x.len()`.
pub(crate) fn affine<S: Scalar>(params: &[S], x: &[S], rows: usize) -> Vec<S> {
    let cols = x.len();
    (0..rows)
        .map(|r| {
            let mut acc = params[rows * cols + r];
            for (c, &xv) in x.iter().enumerate() {
                acc = acc + params[r * cols + c] * xv;
            }
            acc
        })
        .collect()
}

fn linear_map<S: Scalar>(w: &[S], x: &[S], rows: usize) -> Vec<S> {
    let cols = x.len();
    (0..rows)
        .map(|r| x.iter().enumerate().fold(S::zero(), |acc, (c, &xv)| acc + w[r * cols + c] * xv))
        .collect()
}

/// Flat (dst, src) position pairs for a slot binding.
fn binding_gather(src_sig: &TypeSig, dst_sig: &TypeSig, pairs: &[(String, String)]) -> Vec<(usize, usize)> {
    let offset = |sig: &TypeSig, name: &str| {
        let mut off = 0;
        for s in sig.slots() {
            if s.name == name {
                return (off, s.ty.flat_dim());
            }
            off += s.ty.flat_dim();
        }
        unreachable!("binding names come from the signatures")
    };
    let mut out = Vec::new();
    for (input, output) in pairs {
        let (di, dn) = offset(dst_sig, input);
        let (so, _) = offset(src_sig, output);
        out.extend((0..dn).map(|t| (di + t, so + t)));
    }
    out
}

fn gather_matrix(rows: usize, cols: usize, pairs: &[(usize, usize)]) -> Vec<f64> {
    let mut w = vec![0.0; rows * cols];
    for &(r, c) in pairs {
        w[r * cols + c] = 1.0;
    }
    w
}

/// Message net whose first layer gathers `pairs` and whose second is identity.
fn gather_msg(d_in: usize, d_out: usize, pairs: &[(usize, usize)]) -> Vec<f64> {
    let mut p = gather_matrix(d_in, d_out, pairs);
    p.extend(std::iter::repeat_n(0.0, d_in));
    p.extend(identity_affine(d_in, d_in));
    p
}

/// Default causal projection: the slot binding when types are compatible,
/// otherwise every input position reads the source mean.
fn default_proj(src: &Primitive, dst: &Primitive) -> Vec<f64> {
    let (rows, cols) = (dst.in_dim(), src.out_dim());
    match signatures_compatible(&src.out_sig, &dst.in_sig) {
        Some(b) => gather_matrix(rows, cols, &binding_gather(&src.out_sig, &dst.in_sig, &b)),
        None => vec![1.0 / cols.max(1) as f64; rows * cols],
    }
}

fn msg_len(d_src: usize, d_dst: usize) -> usize {
    d_dst * d_src + d_dst + d_dst * d_dst + d_dst
}

/// Whether `to` is reachable from `from` along data edges.
fn data_reachable(edges: &[DataEdge], n: usize, from: usize, to: usize) -> bool {
    let mut seen = vec![false; n];
    let mut stack = vec![from];
    while let Some(v) = stack.pop() {
        if v == to {
            return true;
        }
        if std::mem::replace(&mut seen[v], true) {
            continue;
        }
        stack.extend(edges.iter().filter(|e| e.src == v).map(|e| e.dst));
    }
    false
}

/// Incrementally assembled graph with checked edges.
#[derive(Debug, Clone, Default)]
pub struct CegBuilder {
    g: Ceg,
}

impl Default for Ceg {
    fn default() -> Self {
        Ceg {
            nodes: vec![],
            data_edges: vec![],
            causal_edges: vec![],
            outputs: vec![],
            pass_eps: 0.0,
        }
    }
}

impl CegBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn node(&mut self, id: &str, prim: Primitive) -> Result<usize, CegError> {
        if self.g.index(id).is_some() {
            return Err(CegError::DuplicateNode(id.into()));
        }
        self.g.nodes.push(CegNode::new(id, prim));
        Ok(self.g.nodes.len() - 1)
    }

    fn idx(&self, id: &str) -> Result<usize, CegError> {
        self.g.index(id).ok_or_else(|| CegError::UnknownNode(id.into()))
    }

    fn edge_err(&self, s: usize, d: usize, msg: &str) -> CegError {
        CegError::Edge {
            src: self.g.nodes[s].id.clone(),
            dst: self.g.nodes[d].id.clone(),
            msg: msg.into(),
        }
    }

    fn check_new_edge(&self, s: usize, d: usize) -> Result<(), CegError> {
        if s == d {
            return Err(self.edge_err(s, d, "self-loop"));
        }
        if self.g.has_data(s, d) || self.g.has_causal(s, d) {
            return Err(self.edge_err(s, d, "pair already connected"));
        }
        Ok(())
    }

    /// Slot-explicit gather pairs, checking subtyping.
    fn slot_pairs(&self, s: usize, src_slot: &str, d: usize, dst_slot: &str) -> Result<Vec<(usize, usize)>, CegError> {
        let (sp, dp) = (&self.g.nodes[s].prim, &self.g.nodes[d].prim);
        let (Some(o), Some(i)) = (sp.out_sig.get(src_slot), dp.in_sig.get(dst_slot)) else {
            return Err(self.edge_err(s, d, "unknown slot"));
        };
        if !is_subtype(&i.ty, &o.ty) {
            return Err(self.edge_err(s, d, "slot types are incompatible"));
        }
        Ok(binding_gather(&sp.out_sig, &dp.in_sig, &[(dst_slot.to_string(), src_slot.to_string())]))
    }

    fn push_data(&mut self, s: usize, d: usize, pairs: &[(usize, usize)]) -> Result<(), CegError> {
        self.check_new_edge(s, d)?;
        if data_reachable(&self.g.data_edges, self.g.nodes.len(), d, s) {
            return Err(CegError::Cycle(self.g.nodes[d].id.clone()));
        }
        let (ds, dd) = (self.g.nodes[s].out_dim(), self.g.nodes[d].in_dim());
        self.g.data_edges.push(DataEdge {
            src: s,
            dst: d,
            msg: gather_msg(dd, ds, pairs),
        });
        Ok(())
    }

    /// Data edge initialized from the full signature binding.
    pub fn data(&mut self, src: &str, dst: &str) -> Result<&mut Self, CegError> {
        let (s, d) = (self.idx(src)?, self.idx(dst)?);
        let (sp, dp) = (&self.g.nodes[s].prim, &self.g.nodes[d].prim);
        let b = signatures_compatible(&sp.out_sig, &dp.in_sig).ok_or_else(|| self.edge_err(s, d, "signatures are incompatible"))?;
        let pairs = binding_gather(&sp.out_sig, &dp.in_sig, &b);
        self.push_data(s, d, &pairs)?;
        Ok(self)
    }

    /// Data edge feeding one output slot into one input slot.
    pub fn data_slot(&mut self, src: &str, src_slot: &str, dst: &str, dst_slot: &str) -> Result<&mut Self, CegError> {
        let (s, d) = (self.idx(src)?, self.idx(dst)?);
        let pairs = self.slot_pairs(s, src_slot, d, dst_slot)?;
        self.push_data(s, d, &pairs)?;
        Ok(self)
    }

    fn push_causal(&mut self, s: usize, d: usize, weight: f64, proj: Vec<f64>) -> Result<(), CegError> {
        self.check_new_edge(s, d)?;
        if !(0.0..=1.0).contains(&weight) {
            return Err(self.edge_err(s, d, "weight outside [0,1]"));
        }
        self.g.causal_edges.push(CausalEdge {
            src: s,
            dst: d,
            weight,
            proj,
        });
        Ok(())
    }

    pub fn causal(&mut self, src: &str, dst: &str, weight: f64) -> Result<&mut Self, CegError> {
        let (s, d) = (self.idx(src)?, self.idx(dst)?);
        let proj = default_proj(&self.g.nodes[s].prim, &self.g.nodes[d].prim);
        self.push_causal(s, d, weight, proj)?;
        Ok(self)
    }

    pub fn causal_slot(&mut self, src: &str, src_slot: &str, dst: &str, dst_slot: &str, weight: f64) -> Result<&mut Self, CegError> {
        let (s, d) = (self.idx(src)?, self.idx(dst)?);
        let pairs = self.slot_pairs(s, src_slot, d, dst_slot)?;
        let (rows, cols) = (self.g.nodes[d].in_dim(), self.g.nodes[s].out_dim());
        self.push_causal(s, d, weight, gather_matrix(rows, cols, &pairs))?;
        Ok(self)
    }

    pub fn output(&mut self, id: &str) -> Result<&mut Self, CegError> {
        let i = self.idx(id)?;
        if !self.g.outputs.contains(&i) {
            self.g.outputs.push(i);
        }
        Ok(self)
    }

    pub fn build(&self) -> Result<Ceg, CegError> {
        self.g.validate()?;
        Ok(self.g.clone())
    }
}

/// Causal edges where `W_ij > τ` (off-diagonal); data edges between
/// type-compatible remaining pairs by descending `W` then index, skipping
/// any that would close a data-flow cycle. Sinks of the causal graph are
/// the outputs.
pub fn build_ceg(prims: &[Primitive], w: &Mat, tau: f64) -> Result<Ceg, CegError> {
    let n = prims.len();
    if w.rows() != n || w.cols() != n {
        return Err(CegError::Invalid(format!("W is {}x{} for {n} primitives", w.rows(), w.cols())));
    }
    if !(0.0..=1.0).contains(&tau) {
        return Err(CegError::Invalid(format!("τ = {tau} outside [0,1]")));
    }
    let mut b = CegBuilder::new();
    for p in prims {
        b.node(&p.id, p.clone())?;
    }
    for i in 0..n {
        for j in 0..n {
            if i != j && w[(i, j)] > tau {
                let weight = w[(i, j)].min(1.0);
                b.push_causal(i, j, weight, default_proj(&prims[i], &prims[j]))?;
            }
        }
    }
    let mut cand: Vec<(usize, usize, Vec<(usize, usize)>)> = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i == j || b.g.has_causal(i, j) {
                continue;
            }
            if let Some(bind) = signatures_compatible(&prims[i].out_sig, &prims[j].in_sig) {
                cand.push((i, j, binding_gather(&prims[i].out_sig, &prims[j].in_sig, &bind)));
            }
        }
    }
    cand.sort_by(|a, c| w[(c.0, c.1)].total_cmp(&w[(a.0, a.1)]).then((a.0, a.1).cmp(&(c.0, c.1))));
    for (i, j, pairs) in cand {
        match b.push_data(i, j, &pairs) {
            Ok(()) | Err(CegError::Cycle(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let mut g = b.g;
    g.outputs = (0..n).filter(|&i| !g.causal_edges.iter().any(|e| e.src == i)).collect();
    g.validate()?;
    Ok(g)
}

/// Full state history of one execution.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    /// `states[t][node]`, with `states[0]` the initial state.
    pub states: Vec<Vec<Vec<f64>>>,
    pub uncertainty: Vec<f64>,
    pub edge_visits: usize,
}

impl Trace {
    pub fn last(&self) -> &[Vec<f64>] {
        self.states.last().expect("initial state present")
    }

    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }
}

impl Ceg {
    pub fn index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    pub fn has_data(&self, s: usize, d: usize) -> bool {
        self.data_edges.iter().any(|e| e.src == s && e.dst == d)
    }

    pub fn has_causal(&self, s: usize, d: usize) -> bool {
        self.causal_edges.iter().any(|e| e.src == s && e.dst == d)
    }

    pub fn n_edges(&self) -> usize {
        self.data_edges.len() + self.causal_edges.len()
    }

    /// Nodes without incoming edges; they hold their initial value.
    pub fn is_source(&self, i: usize) -> bool {
        !self.data_edges.iter().any(|e| e.dst == i) && !self.causal_edges.iter().any(|e| e.dst == i)
    }

    pub fn sources(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.is_source(i)).collect()
    }

    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        let mut v: Vec<usize> = self
            .data_edges
            .iter()
            .filter(|e| e.dst == i)
            .map(|e| e.src)
            .chain(self.causal_edges.iter().filter(|e| e.dst == i).map(|e| e.src))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn validate(&self) -> Result<(), CegError> {
        let n = self.nodes.len();
        let mut ids: Vec<&str> = self.nodes.iter().map(|x| x.id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(CegError::DuplicateNode(w[0].into()));
        }
        for node in &self.nodes {
            let d = node.in_dim();
            if node.adapter.len() != d * d + d {
                return Err(CegError::Invalid(format!("adapter of `{}` has wrong length", node.id)));
            }
        }
        let bad = |s: usize, d: usize, msg: &str| CegError::Edge {
            src: self.nodes.get(s).map_or("?".into(), |x| x.id.clone()),
            dst: self.nodes.get(d).map_or("?".into(), |x| x.id.clone()),
            msg: msg.into(),
        };
        for e in &self.data_edges {
            if e.src >= n || e.dst >= n || e.src == e.dst {
                return Err(bad(e.src, e.dst, "bad endpoints"));
            }
            if e.msg.len() != msg_len(self.nodes[e.src].out_dim(), self.nodes[e.dst].in_dim()) {
                return Err(bad(e.src, e.dst, "message parameters have the wrong length"));
            }
            if self.has_causal(e.src, e.dst) {
                return Err(bad(e.src, e.dst, "pair is both a data and a causal edge"));
            }
        }
        for e in &self.causal_edges {
            if e.src >= n || e.dst >= n || e.src == e.dst {
                return Err(bad(e.src, e.dst, "bad endpoints"));
            }
            if !(0.0..=1.0).contains(&e.weight) {
                return Err(bad(e.src, e.dst, "weight outside [0,1]"));
            }
            if e.proj.len() != self.nodes[e.dst].in_dim() * self.nodes[e.src].out_dim() {
                return Err(bad(e.src, e.dst, "projection has the wrong shape"));
            }
        }
        let adj: Vec<Vec<bool>> = (0..n).map(|i| (0..n).map(|j| self.has_data(i, j)).collect()).collect();
        if crate::worlds::topological_order(&adj).is_none() {
            return Err(CegError::Cycle("data edges".into()));
        }
        if self.outputs.iter().any(|&o| o >= n) {
            return Err(CegError::Invalid("output index out of range".into()));
        }
        Ok(())
    }

    /// Edges of `E_d ∪ E_c` as an adjacency matrix.
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        let n = self.nodes.len();
        let mut a = vec![vec![false; n]; n];
        for (s, d) in self.data_edges.iter().map(|e| (e.src, e.dst)).chain(self.causal_edges.iter().map(|e| (e.src, e.dst))) {
            a[s][d] = true;
        }
        a
    }

    /// Edge count of the longest path in `E_d ∪ E_c`; `None` if it is cyclic.
    pub fn longest_path(&self) -> Option<usize> {
        let adj = self.adjacency();
        let order = crate::worlds::topological_order(&adj)?;
        let mut depth = vec![0usize; self.nodes.len()];
        for &i in &order {
            for j in 0..self.nodes.len() {
                if adj[i][j] {
                    depth[j] = depth[j].max(depth[i] + 1);
                }
            }
        }
        Some(depth.into_iter().max().unwrap_or(0))
    }

    /// Default step count: the longest path (at least 1), or the node count
    /// when causal edges close a cycle.
    pub fn default_steps(&self) -> usize {
        self.longest_path().unwrap_or(self.nodes.len()).max(1)
    }

    pub fn n_params(&self) -> usize {
        self.nodes.iter().map(CegNode::n_params).sum::<usize>()
            + self.data_edges.iter().map(|e| e.msg.len()).sum::<usize>()
            + self.causal_edges.iter().map(|e| e.proj.len()).sum::<usize>()
    }

    /// Node primitive and adapter parameters, then messages, then projections.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for node in &self.nodes {
            p.extend(node.prim.params());
            p.extend_from_slice(&node.adapter);
        }
        for e in &self.data_edges {
            p.extend_from_slice(&e.msg);
        }
        for e in &self.causal_edges {
            p.extend_from_slice(&e.proj);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<(), CegError> {
        if p.len() != self.n_params() {
            return Err(CegError::Invalid(format!("expected {} parameters, got {}", self.n_params(), p.len())));
        }
        let mut off = 0;
        for node in &mut self.nodes {
            let np = node.prim.n_params();
            node.prim.set_params(&p[off..off + np])?;
            off += np;
            let na = node.adapter.len();
            node.adapter.copy_from_slice(&p[off..off + na]);
            off += na;
        }
        for e in &mut self.data_edges {
            let k = e.msg.len();
            e.msg.copy_from_slice(&p[off..off + k]);
            off += k;
        }
        for e in &mut self.causal_edges {
            let k = e.proj.len();
            e.proj.copy_from_slice(&p[off..off + k]);
            off += k;
        }
        Ok(())
    }

    /// Resolves an id-keyed value map against node dimensions.
    fn resolve_values(&self, values: &ValueMap) -> Result<Vec<Option<Vec<f64>>>, CegError> {
        let mut out = vec![None; self.nodes.len()];
        for (id, v) in values {
            let i = self.index(id).ok_or_else(|| CegError::UnknownNode(id.clone()))?;
            let d = self.nodes[i].out_dim();
            if v.len() != d {
                return Err(CegError::Dimension {
                    node: id.clone(),
                    expected: d,
                    got: v.len(),
                });
            }
            out[i] = Some(v.clone());
        }
        Ok(out)
    }

    /// Initial state: given values, zeros elsewhere; every source must be given
    /// unless it is forced.
    fn initial_state(&self, x0: &ValueMap, forced: &[Option<Vec<f64>>]) -> Result<Vec<Vec<f64>>, CegError> {
        let given = self.resolve_values(x0)?;
        (0..self.nodes.len())
            .map(|i| match (&forced[i], &given[i]) {
                (Some(v), _) | (None, Some(v)) => Ok(v.clone()),
                (None, None) if self.is_source(i) => Err(CegError::MissingSource(self.nodes[i].id.clone())),
                (None, None) => Ok(vec![0.0; self.nodes[i].out_dim()]),
            })
            .collect()
    }

    /// Aggregated input `m_i + c_i` of node `i` under `theta`.
    pub(crate) fn aggregate<S: Scalar>(&self, layout: &Layout, theta: &[S], x: &[Vec<S>], i: usize, skip: &dyn Fn(EdgeRef) -> bool) -> Vec<S> {
        let d = self.nodes[i].in_dim();
        let mut s = vec![S::zero(); d];
        for (k, e) in self.data_edges.iter().enumerate() {
            if e.dst != i || skip(EdgeRef::Data(k)) {
                continue;
            }
            let p = &theta[layout.msg[k]..layout.msg[k] + e.msg.len()];
            let d_src = self.nodes[e.src].out_dim();
            let h = affine(&p[..d * d_src + d], &x[e.src], d);
            let m = affine(&p[d * d_src + d..], &h, d);
            for (a, b) in s.iter_mut().zip(m) {
                *a = *a + b;
            }
        }
        for (k, e) in self.causal_edges.iter().enumerate() {
            if e.dst != i || skip(EdgeRef::Causal(k)) {
                continue;
            }
            let p = &theta[layout.proj[k]..layout.proj[k] + e.proj.len()];
            for (a, b) in s.iter_mut().zip(linear_map(p, &x[e.src], d)) {
                *a = *a + b * e.weight;
            }
        }
        s
    }

    /// `(a, y, u)` of node `i` on aggregated input `s`.
    pub(crate) fn node_response<S: Scalar>(&self, layout: &Layout, theta: &[S], i: usize, s: &[S]) -> (S, Vec<S>, S) {
        let node = &self.nodes[i];
        let off = layout.node[i];
        let np = node.prim.n_params();
        let z = affine(&theta[off + np..off + np + node.adapter.len()], s, node.in_dim());
        let e = node.prim.eval(&theta[off..off + np], &z);
        (e.a, e.y, e.u)
    }

    /// Differentiable core of [`execute`](Self::execute): `x ← (1−a)x + a·F(adapter(m+c))`
    /// for every non-source, non-forced node, Jacobi-style.
    pub fn run<S: Scalar>(&self, theta: &[S], x0: Vec<Vec<S>>, forced: &[bool], steps: usize) -> (Vec<Vec<Vec<S>>>, Vec<S>, usize) {
        let layout = Layout::new(self);
        let n = self.nodes.len();
        let held: Vec<bool> = (0..n).map(|i| forced[i] || self.is_source(i)).collect();
        let mut states = vec![x0];
        let mut unc = vec![S::zero(); n];
        let mut visits = 0;
        let none = |_: EdgeRef| false;
        for _ in 0..steps {
            let prev = states.last().expect("initial state");
            let mut next = prev.clone();
            let mut change: f64 = 0.0;
            for i in 0..n {
                if held[i] {
                    continue;
                }
                visits += self.data_edges.iter().filter(|e| e.dst == i).count()
                    + self.causal_edges.iter().filter(|e| e.dst == i).count();
                let s = self.aggregate(&layout, theta, prev, i, &none);
                let (a, y, u) = self.node_response(&layout, theta, i, &s);
                unc[i] = u;
                next[i] = prev[i].iter().zip(y).map(|(&old, new)| old * (S::one() - a) + new * a).collect();
                for (o, v) in prev[i].iter().zip(&next[i]) {
                    change = change.max((o.value() - v.value()).abs());
                }
            }
            states.push(next);
            if change < STOP_TOL {
                break;
            }
        }
        (states, unc, visits)
    }

    fn run_f64(&self, x0: &ValueMap, do_map: &ValueMap, steps: Option<usize>) -> Result<Trace, CegError> {
        let t = steps.unwrap_or_else(|| self.default_steps());
        if t == 0 {
            return Err(CegError::Steps);
        }
        let forced = self.resolve_values(do_map)?;
        let init = self.initial_state(x0, &forced)?;
        let mask: Vec<bool> = forced.iter().map(Option::is_some).collect();
        let (states, uncertainty, edge_visits) = self.run(&self.params(), init, &mask, t);
        Ok(Trace {
            states,
            uncertainty,
            edge_visits,
        })
    }

    /// Runs `steps` rounds of message passing (default: longest path).
    pub fn execute(&self, x0: &ValueMap, steps: Option<usize>) -> Result<Trace, CegError> {
        self.run_f64(x0, &ValueMap::new(), steps)
    }

    /// Graph surgery: forced nodes hold their value and ignore incoming edges.
    pub fn execute_do(&self, do_map: &ValueMap, x0: &ValueMap, steps: Option<usize>) -> Result<Trace, CegError> {
        self.run_f64(x0, do_map, steps)
    }

    pub fn outputs_of(&self, trace: &Trace) -> ValueMap {
        let last = trace.last();
        self.outputs.iter().map(|&o| (self.nodes[o].id.clone(), last[o].clone())).collect()
    }

    pub fn output_ids(&self) -> Vec<String> {
        self.outputs.iter().map(|&o| self.nodes[o].id.clone()).collect()
    }

    /// Random values for every source node.
    pub fn random_sources(&self, rng: &mut crate::numerics::Rng) -> ValueMap {
        self.sources()
            .into_iter()
            .map(|i| (self.nodes[i].id.clone(), crate::primitives::random_value(&self.nodes[i].prim.out_sig, rng)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum EdgeRef {
    Data(usize),
    Causal(usize),
}

/// Offsets of each parameter block in [`Ceg::params`].
#[derive(Debug, Clone)]
pub(crate) struct Layout {
    node: Vec<usize>,
    msg: Vec<usize>,
    proj: Vec<usize>,
}

impl Layout {
    pub(crate) fn new(g: &Ceg) -> Self {
        let mut off = 0;
        let mut node = Vec::new();
        for n in &g.nodes {
            node.push(off);
            off += n.n_params();
        }
        let mut msg = Vec::new();
        for e in &g.data_edges {
            msg.push(off);
            off += e.msg.len();
        }
        let mut proj = Vec::new();
        for e in &g.causal_edges {
            proj.push(off);
            off += e.proj.len();
        }
        Layout { node, msg, proj }
    }
}

/// Convenience: single-entry value map.
pub fn values(pairs: &[(&str, Vec<f64>)]) -> ValueMap {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Keyed by node id; handy for building probe sets.
pub type Probe = BTreeMap<String, Vec<f64>>;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, objective, rng, Var};
    use crate::primitives::Layer;
    use crate::types::CausalType;

    fn phys(n: &str) -> TypeSig {
        TypeSig::of(&[(n, CausalType::PHYS)])
    }

    fn lin(id: &str, w: f64) -> Primitive {
        Primitive::linear(id, Layer::Phys, phys("x"), phys("x"), &[w], &[0.0]).unwrap()
    }

    #[test]
    fn zero_w_gives_no_causal_edges() {
        let prims = vec![lin("a", 1.0), lin("b", 1.0)];
        let g = build_ceg(&prims, &Mat::zeros(2, 2), TAU).unwrap();
        assert!(g.causal_edges.is_empty());
        // One data edge only: the reverse would close a cycle.
        assert_eq!(g.data_edges.len(), 1);
    }

    #[test]
    fn single_causal_edge() {
        let prims = vec![lin("a", 1.0), lin("b", 1.0)];
        let mut w = Mat::zeros(2, 2);
        w[(0, 1)] = 0.5;
        let g = build_ceg(&prims, &w, TAU).unwrap();
        assert_eq!(g.causal_edges.len(), 1);
        assert_eq!(g.causal_edges[0].weight, 0.5);
        assert!(g.data_edges.iter().all(|e| !(e.src == 0 && e.dst == 1)));
    }

    #[test]
    fn inert_node_is_a_fixpoint() {
        let spec = crate::primitives::PrimitiveSpec {
            activation: crate::primitives::Activation::Constant(0.0),
            ..crate::primitives::PrimitiveSpec::new(
                "n",
                Layer::Phys,
                phys("x"),
                phys("x"),
                crate::primitives::Executor::AffineNet {
                    widths: vec![1, 1],
                    nonlinearity: crate::primitives::Nonlinearity::Identity,
                },
            )
        };
        let p = crate::primitives::make_primitive(spec, &mut rng(0)).unwrap();
        let mut b = CegBuilder::new();
        b.node("s", lin("s", 1.0)).unwrap();
        b.node("n", p).unwrap();
        b.data("s", "n").unwrap().output("n").unwrap();
        let g = b.build().unwrap();
        let x0 = values(&[("s", vec![3.0]), ("n", vec![0.25])]);
        let t = g.execute(&x0, Some(5)).unwrap();
        assert!(t.states.iter().all(|s| s[1] == vec![0.25]));
    }

    #[test]
    fn chain_copies_source_in_one_step() {
        let mut b = CegBuilder::new();
        b.node("s", lin("s", 1.0)).unwrap();
        b.node("t", lin("t", 1.0)).unwrap();
        b.data("s", "t").unwrap().output("t").unwrap();
        let g = b.build().unwrap();
        let t = g.execute(&values(&[("s", vec![0.7])]), Some(1)).unwrap();
        assert_eq!(t.last()[1], vec![0.7]);
        assert_eq!(t.edge_visits, 1);
    }

    #[test]
    fn linear_dag_matches_unrolled_product() {
        // s → a (×2), s → b (×3), a,b → c (×0.5 on the sum).
        let mut b = CegBuilder::new();
        b.node("s", lin("s", 1.0)).unwrap();
        b.node("a", lin("a", 2.0)).unwrap();
        b.node("b", lin("b", 3.0)).unwrap();
        b.node("c", lin("c", 0.5)).unwrap();
        b.data("s", "a").unwrap().data("s", "b").unwrap().data("a", "c").unwrap();
        b.causal("b", "c", 0.4).unwrap().output("c").unwrap();
        let g = b.build().unwrap();
        assert_eq!(g.longest_path(), Some(2));
        let t = g.execute(&values(&[("s", vec![1.5])]), None).unwrap();
        let oracle = 0.5 * (2.0 * 1.5 + 0.4 * 3.0 * 1.5);
        assert!((t.last()[3][0] - oracle).abs() < 1e-12);
    }

    #[test]
    fn surgery_semantics() {
        let mut b = CegBuilder::new();
        b.node("x", lin("x", 1.0)).unwrap();
        b.node("y", lin("y", 2.0)).unwrap();
        b.data("x", "y").unwrap().output("y").unwrap();
        let g = b.build().unwrap();
        for x0 in [-3.0, 0.0, 5.0] {
            let xs = values(&[("x", vec![x0])]);
            let t = g.execute_do(&values(&[("x", vec![1.0])]), &xs, None).unwrap();
            assert_eq!(g.outputs_of(&t)["y"], vec![2.0]);
            let t = g.execute_do(&values(&[("y", vec![9.0])]), &xs, None).unwrap();
            assert_eq!(g.outputs_of(&t)["y"], vec![9.0]);
            assert_eq!(g.execute_do(&ValueMap::new(), &xs, None).unwrap(), g.execute(&xs, None).unwrap());
        }
        assert!(matches!(g.execute(&ValueMap::new(), None), Err(CegError::MissingSource(_))));
        assert!(matches!(g.execute(&values(&[("x", vec![1.0, 2.0])]), None), Err(CegError::Dimension { .. })));
    }

    #[test]
    fn execution_gradient_matches_differences() {
        let lib = crate::primitives::seed_library(3);
        let prims: Vec<Primitive> = lib.into_iter().filter(|p| p.layer == Layer::Phys).take(5).collect();
        let mut r = rng(4);
        let w = Mat::from_fn(5, 5, |_, _| rand::Rng::random_range(&mut r, 0.0..0.4));
        let g = build_ceg(&prims, &w, TAU).unwrap();
        let x0 = g.random_sources(&mut rng(5));
        let forced = vec![false; g.nodes.len()];
        let init: Vec<Vec<f64>> = g.initial_state(&x0, &vec![None; g.nodes.len()]).unwrap();
        let f = objective(|theta| {
            let x: Vec<Vec<Var>> = init.iter().map(|v| v.iter().map(|&c| Var::constant(c)).collect()).collect();
            let (states, _, _) = g.run(theta, x, &forced, g.default_steps());
            let last = states.last().unwrap();
            g.outputs.iter().flat_map(|&o| last[o].clone()).fold(Var::constant(0.0), |a, b| a + b * b)
        });
        assert!(check_gradient(&f, &g.params()).unwrap().passes(1e-4));
    }
}
