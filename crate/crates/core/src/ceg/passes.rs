//! Graph optimization passes and the sampled equivalence check.
//!
//! Every pass records `ε`, the summed change it induces in node inputs when
//! evaluated on the reference graph's states; `pass_eps` accumulates it.

use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{gather_msg, Ceg, CegBuilder, CegError, CegNode, EdgeRef, Layout};
use crate::algebra::AbstractionRegistry;
use crate::numerics::{rng, rng_stream, Mat, Rng};
use crate::primitives::{make_primitive, Executor, Layer, Nonlinearity, Primitive, PrimitiveSpec, ValueMap};
use crate::types::{CausalType, TypeSig};

/// Pairs sampled when estimating Lipschitz constants.
pub const LIPSCHITZ_PAIRS: usize = 256;
/// Safety factor applied to the bound.
pub const BOUND_SAFETY: f64 = 1.1;
/// Absolute slack for floating-point roundoff in the bound comparison.
pub const ROUNDOFF: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PassConfig {
    pub tau_prune: f64,
    pub eps_msg: f64,
    pub delta: f64,
    pub gamma: f64,
    pub probes: usize,
    #[serde(default)]
    pub seed: u64,
}

impl Default for PassConfig {
    fn default() -> Self {
        PassConfig {
            tau_prune: 0.1,
            eps_msg: 1e-6,
            delta: 1e-3,
            gamma: 0.05,
            probes: 16,
            seed: 0,
        }
    }
}

impl PassConfig {
    pub fn validate(&self) -> Result<(), CegError> {
        let vals = [self.tau_prune, self.eps_msg, self.delta, self.gamma];
        if vals.iter().any(|v| !(v.is_finite() && *v >= 0.0)) || self.probes == 0 {
            return Err(CegError::Invalid("pass parameters must be nonnegative with probes ≥ 1".into()));
        }
        Ok(())
    }

    /// Random source assignments for `g`.
    pub fn sample_probes(&self, g: &Ceg) -> Vec<ValueMap> {
        let mut r = rng(self.seed);
        (0..self.probes).map(|_| g.random_sources(&mut r)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassOutcome {
    pub graph: Ceg,
    /// Input change induced by this pass alone.
    pub eps: f64,
    /// Edges removed, nodes merged or chains replaced.
    pub changes: usize,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Final node states of `g` on each probe.
fn final_states(g: &Ceg, probes: &[ValueMap]) -> Result<Vec<Vec<Vec<f64>>>, CegError> {
    probes.iter().map(|p| Ok(g.execute(p, None)?.last().to_vec())).collect()
}

/// One update of node `i` from aggregated input `s`, starting from `prev`.
fn respond(g: &Ceg, layout: &Layout, theta: &[f64], i: usize, s: &[f64], prev: &[f64]) -> Vec<f64> {
    let (a, y, _) = g.node_response(layout, theta, i, s);
    prev.iter().zip(y).map(|(p, v)| (1.0 - a) * p + a * v).collect()
}

/// Summed input defect of `new` against `old`. `origin[k]` is the old node
/// behind new node `k`; nodes in `replaced` are re-evaluated one step on the
/// old states (in topological order) before other inputs are compared.
fn defect(old: &Ceg, new: &Ceg, origin: &[usize], replaced: &BTreeSet<usize>, states: &[Vec<Vec<f64>>]) -> f64 {
    let (lo, ln) = (Layout::new(old), Layout::new(new));
    let (to, tn) = (old.params(), new.params());
    let order = crate::worlds::topological_order(&new.adjacency()).unwrap_or_else(|| (0..new.nodes.len()).collect());
    let none = |_: EdgeRef| false;
    let mut worst: f64 = 0.0;
    for x in states {
        let mut xt: Vec<Vec<f64>> = origin.iter().map(|&o| x[o].clone()).collect();
        for &k in &order {
            if replaced.contains(&k) {
                let s = new.aggregate(&ln, &tn, &xt, k, &none);
                xt[k] = respond(new, &ln, &tn, k, &s, &x[origin[k]]);
            }
        }
        // Replaced outputs contribute their own value change directly.
        let mut total: f64 = replaced
            .iter()
            .filter(|k| new.outputs.contains(k))
            .map(|&k| diff_norm(&xt[k], &x[origin[k]]))
            .sum();
        for k in 0..new.nodes.len() {
            if replaced.contains(&k) || new.is_source(k) {
                continue;
            }
            let s_new = new.aggregate(&ln, &tn, &xt, k, &none);
            let s_old = old.aggregate(&lo, &to, x, origin[k], &none);
            total += diff_norm(&s_new, &s_old);
        }
        worst = worst.max(total);
    }
    worst
}

/// Drops causal edges with `w < τ_prune` and data edges whose largest
/// message norm over probes is below `ε_msg`.
pub fn prune(g: &Ceg, cfg: &PassConfig, probes: &[ValueMap]) -> Result<PassOutcome, CegError> {
    cfg.validate()?;
    if probes.is_empty() {
        return Err(CegError::Invalid("prune needs probes".into()));
    }
    let states = final_states(g, probes)?;
    let layout = Layout::new(g);
    let theta = g.params();
    let mut out = g.clone();
    let mut drop_causal: BTreeSet<usize> = (0..g.causal_edges.len()).filter(|&k| g.causal_edges[k].weight < cfg.tau_prune).collect();
    let mut drop_data: BTreeSet<usize> = (0..g.data_edges.len())
        .filter(|&k| {
            let only = |r: EdgeRef| r != EdgeRef::Data(k);
            let dst = g.data_edges[k].dst;
            let max = states
                .iter()
                .map(|x| norm(&g.aggregate(&layout, &theta, x, dst, &only)))
                .fold(0.0, f64::max);
            max < cfg.eps_msg
        })
        .collect();
    // A node never loses its last in-edge: that would turn it into a source.
    for i in 0..g.nodes.len() {
        let data: Vec<usize> = (0..g.data_edges.len()).filter(|&k| g.data_edges[k].dst == i).collect();
        let causal: Vec<usize> = (0..g.causal_edges.len()).filter(|&k| g.causal_edges[k].dst == i).collect();
        let all_dropped = data.iter().all(|k| drop_data.contains(k)) && causal.iter().all(|k| drop_causal.contains(k));
        if all_dropped && !(data.is_empty() && causal.is_empty()) {
            match causal.iter().max_by(|&&a, &&b| g.causal_edges[a].weight.total_cmp(&g.causal_edges[b].weight)) {
                Some(&k) => drop_causal.remove(&k),
                None => drop_data.remove(&data[0]),
            };
        }
    }
    out.data_edges = keep_except(&g.data_edges, &drop_data);
    out.causal_edges = keep_except(&g.causal_edges, &drop_causal);
    let changes = g.n_edges() - out.n_edges();
    let origin: Vec<usize> = (0..g.nodes.len()).collect();
    let eps = defect(g, &out, &origin, &BTreeSet::new(), &states);
    out.pass_eps = g.pass_eps + eps;
    Ok(PassOutcome { graph: out, eps, changes })
}

fn keep_except<T: Clone>(items: &[T], drop: &BTreeSet<usize>) -> Vec<T> {
    items.iter().enumerate().filter(|(k, _)| !drop.contains(k)).map(|(_, e)| e.clone()).collect()
}

fn neighbor_key(g: &Ceg, i: usize) -> [BTreeSet<usize>; 4] {
    [
        g.data_edges.iter().filter(|e| e.dst == i).map(|e| e.src).collect(),
        g.causal_edges.iter().filter(|e| e.dst == i).map(|e| e.src).collect(),
        g.data_edges.iter().filter(|e| e.src == i).map(|e| e.dst).collect(),
        g.causal_edges.iter().filter(|e| e.src == i).map(|e| e.dst).collect(),
    ]
}

fn average(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect()
}

/// Collapses a two-layer message net into `(A, c)` with `m(x) = A x + c`.
fn effective_msg(msg: &[f64], d_in: usize, d_src: usize) -> (Mat, Vec<f64>) {
    let w1 = Mat::from_vec(d_in, d_src, msg[..d_in * d_src].to_vec()).expect("message shape");
    let b1 = &msg[d_in * d_src..d_in * d_src + d_in];
    let rest = &msg[d_in * d_src + d_in..];
    let w2 = Mat::from_vec(d_in, d_in, rest[..d_in * d_in].to_vec()).expect("message shape");
    let b2 = &rest[d_in * d_in..];
    let c = w2.matvec(b1).iter().zip(b2).map(|(a, b)| a + b).collect();
    (w2.matmul(&w1), c)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 && nb == 0.0 {
        return 1.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Rebuilds `g` without node `drop`, returning the old index of each kept node.
fn remove_node(g: &mut Ceg, drop: usize) -> Vec<usize> {
    let fix = |i: usize| if i > drop { i - 1 } else { i };
    g.nodes.remove(drop);
    g.data_edges.retain(|e| e.src != drop && e.dst != drop);
    g.causal_edges.retain(|e| e.src != drop && e.dst != drop);
    for e in &mut g.data_edges {
        (e.src, e.dst) = (fix(e.src), fix(e.dst));
    }
    for e in &mut g.causal_edges {
        (e.src, e.dst) = (fix(e.src), fix(e.dst));
    }
    g.outputs = g.outputs.iter().filter(|&&o| o != drop).map(|&o| fix(o)).collect();
    (0..=g.nodes.len()).filter(|&i| i != drop).collect()
}

/// Folds node `v` into node `u` (same neighbors), averaging parameters and
/// combining outgoing edges exactly.
fn fold_pair(g: &Ceg, u: usize, v: usize) -> Result<Ceg, CegError> {
    let mut out = g.clone();
    let params = average(&g.nodes[u].prim.params(), &g.nodes[v].prim.params());
    out.nodes[u] = CegNode {
        id: g.nodes[u].id.clone(),
        prim: g.nodes[u].prim.clone().with_params(&params)?,
        adapter: average(&g.nodes[u].adapter, &g.nodes[v].adapter),
    };
    for (k, e) in g.data_edges.iter().enumerate() {
        if e.dst == u {
            let twin = g.data_edges.iter().find(|f| f.dst == v && f.src == e.src).expect("shared in-neighbor");
            out.data_edges[k].msg = average(&e.msg, &twin.msg);
        } else if e.src == u {
            let twin = g.data_edges.iter().find(|f| f.src == v && f.dst == e.dst).expect("shared out-neighbor");
            let (d_in, d_src) = (g.nodes[e.dst].in_dim(), g.nodes[u].out_dim());
            let (a1, c1) = effective_msg(&e.msg, d_in, d_src);
            let (a2, c2) = effective_msg(&twin.msg, d_in, d_src);
            let mut msg = a1.add(&a2).into_data();
            msg.extend(c1.iter().zip(&c2).map(|(x, y)| x + y));
            msg.extend(super::identity_affine(d_in, d_in));
            out.data_edges[k].msg = msg;
        }
    }
    for (k, e) in g.causal_edges.iter().enumerate() {
        let incoming = e.dst == u;
        if !incoming && e.src != u {
            continue;
        }
        let twin = g
            .causal_edges
            .iter()
            .find(|f| if incoming { f.dst == v && f.src == e.src } else { f.src == v && f.dst == e.dst })
            .expect("shared neighbor");
        let w = e.weight.max(twin.weight);
        // w·P reproduces the mean (incoming) or the sum (outgoing) of the
        // two effective projections.
        let scale = if incoming { 2.0 } else { 1.0 };
        out.causal_edges[k].weight = w;
        out.causal_edges[k].proj = e
            .proj
            .iter()
            .zip(&twin.proj)
            .map(|(p1, p2)| {
                if w > 0.0 {
                    (e.weight * p1 + twin.weight * p2) / (scale * w)
                } else {
                    (p1 + p2) / scale
                }
            })
            .collect();
    }
    remove_node(&mut out, v);
    Ok(out)
}

/// Merges pairs of non-source, non-output nodes that share signatures,
/// executor family and every neighbor set, and whose stacked output values
/// over probes have cosine similarity at least `1 − δ`.
pub fn merge(g: &Ceg, delta: f64, probes: &[ValueMap]) -> Result<PassOutcome, CegError> {
    if probes.is_empty() || !(delta >= 0.0) {
        return Err(CegError::Invalid("merge needs probes and δ ≥ 0".into()));
    }
    let states = final_states(g, probes)?;
    let n = g.nodes.len();
    let stacked: Vec<Vec<f64>> = (0..n).map(|i| states.iter().flat_map(|x| x[i].clone()).collect()).collect();
    let keys: Vec<_> = (0..n).map(|i| neighbor_key(g, i)).collect();
    let eligible = |i: usize| !g.is_source(i) && !g.outputs.contains(&i);
    let mut used = vec![false; n];
    let mut pairs = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            if used[u] || used[v] || !eligible(u) || !eligible(v) {
                continue;
            }
            let (pu, pv) = (&g.nodes[u].prim, &g.nodes[v].prim);
            let same = pu.in_sig == pv.in_sig
                && pu.out_sig == pv.out_sig
                && pu.family() == pv.family()
                && pu.n_params() == pv.n_params()
                && keys[u] == keys[v];
            if same && cosine(&stacked[u], &stacked[v]) >= 1.0 - delta {
                used[u] = true;
                used[v] = true;
                pairs.push((u, v));
            }
        }
    }
    // Fold from the highest index down so earlier indices stay valid.
    let mut out = g.clone();
    let mut origin: Vec<usize> = (0..n).collect();
    let mut replaced = BTreeSet::new();
    pairs.sort_by_key(|&(_, v)| std::cmp::Reverse(v));
    for &(u, v) in &pairs {
        out = fold_pair(&out, u, v)?;
        let kept = remove_node_index(&origin, v);
        origin = kept;
        replaced.insert(u);
    }
    let replaced: BTreeSet<usize> = replaced.into_iter().map(|u| origin.iter().position(|&o| o == u).expect("merged node kept")).collect();
    let eps = if pairs.is_empty() { 0.0 } else { defect(g, &out, &origin, &replaced, &states) };
    out.validate()?;
    out.pass_eps = g.pass_eps + eps;
    Ok(PassOutcome {
        graph: out,
        eps,
        changes: pairs.len(),
    })
}

/// Origin map after dropping the node currently holding old index `v`.
fn remove_node_index(origin: &[usize], v: usize) -> Vec<usize> {
    origin.iter().copied().filter(|&o| o != v).collect()
}

/// Replaces two-node chains `u → v` whose composite id `seq(u,v)` is
/// registered below a library primitive with matching boundary signatures.
/// The replacement keeps `v`'s id and `u`'s adapter and is accepted only if
/// its error on the probes, and any recorded certificate error, is at most
/// `γ`. Repeats until no chain qualifies.
pub fn abstract_chains(
    g: &Ceg,
    registry: &AbstractionRegistry,
    library: &[Primitive],
    gamma: f64,
    probes: &[ValueMap],
) -> Result<PassOutcome, CegError> {
    if probes.is_empty() || !(gamma >= 0.0) {
        return Err(CegError::Invalid("abstraction needs probes and γ ≥ 0".into()));
    }
    let states = final_states(g, probes)?;
    let mut cur = g.clone();
    let mut origin: Vec<usize> = (0..g.nodes.len()).collect();
    let mut replaced: BTreeSet<usize> = BTreeSet::new();
    let mut changes = 0;
    'outer: loop {
        let adj = cur.adjacency();
        let n = cur.nodes.len();
        for u in 0..n {
            let outs: Vec<usize> = (0..n).filter(|&j| adj[u][j]).collect();
            if outs.len() != 1 || cur.is_source(u) || cur.outputs.contains(&u) {
                continue;
            }
            let v = outs[0];
            if (0..n).filter(|&j| adj[j][v]).count() != 1 {
                continue;
            }
            let low = format!("seq({},{})", cur.nodes[u].prim.id, cur.nodes[v].prim.id);
            let certified = |h: &str| {
                registry.precedes(&low, h)
                    && registry.direct().all(|(l, hh, c)| l != low || hh != h || c.max_error <= gamma)
            };
            for high in library {
                if high.id == low
                    || !certified(&high.id)
                    || high.in_sig != cur.nodes[u].prim.in_sig
                    || high.out_sig != cur.nodes[v].prim.out_sig
                {
                    continue;
                }
                let candidate = replace_chain(&cur, u, v, high);
                let mut cand_origin = remove_node_index(&origin, origin[u]);
                let hv = if v > u { v - 1 } else { v };
                cand_origin[hv] = origin[v];
                let cand_replaced: BTreeSet<usize> = replaced
                    .iter()
                    .map(|&r| if r > u { r - 1 } else { r })
                    .chain(std::iter::once(hv))
                    .collect();
                // Behavioral error of the replacement against the original chain.
                let err = chain_error(&candidate, &cand_origin, hv, &states);
                if err <= gamma {
                    cur = candidate;
                    origin = cand_origin;
                    replaced = cand_replaced;
                    changes += 1;
                    continue 'outer;
                }
            }
        }
        break;
    }
    let eps = if changes == 0 { 0.0 } else { defect(g, &cur, &origin, &replaced, &states) };
    cur.validate()?;
    cur.pass_eps = g.pass_eps + eps;
    Ok(PassOutcome { graph: cur, eps, changes })
}

/// `u → v` collapsed into one node holding `high`, at `v`'s position with
/// `v`'s id and `u`'s adapter and in-edges.
fn replace_chain(g: &Ceg, u: usize, v: usize, high: &Primitive) -> Ceg {
    let mut out = g.clone();
    out.nodes[v] = CegNode {
        id: g.nodes[v].id.clone(),
        prim: high.clone(),
        adapter: g.nodes[u].adapter.clone(),
    };
    out.data_edges.retain(|e| !(e.src == u && e.dst == v));
    out.causal_edges.retain(|e| !(e.src == u && e.dst == v));
    for e in &mut out.data_edges {
        if e.dst == u {
            e.dst = v;
        }
    }
    for e in &mut out.causal_edges {
        if e.dst == u {
            e.dst = v;
        }
    }
    remove_node(&mut out, u);
    out
}

/// Largest output error of the replacement node against the original chain
/// end, both evaluated from the reference states.
fn chain_error(new: &Ceg, origin: &[usize], h: usize, states: &[Vec<Vec<f64>>]) -> f64 {
    let ln = Layout::new(new);
    let tn = new.params();
    let none = |_: EdgeRef| false;
    states
        .iter()
        .map(|x| {
            let xt: Vec<Vec<f64>> = origin.iter().map(|&o| x[o].clone()).collect();
            let s = new.aggregate(&ln, &tn, &xt, h, &none);
            let y = respond(new, &ln, &tn, h, &s, &x[origin[h]]);
            diff_norm(&y, &x[origin[h]])
        })
        .fold(0.0, f64::max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquivalenceReport {
    pub deviation: f64,
    pub lipschitz: f64,
    pub depth: usize,
    pub eps: f64,
    pub bound: f64,
    pub pass: bool,
}

/// Sampled Lipschitz estimate: the largest difference quotient of any
/// node's update, both as a map of its stacked in-neighbor values and as a
/// map of its aggregated input. At least 1.
fn lipschitz_estimate(g: &Ceg, states: &[Vec<Vec<f64>>], r: &mut Rng) -> f64 {
    let nodes: Vec<usize> = (0..g.nodes.len()).filter(|&i| !g.is_source(i)).collect();
    if nodes.is_empty() || states.is_empty() {
        return 1.0;
    }
    let layout = Layout::new(g);
    let theta = g.params();
    let none = |_: EdgeRef| false;
    let mut best: f64 = 1.0;
    for pair in 0..LIPSCHITZ_PAIRS {
        let x = &states[r.random_range(0..states.len())];
        let i = nodes[r.random_range(0..nodes.len())];
        let scale = if pair % 2 == 0 { 1e-3 } else { 0.5 };
        let mut xp = x.clone();
        let mut denom = 0.0;
        for j in g.in_neighbors(i) {
            let d: Vec<f64> = xp[j].iter().map(|_| r.random_range(-scale..=scale)).collect();
            denom += norm(&d);
            for (a, b) in xp[j].iter_mut().zip(d) {
                *a += b;
            }
        }
        let s0 = g.aggregate(&layout, &theta, x, i, &none);
        let s1 = g.aggregate(&layout, &theta, &xp, i, &none);
        let y0 = respond(g, &layout, &theta, i, &s0, &x[i]);
        let y1 = respond(g, &layout, &theta, i, &s1, &x[i]);
        if denom > 0.0 {
            best = best.max(diff_norm(&y0, &y1) / denom);
        }
        let ds: Vec<f64> = s0.iter().map(|_| r.random_range(-scale..=scale)).collect();
        let s2: Vec<f64> = s0.iter().zip(&ds).map(|(a, b)| a + b).collect();
        let y2 = respond(g, &layout, &theta, i, &s2, &x[i]);
        let dn = norm(&ds);
        if dn > 0.0 {
            best = best.max(diff_norm(&y0, &y2) / dn);
        }
    }
    best
}

/// Compares `g2` against the reference `g` on probes: deviation is the
/// largest output 2-norm difference; the bound is `1.1·L̂^k·ε` with `k` the
/// longest path and `ε` the input change recorded by passes since `g`.
pub fn verify_equivalence(g: &Ceg, g2: &Ceg, probes: &[ValueMap], seed: u64) -> Result<EquivalenceReport, CegError> {
    let (ids1, ids2) = (g.output_ids(), g2.output_ids());
    let ids2_set: BTreeSet<&String> = ids2.iter().collect();
    if ids1.len() != ids2.len() || !ids1.iter().all(|i| ids2_set.contains(i)) {
        return Err(CegError::Invalid("graphs expose different outputs".into()));
    }
    let s1 = final_states(g, probes)?;
    let s2 = final_states(g2, probes)?;
    let mut deviation: f64 = 0.0;
    for (a, b) in s1.iter().zip(&s2) {
        for id in &ids1 {
            let (i, j) = (g.index(id).expect("output id"), g2.index(id).expect("output id"));
            deviation = deviation.max(diff_norm(&a[i], &b[j]));
        }
    }
    let mut r = rng_stream(seed, 7);
    let lipschitz = lipschitz_estimate(g, &s1, &mut r).max(lipschitz_estimate(g2, &s2, &mut r));
    let depth = g.longest_path().unwrap_or(g.nodes.len()).max(g2.longest_path().unwrap_or(g2.nodes.len()));
    let eps = (g2.pass_eps - g.pass_eps).max(0.0);
    let bound = BOUND_SAFETY * lipschitz.powi(depth as i32) * eps;
    Ok(EquivalenceReport {
        deviation,
        lipschitz,
        depth,
        eps,
        bound,
        pass: deviation <= bound + ROUNDOFF,
    })
}

fn tensor2() -> TypeSig {
    TypeSig::of(&[("x", CausalType::tensor(CausalType::PHYS, &[2]))])
}

fn random_node(id: &str, r: &mut Rng) -> Primitive {
    let spec = PrimitiveSpec {
        squash: false,
        ..PrimitiveSpec::new(
            id,
            Layer::Phys,
            tensor2(),
            tensor2(),
            Executor::AffineNet {
                widths: vec![2, 3, 2],
                nonlinearity: Nonlinearity::Tanh,
            },
        )
    };
    let p = make_primitive(spec, r).expect("fixed spec");
    let params: Vec<f64> = (0..p.n_params()).map(|_| r.random_range(-1.0..=1.0)).collect();
    p.with_params(&params).expect("matching length")
}

/// Layered random DAG over `Tensor[Phys;2]` tanh nodes with longest path at
/// most 6, mixed data and causal edges (weights in [0.02, 1]) and some
/// duplicated interior nodes.
pub fn random_dag(seed: u64) -> Ceg {
    let mut r = rng(seed);
    let depth = r.random_range(2..=6usize);
    let mut layers: Vec<Vec<usize>> = Vec::new();
    let mut b = CegBuilder::new();
    let mut twin: Vec<Option<usize>> = Vec::new();
    let mut count = 0;
    let mut add = |b: &mut CegBuilder, twin: &mut Vec<Option<usize>>, r: &mut Rng| {
        let id = format!("n{count}");
        count += 1;
        twin.push(None);
        b.node(&id, random_node(&id, r)).expect("fresh id")
    };
    layers.push((0..r.random_range(1..=2)).map(|_| add(&mut b, &mut twin, &mut r)).collect());
    for level in 1..=depth {
        let mut this = Vec::new();
        for _ in 0..r.random_range(1..=3) {
            let i = add(&mut b, &mut twin, &mut r);
            let prev = &layers[level - 1];
            let mut parents = vec![prev[r.random_range(0..prev.len())]];
            if r.random_bool(0.5) {
                let earlier: Vec<usize> = layers.iter().flatten().copied().collect();
                parents.push(earlier[r.random_range(0..earlier.len())]);
            }
            parents.sort_unstable();
            parents.dedup();
            // A twinned parent feeds both copies through identical edges so
            // they keep equal out-neighbors.
            let mut done = BTreeSet::new();
            for p in parents {
                if done.insert(p) {
                    let edge = random_edge(&mut r);
                    link(&mut b, p, i, &edge);
                    if let Some(t) = twin[p] {
                        done.insert(t);
                        link(&mut b, t, i, &edge);
                    }
                }
            }
            this.push(i);
            if level < depth && r.random_bool(0.3) {
                let j = add(&mut b, &mut twin, &mut r);
                let mut g = b.build().expect("valid so far");
                g.nodes[j].prim = g.nodes[i].prim.renamed(&g.nodes[j].id);
                if r.random_bool(0.5) {
                    let p: Vec<f64> = g.nodes[j].prim.params().iter().map(|v| v + r.random_range(-1e-4..=1e-4)).collect();
                    g.nodes[j].prim.set_params(&p).expect("same length");
                }
                let copies: Vec<_> = g.data_edges.iter().filter(|e| e.dst == i).map(|e| super::DataEdge { dst: j, ..e.clone() }).collect();
                g.data_edges.extend(copies);
                let copies: Vec<_> = g.causal_edges.iter().filter(|e| e.dst == i).map(|e| super::CausalEdge { dst: j, ..e.clone() }).collect();
                g.causal_edges.extend(copies);
                b = CegBuilder { g };
                twin[i] = Some(j);
                twin[j] = Some(i);
                this.push(j);
            }
        }
        layers.push(this);
    }
    let mut g = b.build().expect("layered graph is acyclic");
    g.outputs = (0..g.nodes.len())
        .filter(|&i| !g.data_edges.iter().any(|e| e.src == i) && !g.causal_edges.iter().any(|e| e.src == i))
        .collect();
    g
}

enum RandomEdge {
    Data(Vec<f64>),
    Causal(f64, Vec<f64>),
}

fn random_edge(r: &mut Rng) -> RandomEdge {
    if r.random_bool(0.5) {
        let mut msg = gather_msg(2, 2, &[(0, 0), (1, 1)]);
        for v in &mut msg {
            *v += r.random_range(-0.3..=0.3);
        }
        RandomEdge::Data(msg)
    } else {
        let proj = (0..4).map(|_| r.random_range(-1.0..=1.0)).collect();
        RandomEdge::Causal(r.random_range(0.02..=1.0), proj)
    }
}

fn link(b: &mut CegBuilder, src: usize, dst: usize, edge: &RandomEdge) {
    if src == dst || b.g.has_data(src, dst) || b.g.has_causal(src, dst) {
        return;
    }
    match edge {
        RandomEdge::Data(msg) => b.g.data_edges.push(super::DataEdge { src, dst, msg: msg.clone() }),
        RandomEdge::Causal(weight, proj) => b.g.causal_edges.push(super::CausalEdge {
            src,
            dst,
            weight: *weight,
            proj: proj.clone(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algebra::{compose_seq, is_abstraction_of};
    use crate::ceg::values;

    fn phys() -> TypeSig {
        TypeSig::of(&[("x", CausalType::PHYS)])
    }

    fn lin(id: &str, layer: Layer, w: f64) -> Primitive {
        Primitive::linear(id, layer, phys(), phys(), &[w], &[0.0]).unwrap()
    }

    fn scalar_probes() -> Vec<ValueMap> {
        (0..9).map(|k| values(&[("s", vec![-1.0 + 0.25 * k as f64])])).collect()
    }

    #[test]
    fn prune_removes_weak_causal_edge() {
        let mut b = CegBuilder::new();
        b.node("s", lin("s", Layer::Phys, 1.0)).unwrap();
        b.node("t", lin("t", Layer::Phys, 1.0)).unwrap();
        b.node("y", lin("y", Layer::Phys, 1.0)).unwrap();
        b.data("s", "t").unwrap().data("t", "y").unwrap().causal("s", "y", 0.05).unwrap().output("y").unwrap();
        let g = b.build().unwrap();
        let probes = scalar_probes();
        let cfg = PassConfig::default();
        let out = prune(&g, &cfg, &probes).unwrap();
        assert_eq!(out.changes, 1);
        assert!(out.graph.causal_edges.is_empty());
        // Largest removed contribution is 0.05·|s| at |s| = 1.
        assert!((out.eps - 0.05).abs() < 1e-12);
        let again = prune(&out.graph, &cfg, &probes).unwrap();
        assert_eq!(again.changes, 0);
        assert_eq!(again.graph.data_edges, out.graph.data_edges);
        assert_eq!(again.graph.causal_edges, out.graph.causal_edges);
        let strong = PassConfig { tau_prune: 0.01, ..cfg };
        assert_eq!(prune(&g, &strong, &probes).unwrap().graph, g);
    }

    #[test]
    fn exact_duplicate_merges_without_change() {
        let mut b = CegBuilder::new();
        b.node("s", lin("s", Layer::Phys, 1.0)).unwrap();
        b.node("a", lin("a", Layer::Phys, 1.5)).unwrap();
        b.node("a2", lin("a", Layer::Phys, 1.5)).unwrap();
        b.node("y", lin("y", Layer::Phys, 0.7)).unwrap();
        b.data("s", "a").unwrap().data("s", "a2").unwrap();
        b.causal("a", "y", 0.6).unwrap().causal("a2", "y", 0.6).unwrap().output("y").unwrap();
        let g = b.build().unwrap();
        let probes = scalar_probes();
        let out = merge(&g, 1e-3, &probes).unwrap();
        assert_eq!(out.changes, 1);
        assert_eq!(out.graph.nodes.len(), 3);
        let rep = verify_equivalence(&g, &out.graph, &probes, 0).unwrap();
        assert!(rep.deviation < 1e-12, "{rep:?}");
        assert!(rep.pass);
    }

    #[test]
    fn distinct_nodes_are_not_merged() {
        let mut b = CegBuilder::new();
        b.node("s", lin("s", Layer::Phys, 1.0)).unwrap();
        b.node("a", lin("a", Layer::Phys, 1.5)).unwrap();
        b.node("c", lin("c", Layer::Phys, -1.5)).unwrap();
        b.node("y", lin("y", Layer::Phys, 0.7)).unwrap();
        b.data("s", "a").unwrap().data("s", "c").unwrap();
        b.causal("a", "y", 0.6).unwrap().causal("c", "y", 0.6).unwrap().output("y").unwrap();
        let g = b.build().unwrap();
        let out = merge(&g, 1e-3, &scalar_probes()).unwrap();
        assert_eq!(out.changes, 0);
        assert_eq!(out.graph, g);
    }

    #[test]
    fn registered_chain_is_abstracted() {
        let u = lin("u", Layer::Phys, 2.0);
        let v = lin("v", Layer::Phys, 3.0);
        let high = lin("h", Layer::Func, 6.01);
        let mut b = CegBuilder::new();
        b.node("s", lin("s", Layer::Phys, 1.0)).unwrap();
        b.node("nu", u.clone()).unwrap();
        b.node("nv", v.clone()).unwrap();
        b.data("s", "nu").unwrap().data("nu", "nv").unwrap().output("nv").unwrap();
        let g = b.build().unwrap();
        let probes = scalar_probes();
        let flat: Vec<Vec<f64>> = probes.iter().map(|p| p["s"].clone()).collect();
        let chain = compose_seq(&u, &v).unwrap();
        let (ok, cert) = is_abstraction_of(&chain, &high, &flat, 0.05);
        assert!(ok && (cert.max_error - 0.01).abs() < 1e-12);
        let mut reg = AbstractionRegistry::new();
        reg.register(&chain.id, "h", cert).unwrap();
        let lib = vec![high];
        let out = abstract_chains(&g, &reg, &lib, 0.05, &probes).unwrap();
        assert_eq!(out.graph.nodes.len(), g.nodes.len() - 1);
        assert_eq!(out.graph.output_ids(), vec!["nv".to_string()]);
        assert!(verify_equivalence(&g, &out.graph, &probes, 0).unwrap().pass);
        assert_eq!(abstract_chains(&g, &reg, &lib, 0.0, &probes).unwrap().changes, 0);
        let empty = abstract_chains(&g, &AbstractionRegistry::new(), &lib, 0.05, &probes).unwrap();
        assert_eq!(empty.graph, g);
    }

    #[test]
    fn linear_chain_bound() {
        // Chain of three ×2 nodes after the source; perturb the first input by 0.01.
        let build = |w: f64| {
            let mut b = CegBuilder::new();
            b.node("s", lin("s", Layer::Phys, 1.0)).unwrap();
            for k in 1..=3 {
                b.node(&format!("n{k}"), lin("n", Layer::Phys, 2.0)).unwrap();
            }
            b.data("s", "n1").unwrap().data("n1", "n2").unwrap().data("n2", "n3").unwrap();
            b.output("n3").unwrap();
            let mut g = b.build().unwrap();
            g.data_edges[0].msg[1] = w;
            g
        };
        let g = build(0.0);
        let mut g2 = build(0.01);
        g2.pass_eps = 0.01;
        let probes = scalar_probes();
        let rep = verify_equivalence(&g, &g2, &probes, 1).unwrap();
        assert_eq!(rep.depth, 3);
        assert!((rep.lipschitz - 2.0).abs() < 1e-9);
        assert!((rep.deviation - 0.08).abs() < 1e-12);
        assert!(rep.deviation <= 2f64.powi(3) * 0.01 + 1e-15);
        assert!(rep.pass);
        let same = verify_equivalence(&g, &g, &probes, 1).unwrap();
        assert_eq!(same.deviation, 0.0);
        assert!(same.pass);
    }

    #[test]
    fn random_dags_are_valid_and_shallow() {
        for seed in 0..20 {
            let g = random_dag(seed);
            g.validate().unwrap();
            assert!(g.longest_path().unwrap() <= 6);
            let cfg = PassConfig { seed, ..PassConfig::default() };
            let probes = cfg.sample_probes(&g);
            let p = prune(&g, &cfg, &probes).unwrap();
            let m = merge(&p.graph, cfg.delta, &probes).unwrap();
            let rep = verify_equivalence(&g, &m.graph, &probes, seed).unwrap();
            assert!(rep.pass, "seed {seed}: {rep:?}");
        }
    }
}
