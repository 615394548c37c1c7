//! End-to-end acceptance checks with independent oracles. Each check returns
//! a [`CriterionResult`]; [`run_all`] runs the whole suite.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::algebra::{check_axioms, compose_par, compose_seq};
use crate::ceg::{build_ceg, extract_scm, fit_ceg, merge, prune, random_dag, verify_equivalence, CegBuilder, Example, PassConfig, ScmDescription, TAU};
use crate::meta::{cusum_detect, meta_run, update_perf_graph, MetaRunConfig, PerfBatch, PerfCausalGraph, PerfGraphConfig, PerfVariable, VarKind};
use crate::numerics::{check_gradient, descend, lstsq, objective, rng_stream, Mat, OptimizerConfig, Rng, Var};
use crate::primitives::{check_values, make_primitive, seed_library, Executor, Layer, Nonlinearity, Primitive, PrimitiveSpec, ValueMap};
use crate::routing::{
    conservation_residual, estimate_causal_strength, flow_gain, fuse, fuse_objective, AttentionLayout, FuseConfig, KnowledgeGraph,
    RoutingQuadratic, SymbolicInputs, BASE_DIM, HEAD_DIM,
};
use crate::types::{CausalType, TypeSig};
use crate::worlds::{shd, toy_suite, ChainWorld, DoMap, LinearGaussianScm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: u8,
    pub name: String,
    pub pass: bool,
    pub detail: String,
    pub seconds: f64,
    pub budget_seconds: f64,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "[{}] criterion {:>2} {:<28} {:>8.2}s / {:>5.0}s  {}",
            if self.pass { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.seconds,
            self.budget_seconds,
            self.detail
        )
    }
}

fn timed(id: u8, name: &str, budget: f64, f: impl FnOnce() -> (bool, String)) -> CriterionResult {
    let start = Instant::now();
    let (ok, detail) = f();
    let seconds = start.elapsed().as_secs_f64();
    CriterionResult {
        id,
        name: name.into(),
        pass: ok && seconds < budget,
        detail,
        seconds,
        budget_seconds: budget,
    }
}

/// Every criterion in order.
pub fn run_all(seed: u64) -> Vec<CriterionResult> {
    vec![
        type_safety(seed),
        algebra_axioms(seed),
        routing_convergence(seed),
        complexity_scaling(seed),
        pass_equivalence(seed),
        approximation(seed),
        conservation_fusion(seed),
        structure_recovery(seed),
        counterfactuals(seed),
        meta_direction(seed),
        change_detection(seed),
        gradient_integrity(seed),
        compositional_generalization(seed),
    ]
}

pub fn run_one(id: u8, seed: u64) -> Option<CriterionResult> {
    let f: fn(u64) -> CriterionResult = match id {
        1 => type_safety,
        2 => algebra_axioms,
        3 => routing_convergence,
        4 => complexity_scaling,
        5 => pass_equivalence,
        6 => approximation,
        7 => conservation_fusion,
        8 => structure_recovery,
        9 => counterfactuals,
        10 => meta_direction,
        11 => change_detection,
        12 => gradient_integrity,
        13 => compositional_generalization,
        _ => return None,
    };
    Some(f(seed))
}

// ---------------------------------------------------------------- oracles

/// Structural subtyping written out independently of the type checker.
fn oracle_subtype(a: &CausalType, b: &CausalType) -> bool {
    match a {
        CausalType::Base(x) => matches!(b, CausalType::Base(y) if x == y),
        CausalType::Tensor { elem, dims } => match b {
            CausalType::Tensor { elem: e2, dims: d2 } => dims == d2 && oracle_subtype(elem, e2),
            _ => false,
        },
        CausalType::Func { from, to } => match b {
            CausalType::Func { from: f2, to: t2 } => oracle_subtype(f2, from) && oracle_subtype(to, t2),
            _ => false,
        },
        CausalType::Product(xs) => match b {
            CausalType::Product(ys) => xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| oracle_subtype(x, y)),
            _ => false,
        },
        CausalType::Sum(xs) => match b {
            CausalType::Sum(ys) => xs.len() == ys.len() && xs.iter().zip(ys).all(|(x, y)| oracle_subtype(x, y)),
            _ => false,
        },
    }
}

/// Enumerates every assignment of input slots to output slots and accepts
/// iff one of them is slot-wise type-correct.
pub fn brute_force_compatible(out_sig: &TypeSig, in_sig: &TypeSig) -> bool {
    let (outs, ins) = (out_sig.slots(), in_sig.slots());
    if ins.is_empty() {
        return true;
    }
    if outs.is_empty() {
        return false;
    }
    let total = outs.len().pow(ins.len() as u32);
    (0..total).any(|code| {
        let mut c = code;
        ins.iter().all(|i| {
            let o = &outs[c % outs.len()];
            c /= outs.len();
            oracle_subtype(&i.ty, &o.ty)
        })
    })
}

/// `x = (I − D Bᵀ)⁻¹ (D u + (I − D) v)` with `u = (I − Bᵀ) e` and `D` the
/// indicator of unforced variables.
pub fn closed_form_counterfactual(world: &LinearGaussianScm, evidence: &[f64], forced: &[(usize, f64)]) -> Vec<f64> {
    let n = world.n_vars();
    let bt = world.coef.transpose();
    let u: Vec<f64> = evidence.iter().zip(bt.matvec(evidence)).map(|(e, p)| e - p).collect();
    let free: Vec<f64> = (0..n).map(|j| if forced.iter().any(|f| f.0 == j) { 0.0 } else { 1.0 }).collect();
    let a = Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - free[i] * bt[(i, j)]);
    let rhs: Vec<f64> = (0..n)
        .map(|j| match forced.iter().find(|f| f.0 == j) {
            Some(&(_, v)) => v,
            None => u[j],
        })
        .collect();
    a.inverse().expect("triangular up to permutation").matvec(&rhs)
}

// ---------------------------------------------------------------- 1

fn type_safety(seed: u64) -> CriterionResult {
    timed(1, "type-safety fuzz", 60.0, || {
        let lib = seed_library(seed);
        let mut r = rng_stream(seed, 1);
        let (mut accepted, mut rejected, mut mismatches, mut runtime_errors) = (0usize, 0usize, 0usize, 0usize);
        for _ in 0..10_000 {
            let depth = r.random_range(1..=6);
            let mut cur = lib.choose(&mut r).expect("library").clone();
            for _ in 0..depth {
                // Half the draws come from the oracle-compatible set so chains grow.
                let compatible: Vec<&Primitive> = lib.iter().filter(|q| brute_force_compatible(&cur.out_sig, &q.in_sig)).collect();
                let next = if r.random::<bool>() && !compatible.is_empty() {
                    (*compatible.choose(&mut r).expect("nonempty")).clone()
                } else {
                    lib.choose(&mut r).expect("library").clone()
                };
                let oracle = brute_force_compatible(&cur.out_sig, &next.in_sig);
                match compose_seq(&cur, &next) {
                    Ok(c) => {
                        accepted += 1;
                        if !oracle {
                            mismatches += 1;
                        }
                        let x = c.random_input(&mut r);
                        match c.activate_flat(&x) {
                            Ok(e) if check_values(&c.out_sig, &e.y).is_ok() && e.y.iter().all(|v| v.is_finite()) => {}
                            _ => runtime_errors += 1,
                        }
                        cur = c;
                    }
                    Err(_) => {
                        rejected += 1;
                        if oracle {
                            mismatches += 1;
                        }
                        break;
                    }
                }
            }
        }
        (
            mismatches == 0 && runtime_errors == 0 && accepted > 0 && rejected > 0,
            format!("{accepted} accepted, {rejected} rejected, {mismatches} oracle mismatches, {runtime_errors} runtime errors"),
        )
    })
}

// ---------------------------------------------------------------- 2

fn composable_triples(lib: &[Primitive], count: usize, r: &mut Rng) -> Vec<(Primitive, Primitive, Primitive)> {
    let fits = |a: &Primitive, b: &Primitive| brute_force_compatible(&a.out_sig, &b.in_sig);
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let p1 = lib.choose(r).expect("library");
        let seconds: Vec<&Primitive> = lib.iter().filter(|q| fits(p1, q)).collect();
        let Some(p2) = seconds.choose(r) else { continue };
        let thirds: Vec<&Primitive> = lib.iter().filter(|q| fits(p2, q)).collect();
        // Prefer a third that p1 also feeds so the distributive law applies.
        let both: Vec<&Primitive> = thirds.iter().copied().filter(|q| fits(p1, q)).collect();
        let pool = if !both.is_empty() && r.random::<bool>() { &both } else { &thirds };
        let Some(p3) = pool.choose(r) else { continue };
        out.push((p1.clone(), (*p2).clone(), (*p3).clone()));
    }
    out
}

fn algebra_axioms(seed: u64) -> CriterionResult {
    timed(2, "algebra axioms", 120.0, || {
        let lib = seed_library(seed);
        let mut r = rng_stream(seed, 2);
        let triples = composable_triples(&lib, 1000, &mut r);
        let report = check_axioms(&triples, 32, 1e-9, &mut r);
        let detail = report
            .results
            .iter()
            .map(|a| format!("{:?} {} triples max {:.1e}", a.axiom, a.triples_checked, a.max_discrepancy))
            .collect::<Vec<_>>()
            .join("; ");
        (report.pass() && report.results.iter().all(|a| a.triples_checked > 0), detail)
    })
}

// ---------------------------------------------------------------- 3

/// Suboptimality below which ratios are pure round-off.
const ROUNDOFF_FLOOR: f64 = 1e-20;

fn routing_convergence(seed: u64) -> CriterionResult {
    timed(3, "routing convergence", 10.0, || {
        let mut worst = 0.0f64;
        let mut ok = true;
        for s in 0..20 {
            let q = RoutingQuadratic::random(seed.wrapping_add(s), 6, 0.5, 0.5);
            let (mu, l) = (q.mu(), q.smoothness());
            let f = objective(|w: &[Var<'_>]| q.value(w));
            let cfg = OptimizerConfig {
                record_iterates: true,
                ..OptimizerConfig::strongly_convex(mu, l, 200)
            };
            let boxed = |w: &mut [f64]| w.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
            let mut r = rng_stream(seed.wrapping_add(s), 3);
            let x0: Vec<f64> = (0..36).map(|_| r.random_range(0.0..=1.0)).collect();
            let run = match descend(&f, &x0, &cfg, Some(&boxed)) {
                Ok(run) => run,
                Err(_) => return (false, format!("seed {s}: descent failed")),
            };
            let rate = 1.0 - mu / l;
            for pair in run.iterates.windows(2) {
                let (a, b) = (q.suboptimality(&pair[0]), q.suboptimality(&pair[1]));
                if a <= ROUNDOFF_FLOOR {
                    continue;
                }
                let ratio = b / a;
                worst = worst.max(ratio / rate);
                ok &= ratio <= rate * (1.0 + 1e-6);
            }
            ok &= run.iterates.len() == 201;
        }
        (ok, format!("max ratio / (1-μη) = {worst:.6}"))
    })
}

// ---------------------------------------------------------------- 4

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub n: usize,
    pub k: usize,
    pub op_count: usize,
    pub bound: usize,
    pub dense: usize,
}

/// Pairwise-score counts of hierarchical attention on random embeddings.
pub fn bench_routing(sizes: &[usize], seed: u64) -> Vec<BenchRow> {
    sizes
        .iter()
        .map(|&n| {
            let mut r = rng_stream(seed, n as u64);
            let emb: Vec<Vec<f64>> = (0..n).map(|_| (0..BASE_DIM).map(|_| r.random_range(-1.0..=1.0)).collect()).collect();
            let layers: Vec<Layer> = (0..n).map(|_| *Layer::ALL.choose(&mut r).expect("layers")).collect();
            let k = (n as f64).sqrt().ceil() as usize;
            let layout = AttentionLayout::new(emb, &layers, k, false).expect("k ≤ n");
            BenchRow {
                n,
                k,
                op_count: layout.op_count(),
                bound: k * n.div_ceil(k).pow(2) + k * k,
                dense: n * n,
            }
        })
        .collect()
}

fn complexity_scaling(seed: u64) -> CriterionResult {
    timed(4, "complexity scaling", 30.0, || {
        let rows = bench_routing(&[64, 256, 1024], seed);
        let within = rows.iter().all(|r| r.op_count <= r.bound);
        let ratios: Vec<f64> = rows.iter().map(|r| r.op_count as f64 / r.dense as f64).collect();
        let decreasing = ratios.windows(2).all(|w| w[1] < w[0]);
        let detail = rows
            .iter()
            .zip(&ratios)
            .map(|(r, q)| format!("n={} ops={} bound={} ops/n²={q:.4}", r.n, r.op_count, r.bound))
            .collect::<Vec<_>>()
            .join("; ");
        (within && decreasing, detail)
    })
}

// ---------------------------------------------------------------- 5

fn pass_equivalence(seed: u64) -> CriterionResult {
    timed(5, "pass equivalence bound", 300.0, || {
        let mut passed = 0;
        let mut worst = 0.0f64;
        for s in 0..100 {
            let s = seed.wrapping_mul(100).wrapping_add(s);
            let g = random_dag(s);
            let cfg = PassConfig { seed: s, ..PassConfig::default() };
            let probes = cfg.sample_probes(&g);
            let Ok(p) = prune(&g, &cfg, &probes) else { continue };
            let Ok(m) = merge(&p.graph, cfg.delta, &probes) else { continue };
            let Ok(rep) = verify_equivalence(&g, &m.graph, &probes, s) else { continue };
            if rep.bound > 1e-9 {
                worst = worst.max(rep.deviation / rep.bound);
            }
            if rep.pass && g.longest_path().is_some_and(|k| k <= 6) {
                passed += 1;
            }
        }
        (passed == 100, format!("{passed}/100 within bound, max deviation/bound {worst:.3} where bound > 1e-9"))
    })
}

// ---------------------------------------------------------------- 6

fn phys_sig() -> TypeSig {
    TypeSig::of(&[("x", CausalType::PHYS)])
}

fn approximation(seed: u64) -> CriterionResult {
    timed(6, "desk-scale approximation", 120.0, || {
        let world = LinearGaussianScm::random(seed, 3, 1.0, (0.5, 1.5), 1.0);
        let n = world.n_vars();
        let mut b = CegBuilder::new();
        let mut r = rng_stream(seed, 6);
        for j in 0..n {
            b.node(&format!("U{j}"), Primitive::identity(&format!("u{j}"), Layer::Phys, phys_sig())).expect("fresh id");
            let w = r.random_range(0.5..1.0);
            let lin = Primitive::linear(&format!("f{j}"), Layer::Phys, phys_sig(), phys_sig(), &[w], &[0.0]).expect("scalar");
            b.node(&format!("X{j}"), lin).expect("fresh id");
        }
        for j in 0..n {
            b.data(&format!("U{j}"), &format!("X{j}")).expect("compatible");
            for i in 0..n {
                if world.coef[(i, j)] != 0.0 {
                    b.causal(&format!("X{i}"), &format!("X{j}"), 1.0).expect("acyclic");
                }
            }
        }
        for j in 0..n {
            b.output(&format!("X{j}")).expect("node");
        }
        let g = b.build().expect("valid graph");
        let truth = |u: &[f64]| closed_form_counterfactual(&world, &solve_forward(&world, u), &[]);
        let example = |u: &[f64]| Example {
            inputs: (0..n).map(|j| (format!("U{j}"), vec![u[j]])).collect(),
            targets: truth(u).into_iter().enumerate().map(|(j, v)| (format!("X{j}"), vec![v])).collect(),
        };
        let train: Vec<Example> = (0..64)
            .map(|_| {
                let u: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..=1.0)).collect();
                example(&u)
            })
            .collect();
        let steps = 5000;
        let (fitted, run) = match fit_ceg(&g, &train, None, &OptimizerConfig::adam(0.01, steps)) {
            Ok(v) => v,
            Err(e) => return (false, format!("fit failed: {e}")),
        };
        let grid: Vec<f64> = (0..21).map(|i| -1.0 + i as f64 / 10.0).collect();
        let mut worst = 0.0f64;
        for &a in &grid {
            for &bb in &grid {
                for &c in &grid {
                    let u = [a, bb, c];
                    let ex = example(&u);
                    let trace = fitted.execute(&ex.inputs, None).expect("sources given");
                    let out = fitted.outputs_of(&trace);
                    for (id, want) in &ex.targets {
                        worst = worst.max((out[id][0] - want[0]).abs());
                    }
                }
            }
        }
        (
            worst < 0.05 && run.trace.len() <= steps + 1,
            format!("max |f - E(G)| = {worst:.2e} on 21³ grid after {} steps", run.trace.len() - 1),
        )
    })
}

/// Observational values for exogenous `u` (no intervention).
fn solve_forward(world: &LinearGaussianScm, u: &[f64]) -> Vec<f64> {
    let n = world.n_vars();
    let a = Mat::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 } - world.coef[(j, i)]);
    a.inverse().expect("acyclic").matvec(u)
}

// ---------------------------------------------------------------- 7

fn conservation_fusion(seed: u64) -> CriterionResult {
    timed(7, "conservation fusion", 30.0, || {
        let mut ok = 0;
        for s in 0..100 {
            let mut r = rng_stream(seed, 700 + s);
            let n = r.random_range(3..=10);
            let mut m = || Mat::from_fn(n, n, |i, j| if i == j { 0.0 } else { r.random_range(0.0..=1.0) });
            let (w_sym, w_sub, strength) = (m(), m(), m());
            let info: Vec<f64> = (0..n).map(|_| rng_stream(seed, 7000 + s).random_range(0.0..=2.0)).collect();
            let Ok(f) = fuse(&w_sym, &w_sub, &info, &strength, &FuseConfig::default()) else { continue };
            let t = &f.residual_trace;
            if t.len() == 4 && t.windows(2).all(|w| w[1] <= w[0]) && t[3] <= t[0] {
                ok += 1;
            }
        }
        (ok == 100, format!("{ok}/100 monotone residual traces"))
    })
}

// ---------------------------------------------------------------- 8

const ANCESTOR_STRENGTH: f64 = 0.05;
const PARENT_ALPHA: f64 = 0.01;
const SCM_SAMPLES: usize = 500;

/// Interventional strengths give the ancestor relation; a t-test on the
/// regression of each variable on its ancestors keeps direct parents; the
/// resulting routing matrix builds a CEG whose SCM is read back.
pub fn recover_structure(world: &LinearGaussianScm, seed: u64) -> Result<Vec<Vec<bool>>, String> {
    recover_scm(world, seed).map(|(_, adj)| adj)
}

/// [`recover_structure`] plus the extracted SCM itself.
pub fn recover_scm(world: &LinearGaussianScm, seed: u64) -> Result<(ScmDescription, Vec<Vec<bool>>), String> {
    let n = world.n_vars();
    let mut strength = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                strength[(i, j)] = estimate_causal_strength(world, i, j, 0, seed).map_err(|e| e.to_string())?;
            }
        }
    }
    let data = world.sample(SCM_SAMPLES, seed);
    let mut w = Mat::zeros(n, n);
    for j in 0..n {
        let anc: Vec<usize> = (0..n).filter(|&i| i != j && strength[(i, j)] > ANCESTOR_STRENGTH).collect();
        if anc.is_empty() {
            continue;
        }
        let x = Mat::from_rows(&data.rows.iter().map(|row| std::iter::once(1.0).chain(anc.iter().map(|&i| row[i])).collect()).collect::<Vec<Vec<f64>>>());
        let y = data.column(j);
        let fit = lstsq(&x, &y).map_err(|e| e.to_string())?;
        let resid: f64 = x.matvec(&fit.coef).iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
        let dof = (SCM_SAMPLES - anc.len() - 1) as f64;
        let sigma2 = resid / dof;
        let Some(cov) = x.transpose().matmul(&x).inverse() else { continue };
        let t_dist = StudentsT::new(0.0, 1.0, dof).map_err(|e| e.to_string())?;
        for (k, &i) in anc.iter().enumerate() {
            let se = (sigma2 * cov[(k + 1, k + 1)]).sqrt();
            let t = if se > 0.0 { fit.coef[k + 1] / se } else { f64::INFINITY };
            let p = 2.0 * (1.0 - t_dist.cdf(t.abs()));
            if p < PARENT_ALPHA {
                w[(i, j)] = 1.0 - p;
            }
        }
    }
    let prims: Vec<Primitive> = world
        .names
        .iter()
        .map(|name| Primitive::linear(name, Layer::Phys, phys_sig(), phys_sig(), &[1.0], &[0.0]).expect("scalar"))
        .collect();
    let g = build_ceg(&prims, &w, TAU).map_err(|e| e.to_string())?;
    let mut r = rng_stream(seed, 8);
    let samples: Vec<ValueMap> = (0..n + 2).map(|_| g.random_sources(&mut r)).collect();
    let scm = extract_scm(&g, TAU, &samples).map_err(|e| e.to_string())?;
    let order: Vec<usize> = world.names.iter().map(|name| scm.variables.iter().position(|v| v == name).expect("node per variable")).collect();
    let adj = scm.adjacency();
    let adj = (0..n).map(|i| (0..n).map(|j| adj[order[i]][order[j]]).collect()).collect();
    Ok((scm, adj))
}

fn structure_recovery(seed: u64) -> CriterionResult {
    timed(8, "structure recovery", 300.0, || {
        let mut dists = Vec::new();
        let mut true_edges = 0;
        for (s, world) in toy_suite(seed).iter().enumerate() {
            let truth = world.true_graph();
            true_edges += truth.iter().flatten().filter(|&&e| e).count();
            match recover_structure(world, s as u64) {
                Ok(adj) => dists.push(shd(&adj, &truth)),
                Err(e) => return (false, format!("world {s}: {e}")),
            }
        }
        let mut sorted = dists.clone();
        sorted.sort_unstable();
        let median = (sorted[9] + sorted[10]) as f64 / 2.0;
        (median <= 2.0, format!("median SHD {median} over 20 worlds ({true_edges} true edges) {dists:?}"))
    })
}

// ---------------------------------------------------------------- 9

fn counterfactuals(seed: u64) -> CriterionResult {
    timed(9, "counterfactual oracle", 30.0, || {
        let mut r = rng_stream(seed, 9);
        let mut worst = 0.0f64;
        let mut consistent = 0;
        for q in 0..1000u64 {
            let n = r.random_range(2..=6);
            let world = LinearGaussianScm::random(seed.wrapping_add(q), n, 0.5, (0.5, 2.0), 1.0);
            let evidence = world.sample(1, q).rows.remove(0);
            let mut do_map = DoMap::new();
            let mut forced = Vec::new();
            for j in 0..n {
                if r.random_range(0.0..1.0) < 0.3 {
                    let v: f64 = StandardNormal.sample(&mut r);
                    do_map.insert(world.names[j].clone(), v);
                    forced.push((j, v));
                }
            }
            let Ok(cf) = world.counterfactual(&evidence, &do_map) else { return (false, "query failed".into()) };
            let oracle = closed_form_counterfactual(&world, &evidence, &forced);
            worst = cf.iter().zip(&oracle).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
            if q < 100 {
                // Forcing a variable to its observed value reproduces the evidence.
                let j = r.random_range(0..n);
                let same: DoMap = BTreeMap::from([(world.names[j].clone(), evidence[j])]);
                let back = world.counterfactual(&evidence, &same).expect("valid query");
                if back.iter().zip(&evidence).all(|(a, b)| (a - b).abs() <= 1e-12) {
                    consistent += 1;
                }
            }
        }
        (worst <= 1e-12 && consistent == 100, format!("max |cf - closed form| = {worst:.1e}, consistency {consistent}/100"))
    })
}

// ---------------------------------------------------------------- 10

fn meta_direction(seed: u64) -> CriterionResult {
    timed(10, "meta-evolution direction", 1200.0, || {
        let cfg = MetaRunConfig { seed, ..MetaRunConfig::default() };
        let frozen = MetaRunConfig { frozen: true, ..cfg.clone() };
        let (Ok(live), Ok(ablation)) = (meta_run(&cfg), meta_run(&frozen)) else {
            return (false, "meta run failed".into());
        };
        let ok = live.relative_improvement >= 0.10 && ablation.relative_improvement < 0.02 && live.violations == 0 && ablation.violations == 0;
        (
            ok,
            format!(
                "learned {:+.1}%, frozen {:+.1}%, {} accepted steps, {} violations",
                100.0 * live.relative_improvement,
                100.0 * ablation.relative_improvement,
                live.accepted,
                live.violations
            ),
        )
    })
}

// ---------------------------------------------------------------- 11

/// CUSUM threshold and allowance; the allowance is half the 5σ shift to detect.
pub const DETECT_H: f64 = 8.0;
pub const DETECT_K: f64 = 2.5;

fn change_detection(seed: u64) -> CriterionResult {
    timed(11, "change detection", 300.0, || {
        let mut r = rng_stream(seed, 11);
        let normal = |r: &mut Rng| -> f64 { StandardNormal.sample(r) };
        let mut worst_delay = 0usize;
        let mut missed = 0;
        for _ in 0..100 {
            let at = 100;
            let series: Vec<f64> = (0..200).map(|t| normal(&mut r) + if t >= at { 5.0 } else { 0.0 }).collect();
            match cusum_detect(&series, DETECT_H, DETECT_K) {
                Some(t) if t >= at && t - at <= 10 => worst_delay = worst_delay.max(t - at),
                _ => missed += 1,
            }
        }
        let alarms = (0..200)
            .filter(|_| {
                let series: Vec<f64> = (0..1000).map(|_| normal(&mut r)).collect();
                cusum_detect(&series, DETECT_H, DETECT_K).is_some()
            })
            .count();
        let vars = vec![
            PerfVariable { name: "add_flag".into(), kind: VarKind::Meta },
            PerfVariable { name: "beta".into(), kind: VarKind::Meta },
            PerfVariable { name: "accuracy".into(), kind: VarKind::Performance },
        ];
        let mut beta = 1.0;
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|t| {
                let flag = if t >= 25 { 1.0 } else { 0.0 };
                beta += r.random_range(-0.1..0.1);
                vec![flag, beta, 0.5 + 0.1 * flag + 0.02 * normal(&mut r)]
            })
            .collect();
        let conf = update_perf_graph(&PerfCausalGraph::new(vars), &PerfBatch { rows }, &PerfGraphConfig::default())
            .ok()
            .and_then(|(g, _)| g.edges.iter().find(|e| e.src == 0 && e.dst == 2).map(|e| e.confidence))
            .unwrap_or(0.0);
        let rate = alarms as f64 / 200.0;
        (
            missed == 0 && rate <= 0.01 && conf > 0.95,
            format!("worst delay {worst_delay}, missed {missed}/100, false alarms {alarms}/200, edge confidence {conf:.4}"),
        )
    })
}

// ---------------------------------------------------------------- 12

pub const GRAD_TOL: f64 = 1e-4;
const GRAD_POINTS: usize = 10;

struct GradTally {
    checked: usize,
    failed: Vec<String>,
    worst: f64,
}

impl GradTally {
    fn check<F>(&mut self, name: &str, f: &F, x: &[f64])
    where
        F: for<'t> Fn(&[Var<'t>]) -> Var<'t>,
    {
        self.checked += 1;
        match check_gradient(f, x) {
            Ok(c) => {
                self.worst = self.worst.max(c.max_rel_error);
                if !c.passes(GRAD_TOL) {
                    self.failed.push(format!("{name} ({:.1e})", c.max_rel_error));
                }
            }
            Err(e) => self.failed.push(format!("{name} ({e})")),
        }
    }
}

fn weights(n: usize, r: &mut Rng) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..=1.0)).collect()
}

fn check_primitive(t: &mut GradTally, p: &Primitive, r: &mut Rng) {
    let np = p.n_params();
    let c = weights(p.out_dim(), r);
    let f = objective(|z: &[Var<'_>]| {
        let e = p.eval(&z[..np], &z[np..]);
        e.y.iter().zip(&c).fold(e.a + e.u, |acc, (&y, &w)| acc + y * w)
    });
    let base = p.params();
    for _ in 0..GRAD_POINTS {
        let mut z: Vec<f64> = base.iter().map(|v| v + r.random_range(-0.1..=0.1)).collect();
        z.extend(p.random_input(r));
        t.check(&p.id, &f, &z);
    }
}

fn gradient_integrity(seed: u64) -> CriterionResult {
    timed(12, "gradient integrity", 300.0, || {
        let mut t = GradTally { checked: 0, failed: vec![], worst: 0.0 };
        let mut r = rng_stream(seed, 12);
        let lib = seed_library(seed);
        for p in &lib {
            check_primitive(&mut t, p, &mut r);
        }
        for (a, b, c) in composable_triples(&lib, 8, &mut r) {
            if let Ok(s) = compose_seq(&a, &b) {
                check_primitive(&mut t, &s, &mut r);
            }
            if let Ok(p) = compose_par(&b, &c.renamed(&format!("{}_r", c.id))) {
                check_primitive(&mut t, &p, &mut r);
            }
        }
        // Graph execution in every parameter.
        for s in 0..5 {
            let g = random_dag(seed.wrapping_add(s));
            let x0: Vec<Vec<f64>> = {
                let src = g.random_sources(&mut r);
                g.nodes.iter().map(|n| src.get(&n.id).cloned().unwrap_or_else(|| vec![0.0; n.out_dim()])).collect()
            };
            let held = vec![false; g.nodes.len()];
            let steps = g.default_steps();
            let c: Vec<Vec<f64>> = g.nodes.iter().map(|n| weights(n.out_dim(), &mut r)).collect();
            let f = objective(|theta: &[Var<'_>]| {
                let x: Vec<Vec<Var<'_>>> = x0.iter().map(|v| v.iter().map(|&a| Var::constant(a)).collect()).collect();
                let (states, unc, _) = g.run(theta, x, &held, steps);
                let last = states.last().expect("state");
                let mut total = unc.iter().fold(Var::constant(0.0), |a, &u| a + u);
                for (v, w) in last.iter().zip(&c) {
                    for (&y, &k) in v.iter().zip(w) {
                        total = total + y * k;
                    }
                }
                total
            });
            let base = g.params();
            for _ in 0..GRAD_POINTS {
                let z: Vec<f64> = base.iter().map(|v| v + r.random_range(-0.05..=0.05)).collect();
                t.check("ceg execution", &f, &z);
            }
        }
        // Fusion objective and conservation residual.
        let n = 6;
        let m = |r: &mut Rng| Mat::from_fn(n, n, |_, _| r.random_range(0.0..=1.0));
        let (w_sym, w_sub, strength) = (m(&mut r), m(&mut r), m(&mut r));
        let info = weights(n, &mut r).iter().map(|v| v.abs() + 0.1).collect::<Vec<_>>();
        let gain = flow_gain(&info, &strength);
        let fo = objective(|w: &[Var<'_>]| fuse_objective(w, &gain, &w_sym, &w_sub, 0.5, 0.5));
        let cr = objective(|w: &[Var<'_>]| conservation_residual(w, &gain));
        let q = RoutingQuadratic::random(seed, n, 0.5, 0.5);
        let qv = objective(|w: &[Var<'_>]| q.value(w));
        for _ in 0..GRAD_POINTS {
            let w: Vec<f64> = (0..n * n).map(|_| r.random_range(0.0..=1.0)).collect();
            t.check("fuse objective", &fo, &w);
            t.check("conservation residual", &cr, &w);
            t.check("routing quadratic", &qv, &w);
        }
        // Symbolic channel in θ and the entailment map.
        let ctx = weights(3, &mut r);
        let prims: Vec<Primitive> = lib.iter().take(8).cloned().collect();
        let inputs = SymbolicInputs::new(&prims, &KnowledgeGraph::new(), &ctx);
        let cw = weights(prims.len() * prims.len(), &mut r);
        let sym = objective(|z: &[Var<'_>]| inputs.weights(&z[..4], &z[4..]).iter().zip(&cw).fold(Var::constant(0.0), |a, (&w, &k)| a + w * k));
        for _ in 0..GRAD_POINTS {
            let z = weights(4 + ctx.len() * BASE_DIM, &mut r);
            t.check("symbolic weights", &sym, &z);
        }
        // Subsymbolic channel in the query and key projections.
        let heads = 2;
        let emb: Vec<Vec<f64>> = (0..12).map(|_| weights(6, &mut r)).collect();
        let layers: Vec<Layer> = (0..12).map(|i| Layer::ALL[i % 4]).collect();
        let layout = AttentionLayout::new(emb, &layers, 3, false).expect("k ≤ n");
        let len = heads * 6 * HEAD_DIM;
        let cw = weights(2 * 144, &mut r);
        let att = objective(|z: &[Var<'_>]| {
            let (a, b) = layout.weights(&z[..len], &z[len..], heads);
            a.iter().chain(&b).zip(&cw).fold(Var::constant(0.0), |acc, (&w, &k)| acc + w * k)
        });
        for _ in 0..GRAD_POINTS {
            let z = weights(2 * len, &mut r);
            t.check("attention weights", &att, &z);
        }
        (
            t.failed.is_empty(),
            format!("{} checks, worst relative error {:.1e}, failures: {:?}", t.checked, t.worst, t.failed),
        )
    })
}

// ---------------------------------------------------------------- 13

const LIBRARY: usize = 4;
const TRAIN_POINTS: usize = 16;
const TEST_POINTS: usize = 101;
const TARGET_NOISE: f64 = 0.01;

fn learner(id: &str, r: &mut Rng) -> Primitive {
    let spec = PrimitiveSpec {
        squash: false,
        ..PrimitiveSpec::new(
            id,
            Layer::Phys,
            phys_sig(),
            phys_sig(),
            Executor::AffineNet {
                widths: vec![1, 1, 1],
                nonlinearity: Nonlinearity::Tanh,
            },
        )
    };
    let p = make_primitive(spec, r).expect("scalar net");
    let init: Vec<f64> = p.params().iter().zip([1.0, 0.0, 1.0, 0.0]).map(|(v, c)| c + v).collect();
    p.with_params(&init).expect("four parameters")
}

fn all_sequences(k: usize) -> Vec<Vec<usize>> {
    (0..LIBRARY.pow(k as u32))
        .map(|mut c| {
            (0..k)
                .map(|_| {
                    let d = c % LIBRARY;
                    c /= LIBRARY;
                    d
                })
                .collect()
        })
        .collect()
}

/// Shared-library training on every 2-step composition, then RMS error on
/// fresh inputs for 2-step and held-out 3-step compositions.
pub fn composition_errors(seed: u64) -> (f64, f64) {
    let world = ChainWorld::random(seed, LIBRARY, 1, 1.0);
    let mut r = rng_stream(seed, 13);
    let lib: Vec<Primitive> = (0..LIBRARY).map(|i| learner(&format!("m{i}"), &mut r)).collect();
    let np = lib[0].n_params();
    let chain = |seq: &[usize], x: f64| seq.iter().fold(vec![x], |h, &i| world.stage(i, &h))[0];
    let train_x: Vec<f64> = (0..TRAIN_POINTS).map(|i| -1.0 + 2.0 * (i as f64 + 0.5) / TRAIN_POINTS as f64).collect();
    let pairs = all_sequences(2);
    let data: Vec<(Vec<usize>, f64, f64)> = pairs
        .iter()
        .flat_map(|s| train_x.iter().map(|&x| (s.clone(), x, chain(s, x) + TARGET_NOISE * { let z: f64 = StandardNormal.sample(&mut r); z })).collect::<Vec<_>>())
        .collect();
    let loss = objective(|theta: &[Var<'_>]| {
        let mut total = Var::constant(0.0);
        for (seq, x, y) in &data {
            let mut h = vec![Var::constant(*x)];
            for &i in seq {
                h = lib[i].eval(&theta[i * np..(i + 1) * np], &h).y;
            }
            let d = h[0] - *y;
            total = total + d * d;
        }
        total * (1.0 / data.len() as f64)
    });
    let theta0: Vec<f64> = lib.iter().flat_map(Primitive::params).collect();
    let run = descend(&loss, &theta0, &OptimizerConfig::adam(0.02, 3000), None).expect("finite loss");
    let learned: Vec<Primitive> = lib
        .iter()
        .enumerate()
        .map(|(i, p)| p.clone().with_params(&run.x[i * np..(i + 1) * np]).expect("sized"))
        .collect();
    let composite = |seq: &[usize]| seq[1..].iter().fold(learned[seq[0]].clone(), |acc, &i| compose_seq(&acc, &learned[i]).expect("scalar chain"));
    let test_x: Vec<f64> = (0..TEST_POINTS).map(|i| -1.0 + 2.0 * i as f64 / (TEST_POINTS - 1) as f64).collect();
    let rms = |k: usize| {
        let mut total = 0.0;
        let mut count = 0;
        for seq in all_sequences(k) {
            let p = composite(&seq);
            let params = p.params();
            for &x in &test_x {
                total += (p.eval(&params, &[x]).y[0] - chain(&seq, x)).powi(2);
                count += 1;
            }
        }
        (total / count as f64).sqrt()
    };
    (rms(2), rms(3))
}

fn compositional_generalization(seed: u64) -> CriterionResult {
    timed(13, "compositional generalization", 300.0, || {
        let mut ratios = Vec::new();
        for s in 0..10 {
            let (e2, e3) = composition_errors(seed.wrapping_mul(10).wrapping_add(s));
            ratios.push(e3 / e2);
        }
        let worst = ratios.iter().copied().fold(0.0, f64::max);
        (worst <= 3.0, format!("error(k=3)/error(k=2) max {worst:.3} over 10 seeds, ratios {:?}", ratios.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agrees_on_simple_signatures() {
        let a: TypeSig = "(x:Phys,s:State)".parse().unwrap();
        let b: TypeSig = "(s:State)".parse().unwrap();
        let c: TypeSig = "(e:Event)".parse().unwrap();
        assert!(brute_force_compatible(&a, &b));
        assert!(!brute_force_compatible(&a, &c));
        assert!(brute_force_compatible(&c, &"()".parse::<TypeSig>().unwrap_or_else(|_| TypeSig::of(&[]))));
    }

    #[test]
    fn closed_form_matches_forward_solve() {
        let w = LinearGaussianScm::random(3, 4, 0.7, (0.5, 2.0), 1.0);
        let u = [0.3, -1.0, 0.5, 2.0];
        let x = solve_forward(&w, &u);
        let back = closed_form_counterfactual(&w, &x, &[]);
        assert!(x.iter().zip(&back).all(|(a, b)| (a - b).abs() < 1e-12));
    }
}
