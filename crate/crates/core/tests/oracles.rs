//! Library results checked against independent brute-force or closed-form oracles.

use std::collections::{BTreeSet, HashMap, VecDeque};

use hcp::ceg::build_ceg;
use hcp::numerics::{rng, Mat};
use hcp::primitives::seed_library;
use hcp::routing::estimate_causal_strength;
use hcp::types::{is_subtype, BaseKind, CausalType};
use hcp::worlds::{shd, LinearGaussianScm};
use rand::Rng as _;

/// Every type of constructor depth ≤ 2 over Phys and State, with arities ≤ 2.
fn small_types() -> Vec<CausalType> {
    let bases = vec![CausalType::Base(BaseKind::Phys), CausalType::Base(BaseKind::State)];
    let grow = |inner: &[CausalType]| {
        let mut out = Vec::new();
        for a in inner {
            out.push(CausalType::tensor(a.clone(), &[1]));
            out.push(CausalType::tensor(a.clone(), &[2]));
            out.push(CausalType::Product(vec![a.clone()]));
            out.push(CausalType::Sum(vec![a.clone()]));
            for b in inner {
                out.push(CausalType::func(a.clone(), b.clone()));
                out.push(CausalType::Product(vec![a.clone(), b.clone()]));
                out.push(CausalType::Sum(vec![a.clone(), b.clone()]));
            }
        }
        out
    };
    let mut d1 = bases.clone();
    d1.extend(grow(&bases));
    let mut all = d1.clone();
    all.extend(grow(&d1));
    all
}

type Premises = Vec<(CausalType, CausalType)>;

/// Subtyping as a table of inference rules; a judgement holds when some
/// rule's premises all hold.
fn rules() -> Vec<fn(&CausalType, &CausalType) -> Option<Premises>> {
    use CausalType::*;
    vec![
        |a, b| matches!((a, b), (Base(x), Base(y)) if x == y).then(Vec::new),
        |a, b| match (a, b) {
            (Tensor { elem: x, dims: d }, Tensor { elem: y, dims: e }) if d == e => Some(vec![(*x.clone(), *y.clone())]),
            _ => None,
        },
        |a, b| match (a, b) {
            (Func { from: f, to: t }, Func { from: g, to: u }) => Some(vec![(*g.clone(), *f.clone()), (*t.clone(), *u.clone())]),
            _ => None,
        },
        |a, b| match (a, b) {
            (Product(p), Product(q)) | (Sum(p), Sum(q)) if p.len() == q.len() => Some(p.iter().cloned().zip(q.iter().cloned()).collect()),
            _ => None,
        },
    ]
}

fn derivable(a: &CausalType, b: &CausalType, memo: &mut HashMap<(String, String), bool>) -> bool {
    let key = (a.to_string(), b.to_string());
    if let Some(&v) = memo.get(&key) {
        return v;
    }
    let v = rules().iter().any(|r| r(a, b).is_some_and(|ps| ps.iter().all(|(x, y)| derivable(x, y, memo))));
    memo.insert(key, v);
    v
}

#[test]
fn subtyping_matches_rule_interpreter_exhaustively() {
    let types = small_types();
    assert!(types.len() > 1000);
    let mut memo = HashMap::new();
    let mut holds = 0;
    for a in &types {
        for b in &types {
            let want = derivable(a, b, &mut memo);
            assert_eq!(is_subtype(a, b), want, "{a} ≤ {b}");
            holds += want as usize;
        }
    }
    assert!(holds > types.len());
}

type Pairs = Vec<u8>;

/// Edge state per unordered pair: 0 none, 1 forward, 2 backward.
fn encode(a: &[Vec<bool>]) -> Pairs {
    let n = a.len();
    let mut s = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            s.push(if a[i][j] { 1 } else if a[j][i] { 2 } else { 0 });
        }
    }
    s
}

/// Fewest single-edge additions, deletions or reversals turning `a` into `b`.
fn edit_distance(a: &[Vec<bool>], b: &[Vec<bool>]) -> usize {
    let (start, goal) = (encode(a), encode(b));
    let mut seen = BTreeSet::from([start.clone()]);
    let mut queue = VecDeque::from([(start, 0)]);
    while let Some((s, d)) = queue.pop_front() {
        if s == goal {
            return d;
        }
        for k in 0..s.len() {
            for v in 0..3 {
                if v != s[k] {
                    let mut t = s.clone();
                    t[k] = v;
                    if seen.insert(t.clone()) {
                        queue.push_back((t, d + 1));
                    }
                }
            }
        }
    }
    unreachable!("every state is reachable")
}

fn random_dag(n: usize, r: &mut hcp::numerics::Rng) -> Vec<Vec<bool>> {
    let order: Vec<usize> = {
        let mut o: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            o.swap(i, r.random_range(0..=i));
        }
        o
    };
    let mut a = vec![vec![false; n]; n];
    for x in 0..n {
        for y in x + 1..n {
            a[order[x]][order[y]] = r.random_bool(0.4);
        }
    }
    a
}

#[test]
fn shd_matches_breadth_first_edit_search() {
    let mut r = rng(11);
    for _ in 0..200 {
        let n = r.random_range(2..=5);
        let (a, b) = (random_dag(n, &mut r), random_dag(n, &mut r));
        assert_eq!(shd(&a, &b), edit_distance(&a, &b));
    }
}

#[test]
fn causal_edge_census() {
    let lib = seed_library(3);
    let prims = &lib[..10];
    let mut r = rng(5);
    for _ in 0..20 {
        let w = Mat::from_fn(10, 10, |i, j| if i == j { 0.0 } else { r.random_range(0.0..=1.0) });
        let tau = r.random_range(0.2..0.9);
        let g = build_ceg(prims, &w, tau).unwrap();
        let want: BTreeSet<(usize, usize)> = (0..10).flat_map(|i| (0..10).map(move |j| (i, j))).filter(|&(i, j)| i != j && w[(i, j)] > tau).collect();
        let got: BTreeSet<(usize, usize)> = g.causal_edges.iter().map(|e| (e.src, e.dst)).collect();
        assert_eq!(got, want);
        for e in &g.data_edges {
            assert!(!want.contains(&(e.src, e.dst)));
            assert!(hcp::types::signatures_compatible(&prims[e.src].out_sig, &prims[e.dst].in_sig).is_some());
        }
    }
}

#[test]
fn gaussian_strength_matches_closed_form() {
    // Y = 2X + ε with unit variances: sd(X) = 1, sd(Y) = √5, grid x ∈ {±1, ±2}.
    let coef = Mat::from_rows(&[vec![0.0, 2.0], vec![0.0, 0.0]]);
    let w = LinearGaussianScm::new(vec!["X".into(), "Y".into()], coef, vec![1.0, 1.0]).unwrap();
    let want = [-2.0f64, -1.0, 1.0, 2.0].iter().map(|x| 1.0 - (-(2.0 * x).abs() / 5f64.sqrt()).exp()).sum::<f64>() / 4.0;
    let exact = estimate_causal_strength(&w, 0, 1, 0, 0).unwrap();
    assert!((exact - want).abs() < 1e-12, "{exact} vs {want}");
    let sampled = estimate_causal_strength(&w, 0, 1, 20_000, 1).unwrap();
    assert!((sampled - want).abs() < 0.02, "{sampled} vs {want}");
    assert_eq!(estimate_causal_strength(&w, 1, 0, 0, 0).unwrap(), 0.0);
}
