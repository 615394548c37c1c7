//! Residual-driven primitive discovery: cluster poorly explained experience,
//! fit a small network to the dominant cluster, validate it in a sandbox.

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::system::{MetaSystem, Residual};
use crate::numerics::{rng, OptimizerConfig};
use crate::primitives::{dataset_mse, fit_primitive, make_primitive, Executor, Layer, Nonlinearity, Primitive, PrimitiveSpec};
use crate::types::{CausalType, TypeSig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryConfig {
    pub min_residuals: usize,
    pub max_clusters: usize,
    /// A larger `k` is kept only if it cuts the within-cluster SSE to at
    /// most this fraction of the previous value.
    pub elbow_ratio: f64,
    pub hidden: usize,
    pub max_fit_samples: usize,
    pub fit_iters: usize,
    pub fit_step: f64,
    /// Required score gain on the residuals' family.
    pub margin: f64,
    pub seed: u64,
}

impl Default for DiscoveryConfig {
    fn default() -> Self {
        DiscoveryConfig {
            min_residuals: 32,
            max_clusters: 4,
            elbow_ratio: 0.2,
            hidden: 8,
            max_fit_samples: 128,
            fit_iters: 1500,
            fit_step: 0.02,
            margin: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub prim: Primitive,
    pub family: String,
    pub cluster_size: usize,
    pub train_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub family: String,
    pub delta_family: f64,
    pub delta_validation: f64,
    pub accepted: bool,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Lloyd's algorithm with deterministic farthest-point initialization.
/// Returns assignments and the within-cluster sum of squares.
pub fn kmeans(points: &[Vec<f64>], k: usize, iters: usize) -> (Vec<usize>, f64) {
    if points.is_empty() || k == 0 {
        return (vec![], 0.0);
    }
    let k = k.min(points.len());
    let mut centers = vec![points[0].clone()];
    while centers.len() < k {
        let far = (0..points.len())
            .max_by(|&a, &b| {
                let da = centers.iter().map(|c| sq_dist(&points[a], c)).fold(f64::INFINITY, f64::min);
                let db = centers.iter().map(|c| sq_dist(&points[b], c)).fold(f64::INFINITY, f64::min);
                da.total_cmp(&db)
            })
            .expect("nonempty");
        centers.push(points[far].clone());
    }
    let nearest = |p: &[f64], centers: &[Vec<f64>]| {
        (0..centers.len())
            .min_by(|&a, &b| sq_dist(p, &centers[a]).total_cmp(&sq_dist(p, &centers[b])))
            .expect("k > 0")
    };
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..iters {
        let d = points[0].len();
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&assign) {
            counts[c] += 1;
            for (s, v) in sums[c].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    let sse = points.iter().zip(&assign).map(|(p, &c)| sq_dist(p, &centers[c])).sum();
    (assign, sse)
}

fn joint(r: &Residual) -> Vec<f64> {
    r.x.iter().chain(&r.y).copied().collect()
}

/// Largest cluster of residuals of the most represented family and shape.
fn dominant_cluster<'a>(residuals: &'a [Residual], cfg: &DiscoveryConfig) -> Vec<&'a Residual> {
    let mut groups: std::collections::BTreeMap<(String, usize, usize), Vec<&Residual>> = Default::default();
    for r in residuals {
        groups.entry((r.family.clone(), r.x.len(), r.y.len())).or_default().push(r);
    }
    let Some(group) = groups.into_values().max_by_key(|g| g.len()) else {
        return vec![];
    };
    let points: Vec<Vec<f64>> = group.iter().map(|r| joint(r)).collect();
    let (mut assign, mut sse) = kmeans(&points, 1, 1);
    for k in 2..=cfg.max_clusters {
        let (a, s) = kmeans(&points, k, 100);
        if s > cfg.elbow_ratio * sse {
            break;
        }
        (assign, sse) = (a, s);
    }
    let k = assign.iter().max().map_or(0, |m| m + 1);
    let biggest = (0..k).max_by_key(|&c| assign.iter().filter(|&&a| a == c).count()).unwrap_or(0);
    group.into_iter().zip(assign).filter(|(_, a)| *a == biggest).map(|(r, _)| r).collect()
}

/// Fits a `[d_in, hidden, d_out]` tanh network to `data`.
pub fn fit_candidate(id: &str, data: &[(Vec<f64>, Vec<f64>)], cfg: &DiscoveryConfig) -> Option<(Primitive, f64)> {
    let (d_in, d_out) = (data.first()?.0.len(), data[0].1.len());
    let sig = |name: &str, d: usize| {
        if d == 1 {
            TypeSig::of(&[(name, CausalType::PHYS)])
        } else {
            TypeSig::of(&[(name, CausalType::tensor(CausalType::PHYS, &[d]))])
        }
    };
    let spec = PrimitiveSpec {
        squash: false,
        ..PrimitiveSpec::new(
            id,
            Layer::Phys,
            sig("x", d_in),
            sig("y", d_out),
            Executor::AffineNet {
                widths: vec![d_in, cfg.hidden, d_out],
                nonlinearity: Nonlinearity::Tanh,
            },
        )
    };
    let mut r = rng(cfg.seed);
    let p = make_primitive(spec, &mut r).ok()?;
    // Unit-scale initialization so the hidden layer starts out nonlinear.
    let init: Vec<f64> = p.params().iter().map(|v| v * 10.0).collect();
    let p = p.with_params(&init).ok()?;
    let train: Vec<(Vec<f64>, Vec<f64>)> = if data.len() > cfg.max_fit_samples {
        let mut idx = sample(&mut r, data.len(), cfg.max_fit_samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| data[i].clone()).collect()
    } else {
        data.to_vec()
    };
    let (fitted, _) = fit_primitive(&p, &train, &OptimizerConfig::adam(cfg.fit_step, cfg.fit_iters)).ok()?;
    let mse = dataset_mse(&fitted, data);
    Some((fitted, mse))
}

/// Clusters the residual buffer and fits a candidate to the dominant cluster.
pub fn mine_candidate(residuals: &[Residual], id: &str, cfg: &DiscoveryConfig) -> Option<Candidate> {
    if residuals.len() < cfg.min_residuals {
        return None;
    }
    let cluster = dominant_cluster(residuals, cfg);
    if cluster.is_empty() {
        return None;
    }
    let data: Vec<(Vec<f64>, Vec<f64>)> = cluster.iter().map(|r| (r.x.clone(), r.y.clone())).collect();
    let (prim, train_mse) = fit_candidate(id, &data, cfg)?;
    Some(Candidate {
        prim,
        family: cluster[0].family.clone(),
        cluster_size: cluster.len(),
        train_mse,
    })
}

/// Mines a candidate and scores it by adding it to a sandbox copy of `sys`.
pub fn discover_primitive(sys: &MetaSystem, residuals: &[Residual], cfg: &DiscoveryConfig) -> Option<(Candidate, ValidationReport)> {
    let mut n = sys.library.len();
    let id = loop {
        let id = format!("disc_{n}");
        if !sys.library.iter().any(|p| p.id == id) {
            break id;
        }
        n += 1;
    };
    let cand = mine_candidate(residuals, &id, cfg)?;
    if cand.prim.in_dim() != 1 || cand.prim.out_dim() != 1 {
        return None;
    }
    let before = sys.evaluate();
    let mut sandbox = sys.clone();
    sandbox.library.push(cand.prim.clone());
    let after = sandbox.evaluate();
    let fam = |e: &super::system::Evaluation| e.family_scores.get(&cand.family).copied().unwrap_or(0.0);
    let delta_family = fam(&after) - fam(&before);
    let report = ValidationReport {
        family: cand.family.clone(),
        delta_family,
        delta_validation: after.validation - before.validation,
        accepted: delta_family >= cfg.margin,
    };
    Some((cand, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn residuals(f: impl Fn(f64) -> f64, family: &str) -> Vec<Residual> {
        (0..64)
            .map(|i| {
                let x = -1.0 + 2.0 * i as f64 / 63.0;
                Residual {
                    family: family.into(),
                    x: vec![x],
                    y: vec![f(x)],
                }
            })
            .collect()
    }

    #[test]
    fn kmeans_separates_blobs() {
        let pts: Vec<Vec<f64>> = (0..20).map(|i| vec![if i < 10 { 0.0 } else { 10.0 } + i as f64 * 0.01]).collect();
        let (a, sse) = kmeans(&pts, 2, 50);
        assert!(a[..10].iter().all(|&c| c == a[0]));
        assert!(a[10..].iter().all(|&c| c == a[10] && c != a[0]));
        assert!(sse < 0.05, "{sse}");
    }

    #[test]
    fn recovers_square_mechanism() {
        let sys = MetaSystem::toy();
        let res = residuals(|x| x * x, "square");
        let (cand, report) = discover_primitive(&sys, &res, &DiscoveryConfig::default()).unwrap();
        let err = res
            .iter()
            .map(|r| (cand.prim.eval(&cand.prim.params(), &r.x).y[0] - r.y[0]).abs())
            .fold(0.0, f64::max);
        assert!(err < 0.05, "max error {err} cluster {} mse {}", cand.cluster_size, cand.train_mse);
        assert!(report.accepted, "{report:?}");
    }

    #[test]
    fn redundant_mechanism_is_rejected() {
        let sys = MetaSystem::toy();
        let (_, report) = discover_primitive(&sys, &residuals(|x| 2.0 * x, "scale"), &DiscoveryConfig::default()).unwrap();
        assert!(!report.accepted, "{report:?}");
    }

    #[test]
    fn too_few_residuals() {
        assert!(discover_primitive(&MetaSystem::toy(), &[], &DiscoveryConfig::default()).is_none());
    }
}
