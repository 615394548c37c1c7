//! Dual-channel routing: a symbolic compatibility matrix and a hierarchical
//! attention matrix fused under a conservation penalty.

pub mod flow;
pub mod kg;
pub mod subsymbolic;
pub mod symbolic;

use std::hash::Hasher;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{Mat, NumericsError};
use crate::primitives::{Layer, Primitive};

pub use flow::{
    causal_flow, conservation_residual, estimate_causal_strength, flow_gain, fuse, fuse_gradient, fuse_objective,
    fuse_smoothness, FlowReport, FuseConfig, Fused, RoutingQuadratic,
};
pub use kg::{EdgeLabel, KgEdge, KnowledgeGraph};
pub use subsymbolic::{
    balanced_kmeans, op_count_bound, subsymbolic_from_embeddings, AttentionLayout, AttentionParams, SubsymbolicOutput,
    HEADS, HEAD_DIM,
};
pub use symbolic::{symbolic_softmax, symbolic_weights, SymbolicInputs, SymbolicParams};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RoutingError {
    #[error("cluster count {k} must lie in 1..={n}")]
    ClusterCount { k: usize, n: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("negative information content {value} at {index}")]
    NegativeInfo { index: usize, value: f64 },
    #[error("world has no variable {index} (it has {n})")]
    NoVariable { index: usize, n: usize },
    #[error("knowledge graph line {line}: {msg}")]
    Kg { line: usize, msg: String },
    #[error("invalid routing config: {0}")]
    Config(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

const SIG_BUCKETS: usize = 8;
/// Layer one-hot plus hashed signature features.
pub const BASE_DIM: usize = 4 + SIG_BUCKETS;

fn hash(s: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}

/// Layer one-hot ⧺ signed feature hashing of `in:`/`out:` slot types,
/// normalized to unit length.
pub fn base_embedding(p: &Primitive) -> Vec<f64> {
    let mut e = vec![0.0; BASE_DIM];
    e[p.layer.index()] = 1.0;
    let mut sig = [0.0; SIG_BUCKETS];
    let slots = p
        .in_sig
        .slots()
        .iter()
        .map(|s| format!("in:{}", s.ty))
        .chain(p.out_sig.slots().iter().map(|s| format!("out:{}", s.ty)));
    for key in slots {
        let h = hash(&key);
        let sign = if h >> 63 == 1 { -1.0 } else { 1.0 };
        sig[(h % SIG_BUCKETS as u64) as usize] += sign;
    }
    let norm = sig.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        sig.iter_mut().for_each(|v| *v /= norm);
    }
    e[4..].copy_from_slice(&sig);
    e
}

/// `base_embedding ⧺ context`.
pub fn embedding(p: &Primitive, context: &[f64]) -> Vec<f64> {
    let mut e = base_embedding(p);
    e.extend_from_slice(context);
    e
}

/// Row-major mask of `incompatible` knowledge-graph pairs.
pub fn hard_mask(prims: &[Primitive], kg: &KnowledgeGraph) -> Vec<bool> {
    prims
        .iter()
        .flat_map(|a| prims.iter().map(move |b| kg.is_incompatible(&a.id, &b.id)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingConfig {
    /// Cluster count; `None` means `⌈√n⌉`.
    pub k: Option<usize>,
    pub heads: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub iters: usize,
    pub beta: f64,
    pub allow_all_inter: bool,
    pub seed: u64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        RoutingConfig {
            k: None,
            heads: HEADS,
            lambda1: 0.5,
            lambda2: 0.5,
            iters: 3,
            beta: 0.5,
            allow_all_inter: false,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingState {
    pub ids: Vec<String>,
    pub w_sym: Mat,
    pub w_sub: Mat,
    pub w: Mat,
    pub beta: f64,
    pub clusters: Vec<usize>,
    pub k: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub context: Vec<f64>,
    pub embeddings: Vec<Vec<f64>>,
    pub op_count: usize,
    pub residual_trace: Vec<f64>,
}

impl RoutingState {
    pub fn w_csv(&self) -> String {
        self.w.to_csv(Some(&self.ids))
    }
}

/// Full router: both channels, then fusion under the given flow quantities.
pub fn route(
    prims: &[Primitive],
    kg: &KnowledgeGraph,
    context: &[f64],
    info: &[f64],
    strength: &Mat,
    cfg: &RoutingConfig,
) -> Result<RoutingState, RoutingError> {
    let n = prims.len();
    if n == 0 {
        return Err(RoutingError::ClusterCount { k: 1, n: 0 });
    }
    if !(0.0..=1.0).contains(&cfg.beta) || cfg.heads == 0 {
        return Err(RoutingError::Config("β must lie in [0,1] and heads ≥ 1".into()));
    }
    let k = cfg.k.unwrap_or_else(|| (n as f64).sqrt().ceil() as usize);
    let w_sym = symbolic_weights(prims, kg, context, &SymbolicParams::new(context.len(), cfg.seed));
    let embeddings: Vec<Vec<f64>> = prims.iter().map(|p| embedding(p, context)).collect();
    let layers: Vec<Layer> = prims.iter().map(|p| p.layer).collect();
    let mut attn = AttentionParams::new(BASE_DIM + context.len(), cfg.heads, cfg.seed.wrapping_add(1));
    attn.beta = cfg.beta;
    attn.allow_all_inter = cfg.allow_all_inter;
    let sub = subsymbolic_from_embeddings(embeddings.clone(), &layers, k, &attn)?;
    let fuse_cfg = FuseConfig {
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        iters: cfg.iters,
        mask: Some(hard_mask(prims, kg)),
    };
    let fused = fuse(&w_sym, &sub.w_sub, info, strength, &fuse_cfg)?;
    Ok(RoutingState {
        ids: prims.iter().map(|p| p.id.clone()).collect(),
        w_sym,
        w_sub: sub.w_sub,
        w: fused.w,
        beta: cfg.beta,
        clusters: sub.clusters,
        k,
        lambda1: cfg.lambda1,
        lambda2: cfg.lambda2,
        context: context.to_vec(),
        embeddings,
        op_count: sub.op_count,
        residual_trace: fused.residual_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::seed_library;

    #[test]
    fn route_library_end_to_end() {
        let lib = seed_library(1);
        let mut kg = KnowledgeGraph::new();
        kg.add_edge("phys_scale", "phys_damp", EdgeLabel::Incompatible, 1.0).unwrap();
        let n = lib.len();
        let st = route(&lib, &kg, &[0.2], &vec![1.0; n], &Mat::filled(n, n, 0.5), &RoutingConfig::default()).unwrap();
        assert_eq!(st.k, 6);
        assert!(st.op_count <= op_count_bound(n, 6));
        assert_eq!(st.w[(0, 1)], 0.0);
        assert!(st.residual_trace.windows(2).all(|p| p[1] <= p[0]));
        assert!(st.w_csv().starts_with("phys_scale,phys_damp"));
    }

    #[test]
    fn embeddings_are_deterministic_and_normalized() {
        let lib = seed_library(0);
        let e = base_embedding(&lib[3]);
        assert_eq!(e, base_embedding(&lib[3]));
        let sig_norm: f64 = e[4..].iter().map(|v| v * v).sum();
        assert!((sig_norm - 1.0).abs() < 1e-12);
    }
}
