//! Symbolic channel: type similarity, knowledge-graph consistency and a
//! bilinear entailment score, combined by an affine map and a row softmax.

use serde::{Deserialize, Serialize};

use super::{base_embedding, kg::KnowledgeGraph, BASE_DIM};
use crate::numerics::{rng, Mat, Scalar};
use crate::primitives::Primitive;
use crate::types::signature_similarity;
use rand::Rng as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymbolicParams {
    /// Bias and weights on (similarity, consistency, entailment).
    pub theta: [f64; 4],
    /// Bilinear entailment map, `context_dim × BASE_DIM`.
    pub entail: Mat,
}

impl SymbolicParams {
    pub fn new(context_dim: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        SymbolicParams {
            theta: [0.0, 2.0, 2.0, 1.0],
            entail: Mat::from_fn(context_dim, BASE_DIM, |_, _| r.random_range(-0.1..=0.1)),
        }
    }
}

/// Pair data that does not depend on trainable parameters.
#[derive(Debug, Clone)]
pub struct SymbolicInputs {
    pub n: usize,
    pub similarity: Vec<f64>,
    pub consistency: Vec<f64>,
    pub incompatible: Vec<bool>,
    pair: Vec<Vec<f64>>,
    context: Vec<f64>,
}

impl SymbolicInputs {
    /// Ids absent from `kg` behave as isolated entities.
    pub fn new(prims: &[Primitive], kg: &KnowledgeGraph, context: &[f64]) -> Self {
        let n = prims.len();
        let emb: Vec<Vec<f64>> = prims.iter().map(base_embedding).collect();
        let mut s = SymbolicInputs {
            n,
            similarity: Vec::with_capacity(n * n),
            consistency: Vec::with_capacity(n * n),
            incompatible: Vec::with_capacity(n * n),
            pair: Vec::with_capacity(n * n),
            context: context.to_vec(),
        };
        for pi in prims {
            for (j, pj) in prims.iter().enumerate() {
                s.similarity.push(signature_similarity(&pi.out_sig, &pj.in_sig));
                s.consistency.push(kg.consistency(&pi.id, &pj.id));
                s.incompatible.push(kg.is_incompatible(&pi.id, &pj.id));
                let hi = base_embedding(pi);
                s.pair.push(hi.iter().zip(&emb[j]).map(|(a, b)| a * b).collect());
            }
        }
        s
    }

    /// `tanh(cᵀ M (h_i ⊙ h_j))` for every pair.
    pub fn entailment<S: Scalar>(&self, m: &[S]) -> Vec<S> {
        self.pair
            .iter()
            .map(|h| {
                let mut acc = S::zero();
                for (c, &cv) in self.context.iter().enumerate() {
                    for (d, &hv) in h.iter().enumerate() {
                        acc = acc + m[c * BASE_DIM + d] * (cv * hv);
                    }
                }
                acc.tanh()
            })
            .collect()
    }

    pub fn features<S: Scalar>(&self, m: &[S]) -> Vec<[S; 3]> {
        let ent = self.entailment(m);
        (0..self.n * self.n)
            .map(|k| [S::cst(self.similarity[k]), S::cst(self.consistency[k]), ent[k]])
            .collect()
    }

    /// Row-major `n×n` weights; `theta` has 4 entries, `m` is the flat entailment map.
    pub fn weights<S: Scalar>(&self, theta: &[S], m: &[S]) -> Vec<S> {
        symbolic_softmax(theta, &self.features(m), &self.incompatible, self.n)
    }
}

/// Row softmax of `θ0 + θ·φ`; masked entries are exactly 0 and a fully
/// masked row is all zeros.
pub fn symbolic_softmax<S: Scalar>(theta: &[S], phi: &[[S; 3]], masked: &[bool], n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * n];
    for i in 0..n {
        let live: Vec<usize> = (0..n).filter(|&j| !masked[i * n + j]).collect();
        if live.is_empty() {
            continue;
        }
        let scores: Vec<S> = live
            .iter()
            .map(|&j| {
                let f = &phi[i * n + j];
                theta[0] + theta[1] * f[0] + theta[2] * f[1] + theta[3] * f[2]
            })
            .collect();
        for (&j, w) in live.iter().zip(crate::primitives::softmax(&scores)) {
            out[i * n + j] = w;
        }
    }
    out
}

pub fn symbolic_weights(prims: &[Primitive], kg: &KnowledgeGraph, context: &[f64], params: &SymbolicParams) -> Mat {
    let inputs = SymbolicInputs::new(prims, kg, context);
    let n = prims.len();
    Mat::from_vec(n, n, inputs.weights(&params.theta, params.entail.data())).expect("n×n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitives::{seed_library, Layer};
    use crate::routing::kg::EdgeLabel;
    use crate::types::TypeSig;

    fn twins() -> Vec<Primitive> {
        let sig: TypeSig = "(x:Phys)".parse().unwrap();
        vec![
            Primitive::identity("a", Layer::Phys, sig.clone()),
            Primitive::identity("b", Layer::Phys, sig),
        ]
    }

    #[test]
    fn symmetric_pair_is_uniform() {
        let w = symbolic_weights(&twins(), &KnowledgeGraph::new(), &[], &SymbolicParams::new(0, 1));
        assert!(w.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn incompatible_edge_is_exact_zero() {
        let mut kg = KnowledgeGraph::new();
        kg.add_edge("a", "b", EdgeLabel::Incompatible, 1.0).unwrap();
        let w = symbolic_weights(&twins(), &kg, &[0.3], &SymbolicParams::new(1, 1));
        assert_eq!(w[(0, 1)], 0.0);
        assert_eq!(w[(0, 0)], 1.0);
    }

    #[test]
    fn rows_sum_to_one_over_live_entries() {
        let lib = seed_library(2);
        let mut kg = KnowledgeGraph::new();
        kg.add_edge(&lib[0].id, &lib[3].id, EdgeLabel::Incompatible, 1.0).unwrap();
        kg.add_edge(&lib[0].id, &lib[5].id, EdgeLabel::Compatible, 0.7).unwrap();
        let w = symbolic_weights(&lib, &kg, &[0.5, -0.2], &SymbolicParams::new(2, 3));
        for i in 0..lib.len() {
            assert!((w.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(w[(0, 3)], 0.0);
    }

    #[test]
    fn hand_computed_softmax_table() {
        let theta = [0.5, 1.0, 2.0, -1.0];
        let phi: Vec<[f64; 3]> = (0..16)
            .map(|k| [k as f64 / 16.0, ((k * 7) % 5) as f64 / 5.0, ((k % 3) as f64 - 1.0) / 2.0])
            .collect();
        let mut masked = vec![false; 16];
        masked[1 * 4 + 2] = true;
        let w = symbolic_softmax(&theta, &phi, &masked, 4);
        for i in 0..4 {
            let e: Vec<f64> = (0..4)
                .map(|j| {
                    let f = phi[i * 4 + j];
                    if masked[i * 4 + j] {
                        0.0
                    } else {
                        (0.5 + f[0] + 2.0 * f[1] - f[2]).exp()
                    }
                })
                .collect();
            let z: f64 = e.iter().sum();
            for j in 0..4 {
                assert!((w[i * 4 + j] - e[j] / z).abs() < 1e-14);
            }
        }
    }
}
