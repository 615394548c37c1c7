//! Linear structural equations read off an executed graph.

use serde::{Deserialize, Serialize};

use super::{Ceg, CegError};
use crate::numerics::{lstsq, Mat};
use crate::primitives::ValueMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmEdge {
    pub src: String,
    pub dst: String,
    pub weight: f64,
}

/// Fit of one node: per output component, `value ≈ intercept + coef · parents`
/// where `parents` stacks the parent values in the listed order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmEquation {
    pub node: String,
    pub parents: Vec<String>,
    pub intercept: Vec<f64>,
    pub coef: Vec<Vec<f64>>,
    pub r2: Vec<f64>,
    pub rank_deficient: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScmDescription {
    pub variables: Vec<String>,
    pub edges: Vec<ScmEdge>,
    pub equations: Vec<ScmEquation>,
}

impl ScmDescription {
    /// Adjacency over `variables`.
    pub fn adjacency(&self) -> Vec<Vec<bool>> {
        let n = self.variables.len();
        let idx = |id: &str| self.variables.iter().position(|v| v == id).expect("edge endpoints are variables");
        let mut a = vec![vec![false; n]; n];
        for e in &self.edges {
            a[idx(&e.src)][idx(&e.dst)] = true;
        }
        a
    }

    pub fn equation(&self, node: &str) -> Option<&ScmEquation> {
        self.equations.iter().find(|e| e.node == node)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

fn r_squared(y: &[f64], fitted: &[f64]) -> f64 {
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let ss_tot: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
    let ss_res: f64 = y.iter().zip(fitted).map(|(a, b)| (a - b).powi(2)).sum();
    if ss_tot <= f64::EPSILON * y.len() as f64 {
        return if ss_res <= 1e-18 * y.len() as f64 { 1.0 } else { 0.0 };
    }
    1.0 - ss_res / ss_tot
}

/// Variables are the nodes; edges are causal edges with `w ≥ τ_scm`; each
/// node with parents gets a least-squares linear fit on the parents' final
/// values over the sampled executions.
pub fn extract_scm(g: &Ceg, tau_scm: f64, samples: &[ValueMap]) -> Result<ScmDescription, CegError> {
    let need = g.nodes.len() + 1;
    if samples.len() < need {
        return Err(CegError::TooFewSamples { need, got: samples.len() });
    }
    let finals: Vec<Vec<Vec<f64>>> = samples
        .iter()
        .map(|s| Ok(g.execute(s, None)?.last().to_vec()))
        .collect::<Result<_, CegError>>()?;
    let kept: Vec<_> = g.causal_edges.iter().filter(|e| e.weight >= tau_scm).collect();
    let edges = kept
        .iter()
        .map(|e| ScmEdge {
            src: g.nodes[e.src].id.clone(),
            dst: g.nodes[e.dst].id.clone(),
            weight: e.weight,
        })
        .collect();
    let mut equations = Vec::new();
    for (i, node) in g.nodes.iter().enumerate() {
        let mut parents: Vec<usize> = kept.iter().filter(|e| e.dst == i).map(|e| e.src).collect();
        parents.sort_unstable();
        if parents.is_empty() {
            continue;
        }
        let design = Mat::from_rows(
            &finals
                .iter()
                .map(|x| std::iter::once(1.0).chain(parents.iter().flat_map(|&p| x[p].clone())).collect())
                .collect::<Vec<Vec<f64>>>(),
        );
        let mut eq = ScmEquation {
            node: node.id.clone(),
            parents: parents.iter().map(|&p| g.nodes[p].id.clone()).collect(),
            intercept: vec![],
            coef: vec![],
            r2: vec![],
            rank_deficient: false,
        };
        for c in 0..node.out_dim() {
            let y: Vec<f64> = finals.iter().map(|x| x[i][c]).collect();
            let fit = lstsq(&design, &y)?;
            let fitted = design.matvec(&fit.coef);
            eq.r2.push(r_squared(&y, &fitted));
            eq.rank_deficient |= fit.rank_deficient;
            eq.intercept.push(fit.coef[0]);
            eq.coef.push(fit.coef[1..].to_vec());
        }
        equations.push(eq);
    }
    Ok(ScmDescription {
        variables: g.nodes.iter().map(|n| n.id.clone()).collect(),
        edges,
        equations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ceg::{values, CegBuilder};
    use crate::primitives::{Layer, Primitive};
    use crate::types::{CausalType, TypeSig};

    fn lin(id: &str, w: f64) -> Primitive {
        let s = TypeSig::of(&[("x", CausalType::PHYS)]);
        Primitive::linear(id, Layer::Phys, s.clone(), s, &[w], &[0.0]).unwrap()
    }

    fn chain(weight: f64) -> Ceg {
        let mut b = CegBuilder::new();
        b.node("X", lin("x", 1.0)).unwrap();
        b.node("Y", lin("y", 2.0)).unwrap();
        b.causal("X", "Y", weight).unwrap().output("Y").unwrap();
        b.build().unwrap()
    }

    #[test]
    fn recovers_linear_coefficient() {
        let g = chain(1.0);
        let samples: Vec<ValueMap> = (0..10).map(|k| values(&[("X", vec![k as f64 * 0.3 - 1.0])])).collect();
        let scm = extract_scm(&g, 0.1, &samples).unwrap();
        assert_eq!(scm.edges.len(), 1);
        let eq = scm.equation("Y").unwrap();
        assert!((eq.coef[0][0] - 2.0).abs() < 1e-6);
        assert!(eq.intercept[0].abs() < 1e-9);
        assert!((eq.r2[0] - 1.0).abs() < 1e-9);
        assert!(!eq.rank_deficient);
    }

    #[test]
    fn threshold_and_sample_count() {
        let g = chain(0.05);
        let samples: Vec<ValueMap> = (0..3).map(|k| values(&[("X", vec![k as f64])])).collect();
        let scm = extract_scm(&g, 0.1, &samples).unwrap();
        assert!(scm.edges.is_empty() && scm.equations.is_empty());
        assert!(matches!(extract_scm(&g, 0.1, &samples[..2]), Err(CegError::TooFewSamples { need: 3, got: 2 })));
    }

    #[test]
    fn constant_parent_is_flagged() {
        let g = chain(1.0);
        let samples: Vec<ValueMap> = (0..4).map(|_| values(&[("X", vec![0.5])])).collect();
        let eq = extract_scm(&g, 0.1, &samples).unwrap().equations.remove(0);
        assert!(eq.rank_deficient);
    }
}
