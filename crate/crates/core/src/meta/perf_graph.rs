//! Incrementally learned causal graph over meta-state features and
//! performance metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::cusum::cusum_detect;
use super::MetaError;
use crate::numerics::{lstsq, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    Meta,
    Performance,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfVariable {
    pub name: String,
    pub kind: VarKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfEdge {
    pub src: usize,
    pub dst: usize,
    pub confidence: f64,
}

/// Linear structural equation `var = intercept + Σ coef_j · parent_j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfEquation {
    pub var: usize,
    pub parents: Vec<usize>,
    pub intercept: f64,
    pub coef: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PerfCausalGraph {
    pub variables: Vec<PerfVariable>,
    pub edges: Vec<PerfEdge>,
    pub equations: Vec<PerfEquation>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfGraphConfig {
    pub h: f64,
    pub k: f64,
    /// Rows before a change point searched for changed meta variables.
    pub window: usize,
    pub alpha: f64,
}

impl Default for PerfGraphConfig {
    fn default() -> Self {
        PerfGraphConfig {
            h: 8.0,
            k: 1.0,
            window: 5,
            alpha: 0.05,
        }
    }
}

/// Time-ordered observations, one column per graph variable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerfBatch {
    pub rows: Vec<Vec<f64>>,
}

impl PerfBatch {
    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows.iter().map(|r| r[j]).collect()
    }
}

/// Fisher-z test of a partial correlation: returns the two-sided p-value.
pub fn fisher_z_pvalue(r: f64, n: usize, conditioning: usize) -> f64 {
    let dof = n as f64 - conditioning as f64 - 3.0;
    if dof <= 0.0 {
        return 1.0;
    }
    let r = r.clamp(-1.0 + 1e-15, 1.0 - 1e-15);
    let z = 0.5 * ((1.0 + r) / (1.0 - r)).ln() * dof.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    2.0 * (1.0 - normal.cdf(z.abs()))
}

fn residuals(y: &[f64], given: &[Vec<f64>]) -> Result<Vec<f64>, MetaError> {
    let rows: Vec<Vec<f64>> = (0..y.len())
        .map(|t| std::iter::once(1.0).chain(given.iter().map(|c| c[t])).collect())
        .collect();
    let a = Mat::from_rows(&rows);
    let fit = lstsq(&a, y)?;
    let pred = a.matvec(&fit.coef);
    Ok(y.iter().zip(pred).map(|(v, p)| v - p).collect())
}

/// Correlation of `x` and `y` after regressing both on `given`.
pub fn partial_correlation(x: &[f64], y: &[f64], given: &[Vec<f64>]) -> Result<f64, MetaError> {
    let (rx, ry) = (residuals(x, given)?, residuals(y, given)?);
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| a * b).sum();
    let sxx: f64 = rx.iter().map(|a| a * a).sum();
    let syy: f64 = ry.iter().map(|a| a * a).sum();
    if sxx <= 1e-300 || syy <= 1e-300 {
        return Ok(0.0);
    }
    Ok(sxy / (sxx * syy).sqrt())
}

impl PerfCausalGraph {
    pub fn new(variables: Vec<PerfVariable>) -> Self {
        PerfCausalGraph {
            variables,
            edges: vec![],
            equations: vec![],
        }
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn has_edge(&self, src: usize, dst: usize) -> bool {
        self.edges.iter().any(|e| e.src == src && e.dst == dst)
    }

    fn adjacency(&self) -> Vec<Vec<bool>> {
        let n = self.variables.len();
        let mut a = vec![vec![false; n]; n];
        for e in &self.edges {
            a[e.src][e.dst] = true;
        }
        a
    }

    pub fn is_acyclic(&self) -> bool {
        crate::worlds::topological_order(&self.adjacency()).is_some()
    }

    /// Edges on some directed path from `from` to `to`.
    fn path_edges(&self, from: usize, to: usize) -> Option<Vec<usize>> {
        let n = self.variables.len();
        let mut prev: Vec<Option<usize>> = vec![None; n];
        let mut seen = vec![false; n];
        let mut queue = std::collections::VecDeque::from([from]);
        seen[from] = true;
        while let Some(v) = queue.pop_front() {
            if v == to {
                let mut path = Vec::new();
                let mut cur = to;
                while cur != from {
                    let k = prev[cur].expect("reached by search");
                    path.push(k);
                    cur = self.edges[k].src;
                }
                return Some(path);
            }
            for (k, e) in self.edges.iter().enumerate() {
                if e.src == v && !seen[e.dst] {
                    seen[e.dst] = true;
                    prev[e.dst] = Some(k);
                    queue.push_back(e.dst);
                }
            }
        }
        None
    }

    /// Adds `src → dst` unless it would close a cycle. On conflict, the
    /// lowest-confidence edge of the cycle is dropped when it is weaker than
    /// the proposal; otherwise the proposal is rejected. Returns whether the
    /// edge is now present.
    pub fn propose_edge(&mut self, src: usize, dst: usize, confidence: f64) -> bool {
        if src == dst {
            return false;
        }
        if let Some(e) = self.edges.iter_mut().find(|e| e.src == src && e.dst == dst) {
            e.confidence = e.confidence.max(confidence);
            return true;
        }
        loop {
            let Some(path) = self.path_edges(dst, src) else { break };
            let weakest = *path
                .iter()
                .min_by(|&&a, &&b| self.edges[a].confidence.total_cmp(&self.edges[b].confidence))
                .expect("nonempty cycle path");
            if self.edges[weakest].confidence >= confidence {
                return false;
            }
            self.edges.remove(weakest);
        }
        self.edges.push(PerfEdge { src, dst, confidence });
        true
    }

    /// Least-squares refresh of every equation with parents.
    pub fn refresh(&mut self, batch: &PerfBatch) -> Result<(), MetaError> {
        self.equations.clear();
        for v in 0..self.variables.len() {
            let mut parents: Vec<usize> = self.edges.iter().filter(|e| e.dst == v).map(|e| e.src).collect();
            parents.sort_unstable();
            if parents.is_empty() || batch.rows.is_empty() {
                continue;
            }
            let rows: Vec<Vec<f64>> = batch
                .rows
                .iter()
                .map(|r| std::iter::once(1.0).chain(parents.iter().map(|&p| r[p])).collect())
                .collect();
            let fit = lstsq(&Mat::from_rows(&rows), &batch.column(v))?;
            self.equations.push(PerfEquation {
                var: v,
                parents,
                intercept: fit.coef[0],
                coef: fit.coef[1..].to_vec(),
            });
        }
        Ok(())
    }

    pub fn to_dot(&self) -> String {
        let mut s = String::from("digraph perf {\n");
        for v in &self.variables {
            let shape = match v.kind {
                VarKind::Meta => "box",
                VarKind::Performance => "ellipse",
            };
            let _ = writeln!(s, "  \"{}\" [shape={shape}];", v.name);
        }
        for e in &self.edges {
            let _ = writeln!(
                s,
                "  \"{}\" -> \"{}\" [label=\"{:.3}\"];",
                self.variables[e.src].name, self.variables[e.dst].name, e.confidence
            );
        }
        s.push_str("}\n");
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }
}

/// What one update did.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PerfUpdate {
    /// Performance variable and change index for each detection.
    pub detections: Vec<(usize, usize)>,
    pub added: Vec<(usize, usize)>,
    pub rejected: Vec<(usize, usize)>,
}

/// One round of incremental discovery: CUSUM on every performance variable;
/// on a detection, meta variables that changed in the preceding window are
/// candidate parents, kept if their partial correlation with the performance
/// variable (given the other candidates) is significant at `α`. Coefficients
/// are refreshed in every case.
pub fn update_perf_graph(g: &PerfCausalGraph, batch: &PerfBatch, cfg: &PerfGraphConfig) -> Result<(PerfCausalGraph, PerfUpdate), MetaError> {
    let n = g.variables.len();
    if let Some(r) = batch.rows.iter().find(|r| r.len() != n) {
        return Err(MetaError::Config(format!("batch row has {} values for {n} variables", r.len())));
    }
    let mut out = g.clone();
    let mut report = PerfUpdate::default();
    let mut proposals: Vec<(usize, usize, f64)> = Vec::new();
    for (y, var) in g.variables.iter().enumerate() {
        if var.kind != VarKind::Performance {
            continue;
        }
        let series = batch.column(y);
        let Some(tau) = cusum_detect(&series, cfg.h, cfg.k) else { continue };
        report.detections.push((y, tau));
        let lo = tau.saturating_sub(cfg.window);
        let candidates: Vec<usize> = (0..n)
            .filter(|&c| g.variables[c].kind == VarKind::Meta)
            .filter(|&c| batch.rows[lo..=tau].windows(2).any(|w| w[0][c] != w[1][c]))
            .collect();
        for &c in &candidates {
            let given: Vec<Vec<f64>> = candidates.iter().filter(|&&o| o != c).map(|&o| batch.column(o)).collect();
            let r = partial_correlation(&batch.column(c), &series, &given)?;
            let p = fisher_z_pvalue(r, series.len(), given.len());
            if p < cfg.alpha {
                proposals.push((c, y, 1.0 - p));
            }
        }
    }
    proposals.sort_by(|a, b| b.2.total_cmp(&a.2));
    for (c, y, conf) in proposals {
        if out.propose_edge(c, y, conf) {
            report.added.push((c, y));
        } else {
            report.rejected.push((c, y));
        }
    }
    out.refresh(batch)?;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;
    use rand::Rng as _;
    use rand_distr::{Distribution, StandardNormal};

    fn vars() -> Vec<PerfVariable> {
        let v = |name: &str, kind| PerfVariable { name: name.into(), kind };
        vec![v("add_flag", VarKind::Meta), v("beta", VarKind::Meta), v("accuracy", VarKind::Performance)]
    }

    /// 50 episodes; `add_flag` switches on at 25 and lifts accuracy by 5σ;
    /// `beta` wanders independently.
    fn injected(seed: u64) -> PerfBatch {
        let mut r = rng(seed);
        let sigma = 0.02;
        let mut beta = 1.0;
        let rows = (0..50)
            .map(|t| {
                let flag = if t >= 25 { 1.0 } else { 0.0 };
                beta += r.random_range(-0.1..0.1);
                let noise: f64 = StandardNormal.sample(&mut r);
                vec![flag, beta, 0.5 + 5.0 * sigma * flag + sigma * noise]
            })
            .collect();
        PerfBatch { rows }
    }

    #[test]
    fn injected_dependency_is_recovered() {
        let g = PerfCausalGraph::new(vars());
        let (g2, rep) = update_perf_graph(&g, &injected(4), &PerfGraphConfig::default()).unwrap();
        assert_eq!(rep.detections.len(), 1);
        let e = g2.edges.iter().find(|e| e.src == 0 && e.dst == 2).expect("flag edge");
        assert!(e.confidence > 0.95);
        assert!(!g2.has_edge(1, 2));
        let eq = &g2.equations[0];
        assert!((eq.coef[0] - 0.1).abs() < 0.03);
        assert!(g2.is_acyclic());
    }

    #[test]
    fn no_change_only_refreshes() {
        let mut g = PerfCausalGraph::new(vars());
        g.propose_edge(1, 2, 0.99);
        let rows: Vec<Vec<f64>> = (0..40).map(|t| vec![0.0, t as f64, 2.0 + 0.5 * t as f64]).collect();
        let (g2, rep) = update_perf_graph(&g, &PerfBatch { rows }, &PerfGraphConfig { h: 1e9, ..Default::default() }).unwrap();
        assert!(rep.detections.is_empty());
        assert_eq!(g2.edges, g.edges);
        assert!((g2.equations[0].coef[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn cycle_closing_edges_are_rejected() {
        let mut g = PerfCausalGraph::new(vars());
        assert!(g.propose_edge(0, 1, 0.99));
        assert!(g.propose_edge(1, 2, 0.99));
        assert!(!g.propose_edge(2, 0, 0.5));
        assert!(g.is_acyclic());
        // A stronger proposal displaces the weakest edge of the cycle.
        assert!(g.propose_edge(2, 0, 0.999));
        assert!(g.is_acyclic());
        assert_eq!(g.edges.len(), 2);
    }

    #[test]
    fn fisher_z_matches_normal_tail() {
        // r = tanh(1.96 / √(n−3)) sits exactly at p = 0.05.
        let n = 103;
        let r = (1.96f64 / 10.0).tanh();
        assert!((fisher_z_pvalue(r, n, 0) - 0.05).abs() < 1e-3);
    }
}
