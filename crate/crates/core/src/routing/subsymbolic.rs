//! Sub-symbolic channel: balanced k-means over embeddings, multi-head
//! attention inside clusters and between layer-permissible cluster pairs.

use serde::{Deserialize, Serialize};

use super::RoutingError;
use crate::numerics::{rng, Mat, Scalar};
use crate::primitives::{softmax, Layer};
use rand::Rng as _;

pub const HEADS: usize = 4;
pub const HEAD_DIM: usize = 4;
pub const KMEANS_ITERS: usize = 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub heads: usize,
    pub head_dim: usize,
    pub embed_dim: usize,
    /// `heads × embed_dim × head_dim`, row-major per head.
    pub wq: Vec<f64>,
    pub wk: Vec<f64>,
    /// Intra/inter gate in [0,1].
    pub beta: f64,
    /// Score every cluster pair instead of only layer-order permissible ones.
    pub allow_all_inter: bool,
}

impl AttentionParams {
    pub fn new(embed_dim: usize, heads: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let len = heads * embed_dim * HEAD_DIM;
        let scale = 1.0 / (embed_dim as f64).sqrt();
        let mut draw = |_| r.random_range(-scale..=scale);
        AttentionParams {
            heads,
            head_dim: HEAD_DIM,
            embed_dim,
            wq: (0..len).map(&mut draw).collect(),
            wk: (0..len).map(&mut draw).collect(),
            beta: 0.5,
            allow_all_inter: false,
        }
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

fn centroids(points: &[Vec<f64>], assign: &[usize], k: usize) -> Vec<Vec<f64>> {
    let d = points[0].len();
    let mut c = vec![vec![0.0; d]; k];
    let mut count = vec![0usize; k];
    for (p, &a) in points.iter().zip(assign) {
        count[a] += 1;
        for (cv, pv) in c[a].iter_mut().zip(p) {
            *cv += pv;
        }
    }
    for (cv, &m) in c.iter_mut().zip(&count) {
        cv.iter_mut().for_each(|v| *v /= m.max(1) as f64);
    }
    c
}

/// k-means with cluster capacity `⌈n/k⌉`, farthest-point init from point 0
/// and lowest-index tie breaking. Every cluster ends nonempty.
pub fn balanced_kmeans(points: &[Vec<f64>], k: usize, iters: usize) -> Result<Vec<usize>, RoutingError> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(RoutingError::ClusterCount { k, n });
    }
    let cap = n.div_ceil(k);
    let mut cent = vec![points[0].clone()];
    let mut near: Vec<f64> = points.iter().map(|p| dist2(p, &points[0])).collect();
    while cent.len() < k {
        let mut best = 0;
        for i in 1..n {
            if near[i] > near[best] {
                best = i;
            }
        }
        cent.push(points[best].clone());
        for (i, p) in points.iter().enumerate() {
            near[i] = near[i].min(dist2(p, &points[best]));
        }
    }
    let mut assign = vec![usize::MAX; n];
    for _ in 0..iters.max(1) {
        let d: Vec<Vec<f64>> = points.iter().map(|p| cent.iter().map(|c| dist2(p, c)).collect()).collect();
        let pref: Vec<Vec<usize>> = d
            .iter()
            .map(|row| {
                let mut idx: Vec<usize> = (0..k).collect();
                idx.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
                idx
            })
            .collect();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| d[a][pref[a][0]].total_cmp(&d[b][pref[b][0]]).then(a.cmp(&b)));
        let mut size = vec![0usize; k];
        let mut next = vec![0usize; n];
        for &i in &order {
            let c = *pref[i].iter().find(|&&c| size[c] < cap).expect("total capacity ≥ n");
            next[i] = c;
            size[c] += 1;
        }
        for e in 0..k {
            if size[e] > 0 {
                continue;
            }
            let c = centroids(points, &next, k);
            let mut pick: Option<usize> = None;
            for i in 0..n {
                if size[next[i]] > 1
                    && pick.is_none_or(|p| dist2(&points[i], &c[next[i]]) > dist2(&points[p], &c[next[p]]))
                {
                    pick = Some(i);
                }
            }
            let i = pick.expect("some cluster has two members");
            size[next[i]] -= 1;
            next[i] = e;
            size[e] = 1;
        }
        let done = next == assign;
        assign = next;
        cent = centroids(points, &assign, k);
        if done {
            break;
        }
    }
    Ok(assign)
}

/// Exact worst case of [`SubsymbolicOutput::op_count`] for balanced clusters.
pub fn op_count_bound(n: usize, k: usize) -> usize {
    k * n.div_ceil(k).pow(2) + k * k
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsymbolicOutput {
    pub w_sub: Mat,
    pub w_intra: Mat,
    pub w_inter: Mat,
    pub clusters: Vec<usize>,
    pub k: usize,
    /// Pairwise score evaluations (shared across heads).
    pub op_count: usize,
}

/// Fixed structure of one attention evaluation.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub embeddings: Vec<Vec<f64>>,
    pub clusters: Vec<usize>,
    pub k: usize,
    members: Vec<Vec<usize>>,
    centroids: Vec<Vec<f64>>,
    targets: Vec<Vec<usize>>,
}

fn cluster_layer(members: &[usize], layers: &[Layer]) -> Layer {
    let mut count = [0usize; 4];
    for &m in members {
        count[layers[m].index()] += 1;
    }
    let best = (0..4).fold(0, |b, l| if count[l] > count[b] { l } else { b });
    Layer::ALL[best]
}

impl AttentionLayout {
    pub fn new(embeddings: Vec<Vec<f64>>, layers: &[Layer], k: usize, allow_all: bool) -> Result<Self, RoutingError> {
        let clusters = balanced_kmeans(&embeddings, k, KMEANS_ITERS)?;
        let mut members = vec![Vec::new(); k];
        for (i, &c) in clusters.iter().enumerate() {
            members[c].push(i);
        }
        let centroids = centroids(&embeddings, &clusters, k);
        let cl: Vec<Layer> = members.iter().map(|m| cluster_layer(m, layers)).collect();
        let targets = (0..k)
            .map(|a| (0..k).filter(|&b| allow_all || cl[a] <= cl[b]).collect())
            .collect();
        Ok(AttentionLayout {
            embeddings,
            clusters,
            k,
            members,
            centroids,
            targets,
        })
    }

    pub fn n(&self) -> usize {
        self.embeddings.len()
    }

    pub fn op_count(&self) -> usize {
        let intra: usize = self.members.iter().map(|m| m.len().pow(2)).sum();
        let inter: usize = self.targets.iter().filter(|t| t.len() > 1).map(Vec::len).sum();
        intra + inter
    }

    /// Per-head projections of `x`.
    fn project<S: Scalar>(x: &[f64], w: &[S], heads: usize, d: usize) -> Vec<Vec<S>> {
        (0..heads)
            .map(|h| {
                (0..HEAD_DIM)
                    .map(|o| {
                        x.iter()
                            .enumerate()
                            .fold(S::zero(), |acc, (i, &xv)| acc + w[(h * d + i) * HEAD_DIM + o] * xv)
                    })
                    .collect()
            })
            .collect()
    }

    /// Head-averaged softmax attention of `queries` over `keys`.
    fn attend<S: Scalar>(q: &[Vec<Vec<S>>], keys: &[Vec<Vec<S>>], heads: usize) -> Vec<Vec<S>> {
        let scale = 1.0 / (HEAD_DIM as f64).sqrt();
        let inv = 1.0 / heads as f64;
        q.iter()
            .map(|qi| {
                let mut row = vec![S::zero(); keys.len()];
                for h in 0..heads {
                    let scores: Vec<S> = keys
                        .iter()
                        .map(|kj| qi[h].iter().zip(&kj[h]).fold(S::zero(), |a, (&x, &y)| a + x * y) * scale)
                        .collect();
                    for (r, p) in row.iter_mut().zip(softmax(&scores)) {
                        *r = *r + p * inv;
                    }
                }
                row
            })
            .collect()
    }

    /// Row-major `(W_intra, W_inter)`.
    pub fn weights<S: Scalar>(&self, wq: &[S], wk: &[S], heads: usize) -> (Vec<S>, Vec<S>) {
        let n = self.n();
        let d = self.embeddings[0].len();
        let q: Vec<Vec<Vec<S>>> = self.embeddings.iter().map(|e| Self::project(e, wq, heads, d)).collect();
        let kk: Vec<Vec<Vec<S>>> = self.embeddings.iter().map(|e| Self::project(e, wk, heads, d)).collect();
        let mut intra = vec![S::zero(); n * n];
        for m in &self.members {
            let qs: Vec<_> = m.iter().map(|&i| q[i].clone()).collect();
            let ks: Vec<_> = m.iter().map(|&j| kk[j].clone()).collect();
            for (row, &i) in Self::attend(&qs, &ks, heads).into_iter().zip(m) {
                for (v, &j) in row.into_iter().zip(m) {
                    intra[i * n + j] = v;
                }
            }
        }
        let qc: Vec<_> = self.centroids.iter().map(|e| Self::project(e, wq, heads, d)).collect();
        let kc: Vec<_> = self.centroids.iter().map(|e| Self::project(e, wk, heads, d)).collect();
        let mut cluster_w = vec![vec![S::zero(); self.k]; self.k];
        for a in 0..self.k {
            let t = &self.targets[a];
            if t.len() == 1 {
                cluster_w[a][t[0]] = S::one();
                continue;
            }
            let ks: Vec<_> = t.iter().map(|&b| kc[b].clone()).collect();
            let row = Self::attend(std::slice::from_ref(&qc[a]), &ks, heads).remove(0);
            for (v, &b) in row.into_iter().zip(t) {
                cluster_w[a][b] = v;
            }
        }
        let mut inter = vec![S::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let (a, b) = (self.clusters[i], self.clusters[j]);
                inter[i * n + j] = cluster_w[a][b] / self.members[b].len() as f64;
            }
        }
        (intra, inter)
    }
}

/// `β·W_intra + (1−β)·W_inter` from precomputed embeddings.
pub fn subsymbolic_from_embeddings(
    embeddings: Vec<Vec<f64>>,
    layers: &[Layer],
    k: usize,
    params: &AttentionParams,
) -> Result<SubsymbolicOutput, RoutingError> {
    let n = embeddings.len();
    if let Some(e) = embeddings.iter().find(|e| e.len() != params.embed_dim) {
        return Err(RoutingError::Dimension {
            expected: params.embed_dim,
            got: e.len(),
        });
    }
    let layout = AttentionLayout::new(embeddings, layers, k, params.allow_all_inter)?;
    let (intra, inter) = layout.weights(&params.wq, &params.wk, params.heads);
    let beta = params.beta;
    let sub: Vec<f64> = intra.iter().zip(&inter).map(|(a, b)| beta * a + (1.0 - beta) * b).collect();
    Ok(SubsymbolicOutput {
        w_sub: Mat::from_vec(n, n, sub).expect("n×n"),
        w_intra: Mat::from_vec(n, n, intra).expect("n×n"),
        w_inter: Mat::from_vec(n, n, inter).expect("n×n"),
        op_count: layout.op_count(),
        clusters: layout.clusters,
        k,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;

    fn cloud(n: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut r = rng(seed);
        (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn kmeans_is_balanced_and_deterministic() {
        let pts = cloud(50, 3, 1);
        let a = balanced_kmeans(&pts, 7, KMEANS_ITERS).unwrap();
        assert_eq!(a, balanced_kmeans(&pts, 7, KMEANS_ITERS).unwrap());
        for c in 0..7 {
            let s = a.iter().filter(|&&x| x == c).count();
            assert!(s >= 1 && s <= 8);
        }
        assert!(balanced_kmeans(&pts, 51, 1).is_err());
    }

    #[test]
    fn single_cluster_is_full_attention() {
        let pts = cloud(10, 5, 2);
        let p = AttentionParams::new(5, HEADS, 3);
        let out = subsymbolic_from_embeddings(pts, &[Layer::Phys; 10], 1, &p).unwrap();
        assert_eq!(out.op_count, 100);
        for i in 0..10 {
            assert!((out.w_intra.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn op_count_example() {
        let pts = cloud(64, 6, 4);
        let mut p = AttentionParams::new(6, HEADS, 5);
        p.allow_all_inter = true;
        let out = subsymbolic_from_embeddings(pts, &[Layer::Phys; 64], 8, &p).unwrap();
        assert_eq!(out.op_count, 576);
        assert!(out.op_count <= op_count_bound(64, 8));
    }

    #[test]
    fn gate_endpoint_gives_intra() {
        let pts = cloud(12, 4, 6);
        let mut p = AttentionParams::new(4, HEADS, 7);
        p.beta = 1.0;
        let out = subsymbolic_from_embeddings(pts, &[Layer::Event; 12], 3, &p).unwrap();
        assert_eq!(out.w_sub, out.w_intra);
        for i in 0..12 {
            assert!((out.w_inter.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_order_blocks_backward_inter_flow() {
        let mut pts = cloud(8, 4, 8);
        for (i, p) in pts.iter_mut().enumerate() {
            p[0] = if i < 4 { 10.0 } else { -10.0 };
        }
        let layers = [[Layer::Phys; 4], [Layer::Rule; 4]].concat();
        let p = AttentionParams::new(4, HEADS, 9);
        let out = subsymbolic_from_embeddings(pts, &layers, 2, &p).unwrap();
        // Rule cluster may not attend to the Phys cluster.
        for i in 4..8 {
            for j in 0..4 {
                assert_eq!(out.w_inter[(i, j)], 0.0);
            }
        }
    }
}
