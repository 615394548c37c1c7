//! Causal flow, conservation residual and conservation-regularized fusion.

use serde::{Deserialize, Serialize};

use super::RoutingError;
use crate::numerics::{rng, Mat, Scalar};
use crate::worlds::{replicate_rng, InterventionalWorld, Marginal};
use rand::Rng as _;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowReport {
    pub flow: Mat,
    pub info: Vec<f64>,
    pub strength: Mat,
    pub ext_in: Vec<f64>,
    pub ext_out: Vec<f64>,
    pub dissipation: Vec<f64>,
    pub residual: f64,
}

fn check_inputs(w: &Mat, info: &[f64], strength: &Mat) -> Result<(), RoutingError> {
    let n = w.rows();
    if !w.is_square() {
        return Err(RoutingError::Dimension { expected: n, got: w.cols() });
    }
    for (expected, got) in [(n, info.len()), (n, strength.rows()), (n, strength.cols())] {
        if expected != got {
            return Err(RoutingError::Dimension { expected, got });
        }
    }
    if let Some(i) = info.iter().position(|&v| !(v >= 0.0)) {
        return Err(RoutingError::NegativeInfo { index: i, value: info[i] });
    }
    Ok(())
}

/// `g_ij = I_i · S_ij`, so that `F = W ∘ g`.
pub fn flow_gain(info: &[f64], strength: &Mat) -> Mat {
    Mat::from_fn(info.len(), info.len(), |i, j| info[i] * strength[(i, j)])
}

/// `Σ_j (inflow_j − outflow_j)²` with `F_ij = W_ij g_ij`.
pub fn conservation_residual<S: Scalar>(w: &[S], gain: &Mat) -> S {
    let n = gain.rows();
    let mut total = S::zero();
    for j in 0..n {
        let mut r = S::zero();
        for i in 0..n {
            r = r + w[i * n + j] * gain[(i, j)] - w[j * n + i] * gain[(j, i)];
        }
        total = total + r * r;
    }
    total
}

pub fn causal_flow(w: &Mat, info: &[f64], strength: &Mat, ext_in: &[f64], ext_out: &[f64]) -> Result<FlowReport, RoutingError> {
    check_inputs(w, info, strength)?;
    let n = w.rows();
    for got in [ext_in.len(), ext_out.len()] {
        if got != n {
            return Err(RoutingError::Dimension { expected: n, got });
        }
    }
    let flow = w.zip_with(&flow_gain(info, strength), |a, b| a * b);
    let inflow: Vec<f64> = (0..n).map(|j| flow.col(j).iter().sum()).collect();
    let outflow: Vec<f64> = (0..n).map(|j| flow.row(j).iter().sum()).collect();
    let dissipation = (0..n)
        .map(|j| (inflow[j] + ext_in[j] - outflow[j] - ext_out[j]).max(0.0))
        .collect();
    let residual = inflow.iter().zip(&outflow).map(|(a, b)| (a - b).powi(2)).sum();
    Ok(FlowReport {
        flow,
        info: info.to_vec(),
        strength: strength.clone(),
        ext_in: ext_in.to_vec(),
        ext_out: ext_out.to_vec(),
        dissipation,
        residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FuseConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub iters: usize,
    /// Row-major; `true` entries are forced to zero.
    #[serde(default)]
    pub mask: Option<Vec<bool>>,
}

impl Default for FuseConfig {
    fn default() -> Self {
        FuseConfig {
            lambda1: 0.5,
            lambda2: 0.5,
            iters: 3,
            mask: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fused {
    pub w: Mat,
    pub residual_trace: Vec<f64>,
    pub objective_trace: Vec<f64>,
    pub step: f64,
}

/// `residual(W) + λ1‖W−W_sym‖² + λ2‖W−W_sub‖²`.
pub fn fuse_objective<S: Scalar>(w: &[S], gain: &Mat, w_sym: &Mat, w_sub: &Mat, lambda1: f64, lambda2: f64) -> S {
    let mut total = conservation_residual(w, gain);
    for (k, &v) in w.iter().enumerate() {
        let a = v - w_sym.data()[k];
        let b = v - w_sub.data()[k];
        total = total + a * a * lambda1 + b * b * lambda2;
    }
    total
}

/// Closed-form gradient of [`fuse_objective`].
pub fn fuse_gradient(w: &[f64], gain: &Mat, w_sym: &Mat, w_sub: &Mat, lambda1: f64, lambda2: f64) -> Vec<f64> {
    let n = gain.rows();
    let r: Vec<f64> = (0..n)
        .map(|j| (0..n).map(|i| w[i * n + j] * gain[(i, j)] - w[j * n + i] * gain[(j, i)]).sum())
        .collect();
    (0..n * n)
        .map(|k| {
            let (a, b) = (k / n, k % n);
            2.0 * gain[(a, b)] * (r[b] - r[a])
                + 2.0 * lambda1 * (w[k] - w_sym.data()[k])
                + 2.0 * lambda2 * (w[k] - w_sub.data()[k])
        })
        .collect()
}

/// Upper bound on the gradient's Lipschitz constant.
pub fn fuse_smoothness(gain: &Mat, lambda1: f64, lambda2: f64) -> f64 {
    let n = gain.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += 2.0 * gain[(i, j)].powi(2);
            }
        }
    }
    2.0 * s + 2.0 * (lambda1 + lambda2)
}

/// Projected gradient descent on [`fuse_objective`] over `[0,1]^{n×n}` with
/// step `1/L`. A step is taken only if neither the objective nor the
/// residual increases, halving up to 20 times before skipping.
pub fn fuse(w_sym: &Mat, w_sub: &Mat, info: &[f64], strength: &Mat, cfg: &FuseConfig) -> Result<Fused, RoutingError> {
    check_inputs(w_sym, info, strength)?;
    let n = w_sym.rows();
    if w_sub.rows() != n || w_sub.cols() != n {
        return Err(RoutingError::Dimension { expected: n, got: w_sub.rows() });
    }
    if !(cfg.lambda1 >= 0.0 && cfg.lambda2 >= 0.0) {
        return Err(RoutingError::Config("λ1 and λ2 must be nonnegative".into()));
    }
    let masked = |k: usize| cfg.mask.as_ref().is_some_and(|m| m[k]);
    if cfg.mask.as_ref().is_some_and(|m| m.len() != n * n) {
        return Err(RoutingError::Dimension {
            expected: n * n,
            got: cfg.mask.as_ref().map_or(0, Vec::len),
        });
    }
    let project = |w: &mut [f64]| {
        for (k, v) in w.iter_mut().enumerate() {
            *v = if masked(k) { 0.0 } else { v.clamp(0.0, 1.0) };
        }
    };
    let gain = flow_gain(info, strength);
    let (l1, l2) = (cfg.lambda1, cfg.lambda2);
    let denom = l1 + l2;
    let mut w: Vec<f64> = if denom > 0.0 {
        w_sym.data().iter().zip(w_sub.data()).map(|(a, b)| (l1 * a + l2 * b) / denom).collect()
    } else {
        w_sym.data().iter().zip(w_sub.data()).map(|(a, b)| 0.5 * (a + b)).collect()
    };
    project(&mut w);
    let objective = |w: &[f64]| fuse_objective(w, &gain, w_sym, w_sub, l1, l2);
    let smooth = fuse_smoothness(&gain, l1, l2);
    let step = if smooth > 0.0 { 1.0 / smooth } else { 0.0 };
    let mut obj = objective(&w);
    let mut res = conservation_residual(&w, &gain);
    let mut out = Fused {
        w: Mat::zeros(n, n),
        residual_trace: vec![res],
        objective_trace: vec![obj],
        step,
    };
    for _ in 0..cfg.iters {
        let g = fuse_gradient(&w, &gain, w_sym, w_sub, l1, l2);
        if let Some(k) = g.iter().position(|v| !v.is_finite()) {
            return Err(RoutingError::Numerics(crate::numerics::NumericsError::NonFiniteGradient {
                coord: k,
                value: g[k],
            }));
        }
        let mut eta = step;
        for _ in 0..=20 {
            let mut cand: Vec<f64> = w.iter().zip(&g).map(|(x, d)| x - eta * d).collect();
            project(&mut cand);
            let (o, r) = (objective(&cand), conservation_residual(&cand, &gain));
            if o <= obj && r <= res {
                w = cand;
                obj = o;
                res = r;
                break;
            }
            eta *= 0.5;
        }
        out.residual_trace.push(res);
        out.objective_trace.push(obj);
    }
    out.w = Mat::from_vec(n, n, w).expect("n×n");
    Ok(out)
}

/// Strongly convex surrogate `Σ c_ij (W_ij − D_ij)² + λ1‖W−W_sym‖² + λ2‖W−W_sub‖²`.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingQuadratic {
    pub c: Mat,
    pub d: Mat,
    pub w_sym: Mat,
    pub w_sub: Mat,
    pub lambda1: f64,
    pub lambda2: f64,
}

impl RoutingQuadratic {
    /// Random instance with `c ∈ [0,30]` and all targets inside `[0,1]`.
    pub fn random(seed: u64, n: usize, lambda1: f64, lambda2: f64) -> Self {
        let mut r = rng(seed);
        let mut m = |lo: f64, hi: f64| Mat::from_fn(n, n, |_, _| r.random_range(lo..=hi));
        RoutingQuadratic {
            c: m(0.0, 30.0),
            d: m(0.0, 1.0),
            w_sym: m(0.0, 1.0),
            w_sub: m(0.0, 1.0),
            lambda1,
            lambda2,
        }
    }

    pub fn value<S: Scalar>(&self, w: &[S]) -> S {
        let mut t = S::zero();
        for (k, &v) in w.iter().enumerate() {
            let a = v - self.d.data()[k];
            let b = v - self.w_sym.data()[k];
            let c = v - self.w_sub.data()[k];
            t = t + a * a * self.c.data()[k] + b * b * self.lambda1 + c * c * self.lambda2;
        }
        t
    }

    fn curvature(&self, k: usize) -> f64 {
        self.c.data()[k] + self.lambda1 + self.lambda2
    }

    pub fn minimizer(&self) -> Vec<f64> {
        (0..self.c.data().len())
            .map(|k| {
                (self.c.data()[k] * self.d.data()[k] + self.lambda1 * self.w_sym.data()[k] + self.lambda2 * self.w_sub.data()[k])
                    / self.curvature(k)
            })
            .collect()
    }

    pub fn mu(&self) -> f64 {
        2.0 * (0..self.c.data().len()).map(|k| self.curvature(k)).fold(f64::INFINITY, f64::min)
    }

    pub fn smoothness(&self) -> f64 {
        2.0 * (0..self.c.data().len()).map(|k| self.curvature(k)).fold(0.0, f64::max)
    }

    /// `f(W) − f*`, computed without cancellation.
    pub fn suboptimality(&self, w: &[f64]) -> f64 {
        let star = self.minimizer();
        w.iter()
            .enumerate()
            .map(|(k, v)| self.curvature(k) * (v - star[k]).powi(2))
            .sum()
    }
}

fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    let len = p.len().max(q.len());
    let at = |v: &[f64], k: usize| v.get(k).copied().unwrap_or(0.0);
    0.5 * (0..len).map(|k| (at(p, k) - at(q, k)).abs()).sum::<f64>()
}

/// Gaussian shift score `1 − exp(−|μ_do − μ_obs| / sd_obs)`.
fn shift_score(mean_do: f64, mean_obs: f64, sd_obs: f64) -> f64 {
    let diff = (mean_do - mean_obs).abs();
    if diff == 0.0 {
        return 0.0;
    }
    1.0 - (-diff / sd_obs.max(1e-12)).exp()
}

fn empirical_pmf(values: &[f64], support: usize) -> Vec<f64> {
    let mut p = vec![0.0; support];
    for &v in values {
        let k = (v.round().max(0.0) as usize).min(support - 1);
        p[k] += 1.0;
    }
    let n = values.len().max(1) as f64;
    p.iter_mut().for_each(|v| *v /= n);
    p
}

/// Mean over the intervention grid of the distance between `P(X_j)` and
/// `P(X_j | do(X_i = x))`: total variation for discrete laws, the Gaussian
/// shift score for continuous ones. `n_samples == 0` computes it exactly.
pub fn estimate_causal_strength(
    world: &dyn InterventionalWorld,
    i: usize,
    j: usize,
    n_samples: usize,
    seed: u64,
) -> Result<f64, RoutingError> {
    let n = world.variables().len();
    for v in [i, j] {
        if v >= n {
            return Err(RoutingError::NoVariable { index: v, n });
        }
    }
    let grid = world.grid(i);
    if grid.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    if n_samples == 0 {
        let obs = world.marginal(j, None);
        for &x in &grid {
            total += match (&obs, world.marginal(j, Some((i, x)))) {
                (Marginal::Discrete(p), Marginal::Discrete(q)) => total_variation(p, &q),
                (Marginal::Gaussian { mean, sd }, Marginal::Gaussian { mean: m_do, .. }) => shift_score(m_do, *mean, *sd),
                _ => unreachable!("a world reports one law family"),
            };
        }
    } else {
        // Common random numbers: every draw below reuses one substream.
        let rows = |intervention| world.draw_rows(intervention, n_samples, &mut replicate_rng(seed, 0));
        let col = |rows: Vec<Vec<f64>>| rows.into_iter().map(|r| r[j]).collect::<Vec<f64>>();
        let obs = col(rows(None));
        match world.marginal(j, None) {
            Marginal::Discrete(p) => {
                let p_obs = empirical_pmf(&obs, p.len());
                for &x in &grid {
                    total += total_variation(&p_obs, &empirical_pmf(&col(rows(Some((i, x)))), p.len()));
                }
            }
            Marginal::Gaussian { .. } => {
                let m = obs.iter().sum::<f64>() / obs.len() as f64;
                let var = obs.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (obs.len().max(2) - 1) as f64;
                for &x in &grid {
                    let d = col(rows(Some((i, x))));
                    total += shift_score(d.iter().sum::<f64>() / d.len() as f64, m, var.sqrt());
                }
            }
        }
    }
    Ok(total / grid.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{check_gradient, objective, value_and_grad};
    use crate::worlds::{FsmWorld, LinearGaussianScm};

    fn random_instance(seed: u64, n: usize) -> (Mat, Vec<f64>, Mat) {
        let mut r = rng(seed);
        let w = Mat::from_fn(n, n, |_, _| r.random_range(0.0..1.0));
        let info: Vec<f64> = (0..n).map(|_| r.random_range(0.0..3.0)).collect();
        let s = Mat::from_fn(n, n, |_, _| r.random_range(0.0..1.0));
        (w, info, s)
    }

    #[test]
    fn zero_flow_and_single_edge() {
        let z = Mat::zeros(3, 3);
        let rep = causal_flow(&z, &[1.0; 3], &Mat::filled(3, 3, 1.0), &[0.0; 3], &[0.0; 3]).unwrap();
        assert_eq!(rep.residual, 0.0);
        assert!(rep.flow.data().iter().all(|&v| v == 0.0));
        let mut w = Mat::zeros(2, 2);
        w[(0, 1)] = 0.5;
        let rep = causal_flow(&w, &[2.0, 0.0], &Mat::filled(2, 2, 1.0), &[0.0; 2], &[0.0; 2]).unwrap();
        assert_eq!(rep.flow[(0, 1)], 1.0);
        assert_eq!(rep.dissipation, vec![0.0, 1.0]);
        assert!(causal_flow(&w, &[-1.0, 0.0], &Mat::filled(2, 2, 1.0), &[0.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn residual_matches_second_summation_order() {
        let (w, info, s) = random_instance(3, 4);
        let rep = causal_flow(&w, &info, &s, &[0.0; 4], &[0.0; 4]).unwrap();
        let mut inflow = [0.0; 4];
        let mut outflow = [0.0; 4];
        for k in (0..16).rev() {
            let (i, j) = (k / 4, k % 4);
            let f = w[(i, j)] * info[i] * s[(i, j)];
            inflow[j] += f;
            outflow[i] += f;
        }
        let oracle: f64 = (0..4).rev().map(|j| (inflow[j] - outflow[j]).powi(2)).sum();
        assert!((rep.residual - oracle).abs() < 1e-12);
        assert!((conservation_residual(w.data(), &flow_gain(&info, &s)) - oracle).abs() < 1e-12);
        assert!(rep.dissipation.iter().all(|&d| d >= 0.0));
    }

    #[test]
    fn closed_form_gradient_matches_tape() {
        let (w, info, s) = random_instance(4, 4);
        let g = flow_gain(&info, &s);
        let (sym, sub) = (random_instance(5, 4).0, random_instance(6, 4).0);
        let f = objective(|x| fuse_objective(x, &g, &sym, &sub, 0.3, 0.7));
        let (_, tape) = value_and_grad(&f, w.data()).unwrap();
        let closed = fuse_gradient(w.data(), &g, &sym, &sub, 0.3, 0.7);
        for (a, b) in tape.iter().zip(&closed) {
            assert!((a - b).abs() < 1e-10);
        }
        assert!(check_gradient(&f, w.data()).unwrap().passes(1e-4));
    }

    #[test]
    fn fuse_keeps_optimal_point() {
        let (w, _, _) = random_instance(7, 3);
        let out = fuse(&w, &w, &[0.0; 3], &Mat::zeros(3, 3), &FuseConfig::default()).unwrap();
        assert_eq!(out.w, w);
    }

    #[test]
    fn unbalanced_node_strictly_decreases() {
        let mut sym = Mat::zeros(3, 3);
        sym[(0, 1)] = 1.0;
        sym[(2, 1)] = 1.0;
        let cfg = FuseConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            ..FuseConfig::default()
        };
        let out = fuse(&sym, &sym, &[1.0; 3], &Mat::filled(3, 3, 1.0), &cfg).unwrap();
        let t = &out.residual_trace;
        assert_eq!(t.len(), 4);
        assert!(t.windows(2).all(|p| p[1] < p[0]), "{t:?}");
    }

    #[test]
    fn fuse_traces_are_monotone() {
        for seed in 0..20 {
            let (sym, info, s) = random_instance(seed, 5);
            let sub = random_instance(seed + 100, 5).0;
            let out = fuse(&sym, &sub, &info, &s, &FuseConfig::default()).unwrap();
            assert!(out.residual_trace.windows(2).all(|p| p[1] <= p[0]));
            assert!(out.objective_trace.windows(2).all(|p| p[1] <= p[0]));
            assert!(out.w.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn mask_forces_exact_zero() {
        let (sym, info, s) = random_instance(8, 4);
        let mut mask = vec![false; 16];
        mask[1] = true;
        let mut sym = sym;
        sym[(0, 1)] = 0.0;
        let cfg = FuseConfig {
            lambda2: 0.0,
            mask: Some(mask),
            ..FuseConfig::default()
        };
        let out = fuse(&sym, &random_instance(9, 4).0, &info, &s, &cfg).unwrap();
        assert_eq!(out.w[(0, 1)], 0.0);
    }

    #[test]
    fn quadratic_minimizer_has_zero_gradient() {
        let q = RoutingQuadratic::random(1, 3, 0.5, 0.5);
        let f = objective(|x| q.value(x));
        let star = q.minimizer();
        let (_, g) = value_and_grad(&f, &star).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-10));
        let x: Vec<f64> = star.iter().map(|v| v + 0.1).collect();
        let exact = crate::numerics::eval(&f, &x) - crate::numerics::eval(&f, &star);
        assert!((q.suboptimality(&x) - exact).abs() < 1e-9);
    }

    fn coin() -> FsmWorld {
        FsmWorld::new(vec!["0".into(), "1".into()], Mat::identity(2), vec![0.5, 0.5], 1).unwrap()
    }

    #[test]
    fn fair_coin_copy_has_strength_half() {
        assert_eq!(estimate_causal_strength(&coin(), 0, 1, 0, 0).unwrap(), 0.5);
        let mc = estimate_causal_strength(&coin(), 0, 1, 4000, 1).unwrap();
        assert!((mc - 0.5).abs() < 0.05);
        // Interventions on the future do not reach the past.
        assert_eq!(estimate_causal_strength(&coin(), 1, 0, 0, 0).unwrap(), 0.0);
        assert!(estimate_causal_strength(&coin(), 0, 5, 0, 0).is_err());
    }

    #[test]
    fn independent_variables_have_zero_strength() {
        let w = LinearGaussianScm::new(vec!["X".into(), "Y".into()], Mat::zeros(2, 2), vec![1.0, 1.0]).unwrap();
        assert_eq!(estimate_causal_strength(&w, 0, 1, 0, 0).unwrap(), 0.0);
        assert_eq!(estimate_causal_strength(&w, 0, 1, 500, 3).unwrap(), 0.0);
    }
}
