//! Tabular softmax meta-policy trained by Lagrangian policy gradient.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{MetaError, N_COSTS};
use crate::numerics::Rng;
use crate::primitives::softmax;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    /// Step size `α_t = α0 / (1 + t)`.
    pub alpha0: f64,
    /// Dual steps use `dual_scale · α_t`.
    pub dual_scale: f64,
    pub gamma: f64,
    /// Per-constraint limits `d_i` in `E[C_i] ≤ d_i`.
    pub limits: [f64; N_COSTS],
    /// Rate of the per-bin running return baseline.
    pub baseline_rate: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            alpha0: 5.0,
            dual_scale: 1.0,
            gamma: 0.95,
            limits: [0.0; N_COSTS],
            baseline_rate: 0.1,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<(), MetaError> {
        if !(self.alpha0 > 0.0 && self.dual_scale >= 0.0 && (0.0..1.0).contains(&self.gamma) && (0.0..=1.0).contains(&self.baseline_rate)) {
            return Err(MetaError::Config("policy: need α0 > 0, dual scale ≥ 0, γ in [0,1), baseline rate in [0,1]".into()));
        }
        Ok(())
    }

    pub fn step_size(&self, t: usize) -> f64 {
        self.alpha0 / (1.0 + t as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularPolicy {
    pub n_bins: usize,
    pub n_actions: usize,
    /// Logits, row-major `bin × action`.
    pub theta: Vec<f64>,
    pub baseline: Vec<f64>,
    /// Updates applied so far (drives the step schedule).
    pub updates: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyStep {
    pub bin: usize,
    pub action: usize,
    pub reward: f64,
    pub costs: [f64; N_COSTS],
}

pub type Trajectory = Vec<PolicyStep>;

/// Nonnegative Lagrange multipliers, one per constraint.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Duals(pub [f64; N_COSTS]);

impl TabularPolicy {
    pub fn uniform(n_bins: usize, n_actions: usize) -> Self {
        TabularPolicy {
            n_bins,
            n_actions,
            theta: vec![0.0; n_bins * n_actions],
            baseline: vec![0.0; n_bins],
            updates: 0,
        }
    }

    pub fn probs(&self, bin: usize) -> Vec<f64> {
        softmax(&self.theta[bin * self.n_actions..(bin + 1) * self.n_actions])
    }

    pub fn sample(&self, bin: usize, r: &mut Rng) -> usize {
        let p = self.probs(bin);
        let u: f64 = r.random();
        let mut acc = 0.0;
        for (a, q) in p.iter().enumerate() {
            acc += q;
            if u < acc {
                return a;
            }
        }
        self.n_actions - 1
    }
}

/// `E[Σ γ^t r] − Σ λ_i E[Σ γ^t C_i]` estimated from trajectories.
pub fn lagrangian(trajs: &[Trajectory], duals: &Duals, gamma: f64) -> f64 {
    let total: f64 = trajs
        .iter()
        .map(|tr| {
            tr.iter()
                .enumerate()
                .map(|(t, s)| gamma.powi(t as i32) * (s.reward - duals.0.iter().zip(&s.costs).map(|(l, c)| l * c).sum::<f64>()))
                .sum::<f64>()
        })
        .sum();
    total / trajs.len().max(1) as f64
}

/// One REINFORCE step on the Lagrangian with a running per-bin baseline,
/// followed by projected dual ascent `λ ← max(0, λ + η(mean C − d))`.
pub fn update_meta_policy(
    policy: &TabularPolicy,
    trajs: &[Trajectory],
    duals: &Duals,
    cfg: &PolicyConfig,
) -> Result<(TabularPolicy, Duals), MetaError> {
    cfg.validate()?;
    if trajs.is_empty() {
        return Err(MetaError::Config("no trajectories".into()));
    }
    let mut out = policy.clone();
    let alpha = cfg.step_size(policy.updates);
    let na = policy.n_actions;
    let mut grad = vec![0.0; policy.theta.len()];
    let mut cost_sum = [0.0; N_COSTS];
    let mut count = 0usize;
    let mut baseline_obs: Vec<(usize, f64)> = Vec::new();
    for tr in trajs {
        let shaped: Vec<f64> = tr
            .iter()
            .map(|s| s.reward - duals.0.iter().zip(&s.costs).map(|(l, c)| l * c).sum::<f64>())
            .collect();
        let mut ret = 0.0;
        let mut returns = vec![0.0; tr.len()];
        for t in (0..tr.len()).rev() {
            ret = shaped[t] + cfg.gamma * ret;
            returns[t] = ret;
        }
        for (t, s) in tr.iter().enumerate() {
            if s.bin >= policy.n_bins || s.action >= na {
                return Err(MetaError::Config(format!("step ({}, {}) outside the policy table", s.bin, s.action)));
            }
            let adv = returns[t] - policy.baseline[s.bin];
            let p = policy.probs(s.bin);
            for (a, q) in p.iter().enumerate() {
                let ind = if a == s.action { 1.0 } else { 0.0 };
                grad[s.bin * na + a] += cfg.gamma.powi(t as i32) * adv * (ind - q);
            }
            baseline_obs.push((s.bin, returns[t]));
            for (c, v) in cost_sum.iter_mut().zip(&s.costs) {
                *c += v;
            }
            count += 1;
        }
    }
    let scale = alpha / trajs.len() as f64;
    for (th, g) in out.theta.iter_mut().zip(&grad) {
        *th += scale * g;
    }
    for (bin, g) in baseline_obs {
        out.baseline[bin] += cfg.baseline_rate * (g - out.baseline[bin]);
    }
    out.updates += 1;
    let mut next = *duals;
    for i in 0..N_COSTS {
        let mean = cost_sum[i] / count.max(1) as f64;
        next.0[i] = (next.0[i] + cfg.dual_scale * alpha * (mean - cfg.limits[i])).max(0.0);
    }
    Ok((out, next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;

    fn bandit_run(rewards: &[[f64; 2]], costs: &[[f64; 2]], updates: usize, seed: u64) -> (TabularPolicy, Duals) {
        let mut p = TabularPolicy::uniform(rewards.len(), 2);
        let mut d = Duals::default();
        let cfg = PolicyConfig::default();
        let mut r = rng(seed);
        for t in 0..updates {
            let bin = t % rewards.len();
            let a = p.sample(bin, &mut r);
            let step = PolicyStep {
                bin,
                action: a,
                reward: rewards[bin][a],
                costs: [costs[bin][a], 0.0, 0.0],
            };
            (p, d) = update_meta_policy(&p, &[vec![step]], &d, &cfg).unwrap();
        }
        (p, d)
    }

    #[test]
    fn zero_signal_leaves_policy_unchanged() {
        let (p, d) = bandit_run(&[[0.0, 0.0]], &[[0.0, 0.0]], 50, 1);
        assert!(p.theta.iter().all(|&v| v == 0.0));
        assert_eq!(d, Duals::default());
    }

    #[test]
    fn two_bin_bandit_finds_the_better_arm() {
        let rewards = [[1.0, 0.0], [0.2, 0.8]];
        // Exhaustive values: arm 0 in bin 0, arm 1 in bin 1.
        let best: Vec<usize> = rewards.iter().map(|r| if r[0] >= r[1] { 0 } else { 1 }).collect();
        let (p, _) = bandit_run(&rewards, &[[0.0; 2]; 2], 2000, 7);
        for (bin, &a) in best.iter().enumerate() {
            assert!(p.probs(bin)[a] > 0.9, "bin {bin}: {:?}", p.probs(bin));
        }
    }

    #[test]
    fn constrained_bandit_prefers_feasible_arm() {
        let (p, d) = bandit_run(&[[1.0, 0.5]], &[[1.0, 0.0]], 3000, 3);
        assert!(p.probs(0)[1] > 0.9, "{:?} λ={:?}", p.probs(0), d);
        assert!(d.0[0] > 0.5);
    }

    #[test]
    fn lagrangian_is_nonincreasing_in_duals() {
        let tr = vec![vec![
            PolicyStep { bin: 0, action: 0, reward: 1.0, costs: [0.5, 0.0, 2.0] },
            PolicyStep { bin: 0, action: 1, reward: 0.0, costs: [0.0, 1.0, 0.0] },
        ]];
        let mut last = f64::INFINITY;
        for l in [0.0, 0.5, 1.0, 4.0] {
            let v = lagrangian(&tr, &Duals([l, l, l]), 0.95);
            assert!(v <= last);
            last = v;
        }
    }
}
