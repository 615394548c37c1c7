//! Parametric executor families.
//!
//! Each family reads a flat input vector and writes a flat output vector.
//! Parameters live outside the executor so the same code runs on `f64` and
//! on tape variables.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::numerics::{Rng, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Nonlinearity {
    Identity,
    Tanh,
    Relu,
}

impl Nonlinearity {
    fn apply<S: Scalar>(self, v: S) -> S {
        match self {
            Nonlinearity::Identity => v,
            Nonlinearity::Tanh => v.tanh(),
            Nonlinearity::Relu => v.relu(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RuleOp {
    And,
    Or,
    Implies,
    Not,
}

/// Gate offset: a freshly initialized gate is nearly fully open.
const GATE_OFFSET: f64 = 6.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Executor {
    /// Fully connected layers; the nonlinearity applies to hidden layers only.
    AffineNet {
        widths: Vec<usize>,
        nonlinearity: Nonlinearity,
    },
    /// Input is a state weight vector followed by symbol features; output is
    /// the next-state distribution under softmax-scored transitions.
    Fsm { states: usize, symbols: usize },
    /// `h_t = A h_{t-1} + B e_t` over `horizon` steps, output `C h + c`.
    SeqPattern {
        horizon: usize,
        event_dim: usize,
        hidden: usize,
        out_dim: usize,
    },
    /// Soft logic over truth values in [0,1].
    SoftRule { op: RuleOp, arity: usize },
    Constant { value: Vec<f64> },
}

impl Executor {
    pub fn family(&self) -> &'static str {
        match self {
            Executor::AffineNet { .. } => "affine_net",
            Executor::Fsm { .. } => "fsm",
            Executor::SeqPattern { .. } => "seq_pattern",
            Executor::SoftRule { .. } => "soft_rule",
            Executor::Constant { .. } => "constant",
        }
    }

    pub fn in_dim(&self) -> Option<usize> {
        match self {
            Executor::AffineNet { widths, .. } => widths.first().copied(),
            Executor::Fsm { states, symbols } => Some(states + symbols),
            Executor::SeqPattern {
                horizon, event_dim, ..
            } => Some(horizon * event_dim),
            Executor::SoftRule { op, arity } => Some(match op {
                RuleOp::Implies => 2,
                RuleOp::Not => 1,
                _ => *arity,
            }),
            // Constants accept any input.
            Executor::Constant { .. } => None,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Executor::AffineNet { widths, .. } => *widths.last().unwrap_or(&0),
            Executor::Fsm { states, .. } => *states,
            Executor::SeqPattern { out_dim, .. } => *out_dim,
            Executor::SoftRule { .. } => 1,
            Executor::Constant { value } => value.len(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Executor::AffineNet { widths, .. } => widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum(),
            Executor::Fsm { states, symbols } => states * states + states * symbols,
            Executor::SeqPattern {
                event_dim,
                hidden,
                out_dim,
                ..
            } => hidden * hidden + hidden * event_dim + out_dim * hidden + out_dim,
            Executor::SoftRule { op, arity } => match op {
                RuleOp::And | RuleOp::Or => *arity,
                RuleOp::Implies => 1,
                RuleOp::Not => 0,
            },
            Executor::Constant { .. } => 0,
        }
    }

    /// Whether the output is in [0,1] whenever unit-typed inputs are.
    pub fn bounded_output(&self) -> bool {
        matches!(self, Executor::Fsm { .. } | Executor::SoftRule { .. })
    }

    /// True when the derivative has kinks (ReLU hidden layers).
    pub fn has_kinks(&self) -> bool {
        matches!(
            self,
            Executor::AffineNet {
                nonlinearity: Nonlinearity::Relu,
                ..
            }
        )
    }

    pub fn init_params(&self, rng: &mut Rng) -> Vec<f64> {
        (0..self.n_params()).map(|_| rng.random_range(-0.1..=0.1)).collect()
    }

    /// Parameters of an AffineNet equal to the identity map (hidden layers of
    /// equal width, so only square nets qualify).
    pub fn identity_params(dim: usize, layers: usize) -> Vec<f64> {
        let mut p = Vec::new();
        for _ in 0..layers {
            for i in 0..dim {
                for j in 0..dim {
                    p.push(if i == j { 1.0 } else { 0.0 });
                }
            }
            p.extend(std::iter::repeat_n(0.0, dim));
        }
        p
    }

    pub fn forward<S: Scalar>(&self, params: &[S], x: &[S]) -> Vec<S> {
        match self {
            Executor::AffineNet {
                widths,
                nonlinearity,
            } => {
                let mut h: Vec<S> = x.to_vec();
                let mut off = 0;
                let last = widths.len() - 2;
                for (l, w) in widths.windows(2).enumerate() {
                    let (n_in, n_out) = (w[0], w[1]);
                    let wm = &params[off..off + n_in * n_out];
                    let b = &params[off + n_in * n_out..off + n_in * n_out + n_out];
                    off += n_in * n_out + n_out;
                    h = (0..n_out)
                        .map(|o| {
                            let mut acc = b[o];
                            for i in 0..n_in {
                                acc = acc + wm[o * n_in + i] * h[i];
                            }
                            if l < last {
                                nonlinearity.apply(acc)
                            } else {
                                acc
                            }
                        })
                        .collect();
                }
                h
            }
            Executor::Fsm { states, symbols } => {
                let (s, m) = (*states, *symbols);
                let t = &params[..s * s];
                let v = &params[s * s..];
                let state = &x[..s];
                let sym = &x[s..s + m];
                // Symbol-dependent bias on each target state.
                let sym_bias: Vec<S> = (0..s)
                    .map(|j| (0..m).fold(S::zero(), |acc, k| acc + v[j * m + k] * sym[k]))
                    .collect();
                let mut total = S::cst(1e-9);
                for &w in state {
                    total = total + w;
                }
                let mut out = vec![S::zero(); s];
                for i in 0..s {
                    let logits: Vec<S> = (0..s).map(|j| t[i * s + j] + sym_bias[j]).collect();
                    let probs = softmax(&logits);
                    for j in 0..s {
                        out[j] = out[j] + state[i] * probs[j];
                    }
                }
                out.into_iter().map(|v| v / total).collect()
            }
            Executor::SeqPattern {
                horizon,
                event_dim,
                hidden,
                out_dim,
            } => {
                let (e, d, o) = (*event_dim, *hidden, *out_dim);
                let a = &params[..d * d];
                let b = &params[d * d..d * d + d * e];
                let c = &params[d * d + d * e..d * d + d * e + o * d];
                let c0 = &params[d * d + d * e + o * d..];
                let mut h = vec![S::zero(); d];
                for t in 0..*horizon {
                    let ev = &x[t * e..(t + 1) * e];
                    h = (0..d)
                        .map(|i| {
                            let mut acc = S::zero();
                            for j in 0..d {
                                acc = acc + a[i * d + j] * h[j];
                            }
                            for k in 0..e {
                                acc = acc + b[i * e + k] * ev[k];
                            }
                            acc
                        })
                        .collect();
                }
                (0..o)
                    .map(|r| (0..d).fold(c0[r], |acc, j| acc + c[r * d + j] * h[j]))
                    .collect()
            }
            Executor::SoftRule { op, .. } => {
                let gate = |k: usize| (params[k] + GATE_OFFSET).sigmoid();
                let v = match op {
                    RuleOp::And => x
                        .iter()
                        .enumerate()
                        .fold(S::one(), |acc, (k, &xi)| acc * (S::one() - gate(k) * (S::one() - xi))),
                    RuleOp::Or => {
                        let none = x
                            .iter()
                            .enumerate()
                            .fold(S::one(), |acc, (k, &xi)| acc * (S::one() - gate(k) * xi));
                        S::one() - none
                    }
                    RuleOp::Implies => S::one() - gate(0) * x[0] * (S::one() - x[1]),
                    RuleOp::Not => S::one() - x[0],
                };
                vec![v]
            }
            Executor::Constant { value } => value.iter().map(|&v| S::cst(v)).collect(),
        }
    }
}

pub fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let m = logits.iter().map(Scalar::value).fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<S> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z = e.iter().fold(S::zero(), |a, &b| a + b);
    e.into_iter().map(|v| v / z).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng;

    #[test]
    fn affine_identity_echoes() {
        let ex = Executor::AffineNet {
            widths: vec![3, 3, 3],
            nonlinearity: Nonlinearity::Identity,
        };
        let p = Executor::identity_params(3, 2);
        assert_eq!(p.len(), ex.n_params());
        assert_eq!(ex.forward(&p, &[1.0, -2.0, 0.5]), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn soft_and_of_true_inputs_is_one() {
        let ex = Executor::SoftRule {
            op: RuleOp::And,
            arity: 2,
        };
        let p = ex.init_params(&mut rng(1));
        assert_eq!(ex.forward(&p, &[1.0, 1.0]), vec![1.0]);
        assert!(ex.forward(&p, &[1.0, 0.0])[0] < 0.01);
    }

    #[test]
    fn fsm_output_is_a_distribution() {
        let ex = Executor::Fsm { states: 3, symbols: 2 };
        let p = ex.init_params(&mut rng(2));
        let y = ex.forward(&p, &[0.2, 0.5, 0.3, 1.0, -1.0]);
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn seq_pattern_is_linear_in_input() {
        let ex = Executor::SeqPattern {
            horizon: 3,
            event_dim: 2,
            hidden: 2,
            out_dim: 1,
        };
        let p = ex.init_params(&mut rng(3));
        let x1 = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let x2: Vec<f64> = x1.iter().map(|v| v * 2.0).collect();
        let y0 = ex.forward(&p, &[0.0; 6])[0];
        let y1 = ex.forward(&p, &x1)[0] - y0;
        let y2 = ex.forward(&p, &x2)[0] - y0;
        assert!((y2 - 2.0 * y1).abs() < 1e-12);
    }
}
