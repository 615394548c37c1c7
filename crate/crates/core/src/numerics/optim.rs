//! Projected gradient descent and Adam.

use serde::{Deserialize, Serialize};

use super::ad::{value_and_grad, Var};
use super::{Mat, NumericsError};

/// Consecutive objective increases tolerated on a convex problem.
pub const DIVERGENCE_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Method {
    GradientDescent,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Method {
    pub fn adam() -> Self {
        Method::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub step: f64,
    pub iters: usize,
    pub mu: Option<f64>,
    pub smoothness: Option<f64>,
    /// Stop once the gradient norm falls below this.
    pub tol: f64,
    /// Enables the divergence check.
    pub convex: bool,
    pub method: Method,
    /// Keep every iterate in [`Descent::iterates`].
    #[serde(default)]
    pub record_iterates: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            step: 0.01,
            iters: 100,
            mu: None,
            smoothness: None,
            tol: 1e-12,
            convex: false,
            method: Method::GradientDescent,
            record_iterates: false,
        }
    }
}

impl OptimizerConfig {
    pub fn gd(step: f64, iters: usize) -> Self {
        OptimizerConfig {
            step,
            iters,
            ..Default::default()
        }
    }

    pub fn adam(step: f64, iters: usize) -> Self {
        OptimizerConfig {
            step,
            iters,
            method: Method::adam(),
            ..Default::default()
        }
    }

    /// Gradient descent with η = 1/L on a μ-strongly convex, L-smooth problem.
    pub fn strongly_convex(mu: f64, smoothness: f64, iters: usize) -> Self {
        OptimizerConfig {
            step: 1.0 / smoothness,
            iters,
            mu: Some(mu),
            smoothness: Some(smoothness),
            tol: 1e-300,
            convex: true,
            method: Method::GradientDescent,
            record_iterates: false,
        }
    }

    pub fn validate(&self) -> Result<(), NumericsError> {
        let bad = |m: &str| Err(NumericsError::Config(m.to_string()));
        if !(self.step > 0.0 && self.step.is_finite()) {
            return bad("step size must be positive and finite");
        }
        if !(self.tol > 0.0) {
            return bad("tolerance must be positive");
        }
        if let Some(mu) = self.mu {
            if !(mu >= 0.0) {
                return bad("mu must be nonnegative");
            }
        }
        if let Some(l) = self.smoothness {
            if !(l > 0.0) {
                return bad("smoothness must be positive");
            }
            if let Some(mu) = self.mu {
                if mu > l {
                    return bad("mu must not exceed smoothness");
                }
            }
            if self.method == Method::GradientDescent && self.step > 1.0 / l * (1.0 + 1e-12) {
                return bad("step size exceeds 1/L");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Descent {
    pub x: Vec<f64>,
    /// Objective at the start and after every step.
    pub trace: Vec<f64>,
    /// Iterates `x_0, x_1, ...` when requested.
    pub iterates: Vec<Vec<f64>>,
    pub converged: bool,
}

impl Descent {
    pub fn final_value(&self) -> f64 {
        *self.trace.last().expect("trace holds the initial value")
    }

    pub fn is_monotone(&self) -> bool {
        self.trace.windows(2).all(|w| w[1] <= w[0])
    }
}

pub fn project_box(w: &Mat, lo: f64, hi: f64) -> Result<Mat, NumericsError> {
    if !(lo <= hi) {
        return Err(NumericsError::InvalidBox { lo, hi });
    }
    Ok(w.map(|v| v.clamp(lo, hi)))
}

/// Minimizes `objective` from `x0`, applying `projection` after every step.
pub fn descend<F>(
    objective: &F,
    x0: &[f64],
    cfg: &OptimizerConfig,
    projection: Option<&dyn Fn(&mut [f64])>,
) -> Result<Descent, NumericsError>
where
    F: for<'t> Fn(&[Var<'t>]) -> Var<'t> + ?Sized,
{
    cfg.validate()?;
    let mut x = x0.to_vec();
    if let Some(p) = projection {
        p(&mut x);
    }
    let (mut fx, mut g) = value_and_grad(objective, &x)?;
    let mut trace = vec![fx];
    let mut iterates = Vec::new();
    if cfg.record_iterates {
        iterates.push(x.clone());
    }
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut increases = 0;
    let mut converged = false;
    for t in 1..=cfg.iters {
        let gnorm = g.iter().map(|a| a * a).sum::<f64>().sqrt();
        if gnorm < cfg.tol {
            converged = true;
            break;
        }
        match cfg.method {
            Method::GradientDescent => {
                for (xi, gi) in x.iter_mut().zip(&g) {
                    *xi -= cfg.step * gi;
                }
            }
            Method::Adam { beta1, beta2, eps } => {
                let c1 = 1.0 - beta1.powi(t as i32);
                let c2 = 1.0 - beta2.powi(t as i32);
                for i in 0..x.len() {
                    m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                    v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                    x[i] -= cfg.step * (m[i] / c1) / ((v[i] / c2).sqrt() + eps);
                }
            }
        }
        if let Some(p) = projection {
            p(&mut x);
        }
        let (f_new, g_new) = value_and_grad(objective, &x)?;
        if cfg.convex && f_new > fx {
            increases += 1;
            if increases >= DIVERGENCE_WINDOW {
                return Err(NumericsError::Diverged {
                    steps: increases,
                    value: f_new,
                });
            }
        } else {
            increases = 0;
        }
        fx = f_new;
        g = g_new;
        trace.push(fx);
        if cfg.record_iterates {
            iterates.push(x.clone());
        }
    }
    Ok(Descent {
        x,
        trace,
        iterates,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{objective, Scalar};

    fn half_norm<'t>(x: &[Var<'t>]) -> Var<'t> {
        x.iter().fold(Var::constant(0.0), |a, &v| a + v * v * 0.5)
    }

    #[test]
    fn exact_step_converges_at_once() {
        let mut cfg = OptimizerConfig::strongly_convex(1.0, 1.0, 1);
        cfg.step = 1.0;
        let d = descend(&half_norm, &[1.0, 1.0, 1.0], &cfg, None).unwrap();
        assert_eq!(d.x, vec![0.0; 3]);
        assert_eq!(d.final_value(), 0.0);
    }

    #[test]
    fn linear_rate_on_diagonal_quadratic() {
        let h = [0.5, 1.0, 2.0];
        let f = objective(|x| {
            x.iter()
                .zip(h)
                .fold(Var::constant(0.0), |a, (&v, hi)| a + (v - 1.0).powi(2) * (0.5 * hi))
        });
        let cfg = OptimizerConfig::strongly_convex(0.5, 2.0, 40);
        let d = descend(&f, &[3.0, -2.0, 5.0], &cfg, None).unwrap();
        for w in d.trace.windows(2) {
            assert!(w[1] <= 0.75 * w[0] * (1.0 + 1e-6));
        }
    }

    #[test]
    fn box_projection_keeps_iterates_inside() {
        let f = objective(|x| { (x[0] - 3.0).powi(2) + (x[1] + 2.0).powi(2) });
        let proj = |x: &mut [f64]| x.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        let d = descend(&f, &[0.5, 0.5], &OptimizerConfig::gd(0.1, 50), Some(&proj)).unwrap();
        assert!(d.x.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!((d.x[0] - 1.0).abs() < 1e-9 && d.x[1].abs() < 1e-9);
    }

    #[test]
    fn divergence_reported_on_convex_flag() {
        let mut cfg = OptimizerConfig::gd(3.0, 50);
        cfg.convex = true;
        let err = descend(&half_norm, &[1.0], &cfg, None).unwrap_err();
        assert!(matches!(err, NumericsError::Diverged { .. }));
    }

    #[test]
    fn config_rejects_step_above_inverse_smoothness() {
        let mut cfg = OptimizerConfig::strongly_convex(0.5, 2.0, 10);
        cfg.step = 1.0;
        assert!(cfg.validate().is_err());
        cfg.mu = Some(3.0);
        cfg.step = 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn project_box_clamps_and_is_idempotent() {
        let w = Mat::from_rows(&[vec![1.3, -0.2], vec![0.5, 0.0]]);
        let p = project_box(&w, 0.0, 1.0).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
        assert_eq!(p[(0, 1)], 0.0);
        assert_eq!(project_box(&p, 0.0, 1.0).unwrap(), p);
        assert!(project_box(&w, 1.0, 0.0).is_err());
    }

    #[test]
    fn adam_fits_simple_minimum() {
        let f = objective(|x| { (x[0] - 0.3).powi(2) });
        let d = descend(&f, &[2.0], &OptimizerConfig::adam(0.05, 2000), None).unwrap();
        assert!((d.x[0] - 0.3).abs() < 1e-3);
        assert!(Scalar::value(&d.final_value()) < 1e-6);
    }
}
