//! Gradient fitting of every graph parameter to target node values.

use super::{Ceg, CegError};
use crate::numerics::{descend, objective, Descent, OptimizerConfig, Var};
use crate::primitives::ValueMap;

/// One training example: source values in, target values for some nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub inputs: ValueMap,
    pub targets: ValueMap,
}

/// Fits all primitive, adapter, message and projection parameters to the
/// mean squared error between final node values and the targets.
pub fn fit_ceg(g: &Ceg, examples: &[Example], steps: Option<usize>, cfg: &OptimizerConfig) -> Result<(Ceg, Descent), CegError> {
    if examples.is_empty() {
        return Err(CegError::TooFewSamples { need: 1, got: 0 });
    }
    let t = steps.unwrap_or_else(|| g.default_steps());
    if t == 0 {
        return Err(CegError::Steps);
    }
    let none = vec![None; g.nodes.len()];
    let mut inits = Vec::with_capacity(examples.len());
    let mut targets = Vec::with_capacity(examples.len());
    for ex in examples {
        inits.push(g.initial_state(&ex.inputs, &none)?);
        targets.push(g.resolve_values(&ex.targets)?);
    }
    let count: usize = targets.iter().flatten().flatten().map(Vec::len).sum();
    let scale = 1.0 / count.max(1) as f64;
    let held = vec![false; g.nodes.len()];
    let loss = objective(|theta: &[Var<'_>]| {
        let mut total = Var::constant(0.0);
        for (x0, tg) in inits.iter().zip(&targets) {
            let x0: Vec<Vec<Var<'_>>> = x0.iter().map(|v| v.iter().map(|&c| Var::constant(c)).collect()).collect();
            let (states, _, _) = g.run(theta, x0, &held, t);
            let last = states.last().expect("initial state");
            for (i, want) in tg.iter().enumerate() {
                if let Some(want) = want {
                    for (y, &w) in last[i].iter().zip(want) {
                        let d = *y - w;
                        total = total + d * d;
                    }
                }
            }
        }
        total * scale
    });
    let run = descend(&loss, &g.params(), cfg, None)?;
    let mut fitted = g.clone();
    fitted.set_params(&run.x)?;
    Ok((fitted, run))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ceg::{values, CegBuilder};
    use crate::primitives::{Layer, Primitive};
    use crate::types::{CausalType, TypeSig};

    #[test]
    fn learns_a_scaled_copy() {
        let s = TypeSig::of(&[("x", CausalType::PHYS)]);
        let lin = |id: &str, w: f64| Primitive::linear(id, Layer::Phys, s.clone(), s.clone(), &[w], &[0.0]).unwrap();
        let mut b = CegBuilder::new();
        b.node("X", lin("x", 1.0)).unwrap();
        b.node("Y", lin("y", 0.5)).unwrap();
        b.causal("X", "Y", 1.0).unwrap().output("Y").unwrap();
        let g = b.build().unwrap();
        let ex: Vec<Example> = (0..8)
            .map(|k| {
                let x = k as f64 / 4.0 - 1.0;
                Example {
                    inputs: values(&[("X", vec![x])]),
                    targets: values(&[("Y", vec![3.0 * x])]),
                }
            })
            .collect();
        let (fitted, run) = fit_ceg(&g, &ex, None, &OptimizerConfig::adam(0.05, 2000)).unwrap();
        assert!(run.final_value() < 1e-6, "{}", run.final_value());
        let y = fitted.execute(&values(&[("X", vec![0.4])]), None).unwrap();
        assert!((y.last()[1][0] - 1.2).abs() < 1e-3);
    }
}
