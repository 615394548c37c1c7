//! The 32-primitive seed library, eight per layer.

use super::{make_primitive, Executor, Layer, Nonlinearity, Predicate, Primitive, PrimitiveSpec, RuleOp};
use crate::numerics::rng;
use crate::types::TypeSig;

pub const LIBRARY_SIZE: usize = 32;

fn sig(s: &str) -> TypeSig {
    s.parse().expect("library signature")
}

fn net(widths: &[usize], nl: Nonlinearity) -> Executor {
    Executor::AffineNet {
        widths: widths.to_vec(),
        nonlinearity: nl,
    }
}

fn above(slot: &str, index: usize, value: f64) -> Predicate {
    Predicate::Threshold {
        slot: slot.into(),
        index,
        value,
        above: true,
    }
}

fn specs() -> Vec<PrimitiveSpec> {
    use Layer::*;
    use Nonlinearity::*;
    let p = PrimitiveSpec::new;
    vec![
        // Physical dynamics.
        p("phys_scale", Phys, sig("(x:Phys)"), sig("(y:Phys)"), net(&[1, 1], Identity)),
        p("phys_damp", Phys, sig("(x:Phys)"), sig("(y:Phys)"), net(&[1, 4, 1], Tanh)),
        p("phys_spring", Phys, sig("(q:Tensor[Phys;2])"), sig("(q:Tensor[Phys;2])"), net(&[2, 2], Identity)),
        p("phys_drag", Phys, sig("(v:Tensor[Phys;2])"), sig("(f:Tensor[Phys;2])"), net(&[2, 4, 2], Tanh))
            .with_conditions(vec![above("v", 0, -0.5)]),
        p("phys_gravity", Phys, sig("(p:Tensor[Phys;3])"), sig("(p:Tensor[Phys;3])"), net(&[3, 3], Identity)),
        p("phys_energy", Phys, sig("(v:Tensor[Phys;2])"), sig("(e:Phys)"), net(&[2, 3, 1], Tanh)),
        p("phys_lift", Phys, sig("(x:Phys)"), sig("(v:Tensor[Phys;2])"), net(&[1, 2], Identity)),
        p("phys_contact", Phys, sig("(p:Tensor[Phys;3])"), sig("(c:State)"), net(&[3, 1], Identity))
            .with_conditions(vec![above("p", 2, 0.0)]),
        // Object-state transitions.
        p("func_fsm_a", Func, sig("(s:Tensor[State;3],e:Tensor[Event;2])"), sig("(s:Tensor[State;3])"), Executor::Fsm { states: 3, symbols: 2 }),
        p("func_fsm_b", Func, sig("(s:Tensor[State;3],e:Tensor[Event;2])"), sig("(s:Tensor[State;3])"), Executor::Fsm { states: 3, symbols: 2 })
            .with_conditions(vec![above("s", 0, 0.3)]),
        p("func_detect", Func, sig("(p:Tensor[Phys;3])"), sig("(s:Tensor[State;3])"), net(&[3, 3], Identity)),
        p("func_state_of", Func, sig("(x:Phys)"), sig("(s:State)"), net(&[1, 1], Identity)),
        p("func_spread", Func, sig("(s:State)"), sig("(s:Tensor[State;3])"), net(&[1, 3], Identity)),
        p("func_toggle", Func, sig("(s:Tensor[State;3])"), sig("(s:Tensor[State;3])"), net(&[3, 3], Tanh))
            .with_conditions(vec![above("s", 1, 0.5)]),
        p("func_emit", Func, sig("(s:Tensor[State;3])"), sig("(e:Tensor[Event;2])"), net(&[3, 2], Identity)),
        p("func_readout", Func, sig("(s:State)"), sig("(y:Phys)"), net(&[1, 1], Identity)),
        // Event schemas.
        p("event_pattern_a", Event, sig("(w:Tensor[Event;4,2])"), sig("(e:Event)"), Executor::SeqPattern { horizon: 4, event_dim: 2, hidden: 3, out_dim: 1 }),
        p("event_pattern_b", Event, sig("(w:Tensor[Event;4,2])"), sig("(e:Tensor[Event;2])"), Executor::SeqPattern { horizon: 4, event_dim: 2, hidden: 3, out_dim: 2 }),
        p("event_pattern_c", Event, sig("(w:Tensor[Event;4,2])"), sig("(r:Rule)"), Executor::SeqPattern { horizon: 4, event_dim: 2, hidden: 2, out_dim: 1 })
            .with_conditions(vec![above("w", 0, 0.0)]),
        p("event_onset", Event, sig("(e:Tensor[Event;2])"), sig("(e:Event)"), net(&[2, 1], Identity)),
        p("event_window", Event, sig("(e:Event)"), sig("(w:Tensor[Event;4,2])"), net(&[1, 8], Identity)),
        p("event_to_rule", Event, sig("(e:Event)"), sig("(r:Rule)"), net(&[1, 1], Identity)),
        p("event_pair", Event, sig("(e:Tensor[Event;2])"), sig("(e:Tensor[Event;2])"), net(&[2, 3, 2], Tanh))
            .with_conditions(vec![above("e", 1, 0.0)]),
        p("event_from_state", Event, sig("(s:Tensor[State;3])"), sig("(e:Event)"), net(&[3, 1], Identity)),
        // Soft rules.
        p("rule_and2", Rule, sig("(a:Rule,b:Rule)"), sig("(r:Rule)"), Executor::SoftRule { op: RuleOp::And, arity: 2 }),
        p("rule_and3", Rule, sig("(a:Rule,b:Rule,c:Rule)"), sig("(r:Rule)"), Executor::SoftRule { op: RuleOp::And, arity: 3 }),
        p("rule_or2", Rule, sig("(a:Rule,b:Rule)"), sig("(r:Rule)"), Executor::SoftRule { op: RuleOp::Or, arity: 2 })
            .with_conditions(vec![above("a", 0, 0.5)]),
        p("rule_implies", Rule, sig("(a:Rule,b:Rule)"), sig("(r:Rule)"), Executor::SoftRule { op: RuleOp::Implies, arity: 2 }),
        p("rule_not", Rule, sig("(a:Rule)"), sig("(r:Rule)"), Executor::SoftRule { op: RuleOp::Not, arity: 1 }),
        p("rule_gate", Rule, sig("(a:Rule)"), sig("(r:Rule)"), net(&[1, 1], Identity))
            .with_conditions(vec![above("a", 0, 0.5)]),
        p("rule_to_state", Rule, sig("(r:Rule)"), sig("(s:State)"), net(&[1, 1], Identity)),
        p("rule_state_check", Rule, sig("(s:State)"), sig("(r:Rule)"), net(&[1, 2, 1], Tanh)),
    ]
}

/// The seed library with parameters drawn from `seed`.
pub fn seed_library(seed: u64) -> Vec<Primitive> {
    let mut r = rng(seed);
    specs()
        .into_iter()
        .map(|s| make_primitive(s, &mut r).expect("library specs are well formed"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_has_eight_per_layer() {
        let lib = seed_library(0);
        assert_eq!(lib.len(), LIBRARY_SIZE);
        for layer in Layer::ALL {
            assert_eq!(lib.iter().filter(|p| p.layer == layer).count(), 8);
        }
        let mut ids: Vec<&str> = lib.iter().map(|p| p.id.as_str()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), LIBRARY_SIZE);
    }
}
