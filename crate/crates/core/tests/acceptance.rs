//! One test per acceptance criterion; each prints its result line.

use hcp::acceptance::run_one;

fn criterion(id: u8) {
    let r = run_one(id, 0).expect("known criterion");
    println!("{}", r.line());
    assert!(r.pass, "{}", r.line());
}

#[test]
fn criterion_01_type_safety_fuzz() {
    criterion(1);
}

#[test]
fn criterion_02_algebra_axioms() {
    criterion(2);
}

#[test]
fn criterion_03_routing_convergence() {
    criterion(3);
}

#[test]
fn criterion_04_complexity_scaling() {
    criterion(4);
}

#[test]
fn criterion_05_pass_equivalence_bound() {
    criterion(5);
}

#[test]
fn criterion_06_desk_scale_approximation() {
    criterion(6);
}

#[test]
fn criterion_07_conservation_fusion() {
    criterion(7);
}

#[test]
fn criterion_08_structure_recovery() {
    criterion(8);
}

#[test]
fn criterion_09_counterfactual_oracle() {
    criterion(9);
}

#[test]
fn criterion_10_meta_evolution_direction() {
    criterion(10);
}

#[test]
fn criterion_11_change_detection() {
    criterion(11);
}

#[test]
fn criterion_12_gradient_integrity() {
    criterion(12);
}

#[test]
fn criterion_13_compositional_generalization() {
    criterion(13);
}
