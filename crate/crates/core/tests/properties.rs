//! Property tests over randomly generated inputs.

use hcp::acceptance::{brute_force_compatible, closed_form_counterfactual};
use hcp::ceg::{merge, prune, random_dag, PassConfig};
use hcp::meta::{update_meta_policy, Duals, PerfCausalGraph, PerfVariable, PolicyConfig, PolicyStep, TabularPolicy, VarKind};
use hcp::numerics::{rng, Mat};
use hcp::primitives::softmax;
use hcp::routing::{fuse, FuseConfig};
use hcp::types::{is_subtype, random_type, signatures_compatible, BaseKind, CausalType, TypeSig};
use hcp::worlds::{DoMap, LinearGaussianScm};
use proptest::prelude::*;

const KINDS: [BaseKind; 4] = [BaseKind::Phys, BaseKind::State, BaseKind::Event, BaseKind::Rule];

fn any_type() -> impl Strategy<Value = CausalType> {
    (any::<u64>(), 0usize..4).prop_map(|(s, d)| random_type(&mut rng(s), d, &KINDS))
}

fn any_sig() -> impl Strategy<Value = TypeSig> {
    (any::<u64>(), 0usize..4).prop_map(|(s, n)| {
        let mut r = rng(s);
        let slots: Vec<(String, CausalType)> = (0..n).map(|i| (format!("s{i}"), random_type(&mut r, 1, &KINDS[..2]))).collect();
        TypeSig::new(slots).expect("distinct names")
    })
}

fn unit_matrix(n: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(0.0..=1.0f64, n * n).prop_map(move |v| Mat::from_vec(n, n, v).expect("square"))
}

proptest! {
    #[test]
    fn subtyping_is_reflexive(t in any_type()) {
        prop_assert!(is_subtype(&t, &t));
    }

    #[test]
    fn subtyping_is_transitive(a in any_type(), b in any_type(), c in any_type()) {
        if is_subtype(&a, &b) && is_subtype(&b, &c) {
            prop_assert!(is_subtype(&a, &c));
        }
    }

    #[test]
    fn type_text_roundtrips(t in any_type()) {
        let back: CausalType = t.to_string().parse().unwrap();
        prop_assert_eq!(back, t);
    }

    #[test]
    fn signature_checker_matches_enumeration(a in any_sig(), b in any_sig()) {
        prop_assert_eq!(signatures_compatible(&a, &b).is_some(), brute_force_compatible(&a, &b));
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0..50.0f64, 1..12)) {
        let p = softmax(&logits);
        prop_assert!(p.iter().all(|&q| q >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fusion_stays_in_box_and_never_raises_residual(
        (ws, wb, st) in (unit_matrix(5), unit_matrix(5), unit_matrix(5)),
        info in prop::collection::vec(0.0..2.0f64, 5),
        iters in 0usize..8,
    ) {
        let f = fuse(&ws, &wb, &info, &st, &FuseConfig { iters, ..FuseConfig::default() }).unwrap();
        prop_assert!(f.w.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(f.residual_trace.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(f.objective_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn perf_graph_stays_acyclic(props in prop::collection::vec((0usize..5, 0usize..5, 0.0..1.0f64), 0..40)) {
        let vars = (0..5).map(|i| PerfVariable { name: format!("v{i}"), kind: if i < 3 { VarKind::Meta } else { VarKind::Performance } }).collect();
        let mut g = PerfCausalGraph::new(vars);
        for (s, d, c) in props {
            g.propose_edge(s, d, c);
            prop_assert!(g.is_acyclic());
        }
    }

    #[test]
    fn policy_rows_stay_distributions(
        steps in prop::collection::vec((0usize..6, 0usize..7, -1.0..1.0f64, 0.0..2.0f64), 1..30),
    ) {
        let policy = TabularPolicy::uniform(6, 7);
        let traj: Vec<PolicyStep> = steps.into_iter().map(|(bin, action, reward, c)| PolicyStep { bin, action, reward, costs: [c, 0.5 * c, 0.0] }).collect();
        let (next, duals) = update_meta_policy(&policy, &[traj], &Duals::default(), &PolicyConfig::default()).unwrap();
        prop_assert!(duals.0.iter().all(|&l| l >= 0.0));
        for bin in 0..6 {
            let p = next.probs(bin);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn counterfactual_matches_closed_form(seed in any::<u64>(), n in 2usize..6, forced in any::<u8>()) {
        let w = LinearGaussianScm::random(seed, n, 0.6, (0.5, 2.0), 1.0);
        let e = w.sample(1, seed).rows.remove(0);
        let mut dm = DoMap::new();
        let mut fx = Vec::new();
        for j in 0..n {
            if forced >> j & 1 == 1 {
                dm.insert(w.names[j].clone(), j as f64 - 1.0);
                fx.push((j, j as f64 - 1.0));
            }
        }
        let cf = w.counterfactual(&e, &dm).unwrap();
        let oracle = closed_form_counterfactual(&w, &e, &fx);
        for (a, b) in cf.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn passes_keep_graphs_acyclic_with_same_outputs(seed in any::<u64>()) {
        let g = random_dag(seed);
        let cfg = PassConfig { seed, ..PassConfig::default() };
        let probes = cfg.sample_probes(&g);
        let p = prune(&g, &cfg, &probes).unwrap();
        let m = merge(&p.graph, cfg.delta, &probes).unwrap();
        for h in [&p.graph, &m.graph] {
            prop_assert!(h.longest_path().is_some());
            prop_assert_eq!(h.output_ids(), g.output_ids());
        }
        prop_assert!(m.graph.nodes.len() <= g.nodes.len());
    }
}
