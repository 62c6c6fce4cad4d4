use rand::SeedableRng;

use super::*;
use crate::autodiff::grad_check_params;
use crate::gnn::LayerKind;
use crate::molgraph::is_isomorphic;
use crate::smiles::{parse_smiles, round_trips, write_smiles};

fn policy(kind: LayerKind, edge: bool, seed: u64) -> (GcpnPolicy, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gnn = GnnConfig::new(kind, 16).with_edge_features(edge);
    let p = GcpnPolicy::new(GcpnConfig::new(gnn), ScaffoldSet::single_atoms(), &mut store, &mut rng).unwrap();
    (p, store)
}

fn zero_heads<T: Scalar>(store: &mut ParamStore<T>) {
    for p in store.iter_mut() {
        if p.name.starts_with("gcpn.f_") {
            p.value.fill(T::zero());
        }
    }
}

fn g(s: &str) -> MolecularGraph {
    parse_smiles(s).unwrap()
}

fn two_methanes() -> MolecularGraph {
    let mut m = g("C");
    m.append_disjoint(&g("C")).unwrap();
    m
}

#[test]
fn single_node_first_distribution_is_certain() {
    let (p, store) = policy(LayerKind::Gin, false, 1);
    let tape = Tape::new();
    let f = Forward::eval(&tape, &store);
    let graph = g("C");
    let dist = p.policy_distribution(&f, &graph).unwrap();
    assert_eq!(dist.first_log_probs().len(), 1);
    assert!(dist.first_log_probs()[0].abs() < 1e-6);
}

#[test]
fn zero_weight_heads_are_uniform() {
    let (p, mut store) = policy(LayerKind::Rgcn, true, 2);
    zero_heads(&mut store);
    let tape = Tape::new();
    let f = Forward::eval(&tape, &store);
    let graph = g("CC(O)N");
    let dist = p.policy_distribution(&f, &graph).unwrap();
    assert!((dist.stop_prob() - 0.5).abs() < 1e-6);
    for &lp in dist.first_log_probs() {
        assert!((lp.exp() - 0.25).abs() < 1e-6);
    }
    let second = dist.second_log_probs(1).unwrap();
    assert_eq!(second.len(), 3 + 9);
    for &lp in second.iter() {
        assert!((lp.exp() - 1.0 / 12.0).abs() < 1e-6);
    }
    for &lp in dist.bond_log_probs(1, 2).unwrap().iter() {
        assert!((lp.exp() - 1.0 / 3.0).abs() < 1e-6);
    }
}

#[test]
fn joint_log_prob_is_sum_of_components_and_matches_batch() {
    let (p, store) = policy(LayerKind::Gcn, true, 3);
    let graph = g("C1CC1O");
    let tape = Tape::new();
    let f = Forward::eval(&tape, &store);
    let dist = p.policy_distribution(&f, &graph).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut actions = Vec::new();
    for _ in 0..20 {
        let (a, lp) = dist.sample(&mut rng).unwrap();
        assert!((dist.log_prob(&a).unwrap() - lp).abs() < 1e-9);
        if !a.stop {
            let manual = dist.first_log_probs()[a.first]
                + dist.second_log_probs(a.first).unwrap()[second_position(a.first, a.second)]
                + dist.bond_log_probs(a.first, a.second).unwrap()[a.bond.index()]
                + (1.0 - dist.stop_prob()).ln();
            assert!((manual - lp).abs() < 1e-5);
        }
        actions.push((a, lp));
    }
    let tape2 = Tape::new();
    let f2 = Forward::eval(&tape2, &store);
    let states = vec![GraphInput::from(&graph); actions.len()];
    let acts: Vec<_> = actions.iter().map(|x| x.0).collect();
    let scores = p.evaluate_actions(&f2, &states, &acts).unwrap();
    let lps = tape2.value(scores.log_probs).clone();
    for (k, (_, lp)) in actions.iter().enumerate() {
        assert!((f64::from(lps.get(k, 0)) - lp).abs() < 1e-5);
    }
}

#[test]
fn apply_action_examples() {
    let s = ScaffoldSet::single_atoms();
    let mut state = GenerationState::seeded(AtomType::C, 48);
    assert_eq!(apply_action(&mut state, &GcpnAction::stop(), &s, 48), ActionOutcome::Stopped);
    assert!(state.done);
    assert_eq!(state.graph.num_nodes(), 1);

    let mut state = GenerationState::seeded(AtomType::C, 48);
    let a = GcpnAction::add(0, 1 + s.single_atom(AtomType::C), BondType::Single);
    assert_eq!(apply_action(&mut state, &a, &s, 48), ActionOutcome::Applied);
    assert_eq!(write_smiles(&state.graph).unwrap(), "CC");

    // Neopentane centre already has 4 bonds.
    let mut state = GenerationState {
        graph: g("CC(C)(C)C"),
        step: 0,
        done: false,
        penalized: false,
    };
    let bad = GcpnAction::add(1, 5, BondType::Single);
    let draws = apply_with_budget(&mut state, &s, 48, 0, || Ok::<_, GenError>((bad, -1.0))).unwrap();
    assert_eq!(draws.len(), 1);
    assert!(draws[0].2);
    assert!(state.done && state.penalized);
    assert_eq!(state.graph.num_nodes(), 5);

    // Duplicate pair and self loop are rejected.
    let mut state = GenerationState::seeded(AtomType::C, 48);
    apply_action(&mut state, &a, &s, 48);
    assert_eq!(apply_action(&mut state, &GcpnAction::add(0, 1, BondType::Single), &s, 48), ActionOutcome::Rejected);
    assert_eq!(apply_action(&mut state, &GcpnAction::add(0, 0, BondType::Single), &s, 48), ActionOutcome::Rejected);
    // Size cap.
    let mut state = GenerationState::seeded(AtomType::C, 2);
    assert_eq!(apply_action(&mut state, &a, &s, 2), ActionOutcome::Applied);
    assert!(state.done);
}

#[test]
fn scaffold_fragments_are_appended() {
    let frags = ScaffoldSet::parse_fragments("# rings\nC1CC1\n\nC1=CC=CC=C1\n").unwrap();
    let s = ScaffoldSet::with_fragments(frags).unwrap();
    assert_eq!(s.len(), 11);
    assert_eq!(s.total_nodes(), 9 + 3 + 6);
    assert_eq!(s.locate(9), Some((9, 0)));
    assert_eq!(s.locate(13), Some((10, 1)));
    assert_eq!(s.locate(18), None);
    let mut state = GenerationState::seeded(AtomType::N, 48);
    assert_eq!(apply_action(&mut state, &GcpnAction::add(0, 1 + 10, BondType::Single), &s, 48), ActionOutcome::Applied);
    assert_eq!(state.graph.num_nodes(), 4);
    assert_eq!(state.graph.ring_count(), 1);
    assert!(ScaffoldSet::with_fragments(vec![two_methanes()]).is_err());
}

#[test]
fn decomposition_replays_to_isomorphic_graph() {
    let s = ScaffoldSet::single_atoms();
    for smi in ["C", "CCO", "C1=CC=CC=C1", "C1CC2CCC1C2", "CC(=O)NC1=CC=C(O)C=C1", "N#CC1=CC=CN1"] {
        let mol = g(smi);
        let d = bfs_decomposition(&mol, &s, 48).unwrap();
        assert_eq!(d.states.len(), d.actions.len());
        assert!(d.actions.last().unwrap().stop);
        assert_eq!(d.actions.len(), mol.num_edges() + 1);
        let rebuilt = replay(d.seed, &d.actions, &s, 48).unwrap();
        assert!(is_isomorphic(&rebuilt, &mol).unwrap(), "{smi}");
    }
    let single = bfs_decomposition(&g("O"), &s, 48).unwrap();
    assert_eq!(single.actions, vec![GcpnAction::stop()]);
    assert!(matches!(bfs_decomposition(&two_methanes(), &s, 48), Err(GenError::Disconnected)));
}

#[test]
fn forced_stop_gives_single_atoms() {
    let (p, mut store) = policy(LayerKind::Gin, false, 4);
    zero_heads(&mut store);
    let bias = store.find("gcpn.f_stop.1.b").unwrap();
    store.set_value(bias, Tensor::scalar(60.0));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..10 {
        let traj = p.rollout(&store, &mut rng).unwrap();
        assert_eq!(traj.graph.num_nodes(), 1);
        assert_eq!(traj.steps.len(), 1);
        assert!(traj.steps[0].action.stop);
    }
}

#[test]
fn rollouts_are_valid_bounded_and_deterministic() {
    for kind in [LayerKind::Rgcn, LayerKind::GsnV, LayerKind::Gearnet] {
        let (mut p, store) = policy(kind, true, 5);
        p.config.max_size = 12;
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            p.rollout(&store, &mut rng).unwrap()
        };
        for seed in 0..15 {
            let traj = run(seed);
            assert!(traj.graph.num_nodes() <= 12);
            assert!(check_valence(&traj.graph).is_empty());
            assert!(round_trips(&traj.graph));
            assert_eq!(traj, run(seed));
        }
    }
}

#[test]
fn action_log_probs_pass_grad_check() {
    let mut store = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let gnn = GnnConfig::new(LayerKind::Gin, 4).with_layers(2).with_edge_features(true);
    let p = GcpnPolicy::new(GcpnConfig::new(gnn), ScaffoldSet::single_atoms(), &mut store, &mut rng).unwrap();
    let d = bfs_decomposition(&g("CC(=O)O"), &p.scaffolds, 48).unwrap();
    let err = grad_check_params(
        &store,
        |tape, s| {
            let f = Forward::new(tape, s, true);
            Ok(p.pretrain_loss(&f, &[&d]).map_err(|e| match e {
                GenError::Gnn(crate::gnn::GnnError::Autodiff(a)) => a,
                other => panic!("{other}"),
            })?.0)
        },
        1e-6,
    )
    .unwrap();
    assert!(err < 1e-3, "{err}");
}

#[test]
fn pretraining_reduces_nll() {
    let corpus: Vec<MolecularGraph> = ["CCO", "CCN", "CCCO", "CC(C)O", "CCOC", "OCCO", "NCCO", "CCCC", "CC=O", "C1CC1"]
        .iter()
        .map(|s| g(s))
        .collect();
    let (p, mut store) = policy(LayerKind::Gin, true, 11);
    p.set_seed_marginal(&mut store, &corpus);
    let decomps: Vec<Decomposition> = corpus.iter().map(|m| p.prepare(m).unwrap()).collect();
    let batch: Vec<&Decomposition> = decomps.iter().collect();
    let mut adam = Adam::new(0.01f32);
    let first = p.pretrain_step(&mut store, &mut adam, &batch).unwrap();
    let mut last = first;
    for _ in 0..40 {
        last = p.pretrain_step(&mut store, &mut adam, &batch).unwrap();
    }
    assert!(last.nll < 0.7 * first.nll, "{first:?} -> {last:?}");
    assert!(last.acc > first.acc);
    let marginal = store.value(p.seed_marginal);
    assert!((marginal.data().iter().sum::<f32>() - 1.0).abs() < 1e-5);
}
