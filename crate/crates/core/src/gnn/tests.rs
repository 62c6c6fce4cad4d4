use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autodiff::{grad_check_params, ParamStore, Tape, Tensor};
use crate::molgraph::{AtomType, BondType, MolecularGraph};
use crate::nn::Forward;
use crate::smiles::parse_smiles;

fn mol(s: &str) -> MolecularGraph {
    parse_smiles(s).unwrap()
}

fn spec(kind: LayerKind, dim: usize) -> LayerSpec {
    LayerSpec {
        kind,
        in_dim: dim,
        out_dim: dim,
        heads: 1,
        relation_count: 3,
        motif_dim: 6,
        edge_dim: 0,
        pna_delta: default_pna_delta(),
    }
}

fn set(store: &mut ParamStore<f64>, id: crate::autodiff::ParamId, t: Tensor<f64>) {
    store.set_value(id, t);
}

fn zero_all(store: &mut ParamStore<f64>) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).trainable {
            let [r, c] = store.value(id).shape();
            store.set_value(id, Tensor::zeros(r, c));
        }
    }
}

fn run_layer(layer: &Layer, store: &ParamStore<f64>, g: &MolecularGraph, h: Tensor<f64>) -> Tensor<f64> {
    let tape = Tape::new();
    let f = Forward::eval(&tape, store);
    let opts = BatchOptions {
        cycles: layer.spec.kind.uses_motifs().then(|| vec![3, 4, 5, 6, 7, 8]),
        edge_graph: layer.spec.kind == LayerKind::Gearnet,
    };
    let batch = GraphBatch::single(g, &opts);
    let hv = tape.constant(h).unwrap();
    let (out, _) = layer.forward(&f, &batch, hv, EdgeInputs::default()).unwrap();
    let v = tape.value(out).clone();
    v
}

#[test]
fn gin_isolated_node_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let layer = Layer::new(&mut store, "l", spec(LayerKind::Gin, 3), &mut rng);
    if let LayerParams::Gin { mlp, .. } = &layer.params {
        for lin in &mlp.layers {
            set(&mut store, lin.w, Tensor::identity(3));
            set(&mut store, lin.b.unwrap(), Tensor::zeros(1, 3));
        }
    }
    let mut g = MolecularGraph::new();
    g.add_atom(AtomType::C).unwrap();
    let h = Tensor::row(vec![1.0, 2.0, 3.0]);
    assert_eq!(run_layer(&layer, &store, &g, h.clone()), h);
}

#[test]
fn rgcn_single_neighbor_copies_it() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let layer = Layer::new(&mut store, "l", spec(LayerKind::Rgcn, 2), &mut rng);
    zero_all(&mut store);
    if let LayerParams::Rgcn { w_rel, .. } = &layer.params {
        set(&mut store, w_rel[0].w, Tensor::identity(2));
    }
    let g = mol("CO");
    let h = Tensor::from_f64(2, 2, &[1.0, 2.0, 5.0, -3.0]).unwrap();
    let out = run_layer(&layer, &store, &g, h);
    assert_eq!(out.row_slice(0), &[5.0, -3.0]);
    assert_eq!(out.row_slice(1), &[1.0, 2.0]);
}

#[test]
fn gearnet_zero_kernels_keep_residual() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let layer = Layer::new(&mut store, "l", spec(LayerKind::Gearnet, 3), &mut rng);
    zero_all(&mut store);
    if let LayerParams::Gearnet { bn, .. } = &layer.params {
        set(&mut store, bn.gamma, Tensor::filled(1, 3, 1.0));
    }
    let g = mol("CC(O)=O");
    let h = Tensor::from_f64(4, 3, &[0.1, 0.2, 0.3, 1.0, -1.0, 0.5, 2.0, 0.0, 0.0, -0.4, 0.4, 0.9]).unwrap();
    assert_eq!(run_layer(&layer, &store, &g, h.clone()), h);
}

#[test]
fn gcn_isolated_self_loops_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::new();
    let layer = Layer::new(&mut store, "l", spec(LayerKind::Gcn, 2), &mut rng);
    if let LayerParams::Gcn { w, .. } = &layer.params {
        set(&mut store, w.w, Tensor::identity(2));
    }
    let mut g = MolecularGraph::new();
    g.add_atom(AtomType::C).unwrap();
    g.add_atom(AtomType::N).unwrap();
    let h = Tensor::from_f64(2, 2, &[1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(run_layer(&layer, &store, &g, h.clone()), h);
}

#[test]
fn attention_coeff_examples() {
    let w = Tensor::<f64>::identity(2);
    let one = attention_coeffs(AttentionVariant::Gat, &[1.0, 0.0], &[vec![0.5, 0.5]], &[1.0; 4], &w).unwrap();
    assert_eq!(one, vec![1.0]);
    let same = attention_coeffs(
        AttentionVariant::Gat,
        &[1.0, 0.0],
        &[vec![0.3, 0.1], vec![0.3, 0.1]],
        &[1.0; 4],
        &w,
    )
    .unwrap();
    assert_eq!(same, vec![0.5, 0.5]);
    // a = 1, W = I: scores LeakyReLU(1 + 0 + 1 + 2) = 4 and LeakyReLU(1 - 3 - 1) = -0.6.
    let two = attention_coeffs(
        AttentionVariant::Gat,
        &[1.0, 0.0],
        &[vec![1.0, 2.0], vec![-3.0, -1.0]],
        &[1.0; 4],
        &w,
    )
    .unwrap();
    let (e1, e2) = (4f64.exp(), (-0.6f64).exp());
    assert!((two[0] - e1 / (e1 + e2)).abs() < 1e-12);
    assert!((two[1] - e2 / (e1 + e2)).abs() < 1e-12);
    assert!(matches!(
        attention_coeffs(AttentionVariant::Gatv2, &[1.0], &[], &[1.0], &Tensor::identity(1)),
        Err(GnnError::EmptyNeighborhood)
    ));
}

#[test]
fn layer_attention_matches_reference_and_sums_to_one() {
    for variant in [LayerKind::Gat, LayerKind::Gatv2] {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::<f64>::new();
        let layer = Layer::new(&mut store, "l", spec(variant, 3), &mut rng);
        let g = mol("CC(N)C=O");
        let n = g.num_nodes();
        let h = crate::nn::glorot::<f64>(&mut rng, n, 3);
        let tape = Tape::new();
        let f = Forward::eval(&tape, &store);
        let batch = GraphBatch::single(&g, &BatchOptions::default());
        let hv = tape.constant(h.clone()).unwrap();
        let alpha = tape.value(layer.attention(&f, &batch, hv, EdgeInputs::default()).unwrap()).clone();
        let mut sums = vec![0.0; n];
        for (k, &d) in batch.loop_dst.iter().enumerate() {
            sums[d] += alpha.get(k, 0);
        }
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
        // Compare node 1 against the single-node reference.
        let node = 1;
        let mut nbrs = Vec::new();
        let mut ours = Vec::new();
        for (k, (&s, &d)) in batch.loop_src.iter().zip(batch.loop_dst.iter()).enumerate() {
            if d == node {
                nbrs.push(h.row_slice(s).to_vec());
                ours.push(alpha.get(k, 0));
            }
        }
        let (a, w) = match &layer.params {
            LayerParams::Gat { w, a_dst, a_src, .. } => {
                let a = [store.value(*a_dst).data(), store.value(*a_src).data()].concat();
                (a, store.value(w.w).clone())
            }
            LayerParams::Gatv2 { w_left, w_right, a, .. } => {
                let (l, r) = (store.value(w_left.w), store.value(w_right.w));
                let stacked = Tensor::from_vec(6, 3, [l.data(), r.data()].concat()).unwrap();
                (store.value(*a).data().to_vec(), stacked)
            }
            _ => unreachable!(),
        };
        let v = if variant == LayerKind::Gat {
            AttentionVariant::Gat
        } else {
            AttentionVariant::Gatv2
        };
        let reference = attention_coeffs(v, h.row_slice(node), &nbrs, &a, &w).unwrap();
        for (x, y) in ours.iter().zip(&reference) {
            assert!((x - y).abs() < 1e-12, "{variant}: {ours:?} vs {reference:?}");
        }
    }
}

#[test]
fn pna_aggregate_examples() {
    let out = pna_aggregate(&[vec![1.0], vec![3.0]], 2, 3f64.ln());
    let expect = [2.0, 3.0, 1.0, 1.0];
    for (k, v) in out.iter().enumerate() {
        assert!((v - expect[k % 4]).abs() < 1e-12, "{out:?}");
    }
    let single = pna_aggregate(&[vec![5.0]], 1, 3f64.ln());
    assert_eq!(&single[..4], &[5.0, 5.0, 5.0, 0.0]);
    assert_eq!(pna_aggregate::<f64>(&[], 0, 1.0), Vec::<f64>::new());
    assert_eq!(pna_aggregate(&[vec![1.0, 2.0]], 0, 1.0), vec![0.0; 24]);
}

#[test]
fn edge_relational_graph_examples() {
    let path = mol("CC=C");
    let erg = build_edge_relational_graph(&path);
    assert_eq!(erg.meta_nodes.len(), 4);
    let s = BondType::Single;
    let d = BondType::Double;
    let mut links: Vec<_> = erg
        .meta_edges
        .iter()
        .map(|&(a, b, l)| (erg.meta_nodes[a], erg.meta_nodes[b], l))
        .collect();
    links.sort_by_key(|x| x.2);
    assert_eq!(
        links,
        vec![((0, 1, s), (1, 2, d), meta_relation(s, d)), ((2, 1, d), (1, 0, s), meta_relation(d, s))]
    );
    assert!(build_edge_relational_graph(&mol("CC")).meta_edges.is_empty());
    assert_eq!(build_edge_relational_graph(&mol("C1CC1")).meta_edges.len(), 6);
}

#[test]
fn gearnet_edge_pass_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::<f64>::new();
    let mut sp = spec(LayerKind::Gearnet, 3);
    sp.edge_dim = 3;
    let layer = Layer::new(&mut store, "l", sp, &mut rng);
    let LayerParams::Gearnet { edge: Some(ge), .. } = &layer.params else {
        panic!()
    };
    let opts = BatchOptions {
        cycles: None,
        edge_graph: true,
    };
    let run = |store: &ParamStore<f64>, g: &MolecularGraph| {
        let tape = Tape::new();
        let f = Forward::eval(&tape, store);
        let batch = GraphBatch::single(g, &opts);
        let e = tape.constant(batch.edge_features()).unwrap();
        let out = gearnet_edge_pass(&f, &batch, ge, e, 3).unwrap();
        let v = tape.value(out).clone();
        v
    };
    // Isolated single edge: ReLU(BN(0)) = ReLU(beta) = 0 with default beta.
    assert!(run(&store, &mol("CC")).data().iter().all(|&v| v == 0.0));
    // Identity on the (single, double) relation: the double edge 1->2
    // receives the single edge 0->1's one-hot.
    for w in &ge.w_meta {
        store.set_value(w.w, Tensor::zeros(3, 3));
    }
    store.set_value(ge.w_meta[meta_relation(BondType::Single, BondType::Double)].w, Tensor::identity(3));
    let out = run(&store, &mol("CC=C"));
    let scale = 1.0 / (1.0 + crate::nn::BN_EPS).sqrt();
    // Directed edge 2 is 1 -> 2 (double).
    assert!((out.get(2, 0) - scale).abs() < 1e-12);
    assert_eq!(out.data().iter().filter(|&&v| v != 0.0).count(), 1);
}

fn small_config(kind: LayerKind, edge: bool) -> GnnConfig {
    let mut c = GnnConfig::new(kind, 6).with_edge_features(edge);
    c.layers = 2;
    c
}

/// Moves every trainable parameter off exact zeros (batch-norm shifts start
/// at 0, which would put ReLUs of empty aggregations exactly on the kink).
pub(crate) fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).trainable {
            let mut v = store.value(id).clone();
            v.data_mut().iter_mut().for_each(|x| *x += rng.random_range(-0.1..0.1));
            store.set_value(id, v);
        }
    }
}

fn random_features(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    let data = (0..n * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::from_vec(n, 9, data).unwrap()
}

#[test]
fn every_layer_grad_checks() {
    let graphs = ["CC(=O)N", "C1CC1O", "C#CC(F)Cl", "C1=CC=C1"];
    for kind in LayerKind::ALL {
        for edge in [false, true] {
            for (gi, smi) in graphs.iter().enumerate() {
                let g = mol(smi);
                let mut rng = ChaCha8Rng::seed_from_u64(gi as u64 + 100);
                let mut store = ParamStore::<f64>::new();
                let model = GnnModel::new(small_config(kind, edge), &mut store, "gnn", &mut rng).unwrap();
                jitter(&mut store, &mut rng);
                let h0 = random_features(&mut rng, g.num_nodes());
                let target = crate::nn::glorot::<f64>(&mut rng, 1, 6);
                let batch = model.batch([GraphInput::from(&g)]);
                let err = grad_check_params(
                    &store,
                    |tape, s| {
                        let f = Forward::new(tape, s, true);
                        let h = tape.constant(h0.clone())?;
                        let out = model.message_pass_from(&f, &batch, h).map_err(|e| match e {
                            GnnError::Autodiff(a) => a,
                            other => panic!("{other}"),
                        })?;
                        let tv = tape.constant(target.clone())?;
                        tape.sum_all(tape.mul(tape.tanh(out.graphs)?, tv)?)
                    },
                    1e-6,
                )
                .unwrap();
                assert!(err < 1e-3, "{kind} edge={edge} {smi}: {err}");
            }
        }
    }
}

#[test]
fn embeddings_invariant_under_relabeling() {
    let g = mol("CC(=O)NC1CCC(Cl)C1");
    let n = g.num_nodes();
    for kind in LayerKind::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f64>::new();
        let model = GnnModel::new(small_config(kind, true), &mut store, "gnn", &mut rng).unwrap();
        let embed = |g: &MolecularGraph| {
            let tape = Tape::new();
            let f = Forward::eval(&tape, &store);
            let out = model.embed(&f, g).unwrap();
            let v = tape.value(out.graphs).clone();
            v
        };
        let base = embed(&g);
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let other = embed(&g.relabel(&perm));
            assert!(base.max_abs_diff(&other) < 1e-9, "{kind}");
        }
    }
}

#[test]
fn c6_versus_two_triangles() {
    let c6 = mol("C1CCCCC1");
    let mut tri = mol("C1CC1");
    tri.append_disjoint(&mol("C1CC1")).unwrap();
    for kind in [LayerKind::Gcn, LayerKind::Rgcn, LayerKind::Gin, LayerKind::GsnV] {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::<f32>::new();
        let model = GnnModel::new(GnnConfig::new(kind, 16), &mut store, "gnn", &mut rng).unwrap();
        let embed = |g: &MolecularGraph| {
            let tape = Tape::new();
            let f = Forward::eval(&tape, &store);
            let out = model.embed(&f, g).unwrap();
            let v = tape.value(out.graphs).clone();
            v
        };
        let diff = embed(&c6).max_abs_diff(&embed(&tri));
        if kind == LayerKind::GsnV {
            assert!(diff > 1e-3, "{diff}");
        } else {
            assert!(diff < 1e-5, "{kind} {diff}");
        }
    }
}

#[test]
fn zero_layer_model_sums_features() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let model = GnnModel::new(GnnConfig::new(LayerKind::Gin, 4).with_layers(0), &mut store, "gnn", &mut rng).unwrap();
    let tape = Tape::new();
    let f = Forward::eval(&tape, &store);
    let out = model.embed(&f, &mol("CCO")).unwrap();
    let v = tape.value(out.graphs).clone();
    assert_eq!(v.data()[AtomType::C.index()], 2.0);
    assert_eq!(v.data()[AtomType::O.index()], 1.0);
}

#[test]
fn edge_projection_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let model = GnnModel::new(GnnConfig::new(LayerKind::Gcn, 3).with_edge_features(true), &mut store, "gnn", &mut rng).unwrap();
    let proj = model.edge_proj.clone().unwrap();
    store.set_value(proj.w, Tensor::zeros(3, 3));
    {
        let tape = Tape::new();
        let f = Forward::eval(&tape, &store);
        let e = tape.constant(Tensor::from_f64(1, 3, &[0.0, 1.0, 0.0]).unwrap()).unwrap();
        let out = project_edge_features(&f, &model, e).unwrap();
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
    }
    let w = Tensor::from_f64(3, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]).unwrap();
    store.set_value(proj.w, w);
    let tape = Tape::new();
    let f = Forward::eval(&tape, &store);
    let e = tape.constant(Tensor::from_f64(1, 3, &[0.0, 1.0, 0.0]).unwrap()).unwrap();
    let out = project_edge_features(&f, &model, e).unwrap();
    assert_eq!(tape.value(out).data(), &[4.0, 5.0, 6.0]);
    let bad = tape.constant(Tensor::zeros(1, 2)).unwrap();
    assert!(project_edge_features(&f, &model, bad).is_err());
}

#[test]
fn single_node_gin_stack_composes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::<f64>::new();
    let model = GnnModel::new(GnnConfig::new(LayerKind::Gin, 4), &mut store, "gnn", &mut rng).unwrap();
    let mut g = MolecularGraph::new();
    g.add_atom(AtomType::N).unwrap();
    let tape = Tape::new();
    let f = Forward::eval(&tape, &store);
    let out = model.embed(&f, &g).unwrap();
    let got = tape.value(out.graphs).clone();
    // Straight-line: h <- relu(bn(mlp((1 + eps) h))) three times.
    let mut h: Vec<f64> = (0..9).map(|k| if k == AtomType::N.index() { 1.0 } else { 0.0 }).collect();
    for (layer, norm) in model.layers.iter().zip(&model.norms) {
        let LayerParams::Gin { eps, mlp } = &layer.params else { unreachable!() };
        let e = store.value(*eps).item();
        let mut x: Vec<f64> = h.iter().map(|v| (1.0 + e) * v).collect();
        for (k, lin) in mlp.layers.iter().enumerate() {
            if k > 0 {
                x.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            let w = store.value(lin.w);
            let b = store.value(lin.b.unwrap());
            x = (0..w.cols())
                .map(|c| (0..w.rows()).map(|r| x[r] * w.get(r, c)).sum::<f64>() + b.get(0, c))
                .collect();
        }
        let (gm, bt) = (store.value(norm.gamma), store.value(norm.beta));
        let (rm, rv) = (store.value(norm.running_mean), store.value(norm.running_var));
        h = (0..x.len())
            .map(|c| {
                let y = gm.get(0, c) * (x[c] - rm.get(0, c)) / (rv.get(0, c) + crate::nn::BN_EPS).sqrt() + bt.get(0, c);
                y.max(0.0)
            })
            .collect();
    }
    for (a, b) in got.data().iter().zip(&h) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn config_validation() {
    let mut c = GnnConfig::new(LayerKind::Gat, 8);
    assert!(c.validate().is_err());
    c.hidden = 9;
    assert!(c.validate().is_ok());
    assert_eq!(LayerKind::parse("gsn"), Some(LayerKind::GsnV));
    assert_eq!(LayerKind::parse("GATv2"), Some(LayerKind::Gatv2));
    assert_eq!(LayerKind::parse("nope"), None);
}

#[test]
fn gsn_without_motifs_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = ParamStore::<f64>::new();
    let layer = Layer::new(&mut store, "l", spec(LayerKind::GsnV, 9), &mut rng);
    let tape = Tape::new();
    let f = Forward::eval(&tape, &store);
    let batch = GraphBatch::single(&mol("CC"), &BatchOptions::default());
    let h = tape.constant(batch.atom_features()).unwrap();
    assert!(matches!(
        layer.forward(&f, &batch, h, EdgeInputs::default()),
        Err(GnnError::MissingMotifFeatures)
    ));
}

