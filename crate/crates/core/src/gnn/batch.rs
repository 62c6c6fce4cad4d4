use std::rc::Rc;

use crate::autodiff::Tensor;
use crate::expressiveness::MotifFeatures;
use crate::molgraph::{BondType, MolecularGraph, NUM_ATOM_TYPES, NUM_BOND_TYPES};
use crate::scalar::Scalar;

/// Meta-relation label of the link `(i, j, r1) -> (j, k, r2)`.
pub fn meta_relation(r1: BondType, r2: BondType) -> usize {
    3 * r1.index() + r2.index()
}

/// Number of distinct meta-relation labels.
pub const META_RELATIONS: usize = NUM_BOND_TYPES * NUM_BOND_TYPES;

/// Line graph over directed edges used by the GearNet edge pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeRelationalGraph {
    /// Directed edges; entries `2k` and `2k + 1` are the two directions of
    /// `g.edges()[k]` (`i -> j`, then `j -> i`).
    pub meta_nodes: Vec<(usize, usize, BondType)>,
    /// `(from, to, label)`: meta-node `from = (i, j, r1)` feeds
    /// `to = (j, k, r2)` with `k != i`.
    pub meta_edges: Vec<(usize, usize, usize)>,
}

/// Builds the edge-relational graph of `g`.
pub fn build_edge_relational_graph(g: &MolecularGraph) -> EdgeRelationalGraph {
    let mut meta_nodes = Vec::with_capacity(2 * g.num_edges());
    for e in g.edges() {
        meta_nodes.push((e.i, e.j, e.bond));
        meta_nodes.push((e.j, e.i, e.bond));
    }
    // Outgoing directed edges of every node, in meta-node order.
    let mut outgoing: Vec<Vec<usize>> = vec![Vec::new(); g.num_nodes()];
    for (k, &(i, _, _)) in meta_nodes.iter().enumerate() {
        outgoing[i].push(k);
    }
    let mut meta_edges = Vec::new();
    for (from, &(i, j, r1)) in meta_nodes.iter().enumerate() {
        for &to in &outgoing[j] {
            let (_, k, r2) = meta_nodes[to];
            if k != i {
                meta_edges.push((from, to, meta_relation(r1, r2)));
            }
        }
    }
    EdgeRelationalGraph { meta_nodes, meta_edges }
}

/// A graph together with optional precomputed structural features.
#[derive(Debug, Clone, Copy)]
pub struct GraphInput<'a> {
    pub graph: &'a MolecularGraph,
    pub motifs: Option<&'a MotifFeatures>,
}

impl<'a> From<&'a MolecularGraph> for GraphInput<'a> {
    fn from(graph: &'a MolecularGraph) -> Self {
        GraphInput { graph, motifs: None }
    }
}

/// Which optional structures a batch must carry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BatchOptions {
    /// Cycle sizes for motif features (GSN layers).
    pub cycles: Option<Vec<usize>>,
    /// Whether the edge-relational graph is needed (GearNet edge pass).
    pub edge_graph: bool,
}

/// Index lists of one relation (bond type).
#[derive(Debug, Clone)]
pub struct Relation {
    /// Directed-edge ids of this relation.
    pub edges: Rc<[usize]>,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    /// `1 / |N_dst^r|` per entry.
    pub mean_coef: Vec<f64>,
}

/// Disjoint union of graphs flattened into index lists. Directed edge
/// `offset + 2k` is `i -> j` and `offset + 2k + 1` is `j -> i` for the k-th
/// edge of each graph.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub num_graphs: usize,
    pub num_nodes: usize,
    /// First node of every graph, plus a final entry equal to `num_nodes`.
    pub node_offsets: Vec<usize>,
    pub node_graph: Rc<[usize]>,
    pub atom_types: Vec<usize>,
    pub src: Rc<[usize]>,
    pub dst: Rc<[usize]>,
    pub bond: Vec<usize>,
    pub degree: Vec<usize>,
    pub all_edges: Rc<[usize]>,
    pub relations: Vec<Relation>,
    /// Directed edges followed by one self loop per node.
    pub loop_src: Rc<[usize]>,
    pub loop_dst: Rc<[usize]>,
    pub motif_dim: usize,
    pub vertex_motifs: Option<Vec<Vec<u32>>>,
    /// Motif counts per directed edge.
    pub edge_motifs: Option<Vec<Vec<u32>>>,
    /// Meta-edges `(from, to, label)` over batch directed-edge ids.
    pub meta_edges: Option<Vec<(usize, usize, usize)>>,
}

impl GraphBatch {
    pub fn new<'a>(graphs: impl IntoIterator<Item = GraphInput<'a>>, options: &BatchOptions) -> Self {
        let mut node_offsets = vec![0];
        let mut node_graph = Vec::new();
        let mut atom_types = Vec::new();
        let (mut src, mut dst, mut bond) = (Vec::new(), Vec::new(), Vec::new());
        let mut vertex_motifs = options.cycles.as_ref().map(|_| Vec::new());
        let mut edge_motifs = options.cycles.as_ref().map(|_| Vec::new());
        let mut meta_edges = options.edge_graph.then(Vec::new);
        let mut num_graphs = 0;
        for input in graphs {
            let g = input.graph;
            let n0 = atom_types.len();
            let e0 = src.len();
            for a in g.atoms() {
                atom_types.push(a.index());
                node_graph.push(num_graphs);
            }
            for e in g.edges() {
                src.extend([n0 + e.i, n0 + e.j]);
                dst.extend([n0 + e.j, n0 + e.i]);
                bond.extend([e.bond.index(); 2]);
            }
            if let Some(cycles) = &options.cycles {
                let computed;
                let motifs = match input.motifs {
                    Some(m) => m,
                    None => {
                        computed = MotifFeatures::compute(g, cycles);
                        &computed
                    }
                };
                vertex_motifs.as_mut().expect("allocated").extend(motifs.vertex_counts.iter().cloned());
                let em = edge_motifs.as_mut().expect("allocated");
                for row in &motifs.edge_counts {
                    em.push(row.clone());
                    em.push(row.clone());
                }
            }
            if let Some(meta) = meta_edges.as_mut() {
                let erg = build_edge_relational_graph(g);
                meta.extend(erg.meta_edges.iter().map(|&(a, b, l)| (e0 + a, e0 + b, l)));
            }
            num_graphs += 1;
            node_offsets.push(atom_types.len());
        }
        let n = atom_types.len();
        let mut degree = vec![0; n];
        for &d in &dst {
            degree[d] += 1;
        }
        let relations = (0..NUM_BOND_TYPES)
            .map(|r| {
                let edges: Vec<usize> = (0..src.len()).filter(|&k| bond[k] == r).collect();
                let mut count = vec![0usize; n];
                for &k in &edges {
                    count[dst[k]] += 1;
                }
                Relation {
                    src: edges.iter().map(|&k| src[k]).collect(),
                    dst: edges.iter().map(|&k| dst[k]).collect(),
                    mean_coef: edges.iter().map(|&k| 1.0 / count[dst[k]] as f64).collect(),
                    edges: edges.into(),
                }
            })
            .collect();
        let loop_src: Vec<usize> = src.iter().copied().chain(0..n).collect();
        let loop_dst: Vec<usize> = dst.iter().copied().chain(0..n).collect();
        GraphBatch {
            num_graphs,
            num_nodes: n,
            node_offsets,
            node_graph: node_graph.into(),
            atom_types,
            all_edges: (0..src.len()).collect(),
            src: src.into(),
            dst: dst.into(),
            bond,
            degree,
            relations,
            loop_src: loop_src.into(),
            loop_dst: loop_dst.into(),
            motif_dim: options.cycles.as_ref().map_or(0, Vec::len),
            vertex_motifs,
            edge_motifs,
            meta_edges,
        }
    }

    pub fn single(g: &MolecularGraph, options: &BatchOptions) -> Self {
        Self::new([GraphInput::from(g)], options)
    }

    pub fn num_directed_edges(&self) -> usize {
        self.src.len()
    }

    /// One-hot atom types, `num_nodes x 9`.
    pub fn atom_features<T: Scalar>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(self.num_nodes, NUM_ATOM_TYPES);
        for (i, &a) in self.atom_types.iter().enumerate() {
            t.set(i, a, T::one());
        }
        t
    }

    /// One-hot bond types per directed edge, `2|E| x 3`.
    pub fn edge_features<T: Scalar>(&self) -> Tensor<T> {
        let mut t = Tensor::zeros(self.num_directed_edges(), NUM_BOND_TYPES);
        for (k, &b) in self.bond.iter().enumerate() {
            t.set(k, b, T::one());
        }
        t
    }

    pub fn vertex_motif_features<T: Scalar>(&self) -> Option<Tensor<T>> {
        self.vertex_motifs.as_ref().map(|rows| counts_tensor(rows, self.motif_dim))
    }

    pub fn edge_motif_features<T: Scalar>(&self) -> Option<Tensor<T>> {
        self.edge_motifs.as_ref().map(|rows| counts_tensor(rows, self.motif_dim))
    }

    /// Node range of graph `g` within the batch.
    pub fn nodes_of(&self, g: usize) -> std::ops::Range<usize> {
        self.node_offsets[g]..self.node_offsets[g + 1]
    }
}

fn counts_tensor<T: Scalar>(rows: &[Vec<u32>], cols: usize) -> Tensor<T> {
    let data = rows.iter().flatten().map(|&c| T::of(f64::from(c))).collect();
    Tensor::from_vec(rows.len(), cols, data).expect("rows share a length")
}

/// Column tensor from `f64` values.
pub fn column<T: Scalar>(values: &[f64]) -> Tensor<T> {
    Tensor::column(values.iter().map(|&v| T::of(v)).collect())
}
