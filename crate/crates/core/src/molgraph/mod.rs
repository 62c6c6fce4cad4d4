//! Kekulized heavy-atom molecular graphs.
//!
//! A [`MolecularGraph`] stores the typed adjacency of a molecule together with
//! the per-node atom types and per-edge bond types. Node features are one-hot
//! atom types (dimension 9), edge features are one-hot bond types (dimension 3).

mod iso;

pub use iso::{
    count_automorphisms, is_isomorphic, subgraph_matches, PatternGraph, AUTOMORPHISM_LIMIT,
    ISOMORPHISM_LIMIT,
};

use std::fmt;

use thiserror::Error;

/// Default cap on the number of heavy atoms in a graph.
pub const DEFAULT_MAX_NODES: usize = 48;

/// Number of atom types (node feature dimension).
pub const NUM_ATOM_TYPES: usize = 9;

/// Number of bond types (edge feature dimension).
pub const NUM_BOND_TYPES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("node index {index} out of range for graph with {len} nodes")]
    NodeOutOfRange { index: usize, len: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("nodes {0} and {1} are already bonded")]
    DuplicateEdge(usize, usize),
    #[error("graph already holds the maximum of {0} nodes")]
    TooManyNodes(usize),
    #[error("exact search is limited to {limit} nodes, got {nodes}")]
    SizeLimit { nodes: usize, limit: usize },
    #[error("node {0} still has bonds and cannot be removed")]
    NodeNotIsolated(usize),
}

/// Heavy-atom element. The set is closed: these are the nine organic-subset
/// elements found in ZINC-like corpora.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AtomType {
    C,
    N,
    O,
    F,
    P,
    S,
    Cl,
    Br,
    I,
}

impl AtomType {
    pub const ALL: [AtomType; NUM_ATOM_TYPES] = [
        AtomType::C,
        AtomType::N,
        AtomType::O,
        AtomType::F,
        AtomType::P,
        AtomType::S,
        AtomType::Cl,
        AtomType::Br,
        AtomType::I,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn symbol(self) -> &'static str {
        match self {
            AtomType::C => "C",
            AtomType::N => "N",
            AtomType::O => "O",
            AtomType::F => "F",
            AtomType::P => "P",
            AtomType::S => "S",
            AtomType::Cl => "Cl",
            AtomType::Br => "Br",
            AtomType::I => "I",
        }
    }

    pub fn from_symbol(symbol: &str) -> Option<Self> {
        Self::ALL.iter().copied().find(|a| a.symbol() == symbol)
    }

    /// Total bond order the atom can carry; implicit hydrogens fill the rest.
    pub fn max_valence(self) -> u32 {
        match self {
            AtomType::C => 4,
            AtomType::N => 3,
            AtomType::O => 2,
            AtomType::F => 1,
            AtomType::P => 5,
            AtomType::S => 6,
            AtomType::Cl | AtomType::Br | AtomType::I => 1,
        }
    }
}

impl fmt::Display for AtomType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BondType {
    Single = 1,
    Double = 2,
    Triple = 3,
}

impl BondType {
    pub const ALL: [BondType; NUM_BOND_TYPES] =
        [BondType::Single, BondType::Double, BondType::Triple];

    pub fn order(self) -> u32 {
        self as u32
    }

    /// Zero-based index (0 = single).
    pub fn index(self) -> usize {
        self as usize - 1
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub fn from_order(order: u32) -> Option<Self> {
        match order {
            1 => Some(BondType::Single),
            2 => Some(BondType::Double),
            3 => Some(BondType::Triple),
            _ => None,
        }
    }

    /// SMILES bond symbol; single bonds are implicit.
    pub fn symbol(self) -> &'static str {
        match self {
            BondType::Single => "",
            BondType::Double => "=",
            BondType::Triple => "#",
        }
    }
}

/// Undirected bond, stored with `i < j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub bond: BondType,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeMatrix {
    pub diagonal: Vec<usize>,
}

impl DegreeMatrix {
    pub fn trace(&self) -> usize {
        self.diagonal.iter().sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ValenceViolation {
    pub node: usize,
    pub atom: AtomType,
    pub used: u32,
    pub max: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MolecularGraph {
    atoms: Vec<AtomType>,
    edges: Vec<Edge>,
    // Neighbor lists kept sorted by neighbor index.
    adjacency: Vec<Vec<(usize, BondType)>>,
    max_nodes: usize,
}

impl Default for MolecularGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl MolecularGraph {
    pub fn new() -> Self {
        Self::with_max_nodes(DEFAULT_MAX_NODES)
    }

    pub fn with_max_nodes(max_nodes: usize) -> Self {
        MolecularGraph {
            atoms: Vec::new(),
            edges: Vec::new(),
            adjacency: Vec::new(),
            max_nodes,
        }
    }

    /// Builds a graph from atoms and `(i, j, bond)` triples.
    pub fn from_parts(
        atoms: &[AtomType],
        bonds: &[(usize, usize, BondType)],
    ) -> Result<Self, GraphError> {
        let mut g = Self::with_max_nodes(DEFAULT_MAX_NODES.max(atoms.len()));
        for &a in atoms {
            g.add_atom(a)?;
        }
        for &(i, j, b) in bonds {
            g.add_bond(i, j, b)?;
        }
        Ok(g)
    }

    pub fn max_nodes(&self) -> usize {
        self.max_nodes
    }

    pub fn set_max_nodes(&mut self, max_nodes: usize) {
        self.max_nodes = max_nodes;
    }

    pub fn num_nodes(&self) -> usize {
        self.atoms.len()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.atoms.is_empty()
    }

    pub fn atoms(&self) -> &[AtomType] {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> AtomType {
        self.atoms[i]
    }

    /// Edges in insertion order; this is the row order of `E` and `R`.
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[(usize, BondType)] {
        &self.adjacency[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.adjacency[i].len()
    }

    pub fn bond(&self, i: usize, j: usize) -> Option<BondType> {
        self.adjacency
            .get(i)?
            .binary_search_by_key(&j, |&(k, _)| k)
            .ok()
            .map(|pos| self.adjacency[i][pos].1)
    }

    pub fn bond_order_sum(&self, i: usize) -> u32 {
        self.adjacency[i].iter().map(|&(_, b)| b.order()).sum()
    }

    /// Remaining bond order capacity of node `i` (saturating at zero).
    pub fn free_valence(&self, i: usize) -> u32 {
        self.atoms[i]
            .max_valence()
            .saturating_sub(self.bond_order_sum(i))
    }

    pub fn add_atom(&mut self, atom: AtomType) -> Result<usize, GraphError> {
        if self.atoms.len() >= self.max_nodes {
            return Err(GraphError::TooManyNodes(self.max_nodes));
        }
        self.atoms.push(atom);
        self.adjacency.push(Vec::new());
        Ok(self.atoms.len() - 1)
    }

    /// Adds an undirected bond. Valence is not checked here; see
    /// [`MolecularGraph::can_bond`] and [`check_valence`].
    pub fn add_bond(&mut self, i: usize, j: usize, bond: BondType) -> Result<(), GraphError> {
        let len = self.atoms.len();
        for index in [i, j] {
            if index >= len {
                return Err(GraphError::NodeOutOfRange { index, len });
            }
        }
        if i == j {
            return Err(GraphError::SelfLoop(i));
        }
        if self.bond(i, j).is_some() {
            return Err(GraphError::DuplicateEdge(i.min(j), i.max(j)));
        }
        self.edges.push(Edge {
            i: i.min(j),
            j: i.max(j),
            bond,
        });
        insert_sorted(&mut self.adjacency[i], j, bond);
        insert_sorted(&mut self.adjacency[j], i, bond);
        Ok(())
    }

    /// True when bonding `i`–`j` with `bond` keeps both atoms within valence and
    /// does not duplicate an existing pair.
    pub fn can_bond(&self, i: usize, j: usize, bond: BondType) -> bool {
        i != j
            && i < self.num_nodes()
            && j < self.num_nodes()
            && self.bond(i, j).is_none()
            && self.free_valence(i) >= bond.order()
            && self.free_valence(j) >= bond.order()
    }

    /// Removes the last node, which must be isolated.
    pub fn pop_isolated_atom(&mut self) -> Result<AtomType, GraphError> {
        let last = match self.atoms.len() {
            0 => return Err(GraphError::NodeOutOfRange { index: 0, len: 0 }),
            n => n - 1,
        };
        if !self.adjacency[last].is_empty() {
            return Err(GraphError::NodeNotIsolated(last));
        }
        self.adjacency.pop();
        Ok(self.atoms.pop().expect("non-empty"))
    }

    /// Copies `other` into `self` as a disjoint component and returns the
    /// index offset of its first node.
    pub fn append_disjoint(&mut self, other: &MolecularGraph) -> Result<usize, GraphError> {
        let offset = self.num_nodes();
        if offset + other.num_nodes() > self.max_nodes {
            return Err(GraphError::TooManyNodes(self.max_nodes));
        }
        for &a in &other.atoms {
            self.add_atom(a)?;
        }
        for e in &other.edges {
            self.add_bond(e.i + offset, e.j + offset, e.bond)?;
        }
        Ok(offset)
    }

    /// Returns the graph with node `i` renamed to `perm[i]`. Edge insertion
    /// order is preserved.
    pub fn relabel(&self, perm: &[usize]) -> MolecularGraph {
        assert_eq!(perm.len(), self.num_nodes(), "permutation length");
        let mut atoms = vec![AtomType::C; self.num_nodes()];
        for (old, &new) in perm.iter().enumerate() {
            atoms[new] = self.atoms[old];
        }
        let mut g = MolecularGraph::with_max_nodes(self.max_nodes);
        for a in atoms {
            g.add_atom(a).expect("same size");
        }
        for e in &self.edges {
            g.add_bond(perm[e.i], perm[e.j], e.bond)
                .expect("permutation preserves simplicity");
        }
        g
    }

    /// Typed adjacency `A`: entry is the bond order, 0 for no bond.
    pub fn adjacency_matrix(&self) -> Vec<Vec<u32>> {
        let n = self.num_nodes();
        let mut a = vec![vec![0; n]; n];
        for e in &self.edges {
            a[e.i][e.j] = e.bond.order();
            a[e.j][e.i] = e.bond.order();
        }
        a
    }

    /// Node feature matrix `H`: one-hot atom types, row-major `n x 9`.
    pub fn node_features(&self) -> Vec<[u8; NUM_ATOM_TYPES]> {
        self.atoms
            .iter()
            .map(|a| {
                let mut row = [0; NUM_ATOM_TYPES];
                row[a.index()] = 1;
                row
            })
            .collect()
    }

    /// Edge feature matrix `E`: one-hot bond types in edge order.
    pub fn edge_features(&self) -> Vec<[u8; NUM_BOND_TYPES]> {
        self.edges
            .iter()
            .map(|e| {
                let mut row = [0; NUM_BOND_TYPES];
                row[e.bond.index()] = 1;
                row
            })
            .collect()
    }

    /// Edge-type vector `R` in edge order.
    pub fn edge_types(&self) -> Vec<BondType> {
        self.edges.iter().map(|e| e.bond).collect()
    }

    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        let mut out = Vec::new();
        for start in 0..n {
            if seen[start] {
                continue;
            }
            let mut comp = vec![start];
            seen[start] = true;
            let mut head = 0;
            while head < comp.len() {
                let u = comp[head];
                head += 1;
                for &(v, _) in &self.adjacency[u] {
                    if !seen[v] {
                        seen[v] = true;
                        comp.push(v);
                    }
                }
            }
            comp.sort_unstable();
            out.push(comp);
        }
        out
    }

    pub fn is_connected(&self) -> bool {
        self.num_nodes() <= 1 || self.components().len() == 1
    }

    /// Cyclomatic number: independent rings.
    pub fn ring_count(&self) -> usize {
        (self.num_edges() + self.components().len()).saturating_sub(self.num_nodes())
    }

    /// Breadth-first order from `start`, neighbors visited in index order.
    /// Returns `(order, parent)` where `parent[k]` is the BFS parent of
    /// `order[k]` (`None` for the root).
    pub fn bfs_order(&self, start: usize) -> (Vec<usize>, Vec<Option<usize>>) {
        let n = self.num_nodes();
        let mut seen = vec![false; n];
        let mut order = vec![start];
        let mut parent = vec![None];
        seen[start] = true;
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            for &(v, _) in &self.adjacency[u] {
                if !seen[v] {
                    seen[v] = true;
                    order.push(v);
                    parent.push(Some(u));
                }
            }
        }
        (order, parent)
    }
}

fn insert_sorted(list: &mut Vec<(usize, BondType)>, node: usize, bond: BondType) {
    let pos = list.partition_point(|&(k, _)| k < node);
    list.insert(pos, (node, bond));
}

pub fn degree_matrix(g: &MolecularGraph) -> DegreeMatrix {
    DegreeMatrix {
        diagonal: (0..g.num_nodes()).map(|i| g.degree(i)).collect(),
    }
}

/// Nodes whose summed bond order exceeds the element's valence. Empty means
/// the graph is chemically valid.
pub fn check_valence(g: &MolecularGraph) -> Vec<ValenceViolation> {
    (0..g.num_nodes())
        .filter_map(|node| {
            let atom = g.atom(node);
            let used = g.bond_order_sum(node);
            let max = atom.max_valence();
            (used > max).then_some(ValenceViolation {
                node,
                atom,
                used,
                max,
            })
        })
        .collect()
}
