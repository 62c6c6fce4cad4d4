//! Exact backtracking isomorphism, automorphism counting and subgraph
//! matching for small graphs.

use std::collections::BTreeSet;

use super::{GraphError, MolecularGraph};

/// Largest graph accepted by [`is_isomorphic`].
pub const ISOMORPHISM_LIMIT: usize = 12;
/// Largest graph accepted by [`count_automorphisms`].
pub const AUTOMORPHISM_LIMIT: usize = 10;

/// Untyped pattern graph used for motif matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatternGraph {
    adjacency: Vec<Vec<usize>>,
}

impl PatternGraph {
    pub fn from_edges(num_nodes: usize, edges: &[(usize, usize)]) -> Self {
        let mut adjacency = vec![Vec::new(); num_nodes];
        for &(i, j) in edges {
            assert!(i != j && i < num_nodes && j < num_nodes, "invalid pattern edge");
            if !adjacency[i].contains(&j) {
                adjacency[i].push(j);
                adjacency[j].push(i);
            }
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        PatternGraph { adjacency }
    }

    /// Simple cycle on `k >= 3` nodes.
    pub fn cycle(k: usize) -> Self {
        assert!(k >= 3, "cycles need at least 3 nodes");
        let edges: Vec<_> = (0..k).map(|i| (i, (i + 1) % k)).collect();
        Self::from_edges(k, &edges)
    }

    pub fn num_nodes(&self) -> usize {
        self.adjacency.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.adjacency[i]
    }

    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (i, list) in self.adjacency.iter().enumerate() {
            for &j in list {
                if i < j {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// True iff a bijection exists that preserves adjacency, atom types and bond
/// types.
pub fn is_isomorphic(g1: &MolecularGraph, g2: &MolecularGraph) -> Result<bool, GraphError> {
    let n = g1.num_nodes().max(g2.num_nodes());
    if n > ISOMORPHISM_LIMIT {
        return Err(GraphError::SizeLimit {
            nodes: n,
            limit: ISOMORPHISM_LIMIT,
        });
    }
    if g1.num_nodes() != g2.num_nodes() || g1.num_edges() != g2.num_edges() {
        return Ok(false);
    }
    let invariant = |g: &MolecularGraph| {
        let mut v: Vec<_> = (0..g.num_nodes())
            .map(|i| (g.atom(i), g.degree(i), g.bond_order_sum(i)))
            .collect();
        v.sort_unstable();
        v
    };
    if invariant(g1) != invariant(g2) {
        return Ok(false);
    }
    let mut count = 0u64;
    typed_search(g1, g2, true, &mut count);
    Ok(count > 0)
}

/// Number of adjacency-, atom- and bond-preserving permutations of `g`.
pub fn count_automorphisms(g: &MolecularGraph) -> Result<u64, GraphError> {
    if g.num_nodes() > AUTOMORPHISM_LIMIT {
        return Err(GraphError::SizeLimit {
            nodes: g.num_nodes(),
            limit: AUTOMORPHISM_LIMIT,
        });
    }
    let mut count = 0u64;
    typed_search(g, g, false, &mut count);
    Ok(count)
}

// Matching order: BFS over each component so that most nodes have an already
// mapped neighbor when they are placed.
fn search_order(g: &MolecularGraph) -> Vec<usize> {
    let mut order = Vec::with_capacity(g.num_nodes());
    let mut seen = vec![false; g.num_nodes()];
    for start in 0..g.num_nodes() {
        if seen[start] {
            continue;
        }
        let (component, _) = g.bfs_order(start);
        for v in component {
            seen[v] = true;
            order.push(v);
        }
    }
    order
}

fn typed_search(g1: &MolecularGraph, g2: &MolecularGraph, stop_at_first: bool, count: &mut u64) {
    let n = g1.num_nodes();
    if n == 0 {
        *count = 1;
        return;
    }
    let order = search_order(g1);
    let mut map = vec![usize::MAX; n];
    let mut used = vec![false; n];
    typed_extend(g1, g2, &order, 0, &mut map, &mut used, stop_at_first, count);
}

#[allow(clippy::too_many_arguments)]
fn typed_extend(
    g1: &MolecularGraph,
    g2: &MolecularGraph,
    order: &[usize],
    depth: usize,
    map: &mut [usize],
    used: &mut [bool],
    stop_at_first: bool,
    count: &mut u64,
) -> bool {
    if depth == order.len() {
        *count += 1;
        return stop_at_first;
    }
    let u = order[depth];
    for v in 0..g2.num_nodes() {
        if used[v] || g1.atom(u) != g2.atom(v) || g1.degree(u) != g2.degree(v) {
            continue;
        }
        // Every mapped node must keep its bond (or non-bond) relation to u.
        let consistent = order[..depth]
            .iter()
            .all(|&w| g1.bond(u, w) == g2.bond(v, map[w]));
        if !consistent {
            continue;
        }
        map[u] = v;
        used[v] = true;
        let done = typed_extend(g1, g2, order, depth + 1, map, used, stop_at_first, count);
        used[v] = false;
        map[u] = usize::MAX;
        if done {
            return true;
        }
    }
    false
}

/// Every subgraph of `g` isomorphic to `pattern`, ignoring atom and bond
/// types. Matches are not required to be induced. Relabelings of the same
/// node set + edge set are reported once; each entry maps pattern node `k` to
/// a node of `g`.
pub fn subgraph_matches(g: &MolecularGraph, pattern: &PatternGraph) -> Vec<Vec<usize>> {
    let p = pattern.num_nodes();
    if p == 0 || p > g.num_nodes() {
        return Vec::new();
    }
    let order = pattern_order(pattern);
    let mut state = MatchState {
        g,
        pattern,
        order: &order,
        map: vec![usize::MAX; p],
        used: vec![false; g.num_nodes()],
        seen: BTreeSet::new(),
        out: Vec::new(),
    };
    state.extend(0);
    state.out
}

fn pattern_order(pattern: &PatternGraph) -> Vec<usize> {
    let p = pattern.num_nodes();
    let mut order = Vec::with_capacity(p);
    let mut placed = vec![false; p];
    while order.len() < p {
        // Prefer nodes adjacent to already placed ones, then highest degree.
        let next = (0..p)
            .filter(|&k| !placed[k])
            .max_by_key(|&k| {
                let links = pattern.neighbors(k).iter().filter(|&&m| placed[m]).count();
                (links, pattern.neighbors(k).len(), usize::MAX - k)
            })
            .expect("unplaced node exists");
        placed[next] = true;
        order.push(next);
    }
    order
}

type MatchKey = (Vec<usize>, Vec<(usize, usize)>);

struct MatchState<'a> {
    g: &'a MolecularGraph,
    pattern: &'a PatternGraph,
    order: &'a [usize],
    map: Vec<usize>,
    used: Vec<bool>,
    seen: BTreeSet<MatchKey>,
    out: Vec<Vec<usize>>,
}

impl MatchState<'_> {
    fn extend(&mut self, depth: usize) {
        if depth == self.order.len() {
            self.record();
            return;
        }
        let k = self.order[depth];
        // Candidates come from the neighborhood of a mapped pattern neighbor
        // when one exists.
        let anchor = self
            .pattern
            .neighbors(k)
            .iter()
            .copied()
            .find(|&m| self.map[m] != usize::MAX);
        let candidates: Vec<usize> = match anchor {
            Some(m) => self.g.neighbors(self.map[m]).iter().map(|&(v, _)| v).collect(),
            None => (0..self.g.num_nodes()).collect(),
        };
        for v in candidates {
            if self.used[v] || self.g.degree(v) < self.pattern.neighbors(k).len() {
                continue;
            }
            let ok = self
                .pattern
                .neighbors(k)
                .iter()
                .filter(|&&m| self.map[m] != usize::MAX)
                .all(|&m| self.g.bond(v, self.map[m]).is_some());
            if !ok {
                continue;
            }
            self.map[k] = v;
            self.used[v] = true;
            self.extend(depth + 1);
            self.used[v] = false;
            self.map[k] = usize::MAX;
        }
    }

    fn record(&mut self) {
        let mut nodes = self.map.clone();
        nodes.sort_unstable();
        let mut edges: Vec<(usize, usize)> = self
            .pattern
            .edges()
            .into_iter()
            .map(|(a, b)| {
                let (x, y) = (self.map[a], self.map[b]);
                (x.min(y), x.max(y))
            })
            .collect();
        edges.sort_unstable();
        if self.seen.insert((nodes, edges)) {
            self.out.push(self.map.clone());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::molgraph::{AtomType, BondType};

    fn ring(n: usize) -> MolecularGraph {
        let bonds: Vec<_> = (0..n).map(|i| (i, (i + 1) % n, BondType::Single)).collect();
        MolecularGraph::from_parts(&vec![AtomType::C; n], &bonds).unwrap()
    }

    fn two_triangles() -> MolecularGraph {
        let s = BondType::Single;
        MolecularGraph::from_parts(
            &[AtomType::C; 6],
            &[(0, 1, s), (1, 2, s), (2, 0, s), (3, 4, s), (4, 5, s), (5, 3, s)],
        )
        .unwrap()
    }

    fn k4() -> MolecularGraph {
        let s = BondType::Single;
        let mut bonds = Vec::new();
        for i in 0..4 {
            for j in i + 1..4 {
                bonds.push((i, j, s));
            }
        }
        MolecularGraph::from_parts(&[AtomType::C; 4], &bonds).unwrap()
    }

    #[test]
    fn isomorphism_examples() {
        use AtomType::*;
        let g = MolecularGraph::from_parts(
            &[C, N, O, C],
            &[(0, 1, BondType::Single), (1, 2, BondType::Single), (0, 3, BondType::Double)],
        )
        .unwrap();
        let relabeled = g.relabel(&[2, 0, 3, 1]);
        assert!(is_isomorphic(&g, &relabeled).unwrap());
        assert!(!is_isomorphic(&ring(6), &two_triangles()).unwrap());
        let ethane = MolecularGraph::from_parts(&[C, C], &[(0, 1, BondType::Single)]).unwrap();
        let ethene = MolecularGraph::from_parts(&[C, C], &[(0, 1, BondType::Double)]).unwrap();
        assert!(!is_isomorphic(&ethane, &ethene).unwrap());
    }

    #[test]
    fn isomorphism_size_limit() {
        let big = ring(13);
        assert_eq!(
            is_isomorphic(&big, &big),
            Err(GraphError::SizeLimit { nodes: 13, limit: 12 })
        );
    }

    #[test]
    fn subgraph_examples() {
        let c3 = PatternGraph::cycle(3);
        assert_eq!(subgraph_matches(&ring(3), &c3).len(), 1);
        assert_eq!(subgraph_matches(&ring(6), &c3).len(), 0);
        assert_eq!(subgraph_matches(&k4(), &c3).len(), 4);
        // Non-induced four-cycles of K4.
        assert_eq!(subgraph_matches(&k4(), &PatternGraph::cycle(4)).len(), 3);
    }

    #[test]
    fn automorphism_examples() {
        use AtomType::*;
        let single = MolecularGraph::from_parts(&[C], &[]).unwrap();
        assert_eq!(count_automorphisms(&single).unwrap(), 1);
        assert_eq!(count_automorphisms(&ring(3)).unwrap(), 6);
        let cco = MolecularGraph::from_parts(
            &[C, C, O],
            &[(0, 1, BondType::Single), (1, 2, BondType::Single)],
        )
        .unwrap();
        assert_eq!(count_automorphisms(&cco).unwrap(), 1);
        assert!(count_automorphisms(&ring(11)).is_err());
    }

    // Brute force: all permutations of n nodes.
    fn brute_automorphisms(g: &MolecularGraph) -> u64 {
        fn permute(k: usize, perm: &mut Vec<usize>, g: &MolecularGraph, count: &mut u64) {
            if k == perm.len() {
                let ok = (0..perm.len()).all(|i| {
                    g.atom(i) == g.atom(perm[i])
                        && (0..perm.len()).all(|j| g.bond(i, j) == g.bond(perm[i], perm[j]))
                });
                *count += ok as u64;
                return;
            }
            for i in k..perm.len() {
                perm.swap(k, i);
                permute(k + 1, perm, g, count);
                perm.swap(k, i);
            }
        }
        let mut perm: Vec<usize> = (0..g.num_nodes()).collect();
        let mut count = 0;
        permute(0, &mut perm, g, &mut count);
        count
    }

    #[test]
    fn automorphisms_match_permutation_enumeration() {
        for g in [ring(5), two_triangles(), k4(), ring(6)] {
            assert_eq!(count_automorphisms(&g).unwrap(), brute_automorphisms(&g));
        }
    }
}
