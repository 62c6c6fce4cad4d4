//! 1-WL color refinement, graph-pair discrimination, and the cycle-motif
//! counts that feed the GSN layers.

use std::collections::BTreeMap;

use crate::molgraph::{subgraph_matches, PatternGraph};
use crate::molgraph::MolecularGraph;

/// Cycle sizes used as GSN motifs by default.
pub const DEFAULT_CYCLES: [usize; 6] = [3, 4, 5, 6, 7, 8];

/// How initial colors and neighbor multisets are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WlMode {
    /// Atom types seed the colors and bond orders enter neighbor signatures.
    #[default]
    Attributed,
    /// Every node starts with the same color; bonds are untyped.
    Topology,
}

/// Multiset of colors after a refinement round.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColorHistogram {
    pub counts: BTreeMap<usize, usize>,
    pub round: usize,
}

impl ColorHistogram {
    fn from_colors(colors: &[usize], round: usize) -> Self {
        let mut counts = BTreeMap::new();
        for &c in colors {
            *counts.entry(c).or_insert(0) += 1;
        }
        ColorHistogram { counts, round }
    }

    pub fn num_colors(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> usize {
        self.counts.values().sum()
    }
}

/// Outcome of [`wl_compare`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WlVerdict {
    Distinguished,
    PossiblyIsomorphic,
}

impl std::fmt::Display for WlVerdict {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WlVerdict::Distinguished => "distinguished",
            WlVerdict::PossiblyIsomorphic => "possibly_isomorphic",
        })
    }
}

type Signature = (usize, Vec<(u32, usize)>);

/// Replaces each signature by its rank among the distinct signatures, which
/// is injective and independent of node numbering.
fn canonical_ids<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut distinct: Vec<K> = keys.to_vec();
    distinct.sort();
    distinct.dedup();
    keys.iter()
        .map(|k| distinct.binary_search(k).expect("key present"))
        .collect()
}

fn initial_colors(g: &MolecularGraph, mode: WlMode) -> Vec<usize> {
    let raw: Vec<usize> = match mode {
        WlMode::Attributed => g.atoms().iter().map(|a| a.index()).collect(),
        WlMode::Topology => vec![0; g.num_nodes()],
    };
    canonical_ids(&raw)
}

fn refine_once(g: &MolecularGraph, colors: &[usize], mode: WlMode) -> Vec<usize> {
    let sigs: Vec<Signature> = (0..g.num_nodes())
        .map(|i| {
            let mut nb: Vec<(u32, usize)> = g
                .neighbors(i)
                .iter()
                .map(|&(j, b)| {
                    let order = match mode {
                        WlMode::Attributed => b.order(),
                        WlMode::Topology => 0,
                    };
                    (order, colors[j])
                })
                .collect();
            nb.sort_unstable();
            (colors[i], nb)
        })
        .collect();
    canonical_ids(&sigs)
}

/// Colors of every round, starting with the initial coloring, until the
/// partition stops refining or `max_iters` rounds have run.
pub fn wl_color_rounds(g: &MolecularGraph, max_iters: usize, mode: WlMode) -> Vec<Vec<usize>> {
    let mut rounds = vec![initial_colors(g, mode)];
    for _ in 0..max_iters {
        let prev = rounds.last().expect("at least one round");
        let next = refine_once(g, prev, mode);
        let stable = count_distinct(&next) == count_distinct(prev);
        rounds.push(next);
        if stable {
            break;
        }
    }
    rounds
}

fn count_distinct(colors: &[usize]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

/// Final color histogram of attributed 1-WL refinement.
pub fn wl_refine(g: &MolecularGraph, max_iters: usize) -> ColorHistogram {
    wl_refine_with(g, max_iters, WlMode::Attributed)
}

pub fn wl_refine_with(g: &MolecularGraph, max_iters: usize, mode: WlMode) -> ColorHistogram {
    let rounds = wl_color_rounds(g, max_iters, mode);
    let last = rounds.len() - 1;
    // A round that did not refine the partition is not counted.
    let round = if last > 0 && count_distinct(&rounds[last]) == count_distinct(&rounds[last - 1]) {
        last - 1
    } else {
        last
    };
    ColorHistogram::from_colors(&rounds[last], round)
}

/// Per-round histograms of both graphs, with colors assigned jointly.
#[derive(Debug, Clone)]
pub struct WlComparison {
    pub verdict: WlVerdict,
    pub rounds: Vec<(ColorHistogram, ColorHistogram)>,
}

/// Runs 1-WL on the disjoint union of the two graphs so that color ids are
/// shared, and reports whether the histograms ever differ.
pub fn wl_compare(g1: &MolecularGraph, g2: &MolecularGraph, max_iters: usize) -> WlVerdict {
    wl_compare_with(g1, g2, max_iters, WlMode::Attributed).verdict
}

pub fn wl_compare_with(g1: &MolecularGraph, g2: &MolecularGraph, max_iters: usize, mode: WlMode) -> WlComparison {
    let mut union = MolecularGraph::with_max_nodes(g1.num_nodes() + g2.num_nodes());
    union.append_disjoint(g1).expect("union fits");
    union.append_disjoint(g2).expect("union fits");
    let n1 = g1.num_nodes();
    let mut verdict = WlVerdict::PossiblyIsomorphic;
    let rounds: Vec<_> = wl_color_rounds(&union, max_iters, mode)
        .into_iter()
        .enumerate()
        .map(|(r, colors)| {
            let h1 = ColorHistogram::from_colors(&colors[..n1], r);
            let h2 = ColorHistogram::from_colors(&colors[n1..], r);
            if h1 != h2 {
                verdict = WlVerdict::Distinguished;
            }
            (h1, h2)
        })
        .collect();
    WlComparison { verdict, rounds }
}

/// Per-node and per-edge motif counts.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct MotifFeatures {
    /// `vertex_counts[i][m]`: distinct copies of motif `m` containing node `i`.
    pub vertex_counts: Vec<Vec<u32>>,
    /// `edge_counts[k][m]`: distinct copies of motif `m` containing edge
    /// `g.edges()[k]`.
    pub edge_counts: Vec<Vec<u32>>,
}

impl MotifFeatures {
    pub fn compute(g: &MolecularGraph, cycles: &[usize]) -> Self {
        let patterns: Vec<PatternGraph> = cycles.iter().map(|&k| PatternGraph::cycle(k)).collect();
        Self::compute_patterns(g, &patterns)
    }

    /// Counts for arbitrary (connected or not) pattern graphs.
    pub fn compute_patterns(g: &MolecularGraph, patterns: &[PatternGraph]) -> Self {
        let m = patterns.len();
        let mut vertex_counts = vec![vec![0u32; m]; g.num_nodes()];
        let mut edge_counts = vec![vec![0u32; m]; g.num_edges()];
        let edge_index: BTreeMap<(usize, usize), usize> = g
            .edges()
            .iter()
            .enumerate()
            .map(|(k, e)| ((e.i, e.j), k))
            .collect();
        for (mi, pattern) in patterns.iter().enumerate() {
            let pedges = pattern.edges();
            for mapping in subgraph_matches(g, pattern) {
                for &v in &mapping {
                    vertex_counts[v][mi] += 1;
                }
                for &(a, b) in &pedges {
                    let (x, y) = (mapping[a], mapping[b]);
                    let key = (x.min(y), x.max(y));
                    edge_counts[edge_index[&key]][mi] += 1;
                }
            }
        }
        MotifFeatures {
            vertex_counts,
            edge_counts,
        }
    }

    pub fn motif_count(&self) -> usize {
        self.vertex_counts
            .first()
            .or(self.edge_counts.first())
            .map_or(0, Vec::len)
    }
}

/// `x^V_{C_k}(i)` for each requested cycle size.
pub fn count_vertex_substructures(g: &MolecularGraph, cycles: &[usize]) -> Vec<Vec<u32>> {
    MotifFeatures::compute(g, cycles).vertex_counts
}

/// `x^E_{C_k}(i, j)` for each edge of `g` (in `g.edges()` order).
pub fn count_edge_substructures(g: &MolecularGraph, cycles: &[usize]) -> Vec<Vec<u32>> {
    MotifFeatures::compute(g, cycles).edge_counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::parse_smiles;

    fn g(s: &str) -> MolecularGraph {
        parse_smiles(s).unwrap()
    }

    #[test]
    fn refine_examples() {
        let mut two = MolecularGraph::new();
        two.add_atom(crate::molgraph::AtomType::C).unwrap();
        two.add_atom(crate::molgraph::AtomType::C).unwrap();
        let h = wl_refine(&two, 5);
        assert_eq!(h.counts.values().copied().collect::<Vec<_>>(), vec![2]);
        assert_eq!(h.round, 0);

        let h = wl_refine(&g("CCC"), 5);
        let mut counts: Vec<_> = h.counts.values().copied().collect();
        counts.sort();
        assert_eq!(counts, vec![1, 2]);

        let h = wl_refine(&g("C1CCCCC1"), 5);
        assert_eq!(h.counts.values().copied().collect::<Vec<_>>(), vec![6]);
        assert_eq!(h.round, 0);
    }

    #[test]
    fn compare_examples() {
        let c6 = g("C1CCCCC1");
        let two_c3 = g("C1CC1");
        let mut pair = two_c3.clone();
        pair.append_disjoint(&two_c3).unwrap();
        assert_eq!(wl_compare(&c6, &pair, 10), WlVerdict::PossiblyIsomorphic);
        assert_eq!(wl_compare(&g("CCC"), &g("C1CC1"), 10), WlVerdict::Distinguished);
        let gg = g("CC(O)CN");
        assert_eq!(wl_compare(&gg, &gg.relabel(&[4, 2, 0, 1, 3]), 10), WlVerdict::PossiblyIsomorphic);
        // Attributed mode separates bond orders that topology mode cannot.
        assert_eq!(wl_compare(&g("CC"), &g("C=C"), 3), WlVerdict::Distinguished);
        assert_eq!(
            wl_compare_with(&g("CC"), &g("C=C"), 3, WlMode::Topology).verdict,
            WlVerdict::PossiblyIsomorphic
        );
    }

    #[test]
    fn motif_examples() {
        let c6 = g("C1CCCCC1");
        for row in count_vertex_substructures(&c6, &DEFAULT_CYCLES) {
            assert_eq!(row, vec![0, 0, 0, 1, 0, 0]);
        }
        for row in count_edge_substructures(&c6, &DEFAULT_CYCLES) {
            assert_eq!(row, vec![0, 0, 0, 1, 0, 0]);
        }
        let mut two = g("C1CC1");
        two.append_disjoint(&g("C1CC1")).unwrap();
        for row in count_vertex_substructures(&two, &DEFAULT_CYCLES) {
            assert_eq!(row, vec![1, 0, 0, 0, 0, 0]);
        }
        let tree = g("CC(C)C(N)O");
        assert!(count_edge_substructures(&tree, &DEFAULT_CYCLES)
            .iter()
            .all(|r| r.iter().all(|&c| c == 0)));
        let k4 = crate::molgraph::MolecularGraph::from_parts(
            &[crate::molgraph::AtomType::C; 4],
            &[(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]
                .map(|(i, j)| (i, j, crate::molgraph::BondType::Single)),
        )
        .unwrap();
        assert!(count_vertex_substructures(&k4, &[3]).iter().all(|r| r == &vec![3]));
        assert!(count_edge_substructures(&k4, &[3]).iter().all(|r| r == &vec![2]));
    }
}
