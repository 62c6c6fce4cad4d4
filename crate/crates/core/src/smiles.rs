//! Kekulized SMILES subset: organic-subset atoms without brackets, branches,
//! ring closures (`1`..`9`, `%nn`), and the bond symbols `-`, `=`, `#`.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use thiserror::Error;

use crate::molgraph::{check_valence, AtomType, BondType, GraphError, MolecularGraph};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SmilesError {
    #[error("empty input")]
    EmptyInput { offset: usize },
    #[error("unknown element {symbol:?} at byte {offset}")]
    UnknownElement { symbol: String, offset: usize },
    #[error("unsupported SMILES syntax {what:?} at byte {offset}")]
    Unsupported { what: String, offset: usize },
    #[error("ring closure {label} opened at byte {offset} is never closed")]
    UnclosedRing { label: u32, offset: usize },
    #[error("unbalanced parenthesis at byte {offset}")]
    UnbalancedParenthesis { offset: usize },
    #[error("invalid ring bond at byte {offset}: {reason}")]
    InvalidRingBond { reason: String, offset: usize },
    #[error("bond symbol at byte {offset} is not followed by an atom")]
    DanglingBond { offset: usize },
    #[error("valence exceeded on {atom} at byte {offset}")]
    ValenceViolation { atom: AtomType, offset: usize },
    #[error("molecule exceeds {limit} heavy atoms at byte {offset}")]
    SizeLimit { limit: usize, offset: usize },
}

impl SmilesError {
    pub fn offset(&self) -> usize {
        match self {
            SmilesError::EmptyInput { offset }
            | SmilesError::UnknownElement { offset, .. }
            | SmilesError::Unsupported { offset, .. }
            | SmilesError::UnclosedRing { offset, .. }
            | SmilesError::UnbalancedParenthesis { offset }
            | SmilesError::InvalidRingBond { offset, .. }
            | SmilesError::DanglingBond { offset }
            | SmilesError::ValenceViolation { offset, .. }
            | SmilesError::SizeLimit { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SmilesToken {
    Atom(AtomType),
    Bond(BondType),
    BranchOpen,
    BranchClose,
    RingClosure(u32),
}

/// Splits `text` into tokens paired with their byte offsets.
pub fn tokenize(text: &str) -> Result<Vec<(usize, SmilesToken)>, SmilesError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let c = bytes[pos];
        let start = pos;
        let token = match c {
            b'C' if bytes.get(pos + 1) == Some(&b'l') => {
                pos += 1;
                SmilesToken::Atom(AtomType::Cl)
            }
            b'B' if bytes.get(pos + 1) == Some(&b'r') => {
                pos += 1;
                SmilesToken::Atom(AtomType::Br)
            }
            b'A'..=b'Z' => {
                let symbol = (c as char).to_string();
                match AtomType::from_symbol(&symbol) {
                    Some(a) => SmilesToken::Atom(a),
                    None => return Err(SmilesError::UnknownElement { symbol, offset: pos }),
                }
            }
            b'-' => SmilesToken::Bond(BondType::Single),
            b'=' => SmilesToken::Bond(BondType::Double),
            b'#' => SmilesToken::Bond(BondType::Triple),
            b'(' => SmilesToken::BranchOpen,
            b')' => SmilesToken::BranchClose,
            b'0'..=b'9' => SmilesToken::RingClosure(u32::from(c - b'0')),
            b'%' => {
                let digits = bytes.get(pos + 1..pos + 3).filter(|d| d.iter().all(u8::is_ascii_digit));
                match digits {
                    Some(d) => {
                        pos += 2;
                        SmilesToken::RingClosure(u32::from(d[0] - b'0') * 10 + u32::from(d[1] - b'0'))
                    }
                    None => {
                        return Err(SmilesError::Unsupported {
                            what: "'%' must be followed by two digits".into(),
                            offset: pos,
                        })
                    }
                }
            }
            b'a'..=b'z' => {
                return Err(SmilesError::Unsupported {
                    what: format!("aromatic atom '{}'", c as char),
                    offset: pos,
                })
            }
            _ => {
                let what = text[pos..].chars().next().map(String::from).unwrap_or_default();
                return Err(SmilesError::Unsupported { what, offset: pos });
            }
        };
        out.push((start, token));
        pos += 1;
    }
    Ok(out)
}

struct OpenRing {
    atom: usize,
    bond: Option<BondType>,
    offset: usize,
}

/// Parses a SMILES string in the supported subset into a valence-checked graph.
pub fn parse_smiles(text: &str) -> Result<MolecularGraph, SmilesError> {
    parse_smiles_with_limit(text, crate::molgraph::DEFAULT_MAX_NODES)
}

pub fn parse_smiles_with_limit(text: &str, max_nodes: usize) -> Result<MolecularGraph, SmilesError> {
    if text.trim().is_empty() {
        return Err(SmilesError::EmptyInput { offset: 0 });
    }
    let tokens = tokenize(text)?;
    let mut g = MolecularGraph::with_max_nodes(max_nodes);
    let mut atom_offsets = Vec::new();
    let mut prev: Option<usize> = None;
    let mut pending: Option<(BondType, usize)> = None;
    let mut branches: Vec<(usize, usize)> = Vec::new();
    let mut rings: BTreeMap<u32, OpenRing> = BTreeMap::new();

    for &(offset, token) in &tokens {
        match token {
            SmilesToken::Atom(atom) => {
                let idx = g.add_atom(atom).map_err(|_| SmilesError::SizeLimit {
                    limit: max_nodes,
                    offset,
                })?;
                atom_offsets.push(offset);
                if let Some(p) = prev {
                    let bond = pending.take().map_or(BondType::Single, |(b, _)| b);
                    g.add_bond(p, idx, bond).expect("fresh atom cannot duplicate a bond");
                } else if let Some((_, bond_offset)) = pending {
                    return Err(SmilesError::DanglingBond { offset: bond_offset });
                }
                prev = Some(idx);
            }
            SmilesToken::Bond(b) => {
                if pending.is_some() || prev.is_none() {
                    return Err(SmilesError::DanglingBond { offset });
                }
                pending = Some((b, offset));
            }
            SmilesToken::BranchOpen => {
                let p = prev.ok_or(SmilesError::UnbalancedParenthesis { offset })?;
                if let Some((_, bond_offset)) = pending {
                    return Err(SmilesError::DanglingBond { offset: bond_offset });
                }
                branches.push((p, offset));
            }
            SmilesToken::BranchClose => {
                let (p, _) = branches
                    .pop()
                    .ok_or(SmilesError::UnbalancedParenthesis { offset })?;
                if let Some((_, bond_offset)) = pending {
                    return Err(SmilesError::DanglingBond { offset: bond_offset });
                }
                prev = Some(p);
            }
            SmilesToken::RingClosure(label) => {
                let atom = prev.ok_or(SmilesError::InvalidRingBond {
                    reason: "ring closure before any atom".into(),
                    offset,
                })?;
                let bond_here = pending.take().map(|(b, _)| b);
                match rings.remove(&label) {
                    None => {
                        rings.insert(
                            label,
                            OpenRing {
                                atom,
                                bond: bond_here,
                                offset,
                            },
                        );
                    }
                    Some(open) => {
                        let bond = match (open.bond, bond_here) {
                            (Some(a), Some(b)) if a != b => {
                                return Err(SmilesError::InvalidRingBond {
                                    reason: "conflicting bond symbols".into(),
                                    offset,
                                })
                            }
                            (a, b) => a.or(b).unwrap_or(BondType::Single),
                        };
                        g.add_bond(open.atom, atom, bond).map_err(|e| {
                            let reason = match e {
                                GraphError::SelfLoop(_) => "ring closes on the same atom",
                                _ => "atoms already bonded",
                            };
                            SmilesError::InvalidRingBond {
                                reason: reason.into(),
                                offset,
                            }
                        })?;
                    }
                }
            }
        }
    }
    if let Some((_, bond_offset)) = pending {
        return Err(SmilesError::DanglingBond { offset: bond_offset });
    }
    if let Some(&(_, offset)) = branches.last() {
        return Err(SmilesError::UnbalancedParenthesis { offset });
    }
    if let Some((&label, open)) = rings.iter().next() {
        return Err(SmilesError::UnclosedRing {
            label,
            offset: open.offset,
        });
    }
    if let Some(v) = check_valence(&g).first() {
        return Err(SmilesError::ValenceViolation {
            atom: v.atom,
            offset: atom_offsets[v.node],
        });
    }
    Ok(g)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WriteError {
    #[error("cannot write an empty graph")]
    EmptyGraph,
    #[error("graph is disconnected ({0} components)")]
    DisconnectedGraph(usize),
}

/// Writes `g` as SMILES by depth-first traversal from node 0, visiting
/// neighbors in index order. Output is deterministic but not canonical.
pub fn write_smiles(g: &MolecularGraph) -> Result<String, WriteError> {
    write_smiles_ranked(g).map(|(s, _)| s)
}

/// As [`write_smiles`], also returning for every node its position in the
/// output, which is the index the parser gives it.
pub fn write_smiles_ranked(g: &MolecularGraph) -> Result<(String, Vec<usize>), WriteError> {
    if g.is_empty() {
        return Err(WriteError::EmptyGraph);
    }
    let components = g.components().len();
    if components != 1 {
        return Err(WriteError::DisconnectedGraph(components));
    }
    let n = g.num_nodes();
    let mut tree = Writer {
        g,
        visited: vec![false; n],
        children: vec![Vec::new(); n],
        closures: vec![Vec::new(); n],
        rank: vec![0; n],
        next_rank: 0,
    };
    tree.visit(0, None);
    let mut out = String::new();
    let mut digits = RingDigits::default();
    tree.emit(0, &mut out, &mut digits);
    Ok((out, tree.rank))
}

/// True when `g` can be written and the text parses back to exactly `g` up
/// to the writer's node order (same atoms, same typed bonds). Works for any
/// size, unlike a generic isomorphism test.
pub fn round_trips(g: &MolecularGraph) -> bool {
    let Ok((text, rank)) = write_smiles_ranked(g) else {
        return false;
    };
    let Ok(parsed) = parse_smiles_with_limit(&text, g.num_nodes()) else {
        return false;
    };
    let expected = g.relabel(&rank);
    parsed.atoms() == expected.atoms() && parsed.adjacency_matrix() == expected.adjacency_matrix()
}

struct Writer<'a> {
    g: &'a MolecularGraph,
    visited: Vec<bool>,
    children: Vec<Vec<usize>>,
    // (partner, opens_here)
    closures: Vec<Vec<(usize, bool)>>,
    rank: Vec<usize>,
    next_rank: usize,
}

impl Writer<'_> {
    fn visit(&mut self, u: usize, parent: Option<usize>) {
        self.visited[u] = true;
        self.rank[u] = self.next_rank;
        self.next_rank += 1;
        for &(v, _) in self.g.neighbors(u) {
            if Some(v) == parent {
                continue;
            }
            if !self.visited[v] {
                self.children[u].push(v);
                self.visit(v, Some(u));
            } else if self.rank[v] < self.rank[u]
                && !self.closures[u].iter().any(|&(p, _)| p == v)
            {
                // Back edge to an ancestor: opens at the ancestor.
                self.closures[v].push((u, true));
                self.closures[u].push((v, false));
            }
        }
    }

    fn emit(&self, u: usize, out: &mut String, digits: &mut RingDigits) {
        out.push_str(self.g.atom(u).symbol());
        let mut closing: Vec<_> = self.closures[u].iter().filter(|c| !c.1).map(|c| c.0).collect();
        closing.sort_by_key(|&p| self.rank[p]);
        for p in closing {
            let label = digits.close((p, u));
            push_label(out, label);
        }
        let mut opening: Vec<_> = self.closures[u].iter().filter(|c| c.1).map(|c| c.0).collect();
        opening.sort_by_key(|&p| self.rank[p]);
        for p in opening {
            let bond = self.g.bond(u, p).expect("closure edge exists");
            out.push_str(bond.symbol());
            let label = digits.open((u, p));
            push_label(out, label);
        }
        let kids = &self.children[u];
        for (k, &v) in kids.iter().enumerate() {
            let bond = self.g.bond(u, v).expect("tree edge exists");
            let branch = k + 1 < kids.len();
            if branch {
                out.push('(');
            }
            out.push_str(bond.symbol());
            self.emit(v, out, digits);
            if branch {
                out.push(')');
            }
        }
    }
}

#[derive(Default)]
struct RingDigits {
    // label -> (opener, closer)
    in_use: BTreeMap<u32, (usize, usize)>,
}

impl RingDigits {
    fn open(&mut self, pair: (usize, usize)) -> u32 {
        let label = (1..).find(|l| !self.in_use.contains_key(l)).expect("unbounded");
        self.in_use.insert(label, pair);
        label
    }

    fn close(&mut self, pair: (usize, usize)) -> u32 {
        let label = *self
            .in_use
            .iter()
            .find(|(_, &p)| p == pair)
            .map(|(l, _)| l)
            .expect("closure was opened");
        self.in_use.remove(&label);
        label
    }
}

fn push_label(out: &mut String, label: u32) {
    if label < 10 {
        out.push(char::from(b'0' + label as u8));
    } else {
        out.push_str(&format!("%{label:02}"));
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read corpus: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {error}")]
    Parse { line: usize, error: SmilesError },
}

/// Lines that failed to parse in non-strict mode, in file order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusReport {
    pub skipped: Vec<(usize, SmilesError)>,
}

/// Parses the SMILES lines of `text`. Blank lines and lines starting with
/// `#` are ignored; only the first whitespace-separated field is read.
pub fn parse_corpus(
    text: &str,
    strict: bool,
) -> Result<(Vec<MolecularGraph>, CorpusReport), CorpusError> {
    let lines: Vec<(usize, &str)> = text
        .lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim_end_matches('\r').trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
        .collect();
    let parsed: Vec<(usize, Result<MolecularGraph, SmilesError>)> = lines
        .par_iter()
        .map(|&(line, l)| {
            let field = l.split_whitespace().next().unwrap_or("");
            (line, parse_smiles(field))
        })
        .collect();
    let mut graphs = Vec::with_capacity(parsed.len());
    let mut report = CorpusReport::default();
    for (line, result) in parsed {
        match result {
            Ok(g) => graphs.push(g),
            Err(error) if strict => return Err(CorpusError::Parse { line, error }),
            Err(error) => report.skipped.push((line, error)),
        }
    }
    Ok((graphs, report))
}

pub fn load_corpus(
    path: impl AsRef<Path>,
    strict: bool,
) -> Result<(Vec<MolecularGraph>, CorpusReport), CorpusError> {
    let text = std::fs::read_to_string(path)?;
    parse_corpus(&text, strict)
}

/// Leaves explored by [`canonical_order`] before it settles for the best
/// certificate found so far (only reached by highly symmetric graphs).
pub const CANONICAL_LEAF_BUDGET: usize = 4096;

/// Certificate of a labeled graph: atoms in order, then sorted typed edges.
type Certificate = (Vec<usize>, Vec<(usize, usize, u32)>);

fn certificate(g: &MolecularGraph, perm: &[usize]) -> Certificate {
    let mut atoms = vec![0; g.num_nodes()];
    for (old, &new) in perm.iter().enumerate() {
        atoms[new] = g.atom(old).index();
    }
    let mut edges: Vec<(usize, usize, u32)> = g
        .edges()
        .iter()
        .map(|e| {
            let (a, b) = (perm[e.i], perm[e.j]);
            (a.min(b), a.max(b), e.bond.order())
        })
        .collect();
    edges.sort_unstable();
    (atoms, edges)
}

/// Ranks of `keys` among their distinct values: injective and independent
/// of node numbering.
fn rank_keys<K: Ord + Clone>(keys: &[K]) -> Vec<usize> {
    let mut distinct = keys.to_vec();
    distinct.sort();
    distinct.dedup();
    keys.iter().map(|k| distinct.binary_search(k).expect("present")).collect()
}

fn distinct_count(colors: &[usize]) -> usize {
    let mut c = colors.to_vec();
    c.sort_unstable();
    c.dedup();
    c.len()
}

/// Attributed color refinement until the partition is stable.
fn refine_stable(g: &MolecularGraph, mut colors: Vec<usize>) -> Vec<usize> {
    loop {
        let sigs: Vec<(usize, Vec<(u32, usize)>)> = (0..g.num_nodes())
            .map(|i| {
                let mut nb: Vec<(u32, usize)> = g.neighbors(i).iter().map(|&(j, b)| (b.order(), colors[j])).collect();
                nb.sort_unstable();
                (colors[i], nb)
            })
            .collect();
        let next = rank_keys(&sigs);
        if distinct_count(&next) == distinct_count(&colors) {
            return next;
        }
        colors = next;
    }
}

/// Canonical node order by individualization-refinement: `perm[i]` is the
/// canonical position of node `i`. Isomorphic graphs yield identical
/// relabeled graphs (within [`CANONICAL_LEAF_BUDGET`]).
pub fn canonical_order(g: &MolecularGraph) -> Vec<usize> {
    if g.is_empty() {
        return Vec::new();
    }
    let initial = refine_stable(g, rank_keys(&g.atoms().iter().map(|a| a.index()).collect::<Vec<_>>()));
    let mut best: Option<(Certificate, Vec<usize>)> = None;
    let mut leaves = 0;
    search_canonical(g, initial, &mut best, &mut leaves);
    best.expect("at least one leaf").1
}

fn search_canonical(g: &MolecularGraph, colors: Vec<usize>, best: &mut Option<(Certificate, Vec<usize>)>, leaves: &mut usize) {
    let n = colors.len();
    // First non-singleton cell by color.
    let mut sizes = vec![0usize; n];
    for &c in &colors {
        sizes[c] += 1;
    }
    let Some(cell) = (0..n).find(|&c| sizes[c] > 1) else {
        *leaves += 1;
        let cert = certificate(g, &colors);
        if best.as_ref().is_none_or(|(b, _)| cert < *b) {
            *best = Some((cert, colors));
        }
        return;
    };
    for v in (0..n).filter(|&v| colors[v] == cell) {
        if *leaves >= CANONICAL_LEAF_BUDGET && best.is_some() {
            return;
        }
        // Individualize v: it precedes the rest of its cell.
        let keys: Vec<(usize, bool)> = (0..n).map(|u| (colors[u], u != v)).collect();
        search_canonical(g, refine_stable(g, rank_keys(&keys)), best, leaves);
    }
}

/// Canonical SMILES: [`write_smiles`] of the canonically relabeled graph
/// with bonds in sorted order. Equal for isomorphic graphs.
pub fn canonical_smiles(g: &MolecularGraph) -> Result<String, WriteError> {
    if g.is_empty() {
        return Err(WriteError::EmptyGraph);
    }
    let perm = canonical_order(g);
    let (atoms, edges) = certificate(g, &perm);
    let atoms: Vec<AtomType> = atoms.into_iter().map(|a| AtomType::from_index(a).expect("atom index")).collect();
    let bonds: Vec<(usize, usize, BondType)> = edges
        .into_iter()
        .map(|(i, j, o)| (i, j, BondType::from_order(o).expect("bond order")))
        .collect();
    let mut canon = MolecularGraph::from_parts(&atoms, &bonds).expect("relabeling preserves validity");
    canon.set_max_nodes(g.max_nodes().max(g.num_nodes()));
    write_smiles(&canon)
}
