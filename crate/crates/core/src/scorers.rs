//! Molecular scorers for the RL loop: Morgan-style fingerprints, Tanimoto
//! similarity, a penalized-logP surrogate and structural objectives, behind
//! a small name-based registry.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::molgraph::{AtomType, MolecularGraph, DEFAULT_MAX_NODES};
use crate::smiles::{parse_smiles, SmilesError};

pub const DEFAULT_FP_BITS: usize = 1024;
pub const DEFAULT_FP_RADIUS: usize = 2;
/// Node-expansion budget of the longest-carbon-path search.
pub const CHAIN_SEARCH_BUDGET: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScorerError {
    #[error("unknown scorer {name:?}; known scorers: {}", known.join(", "))]
    UnknownScorer { name: String, known: Vec<String> },
    #[error("scorer {scorer}: bad parameter {param:?}: {reason}")]
    BadParameter { scorer: String, param: String, reason: String },
    #[error("fingerprint lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("target SMILES {smiles:?}: {error}")]
    Target { smiles: String, error: SmilesError },
}

/// Fixed-length bit set of hashed atom environments.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Fingerprint {
    words: Vec<u64>,
    nbits: usize,
    pub radius: usize,
}

impl Fingerprint {
    pub fn empty(nbits: usize, radius: usize) -> Self {
        Fingerprint {
            words: vec![0; nbits.div_ceil(64)],
            nbits,
            radius,
        }
    }

    pub fn nbits(&self) -> usize {
        self.nbits
    }

    pub fn set(&mut self, bit: usize) {
        self.words[bit / 64] |= 1 << (bit % 64);
    }

    pub fn get(&self, bit: usize) -> bool {
        self.words[bit / 64] >> (bit % 64) & 1 == 1
    }

    pub fn count_ones(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Indices of the set bits, ascending.
    pub fn ones(&self) -> Vec<usize> {
        (0..self.nbits).filter(|&b| self.get(b)).collect()
    }
}

/// 64-bit FNV-1a over the little-endian bytes of `values`. Fixed across
/// platforms and releases, unlike `std`'s default hasher.
fn fnv1a(values: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// ECFP-style fingerprint: atom identifiers start from (element, degree,
/// bond-order sum) and are refined `radius` times over the sorted
/// (bond order, neighbor id) pairs. Every identifier of every round sets bit
/// `id mod nbits`.
pub fn morgan_fingerprint(g: &MolecularGraph, radius: usize, nbits: usize) -> Fingerprint {
    assert!(nbits > 0, "fingerprint needs at least one bit");
    let mut fp = Fingerprint::empty(nbits, radius);
    let mut ids: Vec<u64> = (0..g.num_nodes())
        .map(|i| {
            fnv1a(&[
                g.atom(i).index() as u64,
                g.degree(i) as u64,
                u64::from(g.bond_order_sum(i)),
            ])
        })
        .collect();
    for round in 0..=radius {
        if round > 0 {
            ids = (0..g.num_nodes())
                .map(|i| {
                    let mut env: Vec<(u64, u64)> = g
                        .neighbors(i)
                        .iter()
                        .map(|&(j, b)| (u64::from(b.order()), ids[j]))
                        .collect();
                    env.sort_unstable();
                    let mut words = vec![round as u64, ids[i]];
                    words.extend(env.into_iter().flat_map(|(b, id)| [b, id]));
                    fnv1a(&words)
                })
                .collect();
        }
        for &id in &ids {
            fp.set((id % nbits as u64) as usize);
        }
    }
    fp
}

/// `|a ∧ b| / |a ∨ b|`, 1.0 when both are empty.
pub fn tanimoto(a: &Fingerprint, b: &Fingerprint) -> Result<f64, ScorerError> {
    if a.nbits != b.nbits {
        return Err(ScorerError::LengthMismatch(a.nbits, b.nbits));
    }
    let (mut both, mut either) = (0u32, 0u32);
    for (x, y) in a.words.iter().zip(&b.words) {
        both += (x & y).count_ones();
        either += (x | y).count_ones();
    }
    Ok(if either == 0 { 1.0 } else { f64::from(both) / f64::from(either) })
}

/// Mean Tanimoto similarity of `g` to two targets (default fingerprints).
pub fn median_scorer(g: &MolecularGraph, target_a: &str, target_b: &str) -> Result<f64, ScorerError> {
    let a = target_fingerprint(target_a)?;
    let b = target_fingerprint(target_b)?;
    Ok(median_score(g, &a, &b))
}

fn target_fingerprint(smiles: &str) -> Result<Fingerprint, ScorerError> {
    let g = parse_smiles(smiles).map_err(|error| ScorerError::Target {
        smiles: smiles.to_string(),
        error,
    })?;
    Ok(morgan_fingerprint(&g, DEFAULT_FP_RADIUS, DEFAULT_FP_BITS))
}

fn median_score(g: &MolecularGraph, a: &Fingerprint, b: &Fingerprint) -> f64 {
    let fp = morgan_fingerprint(g, DEFAULT_FP_RADIUS, DEFAULT_FP_BITS);
    let ta = tanimoto(&fp, a).expect("same length");
    let tb = tanimoto(&fp, b).expect("same length");
    (ta + tb) / 2.0
}

/// Per-element contribution of the logP surrogate.
pub fn plogp_contribution(atom: AtomType) -> f64 {
    match atom {
        AtomType::C => 0.4,
        AtomType::N => -0.2,
        AtomType::O => -0.3,
        AtomType::F => 0.1,
        AtomType::P => 0.0,
        AtomType::S => 0.2,
        AtomType::Cl => 0.5,
        AtomType::Br => 0.6,
        AtomType::I => 0.7,
    }
}

/// Size of the largest ring, where the ring of an edge is the shortest cycle
/// through it. 0 for acyclic graphs.
pub fn largest_ring_size(g: &MolecularGraph) -> usize {
    let mut largest = 0;
    for e in g.edges() {
        // Shortest u -> v path avoiding the edge itself.
        let mut dist = vec![usize::MAX; g.num_nodes()];
        dist[e.i] = 0;
        let mut queue = VecDeque::from([e.i]);
        while let Some(u) = queue.pop_front() {
            for &(w, _) in g.neighbors(u) {
                if (u == e.i && w == e.j) || dist[w] != usize::MAX {
                    continue;
                }
                dist[w] = dist[u] + 1;
                queue.push_back(w);
            }
        }
        if dist[e.j] != usize::MAX {
            largest = largest.max(dist[e.j] + 1);
        }
    }
    largest
}

/// Documented surrogate of penalized logP:
/// `Σ contribution(atom) − 0.5·max(0, largest ring − 6) − 0.05·|edges|`.
pub fn plogp_surrogate(g: &MolecularGraph) -> f64 {
    let atoms: f64 = g.atoms().iter().map(|&a| plogp_contribution(a)).sum();
    let ring_penalty = 0.5 * largest_ring_size(g).saturating_sub(6) as f64;
    atoms - ring_penalty - 0.05 * g.num_edges() as f64
}

/// Number of atoms on the longest simple path through carbon atoms only.
/// Depth-first search from every carbon, stopping after `budget` node
/// expansions (exact for the molecule sizes generated here).
pub fn longest_carbon_path(g: &MolecularGraph, budget: usize) -> usize {
    let carbon: Vec<bool> = g.atoms().iter().map(|&a| a == AtomType::C).collect();
    let mut best = 0;
    let mut expansions = 0;
    let mut on_path = vec![false; g.num_nodes()];
    fn dfs(
        g: &MolecularGraph,
        carbon: &[bool],
        u: usize,
        depth: usize,
        on_path: &mut [bool],
        best: &mut usize,
        expansions: &mut usize,
        budget: usize,
    ) {
        *best = (*best).max(depth);
        *expansions += 1;
        if *expansions >= budget {
            return;
        }
        on_path[u] = true;
        for &(v, _) in g.neighbors(u) {
            if carbon[v] && !on_path[v] {
                dfs(g, carbon, v, depth + 1, on_path, best, expansions, budget);
            }
        }
        on_path[u] = false;
    }
    // Endpoints of a longest path in a tree have carbon-degree <= 1, so try
    // those first; fall back to every carbon for cyclic parts.
    let degree = |u: usize| g.neighbors(u).iter().filter(|&&(v, _)| carbon[v]).count();
    let mut starts: Vec<usize> = (0..g.num_nodes()).filter(|&u| carbon[u]).collect();
    starts.sort_by_key(|&u| (degree(u) > 1, u));
    for u in starts {
        if expansions >= budget {
            break;
        }
        dfs(g, &carbon, u, 1, &mut on_path, &mut best, &mut expansions, budget);
    }
    best
}

/// Scorer metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorerSpec {
    pub name: String,
    /// Closed interval every score lies in.
    pub range: (f64, f64),
    /// Similarity targets, if any.
    pub target: Option<String>,
    pub params: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
enum ScorerKind {
    Constant(f64),
    CarbonChain { max_size: usize },
    RingCount,
    PlogpSurrogate,
    Median { a: Fingerprint, b: Fingerprint },
}

/// A registered scorer: metadata plus a pure, shareable scoring function.
#[derive(Debug, Clone, PartialEq)]
pub struct Scorer {
    pub spec: ScorerSpec,
    kind: ScorerKind,
}

/// Names accepted by [`registry`].
pub const BUILTIN_SCORERS: [&str; 5] = ["carbon_chain", "constant", "median", "plogp_surrogate", "ring_count"];

impl Scorer {
    pub fn score(&self, g: &MolecularGraph) -> f64 {
        match &self.kind {
            ScorerKind::Constant(c) => *c,
            ScorerKind::CarbonChain { max_size } => {
                (longest_carbon_path(g, CHAIN_SEARCH_BUDGET) as f64 / *max_size as f64).min(1.0)
            }
            ScorerKind::RingCount => {
                let r = g.ring_count() as f64;
                r / (1.0 + r)
            }
            ScorerKind::PlogpSurrogate => plogp_surrogate(g),
            ScorerKind::Median { a, b } => median_score(g, a, b),
        }
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    /// Parses `name[:key=value,...]` as used by the CLI `--scorer` flag.
    pub fn parse(text: &str) -> Result<Scorer, ScorerError> {
        let (name, rest) = text.split_once(':').unwrap_or((text, ""));
        let mut params = BTreeMap::new();
        for item in rest.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (k, v) = item.split_once('=').ok_or_else(|| ScorerError::BadParameter {
                scorer: name.to_string(),
                param: item.to_string(),
                reason: "expected key=value".into(),
            })?;
            params.insert(k.trim().to_string(), v.trim().to_string());
        }
        registry(name.trim(), &params)
    }
}

impl fmt::Display for Scorer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.spec.name)?;
        let mut sep = ':';
        for (k, v) in &self.spec.params {
            write!(f, "{sep}{k}={v}")?;
            sep = ',';
        }
        Ok(())
    }
}

fn param_f64(scorer: &str, params: &BTreeMap<String, String>, key: &str, default: Option<f64>) -> Result<f64, ScorerError> {
    match params.get(key) {
        Some(v) => v.parse().map_err(|_| ScorerError::BadParameter {
            scorer: scorer.into(),
            param: key.into(),
            reason: format!("{v:?} is not a number"),
        }),
        None => default.ok_or_else(|| ScorerError::BadParameter {
            scorer: scorer.into(),
            param: key.into(),
            reason: "missing".into(),
        }),
    }
}

/// Looks up a built-in scorer. Parameters:
/// `constant` (`c`, default 1), `carbon_chain` (`max_size`, default 48),
/// `median` (`A`, `B`: target SMILES), `ring_count`, `plogp_surrogate`.
pub fn registry(name: &str, params: &BTreeMap<String, String>) -> Result<Scorer, ScorerError> {
    let allowed: &[&str] = match name {
        "constant" => &["c"],
        "carbon_chain" => &["max_size"],
        "median" => &["A", "B"],
        "ring_count" | "plogp_surrogate" => &[],
        _ => {
            return Err(ScorerError::UnknownScorer {
                name: name.to_string(),
                known: BUILTIN_SCORERS.iter().map(|s| s.to_string()).collect(),
            })
        }
    };
    if let Some(bad) = params.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(ScorerError::BadParameter {
            scorer: name.into(),
            param: bad.clone(),
            reason: format!("accepted parameters: {}", allowed.join(", ")),
        });
    }
    let (kind, range, target) = match name {
        "constant" => {
            let c = param_f64(name, params, "c", Some(1.0))?;
            (ScorerKind::Constant(c), (c, c), None)
        }
        "carbon_chain" => {
            let m = param_f64(name, params, "max_size", Some(DEFAULT_MAX_NODES as f64))?;
            if !(m >= 1.0 && m.fract() == 0.0) {
                return Err(ScorerError::BadParameter {
                    scorer: name.into(),
                    param: "max_size".into(),
                    reason: "must be a positive integer".into(),
                });
            }
            (ScorerKind::CarbonChain { max_size: m as usize }, (0.0, 1.0), None)
        }
        "ring_count" => (ScorerKind::RingCount, (0.0, 1.0), None),
        "plogp_surrogate" => (ScorerKind::PlogpSurrogate, (f64::NEG_INFINITY, f64::INFINITY), None),
        "median" => {
            let get = |k: &str| {
                params.get(k).cloned().ok_or_else(|| ScorerError::BadParameter {
                    scorer: name.into(),
                    param: k.into(),
                    reason: "missing target SMILES".into(),
                })
            };
            let (a, b) = (get("A")?, get("B")?);
            let kind = ScorerKind::Median {
                a: target_fingerprint(&a)?,
                b: target_fingerprint(&b)?,
            };
            (kind, (0.0, 1.0), Some(format!("{a},{b}")))
        }
        _ => unreachable!("checked above"),
    };
    Ok(Scorer {
        spec: ScorerSpec {
            name: name.to_string(),
            range,
            target,
            params: params.clone(),
        },
        kind,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(s: &str) -> MolecularGraph {
        parse_smiles(s).unwrap()
    }

    fn params(kv: &[(&str, &str)]) -> BTreeMap<String, String> {
        kv.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn fingerprint_examples() {
        assert_eq!(morgan_fingerprint(&g("C"), 0, 1024).count_ones(), 1);
        let a = g("CC(O)CN");
        assert_eq!(
            morgan_fingerprint(&a, 2, 1024),
            morgan_fingerprint(&a.relabel(&[3, 0, 4, 1, 2]), 2, 1024)
        );
        assert_ne!(morgan_fingerprint(&g("CC"), 2, 1024), morgan_fingerprint(&g("C=C"), 2, 1024));
    }

    #[test]
    fn tanimoto_examples() {
        let f = morgan_fingerprint(&g("CCO"), 2, 64);
        assert_eq!(tanimoto(&f, &f).unwrap(), 1.0);
        let mut a = Fingerprint::empty(8, 0);
        let mut b = Fingerprint::empty(8, 0);
        a.set(0);
        b.set(1);
        assert_eq!(tanimoto(&a, &b).unwrap(), 0.0);
        a.set(1);
        b.set(2);
        assert!((tanimoto(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(tanimoto(&Fingerprint::empty(8, 0), &Fingerprint::empty(8, 0)).unwrap(), 1.0);
        assert!(matches!(tanimoto(&a, &Fingerprint::empty(16, 0)), Err(ScorerError::LengthMismatch(8, 16))));
    }

    #[test]
    fn median_examples() {
        assert_eq!(median_scorer(&g("CCO"), "CCO", "CCO").unwrap(), 1.0);
        // Disjoint fingerprints need disjoint environments: F2-like vs I2-like.
        let s = median_scorer(&g("FF"), "II", "BrBr").unwrap();
        assert_eq!(s, 0.0);
        let s = median_scorer(&g("FF"), "FF", "II").unwrap();
        assert_eq!(s, 0.5);
        assert!(median_scorer(&g("C"), "C1", "C").is_err());
    }

    #[test]
    fn plogp_examples() {
        assert!((plogp_surrogate(&g("C")) - 0.4).abs() < 1e-12);
        assert!((plogp_surrogate(&g("CC")) - 0.75).abs() < 1e-12);
        assert!((plogp_surrogate(&g("CCC")) - 1.1).abs() < 1e-12);
        assert!((plogp_surrogate(&g("C1CCCCCCC1")) - 1.8).abs() < 1e-12);
        assert_eq!(largest_ring_size(&g("C1=CC=C2C=CC=CC2=C1")), 6);
        assert_eq!(largest_ring_size(&g("CCO")), 0);
        let mut chain = g("C");
        for k in 1..30 {
            let before = plogp_surrogate(&chain);
            let n = chain.add_atom(AtomType::C).unwrap();
            chain.add_bond(n - 1, n, crate::molgraph::BondType::Single).unwrap();
            assert!((plogp_surrogate(&chain) - before - 0.35).abs() < 1e-9, "{k}");
        }
    }

    #[test]
    fn carbon_path_examples() {
        assert_eq!(longest_carbon_path(&g("C"), 1000), 1);
        assert_eq!(longest_carbon_path(&g("O"), 1000), 0);
        assert_eq!(longest_carbon_path(&g("CCOCCC"), 1000), 3);
        assert_eq!(longest_carbon_path(&g("CC(C)CC(CC)C"), 1000), 6);
        assert_eq!(longest_carbon_path(&g("C1CCCCC1"), 1000), 6);
    }

    #[test]
    fn registry_examples() {
        let c = registry("constant", &params(&[("c", "1")])).unwrap();
        assert_eq!(c.score(&g("CCO")), 1.0);
        let m = registry("median", &params(&[("A", "C"), ("B", "C")])).unwrap();
        assert_eq!(m.score(&g("C")), 1.0);
        match registry("nope", &BTreeMap::new()) {
            Err(ScorerError::UnknownScorer { known, .. }) => assert_eq!(known.len(), 5),
            other => panic!("{other:?}"),
        }
        let s = Scorer::parse("carbon_chain").unwrap();
        assert!((s.score(&g("CCCC")) - 4.0 / 48.0).abs() < 1e-12);
        let s = Scorer::parse("carbon_chain:max_size=8").unwrap();
        assert_eq!(s.score(&g("CCCC")), 0.5);
        assert_eq!(s.to_string(), "carbon_chain:max_size=8");
        let r = Scorer::parse("ring_count").unwrap();
        assert_eq!(r.score(&g("C1CC1")), 0.5);
        assert_eq!(r.score(&g("CC")), 0.0);
        let m = Scorer::parse("median:A=C=C,B=CCO").unwrap();
        assert_eq!(m.spec.params["A"], "C=C");
        assert!(Scorer::parse("constant:x=1").is_err());
        assert!(Scorer::parse("constant:c=abc").is_err());
        assert!(Scorer::parse("median:A=C").is_err());
    }
}
