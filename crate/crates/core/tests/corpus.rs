//! The bundled corpus parses strictly into connected, valence-valid
//! molecules within the size cap, and every molecule decomposes into a
//! training trajectory for both frameworks.

use molgen_core::gcpn::{bfs_decomposition, ScaffoldSet};
use molgen_core::graphaf::flow_decomposition;
use molgen_core::molgraph::{check_valence, DEFAULT_MAX_NODES};
use molgen_core::smiles::{load_corpus, round_trips};

pub const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/corpus500.smi");

#[test]
fn bundled_corpus_is_clean() {
    let (graphs, report) = load_corpus(CORPUS, true).expect("strict parse");
    assert!(report.skipped.is_empty());
    assert_eq!(graphs.len(), 500);
    let scaffolds = ScaffoldSet::single_atoms();
    for g in &graphs {
        assert!(g.is_connected());
        assert!(check_valence(g).is_empty());
        assert!((5..=DEFAULT_MAX_NODES).contains(&g.num_nodes()));
        assert!(round_trips(g));
        bfs_decomposition(g, &scaffolds, DEFAULT_MAX_NODES).expect("gcpn decomposition");
        flow_decomposition(g, DEFAULT_MAX_NODES).expect("graphaf decomposition");
    }
    let mean = graphs.iter().map(|g| g.num_nodes()).sum::<usize>() as f64 / 500.0;
    println!("corpus: 500 molecules, mean size {mean:.1} atoms");
}
