//! End-to-end tests of the `molgen` binary: exit codes, the documented
//! command examples, and byte-identical reruns.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use molgen_core::molgraph::{check_valence, DEFAULT_MAX_NODES};
use molgen_core::smiles::parse_smiles;

const CORPUS: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/data/corpus500.smi");

fn molgen(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molgen")).args(args).output().expect("run molgen")
}

fn ok(args: &[&str]) -> String {
    let out = molgen(args);
    assert!(
        out.status.success(),
        "molgen {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// The first 100 corpus molecules.
fn toy_corpus(dir: &Path) -> PathBuf {
    let text: String = fs::read_to_string(CORPUS)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .take(100)
        .map(|l| format!("{l}\n"))
        .collect();
    write(dir, "toy.smi", &text)
}

fn pretrain(dir: &Path, framework: &str, out: &str) -> PathBuf {
    let data = toy_corpus(dir);
    let ckpt = dir.join(out);
    ok(&[
        "pretrain", "--data", s(&data), "--framework", framework, "--gnn", "gin", "--hidden", "16", "--batch", "16",
        "--steps", "6", "--seed", "3", "--out", s(&ckpt),
    ]);
    ckpt
}

fn smiles_lines(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#') && !l.is_empty()).collect()
}

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = molgen(&["finetune", "--ckpt", "x.mgf", "--out", "y.mgf"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--scorer"));
    assert_eq!(molgen(&["no-such-command"]).status.code(), Some(2));
    let input = write(dir.path(), "in.smi", "CC\n");
    let out = molgen(&["evaluate", "--in", s(&input), "--scorer", "qed"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("carbon_chain"), "known scorers are listed");
    let missing = dir.path().join("missing.mgf");
    let out = molgen(&["generate", "--ckpt", s(&missing), "--out", s(&dir.path().join("o.smi"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn evaluate_examples() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "in.smi", "C\nCC\nCCC\n");
    let csv = dir.path().join("top.csv");
    let out = ok(&["evaluate", "--in", s(&input), "--scorer", "plogp_surrogate", "--csv", s(&csv)]);
    let rows: Vec<Vec<&str>> = out.lines().map(|l| l.split_whitespace().collect()).collect();
    assert_eq!(
        rows,
        vec![vec!["1", "CCC", "1.100000"], vec!["2", "CC", "0.750000"], vec!["3", "C", "0.400000"]]
    );
    let table = fs::read_to_string(&csv).unwrap();
    assert!(table.starts_with("rank,smiles,score\n1,CCC,"));
    // top larger than the input lists everything.
    assert_eq!(ok(&["evaluate", "--in", s(&input), "--scorer", "carbon_chain", "--top", "10"]).lines().count(), 3);
    // Empty input: empty table, warning, exit 0.
    let empty = write(dir.path(), "empty.smi", "");
    let out = molgen(&["evaluate", "--in", s(&empty), "--scorer", "carbon_chain"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(out.stdout.is_empty());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
}

#[test]
fn wl_and_motif_examples() {
    let dir = tempfile::tempdir().unwrap();
    let c6 = write(dir.path(), "c6.smi", "C1CCCCC1\n");
    let pair = write(dir.path(), "pair.smi", "C1CC1\nC1CC1\n");
    let out = ok(&["wl", "--a", s(&c6), "--b", s(&pair)]);
    assert_eq!(out.lines().next(), Some("possibly_isomorphic"));
    let out = ok(&["wl", "--a", "CCC", "--b", "C1CC1"]);
    assert_eq!(out.lines().next(), Some("distinguished"));
    assert!(out.contains("round 1:"));

    let out = ok(&["motifs", "--in", "C1CC1"]);
    let mut lines = out.lines();
    assert_eq!(lines.next(), Some("molecule,node,atom,c3,c4,c5,c6,c7,c8"));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for row in rows {
        assert!(row.ends_with(",C,1,0,0,0,0,0"), "{row}");
    }
}

#[test]
fn pretrain_is_deterministic_and_logs_every_step() {
    let dir = tempfile::tempdir().unwrap();
    for framework in ["gcpn", "graphaf"] {
        let a = pretrain(dir.path(), framework, &format!("{framework}-a.mgf"));
        let b = pretrain(dir.path(), framework, &format!("{framework}-b.mgf"));
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap(), "{framework} checkpoint");
        let csv_a = fs::read_to_string(a.with_extension("mgf.csv")).unwrap();
        let csv_b = fs::read_to_string(b.with_extension("mgf.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
        let body: Vec<&str> = csv_a.lines().filter(|l| !l.starts_with('#')).collect();
        assert_eq!(body.len(), 1 + 6, "header plus one row per step");
        // The config echo names the architecture and seed.
        for key in ["framework", "gnn", "edge_features", "seed"] {
            assert!(csv_a.contains(&format!("# {key} = ")), "{key} echoed");
        }
    }
}

#[test]
fn generate_writes_count_valid_molecules_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    for framework in ["gcpn", "graphaf"] {
        let ckpt = pretrain(dir.path(), framework, &format!("{framework}.mgf"));
        let gen = |name: &str, workers: &str| {
            let out = dir.path().join(name);
            let stdout = ok(&[
                "--workers", workers, "generate", "--ckpt", s(&ckpt), "--count", "10", "--seed", "4", "--out", s(&out),
            ]);
            assert!(stdout.contains("generated 10 molecules"), "{stdout}");
            fs::read_to_string(out).unwrap()
        };
        let a = gen("a.smi", "1");
        assert_eq!(a, gen("b.smi", "1"));
        assert_eq!(a, gen("c.smi", "3"));
        let lines = smiles_lines(&a);
        assert_eq!(lines.len(), 10);
        for line in lines {
            let g = parse_smiles(line).unwrap();
            assert!(check_valence(&g).is_empty() && g.num_nodes() <= DEFAULT_MAX_NODES, "{line}");
        }
    }
}

#[test]
fn finetune_with_zero_epochs_returns_the_input_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = pretrain(dir.path(), "gcpn", "in.mgf");
    let out = dir.path().join("out.mgf");
    ok(&["finetune", "--ckpt", s(&ckpt), "--scorer", "carbon_chain", "--epochs", "0", "--out", s(&out)]);
    assert_eq!(fs::read(&ckpt).unwrap(), fs::read(&out).unwrap());

    // A short real run writes a metric log with the documented header.
    let out = dir.path().join("tuned.mgf");
    ok(&[
        "finetune", "--ckpt", s(&ckpt), "--scorer", "ring_count", "--epochs", "1", "--rollouts", "8", "--batch", "4",
        "--out", s(&out),
    ]);
    let log = fs::read_to_string(out.with_extension("mgf.csv")).unwrap();
    let body: Vec<&str> = log.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(body[0], "epoch,mean_reward,mean_score,max_score,validity_rate,stopped_early");
    assert!(body.len() >= 2);
    assert!(log.contains("# scorer"), "{log}");
}
