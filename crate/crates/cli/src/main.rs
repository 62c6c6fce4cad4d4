//! `molgen`: command-line workbench for pre-training, fine-tuning, sampling
//! and evaluating molecular graph generators, plus 1-WL and motif tools.
//!
//! Exit codes: 0 success, 1 runtime error, 2 usage error.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use molgen_core::checkpoint::Checkpoint;
use molgen_core::config::{parse_pairs, RunConfig};
use molgen_core::expressiveness::{wl_compare_with, MotifFeatures, WlMode, DEFAULT_CYCLES};
use molgen_core::molgraph::MolecularGraph;
use molgen_core::pipeline::{pretrain, summarize, Model, PretrainOptions};
use molgen_core::scorers::Scorer;
use molgen_core::smiles::{load_corpus, parse_smiles, write_smiles};

#[derive(Parser)]
#[command(name = "molgen", version, about = "Molecular graph generation workbench")]
struct Cli {
    /// Worker threads for rollouts (results do not depend on this).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train a generator on a SMILES corpus.
    Pretrain(PretrainArgs),
    /// PPO fine-tuning of a checkpoint toward a scorer.
    Finetune(FinetuneArgs),
    /// Sample molecules from a checkpoint.
    Generate(GenerateArgs),
    /// Score molecules and list the top k.
    Evaluate(EvaluateArgs),
    /// 1-WL comparison of two molecules.
    Wl(WlArgs),
    /// Per-node cycle motif counts.
    Motifs(MotifsArgs),
}

#[derive(Args)]
struct PretrainArgs {
    /// SMILES corpus, one molecule per line.
    #[arg(long)]
    data: PathBuf,
    /// Config file (`key = value`); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    framework: Option<String>,
    #[arg(long)]
    gnn: Option<String>,
    #[arg(long)]
    edge_features: bool,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    hidden: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Stop after this many optimizer steps instead of full epochs.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_size: Option<usize>,
    /// GCPN scaffold fragments, one SMILES per line.
    #[arg(long)]
    scaffolds: Option<PathBuf>,
    /// Abort on the first unparsable corpus line.
    #[arg(long)]
    strict: bool,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics CSV (default: `<out>.csv`).
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// `name[:key=value,...]`, e.g. `carbon_chain` or `median:A=CCO,B=CCN`.
    #[arg(long)]
    scorer: String,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Reward temperature t.
    #[arg(long)]
    temp: Option<f64>,
    /// Reward scale factor.
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    agent_interval: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    rollouts: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Metric log CSV (default: `<out>.csv`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, default_value_t = 100)]
    count: usize,
    #[arg(long, default_value_t = 48)]
    max_size: usize,
    #[arg(long, default_value_t = 20)]
    resample: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output SMILES file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// SMILES file to score.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    scorer: String,
    #[arg(long, default_value_t = 3)]
    top: usize,
    /// Also write the table as CSV to this path.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct WlArgs {
    /// First molecule: a SMILES file (the disjoint union of its lines) or a
    /// SMILES string.
    #[arg(long)]
    a: String,
    #[arg(long)]
    b: String,
    #[arg(long, default_value_t = 10)]
    iters: usize,
    /// Ignore atom and bond types.
    #[arg(long)]
    topology: bool,
}

#[derive(Args)]
struct MotifsArgs {
    #[arg(long = "in")]
    input: String,
    /// Cycle sizes, e.g. `3..8` or `3,5,6`.
    #[arg(long, default_value = "3..8")]
    cycles: String,
    /// Write CSV to this path instead of stdout.
    #[arg(long)]
    csv: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers.max(1);
    match cli.command {
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Finetune(a) => cmd_finetune(a, workers),
        Command::Generate(a) => cmd_generate(a, workers),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Wl(a) => cmd_wl(a),
        Command::Motifs(a) => cmd_motifs(a),
    }
}

/// Ordered assignments: config file first, then flags.
struct Pairs(Vec<(String, String)>);

impl Pairs {
    fn from_file(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Pairs(Vec::new()));
        };
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Ok(Pairs(parse_pairs(&text).with_context(|| format!("in config {}", path.display()))?))
    }

    fn set(&mut self, key: &str, value: Option<impl ToString>) {
        if let Some(v) = value {
            self.0.push((key.to_string(), v.to_string()));
        }
    }
}

fn echo(config: &RunConfig) -> Vec<String> {
    config.to_text().lines().map(str::to_string).collect()
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_pretrain(a: PretrainArgs) -> Result<()> {
    let mut pairs = Pairs::from_file(a.config.as_deref())?;
    pairs.set("framework", a.framework);
    pairs.set("gnn", a.gnn);
    pairs.set("edge_features", a.edge_features.then_some(true));
    pairs.set("layers", a.layers);
    pairs.set("hidden", a.hidden);
    pairs.set("heads", a.heads);
    pairs.set("pretrain_epochs", a.epochs);
    pairs.set("pretrain_batch", a.batch);
    pairs.set("pretrain_lr", a.lr);
    pairs.set("seed", a.seed);
    pairs.set("max_size", a.max_size);
    if let Some(path) = &a.scaffolds {
        let text = fs::read_to_string(path).with_context(|| format!("reading scaffolds {}", path.display()))?;
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            pairs.set("scaffold", Some(line));
        }
    }
    let mut config = RunConfig::from_pairs(&pairs.0)?;
    let (corpus, report) = load_corpus(&a.data, a.strict).with_context(|| format!("loading corpus {}", a.data.display()))?;
    for (line, err) in &report.skipped {
        eprintln!("warning: {}:{line}: skipped: {err}", a.data.display());
    }
    let (_, store, log) = pretrain(&mut config, &corpus, &PretrainOptions { steps: a.steps })?;
    if log.skipped > 0 {
        eprintln!("warning: {} molecules could not be decomposed and were skipped", log.skipped);
    }
    Checkpoint::from_store(&config, &store).save(&a.out)?;
    let metrics = a.metrics.unwrap_or_else(|| with_suffix(&a.out, ".csv"));
    write_file(&metrics, log.to_csv(&echo(&config)))?;
    let last = log.rows.last();
    println!(
        "pretrained {} {} on {} molecules for {} steps; final nll {:.4}; wrote {} and {}",
        config.framework,
        config.gnn,
        corpus.len() - log.skipped,
        log.rows.len(),
        last.map_or(f64::NAN, |r| r.nll),
        a.out.display(),
        metrics.display()
    );
    Ok(())
}

fn cmd_finetune(a: FinetuneArgs, workers: usize) -> Result<()> {
    let scorer = Scorer::parse(&a.scorer)?;
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (model, mut store) = Model::load(&ckpt)?;
    // Run settings: checkpoint config, then config file, then flags.
    let mut pairs = Pairs(parse_pairs(&ckpt.config.to_text())?);
    pairs.0.extend(Pairs::from_file(a.config.as_deref())?.0);
    pairs.set("temperature", a.temp);
    pairs.set("scale", a.scale);
    pairs.set("epochs", a.epochs);
    pairs.set("gamma", a.gamma);
    pairs.set("agent_interval", a.agent_interval);
    pairs.set("batch", a.batch);
    pairs.set("rollouts_per_epoch", a.rollouts);
    pairs.set("lr", a.lr);
    pairs.set("seed", a.seed);
    let run_config = RunConfig::from_pairs(&pairs.0)?;
    if run_config.gnn_config() != ckpt.config.gnn_config() || run_config.framework != ckpt.config.framework {
        bail!("config overrides the checkpoint architecture; only reward, PPO and seed settings may change");
    }
    let log = model.finetune(&mut store, &scorer, &run_config, workers)?;
    // The checkpoint keeps the architecture config it was loaded with, so
    // zero epochs reproduce the input byte for byte.
    Checkpoint::from_store(&ckpt.config, &store).save(&a.out)?;
    let mut header = echo(&run_config);
    header.push(format!("scorer = {scorer}"));
    let path = a.log.unwrap_or_else(|| with_suffix(&a.out, ".csv"));
    write_file(&path, log.to_csv(&header))?;
    for r in &log.rows {
        println!(
            "epoch {}: mean reward {:.4}, mean score {:.4}, max score {:.4}, validity {:.3}{}",
            r.epoch,
            r.mean_reward,
            r.mean_score,
            r.max_score,
            r.validity_rate,
            if r.stopped_early { " (stopped early: singleton collapse)" } else { "" }
        );
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs, workers: usize) -> Result<()> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let (mut model, store) = Model::load(&ckpt)?;
    model.set_limits(a.max_size, a.resample);
    let molecules = model.generate(&store, a.count, a.seed, workers)?;
    let summary = summarize(&molecules);
    let line = format!(
        "generated {} molecules: validity {:.4}, uniqueness {:.4}",
        summary.count, summary.validity, summary.uniqueness
    );
    let mut out = String::new();
    for l in echo(&ckpt.config) {
        let _ = writeln!(out, "# {l}");
    }
    let _ = writeln!(out, "# generate: count = {}, max_size = {}, resample = {}, seed = {}", a.count, a.max_size, a.resample, a.seed);
    let _ = writeln!(out, "# {line}");
    for m in &molecules {
        let smiles = write_smiles(&m.graph).context("writing a generated molecule")?;
        let _ = writeln!(out, "{smiles}");
    }
    write_file(&a.out, out)?;
    println!("{line}");
    Ok(())
}

fn cmd_evaluate(a: EvaluateArgs) -> Result<()> {
    let scorer = Scorer::parse(&a.scorer)?;
    let text = fs::read_to_string(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let mut rows: Vec<(String, f64)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let smiles = line.split_whitespace().next().unwrap_or(line);
        let g = parse_smiles(smiles).with_context(|| format!("{}:{}", a.input.display(), n + 1))?;
        rows.push((smiles.to_string(), scorer.score(&g)));
    }
    if rows.is_empty() {
        eprintln!("warning: no molecules in {}", a.input.display());
    }
    rows.sort_by(|x, y| y.1.total_cmp(&x.1).then_with(|| x.0.cmp(&y.0)));
    rows.truncate(a.top);
    let mut csv = String::from("rank,smiles,score\n");
    for (k, (s, v)) in rows.iter().enumerate() {
        println!("{:>3}  {:<40} {:.6}", k + 1, s, v);
        let _ = writeln!(csv, "{},{},{:.6}", k + 1, s, v);
    }
    if let Some(path) = &a.csv {
        write_file(path, csv)?;
    }
    Ok(())
}

/// A SMILES file (disjoint union of its molecules) or a SMILES string.
fn read_graph(spec: &str) -> Result<MolecularGraph> {
    let path = Path::new(spec);
    if !path.exists() {
        return parse_smiles(spec).with_context(|| format!("{spec:?} is neither a file nor valid SMILES"));
    }
    let (graphs, _) = load_corpus(path, true).with_context(|| format!("reading {}", path.display()))?;
    if graphs.is_empty() {
        bail!("{} contains no molecules", path.display());
    }
    let total = graphs.iter().map(|g| g.num_nodes()).sum();
    let mut union = MolecularGraph::with_max_nodes(total);
    for g in &graphs {
        union.append_disjoint(g)?;
    }
    Ok(union)
}

fn cmd_wl(a: WlArgs) -> Result<()> {
    let g1 = read_graph(&a.a)?;
    let g2 = read_graph(&a.b)?;
    let mode = if a.topology { WlMode::Topology } else { WlMode::Attributed };
    let cmp = wl_compare_with(&g1, &g2, a.iters, mode);
    println!("{}", cmp.verdict);
    let hist = |h: &molgen_core::expressiveness::ColorHistogram| {
        h.counts.iter().map(|(c, n)| format!("{c}:{n}")).collect::<Vec<_>>().join(" ")
    };
    for (h1, h2) in &cmp.rounds {
        println!("round {}: a [{}] b [{}]", h1.round, hist(h1), hist(h2));
    }
    Ok(())
}

fn parse_cycles(text: &str) -> Result<Vec<usize>> {
    let cycles: Vec<usize> = if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize = lo.trim().parse().context("cycle range start")?;
        let hi: usize = hi.trim().parse().context("cycle range end")?;
        (lo..=hi).collect()
    } else {
        text.split(',').map(|s| s.trim().parse().context("cycle size")).collect::<Result<_>>()?
    };
    if cycles.is_empty() || cycles.iter().any(|k| !DEFAULT_CYCLES.contains(k)) {
        bail!("cycle sizes must lie in 3..8, got {text:?}");
    }
    Ok(cycles)
}

fn cmd_motifs(a: MotifsArgs) -> Result<()> {
    let cycles = parse_cycles(&a.cycles)?;
    let path = Path::new(&a.input);
    let graphs = if path.exists() {
        load_corpus(path, true).with_context(|| format!("reading {}", path.display()))?.0
    } else {
        vec![parse_smiles(&a.input).with_context(|| format!("{:?} is neither a file nor valid SMILES", a.input))?]
    };
    let mut csv = String::from("molecule,node,atom");
    for k in &cycles {
        let _ = write!(csv, ",c{k}");
    }
    csv.push('\n');
    for (m, g) in graphs.iter().enumerate() {
        let counts = MotifFeatures::compute(g, &cycles).vertex_counts;
        for (i, row) in counts.iter().enumerate() {
            let _ = write!(csv, "{m},{i},{}", g.atom(i).symbol());
            for c in row {
                let _ = write!(csv, ",{c}");
            }
            csv.push('\n');
        }
    }
    match &a.csv {
        Some(p) => write_file(p, csv)?,
        None => print!("{csv}"),
    }
    Ok(())
}
