//! End-to-end workflows shared by the CLI and the acceptance tests: building
//! a model from a [`RunConfig`], pre-training on a corpus, sampling and PPO
//! fine-tuning, all with `f32` weights that checkpoint losslessly.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Adam, ParamStore};
use crate::checkpoint::{Checkpoint, CheckpointError};
use crate::config::{Framework, RunConfig};
use crate::gcpn::{Decomposition, GcpnConfig, GcpnPolicy, ScaffoldSet};
use crate::generation::{rollout_many, GenError};
use crate::gnn::{corpus_pna_delta, LayerKind};
use crate::graphaf::{FlowDecomposition, GraphafConfig, GraphafModel};
use crate::molgraph::MolecularGraph;
use crate::rl::{finetune, is_valid_molecule, FinetuneLog, FinetuneSchedule};
use crate::scorers::Scorer;
use crate::smiles::{canonical_smiles, parse_smiles};

/// Weight precision of checkpoints and of every CLI workflow.
pub type Real = f32;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("scaffold fragment {smiles:?}: {reason}")]
    Scaffold { smiles: String, reason: String },
    #[error("no usable molecules in the training corpus")]
    EmptyCorpus,
}

/// Either generator with its architecture.
#[derive(Debug, Clone)]
pub enum Model {
    Gcpn(GcpnPolicy),
    Graphaf(GraphafModel),
}

impl Model {
    /// Builds a freshly initialized model; the initialization RNG is seeded
    /// with `config.seed`.
    pub fn build(config: &RunConfig) -> Result<(Model, ParamStore<Real>), PipelineError> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let gnn = config.gnn_config();
        let model = match config.framework {
            Framework::Gcpn => {
                let fragments = config
                    .scaffolds
                    .iter()
                    .map(|s| {
                        parse_smiles(s).map_err(|e| PipelineError::Scaffold {
                            smiles: s.clone(),
                            reason: e.to_string(),
                        })
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                let scaffolds = ScaffoldSet::with_fragments(fragments)?;
                let mut cfg = GcpnConfig::new(gnn);
                cfg.max_size = config.max_size;
                cfg.resample = config.resample;
                cfg.max_steps = config.max_steps;
                Model::Gcpn(GcpnPolicy::new(cfg, scaffolds, &mut store, &mut rng)?)
            }
            Framework::Graphaf => {
                let mut cfg = GraphafConfig::new(gnn);
                cfg.max_size = config.max_size;
                cfg.resample = config.resample;
                cfg.temperature = config.flow_temperature;
                Model::Graphaf(GraphafModel::new(cfg, &mut store, &mut rng)?)
            }
        };
        Ok((model, store))
    }

    /// Rebuilds the model described by a checkpoint and loads its weights.
    pub fn load(ckpt: &Checkpoint) -> Result<(Model, ParamStore<Real>), PipelineError> {
        let (model, mut store) = Model::build(&ckpt.config)?;
        ckpt.restore_into(&mut store)?;
        Ok((model, store))
    }

    pub fn framework(&self) -> Framework {
        match self {
            Model::Gcpn(_) => Framework::Gcpn,
            Model::Graphaf(_) => Framework::Graphaf,
        }
    }

    /// Overrides the sampling limits (size cap and resample budget).
    pub fn set_limits(&mut self, max_size: usize, resample: usize) {
        match self {
            Model::Gcpn(p) => {
                p.config.max_size = max_size;
                p.config.resample = resample;
            }
            Model::Graphaf(m) => {
                m.config.max_size = max_size;
                m.config.resample = resample;
            }
        }
    }

    /// Samples `count` molecules; rollout `k` uses stream `k` of `seed`.
    pub fn generate(&self, store: &ParamStore<Real>, count: usize, seed: u64, workers: usize) -> Result<Vec<Generated>, PipelineError> {
        let out = match self {
            Model::Gcpn(p) => rollout_many(p, store, seed, 0, count, workers)?
                .into_iter()
                .map(|t| Generated {
                    graph: t.graph,
                    penalized: t.penalized,
                })
                .collect(),
            Model::Graphaf(m) => rollout_many(m, store, seed, 0, count, workers)?
                .into_iter()
                .map(|t| Generated {
                    graph: t.graph,
                    penalized: t.penalized,
                })
                .collect(),
        };
        Ok(out)
    }

    /// PPO fine-tuning with the reward, PPO and schedule settings of `config`.
    pub fn finetune(
        &self,
        store: &mut ParamStore<Real>,
        scorer: &Scorer,
        config: &RunConfig,
        workers: usize,
    ) -> Result<FinetuneLog, PipelineError> {
        let schedule = FinetuneSchedule {
            rollouts_per_epoch: config.rollouts_per_epoch,
            seed: config.seed,
            workers,
        };
        let log = match self {
            Model::Gcpn(p) => finetune(p, store, scorer, &config.reward, &config.ppo, &schedule)?,
            Model::Graphaf(m) => finetune(m, store, scorer, &config.reward, &config.ppo, &schedule)?,
        };
        Ok(log)
    }
}

/// One sampled molecule.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub graph: MolecularGraph,
    /// The episode ran out of resamples.
    pub penalized: bool,
}

/// Summary of a generation run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerationSummary {
    pub count: usize,
    /// Fraction of molecules that survived resampling and are valence-valid.
    pub validity: f64,
    /// Distinct canonical SMILES among valid molecules, over valid molecules.
    pub uniqueness: f64,
}

pub fn summarize(molecules: &[Generated]) -> GenerationSummary {
    let valid: Vec<&Generated> = molecules
        .iter()
        .filter(|m| !m.penalized && is_valid_molecule(&m.graph))
        .collect();
    let distinct: HashSet<String> = valid.iter().filter_map(|m| canonical_smiles(&m.graph).ok()).collect();
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    GenerationSummary {
        count: molecules.len(),
        validity: ratio(valid.len(), molecules.len()),
        uniqueness: ratio(distinct.len(), valid.len()),
    }
}

/// Pre-training settings beyond the run config.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PretrainOptions {
    /// Stop after this many optimizer steps instead of after
    /// `pretrain_epochs` epochs (cycling over the corpus as needed).
    pub steps: Option<usize>,
}

/// One optimizer step of pre-training. GCPN fills `nll` and `acc`; GraphAF
/// fills `nll_n` and `nll_e` (Table 6 column semantics).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainRow {
    pub step: usize,
    pub epoch: usize,
    pub nll: f64,
    pub acc: f64,
    pub nll_n: f64,
    pub nll_e: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainLog {
    pub framework: Framework,
    pub rows: Vec<PretrainRow>,
    /// Corpus molecules left out (disconnected or over the size cap).
    pub skipped: usize,
}

impl PretrainLog {
    pub fn header(framework: Framework) -> &'static str {
        match framework {
            Framework::Gcpn => "step,epoch,nll,acc",
            Framework::Graphaf => "step,epoch,nll_n,nll_e,nll",
        }
    }

    pub fn to_csv(&self, comment: &[String]) -> String {
        let mut out = String::new();
        for line in comment {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "{}", Self::header(self.framework));
        for r in &self.rows {
            let _ = match self.framework {
                Framework::Gcpn => writeln!(out, "{},{},{:.6},{:.6}", r.step, r.epoch, r.nll, r.acc),
                Framework::Graphaf => writeln!(out, "{},{},{:.6},{:.6},{:.6}", r.step, r.epoch, r.nll_n, r.nll_e, r.nll),
            };
        }
        out
    }

    /// Mean total NLL over a trailing window ending at row `end`.
    pub fn smoothed_nll(&self, end: usize, window: usize) -> f64 {
        let start = end.saturating_sub(window);
        let slice = &self.rows[start..end];
        slice.iter().map(|r| r.nll).sum::<f64>() / slice.len().max(1) as f64
    }
}

/// Prepared training examples of either framework.
enum Prepared {
    Gcpn(Vec<Decomposition>),
    Graphaf(Vec<FlowDecomposition>),
}

/// Pre-trains a fresh model on `corpus`. Corpus-derived settings (the PNA
/// degree normalizer) are written into `config` before the model is built;
/// for GCPN the seed-atom distribution is set to the corpus atom marginal.
/// Each epoch visits the corpus in a fresh seeded shuffle.
pub fn pretrain(
    config: &mut RunConfig,
    corpus: &[MolecularGraph],
    options: &PretrainOptions,
) -> Result<(Model, ParamStore<Real>, PretrainLog), PipelineError> {
    if config.gnn == LayerKind::Pna && !corpus.is_empty() {
        config.pna_delta = corpus_pna_delta(corpus);
    }
    let (model, mut store) = Model::build(config)?;
    let mut skipped = 0;
    // Motif counts and decompositions are computed once per molecule.
    let prepared = match &model {
        Model::Gcpn(p) => {
            p.set_seed_marginal(&mut store, corpus);
            let mut out = Vec::new();
            for g in corpus {
                match p.prepare(g) {
                    Ok(d) => out.push(d),
                    Err(_) => skipped += 1,
                }
            }
            Prepared::Gcpn(out)
        }
        Model::Graphaf(m) => {
            let mut out = Vec::new();
            for g in corpus {
                match m.prepare(g) {
                    Ok(d) => out.push(d),
                    Err(_) => skipped += 1,
                }
            }
            Prepared::Graphaf(out)
        }
    };
    let n = match &prepared {
        Prepared::Gcpn(v) => v.len(),
        Prepared::Graphaf(v) => v.len(),
    };
    if n == 0 {
        return Err(PipelineError::EmptyCorpus);
    }
    let batch = config.pretrain_batch.min(n);
    let per_epoch = n.div_ceil(batch);
    let total = options.steps.unwrap_or(per_epoch * config.pretrain_epochs);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5052_4554_5241_494e);
    let mut adam = Adam::new(config.pretrain_lr as Real);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rows = Vec::with_capacity(total);
    for step in 0..total {
        let (epoch, k) = (step / per_epoch, step % per_epoch);
        if k == 0 {
            order.shuffle(&mut rng);
        }
        let idx = &order[k * batch..((k + 1) * batch).min(n)];
        let row = match (&model, &prepared) {
            (Model::Gcpn(p), Prepared::Gcpn(data)) => {
                let items: Vec<&Decomposition> = idx.iter().map(|&i| &data[i]).collect();
                let s = p.pretrain_step(&mut store, &mut adam, &items)?;
                PretrainRow {
                    step,
                    epoch,
                    nll: s.nll,
                    acc: s.acc,
                    nll_n: f64::NAN,
                    nll_e: f64::NAN,
                }
            }
            (Model::Graphaf(m), Prepared::Graphaf(data)) => {
                let items: Vec<&FlowDecomposition> = idx.iter().map(|&i| &data[i]).collect();
                let s = m.pretrain_step(&mut store, &mut adam, &items, &mut rng)?;
                PretrainRow {
                    step,
                    epoch,
                    nll: s.total(),
                    acc: f64::NAN,
                    nll_n: s.nll_n,
                    nll_e: s.nll_e,
                }
            }
            _ => unreachable!("model and data come from the same framework"),
        };
        rows.push(row);
    }
    let log = PretrainLog {
        framework: config.framework,
        rows,
        skipped,
    };
    Ok((model, store, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::smiles::round_trips;

    fn corpus() -> Vec<MolecularGraph> {
        ["CCO", "CC(=O)O", "C1CCCCC1", "CCN", "CC(C)Cl", "C1=CC=CC=C1O", "CCCC", "NCC(=O)O"]
            .iter()
            .map(|s| parse_smiles(s).unwrap())
            .collect()
    }

    fn small(framework: Framework, gnn: &str) -> RunConfig {
        let mut c = RunConfig::defaults(framework);
        c.set("gnn", gnn).unwrap();
        c.hidden = 12;
        c.layers = 2;
        c.pretrain_batch = 4;
        c.max_size = 16;
        c.seed = 11;
        c
    }

    #[test]
    fn pretrain_checkpoint_generate_round_trip() {
        for framework in [Framework::Gcpn, Framework::Graphaf] {
            let mut cfg = small(framework, "rgcn");
            cfg.edge_features = true;
            let (model, store, log) = pretrain(&mut cfg, &corpus(), &PretrainOptions { steps: Some(5) }).unwrap();
            assert_eq!(log.rows.len(), 5);
            assert_eq!(log.to_csv(&[]).lines().count(), 6);
            let ckpt = Checkpoint::from_store(&cfg, &store);
            let bytes = ckpt.to_bytes();
            let (loaded, store2) = Model::load(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
            assert_eq!(Checkpoint::from_store(&cfg, &store2).to_bytes(), bytes);
            let a = model.generate(&store, 12, 3, 1).unwrap();
            let b = loaded.generate(&store2, 12, 3, 2).unwrap();
            assert_eq!(a, b);
            for m in &a {
                assert!(is_valid_molecule(&m.graph) && round_trips(&m.graph));
            }
            let s = summarize(&a);
            assert!(s.validity > 0.0 && s.uniqueness > 0.0);
        }
    }

    #[test]
    fn pretraining_is_deterministic() {
        let run = || {
            let mut cfg = small(Framework::Graphaf, "gin");
            let (_, store, log) = pretrain(&mut cfg, &corpus(), &PretrainOptions { steps: Some(3) }).unwrap();
            (Checkpoint::from_store(&cfg, &store).to_bytes(), log.to_csv(&[]))
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn pna_delta_comes_from_the_corpus() {
        let mut cfg = small(Framework::Gcpn, "pna");
        pretrain(&mut cfg, &corpus(), &PretrainOptions { steps: Some(1) }).unwrap();
        assert!((cfg.pna_delta - corpus_pna_delta(&corpus())).abs() < 1e-15);
    }

    #[test]
    fn summary_counts_duplicates_and_penalties() {
        let m = |s: &str, penalized| Generated {
            graph: parse_smiles(s).unwrap(),
            penalized,
        };
        let s = summarize(&[m("CCO", false), m("OCC", false), m("CC", false), m("C", true)]);
        assert_eq!(s.count, 4);
        assert!((s.validity - 0.75).abs() < 1e-12);
        assert!((s.uniqueness - 2.0 / 3.0).abs() < 1e-12);
    }
}
