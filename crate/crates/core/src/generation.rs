//! Pieces shared by both generators and the RL loop: the error type,
//! trajectories, the [`Generator`] interface, per-rollout RNG streams and
//! categorical sampling.

use std::sync::Arc;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::autodiff::{AutodiffError, ParamStore, Var};
use crate::gnn::GnnError;
use crate::molgraph::{GraphError, MolecularGraph};
use crate::nn::Forward;
use crate::scalar::Scalar;

/// Default number of resamplings after a rejected action (§4.1).
pub const DEFAULT_RESAMPLE: usize = 20;

#[derive(Debug, Error)]
pub enum GenError {
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("state graph is empty; generation needs a seed atom")]
    EmptyGraph,
    #[error("molecule has {nodes} atoms, above the size limit {limit}")]
    SizeLimit { nodes: usize, limit: usize },
    #[error("molecule is disconnected and cannot be decomposed into a construction trajectory")]
    Disconnected,
    #[error("invalid scaffold: {0}")]
    InvalidScaffold(String),
    #[error("non-finite value in {0}")]
    NonFiniteValue(&'static str),
}

impl From<AutodiffError> for GenError {
    fn from(e: AutodiffError) -> Self {
        GenError::Gnn(GnnError::from(e))
    }
}

/// One recorded decision of a rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajStep<A> {
    /// Graph the decision was made on; shared by consecutive decisions on
    /// the same graph.
    pub state: Arc<MolecularGraph>,
    pub action: A,
    /// Log-probability (or log-density) under the sampling policy.
    pub log_prob: f64,
    /// The action was rejected as valence-violating and resampled.
    pub rejected: bool,
}

/// A finished rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory<A> {
    pub steps: Vec<TrajStep<A>>,
    /// Final molecule; valence-valid by construction.
    pub graph: MolecularGraph,
    /// The episode ended because the resample budget ran out.
    pub penalized: bool,
}

impl<A> Trajectory<A> {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }
}

/// A sequential molecule generator whose decisions can be re-scored under
/// updated weights, which is all PPO needs.
pub trait Generator<T: Scalar>: Sync {
    type Action: Clone + Send + Sync + std::fmt::Debug;

    /// Samples one molecule with read-only weights.
    fn rollout(&self, store: &ParamStore<T>, rng: &mut ChaCha8Rng) -> Result<Trajectory<Self::Action>, GenError>;

    /// Log-probabilities of the recorded decisions under the weights of `f`,
    /// as a `steps x 1` column.
    fn log_probs(&self, f: &Forward<'_, T>, steps: &[&TrajStep<Self::Action>]) -> Result<Var, GenError>;
}

/// RNG of rollout `index` under `seed`: one ChaCha stream per rollout, so the
/// result does not depend on how rollouts are spread over workers.
pub fn rollout_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Runs `count` rollouts on `workers` threads. Rollout `k` uses
/// `rollout_rng(seed, first_index + k)`; output order is rollout order.
pub fn rollout_many<T: Scalar, G: Generator<T>>(
    generator: &G,
    store: &ParamStore<T>,
    seed: u64,
    first_index: u64,
    count: usize,
    workers: usize,
) -> Result<Vec<Trajectory<G::Action>>, GenError> {
    let run = |k: usize| generator.rollout(store, &mut rollout_rng(seed, first_index + k as u64));
    if workers <= 1 {
        return (0..count).map(run).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .expect("thread pool");
    pool.install(|| (0..count).into_par_iter().map(run).collect())
}

/// Draws an index with probability proportional to `weights`. Falls back to
/// the argmax when the weights are degenerate (all zero).
pub fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    match WeightedIndex::new(weights) {
        Ok(dist) => dist.sample(rng),
        Err(_) => argmax(weights),
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = k;
        }
    }
    best
}

/// Distinct state graphs of `steps` (consecutive steps sharing one `Arc`
/// count once) and the state index of every step.
pub fn shared_states<'a, A>(steps: &[&'a TrajStep<A>]) -> (Vec<&'a MolecularGraph>, Vec<usize>) {
    let mut graphs: Vec<&'a MolecularGraph> = Vec::new();
    let mut index = Vec::with_capacity(steps.len());
    let mut last: Option<&Arc<MolecularGraph>> = None;
    for step in steps {
        if !last.is_some_and(|l| Arc::ptr_eq(l, &step.state)) {
            graphs.push(&step.state);
            last = Some(&step.state);
        }
        index.push(graphs.len() - 1);
    }
    (graphs, index)
}
