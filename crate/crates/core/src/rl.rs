//! Reward assembly (Appendix D, Eq. ereward) and critic-free PPO fine-tuning
//! of either generator toward a scorer.

use std::fmt::Write as _;

use crate::autodiff::{Adam, ParamStore, Tape, Tensor, Var};
use crate::generation::{rollout_many, GenError, Generator, TrajStep, Trajectory};
use crate::molgraph::{check_valence, MolecularGraph};
use crate::nn::Forward;
use crate::scalar::Scalar;
use crate::scorers::Scorer;

/// Reward shaping of Eq. ereward plus the resampling penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    /// Temperature `t` of `scale · exp(d / t)`.
    pub temperature: f64,
    pub scale: f64,
    /// Discount applied backwards from the final step.
    pub gamma: f64,
    /// Subtracted from every step flagged as a valence-violating rejection.
    pub step_penalty: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig {
            temperature: 1.0,
            scale: 1.0,
            gamma: 0.9,
            step_penalty: 0.1,
        }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(format!("temperature must be positive, got {}", self.temperature));
        }
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(format!("scale must be non-negative, got {}", self.scale));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.step_penalty >= 0.0 && self.step_penalty.is_finite()) {
            return Err(format!("step_penalty must be non-negative, got {}", self.step_penalty));
        }
        Ok(())
    }
}

/// PPO settings. `batch` counts rollouts per collection batch and per
/// optimizer minibatch; the agent is updated after every `agent_interval`
/// batches, with `passes` optimizer sweeps over the collected data.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoConfig {
    pub clip: f64,
    pub epochs: usize,
    pub batch: usize,
    pub agent_interval: usize,
    pub lr: f64,
    pub passes: usize,
}

impl PpoConfig {
    /// §4.1 defaults: GCPN updates every 3 batches, GraphAF every 5.
    pub fn for_interval(agent_interval: usize) -> Self {
        PpoConfig {
            clip: 0.2,
            epochs: 5,
            batch: 32,
            agent_interval,
            lr: 1e-3,
            passes: 4,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.clip > 0.0 && self.clip < 1.0) {
            return Err(format!("clip must lie in (0, 1), got {}", self.clip));
        }
        if self.batch == 0 || self.agent_interval == 0 || self.passes == 0 {
            return Err("batch, agent_interval and passes must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(format!("lr must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// A final molecule is valid when it is non-empty, connected, valence-clean
/// and its episode was not cut short by resample exhaustion.
pub fn is_valid_final<A>(traj: &Trajectory<A>) -> bool {
    is_valid_molecule(&traj.graph) && !traj.penalized
}

pub fn is_valid_molecule(g: &MolecularGraph) -> bool {
    !g.is_empty() && g.is_connected() && check_valence(g).is_empty()
}

/// `scale · exp(d / t)`, or 0 for an invalid molecule.
pub fn final_reward(score: f64, valid: bool, cfg: &RewardConfig) -> f64 {
    if valid {
        cfg.scale * (score / cfg.temperature).exp()
    } else {
        0.0
    }
}

/// Spreads `final_reward` over the steps: step `t` of `T` (1-based) gets
/// `γ^(T−t) · R`, minus `step_penalty` if it was rejected.
pub fn distribute_rewards(final_reward: f64, rejected: &[bool], cfg: &RewardConfig) -> Vec<f64> {
    let steps = rejected.len();
    rejected
        .iter()
        .enumerate()
        .map(|(k, &rej)| {
            let r = cfg.gamma.powi((steps - 1 - k) as i32) * final_reward;
            if rej {
                r - cfg.step_penalty
            } else {
                r
            }
        })
        .collect()
}

/// Per-step rewards of a finished trajectory and the raw scorer value.
pub fn compute_rewards<A>(traj: &Trajectory<A>, scorer: &Scorer, cfg: &RewardConfig) -> (Vec<f64>, f64) {
    let valid = is_valid_final(traj);
    let score = if valid { scorer.score(&traj.graph) } else { 0.0 };
    let rejected: Vec<bool> = traj.steps.iter().map(|s| s.rejected).collect();
    (distribute_rewards(final_reward(score, valid, cfg), &rejected, cfg), score)
}

/// Advantages: rewards minus the batch-mean baseline, divided by the batch
/// standard deviation when it is non-negligible.
pub fn advantages(rewards: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let all: Vec<f64> = rewards.iter().flatten().copied().collect();
    if all.is_empty() {
        return rewards.to_vec();
    }
    let n = all.len() as f64;
    let mean = all.iter().sum::<f64>() / n;
    let var = all.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let norm = if std > 1e-8 { std } else { 1.0 };
    rewards
        .iter()
        .map(|rs| rs.iter().map(|r| (r - mean) / norm).collect())
        .collect()
}

/// Statistics of one PPO update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PpoStats {
    pub mean_ratio: f64,
    pub clipped_fraction: f64,
    /// Clipped surrogate objective of the last minibatch evaluated.
    pub objective: f64,
    pub steps: usize,
}

/// Clipped surrogate `mean_k min(ρ_k A_k, clip(ρ_k, 1−ε, 1+ε) A_k)` with
/// `ρ_k = exp(logp_new_k − logp_old_k)`, recorded on the tape of `f`.
/// Returns the objective and the ratio column.
pub fn ppo_objective<T: Scalar>(
    f: &Forward<'_, T>,
    logp_new: Var,
    old_log_probs: &[f64],
    advantages: &[f64],
    clip: f64,
) -> Result<(Var, Var), GenError> {
    let tape = f.tape;
    let n = old_log_probs.len();
    let old = tape.constant(Tensor::from_f64(n, 1, old_log_probs)?)?;
    let adv = tape.constant(Tensor::from_f64(n, 1, advantages)?)?;
    let ratio = tape.exp(tape.sub(logp_new, old)?)?;
    let unclipped = tape.mul(ratio, adv)?;
    let clipped = tape.mul(tape.clamp(ratio, T::of(1.0 - clip), T::of(1.0 + clip))?, adv)?;
    // min(a, b) = −max(−a, −b)
    let both = tape.concat(&[tape.neg(unclipped)?, tape.neg(clipped)?], 1)?;
    let surrogate = tape.neg(tape.max(both, 1)?)?;
    let objective = tape.mean(surrogate, 0)?;
    Ok((objective, ratio))
}

/// One PPO update on `batch` with per-step `rewards`: advantages over the
/// whole batch, then `passes` sweeps of Adam ascent over minibatches of
/// `cfg.batch` trajectories. Log-probabilities are re-scored with eval-mode
/// batch norm so that they match the rollout-time values.
pub fn ppo_update<T: Scalar, G: Generator<T>>(
    generator: &G,
    store: &mut ParamStore<T>,
    adam: &mut Adam<T>,
    batch: &[Trajectory<G::Action>],
    rewards: &[Vec<f64>],
    cfg: &PpoConfig,
) -> Result<PpoStats, GenError> {
    let adv = advantages(rewards);
    let mut stats = PpoStats::default();
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    let mut evaluated = 0usize;
    for _ in 0..cfg.passes {
        for (chunk, chunk_adv) in batch.chunks(cfg.batch).zip(adv.chunks(cfg.batch)) {
            let steps: Vec<&TrajStep<G::Action>> = chunk.iter().flat_map(|t| &t.steps).collect();
            if steps.is_empty() {
                continue;
            }
            let old: Vec<f64> = steps.iter().map(|s| s.log_prob).collect();
            let a: Vec<f64> = chunk_adv.iter().flatten().copied().collect();
            let tape = Tape::new();
            let f = Forward::eval(&tape, store);
            let logp = generator.log_probs(&f, &steps)?;
            let (objective, ratio) = ppo_objective(&f, logp, &old, &a, cfg.clip)?;
            let value = tape.scalar(objective).as_f64();
            if !value.is_finite() {
                return Err(GenError::NonFiniteValue("ppo objective"));
            }
            for r in tape.value(ratio).data() {
                let r = r.as_f64();
                ratio_sum += r;
                if (r - 1.0).abs() > cfg.clip {
                    clipped += 1;
                }
            }
            evaluated += steps.len();
            stats.objective = value;
            // Ascent on the objective = descent on its negation.
            let loss = tape.neg(objective)?;
            let grads = tape.backward(loss)?;
            let mut updated = store.clone();
            tape.accumulate_param_grads(&grads, &mut updated);
            adam.step(&mut updated);
            *store = updated;
        }
    }
    stats.steps = evaluated;
    if evaluated > 0 {
        stats.mean_ratio = ratio_sum / evaluated as f64;
        stats.clipped_fraction = clipped as f64 / evaluated as f64;
    }
    Ok(stats)
}

/// Rollout schedule of a fine-tuning run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinetuneSchedule {
    pub rollouts_per_epoch: usize,
    pub seed: u64,
    pub workers: usize,
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_reward: f64,
    pub mean_score: f64,
    pub max_score: f64,
    pub validity_rate: f64,
    pub stopped_early: bool,
}

pub const METRIC_HEADER: &str = "epoch,mean_reward,mean_score,max_score,validity_rate,stopped_early";

/// Per-epoch metric log of a fine-tuning run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FinetuneLog {
    pub rows: Vec<EpochMetrics>,
    pub updates: Vec<PpoStats>,
}

impl FinetuneLog {
    pub fn stopped_early(&self) -> bool {
        self.rows.iter().any(|r| r.stopped_early)
    }

    /// CSV with the documented header; `comment` lines are prefixed by '#'.
    pub fn to_csv(&self, comment: &[String]) -> String {
        let mut out = String::new();
        for line in comment {
            let _ = writeln!(out, "# {line}");
        }
        let _ = writeln!(out, "{METRIC_HEADER}");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{}",
                r.epoch, r.mean_reward, r.mean_score, r.max_score, r.validity_rate, r.stopped_early
            );
        }
        out
    }
}

/// Batch-level statistics used for the metric rows.
#[derive(Debug, Default)]
struct Accumulator {
    rollouts: usize,
    valid: usize,
    reward_sum: f64,
    score_sum: f64,
    max_score: f64,
}

impl Accumulator {
    fn add(&mut self, final_reward: f64, score: f64, valid: bool) {
        if self.rollouts == 0 || score > self.max_score {
            self.max_score = score;
        }
        self.rollouts += 1;
        self.valid += usize::from(valid);
        self.reward_sum += final_reward;
        self.score_sum += score;
    }

    fn row(&self, epoch: usize, stopped_early: bool) -> EpochMetrics {
        let n = self.rollouts.max(1) as f64;
        EpochMetrics {
            epoch,
            mean_reward: self.reward_sum / n,
            mean_score: self.score_sum / n,
            max_score: self.max_score,
            validity_rate: self.valid as f64 / n,
            stopped_early,
        }
    }
}

/// PPO fine-tuning. Row 0 of the log evaluates the starting policy; rows
/// `1..=epochs` summarize the rollouts collected while training. Rollouts of
/// an epoch come in batches of `ppo.batch`; the agent is updated after every
/// `ppo.agent_interval` batches (and on leftover data at the epoch end). A
/// batch consisting only of single-atom molecules stops the run early.
pub fn finetune<T: Scalar, G: Generator<T>>(
    generator: &G,
    store: &mut ParamStore<T>,
    scorer: &Scorer,
    reward: &RewardConfig,
    ppo: &PpoConfig,
    schedule: &FinetuneSchedule,
) -> Result<FinetuneLog, GenError> {
    let mut log = FinetuneLog::default();
    let mut adam = Adam::new(T::of(ppo.lr));
    let per_epoch = schedule.rollouts_per_epoch;
    let mut next_index = 0u64;

    let mut collect = |store: &ParamStore<T>, count: usize| -> Result<Vec<Trajectory<G::Action>>, GenError> {
        let trajs = rollout_many(generator, store, schedule.seed, next_index, count, schedule.workers)?;
        next_index += count as u64;
        Ok(trajs)
    };

    let initial = collect(store, per_epoch)?;
    let mut acc = Accumulator::default();
    for t in &initial {
        let valid = is_valid_final(t);
        let (_, score) = compute_rewards(t, scorer, reward);
        acc.add(final_reward(score, valid, reward), score, valid);
    }
    let collapsed = is_collapsed(&initial);
    log.rows.push(acc.row(0, collapsed));
    if collapsed {
        return Ok(log);
    }

    for epoch in 1..=ppo.epochs {
        let mut acc = Accumulator::default();
        let mut pending: Vec<Trajectory<G::Action>> = Vec::new();
        let mut pending_rewards: Vec<Vec<f64>> = Vec::new();
        let mut batches_pending = 0;
        let mut done = 0;
        let mut stopped = false;
        while done < per_epoch {
            let count = ppo.batch.min(per_epoch - done);
            let trajs = collect(store, count)?;
            done += count;
            for t in &trajs {
                let valid = is_valid_final(t);
                let (rewards, score) = compute_rewards(t, scorer, reward);
                acc.add(final_reward(score, valid, reward), score, valid);
                pending_rewards.push(rewards);
            }
            if is_collapsed(&trajs) {
                stopped = true;
                break;
            }
            pending.extend(trajs);
            batches_pending += 1;
            if batches_pending == ppo.agent_interval || done == per_epoch {
                let stats = ppo_update(generator, store, &mut adam, &pending, &pending_rewards, ppo)?;
                log.updates.push(stats);
                pending.clear();
                pending_rewards.clear();
                batches_pending = 0;
            }
        }
        log.rows.push(acc.row(epoch, stopped));
        if stopped {
            break;
        }
    }
    Ok(log)
}

/// Every molecule of the batch is a single atom (§4.1 early stopping).
pub fn is_collapsed<A>(batch: &[Trajectory<A>]) -> bool {
    !batch.is_empty() && batch.iter().all(|t| t.graph.num_nodes() <= 1)
}

/// Convenience for tests and tools: the reward column a trajectory receives.
pub fn reward_column<A>(traj: &Trajectory<A>, score: f64, cfg: &RewardConfig) -> Vec<f64> {
    let rejected: Vec<bool> = traj.steps.iter().map(|s| s.rejected).collect();
    distribute_rewards(final_reward(score, is_valid_final(traj), cfg), &rejected, cfg)
}

#[cfg(test)]
mod tests;
