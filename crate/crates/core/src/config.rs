//! Run configuration and its plain-text `key = value` format.
//!
//! The same text is used for config files, checkpoint config echoes and log
//! headers: one `key = value` per line, '#' starts a comment, repeated
//! `scaffold` keys list GCPN scaffold fragments. Later assignments override
//! earlier ones, which is how CLI flags override file values.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::expressiveness::DEFAULT_CYCLES;
use crate::gnn::{default_pna_delta, GnnConfig, LayerKind};
use crate::molgraph::DEFAULT_MAX_NODES;
use crate::generation::DEFAULT_RESAMPLE;
use crate::rl::{PpoConfig, RewardConfig};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key}: invalid value {value:?}: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Framework {
    Gcpn,
    Graphaf,
}

impl Framework {
    pub fn name(self) -> &'static str {
        match self {
            Framework::Gcpn => "gcpn",
            Framework::Graphaf => "graphaf",
        }
    }

    /// §4.1: GCPN updates its agent every 3 batches, GraphAF every 5.
    pub fn agent_interval(self) -> usize {
        match self {
            Framework::Gcpn => 3,
            Framework::Graphaf => 5,
        }
    }

    /// Appendix D pre-training batch sizes.
    pub fn pretrain_batch(self) -> usize {
        match self {
            Framework::Gcpn => 128,
            Framework::Graphaf => 32,
        }
    }
}

impl fmt::Display for Framework {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Framework {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "gcpn" => Ok(Framework::Gcpn),
            "graphaf" => Ok(Framework::Graphaf),
            _ => Err("expected gcpn or graphaf".into()),
        }
    }
}

/// Everything that determines a run. Every field is echoed into run
/// artifacts via [`RunConfig::to_text`].
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub framework: Framework,
    pub gnn: LayerKind,
    pub edge_features: bool,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub seed: u64,
    /// PNA degree normalizer; set from the pre-training corpus.
    pub pna_delta: f64,
    /// GSN cycle motif sizes.
    pub cycles: Vec<usize>,
    pub max_size: usize,
    pub resample: usize,
    /// GCPN step cap per episode.
    pub max_steps: usize,
    /// GraphAF sampling temperature of the base Gaussian.
    pub flow_temperature: f64,
    pub pretrain_epochs: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub reward: RewardConfig,
    pub ppo: PpoConfig,
    pub rollouts_per_epoch: usize,
    /// GCPN scaffold fragments as SMILES, after the single-atom fragments.
    pub scaffolds: Vec<String>,
}

/// Keys in echo order.
pub const CONFIG_KEYS: [&str; 27] = [
    "framework",
    "gnn",
    "edge_features",
    "layers",
    "hidden",
    "heads",
    "seed",
    "pna_delta",
    "cycles",
    "max_size",
    "resample",
    "max_steps",
    "flow_temperature",
    "pretrain_epochs",
    "pretrain_batch",
    "pretrain_lr",
    "temperature",
    "scale",
    "gamma",
    "step_penalty",
    "clip",
    "epochs",
    "batch",
    "agent_interval",
    "lr",
    "ppo_passes",
    "rollouts_per_epoch",
];

/// Extra repeatable key listing scaffold fragments.
pub const SCAFFOLD_KEY: &str = "scaffold";

impl RunConfig {
    /// Paper defaults (§4.1, Appendix D) for `framework`.
    pub fn defaults(framework: Framework) -> Self {
        RunConfig {
            framework,
            gnn: LayerKind::Gcn,
            edge_features: false,
            layers: 3,
            hidden: 256,
            heads: 3,
            seed: 0,
            pna_delta: default_pna_delta(),
            cycles: DEFAULT_CYCLES.to_vec(),
            max_size: DEFAULT_MAX_NODES,
            resample: DEFAULT_RESAMPLE,
            max_steps: 4 * DEFAULT_MAX_NODES,
            flow_temperature: 1.0,
            pretrain_epochs: 1,
            pretrain_batch: framework.pretrain_batch(),
            pretrain_lr: 1e-3,
            reward: RewardConfig::default(),
            ppo: PpoConfig::for_interval(framework.agent_interval()),
            rollouts_per_epoch: 200,
            scaffolds: Vec::new(),
        }
    }

    /// Builds a config from ordered assignments: defaults for the last
    /// `framework` given (gcpn if none), then every assignment in order.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self, ConfigError> {
        let framework = match pairs.iter().rev().find(|(k, _)| k == "framework") {
            Some((k, v)) => v.parse().map_err(|reason| invalid(k, v, reason))?,
            None => Framework::Gcpn,
        };
        let mut cfg = RunConfig::defaults(framework);
        for (k, v) in pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Parses config text (see module docs).
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        RunConfig::from_pairs(&parse_pairs(text)?)
    }

    /// Applies one assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
            value.parse().map_err(|_| invalid(key, value, "not a number".into()))
        }
        match key {
            "framework" => self.framework = value.parse().map_err(|r| invalid(key, value, r))?,
            "gnn" => {
                self.gnn = LayerKind::parse(value).ok_or_else(|| {
                    let names: Vec<&str> = LayerKind::ALL.iter().map(|k| k.name()).collect();
                    invalid(key, value, format!("expected one of {}", names.join(", ")))
                })?
            }
            "edge_features" => {
                self.edge_features = match value {
                    "true" | "1" | "yes" => true,
                    "false" | "0" | "no" => false,
                    _ => return Err(invalid(key, value, "expected true or false".into())),
                }
            }
            "layers" => self.layers = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "pna_delta" => self.pna_delta = num(key, value)?,
            "cycles" => {
                self.cycles = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "max_size" => self.max_size = num(key, value)?,
            "resample" => self.resample = num(key, value)?,
            "max_steps" => self.max_steps = num(key, value)?,
            "flow_temperature" => self.flow_temperature = num(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = num(key, value)?,
            "pretrain_batch" => self.pretrain_batch = num(key, value)?,
            "pretrain_lr" => self.pretrain_lr = num(key, value)?,
            "temperature" => self.reward.temperature = num(key, value)?,
            "scale" => self.reward.scale = num(key, value)?,
            "gamma" => self.reward.gamma = num(key, value)?,
            "step_penalty" => self.reward.step_penalty = num(key, value)?,
            "clip" => self.ppo.clip = num(key, value)?,
            "epochs" => self.ppo.epochs = num(key, value)?,
            "batch" => self.ppo.batch = num(key, value)?,
            "agent_interval" => self.ppo.agent_interval = num(key, value)?,
            "lr" => self.ppo.lr = num(key, value)?,
            "ppo_passes" => self.ppo.passes = num(key, value)?,
            "rollouts_per_epoch" => self.rollouts_per_epoch = num(key, value)?,
            SCAFFOLD_KEY => self.scaffolds.push(value.to_string()),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, value: String, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(invalid(key, &value, reason.into()))
            }
        };
        check(self.hidden > 0, "hidden", self.hidden.to_string(), "must be positive")?;
        check(self.max_size >= 1, "max_size", self.max_size.to_string(), "must be positive")?;
        check(self.pretrain_batch > 0, "pretrain_batch", self.pretrain_batch.to_string(), "must be positive")?;
        check(
            self.flow_temperature > 0.0,
            "flow_temperature",
            self.flow_temperature.to_string(),
            "must be positive",
        )?;
        self.gnn_config()
            .validate()
            .map_err(|e| invalid("gnn", self.gnn.name(), e.to_string()))?;
        self.reward.validate().map_err(|r| invalid("reward", "", r))?;
        self.ppo.validate().map_err(|r| invalid("ppo", "", r))?;
        Ok(())
    }

    pub fn gnn_config(&self) -> GnnConfig {
        let mut g = GnnConfig::new(self.gnn, self.hidden)
            .with_edge_features(self.edge_features)
            .with_layers(self.layers);
        g.heads = self.heads;
        g.pna_delta = self.pna_delta;
        g.cycles = self.cycles.clone();
        g
    }

    fn value_of(&self, key: &str) -> String {
        match key {
            "framework" => self.framework.to_string(),
            "gnn" => self.gnn.to_string(),
            "edge_features" => self.edge_features.to_string(),
            "layers" => self.layers.to_string(),
            "hidden" => self.hidden.to_string(),
            "heads" => self.heads.to_string(),
            "seed" => self.seed.to_string(),
            "pna_delta" => format!("{:?}", self.pna_delta),
            "cycles" => self.cycles.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
            "max_size" => self.max_size.to_string(),
            "resample" => self.resample.to_string(),
            "max_steps" => self.max_steps.to_string(),
            "flow_temperature" => format!("{:?}", self.flow_temperature),
            "pretrain_epochs" => self.pretrain_epochs.to_string(),
            "pretrain_batch" => self.pretrain_batch.to_string(),
            "pretrain_lr" => format!("{:?}", self.pretrain_lr),
            "temperature" => format!("{:?}", self.reward.temperature),
            "scale" => format!("{:?}", self.reward.scale),
            "gamma" => format!("{:?}", self.reward.gamma),
            "step_penalty" => format!("{:?}", self.reward.step_penalty),
            "clip" => format!("{:?}", self.ppo.clip),
            "epochs" => self.ppo.epochs.to_string(),
            "batch" => self.ppo.batch.to_string(),
            "agent_interval" => self.ppo.agent_interval.to_string(),
            "lr" => format!("{:?}", self.ppo.lr),
            "ppo_passes" => self.ppo.passes.to_string(),
            "rollouts_per_epoch" => self.rollouts_per_epoch.to_string(),
            _ => unreachable!("not a config key: {key}"),
        }
    }

    /// Canonical text form: every key in [`CONFIG_KEYS`] order, then one
    /// `scaffold` line per fragment. `parse(to_text())` round-trips.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            out.push_str(&format!("{key} = {}\n", self.value_of(key)));
        }
        for s in &self.scaffolds {
            out.push_str(&format!("{SCAFFOLD_KEY} = {s}\n"));
        }
        out
    }
}

fn invalid(key: &str, value: &str, reason: String) -> ConfigError {
    ConfigError::InvalidValue {
        key: key.to_string(),
        value: value.to_string(),
        reason,
    }
}

/// Splits config text into ordered `(key, value)` assignments.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut pairs = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: n + 1,
            text: raw.to_string(),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(ConfigError::Syntax {
                line: n + 1,
                text: raw.to_string(),
            });
        }
        pairs.push((k.to_string(), v.to_string()));
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_the_paper() {
        let g = RunConfig::defaults(Framework::Gcpn);
        assert_eq!((g.ppo.agent_interval, g.pretrain_batch, g.max_size, g.resample), (3, 128, 48, 20));
        let a = RunConfig::parse("framework = graphaf").unwrap();
        assert_eq!((a.ppo.agent_interval, a.pretrain_batch, a.hidden, a.layers), (5, 32, 256, 3));
    }

    #[test]
    fn text_round_trips_and_later_values_win() {
        let text = "# comment\nframework = graphaf\ngnn = gsn\nhidden = 12 # inline\nhidden = 24\n\
                    edge_features = true\nscaffold = C1CC1\nscaffold = CC=O\npna_delta = 1.2345678901234\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.hidden, 24);
        assert_eq!(cfg.gnn, LayerKind::GsnV);
        assert_eq!(cfg.scaffolds, vec!["C1CC1".to_string(), "CC=O".to_string()]);
        let again = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
        assert_eq!(again.to_text(), cfg.to_text());
    }

    #[test]
    fn errors_are_reported() {
        assert!(matches!(RunConfig::parse("nope = 1"), Err(ConfigError::UnknownKey(_))));
        assert!(matches!(RunConfig::parse("hidden"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(RunConfig::parse("gnn = mlp"), Err(ConfigError::InvalidValue { .. })));
        assert!(RunConfig::parse("gamma = 0").is_err());
        assert!(RunConfig::parse("gnn = gat\nhidden = 16").is_err());
    }
}
