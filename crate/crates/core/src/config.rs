//! Experiment configuration.
//!
//! One JSON document drives every command. Missing fields fall back to
//! defaults (an empty `{}` is a valid config), and any field can be
//! overridden on the command line with a dotted path:
//! `--train.temperature 0.1` or `--set train.temperature=0.1`.
//!
//! Per-stage seeds are never stored: they all derive from the single
//! global `seed` through named streams (corpus, model, train-clean,
//! poison, train-attack, head, ...), so any stage can be re-run on its
//! own and still line up with a full pipeline run. Seed fields inside
//! nested sections (generator, train, poison) are overwritten by the
//! derived values.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::contrastive::{TrainConfig, TrainMode};
use crate::corpus::GeneratorConfig;
use crate::nn::EncoderConfig;
use crate::poison::{AttackMode, PoisonSpec};
use crate::rng::derive_seed;
use crate::transfer::HeadConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config '{path}': {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config is not valid JSON: {0}")]
    Json(String),
    #[error("bad override '{0}': expected --dotted.path value or dotted.path=value")]
    BadOverride(String),
    #[error("override path '{0}' walks through a non-object value")]
    BadOverridePath(String),
    #[error("invalid config: {0}")]
    Validation(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding the generated corpus and task files.
    pub data_dir: PathBuf,
    /// Parent directory for per-run outputs.
    pub out_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { data_dir: "data".into(), out_dir: "runs".into() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    pub mode: AttackMode,
    /// Poisoning rate p: poisoned tuples as a fraction of the clean set.
    pub rate: f64,
    pub trigger_tokens: Vec<String>,
    /// Required for targeted modes.
    pub target_sentence: Option<String>,
    /// Use only the first trigger instead of sampling one per insertion.
    pub pin_single_trigger: bool,
    /// Fine-tuning hyperparameters; `mode` and `seed` are derived.
    pub train: TrainConfig,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            mode: AttackMode::NonTargetedSup,
            rate: 0.10,
            trigger_tokens: ["cf", "tq", "mn", "bb", "mb"].map(String::from).to_vec(),
            target_sentence: Some(crate::corpus::default_target_sentence().to_string()),
            pin_single_trigger: false,
            train: TrainConfig {
                mode: TrainMode::AttackNonTargetedSup,
                batch_size: 32,
                temperature: 0.05,
                epochs: 16,
                lr: 1e-3,
                seed: 0,
                negate_numerator_only: false,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CheckThresholds {
    /// Clean model's Spearman on clean pairs must reach this.
    pub min_rho_clean: f64,
    /// Backdoored model's Spearman on triggered pairs must fall below.
    pub max_rho_triggered: f64,
    /// Allowed utility loss on clean pairs, in correlation points (x100).
    pub max_clean_drop_points: f64,
    /// Targeted: mean cosine to the target embedding.
    pub min_target_cosine: f64,
    /// Targeted: threshold attack success rate.
    pub min_asr: f64,
    /// Transfer, targeted: fraction of backdoored inputs hitting the label.
    pub min_asr_c: f64,
    /// Transfer: allowed clean-accuracy gap in percentage points.
    pub max_ca_drop_points: f64,
    /// Transfer, non-targeted: required relative accuracy drop, percent.
    pub min_transfer_rd: f64,
}

impl Default for CheckThresholds {
    fn default() -> Self {
        Self {
            min_rho_clean: 0.5,
            max_rho_triggered: -0.3,
            max_clean_drop_points: 10.0,
            min_target_cosine: 0.8,
            min_asr: 0.9,
            min_asr_c: 0.9,
            max_ca_drop_points: 5.0,
            min_transfer_rd: 50.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Cosine threshold for the targeted attack success rate.
    pub asr_threshold: f64,
    /// Reported clean-agreement gap allowance for cluster analysis.
    pub clean_delta: f64,
    pub n_attention_probes: usize,
    pub n_cluster_samples: usize,
    pub check: CheckThresholds,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            asr_threshold: 0.7,
            clean_delta: 0.25,
            n_attention_probes: 100,
            n_cluster_samples: 200,
            check: CheckThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferSection {
    pub head: HeadConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run_id: String,
    /// Global seed; every stage derives its own stream from it.
    pub seed: u64,
    pub paths: PathsConfig,
    pub gen: GeneratorConfig,
    pub encoder: EncoderConfig,
    /// Clean pretraining settings; `seed` is derived.
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub eval: EvalSection,
    pub transfer: TransferSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            run_id: "default".into(),
            seed: 42,
            paths: PathsConfig::default(),
            gen: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig {
                mode: TrainMode::CleanSup,
                batch_size: 32,
                temperature: 0.05,
                epochs: 12,
                lr: 1e-3,
                seed: 0,
                negate_numerator_only: false,
            },
            attack: AttackSection::default(),
            eval: EvalSection::default(),
            transfer: TransferSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.run_id.is_empty() {
            return Err(ConfigError::Validation("run_id must not be empty".into()));
        }
        if self.run_id.contains(['/', '\\']) {
            return Err(ConfigError::Validation(format!(
                "run_id '{}' must not contain path separators",
                self.run_id
            )));
        }
        if matches!(
            self.train.mode,
            TrainMode::AttackNonTargetedUnsup
                | TrainMode::AttackNonTargetedSup
                | TrainMode::AttackTargetedUnsup
                | TrainMode::AttackTargetedSup
        ) {
            return Err(ConfigError::Validation(
                "train.mode must be a clean mode; attacks are configured under attack.mode"
                    .into(),
            ));
        }
        if !(self.attack.rate > 0.0 && self.attack.rate <= 1.0) {
            return Err(ConfigError::Validation(format!(
                "attack.rate {} outside (0, 1]",
                self.attack.rate
            )));
        }
        if self.attack.trigger_tokens.is_empty() {
            return Err(ConfigError::Validation("attack.trigger_tokens is empty".into()));
        }
        if !(-1.0..=1.0).contains(&self.eval.asr_threshold) {
            return Err(ConfigError::Validation(format!(
                "eval.asr_threshold {} outside [-1, 1]",
                self.eval.asr_threshold
            )));
        }
        // Encoder geometry is checked with a placeholder vocabulary size;
        // the real size is bound from vocab.txt by each command.
        let mut encoder = self.encoder.clone();
        encoder.vocab_size = encoder.vocab_size.max(3);
        encoder.validate().map_err(|e| ConfigError::Validation(e.to_string()))?;
        Ok(())
    }

    pub fn stage_seed(&self, stage: &str) -> u64 {
        derive_seed(self.seed, stage)
    }

    pub fn run_dir(&self) -> PathBuf {
        self.paths.out_dir.join(&self.run_id)
    }

    /// Generator settings with the derived corpus seed bound.
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig { seed: self.stage_seed("corpus"), ..self.gen.clone() }
    }

    /// Clean pretraining settings with the derived seed bound.
    pub fn clean_train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.stage_seed("train-clean"), ..self.train.clone() }
    }

    /// Attack fine-tuning settings: mode follows `attack.mode`, seed is
    /// derived.
    pub fn attack_train_config(&self) -> TrainConfig {
        let mode = match self.attack.mode {
            AttackMode::NonTargetedUnsup => TrainMode::AttackNonTargetedUnsup,
            AttackMode::NonTargetedSup => TrainMode::AttackNonTargetedSup,
            AttackMode::TargetedUnsup => TrainMode::AttackTargetedUnsup,
            AttackMode::TargetedSup => TrainMode::AttackTargetedSup,
        };
        TrainConfig { mode, seed: self.stage_seed("train-attack"), ..self.attack.train.clone() }
    }

    /// Poison specification at the configured rate.
    pub fn poison_spec(&self) -> PoisonSpec {
        self.poison_spec_at(self.attack.rate)
    }

    pub fn poison_spec_at(&self, rate: f64) -> PoisonSpec {
        let target_sentence = if self.attack.mode.is_targeted() {
            self.attack.target_sentence.clone()
        } else {
            None
        };
        PoisonSpec {
            trigger_tokens: self.attack.trigger_tokens.clone(),
            rate,
            mode: self.attack.mode,
            target_sentence,
            seed: self.stage_seed("poison"),
            pin_single_trigger: self.attack.pin_single_trigger,
        }
    }

    /// Head settings for one downstream task; each task gets its own
    /// derived seed stream.
    pub fn head_config(&self, task: &str) -> HeadConfig {
        HeadConfig {
            seed: derive_seed(self.stage_seed("head"), task),
            ..self.transfer.head.clone()
        }
    }
}

/// Recursively merges `overlay` into `base`: objects merge key-by-key,
/// everything else replaces.
fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(base_map), Value::Object(overlay_map)) => {
            for (key, value) in overlay_map {
                match base_map.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        base_map.insert(key, value);
                    }
                }
            }
        }
        (slot, value) => *slot = value,
    }
}

/// Sets one dotted-path key. The raw value is parsed as JSON when
/// possible (numbers, booleans, null, quoted strings) and falls back to a
/// plain string otherwise, so `--train.temperature 0.1` and
/// `--attack.mode targeted-sup` both work.
pub fn apply_override(root: &mut Value, dotted: &str, raw: &str) -> Result<(), ConfigError> {
    if dotted.is_empty() || dotted.split('.').any(str::is_empty) {
        return Err(ConfigError::BadOverride(dotted.to_string()));
    }
    let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.into()));
    let mut node = root;
    let segments: Vec<&str> = dotted.split('.').collect();
    for segment in &segments[..segments.len() - 1] {
        let obj = node
            .as_object_mut()
            .ok_or_else(|| ConfigError::BadOverridePath(dotted.to_string()))?;
        node = obj.entry(segment.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj =
        node.as_object_mut().ok_or_else(|| ConfigError::BadOverridePath(dotted.to_string()))?;
    obj.insert(segments[segments.len() - 1].to_string(), parsed);
    Ok(())
}

/// Parses override tokens in any of three forms: `--key value`,
/// `--key=value`, `key=value`.
pub fn parse_override_tokens(tokens: &[String]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let token = &tokens[i];
        let body = token.strip_prefix("--").unwrap_or(token);
        if let Some((key, value)) = body.split_once('=') {
            if key.is_empty() || value.is_empty() {
                return Err(ConfigError::BadOverride(token.clone()));
            }
            out.push((key.to_string(), value.to_string()));
            i += 1;
        } else if token.starts_with("--") && i + 1 < tokens.len() {
            out.push((body.to_string(), tokens[i + 1].clone()));
            i += 2;
        } else {
            return Err(ConfigError::BadOverride(token.clone()));
        }
    }
    Ok(out)
}

/// Loads a config file, layering it over the defaults and then applying
/// dotted-path overrides. The result is validated.
pub fn load_config(
    path: &Path,
    overrides: &[(String, String)],
) -> Result<ExperimentConfig, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    let file_value: Value =
        serde_json::from_str(&text).map_err(|e| ConfigError::Json(e.to_string()))?;
    let mut value =
        serde_json::to_value(ExperimentConfig::default()).expect("defaults serialize");
    merge(&mut value, file_value);
    for (key, raw) in overrides {
        apply_override(&mut value, key, raw)?;
    }
    let config: ExperimentConfig =
        serde_json::from_value(value).map_err(|e| ConfigError::Json(e.to_string()))?;
    config.validate()?;
    Ok(config)
}
