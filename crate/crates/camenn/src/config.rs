//! Run configuration: a TOML file plus `--set section.key=value` overrides.
//!
//! Every field has a default, so an empty file is a valid configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use camenn_core::encoder::EncoderConfig;
use camenn_core::moe::{ExpertKind, GatingMode, MoeConfig};
use camenn_core::optim::AdamConfig;
use camenn_core::synth::{Corruption, GeneratorConfig, ItemShape, PreferenceModel};
use camenn_core::tasks::{CvrHead, LossWeights};
use camenn_core::train::{SplitConfig, TrainConfig};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub num_concepts: usize,
    pub num_items: usize,
    pub num_users: usize,
    pub num_interactions: usize,
    pub text_corruption_rate: f64,
    pub image_corruption_rate: f64,
    pub latent_dim: usize,
    pub text_len: usize,
    pub signature_len: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub text_replace_fraction: f64,
    pub image_noise_blend: f64,
    pub pixel_jitter: f64,
    pub preference_noise: f64,
    pub positive_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection::from_generator(&GeneratorConfig::default())
    }
}

impl DataSection {
    pub fn from_generator(g: &GeneratorConfig) -> Self {
        DataSection {
            num_concepts: g.num_concepts,
            num_items: g.num_items,
            num_users: g.num_users,
            num_interactions: g.num_interactions,
            text_corruption_rate: g.text_corruption_rate,
            image_corruption_rate: g.image_corruption_rate,
            latent_dim: g.latent_dim,
            text_len: g.shape.text_len,
            signature_len: g.shape.signature_len,
            image_height: g.shape.image_height,
            image_width: g.shape.image_width,
            image_channels: g.shape.image_channels,
            text_replace_fraction: g.corruption.text_replace_fraction,
            image_noise_blend: g.corruption.image_noise_blend,
            pixel_jitter: g.corruption.pixel_jitter,
            preference_noise: g.preference.noise,
            positive_fraction: g.preference.positive_fraction,
        }
    }

    pub fn generator(&self, seed: u64) -> GeneratorConfig {
        GeneratorConfig {
            seed,
            num_concepts: self.num_concepts,
            num_items: self.num_items,
            num_users: self.num_users,
            num_interactions: self.num_interactions,
            text_corruption_rate: self.text_corruption_rate,
            image_corruption_rate: self.image_corruption_rate,
            latent_dim: self.latent_dim,
            shape: ItemShape {
                text_len: self.text_len,
                signature_len: self.signature_len,
                image_height: self.image_height,
                image_width: self.image_width,
                image_channels: self.image_channels,
            },
            corruption: Corruption {
                text_replace_fraction: self.text_replace_fraction,
                image_noise_blend: self.image_noise_blend,
                pixel_jitter: self.pixel_jitter,
            },
            preference: PreferenceModel { noise: self.preference_noise, positive_fraction: self.positive_fraction },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub num_heads: usize,
    pub num_blocks: usize,
    /// 0 means 4·d_model.
    pub ffn_hidden: usize,
    pub dropout_rate: f64,
    pub max_text_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 16,
            num_heads: 8,
            num_blocks: 1,
            ffn_hidden: 0,
            dropout_rate: 0.0,
            max_text_len: 50,
        }
    }
}

impl ModelSection {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            d_model: self.d_model,
            num_heads: self.num_heads,
            num_blocks: self.num_blocks,
            ffn_hidden: if self.ffn_hidden == 0 { 4 * self.d_model } else { self.ffn_hidden },
            dropout_rate: self.dropout_rate,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeSection {
    pub num_experts: usize,
    pub top_k: usize,
    pub expert_kind: String,
    pub gating_mode: String,
}

impl Default for MoeSection {
    fn default() -> Self {
        let d = MoeConfig::default();
        MoeSection {
            num_experts: d.num_experts,
            top_k: d.top_k,
            expert_kind: d.expert_kind.as_str().into(),
            gating_mode: d.gating_mode.as_str().into(),
        }
    }
}

impl MoeSection {
    pub fn moe(&self) -> CliResult<MoeConfig> {
        Ok(MoeConfig {
            num_experts: self.num_experts,
            top_k: self.top_k,
            expert_kind: self.expert_kind.parse::<ExpertKind>()?,
            gating_mode: self.gating_mode.parse::<GatingMode>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TasksSection {
    pub lambda_ita: f64,
    pub lambda_tia: f64,
    pub lambda_cvr: f64,
    pub negative_ratio: usize,
    pub max_behavior: usize,
    pub num_contexts: usize,
    pub cvr_head: String,
}

impl Default for TasksSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let [lambda_ita, lambda_tia, lambda_cvr] = t.loss_weights.0;
        TasksSection {
            lambda_ita,
            lambda_tia,
            lambda_cvr,
            negative_ratio: t.negative_ratio,
            max_behavior: t.max_behavior,
            num_contexts: t.num_contexts,
            cvr_head: CvrHead::default().as_str().into(),
        }
    }
}

impl TasksSection {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights([self.lambda_ita, self.lambda_tia, self.lambda_cvr])
    }

    pub fn cvr_head(&self) -> CliResult<CvrHead> {
        Ok(self.cvr_head.parse()?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub patience: usize,
    /// 0 runs a full pass over the training CVR rows.
    pub max_steps_per_epoch: usize,
    /// 0 evaluates every row.
    pub max_eval_rows: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub coupled_decay: bool,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub alignment_train_fraction: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        let s = SplitConfig::default();
        TrainSection {
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            max_steps_per_epoch: t.max_steps_per_epoch.unwrap_or(0),
            max_eval_rows: t.max_eval_rows.unwrap_or(0),
            lr: t.adam.lr,
            beta1: t.adam.beta1,
            beta2: t.adam.beta2,
            eps: t.adam.eps,
            weight_decay: t.adam.weight_decay,
            coupled_decay: t.adam.coupled_decay,
            train_fraction: s.train_fraction,
            validation_fraction: s.validation_fraction,
            alignment_train_fraction: s.alignment_train_fraction,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimilaritySection {
    pub num_items: usize,
    /// Encode text and image in one pass instead of separately.
    pub joint: bool,
}

impl Default for SimilaritySection {
    fn default() -> Self {
        SimilaritySection { num_items: 8, joint: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub moe: MoeSection,
    pub tasks: TasksSection,
    pub train: TrainSection,
    pub similarity: SimilaritySection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            data: DataSection::default(),
            model: ModelSection::default(),
            moe: MoeSection::default(),
            tasks: TasksSection::default(),
            train: TrainSection::default(),
            similarity: SimilaritySection::default(),
        }
    }
}

fn nonzero(v: usize) -> Option<usize> {
    (v > 0).then_some(v)
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string so `--set moe.expert_kind=recurrent` needs no quotes.
fn parse_value(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `dotted.key=value` override to a TOML tree.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let (last, parents) = path.split_last().expect("non-empty");
    let mut table = root;
    for p in parents {
        let entry = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    table.insert(last.to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str, overrides: &[String]) -> CliResult<Self> {
        let mut root: toml::Table = text.parse().map_err(|e| CliError::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: RunConfig =
            toml::Value::Table(root).try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults when `None`) and applies overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> CliResult<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
            None => String::new(),
        };
        RunConfig::from_toml(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Hex SHA-256 of the canonical TOML form with the epoch budget zeroed.
    /// Resumed runs must match it, so a run may be resumed with more epochs.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.train.epochs = 0;
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> CliResult<()> {
        self.model.encoder().validate()?;
        self.moe()?.validate()?;
        self.train_config().validate()?;
        self.tasks.cvr_head()?;
        if self.similarity.num_items == 0 {
            return Err(CliError::Config("similarity.num_items must be positive".into()));
        }
        Ok(())
    }

    pub fn generator(&self) -> GeneratorConfig {
        self.data.generator(self.seed)
    }

    pub fn moe(&self) -> CliResult<MoeConfig> {
        self.moe.moe()
    }

    pub fn split(&self) -> SplitConfig {
        SplitConfig {
            train_fraction: self.train.train_fraction,
            validation_fraction: self.train.validation_fraction,
            alignment_train_fraction: self.train.alignment_train_fraction,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            seed: self.seed,
            batch_size: t.batch_size,
            epochs: t.epochs,
            patience: t.patience,
            max_steps_per_epoch: nonzero(t.max_steps_per_epoch),
            max_eval_rows: nonzero(t.max_eval_rows),
            loss_weights: self.tasks.loss_weights(),
            negative_ratio: self.tasks.negative_ratio,
            max_behavior: self.tasks.max_behavior,
            num_contexts: self.tasks.num_contexts,
            adam: AdamConfig {
                lr: t.lr,
                beta1: t.beta1,
                beta2: t.beta2,
                eps: t.eps,
                weight_decay: t.weight_decay,
                coupled_decay: t.coupled_decay,
            },
        }
    }
}
