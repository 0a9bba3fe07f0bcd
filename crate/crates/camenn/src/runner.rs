//! The commands behind the CLI, usable as a library.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use camenn_core::metrics::{diagonal_split, mean_std, similarity_matrix};
use camenn_core::model::ItemFeatures;
use camenn_core::moe::ExpertKind;
use camenn_core::rng::hash_words;
use camenn_core::synth::{generate, Dataset};
use camenn_core::train::{EpochLog, EvalReport, EvalSets, PreparedData, StopDecision, Trainer};
use camenn_core::{CameNN, ModelConfig, Task};

use crate::checkpoint::{best_params, restore_trainer, trainer_checkpoint, Checkpoint};
use crate::config::RunConfig;
use crate::dataset_io::read_dataset;
use crate::error::{CliError, CliResult};

pub const CHECKPOINT_FILE: &str = "checkpoint.camenn";
pub const CONFIG_FILE: &str = "config.toml";
pub const REPORT_FILE: &str = "report.json";

const VALID_SEED: u64 = 0x7661;
const TEST_SEED: u64 = 0x7465;

/// A dataset prepared for one configuration, plus the frozen item features.
pub struct Session {
    pub config: RunConfig,
    pub dataset: Dataset,
    pub data: PreparedData,
    pub model_config: ModelConfig,
    pub features: Vec<ItemFeatures>,
}

impl Session {
    /// Generates the dataset from the configuration, or reads it from
    /// `data_dir` when given.
    pub fn open(config: &RunConfig, data_dir: Option<&Path>) -> CliResult<Self> {
        config.validate()?;
        let dataset = match data_dir {
            Some(dir) => read_dataset(dir)?.1,
            None => generate(&config.generator())?,
        };
        let data = PreparedData::new(&dataset, &config.split(), config.model.max_text_len, config.seed)?;
        let model_config = ModelConfig {
            encoder: config.model.encoder(),
            moe: config.moe()?,
            max_text_len: config.model.max_text_len,
            max_patch_len: data.max_patch_len(),
            patch_pixels: data.patch_pixels(),
            vocab_size: data.vocab.len(),
            num_users: data.num_users,
            num_contexts: config.tasks.num_contexts,
            cvr_head: config.tasks.cvr_head()?,
            init_seed: config.seed,
            provider_seed: config.seed,
        };
        let features = data.features(&CameNN::new(model_config)?)?;
        Ok(Session { config: config.clone(), dataset, data, model_config, features })
    }

    pub fn fresh_model(&self) -> CliResult<CameNN> {
        Ok(CameNN::new(self.model_config)?)
    }

    fn eval_sets(&self, log: &[camenn_core::synth::InteractionRecord], purpose: u64) -> CliResult<EvalSets> {
        let seed = hash_words(&[self.config.seed, purpose]);
        Ok(EvalSets::new(log, &self.data.align_holdout_items, &self.config.train_config(), seed)?)
    }

    pub fn validation_sets(&self) -> CliResult<EvalSets> {
        self.eval_sets(&self.data.valid_log, VALID_SEED)
    }

    pub fn test_sets(&self) -> CliResult<EvalSets> {
        self.eval_sets(&self.data.test_log, TEST_SEED)
    }

    /// Loads a checkpoint's evaluation parameters into a fresh model.
    pub fn load_model(&self, path: &Path) -> CliResult<CameNN> {
        let ck = Checkpoint::read(path)?;
        let mut model = self.fresh_model()?;
        best_params(&ck, &mut model.params)?;
        Ok(model)
    }
}

fn decision_str(d: StopDecision) -> &'static str {
    match d {
        StopDecision::Improved => "improved",
        StopDecision::Continue => "continue",
        StopDecision::Stop => "stop",
    }
}

fn fmt_loss(l: Option<f64>) -> String {
    l.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

/// One `key=value` log line per epoch.
pub fn epoch_line(log: &EpochLog) -> String {
    let v = &log.validation;
    format!(
        "epoch={} steps={} loss_ita={} loss_tia={} loss_cvr={} val_cvr_auc={:.6} val_ita_acc={:.4} val_tia_acc={:.4} decision={}",
        log.epoch,
        log.steps,
        fmt_loss(log.train_losses[0]),
        fmt_loss(log.train_losses[1]),
        fmt_loss(log.train_losses[2]),
        v.cvr_auc,
        v.ita_accuracy,
        v.tia_accuracy,
        decision_str(log.decision),
    )
}

pub fn report_line(prefix: &str, r: &EvalReport) -> String {
    format!(
        "{prefix} cvr_auc={:.6} ita_acc={:.4} tia_acc={:.4} loss_ita={:.6} loss_tia={:.6} loss_cvr={:.6} cvr_rows={} alignment_rows={}",
        r.cvr_auc, r.ita_accuracy, r.tia_accuracy, r.losses[0], r.losses[1], r.losses[2], r.cvr_rows, r.alignment_rows
    )
}

pub fn report_json(r: &EvalReport) -> serde_json::Value {
    serde_json::json!({
        "cvr_auc": r.cvr_auc,
        "ita_accuracy": r.ita_accuracy,
        "tia_accuracy": r.tia_accuracy,
        "loss_ita": r.losses[0],
        "loss_tia": r.losses[1],
        "loss_cvr": r.losses[2],
        "cvr_rows": r.cvr_rows,
        "alignment_rows": r.alignment_rows,
    })
}

fn write_log(log: &mut dyn Write, line: &str) -> CliResult<()> {
    writeln!(log, "{line}").map_err(|e| CliError::io(Path::new("<log>"), e))
}

pub struct TrainOutcome {
    pub trainer: Trainer,
    pub epochs: Vec<EpochLog>,
    /// Test metrics of the best-validation parameters.
    pub test: EvalReport,
    pub best: CameNN,
}

/// Trains until early stopping or the epoch budget.
///
/// With `out_dir`, the configuration is written there and a checkpoint is
/// rewritten after every epoch. `resume` continues from that checkpoint; the
/// stored configuration hash must match.
pub fn train(session: &Session, out_dir: Option<&Path>, resume: bool, log: &mut dyn Write) -> CliResult<TrainOutcome> {
    let config = &session.config;
    let hash = config.hash();
    let mut trainer = Trainer::new(session.fresh_model()?, config.train_config())?;
    let ck_path = out_dir.map(|d| d.join(CHECKPOINT_FILE));
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let cfg_path = dir.join(CONFIG_FILE);
        fs::write(&cfg_path, config.to_toml()).map_err(|e| CliError::io(&cfg_path, e))?;
    }
    if resume {
        let path = ck_path.as_ref().ok_or_else(|| CliError::Config("resume needs an output directory".into()))?;
        if path.exists() {
            let ck = Checkpoint::read(path)?;
            if ck.meta.get("config_hash") != Some(&hash) {
                return Err(CliError::Config(format!(
                    "{} was written with a different configuration",
                    path.display()
                )));
            }
            restore_trainer(&ck, &mut trainer)?;
            write_log(log, &format!("resumed epoch={}", trainer.epoch))?;
        }
    }
    let validation = session.validation_sets()?;
    let mut epochs = Vec::new();
    while !trainer.finished() {
        let e = trainer.run_epoch(&session.data, &session.features, &validation)?;
        write_log(log, &epoch_line(&e))?;
        if let Some(path) = &ck_path {
            trainer_checkpoint(&trainer, &hash).write(path)?;
        }
        epochs.push(e);
    }
    let best = trainer.best_model()?;
    let test = session.test_sets()?.evaluate(&best, &session.features)?;
    write_log(log, &report_line("test", &test))?;
    if let Some(dir) = out_dir {
        let path = dir.join(REPORT_FILE);
        let text = serde_json::to_string_pretty(&report_json(&test)).expect("json");
        fs::write(&path, text + "\n").map_err(|e| CliError::io(&path, e))?;
    }
    Ok(TrainOutcome { trainer, epochs, test, best })
}

/// Test metrics of a checkpoint.
pub fn evaluate(session: &Session, checkpoint: &Path) -> CliResult<EvalReport> {
    let model = session.load_model(checkpoint)?;
    Ok(session.test_sets()?.evaluate(&model, &session.features)?)
}

/// Text-by-image cosine similarities of held-out items.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityExport {
    pub items: Vec<usize>,
    /// `matrix[i][j]` compares the text of `items[i]` with the image of `items[j]`.
    pub matrix: Vec<Vec<f64>>,
    pub undefined: Vec<(usize, usize)>,
}

impl SimilarityExport {
    pub fn diagonal_mean(&self) -> f64 {
        diagonal_split(&self.matrix).0
    }

    pub fn off_diagonal_mean(&self) -> f64 {
        diagonal_split(&self.matrix).1
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("text\\image");
        for id in &self.items {
            out.push_str(&format!(",item_{id}"));
        }
        out.push('\n');
        for (id, row) in self.items.iter().zip(&self.matrix) {
            out.push_str(&format!("item_{id}"));
            for v in row {
                out.push_str(&format!(",{v:.17e}"));
            }
            out.push('\n');
        }
        if !self.undefined.is_empty() {
            let cells: Vec<String> = self.undefined.iter().map(|(i, j)| format!("{i}:{j}")).collect();
            out.push_str(&format!("warning,zero-norm cells set to 0: {}\n", cells.join(" ")));
        }
        out
    }
}

/// The first `n` held-out items with pairwise distinct concepts, topped up
/// with further held-out items when there are fewer than `n` concepts.
pub fn similarity_items(session: &Session, n: usize) -> Vec<usize> {
    let holdout = &session.data.align_holdout_items;
    let mut picked: Vec<usize> = Vec::with_capacity(n);
    let mut seen = std::collections::BTreeSet::new();
    for &i in holdout {
        if picked.len() == n {
            break;
        }
        if seen.insert(session.dataset.items[i].concept) {
            picked.push(i);
        }
    }
    for &i in holdout {
        if picked.len() == n {
            break;
        }
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked
}

pub fn similarity(session: &Session, model: &CameNN) -> CliResult<SimilarityExport> {
    let items = similarity_items(session, session.config.similarity.num_items);
    let mut text = Vec::with_capacity(items.len());
    let mut image = Vec::with_capacity(items.len());
    for &i in &items {
        let (t, v) = model.modality_embeddings(&session.features[i], Task::Ita, session.config.similarity.joint)?;
        let missing = || CliError::Data(format!("item {i} lacks a modality"));
        text.push(t.ok_or_else(missing)?);
        image.push(v.ok_or_else(missing)?);
    }
    let (matrix, undefined) = similarity_matrix(&text, &image)?;
    Ok(SimilarityExport { items, matrix, undefined })
}

/// Test CVR AUC of one (expert kind, seed) cell.
pub fn ablation_cell(config: &RunConfig, data_dir: Option<&Path>, kind: ExpertKind, seed: u64) -> CliResult<f64> {
    let mut cfg = config.clone();
    cfg.seed = seed;
    cfg.moe.expert_kind = kind.as_str().into();
    let session = Session::open(&cfg, data_dir)?;
    Ok(train(&session, None, false, &mut std::io::sink())?.test.cvr_auc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub kind: ExpertKind,
    pub aucs: Vec<f64>,
}

impl AblationRow {
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.aucs)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn render(&self) -> String {
        let mut out = String::from("expert_kind");
        for s in &self.seeds {
            out.push_str(&format!("\tseed_{s}"));
        }
        out.push_str("\tmean\tstd\n");
        for row in &self.rows {
            out.push_str(row.kind.as_str());
            for a in &row.aucs {
                out.push_str(&format!("\t{a:.6}"));
            }
            let (m, s) = row.mean_std();
            out.push_str(&format!("\t{m:.6}\t{s:.6}\n"));
        }
        out
    }
}

pub fn ablate(
    config: &RunConfig,
    data_dir: Option<&Path>,
    seeds: &[u64],
    log: &mut dyn Write,
) -> CliResult<AblationTable> {
    if seeds.is_empty() {
        return Err(CliError::Config("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for kind in ExpertKind::ALL {
        let mut aucs = Vec::new();
        for &seed in seeds {
            let auc = ablation_cell(config, data_dir, kind, seed)?;
            write_log(log, &format!("cell expert_kind={kind} seed={seed} cvr_auc={auc:.6}"))?;
            aucs.push(auc);
        }
        rows.push(AblationRow { kind, aucs });
    }
    Ok(AblationTable { seeds: seeds.to_vec(), rows })
}

pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}
