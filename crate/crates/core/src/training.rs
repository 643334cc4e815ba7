//! Training loop, optimizer, experiment configs and ablation drivers.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{expand_training_set, AugmentPolicy};
use crate::autograd::Gradients;
use crate::data::{exclude_kin, make_window, ActionLabel, IntentLabel, Labels, ObservationWindow, Track};
use crate::encoder::TemporalKind;
use crate::error::{Error, Result};
use crate::heads::{Forecast, HierarchyDesign, Task};
use crate::metrics::{format_table, report_row, EvalReport, TABLE_HEADER};
use crate::model::{Model, ModelConfig};
use crate::nn::{Fwd, ParamStore};
use crate::topology::BodyPart;

pub const TRAIN_CONFIG_SCHEMA: &str = "train_config/1";
pub const TRAIN_LOG_SCHEMA: &str = "train_log/1";
pub const ABLATION_REPORT_SCHEMA: &str = "ablation_report/1";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

/// Actions removed from training in the generalisation protocol.
pub const HOLDOUT_ACTIONS: [ActionLabel; 5] = [
    ActionLabel::Hug,
    ActionLabel::Pet,
    ActionLabel::Punch,
    ActionLabel::Gaze,
    ActionLabel::Leave,
];

/// External intent accuracy under the same protocol, reported for context only.
pub const HOLDOUT_REFERENCE_INTENT_ACCURACY: f64 = 72.29;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub window_grid: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            window_grid: vec![5, 10, 15, 20, 25, 30],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub schema_version: String,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Epochs without improvement of the validation average macro-F1 before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Observation window T in frames.
    pub window: usize,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    /// Train/val/test ratios used when a single dataset is split.
    pub split: [f64; 3],
    /// Applied to the training split only; absent means no augmentation.
    pub augment: Option<AugmentPolicy>,
    pub model: ModelConfig,
    pub ablation: AblationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schema_version: TRAIN_CONFIG_SCHEMA.to_string(),
            batch_size: 32,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            max_epochs: 100,
            patience: 10,
            seed: 0,
            window: 30,
            grad_clip: 5.0,
            split: [0.7, 0.15, 0.15],
            augment: None,
            model: ModelConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if self.schema_version != TRAIN_CONFIG_SCHEMA {
            return Err(Error::Config(format!(
                "schema_version: expected {TRAIN_CONFIG_SCHEMA}, found {}",
                self.schema_version
            )));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return fail("learning_rate must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return fail("weight_decay must be non-negative");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive");
        }
        if self.window == 0 {
            return fail("window must be at least 1");
        }
        if !(self.grad_clip.is_finite() && self.grad_clip >= 0.0) {
            return fail("grad_clip must be non-negative");
        }
        if self.window > self.model.encoder.max_window {
            return Err(Error::Config(format!(
                "window {} exceeds model.encoder.max_window {}",
                self.window, self.model.encoder.max_window
            )));
        }
        if self.ablation.window_grid.iter().any(|&w| w == 0 || w > self.model.encoder.max_window) {
            return fail("ablation.window_grid entries must be in 1..=max_window");
        }
        if let Some(p) = &self.augment {
            p.validate()?;
        }
        self.model.validate()
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamW {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros = || store.entries().iter().map(|e| Array2::zeros(e.value.dim())).collect();
        AdamW {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, scale: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        let (b1, b2, lr, wd, eps) = (self.beta1, self.beta2, self.lr, self.weight_decay, self.eps);
        for id in 0..store.len() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            ndarray::Zip::from(p)
                .and(&mut self.m[id])
                .and(&mut self.v[id])
                .and(g)
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * ((*m / c1) / ((*v / c2).sqrt() + eps) + wd * *p);
                });
        }
    }
}

/// L2 norm over all gradients, summed in parameter order.
pub fn grad_norm(grads: &Gradients, params: usize) -> f64 {
    (0..params)
        .filter_map(|id| grads.get(id))
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub schema_version: String,
    pub epoch: usize,
    pub train_loss: f64,
    pub batches: usize,
    /// `[intent, attitude, action]` macro-F1 on the selection set.
    pub val_f1: [f64; 3],
    pub val_accuracy: [f64; 3],
    pub val_average_f1: f64,
    pub best_average_f1: f64,
    pub improved: bool,
    pub elapsed_s: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights from the best-scoring epoch.
    pub model: Model,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_report: EvalReport,
    pub train_windows: usize,
    pub stopped_early: bool,
}

pub fn windows(tracks: &[Track], len: usize) -> Vec<ObservationWindow> {
    tracks.iter().map(|t| make_window(t, len)).collect()
}

/// Trains on `train_set`, selecting the epoch with the best validation average
/// macro-F1 (training-set score when `val_set` is empty). With `out`, writes the
/// JSONL log and the best checkpoint there.
pub fn train(train_set: &[Track], val_set: &[Track], config: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    let expanded = match &config.augment {
        Some(policy) => expand_training_set(train_set, policy)?,
        None => train_set.to_vec(),
    };
    let train_tracks = exclude_kin(expanded, val_set);
    if train_tracks.is_empty() {
        return Err(Error::Training("no training tracks left after excluding validation kin".into()));
    }
    let train_w = windows(&train_tracks, config.window);
    let select_w = if val_set.is_empty() {
        windows(train_set, config.window)
    } else {
        windows(val_set, config.window)
    };
    train_windows(&train_w, &select_w, config, out)
}

/// Training on pre-built windows; see [`train`].
pub fn train_windows(
    train_w: &[ObservationWindow],
    select_w: &[ObservationWindow],
    config: &TrainConfig,
    out: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_w.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if select_w.is_empty() {
        return Err(Error::Training("empty model-selection set".into()));
    }
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join(LOG_FILE);
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let mut model = Model::new(config.model.clone(), config.seed)?;
    let mut opt = AdamW::new(&model.store, config.learning_rate, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train_w.len()).collect();
    let started = Instant::now();

    let mut best: Option<(f64, usize, ParamStore, EvalReport)> = None;
    let mut log = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&ObservationWindow> = idx.iter().map(|&i| &train_w[i]).collect();
            let labels: Vec<Labels> = batch.iter().map(|w| w.labels).collect();
            let input = model.input(&batch)?;
            let dropout_rng = ChaCha8Rng::seed_from_u64(rng.gen());
            let mut f = Fwd::train(&model.store, dropout_rng);
            let o = model.forward(&mut f, &input)?;
            let loss = model.heads.loss(&mut f, &o.heads, &labels);
            let value = f.g.scalar(loss);
            if !value.is_finite() {
                return Err(Error::Training(format!("non-finite loss {value} at epoch {epoch}, batch {b}")));
            }
            let grads = f.g.backward(loss);
            drop(f);
            let norm = grad_norm(&grads, model.store.len());
            if !norm.is_finite() {
                return Err(Error::Training(format!("non-finite gradient at epoch {epoch}, batch {b}")));
            }
            let scale = if config.grad_clip > 0.0 && norm > config.grad_clip {
                config.grad_clip / norm
            } else {
                1.0
            };
            opt.step(&mut model.store, &grads, scale);
            loss_sum += value;
            batches += 1;
        }

        let report = EvalReport::evaluate(&model, select_w)?;
        let score = report.average_f1;
        let improved = best.as_ref().is_none_or(|b| score > b.0);
        if improved {
            if let Some(dir) = out {
                model.save(
                    &dir.join(CHECKPOINT_DIR),
                    serde_json::json!({ "epoch": epoch, "val_average_f1": score, "window": config.window }),
                )?;
            }
            best = Some((score, epoch, model.store.clone(), report.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let entry = EpochLog {
            schema_version: TRAIN_LOG_SCHEMA.to_string(),
            epoch,
            train_loss: loss_sum / batches as f64,
            batches,
            val_f1: report.f1s(),
            val_accuracy: report.accuracies(),
            val_average_f1: score,
            best_average_f1: best.as_ref().map_or(score, |b| b.0),
            improved,
            elapsed_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4}, val avg F1 {:.2} (best {:.2})",
            entry.train_loss,
            score,
            entry.best_average_f1
        );
        if let Some((f, p)) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(p.as_path(), e))?;
        }
        log.push(entry);
        if stale >= config.patience {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }

    let (_, best_epoch, store, best_report) = best.expect("at least one epoch ran");
    model.store = store;
    Ok(TrainOutcome {
        model,
        log,
        best_epoch,
        best_report,
        train_windows: train_w.len(),
        stopped_early,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    BodyParts,
    Hierarchy,
    WindowSize,
    TemporalModule,
    HoldoutGeneralisation,
}

impl AblationKind {
    pub const ALL: [AblationKind; 5] = [
        AblationKind::BodyParts,
        AblationKind::Hierarchy,
        AblationKind::WindowSize,
        AblationKind::TemporalModule,
        AblationKind::HoldoutGeneralisation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationKind::BodyParts => "body_parts",
            AblationKind::Hierarchy => "hierarchy",
            AblationKind::WindowSize => "window_size",
            AblationKind::TemporalModule => "temporal_module",
            AblationKind::HoldoutGeneralisation => "holdout_generalisation",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s).ok_or_else(|| {
            let names: Vec<_> = Self::ALL.iter().map(|k| k.name()).collect();
            Error::Config(format!("unknown ablation kind `{s}` (expected one of {})", names.join(", ")))
        })
    }
}

/// The seven part subsets, smallest first.
pub fn part_subsets() -> Vec<(String, Vec<BodyPart>)> {
    use BodyPart::*;
    [
        vec![Body],
        vec![Face],
        vec![Hands],
        vec![Body, Face],
        vec![Body, Hands],
        vec![Face, Hands],
        vec![Body, Face, Hands],
    ]
    .into_iter()
    .map(|parts| {
        let name = if parts.len() == 3 {
            "all".to_string()
        } else {
            parts.iter().map(|p| p.name()).collect::<Vec<_>>().join("+")
        };
        (name, parts)
    })
    .collect()
}

#[derive(Debug, Clone, Default)]
pub struct AblationData {
    pub train: Vec<Track>,
    pub val: Vec<Track>,
    pub test: Vec<Track>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub param_count: Option<usize>,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HoldoutSummary {
    pub held_out_actions: Vec<String>,
    pub held_out_tracks: usize,
    pub intent_accuracy: f64,
    pub intent_f1: f64,
    pub attitude_accuracy: f64,
    pub attitude_f1: f64,
    /// Most frequent intent among the training tracks.
    pub majority_intent: String,
    /// Accuracy of always predicting `majority_intent` on the held-out tracks.
    pub majority_baseline_accuracy: f64,
    pub margin_points: f64,
    pub reference_intent_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub schema_version: String,
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
    pub holdout: Option<HoldoutSummary>,
}

impl AblationReport {
    /// Tab-separated table; failed rows carry `NA` metrics and the error text.
    pub fn to_table(&self) -> String {
        let mut header: Vec<&str> = TABLE_HEADER.to_vec();
        header.push("error");
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| match &r.report {
                Some(rep) => {
                    let mut row = report_row(&r.variant, rep);
                    row.push(String::new());
                    row
                }
                None => {
                    let mut row = vec![r.variant.clone()];
                    row.push(r.param_count.map_or("NA".into(), |p| format!("{:.2}", p as f64 / 1e6)));
                    row.extend(std::iter::repeat_n("NA".to_string(), TABLE_HEADER.len() - 2));
                    row.push(r.error.clone().unwrap_or_default().replace(['\t', '\n'], " "));
                    row
                }
            })
            .collect();
        format_table(&header, &rows)
    }
}

fn variant_dir(out: Option<&Path>, kind: AblationKind, variant: &str) -> Option<PathBuf> {
    out.map(|d| d.join(kind.name()).join(variant.replace('+', "_")))
}

/// Trains one variant and scores it on the test split.
fn run_variant(data: &AblationData, config: &TrainConfig, out: Option<PathBuf>) -> Result<(Model, EvalReport)> {
    let outcome = train(&data.train, &data.val, config, out.as_deref())?;
    let test = windows(&data.test, config.window);
    let report = EvalReport::evaluate(&outcome.model, &test)?;
    Ok((outcome.model, report))
}

fn row_from(variant: String, r: Result<(usize, EvalReport)>) -> AblationRow {
    match r {
        Ok((params, report)) => AblationRow {
            variant,
            param_count: Some(params),
            report: Some(report),
            error: None,
        },
        Err(e) => {
            log::warn!("ablation variant {variant} failed: {e}");
            AblationRow {
                variant,
                param_count: None,
                report: None,
                error: Some(e.to_string()),
            }
        }
    }
}

/// Single-task rows train one model per task and merge their forecasts.
fn run_single_task(data: &AblationData, base: &TrainConfig, out: Option<&Path>) -> Result<(usize, EvalReport)> {
    let test = windows(&data.test, base.window);
    let refs: Vec<&ObservationWindow> = test.iter().collect();
    let mut per_task: Vec<Vec<Forecast>> = Vec::new();
    let mut params = 0;
    for task in Task::ALL {
        let mut c = base.clone();
        c.model.heads.design = HierarchyDesign::SingleTask;
        c.model.heads.single_task = task;
        let dir = variant_dir(out, AblationKind::Hierarchy, &format!("single_task_{}", task.name()));
        let outcome = train(&data.train, &data.val, &c, dir.as_deref())?;
        params += outcome.model.param_count();
        per_task.push(outcome.model.predict(&refs, 32)?);
    }
    let merged: Vec<Forecast> = (0..test.len())
        .map(|i| {
            Forecast::from_probs(
                per_task[0][i].intent_probs.clone(),
                per_task[1][i].attitude_probs.clone(),
                per_task[2][i].action_probs.clone(),
            )
        })
        .collect();
    let labels: Vec<Labels> = test.iter().map(|w| w.labels).collect();
    Ok((params, EvalReport::from_forecasts(&merged, &labels, base.window, params)?))
}

/// Splits tracks into (kept, held out) by the generalisation protocol.
pub fn holdout_partition(tracks: &[Track]) -> (Vec<Track>, Vec<Track>) {
    tracks
        .iter()
        .cloned()
        .partition(|t| !HOLDOUT_ACTIONS.contains(&t.labels.action))
}

fn run_holdout(data: &AblationData, base: &TrainConfig, out: Option<&Path>) -> Result<(AblationRow, HoldoutSummary)> {
    let (kept, mut held) = holdout_partition(&data.train);
    let (val, h2) = holdout_partition(&data.val);
    let (_, h3) = holdout_partition(&data.test);
    held.extend(h2);
    held.extend(h3);
    if held.is_empty() {
        return Err(Error::InvalidInput("no tracks of the held-out actions".into()));
    }
    let dir = variant_dir(out, AblationKind::HoldoutGeneralisation, "chain_holdout");
    let outcome = train(&kept, &val, base, dir.as_deref())?;
    let held_w = windows(&held, base.window);
    let report = EvalReport::evaluate(&outcome.model, &held_w)?;

    let mut counts = [0usize; 3];
    for t in &kept {
        counts[t.labels.intent.index()] += 1;
    }
    let majority = (0..3).max_by_key(|&i| (counts[i], std::cmp::Reverse(i))).expect("3 classes");
    let hits = held.iter().filter(|t| t.labels.intent.index() == majority).count();
    let baseline = 100.0 * hits as f64 / held.len() as f64;
    let intent = report.task(Task::Intent);
    let attitude = report.task(Task::Attitude);
    let summary = HoldoutSummary {
        held_out_actions: HOLDOUT_ACTIONS.iter().map(|a| a.name().to_string()).collect(),
        held_out_tracks: held.len(),
        intent_accuracy: intent.accuracy,
        intent_f1: intent.macro_f1,
        attitude_accuracy: attitude.accuracy,
        attitude_f1: attitude.macro_f1,
        majority_intent: IntentLabel::from_index(majority).expect("index < 3").name().to_string(),
        majority_baseline_accuracy: baseline,
        margin_points: intent.accuracy - baseline,
        reference_intent_accuracy: HOLDOUT_REFERENCE_INTENT_ACCURACY,
    };
    let row = AblationRow {
        variant: "chain_holdout".into(),
        param_count: Some(outcome.model.param_count()),
        report: Some(report),
        error: None,
    };
    Ok((row, summary))
}

/// Runs every variant of `kind`, evaluating on `data.test`. A failing variant
/// becomes a row with its error; the others still run.
pub fn run_ablation(kind: AblationKind, base: &TrainConfig, data: &AblationData, out: Option<&Path>) -> Result<AblationReport> {
    base.validate()?;
    if data.train.is_empty() {
        return Err(Error::Training("empty training set".into()));
    }
    if kind != AblationKind::HoldoutGeneralisation && data.test.is_empty() {
        return Err(Error::InvalidInput("ablation needs a non-empty test split".into()));
    }
    let mut rows = Vec::new();
    let mut holdout = None;
    let variant = |name: &str, c: TrainConfig| {
        let dir = variant_dir(out, kind, name);
        row_from(
            name.to_string(),
            run_variant(data, &c, dir).map(|(m, r)| (m.param_count(), r)),
        )
    };
    match kind {
        AblationKind::BodyParts => {
            for (name, parts) in part_subsets() {
                let mut c = base.clone();
                c.model.encoder.parts = parts;
                rows.push(variant(&name, c));
            }
        }
        AblationKind::Hierarchy => {
            for design in HierarchyDesign::ALL {
                if design == HierarchyDesign::SingleTask {
                    rows.push(row_from(design.name().to_string(), run_single_task(data, base, out)));
                } else {
                    let mut c = base.clone();
                    c.model.heads.design = design;
                    rows.push(variant(design.name(), c));
                }
            }
        }
        AblationKind::WindowSize => {
            for &t in &base.ablation.window_grid {
                let mut c = base.clone();
                c.window = t;
                rows.push(variant(&format!("T={t}"), c));
            }
        }
        AblationKind::TemporalModule => {
            for tk in TemporalKind::ALL {
                let mut c = base.clone();
                c.model.encoder.temporal_module = tk;
                rows.push(variant(tk.name(), c));
            }
        }
        AblationKind::HoldoutGeneralisation => match run_holdout(data, base, out) {
            Ok((row, summary)) => {
                rows.push(row);
                holdout = Some(summary);
            }
            Err(e) => rows.push(row_from("chain_holdout".into(), Err(e))),
        },
    }
    Ok(AblationReport {
        schema_version: ABLATION_REPORT_SCHEMA.to_string(),
        kind,
        rows,
        holdout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let c = TrainConfig::default();
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert_eq!(TrainConfig::from_toml("").unwrap(), c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for text in [
            "batch_size = 0",
            "learning_rate = -1.0",
            "window = 0",
            "window = 91",
            "schema_version = \"train_config/0\"",
            "bogus = 1",
            "[model.encoder]\nparts = []",
        ] {
            assert!(TrainConfig::from_toml(text).is_err(), "{text}");
        }
    }

    #[test]
    fn adamw_minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::from_elem((1, 2), 3.0));
        let mut opt = AdamW::new(&store, 0.05, 0.0);
        for _ in 0..500 {
            let x = store.get(id).clone();
            let mut by_param = std::collections::HashMap::new();
            by_param.insert(id, x.mapv(|v| 2.0 * (v - 1.0)));
            opt.step(&mut store, &Gradients { by_param }, 1.0);
        }
        assert!(store.get(id).iter().all(|v| (v - 1.0).abs() < 1e-3));
    }

    #[test]
    fn decoupled_decay_shrinks_without_gradient_signal() {
        let mut store = ParamStore::new();
        let id = store.add("x", Array2::from_elem((1, 1), 2.0));
        let mut opt = AdamW::new(&store, 0.1, 0.5);
        let mut by_param = std::collections::HashMap::new();
        by_param.insert(id, Array2::zeros((1, 1)));
        opt.step(&mut store, &Gradients { by_param }, 1.0);
        assert!((store.get(id)[[0, 0]] - 2.0 * (1.0 - 0.05)).abs() < 1e-12);
    }

    #[test]
    fn failed_rows_render_as_na() {
        let r = AblationReport {
            schema_version: ABLATION_REPORT_SCHEMA.into(),
            kind: AblationKind::WindowSize,
            rows: vec![row_from("T=5".into(), Err(Error::Training("boom".into())))],
            holdout: None,
        };
        let table = r.to_table();
        let line = table.lines().nth(1).unwrap();
        assert!(line.starts_with("T=5\tNA\tNA"));
        assert!(line.ends_with("training failed: boom"));
        assert_eq!(line.split('\t').count(), TABLE_HEADER.len() + 1);
    }

    #[test]
    fn kinds_parse() {
        for k in AblationKind::ALL {
            assert_eq!(AblationKind::parse(k.name()).unwrap(), k);
        }
        assert!(AblationKind::parse("depth").is_err());
    }

    #[test]
    fn seven_part_subsets() {
        let names: Vec<String> = part_subsets().into_iter().map(|s| s.0).collect();
        assert_eq!(names, ["body", "face", "hands", "body+face", "body+hands", "face+hands", "all"]);
    }
}
