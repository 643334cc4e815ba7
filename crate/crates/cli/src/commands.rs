use std::collections::HashSet;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use egointent::augment::{expand_training_set, AugmentPolicy};
use egointent::data::{make_window, parse_tracks, save_tracks, split_dataset, ActionLabel, Track, DEFAULT_WINDOW};
use egointent::heads::Forecast;
use egointent::metrics::{measure_latency, report_row, format_table, EvalReport, LatencyStats, TABLE_HEADER};
use egointent::model::Model;
use egointent::synthetic::{generate_dataset, generate_track, summary_path, SynthSpec};
use egointent::training::{run_ablation, train as run_train, windows, AblationData, AblationKind, TrainConfig, CHECKPOINT_DIR, LOG_FILE};
use serde::{Deserialize, Serialize};

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;

pub const OUT_ROOT_ENV: &str = "EGOINTENT_OUT";
pub const SPLIT_SCHEMA: &str = "split/1";
pub const TRAIN_REPORT_SCHEMA: &str = "train_report/1";
pub const AUGMENT_SUMMARY_SCHEMA: &str = "augment_summary/1";
pub const FORECAST_SCHEMA: &str = "forecast/1";
pub const BENCH_SCHEMA: &str = "bench_report/1";

const BENCH_TRIALS: usize = 50;
const BENCH_WARMUP: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CommandResult {
    pub exit_code: u8,
    pub summary: String,
    pub report: Option<PathBuf>,
}

impl CommandResult {
    fn ok(summary: String, report: PathBuf) -> Self {
        CommandResult {
            exit_code: EXIT_OK,
            summary,
            report: Some(report),
        }
    }
}

/// Usage problems detected after argument parsing.
#[derive(Debug)]
pub struct Usage(pub String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<Usage>().is_some() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<egointent::Error>() {
            return if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME };
        }
    }
    EXIT_RUNTIME
}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    anyhow!(Usage(msg.into()))
}

pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("egointent-out"))
}

fn resolve(out: Option<PathBuf>, default_name: &str) -> PathBuf {
    out.unwrap_or_else(|| out_root().join(default_name))
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| egointent::Error::io(path, e).into())
}

fn load_tracks(path: &Path) -> Result<Vec<Track>> {
    if !path.exists() {
        return Err(usage(format!("data file {} does not exist", path.display())));
    }
    Ok(parse_tracks(path)?)
}

fn checkpoint_window(meta: &serde_json::Value, flag: Option<usize>) -> Result<usize> {
    let w = flag
        .or_else(|| meta["window"].as_u64().map(|w| w as usize))
        .unwrap_or(DEFAULT_WINDOW);
    if w == 0 {
        return Err(usage("--window must be at least 1"));
    }
    Ok(w)
}

fn load_checkpoint(dir: &Path) -> Result<(Model, serde_json::Value)> {
    // accept a training output directory as well as the checkpoint itself
    let nested = dir.join(CHECKPOINT_DIR);
    let dir = if nested.is_dir() { nested } else { dir.to_path_buf() };
    Ok(Model::load(&dir)?)
}

pub fn synth(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<CommandResult> {
    let mut spec = SynthSpec::from_toml(&read_text(config)?).with_context(|| format!("in {}", config.display()))?;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let out = resolve(out, "synth.jsonl");
    ensure_parent(&out)?;
    let summary = generate_dataset(&spec, &out)?;
    Ok(CommandResult::ok(
        format!("wrote {} tracks to {}", summary.total, out.display()),
        summary_path(&out),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentSummary {
    pub schema_version: String,
    pub input_tracks: usize,
    pub output_tracks: usize,
    pub expansion_factor: usize,
    pub seed: u64,
}

pub fn augment(config: &Path, data: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<CommandResult> {
    let mut policy = AugmentPolicy::from_toml(&read_text(config)?).with_context(|| format!("in {}", config.display()))?;
    if let Some(s) = seed {
        policy.seed = s;
    }
    let tracks = load_tracks(data)?;
    let expanded = expand_training_set(&tracks, &policy)?;
    let out = resolve(out, "augmented.jsonl");
    ensure_parent(&out)?;
    save_tracks(&out, &expanded)?;
    let report = summary_path(&out);
    write_json(
        &report,
        &AugmentSummary {
            schema_version: AUGMENT_SUMMARY_SCHEMA.into(),
            input_tracks: tracks.len(),
            output_tracks: expanded.len(),
            expansion_factor: policy.expansion_factor(),
            seed: policy.seed,
        },
    )?;
    Ok(CommandResult::ok(
        format!("expanded {} tracks to {} in {}", tracks.len(), expanded.len(), out.display()),
        report,
    ))
}

/// Track ids of each subset, so `eval` can re-select them from the same file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub schema_version: String,
    pub seed: u64,
    pub ratios: [f64; 3],
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub warnings: Vec<String>,
}

impl SplitManifest {
    pub fn subset(&self, name: &str) -> Result<&[String]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(usage(format!("unknown subset {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub schema_version: String,
    pub seed: u64,
    pub window: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_windows: usize,
    pub param_count: usize,
    pub final_train_loss: f64,
    pub val: EvalReport,
    pub test: Option<EvalReport>,
    pub elapsed_s: f64,
}

pub fn train(
    config: &Path,
    data: &Path,
    val: Option<&Path>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    window: Option<usize>,
) -> Result<CommandResult> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(w) = window {
        cfg.window = w;
    }
    cfg.validate().with_context(|| format!("in {}", config.display()))?;
    let tracks = load_tracks(data)?;
    let out = resolve(out, "train");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    fs::write(out.join("config.toml"), cfg.to_toml()).context("writing resolved config")?;

    let ids = |ts: &[Track]| ts.iter().map(|t| t.track_id.clone()).collect::<Vec<_>>();
    let (train_set, val_set, test_set) = match val {
        Some(v) => {
            let val_set = load_tracks(v)?;
            (tracks, val_set, Vec::new())
        }
        None => {
            let split = split_dataset(&tracks, cfg.seed, cfg.split)?;
            let (a, b, c) = split.materialize(&tracks);
            write_json(
                &out.join("split.json"),
                &SplitManifest {
                    schema_version: SPLIT_SCHEMA.into(),
                    seed: cfg.seed,
                    ratios: cfg.split,
                    train: ids(&a),
                    val: ids(&b),
                    test: ids(&c),
                    warnings: split.warnings.clone(),
                },
            )?;
            (a, b, c)
        }
    };

    let started = Instant::now();
    let outcome = run_train(&train_set, &val_set, &cfg, Some(&out))?;
    let test = if test_set.is_empty() {
        None
    } else {
        Some(EvalReport::evaluate(&outcome.model, &windows(&test_set, cfg.window))?)
    };
    let report = TrainReport {
        schema_version: TRAIN_REPORT_SCHEMA.into(),
        seed: cfg.seed,
        window: cfg.window,
        epochs_run: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        stopped_early: outcome.stopped_early,
        train_windows: outcome.train_windows,
        param_count: outcome.model.param_count(),
        final_train_loss: outcome.log.last().map_or(f64::NAN, |e| e.train_loss),
        val: outcome.best_report.clone(),
        test,
        elapsed_s: started.elapsed().as_secs_f64(),
    };
    let path = out.join("report.json");
    write_json(&path, &report)?;
    let mut summary = format!(
        "best epoch {} of {}: selection average F1 {:.2}",
        report.best_epoch, report.epochs_run, report.val.average_f1
    );
    if let Some(t) = &report.test {
        summary += &format!(", test average F1 {:.2}", t.average_f1);
    }
    summary += &format!("\ncheckpoint: {}\nlog: {}", out.join(CHECKPOINT_DIR).display(), out.join(LOG_FILE).display());
    Ok(CommandResult::ok(summary, path))
}

pub fn eval(
    checkpoint: &Path,
    data: &Path,
    subset: Option<(&Path, &str)>,
    window: Option<usize>,
    out: Option<PathBuf>,
) -> Result<CommandResult> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let window = checkpoint_window(&meta, window)?;
    let mut tracks = load_tracks(data)?;
    if let Some((split_path, name)) = subset {
        let manifest: SplitManifest =
            serde_json::from_str(&read_text(split_path)?).with_context(|| format!("in {}", split_path.display()))?;
        if manifest.schema_version != SPLIT_SCHEMA {
            return Err(usage(format!(
                "{}: schema_version {} is not {SPLIT_SCHEMA}",
                split_path.display(),
                manifest.schema_version
            )));
        }
        let keep: HashSet<&str> = manifest.subset(name)?.iter().map(String::as_str).collect();
        tracks.retain(|t| keep.contains(t.track_id.as_str()));
        if tracks.len() != keep.len() {
            return Err(usage(format!(
                "{} lists {} {name} tracks, {} found in {}",
                split_path.display(),
                keep.len(),
                tracks.len(),
                data.display()
            )));
        }
    }
    if tracks.is_empty() {
        return Err(usage("no tracks to evaluate"));
    }
    let report = EvalReport::evaluate(&model, &windows(&tracks, window))?;
    let path = resolve(out, "eval.json");
    write_json(&path, &report)?;
    let table = format_table(&TABLE_HEADER, &[report_row(&format!("T={window}"), &report)]);
    Ok(CommandResult::ok(
        format!("{} tracks, window {window}\n{}", report.samples, table.trim_end()),
        path,
    ))
}

pub fn ablate(
    kind: AblationKind,
    config: &Path,
    data: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    window: Option<usize>,
) -> Result<CommandResult> {
    let mut cfg = TrainConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(w) = window {
        cfg.window = w;
    }
    cfg.validate().with_context(|| format!("in {}", config.display()))?;
    let tracks = load_tracks(data)?;
    let split = split_dataset(&tracks, cfg.seed, cfg.split)?;
    let (train, val, test) = split.materialize(&tracks);
    let out = resolve(out, "ablate");
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let report = run_ablation(kind, &cfg, &AblationData { train, val, test }, Some(&out))?;
    let table = report.to_table();
    fs::write(out.join(format!("{}.tsv", kind.name())), &table).context("writing table")?;
    let path = out.join(format!("{}.json", kind.name()));
    write_json(&path, &report)?;
    let mut summary = table.trim_end().to_string();
    if let Some(h) = &report.holdout {
        summary += &format!(
            "\nheld-out intent accuracy {:.2} vs majority baseline {:.2} (margin {:.2} points; reference {:.2})",
            h.intent_accuracy, h.majority_baseline_accuracy, h.margin_points, h.reference_intent_accuracy
        );
    }
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    let mut result = CommandResult::ok(summary, path);
    if failed > 0 {
        result.summary += &format!("\n{failed} variant(s) failed");
        result.exit_code = EXIT_RUNTIME;
    }
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    pub schema_version: String,
    pub track_id: String,
    pub window: usize,
    pub valid_frames: usize,
    #[serde(flatten)]
    pub forecast: Forecast,
}

pub fn predict(checkpoint: &Path, data: &Path, window: Option<usize>, out: Option<PathBuf>) -> Result<CommandResult> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let window = checkpoint_window(&meta, window)?;
    let tracks = load_tracks(data)?;
    let ws: Vec<_> = tracks.iter().map(|t| make_window(t, window)).collect();
    let refs: Vec<_> = ws.iter().collect();
    let forecasts = model.predict(&refs, 32)?;
    let path = resolve(out, "predictions.jsonl");
    ensure_parent(&path)?;
    let file = fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    let mut inconsistent = 0;
    for (win, f) in ws.iter().zip(forecasts) {
        inconsistent += usize::from(!f.consistent);
        let rec = ForecastRecord {
            schema_version: FORECAST_SCHEMA.into(),
            track_id: win.track_id.clone(),
            window,
            valid_frames: win.valid_len(),
            forecast: f,
        };
        writeln!(w, "{}", serde_json::to_string(&rec)?)?;
    }
    w.flush()?;
    Ok(CommandResult::ok(
        format!("{} forecasts ({inconsistent} inconsistent) written to {}", ws.len(), path.display()),
        path,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub schema_version: String,
    pub source: String,
    pub param_count: usize,
    pub params_m: f64,
    pub latency: LatencyStats,
}

pub fn bench(
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    data: Option<&Path>,
    window: Option<usize>,
    out: Option<PathBuf>,
) -> Result<CommandResult> {
    let (model, window, source) = match (checkpoint, config) {
        (Some(dir), _) => {
            let (m, meta) = load_checkpoint(dir)?;
            (m, checkpoint_window(&meta, window)?, dir.display().to_string())
        }
        (None, Some(c)) => {
            let cfg = TrainConfig::load(c)?;
            let w = window.unwrap_or(cfg.window);
            (Model::new(cfg.model, cfg.seed)?, w, c.display().to_string())
        }
        (None, None) => bail!(Usage("bench needs --checkpoint or --config".into())),
    };
    if window == 0 {
        return Err(usage("--window must be at least 1"));
    }
    let track = match data {
        Some(p) => load_tracks(p)?
            .into_iter()
            .next()
            .ok_or_else(|| usage(format!("{} holds no tracks", p.display())))?,
        None => {
            let mut spec = SynthSpec::uniform(1, 0);
            spec.frames = window;
            generate_track(ActionLabel::Wave, &spec, 0)
        }
    };
    let latency = measure_latency(&model, &make_window(&track, window), BENCH_TRIALS, BENCH_WARMUP)?;
    let param_count = model.param_count();
    let report = BenchReport {
        schema_version: BENCH_SCHEMA.into(),
        source,
        param_count,
        params_m: param_count as f64 / 1e6,
        latency,
    };
    let path = resolve(out, "bench.json");
    write_json(&path, &report)?;
    Ok(CommandResult::ok(
        format!(
            "params {} ({:.2}M); latency at T={window}: p50 {:.2} ms, p95 {:.2} ms over {} trials on {}",
            param_count,
            report.params_m,
            report.latency.p50_ms,
            report.latency.p95_ms,
            report.latency.trials,
            report.latency.environment.cpu
        ),
        path,
    ))
}
