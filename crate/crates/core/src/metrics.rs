//! Classification metrics, evaluation reports, latency measurement and table output.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{ActionLabel, AttitudeLabel, IntentLabel, Labels, ObservationWindow};
use crate::error::{Error, Result};
use crate::heads::{Forecast, Task};
use crate::model::Model;

pub const EVAL_REPORT_SCHEMA: &str = "eval_report/1";
pub const LATENCY_SCHEMA: &str = "latency_report/1";

fn check_pair(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("empty prediction set".into()));
    }
    if preds.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions vs {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

/// `cm[i][j]` counts samples of true class `i` predicted as `j`.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    check_pair(preds, labels)?;
    let mut cm = vec![vec![0; num_classes]; num_classes];
    for (i, (&p, &l)) in preds.iter().zip(labels).enumerate() {
        if p >= num_classes || l >= num_classes {
            return Err(Error::InvalidInput(format!(
                "sample {i}: class index out of range (pred {p}, label {l}, {num_classes} classes)"
            )));
        }
        cm[l][p] += 1;
    }
    Ok(cm)
}

/// Unweighted mean of per-class F1, in percent. Classes with no support and no
/// predictions score 0 and still count in the mean.
pub fn macro_f1(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<f64> {
    let cm = confusion_matrix(preds, labels, num_classes)?;
    Ok(macro_f1_from_confusion(&cm))
}

pub fn macro_f1_from_confusion(cm: &[Vec<usize>]) -> f64 {
    let k = cm.len();
    let mut total = 0.0;
    for c in 0..k {
        let tp = cm[c][c] as f64;
        let support: usize = cm[c].iter().sum();
        let predicted: usize = cm.iter().map(|r| r[c]).sum();
        let denom = (support + predicted) as f64;
        if denom > 0.0 {
            total += 2.0 * tp / denom;
        }
    }
    100.0 * total / k as f64
}

/// Percentage of exact matches.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_pair(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// The cross-task average used for the "average" columns.
pub fn task_average(values: [f64; 3]) -> f64 {
    (values[0] + values[1] + values[2]) / 3.0
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionPair {
    pub true_class: String,
    pub predicted_class: String,
    pub count: usize,
}

/// Most frequent off-diagonal cell; `None` when there are no errors.
pub fn largest_confusion(cm: &[Vec<usize>], names: &[&str]) -> Option<ConfusionPair> {
    let mut best: Option<(usize, usize, usize)> = None;
    for (i, row) in cm.iter().enumerate() {
        for (j, &n) in row.iter().enumerate() {
            if i != j && n > 0 && best.is_none_or(|b| n > b.2) {
                best = Some((i, j, n));
            }
        }
    }
    best.map(|(i, j, count)| ConfusionPair {
        true_class: names[i].to_string(),
        predicted_class: names[j].to_string(),
        count,
    })
}

pub fn class_names(task: Task) -> Vec<&'static str> {
    match task {
        Task::Intent => IntentLabel::ALL.iter().map(|c| c.name()).collect(),
        Task::Attitude => AttitudeLabel::CLASSES.iter().map(|c| c.name()).collect(),
        Task::Action => ActionLabel::ALL.iter().map(|c| c.name()).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub task: String,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// Samples scored for this task (attitude: truly interacting ones only).
    pub support: usize,
    pub classes: Vec<String>,
    pub confusion: Vec<Vec<usize>>,
    pub largest_confusion: Option<ConfusionPair>,
}

impl TaskMetrics {
    /// An empty subset scores 0 on both metrics.
    pub fn compute(task: Task, preds: &[usize], labels: &[usize]) -> Result<Self> {
        let names = class_names(task);
        let k = names.len();
        let (confusion, f1, acc) = if preds.is_empty() && labels.is_empty() {
            (vec![vec![0; k]; k], 0.0, 0.0)
        } else {
            let cm = confusion_matrix(preds, labels, k)?;
            let f1 = macro_f1_from_confusion(&cm);
            let trace: usize = (0..k).map(|i| cm[i][i]).sum();
            (cm, f1, 100.0 * trace as f64 / labels.len() as f64)
        };
        Ok(TaskMetrics {
            task: task.name().to_string(),
            macro_f1: f1,
            accuracy: acc,
            support: labels.len(),
            classes: names.iter().map(|s| s.to_string()).collect(),
            largest_confusion: largest_confusion(&confusion, &names),
            confusion,
        })
    }
}

/// Prediction/label index pairs for one task; attitude keeps truly interacting samples only.
pub fn task_pairs(task: Task, forecasts: &[Forecast], labels: &[Labels]) -> (Vec<usize>, Vec<usize>) {
    forecasts
        .iter()
        .zip(labels)
        .filter_map(|(f, l)| {
            let truth = match task {
                Task::Intent => Some(l.intent.index()),
                Task::Action => Some(l.action.index()),
                Task::Attitude => match l.intent {
                    IntentLabel::Interacting => l.attitude.index(),
                    _ => None,
                },
            };
            truth.map(|t| (f.predicted(task), t))
        })
        .unzip()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: String,
    pub samples: usize,
    pub window: usize,
    /// Intent, attitude, action.
    pub tasks: Vec<TaskMetrics>,
    pub average_f1: f64,
    pub average_accuracy: f64,
    /// Percentage of forecasts whose three outputs agree with the label rules.
    pub consistency_rate: f64,
    pub param_count: usize,
    pub latency: Option<LatencyStats>,
}

impl EvalReport {
    pub fn from_forecasts(forecasts: &[Forecast], labels: &[Labels], window: usize, param_count: usize) -> Result<Self> {
        if forecasts.is_empty() {
            return Err(Error::InvalidInput("cannot evaluate an empty set".into()));
        }
        if forecasts.len() != labels.len() {
            return Err(Error::InvalidInput(format!(
                "{} forecasts vs {} labels",
                forecasts.len(),
                labels.len()
            )));
        }
        let tasks = Task::ALL
            .iter()
            .map(|&t| {
                let (p, l) = task_pairs(t, forecasts, labels);
                TaskMetrics::compute(t, &p, &l)
            })
            .collect::<Result<Vec<_>>>()?;
        let consistent = forecasts.iter().filter(|f| f.consistent).count();
        Ok(EvalReport {
            schema_version: EVAL_REPORT_SCHEMA.to_string(),
            samples: forecasts.len(),
            window,
            average_f1: task_average([tasks[0].macro_f1, tasks[1].macro_f1, tasks[2].macro_f1]),
            average_accuracy: task_average([tasks[0].accuracy, tasks[1].accuracy, tasks[2].accuracy]),
            tasks,
            consistency_rate: 100.0 * consistent as f64 / forecasts.len() as f64,
            param_count,
            latency: None,
        })
    }

    /// Runs `model` over `windows` and scores it against their labels.
    pub fn evaluate(model: &Model, windows: &[ObservationWindow]) -> Result<Self> {
        let refs: Vec<&ObservationWindow> = windows.iter().collect();
        let forecasts = model.predict(&refs, 32)?;
        let labels: Vec<Labels> = windows.iter().map(|w| w.labels).collect();
        let window = windows.first().map_or(0, |w| w.len());
        Self::from_forecasts(&forecasts, &labels, window, model.param_count())
    }

    pub fn task(&self, task: Task) -> &TaskMetrics {
        &self.tasks[task.index()]
    }

    /// `[intent, attitude, action]` macro-F1.
    pub fn f1s(&self) -> [f64; 3] {
        [self.tasks[0].macro_f1, self.tasks[1].macro_f1, self.tasks[2].macro_f1]
    }

    pub fn accuracies(&self) -> [f64; 3] {
        [self.tasks[0].accuracy, self.tasks[1].accuracy, self.tasks[2].accuracy]
    }

    /// Checks the report's internal invariants.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        for t in &self.tasks {
            if !pct(t.macro_f1) || !pct(t.accuracy) {
                return bad(format!("{}: percentage out of range", t.task));
            }
            let total: usize = t.confusion.iter().flatten().sum();
            if total != t.support {
                return bad(format!("{}: confusion total {total} != support {}", t.task, t.support));
            }
        }
        if (self.average_f1 - task_average(self.f1s())).abs() > 1e-6
            || (self.average_accuracy - task_average(self.accuracies())).abs() > 1e-6
        {
            return bad("averages differ from the task means".into());
        }
        if !pct(self.consistency_rate) {
            return bad("consistency rate out of range".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub os: String,
    pub arch: String,
    pub cpu: String,
    pub threads: usize,
    pub optimized: bool,
    pub crate_version: String,
}

impl Environment {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Environment {
            os: std::env::consts::OS.to_string(),
            arch: std::env::consts::ARCH.to_string(),
            cpu,
            threads: 1,
            optimized: !cfg!(debug_assertions),
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub trials: usize,
    pub warmup: usize,
    pub window: usize,
    pub mean_ms: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub environment: Environment,
}

pub const MIN_TRIALS: usize = 30;
pub const MIN_WARMUP: usize = 5;

/// Nearest-rank percentile of ascending `sorted`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let rank = ((q / 100.0) * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

/// Times `f` over `trials` runs after `warmup` untimed ones.
pub fn time_trials<F: FnMut() -> Result<()>>(trials: usize, warmup: usize, mut f: F) -> Result<Vec<f64>> {
    for _ in 0..warmup {
        f()?;
    }
    let mut ms = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        f()?;
        ms.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    Ok(ms)
}

pub fn summarize_latency(mut ms: Vec<f64>, warmup: usize, window: usize) -> LatencyStats {
    ms.sort_by(f64::total_cmp);
    LatencyStats {
        trials: ms.len(),
        warmup,
        window,
        mean_ms: ms.iter().sum::<f64>() / ms.len() as f64,
        p50_ms: percentile(&ms, 50.0),
        p95_ms: percentile(&ms, 95.0),
        min_ms: ms[0],
        max_ms: ms[ms.len() - 1],
        environment: Environment::detect(),
    }
}

/// Wall-clock time of a single-window forward pass (graph build, encoder, heads).
pub fn measure_latency(model: &Model, window: &ObservationWindow, trials: usize, warmup: usize) -> Result<LatencyStats> {
    if trials < MIN_TRIALS || warmup < MIN_WARMUP {
        return Err(Error::InvalidInput(format!(
            "latency needs at least {MIN_TRIALS} trials and {MIN_WARMUP} warmup runs, got {trials}/{warmup}"
        )));
    }
    let ms = time_trials(trials, warmup, || model.predict(&[window], 1).map(|_| ()))?;
    Ok(summarize_latency(ms, warmup, window.len()))
}

/// Column layout of the comparison tables: per-task F1/accuracy plus averages.
pub const TABLE_HEADER: [&str; 10] = [
    "variant",
    "params_m",
    "intent_f1",
    "intent_acc",
    "attitude_f1",
    "attitude_acc",
    "action_f1",
    "action_acc",
    "average_f1",
    "average_acc",
];

pub fn report_row(variant: &str, report: &EvalReport) -> Vec<String> {
    let mut row = vec![variant.to_string(), format!("{:.2}", report.param_count as f64 / 1e6)];
    for t in &report.tasks {
        row.push(format!("{:.2}", t.macro_f1));
        row.push(format!("{:.2}", t.accuracy));
    }
    row.push(format!("{:.2}", report.average_f1));
    row.push(format!("{:.2}", report.average_accuracy));
    row
}

/// Tab-separated table with a header line.
pub fn format_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = header.join("\t");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_right_two_classes() {
        assert_eq!(macro_f1(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap(), 50.0);
        assert_eq!(accuracy(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 50.0);
    }

    #[test]
    fn unseen_classes_count_as_zero() {
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 2).unwrap(), 100.0);
        assert_eq!(macro_f1(&[0, 1], &[0, 1], 4).unwrap(), 50.0);
    }

    #[test]
    fn errors() {
        assert!(macro_f1(&[], &[], 2).is_err());
        assert!(accuracy(&[0], &[0, 1]).is_err());
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
    }

    #[test]
    fn largest_pair() {
        let cm = vec![vec![5, 1, 0], vec![3, 2, 0], vec![0, 0, 4]];
        let p = largest_confusion(&cm, &["a", "b", "c"]).unwrap();
        assert_eq!((p.true_class.as_str(), p.predicted_class.as_str(), p.count), ("b", "a", 3));
        assert!(largest_confusion(&[vec![2, 0], vec![0, 1]], &["a", "b"]).is_none());
    }

    #[test]
    fn nearest_rank() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&v, 50.0), 50.0);
        assert_eq!(percentile(&v, 95.0), 95.0);
        assert_eq!(percentile(&[3.0], 95.0), 3.0);
    }

    #[test]
    fn table_is_tab_separated() {
        let t = format_table(&["a", "b"], &[vec!["1".into(), "2".into()]]);
        assert_eq!(t, "a\tb\n1\t2\n");
    }
}
