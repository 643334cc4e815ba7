mod common;

use egointent::data::{make_window, ActionLabel, Labels};
use egointent::heads::{Forecast, Task};
use egointent::metrics::{
    accuracy, confusion_matrix, format_table, macro_f1, measure_latency, report_row, task_average, time_trials,
    summarize_latency, EvalReport, TABLE_HEADER,
};
use egointent::model::{Model, ModelConfig};
use egointent::nn::Fwd;
use ndarray::Array2;
use proptest::prelude::*;

/// Per-class F1 from precision and recall, computed directly from the sequences.
fn oracle_macro_f1(preds: &[usize], labels: &[usize], k: usize) -> f64 {
    let mut sum = 0.0;
    for c in 0..k {
        let tp = preds.iter().zip(labels).filter(|(p, l)| **p == c && **l == c).count() as f64;
        let pp = preds.iter().filter(|p| **p == c).count() as f64;
        let ap = labels.iter().filter(|l| **l == c).count() as f64;
        let precision = if pp > 0.0 { tp / pp } else { 0.0 };
        let recall = if ap > 0.0 { tp / ap } else { 0.0 };
        if precision + recall > 0.0 {
            sum += 2.0 * precision * recall / (precision + recall);
        }
    }
    100.0 * sum / k as f64
}

fn pairs() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
    (2usize..6).prop_flat_map(|k| (Just(k), prop::collection::vec((0..k, 0..k), 1..60)))
}

proptest! {
    #[test]
    fn macro_f1_matches_oracle((k, v) in pairs()) {
        let (p, l): (Vec<usize>, Vec<usize>) = v.into_iter().unzip();
        let got = macro_f1(&p, &l, k).unwrap();
        prop_assert!((got - oracle_macro_f1(&p, &l, k)).abs() < 1e-9);
    }

    #[test]
    fn relabelling_leaves_macro_f1_unchanged((k, v) in pairs(), shift in 1usize..5) {
        let (p, l): (Vec<usize>, Vec<usize>) = v.into_iter().unzip();
        let perm = |x: &usize| (x + shift) % k;
        let p2: Vec<usize> = p.iter().map(perm).collect();
        let l2: Vec<usize> = l.iter().map(perm).collect();
        prop_assert!((macro_f1(&p, &l, k).unwrap() - macro_f1(&p2, &l2, k).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn accuracy_is_trace_over_total((k, v) in pairs()) {
        let (p, l): (Vec<usize>, Vec<usize>) = v.into_iter().unzip();
        let cm = confusion_matrix(&p, &l, k).unwrap();
        let trace: usize = (0..k).map(|i| cm[i][i]).sum();
        let total: usize = cm.iter().flatten().sum();
        prop_assert_eq!(total, p.len());
        prop_assert!((accuracy(&p, &l).unwrap() - 100.0 * trace as f64 / total as f64).abs() < 1e-12);
        for (c, row) in cm.iter().enumerate() {
            prop_assert_eq!(row.iter().sum::<usize>(), l.iter().filter(|x| **x == c).count());
        }
    }

    #[test]
    fn perfect_predictions_score_100(k in 1usize..8, extra in prop::collection::vec(0usize..64, 0..40)) {
        // every class present; absent classes would score 0 by convention
        let labels: Vec<usize> = (0..k).chain(extra.iter().map(|e| e % k)).collect();
        prop_assert_eq!(macro_f1(&labels, &labels, k).unwrap(), 100.0);
        let cm = confusion_matrix(&labels, &labels, k).unwrap();
        for (i, row) in cm.iter().enumerate() {
            for (j, &n) in row.iter().enumerate() {
                let want = if i == j { labels.iter().filter(|x| **x == i).count() } else { 0 };
                prop_assert_eq!(n, want);
            }
        }
    }
}

#[test]
fn two_class_hand_example() {
    // class 0: P = 1/2, R = 1/2; class 1: same
    assert_eq!(macro_f1(&[0, 1, 0, 1], &[0, 0, 1, 1], 2).unwrap(), 50.0);
}

#[test]
fn averaging_of_a_three_task_row() {
    let avg = task_average([88.43, 88.99, 69.57]);
    assert!((avg - 82.33).abs() <= 0.005, "{avg}");
}

fn forecast(action: ActionLabel, attitude: usize) -> Forecast {
    let onehot = |n: usize, i: usize| (0..n).map(|j| if i == j { 1.0 } else { 0.0 }).collect::<Vec<f64>>();
    let l = Labels::from_action(action);
    Forecast::from_probs(onehot(3, l.intent.index()), onehot(2, attitude), onehot(10, action.index()))
}

#[test]
fn attitude_is_scored_on_interacting_samples_only() {
    let truth = [ActionLabel::Hug, ActionLabel::Punch, ActionLabel::Gaze, ActionLabel::NoResponse];
    let labels: Vec<Labels> = truth.iter().map(|&a| Labels::from_action(a)).collect();
    // attitude wrong on the hug, and arbitrary on the non-interacting ones
    let preds = vec![
        forecast(ActionLabel::Hug, 1),
        forecast(ActionLabel::Punch, 1),
        forecast(ActionLabel::Gaze, 1),
        forecast(ActionLabel::NoResponse, 0),
    ];
    let r = EvalReport::from_forecasts(&preds, &labels, 30, 0).unwrap();
    r.validate().unwrap();
    let att = r.task(Task::Attitude);
    assert_eq!(att.support, 2);
    assert_eq!(att.accuracy, 50.0);
    assert_eq!(r.task(Task::Intent).accuracy, 100.0);
    assert_eq!(r.consistency_rate, 75.0);
    assert!((r.average_f1 - task_average(r.f1s())).abs() < 1e-12);
    let back: EvalReport = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn report_flags_largest_confusion() {
    let labels: Vec<Labels> = [ActionLabel::Pet, ActionLabel::Pet, ActionLabel::Hug, ActionLabel::Wave]
        .iter()
        .map(|&a| Labels::from_action(a))
        .collect();
    let preds = vec![
        forecast(ActionLabel::Hug, 0),
        forecast(ActionLabel::Hug, 0),
        forecast(ActionLabel::Hug, 0),
        forecast(ActionLabel::Wave, 0),
    ];
    let r = EvalReport::from_forecasts(&preds, &labels, 30, 0).unwrap();
    let pair = r.task(Task::Action).largest_confusion.clone().unwrap();
    assert_eq!((pair.true_class.as_str(), pair.predicted_class.as_str(), pair.count), ("pet", "hug", 2));
    assert_eq!(r.tasks.len(), 3);
}

#[test]
fn table_rows_mirror_header() {
    let labels = vec![Labels::from_action(ActionLabel::Hug)];
    let r = EvalReport::from_forecasts(&[forecast(ActionLabel::Hug, 0)], &labels, 30, 3_180_000).unwrap();
    let row = report_row("chain", &r);
    assert_eq!(row.len(), TABLE_HEADER.len());
    assert_eq!(row[1], "3.18");
    let t = format_table(&TABLE_HEADER, &[row]);
    assert!(t.starts_with("variant\tparams_m\tintent_f1"));
}

fn small_model() -> Model {
    let mut c = ModelConfig::default();
    c.encoder.temporal_hidden = 16;
    c.encoder.temporal_layers = 1;
    c.heads.hidden = 16;
    Model::new(c, 0).unwrap()
}

#[test]
fn latency_protocol() {
    let model = small_model();
    let t = common::corpus(1, 1).remove(0);
    let w = make_window(&t, 10);
    assert!(measure_latency(&model, &w, 29, 5).is_err());
    assert!(measure_latency(&model, &w, 30, 4).is_err());
    let s = measure_latency(&model, &w, 30, 5).unwrap();
    assert_eq!((s.trials, s.warmup, s.window), (30, 5, 10));
    assert!(s.min_ms <= s.p50_ms && s.p50_ms <= s.p95_ms && s.p95_ms <= s.max_ms);
    assert!(s.mean_ms > 0.0);
    assert!(!s.environment.os.is_empty() && !s.environment.cpu.is_empty());
}

#[test]
fn recurrent_latency_scales_with_window() {
    let mut c = ModelConfig::default();
    c.encoder.temporal_layers = 2;
    let model = Model::new(c, 0).unwrap();
    let width = model.config.encoder.frame_width();
    let run = |steps: usize| {
        let batch = 4;
        let x = Array2::from_shape_fn((batch * steps, width), |(i, j)| ((i * 7 + j) % 13) as f64 * 0.01);
        let valid = vec![true; batch * steps];
        let ms = time_trials(30, 5, || {
            let mut f = Fwd::eval(&model.store);
            let seq = f.g.input(x.clone());
            model.encoder.temporal_forward(&mut f, seq, &valid, batch, steps).map(|_| ())
        })
        .unwrap();
        summarize_latency(ms, 5, steps).p50_ms
    };
    let ratio = run(60) / run(30);
    assert!((1.5..=2.5).contains(&ratio), "{ratio}");
}
