//! Hierarchical multitask classifier: single-task, parallel, tree and chain
//! designs over a window embedding, plus the attitude-masked loss.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::{attitude_from_action, intent_from_action, ActionLabel, AttitudeLabel, IntentLabel, Labels};
use crate::error::{Error, Result};
use crate::nn::{Fwd, Linear, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HierarchyDesign {
    SingleTask,
    Parallel,
    Tree,
    #[default]
    Chain,
}

impl HierarchyDesign {
    pub const ALL: [HierarchyDesign; 4] = [
        HierarchyDesign::SingleTask,
        HierarchyDesign::Parallel,
        HierarchyDesign::Tree,
        HierarchyDesign::Chain,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HierarchyDesign::SingleTask => "single_task",
            HierarchyDesign::Parallel => "parallel",
            HierarchyDesign::Tree => "tree",
            HierarchyDesign::Chain => "chain",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown hierarchy design `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Intent,
    Attitude,
    Action,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Intent, Task::Attitude, Task::Action];

    pub fn classes(self) -> usize {
        match self {
            Task::Intent => 3,
            Task::Attitude => 2,
            Task::Action => 10,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Intent => "intent",
            Task::Attitude => "attitude",
            Task::Action => "action",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub design: HierarchyDesign,
    pub hidden: usize,
    pub dropout: f64,
    /// Task trained by the single-task design.
    pub single_task: Task,
    /// Loss weights for intent, attitude, action.
    pub task_weights: [f64; 3],
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            design: HierarchyDesign::Chain,
            hidden: 128,
            dropout: 0.1,
            single_task: Task::Action,
            task_weights: [1.0; 3],
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("heads.hidden: must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("heads.dropout: must be in [0, 1)".into()));
        }
        if self.task_weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config("heads.task_weights: must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn has_head(&self, task: Task) -> bool {
        self.design != HierarchyDesign::SingleTask || self.single_task == task
    }

    /// Input width of each task's stack for an embedding of width `z`.
    pub fn input_width(&self, task: Task, z: usize) -> Option<usize> {
        if !self.has_head(task) {
            return None;
        }
        let extra = match (self.design, task) {
            (HierarchyDesign::Tree, Task::Attitude | Task::Action) => 3,
            (HierarchyDesign::Chain, Task::Attitude) => 3,
            (HierarchyDesign::Chain, Task::Action) => 3 + 2,
            _ => 0,
        };
        Some(z + extra)
    }
}

/// Two affine layers with rectification and dropout between.
#[derive(Debug, Clone, Copy)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

#[derive(Debug, Clone)]
pub struct Heads {
    pub config: HeadConfig,
    pub embedding_width: usize,
    stacks: [Option<Mlp>; 3],
}

/// Logits (absent for untrained tasks) and probabilities per task.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub logits: [Option<Var>; 3],
    pub probs: [Var; 3],
}

impl Heads {
    pub fn new(config: HeadConfig, embedding_width: usize, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut stacks = [None; 3];
        for task in Task::ALL {
            if let Some(width) = config.input_width(task, embedding_width) {
                let name = format!("heads.{}", task.name());
                stacks[task.index()] = Some(Mlp {
                    fc1: Linear::new(store, rng, &format!("{name}.fc1"), width, config.hidden),
                    fc2: Linear::new(store, rng, &format!("{name}.fc2"), config.hidden, task.classes()),
                });
            }
        }
        Ok(Heads {
            config,
            embedding_width,
            stacks,
        })
    }

    pub fn stack(&self, task: Task) -> Option<&Mlp> {
        self.stacks[task.index()].as_ref()
    }

    fn run(&self, f: &mut Fwd, mlp: &Mlp, x: Var) -> Var {
        let h = f.linear(&mlp.fc1, x);
        let h = f.g.relu(h);
        let h = f.dropout(h, self.config.dropout);
        f.linear(&mlp.fc2, h)
    }

    pub fn forward(&self, f: &mut Fwd, z: Var) -> HeadOutput {
        let batch = f.g.value(z).nrows();
        let mut logits = [None; 3];
        let mut probs = [None; 3];
        let mut head = |f: &mut Fwd, task: Task, input: Var| {
            let mlp = self.stacks[task.index()].as_ref().expect("head exists");
            let l = self.run(f, mlp, input);
            logits[task.index()] = Some(l);
            let p = f.g.softmax_rows(l);
            probs[task.index()] = Some(p);
            p
        };
        match self.config.design {
            HierarchyDesign::SingleTask => {
                head(f, self.config.single_task, z);
            }
            HierarchyDesign::Parallel => {
                for task in Task::ALL {
                    head(f, task, z);
                }
            }
            HierarchyDesign::Tree => {
                let pi = head(f, Task::Intent, z);
                let x = f.g.concat_cols(&[z, pi]);
                head(f, Task::Attitude, x);
                head(f, Task::Action, x);
            }
            HierarchyDesign::Chain => {
                let pi = head(f, Task::Intent, z);
                let x = f.g.concat_cols(&[z, pi]);
                let pa = head(f, Task::Attitude, x);
                let x = f.g.concat_cols(&[z, pi, pa]);
                head(f, Task::Action, x);
            }
        }
        let probs = Task::ALL.map(|t| {
            probs[t.index()].unwrap_or_else(|| f.g.input(Array2::from_elem((batch, t.classes()), 1.0 / t.classes() as f64)))
        });
        HeadOutput { logits, probs }
    }

    /// Weighted sum of per-task cross-entropies; the attitude term is averaged
    /// over truly interacting samples only and is exactly 0 when there are none.
    pub fn loss(&self, f: &mut Fwd, out: &HeadOutput, labels: &[Labels]) -> Var {
        let n = labels.len() as f64;
        let interacting = labels.iter().filter(|l| l.intent == IntentLabel::Interacting).count();
        let mut total: Option<Var> = None;
        for task in Task::ALL {
            let Some(logits) = out.logits[task.index()] else { continue };
            let tw = self.config.task_weights[task.index()];
            let (targets, weights): (Vec<usize>, Vec<f64>) = labels
                .iter()
                .map(|l| match task {
                    Task::Intent => (l.intent.index(), tw / n),
                    Task::Action => (l.action.index(), tw / n),
                    Task::Attitude => match (l.intent, l.attitude.index()) {
                        (IntentLabel::Interacting, Some(a)) => (a, tw / interacting as f64),
                        _ => (0, 0.0),
                    },
                })
                .unzip();
            let term = f.g.cross_entropy(logits, Rc::new(targets), Rc::new(weights));
            total = Some(match total {
                Some(t) => f.g.add(t, term),
                None => term,
            });
        }
        total.expect("at least one head")
    }
}

/// Per-window prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forecast {
    pub intent_probs: Vec<f64>,
    pub attitude_probs: Vec<f64>,
    pub action_probs: Vec<f64>,
    pub intent: IntentLabel,
    pub attitude: AttitudeLabel,
    pub action: ActionLabel,
    pub consistent: bool,
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

impl Forecast {
    pub fn from_probs(intent: Vec<f64>, attitude: Vec<f64>, action: Vec<f64>) -> Self {
        let mut f = Forecast {
            intent: IntentLabel::from_index(argmax(&intent)).expect("3 intent classes"),
            attitude: AttitudeLabel::from_index(argmax(&attitude)).expect("2 attitude classes"),
            action: ActionLabel::from_index(argmax(&action)).expect("10 action classes"),
            intent_probs: intent,
            attitude_probs: attitude,
            action_probs: action,
            consistent: true,
        };
        f.consistent = check_consistency(&f).consistent;
        f
    }

    /// Rows of three probability matrices.
    pub fn from_batch(intent: &Array2<f64>, attitude: &Array2<f64>, action: &Array2<f64>) -> Vec<Self> {
        (0..intent.nrows())
            .map(|i| Forecast::from_probs(intent.row(i).to_vec(), attitude.row(i).to_vec(), action.row(i).to_vec()))
            .collect()
    }

    pub fn probs(&self, task: Task) -> &[f64] {
        match task {
            Task::Intent => &self.intent_probs,
            Task::Attitude => &self.attitude_probs,
            Task::Action => &self.action_probs,
        }
    }

    /// Predicted class index for `task`.
    pub fn predicted(&self, task: Task) -> usize {
        match task {
            Task::Intent => self.intent.index(),
            Task::Attitude => self.attitude.index().expect("forecast attitude is a class"),
            Task::Action => self.action.index(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Consistency {
    pub consistent: bool,
    pub violation: Option<String>,
}

/// Whether the predicted intent and attitude agree with those implied by the predicted action.
pub fn check_consistency(f: &Forecast) -> Consistency {
    let want_intent = intent_from_action(f.action);
    let want_attitude = attitude_from_action(f.action);
    let mut problems = Vec::new();
    if want_intent != f.intent {
        problems.push(format!(
            "action {} implies intent {}, predicted {}",
            f.action.name(),
            want_intent.name(),
            f.intent.name()
        ));
    }
    if want_attitude != AttitudeLabel::NotApplicable && want_attitude != f.attitude {
        problems.push(format!(
            "action {} implies attitude {}, predicted {}",
            f.action.name(),
            want_attitude.name(),
            f.attitude.name()
        ));
    }
    Consistency {
        consistent: problems.is_empty(),
        violation: (!problems.is_empty()).then(|| problems.join("; ")),
    }
}

/// The multitask loss evaluated on probability forecasts.
pub fn multitask_loss(forecasts: &[Forecast], labels: &[Labels], config: &HeadConfig) -> f64 {
    let nll = |p: f64| -p.max(f64::MIN_POSITIVE).ln();
    let n = labels.len().max(1) as f64;
    let w = config.task_weights;
    let mut intent = 0.0;
    let mut action = 0.0;
    let mut attitude = 0.0;
    let mut interacting = 0usize;
    for (f, l) in forecasts.iter().zip(labels) {
        intent += nll(f.intent_probs[l.intent.index()]);
        action += nll(f.action_probs[l.action.index()]);
        if let (IntentLabel::Interacting, Some(a)) = (l.intent, l.attitude.index()) {
            attitude += nll(f.attitude_probs[a]);
            interacting += 1;
        }
    }
    let attitude = if interacting == 0 { 0.0 } else { attitude / interacting as f64 };
    let terms = [intent / n, attitude, action / n];
    Task::ALL
        .iter()
        .filter(|t| config.has_head(**t))
        .map(|t| w[t.index()] * terms[t.index()])
        .sum()
}
