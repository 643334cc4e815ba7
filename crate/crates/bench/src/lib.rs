//! Fixtures shared by the criterion benches.

use egointent::data::{make_window, ObservationWindow};
use egointent::synthetic::{generate_tracks, SynthSpec};
use egointent::training::TrainConfig;
use egointent::model::Model;
use egointent::nn::Fwd;
use egointent::Result;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// `n` windows of length `window` cycling through the action classes.
pub fn windows(n: usize, window: usize) -> Vec<ObservationWindow> {
    let mut spec = SynthSpec::uniform(n.div_ceil(10), 0);
    spec.frames = window;
    generate_tracks(&spec).iter().take(n).map(|t| make_window(t, window)).collect()
}

pub fn default_model() -> Model {
    Model::new(TrainConfig::default().model, 0).expect("default config is valid")
}

/// Forward, loss and backward for one batch; returns the loss.
pub fn train_step(model: &Model, batch: &[ObservationWindow]) -> Result<f64> {
    let refs: Vec<&ObservationWindow> = batch.iter().collect();
    let labels: Vec<_> = batch.iter().map(|w| w.labels).collect();
    let input = model.input(&refs)?;
    let mut f = Fwd::train(&model.store, ChaCha8Rng::seed_from_u64(0));
    let out = model.forward(&mut f, &input)?;
    let loss = model.heads.loss(&mut f, &out.heads, &labels);
    let value = f.g.scalar(loss);
    let _grads = f.g.backward(loss);
    Ok(value)
}
