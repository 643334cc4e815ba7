//! The full forecaster (encoder + heads), batched prediction and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::ObservationWindow;
use crate::encoder::{Encoder, EncoderConfig, EncoderInput, EncoderOutput};
use crate::error::{Error, Result};
use crate::heads::{Forecast, HeadConfig, HeadOutput, Heads};
use crate::nn::{Fwd, ParamStore};

pub const MODEL_SCHEMA: &str = "egointent_model/1";
pub const CHECKPOINT_SCHEMA: &str = "egointent_checkpoint/1";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const WEIGHTS_FILE: &str = "weights.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_model_schema")]
    pub schema_version: String,
    #[serde(default)]
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub heads: HeadConfig,
}

fn default_model_schema() -> String {
    MODEL_SCHEMA.to_string()
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            schema_version: default_model_schema(),
            encoder: EncoderConfig::default(),
            heads: HeadConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != MODEL_SCHEMA {
            return Err(Error::Config(format!(
                "model.schema_version: expected {MODEL_SCHEMA}, found {}",
                self.schema_version
            )));
        }
        self.encoder.validate()?;
        self.heads.validate()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ModelOutput {
    pub encoder: EncoderOutput,
    pub heads: HeadOutput,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub heads: Heads,
}

impl Model {
    /// Freshly initialised model; initial weights depend only on `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = Encoder::new(config.encoder.clone(), &mut store, &mut rng)?;
        let heads = Heads::new(config.heads.clone(), config.encoder.output_width(), &mut store, &mut rng)?;
        Ok(Model {
            config,
            store,
            encoder,
            heads,
        })
    }

    /// Exact number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn input(&self, windows: &[&ObservationWindow]) -> Result<EncoderInput> {
        EncoderInput::from_windows(windows, &self.config.encoder.parts)
    }

    pub fn forward(&self, f: &mut Fwd, input: &EncoderInput) -> Result<ModelOutput> {
        let encoder = self.encoder.forward(f, input)?;
        let heads = self.heads.forward(f, encoder.temporal.embedding);
        Ok(ModelOutput { encoder, heads })
    }

    /// Forecasts in evaluation mode, `chunk` windows per pass.
    pub fn predict(&self, windows: &[&ObservationWindow], chunk: usize) -> Result<Vec<Forecast>> {
        let mut out = Vec::with_capacity(windows.len());
        for group in windows.chunks(chunk.max(1)) {
            let input = self.input(group)?;
            let mut f = Fwd::eval(&self.store);
            let o = self.forward(&mut f, &input)?;
            let [pi, pa, pc] = o.heads.probs.map(|p: Var| f.g.value(p).clone());
            if pi.iter().chain(&pa).chain(&pc).any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("forecast probabilities".into()));
            }
            out.extend(Forecast::from_batch(&pi, &pa, &pc));
        }
        Ok(out)
    }

    /// Writes `checkpoint.json` (config + tensor manifest) and `weights.bin` into `dir`.
    pub fn save(&self, dir: &Path, metadata: serde_json::Value) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut tensors = Vec::with_capacity(self.store.len());
        let mut blob = Vec::with_capacity(self.param_count() * 8);
        for e in self.store.entries() {
            tensors.push(TensorEntry {
                name: e.name.clone(),
                shape: [e.value.nrows(), e.value.ncols()],
                offset: blob.len(),
                length: e.value.len(),
            });
            for v in e.value.iter() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Checkpoint {
            schema_version: CHECKPOINT_SCHEMA.to_string(),
            model: self.config.clone(),
            weights_file: WEIGHTS_FILE.to_string(),
            dtype: "f64le".to_string(),
            param_count: self.param_count(),
            tensors,
            metadata,
        };
        let wpath = dir.join(WEIGHTS_FILE);
        let mut f = fs::File::create(&wpath).map_err(|e| Error::io(&wpath, e))?;
        f.write_all(&blob).map_err(|e| Error::io(&wpath, e))?;
        let cpath = dir.join(CHECKPOINT_FILE);
        fs::write(&cpath, serde_json::to_string_pretty(&manifest)? + "\n").map_err(|e| Error::io(&cpath, e))?;
        Ok(())
    }

    /// Loads a checkpoint directory written by [`Model::save`].
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let cpath = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&cpath).map_err(|e| Error::io(&cpath, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::schema(
                cpath.display().to_string(),
                "schema_version",
                format!("expected {CHECKPOINT_SCHEMA}, found {}", ck.schema_version),
            ));
        }
        if ck.dtype != "f64le" {
            return Err(Error::schema(cpath.display().to_string(), "dtype", "only f64le is supported"));
        }
        let wpath = dir.join(&ck.weights_file);
        let blob = fs::read(&wpath).map_err(|e| Error::io(&wpath, e))?;
        let mut model = Model::new(ck.model, 0)?;
        if ck.tensors.len() != model.store.len() {
            return Err(Error::Shape(format!(
                "checkpoint has {} tensors, model expects {}",
                ck.tensors.len(),
                model.store.len()
            )));
        }
        for (i, t) in ck.tensors.iter().enumerate() {
            let id = model
                .store
                .find(&t.name)
                .ok_or_else(|| Error::Shape(format!("unexpected tensor `{}`", t.name)))?;
            let want = model.store.get(id).dim();
            if (t.shape[0], t.shape[1]) != want || t.length != want.0 * want.1 {
                return Err(Error::Shape(format!("tensors[{i}] `{}`: shape {:?}, expected {want:?}", t.name, t.shape)));
            }
            let end = t.offset + 8 * t.length;
            let bytes = blob
                .get(t.offset..end)
                .ok_or_else(|| Error::Shape(format!("tensors[{i}] `{}` runs past the weight file", t.name)))?;
            let values: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            *model.store.get_mut(id) = Array2::from_shape_vec(want, values).expect("length checked");
        }
        Ok((model, ck.metadata))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the weight file.
    pub offset: usize,
    /// Number of elements.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: String,
    pub model: ModelConfig,
    pub weights_file: String,
    pub dtype: String,
    pub param_count: usize,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: serde_json::Value,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_window, tests::dummy_track, ActionLabel};
    use crate::encoder::TemporalKind;
    use crate::heads::HierarchyDesign;
    use crate::topology::BodyPart;

    fn small() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.encoder.temporal_hidden = 8;
        c.encoder.temporal_layers = 1;
        c.heads.hidden = 8;
        c
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Model::new(small(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), serde_json::json!({"epoch": 4})).unwrap();
        let (loaded, meta) = Model::load(dir.path()).unwrap();
        assert_eq!(loaded.store, model.store);
        assert_eq!(meta["epoch"], 4);
        let t = dummy_track("a", "v", ActionLabel::Pet, 5);
        let w = make_window(&t, 5);
        assert_eq!(model.predict(&[&w], 8).unwrap(), loaded.predict(&[&w], 8).unwrap());
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let model = Model::new(small(), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        model.save(dir.path(), serde_json::Value::Null).unwrap();
        let wpath = dir.path().join(WEIGHTS_FILE);
        let blob = fs::read(&wpath).unwrap();
        fs::write(&wpath, &blob[..blob.len() - 8]).unwrap();
        assert!(Model::load(dir.path()).is_err());
    }

    #[test]
    fn parameter_counts_follow_config() {
        let chain = Model::new(ModelConfig::default(), 0).unwrap();
        let mut pc = ModelConfig::default();
        pc.heads.design = HierarchyDesign::Parallel;
        let par = Model::new(pc, 0).unwrap();
        assert_eq!(chain.param_count() - par.param_count(), 8 * 128);
        for kind in TemporalKind::ALL {
            let mut c = small();
            c.encoder.temporal_module = kind;
            assert!(Model::new(c, 0).unwrap().param_count() > 0);
        }
        let mut c = small();
        c.encoder.parts = vec![BodyPart::Face];
        assert!(Model::new(c, 0).unwrap().param_count() < Model::new(small(), 0).unwrap().param_count());
    }
}
