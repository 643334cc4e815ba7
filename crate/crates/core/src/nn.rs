//! Parameter storage and the layer building blocks shared by encoder and heads.

use std::rc::Rc;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub value: Array2<f64>,
}

/// Flat, ordered list of named trainable arrays.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> &Array2<f64> {
        &self.entries[id].value
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Array2<f64> {
        &mut self.entries[id].value
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    /// Ids whose names start with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<usize> {
        (0..self.entries.len()).filter(|&i| self.entries[i].name.starts_with(prefix)).collect()
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }
}

/// Glorot-uniform initialisation.
pub fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-a..a))
}

/// Affine map `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), glorot(rng, fan_in, fan_out));
        let b = store.add(format!("{name}.bias"), Array2::zeros((1, fan_out)));
        Linear { w, b, fan_in, fan_out }
    }
}

/// One forward pass: the tape, the parameters it reads, and the dropout source.
pub struct Fwd<'a> {
    pub g: Graph,
    pub store: &'a ParamStore,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Fwd<'a> {
    /// Evaluation mode: dropout disabled.
    pub fn eval(store: &'a ParamStore) -> Self {
        Fwd {
            g: Graph::new(),
            store,
            rng: None,
        }
    }

    /// Training mode with a dedicated dropout stream.
    pub fn train(store: &'a ParamStore, rng: ChaCha8Rng) -> Self {
        Fwd {
            g: Graph::new(),
            store,
            rng: Some(rng),
        }
    }

    pub fn training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&mut self, id: usize) -> Var {
        self.g.param(id, self.store.get(id))
    }

    pub fn linear(&mut self, l: &Linear, x: Var) -> Var {
        let w = self.param(l.w);
        let b = self.param(l.b);
        let y = self.g.matmul(x, w);
        self.g.add_row(y, b)
    }

    /// Inverted dropout; identity in evaluation mode.
    pub fn dropout(&mut self, x: Var, p: f64) -> Var {
        let Some(rng) = self.rng.as_mut() else { return x };
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - p);
        let dim = self.g.value(x).dim();
        let mask = Array2::from_shape_simple_fn(dim, || if rng.gen::<f64>() < p { 0.0 } else { keep });
        self.g.mul_const(x, Rc::new(mask))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn affine_10_to_5_has_55_params() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Linear::new(&mut store, &mut rng, "fc", 10, 5);
        assert_eq!(store.count(), 55);
    }

    #[test]
    fn dropout_only_in_training() {
        let store = ParamStore::new();
        let mut f = Fwd::eval(&store);
        let x = f.g.input(Array2::ones((4, 4)));
        assert_eq!(f.dropout(x, 0.5), x);
        let mut f = Fwd::train(&store, ChaCha8Rng::seed_from_u64(1));
        let x = f.g.input(Array2::ones((50, 50)));
        let y = f.dropout(x, 0.5);
        let v = f.g.value(y);
        assert!(v.iter().all(|&e| e == 0.0 || e == 2.0));
        assert!(v.iter().any(|&e| e == 0.0));
    }
}
