//! Spatiotemporal encoder: per-part graph convolutions, node self-attention,
//! flatten, and a temporal module reducing a window to one embedding.

use std::rc::Rc;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::data::{FrameRecord, ObservationWindow};
use crate::error::{Error, Result};
use crate::nn::{glorot, Fwd, Linear, ParamStore};
use crate::topology::{build_part_adjacency, normalize_point, BodyPart};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalKind {
    Bilstm,
    Transformer,
    Conv1d,
    GcnTemporal,
}

impl TemporalKind {
    pub const ALL: [TemporalKind; 4] = [
        TemporalKind::Bilstm,
        TemporalKind::Transformer,
        TemporalKind::Conv1d,
        TemporalKind::GcnTemporal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TemporalKind::Bilstm => "bilstm",
            TemporalKind::Transformer => "transformer",
            TemporalKind::Conv1d => "conv1d",
            TemporalKind::GcnTemporal => "gcn_temporal",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown temporal module `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub node_feature_in: usize,
    pub gcn_hidden: Vec<usize>,
    pub attention_heads: usize,
    pub attention_dim: usize,
    pub temporal_module: TemporalKind,
    pub temporal_hidden: usize,
    pub temporal_layers: usize,
    pub dropout: f64,
    /// Body parts fed to the model, in canonical order.
    pub parts: Vec<BodyPart>,
    /// Longest window the transformer's learned positions cover.
    pub max_window: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            node_feature_in: 3,
            gcn_hidden: vec![16, 16, 16],
            attention_heads: 4,
            attention_dim: 16,
            temporal_module: TemporalKind::Bilstm,
            temporal_hidden: 128,
            temporal_layers: 3,
            dropout: 0.1,
            parts: BodyPart::ALL.to_vec(),
            max_window: 90,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.node_feature_in != 3 {
            return bad("encoder.node_feature_in: node features are (u, v, c), must be 3");
        }
        if self.gcn_hidden.is_empty() || self.gcn_hidden.contains(&0) {
            return bad("encoder.gcn_hidden: need at least one positive width");
        }
        if self.gcn_hidden.last() != Some(&self.attention_dim) {
            return bad("encoder.gcn_hidden: final width must equal attention_dim");
        }
        if self.attention_heads == 0 || !self.attention_dim.is_multiple_of(self.attention_heads) {
            return bad("encoder.attention_dim: must be divisible by attention_heads");
        }
        if !(2 * self.temporal_hidden).is_multiple_of(self.attention_heads) {
            return bad("encoder.temporal_hidden: 2*temporal_hidden must be divisible by attention_heads");
        }
        if self.temporal_hidden == 0 || self.temporal_layers == 0 {
            return bad("encoder.temporal_hidden/temporal_layers: must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("encoder.dropout: must be in [0, 1)");
        }
        if self.parts.is_empty() {
            return bad("encoder.parts: need at least one body part");
        }
        if self.parts.windows(2).any(|w| w[0] >= w[1]) {
            return bad("encoder.parts: must be distinct and in body, face, hands order");
        }
        if self.max_window == 0 {
            return bad("encoder.max_window: must be positive");
        }
        Ok(())
    }

    /// Nodes per frame over the configured parts.
    pub fn node_count(&self) -> usize {
        self.parts.iter().map(|p| p.node_count()).sum()
    }

    /// Width of the flattened per-frame vector.
    pub fn frame_width(&self) -> usize {
        self.node_count() * self.attention_dim
    }

    pub fn output_width(&self) -> usize {
        2 * self.temporal_hidden
    }
}

/// `D^-1/2 (A + I) D^-1/2` with `D` the degree matrix of `A + I`.
pub fn normalized_adjacency(a: &Array2<f64>) -> Array2<f64> {
    let n = a.nrows();
    let mut ai = a.clone();
    for i in 0..n {
        ai[[i, i]] += 1.0;
    }
    let inv_sqrt: Vec<f64> = ai.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()).collect();
    Array2::from_shape_fn((n, n), |(i, j)| ai[[i, j]] * inv_sqrt[i] * inv_sqrt[j])
}

/// One graph convolution `relu(Â H W + b)` on plain arrays.
pub fn graph_conv_layer(h: &Array2<f64>, a: &Array2<f64>, w: &Array2<f64>, bias: Option<&Array2<f64>>) -> Result<Array2<f64>> {
    if a.nrows() != a.ncols() || h.nrows() != a.nrows() || h.ncols() != w.nrows() {
        return Err(Error::Shape(format!(
            "graph conv: H {:?}, A {:?}, W {:?}",
            h.dim(),
            a.dim(),
            w.dim()
        )));
    }
    let mut out = normalized_adjacency(a).dot(&h.dot(w));
    if let Some(b) = bias {
        out += b;
    }
    Ok(out.mapv(|v| v.max(0.0)))
}

/// Node features `(u, v, c)` of one frame: box-normalised coordinates and confidence.
pub fn node_features(frame: &FrameRecord) -> Array2<f64> {
    let mut out = Array2::zeros((frame.keypoints.len(), 3));
    for (i, k) in frame.keypoints.iter().enumerate() {
        let (u, v) = normalize_point(k.x, k.y, frame.bbox);
        out[[i, 0]] = u;
        out[[i, 1]] = v;
        out[[i, 2]] = k.c;
    }
    out
}

/// A batch of equal-length windows laid out for the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub batch: usize,
    pub steps: usize,
    /// Per configured part, rows `(b * steps + t) * nodes + node`, columns `(u, v, c)`.
    pub parts: Vec<Array2<f64>>,
    /// Row `b * steps + t` is a real (unpadded) frame.
    pub valid: Vec<bool>,
}

impl EncoderInput {
    pub fn from_windows(windows: &[&ObservationWindow], parts: &[BodyPart]) -> Result<Self> {
        let Some(first) = windows.first() else {
            return Err(Error::InvalidInput("empty batch".into()));
        };
        let steps = first.len();
        if steps == 0 {
            return Err(Error::InvalidInput("window has no frames".into()));
        }
        if let Some(w) = windows.iter().find(|w| w.len() != steps) {
            return Err(Error::Shape(format!("window {} has {} frames, batch uses {steps}", w.track_id, w.len())));
        }
        let batch = windows.len();
        let mut arrays: Vec<Array2<f64>> = parts
            .iter()
            .map(|p| Array2::zeros((batch * steps * p.node_count(), 3)))
            .collect();
        let mut valid = Vec::with_capacity(batch * steps);
        for (b, w) in windows.iter().enumerate() {
            for (t, frame) in w.frames.iter().enumerate() {
                let feats = node_features(frame);
                if feats.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!("node features of {} frame {t}", w.track_id)));
                }
                for (arr, part) in arrays.iter_mut().zip(parts) {
                    let n = part.node_count();
                    let base = (b * steps + t) * n;
                    for (i, g) in part.range().enumerate() {
                        arr.row_mut(base + i).assign(&feats.row(g));
                    }
                }
                valid.push(!w.pad_mask[t]);
            }
        }
        Ok(EncoderInput {
            batch,
            steps,
            parts: arrays,
            valid,
        })
    }

    /// Index of the last real frame of window `b`.
    pub fn last_valid(&self, b: usize) -> usize {
        let row = &self.valid[b * self.steps..(b + 1) * self.steps];
        row.iter().rposition(|&v| v).unwrap_or(0)
    }

}

#[derive(Debug, Clone)]
struct PartStack {
    adj: Rc<Array2<f64>>,
    nodes: usize,
    layers: Vec<Linear>,
}

#[derive(Debug, Clone, Copy)]
struct LstmDir {
    w_ih: usize,
    w_hh: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct LayerNormParams {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone)]
struct TransformerBlock {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: LayerNormParams,
    ff1: Linear,
    ff2: Linear,
    ln2: LayerNormParams,
}

#[derive(Debug, Clone)]
enum Temporal {
    Bilstm(Vec<[LstmDir; 2]>),
    Transformer {
        proj: Linear,
        pos: usize,
        blocks: Vec<TransformerBlock>,
    },
    Conv1d {
        proj: Linear,
        layers: Vec<Linear>,
    },
    GcnTemporal {
        proj: Linear,
        layers: Vec<Linear>,
    },
}

/// Vars produced by one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    /// Concatenated part embeddings before attention, `(B*T*N, attention_dim)`.
    pub spatial: Var,
    /// Flattened per-frame vectors after attention, `(B*T, N*attention_dim)`.
    pub fused: Var,
    pub temporal: TemporalOutput,
}

#[derive(Debug, Clone, Copy)]
pub struct TemporalOutput {
    /// Per-step features before the readout; row order is time-major
    /// (`t * B + b`) for the recurrent module and batch-major otherwise.
    pub per_step: Var,
    /// One row per window, `2 * temporal_hidden` wide.
    pub embedding: Var,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    parts: Vec<PartStack>,
    attn: [Linear; 4],
    temporal: Temporal,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let parts = config
            .parts
            .iter()
            .map(|&part| {
                let mut width = config.node_feature_in;
                let layers = config
                    .gcn_hidden
                    .iter()
                    .enumerate()
                    .map(|(l, &out)| {
                        let lin = Linear::new(store, rng, &format!("encoder.gcn.{}.{l}", part.name()), width, out);
                        width = out;
                        lin
                    })
                    .collect();
                PartStack {
                    adj: Rc::new(normalized_adjacency(&build_part_adjacency(part).matrix)),
                    nodes: part.node_count(),
                    layers,
                }
            })
            .collect();
        let d = config.attention_dim;
        let attn = ["q", "k", "v", "o"].map(|n| Linear::new(store, rng, &format!("encoder.attn.{n}"), d, d));

        let h = config.temporal_hidden;
        let d_model = 2 * h;
        let frame = config.frame_width();
        let temporal = match config.temporal_module {
            TemporalKind::Bilstm => {
                let mut layers = Vec::with_capacity(config.temporal_layers);
                for l in 0..config.temporal_layers {
                    let input = if l == 0 { frame } else { 2 * h };
                    let dirs = ["fwd", "bwd"].map(|dir| {
                        let name = format!("encoder.lstm.{l}.{dir}");
                        let w_ih = store.add(format!("{name}.w_ih"), glorot(rng, input, 4 * h));
                        let w_hh = store.add(format!("{name}.w_hh"), glorot(rng, h, 4 * h));
                        // forget gate starts open
                        let mut bias = Array2::zeros((1, 4 * h));
                        bias.slice_mut(ndarray::s![.., h..2 * h]).fill(1.0);
                        let b = store.add(format!("{name}.bias"), bias);
                        LstmDir { w_ih, w_hh, b }
                    });
                    layers.push(dirs);
                }
                Temporal::Bilstm(layers)
            }
            TemporalKind::Transformer => {
                let proj = Linear::new(store, rng, "encoder.transformer.proj", frame, d_model);
                let pos = store.add(
                    "encoder.transformer.pos",
                    glorot(rng, config.max_window, d_model).mapv(|v| 0.1 * v),
                );
                let blocks = (0..config.temporal_layers)
                    .map(|l| {
                        let name = format!("encoder.transformer.{l}");
                        let mut ln = |tag: &str| LayerNormParams {
                            gamma: store.add(format!("{name}.{tag}.gamma"), Array2::ones((1, d_model))),
                            beta: store.add(format!("{name}.{tag}.beta"), Array2::zeros((1, d_model))),
                        };
                        let ln1 = ln("ln1");
                        let ln2 = ln("ln2");
                        let [q, k, v, o] =
                            ["q", "k", "v", "o"].map(|n| Linear::new(store, rng, &format!("{name}.{n}"), d_model, d_model));
                        TransformerBlock {
                            q,
                            k,
                            v,
                            o,
                            ln1,
                            ff1: Linear::new(store, rng, &format!("{name}.ff1"), d_model, 2 * d_model),
                            ff2: Linear::new(store, rng, &format!("{name}.ff2"), 2 * d_model, d_model),
                            ln2,
                        }
                    })
                    .collect();
                Temporal::Transformer { proj, pos, blocks }
            }
            TemporalKind::Conv1d => Temporal::Conv1d {
                proj: Linear::new(store, rng, "encoder.conv1d.proj", frame, d_model),
                layers: (0..config.temporal_layers)
                    .map(|l| Linear::new(store, rng, &format!("encoder.conv1d.{l}"), 3 * d_model, d_model))
                    .collect(),
            },
            TemporalKind::GcnTemporal => Temporal::GcnTemporal {
                proj: Linear::new(store, rng, "encoder.gcn_temporal.proj", frame, d_model),
                layers: (0..config.temporal_layers)
                    .map(|l| Linear::new(store, rng, &format!("encoder.gcn_temporal.{l}"), d_model, d_model))
                    .collect(),
            },
        };
        Ok(Encoder {
            config,
            parts,
            attn,
            temporal,
        })
    }

    /// Parameter ids of the first graph-conv layer of every part.
    pub fn first_gcn_layers(&self) -> Vec<Linear> {
        self.parts.iter().map(|p| p.layers[0]).collect()
    }

    pub fn forward(&self, f: &mut Fwd, input: &EncoderInput) -> Result<EncoderOutput> {
        let (spatial, fused) = self.spatial(f, input)?;
        let temporal = self.temporal_forward(f, fused, &input.valid, input.batch, input.steps)?;
        Ok(EncoderOutput {
            spatial,
            fused,
            temporal,
        })
    }

    /// Per-part graph convolutions, node concatenation, self-attention and flatten.
    pub fn spatial(&self, f: &mut Fwd, input: &EncoderInput) -> Result<(Var, Var)> {
        if input.parts.len() != self.parts.len() {
            return Err(Error::Shape(format!(
                "input has {} parts, encoder expects {}",
                input.parts.len(),
                self.parts.len()
            )));
        }
        let frames = input.batch * input.steps;
        let d = self.config.attention_dim;
        let mut flat_parts = Vec::with_capacity(self.parts.len());
        for (stack, x) in self.parts.iter().zip(&input.parts) {
            if x.nrows() != frames * stack.nodes || x.ncols() != self.config.node_feature_in {
                return Err(Error::Shape(format!("part input {:?}", x.dim())));
            }
            let mut h = f.g.input(x.clone());
            for layer in &stack.layers {
                let w = f.param(layer.w);
                let b = f.param(layer.b);
                let hw = f.g.matmul(h, w);
                let agg = f.g.block_left_mul(stack.adj.clone(), hw);
                let pre = f.g.add_row(agg, b);
                h = f.g.relu(pre);
            }
            flat_parts.push(f.g.reshape(h, frames, stack.nodes * d));
        }
        let cat = if flat_parts.len() == 1 {
            flat_parts[0]
        } else {
            f.g.concat_cols(&flat_parts)
        };
        let n = self.config.node_count();
        let spatial = f.g.reshape(cat, frames * n, d);

        let [lq, lk, lv, lo] = &self.attn;
        let q = f.linear(lq, spatial);
        let k = f.linear(lk, spatial);
        let v = f.linear(lv, spatial);
        let a = f.g.block_attention(q, k, v, n, self.config.attention_heads, None);
        let o = f.linear(lo, a);
        let z = f.g.add(spatial, o);
        let fused = f.g.reshape(z, frames, n * d);
        Ok((spatial, fused))
    }

    /// Maps a batch-major `(B*T, width)` sequence to one embedding per window.
    pub fn temporal_forward(&self, f: &mut Fwd, seq: Var, valid: &[bool], batch: usize, steps: usize) -> Result<TemporalOutput> {
        if steps == 0 {
            return Err(Error::InvalidInput("temporal module needs at least one step".into()));
        }
        if valid.len() != batch * steps || f.g.value(seq).nrows() != batch * steps {
            return Err(Error::Shape(format!(
                "sequence has {} rows, mask {}, expected {}",
                f.g.value(seq).nrows(),
                valid.len(),
                batch * steps
            )));
        }
        let last_valid: Vec<usize> = (0..batch)
            .map(|b| valid[b * steps..(b + 1) * steps].iter().rposition(|&v| v).unwrap_or(0))
            .collect();
        let p = self.config.dropout;
        match &self.temporal {
            Temporal::Bilstm(layers) => {
                let to_time_major: Vec<Option<usize>> =
                    (0..steps * batch).map(|r| Some((r % batch) * steps + r / batch)).collect();
                let valid_tm: Rc<Vec<bool>> = Rc::new((0..steps * batch).map(|r| valid[(r % batch) * steps + r / batch]).collect());
                let mut x = f.g.gather_rows(seq, Rc::new(to_time_major));
                for (l, dirs) in layers.iter().enumerate() {
                    if l > 0 {
                        x = f.dropout(x, p);
                    }
                    let mut outs = Vec::with_capacity(2);
                    for (dir, reverse) in dirs.iter().zip([false, true]) {
                        let w_ih = f.param(dir.w_ih);
                        let w_hh = f.param(dir.w_hh);
                        let b = f.param(dir.b);
                        let gx = f.g.matmul(x, w_ih);
                        let gx = f.g.add_row(gx, b);
                        outs.push(f.g.lstm_scan(gx, w_hh, valid_tm.clone(), batch, reverse));
                    }
                    x = f.g.concat_cols(&outs);
                }
                let readout: Vec<Option<usize>> = (0..batch).map(|b| Some(last_valid[b] * batch + b)).collect();
                let embedding = f.g.gather_rows(x, Rc::new(readout));
                Ok(TemporalOutput { per_step: x, embedding })
            }
            Temporal::Transformer { proj, pos, blocks } => {
                if steps > self.config.max_window {
                    return Err(Error::InvalidInput(format!(
                        "window of {steps} frames exceeds max_window {}",
                        self.config.max_window
                    )));
                }
                let mut x = f.linear(proj, seq);
                let pos = f.param(*pos);
                let pos_rows = f.g.gather_rows(pos, Rc::new((0..batch * steps).map(|r| Some(r % steps)).collect()));
                x = f.g.add(x, pos_rows);
                let mask = Rc::new(valid.to_vec());
                for blk in blocks {
                    let q = f.linear(&blk.q, x);
                    let k = f.linear(&blk.k, x);
                    let v = f.linear(&blk.v, x);
                    let a = f.g.block_attention(q, k, v, steps, self.config.attention_heads, Some(mask.clone()));
                    let o = f.linear(&blk.o, a);
                    let o = f.dropout(o, p);
                    let r = f.g.add(x, o);
                    x = layer_norm(f, r, blk.ln1);
                    let h = f.linear(&blk.ff1, x);
                    let h = f.g.relu(h);
                    let h = f.dropout(h, p);
                    let h = f.linear(&blk.ff2, h);
                    let r = f.g.add(x, h);
                    x = layer_norm(f, r, blk.ln2);
                }
                let embedding = masked_mean(f, x, valid, batch, steps);
                Ok(TemporalOutput { per_step: x, embedding })
            }
            Temporal::Conv1d { proj, layers } => {
                let x0 = f.linear(proj, seq);
                let mut x = f.g.relu(x0);
                let (prev, next) = neighbours(valid, batch, steps);
                for layer in layers {
                    let xp = f.g.gather_rows(x, prev.clone());
                    let xn = f.g.gather_rows(x, next.clone());
                    let cat = f.g.concat_cols(&[xp, x, xn]);
                    let y = f.linear(layer, cat);
                    x = f.g.relu(y);
                }
                let embedding = masked_mean(f, x, valid, batch, steps);
                Ok(TemporalOutput { per_step: x, embedding })
            }
            Temporal::GcnTemporal { proj, layers } => {
                let x0 = f.linear(proj, seq);
                let mut x = f.g.relu(x0);
                let (prev, next) = neighbours(valid, batch, steps);
                let width = 2 * self.config.temporal_hidden;
                let (c_self, c_prev, c_next) = path_coefficients(valid, &prev, &next, width);
                for layer in layers {
                    let xs = f.g.mul_const(x, c_self.clone());
                    let xp = f.g.gather_rows(x, prev.clone());
                    let xp = f.g.mul_const(xp, c_prev.clone());
                    let xn = f.g.gather_rows(x, next.clone());
                    let xn = f.g.mul_const(xn, c_next.clone());
                    let agg = f.g.add(xs, xp);
                    let agg = f.g.add(agg, xn);
                    let y = f.linear(layer, agg);
                    x = f.g.relu(y);
                }
                let embedding = masked_mean(f, x, valid, batch, steps);
                Ok(TemporalOutput { per_step: x, embedding })
            }
        }
    }
}

fn layer_norm(f: &mut Fwd, x: Var, p: LayerNormParams) -> Var {
    let gamma = f.param(p.gamma);
    let beta = f.param(p.beta);
    f.g.layer_norm(x, gamma, beta)
}

/// Average over each window's real frames of a batch-major sequence.
fn masked_mean(f: &mut Fwd, x: Var, valid: &[bool], batch: usize, steps: usize) -> Var {
    let mut pool = Array2::zeros((batch, batch * steps));
    for b in 0..batch {
        let n = valid[b * steps..(b + 1) * steps].iter().filter(|&&v| v).count().max(1) as f64;
        for t in 0..steps {
            if valid[b * steps + t] {
                pool[[b, b * steps + t]] = 1.0 / n;
            }
        }
    }
    let pool = f.g.input(pool);
    f.g.matmul(pool, x)
}

type RowMap = Rc<Vec<Option<usize>>>;

/// Previous / next real frame within the same window, batch-major rows.
fn neighbours(valid: &[bool], batch: usize, steps: usize) -> (RowMap, RowMap) {
    let at = |b: usize, t: usize| {
        let r = b * steps + t;
        valid[r].then_some(r)
    };
    let mut prev = Vec::with_capacity(batch * steps);
    let mut next = Vec::with_capacity(batch * steps);
    for b in 0..batch {
        for t in 0..steps {
            let own = valid[b * steps + t];
            prev.push(if own && t > 0 { at(b, t - 1) } else { None });
            next.push(if own && t + 1 < steps { at(b, t + 1) } else { None });
        }
    }
    (Rc::new(prev), Rc::new(next))
}

/// Symmetric-normalised path-graph weights broadcast to `width` columns.
fn path_coefficients(
    valid: &[bool],
    prev: &[Option<usize>],
    next: &[Option<usize>],
    width: usize,
) -> (Rc<Array2<f64>>, Rc<Array2<f64>>, Rc<Array2<f64>>) {
    let rows = valid.len();
    let deg: Vec<f64> = (0..rows)
        .map(|r| 1.0 + prev[r].is_some() as u8 as f64 + next[r].is_some() as u8 as f64)
        .collect();
    let mut cs = Array2::zeros((rows, width));
    let mut cp = Array2::zeros((rows, width));
    let mut cn = Array2::zeros((rows, width));
    for r in 0..rows {
        if !valid[r] {
            continue;
        }
        cs.row_mut(r).fill(1.0 / deg[r]);
        if let Some(p) = prev[r] {
            cp.row_mut(r).fill(1.0 / (deg[r] * deg[p]).sqrt());
        }
        if let Some(n) = next[r] {
            cn.row_mut(r).fill(1.0 / (deg[r] * deg[n]).sqrt());
        }
    }
    (Rc::new(cs), Rc::new(cp), Rc::new(cn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_window;
    use crate::data::tests::dummy_track;
    use crate::data::ActionLabel;
    use crate::topology::{whole_body_mirror, BBox, NUM_KEYPOINTS};
    use ndarray::{array, s};
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_simple_fn((r, c), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn two_node_path_by_hand() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let h = array![[1.0, 2.0], [3.0, -4.0]];
        let w = Array2::eye(2);
        // degrees of A+I are 2 and 2, so every entry of Â is 1/2
        let expect = array![[2.0, 0.0], [2.0, 0.0]];
        let out = graph_conv_layer(&h, &a, &w, None).unwrap();
        assert!((&out - &expect).iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn isolated_nodes_only_see_themselves() {
        let mut r = rng(1);
        let a = Array2::zeros((4, 4));
        let w = random(&mut r, 3, 5);
        let h = random(&mut r, 4, 3);
        let mut h2 = h.clone();
        h2.row_mut(2).fill(7.0);
        let o1 = graph_conv_layer(&h, &a, &w, None).unwrap();
        let o2 = graph_conv_layer(&h2, &a, &w, None).unwrap();
        for i in [0, 1, 3] {
            assert_eq!(o1.row(i), o2.row(i));
        }
        assert!(graph_conv_layer(&h, &a, &random(&mut r, 2, 5), None).is_err());
    }

    #[test]
    fn graph_conv_permutation_equivariance() {
        let mut r = rng(2);
        for part in BodyPart::ALL {
            let adj = build_part_adjacency(part).matrix;
            let n = adj.nrows();
            let mut perm: Vec<usize> = (0..n).collect();
            for i in (1..n).rev() {
                perm.swap(i, r.gen_range(0..=i));
            }
            let p = Array2::from_shape_fn((n, n), |(i, j)| (perm[i] == j) as u8 as f64);
            let h = random(&mut r, n, 3);
            let w = random(&mut r, 3, 16);
            let lhs = graph_conv_layer(&p.dot(&h), &p.dot(&adj).dot(&p.t()), &w, None).unwrap();
            let rhs = p.dot(&graph_conv_layer(&h, &adj, &w, None).unwrap());
            assert!((&lhs - &rhs).iter().all(|v| v.abs() < 1e-6));
        }
    }

    fn frame_input(frames: &[FrameRecord]) -> EncoderInput {
        let track = crate::data::Track {
            frames: frames.to_vec(),
            ..dummy_track("x", "v", ActionLabel::Wave, 1)
        };
        let w = make_window(&track, frames.len());
        EncoderInput::from_windows(&[&w], &BodyPart::ALL).unwrap()
    }

    #[test]
    fn frame_shapes() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(EncoderConfig::default(), &mut store, &mut rng(3)).unwrap();
        let t = dummy_track("a", "v", ActionLabel::Hug, 2);
        let input = frame_input(&t.frames[..1]);
        let mut f = Fwd::eval(&store);
        let (spatial, fused) = enc.spatial(&mut f, &input).unwrap();
        assert_eq!(f.g.value(spatial).dim(), (133, 16));
        assert_eq!(f.g.value(fused).dim(), (1, 2128));
    }

    #[test]
    fn mirrored_frame_gives_permuted_embedding_with_tied_weights() {
        let mut store = ParamStore::new();
        let enc = Encoder::new(EncoderConfig::default(), &mut store, &mut rng(4)).unwrap();
        // tie: ignore the horizontal coordinate so the stack is mirror-symmetric
        for l in enc.first_gcn_layers() {
            store.get_mut(l.w).row_mut(0).fill(0.0);
        }
        let mut r = rng(5);
        let mut t = dummy_track("a", "v", ActionLabel::Hug, 1);
        t.frames[0].bbox = BBox::new(40.0, 20.0, 120.0, 200.0);
        for k in &mut t.frames[0].keypoints {
            k.x = r.gen_range(40.0..160.0);
            k.y = r.gen_range(20.0..220.0);
            k.c = r.gen_range(0.0..1.0);
        }
        let flipped = crate::augment::apply_flip(&t, [320.0, 240.0]);
        let mut f = Fwd::eval(&store);
        let (_, a) = enc.spatial(&mut f, &frame_input(&t.frames)).unwrap();
        let (_, b) = enc.spatial(&mut f, &frame_input(&flipped.frames)).unwrap();
        let a = f.g.value(a).clone().into_shape_with_order((NUM_KEYPOINTS, 16)).unwrap();
        let b = f.g.value(b).clone().into_shape_with_order((NUM_KEYPOINTS, 16)).unwrap();
        let perm = whole_body_mirror();
        for i in 0..NUM_KEYPOINTS {
            let d = (&b.row(i) - &a.row(perm[i])).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(d < 1e-9, "node {i}: {d}");
        }
    }

    fn seq_embed(kind: TemporalKind, seq: &Array2<f64>, valid: &[bool], batch: usize, steps: usize) -> (Array2<f64>, Array2<f64>) {
        seq_embed_layers(kind, 3, seq, valid, batch, steps)
    }

    fn seq_embed_layers(
        kind: TemporalKind,
        layers: usize,
        seq: &Array2<f64>,
        valid: &[bool],
        batch: usize,
        steps: usize,
    ) -> (Array2<f64>, Array2<f64>) {
        let cfg = EncoderConfig {
            temporal_module: kind,
            temporal_hidden: 8,
            temporal_layers: layers,
            parts: vec![BodyPart::Body],
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut rng(6)).unwrap();
        let mut f = Fwd::eval(&store);
        let x = f.g.input(seq.clone());
        let out = enc.temporal_forward(&mut f, x, valid, batch, steps).unwrap();
        (f.g.value(out.per_step).clone(), f.g.value(out.embedding).clone())
    }

    #[test]
    fn temporal_kinds_share_output_width() {
        let mut r = rng(7);
        let seq = random(&mut r, 2 * 5, 23 * 16);
        let valid = vec![true; 10];
        for kind in TemporalKind::ALL {
            let (_, e) = seq_embed(kind, &seq, &valid, 2, 5);
            assert_eq!(e.dim(), (2, 16), "{kind:?}");
            assert!(e.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn single_step_bilstm_readout_is_the_step_output() {
        let mut r = rng(8);
        let seq = random(&mut r, 1, 23 * 16);
        let (per_step, e) = seq_embed(TemporalKind::Bilstm, &seq, &[true], 1, 1);
        assert_eq!(per_step, e);
    }

    #[test]
    fn padding_does_not_change_bilstm_embedding() {
        let mut r = rng(9);
        let seq = random(&mut r, 4, 23 * 16);
        let (_, short) = seq_embed(TemporalKind::Bilstm, &seq, &[true; 4], 1, 4);
        let mut padded = Array2::zeros((6, 23 * 16));
        padded.slice_mut(s![..4, ..]).assign(&seq);
        padded.slice_mut(s![4.., ..]).fill(3.0);
        let (_, long) = seq_embed(TemporalKind::Bilstm, &padded, &[true, true, true, true, false, false], 1, 6);
        assert!((&short - &long).iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn constant_input_forward_state_settles() {
        let mut r = rng(10);
        let row = random(&mut r, 1, 23 * 16).mapv(|v| 0.05 * v);
        let steps = 40;
        let seq = Array2::from_shape_fn((steps, 23 * 16), |(_, j)| row[[0, j]]);
        let (per_step, _) = seq_embed_layers(TemporalKind::Bilstm, 1, &seq, &vec![true; steps], 1, steps);
        let fwd = per_step.slice(s![.., ..8]).to_owned();
        let diffs: Vec<f64> = (1..steps)
            .map(|t| (&fwd.row(t) - &fwd.row(t - 1)).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        // after the transient the step-to-step change shrinks monotonically
        for w in diffs[5..].windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "{diffs:?}");
        }
        assert!(diffs[steps - 2] < 1e-3 * diffs[0].max(1e-12) || diffs[steps - 2] < 1e-9);
    }

    #[test]
    fn single_frame_transformer_is_its_token_path() {
        let cfg = EncoderConfig {
            temporal_module: TemporalKind::Transformer,
            temporal_hidden: 8,
            parts: vec![BodyPart::Body],
            ..Default::default()
        };
        let mut store = ParamStore::new();
        let enc = Encoder::new(cfg, &mut store, &mut rng(11)).unwrap();
        let mut r = rng(12);
        let seq = random(&mut r, 1, 23 * 16);
        let mut f = Fwd::eval(&store);
        let x = f.g.input(seq.clone());
        let out = enc.temporal_forward(&mut f, x, &[true], 1, 1).unwrap();
        let got = f.g.value(out.embedding).clone();

        // attention over a single token returns its value projection
        let Temporal::Transformer { proj, pos, blocks } = &enc.temporal else { unreachable!() };
        let lin = |l: &Linear, x: &Array2<f64>| x.dot(store.get(l.w)) + store.get(l.b);
        let ln = |x: &Array2<f64>, p: LayerNormParams| {
            let n = x.ncols() as f64;
            let m = x.sum() / n;
            let var = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
            x.mapv(|v| (v - m) / (var + 1e-5).sqrt()) * store.get(p.gamma) + store.get(p.beta)
        };
        let mut h = lin(proj, &seq) + &store.get(*pos).slice(s![0..1, ..]);
        for b in blocks {
            let a = lin(&b.o, &lin(&b.v, &h));
            h = ln(&(&h + &a), b.ln1);
            let ff = lin(&b.ff2, &lin(&b.ff1, &h).mapv(|v| v.max(0.0)));
            h = ln(&(&h + &ff), b.ln2);
        }
        assert!((&got - &h).iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn conv1d_is_shift_covariant_before_pooling() {
        let steps = 20;
        let width = 23 * 16;
        let mut r = rng(13);
        let pulse = random(&mut r, 1, width);
        let at = |t0: usize| {
            let mut s = Array2::zeros((steps, width));
            s.row_mut(t0).assign(&pulse.row(0));
            s
        };
        let valid = vec![true; steps];
        let (a, _) = seq_embed(TemporalKind::Conv1d, &at(5), &valid, 1, steps);
        let (b, _) = seq_embed(TemporalKind::Conv1d, &at(8), &valid, 1, steps);
        // receptive-field radius 3 keeps rows 3..=13 clear of the edges
        for t in 3..=13 {
            assert_eq!(a.row(t), b.row(t + 3), "row {t}");
        }
        assert_ne!(a.row(5), a.row(15));
    }

    #[test]
    fn config_checks() {
        let mut c = EncoderConfig::default();
        assert_eq!(c.frame_width(), 2128);
        assert_eq!(c.output_width(), 256);
        c.attention_heads = 3;
        assert!(c.validate().is_err());
        let c = EncoderConfig {
            parts: vec![BodyPart::Face, BodyPart::Body],
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(TemporalKind::parse("gru").is_err());
    }
}
