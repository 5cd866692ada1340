//! Fully connected d-vector network over stacked context windows.
//!
//! An utterance is cut into `context_frames`-long windows, each flattened
//! into one input row. Hidden layers use ReLU, the last layer is linear,
//! window outputs are averaged and the mean is L2-normalized once.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureSequence, N_MELS};
use crate::error::{invalid, Error, Result};
use crate::ge2e::EmbeddingBatch;
use crate::{par, rng};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub input_dim: usize,
    pub context_frames: usize,
    pub window_hop: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            input_dim: N_MELS,
            context_frames: 32,
            window_hop: 16,
            hidden_dims: vec![1280, 1280, 1280],
            embed_dim: 256,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.context_frames == 0 || self.window_hop == 0 || self.embed_dim == 0 {
            return Err(invalid("network dimensions must be >= 1"));
        }
        if self.hidden_dims.contains(&0) {
            return Err(invalid("hidden layer widths must be >= 1"));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.context_frames * self.input_dim
    }

    /// Layer widths from input to embedding.
    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.input_width()];
        w.extend(&self.hidden_dims);
        w.push(self.embed_dim);
        w
    }

    /// Window start frames for an utterance of `t` frames.
    pub fn window_starts(&self, t: usize) -> Vec<usize> {
        let w = self.context_frames;
        if t < w {
            return Vec::new();
        }
        let mut starts: Vec<usize> = (0..=t - w).step_by(self.window_hop).collect();
        if starts.last().is_none_or(|&s| s + w < t) {
            starts.push(t - w);
        }
        starts
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(out: usize, inp: usize) -> Self {
        Self { weight: Array2::zeros((out, inp)), bias: Array1::zeros(out) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InitMeta {
    pub seed: u64,
    pub scheme: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    pub config: NetConfig,
    pub layers: Vec<Layer>,
    pub init: InitMeta,
}

/// Gradients with the same layout as [`Weights::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct WeightGrads {
    pub layers: Vec<Layer>,
}

impl WeightGrads {
    pub fn zeros(config: &NetConfig) -> Self {
        let w = config.widths();
        Self { layers: w.windows(2).map(|p| Layer::zeros(p[1], p[0])).collect() }
    }

    pub fn add_assign(&mut self, other: &WeightGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.weight *= s;
            l.bias *= s;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| l.weight.iter().chain(l.bias.iter()).map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }
}

/// Unit-norm speaker embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(pub Array1<f64>);

impl Embedding {
    pub fn view(&self) -> ArrayView1<'_, f64> {
        self.0.view()
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

pub const INIT_SCHEME: &str = "xavier-uniform/zero-bias";

/// Fan-based uniform init: entries `~ U(-a, a)`, `a = sqrt(6 / (fan_in + fan_out))`,
/// biases zero. Values are rounded to f32 so checkpoints round-trip exactly.
pub fn init_weights(config: &NetConfig, seed: u64) -> Result<Weights> {
    config.validate()?;
    let widths = config.widths();
    let layers = widths
        .windows(2)
        .enumerate()
        .map(|(idx, pair)| {
            let (inp, out) = (pair[0], pair[1]);
            let a = (6.0 / (inp + out) as f64).sqrt();
            let mut r = rng::stream(seed, "init", &[idx as u64]);
            let weight = Array2::from_shape_simple_fn((out, inp), || r.random_range(-a..a) as f32 as f64);
            Layer { weight, bias: Array1::zeros(out) }
        })
        .collect();
    Ok(Weights { config: config.clone(), layers, init: InitMeta { seed, scheme: INIT_SCHEME.into() } })
}

/// Activations kept from a forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct Forward {
    /// Input rows then each hidden layer's post-ReLU output.
    acts: Vec<Array2<f64>>,
    norm: f64,
    pub embedding: Embedding,
}

impl Forward {
    pub fn num_windows(&self) -> usize {
        self.acts[0].nrows()
    }
}

impl Weights {
    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Round every parameter to the nearest f32.
    pub fn round_to_f32(&mut self) {
        for l in &mut self.layers {
            l.weight.mapv_inplace(|v| v as f32 as f64);
            l.bias.mapv_inplace(|v| v as f32 as f64);
        }
    }

    /// `self -= lr * grads`.
    pub fn apply_update(&mut self, grads: &WeightGrads, lr: f64) {
        for (l, g) in self.layers.iter_mut().zip(&grads.layers) {
            l.weight.scaled_add(-lr, &g.weight);
            l.bias.scaled_add(-lr, &g.bias);
        }
    }

    fn check_shapes(&self) -> Result<()> {
        let widths = self.config.widths();
        if self.layers.len() != widths.len() - 1 {
            return Err(Error::Shape(format!("{} layers for {} widths", self.layers.len(), widths.len())));
        }
        for (l, pair) in self.layers.iter().zip(widths.windows(2)) {
            if l.weight.dim() != (pair[1], pair[0]) || l.bias.len() != pair[1] {
                return Err(Error::Shape(format!(
                    "layer {:?} does not match {}->{}",
                    l.weight.dim(),
                    pair[0],
                    pair[1]
                )));
            }
        }
        Ok(())
    }

    fn window_matrix(&self, features: &FeatureSequence) -> Result<Array2<f64>> {
        let cfg = &self.config;
        let (t, d) = features.frames.dim();
        if d != cfg.input_dim {
            return Err(Error::Shape(format!("features have {d} coefficients, network expects {}", cfg.input_dim)));
        }
        if t < cfg.context_frames {
            return Err(invalid(format!(
                "utterance {:?} has {t} frames, context window needs {}",
                features.utterance_id, cfg.context_frames
            )));
        }
        let starts = cfg.window_starts(t);
        let width = cfg.input_width();
        let frames = features.frames.as_standard_layout();
        let flat = frames.as_slice().expect("standard layout");
        let mut x = Array2::zeros((starts.len(), width));
        for (mut row, &s) in x.rows_mut().into_iter().zip(&starts) {
            row.as_slice_mut()
                .expect("row-major")
                .copy_from_slice(&flat[s * d..s * d + width]);
        }
        Ok(x)
    }

    pub fn forward(&self, features: &FeatureSequence) -> Result<Forward> {
        let x = self.window_matrix(features)?;
        let n_layers = self.layers.len();
        let mut acts = Vec::with_capacity(n_layers);
        acts.push(x);
        for layer in &self.layers[..n_layers - 1] {
            let mut z = acts.last().unwrap().dot(&layer.weight.t());
            z += &layer.bias;
            z.mapv_inplace(|v| v.max(0.0));
            acts.push(z);
        }
        let last = &self.layers[n_layers - 1];
        let out = acts.last().unwrap().dot(&last.weight.t());
        let mut mean = out.mean_axis(Axis(0)).expect("at least one window");
        mean += &last.bias;
        let norm = mean.dot(&mean).sqrt();
        if !(norm >= 1e-12) {
            return Err(Error::DegenerateNorm { norm });
        }
        Ok(Forward { acts, norm, embedding: Embedding(mean / norm) })
    }

    /// Exact gradient of `upstream . embedding` with respect to every
    /// weight and bias.
    pub fn backward(&self, fwd: &Forward, upstream: ArrayView1<f64>) -> Result<WeightGrads> {
        let e = &fwd.embedding.0;
        if upstream.len() != e.len() {
            return Err(Error::Shape(format!("upstream gradient has {} entries, embedding {}", upstream.len(), e.len())));
        }
        // Through the L2 normalization.
        let g_mean = (&upstream - &(e * e.dot(&upstream))) / fwd.norm;
        let n_w = fwd.num_windows();
        let n_layers = self.layers.len();
        let mut grads = Vec::with_capacity(n_layers);
        // Every window receives g_mean / n_w at the output.
        let mut delta = Array2::from_shape_fn((n_w, g_mean.len()), |(_, k)| g_mean[k] / n_w as f64);
        for l in (0..n_layers).rev() {
            let input = &fwd.acts[l];
            let weight = delta.t().dot(input);
            let bias = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut prev = delta.dot(&self.layers[l].weight);
                ndarray::Zip::from(&mut prev).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                delta = prev;
            }
            grads.push(Layer { weight, bias });
        }
        grads.reverse();
        Ok(WeightGrads { layers: grads })
    }
}

pub fn embed_utterance(weights: &Weights, features: &FeatureSequence) -> Result<Embedding> {
    Ok(weights.forward(features)?.embedding)
}

pub fn network_backward(weights: &Weights, features: &FeatureSequence, upstream: ArrayView1<f64>) -> Result<WeightGrads> {
    let fwd = weights.forward(features)?;
    weights.backward(&fwd, upstream)
}

/// Embed an `N x M` grid of utterances.
pub fn embed_batch(weights: &Weights, utterances: &[Vec<FeatureSequence>]) -> Result<EmbeddingBatch> {
    let n = utterances.len();
    let m = utterances.first().map_or(0, Vec::len);
    if utterances.iter().any(|row| row.len() != m) {
        return Err(Error::Shape("ragged utterance grid".into()));
    }
    let flat: Vec<&FeatureSequence> = utterances.iter().flatten().collect();
    let embs = par::map(&flat, |f| embed_utterance(weights, f));
    let d = weights.config.embed_dim;
    let mut out = ndarray::Array3::zeros((n, m, d));
    for (idx, e) in embs.into_iter().enumerate() {
        out.slice_mut(ndarray::s![idx / m, idx % m, ..]).assign(&e?.0);
    }
    EmbeddingBatch::new(out)
}

// Checkpoint: b"DVEC", u32 LE version, u32 LE json length, json, then per layer
// the row-major weight matrix and the bias as f32 LE.
const MAGIC: &[u8; 4] = b"DVEC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    net: NetConfig,
    init: InitMeta,
}

pub fn checkpoint_bytes(weights: &Weights) -> Result<Vec<u8>> {
    weights.check_shapes()?;
    let header = serde_json::to_vec(&CheckpointHeader { net: weights.config.clone(), init: weights.init.clone() })?;
    let mut out = Vec::with_capacity(12 + header.len() + 4 * weights.num_params());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for l in &weights.layers {
        for v in l.weight.iter().chain(l.bias.iter()) {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn weights_from_checkpoint(bytes: &[u8]) -> Result<Weights> {
    let fmt = |m: &str| Error::Format(m.to_string());
    if bytes.len() < 12 {
        return Err(fmt("file too short for header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(fmt("bad magic bytes"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| fmt("truncated config blob"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(json).map_err(|e| Error::Format(format!("config blob: {e}")))?;
    header.net.validate()?;
    let body = &bytes[12 + len..];
    let widths = header.net.widths();
    let expected: usize = widths.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
    if body.len() != 4 * expected {
        return Err(Error::Format(format!(
            "parameter block has {} bytes, config implies {}",
            body.len(),
            4 * expected
        )));
    }
    let mut vals = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let layers = widths
        .windows(2)
        .map(|p| {
            let weight = Array2::from_shape_simple_fn((p[1], p[0]), || vals.next().unwrap());
            let bias = Array1::from_shape_simple_fn(p[1], || vals.next().unwrap());
            Layer { weight, bias }
        })
        .collect();
    Ok(Weights { config: header.net, layers, init: header.init })
}

pub fn save_checkpoint(weights: &Weights, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(weights)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Weights> {
    weights_from_checkpoint(&fs::read(path)?)
}
