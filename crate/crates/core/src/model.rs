//! The GRU sequence model.
//!
//! Each step embeds the previous token (X) and its repetition count (Z),
//! concatenates the two embeddings, runs them through a stack of GRU layers,
//! re-attaches the Z embedding to the top layer's output and projects to 98
//! logits. Dropout sites, in order: the input concat (variational, one mask
//! per sequence), between GRU layers (fresh mask per step by default) and
//! the pre-output concat (variational).

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Element, Gradients, Graph, Tensor, Var};
use crate::encoder::{EncodedSequence, StreamSet};
use crate::vocab::{LAYOUT_VERSION, VOCAB_SIZE, Z_SIZE};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TONICNET";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Magic, format version, layout version, manifest length.
pub const CHECKPOINT_FIXED_HEADER: usize = 8 + 4 + 4 + 4;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("non-finite values at position {position}")]
    NonFinite { position: usize },
    #[error("sequence of length {0} has nothing to predict (need at least 2 tokens)")]
    SequenceTooShort(usize),
    #[error("index {index} outside 0..{size} for the {what} input")]
    BadInput {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("checkpoint {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("checkpoint has wrong magic bytes")]
    BadMagic,
    #[error("checkpoint format version {found}, expected {expected}")]
    FormatVersion { found: u32, expected: u32 },
    #[error("checkpoint vocabulary layout version {found}, expected {expected}")]
    LayoutVersion { found: u32, expected: u32 },
    #[error("checkpoint is truncated")]
    Truncated,
    #[error("checkpoint manifest: {0}")]
    Manifest(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub x_embed: usize,
    pub z_embed: usize,
    pub hidden: usize,
    pub layers: usize,
    pub embed_dropout: f64,
    pub inter_dropout: f64,
    pub output_dropout: f64,
    /// Reuse one inter-layer mask for the whole sequence instead of resampling per step.
    pub variational_inter_layer: bool,
}

impl ModelConfig {
    /// The published architecture: 256/32 embeddings, 3×256 GRU.
    pub fn tonicnet() -> Self {
        ModelConfig {
            x_embed: 256,
            z_embed: 32,
            hidden: 256,
            layers: 3,
            embed_dropout: 0.1,
            inter_dropout: 0.3,
            output_dropout: 0.3,
            variational_inter_layer: false,
        }
    }

    /// Same topology at 8 hidden units, for tests and gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            x_embed: 8,
            z_embed: 4,
            hidden: 8,
            ..ModelConfig::tonicnet()
        }
    }

    pub fn input_width(&self) -> usize {
        self.x_embed + self.z_embed
    }

    pub fn output_width(&self) -> usize {
        self.hidden + self.z_embed
    }

    /// (name, shape) of every parameter tensor in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = vec![
            ("x_embedding".to_string(), vec![VOCAB_SIZE, self.x_embed]),
            ("z_embedding".to_string(), vec![Z_SIZE, self.z_embed]),
        ];
        for l in 0..self.layers {
            let input = if l == 0 { self.input_width() } else { self.hidden };
            for gate in GATES {
                out.push((format!("gru{l}.w_{gate}"), vec![input, self.hidden]));
            }
            for gate in GATES {
                out.push((format!("gru{l}.u_{gate}"), vec![self.hidden, self.hidden]));
            }
            for gate in GATES {
                out.push((format!("gru{l}.b_{gate}"), vec![self.hidden]));
            }
        }
        out.push(("output.weight".into(), vec![self.output_width(), VOCAB_SIZE]));
        out.push(("output.bias".into(), vec![VOCAB_SIZE]));
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

const GATES: [&str; 3] = ["update", "reset", "candidate"];

const X_EMBEDDING: usize = 0;
const Z_EMBEDDING: usize = 1;
const PER_LAYER: usize = 9;

fn layer_base(l: usize) -> usize {
    2 + PER_LAYER * l
}

/// Learnable tensors plus the metadata needed to use them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// Streams the model was trained on.
    pub streams: StreamSet,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ModelParams {
    /// Weights uniform in (−a, a) with a = 1/√(fan-in); biases zero; embedding
    /// rows from N(0, 0.1²). Deterministic in `seed`.
    pub fn init(config: ModelConfig, streams: StreamSet, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.1).expect("valid normal");
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in config.layout() {
            let n: usize = shape.iter().product();
            let values: Vec<f32> = if name.ends_with("embedding") {
                (0..n).map(|_| normal.sample(&mut rng)).collect()
            } else if shape.len() == 1 {
                vec![0.0; n]
            } else {
                let a = 1.0 / (shape[0] as f32).sqrt();
                (0..n)
                    .map(|_| loop {
                        let v = rng.random_range(-a..a);
                        if v != -a {
                            break v;
                        }
                    })
                    .collect()
            };
            names.push(name);
            tensors.push(Tensor::new(shape, values).expect("layout shape").with_grad());
        }
        ModelParams {
            config,
            streams,
            names,
            tensors,
        }
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values().iter().all(|v| v.is_finite()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes();
        let io = |source| ModelError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut file = fs::File::create(path).map_err(io)?;
        file.write_all(&bytes).map_err(io)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut offset = 0;
        let entries = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| {
                let entry = ManifestEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 4 * t.numel();
                entry
            })
            .collect();
        let manifest = Manifest {
            config: self.config,
            streams: self.streams,
            tensors: entries,
        };
        let manifest = serde_json::to_vec(&manifest).expect("manifest serializes");

        let mut out = Vec::with_capacity(CHECKPOINT_FIXED_HEADER + manifest.len() + offset);
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&LAYOUT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for t in &self.tensors {
            for v in t.values() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_FIXED_HEADER {
            return Err(if bytes.len() >= 8 && &bytes[..8] != CHECKPOINT_MAGIC {
                ModelError::BadMagic
            } else {
                ModelError::Truncated
            });
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(ModelError::BadMagic);
        }
        let word = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
        let version = word(8);
        if version != CHECKPOINT_VERSION {
            return Err(ModelError::FormatVersion {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let layout = word(12);
        if layout != LAYOUT_VERSION {
            return Err(ModelError::LayoutVersion {
                found: layout,
                expected: LAYOUT_VERSION,
            });
        }
        let manifest_len = word(16) as usize;
        let payload_start = CHECKPOINT_FIXED_HEADER + manifest_len;
        if bytes.len() < payload_start {
            return Err(ModelError::Truncated);
        }
        let manifest: Manifest = serde_json::from_slice(&bytes[CHECKPOINT_FIXED_HEADER..payload_start])
            .map_err(|e| ModelError::Manifest(e.to_string()))?;

        let expected = manifest.config.layout();
        if expected.len() != manifest.tensors.len() {
            return Err(ModelError::Manifest(format!(
                "expected {} tensors, found {}",
                expected.len(),
                manifest.tensors.len()
            )));
        }
        let payload = &bytes[payload_start..];
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for ((name, shape), entry) in expected.into_iter().zip(&manifest.tensors) {
            if entry.name != name || entry.shape != shape {
                return Err(ModelError::Manifest(format!(
                    "tensor {} {:?} does not match layout {} {:?}",
                    entry.name, entry.shape, name, shape
                )));
            }
            let n: usize = shape.iter().product();
            let end = entry.offset + 4 * n;
            if end > payload.len() {
                return Err(ModelError::Truncated);
            }
            let values = payload[entry.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            names.push(name);
            tensors.push(Tensor::new(shape, values)?.with_grad());
        }
        let total: usize = tensors.iter().map(|t: &Tensor| 4 * t.numel()).sum();
        if payload.len() != total {
            return Err(ModelError::Manifest(format!(
                "payload is {} bytes, tensors need {}",
                payload.len(),
                total
            )));
        }
        Ok(ModelParams {
            config: manifest.config,
            streams: manifest.streams,
            names,
            tensors,
        })
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    streams: StreamSet,
    tensors: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Recurrent state, one `[hidden]` vector per GRU layer.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub layers: Vec<Vec<f32>>,
}

impl HiddenState {
    pub fn zeros(config: &ModelConfig) -> Self {
        HiddenState {
            layers: vec![vec![0.0; config.hidden]; config.layers],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().flatten().all(|v| v.is_finite())
    }
}

/// Dropout masks for one sequence. Variational masks are fixed at creation;
/// per-step inter-layer masks are derived from `step_seed` and the position,
/// so a plan is fully deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutPlan {
    train: bool,
    embed_mask: Vec<f32>,
    output_mask: Vec<f32>,
    /// Only used when the inter-layer sites are variational.
    inter_masks: Vec<Vec<f32>>,
    step_seed: u64,
}

fn bernoulli_mask(rng: &mut impl Rng, len: usize, rate: f64) -> Vec<f32> {
    (0..len)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { 1.0 })
        .collect()
}

impl DropoutPlan {
    /// No dropout anywhere.
    pub fn eval() -> Self {
        DropoutPlan {
            train: false,
            embed_mask: Vec::new(),
            output_mask: Vec::new(),
            inter_masks: Vec::new(),
            step_seed: 0,
        }
    }

    pub fn sample(config: &ModelConfig, rng: &mut impl Rng) -> Self {
        let embed_mask = bernoulli_mask(rng, config.input_width(), config.embed_dropout);
        let output_mask = bernoulli_mask(rng, config.output_width(), config.output_dropout);
        let inter_masks = if config.variational_inter_layer {
            (0..config.layers.saturating_sub(1))
                .map(|_| bernoulli_mask(rng, config.hidden, config.inter_dropout))
                .collect()
        } else {
            Vec::new()
        };
        DropoutPlan {
            train: true,
            embed_mask,
            output_mask,
            inter_masks,
            step_seed: rng.random(),
        }
    }

    pub fn is_train(&self) -> bool {
        self.train
    }

    pub fn embed_mask(&self) -> &[f32] {
        &self.embed_mask
    }

    pub fn output_mask(&self) -> &[f32] {
        &self.output_mask
    }

    /// Mask applied after GRU layer `layer` at sequence `position`.
    pub fn inter_mask(&self, config: &ModelConfig, layer: usize, position: usize) -> Vec<f32> {
        if let Some(mask) = self.inter_masks.get(layer) {
            return mask.clone();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.step_seed);
        rng.set_stream((position as u64) << 8 | layer as u64);
        bernoulli_mask(&mut rng, config.hidden, config.inter_dropout)
    }
}

/// Graph handles for every parameter tensor.
pub struct BoundParams(Vec<Var>);

impl BoundParams {
    pub fn bind<T: Element>(graph: &mut Graph<'_, T>, count: usize) -> Self {
        BoundParams((0..count).map(|i| graph.param(i)).collect())
    }

    /// Uses existing vars, in layout order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        BoundParams(vars)
    }
}

fn cast_mask<T: Element>(mask: &[f32]) -> Vec<T> {
    mask.iter().map(|m| T::of(*m as f64)).collect()
}

/// Records one model step on `graph`. `hidden` holds one `[1, hidden]` var
/// per layer; returns the logits and the new per-layer states.
#[allow(clippy::too_many_arguments)]
pub fn forward_step<T: Element>(
    graph: &mut Graph<'_, T>,
    params: &BoundParams,
    config: &ModelConfig,
    x: usize,
    z: usize,
    hidden: &[Var],
    plan: &DropoutPlan,
    position: usize,
) -> Result<(Var, Vec<Var>)> {
    if x >= VOCAB_SIZE {
        return Err(ModelError::BadInput {
            what: "X",
            index: x,
            size: VOCAB_SIZE,
        });
    }
    if z >= Z_SIZE {
        return Err(ModelError::BadInput {
            what: "Z",
            index: z,
            size: Z_SIZE,
        });
    }
    let p = &params.0;
    let x_emb = graph.embedding(p[X_EMBEDDING], x)?;
    let z_emb = graph.embedding(p[Z_EMBEDDING], z)?;
    let mut input = graph.concat(&[x_emb, z_emb])?;
    if plan.train {
        input = graph.dropout(input, &cast_mask(&plan.embed_mask), config.embed_dropout)?;
    }

    let mut new_hidden = Vec::with_capacity(config.layers);
    for (l, &h) in hidden.iter().enumerate() {
        let base = layer_base(l);
        let gate = |graph: &mut Graph<'_, T>, w: usize, u: usize, b: usize, h_in: Var| -> Result<Var> {
            let wx = graph.matmul(input, p[base + w])?;
            let uh = graph.matmul(h_in, p[base + u])?;
            let s = graph.add(wx, uh)?;
            Ok(graph.add(s, p[base + b])?)
        };
        let pre_update = gate(graph, 0, 3, 6, h)?;
        let update = graph.sigmoid(pre_update);
        let pre_reset = gate(graph, 1, 4, 7, h)?;
        let reset = graph.sigmoid(pre_reset);
        let gated = graph.mul(reset, h)?;
        let pre_candidate = gate(graph, 2, 5, 8, gated)?;
        let candidate = graph.tanh(pre_candidate);
        // h' = h + z ⊙ (h̃ − h)
        let diff = graph.sub(candidate, h)?;
        let step = graph.mul(update, diff)?;
        let h_new = graph.add(h, step)?;
        new_hidden.push(h_new);

        input = h_new;
        if plan.train && l + 1 < config.layers {
            let mask = plan.inter_mask(config, l, position);
            input = graph.dropout(input, &cast_mask(&mask), config.inter_dropout)?;
        }
    }

    let mut top = graph.concat(&[input, z_emb])?;
    if plan.train {
        top = graph.dropout(top, &cast_mask(&plan.output_mask), config.output_dropout)?;
    }
    let out_base = layer_base(config.layers);
    let logits = graph.matmul(top, p[out_base])?;
    let logits = graph.add(logits, p[out_base + 1])?;
    Ok((logits, new_hidden))
}

/// One inference step outside any training graph.
pub fn step(
    params: &ModelParams,
    x: usize,
    z: usize,
    hidden: &HiddenState,
    plan: &DropoutPlan,
    position: usize,
) -> Result<(Vec<f32>, HiddenState)> {
    if !hidden.is_finite() {
        return Err(ModelError::NonFinite { position });
    }
    let mut graph = Graph::new(params.tensors());
    let bound = BoundParams::bind(&mut graph, params.tensors().len());
    let h: Vec<Var> = hidden
        .layers
        .iter()
        .map(|l| graph.constant(Tensor::row(l.clone())))
        .collect();
    let (logits, new_h) = forward_step(&mut graph, &bound, &params.config, x, z, &h, plan, position)?;
    let logits = graph.value(logits).to_vec();
    let next = HiddenState {
        layers: new_h.iter().map(|v| graph.value(*v).to_vec()).collect(),
    };
    if !next.is_finite() || logits.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite { position });
    }
    Ok((logits, next))
}

/// Teacher-forced losses for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceLoss {
    /// Mean cross-entropy over predicted positions.
    pub total: f32,
    /// Entry `i` is the loss of predicting position `i + 1`.
    pub per_position: Vec<f32>,
    /// Arg-max prediction for position `i + 1`.
    pub argmax: Vec<usize>,
}

/// Records the whole teacher-forced sequence on `graph`: position 0 is
/// input only, and position `p ≥ 1` is predicted from `(x[p−1], z[p−1])`.
/// Returns the mean loss and the per-position losses.
pub fn record_sequence<T: Element>(
    graph: &mut Graph<'_, T>,
    config: &ModelConfig,
    seq: &EncodedSequence,
    plan: &DropoutPlan,
) -> Result<(Var, Vec<Var>, Vec<Var>)> {
    if seq.len() < 2 {
        return Err(ModelError::SequenceTooShort(seq.len()));
    }
    let count = config.layout().len();
    let bound = BoundParams::bind(graph, count);
    let mut hidden: Vec<Var> = (0..config.layers)
        .map(|_| graph.constant(Tensor::zeros(vec![1, config.hidden])))
        .collect();
    let mut losses = Vec::with_capacity(seq.len() - 1);
    let mut logits_out = Vec::with_capacity(seq.len() - 1);
    for p in 1..seq.len() {
        let (logits, next) = forward_step(
            graph,
            &bound,
            config,
            seq.x[p - 1],
            seq.z[p - 1].index(),
            &hidden,
            plan,
            p - 1,
        )?;
        hidden = next;
        losses.push(graph.softmax_cross_entropy(logits, seq.x[p])?);
        logits_out.push(logits);
    }
    let total = graph.mean(&losses)?;
    Ok((total, losses, logits_out))
}

fn argmax(values: &[f32]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, v)| {
            if *v > best.1 {
                (i, *v)
            } else {
                best
            }
        })
        .0
}

/// Teacher-forced loss without gradients, run step by step so memory stays
/// flat for long sequences.
pub fn sequence_nll(params: &ModelParams, seq: &EncodedSequence, plan: &DropoutPlan) -> Result<SequenceLoss> {
    if seq.len() < 2 {
        return Err(ModelError::SequenceTooShort(seq.len()));
    }
    let mut hidden = HiddenState::zeros(&params.config);
    let mut per_position = Vec::with_capacity(seq.len() - 1);
    let mut predictions = Vec::with_capacity(seq.len() - 1);
    for p in 1..seq.len() {
        let mut graph = Graph::new(params.tensors());
        let bound = BoundParams::bind(&mut graph, params.tensors().len());
        let h: Vec<Var> = hidden
            .layers
            .iter()
            .map(|l| graph.constant(Tensor::row(l.clone())))
            .collect();
        let (logits, next) = forward_step(
            &mut graph,
            &bound,
            &params.config,
            seq.x[p - 1],
            seq.z[p - 1].index(),
            &h,
            plan,
            p - 1,
        )?;
        let loss = graph.softmax_cross_entropy(logits, seq.x[p])?;
        let loss = graph.scalar(loss);
        if !loss.is_finite() {
            return Err(ModelError::NonFinite { position: p });
        }
        per_position.push(loss);
        predictions.push(argmax(graph.value(logits)));
        hidden = HiddenState {
            layers: next.iter().map(|v| graph.value(*v).to_vec()).collect(),
        };
    }
    let total = per_position.iter().map(|v| *v as f64).sum::<f64>() / per_position.len() as f64;
    Ok(SequenceLoss {
        total: total as f32,
        per_position,
        argmax: predictions,
    })
}

/// Loss and full back-propagation-through-time gradients for one sequence.
pub fn sequence_loss_and_grads(
    params: &ModelParams,
    seq: &EncodedSequence,
    plan: &DropoutPlan,
) -> Result<(f32, Gradients)> {
    let mut graph = Graph::new(params.tensors());
    let (total, _, _) = record_sequence(&mut graph, &params.config, seq, plan)?;
    let loss = graph.scalar(total);
    if !loss.is_finite() {
        return Err(ModelError::NonFinite {
            position: seq.len() - 1,
        });
    }
    let grads = graph.backward(total)?;
    Ok((loss, grads))
}
