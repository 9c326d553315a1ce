//! The fusion head: a linear adapter, a stack of inter-channel layers and
//! the global fusion layer, plus the two affine parameters of the angular
//! prototypical loss.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    global_fusion_on, inter_channel_layer_on, AttentionOpts, AttentionParams, AttentionVars,
    FfnParams, HeadParams, LayerParams, LayerVars,
};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::normalize::{NormAxis, Normalizer};
use crate::tape::{Tape, Var};

fn default_d_in() -> usize {
    512
}
fn default_width() -> usize {
    256
}
fn default_heads() -> usize {
    4
}
fn default_layers() -> usize {
    4
}
fn default_ffn_hidden() -> usize {
    512
}
fn default_mode() -> Normalizer {
    Normalizer::Sparsemax
}
fn default_true() -> bool {
    true
}
fn default_axis() -> NormAxis {
    NormAxis::QueryRows
}
fn default_scale() -> f64 {
    10.0
}
fn default_bias() -> f64 {
    -5.0
}

/// Hyperparameters of the fusion head.
///
/// Defaults follow the reference setup: 512-dim front-end embeddings, four
/// stacked layers of width 256 with four heads, and a feed-forward hidden
/// width of 512.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of the per-channel front-end embeddings.
    #[serde(default = "default_d_in")]
    pub d_in: usize,
    /// Width `E` of every attention and feed-forward output.
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    /// Number of stacked inter-channel layers.
    #[serde(default = "default_layers")]
    pub layers: usize,
    #[serde(default = "default_ffn_hidden")]
    pub ffn_hidden: usize,
    #[serde(default = "default_mode")]
    pub mode: Normalizer,
    /// Whether the global fusion attention adds the top layer's raw scores.
    #[serde(default = "default_true")]
    pub fusion_uses_prev: bool,
    #[serde(default = "default_axis")]
    pub norm_axis: NormAxis,
    /// Initial loss scale `w`.
    #[serde(default = "default_scale")]
    pub init_scale: f64,
    /// Initial loss bias `b`.
    #[serde(default = "default_bias")]
    pub init_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: default_d_in(),
            width: default_width(),
            heads: default_heads(),
            layers: default_layers(),
            ffn_hidden: default_ffn_hidden(),
            mode: default_mode(),
            fusion_uses_prev: true,
            norm_axis: default_axis(),
            init_scale: default_scale(),
            init_bias: default_bias(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("width", self.width),
            ("heads", self.heads),
            ("layers", self.layers),
            ("ffn_hidden", self.ffn_hidden),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config("init_scale must be positive".into()));
        }
        if !self.init_bias.is_finite() {
            return Err(Error::Config("init_bias must be finite".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn attention_opts(&self) -> AttentionOpts {
        AttentionOpts {
            mode: self.mode,
            axis: self.norm_axis,
        }
    }

    /// Names and shapes of every parameter, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, usize, usize)> {
        let (e, dk, f) = (self.width, self.head_dim(), self.ffn_hidden);
        let mut out = vec![("adapter".to_string(), self.d_in, e)];
        let attention = |out: &mut Vec<(String, usize, usize)>, prefix: &str| {
            for h in 0..self.heads {
                for w in ["w_q", "w_k", "w_v"] {
                    out.push((format!("{prefix}.heads.{h}.{w}"), e, dk));
                }
            }
            out.push((format!("{prefix}.w_o"), e, e));
        };
        for l in 0..self.layers {
            let prefix = format!("layers.{l}");
            attention(&mut out, &format!("{prefix}.attention"));
            out.push((format!("{prefix}.ffn.w1"), e, f));
            out.push((format!("{prefix}.ffn.b1"), 1, f));
            out.push((format!("{prefix}.ffn.w2"), f, e));
            out.push((format!("{prefix}.ffn.b2"), 1, e));
        }
        attention(&mut out, "fusion");
        out.push(("loss.scale".to_string(), 1, 1));
        out.push(("loss.bias".to_string(), 1, 1));
        out
    }
}

/// Every trainable parameter of the fusion head.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: ModelConfig,
    /// `d_in x E` projection in front of the first layer.
    pub adapter: Matrix,
    pub layers: Vec<LayerParams>,
    pub fusion: AttentionParams,
    /// Loss scale `w` (1x1), kept positive.
    pub loss_scale: Matrix,
    /// Loss bias `b` (1x1).
    pub loss_bias: Matrix,
}

/// Per-layer attention weights recorded by [`FusionModel::trace`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub embedding: Matrix,
    /// `layer_weights[l][h]` is the `C x C` attention of head `h` in layer `l`.
    pub layer_weights: Vec<Vec<Matrix>>,
    /// Attention of the global fusion layer, one matrix per head.
    pub fusion_weights: Vec<Matrix>,
}

impl FusionModel {
    /// Glorot-uniform weights, zero biases, loss affine from the config.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<Matrix> = config
            .param_shapes()
            .iter()
            .map(|(name, rows, cols)| {
                if name == "loss.scale" {
                    Matrix::scalar(config.init_scale)
                } else if name == "loss.bias" {
                    Matrix::scalar(config.init_bias)
                } else if name.ends_with(".b1") || name.ends_with(".b2") {
                    Matrix::zeros(*rows, *cols)
                } else {
                    glorot(&mut rng, *rows, *cols)
                }
            })
            .collect();
        Self::from_params(config, params)
    }

    /// Rebuilds a model from parameters in [`ModelConfig::param_shapes`] order.
    pub fn from_params(config: ModelConfig, params: Vec<Matrix>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((name, r, c), p) in shapes.iter().zip(&params) {
            if p.shape() != (*r, *c) {
                return Err(Error::contract(format!(
                    "parameter {name} is {:?}, expected {r}x{c}",
                    p.shape()
                )));
            }
        }
        let mut it = params.into_iter();
        let mut next = || it.next().expect("length checked above");
        let adapter = next();
        let attention = |next: &mut dyn FnMut() -> Matrix| {
            let heads = (0..config.heads)
                .map(|_| HeadParams {
                    w_q: next(),
                    w_k: next(),
                    w_v: next(),
                })
                .collect();
            AttentionParams {
                heads,
                w_o: next(),
            }
        };
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let attention = attention(&mut next);
            let ffn = FfnParams {
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            };
            layers.push(LayerParams { attention, ffn });
        }
        let fusion = attention(&mut next);
        let loss_scale = next();
        let loss_bias = next();
        Ok(Self {
            config,
            adapter,
            layers,
            fusion,
            loss_scale,
            loss_bias,
        })
    }

    /// Parameters in canonical order.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.adapter];
        fn attention<'a>(out: &mut Vec<&'a Matrix>, a: &'a AttentionParams) {
            for h in &a.heads {
                out.extend([&h.w_q, &h.w_k, &h.w_v]);
            }
            out.push(&a.w_o);
        }
        for l in &self.layers {
            attention(&mut out, &l.attention);
            out.extend([&l.ffn.w1, &l.ffn.b1, &l.ffn.w2, &l.ffn.b2]);
        }
        attention(&mut out, &self.fusion);
        out.push(&self.loss_scale);
        out.push(&self.loss_bias);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.adapter];
        fn attention<'a>(out: &mut Vec<&'a mut Matrix>, a: &'a mut AttentionParams) {
            for h in &mut a.heads {
                out.push(&mut h.w_q);
                out.push(&mut h.w_k);
                out.push(&mut h.w_v);
            }
            out.push(&mut a.w_o);
        }
        for l in &mut self.layers {
            attention(&mut out, &mut l.attention);
            out.push(&mut l.ffn.w1);
            out.push(&mut l.ffn.b1);
            out.push(&mut l.ffn.w2);
            out.push(&mut l.ffn.b2);
        }
        attention(&mut out, &mut self.fusion);
        out.push(&mut self.loss_scale);
        out.push(&mut self.loss_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn scale(&self) -> f64 {
        self.loss_scale.as_slice()[0]
    }

    pub fn bias(&self) -> f64 {
        self.loss_bias.as_slice()[0]
    }

    /// Records every parameter on `tape`.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, trainable: bool) -> ModelVars {
        let rec = |t: &mut Tape<'a>, m: &'a Matrix| {
            if trainable {
                t.leaf_ref(m)
            } else {
                t.constant_ref(m)
            }
        };
        ModelVars {
            adapter: rec(tape, &self.adapter),
            layers: self.layers.iter().map(|l| l.bind(tape, trainable)).collect(),
            fusion: self.fusion.bind(tape, trainable),
            loss_scale: rec(tape, &self.loss_scale),
            loss_bias: rec(tape, &self.loss_bias),
        }
    }

    /// Records the forward pass of one utterance (`C x d_in`).
    pub fn forward_on(&self, tape: &mut Tape, vars: &ModelVars, x: Var) -> Result<ForwardNodes> {
        let (c, d) = tape.value(x).shape();
        if c == 0 {
            return Err(Error::contract("forward over zero channels"));
        }
        if d != self.config.d_in {
            return Err(Error::contract(format!(
                "input has {d} features, model expects {}",
                self.config.d_in
            )));
        }
        let opts = self.config.attention_opts();
        let zeros: Vec<Var> = (0..self.config.heads)
            .map(|_| tape.constant(Matrix::zeros(c, c)))
            .collect();
        let mut h = tape.matmul(x, vars.adapter)?;
        let mut prev = zeros.clone();
        let mut layer_weights = Vec::with_capacity(vars.layers.len());
        for layer in &vars.layers {
            let (y, nodes) = inter_channel_layer_on(tape, h, &prev, layer, opts)?;
            h = y;
            prev = nodes.scores;
            layer_weights.push(nodes.weights);
        }
        let fusion_prev = if self.config.fusion_uses_prev {
            &prev
        } else {
            &zeros
        };
        let (embedding, nodes) = global_fusion_on(tape, h, fusion_prev, &vars.fusion, opts)?;
        Ok(ForwardNodes {
            embedding,
            layer_weights,
            fusion_weights: nodes.weights,
        })
    }

    /// Fused `1 x E` embedding of one utterance given as `C x d_in`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.trace(x)?.embedding)
    }

    /// Forward pass that also returns every attention matrix.
    pub fn trace(&self, x: &Matrix) -> Result<ForwardTrace> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant_ref(x);
        let nodes = self.forward_on(&mut tape, &vars, xv)?;
        let grab = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).clone()).collect::<Vec<_>>();
        Ok(ForwardTrace {
            embedding: tape.value(nodes.embedding).clone(),
            layer_weights: nodes.layer_weights.iter().map(|w| grab(w)).collect(),
            fusion_weights: grab(&nodes.fusion_weights),
        })
    }
}

fn glorot(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| rng.random_range(-limit..=limit))
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite initial weights")
}

/// Tape handles for every parameter of a [`FusionModel`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub adapter: Var,
    pub layers: Vec<LayerVars>,
    pub fusion: AttentionVars,
    pub loss_scale: Var,
    pub loss_bias: Var,
}

impl ModelVars {
    /// Handles in canonical parameter order.
    pub fn params(&self) -> Vec<Var> {
        let mut out = vec![self.adapter];
        let attention = |out: &mut Vec<Var>, a: &AttentionVars| {
            for h in &a.heads {
                out.extend([h.w_q, h.w_k, h.w_v]);
            }
            out.push(a.w_o);
        };
        for l in &self.layers {
            attention(&mut out, &l.attention);
            out.extend([l.ffn.w1, l.ffn.b1, l.ffn.w2, l.ffn.b2]);
        }
        attention(&mut out, &self.fusion);
        out.push(self.loss_scale);
        out.push(self.loss_bias);
        out
    }
}

#[derive(Debug, Clone)]
pub struct ForwardNodes {
    pub embedding: Var,
    pub layer_weights: Vec<Vec<Var>>,
    pub fusion_weights: Vec<Var>,
}

/// Source of frozen per-channel front-end embeddings.
///
/// The fusion head never sees audio; whatever produces utterance-level
/// embeddings per channel plugs in here.
pub trait EmbeddingProvider: Sync {
    fn num_utterances(&self) -> usize;
    fn speaker(&self, utterance: usize) -> u32;
    fn num_crops(&self, utterance: usize) -> usize;
    /// `C x d_in` embeddings of one crop of one utterance.
    fn channel_matrix(&self, utterance: usize, crop: usize) -> Result<Matrix>;
}

// ---------------------------------------------------------------------------
// Checkpoints
//
// Layout: b"AFCK", u32 version, u32 header length, UTF-8 JSON header, then
// the f64 little-endian payload of every tensor in manifest order.

const CKPT_MAGIC: &[u8; 4] = b"AFCK";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset from the start of the payload.
    offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CkptHeader {
    config: ModelConfig,
    /// Epochs of training already applied.
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

/// Training metadata carried alongside the weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CheckpointMeta {
    pub epoch: usize,
}

pub fn encode_checkpoint(model: &FusionModel, meta: CheckpointMeta) -> Result<Vec<u8>> {
    let shapes = model.config.param_shapes();
    let mut offset = 0u64;
    let tensors = shapes
        .into_iter()
        .map(|(name, rows, cols)| {
            let entry = TensorEntry {
                name,
                rows,
                cols,
                offset,
            };
            offset += (rows * cols * 8) as u64;
            entry
        })
        .collect();
    let header = serde_json::to_vec(&CkptHeader {
        config: model.config.clone(),
        epoch: meta.epoch,
        tensors,
    })?;
    let mut out = Vec::with_capacity(12 + header.len() + offset as usize);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        for v in p.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(FusionModel, CheckpointMeta)> {
    if bytes.len() < 12 {
        return Err(Error::format(0, "checkpoint shorter than its preamble"));
    }
    if &bytes[..4] != CKPT_MAGIC {
        return Err(Error::format(0, "bad magic, not a checkpoint"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CKPT_VERSION {
        return Err(Error::format(
            4,
            format!("checkpoint version {version}, this build reads {CKPT_VERSION}"),
        ));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload_start = 12 + header_len;
    if bytes.len() < payload_start {
        return Err(Error::format(12, "truncated header"));
    }
    let header: CkptHeader = serde_json::from_slice(&bytes[12..payload_start])
        .map_err(|e| Error::format(12, format!("bad header: {e}")))?;
    header.config.validate()?;

    let expected = header.config.param_shapes();
    if expected.len() != header.tensors.len() {
        return Err(Error::format(
            12,
            format!(
                "manifest lists {} tensors, config implies {}",
                header.tensors.len(),
                expected.len()
            ),
        ));
    }
    let payload = &bytes[payload_start..];
    let mut cursor = 0u64;
    let mut params = Vec::with_capacity(expected.len());
    for ((name, rows, cols), entry) in expected.iter().zip(&header.tensors) {
        if &entry.name != name || entry.rows != *rows || entry.cols != *cols {
            return Err(Error::format(
                12,
                format!(
                    "manifest entry {} ({}x{}) disagrees with config ({name} {rows}x{cols})",
                    entry.name, entry.rows, entry.cols
                ),
            ));
        }
        if entry.offset != cursor {
            return Err(Error::format(
                12,
                format!("tensor {name} at offset {}, expected {cursor}", entry.offset),
            ));
        }
        let n = rows * cols;
        let start = cursor as usize;
        let end = start + n * 8;
        if end > payload.len() {
            return Err(Error::format(
                (payload_start + payload.len()) as u64,
                format!("payload truncated inside tensor {name}"),
            ));
        }
        let data = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(
            Matrix::from_vec(*rows, *cols, data)
                .map_err(|e| Error::format((payload_start + start) as u64, e.to_string()))?,
        );
        cursor = end as u64;
    }
    if cursor as usize != payload.len() {
        return Err(Error::format(
            (payload_start + cursor as usize) as u64,
            "trailing bytes after last tensor",
        ));
    }
    let model = FusionModel::from_params(header.config, params)?;
    Ok((model, CheckpointMeta { epoch: header.epoch }))
}

pub fn save_checkpoint(model: &FusionModel, meta: CheckpointMeta, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(FusionModel, CheckpointMeta)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

impl FusionModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self, CheckpointMeta::default(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(load_checkpoint(path)?.0)
    }
}
