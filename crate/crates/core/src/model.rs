//! A small pre-norm decoder-only transformer over modality-tagged tokens.
//!
//! Image tokens are ordinary vocabulary ids from a fixture visual codebook.
//! Positions use a learned absolute embedding. Each block is
//! `x += Attn(Norm(x)); x += FFN(Norm(x))`; the residual value entering block
//! `i` is recorded as `X_i` and the value leaving it as `Y_i`.
//!
//! Prefill and incremental steps share one code path: a chunk of new
//! positions is appended to a [`DecodeCache`] and attends over everything in
//! the cache. A full forward is a single chunk starting from an empty cache.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    truncate_to_budget, visual_candidates, EmptyRowPolicy, GuidanceMask, MaskPlan, MaskRow, RowContext,
};
use crate::error::{CmgError, Result};
use crate::layout::ModalityLayout;
use crate::numerics::{dot, softmax_where, vec_mat, Matrix};
use crate::trace_io::{Tensor, TraceContainer};

/// Mask rows of one layer and the dropped keys indexed `[head][row]`.
type LayerDrops = (Vec<MaskRow>, Vec<Vec<Vec<usize>>>);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    #[default]
    LayerNorm,
    /// Pass-through; used by handcrafted fixtures whose margins are derived
    /// by hand.
    Identity,
}

fn default_eps() -> f32 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Patch grid (rows, cols) of the image span, for mask visualization.
    pub image_grid: (usize, usize),
    #[serde(default)]
    pub norm: NormKind,
    #[serde(default = "default_eps")]
    pub norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// 4 layers, 4 heads, width 64, vocabulary 256, 4×4 image grid.
    pub fn desk() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            model_dim: 64,
            head_dim: 16,
            ffn_dim: 128,
            vocab_size: 256,
            max_seq_len: 64,
            image_grid: (4, 4),
            norm: NormKind::LayerNorm,
            norm_eps: default_eps(),
        }
    }

    /// 2 layers, 2 heads, width 8, vocabulary 16.
    pub fn tiny() -> Self {
        Self {
            num_layers: 2,
            num_heads: 2,
            model_dim: 8,
            head_dim: 4,
            ffn_dim: 16,
            vocab_size: 16,
            max_seq_len: 32,
            image_grid: (2, 2),
            norm: NormKind::LayerNorm,
            norm_eps: default_eps(),
        }
    }

    pub fn image_tokens(&self) -> usize {
        self.image_grid.0 * self.image_grid.1
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("num_layers", self.num_layers),
            ("num_heads", self.num_heads),
            ("model_dim", self.model_dim),
            ("head_dim", self.head_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        for (name, value) in fields {
            if value == 0 {
                return Err(CmgError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.num_heads * self.head_dim != self.model_dim {
            return Err(CmgError::InvalidConfig(format!(
                "model_dim {} != num_heads {} x head_dim {}",
                self.model_dim, self.num_heads, self.head_dim
            )));
        }
        if self.norm_eps.is_nan() || self.norm_eps < 0.0 {
            return Err(CmgError::InvalidConfig("norm_eps must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm {
    pub gain: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Norm {
    pub fn unit(dim: usize) -> Self {
        Self {
            gain: vec![1.0; dim],
            bias: vec![0.0; dim],
        }
    }

    fn apply(&self, kind: NormKind, eps: f32, x: &[f32]) -> Vec<f32> {
        match kind {
            NormKind::Identity => x.to_vec(),
            NormKind::LayerNorm => {
                let n = x.len() as f32;
                let mean = x.iter().sum::<f32>() / n;
                let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                x.iter()
                    .zip(self.gain.iter().zip(&self.bias))
                    .map(|(v, (g, b))| (v - mean) * inv * g + b)
                    .collect()
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub attn_norm: Norm,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Norm,
    pub w1: Matrix,
    pub b1: Vec<f32>,
    pub w2: Matrix,
    pub b2: Vec<f32>,
}

/// Immutable model parameters. Share freely across threads.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    token_embedding: Matrix,
    position_embedding: Matrix,
    layers: Vec<LayerWeights>,
    final_norm: Norm,
    lm_head: Matrix,
    fingerprint: u64,
}

fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044_715 * x * x * x)).tanh())
}

/// Deterministic random weights for `(config, seed)`.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelWeights> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.model_dim;
    let mut normal = |rows: usize, cols: usize, std: f32| {
        let dist = Normal::new(0.0f32, std).expect("positive std");
        Matrix::from_fn(rows, cols, |_, _| dist.sample(&mut rng))
    };
    let inv_sqrt_d = 1.0 / (d as f32).sqrt();
    let token_embedding = normal(config.vocab_size, d, 1.0);
    let position_embedding = normal(config.max_seq_len, d, 0.5);
    let mut layers = Vec::with_capacity(config.num_layers);
    for _ in 0..config.num_layers {
        layers.push(LayerWeights {
            attn_norm: Norm::unit(d),
            wq: normal(d, d, inv_sqrt_d),
            wk: normal(d, d, inv_sqrt_d),
            wv: normal(d, d, inv_sqrt_d),
            wo: normal(d, d, inv_sqrt_d),
            ffn_norm: Norm::unit(d),
            w1: normal(d, config.ffn_dim, inv_sqrt_d),
            b1: vec![0.0; config.ffn_dim],
            w2: normal(config.ffn_dim, d, 1.0 / (config.ffn_dim as f32).sqrt()),
            b2: vec![0.0; d],
        });
    }
    let lm_head = normal(d, config.vocab_size, 2.0 * inv_sqrt_d);
    Ok(ModelWeights::assemble(
        config.clone(),
        token_embedding,
        position_embedding,
        layers,
        Norm::unit(d),
        lm_head,
    ))
}

/// Which decoding stream a cache belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassKind {
    Expert,
    Amateur,
}

/// Per-layer keys and values of every processed position.
#[derive(Debug, Clone)]
pub struct DecodeCache {
    pass: PassKind,
    fingerprint: u64,
    layout: ModalityLayout,
    tokens: Vec<u32>,
    keys: Vec<Matrix>,
    values: Vec<Matrix>,
}

impl DecodeCache {
    pub fn new(weights: &ModelWeights, pass: PassKind, layout: ModalityLayout) -> Self {
        let c = weights.config();
        Self {
            pass,
            fingerprint: weights.fingerprint(),
            layout,
            tokens: Vec::new(),
            keys: (0..c.num_layers).map(|_| Matrix::zeros(0, c.model_dim)).collect(),
            values: (0..c.num_layers).map(|_| Matrix::zeros(0, c.model_dim)).collect(),
        }
    }

    pub fn pass(&self) -> PassKind {
        self.pass
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Layout of the cached positions.
    pub fn layout(&self) -> &ModalityLayout {
        &self.layout
    }

    pub fn keys(&self, layer: usize) -> &Matrix {
        &self.keys[layer]
    }

    pub fn values(&self, layer: usize) -> &Matrix {
        &self.values[layer]
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TraceOptions {
    /// Keep the pre-exclusion scaled scores `QKᵀ/√d` of every row.
    pub record_raw_scores: bool,
}

/// Everything recorded by one full forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub layout: ModalityLayout,
    pub tokens: Vec<u32>,
    /// `X_i`: residual stream entering block `i`, `seq × dim`.
    pub hidden_in: Vec<Matrix>,
    /// `Y_i`: residual stream leaving block `i`, `seq × dim`.
    pub hidden_out: Vec<Matrix>,
    /// `[layer][head]`, `seq × seq` post-softmax weights; hidden keys are 0.
    pub attention: Vec<Vec<Matrix>>,
    /// Same shape as `attention`; causally hidden keys are `-inf`.
    pub raw_scores: Option<Vec<Vec<Matrix>>>,
    /// `seq × vocab`; absent on imported traces that did not capture logits.
    pub logits: Option<Matrix>,
    /// Keys dropped during this pass.
    pub mask: GuidanceMask,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.layout.len()
    }

    pub fn num_layers(&self) -> usize {
        self.hidden_in.len().max(self.attention.len())
    }

    pub fn last_logits(&self) -> Option<&[f32]> {
        let l = self.logits.as_ref()?;
        (l.rows() > 0).then(|| l.row(l.rows() - 1))
    }

    /// Tensors `layers.{i}.input|output|attention`, `logits`, `tokens`.
    pub fn to_container(&self, metadata: serde_json::Value) -> TraceContainer {
        let seq = self.seq_len();
        let mut c = TraceContainer {
            metadata,
            layout: Some(self.layout.clone()),
            tensors: Vec::new(),
        };
        c.push(Tensor::new(
            "tokens",
            vec![self.tokens.len()],
            self.tokens.iter().map(|&t| t as f32).collect(),
        ));
        for (i, (x, y)) in self.hidden_in.iter().zip(&self.hidden_out).enumerate() {
            c.push(Tensor::new(
                format!("layers.{i}.input"),
                vec![x.rows(), x.cols()],
                x.as_slice().to_vec(),
            ));
            c.push(Tensor::new(
                format!("layers.{i}.output"),
                vec![y.rows(), y.cols()],
                y.as_slice().to_vec(),
            ));
        }
        for (i, heads) in self.attention.iter().enumerate() {
            let data = heads.iter().flat_map(|m| m.as_slice().iter().copied()).collect();
            c.push(Tensor::new(
                format!("layers.{i}.attention"),
                vec![heads.len(), seq, seq],
                data,
            ));
        }
        if let Some(logits) = &self.logits {
            c.push(Tensor::new(
                "logits",
                vec![logits.rows(), logits.cols()],
                logits.as_slice().to_vec(),
            ));
        }
        c
    }

    /// Reads whatever a container provides. Hidden states and attention are
    /// optional per layer group, but if present they must cover every layer
    /// `0..n` without gaps.
    pub fn from_container(container: &TraceContainer) -> Result<Self> {
        let layout = container
            .layout
            .clone()
            .ok_or_else(|| CmgError::InvalidLayout("trace has no layout".into()))?;
        let seq = layout.len();
        let matrix = |t: &Tensor| -> Result<Matrix> {
            if t.shape.len() != 2 || t.shape[0] != seq {
                return Err(CmgError::ShapeMismatch(format!(
                    "{} has shape {:?}, expected [{seq}, _]",
                    t.name, t.shape
                )));
            }
            Matrix::new(t.shape[0], t.shape[1], t.data.clone())
        };
        let mut hidden_in = Vec::new();
        let mut hidden_out = Vec::new();
        let mut attention = Vec::new();
        for i in 0.. {
            let x = container.tensor(&format!("layers.{i}.input"));
            let y = container.tensor(&format!("layers.{i}.output"));
            let a = container.tensor(&format!("layers.{i}.attention"));
            if x.is_none() && y.is_none() && a.is_none() {
                break;
            }
            match (x, y) {
                (Some(x), Some(y)) => {
                    hidden_in.push(matrix(x)?);
                    hidden_out.push(matrix(y)?);
                }
                (None, None) => {}
                _ => {
                    return Err(CmgError::ShapeMismatch(format!(
                        "layer {i} has only one of input/output hidden states"
                    )))
                }
            }
            if let Some(a) = a {
                if a.shape.len() != 3 || a.shape[1] != seq || a.shape[2] != seq {
                    return Err(CmgError::ShapeMismatch(format!(
                        "{} has shape {:?}, expected [heads, {seq}, {seq}]",
                        a.name, a.shape
                    )));
                }
                let heads = a
                    .data
                    .chunks_exact(seq * seq)
                    .map(|chunk| Matrix::new(seq, seq, chunk.to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                attention.push(heads);
            }
        }
        let n = hidden_in.len().max(attention.len());
        if (!hidden_in.is_empty() && hidden_in.len() != n) || (!attention.is_empty() && attention.len() != n) {
            return Err(CmgError::ShapeMismatch("layer tensors are not contiguous".into()));
        }
        let logits = container.tensor("logits").map(matrix).transpose()?;
        let tokens = container
            .tensor("tokens")
            .map(|t| t.data.iter().map(|&v| v as u32).collect())
            .unwrap_or_default();
        Ok(Self {
            layout,
            tokens,
            hidden_in,
            hidden_out,
            attention,
            raw_scores: None,
            logits,
            mask: GuidanceMask::default(),
        })
    }
}

/// Output of one incremental step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f32>,
    /// `[layer][head]` weights of the new row over all cached keys.
    pub attention: Vec<Vec<Vec<f32>>>,
    pub hidden_in: Vec<Vec<f32>>,
    pub hidden_out: Vec<Vec<f32>>,
    pub mask: GuidanceMask,
}

/// Result of pushing a chunk of positions through the model.
struct ChunkOutput {
    hidden_in: Vec<Matrix>,
    hidden_out: Vec<Matrix>,
    /// `[layer][head][row]` → weights over keys `0..total`.
    attention: Vec<Vec<Vec<Vec<f32>>>>,
    raw: Option<Vec<Vec<Vec<Vec<f32>>>>>,
    logits: Matrix,
    mask: GuidanceMask,
}

impl ModelWeights {
    pub(crate) fn assemble(
        config: ModelConfig,
        token_embedding: Matrix,
        position_embedding: Matrix,
        layers: Vec<LayerWeights>,
        final_norm: Norm,
        lm_head: Matrix,
    ) -> Self {
        let mut w = Self {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            lm_head,
            fingerprint: 0,
        };
        w.fingerprint = w.compute_fingerprint();
        w
    }

    /// Checks every shape against `config`.
    pub fn from_parts(
        config: ModelConfig,
        token_embedding: Matrix,
        position_embedding: Matrix,
        layers: Vec<LayerWeights>,
        final_norm: Norm,
        lm_head: Matrix,
    ) -> Result<Self> {
        config.validate()?;
        let (d, f) = (config.model_dim, config.ffn_dim);
        let check = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got == want {
                Ok(())
            } else {
                Err(CmgError::ShapeMismatch(format!(
                    "{name} has shape {got:?}, expected {want:?}"
                )))
            }
        };
        let check_vec = |name: &str, got: usize, want: usize| check(name, (got, 1), (want, 1));
        check("token_embedding", token_embedding.shape(), (config.vocab_size, d))?;
        check(
            "position_embedding",
            position_embedding.shape(),
            (config.max_seq_len, d),
        )?;
        check("lm_head", lm_head.shape(), (d, config.vocab_size))?;
        check_vec("final_norm.gain", final_norm.gain.len(), d)?;
        check_vec("final_norm.bias", final_norm.bias.len(), d)?;
        if layers.len() != config.num_layers {
            return Err(CmgError::ShapeMismatch(format!(
                "{} layers given, config has {}",
                layers.len(),
                config.num_layers
            )));
        }
        for (i, l) in layers.iter().enumerate() {
            for (name, m) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo)] {
                check(&format!("layers.{i}.{name}"), m.shape(), (d, d))?;
            }
            check(&format!("layers.{i}.w1"), l.w1.shape(), (d, f))?;
            check(&format!("layers.{i}.w2"), l.w2.shape(), (f, d))?;
            check_vec(&format!("layers.{i}.b1"), l.b1.len(), f)?;
            check_vec(&format!("layers.{i}.b2"), l.b2.len(), d)?;
            for (name, n) in [("attn_norm", &l.attn_norm), ("ffn_norm", &l.ffn_norm)] {
                check_vec(&format!("layers.{i}.{name}.gain"), n.gain.len(), d)?;
                check_vec(&format!("layers.{i}.{name}.bias"), n.bias.len(), d)?;
            }
        }
        Ok(Self::assemble(
            config,
            token_embedding,
            position_embedding,
            layers,
            final_norm,
            lm_head,
        ))
    }

    pub fn token_embedding(&self) -> &Matrix {
        &self.token_embedding
    }

    pub fn position_embedding(&self) -> &Matrix {
        &self.position_embedding
    }

    pub fn layers(&self) -> &[LayerWeights] {
        &self.layers
    }

    pub fn final_norm(&self) -> &Norm {
        &self.final_norm
    }

    pub fn lm_head(&self) -> &Matrix {
        &self.lm_head
    }

    /// Decomposes into parts, e.g. to edit and reassemble with
    /// [`ModelWeights::from_parts`].
    pub fn into_parts(self) -> (ModelConfig, Matrix, Matrix, Vec<LayerWeights>, Norm, Matrix) {
        (
            self.config,
            self.token_embedding,
            self.position_embedding,
            self.layers,
            self.final_norm,
            self.lm_head,
        )
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// FNV-1a over the config and every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        self.fingerprint
    }

    fn compute_fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(serde_json::to_string(&self.config).unwrap_or_default().as_bytes());
        for t in self.named_tensors() {
            feed(t.name.as_bytes());
            for v in &t.data {
                feed(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Parameters as named tensors, in a fixed order.
    pub fn named_tensors(&self) -> Vec<Tensor> {
        let m = |name: String, m: &Matrix| Tensor::new(name, vec![m.rows(), m.cols()], m.as_slice().to_vec());
        let v = |name: String, v: &[f32]| Tensor::new(name, vec![v.len()], v.to_vec());
        let mut out = vec![
            m("token_embedding".into(), &self.token_embedding),
            m("position_embedding".into(), &self.position_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(v(format!("layers.{i}.attn_norm.gain"), &l.attn_norm.gain));
            out.push(v(format!("layers.{i}.attn_norm.bias"), &l.attn_norm.bias));
            out.push(m(format!("layers.{i}.wq"), &l.wq));
            out.push(m(format!("layers.{i}.wk"), &l.wk));
            out.push(m(format!("layers.{i}.wv"), &l.wv));
            out.push(m(format!("layers.{i}.wo"), &l.wo));
            out.push(v(format!("layers.{i}.ffn_norm.gain"), &l.ffn_norm.gain));
            out.push(v(format!("layers.{i}.ffn_norm.bias"), &l.ffn_norm.bias));
            out.push(m(format!("layers.{i}.w1"), &l.w1));
            out.push(v(format!("layers.{i}.b1"), &l.b1));
            out.push(m(format!("layers.{i}.w2"), &l.w2));
            out.push(v(format!("layers.{i}.b2"), &l.b2));
        }
        out.push(v("final_norm.gain".into(), &self.final_norm.gain));
        out.push(v("final_norm.bias".into(), &self.final_norm.bias));
        out.push(m("lm_head".into(), &self.lm_head));
        out
    }

    /// Weights file: config under `metadata.config`, parameters as tensors.
    pub fn to_container(&self, name: &str) -> TraceContainer {
        TraceContainer {
            metadata: serde_json::json!({
                "kind": "weights",
                "name": name,
                "config": self.config,
            }),
            layout: None,
            tensors: self.named_tensors(),
        }
    }

    /// Loads handcrafted or saved weights, checking every shape against the
    /// embedded config.
    pub fn from_container(container: &TraceContainer) -> Result<Self> {
        let config: ModelConfig = container
            .metadata
            .get("config")
            .cloned()
            .ok_or_else(|| CmgError::InvalidConfig("weights file has no config".into()))
            .and_then(|v| serde_json::from_value(v).map_err(|e| CmgError::InvalidConfig(e.to_string())))?;
        config.validate()?;
        let fetch = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let t = container
                .tensor(name)
                .ok_or_else(|| CmgError::ShapeMismatch(format!("missing tensor {name}")))?;
            if t.shape != shape {
                return Err(CmgError::ShapeMismatch(format!(
                    "{name} has shape {:?}, expected {:?}",
                    t.shape, shape
                )));
            }
            Ok(t.data.clone())
        };
        let mat = |name: &str, r: usize, c: usize| fetch(name, &[r, c]).and_then(|d| Matrix::new(r, c, d));
        let d = config.model_dim;
        let f = config.ffn_dim;
        let norm = |prefix: &str| -> Result<Norm> {
            Ok(Norm {
                gain: fetch(&format!("{prefix}.gain"), &[d])?,
                bias: fetch(&format!("{prefix}.bias"), &[d])?,
            })
        };
        let mut layers = Vec::with_capacity(config.num_layers);
        for i in 0..config.num_layers {
            let p = format!("layers.{i}");
            layers.push(LayerWeights {
                attn_norm: norm(&format!("{p}.attn_norm"))?,
                wq: mat(&format!("{p}.wq"), d, d)?,
                wk: mat(&format!("{p}.wk"), d, d)?,
                wv: mat(&format!("{p}.wv"), d, d)?,
                wo: mat(&format!("{p}.wo"), d, d)?,
                ffn_norm: norm(&format!("{p}.ffn_norm"))?,
                w1: mat(&format!("{p}.w1"), d, f)?,
                b1: fetch(&format!("{p}.b1"), &[f])?,
                w2: mat(&format!("{p}.w2"), f, d)?,
                b2: fetch(&format!("{p}.b2"), &[d])?,
            });
        }
        Ok(Self::assemble(
            config.clone(),
            mat("token_embedding", config.vocab_size, d)?,
            mat("position_embedding", config.max_seq_len, d)?,
            layers,
            norm("final_norm")?,
            mat("lm_head", d, config.vocab_size)?,
        ))
    }

    /// Final norm and output head applied to one residual vector.
    pub fn readout(&self, hidden: &[f32]) -> Vec<f32> {
        let h = self.final_norm.apply(self.config.norm, self.config.norm_eps, hidden);
        vec_mat(&h, &self.lm_head)
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        for &t in tokens {
            if t as usize >= self.config.vocab_size {
                return Err(CmgError::TokenOutOfRange {
                    token: t,
                    vocab_size: self.config.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn check_plan(&self, plan: Option<&MaskPlan<'_>>) -> Result<()> {
        if let Some(plan) = plan {
            if let Some(&bad) = plan.layers.iter().find(|&&l| l >= self.config.num_layers) {
                return Err(CmgError::InvalidParams(format!(
                    "mask plan names layer {bad} but the model has {}",
                    self.config.num_layers
                )));
            }
        }
        Ok(())
    }

    /// Full forward pass over `tokens` with no cache reuse.
    pub fn forward(
        &self,
        tokens: &[u32],
        layout: &ModalityLayout,
        plan: Option<&MaskPlan<'_>>,
    ) -> Result<ForwardTrace> {
        self.prefill(tokens, layout, plan, TraceOptions::default(), PassKind::Expert)
            .map(|(trace, _)| trace)
    }

    /// Full forward pass that also returns the populated cache.
    pub fn prefill(
        &self,
        tokens: &[u32],
        layout: &ModalityLayout,
        plan: Option<&MaskPlan<'_>>,
        options: TraceOptions,
        pass: PassKind,
    ) -> Result<(ForwardTrace, DecodeCache)> {
        layout.check_token_count(tokens.len())?;
        let mut cache = DecodeCache::new(self, pass, layout.clone());
        let out = self.run_chunk(tokens, &mut cache, plan, options)?;
        let seq = tokens.len();
        let pad = |rows: Vec<Vec<f32>>, fill: f32| {
            let mut m = Matrix::from_fn(seq, seq, |_, _| fill);
            for (q, row) in rows.into_iter().enumerate() {
                m.row_mut(q)[..row.len()].copy_from_slice(&row);
            }
            m
        };
        let attention = out
            .attention
            .into_iter()
            .map(|heads| heads.into_iter().map(|rows| pad(rows, 0.0)).collect())
            .collect();
        let raw_scores = out.raw.map(|layers| {
            layers
                .into_iter()
                .map(|heads| heads.into_iter().map(|rows| pad(rows, f32::NEG_INFINITY)).collect())
                .collect()
        });
        let trace = ForwardTrace {
            layout: layout.clone(),
            tokens: tokens.to_vec(),
            hidden_in: out.hidden_in,
            hidden_out: out.hidden_out,
            attention,
            raw_scores,
            logits: Some(out.logits),
            mask: out.mask,
        };
        Ok((trace, cache))
    }

    /// Appends one generated token and returns its next-token logits.
    ///
    /// The mask plan must follow the same discipline the cache was built
    /// with; the result then equals a full forward over the extended
    /// sequence.
    pub fn forward_step(
        &self,
        next_token: u32,
        cache: &mut DecodeCache,
        plan: Option<&MaskPlan<'_>>,
    ) -> Result<StepOutput> {
        if cache.fingerprint != self.fingerprint {
            return Err(CmgError::CacheMismatch("cache was built with different weights".into()));
        }
        if cache.len() != cache.layout.len() {
            return Err(CmgError::CacheMismatch("cache has no prefill".into()));
        }
        cache.layout.push_generated();
        let out = match self.run_chunk(&[next_token], cache, plan, TraceOptions::default()) {
            Ok(out) => out,
            Err(e) => {
                cache.layout = cache.layout.with_generated(cache.layout.generated_len() - 1);
                return Err(e);
            }
        };
        Ok(StepOutput {
            logits: out.logits.row(0).to_vec(),
            attention: out
                .attention
                .into_iter()
                .map(|heads| heads.into_iter().map(|mut rows| rows.remove(0)).collect())
                .collect(),
            hidden_in: out.hidden_in.iter().map(|m| m.row(0).to_vec()).collect(),
            hidden_out: out.hidden_out.iter().map(|m| m.row(0).to_vec()).collect(),
            mask: out.mask,
        })
    }

    /// Pushes `tokens` through every block. `cache.layout` must already
    /// cover the new positions; `cache.tokens` is extended here.
    fn run_chunk(
        &self,
        tokens: &[u32],
        cache: &mut DecodeCache,
        plan: Option<&MaskPlan<'_>>,
        options: TraceOptions,
    ) -> Result<ChunkOutput> {
        let c = &self.config;
        self.check_tokens(tokens)?;
        self.check_plan(plan)?;
        let start = cache.len();
        let total = start + tokens.len();
        if total > c.max_seq_len {
            return Err(CmgError::SequenceTooLong {
                len: total,
                max: c.max_seq_len,
            });
        }
        if cache.layout.len() != total {
            return Err(CmgError::InvalidLayout(format!(
                "layout covers {} positions, cache would hold {total}",
                cache.layout.len()
            )));
        }
        let layout = cache.layout.clone();
        let d = c.model_dim;
        let hd = c.head_dim;
        let scale = 1.0 / (hd as f32).sqrt();

        let mut x = Matrix::zeros(0, d);
        for (i, &t) in tokens.iter().enumerate() {
            let row: Vec<f32> = self
                .token_embedding
                .row(t as usize)
                .iter()
                .zip(self.position_embedding.row(start + i))
                .map(|(a, b)| a + b)
                .collect();
            x.push_row(&row);
        }

        let mut hidden_in = Vec::with_capacity(c.num_layers);
        let mut hidden_out = Vec::with_capacity(c.num_layers);
        let mut attention = Vec::with_capacity(c.num_layers);
        let mut raw_all = options.record_raw_scores.then(Vec::new);
        let mut mask = GuidanceMask {
            gamma: plan.and_then(|p| p.masker.gamma()),
            n0: plan.and_then(|p| p.n0),
            rows: Vec::new(),
        };
        let mut budget_left = plan.and_then(|p| p.n0);

        for (li, lw) in self.layers.iter().enumerate() {
            hidden_in.push(x.clone());
            let mut queries = Vec::with_capacity(tokens.len());
            for r in 0..tokens.len() {
                let h = lw.attn_norm.apply(c.norm, c.norm_eps, x.row(r));
                queries.push(vec_mat(&h, &lw.wq));
                cache.keys[li].push_row(&vec_mat(&h, &lw.wk));
                cache.values[li].push_row(&vec_mat(&h, &lw.wv));
            }
            let keys = &cache.keys[li];
            let values = &cache.values[li];

            // raw[head][row][key], keys 0..=query
            let raw: Vec<Vec<Vec<f32>>> = (0..c.num_heads)
                .map(|h| {
                    let cols = h * hd..(h + 1) * hd;
                    (0..tokens.len())
                        .map(|r| {
                            let q = &queries[r][cols.clone()];
                            (0..=start + r)
                                .map(|k| dot(q, &keys.row(k)[cols.clone()]) * scale)
                                .collect()
                        })
                        .collect()
                })
                .collect();

            let dropped = match plan.filter(|p| p.masks_layer(li)) {
                Some(plan) => {
                    let (rows, drops) = self.layer_drops(li, start, &raw, &layout, plan, &mut budget_left)?;
                    mask.rows.extend(rows);
                    Some(drops)
                }
                None => None,
            };
            let empty_rows = plan.map(|p| p.empty_rows).unwrap_or_default();

            let mut attn_out = Matrix::zeros(tokens.len(), d);
            let mut layer_weights = Vec::with_capacity(c.num_heads);
            for (h, head_raw) in raw.iter().enumerate() {
                let cols = h * hd..(h + 1) * hd;
                let mut head_weights = Vec::with_capacity(tokens.len());
                for (r, scores) in head_raw.iter().enumerate() {
                    let query = start + r;
                    let mut keep = vec![true; query + 1];
                    if let Some(drops) = &dropped {
                        for &k in &drops[h][r] {
                            keep[k] = false;
                        }
                    }
                    let mut w = match softmax_where(scores, &keep) {
                        Ok(w) => w,
                        Err(_) if empty_rows == EmptyRowPolicy::ZeroOutput => vec![0.0; query + 1],
                        Err(_) => {
                            return Err(CmgError::EmptyAttentionRow {
                                layer: li,
                                head: h,
                                query,
                            })
                        }
                    };
                    let out = &mut attn_out.row_mut(r)[cols.clone()];
                    for (k, wk) in w.iter().enumerate() {
                        if *wk == 0.0 {
                            continue;
                        }
                        for (o, v) in out.iter_mut().zip(&values.row(k)[cols.clone()]) {
                            *o += wk * v;
                        }
                    }
                    w.resize(total, 0.0);
                    head_weights.push(w);
                }
                layer_weights.push(head_weights);
            }
            attention.push(layer_weights);
            if let Some(all) = raw_all.as_mut() {
                all.push(raw);
            }

            for r in 0..tokens.len() {
                let o = vec_mat(attn_out.row(r), &lw.wo);
                for (xv, ov) in x.row_mut(r).iter_mut().zip(&o) {
                    *xv += ov;
                }
                let h = lw.ffn_norm.apply(c.norm, c.norm_eps, x.row(r));
                let mut f = vec_mat(&h, &lw.w1);
                for (fv, b) in f.iter_mut().zip(&lw.b1) {
                    *fv = gelu(*fv + b);
                }
                let f = vec_mat(&f, &lw.w2);
                for ((xv, fv), b) in x.row_mut(r).iter_mut().zip(&f).zip(&lw.b2) {
                    *xv += fv + b;
                }
            }
            hidden_out.push(x.clone());
        }

        let mut logits = Matrix::zeros(0, c.vocab_size);
        for r in 0..tokens.len() {
            logits.push_row(&self.readout(x.row(r)));
        }
        cache.tokens.extend_from_slice(tokens);
        Ok(ChunkOutput {
            hidden_in,
            hidden_out,
            attention,
            raw: raw_all,
            logits,
            mask,
        })
    }

    /// Asks the masker for every (head, row) of one layer, enforces the
    /// region restriction and applies the remaining `n0` budget.
    fn layer_drops(
        &self,
        layer: usize,
        start: usize,
        raw: &[Vec<Vec<f32>>],
        layout: &ModalityLayout,
        plan: &MaskPlan<'_>,
        budget_left: &mut Option<usize>,
    ) -> Result<LayerDrops> {
        let mut proposed = Vec::new();
        let mut candidates = Vec::new();
        for (h, head_raw) in raw.iter().enumerate() {
            for (r, scores) in head_raw.iter().enumerate() {
                let query = start + r;
                let allowed: BTreeSet<usize> = visual_candidates(query, layout).into_iter().collect();
                let ctx = RowContext {
                    layer,
                    head: h,
                    query,
                    raw_scores: scores,
                    layout,
                };
                let mut keys = plan.masker.dropped_keys(&ctx);
                keys.sort_unstable();
                keys.dedup();
                if let Some(&bad) = keys.iter().find(|k| !allowed.contains(k)) {
                    return Err(CmgError::InvalidParams(format!(
                        "mask drops key {bad} from row {query} (layer {layer}, head {h}) outside the visual-related regions"
                    )));
                }
                for k in keys {
                    proposed.push((h, r, k, scores[k]));
                }
                candidates.push((h, r, allowed.len()));
            }
        }
        if let Some(left) = budget_left.as_mut() {
            truncate_to_budget(&mut proposed, *left);
            *left -= proposed.len();
        }
        let mut drops = vec![vec![Vec::new(); raw.first().map_or(0, Vec::len)]; raw.len()];
        for (h, r, k, _) in proposed {
            drops[h][r].push(k);
        }
        let mut rows = Vec::with_capacity(candidates.len());
        for (h, r, n) in candidates {
            drops[h][r].sort_unstable();
            rows.push(MaskRow {
                layer,
                head: h,
                query: start + r,
                candidates: n,
                dropped: drops[h][r].clone(),
            });
        }
        Ok((rows, drops))
    }
}
