//! Prepositive affective modeling over speech features.
//!
//! Each turn's downsampled log-mel frames are projected to the model
//! dimension, given learned absolute positions, and passed through
//! intra-turn self-attention. The turn outputs are concatenated in
//! chronological order, tagged with a learned turn-index embedding, and
//! passed through inter-turn self-attention over the whole history. A small
//! pre-norm transformer stack stands in for the speech encoder, and a
//! three-layer strided convolutional subsampler maps the result into the
//! language model's embedding space.
//!
//! Neither attention level is masked: the full history is observed.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn;
use crate::params::ParamStore;
use crate::tensor::{conv_out_len, Graph, Mat, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Speech,
    Text,
    Fused,
}

/// An `L×d` sequence in a shared latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSequence {
    values: Mat,
    modality: Modality,
    /// Start index of each turn; the first is always 0.
    turn_boundaries: Vec<usize>,
}

impl EmbeddingSequence {
    pub fn new(values: Mat, modality: Modality) -> Result<Self> {
        Self::with_boundaries(values, modality, vec![0])
    }

    pub fn with_boundaries(values: Mat, modality: Modality, bounds: Vec<usize>) -> Result<Self> {
        let len = values.nrows();
        if len == 0 || values.ncols() == 0 {
            return Err(Error::Shape("empty embedding sequence".into()));
        }
        let monotone = bounds.windows(2).all(|w| w[0] < w[1]);
        if bounds.first() != Some(&0) || !monotone || bounds.last().is_some_and(|&b| b >= len) {
            return Err(Error::InvalidArgument(format!(
                "turn boundaries {bounds:?} do not partition length {len}"
            )));
        }
        Ok(Self {
            values,
            modality,
            turn_boundaries: bounds,
        })
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }

    pub fn turn_boundaries(&self) -> &[usize] {
        &self.turn_boundaries
    }

    /// Turn index of every position.
    pub fn turn_ids(&self) -> Vec<usize> {
        let mut ids = Vec::with_capacity(self.len());
        for (t, &start) in self.turn_boundaries.iter().enumerate() {
            let end = self
                .turn_boundaries
                .get(t + 1)
                .copied()
                .unwrap_or(self.len());
            ids.extend(std::iter::repeat_n(t, end - start));
        }
        ids
    }
}

/// Concatenate turn sequences in order, recording each turn's start.
pub fn concat_history(turns: &[EmbeddingSequence]) -> Result<EmbeddingSequence> {
    let first = turns
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty history".into()))?;
    if turns.iter().any(|t| t.dim() != first.dim()) {
        return Err(Error::Shape("turns differ in model dim".into()));
    }
    let views: Vec<_> = turns.iter().map(|t| t.values.view()).collect();
    let values = ndarray::concatenate(ndarray::Axis(0), &views).expect("checked dims");
    let mut bounds = Vec::with_capacity(turns.len());
    let mut start = 0;
    for t in turns {
        bounds.push(start);
        start += t.len();
    }
    EmbeddingSequence::with_boundaries(values, first.modality, bounds)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl AttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || !self.model_dim.is_multiple_of(self.n_heads)
        {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub kernel_sizes: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
    pub total_factor: usize,
    pub hidden_dim: usize,
    pub out_dim: usize,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            kernel_sizes: vec![5, 5, 5],
            stride: 2,
            padding: 2,
            total_factor: 8,
            hidden_dim: 512,
            out_dim: 64,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() || self.kernel_sizes.contains(&0) || self.stride == 0 {
            return Err(Error::InvalidArgument(
                "adapter kernels/stride must be ≥ 1".into(),
            ));
        }
        let product = self.stride.pow(self.kernel_sizes.len() as u32);
        if product != self.total_factor {
            return Err(Error::InvalidArgument(format!(
                "adapter strides multiply to {product}, expected {}",
                self.total_factor
            )));
        }
        Ok(())
    }

    /// Sequence length after every layer.
    pub fn output_len(&self, len: usize) -> usize {
        self.kernel_sizes
            .iter()
            .fold(len, |l, &k| conv_out_len(l, k, self.stride, self.padding))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AffectConfig {
    /// Input feature dimension (mel bins).
    pub in_dim: usize,
    pub model_dim: usize,
    pub n_heads: usize,
    pub max_frames: usize,
    pub max_turns: usize,
    pub encoder_depth: usize,
    pub encoder_trainable: bool,
    pub adapter: AdapterConfig,
}

impl Default for AffectConfig {
    fn default() -> Self {
        Self {
            in_dim: 128,
            model_dim: 64,
            n_heads: 4,
            max_frames: 512,
            max_turns: 32,
            encoder_depth: 2,
            encoder_trainable: true,
            adapter: AdapterConfig::default(),
        }
    }
}

impl AffectConfig {
    pub fn attention(&self, seed: u64) -> AttentionConfig {
        AttentionConfig {
            model_dim: self.model_dim,
            n_heads: self.n_heads,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.attention(0).validate()?;
        self.adapter.validate()?;
        if self.in_dim == 0 || self.max_frames == 0 || self.max_turns == 0 {
            return Err(Error::InvalidArgument("affect dims must be ≥ 1".into()));
        }
        Ok(())
    }
}

pub const INTRA: &str = "affect.intra";
pub const INTER: &str = "affect.inter";

/// Register every affect-stage tensor in `store`.
pub fn init_params(store: &mut ParamStore, cfg: &AffectConfig) {
    let d = cfg.model_dim;
    nn::init_linear(store, "affect.in_proj", cfg.in_dim, d);
    store.init_uniform_bound("affect.pos", cfg.max_frames, d, 0.02);
    nn::init_attention(store, INTRA, d);
    store.init_uniform_bound("affect.turn", cfg.max_turns, d, 0.02);
    nn::init_attention(store, INTER, d);
    for i in 0..cfg.encoder_depth {
        nn::init_block(store, &format!("encoder.{i}"), d);
    }
    if !cfg.encoder_trainable {
        store.set_trainable_prefix("encoder.", false);
    }
    let a = &cfg.adapter;
    let mut c_in = d;
    for (i, &k) in a.kernel_sizes.iter().enumerate() {
        let c_out = if i + 1 == a.kernel_sizes.len() {
            a.out_dim
        } else {
            a.hidden_dim
        };
        nn::init_linear(store, &format!("adapter.conv{i}"), k * c_in, c_out);
        c_in = c_out;
    }
}

/// Multi-head self-attention without a mask. Returns the output and the
/// per-head attention matrices.
pub fn mhsa(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    cfg: &AttentionConfig,
) -> Result<(Var, Vec<Var>)> {
    cfg.validate()?;
    if g.shape(x).1 != cfg.model_dim {
        return Err(Error::Shape(format!(
            "input dim {} vs model_dim {}",
            g.shape(x).1,
            cfg.model_dim
        )));
    }
    let out = nn::attention(g, store, prefix, x, x, cfg.n_heads, None, None)?;
    Ok((out.out, out.weights))
}

/// Value-level self-attention over an [`EmbeddingSequence`].
pub fn mhsa_sequence(
    store: &ParamStore,
    prefix: &str,
    x: &EmbeddingSequence,
    cfg: &AttentionConfig,
) -> Result<(EmbeddingSequence, Vec<Mat>)> {
    let mut g = Graph::new();
    let xv = g.constant(x.values.clone());
    let (out, weights) = mhsa(&mut g, store, prefix, xv, cfg)?;
    let seq = EmbeddingSequence::with_boundaries(
        g.value(out).clone(),
        x.modality,
        x.turn_boundaries.clone(),
    )?;
    Ok((seq, weights.iter().map(|&w| g.value(w).clone()).collect()))
}

/// One turn: project, add positions, self-attend.
pub fn intra_turn_attention(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &AffectConfig,
    frames: &FeatureMatrix,
) -> Result<Var> {
    let t = frames.n_frames();
    if t > cfg.max_frames {
        return Err(Error::InvalidArgument(format!(
            "turn has {t} frames, max {}",
            cfg.max_frames
        )));
    }
    if frames.n_mels() != cfg.in_dim {
        return Err(Error::Shape(format!(
            "feature dim {} vs in_dim {}",
            frames.n_mels(),
            cfg.in_dim
        )));
    }
    let x = g.constant(frames.values().clone());
    let h = nn::linear(g, store, "affect.in_proj", x)?;
    let pos = g.param(store, "affect.pos")?;
    let pos = g.slice_rows(pos, 0, t)?;
    let h = g.add(h, pos)?;
    let (out, _) = mhsa(g, store, INTRA, h, &cfg.attention(0))?;
    Ok(out)
}

/// Concatenate turn outputs on the tape; returns the start of each turn.
pub fn concat_history_graph(g: &mut Graph, turns: &[Var]) -> Result<(Var, Vec<usize>)> {
    if turns.is_empty() {
        return Err(Error::InvalidArgument("empty history".into()));
    }
    let mut bounds = Vec::with_capacity(turns.len());
    let mut start = 0;
    for &t in turns {
        bounds.push(start);
        start += g.shape(t).0;
    }
    Ok((g.concat_rows(turns)?, bounds))
}

/// Add turn-index embeddings, then self-attend across the whole history.
pub fn inter_turn_attention(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &AffectConfig,
    history: Var,
    bounds: &[usize],
) -> Result<Var> {
    let len = g.shape(history).0;
    if bounds.len() > cfg.max_turns {
        return Err(Error::InvalidArgument(format!(
            "{} turns, max {}",
            bounds.len(),
            cfg.max_turns
        )));
    }
    let mut ids = Vec::with_capacity(len);
    for (t, &start) in bounds.iter().enumerate() {
        let end = bounds.get(t + 1).copied().unwrap_or(len);
        ids.extend(std::iter::repeat_n(t, end - start));
    }
    let table = g.param(store, "affect.turn")?;
    let turn_emb = g.gather_rows(table, &ids)?;
    let h = g.add(history, turn_emb)?;
    let (out, _) = mhsa(g, store, INTER, h, &cfg.attention(0))?;
    Ok(out)
}

/// Stand-in speech encoder: `encoder_depth` pre-norm transformer blocks.
/// Depth 0 is the identity.
pub fn speech_encoder(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &AffectConfig,
    x: Var,
) -> Result<Var> {
    (0..cfg.encoder_depth).try_fold(x, |h, i| {
        nn::block(
            g,
            store,
            &format!("encoder.{i}"),
            h,
            cfg.n_heads,
            None,
            None,
        )
    })
}

/// Strided 1-D convolution stack with GELU between layers.
pub fn modality_adapter(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &AdapterConfig,
    x: Var,
) -> Result<Var> {
    let len = g.shape(x).0;
    if len == 0 || cfg.output_len(len) == 0 {
        return Err(Error::SequenceTooShort);
    }
    let n = cfg.kernel_sizes.len();
    let mut h = x;
    for (i, &k) in cfg.kernel_sizes.iter().enumerate() {
        let cols = g.im2col(h, k, cfg.stride, cfg.padding)?;
        h = nn::linear(g, store, &format!("adapter.conv{i}"), cols)?;
        if i + 1 < n {
            h = g.gelu(h);
        }
    }
    Ok(h)
}

/// Downsampled log-mel turns to adapter output on the tape.
pub fn encode_history(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &AffectConfig,
    turns: &[FeatureMatrix],
) -> Result<Var> {
    if turns.is_empty() {
        return Err(Error::InvalidArgument("empty history".into()));
    }
    let intra = turns
        .iter()
        .map(|t| intra_turn_attention(g, store, cfg, t))
        .collect::<Result<Vec<_>>>()?;
    let (hist, bounds) = concat_history_graph(g, &intra)?;
    let inter = inter_turn_attention(g, store, cfg, hist, &bounds)?;
    let enc = speech_encoder(g, store, cfg, inter)?;
    modality_adapter(g, store, &cfg.adapter, enc)
}
