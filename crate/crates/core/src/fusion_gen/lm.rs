//! Byte-level causal decoder with a text path and a speech path.
//!
//! The speech path marks rows that come from fused speech embeddings;
//! only those rows receive the low-rank deltas on the attention
//! projections. The text path never touches the deltas.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LowRankSites, PartialAdapterConfig};
use crate::params::ParamStore;
use crate::tensor::{softmax_rows, Graph, Mat, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyLMConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ToyLMConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            model_dim: 64,
            n_layers: 2,
            n_heads: 4,
            max_len: 512,
            seed: 0,
        }
    }
}

impl ToyLMConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::InvalidArgument("vocab_size must be ≥ 2".into()));
        }
        if self.n_heads == 0 || self.model_dim == 0 || !self.model_dim.is_multiple_of(self.n_heads)
        {
            return Err(Error::InvalidArgument(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.n_heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be ≥ 1".into()));
        }
        Ok(())
    }
}

pub const TOKENS: &str = "lm.tok";
pub const POSITIONS: &str = "lm.pos";
pub const HEAD: &str = "lm.head";

fn layer(i: usize) -> String {
    format!("lm.{i}")
}

/// Register the decoder and its low-rank pairs.
pub fn init_lm(store: &mut ParamStore, cfg: &ToyLMConfig, adapter: &PartialAdapterConfig) {
    let d = cfg.model_dim;
    store.init_uniform(TOKENS, cfg.vocab_size, d);
    store.init_uniform_bound(POSITIONS, cfg.max_len, d, 0.02);
    for i in 0..cfg.n_layers {
        let p = layer(i);
        nn::init_block(store, &p, d);
        for proj in ["q", "k", "v", "o"] {
            nn::init_low_rank(store, &format!("{p}.attn.{proj}"), d, d, adapter);
        }
    }
    nn::init_layer_norm(store, "lm.ln_f", d);
    nn::init_linear(store, HEAD, d, cfg.vocab_size);
}

pub fn is_low_rank(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

/// Freeze (or unfreeze) every base decoder tensor, leaving low-rank pairs
/// trainable.
pub fn set_base_trainable(store: &mut ParamStore, trainable: bool) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("lm.") && !is_low_rank(n))
        .map(str::to_string)
        .collect();
    for n in names {
        store.set_trainable(&n, trainable).expect("name from store");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LmPath {
    Text,
    Speech,
}

/// A run of input rows: token ids, or precomputed embeddings already on
/// the tape.
#[derive(Debug, Clone)]
pub enum Segment {
    Tokens(Vec<u32>),
    Embeddings(Var),
}

/// Options shared by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LmRun {
    pub path: LmPath,
    pub adapter: PartialAdapterConfig,
    pub dropout_seed: Option<u64>,
}

impl LmRun {
    pub fn text() -> Self {
        Self {
            path: LmPath::Text,
            adapter: PartialAdapterConfig::default(),
            dropout_seed: None,
        }
    }

    pub fn speech(adapter: PartialAdapterConfig) -> Self {
        Self {
            path: LmPath::Speech,
            adapter,
            dropout_seed: None,
        }
    }
}

/// Logits (`L×V`) for the concatenated segments.
pub fn lm_logits(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &ToyLMConfig,
    segments: &[Segment],
    run: &LmRun,
) -> Result<Var> {
    let table = g.param(store, TOKENS)?;
    let mut rows = Vec::with_capacity(segments.len());
    let mut mask = Vec::new();
    for seg in segments {
        match seg {
            Segment::Tokens(t) if t.is_empty() => continue,
            Segment::Tokens(t) => {
                if let Some(&bad) = t.iter().find(|&&x| x as usize >= cfg.vocab_size) {
                    return Err(Error::InvalidArgument(format!(
                        "token {bad} outside vocabulary of {}",
                        cfg.vocab_size
                    )));
                }
                let ids: Vec<usize> = t.iter().map(|&x| x as usize).collect();
                rows.push(g.gather_rows(table, &ids)?);
                mask.extend(std::iter::repeat_n(false, t.len()));
            }
            Segment::Embeddings(v) => {
                let (n, d) = g.shape(*v);
                if d != cfg.model_dim {
                    return Err(Error::Shape(format!(
                        "embedding dim {d} vs model_dim {}",
                        cfg.model_dim
                    )));
                }
                rows.push(*v);
                mask.extend(std::iter::repeat_n(true, n));
            }
        }
    }
    let len = mask.len();
    if len == 0 {
        return Err(Error::InvalidArgument("empty decoder input".into()));
    }
    if len > cfg.max_len {
        return Err(Error::InvalidArgument(format!(
            "input length {len} exceeds max_len {}",
            cfg.max_len
        )));
    }
    let x = if rows.len() == 1 {
        rows[0]
    } else {
        g.concat_rows(&rows)?
    };
    let pos = g.param(store, POSITIONS)?;
    let pos = g.slice_rows(pos, 0, len)?;
    let mut h = g.add(x, pos)?;
    let causal = nn::causal_mask(len);
    let sites = LowRankSites {
        mask: &mask,
        config: run.adapter,
        dropout_seed: run.dropout_seed,
    };
    let sites = match run.path {
        LmPath::Speech if mask.iter().any(|&m| m) => Some(&sites),
        _ => None,
    };
    for i in 0..cfg.n_layers {
        h = nn::block(g, store, &layer(i), h, cfg.n_heads, Some(&causal), sites)?;
    }
    let h = nn::layer_norm(g, store, "lm.ln_f", h)?;
    nn::linear(g, store, HEAD, h)
}

/// Value-level input segment.
#[derive(Debug, Clone)]
pub enum InputSegment {
    Tokens(Vec<u32>),
    Embeddings(Mat),
}

/// Per-position next-token distributions.
pub fn lm_forward(
    store: &ParamStore,
    cfg: &ToyLMConfig,
    input: &[InputSegment],
    run: &LmRun,
) -> Result<Mat> {
    Ok(softmax_rows(&lm_logit_values(store, cfg, input, run)?))
}

pub fn lm_logit_values(
    store: &ParamStore,
    cfg: &ToyLMConfig,
    input: &[InputSegment],
    run: &LmRun,
) -> Result<Mat> {
    let mut g = Graph::new();
    let segs: Vec<Segment> = input
        .iter()
        .map(|s| match s {
            InputSegment::Tokens(t) => Segment::Tokens(t.clone()),
            InputSegment::Embeddings(m) => Segment::Embeddings(g.constant(m.clone())),
        })
        .collect();
    let logits = lm_logits(&mut g, store, cfg, &segs, run)?;
    Ok(g.value(logits).clone())
}
