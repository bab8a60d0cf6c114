//! Layer building blocks shared by the affect encoder and the language
//! model: linear maps, layer norm, multi-head attention, feed-forward and
//! pre-norm transformer blocks.
//!
//! Parameters are addressed by dotted names under a caller-chosen prefix,
//! e.g. `lm.0.attn.q.w`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{Graph, Mat, Var};

pub fn init_linear(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) {
    store.init_uniform(&format!("{name}.w"), d_in, d_out);
    store.init_zeros(&format!("{name}.b"), 1, d_out);
}

/// `x·W + b`
pub fn linear(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = g.param(store, &format!("{name}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn init_layer_norm(store: &mut ParamStore, name: &str, dim: usize) {
    store.init_ones(&format!("{name}.gamma"), 1, dim);
    store.init_zeros(&format!("{name}.beta"), 1, dim);
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, name: &str, x: Var) -> Result<Var> {
    let gamma = g.param(store, &format!("{name}.gamma"))?;
    let beta = g.param(store, &format!("{name}.beta"))?;
    let n = g.normalize_rows(x);
    let y = g.mul_row(n, gamma)?;
    g.add_row(y, beta)
}

/// Low-rank adapter hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PartialAdapterConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for PartialAdapterConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 16.0,
            dropout: 0.1,
        }
    }
}

impl PartialAdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::InvalidArgument("adapter rank must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!(
                "adapter dropout {} not in [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Where and how low-rank deltas apply during one forward pass.
#[derive(Debug, Clone)]
pub struct LowRankSites<'a> {
    pub mask: &'a [bool],
    pub config: PartialAdapterConfig,
    /// `Some(seed)` enables dropout on the adapter input.
    pub dropout_seed: Option<u64>,
}

/// Initialize the pair `name.lora_a` (d_in×r, uniform) and `name.lora_b`
/// (r×d_out, zeros).
pub fn init_low_rank(
    store: &mut ParamStore,
    name: &str,
    d_in: usize,
    d_out: usize,
    cfg: &PartialAdapterConfig,
) {
    store.init_uniform(&format!("{name}.lora_a"), d_in, cfg.rank);
    store.init_zeros(&format!("{name}.lora_b"), cfg.rank, d_out);
}

fn dropout_mask(rows: usize, cols: usize, p: f64, seed: u64) -> Mat {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let keep = 1.0 / (1.0 - p);
    Mat::from_shape_fn(
        (rows, cols),
        |_| if rng.gen::<f64>() < p { 0.0 } else { keep },
    )
}

fn site_seed(seed: u64, name: &str) -> u64 {
    name.bytes().fold(seed ^ 0x9e37_79b9_7f4a_7c15, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Base projection everywhere, plus `(alpha/r)·dropout(x)·A·B` on rows
/// where the mask is set. Unmasked rows are copied from the base
/// projection untouched.
pub fn partial_low_rank(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    sites: &LowRankSites<'_>,
) -> Result<Var> {
    let (rows, d_in) = g.shape(x);
    if sites.mask.len() != rows {
        return Err(Error::Shape(format!(
            "adapter mask length {} vs {rows} positions",
            sites.mask.len()
        )));
    }
    let base = linear(g, store, name, x)?;
    let active: Vec<usize> = (0..rows).filter(|&i| sites.mask[i]).collect();
    if active.is_empty() {
        return Ok(base);
    }
    let a = g.param(store, &format!("{name}.lora_a"))?;
    let b = g.param(store, &format!("{name}.lora_b"))?;
    let xs = g.gather_rows(x, &active)?;
    let xs = match sites.dropout_seed {
        Some(seed) if sites.config.dropout > 0.0 => {
            let m = dropout_mask(
                active.len(),
                d_in,
                sites.config.dropout,
                site_seed(seed, name),
            );
            g.mul_const(xs, m)?
        }
        _ => xs,
    };
    let down = g.matmul(xs, a)?;
    let up = g.matmul(down, b)?;
    let delta = g.scale(up, sites.config.scaling());
    let base_active = g.gather_rows(base, &active)?;
    let adapted = g.add(base_active, delta)?;
    let stacked = g.concat_rows(&[base, adapted])?;
    let mut next = rows;
    let index: Vec<usize> = (0..rows)
        .map(|i| {
            if sites.mask[i] {
                next += 1;
                next - 1
            } else {
                i
            }
        })
        .collect();
    g.gather_rows(stacked, &index)
}

fn project(
    g: &mut Graph,
    store: &ParamStore,
    name: &str,
    x: Var,
    sites: Option<&LowRankSites<'_>>,
) -> Result<Var> {
    match sites {
        Some(s) => partial_low_rank(g, store, name, x, s),
        None => linear(g, store, name, x),
    }
}

pub fn init_attention(store: &mut ParamStore, prefix: &str, dim: usize) {
    for p in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{p}"), dim, dim);
    }
}

pub struct AttentionOutput {
    /// After the output projection.
    pub out: Var,
    /// Concatenated per-head readouts, before the output projection.
    pub readout: Var,
    /// One `Lq×Lk` row-stochastic matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product multi-head attention. `query` supplies Q; `context`
/// supplies K and V. An optional additive mask (`Lq×Lk`, 0 or -inf) is
/// applied to the scores. Low-rank sites, if given, apply to the
/// projections of `query` rows and must cover the query length; they are
/// only meaningful for self-attention.
pub fn attention(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    query: Var,
    context: Var,
    n_heads: usize,
    mask: Option<&Mat>,
    sites: Option<&LowRankSites<'_>>,
) -> Result<AttentionOutput> {
    let (lq, d) = g.shape(query);
    let (lk, dk) = g.shape(context);
    if d != dk {
        return Err(Error::Shape(format!("attention dims {d} vs {dk}")));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::Shape(format!(
            "dim {d} not divisible by {n_heads} heads"
        )));
    }
    if let Some(m) = mask {
        if m.dim() != (lq, lk) {
            return Err(Error::Shape("attention mask shape".into()));
        }
    }
    if sites.is_some() && query != context {
        return Err(Error::InvalidArgument(
            "low-rank sites need self-attention".into(),
        ));
    }
    let hd = d / n_heads;
    let q = project(g, store, &format!("{prefix}.q"), query, sites)?;
    let k = project(g, store, &format!("{prefix}.k"), context, sites)?;
    let v = project(g, store, &format!("{prefix}.v"), context, sites)?;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            (
                g.slice_cols(q, lo, hi)?,
                g.slice_cols(k, lo, hi)?,
                g.slice_cols(v, lo, hi)?,
            )
        };
        let scores = g.matmul_t(qh, kh)?;
        let scores = g.scale(scores, scale);
        let scores = match mask {
            Some(m) => g.add_const(scores, m)?,
            None => scores,
        };
        let w = g.softmax_rows(scores);
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let readout = if n_heads == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    let out = project(g, store, &format!("{prefix}.o"), readout, sites)?;
    Ok(AttentionOutput {
        out,
        readout,
        weights,
    })
}

/// Additive mask hiding future positions.
pub fn causal_mask(len: usize) -> Mat {
    Mat::from_shape_fn(
        (len, len),
        |(i, j)| {
            if j > i {
                f64::NEG_INFINITY
            } else {
                0.0
            }
        },
    )
}

pub fn init_block(store: &mut ParamStore, prefix: &str, dim: usize) {
    init_layer_norm(store, &format!("{prefix}.ln1"), dim);
    init_attention(store, &format!("{prefix}.attn"), dim);
    init_layer_norm(store, &format!("{prefix}.ln2"), dim);
    init_linear(store, &format!("{prefix}.ff1"), dim, 4 * dim);
    init_linear(store, &format!("{prefix}.ff2"), 4 * dim, dim);
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
pub fn block(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    n_heads: usize,
    mask: Option<&Mat>,
    sites: Option<&LowRankSites<'_>>,
) -> Result<Var> {
    let h = layer_norm(g, store, &format!("{prefix}.ln1"), x)?;
    let a = attention(
        g,
        store,
        &format!("{prefix}.attn"),
        h,
        h,
        n_heads,
        mask,
        sites,
    )?;
    let x = g.add(x, a.out)?;
    let h = layer_norm(g, store, &format!("{prefix}.ln2"), x)?;
    let h = linear(g, store, &format!("{prefix}.ff1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, store, &format!("{prefix}.ff2"), h)?;
    g.add(x, h)
}
