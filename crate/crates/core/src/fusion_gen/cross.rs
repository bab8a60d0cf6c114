//! Speech-guided cross-modal attention and the value-level partial
//! low-rank projection.

use crate::affect_context::{EmbeddingSequence, Modality};
use crate::error::{Error, Result};
use crate::nn::{self, LowRankSites, PartialAdapterConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Mat, Var};

pub const CROSS: &str = "fusion.cross";

pub fn init_cross_attention(store: &mut ParamStore, dim: usize) {
    nn::init_attention(store, CROSS, dim);
}

pub struct CrossOutput {
    /// `E_spch + attention output`.
    pub fused: Var,
    /// Per-head readouts before the output projection, concatenated.
    pub readout: Var,
    pub weights: Vec<Var>,
}

/// Speech rows query the text rows; the result is added back onto the
/// speech rows.
pub fn cross_modal_attention_graph(
    g: &mut Graph,
    store: &ParamStore,
    speech: Var,
    text: Var,
    n_heads: usize,
) -> Result<CrossOutput> {
    let (ls, ds) = g.shape(speech);
    let (lt, dt) = g.shape(text);
    if ds != dt {
        return Err(Error::Shape(format!("speech dim {ds} vs text dim {dt}")));
    }
    if ls == 0 || lt == 0 {
        return Err(Error::InvalidArgument(
            "empty sequence in cross attention".into(),
        ));
    }
    let a = nn::attention(g, store, CROSS, speech, text, n_heads, None, None)?;
    let fused = g.add(speech, a.out)?;
    Ok(CrossOutput {
        fused,
        readout: a.readout,
        weights: a.weights,
    })
}

#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub fused: EmbeddingSequence,
    pub readout: Mat,
    pub weights: Vec<Mat>,
}

pub fn cross_modal_attention(
    store: &ParamStore,
    speech: &EmbeddingSequence,
    text: &EmbeddingSequence,
    n_heads: usize,
) -> Result<CrossAttention> {
    let mut g = Graph::new();
    let s = g.constant(speech.values().clone());
    let t = g.constant(text.values().clone());
    let out = cross_modal_attention_graph(&mut g, store, s, t, n_heads)?;
    Ok(CrossAttention {
        fused: EmbeddingSequence::new(g.value(out.fused).clone(), Modality::Fused)?,
        readout: g.value(out.readout).clone(),
        weights: out.weights.iter().map(|&w| g.value(w).clone()).collect(),
    })
}

/// Apply the projection `name` to every row of `x`, adding the low-rank
/// delta on masked rows. Dropout is off.
pub fn partial_low_rank_forward(
    store: &ParamStore,
    name: &str,
    x: &EmbeddingSequence,
    speech_mask: &[bool],
    config: PartialAdapterConfig,
) -> Result<EmbeddingSequence> {
    let mut g = Graph::new();
    let xv = g.constant(x.values().clone());
    let sites = LowRankSites {
        mask: speech_mask,
        config,
        dropout_seed: None,
    };
    let y = nn::partial_low_rank(&mut g, store, name, xv, &sites)?;
    EmbeddingSequence::with_boundaries(
        g.value(y).clone(),
        x.modality(),
        x.turn_boundaries().to_vec(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax_rows;
    use ndarray::{array, Array2};

    fn seq(v: Mat) -> EmbeddingSequence {
        EmbeddingSequence::new(v, Modality::Speech).unwrap()
    }

    fn identity_store(d: usize) -> ParamStore {
        let mut s = ParamStore::new(0);
        init_cross_attention(&mut s, d);
        for p in ["q", "k", "v", "o"] {
            s.set(&format!("{CROSS}.{p}.w"), Array2::eye(d)).unwrap();
        }
        s
    }

    #[test]
    fn singleton_text_readout_is_the_value_row() {
        let mut s = ParamStore::new(4);
        init_cross_attention(&mut s, 4);
        let speech = seq(Mat::from_shape_fn((3, 4), |(i, j)| {
            (i + 2 * j) as f64 * 0.1
        }));
        let text = seq(array![[0.3, -0.2, 0.5, 1.0]]);
        let out = cross_modal_attention(&s, &speech, &text, 2).unwrap();
        let v = text.values().dot(s.get("fusion.cross.v.w").unwrap())
            + s.get("fusion.cross.v.b").unwrap();
        for r in out.readout.rows() {
            for (a, b) in r.iter().zip(v.row(0).iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        assert_eq!(out.fused.len(), 3);
        assert_eq!(out.fused.modality(), Modality::Fused);
    }

    #[test]
    fn zero_query_gives_mean_of_values() {
        let mut s = identity_store(3);
        s.set("fusion.cross.q.w", Mat::zeros((3, 3))).unwrap();
        let speech = seq(array![[1.0, 2.0, 3.0], [-1.0, 0.0, 4.0]]);
        let text = seq(array![[1.0, 0.0, 0.0], [0.0, 3.0, 0.0], [2.0, 0.0, 6.0]]);
        let out = cross_modal_attention(&s, &speech, &text, 1).unwrap();
        let mean = [1.0, 1.0, 2.0];
        for r in out.readout.rows() {
            for (a, b) in r.iter().zip(mean) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // residual: fused = speech + mean (identity output projection)
        assert!((out.fused.values()[[0, 2]] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn two_by_three_hand_case() {
        let s = identity_store(2);
        let q = array![[1.0, 0.0], [0.0, 2.0]];
        let kv = array![[1.0, 1.0], [0.0, 1.0], [2.0, 0.0]];
        let out = cross_modal_attention(&s, &seq(q.clone()), &seq(kv.clone()), 1).unwrap();
        let mut expect = Mat::zeros((2, 2));
        for i in 0..2 {
            let scores: Vec<f64> = (0..3)
                .map(|j| (q[[i, 0]] * kv[[j, 0]] + q[[i, 1]] * kv[[j, 1]]) / 2f64.sqrt())
                .collect();
            let z: f64 = scores.iter().map(|s| s.exp()).sum();
            for j in 0..3 {
                let w = scores[j].exp() / z;
                expect[[i, 0]] += w * kv[[j, 0]];
                expect[[i, 1]] += w * kv[[j, 1]];
            }
        }
        for (a, b) in out.readout.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let w = softmax_rows(&(q.dot(&kv.t()) / 2f64.sqrt()));
        assert!((&out.weights[0] - &w).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn dim_mismatch() {
        let s = identity_store(2);
        let err = cross_modal_attention(&s, &seq(Mat::zeros((1, 2))), &seq(Mat::zeros((1, 3))), 1);
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    fn plora_store(d: usize, cfg: &PartialAdapterConfig) -> ParamStore {
        let mut s = ParamStore::new(11);
        nn::init_linear(&mut s, "proj", d, d);
        nn::init_low_rank(&mut s, "proj", d, d, cfg);
        s.set(
            "proj.b",
            Mat::from_shape_fn((1, d), |(_, j)| j as f64 * 0.1),
        )
        .unwrap();
        s
    }

    fn base(s: &ParamStore, x: &Mat) -> Mat {
        x.dot(s.get("proj.w").unwrap()) + s.get("proj.b").unwrap()
    }

    #[test]
    fn inert_adapter_is_bitwise_base() {
        let cfg = PartialAdapterConfig {
            rank: 2,
            ..Default::default()
        };
        let mut s = plora_store(4, &cfg);
        let x = Mat::from_shape_fn((5, 4), |(i, j)| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let b = base(&s, &x);
        let y = partial_low_rank_forward(&s, "proj", &seq(x.clone()), &[true; 5], cfg).unwrap();
        assert_eq!(y.values(), &b);
        s.set("proj.lora_b", Mat::from_elem((2, 4), 0.7)).unwrap();
        let y = partial_low_rank_forward(&s, "proj", &seq(x.clone()), &[false; 5], cfg).unwrap();
        assert_eq!(y.values(), &b);
        let mask = [true, false, true, false, false];
        let y = partial_low_rank_forward(&s, "proj", &seq(x.clone()), &mask, cfg).unwrap();
        for i in 0..5 {
            if mask[i] {
                assert_ne!(y.values().row(i), b.row(i));
            } else {
                assert_eq!(y.values().row(i), b.row(i));
            }
        }
        assert!(partial_low_rank_forward(&s, "proj", &seq(x), &[true; 4], cfg).is_err());
    }

    #[test]
    fn full_rank_delta_matches_dense_projection() {
        let d = 4;
        let cfg = PartialAdapterConfig {
            rank: d,
            alpha: 8.0,
            dropout: 0.0,
        };
        let mut s = plora_store(d, &cfg);
        let target = Mat::from_shape_fn((d, d), |(i, j)| ((i * 5 + j * 3) % 7) as f64 * 0.25 - 0.5);
        let delta = &target - s.get("proj.w").unwrap();
        s.set("proj.lora_a", Array2::eye(d)).unwrap();
        s.set("proj.lora_b", delta / cfg.scaling()).unwrap();
        let x = Mat::from_shape_fn((3, d), |(i, j)| (i as f64 + 1.0) * (j as f64 - 1.5));
        let y = partial_low_rank_forward(&s, "proj", &seq(x.clone()), &[true; 3], cfg).unwrap();
        let dense = x.dot(&target) + s.get("proj.b").unwrap();
        for (a, b) in y.values().iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}
