//! Small seeded instances of each differentiable component, for
//! finite-difference verification.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::cross::{cross_modal_attention_graph, init_cross_attention};
use super::lm::{init_lm, lm_logits, LmRun, Segment, ToyLMConfig};
use super::loss::{ce_from_logits, kl_from_logits, DistillConfig};
use crate::affect_context::{self, AdapterConfig, AffectConfig};
use crate::error::Result;
use crate::features::{FeatureMatrix, FeatureScale};
use crate::gradcheck::{check_component, ComponentReport, GradCheckConfig, GradComponent};
use crate::nn::{self, LowRankSites, PartialAdapterConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Mat, Var};

type LossFn = Box<dyn Fn(&ParamStore) -> Result<(Graph, Var)>>;

/// A named parameter set with a loss closure.
pub struct Instance {
    name: String,
    store: ParamStore,
    loss: LossFn,
}

impl GradComponent for Instance {
    fn name(&self) -> &str {
        &self.name
    }

    fn params(&self) -> &ParamStore {
        &self.store
    }

    fn loss(&self, store: &ParamStore) -> Result<(Graph, Var)> {
        (self.loss)(store)
    }
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_shape_fn((rows, cols), |_| rng.gen_range(-1.0..1.0))
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output entry matters.
fn probe(g: &mut Graph, out: Var, r: &Mat) -> Result<Var> {
    let p = g.mul_const(out, r.clone())?;
    Ok(g.sum(p))
}

/// Randomize every tensor (zero-initialized ones included) so no
/// gradient path is trivially inert.
fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for n in names {
        let m = store.get_mut(&n).expect("listed");
        m.mapv_inplace(|v| v + scale * rng.gen_range(-1.0..1.0));
    }
}

fn affect_cfg() -> AffectConfig {
    AffectConfig {
        in_dim: 5,
        model_dim: 8,
        n_heads: 2,
        max_frames: 8,
        max_turns: 4,
        encoder_depth: 0,
        encoder_trainable: true,
        adapter: AdapterConfig {
            kernel_sizes: vec![5, 5],
            stride: 2,
            padding: 2,
            total_factor: 4,
            hidden_dim: 6,
            out_dim: 8,
        },
    }
}

fn intra(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = affect_cfg();
    let mut store = ParamStore::new(seed);
    affect_context::init_params(&mut store, &cfg);
    jitter(&mut store, &mut rng, 0.1);
    let frames = FeatureMatrix::new(random(&mut rng, 6, 5), 25.0, FeatureScale::Log).unwrap();
    let r = random(&mut rng, 6, 8);
    Instance {
        name: "intra_turn_attention".into(),
        store,
        loss: Box::new(move |s| {
            let mut g = Graph::new();
            let out = affect_context::intra_turn_attention(&mut g, s, &cfg, &frames)?;
            let l = probe(&mut g, out, &r)?;
            Ok((g, l))
        }),
    }
}

fn inter(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = affect_cfg();
    let mut store = ParamStore::new(seed);
    affect_context::init_params(&mut store, &cfg);
    jitter(&mut store, &mut rng, 0.1);
    let turns = [random(&mut rng, 2, 8), random(&mut rng, 3, 8)];
    let r = random(&mut rng, 5, 8);
    Instance {
        name: "inter_turn_attention".into(),
        store,
        loss: Box::new(move |s| {
            let mut g = Graph::new();
            let vars: Vec<Var> = turns.iter().map(|t| g.constant(t.clone())).collect();
            let (hist, bounds) = affect_context::concat_history_graph(&mut g, &vars)?;
            let out = affect_context::inter_turn_attention(&mut g, s, &cfg, hist, &bounds)?;
            let l = probe(&mut g, out, &r)?;
            Ok((g, l))
        }),
    }
}

fn adapter(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = affect_cfg();
    let mut store = ParamStore::new(seed);
    affect_context::init_params(&mut store, &cfg);
    jitter(&mut store, &mut rng, 0.1);
    let x = random(&mut rng, 6, 8);
    let r = random(&mut rng, cfg.adapter.output_len(6), 8);
    Instance {
        name: "modality_adapter".into(),
        store,
        loss: Box::new(move |s| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let out = affect_context::modality_adapter(&mut g, s, &cfg.adapter, xv)?;
            let l = probe(&mut g, out, &r)?;
            Ok((g, l))
        }),
    }
}

fn cross(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new(seed);
    init_cross_attention(&mut store, 8);
    jitter(&mut store, &mut rng, 0.1);
    let speech = random(&mut rng, 4, 8);
    let text = random(&mut rng, 6, 8);
    let r = random(&mut rng, 4, 8);
    Instance {
        name: "cross_modal_attention".into(),
        store,
        loss: Box::new(move |s| {
            let mut g = Graph::new();
            let sp = g.constant(speech.clone());
            let tx = g.constant(text.clone());
            let out = cross_modal_attention_graph(&mut g, s, sp, tx, 2)?;
            let l = probe(&mut g, out.fused, &r)?;
            Ok((g, l))
        }),
    }
}

fn plora(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = PartialAdapterConfig {
        rank: 3,
        alpha: 6.0,
        dropout: 0.0,
    };
    let mut store = ParamStore::new(seed);
    nn::init_linear(&mut store, "proj", 8, 8);
    nn::init_low_rank(&mut store, "proj", 8, 8, &cfg);
    jitter(&mut store, &mut rng, 0.1);
    let x = random(&mut rng, 6, 8);
    let r = random(&mut rng, 6, 8);
    let mask = vec![true, false, true, true, false, true];
    Instance {
        name: "partial_low_rank".into(),
        store,
        loss: Box::new(move |s| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let sites = LowRankSites {
                mask: &mask,
                config: cfg,
                dropout_seed: None,
            };
            let out = nn::partial_low_rank(&mut g, s, "proj", xv, &sites)?;
            let l = probe(&mut g, out, &r)?;
            Ok((g, l))
        }),
    }
}

fn tiny_lm() -> ToyLMConfig {
    ToyLMConfig {
        vocab_size: 8,
        model_dim: 8,
        n_layers: 1,
        n_heads: 2,
        max_len: 6,
        seed: 0,
    }
}

fn lm_store(seed: u64, rng: &mut ChaCha8Rng, adapter: &PartialAdapterConfig) -> ParamStore {
    let mut store = ParamStore::new(seed);
    init_lm(&mut store, &tiny_lm(), adapter);
    store.init_uniform("speech_rows", 2, 8);
    jitter(&mut store, rng, 0.1);
    store
}

/// Tokens, two trainable embedding rows on the speech path, then tokens.
fn speech_logits(g: &mut Graph, s: &ParamStore, adapter: PartialAdapterConfig) -> Result<Var> {
    let emb = g.param(s, "speech_rows")?;
    let segs = [
        Segment::Tokens(vec![1, 4]),
        Segment::Embeddings(emb),
        Segment::Tokens(vec![2, 7]),
    ];
    lm_logits(g, s, &tiny_lm(), &segs, &LmRun::speech(adapter))
}

fn ce(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapter = PartialAdapterConfig {
        rank: 2,
        alpha: 4.0,
        dropout: 0.0,
    };
    let store = lm_store(seed, &mut rng, &adapter);
    Instance {
        name: "ce_loss".into(),
        store,
        loss: Box::new(move |s| {
            let mut g = Graph::new();
            let logits = speech_logits(&mut g, s, adapter)?;
            let l = ce_from_logits(&mut g, logits, &[3, 4, 5], &[2, 7, 0])?;
            Ok((g, l))
        }),
    }
}

fn kl(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let adapter = PartialAdapterConfig {
        rank: 2,
        alpha: 4.0,
        dropout: 0.0,
    };
    let store = lm_store(seed, &mut rng, &adapter);
    let teacher = random(&mut rng, 5, 8) * 2.0;
    Instance {
        name: "kl_distill_loss".into(),
        store,
        loss: Box::new(move |s| {
            let mut g = Graph::new();
            let logits = speech_logits(&mut g, s, adapter)?;
            let l = kl_from_logits(
                &mut g,
                logits,
                &[3, 4, 5],
                &teacher,
                &[2, 3, 4],
                &DistillConfig::default(),
            )?;
            Ok((g, l))
        }),
    }
}

/// Every checked component, seeded.
pub fn suite(seed: u64) -> Vec<Instance> {
    vec![
        intra(seed),
        inter(seed.wrapping_add(1)),
        adapter(seed.wrapping_add(2)),
        cross(seed.wrapping_add(3)),
        plora(seed.wrapping_add(4)),
        ce(seed.wrapping_add(5)),
        kl(seed.wrapping_add(6)),
    ]
}

pub fn run_suite(seed: u64, cfg: &GradCheckConfig) -> Result<Vec<ComponentReport>> {
    suite(seed)
        .iter()
        .map(|c| check_component(c, cfg))
        .collect()
}
