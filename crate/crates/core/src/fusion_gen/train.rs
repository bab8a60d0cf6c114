//! End-to-end model: affect encoder, cross-modal fusion and the decoder,
//! with the joint training step and greedy decoding.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cross::{cross_modal_attention_graph, init_cross_attention};
use super::lm::{
    self, init_lm, lm_logit_values, lm_logits, InputSegment, LmRun, Segment, ToyLMConfig,
};
use super::loss::{ce_from_logits, kl_from_logits, total_loss, DistillConfig, LossReport};
use crate::affect_context::{self, AffectConfig};
use crate::corpus::{render_template, tokenize, turn_features, DialogueHistory, TemplateFormat};
use crate::error::{Error, Result};
use crate::features::{
    downsample_input, FeatureMatrix, FeatureScale, DEFAULT_DOWNSAMPLE, DEFAULT_HOP, DEFAULT_N_MELS,
};
use crate::nn::PartialAdapterConfig;
use crate::optim::{AdamW, AdamWConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Mat, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrontendConfig {
    pub n_mels: usize,
    pub hop: usize,
    pub downsample: usize,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            n_mels: DEFAULT_N_MELS,
            hop: DEFAULT_HOP,
            downsample: DEFAULT_DOWNSAMPLE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub frontend: FrontendConfig,
    pub affect: AffectConfig,
    pub lm: ToyLMConfig,
    pub low_rank: PartialAdapterConfig,
    pub cross_heads: usize,
    pub template: TemplateFormat,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            frontend: FrontendConfig::default(),
            affect: AffectConfig::default(),
            lm: ToyLMConfig::default(),
            low_rank: PartialAdapterConfig::default(),
            cross_heads: 4,
            template: TemplateFormat::Qwen,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.affect.validate()?;
        self.lm.validate()?;
        self.low_rank.validate()?;
        if self.affect.in_dim != self.frontend.n_mels {
            return Err(Error::InvalidArgument(format!(
                "affect in_dim {} vs {} mel bins",
                self.affect.in_dim, self.frontend.n_mels
            )));
        }
        if self.affect.adapter.out_dim != self.lm.model_dim {
            return Err(Error::InvalidArgument(format!(
                "adapter out_dim {} vs decoder model_dim {}",
                self.affect.adapter.out_dim, self.lm.model_dim
            )));
        }
        if self.cross_heads == 0 || !self.lm.model_dim.is_multiple_of(self.cross_heads) {
            return Err(Error::InvalidArgument(
                "cross_heads must divide model_dim".into(),
            ));
        }
        if self.frontend.downsample == 0 {
            return Err(Error::InvalidArgument("downsample must be ≥ 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(config.seed);
        affect_context::init_params(&mut store, &config.affect);
        init_cross_attention(&mut store, config.lm.model_dim);
        init_lm(&mut store, &config.lm, &config.low_rank);
        Ok(Self { config, store })
    }

    /// Write parameters with the model config (and any extra metadata).
    pub fn save(&self, path: &Path, extra: serde_json::Value) -> Result<()> {
        let meta = serde_json::json!({ "model": self.config, "extra": extra });
        self.store.save(path, &meta)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, meta) = ParamStore::load(path)?;
        let config: ModelConfig = serde_json::from_value(
            meta.get("model")
                .cloned()
                .ok_or_else(|| Error::Container("checkpoint lacks a model config".into()))?,
        )?;
        let fresh = Model::new(config.clone())?;
        for name in fresh.store.names() {
            if !store.contains(name) {
                return Err(Error::Container(format!("checkpoint lacks tensor {name}")));
            }
        }
        let extra = meta
            .get("extra")
            .cloned()
            .unwrap_or(serde_json::Value::Null);
        Ok((Self { config, store }, extra))
    }
}

/// A dialogue turned into model inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedDialogue {
    pub dialogue_id: String,
    /// Normalized log-mel, downsampled, one matrix per history turn.
    pub turn_features: Vec<FeatureMatrix>,
    pub system: Vec<u32>,
    pub history: Vec<u32>,
    /// Continuation instruction plus the assistant header.
    pub continuation: Vec<u32>,
    /// Response tokens including the end-of-message marker; empty at
    /// inference time.
    pub target: Vec<u32>,
}

pub fn prepare_dialogue(
    d: &DialogueHistory,
    cfg: &ModelConfig,
    include_target: bool,
) -> Result<PreparedDialogue> {
    let turn_features = d
        .turns
        .iter()
        .map(|t| {
            let f = turn_features(t, cfg.frontend.n_mels, cfg.frontend.hop)?;
            let f = match f.scale() {
                FeatureScale::LinearPower => f.to_log(),
                FeatureScale::Log => f,
            };
            downsample_input(&f, cfg.frontend.downsample)
        })
        .collect::<Result<Vec<_>>>()?;
    let r = render_template(d, cfg.template, include_target);
    Ok(PreparedDialogue {
        dialogue_id: d.dialogue_id.clone(),
        turn_features,
        system: tokenize(r.slice(&r.system)),
        history: tokenize(r.slice(&r.history)),
        continuation: tokenize(r.slice(&r.continuation)),
        target: r
            .target
            .as_ref()
            .map(|t| tokenize(r.slice(t)))
            .unwrap_or_default(),
    })
}

pub fn prepare_corpus(
    dialogues: &[DialogueHistory],
    cfg: &ModelConfig,
) -> Result<Vec<PreparedDialogue>> {
    dialogues
        .iter()
        .map(|d| prepare_dialogue(d, cfg, true))
        .collect()
}

/// Fused speech rows for one dialogue, on the tape.
pub fn fused_history(g: &mut Graph, model: &Model, p: &PreparedDialogue) -> Result<Var> {
    let cfg = &model.config;
    let speech = affect_context::encode_history(g, &model.store, &cfg.affect, &p.turn_features)?;
    if p.history.is_empty() {
        return Err(Error::InvalidArgument("empty text history".into()));
    }
    let table = g.param(&model.store, lm::TOKENS)?;
    let ids: Vec<usize> = p.history.iter().map(|&t| t as usize).collect();
    let text = g.gather_rows(table, &ids)?;
    Ok(cross_modal_attention_graph(g, &model.store, speech, text, cfg.cross_heads)?.fused)
}

fn teacher_forced(p: &PreparedDialogue) -> Result<(Vec<u32>, Vec<u32>)> {
    if p.target.is_empty() {
        return Err(Error::NoValidTargets);
    }
    let mut tail = p.continuation.clone();
    tail.extend_from_slice(&p.target[..p.target.len() - 1]);
    Ok((tail, p.target.clone()))
}

/// Rows whose next-token prediction is a target token, given the number of
/// rows preceding the target.
fn target_rows(prefix: usize, n: usize) -> Vec<usize> {
    (0..n).map(|j| prefix + j - 1).collect()
}

/// Text-path logits and the rows predicting the target.
pub fn text_path(g: &mut Graph, model: &Model, p: &PreparedDialogue) -> Result<(Var, Vec<usize>)> {
    let (tail, target) = teacher_forced(p)?;
    let mut toks = p.system.clone();
    toks.extend_from_slice(&p.history);
    let prefix = toks.len() + p.continuation.len();
    toks.extend_from_slice(&tail);
    let logits = lm_logits(
        g,
        &model.store,
        &model.config.lm,
        &[Segment::Tokens(toks)],
        &LmRun::text(),
    )?;
    Ok((logits, target_rows(prefix, target.len())))
}

/// Speech-path logits and the rows predicting the target.
pub fn speech_path(
    g: &mut Graph,
    model: &Model,
    p: &PreparedDialogue,
    dropout_seed: Option<u64>,
) -> Result<(Var, Vec<usize>)> {
    let (tail, target) = teacher_forced(p)?;
    let fused = fused_history(g, model, p)?;
    let n_fused = g.shape(fused).0;
    let prefix = p.system.len() + n_fused + p.continuation.len();
    let segs = [
        Segment::Tokens(p.system.clone()),
        Segment::Embeddings(fused),
        Segment::Tokens(tail),
    ];
    let run = LmRun {
        dropout_seed,
        ..LmRun::speech(model.config.low_rank)
    };
    let logits = lm_logits(g, &model.store, &model.config.lm, &segs, &run)?;
    Ok((logits, target_rows(prefix, target.len())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub distill: DistillConfig,
    pub steps: usize,
    pub batch_size: usize,
    /// Text-path-only steps run first to stand in for a pretrained decoder.
    pub warmup_steps: usize,
    pub warmup_lr: f64,
    pub freeze_base_lm: bool,
    /// Dropout on the low-rank inputs during training.
    pub dropout: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamWConfig::default(),
            distill: DistillConfig::default(),
            steps: 500,
            batch_size: 8,
            warmup_steps: 0,
            warmup_lr: 3e-3,
            freeze_base_lm: true,
            dropout: true,
            seed: 0,
        }
    }
}

/// One optimizer update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub step: u64,
    pub loss: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped_norm: f64,
}

impl StepReport {
    /// Training-log record.
    pub fn log_record(&self) -> serde_json::Value {
        serde_json::json!({
            "step": self.step,
            "ce": self.loss.ce,
            "kl": self.loss.kl,
            "total": self.loss.total,
            "grad_norm": self.grad_norm,
        })
    }
}

fn accumulate(
    acc: &mut std::collections::BTreeMap<String, Mat>,
    grads: std::collections::BTreeMap<String, Mat>,
    w: f64,
) {
    for (k, g) in grads {
        match acc.get_mut(&k) {
            Some(a) => a.scaled_add(w, &g),
            None => {
                acc.insert(k, g * w);
            }
        }
    }
}

fn finish_step(
    model: &mut Model,
    opt: &mut AdamW,
    grads: std::collections::BTreeMap<String, Mat>,
    loss: LossReport,
    step: u64,
) -> Result<StepReport> {
    if !loss.total.is_finite() || !loss.ce.is_finite() || !loss.kl.is_finite() {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("ce={} kl={} total={}", loss.ce, loss.kl, loss.total),
        });
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLoss {
            step,
            detail: format!("non-finite gradient in {name}"),
        });
    }
    let norms = opt.step(&mut model.store, grads)?;
    Ok(StepReport {
        step,
        loss,
        grad_norm: norms.raw,
        clipped_norm: norms.clipped,
    })
}

/// Text-path logits at the rows predicting the target (`|V|×vocab`).
pub fn teacher_logits(model: &Model, p: &PreparedDialogue) -> Result<Mat> {
    let mut g = Graph::new();
    let (logits, rows) = text_path(&mut g, model, p)?;
    let z = g.value(logits);
    let mut out = Mat::zeros((rows.len(), z.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        out.row_mut(i).assign(&z.row(r));
    }
    Ok(out)
}

/// One training example; `teacher` holds precomputed [`teacher_logits`]
/// when the text path is known not to change.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub dialogue: &'a PreparedDialogue,
    pub teacher: Option<&'a Mat>,
}

impl<'a> From<&'a PreparedDialogue> for Example<'a> {
    fn from(dialogue: &'a PreparedDialogue) -> Self {
        Self {
            dialogue,
            teacher: None,
        }
    }
}

/// Joint step: speech-path cross-entropy plus distillation towards the
/// text path, averaged over the batch.
pub fn train_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[Example<'_>],
    cfg: &TrainConfig,
    step: u64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    cfg.distill.validate()?;
    let w = 1.0 / batch.len() as f64;
    let mut grads = std::collections::BTreeMap::new();
    let (mut ce, mut kl, mut n_valid) = (0.0, 0.0, 0);
    for (i, ex) in batch.iter().enumerate() {
        let p = ex.dialogue;
        let teacher = match ex.teacher {
            Some(t) => t.clone(),
            None => teacher_logits(model, p)?,
        };
        let t_rows: Vec<usize> = (0..teacher.nrows()).collect();
        let dropout_seed = cfg
            .dropout
            .then(|| cfg.seed ^ (step << 24) ^ (i as u64).wrapping_mul(0x9e37_79b9));
        let mut g = Graph::new();
        let (s_logits, s_rows) = speech_path(&mut g, model, p, dropout_seed)?;
        let ce_v = ce_from_logits(&mut g, s_logits, &s_rows, &p.target)?;
        let kl_v = kl_from_logits(&mut g, s_logits, &s_rows, &teacher, &t_rows, &cfg.distill)?;
        let weighted = g.scale(kl_v, cfg.distill.lambda);
        let total = g.add(ce_v, weighted)?;
        ce += w * g.scalar(ce_v);
        kl += w * g.scalar(kl_v);
        n_valid += s_rows.len();
        let gr = g.backward(total)?;
        accumulate(&mut grads, g.param_grads(&gr), w);
    }
    let loss = LossReport {
        ce,
        kl,
        total: total_loss(ce, kl, cfg.distill.lambda),
        n_valid,
        temperature: cfg.distill.temperature,
        weight: cfg.distill.lambda,
    };
    finish_step(model, opt, grads, loss, step)
}

/// Text-path cross-entropy only.
pub fn text_step(
    model: &mut Model,
    opt: &mut AdamW,
    batch: &[&PreparedDialogue],
    step: u64,
) -> Result<StepReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let w = 1.0 / batch.len() as f64;
    let mut grads = std::collections::BTreeMap::new();
    let (mut ce, mut n_valid) = (0.0, 0);
    for p in batch {
        let mut g = Graph::new();
        let (logits, rows) = text_path(&mut g, model, p)?;
        let loss = ce_from_logits(&mut g, logits, &rows, &p.target)?;
        ce += w * g.scalar(loss);
        n_valid += rows.len();
        let gr = g.backward(loss)?;
        accumulate(&mut grads, g.param_grads(&gr), w);
    }
    let loss = LossReport {
        ce,
        kl: 0.0,
        total: ce,
        n_valid,
        temperature: 1.0,
        weight: 0.0,
    };
    finish_step(model, opt, grads, loss, step)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Warmup,
    Joint,
}

/// Seeded epoch-shuffled batches.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.order.shuffle(&mut b.rng);
        b.pos = 0;
        b
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// Warm-up (if configured), then joint training. `on_step` sees every
/// report as it is produced.
pub fn train(
    model: &mut Model,
    data: &[PreparedDialogue],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(Phase, &StepReport),
) -> Result<Vec<StepReport>> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("no training dialogues".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be ≥ 1".into()));
    }
    let mut batcher = Batcher::new(data.len(), cfg.seed);
    if cfg.warmup_steps > 0 {
        lm::set_base_trainable(&mut model.store, true);
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.warmup_lr,
            ..cfg.optimizer
        });
        for s in 0..cfg.warmup_steps {
            let batch: Vec<&PreparedDialogue> = batcher
                .next(cfg.batch_size)
                .into_iter()
                .map(|i| &data[i])
                .collect();
            let r = text_step(model, &mut opt, &batch, s as u64 + 1)?;
            on_step(Phase::Warmup, &r);
        }
    }
    lm::set_base_trainable(&mut model.store, !cfg.freeze_base_lm);
    // a frozen decoder makes the text path constant
    let teachers = if cfg.freeze_base_lm && cfg.steps > 0 {
        Some(
            data.iter()
                .map(|p| teacher_logits(model, p))
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let mut opt = AdamW::new(cfg.optimizer);
    let mut reports = Vec::with_capacity(cfg.steps);
    for s in 0..cfg.steps {
        let batch: Vec<Example<'_>> = batcher
            .next(cfg.batch_size)
            .into_iter()
            .map(|i| Example {
                dialogue: &data[i],
                teacher: teachers.as_ref().map(|t| &t[i]),
            })
            .collect();
        let r = train_step(model, &mut opt, &batch, cfg, s as u64 + 1)?;
        on_step(Phase::Joint, &r);
        reports.push(r);
    }
    Ok(reports)
}

fn argmax(row: ndarray::ArrayView1<f64>) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Greedy speech-path decoding. Stops after the end-of-message marker
/// (which is not returned), at `max_new_tokens`, or at the context limit.
pub fn generate(model: &Model, p: &PreparedDialogue, max_new_tokens: usize) -> Result<Vec<u32>> {
    if max_new_tokens == 0 {
        return Ok(Vec::new());
    }
    let mut g = Graph::new();
    let fused = fused_history(&mut g, model, p)?;
    let fused = g.value(fused).clone();
    drop(g);
    let stop = tokenize(model.config.template.end_of_message());
    let base_len = p.system.len() + fused.nrows() + p.continuation.len();
    let run = LmRun::speech(model.config.low_rank);
    let mut out: Vec<u32> = Vec::new();
    while out.len() < max_new_tokens && base_len + out.len() < model.config.lm.max_len {
        let mut tail = p.continuation.clone();
        tail.extend_from_slice(&out);
        let input = [
            InputSegment::Tokens(p.system.clone()),
            InputSegment::Embeddings(fused.clone()),
            InputSegment::Tokens(tail),
        ];
        let logits = lm_logit_values(&model.store, &model.config.lm, &input, &run)?;
        out.push(argmax(logits.row(logits.nrows() - 1)) as u32);
        if out.ends_with(&stop) {
            out.truncate(out.len() - stop.len());
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::affect_context::AdapterConfig;
    use crate::corpus::{detokenize, synth_corpus, SynthSpec};

    /// Small enough for quick unit tests.
    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            frontend: FrontendConfig {
                n_mels: 16,
                ..Default::default()
            },
            affect: AffectConfig {
                in_dim: 16,
                model_dim: 16,
                n_heads: 2,
                max_frames: 64,
                max_turns: 8,
                encoder_depth: 1,
                encoder_trainable: true,
                adapter: AdapterConfig {
                    hidden_dim: 32,
                    out_dim: 32,
                    ..Default::default()
                },
            },
            lm: ToyLMConfig {
                model_dim: 32,
                n_heads: 2,
                n_layers: 1,
                ..Default::default()
            },
            cross_heads: 2,
            ..Default::default()
        }
    }

    fn data(n: usize) -> (Vec<DialogueHistory>, Vec<PreparedDialogue>) {
        let spec = SynthSpec {
            history_turns: 1,
            turn_secs: 0.25,
            ..Default::default()
        };
        let d = synth_corpus(n, 4, &spec).unwrap();
        let p = prepare_corpus(&d, &tiny_config()).unwrap();
        (d, p)
    }

    #[test]
    fn prepared_spans_line_up() {
        let (d, p) = data(1);
        let full = render_template(&d[0], TemplateFormat::Qwen, true).text;
        let mut toks = p[0].system.clone();
        toks.extend(&p[0].history);
        toks.extend(&p[0].continuation);
        toks.extend(&p[0].target);
        assert_eq!(detokenize(&toks), full);
        assert!(detokenize(&p[0].target).ends_with("<|im_end|>"));
        assert_eq!(p[0].turn_features.len(), 1);
    }

    #[test]
    fn missing_audio_is_reported() {
        let (mut d, _) = data(1);
        d[0].turns[0].waveform = None;
        let err = prepare_corpus(&d, &tiny_config()).unwrap_err();
        assert!(matches!(err, Error::MissingAudio { turn: 0 }));
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let (_, p) = data(2);
        let mut m = Model::new(tiny_config()).unwrap();
        let before = m.store.clone();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.0,
            ..Default::default()
        });
        let batch: Vec<Example<'_>> = p.iter().map(Example::from).collect();
        let r = train_step(&mut m, &mut opt, &batch, &TrainConfig::default(), 1).unwrap();
        assert!(r.loss.ce > 0.0 && r.loss.kl >= 0.0);
        assert!((r.loss.total - (r.loss.ce + r.loss.kl)).abs() < 1e-12);
        for (name, v) in before.iter() {
            assert_eq!(m.store.get(name).unwrap(), v, "{name} moved");
        }
    }

    #[test]
    fn frozen_base_gets_no_update() {
        let (_, p) = data(1);
        let mut m = Model::new(tiny_config()).unwrap();
        lm::set_base_trainable(&mut m.store, false);
        let head = m.store.get("lm.head.w").unwrap().clone();
        let lora = m.store.get("lm.0.attn.v.lora_b").unwrap().clone();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1e-2,
            ..Default::default()
        });
        train_step(
            &mut m,
            &mut opt,
            &[(&p[0]).into()],
            &TrainConfig::default(),
            1,
        )
        .unwrap();
        assert_eq!(m.store.get("lm.head.w").unwrap(), &head);
        assert_ne!(m.store.get("lm.0.attn.v.lora_b").unwrap(), &lora);
    }

    #[test]
    fn clipped_norm_is_bounded_and_nan_aborts() {
        let (_, p) = data(1);
        let mut m = Model::new(tiny_config()).unwrap();
        let mut opt = AdamW::new(AdamWConfig {
            lr: 1e-2,
            ..Default::default()
        });
        for s in 1..=3 {
            let r = train_step(
                &mut m,
                &mut opt,
                &[(&p[0]).into()],
                &TrainConfig::default(),
                s,
            )
            .unwrap();
            assert!(r.clipped_norm <= 1.0 + 1e-6);
        }
        let mut w = m.store.get("lm.head.w").unwrap().clone();
        w[[0, 0]] = f64::NAN;
        m.store.set("lm.head.w", w).unwrap();
        let err = train_step(
            &mut m,
            &mut opt,
            &[(&p[0]).into()],
            &TrainConfig::default(),
            4,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { step: 4, .. }));
    }

    #[test]
    fn generation_is_deterministic_and_capped() {
        let (_, p) = data(1);
        let m = Model::new(tiny_config()).unwrap();
        assert!(generate(&m, &p[0], 0).unwrap().is_empty());
        let a = generate(&m, &p[0], 5).unwrap();
        assert!(a.len() <= 5);
        assert_eq!(a, generate(&m, &p[0], 5).unwrap());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let m = Model::new(tiny_config()).unwrap();
        m.save(&path, serde_json::json!({"step": 3})).unwrap();
        let (back, extra) = Model::load(&path).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(extra["step"], 3);
        for (n, v) in m.store.iter() {
            assert_eq!(back.store.get(n).unwrap(), v);
        }
    }
}
