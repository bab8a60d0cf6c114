#![allow(dead_code)]

use std::path::Path;

use empathic_cli::RunConfig;
use empathic_core::affect_context::{AdapterConfig, AffectConfig};
use empathic_core::fusion_gen::train::FrontendConfig;
use empathic_core::fusion_gen::{ModelConfig, ToyLMConfig};

/// A model small enough that a few dozen steps take seconds.
pub fn tiny_model() -> ModelConfig {
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

/// Tiny model, small synthetic corpus, artifacts under `dir`.
pub fn tiny_config(dir: &Path) -> RunConfig {
    let mut c = RunConfig {
        seed: 42,
        model: tiny_model(),
        ..Default::default()
    };
    c.synth.dialogues = 6;
    c.synth.spec.turn_secs = 0.25;
    c.train.config.batch_size = 2;
    c.train.config.steps = 10;
    c.train.config.optimizer.lr = 3e-3;
    c.paths.out = dir.join("out");
    c.paths.checkpoint = dir.join("out/model.empk");
    c.resolve()
}

pub fn write_config(dir: &Path, cfg: &RunConfig) -> std::path::PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, cfg.to_toml().unwrap()).unwrap();
    p
}
