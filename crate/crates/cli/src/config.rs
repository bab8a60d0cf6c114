//! Run configuration: one serializable value that every command reads and
//! every artifact echoes.

use std::path::{Path, PathBuf};

use empathic_core::corpus::SynthSpec;
use empathic_core::fusion_gen::{ModelConfig, TrainConfig};
use empathic_core::gradcheck::GradCheckConfig;
use empathic_core::synth_control::ControlConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Corpus value that selects the built-in synthetic generator.
pub const SYNTH_CORPUS: &str = "synth";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// A manifest path, or `synth` for the generated corpus.
    pub corpus: String,
    pub checkpoint: PathBuf,
    /// Directory for logs, reports and other artifacts.
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: SYNTH_CORPUS.into(),
            checkpoint: PathBuf::from("out/model.empk"),
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthCorpusConfig {
    pub dialogues: usize,
    #[serde(flatten)]
    pub spec: SynthSpec,
}

impl Default for SynthCorpusConfig {
    fn default() -> Self {
        Self {
            dialogues: 64,
            spec: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct TrainSection {
    #[serde(flatten)]
    pub config: TrainConfig,
    /// When set, replaces `steps` with enough steps to cover the corpus
    /// this many times.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
}

impl TrainSection {
    pub fn steps_for(&self, n_dialogues: usize) -> usize {
        match self.epochs {
            Some(e) => e * n_dialogues.div_ceil(self.config.batch_size.max(1)),
            None => self.config.steps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationConfig {
    pub max_new_tokens: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { max_new_tokens: 96 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub model: ModelConfig,
    pub train: TrainSection,
    pub synth: SynthCorpusConfig,
    pub control: ControlConfig,
    pub gradcheck: GradCheckConfig,
    pub generation: GenerationConfig,
}

/// Command-line values that win over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub corpus: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
    pub lambda_kl: Option<f64>,
    pub kd_temp: Option<f64>,
    pub trend_tol: Option<f64>,
    pub epsilon: Option<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(vec![format!("{}: {e}", path.display())]))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Runtime(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = o.seed {
            self.seed = v;
        }
        if let Some(v) = &o.corpus {
            self.paths.corpus = v.clone();
        }
        if let Some(v) = &o.checkpoint {
            self.paths.checkpoint = v.clone();
        }
        if let Some(v) = &o.out {
            self.paths.out = v.clone();
        }
        if let Some(v) = o.steps {
            self.train.config.steps = v;
            self.train.epochs = None;
        }
        if let Some(v) = o.lr {
            self.train.config.optimizer.lr = v;
        }
        if let Some(v) = o.lambda_kl {
            self.train.config.distill.lambda = v;
        }
        if let Some(v) = o.kd_temp {
            self.train.config.distill.temperature = v;
        }
        if let Some(v) = o.trend_tol {
            self.control.trend_tol = v;
        }
        if let Some(v) = o.epsilon {
            self.control.epsilon = v;
        }
    }

    /// Propagate the run seed into every seeded component.
    pub fn resolve(mut self) -> Self {
        self.model.seed = self.seed;
        self.model.lm.seed = self.seed;
        self.train.config.seed = self.seed;
        self
    }

    /// Every problem at once, so a config can be fixed in one pass.
    pub fn validate(&self) -> CliResult<()> {
        let mut problems = Vec::new();
        let mut check = |what: &str, r: empathic_core::Result<()>| {
            if let Err(e) = r {
                problems.push(format!("{what}: {e}"));
            }
        };
        check("model", self.model.validate());
        check("train.distill", self.train.config.distill.validate());
        let t = &self.train.config;
        let o = &t.optimizer;
        if !(o.lr.is_finite() && o.lr >= 0.0) {
            problems.push(format!(
                "train.optimizer.lr must be finite and ≥ 0, got {}",
                o.lr
            ));
        }
        if !(t.warmup_lr.is_finite() && t.warmup_lr >= 0.0) {
            problems.push(format!(
                "train.warmup_lr must be finite and ≥ 0, got {}",
                t.warmup_lr
            ));
        }
        if t.batch_size == 0 {
            problems.push("train.batch_size must be ≥ 1".into());
        }
        if o.clip_norm.is_some_and(|c| !(c > 0.0)) {
            problems.push("train.optimizer.clip_norm must be > 0".into());
        }
        if !(self.control.epsilon > 0.0) {
            problems.push(format!(
                "control.epsilon must be > 0, got {}",
                self.control.epsilon
            ));
        }
        if !(self.control.trend_tol >= 0.0) {
            problems.push(format!(
                "control.trend_tol must be ≥ 0, got {}",
                self.control.trend_tol
            ));
        }
        if self.control.n_mels == 0 || self.control.hop == 0 {
            problems.push("control.n_mels and control.hop must be ≥ 1".into());
        }
        if self.synth.dialogues == 0 {
            problems.push("synth.dialogues must be ≥ 1".into());
        }
        if self.synth.spec.history_turns.is_multiple_of(2) {
            problems.push("synth.history_turns must be odd".into());
        }
        if !(self.gradcheck.step > 0.0 && self.gradcheck.tolerance > 0.0) {
            problems.push("gradcheck.step and gradcheck.tolerance must be > 0".into());
        }
        if self.generation.max_new_tokens == 0 {
            problems.push("generation.max_new_tokens must be ≥ 1".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(problems))
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}
