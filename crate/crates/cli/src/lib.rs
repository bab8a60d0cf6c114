//! Command-line workflows over `empathic-core`: training, response
//! generation with prosody control, evaluation, gradient checking and
//! synthetic corpus export.
//!
//! Every command reads one [`RunConfig`] (TOML file plus flag overrides,
//! flags win) and embeds it in each artifact it writes. Exit codes: 0 on
//! success, 1 on invalid configuration or input, 2 on runtime failure.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::{
    cmd_eval, cmd_gradcheck, cmd_respond, cmd_synth_control, cmd_synth_corpus, cmd_train,
    gradcheck_components, load_dialogues, load_manifest, EvalOutput, GradcheckOutput,
    RespondOutput, SynthControlOutput, SynthCorpusOutput, TrainOutcome,
};
pub use config::{Overrides, RunConfig};
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(
    name = "empathic",
    version,
    about = "Speech-aware empathetic response pipeline"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args, Clone, Default)]
struct Common {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Manifest path, or `synth` for the generated corpus.
    #[arg(long, global = true)]
    corpus: Option<String>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long = "lambda-kl", global = true)]
    lambda_kl: Option<f64>,
    #[arg(long = "kd-temp", global = true)]
    kd_temp: Option<f64>,
    #[arg(long = "trend-tol", global = true)]
    trend_tol: Option<f64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            corpus: self.corpus.clone(),
            checkpoint: self.checkpoint.clone(),
            out: self.out.clone(),
            steps: self.steps,
            lr: self.lr,
            lambda_kl: self.lambda_kl,
            kd_temp: self.kd_temp,
            trend_tol: self.trend_tol,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train on the configured corpus and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a response and its control record for each dialogue.
    Respond {
        #[command(flatten)]
        common: Common,
        /// Manifest of dialogue histories.
        #[arg(long)]
        dialogue: PathBuf,
        /// Only this dialogue id.
        #[arg(long)]
        id: Option<String>,
    },
    /// Control record for given response text, without the generator.
    SynthControl {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dialogue: PathBuf,
        #[arg(long)]
        id: Option<String>,
        /// Response text; defaults to each dialogue's target turn.
        #[arg(long)]
        text: Option<String>,
    },
    /// Score predictions against references, one per line.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Row label in the table.
        #[arg(long, default_value = "model")]
        name: String,
    },
    /// Finite-difference gradient check of every component.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Write the synthetic corpus (WAV plus manifest).
    SynthCorpus {
        #[command(flatten)]
        common: Common,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Train { common }
            | Command::Respond { common, .. }
            | Command::SynthControl { common, .. }
            | Command::Eval { common, .. }
            | Command::Gradcheck { common }
            | Command::SynthCorpus { common } => common,
        }
    }
}

/// Config file (or defaults), then flag overrides, then seed propagation.
pub fn resolve_config(file: Option<&std::path::Path>, o: &Overrides) -> CliResult<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(o);
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn select(
    dialogues: Vec<empathic_core::corpus::DialogueHistory>,
    id: Option<&str>,
) -> CliResult<Vec<empathic_core::corpus::DialogueHistory>> {
    match id {
        None => Ok(dialogues),
        Some(id) => {
            let chosen: Vec<_> = dialogues
                .into_iter()
                .filter(|d| d.dialogue_id == id)
                .collect();
            if chosen.is_empty() {
                Err(CliError::Input(format!("no dialogue with id '{id}'")))
            } else {
                Ok(chosen)
            }
        }
    }
}

fn print_json(v: &impl serde::Serialize) -> CliResult<()> {
    let s = serde_json::to_string_pretty(v).map_err(empathic_core::Error::from)?;
    println!("{s}");
    Ok(())
}

fn execute(command: Command) -> CliResult<()> {
    let common = command.common().clone();
    let cfg = resolve_config(common.config.as_deref(), &common.overrides())?;
    match command {
        Command::Train { .. } => {
            let out = cmd_train(&cfg)?;
            let last = out.reports.last().map(|r| r.log_record());
            println!("checkpoint: {}", out.checkpoint.display());
            println!("log: {}", out.log.display());
            if let Some(l) = last {
                println!("final: {l}");
            }
        }
        Command::Respond { dialogue, id, .. } => {
            for d in select(load_manifest(&dialogue, true)?, id.as_deref())? {
                print_json(&cmd_respond(&cfg, &d)?)?;
            }
        }
        Command::SynthControl {
            dialogue, id, text, ..
        } => {
            for d in select(load_manifest(&dialogue, true)?, id.as_deref())? {
                print_json(&cmd_synth_control(&cfg, &d, text.as_deref())?)?;
            }
        }
        Command::Eval {
            predictions,
            references,
            name,
            ..
        } => {
            let out = cmd_eval(&cfg, &predictions, &references, &name)?;
            print!("{}", out.table);
        }
        Command::Gradcheck { .. } => {
            let out = cmd_gradcheck(&cfg)?;
            for c in &out.components {
                let status = if c.passed { "pass" } else { "FAIL" };
                println!(
                    "{status} {:<24} worst rel error {:.2e}",
                    c.component, c.worst_rel_error
                );
            }
            if !out.passed {
                let failing: Vec<String> = out
                    .components
                    .iter()
                    .flat_map(|c| {
                        c.failing()
                            .map(move |t| format!("{}/{}", c.component, t.tensor))
                    })
                    .collect();
                return Err(CliError::Runtime(format!(
                    "gradient check failed: {}",
                    failing.join(", ")
                )));
            }
        }
        Command::SynthCorpus { .. } => {
            let out = cmd_synth_corpus(&cfg)?;
            println!("{} dialogues -> {}", out.dialogues, out.manifest.display());
        }
    }
    Ok(())
}

/// Parse arguments, run, and return the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
