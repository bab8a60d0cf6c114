//! Command implementations. Each takes a resolved [`RunConfig`], writes
//! its artifacts under `paths.out`, and returns its primary output.

use std::io::Write;
use std::path::{Path, PathBuf};

use empathic_core::corpus::{
    detokenize, export_audio, load_corpus, synth_corpus, write_manifest, DialogueHistory,
    LoadOptions,
};
use empathic_core::evalkit::{evaluate, format_table, MetricReport};
use empathic_core::fusion_gen::checks;
use empathic_core::fusion_gen::train::Phase;
use empathic_core::fusion_gen::{
    generate, prepare_corpus, prepare_dialogue, train, Model, StepReport,
};
use empathic_core::gradcheck::{check_component, ComponentReport, GradComponent};
use empathic_core::synth_control::{plan_control, ControlRecord};
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, SYNTH_CORPUS};
use crate::error::{CliError, CliResult};

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Core(empathic_core::Error::io(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

/// Pretty JSON of `body` with the run config under `run_config`.
fn write_artifact(path: &Path, cfg: &RunConfig, body: impl Serialize) -> CliResult<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut value = serde_json::to_value(body).map_err(empathic_core::Error::from)?;
    if let Some(obj) = value.as_object_mut() {
        obj.insert("run_config".into(), cfg.to_json());
    }
    let mut text = serde_json::to_string_pretty(&value).map_err(empathic_core::Error::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

fn phase_name(p: Phase) -> &'static str {
    match p {
        Phase::Warmup => "warmup",
        Phase::Joint => "joint",
    }
}

/// The configured corpus: generated when `paths.corpus` is `synth`,
/// otherwise loaded from a manifest with every entry required to be valid.
pub fn load_dialogues(cfg: &RunConfig) -> CliResult<Vec<DialogueHistory>> {
    if cfg.paths.corpus == SYNTH_CORPUS {
        return Ok(synth_corpus(
            cfg.synth.dialogues,
            cfg.seed,
            &cfg.synth.spec,
        )?);
    }
    load_manifest(Path::new(&cfg.paths.corpus), false)
}

/// Load a manifest, failing with every invalid entry listed.
pub fn load_manifest(path: &Path, allow_open: bool) -> CliResult<Vec<DialogueHistory>> {
    let report = load_corpus(
        path,
        LoadOptions {
            require_audio: true,
            allow_open,
        },
    )?;
    if !report.errors.is_empty() {
        let lines: Vec<String> = report.errors.iter().map(|e| e.to_string()).collect();
        return Err(CliError::Input(lines.join("; ")));
    }
    if report.dialogues.is_empty() {
        return Err(CliError::Input(format!(
            "{} holds no dialogues",
            path.display()
        )));
    }
    Ok(report.dialogues)
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub warmup: Vec<StepReport>,
    pub reports: Vec<StepReport>,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub model: Model,
}

/// Train on the configured corpus. Writes a JSON-lines log (the run
/// config first, then one line per step) and a checkpoint.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainOutcome> {
    cfg.validate()?;
    let dialogues = load_dialogues(cfg)?;
    let data = prepare_corpus(&dialogues, &cfg.model)?;
    let mut model = Model::new(cfg.model.clone())?;
    let mut tc = cfg.train.config.clone();
    tc.steps = cfg.train.steps_for(data.len());

    create_dir(&cfg.paths.out)?;
    let log = cfg.paths.out.join("train_log.jsonl");
    let file = std::fs::File::create(&log).map_err(|e| io_err(&log, e))?;
    let mut w = std::io::BufWriter::new(file);
    let header = json!({ "run_config": cfg.to_json() });
    writeln!(w, "{header}").map_err(|e| io_err(&log, e))?;

    let mut warmup = Vec::new();
    let mut write_err = None;
    let reports = train(&mut model, &data, &tc, |phase, r| {
        let mut line = r.log_record();
        line["phase"] = json!(phase_name(phase));
        if write_err.is_none() {
            write_err = writeln!(w, "{line}").err();
        }
        if phase == Phase::Warmup {
            warmup.push(*r);
        }
        if r.step % 50 == 0 {
            log::info!(
                "{} step {} total {:.4} ce {:.4} kl {:.4}",
                phase_name(phase),
                r.step,
                r.loss.total,
                r.loss.ce,
                r.loss.kl
            );
        }
    })?;
    if let Some(e) = write_err {
        return Err(io_err(&log, e));
    }
    w.flush().map_err(|e| io_err(&log, e))?;

    let checkpoint = cfg.paths.checkpoint.clone();
    if let Some(parent) = checkpoint.parent() {
        create_dir(parent)?;
    }
    let last = reports.last().map(|r| r.log_record());
    model.save(
        &checkpoint,
        json!({ "run_config": cfg.to_json(), "final": last }),
    )?;
    Ok(TrainOutcome {
        warmup,
        reports,
        checkpoint,
        log,
        model,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RespondOutput {
    pub dialogue_id: String,
    pub response: String,
    pub energy_trend: f64,
    pub control: ControlRecord,
}

/// Greedy response from the checkpoint plus its prosody control record.
/// The dialogue's own target text, if any, is never shown to the model.
pub fn cmd_respond(cfg: &RunConfig, dialogue: &DialogueHistory) -> CliResult<RespondOutput> {
    cfg.validate()?;
    let ckpt = &cfg.paths.checkpoint;
    if !ckpt.is_file() {
        return Err(CliError::Input(format!(
            "checkpoint {} not found",
            ckpt.display()
        )));
    }
    let (model, _) = Model::load(ckpt)?;
    let prepared = prepare_dialogue(dialogue, &model.config, false)?;
    let tokens = generate(&model, &prepared, cfg.generation.max_new_tokens)?;
    let response = detokenize(&tokens);
    let (control, traj, decision) = plan_control(dialogue, &response, &cfg.control)?;
    log::debug!("energies {:?}", traj.energies());
    let out = RespondOutput {
        dialogue_id: dialogue.dialogue_id.clone(),
        response,
        energy_trend: decision.delta_e,
        control,
    };
    let path = cfg
        .paths
        .out
        .join("respond")
        .join(format!("{}.json", dialogue.dialogue_id));
    write_artifact(&path, cfg, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthControlOutput {
    pub dialogue_id: String,
    pub energies: Vec<f64>,
    pub energy_trend: f64,
    pub control: ControlRecord,
}

/// Control record for a given response text (the dialogue's target text
/// when `text` is `None`), without running the generator.
pub fn cmd_synth_control(
    cfg: &RunConfig,
    dialogue: &DialogueHistory,
    text: Option<&str>,
) -> CliResult<SynthControlOutput> {
    cfg.validate()?;
    let text = text.unwrap_or(&dialogue.target.text);
    let (control, traj, decision) = plan_control(dialogue, text, &cfg.control)?;
    let out = SynthControlOutput {
        dialogue_id: dialogue.dialogue_id.clone(),
        energies: traj.energies().to_vec(),
        energy_trend: decision.delta_e,
        control,
    };
    let path = cfg
        .paths
        .out
        .join("control")
        .join(format!("{}.json", dialogue.dialogue_id));
    write_artifact(&path, cfg, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutput {
    pub report: MetricReport,
    pub table: String,
}

fn read_lines(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Score line-aligned prediction and reference files.
pub fn cmd_eval(
    cfg: &RunConfig,
    predictions: &Path,
    references: &Path,
    model_name: &str,
) -> CliResult<EvalOutput> {
    let preds = read_lines(predictions)?;
    let refs = read_lines(references)?;
    if preds.is_empty() {
        return Err(CliError::Input(format!(
            "prediction file {} is empty",
            predictions.display()
        )));
    }
    if preds.len() != refs.len() {
        return Err(CliError::Input(format!(
            "{} predictions vs {} references",
            preds.len(),
            refs.len()
        )));
    }
    let pairs: Vec<(String, String)> = preds.into_iter().zip(refs).collect();
    let report = evaluate(&pairs)?;
    let table = format_table(&[(model_name.to_string(), report.clone())]);
    let out = EvalOutput { report, table };
    write_artifact(&cfg.paths.out.join("eval_report.json"), cfg, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckOutput {
    pub passed: bool,
    pub components: Vec<ComponentReport>,
}

/// Check any set of components against finite differences.
pub fn gradcheck_components(
    cfg: &RunConfig,
    components: &[&dyn GradComponent],
) -> CliResult<GradcheckOutput> {
    let components = components
        .iter()
        .map(|c| check_component(*c, &cfg.gradcheck))
        .collect::<empathic_core::Result<Vec<_>>>()?;
    Ok(GradcheckOutput {
        passed: components.iter().all(|c| c.passed),
        components,
    })
}

/// Finite-difference check of every differentiable component.
pub fn cmd_gradcheck(cfg: &RunConfig) -> CliResult<GradcheckOutput> {
    cfg.validate()?;
    let suite = checks::suite(cfg.seed);
    let refs: Vec<&dyn GradComponent> = suite.iter().map(|c| c as &dyn GradComponent).collect();
    let out = gradcheck_components(cfg, &refs)?;
    write_artifact(&cfg.paths.out.join("gradcheck.json"), cfg, &out)?;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthCorpusOutput {
    pub manifest: PathBuf,
    pub dialogues: usize,
}

/// Write the synthetic corpus as WAV files plus a manifest with paths
/// relative to it, so the directory can be moved as a unit.
pub fn cmd_synth_corpus(cfg: &RunConfig) -> CliResult<SynthCorpusOutput> {
    cfg.validate()?;
    let mut dialogues = synth_corpus(cfg.synth.dialogues, cfg.seed, &cfg.synth.spec)?;
    let dir = cfg.paths.out.join("synth");
    export_audio(&mut dialogues, &dir.join("audio"))?;
    for d in dialogues.iter_mut() {
        for t in d.turns.iter_mut() {
            if let Some(p) = t.audio_path.take() {
                let name = p.file_name().expect("exported file name").to_owned();
                t.audio_path = Some(Path::new("audio").join(name));
            }
        }
    }
    let manifest = dir.join("manifest.jsonl");
    write_manifest(&manifest, &dialogues)?;
    let out = SynthCorpusOutput {
        manifest,
        dialogues: dialogues.len(),
    };
    write_artifact(&dir.join("run.json"), cfg, &out)?;
    Ok(out)
}
