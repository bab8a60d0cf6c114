//! Dialogue data model, manifest loading, chat-template rendering, a
//! byte-level tokenizer and a seeded synthetic corpus.
//!
//! Manifests hold one JSON document per dialogue:
//!
//! ```json
//! {"dialogue_id": "dia20002",
//!  "turns": [{"index": 0, "role": "speaker", "text": "...", "audio": "dia20002utt0.wav"}, ...]}
//! ```
//!
//! The last turn is the target response and must be spoken by the
//! listener. Roles alternate starting with the speaker and indices are
//! contiguous from 0.

use std::fmt;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureMatrix, Waveform, DEFAULT_SAMPLE_RATE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Speaker,
    Listener,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub index: usize,
    pub role: Role,
    pub text: String,
    #[serde(rename = "audio", default, skip_serializing_if = "Option::is_none")]
    pub audio_path: Option<PathBuf>,
    #[serde(skip)]
    pub waveform: Option<Waveform>,
    #[serde(skip)]
    pub features: Option<FeatureMatrix>,
}

impl Turn {
    pub fn new(index: usize, role: Role, text: impl Into<String>) -> Self {
        Self {
            index,
            role,
            text: text.into(),
            audio_path: None,
            waveform: None,
            features: None,
        }
    }
}

/// Mel features for one turn from whichever source it carries:
/// precomputed features, an in-memory waveform, or an audio file.
/// Audio is analysed at its own sample rate.
pub fn turn_features(turn: &Turn, n_mels: usize, hop: usize) -> Result<FeatureMatrix> {
    if let Some(f) = &turn.features {
        return Ok(f.clone());
    }
    let wave = match (&turn.waveform, &turn.audio_path) {
        (Some(w), _) => w.clone(),
        (None, Some(p)) => Waveform::read_wav(p)?,
        (None, None) => return Err(Error::MissingAudio { turn: turn.index }),
    };
    extract_features(&wave, n_mels, hop)
}

/// History turns plus the listener's target response.
#[derive(Debug, Clone, PartialEq)]
pub struct DialogueHistory {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
    pub target: Turn,
}

/// On-disk shape of one manifest entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub dialogue_id: String,
    pub turns: Vec<Turn>,
}

impl DialogueHistory {
    /// Validate a full turn list (history followed by target).
    pub fn from_turns(dialogue_id: impl Into<String>, mut turns: Vec<Turn>) -> Result<Self> {
        let dialogue_id = dialogue_id.into();
        let fail = |reason: String| Error::Validation {
            dialogue_id: dialogue_id.clone(),
            reason,
        };
        if turns.len() < 2 {
            return Err(fail(format!(
                "needs at least one history turn and a target, got {} turns",
                turns.len()
            )));
        }
        for (i, t) in turns.iter().enumerate() {
            if t.index != i {
                return Err(fail(format!("turn at position {i} has index {}", t.index)));
            }
            let expected = if i % 2 == 0 {
                Role::Speaker
            } else {
                Role::Listener
            };
            if t.role != expected {
                return Err(fail(format!(
                    "turn {i} has role {:?}, expected {expected:?}",
                    t.role
                )));
            }
        }
        let target = turns.pop().expect("len ≥ 2");
        if target.role != Role::Listener {
            return Err(fail("target turn must be spoken by the listener".into()));
        }
        Ok(Self {
            dialogue_id,
            turns,
            target,
        })
    }

    /// Validate a history with no response yet. It must end on a speaker
    /// turn; the target becomes an empty listener turn.
    pub fn open(dialogue_id: impl Into<String>, mut turns: Vec<Turn>) -> Result<Self> {
        let n = turns.len();
        turns.push(Turn::new(n, Role::Listener, ""));
        Self::from_turns(dialogue_id, turns)
    }

    pub fn to_record(&self) -> DialogueRecord {
        let mut turns = self.turns.clone();
        turns.push(self.target.clone());
        DialogueRecord {
            dialogue_id: self.dialogue_id.clone(),
            turns,
        }
    }
}

#[derive(Debug, Default)]
pub struct LoadReport {
    pub dialogues: Vec<DialogueHistory>,
    pub errors: Vec<Error>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Treat a referenced audio file that does not exist as a validation error.
    pub require_audio: bool,
    /// Accept entries that end on a speaker turn (see [`DialogueHistory::open`]).
    pub allow_open: bool,
}

fn parse_record(text: &str, base: &Path, opts: LoadOptions) -> Result<DialogueHistory> {
    let mut rec: DialogueRecord = serde_json::from_str(text)?;
    for t in rec.turns.iter_mut() {
        if let Some(p) = t.audio_path.as_mut() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
            if opts.require_audio && !p.exists() {
                return Err(Error::Validation {
                    dialogue_id: rec.dialogue_id.clone(),
                    reason: format!("audio file {} not found", p.display()),
                });
            }
        }
    }
    if opts.allow_open && rec.turns.last().is_some_and(|t| t.role == Role::Speaker) {
        DialogueHistory::open(rec.dialogue_id, rec.turns)
    } else {
        DialogueHistory::from_turns(rec.dialogue_id, rec.turns)
    }
}

/// Load a manifest: a `.json` file holding one dialogue or an array of
/// them, a JSON-lines file (one dialogue per line), or a directory of
/// `*.json` files, one dialogue each. Invalid entries are
/// reported in [`LoadReport::errors`] rather than dropped silently.
pub fn load_corpus(path: &Path, opts: LoadOptions) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        files.sort();
        for f in files {
            let text = std::fs::read_to_string(&f).map_err(|e| Error::io(&f, e))?;
            match parse_record(&text, path, opts) {
                Ok(d) => report.dialogues.push(d),
                Err(e) => report.errors.push(e),
            }
        }
    } else if path.extension().is_some_and(|x| x == "json") {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let value: serde_json::Value = serde_json::from_str(&text)?;
        let docs = match value {
            serde_json::Value::Array(items) => items,
            other => vec![other],
        };
        for doc in docs {
            match parse_record(&doc.to_string(), base, opts) {
                Ok(d) => report.dialogues.push(d),
                Err(e) => report.errors.push(e),
            }
        }
    } else {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match parse_record(line, base, opts) {
                Ok(d) => report.dialogues.push(d),
                Err(e) => report.errors.push(e),
            }
        }
    }
    Ok(report)
}

/// Write dialogues as a JSON-lines manifest.
pub fn write_manifest(path: &Path, dialogues: &[DialogueHistory]) -> Result<()> {
    let mut out = String::new();
    for d in dialogues {
        out.push_str(&serde_json::to_string(&d.to_record())?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub const SYSTEM_MESSAGE: &str = "You are a helpful assistant. Your response should fulfill requests with empathy toward user's emotion tone.";
pub const CONTINUE_INSTRUCTION: &str = "Please continue the conversation naturally as the listener";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TemplateFormat {
    #[serde(rename = "qwen-style")]
    Qwen,
    #[serde(rename = "llama-style")]
    Llama,
}

impl FromStr for TemplateFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "qwen-style" | "qwen" => Ok(Self::Qwen),
            "llama-style" | "llama" => Ok(Self::Llama),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for TemplateFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Qwen => "qwen-style",
            Self::Llama => "llama-style",
        })
    }
}

impl TemplateFormat {
    fn preamble(self) -> String {
        match self {
            Self::Qwen => format!("<|im_start|>system\n{SYSTEM_MESSAGE}<|im_end|>\n<|im_end|>\n"),
            Self::Llama => format!(
                "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n{SYSTEM_MESSAGE}<|eot_id|>\n"
            ),
        }
    }

    fn header(self, role: &str) -> String {
        match self {
            Self::Qwen => format!("<|im_start|>{role}\n"),
            Self::Llama => format!("<|start_header_id|>{role}<|end_header_id|>\n"),
        }
    }

    /// Closes every message block.
    pub fn end_of_message(self) -> &'static str {
        match self {
            Self::Qwen => "<|im_end|>",
            Self::Llama => "<|eot_id|>",
        }
    }

    fn block(self, role: &str, text: &str) -> String {
        format!("{}{text}{}\n", self.header(role), self.end_of_message())
    }
}

/// A rendered dialogue with the byte span of each component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedDialogue {
    pub text: String,
    pub system: Range<usize>,
    pub history: Range<usize>,
    /// Continuation instruction block plus the assistant header.
    pub continuation: Range<usize>,
    /// Target response and its end-of-message marker.
    pub target: Option<Range<usize>>,
}

impl RenderedDialogue {
    pub fn slice(&self, r: &Range<usize>) -> &str {
        &self.text[r.clone()]
    }
}

pub fn render_template(
    d: &DialogueHistory,
    format: TemplateFormat,
    include_target: bool,
) -> RenderedDialogue {
    let mut text = format.preamble();
    let system = 0..text.len();
    for t in &d.turns {
        let role = match t.role {
            Role::Speaker => "user",
            Role::Listener => "assistant",
        };
        text.push_str(&format.block(role, &t.text));
    }
    let history = system.end..text.len();
    text.push_str(&format.block("user", CONTINUE_INSTRUCTION));
    text.push_str(&format.header("assistant"));
    let continuation = history.end..text.len();
    let target = include_target.then(|| {
        let start = text.len();
        text.push_str(&d.target.text);
        text.push_str(format.end_of_message());
        start..text.len()
    });
    RenderedDialogue {
        text,
        system,
        history,
        continuation,
        target,
    }
}

/// Byte-level vocabulary: token id = byte value.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ByteVocab;

impl ByteVocab {
    pub const SIZE: usize = 256;

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        text.bytes().map(u32::from).collect()
    }

    /// Invalid UTF-8 (possible in generated output) is replaced lossily.
    pub fn detokenize(&self, tokens: &[u32]) -> String {
        let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

pub fn tokenize(text: &str) -> Vec<u32> {
    ByteVocab.tokenize(text)
}

pub fn detokenize(tokens: &[u32]) -> String {
    ByteVocab.detokenize(tokens)
}

/// Per-dialogue loudness schedule across history turns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnergyProfile {
    Falling,
    Rising,
    Flat,
}

impl EnergyProfile {
    pub const ALL: [EnergyProfile; 3] = [Self::Falling, Self::Rising, Self::Flat];

    /// Amplitude gain for turn `k` of `n`.
    pub fn gain(self, k: usize, n: usize) -> f64 {
        let frac = if n <= 1 {
            0.0
        } else {
            k as f64 / (n - 1) as f64
        };
        match self {
            Self::Falling => 0.8 - 0.6 * frac,
            Self::Rising => 0.2 + 0.6 * frac,
            Self::Flat => 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub history_turns: usize,
    pub sample_rate: u32,
    pub turn_secs: f64,
    /// Profiles cycle in this order across dialogues.
    pub profiles: Vec<EnergyProfile>,
    pub noise_level: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            history_turns: 3,
            sample_rate: DEFAULT_SAMPLE_RATE,
            turn_secs: 0.5,
            profiles: EnergyProfile::ALL.to_vec(),
            noise_level: 0.05,
        }
    }
}

struct PhraseBank {
    speaker: &'static [&'static str],
    follow_up: &'static [&'static str],
    listener: &'static [&'static str],
    responses: &'static [&'static str],
}

fn bank(profile: EnergyProfile) -> PhraseBank {
    match profile {
        EnergyProfile::Falling => PhraseBank {
            speaker: &[
                "i feel so tired",
                "nothing goes right",
                "i lost my job",
                "i miss my dog",
            ],
            follow_up: &["it is too much", "i can not sleep"],
            listener: &["that sounds hard", "i am listening"],
            responses: &[
                "rest, you did enough.",
                "i am here with you.",
                "that is a heavy loss.",
                "it is ok to be sad.",
            ],
        },
        EnergyProfile::Rising => PhraseBank {
            speaker: &[
                "i got the job!",
                "we won the game",
                "i passed my exam",
                "my art got sold",
            ],
            follow_up: &["i am so happy", "it feels amazing"],
            listener: &["that is great", "tell me more"],
            responses: &[
                "well done, go for it!",
                "what a win, keep on!",
                "you earned it, wow!",
                "so proud of you!",
            ],
        },
        EnergyProfile::Flat => PhraseBank {
            speaker: &[
                "the bus was late",
                "i had some tea",
                "it rained today",
                "i read a book",
            ],
            follow_up: &["that is all", "not much else"],
            listener: &["i see", "oh, ok"],
            responses: &[
                "i see, and then?",
                "sounds calm enough.",
                "how was the rest?",
                "nice, what book?",
            ],
        },
    }
}

fn synth_audio(rng: &mut ChaCha8Rng, spec: &SynthSpec, gain: f64, freq: f64) -> Result<Waveform> {
    let n = (spec.turn_secs * spec.sample_rate as f64).round().max(1.0) as usize;
    let sr = spec.sample_rate as f64;
    let samples = (0..n)
        .map(|i| {
            let tone = (2.0 * std::f64::consts::PI * freq * i as f64 / sr).sin();
            gain * (0.6 * tone + spec.noise_level * rng.gen_range(-1.0..1.0))
        })
        .collect();
    Waveform::new(samples, spec.sample_rate)
}

/// Seeded synthetic dialogues. Every history turn carries synthesized audio
/// (a tone plus noise) whose gain follows the dialogue's energy profile;
/// flat dialogues reuse one waveform for every turn so their energies are
/// exactly equal. The opening speaker line names the topic; later speaker
/// turns are generic follow-ups. The target response is chosen by profile
/// and topic, so both the text and the audio are informative.
pub fn synth_corpus(n: usize, seed: u64, spec: &SynthSpec) -> Result<Vec<DialogueHistory>> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "synthetic corpus size must be ≥ 1".into(),
        ));
    }
    if spec.history_turns == 0 || spec.history_turns.is_multiple_of(2) {
        return Err(Error::InvalidArgument(
            "history_turns must be odd so the target is a listener turn".into(),
        ));
    }
    if spec.profiles.is_empty() {
        return Err(Error::InvalidArgument("no energy profiles".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let profile = spec.profiles[i % spec.profiles.len()];
        let b = bank(profile);
        let topic = rng.gen_range(0..b.speaker.len());
        let freq = *[180.0, 220.0, 260.0, 300.0].choose(&mut rng).unwrap();
        let flat_wave = synth_audio(&mut rng, spec, profile.gain(0, 1), freq)?;
        let mut turns = Vec::with_capacity(spec.history_turns + 1);
        for k in 0..spec.history_turns {
            let (role, text) = if k == 0 {
                (Role::Speaker, b.speaker[topic])
            } else if k % 2 == 0 {
                (Role::Speaker, *b.follow_up.choose(&mut rng).unwrap())
            } else {
                (Role::Listener, *b.listener.choose(&mut rng).unwrap())
            };
            let mut t = Turn::new(k, role, text);
            t.waveform = Some(match profile {
                EnergyProfile::Flat => flat_wave.clone(),
                p => synth_audio(&mut rng, spec, p.gain(k, spec.history_turns), freq)?,
            });
            turns.push(t);
        }
        turns.push(Turn::new(
            spec.history_turns,
            Role::Listener,
            b.responses[topic],
        ));
        out.push(DialogueHistory::from_turns(format!("synth{i:04}"), turns)?);
    }
    Ok(out)
}

/// Energy profile a synthetic dialogue was generated with.
pub fn synth_profile(index: usize, spec: &SynthSpec) -> EnergyProfile {
    spec.profiles[index % spec.profiles.len()]
}

/// Write every in-memory waveform as `<dir>/<dialogue_id>utt<k>.wav` and
/// point the turns at the files.
pub fn export_audio(dialogues: &mut [DialogueHistory], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for d in dialogues.iter_mut() {
        for t in d.turns.iter_mut() {
            if let Some(w) = &t.waveform {
                let p = dir.join(format!("{}utt{}.wav", d.dialogue_id, t.index));
                w.write_wav(&p)?;
                t.audio_path = Some(p);
            }
        }
    }
    Ok(())
}
