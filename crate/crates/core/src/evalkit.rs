//! Text metrics (BLEU-n, ROUGE-1/2/L, Distinct-n), judge prompts and
//! score parsing, and report formatting.
//!
//! Metric tokenization lowercases, drops punctuation and splits on
//! whitespace.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smoothing value for zero higher-order BLEU precisions.
pub const BLEU_SMOOTHING: f64 = 1e-9;

pub fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace())
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts<T: AsRef<str>>(tokens: &[T], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut m = HashMap::new();
    if n == 0 || tokens.len() < n {
        return m;
    }
    for w in tokens.windows(n) {
        *m.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
    }
    m
}

/// Clipped matches and candidate n-gram total at one order.
fn clipped<T: AsRef<str>>(cand: &[T], refr: &[T], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(refr, n);
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    let total = cand.len().saturating_sub(n - 1);
    let ref_total = refr.len().saturating_sub(n - 1);
    (matched, total, ref_total)
}

#[derive(Debug, Clone, Copy, Default)]
struct BleuStats {
    matched: [usize; 4],
    total: [usize; 4],
    ref_total: [usize; 4],
    cand_len: usize,
    ref_len: usize,
}

impl BleuStats {
    fn add<T: AsRef<str>>(&mut self, cand: &[T], refr: &[T]) {
        for k in 0..4 {
            let (m, t, r) = clipped(cand, refr, k + 1);
            self.matched[k] += m;
            self.total[k] += t;
            self.ref_total[k] += r;
        }
        self.cand_len += cand.len();
        self.ref_len += refr.len();
    }

    fn score(&self, n: usize) -> f64 {
        if self.cand_len == 0 || self.matched[0] == 0 {
            return 0.0;
        }
        let mut log_sum = 0.0;
        for k in 0..n {
            let p = if self.total[k] == 0 && self.ref_total[k] == 0 {
                // neither side has n-grams this long: vacuous agreement
                1.0
            } else if self.matched[k] == 0 {
                BLEU_SMOOTHING
            } else {
                self.matched[k] as f64 / self.total[k] as f64
            };
            log_sum += p.ln();
        }
        let bp = if self.cand_len >= self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.cand_len as f64).exp()
        };
        bp * (log_sum / n as f64).exp()
    }
}

fn check_order(n: usize) -> Result<()> {
    if (1..=4).contains(&n) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "BLEU order {n} not in 1..=4"
        )))
    }
}

/// Sentence BLEU-n: clipped precisions, geometric mean over orders 1..n,
/// brevity penalty. Zero unigram overlap scores exactly 0; other zero
/// precisions are smoothed.
pub fn bleu_n<T: AsRef<str>>(candidate: &[T], reference: &[T], n: usize) -> Result<f64> {
    check_order(n)?;
    if candidate.is_empty() {
        log::warn!("empty candidate scores BLEU 0");
        return Ok(0.0);
    }
    let mut s = BleuStats::default();
    s.add(candidate, reference);
    Ok(s.score(n))
}

/// Corpus BLEU-n: counts and lengths pooled before combining.
pub fn corpus_bleu<T: AsRef<str>>(pairs: &[(Vec<T>, Vec<T>)], n: usize) -> Result<f64> {
    check_order(n)?;
    let mut s = BleuStats::default();
    for (c, r) in pairs {
        s.add(c, r);
    }
    if s.cand_len == 0 {
        log::warn!("all candidates empty; corpus BLEU is 0");
    }
    Ok(s.score(n))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RougeScores {
    pub r1: f64,
    pub r2: f64,
    pub rl: f64,
}

fn f1(overlap: usize, c: usize, r: usize) -> f64 {
    if overlap == 0 || c == 0 || r == 0 {
        return 0.0;
    }
    let p = overlap as f64 / c as f64;
    let rc = overlap as f64 / r as f64;
    2.0 * p * rc / (p + rc)
}

fn rouge_n<T: AsRef<str>>(cand: &[T], refr: &[T], n: usize) -> f64 {
    let (m, c, r) = clipped(cand, refr, n);
    f1(m, c, r)
}

pub fn lcs_len<T: AsRef<str>>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// ROUGE-1/2 as n-gram F1 and ROUGE-L as LCS F1.
pub fn rouge<T: AsRef<str>>(candidate: &[T], reference: &[T]) -> RougeScores {
    RougeScores {
        r1: rouge_n(candidate, reference, 1),
        r2: rouge_n(candidate, reference, 2),
        rl: f1(
            lcs_len(candidate, reference),
            candidate.len(),
            reference.len(),
        ),
    }
}

/// Unique n-grams over total n-grams across all responses.
pub fn distinct_n<T: AsRef<str>>(responses: &[Vec<T>], n: usize) -> f64 {
    let mut seen = HashSet::new();
    let mut total = 0usize;
    for r in responses {
        if n == 0 || r.len() < n {
            continue;
        }
        for w in r.windows(n) {
            seen.insert(w.iter().map(AsRef::as_ref).collect::<Vec<&str>>());
            total += 1;
        }
    }
    if total == 0 {
        log::warn!("no {n}-grams in corpus; distinct-{n} is 0");
        return 0.0;
    }
    seen.len() as f64 / total as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DistinctScores {
    pub d1: f64,
    pub d2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu: [f64; 4],
    pub rouge: RougeScores,
    pub distinct: DistinctScores,
    pub n_samples: usize,
}

/// Corpus BLEU, mean sentence ROUGE, and Distinct over candidates, from
/// raw `(candidate, reference)` strings.
pub fn evaluate(pairs: &[(String, String)]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no samples to evaluate".into()));
    }
    let toks: Vec<(Vec<String>, Vec<String>)> = pairs
        .iter()
        .map(|(c, r)| (normalize(c), normalize(r)))
        .collect();
    let mut bleu = [0.0; 4];
    for (n, b) in bleu.iter_mut().enumerate() {
        *b = corpus_bleu(&toks, n + 1)?;
    }
    let mut rs = RougeScores::default();
    for (c, r) in &toks {
        let s = rouge(c, r);
        rs.r1 += s.r1;
        rs.r2 += s.r2;
        rs.rl += s.rl;
    }
    let n = toks.len() as f64;
    rs.r1 /= n;
    rs.r2 /= n;
    rs.rl /= n;
    let cands: Vec<Vec<String>> = toks.iter().map(|(c, _)| c.clone()).collect();
    Ok(MetricReport {
        bleu,
        rouge: rs,
        distinct: DistinctScores {
            d1: distinct_n(&cands, 1),
            d2: distinct_n(&cands, 2),
        },
        n_samples: toks.len(),
    })
}

/// Fixed-width table: model, BLEU-1..4, B-S (not computed), ROUGE-1/2/L,
/// Dist-1/2. Scores are shown as percentages.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let cols = [
        "BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "B-S", "ROU-1", "ROU-2", "ROU-L", "Dist-1",
        "Dist-2",
    ];
    let name_w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!("{:<name_w$}", "Model");
    for c in cols {
        let _ = write!(out, " {c:>7}");
    }
    out.push('\n');
    for (name, r) in rows {
        let vals = [
            Some(r.bleu[0]),
            Some(r.bleu[1]),
            Some(r.bleu[2]),
            Some(r.bleu[3]),
            None,
            Some(r.rouge.r1),
            Some(r.rouge.r2),
            Some(r.rouge.rl),
            Some(r.distinct.d1),
            Some(r.distinct.d2),
        ];
        let _ = write!(out, "{name:<name_w$}");
        for v in vals {
            match v {
                Some(v) => {
                    let _ = write!(out, " {:>7.2}", v * 100.0);
                }
                None => {
                    let _ = write!(out, " {:>7}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum JudgeDimension {
    Quality,
    Empathy,
    Completeness,
    Fluency,
}

impl JudgeDimension {
    pub const ALL: [JudgeDimension; 4] = [
        Self::Quality,
        Self::Empathy,
        Self::Completeness,
        Self::Fluency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Quality => "quality",
            Self::Empathy => "empathy",
            Self::Completeness => "completeness",
            Self::Fluency => "fluency",
        }
    }

    fn criterion(self) -> &'static str {
        match self {
            Self::Quality => "the helpfulness, harmlessness, and honesty of the response",
            Self::Empathy => "whether it shows empathy and appropriate emotional understanding",
            Self::Completeness => "whether it adequately addresses all aspects of the user's needs without omitting important information",
            Self::Fluency => "the naturalness, coherence, and linguistic quality of the generated response",
        }
    }
}

impl FromStr for JudgeDimension {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown judge dimension {s:?}")))
    }
}

/// Judge prompt for one dimension; `instruction` and `response` are
/// inserted verbatim.
pub fn render_eval_prompt(dimension: JudgeDimension, instruction: &str, response: &str) -> String {
    format!(
        "Given the conversation history and the model's response. You are a helpful and precise assistant for checking the {} of the response.\n\n\
         <instruction>\n{instruction}\n</instruction>\n<response>\n{response}\n</response>\n\n\
         Please evaluate the response with your justification having less than three sentences, and provide a score ranging from 0 to 10 after your justification. \
         When evaluating the response, you should consider {}. The score should be wrapped by <score> and </score>.",
        dimension.name(),
        dimension.criterion()
    )
}

/// First `<score>N</score>` with a numeric body; must lie in `[0, 10]`.
pub fn parse_score(reply: &str) -> Result<f64> {
    let re =
        Regex::new(r"<score>\s*([+-]?(?:\d+(?:\.\d*)?|\.\d+))\s*</score>").expect("valid regex");
    let caps = re.captures(reply).ok_or(Error::NoScore)?;
    let v: f64 = caps[1].parse().map_err(|_| Error::NoScore)?;
    if !(0.0..=10.0).contains(&v) {
        return Err(Error::ScoreOutOfRange(v));
    }
    Ok(v)
}

/// A judge model behind some transport.
pub trait JudgeClient {
    fn complete(&self, prompt: &str) -> Result<String>;
}

/// Replays canned replies in order, cycling.
#[derive(Debug, Default)]
pub struct CannedJudge {
    replies: Vec<String>,
    next: std::cell::Cell<usize>,
    prompts: std::cell::RefCell<Vec<String>>,
}

impl CannedJudge {
    pub fn new(replies: Vec<String>) -> Self {
        Self {
            replies,
            ..Default::default()
        }
    }

    pub fn prompts(&self) -> Vec<String> {
        self.prompts.borrow().clone()
    }
}

impl JudgeClient for CannedJudge {
    fn complete(&self, prompt: &str) -> Result<String> {
        if self.replies.is_empty() {
            return Err(Error::InvalidArgument("canned judge has no replies".into()));
        }
        self.prompts.borrow_mut().push(prompt.to_string());
        let i = self.next.get();
        self.next.set(i + 1);
        Ok(self.replies[i % self.replies.len()].clone())
    }
}

/// Score one response on every dimension.
pub fn judge_response(
    client: &dyn JudgeClient,
    instruction: &str,
    response: &str,
) -> Result<Vec<(JudgeDimension, f64)>> {
    JudgeDimension::ALL
        .into_iter()
        .map(|d| {
            let reply = client.complete(&render_eval_prompt(d, instruction, response))?;
            Ok((d, parse_score(&reply)?))
        })
        .collect()
}
