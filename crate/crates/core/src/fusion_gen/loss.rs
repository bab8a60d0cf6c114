//! Response-token cross-entropy, temperature-softened distillation and
//! their weighted sum, both as plain values and on the tape.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{log_softmax_rows, Graph, Mat, Var};

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Which side of the divergence the speech path sits on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// `KL(speech ‖ text)`.
    #[default]
    StudentTeacher,
    /// `KL(text ‖ speech)`.
    TeacherStudent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight on the distillation term.
    pub lambda: f64,
    pub direction: KlDirection,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            lambda: 1.0,
            direction: KlDirection::StudentTeacher,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "temperature {} must be > 0",
                self.temperature
            )));
        }
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "distillation weight {} must be ≥ 0",
                self.lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub kl: f64,
    pub total: f64,
    pub n_valid: usize,
    pub temperature: f64,
    pub weight: f64,
}

pub fn total_loss(ce: f64, kl: f64, lambda: f64) -> f64 {
    ce + lambda * kl
}

fn valid_rows(valid: &[bool], rows: usize) -> Result<Vec<usize>> {
    if valid.len() != rows {
        return Err(Error::Shape(format!(
            "valid mask length {} vs {rows} positions",
            valid.len()
        )));
    }
    let v: Vec<usize> = (0..rows).filter(|&i| valid[i]).collect();
    if v.is_empty() {
        return Err(Error::NoValidTargets);
    }
    Ok(v)
}

/// `−(1/|V|) Σ_{t∈V} ln p_t(y_t)` over rows of `dists`.
pub fn ce_loss(dists: &Mat, targets: &[u32], valid: &[bool]) -> Result<f64> {
    let rows = valid_rows(valid, dists.nrows())?;
    if targets.len() != dists.nrows() {
        return Err(Error::Shape("targets length vs positions".into()));
    }
    let mut sum = 0.0;
    for &t in &rows {
        let y = targets[t] as usize;
        if y >= dists.ncols() {
            return Err(Error::InvalidArgument(format!(
                "target {y} outside vocabulary"
            )));
        }
        sum -= dists[[t, y]].max(PROB_FLOOR).ln();
    }
    Ok(sum / rows.len() as f64)
}

/// Temperature-softened log-distribution: `log softmax(ln max(p, floor) / T)`.
fn soften(p: &Mat, rows: &[usize], temperature: f64) -> Mat {
    let mut z = Mat::zeros((rows.len(), p.ncols()));
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..p.ncols() {
            z[[i, j]] = p[[r, j]].max(PROB_FLOOR).ln() / temperature;
        }
    }
    log_softmax_rows(&z)
}

fn floor_log(m: &Mat) -> Mat {
    let lo = PROB_FLOOR.ln();
    m.mapv(|v| v.max(lo))
}

/// Mean over valid rows of the KL divergence between the softened speech
/// and text distributions.
pub fn kl_distill_loss(
    p_speech: &Mat,
    p_text: &Mat,
    valid: &[bool],
    temperature: f64,
    direction: KlDirection,
) -> Result<f64> {
    if p_speech.dim() != p_text.dim() {
        return Err(Error::Shape(format!(
            "student {:?} vs teacher {:?}",
            p_speech.dim(),
            p_text.dim()
        )));
    }
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument("temperature must be > 0".into()));
    }
    let rows = valid_rows(valid, p_speech.nrows())?;
    let ls = floor_log(&soften(p_speech, &rows, temperature));
    let lt = floor_log(&soften(p_text, &rows, temperature));
    let (lp, lq) = match direction {
        KlDirection::StudentTeacher => (&ls, &lt),
        KlDirection::TeacherStudent => (&lt, &ls),
    };
    let mut sum = 0.0;
    for (a, b) in lp.iter().zip(lq.iter()) {
        sum += a.exp() * (a - b);
    }
    Ok(sum / rows.len() as f64)
}

/// Cross-entropy from logits; `targets[k]` is the label for row `rows[k]`.
pub fn ce_from_logits(g: &mut Graph, logits: Var, rows: &[usize], targets: &[u32]) -> Result<Var> {
    if rows.is_empty() {
        return Err(Error::NoValidTargets);
    }
    if rows.len() != targets.len() {
        return Err(Error::Shape("rows vs targets".into()));
    }
    let z = g.gather_rows(logits, rows)?;
    let ls = g.log_softmax_rows(z);
    let at: Vec<(usize, usize)> = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| (i, t as usize))
        .collect();
    let picked = g.pick(ls, &at)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0 / rows.len() as f64))
}

/// Distillation from student logits on the tape to fixed teacher logits.
/// `student_rows[k]` is aligned with `teacher_rows[k]`. No gradient
/// reaches the teacher.
pub fn kl_from_logits(
    g: &mut Graph,
    student: Var,
    student_rows: &[usize],
    teacher: &Mat,
    teacher_rows: &[usize],
    cfg: &DistillConfig,
) -> Result<Var> {
    if student_rows.is_empty() {
        return Err(Error::NoValidTargets);
    }
    if student_rows.len() != teacher_rows.len() {
        return Err(Error::Shape("student rows vs teacher rows".into()));
    }
    if g.shape(student).1 != teacher.ncols() {
        return Err(Error::Shape("student vs teacher vocabulary".into()));
    }
    let n = student_rows.len() as f64;
    let z = g.gather_rows(student, student_rows)?;
    let z = g.scale(z, 1.0 / cfg.temperature);
    let ls = g.log_softmax_rows(z);
    let mut tz = Mat::zeros((teacher_rows.len(), teacher.ncols()));
    for (i, &r) in teacher_rows.iter().enumerate() {
        if r >= teacher.nrows() {
            return Err(Error::Shape(format!("teacher row {r} out of range")));
        }
        tz.row_mut(i).assign(&(&teacher.row(r) / cfg.temperature));
    }
    let lt = floor_log(&log_softmax_rows(&tz));
    let terms = match cfg.direction {
        KlDirection::StudentTeacher => {
            let ps = g.exp(ls);
            let neg_lt = g.constant(-&lt);
            let diff = g.add(ls, neg_lt)?;
            g.mul(ps, diff)?
        }
        KlDirection::TeacherStudent => {
            let pt = lt.mapv(f64::exp);
            let neg = g.scale(ls, -1.0);
            let lt_c = g.constant(lt);
            let diff = g.add(neg, lt_c)?;
            g.mul_const(diff, pt)?
        }
    };
    let s = g.sum(terms);
    Ok(g.scale(s, 1.0 / n))
}
