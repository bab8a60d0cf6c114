//! Finite-difference verification of analytic gradients.
//!
//! A [`GradComponent`] owns a parameter set and knows how to build a scalar
//! loss on a [`Graph`]. The harness compares the tape's gradients with
//! central differences, tensor by tensor. The error measure is
//! `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂, floor)`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::params::ParamStore;
use crate::tensor::{Graph, Mat, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub norm_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tolerance: 1e-4,
            norm_floor: 1e-6,
        }
    }
}

pub trait GradComponent {
    fn name(&self) -> &str;

    fn params(&self) -> &ParamStore;

    /// Build the scalar loss for the given parameter values.
    fn loss(&self, store: &ParamStore) -> Result<(Graph, Var)>;

    /// Analytic gradients; defaults to the tape's reverse pass.
    fn analytic(&self, store: &ParamStore) -> Result<BTreeMap<String, Mat>> {
        let (g, out) = self.loss(store)?;
        let grads = g.backward(out)?;
        Ok(g.param_grads(&grads))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub tensor: String,
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentReport {
    pub component: String,
    pub passed: bool,
    pub worst_rel_error: f64,
    pub tensors: Vec<TensorCheck>,
}

impl ComponentReport {
    pub fn failing(&self) -> impl Iterator<Item = &TensorCheck> {
        self.tensors.iter().filter(|t| !t.passed)
    }
}

fn eval(component: &dyn GradComponent, store: &ParamStore) -> Result<f64> {
    let (g, out) = component.loss(store)?;
    Ok(g.scalar(out))
}

/// Central-difference gradient of every trainable tensor.
pub fn numeric_grads(component: &dyn GradComponent, step: f64) -> Result<BTreeMap<String, Mat>> {
    let mut store = component.params().clone();
    let names: Vec<String> = store
        .names()
        .filter(|n| component.params().is_trainable(n))
        .map(str::to_string)
        .collect();
    let mut out = BTreeMap::new();
    for name in names {
        let shape = store.get(&name)?.dim();
        let mut grad = Mat::zeros(shape);
        for idx in ndarray::indices(shape) {
            let orig = store.get(&name)?[idx];
            store.get_mut(&name)?[idx] = orig + step;
            let plus = eval(component, &store)?;
            store.get_mut(&name)?[idx] = orig - step;
            let minus = eval(component, &store)?;
            store.get_mut(&name)?[idx] = orig;
            grad[idx] = (plus - minus) / (2.0 * step);
        }
        out.insert(name, grad);
    }
    Ok(out)
}

fn norm(m: &Mat) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn check_component(
    component: &dyn GradComponent,
    cfg: &GradCheckConfig,
) -> Result<ComponentReport> {
    let analytic = component.analytic(component.params())?;
    let numeric = numeric_grads(component, cfg.step)?;
    let mut tensors = Vec::new();
    for (name, n) in &numeric {
        let a = analytic
            .get(name)
            .cloned()
            .unwrap_or_else(|| Mat::zeros(n.dim()));
        let diff = &a - n;
        let denom = norm(&a).max(norm(n)).max(cfg.norm_floor);
        let rel_error = norm(&diff) / denom;
        let max_abs_error = diff.iter().fold(0.0f64, |m, x| m.max(x.abs()));
        tensors.push(TensorCheck {
            tensor: name.clone(),
            rel_error,
            max_abs_error,
            passed: rel_error <= cfg.tolerance && rel_error.is_finite(),
        });
    }
    let worst_rel_error = tensors.iter().fold(0.0f64, |m, t| m.max(t.rel_error));
    Ok(ComponentReport {
        component: component.name().to_string(),
        passed: tensors.iter().all(|t| t.passed),
        worst_rel_error,
        tensors,
    })
}
