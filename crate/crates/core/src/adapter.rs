//! The trainable pieces: a two-layer gating adapter over visual embeddings
//! and per-class residual perturbations of prompt embeddings.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `self · x + bias`
    fn affine(&self, x: &[f64], bias: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                self.row(r)
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum::<f64>()
                    + bias[r]
            })
            .collect()
    }

    /// `selfᵀ · y`
    fn transpose_mul(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, w) in out.iter_mut().zip(self.row(r)) {
                *o += w * yr;
            }
        }
        out
    }

    /// `self += outer(u, v)`
    fn add_outer(&mut self, u: &[f64], v: &[f64]) {
        for (r, &ur) in u.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &vc) in row.iter_mut().zip(v) {
                *w += ur * vc;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// Elementwise sigmoid; every gate entry in (0, 1).
    #[default]
    Sigmoid,
    /// Softmax over embedding dimensions; gate entries sum to one.
    Softmax,
}

/// Adapter weights: `gate = G(W2 · relu(W1 · z + b1) + b2)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub gate: GateKind,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Debug, Clone)]
pub struct AdapterForward {
    pub pre_hidden: Vec<f64>,
    pub hidden: Vec<f64>,
    pub gate: Vec<f64>,
    pub adapted: Vec<f64>,
}

impl AdapterParams {
    pub fn zeros(dim: usize, hidden: usize, gate: GateKind) -> Self {
        Self {
            w1: Matrix::zeros(hidden, dim),
            b1: vec![0.0; hidden],
            w2: Matrix::zeros(dim, hidden),
            b2: vec![0.0; dim],
            gate,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows
    }

    /// Parameter tensors in a fixed order: `w1, b1, w2, b2`.
    pub fn tensors(&self) -> [&[f64]; 4] {
        [&self.w1.data, &self.b1, &self.w2.data, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 4] {
        [
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
        ]
    }

    /// Which of [`Self::tensors`] are weight matrices (as opposed to biases).
    pub const WEIGHT_MASK: [bool; 4] = [true, false, true, false];

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dim(), self.hidden_dim(), self.gate)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.gate == other.gate
            && self.w1.rows == other.w1.rows
            && self.w1.cols == other.w1.cols
            && self.w2.rows == other.w2.rows
            && self.w2.cols == other.w2.cols
            && self.b1.len() == other.b1.len()
            && self.b2.len() == other.b2.len()
    }

    pub fn forward(&self, z: &[f64]) -> Result<AdapterForward> {
        if z.len() != self.dim() {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                found: z.len(),
            });
        }
        let pre_hidden = self.w1.affine(z, &self.b1);
        let hidden: Vec<f64> = pre_hidden.iter().map(|a| a.max(0.0)).collect();
        let logits = self.w2.affine(&hidden, &self.b2);
        let gate = match self.gate {
            GateKind::Sigmoid => logits.iter().map(|u| sigmoid(*u)).collect(),
            GateKind::Softmax => crate::numerics::softmax(&logits, 1.0)?,
        };
        let adapted = gate.iter().zip(z).map(|(g, x)| g * x).collect();
        Ok(AdapterForward {
            pre_hidden,
            hidden,
            gate,
            adapted,
        })
    }

    /// Accumulates into `grads` the parameter gradient given `d loss / d z'`.
    pub fn backward(
        &self,
        z: &[f64],
        fwd: &AdapterForward,
        grad_adapted: &[f64],
        grads: &mut AdapterParams,
    ) {
        let grad_gate: Vec<f64> = grad_adapted.iter().zip(z).map(|(g, x)| g * x).collect();
        let grad_logits: Vec<f64> = match self.gate {
            GateKind::Sigmoid => grad_gate
                .iter()
                .zip(&fwd.gate)
                .map(|(dg, g)| dg * g * (1.0 - g))
                .collect(),
            GateKind::Softmax => {
                let inner: f64 = grad_gate.iter().zip(&fwd.gate).map(|(a, b)| a * b).sum();
                grad_gate
                    .iter()
                    .zip(&fwd.gate)
                    .map(|(dg, g)| g * (dg - inner))
                    .collect()
            }
        };
        grads.w2.add_outer(&grad_logits, &fwd.hidden);
        for (b, d) in grads.b2.iter_mut().zip(&grad_logits) {
            *b += d;
        }
        let grad_hidden = self.w2.transpose_mul(&grad_logits);
        let grad_pre: Vec<f64> = grad_hidden
            .iter()
            .zip(&fwd.pre_hidden)
            .map(|(d, a)| if *a > 0.0 { *d } else { 0.0 })
            .collect();
        grads.w1.add_outer(&grad_pre, z);
        for (b, d) in grads.b1.iter_mut().zip(&grad_pre) {
            *b += d;
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Gate and adapted embedding for `z`.
pub fn adapter_forward(params: &AdapterParams, z: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let fwd = params.forward(z)?;
    Ok((fwd.gate, fwd.adapted))
}

/// Xavier-normal weights, zero biases.
pub fn init_adapter(rng: &mut RngStream, dim: usize, hidden: usize, gate: GateKind) -> Result<AdapterParams> {
    if dim == 0 || hidden == 0 {
        return Err(Error::config("adapter dimensions must be positive"));
    }
    let std = (2.0 / (dim + hidden) as f64).sqrt();
    let mut params = AdapterParams::zeros(dim, hidden, gate);
    for w in params.w1.data.iter_mut() {
        *w = std * rng.gaussian();
    }
    for w in params.w2.data.iter_mut() {
        *w = std * rng.gaussian();
    }
    Ok(params)
}

/// How α enters the exported candidate prompts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExportScaling {
    /// `t + α·δ`, the same form used during training.
    #[default]
    Scaled,
    /// `t + δ`, ignoring α at export.
    Unscaled,
}

/// Per-class prompt perturbations held by one client.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientResiduals {
    pub deltas: BTreeMap<usize, Vec<f64>>,
    pub alpha: f64,
}

impl ClientResiduals {
    pub fn classes(&self) -> impl Iterator<Item = usize> + '_ {
        self.deltas.keys().copied()
    }

    pub fn delta(&self, class: usize) -> Result<&[f64]> {
        self.deltas
            .get(&class)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownClass(class))
    }

    fn effective_scale(&self, scaling: ExportScaling) -> f64 {
        match scaling {
            ExportScaling::Scaled => self.alpha,
            ExportScaling::Unscaled => 1.0,
        }
    }
}

/// Zero residuals for every class in `classes`.
pub fn init_residuals(
    classes: impl IntoIterator<Item = usize>,
    dim: usize,
    alpha: f64,
) -> Result<ClientResiduals> {
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::config(format!("alpha must be nonnegative, got {alpha}")));
    }
    let deltas: BTreeMap<usize, Vec<f64>> =
        classes.into_iter().map(|c| (c, vec![0.0; dim])).collect();
    if deltas.is_empty() {
        return Err(Error::Empty("residual class set"));
    }
    Ok(ClientResiduals { deltas, alpha })
}

/// `t + α·δ_class`
pub fn residual_apply(res: &ClientResiduals, t: &[f64], class: usize) -> Result<Vec<f64>> {
    let delta = res.delta(class)?;
    if delta.len() != t.len() {
        return Err(Error::DimMismatch {
            expected: delta.len(),
            found: t.len(),
        });
    }
    Ok(t.iter().zip(delta).map(|(t, d)| t + res.alpha * d).collect())
}

/// Perturbed candidate prompts with labels stripped, in shuffled order.
pub fn export_perturbed_prompts<V: AsRef<[f64]>>(
    res: &ClientResiduals,
    candidate_prompts: &BTreeMap<usize, V>,
    scaling: ExportScaling,
    rng: &mut RngStream,
) -> Result<Vec<Vec<f64>>> {
    let ours: BTreeSet<usize> = res.classes().collect();
    let theirs: BTreeSet<usize> = candidate_prompts.keys().copied().collect();
    if ours != theirs {
        return Err(Error::ClassSetMismatch(format!(
            "residuals cover {} classes, candidate prompts cover {}",
            ours.len(),
            theirs.len()
        )));
    }
    let scale = res.effective_scale(scaling);
    let mut out = Vec::with_capacity(ours.len());
    for (class, delta) in &res.deltas {
        let t = candidate_prompts[class].as_ref();
        if t.len() != delta.len() {
            return Err(Error::DimMismatch {
                expected: delta.len(),
                found: t.len(),
            });
        }
        out.push(t.iter().zip(delta).map(|(t, d)| t + scale * d).collect());
    }
    rng.shuffle(&mut out);
    Ok(out)
}
