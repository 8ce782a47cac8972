//! Symmetric contrastive adaptation loss, its hand-derived gradients with
//! respect to the adapter and the residuals, and the AdamW step.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterParams, ClientResiduals};
use crate::error::{Error, Result};
use crate::numerics::{dot, log_sum_exp, norm};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub local_epochs: usize,
    pub global_epochs: usize,
    /// `None` trains on the full local shard at every step.
    pub batch_size: Option<usize>,
    pub loss_temperature: f64,
    pub normalize_before_loss: bool,
    pub optimizer: AdamWConfig,
    /// Drop AdamW moments at the start of every global round.
    pub reset_optimizer_each_round: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-5,
            local_epochs: 2,
            global_epochs: 2,
            batch_size: None,
            loss_temperature: 0.07,
            normalize_before_loss: true,
            optimizer: AdamWConfig::default(),
            reset_optimizer_each_round: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config("learning_rate must be finite and nonnegative"));
        }
        if self.global_epochs == 0 {
            return Err(Error::config("global_epochs must be at least 1"));
        }
        if !(self.loss_temperature > 0.0) {
            return Err(Error::config("loss_temperature must be positive"));
        }
        if self.batch_size == Some(0) {
            return Err(Error::config("batch_size must be positive"));
        }
        let o = &self.optimizer;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::config("AdamW betas must lie in [0, 1)"));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::config("AdamW eps must be positive and weight_decay nonnegative"));
        }
        Ok(())
    }
}

/// Gradients mirroring the trainable parameters of one client.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub d_adapter: AdapterParams,
    pub d_deltas: BTreeMap<usize, Vec<f64>>,
}

impl GradientSet {
    pub fn zeros_like(adapter: &AdapterParams, residuals: &ClientResiduals) -> Self {
        Self {
            d_adapter: adapter.zeros_like(),
            d_deltas: residuals
                .deltas
                .iter()
                .map(|(c, d)| (*c, vec![0.0; d.len()]))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_adapter.is_finite() && self.d_deltas.values().all(|d| d.iter().all(|v| v.is_finite()))
    }
}

/// Loss value together with gradients on the (unnormalized) inputs.
struct ContrastiveOutput {
    loss: f64,
    grad_images: Vec<Vec<f64>>,
    grad_prompts: Vec<Vec<f64>>,
}

fn prepare<'a>(v: &'a [f64], normalize: bool) -> Result<(std::borrow::Cow<'a, [f64]>, f64)> {
    if !normalize {
        return Ok((std::borrow::Cow::Borrowed(v), 1.0));
    }
    let n = norm(v);
    if n == 0.0 {
        return Err(Error::Degenerate("zero-norm embedding in contrastive loss"));
    }
    Ok((std::borrow::Cow::Owned(v.iter().map(|x| x / n).collect()), n))
}

/// Back through `x ↦ x/‖x‖`: `(g − x̂(x̂·g)) / ‖x‖`.
fn normalize_backward(unit: &[f64], n: f64, grad: &[f64]) -> Vec<f64> {
    let proj = dot(unit, grad);
    grad.iter().zip(unit).map(|(g, u)| (g - u * proj) / n).collect()
}

fn contrastive(
    images: &[Vec<f64>],
    prompts: &[Vec<f64>],
    temperature: f64,
    normalize: bool,
) -> Result<ContrastiveOutput> {
    let n = images.len();
    if n == 0 || prompts.is_empty() {
        return Err(Error::Empty("contrastive batch"));
    }
    if prompts.len() != n {
        return Err(Error::DimMismatch {
            expected: n,
            found: prompts.len(),
        });
    }
    if !(temperature > 0.0) {
        return Err(Error::config("loss temperature must be positive"));
    }
    let dim = images[0].len();
    for v in images.iter().chain(prompts) {
        if v.len() != dim {
            return Err(Error::DimMismatch {
                expected: dim,
                found: v.len(),
            });
        }
    }

    let a: Vec<_> = images.iter().map(|v| prepare(v, normalize)).collect::<Result<_>>()?;
    let b: Vec<_> = prompts.iter().map(|v| prepare(v, normalize)).collect::<Result<_>>()?;

    let mut sim = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            sim[i * n + j] = dot(&a[i].0, &b[j].0) / temperature;
        }
    }
    let row_lse: Vec<f64> = (0..n).map(|i| log_sum_exp(&sim[i * n..(i + 1) * n])).collect();
    let col_lse: Vec<f64> = (0..n)
        .map(|j| {
            let col: Vec<f64> = (0..n).map(|i| sim[i * n + j]).collect();
            log_sum_exp(&col)
        })
        .collect();

    let inv_n = 1.0 / n as f64;
    let loss = (0..n)
        .map(|i| (row_lse[i] - sim[i * n + i]) + (col_lse[i] - sim[i * n + i]))
        .sum::<f64>()
        * inv_n;

    // dL/dS_ij = (P_ij + Q_ij − 2·[i=j]) / N with P row-softmax, Q column-softmax.
    let mut g = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let s = sim[i * n + j];
            let mut v = (s - row_lse[i]).exp() + (s - col_lse[j]).exp();
            if i == j {
                v -= 2.0;
            }
            g[i * n + j] = v * inv_n / temperature;
        }
    }

    let mut grad_images = Vec::with_capacity(n);
    for i in 0..n {
        let mut gi = vec![0.0; dim];
        for j in 0..n {
            let w = g[i * n + j];
            for (o, x) in gi.iter_mut().zip(b[j].0.iter()) {
                *o += w * x;
            }
        }
        grad_images.push(if normalize {
            normalize_backward(&a[i].0, a[i].1, &gi)
        } else {
            gi
        });
    }
    let mut grad_prompts = Vec::with_capacity(n);
    for j in 0..n {
        let mut gj = vec![0.0; dim];
        for i in 0..n {
            let w = g[i * n + j];
            for (o, x) in gj.iter_mut().zip(a[i].0.iter()) {
                *o += w * x;
            }
        }
        grad_prompts.push(if normalize {
            normalize_backward(&b[j].0, b[j].1, &gj)
        } else {
            gj
        });
    }

    Ok(ContrastiveOutput {
        loss,
        grad_images,
        grad_prompts,
    })
}

/// Symmetric in-batch InfoNCE between adapted images and perturbed
/// ground-truth prompts; pair `i` is the positive for row and column `i`.
pub fn adaptation_loss(
    batch_z_adapted: &[Vec<f64>],
    batch_t_perturbed: &[Vec<f64>],
    cfg: &TrainConfig,
) -> Result<f64> {
    contrastive(
        batch_z_adapted,
        batch_t_perturbed,
        cfg.loss_temperature,
        cfg.normalize_before_loss,
    )
    .map(|o| o.loss)
}

/// Forward through adapter and residuals, then the exact gradient of the
/// adaptation loss with respect to every adapter tensor and every δ.
pub fn loss_backward<V: AsRef<[f64]>, W: AsRef<[f64]>>(
    batch_z_raw: &[V],
    batch_labels: &[usize],
    adapter: &AdapterParams,
    residuals: &ClientResiduals,
    prompt_embeddings: &BTreeMap<usize, W>,
    cfg: &TrainConfig,
) -> Result<(f64, GradientSet)> {
    if batch_z_raw.len() != batch_labels.len() {
        return Err(Error::DimMismatch {
            expected: batch_z_raw.len(),
            found: batch_labels.len(),
        });
    }
    let mut forwards = Vec::with_capacity(batch_z_raw.len());
    let mut perturbed = Vec::with_capacity(batch_z_raw.len());
    for (z, &y) in batch_z_raw.iter().zip(batch_labels) {
        forwards.push(adapter.forward(z.as_ref())?);
        let t = prompt_embeddings
            .get(&y)
            .ok_or(Error::UnknownClass(y))?
            .as_ref();
        perturbed.push(crate::adapter::residual_apply(residuals, t, y)?);
    }
    let adapted: Vec<Vec<f64>> = forwards.iter().map(|f| f.adapted.clone()).collect();
    let out = contrastive(
        &adapted,
        &perturbed,
        cfg.loss_temperature,
        cfg.normalize_before_loss,
    )?;

    let mut grads = GradientSet::zeros_like(adapter, residuals);
    for ((z, fwd), gz) in batch_z_raw.iter().zip(&forwards).zip(&out.grad_images) {
        adapter.backward(z.as_ref(), fwd, gz, &mut grads.d_adapter);
    }
    for (&y, gt) in batch_labels.iter().zip(&out.grad_prompts) {
        let d = grads.d_deltas.get_mut(&y).ok_or(Error::UnknownClass(y))?;
        for (o, g) in d.iter_mut().zip(gt) {
            *o += residuals.alpha * g;
        }
    }
    Ok((out.loss, grads))
}

/// First and second moments for every trainable tensor, plus the step count.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamWState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamWState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reset(&mut self) {
        *self = Self::default();
    }
}

/// One AdamW update with bias correction. Decoupled weight decay touches
/// adapter weight matrices only; biases and residuals are never decayed.
pub fn adamw_step(
    adapter: &mut AdapterParams,
    residuals: &mut ClientResiduals,
    grads: &GradientSet,
    state: &mut AdamWState,
    learning_rate: f64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !grads.d_adapter.same_shape(adapter)
        || grads.d_deltas.len() != residuals.deltas.len()
        || grads
            .d_deltas
            .iter()
            .zip(&residuals.deltas)
            .any(|((gc, g), (pc, p))| gc != pc || g.len() != p.len())
    {
        return Err(Error::config("gradient shape does not match parameters"));
    }

    let mut params: Vec<(&mut [f64], bool)> = Vec::new();
    for (t, decay) in adapter.tensors_mut().into_iter().zip(AdapterParams::WEIGHT_MASK) {
        params.push((t, decay));
    }
    for d in residuals.deltas.values_mut() {
        params.push((d.as_mut_slice(), false));
    }
    let mut grad_tensors: Vec<&[f64]> = grads.d_adapter.tensors().to_vec();
    grad_tensors.extend(grads.d_deltas.values().map(Vec::as_slice));

    if state.m.is_empty() {
        state.m = params.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
        state.v = state.m.clone();
    } else if state.m.len() != params.len()
        || state.m.iter().zip(&params).any(|(m, (p, _))| m.len() != p.len())
    {
        return Err(Error::config("optimizer state shape does not match parameters"));
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, decay), g), (m, v)) in params
        .into_iter()
        .zip(grad_tensors)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        for i in 0..p.len() {
            if decay {
                p[i] *= 1.0 - learning_rate * cfg.weight_decay;
            }
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= learning_rate * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}
