#![allow(dead_code)]

use std::collections::BTreeMap;

use fedmp::adapter::{init_adapter, init_residuals, AdapterParams, ClientResiduals, GateKind};
use fedmp::data::{SplitConfig, SyntheticConfig};
use fedmp::experiment::{DataSource, ExperimentConfig};
use fedmp::numerics::RngStream;
use fedmp::training::{loss_backward, TrainConfig};

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error, so entries where both
/// gradients vanish (dead ReLU rows, absent classes) compare as equal.
pub const REL_FLOOR: f64 = 1e-7;

pub struct Problem {
    pub z: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub adapter: AdapterParams,
    pub residuals: ClientResiduals,
    pub prompts: BTreeMap<usize, Vec<f64>>,
    pub cfg: TrainConfig,
}

/// d = h = 8, N = 4, random biases and residuals so no term sits at zero.
pub fn random_problem(seed: u64, gate: GateKind, normalize: bool) -> Problem {
    let (d, h, n) = (8, 8, 4);
    let mut rng = RngStream::new(seed, 99);
    let mut adapter = init_adapter(&mut rng, d, h, gate).unwrap();
    for b in adapter.b1.iter_mut().chain(adapter.b2.iter_mut()) {
        *b = 0.2 * rng.gaussian();
    }
    let classes = [0usize, 1, 2, 3];
    let mut residuals = init_residuals(classes, d, 0.7).unwrap();
    for delta in residuals.deltas.values_mut() {
        *delta = rng.gaussian_vec(d).iter().map(|x| 0.3 * x).collect();
    }
    let prompts = classes.iter().map(|&c| (c, rng.gaussian_vec(d))).collect();
    let z = (0..n).map(|_| rng.gaussian_vec(d)).collect();
    Problem {
        z,
        // Class 0 appears twice, class 3 never.
        labels: vec![0, 1, 2, 0],
        adapter,
        residuals,
        prompts,
        cfg: TrainConfig {
            normalize_before_loss: normalize,
            ..TrainConfig::default()
        },
    }
}

fn loss(p: &Problem, adapter: &AdapterParams, residuals: &ClientResiduals) -> f64 {
    loss_backward(&p.z, &p.labels, adapter, residuals, &p.prompts, &p.cfg).unwrap().0
}

fn rel(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Largest relative error between the analytic gradient and central
/// differences over every adapter parameter and every residual entry.
pub fn max_gradient_error(p: &Problem) -> f64 {
    let (_, grads) = loss_backward(&p.z, &p.labels, &p.adapter, &p.residuals, &p.prompts, &p.cfg).unwrap();
    let mut worst = 0.0f64;
    let analytic = grads.d_adapter.tensors();
    for t in 0..4 {
        for i in 0..analytic[t].len() {
            let mut plus = p.adapter.clone();
            plus.tensors_mut()[t][i] += FD_STEP;
            let mut minus = p.adapter.clone();
            minus.tensors_mut()[t][i] -= FD_STEP;
            let numeric = (loss(p, &plus, &p.residuals) - loss(p, &minus, &p.residuals)) / (2.0 * FD_STEP);
            worst = worst.max(rel(analytic[t][i], numeric));
        }
    }
    for (c, g) in &grads.d_deltas {
        for i in 0..g.len() {
            let mut plus = p.residuals.clone();
            plus.deltas.get_mut(c).unwrap()[i] += FD_STEP;
            let mut minus = p.residuals.clone();
            minus.deltas.get_mut(c).unwrap()[i] -= FD_STEP;
            let numeric = (loss(p, &p.adapter, &plus) - loss(p, &p.adapter, &minus)) / (2.0 * FD_STEP);
            worst = worst.max(rel(g[i], numeric));
        }
    }
    worst
}

/// Small synthetic setup that runs in well under a second.
pub fn small_config() -> ExperimentConfig {
    ExperimentConfig {
        data: DataSource::Synthetic(SyntheticConfig {
            dim: 16,
            num_classes: 12,
            shots_per_class: 20,
            ..SyntheticConfig::default()
        }),
        split: SplitConfig {
            num_clients: 4,
            num_unseen: 4,
            ..SplitConfig::default()
        },
        repeats: 2,
        ..ExperimentConfig::default()
    }
}

pub fn noiseless(mut cfg: ExperimentConfig) -> ExperimentConfig {
    if let DataSource::Synthetic(s) = &mut cfg.data {
        s.image_noise = 0.0;
        s.text_noise = 0.0;
    }
    cfg
}
