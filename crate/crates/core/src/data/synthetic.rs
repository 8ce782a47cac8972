//! Noisy clusters on the unit sphere standing in for encoder outputs.
//!
//! Every class has a mean direction `μ_c = normalize(anchor + κ·g/√d)` around
//! a shared random anchor. Images are `normalize(μ_c + σ_img·g/√d)` and the
//! class prompt is `normalize(μ_c + σ_txt·g/√d)`, with `g` standard normal.
//! The `1/√d` factor makes each σ the expected noise norm relative to the
//! unit signal, independent of `d`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{EmbeddingDataset, Record};
use crate::error::{Error, Result};
use crate::numerics::{l2_normalize, streams, EmbeddingVec, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub num_classes: usize,
    /// κ: spread of class mean directions around the shared anchor.
    pub class_separation: f64,
    pub image_noise: f64,
    pub text_noise: f64,
    /// Image records generated per class.
    pub shots_per_class: usize,
    /// `None` inside an experiment means "use the repeat's seed".
    pub seed: Option<u64>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            num_classes: 30,
            class_separation: 1.0,
            image_noise: 0.7,
            text_noise: 1.0,
            shots_per_class: 50,
            seed: None,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::config("synthetic dim must be at least 2"));
        }
        if self.num_classes < 2 {
            return Err(Error::config("synthetic num_classes must be at least 2"));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("image_noise", self.image_noise),
            ("text_noise", self.text_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite and nonnegative")));
            }
        }
        if self.shots_per_class == 0 {
            return Err(Error::config("shots_per_class must be positive"));
        }
        Ok(())
    }
}

pub fn class_name(index: usize) -> String {
    format!("class_{index:03}")
}

fn noisy(center: &[f64], sigma: f64, rng: &mut RngStream) -> Result<Vec<f64>> {
    let scale = sigma / (center.len() as f64).sqrt();
    let v: Vec<f64> = center
        .iter()
        .zip(rng.gaussian_vec(center.len()))
        .map(|(c, g)| c + scale * g)
        .collect();
    l2_normalize(&v)
}

/// Image dataset plus one prompt embedding per class.
pub fn generate_synthetic(
    cfg: &SyntheticConfig,
    seed: u64,
) -> Result<(EmbeddingDataset, BTreeMap<usize, EmbeddingVec>)> {
    cfg.validate()?;
    let d = cfg.dim;
    let mut rng = RngStream::new(seed, streams::DATA);
    let anchor = l2_normalize(&rng.gaussian_vec(d))?;
    let mut prompts = BTreeMap::new();
    let mut records = Vec::with_capacity(cfg.num_classes * cfg.shots_per_class);
    for c in 0..cfg.num_classes {
        let mean = noisy(&anchor, cfg.class_separation, &mut rng)?;
        prompts.insert(c, EmbeddingVec::new(noisy(&mean, cfg.text_noise, &mut rng)?)?);
        for _ in 0..cfg.shots_per_class {
            records.push(Record {
                class: c,
                embedding: EmbeddingVec::new(noisy(&mean, cfg.image_noise, &mut rng)?)?,
            });
        }
    }
    let dataset = EmbeddingDataset {
        dim: d,
        class_names: (0..cfg.num_classes).map(class_name).collect(),
        records,
    };
    Ok((dataset, prompts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{argmax, dot, norm};

    fn zero_shot_accuracy(ds: &EmbeddingDataset, prompts: &BTreeMap<usize, EmbeddingVec>) -> f64 {
        let correct = ds
            .records
            .iter()
            .filter(|r| {
                let scores: Vec<f64> = prompts.values().map(|p| dot(p, &r.embedding)).collect();
                argmax(&scores) == Some(r.class)
            })
            .count();
        correct as f64 / ds.records.len() as f64
    }

    #[test]
    fn noiseless_images_equal_prompts() {
        let cfg = SyntheticConfig {
            image_noise: 0.0,
            text_noise: 0.0,
            shots_per_class: 3,
            num_classes: 8,
            ..SyntheticConfig::default()
        };
        let (ds, prompts) = generate_synthetic(&cfg, 4).unwrap();
        for r in &ds.records {
            assert_eq!(r.embedding, prompts[&r.class]);
        }
        assert_eq!(zero_shot_accuracy(&ds, &prompts), 1.0);
    }

    #[test]
    fn outputs_are_unit_norm_and_deterministic() {
        let cfg = SyntheticConfig {
            shots_per_class: 5,
            ..SyntheticConfig::default()
        };
        let (ds, prompts) = generate_synthetic(&cfg, 9).unwrap();
        for v in ds.records.iter().map(|r| &r.embedding).chain(prompts.values()) {
            assert!((norm(v) - 1.0).abs() < 1e-12);
        }
        assert_eq!(ds.records.len(), 30 * 5);
        let (ds2, prompts2) = generate_synthetic(&cfg, 9).unwrap();
        assert_eq!(ds, ds2);
        assert_eq!(prompts, prompts2);
        let (ds3, _) = generate_synthetic(&cfg, 10).unwrap();
        assert_ne!(ds, ds3);
    }

    #[test]
    fn low_noise_zero_shot_is_accurate() {
        let cfg = SyntheticConfig {
            dim: 64,
            num_classes: 30,
            image_noise: 0.3,
            text_noise: 0.1,
            shots_per_class: 20,
            ..SyntheticConfig::default()
        };
        for seed in 0..5 {
            let (ds, prompts) = generate_synthetic(&cfg, seed).unwrap();
            let acc = zero_shot_accuracy(&ds, &prompts);
            assert!(acc >= 0.9, "seed {seed}: accuracy {acc}");
        }
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SyntheticConfig { dim: 1, ..SyntheticConfig::default() },
            SyntheticConfig { num_classes: 1, ..SyntheticConfig::default() },
            SyntheticConfig { image_noise: -0.1, ..SyntheticConfig::default() },
            SyntheticConfig { shots_per_class: 0, ..SyntheticConfig::default() },
        ] {
            assert!(generate_synthetic(&cfg, 0).is_err());
        }
    }
}
