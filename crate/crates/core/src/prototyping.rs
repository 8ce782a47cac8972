//! Open-vocabulary inference with textual and entropy-gated visual
//! prototypes, processed in stream order.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, cosine, entropy, l2_normalize, norm, softmax};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    /// Softmax temperature of the pseudo prediction.
    pub tau: f64,
    /// Gate threshold as a fraction of `ln |Y_test|`. Zero disables the gate.
    pub epsilon_fraction: f64,
    /// Samples scored against the same store snapshot.
    pub batch_size: usize,
}

impl InferenceConfig {
    pub const GENERIC_EPSILON: f64 = 0.2;
    pub const FINE_GRAINED_EPSILON: f64 = 0.3;
    pub const SEPARABLE_EPSILON: f64 = 0.1;

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::config("tau must be positive"));
        }
        if !(0.0..=1.0).contains(&self.epsilon_fraction) {
            return Err(Error::config("epsilon_fraction must lie in [0, 1]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("inference batch_size must be positive"));
        }
        Ok(())
    }

    /// Absolute entropy threshold for `num_classes` test classes.
    pub fn epsilon(&self, num_classes: usize) -> f64 {
        self.epsilon_fraction * (num_classes as f64).ln()
    }
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            tau: 0.01,
            epsilon_fraction: Self::GENERIC_EPSILON,
            batch_size: 1,
        }
    }
}

/// Running centroid and count of accepted unit vectors per test class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeStore {
    pub centroids: Vec<Option<Vec<f64>>>,
    pub counts: Vec<usize>,
    /// Samples seen so far, accepted or not.
    pub steps: usize,
}

impl PrototypeStore {
    pub fn new(num_classes: usize) -> Self {
        Self {
            centroids: vec![None; num_classes],
            counts: vec![0; num_classes],
            steps: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total_accepted(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `q̄ ← (q̄·|Q| + u) / (|Q| + 1)`
    fn push(&mut self, class: usize, unit: &[f64]) {
        let count = self.counts[class] as f64;
        match &mut self.centroids[class] {
            Some(c) => {
                for (q, u) in c.iter_mut().zip(unit) {
                    *q = (*q * count + u) / (count + 1.0);
                }
            }
            slot @ None => *slot = Some(unit.to_vec()),
        }
        self.counts[class] += 1;
    }
}

fn check_prototypes<P: AsRef<[f64]>>(text_prototypes: &[P]) -> Result<()> {
    if text_prototypes.len() < 2 {
        return Err(Error::config(format!(
            "at least two test classes are required, got {}",
            text_prototypes.len()
        )));
    }
    Ok(())
}

fn cosines<P: AsRef<[f64]>>(z: &[f64], text_prototypes: &[P]) -> Result<Vec<f64>> {
    text_prototypes.iter().map(|p| cosine(z, p.as_ref())).collect()
}

/// Zero-shot label and class probabilities from cosine to text prototypes.
pub fn pseudo_predict<P: AsRef<[f64]>>(
    z_adapted: &[f64],
    text_prototypes: &[P],
    cfg: &InferenceConfig,
) -> Result<(usize, Vec<f64>)> {
    check_prototypes(text_prototypes)?;
    let cos = cosines(z_adapted, text_prototypes)?;
    let probs = softmax(&cos, cfg.tau)?;
    let label = argmax(&cos).ok_or(Error::Empty("text prototypes"))?;
    Ok((label, probs))
}

/// Adds `z′/‖z′‖` to the pseudo-labelled class when the prediction entropy
/// is within the threshold. Returns whether the sample was accepted.
pub fn gate_and_update(
    store: &mut PrototypeStore,
    z_adapted: &[f64],
    pseudo_label: usize,
    probabilities: &[f64],
    cfg: &InferenceConfig,
) -> Result<bool> {
    if probabilities.len() != store.num_classes() {
        return Err(Error::DimMismatch {
            expected: store.num_classes(),
            found: probabilities.len(),
        });
    }
    if pseudo_label >= store.num_classes() {
        return Err(Error::UnknownClass(pseudo_label));
    }
    let h = entropy(probabilities)?;
    let accept = cfg.epsilon_fraction > 0.0 && h <= cfg.epsilon(store.num_classes());
    if accept {
        store.push(pseudo_label, &l2_normalize(z_adapted)?);
    }
    store.steps += 1;
    Ok(accept)
}

/// `cos(z′, p_c) + cos(z′, q̄_c)`; classes without visual prototypes count
/// their text term twice.
pub fn combined_score<P: AsRef<[f64]>>(
    z_adapted: &[f64],
    text_prototypes: &[P],
    store: &PrototypeStore,
) -> Result<Vec<f64>> {
    if text_prototypes.len() != store.num_classes() {
        return Err(Error::DimMismatch {
            expected: store.num_classes(),
            found: text_prototypes.len(),
        });
    }
    text_prototypes
        .iter()
        .zip(&store.centroids)
        .map(|(p, q)| {
            let text = cosine(z_adapted, p.as_ref())?;
            Ok(match q {
                // Antipodal accepted vectors can cancel to a zero centroid.
                Some(q) if norm(q) > 0.0 => text + cosine(z_adapted, q)?,
                _ => 2.0 * text,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StreamOutcome {
    /// Answers from the combined score, emitted before each sample's update.
    pub predictions: Vec<usize>,
    pub pseudo_labels: Vec<usize>,
    pub accepted: usize,
    pub store: PrototypeStore,
}

/// Scores every sample against the store, then routes it into the store
/// under its pseudo label. With `batch_size > 1` a batch is scored against
/// the store as of the batch start and its updates commit together.
pub fn classify_stream<S: AsRef<[f64]>, P: AsRef<[f64]>>(
    samples: &[S],
    text_prototypes: &[P],
    cfg: &InferenceConfig,
) -> Result<StreamOutcome> {
    cfg.validate()?;
    check_prototypes(text_prototypes)?;
    let mut store = PrototypeStore::new(text_prototypes.len());
    let mut predictions = Vec::with_capacity(samples.len());
    let mut pseudo_labels = Vec::with_capacity(samples.len());
    let mut accepted = 0;
    for batch in samples.chunks(cfg.batch_size) {
        let mut pending = Vec::with_capacity(batch.len());
        for z in batch {
            let z = z.as_ref();
            let scores = combined_score(z, text_prototypes, &store)?;
            predictions.push(argmax(&scores).ok_or(Error::Empty("scores"))?);
            let (label, probs) = pseudo_predict(z, text_prototypes, cfg)?;
            pseudo_labels.push(label);
            pending.push((z, label, probs));
        }
        for (z, label, probs) in pending {
            if gate_and_update(&mut store, z, label, &probs, cfg)? {
                accepted += 1;
            }
        }
    }
    Ok(StreamOutcome {
        predictions,
        pseudo_labels,
        accepted,
        store,
    })
}

/// Text-prototype predictions only.
pub fn classify_text_only<S: AsRef<[f64]>, P: AsRef<[f64]>>(
    samples: &[S],
    text_prototypes: &[P],
    cfg: &InferenceConfig,
) -> Result<Vec<usize>> {
    cfg.validate()?;
    samples
        .iter()
        .map(|z| pseudo_predict(z.as_ref(), text_prototypes, cfg).map(|(l, _)| l))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;

    fn cfg() -> InferenceConfig {
        InferenceConfig::default()
    }

    #[test]
    fn pseudo_predict_examples() {
        let text = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let (label, probs) = pseudo_predict(&[0.0, 2.0, 0.0], &text, &cfg()).unwrap();
        assert_eq!(label, 1);
        assert_eq!(argmax(&probs), Some(1));

        let z = [0.3, 0.5, -0.2];
        let a = pseudo_predict(&z, &text, &cfg()).unwrap().0;
        let b = pseudo_predict(&z, &text, &InferenceConfig { tau: 1.0, ..cfg() }).unwrap().0;
        assert_eq!(a, b);

        let (_, probs) = pseudo_predict(&[1.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], &cfg()).unwrap();
        let tail = (-100f64).exp();
        assert!((probs[0] - 1.0).abs() < 1e-15);
        assert!((probs[1] - tail / (1.0 + tail)).abs() / tail < 1e-12);

        assert!(pseudo_predict(&[0.0, 0.0], &[vec![1.0, 0.0], vec![0.0, 1.0]], &cfg()).is_err());
        assert!(pseudo_predict(&[1.0, 0.0], &[vec![1.0, 0.0]], &cfg()).is_err());
    }

    #[test]
    fn first_acceptance_and_two_point_mean() {
        let mut store = PrototypeStore::new(2);
        let confident = [1.0, 0.0];
        assert!(gate_and_update(&mut store, &[3.0, 0.0], 0, &confident, &cfg()).unwrap());
        assert_eq!(store.centroids[0], Some(vec![1.0, 0.0]));
        assert_eq!(store.counts, vec![1, 0]);
        assert!(gate_and_update(&mut store, &[0.0, 5.0], 0, &confident, &cfg()).unwrap());
        assert_eq!(store.centroids[0], Some(vec![0.5, 0.5]));
        assert_eq!(store.counts[0], 2);
        assert_eq!(store.steps, 2);
    }

    #[test]
    fn uncertain_sample_is_rejected_but_counted() {
        let mut store = PrototypeStore::new(2);
        assert!(!gate_and_update(&mut store, &[1.0, 1.0], 1, &[0.5, 0.5], &cfg()).unwrap());
        assert_eq!(store.total_accepted(), 0);
        assert_eq!(store.steps, 1);
    }

    #[test]
    fn incremental_centroid_matches_batch_mean() {
        let mut rng = RngStream::new(21, 0);
        let mut store = PrototypeStore::new(3);
        let mut accepted: Vec<Vec<Vec<f64>>> = vec![Vec::new(); 3];
        for i in 0..1000 {
            let z = rng.gaussian_vec(6);
            let class = i % 3;
            let mut p = vec![0.0; 3];
            p[class] = 1.0;
            gate_and_update(&mut store, &z, class, &p, &cfg()).unwrap();
            accepted[class].push(l2_normalize(&z).unwrap());
        }
        for (c, vecs) in accepted.iter().enumerate() {
            let centroid = store.centroids[c].as_ref().unwrap();
            for k in 0..6 {
                let mean = vecs.iter().map(|v| v[k]).sum::<f64>() / vecs.len() as f64;
                assert!((centroid[k] - mean).abs() < 1e-9);
            }
            assert!(norm(centroid) <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn combined_score_examples() {
        let mut store = PrototypeStore::new(2);
        store.push(0, &[1.0, 0.0]);
        let text = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let s = combined_score(&[1.0, 0.0], &text, &store).unwrap();
        assert_eq!(s, vec![2.0, 0.0]);

        let empty = PrototypeStore::new(2);
        let s = combined_score(&[0.2, 0.9], &text, &empty).unwrap();
        let t: Vec<f64> = text.iter().map(|p| cosine(&[0.2, 0.9], p).unwrap()).collect();
        assert_eq!(argmax(&s), argmax(&t));
    }

    #[test]
    fn combined_score_by_hand() {
        let text = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
        let mut store = PrototypeStore::new(3);
        store.centroids[1] = Some(vec![0.6, 0.0, 0.0]);
        store.counts[1] = 1;
        let z = [1.0, 1.0, 0.0];
        let s = combined_score(&z, &text, &store).unwrap();
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((s[0] - 2.0 * r).abs() < 1e-15);
        assert!((s[1] - (r + r)).abs() < 1e-15);
        assert_eq!(s[2], 0.0);
    }

    #[test]
    fn stream_first_sample_is_text_only_and_gate_off_is_zero_shot() {
        let mut rng = RngStream::new(8, 1);
        let text: Vec<Vec<f64>> = (0..4).map(|_| rng.gaussian_vec(5)).collect();
        let samples: Vec<Vec<f64>> = (0..60).map(|_| rng.gaussian_vec(5)).collect();
        let on = classify_stream(&samples, &text, &InferenceConfig { epsilon_fraction: 1.0, ..cfg() }).unwrap();
        let zero_shot = classify_text_only(&samples, &text, &cfg()).unwrap();
        assert_eq!(on.predictions[0], zero_shot[0]);
        assert_eq!(on.pseudo_labels, zero_shot);
        assert!(on.accepted > 0);

        let off = classify_stream(&samples, &text, &InferenceConfig { epsilon_fraction: 0.0, ..cfg() }).unwrap();
        assert_eq!(off.predictions, zero_shot);
        assert_eq!(off.accepted, 0);
        assert_eq!(off.store.steps, 60);
    }

    #[test]
    fn batched_stream_defers_updates() {
        let text = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let samples = vec![vec![1.0, 0.05], vec![0.6, 0.8]];
        let all_in_one = classify_stream(
            &samples,
            &text,
            &InferenceConfig { epsilon_fraction: 1.0, batch_size: 2, ..cfg() },
        )
        .unwrap();
        // Both samples scored against the empty store.
        assert_eq!(all_in_one.predictions, classify_text_only(&samples, &text, &cfg()).unwrap());
        assert_eq!(all_in_one.store.steps, 2);
    }

    #[test]
    fn single_class_and_empty_stream() {
        let one = vec![vec![1.0, 0.0]];
        let samples = vec![vec![1.0, 0.0]];
        assert!(classify_stream(&samples, &one, &cfg()).is_err());
        let text = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let empty: Vec<Vec<f64>> = Vec::new();
        assert!(classify_stream(&empty, &text, &cfg()).unwrap().predictions.is_empty());
    }

    #[test]
    fn counts_never_exceed_steps() {
        let mut rng = RngStream::new(12, 2);
        let text: Vec<Vec<f64>> = (0..3).map(|_| rng.gaussian_vec(4)).collect();
        let mut samples: Vec<Vec<f64>> = (0..200).map(|_| rng.gaussian_vec(4)).collect();
        for _ in 0..3 {
            rng.shuffle(&mut samples);
            let out = classify_stream(&samples, &text, &InferenceConfig { epsilon_fraction: 0.9, ..cfg() }).unwrap();
            assert!(out.store.total_accepted() <= out.store.steps);
            assert_eq!(out.store.total_accepted(), out.accepted);
            for c in out.store.centroids.iter().flatten() {
                assert!(norm(c) <= 1.0 + 1e-12);
            }
        }
    }
}
