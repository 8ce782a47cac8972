//! Seen/unseen class partition, disjoint class assignment to clients and
//! per-class shot sampling.

use serde::{Deserialize, Serialize};

use super::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::numerics::{streams, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub num_clients: usize,
    pub num_unseen: usize,
    /// Training shots per seen class.
    pub train_shots: usize,
    /// Held-out validation shots per seen class; never used for gradients.
    pub val_shots: usize,
    /// Fraction of each unseen class reserved for validation.
    pub unseen_val_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            num_clients: 10,
            num_unseen: 10,
            train_shots: 10,
            val_shots: 2,
            unseen_val_fraction: 0.2,
        }
    }
}

impl SplitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_clients == 0 {
            return Err(Error::config("num_clients must be at least 1"));
        }
        if self.num_unseen < 2 {
            return Err(Error::config("at least two unseen classes are required"));
        }
        if self.train_shots == 0 {
            return Err(Error::config("train_shots must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.unseen_val_fraction) {
            return Err(Error::config("unseen_val_fraction must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Class-level partition. Client `k` owns `client_classes[k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederatedSplit {
    pub client_classes: Vec<Vec<usize>>,
    pub seen_classes: Vec<usize>,
    pub unseen_classes: Vec<usize>,
}

/// Unseen classes are drawn first from their own stream, so they do not
/// depend on the number of clients. Seen classes are dealt round-robin
/// over a seeded shuffle.
pub fn make_split(num_classes: usize, cfg: &SplitConfig, seed: u64) -> Result<FederatedSplit> {
    cfg.validate()?;
    if cfg.num_unseen >= num_classes {
        return Err(Error::NotEnoughData(format!(
            "{num_classes} classes cannot provide {} unseen classes and any seen ones",
            cfg.num_unseen
        )));
    }
    let mut all: Vec<usize> = (0..num_classes).collect();
    RngStream::new(seed, streams::SPLIT_UNSEEN).shuffle(&mut all);
    let mut unseen = all[..cfg.num_unseen].to_vec();
    let mut seen = all[cfg.num_unseen..].to_vec();
    unseen.sort_unstable();
    seen.sort_unstable();
    if seen.len() < cfg.num_clients {
        return Err(Error::NotEnoughData(format!(
            "{} seen classes cannot cover {} clients",
            seen.len(),
            cfg.num_clients
        )));
    }
    let mut dealt = seen.clone();
    RngStream::new(seed, streams::SPLIT_SEEN).shuffle(&mut dealt);
    let mut client_classes = vec![Vec::new(); cfg.num_clients];
    for (i, c) in dealt.into_iter().enumerate() {
        client_classes[i % cfg.num_clients].push(c);
    }
    for classes in client_classes.iter_mut() {
        classes.sort_unstable();
    }
    Ok(FederatedSplit {
        client_classes,
        seen_classes: seen,
        unseen_classes: unseen,
    })
}

/// Record indices for every role in one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPartitions {
    pub client_train: Vec<Vec<usize>>,
    pub client_val: Vec<Vec<usize>>,
    pub unseen_val: Vec<usize>,
    /// Unseen-class test records in stream order.
    pub unseen_test: Vec<usize>,
}

/// Samples shots without replacement. Classes are visited in index order
/// so the draw for a class is the same whatever the client count.
pub fn sample_partitions(
    dataset: &EmbeddingDataset,
    split: &FederatedSplit,
    cfg: &SplitConfig,
    seed: u64,
) -> Result<SplitPartitions> {
    let by_class = dataset.indices_by_class();
    let mut seen_of = vec![None; dataset.num_classes()];
    for (k, classes) in split.client_classes.iter().enumerate() {
        for &c in classes {
            seen_of[c] = Some(k);
        }
    }
    let mut is_unseen = vec![false; dataset.num_classes()];
    for &c in &split.unseen_classes {
        is_unseen[c] = true;
    }

    let mut rng = RngStream::new(seed, streams::SPLIT_SHOTS);
    let k = split.client_classes.len();
    let mut client_train = vec![Vec::new(); k];
    let mut client_val = vec![Vec::new(); k];
    let mut unseen_val = Vec::new();
    let mut unseen_test = Vec::new();
    for (c, indices) in by_class.iter().enumerate() {
        let mut indices = indices.clone();
        rng.shuffle(&mut indices);
        if let Some(client) = seen_of[c] {
            let need = cfg.train_shots + cfg.val_shots;
            if indices.len() < need {
                return Err(Error::NotEnoughData(format!(
                    "class {c} has {} records, {need} shots requested",
                    indices.len()
                )));
            }
            client_train[client].extend_from_slice(&indices[..cfg.train_shots]);
            client_val[client].extend_from_slice(&indices[cfg.train_shots..need]);
        } else if is_unseen[c] {
            let n_val = (cfg.unseen_val_fraction * indices.len() as f64).round() as usize;
            if indices.len() - n_val == 0 {
                return Err(Error::NotEnoughData(format!("unseen class {c} has no test records")));
            }
            unseen_val.extend_from_slice(&indices[..n_val]);
            unseen_test.extend_from_slice(&indices[n_val..]);
        }
    }
    let mut order = RngStream::new(seed, streams::TEST_ORDER);
    order.shuffle(&mut unseen_test);
    order.shuffle(&mut unseen_val);
    Ok(SplitPartitions {
        client_train,
        client_val,
        unseen_val,
        unseen_test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use proptest::prelude::*;
    use std::collections::BTreeSet;

    fn cfg(k: usize, unseen: usize) -> SplitConfig {
        SplitConfig {
            num_clients: k,
            num_unseen: unseen,
            ..SplitConfig::default()
        }
    }

    #[test]
    fn twenty_seen_over_ten_clients() {
        let split = make_split(30, &cfg(10, 10), 3).unwrap();
        assert_eq!(split.seen_classes.len(), 20);
        assert!(split.client_classes.iter().all(|c| c.len() == 2));
    }

    #[test]
    fn same_seed_same_split() {
        assert_eq!(make_split(30, &cfg(7, 10), 5).unwrap(), make_split(30, &cfg(7, 10), 5).unwrap());
    }

    #[test]
    fn unseen_classes_do_not_depend_on_client_count() {
        let a = make_split(40, &cfg(5, 10), 8).unwrap();
        let b = make_split(40, &cfg(30, 10), 8).unwrap();
        assert_eq!(a.unseen_classes, b.unseen_classes);
        assert_eq!(a.seen_classes, b.seen_classes);
    }

    #[test]
    fn too_few_classes() {
        assert!(make_split(12, &cfg(5, 10), 0).is_err());
        assert!(make_split(10, &cfg(1, 10), 0).is_err());
        assert!(make_split(10, &cfg(1, 1), 0).is_err());
    }

    #[test]
    fn partitions_respect_roles() {
        let syn = SyntheticConfig {
            dim: 4,
            shots_per_class: 20,
            ..SyntheticConfig::default()
        };
        let (ds, _) = generate_synthetic(&syn, 1).unwrap();
        let sc = cfg(10, 10);
        let split = make_split(ds.num_classes(), &sc, 1).unwrap();
        let parts = sample_partitions(&ds, &split, &sc, 1).unwrap();
        for (k, classes) in split.client_classes.iter().enumerate() {
            assert_eq!(parts.client_train[k].len(), classes.len() * 10);
            assert_eq!(parts.client_val[k].len(), classes.len() * 2);
            for i in parts.client_train[k].iter().chain(&parts.client_val[k]) {
                assert!(classes.contains(&ds.records[*i].class));
            }
        }
        assert_eq!(parts.unseen_val.len(), 10 * 4);
        assert_eq!(parts.unseen_test.len(), 10 * 16);
        let mut used: Vec<usize> = parts
            .client_train
            .iter()
            .chain(&parts.client_val)
            .flatten()
            .chain(&parts.unseen_val)
            .chain(&parts.unseen_test)
            .copied()
            .collect();
        let n = used.len();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), n, "a record was used twice");

        let greedy = SplitConfig {
            train_shots: 19,
            ..sc
        };
        assert!(sample_partitions(&ds, &split, &greedy, 1).is_err());
    }

    proptest! {
        #[test]
        fn split_is_disjoint_and_covering(
            seed in 0u64..10_000, k in 1usize..12, unseen in 2usize..8, extra in 0usize..15
        ) {
            let n = unseen + k + extra;
            let split = make_split(n, &cfg(k, unseen), seed).unwrap();
            let seen: BTreeSet<usize> = split.seen_classes.iter().copied().collect();
            let unseen_set: BTreeSet<usize> = split.unseen_classes.iter().copied().collect();
            prop_assert!(seen.is_disjoint(&unseen_set));
            prop_assert_eq!(seen.len() + unseen_set.len(), n);
            let mut union = BTreeSet::new();
            for classes in &split.client_classes {
                prop_assert!(!classes.is_empty());
                for c in classes {
                    prop_assert!(union.insert(*c), "class {} owned twice", c);
                }
            }
            prop_assert_eq!(union, seen);
        }
    }
}
