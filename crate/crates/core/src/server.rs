//! The central server: prompt-similarity weighting of client adapters and
//! orchestration of the training rounds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::{AdapterParams, ExportScaling};
use crate::client::{ClientId, ClientState, ClientUpdate, TrainTrace};
use crate::error::{Error, Result};
use crate::numerics::{cosine, softmax};
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Adaptive,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AggregationReport {
    pub mode: AggregationMode,
    /// Expected prompt similarity per client; absent for uniform rounds.
    pub xi: Option<BTreeMap<ClientId, f64>>,
    pub weights: BTreeMap<ClientId, f64>,
    #[serde(skip)]
    pub aggregated_adapter: AdapterParams,
}

/// Mean pairwise cosine between the new user's prompts and one client's `T′`.
pub fn expected_similarity<A: AsRef<[f64]>, B: AsRef<[f64]>>(test_prompts: &[A], client_prompts: &[B]) -> Result<f64> {
    if test_prompts.is_empty() || client_prompts.is_empty() {
        return Err(Error::Empty("prompt set for expected similarity"));
    }
    let mut total = 0.0;
    for t in test_prompts {
        for c in client_prompts {
            total += cosine(t.as_ref(), c.as_ref())?;
        }
    }
    Ok(total / (test_prompts.len() * client_prompts.len()) as f64)
}

fn sorted_by_id(updates: &[ClientUpdate]) -> Result<Vec<&ClientUpdate>> {
    if updates.is_empty() {
        return Err(Error::Empty("client updates"));
    }
    let mut sorted: Vec<&ClientUpdate> = updates.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = &sorted[0].adapter_weights;
    if let Some(bad) = sorted.iter().find(|u| !u.adapter_weights.same_shape(first)) {
        return Err(Error::config(format!(
            "client {} uploaded an adapter of a different shape",
            bad.client_id
        )));
    }
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::config("duplicate client id among updates"));
    }
    Ok(sorted)
}

/// `Σ_k w_k θ_k`, summed in the given order.
pub fn weighted_average(adapters: &[&AdapterParams], weights: &[f64]) -> Result<AdapterParams> {
    let first = adapters.first().ok_or(Error::Empty("adapters"))?;
    if adapters.len() != weights.len() {
        return Err(Error::DimMismatch {
            expected: adapters.len(),
            found: weights.len(),
        });
    }
    let mut out = first.zeros_like();
    for (adapter, &w) in adapters.iter().zip(weights) {
        if !adapter.same_shape(first) {
            return Err(Error::config("adapter shapes differ"));
        }
        for (dst, src) in out.tensors_mut().into_iter().zip(adapter.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += w * s;
            }
        }
    }
    Ok(out)
}

/// Softmax(ξ / temperature)-weighted average of the client adapters.
/// `temperature = 1` is the plain exponential weighting.
pub fn adaptive_aggregate<T: AsRef<[f64]>>(
    updates: &[ClientUpdate],
    test_prompts: &[T],
    temperature: f64,
) -> Result<AggregationReport> {
    let sorted = sorted_by_id(updates)?;
    let xi: Vec<f64> = sorted
        .iter()
        .map(|u| expected_similarity(test_prompts, &u.perturbed_prompts))
        .collect::<Result<_>>()?;
    let weights = softmax(&xi, temperature)?;
    let adapters: Vec<&AdapterParams> = sorted.iter().map(|u| &u.adapter_weights).collect();
    let aggregated_adapter = weighted_average(&adapters, &weights)?;
    let ids: Vec<ClientId> = sorted.iter().map(|u| u.client_id).collect();
    Ok(AggregationReport {
        mode: AggregationMode::Adaptive,
        xi: Some(ids.iter().copied().zip(xi).collect()),
        weights: ids.into_iter().zip(weights).collect(),
        aggregated_adapter,
    })
}

/// Parameter-wise mean of the client adapters.
pub fn uniform_aggregate(updates: &[ClientUpdate]) -> Result<AggregationReport> {
    let sorted = sorted_by_id(updates)?;
    let adapters: Vec<&AdapterParams> = sorted.iter().map(|u| &u.adapter_weights).collect();
    let w = 1.0 / adapters.len() as f64;
    let weights = vec![w; adapters.len()];
    let aggregated_adapter = weighted_average(&adapters, &weights)?;
    Ok(AggregationReport {
        mode: AggregationMode::Uniform,
        xi: None,
        weights: sorted.iter().map(|u| u.client_id).zip(weights).collect(),
        aggregated_adapter,
    })
}

/// Outcome of all training rounds.
#[derive(Debug, Clone)]
pub struct FederatedRun {
    /// Uniform average after the last round.
    pub global_adapter: AdapterParams,
    /// Each client's adapter and `T′` after the last round.
    pub updates: Vec<ClientUpdate>,
    /// `traces[round][client]`
    pub traces: Vec<Vec<TrainTrace>>,
}

/// Broadcast, train locally, average uniformly; repeated `global_epochs`
/// times. Final per-client updates are kept for inference-time aggregation.
pub fn run_federated_training(
    clients: &mut [ClientState],
    initial_adapter: AdapterParams,
    cfg: &TrainConfig,
    scaling: ExportScaling,
) -> Result<FederatedRun> {
    if clients.is_empty() {
        return Err(Error::Empty("client list"));
    }
    cfg.validate()?;
    let mut global = initial_adapter;
    let mut traces = Vec::with_capacity(cfg.global_epochs);
    let mut updates = Vec::new();
    for _ in 0..cfg.global_epochs {
        let round: Vec<(TrainTrace, ClientUpdate)> = clients
            .par_iter_mut()
            .map(|c| {
                let trace = c.local_train(&global, cfg)?;
                let update = c.make_update(scaling)?;
                Ok((trace, update))
            })
            .collect::<Result<_>>()?;
        let (round_traces, round_updates): (Vec<_>, Vec<_>) = round.into_iter().unzip();
        global = uniform_aggregate(&round_updates)?.aggregated_adapter;
        traces.push(round_traces);
        updates = round_updates;
    }
    Ok(FederatedRun {
        global_adapter: global,
        updates,
        traces,
    })
}
