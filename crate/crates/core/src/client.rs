//! One federated client: a private shard, local adaptation, and the
//! label-free update it uploads.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::adapter::{export_perturbed_prompts, init_residuals, AdapterParams, ClientResiduals, ExportScaling};
use crate::data::{EmbeddingDataset, Record};
use crate::error::{Error, Result};
use crate::numerics::{streams, EmbeddingVec, RngStream};
use crate::training::{adamw_step, loss_backward, AdamWState, TrainConfig};

pub type ClientId = usize;

/// A labelled embedding from a client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub embedding: EmbeddingVec,
    pub class: usize,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: ClientId,
    pub shard: Vec<Sample>,
    /// Held-out shots, only ever evaluated.
    pub validation: Vec<Sample>,
    pub local_classes: BTreeSet<usize>,
    pub prompt_embeddings: BTreeMap<usize, EmbeddingVec>,
    pub adapter: AdapterParams,
    pub residuals: ClientResiduals,
    pub optimizer: AdamWState,
    rng: RngStream,
}

/// Losses observed during one call to [`ClientState::local_train`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainTrace {
    /// Loss at every optimizer step, before the update.
    pub step_losses: Vec<f64>,
    /// Full-shard loss after the last step.
    pub final_loss: f64,
    pub validation_loss: Option<f64>,
}

/// What a client uploads: adapter weights and the perturbed candidate
/// prompts. Nothing here can carry a class name, label or raw sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: ClientId,
    pub adapter_weights: AdapterParams,
    pub perturbed_prompts: Vec<Vec<f64>>,
}

/// Single placeholder class used when `T′` is written as an FMEB file.
pub const UPDATE_CLASS_NAME: &str = "perturbed_prompt";

impl ClientUpdate {
    /// `T′` in the FMEB record layout, every record under one anonymous class.
    pub fn prompts_dataset(&self) -> Result<EmbeddingDataset> {
        let dim = self.adapter_weights.dim();
        let records = self
            .perturbed_prompts
            .iter()
            .map(|p| {
                Ok(Record {
                    class: 0,
                    embedding: EmbeddingVec::new(p.clone())?,
                })
            })
            .collect::<Result<_>>()?;
        let ds = EmbeddingDataset {
            dim,
            class_names: vec![UPDATE_CLASS_NAME.to_owned()],
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn from_parts(client_id: ClientId, adapter_weights: AdapterParams, prompts: &EmbeddingDataset) -> Result<Self> {
        if prompts.class_names.len() != 1 {
            return Err(Error::ClassSetMismatch(
                "an update prompt file must carry exactly one anonymous class".into(),
            ));
        }
        if prompts.dim != adapter_weights.dim() {
            return Err(Error::DimMismatch {
                expected: adapter_weights.dim(),
                found: prompts.dim,
            });
        }
        Ok(Self {
            client_id,
            adapter_weights,
            perturbed_prompts: prompts.records.iter().map(|r| r.embedding.to_vec()).collect(),
        })
    }
}

impl ClientState {
    /// `prompts` must cover exactly the classes present in `shard`.
    pub fn new(
        client_id: ClientId,
        shard: Vec<Sample>,
        validation: Vec<Sample>,
        prompts: BTreeMap<usize, EmbeddingVec>,
        initial_adapter: AdapterParams,
        alpha: f64,
        seed: u64,
    ) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Empty("client shard"));
        }
        let local_classes: BTreeSet<usize> = shard.iter().map(|s| s.class).collect();
        let prompt_classes: BTreeSet<usize> = prompts.keys().copied().collect();
        if local_classes != prompt_classes {
            return Err(Error::ClassSetMismatch(format!(
                "client {client_id}: shard covers {} classes, prompts cover {}",
                local_classes.len(),
                prompt_classes.len()
            )));
        }
        if let Some(v) = validation.iter().find(|v| !local_classes.contains(&v.class)) {
            return Err(Error::UnknownClass(v.class));
        }
        let dim = initial_adapter.dim();
        for s in shard.iter().chain(&validation) {
            if s.embedding.dim() != dim {
                return Err(Error::DimMismatch {
                    expected: dim,
                    found: s.embedding.dim(),
                });
            }
        }
        let residuals = init_residuals(local_classes.iter().copied(), dim, alpha)?;
        Ok(Self {
            client_id,
            shard,
            validation,
            local_classes,
            prompt_embeddings: prompts,
            adapter: initial_adapter,
            residuals,
            optimizer: AdamWState::new(),
            rng: RngStream::new(seed, streams::CLIENT_BASE + client_id as u64),
        })
    }

    fn evaluate(&self, samples: &[Sample], cfg: &TrainConfig) -> Result<f64> {
        let z: Vec<&[f64]> = samples.iter().map(|s| s.embedding.as_slice()).collect();
        let y: Vec<usize> = samples.iter().map(|s| s.class).collect();
        loss_backward(&z, &y, &self.adapter, &self.residuals, &self.prompt_embeddings, cfg).map(|(l, _)| l)
    }

    /// Starts from `global_adapter` and runs `local_epochs` passes of
    /// gradient steps over the shard. Residuals carry over between calls.
    pub fn local_train(&mut self, global_adapter: &AdapterParams, cfg: &TrainConfig) -> Result<TrainTrace> {
        cfg.validate()?;
        if self.shard.is_empty() {
            return Err(Error::Empty("client shard"));
        }
        if !global_adapter.same_shape(&self.adapter) {
            return Err(Error::config("global adapter shape differs from the client's"));
        }
        self.adapter = global_adapter.clone();
        if cfg.reset_optimizer_each_round {
            self.optimizer.reset();
        }
        let batch = cfg.batch_size.unwrap_or(self.shard.len()).min(self.shard.len());
        let mut order: Vec<usize> = (0..self.shard.len()).collect();
        let mut trace = TrainTrace::default();
        for _ in 0..cfg.local_epochs {
            if batch < self.shard.len() {
                self.rng.shuffle(&mut order);
            }
            for chunk in order.chunks(batch) {
                let z: Vec<&[f64]> = chunk.iter().map(|&i| self.shard[i].embedding.as_slice()).collect();
                let y: Vec<usize> = chunk.iter().map(|&i| self.shard[i].class).collect();
                let (loss, grads) =
                    loss_backward(&z, &y, &self.adapter, &self.residuals, &self.prompt_embeddings, cfg)?;
                adamw_step(
                    &mut self.adapter,
                    &mut self.residuals,
                    &grads,
                    &mut self.optimizer,
                    cfg.learning_rate,
                    &cfg.optimizer,
                )?;
                trace.step_losses.push(loss);
            }
        }
        trace.final_loss = self.evaluate(&self.shard, cfg)?;
        if !self.validation.is_empty() {
            trace.validation_loss = Some(self.evaluate(&self.validation, cfg)?);
        }
        Ok(trace)
    }

    pub fn make_update(&mut self, scaling: ExportScaling) -> Result<ClientUpdate> {
        let perturbed_prompts =
            export_perturbed_prompts(&self.residuals, &self.prompt_embeddings, scaling, &mut self.rng)?;
        Ok(ClientUpdate {
            client_id: self.client_id,
            adapter_weights: self.adapter.clone(),
            perturbed_prompts,
        })
    }
}
