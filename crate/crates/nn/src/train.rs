//! End-to-end training: seeded shuffling, subject-disjoint validation
//! hold-out, early stopping on validation loss, best-weight restore.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::{Adam, AdamConfig, AdamError};
use crate::graph::Graph;
use crate::model::{Model, ModelError};
use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("training data is empty")]
    Empty,
    #[error("training data contains a single class")]
    SingleClass,
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Adam(#[from] AdamError),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, loss: f64 },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    /// Fraction of presentations held out (whole subjects at a time) for
    /// early stopping.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch_size: 4,
            max_epochs: 80,
            patience: 20,
            seed: 0,
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), TrainError> {
        if self.patience >= self.max_epochs {
            return Err(TrainError::BadConfig(format!(
                "patience {} must be < max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(TrainError::BadConfig("zero batch size or epochs".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(TrainError::BadConfig(format!(
                "val_fraction {} outside [0, 1)",
                self.val_fraction
            )));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(TrainError::BadConfig(format!("bad lr {}", self.lr)));
        }
        Ok(())
    }
}

/// One training example: a patch sequence in backbone layout (T, 3, S, S)
/// plus the identity needed for subject-disjoint splitting.
#[derive(Debug, Clone)]
pub struct Sample {
    pub sequence: Tensor,
    pub spoof: bool,
    pub presentation_id: String,
    pub subject_id: String,
}

impl Sample {
    fn group(&self) -> &str {
        if self.subject_id.is_empty() {
            &self.presentation_id
        } else {
            &self.subject_id
        }
    }

    fn target(&self) -> usize {
        usize::from(self.spoof)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_samples: usize,
    pub val_samples: usize,
}

/// Concatenate samples into one (B*T, 3, S, S) tensor; sample b's frame t
/// lands at row b*T + t, matching [`Model::forward`].
fn stack_batch(samples: &[&Sample]) -> (Tensor, Vec<usize>) {
    let t_shape = samples[0].sequence.shape().to_vec();
    let mut data = Vec::with_capacity(samples.len() * samples[0].sequence.numel());
    let mut targets = Vec::with_capacity(samples.len());
    for s in samples {
        data.extend_from_slice(s.sequence.data());
        targets.push(s.target());
    }
    let shape = [
        samples.len() * t_shape[0],
        t_shape[1],
        t_shape[2],
        t_shape[3],
    ];
    (Tensor::from_vec(&shape, data), targets)
}

/// Evaluate mean loss and accuracy in eval mode (running BN, no dropout).
fn evaluate(model: &Model, samples: &[&Sample], batch_size: usize) -> Result<(f64, f64), TrainError> {
    let mut total_loss = 0.0;
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size) {
        let (input, targets) = stack_batch(chunk);
        let mut graph = Graph::new();
        let bound = model.bind(&mut graph);
        let (nodes, _) = model.forward(&mut graph, &bound, input, chunk.len(), false, None)?;
        let loss = graph.bce_loss(nodes.probs, &targets).map_err(ModelError::from)?;
        total_loss += graph.value(loss).item() * chunk.len() as f64;
        let probs = graph.value(nodes.probs);
        for (row, &t) in targets.iter().enumerate() {
            let spoof_p = probs.at2(row, 1);
            let predicted = usize::from(spoof_p >= 0.5);
            correct += usize::from(predicted == t);
        }
    }
    Ok((
        total_loss / samples.len() as f64,
        correct as f64 / samples.len() as f64,
    ))
}

/// Split sample indices into train/val keeping every group (subject, or
/// presentation when no subject is known) on one side.
fn split_validation(
    samples: &[Sample],
    val_fraction: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.group()).or_default().push(i);
    }
    let total_presentations: BTreeSet<&str> =
        samples.iter().map(|s| s.presentation_id.as_str()).collect();
    let target = (total_presentations.len() as f64 * val_fraction).round() as usize;

    let mut keys: Vec<&str> = groups.keys().cloned().collect();
    keys.shuffle(rng);

    let mut val_groups: Vec<&str> = Vec::new();
    let mut held = 0usize;
    if target > 0 {
        for key in &keys {
            if val_groups.len() + 1 >= keys.len() {
                break; // at least one group must remain in train
            }
            let presentations: BTreeSet<&str> = groups[key]
                .iter()
                .map(|&i| samples[i].presentation_id.as_str())
                .collect();
            val_groups.push(key);
            held += presentations.len();
            if held >= target {
                break;
            }
        }
    }
    let val_set: BTreeSet<&str> = val_groups.into_iter().collect();
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (key, idx) in &groups {
        if val_set.contains(key) {
            val_idx.extend_from_slice(idx);
        } else {
            train_idx.extend_from_slice(idx);
        }
    }
    (train_idx, val_idx)
}

/// Minimize cross entropy with Adam; early-stop on validation loss with
/// the configured patience and restore the best weights.
pub fn train(
    model: &mut Model,
    samples: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainingHistory, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::Empty);
    }
    if samples.iter().all(|s| s.spoof) || samples.iter().all(|s| !s.spoof) {
        return Err(TrainError::SingleClass);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_idx, val_idx) = split_validation(samples, cfg.val_fraction, &mut rng);
    let train_set: Vec<&Sample> = train_idx.iter().map(|&i| &samples[i]).collect();
    let val_set: Vec<&Sample> = val_idx.iter().map(|&i| &samples[i]).collect();

    let mut optimizer = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });

    let mut history = TrainingHistory {
        train_samples: train_set.len(),
        val_samples: val_set.len(),
        ..TrainingHistory::default()
    };
    let mut best: Option<(f64, ParamSet, ParamSet, usize)> = None;
    let mut wait = 0usize;
    let mut warned_disconnected = false;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut correct = 0usize;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| train_set[i]).collect();
            let (input, targets) = stack_batch(&batch);
            let mut graph = Graph::new();
            let bound = model.bind(&mut graph);
            let (nodes, bn_updates) =
                model.forward(&mut graph, &bound, input, batch.len(), true, Some(&mut rng))?;
            let loss_node = graph
                .bce_loss(nodes.probs, &targets)
                .map_err(ModelError::from)?;
            let loss = graph.value(loss_node).item();
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, step, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            let probs = graph.value(nodes.probs).clone();
            for (row, &t) in targets.iter().enumerate() {
                correct += usize::from(usize::from(probs.at2(row, 1) >= 0.5) == t);
            }

            graph.backward(loss_node).map_err(ModelError::from)?;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut disconnected: Vec<&str> = Vec::new();
            for (name, &id) in &bound.nodes {
                match graph.grad(id) {
                    Some(g) => {
                        grads.insert(name.clone(), g.clone());
                    }
                    None => disconnected.push(name),
                }
            }
            if !disconnected.is_empty() && !warned_disconnected {
                warned_disconnected = true;
                eprintln!(
                    "warning: parameters got no gradient (treated as zero): {}",
                    disconnected.join(", ")
                );
            }
            optimizer.step(&mut model.params, &grads)?;
            model.apply_bn_updates(&bn_updates);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let train_accuracy = correct as f64 / train_set.len() as f64;

        let (val_loss, val_accuracy) = if val_set.is_empty() {
            (train_loss, train_accuracy)
        } else {
            evaluate(model, &val_set, cfg.batch_size)?
        };
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            train_accuracy,
            val_loss,
            val_accuracy,
        });

        let improved = match &best {
            None => true,
            Some((best_loss, _, _, _)) => val_loss < best_loss - 1e-12,
        };
        if improved {
            best = Some((val_loss, model.params.clone(), model.buffers.clone(), epoch));
            wait = 0;
        } else {
            wait += 1;
            if wait >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    if let Some((_, params, buffers, best_epoch)) = best {
        model.params = params;
        model.buffers = buffers;
        history.best_epoch = best_epoch;
    }
    Ok(history)
}
