//! Mini-batch SGD training with momentum, weight decay, and label-balanced
//! batch sampling.
//!
//! Every batch is built as P distinct classes × Q images so that online
//! mining always has valid positives and negatives to work with. Each image
//! is embedded on its own tape; the mined loss gradient with respect to the
//! embeddings is pushed backward through every tape, accumulated per
//! parameter tensor in visit order, and applied with a classic
//! momentum/L2-decay step. Given (seed, config, dataset) the whole run is
//! bit-reproducible.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageRecord;
use crate::error::{Error, Result};
use crate::layers::GEM_P_RANGE;
use crate::miner::{mine_and_loss, MiniBatch, MiningStrategy};
use crate::model::{EmbedGraph, MiniDrn};
use crate::tensor::Tensor;

/// Hyperparameters for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub margin: f64,
    pub epochs: usize,
    pub seed: u64,
    pub strategy: MiningStrategy,
    /// Distinct classes per batch (P).
    pub classes_per_batch: usize,
    /// Images drawn from each of those classes (Q); P·Q = batch_size.
    pub samples_per_class: usize,
    /// When set, every step's accumulated gradient is rescaled to this global
    /// L2 norm before the momentum update (normalized SGD). A from-scratch
    /// model starts with nearly coincident embeddings, where triplet
    /// gradients are orders of magnitude too small to escape in reasonable
    /// time; normalizing keeps the step size constant through that regime and
    /// equally prevents blow-ups once the loss surface steepens. `None` is
    /// plain SGD.
    pub grad_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Small-scale preset sized for a desktop CPU: batch 32 = 8 classes × 4.
    /// Momentum, weight decay, and margin keep their full-scale values; the
    /// learning rate is raised to suit a from-scratch model this small.
    pub fn desk() -> Self {
        TrainConfig {
            learning_rate: 0.03,
            momentum: 0.9,
            weight_decay: 5e-5,
            batch_size: 32,
            margin: 0.7,
            epochs: 20,
            seed: 17,
            strategy: MiningStrategy::HardestNegAllPos,
            classes_per_batch: 8,
            samples_per_class: 4,
            grad_norm: Some(1.0),
        }
    }

    /// Full-scale preset: batch 55 (11 classes × 5 images), learning rate
    /// 1e-4, momentum 0.9, weight decay 5e-5, margin 0.7, 20 epochs.
    pub fn paper() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            momentum: 0.9,
            weight_decay: 5e-5,
            batch_size: 55,
            margin: 0.7,
            epochs: 20,
            seed: 17,
            strategy: MiningStrategy::HardestNegAllPos,
            classes_per_batch: 11,
            samples_per_class: 5,
            grad_norm: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        // learning_rate 0 is allowed: it turns training into a deterministic
        // no-op, which is useful for smoke tests.
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !self.momentum.is_finite() || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay must be finite and non-negative, got {}",
                self.weight_decay
            )));
        }
        if !self.margin.is_finite() || self.margin <= 0.0 {
            return Err(Error::Config(format!(
                "margin must be positive, got {}",
                self.margin
            )));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.classes_per_batch < 2 || self.samples_per_class < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes per batch and 2 samples per class \
                 for valid triplets, got P={} Q={}",
                self.classes_per_batch, self.samples_per_class
            )));
        }
        if self.classes_per_batch * self.samples_per_class != self.batch_size {
            return Err(Error::Config(format!(
                "batch_size {} must equal classes_per_batch {} * samples_per_class {}",
                self.batch_size, self.classes_per_batch, self.samples_per_class
            )));
        }
        if let Some(norm) = self.grad_norm {
            if !norm.is_finite() || norm <= 0.0 {
                return Err(Error::Config(format!(
                    "grad_norm must be finite and positive when set, got {norm}"
                )));
            }
        }
        Ok(())
    }
}

/// Momentum buffers, one per parameter tensor, in visit order.
#[derive(Debug, Clone)]
pub struct OptimState {
    velocity: Vec<Tensor>,
}

impl OptimState {
    pub fn for_model(model: &MiniDrn) -> Self {
        let mut velocity = Vec::new();
        model.visit_params(&mut |_, t| velocity.push(Tensor::zeros(t.shape().to_vec())));
        OptimState { velocity }
    }
}

/// Gradient accumulator mirroring the model's parameter tensors.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamGrads {
    pub fn zeros_like(model: &MiniDrn) -> Self {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        model.visit_params(&mut |name, t| {
            names.push(name.to_string());
            tensors.push(Tensor::zeros(t.shape().to_vec()));
        });
        ParamGrads { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Adds the parameter gradients recorded on one image's tape. The graph's
    /// `param_nodes` are aligned with visit order, so this is a plain zip.
    pub fn accumulate(&mut self, graph: &EmbedGraph) -> Result<()> {
        if graph.param_nodes.len() != self.tensors.len() {
            return Err(Error::Shape(format!(
                "graph has {} parameter nodes, accumulator has {}",
                graph.param_nodes.len(),
                self.tensors.len()
            )));
        }
        for (tensor, &node) in self.tensors.iter_mut().zip(&graph.param_nodes) {
            let grad = graph.tape.grad(node)?;
            if grad.len() != tensor.len() {
                return Err(Error::Shape(format!(
                    "gradient length {} does not match parameter length {}",
                    grad.len(),
                    tensor.len()
                )));
            }
            for (acc, g) in tensor.data_mut().iter_mut().zip(grad) {
                *acc += g;
            }
        }
        Ok(())
    }

    /// Name of the first parameter block holding a non-finite gradient.
    pub fn first_nonfinite_block(&self) -> Option<&str> {
        self.names
            .iter()
            .zip(&self.tensors)
            .find(|(_, t)| !t.all_finite())
            .map(|(name, _)| name.as_str())
    }

    /// Global L2 norm across every parameter block.
    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Multiplies every gradient entry by `scale`.
    pub fn rescale(&mut self, scale: f64) {
        for tensor in &mut self.tensors {
            for g in tensor.data_mut() {
                *g *= scale;
            }
        }
    }
}

/// One SGD update: g' = g + wd·θ, v ← momentum·v + g', θ ← θ − lr·v (weight
/// decay folded into the gradient, not decoupled). The pooling exponent is
/// clamped back to its legal range afterwards.
pub fn sgd_step(
    model: &mut MiniDrn,
    grads: &ParamGrads,
    state: &mut OptimState,
    cfg: &TrainConfig,
) -> Result<()> {
    let mut index = 0;
    let mut error = None;
    model.visit_params_mut(&mut |name, theta| {
        if error.is_some() {
            return;
        }
        let (Some(grad), Some(velocity)) =
            (grads.tensors.get(index), state.velocity.get_mut(index))
        else {
            error = Some(Error::Shape(format!(
                "parameter {name} has no gradient/velocity slot {index}"
            )));
            return;
        };
        if grad.shape() != theta.shape() || velocity.shape() != theta.shape() {
            error = Some(Error::Shape(format!(
                "parameter {name} has shape {:?} but gradient {:?} / velocity {:?}",
                theta.shape(),
                grad.shape(),
                velocity.shape()
            )));
            return;
        }
        for ((t, g), v) in theta
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(velocity.data_mut())
        {
            let adjusted = g + cfg.weight_decay * *t;
            *v = cfg.momentum * *v + adjusted;
            *t -= cfg.learning_rate * *v;
        }
        if name == "gem.p" {
            for p in theta.data_mut() {
                *p = p.clamp(GEM_P_RANGE.0, GEM_P_RANGE.1);
            }
        }
        index += 1;
    });
    if let Some(e) = error {
        return Err(e);
    }
    if index != grads.tensors.len() {
        return Err(Error::Shape(format!(
            "model visited {index} parameter tensors but {} gradients were supplied",
            grads.tensors.len()
        )));
    }
    Ok(())
}

/// The batches of one epoch, as indices into the image list.
#[derive(Debug, Clone)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    /// True when some class had fewer than Q images and was sampled with
    /// replacement.
    pub with_replacement: bool,
}

/// Label-balanced batch composition: every batch holds Q images from each of
/// P distinct classes. Deterministic given (seed, epoch); classes rotate
/// through a reshuffled deck so all of them are visited at a similar rate.
pub fn make_batches(
    labels: &[u32],
    p: usize,
    q: usize,
    seed: u64,
    epoch: usize,
) -> Result<BatchPlan> {
    if p < 2 || q < 2 {
        return Err(Error::Config(format!(
            "need P >= 2 and Q >= 2, got P={p} Q={q}"
        )));
    }
    let mut by_class: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    for (i, &label) in labels.iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    if by_class.len() < p {
        return Err(Error::Config(format!(
            "dataset has {} classes but each batch needs P={p} distinct ones",
            by_class.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);

    let class_ids: Vec<u32> = by_class.keys().copied().collect();
    let mut deck: Vec<u32> = Vec::new();
    let mut queues: std::collections::BTreeMap<u32, Vec<usize>> = Default::default();
    let mut with_replacement = false;

    let num_batches = (labels.len() / (p * q)).max(1);
    let mut batches = Vec::with_capacity(num_batches);
    for _ in 0..num_batches {
        let mut chosen: Vec<u32> = Vec::with_capacity(p);
        while chosen.len() < p {
            let Some(class) = deck.pop() else {
                deck = class_ids.clone();
                deck.shuffle(&mut rng);
                continue;
            };
            if !chosen.contains(&class) {
                chosen.push(class);
            }
        }
        let mut batch = Vec::with_capacity(p * q);
        for class in chosen {
            let members = &by_class[&class];
            if members.len() < q {
                with_replacement = true;
                for _ in 0..q {
                    batch.push(members[rng.gen_range(0..members.len())]);
                }
                continue;
            }
            let queue = queues.entry(class).or_default();
            if queue.len() < q {
                *queue = members.clone();
                queue.shuffle(&mut rng);
            }
            batch.extend(queue.drain(queue.len() - q..));
        }
        batches.push(batch);
    }
    Ok(BatchPlan {
        batches,
        with_replacement,
    })
}

/// Per-epoch training statistics.
#[derive(Debug, Clone, Serialize)]
pub struct EpochStats {
    /// 1-based epoch number.
    pub epoch: usize,
    /// Mean mined loss over batches that had usable triplets.
    pub mean_loss: f64,
    /// Active triplets / considered triplets across the epoch, in [0, 1].
    pub active_fraction: f64,
    /// Pooling exponent after the epoch.
    pub gem_p: f64,
    /// Batches that offered no usable triplet (warning counter).
    pub empty_batches: usize,
}

/// Renders stats as CSV: `epoch,mean_loss,active_fraction,gem_p`.
pub fn stats_csv(stats: &[EpochStats]) -> String {
    let mut out = String::from("epoch,mean_loss,active_fraction,gem_p\n");
    for s in stats {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            s.epoch, s.mean_loss, s.active_fraction, s.gem_p
        ));
    }
    out
}

/// Runs the full training loop, mutating `model` in place. When
/// `checkpoint_dir` is given, a checkpoint is written after every epoch as
/// `epoch_NNN.ckpt`. Aborts with a diagnostic naming the batch and parameter
/// block if anything non-finite appears.
pub fn train(
    model: &mut MiniDrn,
    images: &[ImageRecord],
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<Vec<EpochStats>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let labels: Vec<u32> = images.iter().map(|r| r.label).collect();
    let mut state = OptimState::for_model(model);
    let mut stats = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let plan = make_batches(
            &labels,
            cfg.classes_per_batch,
            cfg.samples_per_class,
            cfg.seed,
            epoch,
        )?;
        let mut loss_sum = 0.0;
        let mut counted_batches = 0usize;
        let mut empty_batches = 0usize;
        let mut active = 0usize;
        let mut total = 0usize;
        for (batch_idx, batch) in plan.batches.iter().enumerate() {
            let at = |context: &str| format!("epoch {}, batch {batch_idx}: {context}", epoch + 1);

            let mut graphs = Vec::with_capacity(batch.len());
            let mut embedded = Vec::with_capacity(batch.len() * model.config.embedding_dim);
            for &i in batch {
                let graph = model.embed_graph(&images[i].pixels)?;
                embedded.extend_from_slice(graph.tape.value(graph.output).data());
                graphs.push(graph);
            }
            let matrix = Tensor::new(vec![batch.len(), model.config.embedding_dim], embedded)?;
            let batch_labels: Vec<u32> = batch.iter().map(|&i| labels[i]).collect();
            let minibatch = MiniBatch::new(matrix, batch_labels)
                .map_err(|e| Error::Numeric(at(&e.to_string())))?;
            let mined = mine_and_loss(&minibatch, cfg.margin, cfg.strategy)?;
            if !mined.loss.is_finite() {
                return Err(Error::Numeric(at(&format!(
                    "non-finite loss {}",
                    mined.loss
                ))));
            }
            if mined.is_empty() {
                empty_batches += 1;
                continue;
            }

            let mut grads = ParamGrads::zeros_like(model);
            let dim = model.config.embedding_dim;
            for (row, mut graph) in graphs.into_iter().enumerate() {
                let seed = &mined.embedding_grad.data()[row * dim..][..dim];
                graph.tape.backward(graph.output, seed)?;
                grads.accumulate(&graph)?;
            }
            if let Some(block) = grads.first_nonfinite_block() {
                return Err(Error::Numeric(at(&format!(
                    "non-finite gradient in parameter block {block}"
                ))));
            }
            if let Some(target) = cfg.grad_norm {
                let norm = grads.global_norm();
                if norm > 0.0 {
                    grads.rescale(target / norm);
                }
            }
            sgd_step(model, &grads, &mut state, cfg)?;

            loss_sum += mined.loss;
            counted_batches += 1;
            active += mined.active_triplets;
            total += mined.total_triplets;
        }
        let row = EpochStats {
            epoch: epoch + 1,
            mean_loss: if counted_batches > 0 {
                loss_sum / counted_batches as f64
            } else {
                0.0
            },
            active_fraction: if total > 0 {
                active as f64 / total as f64
            } else {
                0.0
            },
            gem_p: model.gem_p.data()[0],
            empty_batches,
        };
        stats.push(row);
        if let Some(dir) = checkpoint_dir {
            let path = dir.join(format!("epoch_{:03}.ckpt", epoch + 1));
            model.save_checkpoint(&path)?;
        }
    }
    Ok(stats)
}
