//! Joint training of weights and channel masks, evaluation, and run output.
//!
//! A run directory holds `config.txt` (canonical config), `metrics.csv`
//! (one row per epoch), `checkpoint/` (the latest completed epoch) and
//! `run.txt` (final summary and prune report as `key = value` lines).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use softprune::losses::{self, UpdateKind};
use softprune::optim::{self, OptimizerState};
use softprune::pruner::{self, PruneReport};
use softprune::{Graph, MaskHyperParams, MaskVariant, Model32, NodeId, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::data::Dataset;
use crate::error::{HarnessError, Result};

const EVAL_CHUNK: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub classification_loss: f64,
    pub sparsity_loss: f64,
    pub total_loss: f64,
    /// Steps that followed the sparsity gradient alone (target-ratio mode).
    pub sparsity_only_steps: usize,
    pub test_accuracy: f64,
    /// Fraction of masked channels with deactivation probability `>= c`.
    pub soft_pruning_ratio: f64,
}

pub const METRICS_HEADER: &str = "epoch,lr,classification_loss,sparsity_loss,total_loss,sparsity_only_steps,test_accuracy,soft_pruning_ratio";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.lr,
            self.classification_loss,
            self.sparsity_loss,
            self.total_loss,
            self.sparsity_only_steps,
            self.test_accuracy,
            self.soft_pruning_ratio
        )
    }
}

pub fn metrics_csv(rows: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in rows {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Hard-mask outcome of a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub accuracy: f64,
    pub soft_pruning_ratio: f64,
    pub report: PruneReport,
    pub pruned: Model32,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model32,
    pub metrics: Vec<EpochMetrics>,
    pub summary: RunSummary,
    pub checkpoint_dir: PathBuf,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

pub fn predict(model: &Model32, data: &Dataset, mask: &MaskHyperParams<f32>, variant: &MaskVariant<f32>) -> Result<Vec<usize>> {
    let masks = model.hard_masks(mask, variant);
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut out = Vec::with_capacity(data.len());
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (x, _) = data.batch::<ChaCha8Rng>(chunk, None)?;
        let logits = model.forward_eval_with_masks(&x, &masks)?;
        let (n, c) = logits.dims2("logits")?;
        for r in 0..n {
            let row = &logits.data()[r * c..(r + 1) * c];
            out.push((0..c).fold(0, |best, i| if row[i] > row[best] { i } else { best }));
        }
    }
    Ok(out)
}

/// Top-1 accuracy with evaluation-mode (hard-masked) BN.
pub fn evaluate(model: &Model32, data: &Dataset, mask: &MaskHyperParams<f32>, variant: &MaskVariant<f32>) -> Result<f64> {
    if data.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let pred = predict(model, data, mask, variant)?;
    let hits = pred.iter().zip(&data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// Extracts hard masks, performs surgery and measures the pruned model.
pub fn summarize(model: &Model32, test: &Dataset, mask: &MaskHyperParams<f32>, variant: &MaskVariant<f32>) -> Result<RunSummary> {
    let masks = pruner::extract_masks(model, mask, variant)?;
    let pruned = pruner::surgery(model, &masks)?;
    let report = pruner::make_report(model, &pruned, &model.input_shape())?;
    Ok(RunSummary {
        accuracy: evaluate(&pruned, test, mask, variant)?,
        soft_pruning_ratio: pruner::soft_pruning_ratio(model, mask, variant),
        report,
        pruned,
    })
}

struct Step {
    classification: f32,
    sparsity: f32,
    total: f32,
    update: UpdateKind,
}

/// Per-layer channel selections of the target-ratio controller.
fn target_selection(model: &Model32, cfg: &ExperimentConfig, variant: &MaskVariant<f32>, ratio: f32) -> Result<Vec<Vec<bool>>> {
    let probs: Vec<Vec<f32>> = model.masked_batch_norms().map(|(_, bn)| bn.deactivation_probs(&cfg.mask, variant)).collect();
    let flat: Vec<f32> = probs.iter().flatten().copied().collect();
    let chosen = losses::select_target_channels(&flat, ratio)?;
    let mut sel: Vec<Vec<bool>> = probs.iter().map(|p| vec![false; p.len()]).collect();
    for idx in chosen {
        let mut i = idx;
        for layer in sel.iter_mut() {
            if i < layer.len() {
                layer[i] = true;
                break;
            }
            i -= layer.len();
        }
    }
    Ok(sel)
}

struct Trainer<'a> {
    cfg: &'a ExperimentConfig,
    model: Model32,
    optimizer: OptimizerState<f32>,
    variant: MaskVariant<f32>,
    rng: ChaCha8Rng,
    prev_sparsity: f32,
}

impl Trainer<'_> {
    fn step(&mut self, x: Tensor<f32>, labels: &[usize], lr: f32) -> Result<Option<Step>> {
        let cfg = self.cfg;
        let mut g = Graph::new();
        let input = g.constant(x);
        let fwd = self.model.forward_train(&mut g, input, &cfg.mask, &self.variant, &mut self.rng)?;
        let cls = g.softmax_cross_entropy(fwd.logits, labels)?;
        let selection = match cfg.sparsity.target_ratio {
            Some(r) => Some(target_selection(&self.model, cfg, &self.variant, r)?),
            None => None,
        };
        let mut sparse: Option<NodeId> = None;
        let mut masked = 0;
        for &(layer, _, beta, gamma) in &fwd.batch_norms {
            let is_masked = matches!(&self.model.layers()[layer], softprune::Layer::BatchNorm(bn) if bn.masked);
            if !is_masked {
                continue;
            }
            let sel = selection.as_ref().map(|s| s[masked].as_slice());
            masked += 1;
            let term = g.sparsity(beta, gamma, cfg.sparsity.s, cfg.sparsity.variant, sel)?;
            sparse = Some(match sparse {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        let sparse = sparse.unwrap_or_else(|| g.constant(Tensor::scalar(0.0)));
        let cls_value = g.value(cls).data()[0];
        let sparse_value = g.value(sparse).data()[0];
        let update = match cfg.sparsity.target_ratio {
            Some(_) => {
                let update = if sparse_value > self.prev_sparsity { UpdateKind::SparsityOnly } else { UpdateKind::Joint };
                self.prev_sparsity = sparse_value;
                update
            }
            None => UpdateKind::Joint,
        };
        let loss = match update {
            UpdateKind::Joint => {
                let weighted = g.scale(sparse, cfg.sparsity.lambda);
                g.add(cls, weighted)?
            }
            UpdateKind::SparsityOnly => sparse,
        };
        let total = g.value(loss).data()[0];
        if !total.is_finite() || !cls_value.is_finite() {
            return Ok(None);
        }
        g.backward(loss)?;
        let mut grads = Vec::with_capacity(fwd.params.len());
        for &p in &fwd.params {
            let grad = g.take_grad(p).unwrap_or_else(|| Tensor::zeros(g.value(p).shape()));
            grads.push(grad);
        }
        self.model.update_running_stats(&g, &fwd);
        let (mut params, kinds): (Vec<&mut Tensor<f32>>, Vec<_>) = self.model.params_mut().into_iter().unzip();
        optim::sgd_nesterov_step(&mut params, &kinds, &grads, &mut self.optimizer, lr)?;
        Ok(Some(Step { classification: cls_value, sparsity: sparse_value, total, update }))
    }
}

fn checkpoint_of(model: &Model32, cfg: &ExperimentConfig, epoch: usize, variant: &MaskVariant<f32>) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        arch: cfg.arch.name().to_string(),
        epoch,
        config_hash: cfg.hash(),
        mask: cfg.mask,
        variant: *variant,
    }
}

/// Trains a freshly initialized model on `train`, evaluating on `test`
/// after every epoch. Output files go to `cfg.output_dir`.
pub fn train(cfg: &ExperimentConfig, train: &Dataset, test: &Dataset) -> Result<TrainOutcome> {
    if train.is_empty() || test.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| HarnessError::io(out, e))?;
    write(&out.join("config.txt"), &cfg.to_text())?;
    let ckpt_dir = out.join("checkpoint");

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = cfg.arch.build::<f32, _>(train.image_shape(), cfg.dataset.num_classes, &mut rng)?;
    let variant = cfg.sparsity.mask_variant();
    let mut trainer = Trainer {
        cfg,
        model,
        optimizer: OptimizerState::new(cfg.momentum, cfg.weight_decay, cfg.schedule.clone()),
        variant,
        rng,
        prev_sparsity: f32::INFINITY,
    };
    checkpoint_of(&trainer.model, cfg, 0, &variant).save(&ckpt_dir)?;

    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.schedule.lr_at(epoch);
        order.shuffle(&mut trainer.rng);
        let (mut cls, mut sparse, mut total, mut steps, mut sparse_only) = (0.0f64, 0.0f64, 0.0f64, 0usize, 0usize);
        for (step_index, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // a trailing batch of one has no batch variance
            if chunk.len() < 2 {
                continue;
            }
            let (x, labels) = if cfg.dataset.flip {
                train.batch(chunk, Some(&mut trainer.rng))?
            } else {
                train.batch::<ChaCha8Rng>(chunk, None)?
            };
            let Some(step) = trainer.step(x, &labels, lr as f32)? else {
                write(&out.join("metrics.csv"), &metrics_csv(&metrics))?;
                return Err(HarnessError::Diverged { epoch: epoch + 1, step: step_index + 1, checkpoint: ckpt_dir });
            };
            cls += step.classification as f64;
            sparse += step.sparsity as f64;
            total += step.total as f64;
            steps += 1;
            if step.update == UpdateKind::SparsityOnly {
                sparse_only += 1;
            }
        }
        let steps_f = steps.max(1) as f64;
        let row = EpochMetrics {
            epoch: epoch + 1,
            lr,
            classification_loss: cls / steps_f,
            sparsity_loss: sparse / steps_f,
            total_loss: total / steps_f,
            sparsity_only_steps: sparse_only,
            test_accuracy: evaluate(&trainer.model, test, &cfg.mask, &variant)?,
            soft_pruning_ratio: pruner::soft_pruning_ratio(&trainer.model, &cfg.mask, &variant),
        };
        log::info!(
            "epoch {} lr {} loss {:.4} acc {:.4} soft-pruned {:.3} ({:.1}s)",
            row.epoch,
            row.lr,
            row.total_loss,
            row.test_accuracy,
            row.soft_pruning_ratio,
            started.elapsed().as_secs_f64()
        );
        metrics.push(row);
        checkpoint_of(&trainer.model, cfg, epoch + 1, &variant).save(&ckpt_dir)?;
        write(&out.join("metrics.csv"), &metrics_csv(&metrics))?;
    }

    let summary = summarize(&trainer.model, test, &cfg.mask, &variant)?;
    let mut run = String::new();
    let _ = writeln!(run, "config_hash = {}", cfg.hash());
    let _ = writeln!(run, "epochs = {}", cfg.epochs);
    if let Some(last) = metrics.last() {
        let _ = writeln!(run, "final_test_accuracy = {}", last.test_accuracy);
        let _ = writeln!(run, "final_soft_pruning_ratio = {}", last.soft_pruning_ratio);
    }
    let _ = writeln!(run, "pruned_test_accuracy = {}", summary.accuracy);
    for line in summary.report.to_string().lines() {
        if let Some((k, v)) = line.split_once('=') {
            let _ = writeln!(run, "{k} = {v}");
        }
    }
    write(&out.join("run.txt"), &run)?;
    Ok(TrainOutcome { model: trainer.model, metrics, summary, checkpoint_dir: ckpt_dir })
}

/// Loads the datasets named by the config and trains.
pub fn train_from_config(cfg: &ExperimentConfig) -> Result<TrainOutcome> {
    let (train_set, test_set) = cfg.load_datasets()?;
    train(cfg, &train_set, &test_set)
}
