//! Adam training loop with gradient accumulation, checkpoints and a CSV
//! loss log, plus count validation over whole images.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{counting_metrics, CountPair, MetricsReport};
use crate::inference::{CountHead, EvalItem, FullImagePredictor, InferenceConfig, TiledPredictor};
use crate::loss::{total_loss_tensor, LossBreakdown, LossConfig};
use crate::model::Model;
use crate::patches::{stream_rng, PatchSample};

pub const LOSS_LOG_HEADER: &str = "step,epoch,total,loss_low,loss_high";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Samples per forward/backward pass; gradients are accumulated up to
    /// `batch_size`. Defaults to the whole batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub micro_batch_size: Option<usize>,
    /// Optimizer steps to run. There is no default budget.
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
    /// Save a checkpoint every N steps (0: only the final one).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Validate every N steps when validation items are supplied (0: never).
    #[serde(default)]
    pub validate_every: usize,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_lr() -> f64 {
    3e-6
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl TrainConfig {
    /// Batch 60, learning rate 3e-6.
    pub fn aerial(steps: usize) -> Self {
        Self::with_batch(60, steps)
    }

    /// Batch 40, learning rate 3e-6.
    pub fn cctv(steps: usize) -> Self {
        Self::with_batch(40, steps)
    }

    fn with_batch(batch_size: usize, steps: usize) -> Self {
        Self {
            learning_rate: default_lr(),
            batch_size,
            micro_batch_size: None,
            steps,
            seed: 0,
            checkpoint_every: 0,
            validate_every: 0,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn micro_batch(&self) -> usize {
        self.micro_batch_size.unwrap_or(self.batch_size).clamp(1, self.batch_size.max(1))
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.learning_rate > 0.0) {
            v.push(format!("train.learning_rate must be positive, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            v.push("train.batch_size must be at least 1".into());
        }
        if self.micro_batch_size == Some(0) {
            v.push("train.micro_batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            v.push("train.beta1 and train.beta2 must lie in [0, 1)".into());
        }
        if !(self.eps > 0.0) {
            v.push("train.eps must be positive".into());
        }
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub steps: Vec<StepLog>,
    pub checkpoints: Vec<PathBuf>,
    pub validations: Vec<(usize, MetricsReport)>,
}

/// Where training artifacts go; all optional.
#[derive(Clone, Copy, Default)]
pub struct TrainOutputs<'a> {
    pub run_dir: Option<&'a Path>,
    pub validation: Option<(&'a dyn Validator, &'a [EvalItem])>,
}

/// Periodic validation of the model being trained.
pub trait Validator: Sync {
    fn validate(&self, model: &Model, items: &[EvalItem]) -> Result<MetricsReport>;
}

/// Validates by tiled whole-image inference.
pub struct TiledValidator {
    pub config: InferenceConfig,
    pub head: CountHead,
}

impl Validator for TiledValidator {
    fn validate(&self, model: &Model, items: &[EvalItem]) -> Result<MetricsReport> {
        let predictor = TiledPredictor {
            model,
            config: self.config,
        };
        validate(&predictor, items, self.head)
    }
}

/// Stacks samples into `(image, gt_low, gt_full)` tensors.
pub fn batch_tensors(model: &Model, samples: &[&PatchSample]) -> Result<(Tensor, Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::invalid("empty batch"))?;
    let (h, w, c) = (first.image.height, first.image.width, first.image.channels);
    let (lh, lw) = first.gt_low.shape();
    let mut img = Vec::with_capacity(samples.len() * h * w * c);
    let mut low = Vec::with_capacity(samples.len() * lh * lw);
    let mut full = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.image.height, s.image.width, s.image.channels) != (h, w, c) || s.gt_low.shape() != (lh, lw) {
            return Err(Error::invalid("batch samples differ in size"));
        }
        img.extend(s.image.to_chw());
        low.extend_from_slice(&s.gt_low.values);
        full.extend_from_slice(&s.gt_full.values);
    }
    let n = samples.len();
    let dev = model.device();
    let dt = model.dtype();
    Ok((
        Tensor::from_vec(img, (n, c, h, w), dev)?.to_dtype(dt)?,
        Tensor::from_vec(low, (n, 1, lh, lw), dev)?.to_dtype(dt)?,
        Tensor::from_vec(full, (n, 1, h, w), dev)?.to_dtype(dt)?,
    ))
}

/// Gradients of the batch-mean composite loss, computed in micro-batches of
/// at most `micro` samples and summed with weights `len(micro)/len(batch)`.
pub fn batch_gradients(
    model: &Model,
    samples: &[&PatchSample],
    micro: usize,
    loss_config: &LossConfig,
) -> Result<(GradStore, LossBreakdown)> {
    let vars = model.vars();
    let n = samples.len() as f64;
    let mut acc: Vec<Option<Tensor>> = vec![None; vars.len()];
    let mut breakdown = LossBreakdown::default();
    for chunk in samples.chunks(micro.max(1)) {
        let weight = chunk.len() as f64 / n;
        let (x, gt_low, gt_full) = batch_tensors(model, chunk)?;
        let (low, high) = model.forward(&x)?;
        let (loss, part) = total_loss_tensor(&low, &high, &gt_low, &gt_full, loss_config)?;
        breakdown.total += weight * part.total;
        breakdown.low += weight * part.low;
        breakdown.high += weight * part.high;
        let grads = (loss * weight)?.backward()?;
        for (slot, var) in acc.iter_mut().zip(&vars) {
            if let Some(g) = grads.get(var.as_tensor()) {
                *slot = Some(match slot.take() {
                    Some(prev) => (prev + g)?,
                    None => g.clone(),
                });
            }
        }
    }
    let mut store = GradStore::default();
    for (slot, var) in acc.into_iter().zip(&vars) {
        if let Some(g) = slot {
            store.insert(var.as_tensor(), g);
        }
    }
    Ok((store, breakdown))
}

/// Gradient of every parameter by name; zeros where none flowed.
pub fn named_gradients(model: &Model, grads: &GradStore) -> Result<Vec<(String, Tensor)>> {
    model
        .named_parameters()
        .into_iter()
        .map(|(name, var): (String, Var)| {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => g.clone(),
                None => var.as_tensor().zeros_like()?,
            };
            Ok((name, g))
        })
        .collect()
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, "epoch", epoch));
    idx
}

/// Batches of sample indices in the order training consumes them.
pub fn batch_schedule(n: usize, batch_size: usize, steps: usize, seed: u64) -> Vec<(usize, Vec<usize>)> {
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0;
    let mut order = epoch_order(n, seed, epoch);
    let mut pos = 0;
    let per_batch = batch_size.min(n);
    while out.len() < steps {
        if pos + per_batch > n {
            epoch += 1;
            order = epoch_order(n, seed, epoch);
            pos = 0;
        }
        out.push((epoch, order[pos..pos + per_batch].to_vec()));
        pos += per_batch;
    }
    out
}

fn append_log(path: &Path, entry: &StepLog) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut line = String::new();
    if fresh {
        line.push_str(LOSS_LOG_HEADER);
        line.push('\n');
    }
    line.push_str(&format!(
        "{},{},{},{},{}\n",
        entry.step, entry.epoch, entry.loss.total, entry.loss.low, entry.loss.high
    ));
    f.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Runs `config.steps` Adam steps over `samples`.
///
/// Batches are drawn from a seeded per-epoch shuffle and assembled on a
/// loader thread feeding a bounded queue. A non-finite loss aborts with the
/// offending step and sample indices.
pub fn train(
    model: &Model,
    samples: &[PatchSample],
    config: &TrainConfig,
    loss_config: &LossConfig,
    outputs: &TrainOutputs<'_>,
) -> Result<TrainReport> {
    let mut violations = config.violations();
    violations.extend(loss_config.violations());
    if !violations.is_empty() {
        return Err(Error::Config(violations));
    }
    if samples.is_empty() {
        return Err(Error::invalid("training needs at least one sample"));
    }
    if let Some(dir) = outputs.run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut optimizer = AdamW::new(
        model.vars(),
        ParamsAdamW {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: 0.0,
        },
    )?;
    let schedule = batch_schedule(samples.len(), config.batch_size, config.steps, config.seed);
    let micro = config.micro_batch();
    let mut report = TrainReport::default();

    std::thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<(usize, usize, Vec<usize>)>(2);
        scope.spawn(move || {
            for (step, (epoch, idx)) in schedule.into_iter().enumerate() {
                if tx.send((step, epoch, idx)).is_err() {
                    break;
                }
            }
        });
        for (step, epoch, idx) in rx {
            let batch: Vec<&PatchSample> = idx.iter().map(|&i| &samples[i]).collect();
            let (grads, loss) = batch_gradients(model, &batch, micro, loss_config)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    samples: idx,
                    total: loss.total,
                    low: loss.low,
                    high: loss.high,
                });
            }
            let entry = StepLog { step, epoch, loss };
            log::debug!("step {step}: total {:.6e} low {:.6e} high {:.6e}", loss.total, loss.low, loss.high);
            if let Some(dir) = outputs.run_dir {
                append_log(&dir.join("loss.csv"), &entry)?;
            }
            report.steps.push(entry);
            optimizer.step(&grads)?;

            let done = step + 1;
            if let Some(dir) = outputs.run_dir {
                if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 && done < config.steps {
                    let path = dir.join(format!("checkpoint_{done:06}.safetensors"));
                    model.save_checkpoint(&path)?;
                    report.checkpoints.push(path);
                }
            }
            if let Some((validator, items)) = outputs.validation {
                if config.validate_every > 0 && done % config.validate_every == 0 {
                    report.validations.push((done, validator.validate(model, items)?));
                }
            }
        }
        Ok(())
    })?;

    if let Some(dir) = outputs.run_dir {
        let path = dir.join("checkpoint_final.safetensors");
        model.save_checkpoint(&path)?;
        report.checkpoints.push(path);
    }
    Ok(report)
}

/// Counting metrics of `predictor` over whole images.
pub fn validate(predictor: &dyn FullImagePredictor, items: &[EvalItem], head: CountHead) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::invalid("validation needs at least one record"));
    }
    let pairs = items
        .iter()
        .map(|item| {
            let out = predictor.predict(item)?;
            Ok(CountPair::new(item.record.id.clone(), item.points.len() as f64, out.count(head)))
        })
        .collect::<Result<Vec<_>>>()?;
    counting_metrics(&pairs)
}
