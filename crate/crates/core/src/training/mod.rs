//! Scheduled-sampling training, evaluation and checkpointing.

mod checkpoint;

pub use checkpoint::{checkpoint_load, checkpoint_save, Checkpoint};

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{mix_seed, SequenceDataset, Sequences};
use crate::error::{Error, Result};
use crate::metrics::{frame_metrics, skill_scores, training_loss, FrameMetrics, LossKind, SkillScores, WeightMap};
use crate::optim::{Adam, AdamConfig};
use crate::stack::{build_stack, constant_mask, Model, StackConfig};
use crate::tape::Tape;

// Stream tags keep the mask and shuffle generators independent of each other.
const MASK_STREAM: u64 = 0x6d61_736b;
const SHUFFLE_STREAM: u64 = 0x7368_7566;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub stack: StackConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub loss: LossKind,
    /// Fraction of all iterations after which the decoder never sees ground truth.
    pub decay_fraction: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip: Option<f64>,
    /// Stop after this many optimizer steps in total (the sampling schedule
    /// still spans the full run).
    pub stop_after: Option<u64>,
    pub checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl TrainConfig {
    pub fn new(stack: StackConfig) -> Self {
        TrainConfig {
            stack,
            epochs: 5,
            batch_size: 4,
            lr: 3e-4,
            loss: LossKind::L1L2,
            decay_fraction: 0.75,
            seed: 1,
            clip: Some(10.0),
            stop_after: None,
            checkpoint: None,
            log: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.stack.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.decay_fraction > 0.0 && self.decay_fraction <= 1.0) {
            return Err(Error::config("decay fraction must lie in (0, 1]"));
        }
        if matches!(self.clip, Some(c) if !(c > 0.0)) {
            return Err(Error::config("clip norm must be positive"));
        }
        Ok(())
    }

    /// The config echo stored in checkpoints.
    pub fn to_text(&self) -> String {
        format!(
            "{}epochs = {}\nbatch_size = {}\nlr = {}\nloss = {}\ndecay_fraction = {}\nseed = {}\nclip = {}\n",
            self.stack.to_text(),
            self.epochs,
            self.batch_size,
            self.lr,
            self.loss,
            self.decay_fraction,
            self.seed,
            self.clip.map_or("off".to_string(), |c| c.to_string())
        )
    }
}

/// Extracts the stack part of a config echo.
pub fn stack_config_from_echo(echo: &str) -> Result<StackConfig> {
    const TRAIN_KEYS: [&str; 7] = ["epochs", "batch_size", "lr", "loss", "decay_fraction", "seed", "clip"];
    let stack: String = echo
        .lines()
        .filter(|l| {
            let key = l.split('=').next().unwrap_or("").trim();
            !TRAIN_KEYS.contains(&key)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    StackConfig::from_text(&stack)
}

/// Ground-truth probability at `iteration`.
pub fn teacher_forcing_probability(iteration: u64, total: u64, decay_fraction: f64) -> f64 {
    (1.0 - iteration as f64 / (decay_fraction * total as f64)).max(0.0)
}

/// `batch × (n − 1)` independent draws with the ground-truth probability of
/// `iteration`; deterministic per `(seed, iteration)`.
pub fn sampling_mask(iteration: u64, total: u64, decay_fraction: f64, batch: usize, horizon: usize, seed: u64) -> Vec<Vec<bool>> {
    let eps = teacher_forcing_probability(iteration, total, decay_fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ MASK_STREAM, iteration));
    (0..batch)
        .map(|_| (0..horizon.saturating_sub(1)).map(|_| rng.random::<f64>() < eps).collect())
        .collect()
}

/// Sequence order of epoch `epoch`.
pub fn epoch_order(len: usize, epoch: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed ^ SHUFFLE_STREAM, epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// One row of the epoch log.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub iteration: u64,
    pub train_loss: f64,
    pub test: Option<FrameMetrics>,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str = "epoch,iteration,train_loss,mse,mae,ssim,psnr,gdl";

    pub fn csv_row(&self) -> String {
        let m = self.test.as_ref().map(|m| m.aggregate);
        let f = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch,
            self.iteration,
            self.train_loss,
            f(m.map(|m| m.mse)),
            f(m.map(|m| m.mae)),
            f(m.map(|m| m.ssim)),
            f(m.map(|m| m.psnr)),
            f(m.map(|m| m.gdl))
        )
    }
}

fn append_log(path: &Path, record: &EpochRecord) -> Result<()> {
    let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{}", EpochRecord::CSV_HEADER)?;
    }
    writeln!(f, "{}", record.csv_row())?;
    Ok(())
}

pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: Adam,
    /// Loss of every optimizer step taken in this run.
    pub losses: Vec<f32>,
    pub epochs: Vec<EpochRecord>,
}

/// Checks that a dataset fits a stack before any work is done.
pub fn check_compatible(stack: &StackConfig, data: &SequenceDataset) -> Result<()> {
    let s = &data.sequences;
    if s.channels() != stack.in_channels || s.channels() != stack.out_channels {
        return Err(Error::Data(format!(
            "dataset has {} channels, model maps {} → {}",
            s.channels(),
            stack.in_channels,
            stack.out_channels
        )));
    }
    if data.history != stack.history || data.horizon != stack.horizon {
        return Err(Error::Data(format!(
            "dataset split {}+{} differs from model split {}+{}",
            data.history, data.horizon, stack.history, stack.horizon
        )));
    }
    stack.check_frame_size(s.height(), s.width())
}

/// One forward/backward pass on a minibatch; returns the loss. Gradients
/// are accumulated into the model's parameters.
pub fn accumulate_batch(model: &mut Model, data: &SequenceDataset, indices: &[usize], mask: &[Vec<bool>], loss: LossKind) -> Result<f32> {
    let (m, n) = (data.history, data.horizon);
    let mut tape = Tape::new();
    let frames: Vec<_> = data.batch(indices).into_iter().map(|t| tape.leaf(t)).collect();
    let out = model.forward_sequence(&mut tape, &frames, mask)?;
    let l = training_loss(&mut tape, out.forecast(), &frames[m..m + n], loss)?;
    let value = tape.value(l).item();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = tape.backward(l)?;
    grads.accumulate_into(&mut model.params);
    Ok(value)
}

/// Trains from scratch, or from `resume` when given.
pub fn train(config: &TrainConfig, train_data: &SequenceDataset, test_data: Option<&SequenceDataset>, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    config.validate()?;
    check_compatible(&config.stack, train_data)?;
    if let Some(t) = test_data {
        check_compatible(&config.stack, t)?;
    }
    let mut model = build_stack(&config.stack, config.seed)?;
    let mut optimizer = Adam::new(AdamConfig {
        lr: config.lr,
        ..Default::default()
    });
    if let Some(ckpt) = resume {
        ckpt.restore(&mut model, &mut optimizer)?;
    }
    let per_epoch = train_data.len().div_ceil(config.batch_size) as u64;
    let total = per_epoch * config.epochs as u64;
    let stop = config.stop_after.unwrap_or(total).min(total);
    let mut losses = Vec::new();
    let mut epochs = Vec::new();
    let echo = config.to_text();

    let start_epoch = (optimizer.step / per_epoch) as usize;
    for epoch in start_epoch..config.epochs {
        if optimizer.step >= stop {
            break;
        }
        let order = epoch_order(train_data.len(), epoch, config.seed);
        let mut epoch_loss = 0.0f64;
        let mut epoch_steps = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let it = epoch as u64 * per_epoch + b as u64;
            if it < optimizer.step {
                continue;
            }
            if it >= stop {
                break;
            }
            let mask = sampling_mask(it, total, config.decay_fraction, chunk.len(), config.stack.horizon, config.seed);
            let loss = accumulate_batch(&mut model, train_data, chunk, &mask, config.loss)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at iteration {it}")));
            }
            if let Some(c) = config.clip {
                model.params.clip_grad_norm(c);
            }
            optimizer
                .step(&mut model.params)
                .map_err(|e| Error::NonFinite(format!("iteration {it}: {e}")))?;
            losses.push(loss);
            epoch_loss += loss as f64;
            epoch_steps += 1;
        }
        let epoch_done = optimizer.step == (epoch as u64 + 1) * per_epoch;
        if epoch_done {
            let test = match test_data {
                Some(t) => Some(evaluate(&model, t, config.batch_size.max(8), None)?.metrics),
                None => None,
            };
            let record = EpochRecord {
                epoch: epoch + 1,
                iteration: optimizer.step,
                train_loss: epoch_loss / epoch_steps.max(1) as f64,
                test,
            };
            if let Some(p) = &config.log {
                append_log(p, &record)?;
            }
            epochs.push(record);
        }
        if let Some(p) = &config.checkpoint {
            checkpoint_save(p, &model, &optimizer, &echo)?;
        }
    }
    Ok(TrainOutcome {
        model,
        optimizer,
        losses,
        epochs,
    })
}

pub struct EvalReport {
    pub metrics: FrameMetrics,
    pub skill: Option<SkillScores>,
    /// Forecasts `[S, n, C, H, W]`.
    pub predictions: Sequences,
}

/// Free-running forecasts for every sequence of `data`.
pub fn predict(model: &Model, data: &SequenceDataset, batch_size: usize) -> Result<Sequences> {
    check_compatible(model.config(), data)?;
    let s = &data.sequences;
    let (c, h, w) = (s.channels(), s.height(), s.width());
    let n = data.horizon;
    let mut out = Vec::with_capacity(s.count() * n * c * h * w);
    let indices: Vec<usize> = (0..s.count()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let frames: Vec<_> = data.batch(chunk).into_iter().map(|t| tape.leaf(t)).collect();
        let seq = model.forward_sequence(&mut tape, &frames, &constant_mask(chunk.len(), n, false))?;
        let forecast: Vec<_> = seq.forecast().iter().map(|&v| tape.value(v).clone()).collect();
        for b in 0..chunk.len() {
            for f in &forecast {
                out.extend_from_slice(&f.data()[b * c * h * w..(b + 1) * c * h * w]);
            }
        }
    }
    Sequences::new([s.count(), n, c, h, w], out)
}

/// Forecast targets `[S, n, C, H, W]` of a dataset.
pub fn targets(data: &SequenceDataset) -> Sequences {
    let s = &data.sequences;
    let idx: Vec<usize> = (0..s.count()).collect();
    let mut out = Vec::with_capacity(s.count() * data.horizon * s.channels() * s.height() * s.width());
    for &i in &idx {
        for t in data.history..data.history + data.horizon {
            out.extend_from_slice(s.frame(i, t));
        }
    }
    Sequences::new([s.count(), data.horizon, s.channels(), s.height(), s.width()], out)
        .expect("target extents come from a validated dataset")
}

/// Inference-mode metrics; skill scores when thresholds are given.
pub fn evaluate(model: &Model, data: &SequenceDataset, batch_size: usize, thresholds: Option<(&[f64], &WeightMap)>) -> Result<EvalReport> {
    let predictions = predict(model, data, batch_size)?;
    let truth = targets(data);
    let metrics = frame_metrics(&predictions, &truth)?;
    let skill = match thresholds {
        Some((t, w)) => Some(skill_scores(&predictions, &truth, t, w)?),
        None => None,
    };
    Ok(EvalReport {
        metrics,
        skill,
        predictions,
    })
}

/// Rebuilds a model from a checkpoint's config echo and restores its weights.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<(Model, Adam)> {
    let stack = stack_config_from_echo(&ckpt.config)?;
    let mut model = build_stack(&stack, 0)?;
    let mut adam = Adam::new(AdamConfig::default());
    ckpt.restore(&mut model, &mut adam)?;
    Ok((model, adam))
}
