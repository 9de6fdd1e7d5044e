//! Mini-batch training with Adam, per-epoch validation, best and last
//! checkpoints and a JSON-lines log.
//!
//! Every random draw comes from a stream keyed by (seed, epoch, sample), so
//! an epoch produces the same updates whether it runs after a resume or
//! not and whatever the thread count. Per-sample gradients are reduced in
//! batch order.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use numkit::{Adam, AdamConfig, ParamStore, StepDecay, Tape, Tensor};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::Frame;
use crate::error::{DloError, Result};
use crate::eval::node_error;
use crate::heads::{symmetric_losses, LossWeights};
use crate::model::{load_checkpoint, save_checkpoint, CheckpointMeta, Model};
use crate::par::Exec;
use crate::sample::{item_rng, prepare_input, training_sample, AugmentPolicy, TrainSample};
use crate::synth::AugmentConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub decay_ratio: f64,
    pub decay_every: usize,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub augment: AugmentPolicy,
    /// Validation frames scored after each epoch, spread over the split.
    pub val_frames: usize,
    /// Train on only the first this many training frames.
    pub max_train_frames: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 60,
            batch_size: 32,
            learning_rate: 1e-2,
            decay_ratio: 0.5,
            decay_every: 20,
            weight_decay: 5e-4,
            loss: LossWeights::default(),
            augment: AugmentPolicy::default(),
            val_frames: 100,
            max_train_frames: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.augment.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(DloError::Config("epochs and batch size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.decay_ratio > 0.0 && self.decay_ratio <= 1.0) {
            return Err(DloError::Config(format!(
                "learning rate {} must be positive and decay ratio {} in (0, 1]",
                self.learning_rate, self.decay_ratio
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(DloError::Config("weight decay must be non-negative".into()));
        }
        Ok(())
    }

    pub fn schedule(&self) -> StepDecay {
        StepDecay {
            initial: self.learning_rate,
            ratio: self.decay_ratio,
            every: self.decay_every,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub loss_reg: f64,
    pub loss_vot: f64,
    /// Mean all-node errors on the validation subset, meters.
    pub val_reg: f64,
    pub val_vot: f64,
    /// Mean of the two, the quantity the best checkpoint minimizes.
    pub val_error: f64,
    pub best: bool,
    pub seconds: f64,
}

/// Loss values and parameter gradients of one sample.
pub struct SampleGrad {
    pub loss: f64,
    pub loss_reg: f64,
    pub loss_vot: f64,
    pub grads: Vec<Tensor<f32>>,
}

pub fn sample_gradients(
    model: &Model,
    store: &ParamStore<f32>,
    sample: &TrainSample<f32>,
    weights: LossWeights,
) -> Result<SampleGrad> {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, store, &sample.plan)?;
    let (l, _) = symmetric_losses(&mut tape, out.reg, out.heat, out.offset, &sample.forward, &sample.reversed, weights)?;
    let value = |v| tape.value(v).data()[0] as f64;
    let (loss, loss_reg, loss_vot) = (value(l.total), value(l.reg), value(l.vot));
    let grads = tape.backward(l.total)?.param_grads(store);
    Ok(SampleGrad {
        loss,
        loss_reg,
        loss_vot,
        grads,
    })
}

/// Sums per-sample gradients in order and divides by the batch size.
/// Returns the mean losses as well.
fn reduce(results: Vec<SampleGrad>) -> Result<(f64, f64, f64, Vec<Tensor<f32>>)> {
    let b = results.len() as f64;
    let mut it = results.into_iter();
    let first = it.next().ok_or_else(|| DloError::Invalid("empty batch".into()))?;
    let (mut l, mut lr, mut lv, mut g) = (first.loss, first.loss_reg, first.loss_vot, first.grads);
    for r in it {
        l += r.loss;
        lr += r.loss_reg;
        lv += r.loss_vot;
        for (a, x) in g.iter_mut().zip(&r.grads) {
            a.add_assign(x)?;
        }
    }
    let inv = (1.0 / b) as f32;
    for t in &mut g {
        t.data_mut().iter_mut().for_each(|x| *x *= inv);
    }
    Ok((l / b, lr / b, lv / b, g))
}

fn nan_report(store: &ParamStore<f32>, epoch: usize, batch: usize, seed: u64, what: &str) -> DloError {
    let mut norms: Vec<String> = store
        .iter()
        .map(|(_, name, t)| format!("{name}={:.3e}", (t.squared_norm() as f64).sqrt()))
        .collect();
    norms.truncate(64);
    DloError::Numerical(format!(
        "non-finite {what} at epoch {epoch}, batch {batch} (seed {seed}); parameter norms: {}",
        norms.join(" ")
    ))
}

/// Mean all-node errors (regression, voting) of unaugmented inference.
pub fn validation_error(model: &Model, store: &ParamStore<f32>, frames: &[Frame], seed: u64, exec: Exec) -> Result<(f64, f64)> {
    if frames.is_empty() {
        return Ok((f64::NAN, f64::NAN));
    }
    let cfg = &model.config;
    let errs = exec.map(frames, |f| -> Result<(f64, f64)> {
        let mut rng = item_rng(seed, u64::MAX, f.meta.sequence as u64 * 10_000 + f.meta.frame as u64);
        let input = prepare_input(f, &AugmentConfig::none(), cfg.points(), cfg.radius, &mut rng)?;
        let out = model.infer(store, &input.cloud)?;
        Ok((
            node_error(&out.reg, &input.nodes, &input.mask)?.all,
            node_error(&out.vot, &input.nodes, &input.mask)?.all,
        ))
    });
    let mut s = (0.0, 0.0);
    for e in errs {
        let (r, v) = e?;
        s.0 += r;
        s.1 += v;
    }
    let n = frames.len() as f64;
    Ok((s.0 / n, s.1 / n))
}

/// `count` frames spread evenly over `frames`.
pub fn spread_subset(frames: &[Frame], count: usize) -> Vec<Frame> {
    if count >= frames.len() {
        return frames.to_vec();
    }
    (0..count).map(|i| frames[i * frames.len() / count].clone()).collect()
}

pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

impl TrainOutputs {
    pub fn new(checkpoint: &Path) -> Self {
        Self {
            checkpoint: checkpoint.to_path_buf(),
            log: checkpoint.with_extension("log.jsonl"),
        }
    }

    /// Where the latest epoch's state goes, for resuming.
    pub fn last(&self) -> PathBuf {
        self.checkpoint.with_extension("last")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs_run: usize,
    pub best_val_error: f64,
    pub history: Vec<EpochRecord>,
}

/// Trains `model` from scratch, or from `<checkpoint>.last` when `resume`
/// is set and that file exists. `run` is echoed into every checkpoint.
#[allow(clippy::too_many_arguments)]
pub fn train(
    model: &Model,
    init_seed: u64,
    mut store: ParamStore<f32>,
    train_frames: &[Frame],
    val_frames: &[Frame],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    resume: bool,
    run: serde_json::Value,
    exec: Exec,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let frames = &train_frames[..cfg.max_train_frames.unwrap_or(train_frames.len()).min(train_frames.len())];
    if frames.is_empty() {
        return Err(DloError::Invalid("no training frames".into()));
    }
    let val = spread_subset(val_frames, cfg.val_frames);
    let mut adam = Adam::new(cfg.adam(), &store);
    let mut start = 0;
    let mut best = f64::INFINITY;
    if resume && outputs.last().exists() {
        let ck = load_checkpoint(&outputs.last())?;
        if ck.meta.model != model.config {
            return Err(DloError::Config("resume checkpoint was trained with a different model".into()));
        }
        store = ck.store;
        adam.state = ck.adam.ok_or_else(|| DloError::Format("resume checkpoint lacks optimizer state".into()))?;
        start = ck.meta.epoch;
        best = ck.meta.best_val_error.unwrap_or(f64::INFINITY);
        log::info!("resuming after epoch {start}");
    } else {
        // a fresh run starts a fresh log
        std::fs::write(&outputs.log, "")?;
    }
    let schedule = cfg.schedule();
    let mut history = Vec::new();
    for epoch in start..cfg.epochs {
        let t0 = Instant::now();
        let lr = schedule.lr_at(epoch);
        let mut order: Vec<usize> = (0..frames.len()).collect();
        order.shuffle(&mut item_rng(cfg.seed, epoch as u64, u64::MAX));
        let (mut sum, mut sum_reg, mut sum_vot, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let results = exec.map(chunk, |&i| -> Result<SampleGrad> {
                let mut rng = item_rng(cfg.seed, epoch as u64, i as u64);
                let sample = training_sample::<f32>(&frames[i], &cfg.augment, &model.config, &mut rng)?;
                sample_gradients(model, &store, &sample, cfg.loss)
            });
            let results: Result<Vec<SampleGrad>> = results.into_iter().collect();
            let (l, lr_, lv, grads) = reduce(results?)?;
            if !l.is_finite() {
                return Err(nan_report(&store, epoch, b, cfg.seed, "loss"));
            }
            if !grads.iter().all(|g| g.all_finite()) {
                return Err(nan_report(&store, epoch, b, cfg.seed, "gradient"));
            }
            adam.step(&mut store, &grads, lr)?;
            sum += l;
            sum_reg += lr_;
            sum_vot += lv;
            batches += 1;
        }
        let (val_reg, val_vot) = validation_error(model, &store, &val, cfg.seed, exec)?;
        let val_error = if val.is_empty() { sum / batches as f64 } else { 0.5 * (val_reg + val_vot) };
        let improved = val_error < best;
        if improved {
            best = val_error;
        }
        let n = batches as f64;
        let rec = EpochRecord {
            epoch: epoch + 1,
            lr,
            loss: sum / n,
            loss_reg: sum_reg / n,
            loss_vot: sum_vot / n,
            val_reg,
            val_vot,
            val_error,
            best: improved,
            seconds: t0.elapsed().as_secs_f64(),
        };
        let meta = CheckpointMeta {
            model: model.config.clone(),
            init_seed,
            epoch: epoch + 1,
            adam_step: adam.state.step,
            best_val_error: Some(best),
            run: run.clone(),
        };
        if improved {
            save_checkpoint(&outputs.checkpoint, &store, None, &meta)?;
        }
        save_checkpoint(&outputs.last(), &store, Some(&adam.state), &meta)?;
        let mut f = OpenOptions::new().create(true).append(true).open(&outputs.log)?;
        writeln!(f, "{}", serde_json::to_string(&rec).map_err(|e| DloError::Format(e.to_string()))?)?;
        log::info!(
            "epoch {:>3} lr {:.2e} loss {:.5} (reg {:.5}, vot {:.5}) val reg {:.1} mm, vot {:.1} mm, {:.0} s",
            rec.epoch,
            lr,
            rec.loss,
            rec.loss_reg,
            rec.loss_vot,
            val_reg * 1e3,
            val_vot * 1e3,
            rec.seconds
        );
        history.push(rec);
    }
    Ok(TrainSummary {
        epochs_run: history.len(),
        best_val_error: best,
        history,
    })
}

/// Full-batch steps on fixed, unaugmented samples; returns the loss
/// before each step and after the last one.
pub fn overfit(
    model: &Model,
    store: &mut ParamStore<f32>,
    frames: &[Frame],
    steps: usize,
    learning_rate: f64,
    exec: Exec,
) -> Result<Vec<(f64, f64, f64)>> {
    let cfg = &model.config;
    let samples: Vec<TrainSample<f32>> = frames
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut rng = item_rng(0, 0, i as u64);
            let input = prepare_input(f, &AugmentConfig::none(), cfg.points(), cfg.radius, &mut rng)?;
            TrainSample::build(&input, cfg)
        })
        .collect::<Result<_>>()?;
    let mut adam = Adam::new(AdamConfig::default(), store);
    let mut curve = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let results: Result<Vec<SampleGrad>> = exec
            .map(&samples, |s| sample_gradients(model, store, s, LossWeights::default()))
            .into_iter()
            .collect();
        let (l, lr_, lv, grads) = reduce(results?)?;
        if !l.is_finite() {
            return Err(nan_report(store, 0, step, 0, "loss"));
        }
        curve.push((l, lr_, lv));
        if step < steps {
            adam.step(store, &grads, learning_rate)?;
        }
    }
    Ok(curve)
}
