use rand::seq::SliceRandom;
use rand::Rng as _;

use super::{objective_loss, prepare, Model, ModelDims, Objective, ObjectiveConfig, Prepared, Sample};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numeric::{adam_step, clip_grad_norm, AdamConfig, AdamState, ParamStore, Tape};
use crate::rng::{stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Longest window fed to the encoder during training; longer sequences
    /// are cropped at a random offset (the latest window for supervised).
    pub max_len: usize,
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 32, lr: 3e-3, max_len: 128, grad_clip: 5.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochRecord>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

fn crop(objective: Objective, sample: &Sample, max_len: usize, rng: &mut Rng) -> Sample {
    if objective == Objective::Coles || sample.len() <= max_len {
        return sample.clone();
    }
    let start = if objective == Objective::Supervised {
        sample.len() - max_len
    } else {
        rng.random_range(0..=sample.len() - max_len)
    };
    sample.window(start, start + max_len)
}

fn step_loss(model: &Model, ocfg: &ObjectiveConfig, params: &ParamStore, prepared: &Prepared, grad: bool) -> Result<(f64, Option<std::collections::BTreeMap<String, crate::numeric::Tensor>>)> {
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape, grad);
    let loss = objective_loss(model, ocfg, &mut tape, &bind, prepared)?;
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss" });
    }
    if !grad {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    Ok((value, Some(bind.named_grads(&grads))))
}

fn mean_loss(model: &Model, ocfg: &ObjectiveConfig, tcfg: &TrainConfig, params: &ParamStore, samples: &[Sample], seed: u64) -> Result<Option<f64>> {
    let mut rng = stream(seed, "train.validation");
    let (mut total, mut count) = (0.0, 0usize);
    for chunk in samples.chunks(tcfg.batch_size.max(1)) {
        let cropped: Vec<Sample> = chunk.iter().map(|s| crop(model.objective, s, tcfg.max_len, &mut rng)).collect();
        if let Some(p) = prepare(model.objective, ocfg, &cropped, &mut rng)? {
            total += step_loss(model, ocfg, params, &p, false)?.0;
            count += 1;
        }
    }
    Ok((count > 0).then(|| total / count as f64))
}

/// Mini-batch Adam training. Returns the parameters of the epoch with the
/// lowest validation loss (training loss when no validation batch exists).
pub fn train(
    objective: Objective,
    dims: ModelDims,
    ocfg: &ObjectiveConfig,
    tcfg: &TrainConfig,
    train: &Dataset,
    validation: &Dataset,
    seed: u64,
) -> Result<TrainOutcome> {
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let vocab = train.vocab.as_ref().ok_or_else(|| Error::invalid("vocabulary not fitted"))?;
    let model = Model::new(objective, vocab.table_size(), dims, train.meta.n_classes, seed)?;
    let samples: Vec<Sample> = train.sequences.iter().map(Sample::from_sequence).collect();
    let val: Vec<Sample> = validation.sequences.iter().map(Sample::from_sequence).collect();
    train_samples(model, ocfg, tcfg, &samples, &val, seed)
}

/// [`train`] starting from an already built model.
pub fn train_samples(
    mut model: Model,
    ocfg: &ObjectiveConfig,
    tcfg: &TrainConfig,
    samples: &[Sample],
    val: &[Sample],
    seed: u64,
) -> Result<TrainOutcome> {
    if samples.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let mut params = model.params();
    let mut adam = AdamState::new(AdamConfig { lr: tcfg.lr, ..AdamConfig::default() });
    let mut order_rng = stream(seed, "train.order");
    let mut batch_rng = stream(seed, "train.batch");
    let mut history = Vec::with_capacity(tcfg.epochs);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 0..tcfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(tcfg.batch_size.max(1)) {
            let batch: Vec<Sample> =
                chunk.iter().map(|&i| crop(model.objective, &samples[i], tcfg.max_len, &mut batch_rng)).collect();
            let Some(prepared) = prepare(model.objective, ocfg, &batch, &mut batch_rng)? else { continue };
            let (loss, grads) = step_loss(&model, ocfg, &params, &prepared, true).map_err(|e| {
                Error::invalid(format!("{} training aborted at epoch {epoch}, step {steps}: {e}", model.objective))
            })?;
            let mut grads = grads.unwrap_or_default();
            if tcfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, tcfg.grad_clip);
            }
            adam_step(&mut params, &grads, &mut adam)?;
            total += loss;
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::invalid("no training batch could be formed"));
        }
        let train_loss = total / steps as f64;
        let val_loss = mean_loss(&model, ocfg, tcfg, &params, val, seed)?;
        log::info!("{} epoch {epoch}: train {train_loss:.5} val {val_loss:?}", model.objective);
        history.push(EpochRecord { epoch, train_loss, val_loss });
        let score = val_loss.unwrap_or(train_loss);
        if best.as_ref().is_none_or(|b| score < b.0) {
            best = Some((score, epoch, params.clone()));
        }
    }
    let (best_epoch, kept) = match best {
        Some((_, e, p)) => (e, p),
        None => (0, params),
    };
    model.set_params(&kept)?;
    Ok(TrainOutcome { model, history, best_epoch })
}

/// Loss after every Adam step on one prepared batch, starting with the
/// loss at initialisation.
pub fn overfit_one_batch(model: &mut Model, ocfg: &ObjectiveConfig, prepared: &Prepared, steps: usize, lr: f64) -> Result<Vec<f64>> {
    let mut params = model.params();
    let mut adam = AdamState::new(AdamConfig { lr, ..AdamConfig::default() });
    let mut losses = Vec::with_capacity(steps + 1);
    for _ in 0..steps {
        let (loss, grads) = step_loss(model, ocfg, &params, prepared, true)?;
        losses.push(loss);
        adam_step(&mut params, &grads.unwrap_or_default(), &mut adam)?;
    }
    losses.push(step_loss(model, ocfg, &params, prepared, false)?.0);
    model.set_params(&params)?;
    Ok(losses)
}
