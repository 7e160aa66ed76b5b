use rand::Rng as _;

use crate::data::PAD_INDEX;
use crate::encoders::SeqBatch;
use crate::error::{Error, Result};
use crate::numeric::{Axis, NodeId, Tape, Tensor};
use crate::rng::Rng;

/// Code index written over masked transactions.
pub const MASK_INDEX: usize = PAD_INDEX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionAction {
    Mask,
    /// Replaced by the transaction at `(instance, position)` of the batch.
    Swap(usize, usize),
    Keep,
}

/// Selected `(instance, position)` pairs with their action and originals.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptionPlan {
    pub positions: Vec<(usize, usize)>,
    pub actions: Vec<CorruptionAction>,
    pub original_tokens: Vec<usize>,
    pub original_amounts: Vec<f64>,
}

impl CorruptionPlan {
    /// Writes the recorded originals back into a corrupted batch.
    pub fn restore(&self, corrupted: &SeqBatch) -> SeqBatch {
        let mut out = corrupted.clone();
        for (k, &(b, j)) in self.positions.iter().enumerate() {
            out.tokens[b][j] = self.original_tokens[k];
            out.amounts[b][j] = self.original_amounts[k];
        }
        out
    }
}

/// Selects each transaction with probability `rate`, then masks, swaps or
/// keeps it with probabilities `split`. When nothing is selected one
/// uniformly drawn position is, so every batch carries a target.
pub fn mlm_corrupt(batch: &SeqBatch, rate: f64, split: [f64; 3], rng: &mut Rng) -> Result<(SeqBatch, CorruptionPlan)> {
    if !(0.0..=1.0).contains(&rate) || (split.iter().sum::<f64>() - 1.0).abs() > 1e-9 || split.iter().any(|&p| p < 0.0) {
        return Err(Error::invalid(format!("corruption rate {rate} / split {split:?} invalid")));
    }
    let all: Vec<(usize, usize)> = batch
        .tokens
        .iter()
        .enumerate()
        .flat_map(|(b, t)| (0..t.len()).map(move |j| (b, j)))
        .collect();
    let mut positions: Vec<(usize, usize)> = all.iter().copied().filter(|_| rng.random::<f64>() < rate).collect();
    if positions.is_empty() {
        positions.push(all[rng.random_range(0..all.len())]);
    }
    let mut out = batch.clone();
    let mut plan = CorruptionPlan {
        positions: Vec::with_capacity(positions.len()),
        actions: Vec::with_capacity(positions.len()),
        original_tokens: Vec::with_capacity(positions.len()),
        original_amounts: Vec::with_capacity(positions.len()),
    };
    for (b, j) in positions {
        let u: f64 = rng.random();
        let action = if u < split[0] {
            out.tokens[b][j] = MASK_INDEX;
            out.amounts[b][j] = 0.0;
            CorruptionAction::Mask
        } else if u < split[0] + split[1] {
            let (sb, sj) = all[rng.random_range(0..all.len())];
            out.tokens[b][j] = batch.tokens[sb][sj];
            out.amounts[b][j] = batch.amounts[sb][sj];
            CorruptionAction::Swap(sb, sj)
        } else {
            CorruptionAction::Keep
        };
        plan.positions.push((b, j));
        plan.actions.push(action);
        plan.original_tokens.push(batch.tokens[b][j]);
        plan.original_amounts.push(batch.amounts[b][j]);
    }
    Ok((out, plan))
}

/// `(position, next code, next amount)` for every position with a successor.
pub fn ar_targets(tokens: &[usize], amounts: &[f64]) -> Vec<(usize, usize, f64)> {
    (0..tokens.len().saturating_sub(1)).map(|j| (j, tokens[j + 1], amounts[j + 1])).collect()
}

/// Loss terms on the tape.
#[derive(Clone, Copy, Debug)]
pub struct JointLoss {
    pub ce: NodeId,
    pub mse: NodeId,
    pub total: NodeId,
}

/// Scalar values of the loss terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub mse: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(ce: f64, mse: f64, weights: (f64, f64)) -> Self {
        Self { ce, mse, total: weights.0 * ce + weights.1 * mse }
    }

    pub fn read(tape: &Tape, l: &JointLoss) -> Self {
        Self { ce: tape.value(l.ce).item(), mse: tape.value(l.mse).item(), total: tape.value(l.total).item() }
    }
}

/// Code cross-entropy plus amount squared error over the rows of `logits`
/// and `amounts` (one row per supervised position).
pub fn joint_loss(
    tape: &mut Tape,
    logits: NodeId,
    amounts: NodeId,
    target_codes: &[usize],
    target_amounts: &[f64],
    weights: (f64, f64),
) -> Result<JointLoss> {
    if target_codes.is_empty() {
        return Err(Error::invalid("joint loss over an empty position set"));
    }
    if target_codes.len() != target_amounts.len() {
        return Err(Error::Shape("code and amount targets differ in length".into()));
    }
    let ce = tape.cross_entropy(logits, target_codes)?;
    let t = tape.constant(Tensor::column(target_amounts));
    let diff = tape.sub(amounts, t)?;
    let sq = tape.square(diff)?;
    let mse = tape.mean(sq, Axis::All)?;
    let a = tape.scale(ce, weights.0)?;
    let b = tape.scale(mse, weights.1)?;
    let total = tape.add(a, b)?;
    Ok(JointLoss { ce, mse, total })
}
