//! Training objectives: supervised classification, slice contrast,
//! hierarchical crop contrast, reconstruction, masked modeling and
//! next-transaction prediction, plus the shared training loop.

mod contrastive;
mod generative;
mod training;

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;

pub use contrastive::{
    coles_sample_subsequences, contrastive_loss, crops_with_overlap, hierarchy_levels, l2_normalize,
    ts2vec_contexts, ts2vec_hierarchical_loss, CropPair, SubsequenceSample,
};
pub use generative::{
    ar_targets, joint_loss, mlm_corrupt, CorruptionAction, CorruptionPlan, JointLoss, LossBreakdown, MASK_INDEX,
};
pub use training::{overfit_one_batch, train, train_samples, EpochRecord, TrainConfig, TrainOutcome};

use crate::data::{ClientSequence, PAD_INDEX};
use crate::encoders::{gru_run, init_gru, Encoder, EncoderConfig, GruNodes, HiddenBatch, Pooling, SeqBatch};
use crate::error::{Error, Result};
use crate::numeric::{init_glorot, Binding, NodeId, ParamStore, Tape, Tensor};
use crate::rng::{stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Objective {
    Supervised,
    Coles,
    Ts2Vec,
    Ae,
    Mlm,
    Ar,
}

impl Objective {
    pub const ALL: [Objective; 6] =
        [Objective::Supervised, Objective::Coles, Objective::Ts2Vec, Objective::Ae, Objective::Mlm, Objective::Ar];

    pub fn default_pooling(self) -> Pooling {
        match self {
            Objective::Ts2Vec => Pooling::Max,
            Objective::Mlm => Pooling::First,
            _ => Pooling::Last,
        }
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "coles" => Ok(Self::Coles),
            "ts2vec" => Ok(Self::Ts2Vec),
            "ae" => Ok(Self::Ae),
            "mlm" => Ok(Self::Mlm),
            "ar" => Ok(Self::Ar),
            other => Err(Error::invalid(format!("unknown objective {other:?}"))),
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Supervised => "supervised",
            Self::Coles => "coles",
            Self::Ts2Vec => "ts2vec",
            Self::Ae => "ae",
            Self::Mlm => "mlm",
            Self::Ar => "ar",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelDims {
    pub d_emb: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Hidden width of the supervised classification head.
    pub head_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self { d_emb: 16, hidden: 64, heads: 4, blocks: 2, head_hidden: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub slices_per_client: usize,
    pub slice_min: usize,
    pub slice_max: usize,
    pub margin: f64,
    pub ts2vec_alpha: f64,
    pub mlm_rate: f64,
    pub mlm_split: [f64; 3],
    pub loss_weights: (f64, f64),
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            slices_per_client: 5,
            slice_min: 15,
            slice_max: 50,
            margin: 0.5,
            ts2vec_alpha: 0.5,
            mlm_rate: 0.10,
            mlm_split: [0.8, 0.1, 0.1],
            loss_weights: (5.0, 1.0),
        }
    }
}

/// An encoder together with the objective-specific heads (`head.*`, `dec.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub objective: Objective,
    pub encoder: Encoder,
    pub heads: ParamStore,
    pub n_classes: usize,
}

impl Model {
    pub fn new(objective: Objective, table_size: usize, dims: ModelDims, n_classes: usize, seed: u64) -> Result<Self> {
        let config = match objective {
            Objective::Mlm => EncoderConfig::transformer(table_size, dims.d_emb, dims.hidden, dims.heads, dims.blocks),
            _ => EncoderConfig::gru(table_size, dims.d_emb, dims.hidden),
        };
        let encoder = Encoder::new(config, seed)?;
        let mut rng = stream(seed, "init.heads");
        let mut heads = ParamStore::new();
        let d = dims.hidden;
        match objective {
            Objective::Supervised => {
                if n_classes < 2 {
                    return Err(Error::invalid("supervised training needs at least 2 classes"));
                }
                heads.insert("head.w1", init_glorot(&mut rng, d, dims.head_hidden));
                heads.insert("head.b1", Tensor::zeros(&[1, dims.head_hidden]));
                heads.insert("head.w2", init_glorot(&mut rng, dims.head_hidden, n_classes));
                heads.insert("head.b2", Tensor::zeros(&[1, n_classes]));
            }
            Objective::Ae => {
                heads.insert("dec.init_w", init_glorot(&mut rng, d, 2 * d));
                heads.insert("dec.init_b", Tensor::zeros(&[1, 2 * d]));
                init_gru(&mut heads, "dec.gru", dims.d_emb + 1, 2 * d, &mut rng);
                insert_code_amount_head(&mut heads, 2 * d, table_size, &mut rng);
            }
            Objective::Mlm | Objective::Ar => insert_code_amount_head(&mut heads, d, table_size, &mut rng),
            Objective::Coles | Objective::Ts2Vec => {}
        }
        Ok(Self { objective, encoder, heads, n_classes })
    }

    pub fn pooling(&self) -> Pooling {
        self.objective.default_pooling()
    }

    /// Encoder and head parameters in one store.
    pub fn params(&self) -> ParamStore {
        let mut all = self.encoder.params.clone();
        all.merge(self.heads.clone());
        all
    }

    /// Replaces every parameter from a combined store.
    pub fn set_params(&mut self, all: &ParamStore) -> Result<()> {
        for store in [&mut self.encoder.params, &mut self.heads] {
            let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
            for n in names {
                let t = all.get(&n)?;
                let slot = store.get_mut(&n)?;
                if slot.shape() != t.shape() {
                    return Err(Error::Shape(format!("parameter {n}: {:?} vs {:?}", slot.shape(), t.shape())));
                }
                *slot = t.clone();
            }
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        self.encoder.config.table_size
    }
}

fn insert_code_amount_head(store: &mut ParamStore, width: usize, classes: usize, rng: &mut Rng) {
    store.insert("head.mcc_w", init_glorot(rng, width, classes));
    store.insert("head.mcc_b", Tensor::zeros(&[1, classes]));
    store.insert("head.amt_w", init_glorot(rng, width, 1));
    store.insert("head.amt_b", Tensor::zeros(&[1, 1]));
}

fn code_amount_head(tape: &mut Tape, bind: &Binding, h: NodeId) -> Result<(NodeId, NodeId)> {
    let lw = tape.matmul(h, bind.get("head.mcc_w")?)?;
    let logits = tape.add(lw, bind.get("head.mcc_b")?)?;
    let aw = tape.matmul(h, bind.get("head.amt_w")?)?;
    let amount = tape.add(aw, bind.get("head.amt_b")?)?;
    Ok((logits, amount))
}

/// Class logits of the supervised head for pooled states `h`.
pub fn supervised_head(tape: &mut Tape, bind: &Binding, h: NodeId) -> Result<NodeId> {
    let a = tape.matmul(h, bind.get("head.w1")?)?;
    let a = tape.add(a, bind.get("head.b1")?)?;
    let a = tape.relu(a)?;
    let b = tape.matmul(a, bind.get("head.w2")?)?;
    tape.add(b, bind.get("head.b2")?)
}

/// Class logits of a supervised model for one sequence.
pub fn supervised_forward(model: &Model, seq: &ClientSequence) -> Result<Vec<f64>> {
    if model.objective != Objective::Supervised {
        return Err(Error::invalid("model has no classification head"));
    }
    let batch = SeqBatch::from_sequences([seq])?;
    let mut tape = Tape::new();
    let bind = model.params().bind(&mut tape, false);
    let hidden = model.encoder.forward(&mut tape, &bind, &batch)?;
    let pooled = hidden.pool(&mut tape, model.pooling())?;
    let logits = supervised_head(&mut tape, &bind, pooled)?;
    Ok(tape.value(logits).data().to_vec())
}

/// Model input: code indices, transformed amounts and an optional label.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub amounts: Vec<f64>,
    pub label: Option<usize>,
}

impl Sample {
    pub fn from_sequence(seq: &ClientSequence) -> Self {
        Self { tokens: seq.mcc_indices(), amounts: seq.amounts(), label: seq.label }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn window(&self, start: usize, end: usize) -> Sample {
        Sample { tokens: self.tokens[start..end].to_vec(), amounts: self.amounts[start..end].to_vec(), label: self.label }
    }
}

fn batch_of<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<SeqBatch> {
    let (tokens, amounts) = samples.into_iter().map(|s| (s.tokens.clone(), s.amounts.clone())).unzip();
    SeqBatch::new(tokens, amounts)
}

/// A batch with all random choices of its objective already drawn.
#[derive(Clone, Debug)]
pub enum Prepared {
    Supervised { batch: SeqBatch, labels: Vec<usize> },
    Coles { batch: SeqBatch, tags: Vec<usize> },
    Ts2Vec { first: SeqBatch, second: SeqBatch, crops: Vec<CropPair> },
    Ae { batch: SeqBatch },
    Mlm { corrupted: SeqBatch, plan: CorruptionPlan },
    Ar { batch: SeqBatch },
}

/// Draws slices, crops or corruption for `samples`. Returns `None` when the
/// batch cannot form a training signal (for example fewer than two slices).
pub fn prepare(objective: Objective, cfg: &ObjectiveConfig, samples: &[Sample], rng: &mut Rng) -> Result<Option<Prepared>> {
    if samples.is_empty() {
        return Ok(None);
    }
    Ok(Some(match objective {
        Objective::Supervised => {
            let labels = samples
                .iter()
                .map(|s| s.label.ok_or_else(|| Error::invalid("supervised sample without a label")))
                .collect::<Result<_>>()?;
            Prepared::Supervised { batch: batch_of(samples)?, labels }
        }
        Objective::Coles => {
            let lengths: Vec<usize> = samples.iter().map(Sample::len).collect();
            let slices =
                coles_sample_subsequences(&lengths, cfg.slices_per_client, cfg.slice_min, cfg.slice_max, rng)?;
            if slices.len() < 2 {
                return Ok(None);
            }
            let windows: Vec<Sample> = slices.iter().map(|s| samples[s.client].window(s.start, s.end)).collect();
            Prepared::Coles { batch: batch_of(&windows)?, tags: slices.iter().map(|s| s.client).collect() }
        }
        Objective::Ts2Vec => {
            let shortest = samples.iter().map(Sample::len).min().unwrap_or(0);
            let overlap = rng.random_range(shortest.min(2)..=shortest);
            let crops: Vec<CropPair> =
                samples.iter().map(|s| crops_with_overlap(s.len(), overlap, rng)).collect::<Result<_>>()?;
            let first: Vec<Sample> = samples.iter().zip(&crops).map(|(s, c)| s.window(c.first.0, c.first.1)).collect();
            let second: Vec<Sample> =
                samples.iter().zip(&crops).map(|(s, c)| s.window(c.second.0, c.second.1)).collect();
            Prepared::Ts2Vec { first: batch_of(&first)?, second: batch_of(&second)?, crops }
        }
        Objective::Ae => Prepared::Ae { batch: batch_of(samples)? },
        Objective::Mlm => {
            let batch = batch_of(samples)?;
            let (corrupted, plan) = mlm_corrupt(&batch, cfg.mlm_rate, cfg.mlm_split, rng)?;
            Prepared::Mlm { corrupted, plan }
        }
        Objective::Ar => {
            if samples.iter().all(|s| s.len() < 2) {
                return Ok(None);
            }
            Prepared::Ar { batch: batch_of(samples)? }
        }
    }))
}

/// Rows of `hidden` for every position of the overlap, instance-major.
fn overlap_rows(hidden: &HiddenBatch, crops: &[CropPair], first: bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (b, c) in crops.iter().enumerate() {
        for k in 0..c.overlap_len() {
            let (p1, p2) = c.aligned(k);
            out.push((b, if first { p1 } else { p2 }));
        }
    }
    debug_assert!(out.iter().all(|&(b, j)| j < hidden.lengths[b]));
    out
}

/// Scalar training loss of `model` on a prepared batch.
pub fn objective_loss(model: &Model, cfg: &ObjectiveConfig, tape: &mut Tape, bind: &Binding, prepared: &Prepared) -> Result<NodeId> {
    let enc = &model.encoder;
    match prepared {
        Prepared::Supervised { batch, labels } => {
            let hidden = enc.forward(tape, bind, batch)?;
            let pooled = hidden.pool(tape, model.pooling())?;
            let logits = supervised_head(tape, bind, pooled)?;
            tape.cross_entropy(logits, labels)
        }
        Prepared::Coles { batch, tags } => {
            let hidden = enc.forward(tape, bind, batch)?;
            let pooled = hidden.pool(tape, model.pooling())?;
            let e = l2_normalize(tape, pooled)?;
            contrastive_loss(tape, e, tags, cfg.margin)
        }
        Prepared::Ts2Vec { first, second, crops } => {
            let h1 = enc.forward(tape, bind, first)?;
            let h2 = enc.forward(tape, bind, second)?;
            let z1 = h1.gather(tape, &overlap_rows(&h1, crops, true))?;
            let z2 = h2.gather(tape, &overlap_rows(&h2, crops, false))?;
            let len = crops[0].overlap_len();
            ts2vec_hierarchical_loss(tape, z1, z2, crops.len(), len, cfg.ts2vec_alpha)
        }
        Prepared::Ae { batch } => ae_loss(model, cfg, tape, bind, batch),
        Prepared::Mlm { corrupted, plan } => {
            let hidden = enc.forward(tape, bind, corrupted)?;
            let h = hidden.gather(tape, &plan.positions)?;
            let (logits, amount) = code_amount_head(tape, bind, h)?;
            let l = joint_loss(tape, logits, amount, &plan.original_tokens, &plan.original_amounts, cfg.loss_weights)?;
            Ok(l.total)
        }
        Prepared::Ar { batch } => {
            let hidden = enc.forward(tape, bind, batch)?;
            let (mut pos, mut codes, mut amts) = (Vec::new(), Vec::new(), Vec::new());
            for (b, (tok, am)) in batch.tokens.iter().zip(&batch.amounts).enumerate() {
                for (j, c, a) in ar_targets(tok, am) {
                    pos.push((b, j));
                    codes.push(c);
                    amts.push(a);
                }
            }
            if pos.is_empty() {
                return Err(Error::invalid("joint loss over an empty position set"));
            }
            let h = hidden.gather(tape, &pos)?;
            let (logits, amount) = code_amount_head(tape, bind, h)?;
            Ok(joint_loss(tape, logits, amount, &codes, &amts, cfg.loss_weights)?.total)
        }
    }
}

/// Reconstruction through a GRU decoder seeded from the pooled encoder
/// state and fed the previous original transaction at every step.
fn ae_loss(model: &Model, cfg: &ObjectiveConfig, tape: &mut Tape, bind: &Binding, batch: &SeqBatch) -> Result<NodeId> {
    let hidden = model.encoder.forward(tape, bind, batch)?;
    let pooled = hidden.pool(tape, model.pooling())?;
    let iw = tape.matmul(pooled, bind.get("dec.init_w")?)?;
    let ib = tape.add(iw, bind.get("dec.init_b")?)?;
    let h0 = tape.tanh(ib)?;
    let n = batch.len();
    let steps = batch.max_len();
    let lengths = batch.lengths();
    let mut idx = vec![PAD_INDEX; steps * n];
    let mut amt = vec![0.0; steps * n];
    for (b, (tok, am)) in batch.tokens.iter().zip(&batch.amounts).enumerate() {
        for t in 1..tok.len() {
            idx[t * n + b] = tok[t - 1];
            amt[t * n + b] = am[t - 1];
        }
    }
    let x = model.encoder.embed_rows(tape, bind, &idx, &amt)?;
    let dec = GruNodes::resolve(bind, "dec.gru")?;
    let states = gru_run(tape, &dec, x, h0, &lengths, steps)?;
    let (mut rows, mut codes, mut amts) = (Vec::new(), Vec::new(), Vec::new());
    for (b, (tok, am)) in batch.tokens.iter().zip(&batch.amounts).enumerate() {
        for t in 0..tok.len() {
            rows.push(t * n + b);
            codes.push(tok[t]);
            amts.push(am[t]);
        }
    }
    let h = tape.gather(states, &rows)?;
    let (logits, amount) = code_amount_head(tape, bind, h)?;
    Ok(joint_loss(tape, logits, amount, &codes, &amts, cfg.loss_weights)?.total)
}
