//! Sequence encoders: transaction embedding, a causal GRU and a
//! bidirectional transformer, with pooling into whole-sequence vectors.

mod gru;
mod transformer;

use std::fmt;
use std::str::FromStr;

pub use gru::{gru_cell, gru_run, init_gru, GruNodes};
pub use transformer::{block_forward, init_block, positional_encoding, transformer_block, BlockOutput};

use crate::data::{ClientSequence, PAD_INDEX};
use crate::error::{Error, Result};
use crate::numeric::{init_normal, Axis, Binding, NodeId, ParamStore, Tape, Tensor};
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncoderKind {
    Gru,
    Transformer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Last,
    Mean,
    Max,
    /// The leading position; the prepended summary token for transformers.
    First,
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "last" => Ok(Self::Last),
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "first" => Ok(Self::First),
            other => Err(Error::invalid(format!("unknown pooling {other:?}"))),
        }
    }
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Last => "last",
            Self::Mean => "mean",
            Self::Max => "max",
            Self::First => "first",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Rows of the code embedding table: padding, the vocabulary, and OOV.
    pub table_size: usize,
    pub d_emb: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn: usize,
}

impl EncoderConfig {
    pub fn gru(table_size: usize, d_emb: usize, hidden: usize) -> Self {
        Self { kind: EncoderKind::Gru, table_size, d_emb, hidden, heads: 1, blocks: 0, ffn: hidden }
    }

    pub fn transformer(table_size: usize, d_emb: usize, hidden: usize, heads: usize, blocks: usize) -> Self {
        Self { kind: EncoderKind::Transformer, table_size, d_emb, hidden, heads, blocks, ffn: hidden }
    }

    pub fn input_width(&self) -> usize {
        self.d_emb + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.table_size < 2 || self.d_emb == 0 || self.hidden == 0 {
            return Err(Error::invalid("encoder sizes must be positive"));
        }
        if self.kind == EncoderKind::Transformer {
            if self.heads == 0 || self.hidden % self.heads != 0 {
                return Err(Error::invalid(format!(
                    "hidden size {} is not divisible by {} heads",
                    self.hidden, self.heads
                )));
            }
            if self.blocks == 0 || self.ffn == 0 {
                return Err(Error::invalid("transformer needs at least one block"));
            }
        }
        Ok(())
    }
}

/// Padded batch of code-index and transformed-amount sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqBatch {
    pub tokens: Vec<Vec<usize>>,
    pub amounts: Vec<Vec<f64>>,
}

impl SeqBatch {
    pub fn new(tokens: Vec<Vec<usize>>, amounts: Vec<Vec<f64>>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty batch"));
        }
        if tokens.len() != amounts.len() || tokens.iter().zip(&amounts).any(|(t, a)| t.len() != a.len()) {
            return Err(Error::Shape("token and amount sequences differ in length".into()));
        }
        if tokens.iter().any(Vec::is_empty) {
            return Err(Error::invalid("empty sequence"));
        }
        Ok(Self { tokens, amounts })
    }

    pub fn from_sequences<'a>(seqs: impl IntoIterator<Item = &'a ClientSequence>) -> Result<Self> {
        let (tokens, amounts) = seqs.into_iter().map(|s| (s.mcc_indices(), s.amounts())).unzip();
        Self::new(tokens, amounts)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.tokens.iter().map(Vec::len).collect()
    }

    pub fn max_len(&self) -> usize {
        self.tokens.iter().map(Vec::len).max().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Layout {
    TimeMajor,
    InstanceMajor,
}

/// Per-position encoder outputs of a batch on a tape.
#[derive(Clone, Debug)]
pub struct HiddenBatch {
    /// All positions stacked as rows.
    pub states: NodeId,
    pub lengths: Vec<usize>,
    /// Positions per instance including any leading summary token.
    steps: usize,
    /// 1 when a summary token precedes the first transaction.
    offset: usize,
    layout: Layout,
}

impl HiddenBatch {
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    /// Row of transaction `j` of instance `b`.
    pub fn row(&self, b: usize, j: usize) -> usize {
        self.raw_row(b, j + self.offset)
    }

    fn raw_row(&self, b: usize, t: usize) -> usize {
        match self.layout {
            Layout::TimeMajor => t * self.batch() + b,
            Layout::InstanceMajor => b * self.steps + t,
        }
    }

    /// Stacks the states at the given `(instance, transaction)` positions.
    pub fn gather(&self, tape: &mut Tape, positions: &[(usize, usize)]) -> Result<NodeId> {
        let rows: Vec<usize> = positions.iter().map(|&(b, j)| self.row(b, j)).collect();
        tape.gather(self.states, &rows)
    }

    /// `len_b x d` states of instance `b`.
    pub fn instance(&self, tape: &mut Tape, b: usize) -> Result<NodeId> {
        let rows: Vec<usize> = (0..self.lengths[b]).map(|j| self.row(b, j)).collect();
        tape.gather(self.states, &rows)
    }

    /// `batch x d` pooled representations.
    pub fn pool(&self, tape: &mut Tape, strategy: Pooling) -> Result<NodeId> {
        let n = self.batch();
        match strategy {
            Pooling::Last => {
                let rows: Vec<usize> = (0..n).map(|b| self.row(b, self.lengths[b] - 1)).collect();
                tape.gather(self.states, &rows)
            }
            Pooling::First => {
                let rows: Vec<usize> = (0..n).map(|b| self.raw_row(b, 0)).collect();
                tape.gather(self.states, &rows)
            }
            Pooling::Mean => {
                let total = tape.value(self.states).rows();
                let mut sel = vec![0.0; n * total];
                for b in 0..n {
                    let w = 1.0 / self.lengths[b] as f64;
                    for j in 0..self.lengths[b] {
                        sel[b * total + self.row(b, j)] = w;
                    }
                }
                let s = tape.constant(Tensor::matrix(n, total, sel)?);
                tape.matmul(s, self.states)
            }
            Pooling::Max => {
                let mut rows = Vec::with_capacity(n);
                for b in 0..n {
                    let inst = self.instance(tape, b)?;
                    rows.push(tape.max(inst, Axis::Rows)?);
                }
                tape.concat(&rows, 0)
            }
        }
    }
}

const PREFIX: &str = "enc";

/// Encoder configuration with its parameters (all named `enc.*`).
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub params: ParamStore,
}

impl Encoder {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(seed, "init.encoder");
        let mut params = ParamStore::new();
        let mut table = init_normal(&mut rng, config.table_size, config.d_emb, 1.0);
        table.data_mut()[..config.d_emb].iter_mut().for_each(|v| *v = 0.0);
        params.insert(format!("{PREFIX}.emb"), table);
        match config.kind {
            EncoderKind::Gru => init_gru(&mut params, &format!("{PREFIX}.gru"), config.input_width(), config.hidden, &mut rng),
            EncoderKind::Transformer => {
                let (e, d) = (config.input_width(), config.hidden);
                params.insert(format!("{PREFIX}.cls"), init_normal(&mut rng, 1, e, 1.0));
                params.insert(format!("{PREFIX}.proj_w"), crate::numeric::init_glorot(&mut rng, e, d));
                params.insert(format!("{PREFIX}.proj_b"), Tensor::zeros(&[1, d]));
                for i in 0..config.blocks {
                    init_block(&mut params, &format!("{PREFIX}.block{i}"), d, config.ffn, &mut rng);
                }
            }
        }
        Ok(Self { config, params })
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn is_causal(&self) -> bool {
        self.config.kind == EncoderKind::Gru
    }

    /// Default whole-sequence pooling of this encoder kind.
    pub fn summary_pooling(&self) -> Pooling {
        match self.config.kind {
            EncoderKind::Gru => Pooling::Last,
            EncoderKind::Transformer => Pooling::First,
        }
    }

    /// Embedded inputs `[code embedding ; amount]` for the given row order.
    pub(crate) fn embed_rows(&self, tape: &mut Tape, bind: &Binding, idx: &[usize], amt: &[f64]) -> Result<NodeId> {
        if let Some(&bad) = idx.iter().find(|&&i| i >= self.config.table_size) {
            return Err(Error::invalid(format!("code index {bad} outside table of {}", self.config.table_size)));
        }
        let table = bind.get(&format!("{PREFIX}.emb"))?;
        let e = tape.gather_padded(table, idx, PAD_INDEX)?;
        let a = tape.constant(Tensor::column(amt));
        tape.concat(&[e, a], 1)
    }

    pub fn forward(&self, tape: &mut Tape, bind: &Binding, batch: &SeqBatch) -> Result<HiddenBatch> {
        let lengths = batch.lengths();
        let n = batch.len();
        match self.config.kind {
            EncoderKind::Gru => {
                let steps = batch.max_len();
                let mut idx = vec![PAD_INDEX; steps * n];
                let mut amt = vec![0.0; steps * n];
                for (b, (tok, am)) in batch.tokens.iter().zip(&batch.amounts).enumerate() {
                    for t in 0..tok.len() {
                        idx[t * n + b] = tok[t];
                        amt[t * n + b] = am[t];
                    }
                }
                let x = self.embed_rows(tape, bind, &idx, &amt)?;
                let p = GruNodes::resolve(bind, &format!("{PREFIX}.gru"))?;
                let h0 = tape.constant(Tensor::zeros(&[n, self.config.hidden]));
                let states = gru_run(tape, &p, x, h0, &lengths, steps)?;
                Ok(HiddenBatch { states, lengths, steps, offset: 0, layout: Layout::TimeMajor })
            }
            EncoderKind::Transformer => {
                let steps = batch.max_len() + 1;
                let mut idx = vec![PAD_INDEX; steps * n];
                let mut amt = vec![0.0; steps * n];
                let mut cls_sel = vec![0.0; steps * n];
                for (b, (tok, am)) in batch.tokens.iter().zip(&batch.amounts).enumerate() {
                    cls_sel[b * steps] = 1.0;
                    for t in 0..tok.len() {
                        idx[b * steps + t + 1] = tok[t];
                        amt[b * steps + t + 1] = am[t];
                    }
                }
                let x = self.embed_rows(tape, bind, &idx, &amt)?;
                let sel = tape.constant(Tensor::column(&cls_sel));
                let cls = tape.matmul(sel, bind.get(&format!("{PREFIX}.cls"))?)?;
                let x = tape.add(x, cls)?;
                let xw = tape.matmul(x, bind.get(&format!("{PREFIX}.proj_w"))?)?;
                let mut h = tape.add(xw, bind.get(&format!("{PREFIX}.proj_b"))?)?;
                let pe = positional_encoding(steps, self.config.hidden);
                let mut tiled = Vec::with_capacity(steps * n * self.config.hidden);
                for _ in 0..n {
                    tiled.extend_from_slice(pe.data());
                }
                let pe = tape.constant(Tensor::matrix(steps * n, self.config.hidden, tiled)?);
                h = tape.add(h, pe)?;
                let valid: Vec<usize> = lengths.iter().map(|l| l + 1).collect();
                for i in 0..self.config.blocks {
                    let prefix = format!("{PREFIX}.block{i}");
                    h = block_forward(tape, bind, &prefix, h, steps, &valid, self.config.heads, false)?.out;
                }
                Ok(HiddenBatch { states: h, lengths, steps, offset: 1, layout: Layout::InstanceMajor })
            }
        }
    }

    /// Pooled vectors of many inputs with frozen parameters, in chunks.
    pub fn embed(&self, batch: &SeqBatch, pooling: Pooling, chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(batch.len());
        for start in (0..batch.len()).step_by(chunk.max(1)) {
            let end = (start + chunk.max(1)).min(batch.len());
            let part = SeqBatch {
                tokens: batch.tokens[start..end].to_vec(),
                amounts: batch.amounts[start..end].to_vec(),
            };
            let mut tape = Tape::new();
            let bind = self.params.bind(&mut tape, false);
            let hidden = self.forward(&mut tape, &bind, &part)?;
            let pooled = hidden.pool(&mut tape, pooling)?;
            let v = tape.value(pooled);
            out.extend((0..v.rows()).map(|r| v.row_slice(r).to_vec()));
        }
        Ok(out)
    }

    /// Per-transaction hidden states of one sequence.
    pub fn encode_sequence(&self, seq: &ClientSequence) -> Result<HiddenSequence> {
        if seq.is_empty() {
            return Err(Error::invalid(format!("client {} has an empty sequence", seq.client_id)));
        }
        let batch = SeqBatch::from_sequences([seq])?;
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape, false);
        let hidden = self.forward(&mut tape, &bind, &batch)?;
        let all = tape.value(hidden.states);
        let states = (0..seq.len()).map(|j| all.row_slice(hidden.row(0, j)).to_vec()).collect();
        let summary = (hidden.offset == 1).then(|| all.row_slice(hidden.raw_row(0, 0)).to_vec());
        Ok(HiddenSequence {
            states,
            timestamps: seq.transactions.iter().map(|t| t.timestamp).collect(),
            summary,
        })
    }
}

/// `[embedding row ; amount]` of a single transaction.
pub fn embed_transaction(encoder: &Encoder, mcc_idx: usize, amount: f64) -> Result<Vec<f64>> {
    let table = encoder.params.get(&format!("{PREFIX}.emb"))?;
    if mcc_idx >= table.rows() {
        return Err(Error::invalid(format!("code index {mcc_idx} outside table of {}", table.rows())));
    }
    let mut v = if mcc_idx == PAD_INDEX { vec![0.0; table.cols()] } else { table.row_slice(mcc_idx).to_vec() };
    v.push(amount);
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenSequence {
    pub states: Vec<Vec<f64>>,
    pub timestamps: Vec<i64>,
    /// State of the prepended summary token, when the encoder has one.
    pub summary: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalRepresentation {
    pub vector: Vec<f64>,
    pub pooling: Pooling,
}

pub fn pool_global(hidden: &HiddenSequence, strategy: Pooling) -> Result<GlobalRepresentation> {
    let states = &hidden.states;
    let Some(first) = states.first() else {
        return Err(Error::invalid("cannot pool an empty hidden sequence"));
    };
    let d = first.len();
    let vector = match strategy {
        Pooling::Last => states[states.len() - 1].clone(),
        Pooling::First => hidden.summary.clone().unwrap_or_else(|| first.clone()),
        Pooling::Mean => {
            // Mean of offsets from the first state, so constant input is returned exactly.
            let mut acc = vec![0.0; d];
            for s in &states[1..] {
                acc.iter_mut().zip(s.iter().zip(first)).for_each(|(a, (v, f))| *a += v - f);
            }
            acc.iter().zip(first).map(|(a, f)| f + a / states.len() as f64).collect()
        }
        Pooling::Max => {
            let mut acc = first.clone();
            for s in &states[1..] {
                acc.iter_mut().zip(s).for_each(|(a, &v)| *a = a.max(v));
            }
            acc
        }
    };
    Ok(GlobalRepresentation { vector, pooling: strategy })
}

#[cfg(test)]
mod tests;
