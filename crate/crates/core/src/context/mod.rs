//! External context: a store of other clients' local embeddings, queried
//! strictly before a time point and aggregated into one vector that is
//! appended to a client's own embedding.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::data::ClientSequence;
use crate::encoders::{Encoder, Pooling, SeqBatch};
use crate::error::{Error, Result};
use crate::evaluation::{sliding_window_embed_all, LabeledRows, WindowConfig, EMBED_CHUNK};
use crate::numeric::{adam_step, clip_grad_norm, init_normal, AdamConfig, AdamState, NodeId, ParamStore, Tape, Tensor};
use crate::objectives::{coles_sample_subsequences, contrastive_loss, l2_normalize};
use crate::rng::stream;

/// Stored trajectory of one client.
#[derive(Clone, Debug, PartialEq)]
pub struct StoredClient {
    pub client_id: String,
    /// Strictly increasing.
    pub timestamps: Vec<i64>,
    pub embeddings: Vec<Vec<f64>>,
}

/// Local embeddings of a client sample, immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingStore {
    pub dim: usize,
    pub clients: Vec<StoredClient>,
}

/// Embeds the windows of `n` clients drawn without replacement.
/// Windows ending on an already stored timestamp replace the earlier entry.
pub fn build_store(
    encoder: &Encoder,
    pooling: Pooling,
    sequences: &[ClientSequence],
    n: usize,
    window: WindowConfig,
    seed: u64,
) -> Result<EmbeddingStore> {
    if n == 0 {
        return Err(Error::invalid("context store needs at least one client"));
    }
    if sequences.is_empty() {
        return Err(Error::invalid("cannot build a context store from an empty dataset"));
    }
    if n > sequences.len() {
        return Err(Error::invalid(format!("store of {n} clients requested from {}", sequences.len())));
    }
    let mut chosen = rand::seq::index::sample(&mut stream(seed, "context.store"), sequences.len(), n).into_vec();
    chosen.sort_unstable();
    let picked: Vec<ClientSequence> = chosen.iter().map(|&i| sequences[i].clone()).collect();
    let series = sliding_window_embed_all(encoder, pooling, &picked, window)?;
    let clients = series
        .into_iter()
        .map(|s| {
            let mut timestamps: Vec<i64> = Vec::with_capacity(s.len());
            let mut embeddings: Vec<Vec<f64>> = Vec::with_capacity(s.len());
            for (t, e) in s.timestamps.into_iter().zip(s.embeddings) {
                if timestamps.last() == Some(&t) {
                    *embeddings.last_mut().expect("paired with timestamps") = e;
                } else {
                    timestamps.push(t);
                    embeddings.push(e);
                }
            }
            StoredClient { client_id: s.client_id, timestamps, embeddings }
        })
        .collect();
    Ok(EmbeddingStore { dim: encoder.hidden(), clients })
}

/// Columns of the context matrix with the store index of their client.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextQuery<'a> {
    pub clients: Vec<usize>,
    pub columns: Vec<&'a [f64]>,
}

impl ContextQuery<'_> {
    pub fn len(&self) -> usize {
        self.columns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.columns.is_empty()
    }

    /// The columns stacked as rows, `n' x m`.
    pub fn rows_tensor(&self, dim: usize) -> Result<Tensor> {
        Tensor::matrix(self.columns.len(), dim, self.columns.iter().flat_map(|c| c.iter().copied()).collect())
    }
}

impl EmbeddingStore {
    pub fn len(&self) -> usize {
        self.clients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clients.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for c in &self.clients {
            if c.timestamps.len() != c.embeddings.len() {
                return Err(Error::invalid(format!("client {}: timestamps and embeddings differ in count", c.client_id)));
            }
            if c.timestamps.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::invalid(format!("client {}: timestamps not strictly increasing", c.client_id)));
            }
            if c.embeddings.iter().any(|e| e.len() != self.dim) {
                return Err(Error::Shape(format!("client {}: embedding width differs from {}", c.client_id, self.dim)));
            }
        }
        Ok(())
    }

    /// Latest embedding strictly before `t` of every stored client other
    /// than `exclude`; clients with nothing before `t` are left out.
    pub fn query(&self, t: i64, exclude: Option<&str>) -> ContextQuery<'_> {
        let mut q = ContextQuery { clients: Vec::new(), columns: Vec::new() };
        for (i, c) in self.clients.iter().enumerate() {
            if exclude == Some(c.client_id.as_str()) {
                continue;
            }
            let k = c.timestamps.partition_point(|&s| s < t);
            if k > 0 {
                q.clients.push(i);
                q.columns.push(&c.embeddings[k - 1]);
            }
        }
        q
    }

    /// Serialised entries: dimension and client count, then per client the
    /// length-prefixed id, the entry count and every `(timestamp, embedding)`,
    /// all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.clients.len() as u64).to_le_bytes());
        for c in &self.clients {
            out.extend_from_slice(&(c.client_id.len() as u64).to_le_bytes());
            out.extend_from_slice(c.client_id.as_bytes());
            out.extend_from_slice(&(c.timestamps.len() as u64).to_le_bytes());
            for (t, e) in c.timestamps.iter().zip(&c.embeddings) {
                out.extend_from_slice(&t.to_le_bytes());
                e.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        let dim = r.len()?;
        let n = r.len()?;
        let mut clients = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let id_len = r.len()?;
            let client_id = String::from_utf8(r.take(id_len)?.to_vec())
                .map_err(|_| Error::invalid("context store client id is not UTF-8"))?;
            let count = r.len()?;
            let mut timestamps = Vec::with_capacity(count.min(1 << 16));
            let mut embeddings = Vec::with_capacity(count.min(1 << 16));
            for _ in 0..count {
                timestamps.push(i64::from_le_bytes(r.array()?));
                embeddings.push((0..dim).map(|_| r.array().map(f64::from_le_bytes)).collect::<Result<Vec<f64>>>()?);
            }
            clients.push(StoredClient { client_id, timestamps, embeddings });
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid("trailing bytes after the context store"));
        }
        let store = Self { dim, clients };
        store.validate()?;
        Ok(store)
    }
}

/// [`EmbeddingStore::query`].
pub fn query_store<'a>(store: &'a EmbeddingStore, t: i64, exclude: Option<&str>) -> ContextQuery<'a> {
    store.query(t, exclude)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(format!("context store ends before byte {}", self.pos + n)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.array()?)).map_err(|_| Error::invalid("length exceeds address space"))
    }
}

/// Aggregation of the context columns.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextMethod {
    Mean,
    Max,
    /// Softmax of the scalar products with the client embedding.
    Attention,
    /// Softmax of the scalar products through a trained matrix.
    Learnable,
}

impl ContextMethod {
    pub const ALL: [ContextMethod; 4] = [Self::Mean, Self::Max, Self::Attention, Self::Learnable];
}

impl FromStr for ContextMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "attention" => Ok(Self::Attention),
            "learnable" => Ok(Self::Learnable),
            _ => Err(Error::invalid(format!("unknown context method {s:?}"))),
        }
    }
}

impl fmt::Display for ContextMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Attention => "attention",
            Self::Learnable => "learnable",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextVector {
    pub vector: Vec<f64>,
    pub method: ContextMethod,
    /// Number of columns that contributed.
    pub n_contributing: usize,
    /// No column was available; `vector` is zero.
    pub fallback: bool,
}

/// Trainable square matrix of the learnable aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub a: Tensor,
}

impl AttentionParams {
    /// Identity plus Gaussian noise of standard deviation `noise`.
    pub fn init(dim: usize, noise: f64, seed: u64) -> Self {
        let mut a = init_normal(&mut stream(seed, "context.attention"), dim, dim, noise);
        (0..dim).for_each(|i| a.data_mut()[i * dim + i] += 1.0);
        Self { a }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Context vector of the columns `x` for a client embedding `h`.
/// `a` must be given exactly for the learnable method.
pub fn aggregate_context(x: &[&[f64]], h: &[f64], method: ContextMethod, a: Option<&Tensor>) -> Result<ContextVector> {
    let m = h.len();
    if let Some(c) = x.iter().find(|c| c.len() != m) {
        return Err(Error::Shape(format!("context column of width {} for embedding of width {m}", c.len())));
    }
    match (method, a) {
        (ContextMethod::Learnable, None) => return Err(Error::invalid("learnable aggregation needs the matrix A")),
        (ContextMethod::Learnable, Some(a)) if a.shape() != [m, m] => {
            return Err(Error::Shape(format!("A has shape {:?}, expected [{m}, {m}]", a.shape())))
        }
        (ContextMethod::Learnable, Some(_)) => {}
        (_, Some(_)) => return Err(Error::invalid(format!("{method} aggregation takes no matrix"))),
        (_, None) => {}
    }
    if x.is_empty() {
        return Ok(ContextVector { vector: vec![0.0; m], method, n_contributing: 0, fallback: true });
    }
    let vector = match method {
        ContextMethod::Mean => {
            let n = x.len() as f64;
            (0..m).map(|k| x.iter().map(|c| c[k]).sum::<f64>() / n).collect()
        }
        ContextMethod::Max => (0..m).map(|k| x.iter().map(|c| c[k]).fold(f64::NEG_INFINITY, f64::max)).collect(),
        ContextMethod::Attention | ContextMethod::Learnable => {
            let q: Vec<f64> = match a {
                Some(a) => (0..m).map(|j| dot(a.row_slice(j), h)).collect(),
                None => h.to_vec(),
            };
            let scores: Vec<f64> = x.iter().map(|c| dot(c, &q)).collect();
            let w = crate::numeric::softmax(&scores)?;
            (0..m).map(|k| x.iter().zip(&w).map(|(c, wi)| wi * c[k]).sum()).collect()
        }
    };
    Ok(ContextVector { vector, method, n_contributing: x.len(), fallback: false })
}

/// Attention context on the tape: `rows` holds the columns as rows
/// (`n' x m`), `h` is `1 x m` and `a`, when given, is `m x m`.
pub fn attention_context(tape: &mut Tape, rows: NodeId, h: NodeId, a: Option<NodeId>) -> Result<NodeId> {
    let q = match a {
        Some(a) => {
            let at = tape.transpose(a)?;
            tape.matmul(h, at)?
        }
        None => h,
    };
    let xt = tape.transpose(rows)?;
    let scores = tape.matmul(q, xt)?;
    let w = tape.softmax(scores)?;
    tape.matmul(w, rows)
}

/// `[h ; b]`.
pub fn augment(h: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if h.len() != b.len() {
        return Err(Error::Shape(format!("embedding width {} with context width {}", h.len(), b.len())));
    }
    Ok(h.iter().chain(b).copied().collect())
}

/// Appends the context at each row's timestamp, the row's own client excluded.
pub fn augment_rows(store: &EmbeddingStore, rows: &LabeledRows, method: ContextMethod, a: Option<&Tensor>) -> Result<LabeledRows> {
    let mut out = rows.clone();
    let mut fallbacks = 0usize;
    for (i, x) in out.x.iter_mut().enumerate() {
        let q = store.query(rows.timestamps[i], Some(&rows.clients[i]));
        let b = aggregate_context(&q.columns, x, method, a)?;
        fallbacks += usize::from(b.fallback);
        *x = augment(x, &b.vector)?;
    }
    log::debug!("{method} context: {fallbacks} of {} rows without context", rows.len());
    Ok(out)
}

/// Settings for fitting the learnable aggregation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub init_noise: f64,
    pub slices_per_client: usize,
    pub slice_min: usize,
    pub slice_max: usize,
    pub margin: f64,
    pub grad_clip: f64,
}

impl Default for AttentionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 64,
            lr: 1e-3,
            init_noise: 0.01,
            slices_per_client: 5,
            slice_min: 15,
            slice_max: 50,
            margin: 0.5,
            grad_clip: 5.0,
        }
    }
}

/// Contrastive loss of augmented slice embeddings for one batch of clients,
/// with the encoder frozen and `a` the only leaf that takes gradients.
fn attention_batch_loss(
    tape: &mut Tape,
    a: NodeId,
    store: &EmbeddingStore,
    encoder: &Encoder,
    pooling: Pooling,
    clients: &[&ClientSequence],
    cfg: &AttentionTrainConfig,
    rng: &mut crate::rng::Rng,
) -> Result<Option<NodeId>> {
    let lengths: Vec<usize> = clients.iter().map(|c| c.len()).collect();
    let slices = coles_sample_subsequences(&lengths, cfg.slices_per_client, cfg.slice_min, cfg.slice_max, rng)?;
    if slices.len() < 2 {
        return Ok(None);
    }
    let mut tokens = Vec::with_capacity(slices.len());
    let mut amounts = Vec::with_capacity(slices.len());
    for s in &slices {
        let c = clients[s.client];
        tokens.push(c.transactions[s.start..s.end].iter().map(|t| t.mcc_idx).collect());
        amounts.push(c.transactions[s.start..s.end].iter().map(|t| t.amount_transformed).collect());
    }
    let h = encoder.embed(&SeqBatch::new(tokens, amounts)?, pooling, EMBED_CHUNK)?;
    let mut augmented = Vec::with_capacity(slices.len());
    for (s, hv) in slices.iter().zip(&h) {
        let c = clients[s.client];
        let q = store.query(c.transactions[s.end - 1].timestamp, Some(&c.client_id));
        let hn = tape.constant(Tensor::row(hv));
        let b = if q.is_empty() {
            tape.constant(Tensor::zeros(&[1, store.dim]))
        } else {
            let rows = tape.constant(q.rows_tensor(store.dim)?);
            attention_context(tape, rows, hn, Some(a))?
        };
        augmented.push(tape.concat(&[hn, b], 1)?);
    }
    let stacked = tape.concat(&augmented, 0)?;
    let normed = l2_normalize(tape, stacked)?;
    let tags: Vec<usize> = slices.iter().map(|s| s.client).collect();
    Ok(Some(contrastive_loss(tape, normed, &tags, cfg.margin)?))
}

/// Gradient of the slice contrastive loss with respect to `a` for one batch.
pub fn attention_gradient(
    params: &AttentionParams,
    store: &EmbeddingStore,
    encoder: &Encoder,
    pooling: Pooling,
    clients: &[&ClientSequence],
    cfg: &AttentionTrainConfig,
    seed: u64,
) -> Result<Option<(f64, Tensor)>> {
    let mut tape = Tape::new();
    let a = tape.variable(params.a.clone());
    let mut rng = stream(seed, "context.slices");
    let Some(loss) = attention_batch_loss(&mut tape, a, store, encoder, pooling, clients, cfg, &mut rng)? else {
        return Ok(None);
    };
    let grads = tape.backward(loss)?;
    let g = grads.get(a).cloned().unwrap_or_else(|| Tensor::zeros(params.a.shape()));
    Ok(Some((tape.value(loss).item(), g)))
}

/// Fits the learnable aggregation matrix by slice contrast with the encoder
/// frozen. Returns the matrix and the mean loss of every epoch.
pub fn train_attention_matrix(
    store: &EmbeddingStore,
    encoder: &Encoder,
    pooling: Pooling,
    sequences: &[ClientSequence],
    cfg: &AttentionTrainConfig,
    seed: u64,
) -> Result<(AttentionParams, Vec<f64>)> {
    if store.is_empty() || store.clients.iter().all(|c| c.timestamps.is_empty()) {
        return Err(Error::invalid("context store is empty"));
    }
    if store.dim != encoder.hidden() {
        return Err(Error::Shape(format!("store width {} for encoder width {}", store.dim, encoder.hidden())));
    }
    let init = AttentionParams::init(store.dim, cfg.init_noise, seed);
    let mut params = ParamStore::new();
    params.insert("ctx.a", init.a);
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
    let mut order: Vec<usize> = (0..sequences.len()).collect();
    let mut order_rng = stream(seed, "context.order");
    let mut slice_rng = stream(seed, "context.slices");
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut total, mut steps) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size.max(2)) {
            let clients: Vec<&ClientSequence> = chunk.iter().map(|&i| &sequences[i]).collect();
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape, true);
            let a = bind.get("ctx.a")?;
            let Some(loss) = attention_batch_loss(&mut tape, a, store, encoder, pooling, &clients, cfg, &mut slice_rng)? else {
                continue;
            };
            let mut grads = bind.named_grads(&tape.backward(loss)?);
            if cfg.grad_clip > 0.0 {
                clip_grad_norm(&mut grads, cfg.grad_clip);
            }
            adam_step(&mut params, &grads, &mut adam)?;
            total += tape.value(loss).item();
            steps += 1;
        }
        if steps == 0 {
            return Err(Error::invalid("no attention training batch could be formed"));
        }
        log::info!("attention epoch {epoch}: loss {:.5}", total / steps as f64);
        history.push(total / steps as f64);
    }
    Ok((AttentionParams { a: params.get("ctx.a")?.clone() }, history))
}

#[cfg(test)]
mod tests;
