//! Downstream validation: sliding-window local embeddings, perceptron heads,
//! classification metrics and change point detection.

mod cpd;
mod heads;
mod metrics;

pub use cpd::{
    change_window, cosine_distance, detect_change_point, detection_accuracy, detection_delay, pair_distance_curve,
    CpdResult, MIN_SEGMENT,
};
pub use heads::{argmax, HeadConfig, MlpHead};
pub use metrics::{accuracy, pr_auc, roc_auc, weighted_ovr, MetricStat};

use serde::{Deserialize, Serialize};

use crate::data::{ClientSequence, PAD_INDEX};
use crate::encoders::{Encoder, Pooling, SeqBatch};
use crate::error::{Error, Result};

/// Rows per encoder call when embedding many inputs.
pub const EMBED_CHUNK: usize = 256;

/// Sliding window of `w` transactions advanced by `s`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowConfig {
    pub w: usize,
    pub s: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { w: 32, s: 16 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.w == 0 || self.s == 0 {
            return Err(Error::invalid(format!("window {} / shift {} must be positive", self.w, self.s)));
        }
        Ok(())
    }

    /// Exclusive end positions `w, w + s, ...` that fit in `len`.
    pub fn ends(&self, len: usize) -> Vec<usize> {
        if len < self.w {
            return Vec::new();
        }
        (self.w..=len).step_by(self.s).collect()
    }
}

/// Local embeddings of one client, one per window.
#[derive(Clone, Debug, PartialEq)]
pub struct LocalEmbeddingSeries {
    pub client_id: String,
    /// Exclusive end position of every window; the window covers `end - w .. end`.
    pub ends: Vec<usize>,
    /// Timestamp of the last transaction of every window.
    pub timestamps: Vec<i64>,
    pub embeddings: Vec<Vec<f64>>,
    pub window: WindowConfig,
}

impl LocalEmbeddingSeries {
    pub fn len(&self) -> usize {
        self.ends.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ends.is_empty()
    }

    /// Embedding of the latest window whose last transaction is at or before `pos`.
    pub fn latest_at(&self, pos: usize) -> Option<&[f64]> {
        let k = self.ends.partition_point(|&e| e <= pos + 1);
        (k > 0).then(|| self.embeddings[k - 1].as_slice())
    }
}

/// Local embeddings of one sequence; each window is encoded on its own and
/// pooled with `pooling`. Sequences shorter than the window give an empty series.
pub fn sliding_window_embed(
    encoder: &Encoder,
    pooling: Pooling,
    seq: &ClientSequence,
    window: WindowConfig,
) -> Result<LocalEmbeddingSeries> {
    Ok(sliding_window_embed_all(encoder, pooling, std::slice::from_ref(seq), window)?.remove(0))
}

/// [`sliding_window_embed`] for many sequences, windows batched together.
pub fn sliding_window_embed_all(
    encoder: &Encoder,
    pooling: Pooling,
    seqs: &[ClientSequence],
    window: WindowConfig,
) -> Result<Vec<LocalEmbeddingSeries>> {
    window.validate()?;
    let mut tokens = Vec::new();
    let mut amounts = Vec::new();
    let mut all_ends = Vec::with_capacity(seqs.len());
    for seq in seqs {
        let ends = window.ends(seq.len());
        if ends.is_empty() {
            log::warn!("client {}: {} transactions, shorter than window {}", seq.client_id, seq.len(), window.w);
        }
        let idx = seq.mcc_indices();
        let amt = seq.amounts();
        for &e in &ends {
            tokens.push(idx[e - window.w..e].to_vec());
            amounts.push(amt[e - window.w..e].to_vec());
        }
        all_ends.push(ends);
    }
    let embedded =
        if tokens.is_empty() { Vec::new() } else { encoder.embed(&SeqBatch::new(tokens, amounts)?, pooling, EMBED_CHUNK)? };
    let mut rows = embedded.into_iter();
    Ok(seqs
        .iter()
        .zip(all_ends)
        .map(|(seq, ends)| LocalEmbeddingSeries {
            client_id: seq.client_id.clone(),
            timestamps: ends.iter().map(|&e| seq.transactions[e - 1].timestamp).collect(),
            embeddings: rows.by_ref().take(ends.len()).collect(),
            ends,
            window,
        })
        .collect())
}

/// Whole-sequence representations, one per sequence.
pub fn global_embeddings(encoder: &Encoder, pooling: Pooling, seqs: &[ClientSequence]) -> Result<Vec<Vec<f64>>> {
    if let Some(s) = seqs.iter().find(|s| s.is_empty()) {
        return Err(Error::invalid(format!("client {} has an empty sequence", s.client_id)));
    }
    encoder.embed(&SeqBatch::from_sequences(seqs)?, pooling, EMBED_CHUNK)
}

/// Feature rows with labels and their origin.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledRows {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<usize>,
    pub clients: Vec<String>,
    pub timestamps: Vec<i64>,
}

impl LabeledRows {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn push(&mut self, x: &[f64], y: usize, client: &str, ts: i64) {
        self.x.push(x.to_vec());
        self.y.push(y);
        self.clients.push(client.to_string());
        self.timestamps.push(ts);
    }
}

fn paired<'a>(
    series: &'a [LocalEmbeddingSeries],
    seqs: &'a [ClientSequence],
) -> Result<impl Iterator<Item = (&'a LocalEmbeddingSeries, &'a ClientSequence)>> {
    if series.len() != seqs.len() {
        return Err(Error::Shape(format!("{} series for {} sequences", series.len(), seqs.len())));
    }
    if let Some((s, q)) = series.iter().zip(seqs).find(|(s, q)| s.client_id != q.client_id) {
        return Err(Error::invalid(format!("series of {} paired with sequence of {}", s.client_id, q.client_id)));
    }
    Ok(series.iter().zip(seqs))
}

/// One row per window with a successor: the successor's code index.
/// Padding and out-of-vocabulary targets are dropped.
pub fn next_mcc_rows(series: &[LocalEmbeddingSeries], seqs: &[ClientSequence], oov_index: usize) -> Result<LabeledRows> {
    let mut rows = LabeledRows::default();
    for (s, q) in paired(series, seqs)? {
        for (k, &end) in s.ends.iter().enumerate() {
            let Some(next) = q.transactions.get(end) else { continue };
            if next.mcc_idx == oov_index || next.mcc_idx == PAD_INDEX {
                continue;
            }
            rows.push(&s.embeddings[k], next.mcc_idx, &s.client_id, s.timestamps[k]);
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("no targets"));
    }
    Ok(rows)
}

/// One row per window labelled with the local label of its last transaction.
pub fn local_binary_rows(series: &[LocalEmbeddingSeries], seqs: &[ClientSequence]) -> Result<LabeledRows> {
    let mut rows = LabeledRows::default();
    for (s, q) in paired(series, seqs)? {
        let labels = q
            .local_labels
            .as_ref()
            .ok_or_else(|| Error::invalid(format!("client {} has no local labels", q.client_id)))?;
        for (k, &end) in s.ends.iter().enumerate() {
            rows.push(&s.embeddings[k], usize::from(labels[end - 1]), &s.client_id, s.timestamps[k]);
        }
    }
    if rows.is_empty() {
        return Err(Error::invalid("no targets"));
    }
    Ok(rows)
}

/// Rows of whole-sequence representations labelled with the global label.
pub fn global_rows(embeddings: &[Vec<f64>], seqs: &[ClientSequence]) -> Result<LabeledRows> {
    if embeddings.len() != seqs.len() {
        return Err(Error::Shape(format!("{} embeddings for {} sequences", embeddings.len(), seqs.len())));
    }
    let mut rows = LabeledRows::default();
    for (e, q) in embeddings.iter().zip(seqs) {
        let y = q.label.ok_or_else(|| Error::invalid(format!("client {} has no label", q.client_id)))?;
        rows.push(e, y, &q.client_id, q.transactions.last().map_or(0, |t| t.timestamp));
    }
    Ok(rows)
}

/// Mean and spread of the downstream metrics over head seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub head: String,
    pub n_runs: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Accuracy is micro-averaged.
    pub accuracy: MetricStat,
    /// Support-weighted one-vs-rest; absent when the test labels hold one class.
    pub roc_auc: Option<MetricStat>,
    pub pr_auc: Option<MetricStat>,
}

/// Trains a perceptron head per seed on `train` and scores it on `test`.
pub fn eval_rows(
    task: &str,
    train: &LabeledRows,
    test: &LabeledRows,
    n_classes: usize,
    head: &HeadConfig,
    seeds: &[u64],
) -> Result<MetricReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("evaluation needs at least one seed"));
    }
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid(format!("{task}: empty train or test rows")));
    }
    let two_classes = test.y.iter().any(|&c| c != test.y[0]);
    let run = |seed: u64| -> Result<(f64, Option<(f64, f64)>)> {
        let model = MlpHead::fit(&train.x, &train.y, n_classes, head, seed)?;
        let probs = model.predict_proba(&test.x)?;
        let predicted: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let aucs = if two_classes {
            Some((weighted_ovr(&probs, &test.y, roc_auc)?, weighted_ovr(&probs, &test.y, pr_auc)?))
        } else {
            None
        };
        Ok((accuracy(&predicted, &test.y)?, aucs))
    };
    // Seeds are independent; results are gathered in seed order.
    let per_worker = seeds.len().div_ceil(crate::pipeline::max_workers().min(seeds.len()));
    let outcomes: Vec<Result<(f64, Option<(f64, f64)>)>> = std::thread::scope(|scope| {
        let handles: Vec<_> = seeds
            .chunks(per_worker)
            .map(|chunk| scope.spawn(move || chunk.iter().map(|&s| run(s)).collect::<Vec<_>>()))
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("head worker panicked")).collect()
    });
    let (mut acc, mut roc, mut pr) = (Vec::new(), Vec::new(), Vec::new());
    for o in outcomes {
        let (a, aucs) = o?;
        acc.push(a);
        if let Some((r, p)) = aucs {
            roc.push(r);
            pr.push(p);
        }
    }
    let stat = |v: &[f64]| MetricStat::from_runs(v);
    Ok(MetricReport {
        task: task.to_string(),
        head: "mlp".into(),
        n_runs: seeds.len(),
        n_train: train.len(),
        n_test: test.len(),
        accuracy: stat(&acc).expect("at least one seed"),
        roc_auc: stat(&roc),
        pr_auc: stat(&pr),
    })
}

/// Global label prediction from whole-sequence representations.
pub fn eval_global(train: &LabeledRows, test: &LabeledRows, n_classes: usize, head: &HeadConfig, seeds: &[u64]) -> Result<MetricReport> {
    eval_rows("global", train, test, n_classes, head, seeds)
}

/// Next transaction code prediction from local embeddings.
pub fn eval_next_mcc(train: &LabeledRows, test: &LabeledRows, table_size: usize, head: &HeadConfig, seeds: &[u64]) -> Result<MetricReport> {
    eval_rows("next_mcc", train, test, table_size, head, seeds)
}

/// Local binary label prediction from local embeddings.
pub fn eval_local_binary(train: &LabeledRows, test: &LabeledRows, head: &HeadConfig, seeds: &[u64]) -> Result<MetricReport> {
    eval_rows("local_binary", train, test, 2, head, seeds)
}
