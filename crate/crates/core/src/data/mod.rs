//! Transaction data model, vocabulary, preprocessing, splitting and labels.

mod csv_io;
mod splice;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;

pub use csv_io::{ingest_csv, load_change_points, load_labels, load_local_labels, write_dataset_csv};
pub use splice::{splice_pair, SpliceMode};
pub use synthetic::{generate_synthetic, ExogenousTimeline, SyntheticConfig};

use crate::error::{Error, Result};

pub const SECONDS_PER_DAY: i64 = 86_400;

/// Index reserved for padding and for masked tokens.
pub const PAD_INDEX: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Transaction {
    pub timestamp: i64,
    pub mcc_raw: i64,
    /// `0` until a vocabulary has been applied.
    pub mcc_idx: usize,
    pub amount: f64,
    pub amount_transformed: f64,
}

impl Transaction {
    pub fn new(timestamp: i64, mcc_raw: i64, amount: f64) -> Self {
        Self { timestamp, mcc_raw, mcc_idx: PAD_INDEX, amount, amount_transformed: transform_amount(amount) }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClientSequence {
    pub client_id: String,
    pub transactions: Vec<Transaction>,
    pub label: Option<usize>,
    pub local_labels: Option<Vec<u8>>,
    pub change_points: Option<Vec<usize>>,
}

impl ClientSequence {
    pub fn new(client_id: impl Into<String>, transactions: Vec<Transaction>) -> Self {
        Self {
            client_id: client_id.into(),
            transactions,
            label: None,
            local_labels: None,
            change_points: None,
        }
    }

    pub fn len(&self) -> usize {
        self.transactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transactions.is_empty()
    }

    pub fn mcc_indices(&self) -> Vec<usize> {
        self.transactions.iter().map(|t| t.mcc_idx).collect()
    }

    pub fn amounts(&self) -> Vec<f64> {
        self.transactions.iter().map(|t| t.amount_transformed).collect()
    }

    /// Contiguous sub-sequence `[start, end)`; labels and change points are
    /// re-indexed to the slice.
    pub fn slice(&self, start: usize, end: usize) -> ClientSequence {
        let end = end.min(self.len());
        ClientSequence {
            client_id: self.client_id.clone(),
            transactions: self.transactions[start..end].to_vec(),
            label: self.label,
            local_labels: self.local_labels.as_ref().map(|l| l[start..end].to_vec()),
            change_points: self.change_points.as_ref().map(|cps| {
                cps.iter().filter(|&&c| c > start && c < end).map(|c| c - start).collect()
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.transactions.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
            return Err(Error::invalid(format!("client {}: timestamps decrease", self.client_id)));
        }
        if let Some(l) = &self.local_labels {
            if l.len() != self.len() {
                return Err(Error::invalid(format!(
                    "client {}: {} local labels for {} transactions",
                    self.client_id,
                    l.len(),
                    self.len()
                )));
            }
        }
        if let Some(cps) = &self.change_points {
            if cps.iter().any(|&c| c == 0 || c >= self.len()) {
                return Err(Error::invalid(format!("client {}: change point out of range", self.client_id)));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Ingested,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetMeta {
    pub n_classes: usize,
    pub provenance: Provenance,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<ClientSequence>,
    pub vocab: Option<Vocabulary>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn new(sequences: Vec<ClientSequence>, provenance: Provenance) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &sequences {
            if !seen.insert(s.client_id.as_str()) {
                return Err(Error::invalid(format!("duplicate client id {}", s.client_id)));
            }
            s.validate()?;
        }
        let n_classes = sequences.iter().filter_map(|s| s.label).max().map_or(0, |m| m + 1);
        Ok(Self {
            sequences,
            vocab: None,
            meta: DatasetMeta { n_classes, provenance, warnings: Vec::new() },
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Sub-dataset holding the given clients, sharing vocabulary and metadata.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            sequences: indices.iter().map(|&i| self.sequences[i].clone()).collect(),
            vocab: self.vocab.clone(),
            meta: self.meta.clone(),
        }
    }

    /// Assigns `mcc_idx` to every transaction.
    pub fn apply_vocab(&mut self, vocab: &Vocabulary) {
        for s in &mut self.sequences {
            for t in &mut s.transactions {
                t.mcc_idx = vocab.index(t.mcc_raw);
            }
        }
        self.vocab = Some(vocab.clone());
    }

    pub fn total_transactions(&self) -> usize {
        self.sequences.iter().map(ClientSequence::len).sum()
    }
}

/// Sign-preserving log compression of transaction amounts.
pub fn transform_amount(a: f64) -> f64 {
    if a == 0.0 {
        return 0.0;
    }
    a.signum() * a.abs().ln_1p()
}

/// Map from raw MCC to embedding index: `1..=k` for the `k` most frequent
/// training codes, `k + 1` for everything else, `0` for padding and masks.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    map: BTreeMap<i64, usize>,
    k: usize,
}

impl Vocabulary {
    pub fn from_ranked(codes: &[i64]) -> Self {
        let map = codes.iter().enumerate().map(|(i, &c)| (c, i + 1)).collect();
        Self { map, k: codes.len() }
    }

    pub fn index(&self, raw: i64) -> usize {
        self.map.get(&raw).copied().unwrap_or(self.k + 1)
    }

    /// Number of in-vocabulary codes.
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn oov_index(&self) -> usize {
        self.k + 1
    }

    /// Rows of an embedding table covering padding, codes and OOV.
    pub fn table_size(&self) -> usize {
        self.k + 2
    }

    /// Codes in index order.
    pub fn ranked_codes(&self) -> Vec<i64> {
        let mut v: Vec<(usize, i64)> = self.map.iter().map(|(&c, &i)| (i, c)).collect();
        v.sort_unstable();
        v.into_iter().map(|(_, c)| c).collect()
    }
}

/// Keeps the `k` most frequent codes of the training sequences; ties go to
/// the smaller raw code.
pub fn fit_mcc_vocab(train: &[ClientSequence], k: usize) -> Result<Vocabulary> {
    if k == 0 {
        return Err(Error::invalid("vocabulary size must be at least 1"));
    }
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for t in train.iter().flat_map(|s| &s.transactions) {
        *counts.entry(t.mcc_raw).or_default() += 1;
    }
    if counts.is_empty() {
        return Err(Error::invalid("cannot fit a vocabulary on empty training data"));
    }
    let mut ranked: Vec<(i64, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let codes: Vec<i64> = ranked.into_iter().take(k).map(|(c, _)| c).collect();
    Ok(Vocabulary::from_ranked(&codes))
}

#[derive(Clone, Debug)]
pub struct Split {
    pub train: Dataset,
    pub validation: Dataset,
    pub test: Dataset,
}

/// Client-level random partition into train / validation / test.
pub fn split_dataset(dataset: &Dataset, ratios: [f64; 3], seed: u64) -> Result<Split> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let n = dataset.len();
    if n < 3 {
        return Err(Error::invalid(format!("{n} clients cannot fill 3 partitions")));
    }
    let n_val = ((n as f64 * ratios[1]).round() as usize).max(1);
    let n_test = ((n as f64 * ratios[2]).round() as usize).max(1);
    if n_val + n_test >= n {
        return Err(Error::invalid(format!("{n} clients cannot fill 3 partitions")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::rng::stream(seed, "split"));
    let n_train = n - n_val - n_test;
    let mut train = order[..n_train].to_vec();
    let mut val = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(Split { train: dataset.subset(&train), validation: dataset.subset(&val), test: dataset.subset(&test) })
}

/// Marks transactions inside the final `horizon_days` of a positive client.
pub fn derive_local_labels(seq: &ClientSequence, horizon_days: f64) -> Result<Vec<u8>> {
    let y = seq
        .label
        .ok_or_else(|| Error::invalid(format!("client {} has no global label", seq.client_id)))?;
    if y > 1 {
        return Err(Error::invalid(format!("client {}: label {y} is not binary", seq.client_id)));
    }
    if y == 0 || seq.is_empty() {
        return Ok(vec![0; seq.len()]);
    }
    let last = seq.transactions.last().map(|t| t.timestamp).unwrap_or_default();
    let cutoff = last as f64 - horizon_days * SECONDS_PER_DAY as f64;
    Ok(seq.transactions.iter().map(|t| u8::from(t.timestamp as f64 > cutoff)).collect())
}

/// Accuracy of predicting each next code by its most frequent successor in
/// `train`; a reference ceiling for next-event prediction on Markov data.
pub fn bigram_next_mcc_accuracy(train: &[ClientSequence], test: &[ClientSequence]) -> Result<f64> {
    let mut succ: BTreeMap<i64, BTreeMap<i64, usize>> = BTreeMap::new();
    for s in train {
        for w in s.transactions.windows(2) {
            *succ.entry(w[0].mcc_raw).or_default().entry(w[1].mcc_raw).or_default() += 1;
        }
    }
    let best: BTreeMap<i64, i64> = succ
        .into_iter()
        .map(|(k, m)| {
            let top = m.into_iter().max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0))).map(|x| x.0);
            (k, top.unwrap_or_default())
        })
        .collect();
    let (mut hit, mut total) = (0usize, 0usize);
    for s in test {
        for w in s.transactions.windows(2) {
            total += 1;
            hit += usize::from(best.get(&w[0].mcc_raw) == Some(&w[1].mcc_raw));
        }
    }
    if total == 0 {
        return Err(Error::invalid("no transitions to score"));
    }
    Ok(hit as f64 / total as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(id: &str, codes: &[i64]) -> ClientSequence {
        let txns = codes.iter().enumerate().map(|(i, &c)| Transaction::new(i as i64, c, 1.0)).collect();
        ClientSequence::new(id, txns)
    }

    #[test]
    fn amount_transform_examples() {
        assert_eq!(transform_amount(0.0), 0.0);
        assert_eq!(transform_amount(std::f64::consts::E - 1.0), 1.0);
        assert!((transform_amount(-99.0) + 4.60517).abs() < 1e-5);
        assert!((transform_amount(-99.0) + 100f64.ln()).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn amount_transform_is_odd_and_monotone(a in -1e9f64..1e9, b in -1e9f64..1e9) {
            prop_assert!((transform_amount(-a) + transform_amount(a)).abs() < 1e-12);
            if a < b {
                prop_assert!(transform_amount(a) <= transform_amount(b));
            }
        }
    }

    #[test]
    fn vocab_ranks_by_frequency_then_code() {
        let train = vec![seq("a", &[7, 7, 7, 7, 7, 3, 3, 3, 9])];
        let v = fit_mcc_vocab(&train, 2).unwrap();
        assert_eq!(v.index(7), 1);
        assert_eq!(v.index(3), 2);
        assert_eq!(v.index(9), 3);
        assert_eq!(v.index(12345), 3);

        let tie = vec![seq("a", &[20, 10, 20, 10, 5])];
        let v = fit_mcc_vocab(&tie, 5).unwrap();
        assert_eq!(v.ranked_codes(), vec![10, 20, 5]);

        let single = vec![seq("a", &[42, 42])];
        let v = fit_mcc_vocab(&single, 100).unwrap();
        assert_eq!(v.index(42), 1);
        assert_eq!(v.k(), 1);

        assert!(fit_mcc_vocab(&[], 3).is_err());
        assert!(fit_mcc_vocab(&train, 0).is_err());
    }

    fn clients(n: usize) -> Dataset {
        let seqs = (0..n).map(|i| seq(&format!("c{i}"), &[1, 2])).collect();
        Dataset::new(seqs, Provenance::Ingested).unwrap()
    }

    #[test]
    fn split_sizes_determinism_and_partition() {
        let d = clients(10);
        let s = split_dataset(&d, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!((s.train.len(), s.validation.len(), s.test.len()), (8, 1, 1));
        let again = split_dataset(&d, [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(s.train, again.train);
        assert_eq!(s.test, again.test);
        let mut ids: Vec<&str> = s
            .train
            .sequences
            .iter()
            .chain(&s.validation.sequences)
            .chain(&s.test.sequences)
            .map(|c| c.client_id.as_str())
            .collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 10);
        assert!(split_dataset(&clients(2), [0.8, 0.1, 0.1], 0).is_err());
    }

    fn daily(label: Option<usize>, days: i64) -> ClientSequence {
        let txns = (0..=days).map(|d| Transaction::new(d * SECONDS_PER_DAY, 1, 1.0)).collect();
        let mut s = ClientSequence::new("x", txns);
        s.label = label;
        s
    }

    #[test]
    fn local_labels_follow_horizon() {
        let l = derive_local_labels(&daily(Some(1), 60), 30.0).unwrap();
        // days 31..=60 are strictly within the last 30 days
        assert_eq!(l.iter().filter(|&&v| v == 1).count(), 30);
        assert!(l[..31].iter().all(|&v| v == 0));
        assert!(derive_local_labels(&daily(Some(0), 60), 30.0).unwrap().iter().all(|&v| v == 0));
        assert!(derive_local_labels(&daily(Some(1), 10), 30.0).unwrap().iter().all(|&v| v == 1));
        assert!(derive_local_labels(&daily(None, 10), 30.0).is_err());
    }

    #[test]
    fn unseen_codes_map_to_oov() {
        let train = vec![seq("a", &[1, 2, 2])];
        let v = fit_mcc_vocab(&train, 10).unwrap();
        let mut d = Dataset::new(vec![seq("b", &[2, 77])], Provenance::Ingested).unwrap();
        d.apply_vocab(&v);
        assert_eq!(d.sequences[0].mcc_indices(), vec![1, v.oov_index()]);
    }
}
