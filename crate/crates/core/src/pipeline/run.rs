use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng as _;

use super::checkpoint::{Checkpoint, ATTENTION_SECTION};
use super::config::{CpdSource, DataSource, RunConfig, Task};
use super::report::{CpdEntry, CurveEntry, CurvePoint, Report, TaskEntry};
use crate::context::{augment_rows, build_store, train_attention_matrix, AttentionParams};
use crate::data::{
    fit_mcc_vocab, generate_synthetic, ingest_csv, load_change_points, load_labels, load_local_labels, splice_pair,
    split_dataset, ClientSequence, Dataset, SpliceMode, Split, Vocabulary,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    change_window, detect_change_point, eval_global, eval_local_binary, eval_next_mcc, global_embeddings, global_rows,
    local_binary_rows, next_mcc_rows, pair_distance_curve, sliding_window_embed_all, CpdResult, LabeledRows,
    LocalEmbeddingSeries, WindowConfig, MIN_SEGMENT,
};
use crate::numeric::Tensor;
use crate::objectives::{train, Model, TrainOutcome};
use crate::rng::stream;

/// The configured dataset with its optional companion files attached.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match cfg.data.source {
        DataSource::Synthetic => generate_synthetic(&cfg.synthetic, cfg.seed),
        DataSource::Csv => {
            let mut ds = ingest_csv(&cfg.data.transactions)?;
            if !cfg.data.labels.is_empty() {
                load_labels(&mut ds, &cfg.data.labels)?;
            }
            if !cfg.data.local_labels.is_empty() {
                load_local_labels(&mut ds, &cfg.data.local_labels)?;
            }
            if !cfg.data.change_points.is_empty() {
                load_change_points(&mut ds, &cfg.data.change_points)?;
            }
            Ok(ds)
        }
    }
}

/// Client split of `dataset` with `vocab` applied, or one fitted on the
/// training part when `vocab` is `None`.
pub fn prepare_split(cfg: &RunConfig, dataset: &Dataset, vocab: Option<&Vocabulary>) -> Result<Split> {
    let mut split = split_dataset(dataset, cfg.data.split, cfg.seed)?;
    let vocab = match vocab {
        Some(v) => v.clone(),
        None => fit_mcc_vocab(&split.train.sequences, cfg.data.top_k)?,
    };
    for d in [&mut split.train, &mut split.validation, &mut split.test] {
        d.apply_vocab(&vocab);
    }
    Ok(split)
}

/// Trains the configured objective and packs the result as a checkpoint.
pub fn train_checkpoint(cfg: &RunConfig, split: &Split) -> Result<(Checkpoint, TrainOutcome)> {
    let vocab = split.train.vocab.as_ref().ok_or_else(|| Error::invalid("vocabulary not fitted"))?;
    let out = train(cfg.objective, cfg.dims, &cfg.objective_params, &cfg.train, &split.train, &split.validation, cfg.seed)?;
    let ckpt = Checkpoint::from_model(&out.model, cfg.dims, vocab, &cfg.digest());
    Ok((ckpt, out))
}

/// Stores context embeddings of training clients in the checkpoint and, for
/// the learnable method, its aggregation matrix.
pub fn build_context(cfg: &RunConfig, ckpt: &mut Checkpoint, split: &Split) -> Result<()> {
    let model = ckpt.model()?;
    let store = build_store(&model.encoder, model.pooling(), &split.train.sequences, cfg.context.store_size, cfg.window, cfg.seed)?;
    ckpt.tensors.remove(ATTENTION_SECTION);
    if cfg.context.method == Some(crate::context::ContextMethod::Learnable) {
        let a = if cfg.context.train_attention {
            let (params, history) =
                train_attention_matrix(&store, &model.encoder, model.pooling(), &split.train.sequences, &cfg.context.attention, cfg.seed)?;
            log::info!("context matrix losses {history:?}");
            params
        } else {
            AttentionParams { a: Tensor::identity(store.dim) }
        };
        ckpt.tensors.insert(ATTENTION_SECTION.to_string(), a.a);
    }
    ckpt.store = Some(store);
    Ok(())
}

fn held_in(split: &Split) -> Vec<ClientSequence> {
    split.train.sequences.iter().chain(&split.validation.sequences).cloned().collect()
}

fn context_label(cfg: &RunConfig) -> String {
    cfg.context.method.map_or("none".into(), |m| m.to_string())
}

/// Downstream heads on frozen representations: trained on the training and
/// validation clients, scored on the test clients.
pub fn evaluate(cfg: &RunConfig, ckpt: &Checkpoint, split: &Split) -> Result<Report> {
    let mut timings = BTreeMap::new();
    let started = Instant::now();
    let model = ckpt.model()?;
    let mut report = Report::new(&ckpt.digest, &model.objective.to_string(), &context_label(cfg));
    let owned;
    let ckpt = match (cfg.context.method, &ckpt.store) {
        (Some(m), None) => {
            log::info!("no context store in the checkpoint; building one for {m}");
            let mut c = ckpt.clone();
            build_context(cfg, &mut c, split)?;
            owned = c;
            &owned
        }
        _ => ckpt,
    };
    let train_seqs = held_in(split);
    let test_seqs = &split.test.sequences;
    let needs_local = cfg.eval.tasks.iter().any(|t| *t != Task::Global);
    let series = if needs_local {
        let t = Instant::now();
        let s = (
            sliding_window_embed_all(&model.encoder, model.pooling(), &train_seqs, cfg.window)?,
            sliding_window_embed_all(&model.encoder, model.pooling(), test_seqs, cfg.window)?,
        );
        timings.insert("local_embeddings".to_string(), t.elapsed().as_secs_f64());
        Some(s)
    } else {
        None
    };
    let with_context = |rows: LabeledRows| -> Result<LabeledRows> {
        match (cfg.context.method, &ckpt.store) {
            (Some(m), Some(store)) => augment_rows(store, &rows, m, ckpt.attention()),
            _ => Ok(rows),
        }
    };
    let vocab = ckpt.vocab();
    let mut tasks = cfg.eval.tasks.clone();
    tasks.dedup();
    for task in tasks {
        let t = Instant::now();
        let metrics = match task {
            Task::Global => {
                let tr = global_rows(&global_embeddings(&model.encoder, model.pooling(), &train_seqs)?, &train_seqs)?;
                let te = global_rows(&global_embeddings(&model.encoder, model.pooling(), test_seqs)?, test_seqs)?;
                let n_classes = tr.y.iter().chain(&te.y).max().map_or(0, |m| m + 1).max(2);
                eval_global(&tr, &te, n_classes, &cfg.eval.head, &cfg.eval.seeds)?
            }
            Task::NextMcc => {
                let (s_tr, s_te) = series.as_ref().expect("local series computed");
                let tr = with_context(next_mcc_rows(s_tr, &train_seqs, vocab.oov_index())?)?;
                let te = with_context(next_mcc_rows(s_te, test_seqs, vocab.oov_index())?)?;
                eval_next_mcc(&tr, &te, vocab.table_size(), &cfg.eval.head, &cfg.eval.seeds)?
            }
            Task::LocalBinary => {
                let (s_tr, s_te) = series.as_ref().expect("local series computed");
                let tr = with_context(local_binary_rows(s_tr, &train_seqs)?)?;
                let te = with_context(local_binary_rows(s_te, test_seqs)?)?;
                eval_local_binary(&tr, &te, &cfg.eval.head, &cfg.eval.seeds)?
            }
        };
        timings.insert(task.to_string(), t.elapsed().as_secs_f64());
        report.tasks.push(TaskEntry::from_metrics(&metrics, &report.objective, &report.context_method));
    }
    timings.insert("total".to_string(), started.elapsed().as_secs_f64());
    report.timings = Some(timings);
    Ok(report)
}

/// Single change point detection over `sequences`, each carrying its true
/// change as the first recorded change point. Sequences whose change falls
/// where no admissible split can reach it are left out.
pub fn detect_changes(model: &Model, sequences: &[ClientSequence], window: WindowConfig, margins: &[usize]) -> Result<CpdResult> {
    let series = sliding_window_embed_all(&model.encoder, model.pooling(), sequences, window)?;
    let (mut clients, mut truth, mut predicted) = (Vec::new(), Vec::new(), Vec::new());
    let mut skipped = 0usize;
    for (s, q) in series.iter().zip(sequences) {
        let Some(&tau) = q.change_points.as_ref().and_then(|c| c.first()) else { continue };
        match change_window(s, tau) {
            Some(tw) if tw >= MIN_SEGMENT && tw + MIN_SEGMENT <= s.len() => {
                clients.push(q.client_id.clone());
                truth.push(tw);
                predicted.push(detect_change_point(&s.embeddings)?);
            }
            _ => skipped += 1,
        }
    }
    if skipped > 0 {
        log::info!("{skipped} sequences with a change too close to an end were left out");
    }
    if truth.is_empty() {
        return Err(Error::invalid("no sequence with a detectable change point"));
    }
    CpdResult::new(clients, truth, predicted, margins)
}

/// `pairs` spliced sequences with the client whose half they keep:
/// `(spliced, original)`, drawn from `pool` with distinct partners.
pub fn spliced_pairs(pool: &[ClientSequence], pairs: usize, mode: SpliceMode, seed: u64) -> Result<Vec<(ClientSequence, ClientSequence)>> {
    if pool.len() < 2 {
        return Err(Error::invalid("splicing needs at least 2 clients"));
    }
    let mut rng = stream(seed, "cpd.pairs");
    let mut out = Vec::with_capacity(pairs);
    for i in 0..pairs {
        let a = &pool[i % pool.len()];
        let mut spliced = None;
        for _ in 0..64 {
            let mut j = rng.random_range(0..pool.len() - 1);
            if j >= i % pool.len() {
                j += 1;
            }
            if let Ok((s, _)) = splice_pair(a, &pool[j], mode) {
                spliced = Some(s);
                break;
            }
        }
        let s = spliced.ok_or_else(|| Error::invalid(format!("no partner long enough for client {}", a.client_id)))?;
        out.push((s, a.clone()));
    }
    Ok(out)
}

/// Mean cosine distance between each spliced sequence and its original at
/// `tau + offset` for every offset of the configured range.
pub fn splice_curve(model: &Model, pairs: &[(ClientSequence, ClientSequence)], window: WindowConfig, offsets: &[i64]) -> Result<Vec<CurvePoint>> {
    let spliced: Vec<ClientSequence> = pairs.iter().map(|p| p.0.clone()).collect();
    let original: Vec<ClientSequence> = pairs.iter().map(|p| p.1.clone()).collect();
    let s1 = sliding_window_embed_all(&model.encoder, model.pooling(), &spliced, window)?;
    let s2 = sliding_window_embed_all(&model.encoder, model.pooling(), &original, window)?;
    let triples: Vec<(&LocalEmbeddingSeries, &LocalEmbeddingSeries, usize)> = s1
        .iter()
        .zip(&s2)
        .zip(&spliced)
        .filter_map(|((a, b), q)| q.change_points.as_ref().and_then(|c| c.first()).map(|&t| (a, b, t)))
        .collect();
    let d = pair_distance_curve(&triples, offsets)?;
    Ok(offsets.iter().zip(d).map(|(&offset, distance)| CurvePoint { offset, distance }).collect())
}

/// Change point experiment of the configured source on held-out clients.
pub fn run_cpd(cfg: &RunConfig, ckpt: &Checkpoint, split: &Split) -> Result<Report> {
    let started = Instant::now();
    let model = ckpt.model()?;
    let mut report = Report::new(&ckpt.digest, &model.objective.to_string(), "none");
    let window = WindowConfig { w: cfg.window.w, s: cfg.cpd.shift };
    let held_out: Vec<ClientSequence> = split.validation.sequences.iter().chain(&split.test.sequences).cloned().collect();
    let objective = model.objective.to_string();
    match cfg.cpd.source {
        CpdSource::Planted => {
            let with_cp: Vec<ClientSequence> = held_out.into_iter().filter(|s| s.change_points.is_some()).collect();
            let result = detect_changes(&model, &with_cp, window, &cfg.cpd.margins)?;
            report.cpd.push(CpdEntry { source: "planted".into(), objective, result });
        }
        CpdSource::Converge | CpdSource::Diverge => {
            let mode = if cfg.cpd.source == CpdSource::Converge { SpliceMode::Converge } else { SpliceMode::Diverge };
            let pool: Vec<ClientSequence> = held_out.into_iter().filter(|s| s.change_points.is_none()).collect();
            let pairs = spliced_pairs(&pool, cfg.cpd.pairs, mode, cfg.seed)?;
            let offsets: Vec<i64> = (cfg.cpd.curve_from..=cfg.cpd.curve_to).collect();
            let points = splice_curve(&model, &pairs, window, &offsets)?;
            let spliced: Vec<ClientSequence> = pairs.into_iter().map(|p| p.0).collect();
            let result = detect_changes(&model, &spliced, window, &cfg.cpd.margins)?;
            let source = cfg.cpd.source.to_string();
            report.curves.push(CurveEntry { mode: source.clone(), objective: objective.clone(), n_pairs: spliced.len(), points });
            report.cpd.push(CpdEntry { source, objective, result });
        }
    }
    report.timings = Some(BTreeMap::from([("total".to_string(), started.elapsed().as_secs_f64())]));
    Ok(report)
}
