use super::*;
use crate::context::{ContextMethod, EmbeddingStore, StoredClient};
use crate::data::Vocabulary;
use crate::error::Error;
use crate::evaluation::{CpdResult, MetricReport, MetricStat};
use crate::objectives::{Model, ModelDims, Objective};

fn tiny() -> RunConfig {
    RunConfig::parse(
        "synthetic.n_clients = 60\nsynthetic.min_len = 40\nsynthetic.max_len = 70\n\
         model.d_emb = 4\nmodel.hidden = 8\nmodel.head_hidden = 8\ntrain.epochs = 1\ntrain.batch_size = 16\n\
         objective.slice_min = 8\nobjective.slice_max = 20\nwindow.w = 16\nwindow.s = 8\n\
         eval.head_hidden = 8\neval.head_epochs = 2\neval.seeds = 0,1\ncontext.store_size = 10\n\
         cpd.pairs = 6\ncpd.curve_from = -5\ncpd.curve_to = 10\n",
    )
    .unwrap()
}

#[test]
fn empty_config_is_the_default() {
    assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    assert_eq!(RunConfig::parse("# only a comment\n\n   \n").unwrap(), RunConfig::default());
}

#[test]
fn config_text_round_trips() {
    let mut cfg = tiny();
    cfg.context.method = Some(ContextMethod::Learnable);
    cfg.objective = Objective::Mlm;
    cfg.cpd.source = CpdSource::Diverge;
    let again = RunConfig::parse(&cfg.to_text()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(again.to_text(), cfg.to_text());
}

#[test]
fn config_parses_comments_and_dotted_keys() {
    let cfg = RunConfig::parse("train.lr = 0.01  # faster\nmodel.objective = ar\ncontext.method = mean\neval.tasks = global\n").unwrap();
    assert_eq!(cfg.train.lr, 0.01);
    assert_eq!(cfg.objective, Objective::Ar);
    assert_eq!(cfg.context.method, Some(ContextMethod::Mean));
    assert_eq!(cfg.eval.tasks, vec![Task::Global]);
}

#[test]
fn unknown_key_is_rejected_with_its_line() {
    let err = RunConfig::parse("train.lr = 0.01\ntrain.speed = 3\n").unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("unknown key train.speed"), "{err}");
}

#[test]
fn malformed_config_lines_are_rejected() {
    for text in ["train.lr 0.01\n", "train.lr = fast\n", "train.lr = 1\ntrain.lr = 2\n", "data.split = 0.5,0.5\n", "context.train_attention = yes\n"] {
        assert!(matches!(RunConfig::parse(text), Err(Error::Config(_))), "{text:?}");
    }
}

#[test]
fn invalid_values_are_rejected() {
    for text in ["train.epochs = 0\n", "window.s = 0\n", "eval.seeds =\n", "data.source = csv\n", "cpd.curve_from = 5\ncpd.curve_to = 1\n"] {
        assert!(RunConfig::parse(text).is_err(), "{text:?}");
    }
}

#[test]
fn digest_covers_training_settings_only() {
    let base = RunConfig::default();
    assert_eq!(base.digest().len(), 64);
    assert_eq!(base.digest(), RunConfig::default().digest());
    let mut lr = base.clone();
    lr.train.lr = 0.5;
    assert_ne!(lr.digest(), base.digest());
    let mut seed = base.clone();
    seed.seed = 7;
    assert_ne!(seed.digest(), base.digest());
    let mut eval = base.clone();
    eval.eval.seeds = vec![9];
    eval.context.method = Some(ContextMethod::Max);
    eval.window.s = 4;
    assert_eq!(eval.digest(), base.digest());
}

fn sample_checkpoint(with_store: bool) -> Checkpoint {
    let vocab = Vocabulary::from_ranked(&[5411, 5812, 4111]);
    let dims = ModelDims { d_emb: 3, hidden: 4, heads: 2, blocks: 1, head_hidden: 5 };
    let model = Model::new(Objective::Ar, vocab.table_size(), dims, 2, 3).unwrap();
    let mut c = Checkpoint::from_model(&model, dims, &vocab, "abc123");
    if with_store {
        c.store = Some(EmbeddingStore {
            dim: 4,
            clients: vec![StoredClient { client_id: "c1".into(), timestamps: vec![1, 5], embeddings: vec![vec![0.1, -0.2, 1e-300, 3.0]; 2] }],
        });
        c.tensors.insert(ATTENTION_SECTION.into(), crate::numeric::Tensor::identity(4));
    }
    c
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for with_store in [false, true] {
        let c = sample_checkpoint(with_store);
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
        for (name, t) in &c.tensors {
            let bits: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
            let back_bits: Vec<u64> = back.tensors[name].data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, back_bits, "{name}");
        }
    }
}

#[test]
fn checkpoint_rebuilds_the_model() {
    let c = sample_checkpoint(true);
    let m = c.model().unwrap();
    assert_eq!(m.objective, Objective::Ar);
    assert_eq!(m.params().iter().count(), c.tensors.len() - 1);
    for (n, t) in m.params().iter() {
        assert_eq!(&c.tensors[n], t);
    }
    assert_eq!(c.vocab().ranked_codes(), vec![5411, 5812, 4111]);
}

#[test]
fn checkpoint_with_foreign_or_missing_section_is_rejected() {
    let mut c = sample_checkpoint(false);
    c.tensors.insert("stray".into(), crate::numeric::Tensor::scalar(1.0));
    assert!(c.model().is_err());
    let mut c = sample_checkpoint(false);
    let first = c.tensors.keys().next().unwrap().clone();
    c.tensors.remove(&first);
    assert!(c.model().is_err());
}

#[test]
fn corrupted_magic_is_not_a_checkpoint() {
    let mut bytes = sample_checkpoint(false).to_bytes();
    bytes[0] = b'X';
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(matches!(err, Error::NotCheckpoint));
    assert_eq!(err.to_string(), "not a checkpoint");
    assert!(matches!(Checkpoint::from_bytes(b""), Err(Error::NotCheckpoint)));
}

#[test]
fn next_version_is_unsupported() {
    let mut bytes = sample_checkpoint(false).to_bytes();
    bytes[4..8].copy_from_slice(&(VERSION + 1).to_le_bytes());
    let err = Checkpoint::from_bytes(&bytes).unwrap_err();
    assert!(err.to_string().starts_with("unsupported version"), "{err}");
}

#[test]
fn every_truncation_is_an_error() {
    let bytes = sample_checkpoint(true).to_bytes();
    for n in 0..bytes.len() {
        assert!(Checkpoint::from_bytes(&bytes[..n]).is_err(), "prefix {n}");
    }
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(Checkpoint::from_bytes(&extra).is_err());
}

#[test]
fn digest_mismatch_is_an_error_unless_ignored() {
    let c = sample_checkpoint(false);
    assert!(c.check_digest("abc123", false).is_ok());
    assert!(matches!(c.check_digest("other", false), Err(Error::DigestMismatch { .. })));
    assert!(c.check_digest("other", true).is_ok());
}

fn metric_report(task: &str, runs: &[f64], aucs: bool) -> MetricReport {
    let stat = MetricStat::from_runs(runs).unwrap();
    MetricReport {
        task: task.into(),
        head: "mlp".into(),
        n_runs: runs.len(),
        n_train: 10,
        n_test: 5,
        accuracy: stat,
        roc_auc: aucs.then_some(stat),
        pr_auc: aucs.then_some(stat),
    }
}

#[test]
fn report_with_three_tasks_has_three_entries() {
    let mut r = Report::new("d", "coles", "none");
    for t in ["global", "next_mcc", "local_binary"] {
        r.tasks.push(TaskEntry::from_metrics(&metric_report(t, &[0.5, 0.7], true), "coles", "none"));
    }
    let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(v["tasks"].as_array().unwrap().len(), 3);
    for e in v["tasks"].as_array().unwrap() {
        for k in ["task", "metric", "mean", "std", "n_runs", "head", "objective", "context_method"] {
            assert!(e.get(k).is_some(), "{k}");
        }
        assert_eq!(e["metric"], "roc_auc");
    }
    assert_eq!(Report::from_json(&r.to_json()).unwrap(), r);
}

#[test]
fn std_is_absent_for_a_single_run() {
    let e = TaskEntry::from_metrics(&metric_report("global", &[0.6], false), "ar", "mean");
    assert_eq!(e.metric, "accuracy");
    let v = serde_json::to_value(&e).unwrap();
    assert!(v.get("std").is_none());
    assert!(v["metrics"]["accuracy"].get("std").is_none());
}

#[test]
fn report_serialization_is_stable() {
    let mut r = Report::new("d", "ar", "none");
    r.tasks.push(TaskEntry::from_metrics(&metric_report("global", &[0.5, 0.75], true), "ar", "none"));
    let text = r.to_json();
    assert_eq!(Report::from_json(&text).unwrap().to_json(), text);
    let keys = ["\"artifact_version\"", "\"config_digest\"", "\"objective\"", "\"context_method\"", "\"tasks\""];
    let pos: Vec<usize> = keys.iter().map(|k| text.find(k).unwrap()).collect();
    assert!(pos.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn margin_csv_has_one_row_per_margin() {
    let r = CpdResult::new(vec!["a".into(), "b".into()], vec![10, 20], vec![12, 20], &[0, 1, 5]).unwrap();
    assert_eq!(margin_csv(&r), "margin,accuracy\n0,0.5\n1,0.5\n5,1\n");
}

#[test]
fn write_report_emits_plot_data_and_keeps_timings_apart() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = Report::new("d", "ar", "none");
    let res = CpdResult::new(vec!["a".into()], vec![3], vec![4], &[0, 2]).unwrap();
    r.cpd.push(CpdEntry { source: "converge".into(), objective: "ar".into(), result: res });
    r.curves.push(CurveEntry {
        mode: "converge".into(),
        objective: "ar".into(),
        n_pairs: 1,
        points: vec![CurvePoint { offset: -1, distance: None }, CurvePoint { offset: 0, distance: Some(0.25) }],
    });
    r.timings = Some([("total".to_string(), 1.5)].into());
    let path = dir.path().join("report.json");
    let written = write_report(&r, &path).unwrap();
    assert_eq!(written.len(), 4);
    let stored = Report::load(&path).unwrap();
    assert!(stored.timings.is_none());
    assert_eq!(stored.cpd, r.cpd);
    let csv = std::fs::read_to_string(dir.path().join("report_cpd_ar_converge.csv")).unwrap();
    assert_eq!(csv, "margin,accuracy\n0,0\n2,1\n");
    let curve = std::fs::read_to_string(dir.path().join("report_distance.csv")).unwrap();
    assert_eq!(curve, "offset,ar_converge\n-1,\n0,0.25\n");
    assert!(dir.path().join("report.timings.json").exists());
}

#[test]
fn comparison_lists_every_metric() {
    let mut r = Report::new("d", "ar", "none");
    r.tasks.push(TaskEntry::from_metrics(&metric_report("global", &[0.5], true), "ar", "none"));
    let csv = comparison_csv(&[r]);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("objective,context_method,task,metric,mean,std,n_runs,head\n"));
}

#[test]
fn pipeline_is_deterministic() {
    let cfg = tiny();
    let run = || {
        let ds = load_dataset(&cfg).unwrap();
        let split = prepare_split(&cfg, &ds, None).unwrap();
        let (ckpt, _) = train_checkpoint(&cfg, &split).unwrap();
        let report = evaluate(&cfg, &ckpt, &split).unwrap();
        (ckpt.to_bytes(), Report { timings: None, ..report }.to_json())
    };
    let (c1, r1) = run();
    let (c2, r2) = run();
    assert_eq!(c1, c2);
    assert_eq!(r1, r2);
    let r = Report::from_json(&r1).unwrap();
    assert_eq!(r.tasks.len(), 3);
    assert_eq!(r.config_digest, cfg.digest());
}

#[test]
fn context_evaluation_builds_a_store_when_missing() {
    let mut cfg = tiny();
    cfg.context.method = Some(ContextMethod::Learnable);
    cfg.context.attention.epochs = 1;
    cfg.eval.tasks = vec![Task::LocalBinary];
    let ds = load_dataset(&cfg).unwrap();
    let split = prepare_split(&cfg, &ds, None).unwrap();
    let (mut ckpt, _) = train_checkpoint(&cfg, &split).unwrap();
    let direct = evaluate(&cfg, &ckpt, &split).unwrap();
    build_context(&cfg, &mut ckpt, &split).unwrap();
    assert_eq!(ckpt.store.as_ref().unwrap().len(), 10);
    assert!(ckpt.attention().is_some());
    let stored = evaluate(&cfg, &ckpt, &split).unwrap();
    assert_eq!(direct.tasks, stored.tasks);
    assert_eq!(stored.context_method, "learnable");
    let back = Checkpoint::from_bytes(&ckpt.to_bytes()).unwrap();
    assert_eq!(back, ckpt);
}

#[test]
fn splice_experiments_report_curves_and_detections() {
    let mut cfg = tiny();
    cfg.synthetic.change_point_prob = 0.0;
    let ds = load_dataset(&cfg).unwrap();
    let split = prepare_split(&cfg, &ds, None).unwrap();
    let (ckpt, _) = train_checkpoint(&cfg, &split).unwrap();
    for source in [CpdSource::Converge, CpdSource::Diverge] {
        cfg.cpd.source = source;
        let r = run_cpd(&cfg, &ckpt, &split).unwrap();
        assert_eq!(r.curves.len(), 1);
        assert_eq!(r.curves[0].n_pairs, 6);
        assert_eq!(r.curves[0].points.len(), 16);
        assert_eq!(r.cpd[0].result.accuracy.len(), 4);
        // Windows ending before the splice are identical in diverge mode.
        if source == CpdSource::Diverge {
            assert_eq!(r.curves[0].at(-5), Some(0.0));
        }
    }
}

#[test]
fn workers_follow_the_environment_cap() {
    assert!(max_workers() >= 1);
}
