use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = "\
synthetic.n_clients = 60
synthetic.min_len = 40
synthetic.max_len = 70
model.d_emb = 4
model.hidden = 8
model.head_hidden = 8
train.epochs = 2
train.batch_size = 16
objective.slice_min = 8
objective.slice_max = 20
window.w = 16
window.s = 8
eval.head_hidden = 8
eval.head_epochs = 2
eval.seeds = 0,1
context.store_size = 10
cpd.pairs = 6
cpd.curve_from = -5
cpd.curve_to = 10
";

fn seqrep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_seqrep")).args(args).output().expect("binary runs")
}

fn ok_in(dir: &Path, args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_seqrep")).current_dir(dir).args(args).output().expect("binary runs");
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn ok(args: &[&str]) -> Output {
    ok_in(Path::new("."), args)
}

fn write_config(dir: &Path, extra: &str) -> String {
    let p = dir.join("run.cfg");
    fs::write(&p, format!("{SMALL}{extra}")).unwrap();
    p.to_string_lossy().into_owned()
}

fn csv_config(dir: &Path, data: &Path, extra: &str) -> String {
    let d = data.display();
    write_config(
        dir,
        &format!(
            "data.source = csv\ndata.transactions = {d}/transactions.csv\ndata.labels = {d}/labels.csv\n\
             data.local_labels = {d}/local_labels.csv\ndata.change_points = {d}/change_points.csv\n{extra}"
        ),
    )
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = seqrep(&["bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_subcommand_prints_help() {
    let out = seqrep(&[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Commands"));
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(seqrep(&["--help"]).status.code(), Some(0));
}

#[test]
fn config_with_unknown_key_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.turbo = 1\n");
    let out = seqrep(&["train", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key train.turbo"));
}

fn pipeline(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    fs::write(dir.join("gen.cfg"), SMALL).unwrap();
    ok_in(dir, &["generate", "--config", "gen.cfg", "--out", "data", "--quiet"]);
    csv_config(dir, Path::new("data"), "");
    ok_in(dir, &["train", "--config", "run.cfg", "--out", "out", "--quiet"]);
    ok_in(dir, &["eval", "--config", "run.cfg", "--out", "out", "--quiet"]);
    (fs::read(dir.join("out/model.ckpt")).unwrap(), fs::read(dir.join("out/report.json")).unwrap())
}

#[test]
fn generate_train_eval_writes_every_task_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (ckpt_a, report_a) = pipeline(a.path());
    let (ckpt_b, report_b) = pipeline(b.path());
    assert_eq!(ckpt_a, ckpt_b);
    assert_eq!(report_a, report_b);
    let text = String::from_utf8(report_a).unwrap();
    for task in ["\"global\"", "\"next_mcc\"", "\"local_binary\""] {
        assert!(text.contains(task), "{task}");
    }
    assert!(text.contains("config_digest"));
    assert!(!text.contains("timings"));
    assert!(a.path().join("out/report.timings.json").exists());
    assert!(a.path().join("out/train_history.csv").exists());
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["generate", "--config", &cfg, "--out", a.to_str().unwrap(), "--quiet"]);
    ok(&["generate", "--config", &cfg, "--out", b.to_str().unwrap(), "--seed", "5", "--quiet"]);
    let ta = fs::read(a.join("transactions.csv")).unwrap();
    let tb = fs::read(b.join("transactions.csv")).unwrap();
    assert_ne!(ta, tb);
}

#[test]
fn checkpoint_from_another_config_is_refused_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(dir.path(), "eval.tasks = global\n");
    ok(&["train", "--config", &cfg, "--out", out.to_str().unwrap(), "--quiet"]);
    let other = dir.path().join("other.cfg");
    fs::write(&other, format!("{SMALL}eval.tasks = global\ntrain.lr = 0.01\n")).unwrap();
    let r = seqrep(&["eval", "--config", other.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("digest mismatch"));
    ok(&["eval", "--config", other.to_str().unwrap(), "--out", out.to_str().unwrap(), "--ignore-digest", "--quiet"]);
}

#[test]
fn corrupted_checkpoint_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, b"not really").unwrap();
    let r = seqrep(&["eval", "--checkpoint", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&r.stderr).contains("not a checkpoint"));
}

#[test]
fn context_embedding_cpd_and_report_commands() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = out.to_str().unwrap();
    let cfg = write_config(dir.path(), "context.method = mean\neval.tasks = local_binary\n");
    ok(&["train", "--config", &cfg, "--out", o, "--quiet"]);
    ok(&["build-context", "--config", &cfg, "--out", o, "--quiet"]);
    ok(&["eval", "--config", &cfg, "--out", o, "--quiet"]);
    let report = fs::read_to_string(out.join("report.json")).unwrap();
    assert!(report.contains("\"context_method\": \"mean\""));
    ok(&["embed", "--config", &cfg, "--out", o, "--quiet"]);
    let global = fs::read_to_string(out.join("global_embeddings.csv")).unwrap();
    assert_eq!(global.lines().count(), 61);
    assert!(fs::read_to_string(out.join("local_embeddings.csv")).unwrap().starts_with("client_id,end,timestamp,e0"));
    let cpd_cfg = write_config(dir.path(), "context.method = mean\neval.tasks = local_binary\ncpd.source = converge\n");
    ok(&["cpd", "--config", &cpd_cfg, "--out", o, "--quiet"]);
    assert!(out.join("cpd_converge_distance.csv").exists());
    let margins = fs::read_to_string(out.join("cpd_converge_cpd_coles_converge.csv")).unwrap();
    assert_eq!(margins.lines().next(), Some("margin,accuracy"));
    assert_eq!(margins.lines().count(), 5);
    let merged = dir.path().join("merged");
    ok(&[
        "report",
        out.join("report.json").to_str().unwrap(),
        out.join("cpd_converge.json").to_str().unwrap(),
        "--out",
        merged.to_str().unwrap(),
        "--quiet",
    ]);
    let table = fs::read_to_string(merged.join("comparison.csv")).unwrap();
    assert!(table.contains("local_binary") && table.contains("cpd_converge"));
    assert!(merged.join("distance_curves.csv").exists());
    assert!(merged.join("cpd_accuracy_coles_converge.csv").exists());
}
