use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqrep::data::{write_dataset_csv, Dataset, Split};
use seqrep::evaluation::{global_embeddings, sliding_window_embed_all};
use seqrep::pipeline::{
    build_context, comparison_csv, curves_csv, evaluate, global_embeddings_csv, load_dataset, local_embeddings_csv,
    margin_csv, prepare_split, run_cpd, train_checkpoint, write_atomic, write_report, Checkpoint, DataSource, Report,
    RunConfig,
};
use seqrep::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "seqrep", version, about = "Self-supervised representations of transaction sequences")]
struct Cli {
    /// Run configuration (`key = value` lines); defaults apply when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Checkpoint path; `<out>/model.ckpt` when absent.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// Only log errors.
    #[arg(long, global = true)]
    quiet: bool,
    /// Accept a checkpoint trained under a different config.
    #[arg(long, global = true)]
    ignore_digest: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as CSV files.
    Generate,
    /// Train the configured objective and save a checkpoint.
    Train,
    /// Write global and sliding-window embeddings of every client.
    Embed,
    /// Add a context store (and learnable matrix) to the checkpoint.
    BuildContext,
    /// Score downstream heads and write a report.
    Eval,
    /// Run the configured change point experiment and write a report.
    Cpd,
    /// Merge reports into a comparison table and plot data.
    Report {
        /// Report files to merge.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
    },
}

struct Run {
    cfg: RunConfig,
    out: PathBuf,
    checkpoint: PathBuf,
    ignore_digest: bool,
}

impl Run {
    fn load_checkpoint(&self) -> Result<Checkpoint> {
        let c = Checkpoint::load(&self.checkpoint)?;
        c.check_digest(&self.cfg.digest(), self.ignore_digest)?;
        Ok(c)
    }

    fn split_for(&self, ckpt: &Checkpoint) -> Result<(Dataset, Split)> {
        let ds = load_dataset(&self.cfg)?;
        let split = prepare_split(&self.cfg, &ds, Some(&ckpt.vocab()))?;
        Ok((ds, split))
    }

    fn write(&self, name: &str, body: &str) -> Result<PathBuf> {
        let p = self.out.join(name);
        write_atomic(&p, body.as_bytes())?;
        Ok(p)
    }
}

fn generate(run: &Run) -> Result<()> {
    if run.cfg.data.source != DataSource::Synthetic {
        return Err(Error::Config("generate needs data.source = synthetic".into()));
    }
    let ds = load_dataset(&run.cfg)?;
    write_dataset_csv(&ds, &run.out)?;
    log::info!("{} clients, {} transactions written to {}", ds.len(), ds.total_transactions(), run.out.display());
    Ok(())
}

fn train(run: &Run) -> Result<()> {
    let ds = load_dataset(&run.cfg)?;
    let split = prepare_split(&run.cfg, &ds, None)?;
    let (ckpt, outcome) = train_checkpoint(&run.cfg, &split)?;
    ckpt.save(&run.checkpoint)?;
    let mut history = String::from("epoch,train_loss,val_loss\n");
    for r in &outcome.history {
        history.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_loss.map(|v| v.to_string()).unwrap_or_default()));
    }
    run.write("train_history.csv", &history)?;
    log::info!("best epoch {}; checkpoint {}", outcome.best_epoch, run.checkpoint.display());
    Ok(())
}

fn embed(run: &Run) -> Result<()> {
    let ckpt = run.load_checkpoint()?;
    let mut ds = load_dataset(&run.cfg)?;
    ds.apply_vocab(&ckpt.vocab());
    let model = ckpt.model()?;
    let ids: Vec<&str> = ds.sequences.iter().map(|s| s.client_id.as_str()).collect();
    let global = global_embeddings(&model.encoder, model.pooling(), &ds.sequences)?;
    run.write("global_embeddings.csv", &global_embeddings_csv(&ids, &global))?;
    let local = sliding_window_embed_all(&model.encoder, model.pooling(), &ds.sequences, run.cfg.window)?;
    run.write("local_embeddings.csv", &local_embeddings_csv(&local))?;
    Ok(())
}

fn context(run: &Run) -> Result<()> {
    let mut ckpt = run.load_checkpoint()?;
    let (_, split) = run.split_for(&ckpt)?;
    build_context(&run.cfg, &mut ckpt, &split)?;
    ckpt.save(&run.checkpoint)?;
    log::info!("context store of {} clients saved to {}", ckpt.store.as_ref().map_or(0, |s| s.len()), run.checkpoint.display());
    Ok(())
}

fn eval(run: &Run) -> Result<()> {
    let ckpt = run.load_checkpoint()?;
    let (_, split) = run.split_for(&ckpt)?;
    let report = evaluate(&run.cfg, &ckpt, &split)?;
    for t in &report.tasks {
        log::info!("{} {} {:.4}", t.task, t.metric, t.mean);
    }
    write_report(&report, &run.out.join("report.json"))?;
    Ok(())
}

fn cpd(run: &Run) -> Result<()> {
    let ckpt = run.load_checkpoint()?;
    let (_, split) = run.split_for(&ckpt)?;
    let report = run_cpd(&run.cfg, &ckpt, &split)?;
    for c in &report.cpd {
        log::info!("{}: delay {:.2}, accuracy {:?}", c.source, c.result.detection_delay, c.result.accuracy);
    }
    write_report(&report, &run.out.join(format!("cpd_{}.json", run.cfg.cpd.source)))?;
    Ok(())
}

fn merge(run: &Run, paths: &[PathBuf]) -> Result<()> {
    let reports = paths.iter().map(|p| Report::load(p)).collect::<Result<Vec<_>>>()?;
    let table = comparison_csv(&reports);
    run.write("comparison.csv", &table)?;
    for r in &reports {
        for c in &r.cpd {
            run.write(&format!("cpd_accuracy_{}_{}.csv", c.objective, c.source), &margin_csv(&c.result))?;
        }
    }
    let curves: Vec<_> = reports.iter().flat_map(|r| r.curves.iter().cloned()).collect();
    if !curves.is_empty() {
        run.write("distance_curves.csv", &curves_csv(&curves))?;
    }
    log::info!("merged {} reports into {}", reports.len(), run.out.join("comparison.csv").display());
    Ok(())
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let checkpoint = cli.checkpoint.clone().unwrap_or_else(|| cli.out.join("model.ckpt"));
    let run = Run { cfg, out: cli.out.clone(), checkpoint, ignore_digest: cli.ignore_digest };
    match &cli.command {
        Command::Generate => generate(&run),
        Command::Train => train(&run),
        Command::Embed => embed(&run),
        Command::BuildContext => context(&run),
        Command::Eval => eval(&run),
        Command::Cpd => cpd(&run),
        Command::Report { reports } => merge(&run, reports),
    }
}

fn init_logging(quiet: bool) {
    let level = if quiet { "error" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .try_init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    init_logging(cli.quiet);
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
