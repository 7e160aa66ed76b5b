//! Configuration, checkpoints, reports and the end-to-end pipeline.

mod checkpoint;
mod config;
mod report;
mod run;

pub use checkpoint::{Checkpoint, CheckpointMeta, ATTENTION_SECTION, MAGIC, VERSION};
pub use config::{ContextConfig, CpdConfig, CpdSource, DataConfig, DataSource, EvalConfig, RunConfig, Task};
pub use report::{
    comparison_csv, curves_csv, margin_csv, write_report, CpdEntry, CurveEntry, CurvePoint, Report, TaskEntry,
    ARTIFACT_VERSION,
};
pub use run::{
    build_context, detect_changes, evaluate, load_dataset, prepare_split, run_cpd, splice_curve, spliced_pairs,
    train_checkpoint,
};

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evaluation::LocalEmbeddingSeries;

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// `client_id,e0,e1,...` rows.
pub fn global_embeddings_csv(ids: &[&str], embeddings: &[Vec<f64>]) -> String {
    let d = embeddings.first().map_or(0, Vec::len);
    let mut s = String::from("client_id");
    (0..d).for_each(|k| s.push_str(&format!(",e{k}")));
    s.push('\n');
    for (id, e) in ids.iter().zip(embeddings) {
        s.push_str(id);
        e.iter().for_each(|v| s.push_str(&format!(",{v}")));
        s.push('\n');
    }
    s
}

/// `client_id,end,timestamp,e0,e1,...` rows, one per window.
pub fn local_embeddings_csv(series: &[LocalEmbeddingSeries]) -> String {
    let d = series.iter().find_map(|s| s.embeddings.first()).map_or(0, Vec::len);
    let mut s = String::from("client_id,end,timestamp");
    (0..d).for_each(|k| s.push_str(&format!(",e{k}")));
    s.push('\n');
    for ser in series {
        for ((end, ts), e) in ser.ends.iter().zip(&ser.timestamps).zip(&ser.embeddings) {
            s.push_str(&format!("{},{end},{ts}", ser.client_id));
            e.iter().for_each(|v| s.push_str(&format!(",{v}")));
            s.push('\n');
        }
    }
    s
}

/// Worker cap from `SEQREP_THREADS`, else the available parallelism.
pub fn max_workers() -> usize {
    std::env::var("SEQREP_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

#[cfg(test)]
mod tests;
