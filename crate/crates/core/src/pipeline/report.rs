use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{CpdResult, MetricReport, MetricStat};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// One downstream task; `metric`, `mean` and `std` repeat its headline
/// metric, ROC-AUC when defined and accuracy otherwise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskEntry {
    pub task: String,
    pub metric: String,
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
    pub n_runs: usize,
    pub head: String,
    pub objective: String,
    pub context_method: String,
    pub n_train: usize,
    pub n_test: usize,
    pub metrics: BTreeMap<String, MetricStat>,
}

impl TaskEntry {
    pub fn from_metrics(r: &MetricReport, objective: &str, context_method: &str) -> Self {
        let mut metrics = BTreeMap::new();
        metrics.insert("accuracy".to_string(), r.accuracy);
        if let Some(s) = r.roc_auc {
            metrics.insert("roc_auc".to_string(), s);
        }
        if let Some(s) = r.pr_auc {
            metrics.insert("pr_auc".to_string(), s);
        }
        let (metric, stat) = match r.roc_auc {
            Some(s) => ("roc_auc", s),
            None => ("accuracy", r.accuracy),
        };
        Self {
            task: r.task.clone(),
            metric: metric.to_string(),
            mean: stat.mean,
            std: stat.std,
            n_runs: r.n_runs,
            head: r.head.clone(),
            objective: objective.to_string(),
            context_method: context_method.to_string(),
            n_train: r.n_train,
            n_test: r.n_test,
            metrics,
        }
    }
}

/// Detection outcome on one kind of change point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpdEntry {
    pub source: String,
    pub objective: String,
    pub result: CpdResult,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub offset: i64,
    pub distance: Option<f64>,
}

/// Mean cosine distance between spliced and original clients around the splice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveEntry {
    pub mode: String,
    pub objective: String,
    pub n_pairs: usize,
    pub points: Vec<CurvePoint>,
}

impl CurveEntry {
    pub fn at(&self, offset: i64) -> Option<f64> {
        self.points.iter().find(|p| p.offset == offset).and_then(|p| p.distance)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub artifact_version: String,
    /// Digest of the config of the checkpoint that produced the report.
    pub config_digest: String,
    pub objective: String,
    pub context_method: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tasks: Vec<TaskEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub cpd: Vec<CpdEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curves: Vec<CurveEntry>,
    /// Wall-clock seconds per stage; kept out of the canonical report file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<BTreeMap<String, f64>>,
}

impl Report {
    pub fn new(config_digest: &str, objective: &str, context_method: &str) -> Self {
        Self {
            artifact_version: ARTIFACT_VERSION.to_string(),
            config_digest: config_digest.to_string(),
            objective: objective.to_string(),
            context_method: context_method.to_string(),
            tasks: Vec::new(),
            cpd: Vec::new(),
            curves: Vec::new(),
            timings: None,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::invalid(format!("report: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
    }
}

/// `margin,accuracy` rows of one detection result.
pub fn margin_csv(result: &CpdResult) -> String {
    let mut s = String::from("margin,accuracy\n");
    for (m, a) in &result.accuracy {
        s.push_str(&format!("{m},{a}\n"));
    }
    s
}

/// `offset` column followed by one column per curve; missing points are empty.
pub fn curves_csv(curves: &[CurveEntry]) -> String {
    let mut offsets: Vec<i64> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.offset)).collect();
    offsets.sort_unstable();
    offsets.dedup();
    let mut s = String::from("offset");
    for c in curves {
        s.push_str(&format!(",{}_{}", c.objective, c.mode));
    }
    s.push('\n');
    for o in offsets {
        s.push_str(&o.to_string());
        for c in curves {
            s.push(',');
            if let Some(d) = c.at(o) {
                s.push_str(&d.to_string());
            }
        }
        s.push('\n');
    }
    s
}

/// Task entries of many reports side by side.
pub fn comparison_csv(reports: &[Report]) -> String {
    let mut s = String::from("objective,context_method,task,metric,mean,std,n_runs,head\n");
    for r in reports {
        for t in &r.tasks {
            for (metric, stat) in &t.metrics {
                s.push_str(&format!(
                    "{},{},{},{metric},{},{},{},{}\n",
                    t.objective,
                    t.context_method,
                    t.task,
                    stat.mean,
                    stat.std.map(|v| v.to_string()).unwrap_or_default(),
                    t.n_runs,
                    t.head
                ));
            }
        }
        for c in &r.cpd {
            s.push_str(&format!("{},{},cpd_{},detection_delay,{},,{},dynp\n", c.objective, r.context_method, c.source, c.result.detection_delay, c.result.truth.len()));
            for (m, a) in &c.result.accuracy {
                s.push_str(&format!("{},{},cpd_{},accuracy_m{m},{a},,{},dynp\n", c.objective, r.context_method, c.source, c.result.truth.len()));
            }
        }
    }
    s
}

/// Writes the report without timings to `path`, the timings to
/// `<stem>.timings.json`, and the plot data of its change point entries
/// next to it. Returns every written path.
pub fn write_report(report: &Report, path: &Path) -> Result<Vec<PathBuf>> {
    let dir = path.parent().unwrap_or(Path::new("."));
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "report".into());
    let mut written = Vec::new();
    let canonical = Report { timings: None, ..report.clone() };
    super::write_atomic(path, canonical.to_json().as_bytes())?;
    written.push(path.to_path_buf());
    if let Some(t) = &report.timings {
        let p = dir.join(format!("{stem}.timings.json"));
        let mut body = serde_json::to_string_pretty(t).expect("timings serialize");
        body.push('\n');
        super::write_atomic(&p, body.as_bytes())?;
        written.push(p);
    }
    for c in &report.cpd {
        let p = dir.join(format!("{stem}_cpd_{}_{}.csv", c.objective, c.source));
        super::write_atomic(&p, margin_csv(&c.result).as_bytes())?;
        written.push(p);
    }
    if !report.curves.is_empty() {
        let p = dir.join(format!("{stem}_distance.csv"));
        super::write_atomic(&p, curves_csv(&report.curves).as_bytes())?;
        written.push(p);
    }
    Ok(written)
}
