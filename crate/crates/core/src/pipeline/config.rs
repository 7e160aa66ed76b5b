use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::context::{AttentionTrainConfig, ContextMethod};
use crate::data::SyntheticConfig;
use crate::error::{Error, Result};
use crate::evaluation::{HeadConfig, WindowConfig};
use crate::objectives::{Objective, ObjectiveConfig, ModelDims, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Csv,
}

impl FromStr for DataSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "csv" => Ok(Self::Csv),
            _ => Err(Error::Config(format!("unknown data source {s:?}"))),
        }
    }
}

impl fmt::Display for DataSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Synthetic => "synthetic",
            Self::Csv => "csv",
        })
    }
}

/// Downstream task run by `eval`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Task {
    Global,
    NextMcc,
    LocalBinary,
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Self::Global),
            "next_mcc" => Ok(Self::NextMcc),
            "local_binary" => Ok(Self::LocalBinary),
            _ => Err(Error::Config(format!("unknown task {s:?}"))),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Global => "global",
            Self::NextMcc => "next_mcc",
            Self::LocalBinary => "local_binary",
        })
    }
}

/// Change points scored by `cpd`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CpdSource {
    /// Change points recorded in the data.
    Planted,
    /// Halves of two clients joined in converge mode.
    Converge,
    /// Halves of two clients joined in diverge mode.
    Diverge,
}

impl FromStr for CpdSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planted" => Ok(Self::Planted),
            "converge" => Ok(Self::Converge),
            "diverge" => Ok(Self::Diverge),
            _ => Err(Error::Config(format!("unknown cpd source {s:?}"))),
        }
    }
}

impl fmt::Display for CpdSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Planted => "planted",
            Self::Converge => "converge",
            Self::Diverge => "diverge",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// `client_id,timestamp,mcc,amount` file for the csv source.
    pub transactions: String,
    /// Optional companion files; empty means absent.
    pub labels: String,
    pub local_labels: String,
    pub change_points: String,
    /// Codes kept in the vocabulary; the rest map to OOV.
    pub top_k: usize,
    pub split: [f64; 3],
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            transactions: String::new(),
            labels: String::new(),
            local_labels: String::new(),
            change_points: String::new(),
            top_k: 100,
            split: [0.8, 0.1, 0.1],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextConfig {
    /// `None` evaluates without context.
    pub method: Option<ContextMethod>,
    pub store_size: usize,
    /// Fit the learnable matrix; the identity is used otherwise.
    pub train_attention: bool,
    pub attention: AttentionTrainConfig,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self { method: None, store_size: 500, train_attention: true, attention: AttentionTrainConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub tasks: Vec<Task>,
    /// One head is trained per seed.
    pub seeds: Vec<u64>,
    pub head: HeadConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { tasks: vec![Task::Global, Task::NextMcc, Task::LocalBinary], seeds: vec![0, 1, 2], head: HeadConfig::default() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpdConfig {
    pub source: CpdSource,
    pub margins: Vec<usize>,
    /// Window shift of the embedding series; the window size is `window.w`.
    pub shift: usize,
    /// Spliced pairs drawn for the converge and diverge sources.
    pub pairs: usize,
    /// Offsets from the change, in transactions, of the distance curve.
    pub curve_from: i64,
    pub curve_to: i64,
}

impl Default for CpdConfig {
    fn default() -> Self {
        Self { source: CpdSource::Planted, margins: vec![0, 5, 10, 20], shift: 1, pairs: 100, curve_from: -30, curve_to: 60 }
    }
}

/// Every setting of a run. Text form: one `key = value` per line with
/// dotted keys, `#` comments and blank lines; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub synthetic: SyntheticConfig,
    pub objective: Objective,
    pub dims: ModelDims,
    pub objective_params: ObjectiveConfig,
    pub train: TrainConfig,
    pub window: WindowConfig,
    pub context: ContextConfig,
    pub eval: EvalConfig,
    pub cpd: CpdConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            data: DataConfig::default(),
            synthetic: SyntheticConfig::default(),
            objective: Objective::Coles,
            dims: ModelDims::default(),
            objective_params: ObjectiveConfig::default(),
            train: TrainConfig::default(),
            window: WindowConfig::default(),
            context: ContextConfig::default(),
            eval: EvalConfig::default(),
            cpd: CpdConfig::default(),
        }
    }
}

fn parse<T: FromStr>(v: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Config(format!("{v:?}: {e}")))
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| parse(s.trim())).collect()
}

fn join<T: fmt::Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{v:?} is not true or false"))),
    }
}

type Getter = fn(&RunConfig) -> String;
type Setter = fn(&mut RunConfig, &str) -> Result<()>;

/// `(key, getter, setter, part of the training digest)`.
const FIELDS: &[(&str, Getter, Setter, bool)] = &[
    ("train.seed", |c| c.seed.to_string(), |c, v| Ok(c.seed = parse(v)?), true),
    ("data.source", |c| c.data.source.to_string(), |c, v| Ok(c.data.source = parse(v)?), true),
    ("data.transactions", |c| c.data.transactions.clone(), |c, v| Ok(c.data.transactions = v.to_string()), true),
    ("data.labels", |c| c.data.labels.clone(), |c, v| Ok(c.data.labels = v.to_string()), true),
    ("data.local_labels", |c| c.data.local_labels.clone(), |c, v| Ok(c.data.local_labels = v.to_string()), true),
    ("data.change_points", |c| c.data.change_points.clone(), |c, v| Ok(c.data.change_points = v.to_string()), true),
    ("data.top_k", |c| c.data.top_k.to_string(), |c, v| Ok(c.data.top_k = parse(v)?), true),
    ("data.split", |c| join(&c.data.split), |c, v| {
        let s: Vec<f64> = parse_list(v)?;
        c.data.split = s.try_into().map_err(|_| Error::Config("data.split needs 3 ratios".into()))?;
        Ok(())
    }, true),
    ("synthetic.n_clients", |c| c.synthetic.n_clients.to_string(), |c, v| Ok(c.synthetic.n_clients = parse(v)?), true),
    ("synthetic.min_len", |c| c.synthetic.min_len.to_string(), |c, v| Ok(c.synthetic.min_len = parse(v)?), true),
    ("synthetic.max_len", |c| c.synthetic.max_len.to_string(), |c, v| Ok(c.synthetic.max_len = parse(v)?), true),
    ("synthetic.n_mcc", |c| c.synthetic.n_mcc.to_string(), |c, v| Ok(c.synthetic.n_mcc = parse(v)?), true),
    ("synthetic.n_regimes", |c| c.synthetic.n_regimes.to_string(), |c, v| Ok(c.synthetic.n_regimes = parse(v)?), true),
    ("synthetic.coupling", |c| c.synthetic.coupling.to_string(), |c, v| Ok(c.synthetic.coupling = parse(v)?), true),
    ("synthetic.exo_switch_rate", |c| c.synthetic.exo_switch_rate.to_string(), |c, v| Ok(c.synthetic.exo_switch_rate = parse(v)?), true),
    ("synthetic.exo_strength", |c| c.synthetic.exo_strength.to_string(), |c, v| Ok(c.synthetic.exo_strength = parse(v)?), true),
    ("synthetic.n_crisis_codes", |c| c.synthetic.n_crisis_codes.to_string(), |c, v| Ok(c.synthetic.n_crisis_codes = parse(v)?), true),
    ("synthetic.change_point_prob", |c| c.synthetic.change_point_prob.to_string(), |c, v| Ok(c.synthetic.change_point_prob = parse(v)?), true),
    ("synthetic.distress_mix", |c| c.synthetic.distress_mix.to_string(), |c, v| Ok(c.synthetic.distress_mix = parse(v)?), true),
    ("model.objective", |c| c.objective.to_string(), |c, v| Ok(c.objective = parse(v)?), true),
    ("model.d_emb", |c| c.dims.d_emb.to_string(), |c, v| Ok(c.dims.d_emb = parse(v)?), true),
    ("model.hidden", |c| c.dims.hidden.to_string(), |c, v| Ok(c.dims.hidden = parse(v)?), true),
    ("model.heads", |c| c.dims.heads.to_string(), |c, v| Ok(c.dims.heads = parse(v)?), true),
    ("model.blocks", |c| c.dims.blocks.to_string(), |c, v| Ok(c.dims.blocks = parse(v)?), true),
    ("model.head_hidden", |c| c.dims.head_hidden.to_string(), |c, v| Ok(c.dims.head_hidden = parse(v)?), true),
    ("objective.slices", |c| c.objective_params.slices_per_client.to_string(), |c, v| Ok(c.objective_params.slices_per_client = parse(v)?), true),
    ("objective.slice_min", |c| c.objective_params.slice_min.to_string(), |c, v| Ok(c.objective_params.slice_min = parse(v)?), true),
    ("objective.slice_max", |c| c.objective_params.slice_max.to_string(), |c, v| Ok(c.objective_params.slice_max = parse(v)?), true),
    ("objective.margin", |c| c.objective_params.margin.to_string(), |c, v| Ok(c.objective_params.margin = parse(v)?), true),
    ("objective.ts2vec_alpha", |c| c.objective_params.ts2vec_alpha.to_string(), |c, v| Ok(c.objective_params.ts2vec_alpha = parse(v)?), true),
    ("objective.mlm_rate", |c| c.objective_params.mlm_rate.to_string(), |c, v| Ok(c.objective_params.mlm_rate = parse(v)?), true),
    ("objective.mlm_split", |c| join(&c.objective_params.mlm_split), |c, v| {
        let s: Vec<f64> = parse_list(v)?;
        c.objective_params.mlm_split = s.try_into().map_err(|_| Error::Config("objective.mlm_split needs 3 shares".into()))?;
        Ok(())
    }, true),
    ("objective.code_weight", |c| c.objective_params.loss_weights.0.to_string(), |c, v| Ok(c.objective_params.loss_weights.0 = parse(v)?), true),
    ("objective.amount_weight", |c| c.objective_params.loss_weights.1.to_string(), |c, v| Ok(c.objective_params.loss_weights.1 = parse(v)?), true),
    ("train.epochs", |c| c.train.epochs.to_string(), |c, v| Ok(c.train.epochs = parse(v)?), true),
    ("train.batch_size", |c| c.train.batch_size.to_string(), |c, v| Ok(c.train.batch_size = parse(v)?), true),
    ("train.lr", |c| c.train.lr.to_string(), |c, v| Ok(c.train.lr = parse(v)?), true),
    ("train.max_len", |c| c.train.max_len.to_string(), |c, v| Ok(c.train.max_len = parse(v)?), true),
    ("train.grad_clip", |c| c.train.grad_clip.to_string(), |c, v| Ok(c.train.grad_clip = parse(v)?), true),
    ("window.w", |c| c.window.w.to_string(), |c, v| Ok(c.window.w = parse(v)?), false),
    ("window.s", |c| c.window.s.to_string(), |c, v| Ok(c.window.s = parse(v)?), false),
    ("context.method", |c| c.context.method.map_or("none".into(), |m| m.to_string()), |c, v| {
        c.context.method = if v == "none" { None } else { Some(parse(v)?) };
        Ok(())
    }, false),
    ("context.store_size", |c| c.context.store_size.to_string(), |c, v| Ok(c.context.store_size = parse(v)?), false),
    ("context.train_attention", |c| c.context.train_attention.to_string(), |c, v| Ok(c.context.train_attention = parse_bool(v)?), false),
    ("context.attention_epochs", |c| c.context.attention.epochs.to_string(), |c, v| Ok(c.context.attention.epochs = parse(v)?), false),
    ("context.attention_batch_size", |c| c.context.attention.batch_size.to_string(), |c, v| Ok(c.context.attention.batch_size = parse(v)?), false),
    ("context.attention_lr", |c| c.context.attention.lr.to_string(), |c, v| Ok(c.context.attention.lr = parse(v)?), false),
    ("context.attention_init_noise", |c| c.context.attention.init_noise.to_string(), |c, v| Ok(c.context.attention.init_noise = parse(v)?), false),
    ("eval.tasks", |c| join(&c.eval.tasks), |c, v| Ok(c.eval.tasks = parse_list(v)?), false),
    ("eval.seeds", |c| join(&c.eval.seeds), |c, v| Ok(c.eval.seeds = parse_list(v)?), false),
    ("eval.head_hidden", |c| c.eval.head.hidden.to_string(), |c, v| Ok(c.eval.head.hidden = parse(v)?), false),
    ("eval.head_epochs", |c| c.eval.head.epochs.to_string(), |c, v| Ok(c.eval.head.epochs = parse(v)?), false),
    ("eval.head_batch_size", |c| c.eval.head.batch_size.to_string(), |c, v| Ok(c.eval.head.batch_size = parse(v)?), false),
    ("eval.head_lr", |c| c.eval.head.lr.to_string(), |c, v| Ok(c.eval.head.lr = parse(v)?), false),
    ("cpd.source", |c| c.cpd.source.to_string(), |c, v| Ok(c.cpd.source = parse(v)?), false),
    ("cpd.margins", |c| join(&c.cpd.margins), |c, v| Ok(c.cpd.margins = parse_list(v)?), false),
    ("cpd.shift", |c| c.cpd.shift.to_string(), |c, v| Ok(c.cpd.shift = parse(v)?), false),
    ("cpd.pairs", |c| c.cpd.pairs.to_string(), |c, v| Ok(c.cpd.pairs = parse(v)?), false),
    ("cpd.curve_from", |c| c.cpd.curve_from.to_string(), |c, v| Ok(c.cpd.curve_from = parse(v)?), false),
    ("cpd.curve_to", |c| c.cpd.curve_to.to_string(), |c, v| Ok(c.cpd.curve_to = parse(v)?), false),
];

impl RunConfig {
    /// Parses config text on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut values: BTreeMap<&str, (usize, &str)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            let k = k.trim();
            if values.insert(k, (i + 1, v.trim())).is_some() {
                return Err(Error::Config(format!("line {}: duplicate key {k}", i + 1)));
            }
        }
        let mut cfg = Self::default();
        for &(key, _, set, _) in FIELDS {
            if let Some((line, v)) = values.remove(key) {
                set(&mut cfg, v).map_err(|e| Error::Config(format!("line {line}: {key}: {e}")))?;
            }
        }
        if let Some((k, (line, _))) = values.into_iter().next() {
            return Err(Error::Config(format!("line {line}: unknown key {k}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Every key with its value, one per line, in a fixed order.
    pub fn to_text(&self) -> String {
        FIELDS.iter().map(|(k, get, _, _)| format!("{k} = {}\n", get(self))).collect()
    }

    /// SHA-256 of the canonical text of the settings that determine a
    /// trained checkpoint: seed, data, model, objective and training keys.
    pub fn digest(&self) -> String {
        let text: String = FIELDS
            .iter()
            .filter(|f| f.3)
            .map(|(k, get, _, _)| format!("{k} = {}\n", get(self)))
            .collect();
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.data.source == DataSource::Csv && self.data.transactions.is_empty() {
            return bad("data.transactions is required for the csv source".into());
        }
        if self.data.source == DataSource::Synthetic {
            self.synthetic.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.data.top_k == 0 {
            return bad("data.top_k must be positive".into());
        }
        if self.train.epochs == 0 || self.train.batch_size == 0 || !(self.train.lr > 0.0) || self.train.max_len == 0 {
            return bad("train.epochs, train.batch_size, train.lr and train.max_len must be positive".into());
        }
        self.window.validate().map_err(|e| Error::Config(e.to_string()))?;
        if self.eval.seeds.is_empty() {
            return bad("eval.seeds must not be empty".into());
        }
        if self.cpd.shift == 0 {
            return bad("cpd.shift must be positive".into());
        }
        if self.cpd.curve_from > self.cpd.curve_to {
            return bad("cpd.curve_from exceeds cpd.curve_to".into());
        }
        if self.context.store_size == 0 {
            return bad("context.store_size must be positive".into());
        }
        Ok(())
    }
}
