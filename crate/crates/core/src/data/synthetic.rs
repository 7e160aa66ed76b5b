use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Exp, LogNormal};

use super::{ClientSequence, Dataset, Provenance, Transaction, SECONDS_PER_DAY};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng};

/// Raw codes used for the first alphabet entries; later entries get `9000 + k`.
const MCC_CODES: [i64; 20] = [
    5411, 5812, 5541, 5912, 4111, 5311, 5999, 4814, 5732, 5691, 7011, 4121, 5814, 5651, 6011, 5921, 7832, 8099, 5200,
    4900,
];

const EPOCH_START: i64 = 1_600_000_000;

pub type Matrix = Vec<Vec<f64>>;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub n_clients: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub n_mcc: usize,
    pub n_regimes: usize,
    /// Explicit per-regime transition matrices; drawn from the seed when absent.
    pub transitions: Option<Vec<Matrix>>,
    /// Probability that the global label follows the base regime.
    pub coupling: f64,
    /// Expected switches of the shared calm/crisis state per day.
    pub exo_switch_rate: f64,
    /// Probability that a transaction during a crisis is drawn from the crisis codes.
    pub exo_strength: f64,
    /// Number of trailing alphabet codes that form the crisis codes.
    pub n_crisis_codes: usize,
    pub change_point_prob: f64,
    /// Weight of the crisis codes in the distress regime.
    pub distress_mix: f64,
    /// Per-code `(mu, sigma)` of the log-normal amount; a default ramp when absent.
    pub amount_params: Option<Vec<(f64, f64)>>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_clients: 1000,
            min_len: 100,
            max_len: 300,
            n_mcc: 20,
            n_regimes: 4,
            transitions: None,
            coupling: 0.9,
            exo_switch_rate: 1.0 / 45.0,
            exo_strength: 0.35,
            n_crisis_codes: 3,
            change_point_prob: 0.5,
            distress_mix: 0.35,
            amount_params: None,
        }
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::invalid(format!("{name} = {v} must lie in [0, 1]")));
    }
    Ok(())
}

fn check_matrix(m: &Matrix, n: usize) -> Result<()> {
    if m.len() != n || m.iter().any(|r| r.len() != n) {
        return Err(Error::invalid(format!("transition matrix must be {n}x{n}")));
    }
    for (i, row) in m.iter().enumerate() {
        if row.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::invalid(format!("transition row {i} has a negative or non-finite entry")));
        }
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("transition row {i} sums to {s}")));
        }
    }
    Ok(())
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_mcc == 0 {
            return Err(Error::invalid("empty MCC alphabet"));
        }
        if self.n_regimes == 0 {
            return Err(Error::invalid("at least one regime is required"));
        }
        if self.n_clients == 0 {
            return Err(Error::invalid("at least one client is required"));
        }
        if self.min_len < 2 || self.min_len > self.max_len {
            return Err(Error::invalid(format!("length range [{}, {}] is invalid", self.min_len, self.max_len)));
        }
        if self.n_crisis_codes == 0 || self.n_crisis_codes > self.n_mcc {
            return Err(Error::invalid("crisis code count must be in [1, n_mcc]"));
        }
        check_unit("coupling", self.coupling)?;
        check_unit("exo_strength", self.exo_strength)?;
        check_unit("change_point_prob", self.change_point_prob)?;
        check_unit("distress_mix", self.distress_mix)?;
        if !(self.exo_switch_rate >= 0.0) || !self.exo_switch_rate.is_finite() {
            return Err(Error::invalid("exo_switch_rate must be finite and non-negative"));
        }
        if let Some(ts) = &self.transitions {
            if ts.len() != self.n_regimes {
                return Err(Error::invalid(format!("{} matrices for {} regimes", ts.len(), self.n_regimes)));
            }
            for m in ts {
                check_matrix(m, self.n_mcc)?;
            }
        }
        if let Some(a) = &self.amount_params {
            if a.len() != self.n_mcc || a.iter().any(|&(mu, s)| !mu.is_finite() || !(s > 0.0) || !s.is_finite()) {
                return Err(Error::invalid("amount parameters must give a finite mu and positive sigma per code"));
            }
        }
        Ok(())
    }

    /// Raw code of alphabet entry `k`.
    pub fn mcc_code(k: usize) -> i64 {
        MCC_CODES.get(k).copied().unwrap_or(9000 + k as i64)
    }

    pub fn crisis_codes(&self) -> std::ops::Range<usize> {
        self.n_mcc - self.n_crisis_codes..self.n_mcc
    }

    /// Base transition matrices: each row puts half its mass on a
    /// regime-specific successor and half on a regime-specific profile.
    pub fn regime_matrices(&self, seed: u64) -> Result<Vec<Matrix>> {
        self.validate()?;
        if let Some(ts) = &self.transitions {
            return Ok(ts.clone());
        }
        let n = self.n_mcc;
        let mut rng = stream(seed, "synthetic.regimes");
        let exp = Exp::new(1.0).map_err(|e| Error::invalid(e.to_string()))?;
        let mut out = Vec::with_capacity(self.n_regimes);
        for _ in 0..self.n_regimes {
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            let raw: Vec<f64> = (0..n).map(|_| exp.sample(&mut rng)).collect();
            let total: f64 = raw.iter().sum();
            let profile: Vec<f64> = raw.iter().map(|v| v / total).collect();
            let m: Matrix = (0..n)
                .map(|k| {
                    let mut row: Vec<f64> = profile.iter().map(|p| 0.5 * p).collect();
                    row[perm[k]] += 0.5;
                    row
                })
                .collect();
            out.push(m);
        }
        Ok(out)
    }

    /// `base` blended with the uniform distribution over crisis codes.
    pub fn distress_matrix(&self, base: &Matrix) -> Matrix {
        let crisis = self.crisis_codes();
        let w = 1.0 / self.n_crisis_codes as f64;
        base.iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(j, &p)| (1.0 - self.distress_mix) * p + if crisis.contains(&j) { self.distress_mix * w } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    fn amount_param(&self, k: usize) -> (f64, f64) {
        match &self.amount_params {
            Some(a) => a[k],
            None => (1.5 + 4.0 * k as f64 / self.n_mcc as f64, 0.6),
        }
    }
}

/// Shared calm/crisis state over wall-clock time.
#[derive(Clone, Debug, PartialEq)]
pub struct ExogenousTimeline {
    /// Switch instants in seconds, increasing; the state starts calm.
    pub switches: Vec<i64>,
}

impl ExogenousTimeline {
    pub fn generate(config: &SyntheticConfig, seed: u64) -> Result<Self> {
        let mut rng = stream(seed, "synthetic.exogenous");
        let horizon = EPOCH_START + (10 + 4 * config.max_len as i64) * SECONDS_PER_DAY;
        let mut switches = Vec::new();
        if config.exo_switch_rate > 0.0 {
            let exp = Exp::new(config.exo_switch_rate).map_err(|e| Error::invalid(e.to_string()))?;
            let mut t = EPOCH_START as f64;
            loop {
                t += exp.sample(&mut rng) * SECONDS_PER_DAY as f64;
                if t >= horizon as f64 {
                    break;
                }
                switches.push(t as i64);
            }
        }
        Ok(Self { switches })
    }

    pub fn in_crisis(&self, ts: i64) -> bool {
        self.switches.partition_point(|&s| s <= ts) % 2 == 1
    }
}

fn draw(row: &[f64], rng: &mut Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (j, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return j;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Synthetic population with regime-driven codes, a shared exogenous
/// crisis signal and optional planted change points.
pub fn generate_synthetic(config: &SyntheticConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let base = config.regime_matrices(seed)?;
    let distress: Vec<Matrix> = base.iter().map(|m| config.distress_matrix(m)).collect();
    let timeline = ExogenousTimeline::generate(config, seed)?;
    let crisis = config.crisis_codes();
    let gap = Exp::new(1.0).map_err(|e| Error::invalid(e.to_string()))?;
    let amounts: Vec<LogNormal<f64>> = (0..config.n_mcc)
        .map(|k| {
            let (mu, s) = config.amount_param(k);
            LogNormal::new(mu, s).map_err(|e| Error::invalid(e.to_string()))
        })
        .collect::<Result<_>>()?;

    let mut sequences = Vec::with_capacity(config.n_clients);
    for c in 0..config.n_clients {
        let mut rng = stream(seed ^ (c as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15), "synthetic.client");
        let regime = rng.random_range(0..config.n_regimes);
        let label = if rng.random::<f64>() < config.coupling { regime % 2 } else { rng.random_range(0..2) };
        let len = rng.random_range(config.min_len..=config.max_len);

        let mut tau = None;
        let mut post = &base[regime];
        let mut distressed = false;
        if rng.random::<f64>() < config.change_point_prob {
            let lo = (len / 4).max(1);
            let hi = (3 * len / 4).max(lo);
            tau = Some(rng.random_range(lo..=hi).min(len - 1));
            if config.n_regimes == 1 || rng.random::<f64>() < 0.5 {
                post = &distress[regime];
                distressed = true;
            } else {
                let mut other = rng.random_range(0..config.n_regimes - 1);
                if other >= regime {
                    other += 1;
                }
                post = &base[other];
            }
        }

        let mut ts = EPOCH_START + rng.random_range(0..3 * SECONDS_PER_DAY);
        let mut prev = rng.random_range(0..config.n_mcc);
        let mut txns = Vec::with_capacity(len);
        for j in 0..len {
            if j > 0 {
                let g = (gap.sample(&mut rng) * SECONDS_PER_DAY as f64) as i64;
                ts += g.max(1);
                let matrix = if tau.is_some_and(|t| j >= t) { post } else { &base[regime] };
                prev = draw(&matrix[prev], &mut rng);
            }
            if timeline.in_crisis(ts) && rng.random::<f64>() < config.exo_strength {
                prev = crisis.start + rng.random_range(0..config.n_crisis_codes);
            }
            let amount = (amounts[prev].sample(&mut rng) * 100.0).round() / 100.0;
            txns.push(Transaction::new(ts, SyntheticConfig::mcc_code(prev), amount));
        }

        let mut seq = ClientSequence::new(format!("c{c:05}"), txns);
        seq.label = Some(label);
        seq.local_labels = Some(match (tau, distressed) {
            (Some(t), true) => (0..len).map(|j| u8::from(j >= t)).collect(),
            _ => vec![0; len],
        });
        seq.change_points = tau.map(|t| vec![t]);
        sequences.push(seq);
    }
    let mut ds = Dataset::new(sequences, Provenance::Synthetic)?;
    ds.meta.n_classes = 2;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::bigram_next_mcc_accuracy;

    fn small() -> SyntheticConfig {
        SyntheticConfig { n_clients: 40, min_len: 20, max_len: 60, ..Default::default() }
    }

    #[test]
    fn generation_is_a_pure_function_of_config_and_seed() {
        let a = generate_synthetic(&small(), 5).unwrap();
        let b = generate_synthetic(&small(), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&small(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn sequences_are_well_formed() {
        let cfg = small();
        let d = generate_synthetic(&cfg, 1).unwrap();
        assert_eq!(d.len(), cfg.n_clients);
        for s in &d.sequences {
            assert!((cfg.min_len..=cfg.max_len).contains(&s.len()));
            assert!(s.transactions.windows(2).all(|w| w[1].timestamp > w[0].timestamp));
            assert_eq!(s.local_labels.as_ref().unwrap().len(), s.len());
            s.validate().unwrap();
        }
        for m in cfg.regime_matrices(1).unwrap() {
            check_matrix(&m, cfg.n_mcc).unwrap();
            check_matrix(&cfg.distress_matrix(&m), cfg.n_mcc).unwrap();
        }
    }

    #[test]
    fn zero_change_point_probability_plants_none() {
        let cfg = SyntheticConfig { change_point_prob: 0.0, ..small() };
        let d = generate_synthetic(&cfg, 2).unwrap();
        assert!(d.sequences.iter().all(|s| s.change_points.is_none()));
        assert!(d.sequences.iter().all(|s| s.local_labels.as_ref().unwrap().iter().all(|&v| v == 0)));
    }

    #[test]
    fn permutation_transitions_are_fully_predictable() {
        let n = 6;
        let perm: Matrix = (0..n).map(|k| (0..n).map(|j| f64::from(u8::from(j == (k + 1) % n))).collect()).collect();
        let cfg = SyntheticConfig {
            n_mcc: n,
            n_regimes: 1,
            transitions: Some(vec![perm]),
            exo_strength: 0.0,
            change_point_prob: 0.0,
            n_crisis_codes: 1,
            ..small()
        };
        let d = generate_synthetic(&cfg, 3).unwrap();
        let (train, test) = d.sequences.split_at(30);
        assert_eq!(bigram_next_mcc_accuracy(train, test).unwrap(), 1.0);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(generate_synthetic(&SyntheticConfig { n_mcc: 0, ..small() }, 0).is_err());
        assert!(generate_synthetic(&SyntheticConfig { coupling: 1.5, ..small() }, 0).is_err());
        let bad = vec![vec![vec![0.5, 0.4], vec![0.5, 0.5]]];
        let cfg = SyntheticConfig { n_mcc: 2, n_regimes: 1, n_crisis_codes: 1, transitions: Some(bad), ..small() };
        assert!(generate_synthetic(&cfg, 0).is_err());
    }

    #[test]
    fn distress_labels_follow_the_change_point() {
        let d = generate_synthetic(&SyntheticConfig { change_point_prob: 1.0, ..small() }, 4).unwrap();
        let mut distressed = 0;
        for s in &d.sequences {
            let tau = s.change_points.as_ref().unwrap()[0];
            let l = s.local_labels.as_ref().unwrap();
            assert!(l[..tau].iter().all(|&v| v == 0));
            if l[tau] == 1 {
                distressed += 1;
                assert!(l[tau..].iter().all(|&v| v == 1));
            }
        }
        assert!(distressed > 5 && distressed < 35, "{distressed}");
    }

    #[test]
    fn timeline_alternates() {
        let t = ExogenousTimeline { switches: vec![10, 20] };
        assert!(!t.in_crisis(5));
        assert!(t.in_crisis(10));
        assert!(t.in_crisis(19));
        assert!(!t.in_crisis(20));
    }
}
