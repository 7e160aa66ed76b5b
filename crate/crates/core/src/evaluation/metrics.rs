use crate::error::{Error, Result};

/// Fraction of predictions equal to their label.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if labels.is_empty() {
        return Err(Error::invalid("accuracy of an empty set"));
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / labels.len() as f64)
}

fn check_binary(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::invalid(format!("score {s} is not a number")));
    }
    Ok(())
}

/// Probability that a random positive outscores a random negative, ties
/// counted one half (midrank form).
pub fn roc_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("roc-auc undefined: only one class present"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the rank sum keeps midranks integral.
    let mut rank2_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let midrank2 = (i + 1 + j + 1) as u128;
        for &k in &order[i..=j] {
            if labels[k] {
                rank2_sum += midrank2;
            }
        }
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = rank2_sum - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Average precision: precision at every distinct threshold weighted by the
/// recall gained there.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_binary(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::invalid("pr-auc undefined: no positive labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut ap) = (0usize, 0usize, 0.0);
    let mut i = 0;
    while i < order.len() {
        let mut gained = 0;
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            gained += usize::from(labels[order[j]]);
            j += 1;
        }
        tp += gained;
        seen += j - i;
        if gained > 0 {
            ap += (gained as f64 / pos as f64) * (tp as f64 / seen as f64);
        }
        i = j;
    }
    Ok(ap)
}

/// One-vs-rest `metric` over the classes present in `labels`, weighted by
/// class support. Two-class problems use the class-1 column alone.
pub fn weighted_ovr(
    probs: &[Vec<f64>],
    labels: &[usize],
    metric: fn(&[f64], &[bool]) -> Result<f64>,
) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape(format!("{} score rows for {} labels", probs.len(), labels.len())));
    }
    let k = probs[0].len();
    if probs.iter().any(|p| p.len() != k) || labels.iter().any(|&l| l >= k) {
        return Err(Error::Shape("score rows and labels disagree on the class count".into()));
    }
    if k == 2 {
        let s: Vec<f64> = probs.iter().map(|p| p[1]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == 1).collect();
        return metric(&s, &y);
    }
    let mut support = vec![0usize; k];
    labels.iter().for_each(|&l| support[l] += 1);
    if support.iter().filter(|&&c| c > 0).count() < 2 {
        return Err(Error::invalid("metric undefined: only one class present"));
    }
    let mut total = 0.0;
    for c in (0..k).filter(|&c| support[c] > 0) {
        let s: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let y: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        total += support[c] as f64 * metric(&s, &y)?;
    }
    Ok(total / labels.len() as f64)
}

/// Mean and, for two or more runs, sample standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricStat {
    pub mean: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub std: Option<f64>,
}

impl MetricStat {
    pub fn from_runs(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.len() > 1)
            .then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt());
        Some(Self { mean, std })
    }
}
