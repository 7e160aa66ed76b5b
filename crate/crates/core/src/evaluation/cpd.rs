use serde::{Deserialize, Serialize};

use super::LocalEmbeddingSeries;
use crate::error::{Error, Result};

/// Shortest segment either side of a detected change.
pub const MIN_SEGMENT: usize = 2;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1 - cos(u, v)`, clamped to `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!("vectors of width {} and {}", u.len(), v.len())));
    }
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (uu, vv) = (dot(u, u), dot(v, v));
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::invalid("cosine distance of a zero-norm vector"));
    }
    // sqrt(s * s) == s exactly, so parallel inputs give exact 0 and 2.
    Ok((1.0 - dot(u, v) / (uu * vv).sqrt()).clamp(0.0, 2.0))
}

/// Squared deviation of `rows` from their mean, measured from the first row
/// so that a constant segment costs exactly zero.
fn segment_cost(rows: &[Vec<f64>]) -> f64 {
    let d = rows[0].len();
    let n = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in &rows[1..] {
        mean.iter_mut().zip(r.iter().zip(&rows[0])).for_each(|(m, (v, f))| *m += v - f);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    rows.iter()
        .map(|r| r.iter().zip(&rows[0]).zip(&mean).map(|((v, f), m)| (v - f - m).powi(2)).sum::<f64>())
        .sum()
}

/// Single change point of an embedding sequence: the split `tau` (first index
/// of the second segment) minimising the summed within-segment cost of the
/// L2-normalised embeddings. Exhaustive over every split leaving two
/// segments of at least [`MIN_SEGMENT`]; the earliest split wins ties.
pub fn detect_change_point(embeddings: &[Vec<f64>]) -> Result<usize> {
    let t = embeddings.len();
    if t < 2 * MIN_SEGMENT {
        return Err(Error::invalid(format!("change point detection needs at least {} embeddings, got {t}", 2 * MIN_SEGMENT)));
    }
    let d = embeddings[0].len();
    let mut unit = Vec::with_capacity(t);
    for e in embeddings {
        if e.len() != d {
            return Err(Error::Shape("embeddings of differing width".into()));
        }
        let n = norm(e);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::invalid("zero-norm or non-finite embedding"));
        }
        unit.push(e.iter().map(|v| v / n).collect::<Vec<f64>>());
    }
    let mut best = (f64::INFINITY, MIN_SEGMENT);
    for tau in MIN_SEGMENT..=t - MIN_SEGMENT {
        let cost = segment_cost(&unit[..tau]) + segment_cost(&unit[tau..]);
        if cost < best.0 {
            best = (cost, tau);
        }
    }
    Ok(best.1)
}

fn check_pairs(predicted: &[usize], truth: &[usize]) -> Result<()> {
    if predicted.len() != truth.len() || truth.is_empty() {
        return Err(Error::Shape(format!("{} detections for {} change points", predicted.len(), truth.len())));
    }
    Ok(())
}

/// Mean lag of detections at or after the true change; early ones count zero.
pub fn detection_delay(predicted: &[usize], truth: &[usize]) -> Result<f64> {
    check_pairs(predicted, truth)?;
    let total: usize = predicted.iter().zip(truth).map(|(&p, &t)| p.saturating_sub(t)).sum();
    Ok(total as f64 / truth.len() as f64)
}

/// Share of detections within `margin` steps of the true change.
pub fn detection_accuracy(predicted: &[usize], truth: &[usize], margin: usize) -> Result<f64> {
    check_pairs(predicted, truth)?;
    let hits = predicted.iter().zip(truth).filter(|(&p, &t)| p.abs_diff(t) <= margin).count();
    Ok(hits as f64 / truth.len() as f64)
}

/// Outcome of single change point detection over a population.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpdResult {
    pub clients: Vec<String>,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
    pub detection_delay: f64,
    /// `(margin, accuracy)` per configured margin.
    pub accuracy: Vec<(usize, f64)>,
}

impl CpdResult {
    pub fn new(clients: Vec<String>, truth: Vec<usize>, predicted: Vec<usize>, margins: &[usize]) -> Result<Self> {
        let detection_delay = detection_delay(&predicted, &truth)?;
        let accuracy = margins
            .iter()
            .map(|&m| detection_accuracy(&predicted, &truth, m).map(|a| (m, a)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { clients, truth, predicted, detection_delay, accuracy })
    }
}

/// Window index of a change at transaction `tau`: the first window whose
/// last transaction is at or after `tau`.
pub fn change_window(series: &LocalEmbeddingSeries, tau: usize) -> Option<usize> {
    series.ends.iter().position(|&end| end > tau)
}

/// Mean cosine distance between paired series at positions `tau + offset`.
/// Each series contributes its latest window ending at or before that
/// position; pairs lacking either embedding are left out of that point,
/// and points without any pair are `None`.
pub fn pair_distance_curve(
    pairs: &[(&LocalEmbeddingSeries, &LocalEmbeddingSeries, usize)],
    offsets: &[i64],
) -> Result<Vec<Option<f64>>> {
    let mut out = Vec::with_capacity(offsets.len());
    for &o in offsets {
        let (mut total, mut count) = (0.0, 0usize);
        for &(a, b, tau) in pairs {
            let pos = tau as i64 + o;
            if pos < 0 {
                continue;
            }
            let (Some(ea), Some(eb)) = (a.latest_at(pos as usize), b.latest_at(pos as usize)) else { continue };
            total += cosine_distance(ea, eb)?;
            count += 1;
        }
        out.push((count > 0).then(|| total / count as f64));
    }
    Ok(out)
}
