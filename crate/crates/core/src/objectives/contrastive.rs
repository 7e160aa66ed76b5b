use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numeric::{Axis, NodeId, Tape, Tensor};
use crate::rng::Rng;

/// Keeps the distance of coincident embeddings differentiable.
const DIST_EPS: f64 = 1e-12;
/// Additive logit that removes a self-similarity entry.
const EXCLUDED: f64 = -1e9;

/// Contiguous `[start, end)` slice of client `client`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubsequenceSample {
    pub client: usize,
    pub start: usize,
    pub end: usize,
}

/// `per_client` random slices of every client long enough for `min_len`;
/// slice lengths are uniform in `[min_len, max_len]`, capped at the client length.
pub fn coles_sample_subsequences(
    lengths: &[usize],
    per_client: usize,
    min_len: usize,
    max_len: usize,
    rng: &mut Rng,
) -> Result<Vec<SubsequenceSample>> {
    if min_len == 0 || min_len > max_len || per_client == 0 {
        return Err(Error::invalid(format!("slice settings {per_client} x [{min_len}, {max_len}] are invalid")));
    }
    let mut out = Vec::with_capacity(lengths.len() * per_client);
    for (client, &len) in lengths.iter().enumerate() {
        if len < min_len {
            log::warn!("client {client}: length {len} below slice minimum {min_len}, skipped");
            continue;
        }
        let hi = max_len.min(len);
        for _ in 0..per_client {
            let l = rng.random_range(min_len..=hi);
            let start = rng.random_range(0..=len - l);
            out.push(SubsequenceSample { client, start, end: start + l });
        }
    }
    Ok(out)
}

/// Divides every row by its Euclidean norm.
pub fn l2_normalize(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let sq = tape.square(x)?;
    let s = tape.sum(sq, Axis::Cols)?;
    let s = tape.add_scalar(s, 1e-12)?;
    let n = tape.sqrt(s)?;
    tape.div(x, n)
}

/// Mean over all pairs of rows: squared distance for pairs with equal tags,
/// squared hinge `max(0, margin - d)` for the rest.
pub fn contrastive_loss(tape: &mut Tape, emb: NodeId, tags: &[usize], margin: f64) -> Result<NodeId> {
    let n = tape.value(emb).rows();
    if n < 2 || tags.len() != n {
        return Err(Error::invalid(format!("contrastive loss needs at least 2 tagged embeddings, got {n}")));
    }
    let (mut left, mut right, mut pos, mut neg) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            left.push(i);
            right.push(j);
            let same = tags[i] == tags[j];
            pos.push(if same { 1.0 } else { 0.0 });
            neg.push(if same { 0.0 } else { 1.0 });
        }
    }
    let pairs = left.len() as f64;
    let a = tape.gather(emb, &left)?;
    let b = tape.gather(emb, &right)?;
    let diff = tape.sub(a, b)?;
    let sq = tape.square(diff)?;
    let d2 = tape.sum(sq, Axis::Cols)?;
    let pos = tape.constant(Tensor::column(&pos));
    let pull = tape.mul(d2, pos)?;
    let d2e = tape.add_scalar(d2, DIST_EPS)?;
    let d = tape.sqrt(d2e)?;
    let neg_d = tape.scale(d, -1.0)?;
    let gap = tape.add_scalar(neg_d, margin)?;
    let hinge = tape.relu(gap)?;
    let hinge = tape.square(hinge)?;
    let neg = tape.constant(Tensor::column(&neg));
    let push = tape.mul(hinge, neg)?;
    let per_pair = tape.add(pull, push)?;
    let total = tape.sum(per_pair, Axis::All)?;
    tape.scale(total, 1.0 / pairs)
}

/// Two crops of one sequence sharing a nonempty overlap, in original positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropPair {
    pub first: (usize, usize),
    pub second: (usize, usize),
    pub overlap: (usize, usize),
}

impl CropPair {
    pub fn overlap_len(&self) -> usize {
        self.overlap.1 - self.overlap.0
    }

    /// Position of overlap index `k` inside each crop.
    pub fn aligned(&self, k: usize) -> (usize, usize) {
        let o = self.overlap.0 + k;
        (o - self.first.0, o - self.second.0)
    }
}

/// Crops with an overlap of exactly `overlap` transactions.
pub fn crops_with_overlap(len: usize, overlap: usize, rng: &mut Rng) -> Result<CropPair> {
    if overlap == 0 || overlap > len {
        return Err(Error::invalid(format!("overlap {overlap} impossible for length {len}")));
    }
    let left = rng.random_range(0..=len - overlap);
    let right = left + overlap;
    let ext_left = rng.random_range(0..=left);
    let ext_right = rng.random_range(right..=len);
    Ok(CropPair { first: (ext_left, right), second: (left, ext_right), overlap: (left, right) })
}

/// Two random crops of a sequence of length `len` with a random overlap.
pub fn ts2vec_contexts(len: usize, rng: &mut Rng) -> Result<CropPair> {
    if len == 0 {
        return Err(Error::invalid("cannot crop an empty sequence"));
    }
    let overlap = rng.random_range(len.min(2)..=len);
    crops_with_overlap(len, overlap, rng)
}

/// Levels of the temporal hierarchy for an overlap of `len`.
pub fn hierarchy_levels(len: usize) -> usize {
    let mut levels = 1;
    let mut l = len;
    while l > 1 {
        l = l.div_ceil(2);
        levels += 1;
    }
    levels
}

fn excluded_diagonal(n: usize) -> Tensor {
    let mut t = Tensor::zeros(&[n, n]);
    for i in 0..n {
        t.data_mut()[i * n + i] = EXCLUDED;
    }
    t
}

/// Cross-entropy of picking each row's counterpart among all other rows of
/// stacked `2k`-row blocks, where row `r` pairs with row `r +- k`.
fn paired_ce(tape: &mut Tape, z: NodeId, blocks: &[Vec<usize>], k: usize) -> Result<NodeId> {
    let mask = tape.constant(excluded_diagonal(2 * k));
    let mut logits = Vec::with_capacity(blocks.len());
    let mut targets = Vec::with_capacity(blocks.len() * 2 * k);
    for rows in blocks {
        let g = tape.gather(z, rows)?;
        let gt = tape.transpose(g)?;
        let s = tape.matmul(g, gt)?;
        logits.push(tape.add(s, mask)?);
        targets.extend((0..2 * k).map(|r| if r < k { r + k } else { r - k }));
    }
    let all = tape.concat(&logits, 0)?;
    tape.cross_entropy(all, &targets)
}

/// Hierarchical contrast of two aligned representation stacks, each
/// `batch * len` rows stored instance-major. At every level the instance
/// term contrasts instances at one timestamp and the temporal term contrasts
/// timestamps within one instance; the time axis is then halved by max
/// pooling (width 2, last odd row kept) until one step remains.
pub fn ts2vec_hierarchical_loss(
    tape: &mut Tape,
    z1: NodeId,
    z2: NodeId,
    batch: usize,
    len: usize,
    alpha: f64,
) -> Result<NodeId> {
    if len == 0 || batch == 0 {
        return Err(Error::invalid("empty overlap"));
    }
    if tape.value(z1).rows() != batch * len || tape.value(z2).rows() != batch * len {
        return Err(Error::Shape(format!("expected {} rows per view", batch * len)));
    }
    let (mut a, mut b, mut l) = (z1, z2, len);
    let mut terms = Vec::new();
    loop {
        let z = tape.concat(&[a, b], 0)?;
        let half = batch * l;
        let mut level = Vec::new();
        if batch > 1 {
            let blocks: Vec<Vec<usize>> = (0..l)
                .map(|t| (0..batch).map(|i| i * l + t).chain((0..batch).map(|i| half + i * l + t)).collect())
                .collect();
            let inst = paired_ce(tape, z, &blocks, batch)?;
            level.push(tape.scale(inst, alpha)?);
        }
        if l > 1 {
            let blocks: Vec<Vec<usize>> = (0..batch)
                .map(|i| (0..l).map(|t| i * l + t).chain((0..l).map(|t| half + i * l + t)).collect())
                .collect();
            let temp = paired_ce(tape, z, &blocks, l)?;
            level.push(tape.scale(temp, 1.0 - alpha)?);
        }
        terms.push(match level.len() {
            0 => tape.constant(Tensor::scalar(0.0)),
            1 => level[0],
            _ => tape.add(level[0], level[1])?,
        });
        if l == 1 {
            break;
        }
        let next = l.div_ceil(2);
        let even: Vec<usize> = (0..batch).flat_map(|i| (0..next).map(move |t| i * l + 2 * t)).collect();
        let odd: Vec<usize> =
            (0..batch).flat_map(|i| (0..next).map(move |t| i * l + (2 * t + 1).min(l - 1))).collect();
        for v in [&mut a, &mut b] {
            let e = tape.gather(*v, &even)?;
            let o = tape.gather(*v, &odd)?;
            *v = tape.maximum(e, o)?;
        }
        l = next;
    }
    let n = terms.len() as f64;
    let stacked = tape.concat(&terms, 0)?;
    let total = tape.sum(stacked, Axis::All)?;
    tape.scale(total, 1.0 / n)
}
