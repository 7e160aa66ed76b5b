use crate::error::{Error, Result};
use crate::numeric::{init_glorot, Binding, NodeId, ParamStore, Tape, Tensor};
use crate::rng::Rng;

/// Additive score for masked keys; its exponent underflows to exactly 0.
const MASKED: f64 = -1e9;
const LN_EPS: f64 = 1e-5;

/// Adds the weights of one post-norm block under `prefix`.
pub fn init_block(store: &mut ParamStore, prefix: &str, d: usize, ffn: usize, rng: &mut Rng) {
    for w in ["wq", "wk", "wv", "wo"] {
        store.insert(format!("{prefix}.{w}"), init_glorot(rng, d, d));
    }
    for b in ["bq", "bk", "bv", "bo", "ln1_b", "ln2_b", "ff_b2"] {
        store.insert(format!("{prefix}.{b}"), Tensor::zeros(&[1, d]));
    }
    store.insert(format!("{prefix}.ln1_g"), Tensor::full(&[1, d], 1.0));
    store.insert(format!("{prefix}.ln2_g"), Tensor::full(&[1, d], 1.0));
    store.insert(format!("{prefix}.ff_w1"), init_glorot(rng, d, ffn));
    store.insert(format!("{prefix}.ff_b1"), Tensor::zeros(&[1, ffn]));
    store.insert(format!("{prefix}.ff_w2"), init_glorot(rng, ffn, d));
}

/// Sinusoidal position table, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for p in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = p as f64 / 10_000f64.powf(2.0 * pair / d as f64);
            data[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![len, d], data).expect("positive dims")
}

/// Output of a block together with the attention weights of every
/// `(instance, head)` pair when requested.
pub struct BlockOutput {
    pub out: NodeId,
    pub weights: Vec<NodeId>,
}

fn affine(tape: &mut Tape, x: NodeId, g: NodeId, b: NodeId) -> Result<NodeId> {
    let s = tape.mul(x, g)?;
    tape.add(s, b)
}

fn linear(tape: &mut Tape, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

/// One block over `lengths.len()` instances stored instance-major in `x`
/// (`len` rows each); keys at positions `>= lengths[b]` are masked.
pub fn block_forward(
    tape: &mut Tape,
    bind: &Binding,
    prefix: &str,
    x: NodeId,
    len: usize,
    lengths: &[usize],
    heads: usize,
    keep_weights: bool,
) -> Result<BlockOutput> {
    let d = tape.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::invalid(format!("hidden size {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let p = |n: &str| bind.get(&format!("{prefix}.{n}"));
    let q = linear(tape, x, p("wq")?, p("bq")?)?;
    let k = linear(tape, x, p("wk")?, p("bk")?)?;
    let v = linear(tape, x, p("wv")?, p("bv")?)?;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut weights = Vec::new();
    let mut per_instance = Vec::with_capacity(lengths.len());
    for (b, &valid) in lengths.iter().enumerate() {
        let qb = tape.slice(q, 0, b * len, len)?;
        let kb = tape.slice(k, 0, b * len, len)?;
        let vb = tape.slice(v, 0, b * len, len)?;
        let mask = (valid < len).then(|| {
            let row: Vec<f64> = (0..len).map(|t| if t < valid { 0.0 } else { MASKED }).collect();
            tape.constant(Tensor::row(&row))
        });
        let mut head_out = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = if heads == 1 { qb } else { tape.slice(qb, 1, h * dh, dh)? };
            let kh = if heads == 1 { kb } else { tape.slice(kb, 1, h * dh, dh)? };
            let vh = if heads == 1 { vb } else { tape.slice(vb, 1, h * dh, dh)? };
            let kt = tape.transpose(kh)?;
            let raw = tape.matmul(qh, kt)?;
            let mut scores = tape.scale(raw, scale)?;
            if let Some(m) = mask {
                scores = tape.add(scores, m)?;
            }
            let a = tape.softmax(scores)?;
            if keep_weights {
                weights.push(a);
            }
            head_out.push(tape.matmul(a, vh)?);
        }
        per_instance.push(tape.concat(&head_out, 1)?);
    }
    let attn = tape.concat(&per_instance, 0)?;
    let attn = linear(tape, attn, p("wo")?, p("bo")?)?;
    let res1 = tape.add(x, attn)?;
    let n1 = tape.layer_norm(res1, LN_EPS)?;
    let x1 = affine(tape, n1, p("ln1_g")?, p("ln1_b")?)?;
    let f1 = linear(tape, x1, p("ff_w1")?, p("ff_b1")?)?;
    let f1 = tape.relu(f1)?;
    let f2 = linear(tape, f1, p("ff_w2")?, p("ff_b2")?)?;
    let res2 = tape.add(x1, f2)?;
    let n2 = tape.layer_norm(res2, LN_EPS)?;
    let out = affine(tape, n2, p("ln2_g")?, p("ln2_b")?)?;
    Ok(BlockOutput { out, weights })
}

/// A single unpadded instance `x` (`length x d`) through one block.
pub fn transformer_block(
    tape: &mut Tape,
    bind: &Binding,
    prefix: &str,
    x: NodeId,
    heads: usize,
) -> Result<BlockOutput> {
    let len = tape.value(x).rows();
    block_forward(tape, bind, prefix, x, len, &[len], heads, true)
}
