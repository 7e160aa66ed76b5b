use crate::numeric::{init_glorot, Binding, NodeId, ParamStore, Tape, Tensor};
use crate::error::Result;
use crate::rng::Rng;

const GATES: [&str; 3] = ["z", "r", "h"];

/// Adds input weights `w_*`, recurrent weights `u_*` and biases `b_*` for
/// the update, reset and candidate gates under `prefix`.
pub fn init_gru(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut Rng) {
    for g in GATES {
        store.insert(format!("{prefix}.w_{g}"), init_glorot(rng, input, hidden));
        store.insert(format!("{prefix}.u_{g}"), init_glorot(rng, hidden, hidden));
        store.insert(format!("{prefix}.b_{g}"), Tensor::zeros(&[1, hidden]));
    }
}

/// Nodes of one GRU's parameters.
#[derive(Clone, Copy, Debug)]
pub struct GruNodes {
    pub w: [NodeId; 3],
    pub u: [NodeId; 3],
    pub b: [NodeId; 3],
}

impl GruNodes {
    pub fn resolve(bind: &Binding, prefix: &str) -> Result<Self> {
        let get = |kind: &str, i: usize| bind.get(&format!("{prefix}.{kind}_{}", GATES[i]));
        Ok(Self {
            w: [get("w", 0)?, get("w", 1)?, get("w", 2)?],
            u: [get("u", 0)?, get("u", 1)?, get("u", 2)?],
            b: [get("b", 0)?, get("b", 1)?, get("b", 2)?],
        })
    }
}

/// `x W_g + b_g` for every gate; `x` may stack many time steps.
fn input_projections(tape: &mut Tape, p: &GruNodes, x: NodeId) -> Result<[NodeId; 3]> {
    let mut out = [x; 3];
    for i in 0..3 {
        let xw = tape.matmul(x, p.w[i])?;
        out[i] = tape.add(xw, p.b[i])?;
    }
    Ok(out)
}

/// One recurrence given input projections. `mask` is a `B x 1` column of
/// 0/1 values; rows with 0 keep their previous state.
fn step(tape: &mut Tape, p: &GruNodes, xp: [NodeId; 3], h: NodeId, mask: Option<NodeId>) -> Result<NodeId> {
    let hz = tape.matmul(h, p.u[0])?;
    let z_pre = tape.add(xp[0], hz)?;
    let z = tape.sigmoid(z_pre)?;
    let hr = tape.matmul(h, p.u[1])?;
    let r_pre = tape.add(xp[1], hr)?;
    let r = tape.sigmoid(r_pre)?;
    let rh = tape.mul(r, h)?;
    let hh = tape.matmul(rh, p.u[2])?;
    let c_pre = tape.add(xp[2], hh)?;
    let cand = tape.tanh(c_pre)?;
    let diff = tape.sub(cand, h)?;
    let mut upd = tape.mul(z, diff)?;
    if let Some(m) = mask {
        upd = tape.mul(upd, m)?;
    }
    tape.add(h, upd)
}

/// Single GRU update `h' = (1 - z) h + z h~` for a batch of rows.
pub fn gru_cell(tape: &mut Tape, p: &GruNodes, x: NodeId, h: NodeId) -> Result<NodeId> {
    let xp = input_projections(tape, p, x)?;
    step(tape, p, xp, h, None)
}

/// Runs the GRU over time-major inputs `x` (`steps * batch` rows) from
/// `h0` (`batch x hidden`) and returns the time-major stacked states.
/// `lengths[b]` bounds the valid steps of row `b`; later steps carry the
/// state forward unchanged.
pub fn gru_run(
    tape: &mut Tape,
    p: &GruNodes,
    x: NodeId,
    h0: NodeId,
    lengths: &[usize],
    steps: usize,
) -> Result<NodeId> {
    let batch = lengths.len();
    let xp = input_projections(tape, p, x)?;
    let mut h = h0;
    let mut states = Vec::with_capacity(steps);
    for t in 0..steps {
        let mut xt = [x; 3];
        for i in 0..3 {
            xt[i] = tape.slice(xp[i], 0, t * batch, batch)?;
        }
        let mask = if lengths.iter().all(|&l| t < l) {
            None
        } else {
            let m: Vec<f64> = lengths.iter().map(|&l| if t < l { 1.0 } else { 0.0 }).collect();
            Some(tape.constant(Tensor::column(&m)))
        };
        h = step(tape, p, xt, h, mask)?;
        states.push(h);
    }
    tape.concat(&states, 0)
}
