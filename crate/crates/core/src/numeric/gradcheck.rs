use super::tape::{NodeId, Tape};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Gradients smaller than this in magnitude are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

/// Largest relative disagreement between the tape gradient of `f` at `point`
/// and central finite differences with step `eps`.
///
/// `f` receives a fresh tape and the node holding the point, and must return
/// a scalar node. The relative error per coordinate is
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn grad_check<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let x = tape.variable(point.clone());
    let loss = f(&mut tape, x)?;
    let grads = tape.backward(loss)?;
    let analytic = grads.get(x).ok_or_else(|| Error::invalid("point lost its gradient"))?.clone();

    let eval = |p: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p);
        let out = f(&mut tape, x)?;
        Ok(tape.value(out).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..point.len() {
        let mut plus = point.clone();
        plus.data_mut()[i] += eps;
        let mut minus = point.clone();
        minus.data_mut()[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
