use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::numeric::{adam_step, init_glorot, AdamConfig, AdamState, ParamStore, Tape, Tensor};
use crate::rng::stream;

/// Downstream two-layer perceptron settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HeadConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 128, epochs: 10, batch_size: 512, lr: 1e-2 }
    }
}

/// Trained head with the input standardisation fitted on its training rows.
#[derive(Clone, Debug)]
pub struct MlpHead {
    mean: Vec<f64>,
    scale: Vec<f64>,
    params: ParamStore,
}

fn to_matrix(rows: &[Vec<f64>], mean: &[f64], scale: &[f64]) -> Result<Tensor> {
    let d = mean.len();
    let mut data = Vec::with_capacity(rows.len() * d);
    for r in rows {
        if r.len() != d {
            return Err(Error::Shape(format!("feature row of width {} where {d} expected", r.len())));
        }
        data.extend(r.iter().zip(mean.iter().zip(scale)).map(|(v, (m, s))| (v - m) / s));
    }
    Tensor::matrix(rows.len(), d, data)
}

impl MlpHead {
    pub fn fit(x: &[Vec<f64>], y: &[usize], n_classes: usize, cfg: &HeadConfig, seed: u64) -> Result<Self> {
        if x.is_empty() || x.len() != y.len() {
            return Err(Error::invalid(format!("head needs matching nonempty rows, got {} and {}", x.len(), y.len())));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= n_classes) {
            return Err(Error::invalid(format!("label {bad} outside {n_classes} classes")));
        }
        let d = x[0].len();
        let n = x.len() as f64;
        let mut mean = vec![0.0; d];
        x.iter().for_each(|r| r.iter().zip(mean.iter_mut()).for_each(|(v, m)| *m += v / n));
        let mut scale = vec![0.0; d];
        x.iter().for_each(|r| r.iter().zip(&mean).zip(scale.iter_mut()).for_each(|((v, m), s)| *s += (v - m).powi(2) / n));
        scale.iter_mut().for_each(|s| *s = if *s > 1e-24 { s.sqrt() } else { 1.0 });
        let features = to_matrix(x, &mean, &scale)?;

        let mut rng = stream(seed, "head.init");
        let mut params = ParamStore::new();
        params.insert("w1", init_glorot(&mut rng, d, cfg.hidden));
        params.insert("b1", Tensor::zeros(&[1, cfg.hidden]));
        params.insert("w2", init_glorot(&mut rng, cfg.hidden, n_classes));
        params.insert("b2", Tensor::zeros(&[1, n_classes]));
        let mut head = Self { mean, scale, params };

        let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        let mut order: Vec<usize> = (0..x.len()).collect();
        let mut order_rng = stream(seed, "head.order");
        for _ in 0..cfg.epochs {
            order.shuffle(&mut order_rng);
            for chunk in order.chunks(cfg.batch_size.max(1)) {
                let mut tape = Tape::new();
                let bind = head.params.bind(&mut tape, true);
                let mut batch = Vec::with_capacity(chunk.len() * d);
                chunk.iter().for_each(|&i| batch.extend_from_slice(features.row_slice(i)));
                let xb = tape.constant(Tensor::matrix(chunk.len(), d, batch)?);
                let logits = head.logits(&mut tape, &bind, xb)?;
                let targets: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
                let loss = tape.cross_entropy(logits, &targets)?;
                let grads = bind.named_grads(&tape.backward(loss)?);
                adam_step(&mut head.params, &grads, &mut adam)?;
            }
        }
        Ok(head)
    }

    fn logits(&self, tape: &mut Tape, bind: &crate::numeric::Binding, x: crate::numeric::NodeId) -> Result<crate::numeric::NodeId> {
        let a = tape.matmul(x, bind.get("w1")?)?;
        let a = tape.add(a, bind.get("b1")?)?;
        let a = tape.relu(a)?;
        let b = tape.matmul(a, bind.get("w2")?)?;
        tape.add(b, bind.get("b2")?)
    }

    /// Class probabilities per row.
    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if x.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let bind = self.params.bind(&mut tape, false);
        let rows = tape.constant(to_matrix(x, &self.mean, &self.scale)?);
        let logits = self.logits(&mut tape, &bind, rows)?;
        let p = tape.softmax(logits)?;
        let v = tape.value(p);
        Ok((0..v.rows()).map(|r| v.row_slice(r).to_vec()).collect())
    }
}

/// Index of the largest entry, earliest on ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
