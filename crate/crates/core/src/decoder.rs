//! Link scoring, link loss and the node-classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::{NodeId, TemporalGraph};
use crate::nn::{Dropout, Mlp2};
use crate::params::{ParamGroup, ParamStore};
use crate::tensor::Mat;

/// Probabilities are clamped into `[CLAMP, 1 - CLAMP]` before taking logs.
pub const CLAMP: f64 = 1e-7;

/// `(i in j's last n counterparts before t, j in i's last n counterparts before t)`.
pub fn recurrence_bits(g: &TemporalGraph, i: NodeId, j: NodeId, t: f64, n: usize) -> (bool, bool) {
    let nb = g.neighbors();
    (nb.recent(j, t, n).any(|e| e.counterpart == i), nb.recent(i, t, n).any(|e| e.counterpart == j))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decoder {
    pub mlp: Mlp2,
    pub dim: usize,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Self { mlp: Mlp2::new(store, "decoder", ParamGroup::Model, (2 * dim + 2, dim, 1), rng), dim }
    }

    /// Pre-sigmoid scores for rows `hi[k] ‖ hj[k] ‖ bits[k]`.
    pub fn logits(&self, t: &mut Tape<'_>, hi: Var, hj: Var, bits: &[(bool, bool)]) -> Var {
        let b = Mat::from_vec(bits.len(), 2, bits.iter().flat_map(|&(a, c)| [a as u8 as f64, c as u8 as f64]).collect());
        let b = t.constant(b);
        let x = t.concat_cols(&[hi, hj, b]);
        self.mlp.forward(t, x, &mut Dropout::off())
    }

    pub fn link_probability(&self, store: &ParamStore, hi: &[f64], hj: &[f64], bits: (bool, bool)) -> Result<f64> {
        if hi.iter().chain(hj).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding passed to the link decoder".into()));
        }
        let mut t = Tape::new(store);
        let a = t.constant(Mat::row_vector(hi.to_vec()));
        let b = t.constant(Mat::row_vector(hj.to_vec()));
        let l = self.logits(&mut t, a, b, &[bits]);
        Ok(crate::autograd::sigmoid(t.value(l).item()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinkLoss {
    pub sum: f64,
    pub mean: f64,
    /// How many probabilities had to be clamped.
    pub clamped: usize,
}

/// `Σ −ln p_pos − ln(1 − p_neg)` over events.
pub fn link_loss(p_pos: &[f64], p_neg: &[f64]) -> Result<LinkLoss> {
    if p_pos.len() != p_neg.len() {
        return Err(Error::Shape(format!("{} positive vs {} negative probabilities", p_pos.len(), p_neg.len())));
    }
    let mut clamped = 0;
    let mut clamp = |p: f64| {
        if p < CLAMP || p > 1.0 - CLAMP {
            clamped += 1;
            log::warn!("clamping probability {p}");
        }
        p.clamp(CLAMP, 1.0 - CLAMP)
    };
    let mut sum = 0.0;
    for (&a, &b) in p_pos.iter().zip(p_neg) {
        sum += -clamp(a).ln() - (1.0 - clamp(b)).ln();
    }
    let mean = if p_pos.is_empty() { 0.0 } else { sum / p_pos.len() as f64 };
    Ok(LinkLoss { sum, mean, clamped })
}

/// Binary node-label head trained on frozen embeddings. Owns its parameters.
#[derive(Clone, Debug)]
pub struct NodeClassifier {
    pub store: ParamStore,
    pub mlp: Mlp2,
}

impl NodeClassifier {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mlp = Mlp2::new(&mut store, "classifier", ParamGroup::Model, (dim, dim, 1), &mut rng);
        Self { store, mlp }
    }

    pub fn probabilities(&self, h: &Mat) -> Vec<f64> {
        self.mlp.forward_mat(&self.store, h).data().iter().map(|&x| crate::autograd::sigmoid(x)).collect()
    }
}

/// Element-wise mean of the given rows.
pub fn mean_embedding(rows: &[&[f64]]) -> Option<Vec<f64>> {
    let first = rows.first()?;
    let mut out = vec![0.0; first.len()];
    for r in rows {
        for (o, x) in out.iter_mut().zip(r.iter()) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|x| *x /= rows.len() as f64);
    Some(out)
}
