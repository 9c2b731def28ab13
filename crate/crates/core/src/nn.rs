//! Layers built on the autodiff tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tape, Var};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::tensor::Mat;

/// Uniform `[-bound, bound]` initialisation with `bound = 1/sqrt(fan_in)`.
pub fn uniform_init(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Mat {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect())
}

/// Dropout switch threaded through forward passes. Evaluation uses [`Dropout::off`].
pub struct Dropout<'a> {
    p: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn train(p: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn apply(&mut self, t: &mut Tape<'_>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(rng) if self.p > 0.0 => t.dropout(x, self.p, rng),
            _ => x,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), group, uniform_init(rng, in_dim, out_dim, in_dim));
        let bias = store.add(format!("{name}.bias"), group, uniform_init(rng, 1, out_dim, in_dim));
        Self { weight, bias, in_dim, out_dim }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let w = t.param(self.weight);
        let b = t.param(self.bias);
        let y = t.matmul(x, w);
        t.add_row(y, b)
    }

    pub fn zero(&self, store: &mut ParamStore) {
        store.get_mut(self.weight).data_mut().fill(0.0);
        store.get_mut(self.bias).data_mut().fill(0.0);
    }
}

/// `Linear -> ReLU -> dropout -> Linear`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp2 {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp2 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        dims: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (i, h, o) = dims;
        Self {
            hidden: Linear::new(store, &format!("{name}.fc1"), group, i, h, rng),
            output: Linear::new(store, &format!("{name}.fc2"), group, h, o, rng),
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var, drop: &mut Dropout<'_>) -> Var {
        let h = self.hidden.forward(t, x);
        let h = t.relu(h);
        let h = drop.apply(t, h);
        self.output.forward(t, h)
    }

    pub fn forward_mat(&self, store: &ParamStore, x: &Mat) -> Mat {
        let mut t = Tape::new(store);
        let xv = t.constant(x.clone());
        let y = self.forward(&mut t, xv, &mut Dropout::off());
        t.value(y).clone()
    }
}

/// Gated recurrent unit cell:
///
/// ```text
/// r  = σ(x Wir + bir + h Whr + bhr)
/// z  = σ(x Wiz + biz + h Whz + bhz)
/// n  = tanh(x Win + bin + r ⊙ (h Whn + bhn))
/// h' = (1 - z) ⊙ n + z ⊙ h
/// ```
///
/// The three gates share one `in×3h` input matrix and one `h×3h` hidden
/// matrix, sliced as `[r | z | n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GruCell {
    pub w_input: ParamId,
    pub w_hidden: ParamId,
    pub b_input: ParamId,
    pub b_hidden: ParamId,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h3 = 3 * hidden_dim;
        Self {
            w_input: store.add(format!("{name}.w_input"), group, uniform_init(rng, input_dim, h3, hidden_dim)),
            w_hidden: store.add(format!("{name}.w_hidden"), group, uniform_init(rng, hidden_dim, h3, hidden_dim)),
            b_input: store.add(format!("{name}.b_input"), group, uniform_init(rng, 1, h3, hidden_dim)),
            b_hidden: store.add(format!("{name}.b_hidden"), group, uniform_init(rng, 1, h3, hidden_dim)),
            input_dim,
            hidden_dim,
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var, h: Var) -> Var {
        let d = self.hidden_dim;
        let (wi, wh, bi, bh) = (t.param(self.w_input), t.param(self.w_hidden), t.param(self.b_input), t.param(self.b_hidden));
        let gx = t.matmul(x, wi);
        let gx = t.add_row(gx, bi);
        let gh = t.matmul(h, wh);
        let gh = t.add_row(gh, bh);
        let (xr, hr) = (t.slice_cols(gx, 0, d), t.slice_cols(gh, 0, d));
        let (xz, hz) = (t.slice_cols(gx, d, d), t.slice_cols(gh, d, d));
        let (xn, hn) = (t.slice_cols(gx, 2 * d, d), t.slice_cols(gh, 2 * d, d));
        let r = t.add(xr, hr);
        let r = t.sigmoid(r);
        let z = t.add(xz, hz);
        let z = t.sigmoid(z);
        let rn = t.mul(r, hn);
        let n = t.add(xn, rn);
        let n = t.tanh(n);
        // n + z ⊙ (h - n)
        let diff = t.sub(h, n);
        let zd = t.mul(z, diff);
        t.add(n, zd)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), group, Mat::filled(1, dim, 1.0)),
            beta: store.add(format!("{name}.beta"), group, Mat::zeros(1, dim)),
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Var {
        let n = t.row_norm(x, Self::EPS);
        let g = t.param(self.gamma);
        let b = t.param(self.beta);
        let y = t.mul_row(n, g);
        t.add_row(y, b)
    }
}

/// Query/key/value/output projections around [`Tape::attention`].
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    /// Projects queries of width `query_dim` and keys/values of width
    /// `key_dim` to `width`, which `heads` must divide.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        group: ParamGroup,
        query_dim: usize,
        key_dim: usize,
        width: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(heads > 0 && width % heads == 0, "{heads} heads do not divide width {width}");
        Self {
            query: Linear::new(store, &format!("{name}.q"), group, query_dim, width, rng),
            key: Linear::new(store, &format!("{name}.k"), group, key_dim, width, rng),
            value: Linear::new(store, &format!("{name}.v"), group, key_dim, width, rng),
            output: Linear::new(store, &format!("{name}.out"), group, width, width, rng),
            heads,
        }
    }

    /// Returns `(output, attention node)`; the attention node exposes weights.
    pub fn forward(&self, t: &mut Tape<'_>, queries: Var, keys: Var, offsets: Vec<usize>) -> (Var, Var) {
        let q = self.query.forward(t, queries);
        let k = self.key.forward(t, keys);
        let v = self.value.forward(t, keys);
        let att = t.attention(q, k, v, offsets, self.heads);
        (self.output.forward(t, att), att)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use rand::SeedableRng;

    #[test]
    fn gru_scalar_case_matches_hand_evaluated_gates() {
        // 1×1 weights chosen by hand; expected value evaluated from the gate
        // formulas directly.
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cell = GruCell::new(&mut store, "gru", ParamGroup::Model, 1, 1, &mut rng);
        *store.get_mut(cell.w_input) = Mat::row_vector(vec![0.5, -0.3, 0.8]);
        *store.get_mut(cell.w_hidden) = Mat::row_vector(vec![0.2, 0.4, -0.6]);
        *store.get_mut(cell.b_input) = Mat::row_vector(vec![0.1, 0.0, -0.2]);
        *store.get_mut(cell.b_hidden) = Mat::row_vector(vec![0.0, 0.05, 0.3]);
        let (x, h) = (0.7_f64, -0.4_f64);
        let r = sigmoid(0.5 * x + 0.1 + 0.2 * h + 0.0);
        let z = sigmoid(-0.3 * x + 0.0 + 0.4 * h + 0.05);
        let n = (0.8 * x - 0.2 + r * (-0.6 * h + 0.3)).tanh();
        let expected = (1.0 - z) * n + z * h;

        let mut t = Tape::new(&store);
        let xv = t.constant(Mat::scalar(x));
        let hv = t.constant(Mat::scalar(h));
        let out = cell.forward(&mut t, xv, hv);
        assert!((t.value(out).item() - expected).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", ParamGroup::Model, 4);
        let mut t = Tape::new(&store);
        let x = t.constant(Mat::row_vector(vec![1.0, 2.0, 3.0, 10.0]));
        let y = ln.forward(&mut t, x);
        let v = t.value(y).data();
        let mean: f64 = v.iter().sum::<f64>() / 4.0;
        let var: f64 = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }
}
