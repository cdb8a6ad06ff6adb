//! Parameter storage, dense layers, a gated recurrent cell and Adam.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::tape::{Gradients, Matrix, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(usize);

/// Named, ordered collection of trainable matrices.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn squared_norm(&self) -> f64 {
        self.values.iter().flat_map(|m| m.iter()).map(|x| x * x).sum()
    }

    /// SHA-256 over names, shapes and the exact bit patterns of all values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, m) in self.iter() {
            h.update(name.as_bytes());
            h.update((m.nrows() as u64).to_le_bytes());
            h.update((m.ncols() as u64).to_le_bytes());
            for x in m.iter() {
                h.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Records every parameter on `tape` as a trainable leaf.
    pub fn bind(&self, tape: &Tape) -> Bound {
        Bound(self.values.iter().map(|m| tape.leaf(m.clone())).collect())
    }

    /// Records every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &Tape) -> Bound {
        Bound(self.values.iter().map(|m| tape.constant(m.clone())).collect())
    }

    /// Gradients for every parameter, zeros where the loss did not depend on it.
    pub fn gradients(&self, bound: &Bound, grads: &Gradients) -> Vec<Matrix> {
        self.values
            .iter()
            .zip(&bound.0)
            .map(|(m, v)| grads.get_or_zeros(*v, m.dim()))
            .collect()
    }
}

/// Tape handles for every parameter of a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
}

pub fn glorot(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    uniform(rows, cols, (6.0 / (rows + cols) as f64).sqrt(), rng)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Identity,
}

impl Activation {
    pub fn apply(self, tape: &Tape, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(s) => tape.leaky_relu(x, s),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// `x W + b` with `W: [in x out]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), glorot(in_dim, out_dim, rng));
        let bias = bias.then(|| store.add(format!("{name}.bias"), Matrix::zeros((1, out_dim))));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Matrix::zeros((in_dim, out_dim)));
        let bias = Some(store.add(format!("{name}.bias"), Matrix::zeros((1, out_dim))));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, bound.var(self.weight));
        match self.bias {
            Some(b) => tape.add_row(y, bound.var(b)),
            None => y,
        }
    }
}

/// Stack of dense layers with a shared hidden activation and a linear output.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, activation }
    }

    pub fn forward(&self, tape: &Tape, bound: &Bound, mut x: Var) -> Var {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(tape, bound, x);
            if i < last {
                x = self.activation.apply(tape, x);
            }
        }
        x
    }

    pub fn output_layer(&self) -> &Linear {
        self.layers.last().expect("mlp has at least one layer")
    }
}

/// One direction of an LSTM with separate gate matrices over `[h_{t-1}, x_t]`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_i: ParamId,
    pub w_f: ParamId,
    pub w_o: ParamId,
    pub w_c: ParamId,
    pub b_i: ParamId,
    pub b_f: ParamId,
    pub b_o: ParamId,
    pub b_c: ParamId,
}

pub struct LstmStep {
    pub h: Var,
    pub c: Var,
    pub gates: [Var; 3],
}

impl LstmCell {
    /// Gate weights are stored as `[d_k x d_h]` with `d_k = d_h + d_f` so that
    /// `[h, x] W` yields a row per sequence. Forget bias starts at 1.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let d_k = input_dim + hidden_dim;
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut mat = |gate: &str, rng: &mut ChaCha8Rng| {
            store.add(format!("{name}.w_{gate}"), uniform(d_k, hidden_dim, bound, rng))
        };
        let w_i = mat("i", rng);
        let w_f = mat("f", rng);
        let w_o = mat("o", rng);
        let w_c = mat("c", rng);
        let b_i = store.add(format!("{name}.b_i"), Matrix::zeros((1, hidden_dim)));
        let b_f = store.add(format!("{name}.b_f"), Matrix::ones((1, hidden_dim)));
        let b_o = store.add(format!("{name}.b_o"), Matrix::zeros((1, hidden_dim)));
        let b_c = store.add(format!("{name}.b_c"), Matrix::zeros((1, hidden_dim)));
        Self {
            input_dim,
            hidden_dim,
            w_i,
            w_f,
            w_o,
            w_c,
            b_i,
            b_f,
            b_o,
            b_c,
        }
    }

    /// `x: [n x d_f]`, `h, c: [n x d_h]`.
    pub fn step(&self, tape: &Tape, bound: &Bound, x: Var, h: Var, c: Var) -> LstmStep {
        let hx = tape.concat_cols(&[h, x]);
        let gate = |w: ParamId, b: ParamId| tape.add_row(tape.matmul(hx, bound.var(w)), bound.var(b));
        let i = tape.sigmoid(gate(self.w_i, self.b_i));
        let f = tape.sigmoid(gate(self.w_f, self.b_f));
        let o = tape.sigmoid(gate(self.w_o, self.b_o));
        let cand = tape.tanh(gate(self.w_c, self.b_c));
        let c_new = tape.add(tape.mul(f, c), tape.mul(i, cand));
        let h_new = tape.mul(o, tape.tanh(c_new));
        LstmStep {
            h: h_new,
            c: c_new,
            gates: [i, f, o],
        }
    }
}

/// Multiplies by a Bernoulli keep-mask scaled by `1 / (1 - rate)`.
pub fn dropout(tape: &Tape, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Var {
    if rate <= 0.0 {
        return x;
    }
    let shape = tape.shape(x);
    let keep = 1.0 - rate;
    let mask = Matrix::from_shape_fn(shape, |_| {
        if rng.random::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = tape.constant(mask);
    tape.mul(x, m)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam over a fixed subset of a store's parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    ids: Vec<ParamId>,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore, ids: Vec<ParamId>) -> Self {
        let m = ids.iter().map(|&id| Matrix::zeros(store.get(id).dim())).collect();
        let v = ids.iter().map(|&id| Matrix::zeros(store.get(id).dim())).collect();
        Self {
            config,
            ids,
            m,
            v,
            t: 0,
        }
    }

    pub fn all(config: AdamConfig, store: &ParamStore) -> Self {
        Self::new(config, store, store.ids().collect())
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// `grads` is indexed like the full store. When `ascend` is set the update
    /// moves along the gradient instead of against it.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], ascend: bool) {
        self.t += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let sign = if ascend { 1.0 } else { -1.0 };
        for (k, &id) in self.ids.iter().enumerate() {
            let g = &grads[id.0];
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            ndarray::Zip::from(&mut *m)
                .and(&mut *v)
                .and(store.get_mut(id))
                .and(g)
                .for_each(|m, v, p, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    let step = lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
                    *p += sign * step;
                });
        }
    }
}

pub fn all_finite(grads: &[Matrix]) -> bool {
    grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
}
