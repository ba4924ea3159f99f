use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::matrix::Tensor2;
use super::params::{ParamId, ParamStore};
use super::tape::{Graph, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Linear,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
            Activation::Linear => x,
        }
    }

    pub fn record(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Relu => g.relu(x),
            Activation::Linear => x,
        }
    }
}

/// Two-layer perceptron `act(x W1 + b1) W2 + b2`, applied row by row.
/// Parameters live in a [`ParamStore`]; the struct only records their ids.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mlp2 {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub activation: Activation,
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
}

impl Mlp2 {
    /// Glorot-normal weights, zero biases.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        (input, hidden, output): (usize, usize, usize),
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let w1 = store.add(format!("{prefix}.w1"), glorot(input, hidden, rng));
        let b1 = store.add(format!("{prefix}.b1"), Tensor2::zeros(1, hidden));
        let w2 = store.add(format!("{prefix}.w2"), glorot(hidden, output, rng));
        let b2 = store.add(format!("{prefix}.b2"), Tensor2::zeros(1, output));
        Self { w1, b1, w2, b2, activation, input, hidden, output }
    }

    /// Square MLP whose weights are identity matrices and biases zero. With a
    /// linear activation it is exactly the identity map.
    pub fn identity(store: &mut ParamStore, prefix: &str, width: usize, activation: Activation) -> Self {
        let w1 = store.add(format!("{prefix}.w1"), Tensor2::identity(width));
        let b1 = store.add(format!("{prefix}.b1"), Tensor2::zeros(1, width));
        let w2 = store.add(format!("{prefix}.w2"), Tensor2::identity(width));
        let b2 = store.add(format!("{prefix}.b2"), Tensor2::zeros(1, width));
        Self { w1, b1, w2, b2, activation, input: width, hidden: width, output: width }
    }

    /// Re-attaches to slots named `{prefix}.*` in an existing store.
    pub fn bind(store: &ParamStore, prefix: &str, activation: Activation) -> Option<Self> {
        let w1 = store.find(&format!("{prefix}.w1"))?;
        let b1 = store.find(&format!("{prefix}.b1"))?;
        let w2 = store.find(&format!("{prefix}.w2"))?;
        let b2 = store.find(&format!("{prefix}.b2"))?;
        let (input, hidden) = store.value(w1).shape();
        let output = store.value(w2).cols();
        Some(Self { w1, b1, w2, b2, activation, input, hidden, output })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        assert_eq!(g.value(x).cols(), self.input, "Mlp2 expects {} input columns", self.input);
        let w1 = g.param(store, self.w1);
        let b1 = g.param(store, self.b1);
        let w2 = g.param(store, self.w2);
        let b2 = g.param(store, self.b2);
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = self.activation.record(g, h);
        let y = g.matmul(h, w2);
        g.add_row(y, b2)
    }

    /// Tape-free evaluation.
    pub fn eval(&self, store: &ParamStore, x: &Tensor2) -> Tensor2 {
        assert_eq!(x.cols(), self.input, "Mlp2 expects {} input columns", self.input);
        let mut h = x.matmul(store.value(self.w1));
        add_bias(&mut h, store.value(self.b1));
        let act = self.activation;
        let h = h.map(|v| act.apply(v));
        let mut y = h.matmul(store.value(self.w2));
        add_bias(&mut y, store.value(self.b2));
        y
    }
}

pub(crate) fn add_bias(m: &mut Tensor2, bias: &Tensor2) {
    assert_eq!(bias.shape(), (1, m.cols()));
    let b = bias.data().to_vec();
    for i in 0..m.rows() {
        for (x, bi) in m.row_mut(i).iter_mut().zip(&b) {
            *x += bi;
        }
    }
}

pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor2 {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor2::from_fn(fan_in, fan_out, |_, _| normal.sample(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn eval_matches_recorded_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mlp = Mlp2::new(&mut store, "m", (3, 5, 2), Activation::Tanh, &mut rng);
        let x = Tensor2::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.4);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = mlp.forward(&mut g, &store, xv);
        let direct = mlp.eval(&store, &x);
        assert!(g.value(y).sub(&direct).max_abs() < 1e-14);
    }

    #[test]
    fn linear_identity_is_identity() {
        let mut store = ParamStore::new();
        let mlp = Mlp2::identity(&mut store, "id", 3, Activation::Linear);
        let x = Tensor2::from_fn(2, 3, |i, j| (i * 3 + j) as f64);
        assert_eq!(mlp.eval(&store, &x), x);
    }
}
