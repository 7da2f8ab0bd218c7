//! Dense building blocks with hand-written backward passes, plus the
//! parameter-visiting trait and the Adam optimizer shared by every trainer.
//!
//! All tensors are `Array2<f64>`; biases are `1 x n` rows so broadcasting
//! does the right thing.

use ndarray::{Array2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::rng::Rng as SeededRng;

/// A set of trainable tensors in canonical order.
pub trait Parameters {
    fn named_tensors(&self) -> Vec<(String, &Array2<f64>)>;
    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>>;

    fn num_parameters(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

impl Parameters for Array2<f64> {
    fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        vec![("tensor".to_string(), self)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![self]
    }
}

macro_rules! tuple_parameters {
    ($($name:ident : $idx:tt),+) => {
        impl<$($name: Parameters),+> Parameters for ($($name,)+) {
            fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
                let mut out = Vec::new();
                $(
                    out.extend(self.$idx.named_tensors().into_iter()
                        .map(|(n, t)| (format!("{}.{}", $idx, n), t)));
                )+
                out
            }

            fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
                let mut out = Vec::new();
                $( out.extend(self.$idx.tensors_mut()); )+
                out
            }
        }
    };
}

tuple_parameters!(A: 0, B: 1);
tuple_parameters!(A: 0, B: 1, C: 2);

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array2<f64>,
}

impl Linear {
    /// Uniform in `+-1/sqrt(fan_in)` for weight and bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let bound = if fan_in == 0 {
            0.0
        } else {
            1.0 / (fan_in as f64).sqrt()
        };
        let mut draw = |rows, cols| {
            if bound == 0.0 {
                return Array2::zeros((rows, cols));
            }
            let dist = Uniform::new(-bound, bound).expect("valid bound");
            Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
        };
        let weight = draw(fan_in, fan_out);
        let bias = draw(1, fan_out);
        Self { weight, bias }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Array2::zeros((fan_in, fan_out)),
            bias: Array2::zeros((1, fan_out)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.weight.nrows(), self.weight.ncols())
    }

    pub fn in_dim(&self) -> usize {
        self.weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }

    /// Returns `dx`; accumulates into `grad` when given.
    pub fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: Option<&mut Linear>) -> Array2<f64> {
        if let Some(g) = grad {
            g.weight += &x.t().dot(dy);
            g.bias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        dy.dot(&self.weight.t())
    }

    fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((format!("{prefix}.weight"), &self.weight));
        out.push((format!("{prefix}.bias"), &self.bias));
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Array2<f64>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

impl Parameters for Linear {
    fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        self.push_named("linear", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        self.push_mut(&mut out);
        out
    }
}

pub(crate) fn push_linear<'a>(lin: &'a Linear, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
    lin.push_named(prefix, out);
}

pub(crate) fn push_linear_mut<'a>(lin: &'a mut Linear, out: &mut Vec<&'a mut Array2<f64>>) {
    lin.push_mut(out);
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array2<f64>,
    pub beta: Array2<f64>,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array2::ones((1, dim)),
            beta: Array2::zeros((1, dim)),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            gamma: Array2::zeros(self.gamma.raw_dim()),
            beta: Array2::zeros(self.beta.raw_dim()),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, LayerNormCache) {
        let f = x.ncols() as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(x.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / f;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / f;
            let s = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|v| v * s);
            inv_std.push(s);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(&self, cache: &LayerNormCache, dy: &Array2<f64>, grad: Option<&mut LayerNorm>) -> Array2<f64> {
        if let Some(g) = grad {
            g.gamma += &(dy * &cache.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
            g.beta += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let f = dy.ncols() as f64;
        let dxhat = dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for (i, (mut out, (dh, xh))) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows().into_iter().zip(cache.xhat.rows()))
            .enumerate()
        {
            let sum_d = dh.sum();
            let sum_dx = dh.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>();
            let s = cache.inv_std[i] / f;
            Zip::from(&mut out)
                .and(&dh)
                .and(&xh)
                .for_each(|o, &d, &x| *o = s * (f * d - sum_d - x * sum_dx));
        }
        dx
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Row-wise softmax.
pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    out
}

/// Mean cross-entropy of row-softmax(`logits`) against `labels`, with the
/// gradient with respect to `logits`.
pub fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = labels.len() as f64;
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss -= grad[[i, y]].max(f64::MIN_POSITIVE).ln();
        grad[[i, y]] -= 1.0;
    }
    grad.mapv_inplace(|g| g / n);
    (loss / n, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam without weight decay. Moment buffers are matched to parameters by
/// position in [`Parameters::tensors_mut`].
#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    step: i32,
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) {
        let grads = grads.named_tensors();
        let mut params = params.tensors_mut();
        assert_eq!(params.len(), grads.len(), "parameter/gradient count mismatch");
        if self.first.is_empty() {
            self.first = params.iter().map(|p| Array2::zeros(p.raw_dim())).collect();
            self.second = self.first.clone();
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.step);
        let c2 = 1.0 - beta2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].1;
            Zip::from(&mut **p)
                .and(&mut self.first[i])
                .and(&mut self.second[i])
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = beta1 * *m + (1.0 - beta1) * g;
                    *v = beta2 * *v + (1.0 - beta2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Zero-mean Gaussian matrix.
pub fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Array2<f64> {
    let dist = rand_distr::Normal::new(0.0, std.max(0.0)).expect("finite std");
    Array2::from_shape_simple_fn((rows, cols), || {
        if std == 0.0 {
            0.0
        } else {
            dist.sample(rng)
        }
    })
}

pub fn uniform(rows: usize, cols: usize, bound: f64, rng: &mut SeededRng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-bound..=bound))
}

pub fn all_finite(x: &Array2<f64>) -> bool {
    x.iter().all(|v| v.is_finite())
}
