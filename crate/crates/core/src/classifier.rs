//! Multinomial logistic regression over node embeddings.

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};
use crate::nn::{cross_entropy, softmax_rows, Adam, AdamConfig, Parameters};

/// L2 coefficient applied to the weights (not the bias).
pub const DEFAULT_L2: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// `N x F`.
    pub weights: Array2<f64>,
    /// `1 x N`.
    pub bias: Array2<f64>,
    pub trained_on: String,
}

impl Classifier {
    pub fn new(n_classes: usize, dim: usize, task_id: impl Into<String>) -> Self {
        Self {
            weights: Array2::zeros((n_classes, dim)),
            bias: Array2::zeros((1, n_classes)),
            trained_on: task_id.into(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.weights.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        Self::new(self.weights.nrows(), self.weights.ncols(), self.trained_on.clone())
    }

    fn check(&self, emb: &Array2<f64>) -> Result<()> {
        if emb.ncols() != self.weights.ncols() {
            return Err(Error::Shape(format!(
                "embeddings have width {}, classifier expects {}",
                emb.ncols(),
                self.weights.ncols()
            )));
        }
        Ok(())
    }

    pub fn logits(&self, emb: &Array2<f64>) -> Result<Array2<f64>> {
        self.check(emb)?;
        Ok(emb.dot(&self.weights.t()) + &self.bias)
    }

    pub fn predict_proba(&self, emb: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(softmax_rows(&self.logits(emb)?))
    }

    pub fn predict(&self, emb: &Array2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(emb)?))
    }

    /// Regularized cross-entropy. Returns `(loss, parameter gradient,
    /// gradient w.r.t. the embeddings)`.
    pub fn loss_and_grad(
        &self,
        emb: &Array2<f64>,
        labels: &[usize],
        l2: f64,
    ) -> Result<(f64, Classifier, Array2<f64>)> {
        let logits = self.logits(emb)?;
        let (ce, dlogits) = cross_entropy(&logits, labels);
        let loss = ce + 0.5 * l2 * self.weights.iter().map(|w| w * w).sum::<f64>();
        let grad = Classifier {
            weights: dlogits.t().dot(emb) + &self.weights * l2,
            bias: dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)),
            trained_on: self.trained_on.clone(),
        };
        let demb = dlogits.dot(&self.weights);
        Ok((loss, grad, demb))
    }

    /// Fits on fixed embeddings with Adam, returning the loss history.
    pub fn fit(&mut self, emb: &Array2<f64>, labels: &[usize], steps: usize, lr: f64, l2: f64) -> Result<Vec<f64>> {
        let mut opt = Adam::new(AdamConfig::with_lr(lr));
        let mut history = Vec::with_capacity(steps);
        for step in 0..steps {
            let (loss, grad, _) = self.loss_and_grad(emb, labels, l2)?;
            if !loss.is_finite() {
                return Err(Error::numerical("classifier fit", step));
            }
            history.push(loss);
            opt.step(self, &grad);
        }
        Ok(history)
    }
}

impl Parameters for Classifier {
    fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        vec![
            ("classifier.weights".to_string(), &self.weights),
            ("classifier.bias".to_string(), &self.bias),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.weights, &mut self.bias]
    }
}

/// Index of the largest entry per row; ties go to the lowest index.
pub fn argmax_rows(x: &Array2<f64>) -> Vec<usize> {
    x.rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = predicted.iter().zip(truth).filter(|(a, b)| a == b).count();
    hits as f64 / truth.len() as f64
}
