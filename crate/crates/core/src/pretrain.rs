//! Label-free pretraining of the graph transformer with two pretexts:
//! attribute reconstruction (MSE through a linear decoder) and structure
//! recovery (MSE of a sigmoid bilinear edge score against 0/1 targets),
//! over personalized-PageRank subgraph mini-batches.
//!
//! Nothing here takes a [`Graph`](crate::graph::Graph): the entry points
//! accept a [`GraphStructure`], which has no labels.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{GTModel, NodeInputs};
use crate::error::{Error, Result};
use crate::graph::GraphStructure;
use crate::nn::{uniform, Adam, AdamConfig, Linear, Parameters};
use crate::ppr::{ppr_subgraph, DEFAULT_MAX_SIZE, DEFAULT_RESTART};
use crate::rng::{rng, Rng as SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_seeds_per_epoch: usize,
    pub subgraph_size: usize,
    pub neg_edge_ratio: f64,
    pub learning_rate: f64,
    pub w_attr: f64,
    pub w_struct: f64,
    pub restart_prob: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_seeds_per_epoch: 8,
            subgraph_size: DEFAULT_MAX_SIZE,
            neg_edge_ratio: 1.0,
            learning_rate: 1e-3,
            w_attr: 1.0,
            w_struct: 1.0,
            restart_prob: DEFAULT_RESTART,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_seeds_per_epoch == 0 || self.subgraph_size == 0 {
            return Err(Error::Config("pretraining counts must be at least 1".into()));
        }
        if self.neg_edge_ratio <= 0.0 || !self.neg_edge_ratio.is_finite() {
            return Err(Error::Config("neg_edge_ratio must be positive".into()));
        }
        if self.w_attr < 0.0 || self.w_struct < 0.0 || self.w_attr + self.w_struct == 0.0 {
            return Err(Error::Config(
                "loss weights must be non-negative and not both zero".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.restart_prob) || self.restart_prob == 0.0 {
            return Err(Error::Config("restart_prob must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// `score(u, v) = sigmoid(e_u^T B e_v)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeScorer {
    pub bilinear: Array2<f64>,
}

impl EdgeScorer {
    pub fn init(dim: usize, rng: &mut SeededRng) -> Self {
        Self {
            bilinear: uniform(dim, dim, 1.0 / dim as f64, rng),
        }
    }

    pub fn score(&self, eu: ndarray::ArrayView1<'_, f64>, ev: ndarray::ArrayView1<'_, f64>) -> f64 {
        sigmoid(eu.dot(&self.bilinear.dot(&ev)))
    }

    /// Scores for `pairs` of row indices into `emb`.
    pub fn score_pairs(&self, emb: &Array2<f64>, pairs: &[(usize, usize)]) -> Vec<f64> {
        let proj = emb.dot(&self.bilinear);
        pairs
            .iter()
            .map(|&(u, v)| sigmoid(proj.row(u).dot(&emb.row(v))))
            .collect()
    }
}

impl Parameters for EdgeScorer {
    fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        vec![("scorer.bilinear".to_string(), &self.bilinear)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        vec![&mut self.bilinear]
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Pretext heads trained jointly with the encoder and dropped afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct PretextHeads {
    /// `F -> F_in`.
    pub decoder: Linear,
    pub scorer: EdgeScorer,
}

impl PretextHeads {
    pub fn init(model: &GTModel, seed: u64) -> Self {
        let mut r = rng(seed ^ 0xdec0de);
        Self {
            decoder: Linear::init(model.config.hidden, model.config.input_dim, &mut r),
            scorer: EdgeScorer::init(model.config.hidden, &mut r),
        }
    }
}

/// Mean over rows of `||x - decoder(e)||^2 / F_in`, with gradients w.r.t.
/// the embeddings and the decoder.
pub fn attribute_loss_grad(emb: &Array2<f64>, attrs: &Array2<f64>, decoder: &Linear) -> (f64, Array2<f64>, Linear) {
    let recon = decoder.forward(emb);
    let diff = recon - attrs;
    let scale = 1.0 / (emb.nrows() as f64 * attrs.ncols().max(1) as f64);
    let loss = diff.iter().map(|d| d * d).sum::<f64>() * scale;
    let drecon = diff * (2.0 * scale);
    let mut grad = decoder.zeros_like();
    let demb = decoder.backward(emb, &drecon, Some(&mut grad));
    (loss, demb, grad)
}

/// Mean over `pairs` of `(score - target)^2`, with gradients w.r.t. the
/// embeddings and the scorer.
pub fn structure_loss_grad(
    emb: &Array2<f64>,
    pairs: &[(usize, usize)],
    targets: &[f64],
    scorer: &EdgeScorer,
) -> Result<(f64, Array2<f64>, EdgeScorer)> {
    if pairs.is_empty() {
        return Err(Error::Config("structure recovery needs at least one pair".into()));
    }
    let n = pairs.len() as f64;
    let proj = emb.dot(&scorer.bilinear);
    let projt = emb.dot(&scorer.bilinear.t());
    let mut demb = Array2::zeros(emb.raw_dim());
    let mut dbil = Array2::zeros(scorer.bilinear.raw_dim());
    let mut loss = 0.0;
    for (&(u, v), &y) in pairs.iter().zip(targets) {
        let s = sigmoid(proj.row(u).dot(&emb.row(v)));
        loss += (s - y).powi(2);
        let ds = 2.0 * (s - y) * s * (1.0 - s) / n;
        // d(e_u^T B e_v) = B e_v for e_u, B^T e_u for e_v, e_u e_v^T for B
        demb.row_mut(u).scaled_add(ds, &projt.row(v));
        demb.row_mut(v).scaled_add(ds, &proj.row(u));
        let eu = emb.row(u).insert_axis(ndarray::Axis(1));
        let ev = emb.row(v).insert_axis(ndarray::Axis(0));
        dbil.scaled_add(ds, &eu.dot(&ev));
    }
    Ok((loss / n, demb, EdgeScorer { bilinear: dbil }))
}

/// Attribute-reconstruction pretext loss on a batch of nodes.
pub fn attribute_reconstruction_loss(
    model: &GTModel,
    decoder: &Linear,
    inputs: &NodeInputs<'_>,
    nodes: &[usize],
) -> Result<f64> {
    let (x, p) = inputs.gather(nodes);
    let e0 = model.embed_rows(&x, &p)?;
    let ed = model.forward(&e0, None)?.nodes;
    let (loss, _, _) = attribute_loss_grad(&ed, &x, decoder);
    finite(loss, "attribute reconstruction", 0)
}

/// Structure-recovery pretext loss; `pos_edges` / `neg_edges` are pairs of
/// global node ids that must all appear in `nodes`.
pub fn structure_recovery_loss(
    model: &GTModel,
    scorer: &EdgeScorer,
    inputs: &NodeInputs<'_>,
    nodes: &[usize],
    pos_edges: &[(usize, usize)],
    neg_edges: &[(usize, usize)],
) -> Result<f64> {
    if pos_edges.is_empty() || neg_edges.is_empty() {
        return Err(Error::Config(
            "structure recovery needs positive and negative pairs".into(),
        ));
    }
    let local: HashMap<usize, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let to_local = |&(u, v): &(usize, usize)| -> Result<(usize, usize)> {
        match (local.get(&u), local.get(&v)) {
            (Some(&a), Some(&b)) => Ok((a, b)),
            _ => Err(Error::Config(format!("pair ({u}, {v}) is outside the batch"))),
        }
    };
    let mut pairs = Vec::new();
    let mut targets = Vec::new();
    for e in pos_edges {
        pairs.push(to_local(e)?);
        targets.push(1.0);
    }
    for e in neg_edges {
        pairs.push(to_local(e)?);
        targets.push(0.0);
    }
    let (x, p) = inputs.gather(nodes);
    let e0 = model.embed_rows(&x, &p)?;
    let ed = model.forward(&e0, None)?.nodes;
    let (loss, _, _) = structure_loss_grad(&ed, &pairs, &targets, scorer)?;
    finite(loss, "structure recovery", 0)
}

fn finite(x: f64, stage: &str, index: usize) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::numerical(stage, index))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: usize,
    pub l_attr: f64,
    pub l_struct: f64,
    pub total: f64,
}

pub struct PretrainOutcome {
    pub model: GTModel,
    pub heads: PretextHeads,
    pub history: Vec<LossRecord>,
}

/// Pretrains `model` for `epochs x batch_seeds_per_epoch` steps, one Adam
/// step per PPR subgraph.
pub fn pretrain(
    structure: &GraphStructure<'_>,
    positions: &Array2<f64>,
    model: GTModel,
    config: &PretrainConfig,
) -> Result<PretrainOutcome> {
    config.validate()?;
    let mut r = rng(config.seed);
    let candidates: Vec<usize> = if config.w_struct > 0.0 && !structure.edges.is_empty() {
        (0..structure.num_nodes)
            .filter(|&u| structure.degree(u) > 0)
            .collect()
    } else {
        (0..structure.num_nodes).collect()
    };
    if candidates.is_empty() {
        return Err(Error::Config("graph has no nodes".into()));
    }
    let steps = config.epochs * config.batch_seeds_per_epoch;
    let batches = (0..steps).map(|_| {
        let seed = candidates[r.random_range(0..candidates.len())];
        ppr_subgraph(structure, seed, config.subgraph_size, config.restart_prob)
    });
    // batch sampling and negative sampling use independent streams
    train_on_batches(structure, positions, model, config, batches)
}

/// Same as [`pretrain`] but over caller-supplied batches.
pub fn pretrain_with_batches(
    structure: &GraphStructure<'_>,
    positions: &Array2<f64>,
    model: GTModel,
    config: &PretrainConfig,
    batches: &[Vec<usize>],
) -> Result<PretrainOutcome> {
    config.validate()?;
    train_on_batches(structure, positions, model, config, batches.iter().cloned())
}

fn train_on_batches(
    structure: &GraphStructure<'_>,
    positions: &Array2<f64>,
    model: GTModel,
    config: &PretrainConfig,
    batches: impl Iterator<Item = Vec<usize>>,
) -> Result<PretrainOutcome> {
    if model.frozen {
        return Err(Error::Contract("cannot pretrain a frozen model".into()));
    }
    if positions.nrows() != structure.num_nodes {
        return Err(Error::Shape(format!(
            "{} positional rows for {} nodes",
            positions.nrows(),
            structure.num_nodes
        )));
    }
    let inputs = NodeInputs {
        features: structure.features,
        positions,
    };
    let heads = PretextHeads::init(&model, config.seed);
    let mut params = (model, heads.decoder, heads.scorer);
    let mut opt = Adam::new(AdamConfig::with_lr(config.learning_rate));
    let mut neg_rng = rng(config.seed ^ 0x6e65_6761_7469_7665);
    let mut history = Vec::new();
    for (step, batch) in batches.enumerate() {
        let (x, p) = inputs.gather(&batch);
        let (model, decoder, scorer) = &params;
        let e0 = model.embed_rows(&x, &p)?;
        let trace = model
            .forward_traced(&e0, None)
            .map_err(|_| Error::numerical("pretraining forward", step))?;
        let ed = trace.output();
        let mut grads = (model.zeros_like(), decoder.zeros_like(), EdgeScorer {
            bilinear: Array2::zeros(scorer.bilinear.raw_dim()),
        });
        let mut ded = Array2::zeros(ed.raw_dim());

        let mut l_attr = 0.0;
        if config.w_attr > 0.0 {
            let (loss, d, g) = attribute_loss_grad(ed, &x, decoder);
            l_attr = loss;
            ded.scaled_add(config.w_attr, &d);
            grads.1.weight.scaled_add(config.w_attr, &g.weight);
            grads.1.bias.scaled_add(config.w_attr, &g.bias);
        }
        let mut l_struct = 0.0;
        if config.w_struct > 0.0 {
            let (pairs, targets) = batch_pairs(structure, &batch, config.neg_edge_ratio, &mut neg_rng);
            if !pairs.is_empty() {
                let (loss, d, g) = structure_loss_grad(ed, &pairs, &targets, scorer)?;
                l_struct = loss;
                ded.scaled_add(config.w_struct, &d);
                grads.2.bilinear.scaled_add(config.w_struct, &g.bilinear);
            }
        }
        let total = config.w_attr * l_attr + config.w_struct * l_struct;
        if !total.is_finite() {
            return Err(Error::numerical("pretraining loss", step));
        }
        history.push(LossRecord {
            step,
            l_attr,
            l_struct,
            total,
        });
        let de0 = model.backward(&trace, &ded, Some(&mut grads.0));
        model.embed_backward(&x, &p, &de0, &mut grads.0);
        opt.step(&mut params, &grads);
    }
    let (model, decoder, scorer) = params;
    Ok(PretrainOutcome {
        model,
        heads: PretextHeads { decoder, scorer },
        history,
    })
}

/// Induced edges of `batch` (local indices, target 1) plus
/// `ceil(ratio * |pos|)` uniformly drawn non-edges (target 0).
fn batch_pairs(
    structure: &GraphStructure<'_>,
    batch: &[usize],
    ratio: f64,
    r: &mut SeededRng,
) -> (Vec<(usize, usize)>, Vec<f64>) {
    let local: HashMap<usize, usize> = batch.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let mut pairs = Vec::new();
    for (i, &u) in batch.iter().enumerate() {
        for &v in &structure.neighbors[u] {
            if let Some(&j) = local.get(&v) {
                if j > i {
                    pairs.push((i, j));
                }
            }
        }
    }
    let positives = pairs.len();
    let mut targets = vec![1.0; positives];
    let b = batch.len();
    let possible_neg = b * (b - 1) / 2 - positives;
    let wanted = ((positives as f64 * ratio).ceil() as usize).min(possible_neg);
    let mut drawn = 0;
    let mut attempts = 0;
    while drawn < wanted && attempts < 100 * wanted.max(1) {
        attempts += 1;
        let i = r.random_range(0..b);
        let j = r.random_range(0..b);
        if i == j || structure.has_edge(batch[i], batch[j]) {
            continue;
        }
        pairs.push((i.min(j), i.max(j)));
        targets.push(0.0);
        drawn += 1;
    }
    (pairs, targets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use crate::graph::Graph;
    use crate::toy;
    use ndarray::array;

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let decoder = Linear {
            weight: Array2::eye(2),
            bias: Array2::zeros((1, 2)),
        };
        let emb = array![[1.0, 2.0], [3.0, -1.0]];
        let (loss, _, _) = attribute_loss_grad(&emb, &emb, &decoder);
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn hand_mse_half() {
        let decoder = Linear::zeros(3, 2);
        let (loss, _, _) = attribute_loss_grad(&array![[0.3, 0.1, 0.2]], &array![[1.0, 0.0]], &decoder);
        assert!((loss - 0.5).abs() < 1e-15);
    }

    #[test]
    fn attribute_loss_matches_direct_mse() {
        let mut r = rng(3);
        let decoder = Linear::init(4, 3, &mut r);
        let emb = uniform(5, 4, 1.0, &mut r);
        let x = uniform(5, 3, 1.0, &mut r);
        let (loss, _, _) = attribute_loss_grad(&emb, &x, &decoder);
        let mut direct = 0.0;
        for i in 0..5 {
            let mut sq = 0.0;
            for j in 0..3 {
                let mut rec = decoder.bias[[0, j]];
                for k in 0..4 {
                    rec += emb[[i, k]] * decoder.weight[[k, j]];
                }
                sq += (x[[i, j]] - rec).powi(2);
            }
            direct += sq / 3.0;
        }
        assert!((loss - direct / 5.0).abs() < 1e-12);
    }

    #[test]
    fn structure_loss_quarter() {
        // zero bilinear form scores every pair at exactly 0.5
        let scorer = EdgeScorer {
            bilinear: Array2::zeros((2, 2)),
        };
        let emb = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let (loss, _, _) = structure_loss_grad(&emb, &[(0, 1), (0, 2)], &[1.0, 0.0], &scorer).unwrap();
        assert!((loss - 0.25).abs() < 1e-15);
    }

    #[test]
    fn structure_loss_matches_enumeration() {
        let mut r = rng(4);
        let scorer = EdgeScorer::init(3, &mut r);
        let emb = uniform(4, 3, 2.0, &mut r);
        let pairs: Vec<_> = (0..4).flat_map(|u| (u + 1..4).map(move |v| (u, v))).collect();
        let targets: Vec<f64> = pairs.iter().map(|&(u, v)| ((u + v) % 2) as f64).collect();
        let (loss, demb, dscorer) = structure_loss_grad(&emb, &pairs, &targets, &scorer).unwrap();
        let brute = |emb: &Array2<f64>, b: &Array2<f64>| -> f64 {
            let mut total = 0.0;
            for (&(u, v), &y) in pairs.iter().zip(&targets) {
                let mut s = 0.0;
                for i in 0..3 {
                    for j in 0..3 {
                        s += emb[[u, i]] * b[[i, j]] * emb[[v, j]];
                    }
                }
                total += (1.0 / (1.0 + (-s).exp()) - y).powi(2);
            }
            total / pairs.len() as f64
        };
        assert!((loss - brute(&emb, &scorer.bilinear)).abs() < 1e-12);
        let h = 1e-6;
        for idx in 0..emb.len() {
            let mut p = emb.clone();
            let mut m = emb.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let num = (brute(&p, &scorer.bilinear) - brute(&m, &scorer.bilinear)) / (2.0 * h);
            assert!((num - demb.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
        for idx in 0..9 {
            let mut p = scorer.bilinear.clone();
            let mut m = scorer.bilinear.clone();
            p.as_slice_mut().unwrap()[idx] += h;
            m.as_slice_mut().unwrap()[idx] -= h;
            let num = (brute(&emb, &p) - brute(&emb, &m)) / (2.0 * h);
            assert!((num - dscorer.bilinear.as_slice().unwrap()[idx]).abs() < 1e-8);
        }
    }

    #[test]
    fn empty_pairs_is_config_error() {
        let scorer = EdgeScorer {
            bilinear: Array2::zeros((2, 2)),
        };
        assert!(matches!(
            structure_loss_grad(&Array2::zeros((2, 2)), &[], &[], &scorer),
            Err(Error::Config(_))
        ));
    }

    fn small_model(input_dim: usize, pos_dim: usize) -> GTModel {
        GTModel::new(ModelConfig {
            input_dim,
            hidden: 16,
            layers: 1,
            heads: 2,
            pos_dim,
            seed: 1,
        })
        .unwrap()
    }

    #[test]
    fn same_seed_same_history() {
        let (g, _) = toy::separable_pair(1);
        let pos = crate::positional::positional_encoding(&g.structure(), 4).unwrap();
        let cfg = PretrainConfig {
            epochs: 3,
            batch_seeds_per_epoch: 2,
            subgraph_size: 12,
            ..Default::default()
        };
        let a = pretrain(&g.structure(), &pos, small_model(4, 4), &cfg).unwrap();
        let b = pretrain(&g.structure(), &pos, small_model(4, 4), &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.model.param_digest(), b.model.param_digest());
        assert_ne!(a.model.param_digest(), small_model(4, 4).param_digest());
        assert_eq!(a.history.len(), 6);
    }

    #[test]
    fn attribute_only_ignores_edges() {
        let (g, _) = toy::separable_pair(2);
        let rewired = Graph::new(
            g.num_nodes(),
            (0..g.num_nodes() - 1).map(|u| (u, u + 1)),
            g.features().clone(),
            g.labels().to_vec(),
        )
        .unwrap();
        let pos = Array2::zeros((g.num_nodes(), 0));
        let cfg = PretrainConfig {
            w_struct: 0.0,
            ..Default::default()
        };
        let batches: Vec<Vec<usize>> = (0..5).map(|i| (i..i + 8).collect()).collect();
        let a = pretrain_with_batches(&g.structure(), &pos, small_model(4, 0), &cfg, &batches).unwrap();
        let b = pretrain_with_batches(&rewired.structure(), &pos, small_model(4, 0), &cfg, &batches).unwrap();
        let la: Vec<f64> = a.history.iter().map(|r| r.l_attr).collect();
        let lb: Vec<f64> = b.history.iter().map(|r| r.l_attr).collect();
        assert_eq!(la, lb);
        assert!(a.history.iter().all(|r| r.l_struct == 0.0));
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = PretrainConfig {
            w_attr: 0.0,
            w_struct: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = PretrainConfig {
            neg_edge_ratio: 0.0,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn frozen_model_refused() {
        let (g, _) = toy::separable_pair(1);
        let pos = Array2::zeros((g.num_nodes(), 0));
        let mut m = small_model(4, 0);
        m.freeze();
        let r = pretrain(&g.structure(), &pos, m, &PretrainConfig::default());
        assert!(matches!(r, Err(Error::Contract(_))));
    }
}
