//! Graph-based pseudo prompt evolution. Source-task prompts are kept in a
//! dictionary; a small module scores how related a prompt is to each entry
//! (cosine of projected mean rows), softmax-normalizes the scores, and adds
//! the weighted, linearly mapped entries to the prompt as a residual.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{accuracy, Classifier, DEFAULT_L2};
use crate::encoder::{GTModel, NodeInputs};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Adam, AdamConfig, Linear, Parameters};
use crate::rng::{derive_seed, rng};
use crate::sampling::FewShotTask;
use crate::vnt::{self, InitMode, PromptTensor, VNTConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct DictionaryEntry {
    pub task_id: String,
    pub prompt: PromptTensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptDictionary {
    pub entries: Vec<DictionaryEntry>,
    /// Hash of the VNT configuration the prompts were tuned with.
    pub vnt_config_hash: String,
}

impl PromptDictionary {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn prompts(&self) -> Vec<&PromptTensor> {
        self.entries.iter().map(|e| &e.prompt).collect()
    }

    /// Hex SHA-256 over task ids, shapes and prompt values in order.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.vnt_config_hash.as_bytes());
        for e in &self.entries {
            crate::encoder::digest_tensor(&mut h, &e.task_id, &e.prompt);
        }
        hex::encode(h.finalize())
    }

    fn validate(&self) -> Result<()> {
        let first = self
            .entries
            .first()
            .ok_or_else(|| Error::Config("prompt dictionary is empty".into()))?;
        let shape = first.prompt.dim();
        if let Some(bad) = self.entries.iter().find(|e| e.prompt.dim() != shape) {
            return Err(Error::Shape(format!(
                "dictionary entry {} has shape {:?}, expected {:?}",
                bad.task_id,
                bad.prompt.dim(),
                shape
            )));
        }
        Ok(())
    }
}

/// Tunes one prompt per source task on its support set alone; tasks run in
/// parallel.
pub fn build_dictionary(
    gt: &GTModel,
    inputs: &NodeInputs<'_>,
    source_tasks: &[FewShotTask],
    config: &VNTConfig,
) -> Result<PromptDictionary> {
    if source_tasks.is_empty() {
        return Err(Error::Config("need at least one source task".into()));
    }
    config.validate()?;
    let entries = source_tasks
        .par_iter()
        .map(|task| {
            let support_only = FewShotTask {
                query: Vec::new(),
                ..task.clone()
            };
            let prompt = vnt::init_prompt(gt, inputs, &support_only, config)
                .and_then(|p| {
                    let classifier = vnt::init_classifier(gt, &support_only, config.seed);
                    vnt::tune(gt, inputs, &support_only, p, classifier, config)
                })
                .map_err(|e| Error::DictionaryBuild {
                    task_id: task.task_id.clone(),
                    source: Box::new(e),
                })?
                .prompt;
            Ok(DictionaryEntry {
                task_id: task.task_id.clone(),
                prompt,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let dict = PromptDictionary {
        entries,
        vnt_config_hash: config.config_hash(),
    };
    dict.validate()?;
    Ok(dict)
}

/// Two-layer projection `F -> F_h -> F_m` with a tanh between.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    pub first: Linear,
    pub second: Linear,
}

impl Theta {
    pub fn init(dim: usize, hidden: usize, out: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        Self {
            first: Linear::init(dim, hidden, &mut r),
            second: Linear::init(hidden, out, &mut r),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            first: self.first.zeros_like(),
            second: self.second.zeros_like(),
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        self.second.forward(&self.first.forward(x).mapv(f64::tanh))
    }

    fn backward(&self, x: &Array2<f64>, dy: &Array2<f64>, grad: &mut Theta) {
        let pre = self.first.forward(x);
        let hidden = pre.mapv(f64::tanh);
        let dh = self.second.backward(&hidden, dy, Some(&mut grad.second));
        let dpre = dh * hidden.mapv(|t| 1.0 - t * t);
        self.first.backward(x, &dpre, Some(&mut grad.first));
    }
}

impl Parameters for Theta {
    fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        crate::nn::push_linear(&self.first, "theta.first", &mut out);
        crate::nn::push_linear(&self.second, "theta.second", &mut out);
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        crate::nn::push_linear_mut(&mut self.first, &mut out);
        crate::nn::push_linear_mut(&mut self.second, &mut out);
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GPPEModule {
    pub theta: Theta,
    /// `F x F` value map; refinement adds `entry * L^T`.
    pub value: Array2<f64>,
    pub psi: Classifier,
    pub trained: bool,
    pub seed: u64,
    /// Content hash of the dictionary used for training.
    pub dictionary_hash: String,
}

impl GPPEModule {
    /// Fresh module: seeded projection, zero value map (refinement starts
    /// as the identity), small random classifier.
    pub fn init(dim: usize, n_way: usize, seed: u64) -> Self {
        let mut psi = Classifier::new(n_way, dim, "gppe");
        psi.weights = gaussian(n_way, dim, 0.01, &mut rng(derive_seed(seed, 7)));
        Self {
            theta: Theta::init(dim, dim, dim, derive_seed(seed, 6)),
            value: Array2::zeros((dim, dim)),
            psi,
            trained: false,
            seed,
            dictionary_hash: String::new(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            theta: self.theta.zeros_like(),
            value: Array2::zeros(self.value.raw_dim()),
            psi: self.psi.zeros_like(),
            trained: self.trained,
            seed: self.seed,
            dictionary_hash: self.dictionary_hash.clone(),
        }
    }
}

impl Parameters for GPPEModule {
    fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = self.theta.named_tensors();
        out.push(("value".to_string(), &self.value));
        out.extend(self.psi.named_tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = self.theta.tensors_mut();
        out.push(&mut self.value);
        out.extend(self.psi.tensors_mut());
        out
    }
}

fn mean_row(prompt: &PromptTensor) -> Array1<f64> {
    prompt
        .mean_axis(Axis(0))
        .unwrap_or_else(|| Array1::zeros(prompt.ncols()))
}

/// Mean rows of the query prompt followed by each entry, as one matrix.
fn stacked_means(prompt: &PromptTensor, entries: &[&PromptTensor]) -> Array2<f64> {
    let mut rows = Array2::zeros((entries.len() + 1, prompt.ncols()));
    rows.row_mut(0).assign(&mean_row(prompt));
    for (k, e) in entries.iter().enumerate() {
        rows.row_mut(k + 1).assign(&mean_row(e));
    }
    rows
}

fn cosine(x: ndarray::ArrayView1<'_, f64>, y: ndarray::ArrayView1<'_, f64>) -> f64 {
    let nx = x.dot(&x).sqrt();
    let ny = y.dot(&y).sqrt();
    if nx == 0.0 || ny == 0.0 {
        0.0
    } else {
        x.dot(&y) / (nx * ny)
    }
}

/// Cosine between the projected mean row of `prompt` and that of each entry.
pub fn relation_coefficients(prompt: &PromptTensor, entries: &[&PromptTensor], theta: &Theta) -> Result<Vec<f64>> {
    check_entries(prompt, entries)?;
    let projected = theta.forward(&stacked_means(prompt, entries));
    Ok((1..projected.nrows())
        .map(|k| cosine(projected.row(0), projected.row(k)))
        .collect())
}

pub fn attention_weights(coefficients: &[f64]) -> Vec<f64> {
    let max = coefficients.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = coefficients.iter().map(|c| (c - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

fn check_entries(prompt: &PromptTensor, entries: &[&PromptTensor]) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::Config("attention dictionary is empty".into()));
    }
    for e in entries {
        if e.dim() != prompt.dim() {
            return Err(Error::Shape(format!(
                "dictionary entry shape {:?} differs from prompt shape {:?}",
                e.dim(),
                prompt.dim()
            )));
        }
    }
    Ok(())
}

/// `P + sum_k a_k (entry_k L^T)`.
pub fn refine_prompt(prompt: &PromptTensor, entries: &[&PromptTensor], module: &GPPEModule) -> Result<PromptTensor> {
    Ok(refine_with_weights(prompt, entries, module)?.0)
}

fn refine_with_weights(
    prompt: &PromptTensor,
    entries: &[&PromptTensor],
    module: &GPPEModule,
) -> Result<(PromptTensor, Vec<f64>)> {
    let f = prompt.ncols();
    if module.value.dim() != (f, f) || module.theta.first.in_dim() != f {
        return Err(Error::Shape(format!(
            "module expects width {}, prompt has width {f}",
            module.value.nrows()
        )));
    }
    let weights = attention_weights(&relation_coefficients(prompt, entries, &module.theta)?);
    let mut mixed = Array2::zeros(prompt.raw_dim());
    for (e, &a) in entries.iter().zip(&weights) {
        mixed.scaled_add(a, *e);
    }
    Ok((prompt + &mixed.dot(&module.value.t()), weights))
}

/// Accumulates into `grad` the gradients of theta and L given the
/// gradient `d_refined` of the refined prompt.
fn refine_backward(
    prompt: &PromptTensor,
    entries: &[&PromptTensor],
    module: &GPPEModule,
    d_refined: &Array2<f64>,
    grad: &mut GPPEModule,
) {
    let means = stacked_means(prompt, entries);
    let projected = module.theta.forward(&means);
    let u = projected.row(0);
    let coeffs: Vec<f64> = (1..projected.nrows())
        .map(|k| cosine(u, projected.row(k)))
        .collect();
    let weights = attention_weights(&coeffs);

    let mut mixed = Array2::zeros(prompt.raw_dim());
    for (e, &a) in entries.iter().zip(&weights) {
        mixed.scaled_add(a, *e);
    }
    grad.value += &d_refined.t().dot(&mixed);

    // d_refined . (entry_k L^T) = (d_refined L) . entry_k
    let dl = d_refined.dot(&module.value);
    let da: Vec<f64> = entries.iter().map(|e| (&dl * *e).sum()).collect();
    let mean_da: f64 = weights.iter().zip(&da).map(|(a, d)| a * d).sum();
    let dc: Vec<f64> = weights.iter().zip(&da).map(|(a, d)| a * (d - mean_da)).collect();

    let mut dproj = Array2::zeros(projected.raw_dim());
    let nu = u.dot(&u).sqrt();
    for (k, &g) in dc.iter().enumerate() {
        let v = projected.row(k + 1);
        let nv = v.dot(&v).sqrt();
        if nu == 0.0 || nv == 0.0 || g == 0.0 {
            continue;
        }
        let cos = coeffs[k];
        let du = (&v / (nu * nv)) - &(&u * (cos / (nu * nu)));
        let dv = (&u / (nu * nv)) - &(&v * (cos / (nv * nv)));
        dproj.row_mut(0).scaled_add(g, &du);
        dproj.row_mut(k + 1).scaled_add(g, &dv);
    }
    module.theta.backward(&means, &dproj, &mut grad.theta);
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GPPEConfig {
    pub episodes: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for GPPEConfig {
    fn default() -> Self {
        Self {
            episodes: 1000,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Pseudo-task cross-entropy on the query set of `task` after refining
/// `dictionary[m]` against the other entries, with gradients for
/// theta, L and psi.
pub fn episode_loss_grad(
    gt: &GTModel,
    inputs: &NodeInputs<'_>,
    module: &GPPEModule,
    dictionary: &PromptDictionary,
    m: usize,
    task: &FewShotTask,
) -> Result<(f64, GPPEModule)> {
    let own = &dictionary.entries[m].prompt;
    let others: Vec<&PromptTensor> = dictionary
        .entries
        .iter()
        .enumerate()
        .filter(|&(k, _)| k != m)
        .map(|(_, e)| &e.prompt)
        .collect();
    let (refined, _) = refine_with_weights(own, &others, module)?;
    let e0 = gt.embed(inputs, &task.context_nodes())?;
    let trace = gt.forward_traced(&e0, Some(&refined))?;
    let n_support = task.support.len();
    let n_query = task.query.len();
    let query_rows = trace
        .node_rows()
        .slice(ndarray::s![n_support..n_support + n_query, ..])
        .to_owned();
    let (loss, psi_grad, demb) = module.psi.loss_and_grad(&query_rows, &task.query_labels(), DEFAULT_L2)?;
    let mut dout = Array2::zeros(trace.output().raw_dim());
    dout.slice_mut(ndarray::s![n_support..n_support + n_query, ..])
        .assign(&demb);
    let dinput = gt.backward(&trace, &dout, None);
    let d_refined = dinput.slice(ndarray::s![e0.nrows().., ..]).to_owned();
    let mut grad = module.zeros_like();
    grad.psi = psi_grad;
    refine_backward(own, &others, module, &d_refined, &mut grad);
    Ok((loss, grad))
}

pub struct GPPETraining {
    pub module: GPPEModule,
    pub history: Vec<f64>,
}

/// Episodic training of theta, L and psi. Each episode treats one source
/// task as the pseudo target, visiting tasks round-robin over a seeded
/// shuffle, and refines its prompt against the remaining entries.
pub fn train_gppe(
    gt: &GTModel,
    inputs: &NodeInputs<'_>,
    dictionary: &PromptDictionary,
    source_tasks: &[FewShotTask],
    config: &GPPEConfig,
) -> Result<GPPETraining> {
    if !gt.frozen {
        return Err(Error::Contract("GPPE training requires a frozen graph transformer".into()));
    }
    let m = dictionary.len();
    if m < 2 {
        return Err(Error::Config(format!("GPPE training needs at least 2 dictionary entries, got {m}")));
    }
    if source_tasks.len() != m {
        return Err(Error::Config(format!(
            "{} source tasks for {m} dictionary entries",
            source_tasks.len()
        )));
    }
    dictionary.validate()?;
    let n_way = source_tasks[0].n_way();
    if source_tasks.iter().any(|t| t.n_way() != n_way || t.query.is_empty()) {
        return Err(Error::Config("source tasks must share N and have query nodes".into()));
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut rng(config.seed));

    let mut module = GPPEModule::init(gt.hidden(), n_way, config.seed);
    module.dictionary_hash = dictionary.content_hash();
    let mut opt = Adam::new(AdamConfig::with_lr(config.lr));
    let mut history = Vec::with_capacity(config.episodes);
    for episode in 0..config.episodes {
        let idx = order[episode % m];
        let (loss, grad) = episode_loss_grad(gt, inputs, &module, dictionary, idx, &source_tasks[idx])
            .map_err(|_| Error::numerical("GPPE episode", episode))?;
        if !loss.is_finite() {
            return Err(Error::numerical("GPPE episode", episode));
        }
        history.push(loss);
        opt.step(&mut module, &grad);
    }
    module.trained = true;
    Ok(GPPETraining { module, history })
}

#[derive(Debug, Clone)]
pub struct DeployOutcome {
    pub base_prompt: PromptTensor,
    pub refined_prompt: PromptTensor,
    pub attention: Vec<f64>,
    pub classifier: Classifier,
    pub query_predictions: Vec<usize>,
    pub support_accuracy: f64,
    pub query_accuracy: f64,
}

/// Tunes the target prompt with prototype initialization, refines it with
/// the full dictionary, fits a fresh classifier on the refined embeddings
/// of the support set and predicts the query set.
pub fn deploy(
    gt: &GTModel,
    inputs: &NodeInputs<'_>,
    module: &GPPEModule,
    dictionary: &PromptDictionary,
    task: &FewShotTask,
    config: &VNTConfig,
) -> Result<DeployOutcome> {
    if !module.trained {
        return Err(Error::Contract("GPPE module has not been trained".into()));
    }
    if module.dictionary_hash != dictionary.content_hash() {
        return Err(Error::Contract(
            "dictionary does not match the one the module was trained with".into(),
        ));
    }
    let config = VNTConfig {
        init_mode: InitMode::Prototype,
        ensemble_size: 1,
        ..*config
    };
    let record = vnt::run_task(gt, inputs, task, &config)?;
    let entries = dictionary.prompts();
    let (refined, attention) = refine_with_weights(&record.prompt, &entries, module)?;

    let (classifier, support_pred, query_pred) = vnt::fit_with_fixed_prompt(gt, inputs, task, &refined, &config)?;
    Ok(DeployOutcome {
        base_prompt: record.prompt,
        refined_prompt: refined,
        attention,
        support_accuracy: accuracy(&support_pred, &task.support_labels()),
        query_accuracy: accuracy(&query_pred, &task.query_labels()),
        query_predictions: query_pred,
        classifier,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;

    fn identity_theta(dim: usize) -> Theta {
        // not an exact identity (tanh sits in between) but sign- and
        // support-preserving
        let mut first = Linear::zeros(dim, dim);
        first.weight = Array2::eye(dim);
        let mut second = Linear::zeros(dim, dim);
        second.weight = Array2::eye(dim);
        Theta { first, second }
    }

    fn random_prompt(p: usize, f: usize, seed: u64) -> Array2<f64> {
        gaussian(p, f, 1.0, &mut rng(seed))
    }

    #[test]
    fn self_entry_has_unit_coefficient() {
        let theta = Theta::init(4, 4, 4, 1);
        let p = random_prompt(3, 4, 2);
        let c = relation_coefficients(&p, &[&p], &theta).unwrap();
        assert!((c[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_projections_give_zero() {
        let theta = identity_theta(2);
        let a = ndarray::array![[0.5, 0.0], [0.5, 0.0]];
        let b = ndarray::array![[0.0, 0.3], [0.0, 0.3]];
        let c = relation_coefficients(&a, &[&b], &theta).unwrap();
        assert_eq!(c, vec![0.0]);
    }

    #[test]
    fn zero_vector_gives_zero_coefficient() {
        let theta = identity_theta(2);
        let z = Array2::zeros((2, 2));
        let b = ndarray::array![[0.0, 0.3], [0.1, 0.3]];
        assert_eq!(relation_coefficients(&z, &[&b], &theta).unwrap(), vec![0.0]);
    }

    #[test]
    fn coefficients_match_hand_computation() {
        let theta = Theta::init(3, 3, 3, 9);
        let p = random_prompt(4, 3, 1);
        let es: Vec<Array2<f64>> = (0..3).map(|i| random_prompt(4, 3, 40 + i)).collect();
        let project = |m: &Array2<f64>| -> Vec<f64> {
            let mean: Vec<f64> = (0..3).map(|j| (0..4).map(|i| m[[i, j]]).sum::<f64>() / 4.0).collect();
            let hidden: Vec<f64> = (0..3)
                .map(|o| {
                    let z: f64 = (0..3).map(|i| mean[i] * theta.first.weight[[i, o]]).sum();
                    (z + theta.first.bias[[0, o]]).tanh()
                })
                .collect();
            (0..3)
                .map(|o| (0..3).map(|i| hidden[i] * theta.second.weight[[i, o]]).sum::<f64>() + theta.second.bias[[0, o]])
                .collect()
        };
        let u = project(&p);
        let refs: Vec<&Array2<f64>> = es.iter().collect();
        let got = relation_coefficients(&p, &refs, &theta).unwrap();
        for (k, e) in es.iter().enumerate() {
            let v = project(e);
            let dot: f64 = u.iter().zip(&v).map(|(a, b)| a * b).sum();
            let nu: f64 = u.iter().map(|a| a * a).sum::<f64>().sqrt();
            let nv: f64 = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            assert!((got[k] - dot / (nu * nv)).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_match_direct_softmax() {
        let c = [0.7, -1.2, 0.05, 2.5, -0.3];
        let w = attention_weights(&c);
        let z: f64 = c.iter().map(|x: &f64| x.exp()).sum();
        for (a, x) in w.iter().zip(&c) {
            assert!((a - x.exp() / z).abs() < 1e-14);
        }
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }

    #[test]
    fn refinement_matches_hand_sum() {
        let m = module(3, 2);
        let p = random_prompt(2, 3, 1);
        let es: Vec<Array2<f64>> = (0..3).map(|i| random_prompt(2, 3, 50 + i)).collect();
        let refs: Vec<&Array2<f64>> = es.iter().collect();
        let a = attention_weights(&relation_coefficients(&p, &refs, &m.theta).unwrap());
        let got = refine_prompt(&p, &refs, &m).unwrap();
        for r in 0..2 {
            for j in 0..3 {
                let mut want = p[[r, j]];
                for (k, e) in es.iter().enumerate() {
                    for l in 0..3 {
                        want += a[k] * e[[r, l]] * m.value[[j, l]];
                    }
                }
                assert!((got[[r, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_closed_forms() {
        let w = attention_weights(&[0.3, 0.3, 0.3, 0.3]);
        assert!(w.iter().all(|&x| (x - 0.25).abs() < 1e-15));
        let w = attention_weights(&[2f64.ln(), 0.0]);
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-15 && (w[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    fn module(dim: usize, seed: u64) -> GPPEModule {
        let mut m = GPPEModule::init(dim, 2, seed);
        m.value = gaussian(dim, dim, 0.5, &mut rng(seed + 100));
        m
    }

    #[test]
    fn zero_value_map_is_identity() {
        let mut m = module(4, 1);
        m.value.fill(0.0);
        let p = random_prompt(3, 4, 2);
        let e1 = random_prompt(3, 4, 3);
        let e2 = random_prompt(3, 4, 4);
        assert_eq!(refine_prompt(&p, &[&e1, &e2], &m).unwrap(), p);
    }

    #[test]
    fn single_entry_identity_value() {
        let mut m = module(4, 1);
        m.value = Array2::eye(4);
        let p = random_prompt(3, 4, 2);
        let e = random_prompt(3, 4, 3);
        let r = refine_prompt(&p, &[&e], &m).unwrap();
        assert!((&r - &(&p + &e)).iter().all(|d| d.abs() < 1e-12));
    }

    #[test]
    fn width_mismatch_is_shape_error() {
        let m = module(4, 1);
        let p = random_prompt(3, 5, 2);
        assert!(matches!(refine_prompt(&p, &[&p], &m), Err(Error::Shape(_))));
    }

    #[test]
    fn permutation_invariant() {
        let m = module(4, 1);
        let p = random_prompt(3, 4, 2);
        let es: Vec<Array2<f64>> = (0..4).map(|i| random_prompt(3, 4, 10 + i)).collect();
        let fwd: Vec<&Array2<f64>> = es.iter().collect();
        let rev: Vec<&Array2<f64>> = es.iter().rev().collect();
        let a = refine_prompt(&p, &fwd, &m).unwrap();
        let b = refine_prompt(&p, &rev, &m).unwrap();
        assert!((&a - &b).iter().all(|d| d.abs() < 1e-6));
    }

    #[test]
    fn refine_backward_matches_finite_differences() {
        let m = module(3, 5);
        let p = random_prompt(2, 3, 6);
        let es: Vec<Array2<f64>> = (0..3).map(|i| random_prompt(2, 3, 20 + i)).collect();
        let entries: Vec<&Array2<f64>> = es.iter().collect();
        let upstream = random_prompt(2, 3, 30);
        let objective = |m: &GPPEModule| (refine_prompt(&p, &entries, m).unwrap() * &upstream).sum();
        let mut grad = m.zeros_like();
        refine_backward(&p, &entries, &m, &upstream, &mut grad);
        let analytic: Vec<f64> = grad
            .named_tensors()
            .into_iter()
            .filter(|(n, _)| !n.starts_with("classifier"))
            .flat_map(|(_, t)| t.iter().copied().collect::<Vec<_>>())
            .collect();
        let mut probe = m.clone();
        let mut numeric = Vec::new();
        let h = 1e-6;
        let count = probe.tensors_mut().len() - 2;
        for t in 0..count {
            let len = probe.tensors_mut()[t].len();
            for i in 0..len {
                let orig = probe.tensors_mut()[t].as_slice().unwrap()[i];
                probe.tensors_mut()[t].as_slice_mut().unwrap()[i] = orig + h;
                let up = objective(&probe);
                probe.tensors_mut()[t].as_slice_mut().unwrap()[i] = orig - h;
                let down = objective(&probe);
                probe.tensors_mut()[t].as_slice_mut().unwrap()[i] = orig;
                numeric.push((up - down) / (2.0 * h));
            }
        }
        assert_eq!(numeric.len(), analytic.len());
        for (n, a) in numeric.iter().zip(&analytic) {
            let rel = (n - a).abs() / n.abs().max(a.abs()).max(1e-6);
            assert!(rel <= 1e-3, "numeric {n} analytic {a}");
        }
    }

    #[test]
    fn dictionary_hash_tracks_content() {
        let d = PromptDictionary {
            entries: vec![DictionaryEntry {
                task_id: "a".into(),
                prompt: random_prompt(2, 2, 1),
            }],
            vnt_config_hash: "x".into(),
        };
        let mut e = d.clone();
        assert_eq!(d.content_hash(), e.content_hash());
        e.entries[0].prompt[[0, 0]] += 1e-9;
        assert_ne!(d.content_hash(), e.content_hash());
    }
}
