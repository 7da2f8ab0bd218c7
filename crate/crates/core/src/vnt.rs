//! Virtual node tuning: a block of `P` trainable rows is appended to the
//! layer-0 node embeddings, the frozen transformer attends over nodes and
//! prompt rows together, and only the prompt and a logistic-regression
//! classifier are optimized on the support set.

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::{accuracy, Classifier, DEFAULT_L2};
use crate::encoder::{GTModel, NodeInputs};
use crate::error::{Error, Result};
use crate::nn::{gaussian, Adam, AdamConfig};
use crate::rng::{derive_seed, rng};
use crate::sampling::FewShotTask;

/// `P x F` block of virtual-node rows.
pub type PromptTensor = Array2<f64>;

pub const RANDOM_INIT_STD: f64 = 0.02;
const CLASSIFIER_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    #[default]
    Random,
    Prototype,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VNTConfig {
    pub alpha: f64,
    pub steps: usize,
    pub lr_prompt: f64,
    pub lr_classifier: f64,
    pub init_mode: InitMode,
    pub ensemble_size: usize,
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for VNTConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            steps: 100,
            lr_prompt: 1e-2,
            lr_classifier: 1e-2,
            init_mode: InitMode::Random,
            ensemble_size: 1,
            noise_scale: 0.01,
            seed: 0,
        }
    }
}

impl VNTConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be at least 1".into()));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(Error::Config("noise_scale must be non-negative".into()));
        }
        if !(self.lr_prompt > 0.0 && self.lr_classifier > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    /// `round(alpha * N * K)`.
    pub fn num_prompts(&self, n_way: usize, k_shot: usize) -> usize {
        (self.alpha * (n_way * k_shot) as f64).round() as usize
    }

    /// Hex SHA-256 of the JSON form.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}

fn k_shot(task: &FewShotTask) -> usize {
    task.support.len() / task.n_way().max(1)
}

fn require_frozen(gt: &GTModel) -> Result<()> {
    if gt.frozen {
        Ok(())
    } else {
        Err(Error::Contract(
            "virtual node tuning requires a frozen graph transformer".into(),
        ))
    }
}

/// Per-class mean of the prompt-free final embeddings of the support nodes,
/// computed with the task's support and query nodes as attention context.
/// Returns `N x F`.
pub fn class_prototypes(gt: &GTModel, inputs: &NodeInputs<'_>, task: &FewShotTask) -> Result<Array2<f64>> {
    let context = task.context_nodes();
    let e0 = gt.embed(inputs, &context)?;
    let ed = gt.forward(&e0, None)?.nodes;
    let n = task.n_way();
    let mut proto = Array2::zeros((n, gt.hidden()));
    let mut counts = vec![0usize; n];
    for (row, &(_, c)) in task.support.iter().enumerate() {
        proto.row_mut(c).scaled_add(1.0, &ed.row(row));
        counts[c] += 1;
    }
    for (c, &k) in counts.iter().enumerate() {
        if k == 0 {
            return Err(Error::Config(format!("class {c} has no support nodes")));
        }
        proto.row_mut(c).mapv_inplace(|x| x / k as f64);
    }
    Ok(proto)
}

/// Class owning each prompt row under prototype initialization: contiguous
/// blocks of `floor(P / N)` rows, then the remainder dealt from class 0.
pub fn prototype_blocks(p: usize, n: usize) -> Vec<usize> {
    let per = p / n;
    let mut owner: Vec<usize> = (0..n).flat_map(|c| std::iter::repeat_n(c, per)).collect();
    owner.extend((0..p - per * n).map(|i| i % n));
    owner
}

pub fn init_prompt(gt: &GTModel, inputs: &NodeInputs<'_>, task: &FewShotTask, config: &VNTConfig) -> Result<PromptTensor> {
    config.validate()?;
    let n = task.n_way();
    let p = config.num_prompts(n, k_shot(task));
    match config.init_mode {
        InitMode::Random => {
            let mut r = rng(derive_seed(config.seed, 1));
            Ok(gaussian(p, gt.hidden(), RANDOM_INIT_STD, &mut r))
        }
        InitMode::Prototype => {
            if p < n {
                return Err(Error::Config(format!(
                    "prototype init needs at least one prompt row per class: P={p}, N={n}"
                )));
            }
            let proto = class_prototypes(gt, inputs, task)?;
            let owner = prototype_blocks(p, n);
            let mut prompt = Array2::zeros((p, gt.hidden()));
            for (row, &c) in owner.iter().enumerate() {
                prompt.row_mut(row).assign(&proto.row(c));
            }
            Ok(prompt)
        }
    }
}

/// Classifier with small seeded Gaussian weights and zero bias.
pub fn init_classifier(gt: &GTModel, task: &FewShotTask, seed: u64) -> Classifier {
    let mut c = Classifier::new(task.n_way(), gt.hidden(), task.task_id.clone());
    let mut r = rng(derive_seed(seed, 2));
    c.weights = gaussian(task.n_way(), gt.hidden(), CLASSIFIER_INIT_STD, &mut r);
    c
}

fn check_classifier(classifier: &Classifier, gt: &GTModel, n_way: usize) -> Result<()> {
    if classifier.n_classes() != n_way || classifier.weights.ncols() != gt.hidden() {
        return Err(Error::Shape(format!(
            "classifier is {}x{}, task needs {}x{}",
            classifier.n_classes(),
            classifier.weights.ncols(),
            n_way,
            gt.hidden()
        )));
    }
    Ok(())
}

fn check_prompt(prompt: &PromptTensor, gt: &GTModel) -> Result<()> {
    if prompt.ncols() != gt.hidden() {
        return Err(Error::Shape(format!(
            "prompt width {} does not match hidden width {}",
            prompt.ncols(),
            gt.hidden()
        )));
    }
    Ok(())
}

/// Gradients of one support-loss evaluation.
pub struct SupportGrad {
    pub loss: f64,
    pub prompt: Array2<f64>,
    pub classifier: Classifier,
    /// Gradient w.r.t. the layer-0 node rows, for callers that also train
    /// the encoder.
    pub nodes: Array2<f64>,
}

/// Support cross-entropy with the prompt attached (`e0` rows are support
/// then query) and its gradients. `model_grad` receives encoder parameter
/// gradients when given.
pub fn support_loss_grad(
    gt: &GTModel,
    e0: &Array2<f64>,
    prompt: &PromptTensor,
    classifier: &Classifier,
    support_labels: &[usize],
    model_grad: Option<&mut GTModel>,
) -> Result<SupportGrad> {
    let trace = gt.forward_traced(e0, Some(prompt))?;
    let n_support = support_labels.len();
    let support_rows = trace.node_rows().slice(s![..n_support, ..]).to_owned();
    let (loss, classifier_grad, demb) = classifier.loss_and_grad(&support_rows, support_labels, DEFAULT_L2)?;
    let mut dout = Array2::zeros(trace.output().raw_dim());
    dout.slice_mut(s![..n_support, ..]).assign(&demb);
    let dinput = gt.backward(&trace, &dout, model_grad);
    let n_nodes = e0.nrows();
    Ok(SupportGrad {
        loss,
        prompt: dinput.slice(s![n_nodes.., ..]).to_owned(),
        classifier: classifier_grad,
        nodes: dinput.slice(s![..n_nodes, ..]).to_owned(),
    })
}

#[derive(Debug, Clone)]
pub struct TuneOutcome {
    pub prompt: PromptTensor,
    pub classifier: Classifier,
    pub history: Vec<f64>,
}

/// Runs `config.steps` Adam steps on prompt and classifier. The encoder
/// must be frozen and is never modified.
pub fn tune(
    gt: &GTModel,
    inputs: &NodeInputs<'_>,
    task: &FewShotTask,
    prompt: PromptTensor,
    classifier: Classifier,
    config: &VNTConfig,
) -> Result<TuneOutcome> {
    require_frozen(gt)?;
    config.validate()?;
    check_prompt(&prompt, gt)?;
    check_classifier(&classifier, gt, task.n_way())?;
    let labels = task.support_labels();
    let e0 = gt.embed(inputs, &task.context_nodes())?;
    let mut prompt = prompt;
    let mut classifier = classifier;
    let mut prompt_opt = Adam::new(AdamConfig::with_lr(config.lr_prompt));
    let mut classifier_opt = Adam::new(AdamConfig::with_lr(config.lr_classifier));
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let g = support_loss_grad(gt, &e0, &prompt, &classifier, &labels, None)
            .map_err(|_| Error::numerical("virtual node tuning", step))?;
        if !g.loss.is_finite() {
            return Err(Error::numerical("virtual node tuning", step));
        }
        history.push(g.loss);
        prompt_opt.step(&mut prompt, &g.prompt);
        classifier_opt.step(&mut classifier, &g.classifier);
    }
    Ok(TuneOutcome {
        prompt,
        classifier,
        history,
    })
}

/// Ablation: tunes prompt, classifier and the encoder weights together on
/// the support set. `gt` must not be frozen; callers pass a clone.
pub fn finetune(
    gt: &mut GTModel,
    inputs: &NodeInputs<'_>,
    task: &FewShotTask,
    prompt: PromptTensor,
    classifier: Classifier,
    config: &VNTConfig,
    lr_model: f64,
) -> Result<TuneOutcome> {
    if gt.frozen {
        return Err(Error::Contract("fine-tuning needs an unfrozen encoder".into()));
    }
    config.validate()?;
    check_prompt(&prompt, gt)?;
    check_classifier(&classifier, gt, task.n_way())?;
    let labels = task.support_labels();
    let (x, p) = inputs.gather(&task.context_nodes());
    let mut prompt = prompt;
    let mut classifier = classifier;
    let mut prompt_opt = Adam::new(AdamConfig::with_lr(config.lr_prompt));
    let mut classifier_opt = Adam::new(AdamConfig::with_lr(config.lr_classifier));
    let mut model_opt = Adam::new(AdamConfig::with_lr(lr_model));
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let e0 = gt.embed_rows(&x, &p)?;
        let mut model_grad = gt.zeros_like();
        let g = support_loss_grad(gt, &e0, &prompt, &classifier, &labels, Some(&mut model_grad))
            .map_err(|_| Error::numerical("fine-tuning", step))?;
        if !g.loss.is_finite() {
            return Err(Error::numerical("fine-tuning", step));
        }
        gt.embed_backward(&x, &p, &g.nodes, &mut model_grad);
        history.push(g.loss);
        prompt_opt.step(&mut prompt, &g.prompt);
        classifier_opt.step(&mut classifier, &g.classifier);
        model_opt.step(gt, &model_grad);
    }
    Ok(TuneOutcome {
        prompt,
        classifier,
        history,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub labels: Vec<usize>,
    /// `|nodes| x N`, rows sum to one.
    pub probabilities: Array2<f64>,
}

/// Predicts `nodes` with the prompt attached; the attention batch is
/// `context` followed by any of `nodes` not already in it.
pub fn predict(
    gt: &GTModel,
    inputs: &NodeInputs<'_>,
    prompt: &PromptTensor,
    classifier: &Classifier,
    nodes: &[usize],
    context: &[usize],
) -> Result<Prediction> {
    check_prompt(prompt, gt)?;
    let mut batch = context.to_vec();
    let mut position = std::collections::HashMap::new();
    for (i, &v) in batch.iter().enumerate() {
        position.entry(v).or_insert(i);
    }
    for &v in nodes {
        if !position.contains_key(&v) {
            position.insert(v, batch.len());
            batch.push(v);
        }
    }
    let e0 = gt.embed(inputs, &batch)?;
    let out = gt.forward(&e0, Some(prompt))?.nodes;
    let rows: Vec<usize> = nodes.iter().map(|v| position[v]).collect();
    let emb = out.select(Axis(0), &rows);
    let probabilities = classifier.predict_proba(&emb)?;
    let labels = crate::classifier::argmax_rows(&probabilities);
    Ok(Prediction { labels, probabilities })
}

/// Fits a fresh classifier on the support rows with `prompt` attached and
/// held fixed, then predicts the query rows. Returns the classifier with
/// support and query predictions.
pub fn fit_with_fixed_prompt(
    gt: &GTModel,
    inputs: &NodeInputs<'_>,
    task: &FewShotTask,
    prompt: &PromptTensor,
    config: &VNTConfig,
) -> Result<(Classifier, Vec<usize>, Vec<usize>)> {
    check_prompt(prompt, gt)?;
    let e0 = gt.embed(inputs, &task.context_nodes())?;
    let out = gt.forward(&e0, Some(prompt))?.nodes;
    let n_support = task.support.len();
    let support_emb = out.slice(s![..n_support, ..]).to_owned();
    let query_emb = out.slice(s![n_support.., ..]).to_owned();
    let mut classifier = init_classifier(gt, task, config.seed);
    classifier.fit(&support_emb, &task.support_labels(), config.steps, config.lr_classifier, DEFAULT_L2)?;
    let support = classifier.predict(&support_emb)?;
    let query = classifier.predict(&query_emb)?;
    Ok((classifier, support, query))
}

/// Outcome of one full VNT run on a task.
#[derive(Debug, Clone, Serialize)]
pub struct TaskRecord {
    pub task_id: String,
    pub seed: u64,
    pub config: VNTConfig,
    pub support_accuracy: f64,
    pub query_accuracy: f64,
    pub loss_history: Vec<f64>,
    /// Query predictions (majority vote for ensembles).
    pub query_predictions: Vec<usize>,
    #[serde(skip)]
    pub prompt: PromptTensor,
    #[serde(skip)]
    pub classifier: Classifier,
}

/// Initializes, tunes and scores one task. With `ensemble_size >= 2` the
/// query predictions are the majority vote; the stored prompt, classifier,
/// support accuracy and history are those of the first member.
pub fn run_task(gt: &GTModel, inputs: &NodeInputs<'_>, task: &FewShotTask, config: &VNTConfig) -> Result<TaskRecord> {
    let prompt = init_prompt(gt, inputs, task, config)?;
    finish_task(gt, inputs, task, config, prompt)
}

fn finish_task(
    gt: &GTModel,
    inputs: &NodeInputs<'_>,
    task: &FewShotTask,
    config: &VNTConfig,
    prompt: PromptTensor,
) -> Result<TaskRecord> {
    let classifier = init_classifier(gt, task, config.seed);
    let out = tune(gt, inputs, task, prompt, classifier, config)?;
    let context = task.context_nodes();
    let support = predict(gt, inputs, &out.prompt, &out.classifier, &task.support_nodes(), &context)?;
    let mut query = predict(gt, inputs, &out.prompt, &out.classifier, &task.query_nodes(), &context)?.labels;
    if config.ensemble_size >= 2 {
        query = ensemble_predict(gt, inputs, task, config)?.labels;
    }
    Ok(TaskRecord {
        task_id: task.task_id.clone(),
        seed: config.seed,
        config: *config,
        support_accuracy: accuracy(&support.labels, &task.support_labels()),
        query_accuracy: accuracy(&query, &task.query_labels()),
        loss_history: out.history,
        query_predictions: query,
        prompt: out.prompt,
        classifier: out.classifier,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutcome {
    pub labels: Vec<usize>,
    /// One prediction vector per member.
    pub members: Vec<Vec<usize>>,
}

/// Tunes `ensemble_size` noisy copies of the prototype prompt and votes on
/// the query nodes. Falls back to a single prompt when `ensemble_size < 2`.
pub fn ensemble_predict(gt: &GTModel, inputs: &NodeInputs<'_>, task: &FewShotTask, config: &VNTConfig) -> Result<EnsembleOutcome> {
    if config.init_mode != InitMode::Prototype {
        return Err(Error::Config("ensembles require prototype initialization".into()));
    }
    let base = init_prompt(gt, inputs, task, config)?;
    let context = task.context_nodes();
    let query = task.query_nodes();
    let size = config.ensemble_size.max(1);
    let mut members = Vec::with_capacity(size);
    for i in 0..size {
        let mut prompt = base.clone();
        if size >= 2 && config.noise_scale > 0.0 {
            let mut r = rng(derive_seed(config.seed, 100 + i as u64));
            prompt += &gaussian(prompt.nrows(), prompt.ncols(), config.noise_scale, &mut r);
        }
        let classifier = init_classifier(gt, task, config.seed);
        let out = tune(gt, inputs, task, prompt, classifier, config)?;
        members.push(predict(gt, inputs, &out.prompt, &out.classifier, &query, &context)?.labels);
    }
    let labels = majority_vote(&members, task.n_way());
    Ok(EnsembleOutcome { labels, members })
}

/// Per-position majority over member predictions; ties go to the lowest
/// class index.
pub fn majority_vote(members: &[Vec<usize>], n_classes: usize) -> Vec<usize> {
    let len = members.first().map_or(0, Vec::len);
    (0..len)
        .map(|i| {
            let mut counts = vec![0usize; n_classes];
            for m in members {
                counts[m[i]] += 1;
            }
            let mut best = 0;
            for (c, &k) in counts.iter().enumerate() {
                if k > counts[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::ModelConfig;
    use crate::positional::positional_encoding;
    use crate::sampling::{sample_task, TaskShape};
    use crate::toy;
    use crate::SplitPart;

    struct Fixture {
        graph: crate::Graph,
        positions: Array2<f64>,
        gt: GTModel,
        task: FewShotTask,
    }

    impl Fixture {
        fn inputs(&self) -> NodeInputs<'_> {
            NodeInputs {
                features: self.graph.features(),
                positions: &self.positions,
            }
        }
    }

    fn fixture(k: usize) -> Fixture {
        let (graph, split) = toy::separable_pair(5);
        let positions = positional_encoding(&graph.structure(), 4).unwrap();
        let mut gt = GTModel::new(ModelConfig {
            input_dim: 4,
            hidden: 16,
            layers: 2,
            heads: 2,
            pos_dim: 4,
            seed: 3,
        })
        .unwrap();
        gt.freeze();
        let task = sample_task(&graph, &split, SplitPart::Test, TaskShape::new(2, k, 5), 11).unwrap();
        Fixture {
            graph,
            positions,
            gt,
            task,
        }
    }

    #[test]
    fn prompt_count_rounds() {
        let c = VNTConfig::default();
        assert_eq!(c.num_prompts(2, 5), 10);
        let c = VNTConfig { alpha: 0.25, ..c };
        assert_eq!(c.num_prompts(2, 5), 3);
        assert_eq!(c.num_prompts(5, 1), 1);
    }

    #[test]
    fn blocks_with_remainder() {
        assert_eq!(prototype_blocks(10, 2), vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1]);
        assert_eq!(prototype_blocks(7, 3), vec![0, 0, 1, 1, 2, 2, 0]);
        assert_eq!(prototype_blocks(5, 3), vec![0, 1, 2, 0, 1]);
    }

    #[test]
    fn prototype_rows_are_class_means() {
        let f = fixture(5);
        let config = VNTConfig {
            init_mode: InitMode::Prototype,
            ..Default::default()
        };
        let prompt = init_prompt(&f.gt, &f.inputs(), &f.task, &config).unwrap();
        assert_eq!(prompt.dim(), (10, 16));
        let e0 = f.gt.embed(&f.inputs(), &f.task.context_nodes()).unwrap();
        let ed = f.gt.forward(&e0, None).unwrap().nodes;
        for c in 0..2 {
            let rows: Vec<usize> = (0..10).filter(|&i| f.task.support[i].1 == c).collect();
            let mean = ed.select(Axis(0), &rows).mean_axis(Axis(0)).unwrap();
            for r in c * 5..(c + 1) * 5 {
                for j in 0..16 {
                    assert!((prompt[[r, j]] - mean[j]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn one_shot_prototype_is_the_support_row() {
        let f = fixture(1);
        let config = VNTConfig {
            init_mode: InitMode::Prototype,
            ..Default::default()
        };
        let prompt = init_prompt(&f.gt, &f.inputs(), &f.task, &config).unwrap();
        let e0 = f.gt.embed(&f.inputs(), &f.task.context_nodes()).unwrap();
        let ed = f.gt.forward(&e0, None).unwrap().nodes;
        for (i, &(_, c)) in f.task.support.iter().enumerate() {
            assert_eq!(prompt.row(c), ed.row(i));
        }
    }

    #[test]
    fn prototype_with_too_few_rows_fails() {
        let f = fixture(1);
        let config = VNTConfig {
            init_mode: InitMode::Prototype,
            alpha: 0.2,
            ..Default::default()
        };
        assert!(matches!(init_prompt(&f.gt, &f.inputs(), &f.task, &config), Err(Error::Config(_))));
    }

    #[test]
    fn random_init_is_deterministic() {
        let f = fixture(3);
        let config = VNTConfig::default();
        let a = init_prompt(&f.gt, &f.inputs(), &f.task, &config).unwrap();
        let b = init_prompt(&f.gt, &f.inputs(), &f.task, &config).unwrap();
        assert_eq!(a, b);
        let std = (a.iter().map(|x| x * x).sum::<f64>() / a.len() as f64).sqrt();
        assert!(std > 0.01 && std < 0.03, "{std}");
    }

    #[test]
    fn unfrozen_model_refused() {
        let mut f = fixture(2);
        f.gt.frozen = false;
        let config = VNTConfig::default();
        let prompt = Array2::zeros((4, 16));
        let classifier = init_classifier(&f.gt, &f.task, 0);
        let r = tune(&f.gt, &f.inputs(), &f.task, prompt, classifier, &config);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn zero_steps_rejected() {
        let config = VNTConfig {
            steps: 0,
            ..Default::default()
        };
        assert!(config.validate().is_err());
    }

    #[test]
    fn one_step_moves_prompt_and_keeps_digest() {
        let f = fixture(2);
        let config = VNTConfig {
            steps: 1,
            ..Default::default()
        };
        let digest = f.gt.param_digest();
        let prompt = init_prompt(&f.gt, &f.inputs(), &f.task, &config).unwrap();
        let classifier = init_classifier(&f.gt, &f.task, 0);
        let out = tune(&f.gt, &f.inputs(), &f.task, prompt.clone(), classifier, &config).unwrap();
        assert_ne!(out.prompt, prompt);
        assert_eq!(f.gt.param_digest(), digest);
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        let f = fixture(2);
        let config = VNTConfig::default();
        let prompt = init_prompt(&f.gt, &f.inputs(), &f.task, &config).unwrap();
        let classifier = init_classifier(&f.gt, &f.task, 0);
        let labels = f.task.support_labels();
        let e0 = f.gt.embed(&f.inputs(), &f.task.context_nodes()).unwrap();
        let g = support_loss_grad(&f.gt, &e0, &prompt, &classifier, &labels, None).unwrap();
        let loss = |p: &Array2<f64>| support_loss_grad(&f.gt, &e0, p, &classifier, &labels, None).unwrap().loss;
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for idx in 0..prompt.len() {
            let mut plus = prompt.clone();
            let mut minus = prompt.clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let num = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let ana = g.prompt.as_slice().unwrap()[idx];
            worst = worst.max((num - ana).abs() / (num.abs().max(ana.abs()).max(1e-6)));
        }
        assert!(worst <= 1e-3, "relative error {worst}");
    }

    #[test]
    fn predict_probabilities_normalized() {
        let f = fixture(2);
        let config = VNTConfig {
            steps: 5,
            ..Default::default()
        };
        let rec = run_task(&f.gt, &f.inputs(), &f.task, &config).unwrap();
        let pred = predict(
            &f.gt,
            &f.inputs(),
            &rec.prompt,
            &rec.classifier,
            &f.task.query_nodes(),
            &f.task.context_nodes(),
        )
        .unwrap();
        for row in pred.probabilities.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-6);
        }
        assert_eq!(pred.labels, rec.query_predictions);
    }

    #[test]
    fn predict_rejects_wrong_width() {
        let f = fixture(2);
        let classifier = init_classifier(&f.gt, &f.task, 0);
        let r = predict(&f.gt, &f.inputs(), &Array2::zeros((2, 8)), &classifier, &[0], &[1]);
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn majority_examples() {
        let m: Vec<Vec<usize>> = [0, 0, 1, 1, 0].iter().map(|&c| vec![c]).collect();
        assert_eq!(majority_vote(&m, 2), vec![0]);
        let m: Vec<Vec<usize>> = [0, 1, 0, 1, 2].iter().map(|&c| vec![c]).collect();
        assert_eq!(majority_vote(&m, 3), vec![0]);
        let m: Vec<Vec<usize>> = [2, 1, 2, 1, 0].iter().map(|&c| vec![c]).collect();
        assert_eq!(majority_vote(&m, 3), vec![1]);
    }

    #[test]
    fn noiseless_ensemble_equals_single() {
        let f = fixture(2);
        let single = VNTConfig {
            steps: 10,
            init_mode: InitMode::Prototype,
            ..Default::default()
        };
        let ens = VNTConfig {
            ensemble_size: 5,
            noise_scale: 0.0,
            ..single
        };
        let one = run_task(&f.gt, &f.inputs(), &f.task, &single).unwrap();
        let out = ensemble_predict(&f.gt, &f.inputs(), &f.task, &ens).unwrap();
        assert_eq!(out.members.len(), 5);
        assert!(out.members.iter().all(|m| *m == one.query_predictions));
        assert_eq!(out.labels, one.query_predictions);
    }

    #[test]
    fn ensemble_needs_prototype_mode() {
        let f = fixture(2);
        let cfg = VNTConfig {
            ensemble_size: 3,
            ..Default::default()
        };
        assert!(ensemble_predict(&f.gt, &f.inputs(), &f.task, &cfg).is_err());
    }

    #[test]
    fn finetune_changes_weights() {
        let f = fixture(2);
        let mut gt = f.gt.clone();
        gt.frozen = false;
        let config = VNTConfig {
            steps: 3,
            ..Default::default()
        };
        let prompt = init_prompt(&gt, &f.inputs(), &f.task, &config).unwrap();
        let classifier = init_classifier(&gt, &f.task, 0);
        finetune(&mut gt, &f.inputs(), &f.task, prompt, classifier, &config, 1e-3).unwrap();
        assert_ne!(gt.param_digest(), f.gt.param_digest());
    }
}
