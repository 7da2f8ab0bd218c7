//! Seeded evaluation: sample `reps x tasks_per_rep` tasks, run a method on
//! each, and summarize query accuracy with a normal-approximation interval.
//! Also clustering scores, prompt/node similarity tables and prompt
//! transfer matrices.

use std::fmt::Write as _;
use std::time::Instant;

use ndarray::{s, Array2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{accuracy, DEFAULT_L2};
use crate::encoder::{GTModel, NodeInputs};
use crate::error::{Error, Result};
use crate::gppe::{self, GPPEModule, PromptDictionary};
use crate::graph::{ClassSplit, Graph, SplitPart};
use crate::metrics::{self, KMeansConfig};
use crate::rng::derive_seed;
use crate::sampling::{ClassIndex, FewShotTask, TaskShape};
use crate::vnt::{self, InitMode, PromptTensor, VNTConfig};

/// Anything that labels the query nodes of a task.
pub trait TaskMethod: Sync {
    fn name(&self) -> String;

    /// Query predictions as class indices in `[0, N)`. `seed` is the task's
    /// own seed; methods derive all randomness from it.
    fn predict_query(&self, task: &FewShotTask, seed: u64) -> Result<Vec<usize>>;
}

/// Frozen encoder embeddings plus logistic regression on the support rows.
pub struct LinearProbe<'a> {
    pub gt: &'a GTModel,
    pub inputs: NodeInputs<'a>,
    pub steps: usize,
    pub lr: f64,
}

impl TaskMethod for LinearProbe<'_> {
    fn name(&self) -> String {
        "linear_probe".into()
    }

    fn predict_query(&self, task: &FewShotTask, seed: u64) -> Result<Vec<usize>> {
        let e0 = self.gt.embed(&self.inputs, &task.context_nodes())?;
        let out = self.gt.forward(&e0, None)?.nodes;
        let n_support = task.support.len();
        let mut classifier = vnt::init_classifier(self.gt, task, seed);
        classifier.fit(
            &out.slice(s![..n_support, ..]).to_owned(),
            &task.support_labels(),
            self.steps,
            self.lr,
            DEFAULT_L2,
        )?;
        classifier.predict(&out.slice(s![n_support.., ..]).to_owned())
    }
}

pub struct VntMethod<'a> {
    pub gt: &'a GTModel,
    pub inputs: NodeInputs<'a>,
    pub config: VNTConfig,
}

impl VntMethod<'_> {
    fn task_config(&self, seed: u64) -> VNTConfig {
        VNTConfig {
            seed: derive_seed(self.config.seed, seed),
            ..self.config
        }
    }
}

impl TaskMethod for VntMethod<'_> {
    fn name(&self) -> String {
        "vnt".into()
    }

    fn predict_query(&self, task: &FewShotTask, seed: u64) -> Result<Vec<usize>> {
        Ok(vnt::run_task(self.gt, &self.inputs, task, &self.task_config(seed))?.query_predictions)
    }
}

pub struct GppeMethod<'a> {
    pub gt: &'a GTModel,
    pub inputs: NodeInputs<'a>,
    pub module: &'a GPPEModule,
    pub dictionary: &'a PromptDictionary,
    pub config: VNTConfig,
}

impl TaskMethod for GppeMethod<'_> {
    fn name(&self) -> String {
        "vnt_gppe".into()
    }

    fn predict_query(&self, task: &FewShotTask, seed: u64) -> Result<Vec<usize>> {
        let config = VNTConfig {
            seed: derive_seed(self.config.seed, seed),
            ..self.config
        };
        Ok(gppe::deploy(self.gt, &self.inputs, self.module, self.dictionary, task, &config)?.query_predictions)
    }
}

/// Ablation: each task tunes a private, unfrozen copy of the encoder
/// together with the prompt.
pub struct FineTuneMethod<'a> {
    pub gt: &'a GTModel,
    pub inputs: NodeInputs<'a>,
    pub config: VNTConfig,
    pub lr_model: f64,
}

impl TaskMethod for FineTuneMethod<'_> {
    fn name(&self) -> String {
        "vnt_finetune".into()
    }

    fn predict_query(&self, task: &FewShotTask, seed: u64) -> Result<Vec<usize>> {
        let config = VNTConfig {
            seed: derive_seed(self.config.seed, seed),
            ..self.config
        };
        let mut model = self.gt.clone();
        model.frozen = false;
        let prompt = vnt::init_prompt(&model, &self.inputs, task, &config)?;
        let classifier = vnt::init_classifier(&model, task, config.seed);
        let out = vnt::finetune(&mut model, &self.inputs, task, prompt, classifier, &config, self.lr_model)?;
        Ok(vnt::predict(
            &model,
            &self.inputs,
            &out.prompt,
            &out.classifier,
            &task.query_nodes(),
            &task.context_nodes(),
        )?
        .labels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub r_query: usize,
    pub tasks_per_rep: usize,
    pub reps: usize,
    pub seed: u64,
    pub part: SplitPart,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_way: 2,
            k_shot: 5,
            r_query: 10,
            tasks_per_rep: 100,
            reps: 5,
            seed: 0,
            part: SplitPart::Test,
        }
    }
}

impl EvalConfig {
    pub fn shape(&self) -> TaskShape {
        TaskShape::new(self.n_way, self.k_shot, self.r_query)
    }

    pub fn rep_seeds(&self) -> Vec<u64> {
        (0..self.reps as u64).map(|r| derive_seed(self.seed, r)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Setting {
    pub n_way: usize,
    pub k_shot: usize,
    pub r_query: usize,
    pub m: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub setting: Setting,
    pub task_ids: Vec<String>,
    pub per_task_accuracy: Vec<f64>,
    pub per_rep_mean: Vec<f64>,
    pub mean_accuracy: f64,
    pub ci95: f64,
    pub seeds: Vec<u64>,
    /// Not serialized, so that reports from identical runs are
    /// byte-identical; written separately by the CLI.
    #[serde(skip)]
    pub wall_time: f64,
}

/// `(mean, 1.96 * sample std / sqrt(n))`; the interval is 0 for n < 2.
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Samples every evaluation task for `config` up front. Infeasible
/// settings surface as configuration errors.
pub fn evaluation_tasks(graph: &Graph, split: &ClassSplit, config: &EvalConfig) -> Result<Vec<FewShotTask>> {
    if config.reps == 0 || config.tasks_per_rep == 0 {
        return Err(Error::Config("reps and tasks_per_rep must be at least 1".into()));
    }
    let index = ClassIndex::new(graph, split.part(config.part));
    let mut tasks = Vec::with_capacity(config.reps * config.tasks_per_rep);
    for (r, rep_seed) in config.rep_seeds().into_iter().enumerate() {
        for t in 0..config.tasks_per_rep {
            let seed = derive_seed(rep_seed, t as u64);
            let task = index
                .sample(config.shape(), seed, format!("{}-r{r}-t{t}", config.part))
                .map_err(|e| match e {
                    Error::Infeasible(msg) => Error::Config(msg),
                    other => other,
                })?;
            tasks.push(task);
        }
    }
    Ok(tasks)
}

/// Runs `method` on every evaluation task (in parallel) and summarizes.
pub fn evaluate(method: &dyn TaskMethod, graph: &Graph, split: &ClassSplit, config: &EvalConfig, m: usize) -> Result<EvalReport> {
    let tasks = evaluation_tasks(graph, split, config)?;
    let start = Instant::now();
    let per_task_accuracy = tasks
        .par_iter()
        .map(|task| {
            let pred = method.predict_query(task, task.seed)?;
            Ok(accuracy(&pred, &task.query_labels()))
        })
        .collect::<Result<Vec<f64>>>()?;
    let per_rep_mean = per_task_accuracy
        .chunks(config.tasks_per_rep)
        .map(|c| c.iter().sum::<f64>() / c.len() as f64)
        .collect();
    let (mean_accuracy, ci95) = mean_ci95(&per_task_accuracy);
    Ok(EvalReport {
        method: method.name(),
        setting: Setting {
            n_way: config.n_way,
            k_shot: config.k_shot,
            r_query: config.r_query,
            m,
        },
        task_ids: tasks.iter().map(|t| t.task_id.clone()).collect(),
        per_task_accuracy,
        per_rep_mean,
        mean_accuracy,
        ci95,
        seeds: config.rep_seeds(),
        wall_time: start.elapsed().as_secs_f64(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub nmi: f64,
    pub ari: f64,
    pub k: usize,
    pub restarts: usize,
}

pub fn clustering_metrics(embeddings: &Array2<f64>, labels: &[usize], k: usize, restarts: usize, seed: u64) -> Result<ClusterReport> {
    if embeddings.nrows() != labels.len() {
        return Err(Error::Shape("one label per embedding row required".into()));
    }
    let config = KMeansConfig {
        restarts,
        seed,
        ..Default::default()
    };
    let pred = metrics::kmeans(embeddings, k, &config)?;
    Ok(ClusterReport {
        nmi: metrics::nmi(labels, &pred),
        ari: metrics::ari(labels, &pred),
        k,
        restarts,
    })
}

/// Final-layer embeddings of `nodes`, computed in consecutive chunks of
/// `chunk` nodes that each form their own attention batch, with `prompt`
/// attached when given.
pub fn embed_nodes(
    gt: &GTModel,
    inputs: &NodeInputs<'_>,
    nodes: &[usize],
    prompt: Option<&PromptTensor>,
    chunk: usize,
) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((nodes.len(), gt.hidden()));
    let parts = nodes
        .par_chunks(chunk.max(1))
        .map(|c| {
            let e0 = gt.embed(inputs, c)?;
            Ok(gt.forward(&e0, prompt)?.nodes)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut row = 0;
    for p in parts {
        out.slice_mut(s![row..row + p.nrows(), ..]).assign(&p);
        row += p.nrows();
    }
    Ok(out)
}

/// Mean normalized L2 distance and mean cosine between prompt rows owned
/// by class `i` and node rows of class `j`, for every `(i, j)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTable {
    pub l2: Vec<Vec<f64>>,
    pub cosine: Vec<Vec<f64>>,
    /// Largest pairwise distance among the node rows.
    pub scale: f64,
}

fn l2(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

fn cos(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        a.dot(&b) / (na * nb)
    }
}

pub fn similarity_table(
    prompt_rows: &Array2<f64>,
    prompt_class: &[usize],
    node_rows: &Array2<f64>,
    node_class: &[usize],
    n_classes: usize,
) -> SimilarityTable {
    let mut scale: f64 = 0.0;
    for i in 0..node_rows.nrows() {
        for j in i + 1..node_rows.nrows() {
            scale = scale.max(l2(node_rows.row(i), node_rows.row(j)));
        }
    }
    let norm = if scale > 0.0 { scale } else { 1.0 };
    let mut dist = vec![vec![0.0; n_classes]; n_classes];
    let mut sim = vec![vec![0.0; n_classes]; n_classes];
    let mut count = vec![vec![0usize; n_classes]; n_classes];
    for (p, &pc) in prompt_class.iter().enumerate() {
        for (v, &vc) in node_class.iter().enumerate() {
            dist[pc][vc] += l2(prompt_rows.row(p), node_rows.row(v)) / norm;
            sim[pc][vc] += cos(prompt_rows.row(p), node_rows.row(v));
            count[pc][vc] += 1;
        }
    }
    for i in 0..n_classes {
        for j in 0..n_classes {
            if count[i][j] > 0 {
                dist[i][j] /= count[i][j] as f64;
                sim[i][j] /= count[i][j] as f64;
            }
        }
    }
    SimilarityTable {
        l2: dist,
        cosine: sim,
        scale,
    }
}

/// Similarity between the final-layer prompt rows and the task's node rows
/// from one prompt-attached forward pass. Row ownership follows the
/// prototype block layout, so random-init prompts are rejected.
pub fn prompt_node_similarity(
    gt: &GTModel,
    inputs: &NodeInputs<'_>,
    prompt: &PromptTensor,
    init_mode: InitMode,
    task: &FewShotTask,
) -> Result<SimilarityTable> {
    if init_mode != InitMode::Prototype {
        return Err(Error::Unsupported(
            "prompt rows of a randomly initialized prompt have no class attribution".into(),
        ));
    }
    let n = task.n_way();
    if prompt.nrows() < n {
        return Err(Error::Unsupported("prompt has fewer rows than classes".into()));
    }
    let context = task.context_nodes();
    let e0 = gt.embed(inputs, &context)?;
    let out = gt.forward(&e0, Some(prompt))?;
    let node_class: Vec<usize> = task.support.iter().chain(&task.query).map(|&(_, c)| c).collect();
    Ok(similarity_table(
        out.prompt.as_ref().expect("prompt rows present"),
        &vnt::prototype_blocks(prompt.nrows(), n),
        &out.nodes,
        &node_class,
        n,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransferMode {
    /// Source prompt kept fixed; only a fresh classifier is fit.
    Reuse,
    /// Source prompt used as the starting point of a full tuning run.
    Init,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub mode: TransferMode,
    pub source_ids: Vec<String>,
    pub target_ids: Vec<String>,
    /// Plain VNT query accuracy per target.
    pub baseline: Vec<f64>,
    /// `ratios[s][t]`; `None` when the baseline accuracy is zero.
    pub ratios: Vec<Vec<Option<f64>>>,
}

impl TransferMatrix {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source");
        for t in &self.target_ids {
            let _ = write!(out, ",{t}");
        }
        out.push('\n');
        for (s, row) in self.source_ids.iter().zip(&self.ratios) {
            out.push_str(s);
            for v in row {
                match v {
                    Some(x) => {
                        let _ = write!(out, ",{x}");
                    }
                    None => out.push_str(",undefined"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Relative accuracy on each target when starting from each source's tuned
/// prompt, against plain VNT on the target.
pub fn prompt_transfer_matrix(
    gt: &GTModel,
    inputs: &NodeInputs<'_>,
    sources: &[FewShotTask],
    targets: &[FewShotTask],
    config: &VNTConfig,
    mode: TransferMode,
) -> Result<TransferMatrix> {
    let shape_of = |t: &FewShotTask| (t.n_way(), t.support.len(), t.query.len());
    let Some(first) = sources.first().or(targets.first()) else {
        return Err(Error::Config("no tasks given".into()));
    };
    let shape = shape_of(first);
    if sources.iter().chain(targets).any(|t| shape_of(t) != shape) {
        return Err(Error::Config("all transfer tasks must share N, K and R".into()));
    }
    let source_prompts = sources
        .par_iter()
        .map(|t| Ok(vnt::run_task(gt, inputs, t, config)?.prompt))
        .collect::<Result<Vec<_>>>()?;
    let baseline = targets
        .par_iter()
        .map(|t| Ok(vnt::run_task(gt, inputs, t, config)?.query_accuracy))
        .collect::<Result<Vec<f64>>>()?;
    let ratios = source_prompts
        .par_iter()
        .map(|prompt| {
            targets
                .iter()
                .zip(&baseline)
                .map(|(target, &base)| {
                    let acc = match mode {
                        TransferMode::Reuse => {
                            let (_, _, query) = vnt::fit_with_fixed_prompt(gt, inputs, target, prompt, config)?;
                            accuracy(&query, &target.query_labels())
                        }
                        TransferMode::Init => {
                            let classifier = vnt::init_classifier(gt, target, config.seed);
                            let out = vnt::tune(gt, inputs, target, prompt.clone(), classifier, config)?;
                            let pred = vnt::predict(
                                gt,
                                inputs,
                                &out.prompt,
                                &out.classifier,
                                &target.query_nodes(),
                                &target.context_nodes(),
                            )?;
                            accuracy(&pred.labels, &target.query_labels())
                        }
                    };
                    Ok((base > 0.0).then(|| acc / base))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TransferMatrix {
        mode,
        source_ids: sources.iter().map(|t| t.task_id.clone()).collect(),
        target_ids: targets.iter().map(|t| t.task_id.clone()).collect(),
        baseline,
        ratios,
    })
}

/// `node_id,label,e0,...` rows.
pub fn embeddings_csv(nodes: &[usize], labels: &[usize], emb: &Array2<f64>) -> String {
    let mut out = String::from("node_id,label");
    for j in 0..emb.ncols() {
        let _ = write!(out, ",e{j}");
    }
    out.push('\n');
    for (i, (&v, &l)) in nodes.iter().zip(labels).enumerate() {
        let _ = write!(out, "{v},{l}");
        for x in emb.row(i) {
            let _ = write!(out, ",{x}");
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;
    use ndarray::array;
    use rand::Rng;

    struct Oracle;

    impl TaskMethod for Oracle {
        fn name(&self) -> String {
            "oracle".into()
        }

        fn predict_query(&self, task: &FewShotTask, _: u64) -> Result<Vec<usize>> {
            Ok(task.query_labels())
        }
    }

    struct Coin;

    impl TaskMethod for Coin {
        fn name(&self) -> String {
            "coin".into()
        }

        fn predict_query(&self, task: &FewShotTask, seed: u64) -> Result<Vec<usize>> {
            let mut r = crate::rng::rng(seed ^ 0x55);
            Ok(task.query.iter().map(|_| r.random_range(0..task.n_way())).collect())
        }
    }

    fn small_config() -> EvalConfig {
        EvalConfig {
            n_way: 2,
            k_shot: 2,
            r_query: 10,
            tasks_per_rep: 100,
            reps: 5,
            seed: 1,
            part: SplitPart::Test,
        }
    }

    #[test]
    fn oracle_scores_one() {
        let (g, split) = toy::block_graph(&[20, 20, 20], 4, 0.3, 0.05, 1);
        let report = evaluate(&Oracle, &g, &split, &small_config(), 0).unwrap();
        assert_eq!(report.per_task_accuracy.len(), 500);
        assert_eq!(report.mean_accuracy, 1.0);
        assert_eq!(report.ci95, 0.0);
    }

    #[test]
    fn coin_flip_near_half() {
        let (g, split) = toy::block_graph(&[20, 20, 20], 4, 0.3, 0.05, 1);
        let report = evaluate(&Coin, &g, &split, &small_config(), 0).unwrap();
        assert!((report.mean_accuracy - 0.5).abs() <= 0.03, "{}", report.mean_accuracy);
        let (mean, ci) = mean_ci95(&report.per_task_accuracy);
        assert!((mean - report.mean_accuracy).abs() < 1e-12 && ci == report.ci95);
        let direct: f64 = report.per_task_accuracy.iter().sum::<f64>() / 500.0;
        assert!((direct - report.mean_accuracy).abs() < 1e-9);
        let rep_avg: f64 = report.per_rep_mean.iter().sum::<f64>() / 5.0;
        assert!((rep_avg - report.mean_accuracy).abs() < 1e-9);
    }

    #[test]
    fn infeasible_setting_is_config_error() {
        let (g, split) = toy::block_graph(&[20, 20, 20], 4, 0.3, 0.05, 1);
        let cfg = EvalConfig {
            k_shot: 15,
            ..small_config()
        };
        assert!(matches!(evaluate(&Oracle, &g, &split, &cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn ci_hand_value() {
        let (m, ci) = mean_ci95(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        // sample std = sqrt(0.5)
        assert!((ci - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn separated_clouds_cluster_perfectly() {
        let x = array![[0.0, 0.0], [0.2, 0.1], [10.0, 10.0], [10.1, 9.9], [-10.0, 10.0], [-9.9, 10.2]];
        let r = clustering_metrics(&x, &[2, 2, 0, 0, 1, 1], 3, 10, 0).unwrap();
        assert_eq!((r.nmi, r.ari), (1.0, 1.0));
    }

    #[test]
    fn random_labels_have_small_ari() {
        let mut r = crate::rng::rng(5);
        let mut worst: f64 = 0.0;
        for trial in 0..20 {
            let x = crate::nn::gaussian(60, 3, 1.0, &mut r);
            let labels: Vec<usize> = (0..60).map(|_| r.random_range(0..3)).collect();
            let rep = clustering_metrics(&x, &labels, 3, 10, trial).unwrap();
            worst = worst.max(rep.ari.abs());
        }
        assert!(worst < 0.1, "{worst}");
    }

    #[test]
    fn too_few_points_for_k() {
        assert!(matches!(
            clustering_metrics(&Array2::zeros((2, 2)), &[0, 1], 3, 1, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn identical_prompt_and_node_rows() {
        let nodes = array![[1.0, 0.0], [0.0, 2.0]];
        let t = similarity_table(&nodes, &[0, 1], &nodes, &[0, 1], 2);
        assert_eq!(t.l2[0][0], 0.0);
        assert_eq!(t.l2[1][1], 0.0);
        assert!((t.cosine[0][0] - 1.0).abs() < 1e-15);
        assert!((t.l2[0][1] - 1.0).abs() < 1e-15);
        assert_eq!(t.cosine[0][1], 0.0);
    }

    #[test]
    fn table_matches_pairwise_loops() {
        let prompt = array![[0.5, 1.0, 0.0], [1.0, -1.0, 2.0], [0.0, 0.3, 0.3]];
        let nodes = array![[1.0, 1.0, 1.0], [-1.0, 0.0, 2.0], [0.5, 0.5, -0.5], [3.0, 0.0, 0.0]];
        let pc = [0, 1, 1];
        let nc = [1, 0, 0, 1];
        let t = similarity_table(&prompt, &pc, &nodes, &nc, 2);
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let rows = |m: &Array2<f64>, i: usize| m.row(i).to_vec();
        let mut scale: f64 = 0.0;
        for i in 0..4 {
            for j in 0..4 {
                scale = scale.max(d(&rows(&nodes, i), &rows(&nodes, j)));
            }
        }
        for a in 0..2 {
            for b in 0..2 {
                let mut total = 0.0;
                let mut total_cos = 0.0;
                let mut n = 0.0;
                for p in (0..3).filter(|&p| pc[p] == a) {
                    for v in (0..4).filter(|&v| nc[v] == b) {
                        let (x, y) = (rows(&prompt, p), rows(&nodes, v));
                        total += d(&x, &y) / scale;
                        let dot: f64 = x.iter().zip(&y).map(|(p, q)| p * q).sum();
                        total_cos += dot / (d(&x, &[0.0; 3]) * d(&y, &[0.0; 3]));
                        n += 1.0;
                    }
                }
                assert!((t.l2[a][b] - total / n).abs() < 1e-12);
                assert!((t.cosine[a][b] - total_cos / n).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn csv_shapes() {
        let csv = embeddings_csv(&[4, 7], &[0, 1], &array![[0.5, 1.0], [2.0, 3.0]]);
        assert_eq!(csv, "node_id,label,e0,e1\n4,0,0.5,1\n7,1,2,3\n");
        let m = TransferMatrix {
            mode: TransferMode::Init,
            source_ids: vec!["s0".into()],
            target_ids: vec!["t0".into(), "t1".into()],
            baseline: vec![0.5, 0.0],
            ratios: vec![vec![Some(1.5), None]],
        };
        assert_eq!(m.to_csv(), "source,t0,t1\ns0,1.5,undefined\n");
    }
}
