//! One function per subcommand. Each creates its own run directory.

use std::fmt::Write as _;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use rayon::prelude::*;
use vntgt::checkpoint;
use vntgt::eval::{self, EvalReport, GppeMethod, LinearProbe, VntMethod};
use vntgt::gppe::{self, GPPEConfig, GPPEModule, PromptDictionary};
use vntgt::pretrain::{pretrain, LossRecord};
use vntgt::rng::derive_seed;
use vntgt::sampling::sample_source_tasks;
use vntgt::vnt::{self, PromptTensor, TaskRecord};
use vntgt::{load_dataset, ClassSplit, FewShotTask, GTModel, Graph, ModelConfig, NodeInputs};

use crate::config::{ModelParams, RunConfig};
use crate::rundir::RunDir;

/// Seed stream for source-task sampling, kept apart from the evaluation
/// task streams.
const SOURCE_STREAM: u64 = 0x5eed_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    Vnt,
    VntGppe,
    Probe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Axis {
    M,
    Alpha,
    WidthDepth,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum EmbedSource {
    /// No prompt attached.
    Frozen,
    Vnt,
    VntGppe,
}

struct Data {
    graph: Graph,
    split: ClassSplit,
}

fn load_data(config: &RunConfig) -> Result<Data> {
    let path = config.dataset_path()?;
    let (graph, split) = load_dataset(&path).with_context(|| format!("dataset {}", path.display()))?;
    Ok(Data { graph, split })
}

fn positions(graph: &Graph, k: usize) -> Result<Array2<f64>> {
    Ok(vntgt::positional::positional_encoding(&graph.structure(), k)?)
}

/// A pretrained encoder, frozen, with positional encodings for its graph.
struct Encoder {
    gt: GTModel,
    positions: Array2<f64>,
}

impl Encoder {
    fn load(config: &RunConfig, graph: &Graph) -> Result<Self> {
        let path = RunConfig::required(&config.paths.checkpoint, "checkpoint")?;
        let mut gt = checkpoint::load_model(&path).with_context(|| format!("checkpoint {}", path.display()))?;
        if gt.config.input_dim != graph.feature_dim() {
            bail!(
                "checkpoint expects {} attributes but the dataset has {}",
                gt.config.input_dim,
                graph.feature_dim()
            );
        }
        gt.freeze();
        let positions = positions(graph, gt.config.pos_dim)?;
        Ok(Self { gt, positions })
    }

    fn inputs<'a>(&'a self, graph: &'a Graph) -> NodeInputs<'a> {
        NodeInputs {
            features: graph.features(),
            positions: &self.positions,
        }
    }
}

fn pretrain_model(config: &RunConfig, data: &Data, params: &ModelParams) -> Result<(GTModel, Vec<LossRecord>)> {
    let model_config = ModelConfig {
        input_dim: data.graph.feature_dim(),
        hidden: params.hidden,
        layers: params.layers,
        heads: params.heads,
        pos_dim: params.pos_dim,
        seed: config.seed,
    };
    let positions = positions(&data.graph, params.pos_dim)?;
    let model = GTModel::new(model_config)?;
    let out = pretrain(&data.graph.structure(), &positions, model, &config.pretrain)?;
    Ok((out.model, out.history))
}

fn loss_csv(history: &[LossRecord]) -> String {
    let mut s = String::from("step,l_attr,l_struct,total\n");
    for r in history {
        let _ = writeln!(s, "{},{},{},{}", r.step, r.l_attr, r.l_struct, r.total);
    }
    s
}

fn source_tasks(config: &RunConfig, data: &Data, m: usize) -> Result<Vec<FewShotTask>> {
    let shape = config.eval.shape();
    Ok(sample_source_tasks(&data.graph, &data.split.base, m, shape, derive_seed(config.seed, SOURCE_STREAM))?.tasks)
}

fn gppe_config(config: &RunConfig) -> GPPEConfig {
    GPPEConfig {
        episodes: config.gppe.episodes,
        lr: config.gppe.lr,
        seed: config.seed,
    }
}

fn load_gppe(config: &RunConfig) -> Result<(PromptDictionary, GPPEModule)> {
    let dict_path = RunConfig::required(&config.paths.dictionary, "dictionary")?;
    let module_path = RunConfig::required(&config.paths.module, "module")?;
    let dict = checkpoint::load_dictionary(&dict_path).with_context(|| format!("dictionary {}", dict_path.display()))?;
    let module = checkpoint::load_module(&module_path).with_context(|| format!("module {}", module_path.display()))?;
    if !module.trained {
        bail!("GPPE module {} has not been trained", module_path.display());
    }
    let hash = dict.content_hash();
    if module.dictionary_hash != hash {
        bail!(
            "GPPE module was trained against dictionary {} but {} has hash {}",
            module.dictionary_hash,
            dict_path.display(),
            hash
        );
    }
    Ok((dict, module))
}

pub fn cmd_pretrain(config: &RunConfig) -> Result<()> {
    let data = load_data(config)?;
    let (model, history) = pretrain_model(config, &data, &config.model)?;
    let dir = RunDir::create(config, "pretrain")?;
    checkpoint::save_model(&dir.file("model.ckpt"), &model)?;
    dir.write_text("loss.csv", &loss_csv(&history))?;
    let digest = model.param_digest();
    dir.write_json(
        "summary.json",
        &serde_json::json!({
            "param_digest": digest,
            "steps": history.len(),
            "final_loss": history.last().map(|r| r.total),
        }),
    )?;
    dir.finish(&[])?;
    println!("pretrained {} steps, param_digest {digest}", history.len());
    println!("{}", dir.path.display());
    Ok(())
}

pub fn cmd_tune(config: &RunConfig, limit: Option<usize>) -> Result<()> {
    let data = load_data(config)?;
    let enc = Encoder::load(config, &data.graph)?;
    let inputs = enc.inputs(&data.graph);
    let mut tasks = eval::evaluation_tasks(&data.graph, &data.split, &config.eval)?;
    if let Some(n) = limit {
        tasks.truncate(n);
    }
    let records = tasks
        .par_iter()
        .map(|task| {
            let c = vnt::VNTConfig {
                seed: derive_seed(config.vnt.seed, task.seed),
                ..config.vnt
            };
            vnt::run_task(&enc.gt, &inputs, task, &c)
        })
        .collect::<vntgt::Result<Vec<TaskRecord>>>()?;
    let dir = RunDir::create(config, "tune")?;
    dir.write_json("tasks.json", &records)?;
    let mut csv = String::from("task_id,step,loss\n");
    for r in &records {
        for (i, l) in r.loss_history.iter().enumerate() {
            let _ = writeln!(csv, "{},{i},{l}", r.task_id);
        }
    }
    dir.write_text("loss.csv", &csv)?;
    dir.finish(&[])?;
    let acc: Vec<f64> = records.iter().map(|r| r.query_accuracy).collect();
    let (mean, ci) = eval::mean_ci95(&acc);
    println!("tuned {} tasks, query accuracy {mean:.4} ± {ci:.4}", records.len());
    println!("{}", dir.path.display());
    Ok(())
}

pub fn cmd_build_dict(config: &RunConfig) -> Result<()> {
    let data = load_data(config)?;
    let enc = Encoder::load(config, &data.graph)?;
    let sources = source_tasks(config, &data, config.gppe.m)?;
    let dict = gppe::build_dictionary(&enc.gt, &enc.inputs(&data.graph), &sources, &config.vnt)?;
    let dir = RunDir::create(config, "build-dict")?;
    checkpoint::save_dictionary(&dir.file("dictionary.bin"), &dict)?;
    dir.write_json("sources.json", &sources)?;
    dir.finish(&[])?;
    println!("dictionary of {} prompts, hash {}", dict.len(), dict.content_hash());
    println!("{}", dir.path.display());
    Ok(())
}

pub fn cmd_train_gppe(config: &RunConfig) -> Result<()> {
    let data = load_data(config)?;
    let enc = Encoder::load(config, &data.graph)?;
    let dict_path = RunConfig::required(&config.paths.dictionary, "dictionary")?;
    let dict = checkpoint::load_dictionary(&dict_path)?;
    let sources = source_tasks(config, &data, dict.len())?;
    let ids_match = sources
        .iter()
        .zip(&dict.entries)
        .all(|(t, e)| t.task_id == e.task_id);
    if !ids_match {
        bail!("dictionary entries do not match the source tasks for this config and seed");
    }
    let trained = gppe::train_gppe(&enc.gt, &enc.inputs(&data.graph), &dict, &sources, &gppe_config(config))?;
    let dir = RunDir::create(config, "train-gppe")?;
    checkpoint::save_module(&dir.file("module.bin"), &trained.module)?;
    let mut csv = String::from("episode,loss\n");
    for (i, l) in trained.history.iter().enumerate() {
        let _ = writeln!(csv, "{i},{l}");
    }
    dir.write_text("loss.csv", &csv)?;
    dir.finish(&[])?;
    println!("trained GPPE for {} episodes", trained.history.len());
    println!("{}", dir.path.display());
    Ok(())
}

fn run_eval(config: &RunConfig, data: &Data, enc: &Encoder, method: Method, unfreeze: bool) -> Result<EvalReport> {
    let inputs = enc.inputs(&data.graph);
    let report = match (method, unfreeze) {
        (Method::Vnt, true) => {
            let m = eval::FineTuneMethod {
                gt: &enc.gt,
                inputs,
                config: config.vnt,
                lr_model: config.finetune.lr_model,
            };
            eval::evaluate(&m, &data.graph, &data.split, &config.eval, 0)?
        }
        (_, true) => bail!("--ablate-unfreeze applies to the vnt method only"),
        (Method::Vnt, false) => {
            let m = VntMethod {
                gt: &enc.gt,
                inputs,
                config: config.vnt,
            };
            eval::evaluate(&m, &data.graph, &data.split, &config.eval, 0)?
        }
        (Method::Probe, false) => {
            let m = LinearProbe {
                gt: &enc.gt,
                inputs,
                steps: config.probe.steps,
                lr: config.probe.lr,
            };
            eval::evaluate(&m, &data.graph, &data.split, &config.eval, 0)?
        }
        (Method::VntGppe, false) => {
            let (dict, module) = load_gppe(config)?;
            let m = GppeMethod {
                gt: &enc.gt,
                inputs,
                module: &module,
                dictionary: &dict,
                config: config.vnt,
            };
            eval::evaluate(&m, &data.graph, &data.split, &config.eval, dict.len())?
        }
    };
    Ok(report)
}

fn summary_line(r: &EvalReport) -> String {
    format!(
        "{} {}-way {}-shot (M={}): {:.4} ± {:.4}",
        r.method, r.setting.n_way, r.setting.k_shot, r.setting.m, r.mean_accuracy, r.ci95
    )
}

pub fn cmd_eval(config: &RunConfig, method: Method, unfreeze: bool) -> Result<()> {
    let data = load_data(config)?;
    let enc = Encoder::load(config, &data.graph)?;
    let digest = enc.gt.param_digest();
    let report = run_eval(config, &data, &enc, method, unfreeze)?;
    if enc.gt.param_digest() != digest {
        bail!("encoder parameters changed during evaluation");
    }
    let dir = RunDir::create(config, "eval")?;
    dir.write_json("report.json", &report)?;
    dir.finish(&[("evaluate_seconds", report.wall_time)])?;
    println!("{}", summary_line(&report));
    println!("{}", dir.path.display());
    Ok(())
}

fn csv_field(s: &str) -> String {
    s.replace([',', '\n'], ";")
}

pub fn cmd_sweep(config: &RunConfig, axis: Axis) -> Result<()> {
    let data = load_data(config)?;
    let mut rows: Vec<(String, Result<EvalReport>)> = Vec::new();
    match axis {
        Axis::M => {
            let enc = Encoder::load(config, &data.graph)?;
            let inputs = enc.inputs(&data.graph);
            for &m in &config.sweep.m {
                let result = (|| {
                    if m == 0 {
                        return run_eval(config, &data, &enc, Method::Vnt, false);
                    }
                    let sources = source_tasks(config, &data, m)?;
                    let dict = gppe::build_dictionary(&enc.gt, &inputs, &sources, &config.vnt)?;
                    let module = gppe::train_gppe(&enc.gt, &inputs, &dict, &sources, &gppe_config(config))?.module;
                    let method = GppeMethod {
                        gt: &enc.gt,
                        inputs,
                        module: &module,
                        dictionary: &dict,
                        config: config.vnt,
                    };
                    Ok(eval::evaluate(&method, &data.graph, &data.split, &config.eval, m)?)
                })();
                rows.push((m.to_string(), result));
            }
        }
        Axis::Alpha => {
            let enc = Encoder::load(config, &data.graph)?;
            for &alpha in &config.sweep.alpha {
                let mut c = config.clone();
                c.vnt.alpha = alpha;
                let result = c
                    .vnt
                    .validate()
                    .map_err(anyhow::Error::from)
                    .and_then(|_| run_eval(&c, &data, &enc, Method::Vnt, false));
                rows.push((alpha.to_string(), result));
            }
        }
        Axis::WidthDepth => {
            for &width in &config.sweep.width {
                for &depth in &config.sweep.depth {
                    let params = ModelParams {
                        hidden: width,
                        layers: depth,
                        ..config.model
                    };
                    let result = (|| {
                        let (mut gt, _) = pretrain_model(config, &data, &params)?;
                        gt.freeze();
                        let enc = Encoder {
                            positions: positions(&data.graph, params.pos_dim)?,
                            gt,
                        };
                        run_eval(config, &data, &enc, Method::Vnt, false)
                    })();
                    rows.push((format!("{width}x{depth}"), result));
                }
            }
        }
    }
    let dir = RunDir::create(config, "sweep")?;
    let mut csv = String::from("value,mean_accuracy,ci95,error\n");
    let mut failures = 0;
    for (value, result) in &rows {
        match result {
            Ok(r) => {
                let _ = writeln!(csv, "{value},{},{},", r.mean_accuracy, r.ci95);
                println!("{value}: {}", summary_line(r));
            }
            Err(e) => {
                failures += 1;
                let _ = writeln!(csv, "{value},,,{}", csv_field(&format!("{e:#}")));
                println!("{value}: failed: {e:#}");
            }
        }
    }
    dir.write_text("sweep.csv", &csv)?;
    let reports: Vec<&EvalReport> = rows.iter().filter_map(|(_, r)| r.as_ref().ok()).collect();
    dir.write_json("reports.json", &reports)?;
    dir.finish(&[])?;
    println!("{}", dir.path.display());
    if failures > 0 {
        bail!("{failures} of {} sweep points failed (see sweep.csv)", rows.len());
    }
    Ok(())
}

pub fn cmd_export_embeddings(config: &RunConfig, source: EmbedSource, chunk: usize) -> Result<()> {
    let data = load_data(config)?;
    let enc = Encoder::load(config, &data.graph)?;
    let inputs = enc.inputs(&data.graph);
    let classes = data.split.part(config.eval.part);
    let nodes: Vec<usize> = (0..data.graph.num_nodes())
        .filter(|&v| classes.contains(&data.graph.labels()[v]))
        .collect();
    if nodes.is_empty() {
        bail!("no nodes in the {} classes", config.eval.part);
    }
    let labels: Vec<usize> = nodes.iter().map(|&v| data.graph.labels()[v]).collect();
    let prompt: Option<PromptTensor> = match source {
        EmbedSource::Frozen => None,
        EmbedSource::Vnt | EmbedSource::VntGppe => {
            let task = eval::evaluation_tasks(&data.graph, &data.split, &config.eval)?
                .into_iter()
                .next()
                .context("no evaluation task")?;
            let c = vnt::VNTConfig {
                seed: derive_seed(config.vnt.seed, task.seed),
                ..config.vnt
            };
            Some(if source == EmbedSource::Vnt {
                vnt::run_task(&enc.gt, &inputs, &task, &c)?.prompt
            } else {
                let (dict, module) = load_gppe(config)?;
                gppe::deploy(&enc.gt, &inputs, &module, &dict, &task, &c)?.refined_prompt
            })
        }
    };
    let emb = eval::embed_nodes(&enc.gt, &inputs, &nodes, prompt.as_ref(), chunk)?;
    let k = classes.len();
    let clusters = eval::clustering_metrics(&emb, &labels, k, 10, config.seed)?;
    let dir = RunDir::create(config, "export-embeddings")?;
    dir.write_text("embeddings.csv", &eval::embeddings_csv(&nodes, &labels, &emb))?;
    dir.write_json("clusters.json", &clusters)?;
    dir.finish(&[])?;
    println!("{} embeddings, NMI {:.4}, ARI {:.4}", nodes.len(), clusters.nmi, clusters.ari);
    println!("{}", dir.path.display());
    Ok(())
}
