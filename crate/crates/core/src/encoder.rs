//! The graph transformer: a linear embedding of node attributes plus
//! positional encodings, followed by `D` pre-norm transformer layers with
//! full (unmasked) self-attention over the batch.
//!
//! A prompt is a block of extra rows appended to the layer-0 embeddings.
//! Every layer then runs over `batch + P` rows; the output is split back
//! into node rows and prompt rows.

use ndarray::{s, Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{
    all_finite, gelu, gelu_grad, push_linear, push_linear_mut, softmax_rows, LayerNorm,
    LayerNormCache, Linear, Parameters,
};
use crate::rng::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Raw attribute dimension F_in.
    pub input_dim: usize,
    /// Embedding width F.
    pub hidden: usize,
    /// Number of transformer layers D.
    pub layers: usize,
    pub heads: usize,
    /// Positional encoding dimension k (0 disables it).
    pub pos_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(input_dim: usize) -> Self {
        Self {
            input_dim,
            hidden: 128,
            layers: 2,
            heads: 4,
            pos_dim: crate::positional::DEFAULT_DIM,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub norm_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

/// Intermediates of one layer's forward pass.
pub struct LayerTrace {
    norm_attn: LayerNormCache,
    attn_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    context: Array2<f64>,
    norm_ff: LayerNormCache,
    ff_in: Array2<f64>,
    ff_pre: Array2<f64>,
    ff_act: Array2<f64>,
    output: Array2<f64>,
}

impl LayerTrace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

impl TransformerLayer {
    fn init(width: usize, rng: &mut crate::rng::Rng) -> Self {
        Self {
            norm_attn: LayerNorm::new(width),
            query: Linear::init(width, width, rng),
            key: Linear::init(width, width, rng),
            value: Linear::init(width, width, rng),
            output: Linear::init(width, width, rng),
            norm_ff: LayerNorm::new(width),
            ff_in: Linear::init(width, 4 * width, rng),
            ff_out: Linear::init(4 * width, width, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            norm_attn: self.norm_attn.zeros_like(),
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            output: self.output.zeros_like(),
            norm_ff: self.norm_ff.zeros_like(),
            ff_in: self.ff_in.zeros_like(),
            ff_out: self.ff_out.zeros_like(),
        }
    }

    fn forward(&self, x: Array2<f64>, heads: usize) -> LayerTrace {
        let width = x.ncols();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (attn_in, norm_attn) = self.norm_attn.forward(&x);
        let q = self.query.forward(&attn_in);
        let k = self.key.forward(&attn_in);
        let v = self.value.forward(&attn_in);
        let mut context = Array2::zeros(x.raw_dim());
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            let p = softmax_rows(&scores);
            context.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
            probs.push(p);
        }
        let mid = &x + &self.output.forward(&context);
        let (ff_in, norm_ff) = self.norm_ff.forward(&mid);
        let ff_pre = self.ff_in.forward(&ff_in);
        let ff_act = ff_pre.mapv(gelu);
        let output = &mid + &self.ff_out.forward(&ff_act);
        LayerTrace {
            norm_attn,
            attn_in,
            q,
            k,
            v,
            probs,
            context,
            norm_ff,
            ff_in,
            ff_pre,
            ff_act,
            output,
        }
    }

    fn backward(
        &self,
        t: &LayerTrace,
        dout: &Array2<f64>,
        heads: usize,
        mut grad: Option<&mut TransformerLayer>,
    ) -> Array2<f64> {
        let width = dout.ncols();
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        // feed-forward branch
        let dact = self
            .ff_out
            .backward(&t.ff_act, dout, grad.as_deref_mut().map(|g| &mut g.ff_out));
        let dpre = dact * &t.ff_pre.mapv(gelu_grad);
        let dff_in = self
            .ff_in
            .backward(&t.ff_in, &dpre, grad.as_deref_mut().map(|g| &mut g.ff_in));
        let dmid = dout
            + &self
                .norm_ff
                .backward(&t.norm_ff, &dff_in, grad.as_deref_mut().map(|g| &mut g.norm_ff));

        // attention branch
        let dcontext = self
            .output
            .backward(&t.context, &dmid, grad.as_deref_mut().map(|g| &mut g.output));
        let mut dq = Array2::zeros(t.q.raw_dim());
        let mut dk = Array2::zeros(t.k.raw_dim());
        let mut dv = Array2::zeros(t.v.raw_dim());
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &t.probs[h];
            let dctx = dcontext.slice(cols);
            let dp = dctx.dot(&t.v.slice(cols).t());
            dv.slice_mut(cols).assign(&p.t().dot(&dctx));
            let mut ds = dp;
            for (mut ds_row, p_row) in ds.rows_mut().into_iter().zip(p.rows()) {
                let dot: f64 = ds_row.iter().zip(p_row.iter()).map(|(a, b)| a * b).sum();
                ds_row.zip_mut_with(&p_row, |d, &pv| *d = pv * (*d - dot));
            }
            ds.mapv_inplace(|x| x * scale);
            dq.slice_mut(cols).assign(&ds.dot(&t.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&t.q.slice(cols)));
        }
        let dattn_in = self
            .query
            .backward(&t.attn_in, &dq, grad.as_deref_mut().map(|g| &mut g.query))
            + self
                .key
                .backward(&t.attn_in, &dk, grad.as_deref_mut().map(|g| &mut g.key))
            + self
                .value
                .backward(&t.attn_in, &dv, grad.as_deref_mut().map(|g| &mut g.value));
        dmid + self.norm_attn.backward(
            &t.norm_attn,
            &dattn_in,
            grad.as_deref_mut().map(|g| &mut g.norm_attn),
        )
    }

    fn push_named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Array2<f64>)>) {
        out.push((format!("{prefix}.norm_attn.gamma"), &self.norm_attn.gamma));
        out.push((format!("{prefix}.norm_attn.beta"), &self.norm_attn.beta));
        push_linear(&self.query, &format!("{prefix}.query"), out);
        push_linear(&self.key, &format!("{prefix}.key"), out);
        push_linear(&self.value, &format!("{prefix}.value"), out);
        push_linear(&self.output, &format!("{prefix}.output"), out);
        out.push((format!("{prefix}.norm_ff.gamma"), &self.norm_ff.gamma));
        out.push((format!("{prefix}.norm_ff.beta"), &self.norm_ff.beta));
        push_linear(&self.ff_in, &format!("{prefix}.ff_in"), out);
        push_linear(&self.ff_out, &format!("{prefix}.ff_out"), out);
    }

    fn push_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Array2<f64>>) {
        out.push(&mut self.norm_attn.gamma);
        out.push(&mut self.norm_attn.beta);
        push_linear_mut(&mut self.query, out);
        push_linear_mut(&mut self.key, out);
        push_linear_mut(&mut self.value, out);
        push_linear_mut(&mut self.output, out);
        out.push(&mut self.norm_ff.gamma);
        out.push(&mut self.norm_ff.beta);
        push_linear_mut(&mut self.ff_in, out);
        push_linear_mut(&mut self.ff_out, out);
    }
}

/// Raw per-node inputs: attributes and positional encodings, both `V x _`.
#[derive(Debug, Clone, Copy)]
pub struct NodeInputs<'a> {
    pub features: &'a Array2<f32>,
    pub positions: &'a Array2<f64>,
}

impl NodeInputs<'_> {
    pub fn gather(&self, nodes: &[usize]) -> (Array2<f64>, Array2<f64>) {
        let f = self.features.ncols();
        let k = self.positions.ncols();
        let mut x = Array2::zeros((nodes.len(), f));
        let mut p = Array2::zeros((nodes.len(), k));
        for (i, &n) in nodes.iter().enumerate() {
            x.row_mut(i)
                .zip_mut_with(&self.features.row(n), |a, &b| *a = f64::from(b));
            p.row_mut(i).assign(&self.positions.row(n));
        }
        (x, p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GTModel {
    pub config: ModelConfig,
    pub attr_projection: Linear,
    pub pos_projection: Linear,
    pub layers: Vec<TransformerLayer>,
    pub frozen: bool,
}

/// Forward output split into node rows and (if a prompt was attached)
/// prompt rows.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub nodes: Array2<f64>,
    pub prompt: Option<Array2<f64>>,
}

/// Full forward trace for backpropagation.
pub struct Trace {
    pub(crate) layers: Vec<LayerTrace>,
    num_nodes: usize,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("at least one layer").output()
    }

    /// Row counts of every layer output, in order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.output.dim()).collect()
    }

    pub fn node_rows(&self) -> ArrayView2<'_, f64> {
        self.output().slice(s![..self.num_nodes, ..])
    }

    pub fn prompt_rows(&self) -> ArrayView2<'_, f64> {
        self.output().slice(s![self.num_nodes.., ..])
    }
}

impl GTModel {
    /// Deterministic init from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng(config.seed);
        let attr_projection = Linear::init(config.input_dim, config.hidden, &mut r);
        let pos_projection = Linear::init(config.pos_dim, config.hidden, &mut r);
        let layers = (0..config.layers)
            .map(|_| TransformerLayer::init(config.hidden, &mut r))
            .collect();
        Ok(Self {
            config,
            attr_projection,
            pos_projection,
            layers,
            frozen: false,
        })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            config: self.config,
            attr_projection: self.attr_projection.zeros_like(),
            pos_projection: self.pos_projection.zeros_like(),
            layers: self.layers.iter().map(TransformerLayer::zeros_like).collect(),
            frozen: self.frozen,
        }
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Layer-0 embeddings: `attr_projection(x) + pos_projection(pos)`.
    pub fn embed_rows(&self, attrs: &Array2<f64>, positions: &Array2<f64>) -> Result<Array2<f64>> {
        if attrs.ncols() != self.attr_projection.in_dim() {
            return Err(Error::Shape(format!(
                "attributes have {} columns, model expects {}",
                attrs.ncols(),
                self.attr_projection.in_dim()
            )));
        }
        if positions.ncols() != self.pos_projection.in_dim() {
            return Err(Error::Shape(format!(
                "positional encodings have {} columns, model expects {}",
                positions.ncols(),
                self.pos_projection.in_dim()
            )));
        }
        Ok(self.attr_projection.forward(attrs) + self.pos_projection.forward(positions))
    }

    pub fn embed(&self, inputs: &NodeInputs<'_>, nodes: &[usize]) -> Result<Array2<f64>> {
        let (x, p) = inputs.gather(nodes);
        self.embed_rows(&x, &p)
    }

    fn check_width(&self, x: &Array2<f64>, what: &str) -> Result<()> {
        if x.ncols() != self.config.hidden {
            return Err(Error::Shape(format!(
                "{what} has width {}, model width is {}",
                x.ncols(),
                self.config.hidden
            )));
        }
        Ok(())
    }

    /// Runs the layer stack over `[e0 || prompt]`.
    pub fn forward(&self, e0: &Array2<f64>, prompt: Option<&Array2<f64>>) -> Result<ForwardOutput> {
        let trace = self.forward_traced(e0, prompt)?;
        let nodes = trace.node_rows().to_owned();
        let prompt = prompt.map(|_| trace.prompt_rows().to_owned());
        Ok(ForwardOutput { nodes, prompt })
    }

    pub fn forward_traced(&self, e0: &Array2<f64>, prompt: Option<&Array2<f64>>) -> Result<Trace> {
        self.check_width(e0, "node embedding")?;
        let input = match prompt {
            Some(p) => {
                self.check_width(p, "prompt")?;
                ndarray::concatenate![ndarray::Axis(0), *e0, *p]
            }
            None => e0.clone(),
        };
        let mut x = input;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (d, layer) in self.layers.iter().enumerate() {
            let t = layer.forward(x, self.config.heads);
            if !all_finite(&t.output) {
                return Err(Error::numerical("transformer layer", d + 1));
            }
            x = t.output.clone();
            layers.push(t);
        }
        Ok(Trace {
            layers,
            num_nodes: e0.nrows(),
        })
    }

    /// Backpropagates `dout` (same shape as the traced output) to the
    /// layer-0 input rows, accumulating parameter gradients into `grad`.
    pub fn backward(&self, trace: &Trace, dout: &Array2<f64>, mut grad: Option<&mut GTModel>) -> Array2<f64> {
        let mut d = dout.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let g = grad.as_deref_mut().map(|g| &mut g.layers[i]);
            d = layer.backward(&trace.layers[i], &d, self.config.heads, g);
        }
        d
    }

    /// Gradient of the embedding layer given `de0` for rows built from
    /// `attrs` / `positions`.
    pub fn embed_backward(&self, attrs: &Array2<f64>, positions: &Array2<f64>, de0: &Array2<f64>, grad: &mut GTModel) {
        self.attr_projection
            .backward(attrs, de0, Some(&mut grad.attr_projection));
        self.pos_projection
            .backward(positions, de0, Some(&mut grad.pos_projection));
    }

    /// SHA-256 over the config and every parameter tensor in canonical
    /// order (name, shape, little-endian f64 bits). The freeze flag is not
    /// part of the digest.
    pub fn param_digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.config).expect("config serializes"));
        for (name, t) in self.named_tensors() {
            digest_tensor(&mut h, &name, t);
        }
        hex::encode(h.finalize())
    }
}

pub(crate) fn digest_tensor(h: &mut Sha256, name: &str, t: &Array2<f64>) {
    h.update(name.as_bytes());
    h.update((t.nrows() as u64).to_le_bytes());
    h.update((t.ncols() as u64).to_le_bytes());
    for x in t.iter() {
        h.update(x.to_bits().to_le_bytes());
    }
}

impl Parameters for GTModel {
    fn named_tensors(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = Vec::new();
        push_linear(&self.attr_projection, "attr_projection", &mut out);
        push_linear(&self.pos_projection, "pos_projection", &mut out);
        for (i, l) in self.layers.iter().enumerate() {
            l.push_named(&format!("layers.{i}"), &mut out);
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = Vec::new();
        push_linear_mut(&mut self.attr_projection, &mut out);
        push_linear_mut(&mut self.pos_projection, &mut out);
        for l in &mut self.layers {
            l.push_mut(&mut out);
        }
        out
    }
}
