//! Transformer window classifier: input projection, sinusoidal positional
//! encoding, stacked self-attention encoder layers (post-norm), global average
//! pooling, and a linear softmax head.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ChannelStats;
use crate::error::ModelError;
use crate::graph::{softmax_in_place, Graph, NodeId};
use crate::tensor::Tensor;

/// Feed-forward activation. The recipe does not fix one; GELU is the default.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "gelu" => Some(Self::Gelu),
            "relu" => Some(Self::Relu),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Gelu => "gelu",
            Self::Relu => "relu",
        }
    }
}

/// Architecture hyperparameters.
///
/// Defaults are sized to train a synthetic cohort on one CPU core in minutes;
/// every field is configurable.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Input channels per timestep (6: three accelerometer, three gyroscope).
    pub input_dim: usize,
    /// Samples per window.
    pub seq_len: usize,
    /// Latent width after the input projection.
    pub latent_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_p: f64,
    pub num_classes: usize,
    pub seed: u64,
    pub activation: Activation,
    /// Disable to make the encoder order-free (useful for ablation).
    pub positional_encoding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 6,
            seq_len: 100,
            latent_dim: 16,
            num_layers: 1,
            num_heads: 2,
            ffn_dim: 32,
            dropout_p: 0.1,
            num_classes: 3,
            seed: 42,
            activation: Activation::Gelu,
            positional_encoding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.input_dim == 0
            || self.seq_len == 0
            || self.latent_dim == 0
            || self.num_layers == 0
            || self.num_heads == 0
            || self.ffn_dim == 0
        {
            return bad("all dimensions must be positive".into());
        }
        if !self.latent_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "latent_dim {} not divisible by num_heads {}",
                self.latent_dim, self.num_heads
            ));
        }
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        if self.positional_encoding && !self.latent_dim.is_multiple_of(2) {
            return Err(ModelError::OddLatentDim(self.latent_dim));
        }
        Ok(())
    }

    /// Total learned scalars, fully determined by the config.
    pub fn param_count(&self) -> usize {
        let m = self.latent_dim;
        let proj = self.input_dim * m + m;
        let per_layer = 4 * (m * m + m)          // q, k, v, out projections
            + 2 * (2 * m)                        // two layer norms
            + (m * self.ffn_dim + self.ffn_dim)  // ffn in
            + (self.ffn_dim * m + m); // ffn out
        let head = m * self.num_classes + self.num_classes;
        proj + self.num_layers * per_layer + head
    }
}

/// Ordered set of named parameter tensors. Order is fixed at init time and
/// shared with optimizer state and gradient extraction.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensor(&self, idx: usize) -> &Tensor {
        &self.entries[idx].1
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.entries.iter().map(|(_, t)| t.numel()).collect()
    }

    pub fn total_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Move parameter data out as flat buffers (for optimizer updates).
    pub fn take_buffers(&mut self) -> Vec<Vec<f64>> {
        self.entries
            .iter_mut()
            .map(|(_, t)| std::mem::replace(t, Tensor::zeros(vec![0])).into_data())
            .collect()
    }

    /// Restore buffers taken with [`ParamSet::take_buffers`] (same order).
    pub fn restore_buffers(&mut self, shapes: &[Vec<usize>], buffers: Vec<Vec<f64>>) {
        for (((_, t), shape), buf) in self.entries.iter_mut().zip(shapes).zip(buffers) {
            *t = Tensor::new(shape.clone(), buf).expect("restore preserves shapes");
        }
    }

    pub fn shapes(&self) -> Vec<Vec<usize>> {
        self.entries.iter().map(|(_, t)| t.shape().to_vec()).collect()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Self {
        Self { entries }
    }
}

/// Split/seed bookkeeping carried by a trained bundle so evaluation can
/// reconstruct the exact held-out windows.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainMeta {
    pub split_seed: u64,
    pub train_frac: f64,
}

/// Everything needed to run the classifier on new windows: config, learned
/// parameters, class names, and the normalization statistics frozen from the
/// training split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierBundle {
    pub config: ModelConfig,
    pub class_names: Vec<String>,
    pub params: ParamSet,
    pub norm_stats: Option<Vec<ChannelStats>>,
    pub train_meta: Option<TrainMeta>,
}

impl ClassifierBundle {
    pub fn norm_stats(&self) -> Result<&[ChannelStats], ModelError> {
        self.norm_stats
            .as_deref()
            .ok_or(ModelError::MissingNormStats)
    }
}

/// Deterministic parameter initialization from `config.seed`.
///
/// Weight matrices use Xavier-uniform limits; the classifier head is scaled
/// down so a fresh model emits near-uniform class probabilities (initial loss
/// close to ln K).
pub fn init_params(config: &ModelConfig, class_names: &[String]) -> Result<ClassifierBundle, ModelError> {
    config.validate()?;
    if class_names.len() != config.num_classes {
        return Err(ModelError::InvalidConfig(format!(
            "{} class names for {} classes",
            class_names.len(),
            config.num_classes
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let m = config.latent_dim;
    let mut entries = Vec::new();

    let xavier = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, gain: f64| {
        let limit = gain * (6.0 / (rows + cols) as f64).sqrt();
        let data: Vec<f64> = (0..rows * cols)
            .map(|_| rng.random::<f64>() * 2.0 * limit - limit)
            .collect();
        Tensor::new(vec![rows, cols], data).expect("sized buffer")
    };

    entries.push(("proj.w".into(), xavier(&mut rng, config.input_dim, m, 1.0)));
    entries.push(("proj.b".into(), Tensor::zeros(vec![m])));
    for l in 0..config.num_layers {
        for part in ["wq", "wk", "wv", "wo"] {
            entries.push((format!("layer{l}.attn.{part}"), xavier(&mut rng, m, m, 1.0)));
            entries.push((format!("layer{l}.attn.{}", part.replace('w', "b")), Tensor::zeros(vec![m])));
        }
        entries.push((format!("layer{l}.ln1.gamma"), Tensor::filled(vec![m], 1.0)));
        entries.push((format!("layer{l}.ln1.beta"), Tensor::zeros(vec![m])));
        entries.push((format!("layer{l}.ffn.w1"), xavier(&mut rng, m, config.ffn_dim, 1.0)));
        entries.push((format!("layer{l}.ffn.b1"), Tensor::zeros(vec![config.ffn_dim])));
        entries.push((format!("layer{l}.ffn.w2"), xavier(&mut rng, config.ffn_dim, m, 1.0)));
        entries.push((format!("layer{l}.ffn.b2"), Tensor::zeros(vec![m])));
        entries.push((format!("layer{l}.ln2.gamma"), Tensor::filled(vec![m], 1.0)));
        entries.push((format!("layer{l}.ln2.beta"), Tensor::zeros(vec![m])));
    }
    entries.push(("head.w".into(), xavier(&mut rng, m, config.num_classes, 0.1)));
    entries.push(("head.b".into(), Tensor::zeros(vec![config.num_classes])));

    Ok(ClassifierBundle {
        config: config.clone(),
        class_names: class_names.to_vec(),
        params: ParamSet::from_entries(entries),
        norm_stats: None,
        train_meta: None,
    })
}

/// Fixed sinusoidal positional table: `PE[pos, 2i] = sin(pos / 10000^(2i/m))`,
/// `PE[pos, 2i+1] = cos(...)`. Requires an even dimension.
pub fn positional_encoding(seq_len: usize, dim: usize) -> Result<Tensor, ModelError> {
    if !dim.is_multiple_of(2) {
        return Err(ModelError::OddLatentDim(dim));
    }
    let mut data = vec![0.0; seq_len * dim];
    for pos in 0..seq_len {
        for i in 0..dim / 2 {
            let rate = 1.0 / 10000_f64.powf(2.0 * i as f64 / dim as f64);
            let angle = pos as f64 * rate;
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Ok(Tensor::new(vec![seq_len, dim], data).expect("sized buffer"))
}

/// A recorded forward pass: the tape, the logits node, and the parameter
/// leaves in `ParamSet` order (for gradient extraction).
pub struct ForwardPass {
    pub graph: Graph,
    pub logits: NodeId,
    pub param_nodes: Vec<NodeId>,
}

/// Run the encoder on a normalized batch of shape `[B, seq_len, input_dim]`.
///
/// `train_mode` enables dropout (after attention output, after the FFN
/// output, and before the classifier head), which draws from `rng`; pass
/// `None` for evaluation. Evaluation is a pure function of (bundle, batch).
pub fn forward(
    bundle: &ClassifierBundle,
    batch: &Tensor,
    train_mode: bool,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardPass, ModelError> {
    build_forward(bundle, batch, train_mode, rng, true)
}

/// Evaluation-only forward: parameters enter the tape as constants, so no
/// gradient bookkeeping happens and attention skips saving its
/// probabilities. `param_nodes` is empty on the result.
pub fn forward_inference(
    bundle: &ClassifierBundle,
    batch: &Tensor,
) -> Result<ForwardPass, ModelError> {
    build_forward(bundle, batch, false, None, false)
}

fn build_forward(
    bundle: &ClassifierBundle,
    batch: &Tensor,
    train_mode: bool,
    mut rng: Option<&mut ChaCha8Rng>,
    track_grads: bool,
) -> Result<ForwardPass, ModelError> {
    let cfg = &bundle.config;
    let (b, rest) = match batch.shape() {
        [b, n, d] if *n == cfg.seq_len && *d == cfg.input_dim => (*b, cfg.seq_len * cfg.input_dim),
        other => {
            return Err(ModelError::BatchShape {
                got: other.to_vec(),
                seq: cfg.seq_len,
                dim: cfg.input_dim,
            })
        }
    };
    let _ = rest;
    let dropout_active = train_mode && cfg.dropout_p > 0.0;
    if dropout_active && rng.is_none() {
        return Err(ModelError::InvalidConfig(
            "train-mode forward with dropout requires an RNG".into(),
        ));
    }

    let mut g = Graph::new();
    let flat = Tensor::new(
        vec![b * cfg.seq_len, cfg.input_dim],
        batch.data().to_vec(),
    )?;
    let x = g.leaf(flat, false);

    let mut param_nodes = Vec::with_capacity(bundle.params.len());
    for (_, tensor) in bundle.params.iter() {
        param_nodes.push(g.leaf(tensor.clone(), track_grads));
    }
    let node = |name: &str| -> NodeId {
        let idx = bundle
            .params
            .iter()
            .position(|(n, _)| n == name)
            .expect("parameter exists");
        param_nodes[idx]
    };

    let dropout = |g: &mut Graph, x: NodeId, rng: &mut Option<&mut ChaCha8Rng>| {
        if dropout_active {
            let r = rng.as_deref_mut().expect("checked above");
            g.dropout(x, cfg.dropout_p, r)
        } else {
            Ok(x)
        }
    };

    // Input projection into the latent space, plus positional encoding.
    let mut h = g.linear(x, node("proj.w"), node("proj.b"))?;
    if cfg.positional_encoding {
        let pe = g.constant(positional_encoding(cfg.seq_len, cfg.latent_dim)?);
        h = g.add_cyclic(h, pe, cfg.seq_len)?;
    }

    for l in 0..cfg.num_layers {
        let p = |part: &str| node(&format!("layer{l}.{part}"));

        let q = g.linear(h, p("attn.wq"), p("attn.bq"))?;
        let k = g.linear(h, p("attn.wk"), p("attn.bk"))?;
        let v = g.linear(h, p("attn.wv"), p("attn.bv"))?;
        let ctx = g.attention(q, k, v, b, cfg.seq_len, cfg.num_heads)?;
        let mut attn_out = g.linear(ctx, p("attn.wo"), p("attn.bo"))?;
        attn_out = dropout(&mut g, attn_out, &mut rng)?;
        let res1 = g.add(h, attn_out)?;
        h = g.layer_norm(res1, p("ln1.gamma"), p("ln1.beta"))?;

        let mut f = g.linear(h, p("ffn.w1"), p("ffn.b1"))?;
        f = match cfg.activation {
            Activation::Gelu => g.gelu(f)?,
            Activation::Relu => g.relu(f)?,
        };
        let mut ffn_out = g.linear(f, p("ffn.w2"), p("ffn.b2"))?;
        ffn_out = dropout(&mut g, ffn_out, &mut rng)?;
        let res2 = g.add(h, ffn_out)?;
        h = g.layer_norm(res2, p("ln2.gamma"), p("ln2.beta"))?;
    }

    let mut pooled = g.mean_pool(h, b, cfg.seq_len)?;
    pooled = dropout(&mut g, pooled, &mut rng)?;
    let logits = g.linear(pooled, node("head.w"), node("head.b"))?;

    Ok(ForwardPass {
        graph: g,
        logits,
        param_nodes: if track_grads { param_nodes } else { Vec::new() },
    })
}

/// Class predictions with probabilities.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub classes: Vec<usize>,
    /// Row-major `[B, num_classes]` softmax probabilities.
    pub probabilities: Tensor,
}

/// Evaluation-mode forward plus softmax and argmax. Ties break toward the
/// lowest class index.
pub fn predict(bundle: &ClassifierBundle, batch: &Tensor) -> Result<Prediction, ModelError> {
    let pass = forward_inference(bundle, batch)?;
    let logits = pass.graph.value(pass.logits);
    let k = bundle.config.num_classes;
    let mut probs = logits.data().to_vec();
    let mut classes = Vec::with_capacity(probs.len() / k);
    for row in probs.chunks_mut(k) {
        softmax_in_place(row);
        classes.push(argmax(row));
    }
    Ok(Prediction {
        classes,
        probabilities: Tensor::new(vec![logits.shape()[0], k], probs)?,
    })
}

/// Index of the largest value; the first occurrence wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
