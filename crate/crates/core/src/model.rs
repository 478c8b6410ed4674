//! Small end-to-end classifier around a pooling stage:
//! per-instance encoder, bag aggregator, linear head, softmax cross-entropy.
//!
//! The encoder stands in for a frozen vision tower and the head for the
//! downstream model that consumes the fused embedding. Any of the three
//! blocks can be frozen; frozen arrays are never written.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::baselines::{self, ConcatProjParams, DEFAULT_MAX_IMAGES};
use crate::error::{MivcError, Result};
use crate::numkern::{matvec_into, matvec_t_acc, Matrix, Rng, Vector};
use crate::par::Exec;
use crate::pooling::{self, Bag, InstanceEmbedding, PooledOutput, PoolingKind, PoolingParams, DEFAULT_HIDDEN};

/// How a bag becomes one embedding: one of the four pooling operators or
/// one of the three baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Single,
    ConcatGrid,
    ConcatEmbed,
    Avg,
    Max,
    Attn,
    Gated,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Single,
        Strategy::ConcatGrid,
        Strategy::ConcatEmbed,
        Strategy::Avg,
        Strategy::Max,
        Strategy::Attn,
        Strategy::Gated,
    ];

    pub fn pooling_kind(self) -> Option<PoolingKind> {
        match self {
            Strategy::Avg => Some(PoolingKind::Avg),
            Strategy::Max => Some(PoolingKind::Max),
            Strategy::Attn => Some(PoolingKind::Attn),
            Strategy::Gated => Some(PoolingKind::Gated),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Single => "single",
            Strategy::ConcatGrid => "concat-grid",
            Strategy::ConcatEmbed => "concat-embed",
            Strategy::Avg => "avg",
            Strategy::Max => "max",
            Strategy::Attn => "attn",
            Strategy::Gated => "gated",
        }
    }

    fn code(self) -> usize {
        Strategy::ALL.iter().position(|&s| s == self).unwrap_or(0)
    }
}

impl From<PoolingKind> for Strategy {
    fn from(kind: PoolingKind) -> Self {
        match kind {
            PoolingKind::Avg => Strategy::Avg,
            PoolingKind::Max => Strategy::Max,
            PoolingKind::Attn => Strategy::Attn,
            PoolingKind::Gated => Strategy::Gated,
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = MivcError;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                MivcError::Usage(format!(
                    "unknown strategy {s:?} (expected one of single, concat-grid, concat-embed, avg, max, attn, gated)"
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Identity,
    /// `tanh(W x + b)`
    Mlp1,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    #[serde(alias = "pooling")]
    pub strategy: Strategy,
    /// Stored instance dimension (encoder input).
    pub input_dim: usize,
    /// Embedding dimension `M` seen by the pooling stage.
    pub dim: usize,
    /// Attention hidden width `K`.
    pub hidden: usize,
    pub classes: usize,
    pub encoder: EncoderKind,
    /// `(P, D)` layout of encoder outputs, used by the grid baseline.
    pub patch_shape: Option<(usize, usize)>,
    pub concat_max_images: usize,
    pub concat_hidden: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub freeze_pooling: bool,
    pub freeze_head: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::Attn,
            input_dim: 16,
            dim: 16,
            hidden: DEFAULT_HIDDEN,
            classes: 2,
            encoder: EncoderKind::Identity,
            patch_shape: None,
            concat_max_images: DEFAULT_MAX_IMAGES,
            concat_hidden: 32,
            optimizer: OptimizerKind::Sgd,
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            freeze_encoder: true,
            freeze_pooling: false,
            freeze_head: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MivcError::Usage(msg));
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.dim == 0 || self.input_dim == 0 {
            return bad("dimensions must be positive".into());
        }
        if self.encoder == EncoderKind::Identity && self.dim != self.input_dim {
            return bad(format!(
                "identity encoder needs dim == input_dim, got {} and {}",
                self.dim, self.input_dim
            ));
        }
        if self.strategy.pooling_kind().is_some_and(PoolingKind::is_attention) && self.hidden == 0 {
            return bad("attention pooling needs hidden >= 1".into());
        }
        if self.strategy == Strategy::ConcatEmbed && (self.concat_max_images == 0 || self.concat_hidden == 0) {
            return bad("concat-embed needs concat_max_images and concat_hidden >= 1".into());
        }
        if let Some((p, d)) = self.patch_shape {
            if p * d != self.dim || p == 0 {
                return bad(format!("patch_shape {p}x{d} does not match dim {}", self.dim));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub kind: EncoderKind,
    pub w: Option<Matrix>,
    pub b: Option<Vector>,
    pub frozen: bool,
}

impl EncoderParams {
    pub fn identity(frozen: bool) -> Self {
        EncoderParams {
            kind: EncoderKind::Identity,
            w: None,
            b: None,
            frozen,
        }
    }

    pub fn mlp1(w: Matrix, b: Vector, frozen: bool) -> Result<Self> {
        if b.len() != w.rows() {
            return Err(MivcError::shape("encoder", format!("b of length {}", w.rows()), format!("length {}", b.len())));
        }
        Ok(EncoderParams {
            kind: EncoderKind::Mlp1,
            w: Some(w),
            b: Some(b),
            frozen,
        })
    }

    fn encode(&self, x: &[f64]) -> Result<Vec<f64>> {
        match (&self.w, &self.b) {
            (Some(w), Some(b)) => {
                if w.cols() != x.len() {
                    return Err(MivcError::shape(
                        "encoder",
                        format!("input of dim {}", w.cols()),
                        format!("input of dim {}", x.len()),
                    ));
                }
                let mut out = vec![0.0; w.rows()];
                matvec_into(w, x, &mut out);
                Ok(out.iter().zip(b.iter()).map(|(h, c)| (h + c).tanh()).collect())
            }
            _ => Ok(x.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub w: Matrix,
    pub b: Vector,
    pub frozen: bool,
}

impl HeadParams {
    pub fn new(w: Matrix, b: Vector, frozen: bool) -> Result<Self> {
        if b.len() != w.rows() || w.rows() < 2 {
            return Err(MivcError::shape(
                "head",
                format!("C >= 2 and b of length {}", w.rows()),
                format!("C = {}, b of length {}", w.rows(), b.len()),
            ));
        }
        Ok(HeadParams { w, b, frozen })
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Aggregator {
    Pool(PoolingParams),
    SingleFirst,
    ConcatGrid,
    ConcatEmbed(ConcatProjParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub strategy: Strategy,
    pub encoder: EncoderParams,
    pub aggregator: Aggregator,
    pub head: HeadParams,
    pub aggregator_frozen: bool,
    /// Layout of encoder outputs for the grid baseline; `(1, M)` when unset.
    pub instance_shape: Option<(usize, usize)>,
}

/// A named, flat parameter array and its logical dims.
pub struct ParamView<'a> {
    pub name: &'static str,
    pub dims: Vec<usize>,
    pub data: &'a [f64],
    pub trainable: bool,
}

/// Output of [`Model::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub logits: Vector,
    pub pooled: PooledOutput,
}

/// Gradients for the trainable arrays of a model, in
/// [`Model::trainable_arrays_mut`] order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Gradients {
    pub arrays: Vec<(&'static str, Vec<f64>)>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.arrays.iter().find(|(n, _)| *n == name).map(|(_, g)| g.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.arrays.is_empty()
    }

    fn accumulate(&mut self, other: &Gradients) {
        if self.arrays.is_empty() {
            self.arrays = other.arrays.clone();
            return;
        }
        for ((_, acc), (_, g)) in self.arrays.iter_mut().zip(&other.arrays) {
            for (a, x) in acc.iter_mut().zip(g) {
                *a += x;
            }
        }
    }

    fn scale(&mut self, s: f64) {
        for (_, g) in &mut self.arrays {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Encoded bag plus what the encoder backward needs.
struct Encoded {
    bag: Bag,
    inputs: Vec<Vec<f64>>,
}

impl Model {
    /// Fresh model for `config`. Each block draws from its own child stream
    /// of the seed, so the head starts identical across strategies.
    pub fn init(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        let encoder = match config.encoder {
            EncoderKind::Identity => EncoderParams::identity(config.freeze_encoder),
            EncoderKind::Mlp1 => {
                let mut rng = root.fork(0);
                let w = Matrix::uniform(config.dim, config.input_dim, 1.0 / (config.input_dim as f64).sqrt(), &mut rng);
                EncoderParams::mlp1(w, Vector::zeros(config.dim), config.freeze_encoder)?
            }
        };
        let aggregator = match config.strategy {
            Strategy::Single => Aggregator::SingleFirst,
            Strategy::ConcatGrid => Aggregator::ConcatGrid,
            Strategy::ConcatEmbed => Aggregator::ConcatEmbed(ConcatProjParams::init(
                config.concat_max_images,
                config.concat_hidden,
                config.dim,
                &mut root.fork(2),
            )?),
            s => Aggregator::Pool(PoolingParams::init(
                s.pooling_kind().expect("pooling strategy"),
                config.hidden,
                config.dim,
                &mut root.fork(1),
            )?),
        };
        let mut rng = root.fork(3);
        let head = HeadParams::new(
            Matrix::uniform(config.classes, config.dim, 1.0 / (config.dim as f64).sqrt(), &mut rng),
            Vector::zeros(config.classes),
            config.freeze_head,
        )?;
        Ok(Model {
            strategy: config.strategy,
            encoder,
            aggregator,
            head,
            aggregator_frozen: config.freeze_pooling,
            instance_shape: config.patch_shape,
        })
    }

    pub fn dim(&self) -> usize {
        self.head.w.cols()
    }

    pub fn classes(&self) -> usize {
        self.head.classes()
    }

    pub fn pooling(&self) -> Option<&PoolingParams> {
        match &self.aggregator {
            Aggregator::Pool(p) => Some(p),
            _ => None,
        }
    }

    /// Every parameter array in checkpoint order.
    pub fn arrays(&self) -> Vec<ParamView<'_>> {
        let mut out = Vec::new();
        let enc = !self.encoder.frozen;
        if let (Some(w), Some(b)) = (&self.encoder.w, &self.encoder.b) {
            out.push(ParamView { name: "encoder.W", dims: vec![w.rows(), w.cols()], data: w.as_slice(), trainable: enc });
            out.push(ParamView { name: "encoder.b", dims: vec![b.len()], data: b.as_slice(), trainable: enc });
        }
        let agg = !self.aggregator_frozen;
        match &self.aggregator {
            Aggregator::Pool(p) => {
                if let Some(w) = p.w() {
                    out.push(ParamView { name: "pool.w", dims: vec![w.len()], data: w.as_slice(), trainable: agg });
                }
                if let Some(z) = p.z() {
                    out.push(ParamView { name: "pool.Z", dims: vec![z.rows(), z.cols()], data: z.as_slice(), trainable: agg });
                }
                if let Some(g) = p.g() {
                    out.push(ParamView { name: "pool.G", dims: vec![g.rows(), g.cols()], data: g.as_slice(), trainable: agg });
                }
            }
            Aggregator::ConcatEmbed(c) => {
                out.push(ParamView { name: "concat.W1", dims: vec![c.w1.rows(), c.w1.cols()], data: c.w1.as_slice(), trainable: agg });
                out.push(ParamView { name: "concat.W2", dims: vec![c.w2.rows(), c.w2.cols()], data: c.w2.as_slice(), trainable: agg });
            }
            Aggregator::SingleFirst | Aggregator::ConcatGrid => {}
        }
        let head = !self.head.frozen;
        out.push(ParamView { name: "head.W", dims: vec![self.head.w.rows(), self.head.w.cols()], data: self.head.w.as_slice(), trainable: head });
        out.push(ParamView { name: "head.b", dims: vec![self.head.b.len()], data: self.head.b.as_slice(), trainable: head });
        out
    }

    /// Mutable views of the unfrozen arrays, same order as [`Model::arrays`].
    pub fn trainable_arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out: Vec<(&'static str, &mut [f64])> = Vec::new();
        if !self.encoder.frozen {
            if let (Some(w), Some(b)) = (&mut self.encoder.w, &mut self.encoder.b) {
                out.push(("encoder.W", w.as_mut_slice()));
                out.push(("encoder.b", b.as_mut_slice()));
            }
        }
        if !self.aggregator_frozen {
            match &mut self.aggregator {
                Aggregator::Pool(p) => {
                    for (name, arr) in p.arrays_mut() {
                        let name = match name {
                            "w" => "pool.w",
                            "Z" => "pool.Z",
                            _ => "pool.G",
                        };
                        out.push((name, arr));
                    }
                }
                Aggregator::ConcatEmbed(c) => {
                    out.push(("concat.W1", c.w1.as_mut_slice()));
                    out.push(("concat.W2", c.w2.as_mut_slice()));
                }
                Aggregator::SingleFirst | Aggregator::ConcatGrid => {}
            }
        }
        if !self.head.frozen {
            out.push(("head.W", self.head.w.as_mut_slice()));
            out.push(("head.b", self.head.b.as_mut_slice()));
        }
        out
    }

    fn encode(&self, bag: &Bag) -> Result<Encoded> {
        let inputs: Vec<Vec<f64>> = bag.instances().iter().map(|i| i.values().to_vec()).collect();
        let shape = match self.instance_shape {
            Some(s) => Some(s),
            None if self.encoder.kind == EncoderKind::Identity => bag.shape(),
            None => None,
        };
        let instances = bag
            .instances()
            .iter()
            .map(|inst| {
                let e = self.encoder.encode(inst.values())?;
                match shape {
                    Some(s) => InstanceEmbedding::with_shape(e, s),
                    None => InstanceEmbedding::new(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let mut encoded = Bag::new(bag.id.clone(), instances)?;
        encoded.label = bag.label;
        if encoded.dim() != self.dim() {
            return Err(MivcError::shape(
                "model",
                format!("embeddings of dim {}", self.dim()),
                format!("dim {}", encoded.dim()),
            ));
        }
        Ok(Encoded { bag: encoded, inputs })
    }

    fn shaped_for_grid(&self, bag: &Bag) -> Result<Bag> {
        if bag.shape().is_some() {
            return Ok(bag.clone());
        }
        let shape = self.instance_shape.unwrap_or((1, bag.dim()));
        let insts = bag
            .instances()
            .iter()
            .map(|i| i.unflatten(shape))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Bag::new(bag.id.clone(), insts)?;
        out.label = bag.label;
        Ok(out)
    }

    fn aggregate(&self, bag: &Bag) -> Result<PooledOutput> {
        match &self.aggregator {
            Aggregator::Pool(p) => pooling::pool(p, bag),
            Aggregator::SingleFirst => baselines::single_first(bag),
            Aggregator::ConcatGrid => baselines::grid_pool(&self.shaped_for_grid(bag)?),
            Aggregator::ConcatEmbed(c) => Ok(PooledOutput {
                embedding: baselines::concat_project(c, bag)?,
                alpha: None,
                argmax_index: None,
                shape: bag.shape(),
            }),
        }
    }

    pub fn forward(&self, bag: &Bag) -> Result<Forward> {
        let encoded = self.encode(bag)?;
        let pooled = self.aggregate(&encoded.bag)?;
        let mut logits = vec![0.0; self.classes()];
        matvec_into(&self.head.w, pooled.embedding.as_slice(), &mut logits);
        for (l, b) in logits.iter_mut().zip(self.head.b.iter()) {
            *l += b;
        }
        Ok(Forward {
            logits: Vector::new(logits),
            pooled,
        })
    }

    pub fn predict(&self, bag: &Bag) -> Result<usize> {
        Ok(self.forward(bag)?.logits.argmax().unwrap_or(0))
    }

    fn check_label(&self, bag: &Bag) -> Result<usize> {
        let label = bag
            .label
            .ok_or_else(|| MivcError::Data(format!("bag {:?} has no label", bag.id)))?;
        if label >= self.classes() {
            return Err(MivcError::Data(format!(
                "bag {:?}: label {label} outside [0, {})",
                bag.id,
                self.classes()
            )));
        }
        Ok(label)
    }

    /// Cross-entropy of one labelled bag.
    pub fn bag_loss(&self, bag: &Bag) -> Result<f64> {
        let label = self.check_label(bag)?;
        let logits = self.forward(bag)?.logits;
        Ok(log_sum_exp(logits.as_slice()) - logits[label])
    }

    /// Loss and gradient of one labelled bag.
    pub fn bag_loss_and_grads(&self, bag: &Bag) -> Result<(f64, Gradients)> {
        let label = self.check_label(bag)?;
        let encoded = self.encode(bag)?;
        let pooled = self.aggregate(&encoded.bag)?;
        let e = pooled.embedding.as_slice();

        let mut logits = vec![0.0; self.classes()];
        matvec_into(&self.head.w, e, &mut logits);
        for (l, b) in logits.iter_mut().zip(self.head.b.iter()) {
            *l += b;
        }
        let lse = log_sum_exp(&logits);
        let loss = lse - logits[label];
        let mut d_logits: Vec<f64> = logits.iter().map(|l| (l - lse).exp()).collect();
        d_logits[label] -= 1.0;

        let mut d_e = Vector::zeros(e.len());
        matvec_t_acc(&self.head.w, &d_logits, d_e.as_mut_slice());

        let mut grads = Gradients::default();
        let need_instances = !self.encoder.frozen && self.encoder.kind == EncoderKind::Mlp1;

        // aggregator
        let (agg_grads, d_instances) = self.aggregate_backward(&encoded.bag, &d_e, need_instances)?;

        if need_instances {
            let w = self.encoder.w.as_ref().expect("mlp1 encoder has W");
            let mut d_w = Matrix::zeros(w.rows(), w.cols());
            let mut d_b = vec![0.0; w.rows()];
            for ((enc, x), d_out) in encoded.bag.instances().iter().zip(&encoded.inputs).zip(&d_instances) {
                let d_pre: Vec<f64> = enc
                    .values()
                    .iter()
                    .zip(d_out.iter())
                    .map(|(t, g)| g * (1.0 - t * t))
                    .collect();
                d_w.add_outer(1.0, &d_pre, x);
                for (db, dp) in d_b.iter_mut().zip(&d_pre) {
                    *db += dp;
                }
            }
            grads.arrays.push(("encoder.W", d_w.as_slice().to_vec()));
            grads.arrays.push(("encoder.b", d_b));
        }
        if !self.aggregator_frozen {
            grads.arrays.extend(agg_grads);
        }
        if !self.head.frozen {
            let mut d_hw = Matrix::zeros(self.head.w.rows(), self.head.w.cols());
            d_hw.add_outer(1.0, &d_logits, e);
            grads.arrays.push(("head.W", d_hw.as_slice().to_vec()));
            grads.arrays.push(("head.b", d_logits));
        }
        Ok((loss, grads))
    }

    #[allow(clippy::type_complexity)]
    fn aggregate_backward(
        &self,
        bag: &Bag,
        d_e: &Vector,
        need_instances: bool,
    ) -> Result<(Vec<(&'static str, Vec<f64>)>, Vec<Vector>)> {
        match &self.aggregator {
            Aggregator::Pool(p) => {
                if !p.kind().is_attention() && !need_instances {
                    return Ok((Vec::new(), Vec::new()));
                }
                let g = pooling::pool_backward(p, bag, d_e)?;
                let mut arrays = Vec::new();
                if let Some(w) = g.d_w {
                    arrays.push(("pool.w", w.into_inner()));
                }
                if let Some(z) = g.d_z {
                    arrays.push(("pool.Z", z.as_slice().to_vec()));
                }
                if let Some(gg) = g.d_g {
                    arrays.push(("pool.G", gg.as_slice().to_vec()));
                }
                Ok((arrays, g.d_instances))
            }
            Aggregator::SingleFirst => {
                let mut d = vec![Vector::zeros(bag.dim()); bag.len()];
                d[0] = d_e.clone();
                Ok((Vec::new(), d))
            }
            Aggregator::ConcatGrid => {
                if !need_instances {
                    return Ok((Vec::new(), Vec::new()));
                }
                Ok((Vec::new(), baselines::grid_pool_backward(&self.shaped_for_grid(bag)?, d_e)?))
            }
            Aggregator::ConcatEmbed(c) => {
                let g = baselines::concat_project_backward(c, bag, d_e)?;
                Ok((
                    vec![
                        ("concat.W1", g.d_w1.as_slice().to_vec()),
                        ("concat.W2", g.d_w2.as_slice().to_vec()),
                    ],
                    g.d_instances,
                ))
            }
        }
    }

    /// Mean cross-entropy over `bags`.
    pub fn loss(&self, bags: &[Bag]) -> Result<f64> {
        if bags.is_empty() {
            return Err(MivcError::Data("empty batch".into()));
        }
        let mut total = 0.0;
        for bag in bags {
            total += self.bag_loss(bag)?;
        }
        Ok(total / bags.len() as f64)
    }

    /// Mean loss and mean gradients over a batch.
    pub fn loss_and_grads(&self, bags: &[Bag]) -> Result<(f64, Gradients)> {
        self.loss_and_grads_with(bags, Exec::Auto)
    }

    /// [`Model::loss_and_grads`] with an explicit execution path. Per-bag
    /// results are reduced in batch order either way.
    pub fn loss_and_grads_with(&self, bags: &[Bag], exec: Exec) -> Result<(f64, Gradients)> {
        if bags.is_empty() {
            return Err(MivcError::Data("empty batch".into()));
        }
        let per_bag = exec.map(bags, |b| self.bag_loss_and_grads(b));
        let mut loss = 0.0;
        let mut grads = Gradients::default();
        for r in per_bag {
            let (l, g) = r?;
            loss += l;
            grads.accumulate(&g);
        }
        let inv = 1.0 / bags.len() as f64;
        grads.scale(inv);
        Ok((loss * inv, grads))
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().fold(0.0, |acc, x| acc + (x - max).exp()).ln()
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd {
        lr: f64,
    },
    Adam {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        step: i32,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
            OptimizerKind::Adam => Optimizer::Adam {
                lr,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                step: 0,
                m: Vec::new(),
                v: Vec::new(),
            },
        }
    }

    pub fn step(&mut self, model: &mut Model, grads: &Gradients) {
        let params = model.trainable_arrays_mut();
        debug_assert_eq!(params.len(), grads.arrays.len());
        match self {
            Optimizer::Sgd { lr } => {
                for ((_, p), (_, g)) in params.into_iter().zip(&grads.arrays) {
                    for (x, d) in p.iter_mut().zip(g) {
                        *x -= *lr * d;
                    }
                }
            }
            Optimizer::Adam { lr, beta1, beta2, eps, step, m, v } => {
                if m.is_empty() {
                    *m = grads.arrays.iter().map(|(_, g)| vec![0.0; g.len()]).collect();
                    *v = m.clone();
                }
                *step += 1;
                let c1 = 1.0 - beta1.powi(*step);
                let c2 = 1.0 - beta2.powi(*step);
                for (((_, p), (_, g)), (ms, vs)) in params.into_iter().zip(&grads.arrays).zip(m.iter_mut().zip(v.iter_mut())) {
                    for i in 0..p.len() {
                        ms[i] = *beta1 * ms[i] + (1.0 - *beta1) * g[i];
                        vs[i] = *beta2 * vs[i] + (1.0 - *beta2) * g[i] * g[i];
                        let m_hat = ms[i] / c1;
                        let v_hat = vs[i] / c2;
                        p[i] -= *lr * m_hat / (v_hat.sqrt() + *eps);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Training-set accuracy after the epoch's updates.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub initial_loss: f64,
    pub history: Vec<EpochStats>,
}

/// Fraction of `bags` whose predicted class equals the label.
pub fn accuracy(model: &Model, bags: &[Bag]) -> Result<f64> {
    if bags.is_empty() {
        return Err(MivcError::Data("no bags to score".into()));
    }
    let hits = crate::par::map(bags, |b| -> Result<bool> {
        let label = model.check_label(b)?;
        Ok(model.predict(b)? == label)
    });
    let mut correct = 0usize;
    for h in hits {
        correct += usize::from(h?);
    }
    Ok(correct as f64 / bags.len() as f64)
}

pub fn train(config: &TrainConfig, bags: &[Bag]) -> Result<TrainOutcome> {
    let model = Model::init(config)?;
    train_from(model, config, bags)
}

/// Trains `model` in place of a fresh one. Shuffling draws from its own
/// child stream of `config.seed`.
pub fn train_from(mut model: Model, config: &TrainConfig, bags: &[Bag]) -> Result<TrainOutcome> {
    config.validate()?;
    if bags.is_empty() {
        return Err(MivcError::Data("training split is empty".into()));
    }
    for b in bags {
        model.check_label(b)?;
    }
    let initial_loss = model.loss(bags)?;
    let mut rng = Rng::new(config.seed).fork(4);
    let mut optimizer = Optimizer::new(config.optimizer, config.learning_rate);
    let mut order: Vec<usize> = (0..bags.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| bags[i].clone()));
            let (loss, grads) = model.loss_and_grads(&batch)?;
            optimizer.step(&mut model, &grads);
            loss_sum += loss;
            batches += 1;
        }
        history.push(EpochStats {
            epoch: epoch + 1,
            loss: loss_sum / batches as f64,
            accuracy: accuracy(&model, bags)?,
        });
    }
    Ok(TrainOutcome {
        model,
        initial_loss,
        history,
    })
}

/// Parameter counts per block, from the shape formulas alone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamReport {
    pub strategy: Strategy,
    pub encoder: usize,
    pub aggregator: usize,
    pub head: usize,
    pub total: usize,
    /// Same model with a parameter-free aggregator.
    pub baseline_total: usize,
    pub extra_over_baseline: usize,
}

pub fn count_params(config: &TrainConfig) -> ParamReport {
    let (m, k) = (config.dim, config.hidden);
    let encoder = match config.encoder {
        EncoderKind::Identity => 0,
        EncoderKind::Mlp1 => m * config.input_dim + m,
    };
    let aggregator = match config.strategy {
        Strategy::Attn => k * (m + 1),
        Strategy::Gated => k * (2 * m + 1),
        Strategy::ConcatEmbed => config.concat_hidden * config.concat_max_images * m + m * config.concat_hidden,
        Strategy::Avg | Strategy::Max | Strategy::Single | Strategy::ConcatGrid => 0,
    };
    let head = config.classes * m + config.classes;
    let baseline_total = encoder + head;
    ParamReport {
        strategy: config.strategy,
        encoder,
        aggregator,
        head,
        total: baseline_total + aggregator,
        baseline_total,
        extra_over_baseline: aggregator,
    }
}

pub(crate) fn strategy_from_code(code: usize) -> Option<Strategy> {
    Strategy::ALL.get(code).copied()
}

pub(crate) fn strategy_code(s: Strategy) -> usize {
    s.code()
}
