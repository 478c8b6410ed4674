//! Multiple-instance pooling: average, max, attention and gated attention,
//! each with an exact backward pass.
//!
//! A [`Bag`] holds `N >= 1` instance embeddings of a shared dimension `M`.
//! Every operator maps the bag to one fused embedding of dimension `M` and
//! is invariant to the order of the instances. Attention kinds score each
//! instance with a small network,
//!
//! ```text
//! attn:  s_n = w . tanh(Z e_n)
//! gated: s_n = w . (tanh(Z e_n) * sigmoid(G e_n))
//! ```
//!
//! normalise the scores with a softmax into weights `alpha` on the simplex
//! and return `E = sum_n alpha_n e_n`.
//!
//! Instances that carry a 2-D shape `(P, D)` are pooled in flattened
//! row-major form; [`PooledOutput::embedding_2d`] restores the shape.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MivcError, Result};
use crate::numkern::{self, matvec_into, matvec_t_acc, sigmoid, Matrix, Rng, Vector};

/// Hidden width of the attention scorer when a config does not set one.
pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    Avg,
    Max,
    Attn,
    Gated,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 4] = [
        PoolingKind::Avg,
        PoolingKind::Max,
        PoolingKind::Attn,
        PoolingKind::Gated,
    ];

    pub fn is_attention(self) -> bool {
        matches!(self, PoolingKind::Attn | PoolingKind::Gated)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PoolingKind::Avg => "avg",
            PoolingKind::Max => "max",
            PoolingKind::Attn => "attn",
            PoolingKind::Gated => "gated",
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PoolingKind {
    type Err = MivcError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" => Ok(PoolingKind::Avg),
            "max" => Ok(PoolingKind::Max),
            "attn" => Ok(PoolingKind::Attn),
            "gated" => Ok(PoolingKind::Gated),
            other => Err(MivcError::Usage(format!(
                "unknown pooling kind {other:?} (expected avg, max, attn or gated)"
            ))),
        }
    }
}

/// One instance embedding, optionally carrying a 2-D `(patches, dims)` shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceEmbedding {
    values: Vector,
    shape: Option<(usize, usize)>,
}

impl InstanceEmbedding {
    pub fn new(values: impl Into<Vector>) -> Result<Self> {
        let values = values.into();
        if values.is_empty() {
            return Err(MivcError::shape("instance", "at least one value", "length 0"));
        }
        if !values.is_finite() {
            return Err(MivcError::Data("instance embedding contains NaN or Inf".into()));
        }
        Ok(InstanceEmbedding { values, shape: None })
    }

    pub fn with_shape(values: impl Into<Vector>, shape: (usize, usize)) -> Result<Self> {
        let mut inst = InstanceEmbedding::new(values)?;
        check_shape(inst.dim(), shape)?;
        inst.shape = Some(shape);
        Ok(inst)
    }

    /// Builds a shaped instance from its rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let m = Matrix::from_rows(rows)?;
        InstanceEmbedding::with_shape(m.as_slice().to_vec(), m.shape())
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        self.values.as_slice()
    }

    pub fn vector(&self) -> &Vector {
        &self.values
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.shape
    }

    /// Row `p` of a shaped instance.
    pub fn row(&self, p: usize) -> Option<&[f64]> {
        let (_, d) = self.shape?;
        self.values.as_slice().get(p * d..(p + 1) * d)
    }

    /// Drops the 2-D shape, leaving the row-major values.
    pub fn flatten(&self) -> Result<InstanceEmbedding> {
        if self.shape.is_none() {
            return Err(MivcError::Usage("flatten requires a shaped instance".into()));
        }
        Ok(InstanceEmbedding {
            values: self.values.clone(),
            shape: None,
        })
    }

    pub fn unflatten(&self, shape: (usize, usize)) -> Result<InstanceEmbedding> {
        check_shape(self.dim(), shape)?;
        Ok(InstanceEmbedding {
            values: self.values.clone(),
            shape: Some(shape),
        })
    }
}

fn check_shape(len: usize, (p, d): (usize, usize)) -> Result<()> {
    if p == 0 || d == 0 || p * d != len {
        return Err(MivcError::shape(
            "unflatten",
            format!("{p}x{d} = {} values", p * d),
            format!("{len} values"),
        ));
    }
    Ok(())
}

/// A labelled, order-free collection of instances sharing one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub id: String,
    instances: Vec<InstanceEmbedding>,
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, String>,
}

impl Bag {
    pub fn new(id: impl Into<String>, instances: Vec<InstanceEmbedding>) -> Result<Self> {
        let id = id.into();
        let first = instances
            .first()
            .ok_or_else(|| MivcError::Precondition(format!("bag {id:?} is empty")))?;
        let (dim, shape) = (first.dim(), first.shape());
        for (n, inst) in instances.iter().enumerate() {
            if inst.dim() != dim || inst.shape() != shape {
                return Err(MivcError::shape(
                    "bag",
                    format!("instance dim {dim} shape {shape:?}"),
                    format!("instance {n} dim {} shape {:?}", inst.dim(), inst.shape()),
                ));
            }
        }
        Ok(Bag {
            id,
            instances,
            label: None,
            meta: BTreeMap::new(),
        })
    }

    /// Unshaped bag from plain rows.
    pub fn from_rows(id: impl Into<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        let instances = rows
            .into_iter()
            .map(InstanceEmbedding::new)
            .collect::<Result<Vec<_>>>()?;
        Bag::new(id, instances)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.instances[0].dim()
    }

    pub fn shape(&self) -> Option<(usize, usize)> {
        self.instances[0].shape()
    }

    pub fn instances(&self) -> &[InstanceEmbedding] {
        &self.instances
    }

    pub fn instance(&self, n: usize) -> &[f64] {
        self.instances[n].values()
    }

    /// New bag whose instance `i` is this bag's instance `order[i]`.
    pub fn permuted(&self, order: &[usize]) -> Result<Bag> {
        let mut seen = vec![false; self.len()];
        if order.len() != self.len() || order.iter().any(|&i| i >= seen.len() || std::mem::replace(&mut seen[i], true)) {
            return Err(MivcError::Usage(format!(
                "{order:?} is not a permutation of 0..{}",
                self.len()
            )));
        }
        Ok(Bag {
            id: self.id.clone(),
            instances: order.iter().map(|&i| self.instances[i].clone()).collect(),
            label: self.label,
            meta: self.meta.clone(),
        })
    }

    /// Same bag with each instance mapped through `f`, which must preserve
    /// a common output dimension. Shapes are dropped.
    pub fn map_instances(&self, mut f: impl FnMut(&[f64]) -> Vec<f64>) -> Result<Bag> {
        let instances = self
            .instances
            .iter()
            .map(|inst| InstanceEmbedding::new(f(inst.values())))
            .collect::<Result<Vec<_>>>()?;
        let mut bag = Bag::new(self.id.clone(), instances)?;
        bag.label = self.label;
        bag.meta = self.meta.clone();
        Ok(bag)
    }
}

/// Learnable arrays of one pooling operator. `avg` and `max` carry none.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolingParams {
    kind: PoolingKind,
    w: Option<Vector>,
    z: Option<Matrix>,
    g: Option<Matrix>,
}

impl PoolingParams {
    pub fn avg() -> Self {
        PoolingParams {
            kind: PoolingKind::Avg,
            w: None,
            z: None,
            g: None,
        }
    }

    pub fn max() -> Self {
        PoolingParams {
            kind: PoolingKind::Max,
            ..PoolingParams::avg()
        }
    }

    pub fn attention(w: Vector, z: Matrix) -> Result<Self> {
        if w.len() != z.rows() || w.is_empty() || z.cols() == 0 {
            return Err(MivcError::shape(
                "attention params",
                format!("w of length {} for Z {}x{}", z.rows(), z.rows(), z.cols()),
                format!("w of length {}", w.len()),
            ));
        }
        Ok(PoolingParams {
            kind: PoolingKind::Attn,
            w: Some(w),
            z: Some(z),
            g: None,
        })
    }

    pub fn gated(w: Vector, z: Matrix, g: Matrix) -> Result<Self> {
        let mut params = PoolingParams::attention(w, z)?;
        let zs = params.z.as_ref().map(Matrix::shape).unwrap_or_default();
        if g.shape() != zs {
            return Err(MivcError::shape(
                "gated params",
                format!("G {}x{}", zs.0, zs.1),
                format!("G {}x{}", g.rows(), g.cols()),
            ));
        }
        params.kind = PoolingKind::Gated;
        params.g = Some(g);
        Ok(params)
    }

    /// Fresh parameters for `kind`, attention arrays drawn uniformly from
    /// `[-1/sqrt(K), 1/sqrt(K)]` in the order w, Z, G.
    pub fn init(kind: PoolingKind, hidden: usize, dim: usize, rng: &mut Rng) -> Result<Self> {
        if kind.is_attention() && (hidden == 0 || dim == 0) {
            return Err(MivcError::Usage(format!(
                "attention pooling needs K >= 1 and M >= 1, got K={hidden} M={dim}"
            )));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        match kind {
            PoolingKind::Avg => Ok(PoolingParams::avg()),
            PoolingKind::Max => Ok(PoolingParams::max()),
            PoolingKind::Attn => {
                let w = rng.uniform_vector(hidden, bound);
                let z = Matrix::uniform(hidden, dim, bound, rng);
                PoolingParams::attention(w, z)
            }
            PoolingKind::Gated => {
                let w = rng.uniform_vector(hidden, bound);
                let z = Matrix::uniform(hidden, dim, bound, rng);
                let g = Matrix::uniform(hidden, dim, bound, rng);
                PoolingParams::gated(w, z, g)
            }
        }
    }

    pub fn kind(&self) -> PoolingKind {
        self.kind
    }

    /// Attention hidden width `K`.
    pub fn hidden(&self) -> Option<usize> {
        self.w.as_ref().map(Vector::len)
    }

    /// Instance dimension `M` the scorer expects.
    pub fn input_dim(&self) -> Option<usize> {
        self.z.as_ref().map(Matrix::cols)
    }

    pub fn w(&self) -> Option<&Vector> {
        self.w.as_ref()
    }

    pub fn z(&self) -> Option<&Matrix> {
        self.z.as_ref()
    }

    pub fn g(&self) -> Option<&Matrix> {
        self.g.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.arrays().iter().map(|(_, a)| a.len()).sum()
    }

    /// Named flat views in the fixed order w, Z, G.
    pub fn arrays(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        if let Some(w) = &self.w {
            out.push(("w", w.as_slice()));
        }
        if let Some(z) = &self.z {
            out.push(("Z", z.as_slice()));
        }
        if let Some(g) = &self.g {
            out.push(("G", g.as_slice()));
        }
        out
    }

    pub fn arrays_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        let mut out = Vec::new();
        if let Some(w) = &mut self.w {
            out.push(("w", w.as_mut_slice()));
        }
        if let Some(z) = &mut self.z {
            out.push(("Z", z.as_mut_slice()));
        }
        if let Some(g) = &mut self.g {
            out.push(("G", g.as_mut_slice()));
        }
        out
    }

    fn check_bag(&self, bag: &Bag) -> Result<()> {
        if let Some(m) = self.input_dim() {
            if m != bag.dim() {
                return Err(MivcError::shape(
                    "attention",
                    format!("instances of dim {m}"),
                    format!("instances of dim {}", bag.dim()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledOutput {
    pub embedding: Vector,
    /// Instance weights; absent for max pooling.
    pub alpha: Option<Vector>,
    /// Per-dimension winning instance; max pooling only.
    pub argmax_index: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shape: Option<(usize, usize)>,
}

impl PooledOutput {
    /// The fused embedding, reshaped to the bag's 2-D instance shape when
    /// it had one.
    pub fn embedding_2d(&self) -> Result<InstanceEmbedding> {
        match self.shape {
            Some(shape) => InstanceEmbedding::with_shape(self.embedding.clone(), shape),
            None => InstanceEmbedding::new(self.embedding.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolGradients {
    pub d_w: Option<Vector>,
    pub d_z: Option<Matrix>,
    pub d_g: Option<Matrix>,
    pub d_instances: Vec<Vector>,
}

impl PoolGradients {
    /// Parameter gradients in the same order as [`PoolingParams::arrays`].
    pub fn param_arrays(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = Vec::new();
        if let Some(w) = &self.d_w {
            out.push(("w", w.as_slice()));
        }
        if let Some(z) = &self.d_z {
            out.push(("Z", z.as_slice()));
        }
        if let Some(g) = &self.d_g {
            out.push(("G", g.as_slice()));
        }
        out
    }
}

pub fn pool_avg(bag: &Bag) -> Result<PooledOutput> {
    if bag.is_empty() {
        return Err(MivcError::Precondition("cannot pool an empty bag".into()));
    }
    let n = bag.len();
    let mut sum = Vector::zeros(bag.dim());
    for inst in bag.instances() {
        sum.axpy(1.0, inst.values());
    }
    let inv = 1.0 / n as f64;
    Ok(PooledOutput {
        embedding: sum.scaled(inv),
        alpha: Some(Vector::filled(n, inv)),
        argmax_index: None,
        shape: bag.shape(),
    })
}

/// Per-dimension maximum across instances; ties go to the lowest index.
pub fn pool_max(bag: &Bag) -> Result<PooledOutput> {
    if bag.is_empty() {
        return Err(MivcError::Precondition("cannot pool an empty bag".into()));
    }
    let mut best = bag.instance(0).to_vec();
    let mut index = vec![0usize; bag.dim()];
    for n in 1..bag.len() {
        for (m, &x) in bag.instance(n).iter().enumerate() {
            if x > best[m] {
                best[m] = x;
                index[m] = n;
            }
        }
    }
    Ok(PooledOutput {
        embedding: Vector::new(best),
        alpha: None,
        argmax_index: Some(index),
        shape: bag.shape(),
    })
}

/// Hidden activations for one instance, kept for the backward pass.
struct ScoreTrace {
    tanh: Vec<f64>,
    gate: Option<Vec<f64>>,
    score: f64,
}

fn require_attention(params: &PoolingParams) -> Result<(&Vector, &Matrix)> {
    match (params.kind, &params.w, &params.z) {
        (PoolingKind::Attn | PoolingKind::Gated, Some(w), Some(z)) => Ok((w, z)),
        (kind, ..) => Err(MivcError::Usage(format!(
            "attention scoring requires attn or gated params, got {kind}"
        ))),
    }
}

fn score_instances(params: &PoolingParams, bag: &Bag) -> Result<Vec<ScoreTrace>> {
    let (w, z) = require_attention(params)?;
    params.check_bag(bag)?;
    let k = w.len();
    let mut traces = Vec::with_capacity(bag.len());
    for inst in bag.instances() {
        let mut tanh = vec![0.0; k];
        matvec_into(z, inst.values(), &mut tanh);
        tanh.iter_mut().for_each(|h| *h = h.tanh());
        let (score, gate) = match &params.g {
            Some(g) => {
                let mut gate = vec![0.0; k];
                matvec_into(g, inst.values(), &mut gate);
                gate.iter_mut().for_each(|u| *u = sigmoid(*u));
                let score = w
                    .iter()
                    .zip(tanh.iter().zip(&gate))
                    .fold(0.0, |acc, (wk, (t, s))| acc + wk * (t * s));
                (score, Some(gate))
            }
            None => (numkern::dot(w.as_slice(), &tanh), None),
        };
        traces.push(ScoreTrace { tanh, gate, score });
    }
    Ok(traces)
}

/// Unnormalised attention score of every instance.
pub fn attention_scores(params: &PoolingParams, bag: &Bag) -> Result<Vector> {
    Ok(Vector::new(
        score_instances(params, bag)?.iter().map(|t| t.score).collect(),
    ))
}

fn weighted_sum(bag: &Bag, alpha: &[f64]) -> Vector {
    let mut e = Vector::zeros(bag.dim());
    for (inst, &a) in bag.instances().iter().zip(alpha) {
        e.axpy(a, inst.values());
    }
    e
}

pub fn pool_attention(params: &PoolingParams, bag: &Bag) -> Result<PooledOutput> {
    let scores = attention_scores(params, bag)?;
    let alpha = numkern::softmax_stable(&scores)?;
    Ok(PooledOutput {
        embedding: weighted_sum(bag, alpha.as_slice()),
        alpha: Some(alpha),
        argmax_index: None,
        shape: bag.shape(),
    })
}

/// Dispatches on `params.kind()`.
pub fn pool(params: &PoolingParams, bag: &Bag) -> Result<PooledOutput> {
    match params.kind {
        PoolingKind::Avg => pool_avg(bag),
        PoolingKind::Max => pool_max(bag),
        PoolingKind::Attn | PoolingKind::Gated => pool_attention(params, bag),
    }
}

/// Gradients of a scalar loss with respect to the pooling parameters and
/// every instance, given `upstream = dL/dE`.
pub fn pool_backward(params: &PoolingParams, bag: &Bag, upstream: &Vector) -> Result<PoolGradients> {
    if upstream.len() != bag.dim() {
        return Err(MivcError::shape(
            "pool_backward",
            format!("upstream gradient of length {}", bag.dim()),
            format!("length {}", upstream.len()),
        ));
    }
    match params.kind {
        PoolingKind::Avg => {
            let share = upstream.scaled(1.0 / bag.len() as f64);
            Ok(PoolGradients {
                d_w: None,
                d_z: None,
                d_g: None,
                d_instances: vec![share; bag.len()],
            })
        }
        PoolingKind::Max => {
            let out = pool_max(bag)?;
            let index = out.argmax_index.unwrap_or_default();
            let mut d_instances = vec![Vector::zeros(bag.dim()); bag.len()];
            for (m, &n) in index.iter().enumerate() {
                d_instances[n][m] = upstream[m];
            }
            Ok(PoolGradients {
                d_w: None,
                d_z: None,
                d_g: None,
                d_instances,
            })
        }
        PoolingKind::Attn | PoolingKind::Gated => attention_backward(params, bag, upstream),
    }
}

fn attention_backward(params: &PoolingParams, bag: &Bag, upstream: &Vector) -> Result<PoolGradients> {
    let (w, z) = require_attention(params)?;
    let traces = score_instances(params, bag)?;
    let scores: Vec<f64> = traces.iter().map(|t| t.score).collect();
    let alpha = numkern::softmax_slice(&scores);
    let fused = weighted_sum(bag, &alpha);
    let up = upstream.as_slice();

    // dL/ds_n = alpha_n (g . e_n - g . E)
    let g_dot_fused = numkern::dot(up, fused.as_slice());
    let k = w.len();
    let mut d_w = Vector::zeros(k);
    let mut d_z = Matrix::zeros(k, bag.dim());
    let mut d_g = params.g.as_ref().map(|g| Matrix::zeros(g.rows(), g.cols()));
    let mut d_instances = Vec::with_capacity(bag.len());
    let mut d_pre_tanh = vec![0.0; k];
    let mut d_pre_gate = vec![0.0; k];

    for (n, (inst, trace)) in bag.instances().iter().zip(&traces).enumerate() {
        let e = inst.values();
        let d_score = alpha[n] * (numkern::dot(up, e) - g_dot_fused);

        let mut d_e = Vector::new(up.iter().map(|u| alpha[n] * u).collect());
        match &trace.gate {
            None => {
                for j in 0..k {
                    let t = trace.tanh[j];
                    d_w[j] += d_score * t;
                    d_pre_tanh[j] = d_score * w[j] * (1.0 - t * t);
                }
            }
            Some(gate) => {
                for j in 0..k {
                    let (t, s) = (trace.tanh[j], gate[j]);
                    d_w[j] += d_score * t * s;
                    let dv = d_score * w[j];
                    d_pre_tanh[j] = dv * s * (1.0 - t * t);
                    d_pre_gate[j] = dv * t * s * (1.0 - s);
                }
            }
        }
        d_z.add_outer(1.0, &d_pre_tanh, e);
        matvec_t_acc(z, &d_pre_tanh, d_e.as_mut_slice());
        if let (Some(g), Some(dg)) = (&params.g, d_g.as_mut()) {
            dg.add_outer(1.0, &d_pre_gate, e);
            matvec_t_acc(g, &d_pre_gate, d_e.as_mut_slice());
        }
        d_instances.push(d_e);
    }

    Ok(PoolGradients {
        d_w: Some(d_w),
        d_z: Some(d_z),
        d_g,
        d_instances,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bag(rows: &[&[f64]]) -> Bag {
        Bag::from_rows("b", rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn attn_1x2(gated: bool) -> PoolingParams {
        let w = Vector::new(vec![1.0]);
        let z = Matrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        if gated {
            PoolingParams::gated(w, z, Matrix::zeros(1, 2)).unwrap()
        } else {
            PoolingParams::attention(w, z).unwrap()
        }
    }

    #[test]
    fn avg_examples() {
        let out = pool_avg(&bag(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        assert_eq!(out.embedding.as_slice(), &[2.0, 3.0]);
        assert_eq!(out.alpha.unwrap().as_slice(), &[0.5, 0.5]);
        let out = pool_avg(&bag(&[&[7.0, 7.0]])).unwrap();
        assert_eq!(out.embedding.as_slice(), &[7.0, 7.0]);
        assert_eq!(out.alpha.unwrap().as_slice(), &[1.0]);
        let out = pool_avg(&bag(&[&[0.0, 0.0], &[0.0, 0.0], &[3.0, 6.0]])).unwrap();
        assert_eq!(out.embedding.as_slice(), &[1.0, 2.0]);
    }

    #[test]
    fn max_examples() {
        let out = pool_max(&bag(&[&[1.0, 4.0], &[3.0, 2.0]])).unwrap();
        assert_eq!(out.embedding.as_slice(), &[3.0, 4.0]);
        assert_eq!(out.argmax_index.unwrap(), vec![1, 0]);
        assert!(out.alpha.is_none());
        assert_eq!(pool_max(&bag(&[&[5.0, 5.0]])).unwrap().embedding.as_slice(), &[5.0, 5.0]);
        let out = pool_max(&bag(&[&[1.0, 1.0], &[1.0, 2.0], &[0.0, 2.0]])).unwrap();
        assert_eq!(out.embedding.as_slice(), &[1.0, 2.0]);
        assert_eq!(out.argmax_index.unwrap(), vec![0, 1]);
    }

    #[test]
    fn empty_bag_is_rejected() {
        assert!(matches!(Bag::new("x", vec![]), Err(MivcError::Precondition(_))));
    }

    #[test]
    fn mixed_dimensions_are_rejected() {
        let err = Bag::from_rows("x", vec![vec![1.0], vec![1.0, 2.0]]).unwrap_err();
        assert!(matches!(err, MivcError::Shape { .. }));
    }

    #[test]
    fn score_examples() {
        let b = bag(&[&[0.0, 5.0], &[10.0, 5.0]]);
        let s = attention_scores(&attn_1x2(false), &b).unwrap();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 10f64.tanh()).abs() < 1e-15);
        assert!((s[1] - 0.999_999_995_9).abs() < 1e-10);
        let s = attention_scores(&attn_1x2(true), &b).unwrap();
        assert_eq!(s[0], 0.0);
        assert!((s[1] - 0.5 * 10f64.tanh()).abs() < 1e-15);
        assert!((s[1] - 0.499_999_997_95).abs() < 1e-10);

        let zero = PoolingParams::attention(Vector::zeros(3), Matrix::uniform(3, 2, 1.0, &mut Rng::new(1))).unwrap();
        assert_eq!(attention_scores(&zero, &b).unwrap().as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn scores_reject_wrong_kind_and_dim() {
        let b = bag(&[&[1.0, 2.0, 3.0]]);
        assert!(matches!(attention_scores(&PoolingParams::avg(), &b), Err(MivcError::Usage(_))));
        assert!(matches!(attention_scores(&attn_1x2(false), &b), Err(MivcError::Shape { .. })));
    }

    #[test]
    fn attention_example() {
        let b = bag(&[&[0.0, 5.0], &[10.0, 5.0]]);
        let out = pool_attention(&attn_1x2(false), &b).unwrap();
        let alpha = out.alpha.unwrap();
        // softmax([0, tanh 10]) evaluated by hand
        let t = 10f64.tanh();
        let a1 = t.exp() / (1.0 + t.exp());
        assert!((alpha[1] - a1).abs() < 1e-15);
        assert!((alpha[0] - 0.26894).abs() < 1e-5);
        assert!((alpha[1] - 0.73106).abs() < 1e-5);
        assert!((out.embedding[0] - 7.3106).abs() < 1e-4);
        assert!((out.embedding[1] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn attention_singleton_and_identical() {
        let mut rng = Rng::new(3);
        for kind in [PoolingKind::Attn, PoolingKind::Gated] {
            let p = PoolingParams::init(kind, 4, 3, &mut rng).unwrap();
            let single = bag(&[&[0.3, -1.0, 2.0]]);
            let out = pool(&p, &single).unwrap();
            assert_eq!(out.alpha.unwrap().as_slice(), &[1.0]);
            assert_eq!(out.embedding.as_slice(), single.instance(0));

            let row: &[f64] = &[0.3, -1.0, 2.0];
            let same = bag(&[row; 4]);
            let out = pool(&p, &same).unwrap();
            for a in out.alpha.unwrap().iter() {
                assert!((a - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn backward_avg_and_max() {
        let b = bag(&[&[1.0, 4.0], &[3.0, 2.0]]);
        let g = pool_backward(&PoolingParams::avg(), &b, &Vector::new(vec![2.0, 4.0])).unwrap();
        assert_eq!(g.d_instances[0].as_slice(), &[1.0, 2.0]);
        assert_eq!(g.d_instances[1].as_slice(), &[1.0, 2.0]);
        assert!(g.d_w.is_none() && g.d_z.is_none() && g.d_g.is_none());

        let g = pool_backward(&PoolingParams::max(), &b, &Vector::new(vec![1.0, 1.0])).unwrap();
        assert_eq!(g.d_instances[0].as_slice(), &[0.0, 1.0]);
        assert_eq!(g.d_instances[1].as_slice(), &[1.0, 0.0]);
    }

    #[test]
    fn max_backward_ties_route_to_first() {
        let b = bag(&[&[2.0, 0.0], &[2.0, 1.0], &[2.0, 1.0]]);
        let g = pool_backward(&PoolingParams::max(), &b, &Vector::new(vec![5.0, 7.0])).unwrap();
        assert_eq!(g.d_instances[0].as_slice(), &[5.0, 0.0]);
        assert_eq!(g.d_instances[1].as_slice(), &[0.0, 7.0]);
        assert_eq!(g.d_instances[2].as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_bad_upstream() {
        let b = bag(&[&[1.0, 4.0]]);
        assert!(pool_backward(&PoolingParams::avg(), &b, &Vector::zeros(3)).is_err());
    }

    #[test]
    fn flatten_roundtrip() {
        let x = InstanceEmbedding::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let flat = x.flatten().unwrap();
        assert_eq!(flat.values(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(flat.shape(), None);
        let back = flat.unflatten((2, 2)).unwrap();
        assert_eq!(back, x);
        assert_eq!(back.row(1).unwrap(), &[3.0, 4.0]);

        let five = InstanceEmbedding::new(vec![0.0; 5]).unwrap();
        assert!(matches!(five.unflatten((2, 2)), Err(MivcError::Shape { .. })));
        assert!(five.flatten().is_err());
    }

    #[test]
    fn shaped_bag_pools_back_to_shape() {
        let a = InstanceEmbedding::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = InstanceEmbedding::from_rows(&[vec![3.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let out = pool_avg(&Bag::new("s", vec![a, b]).unwrap()).unwrap();
        let e = out.embedding_2d().unwrap();
        assert_eq!(e.shape(), Some((2, 2)));
        assert_eq!(e.values(), &[2.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn param_counts() {
        let mut rng = Rng::new(0);
        assert_eq!(PoolingParams::init(PoolingKind::Attn, 2, 3, &mut rng).unwrap().param_count(), 8);
        assert_eq!(PoolingParams::init(PoolingKind::Gated, 2, 3, &mut rng).unwrap().param_count(), 14);
        assert_eq!(PoolingParams::avg().param_count(), 0);
    }

    #[test]
    fn init_respects_bound() {
        let p = PoolingParams::init(PoolingKind::Gated, 16, 5, &mut Rng::new(9)).unwrap();
        for (_, a) in p.arrays() {
            assert!(a.iter().all(|x| x.abs() <= 0.25));
        }
    }
}
