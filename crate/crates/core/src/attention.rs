//! Modality-specific additive attention, context fusion, and the grid
//! pre-attention pass.
//!
//! Scores follow `e_i = vᵀ tanh(W1·a_i + W2·s_t + b)`; `v`, `W1` and `b` are
//! per modality while `W2` is shared between the text and visual scorers.

use serde::{Deserialize, Serialize};

use crate::layers::{conv1x1_backward, conv1x1_forward, ConvCache, ConvParams};
use crate::numerics::{kernels, Tensor};
use crate::sketch::{McbCache, McbPooler};
use crate::{Error, Result};

/// Per-modality part of the attention scorer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityScorer {
    /// `A × n` annotation projection.
    pub w1: Tensor,
    pub b: Tensor,
    /// Score vector stored as a `1 × A` matrix.
    pub v: Tensor,
}

impl ModalityScorer {
    pub fn zeros(attn: usize, annotation_dim: usize) -> Self {
        ModalityScorer {
            w1: Tensor::zeros(&[attn, annotation_dim]),
            b: Tensor::zeros(&[attn]),
            v: Tensor::zeros(&[1, attn]),
        }
    }

    pub fn attn_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn annotation_dim(&self) -> usize {
        self.w1.cols()
    }

    fn check(&self) -> Result<()> {
        let a = self.attn_dim();
        if self.b.len() != a || self.v.len() != a {
            return Err(Error::shape("attention scorer shapes disagree"));
        }
        Ok(())
    }

    /// `W1·a_i + b` for every annotation row (`N × A`).
    pub(crate) fn project(&self, ann: &Tensor) -> Vec<f64> {
        let a = self.attn_dim();
        let mut out = Vec::with_capacity(ann.rows() * a);
        for i in 0..ann.rows() {
            let mut row = self.b.data().to_vec();
            kernels::matvec_acc(self.w1.data(), self.annotation_dim(), ann.row(i), &mut row);
            out.extend_from_slice(&row);
        }
        out
    }

    /// Folds the accumulated `∂(W1·a_i + b)` into parameter and annotation grads.
    pub(crate) fn project_backward(
        &self,
        ann: &Tensor,
        grad_proj: &[f64],
        acc: &mut ModalityScorer,
        grad_ann: &mut Tensor,
    ) {
        let a = self.attn_dim();
        for i in 0..ann.rows() {
            let g = &grad_proj[i * a..(i + 1) * a];
            kernels::outer_acc(acc.w1.data_mut(), g, ann.row(i));
            kernels::axpy(1.0, g, acc.b.data_mut());
            kernels::matvec_t_acc(self.w1.data(), self.annotation_dim(), g, grad_ann.row_mut(i));
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub text: ModalityScorer,
    /// Absent in text-only models.
    pub visual: Option<ModalityScorer>,
    /// Shared `A × S` projection of the decoder state.
    pub w2: Tensor,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Visual,
}

impl AttentionParams {
    pub fn scorer(&self, modality: Modality) -> Result<&ModalityScorer> {
        match modality {
            Modality::Text => Ok(&self.text),
            Modality::Visual => self
                .visual
                .as_ref()
                .ok_or_else(|| Error::InvalidArgument("no visual attention parameters".into())),
        }
    }

    pub(crate) fn query(&self, s: &[f64]) -> Vec<f64> {
        let mut q = vec![0.0; self.w2.rows()];
        kernels::matvec(self.w2.data(), self.w2.cols(), s, &mut q);
        q
    }
}

/// Cache of one attention read.
#[derive(Clone, Debug)]
pub struct ReadCache {
    /// `tanh(proj_i + q)`, `N × A`.
    u: Vec<f64>,
    alpha: Vec<f64>,
}

impl ReadCache {
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }
}

/// Attention weights and context given precomputed projections and query.
pub(crate) fn read(
    scorer: &ModalityScorer,
    ann: &Tensor,
    proj: &[f64],
    q: &[f64],
) -> (Vec<f64>, ReadCache) {
    let a = scorer.attn_dim();
    let n = ann.rows();
    let mut u = vec![0.0; n * a];
    let mut e = vec![0.0; n];
    for i in 0..n {
        let urow = &mut u[i * a..(i + 1) * a];
        for k in 0..a {
            urow[k] = (proj[i * a + k] + q[k]).tanh();
        }
        e[i] = kernels::dot(scorer.v.data(), urow);
    }
    kernels::softmax_in_place(&mut e);
    let mut ctx = vec![0.0; ann.cols()];
    for i in 0..n {
        kernels::axpy(e[i], ann.row(i), &mut ctx);
    }
    (ctx, ReadCache { u, alpha: e })
}

/// Backward of [`read`]: accumulates into `grad_proj`, `grad_q`, `grad_ann`
/// and the score vector gradient.
pub(crate) fn read_backward(
    scorer: &ModalityScorer,
    ann: &Tensor,
    cache: &ReadCache,
    grad_ctx: &[f64],
    acc: &mut ModalityScorer,
    grad_proj: &mut [f64],
    grad_q: &mut [f64],
    grad_ann: &mut Tensor,
) {
    let a = scorer.attn_dim();
    let n = ann.rows();
    let g_alpha: Vec<f64> = (0..n).map(|i| kernels::dot(grad_ctx, ann.row(i))).collect();
    let g_e = kernels::softmax_backward(&cache.alpha, &g_alpha);
    let v = scorer.v.data();
    for i in 0..n {
        kernels::axpy(cache.alpha[i], grad_ctx, grad_ann.row_mut(i));
        let urow = &cache.u[i * a..(i + 1) * a];
        kernels::axpy(g_e[i], urow, acc.v.data_mut());
        for k in 0..a {
            let gp = g_e[i] * v[k] * (1.0 - urow[k] * urow[k]);
            grad_proj[i * a + k] += gp;
            grad_q[k] += gp;
        }
    }
}

fn check_attend(ann: &Tensor, s: &Tensor, scorer: &ModalityScorer, w2: &Tensor) -> Result<()> {
    scorer.check()?;
    if ann.rank() != 2 || ann.rows() == 0 {
        return Err(Error::Empty("annotation set"));
    }
    if ann.cols() != scorer.annotation_dim() {
        return Err(Error::shape(format!(
            "annotations of width {} for a scorer expecting {}",
            ann.cols(),
            scorer.annotation_dim()
        )));
    }
    if w2.rows() != scorer.attn_dim() || w2.cols() != s.len() {
        return Err(Error::shape("decoder-state projection shape"));
    }
    Ok(())
}

/// Soft attention over one modality: returns `(alpha, context)`.
pub fn attend(
    ann: &Tensor,
    s_t: &Tensor,
    p: &AttentionParams,
    modality: Modality,
) -> Result<(Tensor, Tensor)> {
    let scorer = p.scorer(modality)?;
    check_attend(ann, s_t, scorer, &p.w2)?;
    let proj = scorer.project(ann);
    let q = p.query(s_t.data());
    let (ctx, cache) = read(scorer, ann, &proj, &q);
    Ok((Tensor::vector(cache.alpha)?, Tensor::vector(ctx)?))
}

/// Gradients of [`attend`] for a given upstream context gradient.
pub struct AttendGrads {
    pub annotations: Tensor,
    pub state: Tensor,
    pub scorer: ModalityScorer,
    pub w2: Tensor,
}

pub fn attend_backward(
    grad_ctx: &Tensor,
    ann: &Tensor,
    s_t: &Tensor,
    p: &AttentionParams,
    modality: Modality,
) -> Result<AttendGrads> {
    let scorer = p.scorer(modality)?;
    check_attend(ann, s_t, scorer, &p.w2)?;
    if grad_ctx.len() != ann.cols() {
        return Err(Error::shape("context gradient length"));
    }
    let proj = scorer.project(ann);
    let q = p.query(s_t.data());
    let (_, cache) = read(scorer, ann, &proj, &q);
    let mut acc = ModalityScorer::zeros(scorer.attn_dim(), scorer.annotation_dim());
    let mut grad_proj = vec![0.0; proj.len()];
    let mut grad_q = vec![0.0; q.len()];
    let mut grad_ann = Tensor::zeros(ann.shape());
    read_backward(scorer, ann, &cache, grad_ctx.data(), &mut acc, &mut grad_proj, &mut grad_q, &mut grad_ann);
    scorer.project_backward(ann, &grad_proj, &mut acc, &mut grad_ann);
    let mut w2 = Tensor::zeros(p.w2.shape());
    kernels::outer_acc(w2.data_mut(), &grad_q, s_t.data());
    let mut gs = vec![0.0; s_t.len()];
    kernels::matvec_t_acc(p.w2.data(), p.w2.cols(), &grad_q, &mut gs);
    Ok(AttendGrads {
        annotations: grad_ann,
        state: Tensor::vector(gs)?,
        scorer: acc,
        w2,
    })
}

/// Serializable selector for how the two context vectors are combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Concat,
    Sum,
    Product,
    Mcb,
}

impl std::str::FromStr for FusionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionKind::Concat),
            "sum" => Ok(FusionKind::Sum),
            "product" => Ok(FusionKind::Product),
            "mcb" => Ok(FusionKind::Mcb),
            other => Err(Error::InvalidArgument(format!("unknown fusion '{other}'"))),
        }
    }
}

/// Runtime fusion strategy; the MCB variant owns its frozen sketch tables.
#[derive(Clone, Debug)]
pub enum FusionStrategy {
    Concat,
    Sum,
    Product,
    Mcb(McbPooler),
}

#[derive(Clone, Debug)]
pub enum FusionCache {
    Plain,
    Mcb(McbCache),
}

impl FusionStrategy {
    pub fn kind(&self) -> FusionKind {
        match self {
            FusionStrategy::Concat => FusionKind::Concat,
            FusionStrategy::Sum => FusionKind::Sum,
            FusionStrategy::Product => FusionKind::Product,
            FusionStrategy::Mcb(_) => FusionKind::Mcb,
        }
    }

    /// Output length for context vectors of the given sizes.
    pub fn output_dim(&self, n_text: usize, n_vis: usize) -> Result<usize> {
        match self {
            FusionStrategy::Concat => Ok(n_text + n_vis),
            FusionStrategy::Sum | FusionStrategy::Product => {
                if n_text != n_vis {
                    return Err(Error::shape(format!(
                        "element-wise fusion needs equal context sizes, got {n_text} and {n_vis}"
                    )));
                }
                Ok(n_text)
            }
            FusionStrategy::Mcb(p) => {
                if p.n_text() != n_text || p.n_vis() != n_vis {
                    return Err(Error::shape("MCB pooler dims differ from context sizes"));
                }
                Ok(p.d())
            }
        }
    }

    pub(crate) fn forward(&self, ct: &[f64], cv: &[f64]) -> Result<(Vec<f64>, FusionCache)> {
        self.output_dim(ct.len(), cv.len())?;
        Ok(match self {
            FusionStrategy::Concat => ([ct, cv].concat(), FusionCache::Plain),
            FusionStrategy::Sum => (ct.iter().zip(cv).map(|(a, b)| a + b).collect(), FusionCache::Plain),
            FusionStrategy::Product => (ct.iter().zip(cv).map(|(a, b)| a * b).collect(), FusionCache::Plain),
            FusionStrategy::Mcb(p) => {
                let (out, cache) = p.forward(ct, cv)?;
                (out, FusionCache::Mcb(cache))
            }
        })
    }

    pub(crate) fn backward(
        &self,
        cache: &FusionCache,
        ct: &[f64],
        cv: &[f64],
        grad: &[f64],
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok(match (self, cache) {
            (FusionStrategy::Concat, _) => (grad[..ct.len()].to_vec(), grad[ct.len()..].to_vec()),
            (FusionStrategy::Sum, _) => (grad.to_vec(), grad.to_vec()),
            (FusionStrategy::Product, _) => (
                grad.iter().zip(cv).map(|(g, b)| g * b).collect(),
                grad.iter().zip(ct).map(|(g, a)| g * a).collect(),
            ),
            (FusionStrategy::Mcb(p), FusionCache::Mcb(c)) => p.backward(c, grad)?,
            (FusionStrategy::Mcb(_), FusionCache::Plain) => {
                return Err(Error::InvalidArgument("MCB fusion needs its forward cache".into()))
            }
        })
    }
}

/// Combines the text and visual context vectors into `c_t`.
pub fn fuse(c_text: &Tensor, c_vis: &Tensor, strategy: &FusionStrategy) -> Result<Tensor> {
    let (out, _) = strategy.forward(c_text.data(), c_vis.data())?;
    Tensor::vector(out)
}

/// Returns `(∂c_text, ∂c_vis)`.
pub fn fuse_backward(
    grad: &Tensor,
    c_text: &Tensor,
    c_vis: &Tensor,
    strategy: &FusionStrategy,
) -> Result<(Tensor, Tensor)> {
    let (out, cache) = strategy.forward(c_text.data(), c_vis.data())?;
    if grad.len() != out.len() {
        return Err(Error::shape("fusion gradient length"));
    }
    let (gt, gv) = strategy.backward(&cache, c_text.data(), c_vis.data(), grad.data())?;
    Ok((Tensor::vector(gt)?, Tensor::vector(gv)?))
}

/// Sketch tables and convolution kernels of the pre-attention pass.
#[derive(Clone, Debug)]
pub struct PreAttentionParams {
    pub pooler: McbPooler,
    pub conv: ConvParams,
}

#[derive(Clone, Debug)]
pub struct PreAttentionCache {
    pools: Vec<McbCache>,
    conv: ConvCache,
    weights: Vec<f64>,
}

impl PreAttentionCache {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Pools every grid cell with the tiled sentence vector, predicts one logit
/// per cell, and reweights the grid by the softmax of those logits.
///
/// Returns `(weights, reweighted features, cache)`.
pub fn pre_attend_with(
    features: &Tensor,
    text_vec: &[f64],
    conv: &ConvParams,
    pooler: &McbPooler,
) -> Result<(Vec<f64>, Tensor, PreAttentionCache)> {
    if features.rank() != 2 || features.rows() == 0 {
        return Err(Error::Empty("pre-attention feature grid"));
    }
    if features.cols() != pooler.n_vis() || text_vec.len() != pooler.n_text() {
        return Err(Error::shape(format!(
            "pre-attention pooler expects ({}, {}), got ({}, {})",
            pooler.n_text(),
            pooler.n_vis(),
            text_vec.len(),
            features.cols()
        )));
    }
    if conv.in_channels() != pooler.d() {
        return Err(Error::shape("pre-attention convolution input channels"));
    }
    let g = features.rows();
    let mut pooled = Vec::with_capacity(g * pooler.d());
    let mut pools = Vec::with_capacity(g);
    for cell in 0..g {
        let (out, cache) = pooler.forward(text_vec, features.row(cell))?;
        pooled.extend_from_slice(&out);
        pools.push(cache);
    }
    let pooled = Tensor::matrix(g, pooler.d(), pooled)?;
    let (logits, conv_cache) = conv1x1_forward(&pooled, conv)?;
    let mut weights = logits.into_data();
    kernels::softmax_in_place(&mut weights);
    let mut out = features.clone();
    for cell in 0..g {
        let w = weights[cell];
        out.row_mut(cell).iter_mut().for_each(|v| *v *= w);
    }
    Ok((
        weights.clone(),
        out,
        PreAttentionCache {
            pools,
            conv: conv_cache,
            weights,
        },
    ))
}

/// Backward of [`pre_attend_with`]: returns `(∂features, ∂text_vec)` and
/// accumulates kernel gradients into `acc`.
pub fn pre_attend_backward(
    grad_out: &Tensor,
    features: &Tensor,
    cache: &PreAttentionCache,
    conv: &ConvParams,
    pooler: &McbPooler,
    acc: &mut ConvParams,
) -> Result<(Tensor, Vec<f64>)> {
    let g = features.rows();
    if grad_out.shape() != features.shape() || cache.weights.len() != g {
        return Err(Error::shape("pre-attention gradient shape"));
    }
    let mut grad_features = Tensor::zeros(features.shape());
    let mut grad_w = vec![0.0; g];
    for cell in 0..g {
        grad_w[cell] = kernels::dot(grad_out.row(cell), features.row(cell));
        kernels::axpy(cache.weights[cell], grad_out.row(cell), grad_features.row_mut(cell));
    }
    let grad_logits = kernels::softmax_backward(&cache.weights, &grad_w);
    let grad_pooled = conv1x1_backward(&grad_logits, &cache.conv, conv, acc)?;
    let mut grad_text = vec![0.0; pooler.n_text()];
    for cell in 0..g {
        let (gt, gv) = pooler.backward(&cache.pools[cell], grad_pooled.row(cell))?;
        kernels::axpy(1.0, &gt, &mut grad_text);
        kernels::axpy(1.0, &gv, grad_features.row_mut(cell));
    }
    Ok((grad_features, grad_text))
}

/// Tensor-level pre-attention: `(weights (G), reweighted features (G × C))`.
pub fn pre_attend(features: &Tensor, text_vec: &Tensor, p: &PreAttentionParams) -> Result<(Tensor, Tensor)> {
    let (w, out, _) = pre_attend_with(features, text_vec.data(), &p.conv, &p.pooler)?;
    Ok((Tensor::vector(w)?, out))
}
