//! Pretraining losses and hand-derived gradients of their weighted sum.

use ndarray::{Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::embedding::{
    mask_self_similarity, normalize, similarity, EmbeddingBatch, Role,
    SimilarityMatrix, Temperature, ViewLabelBatch,
};
use crate::error::{Error, Result};

pub const DEFAULT_LAMBDA_VIEW: f64 = 0.5;
pub const DEFAULT_LAMBDA_NEG: f64 = 0.1;

const TRANSPOSE_TOLERANCE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_view: f64,
    pub lambda_neg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_view: DEFAULT_LAMBDA_VIEW,
            lambda_neg: DEFAULT_LAMBDA_NEG,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_clip: f64,
    pub l_view: f64,
    pub l_neg: f64,
    pub total: f64,
    pub lambda_view: f64,
    pub lambda_neg: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_clip, self.l_view, self.l_neg, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Same-view positive pairs: `M[i][j] = v_i == v_j && i != j`.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveSetMask {
    mask: Array2<bool>,
}

impl PositiveSetMask {
    pub fn from_views(views: &ViewLabelBatch) -> Self {
        let v = views.labels();
        let n = v.len();
        Self {
            mask: Array2::from_shape_fn((n, n), |(i, j)| i != j && v[i] == v[j]),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.mask[[i, j]]
    }

    pub fn len(&self) -> usize {
        self.mask.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    /// `|P(i)|`.
    pub fn positives(&self, i: usize) -> usize {
        self.mask.row(i).iter().filter(|&&m| m).count()
    }

    /// `d_i = max(1, |P(i)|)`.
    pub fn denominator(&self, i: usize) -> usize {
        self.positives(i).max(1)
    }
}

pub(crate) fn softplus(u: f64) -> f64 {
    if u > 0.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn check_square(s: &SimilarityMatrix) -> Result<usize> {
    let (r, c) = s.entries().dim();
    if r != c {
        return Err(Error::NotSquare { rows: r, cols: c });
    }
    if r == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(r)
}

/// Mean row-wise cross-entropy against the diagonal.
pub fn ce_row(s: &SimilarityMatrix) -> Result<f64> {
    let b = check_square(s)?;
    if s.is_masked() {
        return Err(Error::WrongKind {
            expected: "unmasked matrix (diagonal is the target)".into(),
            found: "image_image_masked".into(),
        });
    }
    if let Some(index) = s.entries().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            tensor: "similarity matrix".into(),
            index,
        });
    }
    let total: f64 = (0..b).map(|i| s.row_logsumexp(i) - s.get(i, i)).sum();
    Ok(total / b as f64)
}

fn max_transpose_deviation(s_it: &SimilarityMatrix, s_ti: &SimilarityMatrix) -> Result<f64> {
    let a = s_it.entries();
    let b = s_ti.entries();
    if a.dim() != (b.ncols(), b.nrows()) {
        return Err(Error::DimensionMismatch(format!(
            "{:?} is not transposable onto {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(a
        .indexed_iter()
        .map(|((i, j), v)| (v - b[[j, i]]).abs())
        .fold(0.0, f64::max))
}

/// Symmetric image↔text cross-entropy.
pub fn clip_loss(s_it: &SimilarityMatrix, s_ti: &SimilarityMatrix) -> Result<f64> {
    let dev = max_transpose_deviation(s_it, s_ti)?;
    if !(dev <= TRANSPOSE_TOLERANCE) {
        return Err(Error::TransposeMismatch(dev));
    }
    Ok(0.5 * (ce_row(s_it)? + ce_row(s_ti)?))
}

/// View-informed supervised contrastive loss over a masked image-image matrix.
/// Anchors without a same-view partner contribute exactly zero.
pub fn view_contrastive_loss(s_ii: &SimilarityMatrix, views: &ViewLabelBatch) -> Result<f64> {
    let b = check_square(s_ii)?;
    if !s_ii.is_masked() {
        return Err(Error::WrongKind {
            expected: "image_image_masked".into(),
            found: format!("{:?}", s_ii.kind()),
        });
    }
    if views.len() != b {
        return Err(Error::DimensionMismatch(format!(
            "{} view labels for a batch of {b}",
            views.len()
        )));
    }
    let mask = PositiveSetMask::from_views(views);
    let mut total = 0.0;
    for i in 0..b {
        if mask.positives(i) == 0 {
            continue;
        }
        let lse = s_ii.row_logsumexp(i);
        let sum: f64 = (0..b)
            .filter(|&j| mask.get(i, j))
            .map(|j| lse - s_ii.get(i, j))
            .sum();
        total += sum / mask.denominator(i) as f64;
    }
    Ok(total / b as f64)
}

fn check_pair(a: &EmbeddingBatch, b: &EmbeddingBatch) -> Result<()> {
    if a.rows().dim() != b.rows().dim() {
        return Err(Error::DimensionMismatch(format!(
            "caption batch {:?} vs negated batch {:?}",
            a.rows().dim(),
            b.rows().dim()
        )));
    }
    Ok(())
}

/// Per-pair logits `u_i = tau * <t_i, n_i>`.
fn pair_logits(text: &EmbeddingBatch, negated: &EmbeddingBatch, tau: Temperature) -> Array1<f64> {
    let t = tau.value();
    Zip::from(text.rows().rows())
        .and(negated.rows().rows())
        .map_collect(|a, b| t * a.dot(&b))
}

/// Binary cross-entropy with logits against target 0 for every
/// (caption, negated caption) pair.
pub fn negation_loss(
    text: &EmbeddingBatch,
    negated: &EmbeddingBatch,
    tau: Temperature,
) -> Result<f64> {
    check_pair(text, negated)?;
    let u = pair_logits(text, negated, tau);
    Ok(u.iter().map(|&v| softplus(v)).sum::<f64>() / u.len() as f64)
}

pub fn combined_loss(
    l_clip: f64,
    l_view: f64,
    l_neg: f64,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    let out = LossBreakdown {
        l_clip,
        l_view,
        l_neg,
        total: l_clip + weights.lambda_view * l_view + weights.lambda_neg * l_neg,
        lambda_view: weights.lambda_view,
        lambda_neg: weights.lambda_neg,
    };
    if !out.is_finite() || !weights.lambda_view.is_finite() || !weights.lambda_neg.is_finite() {
        return Err(Error::NonFinite {
            tensor: "loss breakdown".into(),
            index: 0,
        });
    }
    Ok(out)
}

/// Inputs to one evaluation of the combined objective. The embeddings are raw
/// encoder outputs; normalisation is part of the objective.
#[derive(Clone, Copy, Debug)]
pub struct ObjectiveInputs<'a> {
    pub image: &'a EmbeddingBatch,
    pub text: &'a EmbeddingBatch,
    pub negated: &'a EmbeddingBatch,
    pub views: &'a ViewLabelBatch,
    pub tau: Temperature,
    pub weights: LossWeights,
}

/// Gradients of the total objective with respect to the raw embedding rows and
/// the log temperature.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveGradients {
    pub image: Array2<f64>,
    pub text: Array2<f64>,
    pub negated: Array2<f64>,
    pub log_tau: f64,
}

struct Normalized {
    image: EmbeddingBatch,
    text: EmbeddingBatch,
    negated: EmbeddingBatch,
}

fn validate_inputs(inp: &ObjectiveInputs<'_>) -> Result<()> {
    let b = inp.image.batch_size();
    if inp.text.batch_size() != b || inp.negated.batch_size() != b || inp.views.len() != b {
        return Err(Error::DimensionMismatch(format!(
            "batch sizes image={b} text={} negated={} views={}",
            inp.text.batch_size(),
            inp.negated.batch_size(),
            inp.views.len()
        )));
    }
    check_pair(inp.text, inp.negated)?;
    if inp.image.dim() != inp.text.dim() {
        return Err(Error::DimensionMismatch(format!(
            "image dim {} vs text dim {}",
            inp.image.dim(),
            inp.text.dim()
        )));
    }
    Ok(())
}

fn normalize_all(inp: &ObjectiveInputs<'_>) -> Result<Normalized> {
    validate_inputs(inp)?;
    Ok(Normalized {
        image: normalize(inp.image)?.with_role(Role::Image),
        text: normalize(inp.text)?.with_role(Role::Text),
        negated: normalize(inp.negated)?.with_role(Role::NegatedText),
    })
}

struct Forward {
    s_it: SimilarityMatrix,
    s_ti: SimilarityMatrix,
    s_ii: SimilarityMatrix,
    breakdown: LossBreakdown,
}

fn forward(n: &Normalized, inp: &ObjectiveInputs<'_>) -> Result<Forward> {
    let s_it = similarity(&n.image, &n.text, inp.tau)?;
    let s_ti = s_it.transpose();
    let s_ii = mask_self_similarity(&similarity(&n.image, &n.image, inp.tau)?)?;
    let l_clip = clip_loss(&s_it, &s_ti)?;
    let l_view = view_contrastive_loss(&s_ii, inp.views)?;
    let l_neg = negation_loss(&n.text, &n.negated, inp.tau)?;
    let breakdown = combined_loss(l_clip, l_view, l_neg, inp.weights)?;
    Ok(Forward {
        s_it,
        s_ti,
        s_ii,
        breakdown,
    })
}

/// Evaluates the combined objective without gradients.
pub fn objective(inp: &ObjectiveInputs<'_>) -> Result<LossBreakdown> {
    let n = normalize_all(inp)?;
    Ok(forward(&n, inp)?.breakdown)
}

/// Back-propagates `dz` (w.r.t. unit rows `z`) through `z = x / |x|`.
fn normalize_backward(raw: &Array2<f64>, unit: &Array2<f64>, dz: &Array2<f64>) -> Array2<f64> {
    let mut dx = dz.clone();
    for ((mut dx_row, x), z) in dx
        .axis_iter_mut(Axis(0))
        .zip(raw.axis_iter(Axis(0)))
        .zip(unit.axis_iter(Axis(0)))
    {
        let norm = x.dot(&x).sqrt();
        let proj = z.dot(&dx_row);
        Zip::from(&mut dx_row)
            .and(&z)
            .for_each(|g, &zk| *g = (*g - zk * proj) / norm);
    }
    dx
}

/// Gradient of `clip_loss` w.r.t. the entries of `S_IT`.
fn clip_logit_grad(s_it: &SimilarityMatrix, s_ti: &SimilarityMatrix) -> Array2<f64> {
    let b = s_it.entries().nrows();
    let eye = Array2::<f64>::eye(b);
    let g_rows = s_it.row_softmax() - &eye;
    let g_cols = s_ti.row_softmax() - &eye;
    (g_rows + g_cols.t()) * (0.5 / b as f64)
}

/// Gradient of `view_contrastive_loss` w.r.t. the live entries of `S_II`.
fn view_logit_grad(s_ii: &SimilarityMatrix, views: &ViewLabelBatch) -> Array2<f64> {
    let b = s_ii.entries().nrows();
    let mask = PositiveSetMask::from_views(views);
    let p = s_ii.row_softmax();
    let mut g = Array2::zeros((b, b));
    for i in 0..b {
        let m = mask.positives(i);
        if m == 0 {
            continue;
        }
        let d = mask.denominator(i) as f64;
        for j in (0..b).filter(|&j| j != i) {
            let target = if mask.get(i, j) { 1.0 } else { 0.0 };
            g[[i, j]] = (m as f64 * p[[i, j]] - target) / (d * b as f64);
        }
    }
    g
}

/// Value and analytic gradient of the combined objective.
pub fn loss_gradients(inp: &ObjectiveInputs<'_>) -> Result<(LossBreakdown, ObjectiveGradients)> {
    let n = normalize_all(inp)?;
    let fwd = forward(&n, inp)?;
    let tau = inp.tau.value();
    let w = inp.weights;
    let zi = n.image.rows();
    let zt = n.text.rows();
    let zn = n.negated.rows();
    let b = zi.nrows();

    let g_it = clip_logit_grad(&fwd.s_it, &fwd.s_ti);
    let mut d_zi = g_it.dot(zt) * tau;
    let mut d_zt = g_it.t().dot(zi) * tau;
    let mut d_zn = Array2::zeros(zn.raw_dim());
    let mut d_log_tau: f64 = (&g_it * fwd.s_it.entries()).sum();

    if w.lambda_view != 0.0 {
        let g_ii = view_logit_grad(&fwd.s_ii, inp.views) * w.lambda_view;
        let sym = &g_ii + &g_ii.t();
        d_zi = d_zi + sym.dot(zi) * tau;
        d_log_tau += g_ii
            .indexed_iter()
            .filter(|&((i, j), _)| i != j)
            .map(|((i, j), g)| g * fwd.s_ii.get(i, j))
            .sum::<f64>();
    }

    if w.lambda_neg != 0.0 {
        let u = pair_logits(&n.text, &n.negated, inp.tau);
        for i in 0..b {
            let g = w.lambda_neg * sigmoid(u[i]) / b as f64;
            d_log_tau += g * u[i];
            let (t_row, n_row) = (zt.row(i), zn.row(i));
            d_zt.row_mut(i).scaled_add(g * tau, &n_row);
            d_zn.row_mut(i).scaled_add(g * tau, &t_row);
        }
    }

    let grads = ObjectiveGradients {
        image: normalize_backward(inp.image.rows(), zi, &d_zi),
        text: normalize_backward(inp.text.rows(), zt, &d_zt),
        negated: normalize_backward(inp.negated.rows(), zn, &d_zn),
        log_tau: d_log_tau,
    };
    Ok((fwd.breakdown, grads))
}
