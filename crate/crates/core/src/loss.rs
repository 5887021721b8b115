//! Prediction tensors, the object-adaptive weighting of positive cells, the
//! joint training loss, its analytic gradient and a finite-difference check.
//!
//! The loss sums four parts over every scale:
//!
//! * `obj_pos`: focal cross-entropy of objectness at positive cells, scaled
//!   by the box weight and the area normalisation `xi`;
//! * `obj_neg`: focal cross-entropy of objectness at negative cells;
//! * `obb`: box regression loss at positive cells, scaled by the class
//!   weight and `xi`;
//! * `cls`: per-class binary cross-entropy at positive cells against the
//!   composed score `G * raw`, scaled by `xi`.
//!
//! `G = exp(-obb loss)` and both weights are treated as constants when
//! differentiating.

use ndarray::{Array2, Array3, ArrayView1};
use rayon::prelude::*;
use thiserror::Error;

use crate::assign::{LabelScale, LabelTensorSet};
use crate::codec::CODE_LEN;

/// Probabilities are clamped this far inside `(0, 1)` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Distance of a predicted edge distance from its target below which the
/// GIoU gradient is reported as sitting on a branch boundary.
pub const TIE_TOLERANCE: f64 = 1e-6;

/// Predictions for one scale, indexed like [`LabelScale`].
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionScale {
    pub stride: u32,
    pub obj: Array2<f64>,
    pub obb: Array3<f64>,
    /// Raw classifier outputs, before composition with `G`.
    pub cls: Array3<f64>,
}

impl PredictionScale {
    pub fn zeros(stride: u32, height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            stride,
            obj: Array2::zeros((height, width)),
            obb: Array3::zeros((height, width, CODE_LEN)),
            cls: Array3::zeros((height, width, num_classes)),
        }
    }

    pub fn height(&self) -> usize {
        self.obj.nrows()
    }

    pub fn width(&self) -> usize {
        self.obj.ncols()
    }
}

/// Per-scale predictions. Gradients are returned in the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTensorSet {
    pub num_classes: usize,
    pub scales: Vec<PredictionScale>,
}

impl PredictionTensorSet {
    pub fn zeros_like(labels: &LabelTensorSet) -> Self {
        Self {
            num_classes: labels.num_classes,
            scales: labels
                .scales
                .iter()
                .map(|s| PredictionScale::zeros(s.stride, s.height(), s.width(), labels.num_classes))
                .collect(),
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{0} loss is not finite")]
    NonFiniteLoss(&'static str),
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regression {
    /// `1 - GIoU` on the edge distances plus squared glide and area errors.
    Giou,
    /// Squared error on all nine components.
    SquaredL,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    Owam,
    /// Box and class weights fixed at 1.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub gamma: f64,
    pub regression: Regression,
    pub weighting: Weighting,
    /// Multiply positive-cell terms by `xi`.
    pub area_norm: bool,
    /// Divide every part by the number of positive cells (at least 1).
    pub normalize_by_positives: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            regression: Regression::Giou,
            weighting: Weighting::Owam,
            area_norm: true,
            normalize_by_positives: false,
        }
    }
}

impl LossConfig {
    /// Plain cross-entropy with squared box error and unit weights: the form
    /// whose value is a negated log-likelihood up to a constant.
    pub fn likelihood_form() -> Self {
        Self {
            gamma: 0.0,
            regression: Regression::SquaredL,
            weighting: Weighting::Unit,
            area_norm: false,
            normalize_by_positives: false,
        }
    }

    fn validate(&self) -> Result<(), LossError> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(LossError::InvalidConfig(format!(
                "gamma must be >= 0, got {}",
                self.gamma
            )));
        }
        Ok(())
    }
}

fn check_shapes(labels: &LabelTensorSet, preds: &PredictionTensorSet) -> Result<(), LossError> {
    if labels.num_classes != preds.num_classes {
        return Err(LossError::ShapeMismatch(format!(
            "{} label classes vs {} predicted",
            labels.num_classes, preds.num_classes
        )));
    }
    if labels.scales.len() != preds.scales.len() {
        return Err(LossError::ShapeMismatch(format!(
            "{} label scales vs {} predicted",
            labels.scales.len(),
            preds.scales.len()
        )));
    }
    for (m, (l, p)) in labels.scales.iter().zip(&preds.scales).enumerate() {
        let nc = labels.num_classes;
        if l.stride != p.stride
            || p.obj.dim() != l.obj.dim()
            || p.obb.dim() != (l.height(), l.width(), CODE_LEN)
            || p.cls.dim() != (l.height(), l.width(), nc)
        {
            return Err(LossError::ShapeMismatch(format!(
                "scale {m}: labels stride {} {}x{}, predictions stride {} obj {:?} obb {:?} cls {:?}",
                l.stride,
                l.height(),
                l.width(),
                p.stride,
                p.obj.dim(),
                p.obb.dim(),
                p.cls.dim()
            )));
        }
    }
    Ok(())
}

/// Clamps a probability and returns the derivative of the clamp.
fn clamp_prob(p: f64) -> (f64, f64) {
    if p < PROB_EPS {
        (PROB_EPS, 0.0)
    } else if p > 1.0 - PROB_EPS {
        (1.0 - PROB_EPS, 0.0)
    } else {
        (p, 1.0)
    }
}

fn clamp_distance(l: f64) -> (f64, f64) {
    if l < PROB_EPS {
        (PROB_EPS, 0.0)
    } else {
        (l, 1.0)
    }
}

fn code(a: &Array3<f64>, y: usize, x: usize) -> [f64; CODE_LEN] {
    let mut out = [0.0; CODE_LEN];
    for (o, v) in out.iter_mut().zip(a.slice(ndarray::s![y, x, ..])) {
        *o = *v;
    }
    out
}

fn gt_class(cls: ArrayView1<f64>) -> usize {
    cls.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |best, (i, &v)| if v > best.1 { (i, v) } else { best },
        )
        .0
}

/// GIoU of two boxes given as distances from a shared point, and its
/// gradient with respect to the second box's distances.
///
/// Both min/max branches are resolved with strict comparisons; `tie` is set
/// when any predicted distance is within [`TIE_TOLERANCE`] of its target.
pub fn giou_with_grad(l: &[f64; 4], lh: &[f64; 4]) -> (f64, [f64; 4], bool) {
    let mn = |k: usize| l[k].min(lh[k]);
    let mx = |k: usize| l[k].max(lh[k]);
    let (ih, iw) = (mn(0) + mn(2), mn(1) + mn(3));
    let (ch, cw) = (mx(0) + mx(2), mx(1) + mx(3));
    let i = ih * iw;
    let c = ch * cw;
    let area = (l[0] + l[2]) * (l[1] + l[3]);
    let area_hat = (lh[0] + lh[2]) * (lh[1] + lh[3]);
    let u = area + area_hat - i;
    let giou = i / u - (c - u) / c;

    let mut grad = [0.0; 4];
    let mut tie = false;
    for k in 0..4 {
        let vertical = k % 2 == 0;
        let (other_i, other_c, other_a) = if vertical {
            (iw, cw, lh[1] + lh[3])
        } else {
            (ih, ch, lh[0] + lh[2])
        };
        let di = if lh[k] < l[k] { other_i } else { 0.0 };
        let dc = if lh[k] > l[k] { other_c } else { 0.0 };
        let du = other_a - di;
        grad[k] = (di * u - i * du) / (u * u) + (du * c - u * dc) / (c * c);
        tie |= (lh[k] - l[k]).abs() < TIE_TOLERANCE;
    }
    (giou, grad, tie)
}

/// Box regression loss between a target code and a predicted code.
pub fn regression_loss(target: &[f64; CODE_LEN], pred: &[f64; CODE_LEN], mode: Regression) -> f64 {
    regression_with_grad(target, pred, mode).0
}

/// `1 - GIoU + sum (s - s_hat)^2 + (ar - ar_hat)^2`.
pub fn obb_regression_loss(target: &[f64; CODE_LEN], pred: &[f64; CODE_LEN]) -> f64 {
    regression_loss(target, pred, Regression::Giou)
}

fn regression_with_grad(t: &[f64; CODE_LEN], p: &[f64; CODE_LEN], mode: Regression) -> (f64, [f64; CODE_LEN], bool) {
    let mut grad = [0.0; CODE_LEN];
    let mut tie = false;
    let mut loss = match mode {
        Regression::Giou => {
            let mut lh = [0.0; 4];
            let mut dclamp = [0.0; 4];
            for k in 0..4 {
                (lh[k], dclamp[k]) = clamp_distance(p[k]);
            }
            let l = [t[0], t[1], t[2], t[3]];
            let (giou, g, t_) = giou_with_grad(&l, &lh);
            tie = t_;
            for k in 0..4 {
                grad[k] = -g[k] * dclamp[k];
            }
            1.0 - giou
        }
        Regression::SquaredL => (0..4)
            .map(|k| {
                let d = p[k] - t[k];
                grad[k] = 2.0 * d;
                d * d
            })
            .sum(),
    };
    for k in 4..CODE_LEN {
        let d = p[k] - t[k];
        grad[k] = 2.0 * d;
        loss += d * d;
    }
    (loss, grad, tie)
}

/// Confidence of a box prediction, `exp(-loss)`.
pub fn gcp_confidence(loss_obb: f64) -> f64 {
    (-loss_obb).exp()
}

/// Per-cell confidence and weights for one scale.
#[derive(Debug, Clone, PartialEq)]
pub struct OwamScale {
    pub g: Array2<f64>,
    pub weight_obb: Array2<f64>,
    pub weight_cls: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OwamField {
    pub scales: Vec<OwamScale>,
}

fn owam_scale(lab: &LabelScale, pred: &PredictionScale, cfg: &LossConfig) -> OwamScale {
    let dim = lab.obj.raw_dim();
    let mut out = OwamScale {
        g: Array2::ones(dim),
        weight_obb: Array2::ones(dim),
        weight_cls: Array2::ones(dim),
    };
    for y in 0..lab.height() {
        for x in 0..lab.width() {
            if !lab.is_positive(y, x) {
                continue;
            }
            let l = regression_loss(&code(&lab.obb, y, x), &code(&pred.obb, y, x), cfg.regression);
            let g = gcp_confidence(l);
            out.g[[y, x]] = g;
            if cfg.weighting == Weighting::Owam {
                let f = lab.heat[[y, x]];
                let gt = gt_class(lab.cls.slice(ndarray::s![y, x, ..]));
                let raw = clamp_prob(pred.cls[[y, x, gt]]).0;
                out.weight_obb[[y, x]] = 0.5 * (f + g);
                out.weight_cls[[y, x]] = 0.5 * (f + raw);
            }
        }
    }
    out
}

/// Confidence `G` and the box/class weights of every cell. Negative cells
/// get `G = 1` and unit weights.
pub fn owam_weights(
    labels: &LabelTensorSet,
    preds: &PredictionTensorSet,
    cfg: &LossConfig,
) -> Result<OwamField, LossError> {
    check_shapes(labels, preds)?;
    let scales = labels
        .scales
        .par_iter()
        .zip(&preds.scales)
        .map(|(l, p)| owam_scale(l, p, cfg))
        .collect();
    Ok(OwamField { scales })
}

/// Predictions as seen by the loss: boxes masked to positive cells and class
/// scores multiplied by `obj * G`.
pub fn compose_training_predictions(
    labels: &LabelTensorSet,
    preds: &PredictionTensorSet,
    owam: &OwamField,
) -> Result<PredictionTensorSet, LossError> {
    check_shapes(labels, preds)?;
    let mut out = preds.clone();
    for ((lab, p), w) in labels.scales.iter().zip(out.scales.iter_mut()).zip(&owam.scales) {
        for y in 0..lab.height() {
            for x in 0..lab.width() {
                let obj = lab.obj[[y, x]];
                let g = w.g[[y, x]];
                p.obb.slice_mut(ndarray::s![y, x, ..]).mapv_inplace(|v| obj * v);
                p.cls.slice_mut(ndarray::s![y, x, ..]).mapv_inplace(|v| obj * g * v);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub obj_pos: f64,
    pub obj_neg: f64,
    pub obb: f64,
    pub cls: f64,
}

impl LossParts {
    pub fn total(&self) -> f64 {
        self.obj_pos + self.obj_neg + self.obb + self.cls
    }

    fn add(&mut self, o: &LossParts) {
        self.obj_pos += o.obj_pos;
        self.obj_neg += o.obj_neg;
        self.obb += o.obb;
        self.cls += o.cls;
    }

    fn scaled(self, k: f64) -> Self {
        Self {
            obj_pos: self.obj_pos * k,
            obj_neg: self.obj_neg * k,
            obb: self.obb * k,
            cls: self.cls * k,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub obj_pos: f64,
    pub obj_neg: f64,
    pub obb: f64,
    pub cls: f64,
    pub total: f64,
    pub per_scale: Vec<LossParts>,
    pub positives: usize,
}

/// Label-side values of one cell.
struct CellTarget<'a> {
    positive: bool,
    xi: f64,
    obb: [f64; CODE_LEN],
    cls: ArrayView1<'a, f64>,
}

struct CellWeights {
    g: f64,
    w_obb: f64,
    w_cls: f64,
}

fn cell_target<'a>(lab: &'a LabelScale, y: usize, x: usize, cfg: &LossConfig) -> CellTarget<'a> {
    CellTarget {
        positive: lab.is_positive(y, x),
        xi: if cfg.area_norm { lab.xi[[y, x]] } else { 1.0 },
        obb: code(&lab.obb, y, x),
        cls: lab.cls.slice(ndarray::s![y, x, ..]),
    }
}

fn cell_weights(w: &OwamScale, y: usize, x: usize) -> CellWeights {
    CellWeights {
        g: w.g[[y, x]],
        w_obb: w.weight_obb[[y, x]],
        w_cls: w.weight_cls[[y, x]],
    }
}

fn bce(y: f64, p: f64) -> f64 {
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

/// Loss parts of one cell. The per-class cross-entropy terms, whose sum is
/// the `cls` part, are written to `cls_terms`.
fn cell_loss(
    t: &CellTarget,
    obj: f64,
    obb: &[f64; CODE_LEN],
    cls: &[f64],
    w: &CellWeights,
    cfg: &LossConfig,
    cls_terms: &mut [f64],
) -> LossParts {
    let (o, _) = clamp_prob(obj);
    if !t.positive {
        cls_terms.fill(0.0);
        return LossParts {
            obj_neg: -o.powf(cfg.gamma) * (1.0 - o).ln(),
            ..LossParts::default()
        };
    }
    let reg = regression_loss(&t.obb, obb, cfg.regression);
    for ((term, &y), &raw) in cls_terms.iter_mut().zip(t.cls.iter()).zip(cls) {
        *term = bce(y, clamp_prob(w.g * raw).0) * t.xi;
    }
    LossParts {
        obj_pos: -(1.0 - o).powf(cfg.gamma) * o.ln() * w.w_obb * t.xi,
        obj_neg: 0.0,
        obb: reg * w.w_cls * t.xi,
        cls: cls_terms.iter().sum(),
    }
}

struct CellGrad {
    obj: f64,
    obb: [f64; CODE_LEN],
    tie: bool,
}

/// Gradient of [`cell_loss`]'s total; class gradients are written to `dcls`.
fn cell_grad(
    t: &CellTarget,
    obj: f64,
    obb: &[f64; CODE_LEN],
    cls: &[f64],
    w: &CellWeights,
    cfg: &LossConfig,
    dcls: &mut [f64],
) -> CellGrad {
    let (o, dclamp) = clamp_prob(obj);
    let gamma = cfg.gamma;
    if !t.positive {
        let d = -gamma * o.powf(gamma - 1.0) * (1.0 - o).ln() + o.powf(gamma) / (1.0 - o);
        dcls.fill(0.0);
        return CellGrad {
            obj: d * dclamp,
            obb: [0.0; CODE_LEN],
            tie: false,
        };
    }
    let d_focal = gamma * (1.0 - o).powf(gamma - 1.0) * o.ln() - (1.0 - o).powf(gamma) / o;
    let (_, mut dreg, tie) = regression_with_grad(&t.obb, obb, cfg.regression);
    for v in dreg.iter_mut() {
        *v *= w.w_cls * t.xi;
    }
    for ((d, &y), &raw) in dcls.iter_mut().zip(t.cls.iter()).zip(cls) {
        let (p, dp) = clamp_prob(w.g * raw);
        *d = (-y / p + (1.0 - y) / (1.0 - p)) * dp * w.g * t.xi;
    }
    CellGrad {
        obj: d_focal * dclamp * w.w_obb * t.xi,
        obb: dreg,
        tie,
    }
}

fn positive_total(labels: &LabelTensorSet) -> usize {
    labels.scales.iter().map(LabelScale::positive_count).sum()
}

fn norm_factor(labels: &LabelTensorSet, cfg: &LossConfig) -> f64 {
    if cfg.normalize_by_positives {
        1.0 / positive_total(labels).max(1) as f64
    } else {
        1.0
    }
}

fn scale_loss(lab: &LabelScale, pred: &PredictionScale, w: &OwamScale, cfg: &LossConfig) -> LossParts {
    let mut parts = LossParts::default();
    let nc = pred.cls.dim().2;
    let mut cls_buf = vec![0.0; nc];
    let mut cls_terms = vec![0.0; nc];
    for y in 0..lab.height() {
        for x in 0..lab.width() {
            let t = cell_target(lab, y, x, cfg);
            for (c, v) in cls_buf.iter_mut().enumerate() {
                *v = pred.cls[[y, x, c]];
            }
            let cell = cell_loss(
                &t,
                pred.obj[[y, x]],
                &code(&pred.obb, y, x),
                &cls_buf,
                &cell_weights(w, y, x),
                cfg,
                &mut cls_terms,
            );
            parts.add(&cell);
        }
    }
    parts
}

/// Loss with the confidence and weights supplied by the caller instead of
/// being recomputed from `preds`.
pub fn total_loss_frozen(
    labels: &LabelTensorSet,
    preds: &PredictionTensorSet,
    owam: &OwamField,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    cfg.validate()?;
    check_shapes(labels, preds)?;
    if owam.scales.len() != labels.scales.len() {
        return Err(LossError::ShapeMismatch("weight field scale count".into()));
    }
    let k = norm_factor(labels, cfg);
    let per_scale: Vec<LossParts> = labels
        .scales
        .par_iter()
        .zip(&preds.scales)
        .zip(&owam.scales)
        .map(|((l, p), w)| scale_loss(l, p, w, cfg).scaled(k))
        .collect();
    let mut sum = LossParts::default();
    for s in &per_scale {
        sum.add(s);
    }
    for (name, v) in [
        ("obj_pos", sum.obj_pos),
        ("obj_neg", sum.obj_neg),
        ("obb", sum.obb),
        ("cls", sum.cls),
    ] {
        if !v.is_finite() {
            return Err(LossError::NonFiniteLoss(name));
        }
    }
    Ok(LossBreakdown {
        obj_pos: sum.obj_pos,
        obj_neg: sum.obj_neg,
        obb: sum.obb,
        cls: sum.cls,
        total: sum.total(),
        per_scale,
        positives: positive_total(labels),
    })
}

pub fn total_loss(
    labels: &LabelTensorSet,
    preds: &PredictionTensorSet,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    let owam = owam_weights(labels, preds, cfg)?;
    total_loss_frozen(labels, preds, &owam, cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub grads: PredictionTensorSet,
    /// Positive cells whose GIoU gradient was taken at a branch boundary.
    pub tie_points: usize,
}

fn scale_grads(
    lab: &LabelScale,
    pred: &PredictionScale,
    w: &OwamScale,
    cfg: &LossConfig,
    k: f64,
) -> (PredictionScale, usize) {
    let nc = pred.cls.dim().2;
    let mut out = PredictionScale::zeros(pred.stride, lab.height(), lab.width(), nc);
    let mut ties = 0;
    let mut cls_buf = vec![0.0; nc];
    let mut dcls = vec![0.0; nc];
    for y in 0..lab.height() {
        for x in 0..lab.width() {
            let t = cell_target(lab, y, x, cfg);
            for (c, v) in cls_buf.iter_mut().enumerate() {
                *v = pred.cls[[y, x, c]];
            }
            let g = cell_grad(
                &t,
                pred.obj[[y, x]],
                &code(&pred.obb, y, x),
                &cls_buf,
                &cell_weights(w, y, x),
                cfg,
                &mut dcls,
            );
            ties += usize::from(g.tie);
            out.obj[[y, x]] = g.obj * k;
            for c in 0..CODE_LEN {
                out.obb[[y, x, c]] = g.obb[c] * k;
            }
            for (c, &d) in dcls.iter().enumerate() {
                out.cls[[y, x, c]] = d * k;
            }
        }
    }
    (out, ties)
}

/// Gradient of [`total_loss_frozen`] with respect to every prediction value.
pub fn loss_gradients_frozen(
    labels: &LabelTensorSet,
    preds: &PredictionTensorSet,
    owam: &OwamField,
    cfg: &LossConfig,
) -> Result<Gradients, LossError> {
    cfg.validate()?;
    check_shapes(labels, preds)?;
    let k = norm_factor(labels, cfg);
    let per_scale: Vec<(PredictionScale, usize)> = labels
        .scales
        .par_iter()
        .zip(&preds.scales)
        .zip(&owam.scales)
        .map(|((l, p), w)| scale_grads(l, p, w, cfg, k))
        .collect();
    let tie_points = per_scale.iter().map(|s| s.1).sum();
    Ok(Gradients {
        grads: PredictionTensorSet {
            num_classes: preds.num_classes,
            scales: per_scale.into_iter().map(|s| s.0).collect(),
        },
        tie_points,
    })
}

/// Gradient of [`total_loss`], holding `G` and the weights constant.
pub fn loss_gradients(
    labels: &LabelTensorSet,
    preds: &PredictionTensorSet,
    cfg: &LossConfig,
) -> Result<Gradients, LossError> {
    let owam = owam_weights(labels, preds, cfg)?;
    loss_gradients_frozen(labels, preds, &owam, cfg)
}

/// Squared error over all nine box components.
fn squared_code_error(t: &[f64; CODE_LEN], p: &[f64; CODE_LEN]) -> f64 {
    t.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Log-likelihood of the labels under the predictions: Bernoulli objectness
/// at every cell, and at positive cells a Gaussian box error with standard
/// deviation `sigma` plus Bernoulli class scores `G * raw`, with
/// `G = exp(-squared box error)`.
pub fn joint_log_likelihood(
    labels: &LabelTensorSet,
    preds: &PredictionTensorSet,
    sigma: f64,
) -> Result<f64, LossError> {
    check_shapes(labels, preds)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(LossError::InvalidConfig(format!("sigma must be positive, got {sigma}")));
    }
    let log_norm = -(sigma * (2.0 * std::f64::consts::PI).sqrt()).ln();
    let per_scale: Vec<f64> = labels
        .scales
        .par_iter()
        .zip(&preds.scales)
        .map(|(lab, pred)| {
            let mut ll = 0.0;
            for y in 0..lab.height() {
                for x in 0..lab.width() {
                    let o = clamp_prob(pred.obj[[y, x]]).0;
                    if !lab.is_positive(y, x) {
                        ll += (1.0 - o).ln();
                        continue;
                    }
                    ll += o.ln();
                    let e = squared_code_error(&code(&lab.obb, y, x), &code(&pred.obb, y, x));
                    ll += log_norm - e / (2.0 * sigma * sigma);
                    let g = gcp_confidence(e);
                    for c in 0..labels.num_classes {
                        ll -= bce(lab.cls[[y, x, c]], clamp_prob(g * pred.cls[[y, x, c]]).0);
                    }
                }
            }
            ll
        })
        .collect();
    let ll: f64 = per_scale.iter().sum();
    if !ll.is_finite() {
        return Err(LossError::NonFiniteLoss("log-likelihood"));
    }
    Ok(ll)
}

/// Location of one prediction entry. Channel 0 is objectness, 1..=9 the box
/// code and the rest the class scores.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdEntry {
    pub scale: usize,
    pub y: usize,
    pub x: usize,
    pub channel: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub h: f64,
    pub checked: usize,
    /// Entries skipped for sitting near a GIoU branch or clamp boundary.
    pub excluded: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst: Option<FdEntry>,
}

/// `|a - n| / max(|a|, |n|)`, zero when both vanish.
pub fn relative_error(a: f64, n: f64) -> f64 {
    let scale = a.abs().max(n.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - n).abs() / scale
    }
}

fn near_prob_clamp(p: f64, radius: f64) -> bool {
    p < PROB_EPS + radius || p > 1.0 - PROB_EPS - radius
}

/// Compares [`loss_gradients_frozen`] with central differences of step `h`.
///
/// The weights are computed once at `preds` and held fixed, matching the
/// analytic gradient. Since the loss is a sum of per-cell terms, each
/// difference only re-evaluates the terms of the perturbed cell. Entries whose value is
/// within `max(h, TIE_TOLERANCE)` of a GIoU branch or clamp boundary are
/// skipped.
pub fn finite_diff_check(
    labels: &LabelTensorSet,
    preds: &PredictionTensorSet,
    cfg: &LossConfig,
    h: f64,
) -> Result<FdReport, LossError> {
    if !(1e-7..=1e-3).contains(&h) {
        return Err(LossError::InvalidConfig(format!(
            "step h must lie in [1e-7, 1e-3], got {h}"
        )));
    }
    let owam = owam_weights(labels, preds, cfg)?;
    let analytic = loss_gradients_frozen(labels, preds, &owam, cfg)?.grads;
    let k = norm_factor(labels, cfg);
    let radius = h.max(TIE_TOLERANCE);
    let nc = labels.num_classes;

    let mut report = FdReport {
        h,
        checked: 0,
        excluded: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
    };
    for (m, ((lab, pred), w)) in labels.scales.iter().zip(&preds.scales).zip(&owam.scales).enumerate() {
        let grads = &analytic.scales[m];
        for y in 0..lab.height() {
            for x in 0..lab.width() {
                let t = cell_target(lab, y, x, cfg);
                let cw = cell_weights(w, y, x);
                let obj = pred.obj[[y, x]];
                let obb = code(&pred.obb, y, x);
                let cls: Vec<f64> = (0..nc).map(|c| pred.cls[[y, x, c]]).collect();
                let eval = |obj: f64, obb: &[f64; CODE_LEN], cls: &[f64]| {
                    let mut terms = vec![0.0; nc];
                    let parts = cell_loss(&t, obj, obb, cls, &cw, cfg, &mut terms);
                    terms.extend([parts.obj_pos, parts.obj_neg, parts.obb]);
                    terms
                };

                for channel in 0..1 + CODE_LEN + nc {
                    let (value, a) = match channel {
                        0 => (obj, grads.obj[[y, x]]),
                        c if c <= CODE_LEN => (obb[c - 1], grads.obb[[y, x, c - 1]]),
                        c => (cls[c - 1 - CODE_LEN], grads.cls[[y, x, c - 1 - CODE_LEN]]),
                    };
                    let skip = match channel {
                        0 => near_prob_clamp(obj, radius),
                        c if c <= 4 => {
                            t.positive
                                && cfg.regression == Regression::Giou
                                && ((value - t.obb[c - 1]).abs() < radius || value < PROB_EPS + radius)
                        }
                        c if c <= CODE_LEN => false,
                        _ => t.positive && near_prob_clamp(cw.g * value, radius * cw.g),
                    };
                    if skip {
                        report.excluded += 1;
                        continue;
                    }
                    let shifted = |delta: f64| {
                        let (mut o, mut b, mut c) = (obj, obb, cls.clone());
                        match channel {
                            0 => o += delta,
                            ch if ch <= CODE_LEN => b[ch - 1] += delta,
                            ch => c[ch - 1 - CODE_LEN] += delta,
                        }
                        eval(o, &b, &c)
                    };
                    // Differencing term by term keeps the round-off of large
                    // unrelated terms out of small derivatives.
                    let (plus, minus) = (shifted(h), shifted(-h));
                    let n = plus.iter().zip(&minus).map(|(p, q)| p - q).sum::<f64>() * k / (2.0 * h);
                    let rel = relative_error(a, n);
                    report.checked += 1;
                    report.max_abs_error = report.max_abs_error.max((a - n).abs());
                    if rel > report.max_rel_error || report.worst.is_none() {
                        report.max_rel_error = report.max_rel_error.max(rel);
                        report.worst = Some(FdEntry {
                            scale: m,
                            y,
                            x,
                            channel,
                            analytic: a,
                            numeric: n,
                        });
                    }
                }
            }
        }
    }
    Ok(report)
}
