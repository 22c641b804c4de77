//! Target assignment and the detection loss.
//!
//! Head channel layout per anchor: `tx ty tw th`, then (Gaussian heads only)
//! the four raw variances, then the objectness logit and one logit per
//! class. `tx`, `ty` and the variances go through a sigmoid; `tw`, `th` are
//! used raw.

use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::{HeadLayout, ANCHORS_PER_SCALE};
use crate::tensor::{Scalar, Tensor};

pub const IGNORE_THRESH: f64 = 0.7;
pub const NLL_EPSILON: f64 = 1e-9;
/// Variance floor of the box loss. Keeps d²/2var and d/var finite in f32;
/// larger floors cost localization accuracy.
pub const MIN_VARIANCE: f64 = 1e-30;

/// Ground-truth box in normalized image coordinates (centre and size in
/// `[0, 1]`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GtBox {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl GtBox {
    /// Builds a box from pixel corners of an image `size` pixels wide.
    pub fn from_corners(class_id: usize, x1: f64, y1: f64, x2: f64, y2: f64, size: f64) -> Self {
        GtBox {
            class_id,
            cx: (x1 + x2) / 2.0 / size,
            cy: (y1 + y2) / 2.0 / size,
            w: (x2 - x1) / size,
            h: (y2 - y1) / size,
        }
    }
}

/// One ground truth made responsible for one (head, cell, anchor).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Responsibility {
    pub image: usize,
    pub head: usize,
    /// Anchor index within the head, 0..3.
    pub anchor: usize,
    pub cell_x: usize,
    pub cell_y: usize,
    pub class_id: usize,
    /// `[x, y, w, h]` in t-space.
    pub target: [f64; 4],
    /// Scale weight `2 - w*h`.
    pub gamma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TargetAssignment {
    pub batch: usize,
    pub input_size: usize,
    /// Sorted canonically so the loss does not depend on label order.
    pub entries: Vec<Responsibility>,
    /// Valid ground truths per image; predictions overlapping one of these
    /// by more than the ignore threshold get no no-object penalty.
    pub truths: Vec<Vec<GtBox>>,
    /// `(image, index)` of boxes dropped for non-positive size.
    pub rejected: Vec<(usize, usize)>,
}

impl TargetAssignment {
    pub fn num_objects(&self) -> usize {
        self.entries.len()
    }
}

fn wh_iou(w: f64, h: f64, aw: f64, ah: f64) -> f64 {
    let inter = w.min(aw) * h.min(ah);
    inter / (w * h + aw * ah - inter)
}

/// IoU of two centre-size boxes.
fn center_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let ix = ((a[0] + a[2] / 2.0).min(b[0] + b[2] / 2.0) - (a[0] - a[2] / 2.0).max(b[0] - b[2] / 2.0)).max(0.0);
    let iy = ((a[1] + a[3] / 2.0).min(b[1] + b[3] / 2.0) - (a[1] - a[3] / 2.0).max(b[1] - b[3] / 2.0)).max(0.0);
    let inter = ix * iy;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Makes each ground truth responsible for the anchor (out of all nine)
/// whose shape overlaps it best, at the cell containing its centre on that
/// anchor's grid.
pub fn assign_targets(gts: &[Vec<GtBox>], layouts: &[HeadLayout], input_size: usize) -> Result<TargetAssignment> {
    let mut entries = Vec::new();
    let mut truths = Vec::with_capacity(gts.len());
    let mut rejected = Vec::new();
    let size = input_size as f64;
    for (image, boxes) in gts.iter().enumerate() {
        let mut valid = Vec::with_capacity(boxes.len());
        for (index, gt) in boxes.iter().enumerate() {
            if !(gt.w > 0.0 && gt.h > 0.0) {
                rejected.push((image, index));
                continue;
            }
            if let Some(l) = layouts.first() {
                if gt.class_id >= l.num_classes {
                    return Err(Error::Domain(format!(
                        "image {image}: class id {} with {} classes",
                        gt.class_id, l.num_classes
                    )));
                }
            }
            valid.push(*gt);
            let (gw, gh) = (gt.w * size, gt.h * size);
            let mut best = (f64::NEG_INFINITY, 0, 0);
            for (head, layout) in layouts.iter().enumerate() {
                for (a, anchor) in layout.anchors.iter().enumerate() {
                    let iou = wh_iou(gw, gh, anchor.width as f64, anchor.height as f64);
                    if iou > best.0 {
                        best = (iou, head, a);
                    }
                }
            }
            let (_, head, a) = best;
            let layout = &layouts[head];
            let s = layout.grid as f64;
            let cell = |c: f64| ((c * s).floor().max(0.0) as usize).min(layout.grid - 1);
            let (cell_x, cell_y) = (cell(gt.cx), cell(gt.cy));
            let anchor = layout.anchors[a];
            entries.push(Responsibility {
                image,
                head,
                anchor: a,
                cell_x,
                cell_y,
                class_id: gt.class_id,
                target: [
                    gt.cx * s - cell_x as f64,
                    gt.cy * s - cell_y as f64,
                    (gw / anchor.width as f64).ln(),
                    (gh / anchor.height as f64).ln(),
                ],
                gamma: 2.0 - gt.w * gt.h,
            });
        }
        truths.push(valid);
    }
    entries.sort_by(|a, b| {
        (a.image, a.head, a.anchor, a.cell_y, a.cell_x, a.class_id)
            .cmp(&(b.image, b.head, b.anchor, b.cell_y, b.cell_x, b.class_id))
            .then_with(|| {
                a.target
                    .iter()
                    .zip(&b.target)
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| o.is_ne())
                    .unwrap_or(std::cmp::Ordering::Equal)
            })
    });
    Ok(TargetAssignment {
        batch: gts.len(),
        input_size,
        entries,
        truths,
        rejected,
    })
}

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Binary cross-entropy of a logit against a 0/1 target, and its derivative
/// with respect to the logit.
fn bce_logit<T: Scalar>(z: T, target: bool) -> (T, T) {
    let y = if target { T::one() } else { T::zero() };
    let loss = z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p();
    (loss, sigmoid(z) - y)
}

/// `-gamma * ln(N(target | mu, var) + eps)` and its derivatives with respect
/// to `mu` and `var`.
/// Loss, d/d`mu` and d/d`ln var`. Gradients are 0 once the density
/// underflows next to `eps`.
fn nll_parts<T: Scalar>(mu: T, var: T, target: T, gamma: T, eps: T) -> (T, T, T) {
    let two = T::one() + T::one();
    let half = T::one() / two;
    let d = target - mu;
    let expo = -(d * d) / (two * var);
    let log_norm = -half * (two * T::from_f64_lossy(std::f64::consts::PI) * var).ln();
    let p = (expo + log_norm).exp();
    let loss = if eps == T::zero() {
        -gamma * (expo + log_norm)
    } else {
        -gamma * (p + eps).ln()
    };
    // d ln p, scaled by p / (p + eps)
    let share = if eps == T::zero() { T::one() } else { p / (p + eps) };
    if share == T::zero() {
        return (loss, T::zero(), T::zero());
    }
    let dmu = -gamma * share * d / var;
    let dlogvar = -gamma * share * (-expo - half);
    (loss, dmu, dlogvar)
}

/// Negative log-likelihood of `target` under `N(mu, var)`, weighted by
/// `gamma`, with `eps` added to the density.
pub fn gaussian_nll(mu: f64, var: f64, target: f64, gamma: f64, eps: f64) -> Result<f64> {
    if !(var > 0.0) {
        return Err(Error::Domain(format!("variance must be positive, got {var}")));
    }
    if !(eps >= 0.0) || !(gamma >= 0.0) {
        return Err(Error::Domain(format!("need eps >= 0 and gamma >= 0 (eps={eps}, gamma={gamma})")));
    }
    Ok(nll_parts(mu, var, target, gamma, eps).0)
}

/// Activated prediction of one anchor at one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianBoxPrediction {
    /// `sigmoid(tx), sigmoid(ty), tw, th`.
    pub mu: [f64; 4],
    /// Sigmoid-activated variances; `None` for plain heads.
    pub var: Option<[f64; 4]>,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
}

impl GaussianBoxPrediction {
    /// Reads image `n`, anchor `a`, cell `(gx, gy)` of a raw head tensor.
    pub fn read<T: Scalar>(head: &Tensor<T>, layout: &HeadLayout, n: usize, a: usize, gx: usize, gy: usize) -> Self {
        let view = HeadView::new(head.data(), layout, n);
        let at = |f: usize| view.get(a, f, gy, gx).to_f64().unwrap_or(f64::NAN);
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let b = layout.box_params;
        GaussianBoxPrediction {
            mu: [sig(at(0)), sig(at(1)), at(2), at(3)],
            var: layout.gaussian().then(|| [sig(at(4)), sig(at(5)), sig(at(6)), sig(at(7))]),
            objectness: sig(at(b)),
            class_probs: (0..layout.num_classes).map(|c| sig(at(b + 1 + c))).collect(),
        }
    }

    /// Mean of the four variances, 0 for plain heads.
    pub fn uncertainty(&self) -> f64 {
        self.var.map_or(0.0, |v| v.iter().sum::<f64>() / 4.0)
    }
}

/// Indexing into one image of a `(N, 3*F, S, S)` head buffer.
struct HeadView<'a, T> {
    data: &'a [T],
    offset: usize,
    fields: usize,
    grid: usize,
}

impl<'a, T: Copy> HeadView<'a, T> {
    fn new(data: &'a [T], layout: &HeadLayout, n: usize) -> Self {
        let per_image = layout.channels() * layout.grid * layout.grid;
        HeadView {
            data,
            offset: n * per_image,
            fields: layout.fields_per_anchor(),
            grid: layout.grid,
        }
    }

    fn index(&self, a: usize, f: usize, gy: usize, gx: usize) -> usize {
        self.offset + ((a * self.fields + f) * self.grid + gy) * self.grid + gx
    }

    fn get(&self, a: usize, f: usize, gy: usize, gx: usize) -> T {
        self.data[self.index(a, f, gy, gx)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub ignore_thresh: f64,
    pub epsilon: f64,
    /// Variance logits map to `[min_variance, 1]` inside the box loss.
    pub min_variance: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            ignore_thresh: IGNORE_THRESH,
            epsilon: NLL_EPSILON,
            min_variance: MIN_VARIANCE,
        }
    }
}

/// Loss terms averaged over the images of the batch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct LossBreakdown {
    #[serde(rename = "loss_box")]
    pub box_loss: f64,
    #[serde(rename = "loss_obj")]
    pub objectness: f64,
    #[serde(rename = "loss_cls")]
    pub class: f64,
    #[serde(rename = "loss_total")]
    pub total: f64,
}

/// Loss value with its gradient with respect to every raw head element.
#[derive(Debug, Clone)]
pub struct LossOutput<T> {
    pub breakdown: LossBreakdown,
    pub total: T,
    pub grads: Vec<Vec<T>>,
}

/// Box, objectness and class loss over raw head tensors.
///
/// Box: Gaussian NLL per coordinate for Gaussian heads, `gamma/2 * (mu - t)^2`
/// for plain heads. Objectness: BCE at every position, target 1 where a
/// ground truth is responsible, no-object positions whose decoded box
/// overlaps a ground truth above the ignore threshold skipped. Class:
/// per-class BCE at responsible positions.
pub fn total_loss<T: Scalar>(
    heads: &[&Tensor<T>],
    layouts: &[HeadLayout],
    assignment: &TargetAssignment,
    config: &LossConfig,
) -> Result<LossOutput<T>> {
    if heads.len() != layouts.len() {
        return Err(Error::shape(
            "total_loss",
            format!("{} heads for {} layouts", heads.len(), layouts.len()),
        ));
    }
    let batch = assignment.batch;
    for (i, (h, l)) in heads.iter().zip(layouts).enumerate() {
        let want = [batch, l.channels(), l.grid, l.grid];
        if h.shape() != want {
            return Err(Error::shape(
                "total_loss",
                format!("head {i} has shape {:?}, expected {want:?}", h.shape()),
            ));
        }
    }
    if batch == 0 {
        return Err(Error::shape("total_loss", "empty batch"));
    }
    let c = |x: f64| T::from_f64_lossy(x);
    let eps = c(config.epsilon);
    let vmin = c(config.min_variance);
    let half = c(0.5);
    let mut grads: Vec<Vec<T>> = heads.iter().map(|h| vec![T::zero(); h.numel()]).collect();
    let mut positive: Vec<Vec<bool>> = heads.iter().map(|h| vec![false; h.numel()]).collect();
    let (mut box_loss, mut obj_loss, mut cls_loss) = (T::zero(), T::zero(), T::zero());

    for e in &assignment.entries {
        let layout = &layouts[e.head];
        let data = heads[e.head].data();
        let view = HeadView::new(data, layout, e.image);
        let g = &mut grads[e.head];
        let gamma = c(e.gamma);
        for k in 0..4 {
            let idx = view.index(e.anchor, k, e.cell_y, e.cell_x);
            let raw = data[idx];
            let (mu, dmu_draw) = if k < 2 {
                let s = sigmoid(raw);
                (s, s * (T::one() - s))
            } else {
                (raw, T::one())
            };
            let t = c(e.target[k]);
            if layout.gaussian() {
                let vidx = view.index(e.anchor, 4 + k, e.cell_y, e.cell_x);
                let sv = sigmoid(data[vidx]);
                let var = (vmin + (T::one() - vmin) * sv).max(T::min_positive_value());
                let (l, dmu, dlogvar) = nll_parts(mu, var, t, gamma, eps);
                box_loss = box_loss + l;
                g[idx] = g[idx] + dmu * dmu_draw;
                // d var / d logit over var, bounded by 1 - sv
                g[vidx] = g[vidx] + dlogvar * ((T::one() - vmin) * sv / var) * (T::one() - sv);
            } else {
                let d = mu - t;
                box_loss = box_loss + half * gamma * d * d;
                g[idx] = g[idx] + gamma * d * dmu_draw;
            }
        }
        let b = layout.box_params;
        for cls in 0..layout.num_classes {
            let idx = view.index(e.anchor, b + 1 + cls, e.cell_y, e.cell_x);
            let (l, d) = bce_logit(data[idx], cls == e.class_id);
            cls_loss = cls_loss + l;
            g[idx] = g[idx] + d;
        }
        positive[e.head][view.index(e.anchor, b, e.cell_y, e.cell_x)] = true;
    }

    let size = assignment.input_size as f64;
    for (h, layout) in layouts.iter().enumerate() {
        let data = heads[h].data();
        let s = layout.grid;
        for n in 0..batch {
            let view = HeadView::new(data, layout, n);
            let truths = &assignment.truths[n];
            for a in 0..ANCHORS_PER_SCALE {
                let anchor = layout.anchors[a];
                for gy in 0..s {
                    for gx in 0..s {
                        let idx = view.index(a, layout.box_params, gy, gx);
                        let z = data[idx];
                        let is_pos = positive[h][idx];
                        if !is_pos && !truths.is_empty() {
                            let at = |f: usize| view.get(a, f, gy, gx).to_f64().unwrap_or(f64::NAN);
                            let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
                            let pred = [
                                (sig(at(0)) + gx as f64) / s as f64,
                                (sig(at(1)) + gy as f64) / s as f64,
                                anchor.width as f64 * at(2).exp() / size,
                                anchor.height as f64 * at(3).exp() / size,
                            ];
                            let best = truths
                                .iter()
                                .map(|t| center_iou(pred, [t.cx, t.cy, t.w, t.h]))
                                .fold(0.0, f64::max);
                            if best > config.ignore_thresh {
                                continue;
                            }
                        }
                        let (l, d) = bce_logit(z, is_pos);
                        obj_loss = obj_loss + l;
                        grads[h][idx] = grads[h][idx] + d;
                    }
                }
            }
        }
    }

    let scale = T::one() / c(batch as f64);
    for g in grads.iter_mut().flatten() {
        *g = *g * scale;
    }
    let (box_loss, obj_loss, cls_loss) = (box_loss * scale, obj_loss * scale, cls_loss * scale);
    for (name, v) in [("box", box_loss), ("objectness", obj_loss), ("class", cls_loss)] {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("{name} loss is {v:?}")));
        }
    }
    let total = box_loss + obj_loss + cls_loss;
    let f = |x: T| x.to_f64().unwrap_or(f64::NAN);
    Ok(LossOutput {
        breakdown: LossBreakdown {
            box_loss: f(box_loss),
            objectness: f(obj_loss),
            class: f(cls_loss),
            total: f(total),
        },
        total,
        grads,
    })
}

/// Records [`total_loss`] on a tape as a scalar node over the head values.
pub fn record_loss<T: Scalar>(
    tape: &mut Tape<T>,
    heads: &[Var],
    layouts: &[HeadLayout],
    assignment: &TargetAssignment,
    config: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    let values: Vec<&Tensor<T>> = heads.iter().map(|&h| tape.value(h)).collect();
    let out = total_loss(&values, layouts, assignment, config)?;
    let var = tape.fused_scalar(heads, out.total, out.grads)?;
    Ok((var, out.breakdown))
}
