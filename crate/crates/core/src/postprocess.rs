//! Decoding raw heads into scored boxes, IoU and per-class NMS.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::loss::GaussianBoxPrediction;
use crate::network::{HeadLayout, ANCHORS_PER_SCALE};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_CONF_THRESH: f64 = 0.25;
pub const DEFAULT_NMS_THRESH: f64 = 0.45;

/// Corner-form box `[x1, y1, x2, y2]` in pixels.
pub type BBox = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Detection {
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
    /// Mean of the four activated variances (0 for plain heads).
    pub uncertainty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub conf_thresh: f64,
    pub nms_thresh: f64,
    /// Multiply scores by `1 - uncertainty`.
    pub use_uncertainty: bool,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            conf_thresh: DEFAULT_CONF_THRESH,
            nms_thresh: DEFAULT_NMS_THRESH,
            use_uncertainty: true,
        }
    }
}

/// Every anchor at every cell of image `n` whose score reaches
/// `opts.conf_thresh`, in head-tensor order.
pub fn decode<T: Scalar>(
    head: &Tensor<T>,
    layout: &HeadLayout,
    n: usize,
    input_size: usize,
    opts: &DecodeOptions,
) -> Result<Vec<Detection>> {
    let (batch, c, h, w) = head.dims4()?;
    if c != layout.channels() || h != layout.grid || w != layout.grid || n >= batch {
        return Err(Error::shape(
            "decode",
            format!(
                "head {:?} does not match {} channels on a {}x{} grid (image {n})",
                head.shape(),
                layout.channels(),
                layout.grid,
                layout.grid
            ),
        ));
    }
    let s = layout.grid as f64;
    let size = input_size as f64;
    let mut out = Vec::new();
    for a in 0..ANCHORS_PER_SCALE {
        let anchor = layout.anchors[a];
        for gy in 0..layout.grid {
            for gx in 0..layout.grid {
                let p = GaussianBoxPrediction::read(head, layout, n, a, gx, gy);
                let u = p.uncertainty();
                let (class_id, class_prob) = p
                    .class_probs
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best });
                let factor = if opts.use_uncertainty { 1.0 - u } else { 1.0 };
                let score = p.objectness * class_prob * factor;
                if !(score >= opts.conf_thresh) {
                    continue;
                }
                let cx = (p.mu[0] + gx as f64) / s * size;
                let cy = (p.mu[1] + gy as f64) / s * size;
                let bw = anchor.width as f64 * p.mu[2].exp();
                let bh = anchor.height as f64 * p.mu[3].exp();
                let clip = |v: f64| v.clamp(0.0, size);
                out.push(Detection {
                    class_id,
                    score,
                    bbox: [
                        clip(cx - bw / 2.0),
                        clip(cy - bh / 2.0),
                        clip(cx + bw / 2.0),
                        clip(cy + bh / 2.0),
                    ],
                    uncertainty: u,
                });
            }
        }
    }
    Ok(out)
}

/// Decodes all heads for image `n` and applies NMS.
pub fn detect<T: Scalar>(
    heads: &[Tensor<T>],
    layouts: &[HeadLayout],
    n: usize,
    input_size: usize,
    opts: &DecodeOptions,
) -> Result<Vec<Detection>> {
    let mut all = Vec::new();
    for (h, l) in heads.iter().zip(layouts) {
        all.extend(decode(h, l, n, input_size, opts)?);
    }
    Ok(nms(all, opts.nms_thresh))
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union > 0.0 {
        (inter / union).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

/// Score descending, then smaller x1, then smaller y1.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.bbox[0].total_cmp(&b.bbox[0]))
        .then(a.bbox[1].total_cmp(&b.bbox[1]))
        .then(a.bbox[2].total_cmp(&b.bbox[2]))
        .then(a.bbox[3].total_cmp(&b.bbox[3]))
        .then(a.class_id.cmp(&b.class_id))
}

/// Greedy per-class suppression; survivors come back in rank order.
pub fn nms(mut dets: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    dets.sort_by(rank_order);
    let mut kept: Vec<Detection> = Vec::new();
    for d in dets {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(&k.bbox, &d.bbox) > iou_thresh);
        if !suppressed {
            kept.push(d);
        }
    }
    kept
}

/// One detection line: `class score x1 y1 x2 y2 u`.
pub fn format_detection(d: &Detection, class_name: &str) -> String {
    format!(
        "{class_name} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6}",
        d.score, d.bbox[0], d.bbox[1], d.bbox[2], d.bbox[3], d.uncertainty
    )
}

pub fn format_detections(dets: &[Detection], names: &[String]) -> String {
    let mut out = String::new();
    for d in dets {
        let name = names.get(d.class_id).map_or_else(|| format!("class{}", d.class_id), Clone::clone);
        let _ = writeln!(out, "{}", format_detection(d, &name));
    }
    out
}

/// Detection read back from a text file.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NamedDetection {
    pub class_name: String,
    pub score: f64,
    pub bbox: BBox,
    pub uncertainty: f64,
}

pub fn parse_detections(text: &str) -> Result<Vec<NamedDetection>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 7 {
            return Err(Error::parse(i + 1, format!("expected 7 fields, found {}", fields.len())));
        }
        let mut nums = [0.0; 6];
        for (slot, f) in nums.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| Error::parse(i + 1, format!("not a number: {f:?}")))?;
        }
        out.push(NamedDetection {
            class_name: fields[0].to_string(),
            score: nums[0],
            bbox: [nums[1], nums[2], nums[3], nums[4]],
            uncertainty: nums[5],
        });
    }
    Ok(out)
}
