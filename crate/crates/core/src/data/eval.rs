//! Average precision with KITTI difficulty buckets.
//!
//! AP is the area under the all-point precision envelope. Matching is
//! greedy in score order; each ground truth matches at most once. Ground
//! truths that are DontCare, or of the evaluated class but outside the
//! bucket, absorb detections without counting as hits or misses.

use serde::Serialize;

use super::kitti::{DifficultyBucket, KittiLabel, BUCKETS, MODERATE};
use crate::postprocess::{iou, BBox, NamedDetection};

pub const DEFAULT_EVAL_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ScoredBox {
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalGt {
    pub bbox: BBox,
    /// Matched without reward or penalty.
    pub ignore: bool,
}

/// Detections and ground truths of one image, for one class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImageEval {
    pub detections: Vec<ScoredBox>,
    pub gts: Vec<EvalGt>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApResult {
    pub ap: f64,
    /// Number of non-ignored ground truths.
    pub positives: usize,
    /// `(recall, precision)` after each counted detection.
    pub pr: Vec<(f64, f64)>,
}

pub fn average_precision(images: &[ImageEval], iou_thresh: f64) -> ApResult {
    let positives = images.iter().flat_map(|im| &im.gts).filter(|g| !g.ignore).count();
    let mut order: Vec<(usize, usize)> = images
        .iter()
        .enumerate()
        .flat_map(|(i, im)| (0..im.detections.len()).map(move |d| (i, d)))
        .collect();
    // ties keep (image, index) order, so only the score ranking matters
    order.sort_by(|a, b| {
        let (sa, sb) = (images[a.0].detections[a.1].score, images[b.0].detections[b.1].score);
        sb.total_cmp(&sa).then(a.cmp(b))
    });
    let mut matched: Vec<Vec<bool>> = images.iter().map(|im| vec![false; im.gts.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut pr = Vec::new();
    for (i, d) in order {
        let det = &images[i].detections[d];
        let gts = &images[i].gts;
        let best_care = gts
            .iter()
            .enumerate()
            .filter(|(g, gt)| !gt.ignore && !matched[i][*g])
            .map(|(g, gt)| (g, iou(&det.bbox, &gt.bbox)))
            .filter(|(_, v)| *v >= iou_thresh)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((g, _)) = best_care {
            matched[i][g] = true;
            tp += 1;
        } else if gts.iter().any(|gt| gt.ignore && iou(&det.bbox, &gt.bbox) >= iou_thresh) {
            continue;
        } else {
            fp += 1;
        }
        let recall = if positives > 0 { tp as f64 / positives as f64 } else { 0.0 };
        pr.push((recall, tp as f64 / (tp + fp) as f64));
    }
    let mut ap = 0.0;
    if positives > 0 {
        // precision envelope: best precision at any recall >= r
        let mut envelope = vec![0.0; pr.len()];
        let mut best: f64 = 0.0;
        for (k, &(_, p)) in pr.iter().enumerate().rev() {
            best = best.max(p);
            envelope[k] = best;
        }
        let mut prev_recall = 0.0;
        for (k, &(r, _)) in pr.iter().enumerate() {
            ap += (r - prev_recall) * envelope[k];
            prev_recall = r;
        }
    }
    ApResult { ap, positives, pr }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalCell {
    pub class_name: String,
    pub bucket: &'static str,
    pub ap: f64,
    pub positives: usize,
    pub pr: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub iou_thresh: f64,
    pub interpolation: &'static str,
    pub cells: Vec<EvalCell>,
    /// Mean over every (class, bucket) cell with at least one ground truth.
    pub map_all_buckets: f64,
    /// Mean over classes of the moderate bucket.
    pub map_moderate: f64,
}

impl EvalReport {
    pub fn ap(&self, class_name: &str, bucket: &str) -> Option<f64> {
        self.cells
            .iter()
            .find(|c| c.class_name == class_name && c.bucket == bucket)
            .map(|c| c.ap)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "AP at IoU {:.2}, {} interpolation\n{:<14} {:>8} {:>8} {:>8}\n",
            self.iou_thresh, self.interpolation, "class", "easy", "moderate", "hard"
        );
        let mut classes: Vec<&str> = self.cells.iter().map(|c| c.class_name.as_str()).collect();
        classes.dedup();
        for class in classes {
            out.push_str(&format!("{class:<14}"));
            for b in BUCKETS {
                match self.cells.iter().find(|c| c.class_name == class && c.bucket == b.name) {
                    Some(c) if c.positives > 0 => out.push_str(&format!(" {:>8.4}", c.ap)),
                    _ => out.push_str(&format!(" {:>8}", "-")),
                }
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "mAP (all buckets) {:.4}\nmAP (moderate)    {:.4}\n",
            self.map_all_buckets, self.map_moderate
        ));
        out
    }
}

/// One image's detections and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalImage {
    pub detections: Vec<NamedDetection>,
    pub labels: Vec<KittiLabel>,
}

fn bucket_view(images: &[EvalImage], class: &str, bucket: &DifficultyBucket) -> Vec<ImageEval> {
    images
        .iter()
        .map(|im| ImageEval {
            detections: im
                .detections
                .iter()
                .filter(|d| d.class_name == class)
                .map(|d| ScoredBox {
                    score: d.score,
                    bbox: d.bbox,
                })
                .collect(),
            gts: im
                .labels
                .iter()
                .filter(|l| l.class_name == class || l.is_dont_care())
                .map(|l| EvalGt {
                    bbox: l.bbox,
                    ignore: !bucket.admits(l),
                })
                .collect(),
        })
        .collect()
}

/// AP per (class, bucket) over a set of images.
pub fn evaluate(images: &[EvalImage], classes: &[String], iou_thresh: f64) -> EvalReport {
    let mut cells = Vec::new();
    for class in classes {
        for bucket in BUCKETS {
            let r = average_precision(&bucket_view(images, class, &bucket), iou_thresh);
            cells.push(EvalCell {
                class_name: class.clone(),
                bucket: bucket.name,
                ap: r.ap,
                positives: r.positives,
                pr: r.pr,
            });
        }
    }
    let mean = |it: Vec<f64>| if it.is_empty() { 0.0 } else { it.iter().sum::<f64>() / it.len() as f64 };
    let map_all_buckets = mean(cells.iter().filter(|c| c.positives > 0).map(|c| c.ap).collect());
    let map_moderate = mean(
        cells
            .iter()
            .filter(|c| c.positives > 0 && c.bucket == MODERATE.name)
            .map(|c| c.ap)
            .collect(),
    );
    EvalReport {
        iou_thresh,
        interpolation: "all-point",
        cells,
        map_all_buckets,
        map_moderate,
    }
}
