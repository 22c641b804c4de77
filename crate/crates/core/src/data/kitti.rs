//! KITTI object label files: 15 whitespace-separated fields per line.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};

pub const DONT_CARE: &str = "DontCare";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KittiLabel {
    pub class_name: String,
    pub truncated: f64,
    /// 0 fully visible .. 3 unknown; -1 on DontCare regions.
    pub occluded: i32,
    pub alpha: f64,
    /// `[left, top, right, bottom]` in pixels.
    pub bbox: [f64; 4],
    pub dimensions: [f64; 3],
    pub location: [f64; 3],
    pub rotation_y: f64,
}

impl KittiLabel {
    /// A 2D-only label with the 3D fields set to KITTI's "unknown" values.
    pub fn new_2d(class_name: impl Into<String>, bbox: [f64; 4]) -> Self {
        KittiLabel {
            class_name: class_name.into(),
            truncated: 0.0,
            occluded: 0,
            alpha: -10.0,
            bbox,
            dimensions: [-1.0; 3],
            location: [-1000.0; 3],
            rotation_y: -10.0,
        }
    }

    pub fn is_dont_care(&self) -> bool {
        self.class_name == DONT_CARE
    }

    pub fn height(&self) -> f64 {
        self.bbox[3] - self.bbox[1]
    }
}

pub fn parse_kitti_labels(text: &str) -> Result<Vec<KittiLabel>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 15 {
            return Err(Error::parse(lineno, format!("expected 15 fields, found {}", f.len())));
        }
        let num = |j: usize| -> Result<f64> {
            f[j].parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(lineno, format!("field {} is not a number: {:?}", j + 1, f[j])))
        };
        let occluded: i32 = f[2]
            .parse()
            .map_err(|_| Error::parse(lineno, format!("occlusion is not an integer: {:?}", f[2])))?;
        if !(-1..=3).contains(&occluded) {
            return Err(Error::parse(lineno, format!("occlusion {occluded} outside -1..=3")));
        }
        let bbox = [num(4)?, num(5)?, num(6)?, num(7)?];
        if !(bbox[0] < bbox[2] && bbox[1] < bbox[3]) {
            return Err(Error::parse(lineno, format!("degenerate box {bbox:?}")));
        }
        out.push(KittiLabel {
            class_name: f[0].to_string(),
            truncated: num(1)?,
            occluded,
            alpha: num(3)?,
            bbox,
            dimensions: [num(8)?, num(9)?, num(10)?],
            location: [num(11)?, num(12)?, num(13)?],
            rotation_y: num(14)?,
        });
    }
    Ok(out)
}

/// Serializes labels with the shortest float text that parses back to the
/// same value.
pub fn format_kitti_labels(labels: &[KittiLabel]) -> String {
    let mut out = String::new();
    for l in labels {
        let _ = write!(out, "{} {} {} {}", l.class_name, l.truncated, l.occluded, l.alpha);
        for v in l.bbox.iter().chain(&l.dimensions).chain(&l.location) {
            let _ = write!(out, " {v}");
        }
        let _ = writeln!(out, " {}", l.rotation_y);
    }
    out
}

pub fn read_kitti_labels(path: impl AsRef<Path>) -> Result<Vec<KittiLabel>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_kitti_labels(&text).map_err(|e| match e {
        Error::Parse { line, detail } => Error::Parse {
            line,
            detail: format!("{}: {detail}", path.display()),
        },
        other => other,
    })
}

/// KITTI eligibility tier for a ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DifficultyBucket {
    pub name: &'static str,
    pub min_box_height_px: f64,
    pub max_occlusion: i32,
    pub max_truncation: f64,
}

pub const EASY: DifficultyBucket = DifficultyBucket {
    name: "easy",
    min_box_height_px: 40.0,
    max_occlusion: 0,
    max_truncation: 0.15,
};
pub const MODERATE: DifficultyBucket = DifficultyBucket {
    name: "moderate",
    min_box_height_px: 25.0,
    max_occlusion: 1,
    max_truncation: 0.30,
};
pub const HARD: DifficultyBucket = DifficultyBucket {
    name: "hard",
    min_box_height_px: 25.0,
    max_occlusion: 2,
    max_truncation: 0.50,
};
pub const BUCKETS: [DifficultyBucket; 3] = [EASY, MODERATE, HARD];

impl DifficultyBucket {
    pub fn admits(&self, label: &KittiLabel) -> bool {
        !label.is_dont_care()
            && label.height() >= self.min_box_height_px
            && (0..=self.max_occlusion).contains(&label.occluded)
            && label.truncated <= self.max_truncation
    }
}

/// Seeded shuffle, then the first `round(ratio * N)` ids train.
pub fn split_dataset<T: Clone>(ids: &[T], ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if ids.is_empty() {
        return Err(Error::Config("cannot split an empty id list".into()));
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!("split ratio {ratio} outside (0, 1)")));
    }
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = (ratio * ids.len() as f64).round() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| ids[i].clone()).collect();
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const CAR: &str = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70 -1.59";

    #[test]
    fn parses_devkit_line() {
        let l = &parse_kitti_labels(CAR).unwrap()[0];
        assert_eq!(l.class_name, "Car");
        assert_eq!(l.bbox, [587.01, 173.33, 614.12, 200.12]);
        assert_eq!(l.location, [-0.65, 1.71, 46.70]);
        assert_eq!(l.rotation_y, -1.59);
    }

    #[test]
    fn empty_and_malformed() {
        assert!(parse_kitti_labels("").unwrap().is_empty());
        let short = "Car 0.00 0 -1.58 587.01 173.33 614.12 200.12 1.65 1.67 3.64 -0.65 1.71 46.70";
        let err = parse_kitti_labels(&format!("{CAR}\n{short}\n")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(parse_kitti_labels(&CAR.replace("587.01", "abc")).is_err());
    }

    #[test]
    fn dont_care_kept_but_never_admitted() {
        let text = "DontCare -1 -1 -10 503.89 169.71 590.61 190.13 -1 -1 -1 -1000 -1000 -1000 -10";
        let l = &parse_kitti_labels(text).unwrap()[0];
        assert!(l.is_dont_care());
        assert!(BUCKETS.iter().all(|b| !b.admits(l)));
    }

    #[test]
    fn split_sizes() {
        let ids: Vec<usize> = (0..7481).collect();
        let (tr, va) = split_dataset(&ids, 0.8, 1).unwrap();
        assert_eq!((tr.len(), va.len()), (5985, 1496));
        let (a, b) = split_dataset(&(0..10).collect::<Vec<_>>(), 0.8, 9).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(split_dataset(&ids, 0.8, 1).unwrap().0, tr);
        let mut all = [tr, va].concat();
        all.sort();
        assert_eq!(all, ids);
        assert!(split_dataset::<usize>(&[], 0.8, 1).is_err());
    }

    fn label_strategy() -> impl Strategy<Value = KittiLabel> {
        (
            prop::sample::select(vec!["Car", "Pedestrian", "Cyclist", "DontCare"]),
            0.0..1.0f64,
            -1..=3i32,
            -3.2..3.2f64,
            (0.0..1000.0f64, 0.0..300.0f64, 0.1..200.0f64, 0.1..200.0f64),
            prop::array::uniform3(-100.0..100.0f64),
            -3.2..3.2f64,
        )
            .prop_map(|(name, t, o, alpha, (x, y, w, h), dims, ry)| KittiLabel {
                class_name: name.to_string(),
                truncated: t,
                occluded: o,
                alpha,
                bbox: [x, y, x + w, y + h],
                dimensions: dims,
                location: [dims[2], dims[0], dims[1]],
                rotation_y: ry,
            })
    }

    proptest! {
        #[test]
        fn serialize_round_trip(labels in prop::collection::vec(label_strategy(), 0..6)) {
            let text = format_kitti_labels(&labels);
            let back = parse_kitti_labels(&text).unwrap();
            prop_assert_eq!(&back, &labels);
            prop_assert_eq!(format_kitti_labels(&back), text);
        }

        #[test]
        fn buckets_nested(label in label_strategy()) {
            if EASY.admits(&label) { prop_assert!(MODERATE.admits(&label)); }
            if MODERATE.admits(&label) { prop_assert!(HARD.admits(&label)); }
        }
    }
}
