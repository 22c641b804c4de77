//! Seeded synthetic detection data: red rectangles and blue ellipses on a
//! noise background, labelled in KITTI format.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kitti::{format_kitti_labels, read_kitti_labels, KittiLabel};
use super::ppm::{read_ppm, write_ppm};
use crate::error::{Error, Result};
use crate::postprocess::iou;

pub const SYNTH_CLASSES: [&str; 2] = ["rect", "ellipse"];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub image_size: u32,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Shape side lengths in pixels, inclusive.
    pub min_side: u32,
    pub max_side: u32,
    pub max_overlap_iou: f64,
    /// Background channel values are uniform in `0..=noise`.
    pub noise: u8,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            image_size: 160,
            min_objects: 1,
            max_objects: 3,
            min_side: 28,
            max_side: 64,
            max_overlap_iou: 0.3,
            noise: 80,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub stem: String,
    pub image: RgbImage,
    pub labels: Vec<KittiLabel>,
}

const PLACEMENT_ATTEMPTS: usize = 50;

fn shape_color(class: usize, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let hi = rng.gen_range(200..=255);
    let lo = rng.gen_range(0..=40);
    if class == 0 {
        [hi, lo, lo]
    } else {
        [lo, lo, hi]
    }
}

/// Pixels covered by a shape drawn in the `w x h` box at `(x, y)`.
fn shape_pixels(class: usize, x: u32, y: u32, w: u32, h: u32) -> Vec<(u32, u32)> {
    let (cx, cy) = (x as f64 + w as f64 / 2.0, y as f64 + h as f64 / 2.0);
    let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
    let mut out = Vec::new();
    for py in y..y + h {
        for px in x..x + w {
            let inside = class == 0 || {
                let dx = (px as f64 + 0.5 - cx) / rx;
                let dy = (py as f64 + 0.5 - cy) / ry;
                dx * dx + dy * dy <= 1.0
            };
            if inside {
                out.push((px, py));
            }
        }
    }
    out
}

fn extent(pixels: &[(u32, u32)]) -> Option<[f64; 4]> {
    let x1 = pixels.iter().map(|p| p.0).min()?;
    let y1 = pixels.iter().map(|p| p.1).min()?;
    let x2 = pixels.iter().map(|p| p.0).max()? + 1;
    let y2 = pixels.iter().map(|p| p.1).max()? + 1;
    Some([x1 as f64, y1 as f64, x2 as f64, y2 as f64])
}

/// Sample `index` of the dataset with the given seed; independent of every
/// other index.
pub fn generate_sample(spec: &SynthSpec, seed: u64, index: u64) -> Sample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let size = spec.image_size;
    let mut img = RgbImage::new(size, size);
    for p in img.pixels_mut() {
        *p = Rgb([rng.gen_range(0..=spec.noise), rng.gen_range(0..=spec.noise), rng.gen_range(0..=spec.noise)]);
    }
    let count = rng.gen_range(spec.min_objects..=spec.max_objects);
    let max_side = spec.max_side.min(size);
    let mut labels: Vec<KittiLabel> = Vec::new();
    for _ in 0..count {
        for _ in 0..PLACEMENT_ATTEMPTS {
            let class = rng.gen_range(0..SYNTH_CLASSES.len());
            let w = rng.gen_range(spec.min_side..=max_side);
            let h = rng.gen_range(spec.min_side..=max_side);
            let x = rng.gen_range(0..=size - w);
            let y = rng.gen_range(0..=size - h);
            let pixels = shape_pixels(class, x, y, w, h);
            let Some(bbox) = extent(&pixels) else { continue };
            if labels.iter().any(|l| iou(&l.bbox, &bbox) > spec.max_overlap_iou) {
                continue;
            }
            let color = Rgb(shape_color(class, &mut rng));
            for (px, py) in pixels {
                img.put_pixel(px, py, color);
            }
            labels.push(KittiLabel::new_2d(SYNTH_CLASSES[class], bbox));
            break;
        }
    }
    Sample {
        stem: format!("{index:06}"),
        image: img,
        labels,
    }
}

/// Samples `0..count`, generated in parallel; output does not depend on
/// the thread count.
pub fn generate_synthetic_dataset(spec: &SynthSpec, count: usize, seed: u64) -> Vec<Sample> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| generate_sample(spec, seed, i))
        .collect()
}

/// Writes `images/<stem>.ppm` and `labels/<stem>.txt` under `dir`.
pub fn write_dataset(dir: impl AsRef<Path>, samples: &[Sample]) -> Result<()> {
    let dir = dir.as_ref();
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::file(&p, e))?;
    }
    for s in samples {
        write_ppm(dir.join("images").join(format!("{}.ppm", s.stem)), &s.image)?;
        let p = dir.join("labels").join(format!("{}.txt", s.stem));
        std::fs::write(&p, format_kitti_labels(&s.labels)).map_err(|e| Error::file(&p, e))?;
    }
    Ok(())
}

/// Reads every `images/*.ppm` with its matching `labels/*.txt`, ordered by
/// stem.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Vec<Sample>> {
    let dir = dir.as_ref();
    let images = dir.join("images");
    let labels = dir.join("labels");
    for d in [&images, &labels] {
        if !d.is_dir() {
            return Err(Error::file(d, std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found")));
        }
    }
    let mut stems = Vec::new();
    for entry in std::fs::read_dir(&images).map_err(|e| Error::file(&images, e))? {
        let path = entry.map_err(|e| Error::file(&images, e))?.path();
        if path.extension().is_some_and(|e| e == "ppm") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                stems.push(stem.to_string());
            }
        }
    }
    stems.sort();
    stems
        .into_iter()
        .map(|stem| {
            Ok(Sample {
                image: read_ppm(images.join(format!("{stem}.ppm")))?,
                labels: read_kitti_labels(labels.join(format!("{stem}.txt")))?,
                stem,
            })
        })
        .collect()
}
