//! Binary PPM (P6) images and conversion to network input tensors.

use std::io::Cursor;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder, ImageFormat, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm)
        .map_err(|e| Error::Domain(format!("not a readable PPM image: {e}")))?;
    Ok(img.to_rgb8())
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::Rgb8)
        .expect("encoding into memory does not fail");
    out
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode_ppm(&bytes).map_err(|e| Error::Domain(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_ppm(img)).map_err(|e| Error::file(path, e))
}

/// `(1, 3, H, W)` tensor with values in `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor<f32> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = f32::from(px[c]) / 255.0;
        }
    }
    Tensor::new(vec![1, 3, h, w], data).expect("sized from image")
}

/// Draws a rectangle outline, clipped to the image.
pub fn draw_box(img: &mut RgbImage, bbox: [f64; 4], color: [u8; 3], thickness: u32) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    if w == 0 || h == 0 {
        return;
    }
    let clamp = |v: f64, hi: i64| (v.round() as i64).clamp(0, hi - 1);
    let (x1, y1, x2, y2) = (clamp(bbox[0], w), clamp(bbox[1], h), clamp(bbox[2], w), clamp(bbox[3], h));
    let t = i64::from(thickness.max(1));
    for y in y1..=y2 {
        for x in x1..=x2 {
            let edge = x - x1 < t || x2 - x < t || y - y1 < t || y2 - y < t;
            if edge {
                img.put_pixel(x as u32, y as u32, image::Rgb(color));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_bytes() {
        let mut img = RgbImage::new(5, 3);
        for (i, p) in img.pixels_mut().enumerate() {
            *p = image::Rgb([i as u8, 2 * i as u8, 255 - i as u8]);
        }
        let bytes = encode_ppm(&img);
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(decode_ppm(&bytes).unwrap(), img);
        assert!(decode_ppm(b"P3 nonsense").is_err());
    }

    #[test]
    fn tensor_layout_is_planar() {
        let mut img = RgbImage::new(2, 1);
        img.put_pixel(1, 0, image::Rgb([255, 0, 51]));
        let t = image_to_tensor(&img);
        assert_eq!(t.shape(), &[1, 3, 1, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 0.0, 0.0, 0.0, 0.2]);
    }

    #[test]
    fn box_outline_stays_inside() {
        let mut img = RgbImage::new(10, 10);
        draw_box(&mut img, [-5.0, 2.0, 20.0, 6.0], [255, 0, 0], 1);
        assert_eq!(img.get_pixel(0, 2)[0], 255);
        assert_eq!(img.get_pixel(5, 4)[0], 0);
        assert_eq!(img.get_pixel(9, 6)[0], 255);
    }
}
