//! PNG export of renders, depth maps and edit masks.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageBuffer, ImageFormat, Luma, RgbImage};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::prior::EditMask;
use crate::tensor::{DepthMap, Image};

fn unit_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(img: impl FnOnce(&mut Cursor<Vec<u8>>) -> image::ImageResult<()>) -> Result<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    img(&mut buf).map_err(|e| Error::Format(e.to_string()))?;
    Ok(buf.into_inner())
}

/// 8-bit RGB PNG; values are clamped to `[0, 1]`.
pub fn rgb_png(rgb: &Image) -> Result<Vec<u8>> {
    let (h, w, c) = rgb.dim();
    if c != 3 || h == 0 || w == 0 {
        return Err(Error::shape("(h, w, 3)", rgb.dim()));
    }
    let img = RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([unit_to_u8(rgb[[y, x, 0]]), unit_to_u8(rgb[[y, x, 1]]), unit_to_u8(rgb[[y, x, 2]])])
    });
    encode(|b| img.write_to(b, ImageFormat::Png))
}

/// 16-bit greyscale PNG. Depth in `[0, max_depth]` maps linearly onto `[0, 65535]`;
/// larger values saturate.
pub fn depth_png16(depth: &DepthMap, max_depth: f64) -> Result<Vec<u8>> {
    let (h, w) = depth.dim();
    if h == 0 || w == 0 {
        return Err(Error::shape("non-empty", depth.dim()));
    }
    if !(max_depth.is_finite() && max_depth > 0.0) {
        return Err(Error::InvalidInput(format!("max_depth must be > 0 (got {max_depth})")));
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let d = depth[[y as usize, x as usize]];
        Luma([((d / max_depth).clamp(0.0, 1.0) * 65535.0).round() as u16])
    });
    encode(|b| img.write_to(b, ImageFormat::Png))
}

/// 8-bit greyscale PNG of a soft mask.
pub fn mask_png(mask: &EditMask) -> Result<Vec<u8>> {
    let v = mask.values();
    let (h, w) = v.dim();
    let img = GrayImage::from_fn(w as u32, h as u32, |x, y| Luma([unit_to_u8(v[[y as usize, x as usize]])]));
    encode(|b| img.write_to(b, ImageFormat::Png))
}

pub fn write_png(path: &Path, bytes: &[u8]) -> Result<()> {
    write_atomic(path, bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn rgb_round_trip() {
        let mut rgb = Image::zeros((3, 5, 3));
        rgb[[1, 4, 0]] = 1.0;
        rgb[[2, 0, 2]] = 0.5;
        let png = rgb_png(&rgb).unwrap();
        let back = image::load_from_memory(&png).unwrap().to_rgb8();
        assert_eq!(back.dimensions(), (5, 3));
        assert_eq!(back.get_pixel(4, 1).0, [255, 0, 0]);
        assert_eq!(back.get_pixel(0, 2).0, [0, 0, 128]);
    }

    #[test]
    fn depth_is_sixteen_bit() {
        let d = Array2::from_shape_vec((1, 3), vec![0.0, 2.0, 9.0]).unwrap();
        let png = depth_png16(&d, 4.0).unwrap();
        let back = image::load_from_memory(&png).unwrap().to_luma16();
        assert_eq!(back.get_pixel(0, 0).0, [0]);
        assert_eq!(back.get_pixel(1, 0).0, [32768]);
        assert_eq!(back.get_pixel(2, 0).0, [65535]);
        assert!(depth_png16(&d, 0.0).is_err());
    }

    #[test]
    fn mask_export() {
        let m = EditMask::new(Array2::from_elem((2, 2), 1.0)).unwrap();
        let back = image::load_from_memory(&mask_png(&m).unwrap()).unwrap().to_luma8();
        assert!(back.pixels().all(|p| p.0 == [255]));
    }
}
