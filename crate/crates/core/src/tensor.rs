//! Array aliases and small numeric helpers shared across modules.

use ndarray::{Array2, Array3, ArrayView2, Zip};

use crate::error::{Error, Result};

/// H x W x 3 image, values nominally in [0, 1].
pub type Image = Array3<f64>;
/// H x W depth map in world units.
pub type DepthMap = Array2<f64>;

pub fn all_finite<'a>(values: impl IntoIterator<Item = &'a f64>) -> bool {
    values.into_iter().all(|v| v.is_finite())
}

pub fn check_same_shape(expected: &[usize], actual: &[usize]) -> Result<()> {
    if expected != actual {
        return Err(Error::shape(expected, actual));
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; `None` when either vector has zero norm.
///
/// The denominator is `sqrt(|a|^2 |b|^2)` so that `cosine(a, a)` is exactly 1.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let aa = dot(a, a);
    let bb = dot(b, b);
    if aa == 0.0 || bb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (aa * bb).sqrt()).clamp(-1.0, 1.0))
}

pub fn max_abs_diff(a: ArrayView2<f64>, b: ArrayView2<f64>) -> f64 {
    let mut m = 0.0f64;
    Zip::from(a).and(b).for_each(|x, y| m = m.max((x - y).abs()));
    m
}

/// Bilinear resampling of a single-channel map with half-pixel centers
/// (the `align_corners = false` convention).
pub fn resize_bilinear(src: ArrayView2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = src.dim();
    let rows: Vec<(usize, usize, f64)> = (0..out_h).map(|o| sample_coord(o, out_h, h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|o| sample_coord(o, out_w, w)).collect();
    let mut out = Array2::zeros((out_h, out_w));
    for (i, &(y0, y1, fy)) in rows.iter().enumerate() {
        for (j, &(x0, x1, fx)) in cols.iter().enumerate() {
            let top = (1.0 - fx) * src[[y0, x0]] + fx * src[[y0, x1]];
            let bottom = (1.0 - fx) * src[[y1, x0]] + fx * src[[y1, x1]];
            out[[i, j]] = (1.0 - fy) * top + fy * bottom;
        }
    }
    out
}

/// Source index pair and interpolation weight for output coordinate `o`.
pub(crate) fn sample_coord(o: usize, out_len: usize, in_len: usize) -> (usize, usize, f64) {
    let scale = in_len as f64 / out_len as f64;
    let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_len - 1) as f64);
    let i0 = s.floor() as usize;
    let i1 = (i0 + 1).min(in_len - 1);
    (i0, i1, s - i0 as f64)
}

pub fn resize_image(img: &Image, out_h: usize, out_w: usize) -> Image {
    let (h, w, c) = img.dim();
    if h == out_h && w == out_w {
        return img.clone();
    }
    let mut out = Array3::zeros((out_h, out_w, c));
    for ch in 0..c {
        let plane = resize_bilinear(img.index_axis(ndarray::Axis(2), ch), out_h, out_w);
        out.index_axis_mut(ndarray::Axis(2), ch).assign(&plane);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn sigmoid_logit_inverse() {
        for &p in &[0.1, 0.5, 0.9] {
            assert!((sigmoid(logit(p)) - p).abs() < 1e-12);
        }
        assert_eq!(sigmoid(0.0), 0.5);
    }

    #[test]
    fn cosine_zero_vector_is_none() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn resize_identity_and_constant() {
        let a = array![[1.0, 2.0], [3.0, 4.0]];
        assert_eq!(resize_bilinear(a.view(), 2, 2), a);
        let c = Array2::from_elem((3, 5), 0.25);
        assert!(resize_bilinear(c.view(), 7, 2).iter().all(|&v| v == 0.25));
    }
}
