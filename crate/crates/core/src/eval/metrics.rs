use crate::error::{Error, Result};
use crate::tensor::{cosine, Image};

/// Joint image-text embedding space.
pub trait Embedder: Send + Sync {
    fn id(&self) -> &str;
    fn embed_image(&self, image: &Image) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &str) -> Result<Vec<f64>>;
}

/// Produces a self-similarity descriptor of an image.
pub trait Backbone: Send + Sync {
    fn id(&self) -> &str;
    fn descriptor(&self, image: &Image) -> Result<Vec<f64>>;
}

fn checked_cosine(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(cosine(a, b))
}

/// Mean cosine between each image embedding and the text embedding.
/// A zero embedding contributes 0.
pub fn clip_sim(images: &[Image], target_text: &str, embedder: &dyn Embedder) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::InvalidInput("clip_sim needs at least one image".into()));
    }
    let text = embedder.embed_text(target_text)?;
    let mut total = 0.0;
    for img in images {
        total += checked_cosine(&embedder.embed_image(img)?, &text)?.unwrap_or(0.0);
    }
    Ok(total / images.len() as f64)
}

/// Mean cosine between per-view image directions and the text direction.
/// Views whose image direction is zero (edit equals source) contribute 0.
pub fn clip_dir(
    src_images: &[Image],
    edit_images: &[Image],
    source_text: &str,
    target_text: &str,
    embedder: &dyn Embedder,
) -> Result<f64> {
    if src_images.len() != edit_images.len() {
        return Err(Error::InvalidInput(format!(
            "{} source views but {} edited views",
            src_images.len(),
            edit_images.len()
        )));
    }
    if src_images.is_empty() {
        return Err(Error::InvalidInput("clip_dir needs at least one view".into()));
    }
    let ts = embedder.embed_text(source_text)?;
    let tt = embedder.embed_text(target_text)?;
    let text_dir = difference(&tt, &ts)?;
    let mut total = 0.0;
    for (s, e) in src_images.iter().zip(edit_images) {
        let dir = difference(&embedder.embed_image(e)?, &embedder.embed_image(s)?)?;
        total += checked_cosine(&dir, &text_dir)?.unwrap_or(0.0);
    }
    Ok(total / src_images.len() as f64)
}

fn difference(a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
    if a.len() != b.len() {
        return Err(Error::shape(a.len(), b.len()));
    }
    Ok(a.iter().zip(b).map(|(x, y)| x - y).collect())
}

/// `1 - cos` between structure descriptors, in `[0, 2]`.
///
/// Two all-zero descriptors count as identical; one zero descriptor against
/// a non-zero one counts as unrelated (distance 1).
pub fn structure_distance(a: &Image, b: &Image, backbone: &dyn Backbone) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(a.dim(), b.dim()));
    }
    let da = backbone.descriptor(a)?;
    let db = backbone.descriptor(b)?;
    if da == db {
        return Ok(0.0);
    }
    Ok(match checked_cosine(&da, &db)? {
        Some(c) => 1.0 - c,
        None => 1.0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    /// Embeds an image by its top-left red value and looks texts up in a table.
    struct Table {
        images: HashMap<u64, Vec<f64>>,
        texts: HashMap<&'static str, Vec<f64>>,
    }

    impl Embedder for Table {
        fn id(&self) -> &str {
            "table"
        }
        fn embed_image(&self, image: &Image) -> Result<Vec<f64>> {
            Ok(self.images[&image[[0, 0, 0]].to_bits()].clone())
        }
        fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
            Ok(self.texts[text].clone())
        }
    }

    fn img(v: f64) -> Image {
        Image::from_elem((2, 2, 3), v)
    }

    fn table(images: &[(f64, Vec<f64>)], texts: &[(&'static str, Vec<f64>)]) -> Table {
        Table {
            images: images.iter().map(|(k, v)| (k.to_bits(), v.clone())).collect(),
            texts: texts.iter().cloned().collect(),
        }
    }

    #[test]
    fn clip_sim_pinned() {
        let v = vec![0.3, -1.7, 2.9];
        let e = table(&[(0.1, v.clone()), (0.2, vec![0.0, 0.0, 1.0])], &[("same", v), ("ortho", vec![1.0, 0.0, 0.0])]);
        assert_eq!(clip_sim(&[img(0.1)], "same", &e).unwrap(), 1.0);
        assert_eq!(clip_sim(&[img(0.2)], "ortho", &e).unwrap(), 0.0);
        assert!(clip_sim(&[], "same", &e).is_err());
    }

    #[test]
    fn clip_dir_pinned() {
        let e = table(
            &[(0.0, vec![0.0, 0.0]), (1.0, vec![1.0, 0.0]), (2.0, vec![0.5, 0.5])],
            &[("src", vec![0.0, 0.0]), ("tgt", vec![1.0, 1.0]), ("tgt2", vec![0.5, 0.5])],
        );
        // identical edits contribute 0
        assert_eq!(clip_dir(&[img(1.0)], &[img(1.0)], "src", "tgt", &e).unwrap(), 0.0);
        // image direction equals text direction
        assert_eq!(clip_dir(&[img(0.0)], &[img(2.0)], "src", "tgt2", &e).unwrap(), 1.0);
        // (1, 0) against (1, 1)/sqrt 2
        let c = clip_dir(&[img(0.0)], &[img(1.0)], "src", "tgt", &e).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!((c - 0.7071).abs() < 5e-5);
        assert!(clip_dir(&[img(0.0)], &[], "src", "tgt", &e).is_err());
    }

    struct Fixed(Vec<f64>, Vec<f64>);

    impl Backbone for Fixed {
        fn id(&self) -> &str {
            "fixed"
        }
        fn descriptor(&self, image: &Image) -> Result<Vec<f64>> {
            Ok(if image[[0, 0, 0]] == 0.0 { self.0.clone() } else { self.1.clone() })
        }
    }

    #[test]
    fn structure_distance_pinned() {
        let b = Fixed(vec![1.0, 0.0], vec![0.0, 1.0]);
        assert_eq!(structure_distance(&img(0.0), &img(0.0), &b).unwrap(), 0.0);
        assert_eq!(structure_distance(&img(0.0), &img(1.0), &b).unwrap(), 1.0);
        let opposite = Fixed(vec![1.0, 0.0], vec![-1.0, 0.0]);
        assert_eq!(structure_distance(&img(0.0), &img(1.0), &opposite).unwrap(), 2.0);
        assert!(structure_distance(&img(0.0), &Image::zeros((3, 3, 3)), &b).is_err());
    }
}
