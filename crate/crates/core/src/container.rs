//! Binary tensor container (safetensors, f64) with JSON sidecars.
//!
//! A latent stored at `foo.safetensors` has its metadata in `foo.json`:
//! `{"codec_id": ..., "shape": [D, C], "dtype": "f64"}`.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, ArrayD, IxDyn};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::Latent;

pub const DTYPE: &str = "f64";
const LATENT_TENSOR: &str = "latent";

fn fmt_err(e: impl std::fmt::Display) -> Error {
    Error::Format(e.to_string())
}

/// Encodes named arrays. Keys are sorted, so output is deterministic.
pub fn tensors_to_bytes(tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<Vec<u8>> {
    let raw: Vec<(String, Vec<usize>, Vec<u8>)> = tensors
        .iter()
        .map(|(k, v)| {
            let bytes = v.iter().flat_map(|x| x.to_le_bytes()).collect();
            (k.clone(), v.shape().to_vec(), bytes)
        })
        .collect();
    let views = raw
        .iter()
        .map(|(k, shape, bytes)| Ok((k.as_str(), TensorView::new(Dtype::F64, shape.clone(), bytes).map_err(fmt_err)?)))
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, None::<HashMap<String, String>>).map_err(fmt_err)
}

/// Decodes a container. Only finite f64 tensors are accepted.
pub fn tensors_from_bytes(bytes: &[u8]) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let st = SafeTensors::deserialize(bytes).map_err(fmt_err)?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F64 {
            return Err(Error::Format(format!("tensor {name:?} has dtype {:?}, expected F64", view.dtype())));
        }
        let values: Vec<f64> = view
            .data()
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Format(format!("tensor {name:?} has non-finite entries")));
        }
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(fmt_err)?;
        out.insert(name, arr);
    }
    Ok(out)
}

pub fn write_tensors(path: &Path, tensors: &BTreeMap<String, ArrayD<f64>>) -> Result<()> {
    write_atomic(path, &tensors_to_bytes(tensors)?)
}

pub fn read_tensors(path: &Path) -> Result<BTreeMap<String, ArrayD<f64>>> {
    tensors_from_bytes(&fs::read(path)?)
}

/// Writes through a temporary file and renames, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn take_2d(tensors: &mut BTreeMap<String, ArrayD<f64>>, name: &str) -> Result<Array2<f64>> {
    let t = tensors
        .remove(name)
        .ok_or_else(|| Error::Format(format!("container has no tensor {name:?}")))?;
    t.into_dimensionality::<ndarray::Ix2>()
        .map_err(|_| Error::Format(format!("tensor {name:?} is not 2D")))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentMeta {
    pub codec_id: String,
    pub shape: (usize, usize),
    pub dtype: String,
}

impl LatentMeta {
    pub fn of(latent: &Latent) -> Self {
        Self {
            codec_id: latent.codec_id().to_string(),
            shape: latent.shape(),
            dtype: DTYPE.into(),
        }
    }

    pub fn parse(json: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(json)?;
        if m.dtype != DTYPE {
            return Err(Error::Format(format!("unsupported dtype {:?}", m.dtype)));
        }
        Ok(m)
    }
}

/// The sidecar path for a container path.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn latent_to_parts(latent: &Latent) -> Result<(Vec<u8>, String)> {
    let mut t = BTreeMap::new();
    t.insert(LATENT_TENSOR.to_string(), latent.data().clone().into_dyn());
    Ok((tensors_to_bytes(&t)?, serde_json::to_string_pretty(&LatentMeta::of(latent))?))
}

pub fn latent_from_parts(bytes: &[u8], sidecar: &str) -> Result<Latent> {
    let meta = LatentMeta::parse(sidecar)?;
    let mut t = tensors_from_bytes(bytes)?;
    let data = take_2d(&mut t, LATENT_TENSOR)?;
    if data.dim() != meta.shape {
        return Err(Error::shape(meta.shape, data.dim()));
    }
    Latent::new(data, meta.codec_id)
}

pub fn save_latent(path: &Path, latent: &Latent) -> Result<()> {
    let (bytes, json) = latent_to_parts(latent)?;
    write_atomic(path, &bytes)?;
    write_atomic(&sidecar_path(path), json.as_bytes())
}

pub fn load_latent(path: &Path) -> Result<Latent> {
    let bytes = fs::read(path)?;
    let json = fs::read_to_string(sidecar_path(path))?;
    latent_from_parts(&bytes, &json)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn latent_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.safetensors");
        let l = Latent::new(ndarray::array![[1.0, -2.5], [1e-300, 7.0]], "toy-grid5").unwrap();
        save_latent(&path, &l).unwrap();
        assert!(path.with_extension("json").exists());
        assert_eq!(load_latent(&path).unwrap(), l);
    }

    #[test]
    fn rejects_mismatched_sidecar() {
        let l = Latent::zeros((2, 3), "c");
        let (bytes, _) = latent_to_parts(&l).unwrap();
        let bad = r#"{"codec_id":"c","shape":[3,2],"dtype":"f64"}"#;
        assert!(latent_from_parts(&bytes, bad).is_err());
        let bad_dtype = r#"{"codec_id":"c","shape":[2,3],"dtype":"f32"}"#;
        assert!(latent_from_parts(&bytes, bad_dtype).is_err());
        assert!(tensors_from_bytes(b"garbage").is_err());
    }

    #[test]
    fn rejects_non_f64_tensors() {
        let data = [0u8; 8];
        let v = TensorView::new(Dtype::F32, vec![2], &data).unwrap();
        let bytes = safetensors::serialize([("x", v)], None).unwrap();
        assert!(matches!(tensors_from_bytes(&bytes), Err(Error::Format(_))));
    }

    proptest! {
        #[test]
        fn bytes_round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            use rand::Rng;
            let mut rng = crate::rng::seeded(seed);
            let a = Array2::from_shape_fn((rows, cols), |_| rng.random_range(-1e6..1e6));
            let mut t = BTreeMap::new();
            t.insert("w".to_string(), a.clone().into_dyn());
            t.insert("b".to_string(), ArrayD::zeros(IxDyn(&[cols])));
            let back = tensors_from_bytes(&tensors_to_bytes(&t).unwrap()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
