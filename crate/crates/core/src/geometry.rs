//! Point clouds from PLY (ascii or binary) and Wavefront OBJ files.

use std::io::{BufReader, Cursor};
use std::path::Path;

use ply_rs_bw::parser::Parser;
use ply_rs_bw::ply::{DefaultElement, Property};

use crate::codec::PointCloud;
use crate::error::{Error, Result};

/// Colour assigned to vertices that carry none.
pub const DEFAULT_COLOR: [f64; 3] = [0.5, 0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GeometryFormat {
    Ply,
    Obj,
}

impl GeometryFormat {
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
            Some("ply") => Ok(Self::Ply),
            Some("obj") => Ok(Self::Obj),
            other => Err(Error::Format(format!("unsupported geometry file extension {other:?}"))),
        }
    }

    /// PLY files start with the `ply` magic line; anything else is tried as OBJ.
    pub fn sniff(bytes: &[u8]) -> Self {
        if bytes.starts_with(b"ply\n") || bytes.starts_with(b"ply\r\n") {
            Self::Ply
        } else {
            Self::Obj
        }
    }
}

fn scalar(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::Char(v) => v.into(),
        Property::UChar(v) => v.into(),
        Property::Short(v) => v.into(),
        Property::UShort(v) => v.into(),
        Property::Int(v) => v.into(),
        Property::UInt(v) => v.into(),
        Property::Float(v) => v.into(),
        Property::Double(v) => v,
        _ => return None,
    })
}

/// Integer colour channels are scaled by their type's maximum; float channels are taken as-is.
fn colour_channel(p: &Property) -> Option<f64> {
    Some(match *p {
        Property::UChar(v) => f64::from(v) / 255.0,
        Property::UShort(v) => f64::from(v) / 65535.0,
        Property::Float(v) => v.into(),
        Property::Double(v) => v,
        _ => return None,
    })
}

pub fn parse_ply(bytes: &[u8]) -> Result<PointCloud> {
    let parser = Parser::<DefaultElement>::new();
    let ply = parser
        .read_ply(&mut BufReader::new(Cursor::new(bytes)))
        .map_err(|e| Error::Format(format!("ply: {e}")))?;
    let vertices = ply
        .payload
        .get("vertex")
        .ok_or_else(|| Error::Format("ply: no vertex element".into()))?;
    let mut cloud = PointCloud::default();
    for (i, v) in vertices.iter().enumerate() {
        let coord = |k: &str| {
            v.get(k)
                .and_then(scalar)
                .ok_or_else(|| Error::Format(format!("ply: vertex {i} has no numeric {k}")))
        };
        cloud.positions.push([coord("x")?, coord("y")?, coord("z")?]);
        let colour = match (v.get("red"), v.get("green"), v.get("blue")) {
            (Some(r), Some(g), Some(b)) => match (colour_channel(r), colour_channel(g), colour_channel(b)) {
                (Some(r), Some(g), Some(b)) => [r, g, b],
                _ => return Err(Error::Format(format!("ply: vertex {i} has unsupported colour types"))),
            },
            _ => DEFAULT_COLOR,
        };
        cloud.colors.push(colour);
    }
    cloud.validate().map_err(|e| Error::Format(format!("ply: {e}")))?;
    Ok(cloud)
}

/// Vertices referenced by any face or line element, over every object
/// in the file. Materials are ignored.
pub fn parse_obj(bytes: &[u8]) -> Result<PointCloud> {
    let opts = tobj::LoadOptions {
        single_index: true,
        ignore_points: false,
        ignore_lines: false,
        ..Default::default()
    };
    let (models, _) = tobj::load_obj_buf(&mut BufReader::new(Cursor::new(bytes)), &opts, |_| {
        Err(tobj::LoadError::MaterialParseError)
    })
    .map_err(|e| Error::Format(format!("obj: {e}")))?;
    let mut cloud = PointCloud::default();
    for m in &models {
        let mesh = &m.mesh;
        let n = mesh.positions.len() / 3;
        let has_colour = mesh.vertex_color.len() == mesh.positions.len();
        for i in 0..n {
            let p = &mesh.positions[3 * i..3 * i + 3];
            cloud.positions.push([p[0].into(), p[1].into(), p[2].into()]);
            cloud.colors.push(if has_colour {
                let c = &mesh.vertex_color[3 * i..3 * i + 3];
                [c[0].into(), c[1].into(), c[2].into()]
            } else {
                DEFAULT_COLOR
            });
        }
    }
    if cloud.is_empty() {
        return Err(Error::Format("obj: no element references a vertex".into()));
    }
    cloud.validate().map_err(|e| Error::Format(format!("obj: {e}")))?;
    Ok(cloud)
}

pub fn parse_geometry(bytes: &[u8], format: GeometryFormat) -> Result<PointCloud> {
    match format {
        GeometryFormat::Ply => parse_ply(bytes),
        GeometryFormat::Obj => parse_obj(bytes),
    }
}

pub fn load_geometry(path: &Path) -> Result<PointCloud> {
    let bytes = std::fs::read(path)?;
    parse_geometry(&bytes, GeometryFormat::from_path(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const ASCII: &str = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\n\
property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n0 0 0 255 0 0\n1 2 3 0 0 255\n";

    #[test]
    fn ascii_ply_with_colours() {
        let c = parse_ply(ASCII.as_bytes()).unwrap();
        assert_eq!(c.positions, vec![[0.0, 0.0, 0.0], [1.0, 2.0, 3.0]]);
        assert_eq!(c.colors, vec![[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        assert_eq!(GeometryFormat::sniff(ASCII.as_bytes()), GeometryFormat::Ply);
    }

    #[test]
    fn binary_ply_without_colours() {
        let mut bytes = b"ply\nformat binary_little_endian 1.0\nelement vertex 1\nproperty double x\nproperty double y\nproperty double z\nend_header\n".to_vec();
        for v in [0.25f64, -1.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let c = parse_ply(&bytes).unwrap();
        assert_eq!(c.positions, vec![[0.25, -1.0, 4.0]]);
        assert_eq!(c.colors, vec![DEFAULT_COLOR]);
    }

    #[test]
    fn obj_vertices_and_colours() {
        let c = parse_obj(b"v 0 0 0 1 0 0\nv 1 0 0 0 1 0\nv 0 1 0 0 0 1\nf 1 2 3\n").unwrap();
        assert_eq!(c.len(), 3);
        assert_eq!(c.colors[1], [0.0, 1.0, 0.0]);
        let plain = parse_obj(b"v 0 0 0\nv 1 1 1\nl 1 2\n").unwrap();
        assert_eq!(plain.colors, vec![DEFAULT_COLOR; 2]);
        assert!(parse_obj(b"v 0 0 0\n").is_err());
    }

    #[test]
    fn malformed_inputs_are_format_errors() {
        assert!(matches!(parse_ply(b"ply\nformat ascii 1.0\nend_header\n"), Err(Error::Format(_))));
        assert!(matches!(parse_ply(b"not a ply"), Err(Error::Format(_))));
        assert!(matches!(parse_obj(b""), Err(Error::Format(_))));
        assert!(GeometryFormat::from_path(Path::new("a.stl")).is_err());
    }
}
