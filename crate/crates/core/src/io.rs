//! On-disk tensors and 2D previews.
//!
//! A tensor file is the magic `DFRG1`, a little-endian `u32` header length, a
//! JSON header and the payload: `channels × prod(shape)` little-endian `f32`
//! values, channel-first, each channel in row-major order. Values are rounded
//! to `f32` on save, so data that is already `f32`-representable round-trips
//! exactly.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::deform::DeformationField;
use crate::error::{Error, Result};
use crate::grid::{GridShape, LabelMap, ScalarImage, VectorField};

pub const TENSOR_MAGIC: &[u8; 5] = b"DFRG1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Image,
    Labels,
    Velocity,
    Deformation,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Role::Image => "image",
            Role::Labels => "labels",
            Role::Velocity => "velocity",
            Role::Deformation => "deformation",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorHeader {
    pub dtype: String,
    pub shape: Vec<usize>,
    pub channels: usize,
    pub role: Role,
}

/// A decoded tensor file.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub header: TensorHeader,
    pub data: Vec<f64>,
}

impl TensorFile {
    pub fn new(shape: &GridShape, channels: usize, role: Role, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() * channels {
            return Err(Error::ShapeMismatch(format!(
                "{} values for {channels} channel(s) of {shape}",
                data.len()
            )));
        }
        let header = TensorHeader {
            dtype: "f32".into(),
            shape: shape.dims().to_vec(),
            channels,
            role,
        };
        Ok(Self { header, data })
    }

    pub fn grid(&self) -> Result<GridShape> {
        GridShape::new(&self.header.shape)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(9 + json.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 9 || &bytes[..5] != TENSOR_MAGIC {
            return Err(Error::Format("not a tensor file: bad magic".into()));
        }
        let hlen = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
        let body = &bytes[9..];
        if body.len() < hlen {
            return Err(Error::Format("truncated tensor header".into()));
        }
        let header: TensorHeader = serde_json::from_slice(&body[..hlen])?;
        if header.dtype != "f32" {
            return Err(Error::Format(format!(
                "unsupported dtype {:?}",
                header.dtype
            )));
        }
        let shape = GridShape::new(&header.shape)?;
        let payload = &body[hlen..];
        let expected = shape.len() * header.channels * 4;
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "payload has {} bytes, header implies {expected}",
                payload.len()
            )));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Ok(Self { header, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    fn expect(&self, role: Role, channels: Option<usize>) -> Result<GridShape> {
        if self.header.role != role {
            return Err(Error::Format(format!(
                "expected a {role} tensor, found {}",
                self.header.role
            )));
        }
        let shape = self.grid()?;
        let want = channels.unwrap_or(shape.ndim());
        if self.header.channels != want {
            return Err(Error::Format(format!(
                "{role} tensor needs {want} channel(s), has {}",
                self.header.channels
            )));
        }
        Ok(shape)
    }
}

pub fn save_image(path: &Path, img: &ScalarImage) -> Result<()> {
    TensorFile::new(img.shape(), 1, Role::Image, img.values().to_vec())?.save(path)
}

pub fn load_image(path: &Path) -> Result<ScalarImage> {
    let t = TensorFile::load(path)?;
    let shape = t.expect(Role::Image, Some(1))?;
    ScalarImage::new(shape, t.data)
}

pub fn save_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    if labels.labels().iter().any(|&l| l > (1 << 24)) {
        return Err(Error::InvalidArgument(
            "labels above 2^24 are not representable as f32".into(),
        ));
    }
    let data = labels.labels().iter().map(|&l| l as f64).collect();
    TensorFile::new(labels.shape(), 1, Role::Labels, data)?.save(path)
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let t = TensorFile::load(path)?;
    let shape = t.expect(Role::Labels, Some(1))?;
    let labels = t
        .data
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && v <= (1u32 << 24) as f64 {
                Ok(v as u32)
            } else {
                Err(Error::Format(format!(
                    "{}: label value {v} is not a non-negative integer",
                    path.display()
                )))
            }
        })
        .collect::<Result<Vec<u32>>>()?;
    LabelMap::new(shape, labels)
}

pub fn save_velocity(path: &Path, v: &VectorField) -> Result<()> {
    TensorFile::new(v.shape(), v.ndim(), Role::Velocity, v.data().to_vec())?.save(path)
}

pub fn load_velocity(path: &Path) -> Result<VectorField> {
    let t = TensorFile::load(path)?;
    let shape = t.expect(Role::Velocity, None)?;
    VectorField::new(shape, t.data)
}

/// Stores the displacement `φ(p) − p`.
pub fn save_deformation(path: &Path, phi: &DeformationField) -> Result<()> {
    let u = phi.displacement();
    TensorFile::new(u.shape(), u.ndim(), Role::Deformation, u.data().to_vec())?.save(path)
}

pub fn load_deformation(path: &Path) -> Result<DeformationField> {
    let t = TensorFile::load(path)?;
    let shape = t.expect(Role::Deformation, None)?;
    Ok(DeformationField::from_displacement(VectorField::new(
        shape, t.data,
    )?))
}

fn require_2d(shape: &GridShape) -> Result<(usize, usize)> {
    match shape.dims() {
        [h, w] => Ok((*h, *w)),
        _ => Err(Error::InvalidArgument(format!(
            "previews are 2D only, got {shape}"
        ))),
    }
}

/// Binary 8-bit PGM of `img`, min-max scaled (flat images map to black).
pub fn pgm_bytes(img: &ScalarImage) -> Result<Vec<u8>> {
    let (h, w) = require_2d(img.shape())?;
    let v = img.values();
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        v.iter()
            .map(|&x| (((x - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    Ok(out)
}

/// Binary PPM rendering of a 2D deformation: displacement components as red
/// and green around mid-gray, with the image of a regular grid of lines
/// (spacing `spacing`) under `φ` drawn in black.
pub fn deformation_ppm_bytes(phi: &DeformationField, spacing: usize) -> Result<Vec<u8>> {
    let shape = phi.shape();
    let (h, w) = require_2d(shape)?;
    let spacing = spacing.max(2);
    let u = phi.displacement();
    let (ur, uc) = (u.component(0), u.component(1));
    let scale = u.max_abs().max(1e-12);
    let mut rgb: Vec<[u8; 3]> = (0..h * w)
        .map(|i| {
            let ch = |d: f64| (127.5 + 127.5 * d / scale).round().clamp(0.0, 255.0) as u8;
            [ch(ur[i]), ch(uc[i]), 128]
        })
        .collect();
    // A voxel lies on a warped grid line when φ crosses a multiple of
    // `spacing` between it and its next neighbor.
    let cell = |x: f64| (x / spacing as f64).floor();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let (pr, pc) = (r as f64 + ur[i], c as f64 + uc[i]);
            let mut line = false;
            if c + 1 < w {
                line |= cell(pc) != cell(c as f64 + 1.0 + uc[i + 1]);
            }
            if r + 1 < h {
                line |= cell(pr) != cell(r as f64 + 1.0 + ur[i + w]);
            }
            if line {
                rgb[i] = [0, 0, 0];
            }
        }
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend(rgb.iter().flatten());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{seeded, smooth_random_field};

    #[test]
    fn bytes_roundtrip_is_exact() {
        let s = GridShape::new(&[5, 7]).unwrap();
        let data: Vec<f64> = (0..70).map(|i| (i as f32 * 0.37 - 3.0) as f64).collect();
        let t = TensorFile::new(&s, 2, Role::Velocity, data).unwrap();
        let b = t.to_bytes().unwrap();
        let back = TensorFile::from_bytes(&b).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_bytes().unwrap(), b);
        assert_eq!(&b[..5], b"DFRG1");
    }

    #[test]
    fn rejects_bad_files() {
        let s = GridShape::new(&[4, 4]).unwrap();
        let b = TensorFile::new(&s, 1, Role::Image, vec![0.5; 16])
            .unwrap()
            .to_bytes()
            .unwrap();
        assert!(TensorFile::from_bytes(&b[..b.len() - 2]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(TensorFile::from_bytes(&bad).is_err());
        assert!(TensorFile::from_bytes(b"DF").is_err());
        assert!(TensorFile::new(&s, 2, Role::Image, vec![0.0; 16]).is_err());
    }

    #[test]
    fn typed_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let s = GridShape::new(&[6, 8]).unwrap();
        let img = ScalarImage::from_fn(s.clone(), |c| (c[0] * 8 + c[1]) as f64 / 64.0).unwrap();
        let p = dir.path().join("img.dfrg");
        save_image(&p, &img).unwrap();
        assert_eq!(load_image(&p).unwrap(), img);
        assert!(load_labels(&p).is_err());

        let labels = LabelMap::new(s.clone(), (0..48).map(|i| i % 5).collect()).unwrap();
        let p = dir.path().join("lab.dfrg");
        save_labels(&p, &labels).unwrap();
        assert_eq!(load_labels(&p).unwrap(), labels);

        let v = smooth_random_field(&s, 2.0, 1.5, &mut seeded(2));
        let v = VectorField::new(
            s.clone(),
            v.data().iter().map(|&x| x as f32 as f64).collect(),
        )
        .unwrap();
        let p = dir.path().join("vel.dfrg");
        save_velocity(&p, &v).unwrap();
        assert_eq!(load_velocity(&p).unwrap(), v);
        let phi = DeformationField::from_displacement(v);
        let p = dir.path().join("phi.dfrg");
        save_deformation(&p, &phi).unwrap();
        assert_eq!(load_deformation(&p).unwrap(), phi);
        assert!(load_image(&dir.path().join("missing.dfrg")).is_err());
    }

    #[test]
    fn previews() {
        let s = GridShape::new(&[4, 6]).unwrap();
        let img = ScalarImage::from_fn(s.clone(), |c| c[1] as f64).unwrap();
        let pgm = pgm_bytes(&img).unwrap();
        assert!(pgm.starts_with(b"P5\n6 4\n255\n"));
        assert_eq!(pgm.len(), 11 + 24);
        assert_eq!(*pgm.last().unwrap(), 255);
        let ppm = deformation_ppm_bytes(&DeformationField::identity(s), 2).unwrap();
        assert_eq!(ppm.len(), 11 + 72);
        let vol = ScalarImage::zeros(GridShape::new(&[2, 2, 2]).unwrap());
        assert!(pgm_bytes(&vol).is_err());
    }
}
