//! Raster files: one line of compact JSON header, a `\n`, then the pixels as
//! little-endian band-planar data.
//!
//! ```text
//! {"width":512,"height":512,"bands":4,"dtype":"f32","kind":"image"}
//! <width * height * bands * dtype size bytes>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::SegnetError;
use crate::bae::{LabelMask, IGNORE_ID};
use crate::tensor::{Shape, Tensor};

const MAX_HEADER: u64 = 4096;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RasterKind {
    Image,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterHeader {
    pub width: usize,
    pub height: usize,
    pub bands: usize,
    pub dtype: DType,
    pub kind: RasterKind,
}

impl RasterHeader {
    pub fn payload_len(&self) -> Option<usize> {
        self.width
            .checked_mul(self.height)?
            .checked_mul(self.bands)?
            .checked_mul(self.dtype.size())
    }
}

fn malformed(path: &Path, msg: impl std::fmt::Display) -> SegnetError {
    SegnetError::Raster(format!("{}: {msg}", path.display()))
}

fn read_raw(path: &Path) -> Result<(RasterHeader, Vec<u8>), SegnetError> {
    let file = File::open(path).map_err(|e| SegnetError::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut line = Vec::new();
    (&mut reader)
        .take(MAX_HEADER)
        .read_until(b'\n', &mut line)
        .map_err(|e| SegnetError::io(path, e))?;
    if line.last() != Some(&b'\n') {
        return Err(malformed(path, "missing or oversized header line"));
    }
    line.pop();
    let header: RasterHeader =
        serde_json::from_slice(&line).map_err(|e| malformed(path, format!("bad header: {e}")))?;
    let expected = header
        .payload_len()
        .ok_or_else(|| malformed(path, "header dimensions overflow"))?;
    let mut payload = Vec::with_capacity(expected);
    reader
        .read_to_end(&mut payload)
        .map_err(|e| SegnetError::io(path, e))?;
    if payload.len() != expected {
        return Err(malformed(
            path,
            format!("payload is {} bytes, header requires {expected}", payload.len()),
        ));
    }
    Ok((header, payload))
}

fn write_raw(path: &Path, header: &RasterHeader, payload: &[u8]) -> Result<(), SegnetError> {
    let file = File::create(path).map_err(|e| SegnetError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut head = serde_json::to_vec(header)?;
    head.push(b'\n');
    w.write_all(&head)
        .and_then(|_| w.write_all(payload))
        .and_then(|_| w.flush())
        .map_err(|e| SegnetError::io(path, e))
}

/// Saves a `(1, bands, h, w)` tensor as an f32 image.
pub fn save_image(path: &Path, image: &Tensor) -> Result<(), SegnetError> {
    let s = image.shape();
    if s.n != 1 {
        return Err(SegnetError::Raster(format!("cannot save batch of {} as one raster", s.n)));
    }
    let header = RasterHeader {
        width: s.w,
        height: s.h,
        bands: s.c,
        dtype: DType::F32,
        kind: RasterKind::Image,
    };
    let payload: Vec<u8> = image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    write_raw(path, &header, &payload)
}

/// Loads an image raster as a `(1, bands, h, w)` tensor; u8 samples are
/// converted to their integer value.
pub fn load_image(path: &Path) -> Result<Tensor, SegnetError> {
    let (h, payload) = read_raw(path)?;
    if h.kind != RasterKind::Image {
        return Err(malformed(path, "expected an image raster, found a mask"));
    }
    let data = match h.dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        DType::U8 => payload.iter().map(|&b| f32::from(b)).collect(),
    };
    Ok(Tensor::new(Shape::new(1, h.bands, h.height, h.width), data)?)
}

/// Saves single-band u8 labels (masks and class maps).
pub fn save_mask(path: &Path, mask: &LabelMask) -> Result<(), SegnetError> {
    let header = RasterHeader {
        width: mask.width,
        height: mask.height,
        bands: 1,
        dtype: DType::U8,
        kind: RasterKind::Mask,
    };
    write_raw(path, &header, &mask.labels)
}

/// Loads a mask raster. Labels are not range-checked here; that happens when
/// the mask is used against a class count.
pub fn load_mask(path: &Path) -> Result<LabelMask, SegnetError> {
    let (h, payload) = read_raw(path)?;
    if h.kind != RasterKind::Mask || h.dtype != DType::U8 || h.bands != 1 {
        return Err(malformed(
            path,
            format!("expected a 1-band u8 mask, found {:?} {:?} x{}", h.kind, h.dtype, h.bands),
        ));
    }
    Ok(LabelMask {
        height: h.height,
        width: h.width,
        labels: payload,
        ignore_id: IGNORE_ID,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_init, InitScheme};

    #[test]
    fn image_roundtrip_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.raster");
        let mut t = seeded_init(Shape::new(1, 4, 13, 7), InitScheme::UniformFanIn, 1);
        t.data_mut()[0] = -0.0;
        t.data_mut()[1] = f32::MIN_POSITIVE / 2.0;
        save_image(&p, &t).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.bit_eq(&t));
        let text = std::fs::read(&p).unwrap();
        assert!(text.starts_with(br#"{"width":7,"height":13,"bands":4,"dtype":"f32","kind":"image"}"#));
    }

    #[test]
    fn mask_roundtrip_and_kind_checks() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.raster");
        let m = LabelMask::from_fn(5, 6, |y, x| ((y + x) % 3) as u8);
        save_mask(&p, &m).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
        assert!(load_image(&p).is_err());
        let img = dir.path().join("i.raster");
        save_image(&img, &Tensor::zeros(Shape::new(1, 1, 2, 2))).unwrap();
        assert!(load_mask(&img).is_err());
    }

    #[test]
    fn truncated_payload_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.raster");
        save_image(&p, &Tensor::zeros(Shape::new(1, 2, 4, 4))).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 3]).unwrap();
        let err = load_image(&p).unwrap_err().to_string();
        assert!(err.contains("payload"), "{err}");
    }

    #[test]
    fn malformed_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.raster");
        for bad in [
            &b"no header"[..],
            b"{\"width\":1}\n\0",
            b"{\"width\":1,\"height\":1,\"bands\":1,\"dtype\":\"f64\",\"kind\":\"image\"}\n\0",
        ] {
            std::fs::write(&p, bad).unwrap();
            assert!(matches!(load_image(&p), Err(SegnetError::Raster(_))));
        }
    }

    #[test]
    fn u8_image_loads_as_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("u.raster");
        let header = RasterHeader { width: 2, height: 1, bands: 1, dtype: DType::U8, kind: RasterKind::Image };
        write_raw(&p, &header, &[7, 200]).unwrap();
        assert_eq!(load_image(&p).unwrap().data(), &[7.0, 200.0]);
    }

    #[test]
    fn out_of_range_mask_loads_but_fails_validation() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.raster");
        save_mask(&p, &LabelMask::from_fn(2, 2, |_, x| 5 * x as u8)).unwrap();
        let m = load_mask(&p).unwrap();
        assert!(m.validate(3).is_err());
        assert!(m.validate(6).is_ok());
    }
}
