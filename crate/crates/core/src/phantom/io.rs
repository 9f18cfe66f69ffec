//! Volume files: a one-line JSON header, then little-endian `f32` voxels in
//! `(D, H, W)` order, then (optionally) `u8` mask values in `(D, H, W, C)`.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use super::{check_spacing, DomainTag, MaskVolume, Volume};
use crate::error::{Error, Result};

pub const VOLUME_MAGIC: &str = "SEGCLVOL1";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    magic: String,
    dims: [usize; 3],
    spacing_um: [f64; 3],
    domain: DomainTag,
    volume_id: String,
    dtype: String,
    has_mask: bool,
    class_names: Vec<String>,
}

pub fn write_volume(mut w: impl Write, vol: &Volume, mask: Option<&MaskVolume>) -> Result<()> {
    vol.validate()?;
    if let Some(m) = mask {
        m.validate_against(vol)?;
    }
    let (d, h, wd) = vol.voxels.dim();
    let header = Header {
        magic: VOLUME_MAGIC.into(),
        dims: [d, h, wd],
        spacing_um: vol.spacing_um,
        domain: vol.domain,
        volume_id: vol.volume_id.clone(),
        dtype: "f32le".into(),
        has_mask: mask.is_some(),
        class_names: mask.map(|m| m.class_names.clone()).unwrap_or_default(),
    };
    let mut buf = serde_json::to_vec(&header)?;
    buf.push(b'\n');
    buf.reserve(vol.voxels.len() * 4 + mask.map_or(0, |m| m.labels.len()));
    for v in vol.voxels.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(m) = mask {
        buf.extend(m.labels.iter());
    }
    w.write_all(&buf).map_err(|e| Error::io("<volume stream>", e))
}

pub fn read_volume(mut r: impl Read) -> Result<(Volume, Option<MaskVolume>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes).map_err(|e| Error::io("<volume stream>", e))?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::MalformedHeader("no header line terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::MalformedHeader(format!("header is not valid: {e}")))?;
    if header.magic != VOLUME_MAGIC {
        return Err(Error::MalformedHeader(format!(
            "magic {:?}, expected {VOLUME_MAGIC:?}",
            header.magic
        )));
    }
    if header.dtype != "f32le" {
        return Err(Error::MalformedHeader(format!("unsupported dtype {:?}", header.dtype)));
    }
    check_spacing(&header.spacing_um)?;
    let [d, h, w] = header.dims;
    let c = header.class_names.len();
    if header.has_mask && c == 0 {
        return Err(Error::Shape("mask present but no class names".into()));
    }
    let n = d * h * w;
    let expected = n * 4 + if header.has_mask { n * c } else { 0 };
    let payload = &bytes[nl + 1..];
    if payload.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(Error::Shape(format!(
            "payload has {} bytes but header declares {expected}",
            payload.len()
        )));
    }
    let voxels: Vec<f32> = payload[..n * 4]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let voxels = Array3::from_shape_vec((d, h, w), voxels).map_err(|e| Error::Shape(e.to_string()))?;
    let vol = Volume::new(voxels, header.spacing_um, header.domain, header.volume_id)?;
    let mask = if header.has_mask {
        let labels =
            Array4::from_shape_vec((d, h, w, c), payload[n * 4..].to_vec()).map_err(|e| Error::Shape(e.to_string()))?;
        let m = MaskVolume {
            labels,
            class_names: header.class_names,
        };
        m.validate_against(&vol)?;
        Some(m)
    } else {
        None
    };
    Ok((vol, mask))
}

pub fn save_volume(path: impl AsRef<Path>, vol: &Volume, mask: Option<&MaskVolume>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_volume(std::io::BufWriter::new(f), vol, mask)
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<(Volume, Option<MaskVolume>)> {
    let path = path.as_ref();
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_volume(std::io::BufReader::new(f))
}
