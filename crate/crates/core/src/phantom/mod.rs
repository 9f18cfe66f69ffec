//! Synthetic two-domain layered-tissue volumes with lesion classes.
//!
//! Lesion geometry is a function of the seed and geometry only; the domain
//! profile only changes appearance, so the same seed rendered under the
//! source and target profiles yields identical masks.

mod generate;
mod io;
mod resample;
mod stratify;

use std::collections::BTreeMap;

use ndarray::{s, Array2, Array3, Array4};
use serde::{Deserialize, Serialize};

pub use generate::{generate_corpus, generate_phantom, CLASS_NAMES};
pub use io::{load_volume, read_volume, save_volume, write_volume, VOLUME_MAGIC};
pub use resample::resample_slice;
pub use stratify::{stratify, DatasetSplit, SliceRef, StratifyConfig, UpperBoundSplit, VolumeMeta};

use crate::error::{Error, Result};
use crate::pairgen::SliceSample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
}

impl DomainTag {
    pub fn as_str(self) -> &'static str {
        match self {
            DomainTag::Source => "source",
            DomainTag::Target => "target",
        }
    }
}

impl std::fmt::Display for DomainTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Volume extent in voxels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geometry {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Geometry {
    pub fn desk() -> Self {
        Self {
            depth: 32,
            height: 64,
            width: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 || self.height < 16 || self.width < 16 {
            return Err(Error::Geometry(format!(
                "need depth >= 2, height >= 16, width >= 16; got {}x{}x{}",
                self.depth, self.height, self.width
            )));
        }
        Ok(())
    }
}

/// Device-like appearance parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainProfile {
    /// Std of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Exponent applied to clean intensities.
    pub contrast_gamma: f64,
    /// Correlation length of the multiplicative speckle, in pixels.
    pub speckle_grain_px: f64,
    /// Relative std of the multiplicative speckle.
    pub speckle_amp: f64,
    /// Amplitude of the smooth multiplicative bias field.
    pub bias_field_amp: f64,
    /// Additive intensity offset applied after the contrast curve.
    pub offset: f64,
    /// `(inter-slice, row, column)` in micrometres per voxel.
    pub spacing_um: [f64; 3],
}

impl DomainProfile {
    /// Clean, fine-grained, lightly biased appearance.
    pub fn source() -> Self {
        Self {
            noise_sigma: 0.03,
            contrast_gamma: 1.0,
            speckle_grain_px: 1.0,
            speckle_amp: 0.1,
            bias_field_amp: 0.05,
            offset: 0.0,
            spacing_um: [111.0, 4.0, 10.0],
        }
    }

    /// Noisier, with heavier and coarser-grained speckle.
    pub fn target() -> Self {
        Self {
            noise_sigma: 0.06,
            contrast_gamma: 1.0,
            speckle_grain_px: 2.5,
            speckle_amp: 0.5,
            bias_field_amp: 0.05,
            offset: 0.0,
            spacing_um: [47.2, 4.0, 10.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("domain profile: {m}")));
        if !(self.noise_sigma >= 0.0) {
            return bad("noise_sigma must be >= 0");
        }
        if !(self.contrast_gamma > 0.0) {
            return bad("contrast_gamma must be > 0");
        }
        if !(self.speckle_grain_px > 0.0) {
            return bad("speckle_grain_px must be > 0");
        }
        if !(self.speckle_amp >= 0.0) {
            return bad("speckle_amp must be >= 0");
        }
        if !(0.0..1.0).contains(&self.bias_field_amp) {
            return bad("bias_field_amp must be in [0, 1)");
        }
        if !self.offset.is_finite() {
            return bad("offset must be finite");
        }
        check_spacing(&self.spacing_um)
    }
}

pub(crate) fn check_spacing(sp: &[f64]) -> Result<()> {
    if sp.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Spacing(format!(
            "spacing components must be positive, got {sp:?}"
        )));
    }
    Ok(())
}

/// A grayscale scan, intensities in `[0, 1]`, laid out `(D, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub voxels: Array3<f32>,
    pub spacing_um: [f64; 3],
    pub domain: DomainTag,
    pub volume_id: String,
}

impl Volume {
    pub fn new(voxels: Array3<f32>, spacing_um: [f64; 3], domain: DomainTag, volume_id: String) -> Result<Self> {
        let v = Self {
            voxels,
            spacing_um,
            domain,
            volume_id,
        };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        let (d, h, w) = self.voxels.dim();
        Geometry {
            depth: d,
            height: h,
            width: w,
        }
        .validate()?;
        check_spacing(&self.spacing_um)?;
        if let Some(v) = self.voxels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("voxel intensity {v} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.voxels.dim().0
    }

    pub fn slice(&self, b: usize) -> Array2<f32> {
        self.voxels.slice(s![b, .., ..]).to_owned()
    }

    pub fn meta(&self) -> VolumeMeta {
        VolumeMeta {
            volume_id: self.volume_id.clone(),
            domain: self.domain,
            depth: self.depth(),
        }
    }
}

/// Per-voxel class membership, `(D, H, W, C)`, values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskVolume {
    pub labels: Array4<u8>,
    pub class_names: Vec<String>,
}

impl MaskVolume {
    pub fn validate_against(&self, vol: &Volume) -> Result<()> {
        let (d, h, w, c) = self.labels.dim();
        if (d, h, w) != vol.voxels.dim() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match volume {:?}",
                (d, h, w),
                vol.voxels.dim()
            )));
        }
        if c != self.class_names.len() {
            return Err(Error::Shape(format!(
                "mask has {c} channels but {} class names",
                self.class_names.len()
            )));
        }
        if let Some((i, &v)) = self.labels.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(Error::InvalidMask { value: v, index: i });
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// Slice `b` as `(C, H, W)`.
    pub fn slice(&self, b: usize) -> Array3<u8> {
        self.labels
            .slice(s![b, .., .., ..])
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .into_owned()
    }

    /// Whether class `c` occurs anywhere in the volume.
    pub fn has_class(&self, c: usize) -> bool {
        self.labels.slice(s![.., .., .., c]).iter().any(|&v| v == 1)
    }
}

/// All generated volumes, keyed by id. Every volume carries its ground-truth
/// mask; which masks may be read is decided by the [`DatasetSplit`].
#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub volumes: BTreeMap<String, (Volume, MaskVolume)>,
}

impl Corpus {
    pub fn get(&self, id: &str) -> Result<&(Volume, MaskVolume)> {
        self.volumes
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("unknown volume id {id}")))
    }

    pub fn volume(&self, id: &str) -> Result<&Volume> {
        Ok(&self.get(id)?.0)
    }

    pub fn metas(&self) -> Vec<VolumeMeta> {
        self.volumes.values().map(|(v, _)| v.meta()).collect()
    }

    /// Labeled slice sample for a split entry.
    pub fn labeled_slice(&self, r: &SliceRef) -> Result<SliceSample> {
        let (vol, mask) = self.get(&r.volume_id)?;
        if r.slice >= vol.depth() {
            return Err(Error::Invalid(format!(
                "slice {} out of range for {} (depth {})",
                r.slice,
                r.volume_id,
                vol.depth()
            )));
        }
        Ok(SliceSample {
            image: vol.slice(r.slice),
            mask: Some(mask.slice(r.slice)),
            volume_id: vol.volume_id.clone(),
            slice_index: r.slice,
            domain: vol.domain,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.volumes.values().next().map(|(_, m)| m.num_classes()).unwrap_or(0)
    }
}
