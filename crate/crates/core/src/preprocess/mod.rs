//! Raw volume → fixed-shape normalized model input.
//!
//! Each present modality goes through reorient → resample → percentile
//! normalize → pad/crop → slice drop. Missing modalities become zero grids
//! with mask 0.

mod augment;
mod bundle;
mod manifest;
mod resample;

pub use augment::{augment, augment_strength_for};
pub use bundle::{read_bundle, read_bundle_file, write_bundle, write_bundle_file, BUNDLE_MAGIC};
pub use manifest::{bundle_paths, bundles_from_manifest, read_bundle_dir, read_manifest, write_manifest, ManifestRow};
pub use resample::{
    drop_leading_slices, normalize_percentile, pad_crop_center, percentile, resample_trilinear,
    resampled_extent,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nifti_io::{reorient_to_ras, NiftiError};
use crate::volume::{Grid, Volume};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("at least one modality must be present")]
    AllModalitiesMissing,
    #[error("cannot drop {k} slices from a z-extent of {z_extent}")]
    KTooLarge { k: usize, z_extent: usize },
    #[error("resampling produced an empty volume")]
    EmptyOutput,
    #[error("invalid preprocessing config: {0}")]
    InvalidConfig(String),
    #[error("manifest error: {0}")]
    Manifest(String),
    #[error("malformed bundle: {0}")]
    BadBundle(String),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// MRI acquisition types, in the fixed slot order used everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1wi,
    T2wi,
    Dwi,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::T1wi, Modality::T2wi, Modality::Dwi];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn tag(self) -> &'static str {
        match self {
            Modality::T1wi => "t1",
            Modality::T2wi => "t2",
            Modality::Dwi => "dwi",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PreprocessConfig {
    pub target_spacing: [f64; 3],
    pub target_extents: [usize; 3],
    pub drop_leading_slices: usize,
    pub norm_percentiles: [f64; 2],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_spacing: [1.5, 1.5, 3.0],
            target_extents: [200, 200, 64],
            drop_leading_slices: 20,
            norm_percentiles: [1.0, 99.0],
        }
    }
}

impl PreprocessConfig {
    /// Small profile used with synthetic data: no slice drop, cubic output.
    pub fn desk(extents: [usize; 3]) -> Self {
        Self { target_extents: extents, drop_leading_slices: 0, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let bad = |m: String| Err(PreprocessError::InvalidConfig(m));
        if self.target_spacing.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("spacing must be positive: {:?}", self.target_spacing));
        }
        if self.target_extents.iter().any(|&e| e < 1) {
            return bad(format!("extents must be >= 1: {:?}", self.target_extents));
        }
        if self.drop_leading_slices >= self.target_extents[2] {
            return bad(format!(
                "drop_leading_slices {} must be below z-extent {}",
                self.drop_leading_slices, self.target_extents[2]
            ));
        }
        let [lo, hi] = self.norm_percentiles;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return bad(format!("percentiles must satisfy 0 <= low < high <= 100: {lo}, {hi}"));
        }
        Ok(())
    }

    /// Shape of every grid the pipeline produces.
    pub fn output_extents(&self) -> [usize; 3] {
        let [x, y, z] = self.target_extents;
        [x, y, z - self.drop_leading_slices]
    }
}

/// One case: three fixed-shape grids in T1WI, T2WI, DWI order.
#[derive(Clone, Debug, PartialEq)]
pub struct CaseBundle {
    pub case_id: String,
    pub volumes: [Grid; 3],
    pub mask: [bool; 3],
    /// Fibrosis stage 1..=4, absent at inference.
    pub stage: Option<u8>,
}

impl CaseBundle {
    pub fn extents(&self) -> [usize; 3] {
        self.volumes[0].extents
    }

    pub fn available(&self) -> impl Iterator<Item = Modality> + '_ {
        Modality::ALL.into_iter().filter(|m| self.mask[m.index()])
    }

    pub fn validate(&self) -> Result<(), PreprocessError> {
        let e = self.extents();
        if self.volumes.iter().any(|g| g.extents != e || g.data.len() != e.iter().product::<usize>()) {
            return Err(PreprocessError::BadBundle("grids differ in shape".into()));
        }
        if !self.mask.iter().any(|&m| m) {
            return Err(PreprocessError::AllModalitiesMissing);
        }
        for (g, &m) in self.volumes.iter().zip(&self.mask) {
            if !m && !g.is_all_zero() {
                return Err(PreprocessError::BadBundle("masked modality is not all-zero".into()));
            }
        }
        if let Some(s) = self.stage {
            if !(1..=4).contains(&s) {
                return Err(PreprocessError::BadBundle(format!("stage {s} outside 1..=4")));
            }
        }
        Ok(())
    }
}

/// Runs one modality through the full pipeline.
pub fn preprocess_volume(vol: &Volume, cfg: &PreprocessConfig) -> Result<Grid, PreprocessError> {
    let ras = reorient_to_ras(vol)?;
    let resampled = resample_trilinear(&ras, cfg.target_spacing)?;
    let [lo, hi] = cfg.norm_percentiles;
    let normalized = normalize_percentile(&resampled, lo, hi);
    let fixed = pad_crop_center(&normalized.to_grid(), cfg.target_extents);
    drop_leading_slices(&fixed, cfg.drop_leading_slices)
}

pub fn build_bundle(
    case_id: &str,
    modalities: [Option<&Volume>; 3],
    stage: Option<u8>,
    cfg: &PreprocessConfig,
) -> Result<CaseBundle, PreprocessError> {
    cfg.validate()?;
    if modalities.iter().all(Option::is_none) {
        return Err(PreprocessError::AllModalitiesMissing);
    }
    let shape = cfg.output_extents();
    let mut volumes: [Grid; 3] = std::array::from_fn(|_| Grid::zeros(shape));
    let mut mask = [false; 3];
    for (i, vol) in modalities.iter().enumerate() {
        if let Some(vol) = vol {
            volumes[i] = preprocess_volume(vol, cfg)?;
            mask[i] = true;
        }
    }
    let bundle = CaseBundle { case_id: case_id.to_string(), volumes, mask, stage };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(extents: [usize; 3], spacing: [f64; 3]) -> Volume {
        let n = extents.iter().product::<usize>();
        Volume::with_spacing(extents, spacing, (0..n).map(|i| (i % 97) as f64).collect())
    }

    #[test]
    fn paper_defaults_give_200_200_44() {
        let cfg = PreprocessConfig::default();
        assert_eq!(cfg.output_extents(), [200, 200, 44]);
        let g = Grid::zeros([200, 200, 64]);
        assert_eq!(drop_leading_slices(&g, 20).unwrap().extents, [200, 200, 44]);
    }

    #[test]
    fn single_modality_is_zero_filled() {
        let cfg = PreprocessConfig::desk([8, 8, 8]);
        let t2 = ramp([6, 7, 5], [1.5, 1.5, 3.0]);
        let b = build_bundle("c0", [None, Some(&t2), None], Some(2), &cfg).unwrap();
        assert_eq!(b.mask, [false, true, false]);
        assert!(b.volumes[0].is_all_zero() && b.volumes[2].is_all_zero());
        assert!(!b.volumes[1].is_all_zero());
        assert!(b.volumes.iter().all(|g| g.extents == [8, 8, 8]));
    }

    #[test]
    fn all_three_present() {
        let cfg = PreprocessConfig::desk([8, 8, 8]);
        let v = ramp([9, 9, 9], [1.0, 1.0, 2.0]);
        let b = build_bundle("c1", [Some(&v), Some(&v), Some(&v)], None, &cfg).unwrap();
        assert_eq!(b.mask, [true; 3]);
    }

    #[test]
    fn no_modality_is_an_error() {
        let cfg = PreprocessConfig::desk([8, 8, 8]);
        assert!(matches!(
            build_bundle("c", [None, None, None], None, &cfg),
            Err(PreprocessError::AllModalitiesMissing)
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = PreprocessConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.drop_leading_slices = 64;
        assert!(cfg.validate().is_err());
        let cfg = PreprocessConfig { norm_percentiles: [50.0, 10.0], ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
