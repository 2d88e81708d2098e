//! Toy cohorts with a stage-dependent blob planted in every modality.
//!
//! Background voxels are `N(0.3, noise²)`. A centred sphere of radius
//! `min(extents) / 4` has mean `0.3 + s·Δ` in T1WI, `0.3 + s·Δ/2` in T2WI
//! and `0.3 − s·Δ/2` in DWI for stage `s`, so each modality alone carries
//! the label.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nifti_io::{write_nifti_file, NiftiError};
use crate::preprocess::{
    build_bundle, write_bundle_file, write_manifest, CaseBundle, ManifestRow, Modality, PreprocessConfig, PreprocessError,
};
use crate::training::derive_seed;
use crate::volume::Volume;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    InvalidConfig(String),
    #[error("case index {index} outside 0..{n}")]
    IndexOutOfRange { index: usize, n: usize },
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Nifti(#[from] NiftiError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub n_cases: usize,
    pub extents: [usize; 3],
    /// Voxel size written into the raw volumes.
    pub spacing: [f64; 3],
    /// Relative frequency of stages 1..=4.
    pub stage_distribution: [f64; 4],
    pub p_drop: f64,
    pub contrast: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_cases: 32,
            extents: [16, 16, 16],
            spacing: PreprocessConfig::default().target_spacing,
            stage_distribution: [0.25; 4],
            p_drop: 0.2,
            contrast: 0.15,
            noise: 0.05,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::InvalidConfig(m));
        if self.n_cases < 8 {
            return bad(format!("n_cases must be >= 8, got {}", self.n_cases));
        }
        if self.extents.iter().any(|&e| e == 0) {
            return bad(format!("extents must be positive: {:?}", self.extents));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("spacing must be positive: {:?}", self.spacing));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return bad(format!("p_drop must lie in [0, 1), got {}", self.p_drop));
        }
        if !(self.noise >= 0.0) || !(self.contrast >= 0.0) {
            return bad("noise and contrast must be non-negative".into());
        }
        let total: f64 = self.stage_distribution.iter().sum();
        if self.stage_distribution.iter().any(|&w| !(w >= 0.0)) || !(total > 0.0) {
            return bad(format!("bad stage distribution {:?}", self.stage_distribution));
        }
        Ok(())
    }
}

/// A generated case before preprocessing.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCase {
    pub case_id: String,
    pub stage: u8,
    pub volumes: [Option<Volume>; 3],
}

/// Stage of every case: counts by largest remainder, order shuffled by seed.
pub fn stage_assignment(cfg: &SynthConfig) -> Vec<u8> {
    let total: f64 = cfg.stage_distribution.iter().sum();
    let quotas: Vec<f64> = cfg.stage_distribution.iter().map(|w| w / total * cfg.n_cases as f64).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
    let short = cfg.n_cases - counts.iter().sum::<usize>();
    for &s in order.iter().take(short) {
        counts[s] += 1;
    }
    let mut stages: Vec<u8> = counts.iter().enumerate().flat_map(|(s, &c)| std::iter::repeat(s as u8 + 1).take(c)).collect();
    stages.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, u64::MAX)));
    stages
}

pub fn case_id(index: usize) -> String {
    format!("case{index:04}")
}

fn blob_mean(m: Modality, stage: u8, contrast: f64) -> f64 {
    let s = stage as f64 * contrast;
    match m {
        Modality::T1wi => 0.3 + s,
        Modality::T2wi => 0.3 + s / 2.0,
        Modality::Dwi => 0.3 - s / 2.0,
    }
}

fn in_blob(extents: [usize; 3], x: usize, y: usize, z: usize) -> bool {
    let r = *extents.iter().min().expect("3 axes") as f64 / 4.0;
    let p = [x, y, z];
    let d2: f64 = (0..3).map(|i| (p[i] as f64 - (extents[i] as f64 - 1.0) / 2.0).powi(2)).sum();
    d2 <= r * r
}

/// Deterministic in `(cfg.seed, index)`.
pub fn generate_case(cfg: &SynthConfig, index: usize) -> Result<RawCase, SynthError> {
    cfg.validate()?;
    if index >= cfg.n_cases {
        return Err(SynthError::IndexOutOfRange { index, n: cfg.n_cases });
    }
    let stage = stage_assignment(cfg)[index];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, index as u64));
    let mut present = [true; 3];
    loop {
        for p in &mut present {
            *p = rng.gen::<f64>() >= cfg.p_drop;
        }
        if present.iter().any(|&p| p) {
            break;
        }
    }
    let noise = Normal::new(0.0, cfg.noise).expect("validated");
    let [nx, ny, nz] = cfg.extents;
    let volumes = Modality::ALL.map(|m| {
        let inside = blob_mean(m, stage, cfg.contrast);
        let mut data = Vec::with_capacity(nx * ny * nz);
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let mean = if in_blob(cfg.extents, x, y, z) { inside } else { 0.3 };
                    data.push(mean + noise.sample(&mut rng));
                }
            }
        }
        present[m.index()].then(|| Volume::with_spacing(cfg.extents, cfg.spacing, data))
    });
    Ok(RawCase { case_id: case_id(index), stage, volumes })
}

#[derive(Clone, Debug)]
pub struct DatasetSummary {
    pub manifest: PathBuf,
    pub bundle_dir: PathBuf,
    pub bundles: Vec<CaseBundle>,
}

/// Writes `raw/*.nii`, `manifest.csv` (paths relative to `out`) and
/// `bundles/*.cbun` built with the desk preprocessing profile.
pub fn generate_dataset(cfg: &SynthConfig, out: &Path) -> Result<DatasetSummary, SynthError> {
    cfg.validate()?;
    let raw = out.join("raw");
    let bundle_dir = out.join("bundles");
    std::fs::create_dir_all(&raw)?;
    std::fs::create_dir_all(&bundle_dir)?;
    let pcfg = PreprocessConfig { target_spacing: cfg.spacing, ..PreprocessConfig::desk(cfg.extents) };
    let manifest = out.join("manifest.csv");
    let mut rows = Vec::with_capacity(cfg.n_cases);
    let mut bundles = Vec::with_capacity(cfg.n_cases);
    for index in 0..cfg.n_cases {
        let case = generate_case(cfg, index)?;
        let mut paths: [String; 3] = Default::default();
        for m in Modality::ALL {
            if let Some(v) = &case.volumes[m.index()] {
                let rel = format!("raw/{}_{}.nii", case.case_id, m.tag());
                write_nifti_file(out.join(&rel), v)?;
                paths[m.index()] = rel;
            }
        }
        let [t1_path, t2_path, dwi_path] = paths;
        rows.push(ManifestRow { case_id: case.case_id.clone(), t1_path, t2_path, dwi_path, stage: Some(case.stage) });
        let refs = [0, 1, 2].map(|i| case.volumes[i].as_ref());
        let b = build_bundle(&case.case_id, refs, Some(case.stage), &pcfg)?;
        write_bundle_file(bundle_dir.join(format!("{}.cbun", case.case_id)), &b)?;
        bundles.push(b);
    }
    write_manifest(&manifest, &rows)?;
    Ok(DatasetSummary { manifest, bundle_dir, bundles })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_counts() {
        let cfg = SynthConfig { n_cases: 32, ..Default::default() };
        let s = stage_assignment(&cfg);
        for st in 1..=4 {
            assert_eq!(s.iter().filter(|&&x| x == st).count(), 8);
        }
        let cfg = SynthConfig { n_cases: 10, stage_distribution: [1.0, 1.0, 1.0, 3.0], ..Default::default() };
        let s = stage_assignment(&cfg);
        let counts: Vec<usize> = (1..=4).map(|st| s.iter().filter(|&&x| x == st).count()).collect();
        assert_eq!(counts, vec![2, 2, 1, 5]);
    }

    #[test]
    fn deterministic_and_never_empty() {
        let cfg = SynthConfig { n_cases: 40, p_drop: 0.9, ..Default::default() };
        for i in 0..40 {
            let a = generate_case(&cfg, i).unwrap();
            assert!(a.volumes.iter().any(Option::is_some));
            if i < 3 {
                assert_eq!(a, generate_case(&cfg, i).unwrap());
            }
        }
    }

    #[test]
    fn zero_drop_keeps_everything() {
        let cfg = SynthConfig { p_drop: 0.0, ..Default::default() };
        for i in 0..cfg.n_cases {
            assert!(generate_case(&cfg, i).unwrap().volumes.iter().all(Option::is_some));
        }
    }

    #[test]
    fn index_checked() {
        let cfg = SynthConfig::default();
        assert!(matches!(generate_case(&cfg, 32), Err(SynthError::IndexOutOfRange { .. })));
    }
}
