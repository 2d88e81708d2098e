//! Manifest CSV (`case_id,t1_path,t2_path,dwi_path,stage`) and bundle
//! directories.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::nifti_io::read_nifti_file;

use super::{build_bundle, read_bundle_file, CaseBundle, PreprocessConfig, PreprocessError};

/// One manifest row. Empty paths mark missing modalities; relative paths
/// resolve against the manifest's base directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub case_id: String,
    pub t1_path: String,
    pub t2_path: String,
    pub dwi_path: String,
    pub stage: Option<u8>,
}

impl ManifestRow {
    pub fn paths(&self) -> [&str; 3] {
        [&self.t1_path, &self.t2_path, &self.dwi_path]
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>, PreprocessError> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().collect::<Result<Vec<ManifestRow>, _>>().map_err(csv_err)
}

pub fn write_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), PreprocessError> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> PreprocessError {
    PreprocessError::Manifest(e.to_string())
}

/// Reads and preprocesses every case of a manifest, in row order.
pub fn bundles_from_manifest(
    rows: &[ManifestRow],
    base: &Path,
    cfg: &PreprocessConfig,
) -> Result<Vec<CaseBundle>, PreprocessError> {
    rows.par_iter()
        .map(|row| {
            let mut vols = [None, None, None];
            for (slot, p) in vols.iter_mut().zip(row.paths()) {
                if !p.is_empty() {
                    *slot = Some(read_nifti_file(base.join(p))?.1);
                }
            }
            build_bundle(&row.case_id, [0, 1, 2].map(|i| vols[i].as_ref()), row.stage, cfg)
        })
        .collect()
}

/// `.cbun` files of a directory, sorted by file name.
pub fn bundle_paths(dir: &Path) -> Result<Vec<PathBuf>, PreprocessError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.extension().is_some_and(|e| e == "cbun"))
        .collect();
    paths.sort();
    Ok(paths)
}

pub fn read_bundle_dir(dir: &Path) -> Result<Vec<CaseBundle>, PreprocessError> {
    bundle_paths(dir)?.iter().map(read_bundle_file).collect()
}
