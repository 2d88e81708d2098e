//! Reader and writer for a strict subset of single-file NIfTI-1 (`.nii`,
//! optionally gzip-wrapped), plus reorientation to RAS.
//!
//! Only the sform affine (`srow_*`) is honoured; qform quaternions are
//! ignored. When `sform_code` is zero the affine falls back to
//! `diag(pixdim[1..3])` with zero origin. Output is always little-endian
//! float32 with `vox_offset = 352`.

use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use thiserror::Error;

use crate::volume::{column_norms, Affine, Volume};

pub const HEADER_SIZE: i32 = 348;
pub const MIN_VOX_OFFSET: usize = 352;
pub const MAGIC: [u8; 4] = *b"n+1\0";

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_SCL_INTER: usize = 116;
const OFF_XYZT_UNITS: usize = 123;
const OFF_SFORM_CODE: usize = 254;
const OFF_SROW: usize = 280;
const OFF_MAGIC: usize = 344;

#[derive(Debug, Error, PartialEq)]
pub enum NiftiError {
    #[error("file too short for a NIfTI-1 header: {0} bytes")]
    TooShort(usize),
    #[error("sizeof_hdr is not 348 in either byte order")]
    BadHeaderSize,
    #[error("bad magic {0:?}, expected \"n+1\\0\"")]
    BadMagic([u8; 4]),
    #[error("unsupported datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("unsupported dimensionality dim[0]={0}, expected 3")]
    UnsupportedDimensionality(i16),
    #[error("non-positive extent in dim {0:?}")]
    BadExtents([i16; 8]),
    #[error("voxel data truncated: need {needed} bytes, have {available}")]
    TruncatedData { needed: usize, available: usize },
    #[error("vox_offset {0} is below 352")]
    BadVoxOffset(f32),
    #[error("non-positive voxel spacing {0:?}")]
    NonPositiveSpacing([f64; 3]),
    #[error("header extents {header:?} do not match volume extents {volume:?}")]
    InconsistentExtents { header: [usize; 3], volume: [usize; 3] },
    #[error("volume contains non-finite values")]
    NonFiniteData,
    #[error("affine is singular")]
    SingularAffine,
    #[error("affine is oblique: no dominant voxel axis for every world axis")]
    ObliqueAffine,
    #[error("gzip decompression failed: {0}")]
    Gzip(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, NiftiError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    Uint8,
    Int16,
    Float32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::Uint8 => 2,
            Datatype::Int16 => 4,
            Datatype::Float32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Result<Self> {
        match code {
            2 => Ok(Datatype::Uint8),
            4 => Ok(Datatype::Int16),
            16 => Ok(Datatype::Float32),
            other => Err(NiftiError::UnsupportedDatatype(other)),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Datatype::Uint8 => 1,
            Datatype::Int16 => 2,
            Datatype::Float32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub sizeof_hdr: i32,
    pub dim: [i16; 8],
    pub datatype: Datatype,
    pub pixdim: [f32; 8],
    pub srow_x: [f32; 4],
    pub srow_y: [f32; 4],
    pub srow_z: [f32; 4],
    pub magic: [u8; 4],
    pub vox_offset: f32,
}

impl NiftiHeader {
    /// Canonical float32 header describing `vol`.
    pub fn for_volume(vol: &Volume) -> Self {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for i in 0..3 {
            dim[i + 1] = vol.extents[i] as i16;
        }
        let mut pixdim = [1.0f32; 8];
        pixdim[0] = 1.0;
        for i in 0..3 {
            pixdim[i + 1] = vol.spacing[i] as f32;
        }
        let row = |r: usize| {
            [
                vol.affine[r][0] as f32,
                vol.affine[r][1] as f32,
                vol.affine[r][2] as f32,
                vol.affine[r][3] as f32,
            ]
        };
        Self {
            sizeof_hdr: HEADER_SIZE,
            dim,
            datatype: Datatype::Float32,
            pixdim,
            srow_x: row(0),
            srow_y: row(1),
            srow_z: row(2),
            magic: MAGIC,
            vox_offset: MIN_VOX_OFFSET as f32,
        }
    }

    pub fn extents(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }
}

#[derive(Clone, Copy)]
enum Endian {
    Little,
    Big,
}

struct Reader<'a> {
    bytes: &'a [u8],
    endian: Endian,
}

impl Reader<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut b = [0u8; N];
        b.copy_from_slice(&self.bytes[off..off + N]);
        b
    }

    fn i16(&self, off: usize) -> i16 {
        match self.endian {
            Endian::Little => i16::from_le_bytes(self.arr(off)),
            Endian::Big => i16::from_be_bytes(self.arr(off)),
        }
    }

    fn f32(&self, off: usize) -> f32 {
        match self.endian {
            Endian::Little => f32::from_le_bytes(self.arr(off)),
            Endian::Big => f32::from_be_bytes(self.arr(off)),
        }
    }

    fn f32s<const N: usize>(&self, off: usize) -> [f32; N] {
        std::array::from_fn(|i| self.f32(off + 4 * i))
    }
}

/// Decodes a single-file NIfTI-1 image. Integer data is promoted to real and
/// scaled by `scl_slope`/`scl_inter` when the slope is non-zero.
pub fn parse_nifti(bytes: &[u8]) -> Result<(NiftiHeader, Volume)> {
    if bytes.len() < MIN_VOX_OFFSET {
        return Err(NiftiError::TooShort(bytes.len()));
    }
    let endian = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE {
        Endian::Little
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE {
        Endian::Big
    } else {
        return Err(NiftiError::BadHeaderSize);
    };
    let r = Reader { bytes, endian };

    let magic: [u8; 4] = r.arr(OFF_MAGIC);
    if magic != MAGIC {
        return Err(NiftiError::BadMagic(magic));
    }
    let dim: [i16; 8] = std::array::from_fn(|i| r.i16(OFF_DIM + 2 * i));
    if dim[0] != 3 {
        return Err(NiftiError::UnsupportedDimensionality(dim[0]));
    }
    if dim[1..4].iter().any(|&d| d < 1) {
        return Err(NiftiError::BadExtents(dim));
    }
    let datatype = Datatype::from_code(r.i16(OFF_DATATYPE))?;
    let pixdim: [f32; 8] = r.f32s(OFF_PIXDIM);
    if pixdim[1..4].iter().any(|&p| !(p > 0.0)) {
        return Err(NiftiError::NonPositiveSpacing([
            pixdim[1] as f64,
            pixdim[2] as f64,
            pixdim[3] as f64,
        ]));
    }
    let vox_offset = r.f32(OFF_VOX_OFFSET);
    if !(vox_offset >= MIN_VOX_OFFSET as f32) {
        return Err(NiftiError::BadVoxOffset(vox_offset));
    }
    let srow_x: [f32; 4] = r.f32s(OFF_SROW);
    let srow_y: [f32; 4] = r.f32s(OFF_SROW + 16);
    let srow_z: [f32; 4] = r.f32s(OFF_SROW + 32);
    let sform_code = r.i16(OFF_SFORM_CODE);
    let slope = r.f32(OFF_SCL_SLOPE);
    let inter = r.f32(OFF_SCL_INTER);

    let header = NiftiHeader {
        sizeof_hdr: HEADER_SIZE,
        dim,
        datatype,
        pixdim,
        srow_x,
        srow_y,
        srow_z,
        magic,
        vox_offset,
    };

    let extents = header.extents();
    let count = extents[0] * extents[1] * extents[2];
    let start = vox_offset as usize;
    let needed = start + count * datatype.size();
    if bytes.len() < needed {
        return Err(NiftiError::TruncatedData { needed, available: bytes.len() });
    }
    let raw = &bytes[start..needed];
    let mut data: Vec<f64> = match (datatype, endian) {
        (Datatype::Uint8, _) => raw.iter().map(|&b| b as f64).collect(),
        (Datatype::Int16, Endian::Little) => {
            raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]]) as f64).collect()
        }
        (Datatype::Int16, Endian::Big) => {
            raw.chunks_exact(2).map(|c| i16::from_be_bytes([c[0], c[1]]) as f64).collect()
        }
        (Datatype::Float32, Endian::Little) => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        (Datatype::Float32, Endian::Big) => raw
            .chunks_exact(4)
            .map(|c| f32::from_be_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
    };
    if datatype != Datatype::Float32 && slope != 0.0 && slope.is_finite() && inter.is_finite() {
        for v in &mut data {
            *v = *v * slope as f64 + inter as f64;
        }
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(NiftiError::NonFiniteData);
    }

    let affine: Affine = if sform_code > 0 {
        let row = |s: [f32; 4]| [s[0] as f64, s[1] as f64, s[2] as f64, s[3] as f64];
        [row(srow_x), row(srow_y), row(srow_z)]
    } else {
        [
            [pixdim[1] as f64, 0.0, 0.0, 0.0],
            [0.0, pixdim[2] as f64, 0.0, 0.0],
            [0.0, 0.0, pixdim[3] as f64, 0.0],
        ]
    };
    let spacing = column_norms(&affine);
    if spacing.iter().any(|&s| !(s > 0.0)) {
        return Err(NiftiError::NonPositiveSpacing(spacing));
    }
    Ok((header, Volume { extents, spacing, affine, data }))
}

/// Encodes `vol` as little-endian float32 NIfTI-1. Extents, pixdim and magic
/// come from `header`; the sform rows are taken from the volume affine.
pub fn write_nifti(header: &NiftiHeader, vol: &Volume) -> Result<Vec<u8>> {
    let hdr_ext = header.extents();
    if header.dim[0] != 3 || hdr_ext != vol.extents {
        return Err(NiftiError::InconsistentExtents { header: hdr_ext, volume: vol.extents });
    }
    let count = vol.extents.iter().product::<usize>();
    if vol.data.len() != count {
        return Err(NiftiError::InconsistentExtents { header: hdr_ext, volume: vol.extents });
    }
    if vol.data.iter().any(|v| !v.is_finite()) {
        return Err(NiftiError::NonFiniteData);
    }
    if header.pixdim[1..4].iter().any(|&p| !(p > 0.0)) {
        return Err(NiftiError::NonPositiveSpacing(vol.spacing));
    }

    let mut out = vec![0u8; MIN_VOX_OFFSET + 4 * count];
    let put = |out: &mut Vec<u8>, off: usize, b: &[u8]| out[off..off + b.len()].copy_from_slice(b);
    put(&mut out, 0, &HEADER_SIZE.to_le_bytes());
    for (i, d) in header.dim.iter().enumerate() {
        put(&mut out, OFF_DIM + 2 * i, &d.to_le_bytes());
    }
    put(&mut out, OFF_DATATYPE, &Datatype::Float32.code().to_le_bytes());
    put(&mut out, OFF_BITPIX, &32i16.to_le_bytes());
    for (i, p) in header.pixdim.iter().enumerate() {
        put(&mut out, OFF_PIXDIM + 4 * i, &p.to_le_bytes());
    }
    put(&mut out, OFF_VOX_OFFSET, &(MIN_VOX_OFFSET as f32).to_le_bytes());
    put(&mut out, OFF_SCL_SLOPE, &1.0f32.to_le_bytes());
    put(&mut out, OFF_SCL_INTER, &0.0f32.to_le_bytes());
    // millimetres
    out[OFF_XYZT_UNITS] = 2;
    put(&mut out, OFF_SFORM_CODE, &1i16.to_le_bytes());
    for (r, row) in vol.affine.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            put(&mut out, OFF_SROW + 16 * r + 4 * c, &(*v as f32).to_le_bytes());
        }
    }
    put(&mut out, OFF_MAGIC, &MAGIC);
    for (i, v) in vol.data.iter().enumerate() {
        put(&mut out, MIN_VOX_OFFSET + 4 * i, &(*v as f32).to_le_bytes());
    }
    Ok(out)
}

/// Reads a `.nii` or `.nii.gz` file; gzip is detected by its magic bytes.
pub fn read_nifti_file(path: impl AsRef<Path>) -> Result<(NiftiHeader, Volume)> {
    let bytes = std::fs::read(path.as_ref()).map_err(|e| NiftiError::Io(e.to_string()))?;
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut dec = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut dec)
            .map_err(|e| NiftiError::Gzip(e.to_string()))?;
        parse_nifti(&dec)
    } else {
        parse_nifti(&bytes)
    }
}

pub fn write_nifti_file(path: impl AsRef<Path>, vol: &Volume) -> Result<()> {
    let bytes = write_nifti(&NiftiHeader::for_volume(vol), vol)?;
    std::fs::write(path.as_ref(), bytes).map_err(|e| NiftiError::Io(e.to_string()))
}

/// Permutes and flips voxel axes so that voxel axis `i` points along the
/// positive world axis `i` (x→Right, y→Anterior, z→Superior). World
/// positions of all voxel centres are preserved.
pub fn reorient_to_ras(vol: &Volume) -> Result<Volume> {
    let a = &vol.affine;
    let det = a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1])
        - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
    let scale = vol.spacing.iter().product::<f64>();
    if !(det.abs() > 1e-12 * scale.max(f64::MIN_POSITIVE)) || !det.is_finite() {
        return Err(NiftiError::SingularAffine);
    }

    // world axis dominated by each voxel axis
    let mut world_of_voxel = [0usize; 3];
    for (j, w) in world_of_voxel.iter_mut().enumerate() {
        let mags = [a[0][j].abs(), a[1][j].abs(), a[2][j].abs()];
        let best = (0..3).max_by(|&p, &q| mags[p].total_cmp(&mags[q])).unwrap();
        if (0..3).any(|i| i != best && mags[i] >= mags[best]) {
            return Err(NiftiError::ObliqueAffine);
        }
        *w = best;
    }
    let mut voxel_of_world = [usize::MAX; 3];
    for (j, &w) in world_of_voxel.iter().enumerate() {
        if voxel_of_world[w] != usize::MAX {
            return Err(NiftiError::ObliqueAffine);
        }
        voxel_of_world[w] = j;
    }
    let flip: [bool; 3] = std::array::from_fn(|i| a[i][voxel_of_world[i]] < 0.0);

    if voxel_of_world == [0, 1, 2] && !flip.iter().any(|&f| f) {
        return Ok(vol.clone());
    }

    let in_ext = vol.extents;
    let out_ext: [usize; 3] = std::array::from_fn(|i| in_ext[voxel_of_world[i]]);

    // input voxel index of output voxel (0,0,0)
    let mut first = [0.0f64; 3];
    for i in 0..3 {
        if flip[i] {
            first[voxel_of_world[i]] = (in_ext[voxel_of_world[i]] - 1) as f64;
        }
    }
    let origin = vol.world(first);
    let mut affine = [[0.0; 4]; 3];
    for i in 0..3 {
        let j = voxel_of_world[i];
        let sign = if flip[i] { -1.0 } else { 1.0 };
        for (r, row) in affine.iter_mut().enumerate() {
            row[i] = sign * a[r][j];
        }
    }
    for (r, row) in affine.iter_mut().enumerate() {
        row[3] = origin[r];
    }

    let mut data = Vec::with_capacity(vol.data.len());
    let mut src = [0usize; 3];
    for oz in 0..out_ext[2] {
        for oy in 0..out_ext[1] {
            for ox in 0..out_ext[0] {
                let o = [ox, oy, oz];
                for i in 0..3 {
                    let j = voxel_of_world[i];
                    src[j] = if flip[i] { in_ext[j] - 1 - o[i] } else { o[i] };
                }
                data.push(vol.data[vol.index(src[0], src[1], src[2])]);
            }
        }
    }
    Ok(Volume { extents: out_ext, spacing: column_norms(&affine), affine, data })
}
