//! `.cbun` case bundle files (little-endian):
//!
//! ```text
//! "CBUN" | version u32 = 1 | case_id_len u32 | case_id UTF-8 | stage i32 (-1 absent)
//! | mask 3 x u8 | extents 3 x u32 | T1WI, T2WI, DWI blocks of nx*ny*nz f32 (x-fastest)
//! ```

use std::path::Path;

use crate::volume::Grid;

use super::{CaseBundle, PreprocessError};

pub const BUNDLE_MAGIC: [u8; 4] = *b"CBUN";
const VERSION: u32 = 1;

pub fn write_bundle(b: &CaseBundle) -> Result<Vec<u8>, PreprocessError> {
    b.validate()?;
    let [nx, ny, nz] = b.extents();
    let mut out = Vec::with_capacity(32 + b.case_id.len() + 12 * nx * ny * nz);
    out.extend_from_slice(&BUNDLE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(b.case_id.len() as u32).to_le_bytes());
    out.extend_from_slice(b.case_id.as_bytes());
    out.extend_from_slice(&b.stage.map_or(-1, i32::from).to_le_bytes());
    out.extend(b.mask.iter().map(|&m| m as u8));
    for e in [nx, ny, nz] {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for g in &b.volumes {
        for v in &g.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PreprocessError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            PreprocessError::BadBundle(format!("truncated at byte {} (need {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, PreprocessError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_bundle(bytes: &[u8]) -> Result<CaseBundle, PreprocessError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != BUNDLE_MAGIC {
        return Err(PreprocessError::BadBundle("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(PreprocessError::BadBundle(format!("unsupported version {version}")));
    }
    let id_len = c.u32()? as usize;
    let case_id = std::str::from_utf8(c.take(id_len)?)
        .map_err(|e| PreprocessError::BadBundle(format!("case id is not UTF-8: {e}")))?
        .to_string();
    let stage = i32::from_le_bytes(c.take(4)?.try_into().unwrap());
    let stage = match stage {
        -1 => None,
        1..=4 => Some(stage as u8),
        other => return Err(PreprocessError::BadBundle(format!("bad stage {other}"))),
    };
    let mask_raw = c.take(3)?;
    let mut mask = [false; 3];
    for (m, &r) in mask.iter_mut().zip(mask_raw) {
        *m = match r {
            0 => false,
            1 => true,
            other => return Err(PreprocessError::BadBundle(format!("bad mask byte {other}"))),
        };
    }
    let extents = [c.u32()? as usize, c.u32()? as usize, c.u32()? as usize];
    let count = extents.iter().product::<usize>();
    let mut grid = || -> Result<Grid, PreprocessError> {
        let raw = c.take(count.checked_mul(4).ok_or_else(|| {
            PreprocessError::BadBundle("extent overflow".into())
        })?)?;
        let data = raw.chunks_exact(4).map(|ch| f32::from_le_bytes(ch.try_into().unwrap())).collect();
        Ok(Grid { extents, data })
    };
    let volumes = [grid()?, grid()?, grid()?];
    if c.pos != bytes.len() {
        return Err(PreprocessError::BadBundle(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    let b = CaseBundle { case_id, volumes, mask, stage };
    b.validate()?;
    Ok(b)
}

pub fn write_bundle_file(path: impl AsRef<Path>, b: &CaseBundle) -> Result<(), PreprocessError> {
    std::fs::write(path, write_bundle(b)?)?;
    Ok(())
}

pub fn read_bundle_file(path: impl AsRef<Path>) -> Result<CaseBundle, PreprocessError> {
    read_bundle(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> CaseBundle {
        let e = [3, 2, 2];
        CaseBundle {
            case_id: "case-α".into(),
            volumes: [
                Grid::from_fn(e, |x, y, z| (x + y + z) as f32 * 0.1),
                Grid::zeros(e),
                Grid::from_fn(e, |x, _, _| x as f32),
            ],
            mask: [true, false, true],
            stage: Some(3),
        }
    }

    #[test]
    fn layout_and_round_trip() {
        let b = sample();
        let bytes = write_bundle(&b).unwrap();
        assert_eq!(&bytes[..4], b"CBUN");
        let id_len = "case-α".len();
        assert_eq!(bytes.len(), 4 + 4 + 4 + id_len + 4 + 3 + 12 + 3 * 12 * 4);
        assert_eq!(read_bundle(&bytes).unwrap(), b);
    }

    #[test]
    fn absent_stage_is_minus_one() {
        let mut b = sample();
        b.stage = None;
        let bytes = write_bundle(&b).unwrap();
        let off = 12 + "case-α".len();
        assert_eq!(i32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()), -1);
        assert_eq!(read_bundle(&bytes).unwrap().stage, None);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = write_bundle(&sample()).unwrap();
        assert!(read_bundle(&bytes[..bytes.len() - 2]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(read_bundle(&bad).is_err());
    }
}
