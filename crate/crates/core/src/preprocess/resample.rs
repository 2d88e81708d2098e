//! Trilinear resampling, percentile normalization and fixed-shape
//! pad/crop/slice operations.

use crate::volume::{apply_affine, column_norms, Grid, Volume};

use super::PreprocessError;

/// Output extent along one axis for a spacing change, before the min-1 clamp.
pub fn resampled_extent(extent: usize, spacing: f64, target: f64) -> usize {
    (extent as f64 * spacing / target).round() as usize
}

/// Resamples `vol` to `target_spacing` with trilinear interpolation.
///
/// Output voxel `o` along an axis samples input coordinate
/// `(o + 0.5) * r - 0.5` with `r = target / spacing`, i.e. the field of view
/// is kept centred. Samples falling outside the input are clamped to the
/// nearest edge voxel.
pub fn resample_trilinear(vol: &Volume, target_spacing: [f64; 3]) -> Result<Volume, PreprocessError> {
    if target_spacing.iter().any(|&t| !(t > 0.0)) {
        return Err(PreprocessError::InvalidConfig(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    if vol.is_empty() {
        return Err(PreprocessError::EmptyOutput);
    }
    let ratio: [f64; 3] = std::array::from_fn(|i| target_spacing[i] / vol.spacing[i]);
    let out_ext: [usize; 3] = std::array::from_fn(|i| {
        let n = resampled_extent(vol.extents[i], vol.spacing[i], target_spacing[i]);
        if n == 0 {
            log::warn!(
                "resample axis {i}: extent {} at spacing {} collapses at target {}; clamped to 1",
                vol.extents[i],
                vol.spacing[i],
                target_spacing[i]
            );
        }
        n.max(1)
    });

    if out_ext == vol.extents && ratio.iter().all(|&r| r == 1.0) {
        return Ok(vol.clone());
    }

    // per-axis sample positions: (lower index, upper index, upper weight)
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|i| {
            let n = vol.extents[i];
            (0..out_ext[i])
                .map(|o| {
                    let c = ((o as f64 + 0.5) * ratio[i] - 0.5).clamp(0.0, (n - 1) as f64);
                    let lo = c.floor() as usize;
                    let hi = (lo + 1).min(n - 1);
                    (lo, hi, c - lo as f64)
                })
                .collect()
        })
        .collect();

    let (nx, ny) = (vol.extents[0], vol.extents[1]);
    let at = |x: usize, y: usize, z: usize| vol.data[x + nx * (y + ny * z)];
    let mut data = Vec::with_capacity(out_ext.iter().product());
    for &(z0, z1, wz) in &taps[2] {
        for &(y0, y1, wy) in &taps[1] {
            for &(x0, x1, wx) in &taps[0] {
                let c00 = at(x0, y0, z0) * (1.0 - wx) + at(x1, y0, z0) * wx;
                let c10 = at(x0, y1, z0) * (1.0 - wx) + at(x1, y1, z0) * wx;
                let c01 = at(x0, y0, z1) * (1.0 - wx) + at(x1, y0, z1) * wx;
                let c11 = at(x0, y1, z1) * (1.0 - wx) + at(x1, y1, z1) * wx;
                let c0 = c00 * (1.0 - wy) + c10 * wy;
                let c1 = c01 * (1.0 - wy) + c11 * wy;
                data.push(c0 * (1.0 - wz) + c1 * wz);
            }
        }
    }

    let mut affine = vol.affine;
    for row in affine.iter_mut() {
        for j in 0..3 {
            row[j] *= ratio[j];
        }
    }
    let first: [f64; 3] = std::array::from_fn(|i| 0.5 * ratio[i] - 0.5);
    let origin = apply_affine(&vol.affine, first);
    for (r, row) in affine.iter_mut().enumerate() {
        row[3] = origin[r];
    }
    Ok(Volume { extents: out_ext, spacing: column_norms(&affine), affine, data })
}

/// Percentile with linear interpolation between order statistics
/// (rank `p/100 * (n-1)`). `values` is reordered in place.
pub fn percentile(values: &mut [f64], p: f64) -> f64 {
    assert!(!values.is_empty());
    let n = values.len();
    let rank = (p / 100.0).clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    let (_, &mut lo_val, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || upper.is_empty() {
        return lo_val;
    }
    let hi_val = upper.iter().copied().fold(f64::INFINITY, f64::min);
    lo_val + frac * (hi_val - lo_val)
}

/// Maps the `[p_low, p_high]` percentile range onto `[0, 1]` with clipping.
/// A degenerate range (width below 1e-12) yields all zeros.
pub fn normalize_percentile(vol: &Volume, p_low: f64, p_high: f64) -> Volume {
    let mut out = vol.clone();
    if vol.is_empty() {
        return out;
    }
    let mut scratch = vol.data.clone();
    let a = percentile(&mut scratch, p_low);
    let b = percentile(&mut scratch, p_high);
    let width = b - a;
    if width < 1e-12 {
        out.data.iter_mut().for_each(|v| *v = 0.0);
    } else {
        out.data.iter_mut().for_each(|v| *v = ((*v - a) / width).clamp(0.0, 1.0));
    }
    out
}

/// Per-axis symmetric zero padding or centred cropping to `target`. Odd
/// differences put the extra voxel on the high-index side.
pub fn pad_crop_center(grid: &Grid, target: [usize; 3]) -> Grid {
    if grid.extents == target {
        return grid.clone();
    }
    // signed offset: output index o reads input index o + shift
    let shift: [isize; 3] = std::array::from_fn(|i| {
        let (n, t) = (grid.extents[i] as isize, target[i] as isize);
        if n >= t {
            (n - t) / 2
        } else {
            -((t - n) / 2)
        }
    });
    Grid::from_fn(target, |x, y, z| {
        let src = [x as isize + shift[0], y as isize + shift[1], z as isize + shift[2]];
        if (0..3).all(|i| src[i] >= 0 && src[i] < grid.extents[i] as isize) {
            grid.get(src[0] as usize, src[1] as usize, src[2] as usize)
        } else {
            0.0
        }
    })
}

/// Removes the `k` lowest-index axial (z) slices.
pub fn drop_leading_slices(grid: &Grid, k: usize) -> Result<Grid, PreprocessError> {
    let nz = grid.extents[2];
    if k >= nz {
        return Err(PreprocessError::KTooLarge { k, z_extent: nz });
    }
    let plane = grid.extents[0] * grid.extents[1];
    Ok(Grid {
        extents: [grid.extents[0], grid.extents[1], nz - k],
        data: grid.data[k * plane..].to_vec(),
    })
}
