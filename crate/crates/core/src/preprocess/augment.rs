//! Seeded training-time augmentation.
//!
//! Every transform fires with probability `strength / 2`. Geometric
//! transforms (left-right flip, axial rotation, zoom) are shared by all
//! present modalities; intensity transforms are drawn independently per
//! modality. Masked modalities are never touched.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::volume::Grid;

use super::CaseBundle;

/// Augmentation strength for a training partition of `n_samples` cases.
pub fn augment_strength_for(n_samples: usize) -> f64 {
    (1.0 - n_samples as f64 / 1000.0).clamp(0.2, 0.8)
}

pub fn augment(bundle: &CaseBundle, seed: u64, strength: f64) -> CaseBundle {
    let strength = strength.clamp(0.0, 1.0);
    let mut out = bundle.clone();
    if strength == 0.0 {
        return out;
    }
    let p = strength / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let present: Vec<usize> = (0..3).filter(|&i| bundle.mask[i]).collect();

    if rng.gen::<f64>() < p {
        for &i in &present {
            out.volumes[i] = flip_x(&out.volumes[i]);
        }
    }
    if rng.gen::<f64>() < p {
        let angle = rng.gen_range(-10.0f64..10.0).to_radians();
        for &i in &present {
            out.volumes[i] = rotate_axial(&out.volumes[i], angle);
        }
    }
    if rng.gen::<f64>() < p {
        let factor = rng.gen_range(1.0 - 0.1 * strength..1.0 + 0.1 * strength);
        for &i in &present {
            out.volumes[i] = zoom(&out.volumes[i], factor);
        }
    }

    for &i in &present {
        let g = &mut out.volumes[i];
        if rng.gen::<f64>() < p {
            let s = rng.gen_range(1.0 - 0.1 * strength..1.0 + 0.1 * strength) as f32;
            g.data.iter_mut().for_each(|v| *v *= s);
        }
        if rng.gen::<f64>() < p {
            let normal = Normal::new(0.0, 0.02 * strength).unwrap();
            g.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng) as f32);
        }
        if rng.gen::<f64>() < p {
            let gamma = rng.gen_range(1.0 - 0.2 * strength..1.0 + 0.2 * strength);
            g.data.iter_mut().for_each(|v| *v = (v.clamp(0.0, 1.0) as f64).powf(gamma) as f32);
        }
        if rng.gen::<f64>() < p {
            let sigma = rng.gen_range(0.0..strength);
            *g = gaussian_smooth(g, sigma);
        }
        if rng.gen::<f64>() < p {
            let shift = rng.gen_range(-0.05 * strength..0.05 * strength) as f32;
            g.data.iter_mut().for_each(|v| *v += shift);
        }
        g.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }
    out
}

fn flip_x(g: &Grid) -> Grid {
    let nx = g.extents[0];
    Grid::from_fn(g.extents, |x, y, z| g.get(nx - 1 - x, y, z))
}

fn centre(g: &Grid) -> [f64; 3] {
    std::array::from_fn(|i| (g.extents[i] as f64 - 1.0) / 2.0)
}

/// Trilinear sample with zero outside the grid.
fn sample(g: &Grid, p: [f64; 3]) -> f32 {
    let mut acc = 0.0f64;
    let base: [f64; 3] = std::array::from_fn(|i| p[i].floor());
    for corner in 0..8 {
        let mut w = 1.0;
        let mut idx = [0usize; 3];
        let mut inside = true;
        for a in 0..3 {
            let off = (corner >> a) & 1;
            let c = base[a] + off as f64;
            let frac = p[a] - base[a];
            w *= if off == 1 { frac } else { 1.0 - frac };
            if c < 0.0 || c >= g.extents[a] as f64 {
                inside = false;
            }
            idx[a] = c.max(0.0) as usize;
        }
        if inside && w != 0.0 {
            acc += w * g.get(idx[0], idx[1], idx[2]) as f64;
        }
    }
    acc as f32
}

fn rotate_axial(g: &Grid, angle: f64) -> Grid {
    let c = centre(g);
    let (s, co) = angle.sin_cos();
    Grid::from_fn(g.extents, |x, y, z| {
        let (dx, dy) = (x as f64 - c[0], y as f64 - c[1]);
        sample(g, [c[0] + co * dx + s * dy, c[1] - s * dx + co * dy, z as f64])
    })
}

/// Zooms about the centre; output keeps the input shape (implicit centred
/// crop or zero pad).
fn zoom(g: &Grid, factor: f64) -> Grid {
    let c = centre(g);
    Grid::from_fn(g.extents, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        sample(g, std::array::from_fn(|i| c[i] + (p[i] - c[i]) / factor))
    })
}

fn gaussian_smooth(g: &Grid, sigma: f64) -> Grid {
    if sigma < 1e-3 {
        return g.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let mut cur = g.clone();
    for axis in 0..3 {
        let n = g.extents[axis] as isize;
        let src = cur.clone();
        cur = Grid::from_fn(g.extents, |x, y, z| {
            let mut p = [x as isize, y as isize, z as isize];
            let centre = p[axis];
            let mut acc = 0.0;
            for (k, w) in kernel.iter().enumerate() {
                p[axis] = (centre + k as isize - radius).clamp(0, n - 1);
                acc += w * src.get(p[0] as usize, p[1] as usize, p[2] as usize) as f64;
            }
            acc as f32
        });
    }
    cur
}
