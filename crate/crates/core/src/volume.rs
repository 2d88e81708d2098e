//! Scalar voxel grids.
//!
//! [`Volume`] carries physical geometry (spacing and a voxel-to-world affine)
//! and is what the NIfTI reader produces. [`Grid`] is the geometry-free,
//! fixed-shape form that preprocessing emits and the model consumes.

use serde::{Deserialize, Serialize};

/// Row-major 3x4 voxel-to-world matrix. Column `j < 3` is the world step of
/// voxel axis `j`; column 3 is the world position of voxel (0, 0, 0).
pub type Affine = [[f64; 4]; 3];

/// A 3D scalar volume, x-fastest storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub extents: [usize; 3],
    pub spacing: [f64; 3],
    pub affine: Affine,
    pub data: Vec<f64>,
}

impl Volume {
    /// Builds a volume whose spacing is derived from the affine column norms.
    pub fn new(extents: [usize; 3], affine: Affine, data: Vec<f64>) -> Self {
        let spacing = column_norms(&affine);
        Self { extents, spacing, affine, data }
    }

    /// Axis-aligned volume with zero origin.
    pub fn with_spacing(extents: [usize; 3], spacing: [f64; 3], data: Vec<f64>) -> Self {
        let mut affine = [[0.0; 4]; 3];
        for (i, row) in affine.iter_mut().enumerate() {
            row[i] = spacing[i];
        }
        Self::new(extents, affine, data)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    /// World coordinate (mm) of the centre of voxel `(i, j, k)`; fractional
    /// indices are allowed.
    pub fn world(&self, ijk: [f64; 3]) -> [f64; 3] {
        apply_affine(&self.affine, ijk)
    }

    pub fn to_grid(&self) -> Grid {
        Grid {
            extents: self.extents,
            data: self.data.iter().map(|&v| v as f32).collect(),
        }
    }
}

pub fn apply_affine(a: &Affine, ijk: [f64; 3]) -> [f64; 3] {
    let mut out = [0.0; 3];
    for (r, o) in out.iter_mut().enumerate() {
        *o = a[r][0] * ijk[0] + a[r][1] * ijk[1] + a[r][2] * ijk[2] + a[r][3];
    }
    out
}

pub fn column_norms(a: &Affine) -> [f64; 3] {
    let mut s = [0.0; 3];
    for (j, sj) in s.iter_mut().enumerate() {
        *sj = (a[0][j] * a[0][j] + a[1][j] * a[1][j] + a[2][j] * a[2][j]).sqrt();
    }
    s
}

/// Fixed-shape single-precision grid, x-fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub extents: [usize; 3],
    pub data: Vec<f32>,
}

impl Grid {
    pub fn zeros(extents: [usize; 3]) -> Self {
        Self { extents, data: vec![0.0; extents[0] * extents[1] * extents[2]] }
    }

    pub fn from_fn(extents: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(extents[0] * extents[1] * extents[2]);
        for z in 0..extents[2] {
            for y in 0..extents[1] {
                for x in 0..extents[0] {
                    data.push(f(x, y, z));
                }
            }
        }
        Self { extents, data }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.extents[0] * (y + self.extents[1] * z)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.index(x, y, z)]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }
}
