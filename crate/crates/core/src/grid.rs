//! Voxel grid geometry.

use nalgebra::{Matrix3, Matrix4, Vector3, Vector4};

use crate::error::{Error, Result};

/// A regular 3-D voxel grid embedded in physical space.
///
/// `affine` maps a voxel index `(i, j, k)` to millimetres as
/// `affine * (i, j, k, 1)`. The spacing must equal the column norms of the
/// affine's upper-left 3x3 block.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
    affine: Matrix4<f64>,
}

impl ImageGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], affine: Matrix4<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Parameter(format!("grid dims must be positive, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Parameter(format!("grid spacing must be positive, got {spacing:?}")));
        }
        let lin = affine.fixed_view::<3, 3>(0, 0).into_owned();
        if lin.determinant().abs() < 1e-12 {
            return Err(Error::Parameter("grid affine upper-left 3x3 block is singular".into()));
        }
        for a in 0..3 {
            let col_norm = lin.column(a).norm();
            if (col_norm - spacing[a]).abs() > 1e-6 {
                return Err(Error::Parameter(format!(
                    "spacing[{a}] = {} does not match affine column norm {col_norm}",
                    spacing[a]
                )));
            }
        }
        Ok(Self { dims, spacing, affine })
    }

    /// Axis-aligned grid with the given origin (mm position of voxel (0,0,0)).
    pub fn axis_aligned(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Self {
        let mut affine = Matrix4::identity();
        for a in 0..3 {
            affine[(a, a)] = spacing[a];
            affine[(a, 3)] = origin[a];
        }
        Self::new(dims, spacing, affine).expect("axis-aligned grid is always valid")
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    pub fn affine(&self) -> &Matrix4<f64> {
        &self.affine
    }

    pub fn n_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Row-major linear index of `(i, j, k)`; `k` varies fastest.
    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        debug_assert!(i < self.dims[0] && j < self.dims[1] && k < self.dims[2]);
        (i * self.dims[1] + j) * self.dims[2] + k
    }

    /// Inverse of [`ImageGrid::index`].
    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let k = idx % self.dims[2];
        let rest = idx / self.dims[2];
        let j = rest % self.dims[1];
        let i = rest / self.dims[1];
        [i, j, k]
    }

    /// Physical position (mm) of a voxel center.
    #[inline]
    pub fn voxel_to_mm(&self, v: [f64; 3]) -> Vector3<f64> {
        let p = self.affine * Vector4::new(v[0], v[1], v[2], 1.0);
        Vector3::new(p.x, p.y, p.z)
    }

    /// Continuous voxel coordinates of a physical point (mm).
    #[inline]
    pub fn mm_to_voxel(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let inv = self.inv_affine();
        let q = inv * Vector4::new(p.x, p.y, p.z, 1.0);
        Vector3::new(q.x, q.y, q.z)
    }

    /// Inverse affine (index <- mm). Recomputed on demand; grids are tiny.
    pub fn inv_affine(&self) -> Matrix4<f64> {
        self.affine.try_inverse().expect("grid affine is invertible by construction")
    }

    /// Upper-left 3x3 block of the affine.
    pub fn linear(&self) -> Matrix3<f64> {
        self.affine.fixed_view::<3, 3>(0, 0).into_owned()
    }

    /// Physical center of the grid (mm).
    pub fn center_mm(&self) -> Vector3<f64> {
        let c = [
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ];
        self.voxel_to_mm(c)
    }

    /// Millimetre positions of the eight grid corners (voxel centers).
    pub fn corners_mm(&self) -> Vec<Vector3<f64>> {
        let mut out = Vec::with_capacity(8);
        for &i in &[0.0, self.dims[0] as f64 - 1.0] {
            for &j in &[0.0, self.dims[1] as f64 - 1.0] {
                for &k in &[0.0, self.dims[2] as f64 - 1.0] {
                    out.push(self.voxel_to_mm([i, j, k]));
                }
            }
        }
        out
    }

    pub fn same_geometry(&self, other: &ImageGrid) -> bool {
        self.dims == other.dims
            && (self.affine - other.affine).abs().max() <= 1e-6
    }

    /// Equality check used by operations that require matching grids.
    pub fn require_same(&self, other: &ImageGrid, what: &str) -> Result<()> {
        if self.same_geometry(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )))
        }
    }
}
