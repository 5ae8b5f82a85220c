//! Dense displacement fields: composition, inversion, Jacobians, warping.
//!
//! A field on grid `G` is a pull-back map: it sends a point `x` in `G`'s
//! space to `x + u(x)` in the source image's space, and warping an image
//! samples the source there. Displacements are stored in millimetres.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::par;
use crate::sh::{FodVolume, ReorientContext};
use crate::volume::{Boundary, Interp, Series};
use crate::{BinaryMask, ImageGrid, ScalarVolume, SeriesVolume};

/// Voxel-wise 3-vector displacement field (mm) on a fixed grid.
#[derive(Debug, Clone)]
pub struct DisplacementField {
    field: Series<f64>,
}

impl DisplacementField {
    pub fn new(field: Series<f64>) -> Result<Self> {
        if field.channels() != 3 {
            return Err(Error::Input(format!(
                "displacement field needs 3 channels, got {}",
                field.channels()
            )));
        }
        Ok(Self { field })
    }

    pub fn zero(grid: ImageGrid) -> Self {
        Self { field: Series::filled(grid, 3, 0.0) }
    }

    /// Constant translation field.
    pub fn translation(grid: ImageGrid, t: Vector3<f64>) -> Self {
        let n = grid.n_voxels();
        let mut data = vec![0.0; n * 3];
        for i in 0..n {
            data[i * 3] = t.x;
            data[i * 3 + 1] = t.y;
            data[i * 3 + 2] = t.z;
        }
        Self { field: Series::new(grid, 3, data).expect("sized") }
    }

    pub fn grid(&self) -> &ImageGrid {
        self.field.grid()
    }

    pub fn series(&self) -> &SeriesVolume {
        &self.field
    }

    pub fn series_mut(&mut self) -> &mut SeriesVolume {
        &mut self.field
    }

    pub fn into_series(self) -> SeriesVolume {
        self.field
    }

    #[inline]
    pub fn vector_at(&self, idx: usize) -> Vector3<f64> {
        let v = self.field.voxel(idx);
        Vector3::new(v[0], v[1], v[2])
    }

    #[inline]
    pub fn set_vector(&mut self, idx: usize, u: Vector3<f64>) {
        let v = self.field.voxel_mut(idx);
        v[0] = u.x;
        v[1] = u.y;
        v[2] = u.z;
    }

    /// Trilinear field value at an arbitrary physical point (edge-clamped).
    pub fn sample_vector(&self, p: &Vector3<f64>) -> Vector3<f64> {
        let mut out = [0.0; 3];
        self.field.sample_into(p, Boundary::Clamp, &mut out);
        Vector3::new(out[0], out[1], out[2])
    }

    /// The mapped point `x + u(x)` for the voxel at `idx`.
    pub fn map_voxel(&self, idx: usize) -> Vector3<f64> {
        let [i, j, k] = self.grid().coords(idx);
        let x = self.grid().voxel_to_mm([i as f64, j as f64, k as f64]);
        x + self.vector_at(idx)
    }

    /// Root-mean-square displacement magnitude.
    pub fn rms(&self) -> f64 {
        let n = self.grid().n_voxels();
        let ss = par::det_sum(n, |i| self.vector_at(i).norm_squared());
        (ss / n as f64).sqrt()
    }

    /// Voxel-wise linear combination: self + scale * other (other sampled on
    /// this field's grid).
    pub fn add_scaled(&mut self, other: &DisplacementField, scale: f64) {
        let same = self.grid().same_geometry(other.grid());
        let grid = self.grid().clone();
        let data = self.field.data_mut();
        par::par_chunks_mut(data, par::CHUNK * 3, |start, chunk| {
            for (off, slot) in chunk.chunks_mut(3).enumerate() {
                let idx = start / 3 + off;
                let u = if same {
                    other.vector_at(idx)
                } else {
                    let [i, j, k] = grid.coords(idx);
                    let p = grid.voxel_to_mm([i as f64, j as f64, k as f64]);
                    other.sample_vector(&p)
                };
                slot[0] += scale * u.x;
                slot[1] += scale * u.y;
                slot[2] += scale * u.z;
            }
        });
    }

    /// Jacobian of the map `x -> x + u(x)` at a voxel: `I + du/dx` with
    /// central differences (one-sided at the boundary), in physical
    /// coordinates.
    pub fn jacobian_at(&self, i: usize, j: usize, k: usize) -> Matrix3<f64> {
        let grid = self.grid();
        let dims = grid.dims();
        let inv_lin = grid.linear().try_inverse().expect("invertible grid affine");
        let mut du_didx = Matrix3::zeros(); // du / d(index)
        let coord = [i, j, k];
        for a in 0..3 {
            let mut lo = coord;
            let mut hi = coord;
            let den = if coord[a] == 0 {
                hi[a] = (coord[a] + 1).min(dims[a] - 1);
                1.0
            } else if coord[a] == dims[a] - 1 {
                lo[a] = coord[a] - 1;
                1.0
            } else {
                lo[a] -= 1;
                hi[a] += 1;
                2.0
            };
            if hi[a] == lo[a] {
                continue;
            }
            let uh = self.vector_at(grid.index(hi[0], hi[1], hi[2]));
            let ul = self.vector_at(grid.index(lo[0], lo[1], lo[2]));
            let d = (uh - ul) / den;
            for r in 0..3 {
                du_didx[(r, a)] = d[r];
            }
        }
        Matrix3::identity() + du_didx * inv_lin
    }

    /// Fraction of the given voxels with positive Jacobian determinant.
    pub fn positive_jacobian_fraction(&self, voxels: &[usize]) -> f64 {
        if voxels.is_empty() {
            return 1.0;
        }
        let grid = self.grid().clone();
        let pos = par::det_sum(voxels.len(), |n| {
            let [i, j, k] = grid.coords(voxels[n]);
            if self.jacobian_at(i, j, k).determinant() > 0.0 {
                1.0
            } else {
                0.0
            }
        });
        pos / voxels.len() as f64
    }

    /// Minimum Jacobian determinant over the whole grid.
    pub fn min_jacobian_det(&self) -> f64 {
        let grid = self.grid().clone();
        let n = grid.n_voxels();
        let dets = par::par_map(n, |idx| {
            let [i, j, k] = grid.coords(idx);
            self.jacobian_at(i, j, k).determinant()
        });
        dets.into_iter().fold(f64::INFINITY, f64::min)
    }

    /// Resample the field onto another grid (trilinear, edge-clamped).
    pub fn resample(&self, target: &ImageGrid) -> DisplacementField {
        DisplacementField { field: self.field.resample(target, Boundary::Clamp) }
    }
}

/// Composition `(outer then inner)`: the result maps
/// `x -> x + outer(x) + inner(x + outer(x))`, on the outer field's grid.
pub fn compose(outer: &DisplacementField, inner: &DisplacementField) -> DisplacementField {
    let grid = outer.grid().clone();
    let n = grid.n_voxels();
    let mut data = vec![0.0f64; n * 3];
    par::par_chunks_mut(&mut data, par::CHUNK * 3, |start, chunk| {
        for (off, slot) in chunk.chunks_mut(3).enumerate() {
            let idx = start / 3 + off;
            let [i, j, k] = grid.coords(idx);
            let x = grid.voxel_to_mm([i as f64, j as f64, k as f64]);
            let uo = outer.vector_at(idx);
            let ui = inner.sample_vector(&(x + uo));
            slot[0] = uo.x + ui.x;
            slot[1] = uo.y + ui.y;
            slot[2] = uo.z + ui.z;
        }
    });
    DisplacementField { field: Series::new(grid, 3, data).expect("sized") }
}

/// Fixed-point inversion: find `v` with `v(x) = -u(x + v(x))`.
///
/// Iterates at most `max_iters` times and requires the mean residual
/// `|v(x) + u(x + v(x))|` to drop to `tol_mm`.
pub fn invert(field: &DisplacementField, max_iters: usize, tol_mm: f64) -> Result<DisplacementField> {
    let grid = field.grid().clone();
    let n = grid.n_voxels();
    let mut v = DisplacementField::zero(grid.clone());
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let next: Vec<f64> = {
            let v_ref = &v;
            let mut data = vec![0.0f64; n * 3];
            par::par_chunks_mut(&mut data, par::CHUNK * 3, |start, chunk| {
                for (off, slot) in chunk.chunks_mut(3).enumerate() {
                    let idx = start / 3 + off;
                    let [i, j, k] = grid.coords(idx);
                    let x = grid.voxel_to_mm([i as f64, j as f64, k as f64]);
                    let u = field.sample_vector(&(x + v_ref.vector_at(idx)));
                    slot[0] = -u.x;
                    slot[1] = -u.y;
                    slot[2] = -u.z;
                }
            });
            data
        };
        v = DisplacementField::new(Series::new(grid.clone(), 3, next)?)?;
        residual = par::det_sum(n, |idx| {
            let x = {
                let [i, j, k] = grid.coords(idx);
                grid.voxel_to_mm([i as f64, j as f64, k as f64])
            };
            (v.vector_at(idx) + field.sample_vector(&(x + v.vector_at(idx)))).norm()
        }) / n as f64;
        if residual <= tol_mm {
            return Ok(v);
        }
    }
    if residual <= tol_mm {
        Ok(v)
    } else {
        Err(Error::Inversion { residual_mm: residual })
    }
}

/// Pull-back warp of a scalar volume onto the field's grid.
pub fn warp_scalar(vol: &ScalarVolume, field: &DisplacementField, mode: Interp) -> ScalarVolume {
    let grid = field.grid().clone();
    let data = par::par_map(grid.n_voxels(), |idx| {
        let p = field.map_voxel(idx);
        vol.sample(&p, mode, Boundary::Zero)
    });
    ScalarVolume::new(grid, data).expect("sized")
}

/// Nearest-neighbor pull-back warp of a mask.
pub fn warp_mask(mask: &BinaryMask, field: &DisplacementField) -> BinaryMask {
    let grid = field.grid().clone();
    let data = par::par_map(grid.n_voxels(), |idx| {
        let p = field.map_voxel(idx);
        mask.sample_nearest(&p, Boundary::Zero)
    });
    BinaryMask::new(grid, data).expect("sized")
}

/// Pull-back warp of a generic series (trilinear per channel).
pub fn warp_series(s: &SeriesVolume, field: &DisplacementField) -> SeriesVolume {
    let grid = field.grid().clone();
    let ch = s.channels();
    let n = grid.n_voxels();
    let mut data = vec![0.0f64; n * ch];
    par::par_chunks_mut(&mut data, par::CHUNK.div_euclid(ch).max(1) * ch, |start, chunk| {
        let mut buf = vec![0.0f64; ch];
        for (off, slot) in chunk.chunks_mut(ch).enumerate() {
            let idx = start / ch + off;
            let p = field.map_voxel(idx);
            s.sample_into(&p, Boundary::Zero, &mut buf);
            slot.copy_from_slice(&buf);
        }
    });
    Series::new(grid, ch, data).expect("sized")
}

/// Warp an FOD volume: trilinear per channel, then per-voxel reorientation
/// with the local Jacobian `I + grad u`. Voxels with a degenerate Jacobian
/// keep the unreoriented coefficients and are tallied in the return value.
pub fn warp_fod(
    fod: &FodVolume,
    field: &DisplacementField,
    ctx: &ReorientContext,
) -> Result<(FodVolume, usize)> {
    let all: Vec<usize> = (0..field.grid().n_voxels()).collect();
    warp_fod_masked(fod, field, ctx, &all)
}

/// [`warp_fod`] restricted to the given voxels of the field grid; other
/// voxels are zero.
pub fn warp_fod_masked(
    fod: &FodVolume,
    field: &DisplacementField,
    ctx: &ReorientContext,
    voxels: &[usize],
) -> Result<(FodVolume, usize)> {
    if ctx.lmax() != fod.lmax() {
        return Err(Error::Parameter(format!(
            "reorientation context lmax {} does not match FOD lmax {}",
            ctx.lmax(),
            fod.lmax()
        )));
    }
    let grid = field.grid().clone();
    let nc = ctx.n_coeffs();
    let n = grid.n_voxels();
    let mut data = vec![0.0f64; n * nc];

    // each chunk produces coefficients for disjoint voxels
    let results: Vec<(Vec<(usize, Vec<f64>)>, usize)> = {
        use rayon::prelude::*;
        voxels
            .par_chunks(4096)
            .map(|chunk| {
                let mut ws = ctx.workspace();
                let mut sampled = vec![0.0f64; nc];
                let mut reor = vec![0.0f64; nc];
                let mut out = Vec::with_capacity(chunk.len());
                let mut degen = 0usize;
                for &idx in chunk {
                    let p = field.map_voxel(idx);
                    fod.series().sample_into(&p, Boundary::Zero, &mut sampled);
                    let [i, j, k] = grid.coords(idx);
                    let jac = field.jacobian_at(i, j, k);
                    if jac.determinant().abs() < 1e-12 {
                        degen += 1;
                        out.push((idx, sampled.clone()));
                    } else {
                        ctx.reorient_into(&sampled, &jac, &mut reor, &mut ws)
                            .expect("non-degenerate Jacobian");
                        out.push((idx, reor.clone()));
                    }
                }
                (out, degen)
            })
            .collect()
    };
    let mut tally = 0usize;
    for (entries, degen) in results {
        tally += degen;
        for (idx, coeffs) in entries {
            data[idx * nc..(idx + 1) * nc].copy_from_slice(&coeffs);
        }
    }
    if tally > 0 {
        log::warn!("warp_fod: {tally} voxels had a degenerate Jacobian and were not reoriented");
    }
    let warped = FodVolume::new(fod.lmax(), Series::new(grid, nc, data)?)?;
    Ok((warped, tally))
}
