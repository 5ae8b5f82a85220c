//! Separable Gaussian filtering and finite-difference derivatives.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::grid::ImageGrid;
use crate::volume::{Series, Volume};

/// Discrete Gaussian kernel with standard deviation `sigma` (in samples),
/// truncated at 3 sigma and normalized. `sigma <= 0` returns the identity.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|x| (-0.5 * (x as f64 / sigma).powi(2)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// 1-D convolution of every grid line along `axis` with `kernel`,
/// edge-replicated at the boundary. `stride_ch` is the number of values per
/// voxel; all channels are filtered.
fn convolve_axis(grid: &ImageGrid, data: &mut [f64], channels: usize, axis: usize, kernel: &[f64]) {
    if kernel.len() == 1 {
        return;
    }
    let dims = grid.dims();
    let n_line = dims[axis];
    let radius = (kernel.len() / 2) as i64;
    // iterate over all lines: the two other axes
    let (a1, a2) = match axis {
        0 => (1, 2),
        1 => (0, 2),
        _ => (0, 1),
    };
    let n_lines = dims[a1] * dims[a2];
    // elements along a line are strided in the flat buffer
    let stride_of = |a: usize| -> usize {
        match a {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        }
    };
    let line_stride = stride_of(axis) * channels;

    let out: Vec<(usize, Vec<f64>)> = (0..n_lines)
        .into_par_iter()
        .map(|line| {
            let c1 = line / dims[a2];
            let c2 = line % dims[a2];
            let mut coord = [0usize; 3];
            coord[a1] = c1;
            coord[a2] = c2;
            let base = grid.index(coord[0], coord[1], coord[2]) * channels;
            let mut smoothed = vec![0.0f64; n_line * channels];
            for t in 0..n_line as i64 {
                for (ki, kv) in kernel.iter().enumerate() {
                    let s = (t + ki as i64 - radius).clamp(0, n_line as i64 - 1) as usize;
                    let src = base + s * line_stride;
                    let dst = t as usize * channels;
                    for c in 0..channels {
                        smoothed[dst + c] += kv * data[src + c];
                    }
                }
            }
            (base, smoothed)
        })
        .collect();

    for (base, smoothed) in out {
        for t in 0..n_line {
            let dst = base + t * line_stride;
            data[dst..dst + channels].copy_from_slice(&smoothed[t * channels..(t + 1) * channels]);
        }
    }
}

/// Gaussian-smooth a scalar volume with physical standard deviation
/// `sigma_mm` (isotropic in millimetres, converted per axis).
pub fn gaussian_smooth(vol: &Volume<f64>, sigma_mm: f64) -> Volume<f64> {
    let mut data = vol.data().to_vec();
    let spacing = vol.grid().spacing();
    for axis in 0..3 {
        let kernel = gaussian_kernel(sigma_mm / spacing[axis]);
        convolve_axis(vol.grid(), &mut data, 1, axis, &kernel);
    }
    Volume::new(vol.grid().clone(), data).expect("same length")
}

/// Gaussian-smooth every channel of a series.
pub fn gaussian_smooth_series(s: &Series<f64>, sigma_mm: f64) -> Series<f64> {
    let mut data = s.data().to_vec();
    let spacing = s.grid().spacing();
    for axis in 0..3 {
        let kernel = gaussian_kernel(sigma_mm / spacing[axis]);
        convolve_axis(s.grid(), &mut data, s.channels(), axis, &kernel);
    }
    Series::new(s.grid().clone(), s.channels(), data).expect("same length")
}

/// Central-difference gradient in voxel index space, one-sided at the
/// boundary. Returns d(value)/d(index) per axis.
fn index_gradient_at(vol: &Volume<f64>, i: usize, j: usize, k: usize) -> [f64; 3] {
    let dims = vol.grid().dims();
    let coord = [i, j, k];
    let mut g = [0.0; 3];
    for a in 0..3 {
        let mut lo = coord;
        let mut hi = coord;
        let (den, ok) = if coord[a] == 0 {
            hi[a] = 1;
            (1.0, dims[a] > 1)
        } else if coord[a] == dims[a] - 1 {
            lo[a] = dims[a] - 2;
            (1.0, dims[a] > 1)
        } else {
            lo[a] -= 1;
            hi[a] += 1;
            (2.0, true)
        };
        g[a] = if ok {
            (vol.get(hi[0], hi[1], hi[2]) - vol.get(lo[0], lo[1], lo[2])) / den
        } else {
            0.0
        };
    }
    g
}

/// Spatial gradient in physical millimetre coordinates, as a 3-channel
/// series (du/dx, du/dy, du/dz).
pub fn gradient_mm(vol: &Volume<f64>) -> Series<f64> {
    let grid = vol.grid().clone();
    // d(index)/d(mm) = inverse of the affine 3x3 block
    let inv_lin = grid.linear().try_inverse().expect("invertible grid affine");
    let n = grid.n_voxels();
    let mut data = vec![0.0f64; n * 3];
    crate::par::par_chunks_mut(&mut data, crate::par::CHUNK * 3, |start, chunk| {
        for (off, slot) in chunk.chunks_mut(3).enumerate() {
            let idx = start / 3 + off;
            let [i, j, k] = grid.coords(idx);
            let gi = index_gradient_at(vol, i, j, k);
            let g_mm = inv_lin.transpose() * Vector3::new(gi[0], gi[1], gi[2]);
            slot[0] = g_mm.x;
            slot[1] = g_mm.y;
            slot[2] = g_mm.z;
        }
    });
    Series::new(grid, 3, data).expect("sized")
}

/// Hessian (second derivatives, mm units) of a scalar volume at one voxel,
/// by central differences with one-sided fallback at the boundary. Only
/// meaningful on axis-aligned grids away from the boundary; used by the
/// skeletonization ridge detector.
pub fn hessian_mm_at(vol: &Volume<f64>, i: usize, j: usize, k: usize) -> Matrix3<f64> {
    let dims = vol.grid().dims();
    let sp = vol.grid().spacing();
    let at = |c: [i64; 3]| -> f64 {
        let cc = [
            c[0].clamp(0, dims[0] as i64 - 1) as usize,
            c[1].clamp(0, dims[1] as i64 - 1) as usize,
            c[2].clamp(0, dims[2] as i64 - 1) as usize,
        ];
        vol.get(cc[0], cc[1], cc[2])
    };
    let c = [i as i64, j as i64, k as i64];
    let mut h = Matrix3::zeros();
    for a in 0..3 {
        let mut ca = c;
        ca[a] += 1;
        let mut cb = c;
        cb[a] -= 1;
        h[(a, a)] = (at(ca) - 2.0 * at(c) + at(cb)) / (sp[a] * sp[a]);
        for b in (a + 1)..3 {
            let mut pp = c;
            pp[a] += 1;
            pp[b] += 1;
            let mut pm = c;
            pm[a] += 1;
            pm[b] -= 1;
            let mut mp = c;
            mp[a] -= 1;
            mp[b] += 1;
            let mut mm = c;
            mm[a] -= 1;
            mm[b] -= 1;
            let v = (at(pp) - at(pm) - at(mp) + at(mm)) / (4.0 * sp[a] * sp[b]);
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    h
}
