//! Voxel containers and interpolation.
//!
//! [`Volume`] stores one value per voxel, [`Series`] stores `channels` values
//! per voxel (channel index fastest). Both are generic over the element type;
//! interpolation is available for any `num_traits::Float` element.

use nalgebra::Vector3;
use num_traits::Float;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::par;

/// Interpolation mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interp {
    Nearest,
    Trilinear,
}

/// Out-of-grid handling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Values outside the grid read as zero.
    Zero,
    /// Indices are clamped to the nearest voxel.
    Clamp,
}

/// Dense scalar image on an [`ImageGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume<T> {
    grid: ImageGrid,
    data: Vec<T>,
}

/// Dense multi-channel image; channel values are contiguous per voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct Series<T> {
    grid: ImageGrid,
    channels: usize,
    data: Vec<T>,
}

/// Eight-corner trilinear stencil at a continuous voxel coordinate.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    /// Linear voxel indices; usize::MAX marks an outside corner.
    pub idx: [usize; 8],
    pub w: [f64; 8],
}

impl Stencil {
    /// Build a stencil for continuous voxel coordinates `v` on `grid`.
    pub fn trilinear(grid: &ImageGrid, v: &Vector3<f64>, boundary: Boundary) -> Stencil {
        let dims = grid.dims();
        let mut base = [0isize; 3];
        let mut frac = [0.0f64; 3];
        for a in 0..3 {
            let f = v[a].floor();
            base[a] = f as isize;
            frac[a] = v[a] - f;
        }
        let mut idx = [usize::MAX; 8];
        let mut w = [0.0f64; 8];
        for corner in 0..8 {
            let off = [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1];
            let mut weight = 1.0;
            let mut coord = [0usize; 3];
            let mut inside = true;
            for a in 0..3 {
                let fa = if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
                weight *= fa;
                let c = base[a] + off[a] as isize;
                if c < 0 || c as usize >= dims[a] {
                    match boundary {
                        Boundary::Zero => inside = false,
                        Boundary::Clamp => coord[a] = c.clamp(0, dims[a] as isize - 1) as usize,
                    }
                } else {
                    coord[a] = c as usize;
                }
            }
            w[corner] = weight;
            if inside {
                idx[corner] = grid.index(coord[0], coord[1], coord[2]);
            }
        }
        Stencil { idx, w }
    }

    /// Nearest-voxel linear index, or None when outside and boundary is Zero.
    pub fn nearest(grid: &ImageGrid, v: &Vector3<f64>, boundary: Boundary) -> Option<usize> {
        let dims = grid.dims();
        let mut coord = [0usize; 3];
        for a in 0..3 {
            let c = (v[a] + 0.5).floor() as isize;
            if c < 0 || c as usize >= dims[a] {
                match boundary {
                    Boundary::Zero => return None,
                    Boundary::Clamp => coord[a] = c.clamp(0, dims[a] as isize - 1) as usize,
                }
            } else {
                coord[a] = c as usize;
            }
        }
        Some(grid.index(coord[0], coord[1], coord[2]))
    }
}

impl<T: Copy> Volume<T> {
    pub fn new(grid: ImageGrid, data: Vec<T>) -> Result<Self> {
        if data.len() != grid.n_voxels() {
            return Err(Error::Input(format!(
                "volume data length {} does not match grid voxel count {}",
                data.len(),
                grid.n_voxels()
            )));
        }
        Ok(Self { grid, data })
    }

    pub fn filled(grid: ImageGrid, value: T) -> Self {
        let n = grid.n_voxels();
        Self { grid, data: vec![value; n] }
    }

    pub fn from_fn(grid: ImageGrid, f: impl Fn(usize, usize, usize) -> T + Sync) -> Self
    where
        T: Send,
    {
        let g = grid.clone();
        let data = par::par_map(grid.n_voxels(), |idx| {
            let [i, j, k] = g.coords(idx);
            f(i, j, k)
        });
        Self { grid, data }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.grid.index(i, j, k)]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, k: usize, v: T) {
        let idx = self.grid.index(i, j, k);
        self.data[idx] = v;
    }

    /// Nearest-neighbor sample at a physical point; `Default::default()`
    /// outside the grid under `Boundary::Zero`.
    pub fn sample_nearest(&self, point_mm: &Vector3<f64>, boundary: Boundary) -> T
    where
        T: Default,
    {
        let v = self.grid.mm_to_voxel(point_mm);
        match Stencil::nearest(&self.grid, &v, boundary) {
            Some(idx) => self.data[idx],
            None => T::default(),
        }
    }
}

impl<T: Float + Send + Sync> Volume<T> {
    /// Interpolate at a physical point (mm).
    pub fn sample(&self, point_mm: &Vector3<f64>, mode: Interp, boundary: Boundary) -> T {
        let v = self.grid.mm_to_voxel(point_mm);
        self.sample_voxel(&v, mode, boundary)
    }

    /// Interpolate at continuous voxel coordinates.
    pub fn sample_voxel(&self, v: &Vector3<f64>, mode: Interp, boundary: Boundary) -> T {
        match mode {
            Interp::Nearest => match Stencil::nearest(&self.grid, v, boundary) {
                Some(idx) => self.data[idx],
                None => T::zero(),
            },
            Interp::Trilinear => {
                let st = Stencil::trilinear(&self.grid, v, boundary);
                let mut acc = T::zero();
                for c in 0..8 {
                    if st.idx[c] != usize::MAX {
                        acc = acc + self.data[st.idx[c]] * T::from(st.w[c]).unwrap();
                    }
                }
                acc
            }
        }
    }

    /// Resample onto `target` by pulling values through both affines.
    pub fn resample(&self, target: &ImageGrid, mode: Interp, boundary: Boundary) -> Volume<T> {
        let tg = target.clone();
        let data = par::par_map(target.n_voxels(), |idx| {
            let [i, j, k] = tg.coords(idx);
            let p = tg.voxel_to_mm([i as f64, j as f64, k as f64]);
            self.sample(&p, mode, boundary)
        });
        Volume { grid: target.clone(), data }
    }

    pub fn assert_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!("non-finite voxel value at index {i}"))),
        }
    }
}

impl Volume<f64> {
    /// Voxel-wise map into a new volume.
    pub fn map(&self, f: impl Fn(f64) -> f64 + Sync) -> Volume<f64> {
        let data = par::par_map(self.data.len(), |i| f(self.data[i]));
        Volume { grid: self.grid.clone(), data }
    }
}

impl Volume<bool> {
    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Indices of set voxels, ascending.
    pub fn true_indices(&self) -> Vec<usize> {
        self.data
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| if b { Some(i) } else { None })
            .collect()
    }
}

impl<T: Copy> Series<T> {
    pub fn new(grid: ImageGrid, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Parameter("series must have at least one channel".into()));
        }
        if data.len() != grid.n_voxels() * channels {
            return Err(Error::Input(format!(
                "series data length {} does not match {} voxels x {} channels",
                data.len(),
                grid.n_voxels(),
                channels
            )));
        }
        Ok(Self { grid, channels, data })
    }

    pub fn filled(grid: ImageGrid, channels: usize, value: T) -> Self {
        let n = grid.n_voxels() * channels;
        Self { grid, channels, data: vec![value; n] }
    }

    pub fn grid(&self) -> &ImageGrid {
        &self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn voxel(&self, idx: usize) -> &[T] {
        &self.data[idx * self.channels..(idx + 1) * self.channels]
    }

    #[inline]
    pub fn voxel_mut(&mut self, idx: usize) -> &mut [T] {
        let c = self.channels;
        &mut self.data[idx * c..(idx + 1) * c]
    }

    /// Extract one channel as a [`Volume`].
    pub fn channel(&self, c: usize) -> Volume<T>
    where
        T: Send + Sync,
    {
        assert!(c < self.channels);
        let ch = self.channels;
        let data = par::par_map(self.grid.n_voxels(), |i| self.data[i * ch + c]);
        Volume { grid: self.grid.clone(), data }
    }

    /// Assemble from per-channel volumes sharing one grid.
    pub fn from_channels(volumes: &[Volume<T>]) -> Result<Self>
    where
        T: Send + Sync,
    {
        let first = volumes.first().ok_or_else(|| Error::Input("no channels given".into()))?;
        for v in volumes {
            first.grid.require_same(&v.grid, "series channels")?;
        }
        let ch = volumes.len();
        let grid = first.grid.clone();
        let data = par::par_map(grid.n_voxels() * ch, |i| volumes[i % ch].data[i / ch]);
        Ok(Self { grid, channels: ch, data })
    }
}

impl<T: Float + Send + Sync> Series<T> {
    /// Trilinear-interpolate all channels at a physical point into `out`.
    pub fn sample_into(&self, point_mm: &Vector3<f64>, boundary: Boundary, out: &mut [T]) {
        let v = self.grid.mm_to_voxel(point_mm);
        self.sample_voxel_into(&v, boundary, out);
    }

    /// Trilinear-interpolate all channels at continuous voxel coordinates.
    pub fn sample_voxel_into(&self, v: &Vector3<f64>, boundary: Boundary, out: &mut [T]) {
        debug_assert_eq!(out.len(), self.channels);
        let st = Stencil::trilinear(&self.grid, v, boundary);
        for o in out.iter_mut() {
            *o = T::zero();
        }
        for c in 0..8 {
            if st.idx[c] == usize::MAX || st.w[c] == 0.0 {
                continue;
            }
            let w = T::from(st.w[c]).unwrap();
            let vox = self.voxel(st.idx[c]);
            for (o, &val) in out.iter_mut().zip(vox) {
                *o = *o + val * w;
            }
        }
    }

    /// Resample all channels onto `target` (trilinear).
    pub fn resample(&self, target: &ImageGrid, boundary: Boundary) -> Series<T> {
        let ch = self.channels;
        let tg = target.clone();
        let n = target.n_voxels();
        let mut data = vec![T::zero(); n * ch];
        par::par_chunks_mut(&mut data, par::CHUNK * ch, |start, chunk| {
            let mut buf = vec![T::zero(); ch];
            for (off, slot) in chunk.chunks_mut(ch).enumerate() {
                let idx = start / ch + off;
                let [i, j, k] = tg.coords(idx);
                let p = tg.voxel_to_mm([i as f64, j as f64, k as f64]);
                self.sample_into(&p, boundary, &mut buf);
                slot.copy_from_slice(&buf);
            }
        });
        Series { grid: target.clone(), channels: ch, data }
    }

    pub fn assert_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!("non-finite series value at index {i}"))),
        }
    }
}
