//! NIfTI-1 single-file reader and writer.
//!
//! Supports uncompressed and gzip-compressed `.nii` files (gzip detected by
//! the 0x1f8b prefix on read, by a `.gz` extension on write). The affine is
//! taken from the sform when `sform_code > 0`, from the qform as a fallback,
//! and from `pixdim` otherwise. `scl_slope`/`scl_inter` are applied on read;
//! files are always written as `float32` with slope 1. NIfTI-2 and DICOM are
//! not supported.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use nalgebra::Matrix4;

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::volume::{Series, Volume};
use crate::{ScalarVolume, SeriesVolume};

const HEADER_SIZE: usize = 348;
const MAGIC_OFFSET: usize = 344;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;

/// A loaded NIfTI image: scalar for 3-D files, series for 4-D files.
#[derive(Debug, Clone)]
pub enum NiftiImage {
    Scalar(ScalarVolume),
    Series(SeriesVolume),
}

impl NiftiImage {
    pub fn grid(&self) -> &ImageGrid {
        match self {
            NiftiImage::Scalar(v) => v.grid(),
            NiftiImage::Series(s) => s.grid(),
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            NiftiImage::Scalar(v) => Ok(v),
            NiftiImage::Series(s) if s.channels() == 1 => {
                let grid = s.grid().clone();
                Volume::new(grid, s.into_data())
            }
            NiftiImage::Series(s) => Err(Error::Input(format!(
                "expected a 3-D scalar volume, got {} channels",
                s.channels()
            ))),
        }
    }

    pub fn into_series(self) -> SeriesVolume {
        match self {
            NiftiImage::Scalar(v) => {
                let grid = v.grid().clone();
                Series::new(grid, 1, v.into_data()).expect("sized")
            }
            NiftiImage::Series(s) => s,
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut raw = Vec::new();
    f.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    if raw.len() >= 2 && raw[0] == 0x1f && raw[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::format(path, format!("gzip decode failed: {e}")))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn le_i16(b: &[u8], off: usize) -> i16 {
    i16::from_le_bytes([b[off], b[off + 1]])
}

fn le_i32(b: &[u8], off: usize) -> i32 {
    i32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

fn le_f32(b: &[u8], off: usize) -> f32 {
    f32::from_le_bytes([b[off], b[off + 1], b[off + 2], b[off + 3]])
}

/// Load a NIfTI-1 volume. 3-D files become [`ScalarVolume`]s, 4-D files
/// become [`SeriesVolume`]s (4th axis = channels).
pub fn load_nifti(path: impl AsRef<Path>) -> Result<NiftiImage> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(Error::format(path, format!("file too short for a NIfTI-1 header ({} bytes)", bytes.len())));
    }
    let sizeof_hdr = le_i32(&bytes, 0);
    if sizeof_hdr != HEADER_SIZE as i32 {
        if sizeof_hdr.swap_bytes() == HEADER_SIZE as i32 {
            return Err(Error::Unsupported("big-endian NIfTI files are not supported".into()));
        }
        return Err(Error::format(path, format!("sizeof_hdr = {sizeof_hdr}, expected 348")));
    }
    let magic = &bytes[MAGIC_OFFSET..MAGIC_OFFSET + 4];
    if magic == b"ni2\0" || magic == b"n+2\0" {
        return Err(Error::Unsupported("NIfTI-2 is not supported".into()));
    }
    if magic != b"n+1\0" {
        return Err(Error::format(path, "bad magic, expected \"n+1\\0\" (single-file NIfTI-1)"));
    }

    let ndim = le_i16(&bytes, 40);
    if ndim > 4 {
        return Err(Error::Unsupported(format!("{ndim}-dimensional images are not supported (max 4)")));
    }
    if ndim < 1 {
        return Err(Error::format(path, format!("dim[0] = {ndim}")));
    }
    let mut dim = [1usize; 4];
    for a in 0..ndim as usize {
        let d = le_i16(&bytes, 40 + 2 * (a + 1));
        if d < 1 {
            return Err(Error::format(path, format!("dim[{}] = {d}", a + 1)));
        }
        dim[a] = d as usize;
    }
    let dims = [dim[0], dim[1], dim[2]];
    let channels = dim[3];

    let datatype = le_i16(&bytes, 70);
    let bytes_per: usize = match datatype {
        DT_UINT8 => 1,
        DT_INT16 => 2,
        DT_INT32 => 4,
        DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(Error::Unsupported(format!("NIfTI datatype code {other} is not supported"))),
    };

    let mut scl_slope = le_f32(&bytes, 112) as f64;
    let scl_inter = le_f32(&bytes, 116) as f64;
    if scl_slope == 0.0 || !scl_slope.is_finite() {
        scl_slope = 1.0;
    }

    let affine = affine_from_header(&bytes);
    let lin = affine.fixed_view::<3, 3>(0, 0);
    let spacing = [lin.column(0).norm(), lin.column(1).norm(), lin.column(2).norm()];
    let grid = ImageGrid::new(dims, spacing, affine)
        .map_err(|e| Error::format(path, format!("invalid geometry: {e}")))?;

    let vox_offset = le_f32(&bytes, 108) as usize;
    let vox_offset = vox_offset.max(HEADER_SIZE);
    let n_values = dims[0] * dims[1] * dims[2] * channels;
    let need = vox_offset + n_values * bytes_per;
    if bytes.len() < need {
        return Err(Error::format(path, format!("data truncated: need {need} bytes, have {}", bytes.len())));
    }
    let raw = &bytes[vox_offset..need];

    // decode in file order (x fastest, then y, z, t)
    let decode = |i: usize| -> f64 {
        let off = i * bytes_per;
        let v = match datatype {
            DT_UINT8 => raw[off] as f64,
            DT_INT16 => le_i16(raw, off) as f64,
            DT_INT32 => le_i32(raw, off) as f64,
            DT_FLOAT32 => le_f32(raw, off) as f64,
            DT_FLOAT64 => f64::from_le_bytes(raw[off..off + 8].try_into().unwrap()),
            _ => unreachable!(),
        };
        scl_slope * v + scl_inter
    };

    // permute into row-major (i,j,k) with channel-fastest storage
    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let mut data = vec![0.0f64; n_values];
    for t in 0..channels {
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let file_idx = i + nx * (j + ny * (k + nz * t));
                    let mem_idx = ((i * ny + j) * nz + k) * channels + t;
                    data[mem_idx] = decode(file_idx);
                }
            }
        }
    }
    if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::format(path, format!("non-finite voxel value at flat index {pos}")));
    }

    if ndim <= 3 || channels == 1 {
        Ok(NiftiImage::Scalar(Volume::new(grid, data)?))
    } else {
        Ok(NiftiImage::Series(Series::new(grid, channels, data)?))
    }
}

fn affine_from_header(bytes: &[u8]) -> Matrix4<f64> {
    let sform_code = le_i16(bytes, 254);
    let qform_code = le_i16(bytes, 252);
    let mut affine = Matrix4::identity();
    if sform_code > 0 {
        for (r, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
            for c in 0..4 {
                affine[(r, c)] = le_f32(bytes, base + 4 * c) as f64;
            }
        }
        return affine;
    }
    let pixdim: Vec<f64> = (0..4).map(|i| le_f32(bytes, 76 + 4 * i) as f64).collect();
    if qform_code > 0 {
        let b = le_f32(bytes, 256) as f64;
        let c = le_f32(bytes, 260) as f64;
        let d = le_f32(bytes, 264) as f64;
        let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
        let qfac = if pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a - b * b + c * c - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a - b * b - c * c + d * d],
        ];
        let sp = [pixdim[1].abs().max(1e-12), pixdim[2].abs().max(1e-12), pixdim[3].abs().max(1e-12)];
        for row in 0..3 {
            affine[(row, 0)] = r[row][0] * sp[0];
            affine[(row, 1)] = r[row][1] * sp[1];
            affine[(row, 2)] = r[row][2] * sp[2] * qfac;
        }
        affine[(0, 3)] = le_f32(bytes, 268) as f64;
        affine[(1, 3)] = le_f32(bytes, 272) as f64;
        affine[(2, 3)] = le_f32(bytes, 276) as f64;
        return affine;
    }
    for a in 0..3 {
        affine[(a, a)] = pixdim[a + 1].abs().max(1e-12);
    }
    affine
}

fn put_i16(b: &mut [u8], off: usize, v: i16) {
    b[off..off + 2].copy_from_slice(&v.to_le_bytes());
}

fn put_i32(b: &mut [u8], off: usize, v: i32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn put_f32(b: &mut [u8], off: usize, v: f32) {
    b[off..off + 4].copy_from_slice(&v.to_le_bytes());
}

fn write_payload(grid: &ImageGrid, channels: usize, data: &[f64], path: &Path) -> Result<()> {
    let dims = grid.dims();
    let mut header = vec![0u8; HEADER_SIZE + 4]; // +4: empty extension flag
    put_i32(&mut header, 0, HEADER_SIZE as i32);
    header[39] = 0; // dim_info
    let ndim: i16 = if channels > 1 { 4 } else { 3 };
    put_i16(&mut header, 40, ndim);
    put_i16(&mut header, 42, dims[0] as i16);
    put_i16(&mut header, 44, dims[1] as i16);
    put_i16(&mut header, 46, dims[2] as i16);
    put_i16(&mut header, 48, channels.max(1) as i16);
    for a in 5..=7 {
        put_i16(&mut header, 40 + 2 * a, 1);
    }
    put_i16(&mut header, 70, DT_FLOAT32);
    put_i16(&mut header, 72, 32); // bitpix
    let sp = grid.spacing();
    put_f32(&mut header, 76, 1.0); // qfac placeholder
    put_f32(&mut header, 80, sp[0] as f32);
    put_f32(&mut header, 84, sp[1] as f32);
    put_f32(&mut header, 88, sp[2] as f32);
    put_f32(&mut header, 92, 1.0);
    put_f32(&mut header, 108, (HEADER_SIZE + 4) as f32); // vox_offset
    put_f32(&mut header, 112, 1.0); // scl_slope
    put_f32(&mut header, 116, 0.0); // scl_inter
    header[123] = 2; // xyzt_units: mm
    let descrip = b"tractstat";
    header[148..148 + descrip.len()].copy_from_slice(descrip);
    put_i16(&mut header, 252, 0); // qform_code
    put_i16(&mut header, 254, 1); // sform_code
    let aff = grid.affine();
    for (r, base) in [(0usize, 280usize), (1, 296), (2, 312)] {
        for c in 0..4 {
            put_f32(&mut header, base + 4 * c, aff[(r, c)] as f32);
        }
    }
    header[MAGIC_OFFSET..MAGIC_OFFSET + 4].copy_from_slice(b"n+1\0");

    let (nx, ny, nz) = (dims[0], dims[1], dims[2]);
    let mut body = Vec::with_capacity(data.len() * 4);
    for t in 0..channels {
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    let mem_idx = ((i * ny + j) * nz + k) * channels + t;
                    body.extend_from_slice(&(data[mem_idx] as f32).to_le_bytes());
                }
            }
        }
    }

    let gz = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"));
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    if gz {
        let mut enc = GzEncoder::new(file, flate2::Compression::fast());
        enc.write_all(&header).map_err(|e| Error::io(path, e))?;
        enc.write_all(&body).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?;
    } else {
        let mut f = file;
        f.write_all(&header).map_err(|e| Error::io(path, e))?;
        f.write_all(&body).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Write a scalar volume as float32 NIfTI-1.
pub fn save_nifti(vol: &ScalarVolume, path: impl AsRef<Path>) -> Result<()> {
    write_payload(vol.grid(), 1, vol.data(), path.as_ref())
}

/// Write a multi-channel volume as 4-D float32 NIfTI-1.
pub fn save_nifti_series(s: &SeriesVolume, path: impl AsRef<Path>) -> Result<()> {
    write_payload(s.grid(), s.channels(), s.data(), path.as_ref())
}

/// Write a binary mask as a float32 NIfTI-1 (0/1 values).
pub fn save_nifti_mask(mask: &crate::BinaryMask, path: impl AsRef<Path>) -> Result<()> {
    let data: Vec<f64> = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    write_payload(mask.grid(), 1, &data, path.as_ref())
}

/// Load a binary mask from a NIfTI file: nonzero voxels are set.
pub fn load_nifti_mask(path: impl AsRef<Path>) -> Result<crate::BinaryMask> {
    let vol = load_nifti(path)?.into_scalar()?;
    let grid = vol.grid().clone();
    let data = vol.data().iter().map(|&v| v != 0.0).collect();
    Volume::new(grid, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Vector3;

    fn demo_volume() -> ScalarVolume {
        let g = ImageGrid::axis_aligned([5, 4, 3], [1.5, 2.0, 2.5], [-3.0, 1.0, 7.5]);
        Volume::from_fn(g, |i, j, k| (i as f64) - 2.0 * (j as f64) + 0.5 * (k as f64))
    }

    #[test]
    fn roundtrip_scalar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("vol.nii");
        let v = demo_volume();
        save_nifti(&v, &p).unwrap();
        let r = load_nifti(&p).unwrap().into_scalar().unwrap();
        assert_eq!(r.grid().dims(), v.grid().dims());
        assert!((r.grid().affine() - v.grid().affine()).abs().max() < 1e-6);
        for (a, b) in v.data().iter().zip(r.data()) {
            assert_eq!(*a as f32, *b as f32); // float32 storage
        }
    }

    #[test]
    fn roundtrip_gzip_series() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("series.nii.gz");
        let g = ImageGrid::axis_aligned([4, 4, 4], [1.0; 3], [0.0; 3]);
        let s = Series::new(
            g.clone(),
            3,
            (0..g.n_voxels() * 3).map(|i| (i % 17) as f64 * 0.25).collect(),
        )
        .unwrap();
        save_nifti_series(&s, &p).unwrap();
        // gzip magic present
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(&raw[..2], &[0x1f, 0x8b]);
        let r = load_nifti(&p).unwrap().into_series();
        assert_eq!(r.channels(), 3);
        for (a, b) in s.data().iter().zip(r.data()) {
            assert_eq!(*a as f32, *b as f32);
        }
    }

    #[test]
    fn minimal_header_constant() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("one.nii");
        let g = ImageGrid::axis_aligned([1, 1, 1], [1.0; 3], [0.0; 3]);
        save_nifti(&Volume::filled(g, 0.0f64), &p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        assert_eq!(le_i32(&raw, 0), 348);
        assert_eq!(&raw[344..348], b"n+1\0");
    }

    #[test]
    fn scl_slope_inter_applied() {
        // hand-build a 1x1x1 int16 file with raw value 3, slope 2, inter 1
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("scl.nii");
        let mut b = vec![0u8; 352 + 2];
        put_i32(&mut b, 0, 348);
        put_i16(&mut b, 40, 3);
        for a in 1..=7 {
            put_i16(&mut b, 40 + 2 * a, 1);
        }
        put_i16(&mut b, 70, DT_INT16);
        put_i16(&mut b, 72, 16);
        for i in 0..8 {
            put_f32(&mut b, 76 + 4 * i, 1.0);
        }
        put_f32(&mut b, 108, 352.0);
        put_f32(&mut b, 112, 2.0);
        put_f32(&mut b, 116, 1.0);
        b[344..348].copy_from_slice(b"n+1\0");
        put_i16(&mut b, 352, 3);
        std::fs::write(&p, &b).unwrap();
        let v = load_nifti(&p).unwrap().into_scalar().unwrap();
        assert_abs_diff_eq!(v.data()[0], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn qform_fallback() {
        // no sform; qform identity rotation with offset (1,2,3)
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("qform.nii");
        let mut b = vec![0u8; 352 + 4];
        put_i32(&mut b, 0, 348);
        put_i16(&mut b, 40, 3);
        for a in 1..=7 {
            put_i16(&mut b, 40 + 2 * a, 1);
        }
        put_i16(&mut b, 70, DT_FLOAT32);
        put_i16(&mut b, 72, 32);
        put_f32(&mut b, 76, 1.0);
        for i in 1..4 {
            put_f32(&mut b, 76 + 4 * i, 2.0);
        }
        put_f32(&mut b, 108, 352.0);
        put_i16(&mut b, 252, 1); // qform_code
        put_f32(&mut b, 268, 1.0);
        put_f32(&mut b, 272, 2.0);
        put_f32(&mut b, 276, 3.0);
        b[344..348].copy_from_slice(b"n+1\0");
        put_f32(&mut b, 352, 5.0);
        std::fs::write(&p, &b).unwrap();
        let v = load_nifti(&p).unwrap().into_scalar().unwrap();
        assert_eq!(v.grid().spacing(), [2.0, 2.0, 2.0]);
        let p0 = v.grid().voxel_to_mm([0.0, 0.0, 0.0]);
        assert!((p0 - Vector3::new(1.0, 2.0, 3.0)).norm() < 1e-6);
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("short.nii");
        std::fs::write(&p, vec![0u8; 100]).unwrap();
        match load_nifti(&p) {
            Err(Error::Format { .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("magic.nii");
        let mut b = vec![0u8; 400];
        put_i32(&mut b, 0, 348);
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(load_nifti(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn unsupported_datatype() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("dt.nii");
        let mut b = vec![0u8; 400];
        put_i32(&mut b, 0, 348);
        put_i16(&mut b, 40, 3);
        for a in 1..=7 {
            put_i16(&mut b, 40 + 2 * a, 1);
        }
        put_i16(&mut b, 70, 128); // RGB24: unsupported
        b[344..348].copy_from_slice(b"n+1\0");
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(load_nifti(&p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn five_dimensional_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("5d.nii");
        let mut b = vec![0u8; 400];
        put_i32(&mut b, 0, 348);
        put_i16(&mut b, 40, 5);
        b[344..348].copy_from_slice(b"n+1\0");
        std::fs::write(&p, &b).unwrap();
        assert!(matches!(load_nifti(&p), Err(Error::Unsupported(_))));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        // /dev/null is a file, so using it as a directory must fail
        let v = demo_volume();
        assert!(matches!(save_nifti(&v, "/dev/null/x/vol.nii"), Err(Error::Io { .. })));
    }
}
