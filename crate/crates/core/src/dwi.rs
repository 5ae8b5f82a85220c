//! Diffusion tensor model: fitting, scalar maps, signal synthesis, noise.

use nalgebra::{Matrix3, SMatrix, SVector, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::gradients::GradientTable;
use crate::par;
use crate::volume::Series;
use crate::{BinaryMask, ScalarVolume, SeriesVolume};

/// Symmetric diffusion tensor, mm^2/s.
/// Component order: Dxx, Dyy, Dzz, Dxy, Dxz, Dyz.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DiffusionTensor(pub [f64; 6]);

impl DiffusionTensor {
    pub fn from_matrix(m: &Matrix3<f64>) -> Self {
        DiffusionTensor([m[(0, 0)], m[(1, 1)], m[(2, 2)], m[(0, 1)], m[(0, 2)], m[(1, 2)]])
    }

    pub fn to_matrix(&self) -> Matrix3<f64> {
        let [xx, yy, zz, xy, xz, yz] = self.0;
        Matrix3::new(xx, xy, xz, xy, yy, yz, xz, yz, zz)
    }

    pub fn diagonal(l1: f64, l2: f64, l3: f64) -> Self {
        DiffusionTensor([l1, l2, l3, 0.0, 0.0, 0.0])
    }

    /// Eigenvalues clamped to be non-negative, descending.
    pub fn eigenvalues(&self) -> [f64; 3] {
        let eig = self.to_matrix().symmetric_eigen();
        let mut l = [eig.eigenvalues[0], eig.eigenvalues[1], eig.eigenvalues[2]];
        l.sort_by(|a, b| b.partial_cmp(a).unwrap());
        [l[0].max(0.0), l[1].max(0.0), l[2].max(0.0)]
    }

    /// g' D g for a direction g.
    pub fn quadratic_form(&self, g: &Vector3<f64>) -> f64 {
        let [xx, yy, zz, xy, xz, yz] = self.0;
        xx * g.x * g.x
            + yy * g.y * g.y
            + zz * g.z * g.z
            + 2.0 * (xy * g.x * g.y + xz * g.x * g.z + yz * g.y * g.z)
    }
}

/// Fractional anisotropy in [0, 1]; 0 for the zero tensor.
pub fn fa(tensor: &DiffusionTensor) -> f64 {
    let l = tensor.eigenvalues();
    let norm_sq = l[0] * l[0] + l[1] * l[1] + l[2] * l[2];
    if norm_sq <= 0.0 {
        return 0.0;
    }
    let mean = (l[0] + l[1] + l[2]) / 3.0;
    let dev_sq = (l[0] - mean).powi(2) + (l[1] - mean).powi(2) + (l[2] - mean).powi(2);
    ((1.5 * dev_sq / norm_sq).sqrt()).clamp(0.0, 1.0)
}

/// Mean diffusivity: mean eigenvalue (trace / 3 before clamping is the same
/// for PSD tensors; clamped eigenvalues are used for consistency with `fa`).
pub fn md(tensor: &DiffusionTensor) -> f64 {
    let l = tensor.eigenvalues();
    (l[0] + l[1] + l[2]) / 3.0
}

/// Stejskal-Tanner mono-exponential signal: s0 * exp(-b * g'Dg) per channel.
pub fn predict_signal(tensor: &DiffusionTensor, gtab: &GradientTable, s0: f64) -> Vec<f64> {
    assert!(s0 > 0.0, "predict_signal requires s0 > 0");
    gtab.bvals()
        .iter()
        .zip(gtab.bvecs())
        .map(|(&b, g)| {
            if b == 0.0 {
                s0
            } else {
                s0 * (-b * tensor.quadratic_form(g)).exp()
            }
        })
        .collect()
}

/// Six-channel tensor image. Channel order matches [`DiffusionTensor`].
#[derive(Debug, Clone)]
pub struct TensorVolume {
    series: Series<f64>,
}

impl TensorVolume {
    pub fn new(series: Series<f64>) -> Result<Self> {
        if series.channels() != 6 {
            return Err(Error::Input(format!(
                "tensor volume needs 6 channels, got {}",
                series.channels()
            )));
        }
        Ok(Self { series })
    }

    pub fn series(&self) -> &Series<f64> {
        &self.series
    }

    pub fn into_series(self) -> Series<f64> {
        self.series
    }

    pub fn grid(&self) -> &crate::ImageGrid {
        self.series.grid()
    }

    pub fn tensor_at(&self, idx: usize) -> DiffusionTensor {
        let v = self.series.voxel(idx);
        DiffusionTensor([v[0], v[1], v[2], v[3], v[4], v[5]])
    }

    /// Voxel-wise FA map.
    pub fn fa_volume(&self) -> ScalarVolume {
        let n = self.series.grid().n_voxels();
        let data = par::par_map(n, |i| fa(&self.tensor_at(i)));
        ScalarVolume::new(self.series.grid().clone(), data).expect("sized")
    }

    /// Voxel-wise MD map.
    pub fn md_volume(&self) -> ScalarVolume {
        let n = self.series.grid().n_voxels();
        let data = par::par_map(n, |i| md(&self.tensor_at(i)));
        ScalarVolume::new(self.series.grid().clone(), data).expect("sized")
    }
}

/// Weighted linear least-squares tensor fit on the log signal.
///
/// Per masked voxel: solve `B d = -log(S / S0)` over the weighted channels,
/// with `S0` the mean of the b0 channels, then one reweighting pass with
/// weights equal to the squared predicted signals. Voxels outside the mask
/// get the zero tensor.
pub fn fit_tensor(dwi: &SeriesVolume, gtab: &GradientTable, mask: &BinaryMask) -> Result<TensorVolume> {
    if gtab.len() != dwi.channels() {
        return Err(Error::Acquisition(format!(
            "gradient table has {} entries but DWI has {} channels",
            gtab.len(),
            dwi.channels()
        )));
    }
    dwi.grid().require_same(mask.grid(), "fit_tensor mask")?;
    let b0 = gtab.b0_indices();
    let dw = gtab.dwi_indices();
    if b0.is_empty() {
        return Err(Error::Acquisition("tensor fit needs at least one b0 channel".into()));
    }
    if dw.len() < 6 {
        return Err(Error::Acquisition(format!(
            "tensor fit needs >= 6 weighted directions, got {}",
            dw.len()
        )));
    }

    // design matrix rows for the weighted channels
    let rows: Vec<[f64; 6]> = dw
        .iter()
        .map(|&i| {
            let b = gtab.bvals()[i];
            let g = gtab.bvecs()[i];
            [
                b * g.x * g.x,
                b * g.y * g.y,
                b * g.z * g.z,
                2.0 * b * g.x * g.y,
                2.0 * b * g.x * g.z,
                2.0 * b * g.y * g.z,
            ]
        })
        .collect();

    // rank check on the unweighted design
    let design = nalgebra::DMatrix::from_fn(rows.len(), 6, |r, c| rows[r][c]);
    let svd = design.svd(false, false);
    let smax = svd.singular_values.max();
    if svd.singular_values.iter().filter(|&&s| s > 1e-10 * smax).count() < 6 {
        return Err(Error::Acquisition("gradient directions are rank-deficient for a tensor fit".into()));
    }

    let n = dwi.grid().n_voxels();
    let solve = |signals: &[f64]| -> [f64; 6] {
        let s0: f64 = b0.iter().map(|&i| signals[i]).sum::<f64>() / b0.len() as f64;
        if !(s0 > 0.0) {
            return [0.0; 6];
        }
        let floor = 1e-6 * s0;
        let y: Vec<f64> = dw
            .iter()
            .map(|&i| -(signals[i].max(floor) / s0).ln())
            .collect();
        let wls = |weights: Option<&[f64]>| -> Option<SVector<f64, 6>> {
            let mut ata = SMatrix::<f64, 6, 6>::zeros();
            let mut atb = SVector::<f64, 6>::zeros();
            for (r, row) in rows.iter().enumerate() {
                let w = weights.map_or(1.0, |ws| ws[r]);
                for a in 0..6 {
                    atb[a] += w * row[a] * y[r];
                    for bcol in a..6 {
                        ata[(a, bcol)] += w * row[a] * row[bcol];
                    }
                }
            }
            for a in 0..6 {
                for bcol in 0..a {
                    ata[(a, bcol)] = ata[(bcol, a)];
                }
            }
            ata.cholesky().map(|ch| ch.solve(&atb))
        };
        let Some(d0) = wls(None) else { return [0.0; 6] };
        // reweight by squared predicted signals
        let weights: Vec<f64> = rows
            .iter()
            .map(|row| {
                let pred = s0 * (-(row[0] * d0[0] + row[1] * d0[1] + row[2] * d0[2] + row[3] * d0[3] + row[4] * d0[4] + row[5] * d0[5])).exp();
                pred * pred
            })
            .collect();
        match wls(Some(&weights)) {
            Some(d) => [d[0], d[1], d[2], d[3], d[4], d[5]],
            None => [d0[0], d0[1], d0[2], d0[3], d0[4], d0[5]],
        }
    };

    let mut data = vec![0.0f64; n * 6];
    let mask_data = mask.data();
    par::par_chunks_mut(&mut data, par::CHUNK * 6, |start, chunk| {
        for (off, slot) in chunk.chunks_mut(6).enumerate() {
            let idx = start / 6 + off;
            if mask_data[idx] {
                let d = solve(dwi.voxel(idx));
                slot.copy_from_slice(&d);
            }
        }
    });
    TensorVolume::new(Series::new(dwi.grid().clone(), 6, data)?)
}

/// Rician noise at a given SNR in decibels.
///
/// sigma = mean b0 signal over positive voxels / 10^(snr_db / 20); each value
/// A becomes sqrt((A + n1)^2 + n2^2) with n1, n2 ~ N(0, sigma^2).
/// Deterministic for a fixed seed.
pub fn add_rician_noise(
    dwi: &SeriesVolume,
    gtab: &GradientTable,
    snr_db: f64,
    seed: u64,
) -> Result<SeriesVolume> {
    if !snr_db.is_finite() {
        return Err(Error::Input(format!("snr_db = {snr_db} must be finite")));
    }
    let sigma = noise_sigma(dwi, gtab, snr_db)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = dwi.data().to_vec();
    for v in &mut data {
        let n1: f64 = StandardNormal.sample(&mut rng);
        let n2: f64 = StandardNormal.sample(&mut rng);
        *v = ((*v + sigma * n1).powi(2) + (sigma * n2).powi(2)).sqrt();
    }
    Series::new(dwi.grid().clone(), dwi.channels(), data)
}

/// The Gaussian sigma implied by an SNR in dB relative to the mean b0
/// signal over voxels with positive b0 signal.
pub fn noise_sigma(dwi: &SeriesVolume, gtab: &GradientTable, snr_db: f64) -> Result<f64> {
    if gtab.len() != dwi.channels() {
        return Err(Error::Acquisition("gradient table does not match DWI channels".into()));
    }
    let b0 = gtab.b0_indices();
    if b0.is_empty() {
        return Err(Error::Acquisition("no b0 channel for SNR reference".into()));
    }
    let n = dwi.grid().n_voxels();
    let mut sum = 0.0;
    let mut count = 0usize;
    for idx in 0..n {
        let vox = dwi.voxel(idx);
        let m = b0.iter().map(|&i| vox[i]).sum::<f64>() / b0.len() as f64;
        if m > 0.0 {
            sum += m;
            count += 1;
        }
    }
    if count == 0 || sum <= 0.0 {
        return Err(Error::Input("non-positive b0 reference signal; cannot set noise level".into()));
    }
    let mean_b0 = sum / count as f64;
    Ok(mean_b0 / 10f64.powf(snr_db / 20.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ImageGrid;
    use approx::assert_abs_diff_eq;
    use nalgebra::{Rotation3, Vector3};
    use rand::Rng;

    fn directions(n: usize) -> Vec<Vector3<f64>> {
        crate::sphere::SphereSampling::fibonacci_hemisphere(n)
            .directions()
            .to_vec()
    }

    fn test_gtab(n_dirs: usize, b: f64) -> GradientTable {
        let mut bvals = vec![0.0, 0.0];
        let mut bvecs = vec![Vector3::zeros(), Vector3::zeros()];
        for d in directions(n_dirs) {
            bvals.push(b);
            bvecs.push(d);
        }
        GradientTable::new(bvals, bvecs).unwrap()
    }

    #[test]
    fn fa_isotropic_zero() {
        assert_eq!(fa(&DiffusionTensor::diagonal(1e-3, 1e-3, 1e-3)), 0.0);
    }

    #[test]
    fn fa_stick_one() {
        assert_abs_diff_eq!(fa(&DiffusionTensor::diagonal(1e-3, 0.0, 0.0)), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn fa_prolate_reference_value() {
        // direct eigenvalue-formula evaluation for (1.7, 0.3, 0.3) x 1e-3
        let t = DiffusionTensor::diagonal(1.7e-3, 0.3e-3, 0.3e-3);
        assert_abs_diff_eq!(fa(&t), 0.7990, epsilon = 1e-4);
    }

    #[test]
    fn md_values() {
        let t = DiffusionTensor::diagonal(1.7e-3, 0.3e-3, 0.3e-3);
        assert_abs_diff_eq!(md(&t), 2.3e-3 / 3.0, epsilon = 1e-15);
        assert_eq!(md(&DiffusionTensor::default()), 0.0);
    }

    #[test]
    fn fa_md_rotation_invariant() {
        let t = DiffusionTensor::diagonal(1.7e-3, 0.5e-3, 0.2e-3);
        let f0 = fa(&t);
        let m0 = md(&t);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5).normalize();
            let angle = rng.gen::<f64>() * std::f64::consts::TAU;
            let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle);
            let m = r.matrix() * t.to_matrix() * r.matrix().transpose();
            let rt = DiffusionTensor::from_matrix(&m);
            assert_abs_diff_eq!(fa(&rt), f0, epsilon = 1e-10);
            assert_abs_diff_eq!(md(&rt), m0, epsilon = 1e-12);
        }
    }

    #[test]
    fn predict_b0_is_s0_and_isotropic_closed_form() {
        let gtab = test_gtab(12, 800.0);
        let d = 1.1e-3;
        let s = predict_signal(&DiffusionTensor::diagonal(d, d, d), &gtab, 250.0);
        for (i, &b) in gtab.bvals().iter().enumerate() {
            if b == 0.0 {
                assert_eq!(s[i], 250.0);
            } else {
                assert_abs_diff_eq!(s[i], 250.0 * (-b * d).exp(), epsilon = 1e-9);
            }
        }
    }

    fn single_voxel_volume(signals: &[f64]) -> (SeriesVolume, BinaryMask) {
        let g = ImageGrid::axis_aligned([1, 1, 1], [1.0; 3], [0.0; 3]);
        let s = Series::new(g.clone(), signals.len(), signals.to_vec()).unwrap();
        let m = crate::BinaryMask::filled(g, true);
        (s, m)
    }

    #[test]
    fn fit_recovers_noiseless_tensor() {
        let gtab = test_gtab(32, 1000.0);
        let t = DiffusionTensor::diagonal(1.7e-3, 0.3e-3, 0.3e-3);
        let signals = predict_signal(&t, &gtab, 120.0);
        let (dwi, mask) = single_voxel_volume(&signals);
        let fit = fit_tensor(&dwi, &gtab, &mask).unwrap();
        let got = fit.tensor_at(0);
        for c in 0..6 {
            assert_abs_diff_eq!(got.0[c], t.0[c], epsilon = 1e-9);
        }
    }

    #[test]
    fn fit_recovers_rotated_tensors_roundtrip() {
        let gtab = test_gtab(32, 1000.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let l1 = 0.5e-3 + rng.gen::<f64>() * 2e-3;
            let l2 = 0.1e-3 + rng.gen::<f64>() * l1;
            let l3 = 0.05e-3 + rng.gen::<f64>() * l2;
            let axis = Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5).normalize();
            let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), rng.gen::<f64>() * 3.0);
            let m = r.matrix() * Matrix3::from_diagonal(&Vector3::new(l1, l2, l3)) * r.matrix().transpose();
            let t = DiffusionTensor::from_matrix(&m);
            let signals = predict_signal(&t, &gtab, 100.0);
            let (dwi, mask) = single_voxel_volume(&signals);
            let got = fit_tensor(&dwi, &gtab, &mask).unwrap().tensor_at(0);
            for c in 0..6 {
                assert_abs_diff_eq!(got.0[c], t.0[c], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn all_equal_signals_zero_tensor() {
        let gtab = test_gtab(10, 700.0);
        let signals = vec![55.0; gtab.len()];
        let (dwi, mask) = single_voxel_volume(&signals);
        let got = fit_tensor(&dwi, &gtab, &mask).unwrap().tensor_at(0);
        for c in 0..6 {
            assert_abs_diff_eq!(got.0[c], 0.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn five_directions_is_acquisition_error() {
        let gtab = test_gtab(5, 1000.0);
        let (dwi, mask) = single_voxel_volume(&vec![1.0; gtab.len()]);
        assert!(matches!(fit_tensor(&dwi, &gtab, &mask), Err(Error::Acquisition(_))));
    }

    #[test]
    fn outside_mask_is_zero() {
        let gtab = test_gtab(8, 1000.0);
        let g = ImageGrid::axis_aligned([2, 1, 1], [1.0; 3], [0.0; 3]);
        let t = DiffusionTensor::diagonal(1e-3, 1e-3, 1e-3);
        let sig = predict_signal(&t, &gtab, 50.0);
        let mut data = sig.clone();
        data.extend_from_slice(&sig);
        let dwi = Series::new(g.clone(), gtab.len(), data).unwrap();
        let mask = crate::BinaryMask::new(g, vec![true, false]).unwrap();
        let fit = fit_tensor(&dwi, &gtab, &mask).unwrap();
        assert!(fit.tensor_at(0).0[0] > 0.0);
        assert_eq!(fit.tensor_at(1).0, [0.0; 6]);
    }

    #[test]
    fn rician_sigma_from_decibels() {
        let gtab = test_gtab(6, 1000.0);
        let g = ImageGrid::axis_aligned([3, 3, 3], [1.0; 3], [0.0; 3]);
        let dwi = Series::filled(g, gtab.len(), 100.0);
        let sigma = noise_sigma(&dwi, &gtab, 20.0).unwrap();
        assert_abs_diff_eq!(sigma, 10.0, epsilon = 1e-12);
    }

    #[test]
    fn rician_deterministic_and_degenerate_limit() {
        let gtab = test_gtab(6, 1000.0);
        let g = ImageGrid::axis_aligned([4, 4, 4], [1.0; 3], [0.0; 3]);
        let dwi = Series::filled(g, gtab.len(), 100.0);
        let a = add_rician_noise(&dwi, &gtab, 20.0, 99).unwrap();
        let b = add_rician_noise(&dwi, &gtab, 20.0, 99).unwrap();
        assert_eq!(a.data(), b.data());
        let c = add_rician_noise(&dwi, &gtab, 200.0, 99).unwrap();
        for (x, y) in c.data().iter().zip(dwi.data()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-6);
        }
    }

    #[test]
    fn rician_empirical_sigma() {
        // constant high signal: std of output approximates sigma
        let gtab = GradientTable::new(vec![0.0], vec![Vector3::zeros()]).unwrap();
        let g = ImageGrid::axis_aligned([50, 50, 50], [1.0; 3], [0.0; 3]);
        let dwi = Series::filled(g, 1, 1000.0);
        let snr_db = 40.0; // sigma = 10
        let noisy = add_rician_noise(&dwi, &gtab, snr_db, 5).unwrap();
        let n = noisy.data().len() as f64;
        let mean = noisy.data().iter().sum::<f64>() / n;
        let var = noisy.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((var.sqrt() - 10.0).abs() < 0.5, "sample sigma {} vs 10", var.sqrt());
    }

    #[test]
    fn zero_reference_signal_is_error() {
        let gtab = GradientTable::new(vec![0.0], vec![Vector3::zeros()]).unwrap();
        let g = ImageGrid::axis_aligned([2, 2, 2], [1.0; 3], [0.0; 3]);
        let dwi = Series::filled(g, 1, 0.0);
        assert!(matches!(add_rician_noise(&dwi, &gtab, 20.0, 1), Err(Error::Input(_))));
    }
}
