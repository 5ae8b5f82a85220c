//! Single-shell, single-tissue constrained spherical deconvolution.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gradients::GradientTable;
use crate::par;
use crate::sh::{n_coeffs, sh_basis, FodVolume, Response, REORIENT_DIRECTIONS};
use crate::sphere::SphereSampling;
use crate::volume::Series;
use crate::{BinaryMask, SeriesVolume};

/// Hard-constraint iteration cap.
const MAX_CSD_ITERATIONS: usize = 50;

/// Estimate fiber orientation distributions by constrained spherical
/// deconvolution of a single-shell acquisition.
///
/// Per masked voxel the signal (normalized by the voxel's mean b0) is
/// deconvolved with the per-order `response` kernel: minimize
/// `|| A x - s ||^2` subject to non-negative FOD amplitude on a fixed
/// 300-direction constraint set, by iteratively re-solving with a large
/// quadratic penalty on the currently negative directions.
pub fn fit_csd(
    dwi: &SeriesVolume,
    gtab: &GradientTable,
    response: &Response,
    lmax: usize,
    mask: &BinaryMask,
) -> Result<FodVolume> {
    if lmax % 2 != 0 {
        return Err(Error::Parameter(format!("lmax must be even, got {lmax}")));
    }
    if gtab.len() != dwi.channels() {
        return Err(Error::Acquisition(format!(
            "gradient table has {} entries but DWI has {} channels",
            gtab.len(),
            dwi.channels()
        )));
    }
    dwi.grid().require_same(mask.grid(), "fit_csd mask")?;
    gtab.single_shell_bval()?;
    if response.max_l() < lmax {
        return Err(Error::Input(format!(
            "response provides orders up to {} but lmax is {lmax}",
            response.max_l()
        )));
    }
    if mask.count_true() == 0 {
        return Err(Error::Input("empty mask".into()));
    }
    let b0 = gtab.b0_indices();
    if b0.is_empty() {
        return Err(Error::Acquisition("CSD needs at least one b0 channel for normalization".into()));
    }
    let dw = gtab.dwi_indices();
    let nc = n_coeffs(lmax);

    // forward convolution matrix: basis at gradient directions, columns
    // scaled by the per-order kernel
    let grad_sampling = SphereSampling::new(dw.iter().map(|&i| gtab.bvecs()[i]).collect())?;
    let mut fwd = sh_basis(lmax, &grad_sampling)?;
    let mut col = 0;
    for l in (0..=lmax).step_by(2) {
        let r = response.for_l(l).expect("response covers lmax");
        for _ in 0..(2 * l + 1) {
            for row in 0..fwd.nrows() {
                fwd[(row, col)] *= r;
            }
            col += 1;
        }
    }

    let constraint_sampling = SphereSampling::fibonacci_hemisphere(REORIENT_DIRECTIONS);
    let cmat = sh_basis(lmax, &constraint_sampling)?;

    let at = fwd.transpose();
    let ata = &at * &fwd;
    let scale = ata.trace() / nc as f64;
    // sculpting weight balanced against the data block; a harder polish
    // weight afterwards pushes residual negativity below 1e-3 of the peak
    let r0 = response.for_l(0).expect("response covers l = 0");
    let lam = dw.len() as f64 * r0 / cmat.nrows() as f64;
    let lam2_soft = 100.0 * lam * lam;
    let lam2_hard = 100.0 * lam2_soft;
    let ridge = 1e-8 * scale;

    let n = dwi.grid().n_voxels();
    let mask_data = mask.data();
    let mut data = vec![0.0f64; n * nc];
    par::par_chunks_mut(&mut data, par::CHUNK.div_euclid(nc).max(1) * nc, |start, chunk| {
        let mut s = DVector::<f64>::zeros(dw.len());
        let mut m = DMatrix::<f64>::zeros(nc, nc);
        let mut amps = vec![0.0f64; cmat.nrows()];
        let mut neg = vec![false; cmat.nrows()];
        let mut prev_neg = vec![false; cmat.nrows()];
        for (off, slot) in chunk.chunks_mut(nc).enumerate() {
            let idx = start / nc + off;
            if !mask_data[idx] {
                continue;
            }
            let vox = dwi.voxel(idx);
            let s0: f64 = b0.iter().map(|&i| vox[i]).sum::<f64>() / b0.len() as f64;
            if !(s0 > 0.0) {
                continue;
            }
            for (r, &i) in dw.iter().enumerate() {
                s[r] = vox[i] / s0;
            }
            let atb = &at * &s;

            // unconstrained start
            m.copy_from(&ata);
            for d in 0..nc {
                m[(d, d)] += ridge;
            }
            let Some(ch) = m.clone().cholesky() else { continue };
            let mut x = ch.solve(&atb);

            // sculpting trigger: amplitudes below 10% of the initial mean
            // are pulled toward zero
            let mut mean0 = 0.0;
            for r in 0..cmat.nrows() {
                for c in 0..nc {
                    mean0 += cmat[(r, c)] * x[c];
                }
            }
            mean0 /= cmat.nrows() as f64;
            let tau = (0.1 * mean0).max(0.0);

            let amps_of = |x: &DVector<f64>, amps: &mut [f64]| {
                for (r, amp) in amps.iter_mut().enumerate() {
                    let mut a = 0.0;
                    for c in 0..nc {
                        a += cmat[(r, c)] * x[c];
                    }
                    *amp = a;
                }
            };
            let resolve = |sets: &[(&[bool], f64)], m: &mut DMatrix<f64>| -> Option<DVector<f64>> {
                m.copy_from(&ata);
                for d in 0..nc {
                    m[(d, d)] += ridge;
                }
                for &(active, weight) in sets {
                    for (r, &on) in active.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        for a in 0..nc {
                            let ca = cmat[(r, a)];
                            for b in a..nc {
                                m[(a, b)] += weight * ca * cmat[(r, b)];
                            }
                        }
                    }
                }
                for a in 0..nc {
                    for b in 0..a {
                        m[(a, b)] = m[(b, a)];
                    }
                }
                m.clone().cholesky().map(|ch| ch.solve(&atb))
            };

            // phase 1: sculpt with the soft weight until the active set
            // settles
            prev_neg.fill(false);
            let mut iters_left = MAX_CSD_ITERATIONS;
            while iters_left > 0 {
                iters_left -= 1;
                amps_of(&x, &mut amps);
                let mut any = false;
                for (r, &a) in amps.iter().enumerate() {
                    neg[r] = a < tau;
                    any |= neg[r];
                }
                if !any || neg == prev_neg {
                    break;
                }
                prev_neg.copy_from_slice(&neg);
                match resolve(&[(&neg, lam2_soft)], &mut m) {
                    Some(next) => x = next,
                    None => break,
                }
            }
            // phase 2: keep the settled soft set anchored and squeeze the
            // strictly negative directions with the hard weight; the hard
            // set is recomputed each pass so constraints can release
            let anchor = prev_neg.clone();
            let mut hard = vec![false; cmat.nrows()];
            let mut prev_hard = vec![false; cmat.nrows()];
            while iters_left > 0 {
                iters_left -= 1;
                amps_of(&x, &mut amps);
                let mut any = false;
                for (r, &a) in amps.iter().enumerate() {
                    hard[r] = a < 0.0;
                    any |= hard[r];
                }
                if !any || hard == prev_hard {
                    break;
                }
                prev_hard.copy_from_slice(&hard);
                match resolve(&[(&anchor, lam2_soft), (&hard, lam2_hard)], &mut m) {
                    Some(next) => x = next,
                    None => break,
                }
            }
            for (o, v) in slot.iter_mut().zip(x.iter()) {
                *o = *v;
            }
        }
    });

    FodVolume::new(lmax, Series::new(dwi.grid().clone(), nc, data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::ImageGrid;
    use crate::sh::sh_eval;
    use crate::sphere::{axis_angle_deg, find_peaks};
    use nalgebra::Vector3;

    const B: f64 = 1000.0;
    const LA: f64 = 1.7e-3;
    const LR: f64 = 0.3e-3;

    fn fiber_signal(dir: &Vector3<f64>, fiber: &Vector3<f64>) -> f64 {
        let c = dir.dot(fiber);
        (-B * (LR + (LA - LR) * c * c)).exp()
    }

    fn make_gtab(n_dirs: usize) -> GradientTable {
        let dirs = SphereSampling::fibonacci_hemisphere(n_dirs);
        let mut bvals = vec![0.0];
        let mut bvecs = vec![Vector3::zeros()];
        for d in dirs.directions() {
            bvals.push(B);
            bvecs.push(*d);
        }
        GradientTable::new(bvals, bvecs).unwrap()
    }

    fn one_voxel_dwi(signals: Vec<f64>) -> (SeriesVolume, BinaryMask) {
        let g = ImageGrid::axis_aligned([1, 1, 1], [1.0; 3], [0.0; 3]);
        let s = Series::new(g.clone(), signals.len(), signals).unwrap();
        let m = BinaryMask::filled(g, true);
        (s, m)
    }

    fn signals_for(gtab: &GradientTable, f: impl Fn(&Vector3<f64>) -> f64) -> Vec<f64> {
        gtab.bvals()
            .iter()
            .zip(gtab.bvecs())
            .map(|(&b, v)| if b == 0.0 { 1.0 } else { f(v) })
            .collect()
    }

    #[test]
    fn single_fiber_peak_along_z() {
        let lmax = 6;
        let gtab = make_gtab(48);
        let response = Response::from_tensor_model(lmax, B, LA, LR).unwrap();
        let z = Vector3::z();
        let (dwi, mask) = one_voxel_dwi(signals_for(&gtab, |d| fiber_signal(d, &z)));
        let fod = fit_csd(&dwi, &gtab, &response, lmax, &mask).unwrap();
        let sh = fod.coeffs_at(0);
        let peaks = find_peaks(&|d| sh_eval(&sh, d), 2000, 25.0, 0.3, 3);
        assert!(!peaks.is_empty());
        assert!(
            axis_angle_deg(&peaks[0].0, &z) < 2.0,
            "peak off z by {} deg",
            axis_angle_deg(&peaks[0].0, &z)
        );
        // amplitude negativity bounded after convergence
        let s = SphereSampling::fibonacci_hemisphere(REORIENT_DIRECTIONS);
        let amps: Vec<f64> = s.directions().iter().map(|d| sh_eval(&sh, d)).collect();
        let max = amps.iter().cloned().fold(f64::MIN, f64::max);
        let min = amps.iter().cloned().fold(f64::MAX, f64::min);
        assert!(min >= -1e-3 * max, "negativity {min} vs max {max}");
    }

    #[test]
    fn isotropic_signal_gives_isotropic_fod() {
        let lmax = 6;
        let gtab = make_gtab(48);
        let response = Response::from_tensor_model(lmax, B, LA, LR).unwrap();
        let iso = (-B * 0.7e-3f64).exp();
        let (dwi, mask) = one_voxel_dwi(signals_for(&gtab, |_| iso));
        let fod = fit_csd(&dwi, &gtab, &response, lmax, &mask).unwrap();
        let sh = fod.coeffs_at(0);
        let s = SphereSampling::fibonacci_hemisphere(800);
        let amps: Vec<f64> = s.directions().iter().map(|d| sh_eval(&sh, d)).collect();
        let mean = amps.iter().sum::<f64>() / amps.len() as f64;
        let sd = (amps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / amps.len() as f64).sqrt();
        assert!(sd <= 0.01 * mean.abs(), "sd {sd} vs mean {mean}");
    }

    #[test]
    fn crossing_fibers_two_peaks() {
        let lmax = 8;
        let gtab = make_gtab(64);
        let response = Response::from_tensor_model(lmax, B, LA, LR).unwrap();
        let fx = Vector3::x();
        let fy = Vector3::y();
        let (dwi, mask) = one_voxel_dwi(signals_for(&gtab, |d| {
            0.5 * fiber_signal(d, &fx) + 0.5 * fiber_signal(d, &fy)
        }));
        let fod = fit_csd(&dwi, &gtab, &response, lmax, &mask).unwrap();
        let sh = fod.coeffs_at(0);
        let peaks = find_peaks(&|d| sh_eval(&sh, d), 3000, 30.0, 0.4, 3);
        assert!(peaks.len() >= 2, "found {} peaks", peaks.len());
        let err_x = axis_angle_deg(&peaks[0].0, &fx).min(axis_angle_deg(&peaks[1].0, &fx));
        let err_y = axis_angle_deg(&peaks[0].0, &fy).min(axis_angle_deg(&peaks[1].0, &fy));
        assert!(err_x < 5.0 && err_y < 5.0, "peak errors {err_x} / {err_y} deg");
    }

    #[test]
    fn multi_shell_rejected() {
        let dirs = SphereSampling::fibonacci_hemisphere(12);
        let mut bvals = vec![0.0];
        let mut bvecs = vec![Vector3::zeros()];
        for (i, d) in dirs.directions().iter().enumerate() {
            bvals.push(if i % 2 == 0 { 1000.0 } else { 2000.0 });
            bvecs.push(*d);
        }
        let gtab = GradientTable::new(bvals, bvecs).unwrap();
        let response = Response::from_tensor_model(4, B, LA, LR).unwrap();
        let (dwi, mask) = one_voxel_dwi(vec![1.0; gtab.len()]);
        assert!(matches!(
            fit_csd(&dwi, &gtab, &response, 4, &mask),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn empty_mask_rejected() {
        let gtab = make_gtab(16);
        let response = Response::from_tensor_model(4, B, LA, LR).unwrap();
        let (dwi, mut mask) = one_voxel_dwi(vec![1.0; gtab.len()]);
        mask.data_mut()[0] = false;
        assert!(matches!(
            fit_csd(&dwi, &gtab, &response, 4, &mask),
            Err(Error::Input(_))
        ));
    }
// scratch diagnostic appended as a test
}
