//! Real even-order spherical harmonics: basis evaluation, FOD volumes,
//! reorientation under local affine maps, and axially symmetric response
//! functions.
//!
//! Basis convention: coefficients are ordered `(l, m)` with even `l`
//! ascending and `m = -l..l`. For a direction with polar angle theta and
//! azimuth phi,
//!
//! ```text
//! Y(l, 0)  = K(l, 0) P_l^0(cos theta)
//! Y(l, m)  = sqrt(2) K(l, m)  P_l^m(cos theta)  cos(m phi)   for m > 0
//! Y(l, -m) = sqrt(2) K(l, m)  P_l^m(cos theta)  sin(m phi)   for m > 0
//! ```
//!
//! with `K(l, m) = sqrt((2l+1)/(4 pi) (l-m)!/(l+m)!)` and associated Legendre
//! functions including the Condon-Shortley phase. The basis is orthonormal
//! over the full sphere.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::sphere::SphereSampling;
use crate::volume::Series;
use crate::{ImageGrid, SeriesVolume};

/// Number of even-order coefficients up to `lmax`.
pub fn n_coeffs(lmax: usize) -> usize {
    (lmax + 1) * (lmax + 2) / 2
}

/// Coefficient index of `(l, m)`; l even, -l <= m <= l.
pub fn coeff_index(l: usize, m: i64) -> usize {
    debug_assert!(l % 2 == 0 && m.unsigned_abs() as usize <= l);
    // sum over even l' < l of (2 l' + 1) = l (l - 1) / 2 ... computed directly
    let below: usize = (0..l).step_by(2).map(|lp| 2 * lp + 1).sum();
    below + (m + l as i64) as usize
}

/// Real spherical-harmonics coefficients up to even order `lmax`.
#[derive(Debug, Clone, PartialEq)]
pub struct SHCoefficients {
    lmax: usize,
    coeffs: Vec<f64>,
}

impl SHCoefficients {
    pub fn new(lmax: usize, coeffs: Vec<f64>) -> Result<Self> {
        if lmax % 2 != 0 {
            return Err(Error::Parameter(format!("lmax must be even, got {lmax}")));
        }
        if coeffs.len() != n_coeffs(lmax) {
            return Err(Error::Input(format!(
                "expected {} coefficients for lmax {lmax}, got {}",
                n_coeffs(lmax),
                coeffs.len()
            )));
        }
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::Numeric("non-finite SH coefficient".into()));
        }
        Ok(Self { lmax, coeffs })
    }

    pub fn zeros(lmax: usize) -> Self {
        Self { lmax, coeffs: vec![0.0; n_coeffs(lmax)] }
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn coeffs_mut(&mut self) -> &mut [f64] {
        &mut self.coeffs
    }
}

/// Associated Legendre table P_l^m(x) for all l <= lmax, 0 <= m <= l,
/// Condon-Shortley phase included. Indexed by [l][m].
fn legendre_table(lmax: usize, x: f64) -> Vec<Vec<f64>> {
    let mut p = vec![vec![0.0; lmax + 1]; lmax + 1];
    let somx2 = ((1.0 - x) * (1.0 + x)).max(0.0).sqrt();
    p[0][0] = 1.0;
    for m in 1..=lmax {
        // P_m^m = (-1)^m (2m-1)!! (1-x^2)^{m/2}
        p[m][m] = -p[m - 1][m - 1] * (2.0 * m as f64 - 1.0) * somx2;
    }
    for m in 0..lmax {
        // P_{m+1}^m = x (2m+1) P_m^m
        p[m + 1][m] = x * (2.0 * m as f64 + 1.0) * p[m][m];
    }
    for m in 0..=lmax {
        for l in (m + 2)..=lmax {
            let lf = l as f64;
            let mf = m as f64;
            p[l][m] = ((2.0 * lf - 1.0) * x * p[l - 1][m] - (lf + mf - 1.0) * p[l - 2][m]) / (lf - mf);
        }
    }
    p
}

fn norm_k(l: usize, m: usize) -> f64 {
    let mut ratio = 1.0;
    for i in (l - m + 1)..=(l + m) {
        ratio *= i as f64;
    }
    ((2.0 * l as f64 + 1.0) / (4.0 * std::f64::consts::PI) / ratio).sqrt()
}

/// Evaluate all basis functions at one direction into `out`
/// (length `n_coeffs(lmax)`).
pub fn eval_basis_into(lmax: usize, dir: &Vector3<f64>, out: &mut [f64]) {
    debug_assert_eq!(out.len(), n_coeffs(lmax));
    let ct = dir.z.clamp(-1.0, 1.0);
    let phi = dir.y.atan2(dir.x);
    let p = legendre_table(lmax, ct);
    let sqrt2 = std::f64::consts::SQRT_2;
    let mut idx = 0;
    for l in (0..=lmax).step_by(2) {
        for m in -(l as i64)..=(l as i64) {
            let ma = m.unsigned_abs() as usize;
            let k = norm_k(l, ma);
            out[idx] = if m == 0 {
                k * p[l][0]
            } else if m > 0 {
                sqrt2 * k * p[l][ma] * (ma as f64 * phi).cos()
            } else {
                sqrt2 * k * p[l][ma] * (ma as f64 * phi).sin()
            };
            idx += 1;
        }
    }
}

/// Basis matrix `[n_dirs x n_coeffs]` for even orders up to `lmax`.
pub fn sh_basis(lmax: usize, sampling: &SphereSampling) -> Result<DMatrix<f64>> {
    if lmax % 2 != 0 {
        return Err(Error::Parameter(format!("lmax must be even, got {lmax}")));
    }
    let nc = n_coeffs(lmax);
    let nd = sampling.len();
    let mut m = DMatrix::zeros(nd, nc);
    let mut row = vec![0.0; nc];
    for (i, d) in sampling.directions().iter().enumerate() {
        eval_basis_into(lmax, d, &mut row);
        for (j, v) in row.iter().enumerate() {
            m[(i, j)] = *v;
        }
    }
    Ok(m)
}

/// Amplitude of an SH function along a unit direction.
pub fn sh_eval(sh: &SHCoefficients, direction: &Vector3<f64>) -> f64 {
    let mut basis = vec![0.0; n_coeffs(sh.lmax)];
    eval_basis_into(sh.lmax, direction, &mut basis);
    basis.iter().zip(&sh.coeffs).map(|(b, c)| b * c).sum()
}

/// Per-voxel SH coefficients stored as a channel series.
#[derive(Debug, Clone)]
pub struct FodVolume {
    lmax: usize,
    sh: Series<f64>,
}

impl FodVolume {
    pub fn new(lmax: usize, sh: Series<f64>) -> Result<Self> {
        if lmax % 2 != 0 {
            return Err(Error::Parameter(format!("lmax must be even, got {lmax}")));
        }
        if sh.channels() != n_coeffs(lmax) {
            return Err(Error::Input(format!(
                "FOD series has {} channels but lmax {lmax} needs {}",
                sh.channels(),
                n_coeffs(lmax)
            )));
        }
        Ok(Self { lmax, sh })
    }

    pub fn zeros(lmax: usize, grid: ImageGrid) -> Self {
        let nc = n_coeffs(lmax);
        Self { lmax, sh: Series::filled(grid, nc, 0.0) }
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn series(&self) -> &SeriesVolume {
        &self.sh
    }

    pub fn series_mut(&mut self) -> &mut SeriesVolume {
        &mut self.sh
    }

    pub fn into_series(self) -> SeriesVolume {
        self.sh
    }

    pub fn grid(&self) -> &ImageGrid {
        self.sh.grid()
    }

    pub fn coeffs_at(&self, idx: usize) -> SHCoefficients {
        SHCoefficients { lmax: self.lmax, coeffs: self.sh.voxel(idx).to_vec() }
    }

    /// The l=0 channel as a scalar volume (rotation-invariant component).
    pub fn l0_volume(&self) -> crate::ScalarVolume {
        self.sh.channel(0)
    }
}

/// Shared machinery for amplitude sampling and least-squares re-fitting on a
/// fixed 300-direction set. Read-only after construction.
#[derive(Debug, Clone)]
pub struct ReorientContext {
    lmax: usize,
    sampling: SphereSampling,
    basis: DMatrix<f64>,
}

pub const REORIENT_DIRECTIONS: usize = 300;

impl ReorientContext {
    pub fn new(lmax: usize) -> Result<Self> {
        let sampling = SphereSampling::fibonacci_hemisphere(REORIENT_DIRECTIONS);
        let basis = sh_basis(lmax, &sampling)?;
        Ok(Self { lmax, sampling, basis })
    }

    pub fn lmax(&self) -> usize {
        self.lmax
    }

    pub fn n_coeffs(&self) -> usize {
        n_coeffs(self.lmax)
    }

    /// Scratch space for [`ReorientContext::reorient_into`].
    pub fn workspace(&self) -> ReorientWorkspace {
        let nc = self.n_coeffs();
        ReorientWorkspace {
            amps: vec![0.0; REORIENT_DIRECTIONS],
            row: vec![0.0; nc],
            ata: DMatrix::zeros(nc, nc),
            atb: DVector::zeros(nc),
        }
    }

    /// Reorient SH coefficients under a local affine map: amplitudes sampled
    /// on the fixed direction set are relocated from `d` to
    /// `normalize(J * d)` and re-fit by least squares.
    pub fn reorient_into(
        &self,
        coeffs: &[f64],
        local_affine: &Matrix3<f64>,
        out: &mut [f64],
        ws: &mut ReorientWorkspace,
    ) -> Result<()> {
        let det = local_affine.determinant();
        if det.abs() < 1e-12 {
            return Err(Error::Numeric(format!("degenerate Jacobian (det = {det:e}) in FOD reorientation")));
        }
        let nc = self.n_coeffs();
        debug_assert_eq!(coeffs.len(), nc);
        debug_assert_eq!(out.len(), nc);

        for (i, amp) in ws.amps.iter_mut().enumerate() {
            let mut a = 0.0;
            for c in 0..nc {
                a += self.basis[(i, c)] * coeffs[c];
            }
            *amp = a;
        }
        ws.ata.fill(0.0);
        ws.atb.fill(0.0);
        for (i, d) in self.sampling.directions().iter().enumerate() {
            let mapped = (local_affine * d).normalize();
            eval_basis_into(self.lmax, &mapped, &mut ws.row);
            let a = ws.amps[i];
            for r in 0..nc {
                ws.atb[r] += ws.row[r] * a;
                for c in r..nc {
                    ws.ata[(r, c)] += ws.row[r] * ws.row[c];
                }
            }
        }
        for r in 0..nc {
            for c in 0..r {
                ws.ata[(r, c)] = ws.ata[(c, r)];
            }
            // tiny ridge keeps strongly sheared fits well-posed
            ws.ata[(r, r)] += 1e-10;
        }
        let chol = ws
            .ata
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numeric("reorientation normal equations not positive definite".into()))?;
        let x = chol.solve(&ws.atb);
        for (o, v) in out.iter_mut().zip(x.iter()) {
            *o = *v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ReorientWorkspace {
    amps: Vec<f64>,
    row: Vec<f64>,
    ata: DMatrix<f64>,
    atb: DVector<f64>,
}

/// Reorient a single set of SH coefficients (convenience wrapper).
pub fn reorient_fod(sh: &SHCoefficients, local_affine: &Matrix3<f64>) -> Result<SHCoefficients> {
    let ctx = ReorientContext::new(sh.lmax)?;
    let mut ws = ctx.workspace();
    let mut out = vec![0.0; n_coeffs(sh.lmax)];
    ctx.reorient_into(&sh.coeffs, local_affine, &mut out, &mut ws)?;
    SHCoefficients::new(sh.lmax, out)
}

/// Axially symmetric convolution kernel: one multiplier per even order.
/// The forward model maps FOD coefficients `f_lm` to signal coefficients
/// `r_l * f_lm`.
#[derive(Debug, Clone, PartialEq)]
pub struct Response {
    per_l: Vec<f64>,
}

impl Response {
    pub fn new(per_l: Vec<f64>) -> Result<Self> {
        if per_l.is_empty() || per_l.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("response must be a non-empty list of finite values".into()));
        }
        Ok(Self { per_l })
    }

    /// Multiplier for even order `l`.
    pub fn for_l(&self, l: usize) -> Option<f64> {
        self.per_l.get(l / 2).copied()
    }

    pub fn max_l(&self) -> usize {
        (self.per_l.len() - 1) * 2
    }

    pub fn values(&self) -> &[f64] {
        &self.per_l
    }

    /// Kernel of a prolate tensor fiber along z at b-value `b`:
    /// signal s(u) = exp(-b (lr + (la - lr) cos^2 theta)), projected onto the
    /// m = 0 harmonics and divided by the delta-function coefficients.
    pub fn from_tensor_model(lmax: usize, b: f64, lambda_axial: f64, lambda_radial: f64) -> Result<Self> {
        if lmax % 2 != 0 {
            return Err(Error::Parameter(format!("lmax must be even, got {lmax}")));
        }
        let mut per_l = Vec::with_capacity(lmax / 2 + 1);
        for l in (0..=lmax).step_by(2) {
            // s_l0 = 2 pi Int_{-1}^{1} s(mu) Y_l0(mu) dmu, composite Simpson
            let n = 4096;
            let h = 2.0 / n as f64;
            let f = |mu: f64| {
                let s = (-b * (lambda_radial + (lambda_axial - lambda_radial) * mu * mu)).exp();
                let p = legendre_table(l, mu);
                s * norm_k(l, 0) * p[l][0]
            };
            let mut integral = f(-1.0) + f(1.0);
            for i in 1..n {
                let mu = -1.0 + i as f64 * h;
                integral += if i % 2 == 1 { 4.0 } else { 2.0 } * f(mu);
            }
            integral *= h / 3.0 * 2.0 * std::f64::consts::PI;
            // delta along z has f_l0 = sqrt((2l+1)/(4 pi))
            let delta = ((2.0 * l as f64 + 1.0) / (4.0 * std::f64::consts::PI)).sqrt();
            per_l.push(integral / delta);
        }
        Response::new(per_l)
    }

    /// One value per line, even orders ascending.
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = self.per_l.iter().map(|v| format!("{v:.17e}\n")).collect::<String>();
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut per_l = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            per_l.push(
                line.parse::<f64>()
                    .map_err(|_| Error::format(path, format!("not a number: {line:?}")))?,
            );
        }
        Response::new(per_l)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use nalgebra::Rotation3;

    const Y00: f64 = 0.28209479177387814; // 1 / (2 sqrt(pi))

    #[test]
    fn l0_column_is_constant() {
        let s = SphereSampling::fibonacci_hemisphere(50);
        let b = sh_basis(4, &s).unwrap();
        for i in 0..s.len() {
            assert_abs_diff_eq!(b[(i, 0)], Y00, epsilon = 1e-12);
        }
    }

    #[test]
    fn coefficient_count() {
        let s = SphereSampling::fibonacci_hemisphere(20);
        assert_eq!(sh_basis(4, &s).unwrap().ncols(), 15);
        assert_eq!(sh_basis(0, &s).unwrap().ncols(), 1);
        assert_eq!(sh_basis(8, &s).unwrap().ncols(), 45);
    }

    #[test]
    fn odd_lmax_rejected() {
        let s = SphereSampling::fibonacci_hemisphere(20);
        assert!(matches!(sh_basis(3, &s), Err(Error::Parameter(_))));
    }

    #[test]
    fn gram_matrix_near_identity() {
        // orthonormality under quadrature on a dense uniform full-sphere set
        let s = SphereSampling::fibonacci_sphere(4000);
        let b = sh_basis(6, &s).unwrap();
        let w = 4.0 * std::f64::consts::PI / s.len() as f64;
        let gram = b.transpose() * &b * w;
        for r in 0..gram.nrows() {
            for c in 0..gram.ncols() {
                let expect = if r == c { 1.0 } else { 0.0 };
                assert!(
                    (gram[(r, c)] - expect).abs() < 2e-2,
                    "gram[{r},{c}] = {}",
                    gram[(r, c)]
                );
            }
        }
    }

    #[test]
    fn eval_constant_linearity_antipodal() {
        let mut c = SHCoefficients::zeros(4);
        c.coeffs_mut()[0] = 1.0;
        let d = Vector3::new(0.6, -0.64, 0.48).normalize();
        assert_abs_diff_eq!(sh_eval(&c, &d), Y00, epsilon = 1e-12);

        let mut x = SHCoefficients::zeros(4);
        let mut y = SHCoefficients::zeros(4);
        for i in 0..15 {
            x.coeffs_mut()[i] = (i as f64 * 0.37).sin();
            y.coeffs_mut()[i] = (i as f64 * 1.1).cos();
        }
        let mut z = SHCoefficients::zeros(4);
        for i in 0..15 {
            z.coeffs_mut()[i] = 2.0 * x.coeffs()[i] - 0.5 * y.coeffs()[i];
        }
        assert_abs_diff_eq!(
            sh_eval(&z, &d),
            2.0 * sh_eval(&x, &d) - 0.5 * sh_eval(&y, &d),
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(sh_eval(&x, &d), sh_eval(&x, &(-d)), epsilon = 1e-12);
    }

    /// Least-squares SH fit of a sampled spherical function (test helper).
    fn fit_sh(lmax: usize, f: &dyn Fn(&Vector3<f64>) -> f64) -> SHCoefficients {
        let s = SphereSampling::fibonacci_hemisphere(600);
        let b = sh_basis(lmax, &s).unwrap();
        let vals = DVector::from_iterator(s.len(), s.directions().iter().map(|d| f(d)));
        let x = (b.transpose() * &b)
            .cholesky()
            .unwrap()
            .solve(&(b.transpose() * vals));
        SHCoefficients::new(lmax, x.iter().copied().collect()).unwrap()
    }

    #[test]
    fn reorient_identity_is_noop() {
        let peak = Vector3::new(0.0, 0.0, 1.0);
        let sh = fit_sh(4, &|d: &Vector3<f64>| d.dot(&peak).powi(4));
        let out = reorient_fod(&sh, &Matrix3::identity()).unwrap();
        for (a, b) in sh.coeffs().iter().zip(out.coeffs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-6);
        }
    }

    #[test]
    fn reorient_rotates_peak() {
        let peak = Vector3::new(0.0, 0.0, 1.0);
        let sh = fit_sh(6, &|d: &Vector3<f64>| d.dot(&peak).abs().powf(8.0));
        let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.7);
        let out = reorient_fod(&sh, rot.matrix()).unwrap();
        let expected = rot * peak;
        let peaks = crate::sphere::find_peaks(&|d| sh_eval(&out, d), 2000, 25.0, 0.5, 2);
        assert!(!peaks.is_empty());
        assert!(
            crate::sphere::axis_angle_deg(&peaks[0].0, &expected) < 2.0,
            "peak off by {} deg",
            crate::sphere::axis_angle_deg(&peaks[0].0, &expected)
        );
    }

    #[test]
    fn reorient_preserves_isotropy() {
        let mut c = SHCoefficients::zeros(4);
        c.coeffs_mut()[0] = 2.0;
        let j = Matrix3::new(1.3, 0.2, 0.0, -0.1, 0.8, 0.05, 0.0, 0.1, 1.1);
        let out = reorient_fod(&c, &j).unwrap();
        // still isotropic: amplitude variation <= 1% of mean
        let s = SphereSampling::fibonacci_hemisphere(500);
        let amps: Vec<f64> = s.directions().iter().map(|d| sh_eval(&out, d)).collect();
        let mean = amps.iter().sum::<f64>() / amps.len() as f64;
        let max_dev = amps.iter().map(|a| (a - mean).abs()).fold(0.0, f64::max);
        assert!(max_dev <= 0.01 * mean.abs(), "deviation {max_dev} vs mean {mean}");
    }

    #[test]
    fn reorient_rotation_preserves_l0() {
        let sh = fit_sh(4, &|d: &Vector3<f64>| 1.0 + d.z * d.z);
        let rot = Rotation3::from_axis_angle(&Vector3::x_axis(), 1.1);
        let out = reorient_fod(&sh, rot.matrix()).unwrap();
        assert_abs_diff_eq!(out.coeffs()[0], sh.coeffs()[0], epsilon = 1e-6);
    }

    #[test]
    fn reorient_composition() {
        let sh = fit_sh(4, &|d: &Vector3<f64>| d.z.powi(2) + 0.3 * d.x.abs());
        let r1 = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.5);
        let r2 = Rotation3::from_axis_angle(&Vector3::x_axis(), -0.3);
        let step = reorient_fod(&reorient_fod(&sh, r1.matrix()).unwrap(), r2.matrix()).unwrap();
        let combined = reorient_fod(&sh, &(r2.matrix() * r1.matrix())).unwrap();
        for (a, b) in step.coeffs().iter().zip(combined.coeffs()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-3);
        }
    }

    #[test]
    fn reorient_singular_matrix_is_error() {
        let c = SHCoefficients::zeros(4);
        let j = Matrix3::zeros();
        assert!(matches!(reorient_fod(&c, &j), Err(Error::Numeric(_))));
    }

    #[test]
    fn response_roundtrip_and_b0_limit() {
        let r = Response::from_tensor_model(6, 1000.0, 1.7e-3, 0.3e-3).unwrap();
        assert_eq!(r.values().len(), 4);
        // l=0 term: mean signal over the sphere, scaled; positive and < 1
        assert!(r.for_l(0).unwrap() > 0.0);
        // higher orders decay
        assert!(r.for_l(0).unwrap() > r.for_l(2).unwrap().abs());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("response.txt");
        r.save(&p).unwrap();
        let r2 = Response::load(&p).unwrap();
        for (a, b) in r.values().iter().zip(r2.values()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn coeff_index_layout() {
        assert_eq!(coeff_index(0, 0), 0);
        assert_eq!(coeff_index(2, -2), 1);
        assert_eq!(coeff_index(2, 0), 3);
        assert_eq!(coeff_index(2, 2), 5);
        assert_eq!(coeff_index(4, -4), 6);
        assert_eq!(coeff_index(4, 4), 14);
    }
}
