//! Unit-sphere direction sets and peak search.

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// A set of distinct unit directions covering one hemisphere (sufficient for
/// antipodally symmetric functions).
#[derive(Debug, Clone, PartialEq)]
pub struct SphereSampling {
    directions: Vec<Vector3<f64>>,
}

impl SphereSampling {
    pub fn new(directions: Vec<Vector3<f64>>) -> Result<Self> {
        if directions.is_empty() {
            return Err(Error::Input("empty direction set".into()));
        }
        for (i, d) in directions.iter().enumerate() {
            if (d.norm() - 1.0).abs() > 1e-9 {
                return Err(Error::Input(format!("direction {i} is not unit norm: {}", d.norm())));
            }
        }
        for i in 0..directions.len() {
            for j in (i + 1)..directions.len() {
                if (directions[i] - directions[j]).norm() < 1e-12 {
                    return Err(Error::Input(format!("directions {i} and {j} coincide")));
                }
            }
        }
        Ok(Self { directions })
    }

    /// Near-uniform hemisphere set from the spherical Fibonacci spiral on
    /// `2n` full-sphere points, keeping the `n` with positive z.
    pub fn fibonacci_hemisphere(n: usize) -> Self {
        let full = 2 * n;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let mut directions = Vec::with_capacity(n);
        for i in 0..full {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / full as f64;
            if z <= 0.0 {
                continue;
            }
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            directions.push(Vector3::new(r * phi.cos(), r * phi.sin(), z));
        }
        Self { directions }
    }

    /// Full-sphere Fibonacci spiral with `n` points (used for quadrature).
    pub fn fibonacci_sphere(n: usize) -> Self {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let directions = (0..n)
            .map(|i| {
                let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                Vector3::new(r * phi.cos(), r * phi.sin(), z)
            })
            .collect();
        Self { directions }
    }

    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    pub fn directions(&self) -> &[Vector3<f64>] {
        &self.directions
    }
}

/// Angle between two axes (antipodally symmetric), in degrees.
pub fn axis_angle_deg(a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let c = (a.dot(b) / (a.norm() * b.norm())).abs().min(1.0);
    c.acos().to_degrees()
}

/// Brute-force peak extraction of an antipodally symmetric spherical
/// function: dense sampling, greedy separation, then local refinement.
///
/// Returns peaks as (direction, amplitude), amplitude descending. Peaks below
/// `rel_threshold * max_amplitude` or closer than `min_separation_deg` to an
/// accepted peak are dropped.
pub fn find_peaks(
    f: &dyn Fn(&Vector3<f64>) -> f64,
    n_dense: usize,
    min_separation_deg: f64,
    rel_threshold: f64,
    max_peaks: usize,
) -> Vec<(Vector3<f64>, f64)> {
    let sampling = SphereSampling::fibonacci_hemisphere(n_dense);
    let mut amps: Vec<(usize, f64)> = sampling
        .directions()
        .iter()
        .enumerate()
        .map(|(i, d)| (i, f(d)))
        .collect();
    amps.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    let max_amp = amps.first().map(|x| x.1).unwrap_or(0.0);
    let mut peaks: Vec<(Vector3<f64>, f64)> = Vec::new();
    for (i, amp) in amps {
        if peaks.len() >= max_peaks || amp < rel_threshold * max_amp {
            break;
        }
        let d = sampling.directions()[i];
        if peaks.iter().any(|(p, _)| axis_angle_deg(p, &d) < min_separation_deg) {
            continue;
        }
        let refined = refine_peak(f, &d);
        let refined_amp = f(&refined);
        if peaks.iter().any(|(p, _)| axis_angle_deg(p, &refined) < min_separation_deg) {
            continue;
        }
        peaks.push((refined, refined_amp));
    }
    peaks.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    peaks
}

/// Hill-climb on the sphere with a shrinking angular step.
fn refine_peak(f: &dyn Fn(&Vector3<f64>) -> f64, start: &Vector3<f64>) -> Vector3<f64> {
    let mut dir = *start;
    let mut best = f(&dir);
    let mut step = 2f64.to_radians();
    while step > 0.005f64.to_radians() {
        // local tangent basis
        let helper = if dir.z.abs() < 0.9 { Vector3::z() } else { Vector3::x() };
        let t1 = dir.cross(&helper).normalize();
        let t2 = dir.cross(&t1).normalize();
        let mut improved = false;
        for cand in [
            (dir + t1 * step.sin()).normalize(),
            (dir - t1 * step.sin()).normalize(),
            (dir + t2 * step.sin()).normalize(),
            (dir - t2 * step.sin()).normalize(),
        ] {
            let v = f(&cand);
            if v > best {
                best = v;
                dir = cand;
                improved = true;
            }
        }
        if !improved {
            step *= 0.5;
        }
    }
    dir
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hemisphere_count_and_norms() {
        let s = SphereSampling::fibonacci_hemisphere(300);
        assert_eq!(s.len(), 300);
        for d in s.directions() {
            assert!((d.norm() - 1.0).abs() < 1e-12);
            assert!(d.z > 0.0);
        }
    }

    #[test]
    fn rejects_duplicate_directions() {
        let d = Vector3::new(0.0, 0.0, 1.0);
        assert!(SphereSampling::new(vec![d, d]).is_err());
    }

    #[test]
    fn near_uniform_coverage() {
        // nearest-neighbor angle should be tight around the expected spacing
        let s = SphereSampling::fibonacci_hemisphere(256);
        let mut min_angles = Vec::new();
        for (i, a) in s.directions().iter().enumerate() {
            let mut best = f64::INFINITY;
            for (j, b) in s.directions().iter().enumerate() {
                if i != j {
                    best = best.min(axis_angle_deg(a, b));
                }
            }
            min_angles.push(best);
        }
        let mean: f64 = min_angles.iter().sum::<f64>() / min_angles.len() as f64;
        assert!(mean > 3.0 && mean < 9.0, "mean nn angle {mean}");
    }

    #[test]
    fn peak_search_finds_axis() {
        let target = Vector3::new(0.3, -0.5, 0.8).normalize();
        let f = move |d: &Vector3<f64>| d.dot(&target).powi(2);
        let peaks = find_peaks(&f, 1000, 20.0, 0.3, 4);
        assert!(!peaks.is_empty());
        assert!(axis_angle_deg(&peaks[0].0, &target) < 0.5);
    }
}
