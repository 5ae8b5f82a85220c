//! Per-tract statistics, overlap metrics, hypothesis tests, and reports.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::{Boundary, Interp};
use crate::{BinaryMask, ScalarVolume};

// ---------------------------------------------------------------------------
// scalar summaries

/// Arithmetic mean of a metric volume over a mask.
pub fn mean_metric(metric: &ScalarVolume, mask: &BinaryMask) -> Result<f64> {
    metric.grid().require_same(mask.grid(), "mean_metric")?;
    let mut sum = 0.0;
    let mut c = 0.0;
    let mut count = 0usize;
    for (v, &m) in metric.data().iter().zip(mask.data()) {
        if m {
            // Kahan: tract means feed paired differences, keep them stable
            let y = v - c;
            let t = sum + y;
            c = (t - sum) - y;
            sum = t;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyRegion("mean_metric over an empty mask".into()));
    }
    Ok(sum / count as f64)
}

/// Key for per-tract, per-subject measurements.
pub type TractSubject = (String, String);

/// Per-tract mean over subjects of |a - b| between two measurement maps
/// keyed by (tract, subject).
pub fn delta_fa(
    values_a: &BTreeMap<TractSubject, f64>,
    values_b: &BTreeMap<TractSubject, f64>,
) -> Result<BTreeMap<String, f64>> {
    let keys_a: BTreeSet<_> = values_a.keys().collect();
    let keys_b: BTreeSet<_> = values_b.keys().collect();
    if keys_a != keys_b {
        let missing: Vec<String> = keys_a
            .symmetric_difference(&keys_b)
            .map(|(t, s)| format!("({t}, {s})"))
            .collect();
        return Err(Error::Input(format!(
            "mismatched (tract, subject) keys: {}",
            missing.join(", ")
        )));
    }
    let per_subject = delta_per_subject(values_a, values_b)?;
    let mut out = BTreeMap::new();
    for (tract, diffs) in per_subject {
        let mean = diffs.values().sum::<f64>() / diffs.len() as f64;
        out.insert(tract, mean);
    }
    Ok(out)
}

/// |a - b| per (tract, subject), grouped by tract.
pub fn delta_per_subject(
    values_a: &BTreeMap<TractSubject, f64>,
    values_b: &BTreeMap<TractSubject, f64>,
) -> Result<BTreeMap<String, BTreeMap<String, f64>>> {
    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for ((tract, subject), &a) in values_a {
        let Some(&b) = values_b.get(&(tract.clone(), subject.clone())) else {
            return Err(Error::Input(format!("missing value for ({tract}, {subject}) in second set")));
        };
        out.entry(tract.clone()).or_default().insert(subject.clone(), (a - b).abs());
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Student-t machinery

/// Result of a t test.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p: f64,
    pub dof: f64,
}

/// Lanczos approximation (g = 7).
fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 9] = [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ];
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut a = COEF[0];
        let t = x + 7.5;
        for (i, c) in COEF.iter().enumerate().skip(1) {
            a += c / (x + i as f64);
        }
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
    }
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const MAXIT: usize = 500;
    const EPS: f64 = 3e-16;
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=MAXIT {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn betai(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let bt = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln()).exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a t statistic with `dof` degrees of freedom.
pub fn t_two_sided_p(t: f64, dof: f64) -> f64 {
    betai(0.5 * dof, 0.5, dof / (dof + t * t)).clamp(0.0, 1.0)
}

/// One-sample t test of the differences against zero mean.
pub fn paired_t_test(diffs: &[f64]) -> Result<TTest> {
    let n = diffs.len();
    if n < 2 {
        return Err(Error::Input(format!("paired t test needs n >= 2, got {n}")));
    }
    let nf = n as f64;
    let mean = diffs.iter().sum::<f64>() / nf;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    if var <= 0.0 {
        return Err(Error::DegenerateSample("zero variance in paired differences".into()));
    }
    let sd = var.sqrt();
    let t = mean / (sd / nf.sqrt());
    let dof = nf - 1.0;
    Ok(TTest { t, p: t_two_sided_p(t, dof), dof })
}

/// Welch's two-sample t test with Welch-Satterthwaite degrees of freedom.
pub fn two_sample_t_test(group_a: &[f64], group_b: &[f64]) -> Result<TTest> {
    let (na, nb) = (group_a.len(), group_b.len());
    if na < 2 || nb < 2 {
        return Err(Error::Input(format!("each group needs n >= 2, got {na} and {nb}")));
    }
    let mean = |g: &[f64]| g.iter().sum::<f64>() / g.len() as f64;
    let var = |g: &[f64], m: f64| g.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (g.len() as f64 - 1.0);
    let (ma, mb) = (mean(group_a), mean(group_b));
    let (va, vb) = (var(group_a, ma), var(group_b, mb));
    if va <= 0.0 && vb <= 0.0 {
        return Err(Error::DegenerateSample("zero variance in both groups".into()));
    }
    let (naf, nbf) = (na as f64, nb as f64);
    let se2 = va / naf + vb / nbf;
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2
        / ((va / naf).powi(2) / (naf - 1.0) + (vb / nbf).powi(2) / (nbf - 1.0));
    Ok(TTest { t, p: t_two_sided_p(t, dof), dof })
}

// ---------------------------------------------------------------------------
// overlap metrics

/// Dice similarity 2|A n B| / (|A| + |B|); 1.0 when both masks are empty.
pub fn dice(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.grid().require_same(b.grid(), "dice")?;
    let mut inter = 0usize;
    let mut na = 0usize;
    let mut nb = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        log::warn!("dice of two empty masks, defined as 1.0");
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (na + nb) as f64)
}

/// Mask voxels with at least one six-connected neighbor outside the mask
/// (out-of-grid counts as outside).
pub fn boundary_voxels(mask: &BinaryMask) -> Vec<usize> {
    let grid = mask.grid();
    let dims = grid.dims();
    let mut out = Vec::new();
    for idx in 0..grid.n_voxels() {
        if !mask.data()[idx] {
            continue;
        }
        let [i, j, k] = grid.coords(idx);
        let coord = [i as i64, j as i64, k as i64];
        let mut is_boundary = false;
        'nb: for a in 0..3 {
            for s in [-1i64, 1] {
                let mut c = coord;
                c[a] += s;
                if c[a] < 0 || c[a] >= dims[a] as i64 {
                    is_boundary = true;
                    break 'nb;
                }
                if !mask.data()[grid.index(c[0] as usize, c[1] as usize, c[2] as usize)] {
                    is_boundary = true;
                    break 'nb;
                }
            }
        }
        if is_boundary {
            out.push(idx);
        }
    }
    out
}

/// Exact squared Euclidean distance transform to the seed voxels, with
/// anisotropic spacing (mm), by per-axis lower-envelope passes.
pub fn squared_edt(grid: &crate::ImageGrid, seeds: &[usize]) -> Vec<f64> {
    let n = grid.n_voxels();
    let mut d = vec![f64::INFINITY; n];
    for &s in seeds {
        d[s] = 0.0;
    }
    let dims = grid.dims();
    let sp = grid.spacing();
    for axis in 0..3 {
        let h = sp[axis];
        let len = dims[axis];
        if len == 1 {
            continue;
        }
        let (a1, a2) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut f = vec![0.0f64; len];
        let mut out = vec![0.0f64; len];
        let mut v = vec![0usize; len];
        let mut z = vec![0.0f64; len + 1];
        for c1 in 0..dims[a1] {
            for c2 in 0..dims[a2] {
                let index_of = |q: usize| -> usize {
                    let mut c = [0usize; 3];
                    c[axis] = q;
                    c[a1] = c1;
                    c[a2] = c2;
                    grid.index(c[0], c[1], c[2])
                };
                for (q, fq) in f.iter_mut().enumerate() {
                    *fq = d[index_of(q)];
                }
                dt_1d(&f, h, &mut out, &mut v, &mut z);
                for (q, oq) in out.iter().enumerate() {
                    d[index_of(q)] = *oq;
                }
            }
        }
    }
    d
}

/// One-dimensional squared distance transform (lower envelope of parabolas),
/// skipping infinite entries.
fn dt_1d(f: &[f64], h: f64, out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        let qh = q as f64 * h;
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let r = v[k];
            let rh = r as f64 * h;
            let s = (f[q] + qh * qh - (f[r] + rh * rh)) / (2.0 * qh - 2.0 * rh);
            if s <= z[k] {
                if k == 0 {
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !started {
        out.copy_from_slice(f);
        return;
    }
    let mut k = 0usize;
    for q in 0..n {
        let qh = q as f64 * h;
        while z[k + 1] < qh {
            k += 1;
        }
        let rh = v[k] as f64 * h;
        out[q] = (qh - rh) * (qh - rh) + f[v[k]];
    }
}

/// Average symmetric surface distance in millimetres between two masks.
pub fn asd(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    a.grid().require_same(b.grid(), "asd")?;
    let ba = boundary_voxels(a);
    let bb = boundary_voxels(b);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::EmptyRegion("asd requires two non-empty masks".into()));
    }
    let da = squared_edt(a.grid(), &ba);
    let db = squared_edt(b.grid(), &bb);
    let sum_a: f64 = ba.iter().map(|&i| db[i].sqrt()).sum();
    let sum_b: f64 = bb.iter().map(|&i| da[i].sqrt()).sum();
    Ok((sum_a + sum_b) / (ba.len() + bb.len()) as f64)
}

// ---------------------------------------------------------------------------
// centerline profiles

/// Largest six-connected component of a mask.
pub fn largest_component(mask: &BinaryMask) -> BinaryMask {
    let grid = mask.grid();
    let dims = grid.dims();
    let n = grid.n_voxels();
    let mut label = vec![usize::MAX; n];
    let mut best: (usize, usize) = (0, usize::MAX); // (size, representative label)
    let mut next = 0usize;
    for start in 0..n {
        if !mask.data()[start] || label[start] != usize::MAX {
            continue;
        }
        let mut size = 0usize;
        let mut queue = VecDeque::from([start]);
        label[start] = next;
        while let Some(idx) = queue.pop_front() {
            size += 1;
            let [i, j, k] = grid.coords(idx);
            let coord = [i as i64, j as i64, k as i64];
            for a in 0..3 {
                for s in [-1i64, 1] {
                    let mut c = coord;
                    c[a] += s;
                    if c[a] < 0 || c[a] >= dims[a] as i64 {
                        continue;
                    }
                    let nb = grid.index(c[0] as usize, c[1] as usize, c[2] as usize);
                    if mask.data()[nb] && label[nb] == usize::MAX {
                        label[nb] = next;
                        queue.push_back(nb);
                    }
                }
            }
        }
        if size > best.0 {
            best = (size, next);
        }
        next += 1;
    }
    let data = (0..n).map(|i| label[i] == best.1 && best.0 > 0).collect();
    BinaryMask::new(grid.clone(), data).expect("sized")
}

fn neighbors_26(grid: &crate::ImageGrid, idx: usize) -> Vec<usize> {
    let dims = grid.dims();
    let [i, j, k] = grid.coords(idx);
    let mut out = Vec::with_capacity(26);
    for di in -1i64..=1 {
        for dj in -1i64..=1 {
            for dk in -1i64..=1 {
                if di == 0 && dj == 0 && dk == 0 {
                    continue;
                }
                let (ci, cj, ck) = (i as i64 + di, j as i64 + dj, k as i64 + dk);
                if ci < 0 || cj < 0 || ck < 0 || ci >= dims[0] as i64 || cj >= dims[1] as i64 || ck >= dims[2] as i64 {
                    continue;
                }
                out.push(grid.index(ci as usize, cj as usize, ck as usize));
            }
        }
    }
    out
}

/// Dijkstra over the mask voxels. Returns (distance, predecessor) arrays.
fn dijkstra(
    grid: &crate::ImageGrid,
    in_mask: &[bool],
    start: usize,
    edge_cost: &dyn Fn(usize, usize) -> f64,
) -> (Vec<f64>, Vec<usize>) {
    let n = in_mask.len();
    let mut dist = vec![f64::INFINITY; n];
    let mut prev = vec![usize::MAX; n];
    let mut heap = std::collections::BinaryHeap::new();
    dist[start] = 0.0;
    heap.push(std::cmp::Reverse((ordered(0.0), start)));
    while let Some(std::cmp::Reverse((d, u))) = heap.pop() {
        let d = f64::from_bits(d);
        if d > dist[u] {
            continue;
        }
        for v in neighbors_26(grid, u) {
            if !in_mask[v] {
                continue;
            }
            let nd = d + edge_cost(u, v);
            if nd < dist[v] {
                dist[v] = nd;
                prev[v] = u;
                heap.push(std::cmp::Reverse((ordered(nd), v)));
            }
        }
    }
    (dist, prev)
}

/// Total-order bit encoding for non-negative floats in the heap.
fn ordered(d: f64) -> u64 {
    d.to_bits()
}

/// Sample a metric along the tract centerline.
///
/// The centerline is the minimum-cost path between the two most geodesically
/// distant voxels of the mask's largest component, where step costs divide by
/// the interior depth so the path hugs the tract core; it is then arc-length
/// resampled to `n_samples` points and the metric is interpolated there.
pub fn centerline_profile(metric: &ScalarVolume, tract: &BinaryMask, n_samples: usize) -> Result<Vec<f64>> {
    metric.grid().require_same(tract.grid(), "centerline_profile")?;
    if n_samples < 2 {
        return Err(Error::Parameter("n_samples must be >= 2".into()));
    }
    let grid = tract.grid().clone();
    let comp = largest_component(tract);
    let comp_size = comp.count_true();
    if comp_size == 0 {
        return Err(Error::EmptyRegion("empty tract mask".into()));
    }
    if comp_size < tract.count_true() {
        log::warn!(
            "centerline_profile: disconnected mask, using largest component ({comp_size} of {} voxels)",
            tract.count_true()
        );
    }
    let in_mask = comp.data().to_vec();

    // interior depth: distance to the outside
    let outside: Vec<usize> = (0..grid.n_voxels()).filter(|&i| !in_mask[i]).collect();
    let depth = squared_edt(&grid, &outside);

    let pos = |idx: usize| -> nalgebra::Vector3<f64> {
        let [i, j, k] = grid.coords(idx);
        grid.voxel_to_mm([i as f64, j as f64, k as f64])
    };
    let length_cost = |u: usize, v: usize| (pos(u) - pos(v)).norm();
    let interior_cost = |u: usize, v: usize| {
        let d = 0.5 * (depth[u].sqrt() + depth[v].sqrt());
        (pos(u) - pos(v)).norm() / (d + 0.5)
    };

    // geodesic extremes by double sweep
    let start = in_mask.iter().position(|&b| b).expect("non-empty");
    let (dist0, _) = dijkstra(&grid, &in_mask, start, &length_cost);
    let e1 = argmax_finite(&dist0, &in_mask);
    let (dist1, _) = dijkstra(&grid, &in_mask, e1, &length_cost);
    let e2 = argmax_finite(&dist1, &in_mask);

    let (_, prev) = dijkstra(&grid, &in_mask, e1, &interior_cost);
    let mut path = vec![e2];
    let mut cur = e2;
    while cur != e1 {
        cur = prev[cur];
        if cur == usize::MAX {
            return Err(Error::Numeric("centerline path reconstruction failed".into()));
        }
        path.push(cur);
    }
    path.reverse();
    if path.len() < n_samples {
        return Err(Error::Input(format!(
            "tract is too short: centerline has {} voxels but {n_samples} samples requested",
            path.len()
        )));
    }

    // arc-length resampling of the voxel polyline
    let pts: Vec<nalgebra::Vector3<f64>> = path.iter().map(|&i| pos(i)).collect();
    let mut cum = vec![0.0f64];
    for w in pts.windows(2) {
        let l = cum.last().unwrap() + (w[1] - w[0]).norm();
        cum.push(l);
    }
    let total = *cum.last().unwrap();
    let mut out = Vec::with_capacity(n_samples);
    for s in 0..n_samples {
        let target = total * s as f64 / (n_samples - 1) as f64;
        let seg = match cum.binary_search_by(|c| c.partial_cmp(&target).unwrap()) {
            Ok(i) => i.min(pts.len() - 1),
            Err(i) => i.min(pts.len() - 1),
        };
        let p = if seg == 0 {
            pts[0]
        } else {
            let t0 = cum[seg - 1];
            let t1 = cum[seg];
            let w = if t1 > t0 { (target - t0) / (t1 - t0) } else { 0.0 };
            pts[seg - 1] * (1.0 - w) + pts[seg] * w
        };
        out.push(metric.sample(&p, Interp::Trilinear, Boundary::Clamp));
    }
    Ok(out)
}

fn argmax_finite(dist: &[f64], in_mask: &[bool]) -> usize {
    let mut best = 0usize;
    let mut best_d = f64::NEG_INFINITY;
    for (i, &d) in dist.iter().enumerate() {
        if in_mask[i] && d.is_finite() && d > best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// reports

/// One row of a statistics report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub tract: String,
    pub subject: String,
    pub metric: String,
    pub statistic: String,
    pub value: f64,
    pub p_value: Option<f64>,
    pub n: usize,
    pub method: String,
}

/// Tabular statistics output with deterministic CSV serialization.
#[derive(Debug, Clone, Default)]
pub struct StatsReport {
    pub rows: Vec<ReportRow>,
    pub metadata: BTreeMap<String, String>,
}

impl StatsReport {
    pub fn push(&mut self, row: ReportRow) {
        self.rows.push(row);
    }

    /// Rows sorted by (tract, subject, method, statistic, metric).
    pub fn sorted_rows(&self) -> Vec<&ReportRow> {
        let mut rows: Vec<&ReportRow> = self.rows.iter().collect();
        rows.sort_by(|a, b| {
            (&a.tract, &a.subject, &a.method, &a.statistic, &a.metric)
                .cmp(&(&b.tract, &b.subject, &b.method, &b.statistic, &b.metric))
        });
        rows
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("tract,subject,metric,statistic,value,p_value,n,method\n");
        for r in self.sorted_rows() {
            let p = r.p_value.map(fmt_sig9).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                r.tract,
                r.subject,
                r.metric,
                r.statistic,
                fmt_sig9(r.value),
                p,
                r.n,
                r.method
            ));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Per-tract values of one statistic for one method.
    pub fn tract_values(&self, statistic: &str, method: &str) -> BTreeMap<String, f64> {
        self.rows
            .iter()
            .filter(|r| r.statistic == statistic && r.method == method && !r.tract.starts_with('('))
            .map(|r| (r.tract.clone(), r.value))
            .collect()
    }
}

/// Nine significant digits.
fn fmt_sig9(v: f64) -> String {
    format!("{v:.8e}")
}

/// Compare two methods' per-(tract, subject) reproducibility deltas.
///
/// Emits per tract: each method's mean delta, the paired difference with its
/// t test over subjects, and summary win counts at significance `alpha`.
pub fn compare_methods_report(
    deltas_a: &BTreeMap<TractSubject, f64>,
    deltas_b: &BTreeMap<TractSubject, f64>,
    method_a: &str,
    method_b: &str,
    alpha: f64,
) -> Result<StatsReport> {
    let by_tract_a = group_by_tract(deltas_a);
    let by_tract_b = group_by_tract(deltas_b);
    if by_tract_a.keys().collect::<Vec<_>>() != by_tract_b.keys().collect::<Vec<_>>() {
        return Err(Error::Input("methods report different tract sets".into()));
    }
    let mut report = StatsReport::default();
    let mut wins_a = 0usize;
    let mut wins_b = 0usize;
    let mut sig_a = 0usize;
    let mut sig_b = 0usize;
    let mut degenerate = 0usize;
    let n_tracts = by_tract_a.len();
    for (tract, subj_a) in &by_tract_a {
        let subj_b = &by_tract_b[tract];
        if subj_a.keys().collect::<Vec<_>>() != subj_b.keys().collect::<Vec<_>>() {
            return Err(Error::Input(format!("subject sets differ for tract {tract}")));
        }
        let n = subj_a.len();
        let mean_a = subj_a.values().sum::<f64>() / n as f64;
        let mean_b = subj_b.values().sum::<f64>() / n as f64;
        report.push(ReportRow {
            tract: tract.clone(),
            subject: String::new(),
            metric: "FA".into(),
            statistic: "delta_mean".into(),
            value: mean_a,
            p_value: None,
            n,
            method: method_a.into(),
        });
        report.push(ReportRow {
            tract: tract.clone(),
            subject: String::new(),
            metric: "FA".into(),
            statistic: "delta_mean".into(),
            value: mean_b,
            p_value: None,
            n,
            method: method_b.into(),
        });
        let paired: Vec<f64> = subj_a.keys().map(|s| subj_a[s] - subj_b[s]).collect();
        let test = paired_t_test(&paired);
        let (p, significant) = match &test {
            Ok(t) => (Some(t.p), t.p < alpha),
            Err(_) => {
                degenerate += 1;
                (None, false)
            }
        };
        report.push(ReportRow {
            tract: tract.clone(),
            subject: String::new(),
            metric: "FA".into(),
            statistic: "delta_diff".into(),
            value: mean_a - mean_b,
            p_value: p,
            n,
            method: format!("{method_a}_vs_{method_b}"),
        });
        if mean_a < mean_b {
            wins_a += 1;
            if significant {
                sig_a += 1;
            }
        } else if mean_b < mean_a {
            wins_b += 1;
            if significant {
                sig_b += 1;
            }
        }
    }
    for (label, count, method) in [
        ("wins", wins_a, method_a),
        ("wins", wins_b, method_b),
        ("significant_wins", sig_a, method_a),
        ("significant_wins", sig_b, method_b),
    ] {
        report.push(ReportRow {
            tract: "(all)".into(),
            subject: String::new(),
            metric: "FA".into(),
            statistic: label.into(),
            value: count as f64,
            p_value: None,
            n: n_tracts,
            method: method.into(),
        });
    }
    report.metadata.insert("alpha".into(), format!("{alpha}"));
    report.metadata.insert("degenerate_tracts".into(), format!("{degenerate}"));
    Ok(report)
}

fn group_by_tract(values: &BTreeMap<TractSubject, f64>) -> BTreeMap<String, BTreeMap<String, f64>> {
    let mut out: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for ((tract, subject), &v) in values {
        out.entry(tract.clone()).or_default().insert(subject.clone(), v);
    }
    out
}
