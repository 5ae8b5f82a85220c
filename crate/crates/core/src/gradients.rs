//! Diffusion gradient tables and FSL-style bvals/bvecs files.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};

/// b-values (s/mm^2) and unit gradient directions, one entry per DWI channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientTable {
    bvals: Vec<f64>,
    bvecs: Vec<Vector3<f64>>,
}

impl GradientTable {
    pub fn new(bvals: Vec<f64>, bvecs: Vec<Vector3<f64>>) -> Result<Self> {
        if bvals.len() != bvecs.len() {
            return Err(Error::Input(format!(
                "bvals ({}) and bvecs ({}) lengths differ",
                bvals.len(),
                bvecs.len()
            )));
        }
        for (i, (&b, v)) in bvals.iter().zip(&bvecs).enumerate() {
            if !(b >= 0.0) || !b.is_finite() {
                return Err(Error::Input(format!("bval[{i}] = {b} must be finite and >= 0")));
            }
            if b > 0.0 && (v.norm() - 1.0).abs() > 1e-3 {
                return Err(Error::Input(format!(
                    "bvec[{i}] has norm {} but bval > 0 requires a unit direction",
                    v.norm()
                )));
            }
        }
        Ok(Self { bvals, bvecs })
    }

    pub fn len(&self) -> usize {
        self.bvals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bvals.is_empty()
    }

    pub fn bvals(&self) -> &[f64] {
        &self.bvals
    }

    pub fn bvecs(&self) -> &[Vector3<f64>] {
        &self.bvecs
    }

    /// Indices of b, 0 channels (b < 50 counts as b0, the usual convention).
    pub fn b0_indices(&self) -> Vec<usize> {
        self.bvals
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| if b < 50.0 { Some(i) } else { None })
            .collect()
    }

    /// Indices of diffusion-weighted channels.
    pub fn dwi_indices(&self) -> Vec<usize> {
        self.bvals
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| if b >= 50.0 { Some(i) } else { None })
            .collect()
    }

    /// Sub-table with the given channel indices.
    pub fn subset(&self, indices: &[usize]) -> GradientTable {
        GradientTable {
            bvals: indices.iter().map(|&i| self.bvals[i]).collect(),
            bvecs: indices.iter().map(|&i| self.bvecs[i]).collect(),
        }
    }

    /// The common b-value if all weighted channels agree within 5%, else Err.
    pub fn single_shell_bval(&self) -> Result<f64> {
        let dwi = self.dwi_indices();
        if dwi.is_empty() {
            return Err(Error::Acquisition("no diffusion-weighted channels".into()));
        }
        let mean = dwi.iter().map(|&i| self.bvals[i]).sum::<f64>() / dwi.len() as f64;
        for &i in &dwi {
            if (self.bvals[i] - mean).abs() > 0.05 * mean {
                return Err(Error::Unsupported(format!(
                    "multi-shell acquisition (b = {} vs mean {mean:.1}); select a single shell first",
                    self.bvals[i]
                )));
            }
        }
        Ok(mean)
    }
}

fn parse_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for tok in line.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::format(path, format!("not a number: {tok:?}")))?;
            row.push(v);
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Read an FSL-style gradient table: `bvals` is one row of values, `bvecs`
/// is three rows (x, y, z components).
pub fn load_fsl_gradients(bvals_path: impl AsRef<Path>, bvecs_path: impl AsRef<Path>) -> Result<GradientTable> {
    let bvals_path = bvals_path.as_ref();
    let bvecs_path = bvecs_path.as_ref();
    let bval_rows = parse_rows(bvals_path)?;
    if bval_rows.len() != 1 {
        return Err(Error::format(bvals_path, format!("expected 1 row, found {}", bval_rows.len())));
    }
    let bvals = bval_rows.into_iter().next().unwrap();
    let bvec_rows = parse_rows(bvecs_path)?;
    if bvec_rows.len() != 3 {
        return Err(Error::format(bvecs_path, format!("expected 3 rows, found {}", bvec_rows.len())));
    }
    let n = bvals.len();
    for (r, row) in bvec_rows.iter().enumerate() {
        if row.len() != n {
            return Err(Error::format(
                bvecs_path,
                format!("row {r} has {} entries, bvals has {n}", row.len()),
            ));
        }
    }
    let bvecs = (0..n)
        .map(|i| Vector3::new(bvec_rows[0][i], bvec_rows[1][i], bvec_rows[2][i]))
        .collect();
    GradientTable::new(bvals, bvecs)
}

/// Write the FSL bvals/bvecs pair.
pub fn save_fsl_gradients(gtab: &GradientTable, bvals_path: impl AsRef<Path>, bvecs_path: impl AsRef<Path>) -> Result<()> {
    let bvals_path = bvals_path.as_ref();
    let bvecs_path = bvecs_path.as_ref();
    let bvals_line = gtab
        .bvals
        .iter()
        .map(|b| format!("{b}"))
        .collect::<Vec<_>>()
        .join(" ");
    std::fs::write(bvals_path, bvals_line + "\n").map_err(|e| Error::io(bvals_path, e))?;
    let mut out = String::new();
    for a in 0..3 {
        let row = gtab
            .bvecs
            .iter()
            .map(|v| format!("{}", v[a]))
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&row);
        out.push('\n');
    }
    std::fs::write(bvecs_path, out).map_err(|e| Error::io(bvecs_path, e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fsl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let bp = dir.path().join("bvals");
        let vp = dir.path().join("bvecs");
        let g = GradientTable::new(
            vec![0.0, 1000.0, 1000.0],
            vec![
                Vector3::zeros(),
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(0.0, 1.0, 0.0),
            ],
        )
        .unwrap();
        save_fsl_gradients(&g, &bp, &vp).unwrap();
        let r = load_fsl_gradients(&bp, &vp).unwrap();
        assert_eq!(r, g);
        assert_eq!(r.b0_indices(), vec![0]);
        assert_eq!(r.dwi_indices(), vec![1, 2]);
    }

    #[test]
    fn rejects_non_unit_bvec() {
        let r = GradientTable::new(vec![1000.0], vec![Vector3::new(2.0, 0.0, 0.0)]);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn rejects_wrong_row_counts() {
        let dir = tempfile::tempdir().unwrap();
        let bp = dir.path().join("bvals");
        let vp = dir.path().join("bvecs");
        std::fs::write(&bp, "0 1000\n").unwrap();
        std::fs::write(&vp, "0 1\n0 0\n").unwrap(); // only 2 rows
        assert!(load_fsl_gradients(&bp, &vp).is_err());
    }

    #[test]
    fn shell_detection() {
        let dirs = vec![
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
        ];
        let single = GradientTable::new(vec![0.0, 1000.0, 1020.0], dirs.clone()).unwrap();
        assert!((single.single_shell_bval().unwrap() - 1010.0).abs() < 1e-9);
        let multi = GradientTable::new(vec![0.0, 1000.0, 2000.0], dirs).unwrap();
        assert!(matches!(multi.single_shell_bval(), Err(Error::Unsupported(_))));
    }
}
