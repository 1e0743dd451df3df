//! On-disk formats.
//!
//! Matrices are plain text: one row per line, entries separated by commas
//! (whitespace is accepted on input), written with the shortest decimal
//! representation that round-trips. A problem bundle is a directory holding
//! `manifest.toml`, the plan matrix and one matrix file per basis element.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ot::{ObservedPlan, Problem, SupportMode};
use crate::preprocess;

pub const MANIFEST_FILE: &str = "manifest.toml";

pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text, path)
}

/// Comma-separated fields, or whitespace-separated when the line has no comma.
fn fields(line: &str) -> Box<dyn Iterator<Item = &str> + '_> {
    if line.contains(',') {
        Box::new(line.split(','))
    } else {
        Box::new(line.split_whitespace())
    }
}

pub(crate) fn parse_matrix(text: &str, path: &Path) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let row = fields(line)
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("bad number `{tok}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let ncols = rows.first().map_or(0, Vec::len);
    let nrows = rows.len();
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    Array2::from_shape_vec((nrows, ncols), flat).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })
}

pub fn format_matrix(m: &Array2<f64>) -> String {
    let mut out = String::with_capacity(m.len() * 20);
    for row in m.outer_iter() {
        let mut first = true;
        for x in row.iter() {
            if !first {
                out.push(',');
            }
            first = false;
            out.push_str(&format!("{x}"));
        }
        out.push('\n');
    }
    out
}

pub fn write_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    fs::write(path, format_matrix(m)).map_err(|e| Error::io(path, e))
}

/// Characteristics file: `id,x1,x2,...` (or whitespace separated) per line.
pub fn read_characteristics(path: &Path) -> Result<(Vec<String>, Array2<f64>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut toks = fields(line);
        let id = toks.next().unwrap_or_default().trim().to_string();
        let row = toks
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("bad number `{tok}`: {e}"),
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        match width {
            None => width = Some(row.len()),
            Some(w) if w != row.len() => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: lineno + 1,
                    msg: format!("expected {w} components, found {}", row.len()),
                })
            }
            _ => {}
        }
        ids.push(id);
        values.extend(row);
    }
    let p = width.unwrap_or(0);
    let arr = Array2::from_shape_vec((ids.len(), p), values).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        msg: e.to_string(),
    })?;
    Ok((ids, arr))
}

/// Bundle manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub gamma: f64,
    #[serde(default = "one")]
    pub temperature: f64,
    #[serde(default)]
    pub support: SupportMode,
    pub plan: String,
    pub basis: Vec<String>,
    #[serde(default)]
    pub names: Vec<String>,
}

fn one() -> f64 {
    1.0
}

impl Manifest {
    pub fn name(&self, k: usize) -> String {
        self.names.get(k).cloned().unwrap_or_else(|| format!("d{}", k + 1))
    }
}

/// A problem as stored on disk: raw (uncentered) data plus manifest.
#[derive(Clone, Debug)]
pub struct Bundle {
    pub manifest: Manifest,
    pub plan: Array2<f64>,
    pub basis: Array3<f64>,
}

impl Bundle {
    pub fn new(plan: Array2<f64>, basis: Array3<f64>, gamma: f64, names: Vec<String>) -> Result<Self> {
        let (k, n, m) = basis.dim();
        if plan.dim() != (n, m) || n != m {
            return Err(Error::DimensionMismatch(format!(
                "plan is {:?}, basis matrices are {n}x{m}",
                plan.dim()
            )));
        }
        if !names.is_empty() && names.len() != k {
            return Err(Error::DimensionMismatch(format!("{} names for K = {k}", names.len())));
        }
        let manifest = Manifest {
            k,
            n,
            gamma,
            temperature: 1.0,
            support: SupportMode::Structural,
            plan: "plan.csv".into(),
            basis: (1..=k).map(|i| format!("basis/d{i:04}.csv")).collect(),
            names,
        };
        Ok(Self { manifest, plan, basis })
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest = toml::from_str(&text).map_err(|e| Error::Parse {
            path: mpath.clone(),
            line: 0,
            msg: e.to_string(),
        })?;
        if manifest.basis.len() != manifest.k {
            return Err(Error::DimensionMismatch(format!(
                "manifest lists {} basis files for K = {}",
                manifest.basis.len(),
                manifest.k
            )));
        }
        let expect = |path: &Path, m: &Array2<f64>| -> Result<()> {
            if m.dim() != (manifest.n, manifest.n) {
                return Err(Error::DimensionMismatch(format!(
                    "{} is {}x{}, manifest says N = {}",
                    path.display(),
                    m.nrows(),
                    m.ncols(),
                    manifest.n
                )));
            }
            Ok(())
        };
        let ppath = dir.join(&manifest.plan);
        let plan = read_matrix(&ppath)?;
        expect(&ppath, &plan)?;
        let mut basis = Array3::zeros((manifest.k, manifest.n, manifest.n));
        for (k, f) in manifest.basis.iter().enumerate() {
            let bpath = dir.join(f);
            let m = read_matrix(&bpath)?;
            expect(&bpath, &m)?;
            basis.index_axis_mut(Axis(0), k).assign(&m);
        }
        Ok(Self { manifest, plan, basis })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let mkdir = |p: &Path| fs::create_dir_all(p).map_err(|e| Error::io(p, e));
        mkdir(dir)?;
        let ppath = dir.join(&self.manifest.plan);
        if let Some(parent) = ppath.parent() {
            mkdir(parent)?;
        }
        write_matrix(&ppath, &self.plan)?;
        for (k, f) in self.manifest.basis.iter().enumerate() {
            let bpath = dir.join(f);
            if let Some(parent) = bpath.parent() {
                mkdir(parent)?;
            }
            write_matrix(&bpath, &self.basis.index_axis(Axis(0), k).to_owned())?;
        }
        let mpath = dir.join(MANIFEST_FILE);
        let text = toml::to_string(&self.manifest).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
    }

    pub fn observed_plan(&self) -> Result<ObservedPlan> {
        ObservedPlan::with_mode(self.plan.clone(), self.manifest.support)
    }

    /// Builds the (centered) problem; `gamma` and `temperature` override the manifest.
    pub fn to_problem(&self, gamma: Option<f64>, temperature: Option<f64>) -> Result<Problem> {
        preprocess::build_problem(
            self.observed_plan()?,
            self.basis.clone(),
            gamma.unwrap_or(self.manifest.gamma),
            temperature.unwrap_or(self.manifest.temperature),
        )
    }

    pub fn names(&self) -> Vec<String> {
        (0..self.manifest.k).map(|k| self.manifest.name(k)).collect()
    }
}

/// Fitted point written by `sista fit`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub solver: String,
    pub converged: bool,
    pub iterations: usize,
    pub gamma: f64,
    pub phi: f64,
    pub kkt_residual: f64,
    pub nnz: usize,
    pub beta: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    #[serde(default)]
    pub names: Vec<String>,
}

impl SolutionFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            msg: e.to_string(),
        })
    }
}

pub(crate) fn ensure_dir(path: &Path) -> Result<PathBuf> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))?;
    Ok(path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn matrix_text_round_trips_exactly() {
        let m = array![[0.1, 1e-300, -2.5], [3.0, 1.0 / 3.0, 7e22]];
        let text = format_matrix(&m);
        assert_eq!(text.lines().next().unwrap().matches(',').count(), 2);
        let back = parse_matrix(&text, Path::new("mem")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = parse_matrix("1,2\n3\n", Path::new("mem")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(matches!(
            parse_matrix("1,x\n", Path::new("mem")),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn bundle_round_trip_and_manifest_validation() {
        let dir = tempfile::tempdir().unwrap();
        let plan = array![[0.25, 0.25], [0.25, 0.25]];
        let basis = Array3::from_shape_fn((2, 2, 2), |(k, i, j)| (k + i * 2 + j) as f64);
        let b = Bundle::new(plan.clone(), basis.clone(), 0.5, vec!["a".into(), "b".into()]).unwrap();
        b.save(dir.path()).unwrap();
        let back = Bundle::load(dir.path()).unwrap();
        assert_eq!(back.plan, plan);
        assert_eq!(back.basis, basis);
        assert_eq!(back.manifest, b.manifest);

        let mut bad = b.manifest.clone();
        bad.n = 3;
        fs::write(dir.path().join(MANIFEST_FILE), toml::to_string(&bad).unwrap()).unwrap();
        assert!(matches!(Bundle::load(dir.path()), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn characteristics_parse_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.csv");
        fs::write(&p, "FRA,1.0,2.0\nDEU,3.0,4.5\n").unwrap();
        let (ids, x) = read_characteristics(&p).unwrap();
        assert_eq!(ids, vec!["FRA", "DEU"]);
        assert_eq!(x, array![[1.0, 2.0], [3.0, 4.5]]);
    }
}
