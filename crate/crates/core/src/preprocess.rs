//! Problem construction: basis centering, basis builders from characteristics,
//! plan loading, and the structural checks behind `sista validate`.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, Axis};

use crate::error::{Error, Result};
use crate::io;
use crate::ot::{check_basis_shape, DissimilarityBasis, ObservedPlan, Problem, SupportMode};

/// Relative eigenvalue threshold below which the basis Gram matrix is treated as singular.
pub const INDEPENDENCE_THRESHOLD: f64 = 1e-10;

/// Double centering: `d̃ᵏ_ij = dᵏ_ij - aᵏ_i - bᵏ_j` with
/// `aᵏ_i = mean_j dᵏ_ij` and `bᵏ_j = mean_i dᵏ_ij - mean dᵏ`.
pub fn center_basis(raw: Array3<f64>) -> Result<DissimilarityBasis> {
    check_basis_shape(raw.view())?;
    let (k, n, _) = raw.dim();
    let nf = n as f64;
    let mut centered = raw;
    let mut row_offsets = Array2::zeros((k, n));
    let mut col_offsets = Array2::zeros((k, n));
    for kk in 0..k {
        let mut d = centered.index_axis_mut(Axis(0), kk);
        let a = d.sum_axis(Axis(1)) / nf;
        let colmean = d.sum_axis(Axis(0)) / nf;
        let total = colmean.sum() / nf;
        let b = colmean.mapv(|x| x - total);
        for ((i, j), x) in d.indexed_iter_mut() {
            *x -= a[i] + b[j];
        }
        row_offsets.row_mut(kk).assign(&a);
        col_offsets.row_mut(kk).assign(&b);
    }
    Ok(DissimilarityBasis::from_parts(centered, row_offsets, col_offsets, true))
}

/// Origin- and destination-side characteristic vectors, one row per entity.
#[derive(Clone, Debug, PartialEq)]
pub struct CharacteristicsTable {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
    pub x_ids: Vec<String>,
    pub y_ids: Vec<String>,
}

impl CharacteristicsTable {
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        let x_ids = (0..x.nrows()).map(|i| format!("o{i}")).collect();
        let y_ids = (0..y.nrows()).map(|i| format!("d{i}")).collect();
        Self::with_ids(x, y, x_ids, y_ids)
    }

    pub fn with_ids(
        x: Array2<f64>,
        y: Array2<f64>,
        x_ids: Vec<String>,
        y_ids: Vec<String>,
    ) -> Result<Self> {
        check_characteristics(x.view(), y.view())?;
        if x_ids.len() != x.nrows() || y_ids.len() != y.nrows() {
            return Err(Error::DimensionMismatch("identifier count differs from row count".into()));
        }
        Ok(Self { x, y, x_ids, y_ids })
    }

    /// Reads origin characteristics and, optionally, separate destination ones.
    /// Without a destination file both sides use the same table.
    pub fn load(origin: &Path, destination: Option<&Path>) -> Result<Self> {
        let (x_ids, x) = io::read_characteristics(origin)?;
        let (y_ids, y) = match destination {
            Some(p) => io::read_characteristics(p)?,
            None => (x_ids.clone(), x.clone()),
        };
        Self::with_ids(x, y, x_ids, y_ids)
    }

    pub fn dimension(&self) -> usize {
        self.x.ncols()
    }
}

fn check_characteristics(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<()> {
    if x.nrows() != y.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "{} origins but {} destinations",
            x.nrows(),
            y.nrows()
        )));
    }
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "origin vectors have {} components, destination vectors {}",
            x.ncols(),
            y.ncols()
        )));
    }
    if x.ncols() == 0 || x.nrows() == 0 {
        return Err(Error::InvalidProblem("characteristics table is empty".into()));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidProblem("characteristics contain non-finite values".into()));
    }
    Ok(())
}

/// One matrix per characteristic: `dᵏ_ij = (x_ik - y_jk)²`.
pub fn build_basis_diag(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
    check_characteristics(x, y)?;
    let (n, p) = x.dim();
    let mut out = Array3::zeros((p, n, n));
    for ((k, i, j), d) in out.indexed_iter_mut() {
        let diff = x[[i, k]] - y[[j, k]];
        *d = diff * diff;
    }
    Ok(out)
}

/// One matrix per ordered pair `(r, s)`: `d^{rs}_ij = (x_ir - y_js)²`.
///
/// Pairs are flattened row-major, so basis index `k = r * P + s` (zero-based).
pub fn build_basis_cross(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<Array3<f64>> {
    check_characteristics(x, y)?;
    let (n, p) = x.dim();
    let mut out = Array3::zeros((p * p, n, n));
    for ((k, i, j), d) in out.indexed_iter_mut() {
        let (r, s) = (k / p, k % p);
        let diff = x[[i, r]] - y[[j, s]];
        *d = diff * diff;
    }
    Ok(out)
}

/// Names for cross-basis entries, `name_r*name_s`.
pub fn cross_basis_names(names: &[String]) -> Vec<String> {
    names
        .iter()
        .flat_map(|r| names.iter().map(move |s| format!("{r}*{s}")))
        .collect()
}

/// Reads a plan file and normalizes it.
pub fn load_plan(path: &Path) -> Result<ObservedPlan> {
    load_plan_with_mode(path, SupportMode::Structural)
}

pub fn load_plan_with_mode(path: &Path, mode: SupportMode) -> Result<ObservedPlan> {
    let entries = io::read_matrix(path)?;
    ObservedPlan::with_mode(entries, mode)
}

/// Centers `raw`, checks independence (warning only) and builds the problem.
pub fn build_problem(
    plan: ObservedPlan,
    raw: Array3<f64>,
    gamma: f64,
    temperature: f64,
) -> Result<Problem> {
    let basis = center_basis(raw)?;
    let report = independence(&basis);
    if !report.independent {
        log::warn!(
            "basis matrices are numerically dependent (eigenvalue ratio {:.3e}); beta is not identified",
            report.ratio
        );
    }
    Problem::with_temperature(plan, basis, gamma, temperature)
}

/// Spectrum summary of the Gram matrix of flattened basis matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct IndependenceReport {
    pub min_eigenvalue: f64,
    pub max_eigenvalue: f64,
    /// `min / max`, zero when the basis is identically zero.
    pub ratio: f64,
    pub independent: bool,
}

pub fn independence(basis: &DissimilarityBasis) -> IndependenceReport {
    let flat = basis.flat();
    let gram = flat.dot(&flat.t());
    let k = gram.nrows();
    let m = DMatrix::from_fn(k, k, |i, j| gram[[i, j]]);
    let eig = SymmetricEigen::new(m).eigenvalues;
    let max = eig.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = eig.iter().copied().fold(f64::INFINITY, f64::min);
    let ratio = if max > 0.0 { min / max } else { 0.0 };
    IndependenceReport {
        min_eigenvalue: min,
        max_eigenvalue: max,
        ratio,
        independent: ratio > INDEPENDENCE_THRESHOLD,
    }
}

/// Largest absolute row or column sum over all matrices.
pub fn max_margin_sum(mats: ArrayView3<'_, f64>) -> f64 {
    let mut worst = 0.0_f64;
    for d in mats.outer_iter() {
        for s in d.sum_axis(Axis(0)).iter().chain(d.sum_axis(Axis(1)).iter()) {
            worst = worst.max(s.abs());
        }
    }
    worst
}

/// Outcome of checking a raw bundle against the solver's structural assumptions.
#[derive(Clone, Debug)]
pub struct AssumptionReport {
    /// Largest |row or column sum| of the raw matrices.
    pub zero_sum_violation: f64,
    pub zero_sums_hold: bool,
    pub independence: IndependenceReport,
    /// Cells of the observed plan equal to zero.
    pub zero_cells: usize,
}

impl AssumptionReport {
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !self.zero_sums_hold {
            out.push(format!(
                "zero-sum: basis matrices have nonzero row/column sums (max |sum| = {:.3e}); \
                 they will be centered before fitting",
                self.zero_sum_violation
            ));
        }
        if !self.independence.independent {
            out.push(format!(
                "independence: centered basis matrices are linearly dependent \
                 (Gram eigenvalue ratio {:.3e} <= {:.0e})",
                self.independence.ratio, INDEPENDENCE_THRESHOLD
            ));
        }
        if self.zero_cells > 0 {
            out.push(format!(
                "positivity: observed plan has {} zero cells; sums are restricted to the positive support",
                self.zero_cells
            ));
        }
        out
    }

    pub fn ok(&self) -> bool {
        self.violations().is_empty()
    }
}

/// Zero-sum tolerance used by [`check_assumptions`].
pub const ZERO_SUM_TOLERANCE: f64 = 1e-10;

pub fn check_assumptions(raw: &Array3<f64>, plan: &ObservedPlan) -> Result<AssumptionReport> {
    if raw.dim().1 != plan.n() {
        return Err(Error::DimensionMismatch(format!(
            "basis is {n}x{n}, plan is {m}x{m}",
            n = raw.dim().1,
            m = plan.n()
        )));
    }
    let zero_sum_violation = max_margin_sum(raw.view());
    let basis = center_basis(raw.clone())?;
    Ok(AssumptionReport {
        zero_sum_violation,
        zero_sums_hold: zero_sum_violation <= ZERO_SUM_TOLERANCE,
        independence: independence(&basis),
        zero_cells: plan.entries().iter().filter(|&&x| x == 0.0).count(),
    })
}
