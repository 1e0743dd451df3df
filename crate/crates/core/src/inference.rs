//! Penalty selection by support size and bootstrap standard errors for `β`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use rayon::prelude::*;

use crate::bench::{self, GammaSearch, GammaSearchConfig};
use crate::error::{Error, Result};
use crate::numeric::CompensatedSum;
use crate::ot::{ObservedPlan, Problem};
use crate::solvers::{sista_solve, InitialPoint, Solution, SolverConfig};

/// Searches for a penalty whose fit has exactly `n_nonzero` active components.
///
/// `n_nonzero = 0` returns the smallest penalty at which `β = 0` is optimal.
pub fn fit_with_support_size(
    problem: &Problem,
    n_nonzero: usize,
    search: &GammaSearchConfig,
) -> Result<GammaSearch> {
    if n_nonzero > problem.k() {
        return Err(Error::InvalidConfig(format!(
            "requested {n_nonzero} nonzeros but K = {}",
            problem.k()
        )));
    }
    bench::search_nnz(problem, n_nonzero, search)
}

pub const DEFAULT_SAMPLE_SIZE: u64 = 1_000_000;

#[derive(Clone, Debug)]
pub struct BootstrapConfig {
    pub replicates: usize,
    /// Pseudo-observations per replicate; `None` refits the observed plan
    /// unchanged.
    pub sample_size: Option<u64>,
    pub seed: u64,
    pub solver: SolverConfig,
    /// Largest tolerated fraction of failed replicates.
    pub max_drop_fraction: f64,
}

impl Default for BootstrapConfig {
    fn default() -> Self {
        Self {
            replicates: 1000,
            sample_size: Some(DEFAULT_SAMPLE_SIZE),
            seed: 0,
            solver: SolverConfig::default(),
            max_drop_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BootstrapResult {
    /// Fit on the observed plan at the same penalty.
    pub estimate: Solution,
    pub se: Array1<f64>,
    pub used: usize,
    pub dropped: usize,
}

/// Multinomial draw of `m` counts over the support cells, by sequential
/// conditional binomials in row-major order.
pub fn resample_plan(plan: &ObservedPlan, m: u64, rng: &mut ChaCha8Rng) -> Result<Array2<f64>> {
    let entries = plan.entries();
    let mut counts = Array2::<f64>::zeros(entries.raw_dim());
    let mut remaining_mass = 1.0_f64;
    let mut remaining = m;
    for ((i, j), &x) in entries.indexed_iter() {
        if remaining == 0 {
            break;
        }
        if !plan.in_support(i, j) || x <= 0.0 {
            continue;
        }
        let p = (x / remaining_mass).clamp(0.0, 1.0);
        let draw = Binomial::new(remaining, p)
            .map_err(|e| Error::InvalidConfig(format!("binomial draw: {e}")))?
            .sample(rng);
        counts[[i, j]] = draw as f64;
        remaining -= draw;
        remaining_mass -= x;
    }
    // Rounding can leave a few draws unassigned; they go to the last cell.
    if remaining > 0 {
        if let Some(((i, j), _)) = entries
            .indexed_iter()
            .filter(|&((i, j), &x)| plan.in_support(i, j) && x > 0.0)
            .last()
        {
            counts[[i, j]] += remaining as f64;
        }
    }
    Ok(counts)
}

fn replicate_rng(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

/// Componentwise sample standard deviation of refitted `β` over resampled
/// plans at fixed `γ`. Replicates keep the observed support; failed refits
/// are dropped and counted.
pub fn bootstrap_se(problem: &Problem, gamma: f64, config: &BootstrapConfig) -> Result<BootstrapResult> {
    if config.replicates < 2 {
        return Err(Error::InvalidConfig("bootstrap needs at least 2 replicates".into()));
    }
    if config.sample_size == Some(0) {
        return Err(Error::InvalidConfig("bootstrap sample size must be >= 1".into()));
    }
    let problem = problem.with_gamma(gamma)?;
    let estimate = sista_solve(&problem, &config.solver, &InitialPoint::zeros(&problem))?;
    let warm = estimate.init_point();
    let plan = problem.plan();

    let refit = |b: usize| -> Option<Array1<f64>> {
        let replicate = match config.sample_size {
            None => problem.clone(),
            Some(m) => {
                let counts = resample_plan(plan, m, &mut replicate_rng(config.seed, b)).ok()?;
                let resampled = ObservedPlan::with_support(counts, plan.support().to_owned()).ok()?;
                problem.with_plan(resampled).ok()?
            }
        };
        match sista_solve(&replicate, &config.solver, &warm) {
            Ok(sol) if sol.converged => Some(sol.beta.beta),
            Ok(sol) => {
                log::debug!("replicate {b} stopped unconverged ({:?})", sol.stop);
                None
            }
            Err(e) => {
                log::debug!("replicate {b} failed: {e}");
                None
            }
        }
    };
    // Collected in replicate order, so aggregation does not depend on scheduling.
    let fits: Vec<Option<Array1<f64>>> = (0..config.replicates).into_par_iter().map(refit).collect();
    let betas: Vec<Array1<f64>> = fits.into_iter().flatten().collect();
    let dropped = config.replicates - betas.len();
    if dropped as f64 > config.max_drop_fraction * config.replicates as f64 || betas.len() < 2 {
        return Err(Error::Bootstrap {
            dropped,
            total: config.replicates,
        });
    }
    if dropped > 0 {
        log::warn!("bootstrap: dropped {dropped} of {} replicates", config.replicates);
    }
    let k = problem.k();
    let count = betas.len() as f64;
    // Deviations from the first replicate keep identical replicates at exactly zero.
    let se = Array1::from_shape_fn(k, |c| {
        let shift = betas[0][c];
        let mean = betas.iter().map(|b| b[c] - shift).collect::<CompensatedSum>().value() / count;
        let ss = betas
            .iter()
            .map(|b| (b[c] - shift - mean).powi(2))
            .collect::<CompensatedSum>()
            .value();
        (ss / (count - 1.0)).sqrt()
    });
    Ok(BootstrapResult {
        estimate,
        se,
        used: betas.len(),
        dropped,
    })
}

pub const REPORT_HEADER: &str = "index,name,beta,se";

/// One row per basis matrix: `index,name,beta,se`.
pub fn format_report(names: &[String], beta: &Array1<f64>, se: &Array1<f64>) -> Result<String> {
    if names.len() != beta.len() || se.len() != beta.len() {
        return Err(Error::DimensionMismatch(format!(
            "report needs equal lengths, got {} names, {} estimates, {} errors",
            names.len(),
            beta.len(),
            se.len()
        )));
    }
    let mut out = format!("{REPORT_HEADER}\n");
    for (k, name) in names.iter().enumerate() {
        out.push_str(&format!("{k},{name},{:e},{:e}\n", beta[k], se[k]));
    }
    Ok(out)
}

pub fn write_report(path: &Path, names: &[String], beta: &Array1<f64>, se: &Array1<f64>) -> Result<()> {
    let text = format_report(names, beta, se)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn resample_preserves_count_and_support() {
        let plan = ObservedPlan::new(array![[0.2, 0.0], [0.3, 0.5]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let counts = resample_plan(&plan, 10_000, &mut rng).unwrap();
        assert_eq!(counts.sum(), 10_000.0);
        assert_eq!(counts[[0, 1]], 0.0);
        assert!((counts[[1, 1]] / 10_000.0 - 0.5).abs() < 0.05);
    }

    #[test]
    fn report_layout() {
        let text = format_report(
            &["a".into(), "b".into()],
            &array![1.5, 0.0],
            &array![0.25, 0.0],
        )
        .unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], REPORT_HEADER);
        assert_eq!(lines[1], "0,a,1.5e0,2.5e-1");
        assert!(format_report(&["a".into()], &array![1.0, 2.0], &array![0.0, 0.0]).is_err());
    }
}
