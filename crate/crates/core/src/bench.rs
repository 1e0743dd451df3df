//! Synthetic benchmark harness: random instances, sparsity-targeted penalty
//! search and wall-clock races between the three solvers.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Bundle};
use crate::ot::{self, CostParams, Problem};
use crate::solvers::{
    cd_solve, ista_solve, sista_solve, InitialPoint, Solution, SolverConfig, SolverTrace,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SolverKind {
    Sista,
    Ista,
    Cd,
}

impl SolverKind {
    pub const ALL: [SolverKind; 3] = [SolverKind::Sista, SolverKind::Ista, SolverKind::Cd];

    pub fn name(self) -> &'static str {
        match self {
            SolverKind::Sista => "sista",
            SolverKind::Ista => "ista",
            SolverKind::Cd => "cd",
        }
    }

    pub fn solve(self, problem: &Problem, config: &SolverConfig, init: &InitialPoint) -> Result<Solution> {
        match self {
            SolverKind::Sista => sista_solve(problem, config, init),
            SolverKind::Ista => ista_solve(problem, config, init),
            SolverKind::Cd => cd_solve(problem, config, init),
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sista" => Ok(SolverKind::Sista),
            "ista" => Ok(SolverKind::Ista),
            "cd" => Ok(SolverKind::Cd),
            other => Err(Error::InvalidConfig(format!("unknown solver `{other}`"))),
        }
    }
}

/// Parameters of a synthetic benchmark.
#[derive(Clone, Debug)]
pub struct BenchSpec {
    pub k: usize,
    pub n: usize,
    /// Target fraction of nonzero components in `β`.
    pub sparsity: f64,
    pub seed: u64,
    pub solvers: Vec<SolverKind>,
    /// Settings for the high-precision reference run.
    pub reference: SolverConfig,
    /// Settings shared by the racing solvers.
    pub race: SolverConfig,
    /// Racing solvers stop once their gap reaches this value.
    pub gap_floor: f64,
    /// Run racing solvers on separate threads.
    pub parallel: bool,
}

impl BenchSpec {
    pub fn new(k: usize, n: usize, sparsity: f64, seed: u64) -> Self {
        let race = SolverConfig {
            max_seconds: Some(120.0),
            ..SolverConfig::default()
        };
        let reference = SolverConfig {
            tol_kkt: 1e-12,
            max_iter: race.max_iter * 10,
            ..SolverConfig::default()
        };
        Self {
            k,
            n,
            sparsity,
            seed,
            solvers: SolverKind::ALL.to_vec(),
            reference,
            race,
            gap_floor: 1e-10,
            parallel: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.n == 0 {
            return Err(Error::InvalidConfig("K and N must be >= 1".into()));
        }
        if !(self.sparsity > 0.0 && self.sparsity <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "sparsity must lie in (0, 1], got {}",
                self.sparsity
            )));
        }
        if !(self.gap_floor > 0.0) {
            return Err(Error::InvalidConfig("gap floor must be > 0".into()));
        }
        Ok(())
    }
}

/// Raw synthetic data: standard normal basis entries and a plan with
/// standard log-normal entries normalized to unit mass.
pub fn gen_synthetic_bundle(k: usize, n: usize, seed: u64) -> Result<Bundle> {
    if k == 0 || n == 0 {
        return Err(Error::InvalidConfig("K and N must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = Array3::from_shape_simple_fn((k, n, n), || StandardNormal.sample(&mut rng));
    let mut plan = Array2::from_shape_simple_fn((n, n), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        z.exp()
    });
    let total = plan.sum();
    plan.mapv_inplace(|x| x / total);
    Bundle::new(plan, basis, 0.0, Vec::new())
}

/// Centered synthetic problem with `γ = 0`.
pub fn gen_synthetic(spec: &BenchSpec) -> Result<Problem> {
    spec.validate()?;
    gen_synthetic_bundle(spec.k, spec.n, spec.seed)?.to_problem(None, None)
}

/// Smallest penalty at which `β = 0` is optimal: `max_k |∂_k F(u₀, v₀, 0)|`
/// with `(u₀, v₀)` the Sinkhorn potentials for zero cost.
pub fn gamma_max(problem: &Problem) -> Result<f64> {
    let zero = CostParams::zeros(problem.k());
    let sk = ot::sinkhorn_solve(&zero, problem, 1e-15, 100_000)?;
    let g = ot::grad_beta(&sk.potentials, &zero, problem)?;
    Ok(g.iter().fold(0.0_f64, |m, x| m.max(x.abs())))
}

#[derive(Clone, Debug)]
pub struct GammaSearchConfig {
    pub solver: SolverConfig,
    pub max_fits: usize,
}

impl Default for GammaSearchConfig {
    fn default() -> Self {
        Self {
            solver: SolverConfig {
                tol_kkt: 1e-10,
                ..SolverConfig::default()
            },
            max_fits: 80,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GammaSearch {
    pub gamma: f64,
    pub solution: Solution,
    pub nnz: usize,
    pub target_nnz: usize,
    /// Whether `nnz == target_nnz`.
    pub exact: bool,
    pub fits: usize,
}

/// Bisection on `γ ∈ [0, γ_max]` for a fit with `round(target · K)` nonzeros.
pub fn find_gamma_for_sparsity(
    problem: &Problem,
    target: f64,
    search: &GammaSearchConfig,
) -> Result<GammaSearch> {
    let k = problem.k();
    if !(target >= 0.0 && target <= 1.0) {
        return Err(Error::InvalidConfig(format!("target sparsity must lie in [0, 1], got {target}")));
    }
    if target * (k as f64) < 1.0 {
        return Err(Error::InvalidConfig(format!(
            "target sparsity {target} selects no component of K = {k}"
        )));
    }
    let target_nnz = (target * k as f64).round() as usize;
    search_nnz(problem, target_nnz, search)
}

pub(crate) fn search_nnz(problem: &Problem, target_nnz: usize, search: &GammaSearchConfig) -> Result<GammaSearch> {
    let k = problem.k();
    if target_nnz > k {
        return Err(Error::InvalidConfig(format!("cannot select {target_nnz} of K = {k} components")));
    }
    let fit = |gamma: f64, init: &InitialPoint| -> Result<Solution> {
        sista_solve(&problem.with_gamma(gamma)?, &search.solver, init)
    };
    let gmax = gamma_max(problem)?;
    let zeros = InitialPoint::zeros(problem);

    let mut fits = 1;
    let top = fit(gmax, &zeros)?;
    if target_nnz == 0 {
        let nnz = top.beta.nnz();
        return Ok(GammaSearch {
            gamma: gmax,
            nnz,
            target_nnz,
            exact: nnz == 0,
            solution: top,
            fits,
        });
    }

    let (mut lo, mut hi) = (0.0, gmax);
    let mut warm = top.init_point();
    let mut nearest: Option<(usize, f64, Solution)> = None;
    let distance = |nnz: usize| nnz.abs_diff(target_nnz);
    let consider = |gamma: f64, sol: Solution, nearest: &mut Option<(usize, f64, Solution)>| {
        let d = distance(sol.beta.nnz());
        if nearest.as_ref().is_none_or(|(bd, _, _)| d < *bd) {
            *nearest = Some((d, gamma, sol));
        }
    };
    consider(gmax, top, &mut nearest);

    while fits < search.max_fits {
        // The lower end is tried first when the whole vector is requested.
        let gamma = if target_nnz == k && fits == 1 { 0.0 } else { 0.5 * (lo + hi) };
        let sol = fit(gamma, &warm)?;
        fits += 1;
        let nnz = sol.beta.nnz();
        if nnz == target_nnz {
            return Ok(GammaSearch {
                gamma,
                nnz,
                target_nnz,
                exact: true,
                solution: sol,
                fits,
            });
        }
        if nnz > target_nnz {
            lo = gamma;
        } else {
            hi = gamma;
        }
        warm = sol.init_point();
        consider(gamma, sol, &mut nearest);
        if hi - lo <= 1e-14 * hi.max(1e-300) {
            break;
        }
    }
    let (_, gamma, solution) = nearest.expect("at least one fit");
    let nnz = solution.beta.nnz();
    log::warn!("penalty search: no gamma gives exactly {target_nnz} nonzeros; closest has {nnz}");
    Ok(GammaSearch {
        gamma,
        nnz,
        target_nnz,
        exact: false,
        solution,
        fits,
    })
}

#[derive(Clone, Debug)]
pub struct RaceEntry {
    pub solver: SolverKind,
    pub solution: Solution,
    /// Whether the solver reached the gap floor within its budget.
    pub reached_floor: bool,
}

impl RaceEntry {
    pub fn trace(&self) -> &SolverTrace {
        &self.solution.trace
    }

    pub fn time_to_gap(&self, threshold: f64) -> Option<f64> {
        self.solution.trace.time_to_gap(threshold)
    }
}

#[derive(Clone, Debug)]
pub struct RaceResult {
    pub fingerprint: String,
    pub gamma: f64,
    pub phi_star: f64,
    pub reference: Solution,
    pub entries: Vec<RaceEntry>,
    pub parallel: bool,
}

impl RaceResult {
    pub fn entry(&self, kind: SolverKind) -> Option<&RaceEntry> {
        self.entries.iter().find(|e| e.solver == kind)
    }
}

/// Computes a tight SISTA reference optimum, then runs each requested solver
/// from zero against it.
pub fn run_race(problem: &Problem, spec: &BenchSpec) -> Result<RaceResult> {
    spec.validate()?;
    let fingerprint = problem.fingerprint();
    let zeros = InitialPoint::zeros(problem);
    let mut reference = sista_solve(problem, &spec.reference, &zeros)?;
    if !reference.converged {
        log::warn!(
            "reference run stopped at KKT residual {:.3e} (target {:.1e})",
            reference.kkt_residual,
            spec.reference.tol_kkt
        );
    }
    let phi_star = reference.phi;
    reference.trace.set_reference(phi_star);

    let config = SolverConfig {
        reference_phi: Some(phi_star),
        target_gap: Some(spec.gap_floor),
        ..spec.race.clone()
    };
    let run_one = |kind: SolverKind| -> Result<RaceEntry> {
        let solution = kind.solve(problem, &config, &zeros)?;
        let reached_floor = solution.trace.time_to_gap(spec.gap_floor).is_some();
        Ok(RaceEntry {
            solver: kind,
            solution,
            reached_floor,
        })
    };
    let entries = if spec.parallel {
        std::thread::scope(|s| {
            let handles: Vec<_> = spec
                .solvers
                .iter()
                .map(|&kind| s.spawn(move || run_one(kind)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("solver thread panicked"))
                .collect::<Result<Vec<_>>>()
        })?
    } else {
        spec.solvers.iter().map(|&k| run_one(k)).collect::<Result<Vec<_>>>()?
    };
    debug_assert_eq!(fingerprint, problem.fingerprint());
    Ok(RaceResult {
        fingerprint,
        gamma: problem.gamma(),
        phi_star,
        reference,
        entries,
        parallel: spec.parallel,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotEntry {
    pub solver: String,
    pub file: String,
    pub rows: usize,
    /// Rows without a positive time and gap, which have no logarithm.
    pub dropped: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotManifest {
    pub x: String,
    pub y: String,
    pub series: Vec<PlotEntry>,
}

/// Writes `log10(time), log10(gap)` per solver plus `manifest.toml` into `dir`.
pub fn emit_plot_data(traces: &[(&str, &SolverTrace)], dir: &Path) -> Result<PlotManifest> {
    if traces.is_empty() {
        return Err(Error::InvalidConfig("no traces to plot".into()));
    }
    io::ensure_dir(dir)?;
    let mut series = Vec::new();
    for (name, trace) in traces {
        let mut text = String::from("log10_time,log10_gap\n");
        let (mut rows, mut dropped) = (0, 0);
        for r in trace.records() {
            match r.gap {
                Some(g) if g > 0.0 && r.elapsed > 0.0 => {
                    text.push_str(&format!("{:e},{:e}\n", r.elapsed.log10(), g.log10()));
                    rows += 1;
                }
                _ => dropped += 1,
            }
        }
        let file = format!("{name}.csv");
        let path = dir.join(&file);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        series.push(PlotEntry {
            solver: name.to_string(),
            file,
            rows,
            dropped,
        });
    }
    let manifest = PlotManifest {
        x: "log10 elapsed seconds".into(),
        y: "log10 |phi - phi*|".into(),
        series,
    };
    let path = dir.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[derive(Clone, Debug, Serialize)]
struct RaceSolverRecord {
    solver: String,
    iterations: usize,
    converged: bool,
    reached_floor: bool,
    final_gap: Option<f64>,
    final_kkt: f64,
    elapsed_seconds: f64,
    time_to_1e_6: Option<f64>,
    trace: String,
}

#[derive(Clone, Debug, Serialize)]
struct RaceManifest {
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "N")]
    n: usize,
    gamma: f64,
    phi_star: f64,
    reference_kkt: f64,
    fingerprint: String,
    parallel: bool,
    timing_note: String,
    solvers: Vec<RaceSolverRecord>,
}

/// Writes `instance/`, `traces/`, `plots/` and `manifest.toml` under `out`.
pub fn write_race(result: &RaceResult, instance: &Bundle, out: &Path) -> Result<()> {
    io::ensure_dir(out)?;
    let mut instance = instance.clone();
    instance.manifest.gamma = result.gamma;
    instance.save(&out.join("instance"))?;
    let traces_dir = io::ensure_dir(&out.join("traces"))?;
    result.reference.trace.write_csv(&traces_dir.join("reference.csv"))?;
    let mut records = Vec::new();
    for e in &result.entries {
        let file = format!("traces/{}.csv", e.solver);
        e.trace().write_csv(&out.join(&file))?;
        let last = e.trace().last();
        records.push(RaceSolverRecord {
            solver: e.solver.to_string(),
            iterations: e.solution.iterations,
            converged: e.solution.converged,
            reached_floor: e.reached_floor,
            final_gap: last.and_then(|r| r.gap),
            final_kkt: e.solution.kkt_residual,
            elapsed_seconds: last.map_or(0.0, |r| r.elapsed),
            time_to_1e_6: e.time_to_gap(1e-6),
            trace: file,
        });
    }
    let named: Vec<(&str, &SolverTrace)> = result
        .entries
        .iter()
        .map(|e| (e.solver.name(), e.trace()))
        .collect();
    emit_plot_data(&named, &out.join("plots"))?;
    let manifest = RaceManifest {
        k: instance.manifest.k,
        n: instance.manifest.n,
        gamma: result.gamma,
        phi_star: result.phi_star,
        reference_kkt: result.reference.kkt_residual,
        fingerprint: result.fingerprint.clone(),
        parallel: result.parallel,
        timing_note: if result.parallel {
            "solvers ran concurrently; wall times include contention".into()
        } else {
            "solvers ran sequentially".into()
        },
        solvers: records,
    };
    let path = out.join("manifest.toml");
    let text = toml::to_string(&manifest).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic() {
        let a = gen_synthetic_bundle(3, 5, 11).unwrap();
        let b = gen_synthetic_bundle(3, 5, 11).unwrap();
        let c = gen_synthetic_bundle(3, 5, 12).unwrap();
        assert_eq!(a.plan, b.plan);
        assert_eq!(a.basis, b.basis);
        assert_ne!(a.basis, c.basis);
        assert!((a.plan.sum() - 1.0).abs() < 1e-12);
        assert!(a.plan.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn solver_kind_parsing() {
        assert_eq!("SISTA".parse::<SolverKind>().unwrap(), SolverKind::Sista);
        assert!("newton".parse::<SolverKind>().is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(BenchSpec::new(0, 5, 0.1, 1).validate().is_err());
        assert!(BenchSpec::new(5, 5, 0.0, 1).validate().is_err());
        assert!(BenchSpec::new(5, 5, 1.0, 1).validate().is_ok());
    }
}
