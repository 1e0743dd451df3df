//! Solvers for `min Φ(u, v, β) = F(u, v, β) + γ |β|₁`.
//!
//! * [`sista_solve`]: exact Sinkhorn half-steps in `(u, v)` followed by one
//!   proximal-gradient step in `β`.
//! * [`ista_solve`]: proximal gradient on the full vector, gradient steps on
//!   `(u, v)` and soft thresholding on `β`.
//! * [`cd_solve`]: Sinkhorn half-steps then exact univariate minimization of
//!   each `β_k` by bisection.
//!
//! All three share one driver: the same stopping rules, the same trace
//! schema and the same wall-clock accounting (diagnostics for the trace are
//! computed outside the timed window).

mod cd;
mod ista;
mod prox;
mod sista;
mod trace;

use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView1};

use crate::error::{Error, Result};
use crate::numeric::inf_norm;
use crate::ot::{self, CostParams, Potentials, Problem};

pub use cd::{cd_solve, coordinate_minimize, CoordinateOutcome};
pub use ista::ista_solve;
pub use prox::{prox_l1, prox_l1_signed, soft_threshold, soft_threshold_signed, SignConstraint};
pub use sista::{sista_solve, sista_step, SistaState};
pub use trace::{SolverTrace, TraceRecord, TRACE_HEADER};

/// Step-size rule for the proximal steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepPolicy {
    /// Constant step `rho`.
    Fixed,
    /// Shrink until the proximal sufficient-decrease condition
    /// `F(x⁺) ≤ F(x) + ∇F·(x⁺ - x) + σ |x⁺ - x|² / (2ρ)` holds, then grow
    /// the step by `expand` for the next iteration.
    Backtracking {
        shrink: f64,
        sufficient_decrease: f64,
        expand: f64,
        min_step: f64,
    },
}

impl Default for StepPolicy {
    fn default() -> Self {
        StepPolicy::Backtracking {
            shrink: 0.5,
            sufficient_decrease: 1.0,
            expand: 1.5,
            min_step: 1e-12,
        }
    }
}

/// Which proximal operator handles the `β` block.
#[derive(Clone, Debug, Default, PartialEq)]
pub enum ProxKind {
    #[default]
    L1,
    SignConstrained(Vec<SignConstraint>),
}

impl ProxKind {
    pub(crate) fn signs(&self) -> Option<&[SignConstraint]> {
        match self {
            ProxKind::L1 => None,
            ProxKind::SignConstrained(s) => Some(s),
        }
    }

    pub(crate) fn apply(&self, z: ArrayView1<'_, f64>, tau: f64) -> Array1<f64> {
        match self {
            ProxKind::L1 => prox_l1(z, tau),
            ProxKind::SignConstrained(s) => prox_l1_signed(z, tau, s),
        }
    }

    pub(crate) fn sign(&self, k: usize) -> SignConstraint {
        self.signs().map_or(SignConstraint::Free, |s| s[k])
    }
}

/// Inner settings for the coordinate-descent baseline.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordinateConfig {
    /// Stationarity residual at which bisection stops.
    pub bisect_tol: f64,
    /// Largest bracket width tried before giving up.
    pub max_bracket_width: f64,
}

impl Default for CoordinateConfig {
    fn default() -> Self {
        Self {
            bisect_tol: 1e-10,
            max_bracket_width: 2f64.powi(60),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Initial (or fixed) step for `β`.
    pub rho: f64,
    /// Initial (or fixed) step for `(u, v)`; used by ISTA only.
    pub rho_uv: f64,
    pub step: StepPolicy,
    pub max_iter: usize,
    /// Stop once the KKT residual is at or below this value.
    pub tol_kkt: f64,
    /// Optional stop on relative change of Φ between iterations.
    pub tol_obj: Option<f64>,
    pub prox: ProxKind,
    /// Wall-clock budget in seconds (timed window only).
    pub max_seconds: Option<f64>,
    /// Reference optimum used to fill the trace gap column.
    pub reference_phi: Option<f64>,
    /// Stop once `Φ - Φ*` is at or below this value (needs `reference_phi`).
    pub target_gap: Option<f64>,
    pub coordinate: CoordinateConfig,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            rho_uv: 1.0,
            step: StepPolicy::default(),
            max_iter: 100_000,
            tol_kkt: 1e-8,
            tol_obj: None,
            prox: ProxKind::L1,
            max_seconds: None,
            reference_phi: None,
            target_gap: None,
            coordinate: CoordinateConfig::default(),
        }
    }
}

impl SolverConfig {
    pub fn validate(&self, k: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad(format!("rho must be > 0, got {}", self.rho));
        }
        if !(self.rho_uv > 0.0 && self.rho_uv.is_finite()) {
            return bad(format!("rho_uv must be > 0, got {}", self.rho_uv));
        }
        if let StepPolicy::Backtracking {
            shrink,
            sufficient_decrease,
            expand,
            min_step,
        } = self.step
        {
            if !(shrink > 0.0 && shrink < 1.0) {
                return bad(format!("shrink factor must lie in (0, 1), got {shrink}"));
            }
            if !(sufficient_decrease > 0.0 && sufficient_decrease <= 1.0) {
                return bad(format!("sufficient-decrease constant must lie in (0, 1], got {sufficient_decrease}"));
            }
            if !(expand >= 1.0) {
                return bad(format!("expansion factor must be >= 1, got {expand}"));
            }
            if !(min_step > 0.0) {
                return bad(format!("minimum step must be > 0, got {min_step}"));
            }
        }
        if self.max_iter == 0 {
            return bad("max_iter must be positive".into());
        }
        if !(self.tol_kkt > 0.0) {
            return bad(format!("tol_kkt must be > 0, got {}", self.tol_kkt));
        }
        if let Some(t) = self.tol_obj {
            if !(t > 0.0) {
                return bad(format!("tol_obj must be > 0, got {t}"));
            }
        }
        if self.target_gap.is_some() && self.reference_phi.is_none() {
            return bad("target_gap requires reference_phi".into());
        }
        if let ProxKind::SignConstrained(s) = &self.prox {
            if s.len() != k {
                return bad(format!("{} sign constraints for K = {k}", s.len()));
            }
        }
        let c = self.coordinate;
        if !(c.bisect_tol > 0.0 && c.max_bracket_width > 0.0) {
            return bad("coordinate tolerances must be > 0".into());
        }
        Ok(())
    }
}

/// Starting point for a solver.
#[derive(Clone, Debug, PartialEq)]
pub struct InitialPoint {
    pub potentials: Potentials,
    pub beta: CostParams,
}

impl InitialPoint {
    pub fn zeros(problem: &Problem) -> Self {
        Self {
            potentials: Potentials::zeros(problem.n()),
            beta: CostParams::zeros(problem.k()),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    Kkt,
    TargetGap,
    ObjectiveStalled,
    MaxIter,
    TimeLimit,
    BracketFailure,
}

#[derive(Clone, Debug)]
pub struct Solution {
    pub solver: &'static str,
    pub potentials: Potentials,
    pub beta: CostParams,
    pub phi: f64,
    pub kkt_residual: f64,
    pub converged: bool,
    pub iterations: usize,
    pub stop: StopReason,
    pub trace: SolverTrace,
}

impl Solution {
    pub fn init_point(&self) -> InitialPoint {
        InitialPoint {
            potentials: self.potentials.clone(),
            beta: self.beta.clone(),
        }
    }
}

/// Optimality violation at a point.
///
/// Maximum of `|∇_u F|∞` (without the pinned first coordinate), `|∇_v F|∞`
/// and, per component of `β`, `|∂_k F + γ sign(β_k)|` when `β_k ≠ 0` or
/// `max(0, |∂_k F| - γ)` when `β_k = 0`.
pub fn kkt_residual(potentials: &Potentials, beta: &CostParams, problem: &Problem) -> Result<f64> {
    kkt_residual_with(potentials, beta, problem, &ProxKind::L1)
}

/// [`kkt_residual`] for a sign-constrained problem.
pub fn kkt_residual_with(
    potentials: &Potentials,
    beta: &CostParams,
    problem: &Problem,
    prox: &ProxKind,
) -> Result<f64> {
    let model = ot::plan(potentials, beta, problem)?;
    let gb = ot::grad_beta_from_plan(problem.basis(), model.view(), problem.plan());
    let (gu, gv) = ot::grad_uv_from_plan(model.view(), problem.plan());
    Ok(kkt_from_parts(&gu, &gv, &gb, beta.beta.view(), problem.gamma(), prox))
}

pub(crate) fn beta_violation(g: f64, b: f64, gamma: f64, sign: SignConstraint) -> f64 {
    if b > 0.0 {
        (g + gamma).abs()
    } else if b < 0.0 {
        (g - gamma).abs()
    } else {
        match sign {
            SignConstraint::Free => (g.abs() - gamma).max(0.0),
            // Only directions into the feasible half-line matter.
            SignConstraint::NonNegative => (-g - gamma).max(0.0),
            SignConstraint::NonPositive => (g - gamma).max(0.0),
        }
    }
}

pub(crate) fn kkt_from_parts(
    gu: &Array1<f64>,
    gv: &Array1<f64>,
    gb: &Array1<f64>,
    beta: ArrayView1<'_, f64>,
    gamma: f64,
    prox: &ProxKind,
) -> f64 {
    let ures = inf_norm(gu.iter().skip(1));
    let vres = inf_norm(gv.iter());
    let bres = gb
        .iter()
        .zip(beta.iter())
        .enumerate()
        .fold(0.0_f64, |m, (k, (&g, &b))| m.max(beta_violation(g, b, gamma, prox.sign(k))));
    ures.max(vres).max(bres)
}

/// Current point of an iterative method, with the cost matrix cached.
#[derive(Clone, Debug)]
pub(crate) struct Iterate {
    pub u: Array1<f64>,
    pub v: Array1<f64>,
    pub beta: Array1<f64>,
    pub cost: Array2<f64>,
}

impl Iterate {
    fn new(init: &InitialPoint, problem: &Problem) -> Result<Self> {
        problem.check_beta(&init.beta)?;
        problem.check_potentials(&init.potentials)?;
        if init
            .beta
            .beta
            .iter()
            .chain(init.potentials.u.iter())
            .chain(init.potentials.v.iter())
            .any(|x| !x.is_finite())
        {
            return Err(Error::InvalidProblem("initial point has non-finite entries".into()));
        }
        Ok(Self {
            u: init.potentials.u.clone(),
            v: init.potentials.v.clone(),
            beta: init.beta.beta.clone(),
            cost: ot::cost_from_basis(problem.basis(), init.beta.beta.view()),
        })
    }

    pub(crate) fn normalize(&mut self) {
        let shift = self.u[0];
        if shift != 0.0 {
            self.u.mapv_inplace(|x| x - shift);
            self.v.mapv_inplace(|x| x + shift);
            self.u[0] = 0.0;
        }
    }

    fn potentials(&self) -> Potentials {
        Potentials::new(self.u.clone(), self.v.clone()).normalized()
    }

    pub(crate) fn sinkhorn_sweep(&mut self, problem: &Problem) -> Result<()> {
        self.u = ot::u_update_with_cost(self.v.view(), self.cost.view(), problem.plan())?;
        self.v = ot::v_update_with_cost(self.u.view(), self.cost.view(), problem.plan())?;
        self.normalize();
        Ok(())
    }
}

/// Exact change `F(x + δ) - F(x)` for the log-kernel perturbation
/// `δλ_ij = du_i + dv_j - dc_ij`, evaluated from the current plan with
/// `expm1` so that tiny steps are not swamped by cancellation. Also returns
/// a rounding bound for the comparison. Returns `+∞` when the perturbed
/// exponents leave the safe range.
pub(crate) fn objective_change(
    plan0: &Array2<f64>,
    du: Option<&Array1<f64>>,
    dv: Option<&Array1<f64>>,
    dc: &Array2<f64>,
    problem: &Problem,
) -> (f64, f64) {
    let obs = problem.plan();
    let entries = obs.entries();
    let n = obs.n();
    let mut acc = crate::numeric::CompensatedSum::new();
    let mut mag = 0.0;
    for i in 0..n {
        let dui = du.map_or(0.0, |d| d[i]);
        for j in 0..n {
            if !obs.in_support(i, j) {
                continue;
            }
            let dl = dui + dv.map_or(0.0, |d| d[j]) - dc[[i, j]];
            let p0 = plan0[[i, j]];
            if dl > 1.0 && p0 > 0.0 && p0.ln() + dl > ot::MAX_EXPONENT {
                return (f64::INFINITY, 0.0);
            }
            let term = p0 * dl.exp_m1() - entries[[i, j]] * dl;
            if !term.is_finite() {
                return (f64::INFINITY, 0.0);
            }
            mag += term.abs() + p0 * dl.abs();
            acc.add(term);
        }
    }
    (acc.value(), 8.0 * f64::EPSILON * mag)
}

/// `Σ_k δ_k d̃ᵏ` over the nonzero entries of `delta`.
pub(crate) fn cost_delta(problem: &Problem, delta: &Array1<f64>) -> Array2<f64> {
    ot::cost_from_basis(problem.basis(), delta.view())
}

pub(crate) struct StepOutcome {
    pub rho: f64,
    pub failure: Option<StopReason>,
}

pub(crate) trait Method {
    const NAME: &'static str;
    fn step(&mut self, it: &mut Iterate, problem: &Problem) -> Result<StepOutcome>;
}

struct Diagnostics {
    phi: f64,
    kkt: f64,
}

fn diagnose(it: &Iterate, problem: &Problem, prox: &ProxKind) -> Result<Diagnostics> {
    let eval = ot::evaluate(it.u.view(), it.v.view(), it.cost.view(), problem.plan())?;
    let gb = ot::grad_beta_from_plan(problem.basis(), eval.plan.view(), problem.plan());
    let (gu, gv) = ot::grad_uv_from_plan(eval.plan.view(), problem.plan());
    let l1: f64 = it.beta.iter().map(|b| b.abs()).sum();
    Ok(Diagnostics {
        phi: eval.objective + problem.gamma() * l1,
        kkt: kkt_from_parts(&gu, &gv, &gb, it.beta.view(), problem.gamma(), prox),
    })
}

pub(crate) fn run<M: Method>(
    mut method: M,
    problem: &Problem,
    config: &SolverConfig,
    init: &InitialPoint,
) -> Result<Solution> {
    config.validate(problem.k())?;
    let mut it = Iterate::new(init, problem)?;
    let gap_of = |phi: f64| config.reference_phi.map(|r| (phi - r).max(0.0));
    let nnz = |b: &Array1<f64>| b.iter().filter(|&&x| x != 0.0).count();

    let mut trace = SolverTrace::new();
    let d0 = diagnose(&it, problem, &config.prox)?;
    trace.push(TraceRecord {
        t: 0,
        elapsed: 0.0,
        phi: d0.phi,
        gap: gap_of(d0.phi),
        kkt: d0.kkt,
        nnz: nnz(&it.beta),
        rho: f64::NAN,
    });
    let finish = |it: &Iterate, d: &Diagnostics, iterations, stop, trace| Solution {
        solver: M::NAME,
        potentials: it.potentials(),
        beta: CostParams::new(it.beta.clone()),
        phi: d.phi,
        kkt_residual: d.kkt,
        converged: d.kkt <= config.tol_kkt,
        iterations,
        stop,
        trace,
    };
    if d0.kkt <= config.tol_kkt {
        return Ok(finish(&it, &d0, 0, StopReason::Kkt, trace));
    }

    let mut best = (d0.phi, it.clone(), d0);
    let mut prev_phi = best.0;
    let mut elapsed = Duration::ZERO;
    for t in 1..=config.max_iter {
        let start = Instant::now();
        let out = method.step(&mut it, problem)?;
        elapsed += start.elapsed();

        let d = diagnose(&it, problem, &config.prox)?;
        let gap = gap_of(d.phi);
        trace.push(TraceRecord {
            t,
            elapsed: elapsed.as_secs_f64(),
            phi: d.phi,
            gap,
            kkt: d.kkt,
            nnz: nnz(&it.beta),
            rho: out.rho,
        });

        let stop = if d.kkt <= config.tol_kkt {
            Some(StopReason::Kkt)
        } else if let Some(reason) = out.failure {
            Some(reason)
        } else if config.target_gap.is_some_and(|g| gap.is_some_and(|x| x <= g)) {
            Some(StopReason::TargetGap)
        } else if config
            .tol_obj
            .is_some_and(|tol| (prev_phi - d.phi).abs() <= tol * d.phi.abs().max(1.0))
        {
            Some(StopReason::ObjectiveStalled)
        } else if config.max_seconds.is_some_and(|s| elapsed.as_secs_f64() >= s) {
            Some(StopReason::TimeLimit)
        } else {
            None
        };
        prev_phi = d.phi;
        if let Some(stop) = stop {
            return Ok(finish(&it, &d, t, stop, trace));
        }
        if d.phi < best.0 {
            best = (d.phi, it.clone(), d);
        }
    }
    let (_, it, d) = best;
    Ok(finish(&it, &d, config.max_iter, StopReason::MaxIter, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_beta_subgradient_interval() {
        assert_eq!(beta_violation(0.5, 0.0, 1.0, SignConstraint::Free), 0.0);
        assert!((beta_violation(1.5, 0.0, 1.0, SignConstraint::Free) - 0.5).abs() < 1e-15);
        assert!((beta_violation(-0.25, 2.0, 1.0, SignConstraint::Free) - 0.75).abs() < 1e-15);
        assert!((beta_violation(0.25, -2.0, 1.0, SignConstraint::Free) - 0.75).abs() < 1e-15);
        // Pushing against the constraint is not a violation.
        assert_eq!(beta_violation(5.0, 0.0, 1.0, SignConstraint::NonNegative), 0.0);
        assert!((beta_violation(-5.0, 0.0, 1.0, SignConstraint::NonNegative) - 4.0).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(SolverConfig::default().validate(3).is_ok());
        let bad = SolverConfig {
            rho: 0.0,
            ..Default::default()
        };
        assert!(bad.validate(3).is_err());
        let bad = SolverConfig {
            step: StepPolicy::Backtracking {
                shrink: 1.0,
                sufficient_decrease: 1.0,
                expand: 1.5,
                min_step: 1e-12,
            },
            ..Default::default()
        };
        assert!(bad.validate(3).is_err());
        let bad = SolverConfig {
            prox: ProxKind::SignConstrained(vec![SignConstraint::Free]),
            ..Default::default()
        };
        assert!(bad.validate(3).is_err());
        let bad = SolverConfig {
            target_gap: Some(1e-6),
            ..Default::default()
        };
        assert!(bad.validate(3).is_err());
    }
}
