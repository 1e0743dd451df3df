use ndarray::Array2;

use super::{
    run, CoordinateConfig, InitialPoint, Iterate, Method, ProxKind, Solution, SolverConfig,
    StepOutcome, StopReason,
};
use super::prox::SignConstraint;
use crate::error::Result;
use crate::ot::Problem;

/// Exit state of one univariate minimization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordinateOutcome {
    pub value: f64,
    /// Stationarity residual at `value`: `|h(b) + γ sign(b)|`, or
    /// `max(0, |h(0)| - γ)` when `b = 0`.
    pub residual: f64,
    pub evaluations: usize,
    /// False when no sign change was found within the bracket cap.
    pub bracketed: bool,
}

/// Minimizes `f(b) + γ|b|` for a smooth convex `f` given its derivative `h`.
///
/// The kink at zero is handled first: if `|h(0)| ≤ γ` (or the sign
/// constraint blocks the descent direction) the minimizer is 0. Otherwise the
/// root of `h(b) ± γ` is bracketed starting from `[current - 1, current + 1]`,
/// doubling the width, and refined by bisection.
pub fn coordinate_minimize(
    mut h: impl FnMut(f64) -> f64,
    current: f64,
    gamma: f64,
    sign: SignConstraint,
    config: &CoordinateConfig,
) -> CoordinateOutcome {
    let h0 = h(0.0);
    let mut evaluations = 1;
    let zero = |evaluations| CoordinateOutcome {
        value: 0.0,
        residual: 0.0,
        evaluations,
        bracketed: true,
    };
    // Orientation: solve psi(s) = 0 for s > 0 with b = dir * s.
    let dir = if h0 < -gamma {
        1.0
    } else if h0 > gamma {
        -1.0
    } else {
        return zero(evaluations);
    };
    match (sign, dir > 0.0) {
        (SignConstraint::NonNegative, false) | (SignConstraint::NonPositive, true) => {
            return zero(evaluations)
        }
        _ => {}
    }
    // psi is increasing in s, negative at s = 0.
    let mut psi = |s: f64| dir * h(dir * s) + gamma;
    let start = dir * current;

    let mut lo = 0.0;
    let mut hi = start.max(0.0) + 1.0;
    if start - 1.0 > 0.0 {
        let x = start - 1.0;
        evaluations += 1;
        if psi(x) < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
    }
    let mut f_hi = psi(hi);
    evaluations += 1;
    while f_hi < 0.0 {
        let width = 2.0 * (hi - lo);
        if width > config.max_bracket_width {
            return CoordinateOutcome {
                value: dir * hi,
                residual: f_hi.abs(),
                evaluations,
                bracketed: false,
            };
        }
        lo = hi;
        hi = lo + width;
        f_hi = psi(hi);
        evaluations += 1;
    }
    if f_hi.abs() <= config.bisect_tol {
        return CoordinateOutcome {
            value: dir * hi,
            residual: f_hi.abs(),
            evaluations,
            bracketed: true,
        };
    }

    let (mut best, mut best_res) = (hi, f_hi.abs());
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f = psi(mid);
        evaluations += 1;
        if f.abs() < best_res {
            best = mid;
            best_res = f.abs();
        }
        if best_res <= config.bisect_tol {
            break;
        }
        if f < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    CoordinateOutcome {
        value: dir * best,
        residual: best_res,
        evaluations,
        bracketed: true,
    }
}

/// Sinkhorn sweep on `(u, v)`, then one exact pass over the coordinates of `β`.
pub(crate) struct CoordinateDescent {
    config: CoordinateConfig,
    prox: ProxKind,
    /// Largest stationarity residual seen at an inner exit in the last sweep.
    pub(crate) last_inner_residual: f64,
}

impl CoordinateDescent {
    pub(crate) fn new(config: &SolverConfig) -> Self {
        Self {
            config: config.coordinate,
            prox: config.prox.clone(),
            last_inner_residual: 0.0,
        }
    }
}

impl Method for CoordinateDescent {
    const NAME: &'static str = "cd";

    fn step(&mut self, it: &mut Iterate, problem: &Problem) -> Result<StepOutcome> {
        it.sinkhorn_sweep(problem)?;
        let obs = problem.plan();
        let n = obs.n();
        let entries = obs.entries();
        let gamma = problem.gamma();

        // Log-kernel λ_ij = u_i + v_j - c_ij on the support, kept in sync with β.
        let mut lambda = Array2::<f64>::zeros((n, n));
        for ((i, j), l) in lambda.indexed_iter_mut() {
            *l = it.u[i] + it.v[j] - it.cost[[i, j]];
        }
        let mut base = Array2::<f64>::zeros((n, n));
        let mut failure = None;
        self.last_inner_residual = 0.0;

        for k in 0..problem.k() {
            let d = problem.basis().matrix(k);
            let bk = it.beta[k];
            // Exponent with coordinate k removed.
            base.assign(&lambda);
            base.scaled_add(bk, &d);
            let mut moment = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if obs.in_support(i, j) {
                        moment += entries[[i, j]] * d[[i, j]];
                    }
                }
            }
            // h(b) = ∂F/∂β_k with the other coordinates fixed; increasing in b.
            let h = |b: f64| {
                let mut s = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        if obs.in_support(i, j) {
                            let dij = d[[i, j]];
                            s += (base[[i, j]] - b * dij).exp() * dij;
                        }
                    }
                }
                moment - s
            };
            let out = coordinate_minimize(h, bk, gamma, self.prox.sign(k), &self.config);
            if !out.bracketed {
                failure = Some(StopReason::BracketFailure);
                break;
            }
            self.last_inner_residual = self.last_inner_residual.max(out.residual);
            let delta = out.value - bk;
            if delta != 0.0 {
                lambda.scaled_add(-delta, &d);
                it.cost.scaled_add(delta, &d);
                it.beta[k] = out.value;
            }
        }
        Ok(StepOutcome {
            rho: f64::NAN,
            failure,
        })
    }
}

/// Runs the Sinkhorn plus coordinate-wise bisection baseline.
pub fn cd_solve(problem: &Problem, config: &SolverConfig, init: &InitialPoint) -> Result<Solution> {
    run(CoordinateDescent::new(config), problem, config, init)
}
