use ndarray::Array1;

use super::{
    cost_delta, objective_change, run, InitialPoint, Iterate, Method, ProxKind, Solution,
    SolverConfig, StepOutcome, StepPolicy,
};
use crate::error::Result;
use crate::ot::{self, CostParams, Potentials, Problem};

/// Point plus the step the next proximal update starts from.
#[derive(Clone, Debug, PartialEq)]
pub struct SistaState {
    pub potentials: Potentials,
    pub beta: CostParams,
    pub rho: f64,
}

pub(crate) struct Sista {
    rho: f64,
    policy: StepPolicy,
    prox: ProxKind,
}

impl Sista {
    pub(crate) fn new(config: &SolverConfig) -> Self {
        Self {
            rho: config.rho,
            policy: config.step,
            prox: config.prox.clone(),
        }
    }

    /// Proximal-gradient update of `β` at fixed `(u, v)`. Returns the new
    /// `β` and the step that produced it.
    fn beta_step(
        &self,
        it: &Iterate,
        plan0: &ndarray::Array2<f64>,
        grad: &Array1<f64>,
        problem: &Problem,
    ) -> (Array1<f64>, f64) {
        let gamma = problem.gamma();
        let mut rho = self.rho;
        loop {
            let z = &it.beta - &(grad * rho);
            let cand = self.prox.apply(z.view(), rho * gamma);
            let delta = &cand - &it.beta;
            let StepPolicy::Backtracking {
                shrink,
                sufficient_decrease,
                min_step,
                ..
            } = self.policy
            else {
                return (cand, rho);
            };
            if delta.iter().all(|&d| d == 0.0) {
                return (cand, rho);
            }
            let dc = cost_delta(problem, &delta);
            let (df, slack) = objective_change(plan0, None, None, &dc, problem);
            let lin = grad.dot(&delta);
            let quad = delta.dot(&delta) / (2.0 * rho);
            if df <= lin + sufficient_decrease * quad + slack {
                return (cand, rho);
            }
            if rho <= min_step {
                // Step floor reached: move only if Φ does not increase.
                let l1_new: f64 = cand.iter().map(|b| b.abs()).sum();
                let l1_old: f64 = it.beta.iter().map(|b| b.abs()).sum();
                if df + gamma * (l1_new - l1_old) <= 0.0 {
                    return (cand, rho);
                }
                return (it.beta.clone(), rho);
            }
            rho = (rho * shrink).max(min_step);
        }
    }
}

impl Method for Sista {
    const NAME: &'static str = "sista";

    fn step(&mut self, it: &mut Iterate, problem: &Problem) -> Result<StepOutcome> {
        it.sinkhorn_sweep(problem)?;
        let eval = ot::evaluate(it.u.view(), it.v.view(), it.cost.view(), problem.plan())?;
        let grad = ot::grad_beta_from_plan(problem.basis(), eval.plan.view(), problem.plan());
        let (beta, rho) = self.beta_step(it, &eval.plan, &grad, problem);
        if beta != it.beta {
            it.cost = ot::cost_from_basis(problem.basis(), beta.view());
            it.beta = beta;
        }
        if let StepPolicy::Backtracking { expand, .. } = self.policy {
            self.rho = rho * expand;
        }
        Ok(StepOutcome { rho, failure: None })
    }
}

/// One SISTA iteration: `u` then `v` by exact minimization at `β_t`, then
/// `β_{t+1} = prox_{ργ|·|₁}(β_t - ρ ∇_β F(u_{t+1}, v_{t+1}, β_t))`.
pub fn sista_step(state: &SistaState, problem: &Problem, config: &SolverConfig) -> Result<SistaState> {
    config.validate(problem.k())?;
    let mut it = Iterate::new(
        &InitialPoint {
            potentials: state.potentials.clone(),
            beta: state.beta.clone(),
        },
        problem,
    )?;
    let mut method = Sista::new(config);
    method.rho = state.rho;
    method.step(&mut it, problem)?;
    Ok(SistaState {
        potentials: Potentials::new(it.u, it.v).normalized(),
        beta: CostParams::new(it.beta),
        rho: method.rho,
    })
}

/// Runs SISTA from `init` until the KKT residual drops below `config.tol_kkt`
/// or another stopping rule fires.
pub fn sista_solve(problem: &Problem, config: &SolverConfig, init: &InitialPoint) -> Result<Solution> {
    run(Sista::new(config), problem, config, init)
}
