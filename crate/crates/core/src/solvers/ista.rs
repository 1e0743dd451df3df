use super::{
    cost_delta, objective_change, run, InitialPoint, Iterate, Method, ProxKind, Solution,
    SolverConfig, StepOutcome, StepPolicy,
};
use crate::error::Result;
use crate::ot::{self, Problem};

/// Proximal gradient on `(u, v, β)`: plain gradient steps on the potentials
/// with step `s·rho_uv`, soft thresholding on `β` with step `s·rho`. A single
/// backtracking scale `s` is shared by both blocks.
pub(crate) struct Ista {
    scale: f64,
    rho_beta: f64,
    rho_uv: f64,
    policy: StepPolicy,
    prox: ProxKind,
}

impl Ista {
    pub(crate) fn new(config: &SolverConfig) -> Self {
        Self {
            scale: 1.0,
            rho_beta: config.rho,
            rho_uv: config.rho_uv,
            policy: config.step,
            prox: config.prox.clone(),
        }
    }
}

impl Method for Ista {
    const NAME: &'static str = "ista";

    fn step(&mut self, it: &mut Iterate, problem: &Problem) -> Result<StepOutcome> {
        let gamma = problem.gamma();
        let eval = ot::evaluate(it.u.view(), it.v.view(), it.cost.view(), problem.plan())?;
        let gb = ot::grad_beta_from_plan(problem.basis(), eval.plan.view(), problem.plan());
        let (gu, gv) = ot::grad_uv_from_plan(eval.plan.view(), problem.plan());

        let (du, dv, dbeta, rho_b) = loop {
            let rho_b = self.scale * self.rho_beta;
            let rho_uv = self.scale * self.rho_uv;
            let du = &gu * -rho_uv;
            let dv = &gv * -rho_uv;
            let z = &it.beta - &(&gb * rho_b);
            let dbeta = self.prox.apply(z.view(), rho_b * gamma) - &it.beta;
            let StepPolicy::Backtracking {
                shrink,
                sufficient_decrease,
                min_step,
                ..
            } = self.policy
            else {
                break (du, dv, dbeta, rho_b);
            };
            let dc = cost_delta(problem, &dbeta);
            let (df, slack) = objective_change(&eval.plan, Some(&du), Some(&dv), &dc, problem);
            let lin = gu.dot(&du) + gv.dot(&dv) + gb.dot(&dbeta);
            let quad = (du.dot(&du) + dv.dot(&dv)) / (2.0 * rho_uv) + dbeta.dot(&dbeta) / (2.0 * rho_b);
            if df <= lin + sufficient_decrease * quad + slack {
                break (du, dv, dbeta, rho_b);
            }
            if rho_b.min(rho_uv) <= min_step {
                let l1_new: f64 = (&it.beta + &dbeta).iter().map(|b| b.abs()).sum();
                let l1_old: f64 = it.beta.iter().map(|b| b.abs()).sum();
                if df + gamma * (l1_new - l1_old) <= 0.0 {
                    break (du, dv, dbeta, rho_b);
                }
                return Ok(StepOutcome {
                    rho: rho_b,
                    failure: None,
                });
            }
            self.scale = (self.scale * shrink).max(min_step / self.rho_beta.min(self.rho_uv));
        };

        it.u += &du;
        it.v += &dv;
        if dbeta.iter().any(|&d| d != 0.0) {
            it.beta += &dbeta;
            it.cost = ot::cost_from_basis(problem.basis(), it.beta.view());
        }
        it.normalize();
        if let StepPolicy::Backtracking { expand, .. } = self.policy {
            self.scale *= expand;
        }
        Ok(StepOutcome {
            rho: rho_b,
            failure: None,
        })
    }
}

/// Runs the full-vector proximal gradient baseline.
pub fn ista_solve(problem: &Problem, config: &SolverConfig, init: &InitialPoint) -> Result<Solution> {
    run(Ista::new(config), problem, config, init)
}
