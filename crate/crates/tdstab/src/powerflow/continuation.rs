//! Loading continuation: raise λ until the power flow stops converging.

use std::io::Write;

use super::{solve_warm, PowerFlowError, SolveResult, SolverOptions};
use crate::network::NetworkModel;

#[derive(Clone, Copy, Debug)]
pub struct NoseOptions {
    /// Loading at which the search starts; must be solvable.
    pub start: f64,
    pub initial_step: f64,
    /// The search stops once the step has been halved below this.
    pub min_step: f64,
    /// Safety cap for networks without a loadability limit.
    pub max_lambda: f64,
    /// Largest change of any node voltage (p.u.) accepted in one step; larger
    /// jumps land on a different solution branch and are retried with a
    /// smaller step.
    pub max_jump: f64,
    pub solver: SolverOptions,
}

impl Default for NoseOptions {
    fn default() -> Self {
        Self {
            start: 1.0,
            initial_step: 0.05,
            min_step: 1e-6,
            max_lambda: 1e4,
            max_jump: 0.1,
            solver: SolverOptions::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NoseResult {
    pub lambda_max: f64,
    /// Step whose attempt beyond `lambda_max` was the last to fail.
    pub final_step: f64,
    /// Accepted points in increasing λ; the last one is at `lambda_max`.
    pub trajectory: Vec<(f64, SolveResult)>,
}

impl NoseResult {
    pub fn last(&self) -> &SolveResult {
        &self.trajectory.last().expect("trajectory holds the base case").1
    }

    /// Writes `lambda,total_p,min_v` rows.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "lambda,total_p,min_v")?;
        for (lambda, r) in &self.trajectory {
            writeln!(w, "{lambda},{},{}", r.load_power.re, r.min_voltage())?;
        }
        Ok(())
    }
}

fn jump(a: &SolveResult, b: &SolveResult) -> f64 {
    a.node_voltages
        .iter()
        .filter_map(|(n, v)| b.node_voltages.get(n).map(|w| v.max_abs_diff(w)))
        .fold(0.0, f64::max)
}

/// [`find_lambda_max_with`] using default options.
pub fn find_lambda_max(model: &NetworkModel) -> Result<NoseResult, PowerFlowError> {
    find_lambda_max_with(model, &NoseOptions::default())
}

/// Steps λ up from `opts.start`, halving the step whenever the solve fails,
/// the delivered active power drops (past the nose of a voltage-dependent
/// load) or the solution moves discontinuously.
pub fn find_lambda_max_with(
    model: &NetworkModel,
    opts: &NoseOptions,
) -> Result<NoseResult, PowerFlowError> {
    let base = match solve_warm(model, opts.start, &opts.solver, None) {
        Ok(r) => r,
        Err(e) if e.is_divergence() => {
            return Err(PowerFlowError::BaseCaseDiverged {
                lambda: opts.start,
                reason: e.to_string(),
            })
        }
        Err(e) => return Err(e),
    };
    let mut lambda = opts.start;
    let mut step = opts.initial_step;
    let mut trajectory = vec![(lambda, base)];
    while step >= opts.min_step && lambda < opts.max_lambda {
        let trial = lambda + step;
        let prev = &trajectory.last().unwrap().1;
        match solve_warm(model, trial, &opts.solver, Some(prev)) {
            Ok(r) if r.load_power.re >= prev.load_power.re && jump(prev, &r) <= opts.max_jump => {
                lambda = trial;
                trajectory.push((trial, r));
            }
            Ok(_) => step /= 2.0,
            Err(e) if e.is_divergence() => step /= 2.0,
            Err(e) => return Err(e),
        }
    }
    Ok(NoseResult {
        lambda_max: lambda,
        final_step: step * 2.0,
        trajectory,
    })
}
