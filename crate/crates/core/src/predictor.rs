//! Open-loop prediction from a measured prefix and planned inputs.
//!
//! The predicted outputs are the free output positions of a query window that
//! minimize the membership residual against the data windows. The weights `g`
//! enter quadratically and are solved exactly at every evaluation; the outputs
//! are found by BFGS from several deterministic starting points.

use nalgebra::DVector;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::hankel::{GramProblem, OwnedWindow};
use crate::objective::{residual_from_terms, WindowObjective};
use crate::optim::{minimize, Minimum, QuasiNewtonSettings};
use crate::rng::{stream, Stream};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    /// Number of starting points (at least one is always used).
    pub restarts: usize,
    pub max_iters: usize,
    pub grad_tol: f64,
    /// Optional `ridge·|g|²` added to the residual; 0 keeps the plain residual.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self { restarts: 5, max_iters: 500, grad_tol: 1e-8, ridge: 0.0, seed: 0 }
    }
}

impl SolverSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0) {
            return arg_err("grad_tol must be > 0");
        }
        if !(self.ridge >= 0.0) || !self.ridge.is_finite() {
            return arg_err("ridge must be finite and >= 0");
        }
        Ok(())
    }

    pub(crate) fn quasi_newton(&self) -> QuasiNewtonSettings {
        QuasiNewtonSettings { max_iters: self.max_iters, grad_tol: self.grad_tol }
    }
}

/// A prediction query against a Gram problem of depth `t_m + t_p`.
#[derive(Debug)]
pub struct PredictionProblem<'a> {
    gram: &'a GramProblem,
    t_m: usize,
    t_p: usize,
    u_init: Vec<f64>,
    y_init: Vec<f64>,
    u_future: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverReport {
    pub iterations: usize,
    pub restarts_used: usize,
    pub failed_starts: usize,
    pub converged: bool,
    /// Infinity norm of the joint `(g, y)` residual gradient at exit.
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct PredictionResult {
    /// `t_p · n_y` predicted outputs, sample-major.
    pub y_pred: Vec<f64>,
    pub g: DVector<f64>,
    pub residual: f64,
    /// `k(ṽ, ṽ)` of the completed query window.
    pub self_kernel: f64,
    pub report: SolverReport,
}

impl<'a> PredictionProblem<'a> {
    /// `u_init`, `y_init` hold `t_m` samples and `u_future` holds `t_p`
    /// samples, each flattened sample-major.
    pub fn new(
        gram: &'a GramProblem,
        t_m: usize,
        t_p: usize,
        u_init: Vec<f64>,
        y_init: Vec<f64>,
        u_future: Vec<f64>,
    ) -> Result<Self> {
        if t_m == 0 || t_p == 0 {
            return arg_err("t_m and t_p must be positive");
        }
        if t_m + t_p != gram.depth() {
            return arg_err(format!("t_m + t_p = {} but the Gram depth is {}", t_m + t_p, gram.depth()));
        }
        let (nu, ny) = (gram.data().n_u(), gram.data().n_y());
        if u_init.len() != t_m * nu || y_init.len() != t_m * ny || u_future.len() != t_p * nu {
            return arg_err("prefix or future inputs have the wrong length");
        }
        if u_init.iter().chain(&y_init).chain(&u_future).any(|v| !v.is_finite()) {
            return arg_err("query values must be finite");
        }
        Ok(Self { gram, t_m, t_p, u_init, y_init, u_future })
    }

    pub fn gram(&self) -> &GramProblem {
        self.gram
    }

    pub fn t_m(&self) -> usize {
        self.t_m
    }

    pub fn t_p(&self) -> usize {
        self.t_p
    }

    /// Query window with the given future outputs.
    pub fn query(&self, y_future: &[f64]) -> Result<OwnedWindow> {
        let ny = self.gram.data().n_y();
        if y_future.len() != self.t_p * ny {
            return arg_err(format!("expected {} future outputs, got {}", self.t_p * ny, y_future.len()));
        }
        let mut u = self.u_init.clone();
        u.extend_from_slice(&self.u_future);
        let mut y = self.y_init.clone();
        y.extend_from_slice(y_future);
        Ok(OwnedWindow { u, y, n_u: self.gram.data().n_u(), n_y: ny })
    }

    fn objective(&self, y_future: &[f64], ridge: f64) -> Result<WindowObjective<'a>> {
        WindowObjective::new(self.gram, self.query(y_future)?, self.gram.depth(), self.t_m, ridge)
    }

    fn check_g(&self, g: &DVector<f64>) -> Result<()> {
        if g.len() != self.gram.columns() {
            return arg_err(format!("g has length {}, expected {}", g.len(), self.gram.columns()));
        }
        Ok(())
    }

    /// Last measured output held over the horizon.
    pub fn hold_last(&self) -> Vec<f64> {
        let ny = self.gram.data().n_y();
        let last = &self.y_init[(self.t_m - 1) * ny..];
        last.repeat(self.t_p)
    }
}

/// `gᵀKg + k(ṽ,ṽ) − 2 Σ g_i k(ṽ, v_i)`.
pub fn residual(problem: &PredictionProblem<'_>, g: &DVector<f64>, y_future: &[f64]) -> Result<f64> {
    problem.check_g(g)?;
    problem.objective(y_future, 0.0)?.residual_at(g)
}

/// Gradients of [`residual`] with respect to `g` and to the future outputs.
pub fn residual_grad(
    problem: &PredictionProblem<'_>,
    g: &DVector<f64>,
    y_future: &[f64],
) -> Result<(DVector<f64>, Vec<f64>)> {
    problem.check_g(g)?;
    let obj = problem.objective(y_future, 0.0)?;
    let (cross, _) = obj.kernel_terms()?;
    let grad_g = (problem.gram.gram() * g - cross) * 2.0;
    let mut grad_y = vec![0.0; y_future.len()];
    obj.free_gradient(g, &mut grad_y)?;
    Ok((grad_g, grad_y))
}

struct StartOutcome {
    minimum: Minimum,
}

/// Residuals below this fraction of `k(v, v)` are at round-off level.
const RESIDUAL_FLOOR: f64 = 1e-12;

/// Minimizes the residual over `(g, y_future)`.
pub fn predict(problem: &PredictionProblem<'_>, settings: &SolverSettings) -> Result<PredictionResult> {
    settings.validate()?;
    let base = problem.objective(&problem.hold_last(), settings.ridge)?;
    let starts = starting_points(problem, &base, settings);
    let qn = settings.quasi_newton();

    // A start whose residual is already at round-off level is a global
    // minimizer; iterating from there only wanders along flat directions.
    // The data continuation is tried first: it is an exact member whenever the
    // context matches a window, while other starts may only tie at round-off.
    let mut certified = None;
    if settings.ridge == 0.0 {
        let mut order: Vec<usize> = (0..starts.len()).collect();
        if order.len() > 1 {
            order.swap(0, 1);
        }
        for y0 in order.iter().map(|&i| &starts[i]) {
            let mut obj = problem.objective(y0, 0.0)?;
            let mut grad = vec![0.0; y0.len()];
            let e = obj.reduced_with_grad(y0, &mut grad)?;
            if e.reduced <= RESIDUAL_FLOOR * e.self_kernel {
                let grad_norm = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let minimum =
                    Minimum { x: y0.clone(), value: e.reduced, grad, iterations: 0, converged: true, grad_norm };
                certified = Some(StartOutcome { minimum });
                break;
            }
        }
    }

    let outcomes: Vec<Result<StartOutcome>> = match certified {
        Some(o) => vec![Ok(o)],
        None => starts
            .par_iter()
            .map(|y0| {
                let mut obj = problem.objective(y0, settings.ridge)?;
                let minimum = minimize(|y, grad| Ok(obj.reduced_with_grad(y, grad)?.reduced), y0, None, qn)?;
                Ok(StartOutcome { minimum })
            })
            .collect(),
    };

    let restarts_used = outcomes.len();
    let mut failures = Vec::new();
    let mut best: Option<StartOutcome> = None;
    for (i, o) in outcomes.into_iter().enumerate() {
        match o {
            Ok(o) => {
                if best.as_ref().is_none_or(|b| o.minimum.value < b.minimum.value) {
                    best = Some(o);
                }
            }
            Err(e) => {
                log::debug!("prediction start {i} aborted: {e}");
                failures.push(format!("start {i}: {e}"));
            }
        }
    }
    let Some(best) = best else {
        return Err(Error::SolverFailure(format!("all {restarts_used} starts failed: {}", failures.join("; "))));
    };

    let y_pred = best.minimum.x.clone();
    let mut obj = problem.objective(&y_pred, settings.ridge)?;
    let mut grad_y = vec![0.0; y_pred.len()];
    let eval = obj.reduced_with_grad(&y_pred, &mut grad_y)?;
    let residual = residual_from_terms(problem.gram, &eval.g, &eval.cross, eval.self_kernel);
    let grad_g = (problem.gram.gram() * &eval.g - &eval.cross) * 2.0 + &eval.g * (2.0 * settings.ridge);
    let grad_norm = grad_g.amax().max(grad_y.iter().fold(0.0, |m, v| m.max(v.abs())));

    Ok(PredictionResult {
        y_pred,
        g: eval.g,
        residual,
        self_kernel: eval.self_kernel,
        report: SolverReport {
            iterations: best.minimum.iterations,
            restarts_used,
            failed_starts: failures.len(),
            converged: best.minimum.converged,
            grad_norm,
        },
    })
}

/// Hold-last, then the continuation of the closest data window, then Gaussian
/// perturbations of those two.
fn starting_points(
    problem: &PredictionProblem<'_>,
    base: &WindowObjective<'_>,
    settings: &SolverSettings,
) -> Vec<Vec<f64>> {
    let ny = problem.gram.data().n_y();
    let hold = problem.hold_last();
    let count = settings.restarts.max(1);
    let mut starts = vec![hold.clone()];
    if count == 1 {
        return starts;
    }
    let (_, nearest) = base.nearest_windows(problem.gram.depth(), problem.t_m)[0];
    let w = problem.gram.window(nearest);
    let continuation = w.y[problem.t_m * ny..].to_vec();
    starts.push(continuation.clone());

    let sigma = 0.1 * problem.gram.data().output_std();
    let mut rng = stream(settings.seed, Stream::Restarts);
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).unwrap();
    for i in 2..count {
        let center = if i % 2 == 0 { &hold } else { &continuation };
        starts.push(center.iter().map(|v| v + normal.sample(&mut rng)).collect());
    }
    starts
}

