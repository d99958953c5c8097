//! Receding-horizon predictive control over the kernel Hankel span.
//!
//! Each step chooses future inputs and outputs that minimize the stage cost
//! while the completed window (measured context followed by the plan) stays a
//! member of the data span, i.e. its membership residual is zero. The inner
//! minimization over `g` is solved exactly; membership is imposed by a penalty
//! `ρ · residual` with `ρ` increased over a fixed schedule, each stage
//! warm-started from the previous one.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::hankel::{GramProblem, OwnedWindow};
use crate::linear::BoxBounds;
use crate::objective::{residual_from_terms, WindowObjective};
use crate::optim::{abs_eigen_solve, fd_hessian, minimize, refine_newton, Bounds};
use crate::plants::PlantModel;
use crate::predictor::{predict, PredictionProblem, SolverSettings};

const NEWTON_ITERS: usize = 20;
const NEWTON_FD_STEP: f64 = 1e-5;
const POLISH_ITERS: usize = 5;

/// `Σ_i (y_i − r_i)ᵀ Q (y_i − r_i) + u_iᵀ R u_i`, pairing the input and the
/// output of the same sample.
#[derive(Clone, Debug, PartialEq)]
pub struct StageCost {
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
}

impl StageCost {
    pub fn new(q: DMatrix<f64>, r: DMatrix<f64>) -> Result<Self> {
        for (name, m) in [("Q", &q), ("R", &r)] {
            if !m.is_square() || m.nrows() == 0 {
                return arg_err(format!("{name} must be square"));
            }
            let scale = m.amax().max(1.0);
            if (m - m.transpose()).amax() > 1e-12 * scale {
                return arg_err(format!("{name} must be symmetric"));
            }
            if m.clone().symmetric_eigenvalues().min() < -1e-12 * scale {
                return arg_err(format!("{name} must be positive semidefinite"));
            }
        }
        Ok(Self { q, r })
    }

    /// Diagonal weights `q·I`, `r·I`.
    pub fn diagonal(n_u: usize, n_y: usize, q: f64, r: f64) -> Result<Self> {
        Self::new(DMatrix::identity(n_y, n_y) * q, DMatrix::identity(n_u, n_u) * r)
    }

    pub fn eval(&self, u: &[f64], y: &[f64], y_ref: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (nu, ny) = (self.r.nrows(), self.q.nrows());
        let mut total = 0.0;
        let mut grad = grad;
        for (i, ui) in u.chunks(nu).enumerate() {
            let ui = DVector::from_column_slice(ui);
            let ru = &self.r * &ui;
            total += ui.dot(&ru);
            if let Some(g) = grad.as_deref_mut() {
                for (k, v) in ru.iter().enumerate() {
                    g[i * nu + k] += 2.0 * v;
                }
            }
        }
        let off = u.len();
        for (i, (yi, ri)) in y.chunks(ny).zip(y_ref.chunks(ny)).enumerate() {
            let e = DVector::from_iterator(ny, yi.iter().zip(ri).map(|(a, b)| a - b));
            let qe = &self.q * &e;
            total += e.dot(&qe);
            if let Some(g) = grad.as_deref_mut() {
                for (k, v) in qe.iter().enumerate() {
                    g[off + i * ny + k] += 2.0 * v;
                }
            }
        }
        total
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcSettings {
    /// Strictly increasing penalty weights on the membership residual.
    pub penalties: Vec<f64>,
    pub inner: SolverSettings,
    /// Certification threshold relative to `k(ṽ, ṽ)`.
    pub tol_bilevel: f64,
    /// Weight of the quadratic hinge on the output box.
    pub y_box_weight: f64,
    /// Number of nearest data windows considered for initialization.
    pub candidates: usize,
}

impl Default for MpcSettings {
    fn default() -> Self {
        Self {
            penalties: vec![1e2, 1e3, 1e4, 1e5, 1e6, 1e7, 1e8],
            inner: SolverSettings::default(),
            tol_bilevel: 1e-6,
            y_box_weight: 1e3,
            candidates: 5,
        }
    }
}

impl MpcSettings {
    pub fn validate(&self) -> Result<()> {
        self.inner.validate()?;
        if self.penalties.is_empty() || self.penalties.iter().any(|p| !(*p > 0.0) || !p.is_finite()) {
            return arg_err("penalty schedule must be non-empty and positive");
        }
        if self.penalties.windows(2).any(|w| w[1] <= w[0]) {
            return arg_err("penalty schedule must be strictly increasing");
        }
        if !(self.tol_bilevel >= 0.0) || !(self.y_box_weight >= 0.0) {
            return arg_err("tol_bilevel and y_box_weight must be >= 0");
        }
        if self.candidates == 0 {
            return arg_err("candidates must be >= 1");
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct MpcProblem {
    pub gram: GramProblem,
    pub t_ini: usize,
    pub n_h: usize,
    pub cost: StageCost,
    /// Reference samples, sample-major. Step `k` of a closed-loop run tracks
    /// samples `k..k + n_h`, holding the last sample beyond the end.
    pub y_ref: Vec<f64>,
    pub u_box: Option<BoxBounds>,
    pub y_box: Option<BoxBounds>,
    pub settings: MpcSettings,
}

impl MpcProblem {
    pub fn validate(&self) -> Result<()> {
        let (nu, ny) = (self.gram.data().n_u(), self.gram.data().n_y());
        if self.t_ini == 0 || self.n_h == 0 {
            return arg_err("t_ini and n_h must be positive");
        }
        if self.t_ini + self.n_h != self.gram.depth() {
            return arg_err(format!(
                "t_ini + n_h = {} but the Gram depth is {}",
                self.t_ini + self.n_h,
                self.gram.depth()
            ));
        }
        if self.cost.q.nrows() != ny || self.cost.r.nrows() != nu {
            return arg_err("cost weights do not match the signal dimensions");
        }
        if self.y_ref.is_empty() || self.y_ref.len() % ny != 0 || self.y_ref.iter().any(|v| !v.is_finite()) {
            return arg_err("reference must hold a whole number of finite output samples");
        }
        if let Some(b) = &self.u_box {
            b.validate(nu)?;
        }
        if let Some(b) = &self.y_box {
            b.validate(ny)?;
        }
        self.settings.validate()
    }

    /// Reference over the horizon starting at sample `offset`.
    pub fn reference_window(&self, offset: usize) -> Vec<f64> {
        let ny = self.gram.data().n_y();
        let last = self.y_ref.len() / ny - 1;
        (offset..offset + self.n_h)
            .flat_map(|k| {
                let k = k.min(last);
                self.y_ref[k * ny..(k + 1) * ny].iter().copied()
            })
            .collect()
    }

    fn free_bounds(&self) -> Option<Bounds> {
        let b = self.u_box.as_ref()?;
        let (nu, ny) = (self.gram.data().n_u(), self.gram.data().n_y());
        let mut bounds = Bounds::unbounded(self.n_h * (nu + ny));
        for i in 0..self.n_h * nu {
            bounds.lower[i] = b.lower[i % nu];
            bounds.upper[i] = b.upper[i % nu];
        }
        Some(bounds)
    }

    fn y_hinge(&self, y: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let Some(b) = &self.y_box else { return 0.0 };
        let w = self.settings.y_box_weight;
        let ny = b.lower.len();
        let mut total = 0.0;
        let mut grad = grad;
        for (i, v) in y.iter().enumerate() {
            let excess = (v - b.upper[i % ny]).max(0.0) - (b.lower[i % ny] - v).max(0.0);
            total += w * excess * excess;
            if let Some(g) = grad.as_deref_mut() {
                g[i] += 2.0 * w * excess;
            }
        }
        total
    }

    /// Stage cost plus the output-box hinge for a plan `[u; y]`.
    fn upper_cost(&self, plan: &[f64], y_ref: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let split = self.n_h * self.gram.data().n_u();
        let (u, y) = plan.split_at(split);
        match grad {
            Some(g) => {
                let c = self.cost.eval(u, y, y_ref, Some(g));
                c + self.y_hinge(y, Some(&mut g[split..]))
            }
            None => self.cost.eval(u, y, y_ref, None) + self.y_hinge(y, None),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageDiagnostic {
    pub penalty: f64,
    pub residual: f64,
    pub upper_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Clone, Debug)]
pub struct MpcStepResult {
    /// `n_h · n_u` planned inputs, sample-major.
    pub u_plan: Vec<f64>,
    /// `n_h · n_y` planned outputs, sample-major.
    pub y_plan: Vec<f64>,
    pub g: DVector<f64>,
    pub residual: f64,
    pub self_kernel: f64,
    pub upper_cost: f64,
    /// Whether `residual <= tol_bilevel · k(ṽ, ṽ)`.
    pub certified: bool,
    pub stages: Vec<StageDiagnostic>,
}

/// Per-call options of [`solve_step_with`].
#[derive(Clone, Debug, Default)]
pub struct StepOptions {
    /// First reference sample tracked by this step.
    pub reference_offset: usize,
    /// Previous plan `[u; y]` to warm-start from, already shifted.
    pub warm_start: Option<Vec<f64>>,
}

pub fn solve_step(problem: &MpcProblem, u_ini: &[f64], y_ini: &[f64]) -> Result<MpcStepResult> {
    solve_step_with(problem, u_ini, y_ini, &StepOptions::default())
}

struct Candidate {
    plan: Vec<f64>,
    upper: f64,
    residual: f64,
    self_kernel: f64,
    g: DVector<f64>,
}

impl Candidate {
    fn certified(&self, tol: f64) -> bool {
        self.residual <= tol * self.self_kernel
    }

    /// Certified candidates first, then lower upper cost.
    fn better_than(&self, other: &Candidate, tol: f64) -> bool {
        match (self.certified(tol), other.certified(tol)) {
            (true, false) => true,
            (false, true) => false,
            (true, true) => self.upper < other.upper,
            (false, false) => self.residual < other.residual,
        }
    }
}

pub fn solve_step_with(
    problem: &MpcProblem,
    u_ini: &[f64],
    y_ini: &[f64],
    options: &StepOptions,
) -> Result<MpcStepResult> {
    problem.validate()?;
    let gram = &problem.gram;
    let (nu, ny) = (gram.data().n_u(), gram.data().n_y());
    let (t_ini, n_h) = (problem.t_ini, problem.n_h);
    if u_ini.len() != t_ini * nu || y_ini.len() != t_ini * ny {
        return arg_err(format!("context must hold {t_ini} input and output samples"));
    }
    if u_ini.iter().chain(y_ini).any(|v| !v.is_finite()) {
        return arg_err("context must be finite");
    }
    let settings = &problem.settings;
    let ridge = settings.inner.ridge;
    let y_ref = problem.reference_window(options.reference_offset);
    let bounds = problem.free_bounds();
    let n_free = n_h * (nu + ny);

    let query = |plan: &[f64]| {
        let mut u = u_ini.to_vec();
        u.extend_from_slice(&plan[..n_h * nu]);
        let mut y = y_ini.to_vec();
        y.extend_from_slice(&plan[n_h * nu..]);
        OwnedWindow { u, y, n_u: nu, n_y: ny }
    };
    let objective = |plan: &[f64]| WindowObjective::new(gram, query(plan), t_ini, t_ini, ridge);
    let evaluate = |plan: &[f64]| -> Result<Candidate> {
        let obj = objective(plan)?;
        let e = obj.reduced()?;
        Ok(Candidate {
            plan: plan.to_vec(),
            upper: problem.upper_cost(plan, &y_ref, None),
            residual: residual_from_terms(gram, &e.g, &e.cross, e.self_kernel),
            self_kernel: e.self_kernel,
            g: e.g,
        })
    };

    // Data windows nearest in context; their continuations seed the solve.
    let base = objective(&vec![0.0; n_free])?;
    let nearest = base.nearest_windows(t_ini, t_ini);
    let mut scanned: Vec<Candidate> = nearest
        .iter()
        .take(settings.candidates)
        .map(|&(_, j)| {
            let w = gram.window(j);
            let mut plan = w.u[t_ini * nu..].to_vec();
            plan.extend_from_slice(&w.y[t_ini * ny..]);
            if let Some(b) = &bounds {
                b.project(&mut plan);
            }
            evaluate(&plan)
        })
        .collect::<Result<_>>()?;
    scanned.sort_by(|a, b| a.upper.total_cmp(&b.upper));
    let safeguard = scanned
        .iter()
        .filter(|c| c.certified(settings.tol_bilevel))
        .min_by(|a, b| a.upper.total_cmp(&b.upper));

    // Plans completed by the predictor are feasible for the lower level by
    // construction; every plan is compared in this form.
    let settle = |u_plan: &[f64]| -> Option<Candidate> {
        let p = PredictionProblem::new(gram, t_ini, n_h, u_ini.to_vec(), y_ini.to_vec(), u_plan.to_vec());
        match p.and_then(|p| predict(&p, &settings.inner)) {
            Ok(r) => {
                let mut plan = u_plan.to_vec();
                plan.extend_from_slice(&r.y_pred);
                evaluate(&plan).ok()
            }
            Err(e) => {
                log::debug!("lower-level solve failed: {e}");
                None
            }
        }
    };
    let mut inputs: Vec<Vec<f64>> = scanned.iter().map(|c| c.plan[..n_h * nu].to_vec()).collect();
    inputs.extend(constant_inputs(gram, &u_ini[(t_ini - 1) * nu..], n_h));
    let mut settled: Vec<Candidate> = inputs
        .iter()
        .map(|u| {
            let mut plan = u.clone();
            plan.resize(n_free, 0.0);
            if let Some(b) = &bounds {
                b.project(&mut plan);
            }
            plan.truncate(n_h * nu);
            plan
        })
        .filter_map(|u| settle(&u))
        .collect();
    let seed = settled
        .iter()
        .reduce(|a, b| if b.better_than(a, settings.tol_bilevel) { b } else { a })
        .map_or_else(|| scanned[0].plan.clone(), |c| c.plan.clone());

    let mut starts = vec![seed];
    if let Some(w) = &options.warm_start {
        if w.len() != n_free {
            return arg_err(format!("warm start must have {n_free} entries"));
        }
        let mut w = w.clone();
        if let Some(b) = &bounds {
            b.project(&mut w);
        }
        starts.push(w);
    }

    let qn = settings.inner.quasi_newton();
    let runs: Vec<Result<(Candidate, Vec<StageDiagnostic>)>> = starts
        .par_iter()
        .map(|x0| {
            let mut obj = objective(x0)?;
            let mut x = x0.clone();
            let mut stages = Vec::with_capacity(settings.penalties.len());
            let mut failures = Vec::new();
            for &rho in &settings.penalties {
                let mut penalized = |plan: &[f64], grad: &mut [f64]| {
                    let e = obj.reduced_with_grad(plan, grad)?;
                    grad.iter_mut().for_each(|v| *v *= rho);
                    Ok(problem.upper_cost(plan, &y_ref, Some(grad)) + rho * e.reduced)
                };
                let run = minimize(&mut penalized, &x, bounds.as_ref(), qn).and_then(|m| {
                    let it = m.iterations;
                    let mut r = refine_newton(&mut penalized, &m.x, bounds.as_ref(), qn, NEWTON_ITERS, NEWTON_FD_STEP)?;
                    if r.value > m.value {
                        return Ok(m);
                    }
                    r.iterations += it;
                    Ok(r)
                });
                match run {
                    Ok(m) => {
                        x = m.x;
                        let c = evaluate(&x)?;
                        stages.push(StageDiagnostic {
                            penalty: rho,
                            residual: c.residual,
                            upper_cost: c.upper,
                            iterations: m.iterations,
                            converged: m.converged,
                        });
                    }
                    Err(e) => failures.push(format!("penalty {rho:e}: {e}")),
                }
            }
            if stages.is_empty() {
                return Err(Error::SolverFailure(format!("all penalty stages failed: {}", failures.join("; "))));
            }
            if stages.windows(2).any(|s| s[1].residual > s[0].residual + 1e-9 * s[0].residual.abs().max(1.0)) {
                log::warn!("membership residual increased across penalty stages: {stages:?}");
            }
            Ok((evaluate(&x)?, stages))
        })
        .collect();

    let mut best: Option<(Candidate, Vec<StageDiagnostic>)> = None;
    let mut failures = Vec::new();
    for r in runs {
        match r {
            Ok(r) => {
                if best.as_ref().is_none_or(|b| r.0.better_than(&b.0, settings.tol_bilevel)) {
                    best = Some(r);
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    let Some((mut chosen, stages)) = best else {
        return Err(Error::SolverFailure(failures.join("; ")));
    };
    settled.extend(settle(&chosen.plan[..n_h * nu]));
    let best_settled = settled.into_iter().reduce(|a, b| if b.better_than(&a, settings.tol_bilevel) { b } else { a });
    if let Some(s) = best_settled.filter(|s| s.certified(settings.tol_bilevel)) {
        chosen = s;
    } else if let Some(s) = safeguard {
        if !chosen.certified(settings.tol_bilevel) {
            chosen = Candidate { plan: s.plan.clone(), upper: s.upper, residual: s.residual, self_kernel: s.self_kernel, g: s.g.clone() };
        }
    }
    if chosen.certified(settings.tol_bilevel) {
        chosen = polish(chosen, n_h * nu, settings.tol_bilevel, &objective, &settle, &|plan: &[f64], grad: &mut [f64]| {
            grad.iter_mut().for_each(|v| *v = 0.0);
            problem.upper_cost(plan, &y_ref, Some(grad))
        }, bounds.as_ref())?;
    }
    let certified = chosen.certified(settings.tol_bilevel);
    if !certified {
        log::warn!(
            "plan not certified: residual {:.3e} exceeds {:.3e}",
            chosen.residual,
            settings.tol_bilevel * chosen.self_kernel
        );
    }
    let (u_plan, y_plan) = chosen.plan.split_at(n_h * nu);
    Ok(MpcStepResult {
        u_plan: u_plan.to_vec(),
        y_plan: y_plan.to_vec(),
        g: chosen.g,
        residual: chosen.residual,
        self_kernel: chosen.self_kernel,
        upper_cost: chosen.upper,
        certified,
        stages,
    })
}

/// Newton steps on the inputs for `J(u, y*(u))`, where `y*(u)` is the
/// lower-level solution. `dy*/du = −H_yy⁻¹ H_yu` from the residual Hessian at
/// the current plan. A step is kept only if the plan completed by `settle` is
/// certified and cheaper.
fn polish<'a, O, S, C>(
    mut chosen: Candidate,
    n_u_free: usize,
    tol: f64,
    objective: &O,
    settle: &S,
    upper: &C,
    bounds: Option<&Bounds>,
) -> Result<Candidate>
where
    O: Fn(&[f64]) -> Result<WindowObjective<'a>>,
    S: Fn(&[f64]) -> Option<Candidate>,
    C: Fn(&[f64], &mut [f64]) -> f64,
{
    let n = chosen.plan.len();
    let all: Vec<usize> = (0..n).collect();
    let (ui, yi) = (0..n_u_free, n_u_free..n);
    for _ in 0..POLISH_ITERS {
        let mut obj = objective(&chosen.plan)?;
        let mut residual = |x: &[f64], g: &mut [f64]| Ok(obj.reduced_with_grad(x, g)?.reduced);
        let h = fd_hessian(&mut residual, &chosen.plan, &all, NEWTON_FD_STEP)?;
        let mut cost = |x: &[f64], g: &mut [f64]| Ok(upper(x, g));
        let hj = fd_hessian(&mut cost, &chosen.plan, &all, NEWTON_FD_STEP)?;
        if h.iter().chain(hj.iter()).any(|v| !v.is_finite()) {
            break;
        }
        let mut gj = vec![0.0; n];
        upper(&chosen.plan, &mut gj);

        let hyy = h.view((yi.start, yi.start), (yi.len(), yi.len())).into_owned();
        let hyu = h.view((yi.start, 0), (yi.len(), ui.len()));
        let mut sens = DMatrix::zeros(yi.len(), ui.len());
        for c in 0..ui.len() {
            sens.set_column(c, &-abs_eigen_solve(hyy.clone(), &hyu.column(c).into_owned()));
        }
        let ju = DVector::from_column_slice(&gj[ui.clone()]);
        let jy = DVector::from_column_slice(&gj[yi.clone()]);
        let grad = ju + sens.tr_mul(&jy);
        let juu = hj.view((0, 0), (ui.len(), ui.len()));
        let juy = hj.view((0, yi.start), (ui.len(), yi.len()));
        let jyy = hj.view((yi.start, yi.start), (yi.len(), yi.len()));
        let cross = juy * &sens;
        let hess = juu + &cross + cross.transpose() + sens.tr_mul(&(jyy * &sens));
        let step = -abs_eigen_solve((&hess + hess.transpose()) * 0.5, &grad);

        let mut improved = None;
        let mut alpha = 1.0;
        for _ in 0..3 {
            let mut plan = chosen.plan.clone();
            for (i, d) in step.iter().enumerate() {
                plan[i] += alpha * d;
            }
            if let Some(b) = bounds {
                b.project(&mut plan);
            }
            if let Some(c) = settle(&plan[ui.clone()]) {
                if c.certified(tol) && c.upper < chosen.upper {
                    improved = Some(c);
                    break;
                }
            }
            alpha *= 0.5;
        }
        match improved {
            Some(c) => chosen = c,
            None => break,
        }
    }
    Ok(chosen)
}

/// Input sequences held constant at the last applied input and at the data
/// mean and mean ± half and one std per channel.
fn constant_inputs(gram: &GramProblem, last: &[f64], n_h: usize) -> Vec<Vec<f64>> {
    let data = gram.data();
    let (t, nu) = (data.len() as f64, data.n_u());
    let mean: Vec<f64> = (0..nu).map(|c| (0..data.len()).map(|i| data.u(i)[c]).sum::<f64>() / t).collect();
    let std: Vec<f64> = (0..nu)
        .map(|c| ((0..data.len()).map(|i| (data.u(i)[c] - mean[c]).powi(2)).sum::<f64>() / t).sqrt())
        .collect();
    let mut levels = vec![last.to_vec()];
    for k in [0.0, -0.5, 0.5, -1.0, 1.0] {
        levels.push(mean.iter().zip(&std).map(|(m, s)| m + k * s).collect());
    }
    levels.into_iter().map(|l| l.repeat(n_h)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub t: f64,
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub y_ref: Vec<f64>,
    pub residual: f64,
    pub solve_ms: f64,
    pub certified: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClosedLoopLog {
    pub n_u: usize,
    pub n_y: usize,
    pub rows: Vec<LogRow>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrackingSummary {
    /// Mean `|y − y_ref|` over the final quarter of the run.
    pub final_quarter_error: f64,
    /// Largest excursion of `y` past the reference in the direction of the
    /// most recent reference change.
    pub max_overshoot: f64,
    pub mean_solve_ms: f64,
}

impl ClosedLoopLog {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["step".to_string(), "t".to_string()];
        header.extend((1..=self.n_u).map(|i| format!("u{i}")));
        header.extend((1..=self.n_y).map(|i| format!("y{i}")));
        header.extend((1..=self.n_y).map(|i| format!("yref{i}")));
        header.extend(["residual".to_string(), "solve_ms".to_string()]);
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), r.t.to_string()];
            rec.extend(r.u.iter().chain(&r.y).chain(&r.y_ref).map(f64::to_string));
            rec.push(r.residual.to_string());
            rec.push(r.solve_ms.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Mean `|y − y_ref|` over the final quarter of `rows[range]`.
    pub fn final_quarter_error(&self, range: std::ops::Range<usize>) -> f64 {
        let rows = &self.rows[range];
        if rows.is_empty() {
            return 0.0;
        }
        let tail = &rows[rows.len() - rows.len().div_ceil(4)..];
        let total: f64 = tail.iter().flat_map(|r| r.y.iter().zip(&r.y_ref).map(|(a, b)| (a - b).abs())).sum();
        total / (tail.len() * self.n_y) as f64
    }

    pub fn summary(&self) -> TrackingSummary {
        let n = self.rows.len();
        let mean_solve_ms = if n == 0 { 0.0 } else { self.rows.iter().map(|r| r.solve_ms).sum::<f64>() / n as f64 };
        let mut max_overshoot: f64 = 0.0;
        let mut direction = vec![0.0; self.n_y];
        for (i, r) in self.rows.iter().enumerate() {
            for k in 0..self.n_y {
                let prev = if i == 0 { r.y_ref[k] } else { self.rows[i - 1].y_ref[k] };
                if r.y_ref[k] != prev {
                    direction[k] = (r.y_ref[k] - prev).signum();
                }
                if direction[k] != 0.0 {
                    max_overshoot = max_overshoot.max(direction[k] * (r.y[k] - r.y_ref[k]));
                }
            }
        }
        TrackingSummary { final_quarter_error: self.final_quarter_error(0..n), max_overshoot, mean_solve_ms }
    }
}

/// Simulates `steps` receding-horizon steps on `plant` from `x0`. The first
/// `t_ini` samples of context are produced under zero input.
pub fn run_closed_loop(problem: &MpcProblem, plant: &PlantModel, x0: &[f64], steps: usize) -> Result<ClosedLoopLog> {
    problem.validate()?;
    plant.validate()?;
    let (nu, ny) = (problem.gram.data().n_u(), problem.gram.data().n_y());
    if plant.n_u() != nu || plant.n_y() != ny {
        return arg_err("plant dimensions do not match the data");
    }
    if x0.len() != plant.n_x() {
        return arg_err(format!("initial state must have dimension {}", plant.n_x()));
    }
    let mut log = ClosedLoopLog { n_u: nu, n_y: ny, rows: Vec::with_capacity(steps) };
    if steps == 0 {
        return Ok(log);
    }
    let t_ini = problem.t_ini;
    let mut x = x0.to_vec();
    let mut u_hist = Vec::with_capacity((t_ini + steps) * nu);
    let mut y_hist = Vec::with_capacity((t_ini + steps) * ny);
    let zero = vec![0.0; nu];
    for k in 0..t_ini {
        let (next, y) = plant.step(&x, &zero).map_err(|e| relabel(e, k))?;
        u_hist.extend_from_slice(&zero);
        y_hist.extend(y);
        x = next;
    }
    let mut warm: Option<Vec<f64>> = None;
    for step in 0..steps {
        let len = u_hist.len() / nu;
        let u_ini = &u_hist[(len - t_ini) * nu..];
        let y_ini = &y_hist[(len - t_ini) * ny..];
        let started = Instant::now();
        let options = StepOptions { reference_offset: step, warm_start: warm.take() };
        let res = solve_step_with(problem, u_ini, y_ini, &options)?;
        let solve_ms = started.elapsed().as_secs_f64() * 1e3;
        let u = res.u_plan[..nu].to_vec();
        let (next, y) = plant.step(&x, &u).map_err(|e| relabel(e, t_ini + step))?;
        log.rows.push(LogRow {
            step,
            t: (t_ini + step) as f64 * plant.dt,
            u: u.clone(),
            y: y.clone(),
            y_ref: problem.reference_window(step)[..ny].to_vec(),
            residual: res.residual,
            solve_ms,
            certified: res.certified,
        });
        log::info!("step {step}: u = {u:?}, y = {y:?}, residual {:.3e}, {solve_ms:.0} ms", res.residual);
        u_hist.extend(u);
        y_hist.extend(y);
        x = next;
        warm = Some(shift_plan(&res, nu, ny));
    }
    Ok(log)
}

fn relabel(e: Error, step: usize) -> Error {
    match e {
        Error::Divergence { .. } => Error::Divergence { step },
        other => other,
    }
}

fn shift_plan(res: &MpcStepResult, nu: usize, ny: usize) -> Vec<f64> {
    let shift = |v: &[f64], d: usize| {
        let mut s = v[d..].to_vec();
        s.extend_from_slice(&v[v.len() - d..]);
        s
    };
    let mut plan = shift(&res.u_plan, nu);
    plan.extend(shift(&res.y_plan, ny));
    plan
}
