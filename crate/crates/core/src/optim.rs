//! Dense BFGS with a backtracking (Armijo) line search and optional box bounds,
//! and a projected Newton refinement for badly conditioned minima.
//!
//! Bounds are handled by projecting every line-search trial point onto the box
//! and freezing variables that sit on a bound with the gradient pointing out of
//! the box. Problems here are small (tens of variables), so the inverse Hessian
//! approximation is kept dense.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;

#[derive(Clone, Debug)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn unbounded(n: usize) -> Self {
        Self { lower: vec![f64::NEG_INFINITY; n], upper: vec![f64::INFINITY; n] }
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    fn blocked(&self, i: usize, x: f64, g: f64) -> bool {
        (x <= self.lower[i] && g > 0.0) || (x >= self.upper[i] && g < 0.0)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct QuasiNewtonSettings {
    pub max_iters: usize,
    /// Stop once `|projected gradient|_∞ <= grad_tol · (1 + |f|)`.
    pub grad_tol: f64,
}

#[derive(Clone, Debug)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub value: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Infinity norm of the projected gradient at exit.
    pub grad_norm: f64,
}

fn projected_grad_norm(x: &[f64], g: &[f64], bounds: &Bounds) -> f64 {
    g.iter()
        .enumerate()
        .map(|(i, gi)| if bounds.blocked(i, x[i], *gi) { 0.0 } else { gi.abs() })
        .fold(0.0, f64::max)
}

/// Minimizes `objective`, which returns `f(x)` and writes `∇f(x)` into its
/// second argument. Evaluation errors and non-finite values at a trial point
/// shrink the step; the run is aborted only if no finite trial point is found.
pub fn minimize<F>(mut objective: F, x0: &[f64], bounds: Option<&Bounds>, settings: QuasiNewtonSettings) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let n = x0.len();
    let free = Bounds::unbounded(n);
    let bounds = bounds.unwrap_or(&free);
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut f = objective(&x, &mut g)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::SolverFailure("non-finite objective at the starting point".into()));
    }

    let mut h = identity(n);
    let mut first_update = true;
    let mut iterations = 0;
    let mut xt = vec![0.0; n];
    let mut gt = vec![0.0; n];
    let mut d = vec![0.0; n];

    loop {
        let pg = projected_grad_norm(&x, &g, bounds);
        if pg <= settings.grad_tol * (1.0 + f.abs()) {
            return Ok(Minimum { x, value: f, grad: g, iterations, converged: true, grad_norm: pg });
        }
        if iterations >= settings.max_iters {
            return Ok(Minimum { x, value: f, grad: g, iterations, converged: false, grad_norm: pg });
        }
        iterations += 1;

        let active: Vec<bool> = (0..n).map(|i| bounds.blocked(i, x[i], g[i])).collect();
        search_direction(&h, &g, &active, &mut d);
        let mut slope: f64 = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        if !(slope < 0.0) {
            h = identity(n);
            first_update = true;
            for i in 0..n {
                d[i] = if active[i] { 0.0 } else { -g[i] };
            }
            slope = d.iter().zip(&g).map(|(a, b)| a * b).sum();
        }
        if slope == 0.0 {
            return Ok(Minimum { x, value: f, grad: g, iterations, converged: false, grad_norm: pg });
        }

        // Unscaled first step: cap its length at 1 in the infinity norm.
        let dmax = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut alpha = if first_update && dmax > 1.0 { 1.0 / dmax } else { 1.0 };
        let mut accepted = None;
        let mut any_finite = false;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                xt[i] = x[i] + alpha * d[i];
            }
            bounds.project(&mut xt);
            let ft = match objective(&xt, &mut gt) {
                Ok(v) if v.is_finite() && gt.iter().all(|c| c.is_finite()) => v,
                Ok(_) | Err(_) => {
                    alpha *= 0.5;
                    continue;
                }
            };
            any_finite = true;
            let decrease: f64 = g.iter().zip(xt.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
            if ft <= f + ARMIJO_C1 * decrease {
                accepted = Some(ft);
                break;
            }
            alpha *= 0.5;
        }
        let Some(ft) = accepted else {
            if !any_finite {
                return Err(Error::SolverFailure("line search found no finite trial point".into()));
            }
            return Ok(Minimum { x, value: f, grad: g, iterations, converged: false, grad_norm: pg });
        };

        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let yv: Vec<f64> = gt.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&yv).map(|(a, b)| a * b).sum();
        let ss: f64 = s.iter().map(|v| v * v).sum();
        let yy: f64 = yv.iter().map(|v| v * v).sum();
        let stalled = s.iter().zip(&x).all(|(si, xi)| si.abs() <= 1e-15 * (1.0 + xi.abs()));
        std::mem::swap(&mut x, &mut xt);
        std::mem::swap(&mut g, &mut gt);
        let f_prev = f;
        f = ft;
        if sy > 1e-12 * (ss * yy).sqrt() && sy > 0.0 {
            if first_update {
                let scale = sy / yy;
                for v in h.iter_mut() {
                    *v *= scale;
                }
                first_update = false;
            }
            bfgs_update(&mut h, &s, &yv, sy);
        }
        if stalled || f_prev == f {
            let pg = projected_grad_norm(&x, &g, bounds);
            let converged = pg <= settings.grad_tol * (1.0 + f.abs());
            return Ok(Minimum { x, value: f, grad: g, iterations, converged, grad_norm: pg });
        }
    }
}

/// Projected Newton refinement of a point that is already close to a local
/// minimum. The Hessian of the free variables is formed by central differences
/// of the gradient with step `fd_step · (1 + |x_i|)`; its eigenvalues are
/// replaced by their magnitudes (floored at `1e-10 · max`) so every step is a
/// descent direction. Stops on the gradient test, after `max_iters`, or when
/// the line search no longer decreases `f`.
pub fn refine_newton<F>(
    mut objective: F,
    x0: &[f64],
    bounds: Option<&Bounds>,
    settings: QuasiNewtonSettings,
    max_iters: usize,
    fd_step: f64,
) -> Result<Minimum>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let n = x0.len();
    let free_box = Bounds::unbounded(n);
    let bounds = bounds.unwrap_or(&free_box);
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let mut g = vec![0.0; n];
    let mut f = objective(&x, &mut g)?;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(Error::SolverFailure("non-finite objective at the starting point".into()));
    }
    let mut iterations = 0;
    let mut xt = vec![0.0; n];
    let mut gt = vec![0.0; n];
    loop {
        let pg = projected_grad_norm(&x, &g, bounds);
        let done = pg <= settings.grad_tol * (1.0 + f.abs());
        if done || iterations >= max_iters {
            return Ok(Minimum { x, value: f, grad: g, iterations, converged: done, grad_norm: pg });
        }
        iterations += 1;

        let free: Vec<usize> = (0..n).filter(|&i| !bounds.blocked(i, x[i], g[i])).collect();
        let hess = fd_hessian(&mut objective, &x, &free, fd_step)?;
        if hess.iter().any(|v| !v.is_finite()) {
            return Ok(Minimum { x, value: f, grad: g, iterations, converged: false, grad_norm: pg });
        }
        let gf = DVector::from_iterator(free.len(), free.iter().map(|&i| g[i]));
        let step = -abs_eigen_solve(hess, &gf);
        let mut d = vec![0.0; n];
        for (c, &i) in free.iter().enumerate() {
            d[i] = step[c];
        }

        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            for i in 0..n {
                xt[i] = x[i] + alpha * d[i];
            }
            bounds.project(&mut xt);
            if let Ok(ft) = objective(&xt, &mut gt) {
                let decrease: f64 = g.iter().zip(xt.iter().zip(&x)).map(|(gi, (a, b))| gi * (a - b)).sum();
                if ft.is_finite() && gt.iter().all(|c| c.is_finite()) && ft <= f + ARMIJO_C1 * decrease && ft < f {
                    accepted = Some(ft);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(ft) = accepted else {
            return Ok(Minimum { x, value: f, grad: g, iterations, converged: false, grad_norm: pg });
        };
        std::mem::swap(&mut x, &mut xt);
        std::mem::swap(&mut g, &mut gt);
        f = ft;
    }
}

/// Symmetrized central-difference Hessian of `objective` over the coordinates
/// `idx`, from gradients at `x ± h e_i`, `h = fd_step · (1 + |x_i|)`.
pub(crate) fn fd_hessian<F>(objective: &mut F, x: &[f64], idx: &[usize], fd_step: f64) -> Result<DMatrix<f64>>
where
    F: FnMut(&[f64], &mut [f64]) -> Result<f64>,
{
    let (n, m) = (x.len(), idx.len());
    let (mut gp, mut gm) = (vec![0.0; n], vec![0.0; n]);
    let mut hess = DMatrix::zeros(m, m);
    let mut xp = x.to_vec();
    for (c, &i) in idx.iter().enumerate() {
        let h = fd_step * (1.0 + x[i].abs());
        xp[i] = x[i] + h;
        objective(&xp, &mut gp)?;
        xp[i] = x[i] - h;
        objective(&xp, &mut gm)?;
        xp[i] = x[i];
        for (r, &k) in idx.iter().enumerate() {
            hess[(r, c)] = (gp[k] - gm[k]) / (2.0 * h);
        }
    }
    Ok((&hess + hess.transpose()) * 0.5)
}

/// `H⁻¹ b` through the eigen-decomposition of symmetric `H`, with eigenvalues
/// replaced by their magnitude floored at `1e-10 · max|λ|`.
pub(crate) fn abs_eigen_solve(hess: DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(hess);
    let top = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let floor = (1e-10 * top).max(f64::MIN_POSITIVE);
    let mut proj = eig.eigenvectors.tr_mul(b);
    for (p, lam) in proj.iter_mut().zip(eig.eigenvalues.iter()) {
        *p /= lam.abs().max(floor);
    }
    &eig.eigenvectors * proj
}

fn identity(n: usize) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = 1.0;
    }
    h
}

fn search_direction(h: &[f64], g: &[f64], active: &[bool], d: &mut [f64]) {
    let n = g.len();
    for i in 0..n {
        if active[i] {
            d[i] = 0.0;
            continue;
        }
        let row = &h[i * n..(i + 1) * n];
        d[i] = -row
            .iter()
            .zip(g)
            .zip(active)
            .filter(|(_, a)| !**a)
            .map(|((hv, gv), _)| hv * gv)
            .sum::<f64>();
    }
}

/// `H ← (I − ρ s yᵀ) H (I − ρ y sᵀ) + ρ s sᵀ` with `ρ = 1 / sᵀy`.
fn bfgs_update(h: &mut [f64], s: &[f64], y: &[f64], sy: f64) {
    let n = s.len();
    let rho = 1.0 / sy;
    let hy: Vec<f64> = (0..n).map(|i| (0..n).map(|j| h[i * n + j] * y[j]).sum()).collect();
    let yhy: f64 = y.iter().zip(&hy).map(|(a, b)| a * b).sum();
    let coef = (1.0 + rho * yhy) * rho;
    for i in 0..n {
        for j in 0..n {
            h[i * n + j] += coef * s[i] * s[j] - rho * (hy[i] * s[j] + s[i] * hy[j]);
        }
    }
}
