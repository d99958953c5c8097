//! Classical data-driven prediction and control for linear time-invariant
//! systems, built on the numeric Hankel matrix. Used as a reference for the
//! kernelized predictor and controller under linear kernels.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use ndarray_linalg::{JobSvd, SVDDC};
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::hankel::{numeric_hankel, TrajectoryData};
use crate::rng::{stream, Stream};

/// `x⁺ = Ax + Bu`, `y = Cx + Du`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LtiRepr", into = "LtiRepr")]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LtiRepr {
    a: Vec<Vec<f64>>,
    b: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    d: Vec<Vec<f64>>,
}

fn from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let r = rows.len();
    let c = rows.first().map_or(0, |v| v.len());
    if r == 0 || c == 0 || rows.iter().any(|v| v.len() != c) {
        return arg_err(format!("matrix {name} must be a non-empty rectangular list of rows"));
    }
    Ok(DMatrix::from_row_iterator(r, c, rows.iter().flatten().copied()))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

impl TryFrom<LtiRepr> for LtiSystem {
    type Error = Error;

    fn try_from(r: LtiRepr) -> Result<Self> {
        LtiSystem::new(from_rows("a", &r.a)?, from_rows("b", &r.b)?, from_rows("c", &r.c)?, from_rows("d", &r.d)?)
    }
}

impl From<LtiSystem> for LtiRepr {
    fn from(s: LtiSystem) -> Self {
        LtiRepr { a: to_rows(&s.a), b: to_rows(&s.b), c: to_rows(&s.c), d: to_rows(&s.d) }
    }
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>, c: DMatrix<f64>, d: DMatrix<f64>) -> Result<Self> {
        let s = Self { a, b, c, d };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.a.nrows();
        if n == 0 || self.a.ncols() != n {
            return arg_err("A must be square and non-empty");
        }
        if self.b.nrows() != n || self.c.ncols() != n {
            return arg_err("B rows and C columns must match the state dimension");
        }
        if self.b.ncols() == 0 || self.c.nrows() == 0 {
            return arg_err("input and output dimensions must be positive");
        }
        if self.d.nrows() != self.c.nrows() || self.d.ncols() != self.b.ncols() {
            return arg_err("D must be n_y × n_u");
        }
        if [&self.a, &self.b, &self.c, &self.d].iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return arg_err("system matrices must be finite");
        }
        Ok(())
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn c(&self) -> &DMatrix<f64> {
        &self.c
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn n_x(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_u(&self) -> usize {
        self.b.ncols()
    }

    pub fn n_y(&self) -> usize {
        self.c.nrows()
    }

    /// Next state and current output.
    pub fn step(&self, x: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let x = DVector::from_column_slice(x);
        let u = DVector::from_column_slice(u);
        let next = &self.a * &x + &self.b * &u;
        let y = &self.c * &x + &self.d * &u;
        (next.as_slice().to_vec(), y.as_slice().to_vec())
    }

    /// Outputs (sample-major) under the given inputs, and the final state.
    pub fn simulate(&self, x0: &[f64], u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut x = x0.to_vec();
        let mut ys = Vec::with_capacity(u.len() / self.n_u() * self.n_y());
        for uk in u.chunks(self.n_u()) {
            let (next, y) = self.step(&x, uk);
            ys.extend(y);
            x = next;
        }
        (ys, x)
    }

    /// `[B, AB, …, A^{n−1}B]`.
    pub fn controllability_matrix(&self) -> DMatrix<f64> {
        let (n, m) = (self.n_x(), self.n_u());
        let mut out = DMatrix::zeros(n, n * m);
        let mut block = self.b.clone();
        for i in 0..n {
            out.columns_mut(i * m, m).copy_from(&block);
            block = &self.a * block;
        }
        out
    }

    pub fn is_controllable(&self) -> bool {
        let Ok(sv) = singular_values(&self.controllability_matrix()) else { return false };
        let max = sv.first().copied().unwrap_or(0.0);
        sv.iter().filter(|&&s| s > 1e-10 * max).count() == self.n_x()
    }

    pub fn spectral_radius(&self) -> f64 {
        self.a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

const GENERATION_ATTEMPTS: usize = 100;

/// Random controllable system with spectral radius in `[bound/2, bound]`.
/// Entries of `B`, `C`, `D` are standard Gaussian.
pub fn random_controllable(n_x: usize, n_u: usize, n_y: usize, seed: u64, bound: f64) -> Result<LtiSystem> {
    if n_x == 0 || n_u == 0 || n_y == 0 {
        return arg_err("dimensions must be >= 1");
    }
    if !(bound > 0.0 && bound < 1.0) {
        return arg_err(format!("spectral radius bound must lie in (0, 1), got {bound}"));
    }
    let mut rng = stream(seed, Stream::Fixtures);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let radius = Uniform::new_inclusive(0.5 * bound, bound).unwrap();
    for _ in 0..GENERATION_ATTEMPTS {
        let mut a = DMatrix::from_fn(n_x, n_x, |_, _| normal.sample(&mut rng));
        let b = DMatrix::from_fn(n_x, n_u, |_, _| normal.sample(&mut rng));
        let c = DMatrix::from_fn(n_y, n_x, |_, _| normal.sample(&mut rng));
        let d = DMatrix::from_fn(n_y, n_u, |_, _| normal.sample(&mut rng));
        let rho = a.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max);
        if !(rho > 1e-8) {
            continue;
        }
        a *= radius.sample(&mut rng) / rho;
        let sys = LtiSystem { a, b, c, d };
        if sys.is_controllable() && sys.spectral_radius() <= bound {
            return Ok(sys);
        }
    }
    Err(Error::Generation { attempts: GENERATION_ATTEMPTS })
}

/// Singular values below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-10;

/// Thin SVD `a = U diag(s) Vᵀ` computed by LAPACK.
fn thin_svd(a: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>, DMatrix<f64>)> {
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 {
        return Ok((DMatrix::zeros(m, 0), DVector::zeros(0), DMatrix::zeros(n, 0)));
    }
    let arr = Array2::from_shape_fn((m, n), |(i, j)| a[(i, j)]);
    let (u, s, vt) = arr.svddc(JobSvd::Some).map_err(|e| Error::SolverFailure(format!("svd: {e}")))?;
    let (u, vt) = (u.expect("requested U"), vt.expect("requested Vᵀ"));
    Ok((
        DMatrix::from_fn(m, k, |i, j| u[(i, j)]),
        DVector::from_fn(k, |i, _| s[i]),
        DMatrix::from_fn(n, k, |i, j| vt[(j, i)]),
    ))
}

/// Singular values of `a` in descending order.
pub fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    Ok(thin_svd(a)?.1.iter().copied().collect())
}

/// Minimum-norm least-squares solution and the relative residual.
fn min_norm_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    solve_with_cutoff(a, b, RANK_TOL)
}

/// As [`min_norm_solve`] but only discarding round-off level singular values;
/// used for the cost and KKT systems, whose small eigenvalues are genuine.
fn fine_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(solve_with_cutoff(a, b, a.nrows().max(a.ncols()) as f64 * f64::EPSILON)?.0)
}

fn solve_with_cutoff(a: &DMatrix<f64>, b: &DVector<f64>, rel: f64) -> Result<(DVector<f64>, f64)> {
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::SolverFailure("non-finite entries in a linear solve".into()));
    }
    let (u, s, v) = thin_svd(a)?;
    let tol = rel * s.max();
    let mut c = u.tr_mul(b);
    for (ci, si) in c.iter_mut().zip(s.iter()) {
        *ci = if *si > tol { *ci / si } else { 0.0 };
    }
    let x = v * c;
    let rel = (a * &x - b).norm() / b.norm().max(f64::MIN_POSITIVE);
    Ok((x, rel))
}

/// Orthonormal basis of the null space of `a`.
fn null_space(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = a.ncols();
    // Zero rows make the matrix at least square so the SVD returns a full `V`.
    let mut padded = DMatrix::zeros(a.nrows().max(n), n);
    padded.rows_mut(0, a.nrows()).copy_from(a);
    let (_, s, v) = thin_svd(&padded)?;
    let tol = RANK_TOL * s.max();
    let rank = s.iter().filter(|&&x| x > tol).count();
    Ok(v.columns(rank, n - rank).into_owned())
}

/// Orthonormal basis of the column space of `a`.
fn range_space(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (u, s, _) = thin_svd(a)?;
    let tol = RANK_TOL * s.max();
    let keep: Vec<usize> = (0..s.len()).filter(|&i| s[i] > tol).collect();
    Ok(DMatrix::from_fn(a.nrows(), keep.len(), |r, c| u[(r, keep[c])]))
}

/// Row indices of the stacked Hankel matrix for inputs at positions `range`
/// and outputs at positions `yrange`.
fn rows_of(depth: usize, nu: usize, ny: usize, urange: std::ops::Range<usize>, yrange: std::ops::Range<usize>) -> Vec<usize> {
    let mut rows: Vec<usize> = (urange.start * nu..urange.end * nu).collect();
    rows.extend((yrange.start * ny..yrange.end * ny).map(|r| depth * nu + r));
    rows
}

fn select_rows(h: &DMatrix<f64>, rows: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), h.ncols(), |r, c| h[(rows[r], c)])
}

/// Predicts `t_p` outputs from `t_m` measured samples and `t_p` planned
/// inputs using the numeric Hankel matrix of depth `t_m + t_p`.
pub fn deepc_predict(
    data: &TrajectoryData,
    t_m: usize,
    t_p: usize,
    u_init: &[f64],
    y_init: &[f64],
    u_future: &[f64],
) -> Result<Vec<f64>> {
    let (nu, ny) = (data.n_u(), data.n_y());
    if t_m == 0 || t_p == 0 {
        return arg_err("t_m and t_p must be positive");
    }
    if u_init.len() != t_m * nu || y_init.len() != t_m * ny || u_future.len() != t_p * nu {
        return arg_err("prefix or future inputs have the wrong length");
    }
    let depth = t_m + t_p;
    let h = numeric_hankel(data, depth)?;
    let constrained = select_rows(&h, &rows_of(depth, nu, ny, 0..depth, 0..t_m));
    let free = select_rows(&h, &rows_of(depth, nu, ny, 0..0, t_m..depth));
    let mut rhs = u_init.to_vec();
    rhs.extend_from_slice(u_future);
    rhs.extend_from_slice(y_init);
    let (g, rel) = min_norm_solve(&constrained, &DVector::from_vec(rhs))?;
    if rel > 1e-6 {
        return Err(Error::NotInBehavior { relative_residual: rel });
    }
    Ok((free * g).as_slice().to_vec())
}

/// Per-coordinate input bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxBounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxBounds {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.lower.len() != dim || self.upper.len() != dim {
            return arg_err(format!("box bounds must have dimension {dim}"));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u) || l.is_nan() || u.is_nan()) {
            return arg_err("box bounds need lower <= upper");
        }
        Ok(())
    }

    pub fn clamp(&self, v: &mut [f64]) {
        let d = self.lower.len();
        for (i, x) in v.iter_mut().enumerate() {
            *x = x.clamp(self.lower[i % d], self.upper[i % d]);
        }
    }
}

/// Quadratic tracking problem over the Hankel span.
#[derive(Clone, Debug)]
pub struct DeepcControlProblem<'a> {
    pub data: &'a TrajectoryData,
    pub t_ini: usize,
    pub n_h: usize,
    /// `n_y × n_y` output weight.
    pub q: &'a DMatrix<f64>,
    /// `n_u × n_u` input weight.
    pub r: &'a DMatrix<f64>,
    /// `n_h · n_y` reference, sample-major.
    pub y_ref: &'a [f64],
    pub u_box: Option<&'a BoxBounds>,
}

/// Minimizes `Σ_i |y_i − r_i|²_Q + |u_i|²_R` over future trajectories
/// `(u, y)` in the span of the data windows that agree with the measured
/// context. Returns `(u_plan, y_plan)`, sample-major.
pub fn deepc_control(p: &DeepcControlProblem<'_>, u_ini: &[f64], y_ini: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let (nu, ny) = (p.data.n_u(), p.data.n_y());
    let (t_ini, n_h) = (p.t_ini, p.n_h);
    if t_ini == 0 || n_h == 0 {
        return arg_err("t_ini and n_h must be positive");
    }
    if u_ini.len() != t_ini * nu || y_ini.len() != t_ini * ny || p.y_ref.len() != n_h * ny {
        return arg_err("context or reference has the wrong length");
    }
    if p.q.shape() != (ny, ny) || p.r.shape() != (nu, nu) {
        return arg_err("cost weights have the wrong shape");
    }
    if let Some(b) = p.u_box {
        b.validate(nu)?;
    }
    let depth = t_ini + n_h;
    let h = numeric_hankel(p.data, depth)?;
    let past = select_rows(&h, &rows_of(depth, nu, ny, 0..t_ini, 0..t_ini));
    let future = select_rows(&h, &rows_of(depth, nu, ny, t_ini..depth, t_ini..depth));
    let mut rhs = u_ini.to_vec();
    rhs.extend_from_slice(y_ini);
    let (g0, rel) = min_norm_solve(&past, &DVector::from_vec(rhs))?;
    if rel > 1e-6 {
        return Err(Error::Infeasible(format!("context is not a trajectory of the data (relative residual {rel:.3e})")));
    }
    // Future trajectories z = z0 + B s with B an orthonormal basis.
    let z0 = &future * &g0;
    let basis = range_space(&(&future * null_space(&past)?))?;
    let nz = z0.len();
    let mut w = DMatrix::zeros(nz, nz);
    let mut z_ref = DVector::zeros(nz);
    for i in 0..n_h {
        w.view_mut((i * nu, i * nu), (nu, nu)).copy_from(p.r);
        let o = n_h * nu + i * ny;
        w.view_mut((o, o), (ny, ny)).copy_from(p.q);
        z_ref.rows_mut(o, ny).copy_from(&DVector::from_column_slice(&p.y_ref[i * ny..(i + 1) * ny]));
    }
    let hess = basis.transpose() * &w * &basis;
    let lin = basis.transpose() * &w * (&z0 - &z_ref);

    let s = match p.u_box {
        None => fine_solve(&hess, &(-&lin))?,
        Some(b) => {
            let bu = basis.rows(0, n_h * nu).into_owned();
            let u0 = z0.rows(0, n_h * nu).into_owned();
            box_qp(&hess, &lin, &bu, &u0, b)?
        }
    };
    let z = z0 + basis * s;
    Ok((z.rows(0, n_h * nu).as_slice().to_vec(), z.rows(n_h * nu, n_h * ny).as_slice().to_vec()))
}

/// Primal active-set method for `min ½sᵀHs + fᵀs` subject to
/// `lower ≤ u0 + Bs ≤ upper`.
fn box_qp(
    hess: &DMatrix<f64>,
    lin: &DVector<f64>,
    bu: &DMatrix<f64>,
    u0: &DVector<f64>,
    bounds: &BoxBounds,
) -> Result<DVector<f64>> {
    let m = u0.len();
    let d = bounds.lower.len();
    let lo = DVector::from_fn(m, |i, _| bounds.lower[i % d]);
    let hi = DVector::from_fn(m, |i, _| bounds.upper[i % d]);
    // Constraint i < m: (Bs)_i ≤ hi_i − u0_i; i ≥ m: −(Bs)_i ≤ u0_i − lo_i.
    let row = |i: usize| if i < m { bu.row(i).transpose() } else { -bu.row(i - m).transpose() };
    let rhs = |i: usize| if i < m { hi[i] - u0[i] } else { u0[i - m] - lo[i - m] };
    let slack_tol = 1e-10 * (1.0 + lo.amax().max(hi.amax()));

    let s_free = fine_solve(hess, &(-lin))?;
    let feasible = |s: &DVector<f64>| (0..2 * m).all(|i| row(i).dot(s) <= rhs(i) + slack_tol);
    if feasible(&s_free) {
        return Ok(s_free);
    }
    let mut target = u0 + bu * &s_free;
    bounds.clamp(target.as_mut_slice());
    let (mut s, _) = min_norm_solve(bu, &(target - u0))?;
    if !feasible(&s) {
        return Err(Error::Infeasible("no plan satisfies the input box".into()));
    }
    let mut active: Vec<usize> = (0..2 * m).filter(|&i| (row(i).dot(&s) - rhs(i)).abs() <= slack_tol).collect();
    let n = s.len();
    for _ in 0..50 * (m + n + 1) {
        let k = active.len();
        let mut kkt = DMatrix::zeros(n + k, n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(hess);
        for (c, &i) in active.iter().enumerate() {
            let a = row(i);
            kkt.view_mut((0, n + c), (n, 1)).copy_from(&a);
            kkt.view_mut((n + c, 0), (1, n)).copy_from(&a.transpose());
        }
        let mut b = DVector::zeros(n + k);
        b.rows_mut(0, n).copy_from(&(-(hess * &s + lin)));
        let sol = fine_solve(&kkt, &b)?;
        let step = sol.rows(0, n).into_owned();
        if step.amax() <= 1e-9 * (1.0 + s.amax()) {
            let multipliers = sol.rows(n, k);
            match multipliers.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)) {
                Some((j, &lam)) if lam < -1e-12 => {
                    active.remove(j);
                }
                _ => return Ok(s),
            }
        } else {
            let mut alpha = 1.0;
            let mut blocking = None;
            for i in (0..2 * m).filter(|i| !active.contains(i)) {
                let a = row(i);
                let rate = a.dot(&step);
                if rate > 0.0 {
                    let t = (rhs(i) - a.dot(&s)) / rate;
                    if t < alpha {
                        alpha = t.max(0.0);
                        blocking = Some(i);
                    }
                }
            }
            s += step * alpha;
            if let Some(i) = blocking {
                active.push(i);
            }
        }
    }
    Err(Error::SolverFailure("active-set iteration limit reached".into()))
}
