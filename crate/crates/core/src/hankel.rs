//! Windowed (Hankel) views of trajectory data and their kernel Gram matrix.
//!
//! Column `j` of the depth-`L` Hankel matrix is the window of samples
//! `j..j+L` of both channels. The Gram entry between two columns is the sum of
//! the input kernel over the `L` aligned input samples plus the output kernel
//! over the `L` aligned output samples. Columns are 0-based throughout.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{arg_err, Error, Result};
use crate::kernels::{DataKernel, KernelSpec, NoiseModel};
use crate::linear::singular_values;

/// Recorded input/output samples. Samples are stored row-major: sample `i` of
/// the input occupies `u[i*n_u..(i+1)*n_u]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryData {
    u: Vec<f64>,
    y: Vec<f64>,
    n_u: usize,
    n_y: usize,
    dt: f64,
}

impl TrajectoryData {
    pub fn new(u: &[Vec<f64>], y: &[Vec<f64>], dt: f64) -> Result<Self> {
        if u.len() != y.len() {
            return arg_err(format!("input has {} samples, output has {}", u.len(), y.len()));
        }
        if u.is_empty() {
            return arg_err("trajectory needs at least one sample");
        }
        let n_u = u[0].len();
        let n_y = y[0].len();
        if u.iter().any(|s| s.len() != n_u) || y.iter().any(|s| s.len() != n_y) {
            return arg_err("inconsistent sample dimensions");
        }
        Self::from_flat(u.concat(), y.concat(), n_u, n_y, dt)
    }

    pub fn from_flat(u: Vec<f64>, y: Vec<f64>, n_u: usize, n_y: usize, dt: f64) -> Result<Self> {
        if n_u == 0 || n_y == 0 {
            return arg_err("signal dimensions must be positive");
        }
        if u.len() % n_u != 0 || y.len() % n_y != 0 || u.len() / n_u != y.len() / n_y {
            return arg_err("flat buffers do not describe the same number of samples");
        }
        if u.is_empty() {
            return arg_err("trajectory needs at least one sample");
        }
        if !(dt > 0.0) || !dt.is_finite() {
            return arg_err(format!("sampling time must be > 0, got {dt}"));
        }
        Ok(Self { u, y, n_u, n_y, dt })
    }

    /// Single-channel convenience constructor.
    pub fn scalar(u: &[f64], y: &[f64], dt: f64) -> Result<Self> {
        if u.len() != y.len() {
            return arg_err(format!("input has {} samples, output has {}", u.len(), y.len()));
        }
        Self::from_flat(u.to_vec(), y.to_vec(), 1, 1, dt)
    }

    pub fn len(&self) -> usize {
        self.u.len() / self.n_u
    }

    pub fn is_empty(&self) -> bool {
        self.u.is_empty()
    }

    pub fn n_u(&self) -> usize {
        self.n_u
    }

    pub fn n_y(&self) -> usize {
        self.n_y
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn u(&self, i: usize) -> &[f64] {
        &self.u[i * self.n_u..(i + 1) * self.n_u]
    }

    pub fn y(&self, i: usize) -> &[f64] {
        &self.y[i * self.n_y..(i + 1) * self.n_y]
    }

    pub fn u_flat(&self) -> &[f64] {
        &self.u
    }

    pub fn y_flat(&self) -> &[f64] {
        &self.y
    }

    /// First `len` samples.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.len() {
            return arg_err(format!("prefix length {len} outside 1..={}", self.len()));
        }
        Self::from_flat(
            self.u[..len * self.n_u].to_vec(),
            self.y[..len * self.n_y].to_vec(),
            self.n_u,
            self.n_y,
            self.dt,
        )
    }

    /// Samples `start..start+len`.
    pub fn slice(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return arg_err(format!("slice {start}..{} outside 0..{}", start + len, self.len()));
        }
        Self::from_flat(
            self.u[start * self.n_u..(start + len) * self.n_u].to_vec(),
            self.y[start * self.n_y..(start + len) * self.n_y].to_vec(),
            self.n_u,
            self.n_y,
            self.dt,
        )
    }

    /// Number of depth-`depth` windows, `T - L + 1`.
    pub fn columns(&self, depth: usize) -> Result<usize> {
        if depth == 0 {
            return arg_err("window depth must be positive");
        }
        if self.len() < depth {
            return Err(Error::InsufficientData { samples: self.len(), depth });
        }
        Ok(self.len() - depth + 1)
    }

    /// Window `j` (0-based) of depth `depth`.
    pub fn window(&self, depth: usize, j: usize) -> Result<Window<'_>> {
        let n = self.columns(depth)?;
        if j >= n {
            return arg_err(format!("window index {j} outside 0..{n}"));
        }
        Ok(self.window_unchecked(depth, j))
    }

    fn window_unchecked(&self, depth: usize, j: usize) -> Window<'_> {
        Window {
            u: &self.u[j * self.n_u..(j + depth) * self.n_u],
            y: &self.y[j * self.n_y..(j + depth) * self.n_y],
            n_u: self.n_u,
            n_y: self.n_y,
        }
    }

    /// Per-coordinate standard deviation of the output, pooled over coordinates.
    pub fn output_std(&self) -> f64 {
        let t = self.len() as f64;
        let mut acc = 0.0;
        for c in 0..self.n_y {
            let mean = (0..self.len()).map(|i| self.y(i)[c]).sum::<f64>() / t;
            acc += (0..self.len()).map(|i| (self.y(i)[c] - mean).powi(2)).sum::<f64>() / t;
        }
        (acc / self.n_y as f64).sqrt()
    }
}

/// Borrowed depth-`L` window: `L` input samples followed by `L` output samples.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Window<'a> {
    pub u: &'a [f64],
    pub y: &'a [f64],
    pub n_u: usize,
    pub n_y: usize,
}

impl<'a> Window<'a> {
    pub fn depth(&self) -> usize {
        self.u.len() / self.n_u
    }

    pub fn u_at(&self, k: usize) -> &'a [f64] {
        &self.u[k * self.n_u..(k + 1) * self.n_u]
    }

    pub fn y_at(&self, k: usize) -> &'a [f64] {
        &self.y[k * self.n_y..(k + 1) * self.n_y]
    }

    pub fn to_owned(&self) -> OwnedWindow {
        OwnedWindow { u: self.u.to_vec(), y: self.y.to_vec(), n_u: self.n_u, n_y: self.n_y }
    }
}

/// Owned window, used for query trajectories.
#[derive(Clone, Debug, PartialEq)]
pub struct OwnedWindow {
    pub u: Vec<f64>,
    pub y: Vec<f64>,
    pub n_u: usize,
    pub n_y: usize,
}

impl OwnedWindow {
    pub fn view(&self) -> Window<'_> {
        Window { u: &self.u, y: &self.y, n_u: self.n_u, n_y: self.n_y }
    }

    /// Stacked numeric vector `[u_1..u_L, y_1..y_L]`, the column layout of
    /// [`numeric_hankel`].
    pub fn stacked(&self) -> Vec<f64> {
        let mut v = self.u.clone();
        v.extend_from_slice(&self.y);
        v
    }
}

fn check_pair(a: &Window<'_>, b: &Window<'_>) -> Result<()> {
    if a.n_u != b.n_u || a.n_y != b.n_y || a.u.len() != b.u.len() || a.y.len() != b.y.len() {
        return arg_err("windows differ in depth or dimension");
    }
    if a.u.len() / a.n_u != a.y.len() / a.n_y {
        return arg_err("window channels differ in depth");
    }
    Ok(())
}

/// Sum of `k_u` over aligned input samples plus `k_y` over aligned output samples.
pub fn trajectory_kernel(k_u: &KernelSpec, k_y: &KernelSpec, a: &Window<'_>, b: &Window<'_>) -> Result<f64> {
    check_pair(a, b)?;
    let mut total = 0.0;
    for k in 0..a.depth() {
        total += k_u.eval(a.u_at(k), b.u_at(k))?;
        total += k_y.eval(a.y_at(k), b.y_at(k))?;
    }
    Ok(total)
}

/// [`trajectory_kernel`] with `data` as the noisy side: each factor is the mean
/// embedding over the data kernel's noise model.
pub fn trajectory_kernel_embedded(
    k_u: &DataKernel,
    k_y: &DataKernel,
    data: &Window<'_>,
    query: &Window<'_>,
) -> Result<f64> {
    check_pair(data, query)?;
    let mut total = 0.0;
    for k in 0..data.depth() {
        total += k_u.eval(data.u_at(k), query.u_at(k))?;
        total += k_y.eval(data.y_at(k), query.y_at(k))?;
    }
    Ok(total)
}

/// Eigen-decomposition of a Gram matrix, optionally after symmetric diagonal
/// scaling `D K D` with `D = diag(K)^{-1/2}`. Eigenvalues below
/// `n · ε · λ_max` are treated as zero.
#[derive(Clone, Debug)]
pub struct GramSpectrum {
    pub eigenvalues: DVector<f64>,
    pub eigenvectors: DMatrix<f64>,
    pub cutoff: f64,
    /// Diagonal of `D`; all ones when unscaled.
    pub scale: DVector<f64>,
}

impl GramSpectrum {
    pub fn new(k: &DMatrix<f64>, scaled: bool) -> Self {
        let n = k.nrows();
        let scale = if scaled {
            DVector::from_fn(n, |i, _| if k[(i, i)] > 0.0 { 1.0 / k[(i, i)].sqrt() } else { 1.0 })
        } else {
            DVector::from_element(n, 1.0)
        };
        let ks = DMatrix::from_fn(n, n, |i, j| scale[i] * k[(i, j)] * scale[j]);
        let eig = SymmetricEigen::new(ks);
        let max = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
        let cutoff = n.max(1) as f64 * f64::EPSILON * max;
        Self { eigenvalues: eig.eigenvalues, eigenvectors: eig.eigenvectors, cutoff, scale }
    }

    /// A minimizer of `gᵀKg − 2gᵀc + ridge·|g|²`. A positive ridge requires the
    /// unscaled decomposition.
    pub fn solve(&self, c: &DVector<f64>, ridge: f64) -> DVector<f64> {
        let mut proj = self.eigenvectors.tr_mul(&c.component_mul(&self.scale));
        for (p, &lam) in proj.iter_mut().zip(self.eigenvalues.iter()) {
            let keep = if ridge > 0.0 { lam.max(0.0) + ridge } else if lam > self.cutoff { lam } else { 0.0 };
            *p = if keep > 0.0 { *p / keep } else { 0.0 };
        }
        (&self.eigenvectors * proj).component_mul(&self.scale)
    }
}

/// Data, window depth, kernels and the dense `n × n` Gram matrix of all windows.
#[derive(Debug)]
pub struct GramProblem {
    data: TrajectoryData,
    depth: usize,
    k_u: DataKernel,
    k_y: DataKernel,
    noise: NoiseModel,
    gram: DMatrix<f64>,
    spectrum: OnceLock<GramSpectrum>,
    ridge_spectrum: OnceLock<GramSpectrum>,
}

impl GramProblem {
    pub fn data(&self) -> &TrajectoryData {
        &self.data
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn columns(&self) -> usize {
        self.gram.nrows()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn input_kernel(&self) -> &DataKernel {
        &self.k_u
    }

    pub fn output_kernel(&self) -> &DataKernel {
        &self.k_y
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn window(&self, j: usize) -> Window<'_> {
        self.data.window_unchecked(self.depth, j)
    }

    /// Eigen-decomposition of the diagonally scaled `K`, computed on first use.
    /// Scaling keeps windows of small norm resolvable next to large ones.
    pub fn spectrum(&self) -> &GramSpectrum {
        self.spectrum.get_or_init(|| GramSpectrum::new(&self.gram, true))
    }

    /// Minimizer of `gᵀKg − 2gᵀc + ridge·|g|²`.
    pub fn solve(&self, c: &DVector<f64>, ridge: f64) -> DVector<f64> {
        if ridge > 0.0 {
            self.ridge_spectrum.get_or_init(|| GramSpectrum::new(&self.gram, false)).solve(c, ridge)
        } else {
            self.spectrum().solve(c, 0.0)
        }
    }

    /// Query-side self kernel `k(v, v)` (noise-free on both sides).
    pub fn self_kernel(&self, w: &Window<'_>) -> Result<f64> {
        trajectory_kernel(self.k_u.spec(), self.k_y.spec(), w, w)
    }
}

/// Builds the Gram matrix of all depth-`depth` windows of `data`.
pub fn build_gram(
    data: TrajectoryData,
    depth: usize,
    k_u: KernelSpec,
    k_y: KernelSpec,
    noise: NoiseModel,
) -> Result<GramProblem> {
    let n = data.columns(depth)?;
    let k_u = DataKernel::new(k_u, &noise, data.n_u())?;
    let k_y = DataKernel::new(k_y, &noise, data.n_y())?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let wi = data.window_unchecked(depth, i);
            (i..n)
                .map(|j| trajectory_kernel_embedded(&k_u, &k_y, &wi, &data.window_unchecked(depth, j)))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut gram = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (off, v) in row.iter().enumerate() {
            gram[(i, i + off)] = *v;
            gram[(i + off, i)] = *v;
        }
    }
    Ok(GramProblem { data, depth, k_u, k_y, noise, gram, spectrum: OnceLock::new(), ridge_spectrum: OnceLock::new() })
}

/// Input-only Gram matrix `(K_u)_{ij} = Σ_k k_u(u_{i+k}, u_{j+k})`.
pub fn input_gram(data: &TrajectoryData, depth: usize, k_u: &KernelSpec) -> Result<DMatrix<f64>> {
    let n = data.columns(depth)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (i..n)
                .map(|j| {
                    (0..depth).try_fold(0.0, |acc, k| Ok(acc + k_u.eval(data.u(i + k), data.u(j + k))?))
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut k = DMatrix::zeros(n, n);
    for (i, row) in rows.iter().enumerate() {
        for (off, v) in row.iter().enumerate() {
            k[(i, i + off)] = *v;
            k[(i + off, i)] = *v;
        }
    }
    Ok(k)
}

/// Numerical rank at tolerance `1e-9 · n · σ_max`.
pub fn numerical_rank(singular_values: &[f64], n: usize) -> usize {
    let max = singular_values.first().copied().unwrap_or(0.0);
    let tol = 1e-9 * n as f64 * max;
    singular_values.iter().filter(|&&s| s > tol).count()
}

/// Persistent-excitation rank of the input Gram matrix, with its singular
/// values in descending order.
pub fn pe_rank(data: &TrajectoryData, depth: usize, k_u: &KernelSpec) -> Result<(usize, Vec<f64>)> {
    let k = input_gram(data, depth, k_u)?;
    let n = k.nrows();
    let sv = singular_values(&k)?;
    Ok((numerical_rank(&sv, n), sv))
}

/// `trace(K_u) / (L · n)`. A heuristic for comparing how informative data sets
/// are; it is not a rank bound.
pub fn pe_trace_score(data: &TrajectoryData, depth: usize, k_u: &KernelSpec) -> Result<f64> {
    let n = data.columns(depth)?;
    let mut trace = 0.0;
    for i in 0..n {
        for k in 0..depth {
            trace += k_u.eval(data.u(i + k), data.u(i + k))?;
        }
    }
    Ok(trace / (depth * n) as f64)
}

/// Numeric stacked Hankel matrix with rows `[u block; y block]`; column `j`
/// equals `window(j).stacked()`.
pub fn numeric_hankel(data: &TrajectoryData, depth: usize) -> Result<DMatrix<f64>> {
    let n = data.columns(depth)?;
    let (nu, ny) = (data.n_u(), data.n_y());
    let rows = depth * (nu + ny);
    Ok(DMatrix::from_fn(rows, n, |r, j| {
        if r < depth * nu {
            data.u_flat()[j * nu + r]
        } else {
            data.y_flat()[j * ny + r - depth * nu]
        }
    }))
}

/// Numeric input-only Hankel matrix.
pub fn numeric_input_hankel(data: &TrajectoryData, depth: usize) -> Result<DMatrix<f64>> {
    let n = data.columns(depth)?;
    let nu = data.n_u();
    Ok(DMatrix::from_fn(depth * nu, n, |r, j| data.u_flat()[j * nu + r]))
}
