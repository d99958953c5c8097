//! Membership residual of a query window against the span of the data windows.
//!
//! For a query window `ṽ` and weights `g` the residual is
//! `gᵀKg + k(ṽ,ṽ) − 2 Σ g_i k(v_i, ṽ)`, the squared RKHS distance between `ṽ`
//! and `Σ g_i v_i`. Both the self term and the cross terms are sums over
//! window positions, so contributions of positions that never change during a
//! solve are computed once and cached.
//!
//! The residual is quadratic in `g`. [`WindowObjective::reduced`] eliminates
//! `g` exactly through the spectrum of `K`, leaving a function of the free
//! window positions only; by the envelope theorem its gradient is the partial
//! gradient of the residual at the optimal `g`.

use nalgebra::DVector;

use crate::error::{arg_err, Result};
use crate::hankel::{GramProblem, OwnedWindow};

/// Query window with a fixed prefix and free suffixes on each channel.
pub(crate) struct WindowObjective<'a> {
    gram: &'a GramProblem,
    query: OwnedWindow,
    /// Input positions `u_free_from..L` are free.
    u_free_from: usize,
    /// Output positions `y_free_from..L` are free.
    y_free_from: usize,
    cross_fixed: Vec<f64>,
    self_fixed: f64,
    ridge: f64,
}

pub(crate) struct Evaluation {
    pub reduced: f64,
    pub g: DVector<f64>,
    pub cross: DVector<f64>,
    pub self_kernel: f64,
}

impl<'a> WindowObjective<'a> {
    pub fn new(
        gram: &'a GramProblem,
        query: OwnedWindow,
        u_free_from: usize,
        y_free_from: usize,
        ridge: f64,
    ) -> Result<Self> {
        let depth = gram.depth();
        let data = gram.data();
        if query.n_u != data.n_u() || query.n_y != data.n_y() {
            return arg_err("query dimensions differ from the data");
        }
        if query.u.len() != depth * query.n_u || query.y.len() != depth * query.n_y {
            return arg_err(format!("query window must have depth {depth}"));
        }
        if u_free_from > depth || y_free_from > depth {
            return arg_err("free range outside the window");
        }
        if !(ridge >= 0.0) {
            return arg_err("ridge must be >= 0");
        }
        let (ku, ky) = (gram.input_kernel(), gram.output_kernel());
        let view = query.view();
        let n = gram.columns();
        let mut cross_fixed = vec![0.0; n];
        for (i, c) in cross_fixed.iter_mut().enumerate() {
            let w = gram.window(i);
            for k in 0..u_free_from {
                *c += ku.eval(w.u_at(k), view.u_at(k))?;
            }
            for k in 0..y_free_from {
                *c += ky.eval(w.y_at(k), view.y_at(k))?;
            }
        }
        let mut self_fixed = 0.0;
        for k in 0..u_free_from {
            self_fixed += ku.spec().eval(view.u_at(k), view.u_at(k))?;
        }
        for k in 0..y_free_from {
            self_fixed += ky.spec().eval(view.y_at(k), view.y_at(k))?;
        }
        Ok(Self { gram, query, u_free_from, y_free_from, cross_fixed, self_fixed, ridge })
    }

    pub fn free_u_len(&self) -> usize {
        (self.gram.depth() - self.u_free_from) * self.query.n_u
    }

    /// Writes the free values `[u_free, y_free]` into the query.
    pub fn set_free(&mut self, free: &[f64]) {
        let nu = self.free_u_len();
        let uo = self.u_free_from * self.query.n_u;
        let yo = self.y_free_from * self.query.n_y;
        self.query.u[uo..].copy_from_slice(&free[..nu]);
        self.query.y[yo..].copy_from_slice(&free[nu..]);
    }

    /// Cross vector `c_i = k(v_i, ṽ)` and self term `k(ṽ, ṽ)`.
    pub fn kernel_terms(&self) -> Result<(DVector<f64>, f64)> {
        let depth = self.gram.depth();
        let (ku, ky) = (self.gram.input_kernel(), self.gram.output_kernel());
        let view = self.query.view();
        let mut cross = DVector::from_column_slice(&self.cross_fixed);
        for (i, c) in cross.iter_mut().enumerate() {
            let w = self.gram.window(i);
            for k in self.u_free_from..depth {
                *c += ku.eval(w.u_at(k), view.u_at(k))?;
            }
            for k in self.y_free_from..depth {
                *c += ky.eval(w.y_at(k), view.y_at(k))?;
            }
        }
        let mut s = self.self_fixed;
        for k in self.u_free_from..depth {
            s += ku.spec().eval(view.u_at(k), view.u_at(k))?;
        }
        for k in self.y_free_from..depth {
            s += ky.spec().eval(view.y_at(k), view.y_at(k))?;
        }
        Ok((cross, s))
    }

    /// Gradient of the residual with respect to the free positions at fixed `g`.
    pub fn free_gradient(&self, g: &DVector<f64>, out: &mut [f64]) -> Result<()> {
        let depth = self.gram.depth();
        let (nu, ny) = (self.query.n_u, self.query.n_y);
        let (ku, ky) = (self.gram.input_kernel(), self.gram.output_kernel());
        let view = self.query.view();
        out.iter_mut().for_each(|v| *v = 0.0);
        let (out_u, out_y) = out.split_at_mut(self.free_u_len());
        for k in self.u_free_from..depth {
            let o = &mut out_u[(k - self.u_free_from) * nu..(k - self.u_free_from + 1) * nu];
            let q = view.u_at(k);
            ku.spec().accumulate_grad_y(q, q, 2.0, o)?;
            for (i, gi) in g.iter().enumerate() {
                if *gi != 0.0 {
                    ku.accumulate_grad(self.gram.window(i).u_at(k), q, -2.0 * gi, o)?;
                }
            }
        }
        for k in self.y_free_from..depth {
            let o = &mut out_y[(k - self.y_free_from) * ny..(k - self.y_free_from + 1) * ny];
            let q = view.y_at(k);
            ky.spec().accumulate_grad_y(q, q, 2.0, o)?;
            for (i, gi) in g.iter().enumerate() {
                if *gi != 0.0 {
                    ky.accumulate_grad(self.gram.window(i).y_at(k), q, -2.0 * gi, o)?;
                }
            }
        }
        Ok(())
    }

    /// Residual at the given `g`, `gᵀKg + k(ṽ,ṽ) − 2gᵀc`.
    pub fn residual_at(&self, g: &DVector<f64>) -> Result<f64> {
        let (cross, s) = self.kernel_terms()?;
        Ok(residual_from_terms(self.gram, g, &cross, s))
    }

    /// Residual minimized over `g` (plus `ridge·|g|²`), with the minimizer.
    pub fn reduced(&self) -> Result<Evaluation> {
        let (cross, s) = self.kernel_terms()?;
        let g = self.gram.solve(&cross, self.ridge);
        let reduced = s - g.dot(&cross);
        Ok(Evaluation { reduced, g, cross, self_kernel: s })
    }

    /// Reduced residual and its gradient with respect to the free positions.
    pub fn reduced_with_grad(&mut self, free: &[f64], grad: &mut [f64]) -> Result<Evaluation> {
        self.set_free(free);
        let e = self.reduced()?;
        self.free_gradient(&e.g, grad)?;
        Ok(e)
    }

    /// Squared distances between the known part of the query (inputs before
    /// `u_known`, outputs before `y_known`) and every data window, ascending.
    pub fn nearest_windows(&self, u_known: usize, y_known: usize) -> Vec<(f64, usize)> {
        let view = self.query.view();
        let (nu, ny) = (self.query.n_u, self.query.n_y);
        let mut d: Vec<(f64, usize)> = (0..self.gram.columns())
            .map(|j| {
                let w = self.gram.window(j);
                let du: f64 = w.u[..u_known * nu].iter().zip(&view.u[..u_known * nu]).map(|(a, b)| (a - b).powi(2)).sum();
                let dy: f64 = w.y[..y_known * ny].iter().zip(&view.y[..y_known * ny]).map(|(a, b)| (a - b).powi(2)).sum();
                (du + dy, j)
            })
            .collect();
        d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d
    }
}

pub(crate) fn residual_from_terms(gram: &GramProblem, g: &DVector<f64>, cross: &DVector<f64>, s: f64) -> f64 {
    let kg = gram.gram() * g;
    g.dot(&kg) + s - 2.0 * g.dot(cross)
}
