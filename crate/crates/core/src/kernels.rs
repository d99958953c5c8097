//! Scalar kernels on real vectors.
//!
//! A [`KernelSpec`] is a positive-weighted sum of terms, each term a product of
//! base factors (linear, polynomial, RBF, exponential). Sums and products of
//! positive-semidefinite kernels stay positive semidefinite, so every spec that
//! passes validation is a valid reproducing kernel.
//!
//! Besides plain evaluation this module provides the analytic gradient with
//! respect to the second argument and the noise-averaged (mean-embedded)
//! evaluation used when the recorded data is corrupted by measurement noise.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};

/// Largest exponent accepted by the exponential factor before evaluation is
/// reported as an overflow.
pub const EXP_LIMIT: f64 = 700.0;

/// Number of antithetic pairs drawn when a Gaussian noise model has to fall
/// back to an empirical average.
const FALLBACK_PAIRS: usize = 32;
const FALLBACK_STREAM: u64 = 0x6b6d_65;

/// One multiplicative factor of a kernel term.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "snake_case")]
pub enum Factor {
    /// `x·y`
    Linear,
    /// `(offset + x·y)^degree`
    Polynomial { degree: u32, offset: f64 },
    /// `exp(-|x - y|² / denominator)`
    Rbf { denominator: f64 },
    /// `exp(x·y)`
    Exponential,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub weight: f64,
    pub factors: Vec<Factor>,
}

impl Term {
    pub fn new(weight: f64, factors: Vec<Factor>) -> Self {
        Self { weight, factors }
    }
}

/// Weighted sum of factor products. Immutable once validated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Term>", into = "Vec<Term>")]
pub struct KernelSpec {
    terms: Vec<Term>,
}

impl TryFrom<Vec<Term>> for KernelSpec {
    type Error = Error;

    fn try_from(terms: Vec<Term>) -> Result<Self> {
        Self::new(terms)
    }
}

impl From<KernelSpec> for Vec<Term> {
    fn from(spec: KernelSpec) -> Self {
        spec.terms
    }
}

/// Per-call scratch: the inner product and squared distance are shared by all
/// factors of all terms.
struct Pair {
    dot: f64,
    sqdist: f64,
}

impl Pair {
    fn new(x: &[f64], y: &[f64]) -> Self {
        let mut dot = 0.0;
        let mut sqdist = 0.0;
        for (a, b) in x.iter().zip(y) {
            dot += a * b;
            let d = a - b;
            sqdist += d * d;
        }
        Self { dot, sqdist }
    }
}

impl Factor {
    fn validate(&self) -> Result<()> {
        match *self {
            Factor::Polynomial { degree, offset } => {
                if degree < 1 {
                    return arg_err("polynomial degree must be at least 1");
                }
                if !(offset >= 0.0) || !offset.is_finite() {
                    return arg_err(format!("polynomial offset must be finite and >= 0, got {offset}"));
                }
            }
            Factor::Rbf { denominator } => {
                if !(denominator > 0.0) || !denominator.is_finite() {
                    return arg_err(format!("rbf denominator must be finite and > 0, got {denominator}"));
                }
            }
            Factor::Linear | Factor::Exponential => {}
        }
        Ok(())
    }

    fn value(&self, p: &Pair, term: usize) -> Result<f64> {
        match *self {
            Factor::Linear => Ok(p.dot),
            Factor::Polynomial { degree, offset } => Ok((offset + p.dot).powi(degree as i32)),
            Factor::Rbf { denominator } => Ok((-p.sqdist / denominator).exp()),
            Factor::Exponential => {
                if p.dot > EXP_LIMIT {
                    return Err(Error::NumericOverflow { term, exponent: p.dot, limit: EXP_LIMIT });
                }
                Ok(p.dot.exp())
            }
        }
    }

    /// Adds `scale * d(factor)/dy` to `out`, given the factor value.
    fn add_grad(&self, p: &Pair, value: f64, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) {
        match *self {
            Factor::Linear => {
                for (o, a) in out.iter_mut().zip(x) {
                    *o += scale * a;
                }
            }
            Factor::Polynomial { degree, offset } => {
                let c = scale * degree as f64 * (offset + p.dot).powi(degree as i32 - 1);
                for (o, a) in out.iter_mut().zip(x) {
                    *o += c * a;
                }
            }
            Factor::Rbf { denominator } => {
                let c = scale * value * 2.0 / denominator;
                for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                    *o += c * (a - b);
                }
            }
            Factor::Exponential => {
                let c = scale * value;
                for (o, a) in out.iter_mut().zip(x) {
                    *o += c * a;
                }
            }
        }
    }
}

impl KernelSpec {
    pub fn new(terms: Vec<Term>) -> Result<Self> {
        if terms.is_empty() {
            return arg_err("kernel needs at least one term");
        }
        for (i, t) in terms.iter().enumerate() {
            if !(t.weight > 0.0) || !t.weight.is_finite() {
                return arg_err(format!("term {i}: weight must be finite and > 0, got {}", t.weight));
            }
            if t.factors.is_empty() {
                return arg_err(format!("term {i}: needs at least one factor"));
            }
            for f in &t.factors {
                f.validate()?;
            }
        }
        Ok(Self { terms })
    }

    /// A single-factor kernel with unit weight.
    pub fn single(factor: Factor) -> Self {
        Self::new(vec![Term::new(1.0, vec![factor])]).expect("invalid single-factor kernel")
    }

    pub fn linear() -> Self {
        Self::single(Factor::Linear)
    }

    pub fn rbf(denominator: f64) -> Self {
        Self::single(Factor::Rbf { denominator })
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Pendulum input kernel: `0.2 rbf(6) + exp + 0.01 rbf(6)·exp`.
    pub fn pendulum_input() -> Self {
        let rbf = Factor::Rbf { denominator: 6.0 };
        Self::new(vec![
            Term::new(0.2, vec![rbf.clone()]),
            Term::new(1.0, vec![Factor::Exponential]),
            Term::new(0.01, vec![rbf, Factor::Exponential]),
        ])
        .unwrap()
    }

    /// Pendulum output kernel: the input kernel plus `(1 + x·y)²`.
    pub fn pendulum_output() -> Self {
        let mut terms = Self::pendulum_input().terms;
        terms.push(Term::new(1.0, vec![Factor::Polynomial { degree: 2, offset: 1.0 }]));
        Self::new(terms).unwrap()
    }

    /// Motor kernel, shared by input and output: `0.1 rbf(4) + rbf(4)·exp`.
    pub fn motor() -> Self {
        let rbf = Factor::Rbf { denominator: 4.0 };
        Self::new(vec![
            Term::new(0.1, vec![rbf.clone()]),
            Term::new(1.0, vec![rbf, Factor::Exponential]),
        ])
        .unwrap()
    }

    /// `k(x, y)`.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        check_dims(x, y)?;
        let p = Pair::new(x, y);
        let mut total = 0.0;
        for (i, t) in self.terms.iter().enumerate() {
            let mut v = t.weight;
            for f in &t.factors {
                v *= f.value(&p, i)?;
            }
            if !v.is_finite() {
                return Err(Error::NumericOverflow { term: i, exponent: p.dot, limit: EXP_LIMIT });
            }
            total += v;
        }
        Ok(total)
    }

    /// `∂k(x, y)/∂y`.
    pub fn eval_grad_y(&self, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; y.len()];
        self.accumulate_grad_y(x, y, 1.0, &mut out)?;
        Ok(out)
    }

    /// Adds `scale · ∂k(x, y)/∂y` into `out` and returns `k(x, y)`.
    pub fn accumulate_grad_y(&self, x: &[f64], y: &[f64], scale: f64, out: &mut [f64]) -> Result<f64> {
        check_dims(x, y)?;
        if out.len() != y.len() {
            return arg_err("gradient buffer has wrong length");
        }
        let p = Pair::new(x, y);
        let mut total = 0.0;
        let mut values = [0.0f64; 8];
        for (i, t) in self.terms.iter().enumerate() {
            let nf = t.factors.len();
            let mut heap;
            let vals: &mut [f64] = if nf <= values.len() {
                &mut values[..nf]
            } else {
                heap = vec![0.0; nf];
                &mut heap
            };
            let mut prod = t.weight;
            for (v, f) in vals.iter_mut().zip(&t.factors) {
                *v = f.value(&p, i)?;
                prod *= *v;
            }
            if !prod.is_finite() {
                return Err(Error::NumericOverflow { term: i, exponent: p.dot, limit: EXP_LIMIT });
            }
            total += prod;
            for (j, f) in t.factors.iter().enumerate() {
                let others: f64 = vals
                    .iter()
                    .enumerate()
                    .filter(|&(l, _)| l != j)
                    .map(|(_, v)| *v)
                    .product();
                f.add_grad(&p, vals[j], x, y, scale * t.weight * others, out);
            }
        }
        Ok(total)
    }

    /// Closed-form Gaussian embedding of one term, if it has one: either a pure
    /// product of RBF factors or a single linear factor.
    fn gaussian_term(&self, t: &Term, sigma: f64, p: &Pair, dim: usize) -> Option<(f64, GaussianShape)> {
        let s2 = sigma * sigma;
        if t.factors.iter().all(|f| matches!(f, Factor::Rbf { .. })) {
            let inv: f64 = t
                .factors
                .iter()
                .map(|f| match f {
                    Factor::Rbf { denominator } => 1.0 / denominator,
                    _ => unreachable!(),
                })
                .sum();
            let d = 1.0 / inv;
            let spread = d + 2.0 * s2;
            let value = t.weight * (d / spread).powf(dim as f64 / 2.0) * (-p.sqdist / spread).exp();
            return Some((value, GaussianShape::Rbf { spread }));
        }
        if let [Factor::Linear] = t.factors.as_slice() {
            return Some((t.weight * p.dot, GaussianShape::Linear));
        }
        None
    }

    /// Whether every term has a closed-form Gaussian mean embedding.
    pub fn gaussian_embeddable(&self) -> bool {
        let p = Pair { dot: 0.0, sqdist: 0.0 };
        self.terms.iter().all(|t| self.gaussian_term(t, 1.0, &p, 1).is_some())
    }
}

enum GaussianShape {
    Rbf { spread: f64 },
    Linear,
}

fn check_dims(x: &[f64], y: &[f64]) -> Result<()> {
    if x.len() != y.len() {
        return arg_err(format!("kernel arguments differ in dimension ({} vs {})", x.len(), y.len()));
    }
    Ok(())
}

/// Distribution of the measurement noise on the data-side argument.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    #[default]
    None,
    /// Independent zero-mean Gaussian noise with the same std on each coordinate.
    Gaussian { sigma: f64 },
    /// Equally weighted offset vectors.
    Empirical { samples: Vec<Vec<f64>> },
}

impl NoiseModel {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseModel::None => Ok(()),
            NoiseModel::Gaussian { sigma } => {
                if !(*sigma >= 0.0) || !sigma.is_finite() {
                    return arg_err(format!("noise sigma must be finite and >= 0, got {sigma}"));
                }
                Ok(())
            }
            NoiseModel::Empirical { samples } => {
                if samples.is_empty() {
                    return arg_err("empirical noise needs at least one sample");
                }
                Ok(())
            }
        }
    }

    pub fn is_none(&self) -> bool {
        match self {
            NoiseModel::None => true,
            NoiseModel::Gaussian { sigma } => *sigma == 0.0,
            NoiseModel::Empirical { .. } => false,
        }
    }
}

/// `E[k(x_center + w, y)]` over the noise `w`.
pub fn mean_embed(spec: &KernelSpec, noise: &NoiseModel, x_center: &[f64], y: &[f64]) -> Result<f64> {
    noise.validate()?;
    check_dims(x_center, y)?;
    match noise {
        NoiseModel::None => spec.eval(x_center, y),
        NoiseModel::Gaussian { sigma } if *sigma == 0.0 => spec.eval(x_center, y),
        NoiseModel::Gaussian { sigma } => gaussian_embed(spec, *sigma, x_center, y, None),
        NoiseModel::Empirical { samples } => empirical_embed(spec, samples, x_center, y, None),
    }
}

/// `∂/∂y E[k(x_center + w, y)]`.
pub fn mean_embed_grad_y(
    spec: &KernelSpec,
    noise: &NoiseModel,
    x_center: &[f64],
    y: &[f64],
) -> Result<Vec<f64>> {
    noise.validate()?;
    check_dims(x_center, y)?;
    let mut out = vec![0.0; y.len()];
    match noise {
        NoiseModel::None => {
            spec.accumulate_grad_y(x_center, y, 1.0, &mut out)?;
        }
        NoiseModel::Gaussian { sigma } if *sigma == 0.0 => {
            spec.accumulate_grad_y(x_center, y, 1.0, &mut out)?;
        }
        NoiseModel::Gaussian { sigma } => {
            gaussian_embed(spec, *sigma, x_center, y, Some((1.0, &mut out)))?;
        }
        NoiseModel::Empirical { samples } => {
            empirical_embed(spec, samples, x_center, y, Some((1.0, &mut out)))?;
        }
    }
    Ok(out)
}

fn gaussian_embed(
    spec: &KernelSpec,
    sigma: f64,
    x: &[f64],
    y: &[f64],
    mut grad: Option<(f64, &mut [f64])>,
) -> Result<f64> {
    let p = Pair::new(x, y);
    let mut total = 0.0;
    for (i, t) in spec.terms.iter().enumerate() {
        let (value, shape) = spec.gaussian_term(t, sigma, &p, x.len()).ok_or_else(|| {
            Error::UnsupportedEmbedding(format!(
                "term {i} ({:?}) has no closed form under Gaussian noise",
                t.factors
            ))
        })?;
        total += value;
        if let Some((scale, out)) = grad.as_mut() {
            match shape {
                GaussianShape::Rbf { spread } => {
                    let c = *scale * value * 2.0 / spread;
                    for ((o, a), b) in out.iter_mut().zip(x).zip(y) {
                        *o += c * (a - b);
                    }
                }
                GaussianShape::Linear => {
                    let c = *scale * t.weight;
                    for (o, a) in out.iter_mut().zip(x) {
                        *o += c * a;
                    }
                }
            }
        }
    }
    Ok(total)
}

fn empirical_embed(
    spec: &KernelSpec,
    samples: &[Vec<f64>],
    x: &[f64],
    y: &[f64],
    mut grad: Option<(f64, &mut [f64])>,
) -> Result<f64> {
    let w = 1.0 / samples.len() as f64;
    let mut shifted = vec![0.0; x.len()];
    let mut total = 0.0;
    for s in samples {
        if s.len() != x.len() {
            return arg_err(format!(
                "noise sample has dimension {}, data has {}",
                s.len(),
                x.len()
            ));
        }
        for ((o, a), b) in shifted.iter_mut().zip(x).zip(s) {
            *o = a + b;
        }
        total += match grad.as_mut() {
            Some((scale, out)) => spec.accumulate_grad_y(&shifted, y, *scale * w, out)?,
            None => spec.eval(&shifted, y)?,
        };
    }
    Ok(total * w)
}

#[derive(Clone, Debug)]
enum Embedding {
    Exact,
    Gaussian(f64),
    Empirical(Vec<Vec<f64>>),
}

/// A kernel bound to the noise model of the data it is evaluated against.
///
/// The first argument of [`DataKernel::eval`] is always the recorded (noisy)
/// sample; the second is treated as noise-free. Gaussian noise on a spec without
/// a closed form is resolved once, at construction, into a fixed antithetic
/// sample set.
#[derive(Clone, Debug)]
pub struct DataKernel {
    spec: KernelSpec,
    embedding: Embedding,
}

impl DataKernel {
    pub fn new(spec: KernelSpec, noise: &NoiseModel, dim: usize) -> Result<Self> {
        noise.validate()?;
        let embedding = match noise {
            _ if noise.is_none() => Embedding::Exact,
            NoiseModel::Gaussian { sigma } if spec.gaussian_embeddable() => Embedding::Gaussian(*sigma),
            NoiseModel::Gaussian { sigma } => {
                log::debug!("gaussian embedding unsupported for {spec:?}; using antithetic samples");
                Embedding::Empirical(antithetic_samples(*sigma, dim))
            }
            NoiseModel::Empirical { samples } => {
                if samples.iter().any(|s| s.len() != dim) {
                    return arg_err(format!("empirical noise samples must have dimension {dim}"));
                }
                Embedding::Empirical(samples.clone())
            }
            NoiseModel::None => unreachable!(),
        };
        Ok(Self { spec, embedding })
    }

    pub fn exact(spec: KernelSpec) -> Self {
        Self { spec, embedding: Embedding::Exact }
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn is_exact(&self) -> bool {
        matches!(self.embedding, Embedding::Exact)
    }

    /// Data-side evaluation `E[k(data + w, query)]`.
    #[inline]
    pub fn eval(&self, data: &[f64], query: &[f64]) -> Result<f64> {
        match &self.embedding {
            Embedding::Exact => self.spec.eval(data, query),
            Embedding::Gaussian(s) => gaussian_embed(&self.spec, *s, data, query, None),
            Embedding::Empirical(samples) => empirical_embed(&self.spec, samples, data, query, None),
        }
    }

    /// Adds `scale · ∂/∂query` of [`DataKernel::eval`] into `out`; returns the value.
    #[inline]
    pub fn accumulate_grad(&self, data: &[f64], query: &[f64], scale: f64, out: &mut [f64]) -> Result<f64> {
        match &self.embedding {
            Embedding::Exact => self.spec.accumulate_grad_y(data, query, scale, out),
            Embedding::Gaussian(s) => gaussian_embed(&self.spec, *s, data, query, Some((scale, out))),
            Embedding::Empirical(samples) => {
                empirical_embed(&self.spec, samples, data, query, Some((scale, out)))
            }
        }
    }
}

fn antithetic_samples(sigma: f64, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(FALLBACK_STREAM);
    let normal = Normal::new(0.0, sigma).expect("sigma validated");
    let mut out = Vec::with_capacity(2 * FALLBACK_PAIRS);
    for _ in 0..FALLBACK_PAIRS {
        let s: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        out.push(s.iter().map(|v| -v).collect());
        out.push(s);
    }
    out
}
