//! Ground-truth plants and excitation signals for generating training data.
//!
//! Continuous plants are integrated with classical RK4 over `substeps`
//! sub-intervals per sample under a zero-order-hold input. The measured output
//! of sample `k` is taken from the state at the start of the interval, then
//! shifted and scaled by the plant's output normalization.

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::hankel::TrajectoryData;
use crate::linear::LtiSystem;
use crate::rng::{stream, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PlantKind {
    /// `θ' = ω`, `ω' = −(2g/l) sin θ − μ ω³ + |cos θ| u / l`; measures `θ`.
    Pendulum { g: f64, l: f64, mu: f64 },
    /// Bilinear DC motor with state (rotor current, angular velocity); measures
    /// the angular velocity.
    BilinearMotor { la: f64, ra: f64, km: f64, j: f64, b: f64, tau: f64, ua: f64 },
    /// Discrete-time linear system, stepped exactly.
    Lti(LtiSystem),
}

fn default_substeps() -> usize {
    10
}

fn default_scale() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantModel {
    #[serde(flatten)]
    pub kind: PlantKind,
    pub dt: f64,
    #[serde(default = "default_substeps")]
    pub substeps: usize,
    /// Reported output is `(raw − y_offset) / y_scale`.
    #[serde(default)]
    pub y_offset: f64,
    #[serde(default = "default_scale")]
    pub y_scale: f64,
}

impl PlantModel {
    pub fn pendulum(dt: f64) -> Self {
        Self {
            kind: PlantKind::Pendulum { g: 9.8, l: 0.5, mu: 0.1 },
            dt,
            substeps: default_substeps(),
            y_offset: 0.0,
            y_scale: 1.0,
        }
    }

    /// Bilinear motor with its output centred on the zero-input equilibrium
    /// speed and scaled by 1/100.
    pub fn bilinear_motor(dt: f64) -> Self {
        let (tau, b) = (1.47, 0.00732);
        Self {
            kind: PlantKind::BilinearMotor { la: 0.314, ra: 12.345, km: 0.253, j: 0.00441, b, tau, ua: 60.0 },
            dt,
            substeps: default_substeps(),
            y_offset: -tau / b,
            y_scale: 100.0,
        }
    }

    pub fn lti(sys: LtiSystem) -> Self {
        Self { kind: PlantKind::Lti(sys), dt: 1.0, substeps: 1, y_offset: 0.0, y_scale: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return arg_err(format!("plant dt must be > 0, got {}", self.dt));
        }
        if self.substeps == 0 {
            return arg_err("substeps must be >= 1");
        }
        if !(self.y_scale != 0.0) || !self.y_scale.is_finite() || !self.y_offset.is_finite() {
            return arg_err("output scale must be finite and nonzero");
        }
        match &self.kind {
            PlantKind::Pendulum { g, l, mu } => {
                if !(*g > 0.0 && *l > 0.0 && *mu >= 0.0) {
                    return arg_err("pendulum needs g > 0, l > 0, mu >= 0");
                }
            }
            PlantKind::BilinearMotor { la, ra, km, j, b, tau, ua } => {
                if !(*la > 0.0 && *ra > 0.0 && *km > 0.0 && *j > 0.0 && *b > 0.0) || !tau.is_finite() || !ua.is_finite() {
                    return arg_err("motor parameters La, Ra, km, J, B must be > 0");
                }
            }
            PlantKind::Lti(sys) => sys.validate()?,
        }
        Ok(())
    }

    pub fn n_x(&self) -> usize {
        match &self.kind {
            PlantKind::Pendulum { .. } | PlantKind::BilinearMotor { .. } => 2,
            PlantKind::Lti(s) => s.n_x(),
        }
    }

    pub fn n_u(&self) -> usize {
        match &self.kind {
            PlantKind::Lti(s) => s.n_u(),
            _ => 1,
        }
    }

    pub fn n_y(&self) -> usize {
        match &self.kind {
            PlantKind::Lti(s) => s.n_y(),
            _ => 1,
        }
    }

    /// Default initial state: rest for the pendulum, the zero-input equilibrium
    /// for the motor, the origin for linear systems.
    pub fn default_x0(&self) -> Vec<f64> {
        match &self.kind {
            PlantKind::Pendulum { .. } => vec![0.0, 0.0],
            PlantKind::BilinearMotor { ra, ua, b, tau, .. } => vec![ua / ra, -tau / b],
            PlantKind::Lti(s) => vec![0.0; s.n_x()],
        }
    }

    fn derivative(&self, x: &[f64], u: f64, out: &mut [f64]) {
        match &self.kind {
            PlantKind::Pendulum { g, l, mu } => {
                out[0] = x[1];
                out[1] = -2.0 * g / l * x[0].sin() - mu * x[1].powi(3) + x[0].cos().abs() * u / l;
            }
            PlantKind::BilinearMotor { la, ra, km, j, b, tau, ua } => {
                out[0] = -ra / la * x[0] + km / la * x[1] * u + ua / la;
                out[1] = -b / j * x[1] + km / j * x[0] * u - tau / j;
            }
            PlantKind::Lti(_) => unreachable!("linear plants are stepped exactly"),
        }
    }

    fn measure(&self, raw: &[f64]) -> Vec<f64> {
        raw.iter().map(|v| (v - self.y_offset) / self.y_scale).collect()
    }

    /// Advances one sampling interval under input `u`; returns the next state
    /// and the output measured at the current state.
    pub fn step(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if x.len() != self.n_x() || u.len() != self.n_u() {
            return arg_err(format!(
                "plant expects state dim {} and input dim {}, got {} and {}",
                self.n_x(),
                self.n_u(),
                x.len(),
                u.len()
            ));
        }
        if x.iter().chain(u).any(|v| !v.is_finite()) {
            return arg_err("plant state and input must be finite");
        }
        let (next, raw) = match &self.kind {
            PlantKind::Lti(sys) => sys.step(x, u),
            PlantKind::Pendulum { .. } => (self.rk4(x, u[0]), vec![x[0]]),
            PlantKind::BilinearMotor { .. } => (self.rk4(x, u[0]), vec![x[1]]),
        };
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: 0 });
        }
        Ok((next, self.measure(&raw)))
    }

    fn rk4(&self, x: &[f64], u: f64) -> Vec<f64> {
        let n = x.len();
        let h = self.dt / self.substeps as f64;
        let mut s = x.to_vec();
        let (mut k1, mut k2, mut k3, mut k4, mut tmp) =
            (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for _ in 0..self.substeps {
            self.derivative(&s, u, &mut k1);
            for i in 0..n {
                tmp[i] = s[i] + 0.5 * h * k1[i];
            }
            self.derivative(&tmp, u, &mut k2);
            for i in 0..n {
                tmp[i] = s[i] + 0.5 * h * k2[i];
            }
            self.derivative(&tmp, u, &mut k3);
            for i in 0..n {
                tmp[i] = s[i] + h * k3[i];
            }
            self.derivative(&tmp, u, &mut k4);
            for i in 0..n {
                s[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
            }
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExcitationKind {
    /// i.i.d. uniform on `[lo, hi)`.
    UniformRandom { lo: f64, hi: f64 },
    /// Independent Gaussian samples whose mean moves linearly from `mu_start`
    /// to `mu_end` over the signal.
    DriftingGaussian { mu_start: f64, mu_end: f64, sigma: f64 },
    /// Levels drawn uniformly from `levels`, each held for `hold` samples.
    Prbs { levels: Vec<f64>, hold: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExcitationSpec {
    #[serde(flatten)]
    pub kind: ExcitationKind,
    pub length: usize,
    #[serde(default)]
    pub seed: u64,
}

impl ExcitationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.length == 0 {
            return arg_err("excitation length must be >= 1");
        }
        match &self.kind {
            ExcitationKind::UniformRandom { lo, hi } => {
                if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                    return arg_err("uniform excitation needs finite lo < hi");
                }
            }
            ExcitationKind::DriftingGaussian { mu_start, mu_end, sigma } => {
                if !(*sigma > 0.0) || !mu_start.is_finite() || !mu_end.is_finite() || !sigma.is_finite() {
                    return arg_err("gaussian excitation needs finite means and sigma > 0");
                }
            }
            ExcitationKind::Prbs { levels, hold } => {
                if levels.is_empty() || *hold == 0 || levels.iter().any(|v| !v.is_finite()) {
                    return arg_err("prbs excitation needs finite levels and hold >= 1");
                }
            }
        }
        Ok(())
    }

    /// `length · dim` samples, sample-major.
    pub fn signal(&self, dim: usize) -> Result<Vec<f64>> {
        self.validate()?;
        let mut rng = stream(self.seed, Stream::Excitation);
        let t = self.length;
        let mut out = Vec::with_capacity(t * dim);
        match &self.kind {
            ExcitationKind::UniformRandom { lo, hi } => {
                let dist = Uniform::new(*lo, *hi).map_err(|e| Error::Argument(e.to_string()))?;
                out.extend((0..t * dim).map(|_| dist.sample(&mut rng)));
            }
            ExcitationKind::DriftingGaussian { mu_start, mu_end, sigma } => {
                let unit = Normal::new(0.0, 1.0).unwrap();
                for k in 0..t {
                    let frac = if t > 1 { k as f64 / (t - 1) as f64 } else { 0.0 };
                    let mu = mu_start + (mu_end - mu_start) * frac;
                    out.extend((0..dim).map(|_| mu + sigma * unit.sample(&mut rng)));
                }
            }
            ExcitationKind::Prbs { levels, hold } => {
                let pick = Uniform::new(0, levels.len()).map_err(|e| Error::Argument(e.to_string()))?;
                let mut current = vec![0.0; dim];
                for k in 0..t {
                    if k % hold == 0 {
                        current.iter_mut().for_each(|c| *c = levels[pick.sample(&mut rng)]);
                    }
                    out.extend_from_slice(&current);
                }
            }
        }
        Ok(out)
    }
}

/// Simulates `plant` from `x0` under an input signal (sample-major). Optional
/// additive Gaussian noise with std `noise_std` is applied to the measured
/// outputs, drawn from the measurement-noise stream of `noise_seed`.
pub fn simulate(
    plant: &PlantModel,
    x0: &[f64],
    inputs: &[f64],
    noise_std: f64,
    noise_seed: u64,
) -> Result<(TrajectoryData, Vec<f64>)> {
    plant.validate()?;
    let nu = plant.n_u();
    if inputs.is_empty() || inputs.len() % nu != 0 {
        return arg_err("input signal length must be a positive multiple of the input dimension");
    }
    if !(noise_std >= 0.0) {
        return arg_err("noise std must be >= 0");
    }
    let mut rng = stream(noise_seed, Stream::MeasurementNoise);
    let noise = Normal::new(0.0, noise_std).map_err(|e| Error::Argument(e.to_string()))?;
    let mut x = x0.to_vec();
    let mut ys = Vec::with_capacity(inputs.len() / nu * plant.n_y());
    for (k, u) in inputs.chunks(nu).enumerate() {
        let (next, y) = plant.step(&x, u).map_err(|e| match e {
            Error::Divergence { .. } => Error::Divergence { step: k },
            other => other,
        })?;
        if noise_std > 0.0 {
            ys.extend(y.iter().map(|v| v + noise.sample(&mut rng)));
        } else {
            ys.extend(y);
        }
        x = next;
    }
    let data = TrajectoryData::from_flat(inputs.to_vec(), ys, nu, plant.n_y(), plant.dt)?;
    Ok((data, x))
}

/// Generates a training trajectory of `excitation.length` samples.
pub fn generate(plant: &PlantModel, x0: &[f64], excitation: &ExcitationSpec) -> Result<TrajectoryData> {
    let u = excitation.signal(plant.n_u())?;
    Ok(simulate(plant, x0, &u, 0.0, 0)?.0)
}
