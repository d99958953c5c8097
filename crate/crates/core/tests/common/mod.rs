#![allow(dead_code)]

use std::time::{Duration, Instant};

use kdeepc::hankel::TrajectoryData;
use kdeepc::linear::{random_controllable, LtiSystem};
use kdeepc::plants::{generate, ExcitationKind, ExcitationSpec, PlantModel};
use kdeepc::rng::{stream, Stream};
use rand_distr::{Distribution, Normal};

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn gaussian(seed: u64, which: Stream, n: usize) -> Vec<f64> {
    let mut rng = stream(seed, which);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| normal.sample(&mut rng)).collect()
}

/// Controllable SISO system with `1 + seed % 4` states and a `t`-sample
/// record under i.i.d. standard Gaussian input from rest.
pub fn lti_fixture(seed: u64, t: usize) -> (LtiSystem, TrajectoryData) {
    let n_x = 1 + (seed % 4) as usize;
    let sys = random_controllable(n_x, 1, 1, seed, 0.9).unwrap();
    let u = gaussian(seed, Stream::Excitation, t);
    let (y, _) = sys.simulate(&vec![0.0; n_x], &u);
    (sys, TrajectoryData::from_flat(u, y, 1, 1, 1.0).unwrap())
}

/// A fresh trajectory of `len` samples from a random initial state.
pub fn lti_query(sys: &LtiSystem, seed: u64, len: usize) -> (Vec<f64>, Vec<f64>) {
    let x0 = gaussian(seed, Stream::Restarts, sys.n_x());
    let u = gaussian(seed ^ 0x5eed, Stream::Restarts, len);
    let (y, _) = sys.simulate(&x0, &u);
    (u, y)
}

pub fn pendulum_data(seed: u64, length: usize) -> TrajectoryData {
    let plant = PlantModel::pendulum(0.04);
    let excitation = ExcitationSpec { kind: ExcitationKind::UniformRandom { lo: -1.0, hi: 1.0 }, length, seed };
    generate(&plant, &plant.default_x0(), &excitation).unwrap()
}

pub fn motor_data(seed: u64) -> TrajectoryData {
    let plant = PlantModel::bilinear_motor(0.01);
    let excitation = ExcitationSpec {
        kind: ExcitationKind::DriftingGaussian { mu_start: -0.5, mu_end: 0.5, sigma: 1.0 },
        length: 700,
        seed,
    };
    generate(&plant, &plant.default_x0(), &excitation).unwrap()
}

pub fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}
