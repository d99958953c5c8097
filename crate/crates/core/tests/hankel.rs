use kdeepc::hankel::*;
use nalgebra::DVector;
use kdeepc::error::Error;
use kdeepc::kernels::{KernelSpec, NoiseModel};
use kdeepc::linear::singular_values;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small() -> TrajectoryData {
    TrajectoryData::scalar(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], 0.1).unwrap()
}

fn random_data(rng: &mut ChaCha8Rng, t: usize, nu: usize, ny: usize) -> TrajectoryData {
    let u: Vec<f64> = (0..t * nu).map(|_| rng.random_range(-1.0..1.0)).collect();
    let y: Vec<f64> = (0..t * ny).map(|_| rng.random_range(-1.0..1.0)).collect();
    TrajectoryData::from_flat(u, y, nu, ny, 0.04).unwrap()
}

#[test]
fn windows_slice_contiguously() {
    let d = small();
    let w = d.window(2, 0).unwrap();
    assert_eq!((w.u, w.y), (&[1.0, 2.0][..], &[4.0, 5.0][..]));
    let w = d.window(2, 1).unwrap();
    assert_eq!((w.u, w.y), (&[2.0, 3.0][..], &[5.0, 6.0][..]));
    let w = d.window(3, 0).unwrap();
    assert_eq!(w.u, &[1.0, 2.0, 3.0][..]);
    assert_eq!(d.columns(3).unwrap(), 1);
}

#[test]
fn window_out_of_range() {
    assert!(matches!(small().window(2, 2), Err(Error::Argument(_))));
    assert!(matches!(small().window(4, 0), Err(Error::InsufficientData { .. })));
}

#[test]
fn invalid_data_is_rejected() {
    assert!(TrajectoryData::scalar(&[1.0], &[1.0, 2.0], 0.1).is_err());
    assert!(TrajectoryData::scalar(&[], &[], 0.1).is_err());
    assert!(TrajectoryData::scalar(&[1.0], &[1.0], 0.0).is_err());
    assert!(TrajectoryData::new(&[vec![1.0], vec![1.0, 2.0]], &[vec![0.0], vec![0.0]], 1.0).is_err());
}

#[test]
fn adjacent_windows_overlap() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let d = random_data(&mut rng, 30, 2, 1);
    for j in 0..d.columns(5).unwrap() - 1 {
        let a = d.window(5, j).unwrap();
        let b = d.window(5, j + 1).unwrap();
        assert_eq!(&a.u[2..], &b.u[..8]);
        assert_eq!(&a.y[1..], &b.y[..4]);
    }
}

#[test]
fn depth_one_linear_kernel_is_inner_product() {
    let d = TrajectoryData::scalar(&[2.0, -1.0], &[3.0, 0.5], 1.0).unwrap();
    let k = KernelSpec::linear();
    let v = trajectory_kernel(&k, &k, &d.window(1, 0).unwrap(), &d.window(1, 1).unwrap()).unwrap();
    assert_eq!(v, 2.0 * -1.0 + 3.0 * 0.5);
}

#[test]
fn rbf_self_kernel_counts_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let d = random_data(&mut rng, 12, 1, 2);
    let k = KernelSpec::rbf(2.5);
    let w = d.window(7, 3).unwrap();
    assert_eq!(trajectory_kernel(&k, &k, &w, &w).unwrap(), 14.0);
}

#[test]
fn trajectory_kernel_is_direct_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = random_data(&mut rng, 10, 1, 1);
    let (ku, ky) = (KernelSpec::pendulum_input(), KernelSpec::pendulum_output());
    let a = d.window(3, 1).unwrap();
    let b = d.window(3, 6).unwrap();
    let mut direct = 0.0;
    for k in 0..3 {
        direct += ku.eval(d.u(1 + k), d.u(6 + k)).unwrap();
        direct += ky.eval(d.y(1 + k), d.y(6 + k)).unwrap();
    }
    assert!((trajectory_kernel(&ku, &ky, &a, &b).unwrap() - direct).abs() < 1e-13);
}

#[test]
fn single_column_gram() {
    let d = small();
    let k = KernelSpec::pendulum_output();
    let g = build_gram(d.clone(), 3, KernelSpec::pendulum_input(), k.clone(), NoiseModel::None);
    let g = g.unwrap();
    assert_eq!(g.columns(), 1);
    let w = d.window(3, 0).unwrap();
    assert_eq!(g.gram()[(0, 0)], trajectory_kernel(&KernelSpec::pendulum_input(), &k, &w, &w).unwrap());
}

#[test]
fn insufficient_data() {
    let err = build_gram(small(), 4, KernelSpec::linear(), KernelSpec::linear(), NoiseModel::None);
    assert!(matches!(err, Err(Error::InsufficientData { samples: 3, depth: 4 })));
}

#[test]
fn linear_gram_equals_hankel_product() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = random_data(&mut rng, 40, 2, 1);
    let g = build_gram(d.clone(), 6, KernelSpec::linear(), KernelSpec::linear(), NoiseModel::None).unwrap();
    let h = numeric_hankel(&d, 6).unwrap();
    let hth = h.transpose() * &h;
    let max = g.gram().amax();
    assert!((g.gram() - hth).amax() <= 1e-10 * max);
    for j in [0, 7, 34] {
        assert_eq!(h.column(j).iter().copied().collect::<Vec<_>>(), d.window(6, j).unwrap().to_owned().stacked());
    }
}

#[test]
fn pe_rank_edge_cases() {
    let constant = TrajectoryData::scalar(&[0.7; 40], &[0.0; 40], 1.0).unwrap();
    assert_eq!(pe_rank(&constant, 5, &KernelSpec::linear()).unwrap().0, 1);
    let zero = TrajectoryData::scalar(&[0.0; 40], &[0.0; 40], 1.0).unwrap();
    assert_eq!(pe_rank(&zero, 5, &KernelSpec::linear()).unwrap().0, 0);
    assert_eq!(pe_trace_score(&zero, 5, &KernelSpec::linear()).unwrap(), 0.0);
}

#[test]
fn pe_rank_of_uniform_noise_is_full() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = random_data(&mut rng, 100, 1, 1);
    let (rank, sv) = pe_rank(&d, 5, &KernelSpec::linear()).unwrap();
    assert_eq!(rank, 5);
    assert!(sv.windows(2).all(|w| w[0] >= w[1]));
    let h = numeric_input_hankel(&d, 5).unwrap();
    let hs = singular_values(&h).unwrap();
    assert_eq!(numerical_rank(&hs, 96), 5);
}

#[test]
fn trace_score_rbf_is_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = random_data(&mut rng, 50, 2, 1);
    assert_eq!(pe_trace_score(&d, 4, &KernelSpec::rbf(3.0)).unwrap(), 1.0);
}

#[test]
fn trace_score_linear_is_mean_window_energy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let d = random_data(&mut rng, 30, 1, 1);
    let depth = 4;
    let n = 27;
    let direct: f64 = (0..n)
        .map(|j| d.window(depth, j).unwrap().u.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n as f64
        / depth as f64;
    assert!((pe_trace_score(&d, depth, &KernelSpec::linear()).unwrap() - direct).abs() < 1e-14);
}

#[test]
fn spectrum_solve_minimizes_the_quadratic() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let d = random_data(&mut rng, 30, 1, 1);
    let g = build_gram(d, 4, KernelSpec::linear(), KernelSpec::linear(), NoiseModel::None).unwrap();
    let c = g.gram() * DVector::from_fn(27, |i, _| (i as f64).sin());
    let sol = g.solve(&c, 0.0);
    assert!((g.gram() * sol - &c).amax() < 1e-9 * c.amax());
}
