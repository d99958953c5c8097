use kdeepc::plants::*;
use kdeepc::error::Error;
use kdeepc::linear::LtiSystem;
use nalgebra::{DMatrix, Matrix2, Vector2};

#[test]
fn pendulum_rests_at_equilibrium() {
    let p = PlantModel::pendulum(0.04);
    let (x, y) = p.step(&[0.0, 0.0], &[0.0]).unwrap();
    assert_eq!(x, vec![0.0, 0.0]);
    assert_eq!(y, vec![0.0]);
}

#[test]
fn lti_step_is_exact() {
    let sys = LtiSystem::new(
        DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.0, 0.3]),
        DMatrix::from_row_slice(2, 1, &[1.0, 2.0]),
        DMatrix::from_row_slice(1, 2, &[1.0, -1.0]),
        DMatrix::from_row_slice(1, 1, &[0.5]),
    )
    .unwrap();
    let p = PlantModel::lti(sys);
    let (x, y) = p.step(&[1.0, 2.0], &[3.0]).unwrap();
    assert_eq!(x, vec![0.5 + 0.2 + 3.0, 0.6 + 6.0]);
    assert_eq!(y, vec![1.0 - 2.0 + 1.5]);
}

#[test]
fn rk4_substeps_converge() {
    let mut coarse = PlantModel::pendulum(0.04);
    let mut fine = coarse.clone();
    coarse.substeps = 10;
    fine.substeps = 100;
    let x0 = [std::f64::consts::FRAC_PI_4, 0.0];
    let (a, _) = coarse.step(&x0, &[0.0]).unwrap();
    let (b, _) = fine.step(&x0, &[0.0]).unwrap();
    assert!((a[0] - b[0]).abs() < 1e-7 && (a[1] - b[1]).abs() < 1e-7, "{a:?} {b:?}");
}

#[test]
fn rk4_error_shrinks_sixteenfold() {
    let x0 = [0.6, 0.3];
    let at = |n: usize| {
        let mut p = PlantModel::pendulum(0.04);
        p.substeps = n;
        p.step(&x0, &[0.4]).unwrap().0
    };
    let reference = at(2000);
    let e1 = (at(4)[0] - reference[0]).abs().max((at(4)[1] - reference[1]).abs());
    let e2 = (at(8)[0] - reference[0]).abs().max((at(8)[1] - reference[1]).abs());
    let ratio = e1 / e2;
    assert!((12.0..20.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn motor_settles_at_algebraic_equilibrium() {
    let mut p = PlantModel::bilinear_motor(0.01);
    p.y_offset = 0.0;
    p.y_scale = 1.0;
    let u = 0.3;
    let (la, ra, km, j, b, tau, ua) = (0.314, 12.345, 0.253, 0.00441, 0.00732, 1.47, 60.0);
    let a = Matrix2::new(-ra / la, km * u / la, km * u / j, -b / j);
    let eq = a.lu().solve(&Vector2::new(-ua / la, tau / j)).unwrap();
    let mut x = p.default_x0();
    for _ in 0..3000 {
        x = p.step(&x, &[u]).unwrap().0;
    }
    assert!((x[0] - eq[0]).abs() < 1e-6 && (x[1] - eq[1]).abs() < 1e-6, "{x:?} vs {eq}");
}

#[test]
fn generation_is_deterministic() {
    let p = PlantModel::pendulum(0.04);
    let e = ExcitationSpec { kind: ExcitationKind::UniformRandom { lo: -1.0, hi: 1.0 }, length: 500, seed: 3 };
    let a = generate(&p, &p.default_x0(), &e).unwrap();
    let b = generate(&p, &p.default_x0(), &e).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 500);
    assert!(a.u_flat().iter().all(|v| (-1.0..1.0).contains(v)));
    let one = generate(&p, &p.default_x0(), &ExcitationSpec { length: 1, ..e }).unwrap();
    assert_eq!(one.len(), 1);
}

#[test]
fn motor_training_set_is_normalized() {
    let p = PlantModel::bilinear_motor(0.01);
    let e = ExcitationSpec {
        kind: ExcitationKind::DriftingGaussian { mu_start: -0.5, mu_end: 0.5, sigma: 1.0 },
        length: 700,
        seed: 1,
    };
    let d = generate(&p, &p.default_x0(), &e).unwrap();
    assert_eq!(d.y(0), &[0.0]);
    let (lo, hi) = d.y_flat().iter().fold((f64::MAX, f64::MIN), |(l, h), v| (l.min(*v), h.max(*v)));
    assert!(lo > -3.0 && hi < 2.0, "{lo} {hi}");
}

#[test]
fn divergence_reports_step() {
    let sys = LtiSystem::new(
        DMatrix::from_element(1, 1, 1e200),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 0.0),
    )
    .unwrap();
    let p = PlantModel::lti(sys);
    let err = simulate(&p, &[1.0], &[0.0; 5], 0.0, 0).unwrap_err();
    assert!(matches!(err, Error::Divergence { step: 1 }), "{err}");
}

#[test]
fn prbs_holds_levels() {
    let e = ExcitationSpec { kind: ExcitationKind::Prbs { levels: vec![-1.0, 1.0], hold: 4 }, length: 16, seed: 0 };
    let s = e.signal(1).unwrap();
    for block in s.chunks(4) {
        assert!(block.iter().all(|v| *v == block[0]));
    }
}
