mod common;

use common::*;
use kdeepc::controller::{run_closed_loop, solve_step, MpcProblem, MpcSettings, StageCost};
use kdeepc::hankel::{build_gram, TrajectoryData};
use kdeepc::kernels::{KernelSpec, NoiseModel};
use kdeepc::linear::BoxBounds;
use kdeepc::plants::PlantModel;

fn linear_problem(data: TrajectoryData, t_ini: usize, n_h: usize, r: f64, y_ref: Vec<f64>) -> MpcProblem {
    MpcProblem {
        gram: build_gram(data, t_ini + n_h, KernelSpec::linear(), KernelSpec::linear(), NoiseModel::None).unwrap(),
        t_ini,
        n_h,
        cost: StageCost::diagonal(1, 1, 1.0, r).unwrap(),
        y_ref,
        u_box: None,
        y_box: None,
        settings: MpcSettings::default(),
    }
}

#[test]
fn plan_is_no_worse_than_the_data_window_it_was_asked_to_follow() {
    let (t_ini, n_h) = (10, 6);
    let data = pendulum_data(4, 200);
    let gram = build_gram(data, t_ini + n_h, KernelSpec::pendulum_input(), KernelSpec::pendulum_output(), NoiseModel::None)
        .unwrap();
    let w = gram.window(40).to_owned();
    let cost = StageCost::diagonal(1, 1, 1.0, 0.01).unwrap();
    let y_ref = w.y[t_ini..].to_vec();
    let window_cost = cost.eval(&w.u[t_ini..], &w.y[t_ini..], &y_ref, None);
    let problem = MpcProblem { gram, t_ini, n_h, cost, y_ref, u_box: None, y_box: None, settings: MpcSettings::default() };
    let res = solve_step(&problem, &w.u[..t_ini], &w.y[..t_ini]).unwrap();
    assert!(res.certified);
    assert!(res.upper_cost <= window_cost + 1e-9, "{} > {window_cost}", res.upper_cost);
    assert_eq!(res.stages.len(), MpcSettings::default().penalties.len());
}

#[test]
fn zero_steps_give_an_empty_log() {
    let (sys, data) = lti_fixture(2, 100);
    let problem = linear_problem(data, 4, 5, 0.01, vec![1.0]);
    let plant = PlantModel::lti(sys);
    let log = run_closed_loop(&problem, &plant, &plant.default_x0(), 0).unwrap();
    assert!(log.rows.is_empty());
    let mut out = Vec::new();
    log.write_csv(&mut out).unwrap();
    assert_eq!(String::from_utf8(out).unwrap().lines().count(), 1);
}

#[test]
fn linear_closed_loop_settles_on_a_constant_reference() {
    let (t_ini, n_h) = (6, 10);
    let (sys, data) = lti_fixture(5, 200);
    let problem = linear_problem(data, t_ini, n_h, 1e-4, vec![0.5]);
    let plant = PlantModel::lti(sys);
    let log = run_closed_loop(&problem, &plant, &plant.default_x0(), 30).unwrap();
    let err = log.final_quarter_error(0..30);
    assert!(err < 0.02, "final error {err}");
    assert!(log.rows.iter().all(|r| r.certified));
}

#[test]
fn applied_inputs_respect_the_box() {
    let (t_ini, n_h) = (6, 8);
    let (sys, data) = lti_fixture(7, 200);
    let mut problem = linear_problem(data, t_ini, n_h, 1e-4, vec![5.0]);
    problem.u_box = Some(BoxBounds { lower: vec![-0.2], upper: vec![0.2] });
    let plant = PlantModel::lti(sys);
    let log = run_closed_loop(&problem, &plant, &plant.default_x0(), 8).unwrap();
    for r in &log.rows {
        assert!(r.u[0].abs() <= 0.2 + 1e-12, "step {}: u = {}", r.step, r.u[0]);
    }
    assert!(log.rows.iter().any(|r| r.u[0].abs() > 0.19), "box never active");
}

#[test]
fn reference_and_weights_are_validated() {
    let (_, data) = lti_fixture(1, 80);
    let mut problem = linear_problem(data, 4, 4, 0.01, vec![]);
    assert!(solve_step(&problem, &[0.0; 4], &[0.0; 4]).is_err());
    problem.y_ref = vec![1.0];
    assert!(solve_step(&problem, &[0.0; 3], &[0.0; 4]).is_err());
    assert!(solve_step(&problem, &[0.0; 4], &[f64::INFINITY, 0.0, 0.0, 0.0]).is_err());
    problem.settings.penalties = vec![10.0, 1.0];
    assert!(solve_step(&problem, &[0.0; 4], &[0.0; 4]).is_err());
    assert!(StageCost::diagonal(1, 1, -1.0, 0.0).is_err());
}
