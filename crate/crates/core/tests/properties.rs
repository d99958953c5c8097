use kdeepc::hankel::{build_gram, TrajectoryData};
use kdeepc::io::{read_table, write_trajectory};
use kdeepc::kernels::{KernelSpec, NoiseModel};
use proptest::prelude::*;

fn trajectory(max_len: usize) -> impl Strategy<Value = TrajectoryData> {
    (4..max_len).prop_flat_map(|t| {
        (prop::collection::vec(-2.0..2.0f64, t), prop::collection::vec(-2.0..2.0f64, t))
            .prop_map(|(u, y)| TrajectoryData::scalar(&u, &y, 0.05).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gram_is_symmetric_and_psd(data in trajectory(30), depth in 1usize..4) {
        let g = build_gram(data, depth, KernelSpec::pendulum_input(), KernelSpec::pendulum_output(), NoiseModel::None).unwrap();
        let k = g.gram();
        let scale = k.amax();
        prop_assert!((k - k.transpose()).amax() <= 1e-12 * scale);
        let eig = k.clone().symmetric_eigenvalues();
        prop_assert!(eig.min() >= -1e-8 * eig.max());
    }

    #[test]
    fn kernels_are_symmetric(x in prop::collection::vec(-1.5..1.5f64, 2), y in prop::collection::vec(-1.5..1.5f64, 2)) {
        for spec in [KernelSpec::pendulum_input(), KernelSpec::pendulum_output(), KernelSpec::motor(), KernelSpec::linear()] {
            let (a, b) = (spec.eval(&x, &y).unwrap(), spec.eval(&y, &x).unwrap());
            prop_assert!((a - b).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }

    #[test]
    fn trajectory_csv_round_trips(data in trajectory(40)) {
        let mut buf = Vec::new();
        write_trajectory(&data, &mut buf).unwrap();
        let back = read_table(buf.as_slice()).unwrap().into_trajectory(data.dt()).unwrap();
        prop_assert_eq!(back, data);
    }
}
