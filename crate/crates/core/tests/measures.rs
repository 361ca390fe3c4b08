use ndarray::{Array1, Array2};
use proptest::prelude::*;
use sheaf_flow::measures::{load_cloud, sample_gaussian, store_cloud, MeasureError, ParticleCloud};

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![-1e6..1e6f64, -1e-6..1e-6f64, Just(0.0)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn csv_round_trip_is_bit_exact(n in 1usize..20, d in 1usize..4, seed in any::<u64>()) {
        let pts: Vec<f64> = (0..n * d).map(|k| ((seed.wrapping_add(k as u64) as f64) * 1e-3).sin() * 1e3).collect();
        let raw: Vec<f64> = (0..n).map(|k| 1.0 + (k as f64 * 0.37).cos().abs()).collect();
        let cloud = ParticleCloud::from_unnormalized(Array2::from_shape_vec((n, d), pts).unwrap(), Array1::from(raw)).unwrap();
        let mut buf = Vec::new();
        cloud.write_csv(&mut buf).unwrap();
        let back = ParticleCloud::read_csv(buf.as_slice()).unwrap();
        prop_assert_eq!(back.points(), cloud.points());
        for (a, b) in back.weights().iter().zip(cloud.weights().iter()) {
            prop_assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn weights_always_sum_to_one(raw in proptest::collection::vec(1e-3..1e3f64, 1..50), x in finite()) {
        let n = raw.len();
        let cloud = ParticleCloud::from_unnormalized(Array2::from_elem((n, 2), x), Array1::from(raw)).unwrap();
        prop_assert!((cloud.weights().sum() - 1.0).abs() < 1e-12);
        prop_assert!(cloud.total_variance().abs() < 1e-9 * (1.0 + x * x));
    }
}

#[test]
fn file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.csv");
    let cloud = sample_gaussian(&[1.0, -1.0, 0.5], &[1.0, 2.0, 0.0], 50, 4).unwrap();
    store_cloud(&cloud, &path).unwrap();
    assert_eq!(load_cloud(&path).unwrap(), cloud);
    std::fs::write(&path, "x0,x1\n1.0,2.0\n3.0,oops\n").unwrap();
    match load_cloud(&path) {
        Err(MeasureError::Parse { row, column, .. }) => assert_eq!((row, column), (2, 1)),
        other => panic!("{other:?}"),
    }
    std::fs::write(&path, "x0,y\n1.0,2.0\n").unwrap();
    assert!(load_cloud(&path).is_err());
    std::fs::write(&path, "x0\n").unwrap();
    assert!(matches!(load_cloud(&path), Err(MeasureError::Empty)));
    assert!(load_cloud(&dir.path().join("missing.csv")).is_err());
}

#[test]
fn gaussian_moments_within_sampling_error() {
    let n = 20_000;
    let cloud = sample_gaussian(&[2.0, -3.0], &[4.0, 0.25], n, 77).unwrap();
    let com = cloud.center_of_mass();
    // Four standard errors.
    assert!((com[0] - 2.0).abs() < 4.0 * (4.0 / n as f64).sqrt());
    assert!((com[1] + 3.0).abs() < 4.0 * (0.25 / n as f64).sqrt());
    let var = cloud.total_variance();
    assert!((var - 4.25).abs() < 0.05 * 4.25, "{var}");
}
