use ndarray::{Array1, Array2};
use proptest::prelude::*;

use saccade_core::analysis::biserial_r2;
use saccade_core::artifacts::{ts_car, RPeakSet};
use saccade_core::classify::{predict_proba, train, ClassifierKind, ClassifierSpec};
use saccade_core::evaluate::auc_roc;
use saccade_core::features::{segment_stats, FeatureMatrix, MinMaxScaler};
use saccade_core::model::NeuralSignal;
use saccade_core::preprocess::filtfilt_vec;

fn vec_of(len: std::ops::Range<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-100.0..100.0f64, len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filtfilt_is_linear(x in vec_of(60..200), y_seed in vec_of(200..201), a in -3.0..3.0f64, b in -3.0..3.0f64) {
        let y = &y_seed[..x.len()];
        let h = [0.1, 0.2, 0.4, 0.2, 0.1];
        let mixed: Vec<f64> = x.iter().zip(y).map(|(u, v)| a * u + b * v).collect();
        let lhs = filtfilt_vec(&mixed, &h).unwrap();
        let fx = filtfilt_vec(&x, &h).unwrap();
        let fy = filtfilt_vec(y, &h).unwrap();
        for i in 0..x.len() {
            prop_assert!((lhs[i] - (a * fx[i] + b * fy[i])).abs() < 1e-8);
        }
    }

    #[test]
    fn ts_car_commutes_with_channel_order(
        data in prop::collection::vec(-50.0..50.0f64, 400 * 5),
        peaks in prop::collection::btree_set(0usize..400, 0..4),
        shift in 1usize..5,
    ) {
        let x = Array2::from_shape_vec((400, 5), data).unwrap();
        let set = RPeakSet { times: peaks.iter().map(|&p| p as f64 / 100.0).collect(), statistic: String::new(), threshold: 0.0 };
        let perm: Vec<usize> = (0..5).map(|c| (c + shift) % 5).collect();
        let xp = Array2::from_shape_fn((400, 5), |(i, c)| x[[i, perm[c]]]);
        let y = ts_car(&NeuralSignal::with_default_ids(x, 100.0).unwrap(), &set, 130.0).unwrap().data;
        let yp = ts_car(&NeuralSignal::with_default_ids(xp, 100.0).unwrap(), &set, 130.0).unwrap().data;
        for i in 0..400 {
            for c in 0..5 {
                prop_assert!((yp[[i, c]] - y[[i, perm[c]]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn r2_is_affine_invariant(x1 in vec_of(2..20), x2 in vec_of(2..20), a in 0.1..10.0f64, sign in any::<bool>(), b in -50.0..50.0f64) {
        let a = if sign { a } else { -a };
        let f = |v: &[f64]| -> Vec<f64> { v.iter().map(|x| a * x + b).collect() };
        let r = biserial_r2(&x1, &x2);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r));
        prop_assert!((biserial_r2(&f(&x1), &f(&x2)) - r).abs() < 1e-8);
        prop_assert!((biserial_r2(&x2, &x1) - r).abs() < 1e-12);
    }

    #[test]
    fn auc_ignores_monotone_maps(scores in vec_of(2..60), flags in prop::collection::vec(any::<bool>(), 60)) {
        let labels = &flags[..scores.len()];
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auc_roc(&scores, labels).unwrap();
        let warped: Vec<f64> = scores.iter().map(|s| (s / 40.0).tanh() * 3.0 + 1.0).collect();
        prop_assert_eq!(auc_roc(&warped, labels).unwrap(), a);
        let flipped: Vec<bool> = labels.iter().map(|l| !l).collect();
        prop_assert!((auc_roc(&scores, &flipped).unwrap() - (1.0 - a)).abs() < 1e-12);
    }

    #[test]
    fn segment_stats_agree(x in vec_of(2..50)) {
        let [mean, std, var, kurt, rms] = segment_stats(Array1::from(x.clone()).view());
        prop_assert!((std * std - var).abs() <= 1e-9 * (1.0 + var));
        prop_assert!((rms * rms - (mean * mean + var)).abs() <= 1e-8 * (1.0 + rms * rms));
        // excess kurtosis of any sample is at least -2
        prop_assert!(kurt >= -2.0 - 1e-9);
    }

    #[test]
    fn scaler_maps_training_rows_into_unit_box(rows in prop::collection::vec(vec_of(3..4), 2..30)) {
        let data = Array2::from_shape_fn((rows.len(), 3), |(i, j)| rows[i][j]);
        let m = FeatureMatrix { data, schema: vec!["a".into(), "b".into(), "c".into()] };
        let s = MinMaxScaler::fit(&m, None).unwrap();
        let t = s.transform(&m).unwrap();
        prop_assert!(t.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn probabilities_sum_to_one(
        rows in prop::collection::vec(vec_of(4..5), 12..40),
        kind in prop::sample::select(vec![ClassifierKind::RandomForest, ClassifierKind::Knn, ClassifierKind::Logistic, ClassifierKind::Lda]),
    ) {
        let n = rows.len();
        let data = Array2::from_shape_fn((n, 4), |(i, j)| rows[i][j] / 100.0);
        let x = FeatureMatrix { data, schema: (0..4).map(|j| format!("f{j}")).collect() };
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let mut spec = ClassifierSpec::of_kind(kind, 1);
        spec.params.n_estimators = 10;
        spec.params.k = 3;
        let model = train(&spec, &x, &y).unwrap();
        let p = predict_proba(&model, &x).unwrap();
        prop_assert_eq!(p.ncols(), 3);
        for row in p.rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
        }
    }
}
