mod common;

use std::collections::BTreeSet;

use olit_core::balance::{smote, stratified_split_indices, BalanceError, BalancePlan, SmoteConfig, SmoteOrder};
use proptest::prelude::*;
use rand::Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn smote_matches_its_definition(seed in any::<u64>(), k in 1usize..8) {
        let m = common::random_balance_input(&mut common::rng(seed));
        prop_assert_eq!(common::check_smote(&m, k, seed), Ok(()));
    }

    #[test]
    fn smote_is_deterministic(seed in any::<u64>()) {
        let m = common::random_balance_input(&mut common::rng(seed));
        let cfg = SmoteConfig { k_neighbors: 3, target_count: None, seed };
        prop_assert_eq!(smote(&m, &cfg).unwrap(), smote(&m, &cfg).unwrap());
    }

    #[test]
    fn split_is_disjoint_exhaustive_and_stratified(seed in any::<u64>(), frac in 0.05f64..0.95) {
        let mut rng = common::rng(seed);
        let m = common::random_balance_input(&mut rng);
        let labels = m.require_labels().unwrap();
        let s = stratified_split_indices(&labels, frac, rng.random()).unwrap();
        let train: BTreeSet<usize> = s.train.iter().copied().collect();
        let test: BTreeSet<usize> = s.test.iter().copied().collect();
        prop_assert_eq!(train.len(), s.train.len());
        prop_assert!(train.is_disjoint(&test));
        prop_assert_eq!(train.len() + test.len(), labels.len());
        for c in m.classes() {
            prop_assert!(s.train.iter().any(|&i| labels[i] == c));
            prop_assert!(s.test.iter().any(|&i| labels[i] == c));
        }
    }

    #[test]
    fn train_only_order_keeps_test_rows_real(seed in any::<u64>()) {
        let m = common::random_balance_input(&mut common::rng(seed));
        let plan = BalancePlan { order: SmoteOrder::TrainOnly, seed, ..BalancePlan::default() };
        let data = match plan.prepare(&m) {
            Ok(d) => d,
            // a two-row class leaves a single training row to oversample from
            Err(BalanceError::ClassTooSmall { count, .. }) => {
                prop_assert_eq!(count, 1);
                return Ok(());
            }
            Err(e) => return Err(TestCaseError::fail(e.to_string())),
        };
        for (row, id) in data.test.rows.iter().zip(&data.test.student_ids) {
            let i = m.row_of(id).expect("test rows are original rows");
            prop_assert_eq!(row, &m.rows[i]);
        }
        let counts = data.train.class_counts();
        prop_assert!(counts.values().all(|&c| Some(&c) == counts.values().next()));
    }
}

#[test]
fn split_examples() {
    let s = stratified_split_indices(&[3; 100], 0.8, 1).unwrap();
    assert_eq!((s.train.len(), s.test.len()), (80, 20));
    let labels: Vec<u8> = [2; 10].into_iter().chain([4; 10]).collect();
    let s = stratified_split_indices(&labels, 0.8, 1).unwrap();
    assert_eq!(s.train.iter().filter(|&&i| labels[i] == 2).count(), 8);
    assert_eq!(s.train.iter().filter(|&&i| labels[i] == 4).count(), 8);
    assert_eq!(s, stratified_split_indices(&labels, 0.8, 1).unwrap());
}
