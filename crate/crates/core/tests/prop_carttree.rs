mod common;

use std::collections::BTreeMap;

use olit_core::carttree::{best_split, fit_cart, majority_class, CartConfig, CartTree, TreeNode};
use olit_core::ingest::FeatureMatrix;
use proptest::prelude::*;
use rand::Rng;

/// Checks node-local invariants while routing `idx` through `node`.
fn check_node(node: &TreeNode, m: &FeatureMatrix, idx: &[usize], depth: usize, max_depth: usize) -> Result<(), String> {
    match node {
        TreeNode::Leaf { histogram, majority, support } => {
            let mut h = BTreeMap::new();
            for &i in idx {
                *h.entry(m.labels[i].unwrap()).or_insert(0usize) += 1;
            }
            if &h != histogram || *support != idx.len() || *support == 0 {
                return Err(format!("leaf histogram {histogram:?} but routed rows give {h:?}"));
            }
            if *majority != majority_class(&h) {
                return Err("leaf majority disagrees with its rows".into());
            }
            Ok(())
        }
        TreeNode::Internal { feature_index, threshold, left, right, .. } => {
            if depth >= max_depth {
                return Err(format!("internal node at depth {depth}"));
            }
            let values: Vec<f64> = idx.iter().map(|&i| m.rows[i][*feature_index]).collect();
            let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if !(lo < *threshold && *threshold <= hi) {
                return Err(format!("threshold {threshold} outside ({lo}, {hi}]"));
            }
            let (l, r): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| m.rows[i][*feature_index] < *threshold);
            check_node(left, m, &l, depth + 1, max_depth)?;
            check_node(right, m, &r, depth + 1, max_depth)
        }
    }
}

fn leaf_ids(tree: &CartTree, m: &FeatureMatrix) -> Vec<usize> {
    m.rows.iter().map(|r| tree.predict_leaf(r).unwrap().leaf_id).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn best_split_matches_brute_force(seed in any::<u64>()) {
        let (rows, labels) = common::random_split_instance(&mut common::rng(seed));
        let got = best_split(&rows, &labels, 0.0).map(|s| (s.feature_index, s.threshold));
        prop_assert_eq!(got, common::brute_force_split(&rows, &labels));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn fitted_tree_is_consistent_with_its_training_rows(seed in any::<u64>(), depth in 1usize..8) {
        let (tree, m) = common::random_tree(&mut common::rng(seed), depth);
        let idx: Vec<usize> = (0..m.n_rows()).collect();
        prop_assert_eq!(check_node(&tree.root, &m, &idx, 0, depth), Ok(()));
        prop_assert!(tree.depth() <= depth);
        let leaves = tree.leaves();
        prop_assert_eq!(leaves.iter().map(|l| l.support).sum::<usize>(), m.n_rows());
        for (row, id) in m.rows.iter().zip(leaf_ids(&tree, &m)) {
            let p = tree.predict_leaf(row).unwrap();
            prop_assert_eq!(p.class, leaves[id].majority);
            prop_assert!(p.conditions.iter().all(|c| c.holds(row)));
        }
        let back: CartTree = serde_json::from_str(&serde_json::to_string(&tree).unwrap()).unwrap();
        prop_assert_eq!(back, tree);
    }

    #[test]
    fn deep_trees_fit_conflict_free_data_exactly(seed in any::<u64>()) {
        let mut rng = common::rng(seed);
        let n = rng.random_range(2..60);
        let f = rng.random_range(1..5);
        let mut rows = common::random_rows(&mut rng, n, f, 30);
        // drop duplicate rows so no two rows carry conflicting labels
        rows.sort_by(|a, b| a.partial_cmp(b).unwrap());
        rows.dedup();
        let labels = common::random_labels(&mut rng, rows.len(), 4);
        let m = common::matrix(rows, labels.clone());
        let tree = fit_cart(&m, &CartConfig { max_depth: 64, ..CartConfig::default() }).unwrap();
        prop_assert_eq!(tree.predict_matrix(&m).unwrap(), labels);
    }

    #[test]
    fn increasing_transform_keeps_leaf_assignment(seed in any::<u64>(), j in 0usize..6) {
        let (tree, m) = common::random_tree(&mut common::rng(seed), 5);
        let j = j % m.n_features();
        let mut t = m.clone();
        for r in &mut t.rows {
            r[j] = r[j] * r[j] * r[j] + 2.0 * r[j] - 7.0;
        }
        let tt = fit_cart(&t, &tree.config).unwrap();
        prop_assert_eq!(leaf_ids(&tree, &m), leaf_ids(&tt, &t));
    }
}

#[test]
fn boundary_value_goes_right() {
    let m = common::matrix(vec![vec![0.0], vec![1.0]], vec![2, 4]);
    let tree = fit_cart(&m, &CartConfig::default()).unwrap();
    assert_eq!(tree.predict(&[0.5]).unwrap(), 4);
    assert_eq!(tree.predict(&[0.49]).unwrap(), 2);
}
