mod common;

use std::collections::BTreeSet;

use olit_core::intervene::{counterfactual_plan, default_glossary, PlanOptions};
use olit_core::intervene::{
    extract_paths, render_strategy_text, supervision_report, ConditionStatus, InterveneError, DEFAULT_MIN_SUPPORT,
};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn plans_are_sound_minimal_and_actionable(seed in any::<u64>()) {
        let r = common::counterfactual_case(&mut common::rng(seed));
        prop_assert!(r.is_ok(), "{:?}", r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn extracted_paths_cover_and_partition_training_rows(seed in any::<u64>(), min_support in 0usize..6) {
        let (tree, m) = common::random_tree(&mut common::rng(seed), 6);
        let rules = extract_paths(&tree, min_support);
        prop_assert!(rules.iter().all(|r| r.support >= min_support && r.support >= 1));
        for row in &m.rows {
            let leaf = tree.predict_leaf(row).unwrap();
            let matching: Vec<_> = rules.iter().filter(|r| r.matches(row)).collect();
            let support = tree.leaves()[leaf.leaf_id].support;
            if support >= min_support {
                prop_assert_eq!(matching.len(), 1);
                prop_assert_eq!(matching[0].leaf_id, leaf.leaf_id);
            } else {
                prop_assert!(matching.is_empty());
            }
        }
    }

    #[test]
    fn default_filter_drops_small_leaves(seed in any::<u64>()) {
        let (tree, _) = common::random_tree(&mut common::rng(seed), 6);
        let kept: BTreeSet<usize> = extract_paths(&tree, DEFAULT_MIN_SUPPORT).iter().map(|r| r.leaf_id).collect();
        for leaf in tree.leaves() {
            prop_assert_eq!(kept.contains(&leaf.leaf_id), leaf.support >= 3);
        }
    }

    #[test]
    fn full_observation_leaves_nothing_pending(seed in any::<u64>(), week in 0u32..10) {
        let (tree, m) = common::random_tree(&mut common::rng(seed), 5);
        let rules = extract_paths(&tree, 0);
        let rule = &rules[seed as usize % rules.len()];
        let row = &m.rows[seed as usize % m.n_rows()];
        let full = supervision_report(&tree, rule, "s", row, 9).unwrap();
        prop_assert!(full.conditions.iter().all(|c| c.status != ConditionStatus::Pending));
        prop_assert_eq!(full.on_track, rule.matches(row));
        let partial = supervision_report(&tree, rule, "s", row, week).unwrap();
        for c in &partial.conditions {
            let pending = c.week.is_some_and(|w| w > week);
            prop_assert_eq!(c.status == ConditionStatus::Pending, pending);
        }
        prop_assert_eq!(partial.on_track, partial.conditions.iter().all(|c| c.status != ConditionStatus::Violated));
        prop_assert_eq!(partial.remediation.is_some() && partial.on_track, false);
    }
}

#[test]
fn foreign_path_is_rejected() {
    let (tree, m) = common::random_tree(&mut common::rng(7), 4);
    let mut rule = extract_paths(&tree, 0).remove(0);
    rule.leaf_id += 1000;
    assert!(matches!(supervision_report(&tree, &rule, "s", &m.rows[0], 9), Err(InterveneError::PathNotInTree)));
}

#[test]
fn strategy_text_lists_changes_by_week() {
    // grade 5 needs both weeks high, grade 2 has both low
    let names = ["Week3 Stat0", "Week5 Stat0"];
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (w3, w5, grade) in [(0.1, 0.1, 2), (0.1, 0.8, 3), (0.8, 0.1, 4), (0.8, 0.8, 5)] {
        for d in [0.0, 0.05, 0.1] {
            rows.push(vec![w3 + d, w5 + d]);
            labels.push(grade);
        }
    }
    let m = olit_core::ingest::FeatureMatrix::from_rows(names.map(String::from).to_vec(), rows, labels).unwrap();
    let tree = olit_core::carttree::fit_cart(&m, &Default::default()).unwrap();
    let row = [0.2, 0.1];
    let plan = counterfactual_plan(&tree, "s1", &row, &BTreeSet::from([5]), &|_: &str| true, PlanOptions::default())
        .unwrap()
        .unwrap();
    assert_eq!(plan.n_changes, 2);
    assert_eq!(tree.predict(&plan.apply(&row)).unwrap(), 5);
    let text = render_strategy_text(&plan, &default_glossary(&names)).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3, "{text}");
    assert!(lines[1].starts_with("- Week 3:"), "{text}");
    assert!(lines[2].starts_with("- Week 5:"), "{text}");
    let zero = counterfactual_plan(&tree, "s1", &row, &BTreeSet::from([2]), &|_: &str| true, PlanOptions::default())
        .unwrap()
        .unwrap();
    assert_eq!(zero.n_changes, 0);
}
