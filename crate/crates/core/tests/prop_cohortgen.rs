use olit_core::cohortgen::{generate_cohort, GeneratorConfig};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn cohorts_round_trip_through_ingest(seed in any::<u64>(), n in 5usize..120, strength in 0.0f64..=1.0) {
        let cfg = GeneratorConfig { n_students: n, seed, rule_strength: strength, ..GeneratorConfig::default() };
        let cohort = generate_cohort(&cfg).unwrap();
        let m = cohort.features().unwrap().matrix;
        prop_assert_eq!(m.n_rows(), n);
        let stat_cols: Vec<usize> =
            (0..m.n_features()).filter(|&j| m.feature_names[j].contains("Stat")).collect();
        for s in &cohort.manifest.students {
            let i = m.row_of(&s.student_id).unwrap();
            prop_assert_eq!(m.labels[i], Some(s.final_grade));
            let total: f64 = stat_cols.iter().map(|&j| m.rows[i][j]).sum();
            prop_assert_eq!(total as u64, s.total_interactions);
        }
        // realized class sizes within two students of the configured shares
        for a in &cfg.archetypes {
            let realized = cohort.manifest.students.iter().filter(|s| s.archetype == a.name).count() as f64;
            prop_assert!((realized - a.proportion * n as f64).abs() <= 2.0, "{:?}: {}", a.name, realized);
        }
        let again = generate_cohort(&cfg).unwrap();
        prop_assert_eq!(&again.logs_csv, &cohort.logs_csv);
        prop_assert_eq!(&again.grades_csv, &cohort.grades_csv);
    }
}

#[test]
fn too_small_cohort_is_rejected() {
    assert!(generate_cohort(&GeneratorConfig { n_students: 4, ..GeneratorConfig::default() }).is_err());
}
