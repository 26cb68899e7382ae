use std::collections::BTreeMap;
use std::sync::OnceLock;

use olit_core::pipeline::PipelineError;
use olit_wasm_demo::{DemoError, DemoSession};

fn session() -> &'static DemoSession {
    static S: OnceLock<DemoSession> = OnceLock::new();
    S.get_or_init(|| DemoSession::new(107, 42, 0.9).unwrap())
}

#[test]
fn students_are_predicted_by_the_early_tree() {
    let s = session();
    let students = s.students().unwrap();
    assert_eq!(students.len(), 107);
    for r in &students {
        let w = s.what_if(&r.student_id, &BTreeMap::new()).unwrap();
        assert_eq!(w.after.class, r.predicted_grade);
        assert_eq!(w.before, w.after);
    }
}

#[test]
fn following_a_plan_in_what_if_reaches_its_grade() {
    let s = session();
    let mut followed = 0;
    for r in s.students().unwrap() {
        let out = s.plan(&r.student_id, "4,5", 4).unwrap();
        let Some(plan) = out.plan else { continue };
        assert!([4, 5].contains(&plan.predicted_class));
        let overrides: BTreeMap<String, f64> =
            plan.changes.iter().map(|c| (c.feature.clone(), c.suggested_value)).collect();
        let w = s.what_if(&r.student_id, &overrides).unwrap();
        assert_eq!(w.after.class, plan.predicted_class);
        assert_eq!(w.after.leaf_id, plan.chosen_leaf);
        followed += usize::from(plan.n_changes > 0);
    }
    assert!(followed > 0);
}

#[test]
fn tree_view_paths_cover_the_supported_leaves() {
    let view = session().tree();
    assert!(view.dot.starts_with("digraph"));
    assert!(!view.paths.is_empty());
    assert!(view.paths.iter().all(|p| p.support >= 3));
    assert_eq!((view.first_week, view.last_week), (1, 5));
}

#[test]
fn bad_requests_are_reported() {
    let s = session();
    assert!(matches!(
        s.what_if("nobody", &BTreeMap::new()),
        Err(DemoError::Pipeline(PipelineError::UnknownStudent(_)))
    ));
    let over = BTreeMap::from([("Week5 Stat0".to_string(), 2.0)]);
    assert!(matches!(s.what_if("s001", &over), Err(DemoError::Pipeline(PipelineError::ValueOutOfRange { .. }))));
    assert!(s.plan("s001", "9", 4).is_err());
}

#[test]
fn sessions_are_deterministic() {
    let a = DemoSession::new(40, 7, 0.9).unwrap();
    let b = DemoSession::new(40, 7, 0.9).unwrap();
    assert_eq!(a.bundle().to_json(), b.bundle().to_json());
}
