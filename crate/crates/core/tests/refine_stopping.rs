mod common;

use common::{non_monotone_cases, refine_case_holds};
use darnet_core::arsm::{refine_loop, StopReason};

#[test]
fn non_monotone_cases_return_the_previous_stage() {
    let cases = non_monotone_cases(50);
    assert_eq!(cases.len(), 50);
    for case in &cases {
        assert!(case.fb.1 >= case.fb.0);
        refine_case_holds(case).unwrap();
    }
}

#[test]
fn stage_records_stop_at_the_rejected_stage() {
    for case in non_monotone_cases(10) {
        let out = refine_loop(&case.features, &case.support, &case.state, &case.cfg).unwrap();
        assert_eq!(out.trace.stop_reason, StopReason::FbNotDecreasing);
        assert_eq!(out.trace.stages.len(), 2);
        assert_eq!(out.trace.self_match_passes, 2);
        let fb: Vec<f64> = out.trace.stages.iter().map(|s| s.fb_q.unwrap()).collect();
        assert!((fb[0] - case.fb.0).abs() < 1e-12);
        assert!((fb[1] - case.fb.1).abs() < 1e-12);
        assert!((out.trace.stages[1].tau_fg - 0.85).abs() < 1e-12);
        assert!((out.trace.stages[1].tau_bg - 0.55).abs() < 1e-12);
    }
}
