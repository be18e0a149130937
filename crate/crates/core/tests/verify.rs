use scorealign::verify::{run_battery, theorem1_cases, BatteryOptions, CheckReport, GradientPath};

#[test]
fn pass_is_estimate_within_tolerance_of_oracle() {
    assert!(CheckReport::new("a", 1.0, 1.5, 0.5).pass);
    assert!(!CheckReport::new("b", 1.0, 1.5, 0.49).pass);
    assert!(!CheckReport::new("c", f64::NAN, 0.0, 1.0).pass);
    let control = CheckReport::new("d", 3.0, 0.0, 1.0).control();
    assert!(!control.pass && control.as_designed());
}

#[test]
fn every_negative_control_fails() {
    let mut seen = Vec::new();
    let reports = run_battery(
        &BatteryOptions {
            seed: 5,
            negative_controls: true,
            recovery: false,
        },
        &mut |r| seen.push(r.name.clone()),
    )
    .unwrap();
    assert_eq!(reports.len(), 5);
    assert_eq!(seen, reports.iter().map(|r| r.name.clone()).collect::<Vec<_>>());
    for r in &reports {
        assert!(r.negative_control, "{}", r.name);
        assert!(!r.pass, "{} passed: estimate {} tolerance {}", r.name, r.estimate, r.tolerance);
    }
}

#[test]
fn exact_theorem1_cases_hold_for_any_seed() {
    for case in theorem1_cases(123).into_iter().filter(|c| c.path == GradientPath::Exact) {
        let r = case.run().unwrap();
        assert!(r.pass, "{}: {}", r.name, r.estimate);
    }
}

#[test]
fn reports_serialize_one_object_per_line() {
    let reports = [
        CheckReport::new("x", 0.1, 0.0, 1.0).with_se(0.05).detail("t", 0.5),
        CheckReport::new("y", 2.0, 0.0, 1.0).control(),
    ];
    let mut buf = Vec::new();
    CheckReport::write_jsonl(&reports, &mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0]["details"]["t"], 0.5);
    assert_eq!(lines[1]["negative_control"], true);
}
