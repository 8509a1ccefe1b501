mod common;

#[test]
fn hand_computed_metric_cases() {
    let cases = common::cases::metric_cases();
    assert!(cases.len() >= 12);
    let failed: Vec<String> = cases
        .iter()
        .filter_map(|(name, f)| f().err().map(|e| format!("{name}: {e}")))
        .collect();
    assert!(failed.is_empty(), "{failed:#?}");
}
