use echo_contrast::guideline::{GuidelineTable, SeverityGrade, StatedFinding, Verdict};
use echo_contrast::negation::{batch_negate, NegationRules, Polarity, UNMATCHED};
use echo_contrast::synthetic::{generate, to_ndjson, validate_manifest, SamplePair, SyntheticSpec};
use echo_contrast::Exec;

fn tables() -> (&'static GuidelineTable, &'static NegationRules) {
    (GuidelineTable::builtin(), NegationRules::builtin())
}

fn corpus(n: usize, seed: u64) -> Vec<SamplePair> {
    let (g, r) = tables();
    let spec = SyntheticSpec {
        n_samples: n,
        seed,
        ..SyntheticSpec::default()
    };
    generate(&spec, g, r, Exec::Parallel).unwrap()
}

fn verdict(value: f64, phrase: &str) -> Verdict {
    let g = GuidelineTable::builtin();
    let m = g.record("LA Length", value).unwrap();
    g.check_consistency(&m, &StatedFinding::parse(phrase).unwrap())
        .unwrap()
        .verdict
}

#[test]
fn la_length_anchor_cases() {
    assert_eq!(verdict(4.0, "normal"), Verdict::Consistent);
    assert_eq!(verdict(4.9, "normal"), Verdict::Consistent);
    assert_eq!(verdict(4.9, "mildly dilated left atrium"), Verdict::Subjective);
    assert_eq!(verdict(6.0, "normal"), Verdict::Inconsistent);
}

#[test]
fn rationale_names_the_measurement() {
    let g = GuidelineTable::builtin();
    let m = g.record("LA Length", 6.0).unwrap();
    let v = g
        .check_consistency(&m, &StatedFinding::parse("normal left atrium").unwrap())
        .unwrap();
    assert!(v.rationale.contains("LA Length"), "{}", v.rationale);
    assert!(v.derived > SeverityGrade::None);
}

#[test]
fn caption_selection_discards_conflicts_and_keeps_text() {
    let g = GuidelineTable::builtin();
    let block = vec![g.record("LA Length", 6.3).unwrap(), g.record("LVEF", 60.0).unwrap()];
    let candidates = vec![
        "Normal left atrium.".to_string(),
        "  Left ventricular ejection fraction is 60%.  Moderately dilated left atrium.".to_string(),
    ];
    assert_eq!(g.select_caption(&block, &candidates), Some(candidates[1].as_str()));

    let none_fit = vec!["Normal left atrium.".to_string(), "Severely dilated left atrium.".to_string()];
    assert_eq!(g.select_caption(&block, &none_fit), None);
    assert_eq!(g.select_caption(&block, &[]), None);
}

#[test]
fn every_disease_has_a_negation_rule() {
    let (g, r) = tables();
    for d in g.diseases() {
        let caption = format!("severe {}.", d.finding);
        let out = r.negate_caption(&caption, &[], g);
        assert!(out.matched(), "{}: {:?}", d.id, out);
        assert_eq!(r.polarity(&caption, &[], g), Polarity::Positive);
        assert_eq!(r.polarity(&out.text, &[], g), Polarity::Negative, "{}", out.text);
    }
}

#[test]
fn generated_captions_negate_to_opposite_polarity() {
    let (g, r) = tables();
    for row in corpus(300, 4) {
        assert!(!row.negation_rules.iter().any(|id| id == UNMATCHED), "{}", row.id);
        let p = r.polarity(&row.caption, &row.measurements, g);
        let q = r.polarity(&row.negated_caption, &row.measurements, g);
        assert_ne!(p, q, "{}", row.id);
        assert!(p != Polarity::Unknown && q != Polarity::Unknown);
    }
}

#[test]
fn double_negation_restores_polarity() {
    let (g, r) = tables();
    for caption in ["moderate aortic stenosis.", "no mitral regurgitation."] {
        let p = r.polarity(caption, &[], g);
        let once = r.negate_caption(caption, &[], g).text;
        let twice = r.negate_caption(&once, &[], g).text;
        assert_eq!(r.polarity(&twice, &[], g), p, "{caption} -> {once} -> {twice}");
    }
}

#[test]
fn batch_negate_edge_cases() {
    let (g, r) = tables();
    let mut empty: Vec<SamplePair> = Vec::new();
    batch_negate(&mut empty, r, g, Exec::Parallel);
    assert!(empty.is_empty());

    let mut rows = corpus(3, 9);
    let expected: Vec<String> = rows.iter().map(|x| x.negated_caption.clone()).collect();
    for x in &mut rows {
        x.negated_caption.clear();
    }
    let mut seq = rows.clone();
    batch_negate(&mut rows, r, g, Exec::Parallel);
    batch_negate(&mut seq, r, g, Exec::Sequential);
    let got: Vec<String> = rows.iter().map(|x| x.negated_caption.clone()).collect();
    assert_eq!(got, expected);
    assert_eq!(rows, seq);
}

#[test]
fn generated_manifest_validates_clean() {
    let (g, r) = tables();
    let text = to_ndjson(&corpus(400, 2));
    let report = validate_manifest(&text, g, r, Exec::Parallel);
    assert_eq!(report.rows, 400);
    assert!(report.is_clean(), "{:?}", report.violations.first());
}

#[test]
fn contradictory_measurement_is_reported() {
    let (g, r) = tables();
    let mut rows = corpus(50, 3);
    let target = rows[7].measurements.iter_mut().find(|m| m.key == "LA Length").unwrap();
    target.value = if target.value < 5.0 { 7.5 } else { 3.5 };
    let report = validate_manifest(&to_ndjson(&rows), g, r, Exec::Sequential);
    assert_eq!(report.violations.len(), 1);
    assert_eq!(report.violations[0].id.as_deref(), Some(rows[7].id.as_str()));
}

#[test]
fn malformed_and_duplicate_rows_are_reported() {
    let (g, r) = tables();
    let rows = corpus(5, 1);
    let mut text = to_ndjson(&rows);
    text.push_str("{not json\n");
    text.push_str(&to_ndjson(&rows[..1]));
    let report = validate_manifest(&text, g, r, Exec::Sequential);
    let problems: Vec<&str> = report
        .violations
        .iter()
        .flat_map(|v| v.problems.iter().map(String::as_str))
        .collect();
    assert!(problems.iter().any(|p| p.starts_with("malformed row")));
    assert!(problems.iter().any(|p| p.starts_with("duplicate id")));
}
