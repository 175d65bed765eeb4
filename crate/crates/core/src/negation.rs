//! Rule-based caption negation.
//!
//! Affirmative findings become their absence ("mild regurgitation" ->
//! "no regurgitation"); quantitative statements are interpreted through the
//! guideline bands before being negated. A caption that only reports absent
//! findings is rewritten to the affirmative counterpart.

use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::guideline::{GuidelineTable, MeasurementRecord, SeverityGrade};

const BUILTIN_RULES: &str = include_str!("../data/negation.toml");

/// Rule id reported when nothing in the caption matched.
pub const UNMATCHED: &str = "unmatched";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QualitativeEntry {
    id: String,
    finding: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct QuantitativeEntry {
    id: String,
    key: String,
    mention: String,
    finding: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleFile {
    version: u32,
    generic_negation: String,
    negation_template: String,
    affirmative_template: String,
    #[serde(default)]
    qualitative: Vec<QualitativeEntry>,
    #[serde(default)]
    quantitative: Vec<QuantitativeEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum RulePattern {
    /// A finding phrase preceded by a severity word or "no".
    Finding(String),
    /// A measurement mention with a value, interpreted through `key`'s bands.
    Measurement { key: String, mention: String },
}

#[derive(Clone, Debug)]
pub struct NegationRule {
    pub id: String,
    pub pattern: RulePattern,
    /// Finding phrase the rule's interpretation refers to.
    pub interpretation: String,
    regex: Option<Regex>,
}

#[derive(Clone, Debug)]
pub struct NegationRules {
    version: u32,
    generic_negation: String,
    negation_template: String,
    affirmative_template: String,
    qualitative: Vec<NegationRule>,
    quantitative: Vec<NegationRule>,
    qualitative_regex: Regex,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Polarity {
    Positive,
    Negative,
    Unknown,
}

/// A finding located in a caption.
#[derive(Clone, Debug, PartialEq)]
pub struct FindingMatch {
    pub start: usize,
    pub end: usize,
    pub rule_id: String,
    pub finding: String,
    pub grade: SeverityGrade,
}

impl FindingMatch {
    pub fn present(&self) -> bool {
        self.grade > SeverityGrade::None
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NegationOutcome {
    pub text: String,
    pub rule_ids: Vec<String>,
}

impl NegationOutcome {
    pub fn matched(&self) -> bool {
        self.rule_ids.iter().all(|r| r != UNMATCHED)
    }
}

fn phrase_pattern(phrase: &str) -> String {
    phrase
        .split_whitespace()
        .map(regex::escape)
        .collect::<Vec<_>>()
        .join(r"\s+")
}

impl NegationRules {
    pub fn builtin() -> &'static NegationRules {
        static RULES: OnceLock<NegationRules> = OnceLock::new();
        RULES.get_or_init(|| {
            NegationRules::from_toml_str(BUILTIN_RULES, "builtin negation.toml")
                .expect("builtin negation rules are valid")
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let file: RuleFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        if file.qualitative.is_empty() {
            return Err(Error::Config(format!("{origin}: no qualitative rules")));
        }
        for t in [&file.negation_template, &file.affirmative_template] {
            if !t.contains("{finding}") {
                return Err(Error::Config(format!("{origin}: template `{t}` lacks {{finding}}")));
            }
        }
        let qualitative: Vec<NegationRule> = file
            .qualitative
            .into_iter()
            .map(|q| NegationRule {
                id: q.id,
                pattern: RulePattern::Finding(q.finding.to_lowercase()),
                interpretation: q.finding.to_lowercase(),
                regex: None,
            })
            .collect();
        let mut alternatives: Vec<&str> = qualitative
            .iter()
            .map(|r| r.interpretation.as_str())
            .collect();
        alternatives.sort_by_key(|s| std::cmp::Reverse(s.len()));
        let alts = alternatives
            .iter()
            .map(|a| phrase_pattern(a))
            .collect::<Vec<_>>()
            .join("|");
        let qualitative_regex = Regex::new(&format!(
            r"(?i)\b(?:(no)|(mild|moderate|severe)(?:\s+to\s+(mild|moderate|severe))?)\s+({alts})\b"
        ))
        .map_err(|e| Error::Config(e.to_string()))?;

        let quantitative = file
            .quantitative
            .into_iter()
            .map(|q| {
                let re = Regex::new(&format!(
                    r"(?i)\b(?:quantitative\s+)?(?:biplane\s+)?{}\b(?:\s+(?:is|of|measures|measured\s+at|was|=)\s+(\d+(?:\.\d+)?)\s*(?:%|cm2|cm|m/s|mmhg|ml/m2|ml|ms)?)?",
                    phrase_pattern(&q.mention)
                ))
                .map_err(|e| Error::Config(e.to_string()))?;
                Ok(NegationRule {
                    id: q.id,
                    pattern: RulePattern::Measurement {
                        key: q.key,
                        mention: q.mention.to_lowercase(),
                    },
                    interpretation: q.finding.to_lowercase(),
                    regex: Some(re),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            version: file.version,
            generic_negation: file.generic_negation,
            negation_template: file.negation_template,
            affirmative_template: file.affirmative_template,
            qualitative,
            quantitative,
            qualitative_regex,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn rules(&self) -> impl Iterator<Item = &NegationRule> {
        self.qualitative.iter().chain(&self.quantitative)
    }

    pub fn negate_phrase(&self, finding: &str) -> String {
        self.negation_template.replace("{finding}", finding)
    }

    pub fn affirm_phrase(&self, finding: &str) -> String {
        self.affirmative_template.replace("{finding}", finding)
    }

    /// Every finding in `caption`, in text order. Quantitative mentions
    /// without an inline value fall back to the matching measurement record.
    pub fn findings(
        &self,
        caption: &str,
        measurements: &[MeasurementRecord],
        guideline: &GuidelineTable,
    ) -> Vec<FindingMatch> {
        let mut out: Vec<FindingMatch> = Vec::new();
        for rule in &self.quantitative {
            let (RulePattern::Measurement { key, .. }, Some(re)) = (&rule.pattern, &rule.regex) else {
                continue;
            };
            for caps in re.captures_iter(caption) {
                let whole = caps.get(0).expect("group 0");
                let value = match caps.get(1) {
                    Some(v) => v.as_str().parse::<f64>().ok(),
                    None => measurements
                        .iter()
                        .find(|m| guideline.spec(&m.key).is_ok_and(|s| guideline.spec(key).is_ok_and(|k| k.key == s.key)))
                        .map(|m| m.value),
                };
                let Some(grade) = value.and_then(|v| guideline.grade_value(key, v).ok()) else {
                    continue;
                };
                out.push(FindingMatch {
                    start: whole.start(),
                    end: whole.end(),
                    rule_id: format!("quantitative:{}", rule.id),
                    finding: rule.interpretation.clone(),
                    grade,
                });
            }
        }
        let overlaps = |s: usize, e: usize, taken: &[FindingMatch]| {
            taken.iter().any(|f| s < f.end && f.start < e)
        };
        let quantitative_count = out.len();
        for caps in self.qualitative_regex.captures_iter(caption) {
            let whole = caps.get(0).expect("group 0");
            if overlaps(whole.start(), whole.end(), &out[..quantitative_count]) {
                continue;
            }
            let finding = caps[4].split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase();
            let grade = if caps.get(1).is_some() {
                SeverityGrade::None
            } else {
                let word = caps.get(3).or(caps.get(2)).expect("severity group").as_str();
                match word.to_lowercase().as_str() {
                    "mild" => SeverityGrade::Mild,
                    "moderate" => SeverityGrade::Moderate,
                    _ => SeverityGrade::Severe,
                }
            };
            let id = self
                .qualitative
                .iter()
                .find(|r| r.interpretation == finding)
                .map_or("qualitative", |r| r.id.as_str());
            out.push(FindingMatch {
                start: whole.start(),
                end: whole.end(),
                rule_id: format!("qualitative:{id}"),
                finding,
                grade,
            });
        }
        out.sort_by_key(|f| f.start);
        out
    }

    /// Positive if any finding is present, negative if findings exist and all
    /// are absent, unknown when no rule matches.
    pub fn polarity(
        &self,
        caption: &str,
        measurements: &[MeasurementRecord],
        guideline: &GuidelineTable,
    ) -> Polarity {
        let f = self.findings(caption, measurements, guideline);
        if f.is_empty() {
            Polarity::Unknown
        } else if f.iter().any(FindingMatch::present) {
            Polarity::Positive
        } else {
            Polarity::Negative
        }
    }

    pub fn negate_caption(
        &self,
        caption: &str,
        measurements: &[MeasurementRecord],
        guideline: &GuidelineTable,
    ) -> NegationOutcome {
        let findings = self.findings(caption, measurements, guideline);
        if findings.is_empty() {
            log::warn!("no negation rule matched caption `{caption}`");
            return NegationOutcome {
                text: self.generic_negation.clone(),
                rule_ids: vec![UNMATCHED.to_string()],
            };
        }
        let any_present = findings.iter().any(FindingMatch::present);
        let mut text = String::with_capacity(caption.len());
        let mut rule_ids = Vec::new();
        let mut cursor = 0;
        for f in &findings {
            let replacement = if any_present && f.present() {
                rule_ids.push(format!("{}:negate", f.rule_id));
                self.negate_phrase(&f.finding)
            } else if !any_present {
                rule_ids.push(format!("{}:affirm", f.rule_id));
                self.affirm_phrase(&f.finding)
            } else {
                continue;
            };
            text.push_str(&caption[cursor..f.start]);
            text.push_str(&replacement);
            cursor = f.end;
        }
        text.push_str(&caption[cursor..]);
        NegationOutcome { text, rule_ids }
    }
}

/// A row to be negated: caption plus its measurement block.
pub trait NegationTarget {
    fn caption(&self) -> &str;
    fn measurements(&self) -> &[MeasurementRecord];
    fn set_negation(&mut self, outcome: NegationOutcome);
}

/// Fills the negated caption of every row, preserving order.
pub fn batch_negate<T: NegationTarget + Send + Sync>(
    rows: &mut [T],
    rules: &NegationRules,
    guideline: &GuidelineTable,
    exec: Exec,
) {
    let outcomes = exec.map_slice(rows, |r| {
        rules.negate_caption(r.caption(), r.measurements(), guideline)
    });
    for (row, outcome) in rows.iter_mut().zip(outcomes) {
        row.set_negation(outcome);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn negate(caption: &str) -> NegationOutcome {
        NegationRules::builtin().negate_caption(caption, &[], GuidelineTable::builtin())
    }

    fn polarity(caption: &str) -> Polarity {
        NegationRules::builtin().polarity(caption, &[], GuidelineTable::builtin())
    }

    #[test]
    fn severity_collapses_to_absence() {
        assert_eq!(negate("mild regurgitation").text, "no regurgitation");
        assert_eq!(negate("severe aortic stenosis").text, "no aortic stenosis");
        assert_eq!(negate("Moderate to severe tricuspid regurgitation.").text, "no tricuspid regurgitation.");
    }

    #[test]
    fn quantitative_interpretation_negated() {
        let out = negate("left ventricular ejection fraction is 45%");
        assert_eq!(out.text, "no systolic dysfunction");
        assert_eq!(out.rule_ids, vec!["quantitative:lvef:negate"]);
        assert_eq!(
            negate("Quantitative biplane left ventricular ejection fraction is 45%.").text,
            "no systolic dysfunction."
        );
        // normal value: the interpretation is an absence, so it gets affirmed
        assert_eq!(negate("left ventricular ejection fraction is 60%").text, "mild systolic dysfunction");
    }

    #[test]
    fn absence_becomes_affirmative() {
        let out = negate("no pericardial effusion");
        assert_eq!(out.text, "mild pericardial effusion");
        assert_eq!(out.rule_ids, vec!["qualitative:pericardial_effusion:affirm"]);
    }

    #[test]
    fn mixed_caption_negates_every_present_finding() {
        let c = "a4c view. moderate aortic stenosis. no septal hypertrophy. severe root dilation.";
        let out = negate(c);
        assert_eq!(out.text, "a4c view. no aortic stenosis. no septal hypertrophy. no root dilation.");
        assert_eq!(out.rule_ids.len(), 2);
    }

    #[test]
    fn measurement_fallback_without_inline_value() {
        let g = GuidelineTable::builtin();
        let m = vec![g.record("LA Length", 6.5).unwrap()];
        let out = NegationRules::builtin().negate_caption("the left atrial length", &m, g);
        assert_eq!(out.text, "the no atrial dilation");
    }

    #[test]
    fn unmatched_caption_gets_generic_negation() {
        let out = negate("image quality is adequate");
        assert_eq!(out.text, "no abnormal findings");
        assert!(!out.matched());
    }

    #[test]
    fn negation_flips_polarity() {
        for c in [
            "mild regurgitation",
            "no pericardial effusion",
            "left ventricular ejection fraction is 45%",
            "left atrial length is 4.0 cm. no aortic stenosis",
            "plax view. mild aortic stenosis. no tricuspid regurgitation. aortic root diameter is 3.9 cm.",
        ] {
            let n = negate(c);
            assert_ne!(n.text, c);
            let (p, q) = (polarity(c), polarity(&n.text));
            assert_ne!(p, Polarity::Unknown);
            assert_ne!(p, q, "{c} -> {}", n.text);
        }
    }

    #[test]
    fn deterministic() {
        let c = "a4c view. severe pulmonary hypertension. no diastolic dysfunction.";
        assert_eq!(negate(c), negate(c));
    }

    #[derive(Clone)]
    struct Row {
        caption: String,
        negated: Option<NegationOutcome>,
    }

    impl NegationTarget for Row {
        fn caption(&self) -> &str {
            &self.caption
        }
        fn measurements(&self) -> &[MeasurementRecord] {
            &[]
        }
        fn set_negation(&mut self, outcome: NegationOutcome) {
            self.negated = Some(outcome);
        }
    }

    #[test]
    fn batch_negate_preserves_order() {
        let mut empty: Vec<Row> = Vec::new();
        batch_negate(&mut empty, NegationRules::builtin(), GuidelineTable::builtin(), Exec::Parallel);
        assert!(empty.is_empty());

        let mut rows: Vec<Row> = ["mild regurgitation", "no pericardial effusion", "severe aortic stenosis"]
            .iter()
            .map(|c| Row {
                caption: c.to_string(),
                negated: None,
            })
            .collect();
        let mut again = rows.clone();
        batch_negate(&mut rows, NegationRules::builtin(), GuidelineTable::builtin(), Exec::Parallel);
        batch_negate(&mut again, NegationRules::builtin(), GuidelineTable::builtin(), Exec::Sequential);
        for (r, a) in rows.iter().zip(&again) {
            let n = r.negated.as_ref().unwrap();
            assert_ne!(n.text, r.caption);
            assert_eq!(n, a.negated.as_ref().unwrap());
        }
        assert_eq!(rows[0].negated.as_ref().unwrap().text, "no regurgitation");
    }
}
