//! Measurement-key standardization, severity bands, and rule-based
//! caption/measurement consistency checking.

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BUILTIN_TABLE: &str = include_str!("../data/guideline.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeverityGrade {
    None,
    Mild,
    Moderate,
    Severe,
}

impl SeverityGrade {
    pub const ALL: [SeverityGrade; 4] = [
        SeverityGrade::None,
        SeverityGrade::Mild,
        SeverityGrade::Moderate,
        SeverityGrade::Severe,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SeverityGrade::None => "none",
            SeverityGrade::Mild => "mild",
            SeverityGrade::Moderate => "moderate",
            SeverityGrade::Severe => "severe",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for SeverityGrade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Binary disease label: positive iff `grade > threshold`.
pub fn binarize_disease(grade: SeverityGrade, threshold: SeverityGrade) -> bool {
    grade > threshold
}

/// Default binarisation threshold: grades above mild count as positive.
pub const DEFAULT_POSITIVE_THRESHOLD: SeverityGrade = SeverityGrade::Mild;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AnatomicalCategory {
    #[serde(rename = "LV")]
    Lv,
    #[serde(rename = "LA")]
    La,
    #[serde(rename = "RV")]
    Rv,
    #[serde(rename = "RA")]
    Ra,
    #[serde(rename = "MV")]
    Mv,
    #[serde(rename = "TV")]
    Tv,
    #[serde(rename = "AV")]
    Av,
    #[serde(rename = "PV")]
    Pv,
    #[serde(rename = "SV")]
    Sv,
    #[serde(rename = "pulmonary vein")]
    PulmonaryVein,
    #[serde(rename = "aorta")]
    Aorta,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub key: String,
    pub value: f64,
    pub unit: String,
    pub category: AnatomicalCategory,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Band {
    #[serde(default)]
    pub lower: Option<f64>,
    #[serde(default)]
    pub upper: Option<f64>,
    pub grade: SeverityGrade,
}

impl Band {
    fn contains(&self, v: f64) -> bool {
        self.lower.is_none_or(|lo| v >= lo) && self.upper.is_none_or(|hi| v < hi)
    }

    fn width(&self) -> Option<f64> {
        Some(self.upper? - self.lower?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MeasurementSpec {
    pub key: String,
    pub display: String,
    pub unit: String,
    pub category: AnatomicalCategory,
    pub decimals: u32,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default)]
    pub borderline_fraction: Option<f64>,
    #[serde(default)]
    pub bands: Vec<Band>,
}

impl MeasurementSpec {
    pub fn band_index(&self, value: f64) -> Option<usize> {
        self.bands.iter().position(|b| b.contains(value))
    }

    /// Width used for margins around band `i`; unbounded bands borrow their
    /// neighbour's width.
    fn effective_width(&self, i: usize) -> f64 {
        if let Some(w) = self.bands[i].width() {
            return w;
        }
        let neighbours = [i.checked_sub(1), Some(i + 1)];
        neighbours
            .into_iter()
            .flatten()
            .filter_map(|j| self.bands.get(j).and_then(Band::width))
            .next()
            .unwrap_or(1.0)
    }

    /// The band sampled for a grade: among bands of that grade, the first one
    /// bordering a band of a different grade.
    pub fn primary_band(&self, grade: SeverityGrade) -> Option<usize> {
        let candidates: Vec<usize> = (0..self.bands.len())
            .filter(|&i| self.bands[i].grade == grade)
            .collect();
        candidates
            .iter()
            .copied()
            .find(|&i| {
                let prev = i.checked_sub(1).map(|j| self.bands[j].grade);
                let next = self.bands.get(i + 1).map(|b| b.grade);
                prev.is_some_and(|g| g != grade) || next.is_some_and(|g| g != grade)
            })
            .or_else(|| candidates.first().copied())
    }

    /// An interval strictly inside the primary band of `grade`, clear of the
    /// borderline margins around its edges.
    pub fn safe_interval(&self, grade: SeverityGrade, default_fraction: f64) -> Option<(f64, f64)> {
        let i = self.primary_band(grade)?;
        let band = self.bands[i];
        let w = self.effective_width(i);
        let margin = self.borderline_fraction.unwrap_or(default_fraction) * w;
        let lo = band.lower.map(|v| v + margin);
        let hi = band.upper.map(|v| v - margin);
        match (lo, hi) {
            (Some(lo), Some(hi)) => Some((lo, hi)),
            (Some(lo), None) => Some((lo, lo + w)),
            (None, Some(hi)) => Some((hi - w, hi)),
            (None, None) => None,
        }
    }

    pub fn format_value(&self, value: f64) -> String {
        let v = format!("{:.*}", self.decimals as usize, value);
        match self.unit.as_str() {
            "%" => format!("{v}%"),
            "ratio" => v,
            u => format!("{v} {}", u.to_lowercase()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiseaseSpec {
    pub id: String,
    pub finding: String,
    pub measurement: String,
    pub keywords: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TableFile {
    version: u32,
    default_borderline_fraction: f64,
    #[serde(default)]
    non_clinical: Vec<String>,
    #[serde(default)]
    blocklist: Vec<String>,
    #[serde(rename = "measurement")]
    measurements: Vec<MeasurementSpec>,
    #[serde(rename = "disease", default)]
    diseases: Vec<DiseaseSpec>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    NonClinical,
    Unknown,
    Empty,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRejection {
    pub raw: String,
    pub reason: RejectionReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Consistent,
    Inconsistent,
    Subjective,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyVerdict {
    pub verdict: Verdict,
    pub derived: SeverityGrade,
    pub rationale: String,
}

/// A finding statement with the severity grade it asserts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StatedFinding {
    pub phrase: String,
    pub grade: SeverityGrade,
}

const NONE_WORDS: &[&str] = &["no", "normal", "not", "without", "absent", "none", "negative"];
const ABNORMAL_WORDS: &[&str] = &[
    "dilated", "dilation", "enlarged", "enlargement", "hypertrophied", "hypertrophy",
    "reduced", "elevated", "increased", "abnormal", "thickened", "impaired", "dysfunction",
    "stenosis", "regurgitation", "hypertension",
];

impl StatedFinding {
    /// Explicit severity words win (highest one if several), then negations,
    /// then bare abnormality words, which read as mild.
    pub fn parse(phrase: &str) -> Result<Self> {
        Self::try_parse(phrase).ok_or_else(|| Error::UnparseablePhrase(phrase.to_string()))
    }

    fn try_parse(phrase: &str) -> Option<Self> {
        let words: Vec<String> = words(phrase).collect();
        let explicit = words
            .iter()
            .filter_map(|w| match w.as_str() {
                "mild" | "mildly" => Some(SeverityGrade::Mild),
                "moderate" | "moderately" => Some(SeverityGrade::Moderate),
                "severe" | "severely" => Some(SeverityGrade::Severe),
                _ => None,
            })
            .max();
        let grade = if let Some(g) = explicit {
            g
        } else if words.iter().any(|w| NONE_WORDS.contains(&w.as_str())) {
            SeverityGrade::None
        } else if words.iter().any(|w| ABNORMAL_WORDS.contains(&w.as_str())) {
            SeverityGrade::Mild
        } else {
            return None;
        };
        Some(Self {
            phrase: phrase.to_string(),
            grade,
        })
    }
}

fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !(c.is_alphanumeric() || c == '\'' || c == '/'))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

/// Lowercase, with every run of non-alphanumeric characters collapsed to one
/// space.
fn canonical_form(raw: &str) -> String {
    raw.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

fn number_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(-?\d+(?:\.(\d+))?)").unwrap())
}

fn sentence_split_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[.;,](?:\s+|$)").unwrap())
}

/// Splits a caption into sentences/clauses without breaking decimal numbers.
pub fn sentences(caption: &str) -> Vec<&str> {
    sentence_split_regex()
        .split(caption)
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .collect()
}

/// How a caption clause references a measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum Statement {
    Qualitative { grade: SeverityGrade },
    Quantitative { value: f64 },
}

/// One caption clause linked to a measurement, with its verdict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionLink {
    pub clause: String,
    pub disease: String,
    pub key: String,
    pub value: f64,
    pub statement: Statement,
    pub verdict: ConsistencyVerdict,
}

/// Newline-delimited verdict record: `{sample id, key, value, stated, derived,
/// verdict, rationale}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub sample_id: String,
    pub key: String,
    pub value: f64,
    pub stated: String,
    pub derived: SeverityGrade,
    pub verdict: Verdict,
    pub rationale: String,
}

impl VerdictRecord {
    pub fn from_link(sample_id: &str, link: &CaptionLink) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            key: link.key.clone(),
            value: link.value,
            stated: link.clause.clone(),
            derived: link.verdict.derived,
            verdict: link.verdict.verdict,
            rationale: link.verdict.rationale.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GuidelineTable {
    version: u32,
    default_borderline_fraction: f64,
    non_clinical: Vec<String>,
    blocklist: Vec<String>,
    measurements: Vec<MeasurementSpec>,
    diseases: Vec<DiseaseSpec>,
    by_form: HashMap<String, usize>,
}

impl GuidelineTable {
    pub fn builtin() -> &'static GuidelineTable {
        static TABLE: OnceLock<GuidelineTable> = OnceLock::new();
        TABLE.get_or_init(|| {
            GuidelineTable::from_toml_str(BUILTIN_TABLE, "builtin guideline.toml")
                .expect("builtin guideline table is valid")
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let file: TableFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        let mut by_form = HashMap::new();
        for (i, m) in file.measurements.iter().enumerate() {
            for name in std::iter::once(&m.key).chain(&m.aliases) {
                let form = canonical_form(name);
                if let Some(prev) = by_form.insert(form.clone(), i) {
                    if prev != i {
                        return Err(Error::Config(format!(
                            "{origin}: alias `{name}` maps to both `{}` and `{}`",
                            file.measurements[prev].key, m.key
                        )));
                    }
                }
            }
            for pair in m.bands.windows(2) {
                if pair[0].upper != pair[1].lower {
                    return Err(Error::Config(format!(
                        "{origin}: bands of `{}` are not contiguous",
                        m.key
                    )));
                }
            }
        }
        for d in &file.diseases {
            let Some(&mi) = by_form.get(&canonical_form(&d.measurement)) else {
                return Err(Error::Config(format!(
                    "{origin}: disease `{}` references unknown key `{}`",
                    d.id, d.measurement
                )));
            };
            if file.measurements[mi].bands.is_empty() {
                return Err(Error::Config(format!(
                    "{origin}: disease `{}` measurement `{}` has no bands",
                    d.id, d.measurement
                )));
            }
        }
        Ok(Self {
            version: file.version,
            default_borderline_fraction: file.default_borderline_fraction,
            non_clinical: file.non_clinical.iter().map(|s| canonical_form(s)).collect(),
            blocklist: file.blocklist,
            measurements: file.measurements,
            diseases: file.diseases,
            by_form,
        })
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn default_borderline_fraction(&self) -> f64 {
        self.default_borderline_fraction
    }

    pub fn measurements(&self) -> &[MeasurementSpec] {
        &self.measurements
    }

    pub fn diseases(&self) -> &[DiseaseSpec] {
        &self.diseases
    }

    pub fn disease(&self, id: &str) -> Option<&DiseaseSpec> {
        self.diseases.iter().find(|d| d.id == id)
    }

    pub fn is_blocklisted(&self, disease_id: &str) -> bool {
        self.blocklist.iter().any(|b| b == disease_id)
    }

    /// Canonical key for a raw OCR key, or the reason it was rejected.
    pub fn normalize_key(&self, raw: &str) -> std::result::Result<String, KeyRejection> {
        let form = canonical_form(raw);
        if form.is_empty() {
            return Err(KeyRejection {
                raw: raw.to_string(),
                reason: RejectionReason::Empty,
            });
        }
        if let Some(&i) = self.by_form.get(&form) {
            return Ok(self.measurements[i].key.clone());
        }
        let reason = if self.non_clinical.contains(&form) {
            RejectionReason::NonClinical
        } else {
            RejectionReason::Unknown
        };
        Err(KeyRejection {
            raw: raw.to_string(),
            reason,
        })
    }

    pub fn spec(&self, key: &str) -> Result<&MeasurementSpec> {
        self.by_form
            .get(&canonical_form(key))
            .map(|&i| &self.measurements[i])
            .ok_or_else(|| Error::UnknownKey(key.to_string()))
    }

    /// Builds a record for a standardized key, checking the declared unit.
    pub fn record(&self, key: &str, value: f64) -> Result<MeasurementRecord> {
        let spec = self.spec(key)?;
        Ok(MeasurementRecord {
            key: spec.key.clone(),
            value,
            unit: spec.unit.clone(),
            category: spec.category,
        })
    }

    pub fn validate_record(&self, m: &MeasurementRecord) -> Result<()> {
        let spec = self.spec(&m.key)?;
        if spec.key != m.key {
            return Err(Error::Config(format!(
                "`{}` is not a standardized key (expected `{}`)",
                m.key, spec.key
            )));
        }
        if spec.unit != m.unit {
            return Err(Error::Config(format!(
                "`{}` has unit `{}`, expected `{}`",
                m.key, m.unit, spec.unit
            )));
        }
        if spec.category != m.category {
            return Err(Error::Config(format!("`{}` has the wrong category", m.key)));
        }
        if !m.value.is_finite() {
            return Err(Error::NonFinite {
                tensor: format!("measurement {}", m.key),
                index: 0,
            });
        }
        Ok(())
    }

    pub fn grade_value(&self, key: &str, value: f64) -> Result<SeverityGrade> {
        let spec = self.spec(key)?;
        if spec.bands.is_empty() {
            return Err(Error::MissingBand(spec.key.clone()));
        }
        spec.band_index(value)
            .map(|i| spec.bands[i].grade)
            .ok_or_else(|| Error::Config(format!("{value} lies outside every band of `{}`", spec.key)))
    }

    pub fn grade_from_measurement(&self, m: &MeasurementRecord) -> Result<SeverityGrade> {
        self.grade_value(&m.key, m.value)
    }

    /// Compares a stated finding with the band-derived grade of a measurement.
    pub fn check_consistency(
        &self,
        m: &MeasurementRecord,
        stated: &StatedFinding,
    ) -> Result<ConsistencyVerdict> {
        let spec = self.spec(&m.key)?;
        let derived = self.grade_from_measurement(m)?;
        let value = spec.format_value(m.value);
        if stated.grade == derived {
            return Ok(ConsistencyVerdict {
                verdict: Verdict::Consistent,
                derived,
                rationale: format!("{} {value} grades {derived}, as stated", spec.key),
            });
        }
        if let Some(edge) = self.borderline_edge(spec, m.value, derived, stated.grade) {
            return Ok(ConsistencyVerdict {
                verdict: Verdict::Subjective,
                derived,
                rationale: format!(
                    "{} {value} grades {derived} but lies within the borderline margin of the {}/{} edge at {}",
                    spec.key,
                    derived.min(stated.grade),
                    derived.max(stated.grade),
                    spec.format_value(edge)
                ),
            });
        }
        Ok(ConsistencyVerdict {
            verdict: Verdict::Inconsistent,
            derived,
            rationale: format!(
                "{} {value} grades {derived}, caption states {}",
                spec.key, stated.grade
            ),
        })
    }

    /// The band edge near `value` that separates `derived` from `stated`, if
    /// `value` is within that edge's borderline margin.
    fn borderline_edge(
        &self,
        spec: &MeasurementSpec,
        value: f64,
        derived: SeverityGrade,
        stated: SeverityGrade,
    ) -> Option<f64> {
        let i = spec.band_index(value)?;
        let fraction = spec
            .borderline_fraction
            .unwrap_or(self.default_borderline_fraction);
        let margin = fraction * spec.effective_width(i);
        let band = spec.bands[i];
        let mut edges = Vec::new();
        if let (Some(lo), Some(prev)) = (band.lower, i.checked_sub(1)) {
            edges.push((lo, spec.bands[prev].grade));
        }
        if let (Some(hi), Some(next)) = (band.upper, spec.bands.get(i + 1)) {
            edges.push((hi, next.grade));
        }
        edges
            .into_iter()
            .find(|&(edge, other)| other == stated && other != derived && (value - edge).abs() <= margin)
            .map(|(edge, _)| edge)
    }

    fn disease_for_clause(&self, clause: &str) -> Option<&DiseaseSpec> {
        let lower = format!(" {} ", words(clause).collect::<Vec<_>>().join(" "));
        self.diseases
            .iter()
            .filter(|d| !self.is_blocklisted(&d.id))
            .filter_map(|d| {
                d.keywords
                    .iter()
                    .filter(|k| lower.contains(&format!(" {} ", words(k).collect::<Vec<_>>().join(" "))))
                    .map(|k| k.len())
                    .max()
                    .map(|len| (len, d))
            })
            .max_by_key(|&(len, _)| len)
            .map(|(_, d)| d)
    }

    /// Links every caption clause that references a measurement in `block`
    /// and judges it.
    pub fn assess_caption(&self, caption: &str, block: &[MeasurementRecord]) -> Vec<CaptionLink> {
        let mut links = Vec::new();
        for clause in sentences(caption) {
            let Some(disease) = self.disease_for_clause(clause) else {
                continue;
            };
            let Ok(spec) = self.spec(&disease.measurement) else {
                continue;
            };
            let Some(m) = block.iter().find(|m| canonical_form(&m.key) == canonical_form(&spec.key))
            else {
                continue;
            };
            if let Some(caps) = number_regex().captures(clause) {
                let text = &caps[1];
                let stated: f64 = text.parse().unwrap_or(f64::NAN);
                let places = caps.get(2).map_or(0, |d| d.as_str().len()) as i32;
                let tolerance = 0.5 * 10f64.powi(-places) + 1e-9;
                let derived = self.grade_from_measurement(m).unwrap_or(SeverityGrade::None);
                let ok = (stated - m.value).abs() <= tolerance;
                links.push(CaptionLink {
                    clause: clause.to_string(),
                    disease: disease.id.clone(),
                    key: spec.key.clone(),
                    value: m.value,
                    statement: Statement::Quantitative { value: stated },
                    verdict: ConsistencyVerdict {
                        verdict: if ok { Verdict::Consistent } else { Verdict::Inconsistent },
                        derived,
                        rationale: if ok {
                            format!("caption value {text} matches {} {}", spec.key, spec.format_value(m.value))
                        } else {
                            format!("caption value {text} contradicts {} {}", spec.key, spec.format_value(m.value))
                        },
                    },
                });
            }
            let without_numbers = number_regex().replace_all(clause, " ");
            if let Some(stated) = StatedFinding::try_parse(&without_numbers) {
                let stated = StatedFinding {
                    phrase: clause.to_string(),
                    grade: stated.grade,
                };
                if let Ok(verdict) = self.check_consistency(m, &stated) {
                    links.push(CaptionLink {
                        clause: clause.to_string(),
                        disease: disease.id.clone(),
                        key: spec.key.clone(),
                        value: m.value,
                        statement: Statement::Qualitative { grade: stated.grade },
                        verdict,
                    });
                }
            }
        }
        links
    }

    /// Keeps candidates with no inconsistent link and returns the one with
    /// the most measurement references (first on ties), text unmodified.
    pub fn select_caption<'a>(
        &self,
        block: &[MeasurementRecord],
        candidates: &'a [String],
    ) -> Option<&'a str> {
        let mut best: Option<(usize, &'a str)> = None;
        for c in candidates {
            let links = self.assess_caption(c, block);
            if links.iter().any(|l| l.verdict.verdict == Verdict::Inconsistent) {
                continue;
            }
            let score = links.len();
            if best.is_none_or(|(s, _)| score > s) {
                best = Some((score, c.as_str()));
            }
        }
        best.map(|(_, c)| c)
    }

    /// Stated severity for a disease in a caption, from its qualitative clauses.
    pub fn stated_grade(&self, caption: &str, disease_id: &str) -> Option<SeverityGrade> {
        sentences(caption)
            .into_iter()
            .filter(|c| !number_regex().is_match(c))
            .filter(|c| self.disease_for_clause(c).is_some_and(|d| d.id == disease_id))
            .find_map(|c| StatedFinding::try_parse(c).map(|s| s.grade))
    }
}
