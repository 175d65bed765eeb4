//! Seeded synthetic corpus with known latent structure, manifest IO and
//! manifest validation.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoders::ImageInput;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::guideline::{GuidelineTable, MeasurementRecord, SeverityGrade, StatedFinding, Verdict};
use crate::negation::{NegationOutcome, NegationRules, NegationTarget, Polarity};

/// Standard transthoracic view names; views beyond this list are numbered.
pub const VIEW_NAMES: [&str; 12] = [
    "parasternal long axis",
    "parasternal short axis",
    "apical four chamber",
    "apical two chamber",
    "apical three chamber",
    "apical five chamber",
    "subcostal four chamber",
    "suprasternal notch",
    "subcostal inferior vena cava",
    "right ventricular inflow",
    "parasternal short axis apex",
    "apical four chamber zoomed",
];

pub fn view_name(view: u32) -> String {
    VIEW_NAMES
        .get(view as usize)
        .map_or_else(|| format!("view {view}"), |s| s.to_string())
}

/// Grade prior: none 0.4, mild / moderate / severe 0.2 each.
const GRADE_CUMULATIVE: [f64; 4] = [0.4, 0.6, 0.8, 1.0];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub n_samples: usize,
    pub n_views: usize,
    pub n_diseases: usize,
    /// Number of pure-noise latent coordinates.
    pub d_latent: usize,
    pub noise_sigma: f64,
    /// Length of the view one-hot block in latent space.
    pub view_scale: f64,
    pub feature_dim: usize,
    /// Train / val / test fractions.
    pub split_ratios: [f64; 3],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_samples: 2500,
            n_views: 8,
            n_diseases: 9,
            d_latent: 8,
            noise_sigma: 0.1,
            view_scale: 2.0,
            feature_dim: 32,
            split_ratios: [0.8, 0.1, 0.1],
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn latent_dim(&self) -> usize {
        self.n_views + self.n_diseases + self.d_latent
    }

    pub fn validate(&self, guideline: &GuidelineTable) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_samples == 0 || self.n_views == 0 || self.n_diseases == 0 {
            return fail("n_samples, n_views and n_diseases must be positive".into());
        }
        if self.n_diseases > guideline.diseases().len() {
            return fail(format!(
                "n_diseases {} exceeds the {} diseases of the guideline table",
                self.n_diseases,
                guideline.diseases().len()
            ));
        }
        if self.latent_dim() > self.feature_dim {
            return fail(format!(
                "latent dimension {} exceeds feature_dim {}",
                self.latent_dim(),
                self.feature_dim
            ));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) || !(self.view_scale > 0.0) {
            return fail("noise_sigma must be >= 0 and view_scale > 0".into());
        }
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| !(*r >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return fail(format!("split ratios {:?} must be non-negative and sum to 1", self.split_ratios));
        }
        Ok(())
    }

    /// Exact split sizes: rounded train and val counts, test takes the rest.
    pub fn split_sizes(&self) -> [usize; 3] {
        split_sizes(self.n_samples, self.split_ratios)
    }
}

fn split_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let train = ((n as f64) * ratios[0]).round() as usize;
    let val = (((n as f64) * ratios[1]).round() as usize).min(n - train.min(n));
    let train = train.min(n);
    [train, val, n - train - val]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

/// One manifest row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplePair {
    pub id: String,
    pub image_features: Vec<f64>,
    pub caption: String,
    pub negated_caption: String,
    pub view: u32,
    pub grades: BTreeMap<String, SeverityGrade>,
    pub measurements: Vec<MeasurementRecord>,
    pub split: Split,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negation_rules: Vec<String>,
}

impl SamplePair {
    pub fn image(&self) -> Result<ImageInput> {
        ImageInput::new(self.image_features.clone(), self.id.clone())
    }
}

impl NegationTarget for SamplePair {
    fn caption(&self) -> &str {
        &self.caption
    }

    fn measurements(&self) -> &[MeasurementRecord] {
        &self.measurements
    }

    fn set_negation(&mut self, outcome: NegationOutcome) {
        self.negated_caption = outcome.text;
        self.negation_rules = outcome.rule_ids;
    }
}

/// `cols` orthonormal columns of length `rows`, by Gram-Schmidt on a
/// Gaussian matrix.
fn orthonormal_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while basis.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(rng)).collect();
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= dot * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    basis
}

fn draw_grade(rng: &mut ChaCha8Rng) -> SeverityGrade {
    let u: f64 = rng.random();
    let i = GRADE_CUMULATIVE.iter().position(|&c| u < c).unwrap_or(3);
    SeverityGrade::ALL[i]
}

fn severity_phrase(grade: SeverityGrade, finding: &str) -> String {
    match grade {
        SeverityGrade::None => format!("no {finding}"),
        g => format!("{g} {finding}"),
    }
}

/// A measurement value for `grade`, clear of borderline margins, rounded to
/// the key's display precision.
fn draw_value(
    guideline: &GuidelineTable,
    key: &str,
    grade: SeverityGrade,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let spec = guideline.spec(key)?;
    let (lo, hi) = spec
        .safe_interval(grade, guideline.default_borderline_fraction())
        .ok_or_else(|| Error::MissingBand(format!("{key} ({grade})")))?;
    let scale = 10f64.powi(spec.decimals as i32);
    let stated = StatedFinding {
        phrase: String::new(),
        grade,
    };
    let accept = |v: f64| -> bool {
        guideline
            .record(key, v)
            .and_then(|m| guideline.check_consistency(&m, &stated))
            .is_ok_and(|c| c.verdict == Verdict::Consistent)
    };
    for _ in 0..32 {
        let v = (rng.random_range(lo..=hi) * scale).round() / scale;
        if accept(v) {
            return Ok(v);
        }
    }
    let mid = (0.5 * (lo + hi) * scale).round() / scale;
    if accept(mid) {
        Ok(mid)
    } else {
        Err(Error::Config(format!("cannot place a {grade} value for `{key}` in [{lo}, {hi}]")))
    }
}

/// Generates the corpus. Deterministic in `spec.seed` and independent of
/// `exec`: sample `i` draws from its own substream.
pub fn generate(
    spec: &SyntheticSpec,
    guideline: &GuidelineTable,
    rules: &NegationRules,
    exec: Exec,
) -> Result<Vec<SamplePair>> {
    spec.validate(guideline)?;
    let mut base = ChaCha8Rng::seed_from_u64(spec.seed);
    base.set_stream(0);
    let map = orthonormal_columns(spec.feature_dim, spec.latent_dim(), &mut base);

    let mut order: Vec<usize> = (0..spec.n_samples).collect();
    let mut split_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    split_rng.set_stream(u64::MAX);
    order.shuffle(&mut split_rng);
    let [n_train, n_val, _] = spec.split_sizes();
    let mut splits = vec![Split::Test; spec.n_samples];
    for (rank, &i) in order.iter().enumerate() {
        splits[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let diseases = &guideline.diseases()[..spec.n_diseases];
    let width = (spec.n_samples.max(1) - 1).to_string().len();
    let rows = exec.map(spec.n_samples, |i| -> Result<SamplePair> {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(i as u64 + 1);
        let view = (i % spec.n_views) as u32;
        let grades: Vec<SeverityGrade> = diseases.iter().map(|_| draw_grade(&mut rng)).collect();

        let mut latent = vec![0.0; spec.latent_dim()];
        latent[view as usize] = spec.view_scale;
        for (k, g) in grades.iter().enumerate() {
            latent[spec.n_views + k] = g.index() as f64 / 3.0;
        }
        for k in 0..spec.d_latent {
            let z: f64 = StandardNormal.sample(&mut rng);
            latent[spec.n_views + spec.n_diseases + k] = spec.noise_sigma * z;
        }
        let mut features = vec![0.0; spec.feature_dim];
        for (col, l) in map.iter().zip(&latent) {
            features.iter_mut().zip(col).for_each(|(f, c)| *f += l * c);
        }

        let mut measurements = Vec::with_capacity(diseases.len());
        for (d, &g) in diseases.iter().zip(&grades) {
            let value = draw_value(guideline, &d.measurement, g, &mut rng)?;
            measurements.push(guideline.record(&d.measurement, value)?);
        }
        let quantitative = rng.random_range(0..diseases.len());
        let mut caption = format!("{} view.", view_name(view));
        for (d, &g) in diseases.iter().zip(&grades) {
            write!(caption, " {}.", severity_phrase(g, &d.finding)).expect("string write");
        }
        let m = &measurements[quantitative];
        let qspec = guideline.spec(&m.key)?;
        write!(caption, " {} is {}.", qspec.display, qspec.format_value(m.value)).expect("string write");

        let outcome = rules.negate_caption(&caption, &measurements, guideline);
        Ok(SamplePair {
            id: format!("syn-{i:0width$}"),
            image_features: features,
            caption,
            negated_caption: outcome.text,
            view,
            grades: diseases
                .iter()
                .zip(&grades)
                .map(|(d, &g)| (d.id.clone(), g))
                .collect(),
            measurements,
            split: splits[i],
            negation_rules: outcome.rule_ids,
        })
    });
    rows.into_iter().collect()
}

pub fn to_ndjson(rows: &[SamplePair]) -> String {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r).expect("manifest rows serialize"));
        out.push('\n');
    }
    out
}

pub fn write_manifest(path: &Path, rows: &[SamplePair]) -> Result<()> {
    std::fs::write(path, to_ndjson(rows)).map_err(|e| Error::io(path, e))
}

/// A manifest line that failed to parse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MalformedRow {
    pub line: usize,
    pub message: String,
}

/// Parses every non-blank line; rows keep their 1-based line numbers.
pub fn parse_manifest(text: &str) -> (Vec<(usize, SamplePair)>, Vec<MalformedRow>) {
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<SamplePair>(line) {
            Ok(r) => rows.push((i + 1, r)),
            Err(e) => bad.push(MalformedRow {
                line: i + 1,
                message: e.to_string(),
            }),
        }
    }
    (rows, bad)
}

/// Reads a manifest, failing on the first malformed line.
pub fn read_manifest(path: &Path) -> Result<Vec<SamplePair>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let (rows, bad) = parse_manifest(&text);
    if let Some(b) = bad.first() {
        return Err(Error::Parse {
            path: path.display().to_string(),
            line: b.line,
            message: b.message.clone(),
        });
    }
    Ok(rows.into_iter().map(|(_, r)| r).collect())
}

/// All problems found on one manifest line (or, with `line == None`, in the
/// manifest as a whole).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub line: Option<usize>,
    pub id: Option<String>,
    pub problems: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub rows: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Tolerance on each split fraction for manifests of at least 20 rows.
const SPLIT_TOLERANCE: f64 = 0.05;

fn row_problems(
    row: &SamplePair,
    feature_dim: usize,
    guideline: &GuidelineTable,
    rules: &NegationRules,
) -> Vec<String> {
    let mut problems = Vec::new();
    if row.image_features.len() != feature_dim {
        problems.push(format!(
            "image has {} features, first row has {feature_dim}",
            row.image_features.len()
        ));
    }
    if row.image_features.iter().any(|v| !v.is_finite()) {
        problems.push("image features contain non-finite values".into());
    }
    if row.caption.trim().is_empty() {
        problems.push("empty caption".into());
    }
    for m in &row.measurements {
        if let Err(e) = guideline.validate_record(m) {
            problems.push(format!("measurement `{}`: {e}", m.key));
        }
    }
    for link in guideline.assess_caption(&row.caption, &row.measurements) {
        if link.verdict.verdict == Verdict::Inconsistent {
            problems.push(format!("caption clause `{}`: {}", link.clause, link.verdict.rationale));
        }
    }
    for (disease, &grade) in &row.grades {
        if guideline.disease(disease).is_none() {
            problems.push(format!("unknown disease `{disease}`"));
            continue;
        }
        match guideline.stated_grade(&row.caption, disease) {
            Some(stated) if stated == grade => {}
            Some(stated) => problems.push(format!("caption states {stated} {disease}, label is {grade}")),
            None => problems.push(format!("caption does not state a grade for `{disease}`")),
        }
    }
    let p = rules.polarity(&row.caption, &row.measurements, guideline);
    let q = rules.polarity(&row.negated_caption, &row.measurements, guideline);
    let opposite = matches!(
        (p, q),
        (Polarity::Positive, Polarity::Negative) | (Polarity::Negative, Polarity::Positive)
    );
    if !opposite {
        problems.push(format!("caption polarity {p:?} and negated polarity {q:?} are not opposite"));
    }
    problems
}

/// Checks every row invariant and the split proportions.
pub fn validate_manifest(
    text: &str,
    guideline: &GuidelineTable,
    rules: &NegationRules,
    exec: Exec,
) -> ValidationReport {
    let (rows, malformed) = parse_manifest(text);
    let mut violations: Vec<Violation> = malformed
        .into_iter()
        .map(|b| Violation {
            line: Some(b.line),
            id: None,
            problems: vec![format!("malformed row: {}", b.message)],
        })
        .collect();
    let feature_dim = rows.first().map_or(0, |(_, r)| r.image_features.len());
    let per_row = exec.map_slice(&rows, |(_, r)| row_problems(r, feature_dim, guideline, rules));
    let mut seen = HashSet::new();
    for ((line, row), mut problems) in rows.iter().zip(per_row) {
        if !seen.insert(row.id.as_str()) {
            problems.push(format!("duplicate id `{}`", row.id));
        }
        if !problems.is_empty() {
            violations.push(Violation {
                line: Some(*line),
                id: Some(row.id.clone()),
                problems,
            });
        }
    }
    violations.sort_by_key(|v| v.line);

    let n = rows.len();
    if n >= 20 {
        let defaults = SyntheticSpec::default().split_ratios;
        let counts = [Split::Train, Split::Val, Split::Test]
            .map(|s| rows.iter().filter(|(_, r)| r.split == s).count());
        let problems: Vec<String> = counts
            .iter()
            .zip(defaults)
            .zip(["train", "val", "test"])
            .filter(|((c, r), _)| ((**c as f64) / n as f64 - r).abs() > SPLIT_TOLERANCE)
            .map(|((c, r), name)| format!("{name} split has {c} of {n} rows, expected fraction {r}"))
            .collect();
        if !problems.is_empty() {
            violations.push(Violation {
                line: None,
                id: None,
                problems,
            });
        }
    }
    ValidationReport { rows: n, violations }
}
