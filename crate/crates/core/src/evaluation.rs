//! Zero-shot prompt classification, retrieval recall@k, weighted k-NN and
//! the metric report.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::OnceLock;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, EmbeddingBatch, Role, Temperature};
use crate::encoders::tokenize;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::guideline::{binarize_disease, SeverityGrade};
use crate::objectives::sigmoid;
use crate::synthetic::SamplePair;
use crate::training::TrainState;

const BUILTIN_PROMPTS: &str = include_str!("../data/prompts.toml");

pub const DEFAULT_KNN_K: usize = 20;
pub const DEFAULT_KNN_TEMPERATURE: f64 = 0.07;
pub const RECALL_KS: [usize; 2] = [5, 10];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptPair {
    pub disease: String,
    pub positive: String,
    pub negative: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PromptFile {
    version: u32,
    prompt: Vec<PromptPair>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptSet {
    pairs: Vec<PromptPair>,
}

impl PromptSet {
    pub fn builtin() -> &'static PromptSet {
        static SET: OnceLock<PromptSet> = OnceLock::new();
        SET.get_or_init(|| PromptSet::from_toml_str(BUILTIN_PROMPTS, "builtin prompts.toml").expect("builtin prompts are valid"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let file: PromptFile = toml::from_str(text).map_err(|e| Error::Parse {
            path: origin.to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        for p in &file.prompt {
            if p.positive == p.negative {
                return Err(Error::Config(format!("{origin}: prompts for `{}` are identical", p.disease)));
            }
            if p.positive.trim().is_empty() || p.negative.trim().is_empty() {
                return Err(Error::Config(format!("{origin}: empty prompt for `{}`", p.disease)));
            }
        }
        Ok(Self { pairs: file.prompt })
    }

    pub fn pairs(&self) -> &[PromptPair] {
        &self.pairs
    }

    pub fn get(&self, disease: &str) -> Option<&PromptPair> {
        self.pairs.iter().find(|p| p.disease == disease)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = dot(v, v).sqrt();
    if n == 0.0 {
        return Err(Error::ZeroRow { row: 0 });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Two-way softmax probability of the positive prompt for every image row.
pub fn prompt_probabilities(
    images: &EmbeddingBatch,
    positive: &[f64],
    negative: &[f64],
    tau: Temperature,
) -> Result<Vec<f64>> {
    if positive.len() != images.dim() || negative.len() != images.dim() {
        return Err(Error::DimensionMismatch(format!(
            "prompt dims {}/{} vs image dim {}",
            positive.len(),
            negative.len(),
            images.dim()
        )));
    }
    let zi = normalize(images)?;
    let (zp, zn) = (unit(positive)?, unit(negative)?);
    let t = tau.value();
    Ok(zi
        .rows()
        .rows()
        .into_iter()
        .map(|r| {
            let r = r.as_slice().expect("standard layout");
            sigmoid(t * (dot(r, &zp) - dot(r, &zn)))
        })
        .collect())
}

/// Positive-prompt probabilities of `images` under `model`.
pub fn zero_shot_scores(
    images: &EmbeddingBatch,
    pair: &PromptPair,
    model: &TrainState,
    exec: Exec,
) -> Result<Vec<f64>> {
    if images.batch_size() == 0 {
        return Err(Error::EmptyBatch);
    }
    let texts = [tokenize(&pair.positive, &model.vocab), tokenize(&pair.negative, &model.vocab)];
    let z = model.encoder.encode_texts(&texts, Role::Text, exec)?;
    let pos = z.row(0).to_vec();
    let neg = z.row(1).to_vec();
    prompt_probabilities(images, &pos, &neg, model.tau)
}

/// Argmax label of a two-way prompt probability; exact ties are negative.
pub fn zero_shot_label(p_pos: f64) -> bool {
    p_pos > 0.5
}

/// Mann-Whitney AUC with ties counted one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += order[i..=j].iter().filter(|&&k| labels[k]).count() as f64 * mid_rank;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos * n_neg) as f64)
}

/// Binary confusion counts and derived scores. Undefined ratios (0/0) are
/// reported as 0 and flagged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BinaryMetrics {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub precision_undefined: bool,
    pub recall_undefined: bool,
}

pub fn precision_recall_f1(pred: &[bool], labels: &[bool]) -> Result<BinaryMetrics> {
    if pred.len() != labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            pred.len(),
            labels.len()
        )));
    }
    let mut m = BinaryMetrics::default();
    for (&p, &l) in pred.iter().zip(labels) {
        match (p, l) {
            (true, true) => m.tp += 1,
            (true, false) => m.fp += 1,
            (false, true) => m.fn_ += 1,
            (false, false) => m.tn += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { (0.0, true) } else { (num as f64 / den as f64, false) };
    (m.precision, m.precision_undefined) = ratio(m.tp, m.tp + m.fp);
    (m.recall, m.recall_undefined) = ratio(m.tp, m.tp + m.fn_);
    m.accuracy = ratio(m.tp + m.tn, pred.len()).0;
    m.f1 = if m.precision + m.recall > 0.0 {
        2.0 * m.precision * m.recall / (m.precision + m.recall)
    } else {
        0.0
    };
    Ok(m)
}

fn unit_rows(batch: &EmbeddingBatch) -> Result<Array2<f64>> {
    Ok(normalize(batch)?.into_rows())
}

/// Fraction of images whose paired text (same row index) is among the `k`
/// most similar texts; ties rank the lower index first.
pub fn retrieval_recall_at_k(images: &EmbeddingBatch, texts: &EmbeddingBatch, k: usize) -> Result<f64> {
    let n = images.batch_size();
    if texts.batch_size() != n || texts.dim() != images.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} images vs {}x{} texts",
            n,
            images.dim(),
            texts.batch_size(),
            texts.dim()
        )));
    }
    if k < 1 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    let s = unit_rows(images)?.dot(&unit_rows(texts)?.t());
    let hits = (0..n)
        .filter(|&i| {
            let own = s[[i, i]];
            let ahead = (0..n)
                .filter(|&j| s[[i, j]] > own || (s[[i, j]] == own && j < i))
                .count();
            ahead < k
        })
        .count();
    Ok(hits as f64 / n as f64)
}

/// Similarity-weighted k-NN vote (weights `exp(sim / temperature)`) over the
/// `min(k, N)` most similar training rows. Ties go to the lower label.
pub fn knn_classify(
    train: &EmbeddingBatch,
    train_labels: &[u32],
    queries: &EmbeddingBatch,
    k: usize,
    temperature: f64,
    exec: Exec,
) -> Result<Vec<u32>> {
    if train.batch_size() == 0 || train_labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if train_labels.len() != train.batch_size() || train.dim() != queries.dim() {
        return Err(Error::DimensionMismatch(format!(
            "{} train rows, {} labels, dims {} vs {}",
            train.batch_size(),
            train_labels.len(),
            train.dim(),
            queries.dim()
        )));
    }
    if k == 0 {
        return Err(Error::InvalidK { k, n: train.batch_size() });
    }
    let tr = unit_rows(train)?;
    let q = unit_rows(queries)?;
    let sims = q.dot(&tr.t());
    let keep = k.min(tr.nrows());
    Ok(exec.map(q.nrows(), |i| {
        let row = sims.row(i);
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let mut votes: BTreeMap<u32, f64> = BTreeMap::new();
        for &j in &idx[..keep] {
            *votes.entry(train_labels[j]).or_default() += (row[j] / temperature).exp();
        }
        let mut best = (u32::MAX, f64::NEG_INFINITY);
        for (&label, &w) in &votes {
            if w > best.1 {
                best = (label, w);
            }
        }
        best.0
    }))
}

/// Multi-class accuracy, balanced accuracy, macro F1 and the confusion grid
/// (rows are true labels, columns predictions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub labels: Vec<u32>,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<usize>>,
}

pub fn classification_metrics(pred: &[u32], truth: &[u32]) -> Result<ClassificationMetrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut labels: Vec<u32> = pred.iter().chain(truth).copied().collect();
    labels.sort_unstable();
    labels.dedup();
    let pos = |l: u32| labels.binary_search(&l).expect("label present");
    let mut confusion = vec![vec![0; labels.len()]; labels.len()];
    for (&p, &t) in pred.iter().zip(truth) {
        confusion[pos(t)][pos(p)] += 1;
    }
    let correct: usize = (0..labels.len()).map(|i| confusion[i][i]).sum();
    let mut recalls = Vec::new();
    let mut f1s = Vec::new();
    for c in 0..labels.len() {
        let tp = confusion[c][c] as f64;
        let actual: usize = confusion[c].iter().sum();
        let predicted: usize = confusion.iter().map(|r| r[c]).sum();
        if actual > 0 {
            recalls.push(tp / actual as f64);
        }
        let denom = (actual + predicted) as f64;
        f1s.push(if denom > 0.0 { 2.0 * tp / denom } else { 0.0 });
    }
    Ok(ClassificationMetrics {
        labels,
        accuracy: correct as f64 / pred.len() as f64,
        balanced_accuracy: recalls.iter().sum::<f64>() / recalls.len() as f64,
        macro_f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
        confusion,
    })
}

/// Mean cosine similarity of same-view pairs minus that of different-view
/// pairs.
pub fn view_similarity_margin(images: &EmbeddingBatch, views: &[u32]) -> Result<f64> {
    let z = unit_rows(images)?;
    let s = z.dot(&z.t());
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..views.len() {
        for j in (0..views.len()).filter(|&j| j != i) {
            if views[i] == views[j] {
                intra += s[[i, j]];
                n_intra += 1;
            } else {
                inter += s[[i, j]];
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::Config("view margin needs both same-view and cross-view pairs".into()));
    }
    Ok(intra / n_intra as f64 - inter / n_inter as f64)
}

/// Mean `sigmoid(tau * <t_i, n_i>)` over caption / negation pairs.
pub fn mean_negation_probability(texts: &EmbeddingBatch, negated: &EmbeddingBatch, tau: Temperature) -> Result<f64> {
    let (t, n) = (unit_rows(texts)?, unit_rows(negated)?);
    if t.dim() != n.dim() {
        return Err(Error::DimensionMismatch(format!("{:?} vs {:?}", t.dim(), n.dim())));
    }
    let total: f64 = t
        .rows()
        .into_iter()
        .zip(n.rows())
        .map(|(a, b)| sigmoid(tau.value() * a.dot(&b)))
        .sum();
    Ok(total / t.nrows() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiseaseMetrics {
    pub disease: String,
    pub positives: usize,
    pub negatives: usize,
    /// `None` when the split holds a single class.
    pub auc: Option<f64>,
    pub binary: BinaryMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub corpus: usize,
    pub image_to_text: BTreeMap<String, f64>,
    pub text_to_image: BTreeMap<String, f64>,
    pub chance: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KnnMetrics {
    pub k: usize,
    pub temperature: f64,
    pub train_size: usize,
    pub metrics: ClassificationMetrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub view_similarity_margin: Option<f64>,
    pub mean_negation_probability: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub queries: usize,
    pub positive_threshold: SeverityGrade,
    pub diseases: Vec<DiseaseMetrics>,
    pub macro_auc: Option<f64>,
    /// Diseases left out of `macro_auc` because their AUC is undefined.
    pub auc_excluded: Vec<String>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub retrieval: RetrievalMetrics,
    pub knn: KnnMetrics,
    pub diagnostics: Diagnostics,
}

impl MetricReport {
    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.retrieval.image_to_text.get(&format!("r@{k}")).copied()
    }

    pub fn chance_at(&self, k: usize) -> Option<f64> {
        self.retrieval.chance.get(&format!("r@{k}")).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub positive_threshold: SeverityGrade,
    pub knn_k: usize,
    pub knn_temperature: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            positive_threshold: crate::guideline::DEFAULT_POSITIVE_THRESHOLD,
            knn_k: DEFAULT_KNN_K,
            knn_temperature: DEFAULT_KNN_TEMPERATURE,
        }
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Zero-shot, retrieval, k-NN and diagnostics of `model` on `eval_rows`, with
/// `train_rows` as the k-NN reference set.
pub fn evaluate(
    model: &TrainState,
    train_rows: &[SamplePair],
    eval_rows: &[SamplePair],
    prompts: &PromptSet,
    options: &EvalOptions,
    exec: Exec,
) -> Result<MetricReport> {
    if eval_rows.is_empty() || train_rows.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let encode_images = |rows: &[SamplePair]| -> Result<EmbeddingBatch> {
        let imgs = rows.iter().map(SamplePair::image).collect::<Result<Vec<_>>>()?;
        model.encoder.encode_images(&imgs, exec)
    };
    let encode_texts = |texts: Vec<&str>, role: Role| -> Result<EmbeddingBatch> {
        let toks: Vec<_> = texts.into_iter().map(|t| tokenize(t, &model.vocab)).collect();
        model.encoder.encode_texts(&toks, role, exec)
    };
    let zi = encode_images(eval_rows)?;
    let zt = encode_texts(eval_rows.iter().map(|r| r.caption.as_str()).collect(), Role::Text)?;
    let zn = encode_texts(
        eval_rows.iter().map(|r| r.negated_caption.as_str()).collect(),
        Role::NegatedText,
    )?;

    let mut disease_ids: Vec<&str> = eval_rows
        .iter()
        .flat_map(|r| r.grades.keys().map(String::as_str))
        .collect();
    disease_ids.sort_unstable();
    disease_ids.dedup();
    let mut diseases = Vec::new();
    for d in disease_ids {
        let pair = prompts.get(d).ok_or_else(|| Error::MissingPrompt(d.to_string()))?;
        let scores = zero_shot_scores(&zi, pair, model, exec)?;
        let labels: Vec<bool> = eval_rows
            .iter()
            .map(|r| r.grades.get(d).is_some_and(|&g| binarize_disease(g, options.positive_threshold)))
            .collect();
        let pred: Vec<bool> = scores.iter().map(|&p| zero_shot_label(p)).collect();
        let positives = labels.iter().filter(|&&l| l).count();
        diseases.push(DiseaseMetrics {
            disease: d.to_string(),
            positives,
            negatives: labels.len() - positives,
            auc: match auc(&scores, &labels) {
                Ok(a) => Some(a),
                Err(Error::AucUndefined) => None,
                Err(e) => return Err(e),
            },
            binary: precision_recall_f1(&pred, &labels)?,
        });
    }
    let defined: Vec<f64> = diseases.iter().filter_map(|d| d.auc).collect();
    let auc_excluded = diseases
        .iter()
        .filter(|d| d.auc.is_none())
        .map(|d| d.disease.clone())
        .collect();

    let n = eval_rows.len();
    let mut retrieval = RetrievalMetrics {
        corpus: n,
        image_to_text: BTreeMap::new(),
        text_to_image: BTreeMap::new(),
        chance: BTreeMap::new(),
    };
    for k in RECALL_KS {
        let kk = k.min(n);
        let name = format!("r@{k}");
        retrieval.image_to_text.insert(name.clone(), retrieval_recall_at_k(&zi, &zt, kk)?);
        retrieval.text_to_image.insert(name.clone(), retrieval_recall_at_k(&zt, &zi, kk)?);
        retrieval.chance.insert(name, kk as f64 / n as f64);
    }

    let ztrain = encode_images(train_rows)?;
    let train_views: Vec<u32> = train_rows.iter().map(|r| r.view).collect();
    let eval_views: Vec<u32> = eval_rows.iter().map(|r| r.view).collect();
    let knn_pred = knn_classify(&ztrain, &train_views, &zi, options.knn_k, options.knn_temperature, exec)?;

    Ok(MetricReport {
        queries: n,
        positive_threshold: options.positive_threshold,
        macro_auc: (!defined.is_empty()).then(|| mean(defined.iter().copied())),
        auc_excluded,
        macro_precision: mean(diseases.iter().map(|d| d.binary.precision)),
        macro_recall: mean(diseases.iter().map(|d| d.binary.recall)),
        macro_f1: mean(diseases.iter().map(|d| d.binary.f1)),
        diseases,
        retrieval,
        knn: KnnMetrics {
            k: options.knn_k,
            temperature: options.knn_temperature,
            train_size: train_rows.len(),
            metrics: classification_metrics(&knn_pred, &eval_views)?,
        },
        diagnostics: Diagnostics {
            view_similarity_margin: view_similarity_margin(&zi, &eval_views).ok(),
            mean_negation_probability: mean_negation_probability(&zt, &zn, model.tau)?,
            temperature: model.tau.value(),
        },
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

/// Aligned plain-text rendering of a report.
pub fn render_table(report: &MetricReport) -> String {
    let mut s = String::new();
    let w = report
        .diseases
        .iter()
        .map(|d| d.disease.len())
        .max()
        .unwrap_or(7)
        .max("disease".len());
    writeln!(s, "zero-shot disease classification ({} queries, positive > {})", report.queries, report.positive_threshold).unwrap();
    writeln!(s, "{:<w$}  {:>4}  {:>4}  {:>7}  {:>9}  {:>7}  {:>7}", "disease", "pos", "neg", "auc", "precision", "recall", "f1").unwrap();
    for d in &report.diseases {
        let flag = if d.binary.precision_undefined { "*" } else { " " };
        writeln!(
            s,
            "{:<w$}  {:>4}  {:>4}  {:>7}  {:>8.4}{flag}  {:>7.4}  {:>7.4}",
            d.disease,
            d.positives,
            d.negatives,
            fmt_opt(d.auc),
            d.binary.precision,
            d.binary.recall,
            d.binary.f1
        )
        .unwrap();
    }
    writeln!(
        s,
        "{:<w$}  {:>4}  {:>4}  {:>7}  {:>9.4}  {:>7.4}  {:>7.4}",
        "macro",
        "",
        "",
        fmt_opt(report.macro_auc),
        report.macro_precision,
        report.macro_recall,
        report.macro_f1
    )
    .unwrap();
    if report.diseases.iter().any(|d| d.binary.precision_undefined) {
        writeln!(s, "* precision undefined (no positive predictions), reported as 0").unwrap();
    }
    if !report.auc_excluded.is_empty() {
        writeln!(s, "AUC undefined (single class) for: {}", report.auc_excluded.join(", ")).unwrap();
    }
    writeln!(s).unwrap();
    writeln!(s, "retrieval (corpus {})", report.retrieval.corpus).unwrap();
    writeln!(s, "{:<8}  {:>13}  {:>13}  {:>8}", "k", "image->text", "text->image", "chance").unwrap();
    for k in RECALL_KS {
        let name = format!("r@{k}");
        let r = &report.retrieval;
        if let (Some(a), Some(b), Some(c)) = (r.image_to_text.get(&name), r.text_to_image.get(&name), r.chance.get(&name)) {
            writeln!(s, "{name:<8}  {a:>13.4}  {b:>13.4}  {c:>8.4}").unwrap();
        }
    }
    writeln!(s).unwrap();
    let k = &report.knn;
    writeln!(s, "k-NN view classification (k={}, T={}, {} reference rows)", k.k, k.temperature, k.train_size).unwrap();
    writeln!(
        s,
        "accuracy {:.4}  balanced accuracy {:.4}  macro F1 {:.4}",
        k.metrics.accuracy, k.metrics.balanced_accuracy, k.metrics.macro_f1
    )
    .unwrap();
    writeln!(s).unwrap();
    writeln!(
        s,
        "view similarity margin {}  mean negation probability {:.4}  temperature {:.3}",
        fmt_opt(report.diagnostics.view_similarity_margin),
        report.diagnostics.mean_negation_probability,
        report.diagnostics.temperature
    )
    .unwrap();
    s
}

fn confusion_csv(header: &[String], grid: &[Vec<usize>]) -> String {
    let mut s = format!("true\\pred,{}\n", header.join(","));
    for (name, row) in header.iter().zip(grid) {
        let cells: Vec<String> = row.iter().map(usize::to_string).collect();
        writeln!(s, "{name},{}", cells.join(",")).unwrap();
    }
    s
}

/// Writes `report.json`, `report.txt`, one `confusion_<disease>.csv` per
/// disease and `knn_confusion.csv` into `dir`.
pub fn write_report(dir: &Path, report: &MetricReport) -> Result<()> {
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("report.json", serde_json::to_string_pretty(report).expect("report serializes") + "\n")?;
    write("report.txt", render_table(report))?;
    let binary = ["negative".to_string(), "positive".to_string()];
    for d in &report.diseases {
        let b = &d.binary;
        write(
            &format!("confusion_{}.csv", d.disease),
            confusion_csv(&binary, &[vec![b.tn, b.fp], vec![b.fn_, b.tp]]),
        )?;
    }
    let labels: Vec<String> = report.knn.metrics.labels.iter().map(u32::to_string).collect();
    write("knn_confusion.csv", confusion_csv(&labels, &report.knn.metrics.confusion))
}
