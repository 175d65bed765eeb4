//! Embedding batches, view labels, the learnable temperature, and similarity
//! matrices.

use ndarray::{Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Upper clamp on the temperature, applied to the log parameter.
pub const MAX_TEMPERATURE: f64 = 100.0;

/// CLIP initialisation: tau = 1 / 0.07.
pub const INIT_TEMPERATURE: f64 = 1.0 / 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Image,
    Text,
    NegatedText,
}

/// A `B x d` matrix of embedding rows tagged with the tower that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    rows: Array2<f64>,
    role: Role,
}

impl EmbeddingBatch {
    pub fn new(rows: Array2<f64>, role: Role) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(Error::EmptyBatch);
        }
        if let Some(index) = rows.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: format!("{role:?} embedding batch"),
                index,
            });
        }
        Ok(Self { rows, role })
    }

    pub fn from_rows(rows: &[Vec<f64>], role: Role) -> Result<Self> {
        let d = rows.first().map(Vec::len).ok_or(Error::EmptyBatch)?;
        if let Some(i) = rows.iter().position(|r| r.len() != d) {
            return Err(Error::DimensionMismatch(format!(
                "row {i} has {} columns, expected {d}",
                rows[i].len()
            )));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let arr = Array2::from_shape_vec((rows.len(), d), flat)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        Self::new(arr, role)
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.rows
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.rows.row(i)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn batch_size(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn into_rows(self) -> Array2<f64> {
        self.rows
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }
}

/// Scales every row to unit L2 norm.
pub fn normalize(batch: &EmbeddingBatch) -> Result<EmbeddingBatch> {
    let mut rows = batch.rows.clone();
    for (i, mut row) in rows.axis_iter_mut(Axis(0)).enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroRow { row: i });
        }
        row.mapv_inplace(|v| v / norm);
    }
    Ok(EmbeddingBatch {
        rows,
        role: batch.role,
    })
}

/// View labels for the rows of an image batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViewLabelBatch(Vec<u32>);

impl ViewLabelBatch {
    pub fn new(labels: Vec<u32>) -> Self {
        Self(labels)
    }

    pub fn labels(&self) -> &[u32] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Learnable temperature, stored as its logarithm.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    log_value: f64,
}

impl Default for Temperature {
    fn default() -> Self {
        Self::from_value(INIT_TEMPERATURE)
    }
}

impl Temperature {
    pub fn from_log(log_value: f64) -> Self {
        let mut t = Self { log_value };
        t.clamp();
        t
    }

    pub fn from_value(value: f64) -> Self {
        assert!(value > 0.0, "temperature must be positive");
        Self::from_log(value.ln())
    }

    pub fn log_value(&self) -> f64 {
        self.log_value
    }

    pub fn value(&self) -> f64 {
        self.log_value.exp()
    }

    /// Caps the temperature at [`MAX_TEMPERATURE`].
    pub fn clamp(&mut self) {
        self.log_value = self.log_value.min(MAX_TEMPERATURE.ln());
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    ImageText,
    TextImage,
    ImageImage,
    ImageImageMasked,
    /// Any other pairing of roles (text-text, text-negated, ...).
    Other,
}

impl SimilarityKind {
    fn from_roles(a: Role, b: Role) -> Self {
        match (a, b) {
            (Role::Image, Role::Text) => SimilarityKind::ImageText,
            (Role::Text, Role::Image) => SimilarityKind::TextImage,
            (Role::Image, Role::Image) => SimilarityKind::ImageImage,
            _ => SimilarityKind::Other,
        }
    }

    fn transposed(self) -> Self {
        match self {
            SimilarityKind::ImageText => SimilarityKind::TextImage,
            SimilarityKind::TextImage => SimilarityKind::ImageText,
            other => other,
        }
    }
}

/// Temperature-scaled pairwise similarities.
///
/// A masked matrix stores `-inf` on its diagonal as a marker; the diagonal is
/// skipped (never exponentiated) by every softmax that consumes it.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    entries: Array2<f64>,
    kind: SimilarityKind,
}

impl SimilarityMatrix {
    pub fn new(entries: Array2<f64>, kind: SimilarityKind) -> Self {
        Self { entries, kind }
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn kind(&self) -> SimilarityKind {
        self.kind
    }

    pub fn is_masked(&self) -> bool {
        self.kind == SimilarityKind::ImageImageMasked
    }

    pub fn is_square(&self) -> bool {
        self.entries.nrows() == self.entries.ncols()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[[i, j]]
    }

    pub fn transpose(&self) -> Self {
        Self {
            entries: self.entries.t().to_owned(),
            kind: self.kind.transposed(),
        }
    }

    /// Whether entry `(i, j)` takes part in softmax sums.
    pub fn is_live(&self, i: usize, j: usize) -> bool {
        !(self.is_masked() && i == j)
    }

    /// Numerically stable log-sum-exp over the live entries of row `i`.
    /// Returns `-inf` when the row has no live entries.
    pub fn row_logsumexp(&self, i: usize) -> f64 {
        let live = || {
            self.entries
                .row(i)
                .into_iter()
                .enumerate()
                .filter(move |&(j, _)| self.is_live(i, j))
                .map(|(_, &v)| v)
        };
        let max = live().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return max;
        }
        max + live().map(|v| (v - max).exp()).sum::<f64>().ln()
    }

    /// Row-wise softmax over live entries; masked entries get probability 0.
    pub fn row_softmax(&self) -> Array2<f64> {
        let mut out = Array2::zeros(self.entries.raw_dim());
        for i in 0..self.entries.nrows() {
            let lse = self.row_logsumexp(i);
            if lse == f64::NEG_INFINITY {
                continue;
            }
            for j in 0..self.entries.ncols() {
                if self.is_live(i, j) {
                    out[[i, j]] = (self.entries[[i, j]] - lse).exp();
                }
            }
        }
        out
    }
}

/// `entries[i][j] = tau * <a_i, b_j>`.
pub fn similarity(
    a: &EmbeddingBatch,
    b: &EmbeddingBatch,
    tau: Temperature,
) -> Result<SimilarityMatrix> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedding dims {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let entries = a.rows.dot(&b.rows.t()) * tau.value();
    Ok(SimilarityMatrix {
        entries,
        kind: SimilarityKind::from_roles(a.role, b.role),
    })
}

/// Removes self-similarity from an image-image matrix.
pub fn mask_self_similarity(s: &SimilarityMatrix) -> Result<SimilarityMatrix> {
    if !s.is_square() {
        return Err(Error::NotSquare {
            rows: s.entries.nrows(),
            cols: s.entries.ncols(),
        });
    }
    if s.kind != SimilarityKind::ImageImage {
        return Err(Error::WrongKind {
            expected: "image_image".into(),
            found: format!("{:?}", s.kind),
        });
    }
    let mut entries = s.entries.clone();
    entries.diag_mut().fill(f64::NEG_INFINITY);
    Ok(SimilarityMatrix {
        entries,
        kind: SimilarityKind::ImageImageMasked,
    })
}
