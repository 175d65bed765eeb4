//! Tokenizer, vocabulary, and the two small encoder towers.
//!
//! Image tower: `tanh(W1 x + b1)` followed by an affine map to the embedding.
//! Text tower: the mean of unigram and hashed-bigram feature embeddings
//! followed by an affine map. Bigram features let a bag-of-features encoder
//! bind a severity word to the finding that follows it.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingBatch, Role};
use crate::error::{Error, Result};
use crate::exec::Exec;

pub const UNKNOWN_TOKEN: &str = "<unk>";

/// Word list with `<unk>` at id 0; ids follow sorted order of the remaining
/// words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

/// Lowercased whitespace-delimited words with surrounding punctuation
/// stripped. Interior punctuation (decimals, `e/e'`) is kept.
pub fn split_words(raw: &str) -> impl Iterator<Item = String> + '_ {
    raw.split_whitespace()
        .map(|w| w.trim_matches(|c: char| matches!(c, '.' | ',' | ';' | ':' | '(' | ')' | '"')))
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Vocab {
    pub fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut list = vec![UNKNOWN_TOKEN.to_string()];
        let mut seen: BTreeSet<String> = BTreeSet::new();
        for w in words {
            if w != UNKNOWN_TOKEN && !w.is_empty() {
                seen.insert(w);
            }
        }
        list.extend(seen);
        let index = list
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Self { words: list, index }
    }

    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        Self::from_words(texts.into_iter().flat_map(split_words).collect::<Vec<_>>())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn unknown_id(&self) -> u32 {
        0
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Newline-delimited word list, `<unk>` first.
    pub fn to_text(&self) -> String {
        let mut s = self.words.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Self {
        Self::from_words(text.lines().map(str::to_string).collect::<Vec<_>>())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::from_text(&text))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextInput {
    pub tokens: Vec<u32>,
    pub raw: String,
}

pub fn tokenize(raw: &str, vocab: &Vocab) -> TextInput {
    TextInput {
        tokens: split_words(raw).map(|w| vocab.id(&w)).collect(),
        raw: raw.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageInput {
    pub features: Vec<f64>,
    pub id: String,
}

impl ImageInput {
    pub fn new(features: Vec<f64>, id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if features.is_empty() {
            return Err(Error::DimensionMismatch(format!("image `{id}` has no features")));
        }
        if let Some(index) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: format!("image `{id}`"),
                index,
            });
        }
        Ok(Self { features, id })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub token_dim: usize,
    pub bigram_buckets: usize,
    pub max_tokens: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            hidden_dim: 64,
            embed_dim: 32,
            token_dim: 32,
            bigram_buckets: 4096,
            max_tokens: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSlice {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
}

impl ParamSlice {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of every parameter block inside the flat vector.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Layout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    unigram: usize,
    bigram: usize,
    w3: usize,
    b3: usize,
    total: usize,
}

impl Layout {
    fn new(c: &EncoderConfig, vocab_size: usize) -> (Self, Vec<ParamSlice>) {
        let shapes: [(&str, Vec<usize>); 8] = [
            ("image.w1", vec![c.hidden_dim, c.feature_dim]),
            ("image.b1", vec![c.hidden_dim]),
            ("image.w2", vec![c.embed_dim, c.hidden_dim]),
            ("image.b2", vec![c.embed_dim]),
            ("text.unigram", vec![vocab_size, c.token_dim]),
            ("text.bigram", vec![c.bigram_buckets, c.token_dim]),
            ("text.w", vec![c.embed_dim, c.token_dim]),
            ("text.b", vec![c.embed_dim]),
        ];
        let mut slices = Vec::new();
        let mut offset = 0;
        for (name, shape) in shapes {
            let s = ParamSlice {
                name: name.to_string(),
                offset,
                shape,
            };
            offset += s.len();
            slices.push(s);
        }
        let o: Vec<usize> = slices.iter().map(|s| s.offset).collect();
        (
            Self {
                w1: o[0],
                b1: o[1],
                w2: o[2],
                b2: o[3],
                unigram: o[4],
                bigram: o[5],
                w3: o[6],
                b3: o[7],
                total: offset,
            },
            slices,
        )
    }

    fn image_range(&self) -> std::ops::Range<usize> {
        self.w1..self.unigram
    }

    fn text_range(&self) -> std::ops::Range<usize> {
        self.unigram..self.total
    }
}

/// Flat parameter vector with named slices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub values: Vec<f64>,
    pub slices: Vec<ParamSlice>,
    pub seed: u64,
}

impl EncoderParams {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.slices
            .iter()
            .find(|s| s.name == name)
            .map(|s| &self.values[s.range()])
    }
}

fn bigram_bucket(a: u32, b: u32, buckets: usize) -> usize {
    const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = FNV_OFFSET;
    for byte in a.to_le_bytes().into_iter().chain(b.to_le_bytes()) {
        h ^= u64::from(byte);
        h = h.wrapping_mul(FNV_PRIME);
    }
    (h % buckets as u64) as usize
}

/// Image and text towers sharing one flat parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder {
    config: EncoderConfig,
    vocab_size: usize,
    layout: Layout,
    params: EncoderParams,
}

impl DualEncoder {
    pub fn init(config: EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        if [
            config.feature_dim,
            config.hidden_dim,
            config.embed_dim,
            config.token_dim,
            config.bigram_buckets,
            config.max_tokens,
            vocab_size,
        ]
        .contains(&0)
        {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        let (layout, slices) = Layout::new(&config, vocab_size);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; layout.total];
        let mut fill = |range: std::ops::Range<usize>, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            for v in &mut values[range] {
                *v = dist.sample(&mut rng);
            }
        };
        fill(layout.w1..layout.b1, (1.0 / config.feature_dim as f64).sqrt());
        fill(layout.w2..layout.b2, (1.0 / config.hidden_dim as f64).sqrt());
        fill(layout.unigram..layout.w3, 1.0);
        fill(layout.w3..layout.b3, (1.0 / config.token_dim as f64).sqrt());
        Ok(Self {
            config,
            vocab_size,
            layout,
            params: EncoderParams {
                values,
                slices,
                seed,
            },
        })
    }

    /// Rebuilds an encoder from stored parameters, checking the layout.
    pub fn from_params(config: EncoderConfig, vocab_size: usize, params: EncoderParams) -> Result<Self> {
        let (layout, slices) = Layout::new(&config, vocab_size);
        if slices != params.slices || params.values.len() != layout.total {
            return Err(Error::Checkpoint(
                "parameter slices do not match the encoder configuration".into(),
            ));
        }
        if let Some(index) = params.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                tensor: "encoder parameters".into(),
                index,
            });
        }
        Ok(Self {
            config,
            vocab_size,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params.values
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    fn check_images(&self, inputs: &[ImageInput]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        if let Some(bad) = inputs.iter().find(|x| x.features.len() != self.config.feature_dim) {
            return Err(Error::DimensionMismatch(format!(
                "image `{}` has {} features, encoder expects {}",
                bad.id,
                bad.features.len(),
                self.config.feature_dim
            )));
        }
        Ok(())
    }

    fn check_texts(&self, inputs: &[TextInput]) -> Result<()> {
        if inputs.is_empty() {
            return Err(Error::EmptyBatch);
        }
        for t in inputs {
            if t.tokens.is_empty() {
                return Err(Error::EmptyText);
            }
            if t.tokens.len() > self.config.max_tokens {
                return Err(Error::TextTooLong {
                    len: t.tokens.len(),
                    max: self.config.max_tokens,
                });
            }
            if let Some(&id) = t.tokens.iter().find(|&&id| id as usize >= self.vocab_size) {
                return Err(Error::OutOfVocabulary {
                    id,
                    size: self.vocab_size,
                });
            }
        }
        Ok(())
    }

    fn image_hidden(&self, x: &[f64]) -> Vec<f64> {
        let (f, h) = (self.config.feature_dim, self.config.hidden_dim);
        let p = &self.params.values;
        (0..h)
            .map(|r| {
                let w = &p[self.layout.w1 + r * f..self.layout.w1 + (r + 1) * f];
                let z: f64 = w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + p[self.layout.b1 + r];
                z.tanh()
            })
            .collect()
    }

    fn affine_out(&self, w_off: usize, b_off: usize, input: &[f64]) -> Vec<f64> {
        let n = input.len();
        let p = &self.params.values;
        (0..self.config.embed_dim)
            .map(|r| {
                let w = &p[w_off + r * n..w_off + (r + 1) * n];
                w.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + p[b_off + r]
            })
            .collect()
    }

    fn image_one(&self, x: &[f64]) -> Vec<f64> {
        let h = self.image_hidden(x);
        self.affine_out(self.layout.w2, self.layout.b2, &h)
    }

    /// Parameter offsets of the feature rows a text averages over.
    fn text_feature_rows(&self, tokens: &[u32]) -> Vec<usize> {
        let d = self.config.token_dim;
        let mut rows: Vec<usize> = tokens
            .iter()
            .map(|&t| self.layout.unigram + t as usize * d)
            .collect();
        rows.extend(tokens.windows(2).map(|w| {
            self.layout.bigram + bigram_bucket(w[0], w[1], self.config.bigram_buckets) * d
        }));
        rows
    }

    fn text_pooled(&self, tokens: &[u32]) -> Vec<f64> {
        let d = self.config.token_dim;
        let rows = self.text_feature_rows(tokens);
        let mut m = vec![0.0; d];
        for &r in &rows {
            for (acc, v) in m.iter_mut().zip(&self.params.values[r..r + d]) {
                *acc += v;
            }
        }
        let inv = 1.0 / rows.len() as f64;
        m.iter_mut().for_each(|v| *v *= inv);
        m
    }

    fn text_one(&self, tokens: &[u32]) -> Vec<f64> {
        let m = self.text_pooled(tokens);
        self.affine_out(self.layout.w3, self.layout.b3, &m)
    }

    fn to_batch(&self, rows: Vec<Vec<f64>>, role: Role) -> Result<EmbeddingBatch> {
        let b = rows.len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        let arr = Array2::from_shape_vec((b, self.config.embed_dim), flat)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
        EmbeddingBatch::new(arr, role)
    }

    pub fn encode_images(&self, inputs: &[ImageInput], exec: Exec) -> Result<EmbeddingBatch> {
        self.check_images(inputs)?;
        let rows = exec.map_slice(inputs, |x| self.image_one(&x.features));
        self.to_batch(rows, Role::Image)
    }

    pub fn encode_texts(&self, inputs: &[TextInput], role: Role, exec: Exec) -> Result<EmbeddingBatch> {
        self.check_texts(inputs)?;
        let rows = exec.map_slice(inputs, |t| self.text_one(&t.tokens));
        self.to_batch(rows, role)
    }

    /// Accumulates `d_out`-weighted image-tower gradients into `grad`.
    pub fn image_backward(
        &self,
        inputs: &[ImageInput],
        d_out: &Array2<f64>,
        grad: &mut [f64],
        exec: Exec,
    ) -> Result<()> {
        self.check_images(inputs)?;
        self.check_grad_shape(inputs.len(), d_out, grad)?;
        let (f, h, e) = (self.config.feature_dim, self.config.hidden_dim, self.config.embed_dim);
        let range = self.layout.image_range();
        let base = range.start;
        let p = &self.params.values;
        let (w1, b1, w2, b2) = (
            self.layout.w1 - base,
            self.layout.b1 - base,
            self.layout.w2 - base,
            self.layout.b2 - base,
        );
        let partials = exec.map_chunks(inputs.len(), |rows| {
            let mut g = vec![0.0; range.len()];
            for i in rows {
                let x = &inputs[i].features;
                let hid = self.image_hidden(x);
                let de = d_out.row(i);
                let mut dh = vec![0.0; h];
                for r in 0..e {
                    let d = de[r];
                    g[b2 + r] += d;
                    let w = &p[self.layout.w2 + r * h..self.layout.w2 + (r + 1) * h];
                    for c in 0..h {
                        g[w2 + r * h + c] += d * hid[c];
                        dh[c] += d * w[c];
                    }
                }
                for c in 0..h {
                    let dz = dh[c] * (1.0 - hid[c] * hid[c]);
                    g[b1 + c] += dz;
                    let row = &mut g[w1 + c * f..w1 + (c + 1) * f];
                    for (gv, xv) in row.iter_mut().zip(x) {
                        *gv += dz * xv;
                    }
                }
            }
            g
        });
        accumulate(&mut grad[range], partials);
        Ok(())
    }

    /// Accumulates `d_out`-weighted text-tower gradients into `grad`.
    pub fn text_backward(
        &self,
        inputs: &[TextInput],
        d_out: &Array2<f64>,
        grad: &mut [f64],
        exec: Exec,
    ) -> Result<()> {
        self.check_texts(inputs)?;
        self.check_grad_shape(inputs.len(), d_out, grad)?;
        let (d, e) = (self.config.token_dim, self.config.embed_dim);
        let range = self.layout.text_range();
        let base = range.start;
        let p = &self.params.values;
        let (w3, b3) = (self.layout.w3 - base, self.layout.b3 - base);
        let partials = exec.map_chunks(inputs.len(), |rows| {
            let mut g = vec![0.0; range.len()];
            for i in rows {
                let tokens = &inputs[i].tokens;
                let m = self.text_pooled(tokens);
                let de = d_out.row(i);
                let mut dm = vec![0.0; d];
                for r in 0..e {
                    let dv = de[r];
                    g[b3 + r] += dv;
                    let w = &p[self.layout.w3 + r * d..self.layout.w3 + (r + 1) * d];
                    for c in 0..d {
                        g[w3 + r * d + c] += dv * m[c];
                        dm[c] += dv * w[c];
                    }
                }
                let feats = self.text_feature_rows(tokens);
                let inv = 1.0 / feats.len() as f64;
                for off in feats {
                    let row = &mut g[off - base..off - base + d];
                    for (gv, dv) in row.iter_mut().zip(&dm) {
                        *gv += dv * inv;
                    }
                }
            }
            g
        });
        accumulate(&mut grad[range], partials);
        Ok(())
    }

    fn check_grad_shape(&self, n: usize, d_out: &Array2<f64>, grad: &[f64]) -> Result<()> {
        if d_out.dim() != (n, self.config.embed_dim) || grad.len() != self.layout.total {
            return Err(Error::DimensionMismatch(format!(
                "gradient shapes: d_out {:?} for {n} inputs, grad len {} for {} params",
                d_out.dim(),
                grad.len(),
                self.layout.total
            )));
        }
        Ok(())
    }
}

fn accumulate(target: &mut [f64], partials: Vec<Vec<f64>>) {
    for part in partials {
        for (t, v) in target.iter_mut().zip(part) {
            *t += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            feature_dim: 6,
            hidden_dim: 5,
            embed_dim: 4,
            token_dim: 3,
            bigram_buckets: 17,
            max_tokens: 16,
        }
    }

    fn vocab() -> Vocab {
        Vocab::build(["no regurgitation", "mild regurgitation", "severe aortic stenosis"])
    }

    #[test]
    fn tokenize_direct_lookup() {
        let v = vocab();
        let t = tokenize("No regurgitation.", &v);
        assert_eq!(t.tokens, vec![v.id("no"), v.id("regurgitation")]);
        assert!(tokenize("", &v).tokens.is_empty());
        let t = tokenize("mild pericardial regurgitation", &v);
        assert_eq!(t.tokens.iter().filter(|&&id| id == v.unknown_id()).count(), 1);
        assert_eq!(t.raw, "mild pericardial regurgitation");
    }

    #[test]
    fn vocab_text_round_trip() {
        let v = vocab();
        assert_eq!(Vocab::from_text(&v.to_text()), v);
        assert_eq!(v.word(0), Some(UNKNOWN_TOKEN));
    }

    #[test]
    fn deterministic_and_batch_independent() {
        let enc = DualEncoder::init(small_config(), vocab().len(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs: Vec<ImageInput> = (0..5)
            .map(|i| ImageInput::new((0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), format!("i{i}")).unwrap())
            .collect();
        let batch = enc.encode_images(&imgs, Exec::Parallel).unwrap();
        let seq = enc.encode_images(&imgs, Exec::Sequential).unwrap();
        assert_eq!(batch, seq);
        for (i, img) in imgs.iter().enumerate() {
            let alone = enc.encode_images(std::slice::from_ref(img), Exec::Sequential).unwrap();
            for k in 0..4 {
                assert!((alone.rows()[[0, k]] - batch.rows()[[i, k]]).abs() < 1e-10);
            }
        }
        let twice = enc.encode_images(&[imgs[0].clone(), imgs[0].clone()], Exec::Sequential).unwrap();
        assert_eq!(twice.row(0), twice.row(1));
    }

    #[test]
    fn zero_image_is_finite() {
        let enc = DualEncoder::init(small_config(), 4, 0).unwrap();
        let z = ImageInput::new(vec![0.0; 6], "zero").unwrap();
        let out = enc.encode_images(&[z], Exec::Sequential).unwrap();
        assert!(out.rows().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn text_errors() {
        let v = vocab();
        let enc = DualEncoder::init(small_config(), v.len(), 0).unwrap();
        let empty = tokenize("", &v);
        assert!(matches!(enc.encode_texts(&[empty], Role::Text, Exec::Sequential), Err(Error::EmptyText)));
        let oov = TextInput {
            tokens: vec![99],
            raw: String::new(),
        };
        assert!(matches!(
            enc.encode_texts(&[oov], Role::Text, Exec::Sequential),
            Err(Error::OutOfVocabulary { id: 99, .. })
        ));
        let long = TextInput {
            tokens: vec![1; 17],
            raw: String::new(),
        };
        assert!(matches!(
            enc.encode_texts(&[long], Role::Text, Exec::Sequential),
            Err(Error::TextTooLong { .. })
        ));
    }

    #[test]
    fn caption_and_negation_embed_differently() {
        let v = vocab();
        let enc = DualEncoder::init(small_config(), v.len(), 5).unwrap();
        let a = tokenize("mild regurgitation", &v);
        let b = tokenize("no regurgitation", &v);
        let same = enc.encode_texts(&[a.clone(), a.clone()], Role::Text, Exec::Sequential).unwrap();
        assert_eq!(same.row(0), same.row(1));
        let diff = enc.encode_texts(&[a, b], Role::Text, Exec::Sequential).unwrap();
        assert_ne!(diff.row(0), diff.row(1));
    }

    #[test]
    fn image_shape_mismatch() {
        let enc = DualEncoder::init(small_config(), 4, 0).unwrap();
        let a = ImageInput::new(vec![0.1; 6], "a").unwrap();
        let b = ImageInput::new(vec![0.1; 5], "b").unwrap();
        assert!(enc.encode_images(&[a, b], Exec::Sequential).is_err());
    }

    /// Checks both towers' parameter gradients of `sum(d_out * output)`
    /// against central differences.
    #[test]
    fn backward_matches_finite_differences() {
        let v = vocab();
        let cfg = small_config();
        let mut enc = DualEncoder::init(cfg, v.len(), 21).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let imgs: Vec<ImageInput> = (0..3)
            .map(|i| ImageInput::new((0..6).map(|_| rng.random_range(-1.0..1.0)).collect(), format!("{i}")).unwrap())
            .collect();
        let texts = vec![
            tokenize("severe aortic stenosis", &v),
            tokenize("no regurgitation", &v),
            tokenize("mild", &v),
        ];
        let d_img = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let d_txt = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let mut grad = vec![0.0; enc.num_params()];
        enc.image_backward(&imgs, &d_img, &mut grad, Exec::Parallel).unwrap();
        enc.text_backward(&texts, &d_txt, &mut grad, Exec::Parallel).unwrap();

        let objective = |e: &DualEncoder| {
            let zi = e.encode_images(&imgs, Exec::Sequential).unwrap();
            let zt = e.encode_texts(&texts, Role::Text, Exec::Sequential).unwrap();
            (zi.rows() * &d_img).sum() + (zt.rows() * &d_txt).sum()
        };
        let h = 1e-6;
        for k in 0..enc.num_params() {
            let orig = enc.params.values[k];
            enc.params.values[k] = orig + h;
            let up = objective(&enc);
            enc.params.values[k] = orig - h;
            let down = objective(&enc);
            enc.params.values[k] = orig;
            let fd = (up - down) / (2.0 * h);
            assert!((fd - grad[k]).abs() < 1e-6 * (1.0 + fd.abs()), "param {k}: fd {fd} vs {}", grad[k]);
        }
    }

    #[test]
    fn params_round_trip_through_layout_check() {
        let enc = DualEncoder::init(small_config(), 4, 9).unwrap();
        let again = DualEncoder::from_params(small_config(), 4, enc.params().clone()).unwrap();
        assert_eq!(enc, again);
        assert!(DualEncoder::from_params(small_config(), 5, enc.params().clone()).is_err());
        assert_eq!(enc.params().slice("image.b2").unwrap().len(), 4);
    }
}
