//! Training step, AdamW, warmup + cosine schedule, checkpoints and the
//! per-epoch metrics log.

use std::io::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding::{Role, Temperature, ViewLabelBatch};
use crate::encoders::{tokenize, DualEncoder, EncoderConfig, EncoderParams, ImageInput, TextInput, Vocab};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::objectives::{loss_gradients, objective, LossBreakdown, LossWeights, ObjectiveInputs};
use crate::synthetic::SamplePair;

pub const CHECKPOINT_FORMAT: &str = "echo-contrast-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub warmup_steps: usize,
    pub epochs: usize,
    pub lambda_view: f64,
    pub lambda_neg: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            weight_decay: 0.005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 512,
            warmup_steps: 200,
            epochs: 20,
            lambda_view: crate::objectives::DEFAULT_LAMBDA_VIEW,
            lambda_neg: crate::objectives::DEFAULT_LAMBDA_NEG,
            seed: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale synthetic corpus.
    pub fn synthetic() -> Self {
        Self {
            base_lr: 3e-2,
            batch_size: 64,
            ..Self::default()
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_view: self.lambda_view,
            lambda_neg: self.lambda_neg,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [("base_lr", self.base_lr), ("eps", self.eps)];
        if positive.iter().any(|(_, v)| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("base_lr and eps must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("beta1 and beta2 must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) || !(self.lambda_view >= 0.0) || !(self.lambda_neg >= 0.0) {
            return Err(Error::Config("weight_decay and lambda weights must be >= 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

/// Linear warmup from 0 followed by cosine decay to 0 at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidSchedule(format!("step {step} beyond total {total_steps}")));
    }
    if cfg.warmup_steps >= total_steps {
        return Err(Error::InvalidSchedule(format!(
            "warmup {} must be shorter than the {total_steps} total steps",
            cfg.warmup_steps
        )));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.base_lr * step as f64 / cfg.warmup_steps as f64);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Tokenized inputs for one contrastive batch.
#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub images: Vec<ImageInput>,
    pub captions: Vec<TextInput>,
    pub negated: Vec<TextInput>,
    pub views: ViewLabelBatch,
}

impl TrainBatch {
    pub fn from_pairs(pairs: &[SamplePair], vocab: &Vocab) -> Result<Self> {
        let images = pairs.iter().map(SamplePair::image).collect::<Result<Vec<_>>>()?;
        Ok(Self {
            images,
            captions: pairs.iter().map(|p| tokenize(&p.caption, vocab)).collect(),
            negated: pairs.iter().map(|p| tokenize(&p.negated_caption, vocab)).collect(),
            views: ViewLabelBatch::new(pairs.iter().map(|p| p.view).collect()),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// The rows at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            captions: indices.iter().map(|&i| self.captions[i].clone()).collect(),
            negated: indices.iter().map(|&i| self.negated[i].clone()).collect(),
            views: ViewLabelBatch::new(indices.iter().map(|&i| self.views.labels()[i]).collect()),
        }
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub vocab: Vocab,
    pub encoder: DualEncoder,
    pub tau: Temperature,
    /// First and second moments; the final entry belongs to the log temperature.
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step: usize,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn init(config: TrainConfig, vocab: Vocab) -> Result<Self> {
        config.validate()?;
        let encoder = DualEncoder::init(config.encoder, vocab.len(), config.seed)?;
        let n = encoder.num_params() + 1;
        Ok(Self {
            config,
            vocab,
            encoder,
            tau: Temperature::default(),
            adam_m: vec![0.0; n],
            adam_v: vec![0.0; n],
            step: 0,
            epoch: 0,
        })
    }

    /// Loss of the current parameters on `batch`, without updating anything.
    pub fn evaluate_batch(&self, batch: &TrainBatch, exec: Exec) -> Result<LossBreakdown> {
        let zi = self.encoder.encode_images(&batch.images, exec)?;
        let zt = self.encoder.encode_texts(&batch.captions, Role::Text, exec)?;
        let zn = self.encoder.encode_texts(&batch.negated, Role::NegatedText, exec)?;
        objective(&ObjectiveInputs {
            image: &zi,
            text: &zt,
            negated: &zn,
            views: &batch.views,
            tau: self.tau,
            weights: self.config.weights(),
        })
    }
}

fn first_nan(name: &str, values: impl IntoIterator<Item = f64>) -> Result<()> {
    match values.into_iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NanDetected(format!("{name} (index {i})"))),
        None => Ok(()),
    }
}

/// One forward/backward pass and optimizer update at `lr_at(state.step)`.
pub fn train_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    total_steps: usize,
    exec: Exec,
) -> Result<LossBreakdown> {
    let lr = lr_at(state.step, total_steps, &state.config)?;
    train_step_with_lr(state, batch, lr, exec)
}

/// [`train_step`] with an explicit learning rate.
pub fn train_step_with_lr(
    state: &mut TrainState,
    batch: &TrainBatch,
    lr: f64,
    exec: Exec,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let enc = &state.encoder;
    let zi = enc.encode_images(&batch.images, exec)?;
    let zt = enc.encode_texts(&batch.captions, Role::Text, exec)?;
    let zn = enc.encode_texts(&batch.negated, Role::NegatedText, exec)?;
    for (name, z) in [("image embeddings", &zi), ("caption embeddings", &zt), ("negated embeddings", &zn)] {
        first_nan(name, z.rows().iter().copied())?;
    }
    let (breakdown, grads) = loss_gradients(&ObjectiveInputs {
        image: &zi,
        text: &zt,
        negated: &zn,
        views: &batch.views,
        tau: state.tau,
        weights: state.config.weights(),
    })?;
    first_nan(
        "loss",
        [breakdown.l_clip, breakdown.l_view, breakdown.l_neg, breakdown.total],
    )?;
    first_nan("image embedding gradient", grads.image.iter().copied())?;
    first_nan("caption embedding gradient", grads.text.iter().copied())?;
    first_nan("negated embedding gradient", grads.negated.iter().copied())?;
    first_nan("log temperature gradient", [grads.log_tau])?;

    let mut grad = vec![0.0; enc.num_params()];
    enc.image_backward(&batch.images, &grads.image, &mut grad, exec)?;
    enc.text_backward(&batch.captions, &grads.text, &mut grad, exec)?;
    enc.text_backward(&batch.negated, &grads.negated, &mut grad, exec)?;
    first_nan("parameter gradient", grad.iter().copied())?;
    grad.push(grads.log_tau);

    let cfg = &state.config;
    let t = (state.step + 1) as i32;
    let bias1 = 1.0 - cfg.beta1.powi(t);
    let bias2 = 1.0 - cfg.beta2.powi(t);
    let n = grad.len();
    let mut log_tau = state.tau.log_value();
    let params = state.encoder.params_mut();
    for (k, g) in grad.into_iter().enumerate() {
        let m = &mut state.adam_m[k];
        let v = &mut state.adam_v[k];
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let update = (*m / bias1) / ((*v / bias2).sqrt() + cfg.eps);
        if k + 1 == n {
            log_tau -= lr * update;
        } else {
            let p = &mut params[k];
            *p -= lr * (update + cfg.weight_decay * *p);
        }
    }
    state.tau = Temperature::from_log(log_tau);
    state.step += 1;
    Ok(breakdown)
}

/// Mean loss breakdown over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub step: usize,
    pub l_clip: f64,
    pub l_view: f64,
    pub l_neg: f64,
    pub total: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

pub fn steps_per_epoch(n_train: usize, batch_size: usize) -> usize {
    n_train / batch_size
}

/// Deterministic order of the training rows for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Runs epochs `state.epoch..until_epoch` of the `state.config.epochs`-epoch
/// schedule, calling `on_epoch` after each one. The trailing partial batch of
/// every epoch is dropped.
pub fn train_epochs(
    state: &mut TrainState,
    data: &TrainBatch,
    until_epoch: usize,
    exec: Exec,
    mut on_epoch: impl FnMut(&EpochMetrics, &TrainState) -> Result<()>,
) -> Result<Vec<EpochMetrics>> {
    let cfg = state.config.clone();
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let until = until_epoch.min(cfg.epochs);
    if until > state.epoch && per_epoch == 0 {
        return Err(Error::Config(format!(
            "{} training rows cannot fill one batch of {}",
            data.len(),
            cfg.batch_size
        )));
    }
    let mut log = Vec::new();
    while state.epoch < until {
        let order = epoch_order(data.len(), cfg.seed, state.epoch);
        let mut sums = [0.0; 4];
        let mut lr = 0.0;
        for chunk in order.chunks_exact(cfg.batch_size) {
            lr = lr_at(state.step, total, &cfg)?;
            let b = train_step_with_lr(state, &data.select(chunk), lr, exec)?;
            for (s, v) in sums.iter_mut().zip([b.l_clip, b.l_view, b.l_neg, b.total]) {
                *s += v;
            }
        }
        state.epoch += 1;
        let k = per_epoch as f64;
        let m = EpochMetrics {
            epoch: state.epoch,
            step: state.step,
            l_clip: sums[0] / k,
            l_view: sums[1] / k,
            l_neg: sums[2] / k,
            total: sums[3] / k,
            lr,
        };
        log::info!(
            "epoch {} step {} total {:.5} clip {:.5} view {:.5} neg {:.5} lr {:.3e} tau {:.3}",
            m.epoch,
            m.step,
            m.total,
            m.l_clip,
            m.l_view,
            m.l_neg,
            m.lr,
            state.tau.value()
        );
        on_epoch(&m, state)?;
        log.push(m);
    }
    Ok(log)
}

/// Vocabulary built from the captions and negated captions of `rows`.
pub fn build_vocab(rows: &[SamplePair]) -> Vocab {
    Vocab::build(
        rows.iter()
            .flat_map(|r| [r.caption.as_str(), r.negated_caption.as_str()]),
    )
}

/// Appends one metrics record per line.
pub fn append_metrics(path: &Path, m: &EpochMetrics) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", m.to_json_line()).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Self-describing training snapshot.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: TrainConfig,
    pub vocab: Vec<String>,
    pub params: EncoderParams,
    pub log_tau: f64,
    pub adam_m: Vec<f64>,
    pub adam_v: Vec<f64>,
    pub step: usize,
    pub epoch: usize,
}

impl Checkpoint {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config_hash: state.config.hash(),
            config: state.config.clone(),
            vocab: state.vocab.words().to_vec(),
            params: state.encoder.params().clone(),
            log_tau: state.tau.log_value(),
            adam_m: state.adam_m.clone(),
            adam_v: state.adam_v.clone(),
            step: state.step,
            epoch: state.epoch,
        }
    }

    pub fn into_state(self) -> Result<TrainState> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        if self.config.hash() != self.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let vocab = Vocab::from_words(self.vocab);
        let encoder = DualEncoder::from_params(self.config.encoder, vocab.len(), self.params)?;
        let n = encoder.num_params() + 1;
        if self.adam_m.len() != n || self.adam_v.len() != n {
            return Err(Error::Checkpoint(format!(
                "optimizer moments have lengths {}/{}, expected {n}",
                self.adam_m.len(),
                self.adam_v.len()
            )));
        }
        Ok(TrainState {
            config: self.config,
            vocab,
            encoder,
            tau: Temperature::from_log(self.log_tau),
            adam_m: self.adam_m,
            adam_v: self.adam_v,
            step: self.step,
            epoch: self.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}
