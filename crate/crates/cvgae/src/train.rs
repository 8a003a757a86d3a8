//! Training loop: bias-corrected Adam, epoch-shuffled minibatches, loss
//! traces, and resumable checkpoints.
//!
//! Determinism contract: the latent-noise/dropout stream is a single
//! serialized ChaCha generator, while each epoch's shuffle order is derived
//! statelessly from (seed, epoch index). Resuming from a checkpoint therefore
//! reproduces the uninterrupted trajectory bit for bit.

use crate::autodiff::{ParamStore, Tape, Tensor};
use crate::molgraph::{Dataset, DatasetEntry};
use crate::vae::{elbo_loss, ElboBreakdown, ModelParams, Networks, VaeError};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

const FORMAT: &str = "cvgae-checkpoint";
const VERSION: u32 = 1;

#[derive(Debug)]
pub enum TrainError {
    Io(std::io::Error),
    Format(String),
    BadConfig(String),
    EmptyTrainSet,
    NonFiniteGradient(String),
    Vae(VaeError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::Io(e) => write!(f, "checkpoint i/o error: {}", e),
            TrainError::Format(msg) => write!(f, "checkpoint format error: {}", msg),
            TrainError::BadConfig(msg) => write!(f, "invalid train config: {}", msg),
            TrainError::EmptyTrainSet => write!(f, "train split is empty"),
            TrainError::NonFiniteGradient(name) => {
                write!(f, "non-finite gradient for parameter `{}`", name)
            }
            TrainError::Vae(e) => write!(f, "{}", e),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

impl From<VaeError> for TrainError {
    fn from(e: VaeError) -> Self {
        TrainError::Vae(e)
    }
}

/// Optimizer and objective hyperparameters. Defaults follow the training
/// setup the model was published with: Adam at 3e-4, batches of 20
/// molecules, dropout 0.2, and a 1e-5 unconditional-prior coefficient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub max_steps: u64,
    pub seed: u64,
    /// Steps between checkpoint files; 0 writes only the final checkpoint.
    pub checkpoint_interval: u64,
    /// Optional global-norm gradient clip.
    pub grad_clip: Option<f64>,
    /// Optional early stopping: evaluations of the validation loss without
    /// improvement before training stops. Off by default.
    pub early_stop_patience: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 3e-4,
            batch_size: 20,
            alpha: 1e-5,
            dropout: 0.2,
            max_steps: 1000,
            seed: 0,
            checkpoint_interval: 0,
            grad_clip: None,
            early_stop_patience: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::BadConfig("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TrainError::BadConfig("dropout must lie in [0, 1)".into()));
        }
        if self.batch_size < 1 {
            return Err(TrainError::BadConfig("batch_size must be at least 1".into()));
        }
        if self.alpha < 0.0 {
            return Err(TrainError::BadConfig("alpha must be nonnegative".into()));
        }
        Ok(())
    }
}

/// First/second moment accumulators, one pair per parameter tensor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Default for AdamState {
    fn default() -> Self {
        AdamState {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }
}

/// One bias-corrected Adam update. Gradients default to zero for parameters
/// missing from `grads`; a non-finite gradient aborts with the parameter name.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    state.step += 1;
    let t = state.step as i32;
    let bias1 = 1.0 - state.beta1.powi(t);
    let bias2 = 1.0 - state.beta2.powi(t);

    let names: Vec<String> = params.names().map(str::to_string).collect();
    for name in names {
        let param = params.get_mut(&name).expect("name from store");
        let zero = Tensor::zeros(param.shape());
        let g = grads.get(&name).unwrap_or(&zero);
        if !g.is_finite() {
            return Err(TrainError::NonFiniteGradient(name));
        }
        if g.shape() != param.shape() {
            return Err(TrainError::Format(format!(
                "gradient shape {:?} vs parameter `{}` shape {:?}",
                g.shape(),
                name,
                param.shape()
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(param.shape()));
        let (b1, b2, eps) = (state.beta1, state.beta2, state.epsilon);
        for ((w, gi), (mi, vi)) in param
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()))
        {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / bias1;
            let v_hat = *vi / bias2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Per-batch objective components (means over the batch molecules).
/// `total` is the mean ELBO; the minimized loss is its negation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub recon: f64,
    pub kl_post_prior: f64,
    pub kl_prior_uncond: f64,
    pub total: f64,
}

impl TraceRow {
    pub fn loss(&self) -> f64 {
        -self.total
    }
}

/// Deterministic derived seed for independent random streams.
pub fn subseed(seed: u64, label: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// Mean negative-ELBO over a batch, with gradients summed in entry order
/// and divided by the batch size.
pub fn batch_loss_and_gradients(
    model: &ModelParams,
    entries: &[&DatasetEntry],
    alpha: f64,
    dropout: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(TraceRow, BTreeMap<String, Tensor>), TrainError> {
    let mut tape = Tape::new();
    let bound = model.store.bind(&mut tape);
    let nets = Networks::resolve(&bound)?;
    let mut totals = Vec::with_capacity(entries.len());
    let mut acc = ElboBreakdown {
        recon_loglik: 0.0,
        kl_post_prior: 0.0,
        kl_prior_uncond: 0.0,
        total: 0.0,
    };
    for entry in entries {
        let terms = elbo_loss(
            &mut tape,
            &nets,
            &model.config,
            &entry.features,
            &entry.conformation,
            alpha,
            dropout,
            training,
            rng,
        )?;
        let b = terms.breakdown(&tape);
        acc.recon_loglik += b.recon_loglik;
        acc.kl_post_prior += b.kl_post_prior;
        acc.kl_prior_uncond += b.kl_prior_uncond;
        acc.total += b.total;
        totals.push(terms.total);
    }
    let n = entries.len() as f64;
    let mut combined = totals[0];
    for &t in &totals[1..] {
        combined = tape.add(combined, t).map_err(VaeError::from)?;
    }
    let loss = tape.scale(combined, -1.0 / n).map_err(VaeError::from)?;
    let grads = tape.backward(loss).map_err(VaeError::from)?;
    let by_name = bound.grads_by_name(&grads);
    let row = TraceRow {
        step: 0,
        recon: acc.recon_loglik / n,
        kl_post_prior: acc.kl_post_prior / n,
        kl_prior_uncond: acc.kl_prior_uncond / n,
        total: acc.total / n,
    };
    Ok((row, by_name))
}

fn clip_gradients(grads: &mut BTreeMap<String, Tensor>, max_norm: f64) {
    let norm_sq: f64 = grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|x| x * x)
        .sum();
    let norm = norm_sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for x in t.data_mut() {
                *x *= scale;
            }
        }
    }
}

/// Owns the model, optimizer state, and noise stream for one training run.
pub struct Trainer {
    pub model: ModelParams,
    pub adam: AdamState,
    pub config: TrainConfig,
    pub step: u64,
    noise_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: ModelParams, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let noise_rng = ChaCha8Rng::seed_from_u64(subseed(config.seed, "noise", 0));
        Ok(Trainer { model, adam: AdamState::default(), config, step: 0, noise_rng })
    }

    fn steps_per_epoch(&self, n_train: usize) -> u64 {
        let b = self.config.batch_size.max(1);
        (n_train.div_ceil(b)) as u64
    }

    /// The molecule order for one epoch, derived statelessly from the run
    /// seed and the epoch index.
    fn epoch_order(&self, indices: &[usize], epoch: u64) -> Vec<usize> {
        let mut order = indices.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(subseed(self.config.seed, "shuffle", epoch));
        order.shuffle(&mut rng);
        order
    }

    /// Run `steps` optimizer updates over epoch-shuffled batches of the
    /// given train indices, appending one trace row per batch.
    pub fn train_steps(
        &mut self,
        dataset: &Dataset,
        indices: &[usize],
        steps: u64,
    ) -> Result<Vec<TraceRow>, TrainError> {
        if indices.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        let per_epoch = self.steps_per_epoch(indices.len());
        let mut trace = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let epoch = self.step / per_epoch;
            let batch_pos = (self.step % per_epoch) as usize;
            let order = self.epoch_order(indices, epoch);
            let start = batch_pos * self.config.batch_size;
            let end = (start + self.config.batch_size).min(order.len());
            let entries: Vec<&DatasetEntry> =
                order[start..end].iter().map(|&i| &dataset.entries[i]).collect();

            let (mut row, mut grads) = batch_loss_and_gradients(
                &self.model,
                &entries,
                self.config.alpha,
                self.config.dropout,
                true,
                &mut self.noise_rng,
            )?;
            if let Some(c) = self.config.grad_clip {
                clip_gradients(&mut grads, c);
            }
            adam_step(&mut self.model.store, &grads, &mut self.adam, self.config.learning_rate)?;
            self.step += 1;
            row.step = self.step;
            trace.push(row);
        }
        Ok(trace)
    }

    /// One full pass over the train indices.
    pub fn train_epoch(
        &mut self,
        dataset: &Dataset,
        indices: &[usize],
    ) -> Result<Vec<TraceRow>, TrainError> {
        if indices.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        let per_epoch = self.steps_per_epoch(indices.len());
        self.train_steps(dataset, indices, per_epoch)
    }

    /// Mean objective over a split with dropout disabled and no update.
    /// Deterministic given `seed`.
    pub fn validation_loss(
        &self,
        dataset: &Dataset,
        indices: &[usize],
        seed: u64,
    ) -> Result<TraceRow, TrainError> {
        if indices.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        let entries: Vec<&DatasetEntry> = indices.iter().map(|&i| &dataset.entries[i]).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut row, _) = batch_loss_and_gradients(
            &self.model,
            &entries,
            self.config.alpha,
            0.0,
            false,
            &mut rng,
        )?;
        row.step = self.step;
        Ok(row)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), TrainError> {
        let file = CheckpointFile {
            format: FORMAT.to_string(),
            version: VERSION,
            model: self.model.clone(),
            adam: self.adam.clone(),
            config: self.config.clone(),
            step: self.step,
            rng_seed: self.noise_rng.get_seed().to_vec(),
            rng_word_pos_hi: (self.noise_rng.get_word_pos() >> 64) as u64,
            rng_word_pos_lo: self.noise_rng.get_word_pos() as u64,
        };
        let json = serde_json::to_string(&file).map_err(|e| TrainError::Format(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<Self, TrainError> {
        let bytes = std::fs::read(path)?;
        let file: CheckpointFile =
            serde_json::from_slice(&bytes).map_err(|e| TrainError::Format(e.to_string()))?;
        if file.format != FORMAT {
            return Err(TrainError::Format(format!(
                "expected format `{}`, found `{}`",
                FORMAT, file.format
            )));
        }
        if file.version != VERSION {
            return Err(TrainError::Format(format!(
                "unsupported version {} (expected {})",
                file.version, VERSION
            )));
        }
        let seed: [u8; 32] = file
            .rng_seed
            .as_slice()
            .try_into()
            .map_err(|_| TrainError::Format("rng seed must be 32 bytes".into()))?;
        let mut noise_rng = ChaCha8Rng::from_seed(seed);
        let pos = ((file.rng_word_pos_hi as u128) << 64) | file.rng_word_pos_lo as u128;
        noise_rng.set_word_pos(pos);
        for (name, t) in file.model.store.iter() {
            t.validate()
                .map_err(|e| TrainError::Format(format!("tensor `{}`: {}", name, e)))?;
        }
        Ok(Trainer {
            model: file.model,
            adam: file.adam,
            config: file.config,
            step: file.step,
            noise_rng,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    model: ModelParams,
    adam: AdamState,
    config: TrainConfig,
    step: u64,
    rng_seed: Vec<u8>,
    rng_word_pos_hi: u64,
    rng_word_pos_lo: u64,
}

/// Render trace rows as the loss CSV.
pub fn trace_to_csv(rows: &[TraceRow]) -> String {
    let mut out = String::from("step,recon,kl_post_prior,kl_prior_uncond,total\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.step, r.recon, r.kl_post_prior, r.kl_prior_uncond, r.total
        ));
    }
    out
}
