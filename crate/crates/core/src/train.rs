//! ELBO maximization with Adam, validation-based early stopping and
//! checkpoints.
//!
//! Utterances are cut into non-overlapping chunks of `sequence_len` frames
//! (shorter ones are dropped). Each step averages the single-sample ELBO
//! gradient over a batch; per-sequence gradients are computed in parallel
//! and summed in batch order, and every draw is seeded from `(seed, epoch,
//! position)`, so a run is reproducible bit for bit regardless of the
//! thread count.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::models::{draw_noise, elbo_and_grad, elbo_with_noise, GenerativeModel, ModelDims, ModelKind, PowerSequence};
use crate::nnet::{opt_step, AdamConfig, OptimState, ParamSet};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Frames per training sequence.
    pub sequence_len: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Standardize visual features with training-set statistics.
    pub standardize_visual: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            batch_size: 8,
            sequence_len: 50,
            patience: 50,
            max_epochs: 500,
            seed: 0,
            standardize_visual: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 || self.sequence_len == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, sequence_len and patience must be positive".into()));
        }
        Ok(())
    }

    /// FNV-1a over the configuration's debug form; identifies the run in
    /// checkpoints.
    pub fn hash(&self) -> u64 {
        format!("{self:?}").bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
            (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
        })
    }

    fn validation_seed(&self) -> u64 {
        par::item_seed(self.seed, u64::MAX)
    }
}

/// Splits every sequence into non-overlapping `len`-frame chunks; trailing
/// frames and sequences shorter than `len` are dropped.
pub fn chunk_sequences(seqs: &[PowerSequence], len: usize) -> Vec<PowerSequence> {
    let mut out = Vec::new();
    if len == 0 {
        return out;
    }
    for seq in seqs {
        for c in 0..seq.frames() / len {
            let rows = s![c * len..(c + 1) * len, ..];
            out.push(PowerSequence {
                power: seq.power.slice(rows).to_owned(),
                visual: seq.visual.as_ref().map(|v| v.slice(rows).to_owned()),
            });
        }
    }
    out
}

/// Visual rows are dropped for audio-only kinds, and checked for AV kinds.
fn prepare(model: &GenerativeModel, seqs: &[PowerSequence]) -> Result<Vec<PowerSequence>> {
    seqs.iter()
        .map(|s| {
            if s.power.ncols() != model.freq_bins() {
                return Err(Error::Shape(format!(
                    "sequence has {} bins, model expects {}",
                    s.power.ncols(),
                    model.freq_bins()
                )));
            }
            if model.kind.is_av() {
                match &s.visual {
                    Some(v) if v.ncols() == model.visual_dim() => Ok(s.clone()),
                    Some(v) => Err(Error::Shape(format!(
                        "visual features have {} dims, {} expects {}",
                        v.ncols(),
                        model.kind,
                        model.visual_dim()
                    ))),
                    None => Err(Error::MissingVisual(model.kind.label())),
                }
            } else {
                Ok(PowerSequence {
                    power: s.power.clone(),
                    visual: None,
                })
            }
        })
        .collect()
}

fn fixed_noise(model: &GenerativeModel, seqs: &[PowerSequence], seed: u64) -> Vec<Array2<f64>> {
    par::map_range(seqs.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(par::item_seed(seed, i as u64));
        draw_noise(seqs[i].frames(), model.latent_dim(), &mut rng)
    })
}

fn mean_neg_elbo(model: &GenerativeModel, seqs: &[PowerSequence], noise: &[Array2<f64>]) -> Result<f64> {
    let vals: Vec<f64> = par::map_range(seqs.len(), |i| elbo_with_noise(model, &seqs[i], &noise[i]))
        .into_iter()
        .collect::<Result<_>>()?;
    Ok(-vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Mean negative ELBO over `valid_set` with reparameterization noise fixed
/// by `seed`.
pub fn validate(model: &GenerativeModel, valid_set: &[PowerSequence], seed: u64) -> Result<f64> {
    if valid_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let seqs = prepare(model, valid_set)?;
    mean_neg_elbo(model, &seqs, &fixed_noise(model, &seqs, seed))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-sequence ELBO over the epoch's batches.
    pub train_elbo: f64,
    /// Mean per-sequence validation ELBO after the epoch.
    pub valid_elbo: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation ELBO.
    pub model: GenerativeModel,
    pub history: Vec<EpochRecord>,
    /// 0 when no epoch ran.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainOutcome {
    pub fn best_valid_elbo(&self) -> Option<f64> {
        self.history.iter().find(|r| r.epoch == self.best_epoch).map(|r| r.valid_elbo)
    }
}

/// Tab-separated log with one line per epoch.
pub fn history_log(history: &[EpochRecord]) -> String {
    let mut s = String::from("epoch\ttrain_elbo\tvalid_elbo\n");
    for r in history {
        let _ = writeln!(s, "{}\t{:.10e}\t{:.10e}", r.epoch, r.train_elbo, r.valid_elbo);
    }
    s
}

/// Trains `model` on length-`sequence_len` chunks of `train_set`, with early
/// stopping on `valid_set`. Input statistics are left as they are; fit them
/// beforehand with [`GenerativeModel::fit_stats`].
pub fn train(
    model: GenerativeModel,
    train_set: &[PowerSequence],
    valid_set: &[PowerSequence],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with_progress(model, train_set, valid_set, cfg, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with_progress(
    model: GenerativeModel,
    train_set: &[PowerSequence],
    valid_set: &[PowerSequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if valid_set.is_empty() {
        return Err(Error::Empty("validation set"));
    }
    let chunks = prepare(&model, &chunk_sequences(train_set, cfg.sequence_len))?;
    let valid = prepare(&model, &chunk_sequences(valid_set, cfg.sequence_len))?;
    if chunks.is_empty() || valid.is_empty() {
        return Err(Error::Empty("sequences of at least sequence_len frames"));
    }
    let valid_noise = fixed_noise(&model, &valid, cfg.validation_seed());

    let mut model = model;
    let mut state = OptimState::new(&model.params, AdamConfig::with_lr(cfg.learning_rate));
    let mut best = model.clone();
    let mut best_loss = f64::INFINITY;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..chunks.len()).collect();
    let batch = cfg.batch_size.min(chunks.len());

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        let epoch_seed = par::item_seed(cfg.seed, epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut elbo_sum = 0.0;
        let mut seen = 0usize;
        for (b, idx) in order.chunks(batch).enumerate() {
            let results = par::map_range(idx.len(), |j| {
                let pos = (b * batch + j) as u64;
                let mut rng = ChaCha8Rng::seed_from_u64(par::item_seed(epoch_seed, pos));
                let seq = &chunks[idx[j]];
                let noise = draw_noise(seq.frames(), model.latent_dim(), &mut rng);
                elbo_and_grad(&model, &[seq], &[noise])
            });
            let mut grad = model.params.zeros_like();
            let mut value = 0.0;
            for r in results {
                let (v, g) = r?;
                value += v;
                grad.add_scaled(&g, 1.0);
            }
            if !value.is_finite() || !grad.all_finite() {
                return Err(Error::Diverged {
                    iteration: epoch,
                    what: format!("training ELBO {value} in batch {b}"),
                });
            }
            // descend on the mean negative ELBO
            grad.scale(-1.0 / idx.len() as f64);
            opt_step(&mut state, &mut model.params, &grad).map_err(|e| Error::Diverged {
                iteration: epoch,
                what: e.to_string(),
            })?;
            elbo_sum += value;
            seen += idx.len();
        }
        let valid_loss = mean_neg_elbo(&model, &valid, &valid_noise)?;
        if !valid_loss.is_finite() {
            return Err(Error::Diverged {
                iteration: epoch,
                what: "validation ELBO".into(),
            });
        }
        let record = EpochRecord {
            epoch,
            train_elbo: elbo_sum / seen as f64,
            valid_elbo: -valid_loss,
        };
        log::info!(
            "epoch {epoch}: train ELBO {:.3}, valid ELBO {:.3} ({:.2?})",
            record.train_elbo,
            record.valid_elbo,
            started.elapsed()
        );
        on_epoch(&record);
        history.push(record);
        if valid_loss < best_loss {
            best_loss = valid_loss;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= cfg.patience {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model: if best_epoch == 0 { model } else { best },
        history,
        best_epoch,
        stopped_early,
    })
}

/// Copies every parameter of `source` whose name and shape also exist in
/// `target`; returns the copied names. Used to start an AV model from its
/// audio-only counterpart.
pub fn init_from(target: &mut GenerativeModel, source: &GenerativeModel) -> Vec<String> {
    let mut copied = Vec::new();
    for (name, t) in source.params.iter() {
        if let Some(dst) = target.params.get_mut(name) {
            if dst.dim() == t.dim() {
                dst.assign(t);
                copied.push(name.clone());
            }
        }
    }
    copied
}

/// Training metadata stored with a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    /// Mean negative validation ELBO; NaN if never validated.
    pub valid_loss: f64,
    pub config_hash: u64,
}

fn dims_attrs(c: &mut Container, d: &ModelDims) {
    let mut put = |k: &str, v: String| {
        c.attrs.insert(format!("dims.{k}"), v);
    };
    put("freq_bins", d.freq_bins.to_string());
    put("latent_dim", d.latent_dim.to_string());
    put("visual_dim", d.visual_dim.to_string());
    put("vae_hidden", d.vae_hidden.to_string());
    put(
        "dkf_decoder_hidden",
        d.dkf_decoder_hidden.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(","),
    );
    put("rnn_hidden", d.rnn_hidden.to_string());
    put("transition_hidden", d.transition_hidden.to_string());
}

fn parse_attr<T: std::str::FromStr>(c: &Container, key: &str) -> Result<T> {
    let v = c.attr(key)?;
    v.parse()
        .map_err(|_| Error::format(format!("attribute {key} has bad value {v:?}")))
}

fn dims_from_attrs(c: &Container) -> Result<ModelDims> {
    let hidden = c.attr("dims.dkf_decoder_hidden")?;
    let dkf_decoder_hidden = hidden
        .split(',')
        .map(|x| x.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::format(format!("bad dkf_decoder_hidden {hidden:?}")))?;
    Ok(ModelDims {
        freq_bins: parse_attr(c, "dims.freq_bins")?,
        latent_dim: parse_attr(c, "dims.latent_dim")?,
        visual_dim: parse_attr(c, "dims.visual_dim")?,
        vae_hidden: parse_attr(c, "dims.vae_hidden")?,
        dkf_decoder_hidden,
        rnn_hidden: parse_attr(c, "dims.rnn_hidden")?,
        transition_hidden: parse_attr(c, "dims.transition_hidden")?,
    })
}

pub fn checkpoint_container(model: &GenerativeModel, meta: &CheckpointMeta) -> Container {
    let mut c = Container::new();
    c.attrs.insert("content".into(), "checkpoint".into());
    c.attrs.insert("kind".into(), model.kind.key().into());
    dims_attrs(&mut c, &model.dims);
    c.attrs.insert("epoch".into(), meta.epoch.to_string());
    c.attrs.insert("valid_loss".into(), format!("{:?}", meta.valid_loss));
    c.attrs.insert("config_hash".into(), format!("{:016x}", meta.config_hash));
    for (k, v) in model.params.iter().chain(model.stats.iter()) {
        c.tensors.insert(k.clone(), v.clone());
    }
    c
}

pub fn save_checkpoint(model: &GenerativeModel, meta: &CheckpointMeta, path: impl AsRef<Path>) -> Result<()> {
    checkpoint_container(model, meta).save(path)
}

pub fn model_from_container(c: &Container) -> Result<(GenerativeModel, CheckpointMeta)> {
    if c.attr("content")? != "checkpoint" {
        return Err(Error::format("container is not a checkpoint"));
    }
    let kind: ModelKind = c.attr("kind")?.parse().map_err(|_| Error::format("unknown model kind"))?;
    let dims = dims_from_attrs(c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = GenerativeModel::new(kind, dims.clone(), &mut rng).map_err(|e| Error::format(e.to_string()))?;
    if model.dims != dims {
        return Err(Error::format(format!("dims do not fit a {kind} model")));
    }
    let mut params = ParamSet::new();
    let mut stats = ParamSet::new();
    for (k, v) in &c.tensors {
        if k.starts_with("stats.") {
            stats.insert(k.clone(), v.clone())?;
        } else {
            params.insert(k.clone(), v.clone())?;
        }
    }
    model.params = params;
    model.stats = stats;
    model.validate_layout().map_err(|e| Error::format(e.to_string()))?;
    let config_hash = u64::from_str_radix(c.attr("config_hash")?, 16)
        .map_err(|_| Error::format("bad config_hash"))?;
    let meta = CheckpointMeta {
        epoch: parse_attr(c, "epoch")?,
        valid_loss: parse_attr(c, "valid_loss")?,
        config_hash,
    };
    Ok((model, meta))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(GenerativeModel, CheckpointMeta)> {
    let path = path.as_ref();
    let c = Container::load(path)?;
    model_from_container(&c).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: Some(path.to_path_buf()),
            reason,
        },
        e => e,
    })
}
