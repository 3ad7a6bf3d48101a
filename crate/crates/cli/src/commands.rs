use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use avdkf::data::{
    align_features, load_features, load_manifest_utterances, load_wav, read_noisy_list, save_wav, write_corpus,
    AVUtterance,
};
use avdkf::enhance::{enhance, enhance_batch, Enhanced};
use avdkf::metrics::{evaluate_corpus, EvalPair};
use avdkf::models::{GenerativeModel, PowerSequence};
use avdkf::signal::{StftConfig, Waveform};
use avdkf::train::{history_log, init_from, load_checkpoint, save_checkpoint, train_with_progress, CheckpointMeta};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::pairs::{read_pairs, write_pairs, PairEntry};

fn require(p: Option<PathBuf>, flag: &str, key: &str) -> Result<PathBuf> {
    p.ok_or_else(|| anyhow!("no {flag} given and paths.{key} is not set"))
}

pub fn synth(cfg: &RunConfig, out: Option<PathBuf>, force: bool) -> Result<()> {
    let dir = require(out.or_else(|| cfg.paths.corpus.clone()), "--out", "corpus")?;
    let started = Instant::now();
    let summary = write_corpus(&dir, &cfg.corpus, &cfg.stft, cfg.seed, force)
        .with_context(|| format!("writing corpus to {}", dir.display()))?;
    cfg.record(&dir)?;
    println!(
        "wrote {} clean utterances ({} train, {} valid, {} test) and {} noisy mixtures to {} in {:.1?}",
        summary.train + summary.valid + summary.test,
        summary.train,
        summary.valid,
        summary.test,
        summary.noisy,
        dir.display(),
        started.elapsed()
    );
    Ok(())
}

fn sequences(utts: &[AVUtterance], stft: &StftConfig) -> Result<Vec<PowerSequence>> {
    utts.iter().map(|u| Ok(u.power_sequence(stft)?)).collect()
}

fn load_split(corpus: &Path, split: &str, cfg: &RunConfig) -> Result<Vec<AVUtterance>> {
    let path = corpus.join(format!("{split}.tsv"));
    if !path.is_file() {
        bail!("manifest {} not found", path.display());
    }
    let utts = load_manifest_utterances(&path, &cfg.stft).with_context(|| format!("loading {}", path.display()))?;
    if utts.is_empty() {
        bail!("manifest {} is empty", path.display());
    }
    if cfg.kind.is_av() {
        for u in &utts {
            if u.visual.ncols() != cfg.model.visual_dim {
                bail!(
                    "{}: {} has {}-dimensional visual features but the model expects {}",
                    path.display(),
                    u.id,
                    u.visual.ncols(),
                    cfg.model.visual_dim
                );
            }
        }
    }
    Ok(utts)
}

pub fn train(cfg: &RunConfig, corpus: Option<PathBuf>, out: Option<PathBuf>, init: Option<PathBuf>, force: bool) -> Result<()> {
    let corpus = require(corpus.or_else(|| cfg.paths.corpus.clone()), "--corpus", "corpus")?;
    let run = require(out.or_else(|| cfg.paths.run.clone()), "--out", "run")?;
    let ckpt = run.join("model.ckpt");
    if ckpt.exists() && !force {
        bail!("{} exists (use --force to overwrite)", ckpt.display());
    }
    let train_set = sequences(&load_split(&corpus, "train", cfg)?, &cfg.stft)?;
    let valid_set = sequences(&load_split(&corpus, "valid", cfg)?, &cfg.stft)?;

    let mut model = GenerativeModel::new(cfg.kind, cfg.model.clone(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    if let Some(src) = init {
        let (source, _) = load_checkpoint(&src).with_context(|| format!("loading {}", src.display()))?;
        let copied = init_from(&mut model, &source);
        log::info!("initialized {} tensors from {}", copied.len(), src.display());
        if copied.is_empty() {
            log::warn!("{} shares no parameters with a {} model", src.display(), cfg.kind);
        }
    }
    model.fit_stats(&train_set, cfg.train.standardize_visual)?;
    cfg.record(&run)?;

    let started = Instant::now();
    let outcome = train_with_progress(model, &train_set, &valid_set, &cfg.train, |r| {
        println!("epoch {:4}  train ELBO {:12.3}  valid ELBO {:12.3}", r.epoch, r.train_elbo, r.valid_elbo);
    })?;
    fs::write(run.join("epochs.tsv"), history_log(&outcome.history))?;
    let meta = CheckpointMeta {
        epoch: outcome.best_epoch,
        valid_loss: outcome.best_valid_elbo().map_or(f64::NAN, |e| -e),
        config_hash: cfg.train.hash(),
    };
    save_checkpoint(&outcome.model, &meta, &ckpt)?;
    println!(
        "saved {} (best epoch {}{}) in {:.1?}",
        ckpt.display(),
        outcome.best_epoch,
        if outcome.stopped_early { ", stopped early" } else { "" },
        started.elapsed()
    );
    Ok(())
}

fn read_visual(model: &GenerativeModel, features: Option<&Path>, noisy: &Waveform, stft: &StftConfig) -> Result<Option<Array2<f64>>> {
    match (model.kind.is_av(), features) {
        (true, None) => bail!("{} requires visual features; pass them with --features", model.kind),
        (false, Some(p)) => {
            log::warn!("{} is audio-only; ignoring features {}", model.kind, p.display());
            Ok(None)
        }
        (false, None) => Ok(None),
        (true, Some(p)) => {
            let (f, rate) = load_features(p).with_context(|| format!("loading {}", p.display()))?;
            let frames = stft.frame_count(noisy.len());
            Ok(Some(align_features(f, rate, stft, frames)?))
        }
    }
}

fn read_noisy(path: &Path, stft: &StftConfig) -> Result<Waveform> {
    let w = load_wav(path).with_context(|| format!("loading {}", path.display()))?;
    if w.sample_rate != stft.sample_rate {
        bail!(
            "{} is sampled at {} Hz but the configuration expects {} Hz",
            path.display(),
            w.sample_rate,
            stft.sample_rate
        );
    }
    Ok(w)
}

/// Writes the enhanced waveform, padded to the input length, and its
/// diagnostics next to it.
fn write_enhanced(out: &Path, e: &Enhanced, input_len: usize) -> Result<()> {
    let mut w = e.waveform.clone();
    w.samples.resize(input_len, 0.0);
    if let Some(dir) = out.parent() {
        fs::create_dir_all(dir)?;
    }
    save_wav(out, &w).with_context(|| format!("writing {}", out.display()))?;
    e.diagnostics.write_csv(out.with_extension("diagnostics.csv"))?;
    fs::write(out.with_extension("gains.csv"), e.diagnostics.gains_csv())?;
    Ok(())
}

pub struct EnhanceJob {
    pub input: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub list: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

pub fn load_model(path: &Path) -> Result<GenerativeModel> {
    let (model, meta) = load_checkpoint(path).with_context(|| format!("loading {}", path.display()))?;
    log::info!("loaded {} from {} (epoch {})", model.kind, path.display(), meta.epoch);
    Ok(model)
}

pub fn enhance_cmd(cfg: &RunConfig, model: &GenerativeModel, job: EnhanceJob) -> Result<()> {
    match (&job.input, &job.list) {
        (Some(input), None) => {
            let output = job.output.clone().context("--output is required with --input")?;
            let noisy = read_noisy(input, &cfg.stft)?;
            let visual = read_visual(model, job.features.as_deref(), &noisy, &cfg.stft)?;
            let started = Instant::now();
            let e = enhance(&noisy, visual.as_ref(), model, &cfg.stft, &cfg.enhance)?;
            write_enhanced(&output, &e, noisy.len())?;
            println!("wrote {} in {:.1?}", output.display(), started.elapsed());
            Ok(())
        }
        (None, Some(list)) => {
            let out_dir = job.out_dir.clone().context("--out-dir is required with --list")?;
            let entries = read_noisy_list(list).with_context(|| format!("reading {}", list.display()))?;
            if entries.is_empty() {
                bail!("{} lists no recordings", list.display());
            }
            let mut items = Vec::with_capacity(entries.len());
            for e in &entries {
                let noisy = read_noisy(&e.noisy, &cfg.stft)?;
                let visual = read_visual(model, e.features.as_deref(), &noisy, &cfg.stft)?;
                items.push((noisy, visual));
            }
            let started = Instant::now();
            let results = enhance_batch(&items, model, &cfg.stft, &cfg.enhance);
            let mut pairs = Vec::new();
            let mut failed = 0;
            for ((entry, (noisy, _)), result) in entries.iter().zip(&items).zip(results) {
                match result {
                    Ok(e) => {
                        let out = out_dir.join(format!("{}.wav", entry.id));
                        write_enhanced(&out, &e, noisy.len())?;
                        pairs.push(PairEntry {
                            id: entry.id.clone(),
                            estimate: out,
                            reference: entry.clean.clone(),
                            input: Some(entry.noisy.clone()),
                            snr: entry.snr,
                            noise: entry.noise.clone(),
                            model: model.kind.label().to_string(),
                        });
                    }
                    Err(err) => {
                        log::error!("{}: {err}", entry.id);
                        failed += 1;
                    }
                }
            }
            write_pairs(&out_dir.join("pairs.tsv"), &pairs)?;
            cfg.record(&out_dir)?;
            println!(
                "enhanced {} of {} recordings into {} in {:.1?}",
                pairs.len(),
                entries.len(),
                out_dir.display(),
                started.elapsed()
            );
            if failed > 0 {
                bail!("{failed} recording(s) failed");
            }
            Ok(())
        }
        _ => bail!("give either --input with --output, or --list with --out-dir"),
    }
}

pub fn eval(cfg: &RunConfig, pairs: &Path, out: &Path) -> Result<()> {
    let list = read_pairs(pairs)?;
    for (line, why) in &list.malformed {
        log::warn!("{}:{line}: skipped ({why})", pairs.display());
    }
    if list.entries.is_empty() {
        bail!("{} contains no usable pairs", pairs.display());
    }
    let mut loaded = Vec::new();
    let mut unreadable = 0;
    for e in &list.entries {
        let read = || -> Result<EvalPair> {
            Ok(EvalPair {
                id: e.id.clone(),
                estimate: load_wav(&e.estimate)?,
                reference: load_wav(&e.reference)?,
                input: e.input.as_ref().map(load_wav).transpose()?,
                snr: e.snr,
                noise: e.noise.clone(),
                model: e.model.clone(),
            })
        };
        match read() {
            Ok(p) => loaded.push(p),
            Err(err) => {
                log::warn!("{}: skipped ({err:#})", e.id);
                unreadable += 1;
            }
        }
    }
    if loaded.is_empty() {
        bail!("none of the pairs in {} could be read", pairs.display());
    }
    let report = evaluate_corpus(&loaded, &cfg.stft)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("report.csv"), report.to_csv())?;
    let table = report.to_table();
    fs::write(out.join("report.txt"), &table)?;
    print!("{table}");
    let skipped = list.malformed.len() + unreadable + report.skipped.len();
    if skipped > 0 {
        eprintln!(
            "warning: skipped {skipped} pair(s): {} malformed, {unreadable} unreadable, {} unscorable",
            list.malformed.len(),
            report.skipped.len()
        );
    }
    Ok(())
}
