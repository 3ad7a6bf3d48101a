//! Synthetic audio-visual corpora, noise generation, SNR mixing and file
//! ingestion.
//!
//! The synthetic "speaker" is a harmonic source with a drifting
//! fundamental, shaped by a slowly varying log-spectral envelope over
//! `bands` frequency bands and gated by syllable-like activity. The visual
//! stream at STFT frame `t` is the vector of log band energies at that
//! frame, plus Gaussian noise whose level is set by `visual_snr` (dB).
//! Visual rows therefore carry information about the clean speech variance
//! by construction, and the amount is a single knob.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::models::PowerSequence;
use crate::par;
use crate::signal::{istft, stft, StftConfig, Waveform, WindowKind};

/// Lower bound of the syllable activity gain, so log energies stay finite.
const ACTIVITY_FLOOR: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Seconds.
    pub duration: f64,
    pub n_harmonics: usize,
    /// Envelope bands; also the visual feature dimension.
    pub bands: usize,
    /// Visual informativeness in dB; `inf` gives exact band energies and
    /// `-inf` pure noise.
    pub visual_snr: f64,
    /// RMS of the generated waveform.
    pub level: f64,
    /// Harmonics-to-noise ratio in dB: energy of the harmonic part over
    /// that of an envelope-shaped aspiration noise; `inf` is purely
    /// harmonic.
    pub hnr_db: f64,
    /// Standard deviation (nats) of the per-band log-envelope trajectories.
    pub envelope_depth: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            duration: 2.0,
            n_harmonics: 40,
            bands: 8,
            visual_snr: 20.0,
            level: 0.1,
            hnr_db: 5.0,
            envelope_depth: 2.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if self.n_harmonics == 0 || self.bands == 0 {
            return Err(Error::Config("n_harmonics and bands must be positive".into()));
        }
        if !(self.level > 0.0 && self.level.is_finite()) {
            return Err(Error::Config("level must be positive".into()));
        }
        if !(self.envelope_depth >= 0.0 && self.envelope_depth.is_finite()) {
            return Err(Error::Config("envelope_depth must be nonnegative".into()));
        }
        if self.hnr_db.is_nan() || self.hnr_db == f64::NEG_INFINITY {
            return Err(Error::Config("hnr_db must be a number above -inf".into()));
        }
        if self.visual_snr.is_nan() {
            return Err(Error::Config("visual_snr is NaN".into()));
        }
        Ok(())
    }
}

/// A clean utterance with visual rows aligned to its STFT frames.
#[derive(Debug, Clone, PartialEq)]
pub struct AVUtterance {
    pub id: String,
    pub clean: Waveform,
    /// `T x D_v`.
    pub visual: Array2<f64>,
}

impl AVUtterance {
    /// `|S|^2` as `T x F` rows together with the visual rows.
    pub fn power_sequence(&self, cfg: &StftConfig) -> Result<PowerSequence> {
        let power = stft(&self.clean, cfg)?.power()?.reversed_axes().as_standard_layout().to_owned();
        if power.nrows() != self.visual.nrows() {
            return Err(Error::Shape(format!(
                "utterance {} has {} STFT frames but {} visual rows",
                self.id,
                power.nrows(),
                self.visual.nrows()
            )));
        }
        Ok(PowerSequence {
            power,
            visual: Some(self.visual.clone()),
        })
    }
}

/// Smooth zero-mean, unit-variance random trajectory: white noise
/// convolved with a Gaussian kernel of width `width` frames.
fn smooth_process<R: Rng + ?Sized>(len: usize, width: f64, rng: &mut R) -> Vec<f64> {
    let half = (3.0 * width).ceil() as usize;
    let raw: Vec<f64> = (0..len + 2 * half).map(|_| rng.sample(StandardNormal)).collect();
    let kernel: Vec<f64> = (0..=2 * half)
        .map(|i| {
            let d = i as f64 - half as f64;
            (-0.5 * d * d / (width * width)).exp()
        })
        .collect();
    let norm = kernel.iter().map(|k| k * k).sum::<f64>().sqrt();
    (0..len)
        .map(|t| kernel.iter().zip(&raw[t..]).map(|(k, x)| k * x).sum::<f64>() / norm)
        .collect()
}

/// Syllable gating per frame: smooth bumps of 150-300 ms separated by
/// 50-200 ms pauses, between `ACTIVITY_FLOOR` and 1.
fn activity<R: Rng + ?Sized>(frames: usize, frame_rate: f64, rng: &mut R) -> Vec<f64> {
    let mut a = vec![ACTIVITY_FLOOR; frames];
    let mut t = rng.random_range(0.0..0.15) * frame_rate;
    while (t as usize) < frames {
        let len = rng.random_range(0.15..0.3) * frame_rate;
        let peak = rng.random_range(0.5..1.0);
        let start = t;
        for (i, slot) in a.iter_mut().enumerate().skip(start as usize) {
            let u = (i as f64 - start) / len;
            if u > 1.0 {
                break;
            }
            if u >= 0.0 {
                let bump = peak * (PI * u).sin().powi(2);
                *slot = slot.max(bump.max(ACTIVITY_FLOOR));
            }
        }
        t += len + rng.random_range(0.05..0.2) * frame_rate;
    }
    a
}

/// Piecewise-linear interpolation of band values (band centres evenly
/// spaced over `0..nyquist`) at frequency `freq`.
fn band_interp(values: &[f64], freq: f64, nyquist: f64) -> f64 {
    let bands = values.len();
    let pos = freq / nyquist * bands as f64 - 0.5;
    if pos <= 0.0 {
        return values[0];
    }
    let i = pos.floor() as usize;
    if i + 1 >= bands {
        return values[bands - 1];
    }
    let frac = pos - i as f64;
    values[i] * (1.0 - frac) + values[i + 1] * frac
}

struct SynthSignal {
    samples: Vec<f64>,
    /// Log band energies per control frame, `frames x bands`.
    log_energy: Array2<f64>,
}

/// Harmonic source and its per-frame log band energies. Control frame `t`
/// sits at sample `t * hop + frame_len / 2`.
fn synth_signal(cfg: &SynthConfig, sample_rate: u32, frame_len: usize, hop: usize, rng: &mut ChaCha8Rng) -> Result<SynthSignal> {
    cfg.validate()?;
    let sr = sample_rate as f64;
    let len = (cfg.duration * sr).round() as usize;
    if len < frame_len {
        return Err(Error::SignalTooShort { len, frame_len });
    }
    let frames = (len - frame_len) / hop + 1;
    let frame_rate = sr / hop as f64;
    let nyquist = sr / 2.0;

    // Log envelope: a spectral tilt plus smooth random trajectories per band.
    let tilt: Vec<f64> = (0..cfg.bands).map(|b| -2.5 * b as f64 / cfg.bands as f64).collect();
    let width = 0.06 * frame_rate;
    let tracks: Vec<Vec<f64>> = (0..cfg.bands).map(|_| smooth_process(frames, width, rng)).collect();
    let gate = activity(frames, frame_rate, rng);
    let log_energy = Array2::from_shape_fn((frames, cfg.bands), |(t, b)| tilt[b] + cfg.envelope_depth * tracks[b][t] + gate[t].ln());

    // Fundamental: random base with a slow +-8% drift.
    let f0_base = rng.random_range(80.0..300.0);
    let drift = smooth_process(frames, 2.0 * width, rng);
    let f0: Vec<f64> = drift.iter().map(|d| f0_base * (1.0 + 0.08 * d.tanh())).collect();
    let phases: Vec<f64> = (0..cfg.n_harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();

    // Harmonic amplitudes at control frames.
    let amps: Vec<Vec<f64>> = (0..frames)
        .map(|t| {
            let row: Vec<f64> = log_energy.row(t).to_vec();
            (1..=cfg.n_harmonics)
                .map(|k| {
                    let f = k as f64 * f0[t];
                    if f >= 0.95 * nyquist {
                        0.0
                    } else {
                        (0.5 * band_interp(&row, f, nyquist)).exp()
                    }
                })
                .collect()
        })
        .collect();

    let centre = |t: usize| (t * hop + frame_len / 2) as f64;
    let mut samples = vec![0.0; len];
    let mut phase = 0.0;
    let mut t = 0usize;
    for (n, out) in samples.iter_mut().enumerate() {
        let pos = n as f64;
        while t + 1 < frames && centre(t + 1) <= pos {
            t += 1;
        }
        let (t1, frac) = if t + 1 < frames && pos > centre(t) {
            (t + 1, (pos - centre(t)) / (centre(t + 1) - centre(t)))
        } else {
            (t, 0.0)
        };
        let f = f0[t] * (1.0 - frac) + f0[t1] * frac;
        phase += 2.0 * PI * f / sr;
        let mut acc = 0.0;
        for k in 0..cfg.n_harmonics {
            let a = amps[t][k] * (1.0 - frac) + amps[t1][k] * frac;
            if a > 0.0 {
                acc += a * ((k + 1) as f64 * phase + phases[k]).sin();
            }
        }
        *out = acc;
    }
    if cfg.hnr_db.is_finite() {
        let stft_cfg = StftConfig {
            frame_len,
            hop,
            window: WindowKind::Sine,
            sample_rate,
        };
        let noise = aspiration(&log_energy, &stft_cfg, len, rng)?;
        let (eh, en) = (energy(&samples), energy(&noise));
        if eh > 0.0 && en > 0.0 {
            let c = (eh / en * 10f64.powf(-cfg.hnr_db / 10.0)).sqrt();
            samples.iter_mut().zip(&noise).for_each(|(x, n)| *x += c * n);
        }
    }
    let rms = (samples.iter().map(|x| x * x).sum::<f64>() / len as f64).sqrt();
    if rms > 0.0 {
        let c = cfg.level / rms;
        samples.iter_mut().for_each(|x| *x *= c);
    }
    Ok(SynthSignal { samples, log_energy })
}

fn energy(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// White noise whose short-time power follows the log envelope.
fn aspiration(log_energy: &Array2<f64>, stft_cfg: &StftConfig, len: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let white: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let mut spec = stft(&Waveform::new(white, stft_cfg.sample_rate), stft_cfg)?;
    let nyquist = stft_cfg.sample_rate as f64 / 2.0;
    let bins = spec.freq_bins();
    for (t, mut col) in spec.data.columns_mut().into_iter().enumerate() {
        let row: Vec<f64> = log_energy.row(t.min(log_energy.nrows() - 1)).to_vec();
        for (f, x) in col.iter_mut().enumerate() {
            let freq = f as f64 * nyquist / (bins - 1) as f64;
            *x *= (0.5 * band_interp(&row, freq, nyquist)).exp();
        }
    }
    let mut out = istft(&spec)?.samples;
    out.resize(len, 0.0);
    Ok(out)
}

/// Visual rows from log band energies at the given informativeness.
fn visual_from_energy<R: Rng + ?Sized>(log_energy: &Array2<f64>, visual_snr: f64, rng: &mut R) -> Array2<f64> {
    if visual_snr == f64::INFINITY {
        return log_energy.clone();
    }
    if visual_snr == f64::NEG_INFINITY {
        return Array2::from_shape_simple_fn(log_energy.dim(), || rng.sample(StandardNormal));
    }
    let n = log_energy.len() as f64;
    let mean = log_energy.sum() / n;
    let std = (log_energy.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
    let noise_std = std * 10f64.powf(-visual_snr / 20.0);
    log_energy.mapv(|x| x + noise_std * rng.sample::<f64, _>(StandardNormal))
}

/// One synthetic utterance with visual rows aligned to `stft` frames.
pub fn synth_av_utterance(cfg: &SynthConfig, stft_cfg: &StftConfig) -> Result<AVUtterance> {
    stft_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sig = synth_signal(cfg, stft_cfg.sample_rate, stft_cfg.frame_len, stft_cfg.hop, &mut rng)?;
    let visual = visual_from_energy(&sig.log_energy, cfg.visual_snr, &mut rng);
    Ok(AVUtterance {
        id: format!("synth-{:016x}", cfg.seed),
        clean: Waveform::new(sig.samples, stft_cfg.sample_rate),
        visual,
    })
}

/// The noise-free log band energies that `synth_av_utterance` derives its
/// visual rows from.
pub fn synth_band_energies(cfg: &SynthConfig, stft_cfg: &StftConfig) -> Result<Array2<f64>> {
    stft_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    Ok(synth_signal(cfg, stft_cfg.sample_rate, stft_cfg.frame_len, stft_cfg.hop, &mut rng)?.log_energy)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    LowfreqRumble,
    BabbleLike,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 3] = [NoiseKind::White, NoiseKind::LowfreqRumble, NoiseKind::BabbleLike];

    pub fn key(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::LowfreqRumble => "lowfreq_rumble",
            NoiseKind::BabbleLike => "babble_like",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "white" => Ok(NoiseKind::White),
            "lowfreq_rumble" | "rumble" => Ok(NoiseKind::LowfreqRumble),
            "babble_like" | "babble" => Ok(NoiseKind::BabbleLike),
            _ => Err(Error::InvalidArgument(format!("unknown noise kind {s:?}"))),
        }
    }
}

/// Cutoff of each low-pass section of the rumble filter, Hz.
pub const RUMBLE_CUTOFF_HZ: f64 = 150.0;
/// Talkers summed into babble.
pub const BABBLE_TALKERS: usize = 6;

fn one_pole_lowpass(x: &mut [f64], cutoff: f64, sample_rate: f64) {
    let a = 1.0 - (-2.0 * PI * cutoff / sample_rate).exp();
    let mut y = 0.0;
    for v in x.iter_mut() {
        y += a * (*v - y);
        *v = y;
    }
}

pub fn gen_noise(kind: NoiseKind, duration: f64, sample_rate: u32, seed: u64) -> Result<Waveform> {
    if !(duration > 0.0 && duration.is_finite()) || sample_rate == 0 {
        return Err(Error::InvalidArgument("noise needs positive duration and sample rate".into()));
    }
    let len = (duration * sample_rate as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = match kind {
        NoiseKind::White => (0..len).map(|_| rng.sample(StandardNormal)).collect(),
        NoiseKind::LowfreqRumble => {
            let mut x: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
            one_pole_lowpass(&mut x, RUMBLE_CUTOFF_HZ, sample_rate as f64);
            one_pole_lowpass(&mut x, RUMBLE_CUTOFF_HZ, sample_rate as f64);
            x
        }
        NoiseKind::BabbleLike => {
            let mut acc = vec![0.0; len];
            let frame_len = (sample_rate as usize / 32).max(8) & !3;
            for _ in 0..BABBLE_TALKERS {
                let cfg = SynthConfig {
                    duration: len.max(frame_len) as f64 / sample_rate as f64,
                    seed: rng.random(),
                    ..SynthConfig::default()
                };
                let mut talker_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let sig = synth_signal(&cfg, sample_rate, frame_len, frame_len / 4, &mut talker_rng)?;
                acc.iter_mut().zip(&sig.samples).for_each(|(a, s)| *a += s);
            }
            acc
        }
    };
    Ok(Waveform::new(samples, sample_rate))
}

/// `noise` rescaled so that `10 log10(P_clean / P_noise) = snr_db`.
pub fn scale_noise_to_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    if clean.len() != noise.len() || clean.sample_rate != noise.sample_rate {
        return Err(Error::Shape(format!(
            "clean ({} samples at {} Hz) and noise ({} samples at {} Hz) differ",
            clean.len(),
            clean.sample_rate,
            noise.len(),
            noise.sample_rate
        )));
    }
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("SNR must be finite, got {snr_db}")));
    }
    clean.check_finite()?;
    noise.check_finite()?;
    let pn = noise.power();
    if pn <= 0.0 {
        return Err(Error::InvalidArgument("noise has zero power".into()));
    }
    let target = clean.power() / 10f64.powf(snr_db / 10.0);
    Ok(noise.scaled((target / pn).sqrt()))
}

/// `clean + noise`, with the noise rescaled to the requested SNR.
pub fn mix_at_snr(clean: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    let scaled = scale_noise_to_snr(clean, noise, snr_db)?;
    let samples = clean.samples.iter().zip(&scaled.samples).map(|(c, n)| c + n).collect();
    Ok(Waveform::new(samples, clean.sample_rate))
}

/// `10 log10(P_signal / P_noise)`.
pub fn measured_snr(signal: &Waveform, noise: &Waveform) -> f64 {
    10.0 * (signal.power() / noise.power()).log10()
}

const PCM_SCALE: f64 = 32768.0;

/// 16-bit PCM mono; samples outside `[-1, 1)` are clipped.
pub fn save_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    w.check_finite()?;
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for x in &w.samples {
        let q = (x * PCM_SCALE).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(q)?;
    }
    writer.finalize()?;
    Ok(())
}

pub fn load_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedAudio(format!(
            "{}: {}-bit {:?} samples, only 16-bit PCM is supported",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|s| s as f64 / PCM_SCALE))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Waveform::new(samples, spec.sample_rate))
}

const FEATURE_TENSOR: &str = "visual";

/// Visual features in the tensor container, optionally tagged with their
/// native frame rate (frames per second) for later alignment.
pub fn save_features(path: impl AsRef<Path>, features: &Array2<f64>, frame_rate: Option<f64>) -> Result<()> {
    let mut c = Container::new();
    c.attrs.insert("content".into(), "features".into());
    if let Some(r) = frame_rate {
        c.attrs.insert("frame_rate".into(), format!("{r:?}"));
    }
    c.tensors.insert(FEATURE_TENSOR.into(), features.clone());
    c.save(path)
}

/// Features and their frame rate, if recorded.
pub fn load_features(path: impl AsRef<Path>) -> Result<(Array2<f64>, Option<f64>)> {
    let path = path.as_ref();
    let c = Container::load(path)?;
    let with_path = |reason: String| Error::Format {
        path: Some(path.to_path_buf()),
        reason,
    };
    let t = c
        .tensors
        .get(FEATURE_TENSOR)
        .ok_or_else(|| with_path("no visual tensor".into()))?
        .clone();
    let rate = match c.attrs.get("frame_rate") {
        Some(r) => Some(
            r.parse::<f64>()
                .ok()
                .filter(|r| *r > 0.0 && r.is_finite())
                .ok_or_else(|| with_path(format!("bad frame_rate {r:?}")))?,
        ),
        None => None,
    };
    Ok((t, rate))
}

/// Nearest-frame resampling of features sampled at `frame_rate` (row `i`
/// at time `i / frame_rate`) onto the centres of `frames` STFT frames.
pub fn resample_nearest(features: &Array2<f64>, frame_rate: f64, stft_cfg: &StftConfig, frames: usize) -> Result<Array2<f64>> {
    if features.nrows() == 0 {
        return Err(Error::Empty("visual features"));
    }
    if !(frame_rate > 0.0 && frame_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad feature frame rate {frame_rate}")));
    }
    let last = features.nrows() - 1;
    let mut out = Array2::zeros((frames, features.ncols()));
    for t in 0..frames {
        let centre = (t * stft_cfg.hop + stft_cfg.frame_len / 2) as f64 / stft_cfg.sample_rate as f64;
        let i = ((centre * frame_rate).round() as usize).min(last);
        out.row_mut(t).assign(&features.row(i));
    }
    Ok(out)
}

/// Features aligned to `frames` STFT frames: used as-is when the row count
/// already matches, otherwise resampled from their recorded frame rate.
pub fn align_features(
    features: Array2<f64>,
    frame_rate: Option<f64>,
    stft_cfg: &StftConfig,
    frames: usize,
) -> Result<Array2<f64>> {
    if features.nrows() == frames {
        return Ok(features);
    }
    match frame_rate {
        Some(r) => resample_nearest(&features, r, stft_cfg, frames),
        None => Err(Error::Shape(format!(
            "{} feature rows for {frames} STFT frames and no frame_rate to resample from",
            features.nrows()
        ))),
    }
}

/// One manifest line: `id<TAB>wav<TAB>features`; `-` marks absent features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub wav: PathBuf,
    pub features: Option<PathBuf>,
}

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a manifest; relative paths resolve against its directory. Blank
/// lines and `#` comments are ignored.
pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() < 2 || cols.len() > 3 || cols[0].is_empty() {
            return Err(Error::Format {
                path: Some(path.to_path_buf()),
                reason: format!("line {}: expected id, wav and optional features", n + 1),
            });
        }
        let features = cols.get(2).filter(|c| !c.is_empty() && **c != "-").map(|c| resolve(base, c));
        out.push(ManifestEntry {
            id: cols[0].to_string(),
            wav: resolve(base, cols[1]),
            features,
        });
    }
    Ok(out)
}

/// Writes entries with paths made relative to the manifest's directory
/// where possible.
pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
    let mut s = String::new();
    for e in entries {
        let feat = e.features.as_deref().map(rel).unwrap_or_else(|| "-".into());
        s.push_str(&format!("{}\t{}\t{}\n", e.id, rel(&e.wav), feat));
    }
    fs::write(path, s)?;
    Ok(())
}

/// Loads a manifest entry as an utterance with frame-aligned features.
/// Entries without features get a zero-width visual matrix.
pub fn load_utterance(entry: &ManifestEntry, stft_cfg: &StftConfig) -> Result<AVUtterance> {
    let clean = load_wav(&entry.wav)?;
    if clean.sample_rate != stft_cfg.sample_rate {
        return Err(Error::UnsupportedAudio(format!(
            "{}: {} Hz, configuration expects {} Hz",
            entry.wav.display(),
            clean.sample_rate,
            stft_cfg.sample_rate
        )));
    }
    let frames = stft_cfg.frame_count(clean.len());
    let visual = match &entry.features {
        Some(p) => {
            let (f, rate) = load_features(p)?;
            align_features(f, rate, stft_cfg, frames)?
        }
        None => Array2::zeros((frames, 0)),
    };
    Ok(AVUtterance {
        id: entry.id.clone(),
        clean,
        visual,
    })
}

pub fn load_manifest_utterances(path: impl AsRef<Path>, stft_cfg: &StftConfig) -> Result<Vec<AVUtterance>> {
    let entries = read_manifest(path)?;
    par::map(&entries, |e| load_utterance(e, stft_cfg)).into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub utterances: usize,
    pub train_fraction: f64,
    pub valid_fraction: f64,
    /// SNRs (dB) of the noisy test mixtures.
    pub test_snrs: Vec<f64>,
    pub noise_kinds: Vec<NoiseKind>,
    pub synth: SynthConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            utterances: 60,
            train_fraction: 0.6,
            valid_fraction: 0.1,
            test_snrs: vec![-5.0, 0.0, 5.0],
            noise_kinds: vec![NoiseKind::White],
            synth: SynthConfig::default(),
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.utterances == 0 {
            return Err(Error::Config("corpus needs at least one utterance".into()));
        }
        let (a, b) = (self.train_fraction, self.valid_fraction);
        if !(a >= 0.0 && b >= 0.0 && a + b <= 1.0) {
            return Err(Error::Config("split fractions must be nonnegative and sum to at most 1".into()));
        }
        if self.test_snrs.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("test SNRs must be finite".into()));
        }
        self.synth.validate()
    }

    /// Split sizes `(train, valid, test)`.
    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let n = self.utterances;
        let train = ((n as f64) * self.train_fraction).round() as usize;
        let valid = (((n as f64) * self.valid_fraction).round() as usize).min(n - train.min(n));
        let train = train.min(n);
        (train, valid, n - train - valid)
    }
}

/// In-memory synthetic corpus: utterance `i` uses seed `item_seed(seed, i)`.
pub fn synth_utterances(cfg: &CorpusConfig, stft_cfg: &StftConfig, seed: u64) -> Result<Vec<AVUtterance>> {
    cfg.validate()?;
    par::map_range(cfg.utterances, |i| {
        let synth = SynthConfig {
            seed: par::item_seed(seed, i as u64),
            ..cfg.synth.clone()
        };
        let mut u = synth_av_utterance(&synth, stft_cfg)?;
        u.id = format!("utt{i:04}");
        Ok(u)
    })
    .into_iter()
    .collect()
}

/// A noisy test mixture: `clean + noise` at `snr` dB.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyItem {
    pub id: String,
    /// Index of the clean utterance.
    pub source: usize,
    pub noisy: Waveform,
    pub clean: Waveform,
    pub visual: Array2<f64>,
    pub snr: f64,
    pub noise: NoiseKind,
}

/// Mixes every utterance with every (noise kind, SNR) pair. Noise seeds
/// depend on `seed`, the utterance index and the noise kind only.
pub fn noisy_mixtures(utts: &[AVUtterance], snrs: &[f64], kinds: &[NoiseKind], seed: u64) -> Result<Vec<NoisyItem>> {
    let jobs: Vec<(usize, NoiseKind, f64)> = (0..utts.len())
        .flat_map(|i| kinds.iter().flat_map(move |k| snrs.iter().map(move |s| (i, *k, *s))))
        .collect();
    par::map(&jobs, |(i, kind, snr)| {
        let u = &utts[*i];
        let noise_seed = par::item_seed(par::item_seed(seed, *i as u64), *kind as u64);
        let duration = u.clean.len() as f64 / u.clean.sample_rate as f64;
        let mut noise = gen_noise(*kind, duration, u.clean.sample_rate, noise_seed)?;
        noise.samples.resize(u.clean.len(), 0.0);
        let noisy = mix_at_snr(&u.clean, &noise, *snr)?;
        Ok(NoisyItem {
            id: format!("{}_{}_{}", u.id, kind.key(), snr_tag(*snr)),
            source: *i,
            noisy,
            clean: u.clean.clone(),
            visual: u.visual.clone(),
            snr: *snr,
            noise: *kind,
        })
    })
    .into_iter()
    .collect()
}

/// File-name friendly SNR label, e.g. `m5db`, `0db`, `2.5db`.
pub fn snr_tag(snr: f64) -> String {
    let body = format!("{}", snr.abs());
    if snr < 0.0 {
        format!("m{body}db")
    } else {
        format!("{body}db")
    }
}

/// Columns of the noisy test list.
pub const NOISY_HEADER: &str = "id\tnoisy\tclean\tfeatures\tsnr\tnoise";

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyEntry {
    pub id: String,
    pub noisy: PathBuf,
    pub clean: PathBuf,
    pub features: Option<PathBuf>,
    pub snr: f64,
    pub noise: String,
}

pub fn read_noisy_list(path: impl AsRef<Path>) -> Result<Vec<NoisyEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let bad = |n: usize, why: &str| Error::Format {
        path: Some(path.to_path_buf()),
        reason: format!("line {}: {why}", n + 1),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') || line == NOISY_HEADER {
            continue;
        }
        let c: Vec<&str> = line.split('\t').collect();
        if c.len() != 6 {
            return Err(bad(n, "expected 6 tab-separated columns"));
        }
        out.push(NoisyEntry {
            id: c[0].into(),
            noisy: resolve(base, c[1]),
            clean: resolve(base, c[2]),
            features: (c[3] != "-").then(|| resolve(base, c[3])),
            snr: c[4].parse().map_err(|_| bad(n, "bad snr"))?,
            noise: c[5].into(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSummary {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub noisy: usize,
}

fn is_nonempty_dir(dir: &Path) -> Result<bool> {
    Ok(dir.is_dir() && fs::read_dir(dir)?.next().is_some())
}

/// Writes a synthetic corpus under `dir`:
///
/// ```text
/// clean/<id>.wav  visual/<id>.feat  noisy/<id>_<noise>_<snr>.wav
/// manifest.tsv train.tsv valid.tsv test.tsv noisy.tsv
/// ```
///
/// Refuses a non-empty `dir` unless `force` is set.
pub fn write_corpus(dir: impl AsRef<Path>, cfg: &CorpusConfig, stft_cfg: &StftConfig, seed: u64, force: bool) -> Result<CorpusSummary> {
    let dir = dir.as_ref();
    cfg.validate()?;
    stft_cfg.validate()?;
    if is_nonempty_dir(dir)? && !force {
        return Err(Error::InvalidArgument(format!(
            "{} exists and is not empty (use force to overwrite)",
            dir.display()
        )));
    }
    for sub in ["clean", "visual", "noisy"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let utts = synth_utterances(cfg, stft_cfg, seed)?;
    let entries: Vec<ManifestEntry> = utts
        .iter()
        .map(|u| ManifestEntry {
            id: u.id.clone(),
            wav: dir.join("clean").join(format!("{}.wav", u.id)),
            features: Some(dir.join("visual").join(format!("{}.feat", u.id))),
        })
        .collect();
    par::map_range(utts.len(), |i| -> Result<()> {
        save_wav(&entries[i].wav, &utts[i].clean)?;
        save_features(entries[i].features.as_ref().expect("set"), &utts[i].visual, None)
    })
    .into_iter()
    .collect::<Result<()>>()?;

    let (ntr, nva, nte) = cfg.split_sizes();
    write_manifest(dir.join("manifest.tsv"), &entries)?;
    write_manifest(dir.join("train.tsv"), &entries[..ntr])?;
    write_manifest(dir.join("valid.tsv"), &entries[ntr..ntr + nva])?;
    write_manifest(dir.join("test.tsv"), &entries[ntr + nva..])?;

    // Mix the stored (quantized) clean signals so noisy = clean + noise holds
    // for the files on disk.
    let stored: Vec<AVUtterance> = par::map(&entries[ntr + nva..], |e| load_utterance(e, stft_cfg))
        .into_iter()
        .collect::<Result<_>>()?;
    let noisy = noisy_mixtures(&stored, &cfg.test_snrs, &cfg.noise_kinds, par::item_seed(seed, u64::MAX))?;
    let mut list = format!("{NOISY_HEADER}\n");
    for item in &noisy {
        let u = item.source;
        let wav = format!("noisy/{}.wav", item.id);
        save_wav(dir.join(&wav), &item.noisy)?;
        list.push_str(&format!(
            "{}\tnoisy/{}.wav\tclean/{}.wav\tvisual/{}.feat\t{}\t{}\n",
            item.id, item.id, stored[u].id, stored[u].id, item.snr, item.noise
        ));
    }
    fs::write(dir.join("noisy.tsv"), list)?;
    Ok(CorpusSummary {
        train: ntr,
        valid: nva,
        test: nte,
        noisy: noisy.len(),
    })
}
