//! STFT analysis and weighted overlap-add synthesis with a sine window.
//!
//! Frames are taken without zero-padding: a signal of `n` samples yields
//! `floor((n - frame_len) / hop) + 1` frames and only the one-sided
//! spectrum (`frame_len / 2 + 1` bins) is stored.

use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WindowKind {
    #[default]
    Sine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StftConfig {
    pub frame_len: usize,
    pub hop: usize,
    #[serde(default)]
    pub window: WindowKind,
    pub sample_rate: u32,
}

impl Default for StftConfig {
    fn default() -> Self {
        Self::with_frame_len(1024, 16000)
    }
}

impl StftConfig {
    /// 75% overlap configuration for the given frame length.
    pub fn with_frame_len(frame_len: usize, sample_rate: u32) -> Self {
        Self {
            frame_len,
            hop: frame_len / 4,
            window: WindowKind::Sine,
            sample_rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_len == 0 || self.hop == 0 {
            return Err(Error::Config("frame_len and hop must be positive".into()));
        }
        if self.frame_len % self.hop != 0 {
            return Err(Error::Config(format!(
                "hop {} does not divide frame_len {}",
                self.hop, self.frame_len
            )));
        }
        if self.frame_len % 2 != 0 {
            return Err(Error::Config("frame_len must be even".into()));
        }
        if self.sample_rate == 0 {
            return Err(Error::Config("sample_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn freq_bins(&self) -> usize {
        self.frame_len / 2 + 1
    }

    /// Number of full frames that fit in `len` samples (0 if none).
    pub fn frame_count(&self, len: usize) -> usize {
        if len < self.frame_len {
            0
        } else {
            (len - self.frame_len) / self.hop + 1
        }
    }

    /// Length of the waveform produced by `istft` for `frames` frames.
    pub fn synth_len(&self, frames: usize) -> usize {
        if frames == 0 {
            0
        } else {
            (frames - 1) * self.hop + self.frame_len
        }
    }

    /// Samples at each edge of a synthesized signal that are not fully
    /// overlapped.
    pub fn edge_len(&self) -> usize {
        self.frame_len - self.hop
    }

    pub fn window(&self) -> Vec<f64> {
        sine_window(self.frame_len)
    }
}

/// `w[n] = sin(pi (n + 0.5) / N)`; its square sums to `N / (2 hop)` under
/// any hop dividing `N / 2`.
pub fn sine_window(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| (PI * (i as f64 + 0.5) / n as f64).sin())
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn energy(&self) -> f64 {
        self.samples.iter().map(|x| x * x).sum()
    }

    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.energy() / self.samples.len() as f64
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        if self.samples.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite("waveform samples"))
        }
    }

    /// Copy of `samples[start..end]` clamped to the signal.
    pub fn slice(&self, start: usize, end: usize) -> Waveform {
        let end = end.min(self.samples.len());
        let start = start.min(end);
        Waveform::new(self.samples[start..end].to_vec(), self.sample_rate)
    }

    pub fn scaled(&self, c: f64) -> Waveform {
        Waveform::new(self.samples.iter().map(|x| x * c).collect(), self.sample_rate)
    }
}

/// One-sided STFT, `freq_bins x frames`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrogram {
    pub data: Array2<Complex64>,
    pub config: StftConfig,
}

impl ComplexSpectrogram {
    pub fn zeros(config: StftConfig, frames: usize) -> Self {
        Self {
            data: Array2::zeros((config.freq_bins(), frames)),
            config,
        }
    }

    pub fn freq_bins(&self) -> usize {
        self.data.nrows()
    }

    pub fn frames(&self) -> usize {
        self.data.ncols()
    }

    pub fn power(&self) -> Result<Array2<f64>> {
        power(self)
    }

    pub fn scaled(&self, c: Complex64) -> Self {
        Self {
            data: self.data.mapv(|v| v * c),
            config: self.config,
        }
    }
}

struct Plans {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plans(n: usize) -> Plans {
    let mut planner = FftPlanner::new();
    Plans {
        forward: planner.plan_fft_forward(n),
        inverse: planner.plan_fft_inverse(n),
    }
}

pub fn stft(w: &Waveform, cfg: &StftConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    w.check_finite()?;
    if w.len() < cfg.frame_len {
        return Err(Error::SignalTooShort {
            len: w.len(),
            frame_len: cfg.frame_len,
        });
    }
    let n = cfg.frame_len;
    let frames = cfg.frame_count(w.len());
    let bins = cfg.freq_bins();
    let window = cfg.window();
    let fft = plans(n).forward;

    let columns: Vec<Vec<Complex64>> = par::map_range(frames, |t| {
        let start = t * cfg.hop;
        let mut buf: Vec<Complex64> = w.samples[start..start + n]
            .iter()
            .zip(&window)
            .map(|(x, wn)| Complex64::new(x * wn, 0.0))
            .collect();
        fft.process(&mut buf);
        buf.truncate(bins);
        buf
    });

    let mut data = Array2::zeros((bins, frames));
    for (t, col) in columns.into_iter().enumerate() {
        for (f, v) in col.into_iter().enumerate() {
            data[[f, t]] = v;
        }
    }
    Ok(ComplexSpectrogram { data, config: *cfg })
}

pub fn istft(s: &ComplexSpectrogram) -> Result<Waveform> {
    let cfg = s.config;
    cfg.validate()?;
    if s.freq_bins() != cfg.freq_bins() {
        return Err(Error::Shape(format!(
            "spectrogram has {} bins, config expects {}",
            s.freq_bins(),
            cfg.freq_bins()
        )));
    }
    let n = cfg.frame_len;
    let frames = s.frames();
    let window = cfg.window();
    let ifft = plans(n).inverse;
    let scale = 1.0 / n as f64;

    let segments: Vec<Vec<f64>> = par::map_range(frames, |t| {
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for f in 0..cfg.freq_bins() {
            buf[f] = s.data[[f, t]];
        }
        // DC and Nyquist imaginary parts are dropped by the real projection
        for f in 1..n / 2 {
            buf[n - f] = s.data[[f, t]].conj();
        }
        ifft.process(&mut buf);
        buf.iter()
            .zip(&window)
            .map(|(v, wn)| v.re * scale * wn)
            .collect()
    });

    let len = cfg.synth_len(frames);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    for (t, seg) in segments.iter().enumerate() {
        let start = t * cfg.hop;
        for (i, v) in seg.iter().enumerate() {
            out[start + i] += v;
            norm[start + i] += window[i] * window[i];
        }
    }
    for (o, d) in out.iter_mut().zip(&norm) {
        if *d > 0.0 {
            *o /= d;
        }
    }
    Ok(Waveform::new(out, cfg.sample_rate))
}

pub fn power(s: &ComplexSpectrogram) -> Result<Array2<f64>> {
    if s.data.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::NonFinite("spectrogram"));
    }
    Ok(s.data.mapv(|v| v.norm_sqr()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_wave(len: usize, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Waveform::new((0..len).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000)
    }

    #[test]
    fn zero_signal_gives_zero_spectrogram() {
        let w = Waveform::new(vec![0.0; 16000], 16000);
        let s = stft(&w, &StftConfig::default()).unwrap();
        assert_eq!(s.freq_bins(), 513);
        assert_eq!(s.frames(), (16000 - 1024) / 256 + 1);
        assert!(s.data.iter().all(|v| *v == Complex64::new(0.0, 0.0)));
    }

    #[test]
    fn constant_signal_dc_bin() {
        // independent oracle: direct summation of the window
        let oracle: f64 = (0..1024)
            .map(|n| (PI * (n as f64 + 0.5) / 1024.0).sin())
            .sum();
        assert!((oracle - 651.898).abs() < 1e-2, "oracle {oracle}");
        let w = Waveform::new(vec![1.0; 4096], 16000);
        let s = stft(&w, &StftConfig::default()).unwrap();
        for t in 0..s.frames() {
            let dc = s.data[[0, t]];
            assert!((dc.re - oracle).abs() < 1e-9);
            assert!(dc.im.abs() < 1e-9);
        }
    }

    #[test]
    fn too_short_and_non_finite_are_rejected() {
        let cfg = StftConfig::default();
        let short = Waveform::new(vec![0.0; 1000], 16000);
        assert!(matches!(
            stft(&short, &cfg),
            Err(Error::SignalTooShort { .. })
        ));
        let mut bad = vec![0.0; 2048];
        bad[7] = f64::NAN;
        assert!(matches!(
            stft(&Waveform::new(bad, 16000), &cfg),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn bad_hop_is_rejected() {
        let cfg = StftConfig {
            frame_len: 1024,
            hop: 300,
            window: WindowKind::Sine,
            sample_rate: 16000,
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn round_trip_interior() {
        let cfg = StftConfig::default();
        let w = random_wave(16000, 1);
        let y = istft(&stft(&w, &cfg).unwrap()).unwrap();
        let e = cfg.edge_len();
        let end = y.len() - e;
        let (mut num, mut den) = (0.0, 0.0);
        for i in e..end {
            num += (y.samples[i] - w.samples[i]).powi(2);
            den += w.samples[i].powi(2);
        }
        assert!((num / den).sqrt() < 1e-6);
    }

    #[test]
    fn istft_of_zero_and_linearity() {
        let cfg = StftConfig::with_frame_len(256, 8000);
        let z = ComplexSpectrogram::zeros(cfg, 10);
        assert!(istft(&z).unwrap().samples.iter().all(|x| *x == 0.0));

        let s = stft(&random_wave(2000, 2), &cfg).unwrap();
        let a = istft(&s).unwrap();
        let b = istft(&s.scaled(Complex64::new(3.0, 0.0))).unwrap();
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert!((3.0 * x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn inconsistent_spectrogram_is_rejected() {
        let cfg = StftConfig::with_frame_len(256, 8000);
        let mut s = ComplexSpectrogram::zeros(cfg, 4);
        s.config = StftConfig::with_frame_len(512, 8000);
        assert!(matches!(istft(&s), Err(Error::Shape(_))));
    }

    #[test]
    fn cola_constant() {
        for n in [256usize, 1024] {
            let w = sine_window(n);
            let hop = n / 4;
            for i in 0..hop {
                let s: f64 = (0..4).map(|k| w[i + k * hop].powi(2)).sum();
                assert!((s - 2.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn parseval_per_frame() {
        let cfg = StftConfig::with_frame_len(256, 8000);
        let w = random_wave(1500, 3);
        let s = stft(&w, &cfg).unwrap();
        let win = cfg.window();
        let n = cfg.frame_len;
        for t in 0..s.frames() {
            let time: f64 = (0..n)
                .map(|i| (w.samples[t * cfg.hop + i] * win[i]).powi(2))
                .sum();
            let mut freq = s.data[[0, t]].norm_sqr() + s.data[[n / 2, t]].norm_sqr();
            for f in 1..n / 2 {
                freq += 2.0 * s.data[[f, t]].norm_sqr();
            }
            freq /= n as f64;
            assert!((freq - time).abs() <= 1e-9 * time);
        }
    }

    #[test]
    fn power_values() {
        let cfg = StftConfig::with_frame_len(4, 8000);
        let mut s = ComplexSpectrogram::zeros(cfg, 1);
        s.data[[0, 0]] = Complex64::new(3.0, 4.0);
        let p = power(&s).unwrap();
        assert_eq!(p[[0, 0]], 25.0);
        assert_eq!(p[[1, 0]], 0.0);
        let c = Complex64::new(0.5, -2.0);
        let pc = power(&s.scaled(c)).unwrap();
        assert!((pc[[0, 0]] - c.norm_sqr() * 25.0).abs() < 1e-12);
        s.data[[2, 0]] = Complex64::new(f64::INFINITY, 0.0);
        assert!(power(&s).is_err());
    }
}
