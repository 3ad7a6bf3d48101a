//! Variational-EM speech enhancement.
//!
//! A noisy STFT frame is modelled as `x_t = sqrt(g_t) s_t + b_t`, with
//! `s_t` drawn from a trained speech prior and `b_t ~ N_c(0, diag(W h_t))`.
//! Every EM iteration runs
//!
//! 1. a MAP E-step: Adam ascent over the latent path `z_{1:T}` and the
//!    log-gains `zeta_t = ln g_t` of
//!    `sum_t [log p(x_t | z_t, g_t) + log p(z_t | z_{t-1}, v_t) + log Gamma(g_t; alpha, beta)]`,
//! 2. one Itakura-Saito multiplicative sweep over `W` then `H`,
//! 3. in [`GainMode::Multiplicative`] only, a multiplicative gain update
//!    (the E-step then leaves the gains alone and drops the gamma term).
//!
//! The speech estimate is the Wiener posterior mean
//! `g_t sigma^2 / (g_t sigma^2 + W h_t) * x_t`.
//!
//! The gamma prior is evaluated on `g` itself; no change-of-variables term
//! for `zeta` is added.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::models::{complex_gaussian_loglik, GenerativeModel, VAR_FLOOR};
use crate::nnet::{self, opt_step, AdamConfig, OptimState, ParamSet, Tape, Tensor, Var};
use crate::par;
use crate::signal::{istft, stft, ComplexSpectrogram, StftConfig, Waveform};

/// Floor applied to NMF entries after every update and to total variances.
pub const NMF_FLOOR: f64 = 1e-12;

/// Largest spectral gain the Wiener filter applies.
pub const MAX_WIENER_GAIN: f64 = 1.0 - 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainMode {
    /// Gains are MAP-estimated with the latents under a gamma prior.
    #[default]
    GammaMap,
    /// Gains follow the multiplicative rule in the M-step, without a prior.
    Multiplicative,
}

impl GainMode {
    pub fn key(self) -> &'static str {
        match self {
            GainMode::GammaMap => "gamma_map",
            GainMode::Multiplicative => "multiplicative",
        }
    }
}

impl fmt::Display for GainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for GainMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "gamma_map" | "gamma" => Ok(GainMode::GammaMap),
            "multiplicative" | "mult" => Ok(GainMode::Multiplicative),
            _ => Err(Error::InvalidArgument(format!("unknown gain mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnhanceConfig {
    pub em_iters: usize,
    /// Adam steps per E-step; 0 skips the E-step.
    pub estep_iters: usize,
    pub estep_lr: f64,
    /// NMF rank K.
    pub rank: usize,
    pub gain_mode: GainMode,
    /// Gamma prior shape.
    pub alpha: f64,
    /// Gamma prior rate.
    pub beta: f64,
    pub seed: u64,
}

impl Default for EnhanceConfig {
    fn default() -> Self {
        Self {
            em_iters: 100,
            estep_iters: 20,
            estep_lr: 1e-3,
            rank: 8,
            gain_mode: GainMode::GammaMap,
            alpha: 1.0,
            beta: 1.0,
            seed: 0,
        }
    }
}

impl EnhanceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.em_iters == 0 {
            return Err(Error::Config("em_iters must be positive".into()));
        }
        if self.rank == 0 {
            return Err(Error::Config("rank must be positive".into()));
        }
        if !(self.estep_lr > 0.0 && self.estep_lr.is_finite()) {
            return Err(Error::Config("estep_lr must be positive and finite".into()));
        }
        GammaPrior::new(self.alpha, self.beta).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaPrior {
    pub alpha: f64,
    pub beta: f64,
}

impl GammaPrior {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "gamma prior needs positive finite alpha and beta, got {alpha}, {beta}"
            )));
        }
        Ok(Self { alpha, beta })
    }

    fn log_norm(&self) -> f64 {
        self.alpha * self.beta.ln() - ln_gamma(self.alpha)
    }
}

/// `log Gamma(g; alpha, beta)` with rate `beta`.
pub fn gamma_logpdf(g: f64, alpha: f64, beta: f64) -> Result<f64> {
    let prior = GammaPrior::new(alpha, beta)?;
    if !(g > 0.0 && g.is_finite()) {
        return Err(Error::InvalidArgument(format!("gamma density needs g > 0, got {g}")));
    }
    Ok(prior.log_norm() + (alpha - 1.0) * g.ln() - beta * g)
}

/// Per-frame gains `g_{1:T}` and their prior.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSequence {
    pub g: Vec<f64>,
    pub alpha: f64,
    pub beta: f64,
    pub mode: GainMode,
}

impl GainSequence {
    /// All-one gains.
    pub fn ones(frames: usize, cfg: &EnhanceConfig) -> Self {
        Self {
            g: vec![1.0; frames],
            alpha: cfg.alpha,
            beta: cfg.beta,
            mode: cfg.gain_mode,
        }
    }

    pub fn validate(&self) -> Result<()> {
        GammaPrior::new(self.alpha, self.beta)?;
        if self.g.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::InvalidArgument("gains must be positive and finite".into()));
        }
        Ok(())
    }

    /// The gamma prior entering the E-step objective, if any.
    pub fn prior(&self) -> Option<GammaPrior> {
        match self.mode {
            GainMode::GammaMap => Some(GammaPrior {
                alpha: self.alpha,
                beta: self.beta,
            }),
            GainMode::Multiplicative => None,
        }
    }

    pub fn mean(&self) -> f64 {
        if self.g.is_empty() {
            0.0
        } else {
            self.g.iter().sum::<f64>() / self.g.len() as f64
        }
    }

    pub fn log_gains(&self) -> Vec<f64> {
        self.g.iter().map(|g| g.ln()).collect()
    }
}

/// Noise variance model `W H` (`F x K` times `K x T`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseNMF {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
}

impl NoiseNMF {
    /// Uniform(0, 1) entries, floored.
    pub fn random<R: Rng + ?Sized>(freq_bins: usize, rank: usize, frames: usize, rng: &mut R) -> Self {
        let mut draw = |r, c| Array2::from_shape_simple_fn((r, c), || rng.random::<f64>().max(NMF_FLOOR));
        let w = draw(freq_bins, rank);
        let h = draw(rank, frames);
        Self { w, h }
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    pub fn frames(&self) -> usize {
        self.h.ncols()
    }

    /// `W H`, `F x T`.
    pub fn variance(&self) -> Array2<f64> {
        self.w.dot(&self.h)
    }

    pub fn validate(&self, freq_bins: usize, frames: usize) -> Result<()> {
        if self.w.nrows() != freq_bins || self.h.ncols() != frames || self.h.nrows() != self.w.ncols() {
            return Err(Error::Shape(format!(
                "NMF factors {:?} x {:?} do not fit a {freq_bins} x {frames} spectrogram",
                self.w.dim(),
                self.h.dim()
            )));
        }
        if self.w.iter().chain(self.h.iter()).any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::InvalidArgument("NMF factors must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// `V = G Sigma_s + W H`, `F x T`, floored.
pub fn total_variance(speech_var: &Array2<f64>, gains: &[f64], noise_var: &Array2<f64>) -> Array2<f64> {
    let mut v = speech_var.clone();
    for (mut col, g) in v.axis_iter_mut(Axis(1)).zip(gains) {
        col *= *g;
    }
    v += noise_var;
    v.mapv_inplace(|x| x.max(NMF_FLOOR));
    v
}

fn check_ft(what: &str, a: &Array2<f64>, shape: (usize, usize)) -> Result<()> {
    if a.dim() != shape {
        return Err(Error::Shape(format!("{what} is {:?}, expected {shape:?}", a.dim())));
    }
    Ok(())
}

/// `log p(x_t | z_t, g_t)` for frame `t`.
pub fn noisy_loglik(
    x_t: &[Complex64],
    z_t: &[f64],
    g_t: f64,
    v_t: Option<&[f64]>,
    model: &GenerativeModel,
    nmf: &NoiseNMF,
    t: usize,
) -> Result<f64> {
    if !(g_t > 0.0 && g_t.is_finite()) {
        return Err(Error::InvalidArgument(format!("gain must be positive, got {g_t}")));
    }
    if t >= nmf.frames() {
        return Err(Error::Shape(format!("frame {t} outside {} NMF frames", nmf.frames())));
    }
    let speech = model.decode_variance(z_t, v_t)?;
    if x_t.len() != speech.len() || nmf.w.nrows() != speech.len() {
        return Err(Error::Shape("frame, model and NMF bin counts differ".into()));
    }
    let noise = nmf.w.dot(&nmf.h.column(t));
    let var: Vec<f64> = speech
        .iter()
        .zip(noise.iter())
        .map(|(s, n)| (g_t * s + n).max(NMF_FLOOR))
        .collect();
    complex_gaussian_loglik(x_t, &var)
}

/// The MAP objective of the E-step for fixed `W, H`, as a function of the
/// latent path (`T x L`) and the log-gains.
pub struct MapObjective<'m> {
    model: &'m GenerativeModel,
    /// `|x|^2`, `T x F`.
    power: Array2<f64>,
    /// Standardized visual rows, `T x D_v`.
    visual: Option<Array2<f64>>,
    /// `(W H)^T`, `T x F`.
    noise_var: Array2<f64>,
    prior: Option<GammaPrior>,
}

impl<'m> MapObjective<'m> {
    /// `visual` holds raw features (`T x D_v`); audio-only models ignore it.
    pub fn new(
        model: &'m GenerativeModel,
        x: &ComplexSpectrogram,
        visual: Option<&Array2<f64>>,
        nmf: &NoiseNMF,
        prior: Option<GammaPrior>,
    ) -> Result<Self> {
        if x.freq_bins() != model.freq_bins() {
            return Err(Error::Shape(format!(
                "spectrogram has {} bins, model has {}",
                x.freq_bins(),
                model.freq_bins()
            )));
        }
        let frames = x.frames();
        if frames == 0 {
            return Err(Error::Empty("noisy spectrogram"));
        }
        nmf.validate(x.freq_bins(), frames)?;
        let visual = model.visual_input(visual)?;
        if let Some(v) = &visual {
            if v.nrows() != frames {
                return Err(Error::Shape(format!(
                    "{} visual rows for {frames} STFT frames",
                    v.nrows()
                )));
            }
        }
        Ok(Self {
            model,
            power: x.power()?.reversed_axes().as_standard_layout().to_owned(),
            visual,
            noise_var: nmf.variance().reversed_axes().as_standard_layout().to_owned(),
            prior,
        })
    }

    pub fn frames(&self) -> usize {
        self.power.nrows()
    }

    pub fn set_noise(&mut self, nmf: &NoiseNMF) -> Result<()> {
        nmf.validate(self.power.ncols(), self.frames())?;
        self.noise_var = nmf.variance().reversed_axes().as_standard_layout().to_owned();
        Ok(())
    }

    fn check(&self, z: &Array2<f64>, log_gain: &[f64]) -> Result<()> {
        check_ft("latent path", z, (self.frames(), self.model.latent_dim()))?;
        if log_gain.len() != self.frames() {
            return Err(Error::Shape(format!(
                "{} log-gains for {} frames",
                log_gain.len(),
                self.frames()
            )));
        }
        Ok(())
    }

    fn build<'t>(&self, tape: &'t Tape, z: Var<'t>, zeta: Var<'t>) -> Var<'t> {
        let net = self.model.bind(tape, false);
        let (frames, bins) = self.power.dim();
        let l = self.model.latent_dim();
        let vis = self.visual.as_ref().map(|v| tape.constant(v.clone()));

        let (_, speech) = net.decoder(z, vis);
        let g = zeta.exp();
        let v = speech
            .mul(g)
            .add(tape.constant(self.noise_var.clone()))
            .clamp_min(NMF_FLOOR);
        let lik = v
            .ln()
            .add(tape.constant(self.power.clone()).div(v))
            .sum()
            .neg()
            .add_scalar(-((frames * bins) as f64) * PI.ln());

        let zero = tape.constant(Tensor::zeros((1, l)));
        let z_prev = if frames == 1 {
            zero
        } else {
            Var::concat_rows(&[zero, z.slice_rows(0, frames - 1)])
        };
        let (mu, var) = net.transition(z_prev, vis);
        let prior = var
            .ln()
            .add(z.sub(mu).square().div(var))
            .sum()
            .scale(-0.5)
            .add_scalar(-0.5 * (frames * l) as f64 * (2.0 * PI).ln());

        let mut j = lik.add(prior);
        if let Some(p) = self.prior {
            let gamma = zeta
                .scale(p.alpha - 1.0)
                .sub(g.scale(p.beta))
                .sum()
                .add_scalar(frames as f64 * p.log_norm());
            j = j.add(gamma);
        }
        j
    }

    fn gain_column(log_gain: &[f64]) -> Tensor {
        Tensor::from_shape_vec((log_gain.len(), 1), log_gain.to_vec()).expect("column")
    }

    pub fn value(&self, z: &Array2<f64>, log_gain: &[f64]) -> Result<f64> {
        self.check(z, log_gain)?;
        let tape = Tape::new();
        let out = self.build(
            &tape,
            tape.constant(z.clone()),
            tape.constant(Self::gain_column(log_gain)),
        );
        Ok(out.item())
    }

    /// Objective with its gradients with respect to `z` and the log-gains.
    pub fn value_and_grad(&self, z: &Array2<f64>, log_gain: &[f64]) -> Result<(f64, Array2<f64>, Vec<f64>)> {
        self.check(z, log_gain)?;
        let mut vars = ParamSet::new();
        vars.insert("z", z.clone())?;
        vars.insert("zeta", Self::gain_column(log_gain))?;
        let (value, mut grads) = nnet::value_and_grad(&vars, |tape, b| Ok(self.build(tape, b.get("z"), b.get("zeta"))))?;
        let gz = grads.remove("z").expect("bound");
        let gzeta = grads.remove("zeta").expect("bound").into_raw_vec_and_offset().0;
        Ok((value, gz, gzeta))
    }

    /// Decoded speech variances for `z`, `F x T`.
    pub fn speech_variance(&self, z: &Array2<f64>) -> Result<Array2<f64>> {
        check_ft("latent path", z, (self.frames(), self.model.latent_dim()))?;
        let tape = Tape::new();
        let net = self.model.bind(&tape, false);
        let vis = self.visual.as_ref().map(|v| tape.constant(v.clone()));
        let (_, var) = net.decoder(tape.constant(z.clone()), vis);
        Ok(var.value().reversed_axes().as_standard_layout().to_owned())
    }
}

/// Result of one E-step.
#[derive(Debug, Clone, PartialEq)]
pub struct EStep {
    pub z: Array2<f64>,
    pub gains: GainSequence,
    /// Objective before the first step and after every step.
    pub trace: Vec<f64>,
}

/// Runs `iters` Adam steps of ascent from `(z_init, gains)` on `objective`
/// with a fresh optimizer state. Gains move only in gamma-MAP mode.
pub fn run_estep(
    objective: &MapObjective<'_>,
    z_init: &Array2<f64>,
    gains: &GainSequence,
    iters: usize,
    lr: f64,
) -> Result<EStep> {
    gains.validate()?;
    let update_gain = gains.mode == GainMode::GammaMap;
    let mut vars = ParamSet::new();
    vars.insert("z", z_init.clone())?;
    vars.insert("zeta", MapObjective::gain_column(&gains.log_gains()))?;
    let mut state = OptimState::new(&vars, AdamConfig::with_lr(lr));
    let mut trace = Vec::with_capacity(iters + 1);
    for it in 0..iters {
        let zeta = vars.get("zeta").expect("zeta").as_slice().expect("contiguous").to_vec();
        let (value, gz, gzeta) = objective.value_and_grad(vars.get("z").expect("z"), &zeta)?;
        if !value.is_finite() {
            return Err(Error::Diverged {
                iteration: it,
                what: "E-step objective".into(),
            });
        }
        trace.push(value);
        let mut step = ParamSet::new();
        step.insert("z", -gz)?;
        if update_gain {
            step.insert("zeta", -MapObjective::gain_column(&gzeta))?;
        }
        opt_step(&mut state, &mut vars, &step).map_err(|e| Error::Diverged {
            iteration: it,
            what: format!("E-step gradient: {e}"),
        })?;
    }
    let z = vars.remove("z").expect("z");
    let zeta = vars.remove("zeta").expect("zeta");
    let g: Vec<f64> = zeta.iter().map(|x| x.exp()).collect();
    let final_value = objective.value(&z, &zeta.into_raw_vec_and_offset().0)?;
    if !final_value.is_finite() {
        return Err(Error::Diverged {
            iteration: iters,
            what: "E-step objective".into(),
        });
    }
    trace.push(final_value);
    Ok(EStep {
        z,
        gains: GainSequence { g, ..gains.clone() },
        trace,
    })
}

/// MAP E-step for a noisy spectrogram under the current noise model.
pub fn estep_map(
    x: &ComplexSpectrogram,
    visual: Option<&Array2<f64>>,
    model: &GenerativeModel,
    nmf: &NoiseNMF,
    z_init: &Array2<f64>,
    gains: &GainSequence,
    cfg: &EnhanceConfig,
) -> Result<EStep> {
    let objective = MapObjective::new(model, x, visual, nmf, gains.prior())?;
    run_estep(&objective, z_init, gains, cfg.estep_iters, cfg.estep_lr)
}

/// `-log p(X | V)` summed over the grid, for `V = G Sigma_s + W H`.
pub fn nmf_neg_loglik(power: &Array2<f64>, speech_var: &Array2<f64>, gains: &[f64], nmf: &NoiseNMF) -> f64 {
    let v = total_variance(speech_var, gains, &nmf.variance());
    v.iter()
        .zip(power.iter())
        .map(|(v, p)| PI.ln() + v.ln() + p / v)
        .sum()
}

fn nmf_inputs(power: &Array2<f64>, speech_var: &Array2<f64>, gains: &[f64], nmf: &NoiseNMF) -> Result<()> {
    let shape = power.dim();
    check_ft("speech variance", speech_var, shape)?;
    if gains.len() != shape.1 {
        return Err(Error::Shape(format!("{} gains for {} frames", gains.len(), shape.1)));
    }
    nmf.validate(shape.0, shape.1)
}

/// `(|X|^2 / V^2, 1 / V)` for the current factors.
fn nmf_ratios(power: &Array2<f64>, speech_var: &Array2<f64>, gains: &[f64], nmf: &NoiseNMF) -> (Array2<f64>, Array2<f64>) {
    let v = total_variance(speech_var, gains, &nmf.variance());
    let inv = v.mapv(|x| 1.0 / x);
    let mut q = power / &v;
    q /= &v;
    (q, inv)
}

/// One Itakura-Saito multiplicative sweep: `W`, then `H` with the updated
/// `W`. `power` and `speech_var` are `F x T`.
pub fn nmf_sweep(power: &Array2<f64>, speech_var: &Array2<f64>, gains: &[f64], nmf: &mut NoiseNMF) -> Result<()> {
    nmf_inputs(power, speech_var, gains, nmf)?;
    let (q, inv) = nmf_ratios(power, speech_var, gains, nmf);
    let ht = nmf.h.t();
    let num = q.dot(&ht);
    let den = inv.dot(&ht);
    ndarray::Zip::from(&mut nmf.w)
        .and(&num)
        .and(&den)
        .for_each(|w, n, d| *w = (*w * (n / d)).max(NMF_FLOOR));

    let (q, inv) = nmf_ratios(power, speech_var, gains, nmf);
    let wt = nmf.w.t();
    let num = wt.dot(&q);
    let den = wt.dot(&inv);
    ndarray::Zip::from(&mut nmf.h)
        .and(&num)
        .and(&den)
        .for_each(|h, n, d| *h = (*h * (n / d)).max(NMF_FLOOR));
    Ok(())
}

/// `g_t <- g_t * [sum_f |x|^2 sigma^2 / V^2] / [sum_f sigma^2 / V]`.
pub fn multiplicative_gain_update(
    power: &Array2<f64>,
    speech_var: &Array2<f64>,
    gains: &mut [f64],
    nmf: &NoiseNMF,
) -> Result<()> {
    nmf_inputs(power, speech_var, gains, nmf)?;
    let (q, inv) = nmf_ratios(power, speech_var, gains, nmf);
    for (t, g) in gains.iter_mut().enumerate() {
        let s = speech_var.column(t);
        let num: f64 = s.iter().zip(q.column(t)).map(|(s, q)| s * q).sum();
        let den: f64 = s.iter().zip(inv.column(t)).map(|(s, i)| s * i).sum();
        *g = (*g * (num / den)).max(NMF_FLOOR);
    }
    Ok(())
}

/// M-step over `W, H` for the latent path `z` (`T x L`) and gains.
pub fn mstep_nmf(
    x: &ComplexSpectrogram,
    z: &Array2<f64>,
    gains: &GainSequence,
    visual: Option<&Array2<f64>>,
    model: &GenerativeModel,
    nmf: &NoiseNMF,
) -> Result<NoiseNMF> {
    let speech = model.decode_frames(z, visual.filter(|_| model.kind.is_av()))?;
    let mut out = nmf.clone();
    nmf_sweep(&x.power()?, &speech.reversed_axes(), &gains.g, &mut out)?;
    Ok(out)
}

/// `g_t sigma^2 / (g_t sigma^2 + (W H)_t) * x_t` from explicit variances
/// (`F x T`).
pub fn wiener_filter(
    x: &ComplexSpectrogram,
    speech_var: &Array2<f64>,
    gains: &[f64],
    noise_var: &Array2<f64>,
) -> Result<ComplexSpectrogram> {
    let shape = x.data.dim();
    check_ft("speech variance", speech_var, shape)?;
    check_ft("noise variance", noise_var, shape)?;
    if gains.len() != shape.1 {
        return Err(Error::Shape(format!("{} gains for {} frames", gains.len(), shape.1)));
    }
    let mut out = x.clone();
    for ((f, t), s) in out.data.indexed_iter_mut() {
        let sv = (gains[t] * speech_var[[f, t]]).max(VAR_FLOOR);
        let nv = noise_var[[f, t]].max(NMF_FLOOR);
        *s *= (sv / (sv + nv)).min(MAX_WIENER_GAIN);
    }
    Ok(out)
}

/// Posterior-mean speech estimate under the model.
pub fn wiener_estimate(
    x: &ComplexSpectrogram,
    z: &Array2<f64>,
    gains: &GainSequence,
    visual: Option<&Array2<f64>>,
    model: &GenerativeModel,
    nmf: &NoiseNMF,
) -> Result<ComplexSpectrogram> {
    let speech = model.decode_frames(z, visual.filter(|_| model.kind.is_av()))?;
    wiener_filter(x, &speech.reversed_axes(), &gains.g, &nmf.variance())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub mean_gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub mode: GainMode,
    /// Row 0 is the initialization; row `i` follows EM iteration `i`.
    pub trace: Vec<TraceRow>,
    pub gains: Vec<f64>,
}

impl Diagnostics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,objective,mean_gain\n");
        for r in &self.trace {
            s.push_str(&format!("{},{:.17e},{:.17e}\n", r.iteration, r.objective, r.mean_gain));
        }
        s
    }

    pub fn gains_csv(&self) -> String {
        let mut s = String::from("frame,gain\n");
        for (t, g) in self.gains.iter().enumerate() {
            s.push_str(&format!("{t},{g:.17e}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Enhanced {
    pub waveform: Waveform,
    pub spectrogram: ComplexSpectrogram,
    pub z: Array2<f64>,
    pub nmf: NoiseNMF,
    pub diagnostics: Diagnostics,
}

/// Full enhancement of one noisy recording. `visual` rows must match the
/// STFT frame count; audio-only models ignore it.
pub fn enhance(
    noisy: &Waveform,
    visual: Option<&Array2<f64>>,
    model: &GenerativeModel,
    stft_cfg: &StftConfig,
    cfg: &EnhanceConfig,
) -> Result<Enhanced> {
    cfg.validate()?;
    let x = stft(noisy, stft_cfg)?;
    let visual = visual.filter(|_| model.kind.is_av());
    let frames = x.frames();
    let power_ft = x.power()?;

    let mut nmf = NoiseNMF::random(x.freq_bins(), cfg.rank, frames, &mut ChaCha8Rng::seed_from_u64(cfg.seed));
    let mut gains = GainSequence::ones(frames, cfg);
    let mut objective = MapObjective::new(model, &x, visual, &nmf, gains.prior())?;
    let mut z = model.encode_means(&power_ft.t().to_owned(), visual)?;

    let mut trace = Vec::with_capacity(cfg.em_iters + 1);
    let mut record = |iteration: usize, objective: f64, gains: &GainSequence| -> Result<()> {
        if !objective.is_finite() {
            return Err(Error::Diverged {
                iteration,
                what: "EM objective".into(),
            });
        }
        trace.push(TraceRow {
            iteration,
            objective,
            mean_gain: gains.mean(),
        });
        Ok(())
    };
    record(0, objective.value(&z, &gains.log_gains())?, &gains)?;

    for it in 1..=cfg.em_iters {
        let e = run_estep(&objective, &z, &gains, cfg.estep_iters, cfg.estep_lr).map_err(|err| match err {
            Error::Diverged { what, .. } => Error::Diverged { iteration: it, what },
            err => err,
        })?;
        z = e.z;
        gains = e.gains;
        let speech = objective.speech_variance(&z)?;
        nmf_sweep(&power_ft, &speech, &gains.g, &mut nmf)?;
        if gains.mode == GainMode::Multiplicative {
            multiplicative_gain_update(&power_ft, &speech, &mut gains.g, &nmf)?;
        }
        let finite = nmf.w.iter().chain(nmf.h.iter()).chain(gains.g.iter()).all(|x| x.is_finite());
        if !finite {
            return Err(Error::Diverged {
                iteration: it,
                what: "non-finite NMF factors or gains".into(),
            });
        }
        objective.set_noise(&nmf)?;
        record(it, objective.value(&z, &gains.log_gains())?, &gains)?;
    }

    let speech = objective.speech_variance(&z)?;
    let spectrogram = wiener_filter(&x, &speech, &gains.g, &nmf.variance())?;
    let waveform = istft(&spectrogram)?;
    Ok(Enhanced {
        waveform,
        spectrogram,
        z,
        nmf,
        diagnostics: Diagnostics {
            mode: gains.mode,
            trace,
            gains: gains.g,
        },
    })
}

/// Enhances several recordings concurrently. Item `i` uses the NMF seed
/// `item_seed(cfg.seed, i)`, so results do not depend on the thread count.
pub fn enhance_batch(
    items: &[(Waveform, Option<Array2<f64>>)],
    model: &GenerativeModel,
    stft_cfg: &StftConfig,
    cfg: &EnhanceConfig,
) -> Vec<Result<Enhanced>> {
    par::map_range(items.len(), |i| {
        let (w, v) = &items[i];
        let cfg = EnhanceConfig {
            seed: par::item_seed(cfg.seed, i as u64),
            ..cfg.clone()
        };
        enhance(w, v.as_ref(), model, stft_cfg, &cfg)
    })
}
