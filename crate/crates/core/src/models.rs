//! Generative speech priors: A-VAE, AV-VAE, A-DKF and AV-DKF.
//!
//! All four share one decoder shape: `z_t` (and for AV kinds `v_t`) maps to
//! the log-variance of a zero-mean circular complex Gaussian over the `F`
//! STFT bins. The DKF kinds add a gated first-order transition prior on
//! `z_t` and a backward-recurrent encoder with a combiner over `z_{t-1}`.
//!
//! Visual fusion. Concatenating `[a; v]` in front of a weight matrix is
//! written as `a W_a + v W_v`; the `W_v` tensors are named `*.wv`, so the
//! audio-only tensors of an AV model keep the names and shapes of the
//! matching A model. The AV decoder's first hidden layer is
//! `tanh(z W + b) + tanh(z W_fz + v W_fv + b_f)`: the audio pathway plus a
//! fused pathway joined by a skip connection.
//!
//! Parameters live in one [`ParamSet`] with `dec.`, `trans.` and `enc.`
//! prefixes. Normalization statistics (`stats.`) are kept apart and never
//! trained.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, Axis};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnet::{self, init_dense, init_lstm, init_uniform, linear, Bound, ParamSet, Tape, Tensor, Var};
use crate::signal::{ComplexSpectrogram, StftConfig};

/// Lower bound applied to every variance.
pub const VAR_FLOOR: f64 = 1e-12;
/// Added to power before the encoder's log compression.
pub const LOG_POWER_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "a_vae")]
    AVae,
    #[serde(rename = "av_vae")]
    AvVae,
    #[serde(rename = "a_dkf")]
    ADkf,
    #[serde(rename = "av_dkf")]
    AvDkf,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::AVae, ModelKind::AvVae, ModelKind::ADkf, ModelKind::AvDkf];

    pub fn is_av(self) -> bool {
        matches!(self, ModelKind::AvVae | ModelKind::AvDkf)
    }

    pub fn is_dkf(self) -> bool {
        matches!(self, ModelKind::ADkf | ModelKind::AvDkf)
    }

    pub fn label(self) -> &'static str {
        match self {
            ModelKind::AVae => "A-VAE",
            ModelKind::AvVae => "AV-VAE",
            ModelKind::ADkf => "A-DKF",
            ModelKind::AvDkf => "AV-DKF",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            ModelKind::AVae => "a_vae",
            ModelKind::AvVae => "av_vae",
            ModelKind::ADkf => "a_dkf",
            ModelKind::AvDkf => "av_dkf",
        }
    }

    /// The audio-only counterpart (identity for A kinds).
    pub fn audio_only(self) -> ModelKind {
        match self {
            ModelKind::AvVae => ModelKind::AVae,
            ModelKind::AvDkf => ModelKind::ADkf,
            k => k,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        match norm.as_str() {
            "a_vae" => Ok(ModelKind::AVae),
            "av_vae" => Ok(ModelKind::AvVae),
            "a_dkf" => Ok(ModelKind::ADkf),
            "av_dkf" => Ok(ModelKind::AvDkf),
            _ => Err(Error::InvalidArgument(format!("unknown model kind {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDims {
    /// F, STFT bins.
    pub freq_bins: usize,
    /// L.
    pub latent_dim: usize,
    /// D_v; forced to 0 for audio-only kinds.
    pub visual_dim: usize,
    /// Hidden width of the single-layer VAE encoder and decoder.
    pub vae_hidden: usize,
    /// Hidden widths of the DKF decoder MLP.
    pub dkf_decoder_hidden: Vec<usize>,
    /// Backward-recurrent encoder state size.
    pub rnn_hidden: usize,
    /// Hidden width of the gate and proposal branches of the transition.
    pub transition_hidden: usize,
}

impl ModelDims {
    pub fn desk() -> Self {
        Self {
            freq_bins: 129,
            latent_dim: 4,
            visual_dim: 8,
            vae_hidden: 128,
            dkf_decoder_hidden: vec![128],
            rnn_hidden: 32,
            transition_hidden: 16,
        }
    }

    pub fn paper() -> Self {
        Self {
            freq_bins: 513,
            latent_dim: 16,
            visual_dim: 512,
            vae_hidden: 128,
            dkf_decoder_hidden: vec![32, 64, 128, 256],
            rnn_hidden: 128,
            transition_hidden: 32,
        }
    }

    /// Dims with `visual_dim` zeroed for audio-only kinds.
    pub fn for_kind(&self, kind: ModelKind) -> Self {
        let mut d = self.clone();
        if !kind.is_av() {
            d.visual_dim = 0;
        }
        d
    }

    fn validate(&self, kind: ModelKind) -> Result<()> {
        if self.freq_bins == 0 || self.latent_dim == 0 {
            return Err(Error::Config("freq_bins and latent_dim must be positive".into()));
        }
        if kind.is_av() != (self.visual_dim > 0) {
            return Err(Error::Config(format!(
                "{kind} requires visual_dim {} 0, got {}",
                if kind.is_av() { ">" } else { "=" },
                self.visual_dim
            )));
        }
        if self.vae_hidden == 0 || self.rnn_hidden == 0 || self.transition_hidden == 0 {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if self.dkf_decoder_hidden.is_empty() || self.dkf_decoder_hidden.contains(&0) {
            return Err(Error::Config("dkf_decoder_hidden needs positive widths".into()));
        }
        Ok(())
    }

    fn decoder_hidden(&self, kind: ModelKind) -> Vec<usize> {
        if kind.is_dkf() {
            self.dkf_decoder_hidden.clone()
        } else {
            vec![self.vae_hidden]
        }
    }
}

/// Mean and variance of one approximate-posterior factor.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorStep {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Clean training sequence: `|s_t|^2` rows (`T x F`) and, for AV kinds,
/// visual rows (`T x D_v`).
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSequence {
    pub power: Array2<f64>,
    pub visual: Option<Array2<f64>>,
}

impl PowerSequence {
    pub fn frames(&self) -> usize {
        self.power.nrows()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeModel {
    pub kind: ModelKind,
    pub dims: ModelDims,
    /// Trainable tensors (`dec.*`, `trans.*`, `enc.*`).
    pub params: ParamSet,
    /// Input normalization (`stats.*`).
    pub stats: ParamSet,
}

fn row_of(xs: &[f64]) -> Tensor {
    Tensor::from_shape_vec((1, xs.len()), xs.to_vec()).expect("row")
}

fn into_vec(t: Tensor) -> Vec<f64> {
    t.into_raw_vec_and_offset().0
}

impl GenerativeModel {
    /// Freshly initialized model: uniform(+-1/sqrt(fan_in)) weights, zero
    /// biases, identity normalization.
    pub fn new<R: Rng + ?Sized>(kind: ModelKind, dims: ModelDims, rng: &mut R) -> Result<Self> {
        let dims = dims.for_kind(kind);
        dims.validate(kind)?;
        let (f, l, dv) = (dims.freq_bins, dims.latent_dim, dims.visual_dim);
        let av = kind.is_av();
        let mut p = ParamSet::new();

        // decoder
        let hidden = dims.decoder_hidden(kind);
        init_dense(&mut p, "dec.h0", l, hidden[0], rng)?;
        if av {
            let fan = l + dv;
            p.insert("dec.fuse.wz", init_uniform(l, hidden[0], fan, rng))?;
            p.insert("dec.fuse.wv", init_uniform(dv, hidden[0], fan, rng))?;
            p.insert("dec.fuse.b", Tensor::zeros((1, hidden[0])))?;
        }
        for i in 1..hidden.len() {
            init_dense(&mut p, &format!("dec.h{i}"), hidden[i - 1], hidden[i], rng)?;
        }
        init_dense(&mut p, "dec.out", *hidden.last().expect("nonempty"), f, rng)?;

        if kind.is_dkf() {
            let th = dims.transition_hidden;
            let fan = l + dv;
            for name in ["trans.gate1", "trans.prop1"] {
                p.insert(format!("{name}.w"), init_uniform(l, th, fan, rng))?;
                if av {
                    p.insert(format!("{name}.wv"), init_uniform(dv, th, fan, rng))?;
                }
                p.insert(format!("{name}.b"), Tensor::zeros((1, th)))?;
            }
            init_dense(&mut p, "trans.gate2", th, l, rng)?;
            init_dense(&mut p, "trans.prop2", th, l, rng)?;
            p.insert("trans.lin.w", init_uniform(l, l, fan, rng))?;
            if av {
                p.insert("trans.lin.wv", init_uniform(dv, l, fan, rng))?;
            }
            p.insert("trans.lin.b", Tensor::zeros((1, l)))?;
            init_dense(&mut p, "trans.var", l, l, rng)?;

            let h = dims.rnn_hidden;
            init_lstm(&mut p, "enc.rnn", f, h, rng)?;
            if av {
                p.insert("enc.rnn.wv", init_uniform(dv, 4 * h, f + dv + h, rng))?;
            }
            init_dense(&mut p, "enc.comb", l, h, rng)?;
            init_dense(&mut p, "enc.mu", h, l, rng)?;
            init_dense(&mut p, "enc.var", h, l, rng)?;
        } else {
            let h = dims.vae_hidden;
            let fan = f + dv;
            p.insert("enc.h.w", init_uniform(f, h, fan, rng))?;
            if av {
                p.insert("enc.h.wv", init_uniform(dv, h, fan, rng))?;
            }
            p.insert("enc.h.b", Tensor::zeros((1, h)))?;
            init_dense(&mut p, "enc.mu", h, l, rng)?;
            init_dense(&mut p, "enc.var", h, l, rng)?;
        }

        let mut stats = ParamSet::new();
        stats.insert("stats.in_mean", Tensor::zeros((1, f)))?;
        stats.insert("stats.in_scale", Tensor::ones((1, f)))?;
        if av {
            stats.insert("stats.vis_mean", Tensor::zeros((1, dv)))?;
            stats.insert("stats.vis_scale", Tensor::ones((1, dv)))?;
        }
        Ok(Self {
            kind,
            dims,
            params: p,
            stats,
        })
    }

    /// Checks that `params`/`stats` hold exactly the layout `new` creates.
    pub fn validate_layout(&self) -> Result<()> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let reference = GenerativeModel::new(self.kind, self.dims.clone(), &mut rng)?;
        for (set, want, what) in [
            (&self.params, &reference.params, "parameter"),
            (&self.stats, &reference.stats, "statistic"),
        ] {
            if set.len() != want.len() {
                return Err(Error::Shape(format!(
                    "{} has {} {what} tensors, expected {}",
                    self.kind,
                    set.len(),
                    want.len()
                )));
            }
            for (name, t) in want.iter() {
                match set.get(name) {
                    Some(v) if v.dim() == t.dim() => {}
                    Some(v) => {
                        return Err(Error::Shape(format!(
                            "{name} has shape {:?}, expected {:?}",
                            v.dim(),
                            t.dim()
                        )))
                    }
                    None => return Err(Error::Shape(format!("missing {what} {name}"))),
                }
            }
        }
        Ok(())
    }

    pub fn decoder(&self) -> ParamSet {
        self.subset("dec.")
    }

    pub fn transition(&self) -> ParamSet {
        self.subset("trans.")
    }

    pub fn encoder(&self) -> ParamSet {
        self.subset("enc.")
    }

    fn subset(&self, prefix: &str) -> ParamSet {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn latent_dim(&self) -> usize {
        self.dims.latent_dim
    }

    pub fn freq_bins(&self) -> usize {
        self.dims.freq_bins
    }

    pub fn visual_dim(&self) -> usize {
        self.dims.visual_dim
    }

    /// Normalized log-power encoder input, `T x F`.
    pub fn encoder_input(&self, power: &Array2<f64>) -> Array2<f64> {
        let mean = self.stats.get("stats.in_mean").expect("stats");
        let scale = self.stats.get("stats.in_scale").expect("stats");
        let mut x = power.mapv(|u| (u + LOG_POWER_FLOOR).ln());
        x -= mean;
        x /= scale;
        x
    }

    /// Standardized visual rows; `None` for audio-only kinds.
    pub fn visual_input(&self, visual: Option<&Array2<f64>>) -> Result<Option<Array2<f64>>> {
        if !self.kind.is_av() {
            return Ok(None);
        }
        let v = visual.ok_or(Error::MissingVisual(self.kind.label()))?;
        if v.ncols() != self.dims.visual_dim {
            return Err(Error::Shape(format!(
                "visual features have {} dims, model expects {}",
                v.ncols(),
                self.dims.visual_dim
            )));
        }
        let mean = self.stats.get("stats.vis_mean").expect("stats");
        let scale = self.stats.get("stats.vis_scale").expect("stats");
        let mut v = v.clone();
        v -= mean;
        v /= scale;
        Ok(Some(v))
    }

    /// Fits encoder-input (and optionally visual) standardization on
    /// `data`.
    pub fn fit_stats(&mut self, data: &[PowerSequence], standardize_visual: bool) -> Result<()> {
        if data.is_empty() {
            return Err(Error::Empty("normalization data"));
        }
        let logs: Vec<Array2<f64>> = data
            .iter()
            .map(|s| s.power.mapv(|u| (u + LOG_POWER_FLOOR).ln()))
            .collect();
        let views: Vec<_> = logs.iter().map(|a| a.view()).collect();
        let all = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("power frames: {e}")))?;
        let (mean, scale) = column_stats(&all);
        self.stats.set("stats.in_mean", mean);
        self.stats.set("stats.in_scale", scale);
        if self.kind.is_av() && standardize_visual {
            let vis: Vec<_> = data
                .iter()
                .map(|s| s.visual.as_ref().map(|v| v.view()).ok_or(Error::MissingVisual(self.kind.label())))
                .collect::<Result<_>>()?;
            let all = ndarray::concatenate(Axis(0), &vis)
                .map_err(|e| Error::Shape(format!("visual frames: {e}")))?;
            let (mean, scale) = column_stats(&all);
            self.stats.set("stats.vis_mean", mean);
            self.stats.set("stats.vis_scale", scale);
        }
        Ok(())
    }

    fn check_latent(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dims.latent_dim {
            return Err(Error::Shape(format!(
                "latent has {} dims, model expects {}",
                z.len(),
                self.dims.latent_dim
            )));
        }
        Ok(())
    }

    fn visual_row(&self, v: Option<&[f64]>) -> Result<Option<Array2<f64>>> {
        self.visual_input(v.map(row_of).as_ref())
    }

    /// `sigma^2_{theta_s}(z_t, v_t)`, strictly positive.
    pub fn decode_variance(&self, z: &[f64], v: Option<&[f64]>) -> Result<Vec<f64>> {
        self.check_latent(z)?;
        let vis = self.visual_row(v)?;
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let zv = tape.row(z);
        let vv = vis.map(|v| tape.constant(v));
        let (_, var) = net.decoder(zv, vv);
        Ok(into_vec(var.value()))
    }

    /// Mean and variance of `p(z_t | z_{t-1}, v_t)`; standard normal for
    /// VAE kinds.
    pub fn prior_transition(&self, z_prev: &[f64], v: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_latent(z_prev)?;
        let vis = self.visual_row(v)?;
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let zv = tape.row(z_prev);
        let vv = vis.map(|v| tape.constant(v));
        let (mu, var) = net.transition(zv, vv);
        Ok((into_vec(mu.value()), into_vec(var.value())))
    }

    /// `q(z_t | z_{t-1}, u_{t:T})` for the first frame of `power` (rows are
    /// frames `t..T`). VAE kinds use only that frame and ignore `z_prev`.
    pub fn encode_posterior(
        &self,
        z_prev: &[f64],
        power: &Array2<f64>,
        visual: Option<&Array2<f64>>,
    ) -> Result<PosteriorStep> {
        self.check_latent(z_prev)?;
        if power.nrows() == 0 {
            return Err(Error::Empty("power frames"));
        }
        if power.ncols() != self.dims.freq_bins {
            return Err(Error::Shape(format!(
                "power frames have {} bins, model expects {}",
                power.ncols(),
                self.dims.freq_bins
            )));
        }
        if power.iter().any(|u| *u < 0.0 || !u.is_finite()) {
            return Err(Error::InvalidArgument("power must be finite and nonnegative".into()));
        }
        let vis = self.visual_input(visual)?;
        if let Some(v) = &vis {
            if v.nrows() != power.nrows() {
                return Err(Error::Shape("visual and power frame counts differ".into()));
            }
        }
        let x = self.encoder_input(power);
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let (mu, var) = if self.kind.is_dkf() {
            let hs = net.encoder_states(&x, vis.as_ref(), 1);
            net.combiner(tape.row(z_prev), hs[0])
        } else {
            let x0 = tape.constant(x.slice(s![0..1, ..]).to_owned());
            let v0 = vis.map(|v| tape.constant(v.slice(s![0..1, ..]).to_owned()));
            net.vae_encoder(x0, v0)
        };
        Ok(PosteriorStep {
            mean: into_vec(mu.value()),
            var: into_vec(var.value()),
        })
    }

    /// Posterior means fed forward through the encoder recursion, `T x L`.
    /// Used to initialize the latent path for enhancement.
    pub fn encode_means(&self, power: &Array2<f64>, visual: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        let frames = power.nrows();
        if frames == 0 {
            return Err(Error::Empty("power frames"));
        }
        let vis = self.visual_input(visual)?;
        let x = self.encoder_input(power);
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let l = self.dims.latent_dim;
        let mut out = Array2::zeros((frames, l));
        if self.kind.is_dkf() {
            let hs = net.encoder_states(&x, vis.as_ref(), 1);
            let mut z_prev = tape.constant(Tensor::zeros((1, l)));
            for (t, h) in hs.iter().enumerate() {
                let (mu, _) = net.combiner(z_prev, *h);
                out.row_mut(t).assign(&mu.value().row(0));
                z_prev = mu;
            }
        } else {
            let (mu, _) = net.vae_encoder(tape.constant(x), vis.map(|v| tape.constant(v)));
            out.assign(&mu.value());
        }
        Ok(out)
    }

    /// Decoded speech variances for a whole latent path: `z` is `T x L`,
    /// `visual` raw (unstandardized) `T x D_v`; returns `T x F`.
    pub fn decode_frames(&self, z: &Array2<f64>, visual: Option<&Array2<f64>>) -> Result<Array2<f64>> {
        if z.ncols() != self.dims.latent_dim {
            return Err(Error::Shape(format!(
                "latent path has {} dims, model expects {}",
                z.ncols(),
                self.dims.latent_dim
            )));
        }
        let vis = self.visual_input(visual)?;
        if let Some(v) = &vis {
            if v.nrows() != z.nrows() {
                return Err(Error::Shape("visual and latent frame counts differ".into()));
            }
        }
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let (_, var) = net.decoder(tape.constant(z.clone()), vis.map(|v| tape.constant(v)));
        Ok(var.value())
    }

    pub(crate) fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> ModelNet<'_, 't> {
        ModelNet {
            model: self,
            tape,
            b: Bound::bind(tape, &self.params, trainable),
        }
    }

    /// Ancestral sample: `z_t ~ p(z_t | z_{t-1}, v_t)`, `s_t ~ N_c(0,
    /// diag sigma^2(z_t, v_t))`.
    pub fn generate<R: Rng + ?Sized>(
        &self,
        frames: usize,
        visual: Option<&Array2<f64>>,
        config: StftConfig,
        rng: &mut R,
    ) -> Result<ComplexSpectrogram> {
        if config.freq_bins() != self.dims.freq_bins {
            return Err(Error::Shape(format!(
                "STFT config has {} bins, model has {}",
                config.freq_bins(),
                self.dims.freq_bins
            )));
        }
        let vis = self.visual_input(visual)?;
        if let Some(v) = &vis {
            if v.nrows() < frames {
                return Err(Error::Shape("fewer visual rows than frames".into()));
            }
        }
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let l = self.dims.latent_dim;
        let mut z_prev = tape.constant(Tensor::zeros((1, l)));
        let mut spec = ComplexSpectrogram::zeros(config, frames);
        for t in 0..frames {
            let vt = vis
                .as_ref()
                .map(|v| tape.constant(v.slice(s![t..t + 1, ..]).to_owned()));
            let (mu, var) = net.transition(z_prev, vt);
            let eps: Vec<f64> = (0..l).map(|_| rng.sample(StandardNormal)).collect();
            let z = reparam_sample(&into_vec(mu.value()), &into_vec(var.value()), &eps);
            let zt = tape.row(&z);
            let (_, sv) = net.decoder(zt, vt);
            for (f, v) in sv.value().iter().enumerate() {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                spec.data[[f, t]] = Complex64::new(re, im) * (v / 2.0).sqrt();
            }
            z_prev = zt;
        }
        Ok(spec)
    }
}

fn column_stats(a: &Array2<f64>) -> (Tensor, Tensor) {
    let mean = a.mean_axis(Axis(0)).expect("nonempty");
    let std = a.std_axis(Axis(0), 0.0).mapv(|s| if s > 1e-6 { s } else { 1.0 });
    (mean.insert_axis(Axis(0)), std.insert_axis(Axis(0)))
}

/// A model's parameters bound to a tape, with the network pieces as
/// batched tape operations. Rows are independent samples.
pub(crate) struct ModelNet<'m, 't> {
    pub(crate) model: &'m GenerativeModel,
    pub(crate) tape: &'t Tape,
    pub(crate) b: Bound<'t>,
}

impl<'m, 't> ModelNet<'m, 't> {
    fn p(&self, name: &str) -> Var<'t> {
        self.b.get(name)
    }

    /// Returns `(log sigma^2, sigma^2)` of the decoder, both `N x F`.
    pub(crate) fn decoder(&self, z: Var<'t>, v: Option<Var<'t>>) -> (Var<'t>, Var<'t>) {
        let kind = self.model.kind;
        let mut h = linear(&self.b, "dec.h0", z).tanh();
        if let Some(v) = v.filter(|_| kind.is_av()) {
            let fused = z
                .matmul(self.p("dec.fuse.wz"))
                .add(v.matmul(self.p("dec.fuse.wv")))
                .add(self.p("dec.fuse.b"))
                .tanh();
            h = h.add(fused);
        }
        let layers = self.model.dims.decoder_hidden(kind).len();
        for i in 1..layers {
            h = linear(&self.b, &format!("dec.h{i}"), h).tanh();
        }
        let logvar = linear(&self.b, "dec.out", h).clamp_min(VAR_FLOOR.ln());
        (logvar, logvar.exp())
    }

    fn split_input(&self, name: &str, x: Var<'t>, v: Option<Var<'t>>) -> Var<'t> {
        let mut pre = x.matmul(self.p(&format!("{name}.w")));
        if let Some(v) = v.filter(|_| self.model.kind.is_av()) {
            pre = pre.add(v.matmul(self.p(&format!("{name}.wv"))));
        }
        pre.add(self.p(&format!("{name}.b")))
    }

    /// `(mu, sigma^2)` of the latent prior given `z_{t-1}` rows.
    pub(crate) fn transition(&self, z_prev: Var<'t>, v: Option<Var<'t>>) -> (Var<'t>, Var<'t>) {
        if !self.model.kind.is_dkf() {
            let shape = z_prev.shape();
            return (
                self.tape.constant(Tensor::zeros(shape)),
                self.tape.constant(Tensor::ones(shape)),
            );
        }
        let gate = linear(&self.b, "trans.gate2", self.split_input("trans.gate1", z_prev, v).relu()).sigmoid();
        let proposal = linear(&self.b, "trans.prop2", self.split_input("trans.prop1", z_prev, v).relu());
        let lin = self.split_input("trans.lin", z_prev, v);
        // (1 - gate) * lin + gate * proposal
        let mu = lin.add(gate.mul(proposal.sub(lin)));
        let var = linear(&self.b, "trans.var", proposal.relu())
            .softplus()
            .clamp_min(VAR_FLOOR);
        (mu, var)
    }

    /// Single-hidden-layer VAE encoder on normalized log-power rows.
    pub(crate) fn vae_encoder(&self, x: Var<'t>, v: Option<Var<'t>>) -> (Var<'t>, Var<'t>) {
        let h = self.split_input("enc.h", x, v).tanh();
        let mu = linear(&self.b, "enc.mu", h);
        let var = linear(&self.b, "enc.var", h).softplus().clamp_min(VAR_FLOOR);
        (mu, var)
    }

    /// Backward-recurrent states for `batch` sequences stacked time-major:
    /// rows `t * batch .. (t + 1) * batch` of `x` (and `v`) are frame `t`.
    pub(crate) fn encoder_states(&self, x: &Array2<f64>, v: Option<&Array2<f64>>, batch: usize) -> Vec<Var<'t>> {
        let frames = x.nrows() / batch;
        let xv = self.tape.constant(x.clone());
        let vv = v.map(|v| self.tape.constant(v.clone()));
        let mut proj = xv.matmul(self.p("enc.rnn.wx"));
        if let Some(vv) = vv {
            proj = proj.add(vv.matmul(self.p("enc.rnn.wv")));
        }
        proj = proj.add(self.p("enc.rnn.b"));
        let steps: Vec<_> = (0..frames).map(|t| proj.slice_rows(t * batch, batch)).collect();
        nnet::lstm_backward(&self.b, "enc.rnn.wh", &steps)
    }

    /// Combiner `c = (tanh(z_{t-1} W_c + b_c) + h_t) / 2` and the affine
    /// posterior heads.
    pub(crate) fn combiner(&self, z_prev: Var<'t>, h: Var<'t>) -> (Var<'t>, Var<'t>) {
        let c = linear(&self.b, "enc.comb", z_prev).tanh().add(h).scale(0.5);
        let mu = linear(&self.b, "enc.mu", c);
        let var = linear(&self.b, "enc.var", c).softplus().clamp_min(VAR_FLOOR);
        (mu, var)
    }
}

/// `z = mu + sigma * eps`.
pub fn reparam_sample(mu: &[f64], var: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(var)
        .zip(eps)
        .map(|((m, v), e)| m + v.max(VAR_FLOOR).sqrt() * e)
        .collect()
}

/// `KL(N(mu1, var1) || N(mu2, var2))` for diagonal Gaussians.
pub fn gaussian_kl(mu1: &[f64], var1: &[f64], mu2: &[f64], var2: &[f64]) -> Result<f64> {
    let n = mu1.len();
    if var1.len() != n || mu2.len() != n || var2.len() != n {
        return Err(Error::Shape("KL arguments differ in length".into()));
    }
    if var1.iter().chain(var2).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("KL needs positive variances".into()));
    }
    let mut kl = 0.0;
    for l in 0..n {
        kl += (var2[l] / var1[l]).ln() + (var1[l] + (mu1[l] - mu2[l]).powi(2)) / var2[l] - 1.0;
    }
    Ok(0.5 * kl)
}

/// `log N_c(s; 0, diag var)`.
pub fn complex_gaussian_loglik(s: &[Complex64], var: &[f64]) -> Result<f64> {
    if s.len() != var.len() {
        return Err(Error::Shape("loglik arguments differ in length".into()));
    }
    if var.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("loglik needs positive variances".into()));
    }
    Ok(s.iter()
        .zip(var)
        .map(|(x, v)| -PI.ln() - v.ln() - x.norm_sqr() / v)
        .sum())
}

/// Tape form of [`gaussian_kl`], summed over every entry.
pub(crate) fn gaussian_kl_tape<'t>(mu1: Var<'t>, var1: Var<'t>, mu2: Var<'t>, var2: Var<'t>) -> Var<'t> {
    let log_ratio = var2.ln().sub(var1.ln());
    let quad = var1.add(mu1.sub(mu2).square()).div(var2);
    log_ratio.add(quad).add_scalar(-1.0).sum().scale(0.5)
}

/// Tape form of the complex Gaussian log-likelihood summed over entries,
/// from `|s|^2` and `log var`.
pub(crate) fn complex_loglik_tape<'t>(power: Var<'t>, logvar: Var<'t>, var: Var<'t>) -> Var<'t> {
    let n = power.shape().0 * power.shape().1;
    logvar
        .add(power.div(var))
        .sum()
        .neg()
        .add_scalar(-(n as f64) * PI.ln())
}

/// Single-sample ELBO of a batch of equal-length sequences, summed over
/// the batch. `noise[i]` (`T x L`) drives the reparameterized draws of
/// sequence `i`. Exposed on the tape so training can differentiate it.
pub(crate) fn elbo_tape<'t>(net: &ModelNet<'_, 't>, seqs: &[&PowerSequence], noise: &[Array2<f64>]) -> Result<Var<'t>> {
    let model = net.model;
    let tape = net.tape;
    let batch = seqs.len();
    if batch == 0 {
        return Err(Error::Empty("ELBO batch"));
    }
    let frames = seqs[0].frames();
    if frames == 0 {
        return Err(Error::Empty("sequence"));
    }
    let (f, l) = (model.dims.freq_bins, model.dims.latent_dim);
    for (s, e) in seqs.iter().zip(noise) {
        if s.power.dim() != (frames, f) {
            return Err(Error::Shape(format!(
                "sequence power is {:?}, expected ({frames}, {f})",
                s.power.dim()
            )));
        }
        if e.dim() != (frames, l) {
            return Err(Error::Shape("noise shape does not match sequence".into()));
        }
    }
    if noise.len() != batch {
        return Err(Error::Shape("one noise matrix per sequence required".into()));
    }

    let power = stack_time_major(&seqs.iter().map(|s| s.power.view()).collect::<Vec<_>>());
    let eps = stack_time_major(&noise.iter().map(|e| e.view()).collect::<Vec<_>>());
    let x = model.encoder_input(&power);
    let vis = if model.kind.is_av() {
        let normed: Vec<Array2<f64>> = seqs
            .iter()
            .map(|s| model.visual_input(s.visual.as_ref()).map(|v| v.expect("av")))
            .collect::<Result<_>>()?;
        for v in &normed {
            if v.nrows() != frames {
                return Err(Error::Shape("visual and power frame counts differ".into()));
            }
        }
        Some(stack_time_major(&normed.iter().map(|v| v.view()).collect::<Vec<_>>()))
    } else {
        None
    };
    let vis_var = vis.as_ref().map(|v| tape.constant(v.clone()));

    let (z_all, kl) = if model.kind.is_dkf() {
        let hs = net.encoder_states(&x, vis.as_ref(), batch);
        let eps_var = tape.constant(eps);
        let mut z_prev = tape.constant(Tensor::zeros((batch, l)));
        let mut zs = Vec::with_capacity(frames);
        let mut kls = Vec::with_capacity(frames);
        for (t, h) in hs.iter().enumerate() {
            let (mu_q, var_q) = net.combiner(z_prev, *h);
            let e = eps_var.slice_rows(t * batch, batch);
            let z = mu_q.add(var_q.sqrt().mul(e));
            let vt = vis_var.map(|v| v.slice_rows(t * batch, batch));
            let (mu_p, var_p) = net.transition(z_prev, vt);
            kls.push(gaussian_kl_tape(mu_q, var_q, mu_p, var_p));
            zs.push(z);
            z_prev = z;
        }
        let kl = kls.into_iter().reduce(|a, b| a.add(b)).expect("frames > 0");
        (Var::concat_rows(&zs), kl)
    } else {
        let (mu_q, var_q) = net.vae_encoder(tape.constant(x), vis_var);
        let z = mu_q.add(var_q.sqrt().mul(tape.constant(eps)));
        // KL to N(0, I)
        let kl = var_q
            .ln()
            .neg()
            .add(var_q)
            .add(mu_q.square())
            .add_scalar(-1.0)
            .sum()
            .scale(0.5);
        (z, kl)
    };

    let (logvar, var) = net.decoder(z_all, vis_var);
    let rec = complex_loglik_tape(tape.constant(power), logvar, var);
    Ok(rec.sub(kl))
}

/// Interleaves equal-shape `T x C` blocks so that row `t * B + i` is row
/// `t` of block `i`.
pub(crate) fn stack_time_major(parts: &[ndarray::ArrayView2<'_, f64>]) -> Array2<f64> {
    let batch = parts.len();
    let (frames, cols) = parts[0].dim();
    let mut out = Array2::zeros((frames * batch, cols));
    for (i, src) in parts.iter().enumerate() {
        for t in 0..frames {
            out.row_mut(t * batch + i).assign(&src.row(t));
        }
    }
    out
}

/// Draws the standard-normal noise for one sequence.
pub fn draw_noise<R: Rng + ?Sized>(frames: usize, latent: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((frames, latent), || rng.sample(StandardNormal))
}

/// Single-sample Monte-Carlo ELBO of one sequence.
pub fn elbo<R: Rng + ?Sized>(model: &GenerativeModel, seq: &PowerSequence, rng: &mut R) -> Result<f64> {
    let noise = draw_noise(seq.frames(), model.dims.latent_dim, rng);
    elbo_with_noise(model, seq, &noise)
}

/// ELBO with explicit reparameterization noise (`T x L`).
pub fn elbo_with_noise(model: &GenerativeModel, seq: &PowerSequence, noise: &Array2<f64>) -> Result<f64> {
    let tape = Tape::new();
    let net = model.bind(&tape, false);
    let out = elbo_tape(&net, &[seq], std::slice::from_ref(noise))?;
    Ok(out.item())
}

/// ELBO summed over `seqs` and its gradient with respect to every
/// trainable parameter.
pub fn elbo_and_grad(
    model: &GenerativeModel,
    seqs: &[&PowerSequence],
    noise: &[Array2<f64>],
) -> Result<(f64, ParamSet)> {
    nnet::value_and_grad(&model.params, |tape, b| {
        let net = ModelNet {
            model,
            tape,
            b: b.clone(),
        };
        elbo_tape(&net, seqs, noise)
    })
}
