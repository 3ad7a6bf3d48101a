//! End-to-end acceptance checks. Built without the libtest harness so that
//! every check prints exactly one PASS/FAIL line, also under `cargo test`.
//! The process exits nonzero if any check fails.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use avdkf::data::{noisy_mixtures, synth_utterances, AVUtterance, CorpusConfig, NoiseKind, NoisyItem};
use avdkf::enhance::{
    enhance, enhance_batch, nmf_neg_loglik, nmf_sweep, run_estep, total_variance, wiener_filter, EnhanceConfig,
    Enhanced, GainMode, GainSequence, GammaPrior, MapObjective, NoiseNMF,
};
use avdkf::metrics::{evaluate_corpus, EvalPair};
use avdkf::models::{
    draw_noise, elbo_and_grad, elbo_with_noise, gaussian_kl, GenerativeModel, ModelDims, ModelKind, PowerSequence,
};
use avdkf::par;
use avdkf::presets::Preset;
use avdkf::signal::{istft, stft, ComplexSpectrogram, StftConfig, Waveform};
use avdkf::train::{train, train_with_progress, TrainConfig, TrainOutcome};
use ndarray::Array2;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

struct Verdict {
    pass: bool,
    detail: String,
}

impl Verdict {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

fn secs(d: Duration) -> String {
    format!("{:.2} s", d.as_secs_f64())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn stft_round_trip() -> Verdict {
    let cfg = StftConfig::with_frame_len(1024, 16000);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Waveform::new((0..16000).map(|_| rng.random_range(-1.0..1.0)).collect(), 16000);
    let started = Instant::now();
    let y = istft(&stft(&x, &cfg).unwrap()).unwrap();
    let took = started.elapsed();
    let (a, b) = (cfg.edge_len(), y.len() - cfg.edge_len());
    let num: f64 = (a..b).map(|i| (y.samples[i] - x.samples[i]).powi(2)).sum();
    let den: f64 = (a..b).map(|i| x.samples[i].powi(2)).sum();
    let err = (num / den).sqrt();
    Verdict::new(
        err < 1e-6 && took < Duration::from_secs(1),
        format!("interior relative L2 error {err:.2e} (< 1e-6), {} (< 1 s)", secs(took)),
    )
}

fn tiny_dims() -> ModelDims {
    ModelDims {
        freq_bins: 5,
        latent_dim: 2,
        visual_dim: 3,
        vae_hidden: 6,
        dkf_decoder_hidden: vec![4, 6],
        rnn_hidden: 4,
        transition_hidden: 3,
    }
}

/// Randomizes every parameter so no gradient is structurally zero.
fn randomized(kind: ModelKind, seed: u64) -> GenerativeModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = GenerativeModel::new(kind, tiny_dims(), &mut rng).unwrap();
    for (_, t) in m.params.iter_mut() {
        t.mapv_inplace(|_| rng.random_range(-0.6..0.6));
    }
    m
}

fn central_difference(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn gradient_suites() -> Verdict {
    const H: f64 = 1e-5;
    let started = Instant::now();
    let mut worst_elbo = 0.0f64;
    let mut worst_map = 0.0f64;
    let mut checked = 0usize;
    for (k, kind) in ModelKind::ALL.into_iter().enumerate() {
        let model = randomized(kind, 10 + k as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(20 + k as u64);
        let seq = PowerSequence {
            power: Array2::from_shape_simple_fn((3, 5), || rng.random_range(0.05..3.0)),
            visual: kind
                .is_av()
                .then(|| Array2::from_shape_simple_fn((3, 3), || rng.random_range(-1.0..1.0))),
        };
        let noise = draw_noise(3, 2, &mut rng);
        let (_, grad) = elbo_and_grad(&model, &[&seq], std::slice::from_ref(&noise)).unwrap();
        for (name, tensor) in model.params.iter() {
            let analytic = grad.get(name).unwrap();
            for (i, (&x0, &a)) in tensor.iter().zip(analytic.iter()).enumerate() {
                let f = |x: f64| {
                    let mut m = model.clone();
                    *m.params.get_mut(name).unwrap().iter_mut().nth(i).unwrap() = x;
                    elbo_with_noise(&m, &seq, &noise).unwrap()
                };
                worst_elbo = worst_elbo.max(rel_err(a, central_difference(f, x0, H)));
                checked += 1;
            }
        }

        let x = ComplexSpectrogram {
            data: Array2::from_shape_simple_fn((5, 3), || {
                Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
            }),
            config: StftConfig::with_frame_len(8, 8000),
        };
        let nmf = NoiseNMF::random(5, 2, 3, &mut rng);
        let prior = GammaPrior::new(1.5, 0.8).unwrap();
        let visual = seq.visual.clone();
        let objective = MapObjective::new(&model, &x, visual.as_ref(), &nmf, Some(prior)).unwrap();
        let z = Array2::from_shape_simple_fn((3, 2), || rng.random_range(-1.0..1.0));
        let zeta: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
        let (_, gz, gzeta) = objective.value_and_grad(&z, &zeta).unwrap();
        for (i, (&z0, &a)) in z.iter().zip(gz.iter()).enumerate() {
            let f = |v: f64| {
                let mut zz = z.clone();
                *zz.iter_mut().nth(i).unwrap() = v;
                objective.value(&zz, &zeta).unwrap()
            };
            worst_map = worst_map.max(rel_err(a, central_difference(f, z0, H)));
            checked += 1;
        }
        for (i, &a) in gzeta.iter().enumerate() {
            let f = |v: f64| {
                let mut zz = zeta.clone();
                zz[i] = v;
                objective.value(&z, &zz).unwrap()
            };
            worst_map = worst_map.max(rel_err(a, central_difference(f, zeta[i], H)));
            checked += 1;
        }
    }
    let took = started.elapsed();
    Verdict::new(
        worst_elbo < 1e-4 && worst_map < 1e-4 && took < Duration::from_secs(60),
        format!(
            "{checked} partials; max relative error ELBO {worst_elbo:.2e}, E-step objective {worst_map:.2e} (< 1e-4), {} (< 60 s)",
            secs(took)
        ),
    )
}

fn log_normal_diag(x: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    x.iter()
        .zip(mu)
        .zip(var)
        .map(|((x, m), v)| -0.5 * ((2.0 * PI * v).ln() + (x - m).powi(2) / v))
        .sum()
}

fn kl_monte_carlo() -> Verdict {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    let mut lines = Vec::new();
    for _ in 0..5 {
        let mut draw = |lo: f64, hi: f64| -> Vec<f64> { (0..4).map(|_| rng.random_range(lo..hi)).collect() };
        let (mu1, var1, mu2, var2) = (draw(-2.0, 2.0), draw(0.25, 4.0), draw(-2.0, 2.0), draw(0.25, 4.0));
        let exact = gaussian_kl(&mu1, &var1, &mu2, &var2).unwrap();
        let n = 1_000_000;
        let mut acc = 0.0;
        let mut x = [0.0; 4];
        for _ in 0..n {
            for l in 0..4 {
                let e: f64 = rng.sample(StandardNormal);
                x[l] = mu1[l] + var1[l].sqrt() * e;
            }
            acc += log_normal_diag(&x, &mu1, &var1) - log_normal_diag(&x, &mu2, &var2);
        }
        let mc = acc / n as f64;
        let rel = (mc - exact).abs() / exact;
        worst = worst.max(rel);
        lines.push(format!("{exact:.3}/{mc:.3}"));
    }
    let took = started.elapsed();
    Verdict::new(
        worst < 0.01 && took < Duration::from_secs(30),
        format!(
            "closed/MC {}; max relative gap {:.3}% (< 1%), {} (< 30 s)",
            lines.join(" "),
            100.0 * worst,
            secs(took)
        ),
    )
}

fn nmf_monotone() -> Verdict {
    let (f, t, k) = (129, 60, 8);
    let mut worst_rise = f64::NEG_INFINITY;
    let mut fixed_ok = true;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let power = Array2::from_shape_simple_fn((f, t), || {
            let e: f64 = rng.random_range(1e-9..1.0);
            -e.ln() * rng.random_range(0.01..10.0)
        });
        let speech = Array2::from_shape_simple_fn((f, t), || rng.random_range(1e-3..2.0));
        let gains: Vec<f64> = (0..t).map(|_| rng.random_range(0.1..3.0)).collect();
        let mut nmf = NoiseNMF::random(f, k, t, &mut rng);
        let fresh = nmf.clone();
        let mut prev = nmf_neg_loglik(&power, &speech, &gains, &nmf);
        for _ in 0..50 {
            nmf_sweep(&power, &speech, &gains, &mut nmf).unwrap();
            let next = nmf_neg_loglik(&power, &speech, &gains, &nmf);
            worst_rise = worst_rise.max((next - prev) / prev.abs());
            prev = next;
        }

        let exact = total_variance(&speech, &gains, &fresh.variance());
        let mut again = fresh.clone();
        nmf_sweep(&exact, &speech, &gains, &mut again).unwrap();
        fixed_ok &= again == fresh;
    }
    Verdict::new(
        worst_rise <= 1e-9 && fixed_ok,
        format!(
            "20 instances x 50 sweeps, largest relative increase {worst_rise:.2e} (<= 1e-9); V = |X|^2 fixed point {}",
            if fixed_ok { "exact" } else { "violated" }
        ),
    )
}

fn gain_oracle() -> Verdict {
    const GRID: usize = 100_000;
    let (lo, hi) = (1e-4f64.ln(), 1e4f64.ln());
    let step = (hi - lo) / (GRID - 1) as f64;
    let cfg = EnhanceConfig::default();
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + seed);
        let dims = ModelDims {
            freq_bins: 1,
            ..tiny_dims()
        };
        let model = GenerativeModel::new(ModelKind::ADkf, dims, &mut rng).unwrap();
        let nmf = NoiseNMF::random(1, 1, 1, &mut rng);
        let n = nmf.variance()[[0, 0]];
        let sigma0 = model.decode_variance(&[0.0, 0.0], None).unwrap()[0];
        let p = (n + n * n / sigma0) * rng.random_range(3.0..30.0);
        let x = ComplexSpectrogram {
            data: Array2::from_elem((1, 1), Complex64::from_polar(p.sqrt(), rng.random_range(0.0..6.0))),
            config: StftConfig::with_frame_len(256, 8000),
        };
        let objective = MapObjective::new(&model, &x, None, &nmf, Some(GammaPrior::new(cfg.alpha, cfg.beta).unwrap())).unwrap();
        let mut z = Array2::zeros((1, 2));
        let mut gains = GainSequence::ones(1, &cfg);
        for lr in [1e-1, 1e-2, 1e-3, 1e-4, 1e-5] {
            let e = run_estep(&objective, &z, &gains, 3000, lr).unwrap();
            z = e.z;
            gains = e.gains;
        }
        let sigma = model.decode_variance(&[z[[0, 0]], z[[0, 1]]], None).unwrap()[0];
        let j = |g: f64| {
            let v = g * sigma + n;
            -v.ln() - p / v + (cfg.alpha - 1.0) * g.ln() - cfg.beta * g
        };
        let best = (0..GRID)
            .map(|k| lo + k as f64 * step)
            .max_by(|a, b| j(a.exp()).total_cmp(&j(b.exp())))
            .unwrap();
        worst = worst.max((gains.g[0].ln() - best).abs() / step);
    }
    Verdict::new(
        worst <= 1.0,
        format!("20 single-bin instances; max |ln g* - ln g_grid| = {worst:.3} grid steps (<= 1)"),
    )
}

fn wiener_random() -> (usize, bool) {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut ok = true;
    let mut cells = 0;
    for _ in 0..200 {
        let (f, t) = (rng.random_range(1..20), rng.random_range(1..20));
        let x = ComplexSpectrogram {
            data: Array2::from_shape_simple_fn((f, t), || {
                Complex64::new(rng.sample(StandardNormal), rng.sample(StandardNormal))
            }),
            config: StftConfig::with_frame_len(256, 8000),
        };
        let mut loguniform = || 10f64.powf(rng.random_range(-6.0..6.0));
        let speech = Array2::from_shape_simple_fn((f, t), &mut loguniform);
        let noise = Array2::from_shape_simple_fn((f, t), &mut loguniform);
        let gains: Vec<f64> = (0..t).map(|_| loguniform()).collect();
        let s = wiener_filter(&x, &speech, &gains, &noise).unwrap();
        ok &= contracts(&x, &s);
        cells += f * t;
    }
    (cells, ok)
}

/// `0 < |s|/|x| < 1` wherever `x != 0`, and `|s| <= |x|` everywhere.
fn contracts(x: &ComplexSpectrogram, s: &ComplexSpectrogram) -> bool {
    x.data.iter().zip(s.data.iter()).all(|(x, s)| {
        let (a, b) = (x.norm(), s.norm());
        b <= a && (a == 0.0 || (b / a > 0.0 && b / a < 1.0))
    })
}

/// Trained desk models and their enhancement runs, shared by the
/// end-to-end checks.
struct Desk {
    stft: StftConfig,
    enhance: EnhanceConfig,
    av_dkf: Trained,
    av_vae: Trained,
    a_dkf: Trained,
    at_0db: Vec<NoisyItem>,
    at_m5db: Vec<NoisyItem>,
    runs: Vec<Run>,
    valid: Vec<PowerSequence>,
}

struct Trained {
    outcome: TrainOutcome,
    took: Duration,
}

struct Run {
    kind: ModelKind,
    snr: f64,
    out: Vec<Enhanced>,
    si_sdr: Vec<f64>,
    input_si_sdr: Vec<f64>,
    took: Duration,
}

const TRAIN_UTTS: usize = 30;
const VALID_UTTS: usize = 5;
const TEST_UTTS: usize = 20;

impl Desk {
    fn build() -> Self {
        let preset = Preset::desk();
        let corpus = CorpusConfig {
            utterances: TRAIN_UTTS + VALID_UTTS + TEST_UTTS,
            ..preset.corpus.clone()
        };
        let utts = synth_utterances(&corpus, &preset.stft, 7).unwrap();
        let seqs: Vec<PowerSequence> = utts.iter().map(|u| u.power_sequence(&preset.stft).unwrap()).collect();
        let (train_set, rest) = seqs.split_at(TRAIN_UTTS);
        let valid = rest[..VALID_UTTS].to_vec();
        let test: &[AVUtterance] = &utts[TRAIN_UTTS + VALID_UTTS..];

        let fit = |kind: ModelKind| {
            let started = Instant::now();
            let mut model =
                GenerativeModel::new(kind, preset.dims.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            model.fit_stats(train_set, preset.train.standardize_visual).unwrap();
            let outcome = train(model, train_set, &valid, &preset.train).unwrap();
            let took = started.elapsed();
            eprintln!(
                "  trained {} in {} (best epoch {} of {})",
                kind,
                secs(took),
                outcome.best_epoch,
                outcome.history.len()
            );
            Trained { outcome, took }
        };
        let av_dkf = fit(ModelKind::AvDkf);
        let av_vae = fit(ModelKind::AvVae);
        let a_dkf = fit(ModelKind::ADkf);

        let at_0db = noisy_mixtures(test, &[0.0], &[NoiseKind::White], 3).unwrap();
        let at_m5db = noisy_mixtures(test, &[-5.0], &[NoiseKind::White], 3).unwrap();
        let mut desk = Self {
            stft: preset.stft,
            enhance: preset.enhance.clone(),
            av_dkf,
            av_vae,
            a_dkf,
            at_0db,
            at_m5db,
            runs: Vec::new(),
            valid,
        };
        for (kind, snr) in [
            (ModelKind::AvDkf, 0.0),
            (ModelKind::AvVae, 0.0),
            (ModelKind::AvDkf, -5.0),
            (ModelKind::ADkf, -5.0),
        ] {
            let run = desk.run(kind, snr, &desk.enhance.clone());
            desk.runs.push(run);
        }
        desk
    }

    fn model(&self, kind: ModelKind) -> &Trained {
        match kind {
            ModelKind::AvDkf => &self.av_dkf,
            ModelKind::AvVae => &self.av_vae,
            ModelKind::ADkf => &self.a_dkf,
            ModelKind::AVae => unreachable!("not trained"),
        }
    }

    fn items(&self, snr: f64) -> &[NoisyItem] {
        if snr == 0.0 {
            &self.at_0db
        } else {
            &self.at_m5db
        }
    }

    fn run(&self, kind: ModelKind, snr: f64, cfg: &EnhanceConfig) -> Run {
        let items = self.items(snr);
        let model = &self.model(kind).outcome.model;
        let inputs: Vec<(Waveform, Option<Array2<f64>>)> =
            items.iter().map(|m| (m.noisy.clone(), Some(m.visual.clone()))).collect();
        let started = Instant::now();
        let out: Vec<Enhanced> = enhance_batch(&inputs, model, &self.stft, cfg)
            .into_iter()
            .map(|r| r.unwrap())
            .collect();
        let took = started.elapsed();
        let pairs: Vec<EvalPair> = items
            .iter()
            .zip(&out)
            .map(|(m, e)| EvalPair {
                id: m.id.clone(),
                estimate: e.waveform.clone(),
                reference: m.clean.clone(),
                input: Some(m.noisy.clone()),
                snr,
                noise: m.noise.key().into(),
                model: kind.label().into(),
            })
            .collect();
        let report = evaluate_corpus(&pairs, &self.stft).unwrap();
        assert!(report.skipped.is_empty(), "{:?}", report.skipped);
        eprintln!("  enhanced {} utterances at {snr} dB with {kind} in {}", out.len(), secs(took));
        Run {
            kind,
            snr,
            si_sdr: report.utterances.iter().map(|u| u.si_sdr).collect(),
            input_si_sdr: report.utterances.iter().map(|u| u.input_si_sdr.unwrap()).collect(),
            out,
            took,
        }
    }

    fn find(&self, kind: ModelKind, snr: f64) -> &Run {
        self.runs.iter().find(|r| r.kind == kind && r.snr == snr).unwrap()
    }
}

fn training_smoke(desk: &Desk) -> Verdict {
    let h = &desk.av_dkf.outcome.history;
    let (first, last) = (h[0].valid_elbo, h.last().unwrap().valid_elbo);

    let started = Instant::now();
    let preset = Preset::desk();
    let one = desk.valid[0].clone();
    let repeated = vec![one.clone(); 4];
    let mut model = GenerativeModel::new(ModelKind::AvDkf, preset.dims.clone(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
    model.fit_stats(&repeated, true).unwrap();
    let cfg = TrainConfig {
        patience: 2,
        max_epochs: 1000,
        ..preset.train.clone()
    };
    let stop = train(model, &repeated, &[one], &cfg).unwrap();
    let stop_last = stop.history.last().unwrap().epoch;
    let stop_took = started.elapsed();
    let took = desk.av_dkf.took + stop_took;
    let fired = stop.stopped_early && stop_last == stop.best_epoch + 2;
    Verdict::new(
        last > first && fired && took < Duration::from_secs(15 * 60),
        format!(
            "valid ELBO epoch 1 {first:.1} -> epoch {} {last:.1}; patience 2 stop at epoch {stop_last} (best {}), {} (< 15 min)",
            h.len(),
            stop.best_epoch,
            secs(took)
        ),
    )
}

fn enhancement_gain(desk: &Desk) -> Verdict {
    let run = desk.find(ModelKind::AvDkf, 0.0);
    let (out, inp) = (median(run.si_sdr.clone()), median(run.input_si_sdr.clone()));
    let gains: Vec<f64> = run.si_sdr.iter().zip(&run.input_si_sdr).map(|(o, i)| o - i).collect();
    let took = desk.av_dkf.took + run.took;
    Verdict::new(
        out >= inp + 3.0 && took < Duration::from_secs(30 * 60),
        format!(
            "AV-DKF at 0 dB: median SI-SDR in {inp:.2} dB, out {out:.2} dB (needs >= {:.2}); median per-utterance gain {:.2} dB; {} (< 30 min)",
            inp + 3.0,
            median(gains),
            secs(took)
        ),
    )
}

fn sequential_beats_frame_wise(desk: &Desk) -> Verdict {
    let dkf = median(desk.find(ModelKind::AvDkf, 0.0).si_sdr.clone());
    let vae = median(desk.find(ModelKind::AvVae, 0.0).si_sdr.clone());
    Verdict::new(
        dkf >= vae,
        format!("median SI-SDR at 0 dB: AV-DKF {dkf:.2} dB, AV-VAE {vae:.2} dB (difference {:+.2})", dkf - vae),
    )
}

fn visual_benefit(desk: &Desk) -> Verdict {
    let av = median(desk.find(ModelKind::AvDkf, -5.0).si_sdr.clone());
    let a = median(desk.find(ModelKind::ADkf, -5.0).si_sdr.clone());
    let input = median(desk.find(ModelKind::ADkf, -5.0).input_si_sdr.clone());
    Verdict::new(
        av >= a,
        format!(
            "median SI-SDR at -5 dB (input {input:.2} dB): AV-DKF {av:.2} dB, A-DKF {a:.2} dB (difference {:+.2})",
            av - a
        ),
    )
}

fn gain_prior_bounds(desk: &Desk) -> Verdict {
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for run in &desk.runs {
        for e in &run.out {
            for &g in &e.diagnostics.gains {
                lo = lo.min(g);
                hi = hi.max(g);
            }
        }
    }
    let in_range = lo >= 1e-3 && hi <= 1e3;

    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("gain_traces");
    std::fs::create_dir_all(&dir).unwrap();
    let mult_cfg = EnhanceConfig {
        gain_mode: GainMode::Multiplicative,
        ..desk.enhance.clone()
    };
    let items = &desk.at_0db[..3];
    let model = &desk.av_dkf.outcome.model;
    let mut mult_range = (f64::INFINITY, 0.0f64);
    let mut summary = String::new();
    for (i, m) in items.iter().enumerate() {
        let cfg = EnhanceConfig {
            seed: par::item_seed(desk.enhance.seed, i as u64),
            ..mult_cfg.clone()
        };
        let e = enhance(&m.noisy, Some(&m.visual), model, &desk.stft, &cfg).unwrap();
        let gm = &desk.find(ModelKind::AvDkf, 0.0).out[i];
        for (mode, d) in [("gamma_map", &gm.diagnostics), ("multiplicative", &e.diagnostics)] {
            d.write_csv(dir.join(format!("{}_{mode}.csv", m.id))).unwrap();
            std::fs::write(dir.join(format!("{}_{mode}_gains.csv", m.id)), d.gains_csv()).unwrap();
        }
        for &g in &e.diagnostics.gains {
            mult_range = (mult_range.0.min(g), mult_range.1.max(g));
        }
        let _ = write!(
            summary,
            " {}: mean g {:.3}/{:.3}",
            m.id,
            gm.diagnostics.gains.iter().sum::<f64>() / gm.diagnostics.gains.len() as f64,
            e.diagnostics.gains.iter().sum::<f64>() / e.diagnostics.gains.len() as f64
        );
    }
    Verdict::new(
        in_range,
        format!(
            "gamma_map gains over {} runs in [{lo:.3e}, {hi:.3e}] (within [1e-3, 1e3]); multiplicative range [{:.3e}, {:.3e}]; gamma_map/multiplicative{summary}; traces in {}",
            desk.runs.iter().map(|r| r.out.len()).sum::<usize>(),
            mult_range.0,
            mult_range.1,
            dir.display()
        ),
    )
}

fn determinism(desk: &Desk) -> Verdict {
    let preset = Preset::desk();
    let small = CorpusConfig {
        utterances: 4,
        ..preset.corpus.clone()
    };
    let synth_a = synth_utterances(&small, &preset.stft, 11).unwrap();
    let synth_b = par::with_jobs(1, || synth_utterances(&small, &preset.stft, 11).unwrap());
    let synth_ok = synth_a == synth_b;

    let seqs: Vec<PowerSequence> = synth_a.iter().map(|u| u.power_sequence(&preset.stft).unwrap()).collect();
    let cfg = TrainConfig {
        max_epochs: 3,
        ..preset.train.clone()
    };
    let fit = || {
        let mut m = GenerativeModel::new(ModelKind::AvDkf, preset.dims.clone(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        m.fit_stats(&seqs[..3], true).unwrap();
        train_with_progress(m, &seqs[..3], &seqs[3..], &cfg, |_| {}).unwrap()
    };
    let (ta, tb) = (fit(), par::with_jobs(1, fit));
    let train_ok = ta.model == tb.model && ta.history == tb.history;

    let items: Vec<(Waveform, Option<Array2<f64>>)> = desk.at_0db[..2]
        .iter()
        .map(|m| (m.noisy.clone(), Some(m.visual.clone())))
        .collect();
    let model = &desk.av_dkf.outcome.model;
    let again = par::with_jobs(1, || enhance_batch(&items, model, &desk.stft, &desk.enhance));
    let first = &desk.find(ModelKind::AvDkf, 0.0).out;
    let enhance_ok = again.into_iter().zip(first).all(|(a, b)| {
        let a = a.unwrap();
        a.waveform == b.waveform && a.diagnostics == b.diagnostics && a.z == b.z
    });
    Verdict::new(
        synth_ok && train_ok && enhance_ok,
        format!(
            "bitwise repeat across thread counts: synthesis {}, training {}, enhancement {}",
            synth_ok, train_ok, enhance_ok
        ),
    )
}

fn wiener_invariants(desk: &Desk) -> Verdict {
    let (cells, random_ok) = wiener_random();
    let mut desk_ok = true;
    for run in &desk.runs {
        for (e, m) in run.out.iter().zip(desk.items(run.snr)) {
            desk_ok &= contracts(&stft(&m.noisy, &desk.stft).unwrap(), &e.spectrogram);
        }
    }
    Verdict::new(
        random_ok && desk_ok,
        format!(
            "0 < |s|/|x| < 1 and |s| <= |x| on {cells} random cells: {}; on every desk enhancement: {}",
            if random_ok { "hold" } else { "violated" },
            if desk_ok { "hold" } else { "violated" }
        ),
    )
}

fn guarded<T>(f: impl FnOnce() -> T) -> Result<T, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        e.downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())
    })
}

fn main() {
    let mut failed = 0;
    let mut report = |name: &str, started: Instant, v: Result<Verdict, String>| {
        let v = v.unwrap_or_else(|e| Verdict::new(false, format!("panicked: {e}")));
        if !v.pass {
            failed += 1;
        }
        println!(
            "{} {name}: {} [{}]",
            if v.pass { "PASS" } else { "FAIL" },
            v.detail,
            secs(started.elapsed())
        );
    };

    let standalone: [(&str, fn() -> Verdict); 5] = [
        ("stft round trip", stft_round_trip),
        ("gradient checks", gradient_suites),
        ("KL closed form vs Monte-Carlo", kl_monte_carlo),
        ("NMF monotonicity", nmf_monotone),
        ("E-step gain grid oracle", gain_oracle),
    ];
    for (name, check) in standalone {
        let started = Instant::now();
        report(name, started, guarded(check));
    }

    eprintln!("training and enhancing desk models; this takes several minutes");
    let started = Instant::now();
    let desk = guarded(Desk::build);
    eprintln!("  desk setup took {}", secs(started.elapsed()));
    let dependent: [(&str, fn(&Desk) -> Verdict); 7] = [
        ("Wiener invariants", wiener_invariants),
        ("training smoke", training_smoke),
        ("end-to-end enhancement gain", enhancement_gain),
        ("sequential vs frame-wise prior", sequential_beats_frame_wise),
        ("visual benefit", visual_benefit),
        ("gain prior stabilization", gain_prior_bounds),
        ("determinism", determinism),
    ];
    for (name, check) in dependent {
        let started = Instant::now();
        let v = match &desk {
            Ok(desk) => guarded(|| check(desk)),
            Err(e) => Err(format!("desk setup failed: {e}")),
        };
        report(name, started, v);
    }

    println!("{} of 12 acceptance checks passed", 12 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
