//! SI-SDR, log-spectral distance and grouped corpus reports.

use std::cmp::Ordering;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::par;
use crate::signal::{stft, StftConfig, Waveform};

/// Added to the distortion energy of SI-SDR and to powers in the LSD.
pub const METRIC_EPS: f64 = 1e-12;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale-invariant SDR in dB. The estimate is normalized to unit energy
/// before projection, so the result does not depend on its scale even
/// through the epsilon.
pub fn si_sdr(est: &Waveform, reference: &Waveform) -> Result<f64> {
    si_sdr_slices(&est.samples, &reference.samples)
}

pub fn si_sdr_slices(est: &[f64], reference: &[f64]) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    let rr = dot(reference, reference);
    if !(rr > 0.0) {
        return Err(Error::InvalidArgument("reference has zero energy".into()));
    }
    if est.iter().chain(reference).any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("SI-SDR input"));
    }
    let norm = dot(est, est).sqrt();
    let unit: Vec<f64> = if norm > 0.0 {
        est.iter().map(|x| x / norm).collect()
    } else {
        est.to_vec()
    };
    let alpha = dot(&unit, reference) / rr;
    let (mut target, mut err) = (0.0, 0.0);
    for (e, r) in unit.iter().zip(reference) {
        let t = alpha * r;
        target += t * t;
        err += (e - t) * (e - t);
    }
    Ok(10.0 * (target / (err + METRIC_EPS)).log10())
}

/// RMS over bins and frames of the dB difference between the power
/// spectrograms of `est` and `reference`.
pub fn log_spectral_distance(est: &Waveform, reference: &Waveform, cfg: &StftConfig) -> Result<f64> {
    if est.len() != reference.len() {
        return Err(Error::Shape(format!(
            "estimate has {} samples, reference {}",
            est.len(),
            reference.len()
        )));
    }
    let pe = stft(est, cfg)?.power()?;
    let pr = stft(reference, cfg)?.power()?;
    let db = |p: f64| 10.0 * (p + METRIC_EPS).log10();
    let sq: f64 = pe.iter().zip(pr.iter()).map(|(a, b)| (db(*a) - db(*b)).powi(2)).sum();
    Ok((sq / pe.len() as f64).sqrt())
}

/// One scored item: an estimate, its clean reference and, optionally, the
/// noisy input it was computed from.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub id: String,
    pub estimate: Waveform,
    pub reference: Waveform,
    pub input: Option<Waveform>,
    pub snr: f64,
    pub noise: String,
    pub model: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceScore {
    pub id: String,
    pub snr: f64,
    pub noise: String,
    pub model: String,
    pub si_sdr: f64,
    pub input_si_sdr: Option<f64>,
    pub lsd: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupScore {
    pub model: String,
    pub noise: String,
    pub snr: f64,
    pub count: usize,
    pub si_sdr: f64,
    pub median_si_sdr: f64,
    /// Mean over the items that carry an input.
    pub input_si_sdr: Option<f64>,
    pub lsd: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalReport {
    /// Sorted by model, noise, SNR and id.
    pub utterances: Vec<UtteranceScore>,
    pub groups: Vec<GroupScore>,
    /// `(id, reason)` of pairs that could not be scored.
    pub skipped: Vec<(String, String)>,
}

fn key_cmp(a: (&str, &str, f64), b: (&str, &str, f64)) -> Ordering {
    a.0.cmp(b.0).then(a.1.cmp(b.1)).then(a.2.total_cmp(&b.2))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Sample range scored for a reference of `len` samples: the part of the
/// istft-valid span that is fully overlapped.
pub fn scoring_range(len: usize, cfg: &StftConfig) -> Option<(usize, usize)> {
    let valid = cfg.synth_len(cfg.frame_count(len));
    let edge = cfg.edge_len();
    (valid > 2 * edge).then(|| (edge, valid - edge))
}

fn score(pair: &EvalPair, cfg: &StftConfig) -> Result<UtteranceScore> {
    let n = pair.reference.len();
    let valid = cfg.synth_len(cfg.frame_count(n));
    let est_len = pair.estimate.len();
    if est_len != n && est_len != valid {
        return Err(Error::Shape(format!(
            "estimate has {est_len} samples, reference {n} (istft-valid {valid})"
        )));
    }
    let (a, b) = scoring_range(n, cfg).ok_or_else(|| Error::SignalTooShort {
        len: n,
        frame_len: 2 * cfg.frame_len,
    })?;
    let reference = pair.reference.slice(a, b);
    let estimate = pair.estimate.slice(a, b);
    let input_si_sdr = match &pair.input {
        Some(x) if x.len() == n => Some(si_sdr(&x.slice(a, b), &reference)?),
        Some(x) => {
            return Err(Error::Shape(format!("input has {} samples, reference {n}", x.len())));
        }
        None => None,
    };
    Ok(UtteranceScore {
        id: pair.id.clone(),
        snr: pair.snr,
        noise: pair.noise.clone(),
        model: pair.model.clone(),
        si_sdr: si_sdr(&estimate, &reference)?,
        input_si_sdr,
        lsd: log_spectral_distance(&estimate, &reference, cfg)?,
    })
}

/// Scores every pair and aggregates by `(model, noise, SNR)`. Pairs that
/// cannot be scored (length mismatch, silent reference) are skipped and
/// listed in the report.
pub fn evaluate_corpus(pairs: &[EvalPair], cfg: &StftConfig) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(Error::Empty("evaluation pairs"));
    }
    cfg.validate()?;
    let scored = par::map(pairs, |p| score(p, cfg));
    let mut report = EvalReport::default();
    for (p, s) in pairs.iter().zip(scored) {
        match s {
            Ok(s) => report.utterances.push(s),
            Err(e) => {
                log::warn!("skipping {}: {e}", p.id);
                report.skipped.push((p.id.clone(), e.to_string()));
            }
        }
    }
    report.skipped.sort();
    report.utterances.sort_by(|a, b| {
        key_cmp((&a.model, &a.noise, a.snr), (&b.model, &b.noise, b.snr)).then_with(|| a.id.cmp(&b.id))
    });

    let mut start = 0;
    let rows = &report.utterances;
    while start < rows.len() {
        let key = (rows[start].model.as_str(), rows[start].noise.as_str(), rows[start].snr);
        let end = start
            + rows[start..]
                .iter()
                .take_while(|r| key_cmp((&r.model, &r.noise, r.snr), key) == Ordering::Equal)
                .count();
        let group = &rows[start..end];
        let n = group.len() as f64;
        let inputs: Vec<f64> = group.iter().filter_map(|r| r.input_si_sdr).collect();
        let mut sdrs: Vec<f64> = group.iter().map(|r| r.si_sdr).collect();
        report.groups.push(GroupScore {
            model: key.0.to_string(),
            noise: key.1.to_string(),
            snr: key.2,
            count: group.len(),
            si_sdr: sdrs.iter().sum::<f64>() / n,
            median_si_sdr: median(&mut sdrs),
            input_si_sdr: (!inputs.is_empty()).then(|| inputs.iter().sum::<f64>() / inputs.len() as f64),
            lsd: group.iter().map(|r| r.lsd).sum::<f64>() / n,
        });
        start = end;
    }
    Ok(report)
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v:.6}")).unwrap_or_default()
}

impl EvalReport {
    /// One row per utterance, then one `mean` row per group. The `pesq` and
    /// `stoi` columns are left empty for externally computed scores.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,model,noise,snr,id,count,si_sdr,median_si_sdr,input_si_sdr,si_sdr_improvement,lsd,pesq,stoi\n");
        for u in &self.utterances {
            let _ = writeln!(
                s,
                "utterance,{},{},{},{},1,{:.6},,{},{},{:.6},,",
                u.model,
                u.noise,
                u.snr,
                u.id,
                u.si_sdr,
                opt(u.input_si_sdr),
                opt(u.input_si_sdr.map(|i| u.si_sdr - i)),
                u.lsd
            );
        }
        for g in &self.groups {
            let _ = writeln!(
                s,
                "mean,{},{},{},,{},{:.6},{:.6},{},{},{:.6},,",
                g.model,
                g.noise,
                g.snr,
                g.count,
                g.si_sdr,
                g.median_si_sdr,
                opt(g.input_si_sdr),
                opt(g.input_si_sdr.map(|i| g.si_sdr - i)),
                g.lsd
            );
        }
        s
    }

    /// Fixed-width table, one line per group.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<10} {:<16} {:>7} {:>5} {:>10} {:>10} {:>10} {:>8}\n",
            "model", "noise", "snr_db", "n", "input", "si_sdr", "delta", "lsd_db"
        );
        s.push_str(&"-".repeat(83));
        s.push('\n');
        for g in &self.groups {
            let dash = || "-".to_string();
            let _ = writeln!(
                s,
                "{:<10} {:<16} {:>7} {:>5} {:>10} {:>10.2} {:>10} {:>8.2}",
                g.model,
                g.noise,
                g.snr,
                g.count,
                g.input_si_sdr.map(|x| format!("{x:.2}")).unwrap_or_else(dash),
                g.si_sdr,
                g.input_si_sdr.map(|i| format!("{:+.2}", g.si_sdr - i)).unwrap_or_else(dash),
                g.lsd
            );
        }
        if !self.skipped.is_empty() {
            let _ = writeln!(s, "skipped {} pair(s)", self.skipped.len());
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn wave(xs: Vec<f64>) -> Waveform {
        Waveform::new(xs, 8000)
    }

    fn random(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn si_sdr_examples() {
        assert!(si_sdr(&wave(vec![1.0, 1.0]), &wave(vec![1.0, 0.0])).unwrap().abs() < 1e-9);
        let r = random(500, 1);
        for c in [1.0, -3.0, 1e-6, 250.0] {
            let est = wave(r.iter().map(|x| c * x).collect());
            assert!(si_sdr(&est, &wave(r.clone())).unwrap() >= 100.0, "c = {c}");
        }
        let e = random(500, 2);
        let a = si_sdr(&wave(e.clone()), &wave(r.clone())).unwrap();
        let b = si_sdr(&wave(e.iter().map(|x| 2.0 * x).collect()), &wave(r.clone())).unwrap();
        assert_eq!(a, b);
        assert!(si_sdr(&wave(e), &wave(vec![0.0; 500])).is_err());
        assert!(si_sdr(&wave(vec![1.0]), &wave(vec![1.0, 2.0])).is_err());
    }

    #[test]
    fn si_sdr_against_direct_formula() {
        // unit-energy estimate: the normalization is a no-op
        let r = random(64, 3);
        let mut e = random(64, 4);
        let n = dot(&e, &e).sqrt();
        e.iter_mut().for_each(|x| *x /= n);
        let alpha = dot(&e, &r) / dot(&r, &r);
        let t: Vec<f64> = r.iter().map(|x| alpha * x).collect();
        let num: f64 = t.iter().map(|x| x * x).sum();
        let den: f64 = e.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() + 1e-12;
        let want = 10.0 * (num / den).log10();
        assert!((si_sdr(&wave(e), &wave(r)).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn lsd_examples() {
        let cfg = StftConfig::with_frame_len(64, 8000);
        let r = wave(random(800, 5));
        assert_eq!(log_spectral_distance(&r, &r, &cfg).unwrap(), 0.0);
        let loud = r.scaled(10.0);
        assert!((log_spectral_distance(&loud, &r, &cfg).unwrap() - 20.0).abs() < 1e-6);
        let other = wave(random(800, 6));
        let ab = log_spectral_distance(&other, &r, &cfg).unwrap();
        let ba = log_spectral_distance(&r, &other, &cfg).unwrap();
        assert_eq!(ab, ba);
    }

    fn fixture() -> (Vec<EvalPair>, StftConfig) {
        let cfg = StftConfig::with_frame_len(32, 8000);
        let reference = random(400, 7);
        let pairs = [0.1, 0.3, 0.5]
            .iter()
            .enumerate()
            .map(|(i, level)| {
                let noise = random(400, 10 + i as u64);
                EvalPair {
                    id: format!("u{i}"),
                    estimate: wave(reference.iter().zip(&noise).map(|(r, n)| r + level * n).collect()),
                    reference: wave(reference.clone()),
                    input: Some(wave(reference.iter().zip(&noise).map(|(r, n)| r + 1.0 * n).collect())),
                    snr: 0.0,
                    noise: "white".into(),
                    model: "AV-DKF".into(),
                }
            })
            .collect();
        (pairs, cfg)
    }

    #[test]
    fn corpus_mean_matches_hand_computation() {
        let (pairs, cfg) = fixture();
        let report = evaluate_corpus(&pairs, &cfg).unwrap();
        assert_eq!(report.groups.len(), 1);
        let (a, b) = scoring_range(400, &cfg).unwrap();
        let by_hand: Vec<f64> = pairs
            .iter()
            .map(|p| si_sdr(&p.estimate.slice(a, b), &p.reference.slice(a, b)).unwrap())
            .collect();
        let mean = by_hand.iter().sum::<f64>() / 3.0;
        assert!((report.groups[0].si_sdr - mean).abs() < 1e-12);
        assert_eq!(report.groups[0].median_si_sdr, by_hand[1]);
        assert_eq!(report.groups[0].count, 3);
        assert!(report.groups[0].input_si_sdr.unwrap() < report.groups[0].si_sdr);
    }

    #[test]
    fn single_pair_and_permutation() {
        let (pairs, cfg) = fixture();
        let one = evaluate_corpus(&pairs[..1], &cfg).unwrap();
        assert_eq!(one.groups[0].si_sdr, one.utterances[0].si_sdr);
        assert_eq!(one.groups[0].lsd, one.utterances[0].lsd);
        let fwd = evaluate_corpus(&pairs, &cfg).unwrap();
        let rev: Vec<_> = pairs.iter().rev().cloned().collect();
        let back = evaluate_corpus(&rev, &cfg).unwrap();
        assert_eq!(fwd, back);
        assert_eq!(fwd.to_csv(), back.to_csv());
    }

    #[test]
    fn mismatched_pairs_are_skipped() {
        let (mut pairs, cfg) = fixture();
        pairs[1].estimate = pairs[1].estimate.slice(0, 300);
        let report = evaluate_corpus(&pairs, &cfg).unwrap();
        assert_eq!(report.utterances.len(), 2);
        assert_eq!(report.skipped.len(), 1);
        assert_eq!(report.skipped[0].0, "u1");
        assert!(report.to_table().contains("skipped 1"));
        assert!(evaluate_corpus(&[], &cfg).is_err());
    }

    #[test]
    fn istft_length_estimates_are_accepted() {
        let (mut pairs, cfg) = fixture();
        let pad = |w: &Waveform| wave(w.samples.iter().copied().chain([0.5, -0.5, 0.25]).collect());
        for p in &mut pairs {
            p.reference = pad(&p.reference);
            p.estimate = pad(&p.estimate);
            p.input = p.input.as_ref().map(pad);
        }
        let valid = cfg.synth_len(cfg.frame_count(403));
        assert!(valid < 403);
        pairs[0].estimate = pairs[0].estimate.slice(0, valid);
        let report = evaluate_corpus(&pairs, &cfg).unwrap();
        assert!(report.skipped.is_empty());
    }

    #[test]
    fn groups_are_split_by_key() {
        let (mut pairs, cfg) = fixture();
        pairs[0].model = "A-DKF".into();
        pairs[2].snr = 5.0;
        let report = evaluate_corpus(&pairs, &cfg).unwrap();
        let keys: Vec<_> = report.groups.iter().map(|g| (g.model.as_str(), g.snr)).collect();
        assert_eq!(keys, vec![("A-DKF", 0.0), ("AV-DKF", 0.0), ("AV-DKF", 5.0)]);
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 1 + 3 + 3);
    }

    proptest! {
        #[test]
        fn si_sdr_is_scale_invariant(seed in 0u64..500, c in 1e-3f64..1e3) {
            let r = random(128, seed);
            let e = random(128, seed + 1000);
            let a = si_sdr(&wave(e.clone()), &wave(r.clone())).unwrap();
            let b = si_sdr(&wave(e.iter().map(|x| c * x).collect()), &wave(r.clone())).unwrap();
            prop_assert!((a - b).abs() < 1e-12 * a.abs().max(1.0) * 10.0);
            let best = si_sdr(&wave(r.clone()), &wave(r)).unwrap();
            prop_assert!(best >= a);
        }
    }
}
