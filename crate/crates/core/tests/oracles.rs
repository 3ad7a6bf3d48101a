use std::f64::consts::PI;

use avdkf::metrics::si_sdr_slices;
use avdkf::models::gaussian_kl;
use avdkf::signal::{istft, stft, StftConfig, Waveform};
use num_complex::Complex64;
use proptest::prelude::*;

fn naive_dft_bin(frame: &[f64], k: usize) -> Complex64 {
    let n = frame.len() as f64;
    frame
        .iter()
        .enumerate()
        .map(|(i, x)| Complex64::from_polar(*x, -2.0 * PI * k as f64 * i as f64 / n))
        .sum()
}

fn signal(len: usize, seed: u64) -> Vec<f64> {
    let mut state = seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) | 1;
    (0..len)
        .map(|_| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        })
        .collect()
}

#[test]
fn stft_matches_a_windowed_naive_dft() {
    let cfg = StftConfig::with_frame_len(32, 8000);
    let x = signal(200, 5);
    let s = stft(&Waveform::new(x.clone(), 8000), &cfg).unwrap();
    assert_eq!(s.frames(), (200 - 32) / 8 + 1);
    assert_eq!(s.freq_bins(), 17);
    for t in [0, 3, s.frames() - 1] {
        let frame: Vec<f64> = (0..32)
            .map(|i| x[t * 8 + i] * (PI * (i as f64 + 0.5) / 32.0).sin())
            .collect();
        for k in 0..17 {
            assert!((s.data[[k, t]] - naive_dft_bin(&frame, k)).norm() < 1e-12);
        }
    }
}

#[test]
fn si_sdr_of_a_known_mixture() {
    let r: Vec<f64> = (0..64).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let e: Vec<f64> = (0..64).map(|i| if i % 4 < 2 { 1.0 } else { -1.0 }).collect();
    let est: Vec<f64> = r.iter().zip(&e).map(|(r, e)| 2.0 * r + 0.5 * e).collect();
    // r and e are orthogonal with equal energy, so the ratio is (2 / 0.5)^2.
    let expected = 10.0 * 16f64.log10();
    assert!((si_sdr_slices(&est, &r).unwrap() - expected).abs() < 1e-9);
}

#[test]
fn kl_of_shifted_unit_gaussians_is_half_squared_distance() {
    let kl = gaussian_kl(&[1.0, -2.0], &[1.0, 1.0], &[0.0, 0.0], &[1.0, 1.0]).unwrap();
    assert!((kl - 2.5).abs() < 1e-15);
    assert!(gaussian_kl(&[0.0], &[0.0], &[0.0], &[1.0]).is_err());
}

proptest! {
    #[test]
    fn istft_inverts_stft_away_from_the_edges(
        seed in 0u64..10_000,
        frames in 4usize..40,
        log_n in 3u32..8,
    ) {
        let n = 1usize << log_n;
        let cfg = StftConfig::with_frame_len(n, 8000);
        let len = cfg.synth_len(frames);
        let x = signal(len, seed);
        let y = istft(&stft(&Waveform::new(x.clone(), 8000), &cfg).unwrap()).unwrap();
        prop_assert_eq!(y.len(), len);
        for i in cfg.edge_len()..len - cfg.edge_len() {
            prop_assert!((y.samples[i] - x[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn si_sdr_is_scale_invariant(seed in 0u64..10_000, log_c in -6f64..6.0) {
        let r = signal(128, seed);
        let e: Vec<f64> = r.iter().zip(signal(128, seed + 1)).map(|(r, n)| r + 0.3 * n).collect();
        let c = 10f64.powf(log_c);
        let scaled: Vec<f64> = e.iter().map(|x| c * x).collect();
        let a = si_sdr_slices(&e, &r).unwrap();
        let b = si_sdr_slices(&scaled, &r).unwrap();
        prop_assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn kl_is_nonnegative_and_zero_on_the_diagonal(
        mu in proptest::collection::vec(-5f64..5.0, 3),
        var in proptest::collection::vec(0.01f64..10.0, 3),
        mu2 in proptest::collection::vec(-5f64..5.0, 3),
        var2 in proptest::collection::vec(0.01f64..10.0, 3),
    ) {
        prop_assert!(gaussian_kl(&mu, &var, &mu2, &var2).unwrap() >= -1e-12);
        prop_assert!(gaussian_kl(&mu, &var, &mu, &var).unwrap().abs() < 1e-12);
    }
}
