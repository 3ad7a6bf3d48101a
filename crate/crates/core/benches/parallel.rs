//! One-thread pool against the default pool for the data-parallel stages.
//! Build with `--no-default-features` to measure the sequential fallback.

use std::hint::black_box;

use avdkf::data::{noisy_mixtures, synth_utterances, CorpusConfig, NoiseKind};
use avdkf::enhance::{enhance_batch, EnhanceConfig};
use avdkf::models::{draw_noise, elbo_and_grad, GenerativeModel, ModelKind, PowerSequence};
use avdkf::par;
use avdkf::presets::Preset;
use avdkf::signal::stft;
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const POOLS: [(&str, usize); 2] = [("1-thread", 1), ("default", 0)];

fn bench_all(c: &mut Criterion) {
    let preset = Preset::desk();
    let corpus = CorpusConfig {
        utterances: 16,
        ..preset.corpus.clone()
    };
    let utts = synth_utterances(&corpus, &preset.stft, 0).unwrap();
    let seqs: Vec<PowerSequence> = utts.iter().map(|u| u.power_sequence(&preset.stft).unwrap()).collect();
    let mut model = GenerativeModel::new(ModelKind::AvDkf, preset.dims.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    model.fit_stats(&seqs, true).unwrap();

    let mut group = c.benchmark_group("stft");
    for (label, jobs) in POOLS {
        group.bench_function(label, |b| {
            b.iter(|| par::with_jobs(jobs, || par::map(&utts, |u| stft(black_box(&u.clean), &preset.stft).unwrap())))
        });
    }
    group.finish();

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let noise: Vec<_> = seqs.iter().map(|s| draw_noise(s.frames(), model.latent_dim(), &mut rng)).collect();
    let mut group = c.benchmark_group("elbo_grad_batch");
    group.sample_size(10);
    for (label, jobs) in POOLS {
        group.bench_function(label, |b| {
            b.iter(|| {
                par::with_jobs(jobs, || {
                    par::map_range(seqs.len(), |i| elbo_and_grad(&model, &[&seqs[i]], &noise[i..i + 1]).unwrap())
                })
            })
        });
    }
    group.finish();

    let mixes = noisy_mixtures(&utts[..4], &[0.0], &[NoiseKind::White], 0).unwrap();
    let items: Vec<_> = mixes.iter().map(|m| (m.noisy.clone(), Some(m.visual.clone()))).collect();
    let cfg = EnhanceConfig {
        em_iters: 5,
        ..preset.enhance.clone()
    };
    let mut group = c.benchmark_group("enhance_batch");
    group.sample_size(10);
    for (label, jobs) in POOLS {
        group.bench_function(label, |b| {
            b.iter(|| par::with_jobs(jobs, || enhance_batch(black_box(&items), &model, &preset.stft, &cfg)))
        });
    }
    group.finish();
}

criterion_group!(benches, bench_all);
criterion_main!(benches);
