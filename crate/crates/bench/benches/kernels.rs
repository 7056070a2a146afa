use criterion::{black_box, criterion_group, criterion_main, Criterion};

use sepkit::asr::ctc::ctc_nll;
use sepkit::dsp::{feature_transform, MelTransform, StftConfig, StftProcessor, SAMPLE_RATE};
use sepkit::losses::{best_permutation, pit_loss_value};
use sepkit::separator::{ConformerConfig, Frontend, Separator};
use sepkit::simulate::{generate_sample, SimConfig};
use sepkit::trainer::{fa_loss, Example, FeatureSpace, LossConfig};
use sepkit_bench::{log_probs, noise};

fn dsp(c: &mut Criterion) {
    let proc = StftProcessor::new(StftConfig::default()).unwrap();
    let audio = noise(SAMPLE_RATE as usize, 1);
    let spec = proc.stft(&audio).unwrap();
    let span = StftConfig::default().span(spec.magnitude().rows);
    let mel = MelTransform::standard();
    let mag = spec.magnitude();
    c.bench_function("stft 1 s", |b| b.iter(|| proc.stft(black_box(&audio)).unwrap()));
    c.bench_function("istft 1 s", |b| b.iter(|| proc.istft(black_box(&spec), span).unwrap()));
    c.bench_function("mel projection 1 s", |b| b.iter(|| feature_transform(black_box(&mag), &mel).unwrap()));
}

fn losses(c: &mut Criterion) {
    let lp = log_probs(200, 30, 2);
    let target: Vec<usize> = (1..=40).map(|i| 1 + i % 29).collect();
    c.bench_function("ctc nll T=200 V=30 |y|=40", |b| b.iter(|| ctc_nll(black_box(&lp), 200, 30, &target, 0)));

    let costs: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| ((i * 7 + j * 3) % 5) as f64).collect()).collect();
    c.bench_function("best permutation C=3", |b| b.iter(|| best_permutation(black_box(&costs))));

    let proc = StftProcessor::new(StftConfig::default()).unwrap();
    let mags: Vec<_> = (0..4).map(|s| proc.stft(&noise(16_000, s)).unwrap().magnitude()).collect();
    let mel = MelTransform::standard();
    c.bench_function("pit mel value C=2 1 s", |b| {
        b.iter(|| pit_loss_value(black_box(&mags[..2]), &mags[2..], Some(&mel)).unwrap())
    });
}

fn model(c: &mut Criterion) {
    let fe = Frontend::new();
    let sep = Separator::new(ConformerConfig::toy(2), 1).unwrap();
    let sample = generate_sample(&SimConfig::default(), 3, 0).unwrap();
    let ex = Example::from_sample(&sample, &fe, 2).unwrap();
    let space = FeatureSpace::new(&LossConfig::default());
    let mut g = c.benchmark_group("toy2 separator");
    g.sample_size(20);
    g.bench_function("separate one mixture", |b| b.iter(|| sep.separate(&fe, black_box(&sample.mixture)).unwrap()));
    g.bench_function("fa loss forward+backward", |b| {
        b.iter(|| {
            let p = sep.params.bind(true);
            let loss = fa_loss(&sep.cfg, &p, black_box(&ex), &space).unwrap();
            loss.backward().unwrap();
        })
    });
    g.finish();
}

criterion_group!(benches, dsp, losses, model);
criterion_main!(benches);
