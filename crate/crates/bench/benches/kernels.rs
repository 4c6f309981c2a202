use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use cpm2c_core::data::{episode_rng, sample_episode, RngDomain, Split};
use cpm2c_core::metric::{cost_matrix, otam_distance, AlignmentConfig};
use cpm2c_core::model::{EpisodeInput, Passes, PromptBank};
use cpm2c_core::nn::ForwardCtx;
use cpm2c_core::runner::RunConfig;
use cpm2c_core::{Precision, Tape, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
}

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut group = c.benchmark_group("matmul");
    for n in [16, 64, 128] {
        let (a, b) = (randn(&[n, n], &mut rng), randn(&[n, n], &mut rng));
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new(Precision::Double);
                let x = tape.leaf(a.clone(), true).unwrap();
                let y = tape.leaf(b.clone(), true).unwrap();
                let loss = x.matmul(y).unwrap().sum().unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn otam(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = AlignmentConfig::default();
    let mut group = c.benchmark_group("otam");
    for t in [8, 16] {
        let (s, q) = (randn(&[t, 32], &mut rng), randn(&[t, 32], &mut rng));
        group.bench_with_input(BenchmarkId::from_parameter(t), &t, |bench, _| {
            bench.iter(|| {
                let tape = Tape::new(Precision::Double);
                let s = tape.leaf(s.clone(), true).unwrap();
                let q = tape.leaf(q.clone(), true).unwrap();
                let d = otam_distance(cost_matrix(s, q).unwrap(), &cfg).unwrap();
                tape.backward(d).unwrap()
            })
        });
    }
    group.finish();
}

fn episode(c: &mut Criterion) {
    let cfg = RunConfig::desk();
    let data = cfg.load_data().unwrap();
    let bank = PromptBank::for_split(&data, Split::Train).unwrap();
    let model = cfg.init_model().unwrap();
    let fc = cfg.forward_config();
    let weights = cfg.weights();
    let mut rng = episode_rng(0, RngDomain::TrainEpisodes, 0);
    let batch = sample_episode(&data, &mut rng, cfg.way, cfg.shot, cfg.query, Split::Train).unwrap();

    let mut group = c.benchmark_group("episode");
    group.sample_size(20);
    group.bench_function("forward_eval", |bench| {
        bench.iter(|| {
            let input = EpisodeInput::new(&data, &batch, 0).unwrap();
            let tape = Tape::new(Precision::Single);
            model.episode(&tape, &input, &fc, &ForwardCtx::eval(), Passes::CLASSIFY).unwrap().correct()
        })
    });
    group.bench_function("train_step", |bench| {
        bench.iter(|| {
            let input = EpisodeInput::new(&data, &batch, 0).unwrap().with_bank(&bank).unwrap();
            let tape = Tape::new(Precision::Single);
            let out = model.episode(&tape, &input, &fc, &ForwardCtx::train(), Passes::TRAIN).unwrap();
            tape.backward(out.total(&weights).unwrap()).unwrap()
        })
    });
    group.finish();
}

criterion_group!(benches, matmul, otam, episode);
criterion_main!(benches);
