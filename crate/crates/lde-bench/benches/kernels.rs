//! Kernel benchmarks along the pipeline's hot paths: convolution forward
//! and backward, the analytic expansion loss against its Monte-Carlo
//! oracle, a full optimizer step, protocol splitting, and retrieval
//! evaluation. Run with `cargo bench -p lde-bench`.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use lde_core::data::{split, Protocol, Record, SplitRatios, Tod};
use lde_core::eval::{evaluate, EvalItem};
use lde_core::expansion::{
    analytic_lde_ce, mc_expanded_ce, ClassifierHead, DomainStats, LossConfig,
};
use lde_core::graph::Graph;
use lde_core::model::ModelConfig;
use lde_core::rng::Rng;
use lde_core::tensor::Tensor;
use lde_core::train::{pk_sample, train_step, TrainConfig, TrainSet, TrainState};

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).expect("valid shape")
}

fn bench_conv2d(c: &mut Criterion) {
    let mut rng = Rng::new(1);
    let x = randn(&mut rng, &[8, 16, 32, 32]);
    let k = randn(&mut rng, &[32, 16, 3, 3]);
    c.bench_function("conv2d/forward 8x16x32x32 -> 32ch", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xn = g.constant(black_box(x.clone()));
            let kn = g.leaf(k.clone(), true);
            let y = g.conv2d(xn, kn, 1, 1).unwrap();
            black_box(g.value(y).data()[0])
        })
    });
    c.bench_function("conv2d/forward+backward 8x16x32x32 -> 32ch", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let xn = g.leaf(black_box(x.clone()), true);
            let kn = g.leaf(k.clone(), true);
            let y = g.conv2d(xn, kn, 1, 1).unwrap();
            let loss = g.mean_all(y).unwrap();
            let grads = g.backward(loss).unwrap();
            black_box(grads.get(kn).expect("kernel gradient").data()[0])
        })
    });
}

/// B=64 batch, D=32 embedding, M=30 classes, S=3 source domains — the
/// regime where the closed form has to beat sampling to be worth having.
fn bench_expansion_losses(c: &mut Criterion) {
    let (b, d, m, s) = (64usize, 32usize, 30usize, 3usize);
    let mut rng = Rng::new(7);
    let f = randn(&mut rng, &[b, d]);
    let labels: Vec<usize> = (0..b).map(|i| i % m).collect();
    let domains: Vec<usize> = (0..b).map(|i| i % s).collect();
    let head =
        ClassifierHead::new(randn(&mut rng, &[m, d]), randn(&mut rng, &[m])).expect("valid head");
    let stats: Vec<DomainStats> = (0..s)
        .map(|j| {
            let mut st = DomainStats::new(j, d);
            st.update(&randn(&mut rng, &[2 * d + 8, d])).expect("update");
            st
        })
        .collect();
    let sigmas: Vec<Tensor> =
        stats.iter().map(|st| st.covariance().expect("enough samples")).collect();
    let refs: Vec<&DomainStats> = stats.iter().collect();
    let cfg = LossConfig { k: 100, ..LossConfig::default() };

    c.bench_function("loss/analytic b64 d32 s3", |bch| {
        bch.iter(|| {
            black_box(analytic_lde_ce(&f, &labels, &domains, &head, &refs, &cfg).unwrap())
        })
    });
    c.bench_function("loss/monte-carlo k100 b64 d32 s3", |bch| {
        bch.iter(|| {
            let mut mc_rng = Rng::new(11);
            black_box(mc_expanded_ce(&f, &labels, &head, &sigmas, &cfg, &mut mc_rng).unwrap().value)
        })
    });
}

fn bench_train_step(c: &mut Criterion) {
    let model_cfg = ModelConfig {
        in_channels: 3,
        height: 32,
        width: 32,
        widths: [8, 8, 16, 16],
        classes: 8,
        attention_ratio: 2,
        seed: 3,
    };
    let train_cfg = TrainConfig { p: 2, k_inst: 4, iters: usize::MAX / 2, ..TrainConfig::default() };
    let mut rng = Rng::new(5);
    let mut records = Vec::new();
    let mut images = Vec::new();
    for pid in 0..8usize {
        for k in 0..4usize {
            let scene = (pid + k) % 4;
            records.push(Record {
                path: format!("mem/p{pid}_{k}.png"),
                pid,
                cam: scene * 2 + k % 2,
                scene,
                ts: 0,
                tod: Tod::Day,
            });
            images.push(randn(&mut rng, &[3, 32, 32]));
        }
    }
    let set = TrainSet::from_parts(records, images, 2).expect("valid train set");
    let mut state = TrainState::new(model_cfg, train_cfg).expect("valid configs");
    let batch = pk_sample(&set.records, 2, 4, &mut Rng::new(17)).expect("batch");

    let mut group = c.benchmark_group("train");
    group.sample_size(10);
    group.bench_function("step b8 32px", |bch| {
        bch.iter(|| black_box(train_step(&mut state, &set, &batch).unwrap().total))
    });
    group.finish();
}

fn synthetic_records() -> Vec<Record> {
    // 4 domains x 2 scenes, 500 identities x 12 images = 6,000 records.
    let mut records = Vec::new();
    for pid in 0..500usize {
        let domain = pid % 4;
        for k in 0..12usize {
            let scene = domain * 2 + k % 2;
            let cam = scene * 3 + (k / 2) % 3;
            let tod = if (k / 4) % 2 == 0 { Tod::Day } else { Tod::Night };
            records.push(Record {
                path: format!("images/p{pid:04}_{k:02}.png"),
                pid,
                cam,
                scene,
                ts: (pid * 12 + k) as i64,
                tod,
            });
        }
    }
    records
}

fn bench_split(c: &mut Criterion) {
    let records = synthetic_records();
    for protocol in [Protocol::CloseScene, Protocol::OpenScene, Protocol::DayNight] {
        c.bench_function(&format!("split/{protocol} 6000 records"), |bch| {
            bch.iter(|| {
                black_box(
                    split(&records, protocol, SplitRatios::default(), 9).unwrap().train.len(),
                )
            })
        });
    }
}

fn bench_evaluate(c: &mut Criterion) {
    let d = 64;
    let mut rng = Rng::new(13);
    let mut item = |pid: usize, cam: usize| EvalItem {
        pid,
        cam,
        emb: (0..d).map(|_| rng.normal()).collect(),
    };
    let queries: Vec<EvalItem> = (0..200).map(|i| item(i % 50, 0)).collect();
    let gallery: Vec<EvalItem> = (0..1000).map(|i| item(i % 50, 1 + i % 3)).collect();
    c.bench_function("eval/200 queries x 1000 gallery d64", |bch| {
        bch.iter(|| black_box(evaluate(&queries, &gallery).unwrap().map))
    });
}

criterion_group!(
    benches,
    bench_conv2d,
    bench_expansion_losses,
    bench_train_step,
    bench_split,
    bench_evaluate
);
criterion_main!(benches);
