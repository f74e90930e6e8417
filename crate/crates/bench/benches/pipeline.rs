//! Benchmarks for the hot paths: trend filtering, segmentation, frame
//! featurization, the contrastive batch step, and pool scoring.

use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segsearch_core::data::{normalize_minmax, Window};
use segsearch_core::encoder::{
    contrastive_batch_gradients, pool_segment, FrameEncoder, ProjectionHead, ReferenceFeaturizer,
    EMBED_DIM,
};
use segsearch_core::retrieval::{make_pool, score_and_rank, EmbeddingIndex};
use segsearch_core::segment::{segment_window, SegmentationConfig};
use segsearch_core::testing::piecewise_linear_series;
use segsearch_core::trend::{solve_tv2, Tv2Options, Tv2Problem};
use segsearch_core::{SegmentSpec, SharedEmbedding};

fn bench_window(seed: u64) -> Window {
    let raw = piecewise_linear_series(
        1024,
        &[210, 440, 620, 850],
        &[0.004, -0.005, 0.0045, -0.006, 0.005],
        0.01,
        seed,
    );
    let (values, meta) = normalize_minmax(&raw).unwrap();
    Window {
        window_id: format!("bench{seed}"),
        subset_id: "bench".into(),
        series_id: "syn".into(),
        start_offset: 0,
        values,
        normalized: true,
        degenerate: meta.degenerate,
    }
}

fn tv2_solve(c: &mut Criterion) {
    let window = bench_window(1);
    let problem = Tv2Problem::new(window.values.clone(), 100.0).unwrap();
    let opts = Tv2Options::default();
    let mut group = c.benchmark_group("trend");
    group.sample_size(20);
    group.bench_function("tv2_solve_1024_lambda100", |b| {
        b.iter(|| solve_tv2(black_box(&problem), &opts).unwrap())
    });
    group.finish();
}

fn segmentation(c: &mut Criterion) {
    let window = bench_window(2);
    let cfg = SegmentationConfig::default();
    let opts = Tv2Options::default();
    let mut group = c.benchmark_group("segmentation");
    group.sample_size(20);
    group.bench_function("segment_window_1024", |b| {
        b.iter(|| segment_window(black_box(&window), &cfg, &opts).unwrap())
    });
    group.finish();
}

fn featurize_and_pool(c: &mut Criterion) {
    let window = bench_window(3);
    c.bench_function("encode_frames_1024", |b| {
        b.iter(|| ReferenceFeaturizer.encode(black_box(&window)).unwrap())
    });
    let features = ReferenceFeaturizer.encode(&window).unwrap();
    c.bench_function("pool_segment_1024", |b| {
        b.iter(|| pool_segment(black_box(&features), 200, 800).unwrap())
    });
}

fn contrastive_step(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = 512;
    let x_seg = Array2::from_shape_fn((batch, 8), |_| rng.gen_range(-1.0..1.0));
    let x_text = Array2::from_shape_fn((batch, 256), |_| rng.gen_range(-1.0..1.0));
    let seg_head = ProjectionHead::glorot(8, 64, EMBED_DIM, &mut rng);
    let text_head = ProjectionHead::glorot(256, 64, EMBED_DIM, &mut rng);
    let mut group = c.benchmark_group("training");
    group.sample_size(20);
    group.bench_function("contrastive_batch_512", |b| {
        b.iter(|| {
            contrastive_batch_gradients(
                black_box(&seg_head),
                black_box(&text_head),
                &x_seg,
                &x_text,
                0.07,
            )
            .unwrap()
        })
    });
    group.finish();
}

fn pool_scoring(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    // 10k windows x 6 segments, unit rows
    let n_windows = 10_000usize;
    let per_window = 6usize;
    let n = n_windows * per_window;
    let mut rows = Array2::<f64>::zeros((n, EMBED_DIM));
    let mut specs = Vec::with_capacity(n);
    let mut window_ids = Vec::with_capacity(n_windows);
    for w in 0..n_windows {
        let id = format!("w{w:05}");
        for s in 0..per_window {
            let mut v: Array1<f64> = Array1::from_shape_fn(EMBED_DIM, |_| rng.gen_range(-1.0..1.0));
            let norm = v.dot(&v).sqrt();
            v /= norm;
            rows.row_mut(w * per_window + s).assign(&v);
            specs.push(SegmentSpec::new(&id, s * 40 + 1, s * 40 + 41).unwrap());
        }
        window_ids.push(id);
    }
    let index = EmbeddingIndex::from_parts(specs.clone(), rows).unwrap();
    let pool = make_pool("q", &specs[0], &window_ids, n_windows, 1, &index).unwrap();
    let mut q = Array1::<f64>::zeros(EMBED_DIM);
    q[0] = 1.0;
    let q = SharedEmbedding::new(q).unwrap();
    let mut group = c.benchmark_group("retrieval");
    group.sample_size(30);
    group.bench_function("score_and_rank_60k_candidates_top10", |b| {
        b.iter_batched(
            || pool.clone(),
            |p| score_and_rank(black_box(&q), &p, &index, 10).unwrap(),
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

criterion_group!(
    benches,
    tv2_solve,
    segmentation,
    featurize_and_pool,
    contrastive_step,
    pool_scoring
);
criterion_main!(benches);
