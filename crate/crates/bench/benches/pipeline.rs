use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use formtree_bench::{corpus, document, random_scores, random_tree};
use formtree_core::arbor::{decode, ScoreMode};
use formtree_core::doc_model::labels_from_forest;
use formtree_core::metrics::tree_edit_distance;
use formtree_core::trainer::{missing_gt_pairs, total_loss, TrainConfig};
use formtree_core::{Model, ModelConfig, RelationLabelSet};

fn bench_decode(c: &mut Criterion) {
    let labels = RelationLabelSet::form_default();
    let mut g = c.benchmark_group("decode");
    for n in [8, 32, 64, 128] {
        let (r, types) = random_scores(n, &labels, n as u64);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| decode(black_box(&r), &types, &labels, ScoreMode::Log).unwrap())
        });
    }
    g.finish();
}

fn bench_ted(c: &mut Criterion) {
    let mut g = c.benchmark_group("tree_edit_distance");
    for n in [8, 32, 128] {
        let (a, b) = (random_tree(n, 4, 1), random_tree(n, 4, 2));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bch, _| {
            bch.iter(|| tree_edit_distance(black_box(&a), black_box(&b)))
        });
    }
    g.finish();
}

fn bench_predict(c: &mut Criterion) {
    let labels = RelationLabelSet::form_default();
    let model = Model::<f32>::new(ModelConfig::default(), labels, 0).unwrap();
    let mut g = c.benchmark_group("predict");
    g.sample_size(10);
    for units in [20, 50] {
        let d = document(units, 3);
        g.bench_with_input(BenchmarkId::from_parameter(d.doc.len()), &d, |b, d| {
            b.iter(|| model.predict(black_box(&d.doc)).unwrap())
        });
    }
    g.finish();
}

fn bench_train_step(c: &mut Criterion) {
    let cfg = TrainConfig::default();
    let c0 = corpus(1, 5);
    let model = Model::<f32>::new(cfg.model.clone(), c0.labels.clone(), 0).unwrap();
    let d = &c0.docs[0];
    let gt = labels_from_forest(&d.doc, &d.gt, &c0.labels).unwrap();
    let mut g = c.benchmark_group("loss_and_gradients");
    g.sample_size(10);
    g.bench_function(BenchmarkId::from_parameter(d.doc.len()), |b| {
        b.iter(|| {
            let mut tape = model.tape();
            let fwd = model.forward(&mut tape, &d.doc, |p| missing_gt_pairs(p, &gt)).unwrap();
            let terms = total_loss(&mut tape, &fwd, &gt, &c0.labels, &cfg).unwrap();
            tape.backward(terms.total).unwrap()
        })
    });
    g.finish();
}

criterion_group!(benches, bench_decode, bench_ted, bench_predict, bench_train_step);
criterion_main!(benches);
