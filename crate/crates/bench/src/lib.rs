//! Fixtures shared by the benchmarks.

use formtree_core::corpus::{generate_document, GenConfig};
use formtree_core::doc_model::labels_from_forest;
use formtree_core::metrics::OrderedTree;
use formtree_core::nn::Tensor;
use formtree_core::{Corpus, LabeledDoc, RelationLabelSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random column-stochastic `n x n` score matrix and type matrix.
pub fn random_scores(n: usize, labels: &RelationLabelSet, seed: u64) -> (Tensor<f64>, Vec<Vec<usize>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data: Vec<f64> = (0..n * n).map(|_| rng.random::<f64>() + 1e-3).collect();
    for j in 0..n {
        let s: f64 = (0..n).map(|i| data[i * n + j]).sum();
        for i in 0..n {
            data[i * n + j] /= s;
        }
    }
    let types = (0..n)
        .map(|_| (0..n).map(|_| rng.random_range(0..labels.len())).collect())
        .collect();
    (Tensor::new(vec![n, n], data).expect("square"), types)
}

/// Random ordered tree of `n` nodes over a small alphabet.
pub fn random_tree(n: usize, alphabet: u8, seed: u64) -> OrderedTree<u8> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = OrderedTree::leaf(rng.random_range(0..alphabet));
    for i in 1..n {
        let p = rng.random_range(0..i);
        t.push_child(p, rng.random_range(0..alphabet));
    }
    t
}

/// One generated document with roughly `units` units.
pub fn document(units: usize, seed: u64) -> LabeledDoc {
    let cfg = GenConfig {
        seed,
        units_per_doc: (units.saturating_sub(units / 5).max(4), units + units / 5),
        kvps: (units / 8, units / 5),
        ..GenConfig::default()
    };
    generate_document(&cfg, 0).expect("layout fits")
}

/// Small corpus for training-step benchmarks.
pub fn corpus(n_docs: usize, seed: u64) -> Corpus {
    let cfg = GenConfig {
        seed,
        n_docs,
        units_per_doc: (8, 30),
        ..GenConfig::default()
    };
    let c = formtree_core::corpus::generate_corpus(&cfg).expect("layout fits");
    for d in &c.docs {
        labels_from_forest(&d.doc, &d.gt, &c.labels).expect("generator labels round trip");
    }
    c
}
