use formtree_bench::{corpus, document, random_scores, random_tree};
use formtree_core::RelationLabelSet;

#[test]
fn scores_are_column_stochastic_and_seeded() {
    let labels = RelationLabelSet::form_default();
    let (r, types) = random_scores(9, &labels, 4);
    for j in 0..9 {
        let s: f64 = (0..9).map(|i| r.data()[i * 9 + j]).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    assert!(types.iter().flatten().all(|&t| t < labels.len()));
    assert_eq!(random_scores(9, &labels, 4), (r, types));
}

#[test]
fn fixtures_have_requested_sizes() {
    assert_eq!(random_tree(17, 3, 0).len(), 17);
    let d = document(30, 1);
    assert!((24..=36).contains(&d.doc.len()), "{}", d.doc.len());
    assert_eq!(corpus(3, 2).docs.len(), 3);
}
