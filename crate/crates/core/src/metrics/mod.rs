//! Field-level and tree-level F1 and tree edit distance similarity.

mod teds;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::doc_model::{role, Document, Forest, HierTree, TreeKind};
use crate::error::{Error, Result};

pub use teds::{
    normalize_text, ordered_field_tree, teds, teds_ordered, tree_edit_distance, FieldLabel,
    OrderedTree,
};

/// Raw match counts with derived precision, recall and F1.
///
/// Precision (recall) is 1 when nothing was predicted (expected), so two empty
/// sides agree perfectly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    pub fn merge(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Serialize, Deserialize)]
struct CountsRepr {
    tp: usize,
    fp: usize,
    #[serde(rename = "fn")]
    fn_: usize,
    #[serde(default)]
    precision: f64,
    #[serde(default)]
    recall: f64,
    #[serde(default)]
    f1: f64,
}

impl Serialize for Counts {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        CountsRepr {
            tp: self.tp,
            fp: self.fp,
            fn_: self.fn_,
            precision: self.precision(),
            recall: self.recall(),
            f1: self.f1(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Counts {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = CountsRepr::deserialize(d)?;
        Ok(Counts {
            tp: r.tp,
            fp: r.fp,
            fn_: r.fn_,
        })
    }
}

/// Per-class and aggregate match counts.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub per_class: BTreeMap<String, Counts>,
}

impl MatchReport {
    pub fn micro(&self) -> Counts {
        let mut c = Counts::default();
        for v in self.per_class.values() {
            c.merge(*v);
        }
        c
    }

    /// Mean F1 over classes present on either side, excluding `unknown`.
    pub fn macro_f1(&self) -> f64 {
        let scores: Vec<f64> = self
            .per_class
            .iter()
            .filter(|(k, _)| k.as_str() != role::UNKNOWN)
            .map(|(_, c)| c.f1())
            .collect();
        if scores.is_empty() {
            1.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        }
    }

    pub fn merge(&mut self, other: &MatchReport) {
        for (k, v) in &other.per_class {
            self.per_class.entry(k.clone()).or_default().merge(*v);
        }
    }

    fn count<K: Ord + Clone>(pred: Vec<(String, K)>, gt: Vec<(String, K)>) -> MatchReport {
        let mut report = MatchReport::default();
        let mut remaining: BTreeMap<(String, K), usize> = BTreeMap::new();
        for item in gt {
            *remaining.entry(item).or_default() += 1;
        }
        for item in pred {
            let class = item.0.clone();
            let c = report.per_class.entry(class).or_default();
            match remaining.get_mut(&item) {
                Some(n) if *n > 0 => {
                    *n -= 1;
                    c.tp += 1;
                }
                _ => c.fp += 1,
            }
        }
        for ((class, _), n) in remaining {
            report.per_class.entry(class).or_default().fn_ += n;
        }
        report
    }
}

fn check_same_doc(pred: &Forest, gt: &Forest) -> Result<()> {
    let units = |f: &Forest| f.trees.iter().map(HierTree::num_units).sum::<usize>();
    let (a, b) = (units(pred), units(gt));
    if a != b {
        return Err(Error::InvalidForest(format!(
            "forests cover {a} and {b} units; not the same document"
        )));
    }
    Ok(())
}

/// A predicted field matches a ground-truth field when role and member set
/// are equal. Fields of role `other` are not scored.
pub fn field_f1(pred: &Forest, gt: &Forest) -> Result<MatchReport> {
    check_same_doc(pred, gt)?;
    let keyed = |f: &Forest| -> Vec<(String, Vec<usize>)> {
        f.fields()
            .filter(|fl| fl.role != role::OTHER)
            .map(|fl| {
                let mut m = fl.members.clone();
                m.sort_unstable();
                (fl.role.clone(), m)
            })
            .collect()
    };
    Ok(MatchReport::count(keyed(pred), keyed(gt)))
}

/// A predicted tree matches when every field and typed edge is identical.
/// Classes are tree kinds; trees of kind `other` are not scored.
pub fn tree_f1(pred: &Forest, gt: &Forest) -> Result<MatchReport> {
    check_same_doc(pred, gt)?;
    let keyed = |f: &Forest| -> Vec<(String, HierTree)> {
        f.trees
            .iter()
            .filter(|t| t.kind() != TreeKind::Other)
            .map(|t| (t.kind().name().to_string(), t.clone()))
            .collect()
    };
    Ok(MatchReport::count(keyed(pred), keyed(gt)))
}

/// TEDS summary for one tree kind.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct KindTeds {
    pub n_trees: usize,
    pub sum: f64,
}

impl KindTeds {
    pub fn mean(&self) -> f64 {
        if self.n_trees == 0 {
            0.0
        } else {
            self.sum / self.n_trees as f64
        }
    }
}

/// Greedily pairs ground-truth trees (kind other than `other`) with predicted
/// trees by descending TEDS, ties to the lower gt then pred index. Returns
/// `(gt tree index, score)` per scored gt tree; unmatched ones score 0.
pub fn pair_trees(pred: &Forest, gt: &Forest, doc: &Document) -> Result<Vec<(usize, f64)>> {
    let gt_idx: Vec<usize> = (0..gt.len())
        .filter(|&g| gt.trees[g].kind() != TreeKind::Other)
        .collect();
    let pred_t: Vec<OrderedTree<FieldLabel>> = pred
        .trees
        .iter()
        .map(|t| ordered_field_tree(t, doc))
        .collect();
    let mut cand = Vec::new();
    for (gi, &g) in gt_idx.iter().enumerate() {
        let gt_t = ordered_field_tree(&gt.trees[g], doc);
        for (p, pt) in pred_t.iter().enumerate() {
            let s = teds_ordered(pt, &gt_t)?;
            if s > 0.0 {
                cand.push((s, gi, p));
            }
        }
    }
    cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut score = vec![0.0; gt_idx.len()];
    let (mut g_used, mut p_used) = (vec![false; gt_idx.len()], vec![false; pred_t.len()]);
    for (s, gi, p) in cand {
        if !g_used[gi] && !p_used[p] {
            g_used[gi] = true;
            p_used[p] = true;
            score[gi] = s;
        }
    }
    Ok(gt_idx.into_iter().zip(score).collect())
}

/// Corpus-level aggregate of all metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusReport {
    pub n_docs: usize,
    pub field: MatchReport,
    pub tree: MatchReport,
    pub teds: BTreeMap<String, KindTeds>,
}

impl CorpusReport {
    pub fn teds_of(&self, kind: TreeKind) -> f64 {
        self.teds.get(kind.name()).map_or(0.0, KindTeds::mean)
    }

    pub fn teds_kvp(&self) -> f64 {
        self.teds_of(TreeKind::Kvp)
    }

    pub fn teds_cg(&self) -> f64 {
        self.teds_of(TreeKind::ChoiceGroup)
    }

    /// Mean TEDS over all scored ground-truth trees (1 when there are none).
    pub fn teds_mean(&self) -> f64 {
        let (n, s) = self
            .teds
            .values()
            .fold((0, 0.0), |(n, s), k| (n + k.n_trees, s + k.sum));
        if n == 0 {
            1.0
        } else {
            s / n as f64
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let teds: BTreeMap<&str, f64> = self.teds.iter().map(|(k, v)| (k.as_str(), v.mean())).collect();
        serde_json::json!({
            "n_docs": self.n_docs,
            "f1_field": self.field.micro().f1(),
            "f1_tree": self.tree.micro().f1(),
            "macro_f1_field": self.field.macro_f1(),
            "macro_f1_tree": self.tree.macro_f1(),
            "teds_mean": self.teds_mean(),
            "teds": teds,
            "field": self.field,
            "tree": self.tree,
        })
    }

    /// Aligned-column text table.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "documents: {}", self.n_docs);
        let _ = writeln!(
            s,
            "{:<8} {:<8} {:>6} {:>6} {:>6} {:>9} {:>7} {:>7}",
            "level", "class", "tp", "fp", "fn", "precision", "recall", "f1"
        );
        for (level, rep) in [("field", &self.field), ("tree", &self.tree)] {
            let rows = rep
                .per_class
                .iter()
                .map(|(k, c)| (k.as_str(), *c))
                .chain([("micro", rep.micro())]);
            for (class, c) in rows {
                let _ = writeln!(
                    s,
                    "{:<8} {:<8} {:>6} {:>6} {:>6} {:>9.4} {:>7.4} {:>7.4}",
                    level,
                    class,
                    c.tp,
                    c.fp,
                    c.fn_,
                    c.precision(),
                    c.recall(),
                    c.f1()
                );
            }
        }
        let _ = writeln!(s, "{:<8} {:>7} {:>7}", "teds", "trees", "mean");
        for (k, v) in &self.teds {
            let _ = writeln!(s, "{:<8} {:>7} {:>7.4}", k, v.n_trees, v.mean());
        }
        let _ = writeln!(s, "{:<8} {:>7} {:>7.4}", "all", self.teds.values().map(|v| v.n_trees).sum::<usize>(), self.teds_mean());
        s
    }
}

/// Metrics of one document.
pub fn doc_eval(doc: &Document, pred: &Forest, gt: &Forest) -> Result<CorpusReport> {
    let mut r = CorpusReport {
        n_docs: 1,
        field: field_f1(pred, gt)?,
        tree: tree_f1(pred, gt)?,
        teds: BTreeMap::new(),
    };
    for (g, s) in pair_trees(pred, gt, doc)? {
        let k = r.teds.entry(gt.trees[g].kind().name().to_string()).or_default();
        k.n_trees += 1;
        k.sum += s;
    }
    Ok(r)
}

impl CorpusReport {
    pub fn merge(&mut self, other: &CorpusReport) {
        self.n_docs += other.n_docs;
        self.field.merge(&other.field);
        self.tree.merge(&other.tree);
        for (k, v) in &other.teds {
            let e = self.teds.entry(k.clone()).or_default();
            e.n_trees += v.n_trees;
            e.sum += v.sum;
        }
    }
}

/// Aggregates metrics over aligned documents.
pub fn corpus_eval(docs: &[Document], preds: &[Forest], gts: &[Forest]) -> Result<CorpusReport> {
    if docs.len() != preds.len() || docs.len() != gts.len() {
        return Err(Error::InvalidForest(format!(
            "{} documents, {} predictions, {} ground truths",
            docs.len(),
            preds.len(),
            gts.len()
        )));
    }
    let mut total = CorpusReport::default();
    for ((d, p), g) in docs.iter().zip(preds).zip(gts) {
        total.merge(&doc_eval(d, p, g)?);
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::doc_model::testutil::*;
    use crate::doc_model::{Field, UnitKind};

    fn kvp_doc() -> (Document, Forest) {
        let d = doc(vec![
            unit(0, UnitKind::TextLine, [0.1, 0.10, 0.3, 0.12], "Name:"),
            unit(1, UnitKind::TextWidget, [0.4, 0.10, 0.6, 0.12], ""),
            unit(2, UnitKind::TextLine, [0.1, 0.20, 0.3, 0.22], "Age:"),
            unit(3, UnitKind::TextLine, [0.4, 0.20, 0.6, 0.22], "42"),
            unit(4, UnitKind::TextLine, [0.1, 0.30, 0.3, 0.32], "Header"),
        ]);
        let f = Forest::from_fields(
            &d,
            vec![
                ("key".into(), vec![0]),
                ("value".into(), vec![1]),
                ("key".into(), vec![2]),
                ("value".into(), vec![3]),
                ("other".into(), vec![4]),
            ],
            &[(0, 1, "inter-kvp".into()), (2, 3, "inter-kvp".into())],
        )
        .unwrap();
        (d, f)
    }

    #[test]
    fn perfect_prediction() {
        let (d, f) = kvp_doc();
        let r = doc_eval(&d, &f, &f).unwrap();
        assert_eq!(r.field.micro().f1(), 1.0);
        assert_eq!(r.tree.micro().f1(), 1.0);
        assert_eq!(r.teds_kvp(), 1.0);
        assert_eq!(r.field.per_class.get("other"), None);
    }

    #[test]
    fn wrong_edge_type_unmatches_tree() {
        let (_, gt) = kvp_doc();
        let mut pred = gt.clone();
        pred.trees[0].edges[0].rel = "inter-cg".into();
        let r = tree_f1(&pred, &gt).unwrap();
        assert_eq!(r.micro(), Counts { tp: 1, fp: 1, fn_: 1 });
    }

    #[test]
    fn field_missing_member_is_fp_and_fn() {
        let gt = Forest::new(vec![HierTree {
            root: 0,
            fields: vec![Field { role: "key".into(), head: 0, members: vec![0, 1] }],
            edges: vec![],
            malformed: false,
        }]);
        let pred = Forest::new(vec![
            HierTree {
                root: 0,
                fields: vec![Field { role: "key".into(), head: 0, members: vec![0] }],
                edges: vec![],
                malformed: false,
            },
            HierTree {
                root: 1,
                fields: vec![Field { role: "other".into(), head: 1, members: vec![1] }],
                edges: vec![],
                malformed: false,
            },
        ]);
        let c = field_f1(&pred, &gt).unwrap().micro();
        assert_eq!(c, Counts { tp: 0, fp: 1, fn_: 1 });
    }

    #[test]
    fn empty_prediction_has_zero_recall() {
        let (d, gt) = kvp_doc();
        let pred = Forest::from_fields(&d, (0..5).map(|u| ("other".into(), vec![u])).collect(), &[]).unwrap();
        let r = doc_eval(&d, &pred, &gt).unwrap();
        assert_eq!(r.field.micro().recall(), 0.0);
        assert_eq!(r.tree.micro().f1(), 0.0);
        assert_eq!(r.teds_kvp(), 0.0);
    }

    #[test]
    fn forest_order_does_not_matter() {
        let (_, gt) = kvp_doc();
        let mut rev = gt.clone();
        rev.trees.reverse();
        assert_eq!(tree_f1(&rev, &gt).unwrap(), tree_f1(&gt, &gt).unwrap());
        assert_eq!(field_f1(&rev, &gt).unwrap(), field_f1(&gt, &gt).unwrap());
    }

    #[test]
    fn cross_document_rejected() {
        let (_, gt) = kvp_doc();
        assert!(field_f1(&Forest::default(), &gt).is_err());
    }

    #[test]
    fn single_doc_aggregate_matches_tree_metric() {
        let (d, gt) = kvp_doc();
        let mut pred = gt.clone();
        // Second pair: value relabelled as key.
        pred.trees[1].fields[1].role = "key".into();
        let r = corpus_eval(&[d.clone()], &[pred.clone()], &[gt.clone()]).unwrap();
        let direct = [
            teds(&pred.trees[0], &gt.trees[0], &d).unwrap(),
            teds(&pred.trees[1], &gt.trees[1], &d).unwrap(),
        ];
        assert_eq!(direct, [1.0, 0.5]);
        assert_eq!(r.teds_kvp(), 0.75);
        assert!(r.to_table().contains("kvp"));
        assert_eq!(r.to_json()["teds"]["kvp"], 0.75);
    }

    #[test]
    fn counts_edge_cases() {
        let c = Counts::default();
        assert_eq!(c.f1(), 1.0);
        let c = Counts { tp: 0, fp: 0, fn_: 3 };
        assert_eq!(c.f1(), 0.0);
        let json = serde_json::to_value(Counts { tp: 1, fp: 1, fn_: 0 }).unwrap();
        assert_eq!(json["fn"], 0);
        assert_eq!(json["precision"], 0.5);
    }
}
