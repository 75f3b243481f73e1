//! Labeled corpora: the synthetic generator and the JSON file format.

mod gen;
mod io;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::doc_model::{Document, Forest, RelationLabelSet};

pub use gen::{generate_corpus, generate_document, GenConfig};
pub use io::{
    load_corpus, parse_corpus, parse_raw_corpus, read_raw_corpus, save_corpus, save_raw_corpus,
    to_json_string, RawCorpus,
};

/// A document with its ground-truth forest.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDoc {
    pub doc: Document,
    pub gt: Forest,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub labels: RelationLabelSet,
    pub docs: Vec<LabeledDoc>,
}

impl Corpus {
    /// Splits off the last `n_test` documents.
    pub fn split(mut self, n_test: usize) -> (Corpus, Corpus) {
        let at = self.docs.len().saturating_sub(n_test);
        let test = self.docs.split_off(at);
        let labels = self.labels.clone();
        (self, Corpus { labels, docs: test })
    }

    pub fn stats(&self) -> CorpusStats {
        CorpusStats::of(&self.docs)
    }
}

/// Object counts of a corpus.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct CorpusStats {
    pub documents: usize,
    pub units: usize,
    pub min_units: usize,
    pub max_units: usize,
    /// Trees by kind name.
    pub trees: BTreeMap<String, usize>,
    /// Fields by role.
    pub fields: BTreeMap<String, usize>,
    /// Trees by nesting depth.
    pub depth: BTreeMap<usize, usize>,
}

impl CorpusStats {
    pub fn of(docs: &[LabeledDoc]) -> Self {
        let mut s = CorpusStats {
            documents: docs.len(),
            min_units: docs.iter().map(|d| d.doc.len()).min().unwrap_or(0),
            max_units: docs.iter().map(|d| d.doc.len()).max().unwrap_or(0),
            ..Default::default()
        };
        for d in docs {
            s.units += d.doc.len();
            for t in &d.gt.trees {
                *s.trees.entry(t.kind().name().to_string()).or_default() += 1;
                *s.depth.entry(t.nesting_depth()).or_default() += 1;
            }
            for f in d.gt.fields() {
                *s.fields.entry(f.role.clone()).or_default() += 1;
            }
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<22} {:>8}", "documents", self.documents);
        let _ = writeln!(s, "{:<22} {:>8}", "units", self.units);
        let _ = writeln!(s, "{:<22} {:>8}", "units/doc (min)", self.min_units);
        let _ = writeln!(s, "{:<22} {:>8}", "units/doc (max)", self.max_units);
        for (k, v) in &self.trees {
            let _ = writeln!(s, "{:<22} {:>8}", format!("trees: {k}"), v);
        }
        for (k, v) in &self.fields {
            let _ = writeln!(s, "{:<22} {:>8}", format!("fields: {k}"), v);
        }
        for (k, v) in &self.depth {
            let _ = writeln!(s, "{:<22} {:>8}", format!("trees at depth {k}"), v);
        }
        s
    }
}
