use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Corpus, LabeledDoc};
use crate::doc_model::{
    forest_from_labels, labels_from_forest, BasicUnit, Document, RelationLabelSet, UnifiedLabels,
};
use crate::error::{Error, Result};

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusFile {
    schema: Vec<String>,
    documents: Vec<DocRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DocRecord {
    doc_id: String,
    page_width: f64,
    page_height: f64,
    units: Vec<BasicUnit>,
    labels: LabelRecord,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    parent: Vec<usize>,
    rel_type: Vec<String>,
}

/// Documents with unified labels, before forests are assembled. Predictions
/// are stored this way and may contain trees that only assemble tolerantly.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCorpus {
    pub labels: RelationLabelSet,
    pub docs: Vec<(Document, UnifiedLabels)>,
}

impl RawCorpus {
    /// Assembles every ground-truth forest, failing on malformed trees.
    pub fn into_corpus(self) -> Result<Corpus> {
        let labels = self.labels;
        let docs = self
            .docs
            .into_iter()
            .enumerate()
            .map(|(i, (doc, ul))| {
                let gt = forest_from_labels(&doc, &ul, &labels)
                    .map_err(|e| Error::Schema(format!("document {i} ({}): {e}", doc.doc_id)))?;
                Ok(LabeledDoc { doc, gt })
            })
            .collect::<Result<_>>()?;
        Ok(Corpus { labels, docs })
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_raw_corpus(text: &str) -> Result<RawCorpus> {
    let file: CorpusFile = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
    let labels = RelationLabelSet::from_names(&file.schema)
        .map_err(|e| Error::Schema(format!("schema: {e}")))?;
    let mut docs = Vec::with_capacity(file.documents.len());
    for (i, rec) in file.documents.into_iter().enumerate() {
        let at = |msg: String| Error::Schema(format!("document {i} ({}): {msg}", rec.doc_id));
        let mut units = rec.units;
        units.sort_by_key(|u| u.id);
        let doc = Document {
            doc_id: rec.doc_id.clone(),
            page_width: rec.page_width,
            page_height: rec.page_height,
            units,
        };
        let violations = doc.validate();
        if !violations.is_empty() {
            return Err(at(violations.join("; ")));
        }
        let n = doc.len();
        let LabelRecord { parent, rel_type } = rec.labels;
        if parent.len() != n || rel_type.len() != n {
            return Err(at(format!(
                "labels have {} parents and {} types for {n} units",
                parent.len(),
                rel_type.len()
            )));
        }
        if let Some(u) = parent.iter().position(|&p| p >= n) {
            return Err(at(format!("unit {u}: dangling unit id {}", parent[u])));
        }
        let mut rel = Vec::with_capacity(n);
        for (u, name) in rel_type.iter().enumerate() {
            match labels.get(name) {
                Some(id) => rel.push(id),
                None => return Err(at(format!("unit {u}: unknown relation type {name:?}"))),
            }
        }
        let ul = UnifiedLabels::new(parent, rel, &labels).map_err(|e| at(e.to_string()))?;
        docs.push((doc, ul));
    }
    Ok(RawCorpus { labels, docs })
}

pub fn read_raw_corpus(path: &Path) -> Result<RawCorpus> {
    parse_raw_corpus(&read(path)?).map_err(|e| match e {
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_corpus(text: &str) -> Result<Corpus> {
    parse_raw_corpus(text)?.into_corpus()
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    read_raw_corpus(path)?.into_corpus().map_err(|e| match e {
        Error::Schema(m) => Error::Schema(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn raw_to_string(raw: &RawCorpus) -> Result<String> {
    let file = CorpusFile {
        schema: raw.labels.names().map(str::to_string).collect(),
        documents: raw
            .docs
            .iter()
            .map(|(doc, ul)| DocRecord {
                doc_id: doc.doc_id.clone(),
                page_width: doc.page_width,
                page_height: doc.page_height,
                units: doc.units.clone(),
                labels: LabelRecord {
                    parent: ul.parent().to_vec(),
                    rel_type: ul.rel_names(&raw.labels).into_iter().map(str::to_string).collect(),
                },
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&file)?;
    s.push('\n');
    Ok(s)
}

/// Serializes a corpus, flattening each forest into unified labels.
pub fn to_json_string(corpus: &Corpus) -> Result<String> {
    let docs = corpus
        .docs
        .iter()
        .map(|d| Ok((d.doc.clone(), labels_from_forest(&d.doc, &d.gt, &corpus.labels)?)))
        .collect::<Result<_>>()?;
    raw_to_string(&RawCorpus {
        labels: corpus.labels.clone(),
        docs,
    })
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    write(path, &to_json_string(corpus)?)
}

pub fn save_raw_corpus(raw: &RawCorpus, path: &Path) -> Result<()> {
    write(path, &raw_to_string(raw)?)
}
