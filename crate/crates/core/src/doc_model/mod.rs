//! Documents, basic units, the unified relation label space, and
//! hierarchical field trees.

mod assemble;
mod convert;
mod forest;
mod labels;

use serde::{Deserialize, Serialize};

pub use assemble::{assemble_tree, Assembled};
pub use convert::{assemble_forest, forest_from_labels, labels_from_forest};
pub use forest::{Field, FieldEdge, Forest, HierTree, StructuredObject, TreeKind};
pub use labels::{
    RelCategory, RelId, RelationLabelSet, RelationType, UnifiedLabels, INTER_CG, INTER_KVP, ROOT,
};

/// Field roles with fixed meaning in the form label space.
pub mod role {
    pub const KEY: &str = "key";
    pub const VALUE: &str = "value";
    pub const CHOICE_TITLE: &str = "cgt";
    pub const CHOICE_FIELD: &str = "cf";
    /// Stand-alone unit not part of any structured object.
    pub const OTHER: &str = "other";
    /// Unit of a tree whose relations could not be interpreted.
    pub const UNKNOWN: &str = "unknown";
}

/// Axis-aligned box in page coordinates normalized to `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from([x1, y1, x2, y2]: [f64; 4]) -> Self {
        BBox { x1, y1, x2, y2 }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn center_y(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    /// Violated invariants, if any.
    pub fn violations(&self) -> Vec<&'static str> {
        let mut v = Vec::new();
        if !(self.x1 <= self.x2 && self.y1 <= self.y2) {
            v.push("bbox order");
        }
        let coords = [self.x1, self.y1, self.x2, self.y2];
        if coords.iter().any(|c| !(0.0..=1.0).contains(c)) {
            v.push("bbox range");
        }
        v
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitKind {
    TextLine,
    TextWidget,
    ChoiceWidget,
}

impl UnitKind {
    pub const ALL: [UnitKind; 3] = [UnitKind::TextLine, UnitKind::TextWidget, UnitKind::ChoiceWidget];

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicUnit {
    pub id: usize,
    pub kind: UnitKind,
    pub bbox: BBox,
    #[serde(default)]
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub page_width: f64,
    pub page_height: f64,
    pub units: Vec<BasicUnit>,
}

impl Document {
    pub fn len(&self) -> usize {
        self.units.len()
    }

    pub fn is_empty(&self) -> bool {
        self.units.is_empty()
    }

    /// Every violated invariant; empty when the document is valid.
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.units.is_empty() {
            out.push("empty document".to_string());
        }
        if !(self.page_width > 0.0 && self.page_height > 0.0) {
            out.push("page size".to_string());
        }
        let n = self.units.len();
        let mut seen = vec![false; n];
        let mut density_ok = true;
        for (pos, u) in self.units.iter().enumerate() {
            for v in u.bbox.violations() {
                out.push(format!("{v} (unit {})", u.id));
            }
            if u.id >= n || seen[u.id] || u.id != pos {
                density_ok = false;
            } else {
                seen[u.id] = true;
            }
        }
        if !density_ok {
            out.push("id density".to_string());
        }
        out
    }

    /// Unit ids in reading order: rows top to bottom, left to right within a
    /// row. Units whose vertical centers lie within half the median unit
    /// height of a row's first unit share that row.
    pub fn reading_order(&self) -> Vec<usize> {
        reading_order(&self.units)
    }

    /// Median bounding-box height; zero for an empty document.
    pub fn median_height(&self) -> f64 {
        median_height(&self.units)
    }

    /// `ranks[unit id]` = position of the unit in reading order.
    pub fn reading_ranks(&self) -> Vec<usize> {
        let order = self.reading_order();
        let mut ranks = vec![0; order.len()];
        for (r, &id) in order.iter().enumerate() {
            ranks[id] = r;
        }
        ranks
    }
}

/// Validates a document, returning every violated invariant.
pub fn validate_document(doc: &Document) -> Result<(), Vec<String>> {
    let v = doc.validate();
    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

fn median_height(units: &[BasicUnit]) -> f64 {
    let mut heights: Vec<f64> = units.iter().map(|u| u.bbox.height()).collect();
    heights.sort_by(f64::total_cmp);
    heights.get(heights.len() / 2).copied().unwrap_or(0.0)
}

fn reading_order(units: &[BasicUnit]) -> Vec<usize> {
    if units.is_empty() {
        return Vec::new();
    }
    let tol = 0.5 * median_height(units);

    let mut idx: Vec<usize> = (0..units.len()).collect();
    idx.sort_by(|&a, &b| {
        let (ua, ub) = (&units[a], &units[b]);
        ua.bbox
            .center_y()
            .total_cmp(&ub.bbox.center_y())
            .then(ua.bbox.x1.total_cmp(&ub.bbox.x1))
            .then(ua.id.cmp(&ub.id))
    });

    let mut order = Vec::with_capacity(units.len());
    let mut row: Vec<usize> = Vec::new();
    let mut anchor = f64::NEG_INFINITY;
    let flush = |row: &mut Vec<usize>, order: &mut Vec<usize>| {
        row.sort_by(|&a, &b| {
            let (ua, ub) = (&units[a], &units[b]);
            ua.bbox
                .x1
                .total_cmp(&ub.bbox.x1)
                .then(ua.bbox.center_y().total_cmp(&ub.bbox.center_y()))
                .then(ua.id.cmp(&ub.id))
        });
        order.extend(row.drain(..).map(|i| units[i].id));
    };
    for i in idx {
        let cy = units[i].bbox.center_y();
        if row.is_empty() || cy - anchor > tol {
            flush(&mut row, &mut order);
            anchor = cy;
        }
        row.push(i);
    }
    flush(&mut row, &mut order);
    order
}
