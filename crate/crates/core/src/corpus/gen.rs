//! Deterministic synthetic form generator.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Corpus, LabeledDoc};
use crate::doc_model::{
    role, BBox, BasicUnit, Document, Forest, RelationLabelSet, UnitKind, INTER_CG, INTER_KVP,
};
use crate::error::{Error, Result};

/// Generator settings. Ranges are inclusive `[min, max]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_docs: usize,
    pub units_per_doc: (usize, usize),
    pub kvps: (usize, usize),
    pub choice_groups: (usize, usize),
    pub headers: (usize, usize),
    pub entities: (usize, usize),
    /// Entity field types; each adds an `intra-<type>` relation.
    pub entity_types: Vec<String>,
    pub p_nest: f64,
    pub max_depth: usize,
    /// Standard deviation of the per-unit position noise (page fraction).
    pub jitter: f64,
    /// Layout attempts per document before giving up.
    pub max_attempts: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_docs: 100,
            units_per_doc: (8, 60),
            kvps: (2, 5),
            choice_groups: (1, 3),
            headers: (0, 2),
            entities: (0, 0),
            entity_types: Vec::new(),
            p_nest: 0.3,
            max_depth: 2,
            jitter: 0.001,
            max_attempts: 200,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("units_per_doc", self.units_per_doc),
            ("kvps", self.kvps),
            ("choice_groups", self.choice_groups),
            ("headers", self.headers),
            ("entities", self.entities),
        ];
        for (name, (lo, hi)) in ranges {
            if lo > hi {
                return Err(Error::Config(format!("{name}: empty range [{lo}, {hi}]")));
            }
        }
        if self.units_per_doc.1 == 0 {
            return Err(Error::Config("units_per_doc: documents need at least one unit".into()));
        }
        if !(0.0..=1.0).contains(&self.p_nest) {
            return Err(Error::Config(format!("p_nest {} outside [0, 1]", self.p_nest)));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Config(format!("jitter {} must be finite and >= 0", self.jitter)));
        }
        if self.max_depth == 0 {
            return Err(Error::Config("max_depth must be >= 1".into()));
        }
        if self.max_attempts == 0 {
            return Err(Error::Config("max_attempts must be >= 1".into()));
        }
        if self.entities.1 > 0 && self.entity_types.is_empty() {
            return Err(Error::Config("entities requested but entity_types is empty".into()));
        }
        self.label_set()?;
        Ok(())
    }

    pub fn label_set(&self) -> Result<RelationLabelSet> {
        RelationLabelSet::with_entities(&self.entity_types)
    }
}

const KEY_WORDS: &[&str] = &[
    "name", "first name", "last name", "date", "date of birth", "address", "street", "city",
    "state", "zip code", "country", "phone", "mobile", "email", "employer", "occupation",
    "signature", "amount", "account number", "policy number", "member id", "reference",
    "total", "department", "position", "start date", "end date", "nationality", "passport no",
    "tax id", "company", "contact person", "relationship", "income", "bank", "branch",
];
const VALUE_WORDS: &[&str] = &[
    "john", "smith", "maria", "garcia", "li", "wei", "anna", "berg", "main st", "oak avenue",
    "springfield", "berlin", "toronto", "engineer", "teacher", "acme corp", "globex",
    "n/a", "usd", "eur",
];
const TITLE_WORDS: &[&str] = &[
    "marital status", "gender", "are you employed", "payment method", "frequency",
    "do you smoke", "preferred contact", "type of account", "coverage", "is this a renewal",
    "residence type", "education level", "have you been insured before", "citizenship",
];
const OPTION_WORDS: &[&str] = &[
    "yes", "no", "single", "married", "divorced", "male", "female", "other", "daily", "weekly",
    "monthly", "yearly", "cash", "card", "cheque", "email", "phone", "mail", "own", "rent",
    "basic", "premium", "high school", "bachelor", "master", "none",
];
const HEADER_WORDS: &[&str] = &[
    "APPLICATION FORM", "SECTION A", "SECTION B", "PART 1", "PART 2", "PERSONAL DETAILS",
    "FOR OFFICE USE ONLY", "DECLARATION", "EMPLOYMENT", "INSURANCE CLAIM", "PAGE 1 OF 2",
];
const ENTITY_WORDS: &[&str] = &[
    "the", "applicant", "agrees", "to", "terms", "of", "service", "and", "conditions", "all",
    "information", "provided", "is", "true", "complete", "please", "return", "this", "form",
    "within", "days", "office", "hours",
];

const LEFT: f64 = 0.06;
const RIGHT: f64 = 0.96;
const TOP: f64 = 0.04;
const BOTTOM: f64 = 0.96;
const BOX: f64 = 0.012;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Block {
    Kvp,
    ChoiceGroup,
    Header,
    Entity,
}

/// One layout attempt. Units are placed in creation order; ids are shuffled
/// afterwards.
struct Layout<'c> {
    cfg: &'c GenConfig,
    rng: ChaCha8Rng,
    units: Vec<(UnitKind, BBox, String)>,
    fields: Vec<(String, Vec<usize>)>,
    edges: Vec<(usize, usize, String)>,
    y: f64,
    pitch: f64,
    line_h: f64,
    char_w: f64,
    overflow: bool,
}

impl<'c> Layout<'c> {
    fn new(cfg: &'c GenConfig, rng: ChaCha8Rng) -> Self {
        let mut l = Layout {
            cfg,
            rng,
            units: Vec::new(),
            fields: Vec::new(),
            edges: Vec::new(),
            y: 0.0,
            pitch: 0.0,
            line_h: 0.0,
            char_w: 0.0,
            overflow: false,
        };
        l.line_h = l.rng.random_range(0.012..0.016);
        l.pitch = l.line_h + l.rng.random_range(0.008..0.012);
        l.char_w = l.rng.random_range(0.0055..0.0075);
        l.y = TOP - l.pitch;
        l
    }

    fn next_row(&mut self) -> f64 {
        self.y += self.pitch;
        self.y
    }

    fn field(&mut self, role: &str) -> usize {
        self.fields.push((role.to_string(), Vec::new()));
        self.fields.len() - 1
    }

    fn text_width(&self, text: &str) -> f64 {
        (text.chars().count() as f64 * self.char_w).max(0.02)
    }

    /// Places a unit with vertical center `cy`; returns its right edge.
    fn place(&mut self, field: usize, kind: UnitKind, x: f64, cy: f64, w: f64, h: f64, text: String) -> f64 {
        let (x2, y2) = (x + w, cy + h / 2.0);
        if x2 > RIGHT || y2 > BOTTOM {
            self.overflow = true;
        }
        let bbox = BBox::new(x, cy - h / 2.0, x2, y2);
        self.units.push((kind, bbox, text));
        self.fields[field].1.push(self.units.len() - 1);
        x2
    }

    fn text(&mut self, field: usize, x: f64, cy: f64, text: String) -> f64 {
        let w = self.text_width(&text);
        let h = self.line_h;
        self.place(field, UnitKind::TextLine, x, cy, w, h, text)
    }

    fn pick(&mut self, words: &[&'static str]) -> &'static str {
        words[self.rng.random_range(0..words.len())]
    }

    /// Splits a phrase into one or two lines (two only when it has several words).
    fn lines(&mut self, phrase: &str, two: bool) -> Vec<String> {
        let words: Vec<&str> = phrase.split_whitespace().collect();
        if two && words.len() > 1 {
            let cut = self.rng.random_range(1..words.len());
            vec![words[..cut].join(" "), words[cut..].join(" ")]
        } else {
            vec![words.join(" ")]
        }
    }

    fn gap(&mut self) -> f64 {
        self.rng.random_range(0.015..0.05)
    }

    fn kvp(&mut self, x0: f64, depth: usize) -> usize {
        let key = self.field(role::KEY);
        let two = self.rng.random_bool(0.25);
        let phrase = self.pick(KEY_WORDS);
        let mut key_lines = self.lines(phrase, two);
        if let Some(last) = key_lines.last_mut() {
            last.push(':');
        }
        let row0 = self.next_row();
        let mut key_right = 0.0f64;
        for (i, line) in key_lines.iter().enumerate() {
            let cy = if i == 0 { row0 } else { self.next_row() };
            key_right = key_right.max(self.text(key, x0, cy, line.clone()));
        }

        let nested = depth < self.cfg.max_depth && self.rng.random_bool(self.cfg.p_nest);
        let value = self.field(role::VALUE);
        let widget = !nested && self.rng.random_bool(0.5);
        let value_lines: Vec<String> = if widget {
            Vec::new()
        } else {
            let n = if !nested && self.rng.random_bool(0.2) { 2 } else { 1 };
            (0..n)
                .map(|_| {
                    if self.rng.random_bool(0.4) {
                        format!("{}", self.rng.random_range(1..100_000u32))
                    } else {
                        let a = self.pick(VALUE_WORDS);
                        let b = self.pick(VALUE_WORDS);
                        format!("{a} {b}")
                    }
                })
                .collect()
        };
        let widget_w = self.rng.random_range(0.10..0.30);
        let width = if widget {
            widget_w
        } else {
            value_lines.iter().map(|s| self.text_width(s)).fold(0.0, f64::max)
        };
        let gap = self.gap();
        let right_x = key_right + gap;
        let right = right_x + width <= RIGHT && self.rng.random_bool(0.65);
        let (vx, vy) = if right {
            (right_x, row0)
        } else {
            let dx = self.rng.random_range(0.0..0.03);
            (x0 + dx, self.next_row())
        };
        if widget {
            let h = self.line_h * self.rng.random_range(1.0..1.4);
            self.place(value, UnitKind::TextWidget, vx, vy, widget_w, h, String::new());
        } else {
            let mut cy = vy;
            for (i, line) in value_lines.into_iter().enumerate() {
                if i > 0 {
                    cy += self.pitch;
                    self.y = self.y.max(cy);
                }
                self.text(value, vx, cy, line);
            }
        }
        self.y = self.y.max(vy);
        self.edges.push((key, value, INTER_KVP.to_string()));

        if nested {
            let indent = self.rng.random_range(0.03..0.06);
            for _ in 0..self.rng.random_range(2..=3) {
                let child = self.kvp(x0 + indent, depth + 1);
                self.edges.push((value, child, INTER_KVP.to_string()));
            }
        }
        key
    }

    fn choice(&mut self, field: usize, x: f64, cy: f64, text: String) -> f64 {
        let x2 = self.place(field, UnitKind::ChoiceWidget, x, cy, BOX, BOX, String::new());
        self.text(field, x2 + 0.006, cy, text)
    }

    fn choice_group(&mut self, x0: f64, depth: usize, titled: bool) -> usize {
        let n_opt = self.rng.random_range(2..=4);
        let options: Vec<String> = (0..n_opt).map(|_| self.pick(OPTION_WORDS).to_string()).collect();
        let may_nest = titled && depth < self.cfg.max_depth;
        let nest: Vec<bool> = (0..n_opt)
            .map(|_| may_nest && self.rng.random_bool(self.cfg.p_nest))
            .collect();
        let opt_w: f64 = options
            .iter()
            .map(|o| BOX + 0.006 + self.text_width(o) + 0.03)
            .sum();
        let horizontal = !nest.iter().any(|&b| b) && self.rng.random_bool(0.5);

        let row0 = self.next_row();
        let mut title_right = x0;
        let title = if titled {
            let t = self.field(role::CHOICE_TITLE);
            let phrase = self.pick(TITLE_WORDS);
            let two = self.rng.random_bool(0.15);
            let mut lines = self.lines(phrase, two);
            let end = if self.rng.random_bool(0.8) { '?' } else { ':' };
            if let Some(last) = lines.last_mut() {
                last.push(end);
            }
            for (i, line) in lines.iter().enumerate() {
                let cy = if i == 0 { row0 } else { self.next_row() };
                title_right = title_right.max(self.text(t, x0, cy, line.clone()));
            }
            Some(t)
        } else {
            None
        };

        let mut cfs = Vec::with_capacity(n_opt);
        if horizontal {
            let gap = self.gap();
            let (mut x, cy) = if titled && title_right + gap + opt_w <= RIGHT && self.y == row0 {
                (title_right + gap, row0)
            } else if titled {
                let dx = self.rng.random_range(0.0..0.04);
                (x0 + dx, self.next_row())
            } else {
                (x0, row0)
            };
            for o in options {
                let f = self.field(role::CHOICE_FIELD);
                x = self.choice(f, x, cy, o) + self.rng.random_range(0.025..0.05);
                cfs.push(f);
            }
        } else {
            let indent = if titled { self.rng.random_range(0.0..0.04) } else { 0.0 };
            for (k, o) in options.into_iter().enumerate() {
                let cy = if k == 0 && !titled { row0 } else { self.next_row() };
                let f = self.field(role::CHOICE_FIELD);
                self.choice(f, x0 + indent, cy, o);
                cfs.push(f);
                if nest[k] {
                    let child = self.choice_group(x0 + indent + 0.04, depth + 1, true);
                    self.edges.push((f, child, INTER_CG.to_string()));
                }
            }
        }
        match title {
            Some(t) => {
                for &f in &cfs {
                    self.edges.push((t, f, INTER_CG.to_string()));
                }
                t
            }
            None => {
                for &f in &cfs[1..] {
                    self.edges.push((cfs[0], f, INTER_CG.to_string()));
                }
                cfs[0]
            }
        }
    }

    fn header(&mut self) {
        let f = self.field(role::OTHER);
        let cy = self.next_row();
        let text = self.pick(HEADER_WORDS).to_string();
        let x = if self.rng.random_bool(0.5) {
            LEFT
        } else {
            0.5 - self.text_width(&text) / 2.0
        };
        self.text(f, x, cy, text);
    }

    fn entity(&mut self) {
        let kind = self.rng.random_range(0..self.cfg.entity_types.len());
        let f = self.field(&self.cfg.entity_types[kind].clone());
        for _ in 0..self.rng.random_range(2..=3) {
            let n = self.rng.random_range(4..=8);
            let words: Vec<&str> = (0..n).map(|_| self.pick(ENTITY_WORDS)).collect();
            let cy = self.next_row();
            self.text(f, LEFT, cy, words.join(" "));
        }
    }
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (usize, usize)) -> usize {
    rng.random_range(lo..=hi)
}

/// Generates one document from its own seed, retrying infeasible layouts.
pub fn generate_document(cfg: &GenConfig, doc_index: usize) -> Result<LabeledDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ doc_index as u64);
    let mut last = String::new();
    for _ in 0..cfg.max_attempts {
        let child = ChaCha8Rng::seed_from_u64(rng.random());
        match attempt(cfg, doc_index, child)? {
            Ok(d) => return Ok(d),
            Err(why) => last = why,
        }
    }
    Err(Error::InfeasibleLayout {
        attempts: cfg.max_attempts,
        detail: format!("document {doc_index}: {last}"),
    })
}

fn attempt(cfg: &GenConfig, doc_index: usize, rng: ChaCha8Rng) -> Result<std::result::Result<LabeledDoc, String>> {
    let mut l = Layout::new(cfg, rng);
    let mut blocks = Vec::new();
    for (block, range) in [
        (Block::Kvp, cfg.kvps),
        (Block::ChoiceGroup, cfg.choice_groups),
        (Block::Header, cfg.headers),
        (Block::Entity, cfg.entities),
    ] {
        let n = sample(&mut l.rng, range);
        blocks.extend(std::iter::repeat_n(block, n));
    }
    blocks.shuffle(&mut l.rng);
    if blocks.is_empty() {
        blocks.push(Block::Header);
    }
    for b in blocks {
        l.y += l.pitch * l.rng.random_range(0.0..0.6);
        let x0 = LEFT + l.rng.random_range(0.0..0.05);
        match b {
            Block::Kvp => {
                l.kvp(x0, 1);
            }
            Block::ChoiceGroup => {
                let titled = l.rng.random_bool(0.8);
                l.choice_group(x0, 1, titled);
            }
            Block::Header => l.header(),
            Block::Entity => l.entity(),
        }
        if l.overflow {
            return Ok(Err("layout overflows the page".into()));
        }
    }
    let n = l.units.len();
    let (lo, hi) = cfg.units_per_doc;
    if n < lo || n > hi {
        return Ok(Err(format!("{n} units outside [{lo}, {hi}]")));
    }

    let normal = Normal::new(0.0, cfg.jitter.max(f64::MIN_POSITIVE)).expect("finite std");
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut l.rng);
    let mut units: Vec<Option<BasicUnit>> = vec![None; n];
    for (k, (kind, b, text)) in l.units.into_iter().enumerate() {
        let (dx, dy) = if cfg.jitter > 0.0 {
            (normal.sample(&mut l.rng), normal.sample(&mut l.rng))
        } else {
            (0.0, 0.0)
        };
        let dx = dx.clamp(-b.x1, 1.0 - b.x2);
        let dy = dy.clamp(-b.y1, 1.0 - b.y2);
        units[perm[k]] = Some(BasicUnit {
            id: perm[k],
            kind,
            bbox: BBox::new(b.x1 + dx, b.y1 + dy, b.x2 + dx, b.y2 + dy),
            text,
        });
    }
    let page_width = l.rng.random_range(800.0..1240.0f64).round();
    let doc = Document {
        doc_id: format!("synth-{:016x}-{doc_index:06}", cfg.seed),
        page_width,
        page_height: (page_width * 1.294).round(),
        units: units.into_iter().map(|u| u.expect("every slot filled")).collect(),
    };
    let fields = l
        .fields
        .into_iter()
        .map(|(r, m)| (r, m.into_iter().map(|u| perm[u]).collect()))
        .collect();
    let gt = Forest::from_fields(&doc, fields, &l.edges)?;
    Ok(Ok(LabeledDoc { doc, gt }))
}

/// Generates `cfg.n_docs` documents; document `i` depends only on
/// `(cfg, i)`.
pub fn generate_corpus(cfg: &GenConfig) -> Result<Corpus> {
    cfg.validate()?;
    let labels = cfg.label_set()?;
    let docs = (0..cfg.n_docs)
        .map(|i| generate_document(cfg, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { labels, docs })
}
