use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::labels::{INTER_CG, INTER_KVP};
use super::{role, Document};
use crate::error::{Error, Result};

/// A semantically coherent group of units; `members[0] == head`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Field {
    pub role: String,
    pub head: usize,
    pub members: Vec<usize>,
}

/// Inter-field relation between two field heads.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FieldEdge {
    pub parent: usize,
    pub child: usize,
    pub rel: String,
}

/// One hierarchical tree of fields. Fields are sorted by head unit and edges
/// by child head, so structurally equal trees compare equal.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HierTree {
    /// Head unit of the root field.
    pub root: usize,
    pub fields: Vec<Field>,
    pub edges: Vec<FieldEdge>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub malformed: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TreeKind {
    Kvp,
    ChoiceGroup,
    Entity,
    Other,
}

impl TreeKind {
    pub fn name(self) -> &'static str {
        match self {
            TreeKind::Kvp => "kvp",
            TreeKind::ChoiceGroup => "cg",
            TreeKind::Entity => "entity",
            TreeKind::Other => "other",
        }
    }
}

/// Structured-object view of a tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum StructuredObject {
    Kvp {
        key: usize,
        value: Option<usize>,
        nested: Vec<StructuredObject>,
    },
    ChoiceGroup {
        title: Option<usize>,
        choices: Vec<ChoiceItem>,
    },
    Field {
        head: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChoiceItem {
    pub field: usize,
    pub nested: Vec<StructuredObject>,
}

impl HierTree {
    pub fn field(&self, head: usize) -> Option<&Field> {
        self.fields
            .binary_search_by_key(&head, |f| f.head)
            .ok()
            .map(|i| &self.fields[i])
    }

    pub fn root_field(&self) -> &Field {
        self.field(self.root).expect("root field present")
    }

    pub fn units(&self) -> impl Iterator<Item = usize> + '_ {
        self.fields.iter().flat_map(|f| f.members.iter().copied())
    }

    pub fn num_units(&self) -> usize {
        self.fields.iter().map(|f| f.members.len()).sum()
    }

    /// Child edges of a field head, in edge order.
    pub fn children(&self, head: usize) -> impl Iterator<Item = &FieldEdge> + '_ {
        self.edges.iter().filter(move |e| e.parent == head)
    }

    pub fn kind(&self) -> TreeKind {
        match self.root_field().role.as_str() {
            role::KEY | role::VALUE => TreeKind::Kvp,
            role::CHOICE_TITLE | role::CHOICE_FIELD => TreeKind::ChoiceGroup,
            role::OTHER | role::UNKNOWN => TreeKind::Other,
            _ => TreeKind::Entity,
        }
    }

    /// Depth of the structured-object hierarchy: 0 for a lone field, 1 for a
    /// flat KVP / choice group, 2 with one level of nesting, and so on.
    pub fn nesting_depth(&self) -> usize {
        fn walk(t: &HierTree, head: usize, nested_inter: usize) -> usize {
            let f = t.field(head).expect("edge endpoints are fields");
            let mut best = nested_inter;
            for e in t.children(head) {
                let child = t.field(e.child).expect("edge endpoints are fields");
                // A structured object opens when a key or a choice title
                // (or titleless first choice) hangs below another object.
                let opens = matches!(
                    (f.role.as_str(), child.role.as_str()),
                    (role::VALUE, role::KEY) | (role::CHOICE_FIELD, role::CHOICE_TITLE)
                );
                best = best.max(walk(t, e.child, nested_inter + usize::from(opens)));
            }
            best
        }
        if self.edges.is_empty() {
            0
        } else {
            walk(self, self.root, 1)
        }
    }

    pub fn to_objects(&self) -> StructuredObject {
        self.object_at(self.root)
    }

    fn object_at(&self, head: usize) -> StructuredObject {
        let f = self.field(head).expect("field");
        match f.role.as_str() {
            role::KEY => {
                let value = self
                    .children(head)
                    .find(|e| e.rel == INTER_KVP)
                    .map(|e| e.child);
                let nested = value
                    .map(|v| {
                        self.children(v)
                            .filter(|e| e.rel == INTER_KVP)
                            .map(|e| self.object_at(e.child))
                            .collect()
                    })
                    .unwrap_or_default();
                StructuredObject::Kvp { key: head, value, nested }
            }
            role::CHOICE_TITLE => StructuredObject::ChoiceGroup {
                title: Some(head),
                choices: self
                    .children(head)
                    .filter(|e| e.rel == INTER_CG)
                    .map(|e| self.choice_item(e.child))
                    .collect(),
            },
            role::CHOICE_FIELD => {
                let mut choices = vec![self.choice_item_filtered(head, true)];
                choices.extend(
                    self.children(head)
                        .filter(|e| {
                            e.rel == INTER_CG
                                && self.field(e.child).is_some_and(|c| c.role == role::CHOICE_FIELD)
                        })
                        .map(|e| self.choice_item(e.child)),
                );
                StructuredObject::ChoiceGroup { title: None, choices }
            }
            _ => StructuredObject::Field { head },
        }
    }

    fn choice_item(&self, head: usize) -> ChoiceItem {
        self.choice_item_filtered(head, false)
    }

    fn choice_item_filtered(&self, head: usize, only_titles: bool) -> ChoiceItem {
        ChoiceItem {
            field: head,
            nested: self
                .children(head)
                .filter(|e| e.rel == INTER_CG)
                .filter(|e| {
                    !only_titles
                        || self.field(e.child).is_some_and(|c| c.role != role::CHOICE_FIELD)
                })
                .map(|e| self.object_at(e.child))
                .collect(),
        }
    }
}

/// A set of trees partitioning a document's units, sorted by root head.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Forest {
    pub trees: Vec<HierTree>,
}

impl Forest {
    pub fn new(mut trees: Vec<HierTree>) -> Self {
        trees.sort_by_key(|t| t.root);
        Forest { trees }
    }

    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn fields(&self) -> impl Iterator<Item = &Field> + '_ {
        self.trees.iter().flat_map(|t| t.fields.iter())
    }

    /// Builds a canonical forest from fields and field-level edges given by
    /// field index. Members are put in reading order and the first one
    /// becomes the head.
    pub fn from_fields(
        doc: &Document,
        fields: Vec<(String, Vec<usize>)>,
        edges: &[(usize, usize, String)],
    ) -> Result<Forest> {
        let ranks = doc.reading_ranks();
        let n = doc.len();
        let mut owner = vec![usize::MAX; n];
        let mut built = Vec::with_capacity(fields.len());
        for (fi, (role, mut members)) in fields.into_iter().enumerate() {
            if members.is_empty() {
                return Err(Error::InvalidForest(format!("field {fi} has no members")));
            }
            for &u in &members {
                if u >= n {
                    return Err(Error::InvalidForest(format!("unknown unit id {u}")));
                }
                if owner[u] != usize::MAX {
                    return Err(Error::InvalidForest(format!("unit {u} in two fields")));
                }
                owner[u] = fi;
            }
            members.sort_by_key(|&u| ranks[u]);
            built.push(Field {
                role,
                head: members[0],
                members,
            });
        }
        let nf = built.len();
        let mut parent_of = vec![usize::MAX; nf];
        for (p, c, _) in edges {
            if *p >= nf || *c >= nf || p == c {
                return Err(Error::InvalidForest(format!("bad field edge {p}->{c}")));
            }
            if parent_of[*c] != usize::MAX {
                return Err(Error::InvalidForest(format!("field {c} has two parents")));
            }
            parent_of[*c] = *p;
        }
        // Tree root of every field, rejecting cycles.
        let mut root_of = vec![usize::MAX; nf];
        for f in 0..nf {
            let mut cur = f;
            let mut steps = 0;
            while parent_of[cur] != usize::MAX {
                cur = parent_of[cur];
                steps += 1;
                if steps > nf {
                    return Err(Error::InvalidForest("cycle among fields".into()));
                }
            }
            root_of[f] = cur;
        }
        let mut trees: BTreeMap<usize, HierTree> = BTreeMap::new();
        for (f, field) in built.iter().enumerate() {
            let r = root_of[f];
            trees
                .entry(r)
                .or_insert_with(|| HierTree {
                    root: built[r].head,
                    fields: Vec::new(),
                    edges: Vec::new(),
                    malformed: false,
                })
                .fields
                .push(field.clone());
        }
        for (p, c, rel) in edges {
            trees.get_mut(&root_of[*c]).expect("tree").edges.push(FieldEdge {
                parent: built[*p].head,
                child: built[*c].head,
                rel: rel.clone(),
            });
        }
        let trees = trees
            .into_values()
            .map(|mut t| {
                t.fields.sort_by_key(|f| f.head);
                t.edges.sort_by_key(|e| e.child);
                t
            })
            .collect();
        Ok(Forest::new(trees))
    }

    /// Checks that the forest is a valid partition of `doc`'s units.
    pub fn validate(&self, doc: &Document) -> Result<()> {
        let n = doc.len();
        let mut seen = vec![false; n];
        for t in &self.trees {
            let heads: BTreeSet<usize> = t.fields.iter().map(|f| f.head).collect();
            if !heads.contains(&t.root) {
                return Err(Error::InvalidForest(format!("tree root {} is not a field head", t.root)));
            }
            for f in &t.fields {
                if f.members.first() != Some(&f.head) {
                    return Err(Error::InvalidForest(format!("field {} head not first member", f.head)));
                }
                for &u in &f.members {
                    if u >= n {
                        return Err(Error::InvalidForest(format!("unknown unit id {u}")));
                    }
                    if std::mem::replace(&mut seen[u], true) {
                        return Err(Error::InvalidForest(format!("unit {u} in two fields")));
                    }
                }
            }
            let mut has_parent = BTreeSet::new();
            for e in &t.edges {
                if !heads.contains(&e.parent) || !heads.contains(&e.child) {
                    return Err(Error::InvalidForest(format!(
                        "edge {}->{} does not join field heads",
                        e.parent, e.child
                    )));
                }
                if e.child == t.root || !has_parent.insert(e.child) {
                    return Err(Error::InvalidForest(format!("field {} parent invalid", e.child)));
                }
            }
            if has_parent.len() + 1 != heads.len() {
                return Err(Error::InvalidForest(format!("tree {} is disconnected", t.root)));
            }
        }
        if let Some(u) = seen.iter().position(|s| !s) {
            return Err(Error::InvalidForest(format!("unit {u} not covered")));
        }
        Ok(())
    }

    /// JSON dump with field texts.
    pub fn to_json(&self, doc: Option<&Document>) -> serde_json::Value {
        let text = |f: &Field| -> Option<String> {
            doc.map(|d| {
                f.members
                    .iter()
                    .map(|&u| d.units[u].text.as_str())
                    .filter(|s| !s.is_empty())
                    .collect::<Vec<_>>()
                    .join(" ")
            })
        };
        serde_json::json!({
            "trees": self.trees.iter().map(|t| serde_json::json!({
                "root": t.root,
                "kind": t.kind().name(),
                "malformed": t.malformed,
                "fields": t.fields.iter().map(|f| {
                    let mut v = serde_json::json!({
                        "role": f.role, "head": f.head, "members": f.members,
                    });
                    if let Some(s) = text(f) {
                        v["text"] = s.into();
                    }
                    v
                }).collect::<Vec<_>>(),
                "edges": t.edges,
                "objects": t.to_objects(),
            })).collect::<Vec<_>>()
        })
    }

    /// Graphviz DOT text: one cluster per tree, nodes labeled `role:text`.
    pub fn to_dot(&self, doc: &Document) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "digraph \"{}\" {{", escape(&doc.doc_id));
        let _ = writeln!(s, "  node [shape=box];");
        for (ti, t) in self.trees.iter().enumerate() {
            let _ = writeln!(s, "  subgraph cluster_{ti} {{");
            for f in &t.fields {
                let text: Vec<&str> = f.members.iter().map(|&u| doc.units[u].text.as_str()).collect();
                let _ = writeln!(
                    s,
                    "    f{} [label=\"{}:{}\"];",
                    f.head,
                    escape(&f.role),
                    escape(text.join(" ").trim())
                );
            }
            for e in &t.edges {
                let _ = writeln!(
                    s,
                    "    f{} -> f{} [label=\"{}\"];",
                    e.parent,
                    e.child,
                    escape(&e.rel)
                );
            }
            let _ = writeln!(s, "  }}");
        }
        s.push_str("}\n");
        s
    }
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}
