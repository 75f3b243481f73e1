use std::collections::{BTreeMap, BTreeSet};

use super::forest::{Field, FieldEdge, HierTree};
use super::labels::{RelId, RelationLabelSet, INTER_CG, INTER_KVP};
use super::role;

/// Result of turning one unit-level tree into a field hierarchy.
#[derive(Clone, Debug, PartialEq)]
pub struct Assembled {
    pub tree: HierTree,
    /// Why the tree was flagged malformed (empty otherwise).
    pub diagnostics: Vec<String>,
}

/// Builds the field hierarchy of one unit tree.
///
/// `units` are the tree's members; `parent`/`rel` are document-wide arrays in
/// which the tree root is self-parented. Units whose incoming edge is an
/// intra-field type join their parent's field; every other unit heads a new
/// field. Inter-field edges are lifted to the heads of both fields. A field
/// reached by two different intra types makes the tree malformed: each unit
/// then becomes a singleton field of role `unknown`, keeping unit edges.
pub fn assemble_tree(
    units: &[usize],
    parent: &[usize],
    rel: &[RelId],
    labels: &RelationLabelSet,
) -> Assembled {
    let in_tree: BTreeSet<usize> = units.iter().copied().collect();
    let is_head = |u: usize| parent[u] == u || !labels.is_intra(rel[u]);
    let root = *units
        .iter()
        .find(|&&u| parent[u] == u)
        .expect("unit tree has a self-parented root");

    // Field head of every unit.
    let mut head_of: BTreeMap<usize, usize> = BTreeMap::new();
    for &u in units {
        let mut cur = u;
        while !is_head(cur) {
            cur = parent[cur];
        }
        head_of.insert(u, cur);
    }

    let mut diagnostics = Vec::new();
    let mut intra_types: BTreeMap<usize, BTreeSet<RelId>> = BTreeMap::new();
    for &u in units {
        if !is_head(u) {
            intra_types.entry(head_of[&u]).or_default().insert(rel[u]);
        }
    }
    for (h, types) in &intra_types {
        if types.len() > 1 {
            let names: Vec<&str> = types.iter().map(|&t| labels.name(t)).collect();
            diagnostics.push(format!("field headed by unit {h} mixes {}", names.join(", ")));
        }
    }

    let mut children: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &u in units {
        if parent[u] != u {
            debug_assert!(in_tree.contains(&parent[u]));
            children.entry(parent[u]).or_default().push(u);
        }
    }

    if !diagnostics.is_empty() {
        let mut fields: Vec<Field> = units
            .iter()
            .map(|&u| Field {
                role: role::UNKNOWN.to_string(),
                head: u,
                members: vec![u],
            })
            .collect();
        fields.sort_by_key(|f| f.head);
        let mut edges: Vec<FieldEdge> = units
            .iter()
            .filter(|&&u| parent[u] != u)
            .map(|&u| FieldEdge {
                parent: parent[u],
                child: u,
                rel: labels.name(rel[u]).to_string(),
            })
            .collect();
        edges.sort_by_key(|e| e.child);
        return Assembled {
            tree: HierTree {
                root,
                fields,
                edges,
                malformed: true,
            },
            diagnostics,
        };
    }

    // Members in depth-first order from the head along intra edges.
    let heads: Vec<usize> = units.iter().copied().filter(|&u| is_head(u)).collect();
    let mut members_of: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &h in &heads {
        let mut members = Vec::new();
        let mut stack = vec![h];
        while let Some(u) = stack.pop() {
            members.push(u);
            if let Some(ch) = children.get(&u) {
                for &c in ch.iter().rev() {
                    if !is_head(c) {
                        stack.push(c);
                    }
                }
            }
        }
        members_of.insert(h, members);
    }

    let mut edges: Vec<FieldEdge> = heads
        .iter()
        .filter(|&&h| parent[h] != h)
        .map(|&h| FieldEdge {
            parent: head_of[&parent[h]],
            child: h,
            rel: labels.name(rel[h]).to_string(),
        })
        .collect();
    edges.sort_by_key(|e| e.child);

    // Roles: intra type when the field has one, else inferred top-down from
    // the inter-field edges around its head.
    let mut roles: BTreeMap<usize, String> = BTreeMap::new();
    let out_types = |h: usize| -> BTreeSet<&str> {
        edges
            .iter()
            .filter(|e| e.parent == h)
            .map(|e| e.rel.as_str())
            .collect()
    };
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(h) = queue.pop_front() {
        let chain_role = intra_types
            .get(&h)
            .and_then(|t| t.iter().next())
            .and_then(|&t| labels.intra_role(t));
        let r = match chain_role {
            Some(r) => r.to_string(),
            None => {
                let outs = out_types(h);
                let incoming = edges.iter().find(|e| e.child == h);
                match incoming {
                    None => {
                        if outs.contains(INTER_KVP) {
                            role::KEY
                        } else if outs.contains(INTER_CG) {
                            role::CHOICE_TITLE
                        } else {
                            role::OTHER
                        }
                    }
                    Some(e) => {
                        let parent_role = roles[&e.parent].as_str();
                        match e.rel.as_str() {
                            INTER_KVP if parent_role == role::KEY => role::VALUE,
                            INTER_KVP => role::KEY,
                            INTER_CG if parent_role == role::CHOICE_TITLE => role::CHOICE_FIELD,
                            INTER_CG if outs.contains(INTER_CG) => role::CHOICE_TITLE,
                            INTER_CG => role::CHOICE_FIELD,
                            _ => role::OTHER,
                        }
                    }
                }
                .to_string()
            }
        };
        roles.insert(h, r);
        queue.extend(edges.iter().filter(|e| e.parent == h).map(|e| e.child));
    }

    let mut fields: Vec<Field> = heads
        .iter()
        .map(|&h| Field {
            role: roles[&h].clone(),
            head: h,
            members: members_of.remove(&h).expect("members"),
        })
        .collect();
    fields.sort_by_key(|f| f.head);

    Assembled {
        tree: HierTree {
            root,
            fields,
            edges,
            malformed: false,
        },
        diagnostics,
    }
}
