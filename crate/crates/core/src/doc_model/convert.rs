use super::assemble::assemble_tree;
use super::forest::Forest;
use super::labels::{RelationLabelSet, UnifiedLabels};
use super::Document;
use crate::error::{Error, Result};

/// Flattens a forest into per-unit parents and relation types.
///
/// Non-head members point to the previous member in reading order with the
/// field's intra type; a field head points to its parent field's head with the
/// edge type, or to itself with `root`. Units not covered by any field are
/// self-parented roots.
pub fn labels_from_forest(
    doc: &Document,
    forest: &Forest,
    labels: &RelationLabelSet,
) -> Result<UnifiedLabels> {
    let n = doc.len();
    let ranks = doc.reading_ranks();
    let mut parent: Vec<usize> = (0..n).collect();
    let mut rel = vec![labels.root(); n];
    let mut covered = vec![false; n];

    for tree in &forest.trees {
        for f in &tree.fields {
            for &u in &f.members {
                if u >= n {
                    return Err(Error::InvalidForest(format!("unknown unit id {u}")));
                }
                if std::mem::replace(&mut covered[u], true) {
                    return Err(Error::InvalidForest(format!("unit {u} in two fields")));
                }
            }
            let mut ordered = f.members.clone();
            ordered.sort_by_key(|&u| ranks[u]);
            if ordered.len() > 1 {
                let intra = labels.intra_for_role(&f.role).ok_or_else(|| {
                    Error::UnknownRelation(format!("intra-{}", f.role))
                })?;
                for w in ordered.windows(2) {
                    parent[w[1]] = w[0];
                    rel[w[1]] = intra;
                }
            }
        }
        for e in &tree.edges {
            if e.parent >= n || e.child >= n {
                return Err(Error::InvalidForest(format!(
                    "edge {}->{} references unknown unit",
                    e.parent, e.child
                )));
            }
            parent[e.child] = e.parent;
            rel[e.child] = labels.id(&e.rel)?;
        }
    }
    UnifiedLabels::new(parent, rel, labels)
}

/// Rebuilds the forest encoded by unified labels.
///
/// Fails when any tree mixes intra-field types along one field.
pub fn forest_from_labels(
    doc: &Document,
    ul: &UnifiedLabels,
    labels: &RelationLabelSet,
) -> Result<Forest> {
    if ul.len() != doc.len() {
        return Err(Error::InvalidLabels(format!(
            "{} labels for {} units",
            ul.len(),
            doc.len()
        )));
    }
    let (forest, diagnostics) = assemble_forest(ul.parent(), ul.rel_type(), labels);
    if !diagnostics.is_empty() {
        return Err(Error::MalformedTree(diagnostics.join("; ")));
    }
    Ok(forest)
}

/// Splits a parent array into unit trees and assembles each one, keeping
/// malformed trees (flagged) instead of failing.
pub fn assemble_forest(
    parent: &[usize],
    rel: &[usize],
    labels: &RelationLabelSet,
) -> (Forest, Vec<String>) {
    let n = parent.len();
    let mut root_of = vec![usize::MAX; n];
    for u in 0..n {
        let mut cur = u;
        while parent[cur] != cur {
            cur = parent[cur];
        }
        root_of[u] = cur;
    }
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); n];
    for u in 0..n {
        members[root_of[u]].push(u);
    }
    let mut trees = Vec::new();
    let mut diagnostics = Vec::new();
    for (r, units) in members.iter().enumerate() {
        if units.is_empty() || parent[r] != r {
            continue;
        }
        let a = assemble_tree(units, parent, rel, labels);
        diagnostics.extend(a.diagnostics);
        trees.push(a.tree);
    }
    (Forest::new(trees), diagnostics)
}

#[cfg(test)]
mod tests {
    use super::super::role;
    use super::super::testutil::*;
    use super::super::{Field, FieldEdge, HierTree, UnitKind};
    use super::*;

    fn l() -> RelationLabelSet {
        RelationLabelSet::form_default()
    }

    #[test]
    fn isolated_unit_is_self_parent_root() {
        let d = column_doc(1);
        let forest = Forest::from_fields(&d, vec![(role::OTHER.into(), vec![0])], &[]).unwrap();
        let ul = labels_from_forest(&d, &forest, &l()).unwrap();
        assert_eq!(ul.parent(), &[0]);
        assert_eq!(ul.rel_names(&l()), vec!["root"]);
    }

    #[test]
    fn key_value_labels() {
        // k0, k1 stacked; v0 right of k0.
        let d = doc(vec![
            unit(0, UnitKind::TextLine, [0.1, 0.10, 0.3, 0.115], "date of"),
            unit(1, UnitKind::TextLine, [0.1, 0.13, 0.3, 0.145], "birth:"),
            unit(2, UnitKind::TextWidget, [0.4, 0.10, 0.6, 0.115], ""),
        ]);
        let forest = Forest::from_fields(
            &d,
            vec![("key".into(), vec![1, 0]), ("value".into(), vec![2])],
            &[(0, 1, "inter-kvp".into())],
        )
        .unwrap();
        let ul = labels_from_forest(&d, &forest, &l()).unwrap();
        assert_eq!(ul.parent(), &[0, 0, 0]);
        assert_eq!(ul.rel_names(&l()), vec!["root", "intra-key", "inter-kvp"]);
        assert_eq!(forest_from_labels(&d, &ul, &l()).unwrap(), forest);
    }

    #[test]
    fn empty_forest_gives_all_roots() {
        let d = column_doc(4);
        let ul = labels_from_forest(&d, &Forest::default(), &l()).unwrap();
        assert_eq!(ul, UnifiedLabels::all_root(4, &l()));
    }

    #[test]
    fn all_root_labels_give_singletons() {
        let d = column_doc(3);
        let f = forest_from_labels(&d, &UnifiedLabels::all_root(3, &l()), &l()).unwrap();
        assert_eq!(f.len(), 3);
        assert!(f.trees.iter().all(|t| t.fields.len() == 1 && t.fields[0].role == role::OTHER));
    }

    #[test]
    fn single_inter_kvp_edge_forms_kvp_tree() {
        let d = column_doc(3);
        let labels = l();
        let kvp = labels.id("inter-kvp").unwrap();
        // parent(v0 = 1) = k0 = 0, unit 2 stands alone.
        let ul = UnifiedLabels::new(vec![0, 0, 2], vec![0, kvp, 0], &labels).unwrap();
        let f = forest_from_labels(&d, &ul, &labels).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(
            f.trees[0],
            HierTree {
                root: 0,
                fields: vec![
                    Field { role: "key".into(), head: 0, members: vec![0] },
                    Field { role: "value".into(), head: 1, members: vec![1] },
                ],
                edges: vec![FieldEdge { parent: 0, child: 1, rel: "inter-kvp".into() }],
                malformed: false,
            }
        );
    }

    #[test]
    fn unit_in_two_fields_rejected() {
        let d = column_doc(2);
        let forest = Forest {
            trees: vec![HierTree {
                root: 0,
                fields: vec![
                    Field { role: "key".into(), head: 0, members: vec![0, 1] },
                    Field { role: "value".into(), head: 1, members: vec![1] },
                ],
                edges: vec![],
                malformed: false,
            }],
        };
        assert!(labels_from_forest(&d, &forest, &l()).is_err());
    }

    #[test]
    fn unknown_unit_rejected() {
        let d = column_doc(2);
        let forest = Forest {
            trees: vec![HierTree {
                root: 0,
                fields: vec![Field { role: "other".into(), head: 5, members: vec![5] }],
                edges: vec![],
                malformed: false,
            }],
        };
        assert!(labels_from_forest(&d, &forest, &l()).is_err());
    }

    #[test]
    fn mixed_intra_chain_rejected() {
        let d = column_doc(3);
        let labels = l();
        let (ik, iv) = (labels.id("intra-key").unwrap(), labels.id("intra-value").unwrap());
        let ul = UnifiedLabels::new(vec![0, 0, 1], vec![0, ik, iv], &labels).unwrap();
        let err = forest_from_labels(&d, &ul, &labels).unwrap_err();
        assert!(matches!(err, Error::MalformedTree(_)), "{err}");
    }
}
