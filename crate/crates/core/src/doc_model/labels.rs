use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into a [`RelationLabelSet`].
pub type RelId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RelCategory {
    IntraField,
    InterField,
    Root,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationType {
    pub name: String,
    pub category: RelCategory,
}

pub const ROOT: &str = "root";
pub const INTER_KVP: &str = "inter-kvp";
pub const INTER_CG: &str = "inter-cg";
const INTRA_PREFIX: &str = "intra-";
const INTER_PREFIX: &str = "inter-";

/// The unified relation vocabulary: one `root` type plus intra-field and
/// inter-field relation types. Categories follow from the name prefix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RelationLabelSet {
    types: Vec<RelationType>,
    root: RelId,
}

impl RelationLabelSet {
    pub fn from_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut types = Vec::with_capacity(names.len());
        for n in names {
            let name = n.as_ref();
            let category = if name == ROOT {
                RelCategory::Root
            } else if name.len() > INTRA_PREFIX.len() && name.starts_with(INTRA_PREFIX) {
                RelCategory::IntraField
            } else if name.len() > INTER_PREFIX.len() && name.starts_with(INTER_PREFIX) {
                RelCategory::InterField
            } else {
                return Err(Error::UnknownRelation(name.to_string()));
            };
            if types.iter().any(|t: &RelationType| t.name == name) {
                return Err(Error::Config(format!("duplicate relation type {name:?}")));
            }
            types.push(RelationType {
                name: name.to_string(),
                category,
            });
        }
        let roots: Vec<_> = types
            .iter()
            .enumerate()
            .filter(|(_, t)| t.category == RelCategory::Root)
            .map(|(i, _)| i)
            .collect();
        match roots.as_slice() {
            [r] => Ok(RelationLabelSet { types, root: *r }),
            _ => Err(Error::Config(
                "relation label set must contain \"root\" exactly once".into(),
            )),
        }
    }

    /// `[root, intra-key, intra-value, intra-cgt, intra-cf, inter-kvp, inter-cg]`.
    pub fn form_default() -> Self {
        Self::from_names(&[
            ROOT,
            "intra-key",
            "intra-value",
            "intra-cgt",
            "intra-cf",
            INTER_KVP,
            INTER_CG,
        ])
        .expect("default label set is valid")
    }

    /// Default set extended with `intra-<entity>` for each entity type.
    pub fn with_entities<S: AsRef<str>>(entities: &[S]) -> Result<Self> {
        let mut names: Vec<String> = Self::form_default().names().map(str::to_string).collect();
        names.extend(entities.iter().map(|e| format!("{INTRA_PREFIX}{}", e.as_ref())));
        Self::from_names(&names)
    }

    pub fn len(&self) -> usize {
        self.types.len()
    }

    pub fn is_empty(&self) -> bool {
        self.types.is_empty()
    }

    pub fn root(&self) -> RelId {
        self.root
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.types.iter().map(|t| t.name.as_str())
    }

    pub fn types(&self) -> &[RelationType] {
        &self.types
    }

    pub fn name(&self, id: RelId) -> &str {
        &self.types[id].name
    }

    pub fn category(&self, id: RelId) -> RelCategory {
        self.types[id].category
    }

    pub fn id(&self, name: &str) -> Result<RelId> {
        self.types
            .iter()
            .position(|t| t.name == name)
            .ok_or_else(|| Error::UnknownRelation(name.to_string()))
    }

    pub fn get(&self, name: &str) -> Option<RelId> {
        self.types.iter().position(|t| t.name == name)
    }

    /// Role carried by an intra-field type (`intra-key` → `key`).
    pub fn intra_role(&self, id: RelId) -> Option<&str> {
        let t = &self.types[id];
        (t.category == RelCategory::IntraField).then(|| &t.name[INTRA_PREFIX.len()..])
    }

    /// Intra-field type that chains members of a field with this role.
    pub fn intra_for_role(&self, role: &str) -> Option<RelId> {
        self.get(&format!("{INTRA_PREFIX}{role}"))
    }

    pub fn is_intra(&self, id: RelId) -> bool {
        self.category(id) == RelCategory::IntraField
    }

    pub fn is_inter(&self, id: RelId) -> bool {
        self.category(id) == RelCategory::InterField
    }
}

/// Per-unit parent index and relation type.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnifiedLabels {
    parent: Vec<usize>,
    rel_type: Vec<RelId>,
}

impl UnifiedLabels {
    /// Checks lengths, ranges, the self-parent ⇔ root rule, and acyclicity.
    pub fn new(parent: Vec<usize>, rel_type: Vec<RelId>, labels: &RelationLabelSet) -> Result<Self> {
        let n = parent.len();
        if rel_type.len() != n {
            return Err(Error::InvalidLabels(format!(
                "{} parents but {} relation types",
                n,
                rel_type.len()
            )));
        }
        for (j, (&p, &t)) in parent.iter().zip(&rel_type).enumerate() {
            if p >= n {
                return Err(Error::InvalidLabels(format!("unit {j}: parent {p} out of range")));
            }
            if t >= labels.len() {
                return Err(Error::InvalidLabels(format!("unit {j}: relation id {t} out of range")));
            }
            if (p == j) != (t == labels.root()) {
                return Err(Error::InvalidLabels(format!(
                    "unit {j}: self-parent iff root violated (parent {p}, type {})",
                    labels.name(t)
                )));
            }
        }
        // Acyclic: every unit reaches a self-parented root within n steps.
        let mut state = vec![0u8; n]; // 0 unknown, 1 in progress, 2 reaches root
        for start in 0..n {
            let mut path = Vec::new();
            let mut u = start;
            loop {
                match state[u] {
                    2 => break,
                    1 => {
                        return Err(Error::InvalidLabels(format!("cycle through unit {u}")));
                    }
                    _ => {}
                }
                state[u] = 1;
                path.push(u);
                if parent[u] == u {
                    break;
                }
                u = parent[u];
            }
            for v in path {
                state[v] = 2;
            }
        }
        Ok(UnifiedLabels { parent, rel_type })
    }

    /// Every unit its own root.
    pub fn all_root(n: usize, labels: &RelationLabelSet) -> Self {
        UnifiedLabels {
            parent: (0..n).collect(),
            rel_type: vec![labels.root(); n],
        }
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn parent(&self) -> &[usize] {
        &self.parent
    }

    pub fn rel_type(&self) -> &[RelId] {
        &self.rel_type
    }

    pub fn rel_names<'l>(&self, labels: &'l RelationLabelSet) -> Vec<&'l str> {
        self.rel_type.iter().map(|&t| labels.name(t)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_set_has_seven_types() {
        let l = RelationLabelSet::form_default();
        assert_eq!(l.len(), 7);
        assert_eq!(l.name(l.root()), "root");
        assert_eq!(l.intra_role(l.id("intra-cgt").unwrap()), Some("cgt"));
        assert_eq!(l.category(l.id("inter-kvp").unwrap()), RelCategory::InterField);
    }

    #[test]
    fn entity_types_extend_default() {
        let l = RelationLabelSet::with_entities(&["address"]).unwrap();
        assert_eq!(l.len(), 8);
        assert_eq!(l.intra_for_role("address"), Some(7));
    }

    #[test]
    fn label_set_requires_single_root() {
        assert!(RelationLabelSet::from_names(&["intra-key"]).is_err());
        assert!(RelationLabelSet::from_names(&["root", "root"]).is_err());
        assert!(RelationLabelSet::from_names(&["root", "sideways"]).is_err());
    }

    #[test]
    fn cycle_rejected() {
        let l = RelationLabelSet::form_default();
        let intra = l.id("intra-key").unwrap();
        let err = UnifiedLabels::new(vec![1, 0, 2], vec![intra, intra, 0], &l).unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn self_parent_must_be_root() {
        let l = RelationLabelSet::form_default();
        assert!(UnifiedLabels::new(vec![0], vec![1], &l).is_err());
        assert!(UnifiedLabels::new(vec![1, 1], vec![0, 0], &l).is_err());
        assert!(UnifiedLabels::new(vec![1, 1], vec![1, 0], &l).is_ok());
    }
}
