//! The full network: encoder, proposal heads and relation decoder, with
//! inference for both the proposal-only and the refined route.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arbor::{self, build_rooted_graph, max_arborescence, Decoded, ScoreMode, UnitForest, SCORE_FLOOR};
use crate::doc_model::{Document, RelationLabelSet, UnifiedLabels};
use crate::encoder::{embed_units, encode, init_encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::nn::{Archive, ParamStore, Real, Tape, Tensor, Var};
use crate::proposer::{
    all_pairs, argmax_excluding, build_tree_proposals, classify_relations, init_proposer,
    score_parents, top_k_proposals, type_matrix, ProposerConfig, RelationProposal,
};
use crate::rel_decoder::{
    build_tree_masks, compute_levels, decode_relations, final_type_logits, init_decoder,
    refine_logits, refine_parents, refine_probs, DecoderConfig, TreeLevels, TreeMasks,
};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub proposer: ProposerConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn full_scale() -> Self {
        ModelConfig {
            encoder: EncoderConfig::full_scale(),
            proposer: ProposerConfig::full_scale(),
            decoder: DecoderConfig::full_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.proposer.validate()?;
        self.decoder.validate(self.encoder.d_model)
    }
}

/// Every intermediate of one forward pass that the losses need.
pub struct Forward {
    pub units: Var,
    /// `N×N` parent logits, row = child.
    pub parent_logits: Var,
    /// Column-stochastic parent scores `R[i][j]`.
    pub r: Tensor<f64>,
    /// `N·K'` proposals, child-major.
    pub proposals: Vec<RelationProposal>,
    /// Pairs scored by the type head: the proposals, then any extra pairs.
    pub cls_pairs: Vec<(usize, usize)>,
    pub cls_logits: Var,
    pub tree_proposals: UnitForest,
    pub levels: TreeLevels,
    pub masks: TreeMasks,
    pub refined: Var,
    /// `N×K'` refinement logits.
    pub refine_logits: Var,
    /// Final type logits per proposal.
    pub final_logits: Var,
}

impl Forward {
    pub fn k(&self) -> usize {
        self.proposals.len() / self.r.rows()
    }
}

/// Inference output of one document.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub r: Tensor<f64>,
    /// Stage-one relation types `types[i][j]` over all pairs.
    pub types: Vec<Vec<usize>>,
    pub proposals: Vec<RelationProposal>,
    pub tree_proposals: UnitForest,
    pub levels: TreeLevels,
    pub masks: TreeMasks,
    /// `N×K'` refinement probabilities.
    pub refine_probs: Tensor<f64>,
    /// Final relation type per proposal.
    pub final_types: Vec<usize>,
    /// Best refined parent per child before tree decoding.
    pub refined_argmax: Vec<usize>,
    /// Decoding of the refined sparse scores (the model output).
    pub refined: Decoded,
    /// Decoding of the raw parent scores with stage-one types.
    pub proposal_only: Decoded,
}

impl Prediction {
    pub fn unified_labels(&self, labels: &RelationLabelSet) -> Result<UnifiedLabels> {
        let types = self.refined_types(labels.root());
        let (parent, rel) = self.refined.labels(&types, labels);
        UnifiedLabels::new(parent, rel, labels)
    }

    fn refined_types(&self, root: usize) -> Vec<Vec<usize>> {
        refined_type_matrix(self.r.rows(), &self.proposals, &self.final_types, &self.types, root)
    }
}

fn refined_type_matrix(
    n: usize,
    proposals: &[RelationProposal],
    final_types: &[usize],
    fallback: &[Vec<usize>],
    root: usize,
) -> Vec<Vec<usize>> {
    let mut types = fallback.to_vec();
    debug_assert_eq!(types.len(), n);
    for (p, &t) in proposals.iter().zip(final_types) {
        if p.parent != p.child {
            types[p.parent][p.child] = t;
        } else {
            types[p.parent][p.child] = root;
        }
    }
    types
}

/// Decodes refined scores: each child's proposals carry their refinement
/// probability, all other pairs the score floor. Edges outside the proposals
/// that the arborescence still needs are replaced by root edges.
pub fn decode_refined(
    n: usize,
    proposals: &[RelationProposal],
    probs: &Tensor<f64>,
    types: &[Vec<usize>],
    labels: &RelationLabelSet,
) -> Result<Decoded> {
    let k = probs.cols();
    if probs.rows() != n || proposals.len() != n * k {
        return Err(Error::Shape {
            op: "decode_refined",
            detail: format!("{} proposals, probs {:?}, {n} units", proposals.len(), probs.shape()),
        });
    }
    let mut r = Tensor::full(&[n, n], SCORE_FLOOR);
    let mut is_prop = vec![false; n * n];
    for p in proposals {
        r.data_mut()[p.parent * n + p.child] = probs.at(p.child, p.rank).max(SCORE_FLOOR);
        is_prop[p.parent * n + p.child] = true;
    }
    let g = build_rooted_graph(&r, ScoreMode::Log)?;
    let mut parents = max_arborescence(&g);
    for (j, p) in parents.iter_mut().enumerate() {
        if let Some(i) = *p {
            if !is_prop[i * n + j] {
                *p = None;
            }
        }
    }
    Ok(arbor::finish(&g, parents, types, labels))
}

/// Network parameters plus the configuration and label space they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Real = f32> {
    pub cfg: ModelConfig,
    pub labels: RelationLabelSet,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, labels: RelationLabelSet, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let d = cfg.encoder.d_model;
        init_encoder(&mut params, &mut rng, &cfg.encoder);
        init_proposer(&mut params, &mut rng, d, &cfg.proposer, labels.len());
        init_decoder(&mut params, &mut rng, d, &cfg.decoder, labels.len());
        Ok(Model { cfg, labels, params })
    }

    pub fn tape(&self) -> Tape<'_, T> {
        Tape::with_params(&self.params)
    }

    /// Runs the network on one document. The type head additionally scores
    /// the pairs `extra` picks given the proposals, after the proposals.
    pub fn forward(
        &self,
        tape: &mut Tape<'_, T>,
        doc: &Document,
        extra: impl FnOnce(&[RelationProposal]) -> Vec<(usize, usize)>,
    ) -> Result<Forward> {
        let n = doc.len();
        if n == 0 {
            return Err(Error::InvalidDocument {
                doc_id: doc.doc_id.clone(),
                violations: vec!["empty document".into()],
            });
        }
        let e = embed_units(tape, doc, &self.cfg.encoder)?;
        let units = encode(tape, e, &self.cfg.encoder)?;
        let (parent_logits, r) = score_parents(tape, units)?;
        let proposals = top_k_proposals(&r, self.cfg.proposer.k);
        let mut cls_pairs: Vec<(usize, usize)> = proposals.iter().map(|p| (p.parent, p.child)).collect();
        cls_pairs.extend(extra(&proposals));
        let cls_logits = classify_relations(tape, units, &cls_pairs)?;

        let tree_proposals = build_tree_proposals(&r)?;
        let levels = compute_levels(&tree_proposals, &proposals, self.cfg.decoder.l_max);
        let masks = build_tree_masks(&tree_proposals, &proposals);
        let refined = decode_relations(tape, units, &proposals, &levels, &masks, &self.cfg.decoder)?;
        let refine_logits = refine_logits(tape, refined, n)?;
        let final_logits = final_type_logits(tape, refined)?;
        Ok(Forward {
            units,
            parent_logits,
            r,
            proposals,
            cls_pairs,
            cls_logits,
            tree_proposals,
            levels,
            masks,
            refined,
            refine_logits,
            final_logits,
        })
    }

    pub fn predict(&self, doc: &Document) -> Result<Prediction> {
        let n = doc.len();
        let root = self.labels.root();
        let mut tape = self.tape();
        let fwd = self.forward(&mut tape, doc, |_| all_pairs(n))?;
        let np = fwd.proposals.len();

        // Type logits of all N² pairs follow the proposals, child-major.
        let cls = tape.value(fwd.cls_logits);
        let c = cls.cols();
        let all = Tensor::new(vec![n * n, c], cls.data()[np * c..].to_vec())?;
        let types = type_matrix(&all, n, root);
        let proposal_only = arbor::decode(&fwd.r, &types, &self.labels, ScoreMode::Log)?;

        let probs = refine_probs(tape.value(fwd.refine_logits));
        let fin = tape.value(fwd.final_logits);
        let final_types: Vec<usize> = fwd
            .proposals
            .iter()
            .enumerate()
            .map(|(q, p)| {
                if p.parent == p.child {
                    root
                } else {
                    argmax_excluding(fin.row(q), root)
                }
            })
            .collect();
        let refined_argmax = refine_parents(&probs, &fwd.proposals);
        let rtypes = refined_type_matrix(n, &fwd.proposals, &final_types, &types, root);
        let refined = decode_refined(n, &fwd.proposals, &probs, &rtypes, &self.labels)?;
        Ok(Prediction {
            r: fwd.r,
            types,
            proposals: fwd.proposals,
            tree_proposals: fwd.tree_proposals,
            levels: fwd.levels,
            masks: fwd.masks,
            refine_probs: probs,
            final_types,
            refined_argmax,
            refined,
            proposal_only,
        })
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            labels: self.labels.clone(),
            params: self.params.cast(),
        }
    }

    pub fn to_archive(&self, extra: BTreeMap<String, serde_json::Value>) -> Result<Archive<T>> {
        let mut metadata = extra;
        metadata.insert("config".into(), serde_json::to_value(&self.cfg)?);
        metadata.insert(
            "schema".into(),
            serde_json::to_value(self.labels.names().collect::<Vec<_>>())?,
        );
        Ok(Archive {
            tensors: self
                .params
                .iter()
                .map(|(name, p)| (name.to_string(), p.value.clone()))
                .collect(),
            metadata,
        })
    }

    pub fn from_archive(a: Archive<T>) -> Result<Self> {
        let get = |key: &str| {
            a.metadata
                .get(key)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks {key:?}")))
        };
        let cfg: ModelConfig = serde_json::from_value(get("config")?)
            .map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let schema: Vec<String> = serde_json::from_value(get("schema")?)
            .map_err(|e| Error::Checkpoint(format!("schema: {e}")))?;
        let labels = RelationLabelSet::from_names(&schema)?;
        let mut model = Model::new(cfg, labels, 0)?;
        let expected = model.params.len();
        let mut seen = 0;
        for (name, t) in a.tensors {
            let slot = model
                .params
                .get_mut(&name)
                .map_err(|_| Error::Checkpoint(format!("unexpected tensor {name:?}")))?;
            if slot.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "{name}: shape {:?}, model expects {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
            seen += 1;
        }
        if seen != expected {
            return Err(Error::Checkpoint(format!("{seen} tensors, model has {expected}")));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path, extra: BTreeMap<String, serde_json::Value>) -> Result<()> {
        self.to_archive(extra)?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_archive(Archive::load(path)?)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GenConfig};

    pub(crate) fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig {
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ffn: 8,
                vocab: 64,
            },
            proposer: ProposerConfig { hidden: 8, k: 3 },
            decoder: DecoderConfig {
                n_layers: 1,
                n_heads: 2,
                d_ffn: 8,
                l_max: 16,
            },
        }
    }

    #[test]
    fn predict_yields_valid_forests() {
        let c = generate_corpus(&GenConfig {
            seed: 2,
            n_docs: 3,
            ..GenConfig::default()
        })
        .unwrap();
        let m = Model::<f32>::new(tiny_cfg(), c.labels.clone(), 1).unwrap();
        for d in &c.docs {
            let p = m.predict(&d.doc).unwrap();
            let n = d.doc.len();
            assert_eq!(p.proposals.len(), n * 3);
            p.refined.forest.validate(&d.doc).unwrap();
            p.proposal_only.forest.validate(&d.doc).unwrap();
            let ul = p.unified_labels(&c.labels).unwrap();
            assert_eq!(ul.len(), n);
            for (j, par) in p.refined.parents.iter().enumerate() {
                if let Some(i) = par {
                    assert!(p.proposals[j * 3..j * 3 + 3].iter().any(|q| q.parent == *i));
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let labels = RelationLabelSet::form_default();
        let m = Model::<f32>::new(tiny_cfg(), labels, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        m.save(&p, BTreeMap::new()).unwrap();
        assert_eq!(Model::<f32>::load(&p).unwrap(), m);
        assert!(Model::<f64>::load(&p).is_err());
    }

    #[test]
    fn refined_decode_rewires_non_proposals() {
        // Both units propose only each other: the cycle must be broken by a
        // root edge.
        let ps = [
            RelationProposal { child: 0, parent: 1, score: 1.0, rank: 0 },
            RelationProposal { child: 1, parent: 0, score: 1.0, rank: 0 },
        ];
        let probs = Tensor::full(&[2, 1], 1.0);
        let labels = RelationLabelSet::form_default();
        let types = vec![vec![0, 5], vec![5, 0]];
        let d = decode_refined(2, &ps, &probs, &types, &labels).unwrap();
        assert_eq!(d.parents.iter().filter(|p| p.is_none()).count(), 1);
    }
}
