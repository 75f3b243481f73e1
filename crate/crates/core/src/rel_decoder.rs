//! Proposal refinement under tree attention masks and tree level embeddings.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arbor::UnitForest;
use crate::error::{Error, Result};
use crate::nn::layers::{attention, dense, ffn, init_attention, init_dense, init_ffn, init_norm, norm};
use crate::nn::params::normal_like;
use crate::nn::{Mask, ParamStore, Real, Tape, Tensor, Var};
use crate::proposer::RelationProposal;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    /// Deepest distinct tree level; deeper units share it.
    pub l_max: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            n_layers: 3,
            n_heads: 4,
            d_ffn: 256,
            l_max: 16,
        }
    }
}

impl DecoderConfig {
    pub fn full_scale() -> Self {
        DecoderConfig {
            n_layers: 3,
            n_heads: 12,
            d_ffn: 2048,
            l_max: 16,
        }
    }

    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.n_heads == 0 || d_model % self.n_heads != 0 || self.d_ffn == 0 {
            return Err(Error::Config(format!(
                "decoder heads {} must divide d_model {d_model}; d_ffn must be positive",
                self.n_heads
            )));
        }
        Ok(())
    }

    /// Level index given to proposals whose endpoints lie in different trees.
    pub fn cross_level(&self) -> usize {
        self.l_max + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeLevels {
    pub unit_level: Vec<usize>,
    pub proposal_level: Vec<usize>,
    pub l_max: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TreeMasks {
    /// Proposal to proposal.
    pub self_mask: Arc<Mask>,
    /// Proposal to unit.
    pub cross_mask: Arc<Mask>,
}

/// Trees touched by a proposal: the child's tree and, when different, the
/// parent's.
fn trees_of(forest: &UnitForest, p: &RelationProposal) -> (usize, usize) {
    (forest.tree_of[p.child], forest.tree_of[p.parent])
}

/// Unit depth (clamped to `l_max`); an in-tree proposal takes its child's
/// level, a cross-tree proposal the reserved level `l_max + 1`.
pub fn compute_levels(forest: &UnitForest, proposals: &[RelationProposal], l_max: usize) -> TreeLevels {
    let unit_level: Vec<usize> = forest.depth.iter().map(|&d| d.min(l_max)).collect();
    let proposal_level = proposals
        .iter()
        .map(|p| {
            let (a, b) = trees_of(forest, p);
            if a == b {
                unit_level[p.child]
            } else {
                l_max + 1
            }
        })
        .collect();
    TreeLevels {
        unit_level,
        proposal_level,
        l_max,
    }
}

/// Proposals attend to each other when they share a tree and to the units
/// of their own trees.
pub fn build_tree_masks(forest: &UnitForest, proposals: &[RelationProposal]) -> TreeMasks {
    let np = proposals.len();
    let n = forest.tree_of.len();
    let tp: Vec<(usize, usize)> = proposals.iter().map(|p| trees_of(forest, p)).collect();
    let mut s = Vec::with_capacity(np * np);
    for &(a, b) in &tp {
        for &(c, d) in &tp {
            s.push(a == c || a == d || b == c || b == d);
        }
    }
    let mut x = Vec::with_capacity(np * n);
    for &(a, b) in &tp {
        for u in 0..n {
            let t = forest.tree_of[u];
            x.push(t == a || t == b);
        }
    }
    TreeMasks {
        self_mask: Arc::new(Mask::new(np, np, s)),
        cross_mask: Arc::new(Mask::new(np, n, x)),
    }
}

pub fn init_decoder<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, d: usize, cfg: &DecoderConfig, n_types: usize) {
    store.insert("dec.level", normal_like(rng, &[cfg.l_max + 2, d], 0.1));
    init_dense(store, rng, "dec.query", 3 * d, d);
    init_dense(store, rng, "dec.ctx", 2 * d, d);
    init_norm(store, "dec.ctx_ln", d);
    for l in 0..cfg.n_layers {
        init_norm(store, &format!("dec.{l}.ln1"), d);
        init_attention(store, rng, &format!("dec.{l}.self"), d);
        init_norm(store, &format!("dec.{l}.ln2"), d);
        init_attention(store, rng, &format!("dec.{l}.cross"), d);
        init_norm(store, &format!("dec.{l}.ln3"), d);
        init_ffn(store, rng, &format!("dec.{l}.ffn"), d, cfg.d_ffn);
    }
    init_norm(store, "dec.out", d);
    init_dense(store, rng, "ref.1", d, d);
    init_dense(store, rng, "ref.2", d, 1);
    init_dense(store, rng, "fin.1", d, d);
    init_dense(store, rng, "fin.2", d, n_types);
}

/// Refined proposal embeddings (`#proposals × d`).
///
/// Queries are built from both endpoint embeddings and the proposal level;
/// the context is every unit embedding joined with its level. Each layer runs
/// masked self-attention, masked cross-attention and a feed-forward block.
pub fn decode_relations<T: Real>(
    tape: &mut Tape<'_, T>,
    units: Var,
    proposals: &[RelationProposal],
    levels: &TreeLevels,
    masks: &TreeMasks,
    cfg: &DecoderConfig,
) -> Result<Var> {
    let n = tape.value(units).rows();
    let np = proposals.len();
    if levels.unit_level.len() != n
        || levels.proposal_level.len() != np
        || masks.self_mask.rows != np
        || masks.cross_mask.cols != n
    {
        return Err(Error::Shape {
            op: "decode_relations",
            detail: format!("{n} units, {np} proposals; levels or masks disagree"),
        });
    }
    for p in 0..np {
        assert!(
            (0..n).any(|u| masks.cross_mask.get(p, u)),
            "proposal {p} sees no unit"
        );
    }
    let table = tape.param("dec.level")?;
    let parents: Vec<usize> = proposals.iter().map(|p| p.parent).collect();
    let children: Vec<usize> = proposals.iter().map(|p| p.child).collect();
    let fi = tape.gather_rows(units, &parents)?;
    let fj = tape.gather_rows(units, &children)?;
    let pl = tape.embedding_lookup(table, &levels.proposal_level)?;
    let q = tape.concat(&[fi, fj, pl])?;
    let mut x = dense(tape, q, "dec.query")?;

    let ul = tape.embedding_lookup(table, &levels.unit_level)?;
    let c = tape.concat(&[units, ul])?;
    let c = dense(tape, c, "dec.ctx")?;
    let ctx = norm(tape, c, "dec.ctx_ln")?;

    for l in 0..cfg.n_layers {
        let h = norm(tape, x, &format!("dec.{l}.ln1"))?;
        let a = attention(tape, h, h, Some(&masks.self_mask), cfg.n_heads, &format!("dec.{l}.self"))?;
        x = tape.add(x, a)?;
        let h = norm(tape, x, &format!("dec.{l}.ln2"))?;
        let a = attention(tape, h, ctx, Some(&masks.cross_mask), cfg.n_heads, &format!("dec.{l}.cross"))?;
        x = tape.add(x, a)?;
        let h = norm(tape, x, &format!("dec.{l}.ln3"))?;
        let f = ffn(tape, h, &format!("dec.{l}.ffn"))?;
        x = tape.add(x, f)?;
    }
    norm(tape, x, "dec.out")
}

/// Refinement logits as `N × K'` (row = child, column = proposal rank).
pub fn refine_logits<T: Real>(tape: &mut Tape<'_, T>, refined: Var, n_children: usize) -> Result<Var> {
    let h = dense(tape, refined, "ref.1")?;
    let h = tape.relu(h);
    let s = dense(tape, h, "ref.2")?;
    let np = tape.value(s).rows();
    if n_children == 0 || np % n_children != 0 {
        return Err(Error::Shape {
            op: "refine_logits",
            detail: format!("{np} proposals for {n_children} children"),
        });
    }
    tape.reshape(s, &[n_children, np / n_children])
}

/// Final relation-type logits per proposal.
pub fn final_type_logits<T: Real>(tape: &mut Tape<'_, T>, refined: Var) -> Result<Var> {
    let h = dense(tape, refined, "fin.1")?;
    let h = tape.relu(h);
    dense(tape, h, "fin.2")
}

/// Row-wise softmax of refinement logits.
pub fn refine_probs<T: Real>(logits: &Tensor<T>) -> Tensor<f64> {
    let (n, k) = (logits.rows(), logits.cols());
    let mut out = Tensor::zeros(&[n, k]);
    for j in 0..n {
        let row: Vec<f64> = logits.row(j).iter().map(|x| x.to_f64().unwrap()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|x| (x - max).exp()).sum();
        for (r, x) in row.iter().enumerate() {
            out.data_mut()[j * k + r] = (x - max).exp() / z;
        }
    }
    out
}

/// Best proposal rank per child; ties go to the lower rank.
pub fn refine_parents(probs: &Tensor<f64>, proposals: &[RelationProposal]) -> Vec<usize> {
    let k = probs.cols();
    (0..probs.rows())
        .map(|j| {
            let row = probs.row(j);
            let mut best = 0;
            for r in 1..k {
                if row[r] > row[best] {
                    best = r;
                }
            }
            proposals[j * k + best].parent
        })
        .collect()
}
