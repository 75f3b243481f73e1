//! Parent scoring, top-K relation proposals, relation-type classification and
//! tree proposals.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arbor::{build_rooted_graph, max_arborescence, split_subtrees, ScoreMode, UnitForest};
use crate::error::{Error, Result};
use crate::nn::layers::{dense, init_dense, init_matrix, matrix};
use crate::nn::{ParamStore, Real, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposerConfig {
    /// Width of the pair scoring layers.
    pub hidden: usize,
    /// Candidate parents kept per child.
    pub k: usize,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        ProposerConfig { hidden: 256, k: 5 }
    }
}

impl ProposerConfig {
    pub fn full_scale() -> Self {
        ProposerConfig { hidden: 768, k: 5 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.k == 0 {
            return Err(Error::Config("proposer hidden and k must be positive".into()));
        }
        Ok(())
    }
}

/// Candidate parent `parent` for `child`, ranked `rank` (0-based) among the
/// child's candidates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelationProposal {
    pub child: usize,
    pub parent: usize,
    pub score: f64,
    pub rank: usize,
}

/// Pair scorer parameters under `name`: `relu(FC_q)`, `relu(FC_k)`, a hidden
/// layer over their concatenation (split into two matrices), and an output
/// layer.
pub fn init_pair_mlp<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, d: usize, h: usize, out: usize) {
    init_dense(store, rng, &format!("{name}.fq"), d, h);
    init_dense(store, rng, &format!("{name}.fk"), d, h);
    init_matrix(store, rng, &format!("{name}.hq"), h, h);
    init_dense(store, rng, &format!("{name}.hk"), h, h);
    init_dense(store, rng, &format!("{name}.out"), h, out);
}

/// Scores every `(parent, child)` pair; one output row per pair.
pub fn pair_mlp<T: Real>(tape: &mut Tape<'_, T>, f: Var, pairs: &[(usize, usize)], name: &str) -> Result<Var> {
    let q = dense(tape, f, &format!("{name}.fq"))?;
    let q = tape.relu(q);
    let k = dense(tape, f, &format!("{name}.fk"))?;
    let k = tape.relu(k);
    let a = matrix(tape, q, &format!("{name}.hq"))?;
    let b = dense(tape, k, &format!("{name}.hk"))?;
    let parents: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let children: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let pa = tape.gather_rows(a, &parents)?;
    let cb = tape.gather_rows(b, &children)?;
    let h = tape.add(pa, cb)?;
    let h = tape.relu(h);
    dense(tape, h, &format!("{name}.out"))
}

pub fn init_proposer<T: Real>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, d: usize, cfg: &ProposerConfig, n_types: usize) {
    init_pair_mlp(store, rng, "prop", d, cfg.hidden, 1);
    init_pair_mlp(store, rng, "cls", d, cfg.hidden, n_types);
}

/// All `N²` pairs, child-major: pair `j·N + i` is parent `i` of child `j`.
pub fn all_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|j| (0..n).map(move |i| (i, j))).collect()
}

/// `N×N` parent logits, row = child, column = candidate parent.
pub fn parent_logits<T: Real>(tape: &mut Tape<'_, T>, f: Var) -> Result<Var> {
    let n = tape.value(f).rows();
    let s = pair_mlp(tape, f, &all_pairs(n), "prop")?;
    tape.reshape(s, &[n, n])
}

/// Score matrix `R[i][j]` = probability that `i` is the parent of `j`
/// (columns sum to one), from child-major logits.
pub fn scores_from_logits<T: Real>(logits: &Tensor<T>) -> Tensor<f64> {
    let n = logits.rows();
    let mut r = Tensor::zeros(&[n, n]);
    for j in 0..n {
        let row: Vec<f64> = logits.row(j).iter().map(|x| x.to_f64().unwrap()).collect();
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let z: f64 = e.iter().sum();
        for (i, v) in e.into_iter().enumerate() {
            r.data_mut()[i * n + j] = v / z;
        }
    }
    r
}

/// Parent logits and their column-normalized score matrix.
pub fn score_parents<T: Real>(tape: &mut Tape<'_, T>, f: Var) -> Result<(Var, Tensor<f64>)> {
    let logits = parent_logits(tape, f)?;
    let r = scores_from_logits(tape.value(logits));
    Ok((logits, r))
}

/// The `min(K, N)` best parents of every child, child-major, ties to the lower
/// parent index.
pub fn top_k_proposals(r: &Tensor<f64>, k: usize) -> Vec<RelationProposal> {
    let n = r.rows();
    let kk = k.min(n);
    let mut out = Vec::with_capacity(n * kk);
    for j in 0..n {
        let mut cand: Vec<usize> = (0..n).collect();
        cand.sort_by(|&a, &b| r.at(b, j).total_cmp(&r.at(a, j)).then(a.cmp(&b)));
        for (rank, &i) in cand.iter().take(kk).enumerate() {
            out.push(RelationProposal {
                child: j,
                parent: i,
                score: r.at(i, j),
                rank,
            });
        }
    }
    out
}

/// `C` relation-type logits per `(parent, child)` pair.
pub fn classify_relations<T: Real>(tape: &mut Tape<'_, T>, f: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    pair_mlp(tape, f, pairs, "cls")
}

/// Type matrix `types[i][j]` from child-major logits over all `N²` pairs:
/// `root` on the diagonal, the best non-root type elsewhere.
pub fn type_matrix<T: Real>(logits: &Tensor<T>, n: usize, root: usize) -> Vec<Vec<usize>> {
    let mut types = vec![vec![root; n]; n];
    for j in 0..n {
        for i in 0..n {
            if i != j {
                types[i][j] = argmax_excluding(logits.row(j * n + i), root);
            }
        }
    }
    types
}

/// Index of the largest entry other than `skip`; ties to the lower index.
pub fn argmax_excluding<T: Real>(row: &[T], skip: usize) -> usize {
    let mut best = usize::MAX;
    for (c, &v) in row.iter().enumerate() {
        if c != skip && (best == usize::MAX || v > row[best]) {
            best = c;
        }
    }
    best
}

/// Unit trees from the maximum arborescence of `R`.
pub fn build_tree_proposals(r: &Tensor<f64>) -> Result<UnitForest> {
    let g = build_rooted_graph(r, ScoreMode::Log)?;
    Ok(split_subtrees(&max_arborescence(&g)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arbor::one_hot_scores;
    use rand::SeedableRng;

    fn r_cols(cols: &[&[f64]]) -> Tensor<f64> {
        let n = cols.len();
        let mut t = Tensor::zeros(&[n, n]);
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                t.data_mut()[i * n + j] = v;
            }
        }
        t
    }

    #[test]
    fn scores_are_column_stochastic() {
        let mut s = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        init_proposer(&mut s, &mut rng, 6, &ProposerConfig { hidden: 5, k: 2 }, 7);
        let mut t = Tape::with_params(&s);
        let f = t.constant(crate::nn::params::normal_like(&mut rng, &[4, 6], 1.0));
        let (_, r) = score_parents(&mut t, f).unwrap();
        for j in 0..4 {
            let col: f64 = (0..4).map(|i| r.at(i, j)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
        let f1 = t.constant(crate::nn::params::normal_like(&mut rng, &[1, 6], 1.0));
        let (_, r1) = score_parents(&mut t, f1).unwrap();
        assert_eq!(r1.data(), &[1.0]);
        let c = classify_relations(&mut t, f, &[(0, 1), (2, 2), (3, 0)]).unwrap();
        assert_eq!(t.value(c).shape(), &[3, 7]);
    }

    #[test]
    fn top_k_ordering_and_ties() {
        let r = r_cols(&[&[0.7, 0.2, 0.1], &[0.4, 0.2, 0.4], &[0.1, 0.1, 0.8]]);
        let p = top_k_proposals(&r, 2);
        assert_eq!(p.len(), 6);
        assert_eq!((p[0].parent, p[1].parent), (0, 1));
        assert_eq!((p[2].parent, p[3].parent), (0, 2));
        assert_eq!(p[3].rank, 1);
        assert_eq!(top_k_proposals(&r, 9).len(), 9);
    }

    #[test]
    fn tree_proposals_from_one_hot() {
        let (r, _) = one_hot_scores(&[0, 0, 1, 3], &[0, 1, 1, 0]);
        let f = build_tree_proposals(&r).unwrap();
        assert_eq!(f.parent, vec![None, Some(0), Some(1), None]);
        assert_eq!(f.trees, vec![vec![0, 1, 2], vec![3]]);
        assert_eq!(build_tree_proposals(&Tensor::full(&[1, 1], 1.0)).unwrap().len(), 1);
    }

    #[test]
    fn argmax_skips_root() {
        assert_eq!(argmax_excluding(&[9.0, 1.0, 3.0, 3.0], 0), 2);
    }
}
