//! Relation decoding: parent scores → maximum spanning arborescence over a
//! virtual root → unit trees → field hierarchies.

use serde::{Deserialize, Serialize};

use crate::doc_model::{assemble_tree, Assembled, Forest, RelId, RelationLabelSet};
use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Scores below this are clamped before taking logs.
pub const SCORE_FLOOR: f64 = 1e-12;

/// How parent probabilities become edge weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    /// Sum of log-probabilities (joint likelihood of the parent assignment).
    #[default]
    Log,
    /// Sum of raw probabilities.
    Raw,
}

/// Complete directed graph over the virtual root (node 0) and units
/// (node `j + 1` for unit `j`). `weight(i, j)` is `NEG_INFINITY` where no
/// edge exists: self-loops and edges into the root.
#[derive(Clone, Debug, PartialEq)]
pub struct RootedScoreGraph {
    n_units: usize,
    w: Vec<f64>,
}

impl RootedScoreGraph {
    pub fn n_units(&self) -> usize {
        self.n_units
    }

    pub fn n_nodes(&self) -> usize {
        self.n_units + 1
    }

    pub fn weight(&self, from: usize, to: usize) -> f64 {
        self.w[from * self.n_nodes() + to]
    }

    /// Number of finite edges.
    pub fn edge_count(&self) -> usize {
        self.w.iter().filter(|w| w.is_finite()).count()
    }

    /// Total weight of a parent assignment (`None` = virtual root).
    pub fn score(&self, parents: &[Option<usize>]) -> f64 {
        parents
            .iter()
            .enumerate()
            .map(|(j, p)| self.weight(p.map_or(0, |i| i + 1), j + 1))
            .sum()
    }
}

fn edge_weight(score: f64, mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::Log => score.max(SCORE_FLOOR).ln(),
        ScoreMode::Raw => score,
    }
}

/// Builds the rooted graph from `R[i][j]` = P(unit i is the parent of unit j).
/// Self scores `R[j][j]` become root→j edges.
pub fn build_rooted_graph(r: &Tensor<f64>, mode: ScoreMode) -> Result<RootedScoreGraph> {
    let n = r.rows();
    if r.shape().len() != 2 || r.cols() != n {
        return Err(Error::Shape {
            op: "build_rooted_graph",
            detail: format!("score matrix must be square, got {:?}", r.shape()),
        });
    }
    let m = n + 1;
    let mut w = vec![f64::NEG_INFINITY; m * m];
    for j in 0..n {
        w[j + 1] = edge_weight(r.at(j, j), mode);
        for i in 0..n {
            if i != j {
                w[(i + 1) * m + j + 1] = edge_weight(r.at(i, j), mode);
            }
        }
    }
    Ok(RootedScoreGraph { n_units: n, w })
}

/// Maximum spanning arborescence rooted at the virtual node (Chu–Liu/Edmonds).
///
/// Returns each unit's parent, `None` meaning the virtual root. Ties prefer
/// the root, then the lower parent index.
pub fn max_arborescence(g: &RootedScoreGraph) -> Vec<Option<usize>> {
    let m = g.n_nodes();
    let w: Vec<Vec<f64>> = (0..m).map(|i| g.w[i * m..(i + 1) * m].to_vec()).collect();
    let parent = chu_liu_edmonds(&w);
    parent[1..]
        .iter()
        .map(|&p| if p == 0 { None } else { Some(p - 1) })
        .collect()
}

/// Dense Chu–Liu/Edmonds with root 0; returns `parent[v]` (`parent[0] = 0`).
fn chu_liu_edmonds(w: &[Vec<f64>]) -> Vec<usize> {
    let n = w.len();
    let mut best = vec![0usize; n];
    for v in 1..n {
        let mut b = usize::MAX;
        let mut bw = f64::NEG_INFINITY;
        for u in 0..n {
            if u != v && w[u][v] > bw {
                bw = w[u][v];
                b = u;
            }
        }
        // Unreachable nodes (all weights -inf) fall back to the root.
        best[v] = if b == usize::MAX { 0 } else { b };
    }

    let Some(cycle) = find_cycle(&best) else {
        return best;
    };
    let in_cycle: Vec<bool> = (0..n).map(|v| cycle.contains(&v)).collect();

    // Contracted graph: surviving nodes keep their relative order, the
    // cycle becomes the last node.
    let outside: Vec<usize> = (0..n).filter(|&v| !in_cycle[v]).collect();
    let c = outside.len();
    let nn = c + 1;
    let mut cw = vec![vec![f64::NEG_INFINITY; nn]; nn];
    // enter_via[u'] = cycle node entered by the best edge u→cycle
    let mut enter_via = vec![usize::MAX; nn];
    // leave_from[v'] = cycle node that is the source of the best edge cycle→v
    let mut leave_from = vec![usize::MAX; nn];
    for (ai, &a) in outside.iter().enumerate() {
        for (bi, &b) in outside.iter().enumerate() {
            if a != b {
                cw[ai][bi] = w[a][b];
            }
        }
        for &v in &cycle {
            let adj = w[a][v] - w[best[v]][v];
            if w[a][v] > f64::NEG_INFINITY && (enter_via[ai] == usize::MAX || adj > cw[ai][c]) {
                cw[ai][c] = adj;
                enter_via[ai] = v;
            }
        }
        for &u in &cycle {
            if w[u][a] > cw[c][ai] {
                cw[c][ai] = w[u][a];
                leave_from[ai] = u;
            }
        }
    }
    // The root (index 0) is never in a cycle, so it stays at index 0.
    debug_assert_eq!(outside[0], 0);

    let sub = chu_liu_edmonds(&cw);

    let mut parent = best.clone();
    for (vi, &v) in outside.iter().enumerate().skip(1) {
        let p = sub[vi];
        parent[v] = if p == c { leave_from[vi] } else { outside[p] };
    }
    let entry_src = sub[c];
    let entered = match enter_via[entry_src] {
        usize::MAX => cycle[0],
        v => v,
    };
    parent[entered] = outside[entry_src];
    parent
}

fn find_cycle(parent: &[usize]) -> Option<Vec<usize>> {
    let n = parent.len();
    let mut color = vec![0u8; n]; // 0 new, 1 on current walk, 2 done
    for start in 1..n {
        if color[start] != 0 {
            continue;
        }
        let mut path = Vec::new();
        let mut v = start;
        while v != 0 && color[v] == 0 {
            color[v] = 1;
            path.push(v);
            v = parent[v];
        }
        if v != 0 && color[v] == 1 {
            let pos = path.iter().position(|&x| x == v).expect("on path");
            let mut cycle = path[pos..].to_vec();
            cycle.sort_unstable();
            return Some(cycle);
        }
        for p in path {
            color[p] = 2;
        }
    }
    None
}

/// Unit-level forest obtained by splitting an arborescence at the root.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitForest {
    /// Parent of each unit; `None` for tree roots.
    pub parent: Vec<Option<usize>>,
    /// Tree index of each unit.
    pub tree_of: Vec<usize>,
    /// Depth below the tree root (root = 0).
    pub depth: Vec<usize>,
    /// Sorted members of each tree, trees ordered by root unit.
    pub trees: Vec<Vec<usize>>,
}

impl UnitForest {
    pub fn len(&self) -> usize {
        self.trees.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trees.is_empty()
    }

    pub fn root_of_tree(&self, t: usize) -> usize {
        self.trees[t]
            .iter()
            .copied()
            .find(|&u| self.parent[u].is_none())
            .expect("tree has a root")
    }

    /// Self-parented array (roots point to themselves).
    pub fn self_parented(&self) -> Vec<usize> {
        self.parent
            .iter()
            .enumerate()
            .map(|(j, p)| p.unwrap_or(j))
            .collect()
    }
}

/// One tree per child of the virtual root.
pub fn split_subtrees(parents: &[Option<usize>]) -> UnitForest {
    let n = parents.len();
    let mut root = vec![usize::MAX; n];
    let mut depth = vec![0usize; n];
    for u in 0..n {
        let mut cur = u;
        let mut d = 0;
        while let Some(p) = parents[cur] {
            cur = p;
            d += 1;
            assert!(d <= n, "parent array contains a cycle");
        }
        root[u] = cur;
        depth[u] = d;
    }
    let mut roots: Vec<usize> = (0..n).filter(|&u| parents[u].is_none()).collect();
    roots.sort_unstable();
    let mut tree_index = vec![usize::MAX; n];
    for (t, &r) in roots.iter().enumerate() {
        tree_index[r] = t;
    }
    let tree_of: Vec<usize> = (0..n).map(|u| tree_index[root[u]]).collect();
    let mut trees = vec![Vec::new(); roots.len()];
    for u in 0..n {
        trees[tree_of[u]].push(u);
    }
    UnitForest {
        parent: parents.to_vec(),
        tree_of,
        depth,
        trees,
    }
}

/// Field hierarchy of one unit tree. Root-child edges are typed `root`;
/// every other edge takes its type from `types[parent][child]`.
pub fn assemble_hierarchy(
    forest: &UnitForest,
    tree: usize,
    types: &[Vec<RelId>],
    labels: &RelationLabelSet,
) -> Assembled {
    let parent = forest.self_parented();
    let rel = edge_types(&forest.parent, types, labels);
    assemble_tree(&forest.trees[tree], &parent, &rel, labels)
}

fn edge_types(parents: &[Option<usize>], types: &[Vec<RelId>], labels: &RelationLabelSet) -> Vec<RelId> {
    parents
        .iter()
        .enumerate()
        .map(|(j, p)| match p {
            None => labels.root(),
            Some(i) => types[*i][j],
        })
        .collect()
}

/// Output of the full decoding algorithm.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub parents: Vec<Option<usize>>,
    /// Log-domain (or raw) total score of the arborescence.
    pub score: f64,
    pub units: UnitForest,
    pub forest: Forest,
    pub diagnostics: Vec<String>,
}

impl Decoded {
    /// Self-parented parent array plus relation ids, as unified labels.
    pub fn labels(&self, types: &[Vec<RelId>], labels: &RelationLabelSet) -> (Vec<usize>, Vec<RelId>) {
        (self.units.self_parented(), edge_types(&self.parents, types, labels))
    }
}

/// Full relation decoding of score matrix `r` and relation-type matrix
/// `types` (`types[i][j]` = type of edge i→j).
pub fn decode(
    r: &Tensor<f64>,
    types: &[Vec<RelId>],
    labels: &RelationLabelSet,
    mode: ScoreMode,
) -> Result<Decoded> {
    let g = build_rooted_graph(r, mode)?;
    if types.len() != g.n_units() || types.iter().any(|row| row.len() != g.n_units()) {
        return Err(Error::Shape {
            op: "decode",
            detail: format!("type matrix must be {0}x{0}", g.n_units()),
        });
    }
    if let Some(&bad) = types.iter().flatten().find(|&&t| t >= labels.len()) {
        return Err(Error::InvalidLabels(format!("relation id {bad} out of range")));
    }
    let parents = max_arborescence(&g);
    Ok(finish(&g, parents, types, labels))
}

pub(crate) fn finish(
    g: &RootedScoreGraph,
    parents: Vec<Option<usize>>,
    types: &[Vec<RelId>],
    labels: &RelationLabelSet,
) -> Decoded {
    let score = g.score(&parents);
    let units = split_subtrees(&parents);
    let mut trees = Vec::with_capacity(units.len());
    let mut diagnostics = Vec::new();
    for t in 0..units.len() {
        let a = assemble_hierarchy(&units, t, types, labels);
        diagnostics.extend(a.diagnostics);
        trees.push(a.tree);
    }
    Decoded {
        parents,
        score,
        units,
        forest: Forest::new(trees),
        diagnostics,
    }
}

/// One-hot score and type matrices encoding the given labels.
pub fn one_hot_scores(parent: &[usize], rel: &[RelId]) -> (Tensor<f64>, Vec<Vec<RelId>>) {
    let n = parent.len();
    let mut r = Tensor::zeros(&[n, n]);
    let mut types = vec![vec![0; n]; n];
    for j in 0..n {
        r.data_mut()[parent[j] * n + j] = 1.0;
        types[parent[j]][j] = rel[j];
    }
    (r, types)
}
