//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use std::collections::{HashMap, HashSet, VecDeque};

use formtree_core::arbor::RootedScoreGraph;
use formtree_core::metrics::OrderedTree;
use formtree_core::nn::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------------------------------------------------------------------------
// Arborescences

/// Best total weight over every parent assignment that is acyclic, by
/// exhaustive enumeration. `None` entries point at the virtual root.
pub fn brute_force_arborescence(g: &RootedScoreGraph) -> (f64, Vec<Option<usize>>) {
    let n = g.n_units();
    let mut best = (f64::NEG_INFINITY, Vec::new());
    let mut cur = vec![None; n];
    enumerate(g, 0, &mut cur, &mut best);
    best
}

fn enumerate(g: &RootedScoreGraph, j: usize, cur: &mut Vec<Option<usize>>, best: &mut (f64, Vec<Option<usize>>)) {
    let n = cur.len();
    if j == n {
        if is_acyclic(cur) {
            let s = g.score(cur);
            if s > best.0 {
                *best = (s, cur.clone());
            }
        }
        return;
    }
    for p in std::iter::once(None).chain((0..n).filter(|&i| i != j).map(Some)) {
        cur[j] = p;
        enumerate(g, j + 1, cur, best);
    }
}

pub fn is_acyclic(parents: &[Option<usize>]) -> bool {
    let n = parents.len();
    (0..n).all(|start| {
        let mut v = start;
        for _ in 0..=n {
            match parents[v] {
                None => return true,
                Some(p) => v = p,
            }
        }
        false
    })
}

// ---------------------------------------------------------------------------
// Ordered trees

pub fn random_tree(rng: &mut ChaCha8Rng, max_nodes: usize, alphabet: u8) -> OrderedTree<u8> {
    let n = rng.random_range(1..=max_nodes);
    let mut t = OrderedTree::leaf(rng.random_range(0..alphabet));
    for _ in 1..n {
        let p = rng.random_range(0..t.len());
        t.push_child(p, rng.random_range(0..alphabet));
    }
    t
}

struct Info {
    /// Preorder rank of each node.
    pre: Vec<usize>,
    /// Size of each subtree.
    size: Vec<usize>,
}

fn info<L>(t: &OrderedTree<L>) -> Info {
    let n = t.len();
    let mut pre = vec![0; n];
    let mut size = vec![1; n];
    let mut order = Vec::with_capacity(n);
    let mut stack = vec![0];
    while let Some(v) = stack.pop() {
        pre[v] = order.len();
        order.push(v);
        for &c in t.children[v].iter().rev() {
            stack.push(c);
        }
    }
    for &v in order.iter().rev() {
        for &c in &t.children[v] {
            size[v] += size[c];
        }
    }
    Info { pre, size }
}

impl Info {
    fn is_ancestor(&self, a: usize, d: usize) -> bool {
        a != d && self.pre[a] < self.pre[d] && self.pre[d] < self.pre[a] + self.size[a]
    }

    /// `a` lies entirely left of `b`: neither contains the other and `a`
    /// comes first in preorder.
    fn left_of(&self, a: usize, b: usize) -> bool {
        self.pre[a] < self.pre[b] && !self.is_ancestor(a, b)
    }
}

/// Minimum-cost edit mapping found by enumerating every partial one-to-one
/// map that preserves ancestry and sibling order (unit costs).
pub fn ted_by_mappings<L: PartialEq>(a: &OrderedTree<L>, b: &OrderedTree<L>) -> usize {
    let (ia, ib) = (info(a), info(b));
    let mut used = vec![false; b.len()];
    let mut pairs = Vec::new();
    let mut best = a.len() + b.len();
    extend_mapping(a, b, &ia, &ib, 0, &mut used, &mut pairs, &mut best);
    best
}

#[allow(clippy::too_many_arguments)]
fn extend_mapping<L: PartialEq>(
    a: &OrderedTree<L>,
    b: &OrderedTree<L>,
    ia: &Info,
    ib: &Info,
    v: usize,
    used: &mut Vec<bool>,
    pairs: &mut Vec<(usize, usize)>,
    best: &mut usize,
) {
    if v == a.len() {
        let relabel = pairs.iter().filter(|&&(x, y)| a.labels[x] != b.labels[y]).count();
        let cost = relabel + (a.len() - pairs.len()) + (b.len() - pairs.len());
        *best = (*best).min(cost);
        return;
    }
    extend_mapping(a, b, ia, ib, v + 1, used, pairs, best);
    for w in 0..b.len() {
        if used[w] {
            continue;
        }
        let ok = pairs.iter().all(|&(x, y)| {
            ia.is_ancestor(x, v) == ib.is_ancestor(y, w)
                && ia.is_ancestor(v, x) == ib.is_ancestor(w, y)
                && ia.left_of(x, v) == ib.left_of(y, w)
                && ia.left_of(v, x) == ib.left_of(w, y)
        });
        if ok {
            used[w] = true;
            pairs.push((v, w));
            extend_mapping(a, b, ia, ib, v + 1, used, pairs, best);
            pairs.pop();
            used[w] = false;
        }
    }
}

/// Nested-list form of a tree, used as a canonical BFS state.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Node {
    pub label: u8,
    pub kids: Vec<Node>,
}

impl Node {
    pub fn from_tree(t: &OrderedTree<u8>) -> Node {
        fn go(t: &OrderedTree<u8>, v: usize) -> Node {
            Node {
                label: t.labels[v],
                kids: t.children[v].iter().map(|&c| go(t, c)).collect(),
            }
        }
        go(t, 0)
    }

    fn size(&self) -> usize {
        1 + self.kids.iter().map(Node::size).sum::<usize>()
    }
}

/// Paths to every node (child indices from the root).
fn paths(n: &Node, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
    out.push(prefix.clone());
    for (i, k) in n.kids.iter().enumerate() {
        prefix.push(i);
        paths(k, prefix, out);
        prefix.pop();
    }
}

fn at_mut<'a>(n: &'a mut Node, path: &[usize]) -> &'a mut Node {
    path.iter().fold(n, |cur, &i| &mut cur.kids[i])
}

/// Label of the virtual node holding a forest.
const SUPER: u8 = u8::MAX;

/// Every forest one edit away, for a forest held under a virtual node:
/// relabel a node, delete a node (splicing its children into its place), or
/// insert a node under some node, adopting a consecutive run of that node's
/// children.
fn neighbours(t: &Node, alphabet: u8) -> Vec<Node> {
    let mut ps = Vec::new();
    paths(t, &mut Vec::new(), &mut ps);
    let mut out = Vec::new();
    for p in &ps {
        for l in (0..alphabet).filter(|_| !p.is_empty()) {
            let mut c = t.clone();
            let node = at_mut(&mut c, p);
            if node.label != l {
                node.label = l;
                out.push(c);
            }
        }
        if let Some((&last, parent)) = p.split_last() {
            let mut c = t.clone();
            let par = at_mut(&mut c, parent);
            let gone = par.kids.remove(last);
            for (off, k) in gone.kids.into_iter().enumerate() {
                par.kids.insert(last + off, k);
            }
            out.push(c);
        }
        let nk = at_mut(&mut t.clone(), p).kids.len();
        for lo in 0..=nk {
            for hi in lo..=nk {
                for l in 0..alphabet {
                    let mut c = t.clone();
                    let par = at_mut(&mut c, p);
                    let adopted: Vec<Node> = par.kids.drain(lo..hi).collect();
                    par.kids.insert(lo, Node { label: l, kids: adopted });
                    out.push(c);
                }
            }
        }
    }
    out
}

/// Length of the shortest edit script from `a` to `b` by breadth-first
/// search over forests. Intermediate forests never exceed `max(|a|, |b|)`
/// nodes, which loses no optimal script since deletions can always be
/// scheduled before insertions.
pub fn ted_by_edit_scripts(a: &Node, b: &Node, alphabet: u8) -> usize {
    let wrap = |t: &Node| Node {
        label: SUPER,
        kids: vec![t.clone()],
    };
    let (a, b) = (&wrap(a), &wrap(b));
    let cap = a.size().max(b.size());
    let mut dist: HashMap<Node, usize> = HashMap::from([(a.clone(), 0)]);
    let mut queue = VecDeque::from([a.clone()]);
    while let Some(t) = queue.pop_front() {
        let d = dist[&t];
        if &t == b {
            return d;
        }
        for nb in neighbours(&t, alphabet) {
            if nb.size() <= cap && !dist.contains_key(&nb) {
                dist.insert(nb.clone(), d + 1);
                queue.push_back(nb);
            }
        }
    }
    unreachable!("every tree is reachable by edits")
}

// ---------------------------------------------------------------------------
// Finite differences

pub const FD_STEP: f64 = 1e-6;

/// Norm-wise relative error between two gradients. A gradient that is
/// identically zero (analytic norm below `1e-8`) passes when the finite
/// difference is at roundoff level.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    if na < 1e-8 && nn < 1e-6 {
        return 0.0;
    }
    diff / na.max(nn)
}

/// Scalar `Σ y ⊙ W` for a fixed random `W`, turning any output into a loss
/// with a dense gradient.
pub fn project(tape: &mut Tape<'_, f64>, y: Var, w: &Tensor<f64>) -> Var {
    let w = tape.constant(w.clone());
    let p = tape.mul(y, w).expect("projection shape");
    tape.sum(p)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Worst relative error over the input tensors of `f`.
pub fn check_inputs(inputs: &[Tensor<f64>], f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |xs: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.input(t.clone())).collect();
        let l = f(&mut tape, &vars);
        tape.value(l).item()
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map_or_else(|| vec![0.0; inputs[i].len()], |g| g.data().to_vec());
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut xs = inputs.to_vec();
        for e in 0..inputs[i].len() {
            let x0 = inputs[i].data()[e];
            xs[i].data_mut()[e] = x0 + FD_STEP;
            let up = eval(&xs);
            xs[i].data_mut()[e] = x0 - FD_STEP;
            let down = eval(&xs);
            xs[i].data_mut()[e] = x0;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}

/// Worst relative error over every parameter tensor of `store` and every
/// input tensor; `f` builds the loss on a tape bound to the store.
pub fn check_params(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: impl Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
) -> (f64, String) {
    let mut tape = Tape::with_params(store);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &vars);
    let grads = tape.backward(loss).unwrap();
    let eval = |s: &ParamStore<f64>, xs: &[Tensor<f64>]| {
        let mut tape = Tape::with_params(s);
        let vars: Vec<Var> = xs.iter().map(|t| tape.input(t.clone())).collect();
        let l = f(&mut tape, &vars);
        tape.value(l).item()
    };
    let mut worst = (0.0f64, String::new());
    let mut s = store.clone();
    for name in store.names().map(str::to_string).collect::<Vec<_>>() {
        let analytic = grads.params()[&name].data().to_vec();
        let mut numeric = Vec::with_capacity(analytic.len());
        for e in 0..analytic.len() {
            let x0 = store.get(&name).unwrap().data()[e];
            s.get_mut(&name).unwrap().data_mut()[e] = x0 + FD_STEP;
            let up = eval(&s, inputs);
            s.get_mut(&name).unwrap().data_mut()[e] = x0 - FD_STEP;
            let down = eval(&s, inputs);
            s.get_mut(&name).unwrap().data_mut()[e] = x0;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let r = rel_err(&analytic, &numeric);
        if r > worst.0 {
            worst = (r, name);
        }
    }
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .map_or_else(|| vec![0.0; inputs[i].len()], |g| g.data().to_vec());
        let mut numeric = Vec::with_capacity(analytic.len());
        let mut xs = inputs.to_vec();
        for e in 0..inputs[i].len() {
            let x0 = inputs[i].data()[e];
            xs[i].data_mut()[e] = x0 + FD_STEP;
            let up = eval(store, &xs);
            xs[i].data_mut()[e] = x0 - FD_STEP;
            let down = eval(store, &xs);
            xs[i].data_mut()[e] = x0;
            numeric.push((up - down) / (2.0 * FD_STEP));
        }
        let r = rel_err(&analytic, &numeric);
        if r > worst.0 {
            worst = (r, format!("input {i}"));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Tree masks

/// Random forest parent array (`None` = root) over `n` units.
pub fn random_parents(rng: &mut ChaCha8Rng, n: usize, p_root: f64) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.random_range(0..=i));
    }
    let mut parents = vec![None; n];
    for (pos, &u) in order.iter().enumerate() {
        if pos > 0 && !rng.random_bool(p_root) {
            parents[u] = Some(order[rng.random_range(0..pos)]);
        }
    }
    parents
}

/// Root unit and depth of every unit, by walking parent pointers.
pub fn roots_and_depths(parents: &[Option<usize>]) -> (Vec<usize>, Vec<usize>) {
    parents
        .iter()
        .enumerate()
        .map(|(u, _)| {
            let (mut v, mut d) = (u, 0);
            while let Some(p) = parents[v] {
                v = p;
                d += 1;
            }
            (v, d)
        })
        .unzip()
}

/// Units each proposal's refined embedding may depend on after `layers`
/// decoder layers: its endpoints, the units its cross mask admits, and
/// transitively whatever the proposals its self mask admits depend on.
pub fn receptive_fields(
    endpoints: &[(usize, usize)],
    self_allowed: &dyn Fn(usize, usize) -> bool,
    cross_allowed: &dyn Fn(usize, usize) -> bool,
    n_units: usize,
    layers: usize,
) -> Vec<HashSet<usize>> {
    let np = endpoints.len();
    let mut dep: Vec<HashSet<usize>> = endpoints.iter().map(|&(a, b)| HashSet::from([a, b])).collect();
    for _ in 0..layers {
        let prev = dep.clone();
        for p in 0..np {
            for q in 0..np {
                if self_allowed(p, q) {
                    dep[p].extend(prev[q].iter().copied());
                }
            }
            dep[p].extend((0..n_units).filter(|&u| cross_allowed(p, u)));
        }
    }
    dep
}
