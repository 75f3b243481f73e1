//! Ordered tree edit distance (Zhang–Shasha) and TEDS.

use crate::doc_model::{Document, HierTree};
use crate::error::{Error, Result};

/// Rooted, ordered, labeled tree stored as children lists (node 0 = root).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OrderedTree<L> {
    pub labels: Vec<L>,
    pub children: Vec<Vec<usize>>,
}

impl<L> OrderedTree<L> {
    pub fn leaf(label: L) -> Self {
        OrderedTree {
            labels: vec![label],
            children: vec![Vec::new()],
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Appends a node under `parent` (last child) and returns its index.
    pub fn push_child(&mut self, parent: usize, label: L) -> usize {
        self.labels.push(label);
        self.children.push(Vec::new());
        let id = self.labels.len() - 1;
        self.children[parent].push(id);
        id
    }

    /// Postorder sequence of node ids.
    pub fn postorder(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.len());
        let mut stack = vec![(0usize, false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                out.push(v);
            } else {
                stack.push((v, true));
                for &c in self.children[v].iter().rev() {
                    stack.push((c, false));
                }
            }
        }
        out
    }
}

/// Node label used for form trees: field role plus normalized member text.
pub type FieldLabel = (String, String);

/// Lowercases and collapses whitespace.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Converts a field hierarchy into an ordered tree whose children are sorted
/// by the reading order of their head units.
pub fn ordered_field_tree(tree: &HierTree, doc: &Document) -> OrderedTree<FieldLabel> {
    let ranks = doc.reading_ranks();
    let label = |head: usize| -> FieldLabel {
        let f = tree.field(head).expect("field");
        let text = f
            .members
            .iter()
            .map(|&u| doc.units[u].text.as_str())
            .collect::<Vec<_>>()
            .join(" ");
        (f.role.clone(), normalize_text(&text))
    };
    let mut out = OrderedTree::leaf(label(tree.root));
    let mut stack = vec![(tree.root, 0usize)];
    while let Some((head, node)) = stack.pop() {
        let mut kids: Vec<usize> = tree.children(head).map(|e| e.child).collect();
        kids.sort_by_key(|&h| ranks[h]);
        for k in kids {
            let id = out.push_child(node, label(k));
            stack.push((k, id));
        }
    }
    out
}

/// Zhang–Shasha tree edit distance with unit insert/delete/relabel costs.
pub fn tree_edit_distance<L: PartialEq>(a: &OrderedTree<L>, b: &OrderedTree<L>) -> usize {
    let pa = Prepared::new(a);
    let pb = Prepared::new(b);
    let (n, m) = (pa.len(), pb.len());
    if n == 0 || m == 0 {
        return n + m;
    }
    let mut td = vec![vec![0usize; m + 1]; n + 1];
    let mut fd = vec![vec![0usize; m + 2]; n + 2];
    for &i in &pa.keyroots {
        for &j in &pb.keyroots {
            let (li, lj) = (pa.lld[i], pb.lld[j]);
            // fd indices are offset: row r ↔ node li - 1 + r
            fd[0][0] = 0;
            for di in 1..=(i - li + 1) {
                fd[di][0] = fd[di - 1][0] + 1;
            }
            for dj in 1..=(j - lj + 1) {
                fd[0][dj] = fd[0][dj - 1] + 1;
            }
            for di in 1..=(i - li + 1) {
                let x = li + di - 1;
                for dj in 1..=(j - lj + 1) {
                    let y = lj + dj - 1;
                    let del = fd[di - 1][dj] + 1;
                    let ins = fd[di][dj - 1] + 1;
                    if pa.lld[x] == li && pb.lld[y] == lj {
                        let rel = usize::from(pa.labels[x] != pb.labels[y]);
                        let v = del.min(ins).min(fd[di - 1][dj - 1] + rel);
                        fd[di][dj] = v;
                        td[x][y] = v;
                    } else {
                        let (px, py) = (pa.lld[x] - li, pb.lld[y] - lj);
                        fd[di][dj] = del.min(ins).min(fd[px][py] + td[x][y]);
                    }
                }
            }
        }
    }
    td[n][m]
}

/// 1-based postorder view with leftmost-leaf descendants and keyroots.
struct Prepared<'t, L> {
    labels: Vec<&'t L>,
    lld: Vec<usize>,
    keyroots: Vec<usize>,
}

impl<'t, L> Prepared<'t, L> {
    fn new(t: &'t OrderedTree<L>) -> Self {
        if t.is_empty() {
            return Prepared {
                labels: Vec::new(),
                lld: vec![0],
                keyroots: Vec::new(),
            };
        }
        let post = t.postorder();
        let n = post.len();
        let mut pos = vec![0usize; n];
        for (k, &v) in post.iter().enumerate() {
            pos[v] = k + 1;
        }
        // labels[k] for 1-based k; index 0 unused (duplicate of first).
        let mut labels = Vec::with_capacity(n + 1);
        labels.push(&t.labels[post[0]]);
        labels.extend(post.iter().map(|&v| &t.labels[v]));
        let mut lld = vec![0usize; n + 1];
        for &v in &post {
            lld[pos[v]] = match t.children[v].first() {
                None => pos[v],
                Some(&c) => lld[pos[c]],
            };
        }
        let mut keyroots = Vec::new();
        for k in 1..=n {
            // k is a keyroot iff no later node shares its leftmost leaf.
            if !(k + 1..=n).any(|k2| lld[k2] == lld[k]) {
                keyroots.push(k);
            }
        }
        Prepared {
            labels,
            lld,
            keyroots,
        }
    }

    fn len(&self) -> usize {
        self.labels.len().saturating_sub(1)
    }
}

/// `1 − TED / max(|a|, |b|)`, floored at 0. Unit-cost TED can exceed the
/// larger size (a 3-chain against a 3-star costs 4), so the floor keeps the
/// score in `[0, 1]`.
pub fn teds_ordered<L: PartialEq>(a: &OrderedTree<L>, b: &OrderedTree<L>) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::InvalidForest("TEDS of an empty tree".into()));
    }
    let d = tree_edit_distance(a, b) as f64;
    Ok((1.0 - d / a.len().max(b.len()) as f64).max(0.0))
}

/// TEDS between two field hierarchies of the same document.
pub fn teds(pred: &HierTree, gt: &HierTree, doc: &Document) -> Result<f64> {
    teds_ordered(&ordered_field_tree(pred, doc), &ordered_field_tree(gt, doc))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tree(spec: &[(usize, &'static str)]) -> OrderedTree<&'static str> {
        // spec[k] = (parent index, label); spec[0] is the root.
        let mut t = OrderedTree::leaf(spec[0].1);
        for &(p, l) in &spec[1..] {
            t.push_child(p, l);
        }
        t
    }

    #[test]
    fn identical_trees_score_one() {
        let a = tree(&[(0, "a"), (0, "b"), (0, "c"), (1, "d")]);
        assert_eq!(tree_edit_distance(&a, &a), 0);
        assert_eq!(teds_ordered(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn distinct_single_nodes() {
        let (a, b) = (OrderedTree::leaf("x"), OrderedTree::leaf("y"));
        assert_eq!(tree_edit_distance(&a, &b), 1);
        assert_eq!(teds_ordered(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn distance_above_size_floors_at_zero() {
        let chain = tree(&[(0, "a"), (0, "b"), (1, "c")]);
        let star = tree(&[(0, "x"), (0, "y"), (0, "z")]);
        assert_eq!(tree_edit_distance(&chain, &star), 4);
        assert_eq!(teds_ordered(&chain, &star).unwrap(), 0.0);
    }

    #[test]
    fn classic_zhang_shasha_example() {
        // f(d(a c(b)) e) vs f(c(d(a b)) e): distance 2.
        let t1 = tree(&[(0, "f"), (0, "d"), (0, "e"), (1, "a"), (1, "c"), (4, "b")]);
        let t2 = tree(&[(0, "f"), (0, "c"), (0, "e"), (1, "d"), (3, "a"), (3, "b")]);
        assert_eq!(tree_edit_distance(&t1, &t2), 2);
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_text("  Date of\tBIRTH: "), "date of birth:");
    }
}
