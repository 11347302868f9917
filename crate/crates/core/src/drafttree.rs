//! Static speculation trees.
//!
//! The root of every tree is the last committed token and carries no draft
//! token; nodes are stored flattened in breadth-first order with children in
//! expansion-priority order, so `parent[i] < i` for every node.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::BoolMatrix;

/// Upper bound on nodes in a single tree.
pub const MAX_TREE_NODES: usize = 4096;

/// Parent of a node: the root sentinel or another node's flattened index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Parent {
    Root,
    Node(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeSpec {
    parents: Vec<Parent>,
    depths: Vec<usize>,
    root_children: Vec<usize>,
    children: Vec<Vec<usize>>,
    label: String,
}

impl TreeSpec {
    /// Builds a tree from an explicit parent array. `None` marks children of the root.
    ///
    /// Nodes are re-ordered breadth-first (stable within a level, so earlier
    /// siblings keep their priority); `parents` itself need only list every
    /// parent before its children.
    pub fn from_parents(parents: &[Option<usize>]) -> Result<Self> {
        if parents.is_empty() {
            return Err(Error::InvalidTree("tree needs at least one node".into()));
        }
        if parents.len() > MAX_TREE_NODES {
            return Err(Error::InvalidTree(format!(
                "{} nodes exceeds the limit of {MAX_TREE_NODES}",
                parents.len()
            )));
        }
        let mut depth = vec![0usize; parents.len()];
        for (i, p) in parents.iter().enumerate() {
            depth[i] = match *p {
                None => 1,
                Some(p) if p < i => depth[p] + 1,
                Some(p) => {
                    return Err(Error::InvalidTree(format!(
                        "node {i} lists parent {p}, which does not precede it"
                    )))
                }
            };
        }
        // Stable BFS re-ordering: children in input order under their parent.
        let mut kids: Vec<Vec<usize>> = vec![Vec::new(); parents.len()];
        let mut roots = Vec::new();
        for (i, p) in parents.iter().enumerate() {
            match p {
                None => roots.push(i),
                Some(p) => kids[*p].push(i),
            }
        }
        let mut order = Vec::with_capacity(parents.len());
        let mut frontier = roots;
        while !frontier.is_empty() {
            let mut next = Vec::new();
            for &n in &frontier {
                order.push(n);
                next.extend_from_slice(&kids[n]);
            }
            frontier = next;
        }
        let mut new_index = vec![0usize; parents.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }
        let flat: Vec<Parent> = order
            .iter()
            .map(|&old| match parents[old] {
                None => Parent::Root,
                Some(p) => Parent::Node(new_index[p]),
            })
            .collect();
        let label = format!(
            "nodes:[{}]",
            flat.iter()
                .map(|p| match p {
                    Parent::Root => "-1".to_string(),
                    Parent::Node(i) => i.to_string(),
                })
                .collect::<Vec<_>>()
                .join(",")
        );
        Ok(Self::from_flat(flat, label))
    }

    fn from_flat(parents: Vec<Parent>, label: String) -> Self {
        let n = parents.len();
        let mut depths = vec![0usize; n];
        let mut children = vec![Vec::new(); n];
        let mut root_children = Vec::new();
        for (i, p) in parents.iter().enumerate() {
            match *p {
                Parent::Root => {
                    depths[i] = 1;
                    root_children.push(i);
                }
                Parent::Node(p) => {
                    depths[i] = depths[p] + 1;
                    children[p].push(i);
                }
            }
        }
        Self {
            parents,
            depths,
            root_children,
            children,
            label,
        }
    }

    pub fn len(&self) -> usize {
        self.parents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parents.is_empty()
    }

    pub fn parent(&self, node: usize) -> Parent {
        self.parents[node]
    }

    pub fn parents(&self) -> &[Parent] {
        &self.parents
    }

    pub fn depth(&self, node: usize) -> usize {
        self.depths[node]
    }

    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    pub fn max_depth(&self) -> usize {
        self.depths.iter().copied().max().unwrap_or(0)
    }

    /// Children of `parent` in priority order.
    pub fn children(&self, parent: Parent) -> &[usize] {
        match parent {
            Parent::Root => &self.root_children,
            Parent::Node(i) => &self.children[i],
        }
    }

    /// Nodes at the given depth, in flattened order.
    pub fn nodes_at_depth(&self, depth: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.depths[i] == depth).collect()
    }

    pub fn is_leaf(&self, node: usize) -> bool {
        self.children[node].is_empty()
    }

    /// Ancestors of `node` from the root side down, including `node` itself.
    pub fn path_to(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Parent::Node(p) = self.parents[cur] {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }

    /// Keeps only the nodes accepted by `keep`; a dropped node drops its subtree.
    pub fn retain(&self, mut keep: impl FnMut(usize) -> bool) -> Option<TreeSpec> {
        let mut alive = vec![false; self.len()];
        for i in 0..self.len() {
            let parent_ok = match self.parents[i] {
                Parent::Root => true,
                Parent::Node(p) => alive[p],
            };
            alive[i] = parent_ok && keep(i);
        }
        if alive.iter().all(|&a| a) {
            return Some(self.clone());
        }
        let mut remap = vec![usize::MAX; self.len()];
        let mut flat = Vec::new();
        for i in 0..self.len() {
            if alive[i] {
                remap[i] = flat.len();
                flat.push(match self.parents[i] {
                    Parent::Root => Parent::Root,
                    Parent::Node(p) => Parent::Node(remap[p]),
                });
            }
        }
        if flat.is_empty() {
            return None;
        }
        let label = format!("{}~{}", self.label, flat.len());
        Some(TreeSpec::from_flat(flat, label))
    }

    /// Short identifier used in reports, e.g. `chain:3` or `full:2,2`.
    pub fn label(&self) -> &str {
        &self.label
    }
}

impl fmt::Display for TreeSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label)
    }
}

pub fn build_chain(length: usize) -> Result<TreeSpec> {
    if length == 0 {
        return Err(Error::InvalidTree("chain length must be >= 1".into()));
    }
    if length > MAX_TREE_NODES {
        return Err(Error::InvalidTree(format!("chain of {length} too long")));
    }
    let parents = (0..length)
        .map(|i| if i == 0 { Parent::Root } else { Parent::Node(i - 1) })
        .collect();
    Ok(TreeSpec::from_flat(parents, format!("chain:{length}")))
}

/// Complete tree of the given depth where every non-leaf node has `branching` children.
pub fn build_full_tree(depth: usize, branching: usize) -> Result<TreeSpec> {
    if depth == 0 || branching == 0 {
        return Err(Error::InvalidTree(
            "full tree needs depth >= 1 and branching >= 1".into(),
        ));
    }
    let mut total = 0usize;
    let mut level = 1usize;
    for _ in 0..depth {
        level = level.saturating_mul(branching);
        total = total.saturating_add(level);
    }
    if total > MAX_TREE_NODES {
        return Err(Error::InvalidTree(format!(
            "D{depth}-BF{branching} has {total} nodes, limit is {MAX_TREE_NODES}"
        )));
    }
    let mut parents = Vec::with_capacity(total);
    let mut prev_level: Vec<Option<usize>> = vec![None];
    for _ in 0..depth {
        let mut this_level = Vec::new();
        for p in &prev_level {
            for _ in 0..branching {
                this_level.push(Some(parents.len()));
                parents.push(match p {
                    None => Parent::Root,
                    Some(i) => Parent::Node(*i),
                });
            }
        }
        prev_level = this_level;
    }
    let label = if branching == 1 {
        format!("chain:{depth}")
    } else {
        format!("full:{depth},{branching}")
    };
    Ok(TreeSpec::from_flat(parents, label))
}

/// Ancestor-or-self visibility between tree nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SuffixMask(BoolMatrix);

impl SuffixMask {
    pub fn matrix(&self) -> &BoolMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> BoolMatrix {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.0.get(i, j)
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

pub fn suffix_mask(tree: &TreeSpec) -> SuffixMask {
    let n = tree.len();
    let mut m = BoolMatrix::new(n, n, false);
    for i in 0..n {
        m.set(i, i, true);
        if let Parent::Node(p) = tree.parent(i) {
            // parent row is complete because p < i
            for j in 0..=p {
                if m.get(p, j) {
                    m.set(i, j, true);
                }
            }
        }
    }
    SuffixMask(m)
}

/// Visibility for a forward pass whose inputs are the root token followed by
/// every tree node: row/column 0 is the root, row/column `i + 1` is node `i`.
pub fn rooted_mask(tree: &TreeSpec) -> BoolMatrix {
    let inner = suffix_mask(tree);
    let n = tree.len() + 1;
    BoolMatrix::from_fn(n, n, |r, c| match (r, c) {
        (_, 0) => true,
        (0, _) => false,
        (r, c) => inner.get(r - 1, c - 1),
    })
}

/// Root-to-leaf node paths, ordered by child priority.
pub fn paths(tree: &TreeSpec) -> Vec<Vec<usize>> {
    fn walk(tree: &TreeSpec, node: usize, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        prefix.push(node);
        let kids = tree.children(Parent::Node(node));
        if kids.is_empty() {
            out.push(prefix.clone());
        } else {
            for &k in kids {
                walk(tree, k, prefix, out);
            }
        }
        prefix.pop();
    }
    let mut out = Vec::new();
    for &r in tree.children(Parent::Root) {
        walk(tree, r, &mut Vec::new(), &mut out);
    }
    out
}

/// Text form: `chain:L`, `full:D,BF`, or `nodes:[p0,p1,...]` with `-1` for root children.
impl FromStr for TreeSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (kind, body) = s
            .split_once(':')
            .ok_or_else(|| Error::Config(format!("tree spec `{s}` lacks a `kind:` prefix")))?;
        let bad = |what: &str| Error::Config(format!("tree spec `{s}`: {what}"));
        match kind.trim() {
            "chain" => build_chain(body.trim().parse().map_err(|_| bad("bad length"))?),
            "full" => {
                let (d, b) = body.split_once(',').ok_or_else(|| bad("expected D,BF"))?;
                build_full_tree(
                    d.trim().parse().map_err(|_| bad("bad depth"))?,
                    b.trim().parse().map_err(|_| bad("bad branching"))?,
                )
            }
            "nodes" => {
                let inner = body
                    .trim()
                    .strip_prefix('[')
                    .and_then(|b| b.strip_suffix(']'))
                    .ok_or_else(|| bad("expected [..]"))?;
                let parents = inner
                    .split(',')
                    .map(|t| {
                        let v: i64 = t.trim().parse().map_err(|_| bad("bad parent index"))?;
                        Ok(if v < 0 { None } else { Some(v as usize) })
                    })
                    .collect::<Result<Vec<_>>>()?;
                TreeSpec::from_parents(&parents)
            }
            other => Err(bad(&format!("unknown kind `{other}`"))),
        }
    }
}

impl Serialize for TreeSpec {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.label)
    }
}

impl<'de> Deserialize<'de> for TreeSpec {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Batch-size keyed tree choice.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DispatchTable {
    entries: Vec<(usize, TreeSpec)>,
}

impl DispatchTable {
    /// `entries` are `(max_batch_size, tree)` with strictly increasing
    /// thresholds. The last entry also covers every larger batch.
    pub fn new(entries: Vec<(usize, TreeSpec)>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Config("dispatch table must not be empty".into()));
        }
        if entries.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Config(
                "dispatch thresholds must be strictly increasing".into(),
            ));
        }
        Ok(Self { entries })
    }

    pub fn single(tree: TreeSpec) -> Self {
        Self {
            entries: vec![(usize::MAX, tree)],
        }
    }

    pub fn entries(&self) -> &[(usize, TreeSpec)] {
        &self.entries
    }

    /// Index of the entry serving `batch_size`.
    pub fn entry_index(&self, batch_size: usize) -> usize {
        self.entries
            .iter()
            .position(|(max, _)| batch_size <= *max)
            .unwrap_or(self.entries.len() - 1)
    }

    pub fn dispatch(&self, batch_size: usize) -> &TreeSpec {
        &self.entries[self.entry_index(batch_size)].1
    }
}

pub fn dispatch(table: &DispatchTable, batch_size: usize) -> &TreeSpec {
    table.dispatch(batch_size)
}
