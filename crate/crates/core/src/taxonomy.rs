//! Object-class taxonomy over a hypernym graph: reachability clustering of
//! class names, per-cluster tree construction by shortest hypernym path, and
//! merging trees under their closest common hypernym.

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 60-node single-rooted hypernym graph used by tests and the CLI fixture.
pub const TOY_GRAPH_TSV: &str = include_str!("../fixtures/toy_hypernyms.tsv");
/// Polysemy correction for the toy graph (`banana` the fruit, not the herb).
pub const TOY_OVERRIDES_TSV: &str = include_str!("../fixtures/toy_overrides.tsv");

/// Directed hypernym graph (child -> parent edges).
#[derive(Debug, Clone, Default)]
pub struct TaxonomyGraph {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    level: Vec<usize>,
    component: Vec<usize>,
    declared: Vec<usize>,
    edges: Vec<(usize, usize)>,
}

impl TaxonomyGraph {
    /// Parses `child<TAB>parent` lines. A line with a single name declares a
    /// node without parents; blank lines and `#` comments are ignored.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut edges = Vec::new();
        let mut lone = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            match cols.as_slice() {
                [node] if !node.is_empty() => lone.push(node.to_string()),
                [child, parent] if !child.is_empty() && !parent.is_empty() => {
                    edges.push((child.to_string(), parent.to_string()))
                }
                _ => {
                    return Err(Error::Graph(format!("line {}: expected `child<TAB>parent`, got {line:?}", lineno + 1)))
                }
            }
        }
        Self::from_edges(lone, edges)
    }

    pub fn from_edges<I>(nodes: I, edges: Vec<(String, String)>) -> Result<Self>
    where
        I: IntoIterator<Item = String>,
    {
        let mut g = TaxonomyGraph::default();
        for n in nodes {
            let i = g.intern(&n);
            if !g.declared.contains(&i) {
                g.declared.push(i);
            }
        }
        for (c, p) in &edges {
            let (ci, pi) = (g.intern(c), g.intern(p));
            if ci == pi {
                return Err(Error::Graph(format!("self-loop on {c}")));
            }
            if !g.parents[ci].contains(&pi) {
                g.parents[ci].push(pi);
                g.children[pi].push(ci);
                g.edges.push((ci, pi));
            }
        }
        g.compute_levels()?;
        g.compute_components();
        Ok(g)
    }

    fn intern(&mut self, name: &str) -> usize {
        if let Some(&i) = self.index.get(name) {
            return i;
        }
        let i = self.names.len();
        self.names.push(name.to_string());
        self.index.insert(name.to_string(), i);
        self.parents.push(Vec::new());
        self.children.push(Vec::new());
        i
    }

    /// Level = shortest upward distance to a root; also rejects cycles.
    fn compute_levels(&mut self) -> Result<()> {
        let n = self.names.len();
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut queue: VecDeque<usize> = (0..n).filter(|&i| indegree[i] == 0).collect();
        let mut level = vec![usize::MAX; n];
        queue.iter().for_each(|&r| level[r] = 0);
        let mut seen = 0;
        while let Some(u) = queue.pop_front() {
            seen += 1;
            for &c in &self.children[u] {
                level[c] = level[c].min(level[u] + 1);
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    queue.push_back(c);
                }
            }
        }
        if seen != n {
            return Err(Error::Graph("hypernym graph contains a cycle".into()));
        }
        self.level = level;
        Ok(())
    }

    fn compute_components(&mut self) {
        let n = self.names.len();
        let mut comp = vec![usize::MAX; n];
        let mut next = 0;
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            let mut stack = vec![s];
            comp[s] = next;
            while let Some(u) = stack.pop() {
                for &v in self.parents[u].iter().chain(&self.children[u]) {
                    if comp[v] == usize::MAX {
                        comp[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        self.component = comp;
    }

    /// Declared nodes, then edges, in input order with duplicates dropped.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for &n in &self.declared {
            let _ = writeln!(out, "{}", self.names[n]);
        }
        for &(c, p) in &self.edges {
            let _ = writeln!(out, "{}\t{}", self.names[c], self.names[p]);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn node(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, node: usize) -> &str {
        &self.names[node]
    }

    pub fn level(&self, node: usize) -> usize {
        self.level[node]
    }

    pub fn parents(&self, node: usize) -> &[usize] {
        &self.parents[node]
    }

    pub fn roots(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.parents[i].is_empty()).collect()
    }

    /// Whether an undirected hypernym/hyponym path joins the two nodes.
    pub fn connected(&self, a: usize, b: usize) -> bool {
        self.component[a] == self.component[b]
    }

    /// Ancestors of `node` (itself included) with their upward distance.
    pub fn ancestors(&self, node: usize) -> HashMap<usize, usize> {
        let mut dist = HashMap::from([(node, 0)]);
        let mut queue = VecDeque::from([node]);
        while let Some(u) = queue.pop_front() {
            let d = dist[&u];
            for &p in &self.parents[u] {
                dist.entry(p).or_insert_with(|| {
                    queue.push_back(p);
                    d + 1
                });
            }
        }
        dist
    }

    /// Shortest hypernym path length: up from each node to a shared ancestor.
    pub fn path_distance(&self, a: usize, b: usize) -> Option<usize> {
        let (da, db) = (self.ancestors(a), self.ancestors(b));
        da.iter().filter_map(|(n, x)| db.get(n).map(|y| x + y)).min()
    }

    /// Closest common hypernym of two nodes: the shared ancestor (a node
    /// counts as its own ancestor) minimising the summed distance, deeper
    /// level then earlier node on ties. For `a == b` the first direct
    /// hypernym is returned.
    pub fn closest_common_parent(&self, a: usize, b: usize) -> Option<usize> {
        if a == b {
            return self.parents[a].first().copied();
        }
        let (da, db) = (self.ancestors(a), self.ancestors(b));
        da.iter()
            .filter_map(|(&n, &x)| db.get(&n).map(|&y| (x + y, std::cmp::Reverse(self.level[n]), n)))
            .min()
            .map(|t| t.2)
    }

    pub fn is_ancestor(&self, ancestor: usize, node: usize) -> bool {
        self.ancestors(node).contains_key(&ancestor)
    }
}

/// Manual word -> graph-node corrections for polysemous class names.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overrides(pub BTreeMap<String, String>);

impl Overrides {
    /// Parses `word<TAB>node` lines.
    pub fn from_tsv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            match line.split('\t').map(str::trim).collect::<Vec<_>>().as_slice() {
                [w, n] if !w.is_empty() && !n.is_empty() => {
                    map.insert(w.to_string(), n.to_string());
                }
                _ => return Err(Error::Graph(format!("override line {}: expected `word<TAB>node`", lineno + 1))),
            }
        }
        Ok(Self(map))
    }

    pub fn to_tsv(&self) -> String {
        self.0.iter().map(|(w, n)| format!("{w}\t{n}\n")).collect()
    }

    pub fn is_overridden(&self, word: &str) -> bool {
        self.0.contains_key(word)
    }

    pub fn resolve(&self, g: &TaxonomyGraph, word: &str) -> Option<usize> {
        g.node(self.0.get(word).map_or(word, String::as_str))
    }
}

pub type Cluster = Vec<String>;

/// Groups class names by hypernym reachability.
///
/// Words are scanned in order; each joins the first cluster whose
/// highest-level member (closest to a root) is reachable from it, otherwise
/// it opens a new cluster. Unresolvable words become singletons. Words with
/// an override are pulled out and appended as singleton clusters at the end.
pub fn cluster_classes(words: &[String], g: &TaxonomyGraph, overrides: &Overrides) -> Vec<Cluster> {
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut corrected: Vec<Cluster> = Vec::new();
    let mut seen = HashSet::new();
    for w in words {
        if !seen.insert(w.as_str()) {
            warn!("duplicate class {w:?} ignored");
            continue;
        }
        if overrides.is_overridden(w) {
            corrected.push(vec![w.clone()]);
            continue;
        }
        let Some(node) = overrides.resolve(g, w) else {
            warn!("class {w:?} not found in the hypernym graph");
            clusters.push(vec![w.clone()]);
            continue;
        };
        let home =
            clusters.iter_mut().find(|c| representative(c, g, overrides).is_some_and(|rep| g.connected(node, rep)));
        match home {
            Some(c) => c.push(w.clone()),
            None => clusters.push(vec![w.clone()]),
        }
    }
    clusters.extend(corrected);
    clusters
}

/// Member closest to a root; earliest member on ties.
fn representative(cluster: &[String], g: &TaxonomyGraph, overrides: &Overrides) -> Option<usize> {
    cluster.iter().filter_map(|w| overrides.resolve(g, w)).min_by_key(|&n| g.level(n))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeNode {
    /// Class name, or the hypernym name for merge nodes.
    pub name: String,
    /// Graph node the name resolves to.
    pub node: Option<String>,
    /// True for annotated classes, false for hypernyms added by merging.
    pub is_class: bool,
    pub children: Vec<usize>,
}

/// Rooted tree stored as an arena; node 0 is not necessarily the root.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassTree {
    nodes: Vec<TreeNode>,
    root: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NestedNode {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    pub class: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<NestedNode>,
}

impl ClassTree {
    fn single(name: &str, node: Option<&str>, is_class: bool) -> Self {
        Self {
            nodes: vec![TreeNode {
                name: name.to_string(),
                node: node.map(str::to_string),
                is_class,
                children: Vec::new(),
            }],
            root: 0,
        }
    }

    pub fn root(&self) -> &TreeNode {
        &self.nodes[self.root]
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    /// Class names in insertion order.
    pub fn classes(&self) -> Vec<&str> {
        self.nodes.iter().filter(|n| n.is_class).map(|n| n.name.as_str()).collect()
    }

    /// `(parent, child)` name pairs in depth-first order.
    pub fn edges(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut stack = vec![self.root];
        while let Some(u) = stack.pop() {
            for &c in self.nodes[u].children.iter().rev() {
                stack.push(c);
            }
            for &c in &self.nodes[u].children {
                out.push((self.nodes[u].name.clone(), self.nodes[c].name.clone()));
            }
        }
        out
    }

    fn add_child(&mut self, parent: usize, name: &str, node: Option<&str>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(TreeNode {
            name: name.to_string(),
            node: node.map(str::to_string),
            is_class: true,
            children: Vec::new(),
        });
        self.nodes[parent].children.push(id);
        id
    }

    /// Copies `other` into this arena and hangs its root under `parent`.
    fn graft(&mut self, parent: usize, other: &ClassTree) {
        let offset = self.nodes.len();
        self.nodes.extend(
            other
                .nodes
                .iter()
                .map(|n| TreeNode { children: n.children.iter().map(|c| c + offset).collect(), ..n.clone() }),
        );
        self.nodes[parent].children.push(other.root + offset);
    }

    pub fn to_nested(&self) -> NestedNode {
        fn build(t: &ClassTree, u: usize) -> NestedNode {
            let n = &t.nodes[u];
            NestedNode {
                name: n.name.clone(),
                node: n.node.clone(),
                class: n.is_class,
                children: n.children.iter().map(|&c| build(t, c)).collect(),
            }
        }
        build(self, self.root)
    }

    pub fn from_nested(nested: &NestedNode) -> Self {
        fn add(t: &mut ClassTree, n: &NestedNode) -> usize {
            let id = t.nodes.len();
            t.nodes.push(TreeNode {
                name: n.name.clone(),
                node: n.node.clone(),
                is_class: n.class,
                children: Vec::new(),
            });
            for c in &n.children {
                let cid = add(t, c);
                t.nodes[id].children.push(cid);
            }
            id
        }
        let mut t = ClassTree { nodes: Vec::new(), root: 0 };
        add(&mut t, nested);
        t
    }

    /// Indented outline; merge-only hypernym nodes are bracketed.
    pub fn to_outline(&self) -> String {
        let mut out = String::new();
        let mut stack = vec![(self.root, 0usize)];
        while let Some((u, depth)) = stack.pop() {
            let n = &self.nodes[u];
            let label = if n.is_class { n.name.clone() } else { format!("[{}]", n.name) };
            let _ = writeln!(out, "{}{}", "  ".repeat(depth), label);
            for &c in n.children.iter().rev() {
                stack.push((c, depth + 1));
            }
        }
        out
    }
}

/// Builds a tree from one cluster: the first word is the root and each later
/// word hangs under the existing node with the shortest hypernym path to it
/// (earliest-inserted node on ties). Words with no path are skipped.
pub fn construct_tree(cluster: &[String], g: &TaxonomyGraph, overrides: &Overrides) -> Result<ClassTree> {
    let first = cluster.first().ok_or_else(|| Error::Config("empty cluster".into()))?;
    let node_name = |w: &str| overrides.resolve(g, w).map(|n| g.name(n).to_string());
    let mut tree = ClassTree::single(first, node_name(first).as_deref(), true);
    let mut placed: Vec<Option<usize>> = vec![overrides.resolve(g, first)];
    for w in &cluster[1..] {
        let Some(node) = overrides.resolve(g, w) else {
            warn!("class {w:?} not in the hypernym graph; left out of the tree");
            continue;
        };
        let mut best: Option<(usize, usize)> = None;
        for (tree_idx, gn) in placed.iter().enumerate() {
            let Some(d) = gn.and_then(|gn| g.path_distance(node, gn)) else { continue };
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((tree_idx, d));
            }
        }
        match best {
            Some((parent, _)) => {
                tree.add_child(parent, w, Some(g.name(node)));
                placed.push(Some(node));
            }
            None => warn!("class {w:?} has no hypernym path to the tree; skipped"),
        }
    }
    Ok(tree)
}

/// Hangs both trees under the closest common hypernym of their roots. When
/// that hypernym is one of the roots, the other tree is grafted beneath it.
pub fn combine_trees(tx: &ClassTree, ty: &ClassTree, g: &TaxonomyGraph) -> Result<ClassTree> {
    combine_trees_traced(tx, ty, g).map(|(t, _)| t)
}

/// As [`combine_trees`], also returning the graph node used as the parent.
pub fn combine_trees_traced(tx: &ClassTree, ty: &ClassTree, g: &TaxonomyGraph) -> Result<(ClassTree, usize)> {
    let resolve = |t: &ClassTree| {
        t.root()
            .node
            .as_deref()
            .and_then(|n| g.node(n))
            .ok_or_else(|| Error::MergeFailure(format!("root {:?} is not in the hypernym graph", t.root().name)))
    };
    let (rx, ry) = (resolve(tx)?, resolve(ty)?);
    let lca = g
        .closest_common_parent(rx, ry)
        .ok_or_else(|| Error::MergeFailure(format!("{} and {} share no hypernym", g.name(rx), g.name(ry))))?;
    let merged = if rx != ry && lca == rx {
        let mut t = tx.clone();
        t.graft(t.root, ty);
        t
    } else if rx != ry && lca == ry {
        let mut t = ty.clone();
        t.graft(t.root, tx);
        t
    } else {
        let name = g.name(lca);
        let mut t = ClassTree::single(name, Some(name), false);
        t.graft(0, tx);
        t.graft(0, ty);
        t
    };
    Ok((merged, lca))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MergeRecord {
    pub left_root: String,
    pub right_root: String,
    pub parent: String,
}

/// Full build: one tree per cluster, folded left to right with
/// [`combine_trees`]. Clusters whose root cannot be merged are reported and
/// left out.
pub fn build_class_tree(
    clusters: &[Cluster],
    g: &TaxonomyGraph,
    overrides: &Overrides,
) -> Result<(ClassTree, Vec<MergeRecord>)> {
    let mut merges = Vec::new();
    let mut acc: Option<ClassTree> = None;
    for cluster in clusters {
        let t = construct_tree(cluster, g, overrides)?;
        if t.root().node.is_none() {
            warn!("cluster rooted at unresolvable class {:?} left out", t.root().name);
            continue;
        }
        acc = Some(match acc {
            None => t,
            Some(prev) => {
                let (merged, lca) = combine_trees_traced(&prev, &t, g)?;
                merges.push(MergeRecord {
                    left_root: prev.root().node.clone().unwrap_or_default(),
                    right_root: t.root().node.clone().unwrap_or_default(),
                    parent: g.name(lca).to_string(),
                });
                merged
            }
        });
    }
    let tree = acc.ok_or_else(|| Error::Config("no resolvable classes to build a tree from".into()))?;
    Ok((tree, merges))
}
