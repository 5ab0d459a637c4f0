//! Class-hierarchy ingestion and graph queries.
//!
//! Hierarchies are rooted trees given as tab-separated `parent\tchild` edge
//! lists. Levels are BFS depths from the root, leaves are the nodes without
//! children (the in-distribution classes), and pairwise distances are
//! unweighted shortest-path hop counts on the undirected tree.

use std::collections::HashMap;
use std::collections::VecDeque;
use std::io::BufRead;

use crate::error::{Error, Result};

/// A rooted tree over named nodes. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct Hierarchy {
    names: Vec<String>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    level: Vec<u32>,
    root: usize,
    leaves: Vec<usize>,
}

impl Hierarchy {
    /// Parses a `parent\tchild` edge list. Lines starting with `#` and blank
    /// lines are ignored. Rejects cycles, multiple parents, multiple roots
    /// and duplicate edges, naming the offending line or node.
    pub fn parse_edge_list(reader: impl BufRead) -> Result<Self> {
        let mut names: Vec<String> = Vec::new();
        let mut index: HashMap<String, usize> = HashMap::new();
        let mut parent: Vec<Option<usize>> = Vec::new();
        let mut children: Vec<Vec<usize>> = Vec::new();
        let mut seen_edges: HashMap<(usize, usize), usize> = HashMap::new();

        let intern = |name: &str,
                          names: &mut Vec<String>,
                          index: &mut HashMap<String, usize>,
                          parent: &mut Vec<Option<usize>>,
                          children: &mut Vec<Vec<usize>>|
         -> usize {
            if let Some(&i) = index.get(name) {
                return i;
            }
            let i = names.len();
            names.push(name.to_string());
            index.insert(name.to_string(), i);
            parent.push(None);
            children.push(Vec::new());
            i
        };

        for (lineno, line) in reader.lines().enumerate() {
            let lineno = lineno + 1;
            let raw = line.map_err(|e| Error::io(format!("line {lineno}"), e))?;
            let trimmed = raw.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let mut parts = trimmed.split('\t');
            let (p, c) = match (parts.next(), parts.next(), parts.next()) {
                (Some(p), Some(c), None) if !p.is_empty() && !c.is_empty() => (p, c),
                _ => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("expected 'parent\\tchild', got '{trimmed}'"),
                    })
                }
            };
            if p == c {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("cycle: self-edge on node '{p}'"),
                });
            }
            let pi = intern(p, &mut names, &mut index, &mut parent, &mut children);
            let ci = intern(c, &mut names, &mut index, &mut parent, &mut children);
            if let Some(&first) = seen_edges.get(&(pi, ci)) {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("duplicate edge '{p}\\t{c}' (first at line {first})"),
                });
            }
            seen_edges.insert((pi, ci), lineno);
            match parent[ci] {
                None => parent[ci] = Some(pi),
                Some(prev) => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!(
                            "node '{c}' has multiple parents ('{}' and '{p}'); only trees are supported",
                            names[prev]
                        ),
                    })
                }
            }
            children[pi].push(ci);
        }

        if names.is_empty() {
            return Err(Error::Hierarchy("empty edge list".into()));
        }
        Self::assemble(names, index, parent, children)
    }

    /// Builds a hierarchy from in-memory `(parent, child)` pairs; same
    /// validation as [`Hierarchy::parse_edge_list`].
    pub fn from_edges<S: AsRef<str>>(edges: &[(S, S)]) -> Result<Self> {
        let mut text = String::new();
        for (p, c) in edges {
            text.push_str(p.as_ref());
            text.push('\t');
            text.push_str(c.as_ref());
            text.push('\n');
        }
        Self::parse_edge_list(text.as_bytes())
    }

    fn assemble(
        names: Vec<String>,
        index: HashMap<String, usize>,
        parent: Vec<Option<usize>>,
        children: Vec<Vec<usize>>,
    ) -> Result<Self> {
        let n = names.len();
        let roots: Vec<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
        let root = match roots.as_slice() {
            [] => {
                return Err(Error::Hierarchy(format!(
                    "cycle detected involving node '{}'",
                    names[0]
                )))
            }
            [r] => *r,
            [a, b, ..] => {
                return Err(Error::Hierarchy(format!(
                    "multiple roots: '{}' and '{}'",
                    names[*a], names[*b]
                )))
            }
        };

        let mut level = vec![u32::MAX; n];
        let mut queue = VecDeque::new();
        level[root] = 0;
        queue.push_back(root);
        let mut visited = 1usize;
        while let Some(u) = queue.pop_front() {
            for &v in &children[u] {
                if level[v] == u32::MAX {
                    level[v] = level[u] + 1;
                    visited += 1;
                    queue.push_back(v);
                }
            }
        }
        if visited < n {
            let bad = (0..n).find(|&i| level[i] == u32::MAX).unwrap();
            return Err(Error::Hierarchy(format!(
                "cycle detected involving node '{}'",
                names[bad]
            )));
        }

        let leaves: Vec<usize> = (0..n).filter(|&i| children[i].is_empty()).collect();
        Ok(Hierarchy {
            names,
            index,
            parent,
            children,
            level,
            root,
            leaves,
        })
    }

    /// Serializes back to the edge-list format, child edges in node order.
    pub fn to_edge_list(&self) -> String {
        let mut out = String::new();
        for i in 0..self.len() {
            if let Some(p) = self.parent[i] {
                out.push_str(&self.names[p]);
                out.push('\t');
                out.push_str(&self.names[i]);
                out.push('\n');
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.names[idx]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn require(&self, name: &str) -> Result<usize> {
        self.index_of(name)
            .ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    pub fn parent(&self, idx: usize) -> Option<usize> {
        self.parent[idx]
    }

    pub fn children(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    pub fn level(&self, idx: usize) -> u32 {
        self.level[idx]
    }

    pub fn max_level(&self) -> u32 {
        self.level.iter().copied().max().unwrap_or(0)
    }

    /// Leaf indices in node order; these are the in-distribution classes.
    pub fn leaves(&self) -> &[usize] {
        &self.leaves
    }

    pub fn is_leaf(&self, idx: usize) -> bool {
        self.children[idx].is_empty()
    }

    /// Edges as (parent, child) index pairs, in node order of the child.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (0..self.len())
            .filter_map(|i| self.parent[i].map(|p| (p, i)))
            .collect()
    }

    /// Lowest common ancestor of `u` and `v` together with its height:
    /// the deeper query level minus the LCA level.
    pub fn lca(&self, u: usize, v: usize) -> (usize, u32) {
        let deepest = self.level[u].max(self.level[v]);
        let (mut a, mut b) = (u, v);
        while self.level[a] > self.level[b] {
            a = self.parent[a].expect("non-root node has a parent");
        }
        while self.level[b] > self.level[a] {
            b = self.parent[b].expect("non-root node has a parent");
        }
        while a != b {
            a = self.parent[a].expect("non-root node has a parent");
            b = self.parent[b].expect("non-root node has a parent");
        }
        (a, deepest - self.level[a])
    }

    /// Unweighted all-pairs shortest-path hop counts on the undirected tree
    /// (BFS per source).
    pub fn all_pairs_distances(&self) -> GraphDistances {
        let n = self.len();
        let mut d = vec![0u32; n * n];
        let mut dist = vec![u32::MAX; n];
        let mut queue = VecDeque::new();
        for src in 0..n {
            dist.fill(u32::MAX);
            dist[src] = 0;
            queue.clear();
            queue.push_back(src);
            while let Some(u) = queue.pop_front() {
                let du = dist[u];
                let relax = |v: usize, dist: &mut Vec<u32>, queue: &mut VecDeque<usize>| {
                    if dist[v] == u32::MAX {
                        dist[v] = du + 1;
                        queue.push_back(v);
                    }
                };
                if let Some(p) = self.parent[u] {
                    relax(p, &mut dist, &mut queue);
                }
                for &c in &self.children[u] {
                    relax(c, &mut dist, &mut queue);
                }
            }
            d[src * n..(src + 1) * n].copy_from_slice(&dist);
        }
        GraphDistances { n, d }
    }
}

/// Dense symmetric matrix of hop counts between all hierarchy nodes,
/// indexed by node order.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphDistances {
    n: usize,
    d: Vec<u32>,
}

impl GraphDistances {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> u32 {
        self.d[i * self.n + j]
    }
}

/// Reads a leaf-marker file: one in-distribution class id per line,
/// `#` comments and blank lines ignored. Every id must name a leaf.
pub fn parse_leaf_markers(reader: impl BufRead, h: &Hierarchy) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let raw = line.map_err(|e| Error::io(format!("line {}", lineno + 1), e))?;
        let name = raw.trim();
        if name.is_empty() || name.starts_with('#') {
            continue;
        }
        let idx = h.require(name)?;
        if !h.is_leaf(idx) {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("'{name}' is not a leaf"),
            });
        }
        out.push(name.to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn parse(text: &str) -> Result<Hierarchy> {
        Hierarchy::parse_edge_list(text.as_bytes())
    }

    #[test]
    fn two_leaf_star() {
        let h = parse("r\ta\nr\tb\n").unwrap();
        assert_eq!(h.len(), 3);
        assert_eq!(h.name(h.root()), "r");
        assert_eq!(h.level(h.index_of("r").unwrap()), 0);
        assert_eq!(h.level(h.index_of("a").unwrap()), 1);
        assert_eq!(h.level(h.index_of("b").unwrap()), 1);
        let leaves: Vec<&str> = h.leaves().iter().map(|&i| h.name(i)).collect();
        assert_eq!(leaves, vec!["a", "b"]);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let h = parse("# a comment\n\nr\ta\n  \nr\tb\n").unwrap();
        assert_eq!(h.len(), 3);
    }

    #[test]
    fn self_edge_is_a_cycle_error() {
        let err = parse("a\ta\n").unwrap_err();
        assert!(err.to_string().contains("cycle"), "{err}");
    }

    #[test]
    fn proper_cycle_is_detected() {
        let err = parse("r\ta\na\tb\nb\tc\nc\ta\n").unwrap_err();
        // a gains two parents (r and c) before traversal even starts
        assert!(
            err.to_string().contains("multiple parents") || err.to_string().contains("cycle"),
            "{err}"
        );
        let err = parse("a\tb\nb\tc\nc\ta\n").unwrap_err();
        assert!(err.to_string().contains("cycle") || err.to_string().contains("multiple parents"));
    }

    #[test]
    fn multiple_roots_rejected() {
        let err = parse("r\ta\ns\tb\n").unwrap_err();
        assert!(err.to_string().contains("multiple roots"), "{err}");
    }

    #[test]
    fn duplicate_edge_rejected() {
        let err = parse("r\ta\nr\ta\n").unwrap_err();
        assert!(err.to_string().contains("duplicate edge"), "{err}");
    }

    #[test]
    fn dag_rejected_with_clear_error() {
        let err = parse("r\ta\nr\tb\na\tc\nb\tc\n").unwrap_err();
        assert!(err.to_string().contains("multiple parents"), "{err}");
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse("r\ta\nbogus line\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn star_distances() {
        let h = parse("r\ta\nr\tb\nr\tc\n").unwrap();
        let d = h.all_pairs_distances();
        let (r, a, b) = (
            h.index_of("r").unwrap(),
            h.index_of("a").unwrap(),
            h.index_of("b").unwrap(),
        );
        assert_eq!(d.get(r, a), 1);
        assert_eq!(d.get(a, b), 2);
        assert_eq!(d.get(a, a), 0);
    }

    #[test]
    fn path_distances() {
        let h = parse("a\tb\nb\tc\nc\td\n").unwrap();
        let d = h.all_pairs_distances();
        assert_eq!(
            d.get(h.index_of("a").unwrap(), h.index_of("d").unwrap()),
            3
        );
    }

    fn random_tree(rng: &mut ChaCha8Rng, n: usize) -> Hierarchy {
        let mut edges = Vec::new();
        for i in 1..n {
            let p = rng.random_range(0..i);
            edges.push((format!("n{p}"), format!("n{i}")));
        }
        Hierarchy::from_edges(&edges).unwrap()
    }

    fn floyd_warshall(h: &Hierarchy) -> Vec<Vec<u32>> {
        let n = h.len();
        let inf = u32::MAX / 4;
        let mut d = vec![vec![inf; n]; n];
        for i in 0..n {
            d[i][i] = 0;
        }
        for (p, c) in h.edges() {
            d[p][c] = 1;
            d[c][p] = 1;
        }
        for k in 0..n {
            for i in 0..n {
                for j in 0..n {
                    let via = d[i][k] + d[k][j];
                    if via < d[i][j] {
                        d[i][j] = via;
                    }
                }
            }
        }
        d
    }

    #[test]
    fn all_pairs_matches_floyd_warshall_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..5 {
            let h = random_tree(&mut rng, 50);
            let fast = h.all_pairs_distances();
            let oracle = floyd_warshall(&h);
            for i in 0..h.len() {
                for j in 0..h.len() {
                    assert_eq!(fast.get(i, j), oracle[i][j]);
                    assert_eq!(fast.get(i, j), fast.get(j, i));
                }
                assert_eq!(fast.get(i, i), 0);
            }
        }
    }

    #[test]
    fn lca_of_node_with_itself() {
        let h = parse("r\ta\na\tb\n").unwrap();
        let b = h.index_of("b").unwrap();
        assert_eq!(h.lca(b, b), (b, 0));
    }

    #[test]
    fn lca_of_siblings() {
        let h = parse("r\tp\np\tu\np\tv\n").unwrap();
        let (p, u, v) = (
            h.index_of("p").unwrap(),
            h.index_of("u").unwrap(),
            h.index_of("v").unwrap(),
        );
        assert_eq!(h.lca(u, v), (p, 1));
    }

    fn lca_oracle(h: &Hierarchy, u: usize, v: usize) -> usize {
        // Deepest node in the intersection of the two ancestor sets.
        let ancestors = |mut x: usize| {
            let mut set = vec![x];
            while let Some(p) = h.parent(x) {
                set.push(p);
                x = p;
            }
            set
        };
        let av = ancestors(v);
        ancestors(u)
            .into_iter()
            .filter(|a| av.contains(a))
            .max_by_key(|&a| h.level(a))
            .unwrap()
    }

    #[test]
    fn lca_matches_ancestor_set_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = random_tree(&mut rng, 60);
        for _ in 0..500 {
            let u = rng.random_range(0..h.len());
            let v = rng.random_range(0..h.len());
            let (node, height) = h.lca(u, v);
            assert_eq!(node, lca_oracle(&h, u, v));
            assert_eq!(height, h.level(u).max(h.level(v)) - h.level(node));
        }
    }

    #[test]
    fn tree_distance_decomposes_through_lca() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = random_tree(&mut rng, 40);
        let d = h.all_pairs_distances();
        for u in 0..h.len() {
            for v in 0..h.len() {
                let (a, _) = h.lca(u, v);
                assert_eq!(
                    d.get(u, v),
                    h.level(u) + h.level(v) - 2 * h.level(a)
                );
            }
        }
    }

    #[test]
    fn edge_list_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = random_tree(&mut rng, 30);
        let text = h.to_edge_list();
        let h2 = parse(&text).unwrap();
        assert_eq!(h, h2);
    }

    #[test]
    fn leaf_markers_parse_and_validate() {
        let h = parse("r\ta\nr\tb\n").unwrap();
        let ids = parse_leaf_markers("a\n# note\nb\n".as_bytes(), &h).unwrap();
        assert_eq!(ids, vec!["a", "b"]);
        assert!(parse_leaf_markers("r\n".as_bytes(), &h).is_err());
        assert!(parse_leaf_markers("zzz\n".as_bytes(), &h).is_err());
    }
}
