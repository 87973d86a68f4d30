//! The class–instance tree: loading, validation and graph queries.
//!
//! Nodes get a dense index in file order. Every query works on indices;
//! [`HierarchyTree::index_of`] maps opaque string ids to them.
//!
//! File format, one record per line:
//!
//! ```text
//! # comment
//! node_id<TAB>kind<TAB>parent_id
//! ```
//!
//! with `parent_id = -` for the root and `kind` one of `instance`, `class`,
//! `superclass`, `other`.

use std::collections::{HashMap, VecDeque};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NodeKind {
    Instance,
    Class,
    Superclass,
    Other,
}

impl NodeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            NodeKind::Instance => "instance",
            NodeKind::Class => "class",
            NodeKind::Superclass => "superclass",
            NodeKind::Other => "other",
        }
    }
}

impl fmt::Display for NodeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NodeKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "instance" => Ok(NodeKind::Instance),
            "class" => Ok(NodeKind::Class),
            "superclass" => Ok(NodeKind::Superclass),
            "other" => Ok(NodeKind::Other),
            _ => Err(s.to_string()),
        }
    }
}

/// `(child, ancestor)` with `ancestor` a strict ancestor of `child`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClosurePair {
    pub child: usize,
    pub ancestor: usize,
}

/// A validated, immutable rooted tree.
#[derive(Debug, Clone)]
pub struct HierarchyTree {
    ids: Vec<String>,
    kinds: Vec<NodeKind>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    depth: Vec<usize>,
    index: HashMap<String, usize>,
    root: usize,
}

/// One unvalidated line of a hierarchy file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeRecord {
    pub id: String,
    pub kind: NodeKind,
    pub parent: Option<String>,
}

impl HierarchyTree {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = lineno + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.trim_start().starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let id = fields[0].trim();
            if id.is_empty() || id == "-" {
                return Err(Error::Parse {
                    line,
                    msg: format!("invalid node id `{id}`"),
                });
            }
            let kind = fields[1]
                .trim()
                .parse::<NodeKind>()
                .map_err(|kind| Error::UnknownKind { line, kind })?;
            let parent = match fields[2].trim() {
                "-" => None,
                p => Some(p.to_string()),
            };
            records.push(NodeRecord {
                id: id.to_string(),
                kind,
                parent,
            });
        }
        Self::from_records(records)
    }

    pub fn from_records(records: Vec<NodeRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateNode(r.id.clone()));
            }
        }
        let mut parent = Vec::with_capacity(records.len());
        for r in &records {
            let p = match &r.parent {
                None => None,
                Some(pid) => Some(*index.get(pid).ok_or_else(|| Error::UnknownNode(pid.clone()))?),
            };
            parent.push(p);
        }
        let ids = records.iter().map(|r| r.id.clone()).collect();
        let kinds = records.iter().map(|r| r.kind).collect();
        Self::build(ids, kinds, parent, index)
    }

    /// Builds a tree from a parent array; ids are the decimal indices.
    pub fn from_parents(parents: &[Option<usize>], kinds: &[NodeKind]) -> Result<Self> {
        assert_eq!(parents.len(), kinds.len());
        let ids: Vec<String> = (0..parents.len()).map(|i| i.to_string()).collect();
        let index = ids.iter().cloned().enumerate().map(|(i, s)| (s, i)).collect();
        if let Some(&Some(p)) = parents.iter().find(|p| matches!(p, Some(p) if *p >= parents.len())) {
            return Err(Error::UnknownNode(p.to_string()));
        }
        Self::build(ids, kinds.to_vec(), parents.to_vec(), index)
    }

    fn build(
        ids: Vec<String>,
        kinds: Vec<NodeKind>,
        parent: Vec<Option<usize>>,
        index: HashMap<String, usize>,
    ) -> Result<Self> {
        let n = ids.len();
        let roots: Vec<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
        let root = match roots.as_slice() {
            [] => return Err(Error::NoRoot),
            [r] => *r,
            _ => return Err(Error::MultipleRoots(roots.iter().map(|&i| ids[i].clone()).collect())),
        };
        let mut children = vec![Vec::new(); n];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                children[p].push(i);
            }
        }
        // With one root and one parent per node, anything unreachable from
        // the root sits on a cycle.
        let mut depth = vec![usize::MAX; n];
        depth[root] = 0;
        let mut queue = VecDeque::from([root]);
        while let Some(u) = queue.pop_front() {
            for &c in &children[u] {
                depth[c] = depth[u] + 1;
                queue.push_back(c);
            }
        }
        if let Some(i) = depth.iter().position(|&d| d == usize::MAX) {
            return Err(Error::Cycle(ids[i].clone()));
        }
        for i in 0..n {
            if kinds[i] == NodeKind::Instance && !children[i].is_empty() {
                return Err(Error::InstanceWithChildren(ids[i].clone()));
            }
            let expected = match kinds[i] {
                NodeKind::Instance => NodeKind::Class,
                NodeKind::Class => NodeKind::Superclass,
                _ => continue,
            };
            if let Some(p) = parent[i] {
                if kinds[p] != expected {
                    return Err(Error::KindMismatch {
                        node: ids[i].clone(),
                        kind: kinds[i].to_string(),
                        parent: ids[p].clone(),
                        parent_kind: kinds[p].to_string(),
                        expected: expected.to_string(),
                    });
                }
            }
        }
        Ok(Self {
            ids,
            kinds,
            parent,
            children,
            depth,
            index,
            root,
        })
    }

    /// A complete tree with the given branching factor and depth.
    ///
    /// Leaves are instances, their parents classes, grandparents
    /// superclasses and everything above is `other`. Requires `depth ≥ 1`.
    pub fn balanced(branching: usize, depth: usize) -> Result<Self> {
        if branching == 0 || depth == 0 {
            return Err(Error::InvalidConfig(
                "balanced tree needs branching ≥ 1 and depth ≥ 1".into(),
            ));
        }
        let kind_at = |level: usize| match depth - level {
            0 => NodeKind::Instance,
            1 => NodeKind::Class,
            2 => NodeKind::Superclass,
            _ => NodeKind::Other,
        };
        let mut records = vec![NodeRecord {
            id: "r".into(),
            kind: kind_at(0),
            parent: None,
        }];
        let mut frontier = vec!["r".to_string()];
        for level in 1..=depth {
            let mut next = Vec::new();
            for p in &frontier {
                for b in 0..branching {
                    let id = format!("{p}.{b}");
                    records.push(NodeRecord {
                        id: id.clone(),
                        kind: kind_at(level),
                        parent: Some(p.clone()),
                    });
                    next.push(id);
                }
            }
            frontier = next;
        }
        Self::from_records(records)
    }

    /// Root (`other`) → superclasses → classes → instances.
    pub fn three_level(superclasses: usize, classes_per_superclass: usize, instances_per_class: usize) -> Result<Self> {
        let mut records = vec![NodeRecord {
            id: "root".into(),
            kind: NodeKind::Other,
            parent: None,
        }];
        for s in 0..superclasses {
            let sid = format!("s{s}");
            records.push(NodeRecord {
                id: sid.clone(),
                kind: NodeKind::Superclass,
                parent: Some("root".into()),
            });
            for c in 0..classes_per_superclass {
                let cid = format!("{sid}.c{c}");
                records.push(NodeRecord {
                    id: cid.clone(),
                    kind: NodeKind::Class,
                    parent: Some(sid.clone()),
                });
                for i in 0..instances_per_class {
                    records.push(NodeRecord {
                        id: format!("{cid}.i{i}"),
                        kind: NodeKind::Instance,
                        parent: Some(cid.clone()),
                    });
                }
            }
        }
        Self::from_records(records)
    }

    /// Breadth-first canonical text form (children in index order).
    pub fn to_canonical_string(&self) -> String {
        let mut out = String::new();
        for u in self.bfs_order() {
            let parent = self.parent[u].map_or("-", |p| self.ids[p].as_str());
            out.push_str(&format!("{}\t{}\t{}\n", self.ids[u], self.kinds[u], parent));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_canonical_string())?;
        Ok(())
    }

    pub fn bfs_order(&self) -> Vec<usize> {
        let mut order = Vec::with_capacity(self.len());
        let mut queue = VecDeque::from([self.root]);
        while let Some(u) = queue.pop_front() {
            order.push(u);
            queue.extend(self.children[u].iter().copied());
        }
        order
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn id(&self, u: usize) -> &str {
        &self.ids[u]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn kind(&self, u: usize) -> NodeKind {
        self.kinds[u]
    }

    pub fn depth(&self, u: usize) -> usize {
        self.depth[u]
    }

    pub fn max_depth(&self) -> usize {
        self.depth.iter().copied().max().unwrap_or(0)
    }

    pub fn parent(&self, u: usize) -> Option<usize> {
        self.parent[u]
    }

    pub fn children(&self, u: usize) -> &[usize] {
        &self.children[u]
    }

    pub fn is_leaf(&self, u: usize) -> bool {
        self.children[u].is_empty()
    }

    pub fn index_of(&self, id: &str) -> Result<usize> {
        self.index
            .get(id)
            .copied()
            .ok_or_else(|| Error::UnknownNode(id.to_string()))
    }

    /// Instance nodes in index order. Position in this list is the label
    /// index used by the learner.
    pub fn instances(&self) -> Vec<usize> {
        (0..self.len())
            .filter(|&u| self.kinds[u] == NodeKind::Instance)
            .collect()
    }

    pub fn parent_of(&self, u: usize) -> Result<usize> {
        self.parent[u].ok_or_else(|| Error::MissingAncestor {
            node: self.ids[u].clone(),
            what: "parent",
        })
    }

    pub fn grandparent_of(&self, u: usize) -> Result<usize> {
        self.parent_of(u)
            .ok()
            .and_then(|p| self.parent[p])
            .ok_or_else(|| Error::MissingAncestor {
                node: self.ids[u].clone(),
                what: "grandparent",
            })
    }

    /// Whether `anc` is a strict ancestor of `u`.
    pub fn is_ancestor(&self, anc: usize, u: usize) -> bool {
        if self.depth[anc] >= self.depth[u] {
            return false;
        }
        let mut x = u;
        while self.depth[x] > self.depth[anc] {
            x = self.parent[x].expect("non-root has a parent");
        }
        x == anc
    }

    pub fn lca(&self, u: usize, v: usize) -> usize {
        let (mut a, mut b) = (u, v);
        while self.depth[a] > self.depth[b] {
            a = self.parent[a].expect("non-root has a parent");
        }
        while self.depth[b] > self.depth[a] {
            b = self.parent[b].expect("non-root has a parent");
        }
        while a != b {
            a = self.parent[a].expect("non-root has a parent");
            b = self.parent[b].expect("non-root has a parent");
        }
        a
    }

    /// Number of edges on the unique path between `u` and `v`.
    pub fn tree_distance(&self, u: usize, v: usize) -> usize {
        let l = self.lca(u, v);
        self.depth[u] + self.depth[v] - 2 * self.depth[l]
    }

    /// Every `(descendant, strict ancestor)` pair, ordered by child index
    /// then by ancestor depth (nearest first).
    pub fn transitive_closure(&self) -> Vec<ClosurePair> {
        let mut out = Vec::with_capacity(self.depth.iter().sum());
        for u in 0..self.len() {
            let mut x = u;
            while let Some(p) = self.parent[x] {
                out.push(ClosurePair { child: u, ancestor: p });
                x = p;
            }
        }
        out
    }

    /// Nodes that are not strict ancestors of `u` (this includes `u`).
    pub fn negative_candidates(&self, u: usize) -> Vec<usize> {
        let mut is_anc = vec![false; self.len()];
        let mut x = u;
        while let Some(p) = self.parent[x] {
            is_anc[p] = true;
            x = p;
        }
        (0..self.len()).filter(|&v| !is_anc[v]).collect()
    }

    /// `k` uniform draws from the negatives of `u`: without replacement
    /// while `k` does not exceed their count, with replacement otherwise.
    pub fn sample_negatives<R: Rng + ?Sized>(&self, u: usize, k: usize, rng: &mut R) -> Vec<usize> {
        let pool = self.negative_candidates(u);
        sample_from(&pool, k, rng)
    }
}

pub(crate) fn sample_from<R: Rng + ?Sized>(pool: &[usize], k: usize, rng: &mut R) -> Vec<usize> {
    if pool.is_empty() || k == 0 {
        return Vec::new();
    }
    if k <= pool.len() {
        index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
    } else {
        (0..k).map(|_| pool[rng.random_range(0..pool.len())]).collect()
    }
}
