//! The CWE weakness hierarchy: a multi-parent DAG with per-parent level
//! bookkeeping, ancestor closure and top-k path enumeration.

use std::borrow::Borrow;
use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A CWE identifier such as `CWE-668`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CweId(String);

impl CweId {
    pub fn new(id: impl Into<String>) -> Self {
        CweId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CweId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for CweId {
    fn from(s: &str) -> Self {
        CweId(s.to_string())
    }
}

impl From<String> for CweId {
    fn from(s: String) -> Self {
        CweId(s)
    }
}

impl Borrow<str> for CweId {
    fn borrow(&self) -> &str {
        &self.0
    }
}

/// One row of the definitions table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CweDefinition {
    pub id: CweId,
    pub name: String,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CweNode {
    pub id: CweId,
    pub name: String,
    pub description: String,
    pub parents: BTreeSet<CweId>,
    pub children: BTreeSet<CweId>,
}

/// Per-level selection budget for hierarchical prediction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KTriple {
    pub k1: usize,
    pub k2: usize,
    pub k3: usize,
}

impl KTriple {
    pub const PRECISE: KTriple = KTriple {
        k1: 1,
        k2: 1,
        k3: 1,
    };
    pub const MODERATE: KTriple = KTriple {
        k1: 3,
        k2: 2,
        k3: 1,
    };
    pub const RELAXED: KTriple = KTriple {
        k1: 5,
        k2: 2,
        k3: 2,
    };

    pub const fn new(k1: usize, k2: usize, k3: usize) -> Self {
        KTriple { k1, k2, k3 }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.k1, self.k2, self.k3]
    }

    pub fn max_paths(&self) -> usize {
        self.k1 * self.k2 * self.k3
    }

    fn validate(&self) -> Result<()> {
        if self.k1 == 0 || self.k2 == 0 || self.k3 == 0 {
            return Err(Error::InvalidArgument(format!(
                "k values must be at least 1, got {self}"
            )));
        }
        Ok(())
    }
}

impl fmt::Display for KTriple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.k1, self.k2, self.k3)
    }
}

impl std::str::FromStr for KTriple {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s
            .trim_matches(|c| c == '(' || c == ')')
            .split(',')
            .collect();
        let bad = || Error::InvalidArgument(format!("expected k1,k2,k3 but got `{s}`"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let mut k = [0usize; 3];
        for (slot, part) in k.iter_mut().zip(&parts) {
            *slot = part.trim().parse().map_err(|_| bad())?;
        }
        let triple = KTriple::new(k[0], k[1], k[2]);
        triple.validate()?;
        Ok(triple)
    }
}

/// A root-to-leaf (or truncated at depth three) CWE sequence with the link
/// confidence of every node on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionPath {
    pub nodes: Vec<CweId>,
    pub scores: Vec<f64>,
}

impl PredictionPath {
    pub fn contains(&self, id: &str) -> bool {
        self.nodes.iter().any(|n| n.as_str() == id)
    }
}

/// Maximum path depth explored during prediction.
pub const MAX_DEPTH: usize = 3;

#[derive(Clone, Debug)]
pub struct CweHierarchy {
    nodes: BTreeMap<CweId, CweNode>,
    roots: Vec<CweId>,
    levels: BTreeMap<CweId, BTreeSet<usize>>,
    topo_order: Vec<CweId>,
}

impl CweHierarchy {
    /// Validates definitions and child-parent edges and computes roots and
    /// per-parent level indices.
    pub fn from_parts(
        definitions: Vec<CweDefinition>,
        edges: impl IntoIterator<Item = (CweId, CweId)>,
    ) -> Result<Self> {
        let mut nodes = BTreeMap::new();
        for def in definitions {
            if def.description.trim().is_empty() {
                return Err(Error::EmptyDescription(def.id.to_string()));
            }
            if nodes.contains_key(&def.id) {
                return Err(Error::DuplicateCwe(def.id.to_string()));
            }
            nodes.insert(
                def.id.clone(),
                CweNode {
                    id: def.id,
                    name: def.name,
                    description: def.description,
                    parents: BTreeSet::new(),
                    children: BTreeSet::new(),
                },
            );
        }
        for (child, parent) in edges {
            for end in [&child, &parent] {
                if !nodes.contains_key(end) {
                    return Err(Error::DanglingEdge(end.to_string()));
                }
            }
            nodes
                .get_mut(&child)
                .unwrap()
                .parents
                .insert(parent.clone());
            nodes.get_mut(&parent).unwrap().children.insert(child);
        }

        let topo_order = topological_order(&nodes)?;
        let roots: Vec<CweId> = nodes
            .values()
            .filter(|n| n.parents.is_empty())
            .map(|n| n.id.clone())
            .collect();

        let mut levels: BTreeMap<CweId, BTreeSet<usize>> = BTreeMap::new();
        for id in &topo_order {
            let node = &nodes[id];
            let set = if node.parents.is_empty() {
                BTreeSet::from([1])
            } else {
                node.parents
                    .iter()
                    .flat_map(|p| levels[p].iter().map(|l| l + 1))
                    .collect()
            };
            levels.insert(id.clone(), set);
        }

        Ok(CweHierarchy {
            nodes,
            roots,
            levels,
            topo_order,
        })
    }

    /// Loads the `id,name,description` and `child_id,parent_id` CSV tables.
    pub fn from_csv_readers(definitions: impl Read, edges: impl Read) -> Result<Self> {
        let mut defs = Vec::new();
        let mut rdr = csv::Reader::from_reader(definitions);
        for row in rdr.deserialize::<CweDefinition>() {
            defs.push(row?);
        }
        let mut edge_list = Vec::new();
        let mut rdr = csv::Reader::from_reader(edges);
        for row in rdr.deserialize::<EdgeRow>() {
            let row = row?;
            edge_list.push((row.child_id, row.parent_id));
        }
        Self::from_parts(defs, edge_list)
    }

    pub fn from_csv_paths(definitions: &Path, edges: &Path) -> Result<Self> {
        Self::from_csv_readers(
            std::fs::File::open(definitions)?,
            std::fs::File::open(edges)?,
        )
    }

    /// Writes both tables back out in id order.
    pub fn write_csv(&self, definitions: impl Write, edges: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(definitions);
        for node in self.nodes.values() {
            w.serialize(CweDefinition {
                id: node.id.clone(),
                name: node.name.clone(),
                description: node.description.clone(),
            })?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_writer(edges);
        for node in self.nodes.values() {
            for parent in &node.parents {
                w.serialize(EdgeRow {
                    child_id: node.id.clone(),
                    parent_id: parent.clone(),
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn node(&self, id: &str) -> Result<&CweNode> {
        self.nodes
            .get(id)
            .ok_or_else(|| Error::UnknownCwe(id.to_string()))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &CweNode> {
        self.nodes.values()
    }

    pub fn ids(&self) -> impl Iterator<Item = &CweId> {
        self.nodes.keys()
    }

    pub fn roots(&self) -> &[CweId] {
        &self.roots
    }

    /// Parents before children.
    pub fn topological_order(&self) -> &[CweId] {
        &self.topo_order
    }

    pub fn levels_of(&self, id: &str) -> Result<&BTreeSet<usize>> {
        self.levels
            .get(id)
            .ok_or_else(|| Error::UnknownCwe(id.to_string()))
    }

    /// Nodes carrying level index `level`, in id order.
    pub fn nodes_at_level(&self, level: usize) -> Vec<CweId> {
        self.levels
            .iter()
            .filter(|(_, l)| l.contains(&level))
            .map(|(id, _)| id.clone())
            .collect()
    }

    /// Number of nodes per level index, with multi-level nodes counted once
    /// per level.
    pub fn level_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for set in self.levels.values() {
            for l in set {
                *counts.entry(*l).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn children(&self, id: &str) -> Result<&BTreeSet<CweId>> {
        Ok(&self.node(id)?.children)
    }

    /// Transitive closure of parents, excluding `id` itself.
    pub fn ancestors(&self, id: &str) -> Result<BTreeSet<CweId>> {
        self.closure(id, |n| &n.parents)
    }

    /// Transitive closure of children, excluding `id` itself.
    pub fn descendants(&self, id: &str) -> Result<BTreeSet<CweId>> {
        self.closure(id, |n| &n.children)
    }

    /// `ids` plus all their ancestors.
    pub fn positive_closure<'a>(
        &self,
        ids: impl IntoIterator<Item = &'a CweId>,
    ) -> Result<BTreeSet<CweId>> {
        let mut out = BTreeSet::new();
        for id in ids {
            out.extend(self.ancestors(id.as_str())?);
            out.insert(id.clone());
        }
        Ok(out)
    }

    fn closure(
        &self,
        id: &str,
        next: impl Fn(&CweNode) -> &BTreeSet<CweId>,
    ) -> Result<BTreeSet<CweId>> {
        let start = self.node(id)?;
        let mut seen = BTreeSet::new();
        let mut queue: VecDeque<&CweId> = next(start).iter().collect();
        while let Some(cur) = queue.pop_front() {
            if seen.insert(cur.clone()) {
                queue.extend(next(&self.nodes[cur]).iter());
            }
        }
        Ok(seen)
    }

    /// Top-`k` of `candidates` by descending score; equal scores resolve to
    /// ascending id.
    pub fn top_k<'a>(
        candidates: impl IntoIterator<Item = &'a CweId>,
        scores: &BTreeMap<CweId, f64>,
        k: usize,
    ) -> Result<Vec<(CweId, f64)>> {
        let mut scored = Vec::new();
        for id in candidates {
            let s = *scores
                .get(id)
                .ok_or_else(|| Error::InvalidArgument(format!("no score for {id}")))?;
            if s.is_nan() {
                return Err(Error::InvalidArgument(format!("score for {id} is NaN")));
            }
            scored.push((id.clone(), s));
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        scored.truncate(k);
        Ok(scored)
    }

    /// Greedy top-k descent: `k1` level-1 nodes, `k2` children of each, `k3`
    /// children of each of those. Paths end early at leaves. Output is in
    /// depth-first selection order, which equals sorting by (level-1 score,
    /// level-2 score, level-3 score) descending with id tie-breaks.
    pub fn enumerate_paths(
        &self,
        scores: &BTreeMap<CweId, f64>,
        k: KTriple,
    ) -> Result<Vec<PredictionPath>> {
        k.validate()?;
        if scores.is_empty() {
            return Err(Error::InvalidArgument("empty score map".into()));
        }
        let budgets = k.as_array();
        let level1 = self.nodes_at_level(1);
        let mut paths = Vec::new();
        let mut prefix = PredictionPath {
            nodes: Vec::new(),
            scores: Vec::new(),
        };
        for (id, s) in Self::top_k(&level1, scores, budgets[0])? {
            prefix.nodes.push(id.clone());
            prefix.scores.push(s);
            self.descend(&id, scores, &budgets, &mut prefix, &mut paths)?;
            prefix.nodes.pop();
            prefix.scores.pop();
        }
        Ok(paths)
    }

    fn descend(
        &self,
        id: &CweId,
        scores: &BTreeMap<CweId, f64>,
        budgets: &[usize; 3],
        prefix: &mut PredictionPath,
        out: &mut Vec<PredictionPath>,
    ) -> Result<()> {
        let children = &self.nodes[id].children;
        let depth = prefix.nodes.len();
        if children.is_empty() || depth == MAX_DEPTH {
            out.push(prefix.clone());
            return Ok(());
        }
        for (child, s) in Self::top_k(children, scores, budgets[depth])? {
            prefix.nodes.push(child.clone());
            prefix.scores.push(s);
            self.descend(&child, scores, budgets, prefix, out)?;
            prefix.nodes.pop();
            prefix.scores.pop();
        }
        Ok(())
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRow {
    child_id: CweId,
    parent_id: CweId,
}

fn topological_order(nodes: &BTreeMap<CweId, CweNode>) -> Result<Vec<CweId>> {
    let mut indegree: BTreeMap<&CweId, usize> =
        nodes.iter().map(|(id, n)| (id, n.parents.len())).collect();
    let mut ready: VecDeque<&CweId> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(id, _)| *id)
        .collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(id) = ready.pop_front() {
        order.push(id.clone());
        for child in &nodes[id].children {
            let d = indegree.get_mut(child).unwrap();
            *d -= 1;
            if *d == 0 {
                ready.push_back(child);
            }
        }
    }
    if order.len() == nodes.len() {
        return Ok(order);
    }
    let remaining: BTreeSet<&CweId> = indegree
        .iter()
        .filter(|(_, d)| **d > 0)
        .map(|(id, _)| *id)
        .collect();
    Err(Error::Cycle(find_cycle(nodes, &remaining)))
}

/// Walks parent links inside the unresolved set until a node repeats. Every
/// node left over by Kahn's algorithm has a parent in the set, so the walk
/// always closes a cycle.
fn find_cycle(
    nodes: &BTreeMap<CweId, CweNode>,
    remaining: &BTreeSet<&CweId>,
) -> Vec<(String, String)> {
    let Some(start) = remaining.iter().next() else {
        return Vec::new();
    };
    let mut walk: Vec<&CweId> = vec![start];
    loop {
        let cur = *walk.last().unwrap();
        let parent = nodes[cur]
            .parents
            .iter()
            .find(|p| remaining.contains(p))
            .expect("unresolved node has an unresolved parent");
        if let Some(pos) = walk.iter().position(|w| *w == parent) {
            let cycle = &walk[pos..];
            let mut edges: Vec<(String, String)> = cycle
                .windows(2)
                .map(|w| (w[0].to_string(), w[1].to_string()))
                .collect();
            edges.push((cur.to_string(), parent.to_string()));
            return edges;
        }
        walk.push(parent);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn def(id: &str) -> CweDefinition {
        CweDefinition {
            id: id.into(),
            name: id.to_string(),
            description: format!("description of {id}"),
        }
    }

    fn build(ids: &[&str], edges: &[(&str, &str)]) -> Result<CweHierarchy> {
        CweHierarchy::from_parts(
            ids.iter().map(|i| def(i)).collect(),
            edges
                .iter()
                .map(|(c, p)| (CweId::from(*c), CweId::from(*p))),
        )
    }

    fn chain() -> CweHierarchy {
        build(&["A", "B", "C"], &[("B", "A"), ("C", "B")]).unwrap()
    }

    #[test]
    fn chain_levels_and_roots() {
        let h = chain();
        assert_eq!(h.roots(), &[CweId::from("A")]);
        assert_eq!(h.levels_of("A").unwrap(), &BTreeSet::from([1]));
        assert_eq!(h.levels_of("B").unwrap(), &BTreeSet::from([2]));
        assert_eq!(h.levels_of("C").unwrap(), &BTreeSet::from([3]));
    }

    #[test]
    fn multi_parent_levels() {
        // X has parents R (level 1) and M (level 2).
        let h = build(&["R", "M", "X"], &[("M", "R"), ("X", "R"), ("X", "M")]).unwrap();
        assert_eq!(h.levels_of("X").unwrap(), &BTreeSet::from([2, 3]));
        assert_eq!(h.level_counts(), BTreeMap::from([(1, 1), (2, 2), (3, 1)]));
    }

    #[test]
    fn ancestors_of_chain() {
        let h = chain();
        let a = h.ancestors("C").unwrap();
        assert_eq!(a, BTreeSet::from(["A".into(), "B".into()]));
        assert!(h.ancestors("A").unwrap().is_empty());
        assert!(matches!(h.ancestors("Z"), Err(Error::UnknownCwe(id)) if id == "Z"));
    }

    #[test]
    fn rejects_cycle_with_edges() {
        let err = build(&["A", "B", "C"], &[("B", "A"), ("C", "B"), ("A", "C")]).unwrap_err();
        match err {
            Error::Cycle(edges) => {
                assert_eq!(edges.len(), 3);
                let set: BTreeSet<_> = edges.into_iter().collect();
                assert!(set.contains(&("A".to_string(), "C".to_string())));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_self_loop_and_dangling() {
        assert!(matches!(build(&["A"], &[("A", "A")]), Err(Error::Cycle(_))));
        assert!(matches!(
            build(&["A"], &[("A", "Q")]),
            Err(Error::DanglingEdge(id)) if id == "Q"
        ));
    }

    #[test]
    fn rejects_empty_description() {
        let mut d = def("A");
        d.description = "   ".into();
        assert!(matches!(
            CweHierarchy::from_parts(vec![d], Vec::new()),
            Err(Error::EmptyDescription(_))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let defs = "id,name,description\nA,Alpha,\"root, with comma\"\nB,Beta,child\n";
        let edges = "child_id,parent_id\nB,A\n";
        let h = CweHierarchy::from_csv_readers(defs.as_bytes(), edges.as_bytes()).unwrap();
        assert_eq!(h.node("A").unwrap().description, "root, with comma");
        let (mut d, mut e) = (Vec::new(), Vec::new());
        h.write_csv(&mut d, &mut e).unwrap();
        assert_eq!(String::from_utf8(d).unwrap(), defs);
        assert_eq!(String::from_utf8(e).unwrap(), edges);
    }

    #[test]
    fn k_triple_parse() {
        assert_eq!("5,2,2".parse::<KTriple>().unwrap(), KTriple::RELAXED);
        assert!("0,1,1".parse::<KTriple>().is_err());
        assert!("1,1".parse::<KTriple>().is_err());
    }

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<CweId, f64> {
        pairs.iter().map(|(id, s)| (CweId::from(*id), *s)).collect()
    }

    #[test]
    fn enumerate_single_greedy_path() {
        let h = chain();
        let s = scores(&[("A", 0.9), ("B", 0.2), ("C", 0.1)]);
        let paths = h.enumerate_paths(&s, KTriple::PRECISE).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].nodes, vec!["A".into(), "B".into(), "C".into()]);
        assert_eq!(paths[0].scores, vec![0.9, 0.2, 0.1]);
    }

    #[test]
    fn enumerate_rejects_bad_input() {
        let h = chain();
        assert!(h
            .enumerate_paths(&BTreeMap::new(), KTriple::PRECISE)
            .is_err());
        let s = scores(&[("A", 0.9)]);
        assert!(h.enumerate_paths(&s, KTriple::new(0, 1, 1)).is_err());
        // B's score is needed once A is selected.
        assert!(h.enumerate_paths(&s, KTriple::PRECISE).is_err());
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let h = build(&["R2", "R1", "R3"], &[]).unwrap();
        let s = scores(&[("R1", 0.5), ("R2", 0.5), ("R3", 0.7)]);
        let paths = h.enumerate_paths(&s, KTriple::new(2, 1, 1)).unwrap();
        let firsts: Vec<_> = paths.iter().map(|p| p.nodes[0].to_string()).collect();
        assert_eq!(firsts, vec!["R3", "R1"]);
    }

    #[test]
    fn stops_at_depth_three() {
        let h = build(&["A", "B", "C", "D"], &[("B", "A"), ("C", "B"), ("D", "C")]).unwrap();
        let s = scores(&[("A", 1.0), ("B", 1.0), ("C", 1.0), ("D", 1.0)]);
        let paths = h.enumerate_paths(&s, KTriple::RELAXED).unwrap();
        assert_eq!(paths.len(), 1);
        assert_eq!(paths[0].nodes.len(), 3);
    }
}
