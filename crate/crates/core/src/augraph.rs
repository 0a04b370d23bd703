//! Action-unit relation graph: construction from the objective-class table,
//! node pruning, dense variant, and plain-text serialization.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use thiserror::Error;

/// Objective-class/AU combinations shipped with the crate.
pub const RELATION_TABLE: &str = include_str!("../data/au_relations.txt");

/// AU ids absent from one of the two cross-database training sets; the
/// shipped default graph drops them.
pub const DEFAULT_ABSENT_AUS: [u32; 5] = [23, 24, 26, 38, 40];

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("line {line}: malformed relation entry: {reason}")]
    Parse { line: usize, reason: String },
    #[error("line {line}: unknown objective class `{class}`")]
    UnknownClass { line: usize, class: String },
    #[error("duplicate node id AU{0}")]
    DuplicateNode(u32),
    #[error("empty relation set")]
    EmptyRelations,
    #[error("pruning removed every node")]
    EmptyGraph,
    #[error("bad graph serialization: {0}")]
    Format(String),
}

/// One (objective class, AU combination) entry per table line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuRelationSet {
    pub entries: Vec<(u8, Vec<u32>)>,
}

impl AuRelationSet {
    /// Combinations belonging to one objective class (1..=5), in table order.
    pub fn class_combinations(&self, class_id: u8) -> Vec<&[u32]> {
        self.entries
            .iter()
            .filter(|(c, _)| *c == class_id)
            .map(|(_, aus)| aus.as_slice())
            .collect()
    }
}

/// Undirected AU co-occurrence graph with self-loops. Nodes are AU ids in
/// ascending order; that order fixes adjacency row/column meaning everywhere
/// downstream (labels, serialization, model heads).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AuGraph {
    nodes: Vec<u32>,
    adjacency: Vec<Vec<u8>>,
}

impl AuGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn nodes(&self) -> &[u32] {
        &self.nodes
    }

    pub fn adjacency(&self) -> &[Vec<u8>] {
        &self.adjacency
    }

    pub fn edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j] == 1
    }

    /// Edge lookup by AU id rather than node index.
    pub fn edge_between(&self, au_a: u32, au_b: u32) -> bool {
        match (self.node_index(au_a), self.node_index(au_b)) {
            (Some(i), Some(j)) => self.edge(i, j),
            _ => false,
        }
    }

    pub fn node_index(&self, au: u32) -> Option<usize> {
        self.nodes.binary_search(&au).ok()
    }

    /// Adjacency as row-major f64, the form consumed by the GCN.
    pub fn adjacency_f64(&self) -> Vec<f64> {
        let k = self.node_count();
        let mut out = Vec::with_capacity(k * k);
        for row in &self.adjacency {
            out.extend(row.iter().map(|&v| v as f64));
        }
        out
    }

    /// Symmetrically normalized adjacency D^{-1/2} (G) D^{-1/2}.
    /// Off by default; the propagation rule uses the raw 0/1 matrix.
    pub fn normalized_adjacency(&self) -> Vec<f64> {
        let k = self.node_count();
        let deg: Vec<f64> = self
            .adjacency
            .iter()
            .map(|row| row.iter().map(|&v| v as f64).sum::<f64>())
            .collect();
        let mut out = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                if self.adjacency[i][j] == 1 {
                    out[i * k + j] = 1.0 / (deg[i] * deg[j]).sqrt();
                }
            }
        }
        out
    }

    /// Plain-text form: `AUGRAPH v1 K=<n>`, the node ids, then the 0/1 rows.
    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "AUGRAPH v1 K={}", self.node_count());
        let ids: Vec<String> = self.nodes.iter().map(|n| n.to_string()).collect();
        let _ = writeln!(out, "{}", ids.join(" "));
        for row in &self.adjacency {
            let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(out, "{}", cells.join(" "));
        }
        out
    }

    pub fn deserialize(text: &str) -> Result<Self, GraphError> {
        let mut lines = text.lines();
        let header = lines
            .next()
            .ok_or_else(|| GraphError::Format("empty input".into()))?;
        let k: usize = header
            .strip_prefix("AUGRAPH v1 K=")
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| GraphError::Format(format!("bad header `{header}`")))?;
        let node_line = lines
            .next()
            .ok_or_else(|| GraphError::Format("missing node line".into()))?;
        let nodes: Vec<u32> = node_line
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| GraphError::Format(format!("bad node id `{t}`")))
            })
            .collect::<Result<_, _>>()?;
        if nodes.len() != k {
            return Err(GraphError::Format(format!(
                "header says K={k} but node line has {} ids",
                nodes.len()
            )));
        }
        let mut adjacency = Vec::with_capacity(k);
        for i in 0..k {
            let row_line = lines
                .next()
                .ok_or_else(|| GraphError::Format(format!("missing adjacency row {i}")))?;
            let row: Vec<u8> = row_line
                .split_whitespace()
                .map(|t| match t {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(GraphError::Format(format!("bad adjacency cell `{other}`"))),
                })
                .collect::<Result<_, _>>()?;
            if row.len() != k {
                return Err(GraphError::Format(format!(
                    "adjacency row {i} has {} cells, expected {k}",
                    row.len()
                )));
            }
            adjacency.push(row);
        }
        let graph = AuGraph { nodes, adjacency };
        graph.validate()?;
        Ok(graph)
    }

    fn validate(&self) -> Result<(), GraphError> {
        let k = self.nodes.len();
        if k == 0 {
            return Err(GraphError::EmptyGraph);
        }
        for w in self.nodes.windows(2) {
            if w[0] >= w[1] {
                return Err(GraphError::Format(
                    "node ids must be strictly ascending".into(),
                ));
            }
        }
        for i in 0..k {
            if self.adjacency[i][i] != 1 {
                return Err(GraphError::Format(format!("missing self-loop at row {i}")));
            }
            for j in 0..k {
                if self.adjacency[i][j] != self.adjacency[j][i] {
                    return Err(GraphError::Format(format!(
                        "asymmetric adjacency at ({i},{j})"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Parse the relation table text. Lines are `<roman-class>: AU<i>+AU<j>+...`;
/// blank lines and `#` comments are skipped.
pub fn parse_relation_table(source: &str) -> Result<AuRelationSet, GraphError> {
    let mut entries = Vec::new();
    for (idx, raw) in source.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (class_part, aus_part) = line.split_once(':').ok_or_else(|| GraphError::Parse {
            line: line_no,
            reason: "missing `:` separator".into(),
        })?;
        let class_id = roman_class(class_part.trim()).ok_or_else(|| GraphError::UnknownClass {
            line: line_no,
            class: class_part.trim().to_string(),
        })?;
        let mut combination = Vec::new();
        for token in aus_part.split('+') {
            let token = token.trim();
            let id: u32 = token
                .strip_prefix("AU")
                .and_then(|s| s.parse().ok())
                .filter(|&id| id > 0)
                .ok_or_else(|| GraphError::Parse {
                    line: line_no,
                    reason: format!("bad AU token `{token}`"),
                })?;
            combination.push(id);
        }
        if combination.is_empty() {
            return Err(GraphError::Parse {
                line: line_no,
                reason: "empty AU combination".into(),
            });
        }
        entries.push((class_id, combination));
    }
    Ok(AuRelationSet { entries })
}

fn roman_class(s: &str) -> Option<u8> {
    match s {
        "I" => Some(1),
        "II" => Some(2),
        "III" => Some(3),
        "IV" => Some(4),
        "V" => Some(5),
        _ => None,
    }
}

/// Build the co-occurrence graph: one node per AU id, an edge wherever two
/// AUs appear together in some combination, and a self-loop on every node.
pub fn build_graph(relations: &AuRelationSet) -> Result<AuGraph, GraphError> {
    if relations.entries.is_empty() {
        return Err(GraphError::EmptyRelations);
    }
    let node_set: BTreeSet<u32> = relations
        .entries
        .iter()
        .flat_map(|(_, aus)| aus.iter().copied())
        .collect();
    let nodes: Vec<u32> = node_set.into_iter().collect();
    let k = nodes.len();
    let index = |au: u32| nodes.binary_search(&au).unwrap();
    let mut adjacency = vec![vec![0u8; k]; k];
    for (i, row) in adjacency.iter_mut().enumerate() {
        row[i] = 1;
    }
    for (_, combination) in &relations.entries {
        for (a_pos, &a) in combination.iter().enumerate() {
            for &b in &combination[a_pos + 1..] {
                let (i, j) = (index(a), index(b));
                adjacency[i][j] = 1;
                adjacency[j][i] = 1;
            }
        }
    }
    Ok(AuGraph { nodes, adjacency })
}

/// Drop the given AU ids; ids not present are ignored. The surviving
/// adjacency is the corresponding sub-matrix.
pub fn prune_graph(graph: &AuGraph, absent: &BTreeSet<u32>) -> Result<AuGraph, GraphError> {
    let keep: Vec<usize> = (0..graph.node_count())
        .filter(|&i| !absent.contains(&graph.nodes[i]))
        .collect();
    if keep.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    let nodes: Vec<u32> = keep.iter().map(|&i| graph.nodes[i]).collect();
    let adjacency: Vec<Vec<u8>> = keep
        .iter()
        .map(|&i| keep.iter().map(|&j| graph.adjacency[i][j]).collect())
        .collect();
    Ok(AuGraph { nodes, adjacency })
}

/// All-ones adjacency over the given node ids (ablation variant).
pub fn dense_graph(nodes: &[u32]) -> Result<AuGraph, GraphError> {
    if nodes.is_empty() {
        return Err(GraphError::EmptyGraph);
    }
    let mut sorted = nodes.to_vec();
    sorted.sort_unstable();
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            return Err(GraphError::DuplicateNode(w[0]));
        }
    }
    let k = sorted.len();
    Ok(AuGraph {
        nodes: sorted,
        adjacency: vec![vec![1u8; k]; k],
    })
}

/// Relations from the shipped table.
pub fn shipped_relations() -> AuRelationSet {
    parse_relation_table(RELATION_TABLE).expect("shipped relation table parses")
}

/// Shipped combinations per class, each restricted to the graph's nodes and
/// sorted ascending; combinations emptied by the restriction are dropped.
/// A class may end up with no combinations (callers decide how to react).
pub fn restricted_class_pools(graph: &AuGraph) -> [Vec<Vec<u32>>; 5] {
    let relations = shipped_relations();
    let mut pools: [Vec<Vec<u32>>; 5] = Default::default();
    for (class, combination) in &relations.entries {
        let mut kept: Vec<u32> = combination
            .iter()
            .copied()
            .filter(|au| graph.node_index(*au).is_some())
            .collect();
        kept.sort_unstable();
        if !kept.is_empty() {
            pools[(*class - 1) as usize].push(kept);
        }
    }
    pools
}

/// The 17-node graph built from the shipped table.
pub fn original_graph() -> AuGraph {
    build_graph(&shipped_relations()).expect("shipped relation table builds")
}

/// The shipped default: the original graph with the absent AUs removed
/// (12 nodes).
pub fn default_pruned_graph() -> AuGraph {
    let absent: BTreeSet<u32> = DEFAULT_ABSENT_AUS.into_iter().collect();
    prune_graph(&original_graph(), &absent).expect("default pruning keeps nodes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_pair_line() {
        let set = parse_relation_table("I: AU6+AU12").unwrap();
        assert_eq!(set.entries, vec![(1, vec![6, 12])]);
    }

    #[test]
    fn parses_single_au_line() {
        let set = parse_relation_table("III: AU4").unwrap();
        assert_eq!(set.entries, vec![(3, vec![4])]);
    }

    #[test]
    fn empty_source_gives_empty_set() {
        let set = parse_relation_table("").unwrap();
        assert!(set.entries.is_empty());
    }

    #[test]
    fn malformed_line_names_line_number() {
        let err = parse_relation_table("I: AU6\nI AU12").unwrap_err();
        match err {
            GraphError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn unknown_class_rejected() {
        let err = parse_relation_table("VI: AU6").unwrap_err();
        assert!(matches!(err, GraphError::UnknownClass { line: 1, .. }));
    }

    #[test]
    fn shipped_table_builds_seventeen_nodes() {
        let graph = original_graph();
        assert_eq!(graph.node_count(), 17);
        assert_eq!(
            graph.nodes(),
            &[1, 2, 4, 5, 6, 7, 9, 10, 12, 15, 17, 23, 24, 25, 26, 38, 40]
        );
    }

    #[test]
    fn single_au_combinations_give_identity() {
        let set = parse_relation_table("I: AU6\nIII: AU4\nV: AU15").unwrap();
        let graph = build_graph(&set).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(graph.edge(i, j), i == j);
            }
        }
    }

    #[test]
    fn triple_combination_sets_all_pairs() {
        let set = parse_relation_table("III: AU4+AU5+AU7").unwrap();
        let graph = build_graph(&set).unwrap();
        assert!(graph.edge_between(4, 5));
        assert!(graph.edge_between(4, 7));
        assert!(graph.edge_between(5, 7));
    }

    #[test]
    fn default_prune_keeps_twelve_nodes() {
        let graph = default_pruned_graph();
        assert_eq!(graph.node_count(), 12);
        assert_eq!(graph.nodes(), &[1, 2, 4, 5, 6, 7, 9, 10, 12, 15, 17, 25]);
    }

    #[test]
    fn empty_prune_is_identity() {
        let graph = original_graph();
        let pruned = prune_graph(&graph, &BTreeSet::new()).unwrap();
        assert_eq!(graph, pruned);
    }

    #[test]
    fn foreign_id_prune_is_noop() {
        let graph = original_graph();
        let pruned = prune_graph(&graph, &BTreeSet::from([99])).unwrap();
        assert_eq!(graph, pruned);
    }

    #[test]
    fn pruning_everything_errors() {
        let graph = original_graph();
        let all: BTreeSet<u32> = graph.nodes().iter().copied().collect();
        assert!(matches!(
            prune_graph(&graph, &all),
            Err(GraphError::EmptyGraph)
        ));
    }

    #[test]
    fn dense_graph_is_all_ones() {
        let graph = dense_graph(&[1, 2, 4]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert!(graph.edge(i, j));
            }
        }
        let single = dense_graph(&[12]).unwrap();
        assert_eq!(single.adjacency(), &[vec![1]]);
        let pair = dense_graph(&[1, 2]).unwrap();
        assert_eq!(pair.adjacency(), &[vec![1, 1], vec![1, 1]]);
    }

    #[test]
    fn dense_graph_rejects_duplicates() {
        assert!(matches!(
            dense_graph(&[1, 2, 2]),
            Err(GraphError::DuplicateNode(2))
        ));
    }

    #[test]
    fn serialization_round_trips() {
        let graph = default_pruned_graph();
        let text = graph.serialize();
        assert!(text.starts_with("AUGRAPH v1 K=12\n"));
        let back = AuGraph::deserialize(&text).unwrap();
        assert_eq!(graph, back);
    }

    #[test]
    fn deserialize_rejects_bad_header() {
        assert!(AuGraph::deserialize("GRAPH 12\n1 2\n").is_err());
    }

    #[test]
    fn prune_commutes_with_filtered_build() {
        let relations = shipped_relations();
        let absent: BTreeSet<u32> = DEFAULT_ABSENT_AUS.into_iter().collect();
        let pruned = default_pruned_graph();

        let filtered_entries: Vec<(u8, Vec<u32>)> = relations
            .entries
            .iter()
            .map(|(c, aus)| {
                (
                    *c,
                    aus.iter().copied().filter(|a| !absent.contains(a)).collect(),
                )
            })
            .filter(|(_, aus): &(u8, Vec<u32>)| !aus.is_empty())
            .collect();
        let rebuilt = build_graph(&AuRelationSet {
            entries: filtered_entries,
        })
        .unwrap();
        assert_eq!(pruned, rebuilt);
    }
}
