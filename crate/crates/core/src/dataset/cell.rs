//! DARTS-style cell graphs and their canonical text form.
//!
//! A cell has two input nodes (`0` and `1`) followed by `N` intermediate
//! nodes numbered `2..=N+1`. Every intermediate node receives exactly two
//! operator-labelled edges from strictly earlier nodes. The text grammar is
//!
//! ```text
//! cell       := node_block ( " " node_block )*
//! node_block := "n" INT "{" edge ( "," edge )* "}"
//! edge       := "(" OP "," INT ")"
//! ```
//!
//! The parser tolerates ASCII whitespace between tokens; the serializer
//! never emits any except the single space between blocks.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DatasetError;

/// In-degree of every intermediate node.
pub const IN_DEGREE: usize = 2;

/// Index of the first intermediate node (0 and 1 are the cell inputs).
pub const FIRST_INTERMEDIATE: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperatorVocabulary(Vec<String>);

impl OperatorVocabulary {
    pub fn new<I, S>(ops: I) -> Result<Self, DatasetError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let ops: Vec<String> = ops.into_iter().map(Into::into).collect();
        if ops.is_empty() {
            return Err(DatasetError::InvalidVocabulary("vocabulary is empty".into()));
        }
        for (i, op) in ops.iter().enumerate() {
            if op.is_empty() || !op.chars().all(is_op_char) {
                return Err(DatasetError::InvalidVocabulary(format!(
                    "operator {op:?} contains characters outside [A-Za-z0-9_.-]"
                )));
            }
            if ops[..i].contains(op) {
                return Err(DatasetError::InvalidVocabulary(format!("duplicate operator {op:?}")));
            }
        }
        Ok(Self(ops))
    }

    /// The default vocabulary of the given size: `op_a`, `op_b`, ...
    pub fn default_of_size(size: usize) -> Self {
        let size = size.clamp(1, 26);
        Self((0..size).map(|i| format!("op_{}", (b'a' + i as u8) as char)).collect())
    }

    pub fn contains(&self, op: &str) -> bool {
        self.0.iter().any(|o| o == op)
    }

    pub fn ops(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// First operator; used as filler when a node is missing in-edges.
    pub fn first(&self) -> &str {
        &self.0[0]
    }
}

impl Default for OperatorVocabulary {
    fn default() -> Self {
        Self::default_of_size(5)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Edge {
    pub target: u32,
    pub source: u32,
    pub op: String,
}

impl Edge {
    pub fn new(target: u32, source: u32, op: impl Into<String>) -> Self {
        Self {
            target,
            source,
            op: op.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellGraph {
    num_intermediate_nodes: u32,
    edges: Vec<Edge>,
    vocabulary: OperatorVocabulary,
}

impl CellGraph {
    /// Builds a graph from edges in any order, checking every invariant.
    pub fn new(
        num_intermediate_nodes: u32,
        mut edges: Vec<Edge>,
        vocabulary: OperatorVocabulary,
    ) -> Result<Self, DatasetError> {
        edges.sort();
        let graph = Self {
            num_intermediate_nodes,
            edges,
            vocabulary,
        };
        graph.check_invariants()?;
        Ok(graph)
    }

    pub fn num_intermediate_nodes(&self) -> u32 {
        self.num_intermediate_nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn vocabulary(&self) -> &OperatorVocabulary {
        &self.vocabulary
    }

    /// Full invariant checker. Graphs built through [`CellGraph::new`] always pass.
    pub fn check_invariants(&self) -> Result<(), DatasetError> {
        if self.num_intermediate_nodes == 0 {
            return Err(DatasetError::Semantic("cell has no intermediate nodes".into()));
        }
        let last = FIRST_INTERMEDIATE + self.num_intermediate_nodes - 1;
        for edge in &self.edges {
            if edge.target < FIRST_INTERMEDIATE || edge.target > last {
                return Err(DatasetError::Semantic(format!(
                    "target node {} outside {}..={}",
                    edge.target, FIRST_INTERMEDIATE, last
                )));
            }
            if edge.source >= edge.target {
                return Err(DatasetError::Semantic(format!(
                    "source {} >= target {}",
                    edge.source, edge.target
                )));
            }
            if !self.vocabulary.contains(&edge.op) {
                return Err(DatasetError::Semantic(format!("unknown operator {:?}", edge.op)));
            }
        }
        for node in FIRST_INTERMEDIATE..=last {
            let degree = self.edges.iter().filter(|e| e.target == node).count();
            if degree != IN_DEGREE {
                return Err(DatasetError::Semantic(format!(
                    "node {node} has in-degree {degree}, expected {IN_DEGREE}"
                )));
            }
        }
        if self.edges.windows(2).any(|w| w[0] > w[1]) {
            return Err(DatasetError::Semantic("edges are not in canonical order".into()));
        }
        Ok(())
    }
}

impl fmt::Display for CellGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&serialize_cell_graph(self))
    }
}

fn is_op_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-')
}

pub fn serialize_cell_graph(graph: &CellGraph) -> String {
    let mut out = String::new();
    let mut current = None;
    for edge in &graph.edges {
        if current != Some(edge.target) {
            if current.is_some() {
                out.push_str("} ");
            }
            out.push('n');
            out.push_str(&edge.target.to_string());
            out.push('{');
            current = Some(edge.target);
        } else {
            out.push(',');
        }
        out.push('(');
        out.push_str(&edge.op);
        out.push(',');
        out.push_str(&edge.source.to_string());
        out.push(')');
    }
    if current.is_some() {
        out.push('}');
    }
    out
}

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn skip_ws(&mut self) {
        while let Some(c) = self.text[self.pos..].chars().next() {
            if c.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn peek(&mut self) -> Option<char> {
        self.skip_ws();
        self.text[self.pos..].chars().next()
    }

    fn at_end(&mut self) -> bool {
        self.peek().is_none()
    }

    fn expect(&mut self, want: char) -> Result<(), DatasetError> {
        match self.peek() {
            Some(c) if c == want => {
                self.pos += c.len_utf8();
                Ok(())
            }
            _ => Err(self.syntax(format!("'{want}'"))),
        }
    }

    fn int(&mut self) -> Result<u32, DatasetError> {
        self.skip_ws();
        let start = self.pos;
        let digits = self.text[start..].bytes().take_while(u8::is_ascii_digit).count();
        if digits == 0 {
            return Err(self.syntax("integer".into()));
        }
        self.pos += digits;
        self.text[start..self.pos].parse().map_err(|_| DatasetError::Syntax {
            position: start,
            expected: "integer that fits in 32 bits".into(),
        })
    }

    fn op(&mut self) -> Result<&'a str, DatasetError> {
        self.skip_ws();
        let start = self.pos;
        let len: usize = self.text[start..]
            .chars()
            .take_while(|c| is_op_char(*c))
            .map(char::len_utf8)
            .sum();
        if len == 0 {
            return Err(self.syntax("operator name".into()));
        }
        self.pos += len;
        Ok(&self.text[start..self.pos])
    }

    fn syntax(&self, expected: String) -> DatasetError {
        DatasetError::Syntax {
            position: self.pos,
            expected,
        }
    }
}

/// Parses the textual cell form. Blocks must appear as `n2`, `n3`, ... in
/// ascending order without gaps; edges inside a block may be in any order.
pub fn parse_cell_graph(text: &str, vocabulary: &OperatorVocabulary) -> Result<CellGraph, DatasetError> {
    let mut cur = Cursor { text, pos: 0 };
    let mut edges = Vec::new();
    let mut expected_node = FIRST_INTERMEDIATE;
    loop {
        cur.expect('n')?;
        let node = cur.int()?;
        if node != expected_node {
            return Err(DatasetError::Semantic(format!(
                "expected block n{expected_node}, found n{node}"
            )));
        }
        cur.expect('{')?;
        loop {
            cur.expect('(')?;
            let op = cur.op()?;
            cur.expect(',')?;
            let source = cur.int()?;
            cur.expect(')')?;
            edges.push(Edge::new(node, source, op));
            match cur.peek() {
                Some(',') => cur.pos += 1,
                Some('}') => {
                    cur.pos += 1;
                    break;
                }
                _ => return Err(cur.syntax("',' or '}'".into())),
            }
        }
        expected_node += 1;
        if cur.at_end() {
            break;
        }
    }
    CellGraph::new(expected_node - FIRST_INTERMEDIATE, edges, vocabulary.clone())
}

/// Seeded random cell: each intermediate node draws two sources uniformly
/// from the earlier nodes and an operator uniformly from the vocabulary.
pub fn random_cell_graph(seed: u64, vocabulary: &OperatorVocabulary, num_nodes: u32) -> CellGraph {
    let num_nodes = num_nodes.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::with_capacity(num_nodes as usize * IN_DEGREE);
    for target in FIRST_INTERMEDIATE..FIRST_INTERMEDIATE + num_nodes {
        for _ in 0..IN_DEGREE {
            let source = rng.gen_range(0..target);
            let op = &vocabulary.ops()[rng.gen_range(0..vocabulary.len())];
            edges.push(Edge::new(target, source, op.clone()));
        }
    }
    CellGraph::new(num_nodes, edges, vocabulary.clone()).expect("generator emits valid cells")
}
