//! Hermetic stand-in for a chat model over the cell DSL.
//!
//! Summaries are rendered one clause per edge; each clause's operator is
//! independently replaced by a different vocabulary member with a
//! configurable probability. Recovery parses the clauses back. The summary
//! direction is chosen when the final user message parses as a cell, the
//! recovery direction when it looks like a mock summary.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{cache_key, validate_request, Backend, BackendError, CacheKey, ChatMessage, GenerationParams, Role};
use crate::dataset::{
    parse_cell_graph, serialize_cell_graph, CellGraph, Edge, OperatorVocabulary, FIRST_INTERMEDIATE, IN_DEGREE,
};
use crate::metrics::lexical_embed;

/// Summary emitted for input that is not a cell.
pub const SUMMARY_FALLBACK: &str = "unparseable input";

const SUMMARY_PREFIX: &str = "Cell with ";
const CLAUSE_SEPARATOR: &str = "; ";

/// Upper bound on the node count a recovered cell may claim.
const MAX_RECOVERED_NODES: u32 = 1024;

#[derive(Debug, Clone, PartialEq)]
pub struct MockConfig {
    /// Probability floor that an edge clause survives uncorrupted.
    pub fidelity: f64,
    /// Extra survival probability when the prompt carries a faithful template.
    pub template_bonus: f64,
    pub seed: u64,
    pub vocabulary: OperatorVocabulary,
}

impl MockConfig {
    pub fn new(fidelity: f64, template_bonus: f64, seed: u64, vocabulary: OperatorVocabulary) -> Self {
        Self {
            fidelity,
            template_bonus,
            seed,
            vocabulary,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.fidelity) || !unit(self.template_bonus) {
            return Err(BackendError::InvalidRequest(
                "mock fidelity and template_bonus must lie in [0, 1]".into(),
            ));
        }
        if self.fidelity + self.template_bonus > 1.0 + 1e-12 {
            return Err(BackendError::InvalidRequest(
                "mock fidelity + template_bonus must not exceed 1".into(),
            ));
        }
        Ok(())
    }
}

/// `node {t} applies {op} to node {s}`
pub fn summary_clause(edge: &Edge) -> String {
    format!("node {} applies {} to node {}", edge.target, edge.op, edge.source)
}

/// Probability that a single edge clause is corrupted.
pub fn corruption_probability(fidelity: f64, template_bonus: f64, has_template: bool, template_quality: f64) -> f64 {
    let bonus = if has_template {
        template_bonus * template_quality.clamp(0.0, 1.0)
    } else {
        0.0
    };
    1.0 - (fidelity + bonus).min(1.0)
}

/// Renders `cell_text` as clauses, corrupting each clause's operator with
/// probability `corruption`. Two draws are taken per edge whether or not it
/// is corrupted, so equal seeds give aligned draws across probabilities.
pub fn mock_summarize<R: Rng>(
    cell_text: &str,
    vocabulary: &OperatorVocabulary,
    corruption: f64,
    rng: &mut R,
) -> String {
    let Ok(graph) = parse_cell_graph(cell_text, vocabulary) else {
        return SUMMARY_FALLBACK.to_string();
    };
    let clauses: Vec<String> = graph
        .edges()
        .iter()
        .map(|edge| {
            let u: f64 = rng.gen();
            let pick = if vocabulary.len() > 1 {
                rng.gen_range(0..vocabulary.len() - 1)
            } else {
                0
            };
            if u < corruption && vocabulary.len() > 1 {
                let others: Vec<&String> = vocabulary.ops().iter().filter(|op| **op != edge.op).collect();
                summary_clause(&Edge::new(edge.target, edge.source, others[pick].clone()))
            } else {
                summary_clause(edge)
            }
        })
        .collect();
    format!(
        "{SUMMARY_PREFIX}{} intermediate nodes: {}",
        graph.num_intermediate_nodes(),
        clauses.join(CLAUSE_SEPARATOR)
    )
}

fn parse_clause(clause: &str) -> Option<Edge> {
    let words: Vec<&str> = clause.split_whitespace().collect();
    match words.as_slice() {
        ["node", t, "applies", op, "to", "node", s] => Some(Edge::new(t.parse().ok()?, s.parse().ok()?, *op)),
        _ => None,
    }
}

fn parse_summary(summary: &str) -> (Option<u32>, Vec<Edge>) {
    let summary = summary.trim();
    let (declared, body) = match summary
        .strip_prefix(SUMMARY_PREFIX)
        .and_then(|rest| rest.split_once(':'))
    {
        Some((head, body)) => (
            head.strip_suffix(" intermediate nodes")
                .and_then(|n| n.trim().parse().ok()),
            body,
        ),
        None => (None, summary),
    };
    (declared, body.split(';').filter_map(parse_clause).collect())
}

/// Reconstructs a canonical cell from a mock summary. Malformed clauses,
/// unknown operators and backward edges are dropped; nodes left with fewer
/// than two in-edges are padded with `(first operator, 0)`.
pub fn mock_recover(summary: &str, vocabulary: &OperatorVocabulary) -> String {
    let (declared, clauses) = parse_summary(summary);
    let clauses: Vec<Edge> = clauses
        .into_iter()
        .filter(|e| {
            e.target >= FIRST_INTERMEDIATE
                && e.target < FIRST_INTERMEDIATE + MAX_RECOVERED_NODES
                && e.source < e.target
                && vocabulary.contains(&e.op)
        })
        .collect();
    let max_target = clauses.iter().map(|e| e.target).max().unwrap_or(FIRST_INTERMEDIATE);
    let nodes = declared
        .unwrap_or(0)
        .min(MAX_RECOVERED_NODES)
        .max(max_target - FIRST_INTERMEDIATE + 1)
        .max(1);
    let mut edges = Vec::new();
    for target in FIRST_INTERMEDIATE..FIRST_INTERMEDIATE + nodes {
        let mut incoming: Vec<Edge> = clauses
            .iter()
            .filter(|e| e.target == target)
            .take(IN_DEGREE)
            .cloned()
            .collect();
        while incoming.len() < IN_DEGREE {
            incoming.push(Edge::new(target, 0, vocabulary.first()));
        }
        edges.extend(incoming);
    }
    let graph = CellGraph::new(nodes, edges, vocabulary.clone()).expect("recovered cell satisfies invariants");
    serialize_cell_graph(&graph)
}

/// Fraction of the template cell's edges that its summary states correctly.
/// 0 when the template record is not a cell or the summary is not in clause
/// form.
pub fn template_quality(record_text: &str, summary_text: &str, vocabulary: &OperatorVocabulary) -> f64 {
    let Ok(graph) = parse_cell_graph(record_text, vocabulary) else {
        return 0.0;
    };
    let (_, stated) = parse_summary(summary_text);
    let faithful = graph.edges().iter().filter(|e| stated.contains(e)).count();
    faithful as f64 / graph.edges().len() as f64
}

pub struct MockBackend {
    config: MockConfig,
    ordinals: Mutex<HashMap<CacheKey, u64>>,
}

impl MockBackend {
    pub fn new(config: MockConfig) -> Result<Self, BackendError> {
        config.validate()?;
        Ok(Self {
            config,
            ordinals: Mutex::new(HashMap::new()),
        })
    }

    pub fn config(&self) -> &MockConfig {
        &self.config
    }

    /// Occurrence index of this exact request, starting at 0.
    fn next_ordinal(&self, key: CacheKey) -> u64 {
        let mut ordinals = self.ordinals.lock().expect("ordinal table poisoned");
        let slot = ordinals.entry(key).or_insert(0);
        let ordinal = *slot;
        *slot += 1;
        ordinal
    }

    /// Draws depend on the query text and, above temperature 0, on how many
    /// times the identical request was seen before. They do not depend on
    /// the instruction or template, so arms that differ only in prompt
    /// framing share their draws.
    fn rng_for(&self, query: &str, ordinal: Option<u64>) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(b"mock");
        hasher.update(self.config.seed.to_le_bytes());
        hasher.update(query.as_bytes());
        if let Some(o) = ordinal {
            hasher.update([1u8]);
            hasher.update(o.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    fn template_of(&self, messages: &[ChatMessage]) -> Option<f64> {
        let exemplar: Vec<&str> = messages[1..messages.len() - 1]
            .iter()
            .filter(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
            .collect();
        if exemplar.is_empty() {
            return None;
        }
        let vocab = &self.config.vocabulary;
        let record = exemplar.iter().find(|t| parse_cell_graph(t, vocab).is_ok());
        let summary = exemplar.iter().find(|t| t.trim_start().starts_with(SUMMARY_PREFIX));
        Some(match (record, summary) {
            (Some(r), Some(s)) => template_quality(r, s, vocab),
            _ => 0.0,
        })
    }
}

impl Backend for MockBackend {
    fn chat(&self, messages: &[ChatMessage], params: &GenerationParams) -> Result<String, BackendError> {
        validate_request(messages, params)?;
        let last = messages.last().expect("validated non-empty");
        if messages.len() < 2 || last.role != Role::User {
            return Err(BackendError::InvalidRequest("mock expects a final user message".into()));
        }
        let ordinal = self.next_ordinal(cache_key(messages, params));
        let query = last.content.trim();
        let vocab = &self.config.vocabulary;

        let is_cell = parse_cell_graph(query, vocab).is_ok();
        if !is_cell && (query.starts_with(SUMMARY_PREFIX) || query == SUMMARY_FALLBACK) {
            return Ok(mock_recover(query, vocab));
        }
        let quality = self.template_of(messages);
        let corruption = corruption_probability(
            self.config.fidelity,
            self.config.template_bonus,
            quality.is_some(),
            quality.unwrap_or(0.0),
        );
        let ordinal = (params.temperature > 0.0).then_some(ordinal);
        let mut rng = self.rng_for(query, ordinal);
        Ok(mock_summarize(query, vocab, corruption, &mut rng))
    }

    fn embed(&self, _model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
        if texts.is_empty() {
            return Err(BackendError::InvalidRequest("no texts to embed".into()));
        }
        Ok(texts.iter().map(|t| lexical_embed(t)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::random_cell_graph;

    fn vocab() -> OperatorVocabulary {
        OperatorVocabulary::default_of_size(5)
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn perfect_fidelity_lists_every_edge() {
        let g = random_cell_graph(4, &vocab(), 4);
        let s = mock_summarize(&g.to_string(), &vocab(), 0.0, &mut rng(1));
        assert!(s.starts_with("Cell with 4 intermediate nodes: "));
        for e in g.edges() {
            assert_eq!(s.matches(&summary_clause(e)).count(), 1, "{s}");
        }
        assert_eq!(mock_recover(&s, &vocab()), g.to_string());
    }

    #[test]
    fn zero_fidelity_corrupts_every_clause() {
        // Monte Carlo over 1000 edges: fraction of corrupted clauses.
        let mut corrupted = 0usize;
        let mut total = 0usize;
        let p = corruption_probability(0.0, 0.0, true, 1.0);
        for seed in 0..125 {
            let g = random_cell_graph(seed, &vocab(), 4);
            let s = mock_summarize(&g.to_string(), &vocab(), p, &mut rng(seed));
            let (_, stated) = parse_summary(&s);
            assert_eq!(stated.len(), g.edges().len());
            for (a, b) in g.edges().iter().zip(&stated) {
                assert_eq!((a.target, a.source), (b.target, b.source));
                total += 1;
                corrupted += usize::from(a.op != b.op);
            }
        }
        assert_eq!(total, 1000);
        assert!((corrupted as f64 / total as f64 - 1.0).abs() <= 0.03);
    }

    #[test]
    fn same_rng_same_output() {
        let g = random_cell_graph(8, &vocab(), 4).to_string();
        assert_eq!(
            mock_summarize(&g, &vocab(), 0.5, &mut rng(3)),
            mock_summarize(&g, &vocab(), 0.5, &mut rng(3))
        );
    }

    #[test]
    fn empty_summary_gives_placeholder() {
        assert_eq!(mock_recover("", &vocab()), "n2{(op_a,0),(op_a,0)}");
        assert_eq!(mock_recover(SUMMARY_FALLBACK, &vocab()), "n2{(op_a,0),(op_a,0)}");
    }

    #[test]
    fn single_corrupted_clause_changes_one_operator() {
        let v = vocab();
        let g = parse_cell_graph("n2{(op_a,0),(op_b,1)} n3{(op_c,0),(op_d,2)}", &v).unwrap();
        let clean = mock_summarize(&g.to_string(), &v, 0.0, &mut rng(0));
        let dirty = clean.replace("node 3 applies op_d to node 2", "node 3 applies op_e to node 2");
        assert_eq!(mock_recover(&dirty, &v), "n2{(op_a,0),(op_b,1)} n3{(op_c,0),(op_e,2)}");
    }

    #[test]
    fn malformed_clauses_are_dropped_and_padded() {
        let v = vocab();
        let s = "Cell with 2 intermediate nodes: node 2 applies op_b to node 1; garbage; node 3 applies op_z to node 0; node 3 applies op_c to node 5";
        assert_eq!(mock_recover(s, &v), "n2{(op_a,0),(op_b,1)} n3{(op_a,0),(op_a,0)}");
    }

    #[test]
    fn template_quality_counts_faithful_clauses() {
        let v = vocab();
        let cell = "n2{(op_a,0),(op_b,1)}";
        let good = "Cell with 1 intermediate nodes: node 2 applies op_a to node 0; node 2 applies op_b to node 1";
        let half = "Cell with 1 intermediate nodes: node 2 applies op_a to node 0; node 2 applies op_c to node 1";
        assert_eq!(template_quality(cell, good, &v), 1.0);
        assert_eq!(template_quality(cell, half, &v), 0.5);
        assert_eq!(template_quality(cell, "a prose summary", &v), 0.0);
        assert_eq!(template_quality("not a cell", good, &v), 0.0);
    }

    #[test]
    fn chat_is_deterministic_at_temperature_zero() {
        let mock = MockBackend::new(MockConfig::new(0.3, 0.2, 9, vocab())).unwrap();
        let g = random_cell_graph(2, &vocab(), 4).to_string();
        let msgs = vec![ChatMessage::system("encode"), ChatMessage::user(g)];
        let p0 = GenerationParams::new("mock", 0.0, 350);
        let a = mock.chat(&msgs, &p0).unwrap();
        assert_eq!(a, mock.chat(&msgs, &p0).unwrap());
        // above temperature 0 repeated requests draw fresh corruption
        let p1 = GenerationParams::new("mock", 1.0, 350);
        let outs: Vec<String> = (0..6).map(|_| mock.chat(&msgs, &p1).unwrap()).collect();
        assert!(outs.iter().any(|o| o != &outs[0]));
        let fresh = MockBackend::new(MockConfig::new(0.3, 0.2, 9, vocab())).unwrap();
        let again: Vec<String> = (0..6).map(|_| fresh.chat(&msgs, &p1).unwrap()).collect();
        assert_eq!(outs, again);
    }

    #[test]
    fn chat_dispatches_on_direction() {
        let mock = MockBackend::new(MockConfig::new(1.0, 0.0, 0, vocab())).unwrap();
        let p = GenerationParams::new("mock", 0.0, 500);
        let cell = random_cell_graph(6, &vocab(), 3).to_string();
        let summary = mock
            .chat(&[ChatMessage::system("e"), ChatMessage::user(cell.clone())], &p)
            .unwrap();
        let back = mock
            .chat(&[ChatMessage::system("d"), ChatMessage::user(summary)], &p)
            .unwrap();
        assert_eq!(back, cell);
        let odd = mock
            .chat(&[ChatMessage::system("e"), ChatMessage::user("CCO")], &p)
            .unwrap();
        assert_eq!(odd, SUMMARY_FALLBACK);
    }

    #[test]
    fn mock_config_bounds() {
        assert!(MockBackend::new(MockConfig::new(0.9, 0.2, 0, vocab())).is_err());
        assert!(MockBackend::new(MockConfig::new(-0.1, 0.0, 0, vocab())).is_err());
    }

    #[test]
    fn embeddings_are_unit_and_repeatable() {
        let mock = MockBackend::new(MockConfig::new(1.0, 0.0, 0, vocab())).unwrap();
        let texts = vec!["same text".to_string(), "same text".to_string()];
        let vs = mock.embed("m", &texts).unwrap();
        assert_eq!(vs[0], vs[1]);
        for v in &vs {
            assert!((v.iter().map(|x| x * x).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
        }
        assert!(mock.embed("m", &[]).is_err());
    }
}
