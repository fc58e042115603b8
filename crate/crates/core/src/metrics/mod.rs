//! Similarity between original and recovered data, combined into the single
//! score that drives template tuning.

mod embed;
mod sequence;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::dataset::{tokenize_smiles, Record};

pub use embed::{cosine_similarity, lexical_embed, lexical_similarity, LEXICAL_DIM};
pub use sequence::{bleu_smoothed, lcs_length, ngram_counts, rouge_l};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("vector dimensions differ: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("embedding provider failed: {0}")]
    Provider(#[from] BackendError),
    #[error("embedding provider returned {got} vectors for {expected} texts")]
    ProviderShape { expected: usize, got: usize },
    #[error("invalid metric configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Bleu,
    RougeL,
    StsCosine,
    BertCosine,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Bleu, Metric::RougeL, Metric::StsCosine, Metric::BertCosine];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Bleu => "bleu",
            Metric::RougeL => "rouge_l",
            Metric::StsCosine => "sts_cosine",
            Metric::BertCosine => "bert_cosine",
        }
    }

    pub fn is_embedding(self) -> bool {
        matches!(self, Metric::StsCosine | Metric::BertCosine)
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Metric {
    type Err = MetricError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Metric::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| MetricError::InvalidConfig(format!("unknown metric {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    #[default]
    Whitespace,
    Smiles,
    Char,
}

impl Tokenizer {
    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            Tokenizer::Whitespace => text.split_whitespace().map(str::to_string).collect(),
            Tokenizer::Char => text.chars().map(String::from).collect(),
            // Recovered text is not guaranteed to be valid SMILES.
            Tokenizer::Smiles => match tokenize_smiles(text.trim()) {
                Ok(seq) => seq.tokens().to_vec(),
                Err(_) => Tokenizer::Char.tokenize(text.trim()),
            },
        }
    }
}

/// Source of embedding vectors for the cosine metrics.
pub trait Embedder: Sync {
    fn embed(&self, model: &str, texts: &[String]) -> Result<Vec<Vec<f64>>, BackendError>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub enabled: Vec<Metric>,
    /// Relative weights per enabled metric; empty means equal weights.
    pub weights: BTreeMap<Metric, f64>,
    pub bleu_max_n: usize,
    pub rouge_beta: f64,
    pub tokenizer: Tokenizer,
    /// Model names passed to the embedding provider.
    pub sts_model: String,
    pub bert_model: String,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            enabled: vec![Metric::Bleu, Metric::RougeL],
            weights: BTreeMap::new(),
            bleu_max_n: 4,
            rouge_beta: 1.0,
            tokenizer: Tokenizer::Whitespace,
            sts_model: "sts".into(),
            bert_model: "bert".into(),
        }
    }
}

impl MetricConfig {
    /// Equal-weight config over the given metrics.
    pub fn with_metrics(metrics: &[Metric]) -> Self {
        Self {
            enabled: metrics.to_vec(),
            ..Self::default()
        }
    }

    /// Checks the config and returns the weights normalized to sum to 1.
    pub fn normalized_weights(&self) -> Result<BTreeMap<Metric, f64>, MetricError> {
        if self.enabled.is_empty() {
            return Err(MetricError::InvalidConfig("no metric enabled".into()));
        }
        if self.bleu_max_n == 0 {
            return Err(MetricError::InvalidConfig("bleu_max_n must be at least 1".into()));
        }
        if !(self.rouge_beta > 0.0 && self.rouge_beta.is_finite()) {
            return Err(MetricError::InvalidConfig("rouge_beta must be positive".into()));
        }
        for (i, m) in self.enabled.iter().enumerate() {
            if self.enabled[..i].contains(m) {
                return Err(MetricError::InvalidConfig(format!("metric {m} listed twice")));
            }
        }
        for m in self.weights.keys() {
            if !self.enabled.contains(m) {
                return Err(MetricError::InvalidConfig(format!(
                    "weight given for disabled metric {m}"
                )));
            }
        }
        let raw: BTreeMap<Metric, f64> = self
            .enabled
            .iter()
            .map(|&m| {
                (
                    m,
                    if self.weights.is_empty() {
                        1.0
                    } else {
                        self.weights.get(&m).copied().unwrap_or(0.0)
                    },
                )
            })
            .collect();
        if raw.values().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(MetricError::InvalidConfig(
                "weights must be finite and non-negative".into(),
            ));
        }
        let total: f64 = raw.values().sum();
        if total <= 0.0 {
            return Err(MetricError::InvalidConfig("weights sum to zero".into()));
        }
        Ok(raw.into_iter().map(|(m, w)| (m, w / total)).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeScore {
    pub per_metric: BTreeMap<Metric, f64>,
    pub weights: BTreeMap<Metric, f64>,
    pub composite: f64,
}

impl CompositeScore {
    /// Weighted combination of per-metric values. Weights must already be
    /// normalized and cover exactly the metrics present in `per_metric`.
    pub fn combine(per_metric: BTreeMap<Metric, f64>, weights: BTreeMap<Metric, f64>) -> Self {
        let composite = per_metric
            .iter()
            .map(|(m, v)| weights.get(m).copied().unwrap_or(0.0) * v)
            .sum::<f64>()
            .clamp(0.0, 1.0);
        Self {
            per_metric,
            weights,
            composite,
        }
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.per_metric.get(&metric).copied()
    }
}

/// Scores `recovered_text` against `original`.
///
/// The recovered text is first canonicalized in the original's format when
/// it parses; otherwise it is scored as raw text. Embedding metrics use
/// `embedder` when given and the offline trigram embedding otherwise.
pub fn score(
    original: &Record,
    recovered_text: &str,
    cfg: &MetricConfig,
    embedder: Option<&dyn Embedder>,
) -> Result<CompositeScore, MetricError> {
    let weights = cfg.normalized_weights()?;
    let reference = original.canonical_text.as_str();
    let candidate = original.canonicalize(recovered_text);
    let cand_tokens = cfg.tokenizer.tokenize(&candidate);
    let ref_tokens = cfg.tokenizer.tokenize(reference);

    let mut per_metric = BTreeMap::new();
    for &metric in &cfg.enabled {
        let value = match metric {
            Metric::Bleu => bleu_smoothed(&cand_tokens, &ref_tokens, cfg.bleu_max_n),
            Metric::RougeL => rouge_l(&cand_tokens, &ref_tokens, cfg.rouge_beta),
            Metric::StsCosine | Metric::BertCosine => {
                let model = if metric == Metric::StsCosine {
                    &cfg.sts_model
                } else {
                    &cfg.bert_model
                };
                embedding_similarity(&candidate, reference, model, embedder)?.max(0.0)
            }
        };
        per_metric.insert(metric, value);
    }
    Ok(CompositeScore::combine(per_metric, weights))
}

fn embedding_similarity(
    candidate: &str,
    reference: &str,
    model: &str,
    embedder: Option<&dyn Embedder>,
) -> Result<f64, MetricError> {
    let Some(embedder) = embedder else {
        return Ok(lexical_similarity(candidate, reference));
    };
    let texts = [candidate.to_string(), reference.to_string()];
    let vectors = embedder.embed(model, &texts)?;
    if vectors.len() != texts.len() {
        return Err(MetricError::ProviderShape {
            expected: texts.len(),
            got: vectors.len(),
        });
    }
    if candidate == reference {
        return Ok(1.0);
    }
    cosine_similarity(&vectors[0], &vectors[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{random_cell_graph, OperatorVocabulary};

    fn all_metrics() -> MetricConfig {
        MetricConfig::with_metrics(&Metric::ALL)
    }

    #[test]
    fn identity_scores_one() {
        let v = OperatorVocabulary::default_of_size(5);
        let r = Record::cell("a", random_cell_graph(1, &v, 4));
        let s = score(&r, &r.canonical_text, &all_metrics(), None).unwrap();
        assert!((s.composite - 1.0).abs() < 1e-9);
        assert!(s.per_metric.values().all(|&x| (x - 1.0).abs() < 1e-9));
    }

    #[test]
    fn composite_arithmetic() {
        let weights = BTreeMap::from([(Metric::Bleu, 0.5), (Metric::RougeL, 0.5)]);
        let per = BTreeMap::from([(Metric::Bleu, 1.0), (Metric::RougeL, 0.5)]);
        assert_eq!(CompositeScore::combine(per, weights).composite, 0.75);
    }

    #[test]
    fn weights_are_normalized() {
        let cfg = MetricConfig {
            weights: BTreeMap::from([(Metric::Bleu, 3.0), (Metric::RougeL, 1.0)]),
            ..MetricConfig::default()
        };
        let w = cfg.normalized_weights().unwrap();
        assert_eq!(w[&Metric::Bleu], 0.75);
        assert_eq!(w[&Metric::RougeL], 0.25);
        assert_eq!(
            MetricConfig::default().normalized_weights().unwrap()[&Metric::Bleu],
            0.5
        );
    }

    #[test]
    fn invalid_configs() {
        assert!(MetricConfig::with_metrics(&[]).normalized_weights().is_err());
        let mut cfg = MetricConfig::with_metrics(&[Metric::Bleu]);
        cfg.weights.insert(Metric::RougeL, 1.0);
        assert!(cfg.normalized_weights().is_err());
        let cfg = MetricConfig {
            weights: BTreeMap::from([(Metric::Bleu, -1.0), (Metric::RougeL, 2.0)]),
            ..MetricConfig::default()
        };
        assert!(cfg.normalized_weights().is_err());
        let cfg = MetricConfig {
            rouge_beta: 0.0,
            ..MetricConfig::default()
        };
        assert!(cfg.normalized_weights().is_err());
    }

    #[test]
    fn unparseable_recovery_is_scored_as_text() {
        let r = Record::raw_text("t", "a b c d");
        let s = score(&r, "  a b  x d ", &MetricConfig::default(), None).unwrap();
        assert!(s.composite > 0.0 && s.composite < 1.0);
        let v = OperatorVocabulary::default_of_size(3);
        let cell = Record::cell("c", random_cell_graph(3, &v, 2));
        let s = score(&cell, "not a cell", &MetricConfig::default(), None).unwrap();
        assert_eq!(s.composite, 0.0);
    }

    #[test]
    fn metric_names_round_trip() {
        for m in Metric::ALL {
            assert_eq!(m.name().parse::<Metric>().unwrap(), m);
            assert_eq!(serde_json::to_string(&m).unwrap(), format!("\"{}\"", m.name()));
        }
    }

    struct Fixed(Vec<Vec<f64>>);
    impl Embedder for Fixed {
        fn embed(&self, _: &str, _: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn provider_vectors_and_clamping() {
        let r = Record::raw_text("t", "hello world");
        let cfg = MetricConfig::with_metrics(&[Metric::StsCosine]);
        let opposite = Fixed(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let s = score(&r, "goodbye", &cfg, Some(&opposite)).unwrap();
        assert_eq!(s.composite, 0.0);
        let short = Fixed(vec![vec![1.0]]);
        assert!(matches!(
            score(&r, "goodbye", &cfg, Some(&short)),
            Err(MetricError::ProviderShape { expected: 2, got: 1 })
        ));
    }
}
