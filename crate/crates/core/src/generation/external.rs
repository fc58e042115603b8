use std::collections::BTreeMap;
use std::time::Duration;

use reqwest::blocking::Client;
use serde::Serialize;

use super::{AnnotationRun, GenerationError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ScorerPair<'a> {
    pub data: &'a str,
    pub summary: &'a str,
}

/// A service rating (data, summary) pairs, one real number per pair.
pub trait ExternalScorer: Sync {
    fn name(&self) -> &str;

    fn score(&self, pairs: &[ScorerPair<'_>]) -> Result<Vec<f64>, GenerationError>;
}

/// POSTs the pairs as a JSON array and expects a JSON array of numbers back.
pub struct HttpScorer {
    name: String,
    url: String,
    client: Client,
}

impl HttpScorer {
    pub fn new(name: impl Into<String>, url: impl Into<String>) -> Result<Self, GenerationError> {
        let client = Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| GenerationError::ScorerUnavailable(e.to_string()))?;
        Ok(Self {
            name: name.into(),
            url: url.into(),
            client,
        })
    }
}

impl ExternalScorer for HttpScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, pairs: &[ScorerPair<'_>]) -> Result<Vec<f64>, GenerationError> {
        let unavailable = |e: reqwest::Error| GenerationError::ScorerUnavailable(format!("{}: {e}", self.url));
        let response = self.client.post(&self.url).json(pairs).send().map_err(unavailable)?;
        let status = response.status();
        if !status.is_success() {
            return Err(GenerationError::ScorerUnavailable(format!(
                "{} returned {status}",
                self.url
            )));
        }
        response.json::<Vec<f64>>().map_err(unavailable)
    }
}

/// Scores every summarized record of `run`. Returns record id → score.
pub fn external_score(
    run: &AnnotationRun,
    scorer: &dyn ExternalScorer,
) -> Result<BTreeMap<String, f64>, GenerationError> {
    let (ids, pairs): (Vec<&str>, Vec<ScorerPair<'_>>) = run
        .records
        .iter()
        .zip(&run.outcomes)
        .filter_map(|(r, o)| {
            let summary = o.summary.as_deref()?;
            Some((
                r.id.as_str(),
                ScorerPair {
                    data: &r.canonical_text,
                    summary,
                },
            ))
        })
        .unzip();
    if pairs.is_empty() {
        return Ok(BTreeMap::new());
    }
    let scores = scorer.score(&pairs)?;
    if scores.len() != pairs.len() {
        return Err(GenerationError::ScorerUnavailable(format!(
            "{} returned {} scores for {} pairs",
            scorer.name(),
            scores.len(),
            pairs.len()
        )));
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(GenerationError::ScorerUnavailable(format!(
            "{} returned {bad}",
            scorer.name()
        )));
    }
    Ok(ids.into_iter().map(String::from).zip(scores).collect())
}
