//! Annotation of the generation set with a fixed template, recovery
//! scoring and fold-level reporting.

mod external;
mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{FoldAssignment, Record};
use crate::metrics::{score, CompositeScore, MetricConfig};
use crate::prompting::{PromptMode, Template};
use crate::tuning::{generate_summary, recover_record, Pipeline};

pub use external::{external_score, ExternalScorer, HttpScorer, ScorerPair};
pub use report::{
    aggregate, aggregate_with_external, mean_and_std_error, ExternalStats, FoldStats, GroupStats, MetricStat, Report,
    COMPOSITE,
};

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("{stage}: {failed} of {total} records failed")]
    TooManyFailures {
        stage: &'static str,
        failed: usize,
        total: usize,
    },
    #[error("record {0} has no fold assignment")]
    MissingFold(String),
    #[error("external scorer unavailable: {0}")]
    ScorerUnavailable(String),
    #[error("invalid generation configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Csv { path: PathBuf, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_tokens: u32,
    pub recovery_max_tokens: u32,
    pub folds: usize,
    pub concurrency: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: 350,
            recovery_max_tokens: 500,
            folds: 5,
            concurrency: 4,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<(), GenerationError> {
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GenerationError::Config("temperature must lie in [0, 2]".into()));
        }
        if self.max_tokens == 0 || self.recovery_max_tokens == 0 {
            return Err(GenerationError::Config("max token limits must be positive".into()));
        }
        if self.folds < 2 {
            return Err(GenerationError::Config("at least 2 folds are required".into()));
        }
        if self.concurrency == 0 {
            return Err(GenerationError::Config("concurrency must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordOutcome {
    pub id: String,
    pub summary: Option<String>,
    pub recovered: Option<String>,
    pub score: Option<CompositeScore>,
    pub error: Option<String>,
}

impl RecordOutcome {
    fn pending(id: &str) -> Self {
        Self {
            id: id.to_string(),
            summary: None,
            recovered: None,
            score: None,
            error: None,
        }
    }
}

/// Summaries (and, after [`evaluate_recovery`], reconstructions and scores)
/// for a set of records, ordered by record id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRun {
    pub template: Template,
    pub mode: PromptMode,
    pub records: Vec<Record>,
    pub outcomes: Vec<RecordOutcome>,
}

impl AnnotationRun {
    pub fn failed(&self) -> usize {
        self.outcomes.iter().filter(|o| o.error.is_some()).count()
    }

    pub fn scored(&self) -> impl Iterator<Item = (&Record, &CompositeScore)> {
        self.records
            .iter()
            .zip(&self.outcomes)
            .filter_map(|(r, o)| o.score.as_ref().map(|s| (r, s)))
    }
}

/// Applies `f` to every item on at most `limit` threads. Output order
/// matches input order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], limit: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = limit.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(item) = items.get(i) else { break };
                let out = f(item);
                *slots[i].lock().expect("slot poisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot poisoned").expect("every slot filled"))
        .collect()
}

fn check_failures(stage: &'static str, run: &AnnotationRun) -> Result<(), GenerationError> {
    let failed = run.failed();
    let total = run.outcomes.len();
    if failed * 2 > total {
        return Err(GenerationError::TooManyFailures { stage, failed, total });
    }
    if failed > 0 {
        log::warn!("{stage}: {failed} of {total} records failed");
    }
    Ok(())
}

/// Summarizes every record with `template`. Individual failures are kept in
/// the run; more than half failing is an error.
pub fn annotate(
    records: &[Record],
    template: &Template,
    pipeline: &Pipeline<'_>,
    cfg: &GenerationConfig,
    mode: PromptMode,
) -> Result<AnnotationRun, GenerationError> {
    cfg.validate()?;
    let mut records = records.to_vec();
    records.sort_by(|a, b| a.id.cmp(&b.id));
    let params = pipeline.params(cfg.temperature, cfg.max_tokens);
    let outcomes = parallel_map(&records, cfg.concurrency, |record| {
        let mut outcome = RecordOutcome::pending(&record.id);
        match generate_summary(pipeline, record, template, mode, &params) {
            Ok(s) => outcome.summary = Some(s),
            Err(e) => outcome.error = Some(format!("generation: {e}")),
        }
        outcome
    });
    let run = AnnotationRun {
        template: template.clone(),
        mode,
        records,
        outcomes,
    };
    check_failures("generation", &run)?;
    Ok(run)
}

/// Recovers every summarized record and scores the reconstruction.
pub fn evaluate_recovery(
    run: &mut AnnotationRun,
    pipeline: &Pipeline<'_>,
    cfg: &GenerationConfig,
    metric: &MetricConfig,
) -> Result<(), GenerationError> {
    metric
        .normalized_weights()
        .map_err(|e| GenerationError::Config(e.to_string()))?;
    let params = pipeline.params(cfg.temperature, cfg.recovery_max_tokens);
    let jobs: Vec<(&Record, &RecordOutcome)> = run.records.iter().zip(&run.outcomes).collect();
    let (template, mode) = (&run.template, run.mode);
    let updated = parallel_map(&jobs, cfg.concurrency, |&(record, outcome)| {
        let mut outcome = outcome.clone();
        let Some(summary) = outcome.summary.as_deref().filter(|_| outcome.error.is_none()) else {
            return outcome;
        };
        let recovered = if summary.is_empty() {
            Ok(String::new())
        } else {
            recover_record(pipeline, summary, template, mode, &params)
        };
        match recovered {
            Err(e) => outcome.error = Some(format!("recovery: {e}")),
            Ok(text) => match score(record, &text, metric, pipeline.embedder) {
                Ok(s) => {
                    outcome.recovered = Some(text);
                    outcome.score = Some(s);
                }
                Err(e) => {
                    outcome.recovered = Some(text);
                    outcome.error = Some(format!("scoring: {e}"));
                }
            },
        }
        outcome
    });
    run.outcomes = updated;
    check_failures("recovery", run)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeComparison {
    pub one_shot: Report,
    pub zero_shot: Report,
    /// One-shot minus zero-shot overall mean, per metric.
    pub delta: BTreeMap<String, f64>,
}

/// Annotates and evaluates `records` with and without the template.
pub fn compare_modes(
    records: &[Record],
    template: &Template,
    pipeline: &Pipeline<'_>,
    cfg: &GenerationConfig,
    metric: &MetricConfig,
    folds: &FoldAssignment,
) -> Result<ModeComparison, GenerationError> {
    let report = |mode| -> Result<Report, GenerationError> {
        let mut run = annotate(records, template, pipeline, cfg, mode)?;
        evaluate_recovery(&mut run, pipeline, cfg, metric)?;
        aggregate(&run, folds)
    };
    let one_shot = report(PromptMode::OneShot)?;
    let zero_shot = report(PromptMode::ZeroShot)?;
    let delta = mode_delta(&one_shot, &zero_shot);
    Ok(ModeComparison {
        one_shot,
        zero_shot,
        delta,
    })
}

/// `one_shot - zero_shot` overall mean for every metric both reports have.
pub fn mode_delta(one_shot: &Report, zero_shot: &Report) -> BTreeMap<String, f64> {
    one_shot
        .overall
        .metrics
        .iter()
        .filter_map(|(name, stat)| Some((name.clone(), stat.mean? - zero_shot.overall_mean(name)?)))
        .collect()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> GenerationError + '_ {
    move |source| GenerationError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_jsonl<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), GenerationError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(&row).expect("rows serialize"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

#[derive(Serialize)]
struct SummaryLine<'a> {
    id: &'a str,
    summary: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

#[derive(Serialize)]
struct RecoveredLine<'a> {
    id: &'a str,
    recovered: Option<&'a str>,
    scores: Option<&'a BTreeMap<crate::metrics::Metric, f64>>,
    composite: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<&'a str>,
}

/// One JSON object per record: `{id, summary, error?}`.
pub fn write_summaries(path: &Path, run: &AnnotationRun) -> Result<(), GenerationError> {
    write_jsonl(
        path,
        run.outcomes.iter().map(|o| SummaryLine {
            id: &o.id,
            summary: o.summary.as_deref(),
            error: o.error.as_deref(),
        }),
    )
}

/// One JSON object per record: `{id, recovered, scores, composite, error?}`.
pub fn write_recovered(path: &Path, run: &AnnotationRun) -> Result<(), GenerationError> {
    write_jsonl(
        path,
        run.outcomes.iter().map(|o| RecoveredLine {
            id: &o.id,
            recovered: o.recovered.as_deref(),
            scores: o.score.as_ref().map(|s| &s.per_metric),
            composite: o.score.as_ref().map(|s| s.composite),
            error: o.error.as_deref(),
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{Backend, BackendError, ChatMessage, GenerationParams, MockBackend, MockConfig};
    use crate::dataset::{kfold_split, synthetic_cells, OperatorVocabulary};
    use crate::prompting::{InstructionSet, TemplateOrigin};

    fn vocab() -> OperatorVocabulary {
        OperatorVocabulary::default_of_size(5)
    }

    fn template() -> Template {
        let cell = synthetic_cells(1, 4, &vocab(), 500).remove(0);
        let text = cell.canonical_text.clone();
        let backend = MockBackend::new(MockConfig::new(1.0, 0.0, 0, vocab())).unwrap();
        let s = backend
            .chat(
                &[ChatMessage::system("e"), ChatMessage::user(text.clone())],
                &GenerationParams::new("m", 0.0, 9),
            )
            .unwrap();
        Template::new(text, s, TemplateOrigin::HumanSeed).unwrap()
    }

    #[test]
    fn parallel_map_keeps_order() {
        let items: Vec<u32> = (0..100).collect();
        assert_eq!(
            parallel_map(&items, 7, |x| x * 2),
            items.iter().map(|x| x * 2).collect::<Vec<_>>()
        );
        assert!(parallel_map(&Vec::<u32>::new(), 4, |x| *x).is_empty());
    }

    #[test]
    fn perfect_mock_end_to_end() {
        let backend = MockBackend::new(MockConfig::new(1.0, 0.0, 3, vocab())).unwrap();
        let instr = InstructionSet::new("e", "d").unwrap();
        let p = Pipeline::new(&instr, &backend, "mock");
        let records = synthetic_cells(12, 4, &vocab(), 9);
        let cfg = GenerationConfig::default();
        let mut run = annotate(&records, &template(), &p, &cfg, PromptMode::OneShot).unwrap();
        evaluate_recovery(&mut run, &p, &cfg, &MetricConfig::default()).unwrap();
        assert_eq!(run.failed(), 0);
        assert!(run.scored().all(|(_, s)| (s.composite - 1.0).abs() < 1e-12));
        let ids: Vec<&str> = run.records.iter().map(|r| r.id.as_str()).collect();
        let folds = kfold_split(&ids, 3, 1).unwrap();
        let report = aggregate(&run, &folds).unwrap();
        assert_eq!(report.overall.n, 12);
        assert_eq!(report.overall.metrics["composite"].mean, Some(1.0));
    }

    struct Flaky {
        fail_every: usize,
        calls: AtomicUsize,
    }

    impl Backend for Flaky {
        fn chat(&self, _: &[ChatMessage], _: &GenerationParams) -> Result<String, BackendError> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n.is_multiple_of(self.fail_every) {
                Err(BackendError::Http {
                    status: 400,
                    body: "bad".into(),
                })
            } else {
                Ok("x".into())
            }
        }
        fn embed(&self, _: &str, _: &[String]) -> Result<Vec<Vec<f64>>, BackendError> {
            unreachable!()
        }
    }

    #[test]
    fn failure_threshold() {
        let instr = InstructionSet::new("e", "d").unwrap();
        let records: Vec<Record> = (0..10).map(|i| Record::raw_text(format!("r{i}"), "a b")).collect();
        let cfg = GenerationConfig {
            concurrency: 1,
            ..GenerationConfig::default()
        };

        let some = Flaky {
            fail_every: 3,
            calls: AtomicUsize::new(0),
        };
        let run = annotate(
            &records,
            &template(),
            &Pipeline::new(&instr, &some, "m"),
            &cfg,
            PromptMode::OneShot,
        )
        .unwrap();
        assert_eq!(run.failed(), 4);

        let most = Flaky {
            fail_every: 1,
            calls: AtomicUsize::new(0),
        };
        let err = annotate(
            &records,
            &template(),
            &Pipeline::new(&instr, &most, "m"),
            &cfg,
            PromptMode::OneShot,
        )
        .unwrap_err();
        assert!(matches!(
            err,
            GenerationError::TooManyFailures {
                failed: 10,
                total: 10,
                ..
            }
        ));
    }

    #[test]
    fn artifacts_have_one_line_per_record() {
        let backend = MockBackend::new(MockConfig::new(0.5, 0.0, 3, vocab())).unwrap();
        let instr = InstructionSet::new("e", "d").unwrap();
        let p = Pipeline::new(&instr, &backend, "mock");
        let cfg = GenerationConfig::default();
        let mut run = annotate(
            &synthetic_cells(5, 3, &vocab(), 1),
            &template(),
            &p,
            &cfg,
            PromptMode::ZeroShot,
        )
        .unwrap();
        evaluate_recovery(&mut run, &p, &cfg, &MetricConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_summaries(&dir.path().join("s.jsonl"), &run).unwrap();
        write_recovered(&dir.path().join("r.jsonl"), &run).unwrap();
        let s = std::fs::read_to_string(dir.path().join("s.jsonl")).unwrap();
        let r = std::fs::read_to_string(dir.path().join("r.jsonl")).unwrap();
        assert_eq!(s.lines().count(), 5);
        let first: serde_json::Value = serde_json::from_str(r.lines().next().unwrap()).unwrap();
        assert_eq!(first["id"], "cell-0000");
        assert!(first["scores"]["bleu"].is_number());
    }

    #[test]
    fn config_validation() {
        assert!(GenerationConfig::default().validate().is_ok());
        assert!(GenerationConfig {
            folds: 1,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(GenerationConfig {
            concurrency: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
