//! One-shot template tuning by generate–recover feedback.
//!
//! Each iteration samples a support record, summarizes it with the current
//! best template, recovers the record from the summary and scores the
//! reconstruction. A candidate template `{record, summary}` replaces the
//! best one only if its support score beats the best support score and its
//! mean validation score beats the best validation score, both strictly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError, CountingBackend, GenerationParams};
use crate::dataset::{DatasetSplit, Record};
use crate::metrics::{score, CompositeScore, Embedder, MetricConfig, MetricError};
use crate::prompting::{
    build_generation_prompt, build_recovery_prompt, check_budget, BudgetLimits, InstructionSet, PromptError,
    PromptMode, Template, TemplateOrigin,
};

/// Consecutive failed iterations after which tuning gives up.
pub const MAX_CONSECUTIVE_FAILURES: usize = 3;

#[derive(Debug, Error)]
pub enum StepError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Error)]
pub enum TuningError {
    #[error("invalid tuning configuration: {0}")]
    Config(String),
    #[error("support set is empty")]
    EmptySupport,
    #[error("validation set is empty")]
    EmptyValidation,
    #[error("{failures} consecutive iterations failed, last at iteration {iteration}: {source}")]
    Fatal {
        failures: usize,
        iteration: usize,
        #[source]
        source: StepError,
    },
    #[error("trace sink failed: {0}")]
    Sink(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningConfig {
    pub max_iterations: usize,
    pub tuning_temperature: f64,
    pub generation_max_tokens: u32,
    pub recovery_max_tokens: u32,
    pub validation_temperature: f64,
    pub patience: Option<usize>,
    pub seed: u64,
    pub mode: PromptMode,
    /// Filled from the run's metric section when loaded from a config file.
    #[serde(skip)]
    pub metric: MetricConfig,
}

impl Default for TuningConfig {
    fn default() -> Self {
        Self {
            max_iterations: 10,
            tuning_temperature: 1.0,
            generation_max_tokens: 350,
            recovery_max_tokens: 500,
            validation_temperature: 0.0,
            patience: None,
            seed: 0,
            mode: PromptMode::OneShot,
            metric: MetricConfig::default(),
        }
    }
}

impl TuningConfig {
    pub fn validate(&self) -> Result<(), TuningError> {
        let temp_ok = |t: f64| (0.0..=2.0).contains(&t);
        if !temp_ok(self.tuning_temperature) || !temp_ok(self.validation_temperature) {
            return Err(TuningError::Config("temperatures must lie in [0, 2]".into()));
        }
        if self.generation_max_tokens == 0 || self.recovery_max_tokens == 0 {
            return Err(TuningError::Config("max token limits must be positive".into()));
        }
        if let Some(p) = self.patience {
            if p == 0 || p > self.max_iterations {
                return Err(TuningError::Config("patience must be in 1..=max_iterations".into()));
            }
        }
        self.metric
            .normalized_weights()
            .map_err(|e| TuningError::Config(e.to_string()))?;
        Ok(())
    }
}

/// Everything a model round trip needs besides the data itself.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub instructions: &'a InstructionSet,
    pub backend: &'a dyn Backend,
    pub model: &'a str,
    /// Embedding provider for cosine metrics; `None` uses the offline embedding.
    pub embedder: Option<&'a dyn Embedder>,
    pub budget: BudgetLimits,
}

impl<'a> Pipeline<'a> {
    pub fn new(instructions: &'a InstructionSet, backend: &'a dyn Backend, model: &'a str) -> Self {
        Self {
            instructions,
            backend,
            model,
            embedder: None,
            budget: BudgetLimits::default(),
        }
    }

    fn with_backend(self, backend: &'a dyn Backend) -> Self {
        Self { backend, ..self }
    }

    pub fn params(&self, temperature: f64, max_tokens: u32) -> GenerationParams {
        GenerationParams::new(self.model, temperature, max_tokens)
    }
}

/// Summarizes `record` with the template (or without one in zero-shot mode).
pub fn generate_summary(
    pipeline: &Pipeline<'_>,
    record: &Record,
    template: &Template,
    mode: PromptMode,
    params: &GenerationParams,
) -> Result<String, StepError> {
    let messages = build_generation_prompt(pipeline.instructions, template, record, mode)?;
    for w in check_budget(&messages, &pipeline.budget) {
        log::warn!("generation prompt for {}: {w}", record.id);
    }
    Ok(pipeline.backend.chat(&messages, params)?.trim().to_string())
}

/// Reconstructs a record from `summary`. Returns the trimmed completion.
pub fn recover_record(
    pipeline: &Pipeline<'_>,
    summary: &str,
    template: &Template,
    mode: PromptMode,
    params: &GenerationParams,
) -> Result<String, StepError> {
    let messages = build_recovery_prompt(pipeline.instructions, template, summary, mode)?;
    for w in check_budget(&messages, &pipeline.budget) {
        log::warn!("recovery prompt: {w}");
    }
    Ok(pipeline.backend.chat(&messages, params)?.trim().to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundTrip {
    pub summary: String,
    pub recovered: String,
    pub score: CompositeScore,
}

/// Generate, recover and score one record. An empty summary skips the
/// recovery call and scores an empty reconstruction.
pub fn round_trip(
    pipeline: &Pipeline<'_>,
    record: &Record,
    template: &Template,
    mode: PromptMode,
    generation: &GenerationParams,
    recovery: &GenerationParams,
    metric: &MetricConfig,
) -> Result<RoundTrip, StepError> {
    let summary = generate_summary(pipeline, record, template, mode, generation)?;
    let recovered = if summary.is_empty() {
        String::new()
    } else {
        recover_record(pipeline, &summary, template, mode, recovery)?
    };
    let score = score(record, &recovered, metric, pipeline.embedder)?;
    Ok(RoundTrip {
        summary,
        recovered,
        score,
    })
}

/// Mean composite recovery score of `candidate` over the validation set.
pub fn evaluate_validation(
    pipeline: &Pipeline<'_>,
    candidate: &Template,
    validation: &[Record],
    cfg: &TuningConfig,
) -> Result<f64, StepError> {
    assert!(!validation.is_empty(), "validation set must be non-empty");
    let gen = pipeline.params(cfg.validation_temperature, cfg.generation_max_tokens);
    let rec = pipeline.params(cfg.validation_temperature, cfg.recovery_max_tokens);
    let mut total = 0.0;
    for record in validation {
        total += round_trip(pipeline, record, candidate, cfg.mode, &gen, &rec, &cfg.metric)?
            .score
            .composite;
    }
    Ok(total / validation.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based iteration number.
    pub iteration: usize,
    pub sampled_record_id: String,
    pub summary: String,
    pub recovered: String,
    pub support_score: Option<CompositeScore>,
    pub validation_score: Option<f64>,
    pub gate_support: bool,
    pub gate_validation: Option<bool>,
    pub template_updated: bool,
    /// Best scores after this iteration.
    pub best_support_score: f64,
    pub best_validation_score: f64,
    /// Logical clock: backend calls issued by this run before and after the
    /// iteration.
    pub calls_before: u64,
    pub calls_after: u64,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningState {
    pub iteration: usize,
    pub best_template: Template,
    pub best_support_score: f64,
    pub best_validation_score: f64,
    pub trace: Vec<IterationRecord>,
    pub backend_calls: u64,
}

impl TuningState {
    pub fn new(initial: Template) -> Self {
        Self {
            iteration: 0,
            best_template: initial,
            best_support_score: 0.0,
            best_validation_score: 0.0,
            trace: Vec::new(),
            backend_calls: 0,
        }
    }

    /// Iteration of the most recent template update, if any.
    pub fn last_update_iteration(&self) -> Option<usize> {
        self.trace
            .iter()
            .rev()
            .find(|r| r.template_updated)
            .map(|r| r.iteration)
    }
}

#[derive(Serialize)]
struct TraceRow<'a> {
    iteration: usize,
    support_score: Option<f64>,
    validation_score: Option<f64>,
    updated: bool,
    sampled_record_id: &'a str,
    gate_support: bool,
    gate_validation: Option<bool>,
    best_support_score: f64,
    best_validation_score: f64,
    calls_before: u64,
    calls_after: u64,
    error: Option<&'a str>,
}

/// Flat CSV view of a trace, one row per iteration.
pub fn write_trace_csv(path: &std::path::Path, trace: &[IterationRecord]) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_path(path)?;
    for r in trace {
        w.serialize(TraceRow {
            iteration: r.iteration,
            sampled_record_id: &r.sampled_record_id,
            support_score: r.support_score.as_ref().map(|s| s.composite),
            validation_score: r.validation_score,
            gate_support: r.gate_support,
            gate_validation: r.gate_validation,
            updated: r.template_updated,
            best_support_score: r.best_support_score,
            best_validation_score: r.best_validation_score,
            calls_before: r.calls_before,
            calls_after: r.calls_after,
            error: r.error.as_deref(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Uniform sampling without replacement; reshuffles once the pool is used up.
#[derive(Debug, Clone)]
pub struct SupportSampler {
    order: Vec<usize>,
    next: usize,
    rng: ChaCha8Rng,
}

impl SupportSampler {
    pub fn new(pool_size: usize, seed: u64) -> Self {
        Self {
            order: (0..pool_size).collect(),
            next: pool_size,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn next_index(&mut self) -> usize {
        if self.next >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.next = 0;
        }
        self.next += 1;
        self.order[self.next - 1]
    }
}

/// One gated update. On a failed backend call the iteration is recorded with
/// its error and the best state is left unchanged.
pub fn tuning_step(
    state: &mut TuningState,
    sampled: &Record,
    pipeline: &Pipeline<'_>,
    validation: &[Record],
    cfg: &TuningConfig,
    calls: &dyn Fn() -> u64,
) -> (IterationRecord, Option<StepError>) {
    state.iteration += 1;
    let iteration = state.iteration;
    let calls_before = calls();
    let mut record = IterationRecord {
        iteration,
        sampled_record_id: sampled.id.clone(),
        summary: String::new(),
        recovered: String::new(),
        support_score: None,
        validation_score: None,
        gate_support: false,
        gate_validation: None,
        template_updated: false,
        best_support_score: state.best_support_score,
        best_validation_score: state.best_validation_score,
        calls_before,
        calls_after: calls_before,
        error: None,
    };
    let gen = pipeline.params(cfg.tuning_temperature, cfg.generation_max_tokens);
    let rec = pipeline.params(cfg.tuning_temperature, cfg.recovery_max_tokens);
    let mut failure = None;
    match round_trip(
        pipeline,
        sampled,
        &state.best_template,
        cfg.mode,
        &gen,
        &rec,
        &cfg.metric,
    ) {
        Err(e) => failure = Some(e),
        Ok(trip) => {
            let support = trip.score.composite;
            record.summary = trip.summary;
            record.recovered = trip.recovered;
            record.support_score = Some(trip.score);
            record.gate_support = support > state.best_support_score;
            if record.gate_support {
                let candidate = Template::new(
                    sampled.canonical_text.clone(),
                    record.summary.clone(),
                    TemplateOrigin::Iteration(iteration),
                );
                let outcome = candidate
                    .map_err(StepError::from)
                    .and_then(|c| evaluate_validation(pipeline, &c, validation, cfg).map(|v| (c, v)));
                match outcome {
                    Err(e) => failure = Some(e),
                    Ok((candidate, v)) => {
                        let passed = v > state.best_validation_score;
                        record.validation_score = Some(v);
                        record.gate_validation = Some(passed);
                        if passed {
                            state.best_template = candidate;
                            state.best_support_score = support;
                            state.best_validation_score = v;
                            record.template_updated = true;
                        }
                    }
                }
            }
        }
    }
    record.error = failure.as_ref().map(ToString::to_string);
    record.best_support_score = state.best_support_score;
    record.best_validation_score = state.best_validation_score;
    record.calls_after = calls();
    state.trace.push(record.clone());
    (record, failure)
}

/// Runs up to `cfg.max_iterations` gated updates starting from `initial`.
///
/// `on_iteration` sees every iteration record as soon as it is complete.
/// Returns an error after [`MAX_CONSECUTIVE_FAILURES`] failed iterations in a
/// row; records already passed to `on_iteration` are the partial trace.
pub fn run_tuning(
    cfg: &TuningConfig,
    split: &DatasetSplit,
    initial: Template,
    pipeline: &Pipeline<'_>,
    on_iteration: &mut dyn FnMut(&IterationRecord) -> std::io::Result<()>,
) -> Result<TuningState, TuningError> {
    cfg.validate()?;
    let mut state = TuningState::new(initial);
    if cfg.max_iterations == 0 {
        return Ok(state);
    }
    if split.support.is_empty() {
        return Err(TuningError::EmptySupport);
    }
    if split.validation.is_empty() {
        return Err(TuningError::EmptyValidation);
    }
    let counter = CountingBackend::new(pipeline.backend);
    let counted = pipeline.with_backend(&counter);
    let calls = || counter.chat_calls() + counter.embed_calls();
    let mut sampler = SupportSampler::new(split.support.len(), cfg.seed);
    let mut consecutive_failures = 0;
    let mut since_update = 0;
    for _ in 0..cfg.max_iterations {
        let sampled = &split.support[sampler.next_index()];
        let (record, failure) = tuning_step(&mut state, sampled, &counted, &split.validation, cfg, &calls);
        on_iteration(&record)?;
        state.backend_calls = calls();
        if let Some(source) = failure {
            log::warn!("iteration {} failed: {source}", record.iteration);
            consecutive_failures += 1;
            if consecutive_failures >= MAX_CONSECUTIVE_FAILURES {
                return Err(TuningError::Fatal {
                    failures: consecutive_failures,
                    iteration: record.iteration,
                    source,
                });
            }
        } else {
            consecutive_failures = 0;
        }
        since_update = if record.template_updated { 0 } else { since_update + 1 };
        if cfg.patience.is_some_and(|p| since_update >= p) {
            log::info!("no template update for {since_update} iterations, stopping early");
            break;
        }
    }
    Ok(state)
}
