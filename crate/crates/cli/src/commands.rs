use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use annoloop_core::backend::{Backend, BackendKind, CountingBackend, ReplayBackend};
use annoloop_core::dataset::{kfold_split, split_dataset, DatasetSplit, Record};
use annoloop_core::generation::{
    aggregate_with_external, annotate, evaluate_recovery, external_score, mode_delta, write_recovered, write_summaries,
    AnnotationRun, HttpScorer, Report,
};
use annoloop_core::metrics::{Embedder, Metric, MetricConfig};
use annoloop_core::prompting::{InstructionSet, PromptMode, Template};
use annoloop_core::tuning::{run_tuning, write_trace_csv, IterationRecord, Pipeline, TuningError, TuningState};
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{load_template, ConfigError, Overrides, RunConfig};

pub const TUNING_RESULT: &str = "tuning_result.json";
pub const TRACE_JSONL: &str = "trace.jsonl";
pub const TRACE_CSV: &str = "trace.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

/// The configured backend plus a counter on the live (uncached) part.
pub struct BackendStack {
    live: Option<Arc<CountingBackend<Box<dyn Backend>>>>,
    top: Box<dyn Backend>,
}

impl BackendStack {
    pub fn build(kind: &BackendKind) -> Result<Self> {
        let counted = |k: &BackendKind| -> Result<Arc<CountingBackend<Box<dyn Backend>>>> {
            Ok(Arc::new(CountingBackend::new(k.build()?)))
        };
        Ok(match kind {
            BackendKind::Replay { cache_path, fallback } => {
                let live = fallback.as_deref().map(counted).transpose()?;
                let fallback = live.clone().map(|b| Box::new(b) as Box<dyn Backend>);
                let top = ReplayBackend::open(cache_path, fallback)?;
                Self {
                    live,
                    top: Box::new(top),
                }
            }
            other => {
                let live = counted(other)?;
                Self {
                    live: Some(live.clone()),
                    top: Box::new(live),
                }
            }
        })
    }

    pub fn backend(&self) -> &dyn Backend {
        self.top.as_ref()
    }

    pub fn embedder(&self) -> &dyn Embedder {
        &self.top
    }

    /// Requests that reached the live backend, i.e. were not served from cache.
    pub fn upstream_calls(&self) -> u64 {
        self.live.as_ref().map_or(0, |b| b.chat_calls() + b.embed_calls())
    }
}

fn pipeline<'a>(
    instructions: &'a InstructionSet,
    stack: &'a BackendStack,
    model: &'a str,
    metric: &MetricConfig,
) -> Pipeline<'a> {
    let mut p = Pipeline::new(instructions, stack.backend(), model);
    if metric.enabled.iter().any(|m| m.is_embedding()) {
        p.embedder = Some(stack.embedder());
    }
    p
}

/// Loads, overrides and fully validates a config.
pub fn prepare(config_path: &Path, overrides: &Overrides) -> Result<(RunConfig, Vec<Record>), ConfigError> {
    let mut cfg = RunConfig::load(config_path)?;
    cfg.apply(overrides);
    let records = cfg.validate()?;
    Ok((cfg, records))
}

pub fn cmd_validate(config_path: &Path) -> Result<RunConfig> {
    let (cfg, records) = prepare(config_path, &Overrides::default())?;
    log::info!("{} records, configuration is valid", records.len());
    Ok(cfg)
}

fn split(cfg: &RunConfig, records: &[Record]) -> Result<DatasetSplit> {
    let s = &cfg.dataset.split;
    Ok(split_dataset(records, s.support_n, s.validation_n, s.seed)?)
}

fn create_output_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output directory {}", cfg.output_dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningResult {
    pub best_template: Template,
    pub best_support_score: f64,
    pub best_validation_score: f64,
    pub iterations_run: usize,
    pub last_update_iteration: Option<usize>,
    /// Backend requests issued by the tuning loop, cached or not.
    pub backend_calls: u64,
    pub config: serde_json::Value,
}

impl TuningResult {
    fn new(state: &TuningState, cfg: &RunConfig) -> Self {
        Self {
            best_template: state.best_template.clone(),
            best_support_score: state.best_support_score,
            best_validation_score: state.best_validation_score,
            iterations_run: state.iteration,
            last_update_iteration: state.last_update_iteration(),
            backend_calls: state.backend_calls,
            config: serde_json::to_value(cfg).expect("config serializes"),
        }
    }
}

pub struct TuneOutcome {
    pub result: TuningResult,
    pub trace: Vec<IterationRecord>,
    pub upstream_calls: u64,
}

/// Tunes with the given split and template on a fresh backend. Each
/// iteration is passed to `sink` as soon as it completes.
fn tune_once(
    cfg: &RunConfig,
    split: &DatasetSplit,
    initial: Template,
    instructions: &InstructionSet,
    sink: &mut dyn FnMut(&IterationRecord) -> std::io::Result<()>,
) -> Result<(TuningState, u64), (TuningError, u64)> {
    let stack = BackendStack::build(
        &cfg.backend_kind()
            .map_err(|e| (TuningError::Config(e.to_string()), 0))?,
    )
    .map_err(|e| (TuningError::Config(e.to_string()), 0))?;
    let p = pipeline(instructions, &stack, cfg.model(), &cfg.metrics);
    let mut tuning = cfg.tuning.clone();
    tuning.metric = cfg.metrics.clone();
    match run_tuning(&tuning, split, initial, &p, sink) {
        Ok(state) => Ok((state, stack.upstream_calls())),
        Err(e) => Err((e, stack.upstream_calls())),
    }
}

pub fn cmd_tune(config_path: &Path, overrides: &Overrides) -> Result<TuneOutcome> {
    let (cfg, records) = prepare(config_path, overrides)?;
    let split = split(&cfg, &records)?;
    let instructions = cfg.instructions()?;
    let initial = cfg.initial_template()?;
    create_output_dir(&cfg)?;

    let trace_path = cfg.output_dir.join(TRACE_JSONL);
    let mut trace_file =
        BufWriter::new(File::create(&trace_path).with_context(|| format!("creating {}", trace_path.display()))?);
    let mut trace = Vec::new();
    let mut sink = |r: &IterationRecord| -> std::io::Result<()> {
        serde_json::to_writer(&mut trace_file, r)?;
        trace_file.write_all(b"\n")?;
        trace_file.flush()?;
        trace.push(r.clone());
        Ok(())
    };
    let outcome = tune_once(&cfg, &split, initial, &instructions, &mut sink);
    drop(trace_file);
    let trace_csv = cfg.output_dir.join(TRACE_CSV);
    write_trace_csv(&trace_csv, &trace).with_context(|| format!("writing {}", trace_csv.display()))?;
    let (state, upstream_calls) = match outcome {
        Ok(ok) => ok,
        Err((e, _)) => return Err(anyhow::Error::new(e).context("tuning failed; partial trace kept")),
    };
    let result = TuningResult::new(&state, &cfg);
    write_json(&cfg.output_dir.join(TUNING_RESULT), &result)?;
    Ok(TuneOutcome {
        result,
        trace,
        upstream_calls,
    })
}

/// The tuned template from a previous `tune` in the same output directory,
/// or the configured initial template.
pub fn resolve_template(cfg: &RunConfig) -> Result<Template> {
    let path = cfg.output_dir.join(TUNING_RESULT);
    if path.is_file() {
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let result: TuningResult =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        log::info!("using tuned template from {}", path.display());
        return Ok(result.best_template);
    }
    log::info!("no {TUNING_RESULT} found, using the initial template");
    Ok(cfg.initial_template()?)
}

pub struct GenerateOutcome {
    pub report: Report,
    pub zero_shot: Option<Report>,
    pub delta: Option<BTreeMap<String, f64>>,
    pub upstream_calls: u64,
    pub output_files: Vec<PathBuf>,
}

fn suffixed(dir: &Path, stem: &str, suffix: &str, ext: &str) -> PathBuf {
    dir.join(format!("{stem}{suffix}.{ext}"))
}

pub fn cmd_generate(config_path: &Path, overrides: &Overrides, zero_shot: bool) -> Result<GenerateOutcome> {
    let (cfg, records) = prepare(config_path, overrides)?;
    let split = split(&cfg, &records)?;
    let instructions = cfg.instructions()?;
    let template = resolve_template(&cfg)?;
    create_output_dir(&cfg)?;

    let ids: Vec<&str> = split.generation.iter().map(|r| r.id.as_str()).collect();
    let folds = kfold_split(&ids, cfg.generation.folds, cfg.dataset.split.seed)?;
    let stack = BackendStack::build(&cfg.backend_kind()?)?;
    let p = pipeline(&instructions, &stack, cfg.model(), &cfg.metrics);
    let scorer = cfg
        .external_scorer
        .as_ref()
        .map(|s| HttpScorer::new(s.name.clone(), s.url.clone()))
        .transpose()?;

    let mut output_files = Vec::new();
    let mut run_mode = |mode: PromptMode, suffix: &str| -> Result<(Report, AnnotationRun)> {
        let mut run = annotate(&split.generation, &template, &p, &cfg.generation, mode)?;
        evaluate_recovery(&mut run, &p, &cfg.generation, &cfg.metrics)?;
        let mut external = BTreeMap::new();
        if let Some(scorer) = &scorer {
            use annoloop_core::generation::ExternalScorer;
            match external_score(&run, scorer) {
                Ok(scores) => {
                    external.insert(scorer.name().to_string(), scores);
                }
                Err(e) => log::warn!("{e}; report continues without external scores"),
            }
        }
        let mut report = aggregate_with_external(&run, &folds, &external)?;
        report.config = serde_json::to_value(&cfg).expect("config serializes");
        let dir = &cfg.output_dir;
        let files = [
            suffixed(dir, "summaries", suffix, "jsonl"),
            suffixed(dir, "recovered", suffix, "jsonl"),
            suffixed(dir, "report", suffix, "json"),
            suffixed(dir, "report", suffix, "csv"),
        ];
        write_summaries(&files[0], &run)?;
        write_recovered(&files[1], &run)?;
        write_json(&files[2], &report)?;
        report.write_csv(&files[3])?;
        output_files.extend(files);
        Ok((report, run))
    };

    let (report, _) = run_mode(PromptMode::OneShot, "")?;
    let (zero, delta) = if zero_shot {
        let (zero, _) = run_mode(PromptMode::ZeroShot, "_zero_shot")?;
        let delta = mode_delta(&report, &zero);
        let path = cfg.output_dir.join("comparison.json");
        write_json(&path, &serde_json::json!({ "delta": delta }))?;
        output_files.push(path);
        (Some(zero), Some(delta))
    } else {
        (None, None)
    };
    Ok(GenerateOutcome {
        report,
        zero_shot: zero,
        delta,
        upstream_calls: stack.upstream_calls(),
        output_files,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblationAxis {
    Metrics,
    Temperature,
    InitialTemplate,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Metrics => "metrics",
            AblationAxis::Temperature => "temperature",
            AblationAxis::InitialTemplate => "initial_template",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub value: String,
    pub seed: u64,
    pub iterations_run: usize,
    /// Iteration of the last template update; empty when the seed template
    /// was never replaced.
    pub last_update_iteration: Option<usize>,
    pub best_support_score: f64,
    pub best_validation_score: f64,
    pub backend_calls: u64,
    pub error: Option<String>,
    /// Support records sampled, in order, space separated.
    pub sampled_ids: String,
}

pub fn cmd_ablate(config_path: &Path, overrides: &Overrides, axis: AblationAxis) -> Result<Vec<AblationRow>> {
    let (cfg, records) = prepare(config_path, overrides)?;
    let split = split(&cfg, &records)?;
    let instructions = cfg.instructions()?;

    let field = format!(
        "ablation.{}",
        match axis {
            AblationAxis::Metrics => "metrics",
            AblationAxis::Temperature => "temperatures",
            AblationAxis::InitialTemplate => "templates",
        }
    );
    let mut points: Vec<(String, RunConfig, Template)> = Vec::new();
    match axis {
        AblationAxis::Metrics => {
            for subset in &cfg.ablation.metrics {
                let mut c = cfg.clone();
                c.metrics = MetricConfig {
                    enabled: subset.clone(),
                    weights: BTreeMap::new(),
                    ..cfg.metrics.clone()
                };
                let name: Vec<&str> = subset.iter().map(|m: &Metric| m.name()).collect();
                points.push((name.join("+"), c, cfg.initial_template()?));
            }
        }
        AblationAxis::Temperature => {
            for &t in &cfg.ablation.temperatures {
                let mut c = cfg.clone();
                c.tuning.tuning_temperature = t;
                points.push((t.to_string(), c, cfg.initial_template()?));
            }
        }
        AblationAxis::InitialTemplate => {
            for (i, paths) in cfg.ablation.templates.iter().enumerate() {
                let template = load_template(paths, &format!("ablation.templates[{i}]"))?;
                let name = paths
                    .record_path
                    .file_name()
                    .map_or_else(|| i.to_string(), |n| n.to_string_lossy().into_owned());
                points.push((name, cfg.clone(), template));
            }
        }
    }
    if points.is_empty() {
        return Err(ConfigError::single(field, format!("no grid points for the {} axis", axis.name())).into());
    }

    let mut rows = Vec::new();
    for (value, c, template) in points {
        log::info!("ablation {} = {value}", axis.name());
        let mut sampled = Vec::new();
        let mut sink = |r: &IterationRecord| -> std::io::Result<()> {
            sampled.push(r.sampled_record_id.clone());
            Ok(())
        };
        let outcome = tune_once(&c, &split, template.clone(), &instructions, &mut sink);
        let row = |state: Option<&TuningState>, error: Option<String>| AblationRow {
            axis: axis.name().to_string(),
            value: value.clone(),
            seed: c.tuning.seed,
            iterations_run: state.map_or(sampled.len(), |s| s.iteration),
            last_update_iteration: state.and_then(TuningState::last_update_iteration),
            best_support_score: state.map_or(0.0, |s| s.best_support_score),
            best_validation_score: state.map_or(0.0, |s| s.best_validation_score),
            backend_calls: state.map_or(0, |s| s.backend_calls),
            error,
            sampled_ids: sampled.join(" "),
        };
        rows.push(match &outcome {
            Ok((state, _)) => row(Some(state), None),
            Err((e, _)) => {
                log::warn!("ablation {} = {value} failed: {e}", axis.name());
                row(None, Some(e.to_string()))
            }
        });
    }

    create_output_dir(&cfg)?;
    let path = cfg.output_dir.join(ABLATION_CSV);
    let mut w = csv::Writer::from_path(&path).with_context(|| format!("creating {}", path.display()))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}
