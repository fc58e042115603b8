//! Run configuration: one TOML file, relative paths resolved against the
//! file's directory.

use std::fmt;
use std::path::{Path, PathBuf};

use annoloop_core::backend::{BackendKind, MockConfig};
use annoloop_core::dataset::{
    load_records, OperatorVocabulary, Record, RecordFormat, DEFAULT_SUPPORT_N, DEFAULT_VALIDATION_N,
};
use annoloop_core::generation::GenerationConfig;
use annoloop_core::metrics::{Metric, MetricConfig};
use annoloop_core::prompting::{InstructionSet, Template};
use annoloop_core::tuning::TuningConfig;
use serde::{Deserialize, Serialize};

pub const DEFAULT_MODEL: &str = "gpt-3.5-turbo";
pub const DEFAULT_VOCABULARY_SIZE: usize = 5;

/// One problem with a config, located by its dotted field path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Configuration errors; the CLI maps these to exit code 2.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub diagnostics: Vec<Diagnostic>,
}

impl ConfigError {
    pub fn single(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            diagnostics: vec![Diagnostic {
                field: field.into(),
                message: message.into(),
            }],
        }
    }

    pub fn mentions(&self, field: &str) -> bool {
        self.diagnostics.iter().any(|d| d.field == field)
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let lines: Vec<String> = self.diagnostics.iter().map(ToString::to_string).collect();
        f.write_str(&lines.join("\n"))
    }
}

impl std::error::Error for ConfigError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub support_n: usize,
    pub validation_n: usize,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            support_n: DEFAULT_SUPPORT_N,
            validation_n: DEFAULT_VALIDATION_N,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub path: PathBuf,
    #[serde(default = "default_format")]
    pub format: RecordFormat,
    /// Defaults to `op_a`..`op_e`.
    #[serde(default)]
    pub operator_vocabulary: Option<Vec<String>>,
    #[serde(default)]
    pub split: SplitConfig,
}

fn default_format() -> RecordFormat {
    RecordFormat::CellGraph
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstructionsConfig {
    pub encode_path: PathBuf,
    pub decode_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TemplatePaths {
    pub record_path: PathBuf,
    pub summary_path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendChoice {
    /// OpenAI-compatible HTTP API.
    Http,
    /// Deterministic offline simulator.
    Mock,
    /// Cache file only; a miss is an error.
    Replay,
}

impl std::str::FromStr for BackendChoice {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "http" => Ok(Self::Http),
            "mock" => Ok(Self::Mock),
            "replay" => Ok(Self::Replay),
            other => Err(format!("unknown backend {other:?} (expected http, mock or replay)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MockSection {
    pub fidelity: f64,
    pub template_bonus: f64,
    pub seed: u64,
}

impl Default for MockSection {
    fn default() -> Self {
        Self {
            fidelity: 1.0,
            template_bonus: 0.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendChoice,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    /// Record/replay cache placed in front of the backend.
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    #[serde(default)]
    pub mock: Option<MockSection>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub metrics: Vec<Vec<Metric>>,
    pub temperatures: Vec<f64>,
    pub templates: Vec<TemplatePaths>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExternalScorerConfig {
    pub name: String,
    pub url: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub instructions: InstructionsConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub tuning: TuningConfig,
    #[serde(default)]
    pub generation: GenerationConfig,
    #[serde(default)]
    pub metrics: MetricConfig,
    pub initial_template: TemplatePaths,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub ablation: AblationConfig,
    #[serde(default)]
    pub external_scorer: Option<ExternalScorerConfig>,
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub max_iterations: Option<usize>,
    pub backend: Option<BackendChoice>,
    pub temperature: Option<f64>,
}

impl RunConfig {
    /// Reads and parses `path` and resolves relative paths. Does not check
    /// that referenced files exist; see [`RunConfig::validate`].
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::single(path.display().to_string(), e.to_string()))?;
        let mut cfg = Self::parse(&text).map_err(|mut e| {
            for d in &mut e.diagnostics {
                d.message = format!("{} ({})", d.message, path.display());
            }
            e
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|span| field_at(text, span.start))
                .unwrap_or_else(|| "config".to_string());
            ConfigError::single(field, e.message().trim().to_string())
        })?;
        cfg.tuning.metric = cfg.metrics.clone();
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.dataset.path);
        fix(&mut self.instructions.encode_path);
        fix(&mut self.instructions.decode_path);
        fix(&mut self.initial_template.record_path);
        fix(&mut self.initial_template.summary_path);
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.backend.cache_path {
            fix(p);
        }
        for t in &mut self.ablation.templates {
            fix(&mut t.record_path);
            fix(&mut t.summary_path);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.tuning.seed = seed;
            self.dataset.split.seed = seed;
        }
        if let Some(n) = o.max_iterations {
            self.tuning.max_iterations = n;
            if self.tuning.patience.is_some_and(|p| p > n) {
                self.tuning.patience = None;
            }
        }
        if let Some(kind) = o.backend {
            self.backend.kind = kind;
        }
        if let Some(t) = o.temperature {
            self.tuning.tuning_temperature = t;
            self.generation.temperature = t;
        }
    }

    pub fn model(&self) -> &str {
        self.backend.model.as_deref().unwrap_or(DEFAULT_MODEL)
    }

    pub fn vocabulary(&self) -> Result<OperatorVocabulary, ConfigError> {
        match &self.dataset.operator_vocabulary {
            None => Ok(OperatorVocabulary::default_of_size(DEFAULT_VOCABULARY_SIZE)),
            Some(ops) => OperatorVocabulary::new(ops.clone())
                .map_err(|e| ConfigError::single("dataset.operator_vocabulary", e.to_string())),
        }
    }

    pub fn mock_config(&self) -> Result<MockConfig, ConfigError> {
        let m = self.backend.mock.clone().unwrap_or_default();
        Ok(MockConfig::new(
            m.fidelity,
            m.template_bonus,
            m.seed,
            self.vocabulary()?,
        ))
    }

    /// The backend described by the `[backend]` table, wrapped in the
    /// replay cache when `cache_path` is set.
    pub fn backend_kind(&self) -> Result<BackendKind, ConfigError> {
        let live = match self.backend.kind {
            BackendChoice::Http => BackendKind::Http {
                base_url: self.backend.base_url.clone(),
                api_key: None,
            },
            BackendChoice::Mock => BackendKind::Mock(self.mock_config()?),
            BackendChoice::Replay => {
                let cache_path = self
                    .backend
                    .cache_path
                    .clone()
                    .ok_or_else(|| ConfigError::single("backend.cache_path", "required when kind = \"replay\""))?;
                return Ok(BackendKind::Replay {
                    cache_path,
                    fallback: None,
                });
            }
        };
        Ok(match &self.backend.cache_path {
            Some(cache_path) => BackendKind::Replay {
                cache_path: cache_path.clone(),
                fallback: Some(Box::new(live)),
            },
            None => live,
        })
    }

    pub fn instructions(&self) -> Result<InstructionSet, ConfigError> {
        InstructionSet::load(&self.instructions.encode_path, &self.instructions.decode_path)
            .map_err(|e| ConfigError::single("instructions", e.to_string()))
    }

    pub fn initial_template(&self) -> Result<Template, ConfigError> {
        load_template(&self.initial_template, "initial_template")
    }

    pub fn records(&self) -> Result<Vec<Record>, ConfigError> {
        load_records(&self.dataset.path, self.dataset.format, &self.vocabulary()?)
            .map_err(|e| ConfigError::single("dataset.path", e.to_string()))
    }

    /// Full check: field invariants, referenced files and dataset size.
    /// Returns the loaded records on success.
    pub fn validate(&self) -> Result<Vec<Record>, ConfigError> {
        let mut diags = Vec::new();
        let files = [
            ("dataset.path", &self.dataset.path),
            ("instructions.encode_path", &self.instructions.encode_path),
            ("instructions.decode_path", &self.instructions.decode_path),
            ("initial_template.record_path", &self.initial_template.record_path),
            ("initial_template.summary_path", &self.initial_template.summary_path),
        ];
        for (field, path) in files {
            if !path.is_file() {
                diags.push(diag(field, format!("file not found: {}", path.display())));
            }
        }
        for (i, t) in self.ablation.templates.iter().enumerate() {
            for (name, path) in [("record_path", &t.record_path), ("summary_path", &t.summary_path)] {
                if !path.is_file() {
                    diags.push(diag(
                        &format!("ablation.templates[{i}].{name}"),
                        format!("file not found: {}", path.display()),
                    ));
                }
            }
        }
        if self.dataset.split.support_n == 0 {
            diags.push(diag("dataset.split.support_n", "must be at least 1".into()));
        }
        if self.dataset.split.validation_n == 0 {
            diags.push(diag("dataset.split.validation_n", "must be at least 1".into()));
        }
        if let Err(e) = self.vocabulary() {
            diags.extend(e.diagnostics.clone());
        }
        if let Err(e) = self.tuning.validate() {
            diags.push(diag("tuning", e.to_string()));
        }
        if let Err(e) = self.generation.validate() {
            let field = if self.generation.folds < 2 {
                "generation.folds"
            } else {
                "generation"
            };
            diags.push(diag(field, e.to_string()));
        }
        if let Err(e) = self.metrics.normalized_weights() {
            diags.push(diag("metrics", e.to_string()));
        }
        if self.backend.kind == BackendChoice::Mock {
            if let Err(e) = self.mock_config().and_then(|m| {
                m.validate()
                    .map_err(|e| ConfigError::single("backend.mock", e.to_string()))
            }) {
                diags.extend(e.diagnostics);
            }
        }
        if self.backend.kind == BackendChoice::Replay && self.backend.cache_path.is_none() {
            diags.push(diag("backend.cache_path", "required when kind = \"replay\"".into()));
        }
        if self.model().trim().is_empty() {
            diags.push(diag("backend.model", "must not be empty".into()));
        }
        for (i, t) in self.ablation.temperatures.iter().enumerate() {
            if !(0.0..=2.0).contains(t) {
                diags.push(diag(
                    &format!("ablation.temperatures[{i}]"),
                    "must lie in [0, 2]".into(),
                ));
            }
        }
        for (i, m) in self.ablation.metrics.iter().enumerate() {
            if let Err(e) = MetricConfig::with_metrics(m).normalized_weights() {
                diags.push(diag(&format!("ablation.metrics[{i}]"), e.to_string()));
            }
        }
        if !diags.is_empty() {
            return Err(ConfigError { diagnostics: diags });
        }

        let mut diags = Vec::new();
        if let Err(e) = self.instructions() {
            diags.extend(e.diagnostics);
        }
        if let Err(e) = self.initial_template() {
            diags.extend(e.diagnostics);
        }
        let records = match self.records() {
            Ok(r) => r,
            Err(e) => {
                diags.extend(e.diagnostics);
                Vec::new()
            }
        };
        let needed = self.dataset.split.support_n + self.dataset.split.validation_n + self.generation.folds;
        if diags.is_empty() && records.len() < needed {
            diags.push(Diagnostic {
                field: "dataset.path".into(),
                message: format!(
                    "{} records, need at least {needed} (support + validation + one per fold)",
                    records.len()
                ),
            });
        }
        if diags.is_empty() {
            Ok(records)
        } else {
            Err(ConfigError { diagnostics: diags })
        }
    }
}

fn diag(field: &str, message: String) -> Diagnostic {
    Diagnostic {
        field: field.to_string(),
        message,
    }
}

pub fn load_template(paths: &TemplatePaths, field: &str) -> Result<Template, ConfigError> {
    Template::load(&paths.record_path, &paths.summary_path).map_err(|e| ConfigError::single(field, e.to_string()))
}

/// Dotted path of the innermost key whose value starts before `offset`.
fn field_at(text: &str, offset: usize) -> Option<String> {
    let mut table: Option<String> = None;
    let mut key: Option<String> = None;
    let mut pos = 0;
    for line in text.split_inclusive('\n') {
        if pos > offset {
            break;
        }
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[').and_then(|t| t.split(']').next()) {
            table = Some(name.trim_start_matches('[').trim().to_string());
            key = None;
        } else if let Some((k, _)) = trimmed.split_once('=') {
            if !trimmed.starts_with('#') {
                key = Some(k.trim().to_string());
            }
        }
        pos += line.len();
    }
    match (table, key) {
        (Some(t), Some(k)) => Some(format!("{t}.{k}")),
        (Some(t), None) => Some(t),
        (None, k) => k,
    }
}
