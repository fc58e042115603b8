use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{AnnotationRun, GenerationError};
use crate::dataset::FoldAssignment;

pub const COMPOSITE: &str = "composite";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricStat {
    pub n: usize,
    pub mean: Option<f64>,
    /// Sample standard deviation over `sqrt(n)`; absent below two values.
    pub std_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub n: usize,
    pub metrics: BTreeMap<String, MetricStat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldStats {
    pub fold: usize,
    #[serde(flatten)]
    pub stats: GroupStats,
}

/// Per-fold and overall statistics of one external scorer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExternalStats {
    pub per_fold: Vec<MetricStat>,
    pub overall: MetricStat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub per_fold: Vec<FoldStats>,
    pub overall: GroupStats,
    pub failed_records: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub external_scores: Option<BTreeMap<String, ExternalStats>>,
    /// Run configuration echoed by the caller.
    #[serde(default)]
    pub config: serde_json::Value,
}

pub fn mean_and_std_error(values: &[f64]) -> MetricStat {
    let n = values.len();
    if n == 0 {
        return MetricStat {
            n,
            mean: None,
            std_error: None,
        };
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let std_error = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    MetricStat {
        n,
        mean: Some(mean),
        std_error,
    }
}

/// Per-record metric values for every scored record, keyed by metric name.
type RecordValues<'a> = Vec<(&'a str, BTreeMap<String, f64>)>;

fn group(rows: &[&(&str, BTreeMap<String, f64>)], names: &[String]) -> GroupStats {
    let metrics = names
        .iter()
        .map(|name| {
            let values: Vec<f64> = rows.iter().filter_map(|(_, v)| v.get(name).copied()).collect();
            (name.clone(), mean_and_std_error(&values))
        })
        .collect();
    GroupStats { n: rows.len(), metrics }
}

/// Mean and standard error of every metric and of the composite, per fold
/// and over all scored records.
pub fn aggregate(run: &AnnotationRun, folds: &FoldAssignment) -> Result<Report, GenerationError> {
    aggregate_with_external(run, folds, &BTreeMap::new())
}

/// As [`aggregate`], adding externally scored values. `external` maps a
/// scorer name to per-record scores.
pub fn aggregate_with_external(
    run: &AnnotationRun,
    folds: &FoldAssignment,
    external: &BTreeMap<String, BTreeMap<String, f64>>,
) -> Result<Report, GenerationError> {
    let mut names: Vec<String> = Vec::new();
    let mut rows: RecordValues<'_> = Vec::new();
    for (record, score) in run.scored() {
        let mut values: BTreeMap<String, f64> = score
            .per_metric
            .iter()
            .map(|(m, v)| (m.name().to_string(), *v))
            .collect();
        values.insert(COMPOSITE.to_string(), score.composite);
        for k in values.keys() {
            if !names.contains(k) {
                names.push(k.clone());
            }
        }
        rows.push((record.id.as_str(), values));
    }
    names.sort();

    let fold_of = |id: &str| {
        folds
            .fold_of
            .get(id)
            .copied()
            .ok_or_else(|| GenerationError::MissingFold(id.to_string()))
    };
    let mut by_fold: Vec<Vec<&(&str, BTreeMap<String, f64>)>> = vec![Vec::new(); folds.k];
    for row in &rows {
        by_fold[fold_of(row.0)?].push(row);
    }
    let per_fold = by_fold
        .iter()
        .enumerate()
        .map(|(fold, members)| FoldStats {
            fold,
            stats: group(members, &names),
        })
        .collect();
    let all: Vec<_> = rows.iter().collect();

    let mut external_scores = BTreeMap::new();
    for (scorer, scores) in external {
        let mut fold_values = vec![Vec::new(); folds.k];
        for (id, v) in scores {
            fold_values[fold_of(id)?].push(*v);
        }
        let overall: Vec<f64> = scores.values().copied().collect();
        external_scores.insert(
            scorer.clone(),
            ExternalStats {
                per_fold: fold_values.iter().map(|v| mean_and_std_error(v)).collect(),
                overall: mean_and_std_error(&overall),
            },
        );
    }

    Ok(Report {
        per_fold,
        overall: group(&all, &names),
        failed_records: run
            .outcomes
            .iter()
            .filter(|o| o.error.is_some())
            .map(|o| o.id.clone())
            .collect(),
        external_scores: (!external.is_empty()).then_some(external_scores),
        config: serde_json::Value::Null,
    })
}

#[derive(Serialize)]
struct CsvRow<'a> {
    fold: String,
    metric: &'a str,
    n: usize,
    mean: Option<f64>,
    std_error: Option<f64>,
}

impl Report {
    /// `fold,metric,n,mean,std_error`, one row per fold and metric, then the
    /// `overall` rows. Missing values are empty fields.
    pub fn write_csv(&self, path: &Path) -> Result<(), GenerationError> {
        let csv_err = |e: csv::Error| GenerationError::Csv {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        let groups = self
            .per_fold
            .iter()
            .map(|f| (f.fold.to_string(), &f.stats))
            .chain(std::iter::once(("overall".to_string(), &self.overall)));
        for (i, (fold, stats)) in groups.enumerate() {
            let external = self.external_scores.iter().flatten().map(|(name, e)| {
                let stat = e.per_fold.get(i).unwrap_or(&e.overall);
                (format!("external:{name}"), stat)
            });
            let rows = stats.metrics.iter().map(|(m, s)| (m.clone(), s)).chain(external);
            for (metric, stat) in rows {
                w.serialize(CsvRow {
                    fold: fold.clone(),
                    metric: &metric,
                    n: stat.n,
                    mean: stat.mean,
                    std_error: stat.std_error,
                })
                .map_err(csv_err)?;
            }
        }
        w.flush().map_err(|source| GenerationError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn overall_mean(&self, metric: &str) -> Option<f64> {
        self.overall.metrics.get(metric)?.mean
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Record;
    use crate::generation::RecordOutcome;
    use crate::metrics::{CompositeScore, Metric};
    use crate::prompting::{PromptMode, Template, TemplateOrigin};

    fn run_with(scores: &[(&str, f64)]) -> AnnotationRun {
        let records: Vec<Record> = scores.iter().map(|(id, _)| Record::raw_text(*id, "x")).collect();
        let outcomes = scores
            .iter()
            .map(|&(id, v)| RecordOutcome {
                id: id.into(),
                summary: Some("s".into()),
                recovered: Some("x".into()),
                score: Some(CompositeScore::combine(
                    BTreeMap::from([(Metric::Bleu, v)]),
                    BTreeMap::from([(Metric::Bleu, 1.0)]),
                )),
                error: None,
            })
            .collect();
        AnnotationRun {
            template: Template::new("r", "s", TemplateOrigin::HumanSeed).unwrap(),
            mode: PromptMode::OneShot,
            records,
            outcomes,
        }
    }

    fn folds(pairs: &[(&str, usize)], k: usize) -> FoldAssignment {
        let mut f = FoldAssignment::empty(k);
        f.fold_of = pairs.iter().map(|&(id, i)| (id.to_string(), i)).collect();
        f
    }

    #[test]
    fn two_record_fixture() {
        let report = aggregate(&run_with(&[("a", 0.4), ("b", 0.6)]), &folds(&[("a", 0), ("b", 0)], 2)).unwrap();
        let s = report.per_fold[0].stats.metrics["bleu"];
        assert!((s.mean.unwrap() - 0.5).abs() < 1e-12);
        assert!((s.std_error.unwrap() - 0.1).abs() < 1e-12);
        assert_eq!(report.per_fold[1].stats.n, 0);
        assert_eq!(report.per_fold[1].stats.metrics["bleu"].mean, None);
        assert_eq!(
            report.overall.metrics[COMPOSITE].mean,
            report.overall.metrics["bleu"].mean
        );
    }

    #[test]
    fn singleton_has_no_std_error() {
        let s = mean_and_std_error(&[0.3]);
        assert_eq!((s.mean, s.std_error), (Some(0.3), None));
    }

    #[test]
    fn missing_fold_is_an_error() {
        let err = aggregate(&run_with(&[("a", 0.4)]), &folds(&[], 2)).unwrap_err();
        assert!(matches!(err, GenerationError::MissingFold(id) if id == "a"));
    }

    #[test]
    fn external_scores_join_the_report() {
        let ext = BTreeMap::from([(
            "judge".to_string(),
            BTreeMap::from([("a".to_string(), 0.9), ("b".to_string(), 0.7)]),
        )]);
        let r = aggregate_with_external(
            &run_with(&[("a", 0.4), ("b", 0.6)]),
            &folds(&[("a", 0), ("b", 1)], 2),
            &ext,
        )
        .unwrap();
        let judge = &r.external_scores.as_ref().unwrap()["judge"];
        assert!((judge.overall.mean.unwrap() - 0.8).abs() < 1e-12);
        assert_eq!(judge.per_fold[1].mean, Some(0.7));
        assert!(aggregate(&run_with(&[("a", 0.4)]), &folds(&[("a", 0)], 2))
            .unwrap()
            .external_scores
            .is_none());
    }

    #[test]
    fn csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        let r = aggregate(&run_with(&[("a", 0.4), ("b", 0.6)]), &folds(&[("a", 0), ("b", 1)], 2)).unwrap();
        r.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "fold,metric,n,mean,std_error");
        assert_eq!(lines[1], "0,bleu,1,0.4,");
        assert_eq!(lines.len(), 1 + 3 * 2);
        assert!(lines.last().unwrap().starts_with("overall,composite,2,0.5,"));
    }
}
