//! Many independent runs of one config, with per-run seeds derived from a
//! base seed, a combined survey table and summary statistics.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde_json::{json, Value};
use thiserror::Error;

use crate::canonical::to_canonical_string;
use crate::config::{validate_cross_refs, ExperimentConfig, ValidationOptions, Violation};
use crate::engine::{run_session, EndReason, RunOptions};
use crate::model::SurveyAnswer;
use crate::participants::PersonFactory;
use crate::rng::splitmix64;
use crate::transcript::JsonlSink;

pub const SURVEY_CSV: &str = "survey.csv";
pub const SUMMARY_JSONL: &str = "summary.jsonl";

/// Seed of run `index` in a batch seeded with `base`.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ index)
}

pub fn run_file_name(index: u64) -> String {
    format!("run-{index}.events.jsonl")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchSpec {
    pub runs: u64,
    /// Defaults to the config's seed.
    pub base_seed: Option<u64>,
    pub parallelism: usize,
    pub out_dir: PathBuf,
    pub golden: bool,
}

#[derive(Debug, Error)]
pub enum BatchError {
    #[error("config not usable for a batch: {}", format_violations(.0))]
    Invalid(Vec<Violation>),
    #[error("output directory {path}: {source}")]
    Output { path: PathBuf, source: io::Error },
}

fn format_violations(v: &[Violation]) -> String {
    v.iter().map(|v| format!("{}: {}", v.path, v.message)).collect::<Vec<_>>().join("; ")
}

#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Completed {
        end_reason: EndReason,
        messages: usize,
        turns: u64,
        answers: Vec<SurveyAnswer>,
    },
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub index: u64,
    pub seed: u64,
    pub path: PathBuf,
    pub status: RunStatus,
}

impl RunOutcome {
    pub fn is_failed(&self) -> bool {
        matches!(self.status, RunStatus::Failed(_))
    }
}

/// Mean and sample standard deviation of the parsed answers to one question
/// in one phase, over all persons (`person == None`) or a single person.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub phase: String,
    pub question: String,
    pub person: Option<String>,
    pub n: usize,
    pub mean: f64,
    /// `None` with fewer than two values.
    pub stddev: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchSummary {
    pub runs: Vec<RunOutcome>,
    pub aggregates: Vec<Aggregate>,
}

impl BatchSummary {
    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| r.is_failed()).count()
    }
}

pub fn mean_and_stddev(values: &[f64]) -> Option<(f64, Option<f64>)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let stddev = (values.len() > 1).then(|| {
        let ss: f64 = values.iter().map(|v| (v - mean).powi(2)).sum();
        (ss / (n - 1.0)).sqrt()
    });
    Some((mean, stddev))
}

/// Aggregates answers of completed runs only.
pub fn aggregate(runs: &[RunOutcome]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(String, String, Option<String>), Vec<f64>> = BTreeMap::new();
    for run in runs {
        let RunStatus::Completed { answers, .. } = &run.status else {
            continue;
        };
        for a in answers {
            let Some(v) = a.parsed_value else { continue };
            let key = (a.phase_label.clone(), a.question_id.clone());
            groups.entry((key.0.clone(), key.1.clone(), None)).or_default().push(v as f64);
            groups
                .entry((key.0, key.1, Some(a.person.to_string())))
                .or_default()
                .push(v as f64);
        }
    }
    groups
        .into_iter()
        .filter_map(|((phase, question, person), values)| {
            let (mean, stddev) = mean_and_stddev(&values)?;
            Some(Aggregate {
                phase,
                question,
                person,
                n: values.len(),
                mean,
                stddev,
            })
        })
        .collect()
}

fn one_run(config: &ExperimentConfig, factory: &PersonFactory, index: u64, seed: u64, spec: &BatchSpec) -> RunOutcome {
    let path = spec.out_dir.join(run_file_name(index));
    let mut config = config.clone();
    config.seed = Some(seed);
    let status = (|| {
        let persons = factory.build_all(&config).map_err(|e| e.to_string())?;
        let mut sink = JsonlSink::create(&path).map_err(|e| format!("cannot create {}: {e}", path.display()))?;
        let options = RunOptions {
            run_id: None,
            golden: spec.golden,
        };
        let result = run_session(&config, persons, &mut sink, options).map_err(|e| e.to_string())?;
        Ok(RunStatus::Completed {
            end_reason: result.end_reason,
            messages: result.history.len(),
            turns: result.turn_count,
            answers: result.survey_answers,
        })
    })()
    .unwrap_or_else(|e: String| {
        tracing::error!(run = index, error = %e, "run failed");
        RunStatus::Failed(e)
    });
    RunOutcome {
        index,
        seed,
        path,
        status,
    }
}

/// Runs the batch with up to `parallelism` runs in flight. A failed run is
/// reported and excluded from the aggregates; the others are unaffected.
pub fn run_batch(config: &ExperimentConfig, factory: &PersonFactory, spec: &BatchSpec) -> Result<BatchSummary, BatchError> {
    validate_cross_refs(config, &ValidationOptions::headless()).map_err(BatchError::Invalid)?;
    let output_err = |source| BatchError::Output {
        path: spec.out_dir.clone(),
        source,
    };
    fs::create_dir_all(&spec.out_dir).map_err(output_err)?;

    let base = spec.base_seed.unwrap_or_else(|| config.seed());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<RunOutcome>>> = Mutex::new(vec![None; spec.runs as usize]);
    let workers = spec.parallelism.clamp(1, spec.runs.max(1) as usize);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i as u64 >= spec.runs {
                    break;
                }
                let outcome = one_run(config, factory, i as u64, derive_seed(base, i as u64), spec);
                results.lock().unwrap()[i] = Some(outcome);
            });
        }
    });
    let runs: Vec<RunOutcome> = results.into_inner().unwrap().into_iter().flatten().collect();
    let summary = BatchSummary {
        aggregates: aggregate(&runs),
        runs,
    };
    write_survey_csv(&spec.out_dir.join(SURVEY_CSV), &summary.runs).map_err(output_err)?;
    write_summary(&spec.out_dir.join(SUMMARY_JSONL), &summary).map_err(output_err)?;
    Ok(summary)
}

pub fn write_survey_csv(path: &Path, runs: &[RunOutcome]) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["run", "phase", "person", "question", "value", "raw"])?;
    for run in runs {
        let RunStatus::Completed { answers, .. } = &run.status else {
            continue;
        };
        for a in answers {
            let value = a.parsed_value.map(|v| v.to_string()).unwrap_or_default();
            w.write_record([
                run.index.to_string().as_str(),
                &a.phase_label,
                a.person.as_str(),
                &a.question_id,
                &value,
                &a.raw,
            ])?;
        }
    }
    w.flush()
}

pub fn summary_lines(summary: &BatchSummary) -> Vec<Value> {
    let mut lines = Vec::new();
    for run in &summary.runs {
        let mut line = json!({"kind": "run", "run": run.index, "seed": run.seed});
        match &run.status {
            RunStatus::Completed {
                end_reason,
                messages,
                turns,
                ..
            } => {
                line["status"] = json!("completed");
                line["end_reason"] = json!(end_reason.as_str());
                line["messages"] = json!(messages);
                line["turns"] = json!(turns);
            }
            RunStatus::Failed(e) => {
                line["status"] = json!("failed");
                line["error"] = json!(e);
            }
        }
        lines.push(line);
    }
    for a in &summary.aggregates {
        lines.push(json!({
            "kind": "aggregate",
            "phase": a.phase,
            "question": a.question,
            "person": a.person,
            "n": a.n,
            "mean": a.mean,
            "stddev": a.stddev,
        }));
    }
    lines
}

pub fn write_summary(path: &Path, summary: &BatchSummary) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for line in summary_lines(summary) {
        writeln!(w, "{}", to_canonical_string(&line))?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn derive_seed_oracle() {
        assert_eq!(derive_seed(0, 0), 0xe220a8397b1dcdaf);
        let expected = [
            0x63cbe1e459320dd7,
            0xbd64a5d9adefe000,
            0x63033b0ca389c35a,
            0x6e73e372e2338aca,
            0x1d0b14e4db018fed,
            0x975835de1c9756ce,
            0x910a2dec89025cc1,
            0xe220a8397b1dcdaf,
            0x875b9307abf55005,
            0x6aa9d61435dbe63e,
        ];
        let got: Vec<u64> = (0..10).map(|i| derive_seed(7, i)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn sample_stddev() {
        let (mean, sd) = mean_and_stddev(&[4.0, 6.0]).unwrap();
        assert_eq!(mean, 5.0);
        assert!((sd.unwrap() - 1.4142135623730951).abs() < 1e-12);
        assert_eq!(mean_and_stddev(&[3.0]), Some((3.0, None)));
        assert_eq!(mean_and_stddev(&[]), None);
    }

    fn answer(person: &str, value: Option<i64>) -> SurveyAnswer {
        SurveyAnswer {
            person: person.into(),
            question_id: "q".into(),
            phase_label: "post".into(),
            raw: value.map(|v| v.to_string()).unwrap_or_default(),
            parsed_value: value,
            clamped: false,
        }
    }

    #[test]
    fn failed_runs_are_excluded() {
        let done = |i, answers| RunOutcome {
            index: i,
            seed: i,
            path: PathBuf::new(),
            status: RunStatus::Completed {
                end_reason: EndReason::NumMsgs,
                messages: 1,
                turns: 1,
                answers,
            },
        };
        let runs = vec![
            done(0, vec![answer("A", Some(4)), answer("B", None)]),
            RunOutcome {
                index: 1,
                seed: 1,
                path: PathBuf::new(),
                status: RunStatus::Failed("boom".into()),
            },
            done(2, vec![answer("A", Some(6))]),
        ];
        let aggs = aggregate(&runs);
        let all = aggs.iter().find(|a| a.person.is_none()).unwrap();
        assert_eq!(all.n, 2);
        assert_eq!(all.mean, 5.0);
        assert!(aggs.iter().all(|a| a.person.as_deref() != Some("B")));
    }
}
