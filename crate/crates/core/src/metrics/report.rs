use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::text::{bleu, cider_scores, exact_match, meteor_simple, rouge_l};
use super::{choice_accuracy, grounding_accuracy, PredictionRecord};
use crate::error::{Error, Result};
use crate::instructions::{Dataset, Task};
use crate::prompt::parse_choice;

/// Table columns, in display order.
pub const METRIC_COLUMNS: [&str; 9] = [
    "EM", "BLEU-1", "BLEU-4", "METEOR", "ROUGE", "CIDEr", "Acc@0.25", "Acc@0.5", "Acc",
];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub prediction: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub count: usize,
    pub parse_failures: usize,
    /// Raw values: [0, 1] for everything except CIDEr, which is on [0, 10].
    pub metrics: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub tasks: BTreeMap<String, TaskMetrics>,
    /// Prediction ids with no matching sample.
    pub unmatched: Vec<String>,
}

fn text_metrics(records: &[PredictionRecord]) -> BTreeMap<String, f64> {
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&PredictionRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let corpus: Vec<(String, Vec<String>)> = records
        .iter()
        .map(|r| (r.prediction.clone(), r.references.clone()))
        .collect();
    let cider = cider_scores(&corpus).iter().sum::<f64>() / n;
    BTreeMap::from([
        ("EM".into(), mean(&|r| exact_match(&r.prediction, &r.references))),
        ("BLEU-1".into(), mean(&|r| bleu(&r.prediction, &r.references, 1))),
        ("BLEU-4".into(), mean(&|r| bleu(&r.prediction, &r.references, 4))),
        ("METEOR".into(), mean(&|r| meteor_simple(&r.prediction, &r.references))),
        ("ROUGE".into(), mean(&|r| rouge_l(&r.prediction, &r.references))),
        ("CIDEr".into(), cider),
    ])
}

impl MetricReport {
    /// Scores records grouped by task.
    pub fn from_records(records: &[PredictionRecord], unmatched: Vec<String>) -> Self {
        let mut tasks = BTreeMap::new();
        for task in Task::ALL {
            let recs: Vec<PredictionRecord> = records.iter().filter(|r| r.task == task).cloned().collect();
            if recs.is_empty() {
                continue;
            }
            let mut tm = TaskMetrics {
                count: recs.len(),
                ..TaskMetrics::default()
            };
            match task {
                Task::Grounding => {
                    let (a25, a50, fail) = grounding_accuracy(&recs);
                    tm.metrics.insert("Acc@0.25".into(), a25);
                    tm.metrics.insert("Acc@0.5".into(), a50);
                    tm.parse_failures = (fail * recs.len() as f64).round() as usize;
                }
                Task::MultipleChoice => {
                    tm.metrics.insert("Acc".into(), choice_accuracy(&recs));
                    tm.parse_failures = recs.iter().filter(|r| parse_choice(&r.prediction).is_none()).count();
                }
                Task::Vqa | Task::Caption | Task::Conversation => {
                    tm.metrics = text_metrics(&recs);
                }
            }
            tasks.insert(task.as_str().to_string(), tm);
        }
        Self { tasks, unmatched }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Aligned table with one row per task; values shown ×100.
    pub fn to_table(&self) -> String {
        combined_table(&[(String::new(), self.clone())])
    }
}

/// One row per (run, task) with every metric column; missing values print as `-`.
pub fn combined_table(runs: &[(String, MetricReport)]) -> String {
    let named = runs.iter().any(|(n, _)| !n.is_empty());
    let label_width = runs
        .iter()
        .flat_map(|(n, r)| r.tasks.keys().map(move |t| n.len() + t.len() + 3))
        .max()
        .unwrap_or(4)
        .max(8);
    let mut out = String::new();
    let _ = write!(out, "{:<label_width$}{:>7}", if named { "Run / Task" } else { "Task" }, "N");
    for c in METRIC_COLUMNS {
        let _ = write!(out, "{c:>10}");
    }
    out.push('\n');
    for (name, report) in runs {
        for (task, tm) in &report.tasks {
            let label = if name.is_empty() { task.clone() } else { format!("{name} / {task}") };
            let _ = write!(out, "{label:<label_width$}{:>7}", tm.count);
            for c in METRIC_COLUMNS {
                match tm.metrics.get(c) {
                    Some(v) => {
                        let _ = write!(out, "{:>10.2}", v * 100.0);
                    }
                    None => {
                        let _ = write!(out, "{:>10}", "-");
                    }
                }
            }
            out.push('\n');
        }
    }
    out
}

/// Joins predictions to dataset samples and scores them. Unknown ids are
/// reported, logged and skipped.
pub fn evaluate(predictions: &[Prediction], dataset: &Dataset) -> MetricReport {
    let index: BTreeMap<&str, usize> = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.sample_id.as_str(), i))
        .collect();
    let mut records = Vec::new();
    let mut unmatched = Vec::new();
    for p in predictions {
        let Some(&i) = index.get(p.sample_id.as_str()) else {
            log::warn!("prediction for unknown sample '{}' ignored", p.sample_id);
            unmatched.push(p.sample_id.clone());
            continue;
        };
        let s = &dataset.samples[i];
        records.push(PredictionRecord {
            sample_id: s.sample_id.clone(),
            task: s.task,
            prediction: p.prediction.clone(),
            references: vec![s.answer.clone()],
            gt_box: s.meta.bbox,
            gt_letter: s.meta.gt_letter,
        });
    }
    MetricReport::from_records(&records, unmatched)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::parse(path, format!("line {}", i + 1), e.to_string()))?,
        );
    }
    Ok(out)
}

pub fn write_predictions(path: &Path, predictions: &[Prediction]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for p in predictions {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
