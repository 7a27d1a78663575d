//! Scores for every task family: text matching, choice accuracy and box IoU.

mod report;
mod text;

use serde::{Deserialize, Serialize};

use crate::instructions::Task;
use crate::prompt::{parse_choice, parse_grounding_answer};
use crate::scene::BBox3D;

pub use report::{
    combined_table, evaluate, read_predictions, write_predictions, MetricReport, Prediction, TaskMetrics,
    METRIC_COLUMNS,
};
pub use text::{
    bleu, cider, cider_scores, exact_match, meteor_simple, normalize_answer, rouge_l, stem, tokenize,
    BLEU_EPSILON,
};

/// Axis-aligned 3D intersection over union; 0 when the union has no volume.
pub fn iou_3d(a: &BBox3D, b: &BBox3D) -> f64 {
    let (alo, ahi, blo, bhi) = (a.min(), a.max(), b.min(), b.max());
    let inter: f64 = (0..3)
        .map(|i| (ahi[i].min(bhi[i]) - alo[i].max(blo[i])).max(0.0))
        .product();
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub task: Task,
    pub prediction: String,
    pub references: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BBox3D>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_letter: Option<char>,
}

/// IoU of the parsed prediction against the record's box; `None` if the
/// prediction has no parseable box.
pub fn grounding_iou(record: &PredictionRecord) -> Option<f64> {
    let gt = record.gt_box.as_ref()?;
    let (_, pred) = parse_grounding_answer(&record.prediction);
    pred.map(|p| iou_3d(&p, gt))
}

/// Fraction of records whose IoU reaches `threshold`.
pub fn accuracy_at(records: &[PredictionRecord], threshold: f64) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let hits = records
        .iter()
        .filter(|r| grounding_iou(r).unwrap_or(0.0) >= threshold)
        .count();
    hits as f64 / records.len() as f64
}

/// (Acc@0.25, Acc@0.5, parse failure rate). Unparseable predictions score IoU 0.
pub fn grounding_accuracy(records: &[PredictionRecord]) -> (f64, f64, f64) {
    if records.is_empty() {
        return (0.0, 0.0, 0.0);
    }
    let failures = records.iter().filter(|r| grounding_iou(r).is_none()).count();
    (
        accuracy_at(records, 0.25),
        accuracy_at(records, 0.5),
        failures as f64 / records.len() as f64,
    )
}

/// Fraction of predictions whose parsed letter equals the answer letter.
pub fn choice_accuracy(records: &[PredictionRecord]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    let correct = records
        .iter()
        .filter(|r| r.gt_letter.is_some() && parse_choice(&r.prediction) == r.gt_letter)
        .count();
    correct as f64 / records.len() as f64
}
