//! Per-label confusion counts, MCC, F1 and report writers.
//!
//! Context labels are scored one-vs-rest from the argmax prediction, only on
//! instances that carry a context label. Activity labels are scored on every
//! instance.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::align::PredictionSet;
use crate::dataio::{LabelGroup, LabelSchema};
use crate::error::{Error, Result};
use crate::labels::TargetEncoding;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    pub fn from_pairs(predicted: &[bool], actual: &[bool]) -> Self {
        let mut c = ConfusionCounts::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            c.add(p, a);
        }
        c
    }

    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Same table with the negative class treated as positive.
    pub fn swapped(&self) -> Self {
        ConfusionCounts::new(self.tn, self.fn_, self.fp, self.tp)
    }
}

/// Matthews correlation; 0 when any marginal is empty.
pub fn mcc(c: &ConfusionCounts) -> f64 {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let denom = (tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_);
    if denom == 0.0 {
        return 0.0;
    }
    (tp * tn - fp * fn_) / denom.sqrt()
}

/// Positive-class F1; 0 when there are no true positives.
pub fn f1(c: &ConfusionCounts) -> f64 {
    if c.tp == 0 {
        return 0.0;
    }
    let precision = c.tp as f64 / (c.tp + c.fp) as f64;
    let recall = c.tp as f64 / (c.tp + c.fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Mean of the positive-class and negative-class F1.
pub fn label_macro_f1(c: &ConfusionCounts) -> f64 {
    (f1(c) + f1(&c.swapped())) / 2.0
}

fn context_pairs<'a>(
    predictions: &'a PredictionSet,
    targets: &'a [TargetEncoding],
    index: usize,
) -> impl Iterator<Item = (bool, bool)> + 'a {
    predictions
        .context
        .iter()
        .zip(targets)
        .filter_map(move |(&p, t)| t.context_index().map(|truth| (p == index, truth == index)))
}

pub fn confusion(
    predictions: &PredictionSet,
    targets: &[TargetEncoding],
    schema: &LabelSchema,
    label: &str,
) -> Result<ConfusionCounts> {
    if predictions.len() != targets.len() {
        return Err(Error::Dimension(format!(
            "{} predictions for {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    match schema.group_of(label) {
        Some(LabelGroup::Context) => {
            let index = schema.contexts.iter().position(|l| l == label).unwrap();
            for (p, a) in context_pairs(predictions, targets, index) {
                c.add(p, a);
            }
        }
        Some(LabelGroup::Activity) => {
            let index = schema.activities.iter().position(|l| l == label).unwrap();
            for (p, t) in predictions.activities.iter().zip(targets) {
                c.add(p[index], t.activities[index] == 1.0);
            }
        }
        None => return Err(Error::SchemaMismatch(format!("unknown label `{label}`"))),
    }
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabelMetrics {
    pub label: String,
    pub group: String,
    pub counts: ConfusionCounts,
    pub mcc: f64,
    pub macro_f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GroupAverage {
    pub mcc: f64,
    pub macro_f1: f64,
    pub labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub per_label: Vec<LabelMetrics>,
    pub context_average: GroupAverage,
    pub activity_average: GroupAverage,
    /// Argmax accuracy over instances with a context label; `None` if there are none.
    pub context_accuracy: Option<f64>,
    pub instances: usize,
}

fn average<'a>(rows: impl Iterator<Item = &'a LabelMetrics>) -> GroupAverage {
    let (mut m, mut f, mut n) = (0.0, 0.0, 0usize);
    for r in rows {
        m += r.mcc;
        f += r.macro_f1;
        n += 1;
    }
    if n == 0 {
        return GroupAverage {
            mcc: 0.0,
            macro_f1: 0.0,
            labels: 0,
        };
    }
    GroupAverage {
        mcc: m / n as f64,
        macro_f1: f / n as f64,
        labels: n,
    }
}

pub fn report(predictions: &PredictionSet, targets: &[TargetEncoding], schema: &LabelSchema) -> Result<MetricsReport> {
    if targets.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation set".into()));
    }
    let mut per_label = Vec::with_capacity(schema.num_labels());
    for (label, group) in schema
        .contexts
        .iter()
        .map(|l| (l, LabelGroup::Context))
        .chain(schema.activities.iter().map(|l| (l, LabelGroup::Activity)))
    {
        let counts = confusion(predictions, targets, schema, label)?;
        per_label.push(LabelMetrics {
            label: label.clone(),
            group: group.as_str().to_string(),
            counts,
            mcc: mcc(&counts),
            macro_f1: label_macro_f1(&counts),
        });
    }
    let labelled: Vec<bool> = predictions
        .context
        .iter()
        .zip(targets)
        .filter_map(|(&p, t)| t.context_index().map(|truth| p == truth))
        .collect();
    let context_accuracy =
        (!labelled.is_empty()).then(|| labelled.iter().filter(|&&ok| ok).count() as f64 / labelled.len() as f64);
    Ok(MetricsReport {
        context_average: average(per_label.iter().filter(|r| r.group == LabelGroup::Context.as_str())),
        activity_average: average(per_label.iter().filter(|r| r.group == LabelGroup::Activity.as_str())),
        per_label,
        context_accuracy,
        instances: targets.len(),
    })
}

impl MetricsReport {
    pub fn label(&self, name: &str) -> Option<&LabelMetrics> {
        self.per_label.iter().find(|r| r.label == name)
    }

    /// Per-label rows followed by the summary block.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
        let io = |e: csv::Error| Error::InvalidArgument(format!("csv encoding failed: {e}"));
        w.write_record(["label", "group", "mcc", "macro_f1"]).map_err(io)?;
        for r in &self.per_label {
            w.write_record([&r.label, &r.group, &r.mcc.to_string(), &r.macro_f1.to_string()])
                .map_err(io)?;
        }
        for (group, avg) in [("context", self.context_average), ("activity", self.activity_average)] {
            w.write_record([&format!("{group} average"), group, &avg.mcc.to_string(), &avg.macro_f1.to_string()])
                .map_err(io)?;
        }
        if let Some(acc) = self.context_accuracy {
            w.write_record(["context accuracy", "context", &acc.to_string(), ""]).map_err(io)?;
        }
        w.write_record(["instances", "", &self.instances.to_string(), ""]).map_err(io)?;
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write_files(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        for (ext, body) in [("csv", self.to_csv()?), ("json", self.to_json()? + "\n")] {
            let path = dir.join(format!("{stem}.{ext}"));
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}
