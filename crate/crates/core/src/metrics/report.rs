use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{e_measure, f_measure_max, f_measure_weighted, mae, matting_errors, miou, s_measure, Plane};
use crate::error::{Error, Result};
use crate::heads::Task;
use crate::tensor::{ops, Tensor};

pub const SEG_METRICS: [&str; 6] = ["f_max", "f_weighted", "mae", "s_measure", "e_measure", "miou"];
pub const MATTE_METRICS: [&str; 4] = ["sad_k", "mse_k", "sad_raw", "mse_raw"];
/// Name of the aggregate row in CSV output.
pub const AGGREGATE_ROW: &str = "mean";

pub fn metric_names(task: Task) -> &'static [&'static str] {
    match task {
        Task::Seg => &SEG_METRICS,
        Task::Matte => &MATTE_METRICS,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScores {
    pub name: String,
    pub values: BTreeMap<String, f64>,
}

/// Resizes `pred` to the ground-truth size (bilinear) when they differ.
pub fn align_to_gt(pred: &Plane, gt: &Plane) -> Result<Plane> {
    if (pred.h, pred.w) == (gt.h, gt.w) {
        return Ok(pred.clone());
    }
    let t = Tensor::new(vec![1, pred.h, pred.w], pred.data.clone())?;
    let r = ops::bilinear_resize(&t, gt.h, gt.w)?;
    Plane::new(gt.h, gt.w, r.into_data())
}

/// Scores one prediction against its ground truth.
pub fn score_pair(task: Task, name: &str, pred: &Plane, gt: &Plane) -> Result<ImageScores> {
    let pred = align_to_gt(pred, gt)?;
    let mut values = BTreeMap::new();
    match task {
        Task::Seg => {
            values.insert("f_max".into(), f_measure_max(&pred, gt)?.0);
            values.insert("f_weighted".into(), f_measure_weighted(&pred, gt)?);
            values.insert("mae".into(), mae(&pred, gt)?);
            values.insert("s_measure".into(), s_measure(&pred, gt)?);
            values.insert("e_measure".into(), e_measure(&pred, gt)?);
            values.insert("miou".into(), miou(&pred, gt, 0.5)?);
        }
        Task::Matte => {
            let e = matting_errors(&pred, gt)?;
            values.insert("sad_k".into(), e.sad_k);
            values.insert("mse_k".into(), e.mse_k);
            values.insert("sad_raw".into(), e.sad_raw);
            values.insert("mse_raw".into(), e.mse_raw);
        }
    }
    Ok(ImageScores { name: name.to_owned(), values })
}

/// Per-image scores sorted by name, their means, and the names that could
/// not be paired.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: Task,
    pub count: usize,
    pub per_image: Vec<ImageScores>,
    pub aggregate: BTreeMap<String, f64>,
    pub skipped: Vec<String>,
}

impl MetricReport {
    pub fn new(task: Task, mut per_image: Vec<ImageScores>, mut skipped: Vec<String>) -> Result<Self> {
        if per_image.is_empty() {
            return Err(Error::EmptyEvaluation);
        }
        per_image.sort_by(|a, b| a.name.cmp(&b.name));
        skipped.sort();
        let n = per_image.len() as f64;
        let aggregate = metric_names(task)
            .iter()
            .map(|&m| {
                let s: f64 = per_image.iter().map(|s| s.values.get(m).copied().unwrap_or(0.0)).sum();
                (m.to_owned(), s / n)
            })
            .collect();
        Ok(Self { task, count: per_image.len(), per_image, aggregate, skipped })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One row per image plus a final aggregate row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let names = metric_names(self.task);
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["name"];
        header.extend_from_slice(names);
        w.write_record(&header).map_err(csv_err)?;
        let fmt = |v: f64| format!("{v}");
        for s in &self.per_image {
            let mut row = vec![s.name.clone()];
            row.extend(names.iter().map(|m| fmt(s.values.get(*m).copied().unwrap_or(f64::NAN))));
            w.write_record(&row).map_err(csv_err)?;
        }
        let mut row = vec![AGGREGATE_ROW.to_owned()];
        row.extend(names.iter().map(|m| fmt(self.aggregate[*m])));
        w.write_record(&row).map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
