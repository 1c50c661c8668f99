//! Figure-data exports computed from an evaluation's predictions: the hourly
//! status-ratio distribution, per-group AUC tables, and per-patient
//! dominant-status timelines. Plain CSV only; plotting happens elsewhere.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use serde::Serialize;

use medseq_core::metrics::roc_auc;
use medseq_core::records::{MedicationStatus, STATUS_COUNT};

use crate::outdir::{format_float, write_csv, write_json};

#[derive(Clone, Debug)]
pub struct PredictionRow {
    pub patient_id: String,
    pub observation_time: f64,
    pub hour: usize,
    pub label: MedicationStatus,
    pub predicted: MedicationStatus,
    pub probs: [f64; STATUS_COUNT],
    pub age: Option<u32>,
    pub same_label_history: usize,
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut reader = csv::Reader::from_path(path)
        .with_context(|| format!("opening predictions {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.with_context(|| format!("predictions row {}", i + 1))?;
        let field = |idx: usize| -> Result<&str> {
            rec.get(idx)
                .ok_or_else(|| anyhow!("predictions row {}: missing column {idx}", i + 1))
        };
        let status = |s: &str| {
            MedicationStatus::parse_str(s)
                .ok_or_else(|| anyhow!("predictions row {}: unknown status \"{s}\"", i + 1))
        };
        let age_field = field(8)?;
        rows.push(PredictionRow {
            patient_id: field(0)?.to_string(),
            observation_time: field(1)?.parse()?,
            hour: field(2)?.parse()?,
            label: status(field(3)?)?,
            predicted: status(field(4)?)?,
            probs: [field(5)?.parse()?, field(6)?.parse()?, field(7)?.parse()?],
            age: if age_field.is_empty() {
                None
            } else {
                Some(age_field.parse()?)
            },
            same_label_history: field(9)?.parse()?,
        });
    }
    Ok(rows)
}

#[derive(Serialize)]
pub struct ReportSummary {
    /// Mean absolute difference between ground-truth and predicted hourly
    /// status ratios, over every (hour, status) cell with data.
    pub drift_mean: f64,
    pub drift_std: f64,
    pub cells: usize,
    pub hours_with_data: usize,
}

/// Hourly status-ratio table: for each hour of the day, the share of records
/// in each status, ground truth next to predictions, with absolute
/// differences. Always 24 rows; hours without data carry zero ratios.
fn hourly_table(rows: &[PredictionRow]) -> (Vec<Vec<String>>, ReportSummary) {
    let mut counts = [[0usize; STATUS_COUNT]; 24];
    let mut pred_counts = [[0usize; STATUS_COUNT]; 24];
    let mut totals = [0usize; 24];
    for r in rows {
        totals[r.hour] += 1;
        counts[r.hour][r.label.index()] += 1;
        pred_counts[r.hour][r.predicted.index()] += 1;
    }
    let mut out = Vec::with_capacity(24);
    let mut drifts = Vec::new();
    let mut hours_with_data = 0;
    for h in 0..24 {
        let n = totals[h];
        let mut row = vec![h.to_string(), n.to_string()];
        let ratio = |c: usize, table: &[[usize; STATUS_COUNT]; 24]| {
            if n == 0 {
                0.0
            } else {
                table[h][c] as f64 / n as f64
            }
        };
        for c in 0..STATUS_COUNT {
            row.push(format_float(ratio(c, &counts)));
        }
        for c in 0..STATUS_COUNT {
            row.push(format_float(ratio(c, &pred_counts)));
        }
        for c in 0..STATUS_COUNT {
            let d = (ratio(c, &counts) - ratio(c, &pred_counts)).abs();
            row.push(format_float(d));
            if n > 0 {
                drifts.push(d);
            }
        }
        if n > 0 {
            hours_with_data += 1;
        }
        out.push(row);
    }
    let mean = if drifts.is_empty() {
        0.0
    } else {
        drifts.iter().sum::<f64>() / drifts.len() as f64
    };
    let var = if drifts.is_empty() {
        0.0
    } else {
        drifts.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / drifts.len() as f64
    };
    (
        out,
        ReportSummary {
            drift_mean: mean,
            drift_std: var.sqrt(),
            cells: drifts.len(),
            hours_with_data,
        },
    )
}

fn age_bucket(age: Option<u32>) -> String {
    match age {
        None => "unknown".into(),
        Some(a) => {
            let lo = (a / 5) * 5;
            format!("{lo}-{}", lo + 4)
        }
    }
}

/// Per-group AUC rows over two groupings: age bucket and the number of
/// same-labeled history records.
fn group_auc_rows(rows: &[PredictionRow]) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    for (group_type, key_of) in [
        (
            "age_bucket",
            Box::new(|r: &PredictionRow| age_bucket(r.age)) as Box<dyn Fn(&PredictionRow) -> String>,
        ),
        (
            "same_label_history",
            Box::new(|r: &PredictionRow| r.same_label_history.to_string()),
        ),
    ] {
        let mut groups: BTreeMap<String, Vec<&PredictionRow>> = BTreeMap::new();
        for r in rows {
            groups.entry(key_of(r)).or_default().push(r);
        }
        for (key, members) in groups {
            let mut row = vec![group_type.to_string(), key, members.len().to_string()];
            let mut defined = Vec::new();
            for c in 0..STATUS_COUNT {
                let scores: Vec<f64> = members.iter().map(|r| r.probs[c]).collect();
                let is_pos: Vec<bool> = members.iter().map(|r| r.label.index() == c).collect();
                match roc_auc(&scores, &is_pos) {
                    Some(a) => {
                        row.push(format_float(a));
                        defined.push(a);
                    }
                    None => row.push(String::new()),
                }
            }
            if defined.is_empty() {
                row.push(String::new());
            } else {
                row.push(format_float(defined.iter().sum::<f64>() / defined.len() as f64));
            }
            out.push(row);
        }
    }
    out
}

/// Per-patient dominant status per day (ties resolved to the lower status
/// code), ground truth next to prediction.
fn timeline_rows(rows: &[PredictionRow]) -> Vec<Vec<String>> {
    let mut by_patient_day: BTreeMap<(String, i64), ([usize; STATUS_COUNT], [usize; STATUS_COUNT])> =
        BTreeMap::new();
    for r in rows {
        let day = (r.observation_time / 86_400.0).floor() as i64;
        let entry = by_patient_day
            .entry((r.patient_id.clone(), day))
            .or_default();
        entry.0[r.label.index()] += 1;
        entry.1[r.predicted.index()] += 1;
    }
    let dominant = |counts: &[usize; STATUS_COUNT]| {
        let mut best = 0;
        for c in 1..STATUS_COUNT {
            if counts[c] > counts[best] {
                best = c;
            }
        }
        MedicationStatus::from_index(best).unwrap().as_str().to_string()
    };
    by_patient_day
        .into_iter()
        .map(|((pid, day), (gt, pred))| {
            let n: usize = gt.iter().sum();
            vec![
                pid,
                day.to_string(),
                dominant(&gt),
                dominant(&pred),
                n.to_string(),
            ]
        })
        .collect()
}

pub fn write_reports(rows: &[PredictionRow], out: &Path) -> Result<()> {
    let (hourly, summary) = hourly_table(rows);
    write_csv(
        &out.join("hourly_status_ratio.csv"),
        &[
            "hour",
            "n",
            "gt_ratio_another",
            "gt_ratio_before",
            "gt_ratio_after",
            "pred_ratio_another",
            "pred_ratio_before",
            "pred_ratio_after",
            "abs_diff_another",
            "abs_diff_before",
            "abs_diff_after",
        ],
        &hourly,
    )?;
    write_json(&out.join("report_summary.json"), &summary)?;
    write_csv(
        &out.join("group_auc.csv"),
        &[
            "group_type",
            "group",
            "n",
            "auc_another",
            "auc_before",
            "auc_after",
            "auc_macro",
        ],
        &group_auc_rows(rows),
    )?;
    write_csv(
        &out.join("patient_timeline.csv"),
        &["patient_id", "day", "dominant_true", "dominant_pred", "n"],
        &timeline_rows(rows),
    )?;
    println!(
        "report: drift {:.4} ± {:.4} over {} cells -> {}",
        summary.drift_mean,
        summary.drift_std,
        summary.cells,
        out.display()
    );
    Ok(())
}
