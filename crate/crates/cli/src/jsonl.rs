//! The line-delimited JSON record schema.
//!
//! One record per line:
//! `{"patient_id": str, "modality": "tapping"|"walking"|"memory",
//!   "timestamp": int epoch seconds, "status":
//!   "another_time"|"before_med"|"after_med", "is_pd": bool,
//!   "samples": [[t, c1, c2, c3], ...]}`
//!
//! Timestamps are UTC. Unknown extra keys are ignored; the optional `age`
//! and `sex` keys carry per-patient demographics when present.

use std::io::{BufRead, Write};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use medseq_core::records::{MedicationStatus, Modality, Sex, TestRecord};
use medseq_core::Mat;

#[derive(Deserialize)]
struct RawLine {
    patient_id: String,
    modality: String,
    timestamp: i64,
    status: String,
    is_pd: bool,
    samples: Vec<Vec<f64>>,
    #[serde(default)]
    age: Option<u32>,
    #[serde(default)]
    sex: Option<String>,
}

#[derive(Serialize)]
struct RawLineOut<'a> {
    patient_id: &'a str,
    modality: &'a str,
    timestamp: i64,
    status: &'a str,
    is_pd: bool,
    samples: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    age: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sex: Option<&'a str>,
}

/// One parsed line: the record plus any demographics that rode along.
#[derive(Clone, Debug)]
pub struct ParsedRecord {
    pub record: TestRecord,
    pub age: Option<u32>,
    pub sex: Option<Sex>,
}

fn parse_line(line: &str, line_no: usize) -> Result<ParsedRecord> {
    let raw: RawLine = serde_json::from_str(line)
        .with_context(|| format!("line {line_no}: malformed record"))?;
    let modality = Modality::parse_str(&raw.modality)
        .ok_or_else(|| anyhow!("line {line_no}: unknown modality \"{}\"", raw.modality))?;
    let status = MedicationStatus::parse_str(&raw.status)
        .ok_or_else(|| anyhow!("line {line_no}: unknown status \"{}\"", raw.status))?;
    let sex = match &raw.sex {
        None => None,
        Some(s) => Some(
            Sex::parse_str(s).ok_or_else(|| anyhow!("line {line_no}: unknown sex \"{s}\""))?,
        ),
    };
    if raw.samples.is_empty() {
        bail!("line {line_no}: record has no samples");
    }
    let channels = modality.channel_count();
    let mut rows: Vec<&Vec<f64>> = Vec::with_capacity(raw.samples.len());
    for (i, s) in raw.samples.iter().enumerate() {
        if s.len() != channels + 1 {
            bail!(
                "line {line_no}: sample {i} has {} values, expected {} (t plus {channels} channels)",
                s.len(),
                channels + 1
            );
        }
        rows.push(s);
    }
    // Sample timestamps must end up nondecreasing; sort if the input is not.
    if rows.windows(2).any(|w| w[0][0] > w[1][0]) {
        rows.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
    }
    let series = Mat::from_fn(rows.len(), channels, |r, c| rows[r][c + 1]);
    let sample_times = rows.iter().map(|r| r[0]).collect();
    let record = TestRecord {
        patient_id: raw.patient_id,
        modality,
        timestamp: raw.timestamp,
        status,
        is_pd: raw.is_pd,
        series,
        sample_times,
    };
    record
        .validate()
        .map_err(|e| anyhow!("line {line_no}: {e}"))?;
    Ok(ParsedRecord {
        record,
        age: raw.age,
        sex,
    })
}

/// Parse a line-delimited record stream, preserving input order. Blank lines
/// are skipped; any malformed line fails with its 1-based line number.
pub fn parse_records(reader: impl BufRead) -> Result<Vec<ParsedRecord>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.with_context(|| format!("line {}: read failed", i + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_line(&line, i + 1)?);
    }
    Ok(out)
}

/// Serialize one record back to its schema line.
pub fn record_to_line(record: &TestRecord, age: Option<u32>, sex: Option<Sex>) -> String {
    let samples: Vec<Vec<f64>> = (0..record.series.rows())
        .map(|r| {
            let mut row = Vec::with_capacity(record.series.cols() + 1);
            row.push(record.sample_times[r]);
            row.extend_from_slice(record.series.row(r));
            row
        })
        .collect();
    let out = RawLineOut {
        patient_id: &record.patient_id,
        modality: record.modality.as_str(),
        timestamp: record.timestamp,
        status: record.status.as_str(),
        is_pd: record.is_pd,
        samples,
        age,
        sex: sex.map(|s| s.as_str()),
    };
    serde_json::to_string(&out).expect("record serialization cannot fail")
}

pub fn write_records<'a>(
    mut w: impl Write,
    records: impl Iterator<Item = (&'a TestRecord, Option<u32>, Option<Sex>)>,
) -> Result<()> {
    for (rec, age, sex) in records {
        writeln!(w, "{}", record_to_line(rec, age, sex))?;
    }
    Ok(())
}
