//! Raw test records, participant filtering, and per-record signal
//! preprocessing.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::{format, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

pub const MODALITY_COUNT: usize = 3;
pub const STATUS_COUNT: usize = 3;

/// Patients with fewer surviving records than this are dropped from the cohort.
pub const MIN_RECORDS_PER_PATIENT: usize = 6;

/// The three smartphone test modalities. Every modality carries three value
/// channels; tapping and walking are accelerometer (x, y, z), memory is the
/// per-touch triple (actual, target, score).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Modality {
    Tapping,
    Walking,
    Memory,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Tapping, Modality::Walking, Modality::Memory];

    pub fn index(self) -> usize {
        match self {
            Modality::Tapping => 0,
            Modality::Walking => 1,
            Modality::Memory => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Modality::ALL.get(i).copied()
    }

    pub fn channel_count(self) -> usize {
        3
    }

    /// Fixed post-padding series length for this modality.
    pub fn max_len(self) -> usize {
        match self {
            Modality::Tapping | Modality::Walking => 1024,
            Modality::Memory => 32,
        }
    }

    /// Whether the series is an accelerometer signal that gets high-pass
    /// filtered during preprocessing.
    pub fn is_accelerometer(self) -> bool {
        !matches!(self, Modality::Memory)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Tapping => "tapping",
            Modality::Walking => "walking",
            Modality::Memory => "memory",
        }
    }

    pub fn parse_str(s: &str) -> Option<Modality> {
        match s {
            "tapping" => Some(Modality::Tapping),
            "walking" => Some(Modality::Walking),
            "memory" => Some(Modality::Memory),
            _ => None,
        }
    }
}

/// Three-way medication status label. Integer codes are stable: they index
/// the status-encoding table and the class axis of logits and metrics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MedicationStatus {
    AnotherTime,
    BeforeMedication,
    AfterMedication,
}

impl MedicationStatus {
    pub const ALL: [MedicationStatus; 3] = [
        MedicationStatus::AnotherTime,
        MedicationStatus::BeforeMedication,
        MedicationStatus::AfterMedication,
    ];

    pub fn index(self) -> usize {
        match self {
            MedicationStatus::AnotherTime => 0,
            MedicationStatus::BeforeMedication => 1,
            MedicationStatus::AfterMedication => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<MedicationStatus> {
        MedicationStatus::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MedicationStatus::AnotherTime => "another_time",
            MedicationStatus::BeforeMedication => "before_med",
            MedicationStatus::AfterMedication => "after_med",
        }
    }

    pub fn parse_str(s: &str) -> Option<MedicationStatus> {
        match s {
            "another_time" => Some(MedicationStatus::AnotherTime),
            "before_med" => Some(MedicationStatus::BeforeMedication),
            "after_med" => Some(MedicationStatus::AfterMedication),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sex {
    Female,
    Male,
}

impl Sex {
    pub fn as_str(self) -> &'static str {
        match self {
            Sex::Female => "female",
            Sex::Male => "male",
        }
    }

    pub fn parse_str(s: &str) -> Option<Sex> {
        match s {
            "female" => Some(Sex::Female),
            "male" => Some(Sex::Male),
            _ => None,
        }
    }
}

/// One raw multimodal test record.
#[derive(Clone, Debug, PartialEq)]
pub struct TestRecord {
    pub patient_id: String,
    pub modality: Modality,
    /// Epoch seconds, UTC.
    pub timestamp: i64,
    pub status: MedicationStatus,
    pub is_pd: bool,
    /// `raw_length × channel_count` value channels in declared order.
    pub series: Mat,
    /// Per-sample timestamps in seconds, monotone nondecreasing; same length
    /// as `series` has rows.
    pub sample_times: Vec<f64>,
}

impl TestRecord {
    pub fn validate(&self) -> Result<()> {
        if self.series.rows() == 0 {
            return Err(Error::EmptyInput(format!(
                "record for {} has no samples",
                self.patient_id
            )));
        }
        if self.series.cols() != self.modality.channel_count() {
            return Err(Error::ShapeMismatch(format!(
                "{} series has {} channels, modality {} requires {}",
                self.patient_id,
                self.series.cols(),
                self.modality.as_str(),
                self.modality.channel_count()
            )));
        }
        if self.sample_times.len() != self.series.rows() {
            return Err(Error::ShapeMismatch(format!(
                "{} has {} sample times for {} rows",
                self.patient_id,
                self.sample_times.len(),
                self.series.rows()
            )));
        }
        if self.sample_times.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::InvalidArgument(format!(
                "{} sample times are not nondecreasing",
                self.patient_id
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default)]
pub struct PatientData {
    pub records: Vec<Arc<TestRecord>>,
    pub age: Option<u32>,
    pub sex: Option<Sex>,
}

impl PatientData {
    pub fn label_counts(&self) -> [usize; STATUS_COUNT] {
        let mut counts = [0; STATUS_COUNT];
        for r in &self.records {
            counts[r.status.index()] += 1;
        }
        counts
    }
}

/// Records grouped by patient after filtering.
#[derive(Clone, Debug, Default)]
pub struct Cohort {
    pub patients: BTreeMap<String, PatientData>,
}

impl Cohort {
    pub fn record_count(&self) -> usize {
        self.patients.values().map(|p| p.records.len()).sum()
    }

    pub fn patient_count(&self) -> usize {
        self.patients.len()
    }

    pub fn label_counts(&self) -> [usize; STATUS_COUNT] {
        let mut counts = [0; STATUS_COUNT];
        for p in self.patients.values() {
            for (c, n) in counts.iter_mut().zip(p.label_counts()) {
                *c += n;
            }
        }
        counts
    }

    pub fn all_records(&self) -> impl Iterator<Item = &Arc<TestRecord>> {
        self.patients.values().flat_map(|p| p.records.iter())
    }

    pub fn set_demographics(&mut self, patient_id: &str, age: Option<u32>, sex: Option<Sex>) {
        if let Some(p) = self.patients.get_mut(patient_id) {
            if age.is_some() {
                p.age = age;
            }
            if sex.is_some() {
                p.sex = sex;
            }
        }
    }
}

/// Drop records flagged as not coming from a diagnosed patient, then drop
/// patients left with fewer than [`MIN_RECORDS_PER_PATIENT`] records. The
/// status whitelist is structural: `MedicationStatus` admits only the three
/// target labels.
pub fn filter_cohort(records: impl IntoIterator<Item = TestRecord>) -> Cohort {
    let mut by_patient: BTreeMap<String, PatientData> = BTreeMap::new();
    for rec in records {
        if !rec.is_pd {
            continue;
        }
        by_patient
            .entry(rec.patient_id.clone())
            .or_default()
            .records
            .push(Arc::new(rec));
    }
    by_patient.retain(|_, p| p.records.len() >= MIN_RECORDS_PER_PATIENT);
    Cohort {
        patients: by_patient,
    }
}

/// Re-apply the cohort filter to an existing cohort (used to state the
/// idempotence property; demographics are preserved).
pub fn refilter_cohort(cohort: &Cohort) -> Cohort {
    let mut out = Cohort::default();
    for (pid, p) in &cohort.patients {
        let kept: Vec<Arc<TestRecord>> = p
            .records
            .iter()
            .filter(|r| r.is_pd)
            .cloned()
            .collect();
        if kept.len() >= MIN_RECORDS_PER_PATIENT {
            out.patients.insert(
                pid.clone(),
                PatientData {
                    records: kept,
                    age: p.age,
                    sex: p.sex,
                },
            );
        }
    }
    out
}

/// Zero-phase first-order recursive high-pass filter, applied per channel.
///
/// One directional pass computes `y[0] = 0`, `y[i] = α·(y[i-1] + x[i] -
/// x[i-1])` with `α = rc/(rc + dt)`, `rc = 1/(2π·cutoff)`, `dt =
/// 1/sample_rate`; the pass is run forward and then backward over the result
/// so the phase response cancels.
pub fn high_pass_filter(series: &Mat, sample_rate_hz: f64, cutoff_hz: f64) -> Result<Mat> {
    if sample_rate_hz <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "sample rate must be positive, got {sample_rate_hz}"
        )));
    }
    if cutoff_hz <= 0.0 || sample_rate_hz <= 2.0 * cutoff_hz {
        return Err(Error::InvalidArgument(format!(
            "cutoff {cutoff_hz} Hz must be positive and below half the sample rate {sample_rate_hz} Hz"
        )));
    }
    if !series.is_finite() {
        return Err(Error::NonFinite("high-pass filter input".into()));
    }
    let rc = 1.0 / (2.0 * crate::math::PI * cutoff_hz);
    let dt = 1.0 / sample_rate_hz;
    let alpha = rc / (rc + dt);

    let n = series.rows();
    let c = series.cols();
    let mut out = Mat::zeros(n, c);
    if n == 0 {
        return Ok(out);
    }
    let mut chan = Vec::with_capacity(n);
    for ch in 0..c {
        chan.clear();
        for r in 0..n {
            chan.push(series.get(r, ch));
        }
        hp_pass(&mut chan, alpha);
        chan.reverse();
        hp_pass(&mut chan, alpha);
        chan.reverse();
        for (r, &v) in chan.iter().enumerate() {
            out.set(r, ch, v);
        }
    }
    Ok(out)
}

fn hp_pass(x: &mut [f64], alpha: f64) {
    let mut prev_x = x[0];
    let mut prev_y = 0.0;
    x[0] = 0.0;
    for v in x.iter_mut().skip(1) {
        let cur = *v;
        let y = alpha * (prev_y + cur - prev_x);
        *v = y;
        prev_x = cur;
        prev_y = y;
    }
}

/// Pad with zero rows or truncate (keeping the earliest samples) to exactly
/// `target_len` rows.
pub fn pad_or_truncate(series: &Mat, target_len: usize) -> Mat {
    let c = series.cols();
    let mut out = Mat::zeros(target_len, c);
    let keep = series.rows().min(target_len);
    for r in 0..keep {
        out.row_mut(r).copy_from_slice(series.row(r));
    }
    out
}

/// One touch in a memory test: `(time, actual, target, score)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TouchEvent {
    pub time: f64,
    pub actual: f64,
    pub target: f64,
    pub score: f64,
}

/// Build the fixed-length memory-test series from touch events. Channels are
/// (actual, target, score) in event order; event times feed only record
/// ordering, not channel values.
pub fn memory_series(events: &[TouchEvent], target_len: usize) -> Mat {
    let raw = Mat::from_fn(events.len(), 3, |r, c| match c {
        0 => events[r].actual,
        1 => events[r].target,
        _ => events[r].score,
    });
    pad_or_truncate(&raw, target_len)
}

/// Filter configuration for accelerometer preprocessing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub sample_rate_hz: f64,
    pub cutoff_hz: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            sample_rate_hz: 100.0,
            cutoff_hz: 0.3,
        }
    }
}

/// Per-record preprocessing: high-pass accelerometer channels, then pad or
/// truncate to the modality's fixed length. Memory series are only padded.
pub fn preprocess_record(rec: &TestRecord, filter: &FilterConfig) -> Result<TestRecord> {
    rec.validate()?;
    let filtered = if rec.modality.is_accelerometer() {
        high_pass_filter(&rec.series, filter.sample_rate_hz, filter.cutoff_hz)?
    } else {
        rec.series.clone()
    };
    let target = rec.modality.max_len();
    let series = pad_or_truncate(&filtered, target);
    // Padding rows repeat the last real sample time so the sequence stays
    // nondecreasing; the values feed only ordering, never the channels.
    let last_time = rec.sample_times.last().copied().unwrap_or(0.0);
    let mut sample_times = Vec::with_capacity(target);
    for i in 0..target {
        sample_times.push(rec.sample_times.get(i).copied().unwrap_or(last_time));
    }
    Ok(TestRecord {
        patient_id: rec.patient_id.clone(),
        modality: rec.modality,
        timestamp: rec.timestamp,
        status: rec.status,
        is_pd: rec.is_pd,
        series,
        sample_times,
    })
}

/// Preprocess a whole batch of records; errors carry the failing record's
/// position in the input.
pub fn preprocess_records(
    records: impl IntoIterator<Item = TestRecord>,
    filter: &FilterConfig,
) -> Result<Vec<TestRecord>> {
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            preprocess_record(&r, filter)
                .map_err(|e| Error::InvalidArgument(format!("record {i}: {e}")))
        })
        .collect()
}

#[cfg(test)]
pub(crate) fn test_record(
    patient_id: &str,
    modality: Modality,
    timestamp: i64,
    status: MedicationStatus,
    rows: usize,
) -> TestRecord {
    let c = modality.channel_count();
    TestRecord {
        patient_id: patient_id.into(),
        modality,
        timestamp,
        status,
        is_pd: true,
        series: Mat::zeros(rows, c),
        sample_times: (0..rows).map(|i| i as f64 * 0.01).collect(),
    }
}
