//! The validated record store: parse → filter → preprocess, plus the
//! dataset summary the `ingest` command prints.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::path::Path;
use std::sync::Arc;

use anyhow::{Context, Result};
use serde::Serialize;

use medseq_core::records::{
    filter_cohort, preprocess_record, Cohort, FilterConfig, MedicationStatus, PatientData, Sex,
    MODALITY_COUNT, STATUS_COUNT,
};

use crate::jsonl::{self, ParsedRecord};

#[derive(Clone, Debug, Default, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: impl Iterator<Item = f64>) -> MeanStd {
    let xs: Vec<f64> = values.collect();
    if xs.is_empty() {
        return MeanStd::default();
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

/// Dataset statistics in the spirit of a cohort-description table: counts per
/// class, per modality within class, and per-patient record loads.
#[derive(Clone, Debug, Serialize)]
pub struct IngestSummary {
    pub patients: usize,
    pub records: usize,
    pub parsed_records: usize,
    pub dropped_non_pd_records: usize,
    pub dropped_small_patients: usize,
    /// Record counts by status code (another/before/after).
    pub records_per_status: [usize; STATUS_COUNT],
    pub status_proportions: [f64; STATUS_COUNT],
    /// `[status][modality]` record counts.
    pub records_per_status_modality: [[usize; MODALITY_COUNT]; STATUS_COUNT],
    pub records_per_patient: MeanStd,
    pub age: Option<MeanStd>,
    pub female_patients: usize,
    pub male_patients: usize,
}

impl IngestSummary {
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "patients: {}   records: {} (parsed {}, non-PD dropped {}, small patients dropped {})\n",
            self.patients,
            self.records,
            self.parsed_records,
            self.dropped_non_pd_records,
            self.dropped_small_patients
        ));
        s.push_str("status          records   share   tap/walk/mem\n");
        for c in 0..STATUS_COUNT {
            let m = self.records_per_status_modality[c];
            s.push_str(&format!(
                "{:<15} {:>7}   {:>5.1}%  {}/{}/{}\n",
                MedicationStatus::from_index(c).unwrap().as_str(),
                self.records_per_status[c],
                100.0 * self.status_proportions[c],
                m[0],
                m[1],
                m[2]
            ));
        }
        s.push_str(&format!(
            "records per patient: {:.1} ± {:.1}\n",
            self.records_per_patient.mean, self.records_per_patient.std
        ));
        if let Some(age) = &self.age {
            s.push_str(&format!("age: {:.1} ± {:.1}\n", age.mean, age.std));
        }
        s.push_str(&format!(
            "sex: {} female / {} male\n",
            self.female_patients, self.male_patients
        ));
        s
    }
}

/// Run the ingest pipeline over parsed records: cohort filtering first, then
/// per-record preprocessing (high-pass + fixed-length padding).
pub fn build_store(
    parsed: Vec<ParsedRecord>,
    filter: &FilterConfig,
) -> Result<(Cohort, IngestSummary)> {
    let parsed_records = parsed.len();
    let mut demographics: BTreeMap<String, (Option<u32>, Option<Sex>)> = BTreeMap::new();
    let mut records = Vec::with_capacity(parsed.len());
    for p in parsed {
        let entry = demographics
            .entry(p.record.patient_id.clone())
            .or_insert((None, None));
        if entry.0.is_none() {
            entry.0 = p.age;
        }
        if entry.1.is_none() {
            entry.1 = p.sex;
        }
        records.push(p.record);
    }

    let non_pd = records.iter().filter(|r| !r.is_pd).count();
    let mut patient_ids: Vec<String> = records.iter().map(|r| r.patient_id.clone()).collect();
    patient_ids.sort();
    patient_ids.dedup();

    let raw_cohort = filter_cohort(records);
    let dropped_small_patients = patient_ids.len() - raw_cohort.patient_count();

    // Preprocess every surviving record.
    let mut cohort = Cohort::default();
    for (pid, data) in &raw_cohort.patients {
        let mut processed = PatientData::default();
        for rec in &data.records {
            let p = preprocess_record(rec, filter)
                .with_context(|| format!("preprocessing a record of patient {pid}"))?;
            processed.records.push(Arc::new(p));
        }
        if let Some((age, sex)) = demographics.get(pid) {
            processed.age = *age;
            processed.sex = *sex;
        }
        cohort.patients.insert(pid.clone(), processed);
    }

    let summary = summarize(&cohort, parsed_records, non_pd, dropped_small_patients);
    Ok((cohort, summary))
}

fn summarize(
    cohort: &Cohort,
    parsed_records: usize,
    dropped_non_pd: usize,
    dropped_small_patients: usize,
) -> IngestSummary {
    let mut records_per_status = [0usize; STATUS_COUNT];
    let mut per_status_modality = [[0usize; MODALITY_COUNT]; STATUS_COUNT];
    for rec in cohort.all_records() {
        records_per_status[rec.status.index()] += 1;
        per_status_modality[rec.status.index()][rec.modality.index()] += 1;
    }
    let records = cohort.record_count();
    let status_proportions =
        core::array::from_fn(|c| records_per_status[c] as f64 / records.max(1) as f64);
    let ages: Vec<f64> = cohort
        .patients
        .values()
        .filter_map(|p| p.age.map(|a| a as f64))
        .collect();
    IngestSummary {
        patients: cohort.patient_count(),
        records,
        parsed_records,
        dropped_non_pd_records: dropped_non_pd,
        dropped_small_patients,
        records_per_status,
        status_proportions,
        records_per_status_modality: per_status_modality,
        records_per_patient: mean_std(
            cohort.patients.values().map(|p| p.records.len() as f64),
        ),
        age: if ages.is_empty() {
            None
        } else {
            Some(mean_std(ages.into_iter()))
        },
        female_patients: cohort
            .patients
            .values()
            .filter(|p| p.sex == Some(Sex::Female))
            .count(),
        male_patients: cohort
            .patients
            .values()
            .filter(|p| p.sex == Some(Sex::Male))
            .count(),
    }
}

/// Write a cohort store: one schema line per record, demographics attached.
pub fn write_store(path: &Path, cohort: &Cohort) -> Result<()> {
    let mut buf = Vec::new();
    for (_, data) in &cohort.patients {
        jsonl::write_records(
            &mut buf,
            data.records.iter().map(|r| (r.as_ref(), data.age, data.sex)),
        )?;
    }
    crate::outdir::atomic_write(path, &buf)
}

/// Load a store file back into a cohort. Store records are already
/// preprocessed, so they are used as-is.
pub fn load_store(path: &Path) -> Result<Cohort> {
    let file = std::fs::File::open(path)
        .with_context(|| format!("opening store {}", path.display()))?;
    let parsed = jsonl::parse_records(std::io::BufReader::new(file))
        .with_context(|| format!("reading store {}", path.display()))?;
    let mut demographics: BTreeMap<String, (Option<u32>, Option<Sex>)> = BTreeMap::new();
    let mut records = Vec::with_capacity(parsed.len());
    for p in parsed {
        let entry = demographics
            .entry(p.record.patient_id.clone())
            .or_insert((None, None));
        if entry.0.is_none() {
            entry.0 = p.age;
        }
        if entry.1.is_none() {
            entry.1 = p.sex;
        }
        records.push(p.record);
    }
    let mut cohort = filter_cohort(records);
    for (pid, (age, sex)) in demographics {
        cohort.set_demographics(&pid, age, sex);
    }
    Ok(cohort)
}

/// Parse raw corpus lines from any reader.
pub fn parse_corpus(reader: impl BufRead) -> Result<Vec<ParsedRecord>> {
    jsonl::parse_records(reader)
}

/// Synthetic output → parsed-record form (demographics from the latents).
pub fn synth_to_parsed(out: &medseq_core::synth::SynthOutput) -> Vec<ParsedRecord> {
    out.records
        .iter()
        .map(|r| {
            let lat = &out.latents[&r.patient_id];
            ParsedRecord {
                record: r.clone(),
                age: Some(lat.age),
                sex: Some(lat.sex),
            }
        })
        .collect()
}
