//! Seeded synthetic corpus with a known status-dependent, patient-conditional
//! generating process.
//!
//! Accelerometer records carry a per-patient tremor tone whose amplitude is
//! scaled by the medication status; memory records carry a score whose mean
//! shifts the same way. Per-patient base amplitudes overlap across patients,
//! so status is decodable cleanly only relative to a patient's own baseline —
//! this is what makes the sequence-modeling ablation meaningful.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::math;
use crate::records::{MedicationStatus, Modality, Sex, TestRecord, MODALITY_COUNT, STATUS_COUNT};
use crate::rng::{derive_seed, Rng};

/// 2015-06-01T00:00:00Z; an arbitrary fixed origin for generated timestamps.
const EPOCH_BASE: i64 = 1_433_116_800;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HourProfile {
    /// Probability that a before/after record is drawn from a peak instead
    /// of the uniform background.
    pub peak_weight: f64,
    pub sigma_hours: f64,
    pub before_peaks: [f64; 2],
    pub after_peaks: [f64; 2],
    pub hour_min: u32,
    pub hour_max: u32,
}

impl Default for HourProfile {
    fn default() -> Self {
        HourProfile {
            peak_weight: 0.5,
            sigma_hours: 1.5,
            before_peaks: [9.0, 14.0],
            after_peaks: [10.0, 15.0],
            hour_min: 6,
            hour_max: 22,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub patients: usize,
    pub records_min: usize,
    pub records_max: usize,
    /// Tapping / walking / memory record proportions.
    pub modality_mix: [f64; MODALITY_COUNT],
    /// AnotherTime / BeforeMedication / AfterMedication proportions.
    pub status_mix: [f64; STATUS_COUNT],
    /// Tremor-amplitude (and memory-score) multiplier per status.
    pub status_multiplier: [f64; STATUS_COUNT],
    /// Per-patient base tremor amplitude range; chosen to overlap across
    /// patients so absolute amplitude alone is a weak predictor.
    pub amp_min: f64,
    pub amp_max: f64,
    pub tremor_freq_min: f64,
    pub tremor_freq_max: f64,
    pub gait_freq_min: f64,
    pub gait_freq_max: f64,
    pub noise_sigma: f64,
    pub sample_rate_hz: f64,
    pub hour_profile: HourProfile,
    /// Draw all test hours uniformly, ignoring the status peaks.
    pub flat_hours: bool,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            patients: 60,
            records_min: 8,
            records_max: 40,
            modality_mix: [0.56, 0.34, 0.10],
            status_mix: [0.506, 0.243, 0.251],
            status_multiplier: [1.0, 1.5, 0.6],
            amp_min: 0.5,
            amp_max: 2.0,
            tremor_freq_min: 4.0,
            tremor_freq_max: 6.0,
            gait_freq_min: 1.5,
            gait_freq_max: 2.5,
            noise_sigma: 0.10,
            sample_rate_hz: 100.0,
            hour_profile: HourProfile::default(),
            flat_hours: false,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patients == 0 {
            return Err(Error::InvalidArgument("patient count must be >= 1".into()));
        }
        if self.records_min < 8 || self.records_max < self.records_min {
            return Err(Error::InvalidArgument(
                "records per patient must satisfy 8 <= min <= max".into(),
            ));
        }
        for (name, mix) in [("modality", &self.modality_mix[..]), ("status", &self.status_mix[..])] {
            let sum: f64 = mix.iter().sum();
            if (sum - 1.0).abs() > 1e-9 || mix.iter().any(|&p| p < 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "{name} mix must be nonnegative and sum to 1"
                )));
            }
        }
        if self.status_multiplier.iter().any(|&m| m <= 0.0) {
            return Err(Error::InvalidArgument("status multipliers must be > 0".into()));
        }
        if self.sample_rate_hz <= 0.0 {
            return Err(Error::InvalidArgument("sample rate must be > 0".into()));
        }
        Ok(())
    }

    /// A corpus where status is undecodable: unit multipliers everywhere and
    /// a flat hour profile.
    pub fn null_effect(mut self) -> Self {
        self.status_multiplier = [1.0, 1.0, 1.0];
        self.flat_hours = true;
        self
    }
}

/// Everything latent about one generated patient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientLatents {
    pub amp: f64,
    pub gait_freq_hz: f64,
    pub phase: f64,
    pub memory_base: f64,
    pub age: u32,
    pub sex: Sex,
    pub records: usize,
    pub sessions: usize,
}

#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub records: Vec<TestRecord>,
    pub latents: BTreeMap<String, PatientLatents>,
    /// One tremor tone per corpus, drawn from the configured band; patients
    /// differ in amplitude and phase, not in tremor frequency.
    pub tremor_freq_hz: f64,
    pub config: SynthConfig,
}

fn draw_hour(cfg: &SynthConfig, status: MedicationStatus, rng: &mut Rng) -> u32 {
    let hp = &cfg.hour_profile;
    let range = (hp.hour_max - hp.hour_min + 1) as usize;
    let uniform = |rng: &mut Rng| hp.hour_min + rng.below(range) as u32;
    if cfg.flat_hours {
        return uniform(rng);
    }
    let peaks = match status {
        MedicationStatus::AnotherTime => return uniform(rng),
        MedicationStatus::BeforeMedication => hp.before_peaks,
        MedicationStatus::AfterMedication => hp.after_peaks,
    };
    if rng.next_f64() >= hp.peak_weight {
        return uniform(rng);
    }
    let peak = peaks[rng.below(2)];
    let h = math::round(rng.normal(peak, hp.sigma_hours));
    (h.max(hp.hour_min as f64).min(hp.hour_max as f64)) as u32
}

/// Split `total` into 3 integer counts proportional to `mix` (largest
/// remainder), each at least `min_each`.
fn quota_counts(total: usize, mix: &[f64; 3], min_each: usize) -> [usize; 3] {
    debug_assert!(total >= 3 * min_each);
    let free = total - 3 * min_each;
    let mut counts = [min_each; 3];
    let mut fractions = [0.0; 3];
    let mut used = 0;
    for c in 0..3 {
        let target = mix[c] * free as f64;
        let base = target as usize;
        counts[c] += base;
        used += base;
        fractions[c] = target - base as f64;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| fractions[b].partial_cmp(&fractions[a]).unwrap().then(a.cmp(&b)));
    for i in 0..free - used {
        counts[order[i % 3]] += 1;
    }
    counts
}

/// Pack `total` records into sessions of 1–3 distinct modalities. Modality
/// counts follow the mix exactly (largest-remainder quotas); every session
/// gets at least one record.
fn plan_sessions(
    total: usize,
    mix: &[f64; MODALITY_COUNT],
    rng: &mut Rng,
) -> Vec<Vec<Modality>> {
    let quotas = quota_counts(total, mix, 0);
    // Roughly 1.6 records per session; at least 6 sessions so every patient
    // can host K=4 histories plus queries, and at least max-quota sessions so
    // no session needs a duplicated modality.
    let sessions = (((total as f64 / 1.6) + 0.5) as usize)
        .max(6)
        .max(*quotas.iter().max().unwrap())
        .min(total);

    let mut multiset = Vec::with_capacity(total);
    for (i, &q) in quotas.iter().enumerate() {
        multiset.extend(core::iter::repeat(Modality::from_index(i).unwrap()).take(q));
    }
    rng.shuffle(&mut multiset);

    let mut plan: Vec<Vec<Modality>> = vec![Vec::new(); sessions];
    // Seed every session with one record, then scatter the rest wherever the
    // modality is not already present.
    let mut rest = Vec::new();
    for (i, m) in multiset.into_iter().enumerate() {
        if i < sessions {
            plan[i].push(m);
        } else {
            rest.push(m);
        }
    }
    for m in rest {
        let candidates: Vec<usize> = (0..sessions)
            .filter(|&s| plan[s].len() < MODALITY_COUNT && !plan[s].contains(&m))
            .collect();
        let s = candidates[rng.below(candidates.len())];
        plan[s].push(m);
    }
    plan
}

/// Per-session statuses by largest-remainder quota against the status mix,
/// every status represented at least once, in seeded random order.
fn session_statuses(
    sessions: usize,
    mix: &[f64; STATUS_COUNT],
    rng: &mut Rng,
) -> Vec<MedicationStatus> {
    let mut counts = quota_counts(sessions, mix, 0);
    // Coverage repair: a zero class steals one session from the largest.
    for c in 0..STATUS_COUNT {
        if counts[c] == 0 {
            let donor = (0..STATUS_COUNT).max_by_key(|&i| counts[i]).unwrap();
            counts[donor] -= 1;
            counts[c] += 1;
        }
    }
    let mut statuses = Vec::with_capacity(sessions);
    for c in 0..STATUS_COUNT {
        statuses.extend(
            core::iter::repeat(MedicationStatus::from_index(c).unwrap()).take(counts[c]),
        );
    }
    rng.shuffle(&mut statuses);
    statuses
}

fn accel_series(
    cfg: &SynthConfig,
    latents: &PatientLatents,
    tremor_freq_hz: f64,
    modality: Modality,
    multiplier: f64,
    rng: &mut Rng,
) -> Mat {
    let raw_len = 980 + rng.below(81); // exercises both padding and truncation
    let fs = cfg.sample_rate_hz;
    let amp = latents.amp * multiplier;
    let tremor_w = [1.0, 0.7, 0.4];
    let gait_amp = if modality == Modality::Walking { 0.6 } else { 0.15 };
    let gait_w = [0.9, 0.8, 1.1];
    let gravity = [0.0, 0.0, 9.81];
    Mat::from_fn(raw_len, 3, |r, c| {
        let t = r as f64 / fs;
        amp * tremor_w[c] * math::sin(2.0 * math::PI * tremor_freq_hz * t + latents.phase)
            + gait_amp
                * gait_w[c]
                * math::sin(2.0 * math::PI * latents.gait_freq_hz * t + latents.phase * 0.5
                    + c as f64 * 2.0)
            + gravity[c]
            + rng.normal(0.0, cfg.noise_sigma)
    })
}

fn memory_record_series(
    latents: &PatientLatents,
    multiplier: f64,
    rng: &mut Rng,
) -> (Mat, Vec<f64>) {
    let touches = 6 + rng.below(31); // 6..=36, sometimes longer than the 32 cap
    let mut series = Mat::zeros(touches, 3);
    let mut times = Vec::with_capacity(touches);
    for r in 0..touches {
        let target = rng.below(9) as f64;
        let hit = rng.next_f64() < 0.8;
        let actual = if hit { target } else { rng.below(9) as f64 };
        let score = (latents.memory_base * multiplier + rng.normal(0.0, 0.3)).max(0.0);
        series.set(r, 0, actual);
        series.set(r, 1, target);
        series.set(r, 2, score);
        times.push(r as f64 * 1.5);
    }
    (series, times)
}

/// Generate the corpus. Deterministic per seed; per-patient streams are
/// independent so patients can be regenerated in any order.
pub fn generate(cfg: &SynthConfig) -> Result<SynthOutput> {
    cfg.validate()?;
    let mut records = Vec::new();
    let mut latents_map = BTreeMap::new();
    let tremor_freq_hz =
        Rng::seed_from(derive_seed(cfg.seed, 0x7e3)).uniform(cfg.tremor_freq_min, cfg.tremor_freq_max);

    for p in 0..cfg.patients {
        let pid = format!("p{p:03}");
        let mut rng = Rng::seed_from(derive_seed(cfg.seed, 0x517 + p as u64));

        let total = cfg.records_min + rng.below(cfg.records_max - cfg.records_min + 1);
        let plan = plan_sessions(total, &cfg.modality_mix, &mut rng);
        let latents = PatientLatents {
            amp: rng.uniform(cfg.amp_min, cfg.amp_max),
            gait_freq_hz: rng.uniform(cfg.gait_freq_min, cfg.gait_freq_max),
            phase: rng.uniform(0.0, 2.0 * math::PI),
            memory_base: rng.uniform(2.0, 4.0),
            age: 45 + rng.below(38) as u32,
            sex: if rng.below(2) == 0 { Sex::Female } else { Sex::Male },
            records: total,
            sessions: plan.len(),
        };

        let statuses = session_statuses(plan.len(), &cfg.status_mix, &mut rng);
        let start_day = rng.below(20) as i64;

        for (si, modalities) in plan.iter().enumerate() {
            let status = statuses[si];
            let multiplier = cfg.status_multiplier[status.index()];
            let day = start_day + si as i64;
            let hour = draw_hour(cfg, status, &mut rng) as i64;
            let minute = rng.below(45) as i64;
            let session_start = EPOCH_BASE + day * 86_400 + hour * 3_600 + minute * 60;

            for (mi, &modality) in modalities.iter().enumerate() {
                let timestamp = session_start + mi as i64 * (120 + rng.below(180) as i64);
                let (series, sample_times) = if modality == Modality::Memory {
                    memory_record_series(&latents, multiplier, &mut rng)
                } else {
                    let s = accel_series(cfg, &latents, tremor_freq_hz, modality, multiplier, &mut rng);
                    let times = (0..s.rows()).map(|i| i as f64 / cfg.sample_rate_hz).collect();
                    (s, times)
                };
                records.push(TestRecord {
                    patient_id: pid.clone(),
                    modality,
                    timestamp,
                    status,
                    is_pd: true,
                    series,
                    sample_times,
                });
            }
        }
        latents_map.insert(pid, latents);
    }

    Ok(SynthOutput {
        records,
        latents: latents_map,
        tremor_freq_hz,
        config: *cfg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::filter_cohort;

    fn small_cfg(seed: u64) -> SynthConfig {
        SynthConfig {
            patients: 12,
            records_min: 8,
            records_max: 20,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = small_cfg(7);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.latents, b.latents);
        let c = generate(&small_cfg(8)).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn records_validate_and_survive_cohort_filter() {
        let cfg = small_cfg(3);
        let out = generate(&cfg).unwrap();
        for r in &out.records {
            r.validate().unwrap();
        }
        let n_patients = out.latents.len();
        let cohort = filter_cohort(out.records);
        assert_eq!(cohort.patient_count(), n_patients);
        for (pid, lat) in &out.latents.clone() {
            assert_eq!(cohort.patients[pid].records.len(), lat.records);
        }
    }

    #[test]
    fn all_three_statuses_per_patient() {
        let out = generate(&small_cfg(5)).unwrap();
        let cohort = filter_cohort(out.records);
        for (pid, p) in &cohort.patients {
            let counts = p.label_counts();
            assert!(counts.iter().all(|&c| c > 0), "{pid}: {counts:?}");
        }
    }

    #[test]
    fn mix_proportions_match_config() {
        let cfg = SynthConfig {
            patients: 60,
            seed: 11,
            ..SynthConfig::default()
        };
        let out = generate(&cfg).unwrap();
        let n = out.records.len() as f64;
        let mut modality = [0.0; 3];
        let mut status = [0.0; 3];
        for r in &out.records {
            modality[r.modality.index()] += 1.0;
            status[r.status.index()] += 1.0;
        }
        for c in 0..3 {
            assert!(
                (modality[c] / n - cfg.modality_mix[c]).abs() < 0.02,
                "modality {c}: {}",
                modality[c] / n
            );
            // Statuses are quota'd per session, not per record; multimodal
            // sessions make record-level shares drift slightly more.
            assert!(
                (status[c] / n - cfg.status_mix[c]).abs() < 0.02,
                "status {c}: {}",
                status[c] / n
            );
        }
    }

    /// DFT band energy of the first channel in the tremor band.
    fn tremor_band_energy(rec: &TestRecord, fs: f64) -> f64 {
        let n = rec.series.rows();
        let x: Vec<f64> = (0..n).map(|r| rec.series.get(r, 0)).collect();
        let mut energy = 0.0;
        let lo = (3.5 * n as f64 / fs) as usize;
        let hi = (6.5 * n as f64 / fs) as usize;
        for k in lo..=hi {
            let mut re = 0.0;
            let mut im = 0.0;
            for (i, &v) in x.iter().enumerate() {
                let ang = -2.0 * core::f64::consts::PI * k as f64 * i as f64 / n as f64;
                re += v * libm::cos(ang);
                im += v * libm::sin(ang);
            }
            energy += (re * re + im * im) / (n as f64 * n as f64);
        }
        energy
    }

    fn pairwise_auc(pos: &[f64], neg: &[f64]) -> f64 {
        let mut concordant = 0.0;
        for &p in pos {
            for &n in neg {
                if p > n {
                    concordant += 1.0;
                } else if p == n {
                    concordant += 0.5;
                }
            }
        }
        concordant / (pos.len() as f64 * neg.len() as f64)
    }

    /// Band-energy threshold oracle: relative to the patient's own median the
    /// corpus must be cleanly decodable; on absolute energies it must be
    /// markedly worse. This establishes the corpus is learnable and that
    /// patient context matters.
    #[test]
    fn band_energy_oracle_separates_statuses() {
        let cfg = SynthConfig {
            patients: 25,
            seed: 13,
            ..SynthConfig::default()
        };
        let out = generate(&cfg).unwrap();
        let mut by_patient: BTreeMap<&str, Vec<(MedicationStatus, f64)>> = BTreeMap::new();
        for r in &out.records {
            if r.modality == Modality::Memory {
                continue;
            }
            by_patient
                .entry(r.patient_id.as_str())
                .or_default()
                .push((r.status, tremor_band_energy(r, cfg.sample_rate_hz)));
        }

        let mut rel_before = Vec::new();
        let mut rel_after = Vec::new();
        let mut abs_before = Vec::new();
        let mut abs_after = Vec::new();
        for rows in by_patient.values() {
            let mut energies: Vec<f64> = rows.iter().map(|(_, e)| *e).collect();
            energies.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = energies[energies.len() / 2];
            for &(status, e) in rows {
                match status {
                    MedicationStatus::BeforeMedication => {
                        rel_before.push(e / median);
                        abs_before.push(e);
                    }
                    MedicationStatus::AfterMedication => {
                        rel_after.push(e / median);
                        abs_after.push(e);
                    }
                    MedicationStatus::AnotherTime => {}
                }
            }
        }

        let rel_auc = pairwise_auc(&rel_before, &rel_after);
        let abs_auc = pairwise_auc(&abs_before, &abs_after);
        assert!(rel_auc >= 0.95, "patient-relative oracle AUC {rel_auc}");
        assert!(
            abs_auc < rel_auc,
            "patient context must strictly help: abs {abs_auc} vs rel {rel_auc}"
        );
    }

    #[test]
    fn null_multipliers_make_status_undecodable() {
        let cfg = SynthConfig {
            patients: 40,
            seed: 21,
            ..SynthConfig::default()
        }
        .null_effect();
        let out = generate(&cfg).unwrap();
        let mut by_patient: BTreeMap<&str, Vec<(MedicationStatus, f64)>> = BTreeMap::new();
        for r in &out.records {
            if r.modality == Modality::Memory {
                continue;
            }
            by_patient
                .entry(r.patient_id.as_str())
                .or_default()
                .push((r.status, tremor_band_energy(r, cfg.sample_rate_hz)));
        }
        let mut before = Vec::new();
        let mut after = Vec::new();
        for rows in by_patient.values() {
            let mut energies: Vec<f64> = rows.iter().map(|(_, e)| *e).collect();
            energies.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let median = energies[energies.len() / 2];
            for &(status, e) in rows {
                match status {
                    MedicationStatus::BeforeMedication => before.push(e / median),
                    MedicationStatus::AfterMedication => after.push(e / median),
                    MedicationStatus::AnotherTime => {}
                }
            }
        }
        let auc = pairwise_auc(&before, &after);
        assert!((0.45..=0.55).contains(&auc), "null-effect oracle AUC {auc}");
    }

    #[test]
    fn sessions_merge_within_window() {
        use crate::sequencer::{observations_by_patient, synchronize};
        let out = generate(&small_cfg(17)).unwrap();
        let cohort = filter_cohort(out.records);
        let records: Vec<_> = cohort.all_records().cloned().collect();
        let obs = observations_by_patient(synchronize(&records, 1800));
        for (pid, list) in &obs {
            let lat = &out.latents[pid];
            assert_eq!(list.len(), lat.sessions, "{pid}: one observation per session");
            assert!(list.len() >= 6);
        }
    }
}
