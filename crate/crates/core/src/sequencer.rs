//! Temporal synchronization of records into multimodal observations,
//! patient-level sequence sampling, and patient-grouped k-fold splitting.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::records::{Cohort, MedicationStatus, Modality, TestRecord, STATUS_COUNT};
use crate::rng::Rng;

pub const DEFAULT_MERGE_WINDOW_SECS: i64 = 1800;

/// Records from one patient merged into a single multimodal time point.
#[derive(Clone, Debug)]
pub struct SynchronizedObservation {
    pub patient_id: String,
    pub status: MedicationStatus,
    /// Mean of member record timestamps, epoch seconds.
    pub observation_time: f64,
    /// At most one member per modality, sorted by modality index.
    pub members: Vec<Arc<TestRecord>>,
}

impl SynchronizedObservation {
    pub fn member(&self, modality: Modality) -> Option<&Arc<TestRecord>> {
        self.members.iter().find(|r| r.modality == modality)
    }

    fn from_members(mut members: Vec<Arc<TestRecord>>) -> SynchronizedObservation {
        members.sort_by_key(|r| r.modality.index());
        let sum: f64 = members.iter().map(|r| r.timestamp as f64).sum();
        SynchronizedObservation {
            patient_id: members[0].patient_id.clone(),
            status: members[0].status,
            observation_time: sum / members.len() as f64,
            members,
        }
    }
}

/// Group records by (patient, status), sort each group chronologically, and
/// greedily merge left-to-right: a record joins the open subgroup iff its
/// timestamp is within `window_secs` of the subgroup's earliest member and
/// its modality is not already present; otherwise a new subgroup opens.
/// Output is sorted by (patient, observation time).
pub fn synchronize(
    records: &[Arc<TestRecord>],
    window_secs: i64,
) -> Vec<SynchronizedObservation> {
    let mut groups: BTreeMap<(String, usize), Vec<Arc<TestRecord>>> = BTreeMap::new();
    for rec in records {
        groups
            .entry((rec.patient_id.clone(), rec.status.index()))
            .or_default()
            .push(rec.clone());
    }

    let mut out = Vec::new();
    for ((_, _), mut group) in groups {
        group.sort_by(|a, b| {
            (a.timestamp, a.modality.index()).cmp(&(b.timestamp, b.modality.index()))
        });
        let mut current: Vec<Arc<TestRecord>> = Vec::new();
        for rec in group {
            let fits = match current.first() {
                None => true,
                Some(first) => {
                    rec.timestamp - first.timestamp <= window_secs
                        && !current.iter().any(|r| r.modality == rec.modality)
                }
            };
            if !fits {
                out.push(SynchronizedObservation::from_members(core::mem::take(
                    &mut current,
                )));
            }
            current.push(rec);
        }
        if !current.is_empty() {
            out.push(SynchronizedObservation::from_members(current));
        }
    }

    out.sort_by(|a, b| {
        (
            a.patient_id.as_str(),
            a.observation_time,
            a.status.index(),
        )
            .partial_cmp(&(b.patient_id.as_str(), b.observation_time, b.status.index()))
            .unwrap()
    });
    out
}

/// Observations per patient, chronological across statuses.
pub type ObservationSet = BTreeMap<String, Vec<SynchronizedObservation>>;

pub fn observations_by_patient(observations: Vec<SynchronizedObservation>) -> ObservationSet {
    let mut map: ObservationSet = BTreeMap::new();
    for obs in observations {
        map.entry(obs.patient_id.clone()).or_default().push(obs);
    }
    for list in map.values_mut() {
        list.sort_by(|a, b| {
            a.observation_time
                .partial_cmp(&b.observation_time)
                .unwrap()
                .then(a.status.index().cmp(&b.status.index()))
        });
    }
    map
}

/// Which observation(s) become prediction targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryPolicy {
    /// Only the chronologically last observation is a query.
    LastAsQuery,
    /// Every observation with at least K strict predecessors is a query once.
    AllEligible,
}

/// How the K history observations are chosen from a query's strict past.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HistoryPolicy {
    /// The K most recent strict predecessors (deterministic).
    MostRecent,
    /// K predecessors sampled uniformly without replacement (seeded).
    SampledUniform,
}

/// K history observations with known status plus one query observation.
#[derive(Clone, Debug)]
pub struct SequenceSample {
    pub patient_id: String,
    /// Chronological; may be empty only in the no-sequence-modeling ablation.
    pub history: Vec<SynchronizedObservation>,
    pub query: SynchronizedObservation,
    pub label: MedicationStatus,
}

#[derive(Clone, Debug, Default)]
pub struct SequenceBuild {
    pub samples: Vec<SequenceSample>,
    /// Patients skipped because they had no observation with K strict
    /// predecessors.
    pub skipped_patients: usize,
}

/// Build (K history + 1 query) samples for every patient. History
/// observations always strictly precede the query in time.
pub fn build_sequences(
    observations: &ObservationSet,
    k: usize,
    query_policy: QueryPolicy,
    history_policy: HistoryPolicy,
    rng: &mut Rng,
) -> SequenceBuild {
    let mut build = SequenceBuild::default();
    for (patient_id, obs) in observations {
        let query_indices: Vec<usize> = match query_policy {
            QueryPolicy::LastAsQuery => {
                if obs.is_empty() {
                    Vec::new()
                } else {
                    alloc::vec![obs.len() - 1]
                }
            }
            QueryPolicy::AllEligible => (0..obs.len()).collect(),
        };

        let mut produced = 0;
        for qi in query_indices {
            let query = &obs[qi];
            let past: Vec<usize> = (0..obs.len())
                .filter(|&i| obs[i].observation_time < query.observation_time)
                .collect();
            if past.len() < k {
                continue;
            }
            let chosen: Vec<usize> = match history_policy {
                HistoryPolicy::MostRecent => past[past.len() - k..].to_vec(),
                HistoryPolicy::SampledUniform => {
                    let mut pool = past.clone();
                    rng.shuffle(&mut pool);
                    let mut picks = pool[..k].to_vec();
                    picks.sort_unstable();
                    picks
                }
            };
            build.samples.push(SequenceSample {
                patient_id: patient_id.clone(),
                history: chosen.iter().map(|&i| obs[i].clone()).collect(),
                query: query.clone(),
                label: query.status,
            });
            produced += 1;
        }
        if produced == 0 {
            build.skipped_patients += 1;
        }
    }
    build
}

/// Drop every sample's history: the no-sequence-modeling ablation classifies
/// the query record alone. Query eligibility is unchanged so rows stay
/// comparable across ablation variants.
pub fn strip_history(samples: &[SequenceSample]) -> Vec<SequenceSample> {
    samples
        .iter()
        .map(|s| SequenceSample {
            patient_id: s.patient_id.clone(),
            history: Vec::new(),
            query: s.query.clone(),
            label: s.label,
        })
        .collect()
}

/// Patient-grouped fold assignment. Serializes to the fold-manifest schema
/// `{"folds": N, "seed": S, "assignment": {patient_id: fold}}`.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FoldAssignment {
    pub folds: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldAssignment {
    pub fn patients_in(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(p, _)| p.as_str())
            .collect()
    }

    pub fn fold_of(&self, patient_id: &str) -> Option<usize> {
        self.assignment.get(patient_id).copied()
    }
}

/// Greedy balanced assignment: patients sorted by descending record count
/// (seed breaks ties), each placed in the fold that minimizes a cost made of
/// record-count deviation plus label-distribution deviation.
pub fn kfold_split(cohort: &Cohort, folds: usize, seed: u64) -> Result<FoldAssignment> {
    if folds == 0 {
        return Err(Error::InvalidArgument("fold count must be positive".into()));
    }
    if cohort.patient_count() < folds {
        return Err(Error::TooFewPatients {
            have: cohort.patient_count(),
            need: folds,
        });
    }

    let mut rng = Rng::seed_from(seed);
    let mut patients: Vec<(&String, usize, [usize; STATUS_COUNT])> = cohort
        .patients
        .iter()
        .map(|(pid, p)| (pid, p.records.len(), p.label_counts()))
        .collect();
    let tie_rank = rng.permutation(patients.len());
    let mut order: Vec<usize> = (0..patients.len()).collect();
    order.sort_by_key(|&i| (core::cmp::Reverse(patients[i].1), tie_rank[i]));

    let total_records: usize = patients.iter().map(|p| p.1).sum();
    let total_labels = cohort.label_counts();
    let global_ratio: [f64; STATUS_COUNT] = core::array::from_fn(|c| {
        total_labels[c] as f64 / total_records.max(1) as f64
    });
    let target_size = total_records as f64 / folds as f64;

    let mut fold_sizes = alloc::vec![0usize; folds];
    let mut fold_labels = alloc::vec![[0usize; STATUS_COUNT]; folds];
    let fold_order = rng.permutation(folds);

    let mut assignment = BTreeMap::new();
    for idx in order {
        let (pid, count, labels) = (patients[idx].0, patients[idx].1, patients[idx].2);
        let mut best: Option<(f64, usize)> = None;
        for &f in &fold_order {
            let new_size = (fold_sizes[f] + count) as f64;
            // Monotone load term so lighter folds always attract the next
            // patient; label deviation breaks near-ties.
            let size_dev = new_size / target_size.max(1.0);
            let mut label_dev = 0.0;
            for c in 0..STATUS_COUNT {
                let ratio = (fold_labels[f][c] + labels[c]) as f64 / new_size;
                label_dev += (ratio - global_ratio[c]).abs();
            }
            let cost = size_dev + 0.1 * label_dev;
            if best.map_or(true, |(b, _)| cost < b) {
                best = Some((cost, f));
            }
        }
        let f = best.unwrap().1;
        fold_sizes[f] += count;
        for c in 0..STATUS_COUNT {
            fold_labels[f][c] += labels[c];
        }
        assignment.insert(pid.clone(), f);
    }
    patients.clear();

    Ok(FoldAssignment {
        folds,
        seed,
        assignment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{filter_cohort, test_record, Modality::*, MedicationStatus::*};

    fn rec(pid: &str, m: Modality, ts: i64, s: MedicationStatus) -> Arc<TestRecord> {
        Arc::new(test_record(pid, m, ts, s, 4))
    }

    #[test]
    fn window_splits_on_gap() {
        let records = alloc::vec![
            rec("p", Tapping, 0, AnotherTime),
            rec("p", Walking, 600, AnotherTime),
            rec("p", Memory, 2700, AnotherTime),
        ];
        let obs = synchronize(&records, 1800);
        assert_eq!(obs.len(), 2);
        assert_eq!(obs[0].members.len(), 2);
        assert_eq!(obs[1].members.len(), 1);
        assert_eq!(obs[1].members[0].modality, Memory);
        assert!((obs[0].observation_time - 300.0).abs() < 1e-9);
    }

    #[test]
    fn duplicate_modality_opens_new_subgroup() {
        let records = alloc::vec![
            rec("p", Tapping, 0, AnotherTime),
            rec("p", Tapping, 60, AnotherTime),
        ];
        let obs = synchronize(&records, 1800);
        assert_eq!(obs.len(), 2);
    }

    #[test]
    fn single_record_single_observation() {
        let records = alloc::vec![rec("p", Walking, 1234, BeforeMedication)];
        let obs = synchronize(&records, 1800);
        assert_eq!(obs.len(), 1);
        assert_eq!(obs[0].members.len(), 1);
        assert_eq!(obs[0].observation_time, 1234.0);
    }

    #[test]
    fn statuses_never_mix() {
        let records = alloc::vec![
            rec("p", Tapping, 0, AnotherTime),
            rec("p", Walking, 10, BeforeMedication),
        ];
        let obs = synchronize(&records, 1800);
        assert_eq!(obs.len(), 2);
    }

    #[test]
    fn forced_history_when_exactly_k_plus_one() {
        let obs_list: Vec<SynchronizedObservation> = (0..5)
            .map(|i| SynchronizedObservation {
                patient_id: "p".into(),
                status: AnotherTime,
                observation_time: i as f64 * 1000.0,
                members: alloc::vec![rec("p", Tapping, i * 1000, AnotherTime)],
            })
            .collect();
        let mut set = ObservationSet::new();
        set.insert("p".into(), obs_list);
        let mut rng = Rng::seed_from(0);
        let build = build_sequences(&set, 4, QueryPolicy::LastAsQuery, HistoryPolicy::SampledUniform, &mut rng);
        assert_eq!(build.samples.len(), 1);
        let s = &build.samples[0];
        assert_eq!(s.history.len(), 4);
        assert_eq!(s.query.observation_time, 4000.0);
        let times: Vec<f64> = s.history.iter().map(|o| o.observation_time).collect();
        assert_eq!(times, alloc::vec![0.0, 1000.0, 2000.0, 3000.0]);
    }

    #[test]
    fn all_eligible_counts_queries() {
        let obs_list: Vec<SynchronizedObservation> = (0..10)
            .map(|i| SynchronizedObservation {
                patient_id: "p".into(),
                status: AnotherTime,
                observation_time: i as f64,
                members: alloc::vec![rec("p", Tapping, i, AnotherTime)],
            })
            .collect();
        let mut set = ObservationSet::new();
        set.insert("p".into(), obs_list);
        let mut rng = Rng::seed_from(0);
        let build = build_sequences(&set, 4, QueryPolicy::AllEligible, HistoryPolicy::MostRecent, &mut rng);
        assert_eq!(build.samples.len(), 6);
        assert_eq!(build.skipped_patients, 0);
    }

    #[test]
    fn too_few_observations_skips_patient() {
        let obs_list: Vec<SynchronizedObservation> = (0..4)
            .map(|i| SynchronizedObservation {
                patient_id: "p".into(),
                status: AnotherTime,
                observation_time: i as f64,
                members: alloc::vec![rec("p", Tapping, i, AnotherTime)],
            })
            .collect();
        let mut set = ObservationSet::new();
        set.insert("p".into(), obs_list);
        let mut rng = Rng::seed_from(0);
        let build = build_sequences(&set, 4, QueryPolicy::LastAsQuery, HistoryPolicy::SampledUniform, &mut rng);
        assert!(build.samples.is_empty());
        assert_eq!(build.skipped_patients, 1);
    }

    #[test]
    fn history_strictly_precedes_query() {
        let mut rng = Rng::seed_from(9);
        let mut obs_list = Vec::new();
        for i in 0..12 {
            obs_list.push(SynchronizedObservation {
                patient_id: "p".into(),
                status: MedicationStatus::from_index(i % 3).unwrap(),
                observation_time: (i * 37) as f64,
                members: alloc::vec![rec("p", Tapping, (i * 37) as i64, AnotherTime)],
            });
        }
        let mut set = ObservationSet::new();
        set.insert("p".into(), obs_list);
        for policy in [HistoryPolicy::MostRecent, HistoryPolicy::SampledUniform] {
            let build = build_sequences(&set, 3, QueryPolicy::AllEligible, policy, &mut rng);
            for s in &build.samples {
                for h in &s.history {
                    assert!(h.observation_time < s.query.observation_time);
                }
                let mut sorted = s.history.clone();
                sorted.sort_by(|a, b| a.observation_time.partial_cmp(&b.observation_time).unwrap());
                for (a, b) in s.history.iter().zip(sorted.iter()) {
                    assert_eq!(a.observation_time, b.observation_time);
                }
            }
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let obs_list: Vec<SynchronizedObservation> = (0..20)
            .map(|i| SynchronizedObservation {
                patient_id: "p".into(),
                status: AnotherTime,
                observation_time: i as f64,
                members: alloc::vec![rec("p", Tapping, i, AnotherTime)],
            })
            .collect();
        let mut set = ObservationSet::new();
        set.insert("p".into(), obs_list);
        let run = |seed| {
            let mut rng = Rng::seed_from(seed);
            build_sequences(&set, 4, QueryPolicy::AllEligible, HistoryPolicy::SampledUniform, &mut rng)
                .samples
                .iter()
                .flat_map(|s| s.history.iter().map(|h| h.observation_time as i64))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    fn cohort_with(counts: &[(&str, usize)]) -> Cohort {
        let mut records = Vec::new();
        for &(pid, n) in counts {
            for i in 0..n {
                let status = MedicationStatus::from_index(i % 3).unwrap();
                records.push(test_record(pid, Tapping, i as i64 * 10_000, status, 4));
            }
        }
        filter_cohort(records)
    }

    #[test]
    fn kfold_even_split() {
        let counts: Vec<(String, usize)> = (0..10).map(|i| (alloc::format!("p{i}"), 8)).collect();
        let refs: Vec<(&str, usize)> = counts.iter().map(|(s, n)| (s.as_str(), *n)).collect();
        let cohort = cohort_with(&refs);
        let fa = kfold_split(&cohort, 5, 1).unwrap();
        for f in 0..5 {
            assert_eq!(fa.patients_in(f).len(), 2, "fold {f}");
        }
    }

    #[test]
    fn kfold_is_a_partition() {
        let counts: Vec<(String, usize)> = (0..23)
            .map(|i| (alloc::format!("p{i:02}"), 6 + (i * 7) % 20))
            .collect();
        let refs: Vec<(&str, usize)> = counts.iter().map(|(s, n)| (s.as_str(), *n)).collect();
        let cohort = cohort_with(&refs);
        let fa = kfold_split(&cohort, 5, 3).unwrap();
        assert_eq!(fa.assignment.len(), cohort.patient_count());
        for pid in cohort.patients.keys() {
            assert!(fa.fold_of(pid).unwrap() < 5);
        }
    }

    #[test]
    fn kfold_deterministic_and_seed_sensitive() {
        let counts: Vec<(String, usize)> = (0..30).map(|i| (alloc::format!("p{i:02}"), 6)).collect();
        let refs: Vec<(&str, usize)> = counts.iter().map(|(s, n)| (s.as_str(), *n)).collect();
        let cohort = cohort_with(&refs);
        let a = kfold_split(&cohort, 5, 42).unwrap();
        let b = kfold_split(&cohort, 5, 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn kfold_rejects_too_few_patients() {
        let cohort = cohort_with(&[("a", 8), ("b", 8)]);
        assert!(matches!(
            kfold_split(&cohort, 5, 0),
            Err(Error::TooFewPatients { have: 2, need: 5 })
        ));
    }

    #[test]
    fn kfold_balances_record_totals() {
        // Sizes drawn like the synthetic corpus: 8..=40 records per patient.
        let mut rng = Rng::seed_from(17);
        let counts: Vec<(String, usize)> = (0..60)
            .map(|i| (alloc::format!("p{i:02}"), 8 + rng.below(33)))
            .collect();
        let refs: Vec<(&str, usize)> = counts.iter().map(|(s, n)| (s.as_str(), *n)).collect();
        let cohort = cohort_with(&refs);
        let fa = kfold_split(&cohort, 5, 11).unwrap();
        let total = cohort.record_count() as f64;
        let mean = total / 5.0;
        for f in 0..5 {
            let size: usize = fa
                .patients_in(f)
                .iter()
                .map(|p| cohort.patients[*p].records.len())
                .sum();
            assert!(
                (size as f64 - mean).abs() <= 0.2 * mean,
                "fold {f} size {size} vs mean {mean}"
            );
        }
    }
}
