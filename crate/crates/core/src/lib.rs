//! Core pipeline for personalized medication-status prediction from
//! multimodal smartphone time-series.
//!
//! Everything in here is pure computation over `f64` buffers with explicit
//! seeded randomness, so the crate is `no_std`-compatible (alloc required).
//! File formats, configuration files and the command-line driver live in the
//! companion `medseq-cli` crate.
//!
//! Pipeline stages, in data-flow order:
//!
//! 1. [`records`] — raw test records, participant filtering, per-record
//!    signal preprocessing (high-pass filter, fixed-length padding).
//! 2. [`sequencer`] — temporal synchronization into multimodal observations,
//!    patient-level sequence sampling (K history + 1 query), patient-grouped
//!    k-fold splitting.
//! 3. [`tokenizer`] — segment chunking, linear projection to d-dimensional
//!    tokens, additive attribute encodings (position / hour / modality /
//!    status).
//! 4. [`encoder`] — the shuffle-and-merge multi-scale Transformer encoder
//!    with hand-written forward and reverse-mode passes.
//! 5. [`loss`], [`optim`], [`metrics`], [`train`] — weighted cross-entropy,
//!    AdamW, evaluation metrics, the training loop, k-fold runner and the
//!    ablation harness.
//! 6. [`synth`] — a seeded synthetic corpus generator with a known
//!    status-dependent, patient-conditional generating process.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod encoder;
pub mod error;
pub mod loss;
mod math;
pub mod mat;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod records;
pub mod rng;
pub mod sequencer;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use mat::Mat;
pub use rng::Rng;

/// Sample builders shared by this crate's integration tests; not part of the
/// public contract.
#[doc(hidden)]
pub mod test_fixtures {
    use crate::mat::Mat;
    use crate::records::{MedicationStatus, Modality, TestRecord};
    use crate::rng::Rng;
    use crate::sequencer::{SequenceSample, SynchronizedObservation};
    use alloc::string::String;
    use alloc::sync::Arc;
    use alloc::vec::Vec;

    /// One synthetic-ish observation with the given modalities, sinusoid
    /// content scaled by `amp`.
    pub fn observation(
        pid: &str,
        modalities: &[Modality],
        ts: i64,
        status: MedicationStatus,
        amp: f64,
        seed: u64,
    ) -> SynchronizedObservation {
        let mut rng = Rng::seed_from(seed);
        let members: Vec<Arc<TestRecord>> = modalities
            .iter()
            .map(|&m| {
                let l = m.max_len();
                let phase = rng.uniform(0.0, 6.28);
                let series = Mat::from_fn(l, 3, |r, c| {
                    amp * libm::sin(0.05 * r as f64 + phase + c as f64)
                        + 0.05 * rng.uniform(-1.0, 1.0)
                });
                Arc::new(TestRecord {
                    patient_id: String::from(pid),
                    modality: m,
                    timestamp: ts,
                    status,
                    is_pd: true,
                    series,
                    sample_times: (0..l).map(|i| i as f64 * 0.01).collect(),
                })
            })
            .collect();
        SynchronizedObservation {
            patient_id: String::from(pid),
            status,
            observation_time: ts as f64,
            members,
        }
    }

    /// A K=2 sample mixing all three modalities across records: 20 tokens at
    /// segment lengths (256, 256, 8).
    pub fn mixed_sample(seed: u64) -> SequenceSample {
        use MedicationStatus::*;
        use Modality::*;
        let h0 = observation("p", &[Tapping, Memory], 36_000, BeforeMedication, 1.4, seed);
        let h1 = observation("p", &[Walking], 120_000, AnotherTime, 0.9, seed + 1);
        let query = observation("p", &[Tapping, Memory], 210_000, AfterMedication, 0.6, seed + 2);
        SequenceSample {
            patient_id: String::from("p"),
            history: alloc::vec![h0, h1],
            query,
            label: AfterMedication,
        }
    }
}
