//! Training loop, gradient computation, evaluation, the k-fold experiment
//! runner, and the ablation harness.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};
use serde::{Deserialize, Serialize};

use crate::encoder::{self, EncoderConfig, ShufflePlan};
use crate::error::{Error, Result};
use crate::loss::{class_weights, softmax, weighted_cross_entropy_grad};
use crate::metrics::{compute_grouped_metrics, compute_metrics, Metrics, Prediction};
use crate::model::{GradientSet, ModelParams};
use crate::optim::{AdamWConfig, AdamWState};
use crate::records::{Cohort, MedicationStatus, STATUS_COUNT};
use crate::rng::{derive_seed, Rng};
use crate::sequencer::{
    build_sequences, kfold_split, observations_by_patient, strip_history, synchronize,
    FoldAssignment, HistoryPolicy, ObservationSet, QueryPolicy, SequenceSample,
};
use crate::tokenizer::{hour_of, tokenize_sample, EncodingFlags, TokenizerConfig};

// Independent stream tags for the experiment seed.
const TAG_INIT: u64 = 0x01;
const TAG_EPOCH_ORDER: u64 = 0x1000;
const TAG_EPOCH_SHUFFLE: u64 = 0x2000;
const TAG_EPOCH_RESAMPLE: u64 = 0x3000;
const TAG_EVAL: u64 = 0x04;
const TAG_FOLD: u64 = 0x5000;
const TAG_ABLATION: u64 = 0x06;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Off: the query record alone is classified — no history records and no
    /// status encodings.
    pub sequence_modeling: bool,
    /// Redraw each training sample's K history picks every epoch.
    pub resample_history_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 2,
            optimizer: AdamWConfig::default(),
            seed: 42,
            sequence_modeling: true,
            resample_history_each_epoch: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SequenceConfig {
    /// History length K.
    pub k: usize,
    pub window_secs: i64,
    pub train_query: QueryPolicy,
    pub train_history: HistoryPolicy,
    pub eval_query: QueryPolicy,
    pub eval_history: HistoryPolicy,
}

impl Default for SequenceConfig {
    fn default() -> Self {
        SequenceConfig {
            k: 4,
            window_secs: crate::sequencer::DEFAULT_MERGE_WINDOW_SECS,
            train_query: QueryPolicy::AllEligible,
            train_history: HistoryPolicy::SampledUniform,
            eval_query: QueryPolicy::AllEligible,
            eval_history: HistoryPolicy::MostRecent,
        }
    }
}

/// Everything a full experiment needs, minus file paths.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub tokenizer: TokenizerConfig,
    pub encodings: EncodingFlags,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub sequence: SequenceConfig,
    pub folds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            tokenizer: TokenizerConfig::default(),
            encodings: EncodingFlags::default(),
            encoder: EncoderConfig::default(),
            train: TrainConfig::default(),
            sequence: SequenceConfig::default(),
            folds: 5,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.tokenizer.validate()?;
        self.encoder.validate()?;
        if self.tokenizer.d != self.encoder.d {
            return Err(Error::InvalidArgument(format!(
                "tokenizer dim {} and encoder dim {} must agree",
                self.tokenizer.d, self.encoder.d
            )));
        }
        if self.train.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if !(self.train.optimizer.learning_rate > 0.0) {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.train.epochs == 0 {
            return Err(Error::InvalidArgument("epoch count must be >= 1".into()));
        }
        if self.sequence.k == 0 && self.train.sequence_modeling {
            return Err(Error::InvalidArgument(
                "history length K must be >= 1 when sequence modeling is on".into(),
            ));
        }
        if self.folds == 0 {
            return Err(Error::InvalidArgument("fold count must be >= 1".into()));
        }
        Ok(())
    }

    /// Effective encoding flags: the status table is never applied when
    /// sequence modeling is off.
    pub fn effective_flags(&self) -> EncodingFlags {
        let mut flags = self.encodings;
        if !self.train.sequence_modeling {
            flags.status = false;
        }
        flags
    }

    pub fn init_params(&self) -> ModelParams {
        let mut rng = Rng::seed_from(derive_seed(self.train.seed, TAG_INIT));
        ModelParams::init(&self.tokenizer, &self.encoder, &mut rng)
    }
}

/// How per-layer shuffle permutations are drawn for a forward pass.
pub enum ShuffleDriver<'a> {
    /// Deterministic permutations derived from a seed (evaluation, gradient
    /// checks).
    Eval(u64),
    /// Fresh permutations from the training generator.
    Train(&'a mut Rng),
}

fn plan_for(
    batch: &crate::tokenizer::TokenBatch,
    cfg: &EncoderConfig,
    driver: &mut ShuffleDriver,
    sample_index: usize,
) -> ShufflePlan {
    match driver {
        ShuffleDriver::Eval(seed) => {
            ShufflePlan::for_eval(batch, cfg, derive_seed(*seed, sample_index as u64))
        }
        ShuffleDriver::Train(rng) => ShufflePlan::for_training(batch, cfg, rng),
    }
}

/// Exact reverse-mode gradients of the mean batch loss. Shuffle permutations
/// are fixed for the call, so the result is a deterministic function of the
/// parameters. Returns (loss, gradients, per-sample logits).
pub fn compute_gradients(
    samples: &[&SequenceSample],
    params: &ModelParams,
    exp: &ExperimentConfig,
    driver: &mut ShuffleDriver,
) -> Result<(f64, GradientSet, Vec<[f64; STATUS_COUNT]>)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("gradient batch".into()));
    }
    let flags = exp.effective_flags();
    let mut logits = Vec::with_capacity(samples.len());
    let mut forwards = Vec::with_capacity(samples.len());
    let mut batches = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let batch = tokenize_sample(sample, &params.projections, &params.tables, &exp.tokenizer, flags)?;
        let plan = plan_for(&batch, &exp.encoder, driver, i);
        let fwd = encoder::forward(&batch, &exp.encoder, params, &plan, false)?;
        logits.push(fwd.logits);
        forwards.push(fwd);
        batches.push(batch);
    }

    let labels: Vec<MedicationStatus> = samples.iter().map(|s| s.label).collect();
    let weights = class_weights(&labels);
    let (loss, dlogits) = weighted_cross_entropy_grad(&logits, &labels, &weights);
    if !loss.is_finite() {
        return Err(Error::NonFinite("batch loss".into()));
    }

    let mut grads = params.zeros_like();
    for ((batch, fwd), dl) in batches.iter().zip(forwards.iter()).zip(dlogits.iter()) {
        let d_tokens = encoder::backward(&exp.encoder, params, &fwd.cache, *dl, &mut grads)?;
        encoder::token_backward(batch, &d_tokens, flags, &mut grads)?;
    }
    Ok((loss, grads, logits))
}

/// Loss of a batch under deterministic (eval-seeded) shuffling; the pure
/// scalar function the finite-difference checker probes.
pub fn batch_loss(
    samples: &[&SequenceSample],
    params: &ModelParams,
    exp: &ExperimentConfig,
    eval_seed: u64,
) -> Result<f64> {
    let flags = exp.effective_flags();
    let mut logits = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let batch = tokenize_sample(sample, &params.projections, &params.tables, &exp.tokenizer, flags)?;
        let plan = ShufflePlan::for_eval(&batch, &exp.encoder, derive_seed(eval_seed, i as u64));
        let fwd = encoder::forward(&batch, &exp.encoder, params, &plan, false)?;
        logits.push(fwd.logits);
    }
    let labels: Vec<MedicationStatus> = samples.iter().map(|s| s.label).collect();
    let weights = class_weights(&labels);
    let (loss, _) = weighted_cross_entropy_grad(&logits, &labels, &weights);
    Ok(loss)
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    /// Max relative error per parameter tensor, canonical order.
    pub per_tensor: Vec<(String, f64)>,
    pub checked: usize,
}

/// Compare analytic gradients against central finite differences for every
/// element of every parameter tensor. Relative error is
/// `|a−n| / max(|a|, |n|, 1e-6)`.
pub fn finite_difference_check(
    samples: &[&SequenceSample],
    exp: &ExperimentConfig,
    params: &ModelParams,
    eval_seed: u64,
    step: f64,
) -> Result<GradCheckReport> {
    let mut driver = ShuffleDriver::Eval(eval_seed);
    let (_, grads, _) = compute_gradients(samples, params, exp, &mut driver)?;
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, d)| (n, d.to_vec()))
        .collect();

    let mut probe = params.clone();
    let mut per_tensor = Vec::with_capacity(analytic.len());
    let mut max_rel_err = 0.0f64;
    let mut worst_tensor = String::new();
    let mut checked = 0;
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        let mut tensor_max = 0.0f64;
        for i in 0..grad.len() {
            let original = {
                let mut tensors = probe.tensors_mut();
                let v = tensors[ti].1[i];
                tensors[ti].1[i] = v + step;
                v
            };
            let plus = batch_loss(samples, &probe, exp, eval_seed)?;
            {
                let mut tensors = probe.tensors_mut();
                tensors[ti].1[i] = original - step;
            }
            let minus = batch_loss(samples, &probe, exp, eval_seed)?;
            {
                let mut tensors = probe.tensors_mut();
                tensors[ti].1[i] = original;
            }
            let numeric = (plus - minus) / (2.0 * step);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if rel > tensor_max {
                tensor_max = rel;
            }
            checked += 1;
        }
        if tensor_max > max_rel_err {
            max_rel_err = tensor_max;
            worst_tensor = name.clone();
        }
        per_tensor.push((name.clone(), tensor_max));
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_tensor,
        per_tensor,
        checked,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub f1_macro: f64,
    pub auc_macro: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: Vec<EpochRecord>,
}

/// Train on a fixed dataset (histories as given).
pub fn train(samples: &[SequenceSample], exp: &ExperimentConfig) -> Result<TrainOutcome> {
    train_with_provider(exp, |_, _| Ok(samples.to_vec()))
}

/// Train with a per-epoch sample provider (used to redraw history picks each
/// epoch). The provider receives the epoch index and a seeded generator.
pub fn train_with_provider(
    exp: &ExperimentConfig,
    mut provider: impl FnMut(usize, &mut Rng) -> Result<Vec<SequenceSample>>,
) -> Result<TrainOutcome> {
    exp.validate()?;
    let seed = exp.train.seed;
    let mut params = exp.init_params();
    let mut adam = AdamWState::new(&params);

    let mut history = Vec::with_capacity(exp.train.epochs);
    for epoch in 0..exp.train.epochs {
        let mut resample_rng = Rng::seed_from(derive_seed(seed, TAG_EPOCH_RESAMPLE + epoch as u64));
        let samples = provider(epoch, &mut resample_rng)?;
        if samples.is_empty() {
            return Err(Error::EmptyInput(format!("training samples at epoch {epoch}")));
        }
        let order = Rng::seed_from(derive_seed(seed, TAG_EPOCH_ORDER + epoch as u64))
            .permutation(samples.len());
        let mut shuffle_rng = Rng::seed_from(derive_seed(seed, TAG_EPOCH_SHUFFLE + epoch as u64));

        let mut loss_sum = 0.0;
        let mut predictions = Vec::with_capacity(samples.len());
        for (bi, chunk) in order.chunks(exp.train.batch_size).enumerate() {
            let batch: Vec<&SequenceSample> = chunk.iter().map(|&i| &samples[i]).collect();
            let mut driver = ShuffleDriver::Train(&mut shuffle_rng);
            let (loss, grads, logits) = compute_gradients(&batch, &params, exp, &mut driver)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: bi });
            }
            adam.step(&mut params, &grads, &exp.train.optimizer);
            loss_sum += loss * batch.len() as f64;
            for (s, l) in batch.iter().zip(logits.iter()) {
                predictions.push(Prediction {
                    probs: softmax(l),
                    label: s.label,
                });
            }
        }
        let m = compute_metrics(&predictions);
        history.push(EpochRecord {
            epoch,
            loss: loss_sum / samples.len() as f64,
            accuracy: m.accuracy,
            f1_macro: m.f1_macro,
            auc_macro: m.auc_macro,
        });
    }

    Ok(TrainOutcome { params, history })
}

/// Optional evaluation breakdown key.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupBy {
    /// Five-year patient age buckets (requires cohort demographics).
    AgeBucket,
    /// Number of history records sharing the query's true status.
    SameLabeledHistory,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SamplePrediction {
    pub patient_id: String,
    pub observation_time: f64,
    pub hour: usize,
    pub label: MedicationStatus,
    pub predicted: MedicationStatus,
    pub probs: [f64; STATUS_COUNT],
    pub age: Option<u32>,
    pub same_label_history: usize,
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

/// Evaluate on samples with deterministic eval-seeded shuffling.
pub fn evaluate(
    params: &ModelParams,
    samples: &[SequenceSample],
    exp: &ExperimentConfig,
    group_by: Option<GroupBy>,
    cohort: Option<&Cohort>,
) -> Result<(Metrics, Vec<SamplePrediction>)> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("evaluation samples".into()));
    }
    let flags = exp.effective_flags();
    let eval_seed = derive_seed(exp.train.seed, TAG_EVAL);
    let mut rows = Vec::with_capacity(samples.len());
    for (i, sample) in samples.iter().enumerate() {
        let batch = tokenize_sample(sample, &params.projections, &params.tables, &exp.tokenizer, flags)?;
        let plan = ShufflePlan::for_eval(&batch, &exp.encoder, derive_seed(eval_seed, i as u64));
        let fwd = encoder::forward(&batch, &exp.encoder, params, &plan, false)?;
        let probs = softmax(&fwd.logits);
        let pred = Prediction {
            probs,
            label: sample.label,
        };
        let age = cohort
            .and_then(|c| c.patients.get(&sample.patient_id))
            .and_then(|p| p.age);
        rows.push(SamplePrediction {
            patient_id: sample.patient_id.clone(),
            observation_time: sample.query.observation_time,
            hour: hour_of(sample.query.observation_time as i64),
            label: sample.label,
            predicted: MedicationStatus::from_index(pred.predicted()).unwrap(),
            probs,
            age,
            same_label_history: sample
                .history
                .iter()
                .filter(|h| h.status == sample.label)
                .count(),
        });
    }

    let metrics = match group_by {
        None => compute_metrics(
            &rows
                .iter()
                .map(|r| Prediction {
                    probs: r.probs,
                    label: r.label,
                })
                .collect::<Vec<_>>(),
        ),
        Some(g) => {
            let keyed: Vec<(String, Prediction)> = rows
                .iter()
                .map(|r| {
                    let key = match g {
                        GroupBy::AgeBucket => age_bucket(r.age),
                        GroupBy::SameLabeledHistory => format!("{}", r.same_label_history),
                    };
                    (
                        key,
                        Prediction {
                            probs: r.probs,
                            label: r.label,
                        },
                    )
                })
                .collect();
            compute_grouped_metrics(&keyed)
        }
    };
    Ok((metrics, rows))
}

/// Build evaluation samples for a set of patients under the eval policies.
pub fn eval_samples_for(
    observations: &ObservationSet,
    exp: &ExperimentConfig,
    seed_tag: u64,
) -> Vec<SequenceSample> {
    let mut rng = Rng::seed_from(derive_seed(exp.train.seed, seed_tag));
    let build = build_sequences(
        observations,
        exp.sequence.k,
        exp.sequence.eval_query,
        exp.sequence.eval_history,
        &mut rng,
    );
    if exp.train.sequence_modeling {
        build.samples
    } else {
        strip_history(&build.samples)
    }
}

#[derive(Clone, Debug)]
pub struct FoldOutcome {
    pub fold: usize,
    pub metrics: Metrics,
    pub history: Vec<EpochRecord>,
    pub params: ModelParams,
    pub predictions: Vec<SamplePrediction>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

fn mean_std(values: &[f64]) -> MeanStd {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: libm::sqrt(var),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KfoldSummary {
    pub accuracy: MeanStd,
    pub f1_macro: MeanStd,
    pub auc_macro: Option<MeanStd>,
}

#[derive(Clone, Debug)]
pub struct KfoldOutcome {
    pub assignment: FoldAssignment,
    pub folds: Vec<FoldOutcome>,
    pub summary: KfoldSummary,
}

fn split_observations(
    observations: &ObservationSet,
    assignment: &FoldAssignment,
    fold: usize,
) -> (ObservationSet, ObservationSet) {
    let mut train_set = ObservationSet::new();
    let mut eval_set = ObservationSet::new();
    for (pid, obs) in observations {
        match assignment.fold_of(pid) {
            Some(f) if f == fold => {
                eval_set.insert(pid.clone(), obs.clone());
            }
            Some(_) => {
                train_set.insert(pid.clone(), obs.clone());
            }
            None => {}
        }
    }
    (train_set, eval_set)
}

/// The per-fold seed derivation used by the k-fold runner; exposed so that
/// separate train/eval invocations agree on a fold's streams.
pub fn fold_seed(seed: u64, fold: usize) -> u64 {
    derive_seed(seed, TAG_FOLD + fold as u64)
}

/// Train on a set of per-patient observation lists under the training
/// policies: queries per the train query policy, histories re-drawn each
/// epoch when configured, histories stripped when sequence modeling is off.
pub fn train_on_observations(
    train_obs: &ObservationSet,
    exp: &ExperimentConfig,
) -> Result<TrainOutcome> {
    let seq = exp.sequence;
    let sequence_modeling = exp.train.sequence_modeling;
    let resample = exp.train.resample_history_each_epoch;
    let mut fixed: Option<Vec<SequenceSample>> = None;
    train_with_provider(exp, |_epoch, rng| {
        if !resample {
            if fixed.is_none() {
                let build =
                    build_sequences(train_obs, seq.k, seq.train_query, seq.train_history, rng);
                fixed = Some(if sequence_modeling {
                    build.samples
                } else {
                    strip_history(&build.samples)
                });
            }
            return Ok(fixed.clone().unwrap());
        }
        let build = build_sequences(train_obs, seq.k, seq.train_query, seq.train_history, rng);
        Ok(if sequence_modeling {
            build.samples
        } else {
            strip_history(&build.samples)
        })
    })
}

/// Train on every patient outside `fold` and evaluate on the held-out fold.
pub fn run_fold(
    cohort: &Cohort,
    observations: &ObservationSet,
    assignment: &FoldAssignment,
    fold: usize,
    exp: &ExperimentConfig,
    group_by: Option<GroupBy>,
) -> Result<FoldOutcome> {
    let (train_obs, eval_obs) = split_observations(observations, assignment, fold);
    {
        let train_patients: BTreeSet<&String> = train_obs.keys().collect();
        let eval_patients: BTreeSet<&String> = eval_obs.keys().collect();
        assert!(
            train_patients.is_disjoint(&eval_patients),
            "a patient may never appear in both the training and evaluation split"
        );
    }

    let mut fold_exp = exp.clone();
    fold_exp.train.seed = fold_seed(exp.train.seed, fold);
    let outcome = train_on_observations(&train_obs, &fold_exp)?;

    let eval_samples = eval_samples_for(&eval_obs, &fold_exp, TAG_EVAL);
    if eval_samples.is_empty() {
        return Err(Error::EmptyInput(format!("evaluation samples for fold {fold}")));
    }
    for s in &eval_samples {
        debug_assert_eq!(assignment.fold_of(&s.patient_id), Some(fold));
    }
    let (metrics, predictions) =
        evaluate(&outcome.params, &eval_samples, &fold_exp, group_by, Some(cohort))?;

    Ok(FoldOutcome {
        fold,
        metrics,
        history: outcome.history,
        params: outcome.params,
        predictions,
    })
}

/// The full k-fold protocol: split patients, then for each fold train on the
/// other folds' patients and evaluate on the held-out fold.
pub fn run_kfold(
    cohort: &Cohort,
    exp: &ExperimentConfig,
    group_by: Option<GroupBy>,
) -> Result<KfoldOutcome> {
    exp.validate()?;
    let assignment = kfold_split(cohort, exp.folds, exp.train.seed)?;
    let records: Vec<_> = cohort.all_records().cloned().collect();
    let observations = observations_by_patient(synchronize(&records, exp.sequence.window_secs));

    let mut folds = Vec::with_capacity(exp.folds);
    for fold in 0..exp.folds {
        folds.push(run_fold(cohort, &observations, &assignment, fold, exp, group_by)?);
    }
    let summary = summarize(&folds);
    Ok(KfoldOutcome {
        assignment,
        folds,
        summary,
    })
}

pub fn summarize(folds: &[FoldOutcome]) -> KfoldSummary {
    let acc: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy).collect();
    let f1: Vec<f64> = folds.iter().map(|f| f.metrics.f1_macro).collect();
    let auc: Vec<f64> = folds.iter().filter_map(|f| f.metrics.auc_macro).collect();
    KfoldSummary {
        accuracy: mean_std(&acc),
        f1_macro: mean_std(&f1),
        auc_macro: if auc.is_empty() {
            None
        } else {
            Some(mean_std(&auc))
        },
    }
}

/// One row of the ablation table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub variant: String,
    pub metrics: Metrics,
}

/// Resolve one (axis, variant) cell of the ablation grid into a full
/// experiment configuration.
pub fn resolve_ablation(
    base: &ExperimentConfig,
    axis: &str,
    variant: &str,
) -> Result<ExperimentConfig> {
    let mut exp = base.clone();
    match (axis, variant) {
        ("sequence_modeling", "off") => {
            exp.train.sequence_modeling = false;
            exp.encodings.status = false;
        }
        ("sequence_modeling", "on") => {}
        ("merge_group", "g1") => exp.encoder.merge_group = 1,
        ("merge_group", "g2") => exp.encoder.merge_group = 2,
        ("merge_group", "g4") => exp.encoder.merge_group = 4,
        ("encodings", "none") => exp.encodings = EncodingFlags::none(),
        ("encodings", "status") => {
            exp.encodings = EncodingFlags::none();
            exp.encodings.status = true;
        }
        ("encodings", "status+positional") => {
            exp.encodings = EncodingFlags::none();
            exp.encodings.status = true;
            exp.encodings.positional = true;
        }
        ("encodings", "status+positional+modality") => {
            exp.encodings = EncodingFlags::none();
            exp.encodings.status = true;
            exp.encodings.positional = true;
            exp.encodings.modality = true;
        }
        ("encodings", "all") => exp.encodings = EncodingFlags::default(),
        ("shuffle_merge", "off") => {
            exp.encoder.shuffle = false;
            exp.encoder.merge_group = 1;
        }
        ("shuffle_merge", "on") => {
            exp.encoder.shuffle = true;
            exp.encoder.merge_group = base.encoder.merge_group.max(2);
        }
        _ => {
            return Err(Error::InvalidArgument(format!(
                "unknown ablation cell {axis}/{variant}"
            )))
        }
    }
    Ok(exp)
}

/// The four ablation axes, twelve rows total.
pub fn ablation_grid() -> Vec<(&'static str, &'static str)> {
    vec![
        ("sequence_modeling", "off"),
        ("sequence_modeling", "on"),
        ("merge_group", "g1"),
        ("merge_group", "g2"),
        ("merge_group", "g4"),
        ("encodings", "none"),
        ("encodings", "status"),
        ("encodings", "status+positional"),
        ("encodings", "status+positional+modality"),
        ("encodings", "all"),
        ("shuffle_merge", "off"),
        ("shuffle_merge", "on"),
    ]
}

/// Run every grid cell on a single train/test split (fold 0 of the patient
/// partition) and collect one metrics row per configuration.
pub fn run_ablations(cohort: &Cohort, base: &ExperimentConfig) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let assignment = kfold_split(cohort, base.folds, base.train.seed)?;
    let records: Vec<_> = cohort.all_records().cloned().collect();
    let observations = observations_by_patient(synchronize(&records, base.sequence.window_secs));

    let mut rows = Vec::new();
    for (axis, variant) in ablation_grid() {
        let mut exp = resolve_ablation(base, axis, variant)?;
        exp.train.seed = derive_seed(base.train.seed, TAG_ABLATION);
        let outcome = run_fold(cohort, &observations, &assignment, 0, &exp, None)?;
        rows.push(AblationRow {
            axis: axis.into(),
            variant: variant.into(),
            metrics: outcome.metrics,
        });
    }
    Ok(rows)
}
