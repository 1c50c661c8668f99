//! Subcommand implementations. Every command reads inputs from files, writes
//! outputs into `--out`, and echoes the fully resolved configuration so runs
//! are reproducible from (config file, seed) alone.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::Serialize;

use medseq_core::encoder::ShufflePlan;
use medseq_core::metrics::Metrics;
use medseq_core::model::ModelParams;
use medseq_core::records::Cohort;
use medseq_core::rng::derive_seed;
use medseq_core::sequencer::{
    build_sequences, kfold_split, observations_by_patient, synchronize, FoldAssignment,
    HistoryPolicy, ObservationSet, QueryPolicy,
};
use medseq_core::synth::generate;
use medseq_core::tokenizer::tokenize_sample;
use medseq_core::train::{
    self, eval_samples_for, evaluate, fold_seed, run_ablations, ExperimentConfig, GroupBy,
    SamplePrediction, TrainOutcome,
};
use medseq_core::Rng;

use crate::config::RunConfig;
use crate::outdir::{atomic_write, ensure_dir, format_float, write_csv, write_json, write_jsonl};
use crate::store::{build_store, load_store, parse_corpus, synth_to_parsed, write_store};

pub fn echo_config(out: &Path, cfg: &RunConfig) -> Result<()> {
    atomic_write(&out.join("resolved.config"), cfg.render().as_bytes())
}

fn observations_of(cohort: &Cohort, window_secs: i64) -> ObservationSet {
    let records: Vec<_> = cohort.all_records().cloned().collect();
    observations_by_patient(synchronize(&records, window_secs))
}

fn load_folds(path: &Path) -> Result<FoldAssignment> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading fold manifest {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing fold manifest {}", path.display()))
}

fn load_params(path: &Path) -> Result<ModelParams> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading params {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing params {}", path.display()))
}

/// `synth`: generate the corpus and its ground-truth manifest.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    echo_config(out, cfg)?;
    let output = generate(&cfg.synth)?;
    let parsed = synth_to_parsed(&output);
    let mut buf = Vec::new();
    for p in &parsed {
        buf.extend_from_slice(crate::jsonl::record_to_line(&p.record, p.age, p.sex).as_bytes());
        buf.push(b'\n');
    }
    atomic_write(&out.join("corpus.jsonl"), &buf)?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        config: &'a medseq_core::synth::SynthConfig,
        records: usize,
        tremor_freq_hz: f64,
        latents: &'a BTreeMap<String, medseq_core::synth::PatientLatents>,
    }
    write_json(
        &out.join("manifest.json"),
        &Manifest {
            config: &output.config,
            records: output.records.len(),
            tremor_freq_hz: output.tremor_freq_hz,
            latents: &output.latents,
        },
    )?;
    println!(
        "synth: {} patients, {} records -> {}",
        output.latents.len(),
        output.records.len(),
        out.join("corpus.jsonl").display()
    );
    Ok(())
}

/// `ingest`: parse, filter, preprocess; write the validated store and a
/// dataset summary.
pub fn cmd_ingest(cfg: &RunConfig, input: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    echo_config(out, cfg)?;
    let file = std::fs::File::open(input)
        .with_context(|| format!("opening input {}", input.display()))?;
    let parsed = parse_corpus(std::io::BufReader::new(file))?;
    let (cohort, summary) = build_store(parsed, &cfg.filter)?;
    write_store(&out.join("store.jsonl"), &cohort)?;
    write_json(&out.join("summary.json"), &summary)?;
    print!("{}", summary.render_table());
    Ok(())
}

/// `split`: emit the patient-grouped fold manifest.
pub fn cmd_split(cfg: &RunConfig, store: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    echo_config(out, cfg)?;
    let cohort = load_store(store)?;
    let assignment = kfold_split(&cohort, cfg.exp.folds, cfg.exp.train.seed)?;
    write_json(&out.join("folds.json"), &assignment)?;
    println!(
        "split: {} patients into {} folds -> {}",
        assignment.assignment.len(),
        assignment.folds,
        out.join("folds.json").display()
    );
    Ok(())
}

fn train_observation_set(
    cohort: &Cohort,
    cfg: &RunConfig,
    folds: Option<(&FoldAssignment, usize)>,
) -> Result<(ObservationSet, ExperimentConfig)> {
    let observations = observations_of(cohort, cfg.exp.sequence.window_secs);
    match folds {
        None => Ok((observations, cfg.exp.clone())),
        Some((assignment, fold)) => {
            if fold >= assignment.folds {
                bail!("fold {fold} out of range (manifest has {})", assignment.folds);
            }
            let mut train_obs = ObservationSet::new();
            for (pid, obs) in observations {
                match assignment.fold_of(&pid) {
                    Some(f) if f != fold => {
                        train_obs.insert(pid, obs);
                    }
                    _ => {}
                }
            }
            let mut exp = cfg.exp.clone();
            exp.train.seed = fold_seed(cfg.exp.train.seed, fold);
            Ok((train_obs, exp))
        }
    }
}

/// `train`: fit on the store (minus the held-out fold when given) and write
/// the parameters and per-epoch history.
pub fn cmd_train(
    cfg: &RunConfig,
    store: &Path,
    folds: Option<&Path>,
    fold: Option<usize>,
    out: &Path,
) -> Result<()> {
    ensure_dir(out)?;
    echo_config(out, cfg)?;
    let cohort = load_store(store)?;
    let manifest = folds.map(load_folds).transpose()?;
    let pair = match (&manifest, fold) {
        (Some(m), Some(f)) => Some((m, f)),
        (None, None) => None,
        (Some(_), None) => bail!("--folds requires --fold"),
        (None, Some(_)) => bail!("--fold requires --folds"),
    };
    let (train_obs, exp) = train_observation_set(&cohort, cfg, pair)?;
    if train_obs.is_empty() {
        bail!("no training patients selected");
    }
    let TrainOutcome { params, history } = train::train_on_observations(&train_obs, &exp)?;
    write_json(&out.join("params.json"), &params)?;
    write_jsonl(&out.join("history.jsonl"), &history)?;
    let last = history.last().expect("at least one epoch");
    println!(
        "train: {} epochs, final loss {:.4}, train accuracy {:.3} -> {}",
        history.len(),
        last.loss,
        last.accuracy,
        out.join("params.json").display()
    );
    Ok(())
}

fn prediction_rows(predictions: &[SamplePrediction]) -> Vec<Vec<String>> {
    predictions
        .iter()
        .map(|p| {
            vec![
                p.patient_id.clone(),
                format_float(p.observation_time),
                p.hour.to_string(),
                p.label.as_str().to_string(),
                p.predicted.as_str().to_string(),
                format!("{:.9}", p.probs[0]),
                format!("{:.9}", p.probs[1]),
                format!("{:.9}", p.probs[2]),
                p.age.map(|a| a.to_string()).unwrap_or_default(),
                p.same_label_history.to_string(),
            ]
        })
        .collect()
}

pub const PREDICTIONS_HEADER: [&str; 10] = [
    "patient_id",
    "observation_time",
    "hour",
    "label",
    "predicted",
    "p_another",
    "p_before",
    "p_after",
    "age",
    "same_label_history",
];

/// `eval`: score the store (or one held-out fold) with trained parameters.
pub fn cmd_eval(
    cfg: &RunConfig,
    store: &Path,
    params_path: &Path,
    folds: Option<&Path>,
    fold: Option<usize>,
    group_by: Option<GroupBy>,
    out: &Path,
) -> Result<()> {
    ensure_dir(out)?;
    echo_config(out, cfg)?;
    let cohort = load_store(store)?;
    let params = load_params(params_path)?;
    let observations = observations_of(&cohort, cfg.exp.sequence.window_secs);

    let manifest = folds.map(load_folds).transpose()?;
    let (eval_obs, exp) = match (&manifest, fold) {
        (Some(m), Some(f)) => {
            let mut eval_obs = ObservationSet::new();
            for (pid, obs) in observations {
                if m.fold_of(&pid) == Some(f) {
                    eval_obs.insert(pid, obs);
                }
            }
            let mut exp = cfg.exp.clone();
            exp.train.seed = fold_seed(cfg.exp.train.seed, f);
            (eval_obs, exp)
        }
        (None, None) => (observations, cfg.exp.clone()),
        _ => bail!("--folds and --fold must be given together"),
    };
    if eval_obs.is_empty() {
        bail!("no evaluation patients selected");
    }

    let samples = eval_samples_for(&eval_obs, &exp, 0x04);
    let (metrics, predictions) = evaluate(&params, &samples, &exp, group_by, Some(&cohort))?;
    write_json(&out.join("metrics.json"), &metrics)?;
    write_csv(&out.join("metrics.csv"), &METRICS_HEADER, &metrics_rows(&metrics))?;
    write_csv(
        &out.join("predictions.csv"),
        &PREDICTIONS_HEADER,
        &prediction_rows(&predictions),
    )?;
    print_metrics("eval", &metrics);
    Ok(())
}

pub const METRICS_HEADER: [&str; 8] = [
    "scope",
    "n",
    "accuracy",
    "f1_macro",
    "auc_macro",
    "auc_another",
    "auc_before",
    "auc_after",
];

fn metrics_rows(metrics: &Metrics) -> Vec<Vec<String>> {
    let row = |scope: &str, m: &Metrics| {
        let opt = |a: Option<f64>| a.map(format_float).unwrap_or_default();
        vec![
            scope.to_string(),
            m.n.to_string(),
            format_float(m.accuracy),
            format_float(m.f1_macro),
            opt(m.auc_macro),
            opt(m.per_class[0].auc),
            opt(m.per_class[1].auc),
            opt(m.per_class[2].auc),
        ]
    };
    let mut rows = vec![row("all", metrics)];
    for (g, gm) in &metrics.groups {
        rows.push(row(g, gm));
    }
    rows
}

fn print_metrics(tag: &str, m: &Metrics) {
    println!(
        "{tag}: n={} accuracy {:.3} f1 {:.3} auc {}",
        m.n,
        m.accuracy,
        m.f1_macro,
        m.auc_macro
            .map(|a| format!("{a:.3}"))
            .unwrap_or_else(|| "undefined".into())
    );
    for (g, gm) in &m.groups {
        println!(
            "  group {g}: n={} accuracy {:.3} auc {}",
            gm.n,
            gm.accuracy,
            gm.auc_macro
                .map(|a| format!("{a:.3}"))
                .unwrap_or_else(|| "undefined".into())
        );
    }
}

#[derive(Serialize)]
struct HistoryAttentionSummary {
    history_index: usize,
    status: String,
    observation_time: f64,
    values: usize,
    mean: f64,
    median: f64,
    q1: f64,
    q3: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// `explain`: attention trace and per-history-record attention aggregate for
/// one patient's latest query.
pub fn cmd_explain(
    cfg: &RunConfig,
    store: &Path,
    params_path: &Path,
    patient: &str,
    out: &Path,
) -> Result<()> {
    ensure_dir(out)?;
    echo_config(out, cfg)?;
    let cohort = load_store(store)?;
    let params = load_params(params_path)?;
    let observations = observations_of(&cohort, cfg.exp.sequence.window_secs);
    let mut single = ObservationSet::new();
    let obs = observations
        .get(patient)
        .ok_or_else(|| anyhow!("patient \"{patient}\" not in store"))?;
    single.insert(patient.to_string(), obs.clone());

    // The explained sample is the deterministic evaluation view: latest
    // observation as query, most recent K as history.
    let mut rng = Rng::seed_from(derive_seed(cfg.exp.train.seed, 0x04));
    let build = build_sequences(
        &single,
        cfg.exp.sequence.k,
        QueryPolicy::LastAsQuery,
        HistoryPolicy::MostRecent,
        &mut rng,
    );
    let sample = build
        .samples
        .first()
        .ok_or_else(|| anyhow!("patient \"{patient}\" has fewer than K+1 observations"))?;

    let flags = cfg.exp.effective_flags();
    let batch = tokenize_sample(
        sample,
        &params.projections,
        &params.tables,
        &cfg.exp.tokenizer,
        flags,
    )?;
    let plan = ShufflePlan::for_eval(
        &batch,
        &cfg.exp.encoder,
        derive_seed(cfg.exp.train.seed, 0x04),
    );
    let fwd = medseq_core::encoder::forward(&batch, &cfg.exp.encoder, &params, &plan, true)?;
    let trace = fwd.trace.expect("trace requested");

    let values = trace.history_attention_values(sample.history.len());
    let mut summary = Vec::new();
    for (i, vals) in values.iter().enumerate() {
        let mut sorted = vals.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        summary.push(HistoryAttentionSummary {
            history_index: i,
            status: sample.history[i].status.as_str().to_string(),
            observation_time: sample.history[i].observation_time,
            values: sorted.len(),
            mean: if sorted.is_empty() {
                f64::NAN
            } else {
                sorted.iter().sum::<f64>() / sorted.len() as f64
            },
            median: quantile(&sorted, 0.5),
            q1: quantile(&sorted, 0.25),
            q3: quantile(&sorted, 0.75),
        });
    }

    #[derive(Serialize)]
    struct Explain<'a> {
        patient_id: &'a str,
        query_time: f64,
        query_label: &'a str,
        logits: [f64; 3],
        probs: [f64; 3],
        history: &'a [HistoryAttentionSummary],
    }
    let probs = medseq_core::loss::softmax(&fwd.logits);
    write_json(
        &out.join("attention_summary.json"),
        &Explain {
            patient_id: patient,
            query_time: sample.query.observation_time,
            query_label: sample.label.as_str(),
            logits: fwd.logits,
            probs,
            history: &summary,
        },
    )?;
    write_json(&out.join("trace.json"), &trace)?;
    println!(
        "explain: patient {patient}, {} history records, trace -> {}",
        sample.history.len(),
        out.join("trace.json").display()
    );
    Ok(())
}

/// `ablate`: the 12-row grid on a single split, as CSV and JSON.
pub fn cmd_ablate(cfg: &RunConfig, store: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    echo_config(out, cfg)?;
    let cohort = load_store(store)?;
    let rows = run_ablations(&cohort, &cfg.exp)?;
    let header = [
        "axis",
        "variant",
        "n",
        "accuracy",
        "f1_macro",
        "auc_macro",
        "auc_another",
        "auc_before",
        "auc_after",
    ];
    let csv_rows: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            let opt = |a: Option<f64>| a.map(format_float).unwrap_or_default();
            vec![
                r.axis.clone(),
                r.variant.clone(),
                r.metrics.n.to_string(),
                format_float(r.metrics.accuracy),
                format_float(r.metrics.f1_macro),
                opt(r.metrics.auc_macro),
                opt(r.metrics.per_class[0].auc),
                opt(r.metrics.per_class[1].auc),
                opt(r.metrics.per_class[2].auc),
            ]
        })
        .collect();
    write_csv(&out.join("ablation.csv"), &header, &csv_rows)?;
    write_json(&out.join("ablation.json"), &rows)?;
    for r in &rows {
        println!(
            "ablate {}/{}: accuracy {:.3} auc {}",
            r.axis,
            r.variant,
            r.metrics.accuracy,
            r.metrics
                .auc_macro
                .map(|a| format!("{a:.3}"))
                .unwrap_or_else(|| "undefined".into())
        );
    }
    Ok(())
}

/// `report`: figure-data exports from an evaluation's predictions.
pub fn cmd_report(cfg: &RunConfig, predictions: &Path, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    echo_config(out, cfg)?;
    let rows = crate::report::read_predictions(predictions)?;
    crate::report::write_reports(&rows, out)
}

/// Convenience used by tests: run the full k-fold protocol over a store.
pub fn run_kfold_over_store(
    cfg: &RunConfig,
    store: &Path,
) -> Result<medseq_core::train::KfoldOutcome> {
    let cohort = load_store(store)?;
    medseq_core::train::run_kfold(&cohort, &cfg.exp, None).map_err(Into::into)
}
