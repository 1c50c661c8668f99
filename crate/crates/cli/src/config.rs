//! Flat key=value configuration with dotted namespaces.
//!
//! A config file is a list of `key = value` lines (`#` starts a comment).
//! Command-line `--set key=value` overrides are applied after the file, and
//! `--seed` overrides every seed at once. Every run echoes its fully
//! resolved configuration to `resolved.config` in the output directory so
//! outputs are self-describing.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context, Result};

use medseq_core::records::FilterConfig;
use medseq_core::sequencer::{HistoryPolicy, QueryPolicy};
use medseq_core::synth::SynthConfig;
use medseq_core::train::ExperimentConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub exp: ExperimentConfig,
    pub synth: SynthConfig,
    pub filter: FilterConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            exp: ExperimentConfig::default(),
            synth: SynthConfig::default(),
            filter: FilterConfig::default(),
        }
    }
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => bail!("{key}: expected a boolean, got \"{v}\""),
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse().with_context(|| format!("{key}: expected a number, got \"{v}\""))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse().with_context(|| format!("{key}: expected an integer, got \"{v}\""))
}

fn parse_query_policy(key: &str, v: &str) -> Result<QueryPolicy> {
    match v {
        "all_eligible" => Ok(QueryPolicy::AllEligible),
        "last" => Ok(QueryPolicy::LastAsQuery),
        _ => bail!("{key}: expected all_eligible|last, got \"{v}\""),
    }
}

fn parse_history_policy(key: &str, v: &str) -> Result<HistoryPolicy> {
    match v {
        "sampled" => Ok(HistoryPolicy::SampledUniform),
        "most_recent" => Ok(HistoryPolicy::MostRecent),
        _ => bail!("{key}: expected sampled|most_recent, got \"{v}\""),
    }
}

fn query_policy_str(p: QueryPolicy) -> &'static str {
    match p {
        QueryPolicy::AllEligible => "all_eligible",
        QueryPolicy::LastAsQuery => "last",
    }
}

fn history_policy_str(p: HistoryPolicy) -> &'static str {
    match p {
        HistoryPolicy::SampledUniform => "sampled",
        HistoryPolicy::MostRecent => "most_recent",
    }
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => {
                let s: u64 = v.parse().with_context(|| format!("seed: bad value \"{v}\""))?;
                self.set_seed(s);
            }
            "folds" => self.exp.folds = parse_usize(key, v)?,
            "filter.sample_rate_hz" => self.filter.sample_rate_hz = parse_f64(key, v)?,
            "filter.cutoff_hz" => self.filter.cutoff_hz = parse_f64(key, v)?,
            "sequence.k" => self.exp.sequence.k = parse_usize(key, v)?,
            "sequence.window_secs" => {
                self.exp.sequence.window_secs =
                    v.parse().with_context(|| format!("{key}: bad value \"{v}\""))?
            }
            "sequence.train_query" => self.exp.sequence.train_query = parse_query_policy(key, v)?,
            "sequence.train_history" => {
                self.exp.sequence.train_history = parse_history_policy(key, v)?
            }
            "sequence.eval_query" => self.exp.sequence.eval_query = parse_query_policy(key, v)?,
            "sequence.eval_history" => {
                self.exp.sequence.eval_history = parse_history_policy(key, v)?
            }
            "tokenizer.d" => {
                self.exp.tokenizer.d = parse_usize(key, v)?;
                self.exp.encoder.d = self.exp.tokenizer.d;
            }
            "tokenizer.segment_tapping" => self.exp.tokenizer.seg_len[0] = parse_usize(key, v)?,
            "tokenizer.segment_walking" => self.exp.tokenizer.seg_len[1] = parse_usize(key, v)?,
            "tokenizer.segment_memory" => self.exp.tokenizer.seg_len[2] = parse_usize(key, v)?,
            "encodings.positional" => self.exp.encodings.positional = parse_bool(key, v)?,
            "encodings.time" => self.exp.encodings.time = parse_bool(key, v)?,
            "encodings.modality" => self.exp.encodings.modality = parse_bool(key, v)?,
            "encodings.status" => self.exp.encodings.status = parse_bool(key, v)?,
            "encoder.layers" => self.exp.encoder.layers = parse_usize(key, v)?,
            "encoder.heads" => self.exp.encoder.heads = parse_usize(key, v)?,
            "encoder.ff_dim" => self.exp.encoder.ff_dim = parse_usize(key, v)?,
            "encoder.merge_group" => self.exp.encoder.merge_group = parse_usize(key, v)?,
            "encoder.shuffle" => self.exp.encoder.shuffle = parse_bool(key, v)?,
            "encoder.ln_eps" => self.exp.encoder.ln_eps = parse_f64(key, v)?,
            "train.epochs" => self.exp.train.epochs = parse_usize(key, v)?,
            "train.batch_size" => self.exp.train.batch_size = parse_usize(key, v)?,
            "train.learning_rate" => self.exp.train.optimizer.learning_rate = parse_f64(key, v)?,
            "train.weight_decay" => self.exp.train.optimizer.weight_decay = parse_f64(key, v)?,
            "train.beta1" => self.exp.train.optimizer.beta1 = parse_f64(key, v)?,
            "train.beta2" => self.exp.train.optimizer.beta2 = parse_f64(key, v)?,
            "train.epsilon" => self.exp.train.optimizer.epsilon = parse_f64(key, v)?,
            "train.sequence_modeling" => self.exp.train.sequence_modeling = parse_bool(key, v)?,
            "train.resample_history" => {
                self.exp.train.resample_history_each_epoch = parse_bool(key, v)?
            }
            "synth.patients" => self.synth.patients = parse_usize(key, v)?,
            "synth.records_min" => self.synth.records_min = parse_usize(key, v)?,
            "synth.records_max" => self.synth.records_max = parse_usize(key, v)?,
            "synth.mix_tapping" => self.synth.modality_mix[0] = parse_f64(key, v)?,
            "synth.mix_walking" => self.synth.modality_mix[1] = parse_f64(key, v)?,
            "synth.mix_memory" => self.synth.modality_mix[2] = parse_f64(key, v)?,
            "synth.status_another" => self.synth.status_mix[0] = parse_f64(key, v)?,
            "synth.status_before" => self.synth.status_mix[1] = parse_f64(key, v)?,
            "synth.status_after" => self.synth.status_mix[2] = parse_f64(key, v)?,
            "synth.mult_another" => self.synth.status_multiplier[0] = parse_f64(key, v)?,
            "synth.mult_before" => self.synth.status_multiplier[1] = parse_f64(key, v)?,
            "synth.mult_after" => self.synth.status_multiplier[2] = parse_f64(key, v)?,
            "synth.amp_min" => self.synth.amp_min = parse_f64(key, v)?,
            "synth.amp_max" => self.synth.amp_max = parse_f64(key, v)?,
            "synth.tremor_freq_min" => self.synth.tremor_freq_min = parse_f64(key, v)?,
            "synth.tremor_freq_max" => self.synth.tremor_freq_max = parse_f64(key, v)?,
            "synth.gait_freq_min" => self.synth.gait_freq_min = parse_f64(key, v)?,
            "synth.gait_freq_max" => self.synth.gait_freq_max = parse_f64(key, v)?,
            "synth.noise_sigma" => self.synth.noise_sigma = parse_f64(key, v)?,
            "synth.sample_rate_hz" => self.synth.sample_rate_hz = parse_f64(key, v)?,
            "synth.flat_hours" => self.synth.flat_hours = parse_bool(key, v)?,
            "synth.hour_peak_weight" => self.synth.hour_profile.peak_weight = parse_f64(key, v)?,
            "synth.hour_sigma" => self.synth.hour_profile.sigma_hours = parse_f64(key, v)?,
            _ => bail!("unknown configuration key \"{key}\""),
        }
        Ok(())
    }

    /// One seed drives the experiment and the generator.
    pub fn set_seed(&mut self, seed: u64) {
        self.exp.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.exp
            .validate()
            .map_err(|e| anyhow::anyhow!("config: {e}"))?;
        self.synth
            .validate()
            .map_err(|e| anyhow::anyhow!("config: {e}"))?;
        if self.filter.sample_rate_hz <= 2.0 * self.filter.cutoff_hz {
            bail!("config: filter cutoff must be below half the sample rate");
        }
        Ok(())
    }

    /// The fully resolved key=value listing, echoed next to every output.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.exp.train.seed.to_string());
        kv("folds", self.exp.folds.to_string());
        kv("filter.sample_rate_hz", self.filter.sample_rate_hz.to_string());
        kv("filter.cutoff_hz", self.filter.cutoff_hz.to_string());
        kv("sequence.k", self.exp.sequence.k.to_string());
        kv("sequence.window_secs", self.exp.sequence.window_secs.to_string());
        kv("sequence.train_query", query_policy_str(self.exp.sequence.train_query).into());
        kv("sequence.train_history", history_policy_str(self.exp.sequence.train_history).into());
        kv("sequence.eval_query", query_policy_str(self.exp.sequence.eval_query).into());
        kv("sequence.eval_history", history_policy_str(self.exp.sequence.eval_history).into());
        kv("tokenizer.d", self.exp.tokenizer.d.to_string());
        kv("tokenizer.segment_tapping", self.exp.tokenizer.seg_len[0].to_string());
        kv("tokenizer.segment_walking", self.exp.tokenizer.seg_len[1].to_string());
        kv("tokenizer.segment_memory", self.exp.tokenizer.seg_len[2].to_string());
        kv("encodings.positional", self.exp.encodings.positional.to_string());
        kv("encodings.time", self.exp.encodings.time.to_string());
        kv("encodings.modality", self.exp.encodings.modality.to_string());
        kv("encodings.status", self.exp.encodings.status.to_string());
        kv("encoder.layers", self.exp.encoder.layers.to_string());
        kv("encoder.heads", self.exp.encoder.heads.to_string());
        kv("encoder.ff_dim", self.exp.encoder.ff_dim.to_string());
        kv("encoder.merge_group", self.exp.encoder.merge_group.to_string());
        kv("encoder.shuffle", self.exp.encoder.shuffle.to_string());
        kv("encoder.ln_eps", self.exp.encoder.ln_eps.to_string());
        kv("train.epochs", self.exp.train.epochs.to_string());
        kv("train.batch_size", self.exp.train.batch_size.to_string());
        kv("train.learning_rate", self.exp.train.optimizer.learning_rate.to_string());
        kv("train.weight_decay", self.exp.train.optimizer.weight_decay.to_string());
        kv("train.beta1", self.exp.train.optimizer.beta1.to_string());
        kv("train.beta2", self.exp.train.optimizer.beta2.to_string());
        kv("train.epsilon", self.exp.train.optimizer.epsilon.to_string());
        kv("train.sequence_modeling", self.exp.train.sequence_modeling.to_string());
        kv("train.resample_history", self.exp.train.resample_history_each_epoch.to_string());
        kv("synth.patients", self.synth.patients.to_string());
        kv("synth.records_min", self.synth.records_min.to_string());
        kv("synth.records_max", self.synth.records_max.to_string());
        kv("synth.mix_tapping", self.synth.modality_mix[0].to_string());
        kv("synth.mix_walking", self.synth.modality_mix[1].to_string());
        kv("synth.mix_memory", self.synth.modality_mix[2].to_string());
        kv("synth.status_another", self.synth.status_mix[0].to_string());
        kv("synth.status_before", self.synth.status_mix[1].to_string());
        kv("synth.status_after", self.synth.status_mix[2].to_string());
        kv("synth.mult_another", self.synth.status_multiplier[0].to_string());
        kv("synth.mult_before", self.synth.status_multiplier[1].to_string());
        kv("synth.mult_after", self.synth.status_multiplier[2].to_string());
        kv("synth.amp_min", self.synth.amp_min.to_string());
        kv("synth.amp_max", self.synth.amp_max.to_string());
        kv("synth.tremor_freq_min", self.synth.tremor_freq_min.to_string());
        kv("synth.tremor_freq_max", self.synth.tremor_freq_max.to_string());
        kv("synth.gait_freq_min", self.synth.gait_freq_min.to_string());
        kv("synth.gait_freq_max", self.synth.gait_freq_max.to_string());
        kv("synth.noise_sigma", self.synth.noise_sigma.to_string());
        kv("synth.sample_rate_hz", self.synth.sample_rate_hz.to_string());
        kv("synth.flat_hours", self.synth.flat_hours.to_string());
        kv("synth.hour_peak_weight", self.synth.hour_profile.peak_weight.to_string());
        kv("synth.hour_sigma", self.synth.hour_profile.sigma_hours.to_string());
        s
    }
}

/// Load the configuration: defaults, then the file, then `--set` overrides,
/// then the `--seed` shortcut. Everything is validated before any work
/// starts.
pub fn load(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = path {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                bail!("{}:{}: expected key = value", path.display(), i + 1);
            };
            cfg.apply(key.trim(), value)
                .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        }
    }
    for item in overrides {
        let Some((key, value)) = item.split_once('=') else {
            bail!("--set {item}: expected KEY=VALUE");
        };
        cfg.apply(key.trim(), value)?;
    }
    if let Some(seed) = seed {
        cfg.set_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}
