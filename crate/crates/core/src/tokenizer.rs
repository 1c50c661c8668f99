//! Chunk each observation's per-modality series into segments, project to
//! d-dimensional tokens, and add the four learnable attribute encodings.

use alloc::{format, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{self, Mat};
use crate::records::{Modality, MODALITY_COUNT, STATUS_COUNT};
use crate::sequencer::SequenceSample;

pub const HOURS: usize = 24;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerConfig {
    /// Embedding dimension shared with the encoder.
    pub d: usize,
    /// Segment length per modality, indexed by `Modality::index()`. Must
    /// divide the modality's fixed series length.
    pub seg_len: [usize; MODALITY_COUNT],
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            d: 64,
            seg_len: [32, 32, 8],
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::InvalidArgument("embedding dim must be >= 1".into()));
        }
        for m in Modality::ALL {
            let s = self.seg_len[m.index()];
            if s == 0 || m.max_len() % s != 0 {
                return Err(Error::InvalidArgument(format!(
                    "segment length {s} must divide series length {} for {}",
                    m.max_len(),
                    m.as_str()
                )));
            }
        }
        Ok(())
    }

    /// Number of segments (first-order tokens) per record of modality `m`.
    pub fn segments(&self, m: Modality) -> usize {
        m.max_len() / self.seg_len[m.index()]
    }

    pub fn max_segments(&self) -> usize {
        Modality::ALL
            .iter()
            .map(|&m| self.segments(m))
            .max()
            .unwrap()
    }

    /// Flattened segment width for modality `m`.
    pub fn segment_width(&self, m: Modality) -> usize {
        self.seg_len[m.index()] * m.channel_count()
    }
}

/// Which attribute encodings are added to tokens (the ablation axis).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingFlags {
    pub positional: bool,
    pub time: bool,
    pub modality: bool,
    pub status: bool,
}

impl Default for EncodingFlags {
    fn default() -> Self {
        EncodingFlags {
            positional: true,
            time: true,
            modality: true,
            status: true,
        }
    }
}

impl EncodingFlags {
    pub fn none() -> Self {
        EncodingFlags {
            positional: false,
            time: false,
            modality: false,
            status: false,
        }
    }
}

/// The four learnable additive encoding tables.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodingTables {
    /// `max_segments × d`, indexed by segment position; shared across modalities.
    pub positional: Mat,
    /// `24 × d`, indexed by the UTC hour the test is conducted.
    pub time: Mat,
    /// `3 × d`, indexed by modality.
    pub modality: Mat,
    /// `3 × d`, indexed by medication status; history records only.
    pub status: Mat,
}

impl EncodingTables {
    pub fn zeros(cfg: &TokenizerConfig) -> Self {
        EncodingTables {
            positional: Mat::zeros(cfg.max_segments(), cfg.d),
            time: Mat::zeros(HOURS, cfg.d),
            modality: Mat::zeros(MODALITY_COUNT, cfg.d),
            status: Mat::zeros(STATUS_COUNT, cfg.d),
        }
    }
}

/// Per-modality linear projection from flattened segments to tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectionParams {
    /// `(seg_len · channels) × d`.
    pub weight: Mat,
    /// Length `d`.
    pub bias: Vec<f64>,
}

/// Split an `L × C` series into `P = L/S` segments of `S` consecutive
/// samples, each flattened with channels varying fastest within a sample.
pub fn chunk(series: &Mat, seg_len: usize) -> Result<Mat> {
    let l = series.rows();
    let c = series.cols();
    if seg_len == 0 || l % seg_len != 0 {
        return Err(Error::InvalidArgument(format!(
            "segment length {seg_len} does not divide series length {l}"
        )));
    }
    let p = l / seg_len;
    let width = seg_len * c;
    let mut out = Mat::zeros(p, width);
    for seg in 0..p {
        let row = out.row_mut(seg);
        for s in 0..seg_len {
            let src = series.row(seg * seg_len + s);
            row[s * c..(s + 1) * c].copy_from_slice(src);
        }
    }
    Ok(out)
}

/// Affine map `tokens = segments · W + b`.
pub fn project(segments: &Mat, params: &ProjectionParams) -> Result<Mat> {
    if segments.cols() != params.weight.rows() {
        return Err(Error::ShapeMismatch(format!(
            "segments width {} does not match projection input {}",
            segments.cols(),
            params.weight.rows()
        )));
    }
    let mut out = segments.matmul(&params.weight);
    for r in 0..out.rows() {
        mat::add_slice(out.row_mut(r), &params.bias);
    }
    Ok(out)
}

/// Add positional, time, modality and (for history records) status encodings
/// in place. Pure addition, no scaling.
pub fn encode_attributes(
    tokens: &mut Mat,
    positions: &[usize],
    hour: usize,
    modality_idx: usize,
    status_idx: Option<usize>,
    tables: &EncodingTables,
    flags: EncodingFlags,
) -> Result<()> {
    if positions.len() != tokens.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} positions for {} tokens",
            positions.len(),
            tokens.rows()
        )));
    }
    if hour >= HOURS {
        return Err(Error::IndexOutOfRange(format!("hour {hour}")));
    }
    if modality_idx >= MODALITY_COUNT {
        return Err(Error::IndexOutOfRange(format!("modality {modality_idx}")));
    }
    if let Some(s) = status_idx {
        if s >= STATUS_COUNT {
            return Err(Error::IndexOutOfRange(format!("status {s}")));
        }
    }
    for (r, &pos) in positions.iter().enumerate() {
        if pos >= tables.positional.rows() {
            return Err(Error::IndexOutOfRange(format!("segment position {pos}")));
        }
        let row = tokens.row_mut(r);
        if flags.positional {
            mat::add_slice(row, tables.positional.row(pos));
        }
        if flags.time {
            mat::add_slice(row, tables.time.row(hour));
        }
        if flags.modality {
            mat::add_slice(row, tables.modality.row(modality_idx));
        }
        if flags.status {
            if let Some(s) = status_idx {
                mat::add_slice(row, tables.status.row(s));
            }
        }
    }
    Ok(())
}

/// UTC hour (0–23) of an epoch-seconds timestamp.
pub fn hour_of(timestamp: i64) -> usize {
    (timestamp.rem_euclid(86_400) / 3_600) as usize
}

/// Where a source's record sits in the sequence sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordRef {
    History(usize),
    Query,
}

impl RecordRef {
    pub fn is_query(self) -> bool {
        matches!(self, RecordRef::Query)
    }
}

/// Tokens of one (record, modality) source, with everything the backward
/// pass and the attention trace need to know about them.
#[derive(Clone, Debug)]
pub struct SourceTokens {
    pub record: RecordRef,
    pub modality: Modality,
    /// `P × d` encoded tokens.
    pub tokens: Mat,
    /// `P × (S·C)` flattened segments, kept for the projection backward pass.
    pub segments: Mat,
    pub hour: usize,
    pub status_idx: Option<usize>,
}

/// A tokenized sequence sample.
#[derive(Clone, Debug)]
pub struct TokenBatch {
    pub sources: Vec<SourceTokens>,
    pub d: usize,
}

impl TokenBatch {
    pub fn total_first_order(&self) -> usize {
        self.sources.iter().map(|s| s.tokens.rows()).sum()
    }
}

/// Tokenize every present (record, modality) source of a sequence sample.
/// History records come first in chronological order, then the query; a
/// missing modality contributes no tokens. The status encoding is added only
/// to history sources.
pub fn tokenize_sample(
    sample: &SequenceSample,
    projections: &[ProjectionParams; MODALITY_COUNT],
    tables: &EncodingTables,
    cfg: &TokenizerConfig,
    flags: EncodingFlags,
) -> Result<TokenBatch> {
    let mut sources = Vec::new();
    let observations = sample
        .history
        .iter()
        .enumerate()
        .map(|(i, o)| (RecordRef::History(i), o))
        .chain(core::iter::once((RecordRef::Query, &sample.query)));

    for (record_ref, obs) in observations {
        for m in Modality::ALL {
            let Some(rec) = obs.member(m) else {
                continue;
            };
            let segments = chunk(&rec.series, cfg.seg_len[m.index()])?;
            let mut tokens = project(&segments, &projections[m.index()])?;
            let positions: Vec<usize> = (0..tokens.rows()).collect();
            let status_idx = match record_ref {
                RecordRef::History(_) => Some(obs.status.index()),
                RecordRef::Query => None,
            };
            encode_attributes(
                &mut tokens,
                &positions,
                hour_of(rec.timestamp),
                m.index(),
                status_idx,
                tables,
                flags,
            )?;
            sources.push(SourceTokens {
                record: record_ref,
                modality: m,
                tokens,
                segments,
                hour: hour_of(rec.timestamp),
                status_idx,
            });
        }
    }
    Ok(TokenBatch {
        sources,
        d: cfg.d,
    })
}
