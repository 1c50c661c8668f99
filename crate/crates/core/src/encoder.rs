//! The multi-scale Transformer encoder.
//!
//! Each layer: per-source token shuffling, merging of G neighboring shuffled
//! tokens into second-order tokens, multi-head self-attention with add&norm
//! over the union of first- and second-order tokens across all sources,
//! dropping of the second-order tokens, then feed-forward with add&norm on
//! the surviving first-order tokens. After the last layer the tokens are
//! global-average pooled and mapped to the three status logits by a small
//! MLP.
//!
//! Forward passes record every intermediate needed for an exact reverse-mode
//! pass; [`backward`] mirrors [`forward`] step by step.

use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use alloc::{format, vec};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::{self, Mat};
use crate::model::{GradientSet, LayerParams, MergeParams, ModelParams};
use crate::records::Modality;
use crate::rng::{derive_seed, Rng};
use crate::tokenizer::{RecordRef, TokenBatch};

pub const CLASS_COUNT: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    /// Model dimension, shared with the tokenizer.
    pub d: usize,
    /// Feed-forward hidden dimension.
    pub ff_dim: usize,
    /// Merge group size G; 1 disables merging.
    pub merge_group: usize,
    /// Whether tokens are shuffled before merging.
    pub shuffle: bool,
    pub ln_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 6,
            heads: 8,
            d: 64,
            ff_dim: 256,
            merge_group: 2,
            shuffle: true,
            ln_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidArgument(
                "layers, heads, d and ff_dim must all be >= 1".into(),
            ));
        }
        if self.d % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "model dim {} not divisible by {} heads",
                self.d, self.heads
            )));
        }
        if self.merge_group == 0 {
            return Err(Error::InvalidArgument("merge group must be >= 1".into()));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::InvalidArgument("layer-norm epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// One permutation per (layer, source). Shuffling never crosses sources.
#[derive(Clone, Debug)]
pub struct ShufflePlan {
    pub perms: Vec<Vec<Vec<usize>>>,
}

fn identity_perms(batch: &TokenBatch, layers: usize) -> Vec<Vec<Vec<usize>>> {
    (0..layers)
        .map(|_| {
            batch
                .sources
                .iter()
                .map(|s| (0..s.tokens.rows()).collect())
                .collect()
        })
        .collect()
}

impl ShufflePlan {
    /// Identity permutations (shuffling disabled).
    pub fn identity(batch: &TokenBatch, cfg: &EncoderConfig) -> ShufflePlan {
        ShufflePlan {
            perms: identity_perms(batch, cfg.layers),
        }
    }

    /// Fresh seeded permutation per source per layer, drawn from the training
    /// generator. Falls back to identity when shuffling is disabled.
    pub fn for_training(batch: &TokenBatch, cfg: &EncoderConfig, rng: &mut Rng) -> ShufflePlan {
        if !cfg.shuffle {
            return ShufflePlan::identity(batch, cfg);
        }
        let perms = (0..cfg.layers)
            .map(|_| {
                batch
                    .sources
                    .iter()
                    .map(|s| rng.permutation(s.tokens.rows()))
                    .collect()
            })
            .collect();
        ShufflePlan { perms }
    }

    /// Deterministic permutations derived from an evaluation seed: a pure
    /// function of (seed, layer, source index, token count).
    pub fn for_eval(batch: &TokenBatch, cfg: &EncoderConfig, seed: u64) -> ShufflePlan {
        if !cfg.shuffle {
            return ShufflePlan::identity(batch, cfg);
        }
        let perms = (0..cfg.layers)
            .map(|layer| {
                batch
                    .sources
                    .iter()
                    .enumerate()
                    .map(|(si, s)| {
                        let stream = derive_seed(derive_seed(seed, layer as u64), si as u64);
                        Rng::seed_from(stream).permutation(s.tokens.rows())
                    })
                    .collect()
            })
            .collect();
        ShufflePlan { perms }
    }
}

/// Reorder one source's tokens by `perm` (`out[i] = tokens[perm[i]]`),
/// returning the inverse index map so original identity is never lost.
pub fn shuffle_tokens(tokens: &Mat, perm: &[usize]) -> Result<(Mat, Vec<usize>)> {
    let p = tokens.rows();
    if perm.len() != p || perm.iter().collect::<BTreeSet<_>>().len() != p
        || perm.iter().any(|&i| i >= p)
    {
        return Err(Error::InvalidArgument(format!(
            "permutation of length {} is not a bijection on {p} tokens",
            perm.len()
        )));
    }
    let mut out = Mat::zeros(p, tokens.cols());
    let mut inverse = vec![0usize; p];
    for (i, &src) in perm.iter().enumerate() {
        out.row_mut(i).copy_from_slice(tokens.row(src));
        inverse[src] = i;
    }
    Ok((out, inverse))
}

/// Merge consecutive runs of G shuffled tokens into `floor(P/G)` second-order
/// tokens via `Linear(Concat(group))`. A trailing remainder shorter than G is
/// left out of merging (it stays in the first-order set regardless).
pub fn merge_tokens(shuffled: &Mat, group: usize, params: &MergeParams) -> Result<Mat> {
    if group < 2 {
        return Err(Error::InvalidArgument(
            "merge group must be >= 2 when merging".into(),
        ));
    }
    let d = shuffled.cols();
    params
        .weight
        .shape_check(group * d, d, "merge projection")?;
    let n2 = shuffled.rows() / group;
    let mut out = Mat::zeros(n2, d);
    for g in 0..n2 {
        let row = out.row_mut(g);
        row.copy_from_slice(&params.bias);
        for j in 0..group {
            let tok = shuffled.row(g * group + j);
            for (k, &tv) in tok.iter().enumerate() {
                if tv == 0.0 {
                    continue;
                }
                let w_row = params.weight.row(j * d + k);
                for (o, &w) in row.iter_mut().zip(w_row.iter()) {
                    *o += tv * w;
                }
            }
        }
    }
    Ok(out)
}

struct LnCache {
    xhat: Mat,
    inv_std: Vec<f64>,
}

fn layer_norm(x: &Mat, scale: &[f64], bias: &[f64], eps: f64) -> (Mat, LnCache) {
    let (t, d) = (x.rows(), x.cols());
    let mut out = Mat::zeros(t, d);
    let mut xhat = Mat::zeros(t, d);
    let mut inv_std = Vec::with_capacity(t);
    for r in 0..t {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let istd = 1.0 / libm::sqrt(var + eps);
        inv_std.push(istd);
        let xh = xhat.row_mut(r);
        let o = out.row_mut(r);
        for c in 0..d {
            let h = (row[c] - mean) * istd;
            xh[c] = h;
            o[c] = h * scale[c] + bias[c];
        }
    }
    (out, LnCache { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Mat,
    cache: &LnCache,
    scale: &[f64],
    dscale: &mut [f64],
    dbias: &mut [f64],
) -> Mat {
    let (t, d) = (dy.rows(), dy.cols());
    let mut dx = Mat::zeros(t, d);
    for r in 0..t {
        let dy_row = dy.row(r);
        let xh = cache.xhat.row(r);
        for c in 0..d {
            dscale[c] += dy_row[c] * xh[c];
            dbias[c] += dy_row[c];
        }
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for c in 0..d {
            let dxh = dy_row[c] * scale[c];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[c];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let istd = cache.inv_std[r];
        let dx_row = dx.row_mut(r);
        for c in 0..d {
            let dxh = dy_row[c] * scale[c];
            dx_row[c] = istd * (dxh - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

fn affine(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    let mut out = x.matmul(w);
    for r in 0..out.rows() {
        mat::add_slice(out.row_mut(r), b);
    }
    out
}

/// Scaled dot-product multi-head attention over `tokens`, followed by the
/// output projection, residual add and layer norm. Returns the updated
/// tokens and one probability matrix per head.
pub fn self_attention(
    tokens: &Mat,
    layer: &LayerParams,
    heads: usize,
    ln_eps: f64,
) -> Result<(Mat, Vec<Mat>)> {
    let d = tokens.cols();
    if d % heads != 0 {
        return Err(Error::InvalidArgument(format!(
            "token dim {d} not divisible by {heads} heads"
        )));
    }
    let (out, probs, _, _) = attention_block(tokens, layer, heads, ln_eps);
    Ok((out, probs))
}

/// Returns (post add&norm output, probs per head, attn concat A, LnCache).
fn attention_block(
    union: &Mat,
    layer: &LayerParams,
    heads: usize,
    ln_eps: f64,
) -> (Mat, Vec<Mat>, AttnCache, LnCache) {
    let t = union.rows();
    let d = union.cols();
    let dh = d / heads;
    let scale = 1.0 / libm::sqrt(dh as f64);

    let q = affine(union, &layer.wq, &layer.bq);
    let k = affine(union, &layer.wk, &layer.bk);
    let v = affine(union, &layer.wv, &layer.bv);

    let mut probs = Vec::with_capacity(heads);
    let mut concat = Mat::zeros(t, d);
    for h in 0..heads {
        let lo = h * dh;
        let hi = lo + dh;
        let mut p = Mat::zeros(t, t);
        for i in 0..t {
            let qi = &q.row(i)[lo..hi];
            let row = p.row_mut(i);
            let mut max = f64::NEG_INFINITY;
            for j in 0..t {
                let s = scale * mat::dot(qi, &k.row(j)[lo..hi]);
                row[j] = s;
                if s > max {
                    max = s;
                }
            }
            let mut z = 0.0;
            for val in row.iter_mut() {
                *val = crate::math::exp(*val - max);
                z += *val;
            }
            for val in row.iter_mut() {
                *val /= z;
            }
        }
        for i in 0..t {
            let out_row = &mut concat.row_mut(i)[lo..hi];
            let p_row = p.row(i);
            for (j, &pj) in p_row.iter().enumerate() {
                if pj == 0.0 {
                    continue;
                }
                let vj = &v.row(j)[lo..hi];
                for (o, &vv) in out_row.iter_mut().zip(vj.iter()) {
                    *o += pj * vv;
                }
            }
        }
        probs.push(p);
    }

    let mut projected = affine(&concat, &layer.wo, &layer.bo);
    projected.add_assign(union);
    let (out, ln) = layer_norm(&projected, &layer.ln1_scale, &layer.ln1_bias, ln_eps);
    (
        out,
        probs,
        AttnCache {
            q,
            k,
            v,
            concat,
        },
        ln,
    )
}

struct AttnCache {
    q: Mat,
    k: Mat,
    v: Mat,
    concat: Mat,
}

/// Column identity inside the per-layer attention matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnTag {
    pub record: RecordRef,
    pub modality: Modality,
    pub kind: TokenKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TokenKind {
    /// A first-order token carrying this original segment index.
    First { segment: usize },
    /// A second-order token merged from shuffled group `group`.
    Merged { group: usize },
}

/// One stored attention row: a query-record first-order token attending over
/// every column of the union.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceRow {
    pub modality: Modality,
    pub segment: usize,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HeadTrace {
    pub head: usize,
    pub rows: Vec<TraceRow>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LayerTrace {
    pub layer: usize,
    pub columns: Vec<ColumnTag>,
    pub heads: Vec<HeadTrace>,
}

/// Per-layer, per-head attention rows from query-record tokens onto all
/// tokens, with source tags for every column.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub layers: Vec<LayerTrace>,
}

impl AttentionTrace {
    /// For every history record: the normalized attention mass it receives
    /// from each stored query row (one entry per row, layer and head).
    /// Masses are normalized within history columns, so a single-history
    /// sample always aggregates to 1.
    pub fn history_attention_values(&self, history_len: usize) -> Vec<Vec<f64>> {
        let mut values = vec![Vec::new(); history_len];
        for layer in &self.layers {
            let mut column_record: Vec<Option<usize>> = Vec::with_capacity(layer.columns.len());
            for tag in &layer.columns {
                column_record.push(match tag.record {
                    RecordRef::History(i) => Some(i),
                    RecordRef::Query => None,
                });
            }
            for head in &layer.heads {
                for row in &head.rows {
                    let mut mass = vec![0.0; history_len];
                    let mut total = 0.0;
                    for (p, rec) in row.probs.iter().zip(column_record.iter()) {
                        if let Some(i) = rec {
                            mass[*i] += p;
                            total += p;
                        }
                    }
                    if total > 0.0 {
                        for (i, m) in mass.into_iter().enumerate() {
                            values[i].push(m / total);
                        }
                    }
                }
            }
        }
        values
    }
}

struct LayerCache {
    perms: Vec<Vec<usize>>,
    shuffled: Vec<Mat>,
    merge_counts: Vec<usize>,
    first_offsets: Vec<usize>,
    t1: usize,
    union: Mat,
    attn: AttnCache,
    probs: Vec<Mat>,
    ln1: LnCache,
    ln1_out: Mat,
    ff_pre: Mat,
    ln2: LnCache,
}

pub struct ForwardCache {
    layers: Vec<LayerCache>,
    pooled: Vec<f64>,
    hidden_pre: Vec<f64>,
    t1: usize,
}

pub struct ForwardResult {
    pub logits: [f64; CLASS_COUNT],
    pub cache: ForwardCache,
    pub trace: Option<AttentionTrace>,
}

fn check_layer_setup(cfg: &EncoderConfig, params: &ModelParams) -> Result<()> {
    cfg.validate()?;
    if params.layers.len() != cfg.layers {
        return Err(Error::ShapeMismatch(format!(
            "config has {} layers, params have {}",
            cfg.layers,
            params.layers.len()
        )));
    }
    for (l, layer) in params.layers.iter().enumerate() {
        if (cfg.merge_group >= 2) != layer.merge.is_some() {
            return Err(Error::ShapeMismatch(format!(
                "layer {l}: merge params {} but merge group is {}",
                if layer.merge.is_some() { "present" } else { "absent" },
                cfg.merge_group
            )));
        }
    }
    Ok(())
}

/// Run one encoder layer over per-source token sets. `perms` holds one
/// permutation per source. Outputs stay in post-shuffle order; the
/// first-order token count per source is conserved.
fn layer_forward(
    sources: &[Mat],
    perms: &[Vec<usize>],
    cfg: &EncoderConfig,
    layer: &LayerParams,
) -> Result<(Vec<Mat>, LayerCache)> {
    let d = cfg.d;
    let g = cfg.merge_group;

    let mut shuffled = Vec::with_capacity(sources.len());
    for (tokens, perm) in sources.iter().zip(perms.iter()) {
        let (s, _) = shuffle_tokens(tokens, perm)?;
        shuffled.push(s);
    }

    let t1: usize = shuffled.iter().map(|s| s.rows()).sum();
    let mut merged: Vec<Mat> = Vec::new();
    let mut merge_counts = vec![0usize; shuffled.len()];
    if g >= 2 {
        let mp = layer.merge.as_ref().expect("merge params checked");
        for (si, s) in shuffled.iter().enumerate() {
            let m = merge_tokens(s, g, mp)?;
            merge_counts[si] = m.rows();
            merged.push(m);
        }
    }
    let t2: usize = merge_counts.iter().sum();

    let mut union = Mat::zeros(t1 + t2, d);
    let mut first_offsets = Vec::with_capacity(shuffled.len());
    let mut row = 0;
    for s in &shuffled {
        first_offsets.push(row);
        for r in 0..s.rows() {
            union.row_mut(row).copy_from_slice(s.row(r));
            row += 1;
        }
    }
    for m in &merged {
        for r in 0..m.rows() {
            union.row_mut(row).copy_from_slice(m.row(r));
            row += 1;
        }
    }

    let (ln1_out, probs, attn, ln1) = attention_block(&union, layer, cfg.heads, cfg.ln_eps);

    // Drop second-order tokens, feed-forward with add&norm on the rest.
    let mut x = Mat::zeros(t1, d);
    for r in 0..t1 {
        x.row_mut(r).copy_from_slice(ln1_out.row(r));
    }
    let ff_pre = affine(&x, &layer.ff1_w, &layer.ff1_b);
    let mut hidden = ff_pre.clone();
    for v in hidden.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mut ff_out = affine(&hidden, &layer.ff2_w, &layer.ff2_b);
    ff_out.add_assign(&x);
    let (out, ln2) = layer_norm(&ff_out, &layer.ln2_scale, &layer.ln2_bias, cfg.ln_eps);

    let mut outputs = Vec::with_capacity(shuffled.len());
    for (si, s) in shuffled.iter().enumerate() {
        let mut o = Mat::zeros(s.rows(), d);
        for r in 0..s.rows() {
            o.row_mut(r).copy_from_slice(out.row(first_offsets[si] + r));
        }
        outputs.push(o);
    }

    Ok((
        outputs,
        LayerCache {
            perms: perms.to_vec(),
            shuffled,
            merge_counts,
            first_offsets,
            t1,
            union,
            attn,
            probs,
            ln1,
            ln1_out,
            ff_pre,
            ln2,
        },
    ))
}

/// One encoder layer as a standalone operation (used directly by structural
/// tests; `forward` drives the same internals with caching).
pub fn encoder_layer(
    sources: &[Mat],
    perms: &[Vec<usize>],
    cfg: &EncoderConfig,
    layer: &LayerParams,
) -> Result<Vec<Mat>> {
    layer_forward(sources, perms, cfg, layer).map(|(out, _)| out)
}

/// Full forward pass over a tokenized sequence sample: stacked encoder
/// layers, mean pooling over the surviving first-order tokens, classifier
/// MLP. Captures the attention trace when requested.
pub fn forward(
    batch: &TokenBatch,
    cfg: &EncoderConfig,
    params: &ModelParams,
    plan: &ShufflePlan,
    capture_trace: bool,
) -> Result<ForwardResult> {
    check_layer_setup(cfg, params)?;
    if batch.sources.is_empty() || batch.total_first_order() == 0 {
        return Err(Error::EmptyInput("no tokens in sequence sample".into()));
    }
    if plan.perms.len() != cfg.layers {
        return Err(Error::InvalidArgument(format!(
            "shuffle plan has {} layers, config wants {}",
            plan.perms.len(),
            cfg.layers
        )));
    }

    let mut current: Vec<Mat> = batch.sources.iter().map(|s| s.tokens.clone()).collect();
    // Original segment index of each row, maintained across per-layer shuffles.
    let mut orig_index: Vec<Vec<usize>> = batch
        .sources
        .iter()
        .map(|s| (0..s.tokens.rows()).collect())
        .collect();

    let mut trace = capture_trace.then(AttentionTrace::default);
    let mut layer_caches = Vec::with_capacity(cfg.layers);

    for (l, layer) in params.layers.iter().enumerate() {
        let perms = &plan.perms[l];
        if perms.len() != current.len() {
            return Err(Error::InvalidArgument(format!(
                "layer {l}: shuffle plan covers {} sources, batch has {}",
                perms.len(),
                current.len()
            )));
        }
        let (outputs, cache) = layer_forward(&current, perms, cfg, layer)?;
        for (oi, perm) in orig_index.iter_mut().zip(perms.iter()) {
            let prev = core::mem::take(oi);
            *oi = perm.iter().map(|&p| prev[p]).collect();
        }
        if !cache.ln2.xhat.is_finite() || outputs.iter().any(|o| !o.is_finite()) {
            return Err(Error::NonFinite(format!("encoder layer {l}")));
        }
        if let Some(trace) = trace.as_mut() {
            trace
                .layers
                .push(build_layer_trace(l, batch, &cache, &orig_index, cfg));
        }
        layer_caches.push(cache);
        current = outputs;
    }

    let t1: usize = current.iter().map(|m| m.rows()).sum();
    let d = cfg.d;
    let mut pooled = vec![0.0; d];
    for m in &current {
        for r in 0..m.rows() {
            mat::add_slice(&mut pooled, m.row(r));
        }
    }
    for v in &mut pooled {
        *v /= t1 as f64;
    }

    let cls = &params.classifier;
    let mut hidden_pre = cls.hidden_b.clone();
    for (i, &p) in pooled.iter().enumerate() {
        if p == 0.0 {
            continue;
        }
        for (h, &w) in hidden_pre.iter_mut().zip(cls.hidden_w.row(i).iter()) {
            *h += p * w;
        }
    }
    let hidden: Vec<f64> = hidden_pre.iter().map(|&v| v.max(0.0)).collect();
    let mut logits = [0.0; CLASS_COUNT];
    logits.copy_from_slice(&cls.out_b);
    for (i, &h) in hidden.iter().enumerate() {
        if h == 0.0 {
            continue;
        }
        for (o, &w) in logits.iter_mut().zip(cls.out_w.row(i).iter()) {
            *o += h * w;
        }
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("classifier logits".into()));
    }

    Ok(ForwardResult {
        logits,
        cache: ForwardCache {
            layers: layer_caches,
            pooled,
            hidden_pre,
            t1,
        },
        trace,
    })
}

fn build_layer_trace(
    l: usize,
    batch: &TokenBatch,
    cache: &LayerCache,
    orig_index: &[Vec<usize>],
    cfg: &EncoderConfig,
) -> LayerTrace {
    let mut columns = Vec::with_capacity(cache.union.rows());
    for (si, src) in batch.sources.iter().enumerate() {
        for r in 0..cache.shuffled[si].rows() {
            columns.push(ColumnTag {
                record: src.record,
                modality: src.modality,
                kind: TokenKind::First {
                    segment: orig_index[si][r],
                },
            });
        }
    }
    for (si, src) in batch.sources.iter().enumerate() {
        for g in 0..cache.merge_counts[si] {
            columns.push(ColumnTag {
                record: src.record,
                modality: src.modality,
                kind: TokenKind::Merged { group: g },
            });
        }
    }

    let mut query_rows: Vec<(usize, Modality, usize)> = Vec::new();
    for (si, src) in batch.sources.iter().enumerate() {
        if !src.record.is_query() {
            continue;
        }
        for r in 0..cache.shuffled[si].rows() {
            query_rows.push((cache.first_offsets[si] + r, src.modality, orig_index[si][r]));
        }
    }

    let heads = (0..cfg.heads)
        .map(|h| HeadTrace {
            head: h,
            rows: query_rows
                .iter()
                .map(|&(row, modality, segment)| TraceRow {
                    modality,
                    segment,
                    probs: cache.probs[h].row(row).to_vec(),
                })
                .collect(),
        })
        .collect();

    LayerTrace {
        layer: l,
        columns,
        heads,
    }
}

/// Reverse-mode pass matching [`forward`]. Accumulates parameter gradients
/// into `grads` (encoder layers and classifier, plus — via
/// [`token_backward`] — projections and encoding tables) and returns the
/// loss gradient with respect to each source's input tokens.
pub fn backward(
    cfg: &EncoderConfig,
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: [f64; CLASS_COUNT],
    grads: &mut GradientSet,
) -> Result<Vec<Mat>> {
    check_layer_setup(cfg, params)?;
    let d = cfg.d;
    let cls = &params.classifier;

    // Classifier backward.
    let hidden: Vec<f64> = cache.hidden_pre.iter().map(|&v| v.max(0.0)).collect();
    for (c, &dl) in dlogits.iter().enumerate() {
        grads.classifier.out_b[c] += dl;
    }
    for i in 0..d {
        let row = grads.classifier.out_w.row_mut(i);
        for (c, &dl) in dlogits.iter().enumerate() {
            row[c] += hidden[i] * dl;
        }
    }
    let mut dhidden = vec![0.0; d];
    for i in 0..d {
        dhidden[i] = mat::dot(cls.out_w.row(i), &dlogits);
        if cache.hidden_pre[i] <= 0.0 {
            dhidden[i] = 0.0;
        }
    }
    for (i, &dh) in dhidden.iter().enumerate() {
        grads.classifier.hidden_b[i] += dh;
    }
    for i in 0..d {
        let row = grads.classifier.hidden_w.row_mut(i);
        for (j, &dh) in dhidden.iter().enumerate() {
            row[j] += cache.pooled[i] * dh;
        }
    }
    let mut dpooled = vec![0.0; d];
    for i in 0..d {
        dpooled[i] = mat::dot(cls.hidden_w.row(i), &dhidden);
    }

    // Mean pool backward: every surviving first-order token receives
    // dpooled / t1, in the last layer's post-shuffle order.
    let inv_t1 = 1.0 / cache.t1 as f64;
    let last = cache.layers.last().expect("at least one layer");
    let mut d_sources: Vec<Mat> = last
        .shuffled
        .iter()
        .map(|s| {
            let mut m = Mat::zeros(s.rows(), d);
            for r in 0..s.rows() {
                for (o, &dp) in m.row_mut(r).iter_mut().zip(dpooled.iter()) {
                    *o = dp * inv_t1;
                }
            }
            m
        })
        .collect();

    // Layers in reverse.
    for (l, layer) in params.layers.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let glayer = &mut grads.layers[l];
        let t1 = lc.t1;
        let t = lc.union.rows();

        // Stack per-source output grads into first-order block order.
        let mut d_out = Mat::zeros(t1, d);
        for (si, ds) in d_sources.iter().enumerate() {
            for r in 0..ds.rows() {
                d_out
                    .row_mut(lc.first_offsets[si] + r)
                    .copy_from_slice(ds.row(r));
            }
        }

        // LN2 backward.
        let dx2 = layer_norm_backward(
            &d_out,
            &lc.ln2,
            &layer.ln2_scale,
            &mut glayer.ln2_scale,
            &mut glayer.ln2_bias,
        );

        // FFN backward. x = ln1_out rows 0..t1.
        let mut hidden = lc.ff_pre.clone();
        for v in hidden.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        mat::add_tmul(&mut glayer.ff2_w, &hidden, &dx2);
        for r in 0..t1 {
            mat::add_slice(&mut glayer.ff2_b, dx2.row(r));
        }
        let mut dz = mat::mul_transb(&dx2, &layer.ff2_w);
        for (dzv, &pre) in dz.data_mut().iter_mut().zip(lc.ff_pre.data().iter()) {
            if pre <= 0.0 {
                *dzv = 0.0;
            }
        }
        let mut x = Mat::zeros(t1, d);
        for r in 0..t1 {
            x.row_mut(r).copy_from_slice(lc.ln1_out.row(r));
        }
        mat::add_tmul(&mut glayer.ff1_w, &x, &dz);
        for r in 0..t1 {
            mat::add_slice(&mut glayer.ff1_b, dz.row(r));
        }
        let dx_ff = mat::mul_transb(&dz, &layer.ff1_w);

        // d(ln1 output): residual + FFN path on first-order rows, zero on
        // dropped second-order rows.
        let mut dn1 = Mat::zeros(t, d);
        for r in 0..t1 {
            let row = dn1.row_mut(r);
            for c in 0..d {
                row[c] = dx2.get(r, c) + dx_ff.get(r, c);
            }
        }

        // LN1 backward.
        let du2 = layer_norm_backward(
            &dn1,
            &lc.ln1,
            &layer.ln1_scale,
            &mut glayer.ln1_scale,
            &mut glayer.ln1_bias,
        );

        // du2 splits into the residual path (straight to the union) and the
        // attention output path.
        let mut d_union = du2.clone();
        let d_o = du2;

        // Output projection backward.
        mat::add_tmul(&mut glayer.wo, &lc.attn.concat, &d_o);
        for r in 0..t {
            mat::add_slice(&mut glayer.bo, d_o.row(r));
        }
        let d_concat = mat::mul_transb(&d_o, &layer.wo);

        // Per-head attention backward.
        let heads = cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut dq = Mat::zeros(t, d);
        let mut dk = Mat::zeros(t, d);
        let mut dv = Mat::zeros(t, d);
        for h in 0..heads {
            let lo = h * dh;
            let hi = lo + dh;
            let p = &lc.probs[h];
            // dprobs and dV.
            let mut dprobs = Mat::zeros(t, t);
            for i in 0..t {
                let da = &d_concat.row(i)[lo..hi];
                let dp_row = dprobs.row_mut(i);
                for j in 0..t {
                    dp_row[j] = mat::dot(da, &lc.attn.v.row(j)[lo..hi]);
                }
                let p_row = p.row(i);
                for j in 0..t {
                    let pj = p_row[j];
                    if pj == 0.0 {
                        continue;
                    }
                    let dv_row = &mut dv.row_mut(j)[lo..hi];
                    for (o, &a) in dv_row.iter_mut().zip(da.iter()) {
                        *o += pj * a;
                    }
                }
            }
            // Softmax backward into scores, then into q and k.
            for i in 0..t {
                let p_row = p.row(i);
                let dp_row = dprobs.row(i);
                let dot = mat::dot(p_row, dp_row);
                let qi = &lc.attn.q.row(i)[lo..hi];
                for j in 0..t {
                    let ds = p_row[j] * (dp_row[j] - dot) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &lc.attn.k.row(j)[lo..hi];
                    let dq_row = &mut dq.row_mut(i)[lo..hi];
                    for (o, &kv) in dq_row.iter_mut().zip(kj.iter()) {
                        *o += ds * kv;
                    }
                    let dk_row = &mut dk.row_mut(j)[lo..hi];
                    for (o, &qv) in dk_row.iter_mut().zip(qi.iter()) {
                        *o += ds * qv;
                    }
                }
            }
        }

        // Q/K/V projection backward.
        mat::add_tmul(&mut glayer.wq, &lc.union, &dq);
        mat::add_tmul(&mut glayer.wk, &lc.union, &dk);
        mat::add_tmul(&mut glayer.wv, &lc.union, &dv);
        for r in 0..t {
            mat::add_slice(&mut glayer.bq, dq.row(r));
            mat::add_slice(&mut glayer.bk, dk.row(r));
            mat::add_slice(&mut glayer.bv, dv.row(r));
        }
        d_union.add_assign(&mat::mul_transb(&dq, &layer.wq));
        d_union.add_assign(&mat::mul_transb(&dk, &layer.wk));
        d_union.add_assign(&mat::mul_transb(&dv, &layer.wv));

        // Split the union gradient back into shuffled per-source gradients:
        // first-order rows directly, merged rows through the merge linear.
        let mut d_shuffled: Vec<Mat> = lc
            .shuffled
            .iter()
            .map(|s| Mat::zeros(s.rows(), d))
            .collect();
        for (si, ds) in d_shuffled.iter_mut().enumerate() {
            for r in 0..ds.rows() {
                ds.row_mut(r)
                    .copy_from_slice(d_union.row(lc.first_offsets[si] + r));
            }
        }
        if cfg.merge_group >= 2 {
            let g = cfg.merge_group;
            let mp = layer.merge.as_ref().expect("merge params checked");
            let gm = grads.layers[l].merge.as_mut().expect("merge grads");
            let mut row = t1;
            for (si, &count) in lc.merge_counts.iter().enumerate() {
                for grp in 0..count {
                    let d_m = d_union.row(row).to_vec();
                    mat::add_slice(&mut gm.bias, &d_m);
                    for j in 0..g {
                        let tok = lc.shuffled[si].row(grp * g + j);
                        for (kk, &tv) in tok.iter().enumerate() {
                            let w_row = gm.weight.row_mut(j * d + kk);
                            for (o, &dm) in w_row.iter_mut().zip(d_m.iter()) {
                                *o += tv * dm;
                            }
                        }
                        let dtok = d_shuffled[si].row_mut(grp * g + j);
                        for (kk, o) in dtok.iter_mut().enumerate() {
                            *o += mat::dot(mp.weight.row(j * d + kk), &d_m);
                        }
                    }
                    row += 1;
                }
            }
        }

        // Unshuffle back to the layer's input order.
        let mut d_in: Vec<Mat> = d_shuffled
            .iter()
            .map(|s| Mat::zeros(s.rows(), d))
            .collect();
        for (si, perm) in lc.perms.iter().enumerate() {
            for (i, &src) in perm.iter().enumerate() {
                mat::add_slice(d_in[si].row_mut(src), d_shuffled[si].row(i));
            }
        }
        d_sources = d_in;
    }

    Ok(d_sources)
}

/// Backpropagate token gradients into the encoding tables and the
/// per-modality projections.
pub fn token_backward(
    batch: &TokenBatch,
    d_tokens: &[Mat],
    flags: crate::tokenizer::EncodingFlags,
    grads: &mut GradientSet,
) -> Result<()> {
    if d_tokens.len() != batch.sources.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} token grads for {} sources",
            d_tokens.len(),
            batch.sources.len()
        )));
    }
    for (src, dt) in batch.sources.iter().zip(d_tokens.iter()) {
        for r in 0..dt.rows() {
            let row = dt.row(r);
            if flags.positional {
                mat::add_slice(grads.tables.positional.row_mut(r), row);
            }
            if flags.time {
                mat::add_slice(grads.tables.time.row_mut(src.hour), row);
            }
            if flags.modality {
                mat::add_slice(grads.tables.modality.row_mut(src.modality.index()), row);
            }
            if flags.status {
                if let Some(s) = src.status_idx {
                    mat::add_slice(grads.tables.status.row_mut(s), row);
                }
            }
        }
        let proj = &mut grads.projections[src.modality.index()];
        mat::add_tmul(&mut proj.weight, &src.segments, dt);
        for r in 0..dt.rows() {
            mat::add_slice(&mut proj.bias, dt.row(r));
        }
    }
    Ok(())
}
