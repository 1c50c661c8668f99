//! All learnable tensors, their initialization, and a flat-indexable view
//! used by the optimizer and the finite-difference gradient checker.

use alloc::string::String;
use alloc::{format, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::mat::Mat;
use crate::records::{Modality, MODALITY_COUNT, STATUS_COUNT};
use crate::rng::Rng;
use crate::tokenizer::{EncodingTables, ProjectionParams, TokenizerConfig};

/// Linear merge of G neighboring shuffled tokens into one second-order token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MergeParams {
    /// `(G·d) × d`.
    pub weight: Mat,
    pub bias: Vec<f64>,
}

/// One encoder layer's parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub ln1_scale: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ff1_w: Mat,
    pub ff1_b: Vec<f64>,
    pub ff2_w: Mat,
    pub ff2_b: Vec<f64>,
    pub ln2_scale: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    /// Present only when the merge group size is at least 2.
    pub merge: Option<MergeParams>,
}

/// Global-average-pool classifier head: one hidden layer with ReLU, then a
/// linear map to the three status logits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    pub hidden_w: Mat,
    pub hidden_b: Vec<f64>,
    pub out_w: Mat,
    pub out_b: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub projections: [ProjectionParams; MODALITY_COUNT],
    pub tables: EncodingTables,
    pub layers: Vec<LayerParams>,
    pub classifier: ClassifierParams,
}

/// Gradients mirror the parameter shapes exactly, so they reuse the same
/// container type (see [`ModelParams::zeros_like`]).
pub type GradientSet = ModelParams;

fn init_mat(rows: usize, cols: usize, fan_in: usize, rng: &mut Rng) -> Mat {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    Mat::from_fn(rows, cols, |_, _| rng.uniform(-bound, bound))
}

fn init_vec(len: usize, fan_in: usize, rng: &mut Rng) -> Vec<f64> {
    let bound = 1.0 / libm::sqrt(fan_in.max(1) as f64);
    (0..len).map(|_| rng.uniform(-bound, bound)).collect()
}

impl ModelParams {
    /// Seeded init: uniform in `±1/sqrt(fan_in)` per tensor. Layer-norm
    /// scales start at 1 and layer-norm biases at 0 so early layers pass
    /// signal through unchanged.
    pub fn init(tok: &TokenizerConfig, enc: &EncoderConfig, rng: &mut Rng) -> ModelParams {
        let d = tok.d;
        let projections: [ProjectionParams; MODALITY_COUNT] = core::array::from_fn(|i| {
            let m = Modality::from_index(i).unwrap();
            let width = tok.segment_width(m);
            ProjectionParams {
                weight: init_mat(width, d, width, rng),
                bias: init_vec(d, width, rng),
            }
        });
        let tables = EncodingTables {
            positional: init_mat(tok.max_segments(), d, d, rng),
            time: init_mat(crate::tokenizer::HOURS, d, d, rng),
            modality: init_mat(MODALITY_COUNT, d, d, rng),
            status: init_mat(STATUS_COUNT, d, d, rng),
        };
        let layers = (0..enc.layers)
            .map(|_| LayerParams {
                wq: init_mat(d, d, d, rng),
                bq: init_vec(d, d, rng),
                wk: init_mat(d, d, d, rng),
                bk: init_vec(d, d, rng),
                wv: init_mat(d, d, d, rng),
                bv: init_vec(d, d, rng),
                wo: init_mat(d, d, d, rng),
                bo: init_vec(d, d, rng),
                ln1_scale: alloc::vec![1.0; d],
                ln1_bias: alloc::vec![0.0; d],
                ff1_w: init_mat(d, enc.ff_dim, d, rng),
                ff1_b: init_vec(enc.ff_dim, d, rng),
                ff2_w: init_mat(enc.ff_dim, d, enc.ff_dim, rng),
                ff2_b: init_vec(d, enc.ff_dim, rng),
                ln2_scale: alloc::vec![1.0; d],
                ln2_bias: alloc::vec![0.0; d],
                merge: (enc.merge_group >= 2).then(|| MergeParams {
                    weight: init_mat(enc.merge_group * d, d, enc.merge_group * d, rng),
                    bias: init_vec(d, enc.merge_group * d, rng),
                }),
            })
            .collect();
        let classifier = ClassifierParams {
            hidden_w: init_mat(d, d, d, rng),
            hidden_b: init_vec(d, d, rng),
            out_w: init_mat(d, STATUS_COUNT, d, rng),
            out_b: init_vec(STATUS_COUNT, d, rng),
        };
        ModelParams {
            projections,
            tables,
            layers,
            classifier,
        }
    }

    /// Same shapes, all zeros — the starting point for gradient accumulation.
    pub fn zeros_like(&self) -> ModelParams {
        let mut out = self.clone();
        for (_, data) in out.tensors_mut() {
            data.fill(0.0);
        }
        out
    }

    /// Every parameter tensor in a fixed canonical order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = Vec::new();
        for (i, p) in self.projections.iter().enumerate() {
            let m = Modality::from_index(i).unwrap().as_str();
            out.push((format!("proj.{m}.weight"), p.weight.data()));
            out.push((format!("proj.{m}.bias"), &p.bias));
        }
        out.push(("tables.positional".into(), self.tables.positional.data()));
        out.push(("tables.time".into(), self.tables.time.data()));
        out.push(("tables.modality".into(), self.tables.modality.data()));
        out.push(("tables.status".into(), self.tables.status.data()));
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.wq"), layer.wq.data()));
            out.push((format!("layer{l}.bq"), &layer.bq));
            out.push((format!("layer{l}.wk"), layer.wk.data()));
            out.push((format!("layer{l}.bk"), &layer.bk));
            out.push((format!("layer{l}.wv"), layer.wv.data()));
            out.push((format!("layer{l}.bv"), &layer.bv));
            out.push((format!("layer{l}.wo"), layer.wo.data()));
            out.push((format!("layer{l}.bo"), &layer.bo));
            out.push((format!("layer{l}.ln1_scale"), &layer.ln1_scale));
            out.push((format!("layer{l}.ln1_bias"), &layer.ln1_bias));
            out.push((format!("layer{l}.ff1_w"), layer.ff1_w.data()));
            out.push((format!("layer{l}.ff1_b"), &layer.ff1_b));
            out.push((format!("layer{l}.ff2_w"), layer.ff2_w.data()));
            out.push((format!("layer{l}.ff2_b"), &layer.ff2_b));
            out.push((format!("layer{l}.ln2_scale"), &layer.ln2_scale));
            out.push((format!("layer{l}.ln2_bias"), &layer.ln2_bias));
            if let Some(m) = &layer.merge {
                out.push((format!("layer{l}.merge_w"), m.weight.data()));
                out.push((format!("layer{l}.merge_b"), &m.bias));
            }
        }
        out.push(("classifier.hidden_w".into(), self.classifier.hidden_w.data()));
        out.push(("classifier.hidden_b".into(), &self.classifier.hidden_b));
        out.push(("classifier.out_w".into(), self.classifier.out_w.data()));
        out.push(("classifier.out_b".into(), &self.classifier.out_b));
        out
    }

    /// Mutable view, same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for (i, p) in self.projections.iter_mut().enumerate() {
            let m = Modality::from_index(i).unwrap().as_str();
            out.push((format!("proj.{m}.weight"), p.weight.data_mut()));
            out.push((format!("proj.{m}.bias"), &mut p.bias));
        }
        out.push(("tables.positional".into(), self.tables.positional.data_mut()));
        out.push(("tables.time".into(), self.tables.time.data_mut()));
        out.push(("tables.modality".into(), self.tables.modality.data_mut()));
        out.push(("tables.status".into(), self.tables.status.data_mut()));
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.wq"), layer.wq.data_mut()));
            out.push((format!("layer{l}.bq"), &mut layer.bq));
            out.push((format!("layer{l}.wk"), layer.wk.data_mut()));
            out.push((format!("layer{l}.bk"), &mut layer.bk));
            out.push((format!("layer{l}.wv"), layer.wv.data_mut()));
            out.push((format!("layer{l}.bv"), &mut layer.bv));
            out.push((format!("layer{l}.wo"), layer.wo.data_mut()));
            out.push((format!("layer{l}.bo"), &mut layer.bo));
            out.push((format!("layer{l}.ln1_scale"), &mut layer.ln1_scale));
            out.push((format!("layer{l}.ln1_bias"), &mut layer.ln1_bias));
            out.push((format!("layer{l}.ff1_w"), layer.ff1_w.data_mut()));
            out.push((format!("layer{l}.ff1_b"), &mut layer.ff1_b));
            out.push((format!("layer{l}.ff2_w"), layer.ff2_w.data_mut()));
            out.push((format!("layer{l}.ff2_b"), &mut layer.ff2_b));
            out.push((format!("layer{l}.ln2_scale"), &mut layer.ln2_scale));
            out.push((format!("layer{l}.ln2_bias"), &mut layer.ln2_bias));
            if let Some(m) = &mut layer.merge {
                out.push((format!("layer{l}.merge_w"), m.weight.data_mut()));
                out.push((format!("layer{l}.merge_b"), &mut m.bias));
            }
        }
        out.push((
            "classifier.hidden_w".into(),
            self.classifier.hidden_w.data_mut(),
        ));
        out.push(("classifier.hidden_b".into(), &mut self.classifier.hidden_b));
        out.push(("classifier.out_w".into(), self.classifier.out_w.data_mut()));
        out.push(("classifier.out_b".into(), &mut self.classifier.out_b));
        out
    }

    /// Tensor names and lengths in canonical order — the model family's
    /// structural fingerprint.
    pub fn shape_signature(&self) -> Vec<(String, usize)> {
        self.tensors()
            .into_iter()
            .map(|(name, data)| (name, data.len()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, d)| d.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, d)| d.iter().all(|v| v.is_finite()))
    }
}
