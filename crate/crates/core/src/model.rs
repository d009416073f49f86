//! The joint model: speech encoder over distorted-input features, the
//! distillation branch, acoustic embedding and conditioning, the
//! generator transformer with its per-stage output heads, and the joint
//! loss with condition dropout.

use std::collections::HashMap;

use rand::Rng;

use crate::codec::{CodecParams, Codegram};
use crate::error::{Error, Result};
use crate::features::{normalize_with, FeatureKind, FeatureSequence, NormStats};
use crate::graph::{Graph, NodeId};
use crate::instrument;
use crate::masking::MaskPlan;
use crate::nn::{final_norm, sinusoidal_pe, transformer_stack, ModelConfig, ParamSet};
use crate::teacher::TeacherTarget;
use crate::tensor::{Scalar, Tensor};

pub const BATCH_NORM_MOMENTUM: f32 = 0.01;

/// Parameters plus the running input statistics they were trained with.
#[derive(Clone)]
pub struct Model<F: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamSet<F>,
    pub norm: NormStats,
}

impl<F: Scalar> Model<F> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = crate::nn::init_params(&cfg, seed);
        let norm = NormStats::new(cfg.in_channels, BATCH_NORM_MOMENTUM);
        Ok(Model { cfg, params, norm })
    }

    /// Overwrite the acoustic embedding tables with the codec export
    /// (codeword rows plus a fresh MASK row).
    pub fn init_embeddings_from_codec(&mut self, codec: &CodecParams, seed: u64) -> Result<()> {
        if codec.vocab_k != self.cfg.vocab_k || codec.num_stages() != self.cfg.num_codebooks_q {
            return Err(Error::contract(
                "codec stage count or codebook size does not match the model",
            ));
        }
        let tables = crate::codec::export_embedding_init(codec, self.cfg.d, seed)?;
        for (q, table) in tables.into_iter().enumerate() {
            *self.params.get_mut(&format!("embed/s{q}")) = table.map(|v| F::from_f32(v));
        }
        Ok(())
    }

    pub fn convert<G: Scalar>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.convert(),
            norm: self.norm.clone(),
        }
    }
}

/// What conditions the generator: encoder features or the learned null
/// embedding (classifier-free guidance's unconditional branch).
#[derive(Debug, Clone, PartialEq)]
pub enum ConditionState {
    Features(FeatureSequence),
    Null,
}

fn feats_to_tensor<F: Scalar>(feats: &FeatureSequence) -> Tensor<F> {
    Tensor::new(
        vec![feats.frames(), feats.channels()],
        feats.data().iter().map(|&v| F::from_f32(v)).collect(),
    )
}

fn tensor_to_feats<F: Scalar>(t: &Tensor<F>, frame_rate_hz: f32, kind: FeatureKind) -> FeatureSequence {
    FeatureSequence::new(
        t.data().iter().map(|&v| v.to_f64_() as f32).collect(),
        t.rows(),
        t.cols(),
        frame_rate_hz,
        kind,
    )
}

/// Normalized input -> affine -> input FC -> positional encoding ->
/// encoder blocks -> final norm. `xhat` must already be normalized with
/// the appropriate (batch or running) statistics.
fn encoder_nodes<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    xhat: &FeatureSequence,
) -> Result<NodeId> {
    if xhat.channels() != cfg.in_channels {
        return Err(Error::contract(format!(
            "encoder expects {} channels, features have {}",
            cfg.in_channels,
            xhat.channels()
        )));
    }
    let x = g.constant(feats_to_tensor(xhat));
    let gain = g.param("norm/gain", params.get("norm/gain"));
    let bias = g.param("norm/bias", params.get("norm/bias"));
    let scaled = g.mul_row(x, gain);
    let affine = g.add_row(scaled, bias);
    let w = g.param("enc/in_w", params.get("enc/in_w"));
    let b = g.param("enc/in_b", params.get("enc/in_b"));
    let projected = g.matmul(affine, w);
    let with_bias = g.add_row(projected, b);
    let pe = g.constant(sinusoidal_pe(xhat.frames(), cfg.d)?);
    let x = g.add(with_bias, pe);
    let out = transformer_stack(g, params, x, "enc", 0..cfg.n_blocks_encoder, cfg.n_heads)?;
    Ok(final_norm(g, params, out, "enc"))
}

/// Pool the encoder output to the target length and project with the
/// distillation head. Only the training path calls this.
fn kd_prediction_nodes<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    enc_out: NodeId,
    t_target: usize,
) -> NodeId {
    instrument::count(instrument::Counter::PoolEvals);
    instrument::count(instrument::Counter::KdHeadEvals);
    let pooled = g.avg_pool_rows(enc_out, t_target);
    let w = g.param("kd/w", params.get("kd/w"));
    let b = g.param("kd/b", params.get("kd/b"));
    let projected = g.matmul(pooled, w);
    g.add_row(projected, b)
}

/// Sum the per-stage embedding rows for every token of the grid; the MASK
/// sentinel selects row K.
fn embed_codegram_nodes<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    codegram: &Codegram,
) -> Result<NodeId> {
    if codegram.stages != cfg.num_codebooks_q || codegram.vocab_k as usize != cfg.vocab_k {
        return Err(Error::contract("codegram does not match model geometry"));
    }
    if let Some(&bad) = codegram.tokens().iter().find(|&&t| t > codegram.vocab_k) {
        return Err(Error::contract(format!(
            "token {bad} exceeds vocabulary {}",
            codegram.vocab_k
        )));
    }
    let tables: Vec<NodeId> = (0..cfg.num_codebooks_q)
        .map(|q| {
            let name = format!("embed/s{q}");
            g.param(&name, params.get(&name))
        })
        .collect();
    Ok(g.embed_sum(&tables, codegram.tokens().to_vec(), codegram.frames))
}

enum CondNode {
    Features(NodeId),
    Null,
}

/// Acoustic embedding + condition + positional encoding -> generator
/// blocks -> per-stage logit heads.
fn generator_nodes<F: Scalar>(
    g: &mut Graph<F>,
    cfg: &ModelConfig,
    params: &ParamSet<F>,
    acoustic: NodeId,
    condition: CondNode,
) -> Result<Vec<NodeId>> {
    let frames = g.value(acoustic).rows();
    let pe = g.constant(sinusoidal_pe(frames, cfg.d)?);
    let base = g.add(acoustic, pe);
    let conditioned = match condition {
        CondNode::Features(c) => {
            if g.value(c).shape() != [frames, cfg.d] {
                return Err(Error::contract("condition shape mismatch"));
            }
            g.add(base, c)
        }
        CondNode::Null => {
            let null = g.param("null_cond", params.get("null_cond"));
            g.add_row(base, null)
        }
    };
    let out = transformer_stack(
        g,
        params,
        conditioned,
        "gen",
        0..cfg.n_blocks_generator,
        cfg.n_heads,
    )?;
    let normed = final_norm(g, params, out, "gen");
    let mut logits = Vec::with_capacity(cfg.num_codebooks_q);
    for q in 0..cfg.num_codebooks_q {
        let w = g.param(&format!("head/s{q}_w"), params.get(&format!("head/s{q}_w")));
        let b = g.param(&format!("head/s{q}_b"), params.get(&format!("head/s{q}_b")));
        let h = g.matmul(normed, w);
        logits.push(g.add_row(h, b));
    }
    Ok(logits)
}

// ---------------------------------------------------------------------
// Evaluation entry points (inference path; no distillation machinery).
// ---------------------------------------------------------------------

/// Encoder forward in eval mode: running statistics, no KD branch.
/// Returns the condition sequence for the generator.
pub fn encode_speech_eval<F: Scalar>(
    model: &Model<F>,
    feats: &FeatureSequence,
) -> Result<FeatureSequence> {
    let xhat = normalize_with(feats, &model.norm.mean, &model.norm.var);
    let mut g: Graph<F> = Graph::new();
    let out = encoder_nodes(&mut g, &model.cfg, &model.params, &xhat)?;
    Ok(tensor_to_feats(
        g.value(out),
        feats.frame_rate_hz,
        FeatureKind::EncoderLatent,
    ))
}

/// Distillation prediction in eval mode (used by the evaluation command,
/// never by restoration).
pub fn kd_predict_eval<F: Scalar>(
    model: &Model<F>,
    feats: &FeatureSequence,
    t_target: usize,
) -> Result<FeatureSequence> {
    if model.cfg.kd_head.is_none() {
        return Err(Error::contract("model has no distillation head"));
    }
    let xhat = normalize_with(feats, &model.norm.mean, &model.norm.var);
    let mut g: Graph<F> = Graph::new();
    let enc = encoder_nodes(&mut g, &model.cfg, &model.params, &xhat)?;
    let pred = kd_prediction_nodes(&mut g, &model.params, enc, t_target);
    Ok(tensor_to_feats(
        g.value(pred),
        feats.frame_rate_hz,
        FeatureKind::EncoderLatent,
    ))
}

/// Generator logits for a (possibly masked) codegram under the given
/// condition. Returns `Q*T*K` values, stage-major.
pub fn generator_logits_eval<F: Scalar>(
    model: &Model<F>,
    codegram: &Codegram,
    condition: &ConditionState,
) -> Result<Vec<f32>> {
    let mut g: Graph<F> = Graph::new();
    let acoustic = embed_codegram_nodes(&mut g, &model.cfg, &model.params, codegram)?;
    let cond = match condition {
        ConditionState::Features(f) => {
            CondNode::Features(g.constant(feats_to_tensor(f)))
        }
        ConditionState::Null => CondNode::Null,
    };
    let logits = generator_nodes(&mut g, &model.cfg, &model.params, acoustic, cond)?;
    let k = model.cfg.vocab_k;
    let mut out = Vec::with_capacity(logits.len() * codegram.frames * k);
    for l in logits {
        out.extend(g.value(l).data().iter().map(|&v| v.to_f64_() as f32));
    }
    Ok(out)
}

// ---------------------------------------------------------------------
// Training path.
// ---------------------------------------------------------------------

/// One training example, fully materialized.
#[derive(Clone)]
pub struct TrainSample {
    /// Distorted compressed-STFT features (not yet normalized).
    pub features: FeatureSequence,
    /// Clean-target codegram; contains no MASK.
    pub target_codegram: Codegram,
    pub teacher_target: Option<TeacherTarget>,
    pub mask: MaskPlan,
    pub drop_condition: bool,
}

/// A built loss graph with handles to its pieces.
pub struct BuiltLoss<F: Scalar> {
    pub graph: Graph<F>,
    pub total: NodeId,
    pub ce: NodeId,
    pub kd: Option<NodeId>,
    pub empty_mask: bool,
}

impl<F: Scalar> BuiltLoss<F> {
    pub fn total_value(&self) -> f64 {
        self.graph.value(self.total).item().to_f64_()
    }

    pub fn ce_value(&self) -> f64 {
        self.graph.value(self.ce).item().to_f64_()
    }

    pub fn kd_value(&self) -> f64 {
        self.kd
            .map(|n| self.graph.value(n).item().to_f64_())
            .unwrap_or(0.0)
    }

    pub fn backward(&self) -> HashMap<String, Tensor<F>> {
        self.graph.backward(self.total)
    }

    /// Gradients of the distillation part alone.
    pub fn backward_kd_only(&self) -> HashMap<String, Tensor<F>> {
        match self.kd {
            Some(kd) => self.graph.backward(kd),
            None => HashMap::new(),
        }
    }
}

/// Build the joint loss for one sample: cross-entropy on the masked
/// positions plus the distillation loss, summed with coefficient one
/// each. `xhat` must be the features normalized with the batch (train)
/// statistics.
pub fn build_joint_loss<F: Scalar>(
    model: &Model<F>,
    sample: &TrainSample,
    xhat: &FeatureSequence,
) -> Result<BuiltLoss<F>> {
    let cfg = &model.cfg;
    let params = &model.params;
    let target = &sample.target_codegram;
    if target.has_mask() {
        return Err(Error::contract(
            "training target codegram must not contain MASK",
        ));
    }
    if target.frames != sample.features.frames() {
        return Err(Error::contract(format!(
            "codegram frames {} do not match encoder frames {}",
            target.frames,
            sample.features.frames()
        )));
    }
    if sample.mask.stages != target.stages || sample.mask.frames != target.frames {
        return Err(Error::contract("mask plan does not match codegram"));
    }

    let mut g: Graph<F> = Graph::new();

    let needs_encoder = !sample.drop_condition || sample.teacher_target.is_some();
    let enc_out = if needs_encoder {
        Some(encoder_nodes(&mut g, cfg, params, xhat)?)
    } else {
        None
    };

    let masked_input = target.with_mask_applied(&sample.mask.grid);
    let acoustic = embed_codegram_nodes(&mut g, cfg, params, &masked_input)?;
    let cond = if sample.drop_condition {
        CondNode::Null
    } else {
        CondNode::Features(enc_out.expect("encoder built for conditioned sample"))
    };
    let logits = generator_nodes(&mut g, cfg, params, acoustic, cond)?;

    let (ce, empty_mask) = g.masked_cross_entropy(&logits, target.tokens(), &sample.mask.grid);

    let kd = match &sample.teacher_target {
        None => None,
        Some(target) => {
            let head = cfg
                .kd_head
                .ok_or_else(|| Error::contract("sample has a teacher target but the model has no distillation head"))?;
            if head.out_dim() != target.head_dim() {
                return Err(Error::contract(format!(
                    "distillation head width {} does not match target {}",
                    head.out_dim(),
                    target.head_dim()
                )));
            }
            let enc = enc_out.expect("encoder built when distilling");
            let pred = kd_prediction_nodes(&mut g, params, enc, target.frames());
            let node = match target {
                TeacherTarget::Continuous { feats, .. } => {
                    let t: Tensor<F> = feats_to_tensor(feats);
                    g.mse_vs(pred, t)
                }
                TeacherTarget::Discrete { tokens, .. } => {
                    let mask = vec![true; tokens.len()];
                    let (node, _) = g.masked_cross_entropy(&[pred], tokens, &mask);
                    node
                }
            };
            Some(node)
        }
    };

    let total = match kd {
        Some(kd_node) => g.add(ce, kd_node),
        None => ce,
    };
    g.check_finite(total, "joint loss")?;

    Ok(BuiltLoss {
        graph: g,
        total,
        ce,
        kd,
        empty_mask,
    })
}

/// Per-sample condition dropout: null with probability `p`.
pub fn drop_condition(p: f64, rng: &mut impl Rng) -> Result<bool> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::contract(format!("drop probability {p} outside [0, 1]")));
    }
    Ok(rng.gen_range(0.0..1.0) < p)
}

/// Serialize parameters, running statistics, and the resolved config.
pub fn model_to_checkpoint<F: Scalar>(model: &Model<F>, config_text: &str) -> crate::checkpoint::Checkpoint {
    use crate::checkpoint::{Checkpoint, Record};
    let mut ck = Checkpoint::new();
    for (name, tensor) in model.params.iter() {
        ck.insert_tensor(format!("param/{name}"), tensor);
    }
    ck.insert(
        "norm/running_mean",
        Record::F32(Tensor::new(
            vec![model.norm.mean.len()],
            model.norm.mean.clone(),
        )),
    );
    ck.insert(
        "norm/running_var",
        Record::F32(Tensor::new(
            vec![model.norm.var.len()],
            model.norm.var.clone(),
        )),
    );
    ck.insert(
        "meta/config",
        Record::Bytes(config_text.as_bytes().to_vec()),
    );
    ck
}

/// Rebuild a model from a checkpoint; returns the embedded config text as
/// well so callers can verify compatibility.
pub fn model_from_checkpoint<F: Scalar>(
    ck: &crate::checkpoint::Checkpoint,
) -> Result<(Model<F>, String)> {
    let config_text = String::from_utf8(ck.get("meta/config")?.as_bytes()?.to_vec())
        .map_err(|_| Error::format("embedded config is not utf-8"))?;
    let mut run_cfg = crate::config::RunConfig::toy();
    run_cfg.apply_text(&config_text)?;
    let cfg = run_cfg.model_config();
    cfg.validate()?;

    let mut model: Model<F> = Model::new(cfg, 0)?;
    for name in model.params.names().cloned().collect::<Vec<_>>() {
        let record = ck.get(&format!("param/{name}"))?;
        let loaded: Tensor<F> = record.as_float()?;
        let slot = model.params.get_mut(&name);
        if loaded.shape() != slot.shape() {
            return Err(Error::format(format!(
                "parameter {name} has shape {:?}, expected {:?}",
                loaded.shape(),
                slot.shape()
            )));
        }
        *slot = loaded;
    }
    let mean = ck.get("norm/running_mean")?.as_f32()?;
    let var = ck.get("norm/running_var")?.as_f32()?;
    if mean.numel() != model.cfg.in_channels || var.numel() != model.cfg.in_channels {
        return Err(Error::format("running statistics have the wrong width"));
    }
    model.norm.mean = mean.data().to_vec();
    model.norm.var = var.data().to_vec();
    Ok((model, config_text))
}

/// Fraction of masked positions whose argmax logit matches the target.
pub fn masked_token_accuracy<F: Scalar>(
    model: &Model<F>,
    feats: &FeatureSequence,
    target: &Codegram,
    mask: &MaskPlan,
) -> Result<f64> {
    let condition = encode_speech_eval(model, feats)?;
    let masked_input = target.with_mask_applied(&mask.grid);
    let logits = generator_logits_eval(model, &masked_input, &ConditionState::Features(condition))?;
    let (t, k) = (target.frames, model.cfg.vocab_k);
    let mut hits = 0usize;
    let mut total = 0usize;
    for q in 0..target.stages {
        for frame in 0..t {
            if !mask.is_masked(q, frame) {
                continue;
            }
            let row = &logits[(q * t + frame) * k..(q * t + frame + 1) * k];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            if best as u32 == target.get(q, frame) {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Ok(0.0);
    }
    Ok(hits as f64 / total as f64)
}
