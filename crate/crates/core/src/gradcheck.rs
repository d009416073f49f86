//! Finite-difference verification of every parameter gradient on a small
//! encoder+generator, in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec::Codegram;
use crate::error::Result;
use crate::features::{normalize_with, per_channel_normalize, FeatureKind, FeatureSequence, NormStats};
use crate::masking::token_mask;
use crate::model::{build_joint_loss, Model, TrainSample};
use crate::nn::{KdHead, ModelConfig};
use crate::teacher::{KdVariant, TeacherTarget};
use crate::tensor::Tensor;

pub const FD_STEP: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub worst: f64,
    pub worst_param: String,
    pub elements: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.worst < tolerance
    }
}

/// The toy geometry used for gradient checking: d=8, 2+2 blocks, Q=2,
/// K=8, T=6.
pub fn toy_config(kd: Option<KdHead>) -> ModelConfig {
    ModelConfig {
        d: 8,
        n_heads: 2,
        n_blocks_encoder: 2,
        n_blocks_generator: 2,
        mlp_mult: 4,
        vocab_k: 8,
        num_codebooks_q: 2,
        max_t: 8,
        in_channels: 10,
        kd_head: kd,
    }
}

fn fixed_batch(cfg: &ModelConfig, seed: u64) -> Vec<TrainSample> {
    let frames = 6usize;
    let t_teacher = 4usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for slot in 0..2 {
        let features = FeatureSequence::new(
            (0..frames * cfg.in_channels)
                .map(|_| rng.gen_range(0.0f32..2.0))
                .collect(),
            frames,
            cfg.in_channels,
            62.5,
            FeatureKind::StftCompressed,
        );
        let tokens = (0..cfg.num_codebooks_q * frames)
            .map(|_| rng.gen_range(0..cfg.vocab_k as u32))
            .collect();
        let target_codegram =
            Codegram::new(cfg.num_codebooks_q, frames, cfg.vocab_k as u32, tokens);
        let teacher_target = cfg.kd_head.map(|head| match head {
            KdHead::Continuous { dim } => {
                let raw = FeatureSequence::new(
                    (0..t_teacher * dim).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
                    t_teacher,
                    dim,
                    50.0,
                    FeatureKind::TeacherLayer,
                );
                TeacherTarget::Continuous {
                    feats: per_channel_normalize(&raw),
                    variant: KdVariant::AvgFeature,
                }
            }
            KdHead::Discrete { classes } => TeacherTarget::Discrete {
                tokens: (0..t_teacher)
                    .map(|_| rng.gen_range(0..classes as u32))
                    .collect(),
                classes,
                variant: KdVariant::L9K500,
            },
        });
        samples.push(TrainSample {
            features,
            target_codegram,
            teacher_target,
            mask: token_mask(cfg.num_codebooks_q, frames, 0.5, seed + slot as u64).unwrap(),
            // One conditioned slot, one dropped slot: the null embedding
            // and the encoder path are both exercised.
            drop_condition: slot == 1,
        });
    }
    samples
}

/// Check every element of every parameter tensor against central finite
/// differences of the batch-mean joint loss.
pub fn finite_difference_check(kd: Option<KdHead>, seed: u64) -> Result<GradCheckReport> {
    let cfg = toy_config(kd);
    let model: Model<f64> = Model::new(cfg.clone(), seed)?;
    let batch = fixed_batch(&cfg, seed + 1000);

    // Batch statistics are a function of the inputs only; freeze them.
    let feats: Vec<&FeatureSequence> = batch.iter().map(|s| &s.features).collect();
    let (bmean, bvar) = NormStats::batch_stats(&feats);
    let xhats: Vec<FeatureSequence> = batch
        .iter()
        .map(|s| normalize_with(&s.features, &bmean, &bvar))
        .collect();

    let loss_of = |m: &Model<f64>| -> Result<f64> {
        let mut total = 0.0;
        for (s, xhat) in batch.iter().zip(&xhats) {
            total += build_joint_loss(m, s, xhat)?.total_value();
        }
        Ok(total / batch.len() as f64)
    };

    // Analytic: batch-mean of per-sample gradients, zeros where unreached.
    let mut analytic: std::collections::HashMap<String, Tensor<f64>> = Default::default();
    for (s, xhat) in batch.iter().zip(&xhats) {
        let built = build_joint_loss(&model, s, xhat)?;
        for (name, g) in built.backward() {
            match analytic.entry(name) {
                std::collections::hash_map::Entry::Occupied(mut e) => {
                    for (d, &v) in e.get_mut().data_mut().iter_mut().zip(g.data()) {
                        *d += v;
                    }
                }
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
            }
        }
    }
    let inv = 1.0 / batch.len() as f64;
    for g in analytic.values_mut() {
        for v in g.data_mut() {
            *v *= inv;
        }
    }

    let names: Vec<String> = model.params.names().cloned().collect();
    let mut per_param = Vec::with_capacity(names.len());
    let mut worst = 0.0f64;
    let mut worst_param = String::new();
    let mut elements = 0usize;

    let mut probe = model.clone();
    for name in names {
        let numel = model.params.get(&name).numel();
        let zero = Tensor::zeros(model.params.get(&name).shape().to_vec());
        let an = analytic.get(&name).unwrap_or(&zero);
        let mut tensor_worst = 0.0f64;
        for i in 0..numel {
            let original = probe.params.get(&name).data()[i];
            probe.params.get_mut(&name).data_mut()[i] = original + FD_STEP;
            let plus = loss_of(&probe)?;
            probe.params.get_mut(&name).data_mut()[i] = original - FD_STEP;
            let minus = loss_of(&probe)?;
            probe.params.get_mut(&name).data_mut()[i] = original;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = an.data()[i];
            let rel = (fd - a).abs() / fd.abs().max(a.abs()).max(1e-8);
            tensor_worst = tensor_worst.max(rel);
            elements += 1;
        }
        if tensor_worst > worst {
            worst = tensor_worst;
            worst_param = name.clone();
        }
        per_param.push((name, tensor_worst));
    }

    Ok(GradCheckReport {
        per_param,
        worst,
        worst_param,
        elements,
    })
}
