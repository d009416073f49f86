//! Corpus preparation and the joint training loop.
//!
//! Targets (codegram, teacher features) are extracted once per clip up
//! front; each step then assembles a batch, computes per-sample gradients
//! in parallel, reduces them in a fixed order, and applies Adam.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adam::{adam_step, AdamConfig, AdamState};
use crate::audio::{read_wav, resample, Waveform};
use crate::codec::{rvq_encode, CodecParams};
use crate::config::RunConfig;
use crate::distortion::{apply_distortion, synth_clean};
use crate::error::{Error, Result};
use crate::features::{
    low_band_target, normalize_with, stft_compressed, FeatureSequence, NormStats, Stft,
    COMPRESS_EXP,
};
use crate::kmeans::KMeansCodebook;
use crate::manifest::ManifestEntry;
use crate::masking::{cosine_ratio, span_mask, token_mask, MaskPlan};
use crate::model::{build_joint_loss, drop_condition, Model, TrainSample};
use crate::nn::full_grad_map;
use crate::seeds;
use crate::teacher::{select_kd_target, teacher_layers, KdVariant, TeacherParams, TeacherTarget};
use crate::tensor::{Scalar, Tensor};

/// A fully materialized clip: distorted input features plus every target
/// the joint loss needs. Clean/distorted waveforms are kept for metrics.
#[derive(Clone)]
pub struct PreparedSample {
    pub id: String,
    pub clean: Waveform,
    pub distorted: Waveform,
    pub features: FeatureSequence,
    pub target_codegram: crate::codec::Codegram,
    pub teacher_target: Option<TeacherTarget>,
}

/// Frozen components consulted during preparation.
pub struct TargetExtractors<'a> {
    pub codec: &'a CodecParams,
    pub teacher: Option<&'a TeacherParams>,
    pub codebook: Option<&'a KMeansCodebook>,
}

/// Load (or synthesize) the clean clip named by a manifest entry.
pub fn load_clean(
    entry: &ManifestEntry,
    cfg: &RunConfig,
    base_dir: &std::path::Path,
) -> Result<Waveform> {
    let wave = match &entry.clean_path {
        Some(rel) => {
            let wave = read_wav(base_dir.join(rel))?;
            resample(&wave, cfg.sample_rate)?
        }
        None => synth_clean(entry.seed, entry.seconds, cfg.sample_rate)?,
    };
    Ok(wave)
}

pub fn prepare_sample(
    entry: &ManifestEntry,
    cfg: &RunConfig,
    extractors: &TargetExtractors,
    base_dir: &std::path::Path,
) -> Result<PreparedSample> {
    let stft = Stft::new(cfg.n_fft, cfg.hop)?;
    let clean = load_clean(entry, cfg, base_dir)?;
    let distorted = apply_distortion(&clean, &entry.spec)?;

    let features = stft_compressed(&distorted, &stft, COMPRESS_EXP)?;
    let clean_features = stft_compressed(&clean, &stft, COMPRESS_EXP)?;
    let target_codegram = rvq_encode(&clean_features, extractors.codec)?;

    let teacher_target = match cfg.kd_variant {
        KdVariant::None => None,
        KdVariant::StftFull => Some(select_kd_target(
            &[],
            cfg.kd_variant,
            None,
            Some(&clean_features),
        )?),
        KdVariant::StftLow => {
            let low = low_band_target(&clean_features, cfg.low_band_ratio)?;
            Some(select_kd_target(&[], cfg.kd_variant, None, Some(&low))?)
        }
        KdVariant::L9K500 | KdVariant::L9Feature | KdVariant::AvgFeature => {
            let teacher = extractors
                .teacher
                .ok_or_else(|| Error::contract("feature distillation needs teacher parameters"))?;
            let wave16k = resample(&clean, crate::teacher::TEACHER_RATE)?;
            let layers = teacher_layers(&wave16k, teacher)?;
            Some(select_kd_target(
                &layers,
                cfg.kd_variant,
                extractors.codebook,
                None,
            )?)
        }
    };

    Ok(PreparedSample {
        id: entry.id.clone(),
        clean,
        distorted,
        features,
        target_codegram,
        teacher_target,
    })
}

pub fn prepare_corpus(
    entries: &[&ManifestEntry],
    cfg: &RunConfig,
    extractors: &TargetExtractors,
    base_dir: &std::path::Path,
) -> Result<Vec<PreparedSample>> {
    entries
        .par_iter()
        .map(|entry| prepare_sample(entry, cfg, extractors, base_dir))
        .collect()
}

/// One line of the machine-parseable training log.
#[derive(Debug, Clone, Copy)]
pub struct StepStats {
    pub step: usize,
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub lr: f64,
}

impl StepStats {
    pub fn tsv_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6e}",
            self.step, self.total, self.ce, self.kd, self.lr
        )
    }
}

/// Assemble the mask plan for one training slot: ratio drawn from the
/// cosine schedule at uniform progress, token- or span-level.
fn draw_mask(
    stages: usize,
    frames: usize,
    span_length: usize,
    seed: u64,
) -> Result<MaskPlan> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u: f64 = rng.gen_range(0.0..1.0);
    let ratio = cosine_ratio(u)?;
    // Guarantee at least one masked token so the CE term is live.
    let floor = 1.0 / (stages * frames) as f64;
    if span_length <= 1 {
        token_mask(stages, frames, ratio.max(floor), seeds::derive(seed, "plan", 0))
    } else {
        span_mask(
            stages,
            frames,
            ratio.max(floor),
            span_length,
            seeds::derive(seed, "plan", 0),
        )
    }
}

/// Train in place for `cfg.steps` steps. Batch gradients reduce in slot
/// order, so runs are bit-reproducible for a fixed config and seed.
pub fn train_model<F: Scalar>(
    model: &mut Model<F>,
    corpus: &[PreparedSample],
    cfg: &RunConfig,
    mut log: impl FnMut(&StepStats),
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::contract("training corpus is empty"));
    }
    let adam_cfg = AdamConfig {
        lr: cfg.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::new(&model.params);
    let batch = cfg.batch_size.min(corpus.len());

    for step in 0..cfg.steps {
        // Deterministic batch selection without replacement.
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, "batch", step as u64));
        let mut pool: Vec<usize> = (0..corpus.len()).collect();
        for i in 0..batch {
            let j = rng.gen_range(i..pool.len());
            pool.swap(i, j);
        }
        let chosen = &pool[..batch];

        // Per-slot masking and condition dropout.
        let mut slots: Vec<TrainSample> = Vec::with_capacity(batch);
        for (slot, &idx) in chosen.iter().enumerate() {
            let sample = &corpus[idx];
            let slot_seed = seeds::derive(cfg.seed, "slot", (step * cfg.batch_size + slot) as u64);
            let mask = draw_mask(
                sample.target_codegram.stages,
                sample.target_codegram.frames,
                cfg.span_length,
                slot_seed,
            )?;
            let mut drop_rng =
                ChaCha8Rng::seed_from_u64(seeds::derive(slot_seed, "drop", 0));
            let drop = drop_condition(cfg.cond_drop_prob, &mut drop_rng)?;
            slots.push(TrainSample {
                features: sample.features.clone(),
                target_codegram: sample.target_codegram.clone(),
                teacher_target: sample.teacher_target.clone(),
                mask,
                drop_condition: drop,
            });
        }

        // Batch statistics for the input normalization layer.
        let feat_refs: Vec<&FeatureSequence> = slots.iter().map(|s| &s.features).collect();
        let (bmean, bvar) = NormStats::batch_stats(&feat_refs);

        // Per-sample loss and gradients in parallel; ordered results.
        let results: Result<Vec<_>> = slots
            .par_iter()
            .map(|slot| {
                let xhat = normalize_with(&slot.features, &bmean, &bvar);
                let built = build_joint_loss(model, slot, &xhat)?;
                let grads = built.backward();
                Ok((built.total_value(), built.ce_value(), built.kd_value(), grads))
            })
            .collect();
        let results = results?;

        // Fixed-order mean reduction.
        let scale = F::from_f64(1.0 / batch as f64);
        let mut acc: std::collections::HashMap<String, Tensor<F>> = Default::default();
        let (mut total, mut ce, mut kd) = (0.0f64, 0.0f64, 0.0f64);
        for (t, c, k, grads) in results {
            total += t;
            ce += c;
            kd += k;
            for (name, g) in grads {
                match acc.entry(name) {
                    std::collections::hash_map::Entry::Occupied(mut e) => {
                        let dst = e.get_mut();
                        for (d, &s) in dst.data_mut().iter_mut().zip(g.data()) {
                            *d += s;
                        }
                    }
                    std::collections::hash_map::Entry::Vacant(e) => {
                        e.insert(g);
                    }
                }
            }
        }
        for g in acc.values_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
        let grads = full_grad_map(&model.params, acc);
        adam_step(&mut model.params, &grads, &mut adam, &adam_cfg)?;
        model.norm.update(&bmean, &bvar);

        log(&StepStats {
            step,
            total: total / batch as f64,
            ce: ce / batch as f64,
            kd: kd / batch as f64,
            lr: adam_cfg.lr,
        });
    }
    Ok(())
}

/// Mean distillation loss of the current encoder over prepared samples,
/// using running statistics (the held-out evaluation path).
pub fn heldout_kd_loss<F: Scalar>(
    model: &Model<F>,
    corpus: &[PreparedSample],
) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for sample in corpus {
        let Some(target) = &sample.teacher_target else {
            continue;
        };
        let pred = crate::model::kd_predict_eval(model, &sample.features, target.frames())?;
        total += crate::teacher::kd_loss(&pred, target)?;
        count += 1;
    }
    if count == 0 {
        return Err(Error::contract("no samples carry a teacher target"));
    }
    Ok(total / count as f64)
}
