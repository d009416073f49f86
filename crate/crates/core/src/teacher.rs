//! Synthetic frozen teacher: a deterministic 12-layer feature extractor
//! over 16 kHz target speech, its k-means tokenizer, and distillation
//! target selection.
//!
//! Stands in for a pretrained self-supervised model. Layer outputs differ
//! from each other but are a fixed function of (waveform, seed); nothing
//! here is ever trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::features::{per_channel_normalize, FeatureKind, FeatureSequence};
use crate::graph::softmax_in_place;
use crate::instrument;
use crate::kmeans::{kmeans_assign, KMeansCodebook};
use crate::seeds;
use crate::tensor::Tensor;

/// The teacher always consumes 16 kHz audio.
pub const TEACHER_RATE: u32 = 16_000;

/// Distillation target selection, mirroring the studied variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdVariant {
    /// No distillation (baseline system).
    None,
    /// Layer-9 features quantized into teacher tokens, cross-entropy loss.
    L9K500,
    /// Continuous layer-9 features, MSE loss.
    L9Feature,
    /// Mean of all 12 layers, MSE loss.
    AvgFeature,
    /// Full-band compressed-magnitude spectral target, MSE loss.
    StftFull,
    /// Band-limited spectral target, MSE loss.
    StftLow,
}

impl KdVariant {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => KdVariant::None,
            "l9-k500" => KdVariant::L9K500,
            "l9-feature" => KdVariant::L9Feature,
            "avg-feature" => KdVariant::AvgFeature,
            "stft-full" => KdVariant::StftFull,
            "stft-low" => KdVariant::StftLow,
            other => {
                return Err(Error::contract(format!(
                    "unknown kd variant '{other}' (expected none, l9-k500, l9-feature, avg-feature, stft-full, stft-low)"
                )))
            }
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            KdVariant::None => "none",
            KdVariant::L9K500 => "l9-k500",
            KdVariant::L9Feature => "l9-feature",
            KdVariant::AvgFeature => "avg-feature",
            KdVariant::StftFull => "stft-full",
            KdVariant::StftLow => "stft-low",
        }
    }

    pub fn needs_codebook(&self) -> bool {
        matches!(self, KdVariant::L9K500)
    }

    pub fn is_spectral(&self) -> bool {
        matches!(self, KdVariant::StftFull | KdVariant::StftLow)
    }

    pub fn needs_teacher_layers(&self) -> bool {
        matches!(
            self,
            KdVariant::L9K500 | KdVariant::L9Feature | KdVariant::AvgFeature
        )
    }
}

/// Frozen extractor parameters, a pure function of the seed.
#[derive(Debug, Clone)]
pub struct TeacherParams {
    pub seed: u64,
    pub n_layers: usize,
    pub feat_dim: usize,
    pub frame_samples: usize,
    weights: Vec<Tensor<f32>>,
    biases: Vec<Tensor<f32>>,
}

impl TeacherParams {
    pub fn new(seed: u64, n_layers: usize, feat_dim: usize, frame_samples: usize) -> Self {
        let mut weights = Vec::with_capacity(n_layers);
        let mut biases = Vec::with_capacity(n_layers);
        let scale = 1.4 / (feat_dim as f64).sqrt();
        for layer in 0..n_layers {
            let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "teacher-layer", layer as u64));
            weights.push(Tensor::randn(vec![feat_dim, feat_dim], scale, &mut rng));
            biases.push(Tensor::randn(vec![feat_dim], 0.2, &mut rng));
        }
        TeacherParams {
            seed,
            n_layers,
            feat_dim,
            frame_samples,
            weights,
            biases,
        }
    }

    pub fn frame_rate_hz(&self) -> f32 {
        TEACHER_RATE as f32 / self.frame_samples as f32
    }
}

/// The distillation target handed to the loss: either a token sequence or
/// a per-channel-normalized feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub enum TeacherTarget {
    Discrete {
        tokens: Vec<u32>,
        classes: usize,
        variant: KdVariant,
    },
    Continuous {
        feats: FeatureSequence,
        variant: KdVariant,
    },
}

impl TeacherTarget {
    pub fn frames(&self) -> usize {
        match self {
            TeacherTarget::Discrete { tokens, .. } => tokens.len(),
            TeacherTarget::Continuous { feats, .. } => feats.frames(),
        }
    }

    pub fn variant(&self) -> KdVariant {
        match self {
            TeacherTarget::Discrete { variant, .. } => *variant,
            TeacherTarget::Continuous { variant, .. } => *variant,
        }
    }

    /// Width of the prediction the KD head must produce.
    pub fn head_dim(&self) -> usize {
        match self {
            TeacherTarget::Discrete { classes, .. } => *classes,
            TeacherTarget::Continuous { feats, .. } => feats.channels(),
        }
    }
}

/// Per-frame log-band-energy base features followed by the frozen tanh
/// projection stack. Returns all `n_layers` layer outputs.
pub fn teacher_layers(wave: &Waveform, params: &TeacherParams) -> Result<Vec<FeatureSequence>> {
    if wave.sample_rate_hz != TEACHER_RATE {
        return Err(Error::contract(format!(
            "teacher expects {TEACHER_RATE} Hz input, got {} (resample first)",
            wave.sample_rate_hz
        )));
    }
    let frames = wave.len() / params.frame_samples;
    if frames == 0 {
        return Err(Error::contract(format!(
            "waveform shorter than one teacher frame ({} samples)",
            params.frame_samples
        )));
    }
    instrument::count(instrument::Counter::TeacherEvals);

    let c = params.feat_dim;
    let base = base_features(wave, params, frames);

    let mut layers = Vec::with_capacity(params.n_layers);
    let mut prev = base;
    for layer in 0..params.n_layers {
        let w = &params.weights[layer];
        let b = &params.biases[layer];
        let mut next = vec![0.0f32; frames * c];
        for t in 0..frames {
            let row = &prev[t * c..(t + 1) * c];
            let out = &mut next[t * c..(t + 1) * c];
            for j in 0..c {
                let mut acc = b.data()[j] as f64;
                for (i, &v) in row.iter().enumerate() {
                    acc += v as f64 * w.at2(i, j) as f64;
                }
                out[j] = acc.tanh() as f32;
            }
        }
        layers.push(FeatureSequence::new(
            next.clone(),
            frames,
            c,
            params.frame_rate_hz(),
            FeatureKind::TeacherLayer,
        ));
        prev = next;
    }
    Ok(layers)
}

/// Log band energies of non-overlapping frames, shifted into a range the
/// tanh stack keeps active.
fn base_features(wave: &Waveform, params: &TeacherParams, frames: usize) -> Vec<f32> {
    let fs = params.frame_samples;
    let c = params.feat_dim;
    let fft_len = fs.next_power_of_two();
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(fft_len);
    let window: Vec<f32> = (0..fs)
        .map(|n| {
            let ph = 2.0 * std::f64::consts::PI * n as f64 / fs as f64;
            (0.5 * (1.0 - ph.cos())) as f32
        })
        .collect();
    let bins = fft_len / 2 + 1;
    let mut out = vec![0.0f32; frames * c];
    let mut buf = vec![Complex::new(0.0f32, 0.0); fft_len];
    for t in 0..frames {
        for slot in buf.iter_mut() {
            *slot = Complex::new(0.0, 0.0);
        }
        for i in 0..fs {
            buf[i] = Complex::new(wave.samples[t * fs + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for band in 0..c {
            let lo = band * bins / c;
            let hi = ((band + 1) * bins / c).max(lo + 1);
            let mut energy = 0.0f64;
            for bin in lo..hi.min(bins) {
                energy += buf[bin].norm_sqr() as f64;
            }
            energy /= (hi - lo) as f64;
            out[t * c + band] = (((1e-6 + energy).ln() + 8.0) / 4.0) as f32;
        }
    }
    out
}

/// Assemble the distillation target for one sample.
///
/// `spectral_target` is the prepared compressed-magnitude STFT (full-band
/// or band-limited) and is only consulted by the spectral variants.
pub fn select_kd_target(
    layers: &[FeatureSequence],
    variant: KdVariant,
    codebook: Option<&KMeansCodebook>,
    spectral_target: Option<&FeatureSequence>,
) -> Result<TeacherTarget> {
    match variant {
        KdVariant::None => Err(Error::contract("no distillation target for kd=none")),
        KdVariant::L9Feature => {
            let l9 = layer_9(layers)?;
            Ok(TeacherTarget::Continuous {
                feats: per_channel_normalize(l9),
                variant,
            })
        }
        KdVariant::AvgFeature => {
            let first = layers
                .first()
                .ok_or_else(|| Error::contract("teacher layers are empty"))?;
            let (t, c) = (first.frames(), first.channels());
            let mut mean = vec![0.0f32; t * c];
            for layer in layers {
                for (m, &v) in mean.iter_mut().zip(layer.data()) {
                    *m += v;
                }
            }
            let inv = 1.0 / layers.len() as f32;
            for m in &mut mean {
                *m *= inv;
            }
            let avg =
                FeatureSequence::new(mean, t, c, first.frame_rate_hz, FeatureKind::TeacherLayer);
            Ok(TeacherTarget::Continuous {
                feats: per_channel_normalize(&avg),
                variant,
            })
        }
        KdVariant::L9K500 => {
            let codebook = codebook.ok_or_else(|| {
                Error::contract("kd=l9-k500 needs a fitted k-means codebook (run train-teacher)")
            })?;
            let l9 = layer_9(layers)?;
            let tokens = kmeans_assign(l9.data(), l9.channels(), codebook);
            Ok(TeacherTarget::Discrete {
                tokens,
                classes: codebook.k(),
                variant,
            })
        }
        KdVariant::StftFull | KdVariant::StftLow => {
            let target = spectral_target
                .ok_or_else(|| Error::contract("spectral kd variant needs an STFT target"))?;
            Ok(TeacherTarget::Continuous {
                feats: per_channel_normalize(target),
                variant,
            })
        }
    }
}

/// The 9th layer, 1-based as in "the 9th transformer block".
fn layer_9(layers: &[FeatureSequence]) -> Result<&FeatureSequence> {
    layers
        .get(8)
        .ok_or_else(|| Error::contract("teacher produced fewer than 9 layers"))
}

/// Value-level distillation loss for evaluation: mean cross-entropy for
/// discrete targets (given `[T_t, classes]` logits), MSE for continuous.
pub fn kd_loss(prediction: &FeatureSequence, target: &TeacherTarget) -> Result<f64> {
    if prediction.frames() != target.frames() {
        return Err(Error::contract(format!(
            "prediction has {} frames, target {} (pool first)",
            prediction.frames(),
            target.frames()
        )));
    }
    match target {
        TeacherTarget::Continuous { feats, .. } => {
            if prediction.channels() != feats.channels() {
                return Err(Error::contract("prediction/target channel mismatch"));
            }
            let mut s = 0.0f64;
            for (&p, &t) in prediction.data().iter().zip(feats.data()) {
                let d = p as f64 - t as f64;
                s += d * d;
            }
            Ok(s / prediction.data().len() as f64)
        }
        TeacherTarget::Discrete {
            tokens, classes, ..
        } => {
            if prediction.channels() != *classes {
                return Err(Error::contract("logit width does not match classes"));
            }
            let mut s = 0.0f64;
            for (t, &token) in tokens.iter().enumerate() {
                let mut row: Vec<f64> = prediction.row(t).iter().map(|&v| v as f64).collect();
                softmax_in_place(&mut row);
                s += -row[token as usize].max(1e-300).ln();
            }
            Ok(s / tokens.len() as f64)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn speechish(seconds: f64, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = (TEACHER_RATE as f64 * seconds) as usize;
        let samples = (0..n)
            .map(|i| {
                let t = i as f32 / TEACHER_RATE as f32;
                0.3 * (2.0 * std::f32::consts::PI * 150.0 * t).sin()
                    + 0.1 * rng.gen_range(-1.0f32..1.0)
            })
            .collect();
        Waveform::new(samples, TEACHER_RATE).unwrap()
    }

    fn params() -> TeacherParams {
        TeacherParams::new(11, 12, 16, 320)
    }

    #[test]
    fn deterministic_given_wave_and_seed() {
        let wave = speechish(0.5, 1);
        let p = params();
        let a = teacher_layers(&wave, &p).unwrap();
        let b = teacher_layers(&wave, &p).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn frame_count_is_length_over_hop() {
        let p = params();
        let wave = speechish(4.0, 2);
        let layers = teacher_layers(&wave, &p).unwrap();
        assert_eq!(layers[0].frames(), 64_000 / 320);
        for layer in &layers {
            assert_eq!(layer.frames(), 200);
            assert_eq!(layer.channels(), 16);
        }
        assert_eq!(layers.len(), 12);
    }

    #[test]
    fn layers_differ_from_each_other() {
        let wave = speechish(0.5, 3);
        let layers = teacher_layers(&wave, &params()).unwrap();
        let l0 = layers[0].data();
        let l9 = layers[8].data();
        let diff: f32 = l0.iter().zip(l9).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-3);
    }

    #[test]
    fn rejects_wrong_sample_rate() {
        let wave = Waveform::new(vec![0.1; 8000], 8000).unwrap();
        assert!(teacher_layers(&wave, &params()).is_err());
    }

    #[test]
    fn avg_equals_l9_when_layers_identical() {
        let layer = FeatureSequence::new(
            vec![0.5, -1.0, 2.0, 0.25, 1.5, -0.5],
            3,
            2,
            50.0,
            FeatureKind::TeacherLayer,
        );
        let layers: Vec<FeatureSequence> = (0..12).map(|_| layer.clone()).collect();
        let avg = select_kd_target(&layers, KdVariant::AvgFeature, None, None).unwrap();
        let l9 = select_kd_target(&layers, KdVariant::L9Feature, None, None).unwrap();
        assert_eq!(avg.head_dim(), l9.head_dim());
        match (avg, l9) {
            (
                TeacherTarget::Continuous { feats: a, .. },
                TeacherTarget::Continuous { feats: b, .. },
            ) => assert_eq!(a.data(), b.data()),
            _ => panic!("expected continuous targets"),
        }
    }

    #[test]
    fn avg_feature_is_normalized_per_channel() {
        let wave = speechish(1.0, 4);
        let layers = teacher_layers(&wave, &params()).unwrap();
        let target = select_kd_target(&layers, KdVariant::AvgFeature, None, None).unwrap();
        let TeacherTarget::Continuous { feats, .. } = target else {
            panic!()
        };
        let t = feats.frames() as f64;
        for c in 0..feats.channels() {
            let mean: f64 = (0..feats.frames()).map(|r| feats.row(r)[c] as f64).sum::<f64>() / t;
            let var: f64 = (0..feats.frames())
                .map(|r| (feats.row(r)[c] as f64 - mean).powi(2))
                .sum::<f64>()
                / t;
            assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "channel {c} var {var}");
        }
    }

    #[test]
    fn frame_on_centroid_gets_its_token() {
        let wave = speechish(0.5, 5);
        let layers = teacher_layers(&wave, &params()).unwrap();
        let l9 = &layers[8];
        // Build a codebook whose centroid 3 is exactly frame 7 of layer 9.
        let k = 5;
        let mut cent = vec![0.0f32; k * l9.channels()];
        for c in 0..k {
            let src = if c == 3 { 7 } else { c };
            cent[c * l9.channels()..(c + 1) * l9.channels()].copy_from_slice(l9.row(src));
        }
        let book = KMeansCodebook {
            centroids: Tensor::new(vec![k, l9.channels()], cent),
            iterations: 1,
            inertia: 0.0,
            seed: 0,
        };
        let target = select_kd_target(&layers, KdVariant::L9K500, Some(&book), None).unwrap();
        let TeacherTarget::Discrete { tokens, .. } = target else {
            panic!()
        };
        assert_eq!(tokens[7], 3);
    }

    #[test]
    fn missing_codebook_is_actionable() {
        let wave = speechish(0.5, 6);
        let layers = teacher_layers(&wave, &params()).unwrap();
        let err = select_kd_target(&layers, KdVariant::L9K500, None, None).unwrap_err();
        assert!(err.to_string().contains("train-teacher"));
    }

    #[test]
    fn kd_loss_trivial_values() {
        let feats = FeatureSequence::new(
            vec![0.1, -0.2, 0.3, 0.4],
            2,
            2,
            50.0,
            FeatureKind::TeacherLayer,
        );
        let target = TeacherTarget::Continuous {
            feats: feats.clone(),
            variant: KdVariant::L9Feature,
        };
        assert_eq!(kd_loss(&feats, &target).unwrap(), 0.0);

        let mut off = feats.clone();
        for t in 0..off.frames() {
            for v in off.row_mut(t) {
                *v += 1.0;
            }
        }
        assert!((kd_loss(&off, &target).unwrap() - 1.0).abs() < 1e-6);

        // Uniform logits over 500 classes -> ln 500.
        let logits = FeatureSequence::new(vec![0.0; 2 * 500], 2, 500, 50.0, FeatureKind::TeacherLayer);
        let discrete = TeacherTarget::Discrete {
            tokens: vec![3, 499],
            classes: 500,
            variant: KdVariant::L9K500,
        };
        assert!((kd_loss(&logits, &discrete).unwrap() - 500f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn kd_loss_rejects_length_mismatch() {
        let feats = FeatureSequence::new(vec![0.0; 4], 2, 2, 50.0, FeatureKind::TeacherLayer);
        let short = FeatureSequence::new(vec![0.0; 2], 1, 2, 50.0, FeatureKind::TeacherLayer);
        let target = TeacherTarget::Continuous {
            feats,
            variant: KdVariant::AvgFeature,
        };
        assert!(kd_loss(&short, &target).is_err());
    }

    #[test]
    fn variant_parsing_roundtrips() {
        for name in ["none", "l9-k500", "l9-feature", "avg-feature", "stft-full", "stft-low"] {
            assert_eq!(KdVariant::parse(name).unwrap().name(), name);
        }
        assert!(KdVariant::parse("bogus").is_err());
    }
}
