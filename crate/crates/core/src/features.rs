//! Spectral feature extraction and normalization: compressed-magnitude
//! STFT, per-bin batch statistics, spectral distillation targets, adaptive
//! pooling, and per-sample channel normalization.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::graph::pool_window;

pub const VAR_FLOOR: f32 = 1e-5;
/// Power-law compression exponent for magnitude spectra.
pub const COMPRESS_EXP: f32 = 0.3;
/// Fraction of bins kept for the band-limited spectral target
/// (372/1025 at the full-scale analysis size).
pub const LOW_BAND_RATIO: f64 = 372.0 / 1025.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureKind {
    StftCompressed,
    EncoderLatent,
    TeacherLayer,
    CodecFeature,
}

/// A T x C frame matrix with its frame rate and a channel-meaning tag.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    data: Vec<f32>,
    frames: usize,
    channels: usize,
    pub frame_rate_hz: f32,
    pub kind: FeatureKind,
}

impl FeatureSequence {
    pub fn new(
        data: Vec<f32>,
        frames: usize,
        channels: usize,
        frame_rate_hz: f32,
        kind: FeatureKind,
    ) -> Self {
        assert_eq!(data.len(), frames * channels, "frame grid size mismatch");
        assert!(frames >= 1, "feature sequence needs at least one frame");
        FeatureSequence {
            data,
            frames,
            channels,
            frame_rate_hz,
            kind,
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn row_mut(&mut self, t: usize) -> &mut [f32] {
        &mut self.data[t * self.channels..(t + 1) * self.channels]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// STFT analysis/synthesis state: Hann window, center reflect padding,
/// `T = 1 + floor(len/hop)` frames, `n_fft/2 + 1` bins.
pub struct Stft {
    pub n_fft: usize,
    pub hop: usize,
    window: Vec<f32>,
    forward: Arc<dyn Fft<f32>>,
    inverse: Arc<dyn Fft<f32>>,
}

impl Stft {
    pub fn new(n_fft: usize, hop: usize) -> Result<Self> {
        if n_fft < hop || hop == 0 {
            return Err(Error::contract(format!(
                "invalid framing: n_fft {n_fft}, hop {hop}"
            )));
        }
        let mut planner = FftPlanner::new();
        let window = (0..n_fft)
            .map(|n| {
                let phase = 2.0 * std::f64::consts::PI * n as f64 / n_fft as f64;
                (0.5 * (1.0 - phase.cos())) as f32
            })
            .collect();
        Ok(Stft {
            n_fft,
            hop,
            window,
            forward: planner.plan_fft_forward(n_fft),
            inverse: planner.plan_fft_inverse(n_fft),
        })
    }

    pub fn bins(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn frame_rate(&self, sample_rate_hz: u32) -> f32 {
        sample_rate_hz as f32 / self.hop as f32
    }

    fn padded(&self, samples: &[f32]) -> Vec<f32> {
        let half = self.n_fft / 2;
        let n = samples.len() as i64;
        let mut out = Vec::with_capacity(samples.len() + 2 * half);
        for i in -(half as i64)..(n + half as i64) {
            out.push(samples[reflect_index(i, n)]);
        }
        out
    }

    /// Complex spectra of every frame.
    pub fn analyze(&self, samples: &[f32]) -> Result<Vec<Vec<Complex<f32>>>> {
        if samples.is_empty() {
            return Err(Error::contract("cannot analyze an empty waveform"));
        }
        let padded = self.padded(samples);
        let frames = self.num_frames(samples.len());
        let mut out = Vec::with_capacity(frames);
        let mut buf = vec![Complex::new(0.0f32, 0.0); self.n_fft];
        for f in 0..frames {
            let start = f * self.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = Complex::new(padded[start + i] * self.window[i], 0.0);
            }
            self.forward.process(&mut buf);
            out.push(buf[..self.bins()].to_vec());
        }
        Ok(out)
    }

    /// Weighted overlap-add inverse; returns exactly `out_len` samples.
    pub fn synthesize(&self, spectra: &[Vec<Complex<f32>>], out_len: usize) -> Vec<f32> {
        let half = self.n_fft / 2;
        let total = (spectra.len() - 1) * self.hop + self.n_fft;
        let mut acc = vec![0.0f64; total];
        let mut wsum = vec![0.0f64; total];
        let mut buf = vec![Complex::new(0.0f32, 0.0); self.n_fft];
        let scale = 1.0 / self.n_fft as f32;
        for (f, spec) in spectra.iter().enumerate() {
            // Rebuild the full Hermitian spectrum from the half bins.
            for i in 0..self.bins() {
                buf[i] = spec[i];
            }
            for i in self.bins()..self.n_fft {
                buf[i] = spec[self.n_fft - i].conj();
            }
            self.inverse.process(&mut buf);
            let start = f * self.hop;
            for i in 0..self.n_fft {
                let w = self.window[i] as f64;
                acc[start + i] += (buf[i].re * scale) as f64 * w;
                wsum[start + i] += w * w;
            }
        }
        let mut out = Vec::with_capacity(out_len);
        for i in 0..out_len {
            let j = i + half;
            let denom = if j < wsum.len() { wsum[j].max(1e-8) } else { 1.0 };
            let v = if j < acc.len() { acc[j] / denom } else { 0.0 };
            out.push(v as f32);
        }
        out
    }
}

fn reflect_index(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut j = i.rem_euclid(period);
    if j >= n {
        j = period - j;
    }
    j as usize
}

/// Power-law compressed magnitude STFT.
pub fn stft_compressed(
    wave: &Waveform,
    stft: &Stft,
    exponent: f32,
) -> Result<FeatureSequence> {
    let spectra = stft.analyze(&wave.samples)?;
    let bins = stft.bins();
    let mut data = Vec::with_capacity(spectra.len() * bins);
    for frame in &spectra {
        for c in frame {
            data.push(c.norm().powf(exponent));
        }
    }
    Ok(FeatureSequence::new(
        data,
        spectra.len(),
        bins,
        stft.frame_rate(wave.sample_rate_hz),
        FeatureKind::StftCompressed,
    ))
}

/// Invert the power-law compression back to linear magnitudes.
pub fn decompress_magnitude(feats: &FeatureSequence, exponent: f32) -> Vec<f32> {
    feats
        .data()
        .iter()
        .map(|&v| v.max(0.0).powf(1.0 / exponent))
        .collect()
}

/// Running per-bin statistics of the 1-D batch normalization layer that
/// feeds the encoder. The trainable affine lives in the parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats {
    pub mean: Vec<f32>,
    pub var: Vec<f32>,
    pub momentum: f32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

impl NormStats {
    pub fn new(channels: usize, momentum: f32) -> Self {
        NormStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            momentum,
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Per-bin mean and floored variance over every frame in the batch.
    pub fn batch_stats(batch: &[&FeatureSequence]) -> (Vec<f32>, Vec<f32>) {
        let channels = batch[0].channels();
        let total: usize = batch.iter().map(|f| f.frames()).sum();
        let mut mean = vec![0.0f64; channels];
        for feats in batch {
            for t in 0..feats.frames() {
                for (m, &v) in mean.iter_mut().zip(feats.row(t)) {
                    *m += v as f64;
                }
            }
        }
        for m in &mut mean {
            *m /= total as f64;
        }
        let mut var = vec![0.0f64; channels];
        for feats in batch {
            for t in 0..feats.frames() {
                for ((s, &v), m) in var.iter_mut().zip(feats.row(t)).zip(&mean) {
                    let d = v as f64 - m;
                    *s += d * d;
                }
            }
        }
        for s in &mut var {
            *s /= total as f64;
        }
        (
            mean.iter().map(|&m| m as f32).collect(),
            var.iter().map(|&v| (v as f32).max(VAR_FLOOR)).collect(),
        )
    }

    /// Fold fresh batch statistics into the running estimates.
    pub fn update(&mut self, batch_mean: &[f32], batch_var: &[f32]) {
        let m = self.momentum;
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = ((1.0 - m) * *r + m * b).max(VAR_FLOOR);
        }
    }
}

/// `(x - mean) / sqrt(var)` per bin with the supplied statistics.
pub fn normalize_with(feats: &FeatureSequence, mean: &[f32], var: &[f32]) -> FeatureSequence {
    assert_eq!(feats.channels(), mean.len());
    let inv: Vec<f32> = var.iter().map(|&v| 1.0 / v.max(VAR_FLOOR).sqrt()).collect();
    let mut out = feats.clone();
    for t in 0..out.frames() {
        for ((v, m), s) in out.row_mut(t).iter_mut().zip(mean).zip(&inv) {
            *v = (*v - m) * s;
        }
    }
    out
}

/// Spec-shaped batch-norm entry point: train mode normalizes by this
/// batch's own statistics and updates the running ones; eval mode uses the
/// running statistics. `gain`/`bias` are the affine parameters.
pub fn per_bin_normalize(
    feats: &FeatureSequence,
    stats: &mut NormStats,
    mode: NormMode,
    gain: &[f32],
    bias: &[f32],
) -> Result<FeatureSequence> {
    if feats.channels() != stats.channels() {
        return Err(Error::contract(format!(
            "normalization stats have {} channels, features {}",
            stats.channels(),
            feats.channels()
        )));
    }
    let mut out = match mode {
        NormMode::Train => {
            let (m, v) = NormStats::batch_stats(&[feats]);
            let normed = normalize_with(feats, &m, &v);
            stats.update(&m, &v);
            normed
        }
        NormMode::Eval => normalize_with(feats, &stats.mean, &stats.var),
    };
    for t in 0..out.frames() {
        for ((v, &g), &b) in out.row_mut(t).iter_mut().zip(gain).zip(bias) {
            *v = *v * g + b;
        }
    }
    Ok(out)
}

/// Keep the first `round(C * ratio)` bins: the band-limited spectral
/// distillation target (372 of 1025 at full scale).
pub fn low_band_target(feats: &FeatureSequence, ratio: f64) -> Result<FeatureSequence> {
    let channels = feats.channels();
    let keep = (channels as f64 * ratio).round() as usize;
    if keep == 0 || keep > channels {
        return Err(Error::contract(format!(
            "cannot take {keep} low-band channels from {channels}"
        )));
    }
    let mut data = Vec::with_capacity(feats.frames() * keep);
    for t in 0..feats.frames() {
        data.extend_from_slice(&feats.row(t)[..keep]);
    }
    Ok(FeatureSequence::new(
        data,
        feats.frames(),
        keep,
        feats.frame_rate_hz,
        feats.kind,
    ))
}

/// Length alignment by proportional mean pooling over frames.
pub fn adaptive_avg_pool(feats: &FeatureSequence, t_out: usize) -> Result<FeatureSequence> {
    if t_out == 0 {
        return Err(Error::contract("adaptive pooling needs T_out >= 1"));
    }
    let (t_in, c) = (feats.frames(), feats.channels());
    let mut data = vec![0.0f32; t_out * c];
    for t in 0..t_out {
        let (s, e) = pool_window(t, t_in, t_out);
        for r in s..e {
            for (o, &v) in data[t * c..(t + 1) * c].iter_mut().zip(feats.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / (e - s) as f32;
        for o in &mut data[t * c..(t + 1) * c] {
            *o *= inv;
        }
    }
    let rate = feats.frame_rate_hz * t_out as f32 / t_in as f32;
    Ok(FeatureSequence::new(data, t_out, c, rate, feats.kind))
}

/// Normalize each channel to zero mean and unit variance over this
/// sample's frames (statistics from the sample itself).
pub fn per_channel_normalize(feats: &FeatureSequence) -> FeatureSequence {
    let (t, c) = (feats.frames(), feats.channels());
    let mut mean = vec![0.0f64; c];
    for r in 0..t {
        for (m, &v) in mean.iter_mut().zip(feats.row(r)) {
            *m += v as f64;
        }
    }
    for m in &mut mean {
        *m /= t as f64;
    }
    let mut var = vec![0.0f64; c];
    for r in 0..t {
        for ((s, &v), m) in var.iter_mut().zip(feats.row(r)).zip(&mean) {
            let d = v as f64 - m;
            *s += d * d;
        }
    }
    let inv: Vec<f32> = var
        .iter()
        .map(|&s| 1.0 / ((s / t as f64) as f32).max(VAR_FLOOR).sqrt())
        .collect();
    let mut out = feats.clone();
    for r in 0..t {
        for ((v, m), s) in out.row_mut(r).iter_mut().zip(&mean).zip(&inv) {
            *v = (*v - *m as f32) * s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feats(rows: &[&[f32]]) -> FeatureSequence {
        let channels = rows[0].len();
        let data: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        FeatureSequence::new(data, rows.len(), channels, 50.0, FeatureKind::TeacherLayer)
    }

    fn noise_wave(len: usize, rate: u32, seed: u64) -> Waveform {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..len).map(|_| rng.gen_range(-0.5f32..0.5)).collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn silence_maps_to_zero_features() {
        let stft = Stft::new(256, 64).unwrap();
        let wave = Waveform::new(vec![0.0; 1000], 8000).unwrap();
        let f = stft_compressed(&wave, &stft, COMPRESS_EXP).unwrap();
        assert!(f.data().iter().all(|&v| v == 0.0));
        assert_eq!(f.frames(), 1 + 1000 / 64);
    }

    #[test]
    fn full_scale_analysis_has_1025_channels() {
        let stft = Stft::new(2048, 512).unwrap();
        assert_eq!(stft.bins(), 1025);
        let wave = noise_wave(4096, 44100, 0);
        let f = stft_compressed(&wave, &stft, COMPRESS_EXP).unwrap();
        assert_eq!(f.channels(), 1025);
    }

    #[test]
    fn compression_follows_power_law() {
        // A bin magnitude of 32 compresses to 32^0.3 = 2^1.5.
        let stft = Stft::new(256, 64).unwrap();
        let rate = 8000u32;
        // Put a tone exactly on bin 32; scale so the windowed DFT magnitude is 32.
        let bin = 32usize;
        let freq = bin as f64 * rate as f64 / 256.0;
        let wsum: f64 = (0..256)
            .map(|n| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / 256.0).cos()))
            .sum();
        let amp = 2.0 * 32.0 / wsum;
        let samples: Vec<f32> = (0..1024)
            .map(|i| (amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).cos()) as f32)
            .collect();
        let wave = Waveform::new(samples, rate).unwrap();
        let f = stft_compressed(&wave, &stft, COMPRESS_EXP).unwrap();
        // Interior frame, away from padding.
        let mid = f.frames() / 2;
        let got = f.row(mid)[bin];
        let expected = 2.0f32.powf(1.5);
        assert!(
            (got - expected).abs() / expected < 0.01,
            "compressed magnitude {got} vs {expected}"
        );
    }

    #[test]
    fn stft_is_hop_shift_covariant() {
        let stft = Stft::new(256, 64).unwrap();
        let wave = noise_wave(4000, 8000, 1);
        let shifted = Waveform::new(wave.samples[64..].to_vec(), 8000).unwrap();
        let a = stft_compressed(&wave, &stft, COMPRESS_EXP).unwrap();
        let b = stft_compressed(&shifted, &stft, COMPRESS_EXP).unwrap();
        // Interior frames only: padding differs near the edges.
        for k in 4..b.frames() - 4 {
            for c in 0..a.channels() {
                assert!(
                    (b.row(k)[c] - a.row(k + 1)[c]).abs() < 1e-5,
                    "frame {k} bin {c}"
                );
            }
        }
    }

    #[test]
    fn istft_reconstructs_interior() {
        let stft = Stft::new(256, 64).unwrap();
        let wave = noise_wave(2000, 8000, 2);
        let spectra = stft.analyze(&wave.samples).unwrap();
        let back = stft.synthesize(&spectra, wave.len());
        for i in 300..wave.len() - 300 {
            assert!(
                (back[i] - wave.samples[i]).abs() < 1e-3,
                "sample {i}: {} vs {}",
                back[i],
                wave.samples[i]
            );
        }
    }

    #[test]
    fn batch_norm_train_mode_standardizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f32> = (0..500 * 4).map(|_| rng.gen_range(-2.0f32..5.0)).collect();
        let f = FeatureSequence::new(data, 500, 4, 50.0, FeatureKind::StftCompressed);
        let mut stats = NormStats::new(4, 0.01);
        let gain = vec![1.0; 4];
        let bias = vec![0.0; 4];
        let out = per_bin_normalize(&f, &mut stats, NormMode::Train, &gain, &bias).unwrap();
        let (m, v) = NormStats::batch_stats(&[&out]);
        for c in 0..4 {
            assert!(m[c].abs() < 1e-4, "mean {}", m[c]);
            assert!((v[c] - 1.0).abs() < 1e-3, "var {}", v[c]);
        }
    }

    #[test]
    fn batch_norm_eval_mode_uses_running_stats() {
        let mut stats = NormStats::new(2, 0.01);
        stats.mean = vec![3.0, -1.0];
        stats.var = vec![4.0, 0.25];
        let f = feats(&[&[3.0, -1.0]]);
        let out = per_bin_normalize(&f, &mut stats, NormMode::Eval, &[1.0, 1.0], &[0.0, 0.0])
            .unwrap();
        assert!(out.row(0).iter().all(|&v| v.abs() < 1e-7));
    }

    #[test]
    fn constant_channel_floors_variance() {
        let f = feats(&[&[7.0, 1.0], &[7.0, 2.0], &[7.0, 3.0]]);
        let mut stats = NormStats::new(2, 0.01);
        let out = per_bin_normalize(&f, &mut stats, NormMode::Train, &[1.0, 1.0], &[0.0, 0.0])
            .unwrap();
        for t in 0..3 {
            assert_eq!(out.row(t)[0], 0.0);
            assert!(out.row(t)[1].is_finite());
        }
    }

    #[test]
    fn low_band_keeps_372_of_1025() {
        let f = FeatureSequence::new(
            vec![0.5; 2 * 1025],
            2,
            1025,
            86.13,
            FeatureKind::StftCompressed,
        );
        let low = low_band_target(&f, LOW_BAND_RATIO).unwrap();
        assert_eq!(low.channels(), 372);
        assert_eq!(low.frames(), 2);
        // Bin 371 stays below the 8 kHz Nyquist of 16 kHz speech.
        let bin_hz = 22050.0 / 1024.0;
        assert!(371.0 * bin_hz <= 8000.0);
    }

    #[test]
    fn low_band_proportional_on_other_sizes() {
        let f = FeatureSequence::new(vec![0.0; 257], 1, 257, 62.5, FeatureKind::StftCompressed);
        let low = low_band_target(&f, LOW_BAND_RATIO).unwrap();
        assert_eq!(low.channels(), (257.0f64 * LOW_BAND_RATIO).round() as usize);
    }

    #[test]
    fn pooling_matches_window_examples() {
        let f = feats(&[&[0.0], &[2.0], &[4.0], &[6.0]]);
        let out = adaptive_avg_pool(&f, 2).unwrap();
        assert_eq!(out.row(0), &[1.0]);
        assert_eq!(out.row(1), &[5.0]);

        let f3 = feats(&[&[0.0], &[3.0], &[9.0]]);
        let out = adaptive_avg_pool(&f3, 2).unwrap();
        assert_eq!(out.row(0), &[1.5]);
        assert_eq!(out.row(1), &[6.0]);
    }

    #[test]
    fn pooling_preserves_constants_and_divisible_means() {
        let f = feats(&[&[2.5], &[2.5], &[2.5], &[2.5], &[2.5], &[2.5]]);
        let out = adaptive_avg_pool(&f, 4).unwrap();
        assert!(out.data().iter().all(|&v| v == 2.5));

        let f = feats(&[&[1.0], &[2.0], &[3.0], &[4.0], &[5.0], &[6.0]]);
        let out = adaptive_avg_pool(&f, 3).unwrap();
        let global_in: f32 = f.data().iter().sum::<f32>() / 6.0;
        let global_out: f32 = out.data().iter().sum::<f32>() / 3.0;
        assert!((global_in - global_out).abs() < 1e-6);
    }

    #[test]
    fn per_channel_normalize_known_case() {
        let f = feats(&[&[1.0], &[3.0]]);
        let out = per_channel_normalize(&f);
        assert!((out.row(0)[0] + 1.0).abs() < 1e-6);
        assert!((out.row(1)[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn per_channel_normalize_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..40 * 3).map(|_| rng.gen_range(-4.0f32..9.0)).collect();
        let f = FeatureSequence::new(data, 40, 3, 50.0, FeatureKind::TeacherLayer);
        let once = per_channel_normalize(&f);
        let twice = per_channel_normalize(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn per_channel_normalize_zeroes_constant_channels() {
        let f = feats(&[&[5.0, 1.0], &[5.0, 2.0]]);
        let out = per_channel_normalize(&f);
        assert_eq!(out.row(0)[0], 0.0);
        assert_eq!(out.row(1)[0], 0.0);
    }
}
