//! Run configuration: the preset constants every other module consumes,
//! a diff-friendly key=value text format, and layered resolution
//! (preset defaults, then file, then flag overrides).

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{KdHead, ModelConfig};
use crate::sampler::ConfidenceSource;
use crate::teacher::KdVariant;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: String,

    // model
    pub d: usize,
    pub n_heads: usize,
    pub encoder_blocks: usize,
    pub generator_blocks: usize,
    pub mlp_mult: usize,

    // codec
    pub codec_stages: usize,
    pub codebook_size: usize,
    pub code_dim: usize,

    // teacher
    pub teacher_dim: usize,
    pub teacher_clusters: usize,
    pub teacher_layers: usize,
    pub teacher_frame_samples: usize,
    pub teacher_seed: u64,

    // distillation / masking
    pub kd_variant: KdVariant,
    pub span_length: usize,

    // sampler
    pub iterations: usize,
    pub guidance_w: f64,
    pub noise_v0: f64,
    pub window_seconds: f64,
    pub confidence: ConfidenceSource,

    // audio analysis
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub low_band_ratio: f64,

    // training
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub cond_drop_prob: f64,
    pub seed: u64,
    pub init_embed_from_codec: bool,

    // data synthesis
    pub clips: usize,
    pub heldout_clips: usize,
    pub clip_seconds: f64,
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub bandwidth_min_hz: f64,
    pub bandwidth_max_hz: f64,
    pub clip_ratio_min: f64,
    pub clip_ratio_max: f64,
    pub reverb_rt60_s: f64,
    pub noise_color: String,
    pub distortion_stages: String,
}

impl RunConfig {
    /// Desk-scale defaults: everything trains and decodes in minutes on a
    /// laptop CPU.
    pub fn toy() -> Self {
        RunConfig {
            preset: "toy".into(),
            d: 64,
            n_heads: 4,
            encoder_blocks: 2,
            generator_blocks: 2,
            mlp_mult: 4,
            codec_stages: 4,
            codebook_size: 64,
            code_dim: 8,
            teacher_dim: 32,
            teacher_clusters: 50,
            teacher_layers: 12,
            teacher_frame_samples: 320,
            teacher_seed: 7,
            kd_variant: KdVariant::AvgFeature,
            span_length: 0,
            iterations: 20,
            guidance_w: 1.0,
            noise_v0: 4.0,
            window_seconds: 1.0,
            confidence: ConfidenceSource::GuidedLogit,
            sample_rate: 16_000,
            n_fft: 512,
            hop: 256,
            low_band_ratio: 372.0 / 1025.0,
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-3,
            cond_drop_prob: 0.1,
            seed: 42,
            init_embed_from_codec: true,
            clips: 200,
            heldout_clips: 20,
            clip_seconds: 1.0,
            snr_min_db: 5.0,
            snr_max_db: 20.0,
            bandwidth_min_hz: 2000.0,
            bandwidth_max_hz: 6000.0,
            clip_ratio_min: 0.1,
            clip_ratio_max: 0.5,
            reverb_rt60_s: 0.0,
            noise_color: "white".into(),
            distortion_stages: "noise,bandlimit".into(),
        }
    }

    /// Full-scale constants as published; not runnable at desk scale but
    /// kept as the reference configuration.
    pub fn paper() -> Self {
        RunConfig {
            preset: "paper".into(),
            d: 512,
            n_heads: 16,
            encoder_blocks: 6,
            generator_blocks: 8,
            mlp_mult: 4,
            codec_stages: 9,
            codebook_size: 1024,
            code_dim: 8,
            teacher_dim: 768,
            teacher_clusters: 500,
            teacher_layers: 12,
            teacher_frame_samples: 320,
            teacher_seed: 7,
            kd_variant: KdVariant::AvgFeature,
            span_length: 0,
            iterations: 20,
            guidance_w: 1.0,
            noise_v0: 4.0,
            window_seconds: 4.0,
            confidence: ConfidenceSource::GuidedLogit,
            sample_rate: 44_100,
            n_fft: 2048,
            hop: 512,
            low_band_ratio: 372.0 / 1025.0,
            steps: 800_000,
            batch_size: 128,
            learning_rate: 1e-4,
            cond_drop_prob: 0.1,
            seed: 42,
            init_embed_from_codec: true,
            clips: 720_000,
            heldout_clips: 1000,
            clip_seconds: 4.0,
            snr_min_db: -5.0,
            snr_max_db: 20.0,
            bandwidth_min_hz: 1000.0,
            bandwidth_max_hz: 22_050.0,
            clip_ratio_min: 0.1,
            clip_ratio_max: 0.5,
            reverb_rt60_s: 0.4,
            noise_color: "white".into(),
            distortion_stages: "all".into(),
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::contract(format!(
                "unknown preset '{other}' (expected toy or paper)"
            ))),
        }
    }

    pub fn stft_channels(&self) -> usize {
        self.n_fft / 2 + 1
    }

    pub fn low_band_channels(&self) -> usize {
        (self.stft_channels() as f64 * self.low_band_ratio).round() as usize
    }

    /// KD head geometry implied by the configured variant.
    pub fn kd_head(&self) -> Option<KdHead> {
        match self.kd_variant {
            KdVariant::None => None,
            KdVariant::L9K500 => Some(KdHead::Discrete {
                classes: self.teacher_clusters,
            }),
            KdVariant::L9Feature | KdVariant::AvgFeature => Some(KdHead::Continuous {
                dim: self.teacher_dim,
            }),
            KdVariant::StftFull => Some(KdHead::Continuous {
                dim: self.stft_channels(),
            }),
            KdVariant::StftLow => Some(KdHead::Continuous {
                dim: self.low_band_channels(),
            }),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            n_heads: self.n_heads,
            n_blocks_encoder: self.encoder_blocks,
            n_blocks_generator: self.generator_blocks,
            mlp_mult: self.mlp_mult,
            vocab_k: self.codebook_size,
            num_codebooks_q: self.codec_stages,
            max_t: 1 + (self.window_seconds * self.sample_rate as f64) as usize / self.hop,
            in_channels: self.stft_channels(),
            kd_head: self.kd_head(),
        }
    }

    /// Canonical text form; `parse_text` of the result reproduces the
    /// config exactly.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("config_version = {CONFIG_VERSION}\n"));
        s.push_str(&format!("preset = {}\n", self.preset));
        s.push_str("\n[model]\n");
        s.push_str(&format!("d = {}\n", self.d));
        s.push_str(&format!("n_heads = {}\n", self.n_heads));
        s.push_str(&format!("encoder_blocks = {}\n", self.encoder_blocks));
        s.push_str(&format!("generator_blocks = {}\n", self.generator_blocks));
        s.push_str(&format!("mlp_mult = {}\n", self.mlp_mult));
        s.push_str("\n[codec]\n");
        s.push_str(&format!("codec_stages = {}\n", self.codec_stages));
        s.push_str(&format!("codebook_size = {}\n", self.codebook_size));
        s.push_str(&format!("code_dim = {}\n", self.code_dim));
        s.push_str("\n[teacher]\n");
        s.push_str(&format!("teacher_dim = {}\n", self.teacher_dim));
        s.push_str(&format!("teacher_clusters = {}\n", self.teacher_clusters));
        s.push_str(&format!("teacher_layers = {}\n", self.teacher_layers));
        s.push_str(&format!(
            "teacher_frame_samples = {}\n",
            self.teacher_frame_samples
        ));
        s.push_str(&format!("teacher_seed = {}\n", self.teacher_seed));
        s.push_str("\n[distillation]\n");
        s.push_str(&format!("kd_variant = {}\n", self.kd_variant.name()));
        s.push_str(&format!("span_length = {}\n", self.span_length));
        s.push_str("\n[sampler]\n");
        s.push_str(&format!("iterations = {}\n", self.iterations));
        s.push_str(&format!("guidance_w = {}\n", self.guidance_w));
        s.push_str(&format!("noise_v0 = {}\n", self.noise_v0));
        s.push_str(&format!("window_seconds = {}\n", self.window_seconds));
        s.push_str(&format!(
            "confidence = {}\n",
            match self.confidence {
                ConfidenceSource::GuidedLogit => "guided-logit",
                ConfidenceSource::LogProb => "log-prob",
            }
        ));
        s.push_str("\n[audio]\n");
        s.push_str(&format!("sample_rate = {}\n", self.sample_rate));
        s.push_str(&format!("n_fft = {}\n", self.n_fft));
        s.push_str(&format!("hop = {}\n", self.hop));
        s.push_str(&format!("low_band_ratio = {}\n", self.low_band_ratio));
        s.push_str("\n[training]\n");
        s.push_str(&format!("steps = {}\n", self.steps));
        s.push_str(&format!("batch_size = {}\n", self.batch_size));
        s.push_str(&format!("learning_rate = {}\n", self.learning_rate));
        s.push_str(&format!("cond_drop_prob = {}\n", self.cond_drop_prob));
        s.push_str(&format!("seed = {}\n", self.seed));
        s.push_str(&format!(
            "init_embed_from_codec = {}\n",
            self.init_embed_from_codec
        ));
        s.push_str("\n[data]\n");
        s.push_str(&format!("clips = {}\n", self.clips));
        s.push_str(&format!("heldout_clips = {}\n", self.heldout_clips));
        s.push_str(&format!("clip_seconds = {}\n", self.clip_seconds));
        s.push_str(&format!("snr_min_db = {}\n", self.snr_min_db));
        s.push_str(&format!("snr_max_db = {}\n", self.snr_max_db));
        s.push_str(&format!("bandwidth_min_hz = {}\n", self.bandwidth_min_hz));
        s.push_str(&format!("bandwidth_max_hz = {}\n", self.bandwidth_max_hz));
        s.push_str(&format!("clip_ratio_min = {}\n", self.clip_ratio_min));
        s.push_str(&format!("clip_ratio_max = {}\n", self.clip_ratio_max));
        s.push_str(&format!("reverb_rt60_s = {}\n", self.reverb_rt60_s));
        s.push_str(&format!("noise_color = {}\n", self.noise_color));
        s.push_str(&format!("distortion_stages = {}\n", self.distortion_stages));
        s
    }

    /// Apply `key = value` lines on top of this config. Section headers
    /// are cosmetic; unknown or duplicate keys are rejected by name.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut seen: HashMap<String, ()> = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line.starts_with('[') && line.ends_with(']') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::contract(format!("config line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if seen.insert(key.to_string(), ()).is_some() {
                return Err(Error::contract(format!("duplicate config key '{key}'")));
            }
            self.apply_key(key, value)?;
        }
        Ok(())
    }

    pub fn apply_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn p<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::contract(format!("bad value '{value}' for key '{key}'")))
        }
        match key {
            "config_version" => {
                let v: u32 = p(key, value)?;
                if v != CONFIG_VERSION {
                    return Err(Error::contract(format!(
                        "config version {v} unsupported (expected {CONFIG_VERSION})"
                    )));
                }
            }
            "preset" => {
                // Re-seed all defaults, keeping later keys free to override.
                *self = RunConfig::preset(value)?;
            }
            "d" => self.d = p(key, value)?,
            "n_heads" => self.n_heads = p(key, value)?,
            "encoder_blocks" => self.encoder_blocks = p(key, value)?,
            "generator_blocks" => self.generator_blocks = p(key, value)?,
            "mlp_mult" => self.mlp_mult = p(key, value)?,
            "codec_stages" => self.codec_stages = p(key, value)?,
            "codebook_size" => self.codebook_size = p(key, value)?,
            "code_dim" => self.code_dim = p(key, value)?,
            "teacher_dim" => self.teacher_dim = p(key, value)?,
            "teacher_clusters" => self.teacher_clusters = p(key, value)?,
            "teacher_layers" => self.teacher_layers = p(key, value)?,
            "teacher_frame_samples" => self.teacher_frame_samples = p(key, value)?,
            "teacher_seed" => self.teacher_seed = p(key, value)?,
            "kd_variant" => self.kd_variant = KdVariant::parse(value)?,
            "span_length" => self.span_length = p(key, value)?,
            "iterations" => self.iterations = p(key, value)?,
            "guidance_w" => self.guidance_w = p(key, value)?,
            "noise_v0" => self.noise_v0 = p(key, value)?,
            "window_seconds" => self.window_seconds = p(key, value)?,
            "confidence" => {
                self.confidence = match value {
                    "guided-logit" => ConfidenceSource::GuidedLogit,
                    "log-prob" => ConfidenceSource::LogProb,
                    other => {
                        return Err(Error::contract(format!(
                            "unknown confidence source '{other}'"
                        )))
                    }
                }
            }
            "sample_rate" => self.sample_rate = p(key, value)?,
            "n_fft" => self.n_fft = p(key, value)?,
            "hop" => self.hop = p(key, value)?,
            "low_band_ratio" => self.low_band_ratio = p(key, value)?,
            "steps" => self.steps = p(key, value)?,
            "batch_size" => self.batch_size = p(key, value)?,
            "learning_rate" => self.learning_rate = p(key, value)?,
            "cond_drop_prob" => self.cond_drop_prob = p(key, value)?,
            "seed" => self.seed = p(key, value)?,
            "init_embed_from_codec" => self.init_embed_from_codec = p(key, value)?,
            "clips" => self.clips = p(key, value)?,
            "heldout_clips" => self.heldout_clips = p(key, value)?,
            "clip_seconds" => self.clip_seconds = p(key, value)?,
            "snr_min_db" => self.snr_min_db = p(key, value)?,
            "snr_max_db" => self.snr_max_db = p(key, value)?,
            "bandwidth_min_hz" => self.bandwidth_min_hz = p(key, value)?,
            "bandwidth_max_hz" => self.bandwidth_max_hz = p(key, value)?,
            "clip_ratio_min" => self.clip_ratio_min = p(key, value)?,
            "clip_ratio_max" => self.clip_ratio_max = p(key, value)?,
            "reverb_rt60_s" => self.reverb_rt60_s = p(key, value)?,
            "noise_color" => self.noise_color = value.to_string(),
            "distortion_stages" => self.distortion_stages = value.to_string(),
            other => {
                return Err(Error::contract(format!("unknown config key '{other}'")));
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>, base: RunConfig) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = base;
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        if self.hop == 0 || self.n_fft < self.hop {
            return Err(Error::contract("invalid n_fft/hop"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.cond_drop_prob) {
            return Err(Error::contract("cond_drop_prob outside [0, 1]"));
        }
        if self.kd_variant.needs_teacher_layers() && self.teacher_layers < 9 {
            return Err(Error::contract(
                "feature distillation needs at least 9 teacher layers",
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_text_roundtrip_is_exact() {
        let cfg = RunConfig::toy();
        let mut back = RunConfig::toy();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(cfg, back);

        let paper = RunConfig::paper();
        let mut back = RunConfig::toy();
        back.apply_text(&paper.to_text()).unwrap();
        assert_eq!(paper, back);
    }

    #[test]
    fn later_keys_override_earlier() {
        let mut cfg = RunConfig::toy();
        cfg.apply_text("preset = toy\nd = 32\n").unwrap();
        assert_eq!(cfg.d, 32);
    }

    #[test]
    fn unknown_and_duplicate_keys_are_rejected_by_name() {
        let mut cfg = RunConfig::toy();
        let err = cfg.apply_text("bogus_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("bogus_key"));

        let mut cfg = RunConfig::toy();
        let err = cfg.apply_text("d = 8\nd = 16\n").unwrap_err();
        assert!(err.to_string().contains("duplicate"));
    }

    #[test]
    fn kd_head_geometry_tracks_variant() {
        let mut cfg = RunConfig::toy();
        cfg.kd_variant = KdVariant::None;
        assert!(cfg.kd_head().is_none());
        cfg.kd_variant = KdVariant::L9K500;
        assert_eq!(cfg.kd_head(), Some(KdHead::Discrete { classes: 50 }));
        cfg.kd_variant = KdVariant::StftFull;
        assert_eq!(cfg.kd_head(), Some(KdHead::Continuous { dim: 257 }));
        cfg.kd_variant = KdVariant::StftLow;
        assert_eq!(cfg.kd_head(), Some(KdHead::Continuous { dim: 93 }));
    }

    #[test]
    fn presets_validate() {
        RunConfig::toy().validate().unwrap();
        RunConfig::paper().validate().unwrap();
    }
}
