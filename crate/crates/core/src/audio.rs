//! Waveforms, WAV file I/O, and sample-rate conversion.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Mono audio at a known sample rate. Samples nominally live in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::contract("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::numeric("waveform contains non-finite samples"));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz as f64
    }

    pub fn peak(&self) -> f32 {
        self.samples.iter().fold(0.0f32, |m, &s| m.max(s.abs()))
    }

    pub fn rms_power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>()
            / self.samples.len() as f64
    }
}

/// Sample encodings accepted on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavEncoding {
    Pcm16,
    Float32,
}

/// Read a mono PCM-16 or IEEE float-32 WAV file. Anything else is
/// rejected with a format error naming the offending layout.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut header = [0u8; 12];
    file.read_exact(&mut header)?;
    if &header[0..4] != b"RIFF" || &header[8..12] != b"WAVE" {
        return Err(Error::format("not a RIFF/WAVE file"));
    }

    let mut format: Option<(u16, u16, u32, u16)> = None;
    let mut data: Option<Vec<u8>> = None;
    loop {
        let mut chunk_header = [0u8; 8];
        match file.read_exact(&mut chunk_header) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let chunk_id = &chunk_header[0..4];
        let size = u32::from_le_bytes(chunk_header[4..8].try_into().unwrap()) as usize;
        match chunk_id {
            b"fmt " => {
                let mut body = vec![0u8; size];
                file.read_exact(&mut body)?;
                if size < 16 {
                    return Err(Error::format("fmt chunk too short"));
                }
                let audio_format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                format = Some((audio_format, channels, rate, bits));
            }
            b"data" => {
                let mut body = vec![0u8; size];
                file.read_exact(&mut body)?;
                data = Some(body);
                if size % 2 == 1 {
                    let mut pad = [0u8; 1];
                    let _ = file.read(&mut pad);
                }
            }
            _ => {
                // Skip unknown chunks (word-aligned).
                let skip = size + (size % 2);
                std::io::copy(&mut file.by_ref().take(skip as u64), &mut std::io::sink())?;
            }
        }
    }

    let (audio_format, channels, rate, bits) =
        format.ok_or_else(|| Error::format("missing fmt chunk"))?;
    let data = data.ok_or_else(|| Error::format("missing data chunk"))?;
    if channels != 1 {
        return Err(Error::format(format!(
            "only mono is supported, file has {channels} channels"
        )));
    }
    let samples = match (audio_format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|b| i16::from_le_bytes([b[0], b[1]]) as f32 / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect(),
        (fmt, bits) => {
            return Err(Error::format(format!(
                "unsupported WAV layout: format tag {fmt}, {bits}-bit"
            )))
        }
    };
    Waveform::new(samples, rate)
}

/// Write a mono WAV file in the requested encoding. Float-32 round-trips
/// bit-exactly; PCM-16 clamps and rounds.
pub fn write_wav(path: impl AsRef<Path>, wave: &Waveform, encoding: WavEncoding) -> Result<()> {
    let mut payload: Vec<u8> = Vec::with_capacity(wave.len() * 4);
    let (format_tag, bits): (u16, u16) = match encoding {
        WavEncoding::Pcm16 => {
            for &s in &wave.samples {
                let v = (s.clamp(-1.0, 1.0) * 32767.0).round() as i16;
                payload.extend_from_slice(&v.to_le_bytes());
            }
            (1, 16)
        }
        WavEncoding::Float32 => {
            for &s in &wave.samples {
                payload.extend_from_slice(&s.to_le_bytes());
            }
            (3, 32)
        }
    };
    let block_align = bits / 8;
    let byte_rate = wave.sample_rate_hz * block_align as u32;

    let mut out = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    out.write_all(b"RIFF")?;
    out.write_all(&(36 + payload.len() as u32).to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&format_tag.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?;
    out.write_all(&wave.sample_rate_hz.to_le_bytes())?;
    out.write_all(&byte_rate.to_le_bytes())?;
    out.write_all(&block_align.to_le_bytes())?;
    out.write_all(&bits.to_le_bytes())?;
    out.write_all(b"data")?;
    out.write_all(&(payload.len() as u32).to_le_bytes())?;
    out.write_all(&payload)?;
    Ok(())
}

const RESAMPLE_TAPS: i64 = 64;

/// Windowed-sinc resampling, band-limited below the smaller Nyquist.
pub fn resample(wave: &Waveform, target_rate_hz: u32) -> Result<Waveform> {
    if target_rate_hz == 0 {
        return Err(Error::contract("target sample rate must be positive"));
    }
    if target_rate_hz == wave.sample_rate_hz {
        return Ok(wave.clone());
    }
    let src = wave.sample_rate_hz as f64;
    let dst = target_rate_hz as f64;
    let ratio = dst / src;
    // Cutoff in cycles per input sample, with margin for the transition band.
    let fc = 0.5 * ratio.min(1.0) * 0.97;
    let out_len = (wave.len() as f64 * ratio).round() as usize;
    let x = &wave.samples;
    let mut out = Vec::with_capacity(out_len);
    let w = RESAMPLE_TAPS;
    for n in 0..out_len {
        let t = n as f64 / ratio;
        let k0 = t.floor() as i64;
        let mut acc = 0.0f64;
        for k in (k0 - w + 1)..=(k0 + w) {
            if k < 0 || k as usize >= x.len() {
                continue;
            }
            let u = t - k as f64;
            acc += x[k as usize] as f64 * sinc_kernel(u, fc, w as f64);
        }
        out.push(acc as f32);
    }
    Waveform::new(out, target_rate_hz)
}

fn sinc_kernel(u: f64, fc: f64, half_width: f64) -> f64 {
    if u.abs() >= half_width {
        return 0.0;
    }
    // Blackman window over [-half_width, half_width].
    let a = std::f64::consts::PI * u / half_width;
    let window = 0.42 + 0.5 * a.cos() + 0.08 * (2.0 * a).cos();
    2.0 * fc * sinc(2.0 * fc * u) * window
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tone(freq: f64, rate: u32, seconds: f64, amp: f32) -> Waveform {
        let n = (rate as f64 * seconds) as usize;
        let samples = (0..n)
            .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / rate as f64).sin() as f32)
            .collect();
        Waveform::new(samples, rate).unwrap()
    }

    #[test]
    fn float32_wav_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let wave = tone(440.0, 16000, 0.25, 0.7);
        write_wav(&path, &wave, WavEncoding::Float32).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.sample_rate_hz, 16000);
        assert_eq!(back.samples, wave.samples);
    }

    #[test]
    fn pcm16_wav_roundtrip_is_close() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.wav");
        let wave = tone(440.0, 16000, 0.1, 0.5);
        write_wav(&path, &wave, WavEncoding::Pcm16).unwrap();
        let back = read_wav(&path).unwrap();
        for (a, b) in wave.samples.iter().zip(&back.samples) {
            assert!((a - b).abs() < 1.0 / 32000.0);
        }
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.wav");
        // Hand-build a 2-channel header.
        let mut bytes: Vec<u8> = Vec::new();
        bytes.extend_from_slice(b"RIFF");
        bytes.extend_from_slice(&40u32.to_le_bytes());
        bytes.extend_from_slice(b"WAVEfmt ");
        bytes.extend_from_slice(&16u32.to_le_bytes());
        bytes.extend_from_slice(&1u16.to_le_bytes());
        bytes.extend_from_slice(&2u16.to_le_bytes());
        bytes.extend_from_slice(&16000u32.to_le_bytes());
        bytes.extend_from_slice(&64000u32.to_le_bytes());
        bytes.extend_from_slice(&4u16.to_le_bytes());
        bytes.extend_from_slice(&16u16.to_le_bytes());
        bytes.extend_from_slice(b"data");
        bytes.extend_from_slice(&4u32.to_le_bytes());
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        std::fs::write(&path, bytes).unwrap();
        let err = read_wav(&path).unwrap_err();
        assert!(err.to_string().contains("mono"));
    }

    #[test]
    fn resample_same_rate_is_identity() {
        let wave = tone(440.0, 16000, 0.1, 0.5);
        let out = resample(&wave, 16000).unwrap();
        assert_eq!(out.samples, wave.samples);
    }

    #[test]
    fn resample_preserves_tone_amplitude() {
        // 1 kHz tone, 44.1k -> 16k; sine-fit the interior and compare amplitude.
        let wave = tone(1000.0, 44100, 0.5, 0.6);
        let out = resample(&wave, 16000).unwrap();
        let trim = 800;
        let interior = &out.samples[trim..out.len() - trim];
        let amp = sine_fit_amplitude(interior, 1000.0, 16000.0, trim);
        assert!(
            (amp - 0.6).abs() / 0.6 < 0.01,
            "amplitude after resample: {amp}"
        );
    }

    #[test]
    fn resample_rejects_out_of_band_energy() {
        // 6 kHz tone downsampled to 8 kHz (Nyquist 4 kHz) must vanish.
        let wave = tone(6000.0, 16000, 0.5, 0.8);
        let out = resample(&wave, 8000).unwrap();
        let in_power = wave.rms_power();
        let trim = 400;
        let interior = &out.samples[trim..out.len() - trim];
        let out_power = interior.iter().map(|&s| (s as f64).powi(2)).sum::<f64>()
            / interior.len() as f64;
        assert!(
            out_power < in_power * 1e-4,
            "stop-band residual {out_power} vs {in_power}"
        );
    }

    fn sine_fit_amplitude(samples: &[f32], freq: f64, rate: f64, offset: usize) -> f64 {
        let mut ss = 0.0;
        let mut sc = 0.0;
        for (i, &v) in samples.iter().enumerate() {
            let ph = 2.0 * std::f64::consts::PI * freq * (i + offset) as f64 / rate;
            ss += v as f64 * ph.sin();
            sc += v as f64 * ph.cos();
        }
        let n = samples.len() as f64;
        let a = 2.0 * ss / n;
        let b = 2.0 * sc / n;
        (a * a + b * b).sqrt()
    }
}
