//! Line-delimited dataset manifests: one record per sample with its
//! corruption recipe, behind a versioned header. The resolved run
//! configuration is echoed as comment lines for provenance.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::distortion::{DistortionSpec, NoiseColor, StageFlags};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "maskgram-manifest v1";

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: String,
    /// Seed for the synthetic clean clip.
    pub seed: u64,
    pub seconds: f64,
    /// When present, the clean clip is loaded from this path (relative to
    /// the manifest); otherwise it is synthesized from the seed.
    pub clean_path: Option<String>,
    pub spec: DistortionSpec,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
    /// Config lines echoed into the manifest when it was written.
    pub config_echo: Vec<String>,
}

impl Manifest {
    pub fn split(&self, name: &str) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == name).collect()
    }
}

fn stages_to_string(flags: &StageFlags) -> String {
    let mut parts = Vec::new();
    if flags.reverb {
        parts.push("reverb");
    }
    if flags.noise {
        parts.push("noise");
    }
    if flags.clip {
        parts.push("clip");
    }
    if flags.bandlimit {
        parts.push("bandlimit");
    }
    if parts.is_empty() {
        "none".to_string()
    } else {
        parts.join(",")
    }
}

pub fn stages_from_string(s: &str) -> Result<StageFlags> {
    let mut flags = StageFlags::none();
    if s == "none" {
        return Ok(flags);
    }
    if s == "all" {
        return Ok(StageFlags::all());
    }
    for part in s.split(',') {
        match part {
            "reverb" => flags.reverb = true,
            "noise" => flags.noise = true,
            "clip" => flags.clip = true,
            "bandlimit" => flags.bandlimit = true,
            other => {
                return Err(Error::format(format!(
                    "unknown distortion stage '{other}'"
                )))
            }
        }
    }
    Ok(flags)
}

pub fn write_manifest(
    path: impl AsRef<Path>,
    entries: &[ManifestEntry],
    config_text: &str,
) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "{MANIFEST_HEADER}")?;
    for line in config_text.lines() {
        if !line.trim().is_empty() {
            writeln!(out, "#cfg {line}")?;
        }
    }
    for e in entries {
        let mut fields = vec![
            format!("id={}", e.id),
            format!("split={}", e.split),
            format!("seed={}", e.seed),
            format!("seconds={}", e.seconds),
            format!("snr_db={}", e.spec.snr_db),
            format!("bandwidth_hz={}", e.spec.bandwidth_hz),
            format!("clip_ratio={}", e.spec.clip_ratio),
            format!("rt60_s={}", e.spec.reverb_rt60_s),
            format!("dist_seed={}", e.spec.seed),
            format!("noise={}", e.spec.noise.name()),
            format!("stages={}", stages_to_string(&e.spec.stages)),
        ];
        if let Some(p) = &e.clean_path {
            fields.push(format!("clean={p}"));
        }
        writeln!(out, "{}", fields.join(" "))?;
    }
    Ok(())
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let file = std::io::BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::format("empty manifest"))??;
    if header.trim() != MANIFEST_HEADER {
        return Err(Error::format(format!(
            "bad manifest header '{header}' (expected '{MANIFEST_HEADER}')"
        )));
    }
    let mut manifest = Manifest::default();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(cfg) = line.strip_prefix("#cfg ") {
            manifest.config_echo.push(cfg.to_string());
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let mut map = HashMap::new();
        for field in line.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| {
                Error::format(format!("line {}: field '{field}' is not key=value", lineno + 2))
            })?;
            if map.insert(k.to_string(), v.to_string()).is_some() {
                return Err(Error::format(format!(
                    "line {}: duplicate key '{k}'",
                    lineno + 2
                )));
            }
        }
        let take = |key: &str| -> Result<String> {
            map.get(key)
                .cloned()
                .ok_or_else(|| Error::format(format!("line {}: missing key '{key}'", lineno + 2)))
        };
        let parse_f64 = |key: &str| -> Result<f64> {
            take(key)?
                .parse()
                .map_err(|_| Error::format(format!("line {}: bad number for '{key}'", lineno + 2)))
        };
        let parse_u64 = |key: &str| -> Result<u64> {
            take(key)?
                .parse()
                .map_err(|_| Error::format(format!("line {}: bad integer for '{key}'", lineno + 2)))
        };
        let entry = ManifestEntry {
            id: take("id")?,
            split: take("split")?,
            seed: parse_u64("seed")?,
            seconds: parse_f64("seconds")?,
            clean_path: map.get("clean").cloned(),
            spec: DistortionSpec {
                snr_db: parse_f64("snr_db")?,
                bandwidth_hz: parse_f64("bandwidth_hz")?,
                clip_ratio: parse_f64("clip_ratio")?,
                reverb_rt60_s: parse_f64("rt60_s")?,
                seed: parse_u64("dist_seed")?,
                noise: NoiseColor::parse(&take("noise")?)?,
                stages: stages_from_string(&take("stages")?)?,
            },
        };
        let known = [
            "id", "split", "seed", "seconds", "clean", "snr_db", "bandwidth_hz", "clip_ratio",
            "rt60_s", "dist_seed", "noise", "stages",
        ];
        for k in map.keys() {
            if !known.contains(&k.as_str()) {
                return Err(Error::format(format!(
                    "line {}: unknown key '{k}'",
                    lineno + 2
                )));
            }
        }
        manifest.entries.push(entry);
    }
    Ok(manifest)
}
