//! Operator-facing command surface: dataset synthesis, codec/teacher/model
//! training, restoration, evaluation, and verification commands.
//!
//! Logs go to stderr; data goes to files. Exit codes: 0 success, 1
//! contract error, 2 I/O error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use maskgram_core::audio::{read_wav, write_wav, WavEncoding, Waveform};
use maskgram_core::checkpoint::{Checkpoint, Record};
use maskgram_core::codec::{codec_from_checkpoint, codec_to_checkpoint, rvq_train, CodecParams};
use maskgram_core::config::RunConfig;
use maskgram_core::distortion::{lsd, DistortionSpec, NoiseColor};
use maskgram_core::error::{Error, Result};
use maskgram_core::features::{stft_compressed, Stft, COMPRESS_EXP};
use maskgram_core::kmeans::{kmeans_fit, KMeansCodebook};
use maskgram_core::manifest::{
    read_manifest, stages_from_string, write_manifest, Manifest, ManifestEntry,
};
use maskgram_core::masking::token_mask;
use maskgram_core::model::{model_from_checkpoint, model_to_checkpoint, Model};
use maskgram_core::sampler::{restore_waveform, DecodeConfig};
use maskgram_core::seeds;
use maskgram_core::teacher::{teacher_layers, KdVariant, TeacherParams};
use maskgram_core::trainer::{
    heldout_kd_loss, load_clean, prepare_corpus, train_model, PreparedSample, TargetExtractors,
};

#[derive(Parser)]
#[command(
    name = "maskgram",
    about = "Masked acoustic-token modeling for speech restoration",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(flatten)]
    common: CommonArgs,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Preset supplying the default constants.
    #[arg(long, default_value = "toy", global = true)]
    preset: String,

    /// Optional key=value config file layered over the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Individual key=value overrides layered over the file.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    /// Per-window decode telemetry and extra progress logging.
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a clean-speech corpus and its distortion manifest.
    SynthData {
        #[arg(long)]
        out_dir: PathBuf,
        /// Skip writing clean WAV files; clips resynthesize from seeds.
        #[arg(long)]
        no_wavs: bool,
    },
    /// Fit the residual-vector-quantization codec on clean features.
    TrainCodec {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the teacher's k-means codebook on layer-9 features.
    TrainTeacher {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the joint encoder/generator model.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Teacher token codebook (required for --kd l9-k500).
        #[arg(long)]
        kmeans: Option<PathBuf>,
        /// Distillation variant: none, l9-k500, l9-feature, avg-feature,
        /// stft-full, stft-low.
        #[arg(long)]
        kd: Option<String>,
        /// Mask span length in frames (0 = token-level masking).
        #[arg(long)]
        span_length: Option<usize>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Restore a degraded recording.
    Restore {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        /// Classifier-free guidance level w >= 0.
        #[arg(long)]
        guidance: Option<f64>,
        /// Decoding iterations per window.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Measure LSD, masked-token accuracy, and distillation error.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        kmeans: Option<PathBuf>,
        /// Manifest split to evaluate.
        #[arg(long, default_value = "heldout")]
        split: String,
        /// Also run restoration and report restored LSD (slower).
        #[arg(long)]
        restore: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient verification on the toy geometry.
    Gradcheck,
    /// Run every built-in invariant suite.
    Selftest,
}

/// Entry point shared by main() and the tests. Returns the process exit
/// code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems exit 1 (help/version requests exit 0).
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn resolve_config(common: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = RunConfig::preset(&common.preset)?;
    if let Some(path) = &common.config {
        cfg = RunConfig::load(path, cfg)?;
    }
    for kv in &common.set {
        let (key, value) = kv
            .split_once('=')
            .ok_or_else(|| Error::contract(format!("--set '{kv}' is not key=value")))?;
        cfg.apply_key(key.trim(), value.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let verbose = cli.common.verbose;
    match cli.command {
        Command::SynthData { out_dir, no_wavs } => {
            let cfg = resolve_config(&cli.common)?;
            synth_data(&cfg, &out_dir, !no_wavs)
        }
        Command::TrainCodec { manifest, out } => {
            let cfg = resolve_config(&cli.common)?;
            train_codec(&cfg, &manifest, &out)
        }
        Command::TrainTeacher { manifest, out } => {
            let cfg = resolve_config(&cli.common)?;
            train_teacher(&cfg, &manifest, &out)
        }
        Command::Train {
            manifest,
            codec,
            kmeans,
            kd,
            span_length,
            steps,
            out,
        } => {
            let mut cfg = resolve_config(&cli.common)?;
            if let Some(kd) = kd {
                cfg.kd_variant = KdVariant::parse(&kd)?;
            }
            if let Some(l) = span_length {
                cfg.span_length = l;
            }
            if let Some(s) = steps {
                cfg.steps = s;
            }
            cfg.validate()?;
            train(&cfg, &manifest, &codec, kmeans.as_deref(), &out, verbose)
        }
        Command::Restore {
            input,
            out,
            model,
            codec,
            guidance,
            iterations,
        } => restore(&input, &out, &model, &codec, guidance, iterations, verbose),
        Command::Eval {
            manifest,
            model,
            codec,
            kmeans,
            split,
            restore,
            out,
        } => eval(
            &manifest,
            &model,
            &codec,
            kmeans.as_deref(),
            &split,
            restore,
            &out,
        ),
        Command::Gradcheck => gradcheck(),
        Command::Selftest => selftest(),
    }
}

// ---------------------------------------------------------------------

fn synth_data(cfg: &RunConfig, out_dir: &Path, write_wavs: bool) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let clips_dir = out_dir.join("clips");
    if write_wavs {
        std::fs::create_dir_all(&clips_dir)?;
    }
    let noise = NoiseColor::parse(&cfg.noise_color)?;
    let stages = stages_from_string(&cfg.distortion_stages)?;
    let mut entries = Vec::new();
    let total = cfg.clips + cfg.heldout_clips;
    for i in 0..total {
        let split = if i < cfg.clips { "train" } else { "heldout" };
        let seed = seeds::derive(cfg.seed, "clip", i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(seed, "spec", 0));
        let spec = DistortionSpec {
            snr_db: rng.gen_range(cfg.snr_min_db..=cfg.snr_max_db),
            bandwidth_hz: rng.gen_range(cfg.bandwidth_min_hz..=cfg.bandwidth_max_hz),
            clip_ratio: rng.gen_range(cfg.clip_ratio_min..=cfg.clip_ratio_max),
            reverb_rt60_s: cfg.reverb_rt60_s,
            seed: seeds::derive(seed, "dist", 0),
            noise,
            stages,
        };
        let id = format!("{i:05}");
        let clean_path = if write_wavs {
            let rel = format!("clips/clean_{id}.wav");
            let wave =
                maskgram_core::distortion::synth_clean(seed, cfg.clip_seconds, cfg.sample_rate)?;
            write_wav(out_dir.join(&rel), &wave, WavEncoding::Float32)?;
            Some(rel)
        } else {
            None
        };
        entries.push(ManifestEntry {
            id,
            split: split.into(),
            seed,
            seconds: cfg.clip_seconds,
            clean_path,
            spec,
        });
    }
    let manifest_path = out_dir.join("manifest.txt");
    write_manifest(&manifest_path, &entries, &cfg.to_text())?;
    eprintln!(
        "wrote {} train + {} heldout entries to {}",
        cfg.clips,
        cfg.heldout_clips,
        manifest_path.display()
    );
    Ok(())
}

fn clean_features_corpus(
    cfg: &RunConfig,
    manifest: &Manifest,
    base_dir: &Path,
) -> Result<Vec<f32>> {
    let stft = Stft::new(cfg.n_fft, cfg.hop)?;
    let mut frames = Vec::new();
    for entry in manifest.split("train") {
        let clean = load_clean(entry, cfg, base_dir)?;
        let feats = stft_compressed(&clean, &stft, COMPRESS_EXP)?;
        frames.extend_from_slice(feats.data());
    }
    if frames.is_empty() {
        return Err(Error::contract("manifest has no train split"));
    }
    Ok(frames)
}

fn train_codec(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = read_manifest(manifest_path)?;
    let base_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let frames = clean_features_corpus(cfg, &manifest, base_dir)?;
    eprintln!(
        "fitting {}-stage RVQ (K={}) on {} frames",
        cfg.codec_stages,
        cfg.codebook_size,
        frames.len() / cfg.stft_channels()
    );
    let codec = rvq_train(
        &frames,
        cfg.stft_channels(),
        cfg.codec_stages,
        cfg.codebook_size,
        cfg.code_dim,
        seeds::derive(cfg.seed, "codec", 0),
        cfg.sample_rate,
        cfg.hop,
    )?;
    let mut ck = codec_to_checkpoint(&codec);
    ck.insert("meta/config", Record::Bytes(cfg.to_text().into_bytes()));
    ck.save(out)?;
    eprintln!(
        "codec reconstruction MSE by stage: {:?}",
        codec.train_mse
    );
    eprintln!("saved codec to {}", out.display());
    Ok(())
}

fn train_teacher(cfg: &RunConfig, manifest_path: &Path, out: &Path) -> Result<()> {
    let manifest = read_manifest(manifest_path)?;
    let base_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let teacher = TeacherParams::new(
        cfg.teacher_seed,
        cfg.teacher_layers,
        cfg.teacher_dim,
        cfg.teacher_frame_samples,
    );
    let mut frames = Vec::new();
    for entry in manifest.split("train") {
        let clean = load_clean(entry, cfg, base_dir)?;
        let wave16k = maskgram_core::audio::resample(&clean, maskgram_core::teacher::TEACHER_RATE)?;
        let layers = teacher_layers(&wave16k, &teacher)?;
        frames.extend_from_slice(layers[8].data());
    }
    if frames.is_empty() {
        return Err(Error::contract("manifest has no train split"));
    }
    eprintln!(
        "fitting k-means (K={}) on {} teacher frames",
        cfg.teacher_clusters,
        frames.len() / cfg.teacher_dim
    );
    let book = kmeans_fit(
        &frames,
        cfg.teacher_dim,
        cfg.teacher_clusters,
        100,
        seeds::derive(cfg.seed, "kmeans", 0),
    )?;
    let mut ck = book.to_checkpoint();
    ck.insert("meta/config", Record::Bytes(cfg.to_text().into_bytes()));
    ck.save(out)?;
    eprintln!(
        "codebook fitted in {} iterations, inertia {:.3}; saved to {}",
        book.iterations,
        book.inertia,
        out.display()
    );
    Ok(())
}

fn load_codec_checked(path: &Path, cfg: &RunConfig) -> Result<CodecParams> {
    let ck = Checkpoint::load(path)?;
    let codec = codec_from_checkpoint(&ck)?;
    if codec.vocab_k != cfg.codebook_size
        || codec.num_stages() != cfg.codec_stages
        || codec.sample_rate_hz != cfg.sample_rate
        || codec.hop != cfg.hop
    {
        return Err(Error::contract(
            "codec file geometry does not match the active config",
        ));
    }
    Ok(codec)
}

fn load_codebook(path: &Path) -> Result<KMeansCodebook> {
    let ck = Checkpoint::load(path)?;
    KMeansCodebook::from_checkpoint(&ck)
}

fn train(
    cfg: &RunConfig,
    manifest_path: &Path,
    codec_path: &Path,
    kmeans_path: Option<&Path>,
    out: &Path,
    verbose: bool,
) -> Result<()> {
    let manifest = read_manifest(manifest_path)?;
    let base_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let codec = load_codec_checked(codec_path, cfg)?;

    let codebook = match (cfg.kd_variant.needs_codebook(), kmeans_path) {
        (true, Some(path)) => Some(load_codebook(path)?),
        (true, None) => {
            return Err(Error::contract(
                "kd=l9-k500 needs a fitted k-means codebook: run train-teacher and pass --kmeans",
            ))
        }
        (false, _) => None,
    };
    let teacher = cfg.kd_variant.needs_teacher_layers().then(|| {
        TeacherParams::new(
            cfg.teacher_seed,
            cfg.teacher_layers,
            cfg.teacher_dim,
            cfg.teacher_frame_samples,
        )
    });

    let entries = manifest.split("train");
    if entries.is_empty() {
        return Err(Error::contract("manifest has no train split"));
    }
    eprintln!("preparing {} training clips", entries.len());
    let extractors = TargetExtractors {
        codec: &codec,
        teacher: teacher.as_ref(),
        codebook: codebook.as_ref(),
    };
    let corpus = prepare_corpus(&entries, cfg, &extractors, base_dir)?;

    let mut model: Model<f32> = Model::new(cfg.model_config(), cfg.seed)?;
    if cfg.init_embed_from_codec {
        model.init_embeddings_from_codec(&codec, seeds::derive(cfg.seed, "embed-init", 0))?;
    }
    eprintln!(
        "training {} steps (batch {}, lr {}, kd {})",
        cfg.steps,
        cfg.batch_size,
        cfg.learning_rate,
        cfg.kd_variant.name()
    );
    let every = if verbose { 1 } else { 100.max(cfg.steps / 20) };
    train_model(&mut model, &corpus, cfg, |s| {
        if s.step % every == 0 || s.step + 1 == cfg.steps {
            eprintln!("{}", s.tsv_line());
        }
    })?;

    model_to_checkpoint(&model, &cfg.to_text()).save(out)?;
    eprintln!("saved model to {}", out.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<(Model<f32>, RunConfig)> {
    let ck = Checkpoint::load(path)?;
    let (model, config_text) = model_from_checkpoint::<f32>(&ck)?;
    let mut cfg = RunConfig::toy();
    cfg.apply_text(&config_text)?;
    Ok((model, cfg))
}

fn restore(
    input: &Path,
    out: &Path,
    model_path: &Path,
    codec_path: &Path,
    guidance: Option<f64>,
    iterations: Option<usize>,
    verbose: bool,
) -> Result<()> {
    let (model, cfg) = load_model(model_path)?;
    let codec = load_codec_checked(codec_path, &cfg)?;
    let stft = Stft::new(cfg.n_fft, cfg.hop)?;
    let decode = DecodeConfig {
        iterations: iterations.unwrap_or(cfg.iterations),
        guidance_w: guidance.unwrap_or(cfg.guidance_w),
        seed: cfg.seed,
        span_length: cfg.span_length,
        window_seconds: cfg.window_seconds,
        noise_v0: cfg.noise_v0,
        confidence: cfg.confidence,
    };
    let wave = read_wav(input)?;
    if wave.sample_rate_hz != cfg.sample_rate {
        eprintln!(
            "input is {} Hz; resampling to the model rate {} Hz",
            wave.sample_rate_hz, cfg.sample_rate
        );
    }
    let (restored, telemetry) = restore_waveform(&wave, &model, &codec, &stft, &decode)?;
    if verbose {
        for t in &telemetry {
            eprintln!(
                "window {}: {} iterations, masked counts {:?}",
                t.window_index, t.iterations, t.masked_counts
            );
        }
    }
    write_wav(out, &restored, WavEncoding::Float32)?;
    eprintln!(
        "restored {} -> {} ({} windows, w={}, {} iterations)",
        input.display(),
        out.display(),
        telemetry.len(),
        decode.guidance_w,
        decode.iterations
    );
    Ok(())
}

fn eval(
    manifest_path: &Path,
    model_path: &Path,
    codec_path: &Path,
    kmeans_path: Option<&Path>,
    split: &str,
    with_restore: bool,
    out: &Path,
) -> Result<()> {
    let (model, cfg) = load_model(model_path)?;
    let codec = load_codec_checked(codec_path, &cfg)?;
    let manifest = read_manifest(manifest_path)?;
    let base_dir = manifest_path.parent().unwrap_or(Path::new("."));
    let entries = manifest.split(split);
    if entries.is_empty() {
        return Err(Error::contract(format!("manifest has no '{split}' split")));
    }
    let codebook = match (cfg.kd_variant.needs_codebook(), kmeans_path) {
        (true, Some(path)) => Some(load_codebook(path)?),
        (true, None) => {
            return Err(Error::contract(
                "kd=l9-k500 evaluation needs --kmeans (run train-teacher)",
            ))
        }
        (false, _) => None,
    };
    let teacher = cfg.kd_variant.needs_teacher_layers().then(|| {
        TeacherParams::new(
            cfg.teacher_seed,
            cfg.teacher_layers,
            cfg.teacher_dim,
            cfg.teacher_frame_samples,
        )
    });
    let extractors = TargetExtractors {
        codec: &codec,
        teacher: teacher.as_ref(),
        codebook: codebook.as_ref(),
    };
    let corpus = prepare_corpus(&entries, &cfg, &extractors, base_dir)?;
    let stft = Stft::new(cfg.n_fft, cfg.hop)?;
    let decode = DecodeConfig {
        iterations: cfg.iterations,
        guidance_w: cfg.guidance_w,
        seed: cfg.seed,
        span_length: cfg.span_length,
        window_seconds: cfg.window_seconds,
        noise_v0: cfg.noise_v0,
        confidence: cfg.confidence,
    };

    let mut report = String::new();
    report.push_str("id\tlsd_distorted\tlsd_restored\taccuracy\tkd_error\n");
    let (mut sum_ld, mut sum_lr, mut sum_acc, mut sum_kd) = (0.0, 0.0, 0.0, 0.0);
    let mut kd_count = 0usize;
    for (i, sample) in corpus.iter().enumerate() {
        let ld = lsd(&sample.clean, &sample.distorted)?;
        let mask = token_mask(
            sample.target_codegram.stages,
            sample.target_codegram.frames,
            0.5,
            seeds::derive(cfg.seed, "eval-mask", i as u64),
        )?;
        let acc = maskgram_core::model::masked_token_accuracy(
            &model,
            &sample.features,
            &sample.target_codegram,
            &mask,
        )?;
        let kd_err = match &sample.teacher_target {
            Some(target) => {
                let pred = maskgram_core::model::kd_predict_eval(
                    &model,
                    &sample.features,
                    target.frames(),
                )?;
                let v = maskgram_core::teacher::kd_loss(&pred, target)?;
                sum_kd += v;
                kd_count += 1;
                v
            }
            None => f64::NAN,
        };
        let lr = if with_restore {
            let (restored, _) =
                restore_waveform(&sample.distorted, &model, &codec, &stft, &decode)?;
            let v = lsd(&sample.clean, &restored)?;
            sum_lr += v;
            v
        } else {
            f64::NAN
        };
        sum_ld += ld;
        sum_acc += acc;
        report.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
            sample.id, ld, lr, acc, kd_err
        ));
    }
    let n = corpus.len() as f64;
    report.push_str(&format!(
        "mean\t{:.4}\t{:.4}\t{:.4}\t{:.4}\n",
        sum_ld / n,
        if with_restore { sum_lr / n } else { f64::NAN },
        sum_acc / n,
        if kd_count > 0 { sum_kd / kd_count as f64 } else { f64::NAN },
    ));
    let mut file = std::fs::File::create(out)?;
    file.write_all(report.as_bytes())?;
    eprintln!(
        "evaluated {} '{split}' clips: mean distorted LSD {:.4}, accuracy {:.4}{}",
        corpus.len(),
        sum_ld / n,
        sum_acc / n,
        if with_restore {
            format!(", restored LSD {:.4}", sum_lr / n)
        } else {
            String::new()
        }
    );
    eprintln!("report written to {}", out.display());
    Ok(())
}

fn gradcheck() -> Result<()> {
    use maskgram_core::gradcheck::finite_difference_check;
    use maskgram_core::nn::KdHead;
    let started = std::time::Instant::now();
    for (label, head) in [
        ("continuous distillation", KdHead::Continuous { dim: 5 }),
        ("discrete distillation", KdHead::Discrete { classes: 6 }),
    ] {
        let report = finite_difference_check(Some(head), 17)?;
        eprintln!(
            "{label}: {} elements, worst relative error {:.3e} at {}",
            report.elements, report.worst, report.worst_param
        );
        if !report.passes(1e-3) {
            return Err(Error::numeric(format!(
                "gradient check failed: {} at {}",
                report.worst, report.worst_param
            )));
        }
    }
    eprintln!(
        "gradient check passed in {:.1} s",
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn selftest() -> Result<()> {
    let mut failures = 0usize;
    for check in maskgram_core::selftest::all_checks() {
        match (check.run)() {
            Ok(()) => eprintln!("[PASS] {}", check.name),
            Err(e) => {
                failures += 1;
                eprintln!("[FAIL] {}: {e}", check.name);
            }
        }
    }
    if failures > 0 {
        return Err(Error::numeric(format!("{failures} selftest(s) failed")));
    }
    Ok(())
}

// Referenced by integration tests to build tiny artifacts quickly.
pub fn prepared_sample_count(corpus: &[PreparedSample]) -> usize {
    corpus.len()
}

pub fn apply_thread_cap() {
    if let Ok(v) = std::env::var("MASKGRAM_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
