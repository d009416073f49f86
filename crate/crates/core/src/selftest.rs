//! Named invariant checks behind the `selftest` command: quick,
//! self-contained verifications of the schedule, masking, codec, k-means,
//! optimizer, and I/O layers.

use crate::error::{Error, Result};

pub struct Check {
    pub name: &'static str,
    pub run: fn() -> Result<()>,
}

fn ensure(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::numeric(msg.to_string()))
    }
}

fn check_cosine_schedule() -> Result<()> {
    let c0 = crate::masking::cosine_ratio(0.0)?;
    let c1 = crate::masking::cosine_ratio(1.0)?;
    ensure(c0 == 1.0 && c1.abs() < 1e-15, "cosine endpoints wrong")?;
    let mut prev = c0;
    for i in 1..=50 {
        let v = crate::masking::cosine_ratio(i as f64 / 50.0)?;
        ensure(v < prev, "cosine not strictly decreasing")?;
        prev = v;
    }
    Ok(())
}

fn check_masked_count_schedule() -> Result<()> {
    for m0 in [1usize, 7, 1000] {
        for i in 0..20 {
            let got = crate::sampler::scheduled_remaining(i, 20, m0);
            let want = ((std::f64::consts::PI * (i + 1) as f64 / 40.0).cos() * m0 as f64).floor()
                as usize;
            ensure(got == want, "schedule mismatch")?;
        }
        ensure(
            crate::sampler::scheduled_remaining(19, 20, m0) == 0,
            "schedule does not reach zero",
        )?;
    }
    Ok(())
}

fn check_token_mask_counts() -> Result<()> {
    let plan = crate::masking::token_mask(9, 100, 0.5, 0)?;
    ensure(plan.masked_count() == 450, "token mask count wrong")?;
    let full = crate::masking::token_mask(3, 7, 1.0, 1)?;
    ensure(full.masked_count() == 21, "full mask count wrong")
}

fn check_num_spans() -> Result<()> {
    ensure(crate::masking::num_spans(0.5, 100, 10)? == 7, "num_spans(0.5,100,10) != 7")?;
    ensure(crate::masking::num_spans(0.0, 100, 10)? == 0, "num_spans at zero ratio")?;
    ensure(crate::masking::num_spans(0.8, 64, 64)? == 1, "single full-row span")
}

fn check_guided_logits() -> Result<()> {
    let l = vec![0.25f32, -1.5, 3.0];
    ensure(
        crate::sampler::guided_logits(&l, &[9.0, 9.0, 9.0], 0.0) == l,
        "w=0 must return conditional logits",
    )?;
    ensure(
        crate::sampler::guided_logits(&[2.0], &[1.0], 1.0) == vec![3.0],
        "guidance formula broken",
    )
}

fn check_kmeans_brute_case() -> Result<()> {
    let book = crate::kmeans::kmeans_fit(&[0.0, 1.0, 8.0, 9.0], 1, 2, 50, 11)?;
    let mut cents = [book.centroids.at2(0, 0), book.centroids.at2(1, 0)];
    cents.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ensure(cents == [0.5, 8.5], "k-means {0,1,8,9} centroids wrong")
}

fn check_rvq_determinism() -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let corpus: Vec<f32> = (0..100 * 8).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let a = crate::codec::rvq_train(&corpus, 8, 2, 8, 4, 3, 16000, 256)?;
    let b = crate::codec::rvq_train(&corpus, 8, 2, 8, 4, 3, 16000, 256)?;
    ensure(a == b, "RVQ training is not deterministic")?;
    for w in a.train_mse.windows(2) {
        ensure(w[1] <= w[0] * (1.0 + 1e-9), "stage MSE increased")?;
    }
    Ok(())
}

fn check_adam_fixed_point() -> Result<()> {
    use crate::adam::{adam_step, AdamConfig, AdamState};
    let mut p = crate::nn::ParamSet::<f64>::new();
    p.insert("w", crate::tensor::Tensor::scalar(1.5));
    let mut st = AdamState::new(&p);
    let mut g = crate::nn::GradMap::new();
    g.insert("w".into(), crate::tensor::Tensor::scalar(0.7));
    adam_step(&mut p, &g, &mut st, &AdamConfig { lr: 0.0, ..Default::default() })?;
    ensure(p.get("w").item() == 1.5, "adam with lr=0 moved parameters")
}

fn check_checkpoint_roundtrip() -> Result<()> {
    use crate::checkpoint::{Checkpoint, Record};
    let mut ck = Checkpoint::new();
    ck.insert(
        "x",
        Record::F32(crate::tensor::Tensor::new(vec![3], vec![1.0, -2.5, 1e-20])),
    );
    let mut buf = Vec::new();
    ck.write_to(&mut buf)?;
    let back = Checkpoint::read_from(&mut buf.as_slice())?;
    let mut buf2 = Vec::new();
    back.write_to(&mut buf2)?;
    ensure(buf == buf2, "checkpoint bytes not stable")
}

fn check_wav_roundtrip() -> Result<()> {
    let dir = std::env::temp_dir().join(format!("maskgram-selftest-{}", std::process::id()));
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("probe.wav");
    let wave = crate::distortion::synth_clean(1, 0.05, 16000)?;
    crate::audio::write_wav(&path, &wave, crate::audio::WavEncoding::Float32)?;
    let back = crate::audio::read_wav(&path)?;
    let _ = std::fs::remove_file(&path);
    ensure(back.samples == wave.samples, "float-32 WAV round trip changed samples")
}

fn check_pe_values() -> Result<()> {
    let pe: crate::tensor::Tensor<f64> = crate::nn::sinusoidal_pe(2, 4)?;
    ensure(pe.row(0) == [0.0, 1.0, 0.0, 1.0], "PE row 0 wrong")?;
    ensure(
        (pe.at2(1, 0) - 1f64.sin()).abs() < 1e-12,
        "PE row 1 wrong",
    )
}

fn check_stft_channels() -> Result<()> {
    let stft = crate::features::Stft::new(2048, 512)?;
    ensure(stft.bins() == 1025, "2048-point analysis must give 1025 bins")
}

fn check_embedding_export() -> Result<()> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
    let corpus: Vec<f32> = (0..120 * 10).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    let codec = crate::codec::rvq_train(&corpus, 10, 2, 8, 4, 4, 16000, 256)?;
    let tables = crate::codec::export_embedding_init(&codec, 6, 9)?;
    for (q, table) in tables.iter().enumerate() {
        for j in 0..8u32 {
            let dec = codec.stages[q].decode_token(j);
            ensure(
                table.row(j as usize) == &dec[..6],
                "embedding row is not the projected codeword prefix",
            )?;
        }
    }
    Ok(())
}

pub fn all_checks() -> Vec<Check> {
    vec![
        Check { name: "cosine-schedule", run: check_cosine_schedule },
        Check { name: "masked-count-schedule", run: check_masked_count_schedule },
        Check { name: "token-mask-counts", run: check_token_mask_counts },
        Check { name: "num-spans", run: check_num_spans },
        Check { name: "guided-logits", run: check_guided_logits },
        Check { name: "kmeans-brute-case", run: check_kmeans_brute_case },
        Check { name: "rvq-determinism", run: check_rvq_determinism },
        Check { name: "adam-fixed-point", run: check_adam_fixed_point },
        Check { name: "checkpoint-roundtrip", run: check_checkpoint_roundtrip },
        Check { name: "wav-roundtrip", run: check_wav_roundtrip },
        Check { name: "positional-encoding", run: check_pe_values },
        Check { name: "stft-channels", run: check_stft_channels },
        Check { name: "embedding-export", run: check_embedding_export },
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn every_selftest_passes() {
        for check in super::all_checks() {
            (check.run)().unwrap_or_else(|e| panic!("{} failed: {e}", check.name));
        }
    }
}
