//! Residual vector quantization over compressed-magnitude STFT frames.
//!
//! Each stage projects the running residual to a low-dimensional code
//! space, quantizes it against a k-means codebook, and projects the
//! centroid back with a least-squares output map. Stages are trained
//! greedily and frozen afterwards.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Record};
use crate::error::{Error, Result};
use crate::features::{FeatureKind, FeatureSequence};
use crate::kmeans::{kmeans_assign, kmeans_fit};
use crate::seeds;
use crate::tensor::Tensor;

pub const DEFAULT_CODE_DIM: usize = 8;
const RIDGE_LAMBDA: f64 = 1e-6;

/// Discrete acoustic token grid. Values equal to `vocab_k` are the MASK
/// sentinel; completed grids contain none.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Codegram {
    pub stages: usize,
    pub frames: usize,
    pub vocab_k: u32,
    tokens: Vec<u32>,
}

impl Codegram {
    pub fn new(stages: usize, frames: usize, vocab_k: u32, tokens: Vec<u32>) -> Self {
        assert_eq!(tokens.len(), stages * frames);
        Codegram {
            stages,
            frames,
            vocab_k,
            tokens,
        }
    }

    pub fn filled_mask(stages: usize, frames: usize, vocab_k: u32) -> Self {
        Codegram {
            stages,
            frames,
            vocab_k,
            tokens: vec![vocab_k; stages * frames],
        }
    }

    pub fn mask_token(&self) -> u32 {
        self.vocab_k
    }

    pub fn get(&self, stage: usize, frame: usize) -> u32 {
        self.tokens[stage * self.frames + frame]
    }

    pub fn set(&mut self, stage: usize, frame: usize, token: u32) {
        self.tokens[stage * self.frames + frame] = token;
    }

    pub fn is_masked(&self, stage: usize, frame: usize) -> bool {
        self.get(stage, frame) == self.vocab_k
    }

    pub fn mask_count(&self) -> usize {
        self.tokens.iter().filter(|&&t| t == self.vocab_k).count()
    }

    pub fn has_mask(&self) -> bool {
        self.tokens.iter().any(|&t| t == self.vocab_k)
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    /// Copy with the MASK sentinel written wherever `mask` is true.
    pub fn with_mask_applied(&self, mask: &[bool]) -> Codegram {
        assert_eq!(mask.len(), self.tokens.len());
        let mut out = self.clone();
        for (slot, &m) in out.tokens.iter_mut().zip(mask) {
            if m {
                *slot = self.vocab_k;
            }
        }
        out
    }
}

/// One quantizer stage: input projection, codebook, output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecStage {
    /// `[code_dim, C]` rows are orthonormal.
    pub in_w: Tensor<f32>,
    pub in_b: Tensor<f32>,
    /// `[K, code_dim]`.
    pub codebook: Tensor<f32>,
    /// `[C, code_dim]`.
    pub out_w: Tensor<f32>,
    pub out_b: Tensor<f32>,
}

impl CodecStage {
    fn project(&self, frame: &[f32]) -> Vec<f32> {
        let (code_dim, c) = (self.in_w.rows(), self.in_w.cols());
        let mut out = vec![0.0f32; code_dim];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = self.in_b.data()[j] as f64;
            let row = self.in_w.row(j);
            for i in 0..c {
                acc += row[i] as f64 * frame[i] as f64;
            }
            *o = acc as f32;
        }
        out
    }

    /// `out_proj(codebook[token])`.
    pub fn decode_token(&self, token: u32) -> Vec<f32> {
        let c = self.out_w.rows();
        let code = self.codebook.row(token as usize);
        let mut out = vec![0.0f32; c];
        for (i, o) in out.iter_mut().enumerate() {
            let mut acc = self.out_b.data()[i] as f64;
            let row = self.out_w.row(i);
            for (j, &cv) in code.iter().enumerate() {
                acc += row[j] as f64 * cv as f64;
            }
            *o = acc as f32;
        }
        out
    }

    fn nearest_code(&self, projected: &[f32]) -> u32 {
        let k = self.codebook.rows();
        let mut best = 0u32;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let row = self.codebook.row(c);
            let mut d = 0.0f64;
            for (&p, &q) in projected.iter().zip(row) {
                let diff = p as f64 - q as f64;
                d += diff * diff;
            }
            if d < best_d {
                best_d = d;
                best = c as u32;
            }
        }
        best
    }
}

/// The frozen tokenizer: all stages share the feature dim and codebook
/// size; the frame spacing matches the encoder STFT.
#[derive(Debug, Clone, PartialEq)]
pub struct CodecParams {
    pub stages: Vec<CodecStage>,
    pub feature_dim: usize,
    pub code_dim: usize,
    pub vocab_k: usize,
    pub sample_rate_hz: u32,
    pub hop: usize,
    /// Training reconstruction MSE after each stage.
    pub train_mse: Vec<f64>,
}

impl CodecParams {
    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn frame_rate_hz(&self) -> f32 {
        self.sample_rate_hz as f32 / self.hop as f32
    }
}

/// Greedy stage-by-stage training on a frame corpus (`N x C`, row-major).
pub fn rvq_train(
    data: &[f32],
    feature_dim: usize,
    num_stages: usize,
    vocab_k: usize,
    code_dim: usize,
    seed: u64,
    sample_rate_hz: u32,
    hop: usize,
) -> Result<CodecParams> {
    if feature_dim == 0 || data.len() % feature_dim != 0 {
        return Err(Error::contract("corpus is not a multiple of feature_dim"));
    }
    let n = data.len() / feature_dim;
    if n < vocab_k {
        return Err(Error::contract(format!(
            "RVQ training needs at least K={vocab_k} frames, got {n}"
        )));
    }
    if code_dim > feature_dim {
        return Err(Error::contract("code_dim cannot exceed feature_dim"));
    }

    let mut residual: Vec<f64> = data.iter().map(|&v| v as f64).collect();
    let mut stages = Vec::with_capacity(num_stages);
    let mut train_mse = Vec::with_capacity(num_stages);

    for stage_idx in 0..num_stages {
        let stage_seed = seeds::derive(seed, "rvq-stage", stage_idx as u64);
        let in_w = orthonormal_rows(code_dim, feature_dim, stage_seed);
        let in_b = Tensor::zeros(vec![code_dim]);

        // Project residuals into code space.
        let mut projected = vec![0.0f32; n * code_dim];
        for i in 0..n {
            let frame = &residual[i * feature_dim..(i + 1) * feature_dim];
            for j in 0..code_dim {
                let row = in_w.row(j);
                let mut acc = 0.0f64;
                for (x, &w) in frame.iter().zip(row) {
                    acc += x * w as f64;
                }
                projected[i * code_dim + j] = acc as f32;
            }
        }

        let book = kmeans_fit(
            &projected,
            code_dim,
            vocab_k,
            60,
            seeds::derive(stage_seed, "kmeans", 0),
        )?;
        let assign = kmeans_assign(&projected, code_dim, &book);

        // Ridge least squares from quantized codes back to the residual.
        let (out_w, out_b) = fit_out_proj(&residual, feature_dim, &book, &assign, code_dim);

        let stage = CodecStage {
            in_w,
            in_b,
            codebook: book.centroids.clone(),
            out_w,
            out_b,
        };

        // Subtract this stage's reconstruction.
        let mut sq = 0.0f64;
        for i in 0..n {
            let dec = stage.decode_token(assign[i]);
            let frame = &mut residual[i * feature_dim..(i + 1) * feature_dim];
            for (r, &d) in frame.iter_mut().zip(&dec) {
                *r -= d as f64;
                sq += *r * *r;
            }
        }
        train_mse.push(sq / (n * feature_dim) as f64);
        stages.push(stage);
    }

    Ok(CodecParams {
        stages,
        feature_dim,
        code_dim,
        vocab_k,
        sample_rate_hz,
        hop,
        train_mse,
    })
}

fn orthonormal_rows(rows: usize, cols: usize, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let raw = Tensor::<f64>::randn(vec![rows, cols], 1.0, &mut rng);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    for r in 0..rows {
        let mut v: Vec<f64> = raw.row(r).to_vec();
        for prev in &basis {
            let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
            for (x, p) in v.iter_mut().zip(prev) {
                *x -= dot * p;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for x in &mut v {
            *x /= norm;
        }
        basis.push(v);
    }
    let data: Vec<f32> = basis.into_iter().flatten().map(|x| x as f32).collect();
    Tensor::new(vec![rows, cols], data)
}

/// Solve `min ||Y - [codes, 1] W||^2 + lambda ||W||^2` for the output map.
fn fit_out_proj(
    residual: &[f64],
    feature_dim: usize,
    book: &crate::kmeans::KMeansCodebook,
    assign: &[u32],
    code_dim: usize,
) -> (Tensor<f32>, Tensor<f32>) {
    let n = assign.len();
    let aug = code_dim + 1;
    // Gram matrix and right-hand side in f64.
    let mut gram = vec![0.0f64; aug * aug];
    let mut rhs = vec![0.0f64; aug * feature_dim];
    let mut x_row = vec![0.0f64; aug];
    for i in 0..n {
        let code = book.centroids.row(assign[i] as usize);
        for (j, &cv) in code.iter().enumerate() {
            x_row[j] = cv as f64;
        }
        x_row[code_dim] = 1.0;
        for a in 0..aug {
            for b in 0..aug {
                gram[a * aug + b] += x_row[a] * x_row[b];
            }
            let y = &residual[i * feature_dim..(i + 1) * feature_dim];
            for (c, &yv) in y.iter().enumerate() {
                rhs[a * feature_dim + c] += x_row[a] * yv;
            }
        }
    }
    for a in 0..aug {
        gram[a * aug + a] += RIDGE_LAMBDA * n as f64;
    }
    let w = solve_multi(&mut gram, &mut rhs, aug, feature_dim);

    // W is [aug, C]; split into the [C, code_dim] map and the bias.
    let mut out_w = vec![0.0f32; feature_dim * code_dim];
    let mut out_b = vec![0.0f32; feature_dim];
    for c in 0..feature_dim {
        for j in 0..code_dim {
            out_w[c * code_dim + j] = w[j * feature_dim + c] as f32;
        }
        out_b[c] = w[code_dim * feature_dim + c] as f32;
    }
    (
        Tensor::new(vec![feature_dim, code_dim], out_w),
        Tensor::new(vec![feature_dim], out_b),
    )
}

/// Gaussian elimination with partial pivoting, multiple right-hand sides.
fn solve_multi(a: &mut [f64], b: &mut [f64], n: usize, m: usize) -> Vec<f64> {
    for col in 0..n {
        let mut pivot = col;
        for r in col + 1..n {
            if a[r * n + col].abs() > a[pivot * n + col].abs() {
                pivot = r;
            }
        }
        if pivot != col {
            for j in 0..n {
                a.swap(col * n + j, pivot * n + j);
            }
            for j in 0..m {
                b.swap(col * m + j, pivot * m + j);
            }
        }
        let diag = a[col * n + col];
        let diag = if diag.abs() < 1e-300 { 1e-300 } else { diag };
        for r in 0..n {
            if r == col {
                continue;
            }
            let factor = a[r * n + col] / diag;
            if factor == 0.0 {
                continue;
            }
            for j in col..n {
                a[r * n + j] -= factor * a[col * n + j];
            }
            for j in 0..m {
                b[r * m + j] -= factor * b[col * m + j];
            }
        }
    }
    let mut out = vec![0.0f64; n * m];
    for r in 0..n {
        let diag = a[r * n + r];
        for j in 0..m {
            out[r * m + j] = b[r * m + j] / diag;
        }
    }
    out
}

/// Stage-by-stage nearest-code assignment on projected residuals.
pub fn rvq_encode(feats: &FeatureSequence, codec: &CodecParams) -> Result<Codegram> {
    if feats.channels() != codec.feature_dim {
        return Err(Error::contract(format!(
            "codec expects {} channels, features have {}",
            codec.feature_dim,
            feats.channels()
        )));
    }
    let q = codec.num_stages();
    let t = feats.frames();
    let mut tokens = vec![0u32; q * t];
    let mut residual = vec![0.0f32; codec.feature_dim];
    for frame in 0..t {
        residual.copy_from_slice(feats.row(frame));
        for (stage_idx, stage) in codec.stages.iter().enumerate() {
            let projected = stage.project(&residual);
            let token = stage.nearest_code(&projected);
            tokens[stage_idx * t + frame] = token;
            let dec = stage.decode_token(token);
            for (r, &d) in residual.iter_mut().zip(&dec) {
                *r -= d;
            }
        }
    }
    Ok(Codegram::new(q, t, codec.vocab_k as u32, tokens))
}

/// Sum of per-stage output projections of the selected codewords.
pub fn rvq_decode(codegram: &Codegram, codec: &CodecParams) -> Result<FeatureSequence> {
    if codegram.has_mask() {
        return Err(Error::contract(
            "cannot decode a codegram that still contains MASK",
        ));
    }
    if codegram.stages != codec.num_stages() {
        return Err(Error::contract("codegram stage count mismatch"));
    }
    let c = codec.feature_dim;
    let t = codegram.frames;
    let mut data = vec![0.0f32; t * c];
    for (stage_idx, stage) in codec.stages.iter().enumerate() {
        for frame in 0..t {
            let dec = stage.decode_token(codegram.get(stage_idx, frame));
            for (o, &d) in data[frame * c..(frame + 1) * c].iter_mut().zip(&dec) {
                *o += d;
            }
        }
    }
    Ok(FeatureSequence::new(
        data,
        t,
        c,
        codec.frame_rate_hz(),
        FeatureKind::CodecFeature,
    ))
}

/// Embedding tables for the generator, one per stage: row `j < K` is the
/// decoded codeword truncated to the first `d` channels; the MASK row is a
/// fresh normal(0, 0.02) draw.
pub fn export_embedding_init(
    codec: &CodecParams,
    d: usize,
    seed: u64,
) -> Result<Vec<Tensor<f32>>> {
    if d > codec.feature_dim {
        return Err(Error::contract(format!(
            "embedding width {d} exceeds codec feature dim {}",
            codec.feature_dim
        )));
    }
    let k = codec.vocab_k;
    let mut out = Vec::with_capacity(codec.num_stages());
    for (stage_idx, stage) in codec.stages.iter().enumerate() {
        let mut table = vec![0.0f32; (k + 1) * d];
        for j in 0..k {
            let dec = stage.decode_token(j as u32);
            table[j * d..(j + 1) * d].copy_from_slice(&dec[..d]);
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(seeds::derive(seed, "mask-embed", stage_idx as u64));
        let mask_row = Tensor::<f32>::randn(vec![d], 0.02, &mut rng);
        table[k * d..(k + 1) * d].copy_from_slice(mask_row.data());
        out.push(Tensor::new(vec![k + 1, d], table));
    }
    Ok(out)
}

/// Serialize under `codec/stage{q}/{in_proj,codebook,out_proj}` names.
pub fn codec_to_checkpoint(codec: &CodecParams) -> Checkpoint {
    let mut ck = Checkpoint::new();
    for (q, stage) in codec.stages.iter().enumerate() {
        ck.insert(format!("codec/stage{q}/in_proj/w"), Record::F32(stage.in_w.clone()));
        ck.insert(format!("codec/stage{q}/in_proj/b"), Record::F32(stage.in_b.clone()));
        ck.insert(
            format!("codec/stage{q}/codebook"),
            Record::F32(stage.codebook.clone()),
        );
        ck.insert(format!("codec/stage{q}/out_proj/w"), Record::F32(stage.out_w.clone()));
        ck.insert(format!("codec/stage{q}/out_proj/b"), Record::F32(stage.out_b.clone()));
    }
    let mut meta = vec![
        codec.num_stages() as f64,
        codec.feature_dim as f64,
        codec.code_dim as f64,
        codec.vocab_k as f64,
        codec.sample_rate_hz as f64,
        codec.hop as f64,
    ];
    meta.extend(codec.train_mse.iter());
    ck.insert(
        "codec/meta",
        Record::F64(Tensor::new(vec![meta.len()], meta)),
    );
    ck
}

pub fn codec_from_checkpoint(ck: &Checkpoint) -> Result<CodecParams> {
    let meta = ck.get("codec/meta")?.as_f64()?;
    if meta.numel() < 6 {
        return Err(Error::format("codec/meta too short"));
    }
    let m = meta.data();
    let num_stages = m[0] as usize;
    let feature_dim = m[1] as usize;
    let code_dim = m[2] as usize;
    let vocab_k = m[3] as usize;
    let sample_rate_hz = m[4] as u32;
    let hop = m[5] as usize;
    let train_mse = m[6..].to_vec();
    let mut stages = Vec::with_capacity(num_stages);
    for q in 0..num_stages {
        stages.push(CodecStage {
            in_w: ck.get(&format!("codec/stage{q}/in_proj/w"))?.as_f32()?.clone(),
            in_b: ck.get(&format!("codec/stage{q}/in_proj/b"))?.as_f32()?.clone(),
            codebook: ck.get(&format!("codec/stage{q}/codebook"))?.as_f32()?.clone(),
            out_w: ck.get(&format!("codec/stage{q}/out_proj/w"))?.as_f32()?.clone(),
            out_b: ck.get(&format!("codec/stage{q}/out_proj/b"))?.as_f32()?.clone(),
        });
    }
    Ok(CodecParams {
        stages,
        feature_dim,
        code_dim,
        vocab_k,
        sample_rate_hz,
        hop,
        train_mse,
    })
}
