//! Lloyd's algorithm with k-means++ seeding. Backs both the teacher
//! tokenizer codebook and the per-stage RVQ codebooks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{Checkpoint, Record};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansCodebook {
    /// `[K, dim]` centroid matrix.
    pub centroids: Tensor<f32>,
    pub iterations: usize,
    pub inertia: f64,
    pub seed: u64,
}

impl KMeansCodebook {
    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert("kmeans/centroids", Record::F32(self.centroids.clone()));
        ck.insert(
            "kmeans/meta",
            Record::F64(Tensor::new(
                vec![3],
                vec![self.iterations as f64, self.inertia, self.seed as f64],
            )),
        );
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let centroids = ck.get("kmeans/centroids")?.as_f32()?.clone();
        let meta = ck.get("kmeans/meta")?.as_f64()?;
        if meta.numel() != 3 {
            return Err(Error::format("kmeans/meta must hold 3 values"));
        }
        Ok(KMeansCodebook {
            centroids,
            iterations: meta.data()[0] as usize,
            inertia: meta.data()[1],
            seed: meta.data()[2] as u64,
        })
    }
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        let d = x as f64 - y as f64;
        s += d * d;
    }
    s
}

/// Nearest centroid per frame; ties break toward the lowest index.
pub fn kmeans_assign(data: &[f32], dim: usize, codebook: &KMeansCodebook) -> Vec<u32> {
    assert_eq!(dim, codebook.dim(), "frame dim does not match codebook");
    let n = data.len() / dim;
    let k = codebook.k();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let frame = &data[i * dim..(i + 1) * dim];
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..k {
            let d = sq_dist(frame, codebook.centroids.row(c));
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        out.push(best as u32);
    }
    out
}

/// Total squared distance of each frame to its assigned centroid.
pub fn inertia_of(data: &[f32], dim: usize, codebook: &KMeansCodebook, assign: &[u32]) -> f64 {
    let n = data.len() / dim;
    (0..n)
        .map(|i| {
            sq_dist(
                &data[i * dim..(i + 1) * dim],
                codebook.centroids.row(assign[i] as usize),
            )
        })
        .sum()
}

/// k-means++ init then Lloyd iterations until the assignment stops
/// changing or `max_iters` is hit. Empty clusters are re-seeded to the
/// point farthest from its current centroid. Inertia is checked to be
/// non-increasing after every iteration.
pub fn kmeans_fit(
    data: &[f32],
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansCodebook> {
    if dim == 0 || data.len() % dim != 0 {
        return Err(Error::contract("frame buffer is not a multiple of dim"));
    }
    let n = data.len() / dim;
    if k == 0 {
        return Err(Error::contract("k must be at least 1"));
    }
    if n < k {
        return Err(Error::contract(format!(
            "k-means needs at least K={k} frames, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frame = |i: usize| &data[i * dim..(i + 1) * dim];

    // k-means++: D^2-weighted seeding.
    let mut centroids = vec![0.0f32; k * dim];
    let first = rng.gen_range(0..n);
    centroids[..dim].copy_from_slice(frame(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(frame(i), frame(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total <= 0.0 {
            // All remaining mass is zero (duplicate points): any index works.
            rng.gen_range(0..n)
        } else {
            let mut threshold = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if threshold < w {
                    chosen = i;
                    break;
                }
                threshold -= w;
            }
            chosen
        };
        centroids[c * dim..(c + 1) * dim].copy_from_slice(frame(pick));
        for i in 0..n {
            let d = sq_dist(frame(i), &centroids[c * dim..(c + 1) * dim]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    let mut book = KMeansCodebook {
        centroids: Tensor::new(vec![k, dim], centroids),
        iterations: 0,
        inertia: f64::INFINITY,
        seed,
    };
    let mut assign = kmeans_assign(data, dim, &book);
    let mut prev_inertia = inertia_of(data, dim, &book, &assign);

    for iter in 0..max_iters {
        // Update step.
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a as usize] += 1;
            for (s, &v) in sums[a as usize * dim..(a as usize + 1) * dim]
                .iter_mut()
                .zip(frame(i))
            {
                *s += v as f64;
            }
        }
        let cent = book.centroids.data_mut();
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..dim {
                    cent[c * dim + j] = (sums[c * dim + j] / counts[c] as f64) as f32;
                }
            }
        }
        // Re-seed empty clusters to the globally farthest point.
        for c in 0..k {
            if counts[c] == 0 {
                let mut far = 0usize;
                let mut far_d = -1.0f64;
                for (i, &a) in assign.iter().enumerate() {
                    let d = sq_dist(frame(i), book.centroids.row(a as usize));
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                book.centroids.data_mut()[c * dim..(c + 1) * dim].copy_from_slice(frame(far));
            }
        }

        // Assignment step.
        let next = kmeans_assign(data, dim, &book);
        let inertia = inertia_of(data, dim, &book, &next);
        if inertia > prev_inertia * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::numeric(format!(
                "k-means inertia increased at iteration {iter}: {prev_inertia} -> {inertia}"
            )));
        }
        book.iterations = iter + 1;
        let converged = next == assign;
        assign = next;
        prev_inertia = inertia;
        if converged {
            break;
        }
    }
    book.inertia = prev_inertia;
    Ok(book)
}
