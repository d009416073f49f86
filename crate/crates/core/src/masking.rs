//! Mask generation for training and the cosine schedule shared with
//! inference: uniform token masking and span masking with per-codebook
//! span counts chosen to hit a global mask budget.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    Token,
    /// Contiguous runs of `span_length` frames per codebook row.
    Span { span_length: usize },
}

/// A realized Q x T mask grid (true = masked).
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub stages: usize,
    pub frames: usize,
    pub grid: Vec<bool>,
    pub mode: MaskMode,
}

impl MaskPlan {
    pub fn masked_count(&self) -> usize {
        self.grid.iter().filter(|&&m| m).count()
    }

    pub fn realized_ratio(&self) -> f64 {
        self.masked_count() as f64 / (self.stages * self.frames) as f64
    }

    pub fn is_masked(&self, stage: usize, frame: usize) -> bool {
        self.grid[stage * self.frames + frame]
    }

    /// Masked count of one codebook row.
    pub fn row_count(&self, stage: usize) -> usize {
        self.grid[stage * self.frames..(stage + 1) * self.frames]
            .iter()
            .filter(|&&m| m)
            .count()
    }
}

/// The cosine schedule `cos(pi * u / 2)`: the fraction of positions still
/// masked at decoding progress `u`.
pub fn cosine_ratio(u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::contract(format!(
            "schedule progress {u} outside [0, 1]"
        )));
    }
    Ok((std::f64::consts::PI * u / 2.0).cos())
}

/// Mask exactly `round(Q*T*r)` positions, uniformly without replacement.
pub fn token_mask(stages: usize, frames: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..=1.0).contains(&ratio) || ratio == 0.0 {
        return Err(Error::contract(format!(
            "token mask ratio {ratio} outside (0, 1]"
        )));
    }
    let total = stages * frames;
    let want = ((total as f64) * ratio).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: the first `want` slots end up uniform.
    let mut indices: Vec<u32> = (0..total as u32).collect();
    for i in 0..want.min(total) {
        let j = rng.gen_range(i..total);
        indices.swap(i, j);
    }
    let mut grid = vec![false; total];
    for &i in &indices[..want] {
        grid[i as usize] = true;
    }
    Ok(MaskPlan {
        stages,
        frames,
        grid,
        mode: MaskMode::Token,
    })
}

/// Smallest span count whose expected uniform-placement coverage reaches
/// `r_k * T`: the least `n >= 0` with `T*(1 - ((T-l)/T)^n) >= r_k*T`.
pub fn num_spans(r_k: f64, frames: usize, span_length: usize) -> Result<usize> {
    if span_length == 0 || span_length > frames {
        return Err(Error::contract(format!(
            "span length {span_length} outside [1, T={frames}]"
        )));
    }
    if !(0.0..=1.0).contains(&r_k) {
        return Err(Error::contract(format!("span ratio {r_k} outside [0, 1]")));
    }
    if r_k == 0.0 {
        return Ok(0);
    }
    // Coverage target; r_k = 1 cannot be met exactly by random placement,
    // so it is clamped just below one (the count then guarantees coverage
    // to within 1e-9).
    let target = (1.0 - r_k).max(1e-9);
    let base = (frames - span_length) as f64 / frames as f64;
    if base <= 0.0 {
        return Ok(1); // l == T: one span covers the row
    }
    let mut n = 0usize;
    let mut uncovered = 1.0f64;
    while uncovered > target + 1e-12 {
        uncovered *= base;
        n += 1;
    }
    Ok(n)
}

/// Appendix-style span masking: draw a token-level grid at `r_g` (without
/// applying it), read off each row's ratio `r_k`, then place that row's
/// span budget at uniform random origins and mask the union.
pub fn span_mask(
    stages: usize,
    frames: usize,
    r_g: f64,
    span_length: usize,
    seed: u64,
) -> Result<MaskPlan> {
    if span_length == 0 || span_length > frames {
        return Err(Error::contract(format!(
            "span length {span_length} outside [1, T={frames}]"
        )));
    }
    let token_plan = token_mask(stages, frames, r_g, crate::seeds::derive(seed, "span-draw", 0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(crate::seeds::derive(seed, "span-place", 0));
    let mut grid = vec![false; stages * frames];
    for stage in 0..stages {
        let r_k = token_plan.row_count(stage) as f64 / frames as f64;
        let n = num_spans(r_k, frames, span_length)?;
        for _ in 0..n {
            let start = rng.gen_range(0..=frames - span_length);
            for t in start..start + span_length {
                grid[stage * frames + t] = true;
            }
        }
    }
    Ok(MaskPlan {
        stages,
        frames,
        grid,
        mode: MaskMode::Span { span_length },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints_and_midpoint() {
        assert_eq!(cosine_ratio(0.0).unwrap(), 1.0);
        assert!(cosine_ratio(1.0).unwrap().abs() < 1e-15);
        assert!((cosine_ratio(0.5).unwrap() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!(cosine_ratio(-0.1).is_err());
        assert!(cosine_ratio(1.1).is_err());
    }

    #[test]
    fn cosine_is_strictly_decreasing() {
        let mut prev = cosine_ratio(0.0).unwrap();
        for i in 1..=100 {
            let v = cosine_ratio(i as f64 / 100.0).unwrap();
            assert!(v < prev, "not strictly decreasing at {i}");
            prev = v;
        }
    }

    #[test]
    fn token_mask_exact_counts() {
        let full = token_mask(3, 10, 1.0, 0).unwrap();
        assert_eq!(full.masked_count(), 30);

        let half = token_mask(9, 100, 0.5, 1).unwrap();
        assert_eq!(half.masked_count(), 450);
    }

    #[test]
    fn token_mask_is_deterministic() {
        let a = token_mask(4, 50, 0.3, 42).unwrap();
        let b = token_mask(4, 50, 0.3, 42).unwrap();
        assert_eq!(a, b);
        let c = token_mask(4, 50, 0.3, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn token_mask_per_position_frequency_is_uniform() {
        // Monte Carlo oracle: 10000 seeds on a small grid, each position
        // should be masked with frequency r within 3-sigma binomial bounds.
        let (q, t, r) = (2usize, 10usize, 0.4f64);
        let runs = 10_000usize;
        let mut counts = vec![0usize; q * t];
        for seed in 0..runs {
            let plan = token_mask(q, t, r, seed as u64).unwrap();
            for (c, &m) in counts.iter_mut().zip(&plan.grid) {
                if m {
                    *c += 1;
                }
            }
        }
        let sigma = (r * (1.0 - r) / runs as f64).sqrt();
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / runs as f64;
            assert!(
                (freq - r).abs() < 3.5 * sigma,
                "position {i}: frequency {freq} vs {r} (sigma {sigma})"
            );
        }
    }

    #[test]
    fn num_spans_examples() {
        assert_eq!(num_spans(0.0, 100, 10).unwrap(), 0);
        // 0.9^6 = 0.531 > 0.5, 0.9^7 = 0.478 <= 0.5
        assert_eq!(num_spans(0.5, 100, 10).unwrap(), 7);
        assert_eq!(num_spans(0.3, 100, 100).unwrap(), 1);
        assert_eq!(num_spans(1.0, 100, 100).unwrap(), 1);
        assert!(num_spans(0.5, 100, 101).is_err());
        assert!(num_spans(0.5, 100, 0).is_err());
    }

    #[test]
    fn span_mask_respects_bounds_and_span_origin() {
        for seed in 0..50 {
            let plan = span_mask(3, 40, 0.5, 5, seed).unwrap();
            for stage in 0..3 {
                // Every masked run has length >= 1 inside the row; spans
                // never spill past the row end by construction, so just
                // check the grid width.
                assert_eq!(plan.grid.len(), 120);
                let _ = stage;
            }
        }
    }

    #[test]
    fn span_mask_l1_hits_global_ratio() {
        // l=1 reduces spans to single tokens; the realized global ratio
        // should track r_g closely at T=500.
        let (q, t) = (9usize, 500usize);
        for &r_g in &[0.3f64, 0.5, 0.8] {
            let mut total = 0.0f64;
            let runs = 200;
            for seed in 0..runs {
                total += span_mask(q, t, r_g, 1, seed).unwrap().realized_ratio();
            }
            let mean = total / runs as f64;
            assert!(
                (mean - r_g).abs() < 0.05,
                "l=1 realized ratio {mean} vs r_g {r_g}"
            );
        }
    }

    #[test]
    fn span_mask_full_ratio_covers_nearly_everything() {
        let mut worst: f64 = 1.0;
        for seed in 0..100 {
            let plan = span_mask(2, 200, 1.0, 5, seed).unwrap();
            worst = worst.min(plan.realized_ratio());
        }
        assert!(worst >= 0.99, "full-budget coverage dropped to {worst}");
    }

    #[test]
    fn span_mask_row_counts_within_coverage_bounds() {
        let (t, l) = (120usize, 6usize);
        for seed in 0..1000u64 {
            let plan = span_mask(2, t, 0.5, l, seed).unwrap();
            let token_plan = token_mask(2, t, 0.5, crate::seeds::derive(seed, "span-draw", 0)).unwrap();
            for stage in 0..2 {
                let r_k = token_plan.row_count(stage) as f64 / t as f64;
                let n = num_spans(r_k, t, l).unwrap();
                let count = plan.row_count(stage);
                assert!(count <= n * l, "seed {seed}: count {count} > n*l {}", n * l);
                assert!(
                    count as f64 >= r_k * t as f64 * 0.6,
                    "seed {seed}: count {count} < 0.6*r_k*T {}",
                    r_k * t as f64 * 0.6
                );
            }
        }
    }

    #[test]
    fn span_and_token_frequencies_agree_at_l1() {
        // Chi-square homogeneity between per-position mask counts of
        // token_mask and span_mask(l=1) at matched budgets.
        let (q, t, r) = (1usize, 40usize, 0.5f64);
        let runs = 4000usize;
        let mut token_counts = vec![0f64; t];
        let mut span_counts = vec![0f64; t];
        for seed in 0..runs {
            let a = token_mask(q, t, r, seed as u64).unwrap();
            let b = span_mask(q, t, r, 1, 10_000 + seed as u64).unwrap();
            for i in 0..t {
                if a.grid[i] {
                    token_counts[i] += 1.0;
                }
                if b.grid[i] {
                    span_counts[i] += 1.0;
                }
            }
        }
        let total_a: f64 = token_counts.iter().sum();
        let total_b: f64 = span_counts.iter().sum();
        let mut chi2 = 0.0f64;
        for i in 0..t {
            let pooled = (token_counts[i] + span_counts[i]) / (total_a + total_b);
            let ea = pooled * total_a;
            let eb = pooled * total_b;
            chi2 += (token_counts[i] - ea).powi(2) / ea;
            chi2 += (span_counts[i] - eb).powi(2) / eb;
        }
        let df = (t - 1) as f64;
        let p = chi2_sf(chi2, df);
        assert!(p > 0.01, "chi2 {chi2} df {df} p {p}");
    }

    fn chi2_sf(x: f64, df: f64) -> f64 {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        1.0 - ChiSquared::new(df).unwrap().cdf(x)
    }
}
