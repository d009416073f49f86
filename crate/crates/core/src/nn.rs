//! Transformer building blocks, parameter sets, and initialization.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::{Scalar, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

/// Architecture hyper-parameters for the encoder + generator pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d: usize,
    pub n_heads: usize,
    pub n_blocks_encoder: usize,
    pub n_blocks_generator: usize,
    pub mlp_mult: usize,
    /// Acoustic codebook size per RVQ stage; the MASK sentinel is `vocab_k`.
    pub vocab_k: usize,
    pub num_codebooks_q: usize,
    pub max_t: usize,
    /// Compressed-STFT channels feeding the encoder.
    pub in_channels: usize,
    /// Present when a distillation head is part of the model.
    pub kd_head: Option<KdHead>,
}

/// Output layer of the distillation branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KdHead {
    /// Regression to `dim` continuous channels (MSE).
    Continuous { dim: usize },
    /// Classification over `classes` teacher tokens (cross-entropy).
    Discrete { classes: usize },
}

impl KdHead {
    pub fn out_dim(&self) -> usize {
        match *self {
            KdHead::Continuous { dim } => dim,
            KdHead::Discrete { classes } => classes,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.d % 2 != 0 {
            return Err(Error::contract(format!(
                "model width d={} must be positive and even",
                self.d
            )));
        }
        if self.n_heads == 0 || self.d % self.n_heads != 0 {
            return Err(Error::contract(format!(
                "d={} must divide evenly across {} heads",
                self.d, self.n_heads
            )));
        }
        if self.vocab_k < 2 {
            return Err(Error::contract("vocab_k must be at least 2"));
        }
        if self.num_codebooks_q < 1 {
            return Err(Error::contract("num_codebooks_q must be at least 1"));
        }
        if self.mlp_mult == 0 {
            return Err(Error::contract("mlp_mult must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }
}

/// Named, shape-annotated parameter tensors. BTreeMap keeps iteration and
/// serialization order deterministic.
#[derive(Clone)]
pub struct ParamSet<F: Scalar> {
    map: BTreeMap<String, Tensor<F>>,
}

impl<F: Scalar> Default for ParamSet<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<F>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Tensor<F> {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor<F>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<F> {
        self.map
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<F>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn total_values(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    pub fn convert<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            map: self
                .map
                .iter()
                .map(|(k, v)| (k.clone(), v.map(|x| G::from_f64(x.to_f64_()))))
                .collect(),
        }
    }
}

/// Gradients keyed like the parameter set they belong to.
pub type GradMap<F> = BTreeMap<String, Tensor<F>>;

/// Expand a partial gradient map to cover every parameter; parameters the
/// loss never reached get zeros.
pub fn full_grad_map<F: Scalar>(
    params: &ParamSet<F>,
    mut partial: std::collections::HashMap<String, Tensor<F>>,
) -> GradMap<F> {
    let mut out = GradMap::new();
    for (name, value) in params.iter() {
        let g = partial
            .remove(name)
            .unwrap_or_else(|| Tensor::zeros(value.shape().to_vec()));
        out.insert(name.clone(), g);
    }
    assert!(partial.is_empty(), "gradient for unknown parameter");
    out
}

/// Fresh parameter set: normal(0, 0.02) projections, zero biases, unit
/// norm gains. Embedding tables may be overwritten afterwards from the
/// codec export.
pub fn init_params<F: Scalar>(cfg: &ModelConfig, seed: u64) -> ParamSet<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamSet::new();
    let d = cfg.d;
    let h = cfg.mlp_mult * d;
    let c = cfg.in_channels;

    p.insert("norm/gain", Tensor::filled(vec![c], F::one()));
    p.insert("norm/bias", Tensor::zeros(vec![c]));
    p.insert("enc/in_w", Tensor::randn(vec![c, d], INIT_STD, &mut rng));
    p.insert("enc/in_b", Tensor::zeros(vec![d]));

    for (prefix, blocks) in [
        ("enc", cfg.n_blocks_encoder),
        ("gen", cfg.n_blocks_generator),
    ] {
        for b in 0..blocks {
            let base = format!("{prefix}/b{b}");
            p.insert(format!("{base}/ln1_g"), Tensor::filled(vec![d], F::one()));
            p.insert(format!("{base}/ln1_b"), Tensor::zeros(vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                p.insert(
                    format!("{base}/{w}"),
                    Tensor::randn(vec![d, d], INIT_STD, &mut rng),
                );
            }
            for bias in ["bq", "bk", "bv", "bo"] {
                p.insert(format!("{base}/{bias}"), Tensor::zeros(vec![d]));
            }
            p.insert(format!("{base}/ln2_g"), Tensor::filled(vec![d], F::one()));
            p.insert(format!("{base}/ln2_b"), Tensor::zeros(vec![d]));
            p.insert(
                format!("{base}/mlp_w1"),
                Tensor::randn(vec![d, h], INIT_STD, &mut rng),
            );
            p.insert(format!("{base}/mlp_b1"), Tensor::zeros(vec![h]));
            p.insert(
                format!("{base}/mlp_w2"),
                Tensor::randn(vec![h, d], INIT_STD, &mut rng),
            );
            p.insert(format!("{base}/mlp_b2"), Tensor::zeros(vec![d]));
        }
        p.insert(format!("{prefix}/final_g"), Tensor::filled(vec![d], F::one()));
        p.insert(format!("{prefix}/final_b"), Tensor::zeros(vec![d]));
    }

    for q in 0..cfg.num_codebooks_q {
        p.insert(
            format!("embed/s{q}"),
            Tensor::randn(vec![cfg.vocab_k + 1, d], INIT_STD, &mut rng),
        );
        p.insert(
            format!("head/s{q}_w"),
            Tensor::randn(vec![d, cfg.vocab_k], INIT_STD, &mut rng),
        );
        p.insert(format!("head/s{q}_b"), Tensor::zeros(vec![cfg.vocab_k]));
    }

    p.insert("null_cond", Tensor::randn(vec![d], INIT_STD, &mut rng));

    if let Some(kd) = cfg.kd_head {
        p.insert(
            "kd/w",
            Tensor::randn(vec![d, kd.out_dim()], INIT_STD, &mut rng),
        );
        p.insert("kd/b", Tensor::zeros(vec![kd.out_dim()]));
    }

    p
}

/// Sinusoidal positional encoding: row `t`, pair `i` holds
/// `sin(t/10000^(2i/d))` and `cos(t/10000^(2i/d))`.
pub fn sinusoidal_pe<F: Scalar>(t: usize, d: usize) -> Result<Tensor<F>> {
    if t == 0 {
        return Err(Error::contract("positional encoding needs T >= 1"));
    }
    if d == 0 || d % 2 != 0 {
        return Err(Error::contract(format!(
            "positional encoding width d={d} must be even"
        )));
    }
    let mut data = vec![F::zero(); t * d];
    for row in 0..t {
        for i in 0..d / 2 {
            let rate = (10000f64).powf(2.0 * i as f64 / d as f64);
            let angle = row as f64 / rate;
            data[row * d + 2 * i] = F::from_f64(angle.sin());
            data[row * d + 2 * i + 1] = F::from_f64(angle.cos());
        }
    }
    Ok(Tensor::new(vec![t, d], data))
}

fn linear<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    x: NodeId,
    w: &str,
    b: &str,
) -> NodeId {
    let wid = g.param(w, params.get(w));
    let bid = g.param(b, params.get(b));
    let y = g.matmul(x, wid);
    g.add_row(y, bid)
}

fn attention<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    x: NodeId,
    base: &str,
    n_heads: usize,
) -> NodeId {
    let d = g.value(x).cols();
    let dh = d / n_heads;
    let q = linear(g, params, x, &format!("{base}/wq"), &format!("{base}/bq"));
    let k = linear(g, params, x, &format!("{base}/wk"), &format!("{base}/bk"));
    let v = linear(g, params, x, &format!("{base}/wv"), &format!("{base}/bv"));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (from, to) = (h * dh, (h + 1) * dh);
        let qh = g.slice_cols(q, from, to);
        let kh = g.slice_cols(k, from, to);
        let vh = g.slice_cols(v, from, to);
        let kt = g.transpose(kh);
        let scores = g.matmul(qh, kt);
        let scaled = g.scale(scores, scale);
        let probs = g.softmax_rows(scaled);
        heads.push(g.matmul(probs, vh));
    }
    let cat = g.concat_cols(&heads);
    linear(g, params, cat, &format!("{base}/wo"), &format!("{base}/bo"))
}

fn mlp<F: Scalar>(g: &mut Graph<F>, params: &ParamSet<F>, x: NodeId, base: &str) -> NodeId {
    let h = linear(
        g,
        params,
        x,
        &format!("{base}/mlp_w1"),
        &format!("{base}/mlp_b1"),
    );
    let a = g.gelu(h);
    linear(
        g,
        params,
        a,
        &format!("{base}/mlp_w2"),
        &format!("{base}/mlp_b2"),
    )
}

/// Pre-norm residual transformer blocks `blocks` of the stack under
/// `prefix`. An empty range is the identity.
pub fn transformer_stack<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    mut x: NodeId,
    prefix: &str,
    blocks: std::ops::Range<usize>,
    n_heads: usize,
) -> Result<NodeId> {
    for b in blocks {
        let base = format!("{prefix}/b{b}");
        let g1 = g.param(&format!("{base}/ln1_g"), params.get(&format!("{base}/ln1_g")));
        let b1 = g.param(&format!("{base}/ln1_b"), params.get(&format!("{base}/ln1_b")));
        let normed = g.layer_norm(x, g1, b1, LAYER_NORM_EPS);
        let att = attention(g, params, normed, &base, n_heads);
        x = g.add(x, att);
        let g2 = g.param(&format!("{base}/ln2_g"), params.get(&format!("{base}/ln2_g")));
        let b2 = g.param(&format!("{base}/ln2_b"), params.get(&format!("{base}/ln2_b")));
        let normed2 = g.layer_norm(x, g2, b2, LAYER_NORM_EPS);
        let ff = mlp(g, params, normed2, &base);
        x = g.add(x, ff);
        g.check_finite(x, &format!("{prefix} block {b}"))?;
    }
    Ok(x)
}

/// Final layer norm applied after the last block of a stack.
pub fn final_norm<F: Scalar>(
    g: &mut Graph<F>,
    params: &ParamSet<F>,
    x: NodeId,
    prefix: &str,
) -> NodeId {
    let gain = g.param(&format!("{prefix}/final_g"), params.get(&format!("{prefix}/final_g")));
    let bias = g.param(&format!("{prefix}/final_b"), params.get(&format!("{prefix}/final_b")));
    g.layer_norm(x, gain, bias, LAYER_NORM_EPS)
}
