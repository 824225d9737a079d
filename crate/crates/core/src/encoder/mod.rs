//! Toy masked-prediction transformer with a fixed CLS slot and an
//! auxiliary topic-classification head.
//!
//! Input frames are standardized and projected to the model width, masked
//! positions are replaced by a learned mask embedding, and a frozen CLS
//! vector is prepended at position 0 before the pre-norm transformer
//! stack. Frame logits cover positions `1..=T`; the topic head reads the
//! final-layer state at position 0. Losses:
//!
//! * masked prediction `l_mp`: cross-entropy summed over masked indices only,
//! * topic classification `l_tc`: cross-entropy of the CLS logits against a
//!   one-hot topic label,
//! * `total = (1 - rho) * l_mp + rho * l_tc`.
//!
//! All math runs in `f64`, and [`grad`] returns exact reverse-mode
//! gradients for every trainable tensor; the CLS vector and the feature
//! standardization vectors receive none. `forward`/`loss`/`grad`/
//! [`extract_layer`] are pure with respect to the parameters and safe to
//! call concurrently on a frozen set.

mod checkpoint;
mod train;

pub use checkpoint::{read_checkpoint, write_checkpoint};
pub use train::{sample_mask_spans, train, write_loss_curve, TrainItem, TrainOptions};

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub model_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    /// Pseudo-label vocabulary size U (masked-prediction classes).
    pub vocab_size: usize,
    /// Used-topic count K' (topic-head classes).
    pub num_topics: usize,
    /// Probability that a frame starts a mask span.
    pub mask_start_prob: f64,
    /// Span length in frames; spans are clipped at the sequence end and unioned.
    pub mask_span: usize,
    /// Mixing weight between masked prediction and topic classification.
    pub rho: f64,
    /// Sinusoidal absolute positions; disable to make the stack
    /// permutation-equivariant over non-CLS positions.
    #[serde(default = "default_true")]
    pub positional: bool,
    /// Optional intermediate width for the topic head (256-style); `None`
    /// maps model_dim -> K' directly.
    #[serde(default)]
    pub topic_bottleneck: Option<usize>,
    pub seed: u64,
}

fn default_true() -> bool {
    true
}

impl PartialEq for EncoderConfig {
    fn eq(&self, other: &Self) -> bool {
        self.input_dim == other.input_dim
            && self.model_dim == other.model_dim
            && self.layers == other.layers
            && self.heads == other.heads
            && self.ff_dim == other.ff_dim
            && self.vocab_size == other.vocab_size
            && self.num_topics == other.num_topics
            && self.mask_start_prob == other.mask_start_prob
            && self.mask_span == other.mask_span
            && self.rho == other.rho
            && self.positional == other.positional
            && self.topic_bottleneck == other.topic_bottleneck
            && self.seed == other.seed
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.heads == 0 || !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::InvalidParameter(format!(
                "model_dim {} must be a positive multiple of heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.input_dim == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidParameter(
                "input_dim, layers and ff_dim must be >= 1".into(),
            ));
        }
        if self.vocab_size == 0 || self.num_topics == 0 {
            return Err(Error::InvalidParameter(
                "vocab_size and num_topics must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidParameter(format!(
                "rho {} outside [0, 1]",
                self.rho
            )));
        }
        if self.mask_span == 0 {
            return Err(Error::InvalidParameter("mask_span must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_start_prob) {
            return Err(Error::InvalidParameter(
                "mask_start_prob outside [0, 1]".into(),
            ));
        }
        if self.topic_bottleneck == Some(0) {
            return Err(Error::InvalidParameter(
                "topic_bottleneck must be >= 1 when set".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq)]
struct TransformerBlock {
    ln1_g: Matrix<f64>,
    ln1_b: Matrix<f64>,
    wq: Matrix<f64>,
    bq: Matrix<f64>,
    wk: Matrix<f64>,
    bk: Matrix<f64>,
    wv: Matrix<f64>,
    bv: Matrix<f64>,
    wo: Matrix<f64>,
    bo: Matrix<f64>,
    ln2_g: Matrix<f64>,
    ln2_b: Matrix<f64>,
    w1: Matrix<f64>,
    b1: Matrix<f64>,
    w2: Matrix<f64>,
    b2: Matrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
enum TopicHead {
    Direct {
        w: Matrix<f64>,
        b: Matrix<f64>,
    },
    Bottleneck {
        w1: Matrix<f64>,
        b1: Matrix<f64>,
        w2: Matrix<f64>,
        b2: Matrix<f64>,
    },
}

/// All encoder tensors. The CLS vector and the feature standardization are
/// carried alongside the trainable weights but are never updated; the CLS
/// bytes stay identical for the model's whole lifetime.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub cfg: EncoderConfig,
    feat_mean: Matrix<f64>,
    feat_std: Matrix<f64>,
    cls: Matrix<f64>,
    front_w: Matrix<f64>,
    front_b: Matrix<f64>,
    mask_emb: Matrix<f64>,
    blocks: Vec<TransformerBlock>,
    final_ln_g: Matrix<f64>,
    final_ln_b: Matrix<f64>,
    out_w: Matrix<f64>,
    out_b: Matrix<f64>,
    topic: TopicHead,
}

fn normal_matrix(rng: &mut ChaCha20Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        let z: f64 = rng.sample(StandardNormal);
        *v = z * scale;
    }
    m
}

fn ones(n: usize) -> Matrix<f64> {
    let mut m = Matrix::zeros(1, n);
    m.data_mut().fill(1.0);
    m
}

impl EncoderParams {
    /// Seeded initialization. Weight matrices are `N(0, 1/fan_in)`, biases
    /// zero, layer-norm gains one. The CLS vector is a standard normal draw
    /// scaled by `1/sqrt(model_dim)`, frozen thereafter.
    pub fn init(cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let d = cfg.model_dim;
        let d_scale = 1.0 / (d as f64).sqrt();

        let front_w = normal_matrix(
            &mut rng,
            cfg.input_dim,
            d,
            1.0 / (cfg.input_dim as f64).sqrt(),
        );
        let mask_emb = normal_matrix(&mut rng, 1, d, d_scale);
        let cls = normal_matrix(&mut rng, 1, d, d_scale);
        let mut blocks = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            blocks.push(TransformerBlock {
                ln1_g: ones(d),
                ln1_b: Matrix::zeros(1, d),
                wq: normal_matrix(&mut rng, d, d, d_scale),
                bq: Matrix::zeros(1, d),
                wk: normal_matrix(&mut rng, d, d, d_scale),
                bk: Matrix::zeros(1, d),
                wv: normal_matrix(&mut rng, d, d, d_scale),
                bv: Matrix::zeros(1, d),
                wo: normal_matrix(&mut rng, d, d, d_scale),
                bo: Matrix::zeros(1, d),
                ln2_g: ones(d),
                ln2_b: Matrix::zeros(1, d),
                w1: normal_matrix(&mut rng, d, cfg.ff_dim, d_scale),
                b1: Matrix::zeros(1, cfg.ff_dim),
                w2: normal_matrix(&mut rng, cfg.ff_dim, d, 1.0 / (cfg.ff_dim as f64).sqrt()),
                b2: Matrix::zeros(1, d),
            });
        }
        let topic = match cfg.topic_bottleneck {
            None => TopicHead::Direct {
                w: normal_matrix(&mut rng, d, cfg.num_topics, d_scale),
                b: Matrix::zeros(1, cfg.num_topics),
            },
            Some(mid) => TopicHead::Bottleneck {
                w1: normal_matrix(&mut rng, d, mid, d_scale),
                b1: Matrix::zeros(1, mid),
                w2: normal_matrix(&mut rng, mid, cfg.num_topics, 1.0 / (mid as f64).sqrt()),
                b2: Matrix::zeros(1, cfg.num_topics),
            },
        };

        Ok(EncoderParams {
            feat_mean: Matrix::zeros(1, cfg.input_dim),
            feat_std: ones(cfg.input_dim),
            cls,
            front_w,
            front_b: Matrix::zeros(1, d),
            mask_emb,
            blocks,
            final_ln_g: ones(d),
            final_ln_b: Matrix::zeros(1, d),
            out_w: normal_matrix(&mut rng, d, cfg.vocab_size, d_scale),
            out_b: Matrix::zeros(1, cfg.vocab_size),
            topic,
            cfg: cfg.clone(),
        })
    }

    /// Same tensor layout with every entry zeroed; the gradient container.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for name in z.tensor_names() {
            z.tensor_mut(&name).unwrap().data_mut().fill(0.0);
        }
        z
    }

    /// Per-dimension input standardization applied by the front end; std
    /// entries are floored at 1e-8.
    pub fn set_feature_norm(&mut self, mean: &[f64], std: &[f64]) -> Result<()> {
        if mean.len() != self.cfg.input_dim || std.len() != self.cfg.input_dim {
            return Err(Error::Shape("feature norm length mismatch".into()));
        }
        self.feat_mean.row_mut(0).copy_from_slice(mean);
        for (dst, &s) in self.feat_std.row_mut(0).iter_mut().zip(std) {
            *dst = s.max(1e-8);
        }
        Ok(())
    }

    pub fn cls_vector(&self) -> &[f64] {
        self.cls.row(0)
    }

    /// Stable tensor enumeration used by serialization, the optimizer and
    /// gradient checking.
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = vec![
            "feat_mean".to_string(),
            "feat_std".to_string(),
            "cls".to_string(),
            "front_w".to_string(),
            "front_b".to_string(),
            "mask_emb".to_string(),
        ];
        for i in 0..self.blocks.len() {
            for field in [
                "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b",
                "w1", "b1", "w2", "b2",
            ] {
                names.push(format!("block{i}.{field}"));
            }
        }
        names.push("final_ln_g".to_string());
        names.push("final_ln_b".to_string());
        names.push("out_w".to_string());
        names.push("out_b".to_string());
        match self.topic {
            TopicHead::Direct { .. } => {
                names.push("topic_w".to_string());
                names.push("topic_b".to_string());
            }
            TopicHead::Bottleneck { .. } => {
                for n in ["topic_w1", "topic_b1", "topic_w2", "topic_b2"] {
                    names.push(n.to_string());
                }
            }
        }
        names
    }

    /// CLS and the feature standardization never receive updates.
    pub fn is_trainable(name: &str) -> bool {
        !matches!(name, "cls" | "feat_mean" | "feat_std")
    }

    pub fn is_topic_head_tensor(name: &str) -> bool {
        name.starts_with("topic_")
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix<f64>> {
        match name {
            "feat_mean" => return Some(&self.feat_mean),
            "feat_std" => return Some(&self.feat_std),
            "cls" => return Some(&self.cls),
            "front_w" => return Some(&self.front_w),
            "front_b" => return Some(&self.front_b),
            "mask_emb" => return Some(&self.mask_emb),
            "final_ln_g" => return Some(&self.final_ln_g),
            "final_ln_b" => return Some(&self.final_ln_b),
            "out_w" => return Some(&self.out_w),
            "out_b" => return Some(&self.out_b),
            _ => {}
        }
        match (&self.topic, name) {
            (TopicHead::Direct { w, .. }, "topic_w") => return Some(w),
            (TopicHead::Direct { b, .. }, "topic_b") => return Some(b),
            (TopicHead::Bottleneck { w1, .. }, "topic_w1") => return Some(w1),
            (TopicHead::Bottleneck { b1, .. }, "topic_b1") => return Some(b1),
            (TopicHead::Bottleneck { w2, .. }, "topic_w2") => return Some(w2),
            (TopicHead::Bottleneck { b2, .. }, "topic_b2") => return Some(b2),
            _ => {}
        }
        let rest = name.strip_prefix("block")?;
        let (idx, field) = rest.split_once('.')?;
        let block = self.blocks.get(idx.parse::<usize>().ok()?)?;
        Some(match field {
            "ln1_g" => &block.ln1_g,
            "ln1_b" => &block.ln1_b,
            "wq" => &block.wq,
            "bq" => &block.bq,
            "wk" => &block.wk,
            "bk" => &block.bk,
            "wv" => &block.wv,
            "bv" => &block.bv,
            "wo" => &block.wo,
            "bo" => &block.bo,
            "ln2_g" => &block.ln2_g,
            "ln2_b" => &block.ln2_b,
            "w1" => &block.w1,
            "b1" => &block.b1,
            "w2" => &block.w2,
            "b2" => &block.b2,
            _ => return None,
        })
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix<f64>> {
        match name {
            "feat_mean" => return Some(&mut self.feat_mean),
            "feat_std" => return Some(&mut self.feat_std),
            "cls" => return Some(&mut self.cls),
            "front_w" => return Some(&mut self.front_w),
            "front_b" => return Some(&mut self.front_b),
            "mask_emb" => return Some(&mut self.mask_emb),
            "final_ln_g" => return Some(&mut self.final_ln_g),
            "final_ln_b" => return Some(&mut self.final_ln_b),
            "out_w" => return Some(&mut self.out_w),
            "out_b" => return Some(&mut self.out_b),
            _ => {}
        }
        match (&mut self.topic, name) {
            (TopicHead::Direct { w, .. }, "topic_w") => return Some(w),
            (TopicHead::Direct { b, .. }, "topic_b") => return Some(b),
            (TopicHead::Bottleneck { w1, .. }, "topic_w1") => return Some(w1),
            (TopicHead::Bottleneck { b1, .. }, "topic_b1") => return Some(b1),
            (TopicHead::Bottleneck { w2, .. }, "topic_w2") => return Some(w2),
            (TopicHead::Bottleneck { b2, .. }, "topic_b2") => return Some(b2),
            _ => {}
        }
        let rest = name.strip_prefix("block")?;
        let (idx, field) = rest.split_once('.')?;
        let block = self.blocks.get_mut(idx.parse::<usize>().ok()?)?;
        Some(match field {
            "ln1_g" => &mut block.ln1_g,
            "ln1_b" => &mut block.ln1_b,
            "wq" => &mut block.wq,
            "bq" => &mut block.bq,
            "wk" => &mut block.wk,
            "bk" => &mut block.bk,
            "wv" => &mut block.wv,
            "bv" => &mut block.bv,
            "wo" => &mut block.wo,
            "bo" => &mut block.bo,
            "ln2_g" => &mut block.ln2_g,
            "ln2_b" => &mut block.ln2_b,
            "w1" => &mut block.w1,
            "b1" => &mut block.b1,
            "w2" => &mut block.w2,
            "b2" => &mut block.b2,
            _ => return None,
        })
    }

    fn add_grad(&mut self, name: &str, delta: &Matrix<f64>) {
        let dst = self.tensor_mut(name).expect("known tensor name");
        debug_assert_eq!(dst.shape(), delta.shape(), "gradient shape for {name}");
        for (d, &v) in dst.data_mut().iter_mut().zip(delta.data()) {
            *d += v;
        }
    }
}

/// One utterance of training evidence: features, frame-aligned targets,
/// the mask index set, and the (compacted) topic label for the one-hot.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub feats: &'a Matrix<f64>,
    pub targets: &'a [u32],
    pub mask: &'a [usize],
    pub topic: u32,
}

impl Batch<'_> {
    fn validate(&self, cfg: &EncoderConfig) -> Result<()> {
        if self.feats.cols() != cfg.input_dim {
            return Err(Error::Shape(format!(
                "feature dim {} does not match encoder input dim {}",
                self.feats.cols(),
                cfg.input_dim
            )));
        }
        if !self.feats.is_finite() {
            return Err(Error::Input("features contain non-finite values".into()));
        }
        if self.targets.len() != self.feats.rows() {
            return Err(Error::Shape(format!(
                "{} targets for {} frames",
                self.targets.len(),
                self.feats.rows()
            )));
        }
        if let Some(&bad) = self.targets.iter().find(|&&z| z as usize >= cfg.vocab_size) {
            return Err(Error::Index(format!(
                "target label {bad} >= vocab size {}",
                cfg.vocab_size
            )));
        }
        if let Some(&bad) = self.mask.iter().find(|&&t| t >= self.feats.rows()) {
            return Err(Error::Index(format!(
                "mask index {bad} >= {} frames",
                self.feats.rows()
            )));
        }
        if self.topic as usize >= cfg.num_topics {
            return Err(Error::Index(format!(
                "topic label {} >= K' = {}",
                self.topic, cfg.num_topics
            )));
        }
        Ok(())
    }
}

/// Loss components in nats; `total` is exactly `(1-rho)*l_mp + rho*l_tc`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_mp: f64,
    pub l_tc: f64,
    pub total: f64,
    pub masked_frames: usize,
}

impl LossBreakdown {
    pub fn new(l_mp: f64, l_tc: f64, rho: f64, masked_frames: usize) -> Self {
        LossBreakdown {
            l_mp,
            l_tc,
            total: (1.0 - rho) * l_mp + rho * l_tc,
            masked_frames,
        }
    }
}

/// Output of a forward pass: per-frame logits over pseudo-label units, CLS
/// logits over topics, and every layer's hidden states (CLS row included).
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub frame_logits: Matrix<f64>,
    pub cls_logits: Vec<f64>,
    pub hidden: Vec<Matrix<f64>>,
}

// ---------------------------------------------------------------------------
// Forward internals
// ---------------------------------------------------------------------------

struct LnCache {
    xhat: Matrix<f64>,
    inv: Vec<f64>,
}

struct BlockCache {
    ln1: LnCache,
    a: Matrix<f64>,
    q: Matrix<f64>,
    k: Matrix<f64>,
    v: Matrix<f64>,
    probs: Vec<Matrix<f64>>,
    ctx: Matrix<f64>,
    ln2: LnCache,
    b: Matrix<f64>,
    h1: Matrix<f64>,
    g: Matrix<f64>,
    x_out: Matrix<f64>,
}

struct ForwardCache {
    norm_x: Matrix<f64>,
    blocks: Vec<BlockCache>,
    ln_f: LnCache,
    y: Matrix<f64>,
    mid: Option<Matrix<f64>>,
    frame_logits: Matrix<f64>,
    cls_logits: Vec<f64>,
}

fn layer_norm(x: &Matrix<f64>, gamma: &Matrix<f64>, beta: &Matrix<f64>) -> (Matrix<f64>, LnCache) {
    let (rows, cols) = x.shape();
    let mut out = Matrix::zeros(rows, cols);
    let mut xhat = Matrix::zeros(rows, cols);
    let mut inv = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
        let s = 1.0 / (var + LN_EPS).sqrt();
        inv[r] = s;
        for c in 0..cols {
            let h = (row[c] - mean) * s;
            xhat[(r, c)] = h;
            out[(r, c)] = gamma[(0, c)] * h + beta[(0, c)];
        }
    }
    (out, LnCache { xhat, inv })
}

/// Returns (dx, d_gamma, d_beta).
fn layer_norm_backward(
    dy: &Matrix<f64>,
    cache: &LnCache,
    gamma: &Matrix<f64>,
) -> (Matrix<f64>, Matrix<f64>, Matrix<f64>) {
    let (rows, cols) = dy.shape();
    let mut dx = Matrix::zeros(rows, cols);
    let mut d_gamma = Matrix::zeros(1, cols);
    let mut d_beta = Matrix::zeros(1, cols);
    for r in 0..rows {
        let mut sum_dxhat = 0.0;
        let mut sum_dxhat_xhat = 0.0;
        for c in 0..cols {
            let d = dy[(r, c)];
            let h = cache.xhat[(r, c)];
            d_gamma[(0, c)] += d * h;
            d_beta[(0, c)] += d;
            let dxhat = d * gamma[(0, c)];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * h;
        }
        let mean_dxhat = sum_dxhat / cols as f64;
        let mean_dxhat_xhat = sum_dxhat_xhat / cols as f64;
        for c in 0..cols {
            let dxhat = dy[(r, c)] * gamma[(0, c)];
            dx[(r, c)] = cache.inv[r] * (dxhat - mean_dxhat - cache.xhat[(r, c)] * mean_dxhat_xhat);
        }
    }
    (dx, d_gamma, d_beta)
}

fn linear(x: &Matrix<f64>, w: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
    let mut out = x.matmul(w);
    for r in 0..out.rows() {
        for (v, &bias) in out.row_mut(r).iter_mut().zip(b.row(0)) {
            *v += bias;
        }
    }
    out
}

/// Returns (dx, dw, db) for `y = x W + b`.
fn linear_backward(
    x: &Matrix<f64>,
    w: &Matrix<f64>,
    dy: &Matrix<f64>,
) -> (Matrix<f64>, Matrix<f64>, Matrix<f64>) {
    let mut dw = Matrix::zeros(w.rows(), w.cols());
    let mut db = Matrix::zeros(1, w.cols());
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dr = dy.row(r);
        for (i, &xv) in xr.iter().enumerate() {
            for (d, &g) in dw.row_mut(i).iter_mut().zip(dr) {
                *d += xv * g;
            }
        }
        for (d, &g) in db.row_mut(0).iter_mut().zip(dr) {
            *d += g;
        }
    }
    (dy.matmul(&w.transpose()), dw, db)
}

const INV_SQRT_2PI: f64 = 0.3989422804014327;

fn gelu(x: f64) -> f64 {
    x * 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
    cdf + x * (-0.5 * x * x).exp() * INV_SQRT_2PI
}

fn softmax_row(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn sinusoidal_position(pos: usize, dim: usize) -> Vec<f64> {
    let mut pe = vec![0.0; dim];
    let mut i = 0;
    while 2 * i < dim {
        let rate = (pos as f64) / 10000f64.powf(2.0 * i as f64 / dim as f64);
        pe[2 * i] = rate.sin();
        if 2 * i + 1 < dim {
            pe[2 * i + 1] = rate.cos();
        }
        i += 1;
    }
    pe
}

fn block_forward(params: &TransformerBlock, cfg: &EncoderConfig, x_in: &Matrix<f64>) -> BlockCache {
    let s = x_in.rows();
    let (heads, dk) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dk as f64).sqrt();

    let (a, ln1) = layer_norm(x_in, &params.ln1_g, &params.ln1_b);
    let q = linear(&a, &params.wq, &params.bq);
    let k = linear(&a, &params.wk, &params.bk);
    let v = linear(&a, &params.wv, &params.bv);

    let mut probs = Vec::with_capacity(heads);
    let mut ctx = Matrix::zeros(s, cfg.model_dim);
    for h in 0..heads {
        let off = h * dk;
        let mut p = Matrix::zeros(s, s);
        for i in 0..s {
            let qi = &q.row(i)[off..off + dk];
            for j in 0..s {
                let kj = &k.row(j)[off..off + dk];
                p[(i, j)] = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            softmax_row(p.row_mut(i));
        }
        for i in 0..s {
            for j in 0..s {
                let w = p[(i, j)];
                for c in 0..dk {
                    ctx[(i, off + c)] += w * v[(j, off + c)];
                }
            }
        }
        probs.push(p);
    }

    let o = linear(&ctx, &params.wo, &params.bo);
    let mut x_mid = x_in.clone();
    for (d, &v) in x_mid.data_mut().iter_mut().zip(o.data()) {
        *d += v;
    }

    let (b, ln2) = layer_norm(&x_mid, &params.ln2_g, &params.ln2_b);
    let h1 = linear(&b, &params.w1, &params.b1);
    let g = h1.map(gelu);
    let ff = linear(&g, &params.w2, &params.b2);
    let mut x_out = x_mid;
    for (d, &v) in x_out.data_mut().iter_mut().zip(ff.data()) {
        *d += v;
    }

    BlockCache {
        ln1,
        a,
        q,
        k,
        v,
        probs,
        ctx,
        ln2,
        b,
        h1,
        g,
        x_out,
    }
}

fn run_forward(
    params: &EncoderParams,
    batch: &Batch,
    layer_limit: Option<usize>,
) -> Result<ForwardCache> {
    batch.validate(&params.cfg)?;
    let cfg = &params.cfg;
    let t = batch.feats.rows();
    let s = t + 1;

    // Front end: per-dimension standardization, projection to model width,
    // mask replacement, CLS at position 0, optional sinusoidal positions.
    let mut norm_x = Matrix::zeros(t, cfg.input_dim);
    for r in 0..t {
        for c in 0..cfg.input_dim {
            norm_x[(r, c)] =
                (batch.feats[(r, c)] - params.feat_mean[(0, c)]) / params.feat_std[(0, c)];
        }
    }
    let proj = linear(&norm_x, &params.front_w, &params.front_b);
    let mut masked = vec![false; t];
    for &m in batch.mask {
        masked[m] = true;
    }
    let mut x = Matrix::zeros(s, cfg.model_dim);
    x.row_mut(0).copy_from_slice(params.cls.row(0));
    for (r, &is_masked) in masked.iter().enumerate() {
        let src = if is_masked {
            params.mask_emb.row(0)
        } else {
            proj.row(r)
        };
        x.row_mut(r + 1).copy_from_slice(src);
    }
    if cfg.positional {
        for r in 0..s {
            let pe = sinusoidal_position(r, cfg.model_dim);
            for (v, p) in x.row_mut(r).iter_mut().zip(pe) {
                *v += p;
            }
        }
    }

    let depth = layer_limit.unwrap_or(cfg.layers).min(cfg.layers);
    let mut blocks: Vec<BlockCache> = Vec::with_capacity(depth);
    for b in 0..depth {
        let x_in = blocks.last().map_or(&x, |c| &c.x_out);
        let cache = block_forward(&params.blocks[b], cfg, x_in);
        blocks.push(cache);
    }

    let last_state = blocks.last().map_or(&x, |c| &c.x_out);
    let (y, ln_f) = layer_norm(last_state, &params.final_ln_g, &params.final_ln_b);
    let mut y_frames = Matrix::zeros(t, cfg.model_dim);
    for r in 0..t {
        y_frames.row_mut(r).copy_from_slice(y.row(r + 1));
    }
    let frame_logits = linear(&y_frames, &params.out_w, &params.out_b);
    let cls_state = Matrix::from_vec(1, cfg.model_dim, y.row(0).to_vec())?;
    let (cls_logits, mid) = match &params.topic {
        TopicHead::Direct { w, b } => (linear(&cls_state, w, b).row(0).to_vec(), None),
        TopicHead::Bottleneck { w1, b1, w2, b2 } => {
            let mid = linear(&cls_state, w1, b1);
            (linear(&mid, w2, b2).row(0).to_vec(), Some(mid))
        }
    };

    Ok(ForwardCache {
        norm_x,
        blocks,
        ln_f,
        y,
        mid,
        frame_logits,
        cls_logits,
    })
}

/// Forward pass: frame logits for positions `1..=T`, topic logits from the
/// CLS position, and all per-layer hidden states.
pub fn forward(params: &EncoderParams, batch: &Batch) -> Result<ForwardPass> {
    let cache = run_forward(params, batch, None)?;
    Ok(ForwardPass {
        frame_logits: cache.frame_logits,
        cls_logits: cache.cls_logits,
        hidden: cache.blocks.into_iter().map(|b| b.x_out).collect(),
    })
}

fn loss_from_cache(cache: &ForwardCache, batch: &Batch, rho: f64) -> LossBreakdown {
    let mut l_mp = 0.0;
    for &t in batch.mask {
        let row = cache.frame_logits.row(t);
        l_mp += log_sum_exp(row) - row[batch.targets[t] as usize];
    }
    let l_tc = log_sum_exp(&cache.cls_logits) - cache.cls_logits[batch.topic as usize];
    LossBreakdown::new(l_mp, l_tc, rho, batch.mask.len())
}

/// Loss components for one utterance. Masked prediction sums over the mask
/// set only; an empty mask gives exactly zero.
pub fn loss(params: &EncoderParams, batch: &Batch) -> Result<LossBreakdown> {
    let cache = run_forward(params, batch, None)?;
    Ok(loss_from_cache(&cache, batch, params.cfg.rho))
}

/// Reverse-mode gradients of `LossBreakdown::total` for every trainable
/// tensor. The returned container shares the parameter layout; the CLS and
/// feature-norm slots stay identically zero.
pub fn grad(params: &EncoderParams, batch: &Batch) -> Result<(LossBreakdown, EncoderParams)> {
    let cache = run_forward(params, batch, None)?;
    let breakdown = loss_from_cache(&cache, batch, params.cfg.rho);
    if !breakdown.total.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss (l_mp={}, l_tc={})",
            breakdown.l_mp, breakdown.l_tc
        )));
    }
    let cfg = &params.cfg;
    let rho = cfg.rho;
    let t = batch.feats.rows();
    let s = t + 1;
    let mut grads = params.zeros_like();

    // Softmax cross-entropy heads.
    let mut d_y = Matrix::zeros(s, cfg.model_dim);
    {
        let mut d_frame = Matrix::zeros(t, cfg.vocab_size);
        for &m in batch.mask {
            let mut sm = cache.frame_logits.row(m).to_vec();
            softmax_row(&mut sm);
            sm[batch.targets[m] as usize] -= 1.0;
            for (dst, &v) in d_frame.row_mut(m).iter_mut().zip(&sm) {
                *dst = (1.0 - rho) * v;
            }
        }
        let mut y_frames = Matrix::zeros(t, cfg.model_dim);
        for r in 0..t {
            y_frames.row_mut(r).copy_from_slice(cache.y.row(r + 1));
        }
        let (d_states, dw, db) = linear_backward(&y_frames, &params.out_w, &d_frame);
        grads.add_grad("out_w", &dw);
        grads.add_grad("out_b", &db);
        for r in 0..t {
            for (dst, &v) in d_y.row_mut(r + 1).iter_mut().zip(d_states.row(r)) {
                *dst += v;
            }
        }

        let mut d_cls = cache.cls_logits.clone();
        softmax_row(&mut d_cls);
        d_cls[batch.topic as usize] -= 1.0;
        for v in d_cls.iter_mut() {
            *v *= rho;
        }
        let d_cls = Matrix::from_vec(1, cfg.num_topics, d_cls)?;
        let cls_state = Matrix::from_vec(1, cfg.model_dim, cache.y.row(0).to_vec())?;
        let d_cls_state = match &params.topic {
            TopicHead::Direct { w, .. } => {
                let (dx, dw, db) = linear_backward(&cls_state, w, &d_cls);
                grads.add_grad("topic_w", &dw);
                grads.add_grad("topic_b", &db);
                dx
            }
            TopicHead::Bottleneck { w1, w2, .. } => {
                let mid = cache.mid.as_ref().expect("bottleneck cache");
                let (d_mid, dw2, db2) = linear_backward(mid, w2, &d_cls);
                grads.add_grad("topic_w2", &dw2);
                grads.add_grad("topic_b2", &db2);
                let (dx, dw1, db1) = linear_backward(&cls_state, w1, &d_mid);
                grads.add_grad("topic_w1", &dw1);
                grads.add_grad("topic_b1", &db1);
                dx
            }
        };
        for (dst, &v) in d_y.row_mut(0).iter_mut().zip(d_cls_state.row(0)) {
            *dst += v;
        }
    }

    // Final layer norm back to the top of the stack.
    let (mut d_x, dg, db) = layer_norm_backward(&d_y, &cache.ln_f, &params.final_ln_g);
    grads.add_grad("final_ln_g", &dg);
    grads.add_grad("final_ln_b", &db);

    for (b_idx, bc) in cache.blocks.iter().enumerate().rev() {
        d_x = block_backward(&params.blocks[b_idx], cfg, bc, &d_x, b_idx, &mut grads);
    }

    // Front end: rows 1.. map back to the projection or the mask embedding;
    // the CLS row and the positional offsets reach no trainable input.
    let mut masked = vec![false; t];
    for &m in batch.mask {
        masked[m] = true;
    }
    let mut d_front_w = Matrix::zeros(cfg.input_dim, cfg.model_dim);
    let mut d_front_b = Matrix::zeros(1, cfg.model_dim);
    let mut d_mask_emb = Matrix::zeros(1, cfg.model_dim);
    for (r, &is_masked) in masked.iter().enumerate() {
        let d_row = d_x.row(r + 1);
        if is_masked {
            for (dst, &v) in d_mask_emb.row_mut(0).iter_mut().zip(d_row) {
                *dst += v;
            }
        } else {
            for (i, &xv) in cache.norm_x.row(r).iter().enumerate() {
                for (dst, &v) in d_front_w.row_mut(i).iter_mut().zip(d_row) {
                    *dst += xv * v;
                }
            }
            for (dst, &v) in d_front_b.row_mut(0).iter_mut().zip(d_row) {
                *dst += v;
            }
        }
    }
    grads.add_grad("front_w", &d_front_w);
    grads.add_grad("front_b", &d_front_b);
    grads.add_grad("mask_emb", &d_mask_emb);

    Ok((breakdown, grads))
}

fn block_backward(
    block: &TransformerBlock,
    cfg: &EncoderConfig,
    bc: &BlockCache,
    d_out: &Matrix<f64>,
    b_idx: usize,
    grads: &mut EncoderParams,
) -> Matrix<f64> {
    let s = bc.a.rows();
    let (heads, dk) = (cfg.heads, cfg.head_dim());
    let scale = 1.0 / (dk as f64).sqrt();
    let name = |field: &str| format!("block{b_idx}.{field}");

    // Feed-forward half: x_out = x_mid + (gelu(LN2(x_mid) W1 + b1)) W2 + b2.
    let (d_g, dw2, db2) = linear_backward(&bc.g, &block.w2, d_out);
    grads.add_grad(&name("w2"), &dw2);
    grads.add_grad(&name("b2"), &db2);
    let mut d_h1 = d_g;
    for (d, &pre) in d_h1.data_mut().iter_mut().zip(bc.h1.data()) {
        *d *= gelu_grad(pre);
    }
    let (d_b, dw1, db1) = linear_backward(&bc.b, &block.w1, &d_h1);
    grads.add_grad(&name("w1"), &dw1);
    grads.add_grad(&name("b1"), &db1);
    let (d_ln2_in, dg2, dbeta2) = layer_norm_backward(&d_b, &bc.ln2, &block.ln2_g);
    grads.add_grad(&name("ln2_g"), &dg2);
    grads.add_grad(&name("ln2_b"), &dbeta2);
    let mut d_x_mid = d_out.clone();
    for (d, &v) in d_x_mid.data_mut().iter_mut().zip(d_ln2_in.data()) {
        *d += v;
    }

    // Attention half: x_mid = x_in + (ctx Wo + bo).
    let (d_ctx, dwo, dbo) = linear_backward(&bc.ctx, &block.wo, &d_x_mid);
    grads.add_grad(&name("wo"), &dwo);
    grads.add_grad(&name("bo"), &dbo);

    let mut d_q = Matrix::zeros(s, cfg.model_dim);
    let mut d_k = Matrix::zeros(s, cfg.model_dim);
    let mut d_v = Matrix::zeros(s, cfg.model_dim);
    for h in 0..heads {
        let off = h * dk;
        let p = &bc.probs[h];
        let mut d_probs = Matrix::<f64>::zeros(s, s);
        for i in 0..s {
            let d_ctx_row = bc_slice(&d_ctx, i, off, dk);
            for j in 0..s {
                let vj = bc_slice(&bc.v, j, off, dk);
                d_probs[(i, j)] = d_ctx_row.iter().zip(vj).map(|(a, b)| a * b).sum();
                let w = p[(i, j)];
                let dst = &mut d_v.row_mut(j)[off..off + dk];
                for (d, &g) in dst.iter_mut().zip(d_ctx_row) {
                    *d += w * g;
                }
            }
        }
        // Softmax backward: dS = P .* (dP - rowsum(dP .* P)).
        for i in 0..s {
            let dot: f64 = (0..s).map(|j| d_probs[(i, j)] * p[(i, j)]).sum();
            for j in 0..s {
                d_probs[(i, j)] = p[(i, j)] * (d_probs[(i, j)] - dot);
            }
        }
        for i in 0..s {
            for j in 0..s {
                let ds = d_probs[(i, j)] * scale;
                for c in 0..dk {
                    d_q[(i, off + c)] += ds * bc.k[(j, off + c)];
                    d_k[(j, off + c)] += ds * bc.q[(i, off + c)];
                }
            }
        }
    }

    let (mut d_a, dwq, dbq) = linear_backward(&bc.a, &block.wq, &d_q);
    grads.add_grad(&name("wq"), &dwq);
    grads.add_grad(&name("bq"), &dbq);
    let (d_a_k, dwk, dbk) = linear_backward(&bc.a, &block.wk, &d_k);
    grads.add_grad(&name("wk"), &dwk);
    grads.add_grad(&name("bk"), &dbk);
    let (d_a_v, dwv, dbv) = linear_backward(&bc.a, &block.wv, &d_v);
    grads.add_grad(&name("wv"), &dwv);
    grads.add_grad(&name("bv"), &dbv);
    for (d, (&x, &y)) in d_a
        .data_mut()
        .iter_mut()
        .zip(d_a_k.data().iter().zip(d_a_v.data()))
    {
        *d += x + y;
    }

    let (d_ln1_in, dg1, dbeta1) = layer_norm_backward(&d_a, &bc.ln1, &block.ln1_g);
    grads.add_grad(&name("ln1_g"), &dg1);
    grads.add_grad(&name("ln1_b"), &dbeta1);
    let mut d_x_in = d_x_mid;
    for (d, &v) in d_x_in.data_mut().iter_mut().zip(d_ln1_in.data()) {
        *d += v;
    }
    d_x_in
}

fn bc_slice(m: &Matrix<f64>, row: usize, off: usize, len: usize) -> &[f64] {
    &m.row(row)[off..off + len]
}

/// Hidden states of (1-based) layer `layer` for the non-CLS positions, with
/// no masking applied; the iteration-1 feature source. Runs the stack only
/// up to the requested depth.
pub fn extract_layer(
    params: &EncoderParams,
    feats: &Matrix<f64>,
    layer: usize,
) -> Result<Matrix<f64>> {
    if layer == 0 || layer > params.cfg.layers {
        return Err(Error::InvalidParameter(format!(
            "layer {layer} outside 1..={}",
            params.cfg.layers
        )));
    }
    let targets = vec![0u32; feats.rows()];
    let batch = Batch {
        feats,
        targets: &targets,
        mask: &[],
        topic: 0,
    };
    let cache = run_forward(params, &batch, Some(layer))?;
    let state = &cache.blocks[layer - 1].x_out;
    let mut out = Matrix::zeros(feats.rows(), params.cfg.model_dim);
    for r in 0..feats.rows() {
        out.row_mut(r).copy_from_slice(state.row(r + 1));
    }
    Ok(out)
}
