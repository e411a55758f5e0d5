//! A small bidirectional masked LM with hand-written exact gradients.
//!
//! Embeddings + learned positions, a stack of pre-norm attention/feedforward
//! blocks, and a vocabulary-tied output head. Forward caches every
//! activation the backward pass needs; backward returns gradients for all
//! parameters given gradients on the output logits. There are no stochastic
//! layers, so analytic gradients are checkable against finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::scalar::Scalar;

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("d_model {d_model} not divisible by n_heads {n_heads}")]
    BadHeads { d_model: usize, n_heads: usize },
    #[error("model dimensions must be nonzero")]
    ZeroDim,
    #[error("input length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("input is empty")]
    EmptyInput,
    #[error("token id {id} out of range for vocabulary of {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("position {pos} out of range for length {len}")]
    BadPosition { pos: usize, len: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale default: trains in minutes on one CPU core.
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            d_model: 64,
            n_layers: 2,
            n_heads: 2,
            d_ff: 256,
            max_len: 128,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab_size == 0
            || self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_ff == 0
            || self.max_len == 0
        {
            return Err(ModelError::ZeroDim);
        }
        if self.d_model % self.n_heads != 0 {
            return Err(ModelError::BadHeads { d_model: self.d_model, n_heads: self.n_heads });
        }
        Ok(())
    }
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat<S> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<S>,
}

impl<S: Scalar> Mat<S> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![S::zero(); rows * cols] }
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[S] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// c += a @ b
fn matmul_acc<S: Scalar>(c: &mut Mat<S>, a: &Mat<S>, b: &Mat<S>) {
    debug_assert_eq!(a.cols, b.rows);
    debug_assert_eq!(c.rows, a.rows);
    debug_assert_eq!(c.cols, b.cols);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (k, &aik) in a_row.iter().enumerate() {
            let b_row = b.row(k);
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += aik * bj;
            }
        }
    }
}

fn matmul<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    let mut c = Mat::zeros(a.rows, b.cols);
    matmul_acc(&mut c, a, b);
    c
}

/// c += a @ b^T
fn matmul_nt_acc<S: Scalar>(c: &mut Mat<S>, a: &Mat<S>, b: &Mat<S>) {
    debug_assert_eq!(a.cols, b.cols);
    debug_assert_eq!(c.rows, a.rows);
    debug_assert_eq!(c.cols, b.rows);
    for i in 0..a.rows {
        let a_row = a.row(i);
        let c_row = c.row_mut(i);
        for (j, cj) in c_row.iter_mut().enumerate() {
            *cj += dot(a_row, b.row(j));
        }
    }
}

fn matmul_nt<S: Scalar>(a: &Mat<S>, b: &Mat<S>) -> Mat<S> {
    let mut c = Mat::zeros(a.rows, b.rows);
    matmul_nt_acc(&mut c, a, b);
    c
}

/// c += a^T @ b  (a: t x m, b: t x n, c: m x n)
fn matmul_tn_acc<S: Scalar>(c: &mut Mat<S>, a: &Mat<S>, b: &Mat<S>) {
    debug_assert_eq!(a.rows, b.rows);
    debug_assert_eq!(c.rows, a.cols);
    debug_assert_eq!(c.cols, b.cols);
    for t in 0..a.rows {
        let a_row = a.row(t);
        let b_row = b.row(t);
        for (i, &ati) in a_row.iter().enumerate() {
            let c_row = c.row_mut(i);
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += ati * bj;
            }
        }
    }
}

/// Eight-lane dot product; the split accumulators let the compiler
/// vectorize without reassociating a strict sequential sum.
#[inline]
fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    let mut acc = [S::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let base = c * 8;
        for l in 0..8 {
            acc[l] += a[base + l] * b[base + l];
        }
    }
    let mut tail = S::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    acc.iter().fold(tail, |s, &x| s + x)
}

fn add_bias<S: Scalar>(m: &mut Mat<S>, bias: &[S]) {
    for i in 0..m.rows {
        for (x, &b) in m.row_mut(i).iter_mut().zip(bias) {
            *x += b;
        }
    }
}

fn col_sum_acc<S: Scalar>(acc: &mut [S], m: &Mat<S>) {
    for i in 0..m.rows {
        for (a, &x) in acc.iter_mut().zip(m.row(i)) {
            *a += x;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams<S> {
    pub gain: Vec<S>,
    pub bias: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnParams<S> {
    pub wq: Mat<S>,
    pub wk: Mat<S>,
    pub wv: Mat<S>,
    pub wo: Mat<S>,
    pub bq: Vec<S>,
    pub bk: Vec<S>,
    pub bv: Vec<S>,
    pub bo: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FfParams<S> {
    pub w1: Mat<S>,
    pub b1: Vec<S>,
    pub w2: Mat<S>,
    pub b2: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<S> {
    pub norm1: NormParams<S>,
    pub attn: AttnParams<S>,
    pub norm2: NormParams<S>,
    pub ff: FfParams<S>,
}

/// All model parameters. The output head is tied to `tok_emb` plus
/// `out_bias`.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    pub config: ModelConfig,
    pub tok_emb: Mat<S>,
    pub pos_emb: Mat<S>,
    pub layers: Vec<LayerParams<S>>,
    pub final_norm: NormParams<S>,
    pub out_bias: Vec<S>,
}

/// A borrowed named tensor, used for serialization and inspection.
pub struct TensorRef<'a, S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [S],
}

impl<S: Scalar> Params<S> {
    /// All-zero parameters with the shapes implied by `config`.
    pub fn zeros(config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let d = config.d_model;
        let norm = || NormParams { gain: vec![S::zero(); d], bias: vec![S::zero(); d] };
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                norm1: norm(),
                attn: AttnParams {
                    wq: Mat::zeros(d, d),
                    wk: Mat::zeros(d, d),
                    wv: Mat::zeros(d, d),
                    wo: Mat::zeros(d, d),
                    bq: vec![S::zero(); d],
                    bk: vec![S::zero(); d],
                    bv: vec![S::zero(); d],
                    bo: vec![S::zero(); d],
                },
                norm2: norm(),
                ff: FfParams {
                    w1: Mat::zeros(d, config.d_ff),
                    b1: vec![S::zero(); config.d_ff],
                    w2: Mat::zeros(config.d_ff, d),
                    b2: vec![S::zero(); d],
                },
            })
            .collect();
        Ok(Self {
            config: *config,
            tok_emb: Mat::zeros(config.vocab_size, d),
            pos_emb: Mat::zeros(config.max_len, d),
            layers,
            final_norm: norm(),
            out_bias: vec![S::zero(); config.vocab_size],
        })
    }

    /// Deterministic initialization: weights from a zero-mean normal with
    /// scale 1/sqrt(d_model); layer-norm gains 1; all biases 0.
    pub fn init(config: &ModelConfig) -> Result<Self, ModelError> {
        let mut params = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let scale = 1.0 / (config.d_model as f64).sqrt();
        let normal = Normal::new(0.0, scale).expect("positive std");
        let mut fill = |m: &mut Mat<S>| {
            for x in &mut m.data {
                *x = S::from_f64_lossy(normal.sample(&mut rng));
            }
        };
        fill(&mut params.tok_emb);
        fill(&mut params.pos_emb);
        for layer in &mut params.layers {
            fill(&mut layer.attn.wq);
            fill(&mut layer.attn.wk);
            fill(&mut layer.attn.wv);
            fill(&mut layer.attn.wo);
            fill(&mut layer.ff.w1);
            fill(&mut layer.ff.w2);
            layer.norm1.gain.fill(S::one());
            layer.norm2.gain.fill(S::one());
        }
        params.final_norm.gain.fill(S::one());
        Ok(params)
    }

    /// Named tensors in a fixed order.
    pub fn named_tensors(&self) -> Vec<TensorRef<'_, S>> {
        fn mat<'a, S>(name: String, m: &'a Mat<S>) -> TensorRef<'a, S> {
            TensorRef { name, shape: vec![m.rows, m.cols], data: &m.data }
        }
        fn vec_<'a, S>(name: String, v: &'a [S]) -> TensorRef<'a, S> {
            TensorRef { name, shape: vec![v.len()], data: v }
        }
        let mut out = Vec::new();
        out.push(mat("tok_emb".into(), &self.tok_emb));
        out.push(mat("pos_emb".into(), &self.pos_emb));
        for (i, layer) in self.layers.iter().enumerate() {
            out.push(vec_(format!("layer{i}.norm1.gain"), &layer.norm1.gain));
            out.push(vec_(format!("layer{i}.norm1.bias"), &layer.norm1.bias));
            out.push(mat(format!("layer{i}.attn.wq"), &layer.attn.wq));
            out.push(mat(format!("layer{i}.attn.wk"), &layer.attn.wk));
            out.push(mat(format!("layer{i}.attn.wv"), &layer.attn.wv));
            out.push(mat(format!("layer{i}.attn.wo"), &layer.attn.wo));
            out.push(vec_(format!("layer{i}.attn.bq"), &layer.attn.bq));
            out.push(vec_(format!("layer{i}.attn.bk"), &layer.attn.bk));
            out.push(vec_(format!("layer{i}.attn.bv"), &layer.attn.bv));
            out.push(vec_(format!("layer{i}.attn.bo"), &layer.attn.bo));
            out.push(vec_(format!("layer{i}.norm2.gain"), &layer.norm2.gain));
            out.push(vec_(format!("layer{i}.norm2.bias"), &layer.norm2.bias));
            out.push(mat(format!("layer{i}.ff.w1"), &layer.ff.w1));
            out.push(vec_(format!("layer{i}.ff.b1"), &layer.ff.b1));
            out.push(mat(format!("layer{i}.ff.w2"), &layer.ff.w2));
            out.push(vec_(format!("layer{i}.ff.b2"), &layer.ff.b2));
        }
        out.push(vec_("final_norm.gain".into(), &self.final_norm.gain));
        out.push(vec_("final_norm.bias".into(), &self.final_norm.bias));
        out.push(vec_("out_bias".into(), &self.out_bias));
        out
    }

    /// Mutable views over every tensor, in [`Params::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [S])> {
        let mut out: Vec<(String, &mut [S])> = Vec::new();
        out.push(("tok_emb".into(), self.tok_emb.data.as_mut_slice()));
        out.push(("pos_emb".into(), self.pos_emb.data.as_mut_slice()));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.norm1.gain"), layer.norm1.gain.as_mut_slice()));
            out.push((format!("layer{i}.norm1.bias"), layer.norm1.bias.as_mut_slice()));
            out.push((format!("layer{i}.attn.wq"), layer.attn.wq.data.as_mut_slice()));
            out.push((format!("layer{i}.attn.wk"), layer.attn.wk.data.as_mut_slice()));
            out.push((format!("layer{i}.attn.wv"), layer.attn.wv.data.as_mut_slice()));
            out.push((format!("layer{i}.attn.wo"), layer.attn.wo.data.as_mut_slice()));
            out.push((format!("layer{i}.attn.bq"), layer.attn.bq.as_mut_slice()));
            out.push((format!("layer{i}.attn.bk"), layer.attn.bk.as_mut_slice()));
            out.push((format!("layer{i}.attn.bv"), layer.attn.bv.as_mut_slice()));
            out.push((format!("layer{i}.attn.bo"), layer.attn.bo.as_mut_slice()));
            out.push((format!("layer{i}.norm2.gain"), layer.norm2.gain.as_mut_slice()));
            out.push((format!("layer{i}.norm2.bias"), layer.norm2.bias.as_mut_slice()));
            out.push((format!("layer{i}.ff.w1"), layer.ff.w1.data.as_mut_slice()));
            out.push((format!("layer{i}.ff.b1"), layer.ff.b1.as_mut_slice()));
            out.push((format!("layer{i}.ff.w2"), layer.ff.w2.data.as_mut_slice()));
            out.push((format!("layer{i}.ff.b2"), layer.ff.b2.as_mut_slice()));
        }
        out.push(("final_norm.gain".into(), self.final_norm.gain.as_mut_slice()));
        out.push(("final_norm.bias".into(), self.final_norm.bias.as_mut_slice()));
        out.push(("out_bias".into(), self.out_bias.as_mut_slice()));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|t| t.data.len()).sum()
    }

    /// Elementwise accumulate, used to sum gradients over a batch.
    pub fn add_assign(&mut self, other: &Params<S>) {
        let other_tensors = other.named_tensors();
        for (mine, theirs) in self.tensors_mut().iter_mut().zip(&other_tensors) {
            debug_assert_eq!(mine.0, theirs.name);
            for (a, &b) in mine.1.iter_mut().zip(theirs.data) {
                *a += b;
            }
        }
    }

    /// Elementwise scale, used to average summed gradients.
    pub fn scale(&mut self, factor: S) {
        for (_, data) in self.tensors_mut().iter_mut() {
            for x in data.iter_mut() {
                *x *= factor;
            }
        }
    }
}

struct LayerCache<S> {
    x_in: Mat<S>,
    mean1: Vec<S>,
    rstd1: Vec<S>,
    normed1: Mat<S>,
    q: Mat<S>,
    k: Mat<S>,
    v: Mat<S>,
    attn_probs: Vec<Mat<S>>,
    head_concat: Mat<S>,
    x_mid: Mat<S>,
    mean2: Vec<S>,
    rstd2: Vec<S>,
    normed2: Mat<S>,
    ff_pre: Mat<S>,
    ff_act: Mat<S>,
}

struct Cache<S> {
    ids: Vec<u32>,
    layers: Vec<LayerCache<S>>,
    x_final: Mat<S>,
    mean_f: Vec<S>,
    rstd_f: Vec<S>,
    hidden: Mat<S>,
}

/// Logits plus the cached activations backward needs.
pub struct ForwardOutput<S> {
    pub logits: Mat<S>,
    cache: Cache<S>,
}

impl<S: Scalar> ForwardOutput<S> {
    /// Final hidden states (after the last layer norm).
    pub fn hidden(&self) -> &Mat<S> {
        &self.cache.hidden
    }
}

fn layer_norm<S: Scalar>(x: &Mat<S>, norm: &NormParams<S>) -> (Mat<S>, Vec<S>, Vec<S>) {
    let d = x.cols;
    let mut out = Mat::zeros(x.rows, d);
    let mut means = Vec::with_capacity(x.rows);
    let mut rstds = Vec::with_capacity(x.rows);
    for i in 0..x.rows {
        let row = x.row(i);
        let mean = row.iter().map(|v| v.widen()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.widen() - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + LN_EPS).sqrt();
        let (mean_s, rstd_s) = (S::from_f64_lossy(mean), S::from_f64_lossy(rstd));
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            let xhat = (row[j] - mean_s) * rstd_s;
            *o = norm.gain[j] * xhat + norm.bias[j];
        }
        means.push(mean_s);
        rstds.push(rstd_s);
    }
    (out, means, rstds)
}

fn layer_norm_backward<S: Scalar>(
    d_out: &Mat<S>,
    x: &Mat<S>,
    mean: &[S],
    rstd: &[S],
    norm: &NormParams<S>,
    d_norm: &mut NormParams<S>,
) -> Mat<S> {
    let d = x.cols;
    let inv_d = S::from_f64_lossy(1.0 / d as f64);
    let mut dx = Mat::zeros(x.rows, d);
    for i in 0..x.rows {
        let row = x.row(i);
        let dy = d_out.row(i);
        let (m, r) = (mean[i], rstd[i]);
        let mut sum_dxhat = S::zero();
        let mut sum_dxhat_xhat = S::zero();
        for j in 0..d {
            let xhat = (row[j] - m) * r;
            let dxhat = dy[j] * norm.gain[j];
            d_norm.gain[j] += dy[j] * xhat;
            d_norm.bias[j] += dy[j];
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
        }
        let mean_dxhat = sum_dxhat * inv_d;
        let mean_dxhat_xhat = sum_dxhat_xhat * inv_d;
        for j in 0..d {
            let xhat = (row[j] - m) * r;
            let dxhat = dy[j] * norm.gain[j];
            dx.row_mut(i)[j] = r * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
    dx
}

fn softmax_rows_inplace<S: Scalar>(m: &mut Mat<S>) {
    for i in 0..m.rows {
        let row = m.row_mut(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, v| a.max(v.widen()));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            let e = (v.widen() - max).exp();
            sum += e;
            *v = S::from_f64_lossy(e);
        }
        let inv = S::from_f64_lossy(1.0 / sum);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn head_slice<S: Scalar>(m: &Mat<S>, head: usize, d_head: usize) -> Mat<S> {
    let mut out = Mat::zeros(m.rows, d_head);
    for i in 0..m.rows {
        out.row_mut(i).copy_from_slice(&m.row(i)[head * d_head..(head + 1) * d_head]);
    }
    out
}

fn head_slice_add<S: Scalar>(m: &mut Mat<S>, head: usize, d_head: usize, src: &Mat<S>) {
    for i in 0..m.rows {
        for (dst, &s) in m.row_mut(i)[head * d_head..(head + 1) * d_head].iter_mut().zip(src.row(i)) {
            *dst += s;
        }
    }
}

/// Runs the model over `ids`, returning per-position vocabulary logits and
/// the activation cache.
pub fn forward<S: Scalar>(params: &Params<S>, ids: &[u32]) -> Result<ForwardOutput<S>, ModelError> {
    let cfg = &params.config;
    if ids.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    if ids.len() > cfg.max_len {
        return Err(ModelError::TooLong { len: ids.len(), max_len: cfg.max_len });
    }
    for &id in ids {
        if id as usize >= cfg.vocab_size {
            return Err(ModelError::BadToken { id, vocab: cfg.vocab_size });
        }
    }
    let (t, d) = (ids.len(), cfg.d_model);
    let n_heads = cfg.n_heads;
    let d_head = d / n_heads;
    let scale = S::from_f64_lossy(1.0 / (d_head as f64).sqrt());

    let mut x = Mat::zeros(t, d);
    for (i, &id) in ids.iter().enumerate() {
        for ((xo, &e), &p) in x
            .row_mut(i)
            .iter_mut()
            .zip(params.tok_emb.row(id as usize))
            .zip(params.pos_emb.row(i))
        {
            *xo = e + p;
        }
    }

    let mut layer_caches = Vec::with_capacity(cfg.n_layers);
    for layer in &params.layers {
        let x_in = x.clone();
        let (normed1, mean1, rstd1) = layer_norm(&x_in, &layer.norm1);
        let mut q = matmul(&normed1, &layer.attn.wq);
        add_bias(&mut q, &layer.attn.bq);
        let mut k = matmul(&normed1, &layer.attn.wk);
        add_bias(&mut k, &layer.attn.bk);
        let mut v = matmul(&normed1, &layer.attn.wv);
        add_bias(&mut v, &layer.attn.bv);

        let mut head_concat = Mat::zeros(t, d);
        let mut attn_probs = Vec::with_capacity(n_heads);
        for h in 0..n_heads {
            let qh = head_slice(&q, h, d_head);
            let kh = head_slice(&k, h, d_head);
            let vh = head_slice(&v, h, d_head);
            let mut scores = matmul_nt(&qh, &kh);
            for s in &mut scores.data {
                *s *= scale;
            }
            softmax_rows_inplace(&mut scores);
            let oh = matmul(&scores, &vh);
            head_slice_add(&mut head_concat, h, d_head, &oh);
            attn_probs.push(scores);
        }
        let mut attn_out = matmul(&head_concat, &layer.attn.wo);
        add_bias(&mut attn_out, &layer.attn.bo);
        let mut x_mid = x_in.clone();
        for (xm, &a) in x_mid.data.iter_mut().zip(&attn_out.data) {
            *xm += a;
        }

        let (normed2, mean2, rstd2) = layer_norm(&x_mid, &layer.norm2);
        let mut ff_pre = matmul(&normed2, &layer.ff.w1);
        add_bias(&mut ff_pre, &layer.ff.b1);
        let mut ff_act = Mat::zeros(t, cfg.d_ff);
        for (a, &p) in ff_act.data.iter_mut().zip(&ff_pre.data) {
            *a = S::from_f64_lossy(gelu(p.widen()));
        }
        let mut ff_out = matmul(&ff_act, &layer.ff.w2);
        add_bias(&mut ff_out, &layer.ff.b2);
        let mut x_out = x_mid.clone();
        for (xo, &f) in x_out.data.iter_mut().zip(&ff_out.data) {
            *xo += f;
        }

        layer_caches.push(LayerCache {
            x_in,
            mean1,
            rstd1,
            normed1,
            q,
            k,
            v,
            attn_probs,
            head_concat,
            x_mid,
            mean2,
            rstd2,
            normed2,
            ff_pre,
            ff_act,
        });
        x = x_out;
    }

    let x_final = x;
    let (hidden, mean_f, rstd_f) = layer_norm(&x_final, &params.final_norm);
    let mut logits = matmul_nt(&hidden, &params.tok_emb);
    add_bias(&mut logits, &params.out_bias);

    Ok(ForwardOutput {
        logits,
        cache: Cache { ids: ids.to_vec(), layers: layer_caches, x_final, mean_f, rstd_f, hidden },
    })
}

/// Gradients of a scalar loss with respect to every parameter, given the
/// loss gradient on the logits.
pub fn backward<S: Scalar>(
    params: &Params<S>,
    fwd: &ForwardOutput<S>,
    d_logits: &Mat<S>,
) -> Result<Params<S>, ModelError> {
    backward_from(params, fwd, Some(d_logits), None)
}

/// Backward entry for heads attached to the final hidden states (bypassing
/// the vocabulary head).
pub fn backward_from_hidden<S: Scalar>(
    params: &Params<S>,
    fwd: &ForwardOutput<S>,
    d_hidden: &Mat<S>,
) -> Result<Params<S>, ModelError> {
    backward_from(params, fwd, None, Some(d_hidden))
}

fn backward_from<S: Scalar>(
    params: &Params<S>,
    fwd: &ForwardOutput<S>,
    d_logits: Option<&Mat<S>>,
    d_hidden_extra: Option<&Mat<S>>,
) -> Result<Params<S>, ModelError> {
    let cfg = &params.config;
    let cache = &fwd.cache;
    let t = cache.ids.len();
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let d_head = d / n_heads;
    let scale = S::from_f64_lossy(1.0 / (d_head as f64).sqrt());

    let mut grads = Params::zeros(cfg)?;

    // Vocabulary head: logits = hidden @ tok_emb^T + out_bias.
    let mut d_hidden = Mat::zeros(t, d);
    if let Some(dl) = d_logits {
        debug_assert_eq!(dl.rows, t);
        debug_assert_eq!(dl.cols, cfg.vocab_size);
        matmul_acc(&mut d_hidden, dl, &params.tok_emb);
        matmul_tn_acc(&mut grads.tok_emb, dl, &cache.hidden);
        col_sum_acc(&mut grads.out_bias, dl);
    }
    if let Some(dh) = d_hidden_extra {
        for (a, &b) in d_hidden.data.iter_mut().zip(&dh.data) {
            *a += b;
        }
    }

    let mut dx = layer_norm_backward(
        &d_hidden,
        &cache.x_final,
        &cache.mean_f,
        &cache.rstd_f,
        &params.final_norm,
        &mut grads.final_norm,
    );

    for (layer, lcache, lgrads) in layers_backward(&params.layers, &cache.layers, &mut grads.layers) {
        // Feedforward branch: x_out = x_mid + ff(norm2(x_mid)).
        let d_ff_out = &dx;
        matmul_tn_acc(&mut lgrads.ff.w2, &lcache.ff_act, d_ff_out);
        col_sum_acc(&mut lgrads.ff.b2, d_ff_out);
        let d_act = matmul_nt(d_ff_out, &layer.ff.w2);
        let mut d_pre = d_act;
        for (g, &pre) in d_pre.data.iter_mut().zip(&lcache.ff_pre.data) {
            *g *= S::from_f64_lossy(gelu_grad(pre.widen()));
        }
        matmul_tn_acc(&mut lgrads.ff.w1, &lcache.normed2, &d_pre);
        col_sum_acc(&mut lgrads.ff.b1, &d_pre);
        let d_normed2 = matmul_nt(&d_pre, &layer.ff.w1);
        let d_from_norm2 = layer_norm_backward(
            &d_normed2,
            &lcache.x_mid,
            &lcache.mean2,
            &lcache.rstd2,
            &layer.norm2,
            &mut lgrads.norm2,
        );
        let mut d_x_mid = dx;
        for (a, &b) in d_x_mid.data.iter_mut().zip(&d_from_norm2.data) {
            *a += b;
        }

        // Attention branch: x_mid = x_in + attn(norm1(x_in)).
        let d_attn_out = &d_x_mid;
        matmul_tn_acc(&mut lgrads.attn.wo, &lcache.head_concat, d_attn_out);
        col_sum_acc(&mut lgrads.attn.bo, d_attn_out);
        let d_concat = matmul_nt(d_attn_out, &layer.attn.wo);

        let mut dq = Mat::zeros(t, d);
        let mut dk = Mat::zeros(t, d);
        let mut dv = Mat::zeros(t, d);
        for h in 0..n_heads {
            let d_oh = head_slice(&d_concat, h, d_head);
            let probs = &lcache.attn_probs[h];
            let vh = head_slice(&lcache.v, h, d_head);
            let kh = head_slice(&lcache.k, h, d_head);
            let qh = head_slice(&lcache.q, h, d_head);

            let d_probs = matmul_nt(&d_oh, &vh);
            let d_vh = {
                let mut m = Mat::zeros(t, d_head);
                matmul_tn_acc(&mut m, probs, &d_oh);
                m
            };
            // Softmax backward, then fold in the score scale.
            let mut d_scores = Mat::zeros(t, t);
            for i in 0..t {
                let p_row = probs.row(i);
                let dp_row = d_probs.row(i);
                let inner = dot(dp_row, p_row);
                for j in 0..t {
                    d_scores.row_mut(i)[j] = p_row[j] * (dp_row[j] - inner) * scale;
                }
            }
            let d_qh = matmul(&d_scores, &kh);
            let mut d_kh = Mat::zeros(t, d_head);
            matmul_tn_acc(&mut d_kh, &d_scores, &qh);
            head_slice_add(&mut dq, h, d_head, &d_qh);
            head_slice_add(&mut dk, h, d_head, &d_kh);
            head_slice_add(&mut dv, h, d_head, &d_vh);
        }

        matmul_tn_acc(&mut lgrads.attn.wq, &lcache.normed1, &dq);
        matmul_tn_acc(&mut lgrads.attn.wk, &lcache.normed1, &dk);
        matmul_tn_acc(&mut lgrads.attn.wv, &lcache.normed1, &dv);
        col_sum_acc(&mut lgrads.attn.bq, &dq);
        col_sum_acc(&mut lgrads.attn.bk, &dk);
        col_sum_acc(&mut lgrads.attn.bv, &dv);

        let mut d_normed1 = matmul_nt(&dq, &layer.attn.wq);
        matmul_nt_acc(&mut d_normed1, &dk, &layer.attn.wk);
        matmul_nt_acc(&mut d_normed1, &dv, &layer.attn.wv);
        let d_from_norm1 = layer_norm_backward(
            &d_normed1,
            &lcache.x_in,
            &lcache.mean1,
            &lcache.rstd1,
            &layer.norm1,
            &mut lgrads.norm1,
        );
        let mut d_x_in = d_x_mid;
        for (a, &b) in d_x_in.data.iter_mut().zip(&d_from_norm1.data) {
            *a += b;
        }
        dx = d_x_in;
    }

    for (i, &id) in cache.ids.iter().enumerate() {
        let row = dx.row(i);
        for (g, &v) in grads.tok_emb.row_mut(id as usize).iter_mut().zip(row) {
            *g += v;
        }
        for (g, &v) in grads.pos_emb.row_mut(i).iter_mut().zip(row) {
            *g += v;
        }
    }

    Ok(grads)
}

/// Reverse-order zip over layers, their caches, and their gradient slots.
fn layers_backward<'a, S>(
    layers: &'a [LayerParams<S>],
    caches: &'a [LayerCache<S>],
    grads: &'a mut [LayerParams<S>],
) -> impl Iterator<Item = (&'a LayerParams<S>, &'a LayerCache<S>, &'a mut LayerParams<S>)> {
    layers.iter().rev().zip(caches.iter().rev()).zip(grads.iter_mut().rev()).map(|((l, c), g)| (l, c, g))
}

/// Binary head over the final hidden state at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct RtdHead<S> {
    pub w: Vec<S>,
    pub b: S,
}

impl<S: Scalar> RtdHead<S> {
    /// Deterministic initialization, decorrelated from the model seed.
    pub fn init(config: &ModelConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x7274_6448)); // "rtdH"
        let normal = Normal::new(0.0, 1.0 / (config.d_model as f64).sqrt()).expect("positive std");
        RtdHead {
            w: (0..config.d_model).map(|_| S::from_f64_lossy(normal.sample(&mut rng))).collect(),
            b: S::zero(),
        }
    }

    /// Binary logit at `position` of an already-run forward pass.
    pub fn score_at(&self, fwd: &ForwardOutput<S>, position: usize) -> Result<S, ModelError> {
        let len = fwd.cache.ids.len();
        if position >= len {
            return Err(ModelError::BadPosition { pos: position, len });
        }
        Ok(dot(&self.w, fwd.hidden().row(position)) + self.b)
    }
}

/// Runs a forward pass and scores one position with the binary head. The
/// token at `position` is expected to be a candidate label token, not a
/// mask.
pub fn rtd_score<S: Scalar>(
    params: &Params<S>,
    head: &RtdHead<S>,
    ids: &[u32],
    position: usize,
) -> Result<S, ModelError> {
    let fwd = forward(params, ids)?;
    head.score_at(&fwd, position)
}
