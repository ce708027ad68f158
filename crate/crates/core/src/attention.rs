//! Multi-head classic and surface attention blocks, feed-forward blocks,
//! and the pre-norm residual layer that composes them.
//!
//! Surface attention reweights each key's softmax contribution by that
//! point's local area estimate, so the score a region receives tracks the
//! surface it represents instead of the number of samples on it. Area
//! weights enter as constants: they come from a counting rule and carry no
//! gradient. Scores are scaled by the per-head dimension and shared area
//! weights apply to every head, since areas are a property of points, not
//! heads.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Error;
use crate::kernels;
use crate::scalar::Scalar;
use crate::Result;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionVariant {
    Classic,
    Surface,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub variant: AttentionVariant,
}

impl AttentionConfig {
    pub fn new(embed_dim: usize, heads: usize, variant: AttentionVariant) -> Result<Self> {
        if embed_dim == 0 || heads == 0 || embed_dim % heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {embed_dim} must be positive and divisible by {heads} heads"
            )));
        }
        Ok(AttentionConfig {
            embed_dim,
            heads,
            variant,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    fn score_scale<T: Scalar>(&self) -> T {
        T::from_f64(1.0 / (self.head_dim() as f64).sqrt())
    }
}

fn he_uniform<T: Scalar, R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let limit = (6.0 / fan_in as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| T::from_f64(rng.gen_range(-limit..limit)))
        .collect();
    Tensor::new(vec![rows, cols], data).expect("finite init")
}

// ── parameter containers ──────────────────────────────────────────────

/// Per-block query/key/value projections and the output projection, each
/// d x d overall (heads are column slices).
#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub wo: Tensor<T>,
}

impl<T: Scalar> AttentionParams<T> {
    pub fn init<R: Rng>(d: usize, rng: &mut R) -> Self {
        AttentionParams {
            wq: he_uniform(d, d, d, rng),
            wk: he_uniform(d, d, d, rng),
            wv: he_uniform(d, d, d, rng),
            wo: he_uniform(d, d, d, rng),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.wq"), &self.wq);
        f(format!("{prefix}.wk"), &self.wk);
        f(format!("{prefix}.wv"), &self.wv);
        f(format!("{prefix}.wo"), &self.wo);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.wq"), &mut self.wq);
        f(format!("{prefix}.wk"), &mut self.wk);
        f(format!("{prefix}.wv"), &mut self.wv);
        f(format!("{prefix}.wo"), &mut self.wo);
    }

    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> AttentionVars {
        AttentionVars {
            wq: tape.leaf(&self.wq, trainable),
            wk: tape.leaf(&self.wk, trainable),
            wv: tape.leaf(&self.wv, trainable),
            wo: tape.leaf(&self.wo, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Two linear layers with a ReLU between them.
#[derive(Clone, Debug)]
pub struct FeedForwardParams<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Scalar> FeedForwardParams<T> {
    pub fn init<R: Rng>(d: usize, hidden: usize, rng: &mut R) -> Self {
        FeedForwardParams {
            w1: he_uniform(d, hidden, d, rng),
            b1: Tensor::zeros(vec![hidden]),
            w2: he_uniform(hidden, d, hidden, rng),
            b2: Tensor::zeros(vec![d]),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.w1"), &self.w1);
        f(format!("{prefix}.b1"), &self.b1);
        f(format!("{prefix}.w2"), &self.w2);
        f(format!("{prefix}.b2"), &self.b2);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.w1"), &mut self.w1);
        f(format!("{prefix}.b1"), &mut self.b1);
        f(format!("{prefix}.w2"), &mut self.w2);
        f(format!("{prefix}.b2"), &mut self.b2);
    }

    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> FeedForwardVars {
        FeedForwardVars {
            w1: tape.leaf(&self.w1, trainable),
            b1: tape.leaf(&self.b1, trainable),
            w2: tape.leaf(&self.w2, trainable),
            b2: tape.leaf(&self.b2, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Clone, Debug)]
pub struct LayerNormParams<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn init(d: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::new(vec![d], vec![T::one(); d]).expect("finite"),
            beta: Tensor::zeros(vec![d]),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        f(format!("{prefix}.gamma"), &self.gamma);
        f(format!("{prefix}.beta"), &self.beta);
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(format!("{prefix}.gamma"), &mut self.gamma);
        f(format!("{prefix}.beta"), &mut self.beta);
    }

    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> LayerNormVars {
        LayerNormVars {
            gamma: tape.leaf(&self.gamma, trainable),
            beta: tape.leaf(&self.beta, trainable),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormVars {
    pub gamma: Var,
    pub beta: Var,
}

/// One attention sub-block plus one feed-forward sub-block, each wrapped
/// in a residual connection, with pre-norm layer normalization before each
/// sub-block when enabled. Cross-attention layers keep a separate norm for
/// the key/value input.
#[derive(Clone, Debug)]
pub struct LayerParams<T> {
    pub attn: AttentionParams<T>,
    pub ff: FeedForwardParams<T>,
    pub ln_q: Option<LayerNormParams<T>>,
    pub ln_kv: Option<LayerNormParams<T>>,
    pub ln_ff: Option<LayerNormParams<T>>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn init<R: Rng>(
        d: usize,
        ff_hidden: usize,
        cross: bool,
        layer_norm: bool,
        rng: &mut R,
    ) -> Self {
        LayerParams {
            attn: AttentionParams::init(d, rng),
            ff: FeedForwardParams::init(d, ff_hidden, rng),
            ln_q: layer_norm.then(|| LayerNormParams::init(d)),
            ln_kv: (layer_norm && cross).then(|| LayerNormParams::init(d)),
            ln_ff: layer_norm.then(|| LayerNormParams::init(d)),
        }
    }

    pub fn for_each(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<T>)) {
        self.attn.for_each(&format!("{prefix}.attn"), f);
        self.ff.for_each(&format!("{prefix}.ff"), f);
        if let Some(ln) = &self.ln_q {
            ln.for_each(&format!("{prefix}.ln_q"), f);
        }
        if let Some(ln) = &self.ln_kv {
            ln.for_each(&format!("{prefix}.ln_kv"), f);
        }
        if let Some(ln) = &self.ln_ff {
            ln.for_each(&format!("{prefix}.ln_ff"), f);
        }
    }

    pub fn for_each_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.attn.for_each_mut(&format!("{prefix}.attn"), f);
        self.ff.for_each_mut(&format!("{prefix}.ff"), f);
        if let Some(ln) = &mut self.ln_q {
            ln.for_each_mut(&format!("{prefix}.ln_q"), f);
        }
        if let Some(ln) = &mut self.ln_kv {
            ln.for_each_mut(&format!("{prefix}.ln_kv"), f);
        }
        if let Some(ln) = &mut self.ln_ff {
            ln.for_each_mut(&format!("{prefix}.ln_ff"), f);
        }
    }

    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> LayerVars {
        LayerVars {
            attn: self.attn.lift(tape, trainable),
            ff: self.ff.lift(tape, trainable),
            ln_q: self.ln_q.as_ref().map(|ln| ln.lift(tape, trainable)),
            ln_kv: self.ln_kv.as_ref().map(|ln| ln.lift(tape, trainable)),
            ln_ff: self.ln_ff.as_ref().map(|ln| ln.lift(tape, trainable)),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub attn: AttentionVars,
    pub ff: FeedForwardVars,
    pub ln_q: Option<LayerNormVars>,
    pub ln_kv: Option<LayerNormVars>,
    pub ln_ff: Option<LayerNormVars>,
}

// ── forward blocks (tape) ─────────────────────────────────────────────

fn check_areas<T: Scalar>(
    cfg: &AttentionConfig,
    areas: Option<&[T]>,
    m: usize,
) -> Result<Option<Vec<T>>> {
    match (cfg.variant, areas) {
        (AttentionVariant::Classic, _) => Ok(None),
        (AttentionVariant::Surface, Some(a)) => {
            if a.len() != m {
                return Err(Error::Config(format!(
                    "surface attention: {} area weights for {m} keys",
                    a.len()
                )));
            }
            Ok(Some(a.to_vec()))
        }
        (AttentionVariant::Surface, None) => Err(Error::Config(
            "surface attention requires area weights for the key points".into(),
        )),
    }
}

/// Multi-head attention from queries x1 onto keys/values x2, returning the
/// output features and the per-head post-normalization score matrices.
pub fn attend_with_maps<T: Scalar>(
    tape: &mut Tape<T>,
    x1: Var,
    x2: Var,
    areas: Option<&[T]>,
    params: &AttentionVars,
    cfg: &AttentionConfig,
) -> Result<(Var, Vec<Var>)> {
    let m = tape.shape_of(x2)[0];
    let weights = check_areas(cfg, areas, m)?;
    let dh = cfg.head_dim();
    let scale = cfg.score_scale::<T>();

    let q = tape.matmul(x1, params.wq)?;
    let k = tape.matmul(x2, params.wk)?;
    let v = tape.matmul(x2, params.wv)?;

    let mut heads = Vec::with_capacity(cfg.heads);
    let mut maps = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.matmul_ext(qh, false, kh, true, scale)?;
        let attn = match &weights {
            Some(w) => tape.weighted_softmax(scores, w)?,
            None => tape.softmax_rows(scores)?,
        };
        maps.push(attn);
        heads.push(tape.matmul(attn, vh)?);
    }
    let concat = tape.concat_cols(&heads)?;
    let out = tape.matmul(concat, params.wo)?;
    Ok((out, maps))
}

pub fn attend<T: Scalar>(
    tape: &mut Tape<T>,
    x1: Var,
    x2: Var,
    areas: Option<&[T]>,
    params: &AttentionVars,
    cfg: &AttentionConfig,
) -> Result<Var> {
    attend_with_maps(tape, x1, x2, areas, params, cfg).map(|(out, _)| out)
}

pub fn feed_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, ff: &FeedForwardVars) -> Result<Var> {
    let h = tape.matmul(x, ff.w1)?;
    let h = tape.add_row_bias(h, ff.b1)?;
    let h = tape.relu(h);
    let h = tape.matmul(h, ff.w2)?;
    tape.add_row_bias(h, ff.b2)
}

fn maybe_norm<T: Scalar>(tape: &mut Tape<T>, x: Var, ln: &Option<LayerNormVars>) -> Result<Var> {
    match ln {
        Some(ln) => tape.layer_norm(x, ln.gamma, ln.beta, T::from_f64(LN_EPS)),
        None => Ok(x),
    }
}

/// Full layer: pre-norm attention with residual, then pre-norm
/// feed-forward with residual. When x2 is the same node as x1 the
/// normalized query stream doubles as keys/values (self-attention).
pub fn layer_with_maps<T: Scalar>(
    tape: &mut Tape<T>,
    x1: Var,
    x2: Var,
    areas: Option<&[T]>,
    params: &LayerVars,
    cfg: &AttentionConfig,
) -> Result<(Var, Vec<Var>)> {
    let q_in = maybe_norm(tape, x1, &params.ln_q)?;
    let kv_in = if x2 == x1 {
        q_in
    } else {
        maybe_norm(tape, x2, &params.ln_kv)?
    };
    let (attn_out, maps) = attend_with_maps(tape, q_in, kv_in, areas, &params.attn, cfg)?;
    let h = tape.add(x1, attn_out)?;
    let f_in = maybe_norm(tape, h, &params.ln_ff)?;
    let ff_out = feed_forward(tape, f_in, &params.ff)?;
    let out = tape.add(h, ff_out)?;
    Ok((out, maps))
}

pub fn layer<T: Scalar>(
    tape: &mut Tape<T>,
    x1: Var,
    x2: Var,
    areas: Option<&[T]>,
    params: &LayerVars,
    cfg: &AttentionConfig,
) -> Result<Var> {
    layer_with_maps(tape, x1, x2, areas, params, cfg).map(|(out, _)| out)
}

/// Post-normalization per-head score matrices for given inputs, evaluated
/// off the tape for inspection or export.
pub fn attention_maps<T: Scalar>(
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    areas: Option<&[T]>,
    params: &AttentionParams<T>,
    cfg: &AttentionConfig,
) -> Result<Vec<Tensor<T>>> {
    let mut tape = Tape::new();
    let v1 = tape.leaf(x1, false);
    let v2 = tape.leaf(x2, false);
    let vars = params.lift(&mut tape, false);
    let (_, maps) = attend_with_maps(&mut tape, v1, v2, areas, &vars, cfg)?;
    Ok(maps.into_iter().map(|m| tape.to_tensor(m)).collect())
}

// ── streaming (chunked) attention for inference ───────────────────────

/// Value-only attention that consumes keys/values in chunks with running
/// rescaled-softmax accumulation, so memory stays bounded by the chunk
/// size while matching the one-shot path within reassociation error.
pub struct StreamingAttention<T> {
    heads: usize,
    head_dim: usize,
    n: usize,
    q: Vec<T>,
    // per (head, query): running max and denominator
    max: Vec<T>,
    denom: Vec<T>,
    // per (head, query, head_dim): running weighted value sum
    accum: Vec<T>,
}

impl<T: Scalar> StreamingAttention<T> {
    /// `q` is the already-projected query matrix (n x d), head h occupying
    /// columns [h*head_dim, (h+1)*head_dim).
    pub fn new(q: Vec<T>, heads: usize, head_dim: usize) -> Self {
        let d = heads * head_dim;
        assert_eq!(q.len() % d, 0);
        let n = q.len() / d;
        StreamingAttention {
            heads,
            head_dim,
            n,
            q,
            max: vec![T::neg_infinity(); heads * n],
            denom: vec![T::zero(); heads * n],
            accum: vec![T::zero(); heads * n * head_dim],
        }
    }

    /// Feed one chunk of projected keys/values (c x d each) with their
    /// area weights (length c; None for classic attention).
    pub fn push_chunk(&mut self, k: &[T], v: &[T], areas: Option<&[T]>, scale: T) {
        let d = self.heads * self.head_dim;
        let c = k.len() / d;
        assert_eq!(v.len(), c * d);
        if let Some(a) = areas {
            assert_eq!(a.len(), c);
        }
        let dh = self.head_dim;
        let mut scores = vec![T::zero(); self.n * c];
        for h in 0..self.heads {
            // strided per-head gemm: scores = Qh * Kh^T * scale
            unsafe {
                T::gemm(
                    self.n,
                    dh,
                    c,
                    scale,
                    self.q.as_ptr().add(h * dh),
                    d as isize,
                    1,
                    k.as_ptr().add(h * dh),
                    1,
                    d as isize,
                    T::zero(),
                    scores.as_mut_ptr(),
                    c as isize,
                    1,
                );
            }
            for i in 0..self.n {
                let row = &scores[i * c..(i + 1) * c];
                let chunk_max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let slot = h * self.n + i;
                let new_max = self.max[slot].max(chunk_max);
                let rescale = if self.max[slot] == T::neg_infinity() {
                    T::zero()
                } else {
                    (self.max[slot] - new_max).exp()
                };
                let mut denom = self.denom[slot] * rescale;
                let acc = &mut self.accum[slot * dh..(slot + 1) * dh];
                for a in acc.iter_mut() {
                    *a = *a * rescale;
                }
                for (j, &s) in row.iter().enumerate() {
                    let mut e = (s - new_max).exp();
                    if let Some(a) = areas {
                        e = e * a[j];
                    }
                    denom = denom + e;
                    let vr = &v[j * d + h * dh..j * d + h * dh + dh];
                    for (av, &vv) in acc.iter_mut().zip(vr) {
                        *av = *av + e * vv;
                    }
                }
                self.max[slot] = new_max;
                self.denom[slot] = denom;
            }
        }
    }

    /// Normalized n x d output with heads concatenated.
    pub fn finish(self) -> Vec<T> {
        let d = self.heads * self.head_dim;
        let dh = self.head_dim;
        let mut out = vec![T::zero(); self.n * d];
        for h in 0..self.heads {
            for i in 0..self.n {
                let slot = h * self.n + i;
                let inv = self.denom[slot].recip();
                let acc = &self.accum[slot * dh..(slot + 1) * dh];
                let dst = &mut out[i * d + h * dh..i * d + h * dh + dh];
                for (o, &a) in dst.iter_mut().zip(acc) {
                    *o = a * inv;
                }
            }
        }
        out
    }
}

/// One-shot or chunked value-level attention (projections included),
/// shared by inference paths that stay off the tape.
pub fn attend_values<T: Scalar>(
    x1: &[T],
    x2: &[T],
    areas: Option<&[T]>,
    params: &AttentionParams<T>,
    cfg: &AttentionConfig,
    chunk_size: Option<usize>,
) -> Vec<T> {
    let d = cfg.embed_dim;
    let n = x1.len() / d;
    let m = x2.len() / d;
    let mut q = vec![T::zero(); n * d];
    kernels::matmul_into(false, false, n, d, d, T::one(), x1, params.wq.data(), T::zero(), &mut q);
    let mut stream = StreamingAttention::new(q, cfg.heads, cfg.head_dim());
    let chunk = chunk_size.unwrap_or(m).max(1);
    let mut start = 0usize;
    while start < m {
        let c = chunk.min(m - start);
        let rows = &x2[start * d..(start + c) * d];
        let mut k_chunk = vec![T::zero(); c * d];
        let mut v_chunk = vec![T::zero(); c * d];
        kernels::matmul_into(false, false, c, d, d, T::one(), rows, params.wk.data(), T::zero(), &mut k_chunk);
        kernels::matmul_into(false, false, c, d, d, T::one(), rows, params.wv.data(), T::zero(), &mut v_chunk);
        let area_chunk = areas.map(|a| &a[start..start + c]);
        stream.push_chunk(&k_chunk, &v_chunk, area_chunk, cfg.score_scale());
        start += c;
    }
    let concat = stream.finish();
    let mut out = vec![T::zero(); n * d];
    kernels::matmul_into(false, false, n, d, d, T::one(), &concat, params.wo.data(), T::zero(), &mut out);
    out
}
