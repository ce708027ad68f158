use crate::attention::{
    self, attend_values, AttentionConfig, AttentionVariant, FeedForwardParams, LayerNormParams,
    LayerNormVars, LayerParams, LayerVars, StreamingAttention, LN_EPS,
};
use crate::autodiff::{Tape, Var};
use crate::error::Error;
use crate::geometry::{estimate_areas, AreaWeights, PointCloud};
use crate::kernels;
use crate::scalar::Scalar;
use crate::Result;

use super::params::{MlpParams, MlpVars, ModelParams};
use super::{LatentState, ModelConfig};

// ── lifted parameters ─────────────────────────────────────────────────

pub struct EncoderLayerVars {
    pub embedder: MlpVars,
    pub cross: LayerVars,
    pub selfa: LayerVars,
}

pub struct DecoderLayerVars {
    pub cross: LayerVars,
    pub selfa: LayerVars,
}

/// All model parameters lifted onto a tape. Creation order matches
/// [`ModelParams::for_each`], so gradients can be read back slot by slot.
pub struct ModelVars {
    pub latent_probes: Var,
    pub pos_enc_probes: Var,
    pub pos_enc_latents: Var,
    pub encoder: Vec<EncoderLayerVars>,
    pub encoder_out_norm: Option<LayerNormVars>,
    pub decoder_embedder: MlpVars,
    pub decoder: Vec<DecoderLayerVars>,
    pub decoder_out_norm: Option<LayerNormVars>,
    pub final_mlp: MlpVars,
}

impl<T: Scalar> ModelParams<T> {
    pub fn lift(&self, tape: &mut Tape<T>, trainable: bool) -> ModelVars {
        ModelVars {
            latent_probes: tape.leaf(&self.latent_probes, trainable),
            pos_enc_probes: tape.leaf(&self.pos_enc_probes, trainable),
            pos_enc_latents: tape.leaf(&self.pos_enc_latents, trainable),
            encoder: self
                .encoder
                .iter()
                .map(|l| EncoderLayerVars {
                    embedder: l.embedder.lift(tape, trainable),
                    cross: l.cross.lift(tape, trainable),
                    selfa: l.selfa.lift(tape, trainable),
                })
                .collect(),
            encoder_out_norm: self
                .encoder_out_norm
                .as_ref()
                .map(|ln| ln.lift(tape, trainable)),
            decoder_embedder: self.decoder_embedder.lift(tape, trainable),
            decoder: self
                .decoder
                .iter()
                .map(|l| DecoderLayerVars {
                    cross: l.cross.lift(tape, trainable),
                    selfa: l.selfa.lift(tape, trainable),
                })
                .collect(),
            decoder_out_norm: self
                .decoder_out_norm
                .as_ref()
                .map(|ln| ln.lift(tape, trainable)),
            final_mlp: self.final_mlp.lift(tape, trainable),
        }
    }
}

impl ModelVars {
    fn visit_layer(vars: &LayerVars, f: &mut dyn FnMut(Var)) {
        f(vars.attn.wq);
        f(vars.attn.wk);
        f(vars.attn.wv);
        f(vars.attn.wo);
        f(vars.ff.w1);
        f(vars.ff.b1);
        f(vars.ff.w2);
        f(vars.ff.b2);
        for ln in [&vars.ln_q, &vars.ln_kv, &vars.ln_ff].into_iter().flatten() {
            f(ln.gamma);
            f(ln.beta);
        }
    }

    fn visit_mlp(vars: &MlpVars, f: &mut dyn FnMut(Var)) {
        for (w, b) in &vars.layers {
            f(*w);
            f(*b);
        }
    }

    /// Vars in the same order as [`ModelParams::for_each`].
    pub fn ordered_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        let mut push = |v: Var| out.push(v);
        push(self.latent_probes);
        push(self.pos_enc_probes);
        push(self.pos_enc_latents);
        for l in &self.encoder {
            Self::visit_mlp(&l.embedder, &mut push);
            Self::visit_layer(&l.cross, &mut push);
            Self::visit_layer(&l.selfa, &mut push);
        }
        if let Some(ln) = &self.encoder_out_norm {
            push(ln.gamma);
            push(ln.beta);
        }
        Self::visit_mlp(&self.decoder_embedder, &mut push);
        for l in &self.decoder {
            Self::visit_layer(&l.cross, &mut push);
            Self::visit_layer(&l.selfa, &mut push);
        }
        if let Some(ln) = &self.decoder_out_norm {
            push(ln.gamma);
            push(ln.beta);
        }
        Self::visit_mlp(&self.final_mlp, &mut push);
        out
    }
}

fn cloud_attention_cfg(cfg: &ModelConfig) -> Result<AttentionConfig> {
    AttentionConfig::new(
        cfg.latent_dim,
        cfg.heads,
        if cfg.surface_attention {
            AttentionVariant::Surface
        } else {
            AttentionVariant::Classic
        },
    )
}

fn latent_attention_cfg(cfg: &ModelConfig) -> Result<AttentionConfig> {
    AttentionConfig::new(cfg.latent_dim, cfg.heads, AttentionVariant::Classic)
}

fn cloud_areas<'a, T: Scalar>(
    cfg: &ModelConfig,
    areas: Option<&'a AreaWeights<T>>,
) -> Option<&'a [T]> {
    if cfg.surface_attention {
        areas.map(|a| a.values())
    } else {
        None
    }
}

// ── tape-level forward ────────────────────────────────────────────────

pub struct EncodeGraph {
    pub latents: Var,
    /// Per encoder layer, the per-head cross-attention maps
    /// (probes x target points).
    pub cross_maps: Vec<Vec<Var>>,
}

/// Encoder: condition the latent probes on the embedded target points,
/// one cross-attention plus one latent self-attention per layer, each with
/// its feed-forward and residuals. The target embedding is recomputed per
/// layer through that layer's own embedder.
pub fn encode_graph<T: Scalar>(
    tape: &mut Tape<T>,
    target_pts: Var,
    target_areas: Option<&AreaWeights<T>>,
    vars: &ModelVars,
    cfg: &ModelConfig,
) -> Result<EncodeGraph> {
    let cloud_cfg = cloud_attention_cfg(cfg)?;
    let latent_cfg = latent_attention_cfg(cfg)?;
    let areas = cloud_areas(cfg, target_areas);
    if cfg.surface_attention && areas.is_none() {
        return Err(Error::Config(
            "surface attention needs target area weights".into(),
        ));
    }

    let mut lat = tape.add(vars.latent_probes, vars.pos_enc_probes)?;
    let mut cross_maps = Vec::with_capacity(vars.encoder.len());
    for layer in &vars.encoder {
        let emb = MlpParams::forward(tape, target_pts, &layer.embedder)?;
        let (next, maps) =
            attention::layer_with_maps(tape, lat, emb, areas, &layer.cross, &cloud_cfg)?;
        cross_maps.push(maps);
        lat = attention::layer(tape, next, next, None, &layer.selfa, &latent_cfg)?;
    }
    if let Some(ln) = &vars.encoder_out_norm {
        lat = tape.layer_norm(lat, ln.gamma, ln.beta, T::from_f64(LN_EPS))?;
    }
    Ok(EncodeGraph {
        latents: lat,
        cross_maps,
    })
}

pub struct DecodeGraph {
    pub output: Var,
    /// Per decoder layer, the per-head cross-attention maps
    /// (source points x probes).
    pub cross_maps: Vec<Vec<Var>>,
}

/// Decoder: embed the source once through the shared embedder, then per
/// layer cross-attend the source stream onto the latents (classic: the
/// keys are latent vectors, not points) and self-attend over the source
/// points (surface), ending with the coordinate MLP.
pub fn decode_graph<T: Scalar>(
    tape: &mut Tape<T>,
    source_pts: Var,
    source_areas: Option<&AreaWeights<T>>,
    latents: Var,
    vars: &ModelVars,
    cfg: &ModelConfig,
) -> Result<DecodeGraph> {
    let cloud_cfg = cloud_attention_cfg(cfg)?;
    let latent_cfg = latent_attention_cfg(cfg)?;
    let areas = cloud_areas(cfg, source_areas);
    if cfg.surface_attention && areas.is_none() {
        return Err(Error::Config(
            "surface attention needs source area weights".into(),
        ));
    }

    let lat = tape.add(latents, vars.pos_enc_latents)?;
    let mut stream = MlpParams::forward(tape, source_pts, &vars.decoder_embedder)?;
    let mut cross_maps = Vec::with_capacity(vars.decoder.len());
    for layer in &vars.decoder {
        let (next, maps) =
            attention::layer_with_maps(tape, stream, lat, None, &layer.cross, &latent_cfg)?;
        cross_maps.push(maps);
        stream = attention::layer(tape, next, next, areas, &layer.selfa, &cloud_cfg)?;
    }
    if let Some(ln) = &vars.decoder_out_norm {
        stream = tape.layer_norm(stream, ln.gamma, ln.beta, T::from_f64(LN_EPS))?;
    }
    let mut output = MlpParams::forward(tape, stream, &vars.final_mlp)?;
    if cfg.residual_output {
        output = tape.add(output, source_pts)?;
    }
    Ok(DecodeGraph { output, cross_maps })
}

// ── public single-shot API ────────────────────────────────────────────

fn areas_for<T: Scalar>(
    cfg: &ModelConfig,
    pc: &PointCloud<T>,
) -> Result<Option<AreaWeights<T>>> {
    if cfg.surface_attention {
        Ok(Some(estimate_areas(pc, T::from_f64(cfg.density_radius))?))
    } else {
        Ok(None)
    }
}

/// Compress a (normalized) target cloud into the latent state.
pub fn encode<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    target: &PointCloud<T>,
) -> Result<LatentState<T>> {
    encode_with_maps(params, cfg, target).map(|(ls, _)| ls)
}

/// As [`encode`], also returning per-layer per-head cross-attention maps.
pub fn encode_with_maps<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    target: &PointCloud<T>,
) -> Result<(LatentState<T>, Vec<Vec<crate::autodiff::Tensor<T>>>)> {
    cfg.validate()?;
    let areas = areas_for(cfg, target)?;
    let mut tape = Tape::new();
    let vars = params.lift(&mut tape, false);
    let pts = tape.leaf_matrix(target.len(), 3, target.points(), false);
    let graph = encode_graph(&mut tape, pts, areas.as_ref(), &vars, cfg)?;
    let ls = LatentState::new(
        tape.to_tensor(graph.latents),
        format!("encode(n={})", target.len()),
    )?;
    let maps = graph
        .cross_maps
        .iter()
        .map(|layer| layer.iter().map(|&m| tape.to_tensor(m)).collect())
        .collect();
    Ok((ls, maps))
}

/// Deform a (normalized) source cloud to fit the geometry captured in the
/// latents. The output carries the source's labels.
pub fn decode<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    source: &PointCloud<T>,
    latents: &LatentState<T>,
) -> Result<PointCloud<T>> {
    decode_with_maps(params, cfg, source, latents).map(|(pc, _)| pc)
}

pub fn decode_with_maps<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    source: &PointCloud<T>,
    latents: &LatentState<T>,
) -> Result<(PointCloud<T>, Vec<Vec<crate::autodiff::Tensor<T>>>)> {
    cfg.validate()?;
    latents.check_config(cfg)?;
    let areas = areas_for(cfg, source)?;
    let mut tape = Tape::new();
    let vars = params.lift(&mut tape, false);
    let pts = tape.leaf_matrix(source.len(), 3, source.points(), false);
    let lat = tape.leaf(latents.vectors(), false);
    let graph = decode_graph(&mut tape, pts, areas.as_ref(), lat, &vars, cfg)?;
    let out = PointCloud::new(
        tape.value(graph.output).to_vec(),
        source.labels().map(|l| l.to_vec()),
    )?;
    let maps = graph
        .cross_maps
        .iter()
        .map(|layer| layer.iter().map(|&m| tape.to_tensor(m)).collect())
        .collect();
    Ok((out, maps))
}

/// decode(source, encode(target)): the full registration forward pass.
pub fn register<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    source: &PointCloud<T>,
    target: &PointCloud<T>,
) -> Result<PointCloud<T>> {
    let latents = encode(params, cfg, target)?;
    decode(params, cfg, source, &latents)
}

// ── value-level helpers and the chunked encoder ───────────────────────

fn linear_values<T: Scalar>(x: &[T], rows: usize, w: &[T], win: usize, wout: usize, b: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * wout];
    kernels::matmul_into(false, false, rows, win, wout, T::one(), x, w, T::zero(), &mut out);
    for row in out.chunks_exact_mut(wout) {
        for (v, &bv) in row.iter_mut().zip(b) {
            *v = *v + bv;
        }
    }
    out
}

fn mlp_values<T: Scalar>(x: &[T], rows: usize, in_dim: usize, mlp: &MlpParams<T>) -> Vec<T> {
    let mut h = x.to_vec();
    let mut dim = in_dim;
    let last = mlp.layers.len() - 1;
    for (i, (w, b)) in mlp.layers.iter().enumerate() {
        let wout = w.shape()[1];
        h = linear_values(&h, rows, w.data(), dim, wout, b.data());
        if i != last {
            for v in h.iter_mut() {
                if !(*v > T::zero()) {
                    *v = T::zero();
                }
            }
        }
        dim = wout;
    }
    h
}

fn layer_norm_values<T: Scalar>(x: &mut [T], d: usize, ln: &LayerNormParams<T>) {
    let g = ln.gamma.data();
    let b = ln.beta.data();
    let eps = T::from_f64(LN_EPS);
    let inv_d = T::from_f64(1.0 / d as f64);
    for row in x.chunks_exact_mut(d) {
        let mean = row.iter().copied().sum::<T>() * inv_d;
        let var = row
            .iter()
            .map(|&v| {
                let c = v - mean;
                c * c
            })
            .sum::<T>()
            * inv_d;
        let inv_std = (var + eps).sqrt().recip();
        for j in 0..d {
            row[j] = (row[j] - mean) * inv_std * g[j] + b[j];
        }
    }
}

fn maybe_norm_values<T: Scalar>(x: &[T], d: usize, ln: &Option<LayerNormParams<T>>) -> Vec<T> {
    let mut out = x.to_vec();
    if let Some(ln) = ln {
        layer_norm_values(&mut out, d, ln);
    }
    out
}

fn ff_values<T: Scalar>(x: &[T], rows: usize, d: usize, ff: &FeedForwardParams<T>) -> Vec<T> {
    let hidden = ff.w1.shape()[1];
    let mut h = linear_values(x, rows, ff.w1.data(), d, hidden, ff.b1.data());
    for v in h.iter_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
    linear_values(&h, rows, ff.w2.data(), hidden, d, ff.b2.data())
}

fn add_in_place<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

/// Self-attention layer on a small set, evaluated off the tape.
fn self_layer_values<T: Scalar>(
    x: &[T],
    rows: usize,
    d: usize,
    areas: Option<&[T]>,
    lp: &LayerParams<T>,
    cfg: &AttentionConfig,
) -> Vec<T> {
    let normed = maybe_norm_values(x, d, &lp.ln_q);
    let attn = attend_values(&normed, &normed, areas, &lp.attn, cfg, None);
    let mut h = x.to_vec();
    add_in_place(&mut h, &attn);
    let f_in = maybe_norm_values(&h, d, &lp.ln_ff);
    let ff = ff_values(&f_in, rows, d, &lp.ff);
    add_in_place(&mut h, &ff);
    h
}

/// Encoder forward that consumes the target in fixed-size chunks: each
/// layer embeds, normalizes, and projects one chunk of points at a time
/// into a streaming softmax, so peak memory is bounded by the chunk size
/// instead of the cloud size. Matches [`encode`] within reassociation
/// error.
pub fn encode_chunked<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    target: &PointCloud<T>,
    chunk_size: usize,
) -> Result<LatentState<T>> {
    cfg.validate()?;
    if chunk_size == 0 {
        return Err(Error::Config("chunk size must be positive".into()));
    }
    let k = cfg.num_probes;
    let d = cfg.latent_dim;
    let m = target.len();
    let pts = target.points();
    let areas = areas_for(cfg, target)?;
    let latent_cfg = latent_attention_cfg(cfg)?;
    let scale = T::from_f64(1.0 / (cfg.latent_dim as f64 / cfg.heads as f64).sqrt());

    // latents = LP + positional encoding
    let mut lat: Vec<T> = params
        .latent_probes
        .data()
        .iter()
        .zip(params.pos_enc_probes.data())
        .map(|(&a, &b)| a + b)
        .collect();

    for layer in &params.encoder {
        // cross-attention with streamed keys/values
        let q_in = maybe_norm_values(&lat, d, &layer.cross.ln_q);
        let q = {
            let mut q = vec![T::zero(); k * d];
            kernels::matmul_into(
                false,
                false,
                k,
                d,
                d,
                T::one(),
                &q_in,
                layer.cross.attn.wq.data(),
                T::zero(),
                &mut q,
            );
            q
        };
        let mut stream = StreamingAttention::new(q, cfg.heads, d / cfg.heads);
        let mut start = 0usize;
        while start < m {
            let c = chunk_size.min(m - start);
            let raw = &pts[start * 3..(start + c) * 3];
            let emb = mlp_values(raw, c, 3, &layer.embedder);
            let kv_in = maybe_norm_values(&emb, d, &layer.cross.ln_kv);
            let mut k_chunk = vec![T::zero(); c * d];
            let mut v_chunk = vec![T::zero(); c * d];
            kernels::matmul_into(
                false, false, c, d, d, T::one(),
                &kv_in, layer.cross.attn.wk.data(), T::zero(), &mut k_chunk,
            );
            kernels::matmul_into(
                false, false, c, d, d, T::one(),
                &kv_in, layer.cross.attn.wv.data(), T::zero(), &mut v_chunk,
            );
            let area_chunk = areas.as_ref().map(|a| &a.values()[start..start + c]);
            stream.push_chunk(&k_chunk, &v_chunk, area_chunk, scale);
            start += c;
        }
        let concat = stream.finish();
        let mut attn_out = vec![T::zero(); k * d];
        kernels::matmul_into(
            false, false, k, d, d, T::one(),
            &concat, layer.cross.attn.wo.data(), T::zero(), &mut attn_out,
        );
        add_in_place(&mut lat, &attn_out);
        let f_in = maybe_norm_values(&lat, d, &layer.cross.ln_ff);
        let ff = ff_values(&f_in, k, d, &layer.cross.ff);
        add_in_place(&mut lat, &ff);

        // latent self-attention runs in full (k rows only)
        lat = self_layer_values(&lat, k, d, None, &layer.selfa, &latent_cfg);
    }
    if let Some(ln) = &params.encoder_out_norm {
        layer_norm_values(&mut lat, d, ln);
    }

    LatentState::new(
        crate::autodiff::Tensor::new(vec![k, d], lat)?,
        format!("encode_chunked(n={m})"),
    )
}
