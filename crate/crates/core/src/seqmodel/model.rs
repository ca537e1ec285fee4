//! Transformer forward passes.
//!
//! Encoder layers are post-norm: `LN(x + MHA(x))` then `LN(x + FF(x))`.
//! Decoder layers run causal self-attention, cross-attention into the
//! encoder output and a feed-forward block, each wrapped the same way. The
//! output of the last decoder layer's self-attention block is the visual
//! feature sequence `z` used by the alignment and comparison objectives.

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::params::{Attention, FeedForward, Linear, ModelConfig, ModelParams, Norm, Weights, LAYER_NORM_EPS};
use super::vocab::{GlossSequence, PoseSequence};

/// Additive attention mask value for blocked positions. `exp` of it
/// underflows to exactly zero after max subtraction.
const BLOCKED: f64 = -1e9;

/// Sinusoidal position table of shape `len × d`: even columns hold
/// `sin(pos / 10000^(2i/d))`, odd columns the matching cosine.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            data[pos * d + i] = angle.sin();
            if i + 1 < d {
                data[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::from_parts(vec![len, d], data)
}

/// `rows × keys` additive mask blocking key positions marked `false`.
fn key_mask(rows: usize, keys: &[bool]) -> Tensor {
    let row: Vec<f64> = keys.iter().map(|&k| if k { 0.0 } else { BLOCKED }).collect();
    Tensor::from_parts(vec![rows, keys.len()], row.repeat(rows))
}

/// `len × len` additive mask letting position `i` see keys `0..=i`.
fn causal_mask(len: usize) -> Tensor {
    let mut data = vec![0.0; len * len];
    for i in 0..len {
        for j in i + 1..len {
            data[i * len + j] = BLOCKED;
        }
    }
    Tensor::from_parts(vec![len, len], data)
}

fn linear(tape: &mut Tape, l: &Linear<Var>, x: Var) -> Result<Var> {
    let y = tape.matmul(x, l.weight)?;
    tape.add_row(y, l.bias)
}

fn norm(tape: &mut Tape, n: &Norm<Var>, x: Var) -> Result<Var> {
    tape.layer_norm(x, n.gain, n.bias, LAYER_NORM_EPS)
}

fn feed_forward(tape: &mut Tape, ff: &FeedForward<Var>, x: Var) -> Result<Var> {
    let h = linear(tape, &ff.hidden, x)?;
    let h = tape.relu(h);
    linear(tape, &ff.output, h)
}

/// Multi-head scaled dot-product attention. Returns the projected output
/// and the attention weights averaged over heads (`queries × keys`).
pub(crate) fn attention(
    tape: &mut Tape,
    cfg: &ModelConfig,
    a: &Attention<Var>,
    query: Var,
    memory: Var,
    mask: Option<Tensor>,
) -> Result<(Var, Tensor)> {
    let q = linear(tape, &a.query, query)?;
    let k = linear(tape, &a.key, memory)?;
    let v = linear(tape, &a.value, memory)?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mask = mask.map(|m| tape.constant(m));
    let (rows, keys) = (tape.value(query).rows(), tape.value(memory).rows());
    let mut mean_weights = vec![0.0; rows * keys];
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let mut scores = tape.scale(scores, scale);
        if let Some(m) = mask {
            scores = tape.add(scores, m)?;
        }
        let weights = tape.softmax_rows(scores)?;
        for (acc, w) in mean_weights.iter_mut().zip(tape.value(weights).data()) {
            *acc += w / cfg.heads as f64;
        }
        heads.push(tape.matmul(weights, vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        tape.concat_cols(&heads)?
    };
    let out = linear(tape, &a.output, merged)?;
    Ok((out, Tensor::from_parts(vec![rows, keys], mean_weights)))
}

/// Gloss embedding: rows of `W^g` selected by id, plus bias and position.
pub fn embed_gloss_graph(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    ids: &[usize],
) -> Result<Var> {
    if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
        return Err(Error::invalid(format!(
            "gloss id {bad} outside vocabulary of size {}",
            cfg.vocab_size
        )));
    }
    let rows = tape.gather_rows(w.gloss_embed.weight, ids)?;
    let x = tape.add_row(rows, w.gloss_embed.bias)?;
    let pe = tape.constant(positional_encoding(ids.len(), cfg.d_model));
    tape.add(x, pe)
}

/// Runs the encoder stack. Positions whose mask entry is `false` are never
/// attended to.
pub fn encode_graph(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    embedded: Var,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let n = tape.value(embedded).rows();
    let mask = match mask {
        Some(m) if m.len() != n => {
            return Err(Error::shape("encode", format!("mask of {} for {n} rows", m.len())))
        }
        Some(m) if !m.iter().any(|&k| k) => {
            return Err(Error::invalid("encode: every gloss position is masked"))
        }
        Some(m) => Some(key_mask(n, m)),
        None => None,
    };
    let mut x = embedded;
    for layer in &w.encoder {
        let (a, _) = attention(tape, cfg, &layer.attention, x, x, mask.clone())?;
        let r = tape.add(x, a)?;
        x = norm(tape, &layer.norm1, r)?;
        let f = feed_forward(tape, &layer.feed_forward, x)?;
        let r = tape.add(x, f)?;
        x = norm(tape, &layer.norm2, r)?;
    }
    Ok(x)
}

/// Pose embedding: `poses · W^p + b^p + PE'`.
pub fn embed_pose_graph(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    poses: Var,
) -> Result<Var> {
    let shape = tape.shape(poses);
    if shape.len() != 2 || shape[1] != cfg.pose_dim() {
        return Err(Error::shape(
            "embed_pose",
            format!("{shape:?} for {} pose coordinates", cfg.pose_dim()),
        ));
    }
    let m = shape[0];
    let y = linear(tape, &w.pose_embed, poses)?;
    let pe = tape.constant(positional_encoding(m, cfg.d_model));
    tape.add(y, pe)
}

/// Decoder outputs recorded on a tape.
#[derive(Debug, Clone)]
pub struct DecoderGraph {
    /// Visual features `z`, `M × D`.
    pub z: Var,
    /// Predicted poses, `M × (J·3)`; row `m` predicts the frame after input
    /// row `m`.
    pub poses: Var,
    /// Last-layer cross-attention averaged over heads, `M × N`.
    pub cross_attention: Tensor,
}

pub fn decode_graph(
    tape: &mut Tape,
    cfg: &ModelConfig,
    w: &Weights<Var>,
    pose_embedded: Var,
    enc: Var,
    enc_mask: Option<&[bool]>,
) -> Result<DecoderGraph> {
    let m = tape.value(pose_embedded).rows();
    let n = tape.value(enc).rows();
    let cross_mask = match enc_mask {
        Some(mask) if mask.len() != n => {
            return Err(Error::shape("decode", format!("mask of {} for {n} rows", mask.len())))
        }
        Some(mask) => Some(key_mask(m, mask)),
        None => None,
    };
    let causal = causal_mask(m);
    let mut h = pose_embedded;
    let mut z = h;
    let mut cross = Tensor::zeros(&[m, n]);
    for layer in &w.decoder {
        let (a, _) = attention(tape, cfg, &layer.self_attention, h, h, Some(causal.clone()))?;
        let r = tape.add(h, a)?;
        z = norm(tape, &layer.norm1, r)?;
        let (c, weights) = attention(tape, cfg, &layer.cross_attention, z, enc, cross_mask.clone())?;
        cross = weights;
        let r = tape.add(z, c)?;
        let x = norm(tape, &layer.norm2, r)?;
        let f = feed_forward(tape, &layer.feed_forward, x)?;
        let r = tape.add(x, f)?;
        h = norm(tape, &layer.norm3, r)?;
    }
    let poses = linear(tape, &w.output, h)?;
    Ok(DecoderGraph {
        z,
        poses,
        cross_attention: cross,
    })
}

/// Encoder features `x̃` for one gloss sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub features: Tensor,
    pub mask: Vec<bool>,
}

impl EncoderOutput {
    fn mask_arg(&self) -> Option<&[bool]> {
        if self.mask.iter().all(|&k| k) {
            None
        } else {
            Some(&self.mask)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub z: Tensor,
    pub poses: Tensor,
    pub cross_attention: Tensor,
}

pub fn embed_gloss(seq: &GlossSequence, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let x = embed_gloss_graph(&mut tape, &params.config, &w, seq.ids())?;
    Ok(tape.value(x).clone())
}

pub fn encode(embedded: &Tensor, params: &ModelParams, mask: Option<&[bool]>) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let x = tape.constant(embedded.clone());
    let out = encode_graph(&mut tape, &params.config, &w, x, mask)?;
    Ok(EncoderOutput {
        features: tape.value(out).clone(),
        mask: mask.map_or_else(|| vec![true; embedded.rows()], <[bool]>::to_vec),
    })
}

/// Embeds and encodes a gloss sequence.
pub fn encode_glosses(seq: &GlossSequence, params: &ModelParams) -> Result<EncoderOutput> {
    encode(&embed_gloss(seq, params)?, params, None)
}

pub fn embed_pose(pose: &PoseSequence, params: &ModelParams) -> Result<Tensor> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let p = tape.constant(pose.frames().clone());
    let y = embed_pose_graph(&mut tape, &params.config, &w, p)?;
    Ok(tape.value(y).clone())
}

pub fn decode(pose_embedded: &Tensor, enc: &EncoderOutput, params: &ModelParams) -> Result<DecoderState> {
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let y = tape.constant(pose_embedded.clone());
    let e = tape.constant(enc.features.clone());
    let out = decode_graph(&mut tape, &params.config, &w, y, e, enc.mask_arg())?;
    Ok(DecoderState {
        z: tape.value(out.z).clone(),
        poses: tape.value(out.poses).clone(),
        cross_attention: out.cross_attention,
    })
}

/// Decoder input for teacher forcing: `bos` followed by every target frame
/// but the last.
pub fn shift_right(target: &Tensor, bos: &[f64]) -> Result<Tensor> {
    if bos.len() != target.cols() {
        return Err(Error::shape(
            "shift_right",
            format!("BOS frame of {} for {} coordinates", bos.len(), target.cols()),
        ));
    }
    let m = target.rows();
    let mut data = Vec::with_capacity(target.len());
    data.extend_from_slice(bos);
    data.extend_from_slice(&target.data()[..(m - 1) * target.cols()]);
    Ok(Tensor::from_parts(target.shape().to_vec(), data))
}

/// Teacher-forced decoding of `target` given the glosses; the decoder input
/// is `target` shifted right behind an all-zero BOS frame.
pub fn teacher_forced(seq: &GlossSequence, target: &PoseSequence, params: &ModelParams) -> Result<DecoderState> {
    let enc = encode_glosses(seq, params)?;
    let input = shift_right(target.frames(), &vec![0.0; params.config.pose_dim()])?;
    let input = PoseSequence::new(input, target.joints())?;
    decode(&embed_pose(&input, params)?, &enc, params)
}

/// Recursive decoding: each predicted frame is appended to the decoder
/// input for the next step. Stops after exactly `max_len` frames.
pub fn decode_autoregressive(
    bos_frame: &[f64],
    enc: &EncoderOutput,
    params: &ModelParams,
    max_len: usize,
) -> Result<PoseSequence> {
    let cfg = &params.config;
    if max_len == 0 {
        return Err(Error::invalid("max_len must be at least 1"));
    }
    if bos_frame.len() != cfg.pose_dim() {
        return Err(Error::shape(
            "decode_autoregressive",
            format!("BOS frame of {} for {} coordinates", bos_frame.len(), cfg.pose_dim()),
        ));
    }
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let e = tape.constant(enc.features.clone());
    let mark = tape.len();
    let mut frames = bos_frame.to_vec();
    for step in 1..=max_len {
        tape.truncate(mark);
        let input = tape.constant(Tensor::from_parts(vec![step, cfg.pose_dim()], frames.clone()));
        let y = embed_pose_graph(&mut tape, cfg, &w, input)?;
        let out = decode_graph(&mut tape, cfg, &w, y, e, enc.mask_arg())?;
        let poses = tape.value(out.poses);
        frames.extend_from_slice(poses.row(step - 1));
    }
    let predicted = frames.split_off(cfg.pose_dim());
    PoseSequence::new(
        Tensor::from_parts(vec![max_len, cfg.pose_dim()], predicted),
        cfg.joints,
    )
}
