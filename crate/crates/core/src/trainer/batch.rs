use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::seqmodel::{
    decode_graph, embed_gloss_graph, embed_pose_graph, encode_graph, loss_acc_graph, shift_right, ModelParams,
    PoseSequence, PAD,
};
use crate::synthcorpus::CorpusSample;

/// Fraction of the corpus coordinate std that one unit of noise rate adds.
pub const NOISE_UNIT: f64 = 0.01;

/// Noise std for a given rate: `rate × 0.01 × coordinate_std`.
pub fn noise_std(noise_rate: f64, coordinate_std: f64) -> f64 {
    noise_rate * NOISE_UNIT * coordinate_std
}

/// Adds i.i.d. zero-mean Gaussian noise with the given std to every
/// coordinate. A zero std returns the input unchanged.
pub fn add_pose_noise<R: Rng + ?Sized>(pose: &PoseSequence, std: f64, rng: &mut R) -> Result<PoseSequence> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::invalid(format!("noise std {std} is not valid")));
    }
    if std == 0.0 {
        return Ok(pose.clone());
    }
    let normal = Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
    let frames = pose.frames();
    let data = frames.data().iter().map(|v| v + normal.sample(rng)).collect();
    PoseSequence::new(Tensor::new(frames.shape().to_vec(), data)?, pose.joints())
}

/// A batch right-padded to its longest gloss and pose sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    /// `B` rows of `N_max` ids, padded with PAD.
    pub glosses: Vec<Vec<usize>>,
    pub gloss_mask: Vec<Vec<bool>>,
    /// `B` matrices of `M_max × J·3`, padded with zero frames.
    pub poses: Vec<Tensor>,
    pub pose_mask: Vec<Vec<bool>>,
}

pub fn pad_batch(samples: &[&CorpusSample]) -> Result<PaddedBatch> {
    let first = samples.first().ok_or_else(|| Error::invalid("pad_batch: empty batch"))?;
    let dims = first.poses.frames().cols();
    if samples.iter().any(|s| s.poses.frames().cols() != dims) {
        return Err(Error::shape("pad_batch", "pose widths differ"));
    }
    let n_max = samples.iter().map(|s| s.glosses.len()).max().unwrap_or(0);
    let m_max = samples.iter().map(|s| s.poses.len()).max().unwrap_or(0);
    let mut out = PaddedBatch {
        glosses: Vec::new(),
        gloss_mask: Vec::new(),
        poses: Vec::new(),
        pose_mask: Vec::new(),
    };
    for s in samples {
        let (n, m) = (s.glosses.len(), s.poses.len());
        let mut ids = s.glosses.ids().to_vec();
        ids.resize(n_max, PAD);
        out.glosses.push(ids);
        out.gloss_mask.push((0..n_max).map(|i| i < n).collect());
        let mut frames = s.poses.frames().data().to_vec();
        frames.resize(m_max * dims, 0.0);
        out.poses.push(Tensor::new(vec![m_max, dims], frames)?);
        out.pose_mask.push((0..m_max).map(|i| i < m).collect());
    }
    Ok(out)
}

/// Teacher-forced pose loss of a padded batch, averaged over samples. Masks
/// keep padded glosses out of attention and padded frames out of the loss.
pub fn padded_loss_acc(params: &ModelParams, batch: &PaddedBatch) -> Result<f64> {
    let cfg = &params.config;
    let mut tape = Tape::new();
    let w = params.bind(&mut tape, false);
    let bos = vec![0.0; cfg.pose_dim()];
    let mut total = 0.0;
    for b in 0..batch.glosses.len() {
        let g = embed_gloss_graph(&mut tape, cfg, &w, &batch.glosses[b])?;
        let enc = encode_graph(&mut tape, cfg, &w, g, Some(&batch.gloss_mask[b]))?;
        let input = tape.constant(shift_right(&batch.poses[b], &bos)?);
        let y = embed_pose_graph(&mut tape, cfg, &w, input)?;
        let dec = decode_graph(&mut tape, cfg, &w, y, enc, Some(&batch.gloss_mask[b]))?;
        let target = tape.constant(batch.poses[b].clone());
        let loss = loss_acc_graph(&mut tape, dec.poses, target, Some(&batch.pose_mask[b]))?;
        total += tape.value(loss).item();
    }
    Ok(total / batch.glosses.len() as f64)
}
