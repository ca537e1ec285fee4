use std::fmt::Write as _;
use std::path::Path;

use crate::aligner::{cosine_matrix, FeaturePair};
use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seqmodel::{decode, decode_autoregressive, embed_pose, encode_glosses, shift_right, ModelParams, PoseSequence};
use crate::synthcorpus::CorpusSample;

use super::metrics::{alignment_metrics, dtw_p, fid_pose, mpjpe, AlignmentScores};

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SampleMetrics {
    pub index: usize,
    pub mpjpe: f64,
    pub dtw_p: f64,
    pub alignment_tau: f64,
    pub segment_accuracy: f64,
}

/// Split-level scores. Every field except `fid_pose` is the mean of the
/// per-sample values; `fid_pose` compares the pooled frames of the split.
#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct MetricReport {
    pub mpjpe: f64,
    pub dtw_p: f64,
    pub fid_pose: f64,
    pub alignment_tau: f64,
    pub segment_accuracy: f64,
    #[serde(skip)]
    pub per_sample: Vec<SampleMetrics>,
}

pub const REPORT_KEYS: [&str; 5] = ["mpjpe", "dtw_p", "fid_pose", "alignment_tau", "segment_accuracy"];

impl MetricReport {
    pub fn from_samples(per_sample: Vec<SampleMetrics>, fid_pose: f64) -> Result<Self> {
        if per_sample.is_empty() {
            return Err(Error::invalid("metric report needs at least one sample"));
        }
        let n = per_sample.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            mpjpe: mean(|s| s.mpjpe),
            dtw_p: mean(|s| s.dtw_p),
            alignment_tau: mean(|s| s.alignment_tau),
            segment_accuracy: mean(|s| s.segment_accuracy),
            fid_pose,
            per_sample,
        })
    }

    pub fn values(&self) -> [(&'static str, f64); 5] {
        [
            ("mpjpe", self.mpjpe),
            ("dtw_p", self.dtw_p),
            ("fid_pose", self.fid_pose),
            ("alignment_tau", self.alignment_tau),
            ("segment_accuracy", self.segment_accuracy),
        ]
    }

    /// `key=value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        self.values().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn per_sample_csv(&self) -> String {
        let mut out = String::from("index,mpjpe,dtw_p,alignment_tau,segment_accuracy\n");
        for s in &self.per_sample {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                s.index, s.mpjpe, s.dtw_p, s.alignment_tau, s.segment_accuracy
            );
        }
        out
    }

    /// Writes `report.txt`, `report.json` and `per_sample.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("report.txt", self.to_kv()),
            ("report.json", self.to_json()),
            ("per_sample.csv", self.per_sample_csv()),
        ] {
            let path = dir.join(name);
            std::fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

/// Stacks every frame of every sequence into one `K × J·3` matrix.
pub fn pooled_frames<'a>(seqs: impl IntoIterator<Item = &'a PoseSequence>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = None;
    for s in seqs {
        let c = *cols.get_or_insert(s.frames().cols());
        if c != s.frames().cols() {
            return Err(Error::shape("pooled_frames", "frame widths differ"));
        }
        data.extend_from_slice(s.frames().data());
        rows += s.len();
    }
    Tensor::new(vec![rows, cols.unwrap_or(0)], data)
}

/// Pose metrics of predictions against targets. Predictions shorter than
/// their target are scored against the target's prefix for MPJPE and the
/// full target for DTW-P. Alignment fields are left at zero.
pub fn score_poses(preds: &[PoseSequence], targets: &[PoseSequence]) -> Result<(Vec<SampleMetrics>, f64)> {
    if preds.len() != targets.len() {
        return Err(Error::invalid(format!("{} predictions for {} targets", preds.len(), targets.len())));
    }
    let mut rows = Vec::with_capacity(preds.len());
    for (i, (p, t)) in preds.iter().zip(targets).enumerate() {
        if p.joints() != t.joints() {
            return Err(Error::invalid(format!(
                "sample {i}: prediction has {} joints, target {}",
                p.joints(),
                t.joints()
            )));
        }
        let prefix = if p.len() < t.len() {
            let k: Vec<usize> = (0..p.len()).collect();
            PoseSequence::new(t.frames().select_rows(&k), t.joints())?
        } else {
            t.clone()
        };
        rows.push(SampleMetrics {
            index: i,
            mpjpe: mpjpe(p, &prefix)?,
            dtw_p: dtw_p(p, t)?,
            alignment_tau: 0.0,
            segment_accuracy: 0.0,
        });
    }
    let fid = fid_pose(&pooled_frames(preds)?, &pooled_frames(targets)?)?;
    Ok((rows, fid))
}

/// Teacher-forced frame-to-gloss cosine matrix (`M × N`) between the
/// decoder's visual features and the encoder's textual features, plus the
/// last-layer cross-attention.
pub fn alignment_maps(params: &ModelParams, sample: &CorpusSample) -> Result<(Tensor, Tensor)> {
    let enc = encode_glosses(&sample.glosses, params)?;
    let input = shift_right(sample.poses.frames(), &vec![0.0; params.config.pose_dim()])?;
    let input = PoseSequence::new(input, sample.poses.joints())?;
    let dec = decode(&embed_pose(&input, params)?, &enc, params)?;
    let pair = FeaturePair::from_raw(&enc.features, &dec.z, None, None)?;
    Ok((cosine_matrix(&pair).values().clone(), dec.cross_attention))
}

pub fn sample_alignment(params: &ModelParams, sample: &CorpusSample) -> Result<AlignmentScores> {
    let (sim, _) = alignment_maps(params, sample)?;
    alignment_metrics(&sim, &sample.alignment)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct EvalOptions {
    /// Upper bound on decoded frames; ground-truth length otherwise.
    pub max_len: Option<usize>,
}

/// Decodes every sample autoregressively at its ground-truth length and
/// scores poses and alignments.
pub fn evaluate(params: &ModelParams, samples: &[CorpusSample], options: EvalOptions) -> Result<MetricReport> {
    if let Some(s) = samples.iter().find(|s| s.poses.joints() != params.config.joints) {
        return Err(Error::invalid(format!(
            "corpus has {} joints, model expects {}",
            s.poses.joints(),
            params.config.joints
        )));
    }
    let bos = vec![0.0; params.config.pose_dim()];
    let mut preds = Vec::with_capacity(samples.len());
    for s in samples {
        let len = options.max_len.map_or(s.poses.len(), |cap| cap.min(s.poses.len()));
        let enc = encode_glosses(&s.glosses, params)?;
        preds.push(decode_autoregressive(&bos, &enc, params, len)?);
    }
    let targets: Vec<PoseSequence> = samples.iter().map(|s| s.poses.clone()).collect();
    let (mut rows, fid) = score_poses(&preds, &targets)?;
    for (row, s) in rows.iter_mut().zip(samples) {
        let a = sample_alignment(params, s)?;
        row.alignment_tau = a.tau;
        row.segment_accuracy = a.segment_accuracy;
    }
    MetricReport::from_samples(rows, fid)
}
