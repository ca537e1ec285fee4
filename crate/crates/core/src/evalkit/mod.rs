//! Pose and alignment metrics.
//!
//! Pose quality: MPJPE, path-normalized DTW (DTW-P) and a Fréchet distance
//! between Gaussian fits of raw pose frames. Alignment quality: how often a
//! frame's best gloss is its true gloss, and a rank correlation between
//! frame order and matched gloss order.

mod heatmap;
mod metrics;
mod report;

pub use heatmap::{export_heatmap, heatmap_csv, heatmap_pgm, parse_heatmap_csv};
pub use metrics::{alignment_metrics, dtw_p, fid_pose, frame_cost, mpjpe, row_argmax, AlignmentScores, FID_RIDGE};
pub use report::{
    alignment_maps, evaluate, pooled_frames, sample_alignment, score_poses, EvalOptions, MetricReport,
    SampleMetrics, REPORT_KEYS,
};

#[cfg(test)]
mod tests;
