use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seqmodel::PoseSequence;

/// Ridge added to both covariances before the Fréchet distance.
pub const FID_RIDGE: f64 = 1e-6;

fn joint_distance(a: &[f64], b: &[f64], j: usize) -> f64 {
    let d = |k: usize| a[3 * j + k] - b[3 * j + k];
    (d(0) * d(0) + d(1) * d(1) + d(2) * d(2)).sqrt()
}

/// Mean per-joint Euclidean distance between two frames.
pub fn frame_cost(a: &[f64], b: &[f64], joints: usize) -> f64 {
    (0..joints).map(|j| joint_distance(a, b, j)).sum::<f64>() / joints as f64
}

/// Mean over frames and joints of the Euclidean joint error.
pub fn mpjpe(pred: &PoseSequence, target: &PoseSequence) -> Result<f64> {
    if pred.len() != target.len() || pred.joints() != target.joints() {
        return Err(Error::invalid(format!(
            "mpjpe needs matching sequences, got {}×{} and {}×{}",
            pred.len(),
            pred.joints(),
            target.len(),
            target.joints()
        )));
    }
    let total: f64 = (0..pred.len())
        .map(|m| frame_cost(pred.frame(m), target.frame(m), pred.joints()))
        .sum();
    Ok(total / pred.len() as f64)
}

/// Dynamic time warping cost divided by the length of the optimal warping
/// path. Among equal-cost paths the shortest wins.
pub fn dtw_p(pred: &PoseSequence, target: &PoseSequence) -> Result<f64> {
    if pred.joints() != target.joints() {
        return Err(Error::shape(
            "dtw_p",
            format!("{} vs {} joints", pred.joints(), target.joints()),
        ));
    }
    let (n, m, joints) = (pred.len(), target.len(), pred.joints());
    // (accumulated cost, path length), compared lexicographically.
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let c = frame_cost(pred.frame(i), target.frame(j), joints);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut prev = [None; 3];
                if i > 0 {
                    prev[0] = Some(acc[(i - 1) * m + j]);
                }
                if j > 0 {
                    prev[1] = Some(acc[i * m + j - 1]);
                }
                if i > 0 && j > 0 {
                    prev[2] = Some(acc[(i - 1) * m + j - 1]);
                }
                prev.into_iter()
                    .flatten()
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .expect("a predecessor exists off the origin")
            };
            acc[i * m + j] = (best.0 + c, best.1 + 1);
        }
    }
    let (cost, len) = acc[n * m - 1];
    Ok(cost / len as f64)
}

fn gaussian(frames: &Tensor) -> (DVector<f64>, DMatrix<f64>) {
    let (k, d) = (frames.rows(), frames.cols());
    let x = DMatrix::from_row_slice(k, d, frames.data());
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(k, d, |r, c| x[(r, c)] - mean[c]);
    let cov = centered.transpose() * &centered / (k - 1) as f64
        + DMatrix::identity(d, d) * FID_RIDGE;
    (mean, cov)
}

fn psd_sqrt(m: DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fit to two sets of pose frames
/// (`K × J·3`, one frame per row).
pub fn fid_pose(set_a: &Tensor, set_b: &Tensor) -> Result<f64> {
    if set_a.rank() != 2 || set_b.rank() != 2 || set_a.cols() != set_b.cols() {
        return Err(Error::shape(
            "fid_pose",
            format!("{:?} vs {:?}", set_a.shape(), set_b.shape()),
        ));
    }
    let d = set_a.cols();
    if set_a.rows() <= d || set_b.rows() <= d {
        return Err(Error::invalid(format!(
            "fid_pose needs more than {d} frames per set, got {} and {}",
            set_a.rows(),
            set_b.rows()
        )));
    }
    let (mu_a, cov_a) = gaussian(set_a);
    let (mu_b, cov_b) = gaussian(set_b);
    let root_a = psd_sqrt(cov_a.clone());
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let trace_root: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    let mean_term = (&mu_a - &mu_b).norm_squared();
    Ok((mean_term + cov_a.trace() + cov_b.trace() - 2.0 * trace_root).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize)]
pub struct AlignmentScores {
    /// Rank agreement between frame order and matched gloss order.
    pub tau: f64,
    /// Fraction of frames whose best gloss is the true one.
    pub segment_accuracy: f64,
}

/// Index of the largest entry of each row; ties go to the lowest index.
pub fn row_argmax(matrix: &Tensor) -> Vec<usize> {
    (0..matrix.rows())
        .map(|r| {
            let row = matrix.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Scores an `M × N` frame-to-gloss matrix against the true alignment.
///
/// `tau` counts frame pairs whose matched glosses differ: concordant pairs
/// move forward in both frame and gloss order, discordant ones move
/// backward. It is `(C − D) / (C + D)`, and 0 when every frame matches the
/// same gloss.
pub fn alignment_metrics(matrix: &Tensor, truth: &[usize]) -> Result<AlignmentScores> {
    if matrix.rank() != 2 || matrix.rows() != truth.len() {
        return Err(Error::invalid(format!(
            "alignment matrix {:?} for {} frames",
            matrix.shape(),
            truth.len()
        )));
    }
    if let Some(&bad) = truth.iter().find(|&&g| g >= matrix.cols()) {
        return Err(Error::invalid(format!(
            "true gloss {bad} outside {} columns",
            matrix.cols()
        )));
    }
    let best = row_argmax(matrix);
    let hits = best.iter().zip(truth).filter(|(a, b)| a == b).count();
    let (mut concordant, mut discordant) = (0u64, 0u64);
    for i in 0..best.len() {
        for j in i + 1..best.len() {
            match best[j].cmp(&best[i]) {
                std::cmp::Ordering::Greater => concordant += 1,
                std::cmp::Ordering::Less => discordant += 1,
                std::cmp::Ordering::Equal => {}
            }
        }
    }
    let pairs = concordant + discordant;
    let tau = if pairs == 0 {
        0.0
    } else {
        (concordant as f64 - discordant as f64) / pairs as f64
    };
    Ok(AlignmentScores {
        tau,
        segment_accuracy: hits as f64 / truth.len() as f64,
    })
}
