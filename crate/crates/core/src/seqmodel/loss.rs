use crate::diffcore::{Tape, Var};
use crate::error::{Error, Result};

use super::vocab::PoseSequence;

/// Mean absolute error between predicted and target frames: the absolute
/// differences of each frame are summed over its coordinates, then averaged
/// over the frames kept by `mask` (all frames when `None`).
pub fn loss_acc_graph(tape: &mut Tape, pred: Var, target: Var, mask: Option<&[bool]>) -> Result<Var> {
    let (ps, ts) = (tape.shape(pred), tape.shape(target));
    if ps != ts || ps.len() != 2 {
        return Err(Error::shape("loss_acc", format!("{ps:?} vs {ts:?}")));
    }
    let m = ps[0];
    let keep: Vec<usize> = match mask {
        Some(mask) if mask.len() != m => {
            return Err(Error::shape("loss_acc", format!("mask of {} for {m} frames", mask.len())))
        }
        Some(mask) => (0..m).filter(|&i| mask[i]).collect(),
        None => (0..m).collect(),
    };
    if keep.is_empty() {
        return Err(Error::invalid("loss_acc: mask removes every frame"));
    }
    let diff = tape.sub(pred, target)?;
    let mut abs = tape.abs(diff);
    if keep.len() < m {
        abs = tape.gather_rows(abs, &keep)?;
    }
    let total = tape.sum(abs);
    Ok(tape.scale(total, 1.0 / keep.len() as f64))
}

pub fn loss_acc(pred: &PoseSequence, target: &PoseSequence, mask: Option<&[bool]>) -> Result<f64> {
    if pred.joints() != target.joints() {
        return Err(Error::shape(
            "loss_acc",
            format!("{} vs {} joints", pred.joints(), target.joints()),
        ));
    }
    let mut tape = Tape::new();
    let p = tape.constant(pred.frames().clone());
    let t = tape.constant(target.frames().clone());
    let l = loss_acc_graph(&mut tape, p, t, mask)?;
    Ok(tape.value(l).item())
}
