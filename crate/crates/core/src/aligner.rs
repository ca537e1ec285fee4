//! Fine-grained cross-modal alignment.
//!
//! Textual features (encoder outputs) and visual features (decoder `z`) are
//! normalized row-wise. Each visual frame is scored by its best-matching
//! gloss, and averaging those scores gives the sequence similarity `φ`.
//! A symmetric temperature-scaled contrastive loss over a batch then pulls
//! matched pairs together.

use crate::diffcore::{ReduceOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Tolerance on unit norm for rows of a [`FeaturePair`].
const UNIT_TOLERANCE: f64 = 1e-9;
const MIN_NORM: f64 = 1e-12;

/// Which way `φ` and best matches are taken.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Each visual frame picks its most similar gloss.
    VisualToText,
    /// Each gloss picks its most similar frame.
    TextToVisual,
}

/// Divides each unmasked row by its Euclidean norm. Masked rows are copied
/// through unchanged.
pub fn normalize_rows(features: &Tensor, mask: Option<&[bool]>) -> Result<Tensor> {
    if features.rank() != 2 {
        return Err(Error::shape("normalize_rows", format!("{:?}", features.shape())));
    }
    let keep = resolve_mask("normalize_rows", mask, features.rows())?;
    let c = features.cols();
    let mut out = features.data().to_vec();
    for (r, row) in out.chunks_mut(c).enumerate() {
        if !keep[r] {
            continue;
        }
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < MIN_NORM {
            return Err(Error::domain("normalize_rows", format!("row {r} has norm {n:e}")));
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(Tensor::from_parts(features.shape().to_vec(), out))
}

fn resolve_mask(op: &'static str, mask: Option<&[bool]>, rows: usize) -> Result<Vec<bool>> {
    match mask {
        Some(m) if m.len() != rows => {
            Err(Error::shape(op, format!("mask of {} for {rows} rows", m.len())))
        }
        Some(m) => Ok(m.to_vec()),
        None => Ok(vec![true; rows]),
    }
}

/// Unit-norm textual (`N × D`) and visual (`M × D`) features with masks.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePair {
    text: Tensor,
    visual: Tensor,
    text_mask: Vec<bool>,
    visual_mask: Vec<bool>,
}

impl FeaturePair {
    /// Wraps already-normalized features, checking every unmasked row is unit
    /// length.
    pub fn new(
        text: Tensor,
        visual: Tensor,
        text_mask: Option<&[bool]>,
        visual_mask: Option<&[bool]>,
    ) -> Result<Self> {
        if text.rank() != 2 || visual.rank() != 2 || text.cols() != visual.cols() {
            return Err(Error::shape(
                "feature_pair",
                format!("text {:?} vs visual {:?}", text.shape(), visual.shape()),
            ));
        }
        let text_mask = resolve_mask("feature_pair", text_mask, text.rows())?;
        let visual_mask = resolve_mask("feature_pair", visual_mask, visual.rows())?;
        for (t, mask) in [(&text, &text_mask), (&visual, &visual_mask)] {
            for r in (0..t.rows()).filter(|&r| mask[r]) {
                let n = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                if (n - 1.0).abs() > UNIT_TOLERANCE {
                    return Err(Error::domain("feature_pair", format!("row {r} has norm {n}")));
                }
            }
        }
        Ok(FeaturePair {
            text,
            visual,
            text_mask,
            visual_mask,
        })
    }

    /// Normalizes raw encoder and decoder features, then wraps them.
    pub fn from_raw(
        text: &Tensor,
        visual: &Tensor,
        text_mask: Option<&[bool]>,
        visual_mask: Option<&[bool]>,
    ) -> Result<Self> {
        FeaturePair::new(
            normalize_rows(text, text_mask)?,
            normalize_rows(visual, visual_mask)?,
            text_mask,
            visual_mask,
        )
    }

    pub fn text(&self) -> &Tensor {
        &self.text
    }

    pub fn visual(&self) -> &Tensor {
        &self.visual
    }

    pub fn text_mask(&self) -> &[bool] {
        &self.text_mask
    }

    pub fn visual_mask(&self) -> &[bool] {
        &self.visual_mask
    }
}

/// Cosine similarities between visual rows and text columns (`M × N`).
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    values: Tensor,
    row_mask: Vec<bool>,
    col_mask: Vec<bool>,
}

impl SimilarityMatrix {
    pub fn new(values: Tensor, row_mask: Option<&[bool]>, col_mask: Option<&[bool]>) -> Result<Self> {
        if values.rank() != 2 {
            return Err(Error::shape("similarity_matrix", format!("{:?}", values.shape())));
        }
        if let Some(v) = values.data().iter().find(|v| v.abs() > 1.0 + UNIT_TOLERANCE) {
            return Err(Error::domain("similarity_matrix", format!("{v} outside [-1, 1]")));
        }
        let row_mask = resolve_mask("similarity_matrix", row_mask, values.rows())?;
        let col_mask = resolve_mask("similarity_matrix", col_mask, values.cols())?;
        Ok(SimilarityMatrix {
            values,
            row_mask,
            col_mask,
        })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn row_mask(&self) -> &[bool] {
        &self.row_mask
    }

    pub fn col_mask(&self) -> &[bool] {
        &self.col_mask
    }

    pub fn at(&self, m: usize, n: usize) -> f64 {
        self.values.at(m, n)
    }
}

/// `values[m][n] = v_m · t_n`.
pub fn cosine_matrix(pair: &FeaturePair) -> SimilarityMatrix {
    let (v, t) = (&pair.visual, &pair.text);
    let (m, n) = (v.rows(), t.rows());
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            out.push(v.row(i).iter().zip(t.row(j)).map(|(a, b)| a * b).sum());
        }
    }
    SimilarityMatrix {
        values: Tensor::from_parts(vec![m, n], out),
        row_mask: pair.visual_mask.clone(),
        col_mask: pair.text_mask.clone(),
    }
}

/// Index of the best unmasked partner for every row (`VisualToText`) or
/// column (`TextToVisual`); `None` for masked entries. Ties go to the lowest
/// index.
pub fn best_match(sim: &SimilarityMatrix, direction: Direction) -> Result<Vec<Option<usize>>> {
    let (outer, inner) = match direction {
        Direction::VisualToText => (&sim.row_mask, &sim.col_mask),
        Direction::TextToVisual => (&sim.col_mask, &sim.row_mask),
    };
    if !outer.iter().any(|&k| k) || !inner.iter().any(|&k| k) {
        return Err(Error::invalid("best_match: a similarity axis is fully masked"));
    }
    let value = |a: usize, b: usize| match direction {
        Direction::VisualToText => sim.values.at(a, b),
        Direction::TextToVisual => sim.values.at(b, a),
    };
    Ok(outer
        .iter()
        .enumerate()
        .map(|(a, &keep)| {
            keep.then(|| {
                let mut best: Option<usize> = None;
                for b in (0..inner.len()).filter(|&b| inner[b]) {
                    if best.map_or(true, |k| value(a, b) > value(a, k)) {
                        best = Some(b);
                    }
                }
                best.expect("inner axis has an unmasked entry")
            })
        })
        .collect())
}

fn phi_of(sim: &SimilarityMatrix, direction: Direction) -> Result<f64> {
    let matches = best_match(sim, direction)?;
    let mut total = 0.0;
    let mut count = 0;
    for (a, b) in matches.iter().enumerate() {
        if let Some(b) = *b {
            total += match direction {
                Direction::VisualToText => sim.at(a, b),
                Direction::TextToVisual => sim.at(b, a),
            };
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean best-match similarity over unmasked rows in the given direction.
pub fn phi(pair: &FeaturePair, direction: Direction) -> Result<f64> {
    phi_of(&cosine_matrix(pair), direction)
}

/// `φ` for every visual/text combination in a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPhi {
    /// `vt[i][j] = φ(V_i, T_j)`.
    pub vt: Tensor,
    /// `tv[i][j] = φ(T_i, V_j)`.
    pub tv: Tensor,
}

pub fn batch_phi(pairs: &[FeaturePair]) -> Result<BatchPhi> {
    let b = pairs.len();
    if b == 0 {
        return Err(Error::invalid("batch_phi: empty batch"));
    }
    let mut vt = vec![0.0; b * b];
    let mut tv = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            let p = &pairs[i];
            let q = &pairs[j];
            // Visual of i against text of j.
            let cross = FeaturePair {
                text: q.text.clone(),
                visual: p.visual.clone(),
                text_mask: q.text_mask.clone(),
                visual_mask: p.visual_mask.clone(),
            };
            let sim = cosine_matrix(&cross);
            vt[i * b + j] = phi_of(&sim, Direction::VisualToText)?;
            // Text of i against visual of j.
            let cross = FeaturePair {
                text: p.text.clone(),
                visual: q.visual.clone(),
                text_mask: p.text_mask.clone(),
                visual_mask: q.visual_mask.clone(),
            };
            tv[i * b + j] = phi_of(&cosine_matrix(&cross), Direction::TextToVisual)?;
        }
    }
    Ok(BatchPhi {
        vt: Tensor::from_parts(vec![b, b], vt),
        tv: Tensor::from_parts(vec![b, b], tv),
    })
}

/// Symmetric contrastive loss: mean over the batch of the negative
/// log-softmax of each diagonal entry of `vt/τ` and `tv/τ`.
pub fn loss_ali(bp: &BatchPhi, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    check_square("loss_ali", &bp.vt, &bp.tv)?;
    let b = bp.vt.rows();
    let mut total = 0.0;
    for table in [&bp.vt, &bp.tv] {
        for i in 0..b {
            total -= log_softmax_at(table.row(i), i, 1.0 / tau);
        }
    }
    Ok(total / b as f64)
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

pub(crate) fn check_square(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    let ok = a.rank() == 2 && a.rows() == a.cols() && a.shape() == b.shape();
    if ok {
        Ok(())
    } else {
        Err(Error::shape(op, format!("{:?} and {:?}", a.shape(), b.shape())))
    }
}

/// `log softmax(scale · row)[k]` with max subtraction.
pub(crate) fn log_softmax_at(row: &[f64], k: usize, scale: f64) -> f64 {
    let max = row.iter().map(|v| v * scale).fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v * scale - max).exp()).sum::<f64>().ln() + max;
    row[k] * scale - lse
}

// -- tape versions -----------------------------------------------------

/// Cosine matrix `M × N` of raw visual and text features, with rows
/// normalized on the tape. Masked rows are dropped first.
pub fn cosine_graph(
    tape: &mut Tape,
    visual: Var,
    text: Var,
    visual_mask: Option<&[bool]>,
    text_mask: Option<&[bool]>,
) -> Result<Var> {
    let v = kept_rows(tape, visual, visual_mask)?;
    let t = kept_rows(tape, text, text_mask)?;
    let v = tape.normalize_rows(v)?;
    let t = tape.normalize_rows(t)?;
    let tt = tape.transpose(t)?;
    tape.matmul(v, tt)
}

fn kept_rows(tape: &mut Tape, x: Var, mask: Option<&[bool]>) -> Result<Var> {
    let Some(mask) = mask else { return Ok(x) };
    let rows = tape.shape(x).first().copied().unwrap_or(0);
    if mask.len() != rows {
        return Err(Error::shape("cosine_graph", format!("mask of {} for {rows} rows", mask.len())));
    }
    let keep: Vec<usize> = (0..rows).filter(|&r| mask[r]).collect();
    if keep.is_empty() {
        return Err(Error::invalid("cosine_graph: every row is masked"));
    }
    if keep.len() == rows {
        return Ok(x);
    }
    tape.gather_rows(x, &keep)
}

/// `φ` of a cosine matrix recorded on the tape. The gradient reaches only
/// the selected maxima.
pub fn phi_graph(tape: &mut Tape, sim: Var, direction: Direction) -> Result<Var> {
    let axis = match direction {
        Direction::VisualToText => 1,
        Direction::TextToVisual => 0,
    };
    let best = tape.reduce(ReduceOp::Max, sim, Some(axis))?;
    Ok(tape.mean(best))
}

/// `vt` and `tv` tables (`B × B`) for raw textual and visual features of a
/// batch. Each sequence is normalized once, and each visual/text cosine
/// matrix serves both directions.
pub fn batch_phi_graph(tape: &mut Tape, texts: &[Var], visuals: &[Var]) -> Result<(Var, Var)> {
    let b = texts.len();
    if b == 0 || visuals.len() != b {
        return Err(Error::shape("batch_phi", format!("{b} texts and {} visuals", visuals.len())));
    }
    let mut tn = Vec::with_capacity(b);
    for &t in texts {
        let n = tape.normalize_rows(t)?;
        tn.push(tape.transpose(n)?);
    }
    let vn = visuals
        .iter()
        .map(|&v| tape.normalize_rows(v))
        .collect::<Result<Vec<_>>>()?;
    let mut vt = Vec::with_capacity(b * b);
    let mut tv = vec![None; b * b];
    for i in 0..b {
        for j in 0..b {
            let sim = tape.matmul(vn[i], tn[j])?;
            vt.push(phi_graph(tape, sim, Direction::VisualToText)?);
            tv[j * b + i] = Some(phi_graph(tape, sim, Direction::TextToVisual)?);
        }
    }
    let tv: Vec<Var> = tv.into_iter().map(|v| v.expect("every cell filled")).collect();
    Ok((tape.stack(&vt, &[b, b])?, tape.stack(&tv, &[b, b])?))
}

/// [`loss_ali`] on `B × B` tables held on the tape.
pub fn loss_ali_graph(tape: &mut Tape, vt: Var, tv: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    check_square("loss_ali", tape.value(vt), tape.value(tv))?;
    let b = tape.value(vt).rows();
    let diag_sum = |tape: &mut Tape, table: Var| -> Result<Var> {
        let scaled = tape.scale(table, 1.0 / tau);
        let ls = tape.log_softmax_rows(scaled)?;
        let eye = tape.constant(Tensor::identity(b));
        let picked = tape.mul(ls, eye)?;
        Ok(tape.sum(picked))
    };
    let a = diag_sum(tape, vt)?;
    let c = diag_sum(tape, tv)?;
    let total = tape.add(a, c)?;
    Ok(tape.scale(total, -1.0 / b as f64))
}
