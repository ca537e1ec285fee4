//! Sequence-level multimodal comparison.
//!
//! Each feature sequence is mean-pooled and renormalized, giving one unit
//! vector per video and per text. The `B × B` table of their dot products
//! is scored with an additive-margin softmax in both directions, which
//! pushes every matched pair above its in-batch negatives by `σ`.

use crate::aligner::{check_square, log_softmax_at};
use crate::diffcore::{ReduceOp, Tape, Tensor, Var};
use crate::error::{Error, Result};

const MIN_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Text,
    Video,
}

/// Unit-norm pooled sequence feature.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledEmbedding {
    vector: Vec<f64>,
    modality: Modality,
}

impl PooledEmbedding {
    pub fn new(vector: Vec<f64>, modality: Modality) -> Result<Self> {
        let n = vector.iter().map(|x| x * x).sum::<f64>().sqrt();
        if vector.is_empty() || (n - 1.0).abs() > 1e-9 {
            return Err(Error::domain("pooled_embedding", format!("norm {n}")));
        }
        Ok(PooledEmbedding { vector, modality })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn modality(&self) -> Modality {
        self.modality
    }
}

/// Mean of the unmasked rows, renormalized to unit length.
pub fn pool_sequence(features: &Tensor, mask: Option<&[bool]>, modality: Modality) -> Result<PooledEmbedding> {
    if features.rank() != 2 {
        return Err(Error::shape("pool_sequence", format!("{:?}", features.shape())));
    }
    let rows = features.rows();
    if mask.is_some_and(|m| m.len() != rows) {
        return Err(Error::shape("pool_sequence", "mask length differs from row count"));
    }
    let keep = |r: usize| mask.map_or(true, |m| m[r]);
    let count = (0..rows).filter(|&r| keep(r)).count();
    if count == 0 {
        return Err(Error::invalid("pool_sequence: every row is masked"));
    }
    let mut mean = vec![0.0; features.cols()];
    for r in (0..rows).filter(|&r| keep(r)) {
        for (acc, v) in mean.iter_mut().zip(features.row(r)) {
            *acc += v / count as f64;
        }
    }
    let n = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n < MIN_NORM {
        return Err(Error::domain("pool_sequence", format!("pooled mean has norm {n:e}")));
    }
    mean.iter_mut().for_each(|x| *x /= n);
    Ok(PooledEmbedding {
        vector: mean,
        modality,
    })
}

/// In-batch triplets for a batch of `B` matched pairs. The video-anchored
/// set holds `(i, i, j)` as (anchor video, positive text, negative text);
/// the text-anchored set holds (anchor text, positive video, negative
/// video). Negatives always satisfy `j != i`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TripletSets {
    pub video_anchored: Vec<(usize, usize, usize)>,
    pub text_anchored: Vec<(usize, usize, usize)>,
}

impl TripletSets {
    pub fn in_batch(b: usize) -> Self {
        let set: Vec<_> = (0..b)
            .flat_map(|i| (0..b).filter(move |&j| j != i).map(move |j| (i, i, j)))
            .collect();
        TripletSets {
            video_anchored: set.clone(),
            text_anchored: set,
        }
    }
}

/// `B × B` table with cell `(i, j) = d(V_i, T_j)`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityTable {
    values: Tensor,
}

impl SimilarityTable {
    pub fn new(values: Tensor) -> Result<Self> {
        check_square("similarity_table", &values, &values)?;
        if let Some(v) = values.data().iter().find(|v| v.abs() > 1.0 + 1e-9) {
            return Err(Error::domain("similarity_table", format!("{v} outside [-1, 1]")));
        }
        Ok(SimilarityTable { values })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn batch(&self) -> usize {
        self.values.rows()
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values.at(i, j)
    }
}

pub fn similarity_table(videos: &[PooledEmbedding], texts: &[PooledEmbedding]) -> Result<SimilarityTable> {
    let b = videos.len();
    if b == 0 || texts.len() != b {
        return Err(Error::shape(
            "similarity_table",
            format!("{b} videos and {} texts", texts.len()),
        ));
    }
    let d = videos[0].vector.len();
    if videos.iter().chain(texts).any(|p| p.vector.len() != d) {
        return Err(Error::shape("similarity_table", "embedding widths differ"));
    }
    let mut out = Vec::with_capacity(b * b);
    for v in videos {
        for t in texts {
            out.push(v.vector.iter().zip(&t.vector).map(|(a, c)| a * c).sum());
        }
    }
    Ok(SimilarityTable {
        values: Tensor::from_parts(vec![b, b], out),
    })
}

/// Which margin constraints hold. `video[i][j]` is
/// `d(V_i T_i) > d(V_i T_j) + σ` and `text[i][j]` is
/// `d(V_i T_i) > d(V_j T_i) + σ`; diagonal cells are `false`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MarginCheck {
    pub video: Vec<Vec<bool>>,
    pub text: Vec<Vec<bool>>,
}

impl MarginCheck {
    /// Fraction of the `2·B·(B−1)` off-diagonal constraints that hold; `1`
    /// when there are none.
    pub fn rate(&self) -> f64 {
        let b = self.video.len();
        if b < 2 {
            return 1.0;
        }
        let held = self
            .video
            .iter()
            .chain(&self.text)
            .flatten()
            .filter(|&&ok| ok)
            .count();
        held as f64 / (2 * b * (b - 1)) as f64
    }
}

pub fn margin_satisfied(table: &SimilarityTable, sigma: f64) -> Result<MarginCheck> {
    check_sigma(sigma)?;
    let b = table.batch();
    let grid = |f: &dyn Fn(usize, usize) -> bool| -> Vec<Vec<bool>> {
        (0..b).map(|i| (0..b).map(|j| i != j && f(i, j)).collect()).collect()
    };
    Ok(MarginCheck {
        video: grid(&|i, j| table.at(i, i) > table.at(i, j) + sigma),
        text: grid(&|i, j| table.at(i, i) > table.at(j, i) + sigma),
    })
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma >= 0.0 && sigma.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("margin must be non-negative, got {sigma}")))
    }
}

/// Additive-margin softmax cross-entropy in both directions, averaged over
/// the batch. `σ` is subtracted from each positive logit before the
/// softmax.
pub fn loss_com(table: &SimilarityTable, sigma: f64) -> Result<f64> {
    check_sigma(sigma)?;
    let b = table.batch();
    let mut total = 0.0;
    for t in [table.values.clone(), table.values.transpose()] {
        for i in 0..b {
            let mut row = t.row(i).to_vec();
            row[i] -= sigma;
            total -= log_softmax_at(&row, i, 1.0);
        }
    }
    Ok(total / b as f64)
}

// -- tape versions -----------------------------------------------------

/// [`pool_sequence`] on the tape; returns a `1 × D` unit row.
pub fn pool_graph(tape: &mut Tape, features: Var, mask: Option<&[bool]>) -> Result<Var> {
    let rows = tape.shape(features).first().copied().unwrap_or(0);
    let x = match mask {
        Some(m) if m.len() != rows => {
            return Err(Error::shape("pool_graph", "mask length differs from row count"))
        }
        Some(m) => {
            let keep: Vec<usize> = (0..rows).filter(|&r| m[r]).collect();
            if keep.is_empty() {
                return Err(Error::invalid("pool_graph: every row is masked"));
            }
            tape.gather_rows(features, &keep)?
        }
        None => features,
    };
    let mean = tape.reduce(ReduceOp::Mean, x, Some(0))?;
    let d = tape.value(mean).len();
    let row = tape.reshape(mean, &[1, d])?;
    tape.normalize_rows(row)
}

/// Stacks `B` pooled `1 × D` rows per modality into the `B × B` table.
pub fn similarity_table_graph(tape: &mut Tape, videos: &[Var], texts: &[Var]) -> Result<Var> {
    let b = videos.len();
    if b == 0 || texts.len() != b {
        return Err(Error::shape("similarity_table", format!("{b} videos and {} texts", texts.len())));
    }
    let d = tape.value(videos[0]).len();
    let v = tape.stack(videos, &[b, d])?;
    let t = tape.stack(texts, &[b, d])?;
    let tt = tape.transpose(t)?;
    tape.matmul(v, tt)
}

/// [`loss_com`] on a `B × B` table held on the tape.
pub fn loss_com_graph(tape: &mut Tape, table: Var, sigma: f64) -> Result<Var> {
    check_sigma(sigma)?;
    let shape = tape.shape(table).to_vec();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::shape("loss_com", format!("{shape:?}")));
    }
    let b = shape[0];
    let eye = Tensor::identity(b);
    let margin = tape.constant(eye.map(|v| v * sigma));
    let eye = tape.constant(eye);
    let mut total = None;
    for t in [table, tape.transpose(table)?] {
        let adjusted = tape.sub(t, margin)?;
        let ls = tape.log_softmax_rows(adjusted)?;
        let picked = tape.mul(ls, eye)?;
        let s = tape.sum(picked);
        total = Some(match total {
            Some(acc) => tape.add(acc, s)?,
            None => s,
        });
    }
    let total = total.expect("two directions");
    Ok(tape.scale(total, -1.0 / b as f64))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffcore::finite_diff_check;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn unit(rng: &mut ChaCha8Rng, d: usize, modality: Modality) -> PooledEmbedding {
        pool_sequence(&random(rng, 1, d), None, modality).unwrap()
    }

    fn table(rows: &[Vec<f64>]) -> SimilarityTable {
        SimilarityTable::new(Tensor::from_rows(rows).unwrap()).unwrap()
    }

    #[test]
    fn pooling_examples_and_loop_oracle() {
        let row = Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap();
        assert_eq!(pool_sequence(&row, None, Modality::Text).unwrap().vector(), &[0.6, 0.8]);
        let twice = Tensor::matrix(2, 2, vec![0.6, 0.8, 0.6, 0.8]).unwrap();
        let p = pool_sequence(&twice, None, Modality::Video).unwrap();
        assert!(p.vector().iter().zip([0.6, 0.8]).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(p.modality(), Modality::Video);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 3, 4);
        let got = pool_sequence(&x, None, Modality::Text).unwrap();
        let mut mean = [0.0; 4];
        for r in 0..3 {
            for c in 0..4 {
                mean[c] += x.at(r, c);
            }
        }
        let n = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..4 {
            assert!((got.vector()[c] - mean[c] / n).abs() < 1e-12);
        }

        let masked = pool_sequence(&x, Some(&[true, false, true]), Modality::Text).unwrap();
        let direct = pool_sequence(&x.select_rows(&[0, 2]), None, Modality::Text).unwrap();
        assert!(masked.vector().iter().zip(direct.vector()).all(|(a, b)| (a - b).abs() < 1e-15));
        assert!(matches!(
            pool_sequence(&x, Some(&[false; 3]), Modality::Text),
            Err(Error::InvalidInput(_))
        ));
        let opposite = Tensor::matrix(2, 2, vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        assert!(matches!(pool_sequence(&opposite, None, Modality::Text), Err(Error::Domain { .. })));
    }

    #[test]
    fn triplets_use_in_batch_negatives() {
        let t = TripletSets::in_batch(3);
        assert_eq!(t.video_anchored.len(), 6);
        assert!(t.video_anchored.iter().all(|&(a, p, n)| a == p && n != a && n < 3));
        assert_eq!(t.text_anchored, t.video_anchored);
        assert!(TripletSets::in_batch(1).video_anchored.is_empty());
    }

    #[test]
    fn table_examples_and_loop_oracle() {
        let x = PooledEmbedding::new(vec![0.6, 0.8], Modality::Video).unwrap();
        let neg = PooledEmbedding::new(vec![-0.6, -0.8], Modality::Text).unwrap();
        let t = similarity_table(&[x.clone()], &[x.clone()]).unwrap();
        assert!((t.at(0, 0) - 1.0).abs() < 1e-15);
        let t = similarity_table(&[x], &[neg]).unwrap();
        assert!((t.at(0, 0) + 1.0).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let v: Vec<_> = (0..3).map(|_| unit(&mut rng, 5, Modality::Video)).collect();
        let w: Vec<_> = (0..3).map(|_| unit(&mut rng, 5, Modality::Text)).collect();
        let t = similarity_table(&v, &w).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let mut dot = 0.0;
                for k in 0..5 {
                    dot += v[i].vector()[k] * w[j].vector()[k];
                }
                assert!((t.at(i, j) - dot).abs() < 1e-12);
            }
        }
        assert!(similarity_table(&v, &w[..2]).is_err());
        assert!(PooledEmbedding::new(vec![1.0, 1.0], Modality::Text).is_err());
    }

    #[test]
    fn margin_examples_and_loop_oracle() {
        let eye = table(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(margin_satisfied(&eye, 0.5).unwrap().rate(), 1.0);
        let flat = table(&[vec![0.3; 3], vec![0.3; 3], vec![0.3; 3]]);
        for sigma in [0.0, 0.1] {
            assert_eq!(margin_satisfied(&flat, sigma).unwrap().rate(), 0.0);
        }
        assert!(margin_satisfied(&flat, -0.1).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = SimilarityTable::new(random(&mut rng, 4, 4)).unwrap();
        let m = margin_satisfied(&t, 0.05).unwrap();
        let mut held = 0;
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let v = t.at(i, i) > t.at(i, j) + 0.05;
                let w = t.at(i, i) > t.at(j, i) + 0.05;
                assert_eq!(m.video[i][j], v);
                assert_eq!(m.text[i][j], w);
                held += v as usize + w as usize;
            }
        }
        assert!((m.rate() - held as f64 / 24.0).abs() < 1e-15);
    }

    #[test]
    fn loss_com_examples() {
        assert_eq!(loss_com(&table(&[vec![0.7]]), 0.0).unwrap(), 0.0);
        let eye = table(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let e = std::f64::consts::E;
        let got = loss_com(&eye, 0.0).unwrap();
        assert!((got + 2.0 * (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((got - 0.6265).abs() < 1e-4);
        let dom = table(&[vec![0.9, 0.1, -0.2], vec![0.0, 0.8, 0.3], vec![0.1, -0.4, 0.7]]);
        assert!(loss_com(&dom, 0.05).unwrap() > loss_com(&dom, 0.0).unwrap());
        assert!(loss_com(&eye, -0.01).is_err());
    }

    #[test]
    fn loss_com_shrinks_with_margin() {
        let flat = loss_com(&table(&vec![vec![0.0; 3]; 3]), 0.05).unwrap();
        let mut prev = f64::INFINITY;
        for gap in [0.2, 0.5, 1.0, 2.0] {
            let rows: Vec<Vec<f64>> = (0..3)
                .map(|i| (0..3).map(|j| if i == j { gap / 2.0 } else { -gap / 2.0 }).collect())
                .collect();
            let t = SimilarityTable::new(Tensor::from_rows(&rows).unwrap()).unwrap();
            let l = loss_com(&t, 0.05).unwrap();
            assert!(l > 0.0 && l < prev);
            prev = l;
            if gap > 0.05 {
                assert!(l < flat);
            }
        }
        // Far beyond the [-1, 1] range of a real table, the loss vanishes.
        let mut tape = Tape::new();
        let big = tape.constant(Tensor::identity(3).map(|v| 60.0 * v));
        let l = loss_com_graph(&mut tape, big, 0.05).unwrap();
        assert!(tape.value(l).item() < 1e-20);
    }

    #[test]
    fn one_descent_step_widens_every_margin() {
        let mut tape = Tape::new();
        let t = tape.leaf(Tensor::filled(&[3, 3], 0.2), true);
        let l = loss_com_graph(&mut tape, t, 0.05).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(t).unwrap();
        let next = Tensor::from_rows(
            &(0..3)
                .map(|i| (0..3).map(|j| 0.2 - 0.1 * g.at(i, j)).collect())
                .collect::<Vec<_>>(),
        )
        .unwrap();
        for i in 0..3 {
            for j in (0..3).filter(|&j| j != i) {
                assert!(next.at(i, i) - next.at(i, j) > 0.0);
                assert!(next.at(i, i) - next.at(j, i) > 0.0);
            }
        }
    }

    proptest! {
        #[test]
        fn loss_com_positive_and_row_shift_invariant(
            vals in prop::collection::vec(-1.0f64..1.0, 9),
            shift in -1.0f64..1.0,
            row in 0usize..3,
        ) {
            let t = Tensor::new(vec![3, 3], vals).unwrap();
            let base = loss_com(&SimilarityTable { values: t.clone() }, 0.05).unwrap();
            prop_assert!(base > 0.0);
            // A row shift leaves the video-anchored terms unchanged.
            let mut shifted = t.clone();
            shifted.data_mut()[row * 3..row * 3 + 3].iter_mut().for_each(|v| *v += shift);
            let dir = |t: &Tensor| -> f64 {
                (0..3).map(|i| {
                    let mut r = t.row(i).to_vec();
                    r[i] -= 0.05;
                    -log_softmax_at(&r, i, 1.0)
                }).sum()
            };
            prop_assert!((dir(&t) - dir(&shifted)).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_matches_value_level_and_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let videos: Vec<Tensor> = (0..3).map(|i| random(&mut rng, 3 + i, 4)).collect();
        let texts: Vec<Tensor> = (0..3).map(|i| random(&mut rng, 4 - i, 4)).collect();
        let pv: Vec<_> = videos.iter().map(|v| pool_sequence(v, None, Modality::Video).unwrap()).collect();
        let pt: Vec<_> = texts.iter().map(|t| pool_sequence(t, None, Modality::Text).unwrap()).collect();
        let want = loss_com(&similarity_table(&pv, &pt).unwrap(), 0.05).unwrap();

        let build = |tape: &mut Tape, replace: Option<(usize, Var)>| -> Result<Var> {
            let mut vs = Vec::new();
            for (i, v) in videos.iter().enumerate() {
                let x = match replace {
                    Some((k, x)) if k == i => x,
                    _ => tape.constant(v.clone()),
                };
                vs.push(pool_graph(tape, x, None)?);
            }
            let mut ts = Vec::new();
            for t in &texts {
                let x = tape.constant(t.clone());
                ts.push(pool_graph(tape, x, None)?);
            }
            let table = similarity_table_graph(tape, &vs, &ts)?;
            loss_com_graph(tape, table, 0.05)
        };
        let mut tape = Tape::new();
        let got = build(&mut tape, None).unwrap();
        assert!((tape.value(got).item() - want).abs() < 1e-12);

        for k in 0..3 {
            let err = finite_diff_check(|tape, x| build(tape, Some((k, x))), &videos[k], 1e-6).unwrap();
            assert!(err < 1e-4, "video {k}: {err}");
        }
        // Directly against pooled embeddings too.
        let pooled = Tensor::from_rows(&pv.iter().map(|p| p.vector().to_vec()).collect::<Vec<_>>()).unwrap();
        let err = finite_diff_check(
            |tape, x| {
                let n = tape.normalize_rows(x)?;
                let t = tape.constant(Tensor::from_rows(&pt.iter().map(|p| p.vector().to_vec()).collect::<Vec<_>>())?);
                let tt = tape.transpose(t)?;
                let table = tape.matmul(n, tt)?;
                loss_com_graph(tape, table, 0.05)
            },
            &pooled,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "pooled: {err}");
    }
}
