use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::Tensor;
use crate::error::Error;
use crate::seqmodel::{ModelConfig, ModelParams, PoseSequence};
use crate::synthcorpus::{generate, CorpusManifest};

fn pose(rng: &mut ChaCha8Rng, m: usize, joints: usize) -> PoseSequence {
    let data = (0..m * joints * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    PoseSequence::new(Tensor::new(vec![m, joints * 3], data).unwrap(), joints).unwrap()
}

fn shifted(p: &PoseSequence, f: impl Fn(usize, f64) -> f64) -> PoseSequence {
    let data = p.frames().data().iter().enumerate().map(|(i, &v)| f(i, v)).collect();
    PoseSequence::new(Tensor::new(p.frames().shape().to_vec(), data).unwrap(), p.joints()).unwrap()
}

#[test]
fn mpjpe_examples_and_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for joints in [1, 3, 8] {
        let x = pose(&mut rng, 5, joints);
        assert_eq!(mpjpe(&x, &x).unwrap(), 0.0);
        let y = shifted(&x, |i, v| if i % 3 == 1 { v + 1.0 } else { v });
        assert!((mpjpe(&y, &x).unwrap() - 1.0).abs() < 1e-12);
    }
    let (a, b) = (pose(&mut rng, 4, 3), pose(&mut rng, 4, 3));
    let mut total = 0.0;
    for m in 0..4 {
        for j in 0..3 {
            let (p, q) = (a.joint(m, j), b.joint(m, j));
            total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt();
        }
    }
    assert!((mpjpe(&a, &b).unwrap() - total / 12.0).abs() < 1e-12);
    let offset = |p: &PoseSequence| shifted(p, |i, v| v + [0.3, -2.0, 5.0][i % 3]);
    assert!((mpjpe(&offset(&a), &offset(&b)).unwrap() - mpjpe(&a, &b).unwrap()).abs() < 1e-12);
    let short = pose(&mut rng, 3, 3);
    assert!(matches!(mpjpe(&short, &a), Err(Error::InvalidInput(_))));
}

/// Every monotone warping path from (0,0) to (n−1,m−1), scored by total
/// cost, shortest path winning ties.
fn dtw_oracle(a: &PoseSequence, b: &PoseSequence) -> f64 {
    fn walk(
        i: usize,
        j: usize,
        cost: f64,
        len: usize,
        a: &PoseSequence,
        b: &PoseSequence,
        best: &mut (f64, usize),
    ) {
        let cost = cost + frame_cost(a.frame(i), b.frame(j), a.joints());
        let len = len + 1;
        if i + 1 == a.len() && j + 1 == b.len() {
            if cost < best.0 || (cost == best.0 && len < best.1) {
                *best = (cost, len);
            }
            return;
        }
        if i + 1 < a.len() {
            walk(i + 1, j, cost, len, a, b, best);
        }
        if j + 1 < b.len() {
            walk(i, j + 1, cost, len, a, b, best);
        }
        if i + 1 < a.len() && j + 1 < b.len() {
            walk(i + 1, j + 1, cost, len, a, b, best);
        }
    }
    let mut best = (f64::INFINITY, 0);
    walk(0, 0, 0.0, 0, a, b, &mut best);
    best.0 / best.1 as f64
}

#[test]
fn dtw_matches_exhaustive_paths_up_to_five_by_five() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for n in 1..=5 {
        for m in 1..=5 {
            let (a, b) = (pose(&mut rng, n, 2), pose(&mut rng, m, 2));
            let got = dtw_p(&a, &b).unwrap();
            assert!((got - dtw_oracle(&a, &b)).abs() < 1e-12, "{n}×{m}");
        }
    }
}

#[test]
fn dtw_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = pose(&mut rng, 6, 4);
    assert_eq!(dtw_p(&x, &x).unwrap(), 0.0);
    let (a, b) = (pose(&mut rng, 1, 4), pose(&mut rng, 1, 4));
    assert!((dtw_p(&a, &b).unwrap() - frame_cost(a.frame(0), b.frame(0), 4)).abs() < 1e-15);
    for _ in 0..50 {
        let (n, m) = (rng.gen_range(1..12), rng.gen_range(1..12));
        let (a, b) = (pose(&mut rng, n, 3), pose(&mut rng, m, 3));
        let (ab, ba) = (dtw_p(&a, &b).unwrap(), dtw_p(&b, &a).unwrap());
        assert!((ab - ba).abs() < 1e-12 && ab >= 0.0);
    }
    assert!(dtw_p(&x, &pose(&mut rng, 3, 2)).is_err());
}

// -- Fréchet distance oracle -------------------------------------------

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix.
fn jacobi(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| (i == j) as u8 as f64).collect()).collect();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i][j] * a[i][j]).sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vp, vq) = (row[p], row[q]);
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = a.len();
    (0..n)
        .map(|i| (0..n).map(|j| (0..n).map(|k| a[i][k] * b[k][j]).sum()).collect())
        .collect()
}

fn fid_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let stats = |x: &Tensor| {
        let (k, d) = (x.rows(), x.cols());
        let mu: Vec<f64> = (0..d).map(|c| (0..k).map(|r| x.at(r, c)).sum::<f64>() / k as f64).collect();
        let cov: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| {
                        let s: f64 = (0..k).map(|r| (x.at(r, i) - mu[i]) * (x.at(r, j) - mu[j])).sum();
                        s / (k - 1) as f64 + if i == j { 1e-6 } else { 0.0 }
                    })
                    .collect()
            })
            .collect();
        (mu, cov)
    };
    let (ma, ca) = stats(a);
    let (mb, cb) = stats(b);
    let d = ma.len();
    let (la, va) = jacobi(ca.clone());
    let root: Vec<Vec<f64>> = (0..d)
        .map(|i| (0..d).map(|j| (0..d).map(|k| va[i][k] * la[k].max(0.0).sqrt() * va[j][k]).sum()).collect())
        .collect();
    let inner = matmul(&matmul(&root, &cb), &root);
    let (li, _) = jacobi(inner);
    let mean: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    let tr: f64 = (0..d).map(|i| ca[i][i] + cb[i][i]).sum();
    mean + tr - 2.0 * li.iter().map(|l| l.max(0.0).sqrt()).sum::<f64>()
}

fn frames(rng: &mut ChaCha8Rng, k: usize, d: usize, scale: f64, shift: f64) -> Tensor {
    Tensor::new(vec![k, d], (0..k * d).map(|_| shift + scale * rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn fid_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = frames(&mut rng, 40, 6, 1.0, 0.0);
    assert!(fid_pose(&a, &a).unwrap() <= 1e-6);
    // Same covariance, mean moved by a vector of norm 2.
    let moved = Tensor::new(
        vec![40, 6],
        a.data().iter().enumerate().map(|(i, v)| v + [1.2, 0.0, -1.6, 0.0, 0.0, 0.0][i % 6]).collect(),
    )
    .unwrap();
    assert!((fid_pose(&a, &moved).unwrap() - 4.0).abs() < 1e-6);
    let b = frames(&mut rng, 30, 6, 0.5, 0.3);
    assert!((fid_pose(&a, &b).unwrap() - fid_pose(&b, &a).unwrap()).abs() < 1e-6);
    assert!(matches!(fid_pose(&frames(&mut rng, 6, 6, 1.0, 0.0), &a), Err(Error::InvalidInput(_))));
    assert!(fid_pose(&a, &frames(&mut rng, 40, 5, 1.0, 0.0)).is_err());
}

#[test]
fn fid_matches_jacobi_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..10 {
        let d = 2 + trial % 5;
        let a = frames(&mut rng, 3 * d + 4, d, 1.0, 0.0);
        let b = frames(&mut rng, 2 * d + 7, d, 0.3 + 0.1 * trial as f64, 0.2);
        let (got, want) = (fid_pose(&a, &b).unwrap(), fid_oracle(&a, &b));
        assert!((got - want).abs() < 1e-9 * (1.0 + want.abs()), "{got} vs {want}");
    }
}

// -- alignment scores --------------------------------------------------

#[test]
fn alignment_examples() {
    let truth = [0, 0, 0, 1, 1, 2, 2, 2];
    let block = Tensor::from_rows(
        &truth.iter().map(|&g| (0..3).map(|c| if c == g { 1.0 } else { 0.0 }).collect()).collect::<Vec<_>>(),
    )
    .unwrap();
    let s = alignment_metrics(&block, &truth).unwrap();
    assert_eq!(s.segment_accuracy, 1.0);
    assert!(s.tau > 0.99);
    let flat = Tensor::filled(&[8, 3], 0.4);
    let s = alignment_metrics(&flat, &truth).unwrap();
    assert_eq!(s.segment_accuracy, 3.0 / 8.0);
    assert_eq!(s.tau, 0.0);
    let diag = Tensor::identity(5);
    assert_eq!(alignment_metrics(&diag, &[0, 1, 2, 3, 4]).unwrap().tau, 1.0);
    let rev = Tensor::from_rows(&(0..4).map(|r| (0..4).map(|c| (r + c == 3) as u8 as f64).collect()).collect::<Vec<_>>()).unwrap();
    assert_eq!(alignment_metrics(&rev, &[0, 1, 2, 3]).unwrap().tau, -1.0);
    assert!(alignment_metrics(&flat, &truth[..7]).is_err());
    assert!(alignment_metrics(&flat, &[0, 0, 0, 0, 0, 0, 0, 3]).is_err());
}

/// Pair-counting oracle over all ordered frame pairs.
fn tau_oracle(best: &[usize]) -> f64 {
    let mut num = 0i64;
    let mut den = 0i64;
    for i in 0..best.len() {
        for j in 0..best.len() {
            let df = (j as i64 - i as i64).signum();
            let dg = (best[j] as i64 - best[i] as i64).signum();
            num += df * dg;
            den += dg.abs();
        }
    }
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[test]
fn tau_matches_pair_counting_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let (m, n) = (rng.gen_range(1..20), rng.gen_range(1..6));
        let data: Vec<f64> = (0..m * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let matrix = Tensor::new(vec![m, n], data).unwrap();
        let truth: Vec<usize> = (0..m).map(|_| rng.gen_range(0..n)).collect();
        let s = alignment_metrics(&matrix, &truth).unwrap();
        let best = row_argmax(&matrix);
        for r in 0..m {
            assert!(matrix.row(r).iter().all(|&v| v <= matrix.at(r, best[r])));
        }
        assert!((s.tau - tau_oracle(&best)).abs() < 1e-15);
        assert!((-1.0..=1.0).contains(&s.tau) && (0.0..=1.0).contains(&s.segment_accuracy));
    }
}

proptest! {
    #[test]
    fn tau_is_one_for_increasing_matches(steps in prop::collection::vec(1usize..3, 1..8)) {
        let mut cols = vec![0usize];
        for s in &steps {
            cols.push(cols.last().unwrap() + s);
        }
        let n = cols.last().unwrap() + 1;
        let rows: Vec<Vec<f64>> = cols.iter().map(|&c| (0..n).map(|k| (k == c) as u8 as f64).collect()).collect();
        let s = alignment_metrics(&Tensor::from_rows(&rows).unwrap(), &cols).unwrap();
        prop_assert_eq!(s.tau, 1.0);
        prop_assert_eq!(s.segment_accuracy, 1.0);
    }
}

// -- heatmaps ----------------------------------------------------------

#[test]
fn heatmap_examples() {
    let m = Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    let pgm = heatmap_pgm(&m);
    let header = b"P5\n2 2\n255\n";
    assert_eq!(&pgm[..header.len()], header);
    assert_eq!(&pgm[header.len()..], &[0, 255, 255, 0]);
    let flat = heatmap_pgm(&Tensor::filled(&[2, 3], 0.7));
    assert!(flat.ends_with(&[0; 6]) && flat.starts_with(b"P5\n3 2\n255\n"));

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = frames(&mut rng, 4, 3, 1.0, 0.0);
    let dir = tempfile::tempdir().unwrap();
    let (csv, pgm) = export_heatmap(&r, dir.path().join("sim")).unwrap();
    let back = parse_heatmap_csv(&std::fs::read_to_string(csv).unwrap()).unwrap();
    assert_eq!(back.shape(), r.shape());
    assert!(back.data().iter().zip(r.data()).all(|(a, b)| (a - b).abs() <= 5e-7));
    let bytes = std::fs::read(pgm).unwrap();
    assert!(bytes.starts_with(b"P5\n3 4\n255\n"));
    assert_eq!(bytes.len(), b"P5\n3 4\n255\n".len() + 12);
    assert!(matches!(
        export_heatmap(&r, dir.path().join("missing").join("sim")),
        Err(Error::Io { .. })
    ));
}

// -- reports -----------------------------------------------------------

#[test]
fn report_schema() {
    let rows = vec![
        SampleMetrics { index: 0, mpjpe: 1.0, dtw_p: 0.5, alignment_tau: 1.0, segment_accuracy: 0.5 },
        SampleMetrics { index: 1, mpjpe: 3.0, dtw_p: 1.5, alignment_tau: 0.0, segment_accuracy: 1.0 },
    ];
    let r = MetricReport::from_samples(rows, 0.25).unwrap();
    assert_eq!((r.mpjpe, r.dtw_p, r.alignment_tau, r.segment_accuracy), (2.0, 1.0, 0.5, 0.75));
    let json: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
    let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    let mut want = REPORT_KEYS.to_vec();
    want.sort();
    assert_eq!(keys, want);
    let kv = r.to_kv();
    let parsed: Vec<(&str, f64)> = kv
        .lines()
        .map(|l| {
            let (k, v) = l.split_once('=').unwrap();
            (k, v.parse().unwrap())
        })
        .collect();
    assert_eq!(parsed, r.values().to_vec());
    assert_eq!(r.per_sample_csv().lines().count(), 3);
    assert!(MetricReport::from_samples(Vec::new(), 0.0).is_err());
}

#[test]
fn ground_truth_scores_zero() {
    let corpus = generate(&CorpusManifest { train: 2, dev: 4, test: 2, ..CorpusManifest::default() }).unwrap();
    let targets: Vec<PoseSequence> = corpus.dev.iter().map(|s| s.poses.clone()).collect();
    let (rows, fid) = score_poses(&targets, &targets).unwrap();
    assert!(rows.iter().all(|r| r.mpjpe == 0.0 && r.dtw_p == 0.0));
    assert!(fid <= 1e-6);
}

#[test]
fn evaluate_is_deterministic_and_checks_joints() {
    let corpus = generate(&CorpusManifest { train: 2, dev: 3, test: 2, ..CorpusManifest::default() }).unwrap();
    let cfg = ModelConfig { d_model: 8, layers: 1, heads: 2, ff_dim: 16, ..ModelConfig::desk(23, 8) };
    let params = ModelParams::init(cfg.clone(), 1).unwrap();
    let a = evaluate(&params, &corpus.dev, EvalOptions::default()).unwrap();
    let b = evaluate(&params, &corpus.dev, EvalOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.per_sample.len(), 3);
    let capped = evaluate(&params, &corpus.dev, EvalOptions { max_len: Some(9) }).unwrap();
    assert!(capped.per_sample.iter().all(|r| r.mpjpe.is_finite()));
    let wrong = ModelParams::init(ModelConfig { joints: 5, ..cfg }, 1).unwrap();
    assert!(matches!(evaluate(&wrong, &corpus.dev, EvalOptions::default()), Err(Error::InvalidInput(_))));
    let (sim, cross) = alignment_maps(&params, &corpus.dev[0]).unwrap();
    let (m, n) = (corpus.dev[0].poses.len(), corpus.dev[0].glosses.len());
    assert_eq!(sim.shape(), &[m, n]);
    assert_eq!(cross.shape(), &[m, n]);
}
