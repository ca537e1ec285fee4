use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::Error;
use crate::seqmodel::{
    decode_graph, embed_gloss_graph, embed_pose_graph, encode_graph, loss_acc, loss_acc_graph, shift_right,
    teacher_forced, ModelParams, PoseSequence,
};
use crate::synthcorpus::{generate, Corpus, CorpusManifest, CorpusSample, Split};

fn small_corpus(seed: u64) -> Corpus {
    generate(&CorpusManifest {
        seed,
        glosses: 5,
        joints: 2,
        train: 10,
        dev: 4,
        test: 2,
        noise_std: 0.02,
    })
    .unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        d_model: 8,
        layers: 1,
        heads: 2,
        ff_dim: 16,
        batch_size: 4,
        epochs: 2,
        eval_every: 1,
        beta: 1e-2,
        gamma: 1e-2,
        ..TrainConfig::default()
    }
}

fn fresh_state(cfg: &TrainConfig, corpus: &Corpus) -> TrainState {
    let mc = cfg.model_config(corpus.manifest.vocab_size(), corpus.manifest.joints);
    TrainState::new(ModelParams::init(mc, cfg.seed).unwrap())
}

#[test]
fn joint_loss_examples() {
    let mut cfg = TrainConfig {
        alpha: 1.0,
        beta: 0.1,
        gamma: 0.01,
        ..TrainConfig::default()
    };
    assert!((joint_loss(2.0, 3.0, 5.0, &cfg) - 2.35).abs() < 1e-12);
    assert_eq!(joint_loss(0.0, 0.0, 0.0, &cfg), 0.0);
    cfg = cfg.with_ablation(Ablation::None);
    assert_eq!(joint_loss(1.75, 3.0, 5.0, &cfg), 1.75);
}

#[test]
fn ablation_mapping() {
    let cfg = TrainConfig {
        beta: 0.3,
        gamma: 0.7,
        ..TrainConfig::default()
    };
    let pairs = |a: Ablation| {
        let c = cfg.with_ablation(a);
        (c.beta, c.gamma)
    };
    assert_eq!(pairs("full".parse().unwrap()), (0.3, 0.7));
    assert_eq!(pairs("no-csa".parse().unwrap()), (0.0, 0.7));
    assert_eq!(pairs("no-msc".parse().unwrap()), (0.3, 0.0));
    assert_eq!(pairs("none".parse().unwrap()), (0.0, 0.0));
    assert!("w/o".parse::<Ablation>().is_err());
}

#[test]
fn config_kv_round_trip() {
    let cfg = TrainConfig {
        beta: 1e-2,
        seed: 17,
        detach_visual: true,
        learning_rate: 0.1 + 0.2,
        ..TrainConfig::default()
    };
    let text = cfg.to_kv();
    assert_eq!(TrainConfig::from_kv(&text).unwrap(), cfg);
    let with_comments = format!("# run file\n\n{text}");
    assert_eq!(TrainConfig::from_kv(&with_comments).unwrap(), cfg);
    assert!(TrainConfig::from_kv("learning_rte=0.1").is_err());
    assert!(TrainConfig::from_kv("batch_size=zero").is_err());
    assert!(TrainConfig::from_kv("batch_size=0").is_err());
    assert!(TrainConfig::from_kv("tau=-1").is_err());
    // Keys are exactly the field names.
    let keys: Vec<&str> = text.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(
        keys,
        [
            "alpha",
            "beta",
            "gamma",
            "tau",
            "sigma",
            "learning_rate",
            "batch_size",
            "epochs",
            "noise_rate",
            "d_model",
            "layers",
            "heads",
            "ff_dim",
            "seed",
            "eval_every",
            "detach_visual",
            "grad_clip"
        ]
    );
}

#[test]
fn default_hyperparameters() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.alpha, cfg.beta, cfg.gamma), (1.0, 1e-7, 1e-5));
    assert_eq!((cfg.tau, cfg.sigma, cfg.learning_rate, cfg.noise_rate), (0.01, 0.05, 1e-3, 5.0));
    let big = TrainConfig::wide();
    assert_eq!((big.d_model, big.layers, big.heads), (512, 2, 4));
}

#[test]
fn adam_first_step_matches_closed_form() {
    let mut params = ModelParams::init(small_config().model_config(7, 2), 3).unwrap();
    let before = params.weights.clone();
    let mut adam = Adam::new(&params.weights);
    let grads: Vec<Tensor> = params
        .weights
        .named()
        .iter()
        .enumerate()
        .map(|(k, (_, t))| {
            let n = t.data().len();
            Tensor::new(t.shape().to_vec(), (0..n).map(|i| (i as f64 - 1.5) * 0.1 * (k + 1) as f64).collect()).unwrap()
        })
        .collect();
    adam.step(&mut params.weights, &grads, 0.01).unwrap();
    // After one step m̂ = g and v̂ = g², so the move is lr·g/(|g| + ε).
    for ((old, new), g) in before.named().iter().zip(params.weights.named()).zip(&grads) {
        for ((a, b), g) in old.1.data().iter().zip(new.1.data()).zip(g.data()) {
            let want = a - 0.01 * g / (g.abs() + EPSILON);
            assert!((b - want).abs() < 1e-15, "{} {b} vs {want}", old.0);
        }
    }
    assert_eq!(adam.t, 1);
    let wrong = vec![Tensor::zeros(&[1])];
    assert!(matches!(adam.step(&mut params.weights, &wrong, 0.01), Err(Error::Shape { .. })));
}

#[test]
fn noise_std_statistics() {
    let std = noise_std(5.0, 2.0);
    assert!((std - 0.1).abs() < 1e-15);
    let zeros = PoseSequence::new(Tensor::zeros(&[5000, 60]), 20).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let noisy = add_pose_noise(&zeros, std, &mut rng).unwrap();
    let data = noisy.frames().data();
    assert_eq!(data.len(), 300_000);
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    assert!((var.sqrt() / std - 1.0).abs() < 0.02, "empirical std {}", var.sqrt());
    assert!(mean.abs() < 0.01 * std * 10.0);
}

#[test]
fn noise_zero_rate_and_reproducibility() {
    let corpus = small_corpus(1);
    let pose = &corpus.train[0].poses;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(&add_pose_noise(pose, 0.0, &mut rng).unwrap(), pose);
    let a = add_pose_noise(pose, 0.05, &mut noise_rng(4, 11)).unwrap();
    let b = add_pose_noise(pose, 0.05, &mut noise_rng(4, 11)).unwrap();
    let c = add_pose_noise(pose, 0.05, &mut noise_rng(4, 12)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(add_pose_noise(pose, -1.0, &mut rng).is_err());
}

fn fake_sample(n: usize, m: usize) -> CorpusSample {
    let corpus = small_corpus(2);
    let base = &corpus.train[0];
    let frames: Vec<f64> = (0..m * 6).map(|i| (i as f64 * 0.37).sin()).collect();
    CorpusSample {
        glosses: crate::seqmodel::GlossSequence::new((0..n).map(|i| 2 + i % 5).collect(), 7).unwrap(),
        poses: PoseSequence::new(Tensor::new(vec![m, 6], frames).unwrap(), 2).unwrap(),
        alignment: base.alignment.clone(),
    }
}

#[test]
fn pad_batch_examples() {
    assert!(matches!(pad_batch(&[]), Err(Error::InvalidInput(_))));

    let (a, b) = (fake_sample(3, 4), fake_sample(3, 4));
    let uniform = pad_batch(&[&a, &b]).unwrap();
    assert!(uniform.gloss_mask.iter().flatten().all(|&x| x));
    assert!(uniform.pose_mask.iter().flatten().all(|&x| x));
    assert_eq!(&uniform.poses[0], a.poses.frames());

    let (short, long) = (fake_sample(3, 3), fake_sample(5, 5));
    let p = pad_batch(&[&short, &long]).unwrap();
    assert_eq!(p.gloss_mask[0], [true, true, true, false, false]);
    assert_eq!(p.pose_mask[0], [true, true, true, false, false]);
    assert_eq!(p.glosses[0][3..], [crate::seqmodel::PAD; 2]);
    assert_eq!(p.poses[0].shape(), &[5, 6]);
    assert!(p.poses[0].data()[18..].iter().all(|&v| v == 0.0));
    assert!(p.gloss_mask[1].iter().chain(&p.pose_mask[1]).all(|&x| x));
}

#[test]
fn padded_loss_equals_mean_of_unpadded() {
    let corpus = small_corpus(3);
    let cfg = small_config();
    let params = fresh_state(&cfg, &corpus).params;
    let batch: Vec<&CorpusSample> = corpus.train[..4].iter().collect();
    let padded = pad_batch(&batch).unwrap();
    let lens: Vec<usize> = batch.iter().map(|s| s.poses.len()).collect();
    assert!(lens.iter().any(|&l| l != lens[0]), "want ragged lengths");
    let oracle = batch
        .iter()
        .map(|s| {
            let out = teacher_forced(&s.glosses, &s.poses, &params).unwrap();
            let pred = PoseSequence::new(out.poses, 2).unwrap();
            loss_acc(&pred, &s.poses, None).unwrap()
        })
        .sum::<f64>()
        / batch.len() as f64;
    let got = padded_loss_acc(&params, &padded).unwrap();
    assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
}

#[test]
fn step_losses_decompose_exactly() {
    let corpus = small_corpus(4);
    let cfg = TrainConfig {
        alpha: 0.7,
        beta: 0.3,
        gamma: 0.11,
        ..small_config()
    };
    let mut state = fresh_state(&cfg, &corpus);
    let sd = corpus.coordinate_std(Split::Train);
    for k in 0..3 {
        let batch: Vec<&CorpusSample> = corpus.train[k..k + 3].iter().collect();
        let l = train_step(&mut state, &batch, &cfg, sd).unwrap();
        assert_eq!(l.joint, cfg.alpha * l.acc + cfg.beta * l.ali + cfg.gamma * l.com);
        assert_eq!(l.step, k as u64 + 1);
        assert!((0.0..=1.0).contains(&l.margin_rate));
        let fields: Vec<f64> = l.log_line().split(',').map(|f| f.parse().unwrap()).collect();
        assert_eq!(fields, [l.step as f64, l.acc, l.ali, l.com, l.joint, l.margin_rate]);
    }
    assert_eq!(state.step, 3);
}

#[test]
fn train_steps_are_deterministic() {
    let corpus = small_corpus(5);
    let cfg = small_config();
    let sd = corpus.coordinate_std(Split::Train);
    let batch: Vec<&CorpusSample> = corpus.train[..4].iter().collect();
    let run = || {
        let mut state = fresh_state(&cfg, &corpus);
        let logs: Vec<StepLosses> = (0..2).map(|_| train_step(&mut state, &batch, &cfg, sd).unwrap()).collect();
        (state, logs)
    };
    let (a, la) = run();
    let (b, lb) = run();
    assert_eq!(la, lb);
    assert_eq!(a, b);
}

#[test]
fn overfits_one_sample() {
    let corpus = small_corpus(6);
    let cfg = TrainConfig {
        learning_rate: 3e-3,
        ..small_config()
    };
    let sd = corpus.coordinate_std(Split::Train);
    let mut state = fresh_state(&cfg, &corpus);
    let batch = [&corpus.train[0]];
    let first = train_step(&mut state, &batch, &cfg, sd).unwrap().acc;
    let mut last = first;
    for _ in 1..50 {
        last = train_step(&mut state, &batch, &cfg, sd).unwrap().acc;
    }
    assert!(last < 0.5 * first, "{first} -> {last}");
}

/// Same update as `train_step` with the auxiliary objectives compiled out.
fn acc_only_step(state: &mut TrainState, batch: &[&CorpusSample], cfg: &TrainConfig, sd: f64) {
    let pcfg = state.params.config.clone();
    let mut rng = noise_rng(cfg.seed, state.step);
    let std = noise_std(cfg.noise_rate, sd);
    let mut tape = Tape::new();
    let w = state.params.bind(&mut tape, true);
    let leaves: Vec<Var> = w.named().into_iter().map(|(_, v)| *v).collect();
    let mut accs = Vec::new();
    for s in batch {
        let g = embed_gloss_graph(&mut tape, &pcfg, &w, s.glosses.ids()).unwrap();
        let x = encode_graph(&mut tape, &pcfg, &w, g, None).unwrap();
        let noisy = add_pose_noise(&s.poses, std, &mut rng).unwrap();
        let bos = vec![0.0; pcfg.pose_dim()];
        let input = tape.constant(shift_right(noisy.frames(), &bos).unwrap());
        let y = embed_pose_graph(&mut tape, &pcfg, &w, input).unwrap();
        let dec = decode_graph(&mut tape, &pcfg, &w, y, x, None).unwrap();
        let target = tape.constant(s.poses.frames().clone());
        accs.push(loss_acc_graph(&mut tape, dec.poses, target, None).unwrap());
    }
    let stacked = tape.stack(&accs, &[accs.len()]).unwrap();
    let mean = tape.mean(stacked);
    let joint = tape.scale(mean, cfg.alpha);
    tape.backward(joint).unwrap();
    let grads: Vec<Tensor> = leaves
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();
    state.adam.step(&mut state.params.weights, &grads, cfg.learning_rate).unwrap();
    state.step += 1;
}

#[test]
fn disabled_objectives_leave_updates_bit_identical() {
    let corpus = small_corpus(7);
    let cfg = small_config().with_ablation(Ablation::None);
    let sd = corpus.coordinate_std(Split::Train);
    let mut gated = fresh_state(&cfg, &corpus);
    let mut manual = gated.clone();
    for k in 0..3 {
        let batch: Vec<&CorpusSample> = corpus.train[k..k + 4].iter().collect();
        let l = train_step(&mut gated, &batch, &cfg, sd).unwrap();
        acc_only_step(&mut manual, &batch, &cfg, sd);
        assert!(l.ali.is_finite() && l.com.is_finite());
        assert_eq!(gated, manual, "diverged at step {k}");
    }
    // A nonzero weight does change the trajectory.
    let mut full = fresh_state(&cfg, &corpus);
    let batch: Vec<&CorpusSample> = corpus.train[..4].iter().collect();
    train_step(&mut full, &batch, &small_config(), sd).unwrap();
    let mut plain = fresh_state(&cfg, &corpus);
    acc_only_step(&mut plain, &batch, &cfg, sd);
    assert_ne!(full.params, plain.params);
}

#[test]
fn detached_visual_keeps_decoder_out_of_auxiliary_gradients() {
    // With only the auxiliary losses weighted heavily, detaching z must
    // change the update relative to letting gradients through it.
    let corpus = small_corpus(8);
    let sd = corpus.coordinate_std(Split::Train);
    let base = TrainConfig {
        beta: 1.0,
        gamma: 1.0,
        ..small_config()
    };
    let batch: Vec<&CorpusSample> = corpus.train[..3].iter().collect();
    let mut through = fresh_state(&base, &corpus);
    let mut detached = through.clone();
    let a = train_step(&mut through, &batch, &base, sd).unwrap();
    let cfg = TrainConfig {
        detach_visual: true,
        ..base.clone()
    };
    let b = train_step(&mut detached, &batch, &cfg, sd).unwrap();
    assert_eq!(a, b, "forward values do not depend on the toggle");
    assert_ne!(through.params, detached.params);
}

#[test]
fn non_finite_loss_names_step_and_term() {
    let corpus = small_corpus(9);
    let cfg = small_config();
    let mut state = fresh_state(&cfg, &corpus);
    let sd = corpus.coordinate_std(Split::Train);
    let batch: Vec<&CorpusSample> = corpus.train[..2].iter().collect();
    train_step(&mut state, &batch, &cfg, sd).unwrap();
    state
        .params
        .weights
        .output
        .bias
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = f64::MAX);
    let before = state.clone();
    match train_step(&mut state, &batch, &cfg, sd) {
        Err(Error::NonFinite { step, term }) => {
            assert_eq!((step, term), (2, "acc"));
        }
        other => panic!("expected NonFinite, got {other:?}"),
    }
    assert_eq!(state, before, "a failed step must not touch the state");
}

#[test]
fn train_state_checkpoint_round_trip() {
    let corpus = small_corpus(10);
    let cfg = TrainConfig {
        seed: 42,
        ..small_config()
    };
    let mut state = fresh_state(&cfg, &corpus);
    let sd = corpus.coordinate_std(Split::Train);
    let batch: Vec<&CorpusSample> = corpus.train[..3].iter().collect();
    for _ in 0..2 {
        train_step(&mut state, &batch, &cfg, sd).unwrap();
    }
    state.best_dev = Some((3, 0.123456789));
    let bytes = state.to_checkpoint(&cfg).to_bytes();
    let ck = crate::seqmodel::Checkpoint::from_bytes(&bytes, std::path::Path::new("mem")).unwrap();
    let (back, back_cfg) = TrainState::from_checkpoint(&ck).unwrap();
    assert_eq!(back, state);
    assert_eq!(back_cfg, cfg);
    assert_eq!(back.to_checkpoint(&back_cfg).to_bytes(), bytes);
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(3, 0, 50);
    let mut sorted = a.clone();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..50).collect::<Vec<_>>());
    assert_eq!(a, epoch_order(3, 0, 50));
    assert_ne!(a, epoch_order(3, 1, 50));
    assert_ne!(a, epoch_order(4, 0, 50));
    assert_eq!(steps_per_epoch(600, 8), 75);
    assert_eq!(steps_per_epoch(10, 4), 3);
}

#[test]
fn train_writes_log_checkpoints_and_report() {
    let corpus = small_corpus(11);
    let cfg = small_config();
    let dir = tempfile::tempdir().unwrap();
    let out = train(&cfg, &corpus, dir.path(), TrainOptions::default()).unwrap();
    assert!(out.finished);
    assert_eq!(out.state.step, 6);
    let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 6);
    assert!(log.lines().last().unwrap().starts_with("6,"));
    assert_eq!(out.evaluations.iter().map(|e| e.0).collect::<Vec<_>>(), [1, 2]);
    let (best_epoch, best) = out.best().unwrap();
    assert_eq!(out.state.best_dev, Some((*best_epoch, best.dtw_p)));
    for f in [STATE_FILE, MODEL_FILE, BEST_FILE, CONFIG_FILE] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    assert!(dir.path().join(DEV_REPORT_DIR).join("report.json").is_file());
    let saved = std::fs::read_to_string(dir.path().join(CONFIG_FILE)).unwrap();
    assert_eq!(TrainConfig::from_kv(&saved).unwrap(), cfg);
    let best_params = ModelParams::load(&dir.path().join(BEST_FILE)).unwrap();
    let again = crate::evalkit::evaluate(&best_params, &corpus.dev, Default::default()).unwrap();
    assert_eq!(again.dtw_p, best.dtw_p);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let corpus = small_corpus(12);
    let cfg = small_config();
    let whole = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let a = train(&cfg, &corpus, whole.path(), TrainOptions::default()).unwrap();

    // Stop mid-epoch, then resume.
    let stopped = TrainOptions {
        resume: false,
        stop_after: Some(2),
    };
    let part = train(&cfg, &corpus, split.path(), stopped).unwrap();
    assert!(!part.finished);
    assert_eq!(part.state.step, 2);
    let resume = TrainOptions {
        resume: true,
        stop_after: None,
    };
    let b = train(&cfg, &corpus, split.path(), resume).unwrap();
    assert!(b.finished);
    assert_eq!(a.state, b.state);
    for f in [LOG_FILE, MODEL_FILE, STATE_FILE, BEST_FILE] {
        let x = std::fs::read(whole.path().join(f)).unwrap();
        let y = std::fs::read(split.path().join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }

    let other = TrainConfig {
        learning_rate: 0.5,
        ..cfg
    };
    assert!(matches!(
        train(&other, &corpus, split.path(), resume),
        Err(Error::InvalidInput(_))
    ));
}

#[test]
fn grad_check_passes_and_is_seeded() {
    for loss in CheckedLoss::ALL {
        let a = grad_check(loss, 5, 0.01, 0.05).unwrap();
        assert!(a.passed(), "{} {}: {}", loss.name(), a.shape, a.max_rel_error);
        assert!(a.coordinates > 0);
        assert_eq!(a, grad_check(loss, 5, 0.01, 0.05).unwrap());
        assert_eq!(loss.name().parse::<CheckedLoss>().unwrap(), loss);
    }
    assert!("all".parse::<CheckedLoss>().is_err());
}
