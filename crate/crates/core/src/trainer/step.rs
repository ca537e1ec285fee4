use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aligner::{batch_phi, batch_phi_graph, loss_ali, loss_ali_graph, FeaturePair};
use crate::comparator::{
    loss_com, loss_com_graph, margin_satisfied, pool_graph, pool_sequence, similarity_table, Modality,
    SimilarityTable,
};
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seqmodel::{
    decode_graph, embed_gloss_graph, embed_pose_graph, encode_graph, loss_acc_graph, shift_right, Checkpoint,
    ModelParams,
};
use crate::synthcorpus::CorpusSample;

use super::adam::Adam;
use super::batch::{add_pose_noise, noise_std};
use super::config::{joint_loss, TrainConfig};

/// Parameters, optimizer moments and progress. Noise and shuffling are
/// derived from `(seed, step)`, so the counters are the whole RNG state.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub params: ModelParams,
    pub adam: Adam,
    /// Optimizer steps taken.
    pub step: u64,
    /// Best dev DTW-P so far and the epoch it was reached.
    pub best_dev: Option<(usize, f64)>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        TrainState {
            adam: Adam::new(&params.weights),
            params,
            step: 0,
            best_dev: None,
        }
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let mut ck = self.params.to_checkpoint();
        ck.push_meta("train.step", self.step);
        ck.push_meta("train.adam_t", self.adam.t);
        if let Some((epoch, value)) = self.best_dev {
            ck.push_meta("train.best_epoch", epoch);
            ck.push_meta("train.best_dev", value);
        }
        for line in cfg.to_kv().lines() {
            let (k, v) = line.split_once('=').expect("config lines are key=value");
            ck.push_meta(&format!("config.{k}"), v);
        }
        let names: Vec<String> = self.params.weights.named().into_iter().map(|(n, _)| n).collect();
        for (slot, moments) in [("m", &self.adam.m), ("v", &self.adam.v)] {
            for (name, t) in names.iter().zip(moments) {
                ck.tensors.push((format!("adam.{slot}.{name}"), t.clone()));
            }
        }
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, TrainConfig)> {
        let params = ModelParams::from_checkpoint(ck)?;
        let meta = |key: &str| {
            ck.meta(key)
                .ok_or_else(|| Error::invalid(format!("training state lacks {key}")))
        };
        let num = |key: &str| -> Result<u64> {
            meta(key)?
                .parse()
                .map_err(|_| Error::invalid(format!("training state {key} is not an integer")))
        };
        let mut cfg = TrainConfig::default();
        for (k, v) in &ck.meta {
            if let Some(key) = k.strip_prefix("config.") {
                cfg.set(key, v)?;
            }
        }
        let best_dev = match ck.meta("train.best_dev") {
            Some(v) => Some((
                num("train.best_epoch")? as usize,
                v.parse()
                    .map_err(|_| Error::invalid("training state best_dev is not a number"))?,
            )),
            None => None,
        };
        let mut adam = Adam::new(&params.weights);
        adam.t = num("train.adam_t")?;
        let names: Vec<String> = params.weights.named().into_iter().map(|(n, _)| n).collect();
        for (slot, moments) in [("m", &mut adam.m), ("v", &mut adam.v)] {
            for (name, t) in names.iter().zip(moments.iter_mut()) {
                let key = format!("adam.{slot}.{name}");
                let stored = ck
                    .tensor(&key)
                    .ok_or_else(|| Error::invalid(format!("training state lacks {key}")))?;
                if stored.shape() != t.shape() {
                    return Err(Error::shape("train_state", format!("{key} has shape {:?}", stored.shape())));
                }
                *t = stored.clone();
            }
        }
        let state = TrainState {
            params,
            adam,
            step: num("train.step")?,
            best_dev,
        };
        Ok((state, cfg))
    }
}

/// Loss terms of one step. `joint` is computed from the other three with
/// [`joint_loss`], so the decomposition holds exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    /// Optimizer step count after this update (starts at 1).
    pub step: u64,
    pub acc: f64,
    pub ali: f64,
    pub com: f64,
    pub joint: f64,
    /// Fraction of in-batch margin constraints satisfied.
    pub margin_rate: f64,
}

impl StepLosses {
    /// `step,l_acc,l_ali,l_com,joint,margin_rate` at full precision.
    pub fn log_line(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.step, self.acc, self.ali, self.com, self.joint, self.margin_rate
        )
    }
}

/// Noise stream for a given step.
pub fn noise_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973_6500_0000);
    rng.set_stream(step);
    rng
}

fn finite(step: u64, term: &'static str, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { step, term })
    }
}

/// One teacher-forced forward/backward pass over `batch` and an Adam
/// update. `coordinate_std` scales the decoder-input noise.
///
/// With `beta` (or `gamma`) at zero the corresponding loss is still
/// reported, but it is computed off the tape and contributes no gradient.
pub fn train_step(
    state: &mut TrainState,
    batch: &[&CorpusSample],
    cfg: &TrainConfig,
    coordinate_std: f64,
) -> Result<StepLosses> {
    if batch.is_empty() {
        return Err(Error::invalid("train_step: empty batch"));
    }
    let step = state.step + 1;
    let pcfg = &state.params.config;
    let mut rng = noise_rng(cfg.seed, state.step);
    let std = noise_std(cfg.noise_rate, coordinate_std);
    let bos = vec![0.0; pcfg.pose_dim()];

    let mut tape = Tape::new();
    let w = state.params.bind(&mut tape, true);
    let leaves: Vec<Var> = w.named().into_iter().map(|(_, v)| *v).collect();
    let mut accs = Vec::with_capacity(batch.len());
    let mut texts = Vec::with_capacity(batch.len());
    let mut visuals = Vec::with_capacity(batch.len());
    for s in batch {
        let g = embed_gloss_graph(&mut tape, pcfg, &w, s.glosses.ids())?;
        let x = encode_graph(&mut tape, pcfg, &w, g, None)?;
        let noisy = add_pose_noise(&s.poses, std, &mut rng)?;
        let input = tape.constant(shift_right(noisy.frames(), &bos)?);
        let y = embed_pose_graph(&mut tape, pcfg, &w, input)?;
        let dec = decode_graph(&mut tape, pcfg, &w, y, x, None)?;
        let target = tape.constant(s.poses.frames().clone());
        accs.push(loss_acc_graph(&mut tape, dec.poses, target, None)?);
        texts.push(x);
        visuals.push(if cfg.detach_visual { tape.detach(dec.z) } else { dec.z });
    }
    let b = batch.len();
    let stacked = tape.stack(&accs, &[b])?;
    let acc = tape.mean(stacked);
    let acc_value = finite(step, "acc", tape.value(acc).item())?;

    // Fine-grained alignment.
    let ali = if cfg.beta > 0.0 {
        let (vt, tv) = batch_phi_graph(&mut tape, &texts, &visuals)?;
        Some(loss_ali_graph(&mut tape, vt, tv, cfg.tau)?)
    } else {
        None
    };
    let ali_value = match ali {
        Some(v) => tape.value(v).item(),
        None => {
            let pairs = texts
                .iter()
                .zip(&visuals)
                .map(|(&t, &v)| FeaturePair::from_raw(tape.value(t), tape.value(v), None, None))
                .collect::<Result<Vec<_>>>()?;
            loss_ali(&batch_phi(&pairs)?, cfg.tau)?
        }
    };
    let ali_value = finite(step, "ali", ali_value)?;

    // Sequence-level comparison.
    let (com, table) = if cfg.gamma > 0.0 {
        let pv = visuals
            .iter()
            .map(|&v| pool_graph(&mut tape, v, None))
            .collect::<Result<Vec<_>>>()?;
        let pt = texts
            .iter()
            .map(|&t| pool_graph(&mut tape, t, None))
            .collect::<Result<Vec<_>>>()?;
        let table = crate::comparator::similarity_table_graph(&mut tape, &pv, &pt)?;
        let values = SimilarityTable::new(tape.value(table).clone())?;
        (Some(loss_com_graph(&mut tape, table, cfg.sigma)?), values)
    } else {
        let pool = |vars: &[Var], m: Modality| {
            vars.iter()
                .map(|&v| pool_sequence(tape.value(v), None, m))
                .collect::<Result<Vec<_>>>()
        };
        let table = similarity_table(&pool(&visuals, Modality::Video)?, &pool(&texts, Modality::Text)?)?;
        (None, table)
    };
    let com_value = match com {
        Some(v) => tape.value(v).item(),
        None => loss_com(&table, cfg.sigma)?,
    };
    let com_value = finite(step, "com", com_value)?;
    let margin_rate = margin_satisfied(&table, cfg.sigma)?.rate();

    let mut joint = tape.scale(acc, cfg.alpha);
    for (term, weight) in [(ali, cfg.beta), (com, cfg.gamma)] {
        if let Some(t) = term {
            let scaled = tape.scale(t, weight);
            joint = tape.add(joint, scaled)?;
        }
    }
    let joint_value = finite(step, "joint", joint_loss(acc_value, ali_value, com_value, cfg))?;
    tape.backward(joint)?;

    let mut grads: Vec<Tensor> = leaves
        .iter()
        .map(|&v| {
            tape.grad(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(tape.shape(v)))
        })
        .collect();
    if cfg.grad_clip > 0.0 {
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if norm > cfg.grad_clip {
            let k = cfg.grad_clip / norm;
            grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= k));
        }
    }
    state.adam.step(&mut state.params.weights, &grads, cfg.learning_rate)?;
    state.step = step;
    Ok(StepLosses {
        step,
        acc: acc_value,
        ali: ali_value,
        com: com_value,
        joint: joint_value,
        margin_rate,
    })
}
