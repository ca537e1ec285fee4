use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aligner::{batch_phi_graph, loss_ali_graph};
use crate::comparator::{loss_com_graph, pool_graph, similarity_table_graph};
use crate::diffcore::{finite_diff_check, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seqmodel::{
    decode_graph, embed_gloss_graph, embed_pose_graph, encode_graph, loss_acc_graph, shift_right, ModelConfig,
    ModelParams, RESERVED,
};

/// Central-difference step used by [`grad_check`].
pub const FD_STEP: f64 = 1e-5;
/// Largest accepted relative error.
pub const FD_TOLERANCE: f64 = 1e-4;
/// Smallest analytic gradient coordinate, relative to `max(1, |loss|)`,
/// that central differences can resolve: the difference quotient carries
/// about `ulp(loss) / 2h ≈ 1e-11·|loss|` of round-off.
pub const MIN_RESOLVABLE_GRADIENT: f64 = 1e-5;
/// Smallest distance to a kink (ReLU, absolute value or max switch) on the
/// gradient path; the step moves intermediate values by about `1e-5`.
pub const MIN_KINK_MARGIN: f64 = 1e-4;
const MAX_DRAWS: usize = 200;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckedLoss {
    Acc,
    Ali,
    Com,
}

impl CheckedLoss {
    pub const ALL: [CheckedLoss; 3] = [CheckedLoss::Acc, CheckedLoss::Ali, CheckedLoss::Com];

    pub fn name(self) -> &'static str {
        match self {
            CheckedLoss::Acc => "acc",
            CheckedLoss::Ali => "ali",
            CheckedLoss::Com => "com",
        }
    }
}

impl FromStr for CheckedLoss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        CheckedLoss::ALL
            .into_iter()
            .find(|l| l.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown loss {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub loss: CheckedLoss,
    pub seed: u64,
    /// Human-readable shape summary of the random instance.
    pub shape: String,
    /// Coordinates perturbed.
    pub coordinates: usize,
    /// Instances discarded as ill-conditioned before this one.
    pub redraws: usize,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_TOLERANCE
    }
}

/// Checks one loss on a random small instance drawn from `seed`.
///
/// - `acc`: teacher-forced pose loss of a random tiny model, against every
///   parameter tensor. Attention key biases have an exactly zero gradient
///   and are held to an absolute zero instead.
/// - `ali`: alignment loss at temperature `tau`, against every raw text and
///   visual feature matrix of a random batch.
/// - `com`: comparison loss at margin `sigma`, against every raw feature
///   matrix of a random batch.
///
/// Instances are redrawn from the same stream until they are well
/// conditioned for a relative finite-difference test: every analytic
/// gradient coordinate is at least [`MIN_RESOLVABLE_GRADIENT`]` · max(1,
/// |loss|)`, and no kink lies within [`MIN_KINK_MARGIN`] (see
/// [`Tape::kink_margin`]). Only the analytic side is inspected when deciding.
pub fn grad_check(loss: CheckedLoss, seed: u64, tau: f64, sigma: f64) -> Result<GradCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(loss as u64);
    match loss {
        CheckedLoss::Acc => check_acc(&mut rng, seed),
        CheckedLoss::Ali => check_features(&mut rng, seed, loss, |tape, texts, visuals| {
            let (vt, tv) = batch_phi_graph(tape, texts, visuals)?;
            loss_ali_graph(tape, vt, tv, tau)
        }),
        CheckedLoss::Com => check_features(&mut rng, seed, loss, |tape, texts, visuals| {
            let pv = visuals
                .iter()
                .map(|&v| pool_graph(tape, v, None))
                .collect::<Result<Vec<_>>>()?;
            let pt = texts
                .iter()
                .map(|&t| pool_graph(tape, t, None))
                .collect::<Result<Vec<_>>>()?;
            let table = similarity_table_graph(tape, &pv, &pt)?;
            loss_com_graph(tape, table, sigma)
        }),
    }
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_parts(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
    )
}

/// Loss value, gradients and kink margin of `f` with every tensor in `xs`
/// as a leaf.
fn analytic<F>(xs: &[&Tensor], f: F) -> Result<(f64, Vec<Tensor>, f64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = xs.iter().map(|&x| tape.leaf(x.clone(), true)).collect();
    let root = f(&mut tape, &leaves)?;
    tape.backward(root)?;
    let grads = leaves
        .iter()
        .map(|&v| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
        .collect();
    Ok((tape.value(root).item(), grads, tape.kink_margin()))
}

/// Exact zeros are allowed: they come from inputs the loss never reads
/// (unused embedding rows), where the difference quotient is exactly zero too.
fn resolvable(loss: f64, grads: &[&Tensor]) -> bool {
    let floor = MIN_RESOLVABLE_GRADIENT * loss.abs().max(1.0);
    grads.iter().flat_map(|g| g.data()).all(|&v| v == 0.0 || v.abs() >= floor)
}

struct AccInstance {
    config: ModelConfig,
    params: ModelParams,
    ids: Vec<usize>,
    target: Tensor,
}

impl AccInstance {
    fn draw(rng: &mut ChaCha8Rng, seed: u64) -> Result<Self> {
        let heads = rng.gen_range(1..=2);
        let config = ModelConfig {
            vocab_size: rng.gen_range(RESERVED + 2..=RESERVED + 6),
            joints: rng.gen_range(1..=2),
            d_model: 4 * heads,
            layers: rng.gen_range(1..=2),
            heads,
            ff_dim: rng.gen_range(4..=8),
        };
        let mut params = ModelParams::init(config.clone(), seed)?;
        // Off-init values so gains and biases are generic.
        params.weights.for_each_mut(|_, t| {
            t.data_mut().iter_mut().for_each(|v| *v += rng.gen_range(-0.2..0.2));
        });
        // Distinct glosses: with a repeated token two encoder inputs differ
        // only by the positional encoding, whose slow columns move by ~1e-7
        // per step, and key gradients shrink to round-off size. An odd frame
        // count keeps the absolute-error signs from cancelling in the output
        // bias gradient.
        let real = config.vocab_size - RESERVED;
        let n = rng.gen_range(2..=real.min(4));
        let m = 2 * rng.gen_range(1..=2) + 1;
        let ids = sample(rng, real, n).into_iter().map(|i| i + RESERVED).collect();
        let target = uniform(rng, m, config.pose_dim());
        Ok(AccInstance {
            config,
            params,
            ids,
            target,
        })
    }

    /// Teacher-forced pose loss with the parameters named in `names`
    /// replaced by `xs`.
    fn loss(&self, tape: &mut Tape, names: &[&str], xs: &[Var]) -> Result<Var> {
        let cfg = &self.config;
        let w = self.params.weights.map(|k, t| match names.iter().position(|n| *n == k) {
            Some(i) => xs[i],
            None => tape.constant(t.clone()),
        });
        let g = embed_gloss_graph(tape, cfg, &w, &self.ids)?;
        let enc = encode_graph(tape, cfg, &w, g, None)?;
        let input = tape.constant(shift_right(&self.target, &vec![0.0; cfg.pose_dim()])?);
        let y = embed_pose_graph(tape, cfg, &w, input)?;
        let dec = decode_graph(tape, cfg, &w, y, enc, None)?;
        let t = tape.constant(self.target.clone());
        loss_acc_graph(tape, dec.poses, t, None)
    }
}

/// Attention key biases shift every score of a row equally, so softmax
/// cancels them and their gradient is exactly zero.
fn is_key_bias(name: &str) -> bool {
    name.ends_with("key.bias")
}

fn check_acc(rng: &mut ChaCha8Rng, seed: u64) -> Result<GradCheck> {
    let mut redraws = 0;
    let (inst, key_bias_grad) = loop {
        let inst = AccInstance::draw(rng, seed)?;
        let named = inst.params.weights.named();
        let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        let tensors: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
        let (value, grads, margin) = analytic(&tensors, |tape, xs| inst.loss(tape, &refs, xs))?;
        let (zero, rest): (Vec<_>, Vec<_>) = names.iter().zip(&grads).partition(|(n, _)| is_key_bias(n));
        let rest: Vec<&Tensor> = rest.into_iter().map(|(_, g)| g).collect();
        if (margin >= MIN_KINK_MARGIN && resolvable(value, &rest)) || redraws + 1 >= MAX_DRAWS {
            let worst_zero = zero
                .iter()
                .flat_map(|(_, g)| g.data())
                .fold(0.0f64, |a, v| a.max(v.abs()));
            break (inst, worst_zero);
        }
        redraws += 1;
    };

    // Key biases are held to an absolute zero instead of a relative error.
    let mut worst = key_bias_grad;
    let mut coordinates = 0;
    for (name, tensor) in inst.params.weights.named() {
        coordinates += tensor.len();
        if is_key_bias(&name) {
            continue;
        }
        let err = finite_diff_check(|tape, x| inst.loss(tape, &[&name], &[x]), tensor, FD_STEP)?;
        worst = worst.max(err);
    }
    let c = &inst.config;
    Ok(GradCheck {
        loss: CheckedLoss::Acc,
        seed,
        shape: format!(
            "D={} L={} H={} J={} N={} M={}",
            c.d_model,
            c.layers,
            c.heads,
            c.joints,
            inst.ids.len(),
            inst.target.rows()
        ),
        coordinates,
        redraws,
        max_rel_error: worst,
    })
}

fn check_features<F>(rng: &mut ChaCha8Rng, seed: u64, loss: CheckedLoss, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var], &[Var]) -> Result<Var>,
{
    let mut redraws = 0;
    let (b, raw) = loop {
        let b = rng.gen_range(2..=4);
        let d = rng.gen_range(3..=6);
        // Slots 0..b are texts, b..2b visuals.
        let raw: Vec<Tensor> = (0..2 * b)
            .map(|k| {
                let rows = if k < b { rng.gen_range(2..=5) } else { rng.gen_range(2..=6) };
                uniform(rng, rows, d)
            })
            .collect();
        let refs: Vec<&Tensor> = raw.iter().collect();
        let (value, grads, margin) = analytic(&refs, |tape, xs| f(tape, &xs[..b], &xs[b..]))?;
        let grads: Vec<&Tensor> = grads.iter().collect();
        if (margin >= MIN_KINK_MARGIN && resolvable(value, &grads)) || redraws + 1 >= MAX_DRAWS {
            break (b, raw);
        }
        redraws += 1;
    };
    let mut worst: f64 = 0.0;
    for (slot, tensor) in raw.iter().enumerate() {
        let err = finite_diff_check(
            |tape, x| {
                let vars: Vec<Var> = raw
                    .iter()
                    .enumerate()
                    .map(|(k, t)| if k == slot { x } else { tape.constant(t.clone()) })
                    .collect();
                f(tape, &vars[..b], &vars[b..])
            },
            tensor,
            FD_STEP,
        )?;
        worst = worst.max(err);
    }
    Ok(GradCheck {
        loss,
        seed,
        shape: format!("B={b} D={}", raw[0].cols()),
        coordinates: raw.iter().map(Tensor::len).sum(),
        redraws,
        max_rel_error: worst,
    })
}
