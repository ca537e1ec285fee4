use std::fs::OpenOptions;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalkit::{evaluate, EvalOptions, MetricReport};
use crate::seqmodel::{Checkpoint, ModelParams};
use crate::synthcorpus::{Corpus, CorpusSample, Split};

use super::config::TrainConfig;
use super::step::{train_step, StepLosses, TrainState};

pub const LOG_FILE: &str = "train.log";
pub const STATE_FILE: &str = "state.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const BEST_FILE: &str = "best.ckpt";
pub const CONFIG_FILE: &str = "config.txt";
pub const DEV_REPORT_DIR: &str = "dev_report";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct TrainOptions {
    /// Continue from `state.ckpt` in the output directory if present.
    pub resume: bool,
    /// Stop (saving state) once this many optimizer steps are done.
    pub stop_after: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub state: TrainState,
    /// Dev evaluations run in this call, by epoch (1-based).
    pub evaluations: Vec<(usize, MetricReport)>,
    /// Whether every epoch has run.
    pub finished: bool,
}

impl TrainOutcome {
    /// The evaluation with the lowest dev DTW-P.
    pub fn best(&self) -> Option<&(usize, MetricReport)> {
        self.evaluations
            .iter()
            .min_by(|a, b| a.1.dtw_p.total_cmp(&b.1.dtw_p))
    }
}

/// Order of training samples in a given epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

/// Keeps only the first `lines` lines of the log, so a resumed run appends
/// exactly after the saved step.
fn trim_log(path: &Path, lines: u64) -> Result<()> {
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text.lines().take(lines as usize).map(|l| format!("{l}\n")).collect();
    if (kept.lines().count() as u64) < lines {
        return Err(Error::invalid(format!(
            "{} has fewer lines than the saved step {lines}",
            path.display()
        )));
    }
    write_file(path, kept)
}

/// Runs (or resumes) training, writing into `out_dir`:
///
/// - `config.txt`: the run config,
/// - `train.log`: one `step,l_acc,l_ali,l_com,joint,margin_rate` line per step,
/// - `state.ckpt`: parameters, optimizer moments and step counter,
/// - `best.ckpt` and `dev_report/`: the parameters and report with the lowest
///   dev DTW-P seen at an evaluation,
/// - `model.ckpt`: the final parameters.
pub fn train(cfg: &TrainConfig, corpus: &Corpus, out_dir: impl AsRef<Path>, options: TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    let out = out_dir.as_ref();
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = |name: &str| -> PathBuf { out.join(name) };
    let model_cfg = cfg.model_config(corpus.manifest.vocab_size(), corpus.manifest.joints);

    let state_path = path(STATE_FILE);
    let mut state = if options.resume && state_path.exists() {
        let (state, saved) = TrainState::from_checkpoint(&Checkpoint::load(&state_path)?)?;
        if saved != *cfg {
            return Err(Error::invalid("saved training state was produced by a different config"));
        }
        if state.params.config != model_cfg {
            return Err(Error::invalid("saved model shape does not match the corpus"));
        }
        trim_log(&path(LOG_FILE), state.step)?;
        state
    } else {
        write_file(&path(LOG_FILE), "")?;
        for stale in [BEST_FILE, MODEL_FILE] {
            let _ = std::fs::remove_file(path(stale));
        }
        TrainState::new(ModelParams::init(model_cfg, cfg.seed)?)
    };
    write_file(&path(CONFIG_FILE), cfg.to_kv())?;

    let train_set = &corpus.train;
    let coordinate_std = corpus.coordinate_std(Split::Train);
    let spe = steps_per_epoch(train_set.len(), cfg.batch_size) as u64;
    let total = spe * cfg.epochs as u64;
    let log_path = path(LOG_FILE);
    let log_file = OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(log_file);
    let mut evaluations = Vec::new();
    let mut order_epoch = None;
    let mut order = Vec::new();

    let save_state = |state: &TrainState, log: &mut BufWriter<std::fs::File>| -> Result<()> {
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        state.to_checkpoint(cfg).save(&path(STATE_FILE))
    };

    while state.step < total {
        if options.stop_after.is_some_and(|s| state.step >= s) {
            save_state(&state, &mut log)?;
            return Ok(TrainOutcome {
                state,
                evaluations,
                finished: false,
            });
        }
        let epoch = (state.step / spe) as usize;
        let k = (state.step % spe) as usize;
        if order_epoch != Some(epoch) {
            order = epoch_order(cfg.seed, epoch, train_set.len());
            order_epoch = Some(epoch);
        }
        let end = ((k + 1) * cfg.batch_size).min(train_set.len());
        let batch: Vec<&CorpusSample> = order[k * cfg.batch_size..end].iter().map(|&i| &train_set[i]).collect();
        let losses: StepLosses = train_step(&mut state, &batch, cfg, coordinate_std)?;
        writeln!(log, "{}", losses.log_line()).map_err(|e| Error::io(&log_path, e))?;

        if k as u64 + 1 == spe {
            let done = epoch + 1;
            let due = (cfg.eval_every > 0 && done % cfg.eval_every == 0) || done == cfg.epochs;
            if due {
                let report = evaluate(&state.params, &corpus.dev, EvalOptions::default())?;
                if state.best_dev.map_or(true, |(_, best)| report.dtw_p < best) {
                    state.best_dev = Some((done, report.dtw_p));
                    state.params.save(&path(BEST_FILE))?;
                    report.write(path(DEV_REPORT_DIR))?;
                }
                evaluations.push((done, report));
            }
            save_state(&state, &mut log)?;
        }
    }
    save_state(&state, &mut log)?;
    state.params.save(&path(MODEL_FILE))?;
    Ok(TrainOutcome {
        state,
        evaluations,
        finished: true,
    })
}
