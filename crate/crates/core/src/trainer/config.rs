use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::seqmodel::ModelConfig;

/// Hyperparameters of a training run. The flat `key=value` run file uses
/// exactly these field names.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Weight of the pose fitting loss.
    pub alpha: f64,
    /// Weight of the fine-grained alignment loss.
    pub beta: f64,
    /// Weight of the sequence comparison loss.
    pub gamma: f64,
    /// Alignment softmax temperature.
    pub tau: f64,
    /// Comparison margin.
    pub sigma: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Decoder-input noise std in units of 1% of the corpus coordinate std.
    pub noise_rate: f64,
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub seed: u64,
    /// Dev evaluation period in epochs; the last epoch is always evaluated.
    pub eval_every: usize,
    /// Stops gradients of the alignment and comparison losses at `z`.
    pub detach_visual: bool,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            beta: 1e-7,
            gamma: 1e-5,
            tau: 0.01,
            sigma: 0.05,
            learning_rate: 1e-3,
            batch_size: 8,
            epochs: 30,
            noise_rate: 5.0,
            d_model: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
            seed: 0,
            eval_every: 5,
            detach_visual: false,
            grad_clip: 0.0,
        }
    }
}

/// Which auxiliary objectives stay on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ablation {
    Full,
    NoCsa,
    NoMsc,
    None,
}

impl FromStr for Ablation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no-csa" => Ok(Ablation::NoCsa),
            "no-msc" => Ok(Ablation::NoMsc),
            "none" => Ok(Ablation::None),
            _ => Err(Error::invalid(format!("unknown ablation {s:?}"))),
        }
    }
}

impl TrainConfig {
    /// Two layers, four heads and 512-wide embeddings.
    pub fn wide() -> Self {
        TrainConfig {
            d_model: 512,
            heads: 4,
            ff_dim: 1024,
            ..TrainConfig::default()
        }
    }

    /// Zeroes the weights of the disabled objectives.
    pub fn with_ablation(&self, ablation: Ablation) -> Self {
        let (beta, gamma) = match ablation {
            Ablation::Full => (self.beta, self.gamma),
            Ablation::NoCsa => (0.0, self.gamma),
            Ablation::NoMsc => (self.beta, 0.0),
            Ablation::None => (0.0, 0.0),
        };
        TrainConfig {
            beta,
            gamma,
            ..self.clone()
        }
    }

    pub fn model_config(&self, vocab_size: usize, joints: usize) -> ModelConfig {
        ModelConfig {
            vocab_size,
            joints,
            d_model: self.d_model,
            layers: self.layers,
            heads: self.heads,
            ff_dim: self.ff_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.alpha,
            self.beta,
            self.gamma,
            self.tau,
            self.sigma,
            self.learning_rate,
            self.noise_rate,
            self.grad_clip,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("train config values must be finite"));
        }
        if self.alpha <= 0.0 || self.tau <= 0.0 || self.learning_rate <= 0.0 {
            return Err(Error::invalid("alpha, tau and learning_rate must be positive"));
        }
        if [self.beta, self.gamma, self.sigma, self.noise_rate, self.grad_clip]
            .iter()
            .any(|&v| v < 0.0)
        {
            return Err(Error::invalid(
                "beta, gamma, sigma, noise_rate and grad_clip must be non-negative",
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch_size and epochs must be at least 1"));
        }
        self.model_config(4, 1).validate()
    }

    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("gamma", self.gamma.to_string()),
            ("tau", self.tau.to_string()),
            ("sigma", self.sigma.to_string()),
            ("learning_rate", self.learning_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("noise_rate", self.noise_rate.to_string()),
            ("d_model", self.d_model.to_string()),
            ("layers", self.layers.to_string()),
            ("heads", self.heads.to_string()),
            ("ff_dim", self.ff_dim.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("detach_visual", self.detach_visual.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
        ]
    }

    /// Parses `key=value` lines over the defaults. Blank lines and lines
    /// starting with `#` are skipped; unknown keys are an error.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = TrainConfig::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("line {}: expected key=value", n + 1)))?;
            cfg.set(key.trim(), value.trim())
                .map_err(|e| Error::invalid(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::invalid(format!("bad value {value:?} for {key}")))
        }
        match key {
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "gamma" => self.gamma = parse(key, value)?,
            "tau" => self.tau = parse(key, value)?,
            "sigma" => self.sigma = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "noise_rate" => self.noise_rate = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "layers" => self.layers = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "ff_dim" => self.ff_dim = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "eval_every" => self.eval_every = parse(key, value)?,
            "detach_visual" => self.detach_visual = parse(key, value)?,
            "grad_clip" => self.grad_clip = parse(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_kv(&text)
    }
}

/// `α·acc + β·ali + γ·com`, summed left to right.
pub fn joint_loss(l_acc: f64, l_ali: f64, l_com: f64, cfg: &TrainConfig) -> f64 {
    cfg.alpha * l_acc + cfg.beta * l_ali + cfg.gamma * l_com
}
