//! Deterministic synthetic gloss-to-pose corpus with known alignments.
//!
//! Every gloss owns a smooth motion template: each coordinate is a sum of
//! one to three seeded sinusoids over a segment of 4 to 12 frames. A sample
//! picks 2 to 6 distinct glosses, concatenates their templates and adds
//! Gaussian noise. The ground-truth alignment records which gloss position
//! produced each frame.
//!
//! Every random draw comes from a ChaCha8 stream keyed by the corpus seed and
//! a (kind, index) pair, so prototypes and samples of different splits never
//! share randomness and any single sample can be regenerated on its own.

mod format;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::seqmodel::{GlossSequence, GlossVocab, PoseSequence, RESERVED};

pub use format::{MAGIC, VERSION};

pub const MIN_SEGMENT: usize = 4;
pub const MAX_SEGMENT: usize = 12;
pub const MIN_GLOSSES: usize = 2;
pub const MAX_GLOSSES: usize = 6;
/// Prototypes of distinct glosses must differ by this many noise stds.
pub const SEPARATION: f64 = 5.0;
const MAX_REDRAWS: usize = 1000;

/// Generation parameters. Regenerating from the same manifest is
/// bit-identical.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    /// Number of glosses, not counting the reserved tokens.
    pub glosses: usize,
    pub joints: usize,
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub noise_std: f64,
}

impl Default for CorpusManifest {
    fn default() -> Self {
        CorpusManifest {
            seed: 0,
            glosses: 20,
            joints: 8,
            train: 600,
            dev: 60,
            test: 60,
            noise_std: 0.02,
        }
    }
}

impl CorpusManifest {
    pub fn validate(&self) -> Result<()> {
        if self.glosses < 5 {
            return Err(Error::invalid(format!("need at least 5 glosses, got {}", self.glosses)));
        }
        if self.joints == 0 {
            return Err(Error::invalid("joints must be positive"));
        }
        if self.train == 0 || self.dev == 0 || self.test == 0 {
            return Err(Error::invalid("every split needs at least one sample"));
        }
        if [self.glosses, self.joints, self.train, self.dev, self.test]
            .iter()
            .any(|&n| n > u32::MAX as usize)
        {
            return Err(Error::invalid("counts must fit in 32 bits"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::invalid(format!("noise std {} is not valid", self.noise_std)));
        }
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.glosses + RESERVED
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Test => self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }

    fn stream_kind(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Dev => 2,
            Split::Test => 3,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown split {s:?}")))
    }
}

fn stream(seed: u64, kind: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((kind << 32) | index as u64);
    rng
}

/// Motion template of one gloss, `L_g × (J·3)`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlossPrototype {
    /// Vocabulary id (reserved offset included).
    pub gloss: usize,
    pub template: Tensor,
}

impl GlossPrototype {
    pub fn len(&self) -> usize {
        self.template.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

fn draw_template(rng: &mut ChaCha8Rng, joints: usize) -> Tensor {
    let len = rng.gen_range(MIN_SEGMENT..=MAX_SEGMENT);
    let dims = joints * 3;
    let mut data = vec![0.0; len * dims];
    for c in 0..dims {
        let k = rng.gen_range(1..=3usize);
        let cap = (2.0 / k as f64).min(1.0);
        for _ in 0..k {
            let amp = rng.gen_range(0.0..=cap);
            let cycles = rng.gen_range(0.25..1.5);
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            for t in 0..len {
                let angle = std::f64::consts::TAU * cycles * t as f64 / len as f64 + phase;
                data[t * dims + c] += amp * angle.sin();
            }
        }
    }
    Tensor::from_parts(vec![len, dims], data)
}

/// Mean per-frame Euclidean distance over the overlapping frames.
pub fn template_distance(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows().min(b.rows());
    let total: f64 = (0..n)
        .map(|t| {
            a.row(t)
                .iter()
                .zip(b.row(t))
                .map(|(x, y)| (x - y).powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    total / n as f64
}

/// One template per gloss. A template too close to an earlier one is
/// redrawn from the same stream.
pub fn prototypes(manifest: &CorpusManifest) -> Result<Vec<GlossPrototype>> {
    manifest.validate()?;
    let threshold = SEPARATION * manifest.noise_std;
    let mut out: Vec<GlossPrototype> = Vec::with_capacity(manifest.glosses);
    for g in 0..manifest.glosses {
        let mut rng = stream(manifest.seed, 0, g);
        let mut template = draw_template(&mut rng, manifest.joints);
        let mut redraws = 0;
        while out.iter().any(|p| template_distance(&p.template, &template) <= threshold) {
            redraws += 1;
            if redraws > MAX_REDRAWS {
                return Err(Error::invalid(format!(
                    "could not separate gloss {g} from the others at noise std {}",
                    manifest.noise_std
                )));
            }
            template = draw_template(&mut rng, manifest.joints);
        }
        out.push(GlossPrototype {
            gloss: g + RESERVED,
            template,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSample {
    pub glosses: GlossSequence,
    pub poses: PoseSequence,
    /// For each frame, the position in `glosses` of the gloss that produced
    /// it. Non-decreasing and onto.
    pub alignment: Vec<usize>,
}

impl CorpusSample {
    /// Checks the structural invariants of a sample.
    pub fn validate(&self) -> Result<()> {
        let n = self.glosses.len();
        if self.alignment.len() != self.poses.len() {
            return Err(Error::shape(
                "corpus_sample",
                format!("{} alignment entries for {} frames", self.alignment.len(), self.poses.len()),
            ));
        }
        let mut runs: Vec<(usize, usize)> = Vec::new();
        for &a in &self.alignment {
            match runs.last_mut() {
                Some((g, count)) if *g == a => *count += 1,
                _ => runs.push((a, 1)),
            }
        }
        let ok = runs.len() == n
            && runs
                .iter()
                .enumerate()
                .all(|(i, &(g, count))| g == i && count >= MIN_SEGMENT);
        if !ok {
            return Err(Error::invalid(
                "alignment must walk every gloss in order with at least 4 frames each",
            ));
        }
        Ok(())
    }
}

fn draw_sample(
    manifest: &CorpusManifest,
    protos: &[GlossPrototype],
    split: Split,
    index: usize,
) -> Result<CorpusSample> {
    let mut rng = stream(manifest.seed, split.stream_kind(), index);
    let n = rng.gen_range(MIN_GLOSSES..=MAX_GLOSSES.min(manifest.glosses));
    let picks = sample(&mut rng, manifest.glosses, n).into_vec();
    let noise = Normal::new(0.0, manifest.noise_std).map_err(|e| Error::invalid(e.to_string()))?;
    let mut frames = Vec::new();
    let mut alignment = Vec::new();
    for (pos, &g) in picks.iter().enumerate() {
        let t = &protos[g].template;
        for r in 0..t.rows() {
            frames.extend(t.row(r).iter().map(|&v| v + noise.sample(&mut rng)));
            alignment.push(pos);
        }
    }
    let dims = manifest.joints * 3;
    let m = alignment.len();
    Ok(CorpusSample {
        glosses: GlossSequence::new(picks.iter().map(|&g| g + RESERVED).collect(), manifest.vocab_size())?,
        poses: PoseSequence::new(Tensor::new(vec![m, dims], frames)?, manifest.joints)?,
        alignment,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub vocab: GlossVocab,
    pub prototypes: Vec<GlossPrototype>,
    pub train: Vec<CorpusSample>,
    pub dev: Vec<CorpusSample>,
    pub test: Vec<CorpusSample>,
}

/// Builds the whole corpus from its manifest.
pub fn generate(manifest: &CorpusManifest) -> Result<Corpus> {
    let protos = prototypes(manifest)?;
    let split = |s: Split| -> Result<Vec<CorpusSample>> {
        (0..manifest.count(s))
            .map(|i| draw_sample(manifest, &protos, s, i))
            .collect()
    };
    Ok(Corpus {
        vocab: GlossVocab::synthetic(manifest.glosses)?,
        train: split(Split::Train)?,
        dev: split(Split::Dev)?,
        test: split(Split::Test)?,
        prototypes: protos,
        manifest: manifest.clone(),
    })
}

impl Corpus {
    pub fn split(&self, split: Split) -> &[CorpusSample] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    /// Standard deviation of every pose coordinate across a split.
    pub fn coordinate_std(&self, split: Split) -> f64 {
        let values = || self.split(split).iter().flat_map(|s| s.poses.frames().data());
        let n = values().count() as f64;
        let mean = values().sum::<f64>() / n;
        (values().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}
