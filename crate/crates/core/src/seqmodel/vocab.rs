use std::collections::HashMap;

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
/// Number of reserved ids at the start of every vocabulary.
pub const RESERVED: usize = 3;

/// Bijection between gloss token strings and contiguous ids `0..len`.
#[derive(Clone, Debug, PartialEq)]
pub struct GlossVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl GlossVocab {
    /// Builds a vocabulary from the non-reserved tokens; reserved tokens are
    /// prepended.
    pub fn new(glosses: impl IntoIterator<Item = String>) -> Result<Self> {
        let mut tokens: Vec<String> = ["<pad>", "<bos>", "<eos>"].map(String::from).to_vec();
        tokens.extend(glosses);
        if tokens.len() < RESERVED + 1 {
            return Err(Error::invalid("vocabulary needs at least one gloss"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(GlossVocab { tokens, index })
    }

    /// `count` synthetic glosses named `G000`, `G001`, ...
    pub fn synthetic(count: usize) -> Result<Self> {
        GlossVocab::new((0..count).map(|i| format!("G{i:03}")))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[&str]) -> Result<GlossSequence> {
        let ids = tokens
            .iter()
            .map(|t| {
                self.id(t)
                    .ok_or_else(|| Error::invalid(format!("unknown gloss {t:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        GlossSequence::new(ids, self.len())
    }
}

/// Non-empty sequence of gloss ids with no padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlossSequence {
    ids: Vec<usize>,
}

impl GlossSequence {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("gloss sequence is empty"));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::invalid(format!(
                "gloss id {bad} outside vocabulary of size {vocab_size}"
            )));
        }
        if ids.contains(&PAD) {
            return Err(Error::invalid("gloss sequence contains PAD"));
        }
        Ok(GlossSequence { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// `M × (J·3)` matrix of 3D joint coordinates, one row per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PoseSequence {
    frames: Tensor,
    joints: usize,
}

impl PoseSequence {
    pub fn new(frames: Tensor, joints: usize) -> Result<Self> {
        if frames.rank() != 2 || joints == 0 || frames.cols() != joints * 3 {
            return Err(Error::shape(
                "pose_sequence",
                format!("{:?} for {joints} joints", frames.shape()),
            ));
        }
        Ok(PoseSequence { frames, joints })
    }

    pub fn from_rows(rows: &[Vec<f64>], joints: usize) -> Result<Self> {
        PoseSequence::new(Tensor::from_rows(rows)?, joints)
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    /// Number of frames `M`.
    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frame(&self, m: usize) -> &[f64] {
        self.frames.row(m)
    }

    /// Coordinates of joint `j` at frame `m`.
    pub fn joint(&self, m: usize, j: usize) -> [f64; 3] {
        let f = self.frame(m);
        [f[3 * j], f[3 * j + 1], f[3 * j + 2]]
    }
}
