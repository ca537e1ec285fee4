use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

use super::vocab::RESERVED;

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Shape hyperparameters of the transformer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    /// Vocabulary size including reserved tokens.
    pub vocab_size: usize,
    pub joints: usize,
    /// Embedding size `D`.
    pub d_model: usize,
    /// Layers in each of the encoder and decoder stacks.
    pub layers: usize,
    pub heads: usize,
    /// Hidden width of the feed-forward blocks.
    pub ff_dim: usize,
}

impl ModelConfig {
    /// Desk-scale shape: two layers, two heads, `D = 32`.
    pub fn desk(vocab_size: usize, joints: usize) -> Self {
        ModelConfig {
            vocab_size,
            joints,
            d_model: 32,
            layers: 2,
            heads: 2,
            ff_dim: 64,
        }
    }

    pub fn pose_dim(&self) -> usize {
        self.joints * 3
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < RESERVED + 1 {
            return Err(Error::invalid(format!(
                "vocab_size {} leaves no room for glosses",
                self.vocab_size
            )));
        }
        if self.joints == 0 || self.d_model == 0 || self.layers == 0 || self.ff_dim == 0 {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::invalid(format!(
                "d_model {} not divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// `x · weight + bias`, with `weight` stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Attention<T> {
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub hidden: Linear<T>,
    pub output: Linear<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub attention: Attention<T>,
    pub norm1: Norm<T>,
    pub feed_forward: FeedForward<T>,
    pub norm2: Norm<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_attention: Attention<T>,
    pub norm1: Norm<T>,
    pub cross_attention: Attention<T>,
    pub norm2: Norm<T>,
    pub feed_forward: FeedForward<T>,
    pub norm3: Norm<T>,
}

/// Every trainable parameter, generic over the leaf type so the same tree
/// holds owned tensors, tape handles or optimizer moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    pub gloss_embed: Linear<T>,
    pub pose_embed: Linear<T>,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub output: Linear<T>,
}

type MapFn<'f, T, U> = dyn FnMut(&str, &T) -> U + 'f;
type VisitFn<'f, 'a, T> = dyn FnMut(&str, &'a T) + 'f;
type VisitMutFn<'f, T> = dyn FnMut(&str, &mut T) + 'f;

/// Structural traversal shared by every node of the parameter tree. Names
/// are dotted paths such as `decoder.1.cross_attention.key.weight`.
trait Tree<T> {
    type Out<U>;
    fn map_with<U>(&self, path: &str, f: &mut MapFn<'_, T, U>) -> Self::Out<U>;
    fn visit<'a>(&'a self, path: &str, f: &mut VisitFn<'_, 'a, T>);
    fn visit_mut(&mut self, path: &str, f: &mut VisitMutFn<'_, T>);
}

macro_rules! tree_node {
    ($ty:ident { $($field:ident),+ }) => {
        impl<T> Tree<T> for $ty<T> {
            type Out<U> = $ty<U>;
            fn map_with<U>(&self, path: &str, f: &mut MapFn<'_, T, U>) -> $ty<U> {
                $ty { $($field: self.$field.map_with(&join(path, stringify!($field)), f)),+ }
            }
            fn visit<'a>(&'a self, path: &str, f: &mut VisitFn<'_, 'a, T>) {
                $(self.$field.visit(&join(path, stringify!($field)), f);)+
            }
            fn visit_mut(&mut self, path: &str, f: &mut VisitMutFn<'_, T>) {
                $(self.$field.visit_mut(&join(path, stringify!($field)), f);)+
            }
        }
    };
}

/// Leaf wrapper so plain `T` fields participate in the traversal.
struct Leaf;

impl Leaf {
    fn map<T, U>(value: &T, path: &str, f: &mut MapFn<'_, T, U>) -> U {
        f(path, value)
    }
}

macro_rules! leaf_node {
    ($ty:ident { $($field:ident),+ }) => {
        impl<T> Tree<T> for $ty<T> {
            type Out<U> = $ty<U>;
            fn map_with<U>(&self, path: &str, f: &mut MapFn<'_, T, U>) -> $ty<U> {
                $ty { $($field: Leaf::map(&self.$field, &join(path, stringify!($field)), f)),+ }
            }
            fn visit<'a>(&'a self, path: &str, f: &mut VisitFn<'_, 'a, T>) {
                $(f(&join(path, stringify!($field)), &self.$field);)+
            }
            fn visit_mut(&mut self, path: &str, f: &mut VisitMutFn<'_, T>) {
                $(f(&join(path, stringify!($field)), &mut self.$field);)+
            }
        }
    };
}

leaf_node!(Linear { weight, bias });
leaf_node!(Norm { gain, bias });
tree_node!(Attention { query, key, value, output });
tree_node!(FeedForward { hidden, output });
tree_node!(EncoderLayer { attention, norm1, feed_forward, norm2 });
tree_node!(DecoderLayer { self_attention, norm1, cross_attention, norm2, feed_forward, norm3 });
tree_node!(Weights { gloss_embed, pose_embed, encoder, decoder, output });

impl<T, N: Tree<T>> Tree<T> for Vec<N> {
    type Out<U> = Vec<N::Out<U>>;
    fn map_with<U>(&self, path: &str, f: &mut MapFn<'_, T, U>) -> Self::Out<U> {
        self.iter()
            .enumerate()
            .map(|(i, n)| n.map_with(&join(path, &i.to_string()), f))
            .collect()
    }
    fn visit<'a>(&'a self, path: &str, f: &mut VisitFn<'_, 'a, T>) {
        for (i, n) in self.iter().enumerate() {
            n.visit(&join(path, &i.to_string()), f);
        }
    }
    fn visit_mut(&mut self, path: &str, f: &mut VisitMutFn<'_, T>) {
        for (i, n) in self.iter_mut().enumerate() {
            n.visit_mut(&join(path, &i.to_string()), f);
        }
    }
}

fn join(path: &str, field: &str) -> String {
    if path.is_empty() {
        field.to_string()
    } else {
        format!("{path}.{field}")
    }
}

impl<T> Weights<T> {
    /// Applies `f` to every leaf in traversal order, keeping the structure.
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> Weights<U> {
        self.map_with("", &mut f)
    }

    /// Leaves with their dotted names, in a stable traversal order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, v| out.push((name.to_string(), v)));
        out
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        self.visit_mut("", &mut f);
    }
}

impl Weights<Tensor> {
    pub fn zeros_like(&self) -> Self {
        self.map(|_, t| Tensor::zeros(t.shape()))
    }

    pub fn parameter_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Model shape plus trained weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub weights: Weights<Tensor>,
}

impl ModelParams {
    /// Xavier-uniform projection weights, zero biases, unit layer-norm
    /// gains. Deterministic in `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = Weights::shaped(&config).map(|name, shape| {
            if name.ends_with(".gain") {
                Tensor::filled(shape, 1.0)
            } else if shape.len() == 2 {
                let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let n = shape[0] * shape[1];
                let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
                Tensor::from_parts(shape.clone(), data)
            } else {
                Tensor::zeros(shape)
            }
        });
        Ok(ModelParams { config, weights })
    }

    /// Binds every weight to the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Weights<Var> {
        self.weights.map(|_, t| tape.leaf(t.clone(), requires_grad))
    }

    /// Checks that each weight has the shape the config implies.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let expected = Weights::shaped(&self.config);
        let want = expected.named();
        let have = self.weights.named();
        if want.len() != have.len() {
            return Err(Error::invalid("parameter tree does not match config"));
        }
        for ((wn, ws), (hn, ht)) in want.iter().zip(&have) {
            if wn != hn || ws.as_slice() != ht.shape() {
                return Err(Error::shape(
                    "model_params",
                    format!("{hn} has shape {:?}, expected {wn} {:?}", ht.shape(), ws),
                ));
            }
            if !ht.all_finite() {
                return Err(Error::domain("model_params", format!("{hn} is not finite")));
            }
        }
        Ok(())
    }
}

impl Weights<Vec<usize>> {
    /// The shape of every parameter for `config`.
    pub fn shaped(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let linear = |i: usize, o: usize| Linear {
            weight: vec![i, o],
            bias: vec![o],
        };
        let norm = || Norm {
            gain: vec![d],
            bias: vec![d],
        };
        let attention = || Attention {
            query: linear(d, d),
            key: linear(d, d),
            value: linear(d, d),
            output: linear(d, d),
        };
        let ff = || FeedForward {
            hidden: linear(d, config.ff_dim),
            output: linear(config.ff_dim, d),
        };
        Weights {
            gloss_embed: linear(config.vocab_size, d),
            pose_embed: linear(config.pose_dim(), d),
            encoder: (0..config.layers)
                .map(|_| EncoderLayer {
                    attention: attention(),
                    norm1: norm(),
                    feed_forward: ff(),
                    norm2: norm(),
                })
                .collect(),
            decoder: (0..config.layers)
                .map(|_| DecoderLayer {
                    self_attention: attention(),
                    norm1: norm(),
                    cross_attention: attention(),
                    norm2: norm(),
                    feed_forward: ff(),
                    norm3: norm(),
                })
                .collect(),
            output: linear(d, config.pose_dim()),
        }
    }
}
