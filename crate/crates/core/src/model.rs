//! Toy decoder-only transformer: configuration, weights, initialization.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Mat, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Gelu,
    Relu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Gelu => {
                let (inner, _) = gelu_inner(x);
                T::lit(0.5) * x * (T::one() + inner.tanh())
            }
        }
    }

    pub fn derivative<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Gelu => {
                let (inner, d_inner) = gelu_inner(x);
                let t = inner.tanh();
                T::lit(0.5) * (T::one() + t) + T::lit(0.5) * x * (T::one() - t * t) * d_inner
            }
        }
    }
}

/// tanh-approximation argument of GELU and its derivative.
fn gelu_inner<T: Scalar>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    (
        c * (x + a * x * x * x),
        c * (T::one() + T::lit(3.0) * a * x * x),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ln_epsilon: f64,
    pub activation: Activation,
}

impl ModelConfig {
    /// Default desk-scale shape over the byte vocabulary.
    pub fn toy(n_layers: usize, n_heads: usize, d_model: usize) -> Self {
        Self {
            n_layers,
            n_heads,
            d_model,
            d_head: d_model / n_heads.max(1),
            d_ff: 4 * d_model,
            vocab_size: crate::Tokenizer::VOCAB_SIZE,
            max_seq_len: 128,
            ln_epsilon: 1e-5,
            activation: Activation::Gelu,
        }
    }

    /// `n_layers = 0` is allowed and denotes the linear embedding→unembedding
    /// readout (no final layernorm).
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_heads == 0
            || self.d_model == 0
            || self.d_head == 0
            || self.d_ff == 0
            || self.max_seq_len == 0
        {
            return bad(format!("all counts must be >= 1: {self:?}"));
        }
        if self.d_model != self.n_heads * self.d_head {
            return bad(format!(
                "d_model {} != n_heads {} x d_head {}",
                self.d_model, self.n_heads, self.d_head
            ));
        }
        if self.vocab_size < 2 {
            return bad(format!("vocab_size {} < 2", self.vocab_size));
        }
        if !(self.ln_epsilon > 0.0 && self.ln_epsilon.is_finite()) {
            return bad(format!("ln_epsilon {} must be > 0", self.ln_epsilon));
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_heads
    }
}

/// `y = x·w + b` with `w` stored `in × out`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub w: Mat<T>,
    pub b: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn zeros(inp: usize, out: usize) -> Self {
        Self {
            w: Mat::zeros(inp, out),
            b: vec![T::zero(); out],
        }
    }

    pub fn apply(&self, x: &Mat<T>) -> Mat<T> {
        let mut y = x.matmul(&self.w);
        for r in 0..y.rows {
            for (v, &b) in y.row_mut(r).iter_mut().zip(&self.b) {
                *v += b;
            }
        }
        y
    }

    fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear {
            w: self.w.cast(),
            b: cast_vec(&self.b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn identity(d: usize) -> Self {
        Self {
            gamma: vec![T::one(); d],
            beta: vec![T::zero(); d],
        }
    }

    fn cast<U: Scalar>(&self) -> LayerNorm<U> {
        LayerNorm {
            gamma: cast_vec(&self.gamma),
            beta: cast_vec(&self.beta),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub ln1: LayerNorm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub o: Linear<T>,
    pub ln2: LayerNorm<T>,
    pub ff1: Linear<T>,
    pub ff2: Linear<T>,
}

/// Pre-layernorm GPT-style decoder with learned absolute positions and
/// untied embeddings. Immutable once built; share it by reference.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T = f32> {
    pub config: ModelConfig,
    /// `vocab × d_model`
    pub token_embedding: Mat<T>,
    /// `max_seq_len × d_model`
    pub position_embedding: Mat<T>,
    pub blocks: Vec<Block<T>>,
    /// Present iff `n_layers > 0`.
    pub final_norm: Option<LayerNorm<T>>,
    /// `d_model × vocab`
    pub unembedding: Mat<T>,
}

fn cast_vec<T: Scalar, U: Scalar>(v: &[T]) -> Vec<U> {
    v.iter().map(|&x| U::lit(x.as_f64())).collect()
}

impl<T: Scalar> Model<T> {
    /// Seeded random initialization. Weights are `N(0, 1/fan_in)`, biases and
    /// layernorm shifts get small noise so that every code path (including
    /// bias absorption) is exercised.
    pub fn random(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let mut normal = |rows: usize, cols: usize, std: f64| -> Mat<T> {
            let dist = Normal::new(0.0, std).expect("positive std");
            Mat::from_vec(
                rows,
                cols,
                (0..rows * cols).map(|_| T::lit(dist.sample(&mut rng))).collect(),
            )
        };
        let token_embedding = normal(config.vocab_size, d, 1.0);
        let position_embedding = normal(config.max_seq_len, d, 0.3);
        let mut linear = |inp: usize, out: usize| Linear {
            w: normal(inp, out, (1.0 / inp as f64).sqrt()),
            b: normal(1, out, 0.05).data,
        };
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            blocks.push(Block {
                ln1: LayerNorm::identity(d),
                q: linear(d, d),
                k: linear(d, d),
                v: linear(d, d),
                o: linear(d, d),
                ln2: LayerNorm::identity(d),
                ff1: linear(d, config.d_ff),
                ff2: linear(config.d_ff, d),
            });
        }
        let jitter = |ln: &mut LayerNorm<T>, rng: &mut ChaCha8Rng| {
            let dist = Normal::new(0.0, 0.05).expect("std");
            for g in ln.gamma.iter_mut() {
                *g += T::lit(dist.sample(rng));
            }
            for b in ln.beta.iter_mut() {
                *b += T::lit(dist.sample(rng));
            }
        };
        for b in blocks.iter_mut() {
            jitter(&mut b.ln1, &mut rng);
            jitter(&mut b.ln2, &mut rng);
        }
        let final_norm = if config.n_layers > 0 {
            let mut ln = LayerNorm::identity(d);
            jitter(&mut ln, &mut rng);
            Some(ln)
        } else {
            None
        };
        let dist = Normal::new(0.0, (1.0 / d as f64).sqrt()).expect("std");
        let unembedding = Mat::from_vec(
            d,
            config.vocab_size,
            (0..d * config.vocab_size)
                .map(|_| T::lit(dist.sample(&mut rng)))
                .collect(),
        );
        let model = Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
            unembedding,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: b.ln1.cast(),
                    q: b.q.cast(),
                    k: b.k.cast(),
                    v: b.v.cast(),
                    o: b.o.cast(),
                    ln2: b.ln2.cast(),
                    ff1: b.ff1.cast(),
                    ff2: b.ff2.cast(),
                })
                .collect(),
            final_norm: self.final_norm.as_ref().map(LayerNorm::cast),
            unembedding: self.unembedding.cast(),
        }
    }

    /// Named parameter tensors in canonical (file) order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        out.push(mat("tok_emb".into(), &self.token_embedding));
        out.push(mat("pos_emb".into(), &self.position_embedding));
        for (l, b) in self.blocks.iter().enumerate() {
            let p = format!("blocks.{l}");
            out.push((format!("{p}.ln1.gamma"), vec![b.ln1.gamma.len()], &b.ln1.gamma));
            out.push((format!("{p}.ln1.beta"), vec![b.ln1.beta.len()], &b.ln1.beta));
            for (n, lin) in [("q", &b.q), ("k", &b.k), ("v", &b.v), ("o", &b.o)] {
                out.push(mat(format!("{p}.attn.{n}.w"), &lin.w));
                out.push((format!("{p}.attn.{n}.b"), vec![lin.b.len()], &lin.b));
            }
            out.push((format!("{p}.ln2.gamma"), vec![b.ln2.gamma.len()], &b.ln2.gamma));
            out.push((format!("{p}.ln2.beta"), vec![b.ln2.beta.len()], &b.ln2.beta));
            for (n, lin) in [("ff1", &b.ff1), ("ff2", &b.ff2)] {
                out.push(mat(format!("{p}.mlp.{n}.w"), &lin.w));
                out.push((format!("{p}.mlp.{n}.b"), vec![lin.b.len()], &lin.b));
            }
        }
        if let Some(ln) = &self.final_norm {
            out.push(("ln_f.gamma".into(), vec![ln.gamma.len()], &ln.gamma));
            out.push(("ln_f.beta".into(), vec![ln.beta.len()], &ln.beta));
        }
        out.push(mat("unembed".into(), &self.unembedding));
        out
    }

    /// Mutable views over the same tensors, same order as [`Model::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        out.push(&mut self.token_embedding.data);
        out.push(&mut self.position_embedding.data);
        for b in self.blocks.iter_mut() {
            out.push(&mut b.ln1.gamma);
            out.push(&mut b.ln1.beta);
            for lin in [&mut b.q, &mut b.k, &mut b.v, &mut b.o] {
                out.push(&mut lin.w.data);
                out.push(&mut lin.b);
            }
            out.push(&mut b.ln2.gamma);
            out.push(&mut b.ln2.beta);
            for lin in [&mut b.ff1, &mut b.ff2] {
                out.push(&mut lin.w.data);
                out.push(&mut lin.b);
            }
        }
        if let Some(ln) = self.final_norm.as_mut() {
            out.push(&mut ln.gamma);
            out.push(&mut ln.beta);
        }
        out.push(&mut self.unembedding.data);
        out
    }

    /// Expected `(name, shape)` list derived from a config alone.
    pub fn expected_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let mut out = vec![
            ("tok_emb".to_string(), vec![config.vocab_size, d]),
            ("pos_emb".to_string(), vec![config.max_seq_len, d]),
        ];
        for l in 0..config.n_layers {
            let p = format!("blocks.{l}");
            out.push((format!("{p}.ln1.gamma"), vec![d]));
            out.push((format!("{p}.ln1.beta"), vec![d]));
            for n in ["q", "k", "v", "o"] {
                out.push((format!("{p}.attn.{n}.w"), vec![d, d]));
                out.push((format!("{p}.attn.{n}.b"), vec![d]));
            }
            out.push((format!("{p}.ln2.gamma"), vec![d]));
            out.push((format!("{p}.ln2.beta"), vec![d]));
            out.push((format!("{p}.mlp.ff1.w"), vec![d, config.d_ff]));
            out.push((format!("{p}.mlp.ff1.b"), vec![config.d_ff]));
            out.push((format!("{p}.mlp.ff2.w"), vec![config.d_ff, d]));
            out.push((format!("{p}.mlp.ff2.b"), vec![d]));
        }
        if config.n_layers > 0 {
            out.push(("ln_f.gamma".into(), vec![d]));
            out.push(("ln_f.beta".into(), vec![d]));
        }
        out.push(("unembed".into(), vec![d, config.vocab_size]));
        out
    }

    /// Builds a model from flat tensors given in [`Model::expected_layout`]
    /// order.
    pub fn from_tensors(config: ModelConfig, mut tensors: Vec<Vec<T>>) -> Result<Self> {
        config.validate()?;
        let layout = Self::expected_layout(&config);
        if tensors.len() != layout.len() {
            return Err(Error::Header(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            let n: usize = shape.iter().product();
            if t.len() != n {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: vec![t.len()],
                });
            }
        }
        let d = config.d_model;
        let mut it = tensors.drain(..);
        let mut next = || it.next().expect("length checked");
        let token_embedding = Mat::from_vec(config.vocab_size, d, next());
        let position_embedding = Mat::from_vec(config.max_seq_len, d, next());
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let ln1 = LayerNorm {
                gamma: next(),
                beta: next(),
            };
            let mut attn = Vec::with_capacity(4);
            for _ in 0..4 {
                let w = Mat::from_vec(d, d, next());
                attn.push(Linear { w, b: next() });
            }
            let ln2 = LayerNorm {
                gamma: next(),
                beta: next(),
            };
            let ff1 = Linear {
                w: Mat::from_vec(d, config.d_ff, next()),
                b: next(),
            };
            let ff2 = Linear {
                w: Mat::from_vec(config.d_ff, d, next()),
                b: next(),
            };
            let mut attn = attn.into_iter();
            blocks.push(Block {
                ln1,
                q: attn.next().expect("q"),
                k: attn.next().expect("k"),
                v: attn.next().expect("v"),
                o: attn.next().expect("o"),
                ln2,
                ff1,
                ff2,
            });
        }
        let final_norm = (config.n_layers > 0).then(|| LayerNorm {
            gamma: next(),
            beta: next(),
        });
        let unembedding = Mat::from_vec(d, config.vocab_size, next());
        drop(it);
        let model = Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            final_norm,
            unembedding,
        };
        model.validate()?;
        Ok(model)
    }

    /// Shape and finiteness checks against the config.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.blocks.len() != self.config.n_layers {
            return Err(Error::InvalidConfig(format!(
                "{} blocks for n_layers = {}",
                self.blocks.len(),
                self.config.n_layers
            )));
        }
        if self.final_norm.is_some() != (self.config.n_layers > 0) {
            return Err(Error::InvalidConfig(
                "final layernorm must be present iff n_layers > 0".into(),
            ));
        }
        for ((name, shape, data), (ename, eshape)) in self
            .tensors()
            .into_iter()
            .zip(Self::expected_layout(&self.config))
        {
            let n: usize = eshape.iter().product();
            if name != ename || shape != eshape || data.len() != n {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: eshape,
                    found: shape,
                });
            }
            if data.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidConfig(format!("non-finite value in {name}")));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }
}

fn mat<T>(name: String, m: &Mat<T>) -> (String, Vec<usize>, &[T]) {
    (name, vec![m.rows, m.cols], &m.data[..])
}
