use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, ModelError};
use crate::autodiff::{Scalar, Tensor};

pub const INIT_STD: f64 = 0.02;

/// Tensors per transformer block.
pub(crate) const PER_LAYER: usize = 12;

pub(crate) const WTE: usize = 0;
pub(crate) const WPE: usize = 1;

/// Offsets inside one block.
pub(crate) mod block {
    pub const LN1_W: usize = 0;
    pub const LN1_B: usize = 1;
    pub const ATTN_W: usize = 2;
    pub const ATTN_B: usize = 3;
    pub const PROJ_W: usize = 4;
    pub const PROJ_B: usize = 5;
    pub const LN2_W: usize = 6;
    pub const LN2_B: usize = 7;
    pub const FC_W: usize = 8;
    pub const FC_B: usize = 9;
    pub const OUT_W: usize = 10;
    pub const OUT_B: usize = 11;
}

pub(crate) fn layer_base(l: usize) -> usize {
    2 + PER_LAYER * l
}

pub(crate) fn ln_f(cfg: &ModelConfig) -> usize {
    layer_base(cfg.n_layers)
}

pub(crate) fn head(cfg: &ModelConfig) -> usize {
    layer_base(cfg.n_layers) + 2
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

/// Name, shape and initializer of every tensor, in storage order.
fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (v, s, d, c) = (cfg.vocab_size, cfg.max_seq, cfg.hidden_dim, cfg.n_classes);
    let mut out = vec![
        ("wte.weight".to_string(), vec![v, d], Init::Normal),
        ("wpe.weight".to_string(), vec![s, d], Init::Normal),
    ];
    for l in 0..cfg.n_layers {
        let p = |n: &str| format!("h.{l}.{n}");
        out.extend([
            (p("ln_1.weight"), vec![d], Init::Ones),
            (p("ln_1.bias"), vec![d], Init::Zeros),
            (p("attn.c_attn.weight"), vec![d, 3 * d], Init::Normal),
            (p("attn.c_attn.bias"), vec![3 * d], Init::Zeros),
            (p("attn.c_proj.weight"), vec![d, d], Init::Normal),
            (p("attn.c_proj.bias"), vec![d], Init::Zeros),
            (p("ln_2.weight"), vec![d], Init::Ones),
            (p("ln_2.bias"), vec![d], Init::Zeros),
            (p("mlp.c_fc.weight"), vec![d, 4 * d], Init::Normal),
            (p("mlp.c_fc.bias"), vec![4 * d], Init::Zeros),
            (p("mlp.c_proj.weight"), vec![4 * d, d], Init::Normal),
            (p("mlp.c_proj.bias"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("ln_f.weight".to_string(), vec![d], Init::Ones),
        ("ln_f.bias".to_string(), vec![d], Init::Zeros),
        ("score.weight".to_string(), vec![d, c], Init::Normal),
        ("score.bias".to_string(), vec![c], Init::Zeros),
    ]);
    out
}

/// Names and shapes of the tensors a config owns, in storage order.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
}

/// All weights of one classifier, stored in [`tensor_layout`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T: Scalar = f32> {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    /// Assembles a set from tensors in layout order, checking every shape.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = tensor_layout(&config);
        if layout.len() != tensors.len() {
            return Err(ModelError::Contract(format!(
                "config needs {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Contract(format!(
                    "tensor {name} should be {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(Self {
            config,
            names: layout.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    /// Total scalar count across all tensors.
    pub fn len(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            config: self.config.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    /// Largest absolute elementwise difference to a set of the same layout.
    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(T::zero(), T::max)
    }
}

/// Fresh weights: matrices and embeddings from N(0, 0.02²), biases zero,
/// layer-norm scales one.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ParameterSet<T>, ModelError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let tensors = layout(config)
        .into_iter()
        .map(|(_, shape, init)| match init {
            Init::Zeros => Tensor::zeros(&shape),
            Init::Ones => Tensor::full(&shape, T::one()),
            Init::Normal => {
                let n = shape.iter().product();
                let data = (0..n).map(|_| T::of(normal.sample(&mut rng))).collect();
                Tensor::new(&shape, data).expect("layout shape")
            }
        })
        .collect();
    ParameterSet::from_tensors(config.clone(), tensors)
}

/// Teacher layers a `keep`-layer student inherits: `round(i·(L−1)/(k−1))`.
pub fn retained_layers(teacher_layers: usize, keep: usize) -> Result<Vec<usize>, ModelError> {
    if keep == 0 || keep > teacher_layers {
        return Err(ModelError::Contract(format!(
            "cannot keep {keep} of {teacher_layers} layers"
        )));
    }
    if keep == 1 {
        return Ok(vec![0]);
    }
    Ok((0..keep)
        .map(|i| (i as f64 * (teacher_layers - 1) as f64 / (keep - 1) as f64).round() as usize)
        .collect())
}

/// Layer-pruned copy of `teacher` keeping `keep` evenly spaced blocks plus
/// the embeddings, final norm and head.
pub fn init_student_from_teacher<T: Scalar>(
    teacher: &ParameterSet<T>,
    keep: usize,
) -> Result<ParameterSet<T>, ModelError> {
    let tc = teacher.config();
    let layers = retained_layers(tc.n_layers, keep)?;
    let config = ModelConfig {
        n_layers: keep,
        ..tc.clone()
    };
    let t = teacher.tensors();
    let mut tensors = vec![t[WTE].clone(), t[WPE].clone()];
    for &l in &layers {
        let base = layer_base(l);
        tensors.extend_from_slice(&t[base..base + PER_LAYER]);
    }
    tensors.extend_from_slice(&t[ln_f(tc)..]);
    ParameterSet::from_tensors(config, tensors)
}

/// `V·D + S·D + L·(12D² + 13D) + 2D + D·C + C`.
pub fn count_params(cfg: &ModelConfig) -> u64 {
    let (v, s, d, l, c) = (
        cfg.vocab_size as u64,
        cfg.max_seq as u64,
        cfg.hidden_dim as u64,
        cfg.n_layers as u64,
        cfg.n_classes as u64,
    );
    v * d + s * d + l * (12 * d * d + 13 * d) + 2 * d + d * c + c
}

/// Multiply-accumulate count of one forward pass over `seq_len` tokens,
/// split into the per-layer part and the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FlopCount {
    pub layers: u64,
    pub head: u64,
}

impl FlopCount {
    pub fn total(&self) -> u64 {
        self.layers + self.head
    }
}

/// Attention `4·n·D² + 2·n²·D` and MLP `8·n·D²` per layer, head `D·C`.
pub fn count_flops(cfg: &ModelConfig, seq_len: usize) -> Result<FlopCount, ModelError> {
    if seq_len > cfg.max_seq {
        return Err(ModelError::Contract(format!(
            "sequence length {seq_len} exceeds max_seq {}",
            cfg.max_seq
        )));
    }
    let (n, d, l) = (seq_len as u64, cfg.hidden_dim as u64, cfg.n_layers as u64);
    let per_layer = 4 * n * d * d + 2 * n * n * d + 8 * n * d * d;
    Ok(FlopCount {
        layers: l * per_layer,
        head: d * cfg.n_classes as u64,
    })
}
