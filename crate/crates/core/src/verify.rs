//! 64-bit finite-difference suite over every primitive and a full 2-layer
//! classifier.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{
    grad_check_seeded, Graph, KlDirection, Primitive, Queries, Tensor, TensorError, Var,
};
use crate::model::{build, init_params, ModelConfig, ModelError, Packed, ParameterSet};
use crate::tokenizer::{encode, pad_batch};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;

/// Name of the composite entry in a [`SuiteReport`].
pub const COMPOSITE: &str = "model(L=2,D=16)";

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    /// NaN counts as worst.
    pub fn worst(&self) -> f64 {
        self.checks
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, |a, b| if b.is_nan() || b > a { b } else { a })
    }
}

fn worse(a: f64, b: f64) -> f64 {
    if b.is_nan() || b > a {
        b
    } else {
        a
    }
}

struct Ctx {
    rng: ChaCha8Rng,
    sign_flip: Option<Primitive>,
    worst: f64,
}

impl Ctx {
    fn random(&mut self, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).expect("nonempty shape")
    }

    fn check<F>(&mut self, input: &Tensor<f64>, training: Option<u64>, f: F) -> Result<(), TensorError>
    where
        F: Fn(&mut Graph<f64>, Var) -> Result<Var, TensorError>,
    {
        let err = grad_check_seeded(f, input, STEP, self.sign_flip, training)?;
        self.worst = worse(self.worst, err);
        Ok(())
    }
}

/// `sum((y ⊙ w)²)` with `w` cut from a fixed random pool to the shape of `y`.
fn weighted_square(g: &mut Graph<f64>, y: Var, pool: &Tensor<f64>) -> Result<Var, TensorError> {
    let shape = g.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = g.constant(Tensor::new(&shape, pool.data()[..n].to_vec())?);
    let p = g.mul(y, w)?;
    let sq = g.mul(p, p)?;
    Ok(g.sum(sq))
}

fn primitive_check(ctx: &mut Ctx, p: Primitive) -> Result<(), TensorError> {
    let w = ctx.random(&[64]);
    let w = &w;
    match p {
        Primitive::MatMul => {
            let (b, a) = (ctx.random(&[4, 3]), ctx.random(&[2, 3]));
            let input = ctx.random(&[3, 4]);
            ctx.check(&input, None, |g, x| {
                let b = g.constant(b.clone());
                let y = g.matmul(x, b)?;
                weighted_square(g, y, w)
            })?;
            let input = ctx.random(&[3, 5]);
            ctx.check(&input, None, |g, x| {
                let a = g.constant(a.clone());
                let y = g.matmul(a, x)?;
                weighted_square(g, y, w)
            })
        }
        Primitive::Add => {
            let (o, input) = (ctx.random(&[3, 4]), ctx.random(&[3, 4]));
            ctx.check(&input, None, |g, x| {
                let o = g.constant(o.clone());
                let y = g.add(x, o)?;
                let y = g.add(y, x)?;
                weighted_square(g, y, w)
            })
        }
        Primitive::AddRow => {
            let (base, row) = (ctx.random(&[3, 4]), ctx.random(&[4]));
            ctx.check(&row, None, |g, x| {
                let b = g.constant(base.clone());
                let y = g.add_row(b, x)?;
                weighted_square(g, y, w)
            })?;
            ctx.check(&base, None, |g, x| {
                let b = g.constant(row.clone());
                let y = g.add_row(x, b)?;
                weighted_square(g, y, w)
            })
        }
        Primitive::Mul => {
            let (o, input) = (ctx.random(&[3, 4]), ctx.random(&[3, 4]));
            ctx.check(&input, None, |g, x| {
                let o = g.constant(o.clone());
                let y = g.mul(x, o)?;
                let y = g.mul(y, x)?;
                Ok(g.sum(y))
            })
        }
        Primitive::Scale => {
            let input = ctx.random(&[5]);
            ctx.check(&input, None, |g, x| {
                let y = g.scale(x, -1.7);
                weighted_square(g, y, w)
            })
        }
        Primitive::Sum => {
            let input = ctx.random(&[2, 3]);
            ctx.check(&input, None, |g, x| {
                let s = g.sum(x);
                let s = g.scale(s, 0.5);
                let s2 = g.mul(s, s)?;
                let y = g.mul(x, x)?;
                let t = g.sum(y);
                g.add(s2, t)
            })
        }
        Primitive::Softmax => {
            let input = ctx.random(&[3, 5]);
            for axis in [0, 1] {
                ctx.check(&input, None, |g, x| {
                    let y = g.softmax(x, axis)?;
                    weighted_square(g, y, w)
                })?;
            }
            Ok(())
        }
        Primitive::LayerNorm => {
            let (gamma, beta, xs) = (ctx.random(&[6]), ctx.random(&[6]), ctx.random(&[4, 6]));
            let ln = |g: &mut Graph<f64>, x: Var, ga: Var, be: Var| -> Result<Var, TensorError> {
                let y = g.layer_norm(x, ga, be, 1e-5)?;
                weighted_square(g, y, w)
            };
            ctx.check(&xs, None, |g, x| {
                let (ga, be) = (g.constant(gamma.clone()), g.constant(beta.clone()));
                ln(g, x, ga, be)
            })?;
            ctx.check(&gamma, None, |g, ga| {
                let (x, be) = (g.constant(xs.clone()), g.constant(beta.clone()));
                ln(g, x, ga, be)
            })?;
            ctx.check(&beta, None, |g, be| {
                let (x, ga) = (g.constant(xs.clone()), g.constant(gamma.clone()));
                ln(g, x, ga, be)
            })
        }
        Primitive::Gelu => {
            let input = ctx.random(&[12]);
            let spread = Tensor::new(&[12], input.data().iter().map(|v| v * 3.0).collect())?;
            ctx.check(&spread, None, |g, x| {
                let y = g.gelu(x);
                weighted_square(g, y, w)
            })
        }
        Primitive::Gather => {
            let table = ctx.random(&[5, 3]);
            ctx.check(&table, None, |g, t| {
                let y = g.embedding_gather(t, &[4, 1, 1, 0])?;
                weighted_square(g, y, w)
            })
        }
        Primitive::SelectRows => {
            let input = ctx.random(&[5, 3]);
            ctx.check(&input, None, |g, x| {
                let y = g.select_rows(x, &[3, 0, 3])?;
                weighted_square(g, y, w)
            })
        }
        Primitive::Dropout => {
            let input = ctx.random(&[4, 4]);
            ctx.check(&input, Some(7), |g, x| {
                let y = g.dropout(x, 0.3);
                weighted_square(g, y, w)
            })
        }
        Primitive::Attention => {
            let input = ctx.random(&[9, 12]);
            for queries in [Queries::All, Queries::Last] {
                ctx.check(&input, None, |g, x| {
                    let y = g.attention(x, &[0..4, 4..9], 2, queries)?;
                    weighted_square(g, y, w)
                })?;
            }
            Ok(())
        }
        Primitive::CrossEntropy => {
            let input = ctx.random(&[4, 3]);
            ctx.check(&input, None, |g, x| g.cross_entropy(x, &[0, 2, 1, 2]))
        }
        Primitive::SoftKl => {
            let (teacher, input) = (ctx.random(&[4, 3]), ctx.random(&[4, 3]));
            for dir in [KlDirection::StudentTeacher, KlDirection::TeacherStudent] {
                for tau in [1.0, 2.0, 5.0] {
                    ctx.check(&input, None, |g, x| g.soft_kl(x, &teacher, tau, dir))?;
                }
            }
            Ok(())
        }
    }
}

/// Weights for the composite check: the regular init plus uniform noise of
/// half-width `spread`, so every gradient coordinate is well above the
/// finite-difference noise floor.
fn composite_params(cfg: &ModelConfig, seed: u64, spread: f64) -> Result<ParameterSet<f64>, ModelError> {
    let mut p = init_params::<f64>(cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += rng.random_range(-spread..spread);
        }
    }
    Ok(p)
}

pub fn composite_config() -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        hidden_dim: 16,
        n_heads: 2,
        max_seq: 16,
        n_classes: 3,
        ..ModelConfig::default()
    }
}

/// Fixed batch and labels for the composite check.
fn composite_inputs(cfg: &ModelConfig) -> Result<(Packed, [usize; 3]), ModelError> {
    let prompts: [&[u8]; 3] = [b"TCP 443", b"udp:53", b"QUIC a"];
    let seqs: Vec<Vec<u32>> = prompts.iter().map(|p| encode(p, true, true)).collect();
    let batch = pad_batch(&seqs, cfg.max_seq)?;
    Ok((Packed::new(&batch, cfg)?, [0, 2, 1]))
}

fn composite_loss(
    g: &mut Graph<f64>,
    cfg: &ModelConfig,
    vars: &[Var],
    packed: &Packed,
    labels: &[usize],
) -> Result<Var, TensorError> {
    let out = build(g, cfg, vars, packed).map_err(|e| match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Contract(other.to_string()),
    })?;
    g.cross_entropy(out.logits, labels)
}

/// Cross-entropy of a 2-layer, D=16 classifier as a function of its input
/// embedding tables (token, then position), with every other weight fixed.
/// The gradient reaches the tables only through every block's backward
/// rules, so this checks their composition end to end.
pub fn composite_check(seed: u64, sign_flip: Option<Primitive>) -> Result<f64, ModelError> {
    let cfg = composite_config();
    let params = composite_params(&cfg, seed, 0.5)?;
    let (packed, labels) = composite_inputs(&cfg)?;
    let mut worst = 0.0f64;
    for target in [0, 1] {
        let f = |g: &mut Graph<f64>, x: Var| -> Result<Var, TensorError> {
            let vars: Vec<Var> = params
                .tensors()
                .iter()
                .enumerate()
                .map(|(i, t)| if i == target { x } else { g.constant(t.clone()) })
                .collect();
            composite_loss(g, &cfg, &vars, &packed, &labels)
        };
        let err = grad_check_seeded(f, &params.tensors()[target], STEP, sign_flip, None)?;
        worst = worse(worst, err);
    }
    Ok(worst)
}

/// Every primitive by name, then the composite model.
pub fn run_suite(seed: u64, sign_flip: Option<Primitive>) -> Result<SuiteReport, ModelError> {
    let mut checks = Vec::new();
    for p in Primitive::ALL {
        let mut ctx = Ctx {
            rng: ChaCha8Rng::seed_from_u64(seed ^ (p as u64).wrapping_mul(0x9e37_79b9)),
            sign_flip,
            worst: 0.0,
        };
        primitive_check(&mut ctx, p)?;
        checks.push(CheckResult {
            name: p.name().to_string(),
            max_rel_error: ctx.worst,
        });
    }
    checks.push(CheckResult {
        name: COMPOSITE.to_string(),
        max_rel_error: composite_check(seed, sign_flip)?,
    });
    Ok(SuiteReport { checks })
}
