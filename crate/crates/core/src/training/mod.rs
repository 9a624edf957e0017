//! Supervised training, distillation and the Adam optimizer.

mod optim;
#[cfg(test)]
mod tests;

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use optim::{clip_global_norm, Adam, OptimizerState, BETA1, BETA2, EPSILON};

use crate::autodiff::{Graph, KlDirection, Scalar, Tensor, TensorError, Var};
use crate::data::TrafficRecord;
use crate::model::{
    build, forward, init_params, load_params, prompt_ids, ModelConfig, ModelError, Packed,
    ParameterSet, INFER_CHUNK,
};
use crate::tokenizer::pad_batch;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0}")]
    Contract(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Weight of the soft term in the distillation loss.
    pub alpha: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Global gradient-norm threshold; 0 disables clipping.
    pub clip_norm: f64,
    pub kl_direction: KlDirection,
    /// Print one line per epoch to stderr.
    pub progress: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 32,
            learning_rate: 3e-4,
            alpha: 0.5,
            temperature: 2.0,
            seed: 0,
            clip_norm: 1.0,
            kl_direction: KlDirection::StudentTeacher,
            progress: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be >= 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be >= 1");
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and >= 0");
        }
        check_alpha_tau(self.alpha, self.temperature)?;
        if !(self.clip_norm >= 0.0) {
            return bad("clip_norm must be >= 0");
        }
        Ok(())
    }
}

fn check_alpha_tau(alpha: f64, tau: f64) -> Result<(), TrainError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(TrainError::Contract(format!("alpha {alpha} outside [0, 1]")));
    }
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(TrainError::Contract(format!("temperature {tau} must be > 0")));
    }
    Ok(())
}

/// One tokenized prompt and its class index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<u32>,
    pub label: usize,
}

/// Tokenizes `records` and labels each with `label_of`.
pub fn make_examples<F>(records: &[TrafficRecord], cfe: bool, mut label_of: F) -> Result<Vec<Example>, TrainError>
where
    F: FnMut(&TrafficRecord) -> Option<usize>,
{
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let label = label_of(r).ok_or_else(|| {
                TrainError::Contract(format!(
                    "record {i}: label `{}` of task `{}` is not in the label space",
                    r.label, r.task_id
                ))
            })?;
            Ok(Example {
                ids: prompt_ids(r, cfe),
                label,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub accuracy: f64,
}

/// Writes the trace as tab-separated `epoch  mean_loss  accuracy` lines.
pub fn write_loss_trace<W: Write>(out: &mut W, trace: &[EpochStats]) -> std::io::Result<()> {
    writeln!(out, "epoch\tmean_loss\taccuracy")?;
    for s in trace {
        writeln!(out, "{}\t{:.6}\t{:.6}", s.epoch, s.mean_loss, s.accuracy)?;
    }
    Ok(())
}

/// Mean cross-entropy of `logits [B × C]` against `labels`.
pub fn ce_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var, TrainError> {
    Ok(g.cross_entropy(logits, labels)?)
}

/// `(1−α)·CE(student, labels) + α·τ²·KL(P_S^τ ∥ P_T^τ)`, batch mean, with
/// the KL arguments swapped for [`KlDirection::TeacherStudent`].
///
/// A zero weight drops its term entirely, so `α = 0` is the cross-entropy
/// bit for bit.
pub fn distill_loss<T: Scalar>(
    g: &mut Graph<T>,
    student: Var,
    teacher: &Tensor<T>,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
    direction: KlDirection,
) -> Result<Var, TrainError> {
    check_alpha_tau(alpha, temperature)?;
    if g.value(student).shape() != teacher.shape() {
        return Err(TrainError::Contract(format!(
            "student logits {:?} vs teacher logits {:?}",
            g.value(student).shape(),
            teacher.shape()
        )));
    }
    let hard = if alpha < 1.0 {
        let ce = g.cross_entropy(student, labels)?;
        Some(if alpha == 0.0 { ce } else { g.scale(ce, T::of(1.0 - alpha)) })
    } else {
        None
    };
    if alpha == 0.0 {
        return Ok(hard.expect("alpha < 1"));
    }
    let kl = g.soft_kl(student, teacher, T::of(temperature), direction)?;
    let soft = g.scale(kl, T::of(alpha * temperature * temperature));
    Ok(match hard {
        Some(h) => g.add(h, soft)?,
        None => soft,
    })
}

/// Scalar value of [`ce_loss`] on plain tensors.
pub fn ce_loss_value(logits: &Tensor<f64>, labels: &[usize]) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let z = g.constant(logits.clone());
    let l = ce_loss(&mut g, z, labels)?;
    Ok(g.value(l).item())
}

/// Scalar value of [`distill_loss`] on plain tensors.
pub fn distill_loss_value(
    student: &Tensor<f64>,
    teacher: &Tensor<f64>,
    labels: &[usize],
    alpha: f64,
    temperature: f64,
    direction: KlDirection,
) -> Result<f64, TrainError> {
    let mut g = Graph::new();
    let z = g.constant(student.clone());
    let l = distill_loss(&mut g, z, teacher, labels, alpha, temperature, direction)?;
    Ok(g.value(l).item())
}

/// Mini-batch loop shared by supervised training and distillation.
fn fit(
    mut params: ParameterSet,
    data: &[Example],
    teacher_logits: Option<&[Vec<f32>]>,
    cfg: &TrainConfig,
) -> Result<(ParameterSet, Vec<EpochStats>), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::Contract("no training examples".into()));
    }
    let mcfg = params.config().clone();
    if let Some(e) = data.iter().find(|e| e.label >= mcfg.n_classes) {
        return Err(TrainError::Contract(format!(
            "label {} outside the {}-class head",
            e.label, mcfg.n_classes
        )));
    }
    let mut opt = Adam::new(&params, cfg.learning_rate, cfg.clip_norm);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    let mut step: u64 = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let seqs: Vec<Vec<u32>> = chunk.iter().map(|&i| data[i].ids.clone()).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let batch = pad_batch(&seqs, mcfg.max_seq).map_err(ModelError::from)?;
            let packed = Packed::new(&batch, &mcfg)?;
            let mut g = Graph::<f32>::training(cfg.seed ^ step.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let vars = load_params(&mut g, &params, true);
            let out = build(&mut g, &mcfg, &vars, &packed)?;
            let loss = match teacher_logits {
                None => ce_loss(&mut g, out.logits, &labels)?,
                Some(all) => {
                    let c = mcfg.n_classes;
                    let mut flat = Vec::with_capacity(chunk.len() * c);
                    for &i in chunk {
                        flat.extend_from_slice(&all[i]);
                    }
                    let teacher = Tensor::new(&[chunk.len(), c], flat)?;
                    distill_loss(
                        &mut g,
                        out.logits,
                        &teacher,
                        &labels,
                        cfg.alpha,
                        cfg.temperature,
                        cfg.kl_direction,
                    )?
                }
            };
            g.backward(loss)?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(TrainError::Contract(format!(
                    "loss diverged to {value} at epoch {epoch}, step {step}"
                )));
            }
            loss_sum += value * chunk.len() as f64;
            let logits = g.value(out.logits);
            correct += labels
                .iter()
                .enumerate()
                .filter(|&(r, &y)| crate::model::argmax(logits.row(r)) == y)
                .count();
            let grads: Vec<Vec<f32>> = vars
                .iter()
                .zip(params.tensors())
                .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| vec![0.0; t.len()]))
                .collect();
            opt.step(&mut params, &grads);
            step += 1;
        }
        let stats = EpochStats {
            epoch,
            mean_loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        };
        if cfg.progress {
            eprintln!(
                "epoch {epoch}/{}: loss {:.5} train acc {:.4}",
                cfg.epochs, stats.mean_loss, stats.accuracy
            );
        }
        trace.push(stats);
    }
    Ok((params, trace))
}

/// Trains a fresh model (weights seeded by `model_cfg.seed`) on cross-entropy.
pub fn train_supervised(
    data: &[Example],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(ParameterSet, Vec<EpochStats>), TrainError> {
    let params = init_params(model_cfg, model_cfg.seed)?;
    fit(params, data, None, cfg)
}

/// Logits of a frozen model for every example, in inference mode.
pub fn teacher_logits(teacher: &ParameterSet, data: &[Example]) -> Result<Vec<Vec<f32>>, TrainError> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(INFER_CHUNK) {
        let seqs: Vec<Vec<u32>> = chunk.iter().map(|e| e.ids.clone()).collect();
        let batch = pad_batch(&seqs, teacher.config().max_seq).map_err(ModelError::from)?;
        let z = forward(teacher, &batch)?;
        out.extend((0..z.rows()).map(|r| z.row(r).to_vec()));
    }
    Ok(out)
}

/// Trains `student` against the detached outputs of `teacher`.
pub fn distill(
    teacher: &ParameterSet,
    student: ParameterSet,
    data: &[Example],
    cfg: &TrainConfig,
) -> Result<(ParameterSet, Vec<EpochStats>), TrainError> {
    let (t, s) = (teacher.config(), student.config());
    if t.vocab_size != s.vocab_size || t.max_seq != s.max_seq || t.n_classes != s.n_classes {
        return Err(TrainError::Contract(format!(
            "teacher (V={}, S={}, C={}) and student (V={}, S={}, C={}) disagree",
            t.vocab_size, t.max_seq, t.n_classes, s.vocab_size, s.max_seq, s.n_classes
        )));
    }
    let logits = teacher_logits(teacher, data)?;
    fit(student, data, Some(&logits), cfg)
}

/// Fraction of `data` the model labels correctly.
pub fn accuracy(params: &ParameterSet, data: &[Example]) -> Result<f64, TrainError> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let logits = teacher_logits(params, data)?;
    let hits = logits
        .iter()
        .zip(data)
        .filter(|(z, e)| crate::model::argmax(z) == e.label)
        .count();
    Ok(hits as f64 / data.len() as f64)
}
