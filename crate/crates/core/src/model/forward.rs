use std::ops::Range;

use super::params::{block, head, layer_base, ln_f, WPE, WTE};
use super::{ModelConfig, ModelError, ParameterSet};
use crate::autodiff::{Graph, Queries, Scalar, Tensor, Var};
use crate::data::{render_prompt, TrafficRecord};
use crate::tokenizer::{self, PaddedBatch};

pub const LN_EPS: f64 = 1e-5;

/// Real tokens of a padded batch laid end to end.
///
/// Only positions `≤ last` with mask 1 are kept, each with its original
/// position id, so pads never enter the computation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Packed {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub spans: Vec<Range<usize>>,
}

impl Packed {
    pub fn new(batch: &PaddedBatch, cfg: &ModelConfig) -> Result<Self, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Contract("empty batch".into()));
        }
        if batch.mask.len() != batch.len() || batch.last.len() != batch.len() {
            return Err(ModelError::Contract("ids, mask and last differ in length".into()));
        }
        let mut packed = Packed {
            ids: Vec::new(),
            positions: Vec::new(),
            spans: Vec::with_capacity(batch.len()),
        };
        for (row, ((ids, mask), &last)) in batch.ids.iter().zip(&batch.mask).zip(&batch.last).enumerate() {
            if last >= ids.len() || mask.len() != ids.len() {
                return Err(ModelError::Contract(format!(
                    "row {row}: last index {last} outside width {}",
                    ids.len()
                )));
            }
            if last >= cfg.max_seq {
                return Err(ModelError::Contract(format!(
                    "row {row}: position {last} exceeds max_seq {}",
                    cfg.max_seq
                )));
            }
            if mask[last] == 0 {
                return Err(ModelError::Contract(format!("row {row}: last index {last} is masked")));
            }
            let start = packed.ids.len();
            for pos in 0..=last {
                if mask[pos] == 0 {
                    continue;
                }
                let id = ids[pos] as usize;
                if id >= cfg.vocab_size {
                    return Err(ModelError::Contract(format!(
                        "row {row}: token id {id} outside vocabulary of {}",
                        cfg.vocab_size
                    )));
                }
                packed.ids.push(id);
                packed.positions.push(pos);
            }
            packed.spans.push(start..packed.ids.len());
        }
        Ok(packed)
    }
}

/// Token ids of the prompt for `record`, framed by BOS and EOS.
pub fn prompt_ids(record: &TrafficRecord, cfe: bool) -> Vec<u32> {
    tokenizer::encode(render_prompt(record, cfe).as_bytes(), true, true)
}

pub fn encode_records<'a, I>(records: I, cfe: bool, max_seq: usize) -> Result<PaddedBatch, ModelError>
where
    I: IntoIterator<Item = &'a TrafficRecord>,
{
    let seqs: Vec<Vec<u32>> = records.into_iter().map(|r| prompt_ids(r, cfe)).collect();
    Ok(tokenizer::pad_batch(&seqs, max_seq)?)
}

/// Registers every tensor of `params` on `g`, trainable or frozen.
pub fn load_params<T: Scalar>(g: &mut Graph<T>, params: &ParameterSet<T>, trainable: bool) -> Vec<Var> {
    params
        .tensors()
        .iter()
        .map(|t| g.leaf(t.clone(), trainable))
        .collect()
}

/// Handles of the final hidden state `[B × D]` and the logits `[B × C]`.
#[derive(Clone, Copy, Debug)]
pub struct Outputs {
    pub hidden: Var,
    pub logits: Var,
}

fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let y = g.matmul(x, w)?;
    Ok(g.add_row(y, b)?)
}

/// Records the classifier on `g`.
///
/// Pre-norm blocks (`x + attn(ln_1(x))`, then `x + mlp(ln_2(x))`); the last
/// block only computes the rows of each sequence's final token, which is all
/// the head reads. Dropout follows the embedding sum and both residual
/// branches and is active only when `g` is in training mode.
pub fn build<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ModelConfig,
    vars: &[Var],
    packed: &Packed,
) -> Result<Outputs, ModelError> {
    let eps = T::of(LN_EPS);
    let tok = g.embedding_gather(vars[WTE], &packed.ids)?;
    let pos = g.embedding_gather(vars[WPE], &packed.positions)?;
    let mut x = g.add(tok, pos)?;
    x = g.dropout(x, cfg.dropout);
    let finals: Vec<usize> = packed.spans.iter().map(|s| s.end - 1).collect();
    for l in 0..cfg.n_layers {
        let p = &vars[layer_base(l)..layer_base(l) + super::params::PER_LAYER];
        let last_layer = l + 1 == cfg.n_layers;
        let h = g.layer_norm(x, p[block::LN1_W], p[block::LN1_B], eps)?;
        let qkv = linear(g, h, p[block::ATTN_W], p[block::ATTN_B])?;
        let queries = if last_layer { Queries::Last } else { Queries::All };
        let a = g.attention(qkv, &packed.spans, cfg.n_heads, queries)?;
        let a = linear(g, a, p[block::PROJ_W], p[block::PROJ_B])?;
        let a = g.dropout(a, cfg.dropout);
        if last_layer {
            x = g.select_rows(x, &finals)?;
        }
        x = g.add(x, a)?;
        let h = g.layer_norm(x, p[block::LN2_W], p[block::LN2_B], eps)?;
        let m = linear(g, h, p[block::FC_W], p[block::FC_B])?;
        let m = g.gelu(m);
        let m = linear(g, m, p[block::OUT_W], p[block::OUT_B])?;
        let m = g.dropout(m, cfg.dropout);
        x = g.add(x, m)?;
    }
    let f = ln_f(cfg);
    let hidden = g.layer_norm(x, vars[f], vars[f + 1], eps)?;
    let h = head(cfg);
    let logits = linear(g, hidden, vars[h], vars[h + 1])?;
    Ok(Outputs { hidden, logits })
}

/// Inference pass returning `(hidden [B × D], logits [B × C])`.
pub fn forward_with_hidden<T: Scalar>(
    params: &ParameterSet<T>,
    batch: &PaddedBatch,
) -> Result<(Tensor<T>, Tensor<T>), ModelError> {
    let packed = Packed::new(batch, params.config())?;
    let mut g = Graph::new();
    let vars = load_params(&mut g, params, false);
    let out = build(&mut g, params.config(), &vars, &packed)?;
    Ok((g.value(out.hidden).clone(), g.value(out.logits).clone()))
}

/// Class logits `[B × C]` read at each row's final real token.
pub fn forward<T: Scalar>(params: &ParameterSet<T>, batch: &PaddedBatch) -> Result<Tensor<T>, ModelError> {
    Ok(forward_with_hidden(params, batch)?.1)
}

/// Pre-head hidden state `[B × D]` at each row's final real token.
pub fn hidden_at_final<T: Scalar>(params: &ParameterSet<T>, batch: &PaddedBatch) -> Result<Tensor<T>, ModelError> {
    Ok(forward_with_hidden(params, batch)?.0)
}

/// Records per inference pass in [`infer_records`].
pub const INFER_CHUNK: usize = 64;

/// Hidden states and logits for `records`, computed in chunks.
pub fn infer_records(
    params: &ParameterSet,
    records: &[TrafficRecord],
    cfe: bool,
) -> Result<(Vec<Vec<f32>>, Vec<Vec<f32>>), ModelError> {
    let mut hidden = Vec::with_capacity(records.len());
    let mut logits = Vec::with_capacity(records.len());
    for chunk in records.chunks(INFER_CHUNK) {
        let batch = encode_records(chunk, cfe, params.config().max_seq)?;
        let (h, z) = forward_with_hidden(params, &batch)?;
        for r in 0..h.rows() {
            hidden.push(h.row(r).to_vec());
            logits.push(z.row(r).to_vec());
        }
    }
    Ok((hidden, logits))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: Scalar>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_row(values: &[f32]) -> Vec<f32> {
    let max = values.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exp: Vec<f32> = values.iter().map(|&v| (v - max).exp()).collect();
    let total: f32 = exp.iter().sum();
    exp.into_iter().map(|v| v / total).collect()
}
