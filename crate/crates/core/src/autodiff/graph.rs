use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Scalar, Tensor, TensorError};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Names of the differentiable primitives, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Primitive {
    MatMul,
    Add,
    AddRow,
    Mul,
    Scale,
    Sum,
    Softmax,
    LayerNorm,
    Gelu,
    Gather,
    SelectRows,
    Dropout,
    Attention,
    CrossEntropy,
    SoftKl,
}

impl Primitive {
    pub const ALL: [Primitive; 15] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::AddRow,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::Sum,
        Primitive::Softmax,
        Primitive::LayerNorm,
        Primitive::Gelu,
        Primitive::Gather,
        Primitive::SelectRows,
        Primitive::Dropout,
        Primitive::Attention,
        Primitive::CrossEntropy,
        Primitive::SoftKl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::AddRow => "add_row",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::Sum => "sum",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::Gelu => "gelu",
            Primitive::Gather => "embedding_gather",
            Primitive::SelectRows => "select_rows",
            Primitive::Dropout => "dropout",
            Primitive::Attention => "attention",
            Primitive::CrossEntropy => "cross_entropy",
            Primitive::SoftKl => "soft_kl",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == name)
    }
}

/// Argument order of the softened KL term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlDirection {
    /// KL(student ∥ teacher).
    #[default]
    StudentTeacher,
    /// KL(teacher ∥ student).
    TeacherStudent,
}

/// Which query rows an attention call produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Queries {
    /// Every row of every sequence.
    All,
    /// Only the final row of each sequence.
    Last,
}

/// One sequence of an attention call: keys `start..end`, queries
/// `first..end`, results written from `out_row`, probabilities stored
/// head by head as `[queries × keys]` blocks from `probs_at`.
#[derive(Debug)]
struct AttnSpan {
    start: usize,
    first: usize,
    end: usize,
    out_row: usize,
    probs_at: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu {
        x: Var,
        /// Φ(x), kept only when a gradient will flow back.
        cdf: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        spans: Vec<AttnSpan>,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    SoftKl {
        student: Var,
        temperature: T,
        direction: KlDirection,
        student_probs: Vec<T>,
        teacher_probs: Vec<T>,
        log_ratio: Vec<T>,
        row_kl: Vec<T>,
    },
}

impl<T> Op<T> {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::AddRow(..) => Primitive::AddRow,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::Sum(..) => Primitive::Sum,
            Op::Softmax { .. } => Primitive::Softmax,
            Op::LayerNorm { .. } => Primitive::LayerNorm,
            Op::Gelu { .. } => Primitive::Gelu,
            Op::Gather { .. } => Primitive::Gather,
            Op::SelectRows { .. } => Primitive::SelectRows,
            Op::Dropout { .. } => Primitive::Dropout,
            Op::Attention { .. } => Primitive::Attention,
            Op::CrossEntropy { .. } => Primitive::CrossEntropy,
            Op::SoftKl { .. } => Primitive::SoftKl,
        })
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Tape of recorded operations.
///
/// Operations are appended in execution order, so every input precedes its
/// consumer. [`Graph::backward`] walks the tape in exact reverse order. Leaf
/// gradients accumulate across calls; interior gradients are rebuilt on every
/// call.
#[derive(Debug)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    training: bool,
    rng: ChaCha8Rng,
    sign_flip: Option<Primitive>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// Numerically stable log-softmax of one row.
fn log_softmax_row<T: Scalar>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for &v in row {
        total += (v - max).exp();
    }
    let lse = max + total.ln();
    for (o, &v) in out.iter_mut().zip(row) {
        *o = v - lse;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            training: false,
            rng: ChaCha8Rng::seed_from_u64(0),
            sign_flip: None,
        }
    }

    /// A graph in training mode; dropout draws from a generator seeded with `seed`.
    pub fn training(seed: u64) -> Self {
        Self {
            training: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
            ..Self::new()
        }
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    /// Negates the backward rule of `primitive`. Only for mutation testing of
    /// the gradient checker.
    #[doc(hidden)]
    pub fn inject_sign_flip(&mut self, primitive: Option<Primitive>) {
        self.sign_flip = primitive;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, `None` if nothing reached this value.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.nodes[v.0].grad.take()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(shape_err("matmul", av.shape(), bv.shape()));
        }
        let out = super::matmul_plain(av, bv)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    /// Adds a row vector `[n]` to every row of `x [.. × n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var, TensorError> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(shape_err("add_row", xv.shape(), bv.shape()));
        }
        let n = bv.len();
        let mut data = xv.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (v, &b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(xv.shape(), data)?;
        Ok(self.push(out, Op::AddRow(x, bias), &[x, bias]))
    }

    /// Elementwise product of equally shaped values.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(shape_err("mul", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(av.shape(), data)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| v * factor).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(out, Op::Scale(x, factor), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    /// Softmax along `axis`, computed with max subtraction. NaN inputs give NaN outputs.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = xv.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..n {
                    max = max.max(src[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..n {
                    out[at(j)] /= total;
                }
            }
        }
        let out = Tensor::new(shape, out)?;
        Ok(self.push(
            out,
            Op::Softmax {
                x,
                outer,
                n,
                inner,
            },
            &[x],
        ))
    }

    /// Per-row normalization over the last axis (population variance), then `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, TensorError> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let d = xv.cols();
        if gv.len() != d || bv.len() != d {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        if eps <= T::zero() {
            return Err(TensorError::Contract("layer_norm eps must be > 0".into()));
        }
        let rows = xv.rows();
        let dn = T::of(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let out = Tensor::new(xv.shape(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let cdf: Vec<T> = xv.data().iter().map(|&v| std_normal_cdf(v)).collect();
        let data = xv.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        let cdf = if self.nodes[x.0].requires_grad { cdf } else { Vec::new() };
        self.push(out, Op::Gelu { x, cdf }, &[x])
    }

    /// Rows of `table [V × d]` at `ids`.
    pub fn embedding_gather(&mut self, table: Var, ids: &[usize]) -> Result<Var, TensorError> {
        let tv = self.value(table);
        if tv.shape().len() != 2 {
            return Err(TensorError::Contract(format!(
                "embedding table must be 2-D, got {:?}",
                tv.shape()
            )));
        }
        if ids.is_empty() {
            return Err(TensorError::Contract("embedding_gather with no ids".into()));
        }
        let (v, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::Index {
                    op: "embedding_gather",
                    index: id,
                    bound: v,
                });
            }
            data.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Rows of a 2-D value, in the given order.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let xv = self.value(x);
        if rows.is_empty() {
            return Err(TensorError::Contract("select_rows with no rows".into()));
        }
        let n = xv.cols();
        let mut data = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            if r >= xv.rows() {
                return Err(TensorError::Index {
                    op: "select_rows",
                    index: r,
                    bound: xv.rows(),
                });
            }
            data.extend_from_slice(xv.row(r));
        }
        let out = Tensor::new(&[rows.len(), n], data)?;
        Ok(self.push(
            out,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Inverted dropout; the identity outside training mode or when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.training || rate <= 0.0 {
            return x;
        }
        let keep = 1.0 - rate;
        let inv = T::of(1.0 / keep);
        let len = self.value(x).len();
        let mask: Vec<T> = (0..len)
            .map(|_| {
                if self.rng.random::<f64>() < keep {
                    inv
                } else {
                    T::zero()
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(xv.shape(), data).expect("same shape");
        self.push(out, Op::Dropout { x, mask }, &[x])
    }

    /// Causal multi-head self-attention over packed sequences.
    ///
    /// `qkv` is `[N × 3D]` with query, key and value blocks side by side. Each
    /// span in `spans` is a contiguous run of rows forming one sequence; a row
    /// attends to itself and the rows before it in its span. The result is
    /// `[N × D]` for [`Queries::All`] or `[spans × D]` for [`Queries::Last`].
    pub fn attention(
        &mut self,
        qkv: Var,
        spans: &[Range<usize>],
        heads: usize,
        queries: Queries,
    ) -> Result<Var, TensorError> {
        let qv = self.value(qkv);
        let width = qv.cols();
        if qv.shape().len() != 2 || width % 3 != 0 || heads == 0 || (width / 3) % heads != 0 {
            return Err(TensorError::Contract(format!(
                "attention expects [N x 3D] with D divisible by {heads} heads, got {:?}",
                qv.shape()
            )));
        }
        let rows = qv.rows();
        let mut prev_end = 0;
        for s in spans {
            if s.start >= s.end || s.end > rows || s.start < prev_end {
                return Err(TensorError::Contract(format!(
                    "attention span {s:?} invalid for {rows} rows"
                )));
            }
            prev_end = s.end;
        }
        if spans.is_empty() {
            return Err(TensorError::Contract("attention with no sequences".into()));
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let src = qv.data();

        let mut plan = Vec::with_capacity(spans.len());
        let (mut out_rows, mut probs_len) = (0, 0);
        for s in spans {
            let first = match queries {
                Queries::All => s.start,
                Queries::Last => s.end - 1,
            };
            plan.push(AttnSpan {
                start: s.start,
                first,
                end: s.end,
                out_row: out_rows,
                probs_at: probs_len,
            });
            out_rows += s.end - first;
            probs_len += heads * (s.end - first) * s.len();
        }

        let w = width as isize;
        let mut out = vec![T::zero(); out_rows * d];
        let mut probs = vec![T::zero(); probs_len];
        for sp in &plan {
            let (m, n) = (sp.end - sp.first, sp.end - sp.start);
            for h in 0..heads {
                let p = &mut probs[sp.probs_at + h * m * n..sp.probs_at + (h + 1) * m * n];
                let q = &src[sp.first * width + h * dh..];
                let k = &src[sp.start * width + d + h * dh..];
                let v = &src[sp.start * width + 2 * d + h * dh..];
                // S = Q Kᵀ
                T::gemm(m, dh, n, (q, w, 1), (k, 1, w), T::zero(), (p, n as isize, 1));
                for (i, row) in p.chunks_exact_mut(n).enumerate() {
                    let visible = sp.first - sp.start + i + 1;
                    let (live, masked) = row.split_at_mut(visible);
                    masked.fill(T::zero());
                    let mut max = T::neg_infinity();
                    for x in live.iter_mut() {
                        *x *= scale;
                        max = max.max(*x);
                    }
                    let mut total = T::zero();
                    for x in live.iter_mut() {
                        *x = (*x - max).exp();
                        total += *x;
                    }
                    for x in live.iter_mut() {
                        *x /= total;
                    }
                }
                // O = P V
                let o = &mut out[sp.out_row * d + h * dh..];
                T::gemm(m, n, dh, (p, n as isize, 1), (v, w, 1), T::zero(), (o, d as isize, 1));
            }
        }
        let out = Tensor::new(&[out_rows, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                heads,
                spans: plan,
                probs,
            },
            &[qkv],
        ))
    }

    /// Mean cross-entropy of `logits [B × C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, TensorError> {
        let lv = self.value(logits);
        let (b, c) = (lv.rows(), lv.cols());
        if labels.len() != b {
            return Err(shape_err("cross_entropy", lv.shape(), &[labels.len()]));
        }
        let mut probs = vec![T::zero(); b * c];
        let mut total = T::zero();
        for (r, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(TensorError::Index {
                    op: "cross_entropy",
                    index: y,
                    bound: c,
                });
            }
            let logp = &mut probs[r * c..(r + 1) * c];
            log_softmax_row(lv.row(r), logp);
            total -= logp[y];
            for v in logp.iter_mut() {
                *v = v.exp();
            }
        }
        let loss = total / T::of(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Batch mean of the KL divergence between temperature-softened
    /// distributions of `student` and the fixed `teacher` logits.
    ///
    /// The teacher is a plain tensor, so no gradient can flow into it.
    pub fn soft_kl(
        &mut self,
        student: Var,
        teacher: &Tensor<T>,
        temperature: T,
        direction: KlDirection,
    ) -> Result<Var, TensorError> {
        let sv = self.value(student);
        if sv.shape() != teacher.shape() {
            return Err(shape_err("soft_kl", sv.shape(), teacher.shape()));
        }
        if temperature <= T::zero() {
            return Err(TensorError::Contract("temperature must be > 0".into()));
        }
        let (b, c) = (sv.rows(), sv.cols());
        let mut student_probs = vec![T::zero(); b * c];
        let mut teacher_probs = vec![T::zero(); b * c];
        let mut log_ratio = vec![T::zero(); b * c];
        let mut row_kl = vec![T::zero(); b];
        let mut scaled = vec![T::zero(); c];
        let mut log_s = vec![T::zero(); c];
        let mut log_t = vec![T::zero(); c];
        let mut total = T::zero();
        for r in 0..b {
            for (o, &v) in scaled.iter_mut().zip(sv.row(r)) {
                *o = v / temperature;
            }
            log_softmax_row(&scaled, &mut log_s);
            for (o, &v) in scaled.iter_mut().zip(teacher.row(r)) {
                *o = v / temperature;
            }
            log_softmax_row(&scaled, &mut log_t);
            let mut kl = T::zero();
            for j in 0..c {
                let (ps, pt) = (log_s[j].exp(), log_t[j].exp());
                student_probs[r * c + j] = ps;
                teacher_probs[r * c + j] = pt;
                let lr = log_s[j] - log_t[j];
                log_ratio[r * c + j] = lr;
                kl += match direction {
                    KlDirection::StudentTeacher => ps * lr,
                    KlDirection::TeacherStudent => -pt * lr,
                };
            }
            row_kl[r] = kl;
            total += kl;
        }
        let loss = total / T::of(b as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftKl {
                student,
                temperature,
                direction,
                student_probs,
                teacher_probs,
                log_ratio,
                row_kl,
            },
            &[student],
        ))
    }

    /// Reverse pass from a scalar `loss`.
    ///
    /// Gradients of leaves that require them are accumulated (added to any
    /// gradient already present); call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for node in &mut self.nodes[..=loss.0] {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        accumulate(&mut self.nodes, loss, &[T::one()]);

        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &mut rest[0];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(mut gout) = node.grad.take() else {
                continue;
            };
            if self.sign_flip.is_some() && node.op.primitive() == self.sign_flip {
                for g in gout.iter_mut() {
                    *g = -*g;
                }
            }
            backward_op(&node.op, &node.value, &gout, before);
            node.grad = Some(gout);
        }
        Ok(())
    }
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub(crate) fn std_normal_cdf<T: Scalar>(x: T) -> T {
    let half = T::of(0.5);
    half * (T::one() + (x * T::of(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn std_normal_pdf<T: Scalar>(x: T) -> T {
    T::of(0.398_942_280_401_432_7) * (-(x * x) * T::of(0.5)).exp()
}

/// Gradient buffer of `v`, allocated on first use; `None` if `v` needs no gradient.
fn grad_buf<T: Scalar>(nodes: &mut [Node<T>], v: Var) -> Option<&mut Vec<T>> {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(node.grad.get_or_insert_with(|| vec![T::zero(); len]))
}

/// Value of `src` next to the gradient buffer of `dst`, if `dst` needs one.
/// When `src == dst` the value is read while its own gradient is written.
fn value_and_grad<T: Scalar>(nodes: &mut [Node<T>], src: Var, dst: Var) -> Option<(&[T], &mut [T])> {
    if !nodes[dst.0].requires_grad {
        return None;
    }
    let len = nodes[dst.0].value.len();
    let (sv, dn) = if src.0 == dst.0 {
        let Node { value, grad, .. } = &mut nodes[dst.0];
        (&*value, grad)
    } else if src.0 < dst.0 {
        let (lo, hi) = nodes.split_at_mut(dst.0);
        (&lo[src.0].value, &mut hi[0].grad)
    } else {
        let (lo, hi) = nodes.split_at_mut(src.0);
        (&hi[0].value, &mut lo[dst.0].grad)
    };
    Some((sv.data(), dn.get_or_insert_with(|| vec![T::zero(); len])))
}

fn accumulate<T: Scalar>(nodes: &mut [Node<T>], v: Var, g: &[T]) {
    if let Some(buf) = grad_buf(nodes, v) {
        for (b, &x) in buf.iter_mut().zip(g) {
            *b += x;
        }
    }
}

fn backward_op<T: Scalar>(op: &Op<T>, out: &Tensor<T>, gout: &[T], nodes: &mut [Node<T>]) {
    match op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
            let n = nodes[b.0].value.shape()[1];
            let (ki, ni) = (k as isize, n as isize);
            if let Some((bv, da)) = value_and_grad(nodes, *b, *a) {
                // dA[m×k] += G[m×n] · Bᵀ
                T::gemm(m, n, k, (gout, ni, 1), (bv, 1, ni), T::one(), (da, ki, 1));
            }
            if let Some((av, db)) = value_and_grad(nodes, *a, *b) {
                // dB[k×n] += Aᵀ · G
                T::gemm(k, m, n, (av, 1, ki), (gout, ni, 1), T::one(), (db, ni, 1));
            }
        }
        Op::Add(a, b) => {
            accumulate(nodes, *a, gout);
            accumulate(nodes, *b, gout);
        }
        Op::AddRow(x, bias) => {
            accumulate(nodes, *x, gout);
            if let Some(db) = grad_buf(nodes, *bias) {
                let n = db.len();
                for row in gout.chunks_exact(n) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d += g;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let bv: Vec<T> = gout
                .iter()
                .zip(nodes[b.0].value.data())
                .map(|(&g, &y)| g * y)
                .collect();
            let av: Vec<T> = gout
                .iter()
                .zip(nodes[a.0].value.data())
                .map(|(&g, &x)| g * x)
                .collect();
            accumulate(nodes, *a, &bv);
            accumulate(nodes, *b, &av);
        }
        Op::Scale(x, f) => {
            if let Some(dx) = grad_buf(nodes, *x) {
                for (d, &g) in dx.iter_mut().zip(gout) {
                    *d += g * *f;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = grad_buf(nodes, *x) {
                for d in dx.iter_mut() {
                    *d += gout[0];
                }
            }
        }
        Op::Softmax { x, outer, n, inner } => {
            let y = out.data();
            if let Some(dx) = grad_buf(nodes, *x) {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let mut dotp = T::zero();
                        for j in 0..*n {
                            dotp += y[at(j)] * gout[at(j)];
                        }
                        for j in 0..*n {
                            dx[at(j)] += y[at(j)] * (gout[at(j)] - dotp);
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let d = nodes[gamma.0].value.len();
            let rows = rstd.len();
            if let Some(dg) = grad_buf(nodes, *gamma) {
                for r in 0..rows {
                    for j in 0..d {
                        dg[j] += gout[r * d + j] * xhat[r * d + j];
                    }
                }
            }
            if let Some(db) = grad_buf(nodes, *beta) {
                for r in 0..rows {
                    for j in 0..d {
                        db[j] += gout[r * d + j];
                    }
                }
            }
            if nodes[x.0].requires_grad {
                let gamma_v = nodes[gamma.0].value.data().to_vec();
                let dx = grad_buf(nodes, *x).unwrap();
                let dn = T::of(d as f64);
                let mut dxhat = vec![T::zero(); d];
                for r in 0..rows {
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for j in 0..d {
                        dxhat[j] = gout[r * d + j] * gamma_v[j];
                        mean_d += dxhat[j];
                        mean_dx += dxhat[j] * xhat[r * d + j];
                    }
                    mean_d /= dn;
                    mean_dx /= dn;
                    for j in 0..d {
                        dx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - xhat[r * d + j] * mean_dx);
                    }
                }
            }
        }
        Op::Gelu { x, cdf } => {
            if let Some((xs, dx)) = value_and_grad(nodes, *x, *x) {
                for (((d, &g), &v), &c) in dx.iter_mut().zip(gout).zip(xs).zip(cdf) {
                    *d += g * (c + v * std_normal_pdf(v));
                }
            }
        }
        Op::Gather { table, ids } => {
            if let Some(dt) = grad_buf(nodes, *table) {
                let d = gout.len() / ids.len();
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += gout[i * d + j];
                    }
                }
            }
        }
        Op::SelectRows { x, rows } => {
            if let Some(dx) = grad_buf(nodes, *x) {
                let n = gout.len() / rows.len();
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..n {
                        dx[r * n + j] += gout[i * n + j];
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(dx) = grad_buf(nodes, *x) {
                for ((d, &g), &m) in dx.iter_mut().zip(gout).zip(mask) {
                    *d += g * m;
                }
            }
        }
        Op::Attention {
            qkv,
            heads,
            spans,
            probs,
        } => {
            let width = nodes[qkv.0].value.cols();
            let Some((src, dqkv)) = value_and_grad(nodes, *qkv, *qkv) else {
                return;
            };
            let d = width / 3;
            let dh = d / heads;
            let scale = T::one() / T::of(dh as f64).sqrt();
            let w = width as isize;
            let mut ds = Vec::new();
            for sp in spans {
                let (m, n) = (sp.end - sp.first, sp.end - sp.start);
                ds.resize(m * n, T::zero());
                let ni = n as isize;
                for h in 0..*heads {
                    let p = &probs[sp.probs_at + h * m * n..sp.probs_at + (h + 1) * m * n];
                    let go = &gout[sp.out_row * d + h * dh..];
                    let (qo, ko, vo) = (
                        sp.first * width + h * dh,
                        sp.start * width + d + h * dh,
                        sp.start * width + 2 * d + h * dh,
                    );
                    let gd = (go, d as isize, 1);
                    // dP = dO Vᵀ, dV += Pᵀ dO
                    T::gemm(m, dh, n, gd, (&src[vo..], 1, w), T::zero(), (&mut ds, ni, 1));
                    T::gemm(n, m, dh, (p, 1, ni), gd, T::one(), (&mut dqkv[vo..], w, 1));
                    for (dr, pr) in ds.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                        let weighted = dot(dr, pr);
                        for (x, &pj) in dr.iter_mut().zip(pr) {
                            *x = pj * (*x - weighted) * scale;
                        }
                    }
                    // dQ += dS K, dK += dSᵀ Q
                    T::gemm(m, n, dh, (&ds, ni, 1), (&src[ko..], w, 1), T::one(), (&mut dqkv[qo..], w, 1));
                    T::gemm(n, m, dh, (&ds, 1, ni), (&src[qo..], w, 1), T::one(), (&mut dqkv[ko..], w, 1));
                }
            }
        }
        Op::CrossEntropy {
            logits,
            labels,
            probs,
        } => {
            if let Some(dl) = grad_buf(nodes, *logits) {
                let b = labels.len();
                let c = probs.len() / b;
                let f = gout[0] / T::of(b as f64);
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == y { T::one() } else { T::zero() };
                        dl[r * c + j] += (probs[r * c + j] - target) * f;
                    }
                }
            }
        }
        Op::SoftKl {
            student,
            temperature,
            direction,
            student_probs,
            teacher_probs,
            log_ratio,
            row_kl,
        } => {
            if let Some(ds) = grad_buf(nodes, *student) {
                let b = row_kl.len();
                let c = student_probs.len() / b;
                let f = gout[0] / (T::of(b as f64) * *temperature);
                for r in 0..b {
                    for j in 0..c {
                        let i = r * c + j;
                        let g = match direction {
                            KlDirection::StudentTeacher => {
                                student_probs[i] * (log_ratio[i] - row_kl[r])
                            }
                            KlDirection::TeacherStudent => student_probs[i] - teacher_probs[i],
                        };
                        ds[i] += g * f;
                    }
                }
            }
        }
    }
}
