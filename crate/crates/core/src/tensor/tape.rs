use super::kernels::gemm;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Mean,
    Max,
}

/// Every differentiable operation the tape knows how to record.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    MatMul,
    MatMulNt,
    Linear,
    Add,
    Sub,
    Mul,
    Scale,
    Relu,
    Softmax,
    LayerNorm,
    Concat,
    ReduceMean,
    ReduceMax,
    Gather,
    Reshape,
    Sum,
    MaskedFill,
    CrossEntropy,
}

impl OpKind {
    pub const ALL: [OpKind; 18] = [
        OpKind::MatMul,
        OpKind::MatMulNt,
        OpKind::Linear,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Relu,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Concat,
        OpKind::ReduceMean,
        OpKind::ReduceMax,
        OpKind::Gather,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::MaskedFill,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::MatMulNt => "matmul_nt",
            OpKind::Linear => "linear",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Relu => "relu",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Concat => "concat",
            OpKind::ReduceMean => "reduce_mean",
            OpKind::ReduceMax => "reduce_max",
            OpKind::Gather => "gather",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::MaskedFill => "masked_fill",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        rhs_t: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        din: usize,
        dout: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax {
        x: Var,
        cols: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        cols: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        inputs: Vec<Var>,
        widths: Vec<usize>,
    },
    Reduce {
        x: Var,
        mode: ReduceMode,
        outer: usize,
        len: usize,
        inner: usize,
        mask: Option<Vec<bool>>,
        // Max: flat source index per output; Mean: valid count per outer slot.
        aux: Vec<usize>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
        cols: usize,
    },
    Reshape(Var),
    Sum(Var),
    MaskedFill {
        x: Var,
        fill: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        cols: usize,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul { rhs_t: false, .. } => OpKind::MatMul,
            Op::MatMul { rhs_t: true, .. } => OpKind::MatMulNt,
            Op::Linear { .. } => OpKind::Linear,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Relu(..) => OpKind::Relu,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Reduce {
                mode: ReduceMode::Mean,
                ..
            } => OpKind::ReduceMean,
            Op::Reduce {
                mode: ReduceMode::Max,
                ..
            } => OpKind::ReduceMax,
            Op::Gather { .. } => OpKind::Gather,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Sum(..) => OpKind::Sum,
            Op::MaskedFill { .. } => OpKind::MaskedFill,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Execution record for one forward/backward pass.
///
/// Nodes are appended in execution order, so every input precedes the
/// operations that consume it. The tape is meant to be dropped after
/// [`Tape::backward`]; build a fresh one per step.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    fault: Option<OpKind>,
}

fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::Shape {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Test fixture: scales the gradient rule of `kind` by 1.5 so harnesses
    /// can demonstrate that they detect a broken rule.
    #[doc(hidden)]
    pub fn with_fault(kind: OpKind) -> Self {
        Self {
            fault: Some(kind),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers an input. Its `requires_grad` flag decides whether a
    /// gradient is accumulated for it.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let rg = tensor.requires_grad();
        let mut value = tensor;
        value.zero_grad();
        self.push(value, Op::Leaf, rg)
    }

    /// Registers a non-differentiable input.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let value = tensor.with_requires_grad(false);
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn op_kind(&self, v: Var) -> Option<OpKind> {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v` (zeros if `v` was unreachable).
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let value = self.value(v);
        let data = self
            .grad(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; value.len()]);
        Tensor::new(value.shape().to_vec(), data).expect("gradient matches value shape")
    }

    // ---------------------------------------------------------------- ops

    /// Matrix product. Rank-2 operands multiply directly; rank-3 operands
    /// are multiplied batch by batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` (batched for rank-3 operands).
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, rhs_t: bool) -> Result<Var> {
        let op = if rhs_t { "matmul_nt" } else { "matmul" };
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (batch, m, k, kb, n, out_shape) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [x, y]) => {
                let (kb, n) = if rhs_t { (*y, *x) } else { (*x, *y) };
                (1, *m, *k, kb, n, vec![*m, n])
            }
            ([ba, m, k], [bb, x, y]) if ba == bb => {
                let (kb, n) = if rhs_t { (*y, *x) } else { (*x, *y) };
                (*ba, *m, *k, kb, n, vec![*ba, *m, n])
            }
            _ => return Err(shape_err(op, &sa, &sb)),
        };
        if k != kb {
            return Err(shape_err(op, &sa, &sb));
        }
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &av[bi * m * k..(bi + 1) * m * k],
                    false,
                    &bv[bi * k * n..(bi + 1) * k * n],
                    rhs_t,
                    0.0,
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                rhs_t,
            },
            rg,
        ))
    }

    /// `x · wᵀ + b` applied to every row of `x` (`x` is `[..., din]`,
    /// `w` is `[dout, din]`, `b` is `[dout]`).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (dout, din) = match sw.as_slice() {
            [o, i] => (*o, *i),
            _ => return Err(shape_err("linear", &sx, &sw)),
        };
        if sx.last() != Some(&din) {
            return Err(shape_err("linear", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(shape_err("linear", &sw, self.shape(b)));
            }
        }
        let rows = self.value(x).len() / din;
        let mut out = vec![0.0; rows * dout];
        gemm(
            rows,
            din,
            dout,
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            0.0,
            &mut out,
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_exact_mut(dout) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_grad(&inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Linear {
                x,
                w,
                b,
                rows,
                din,
                dout,
            },
            rg,
        ))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = v.data().iter().map(|x| x.max(0.0)).collect();
        let value = Tensor::new(v.shape().to_vec(), data).expect("same shape");
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Relu(a), rg)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Softmax over the last axis with optional key validity.
    ///
    /// For `x` of shape `[..., n, m]`, `key_mask` has one flag per key for
    /// every leading batch slot (`len = batch · m`), shared by the `n` query
    /// rows of that slot. Masked keys get exactly zero weight.
    pub fn masked_softmax(&mut self, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        let rows_per_group = if shape.len() >= 2 { shape[shape.len() - 2] } else { 1 };
        let total = self.value(x).len();
        let groups = total / (cols * rows_per_group);
        if let Some(mask) = key_mask {
            if mask.len() != groups * cols {
                return Err(shape_err("masked_softmax", &shape, &[mask.len()]));
            }
            if mask.chunks_exact(cols).any(|g| !g.iter().any(|&v| v)) {
                return Err(Error::FullyMasked);
            }
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; total];
        for (r, (row_in, row_out)) in src.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
            let mask = key_mask.map(|m| {
                let g = r / rows_per_group;
                &m[g * cols..(g + 1) * cols]
            });
            let valid = |j: usize| mask.is_none_or(|m| m[j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in row_in.iter().enumerate() {
                if valid(j) && v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for (j, (o, &v)) in row_out.iter_mut().zip(row_in).enumerate() {
                if valid(j) {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in row_out.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { x, cols }, rg))
    }

    /// Layer normalization over the last axis with biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let cols = *shape.last().unwrap_or(&1);
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(shape_err("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = src.len() / cols;
        let mut out = vec![0.0; src.len()];
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            if !is.is_finite() {
                return Err(Error::NonFinite("layer_norm (zero variance with eps = 0)".into()));
            }
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                cols,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Concatenates along the last axis; leading axes must agree.
    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = inputs.first().ok_or(Error::EmptyAxis { op: "concat" })?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || s[..lead.len()] != lead[..] {
                return Err(shape_err("concat", self.shape(*first), s));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&v, &w) in inputs.iter().zip(&widths) {
            let src = self.value(v).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = lead;
        shape.push(total);
        let rg = self.any_grad(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                widths,
            },
            rg,
        ))
    }

    /// Mean or max over `axis`, optionally restricted to valid positions.
    ///
    /// `mask`, when given, holds one flag per (position before `axis`,
    /// position along `axis`) pair, i.e. `outer · len` entries. Max records
    /// its argmax (first on ties) for the gradient rule.
    pub fn reduce(&mut self, x: Var, axis: usize, mode: ReduceMode, mask: Option<&[bool]>) -> Result<Var> {
        let op = match mode {
            ReduceMode::Mean => "reduce_mean",
            ReduceMode::Max => "reduce_max",
        };
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::EmptyAxis { op });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        if let Some(m) = mask {
            if m.len() != outer * len {
                return Err(shape_err(op, &shape, &[m.len()]));
            }
            if m.chunks_exact(len).any(|g| !g.iter().any(|&v| v)) {
                return Err(Error::EmptyAxis { op });
            }
        }
        let valid = |o: usize, j: usize| mask.is_none_or(|m| m[o * len + j]);
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        let mut aux = Vec::new();
        match mode {
            ReduceMode::Mean => {
                for o in 0..outer {
                    let count = (0..len).filter(|&j| valid(o, j)).count();
                    aux.push(count);
                    for j in (0..len).filter(|&j| valid(o, j)) {
                        for i in 0..inner {
                            out[o * inner + i] += src[(o * len + j) * inner + i];
                        }
                    }
                    for i in 0..inner {
                        out[o * inner + i] /= count as f64;
                    }
                }
            }
            ReduceMode::Max => {
                aux = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = usize::MAX;
                        for j in (0..len).filter(|&j| valid(o, j)) {
                            let idx = (o * len + j) * inner + i;
                            if arg == usize::MAX || src[idx] > best {
                                best = src[idx];
                                arg = idx;
                            }
                        }
                        out[o * inner + i] = best;
                        aux[o * inner + i] = arg;
                    }
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::Reduce {
                x,
                mode,
                outer,
                len,
                inner,
                mask: mask.map(<[bool]>::to_vec),
                aux,
            },
            rg,
        ))
    }

    /// Selects rows of `x` viewed as `[rows, cols]` (cols = last extent).
    /// Output is `[indices.len(), cols]`; the gradient scatters back.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let cols = v.cols();
        let rows = v.rows();
        if indices.is_empty() {
            return Err(Error::EmptyAxis { op: "gather" });
        }
        let mut out = Vec::with_capacity(indices.len() * cols);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange {
                    what: "gather row",
                    index: i,
                    bound: rows,
                });
            }
            out.extend_from_slice(v.row(i));
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new([indices.len(), cols], out)?,
            Op::Gather {
                x,
                indices: indices.to_vec(),
                cols,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Replaces positions where `fill` is true with `value` (typically −∞
    /// for masked logits). Filled positions receive zero gradient.
    pub fn masked_fill(&mut self, x: Var, fill: &[bool], value: f64) -> Result<Var> {
        let v = self.value(x);
        if fill.len() != v.len() {
            return Err(shape_err("masked_fill", v.shape(), &[fill.len()]));
        }
        let data = v
            .data()
            .iter()
            .zip(fill)
            .map(|(&x, &f)| if f { value } else { x })
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::MaskedFill {
                x,
                fill: fill.to_vec(),
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[rows, classes]`), computed in log space. Rows with a
    /// false `row_mask` entry are excluded from the mean.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], row_mask: Option<&[bool]>) -> Result<Var> {
        let v = self.value(logits);
        let cols = v.cols();
        let rows = v.rows();
        if targets.len() != rows {
            return Err(shape_err("cross_entropy", v.shape(), &[targets.len()]));
        }
        if let Some(m) = row_mask {
            if m.len() != rows {
                return Err(shape_err("cross_entropy", v.shape(), &[m.len()]));
            }
        }
        let included = |r: usize| row_mask.is_none_or(|m| m[r]);
        let count = (0..rows).filter(|&r| included(r)).count();
        if count == 0 {
            return Err(Error::EmptyAxis { op: "cross_entropy" });
        }
        let mut probs = vec![0.0; rows * cols];
        let mut weights = vec![0.0; rows];
        let mut loss = 0.0;
        for r in 0..rows {
            if !included(r) {
                continue;
            }
            let t = targets[r];
            if t >= cols {
                return Err(Error::IndexOutOfRange {
                    what: "cross_entropy target",
                    index: t,
                    bound: cols,
                });
            }
            let row = v.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            for c in 0..cols {
                probs[r * cols + c] = (row[c] - lse).exp();
            }
            weights[r] = 1.0 / count as f64;
        }
        let loss = loss / count as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross_entropy (target logit is not finite)".into()));
        }
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights,
                probs,
                cols,
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Accumulates `d loss / d v` into every reachable node that requires a
    /// gradient. Nodes are visited in exact reverse execution order and
    /// contributions from multiple uses add up.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (before, rest) = grads.split_at_mut(i);
            let Some(g) = rest[0].as_deref() else {
                continue;
            };
            let mut scaled;
            let g = match (self.fault, node.op.kind()) {
                (Some(f), Some(k)) if f == k => {
                    scaled = g.to_vec();
                    scaled.iter_mut().for_each(|v| *v *= 1.5);
                    &scaled[..]
                }
                _ => g,
            };
            backward_node(&self.nodes, node, g, before);
        }
        self.grads = grads;
        Ok(())
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.data();
    let needs = |v: Var| nodes[v.0].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul {
            a,
            b,
            batch,
            m,
            k,
            n,
            rhs_t,
        } => {
            if needs(a) {
                let bv = val(b);
                let da = slot(grads, a, batch * m * k);
                for bi in 0..batch {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let bb = &bv[bi * k * n..(bi + 1) * k * n];
                    // dA = dC · Bᵀ (or dC · B when B was used transposed)
                    gemm(m, n, k, gb, false, bb, !rhs_t, 1.0, &mut da[bi * m * k..(bi + 1) * m * k]);
                }
            }
            if needs(b) {
                let av = val(a);
                let db = slot(grads, b, batch * k * n);
                for bi in 0..batch {
                    let gb = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &av[bi * m * k..(bi + 1) * m * k];
                    let dbb = &mut db[bi * k * n..(bi + 1) * k * n];
                    if rhs_t {
                        // B is n×k: dB = dCᵀ · A
                        gemm(n, m, k, gb, true, ab, false, 1.0, dbb);
                    } else {
                        // dB = Aᵀ · dC
                        gemm(k, m, n, ab, true, gb, false, 1.0, dbb);
                    }
                }
            }
        }
        &Op::Linear {
            x,
            w,
            b,
            rows,
            din,
            dout,
        } => {
            if needs(x) {
                let wv = val(w);
                let dx = slot(grads, x, rows * din);
                gemm(rows, dout, din, g, false, wv, false, 1.0, dx);
            }
            if needs(w) {
                let xv = val(x);
                let dw = slot(grads, w, dout * din);
                gemm(dout, rows, din, g, true, xv, false, 1.0, dw);
            }
            if let Some(b) = b {
                if needs(b) {
                    let db = slot(grads, b, dout);
                    for row in g.chunks_exact(dout) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
        }
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
            if needs(a) {
                let da = slot(grads, a, g.len());
                da.iter_mut().zip(g).for_each(|(d, v)| *d += v);
            }
            if needs(b) {
                let db = slot(grads, b, g.len());
                db.iter_mut().zip(g).for_each(|(d, v)| *d += sign * v);
            }
        }
        &Op::Mul(a, b) => {
            if needs(a) {
                let bv = val(b);
                let da = slot(grads, a, g.len());
                for ((d, v), y) in da.iter_mut().zip(g).zip(bv) {
                    *d += v * y;
                }
            }
            if needs(b) {
                let av = val(a);
                let db = slot(grads, b, g.len());
                for ((d, v), x) in db.iter_mut().zip(g).zip(av) {
                    *d += v * x;
                }
            }
        }
        &Op::Scale(a, c) => {
            let da = slot(grads, a, g.len());
            da.iter_mut().zip(g).for_each(|(d, v)| *d += c * v);
        }
        &Op::Relu(a) => {
            let av = val(a);
            let da = slot(grads, a, g.len());
            for ((d, v), x) in da.iter_mut().zip(g).zip(av) {
                if *x > 0.0 {
                    *d += v;
                }
            }
        }
        &Op::Softmax { x, cols } => {
            let y = node.value.data();
            let dx = slot(grads, x, g.len());
            for ((dr, gr), yr) in dx.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(y.chunks_exact(cols)) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    dr[c] += yr[c] * (gr[c] - dot);
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            cols,
            xhat,
            inv_std,
        } => {
            let cols = *cols;
            let gv = val(*gamma);
            if needs(*x) {
                let dx = slot(grads, *x, g.len());
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * cols..(r + 1) * cols];
                    let hr = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for c in 0..cols {
                        let d = gr[c] * gv[c];
                        mean_d += d;
                        mean_dh += d * hr[c];
                    }
                    mean_d /= cols as f64;
                    mean_dh /= cols as f64;
                    for c in 0..cols {
                        let d = gr[c] * gv[c];
                        dx[r * cols + c] += is * (d - mean_d - hr[c] * mean_dh);
                    }
                }
            }
            if needs(*gamma) {
                let dg = slot(grads, *gamma, cols);
                for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    for c in 0..cols {
                        dg[c] += gr[c] * hr[c];
                    }
                }
            }
            if needs(*beta) {
                let db = slot(grads, *beta, cols);
                for gr in g.chunks_exact(cols) {
                    for c in 0..cols {
                        db[c] += gr[c];
                    }
                }
            }
        }
        Op::Concat { inputs, widths } => {
            let total: usize = widths.iter().sum();
            let rows = g.len() / total;
            let mut offset = 0;
            for (&v, &w) in inputs.iter().zip(widths) {
                if needs(v) {
                    let dv = slot(grads, v, rows * w);
                    for r in 0..rows {
                        for c in 0..w {
                            dv[r * w + c] += g[r * total + offset + c];
                        }
                    }
                }
                offset += w;
            }
        }
        Op::Reduce {
            x,
            mode,
            outer,
            len,
            inner,
            mask,
            aux,
        } => {
            let (outer, len, inner) = (*outer, *len, *inner);
            let dx = slot(grads, *x, outer * len * inner);
            match mode {
                ReduceMode::Max => {
                    for (gi, &src) in g.iter().zip(aux) {
                        dx[src] += gi;
                    }
                }
                ReduceMode::Mean => {
                    for o in 0..outer {
                        let count = aux[o] as f64;
                        for j in 0..len {
                            if mask.as_ref().is_some_and(|m| !m[o * len + j]) {
                                continue;
                            }
                            for i in 0..inner {
                                dx[(o * len + j) * inner + i] += g[o * inner + i] / count;
                            }
                        }
                    }
                }
            }
        }
        Op::Gather { x, indices, cols } => {
            let cols = *cols;
            let rows = nodes[x.0].value.len();
            let dx = slot(grads, *x, rows);
            for (r, &i) in indices.iter().enumerate() {
                for c in 0..cols {
                    dx[i * cols + c] += g[r * cols + c];
                }
            }
        }
        &Op::Reshape(x) => {
            let dx = slot(grads, x, g.len());
            dx.iter_mut().zip(g).for_each(|(d, v)| *d += v);
        }
        &Op::Sum(x) => {
            let n = nodes[x.0].value.len();
            let dx = slot(grads, x, n);
            dx.iter_mut().for_each(|d| *d += g[0]);
        }
        Op::MaskedFill { x, fill } => {
            let dx = slot(grads, *x, g.len());
            for ((d, v), &f) in dx.iter_mut().zip(g).zip(fill) {
                if !f {
                    *d += v;
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            weights,
            probs,
            cols,
        } => {
            let cols = *cols;
            let dl = slot(grads, *logits, probs.len());
            for (r, &w) in weights.iter().enumerate() {
                if w == 0.0 {
                    continue;
                }
                for c in 0..cols {
                    let onehot = if c == targets[r] { 1.0 } else { 0.0 };
                    dl[r * cols + c] += g[0] * w * (probs[r * cols + c] - onehot);
                }
            }
        }
    }
}
