//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as it runs. [`Graph::backward`]
//! consumes the tape, walks it in reverse and returns the gradients of all
//! trainable leaves and parameters; the recorded values are dropped with it.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels::{self, AttnLayout, ConvShape, RotaryTable};
use super::{ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Gelu,
    Sigmoid,
    Sin,
    Tanh,
    Abs,
    Square,
    Sqrt,
    Exp,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Silu => "silu",
            Unary::Gelu => "gelu",
            Unary::Sigmoid => "sigmoid",
            Unary::Sin => "sin",
            Unary::Tanh => "tanh",
            Unary::Abs => "abs",
            Unary::Square => "square",
            Unary::Sqrt => "sqrt",
            Unary::Exp => "exp",
        }
    }

    fn forward<T: Real>(self, x: T) -> T {
        let one = T::one();
        match self {
            Unary::Silu => x / (one + (-x).exp()),
            Unary::Gelu => {
                let (c, a) = gelu_consts::<T>();
                T::lit(0.5) * x * (one + (c * (x + a * x * x * x)).tanh())
            }
            Unary::Sigmoid => one / (one + (-x).exp()),
            Unary::Sin => x.sin(),
            Unary::Tanh => x.tanh(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Sqrt => x.sqrt(),
            Unary::Exp => x.exp(),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        let one = T::one();
        match self {
            Unary::Silu => {
                let s = one / (one + (-x).exp());
                s * (one + x * (one - s))
            }
            Unary::Gelu => {
                let (c, a) = gelu_consts::<T>();
                let th = (c * (x + a * x * x * x)).tanh();
                T::lit(0.5) * (one + th)
                    + T::lit(0.5) * x * (one - th * th) * c * (one + T::lit(3.0) * a * x * x)
            }
            Unary::Sigmoid => y * (one - y),
            Unary::Sin => x.cos(),
            Unary::Tanh => one - y * y,
            Unary::Abs => {
                if x > T::zero() {
                    one
                } else if x < T::zero() {
                    -one
                } else {
                    T::zero()
                }
            }
            Unary::Square => T::lit(2.0) * x,
            Unary::Sqrt => T::lit(0.5) / y,
            Unary::Exp => y,
        }
    }
}

fn gelu_consts<T: Real>() -> (T, T) {
    (
        T::lit((2.0 / std::f64::consts::PI).sqrt()),
        T::lit(0.044715),
    )
}

enum Op<T> {
    Constant,
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Matmul(Var, Var),
    Unary(Var, Unary),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    SegmentSum(Var, Arc<Vec<(usize, usize)>>),
    GatherRows(Var, Arc<Vec<usize>>),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Reshape(Var),
    TransposeBatched(Var),
    Softmax(Var),
    RmsNorm {
        x: Var,
        weight: Option<Var>,
        inv: Vec<T>,
    },
    Rotary(Var, Arc<RotaryTable<T>>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttnLayout>,
        probs: Vec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        shape: ConvShape,
    },
    Upsample2x(Var),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Matmul(..) => "matmul",
            Op::Unary(_, u) => u.name(),
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumRows(..) => "sum_rows",
            Op::SegmentSum(..) => "segment_sum",
            Op::GatherRows(..) => "gather_rows",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::Reshape(..) => "reshape",
            Op::TransposeBatched(..) => "transpose",
            Op::Softmax(..) => "softmax",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Rotary(..) => "rotary",
            Op::Attention { .. } => "attention",
            Op::Conv2d { .. } => "conv2d",
            Op::Upsample2x(..) => "upsample2x",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Clone, Debug, Default)]
pub struct Gradients<T = f32> {
    params: BTreeMap<ParamId, Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (*k, v))
    }

    pub fn global_norm(&self) -> f64 {
        self.params
            .values()
            .map(|g| g.sq_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales all parameter gradients so their global norm is at most
    /// `max_norm`. Returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let s = T::lit(max_norm / norm);
            for g in self.params.values_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= s);
            }
        }
        norm
    }
}

/// Recording tape for one forward pass.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        value.check_finite(op.name())?;
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Constant | Op::Param(_) => false,
            _ => inputs.iter().any(|&v| self.needs(v)),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Constant, &[])
    }

    /// A free input whose gradient is reported by [`Gradients::leaf`].
    pub fn leaf(&mut self, value: Tensor<T>) -> Result<Var> {
        self.push(value, Op::Leaf, &[])
    }

    /// Brings a stored parameter onto the tape (once per graph). Frozen
    /// parameters are recorded as constants.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.params.get(&id) {
            return Ok(v);
        }
        let p = store.get(id);
        let v = if p.frozen {
            self.push(p.value.clone(), Op::Constant, &[])?
        } else {
            let v = self.push(p.value.clone(), Op::Param(id), &[])?;
            self.nodes[v.0].needs_grad = true;
            v
        };
        self.params.insert(id, v);
        Ok(v)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        self.value(a).zip_map(self.value(b), name, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    fn row_width(&self, x: Var, row: Var, op: &'static str) -> Result<usize> {
        let w = self.value(row).numel();
        let xs = self.shape(x);
        if self.value(row).rank() != 1 || xs.last() != Some(&w) {
            return Err(Error::shape(
                op,
                format!("{xs:?} with row {:?}", self.shape(row)),
            ));
        }
        Ok(w)
    }

    /// `x + row`, broadcasting a vector over the last dimension.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let w = self.row_width(x, row, "add_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += r[i % w];
        }
        self.push(out, Op::AddRow(x, row), &[x, row])
    }

    /// `x * row`, broadcasting a vector over the last dimension.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let w = self.row_width(x, row, "mul_row")?;
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= r[i % w];
        }
        self.push(out, Op::MulRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn unary(&mut self, x: Var, u: Unary) -> Result<Var> {
        let out = self.value(x).map(|v| u.forward(v));
        self.push(out, Op::Unary(x, u), &[x])
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Gelu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Square)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Abs)
    }

    /// `[m, k] x [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::Matmul(a, b), &[a, b])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push(out, Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let out = Tensor::scalar(self.value(x).sum() / T::lit(n as f64));
        self.push(out, Op::MeanAll(x), &[x])
    }

    /// Sums over every dimension except the last: `[.., d] -> [d]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let w = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("sum_rows", "scalar"))?;
        let mut out = vec![T::zero(); w];
        for row in t.data().chunks(w.max(1)) {
            out.iter_mut().zip(row).for_each(|(o, &v)| *o += v);
        }
        self.push(Tensor::new(vec![w], out)?, Op::SumRows(x), &[x])
    }

    /// Sum of all elements in each row range: `[n, ..] -> [segments]`.
    pub fn segment_sum(&mut self, x: Var, segments: Arc<Vec<(usize, usize)>>) -> Result<Var> {
        let t = self.value(x);
        let rows = *t.shape().first().unwrap_or(&0);
        let w = t.numel().checked_div(rows).unwrap_or(0);
        let mut out = Vec::with_capacity(segments.len());
        for &(start, len) in segments.iter() {
            if start + len > rows {
                return Err(Error::shape(
                    "segment_sum",
                    format!("rows {start}+{len} of {rows}"),
                ));
            }
            out.push(t.data()[start * w..(start + len) * w].iter().copied().sum());
        }
        let n = out.len();
        self.push(
            Tensor::new(vec![n], out)?,
            Op::SegmentSum(x, segments),
            &[x],
        )
    }

    /// Picks rows of `x` (`[s, ..]`) by index: `[idx.len(), ..]`.
    pub fn gather_rows(&mut self, x: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        let rows = *t
            .shape()
            .first()
            .ok_or_else(|| Error::shape("gather_rows", "scalar"))?;
        let w = t.numel().checked_div(rows).unwrap_or(0);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx.iter() {
            if i >= rows {
                return Err(Error::shape("gather_rows", format!("row {i} of {rows}")));
            }
            out.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        self.push(Tensor::new(shape, out)?, Op::GatherRows(x, idx), &[x])
    }

    /// Stacks matrices `[n_i, d]` into `[sum n_i, d]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let (_, w) = self.value(*first).dims2("concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pw) = self.value(p).dims2("concat_rows")?;
            if pw != w {
                return Err(Error::shape("concat_rows", format!("width {pw} vs {w}")));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        self.push(
            Tensor::new(vec![rows, w], out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Joins matrices `[n, d_i]` side by side into `[n, sum d_i]`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_cols", "no inputs"))?;
        let (n, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::new();
        for &p in parts {
            let (r, w) = self.value(p).dims2("concat_cols")?;
            if r != n {
                return Err(Error::shape("concat_cols", format!("rows {r} vs {n}")));
            }
            widths.push(w);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(
            Tensor::new(vec![n, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, w) = self.value(x).dims2("slice_cols")?;
        if start + len > w {
            return Err(Error::shape(
                "slice_cols",
                format!("cols {start}+{len} of {w}"),
            ));
        }
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&d[i * w + start..i * w + start + len]);
        }
        self.push(
            Tensor::new(vec![n, len], out)?,
            Op::SliceCols(x, start),
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// `[b, m, n] -> [b, n, m]`.
    pub fn transpose_batched(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let &[b, m, n] = t.shape() else {
            return Err(Error::shape(
                "transpose",
                format!("expected rank 3, got {:?}", t.shape()),
            ));
        };
        let out = transpose3(t.data(), b, m, n);
        self.push(
            Tensor::new(vec![b, n, m], out)?,
            Op::TransposeBatched(x),
            &[x],
        )
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).softmax_rows()?;
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Root-mean-square normalisation over the last dimension, with an
    /// optional per-channel gain.
    pub fn rms_norm(&mut self, x: Var, weight: Option<Var>, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = *t
            .shape()
            .last()
            .ok_or_else(|| Error::shape("rms_norm", "scalar"))?;
        if let Some(w) = weight {
            self.row_width(x, w, "rms_norm")?;
        }
        let gain = weight.map(|w| self.value(w).data().to_vec());
        let mut out = t.clone();
        let mut inv = Vec::with_capacity(t.numel() / d.max(1));
        for row in out.data_mut().chunks_mut(d) {
            let ms = row.iter().map(|&v| v * v).sum::<T>() / T::lit(d as f64);
            let r = T::one() / (ms + T::lit(eps)).sqrt();
            inv.push(r);
            for (j, v) in row.iter_mut().enumerate() {
                *v *= r;
                if let Some(g) = &gain {
                    *v *= g[j];
                }
            }
        }
        let inputs: Vec<Var> = std::iter::once(x).chain(weight).collect();
        self.push(out, Op::RmsNorm { x, weight, inv }, &inputs)
    }

    /// Rotates channel pairs of every head by per-token angles.
    pub fn rotary(&mut self, x: Var, table: Arc<RotaryTable<T>>) -> Result<Var> {
        let t = self.value(x);
        let (n, w) = t.dims2("rotary")?;
        if n != table.tokens || w % table.head_dim != 0 {
            return Err(Error::shape(
                "rotary",
                format!(
                    "{:?} vs table of {} tokens, head_dim {}",
                    t.shape(),
                    table.tokens,
                    table.head_dim
                ),
            ));
        }
        let mut out = t.clone();
        table.apply(out.data_mut(), false);
        self.push(out, Op::Rotary(x, table), &[x])
    }

    /// Grouped-query attention; see [`AttnLayout`].
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttnLayout>) -> Result<Var> {
        let n = layout.tokens();
        let (qn, qw) = self.value(q).dims2("attention")?;
        let (kn, kw) = self.value(k).dims2("attention")?;
        let (vn, vw) = self.value(v).dims2("attention")?;
        if layout.kv_heads == 0 || !layout.heads.is_multiple_of(layout.kv_heads) {
            return Err(Error::shape(
                "attention",
                format!("{} heads over {} kv heads", layout.heads, layout.kv_heads),
            ));
        }
        let mut expect = 0;
        for &(start, len) in &layout.segments {
            if start != expect {
                return Err(Error::shape(
                    "attention",
                    "segments must tile the tokens in order",
                ));
            }
            expect += len;
        }
        if qn != n
            || kn != n
            || vn != n
            || qw != layout.heads * layout.head_dim
            || kw != layout.kv_heads * layout.head_dim
            || vw != kw
        {
            return Err(Error::shape(
                "attention",
                format!("q [{qn}, {qw}] k [{kn}, {kw}] v [{vn}, {vw}] for {layout:?}"),
            ));
        }
        let (out, probs) = kernels::attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            &layout,
        );
        let out = Tensor::new(vec![n, qw], out)?;
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Same-padding, stride-1 convolution: `x [b, c, h, w]`, `w [o, c, k, k]`, `b [o]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let &[batch, in_ch, height, width] = self.shape(x) else {
            return Err(Error::shape("conv2d", format!("input {:?}", self.shape(x))));
        };
        let &[out_ch, wc, kernel, k2] = self.shape(w) else {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?}", self.shape(w)),
            ));
        };
        if wc != in_ch || kernel != k2 || kernel % 2 == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {:?} for input {:?}", self.shape(w), self.shape(x)),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [out_ch] {
                return Err(Error::shape("conv2d", format!("bias {:?}", self.shape(b))));
            }
        }
        let shape = ConvShape {
            batch,
            in_ch,
            out_ch,
            height,
            width,
            kernel,
        };
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &shape,
        );
        let out = Tensor::new(vec![batch, out_ch, height, width], out)?;
        let inputs: Vec<Var> = [x, w].into_iter().chain(b).collect();
        self.push(out, Op::Conv2d { x, w, b, shape }, &inputs)
    }

    /// Nearest-neighbour 2x upsampling of `[b, c, h, w]`.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let &[b, c, h, w] = self.shape(x) else {
            return Err(Error::shape("upsample2x", format!("{:?}", self.shape(x))));
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); b * c * 4 * h * w];
        for p in 0..b * c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out[p * 4 * h * w + y * 2 * w + xx] = src[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        self.push(
            Tensor::new(vec![b, c, 2 * h, 2 * w], out)?,
            Op::Upsample2x(x),
            &[x],
        )
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut nodes = self.nodes;
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !nodes[i].needs_grad {
                continue;
            }
            let op = std::mem::replace(&mut nodes[i].op, Op::Constant);
            let name = op.name();
            g.check_finite(&format!("backward of {name}"))?;
            let contributions = backprop(&nodes, i, &op, g, &mut out)?;
            for (v, t) in contributions {
                if !nodes[v.0].needs_grad {
                    continue;
                }
                t.check_finite(&format!("backward of {name}"))?;
                match &mut grads[v.0] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, &b)| *a += b),
                    slot @ None => *slot = Some(t),
                }
            }
            // free the value once nothing downstream needs it
            nodes[i].value = Tensor::zeros(&[0]);
        }
        Ok(out)
    }
}

fn transpose3<T: Real>(d: &[T], b: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); d.len()];
    for bi in 0..b {
        let src = &d[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

type Contribs<T> = Vec<(Var, Tensor<T>)>;

fn backprop<T: Real>(
    nodes: &[Node<T>],
    idx: usize,
    op: &Op<T>,
    g: Tensor<T>,
    out: &mut Gradients<T>,
) -> Result<Contribs<T>> {
    let val = |v: Var| &nodes[v.0].value;
    let needs = |v: Var| nodes[v.0].needs_grad;
    let y = &nodes[idx].value;
    let like = |v: Var, data: Vec<T>| Tensor::new(val(v).shape().to_vec(), data);

    Ok(match op {
        Op::Constant => vec![],
        Op::Leaf => {
            out.leaves.insert(Var(idx), g);
            vec![]
        }
        Op::Param(id) => {
            out.params.insert(*id, g);
            vec![]
        }
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, g)],
        Op::Sub(a, b) => {
            let neg = g.map(|x| -x);
            vec![(*a, g), (*b, neg)]
        }
        Op::Mul(a, b) => {
            let mut c = vec![];
            if needs(*a) {
                c.push((*a, g.zip_map(val(*b), "mul", |x, y| x * y)?));
            }
            if needs(*b) {
                c.push((*b, g.zip_map(val(*a), "mul", |x, y| x * y)?));
            }
            c
        }
        Op::AddRow(x, r) => {
            let w = val(*r).numel();
            let mut dr = vec![T::zero(); w];
            for (i, &v) in g.data().iter().enumerate() {
                dr[i % w] += v;
            }
            vec![(*r, like(*r, dr)?), (*x, g)]
        }
        Op::MulRow(x, r) => {
            let w = val(*r).numel();
            let rv = val(*r).data();
            let xv = val(*x).data();
            let mut dr = vec![T::zero(); w];
            let mut dx = g.data().to_vec();
            for (i, v) in dx.iter_mut().enumerate() {
                dr[i % w] += *v * xv[i];
                *v *= rv[i % w];
            }
            vec![(*r, like(*r, dr)?), (*x, like(*x, dx)?)]
        }
        Op::Scale(x, s) => vec![(*x, g.map(|v| v * *s))],
        Op::AddScalar(x) => vec![(*x, g)],
        Op::Matmul(a, b) => {
            let (m, k) = val(*a).dims2("matmul")?;
            let (_, n) = val(*b).dims2("matmul")?;
            let mut c = vec![];
            if needs(*a) {
                let mut da = vec![T::zero(); m * k];
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    g.data(),
                    false,
                    val(*b).data(),
                    true,
                    T::zero(),
                    &mut da,
                );
                c.push((*a, like(*a, da)?));
            }
            if needs(*b) {
                let mut db = vec![T::zero(); k * n];
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    val(*a).data(),
                    true,
                    g.data(),
                    false,
                    T::zero(),
                    &mut db,
                );
                c.push((*b, like(*b, db)?));
            }
            c
        }
        Op::Unary(x, u) => {
            let xv = val(*x).data();
            let d: Vec<T> = g
                .data()
                .iter()
                .zip(xv)
                .zip(y.data())
                .map(|((&gi, &xi), &yi)| gi * u.derivative(xi, yi))
                .collect();
            vec![(*x, like(*x, d)?)]
        }
        Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), g.data()[0]))],
        Op::MeanAll(x) => {
            let n = T::lit(val(*x).numel() as f64);
            vec![(*x, Tensor::full(val(*x).shape(), g.data()[0] / n))]
        }
        Op::SumRows(x) => {
            let w = g.numel();
            let n = val(*x).numel();
            let d: Vec<T> = (0..n).map(|i| g.data()[i % w]).collect();
            vec![(*x, like(*x, d)?)]
        }
        Op::SegmentSum(x, segs) => {
            let xv = val(*x);
            let rows = xv.shape()[0];
            let w = xv.numel().checked_div(rows).unwrap_or(0);
            let mut d = vec![T::zero(); xv.numel()];
            for (s, &(start, len)) in segs.iter().enumerate() {
                d[start * w..(start + len) * w]
                    .iter_mut()
                    .for_each(|v| *v = g.data()[s]);
            }
            vec![(*x, like(*x, d)?)]
        }
        Op::GatherRows(x, idx) => {
            let xv = val(*x);
            let rows = xv.shape()[0];
            let w = xv.numel().checked_div(rows).unwrap_or(0);
            let mut d = vec![T::zero(); xv.numel()];
            for (r, &i) in idx.iter().enumerate() {
                let src = &g.data()[r * w..(r + 1) * w];
                d[i * w..(i + 1) * w]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, &b)| *a += b);
            }
            vec![(*x, like(*x, d)?)]
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            let mut c = vec![];
            for &p in parts {
                let n = val(p).numel();
                c.push((p, like(p, g.data()[off..off + n].to_vec())?));
                off += n;
            }
            c
        }
        Op::ConcatCols(parts) => {
            let (n, total) = g.dims2("concat_cols")?;
            let mut off = 0;
            let mut c = vec![];
            for &p in parts {
                let w = val(p).shape()[1];
                let mut d = Vec::with_capacity(n * w);
                for i in 0..n {
                    d.extend_from_slice(&g.data()[i * total + off..i * total + off + w]);
                }
                c.push((p, like(p, d)?));
                off += w;
            }
            c
        }
        Op::SliceCols(x, start) => {
            let (n, w) = val(*x).dims2("slice_cols")?;
            let len = g.shape()[1];
            let mut d = vec![T::zero(); n * w];
            for i in 0..n {
                d[i * w + start..i * w + start + len]
                    .copy_from_slice(&g.data()[i * len..(i + 1) * len]);
            }
            vec![(*x, like(*x, d)?)]
        }
        Op::Reshape(x) => vec![(*x, like(*x, g.into_data())?)],
        Op::TransposeBatched(x) => {
            let s = val(*x).shape();
            let d = transpose3(g.data(), s[0], s[2], s[1]);
            vec![(*x, like(*x, d)?)]
        }
        Op::Softmax(x) => {
            let w = *y.shape().last().unwrap();
            let mut d = g.data().to_vec();
            for (drow, yrow) in d.chunks_mut(w).zip(y.data().chunks(w)) {
                let inner: T = drow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                for (dv, &yv) in drow.iter_mut().zip(yrow) {
                    *dv = yv * (*dv - inner);
                }
            }
            vec![(*x, like(*x, d)?)]
        }
        Op::RmsNorm { x, weight, inv } => {
            let xv = val(*x).data();
            let d = *val(*x).shape().last().unwrap();
            let gain = weight.map(|w| val(w).data());
            let mut dx = vec![T::zero(); xv.len()];
            let mut dw = vec![T::zero(); d];
            let dn = T::lit(d as f64);
            for (r, &ir) in inv.iter().enumerate() {
                let xr = &xv[r * d..(r + 1) * d];
                let gr = &g.data()[r * d..(r + 1) * d];
                let mut dot = T::zero();
                for j in 0..d {
                    let gj = gain.map_or(gr[j], |w| gr[j] * w[j]);
                    dot += gj * xr[j];
                    dw[j] += gr[j] * xr[j] * ir;
                }
                let k = ir * ir * ir * dot / dn;
                for j in 0..d {
                    let gj = gain.map_or(gr[j], |w| gr[j] * w[j]);
                    dx[r * d + j] = ir * gj - k * xr[j];
                }
            }
            let mut c = vec![(*x, like(*x, dx)?)];
            if let Some(w) = weight {
                c.push((*w, like(*w, dw)?));
            }
            c
        }
        Op::Rotary(x, table) => {
            let mut d = g.into_data();
            table.apply(&mut d, true);
            vec![(*x, like(*x, d)?)]
        }
        Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
        } => {
            let (dq, dk, dv) = kernels::attention_backward(
                val(*q).data(),
                val(*k).data(),
                val(*v).data(),
                probs,
                g.data(),
                layout,
            );
            vec![
                (*q, like(*q, dq)?),
                (*k, like(*k, dk)?),
                (*v, like(*v, dv)?),
            ]
        }
        Op::Conv2d { x, w, b, shape } => {
            let (dx, dw, db) =
                kernels::conv2d_backward(val(*x).data(), val(*w).data(), g.data(), shape);
            let mut c = vec![(*x, like(*x, dx)?), (*w, like(*w, dw)?)];
            if let Some(b) = b {
                c.push((*b, like(*b, db)?));
            }
            c
        }
        Op::Upsample2x(x) => {
            let s = val(*x).shape();
            let (h, w) = (s[2], s[3]);
            let mut d = vec![T::zero(); val(*x).numel()];
            for p in 0..s[0] * s[1] {
                for yy in 0..2 * h {
                    for xx in 0..2 * w {
                        d[p * h * w + (yy / 2) * w + xx / 2] +=
                            g.data()[p * 4 * h * w + yy * 2 * w + xx];
                    }
                }
            }
            vec![(*x, like(*x, d)?)]
        }
    })
}
