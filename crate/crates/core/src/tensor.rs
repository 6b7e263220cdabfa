//! Dense row-major arrays and the primitive operations defined over them.
//!
//! Every primitive is a pure function `&[&Array] -> Array`. The autodiff
//! graph in [`crate::autodiff`] records applications of these primitives and
//! expresses each backward rule as further primitive applications, which is
//! what makes gradients of gradients available.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Fill value used by attention masks. Large enough that `exp` underflows to
/// exactly zero after max-subtraction, small enough to stay finite.
pub const MASK_VALUE: f64 = -1.0e9;

/// Immutable n-dimensional array of `f64` values in row-major order.
#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Arc<[f64]>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Array{:?}{:?}", self.shape, &self.data[..])
        } else {
            write!(f, "Array{:?}[{} values]", self.shape, self.data.len())
        }
    }
}

impl Array {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&e| e == 0) {
            return Err(Error::shape("array", format!("extents must be positive, got {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "array",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Array { shape, data: data.into() })
    }

    /// Internal constructor for kernels whose output shape is known to match.
    fn raw(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Array { shape, data: data.into() }
    }

    pub fn scalar(v: f64) -> Self {
        Array::raw(vec![1], vec![v])
    }

    pub fn from_vec(data: Vec<f64>) -> Result<Self> {
        Array::new(vec![data.len()], data)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        let n = shape.iter().product();
        Array::raw(shape.to_vec(), vec![v; n])
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Array::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Array::full(shape, 1.0)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// The single value of a one-element array.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array::raw(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    /// Elementwise combination of two same-shaped arrays.
    pub fn zip_map(&self, other: &Array, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        let data = self.data.iter().zip(other.data.iter()).map(|(&a, &b)| f(a, b)).collect();
        Ok(Array::raw(self.shape.clone(), data))
    }

    pub fn with_data(&self, data: Vec<f64>) -> Result<Array> {
        Array::new(self.shape.clone(), data)
    }

    /// Rounds every value through binary32, the checkpoint storage precision.
    pub fn round_to_f32(&self) -> Array {
        self.map(|v| v as f32 as f64)
    }

    pub fn sum_all(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Bitwise equality of shape and every value.
    pub fn bit_eq(&self, other: &Array) -> bool {
        self.shape == other.shape
            && self.data.iter().zip(other.data.iter()).all(|(a, b)| a.to_bits() == b.to_bits())
    }

    fn last_dim(&self) -> usize {
        *self.shape.last().expect("arrays have rank >= 1")
    }
}

/// Names of the primitives, as accepted by [`PrimId::from_str`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PrimId {
    MatMul,
    Add,
    Mul,
    Scale,
    Relu,
    Gelu,
    SoftmaxLastDim,
    LayerNorm,
    EmbedLookup,
    Concat,
    Slice,
    Reshape,
    TransposeLast2,
    CrossEntropyWithLogits,
    MaskFill,
    Mean,
    Sum,
    Tanh,
    Rsqrt,
    Step,
    AddScalar,
    SumTo,
    BroadcastTo,
    ScatterRows,
    PadSlice,
}

impl PrimId {
    pub const ALL: [PrimId; 25] = [
        PrimId::MatMul,
        PrimId::Add,
        PrimId::Mul,
        PrimId::Scale,
        PrimId::Relu,
        PrimId::Gelu,
        PrimId::SoftmaxLastDim,
        PrimId::LayerNorm,
        PrimId::EmbedLookup,
        PrimId::Concat,
        PrimId::Slice,
        PrimId::Reshape,
        PrimId::TransposeLast2,
        PrimId::CrossEntropyWithLogits,
        PrimId::MaskFill,
        PrimId::Mean,
        PrimId::Sum,
        PrimId::Tanh,
        PrimId::Rsqrt,
        PrimId::Step,
        PrimId::AddScalar,
        PrimId::SumTo,
        PrimId::BroadcastTo,
        PrimId::ScatterRows,
        PrimId::PadSlice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimId::MatMul => "matmul",
            PrimId::Add => "add",
            PrimId::Mul => "mul",
            PrimId::Scale => "scale",
            PrimId::Relu => "relu",
            PrimId::Gelu => "gelu",
            PrimId::SoftmaxLastDim => "softmax_lastdim",
            PrimId::LayerNorm => "layer_norm",
            PrimId::EmbedLookup => "embed_lookup",
            PrimId::Concat => "concat",
            PrimId::Slice => "slice",
            PrimId::Reshape => "reshape",
            PrimId::TransposeLast2 => "transpose_last2",
            PrimId::CrossEntropyWithLogits => "cross_entropy_with_logits",
            PrimId::MaskFill => "mask_fill",
            PrimId::Mean => "mean",
            PrimId::Sum => "sum",
            PrimId::Tanh => "tanh",
            PrimId::Rsqrt => "rsqrt",
            PrimId::Step => "step",
            PrimId::AddScalar => "add_scalar",
            PrimId::SumTo => "sum_to",
            PrimId::BroadcastTo => "broadcast_to",
            PrimId::ScatterRows => "scatter_rows",
            PrimId::PadSlice => "pad_slice",
        }
    }
}

impl FromStr for PrimId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PrimId::ALL
            .iter()
            .copied()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::UnknownOp(s.to_string()))
    }
}

impl fmt::Display for PrimId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A primitive together with its attributes.
///
/// Shape rules:
/// * `MatMul`: `[m, k] x [k, n] -> [m, n]`.
/// * `Add`, `Mul`: the second operand broadcasts onto the first (right-aligned,
///   each extent equal or 1); the result has the first operand's shape.
/// * `LayerNorm`: inputs `(x, gain, bias)`, gain and bias `[d]` with `d` the
///   last extent of `x`; normalizes over the last axis.
/// * `EmbedLookup`: table `[v, d]` -> `[ids.len(), d]`.
/// * `CrossEntropyWithLogits`: logits `[n, v]` -> per-row losses `[n]`.
/// * `Mean`, `Sum`: any shape -> `[1]`.
/// * `SumTo`/`BroadcastTo`: reduce onto / expand from a broadcast-compatible shape.
/// * `ScatterRows`: `[ids.len(), d]` -> `[rows, d]`, accumulating rows by id.
/// * `PadSlice`: inverse placement of `Slice` into zeros.
#[derive(Clone, Debug, PartialEq)]
pub enum Prim {
    MatMul,
    Add,
    Mul,
    Scale(f64),
    Relu,
    Gelu,
    SoftmaxLastDim,
    LayerNorm { eps: f64 },
    EmbedLookup { ids: Arc<[usize]> },
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Reshape { shape: Vec<usize> },
    TransposeLast2,
    CrossEntropyWithLogits { targets: Arc<[usize]> },
    MaskFill { mask: Arc<[bool]>, value: f64 },
    Mean,
    Sum,
    Tanh,
    Rsqrt,
    /// Heaviside step `x > 0`; its derivative is zero everywhere it exists.
    Step,
    AddScalar(f64),
    SumTo { shape: Vec<usize> },
    BroadcastTo { shape: Vec<usize> },
    ScatterRows { ids: Arc<[usize]>, rows: usize },
    PadSlice { axis: usize, start: usize, full: usize },
}

impl Prim {
    pub fn id(&self) -> PrimId {
        match self {
            Prim::MatMul => PrimId::MatMul,
            Prim::Add => PrimId::Add,
            Prim::Mul => PrimId::Mul,
            Prim::Scale(_) => PrimId::Scale,
            Prim::Relu => PrimId::Relu,
            Prim::Gelu => PrimId::Gelu,
            Prim::SoftmaxLastDim => PrimId::SoftmaxLastDim,
            Prim::LayerNorm { .. } => PrimId::LayerNorm,
            Prim::EmbedLookup { .. } => PrimId::EmbedLookup,
            Prim::Concat { .. } => PrimId::Concat,
            Prim::Slice { .. } => PrimId::Slice,
            Prim::Reshape { .. } => PrimId::Reshape,
            Prim::TransposeLast2 => PrimId::TransposeLast2,
            Prim::CrossEntropyWithLogits { .. } => PrimId::CrossEntropyWithLogits,
            Prim::MaskFill { .. } => PrimId::MaskFill,
            Prim::Mean => PrimId::Mean,
            Prim::Sum => PrimId::Sum,
            Prim::Tanh => PrimId::Tanh,
            Prim::Rsqrt => PrimId::Rsqrt,
            Prim::Step => PrimId::Step,
            Prim::AddScalar(_) => PrimId::AddScalar,
            Prim::SumTo { .. } => PrimId::SumTo,
            Prim::BroadcastTo { .. } => PrimId::BroadcastTo,
            Prim::ScatterRows { .. } => PrimId::ScatterRows,
            Prim::PadSlice { .. } => PrimId::PadSlice,
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            Prim::MatMul | Prim::Add | Prim::Mul => Some(2),
            Prim::LayerNorm { .. } => Some(3),
            Prim::Concat { .. } => None,
            _ => Some(1),
        }
    }
}

/// Applies a primitive to concrete arrays, checking shapes and finiteness.
pub fn apply_primitive(prim: &Prim, inputs: &[&Array]) -> Result<Array> {
    let name = prim.id().name();
    match prim.arity() {
        Some(n) if n != inputs.len() => {
            return Err(Error::shape(name, format!("expected {n} inputs, got {}", inputs.len())))
        }
        None if inputs.is_empty() => return Err(Error::shape(name, "needs at least one input")),
        _ => {}
    }
    let out = match prim {
        Prim::MatMul => matmul(inputs[0], inputs[1])?,
        Prim::Add => broadcast_binary("add", inputs[0], inputs[1], |a, b| a + b)?,
        Prim::Mul => broadcast_binary("mul", inputs[0], inputs[1], |a, b| a * b)?,
        Prim::Scale(c) => inputs[0].map(|v| v * c),
        Prim::AddScalar(c) => inputs[0].map(|v| v + c),
        Prim::Relu => inputs[0].map(|v| if v > 0.0 { v } else { 0.0 }),
        Prim::Step => inputs[0].map(|v| if v > 0.0 { 1.0 } else { 0.0 }),
        Prim::Gelu => inputs[0].map(gelu),
        Prim::Tanh => inputs[0].map(f64::tanh),
        Prim::Rsqrt => inputs[0].map(|v| 1.0 / v.sqrt()),
        Prim::SoftmaxLastDim => softmax_lastdim(inputs[0]),
        Prim::LayerNorm { eps } => layer_norm(inputs[0], inputs[1], inputs[2], *eps)?,
        Prim::EmbedLookup { ids } => embed_lookup(inputs[0], ids)?,
        Prim::Concat { axis } => concat(inputs, *axis)?,
        Prim::Slice { axis, start, end } => slice(inputs[0], *axis, *start, *end)?,
        Prim::PadSlice { axis, start, full } => pad_slice(inputs[0], *axis, *start, *full)?,
        Prim::Reshape { shape } => reshape(inputs[0], shape)?,
        Prim::TransposeLast2 => transpose_last2(inputs[0])?,
        Prim::CrossEntropyWithLogits { targets } => cross_entropy(inputs[0], targets)?,
        Prim::MaskFill { mask, value } => mask_fill(inputs[0], mask, *value)?,
        Prim::Mean => Array::scalar(inputs[0].sum_all() / inputs[0].len() as f64),
        Prim::Sum => Array::scalar(inputs[0].sum_all()),
        Prim::SumTo { shape } => sum_to(inputs[0], shape)?,
        Prim::BroadcastTo { shape } => broadcast_to(inputs[0], shape)?,
        Prim::ScatterRows { ids, rows } => scatter_rows(inputs[0], ids, *rows)?,
    };
    if !out.is_finite() {
        return Err(Error::NonFinite(name.to_string()));
    }
    Ok(out)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

/// Constants of the tanh-form GELU, shared with its backward rule.
pub(crate) fn gelu_constants() -> (f64, f64) {
    (GELU_C, GELU_K)
}

fn matmul(a: &Array, b: &Array) -> Result<Array> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", format!("{:?} x {:?}", a.shape, b.shape)));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    // SAFETY: the pointers cover m*k, k*n and m*n contiguous row-major values.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            k as isize,
            1,
            b.data.as_ptr(),
            n as isize,
            1,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Ok(Array::raw(vec![m, n], out))
}

/// How a small shape maps onto a larger one under right-aligned broadcasting.
enum Broadcast {
    Same,
    Scalar,
    /// Small array repeats every `n` elements.
    Suffix(usize),
    /// Each small element covers a contiguous run of `n` big elements.
    Prefix(usize),
    General(Vec<usize>),
}

fn broadcast_plan(op: &'static str, big: &[usize], small: &[usize]) -> Result<Broadcast> {
    if big == small {
        return Ok(Broadcast::Same);
    }
    let err = || Error::shape(op, format!("{small:?} does not broadcast onto {big:?}"));
    if small.len() > big.len() {
        return Err(err());
    }
    let offset = big.len() - small.len();
    for (i, &s) in small.iter().enumerate() {
        if s != 1 && s != big[offset + i] {
            return Err(err());
        }
    }
    let small_n: usize = small.iter().product();
    if small_n == 1 {
        return Ok(Broadcast::Scalar);
    }
    // Aligned view of small with leading ones.
    let aligned: Vec<usize> =
        std::iter::repeat_n(1, offset).chain(small.iter().copied()).collect();
    // Suffix: leading dims are 1, trailing dims equal.
    if let Some(first) = aligned.iter().position(|&s| s != 1) {
        if aligned[first..] == big[first..] {
            return Ok(Broadcast::Suffix(small_n));
        }
    }
    // Prefix: trailing dims are 1, leading dims equal.
    if let Some(last) = aligned.iter().rposition(|&s| s != 1) {
        if aligned[..=last] == big[..=last] {
            return Ok(Broadcast::Prefix(big[last + 1..].iter().product()));
        }
    }
    let mut strides = vec![0usize; big.len()];
    let mut acc = 1;
    for i in (0..big.len()).rev() {
        if aligned[i] != 1 {
            strides[i] = acc;
            acc *= aligned[i];
        }
    }
    let n: usize = big.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; big.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..big.len()).rev() {
            idx[d] += 1;
            if idx[d] < big[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Broadcast::General(map))
}

impl Broadcast {
    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Suffix(n) => i % n,
            Broadcast::Prefix(n) => i / n,
            Broadcast::General(map) => map[i],
        }
    }
}

fn broadcast_binary(
    op: &'static str,
    a: &Array,
    b: &Array,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Array> {
    let plan = broadcast_plan(op, &a.shape, &b.shape)?;
    let data = match plan {
        Broadcast::Same => a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect(),
        _ => a.data.iter().enumerate().map(|(i, &x)| f(x, b.data[plan.index(i)])).collect(),
    };
    Ok(Array::raw(a.shape.clone(), data))
}

fn sum_to(a: &Array, shape: &[usize]) -> Result<Array> {
    let plan = broadcast_plan("sum_to", &a.shape, shape)?;
    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for (i, &v) in a.data.iter().enumerate() {
        out[plan.index(i)] += v;
    }
    Array::new(shape.to_vec(), out)
}

fn broadcast_to(a: &Array, shape: &[usize]) -> Result<Array> {
    let plan = broadcast_plan("broadcast_to", shape, &a.shape)?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|i| a.data[plan.index(i)]).collect();
    Array::new(shape.to_vec(), data)
}

fn softmax_lastdim(a: &Array) -> Array {
    let d = a.last_dim();
    let mut out = Vec::with_capacity(a.len());
    for row in a.data.chunks(d) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let start = out.len();
        let mut total = 0.0;
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    Array::raw(a.shape.clone(), out)
}

fn layer_norm(x: &Array, gain: &Array, bias: &Array, eps: f64) -> Result<Array> {
    let d = x.last_dim();
    if gain.shape != [d] || bias.shape != [d] {
        return Err(Error::shape(
            "layer_norm",
            format!("x {:?}, gain {:?}, bias {:?}", x.shape, gain.shape, bias.shape),
        ));
    }
    let mut out = Vec::with_capacity(x.len());
    for row in x.data.chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for (j, &v) in row.iter().enumerate() {
            out.push((v - mean) * rstd * gain.data[j] + bias.data[j]);
        }
    }
    Ok(Array::raw(x.shape.clone(), out))
}

fn embed_lookup(table: &Array, ids: &[usize]) -> Result<Array> {
    if table.rank() != 2 {
        return Err(Error::shape("embed_lookup", format!("table must be rank 2, got {:?}", table.shape)));
    }
    if ids.is_empty() {
        return Err(Error::shape("embed_lookup", "no ids"));
    }
    let (v, d) = (table.shape[0], table.shape[1]);
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= v {
            return Err(Error::TokenOutOfRange { id, vocab: v });
        }
        out.extend_from_slice(&table.data[id * d..(id + 1) * d]);
    }
    Ok(Array::raw(vec![ids.len(), d], out))
}

fn scatter_rows(x: &Array, ids: &[usize], rows: usize) -> Result<Array> {
    if x.rank() != 2 || x.shape[0] != ids.len() {
        return Err(Error::shape("scatter_rows", format!("{:?} with {} ids", x.shape, ids.len())));
    }
    let d = x.shape[1];
    let mut out = vec![0.0; rows * d];
    for (r, &id) in ids.iter().enumerate() {
        if id >= rows {
            return Err(Error::TokenOutOfRange { id, vocab: rows });
        }
        for j in 0..d {
            out[id * d + j] += x.data[r * d + j];
        }
    }
    Ok(Array::raw(vec![rows, d], out))
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

fn concat(inputs: &[&Array], axis: usize) -> Result<Array> {
    let first = inputs[0];
    if axis >= first.rank() {
        return Err(Error::shape("concat", format!("axis {axis} out of range for {:?}", first.shape)));
    }
    for a in inputs {
        let same = a.rank() == first.rank()
            && a.shape.iter().zip(&first.shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !same {
            return Err(Error::shape("concat", format!("{:?} vs {:?} on axis {axis}", a.shape, first.shape)));
        }
    }
    let (outer, inner) = outer_inner(&first.shape, axis);
    let total_axis: usize = inputs.iter().map(|a| a.shape[axis]).sum();
    let mut out = Vec::with_capacity(outer * total_axis * inner);
    for o in 0..outer {
        for a in inputs {
            let block = a.shape[axis] * inner;
            out.extend_from_slice(&a.data[o * block..(o + 1) * block]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total_axis;
    Ok(Array::raw(shape, out))
}

fn slice(a: &Array, axis: usize, start: usize, end: usize) -> Result<Array> {
    if axis >= a.rank() || start >= end || end > a.shape[axis] {
        return Err(Error::shape("slice", format!("[{start}, {end}) on axis {axis} of {:?}", a.shape)));
    }
    let (outer, inner) = outer_inner(&a.shape, axis);
    let dim = a.shape[axis];
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * dim * inner;
        out.extend_from_slice(&a.data[base + start * inner..base + end * inner]);
    }
    let mut shape = a.shape.clone();
    shape[axis] = end - start;
    Ok(Array::raw(shape, out))
}

fn pad_slice(a: &Array, axis: usize, start: usize, full: usize) -> Result<Array> {
    if axis >= a.rank() || start + a.shape[axis] > full {
        return Err(Error::shape("pad_slice", format!("{:?} at {start} into {full} on axis {axis}", a.shape)));
    }
    let (outer, inner) = outer_inner(&a.shape, axis);
    let len = a.shape[axis];
    let mut out = vec![0.0; outer * full * inner];
    for o in 0..outer {
        let dst = o * full * inner + start * inner;
        out[dst..dst + len * inner].copy_from_slice(&a.data[o * len * inner..(o + 1) * len * inner]);
    }
    let mut shape = a.shape.clone();
    shape[axis] = full;
    Ok(Array::raw(shape, out))
}

fn reshape(a: &Array, shape: &[usize]) -> Result<Array> {
    if shape.is_empty() || shape.iter().product::<usize>() != a.len() || shape.contains(&0) {
        return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", a.shape)));
    }
    Ok(Array { shape: shape.to_vec(), data: a.data.clone() })
}

fn transpose_last2(a: &Array) -> Result<Array> {
    if a.rank() < 2 {
        return Err(Error::shape("transpose_last2", format!("rank {} < 2", a.rank())));
    }
    let r = a.rank();
    let (m, n) = (a.shape[r - 2], a.shape[r - 1]);
    let batch = a.len() / (m * n);
    let mut out = vec![0.0; a.len()];
    for b in 0..batch {
        let src = &a.data[b * m * n..(b + 1) * m * n];
        let dst = &mut out[b * m * n..(b + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    let mut shape = a.shape.clone();
    shape.swap(r - 2, r - 1);
    Ok(Array::raw(shape, out))
}

fn cross_entropy(logits: &Array, targets: &[usize]) -> Result<Array> {
    if logits.rank() != 2 || logits.shape[0] != targets.len() {
        return Err(Error::shape(
            "cross_entropy_with_logits",
            format!("logits {:?} with {} targets", logits.shape, targets.len()),
        ));
    }
    let v = logits.shape[1];
    let mut out = Vec::with_capacity(targets.len());
    for (row, &t) in logits.data.chunks(v).zip(targets) {
        if t >= v {
            return Err(Error::TokenOutOfRange { id: t, vocab: v });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
        out.push(lse - row[t]);
    }
    Ok(Array::raw(vec![targets.len()], out))
}

fn mask_fill(a: &Array, mask: &[bool], value: f64) -> Result<Array> {
    if mask.len() != a.len() {
        return Err(Error::shape("mask_fill", format!("mask of {} for {:?}", mask.len(), a.shape)));
    }
    let data = a.data.iter().zip(mask).map(|(&v, &m)| if m { value } else { v }).collect();
    Ok(Array::raw(a.shape.clone(), data))
}
