//! Dense row-major tensors of rank 1 to 3 with hand-written backward passes.

use std::fmt;

use crate::error::{dim_err, Error, Result};
use crate::flops;
use crate::scalar::Scalar;

/// Dense rank-1/2/3 array stored row-major.
#[derive(Clone, PartialEq)]
pub struct Tensor<S = f64> {
    shape: Vec<usize>,
    data: Vec<S>,
}

/// Gradients share the layout of the tensor they differentiate.
pub type Gradient<S = f64> = Tensor<S>;

impl<S: Scalar> fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .finish()
    }
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.len() > 3 {
        return Err(dim_err(format!("rank must be 1..=3, got shape {shape:?}")));
    }
    if shape.iter().any(|&d| d == 0) {
        return Err(dim_err(format!("zero-sized dimension in shape {shape:?}")));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        check_shape(&shape)?;
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(dim_err(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    /// Panics on an invalid shape; for internal construction with known-good dims.
    pub fn zeros(shape: &[usize]) -> Self {
        check_shape(shape).expect("valid shape");
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![S::zero(); n],
        }
    }

    pub fn filled(shape: &[usize], value: S) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn vector(data: Vec<S>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<S>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(dim_err("ragged rows"));
        }
        Self::matrix(r, c, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn zeros_like(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: vec![S::zero(); self.data.len()],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Row width of a rank-2 tensor (1 for vectors).
    pub fn cols(&self) -> usize {
        if self.rank() >= 2 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn row(&self, i: usize) -> &[S] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [S] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> S {
        self.data[r * self.shape[1] + c]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Result<Self> {
        check_shape(&shape)?;
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(dim_err(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| T::lit(x.as_f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> S {
        self.data.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
    }

    fn same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(dim_err(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: S, other: &Self) -> Result<()> {
        self.same_shape(other, "axpy")?;
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += alpha * b);
        Ok(())
    }

    pub fn scale(&self, s: S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| x * s).collect(),
        }
    }

    pub fn scale_in_place(&mut self, s: S) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(dim_err(format!("transpose needs rank 2, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = Self::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(out)
    }

    /// Treats a vector as a one-row matrix; matrices pass through.
    pub fn as_matrix(&self) -> Result<Self> {
        match self.rank() {
            1 => self.clone().reshape(vec![1, self.len()]),
            2 => Ok(self.clone()),
            _ => Err(dim_err(format!("expected rank 1 or 2, got {:?}", self.shape))),
        }
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] || len == 0 {
            return Err(dim_err(format!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let dim = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner;
            data.extend_from_slice(&self.data[base + start * inner..base + (start + len) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Tensor { shape, data })
    }

    /// Inverse of [`concat`]: splits along `axis` into pieces of the given sizes.
    pub fn split(&self, axis: usize, sizes: &[usize]) -> Result<Vec<Self>> {
        if axis >= self.rank() || sizes.iter().sum::<usize>() != self.shape[axis] {
            return Err(dim_err(format!(
                "cannot split {:?} along {axis} into {sizes:?}",
                self.shape
            )));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &s in sizes {
            parts.push(self.narrow(axis, start, s)?);
            start += s;
        }
        Ok(parts)
    }
}

/// Matrix product `a[m×k] · b[k×n]`.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(dim_err(format!(
            "matmul: cannot multiply {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![S::zero(); m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    flops::record_macs(m * k * n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// `x[k] · w[k×n]` for a single row vector; returns a length-`n` vector.
pub fn vecmat<S: Scalar>(x: &[S], w: &Tensor<S>) -> Result<Tensor<S>> {
    if w.rank() != 2 || w.shape[0] != x.len() {
        return Err(dim_err(format!(
            "vecmat: vector of length {} against matrix {:?}",
            x.len(),
            w.shape
        )));
    }
    let n = w.shape[1];
    let mut out = vec![S::zero(); n];
    for (p, &xv) in x.iter().enumerate() {
        let wrow = &w.data[p * n..(p + 1) * n];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o += xv * wv;
        }
    }
    flops::record_macs(x.len() * n);
    Tensor::vector(out)
}

/// Gradients of `a · b` given the upstream gradient `g[m×n]`: `(g·bᵀ, aᵀ·g)`.
pub fn matmul_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    g: &Tensor<S>,
) -> Result<(Tensor<S>, Tensor<S>)> {
    let mut ga = a.zeros_like();
    let mut gb = b.zeros_like();
    matmul_backward_acc(a, b, g, Some(&mut ga), Some(&mut gb))?;
    Ok((ga, gb))
}

/// Accumulating form of [`matmul_backward`]; either output may be skipped.
pub fn matmul_backward_acc<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    g: &Tensor<S>,
    ga: Option<&mut Tensor<S>>,
    gb: Option<&mut Tensor<S>>,
) -> Result<()> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(dim_err(format!(
            "matmul_backward: {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    if g.shape != [m, n] {
        return Err(dim_err(format!(
            "matmul_backward: upstream {:?}, expected [{m}, {n}]",
            g.shape
        )));
    }
    if let Some(ga) = ga {
        a.same_shape(ga, "matmul_backward ga")?;
        for i in 0..m {
            let grow = &g.data[i * n..(i + 1) * n];
            for p in 0..k {
                let brow = &b.data[p * n..(p + 1) * n];
                let s: S = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                ga.data[i * k + p] += s;
            }
        }
    }
    if let Some(gb) = gb {
        b.same_shape(gb, "matmul_backward gb")?;
        for i in 0..m {
            let grow = &g.data[i * n..(i + 1) * n];
            for p in 0..k {
                let av = a.data[i * k + p];
                let gbrow = &mut gb.data[p * n..(p + 1) * n];
                for (o, &gv) in gbrow.iter_mut().zip(grow) {
                    *o += av * gv;
                }
            }
        }
    }
    Ok(())
}

fn softmax_slice<S: Scalar>(logits: &[S], out: &mut [S]) {
    let max = logits.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
    let mut sum = S::zero();
    for (o, &x) in out.iter_mut().zip(logits) {
        *o = (x - max).exp();
        sum += *o;
    }
    out.iter_mut().for_each(|o| *o /= sum);
    flops::record_transcendental(logits.len());
}

/// Numerically stable softmax of a vector.
pub fn softmax<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    if logits.rank() != 1 {
        return Err(dim_err(format!("softmax expects a vector, got {:?}", logits.shape)));
    }
    let mut out = logits.zeros_like();
    softmax_slice(&logits.data, &mut out.data);
    Ok(out)
}

pub fn softmax_of_slice<S: Scalar>(logits: &[S]) -> Result<Tensor<S>> {
    if logits.is_empty() {
        return Err(Error::Dimension("softmax of empty input".into()));
    }
    let mut out = vec![S::zero(); logits.len()];
    softmax_slice(logits, &mut out);
    Tensor::vector(out)
}

/// Row-wise softmax of a matrix.
pub fn softmax_rows<S: Scalar>(logits: &Tensor<S>) -> Result<Tensor<S>> {
    if logits.rank() != 2 {
        return Err(dim_err(format!("softmax_rows expects a matrix, got {:?}", logits.shape)));
    }
    let mut out = logits.zeros_like();
    let c = logits.cols();
    for (src, dst) in logits.data.chunks(c).zip(out.data.chunks_mut(c)) {
        softmax_slice(src, dst);
    }
    Ok(out)
}

/// Backward of softmax for one distribution: `p ⊙ (g − ⟨g, p⟩)`.
pub fn softmax_backward_slice<S: Scalar>(probs: &[S], grad: &[S], out: &mut [S]) {
    let dot: S = probs.iter().zip(grad).map(|(&p, &g)| p * g).sum();
    for ((o, &p), &g) in out.iter_mut().zip(probs).zip(grad) {
        *o = p * (g - dot);
    }
}

pub fn softmax_backward<S: Scalar>(probs: &Tensor<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
    probs.same_shape(grad, "softmax_backward")?;
    let c = if probs.rank() == 1 { probs.len() } else { probs.cols() };
    let mut out = probs.zeros_like();
    for ((p, g), o) in probs
        .data
        .chunks(c)
        .zip(grad.data.chunks(c))
        .zip(out.data.chunks_mut(c))
    {
        softmax_backward_slice(p, g, o);
    }
    Ok(out)
}

fn log_softmax_slice<S: Scalar>(x: &[S], out: &mut [S]) {
    let max = x.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let sum: S = x.iter().map(|&v| (v - max).exp()).sum();
    let lse = max + sum.ln();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = v - lse;
    }
    flops::record_transcendental(x.len() + 1);
}

/// Log-softmax of a vector, or row-wise for a matrix.
pub fn log_softmax<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    if x.rank() > 2 {
        return Err(dim_err(format!("log_softmax expects rank 1 or 2, got {:?}", x.shape)));
    }
    let c = if x.rank() == 1 { x.len() } else { x.cols() };
    let mut out = x.zeros_like();
    for (src, dst) in x.data.chunks(c).zip(out.data.chunks_mut(c)) {
        log_softmax_slice(src, dst);
    }
    Ok(out)
}

/// Backward of log-softmax given its output: `g − softmax · Σg` per row.
pub fn log_softmax_backward<S: Scalar>(log_probs: &Tensor<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
    log_probs.same_shape(grad, "log_softmax_backward")?;
    let c = if log_probs.rank() == 1 { log_probs.len() } else { log_probs.cols() };
    let mut out = grad.clone();
    for ((lp, g), o) in log_probs
        .data
        .chunks(c)
        .zip(grad.data.chunks(c))
        .zip(out.data.chunks_mut(c))
    {
        let gs: S = g.iter().copied().sum();
        for (o, &l) in o.iter_mut().zip(lp) {
            *o -= l.exp() * gs;
        }
    }
    Ok(out)
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|&v| v.max(S::zero())).collect(),
    }
}

/// Gradient of ReLU given its input; zero gradient at exactly 0.
pub fn relu_backward<S: Scalar>(input: &Tensor<S>, grad: &Tensor<S>) -> Result<Tensor<S>> {
    input.same_shape(grad, "relu_backward")?;
    Ok(Tensor {
        shape: input.shape.clone(),
        data: input
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&x, &g)| if x > S::zero() { g } else { S::zero() })
            .collect(),
    })
}

/// Adds a bias vector to every row of a matrix in place.
pub fn add_row_bias<S: Scalar>(x: &mut Tensor<S>, bias: &Tensor<S>) -> Result<()> {
    if x.rank() != 2 || bias.rank() != 1 || x.shape[1] != bias.len() {
        return Err(dim_err(format!(
            "bias {:?} does not fit rows of {:?}",
            bias.shape, x.shape
        )));
    }
    let c = bias.len();
    for row in x.data.chunks_mut(c) {
        row.iter_mut().zip(&bias.data).for_each(|(a, &b)| *a += b);
    }
    Ok(())
}

/// Accumulates column sums of `g` into `bias_grad` (backward of [`add_row_bias`]).
pub fn row_bias_backward<S: Scalar>(g: &Tensor<S>, bias_grad: &mut Tensor<S>) -> Result<()> {
    if g.rank() != 2 || g.shape[1] != bias_grad.len() {
        return Err(dim_err(format!(
            "bias grad {:?} does not fit {:?}",
            bias_grad.shape, g.shape
        )));
    }
    let c = bias_grad.len();
    for row in g.data.chunks(c) {
        bias_grad.data.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    Ok(())
}

/// Concatenates tensors of equal rank along `axis`.
pub fn concat<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    let first = parts
        .first()
        .ok_or_else(|| dim_err("concat of zero parts"))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(dim_err(format!("concat axis {axis} out of range for rank {rank}")));
    }
    for p in parts {
        let ok = p.rank() == rank
            && p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(dim_err(format!(
                "concat along {axis}: {:?} incompatible with {:?}",
                p.shape, first.shape
            )));
        }
    }
    let outer: usize = first.shape[..axis].iter().product();
    let inner: usize = first.shape[axis + 1..].iter().product();
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor { shape, data })
}

/// Column-wise mean of a `T×d` sequence.
pub fn mean_over_time<S: Scalar>(seq: &Tensor<S>) -> Result<Tensor<S>> {
    if seq.rank() != 2 {
        return Err(dim_err(format!("mean_over_time expects T×d, got {:?}", seq.shape)));
    }
    let (t, d) = (seq.shape[0], seq.shape[1]);
    let mut out = vec![S::zero(); d];
    for row in seq.data.chunks(d) {
        out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
    }
    let inv = S::one() / S::lit(t as f64);
    out.iter_mut().for_each(|o| *o *= inv);
    Tensor::vector(out)
}

/// Same as [`mean_over_time`] but reports an empty sequence instead of a bad shape.
pub fn mean_over_time_rows<S: Scalar>(rows: &[Vec<S>]) -> Result<Tensor<S>> {
    if rows.is_empty() {
        return Err(Error::EmptySequence("mean over zero frames".into()));
    }
    mean_over_time(&Tensor::from_rows(rows)?)
}

/// Each frame receives `g / T`.
pub fn mean_over_time_backward<S: Scalar>(frames: usize, grad: &Tensor<S>) -> Result<Tensor<S>> {
    if frames == 0 {
        return Err(Error::EmptySequence("mean over zero frames".into()));
    }
    let d = grad.len();
    let inv = S::one() / S::lit(frames as f64);
    let row: Vec<S> = grad.data.iter().map(|&g| g * inv).collect();
    let mut data = Vec::with_capacity(frames * d);
    for _ in 0..frames {
        data.extend_from_slice(&row);
    }
    Tensor::matrix(frames, d, data)
}
