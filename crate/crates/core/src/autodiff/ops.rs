//! Primitive ops: forward on `Var`, vector-Jacobian products in `vjp`.

use std::f64::consts::PI;

use super::{Node, NodeId, Op, Var};
use crate::tensor::{numel, Result, Tensor, TensorError};

const GELU_C: f64 = 0.044_715;

fn gelu_k() -> f64 {
    (2.0 / PI).sqrt()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (gelu_k() * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (gelu_k() * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * gelu_k() * (1.0 + 3.0 * GELU_C * x * x)
}

/// `(outer, len, inner)` around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            rank: shape.len(),
        });
    }
    Ok(())
}

/// `rhs` must equal `lhs` or be a trailing suffix of it.
fn check_suffix(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<()> {
    if rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        Ok(())
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        })
    }
}

fn reduce_suffix(g: &Tensor, shape: &[usize]) -> Tensor {
    let n = numel(shape);
    let mut out = vec![0.0; n];
    for (i, &x) in g.data().iter().enumerate() {
        out[i % n] += x;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = t.numel();
    let src = t.data();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(src[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Batch layout of a broadcast matmul.
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    /// `(a batch index, b batch index)` per output batch entry.
    pub pairs: Vec<(usize, usize)>,
    pub i: usize,
    pub k: usize,
    pub j: usize,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    let err = || TensorError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (ab, am) = a.split_at(a.len() - 2);
    let (bb, bm) = b.split_at(b.len() - 2);
    if am[1] != bm[0] {
        return Err(err());
    }
    let r = ab.len().max(bb.len());
    let ext = |s: &[usize], d: usize| {
        if d + s.len() >= r {
            s[d + s.len() - r]
        } else {
            1
        }
    };
    let mut batch = Vec::with_capacity(r);
    for d in 0..r {
        let (ea, eb) = (ext(ab, d), ext(bb, d));
        if ea != eb && ea != 1 && eb != 1 {
            return Err(err());
        }
        batch.push(ea.max(eb));
    }
    let strides = |s: &[usize]| {
        let mut st = vec![0usize; r];
        let mut acc = 1;
        for d in (0..r).rev() {
            let e = ext(s, d);
            st[d] = if e == 1 { 0 } else { acc };
            acc *= e;
        }
        st
    };
    let (sa, sb) = (strides(ab), strides(bb));
    let nb = numel(&batch);
    let mut pairs = Vec::with_capacity(nb);
    let mut idx = vec![0usize; r];
    for _ in 0..nb {
        let pa = idx.iter().zip(&sa).map(|(i, s)| i * s).sum();
        let pb = idx.iter().zip(&sb).map(|(i, s)| i * s).sum();
        pairs.push((pa, pb));
        for d in (0..r).rev() {
            idx[d] += 1;
            if idx[d] < batch[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    let mut out_shape = batch;
    out_shape.extend([am[0], bm[1]]);
    Ok(MatmulPlan {
        out_shape,
        pairs,
        i: am[0],
        k: am[1],
        j: bm[1],
    })
}

/// `out[i,j] += sum_k a[i,k] b[k,j]`
pub(crate) fn gemm_acc(a: &[f64], b: &[f64], out: &mut [f64], i: usize, k: usize, j: usize) {
    for r in 0..i {
        let orow = &mut out[r * j..(r + 1) * j];
        for (kk, &av) in a[r * k..(r + 1) * k].iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[kk * j..(kk + 1) * j];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[i,k] += sum_j g[i,j] b[k,j]`
fn gemm_nt_acc(g: &[f64], b: &[f64], out: &mut [f64], i: usize, k: usize, j: usize) {
    for r in 0..i {
        let grow = &g[r * j..(r + 1) * j];
        for kk in 0..k {
            let brow = &b[kk * j..(kk + 1) * j];
            let mut s = 0.0;
            for (x, y) in grow.iter().zip(brow) {
                s += x * y;
            }
            out[r * k + kk] += s;
        }
    }
}

/// `out[k,j] += sum_i a[i,k] g[i,j]`
fn gemm_tn_acc(a: &[f64], g: &[f64], out: &mut [f64], i: usize, k: usize, j: usize) {
    for r in 0..i {
        let grow = &g[r * j..(r + 1) * j];
        for kk in 0..k {
            let av = a[r * k + kk];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[kk * j..(kk + 1) * j];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn layer_norm_row(x: &[f64], eps: f64, out: &mut [f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let inv = 1.0 / (var + eps).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (v - mean) * inv;
    }
    inv
}

impl<'t> Var<'t> {
    fn push(&self, value: Tensor, op: Op, rg: bool) -> Var<'t> {
        self.tape.push(value, op, rg)
    }

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Var<'t> {
        let v = self.value().map(f);
        self.push(v, op, self.requires_grad())
    }

    fn binary(
        &self,
        rhs: &Var<'t>,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        check_suffix(name, a.shape(), b.shape())?;
        let nb = b.numel();
        let bd = b.data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.push(Tensor::from_parts(a.shape().to_vec(), data), op, rg))
    }

    /// Elementwise sum; `rhs` may be a trailing-suffix broadcast of `self`.
    pub fn add(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "add", Op::Add(self.id, rhs.id), |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "sub", Op::Sub(self.id, rhs.id), |a, b| a - b)
    }

    pub fn mul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        self.binary(rhs, "mul", Op::Mul(self.id, rhs.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |x| x * c)
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(Op::AddScalar(self.id), |x| x + c)
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        let v = self.value().map(f64::exp);
        if !v.is_finite() {
            return Err(TensorError::Invalid {
                op: "exp",
                msg: "overflow to a non-finite value".into(),
            });
        }
        Ok(self.push(v, Op::Exp(self.id), self.requires_grad()))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || !v.is_finite()) {
            return Err(TensorError::Invalid {
                op: "log",
                msg: format!("non-positive input {bad}"),
            });
        }
        Ok(self.push(x.map(f64::ln), Op::Log(self.id), self.requires_grad()))
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(Op::Sigmoid(self.id), sigmoid)
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |x| x.max(0.0))
    }

    /// `ln(1 + e^x)` without overflow.
    pub fn softplus(&self) -> Var<'t> {
        self.unary(Op::Softplus(self.id), softplus)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Var<'t> {
        self.unary(Op::Gelu(self.id), gelu)
    }

    pub fn sum_all(&self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(self.id), self.requires_grad())
    }

    pub fn mean(&self) -> Var<'t> {
        let x = self.value();
        let s = x.data().iter().sum::<f64>() / x.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(self.id), self.requires_grad())
    }

    /// Sums out `axis`, dropping it from the shape.
    pub fn sum(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("sum", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let d = x.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    out[o * inner + i] += d[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::SumAxis(self.id, axis),
            self.requires_grad(),
        ))
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(self.id), self.requires_grad()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let x = self.value();
        let r = x.rank();
        if r < 2 {
            return Err(TensorError::Axis {
                op: "transpose",
                axis: 1,
                rank: r,
            });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        Ok(self.push(
            permute_data(&x, &perm),
            Op::Transpose(self.id),
            self.requires_grad(),
        ))
    }

    /// Output axis `d` is input axis `perm[d]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        let valid = perm.len() == x.rank()
            && perm
                .iter()
                .all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("{perm:?} is not a permutation of rank {}", x.rank()),
            });
        }
        Ok(self.push(
            permute_data(&x, perm),
            Op::Permute(self.id, perm.to_vec()),
            self.requires_grad(),
        ))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        check_axis("concat", &base, axis)?;
        for v in &values[1..] {
            let s = v.shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let total: usize = values.iter().map(|v| v.shape()[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = parts.iter().any(|p| p.requires_grad());
        Ok(first.push(
            Tensor::from_parts(shape, out),
            Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
            rg,
        ))
    }

    /// `len` entries of `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("slice", x.shape(), axis)?;
        let (outer, ext, inner) = split_axis(x.shape(), axis);
        if len == 0 || start + len > ext {
            return Err(TensorError::Invalid {
                op: "slice",
                msg: format!("range {start}..{} outside extent {ext}", start + len),
            });
        }
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * ext + start) * inner;
            out.extend_from_slice(&x.data()[b..b + len * inner]);
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            self.requires_grad(),
        ))
    }

    /// Selects entries of axis 0; `None` yields a zero row.
    pub fn gather(&self, index: &[Option<usize>]) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() == 0 || index.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather",
                msg: "needs rank >= 1 and a non-empty index".into(),
            });
        }
        let rows = x.shape()[0];
        let row = x.numel() / rows;
        let mut out = Vec::with_capacity(index.len() * row);
        for ix in index {
            match *ix {
                Some(r) if r < rows => out.extend_from_slice(&x.data()[r * row..(r + 1) * row]),
                Some(r) => {
                    return Err(TensorError::Invalid {
                        op: "gather",
                        msg: format!("row {r} out of range {rows}"),
                    })
                }
                None => out.extend(std::iter::repeat_n(0.0, row)),
            }
        }
        let mut shape = x.shape().to_vec();
        shape[0] = index.len();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Gather {
                input: self.id,
                index: index.to_vec(),
            },
            self.requires_grad(),
        ))
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let x = self.value();
        check_axis("softmax", x.shape(), axis)?;
        let (outer, len, inner) = split_axis(x.shape(), axis);
        let d = x.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| d[at(l)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for l in 0..len {
                    let e = (d[at(l)] - m).exp();
                    out[at(l)] = e;
                    s += e;
                }
                for l in 0..len {
                    out[at(l)] /= s;
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::Softmax(self.id, axis),
            self.requires_grad(),
        ))
    }

    /// `log(sum(exp(x)))` over the last axis. Terms are summed in ascending
    /// order, so the result does not depend on the order of the entries.
    pub fn logsumexp(&self) -> Result<Var<'t>> {
        let x = self.value();
        let r = x.rank();
        if r == 0 {
            return Err(TensorError::Axis {
                op: "logsumexp",
                axis: 0,
                rank: 0,
            });
        }
        let len = x.shape()[r - 1];
        let mut out = Vec::with_capacity(x.numel() / len);
        let mut terms = Vec::with_capacity(len);
        for row in x.data().chunks(len) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            terms.clear();
            terms.extend(row.iter().map(|v| (v - m).exp()));
            terms.sort_by(f64::total_cmp);
            out.push(m + terms.iter().sum::<f64>().ln());
        }
        Ok(self.push(
            Tensor::from_parts(x.shape()[..r - 1].to_vec(), out),
            Op::LogSumExp(self.id),
            self.requires_grad(),
        ))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine).
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let r = x.rank();
        if r == 0 {
            return Err(TensorError::Axis {
                op: "layer_norm",
                axis: 0,
                rank: 0,
            });
        }
        let len = x.shape()[r - 1];
        let mut out = vec![0.0; x.numel()];
        for (src, dst) in x.data().chunks(len).zip(out.chunks_mut(len)) {
            layer_norm_row(src, eps, dst);
        }
        Ok(self.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::LayerNorm(self.id, eps),
            self.requires_grad(),
        ))
    }

    /// Scales each last-axis vector to unit L2 norm (norm floored at `eps`).
    pub fn l2_normalize(&self, eps: f64) -> Result<Var<'t>> {
        let x = self.value();
        let r = x.rank();
        if r == 0 {
            return Err(TensorError::Axis {
                op: "l2_normalize",
                axis: 0,
                rank: 0,
            });
        }
        let len = x.shape()[r - 1];
        let mut out = Vec::with_capacity(x.numel());
        for row in x.data().chunks(len) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            out.extend(row.iter().map(|v| v / n));
        }
        Ok(self.push(
            Tensor::from_parts(x.shape().to_vec(), out),
            Op::L2Normalize(self.id, eps),
            self.requires_grad(),
        ))
    }

    /// Batched matrix product; batch extents broadcast numpy-style.
    pub fn matmul(&self, rhs: &Var<'t>) -> Result<Var<'t>> {
        let (a, b) = (self.value(), rhs.value());
        let plan = matmul_plan(a.shape(), b.shape())?;
        let (i, k, j) = (plan.i, plan.k, plan.j);
        let mut out = vec![0.0; numel(&plan.out_shape)];
        super::count_macs((plan.pairs.len() * i * k * j) as u64);
        for (n, &(pa, pb)) in plan.pairs.iter().enumerate() {
            gemm_acc(
                &a.data()[pa * i * k..(pa + 1) * i * k],
                &b.data()[pb * k * j..(pb + 1) * k * j],
                &mut out[n * i * j..(n + 1) * i * j],
                i,
                k,
                j,
            );
        }
        let rg = self.requires_grad() || rhs.requires_grad();
        Ok(self.push(
            Tensor::from_parts(plan.out_shape, out),
            Op::MatMul(self.id, rhs.id),
            rg,
        ))
    }
}

fn unary_grad(g: &Tensor, x: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(
        g.shape().to_vec(),
        g.data()
            .iter()
            .zip(x.data())
            .map(|(g, &x)| g * f(x))
            .collect(),
    )
}

/// Input gradients of one recorded op.
pub(super) fn vjp(op: &Op, nodes: &[Node], out: &Tensor, g: &Tensor) -> Vec<(NodeId, Tensor)> {
    let val = |id: NodeId| &*nodes[id].value;
    match op {
        Op::Leaf => vec![],
        Op::Add(a, b) => vec![(*a, g.clone()), (*b, reduce_suffix(g, val(*b).shape()))],
        Op::Sub(a, b) => vec![
            (*a, g.clone()),
            (*b, reduce_suffix(&g.map(|x| -x), val(*b).shape())),
        ],
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let nb = bv.numel();
            let mut ga = Vec::with_capacity(g.numel());
            let mut gb = vec![0.0; nb];
            for (i, &gi) in g.data().iter().enumerate() {
                ga.push(gi * bv.data()[i % nb]);
                gb[i % nb] += gi * av.data()[i];
            }
            vec![
                (*a, Tensor::from_parts(av.shape().to_vec(), ga)),
                (*b, Tensor::from_parts(bv.shape().to_vec(), gb)),
            ]
        }
        Op::Scale(a, c) => vec![(*a, g.map(|x| x * c))],
        Op::AddScalar(a) => vec![(*a, g.clone())],
        Op::Exp(a) => vec![(*a, unary_grad(g, out, |y| y))],
        Op::Log(a) => vec![(*a, unary_grad(g, val(*a), |x| 1.0 / x))],
        Op::Sigmoid(a) => vec![(*a, unary_grad(g, out, |y| y * (1.0 - y)))],
        Op::Relu(a) => vec![(
            *a,
            unary_grad(g, val(*a), |x| if x > 0.0 { 1.0 } else { 0.0 }),
        )],
        Op::Softplus(a) => vec![(*a, unary_grad(g, val(*a), sigmoid))],
        Op::Gelu(a) => vec![(*a, unary_grad(g, val(*a), gelu_grad))],
        Op::SumAll(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item()))],
        Op::Mean(a) => {
            let x = val(*a);
            vec![(
                *a,
                Tensor::full(x.shape().to_vec(), g.item() / x.numel() as f64),
            )]
        }
        Op::SumAxis(a, axis) => {
            let shape = val(*a).shape();
            let (outer, len, inner) = split_axis(shape, *axis);
            let mut gx = vec![0.0; numel(shape)];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        gx[(o * len + l) * inner + i] = g.data()[o * inner + i];
                    }
                }
            }
            vec![(*a, Tensor::from_parts(shape.to_vec(), gx))]
        }
        Op::Reshape(a) => vec![(*a, g.reshape(val(*a).shape().to_vec()).unwrap())],
        Op::Transpose(a) => {
            let r = g.rank();
            let mut perm: Vec<usize> = (0..r).collect();
            perm.swap(r - 2, r - 1);
            vec![(*a, permute_data(g, &perm))]
        }
        Op::Permute(a, perm) => vec![(*a, permute_data(g, &inverse_perm(perm)))],
        Op::Concat(ids, axis) => {
            let shape = g.shape();
            let outer = numel(&shape[..*axis]);
            let inner = numel(&shape[axis + 1..]);
            let total = shape[*axis];
            let mut offset = 0;
            ids.iter()
                .map(|&id| {
                    let s = val(id).shape();
                    let len = s[*axis];
                    let mut gx = Vec::with_capacity(numel(s));
                    for o in 0..outer {
                        let b = (o * total + offset) * inner;
                        gx.extend_from_slice(&g.data()[b..b + len * inner]);
                    }
                    offset += len;
                    (id, Tensor::from_parts(s.to_vec(), gx))
                })
                .collect()
        }
        Op::Slice { input, axis, start } => {
            let shape = val(*input).shape();
            let (outer, ext, inner) = split_axis(shape, *axis);
            let len = g.shape()[*axis];
            let mut gx = vec![0.0; numel(shape)];
            for o in 0..outer {
                let b = (o * ext + start) * inner;
                gx[b..b + len * inner]
                    .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![(*input, Tensor::from_parts(shape.to_vec(), gx))]
        }
        Op::Gather { input, index } => {
            let shape = val(*input).shape();
            let row = numel(&shape[1..]);
            let mut gx = vec![0.0; numel(shape)];
            for (n, ix) in index.iter().enumerate() {
                if let Some(r) = ix {
                    for c in 0..row {
                        gx[r * row + c] += g.data()[n * row + c];
                    }
                }
            }
            vec![(*input, Tensor::from_parts(shape.to_vec(), gx))]
        }
        Op::Softmax(a, axis) => {
            let (outer, len, inner) = split_axis(out.shape(), *axis);
            let (y, gd) = (out.data(), g.data());
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let dot: f64 = (0..len).map(|l| gd[at(l)] * y[at(l)]).sum();
                    for l in 0..len {
                        gx[at(l)] = y[at(l)] * (gd[at(l)] - dot);
                    }
                }
            }
            vec![(*a, Tensor::from_parts(out.shape().to_vec(), gx))]
        }
        Op::LogSumExp(a) => {
            let x = val(*a);
            let len = *x.shape().last().unwrap();
            let mut gx = Vec::with_capacity(x.numel());
            for (r, row) in x.data().chunks(len).enumerate() {
                let (lse, gr) = (out.data()[r], g.data()[r]);
                gx.extend(row.iter().map(|v| gr * (v - lse).exp()));
            }
            vec![(*a, Tensor::from_parts(x.shape().to_vec(), gx))]
        }
        Op::LayerNorm(a, eps) => {
            let x = val(*a);
            let len = *x.shape().last().unwrap();
            let n = len as f64;
            let mut gx = vec![0.0; x.numel()];
            let mut y = vec![0.0; len];
            for ((xr, gr), dst) in x
                .data()
                .chunks(len)
                .zip(g.data().chunks(len))
                .zip(gx.chunks_mut(len))
            {
                let inv = layer_norm_row(xr, *eps, &mut y);
                let mg = gr.iter().sum::<f64>() / n;
                let mgy = gr.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / n;
                for ((d, gv), yv) in dst.iter_mut().zip(gr).zip(&y) {
                    *d = inv * (gv - mg - yv * mgy);
                }
            }
            vec![(*a, Tensor::from_parts(x.shape().to_vec(), gx))]
        }
        Op::L2Normalize(a, eps) => {
            let x = val(*a);
            let len = *x.shape().last().unwrap();
            let mut gx = Vec::with_capacity(x.numel());
            for ((xr, gr), yr) in x
                .data()
                .chunks(len)
                .zip(g.data().chunks(len))
                .zip(out.data().chunks(len))
            {
                let raw = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                if raw > *eps {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    gx.extend(gr.iter().zip(yr).map(|(gv, yv)| (gv - yv * dot) / raw));
                } else {
                    gx.extend(gr.iter().map(|gv| gv / eps));
                }
            }
            vec![(*a, Tensor::from_parts(x.shape().to_vec(), gx))]
        }
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let plan = matmul_plan(av.shape(), bv.shape()).expect("validated in forward");
            let (i, k, j) = (plan.i, plan.k, plan.j);
            let mut ga = vec![0.0; av.numel()];
            let mut gb = vec![0.0; bv.numel()];
            for (n, &(pa, pb)) in plan.pairs.iter().enumerate() {
                let gs = &g.data()[n * i * j..(n + 1) * i * j];
                gemm_nt_acc(
                    gs,
                    &bv.data()[pb * k * j..(pb + 1) * k * j],
                    &mut ga[pa * i * k..(pa + 1) * i * k],
                    i,
                    k,
                    j,
                );
                gemm_tn_acc(
                    &av.data()[pa * i * k..(pa + 1) * i * k],
                    gs,
                    &mut gb[pb * k * j..(pb + 1) * k * j],
                    i,
                    k,
                    j,
                );
            }
            vec![
                (*a, Tensor::from_parts(av.shape().to_vec(), ga)),
                (*b, Tensor::from_parts(bv.shape().to_vec(), gb)),
            ]
        }
        Op::Custom(op, ids) => {
            let inputs: Vec<&Tensor> = ids.iter().map(|&id| val(id)).collect();
            ids.iter()
                .copied()
                .zip(op.backward(&inputs, out, g))
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use crate::autodiff::Tape;
    use crate::tensor::Tensor;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), d.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let tape = Tape::new();
        let i = tape.constant(Tensor::eye(2));
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        assert_eq!(i.matmul(&m).unwrap().value().data(), &[1., 2., 3., 4.]);
        let a = tape.constant(t(&[2, 2], &[1., 0., 0., 0.]));
        let b = tape.constant(t(&[2, 2], &[0., 1., 1., 0.]));
        assert_eq!(a.matmul(&b).unwrap().value().data(), &[0., 1., 0., 0.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([4, 2]));
        let msg = a.matmul(&b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_broadcasts_batch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::from_fn([3, 2, 2], |i| i as f64));
        let w = tape.constant(Tensor::eye(2));
        let out = a.matmul(&w).unwrap();
        assert_eq!(out.shape(), vec![3, 2, 2]);
        assert_eq!(out.value().data(), a.value().data());
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::new();
        let x = tape.constant(t(&[3], &[0., 0., 0.]));
        for v in x.softmax(0).unwrap().value().data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = tape.constant(t(&[3], &[1000., 0., -1000.]));
        let s = y.softmax(0).unwrap().value();
        assert!(s.is_finite());
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn scalar_examples() {
        let tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0));
        assert_eq!(z.sigmoid().value().item(), 0.5);
        let v = tape.constant(t(&[3], &[1., 2., 3.]));
        let s = v.sum(0).unwrap();
        assert_eq!(s.shape(), Vec::<usize>::new());
        assert_eq!(s.value().item(), 6.0);
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1., 2.]));
        let loss = x.mul(&x).unwrap().sum_all();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&x).data(), &[2., 4.]);
    }

    #[test]
    fn softmax_pick_first_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[0., 0.]));
        let first = x.softmax(0).unwrap().slice(0, 0, 1).unwrap().sum_all();
        let g = tape.backward(&first).unwrap();
        assert_eq!(g.wrt(&x).data(), &[0.25, -0.25]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros([2]));
        assert!(tape.backward(&x.scale(2.0)).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.param(Tensor::ones([2]));
        let y = tape.param(Tensor::ones([3]));
        let loss = x.sum_all();
        let g = tape.backward(&loss).unwrap();
        assert_eq!(g.wrt(&y), &Tensor::zeros([3]));
    }

    #[test]
    fn gradient_accumulates_over_fanout() {
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let loss = x.add(&x).unwrap().add(&x).unwrap().sum_all();
        assert_eq!(tape.backward(&loss).unwrap().wrt(&x).data(), &[3.0]);
    }

    #[test]
    fn suffix_broadcast_add() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros([2, 3]));
        let b = tape.param(t(&[3], &[1., 2., 3.]));
        let y = x.add(&b).unwrap();
        assert_eq!(y.value().data(), &[1., 2., 3., 1., 2., 3.]);
        let g = tape.backward(&y.sum_all()).unwrap();
        assert_eq!(g.wrt(&b).data(), &[2., 2., 2.]);
        assert!(x.add(&tape.constant(Tensor::zeros([2]))).is_err());
    }

    #[test]
    fn logsumexp_ignores_order() {
        let tape = Tape::new();
        let a = tape.constant(t(&[4], &[0.3, -1.7, 2.2, 0.9]));
        let b = tape.constant(t(&[4], &[2.2, 0.9, 0.3, -1.7]));
        assert_eq!(
            a.logsumexp().unwrap().value().item().to_bits(),
            b.logsumexp().unwrap().value().item().to_bits()
        );
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        assert!(tape.constant(t(&[2], &[1.0, 0.0])).log().is_err());
    }

    #[test]
    fn wrong_sign_injection_flips_named_op() {
        let tape = Tape::new();
        tape.inject_wrong_sign("exp");
        let x = tape.param(t(&[1], &[0.0]));
        let loss = x.exp().unwrap().sum_all();
        assert_eq!(tape.backward(&loss).unwrap().wrt(&x).data(), &[-1.0]);
    }
}
