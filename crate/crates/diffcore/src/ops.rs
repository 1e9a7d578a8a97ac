//! Forward and backward kernels for the closed operation set.
//!
//! Every kernel works on flat row-major slices. Backward kernels receive the
//! upstream gradient of the output and return one gradient buffer per input
//! (or `None` when that input does not need one).

use crate::error::{DiffError, Result};
use crate::tensor::Tensor;

/// The closed set of differentiable operations.
#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// 2-D matrix product, optionally against the transpose of the right operand.
    MatMul { transpose_rhs: bool },
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// Softmax over the last axis.
    RowSoftmax,
    Log,
    Exp,
    Relu,
    Sigmoid,
    /// Mean over one axis, or over everything when `None`.
    Mean(Option<usize>),
    Sum(Option<usize>),
    ConcatLast,
    /// Stride-1 "same" convolution of an `[H, W, Cin]` map with a `[kh, kw, Cin, Cout]` kernel.
    Conv2d,
    /// 2x2 max-pool with stride 2 over an `[H, W, C]` map.
    MaxPool2d,
    /// Normalization over the last axis, without affine terms.
    LayerNorm { eps: f64 },
    Reshape,
    Transpose,
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::MatMul { .. } => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::RowSoftmax => "row_softmax",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Mean(_) => "mean",
            Op::Sum(_) => "sum",
            Op::ConcatLast => "concat_last",
            Op::Conv2d => "conv2d",
            Op::MaxPool2d => "max_pool2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape => "reshape",
            Op::Transpose => "transpose",
        }
    }
}

/// Output of a forward kernel: the value plus any indices the backward pass needs.
pub(crate) struct Forward {
    pub value: Tensor,
    pub aux: Vec<usize>,
}

impl From<Tensor> for Forward {
    fn from(value: Tensor) -> Self {
        Forward { value, aux: Vec::new() }
    }
}

fn shape_of(dims: &[usize]) -> Vec<usize> {
    if dims.is_empty() {
        vec![1]
    } else {
        dims.to_vec()
    }
}

/// How the right operand of a binary elementwise op maps onto the left.
#[derive(Clone, Copy)]
enum Broadcast {
    Same,
    /// Right operand repeats every `period` elements.
    Suffix(usize),
    Scalar,
}

fn broadcast_rule(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Broadcast> {
    if lhs == rhs {
        return Ok(Broadcast::Same);
    }
    let rn: usize = rhs.iter().product();
    if rn == 1 {
        return Ok(Broadcast::Scalar);
    }
    if rhs.len() < lhs.len() && lhs.ends_with(rhs) {
        return Ok(Broadcast::Suffix(rn));
    }
    Err(DiffError::shape(op, lhs, rhs))
}

fn rhs_index(b: Broadcast, i: usize) -> usize {
    match b {
        Broadcast::Same => i,
        Broadcast::Suffix(p) => i % p,
        Broadcast::Scalar => 0,
    }
}

fn reduce_broadcast(b: Broadcast, g: &[f64], rn: usize) -> Vec<f64> {
    match b {
        Broadcast::Same => g.to_vec(),
        _ => {
            let mut out = vec![0.0; rn];
            for (i, v) in g.iter().enumerate() {
                out[rhs_index(b, i)] += v;
            }
            out
        }
    }
}

/// c[m,n] += a[m,k] * b[k,n]; zero entries of `a` are skipped.
pub(crate) fn mm_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// c[m,n] += a[m,k] * b[n,k]^T.
pub(crate) fn mm_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * n + j] += s;
        }
    }
}

/// c[m,n] += a[k,m]^T * b[k,n]; zero entries of `a` are skipped.
pub(crate) fn mm_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.shape().len() != rank {
        return Err(DiffError::contract(format!(
            "{op} expects rank {rank}, got shape {:?}",
            t.shape()
        )));
    }
    Ok(())
}

fn reduce_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn forward(op: &Op, inputs: &[&Tensor], target_shape: Option<&[usize]>) -> Result<Forward> {
    let arity_ok = match op {
        Op::MatMul { .. } | Op::Add | Op::Sub | Op::Mul | Op::Conv2d => inputs.len() == 2,
        Op::ConcatLast => !inputs.is_empty(),
        _ => inputs.len() == 1,
    };
    if !arity_ok {
        return Err(DiffError::contract(format!(
            "{} called with {} inputs",
            op.name(),
            inputs.len()
        )));
    }
    let x = inputs[0];
    let out: Forward = match op {
        Op::MatMul { transpose_rhs } => {
            let b = inputs[1];
            require_rank("matmul", x, 2)?;
            require_rank("matmul", b, 2)?;
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let (bk, n) = if *transpose_rhs {
                (b.shape()[1], b.shape()[0])
            } else {
                (b.shape()[0], b.shape()[1])
            };
            if k != bk {
                return Err(DiffError::shape("matmul", x.shape(), b.shape()));
            }
            let mut c = vec![0.0; m * n];
            if *transpose_rhs {
                mm_nt_acc(x.data(), b.data(), &mut c, m, k, n);
            } else {
                mm_acc(x.data(), b.data(), &mut c, m, k, n);
            }
            Tensor::new(&[m, n], c)?.into()
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = inputs[1];
            let rule = broadcast_rule(op.name(), x.shape(), b.shape())?;
            let bd = b.data();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let r = bd[rhs_index(rule, i)];
                    match op {
                        Op::Add => a + r,
                        Op::Sub => a - r,
                        _ => a * r,
                    }
                })
                .collect();
            Tensor::new(x.shape(), data)?.into()
        }
        Op::Scale(s) => Tensor::new(x.shape(), x.data().iter().map(|v| v * s).collect())?.into(),
        Op::RowSoftmax => {
            let c = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(c) {
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - mx).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            Tensor::new(x.shape(), data)?.into()
        }
        Op::Log => Tensor::new(x.shape(), x.data().iter().map(|v| v.ln()).collect())?.into(),
        Op::Exp => Tensor::new(x.shape(), x.data().iter().map(|v| v.exp()).collect())?.into(),
        Op::Relu => Tensor::new(x.shape(), x.data().iter().map(|v| v.max(0.0)).collect())?.into(),
        Op::Sigmoid => Tensor::new(x.shape(), x.data().iter().map(|&v| sigmoid(v)).collect())?.into(),
        Op::Sum(axis) | Op::Mean(axis) => {
            let mean = matches!(op, Op::Mean(_));
            match axis {
                None => {
                    let s: f64 = x.data().iter().sum();
                    let v = if mean { s / x.numel() as f64 } else { s };
                    Tensor::scalar(v).into()
                }
                Some(ax) => {
                    let ax = *ax;
                    if ax >= x.shape().len() {
                        return Err(DiffError::contract(format!(
                            "{} axis {ax} out of range for {:?}",
                            op.name(),
                            x.shape()
                        )));
                    }
                    let (outer, len, inner) = reduce_dims(x.shape(), ax);
                    let mut data = vec![0.0; outer * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            let src = &x.data()[(o * len + l) * inner..(o * len + l + 1) * inner];
                            for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    if mean {
                        data.iter_mut().for_each(|v| *v /= len as f64);
                    }
                    let mut dims = x.shape().to_vec();
                    dims.remove(ax);
                    Tensor::new(&shape_of(&dims), data)?.into()
                }
            }
        }
        Op::ConcatLast => {
            let lead = &x.shape()[..x.shape().len() - 1];
            for t in inputs {
                if t.shape().len() != x.shape().len() || &t.shape()[..t.shape().len() - 1] != lead {
                    return Err(DiffError::shape("concat_last", x.shape(), t.shape()));
                }
            }
            let rows: usize = lead.iter().product();
            let total: usize = inputs.iter().map(|t| t.cols()).sum();
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for t in inputs {
                    let c = t.cols();
                    data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            let mut dims = lead.to_vec();
            dims.push(total);
            Tensor::new(&dims, data)?.into()
        }
        Op::Conv2d => {
            let w = inputs[1];
            require_rank("conv2d", x, 3)?;
            require_rank("conv2d", w, 4)?;
            let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (kh, kw, wcin, cout) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
            if wcin != cin || kh % 2 == 0 || kw % 2 == 0 {
                return Err(DiffError::shape("conv2d", x.shape(), w.shape()));
            }
            let mut out = vec![0.0; h * wd * cout];
            conv_forward(x.data(), w.data(), &mut out, h, wd, cin, kh, kw, cout);
            Tensor::new(&[h, wd, cout], out)?.into()
        }
        Op::MaxPool2d => {
            require_rank("max_pool2d", x, 3)?;
            let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            if h % 2 != 0 || w % 2 != 0 {
                return Err(DiffError::contract(format!(
                    "max_pool2d needs even spatial dims, got {:?}",
                    x.shape()
                )));
            }
            let (oh, ow) = (h / 2, w / 2);
            let mut data = vec![0.0; oh * ow * c];
            let mut aux = vec![0usize; oh * ow * c];
            let xd = x.data();
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut arg = 0;
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let idx = ((2 * oy + dy) * w + (2 * ox + dx)) * c + ch;
                                if xd[idx] > best {
                                    best = xd[idx];
                                    arg = idx;
                                }
                            }
                        }
                        let o = (oy * ow + ox) * c + ch;
                        data[o] = best;
                        aux[o] = arg;
                    }
                }
            }
            Forward {
                value: Tensor::new(&[oh, ow, c], data)?,
                aux,
            }
        }
        Op::LayerNorm { eps } => {
            let c = x.cols();
            let mut data = x.data().to_vec();
            for row in data.chunks_mut(c) {
                let mean = row.iter().sum::<f64>() / c as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
            }
            Tensor::new(x.shape(), data)?.into()
        }
        Op::Reshape => {
            let dims = target_shape.ok_or_else(|| DiffError::contract("reshape without target"))?;
            x.reshaped(dims)
                .map_err(|_| DiffError::shape("reshape", x.shape(), dims))?
                .into()
        }
        Op::Transpose => {
            require_rank("transpose", x, 2)?;
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut data = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    data[j * r + i] = x.data()[i * c + j];
                }
            }
            Tensor::new(&[c, r], data)?.into()
        }
    };
    if !out.value.is_finite() {
        return Err(DiffError::numeric(op.name()));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn conv_forward(
    x: &[f64],
    w: &[f64],
    out: &mut [f64],
    h: usize,
    wd: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    for y in 0..h {
        for xx in 0..wd {
            let orow = &mut out[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            for ky in 0..kh {
                let iy = y as isize + ky as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = xx as isize + kx as isize - pw as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let ibase = (iy as usize * wd + ix as usize) * cin;
                    let wbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = x[ibase + ci];
                        if v == 0.0 {
                            continue;
                        }
                        let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (o, wv) in orow.iter_mut().zip(wrow) {
                            *o += v * wv;
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv_backward(
    x: &[f64],
    w: &[f64],
    g: &[f64],
    gx: Option<&mut [f64]>,
    gw: Option<&mut [f64]>,
    h: usize,
    wd: usize,
    cin: usize,
    kh: usize,
    kw: usize,
    cout: usize,
) {
    let (ph, pw) = (kh / 2, kw / 2);
    let mut gx = gx;
    let mut gw = gw;
    for y in 0..h {
        for xx in 0..wd {
            let grow = &g[(y * wd + xx) * cout..(y * wd + xx + 1) * cout];
            for ky in 0..kh {
                let iy = y as isize + ky as isize - ph as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = xx as isize + kx as isize - pw as isize;
                    if ix < 0 || ix >= wd as isize {
                        continue;
                    }
                    let ibase = (iy as usize * wd + ix as usize) * cin;
                    let wbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let wrow = &w[wbase + ci * cout..wbase + (ci + 1) * cout];
                        if let Some(gx) = gx.as_deref_mut() {
                            let mut s = 0.0;
                            for (a, b) in grow.iter().zip(wrow) {
                                s += a * b;
                            }
                            gx[ibase + ci] += s;
                        }
                        if let Some(gw) = gw.as_deref_mut() {
                            let v = x[ibase + ci];
                            if v != 0.0 {
                                let gwrow = &mut gw[wbase + ci * cout..wbase + (ci + 1) * cout];
                                for (o, gv) in gwrow.iter_mut().zip(grow) {
                                    *o += v * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of the inputs given the upstream gradient `g` of the output.
pub(crate) fn backward(
    op: &Op,
    inputs: &[&Tensor],
    out: &Tensor,
    aux: &[usize],
    g: &[f64],
    needs: &[bool],
) -> Vec<Option<Vec<f64>>> {
    let x = inputs[0];
    let one = |v: Vec<f64>| vec![if needs[0] { Some(v) } else { None }];
    match op {
        Op::MatMul { transpose_rhs } => {
            let b = inputs[1];
            let (m, k) = (x.shape()[0], x.shape()[1]);
            let n = out.shape()[1];
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; m * k];
                if *transpose_rhs {
                    // b is [n,k]
                    mm_acc(g, b.data(), &mut ga, m, n, k);
                } else {
                    // b is [k,n]
                    mm_nt_acc(g, b.data(), &mut ga, m, n, k);
                }
                ga
            });
            let gb = needs[1].then(|| {
                if *transpose_rhs {
                    let mut gb = vec![0.0; n * k];
                    mm_tn_acc(g, x.data(), &mut gb, n, m, k);
                    gb
                } else {
                    let mut gb = vec![0.0; k * n];
                    mm_tn_acc(x.data(), g, &mut gb, k, m, n);
                    gb
                }
            });
            vec![ga, gb]
        }
        Op::Add | Op::Sub | Op::Mul => {
            let b = inputs[1];
            let rule = broadcast_rule(op.name(), x.shape(), b.shape()).expect("checked in forward");
            let bd = b.data();
            let ga = needs[0].then(|| match op {
                Op::Mul => g
                    .iter()
                    .enumerate()
                    .map(|(i, gv)| gv * bd[rhs_index(rule, i)])
                    .collect(),
                _ => g.to_vec(),
            });
            let gb = needs[1].then(|| {
                let local: Vec<f64> = match op {
                    Op::Add => g.to_vec(),
                    Op::Sub => g.iter().map(|v| -v).collect(),
                    _ => g.iter().zip(x.data()).map(|(gv, a)| gv * a).collect(),
                };
                reduce_broadcast(rule, &local, b.numel())
            });
            vec![ga, gb]
        }
        Op::Scale(s) => one(g.iter().map(|v| v * s).collect()),
        Op::RowSoftmax => {
            let c = x.cols();
            let mut gx = vec![0.0; g.len()];
            for ((grow, yrow), orow) in g.chunks(c).zip(out.data().chunks(c)).zip(gx.chunks_mut(c)) {
                let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                for ((o, gv), y) in orow.iter_mut().zip(grow).zip(yrow) {
                    *o = y * (gv - dot);
                }
            }
            one(gx)
        }
        Op::Log => one(g.iter().zip(x.data()).map(|(gv, v)| gv / v).collect()),
        Op::Exp => one(g.iter().zip(out.data()).map(|(gv, y)| gv * y).collect()),
        Op::Relu => one(
            g.iter()
                .zip(x.data())
                .map(|(gv, v)| if *v > 0.0 { *gv } else { 0.0 })
                .collect(),
        ),
        Op::Sigmoid => one(g.iter().zip(out.data()).map(|(gv, y)| gv * y * (1.0 - y)).collect()),
        Op::Sum(axis) | Op::Mean(axis) => {
            let mean = matches!(op, Op::Mean(_));
            match axis {
                None => {
                    let scale = if mean { 1.0 / x.numel() as f64 } else { 1.0 };
                    one(vec![g[0] * scale; x.numel()])
                }
                Some(ax) => {
                    let (outer, len, inner) = reduce_dims(x.shape(), *ax);
                    let scale = if mean { 1.0 / len as f64 } else { 1.0 };
                    let mut gx = vec![0.0; x.numel()];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                gx[(o * len + l) * inner + i] = g[o * inner + i] * scale;
                            }
                        }
                    }
                    one(gx)
                }
            }
        }
        Op::ConcatLast => {
            let total = out.cols();
            let rows = out.numel() / total;
            let mut offset = 0;
            inputs
                .iter()
                .zip(needs)
                .map(|(t, &need)| {
                    let c = t.cols();
                    let res = need.then(|| {
                        let mut gt = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            gt.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                        }
                        gt
                    });
                    offset += c;
                    res
                })
                .collect()
        }
        Op::Conv2d => {
            let w = inputs[1];
            let (h, wd, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (kh, kw, cout) = (w.shape()[0], w.shape()[1], w.shape()[3]);
            let mut gx = needs[0].then(|| vec![0.0; x.numel()]);
            let mut gw = needs[1].then(|| vec![0.0; w.numel()]);
            conv_backward(
                x.data(),
                w.data(),
                g,
                gx.as_deref_mut(),
                gw.as_deref_mut(),
                h,
                wd,
                cin,
                kh,
                kw,
                cout,
            );
            vec![gx, gw]
        }
        Op::MaxPool2d => {
            let mut gx = vec![0.0; x.numel()];
            for (o, &src) in aux.iter().enumerate() {
                gx[src] += g[o];
            }
            one(gx)
        }
        Op::LayerNorm { eps } => {
            let c = x.cols();
            let mut gx = vec![0.0; x.numel()];
            for ((xrow, grow), orow) in x.data().chunks(c).zip(g.chunks(c)).zip(gx.chunks_mut(c)) {
                let n = c as f64;
                let mean = xrow.iter().sum::<f64>() / n;
                let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = xrow.iter().map(|v| (v - mean) * inv).collect();
                let gsum: f64 = grow.iter().sum();
                let gxsum: f64 = grow.iter().zip(&xhat).map(|(a, b)| a * b).sum();
                for ((o, gv), xh) in orow.iter_mut().zip(grow).zip(&xhat) {
                    *o = inv * (gv - gsum / n - xh * gxsum / n);
                }
            }
            one(gx)
        }
        Op::Reshape => one(g.to_vec()),
        Op::Transpose => {
            let (r, c) = (x.shape()[0], x.shape()[1]);
            let mut gx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    gx[i * c + j] = g[j * r + i];
                }
            }
            one(gx)
        }
    }
}
