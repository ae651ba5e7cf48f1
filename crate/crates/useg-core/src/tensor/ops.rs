//! Operator set of the substrate: shape rules, forward kernels, and the
//! backward kernels used by the tape.
//!
//! Kernels are plain scalar loops over row-major buffers, written so the
//! inner loop runs over contiguous (or fixed-stride) memory.

use super::{Elem, Result, Tensor, TensorError};

/// Identifiers for the primitive operators the tape records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Mul,
    MatMul,
    Conv2d,
    ConvTranspose2d,
    LayerNorm,
    Softmax,
    Silu,
    Softplus,
    Sigmoid,
    Exp,
    MeanAxis,
    Concat,
    ReverseAxis,
    Reshape,
    Permute,
    GatherRows,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Add,
        OpKind::Mul,
        OpKind::MatMul,
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::LayerNorm,
        OpKind::Softmax,
        OpKind::Silu,
        OpKind::Softplus,
        OpKind::Sigmoid,
        OpKind::Exp,
        OpKind::MeanAxis,
        OpKind::Concat,
        OpKind::ReverseAxis,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::GatherRows,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::MatMul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv_transpose2d",
            OpKind::LayerNorm => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::Silu => "silu",
            OpKind::Softplus => "softplus",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Concat => "concat",
            OpKind::ReverseAxis => "reverse_axis",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::GatherRows => "gather_rows",
        }
    }
}

/// Per-node record of how a value was produced. Holds only static
/// attributes; saved activations live on the node value or, for custom
/// ops, in their saved context.
#[derive(Debug, Clone)]
pub enum OpRecord {
    Add,
    Mul,
    MatMul,
    Conv2d { stride: usize, pad: usize },
    ConvTranspose2d { stride: usize, pad: usize },
    LayerNorm { eps: f64 },
    Softmax { axis: usize },
    Silu,
    Softplus,
    Sigmoid,
    Exp,
    MeanAxis { axis: usize },
    Concat { axis: usize },
    ReverseAxis { axis: usize },
    Reshape { from: Vec<usize> },
    Permute { axes: Vec<usize> },
    GatherRows { ids: Vec<usize> },
}

impl OpRecord {
    pub fn kind(&self) -> OpKind {
        match self {
            OpRecord::Add => OpKind::Add,
            OpRecord::Mul => OpKind::Mul,
            OpRecord::MatMul => OpKind::MatMul,
            OpRecord::Conv2d { .. } => OpKind::Conv2d,
            OpRecord::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            OpRecord::LayerNorm { .. } => OpKind::LayerNorm,
            OpRecord::Softmax { .. } => OpKind::Softmax,
            OpRecord::Silu => OpKind::Silu,
            OpRecord::Softplus => OpKind::Softplus,
            OpRecord::Sigmoid => OpKind::Sigmoid,
            OpRecord::Exp => OpKind::Exp,
            OpRecord::MeanAxis { .. } => OpKind::MeanAxis,
            OpRecord::Concat { .. } => OpKind::Concat,
            OpRecord::ReverseAxis { .. } => OpKind::ReverseAxis,
            OpRecord::Reshape { .. } => OpKind::Reshape,
            OpRecord::Permute { .. } => OpKind::Permute,
            OpRecord::GatherRows { .. } => OpKind::GatherRows,
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

// ── scalar activations ─────────────────────────────────────────────

pub(crate) fn sigmoid_scalar<T: Elem>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Numerically stable ln(1 + e^x).
pub(crate) fn softplus_scalar<T: Elem>(x: T) -> T {
    let zero = T::zero();
    if x > zero {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn silu_scalar<T: Elem>(x: T) -> T {
    x * sigmoid_scalar(x)
}

// ── broadcasting ───────────────────────────────────────────────────

/// Right-aligned broadcast shape of `a` and `b`, or an error.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0usize; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd {
            a[i + a.len() - nd]
        } else {
            1
        };
        let db = if i + b.len() >= nd {
            b[i + b.len() - nd]
        } else {
            1
        };
        if da != db && da != 1 && db != 1 {
            return Err(TensorError::ShapeMismatch(format!(
                "cannot broadcast {a:?} with {b:?}"
            )));
        }
        out[i] = da.max(db);
    }
    Ok(out)
}

fn pad_left(shape: &[usize], nd: usize) -> Vec<usize> {
    let mut p = vec![1usize; nd];
    p[nd - shape.len()..].copy_from_slice(shape);
    p
}

/// Elementwise binary op with broadcasting. Fast paths: identical shapes,
/// and a right-aligned suffix operand (bias rows, positional tables).
pub(crate) fn broadcast_binary<T: Elem, F: Fn(T, T) -> T>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: F,
) -> Result<Tensor<T>> {
    if a.shape() == b.shape() {
        let data: Vec<T> = a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::from_vec(a.shape().to_vec(), data);
    }
    let out_shape = broadcast_shape(a.shape(), b.shape())?;
    let numel: usize = out_shape.iter().product();

    // Suffix operand: b's shape equals the trailing dims of the output.
    let is_suffix = |s: &[usize]| !s.is_empty() && out_shape.ends_with(s);
    if a.shape() == out_shape.as_slice() && is_suffix(b.shape()) {
        let bn = b.numel();
        let (ad, bd) = (a.data(), b.data());
        let mut data = Vec::with_capacity(numel);
        for chunk in ad.chunks_exact(bn) {
            data.extend(chunk.iter().zip(bd.iter()).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::from_vec(out_shape, data);
    }

    // General counter walk with per-dimension effective strides.
    let nd = out_shape.len();
    let ap = pad_left(a.shape(), nd);
    let bp = pad_left(b.shape(), nd);
    let astr_full = strides(&ap);
    let bstr_full = strides(&bp);
    let astr: Vec<usize> = (0..nd)
        .map(|d| if ap[d] == 1 { 0 } else { astr_full[d] })
        .collect();
    let bstr: Vec<usize> = (0..nd)
        .map(|d| if bp[d] == 1 { 0 } else { bstr_full[d] })
        .collect();

    let mut data = Vec::with_capacity(numel);
    let mut idx = vec![0usize; nd];
    let (mut ai, mut bi) = (0usize, 0usize);
    let (ad, bd) = (a.data(), b.data());
    for _ in 0..numel {
        data.push(f(ad[ai], bd[bi]));
        for d in (0..nd).rev() {
            idx[d] += 1;
            ai += astr[d];
            bi += bstr[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ai -= astr[d] * out_shape[d];
            bi -= bstr[d] * out_shape[d];
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Sum `grad` (shaped `grad_shape`) down to `target_shape` by collapsing
/// broadcast dimensions. Inverse of broadcasting for the backward pass.
pub(crate) fn reduce_to_shape<T: Elem>(
    grad: &[T],
    grad_shape: &[usize],
    target_shape: &[usize],
) -> Tensor<T> {
    if grad_shape == target_shape {
        return Tensor::from_vec(target_shape.to_vec(), grad.to_vec()).unwrap();
    }
    let nd = grad_shape.len();
    let tp = pad_left(target_shape, nd);
    // Suffix fast path: target is the trailing dims of grad.
    if grad_shape.ends_with(target_shape) {
        let tn: usize = target_shape.iter().product();
        let mut out = vec![T::zero(); tn];
        for chunk in grad.chunks_exact(tn) {
            for (o, &g) in out.iter_mut().zip(chunk.iter()) {
                *o = *o + g;
            }
        }
        return Tensor::from_vec(target_shape.to_vec(), out).unwrap();
    }
    let tstr_full = strides(&tp);
    let tstr: Vec<usize> = (0..nd)
        .map(|d| if tp[d] == 1 { 0 } else { tstr_full[d] })
        .collect();
    let tn: usize = tp.iter().product();
    let mut out = vec![T::zero(); tn];
    let mut idx = vec![0usize; nd];
    let mut ti = 0usize;
    for &g in grad {
        out[ti] = out[ti] + g;
        for d in (0..nd).rev() {
            idx[d] += 1;
            ti += tstr[d];
            if idx[d] < grad_shape[d] {
                break;
            }
            idx[d] = 0;
            ti -= tstr[d] * grad_shape[d];
        }
    }
    Tensor::from_vec(target_shape.to_vec(), out).unwrap()
}

// ── matmul ─────────────────────────────────────────────────────────

/// C[m,n] += A[m,k] * B[k,n] on raw row-major slices.
pub(crate) fn matmul_acc<T: Elem>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// C[m,n] += A[m,k] * B[n,k]^T (second operand stored row-major as [n,k]).
pub(crate) fn matmul_bt_acc<T: Elem>(a: &[T], bt: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &bt[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                s = s + av * bv;
            }
            crow[j] = crow[j] + s;
        }
    }
}

/// C[m,n] += A[k,m]^T * B[k,n] (first operand stored row-major as [k,m]).
pub(crate) fn matmul_at_acc<T: Elem>(at: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &at[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow.iter()) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Supported matmul operand ranks: [m,k]x[k,n], [B,m,k]x[B,k,n], and
/// [B,m,k]x[k,n] (shared right operand).
pub(crate) struct MatMulDims {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub b_batched: bool,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    match (a.len(), b.len()) {
        (2, 2) => {
            if a[1] != b[0] {
                return Err(TensorError::ShapeMismatch(format!(
                    "matmul inner dims {a:?} x {b:?}"
                )));
            }
            Ok(MatMulDims {
                batch: 1,
                m: a[0],
                k: a[1],
                n: b[1],
                b_batched: false,
            })
        }
        (3, 3) => {
            if a[0] != b[0] || a[2] != b[1] {
                return Err(TensorError::ShapeMismatch(format!(
                    "batched matmul dims {a:?} x {b:?}"
                )));
            }
            Ok(MatMulDims {
                batch: a[0],
                m: a[1],
                k: a[2],
                n: b[2],
                b_batched: true,
            })
        }
        (3, 2) => {
            if a[2] != b[0] {
                return Err(TensorError::ShapeMismatch(format!(
                    "matmul inner dims {a:?} x {b:?}"
                )));
            }
            Ok(MatMulDims {
                batch: a[0],
                m: a[1],
                k: a[2],
                n: b[1],
                b_batched: false,
            })
        }
        _ => Err(TensorError::ShapeMismatch(format!(
            "matmul supports 2D/3D operands, got {a:?} x {b:?}"
        ))),
    }
}

pub(crate) fn matmul_forward<T: Elem>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let d = matmul_dims(a.shape(), b.shape())?;
    let mut out = vec![T::zero(); d.batch * d.m * d.n];
    for bi in 0..d.batch {
        let av = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let bv = if d.b_batched {
            &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n]
        } else {
            b.data()
        };
        matmul_acc(
            av,
            bv,
            &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
            d.m,
            d.k,
            d.n,
        );
    }
    let shape = if a.shape().len() == 3 {
        vec![d.batch, d.m, d.n]
    } else {
        vec![d.m, d.n]
    };
    Tensor::from_vec(shape, out)
}

pub(crate) fn matmul_backward<T: Elem>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let d = matmul_dims(a.shape(), b.shape()).expect("checked in forward");
    let mut ga = vec![T::zero(); a.numel()];
    let mut gb = vec![T::zero(); b.numel()];
    for bi in 0..d.batch {
        let go = &grad_out.data()[bi * d.m * d.n..(bi + 1) * d.m * d.n];
        let av = &a.data()[bi * d.m * d.k..(bi + 1) * d.m * d.k];
        let bv = if d.b_batched {
            &b.data()[bi * d.k * d.n..(bi + 1) * d.k * d.n]
        } else {
            b.data()
        };
        // dA = dC * B^T
        matmul_bt_acc(
            go,
            bv,
            &mut ga[bi * d.m * d.k..(bi + 1) * d.m * d.k],
            d.m,
            d.n,
            d.k,
        );
        // dB = A^T * dC (accumulated over batch when B is shared)
        let gb_slice = if d.b_batched {
            &mut gb[bi * d.k * d.n..(bi + 1) * d.k * d.n]
        } else {
            &mut gb[..]
        };
        matmul_at_acc(av, go, gb_slice, d.k, d.m, d.n);
    }
    (
        Tensor::from_vec(a.shape().to_vec(), ga).unwrap(),
        Tensor::from_vec(b.shape().to_vec(), gb).unwrap(),
    )
}

// ── conv2d ─────────────────────────────────────────────────────────

pub(crate) fn conv2d_out_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(TensorError::InvalidAttr("conv stride must be >= 1".into()));
    }
    if h + 2 * pad < kh || w + 2 * pad < kw {
        return Err(TensorError::ShapeMismatch(format!(
            "kernel {kh}x{kw} larger than padded input {h}x{w} (pad {pad})"
        )));
    }
    Ok((
        (h + 2 * pad - kh) / stride + 1,
        (w + 2 * pad - kw) / stride + 1,
    ))
}

/// Valid output range [lo, hi) along one spatial dim for a kernel offset
/// `k`: positions o with 0 <= o*stride - pad + k < in_size.
fn conv_range(
    out_size: usize,
    in_size: usize,
    stride: usize,
    pad: isize,
    k: usize,
) -> (usize, usize) {
    let shift = k as isize - pad; // in = o*stride + shift
    let lo = if shift >= 0 {
        0
    } else {
        ((-shift) as usize).div_ceil(stride)
    };
    let max_in = in_size as isize - 1 - shift;
    if max_in < 0 {
        return (0, 0);
    }
    let hi = (max_in as usize / stride + 1).min(out_size);
    (lo.min(hi), hi)
}

pub(crate) fn conv2d_forward<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(TensorError::ShapeMismatch(format!(
            "conv2d expects x[B,Cin,H,W], w[Cout,Cin,kh,kw]; got {xs:?}, {ws:?}"
        )));
    }
    let (b, cin, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    if let Some(bv) = bias {
        if bv.shape() != [cout] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d bias shape {:?}, expected [{cout}]",
                bv.shape()
            )));
        }
    }
    let (oh, ow) = conv2d_out_hw(h, wid, kh, kw, stride, pad)?;
    let mut out = vec![T::zero(); b * cout * oh * ow];

    for bi in 0..b {
        for co in 0..cout {
            let obase = (bi * cout + co) * oh * ow;
            if let Some(bv) = bias {
                let beta = bv.data()[co];
                out[obase..obase + oh * ow]
                    .iter_mut()
                    .for_each(|v| *v = beta);
            }
            for ci in 0..cin {
                let xbase = (bi * cin + ci) * h * wid;
                for ky in 0..kh {
                    let (oy0, oy1) = conv_range(oh, h, stride, pad as isize, ky);
                    for kx in 0..kw {
                        let wv = w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        let (ox0, ox1) = conv_range(ow, wid, stride, pad as isize, kx);
                        for oy in oy0..oy1 {
                            let iy = (oy * stride) as isize - pad as isize + ky as isize;
                            let irow = xbase + iy as usize * wid;
                            let orow = obase + oy * ow;
                            let ix0 = (ox0 * stride) as isize - pad as isize + kx as isize;
                            if stride == 1 {
                                let xrow = &x.data()[(irow as isize + ix0) as usize..];
                                for (d, o) in (ox0..ox1).enumerate() {
                                    out[orow + o] = out[orow + o] + wv * xrow[d];
                                }
                            } else {
                                for o in ox0..ox1 {
                                    let ix = (o * stride) as isize - pad as isize + kx as isize;
                                    out[orow + o] =
                                        out[orow + o] + wv * x.data()[irow + ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b, cout, oh, ow], out)
}

pub(crate) fn conv2d_backward<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let xs = x.shape();
    let ws = w.shape();
    let (b, cin, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let os = grad_out.shape();
    let (oh, ow) = (os[2], os[3]);

    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    let mut gb = if has_bias {
        vec![T::zero(); cout]
    } else {
        Vec::new()
    };

    if has_bias {
        for bi in 0..b {
            for (co, gbe) in gb.iter_mut().enumerate() {
                let obase = (bi * cout + co) * oh * ow;
                let mut s = T::zero();
                for &g in &grad_out.data()[obase..obase + oh * ow] {
                    s = s + g;
                }
                *gbe = *gbe + s;
            }
        }
    }
    for bi in 0..b {
        for co in 0..cout {
            let obase = (bi * cout + co) * oh * ow;
            for ci in 0..cin {
                let xbase = (bi * cin + ci) * h * wid;
                for ky in 0..kh {
                    let (oy0, oy1) = conv_range(oh, h, stride, pad as isize, ky);
                    for kx in 0..kw {
                        let widx = ((co * cin + ci) * kh + ky) * kw + kx;
                        let wv = w.data()[widx];
                        let (ox0, ox1) = conv_range(ow, wid, stride, pad as isize, kx);
                        let mut wacc = T::zero();
                        for oy in oy0..oy1 {
                            let iy = (oy * stride) as isize - pad as isize + ky as isize;
                            let irow = xbase + iy as usize * wid;
                            let orow = obase + oy * ow;
                            for o in ox0..ox1 {
                                let ix =
                                    ((o * stride) as isize - pad as isize + kx as isize) as usize;
                                let g = grad_out.data()[orow + o];
                                wacc = wacc + g * x.data()[irow + ix];
                                gx[irow + ix] = gx[irow + ix] + g * wv;
                            }
                        }
                        gw[widx] = gw[widx] + wacc;
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(xs.to_vec(), gx).unwrap(),
        Tensor::from_vec(ws.to_vec(), gw).unwrap(),
        if has_bias {
            Some(Tensor::from_vec(vec![cout], gb).unwrap())
        } else {
            None
        },
    )
}

// ── transposed conv2d ──────────────────────────────────────────────

pub(crate) fn convt2d_out_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(TensorError::InvalidAttr("conv stride must be >= 1".into()));
    }
    let oh = (h - 1) * stride + kh;
    let ow = (w - 1) * stride + kw;
    if oh < 2 * pad || ow < 2 * pad {
        return Err(TensorError::InvalidAttr(format!(
            "transposed conv pad {pad} too large for output {oh}x{ow}"
        )));
    }
    Ok((oh - 2 * pad, ow - 2 * pad))
}

pub(crate) fn convt2d_forward<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] {
        return Err(TensorError::ShapeMismatch(format!(
            "conv_transpose2d expects x[B,Cin,H,W], w[Cin,Cout,kh,kw]; got {xs:?}, {ws:?}"
        )));
    }
    let (b, cin, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
    if let Some(bv) = bias {
        if bv.shape() != [cout] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv_transpose2d bias shape {:?}, expected [{cout}]",
                bv.shape()
            )));
        }
    }
    let (oh, ow) = convt2d_out_hw(h, wid, kh, kw, stride, pad)?;
    let mut out = vec![T::zero(); b * cout * oh * ow];

    if let Some(bv) = bias {
        for bi in 0..b {
            for co in 0..cout {
                let obase = (bi * cout + co) * oh * ow;
                let beta = bv.data()[co];
                out[obase..obase + oh * ow]
                    .iter_mut()
                    .for_each(|v| *v = beta);
            }
        }
    }
    // Scatter: each input pixel adds a w-patch into the output.
    for bi in 0..b {
        for ci in 0..cin {
            let xbase = (bi * cin + ci) * h * wid;
            for co in 0..cout {
                let obase = (bi * cout + co) * oh * ow;
                let wbase = (ci * cout + co) * kh * kw;
                for iy in 0..h {
                    for ix in 0..wid {
                        let xv = x.data()[xbase + iy * wid + ix];
                        if xv == T::zero() {
                            continue;
                        }
                        for ky in 0..kh {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy as usize >= oh {
                                continue;
                            }
                            let orow = obase + oy as usize * ow;
                            for kx in 0..kw {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox as usize >= ow {
                                    continue;
                                }
                                out[orow + ox as usize] =
                                    out[orow + ox as usize] + xv * w.data()[wbase + ky * kw + kx];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_vec(vec![b, cout, oh, ow], out)
}

pub(crate) fn convt2d_backward<T: Elem>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    has_bias: bool,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Option<Tensor<T>>) {
    let (xs, ws) = (x.shape(), w.shape());
    let (b, cin, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[1], ws[2], ws[3]);
    let os = grad_out.shape();
    let (oh, ow) = (os[2], os[3]);

    let mut gx = vec![T::zero(); x.numel()];
    let mut gw = vec![T::zero(); w.numel()];
    let mut gb = if has_bias {
        vec![T::zero(); cout]
    } else {
        Vec::new()
    };

    if has_bias {
        for bi in 0..b {
            for (co, gbe) in gb.iter_mut().enumerate() {
                let obase = (bi * cout + co) * oh * ow;
                let mut s = T::zero();
                for &g in &grad_out.data()[obase..obase + oh * ow] {
                    s = s + g;
                }
                *gbe = *gbe + s;
            }
        }
    }
    for bi in 0..b {
        for ci in 0..cin {
            let xbase = (bi * cin + ci) * h * wid;
            for co in 0..cout {
                let obase = (bi * cout + co) * oh * ow;
                let wbase = (ci * cout + co) * kh * kw;
                for iy in 0..h {
                    for ix in 0..wid {
                        let xv = x.data()[xbase + iy * wid + ix];
                        let mut xacc = T::zero();
                        for ky in 0..kh {
                            let oy = (iy * stride + ky) as isize - pad as isize;
                            if oy < 0 || oy as usize >= oh {
                                continue;
                            }
                            let orow = obase + oy as usize * ow;
                            for kx in 0..kw {
                                let ox = (ix * stride + kx) as isize - pad as isize;
                                if ox < 0 || ox as usize >= ow {
                                    continue;
                                }
                                let g = grad_out.data()[orow + ox as usize];
                                xacc = xacc + g * w.data()[wbase + ky * kw + kx];
                                gw[wbase + ky * kw + kx] = gw[wbase + ky * kw + kx] + g * xv;
                            }
                        }
                        gx[xbase + iy * wid + ix] = gx[xbase + iy * wid + ix] + xacc;
                    }
                }
            }
        }
    }
    (
        Tensor::from_vec(xs.to_vec(), gx).unwrap(),
        Tensor::from_vec(ws.to_vec(), gw).unwrap(),
        if has_bias {
            Some(Tensor::from_vec(vec![cout], gb).unwrap())
        } else {
            None
        },
    )
}

// ── layer norm (over the last axis) ────────────────────────────────

pub(crate) fn layer_norm_forward<T: Elem>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| TensorError::ShapeMismatch("layer_norm input must have >= 1 axis".into()))?;
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(TensorError::ShapeMismatch(format!(
            "layer_norm affine shapes {:?}/{:?}, expected [{d}]",
            gamma.shape(),
            beta.shape()
        )));
    }
    let epst = T::from_f64_lossy(eps);
    let dn = T::from_f64_lossy(d as f64);
    let mut out = Vec::with_capacity(x.numel());
    for row in x.data().chunks_exact(d) {
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / dn;
        let inv = T::one() / (var + epst).sqrt();
        for (i, &v) in row.iter().enumerate() {
            out.push((v - mean) * inv * gamma.data()[i] + beta.data()[i]);
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub(crate) fn layer_norm_backward<T: Elem>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: f64,
    grad_out: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let d = *x.shape().last().unwrap();
    let epst = T::from_f64_lossy(eps);
    let dn = T::from_f64_lossy(d as f64);
    let mut gx = Vec::with_capacity(x.numel());
    let mut ggamma = vec![T::zero(); d];
    let mut gbeta = vec![T::zero(); d];
    for (row, grow) in x
        .data()
        .chunks_exact(d)
        .zip(grad_out.data().chunks_exact(d))
    {
        let mut mean = T::zero();
        for &v in row {
            mean = mean + v;
        }
        mean = mean / dn;
        let mut var = T::zero();
        for &v in row {
            let c = v - mean;
            var = var + c * c;
        }
        var = var / dn;
        let inv = T::one() / (var + epst).sqrt();

        // xhat = (x - mean) * inv; dxhat = dy * gamma
        let mut sum_dxhat = T::zero();
        let mut sum_dxhat_xhat = T::zero();
        for i in 0..d {
            let xhat = (row[i] - mean) * inv;
            let dxhat = grow[i] * gamma.data()[i];
            sum_dxhat = sum_dxhat + dxhat;
            sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
            ggamma[i] = ggamma[i] + grow[i] * xhat;
            gbeta[i] = gbeta[i] + grow[i];
        }
        let m_dxhat = sum_dxhat / dn;
        let m_dxhat_xhat = sum_dxhat_xhat / dn;
        for i in 0..d {
            let xhat = (row[i] - mean) * inv;
            let dxhat = grow[i] * gamma.data()[i];
            gx.push(inv * (dxhat - m_dxhat - xhat * m_dxhat_xhat));
        }
    }
    (
        Tensor::from_vec(x.shape().to_vec(), gx).unwrap(),
        Tensor::from_vec(vec![d], ggamma).unwrap(),
        Tensor::from_vec(vec![d], gbeta).unwrap(),
    )
}

// ── softmax over an axis ───────────────────────────────────────────

pub(crate) fn axis_views(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn softmax_forward<T: Elem>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape().len() {
        return Err(TensorError::InvalidAttr(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_views(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    let xd = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = xd[base];
            for l in 1..len {
                let v = xd[base + l * inner];
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = T::zero();
            for l in 0..len {
                let e = (xd[base + l * inner] - mx).exp();
                out[base + l * inner] = e;
                denom = denom + e;
            }
            for l in 0..len {
                out[base + l * inner] = out[base + l * inner] / denom;
            }
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub(crate) fn softmax_backward<T: Elem>(
    y: &Tensor<T>,
    axis: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (outer, len, inner) = axis_views(y.shape(), axis);
    let mut gx = vec![T::zero(); y.numel()];
    let (yd, gd) = (y.data(), grad_out.data());
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut dot = T::zero();
            for l in 0..len {
                let idx = base + l * inner;
                dot = dot + yd[idx] * gd[idx];
            }
            for l in 0..len {
                let idx = base + l * inner;
                gx[idx] = yd[idx] * (gd[idx] - dot);
            }
        }
    }
    Tensor::from_vec(y.shape().to_vec(), gx).unwrap()
}

// ── reductions, reorderings ────────────────────────────────────────

pub(crate) fn mean_axis_forward<T: Elem>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape().len() {
        return Err(TensorError::InvalidAttr(format!(
            "mean axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_views(x.shape(), axis);
    let inv = T::one() / T::from_f64_lossy(len as f64);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            let orow = o * inner;
            for i in 0..inner {
                out[orow + i] = out[orow + i] + x.data()[base + i];
            }
        }
    }
    out.iter_mut().for_each(|v| *v = *v * inv);
    let mut shape: Vec<usize> = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::from_vec(shape, out)
}

pub(crate) fn mean_axis_backward<T: Elem>(
    x_shape: &[usize],
    axis: usize,
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (outer, len, inner) = axis_views(x_shape, axis);
    let inv = T::one() / T::from_f64_lossy(len as f64);
    let mut gx = vec![T::zero(); outer * len * inner];
    for o in 0..outer {
        for l in 0..len {
            let base = (o * len + l) * inner;
            let grow = o * inner;
            for i in 0..inner {
                gx[base + i] = grad_out.data()[grow + i] * inv;
            }
        }
    }
    Tensor::from_vec(x_shape.to_vec(), gx).unwrap()
}

pub(crate) fn concat_forward<T: Elem>(inputs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = inputs
        .first()
        .ok_or_else(|| TensorError::InvalidAttr("concat needs >= 1 input".into()))?;
    let nd = first.shape().len();
    if axis >= nd {
        return Err(TensorError::InvalidAttr(format!(
            "concat axis {axis} out of range for {:?}",
            first.shape()
        )));
    }
    let mut axis_total = 0usize;
    for t in inputs {
        if t.shape().len() != nd {
            return Err(TensorError::ShapeMismatch("concat rank mismatch".into()));
        }
        for d in 0..nd {
            if d != axis && t.shape()[d] != first.shape()[d] {
                return Err(TensorError::ShapeMismatch(format!(
                    "concat dim {d}: {:?} vs {:?}",
                    t.shape(),
                    first.shape()
                )));
            }
        }
        axis_total += t.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let (outer, _, inner) = axis_views(&out_shape, axis);
    let mut out = Vec::with_capacity(out_shape.iter().product());
    for o in 0..outer {
        for t in inputs {
            let len = t.shape()[axis];
            let base = o * len * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn concat_backward<T: Elem>(
    input_shapes: &[Vec<usize>],
    axis: usize,
    grad_out: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let out_shape = grad_out.shape();
    let (outer, _, inner) = axis_views(out_shape, axis);
    let mut grads: Vec<Vec<T>> = input_shapes
        .iter()
        .map(|s| Vec::with_capacity(s.iter().product()))
        .collect();
    // Walk output rows in order, splitting each into per-input segments.
    let mut pos = 0usize;
    for _ in 0..outer {
        for (gi, s) in input_shapes.iter().enumerate() {
            let len = s[axis];
            grads[gi].extend_from_slice(&grad_out.data()[pos..pos + len * inner]);
            pos += len * inner;
        }
    }
    debug_assert_eq!(pos, outer * out_shape[axis] * inner);
    grads
        .into_iter()
        .zip(input_shapes.iter())
        .map(|(g, s)| Tensor::from_vec(s.clone(), g).unwrap())
        .collect()
}

pub(crate) fn reverse_axis_forward<T: Elem>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape().len() {
        return Err(TensorError::InvalidAttr(format!(
            "reverse axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = axis_views(x.shape(), axis);
    let mut out = vec![T::zero(); x.numel()];
    for o in 0..outer {
        for l in 0..len {
            let src = (o * len + l) * inner;
            let dst = (o * len + (len - 1 - l)) * inner;
            out[dst..dst + inner].copy_from_slice(&x.data()[src..src + inner]);
        }
    }
    Tensor::from_vec(x.shape().to_vec(), out)
}

pub(crate) fn permute_forward<T: Elem>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let nd = x.shape().len();
    let mut seen = vec![false; nd];
    if axes.len() != nd
        || axes
            .iter()
            .any(|&a| a >= nd || std::mem::replace(&mut seen[a], true))
    {
        return Err(TensorError::InvalidAttr(format!(
            "permute axes {axes:?} invalid for rank {nd}"
        )));
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_str = strides(in_shape);
    let src_stride: Vec<usize> = axes.iter().map(|&a| in_str[a]).collect();
    let numel = x.numel();
    let mut out = Vec::with_capacity(numel);
    let mut idx = vec![0usize; nd];
    let mut si = 0usize;
    for _ in 0..numel {
        out.push(x.data()[si]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            si += src_stride[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            si -= src_stride[d] * out_shape[d];
        }
    }
    Tensor::from_vec(out_shape, out)
}

pub(crate) fn invert_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

pub(crate) fn gather_rows_forward<T: Elem>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    if table.shape().len() != 2 {
        return Err(TensorError::ShapeMismatch(format!(
            "gather_rows table must be 2D, got {:?}",
            table.shape()
        )));
    }
    let (v, d) = (table.shape()[0], table.shape()[1]);
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(TensorError::InvalidAttr(format!(
            "gather_rows id {bad} out of range for table with {v} rows"
        )));
    }
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
    }
    Tensor::from_vec(vec![ids.len(), d], out)
}

pub(crate) fn gather_rows_backward<T: Elem>(
    table_shape: &[usize],
    ids: &[usize],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let d = table_shape[1];
    let mut gt = vec![T::zero(); table_shape.iter().product()];
    for (r, &i) in ids.iter().enumerate() {
        let src = &grad_out.data()[r * d..(r + 1) * d];
        let dst = &mut gt[i * d..(i + 1) * d];
        for (o, &g) in dst.iter_mut().zip(src.iter()) {
            *o = *o + g;
        }
    }
    Tensor::from_vec(table_shape.to_vec(), gt).unwrap()
}
