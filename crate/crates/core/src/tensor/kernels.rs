//! Pure forward/backward kernels on [`Tensor4`]. The autodiff tape records
//! which kernel produced a node and replays the matching backward rule, so
//! a forward pass with recording disabled runs the exact same code and
//! produces bitwise-identical values.

use super::{Element, Shape4, Tensor4};
use crate::error::TensorError;

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

/// Broadcast rule: per dimension the operands must agree or one of them must
/// be 1 (which is stretched).
pub fn broadcast_shape(
    op: &'static str,
    a: Shape4,
    b: Shape4,
) -> Result<Shape4, TensorError> {
    let ad = a.dims();
    let bd = b.dims();
    let mut out = [0usize; 4];
    for i in 0..4 {
        if ad[i] == bd[i] || bd[i] == 1 {
            out[i] = ad[i];
        } else if ad[i] == 1 {
            out[i] = bd[i];
        } else {
            return Err(TensorError::shape(op, a, b));
        }
    }
    Ok(Shape4::from_dims(out))
}

fn strides_for(shape: Shape4, broadcast_to: Shape4) -> [usize; 4] {
    let d = shape.dims();
    let full = [
        d[1] * d[2] * d[3],
        d[2] * d[3],
        d[3],
        1,
    ];
    let mut s = [0usize; 4];
    let od = broadcast_to.dims();
    for i in 0..4 {
        s[i] = if d[i] == od[i] { full[i] } else { 0 };
    }
    s
}

pub fn binary_op<E: Element>(
    op: &'static str,
    a: &Tensor4<E>,
    b: &Tensor4<E>,
    f: impl Fn(E, E) -> E,
) -> Result<Tensor4<E>, TensorError> {
    let out_shape = broadcast_shape(op, a.shape(), b.shape())?;
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Ok(Tensor4::new(out_shape, data).expect("shape checked"));
    }
    let sa = strides_for(a.shape(), out_shape);
    let sb = strides_for(b.shape(), out_shape);
    let [ob, oc, oh, ow] = out_shape.dims();
    let mut data = Vec::with_capacity(out_shape.numel());
    let ad = a.data();
    let bd = b.data();
    for ib in 0..ob {
        for ic in 0..oc {
            for iy in 0..oh {
                let base_a = ib * sa[0] + ic * sa[1] + iy * sa[2];
                let base_b = ib * sb[0] + ic * sb[1] + iy * sb[2];
                for ix in 0..ow {
                    data.push(f(ad[base_a + ix * sa[3]], bd[base_b + ix * sb[3]]));
                }
            }
        }
    }
    Ok(Tensor4::new(out_shape, data).expect("shape checked"))
}

/// Sum `grad` (shaped like the broadcast output) back down to `target`,
/// collapsing every stretched dimension.
pub fn reduce_to_shape<E: Element>(grad: &Tensor4<E>, target: Shape4) -> Tensor4<E> {
    if grad.shape() == target {
        return grad.clone();
    }
    let st = strides_for(target, grad.shape());
    let [ob, oc, oh, ow] = grad.shape().dims();
    let mut out = Tensor4::zeros(target);
    let gd = grad.data();
    let od = out.data_mut();
    let mut i = 0;
    for ib in 0..ob {
        for ic in 0..oc {
            for iy in 0..oh {
                let base = ib * st[0] + ic * st[1] + iy * st[2];
                for ix in 0..ow {
                    od[base + ix * st[3]] = od[base + ix * st[3]] + gd[i];
                    i += 1;
                }
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// matmul: batched over the leading two dims (each broadcastable), standard
// product over the trailing two
// ---------------------------------------------------------------------------

fn matmul_batch_dims(
    op: &'static str,
    a: Shape4,
    b: Shape4,
) -> Result<(usize, usize), TensorError> {
    let d0 = if a.batch == b.batch || b.batch == 1 {
        a.batch
    } else if a.batch == 1 {
        b.batch
    } else {
        return Err(TensorError::shape(op, a, b));
    };
    let d1 = if a.channels == b.channels || b.channels == 1 {
        a.channels
    } else if a.channels == 1 {
        b.channels
    } else {
        return Err(TensorError::shape(op, a, b));
    };
    Ok((d0, d1))
}

/// `C[m,n] += A[m,k] * B[k,n]` on contiguous row-major slices.
fn mm_nn_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

/// `C[m,k] += A[m,n] * B[k,n]^T` (B used transposed).
fn mm_nt_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = E::zero();
            for j in 0..n {
                acc = acc + arow[j] * brow[j];
            }
            crow[p] = crow[p] + acc;
        }
    }
}

/// `C[k,n] += A[m,k]^T * B[m,n]` (A used transposed).
fn mm_tn_acc<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] = crow[j] + av * brow[j];
            }
        }
    }
}

pub fn matmul<E: Element>(a: &Tensor4<E>, b: &Tensor4<E>) -> Result<Tensor4<E>, TensorError> {
    let (m, ka) = (a.shape().height, a.shape().width);
    let (kb, n) = (b.shape().height, b.shape().width);
    if ka != kb {
        return Err(TensorError::shape("matmul", a.shape(), b.shape()));
    }
    let (d0, d1) = matmul_batch_dims("matmul", a.shape(), b.shape())?;
    let out_shape = Shape4::new(d0, d1, m, n);
    let mut out = Tensor4::zeros(out_shape);
    let amat = m * ka;
    let bmat = kb * n;
    let omat = m * n;
    for i0 in 0..d0 {
        let a0 = if a.shape().batch == 1 { 0 } else { i0 };
        let b0 = if b.shape().batch == 1 { 0 } else { i0 };
        for i1 in 0..d1 {
            let a1 = if a.shape().channels == 1 { 0 } else { i1 };
            let b1 = if b.shape().channels == 1 { 0 } else { i1 };
            let abase = (a0 * a.shape().channels + a1) * amat;
            let bbase = (b0 * b.shape().channels + b1) * bmat;
            let obase = (i0 * d1 + i1) * omat;
            mm_nn_acc(
                &a.data()[abase..abase + amat],
                &b.data()[bbase..bbase + bmat],
                &mut out.data_mut()[obase..obase + omat],
                m,
                ka,
                n,
            );
        }
    }
    Ok(out)
}

pub fn matmul_backward<E: Element>(
    a: &Tensor4<E>,
    b: &Tensor4<E>,
    grad: &Tensor4<E>,
) -> (Tensor4<E>, Tensor4<E>) {
    let (m, k) = (a.shape().height, a.shape().width);
    let n = b.shape().width;
    let (d0, d1) = (grad.shape().batch, grad.shape().channels);
    let mut da = Tensor4::zeros(a.shape());
    let mut db = Tensor4::zeros(b.shape());
    let amat = m * k;
    let bmat = k * n;
    let omat = m * n;
    for i0 in 0..d0 {
        let a0 = if a.shape().batch == 1 { 0 } else { i0 };
        let b0 = if b.shape().batch == 1 { 0 } else { i0 };
        for i1 in 0..d1 {
            let a1 = if a.shape().channels == 1 { 0 } else { i1 };
            let b1 = if b.shape().channels == 1 { 0 } else { i1 };
            let abase = (a0 * a.shape().channels + a1) * amat;
            let bbase = (b0 * b.shape().channels + b1) * bmat;
            let obase = (i0 * d1 + i1) * omat;
            let g = &grad.data()[obase..obase + omat];
            // dA += dC * B^T ; dB += A^T * dC
            mm_nt_acc(
                g,
                &b.data()[bbase..bbase + bmat],
                &mut da.data_mut()[abase..abase + amat],
                m,
                n,
                k,
            );
            mm_tn_acc(
                &a.data()[abase..abase + amat],
                g,
                &mut db.data_mut()[bbase..bbase + bmat],
                m,
                k,
                n,
            );
        }
    }
    (da, db)
}

// ---------------------------------------------------------------------------
// conv2d: cross-correlation, explicit zero padding, stride/dilation/groups
// ---------------------------------------------------------------------------

pub fn conv2d_out_size(
    in_size: usize,
    k: usize,
    stride: usize,
    dilation: usize,
    pad: usize,
) -> Option<usize> {
    let span = dilation * (k - 1) + 1;
    let padded = in_size + 2 * pad;
    if padded < span {
        return None;
    }
    Some((padded - span) / stride + 1)
}

/// Padding that keeps `out = in / stride` for odd kernels (assuming the input
/// size is divisible by the stride).
pub fn same_padding(k: usize, dilation: usize) -> usize {
    dilation * (k - 1) / 2
}

pub struct ConvSpec {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub pad: usize,
}

fn conv_check<E: Element>(
    x: &Tensor4<E>,
    w: &Tensor4<E>,
    spec: &ConvSpec,
) -> Result<Shape4, TensorError> {
    let xs = x.shape();
    let ws = w.shape();
    let (c_out, c_in_g, kh, kw) = (ws.batch, ws.channels, ws.height, ws.width);
    if spec.groups == 0 || xs.channels % spec.groups != 0 || c_out % spec.groups != 0 {
        return Err(TensorError::invalid(
            "conv2d",
            format!(
                "groups {} must divide input channels {} and output channels {}",
                spec.groups, xs.channels, c_out
            ),
        ));
    }
    if c_in_g != xs.channels / spec.groups {
        return Err(TensorError::shape("conv2d", xs, ws));
    }
    if spec.stride == 0 || spec.dilation == 0 {
        return Err(TensorError::invalid("conv2d", "stride and dilation must be >= 1"));
    }
    let oh = conv2d_out_size(xs.height, kh, spec.stride, spec.dilation, spec.pad);
    let ow = conv2d_out_size(xs.width, kw, spec.stride, spec.dilation, spec.pad);
    match (oh, ow) {
        (Some(oh), Some(ow)) => Ok(Shape4::new(xs.batch, c_out, oh, ow)),
        _ => Err(TensorError::invalid(
            "conv2d",
            format!("kernel {kh}x{kw} does not fit input {xs} with padding {}", spec.pad),
        )),
    }
}

pub fn conv2d<E: Element>(
    x: &Tensor4<E>,
    w: &Tensor4<E>,
    spec: &ConvSpec,
) -> Result<Tensor4<E>, TensorError> {
    let out_shape = conv_check(x, w, spec)?;
    let xs = x.shape();
    let ws = w.shape();
    let (kh, kw) = (ws.height, ws.width);
    // Pointwise fast path: identical accumulation order (ascending input
    // channel) as the general loop below, just restructured for locality.
    if kh == 1 && kw == 1 && spec.stride == 1 && spec.pad == 0 {
        return Ok(conv1x1(x, w, spec.groups, out_shape));
    }
    let mut out = Tensor4::zeros(out_shape);
    let cig = xs.channels / spec.groups;
    let cog = out_shape.channels / spec.groups;
    for b in 0..xs.batch {
        for co in 0..out_shape.channels {
            let g = co / cog;
            for oy in 0..out_shape.height {
                for ox in 0..out_shape.width {
                    let mut acc = E::zero();
                    for ci in 0..cig {
                        let c = g * cig + ci;
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                - spec.pad as isize;
                            if iy < 0 || iy >= xs.height as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.pad as isize;
                                if ix < 0 || ix >= xs.width as isize {
                                    continue;
                                }
                                acc = acc
                                    + x.at(b, c, iy as usize, ix as usize)
                                        * w.at(co, ci, ky, kx);
                            }
                        }
                    }
                    out.set(b, co, oy, ox, acc);
                }
            }
        }
    }
    Ok(out)
}

fn conv1x1<E: Element>(
    x: &Tensor4<E>,
    w: &Tensor4<E>,
    groups: usize,
    out_shape: Shape4,
) -> Tensor4<E> {
    let xs = x.shape();
    let n = xs.spatial();
    let cig = xs.channels / groups;
    let cog = out_shape.channels / groups;
    let mut out = Tensor4::zeros(out_shape);
    for b in 0..xs.batch {
        for g in 0..groups {
            for co_local in 0..cog {
                let co = g * cog + co_local;
                let obase = (b * out_shape.channels + co) * n;
                for ci_local in 0..cig {
                    let ci = g * cig + ci_local;
                    let xbase = (b * xs.channels + ci) * n;
                    let wv = w.data()[co * cig + ci_local];
                    let (xrow, orow) = (
                        &x.data()[xbase..xbase + n],
                        &mut out.data_mut()[obase..obase + n],
                    );
                    for j in 0..n {
                        orow[j] = orow[j] + wv * xrow[j];
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_backward<E: Element>(
    x: &Tensor4<E>,
    w: &Tensor4<E>,
    spec: &ConvSpec,
    grad: &Tensor4<E>,
) -> (Tensor4<E>, Tensor4<E>) {
    let xs = x.shape();
    let ws = w.shape();
    let os = grad.shape();
    let (kh, kw) = (ws.height, ws.width);
    let cig = xs.channels / spec.groups;
    let cog = os.channels / spec.groups;
    let mut dx = Tensor4::zeros(xs);
    let mut dw = Tensor4::zeros(ws);
    for b in 0..xs.batch {
        for co in 0..os.channels {
            let g = co / cog;
            for oy in 0..os.height {
                for ox in 0..os.width {
                    let go = grad.at(b, co, oy, ox);
                    if go == E::zero() {
                        continue;
                    }
                    for ci in 0..cig {
                        let c = g * cig + ci;
                        for ky in 0..kh {
                            let iy = (oy * spec.stride + ky * spec.dilation) as isize
                                - spec.pad as isize;
                            if iy < 0 || iy >= xs.height as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * spec.stride + kx * spec.dilation) as isize
                                    - spec.pad as isize;
                                if ix < 0 || ix >= xs.width as isize {
                                    continue;
                                }
                                let xi = x.offset(b, c, iy as usize, ix as usize);
                                let wi = w.offset(co, ci, ky, kx);
                                dx.data_mut()[xi] = dx.data_mut()[xi] + go * w.data()[wi];
                                dw.data_mut()[wi] = dw.data_mut()[wi] + go * x.data()[xi];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

// ---------------------------------------------------------------------------
// axis helpers: decompose the tensor into (outer, axis, inner) runs
// ---------------------------------------------------------------------------

fn axis_spans(shape: Shape4, axis: usize) -> (usize, usize, usize) {
    let d = shape.dims();
    let outer: usize = d[..axis].iter().product();
    let inner: usize = d[axis + 1..].iter().product();
    (outer, d[axis], inner)
}

pub fn softmax<E: Element>(x: &Tensor4<E>, axis: usize) -> Tensor4<E> {
    let (outer, len, inner) = axis_spans(x.shape(), axis);
    let mut out = Tensor4::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut max = E::neg_infinity();
            for a in 0..len {
                if xd[idx(a)] > max {
                    max = xd[idx(a)];
                }
            }
            let mut sum = E::zero();
            for a in 0..len {
                let e = (xd[idx(a)] - max).exp();
                od[idx(a)] = e;
                sum = sum + e;
            }
            for a in 0..len {
                od[idx(a)] = od[idx(a)] / sum;
            }
        }
    }
    out
}

pub fn softmax_backward<E: Element>(
    y: &Tensor4<E>,
    grad: &Tensor4<E>,
    axis: usize,
) -> Tensor4<E> {
    let (outer, len, inner) = axis_spans(y.shape(), axis);
    let mut out = Tensor4::zeros(y.shape());
    let yd = y.data();
    let gd = grad.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut dot = E::zero();
            for a in 0..len {
                dot = dot + gd[idx(a)] * yd[idx(a)];
            }
            for a in 0..len {
                od[idx(a)] = yd[idx(a)] * (gd[idx(a)] - dot);
            }
        }
    }
    out
}

/// y = x / sqrt(sum(x^2) + eps) along `axis`. An all-zero lane maps to the
/// zero vector thanks to the epsilon inside the square root.
pub fn l2_normalize<E: Element>(x: &Tensor4<E>, axis: usize, eps: E) -> Tensor4<E> {
    let (outer, len, inner) = axis_spans(x.shape(), axis);
    let mut out = Tensor4::zeros(x.shape());
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut sq = E::zero();
            for a in 0..len {
                sq = sq + xd[idx(a)] * xd[idx(a)];
            }
            let r = (sq + eps).sqrt();
            for a in 0..len {
                od[idx(a)] = xd[idx(a)] / r;
            }
        }
    }
    out
}

pub fn l2_normalize_backward<E: Element>(
    x: &Tensor4<E>,
    grad: &Tensor4<E>,
    axis: usize,
    eps: E,
) -> Tensor4<E> {
    let (outer, len, inner) = axis_spans(x.shape(), axis);
    let mut out = Tensor4::zeros(x.shape());
    let xd = x.data();
    let gd = grad.data();
    let od = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |a: usize| (o * len + a) * inner + i;
            let mut sq = E::zero();
            let mut dot = E::zero();
            for a in 0..len {
                sq = sq + xd[idx(a)] * xd[idx(a)];
                dot = dot + gd[idx(a)] * xd[idx(a)];
            }
            let r = (sq + eps).sqrt();
            let r3 = r * r * r;
            for a in 0..len {
                od[idx(a)] = gd[idx(a)] / r - xd[idx(a)] * dot / r3;
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

/// Sum along one axis, keeping it with size 1.
pub fn sum_axis<E: Element>(x: &Tensor4<E>, axis: usize) -> Tensor4<E> {
    let (outer, len, inner) = axis_spans(x.shape(), axis);
    let mut dims = x.shape().dims();
    dims[axis] = 1;
    let mut out = Tensor4::zeros(Shape4::from_dims(dims));
    let xd = x.data();
    let od = out.data_mut();
    for o in 0..outer {
        for a in 0..len {
            for i in 0..inner {
                od[o * inner + i] = od[o * inner + i] + xd[(o * len + a) * inner + i];
            }
        }
    }
    out
}

pub fn sum_axis_backward<E: Element>(
    x_shape: Shape4,
    grad: &Tensor4<E>,
    axis: usize,
) -> Tensor4<E> {
    let (outer, len, inner) = axis_spans(x_shape, axis);
    let mut out = Tensor4::zeros(x_shape);
    let gd = grad.data();
    let od = out.data_mut();
    for o in 0..outer {
        for a in 0..len {
            for i in 0..inner {
                od[(o * len + a) * inner + i] = gd[o * inner + i];
            }
        }
    }
    out
}

pub fn sum_all<E: Element>(x: &Tensor4<E>) -> Tensor4<E> {
    let mut acc = E::zero();
    for &v in x.data() {
        acc = acc + v;
    }
    Tensor4::scalar(acc)
}

// ---------------------------------------------------------------------------
// pooling and resampling
// ---------------------------------------------------------------------------

fn adaptive_window(i: usize, in_size: usize, out_size: usize) -> (usize, usize) {
    let start = i * in_size / out_size;
    let end = ((i + 1) * in_size).div_ceil(out_size);
    (start, end)
}

pub fn adaptive_avg_pool<E: Element>(x: &Tensor4<E>, oh: usize, ow: usize) -> Tensor4<E> {
    let xs = x.shape();
    let mut out = Tensor4::zeros(Shape4::new(xs.batch, xs.channels, oh, ow));
    for b in 0..xs.batch {
        for c in 0..xs.channels {
            for oy in 0..oh {
                let (y0, y1) = adaptive_window(oy, xs.height, oh);
                for ox in 0..ow {
                    let (x0, x1) = adaptive_window(ox, xs.width, ow);
                    let mut acc = E::zero();
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc = acc + x.at(b, c, iy, ix);
                        }
                    }
                    let count = E::from_usize_((y1 - y0) * (x1 - x0));
                    out.set(b, c, oy, ox, acc / count);
                }
            }
        }
    }
    out
}

pub fn adaptive_avg_pool_backward<E: Element>(
    x_shape: Shape4,
    grad: &Tensor4<E>,
) -> Tensor4<E> {
    let os = grad.shape();
    let mut dx = Tensor4::zeros(x_shape);
    for b in 0..x_shape.batch {
        for c in 0..x_shape.channels {
            for oy in 0..os.height {
                let (y0, y1) = adaptive_window(oy, x_shape.height, os.height);
                for ox in 0..os.width {
                    let (x0, x1) = adaptive_window(ox, x_shape.width, os.width);
                    let count = E::from_usize_((y1 - y0) * (x1 - x0));
                    let g = grad.at(b, c, oy, ox) / count;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let i = dx.offset(b, c, iy, ix);
                            dx.data_mut()[i] = dx.data_mut()[i] + g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Non-overlapping average pooling with kernel = stride = `k`.
pub fn avg_pool<E: Element>(x: &Tensor4<E>, k: usize) -> Result<Tensor4<E>, TensorError> {
    let xs = x.shape();
    if k == 0 || xs.height % k != 0 || xs.width % k != 0 {
        return Err(TensorError::invalid(
            "avg_pool",
            format!("stride {k} must evenly divide spatial size {}x{}", xs.height, xs.width),
        ));
    }
    Ok(adaptive_avg_pool(x, xs.height / k, xs.width / k))
}

/// Bilinear interpolation weights for one output coordinate,
/// align-corners=false convention: src = (dst + 0.5) * in/out - 0.5.
fn bilerp_taps(o: usize, in_size: usize, out_size: usize) -> (usize, usize, f64) {
    let src = (o as f64 + 0.5) * in_size as f64 / out_size as f64 - 0.5;
    let clamped = src.max(0.0).min(in_size as f64 - 1.0);
    let i0 = clamped.floor() as usize;
    let i1 = (i0 + 1).min(in_size - 1);
    let frac = clamped - i0 as f64;
    (i0, i1, frac)
}

pub fn bilinear_resize<E: Element>(x: &Tensor4<E>, oh: usize, ow: usize) -> Tensor4<E> {
    let xs = x.shape();
    let mut out = Tensor4::zeros(Shape4::new(xs.batch, xs.channels, oh, ow));
    for oy in 0..oh {
        let (y0, y1, fy) = bilerp_taps(oy, xs.height, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = bilerp_taps(ox, xs.width, ow);
            let w00 = E::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = E::from_f64((1.0 - fy) * fx);
            let w10 = E::from_f64(fy * (1.0 - fx));
            let w11 = E::from_f64(fy * fx);
            for b in 0..xs.batch {
                for c in 0..xs.channels {
                    let v = x.at(b, c, y0, x0) * w00
                        + x.at(b, c, y0, x1) * w01
                        + x.at(b, c, y1, x0) * w10
                        + x.at(b, c, y1, x1) * w11;
                    out.set(b, c, oy, ox, v);
                }
            }
        }
    }
    out
}

pub fn bilinear_resize_backward<E: Element>(
    x_shape: Shape4,
    grad: &Tensor4<E>,
) -> Tensor4<E> {
    let os = grad.shape();
    let mut dx = Tensor4::zeros(x_shape);
    for oy in 0..os.height {
        let (y0, y1, fy) = bilerp_taps(oy, x_shape.height, os.height);
        for ox in 0..os.width {
            let (x0, x1, fx) = bilerp_taps(ox, x_shape.width, os.width);
            let w00 = E::from_f64((1.0 - fy) * (1.0 - fx));
            let w01 = E::from_f64((1.0 - fy) * fx);
            let w10 = E::from_f64(fy * (1.0 - fx));
            let w11 = E::from_f64(fy * fx);
            for b in 0..x_shape.batch {
                for c in 0..x_shape.channels {
                    let g = grad.at(b, c, oy, ox);
                    for (iy, ix, w) in [
                        (y0, x0, w00),
                        (y0, x1, w01),
                        (y1, x0, w10),
                        (y1, x1, w11),
                    ] {
                        let i = dx.offset(b, c, iy, ix);
                        dx.data_mut()[i] = dx.data_mut()[i] + g * w;
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// layout moves (pure index permutations; backward is the inverse move)
// ---------------------------------------------------------------------------

/// `[B, C, H, W] -> [B, 1, N, C]` with `N = H * W`: each spatial position
/// becomes a token row of channel values.
pub fn map_to_tokens<E: Element>(x: &Tensor4<E>) -> Tensor4<E> {
    let xs = x.shape();
    let n = xs.spatial();
    let mut out = Tensor4::zeros(Shape4::new(xs.batch, 1, n, xs.channels));
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..xs.batch {
        for c in 0..xs.channels {
            let xbase = (b * xs.channels + c) * n;
            let obase = b * n * xs.channels;
            for t in 0..n {
                od[obase + t * xs.channels + c] = xd[xbase + t];
            }
        }
    }
    out
}

/// Inverse of [`map_to_tokens`]: `[B, 1, N, C] -> [B, C, H, W]`.
pub fn tokens_to_map<E: Element>(
    x: &Tensor4<E>,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Tensor4<E>, TensorError> {
    let xs = x.shape();
    let n = height * width;
    if xs.channels != 1 || xs.height != n || xs.width != channels {
        return Err(TensorError::shape(
            "tokens_to_map",
            xs,
            Shape4::new(xs.batch, 1, n, channels),
        ));
    }
    let mut out = Tensor4::zeros(Shape4::new(xs.batch, channels, height, width));
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..xs.batch {
        for c in 0..channels {
            let obase = (b * channels + c) * n;
            let xbase = b * n * channels;
            for t in 0..n {
                od[obase + t] = xd[xbase + t * channels + c];
            }
        }
    }
    Ok(out)
}

/// `[B, 1, N, C] -> [B, h, N, C/h]`, splitting channels into `h` contiguous
/// blocks.
pub fn split_heads<E: Element>(
    x: &Tensor4<E>,
    heads: usize,
) -> Result<Tensor4<E>, TensorError> {
    let xs = x.shape();
    if xs.channels != 1 || heads == 0 || xs.width % heads != 0 {
        return Err(TensorError::invalid(
            "split_heads",
            format!("{heads} heads must divide channel count {} of tokens {xs}", xs.width),
        ));
    }
    let ch = xs.width / heads;
    let n = xs.height;
    let mut out = Tensor4::zeros(Shape4::new(xs.batch, heads, n, ch));
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..xs.batch {
        for h in 0..heads {
            for t in 0..n {
                let xbase = (b * n + t) * xs.width + h * ch;
                let obase = ((b * heads + h) * n + t) * ch;
                od[obase..obase + ch].copy_from_slice(&xd[xbase..xbase + ch]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`split_heads`]: `[B, h, N, C/h] -> [B, 1, N, C]`.
pub fn merge_heads<E: Element>(x: &Tensor4<E>) -> Tensor4<E> {
    let xs = x.shape();
    let (heads, n, ch) = (xs.channels, xs.height, xs.width);
    let c = heads * ch;
    let mut out = Tensor4::zeros(Shape4::new(xs.batch, 1, n, c));
    let xd = x.data();
    let od = out.data_mut();
    for b in 0..xs.batch {
        for h in 0..heads {
            for t in 0..n {
                let xbase = ((b * heads + h) * n + t) * ch;
                let obase = (b * n + t) * c + h * ch;
                od[obase..obase + ch].copy_from_slice(&xd[xbase..xbase + ch]);
            }
        }
    }
    out
}

/// Swap the trailing two dimensions.
pub fn transpose_last<E: Element>(x: &Tensor4<E>) -> Tensor4<E> {
    let xs = x.shape();
    let mut out = Tensor4::zeros(Shape4::new(xs.batch, xs.channels, xs.width, xs.height));
    for b in 0..xs.batch {
        for c in 0..xs.channels {
            for y in 0..xs.height {
                for x_ in 0..xs.width {
                    let v = x.at(b, c, y, x_);
                    out.set(b, c, x_, y, v);
                }
            }
        }
    }
    out
}

pub fn concat_channels<E: Element>(
    a: &Tensor4<E>,
    b: &Tensor4<E>,
) -> Result<Tensor4<E>, TensorError> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.batch != sb.batch || sa.height != sb.height || sa.width != sb.width {
        return Err(TensorError::shape("concat_channels", sa, sb));
    }
    let mut out = Tensor4::zeros(Shape4::new(
        sa.batch,
        sa.channels + sb.channels,
        sa.height,
        sa.width,
    ));
    let plane = sa.spatial();
    for ib in 0..sa.batch {
        let abase = ib * sa.channels * plane;
        let bbase = ib * sb.channels * plane;
        let obase = ib * (sa.channels + sb.channels) * plane;
        out.data_mut()[obase..obase + sa.channels * plane]
            .copy_from_slice(&a.data()[abase..abase + sa.channels * plane]);
        out.data_mut()[obase + sa.channels * plane..obase + (sa.channels + sb.channels) * plane]
            .copy_from_slice(&b.data()[bbase..bbase + sb.channels * plane]);
    }
    Ok(out)
}

pub fn concat_channels_backward<E: Element>(
    a_shape: Shape4,
    b_shape: Shape4,
    grad: &Tensor4<E>,
) -> (Tensor4<E>, Tensor4<E>) {
    let mut da = Tensor4::zeros(a_shape);
    let mut db = Tensor4::zeros(b_shape);
    let plane = a_shape.spatial();
    for ib in 0..a_shape.batch {
        let abase = ib * a_shape.channels * plane;
        let bbase = ib * b_shape.channels * plane;
        let obase = ib * (a_shape.channels + b_shape.channels) * plane;
        da.data_mut()[abase..abase + a_shape.channels * plane]
            .copy_from_slice(&grad.data()[obase..obase + a_shape.channels * plane]);
        db.data_mut()[bbase..bbase + b_shape.channels * plane].copy_from_slice(
            &grad.data()
                [obase + a_shape.channels * plane..obase + (a_shape.channels + b_shape.channels) * plane],
        );
    }
    (da, db)
}
