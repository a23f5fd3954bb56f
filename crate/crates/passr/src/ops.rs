//! Forward and backward kernels for every tape operation.
//!
//! Everything here is a pure function of its inputs with a fixed,
//! single-threaded reduction order, so results are bit-reproducible.

use crate::error::TensorError;
use crate::scalar::Scalar;
use crate::tensor::{broadcast_shape, broadcast_strides, reduce_to_shape, Tensor};

// ── Elementwise with trailing-dimension broadcasting ─────────────────

pub fn ew_binary<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>, TensorError> {
    let out_shape = broadcast_shape(a.shape(), b.shape(), op)?;
    let numel: usize = out_shape.iter().product();
    let sa = broadcast_strides(a.shape(), &out_shape);
    let sb = broadcast_strides(b.shape(), &out_shape);
    let ad = a.data();
    let bd = b.data();
    let mut out = Vec::with_capacity(numel);
    if a.shape() == b.shape() {
        // fast path: aligned buffers
        for i in 0..numel {
            out.push(f(ad[i], bd[i]));
        }
    } else {
        let rank = out_shape.len();
        let mut idx = vec![0usize; rank];
        for _ in 0..numel {
            let mut oa = 0;
            let mut ob = 0;
            for d in 0..rank {
                oa += idx[d] * sa[d];
                ob += idx[d] * sb[d];
            }
            out.push(f(ad[oa], bd[ob]));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
    }
    Tensor::from_vec(&out_shape, out)
}

/// Gradient of a broadcast binary op for one operand: scale the upstream
/// gradient elementwise by `local` (already broadcast-aligned), then sum
/// back down to the operand's shape.
pub fn ew_grad_to<T: Scalar>(upstream: &Tensor<T>, local: Option<&Tensor<T>>, operand_shape: &[usize]) -> Tensor<T> {
    let scaled = match local {
        Some(l) => ew_binary("grad_mul", upstream, l, |g, v| g * v).expect("aligned by construction"),
        None => upstream.clone(),
    };
    reduce_to_shape(&scaled, operand_shape)
}

pub fn sum_all<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    Tensor::scalar(a.data().iter().copied().sum())
}

// ── Batched matrix multiplication ────────────────────────────────────

/// (N, m, k) ⊗ (N, k, n) -> (N, m, n); independent product per batch slice.
pub fn matmul_batched<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.rank() != 3 || b.rank() != 3 {
        return Err(TensorError::BadShape {
            op: "matmul_batched",
            expected: "rank-3 operands".into(),
            got: if a.rank() != 3 { a.shape().to_vec() } else { b.shape().to_vec() },
        });
    }
    let (nb, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (nb2, k2, n) = (b.shape()[0], b.shape()[1], b.shape()[2]);
    if nb != nb2 || k != k2 {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_batched",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![T::zero(); nb * m * n];
    for h in 0..nb {
        let abase = h * m * k;
        let bbase = h * k * n;
        let obase = h * m * n;
        for i in 0..m {
            let orow = &mut out[obase + i * n..obase + (i + 1) * n];
            for p in 0..k {
                let aip = ad[abase + i * k + p];
                let brow = &bd[bbase + p * n..bbase + (p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + aip * bv;
                }
            }
        }
    }
    Tensor::from_vec(&[nb, m, n], out)
}

/// Gradients of the batched product: dA = dC ⊗ Bᵀ, dB = Aᵀ ⊗ dC.
pub fn matmul_batched_grads<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dout: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (nb, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let n = b.shape()[2];
    let ad = a.data();
    let bd = b.data();
    let dd = dout.data();
    let mut da = vec![T::zero(); nb * m * k];
    let mut db = vec![T::zero(); nb * k * n];
    for h in 0..nb {
        let abase = h * m * k;
        let bbase = h * k * n;
        let obase = h * m * n;
        for i in 0..m {
            let drow = &dd[obase + i * n..obase + (i + 1) * n];
            // dA[i,p] = Σ_j dC[i,j] · B[p,j]
            for p in 0..k {
                let brow = &bd[bbase + p * n..bbase + (p + 1) * n];
                let mut s = T::zero();
                for (dv, bv) in drow.iter().zip(brow) {
                    s = s + *dv * *bv;
                }
                da[abase + i * k + p] = da[abase + i * k + p] + s;
            }
            // dB[p,j] += A[i,p] · dC[i,j]
            for p in 0..k {
                let aip = ad[abase + i * k + p];
                let dbrow = &mut db[bbase + p * n..bbase + (p + 1) * n];
                for (o, &dv) in dbrow.iter_mut().zip(drow) {
                    *o = *o + aip * dv;
                }
            }
        }
    }
    (
        Tensor::from_vec(a.shape(), da).expect("shape fixed"),
        Tensor::from_vec(b.shape(), db).expect("shape fixed"),
    )
}

/// (..., m, n) -> (..., n, m).
pub fn transpose_last2<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.rank() < 2 {
        return Err(TensorError::BadShape {
            op: "transpose_last2",
            expected: "rank >= 2".into(),
            got: a.shape().to_vec(),
        });
    }
    let rank = a.rank();
    let m = a.shape()[rank - 2];
    let n = a.shape()[rank - 1];
    let batch: usize = a.shape()[..rank - 2].iter().product();
    let ad = a.data();
    let mut out = vec![T::zero(); a.numel()];
    for h in 0..batch {
        let base = h * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = ad[base + i * n + j];
            }
        }
    }
    let mut shape = a.shape().to_vec();
    shape.swap(rank - 2, rank - 1);
    Tensor::from_vec(&shape, out)
}

// ── Softmax over the last dimension ──────────────────────────────────

/// Numerically stabilized by per-row max subtraction.
pub fn softmax_lastdim<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if a.rank() == 0 || *a.shape().last().unwrap() == 0 {
        return Err(TensorError::BadShape {
            op: "softmax_lastdim",
            expected: "last extent >= 1".into(),
            got: a.shape().to_vec(),
        });
    }
    if !a.all_finite() {
        return Err(TensorError::NonFinite { op: "softmax_lastdim(input)" });
    }
    let l = *a.shape().last().unwrap();
    let rows = a.numel() / l;
    let ad = a.data();
    let mut out = vec![T::zero(); a.numel()];
    for r in 0..rows {
        let row = &ad[r * l..(r + 1) * l];
        let mut mx = row[0];
        for &v in row {
            if v > mx {
                mx = v;
            }
        }
        let orow = &mut out[r * l..(r + 1) * l];
        let mut sum = T::zero();
        for (o, &v) in orow.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            sum = sum + e;
        }
        let inv = T::one() / sum;
        for o in orow.iter_mut() {
            *o = *o * inv;
        }
    }
    Tensor::from_vec(a.shape(), out)
}

/// dx_i = y_i · (dy_i − Σ_j dy_j y_j), per row.
pub fn softmax_lastdim_grad<T: Scalar>(y: &Tensor<T>, dout: &Tensor<T>) -> Tensor<T> {
    let l = *y.shape().last().unwrap();
    let rows = y.numel() / l;
    let yd = y.data();
    let dd = dout.data();
    let mut dx = vec![T::zero(); y.numel()];
    for r in 0..rows {
        let yrow = &yd[r * l..(r + 1) * l];
        let drow = &dd[r * l..(r + 1) * l];
        let mut dot = T::zero();
        for (y, d) in yrow.iter().zip(drow) {
            dot = dot + *y * *d;
        }
        let xrow = &mut dx[r * l..(r + 1) * l];
        for i in 0..l {
            xrow[i] = yrow[i] * (drow[i] - dot);
        }
    }
    Tensor::from_vec(y.shape(), dx).expect("shape fixed")
}

// ── 2-D convolution (cross-correlation, stride 1, same zero-padding) ─

/// x: (H, W, Cin), kernel: (kh, kw, Cin, Cout), bias: (Cout), dilation >= 1.
/// Kernel extents must be odd so same-padding is symmetric; the effective
/// receptive field is (k−1)·dilation+1 per axis.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<Tensor<T>, TensorError> {
    let (h, w, cin, kh, kw, cout) = conv2d_check(x, kernel, bias, dilation)?;
    let q = kh * kw * cin;
    let kd = kernel.data();
    let bd = bias.data();
    let mut out = vec![T::zero(); h * w * cout];
    let mut patches = vec![T::zero(); w * q];
    for i in 0..h {
        im2col_row(x, i, kh, kw, dilation, &mut patches);
        for j in 0..w {
            let orow = &mut out[(i * w + j) * cout..(i * w + j + 1) * cout];
            orow.copy_from_slice(bd);
            let prow = &patches[j * q..(j + 1) * q];
            for (qq, &p) in prow.iter().enumerate() {
                if p == T::zero() {
                    continue;
                }
                let krow = &kd[qq * cout..(qq + 1) * cout];
                for (o, &kv) in orow.iter_mut().zip(krow) {
                    *o = *o + p * kv;
                }
            }
        }
    }
    Tensor::from_vec(&[h, w, cout], out)
}

/// Gradients wrt input, kernel and bias.
pub fn conv2d_grads<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    dout: &Tensor<T>,
    dilation: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[3]);
    let q = kh * kw * cin;
    let ch = (kh - 1) / 2;
    let cw = (kw - 1) / 2;
    let kd = kernel.data();
    let dd = dout.data();
    let mut dx = vec![T::zero(); h * w * cin];
    let mut dk = vec![T::zero(); kernel.numel()];
    let mut db = vec![T::zero(); cout];
    let mut patches = vec![T::zero(); w * q];
    let mut dpatches = vec![T::zero(); w * q];
    for i in 0..h {
        im2col_row(x, i, kh, kw, dilation, &mut patches);
        for v in dpatches.iter_mut() {
            *v = T::zero();
        }
        for j in 0..w {
            let drow = &dd[(i * w + j) * cout..(i * w + j + 1) * cout];
            for (o, &dv) in db.iter_mut().zip(drow) {
                *o = *o + dv;
            }
            // dK[q,o] += P[j,q] · dOut[j,o];  dP[j,q] = Σ_o dOut[j,o] · K[q,o]
            let prow = &patches[j * q..(j + 1) * q];
            let dprow = &mut dpatches[j * q..(j + 1) * q];
            for qq in 0..q {
                let p = prow[qq];
                let krow = &kd[qq * cout..(qq + 1) * cout];
                let mut s = T::zero();
                if p == T::zero() {
                    for (dv, kv) in drow.iter().zip(krow) {
                        s = s + *dv * *kv;
                    }
                } else {
                    let dkrow = &mut dk[qq * cout..(qq + 1) * cout];
                    for ((dv, kv), dkv) in drow.iter().zip(krow).zip(dkrow.iter_mut()) {
                        s = s + *dv * *kv;
                        *dkv = *dkv + p * *dv;
                    }
                }
                dprow[qq] = s;
            }
        }
        // col2im: scatter-add the patch gradient back into dx
        for (t, (dy, dxk)) in tap_iter(kh, kw).enumerate() {
            let r = i as isize + (dy as isize - ch as isize) * dilation as isize;
            if r < 0 || r >= h as isize {
                continue;
            }
            let r = r as usize;
            for j in 0..w {
                let cj = j as isize + (dxk as isize - cw as isize) * dilation as isize;
                if cj < 0 || cj >= w as isize {
                    continue;
                }
                let cj = cj as usize;
                let src = &dpatches[j * q + t * cin..j * q + (t + 1) * cin];
                let dst = &mut dx[(r * w + cj) * cin..(r * w + cj) * cin + cin];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
        }
    }
    (
        Tensor::from_vec(x.shape(), dx).expect("shape fixed"),
        Tensor::from_vec(kernel.shape(), dk).expect("shape fixed"),
        Tensor::from_vec(&[cout], db).expect("shape fixed"),
    )
}

fn conv2d_check<T: Scalar>(
    x: &Tensor<T>,
    kernel: &Tensor<T>,
    bias: &Tensor<T>,
    dilation: usize,
) -> Result<(usize, usize, usize, usize, usize, usize), TensorError> {
    if x.rank() != 3 {
        return Err(TensorError::BadShape {
            op: "conv2d",
            expected: "input (H, W, Cin)".into(),
            got: x.shape().to_vec(),
        });
    }
    if kernel.rank() != 4 {
        return Err(TensorError::BadShape {
            op: "conv2d",
            expected: "kernel (kh, kw, Cin, Cout)".into(),
            got: kernel.shape().to_vec(),
        });
    }
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, kcin, cout) = (kernel.shape()[0], kernel.shape()[1], kernel.shape()[2], kernel.shape()[3]);
    if kcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d(channels)",
            lhs: x.shape().to_vec(),
            rhs: kernel.shape().to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::InvalidArg { op: "conv2d", msg: format!("kernel extents must be odd, got {kh}x{kw}") });
    }
    if dilation == 0 {
        return Err(TensorError::InvalidArg { op: "conv2d", msg: "dilation must be >= 1".into() });
    }
    if bias.shape() != [cout] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d(bias)",
            lhs: bias.shape().to_vec(),
            rhs: vec![cout],
        });
    }
    Ok((h, w, cin, kh, kw, cout))
}

fn tap_iter(kh: usize, kw: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..kh).flat_map(move |dy| (0..kw).map(move |dx| (dy, dx)))
}

/// Gather one output row's receptive fields into `patches` (W × kh·kw·Cin);
/// out-of-bounds taps stay zero (same zero-padding).
fn im2col_row<T: Scalar>(x: &Tensor<T>, i: usize, kh: usize, kw: usize, dilation: usize, patches: &mut [T]) {
    let (h, w, cin) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let q = kh * kw * cin;
    let ch = (kh - 1) / 2;
    let cw = (kw - 1) / 2;
    let xd = x.data();
    for v in patches.iter_mut() {
        *v = T::zero();
    }
    for (t, (dy, dx)) in tap_iter(kh, kw).enumerate() {
        let r = i as isize + (dy as isize - ch as isize) * dilation as isize;
        if r < 0 || r >= h as isize {
            continue;
        }
        let r = r as usize;
        for j in 0..w {
            let cj = j as isize + (dx as isize - cw as isize) * dilation as isize;
            if cj < 0 || cj >= w as isize {
                continue;
            }
            let cj = cj as usize;
            let src = &xd[(r * w + cj) * cin..(r * w + cj) * cin + cin];
            patches[j * q + t * cin..j * q + (t + 1) * cin].copy_from_slice(src);
        }
    }
}

// ── Pixel shuffle (depth-to-space) ───────────────────────────────────

/// (H, W, C·s²) -> (sH, sW, C) with the index map
/// out[i·s+dh, j·s+dw, c] = in[i, j, c·s² + dh·s + dw].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, s: usize) -> Result<Tensor<T>, TensorError> {
    if x.rank() != 3 || s == 0 || x.shape()[2] % (s * s) != 0 {
        return Err(TensorError::BadShape {
            op: "pixel_shuffle",
            expected: format!("(H, W, C·{}²)", s),
            got: x.shape().to_vec(),
        });
    }
    let (h, w, cs2) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c = cs2 / (s * s);
    let xd = x.data();
    let mut out = vec![T::zero(); h * w * cs2];
    let (oh, ow) = (h * s, w * s);
    for i in 0..h {
        for j in 0..w {
            let ibase = (i * w + j) * cs2;
            for cc in 0..c {
                for dh in 0..s {
                    for dw in 0..s {
                        let v = xd[ibase + cc * s * s + dh * s + dw];
                        out[((i * s + dh) * ow + (j * s + dw)) * c + cc] = v;
                    }
                }
            }
        }
    }
    let _ = oh;
    Tensor::from_vec(&[h * s, w * s, c], out)
}

/// Exact inverse of `pixel_shuffle`; also the backward rule.
pub fn space_to_depth<T: Scalar>(y: &Tensor<T>, s: usize) -> Result<Tensor<T>, TensorError> {
    if y.rank() != 3 || s == 0 || y.shape()[0] % s != 0 || y.shape()[1] % s != 0 {
        return Err(TensorError::BadShape {
            op: "space_to_depth",
            expected: format!("(H·{s}, W·{s}, C)"),
            got: y.shape().to_vec(),
        });
    }
    let (oh, ow, c) = (y.shape()[0], y.shape()[1], y.shape()[2]);
    let (h, w) = (oh / s, ow / s);
    let cs2 = c * s * s;
    let yd = y.data();
    let mut out = vec![T::zero(); h * w * cs2];
    for i in 0..h {
        for j in 0..w {
            let obase = (i * w + j) * cs2;
            for cc in 0..c {
                for dh in 0..s {
                    for dw in 0..s {
                        out[obase + cc * s * s + dh * s + dw] =
                            yd[((i * s + dh) * ow + (j * s + dw)) * c + cc];
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[h, w, cs2], out)
}

// ── Concat / slice along dimensions ──────────────────────────────────

/// Concatenate along the last dimension; all leading extents must agree.
pub fn concat_lastdim<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::InvalidArg { op: "concat_lastdim", msg: "no operands".into() });
    }
    let lead = &parts[0].shape()[..parts[0].rank() - 1];
    for p in parts {
        if p.rank() != parts[0].rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(TensorError::ShapeMismatch {
                op: "concat_lastdim",
                lhs: parts[0].shape().to_vec(),
                rhs: p.shape().to_vec(),
            });
        }
    }
    let widths: Vec<usize> = parts.iter().map(|p| *p.shape().last().unwrap()).collect();
    let total: usize = widths.iter().sum();
    let rows: usize = lead.iter().product();
    let mut out = vec![T::zero(); rows * total];
    for r in 0..rows {
        let mut off = 0;
        for (p, &wd) in parts.iter().zip(&widths) {
            out[r * total + off..r * total + off + wd].copy_from_slice(&p.data()[r * wd..(r + 1) * wd]);
            off += wd;
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::from_vec(&shape, out)
}

/// Split a last-dim gradient back into the concat operands' shapes.
pub fn split_lastdim<T: Scalar>(g: &Tensor<T>, widths: &[usize]) -> Vec<Tensor<T>> {
    let lead = &g.shape()[..g.rank() - 1];
    let total = *g.shape().last().unwrap();
    let rows: usize = lead.iter().product();
    let gd = g.data();
    let mut outs = Vec::with_capacity(widths.len());
    let mut off = 0;
    for &wd in widths {
        let mut data = vec![T::zero(); rows * wd];
        for r in 0..rows {
            data[r * wd..(r + 1) * wd].copy_from_slice(&gd[r * total + off..r * total + off + wd]);
        }
        let mut shape = lead.to_vec();
        shape.push(wd);
        outs.push(Tensor::from_vec(&shape, data).expect("shape fixed"));
        off += wd;
    }
    outs
}

/// Rectangular sub-block `out[idx] = in[idx + start]` with extents `size`.
pub fn slice<T: Scalar>(a: &Tensor<T>, start: &[usize], size: &[usize]) -> Result<Tensor<T>, TensorError> {
    if start.len() != a.rank() || size.len() != a.rank() {
        return Err(TensorError::InvalidArg {
            op: "slice",
            msg: format!("start/size rank must match tensor rank {}", a.rank()),
        });
    }
    for d in 0..a.rank() {
        if start[d] + size[d] > a.shape()[d] || size[d] == 0 {
            return Err(TensorError::InvalidArg {
                op: "slice",
                msg: format!("range {}..{} out of bounds for dim {d} (extent {})", start[d], start[d] + size[d], a.shape()[d]),
            });
        }
    }
    let mut out = Vec::with_capacity(size.iter().product());
    let ad = a.data();
    // copy contiguous runs along the last dimension
    let last = a.rank() - 1;
    let lead_numel: usize = size[..last].iter().product();
    let mut idx = vec![0usize; last];
    for _ in 0..lead_numel.max(1) {
        let mut off = 0;
        for d in 0..last {
            off = off * a.shape()[d] + start[d] + idx[d];
        }
        off = off * a.shape()[last] + start[last];
        out.extend_from_slice(&ad[off..off + size[last]]);
        for d in (0..last).rev() {
            idx[d] += 1;
            if idx[d] < size[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(size, out)
}

/// Scatter a slice gradient back into a zero tensor of the source shape.
pub fn unslice<T: Scalar>(g: &Tensor<T>, src_shape: &[usize], start: &[usize]) -> Tensor<T> {
    let mut out = vec![T::zero(); src_shape.iter().product()];
    let gd = g.data();
    let size = g.shape();
    let last = src_shape.len() - 1;
    let lead_numel: usize = size[..last].iter().product();
    let mut idx = vec![0usize; last];
    let mut src_off = 0;
    for _ in 0..lead_numel.max(1) {
        let mut off = 0;
        for d in 0..last {
            off = off * src_shape[d] + start[d] + idx[d];
        }
        off = off * src_shape[last] + start[last];
        out[off..off + size[last]].copy_from_slice(&gd[src_off..src_off + size[last]]);
        src_off += size[last];
        for d in (0..last).rev() {
            idx[d] += 1;
            if idx[d] < size[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::from_vec(src_shape, out).expect("shape fixed")
}
