//! Primitive tensor kernels.
//!
//! Every kernel is a pure function of its inputs. The differentiable wrappers
//! in [`super::tape`] call these for their forward values, so the math lives
//! in exactly one place.

use super::{axis_split, strides_of, Real, Result, Tensor, TensorError};

/// Epsilon guarding the cosine-similarity denominator; vectors with a norm
/// below this are treated as zero and yield similarity 0.
pub const EPS_NORM: f64 = 1e-8;

/// Epsilon inside group normalization's variance square root.
pub const EPS_GROUP_NORM: f64 = 1e-8;

/// out[..., i, ...] = x[..., (i - shift) mod extent, ...] along `axis`.
/// Any integer shift is accepted and normalized modulo the extent.
pub fn circular_roll<T: Real>(x: &Tensor<T>, axis: usize, shift: i64) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(TensorError::AxisOutOfRange {
            axis,
            rank: x.rank(),
        });
    }
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let ext = extent as i64;
    let sh = ((shift % ext) + ext) % ext;
    let mut out = Tensor::zeros(x.shape());
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        let base = o * extent * inner;
        for i in 0..extent {
            let si = ((i as i64 + ext - sh) % ext) as usize;
            let d = base + i * inner;
            let s = base + si * inner;
            dst[d..d + inner].copy_from_slice(&src[s..s + inner]);
        }
    }
    Ok(out)
}

/// Adaptive average pooling over the last two dims. Input bins follow the
/// start = floor(i*H/out_h), end = ceil((i+1)*H/out_h) rule, so bins partition
/// the input and each output cell is the mean of its bin.
pub fn adaptive_avg_pool2d<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let rank = x.rank();
    if rank < 2 {
        return Err(TensorError::InvalidArg("pool needs rank >= 2".into()));
    }
    let h = x.shape()[rank - 2];
    let w = x.shape()[rank - 1];
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::InvalidArg("zero pool output extent".into()));
    }
    if out_h > h || out_w > w {
        return Err(TensorError::InvalidArg(format!(
            "pool output ({out_h},{out_w}) larger than input ({h},{w})"
        )));
    }
    let lead = x.numel() / (h * w);
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = out_h;
    shape[rank - 1] = out_w;
    let mut out = Tensor::zeros(&shape);
    let src = x.data();
    let dst = out.data_mut();
    for l in 0..lead {
        let in_base = l * h * w;
        let out_base = l * out_h * out_w;
        for i in 0..out_h {
            let h0 = i * h / out_h;
            let h1 = ((i + 1) * h + out_h - 1) / out_h;
            for j in 0..out_w {
                let w0 = j * w / out_w;
                let w1 = ((j + 1) * w + out_w - 1) / out_w;
                let mut acc = T::zero();
                for r in h0..h1 {
                    for c in w0..w1 {
                        acc += src[in_base + r * w + c];
                    }
                }
                let n = T::from_f64(((h1 - h0) * (w1 - w0)) as f64);
                dst[out_base + i * out_w + j] = acc / n;
            }
        }
    }
    Ok(out)
}

/// Nearest-neighbor upsampling of the last two dims:
/// out[i, j] = x[floor(i*h/out_h), floor(j*w/out_w)].
pub fn upsample_nearest<T: Real>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let rank = x.rank();
    if rank < 2 {
        return Err(TensorError::InvalidArg("upsample needs rank >= 2".into()));
    }
    let h = x.shape()[rank - 2];
    let w = x.shape()[rank - 1];
    if out_h < h || out_w < w {
        return Err(TensorError::InvalidArg(format!(
            "upsample output ({out_h},{out_w}) smaller than input ({h},{w})"
        )));
    }
    let lead = x.numel() / (h * w);
    let mut shape = x.shape().to_vec();
    shape[rank - 2] = out_h;
    shape[rank - 1] = out_w;
    let mut out = Tensor::zeros(&shape);
    let src = x.data();
    let dst = out.data_mut();
    for l in 0..lead {
        let in_base = l * h * w;
        let out_base = l * out_h * out_w;
        for i in 0..out_h {
            let si = i * h / out_h;
            for j in 0..out_w {
                let sj = j * w / out_w;
                dst[out_base + i * out_w + j] = src[in_base + si * w + sj];
            }
        }
    }
    Ok(out)
}

/// Per-location linear map across channels (a 1x..x1 convolution):
/// x [B, C_in, rest...], w [C_out, C_in], b [C_out] -> [B, C_out, rest...].
pub fn pointwise_conv<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() < 2 || w.rank() != 2 {
        return Err(TensorError::InvalidArg(
            "pointwise_conv expects x rank >= 2 and w rank 2".into(),
        ));
    }
    let batch = x.shape()[0];
    let c_in = x.shape()[1];
    let c_out = w.shape()[0];
    if w.shape()[1] != c_in || b.shape() != [c_out] {
        return Err(TensorError::ShapeMismatch {
            expected: vec![c_out, c_in],
            got: w.shape().to_vec(),
        });
    }
    let spatial = x.numel() / (batch * c_in);
    let mut shape = x.shape().to_vec();
    shape[1] = c_out;
    let mut out = Tensor::zeros(&shape);
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let dst = out.data_mut();
    for n in 0..batch {
        for co in 0..c_out {
            let o_base = (n * c_out + co) * spatial;
            let w_base = co * c_in;
            for s in 0..spatial {
                dst[o_base + s] = bs[co];
            }
            for ci in 0..c_in {
                let wv = ws[w_base + ci];
                let x_base = (n * c_in + ci) * spatial;
                for s in 0..spatial {
                    dst[o_base + s] += wv * xs[x_base + s];
                }
            }
        }
    }
    Ok(out)
}

/// Strided 2-D convolution with zero padding (k-1)/2, used by the observation
/// encoder. x [B, C_in, H, W], w [C_out, C_in, kh, kw], b [C_out].
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 4 || w.rank() != 4 {
        return Err(TensorError::InvalidArg("conv2d expects rank-4 x and w".into()));
    }
    let (batch, c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (c_out, kc, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if kc != c_in || b.shape() != [c_out] {
        return Err(TensorError::ShapeMismatch {
            expected: vec![c_out, c_in, kh, kw],
            got: w.shape().to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::InvalidArg("conv2d kernel extents must be odd".into()));
    }
    if stride == 0 {
        return Err(TensorError::InvalidArg("conv2d stride must be positive".into()));
    }
    let (ph, pw) = (kh / 2, kw / 2);
    let oh = (h + 2 * ph - kh) / stride + 1;
    let ow = (wd + 2 * pw - kw) / stride + 1;
    let mut out = Tensor::zeros(&[batch, c_out, oh, ow]);
    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    let dst = out.data_mut();
    for n in 0..batch {
        for co in 0..c_out {
            for oi in 0..oh {
                for oj in 0..ow {
                    let mut acc = bs[co];
                    for ci in 0..c_in {
                        let x_base = (n * c_in + ci) * h * wd;
                        let w_base = ((co * c_in + ci) * kh) * kw;
                        for u in 0..kh {
                            let ii = (oi * stride + u) as i64 - ph as i64;
                            if ii < 0 || ii >= h as i64 {
                                continue;
                            }
                            for v in 0..kw {
                                let jj = (oj * stride + v) as i64 - pw as i64;
                                if jj < 0 || jj >= wd as i64 {
                                    continue;
                                }
                                acc += ws[w_base + u * kw + v]
                                    * xs[x_base + ii as usize * wd + jj as usize];
                            }
                        }
                    }
                    dst[((n * c_out + co) * oh + oi) * ow + oj] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Channel-independent 2-D convolution, zero-padded, shape-preserving.
/// x [B, C, H, W], k [C, kh, kw] with odd extents.
pub fn depthwise_conv2d<T: Real>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || k.rank() != 3 {
        return Err(TensorError::InvalidArg(
            "depthwise_conv2d expects x rank 4 and k rank 3".into(),
        ));
    }
    let (batch, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (kc, kh, kw) = (k.shape()[0], k.shape()[1], k.shape()[2]);
    if kc != c {
        return Err(TensorError::ShapeMismatch {
            expected: vec![c, kh, kw],
            got: k.shape().to_vec(),
        });
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(TensorError::InvalidArg(
            "depthwise kernel extents must be odd".into(),
        ));
    }
    let (ph, pw) = (kh as i64 / 2, kw as i64 / 2);
    let mut out = Tensor::zeros(x.shape());
    let xs = x.data();
    let ks = k.data();
    let dst = out.data_mut();
    for n in 0..batch {
        for ci in 0..c {
            let x_base = (n * c + ci) * h * w;
            let k_base = ci * kh * kw;
            for i in 0..h {
                for j in 0..w {
                    let mut acc = T::zero();
                    for u in 0..kh {
                        let ii = i as i64 + u as i64 - ph;
                        if ii < 0 || ii >= h as i64 {
                            continue;
                        }
                        for v in 0..kw {
                            let jj = j as i64 + v as i64 - pw;
                            if jj < 0 || jj >= w as i64 {
                                continue;
                            }
                            acc += ks[k_base + u * kw + v]
                                * xs[x_base + ii as usize * w + jj as usize];
                        }
                    }
                    dst[x_base + i * w + j] = acc;
                }
            }
        }
    }
    Ok(out)
}

/// Channel-independent 1-D convolution along the last axis, zero-padded at the
/// sequence ends, shape-preserving. x [B, C, L], k [C, kl] with odd kl.
pub fn depthwise_conv1d<T: Real>(x: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 3 || k.rank() != 2 {
        return Err(TensorError::InvalidArg(
            "depthwise_conv1d expects x rank 3 and k rank 2".into(),
        ));
    }
    let (batch, c, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kc, kl) = (k.shape()[0], k.shape()[1]);
    if kc != c {
        return Err(TensorError::ShapeMismatch {
            expected: vec![c, kl],
            got: k.shape().to_vec(),
        });
    }
    if kl % 2 == 0 {
        return Err(TensorError::InvalidArg(
            "depthwise kernel extents must be odd".into(),
        ));
    }
    let p = kl as i64 / 2;
    let mut out = Tensor::zeros(x.shape());
    let xs = x.data();
    let ks = k.data();
    let dst = out.data_mut();
    for n in 0..batch {
        for ci in 0..c {
            let x_base = (n * c + ci) * len;
            let k_base = ci * kl;
            for t in 0..len {
                let mut acc = T::zero();
                for u in 0..kl {
                    let tt = t as i64 + u as i64 - p;
                    if tt < 0 || tt >= len as i64 {
                        continue;
                    }
                    acc += ks[k_base + u] * xs[x_base + tt as usize];
                }
                dst[x_base + t] = acc;
            }
        }
    }
    Ok(out)
}

/// Saved forward quantities group-norm backward needs.
pub struct GroupNormSaved<T: Real> {
    /// Normalized values before the affine map.
    pub xhat: Vec<T>,
    /// 1/sqrt(var + eps) per (batch, group).
    pub invstd: Vec<T>,
}

/// Group normalization over x [B, C, rest...]: per-(sample, group) mean 0 and
/// variance 1 before the gamma/beta affine. gamma and beta have shape [C].
pub fn group_norm<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    group_norm_with_saved(x, groups, gamma, beta).map(|(out, _)| out)
}

pub fn group_norm_with_saved<T: Real>(
    x: &Tensor<T>,
    groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<(Tensor<T>, GroupNormSaved<T>)> {
    if x.rank() < 2 {
        return Err(TensorError::InvalidArg("group_norm needs rank >= 2".into()));
    }
    let batch = x.shape()[0];
    let c = x.shape()[1];
    if groups == 0 || c % groups != 0 {
        return Err(TensorError::InvalidArg(format!(
            "channel count {c} not divisible by groups {groups}"
        )));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            expected: vec![c],
            got: gamma.shape().to_vec(),
        });
    }
    let spatial = x.numel() / (batch * c);
    let cg = c / groups;
    let group_len = cg * spatial;
    let eps = T::from_f64(EPS_GROUP_NORM);
    let mut out = Tensor::zeros(x.shape());
    let mut xhat = vec![T::zero(); x.numel()];
    let mut invstd = vec![T::zero(); batch * groups];
    let xs = x.data();
    let gs = gamma.data();
    let bs = beta.data();
    let dst = out.data_mut();
    for n in 0..batch {
        for g in 0..groups {
            let start = (n * c + g * cg) * spatial;
            let nf = T::from_f64(group_len as f64);
            let mut mean = T::zero();
            for i in 0..group_len {
                mean += xs[start + i];
            }
            mean /= nf;
            let mut var = T::zero();
            for i in 0..group_len {
                let d = xs[start + i] - mean;
                var += d * d;
            }
            var /= nf;
            let istd = T::one() / (var + eps).sqrt();
            invstd[n * groups + g] = istd;
            for lc in 0..cg {
                let ch = g * cg + lc;
                for s in 0..spatial {
                    let idx = start + lc * spatial + s;
                    let xh = (xs[idx] - mean) * istd;
                    xhat[idx] = xh;
                    dst[idx] = gs[ch] * xh + bs[ch];
                }
            }
        }
    }
    Ok((out, GroupNormSaved { xhat, invstd }))
}

/// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654); // sqrt(2/pi)
    let a = T::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    T::from_f64(0.5) * x * (T::one() + u.tanh())
}

pub fn gelu_prime<T: Real>(x: T) -> T {
    let c = T::from_f64(0.7978845608028654);
    let a = T::from_f64(0.044715);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let sech2 = T::one() - t * t;
    let du = c * (T::one() + T::from_f64(3.0) * a * x * x);
    T::from_f64(0.5) * (T::one() + t) + T::from_f64(0.5) * x * sech2 * du
}

/// Numerically safe softplus ln(1 + e^x); maps any real to a positive value.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Per-location cosine similarity reducing `channel_axis`:
/// out = dot(a, b) / (|a| |b|), defined as 0 when either norm is below
/// [`EPS_NORM`]. Output shape is the input shape with the channel axis removed.
pub fn cosine_similarity_channels<T: Real>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    channel_axis: usize,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            expected: a.shape().to_vec(),
            got: b.shape().to_vec(),
        });
    }
    if channel_axis >= a.rank() {
        return Err(TensorError::AxisOutOfRange {
            axis: channel_axis,
            rank: a.rank(),
        });
    }
    let (outer, c, inner) = axis_split(a.shape(), channel_axis);
    let mut shape: Vec<usize> = a.shape().to_vec();
    shape.remove(channel_axis);
    if shape.is_empty() {
        shape.push(1);
    }
    let mut out = Tensor::zeros(&shape);
    let eps = T::from_f64(EPS_NORM);
    let av = a.data();
    let bv = b.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let mut dot = T::zero();
            let mut na = T::zero();
            let mut nb = T::zero();
            for ch in 0..c {
                let idx = (o * c + ch) * inner + i;
                dot += av[idx] * bv[idx];
                na += av[idx] * av[idx];
                nb += bv[idx] * bv[idx];
            }
            let (na, nb) = (na.sqrt(), nb.sqrt());
            dst[o * inner + i] = if na < eps || nb < eps {
                T::zero()
            } else {
                dot / (na * nb)
            };
        }
    }
    Ok(out)
}

/// Reorders axes: out[idx] = x[idx[perm[0]], idx[perm[1]], ...] — i.e. output
/// axis d takes values along input axis perm[d].
pub fn permute<T: Real>(x: &Tensor<T>, perm: &[usize]) -> Result<Tensor<T>> {
    let rank = x.rank();
    if perm.len() != rank {
        return Err(TensorError::InvalidArg("permute rank mismatch".into()));
    }
    let mut seen = vec![false; rank];
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(TensorError::InvalidArg("invalid permutation".into()));
        }
        seen[p] = true;
    }
    let in_shape = x.shape();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides_of(in_shape);
    let out_strides = strides_of(&out_shape);
    let mut out = Tensor::zeros(&out_shape);
    let src = x.data();
    let dst = out.data_mut();
    let numel = x.numel();
    for flat in 0..numel {
        // decompose flat output index, map to input offset
        let mut rem = flat;
        let mut in_off = 0usize;
        for d in 0..rank {
            let coord = rem / out_strides[d];
            rem %= out_strides[d];
            in_off += coord * in_strides[perm[d]];
        }
        dst[flat] = src[in_off];
    }
    Ok(out)
}

/// Concatenates tensors along `axis`; all other extents must agree.
pub fn concat<T: Real>(xs: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    if xs.is_empty() {
        return Err(TensorError::InvalidArg("concat of zero tensors".into()));
    }
    let rank = xs[0].rank();
    if axis >= rank {
        return Err(TensorError::AxisOutOfRange { axis, rank });
    }
    let mut total = 0usize;
    for x in xs {
        if x.rank() != rank {
            return Err(TensorError::InvalidArg("concat rank mismatch".into()));
        }
        for d in 0..rank {
            if d != axis && x.shape()[d] != xs[0].shape()[d] {
                return Err(TensorError::ShapeMismatch {
                    expected: xs[0].shape().to_vec(),
                    got: x.shape().to_vec(),
                });
            }
        }
        total += x.shape()[axis];
    }
    let mut shape = xs[0].shape().to_vec();
    shape[axis] = total;
    let (outer, _, inner) = axis_split(&shape, axis);
    let mut out = Tensor::zeros(&shape);
    let dst = out.data_mut();
    let mut offset = 0usize;
    for x in xs {
        let ext = x.shape()[axis];
        let src = x.data();
        for o in 0..outer {
            let s = o * ext * inner;
            let d = (o * total + offset) * inner;
            dst[d..d + ext * inner].copy_from_slice(&src[s..s + ext * inner]);
        }
        offset += ext;
    }
    Ok(out)
}

/// Contiguous slice of length `len` starting at `start` along `axis`.
pub fn slice_axis<T: Real>(
    x: &Tensor<T>,
    axis: usize,
    start: usize,
    len: usize,
) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(TensorError::AxisOutOfRange {
            axis,
            rank: x.rank(),
        });
    }
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    if start + len > extent || len == 0 {
        return Err(TensorError::InvalidArg(format!(
            "slice [{start}, {}) out of range for extent {extent}",
            start + len
        )));
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    let mut out = Tensor::zeros(&shape);
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        let s = (o * extent + start) * inner;
        let d = o * len * inner;
        dst[d..d + len * inner].copy_from_slice(&src[s..s + len * inner]);
    }
    Ok(out)
}

/// Mean over one axis, keeping it with extent 1.
pub fn mean_axis_keepdim<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(TensorError::AxisOutOfRange {
            axis,
            rank: x.rank(),
        });
    }
    let (outer, extent, inner) = axis_split(x.shape(), axis);
    let mut shape = x.shape().to_vec();
    shape[axis] = 1;
    let mut out = Tensor::zeros(&shape);
    let nf = T::from_f64(extent as f64);
    let src = x.data();
    let dst = out.data_mut();
    for o in 0..outer {
        for i in 0..inner {
            let mut acc = T::zero();
            for e in 0..extent {
                acc += src[(o * extent + e) * inner + i];
            }
            dst[o * inner + i] = acc / nf;
        }
    }
    Ok(out)
}
