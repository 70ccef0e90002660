//! Primitive numerical kernels: matmul, convolution, softmax, pooling,
//! normalization, and the elementwise suite. Everything is a pure function
//! over immutable tensors; internal parallelism (matmul row chunks) is
//! bit-deterministic for any thread count.

use crate::error::{Error, Result};
use crate::par;
use crate::scalar::Element;
use crate::tensor::Tensor;

// ---------------------------------------------------------------------------
// matmul kernels
// ---------------------------------------------------------------------------

/// out += a · b with a: [m,k], b: [k,n], out: [m,n], all row-major slices.
/// Caller zeroes `out` first. Rows are chunked across `nthreads`; every row
/// is computed by the same operation sequence regardless of the chunking.
pub(crate) fn matmul_into<T: Element>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    nthreads: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    par::run_row_chunks(out, m, n, nthreads, |row0, chunk| {
        for (ri, orow) in chunk.chunks_mut(n).enumerate() {
            let arow = &a[(row0 + ri) * k..(row0 + ri + 1) * k];
            for (l, &ail) in arow.iter().enumerate() {
                let brow = &b[l * n..(l + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + ail * bv;
                }
            }
        }
    });
}

/// out = a · bᵀ with a: [m,k], b: [n,k] (row dot products).
pub(crate) fn matmul_abt_into<T: Element>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = acc;
        }
    }
}

/// out += a · bᵀ with a: [m,k], b: [n,k], out: [m,n]; accumulating variant
/// used where gradients sum over the batch.
pub(crate) fn matmul_abt_acc_into<T: Element>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    m: usize,
    k: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *o = *o + acc;
        }
    }
}

/// out += aᵀ · b with a: [k,m], b: [k,n], out: [m,n]. Caller zeroes `out`.
pub(crate) fn matmul_atb_into<T: Element>(
    a: &[T],
    b: &[T],
    out: &mut [T],
    k: usize,
    m: usize,
    n: usize,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for l in 0..k {
        let arow = &a[l * m..(l + 1) * m];
        let brow = &b[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn check_rank2<T: Element>(t: &Tensor<T>, who: &str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "{who} must be rank-2, got {:?}",
            t.dims()
        )));
    }
    Ok((t.dims()[0], t.dims()[1]))
}

/// Standard matrix product of two rank-2 tensors.
pub fn matmul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    matmul_with_threads(a, b, par::threads())
}

/// `matmul` with an explicit worker count; results are identical for every
/// count, which the determinism tests assert directly.
pub fn matmul_with_threads<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    nthreads: usize,
) -> Result<Tensor<T>> {
    let (m, ka) = check_rank2(a, "matmul lhs")?;
    let (kb, n) = check_rank2(b, "matmul rhs")?;
    if ka != kb {
        return Err(Error::ShapeMismatch(format!(
            "matmul inner extents differ: [{m},{ka}] x [{kb},{n}]"
        )));
    }
    let mut out = Tensor::zeros(&[m, n]);
    matmul_into(a.data(), b.data(), out.data_mut(), m, ka, n, nthreads);
    Ok(out)
}

/// In-place row softmax over a contiguous [rows, cols] buffer, with the usual
/// max subtraction so large logits cannot overflow.
pub(crate) fn row_softmax_inplace<T: Element>(buf: &mut [T], rows: usize, cols: usize) {
    debug_assert_eq!(buf.len(), rows * cols);
    for r in 0..rows {
        let row = &mut buf[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.max(v);
        }
        let mut sum = T::zero();
        for v in row.iter_mut() {
            let e = (*v - mx).exp();
            *v = e;
            sum = sum + e;
        }
        for v in row.iter_mut() {
            *v = *v / sum;
        }
    }
}

/// Softmax along `axis`, max-subtracted; outputs are positive and sum to 1
/// along the axis.
pub fn softmax<T: Element>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::ShapeMismatch(format!(
            "softmax axis {axis} out of range for {:?}",
            x.dims()
        )));
    }
    let lane = x.dims()[axis];
    let stride = x.shape().strides()[axis];
    let block = stride * lane;
    let mut out = x.clone();
    let data = out.data_mut();
    let lanes = data.len() / lane;
    for li in 0..lanes {
        let base = (li / stride) * block + (li % stride);
        let mut mx = data[base];
        for i in 1..lane {
            mx = mx.max(data[base + i * stride]);
        }
        let mut sum = T::zero();
        for i in 0..lane {
            let e = (data[base + i * stride] - mx).exp();
            data[base + i * stride] = e;
            sum = sum + e;
        }
        for i in 0..lane {
            data[base + i * stride] = data[base + i * stride] / sum;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

pub(crate) fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = input + 2 * pad;
    if span < k {
        return Err(Error::ShapeMismatch(format!(
            "kernel {k} larger than padded input {span}"
        )));
    }
    Ok((span - k) / stride + 1)
}

/// Unfolds one sample's channel block into the [cin·kh·kw, hp·wp] patch
/// matrix used by the matmul-based convolution. Out-of-bounds taps are zero.
pub(crate) fn im2col<T: Element>(
    x: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
    col: &mut [T],
) {
    debug_assert_eq!(x.len(), cin * h * w);
    debug_assert_eq!(col.len(), cin * kh * kw * hp * wp);
    let l = hp * wp;
    for c in 0..cin {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((c * kh + ki) * kw + kj) * l..][..l];
                for oh in 0..hp {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    let dst = &mut row[oh * wp..(oh + 1) * wp];
                    if ih < 0 || ih >= h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src = &plane[ih as usize * w..(ih as usize + 1) * w];
                    for (ow, v) in dst.iter_mut().enumerate() {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        *v = if iw >= 0 && (iw as usize) < w {
                            src[iw as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-add of a patch-matrix gradient back onto the input plane; the
/// adjoint of `im2col`.
pub(crate) fn col2im_add<T: Element>(
    col: &[T],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    hp: usize,
    wp: usize,
    gx: &mut [T],
) {
    debug_assert_eq!(gx.len(), cin * h * w);
    let l = hp * wp;
    for c in 0..cin {
        let plane = &mut gx[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((c * kh + ki) * kw + kj) * l..][..l];
                for oh in 0..hp {
                    let ih = (oh * stride + ki) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let base = ih as usize * w;
                    for ow in 0..wp {
                        let iw = (ow * stride + kj) as isize - pad as isize;
                        if iw >= 0 && (iw as usize) < w {
                            let p = base + iw as usize;
                            plane[p] = plane[p] + row[oh * wp + ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub hp: usize,
    pub wp: usize,
    pub cin_g: usize,
    pub cout_g: usize,
}

pub(crate) fn conv_geometry<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<ConvGeom> {
    if x.rank() != 4 || weight.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "conv2d wants rank-4 input and weight, got {:?} and {:?}",
            x.dims(),
            weight.dims()
        )));
    }
    if stride == 0 {
        return Err(Error::InvalidConfig("conv2d stride must be >= 1".into()));
    }
    let (n, cin, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let (cout, wcin, kh, kw) = (
        weight.dims()[0],
        weight.dims()[1],
        weight.dims()[2],
        weight.dims()[3],
    );
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::InvalidGroups(format!(
            "groups {groups} must divide cin {cin} and cout {cout}"
        )));
    }
    if wcin != cin / groups {
        return Err(Error::ShapeMismatch(format!(
            "weight expects {wcin} input channels per group, input provides {}",
            cin / groups
        )));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::ShapeMismatch(format!(
                "bias has {} elements, want {cout}",
                b.numel()
            )));
        }
    }
    let hp = conv_out_extent(h, kh, stride, padding)?;
    let wp = conv_out_extent(w, kw, stride, padding)?;
    Ok(ConvGeom {
        n,
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        hp,
        wp,
        cin_g: cin / groups,
        cout_g: cout / groups,
    })
}

/// Grouped 2-D cross-correlation (no kernel flip). Input [N,Cin,H,W], weight
/// [Cout,Cin/g,kh,kw], optional bias [Cout].
pub fn conv2d<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    padding: usize,
    groups: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, weight, bias, stride, padding, groups)?;
    let l = g.hp * g.wp;
    let ck = g.cin_g * g.kh * g.kw;
    let mut out = Tensor::zeros(&[g.n, g.cout, g.hp, g.wp]);
    let nthreads = par::threads();
    // 1x1/stride-1/no-pad convolutions read the input block directly as the
    // patch matrix; everything else goes through an im2col buffer.
    let direct = g.kh == 1 && g.kw == 1 && stride == 1 && padding == 0;
    let mut col = if direct { Vec::new() } else { vec![T::zero(); ck * l] };
    for ni in 0..g.n {
        for gi in 0..groups {
            let x_off = (ni * g.cin + gi * g.cin_g) * g.h * g.w;
            let x_block = &x.data()[x_off..x_off + g.cin_g * g.h * g.w];
            let w_block = &weight.data()[gi * g.cout_g * ck..(gi + 1) * g.cout_g * ck];
            let o_off = (ni * g.cout + gi * g.cout_g) * l;
            let out_block = &mut out.data_mut()[o_off..o_off + g.cout_g * l];
            if direct {
                matmul_into(w_block, x_block, out_block, g.cout_g, ck, l, nthreads);
            } else {
                im2col(
                    x_block, g.cin_g, g.h, g.w, g.kh, g.kw, stride, padding, g.hp, g.wp, &mut col,
                );
                matmul_into(w_block, &col, out_block, g.cout_g, ck, l, nthreads);
            }
        }
    }
    if let Some(b) = bias {
        let bd = b.data();
        let od = out.data_mut();
        for ni in 0..g.n {
            for c in 0..g.cout {
                let off = (ni * g.cout + c) * l;
                for v in od[off..off + l].iter_mut() {
                    *v = *v + bd[c];
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// pooling
// ---------------------------------------------------------------------------

/// Spatial mean per (sample, channel): [N,C,H,W] -> [N,C,1,1].
pub fn global_avg_pool<T: Element>(x: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "global_avg_pool wants rank-4, got {:?}",
            x.dims()
        )));
    }
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let plane = h * w;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut out = Tensor::zeros(&[n, c, 1, 1]);
    for i in 0..n * c {
        let mut acc = T::zero();
        for &v in &x.data()[i * plane..(i + 1) * plane] {
            acc = acc + v;
        }
        out.data_mut()[i] = acc * inv;
    }
    Ok(out)
}

/// Max pooling over k x k windows; padded positions are ignored rather than
/// contributing a sentinel, so `padding < k` is required.
pub fn max_pool2d<T: Element>(
    x: &Tensor<T>,
    k: usize,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "max_pool2d wants rank-4, got {:?}",
            x.dims()
        )));
    }
    if k == 0 || stride == 0 || padding >= k {
        return Err(Error::InvalidConfig(format!(
            "max_pool2d k={k} stride={stride} padding={padding} invalid"
        )));
    }
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    let hp = conv_out_extent(h, k, stride, padding)?;
    let wp = conv_out_extent(w, k, stride, padding)?;
    let mut out = Tensor::zeros(&[n, c, hp, wp]);
    for nc in 0..n * c {
        let plane = &x.data()[nc * h * w..(nc + 1) * h * w];
        let opl = &mut out.data_mut()[nc * hp * wp..(nc + 1) * hp * wp];
        for oh in 0..hp {
            for ow in 0..wp {
                let mut best: Option<T> = None;
                for ki in 0..k {
                    let ih = (oh * stride + ki) as isize - padding as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let iw = (ow * stride + kj) as isize - padding as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let v = plane[ih as usize * w + iw as usize];
                        best = Some(match best {
                            Some(b) => b.max(v),
                            None => v,
                        });
                    }
                }
                // padding < k guarantees at least one in-bounds tap
                opl[oh * wp + ow] = best.expect("window contained no valid element");
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// normalization
// ---------------------------------------------------------------------------

fn check_per_channel<T: Element>(t: &Tensor<T>, c: usize, who: &str) -> Result<()> {
    if t.numel() != c {
        return Err(Error::ShapeMismatch(format!(
            "{who} has {} elements, want {c}",
            t.numel()
        )));
    }
    Ok(())
}

/// Per-(sample, channel) standardization over the spatial plane with
/// per-channel affine; population (biased) variance.
pub fn instance_norm<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "instance_norm wants rank-4, got {:?}",
            x.dims()
        )));
    }
    if eps <= T::zero() {
        return Err(Error::InvalidConfig("instance_norm eps must be positive".into()));
    }
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    check_per_channel(gamma, c, "instance_norm gamma")?;
    check_per_channel(beta, c, "instance_norm beta")?;
    let plane = h * w;
    let inv_m = T::from_f64(1.0 / plane as f64);
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * plane;
            let g = gamma.data()[ci];
            let b = beta.data()[ci];
            let src = &x.data()[off..off + plane];
            let mut mean = T::zero();
            for &v in src {
                mean = mean + v;
            }
            mean = mean * inv_m;
            let mut var = T::zero();
            for &v in src {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_m;
            let inv_std = T::one() / (var + eps).sqrt();
            for (o, &v) in out.data_mut()[off..off + plane].iter_mut().zip(src) {
                *o = (v - mean) * inv_std * g + b;
            }
        }
    }
    Ok(out)
}

/// Inference-mode batch normalization with caller-provided running
/// statistics.
pub fn batch_norm_inference<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "batch_norm wants rank-4, got {:?}",
            x.dims()
        )));
    }
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    for (t, who) in [
        (gamma, "batch_norm gamma"),
        (beta, "batch_norm beta"),
        (running_mean, "batch_norm running_mean"),
        (running_var, "batch_norm running_var"),
    ] {
        check_per_channel(t, c, who)?;
    }
    let plane = h * w;
    let mut out = x.clone();
    for ci in 0..c {
        let scale = gamma.data()[ci] / (running_var.data()[ci] + eps).sqrt();
        let shift = beta.data()[ci] - running_mean.data()[ci] * scale;
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            for v in out.data_mut()[off..off + plane].iter_mut() {
                *v = *v * scale + shift;
            }
        }
    }
    Ok(out)
}

/// Group normalization: statistics over each (C/num_groups)·H·W block per
/// sample, per-channel affine.
pub fn group_norm<T: Element>(
    x: &Tensor<T>,
    num_groups: usize,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "group_norm wants rank-4, got {:?}",
            x.dims()
        )));
    }
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    if num_groups == 0 || c % num_groups != 0 {
        return Err(Error::InvalidGroups(format!(
            "group_norm groups {num_groups} must divide channels {c}"
        )));
    }
    check_per_channel(gamma, c, "group_norm gamma")?;
    check_per_channel(beta, c, "group_norm beta")?;
    let cg = c / num_groups;
    let block = cg * h * w;
    let inv_m = T::from_f64(1.0 / block as f64);
    let mut out = x.clone();
    for ni in 0..n {
        for gi in 0..num_groups {
            let off = (ni * c + gi * cg) * h * w;
            let src = &x.data()[off..off + block];
            let mut mean = T::zero();
            for &v in src {
                mean = mean + v;
            }
            mean = mean * inv_m;
            let mut var = T::zero();
            for &v in src {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_m;
            let inv_std = T::one() / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = gi * cg + ci;
                let g = gamma.data()[ch];
                let b = beta.data()[ch];
                let coff = off + ci * h * w;
                for (o, &v) in out.data_mut()[coff..coff + h * w]
                    .iter_mut()
                    .zip(&x.data()[coff..coff + h * w])
                {
                    *o = (v - mean) * inv_std * g + b;
                }
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// elementwise suite
// ---------------------------------------------------------------------------

fn check_same_shape<T: Element>(a: &Tensor<T>, b: &Tensor<T>, who: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{who}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "add")?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o + v;
    }
    Ok(out)
}

pub fn mul<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    check_same_shape(a, b, "mul")?;
    let mut out = a.clone();
    for (o, &v) in out.data_mut().iter_mut().zip(b.data()) {
        *o = *o * v;
    }
    Ok(out)
}

pub fn scale<T: Element>(x: &Tensor<T>, s: T) -> Tensor<T> {
    x.map(|v| v * s)
}

pub fn relu<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid_scalar<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Concatenation along `axis`; parts must agree on every other extent.
pub fn concat<T: Element>(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::ShapeMismatch("concat of zero tensors".into()))?;
    let rank = first.rank();
    if axis >= rank {
        return Err(Error::ShapeMismatch(format!(
            "concat axis {axis} out of range for rank {rank}"
        )));
    }
    let mut axis_total = 0usize;
    for p in parts {
        if p.rank() != rank {
            return Err(Error::ShapeMismatch("concat rank mismatch".into()));
        }
        for (i, (&da, &db)) in first.dims().iter().zip(p.dims()).enumerate() {
            if i != axis && da != db {
                return Err(Error::ShapeMismatch(format!(
                    "concat extent mismatch at axis {i}: {:?} vs {:?}",
                    first.dims(),
                    p.dims()
                )));
            }
        }
        axis_total += p.dims()[axis];
    }
    let mut out_dims = first.dims().to_vec();
    out_dims[axis] = axis_total;
    let outer: usize = first.dims()[..axis].iter().product();
    let inner: usize = first.dims()[axis + 1..].iter().product();
    let mut out = Tensor::zeros(&out_dims);
    let row_out = axis_total * inner;
    for o in 0..outer {
        let mut dst_off = o * row_out;
        for p in parts {
            let blk = p.dims()[axis] * inner;
            let src = &p.data()[o * blk..(o + 1) * blk];
            out.data_mut()[dst_off..dst_off + blk].copy_from_slice(src);
            dst_off += blk;
        }
    }
    Ok(out)
}

/// Splits into `parts` equal-extent tensors along `axis`; inverse of `concat`
/// on matching parts.
pub fn split<T: Element>(x: &Tensor<T>, parts: usize, axis: usize) -> Result<Vec<Tensor<T>>> {
    if axis >= x.rank() {
        return Err(Error::ShapeMismatch(format!(
            "split axis {axis} out of range for {:?}",
            x.dims()
        )));
    }
    let extent = x.dims()[axis];
    if parts == 0 || extent % parts != 0 {
        return Err(Error::InvalidGroups(format!(
            "cannot split extent {extent} into {parts} equal parts"
        )));
    }
    let per = extent / parts;
    let outer: usize = x.dims()[..axis].iter().product();
    let inner: usize = x.dims()[axis + 1..].iter().product();
    let mut out_dims = x.dims().to_vec();
    out_dims[axis] = per;
    let blk = per * inner;
    let row_in = extent * inner;
    let mut result = Vec::with_capacity(parts);
    for p in 0..parts {
        let mut t = Tensor::zeros(&out_dims);
        for o in 0..outer {
            let src = &x.data()[o * row_in + p * blk..o * row_in + (p + 1) * blk];
            t.data_mut()[o * blk..(o + 1) * blk].copy_from_slice(src);
        }
        result.push(t);
    }
    Ok(result)
}

/// Dense layer: x [N,K] · w [K,M] + b [M].
pub fn fully_connected<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (n, k) = check_rank2(x, "fully_connected input")?;
    let (kw, m) = check_rank2(w, "fully_connected weight")?;
    if k != kw {
        return Err(Error::ShapeMismatch(format!(
            "fully_connected: input K {k} vs weight K {kw}"
        )));
    }
    if b.numel() != m {
        return Err(Error::ShapeMismatch(format!(
            "fully_connected bias has {} elements, want {m}",
            b.numel()
        )));
    }
    let mut out = Tensor::zeros(&[n, m]);
    matmul_into(x.data(), w.data(), out.data_mut(), n, k, m, 1);
    for ni in 0..n {
        for (o, &bv) in out.data_mut()[ni * m..(ni + 1) * m].iter_mut().zip(b.data()) {
            *o = *o + bv;
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// limited broadcasting helpers (channel vectors and per-sample descriptors)
// ---------------------------------------------------------------------------

fn check_channel_vec<T: Element>(x: &Tensor<T>, v: &Tensor<T>, who: &str) -> Result<usize> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!("{who} wants rank-4 input")));
    }
    let c = x.dims()[1];
    if v.numel() != c {
        return Err(Error::ShapeMismatch(format!(
            "{who}: vector has {} elements, want {c}",
            v.numel()
        )));
    }
    Ok(c)
}

/// x[n,c,h,w] * v[c], broadcasting the channel vector over batch and space.
pub fn mul_channel<T: Element>(x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let c = check_channel_vec(x, v, "mul_channel")?;
    let (n, h, w) = (x.dims()[0], x.dims()[2], x.dims()[3]);
    let plane = h * w;
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let s = v.data()[ci];
            let off = (ni * c + ci) * plane;
            for o in out.data_mut()[off..off + plane].iter_mut() {
                *o = *o * s;
            }
        }
    }
    Ok(out)
}

/// x[n,c,h,w] + v[c].
pub fn add_channel<T: Element>(x: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let c = check_channel_vec(x, v, "add_channel")?;
    let (n, h, w) = (x.dims()[0], x.dims()[2], x.dims()[3]);
    let plane = h * w;
    let mut out = x.clone();
    for ni in 0..n {
        for ci in 0..c {
            let s = v.data()[ci];
            let off = (ni * c + ci) * plane;
            for o in out.data_mut()[off..off + plane].iter_mut() {
                *o = *o + s;
            }
        }
    }
    Ok(out)
}

/// x[n,c,h,w] * d[n,c,1,1], broadcasting the per-sample descriptor over
/// space.
pub fn mul_nc11<T: Element>(x: &Tensor<T>, d: &Tensor<T>) -> Result<Tensor<T>> {
    if x.rank() != 4 || d.rank() != 4 {
        return Err(Error::ShapeMismatch("mul_nc11 wants rank-4 operands".into()));
    }
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    if d.dims() != [n, c, 1, 1] {
        return Err(Error::ShapeMismatch(format!(
            "mul_nc11 descriptor {:?}, want [{n},{c},1,1]",
            d.dims()
        )));
    }
    let plane = h * w;
    let mut out = x.clone();
    for i in 0..n * c {
        let s = d.data()[i];
        for o in out.data_mut()[i * plane..(i + 1) * plane].iter_mut() {
            *o = *o * s;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{seeded_tensor, ABS_TOL_F32, ABS_TOL_F64};

    #[test]
    fn matmul_identity_case() {
        let i2 = Tensor::<f64>::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        assert_eq!(matmul(&i2, &b).unwrap(), b);
    }

    #[test]
    fn matmul_row_times_column() {
        let a = Tensor::<f64>::from_vec(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.dims(), &[1, 1]);
        assert_eq!(c.item(), 11.0);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let a = seeded_tensor::<f64>(&[7, 5], 11);
        let b = seeded_tensor::<f64>(&[5, 3], 12);
        let c = matmul(&a, &b).unwrap();
        for i in 0..7 {
            for j in 0..3 {
                let mut acc = 0.0;
                for l in 0..5 {
                    acc += a.at(&[i, l]) * b.at(&[l, j]);
                }
                assert!((c.at(&[i, j]) - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[4, 2]);
        assert!(matches!(matmul(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn matmul_thread_counts_agree_bitwise() {
        let a = seeded_tensor::<f32>(&[33, 17], 3);
        let b = seeded_tensor::<f32>(&[17, 29], 4);
        let single = matmul_with_threads(&a, &b, 1).unwrap();
        for t in [2usize, 3, 4, 7] {
            let multi = matmul_with_threads(&a, &b, t).unwrap();
            assert_eq!(single, multi, "thread count {t}");
        }
    }

    #[test]
    fn transposed_kernels_match_plain_matmul() {
        let a = seeded_tensor::<f64>(&[4, 6], 21);
        let b = seeded_tensor::<f64>(&[6, 5], 22);
        let c = matmul(&a, &b).unwrap();

        let mut via_abt = Tensor::<f64>::zeros(&[4, 5]);
        let bt = b.transpose(&[1, 0]).unwrap();
        matmul_abt_into(a.data(), bt.data(), via_abt.data_mut(), 4, 6, 5);
        assert!(c.max_abs_diff(&via_abt) < ABS_TOL_F64);

        let mut via_atb = Tensor::<f64>::zeros(&[4, 5]);
        let at = a.transpose(&[1, 0]).unwrap();
        matmul_atb_into(at.data(), b.data(), via_atb.data_mut(), 6, 4, 5);
        assert!(c.max_abs_diff(&via_atb) < ABS_TOL_F64);
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        let x = Tensor::<f64>::zeros(&[3]);
        let y = softmax(&x, 0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let x = Tensor::<f64>::from_vec(&[2], vec![1000.0, 1000.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert!(y.all_finite());
        assert!((y.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let x = Tensor::<f64>::from_vec(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let y = softmax(&x, 0).unwrap();
        let z: f64 = x.data().iter().map(|v| v.exp()).sum();
        for (i, &v) in y.data().iter().enumerate() {
            assert!((v - x.data()[i].exp() / z).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_middle_axis_rows_sum_to_one() {
        let x = seeded_tensor::<f64>(&[2, 5, 3], 9);
        let y = softmax(&x, 1).unwrap();
        for n in 0..2 {
            for j in 0..3 {
                let mut s = 0.0;
                for c in 0..5 {
                    let v = y.at(&[n, c, j]);
                    assert!(v > 0.0);
                    s += v;
                }
                assert!((s - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn conv2d_identity_kernel_is_identity() {
        let x = seeded_tensor::<f64>(&[1, 3, 4, 4], 5);
        let mut w = Tensor::<f64>::zeros(&[3, 3, 1, 1]);
        for o in 0..3 {
            let idx = (o * 3 + o) as usize;
            w.data_mut()[idx] = 1.0;
        }
        let y = conv2d(&x, &w, None, 1, 0, 1).unwrap();
        assert!(y.max_abs_diff(&x) < ABS_TOL_F64);
    }

    #[test]
    fn conv2d_sums_ones_to_nine() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 1, 0, 1).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    /// Direct six-loop convolution used as the oracle for the kernel path.
    fn conv_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Tensor<f64> {
        let (n, cin, h, wd) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
        let (cout, _, kh, kw) = (w.dims()[0], w.dims()[1], w.dims()[2], w.dims()[3]);
        let hp = (h + 2 * pad - kh) / stride + 1;
        let wp = (wd + 2 * pad - kw) / stride + 1;
        let (cin_g, cout_g) = (cin / groups, cout / groups);
        let mut out = Tensor::<f64>::zeros(&[n, cout, hp, wp]);
        for ni in 0..n {
            for co in 0..cout {
                let g = co / cout_g;
                for oh in 0..hp {
                    for ow in 0..wp {
                        let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin_g {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ih = (oh * stride + ki) as isize - pad as isize;
                                    let iw = (ow * stride + kj) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    acc += x.at4(ni, g * cin_g + ci, ih as usize, iw as usize)
                                        * w.at4(co, ci, ki, kj);
                                }
                            }
                        }
                        out.set4(ni, co, oh, ow, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv2d_matches_loop_oracle_grouped_f32() {
        let x64 = seeded_tensor::<f64>(&[1, 4, 8, 8], 31);
        let w64 = seeded_tensor::<f64>(&[8, 2, 3, 3], 32);
        let expect = conv_oracle(&x64, &w64, None, 1, 1, 2);
        let y: Tensor<f32> = conv2d(&x64.cast::<f32>(), &w64.cast::<f32>(), None, 1, 1, 2).unwrap();
        assert!(y.cast::<f64>().max_abs_diff(&expect) < ABS_TOL_F32);
    }

    #[test]
    fn conv2d_matches_loop_oracle_strided_biased() {
        let x = seeded_tensor::<f64>(&[2, 6, 9, 7], 41);
        let w = seeded_tensor::<f64>(&[9, 2, 3, 3], 42);
        let b = seeded_tensor::<f64>(&[9], 43);
        let expect = conv_oracle(&x, &w, Some(&b), 2, 1, 3);
        let y = conv2d(&x, &w, Some(&b), 2, 1, 3).unwrap();
        assert_eq!(y.dims(), expect.dims());
        assert!(y.max_abs_diff(&expect) < ABS_TOL_F64);
    }

    #[test]
    fn conv2d_groups_equal_sliced_convs() {
        let x = seeded_tensor::<f64>(&[1, 6, 5, 5], 51);
        let w = seeded_tensor::<f64>(&[4, 3, 3, 3], 52);
        let grouped = conv2d(&x, &w, None, 1, 1, 2).unwrap();
        let xs = split(&x, 2, 1).unwrap();
        let ws = split(&w, 2, 0).unwrap();
        let y0 = conv2d(&xs[0], &ws[0], None, 1, 1, 1).unwrap();
        let y1 = conv2d(&xs[1], &ws[1], None, 1, 1, 1).unwrap();
        let stacked = concat(&[&y0, &y1], 1).unwrap();
        assert!(grouped.max_abs_diff(&stacked) < 1e-6);
    }

    #[test]
    fn conv2d_rejects_bad_groups_and_shapes() {
        let x = Tensor::<f64>::zeros(&[1, 4, 4, 4]);
        let w = Tensor::<f64>::zeros(&[6, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w, None, 1, 1, 3),
            Err(Error::InvalidGroups(_))
        ));
        let w_bad = Tensor::<f64>::zeros(&[4, 3, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w_bad, None, 1, 1, 1),
            Err(Error::ShapeMismatch(_))
        ));
        let w_big = Tensor::<f64>::zeros(&[4, 4, 7, 7]);
        assert!(matches!(
            conv2d(&x, &w_big, None, 1, 0, 1),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn gap_averages_plane() {
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = global_avg_pool(&x).unwrap();
        assert_eq!(y.dims(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 2.5);
    }

    #[test]
    fn gap_of_constant_plane_is_the_constant() {
        let x = Tensor::<f64>::filled(&[2, 3, 4, 4], -1.25);
        let y = global_avg_pool(&x).unwrap();
        for &v in y.data() {
            assert_eq!(v, -1.25);
        }
    }

    #[test]
    fn gap_matches_loop_sum_oracle() {
        let x = seeded_tensor::<f64>(&[2, 3, 5, 5], 61);
        let y = global_avg_pool(&x).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                let mut s = 0.0;
                for h in 0..5 {
                    for w in 0..5 {
                        s += x.at4(n, c, h, w);
                    }
                }
                assert!((y.at4(n, c, 0, 0) - s / 25.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn instance_norm_zeroes_constant_planes() {
        let x = Tensor::<f64>::filled(&[1, 2, 3, 3], 7.0);
        let y = instance_norm(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2]), 1e-5).unwrap();
        for &v in y.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn instance_norm_scale_out_leaves_beta() {
        let x = seeded_tensor::<f64>(&[1, 2, 3, 3], 71);
        let y = instance_norm(
            &x,
            &Tensor::zeros(&[2]),
            &Tensor::filled(&[2], 5.0),
            1e-5,
        )
        .unwrap();
        for &v in y.data() {
            assert_eq!(v, 5.0);
        }
    }

    #[test]
    fn instance_norm_standardizes_moments() {
        let x = seeded_tensor::<f64>(&[1, 1, 8, 8], 72);
        let y = instance_norm(&x, &Tensor::ones(&[1]), &Tensor::zeros(&[1]), 1e-5).unwrap();
        let m = y.data().iter().sum::<f64>() / 64.0;
        let v = y.data().iter().map(|d| (d - m) * (d - m)).sum::<f64>() / 64.0;
        assert!(m.abs() < 1e-5);
        assert!((v - 1.0).abs() < 1e-3);
    }

    #[test]
    fn batch_norm_with_unit_stats_is_identity() {
        let x = seeded_tensor::<f64>(&[2, 3, 4, 4], 81);
        let y = batch_norm_inference(
            &x,
            &Tensor::ones(&[3]),
            &Tensor::zeros(&[3]),
            &Tensor::zeros(&[3]),
            &Tensor::ones(&[3]),
            1e-12,
        )
        .unwrap();
        assert!(y.max_abs_diff(&x) < 1e-6);
    }

    #[test]
    fn group_norm_with_c_groups_matches_instance_norm() {
        let x = seeded_tensor::<f64>(&[2, 4, 5, 5], 91);
        let gamma = seeded_tensor::<f64>(&[4], 92);
        let beta = seeded_tensor::<f64>(&[4], 93);
        let a = group_norm(&x, 4, &gamma, &beta, 1e-5).unwrap();
        let b = instance_norm(&x, &gamma, &beta, 1e-5).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn group_norm_single_group_matches_moment_oracle() {
        let x = seeded_tensor::<f64>(&[1, 4, 3, 3], 94);
        let y = group_norm(&x, 1, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5).unwrap();
        let m = x.data().iter().sum::<f64>() / 36.0;
        let v = x.data().iter().map(|d| (d - m) * (d - m)).sum::<f64>() / 36.0;
        for (i, &o) in y.data().iter().enumerate() {
            let want = (x.data()[i] - m) / (v + 1e-5).sqrt();
            assert!((o - want).abs() < 1e-5);
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let x = Tensor::<f64>::zeros(&[1, 4, 2, 2]);
        assert!(matches!(
            group_norm(&x, 3, &Tensor::ones(&[4]), &Tensor::zeros(&[4]), 1e-5),
            Err(Error::InvalidGroups(_))
        ));
    }

    #[test]
    fn relu_and_sigmoid_definitions() {
        let x = Tensor::<f64>::from_vec(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        assert!(sigmoid_scalar(-800.0f64).is_finite());
        assert!(sigmoid_scalar(800.0f64).is_finite());
    }

    #[test]
    fn concat_split_round_trip_is_bit_exact() {
        let x = seeded_tensor::<f64>(&[2, 8, 3, 3], 101);
        let parts = split(&x, 4, 1).unwrap();
        let refs: Vec<&Tensor<f64>> = parts.iter().collect();
        let back = concat(&refs, 1).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn split_rejects_indivisible_parts() {
        let x = Tensor::<f64>::zeros(&[1, 6, 2, 2]);
        assert!(matches!(split(&x, 4, 1), Err(Error::InvalidGroups(_))));
    }

    #[test]
    fn max_pool_basic_window() {
        let x = Tensor::<f64>::from_vec(
            &[1, 1, 4, 4],
            vec![
                1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0, 11.0, 12.0, 13.0, 14.0, 15.0,
                16.0,
            ],
        )
        .unwrap();
        let y = max_pool2d(&x, 2, 2, 0).unwrap();
        assert_eq!(y.dims(), &[1, 1, 2, 2]);
        assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn max_pool_padded_halves_resnet_stem() {
        let x = seeded_tensor::<f32>(&[1, 2, 112, 112], 111);
        let y = max_pool2d(&x, 3, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 2, 56, 56]);
    }

    #[test]
    fn fully_connected_matches_matmul_plus_bias() {
        let x = seeded_tensor::<f64>(&[3, 5], 121);
        let w = seeded_tensor::<f64>(&[5, 4], 122);
        let b = seeded_tensor::<f64>(&[4], 123);
        let y = fully_connected(&x, &w, &b).unwrap();
        let mm = matmul(&x, &w).unwrap();
        for n in 0..3 {
            for m in 0..4 {
                assert!((y.at(&[n, m]) - mm.at(&[n, m]) - b.data()[m]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn broadcast_helpers_match_manual_loops() {
        let x = seeded_tensor::<f64>(&[2, 3, 2, 2], 131);
        let v = seeded_tensor::<f64>(&[3], 132);
        let d = seeded_tensor::<f64>(&[2, 3, 1, 1], 133);
        let mc = mul_channel(&x, &v).unwrap();
        let ac = add_channel(&x, &v).unwrap();
        let md = mul_nc11(&x, &d).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..2 {
                    for w in 0..2 {
                        assert_eq!(mc.at4(n, c, h, w), x.at4(n, c, h, w) * v.data()[c]);
                        assert_eq!(ac.at4(n, c, h, w), x.at4(n, c, h, w) + v.data()[c]);
                        assert_eq!(md.at4(n, c, h, w), x.at4(n, c, h, w) * d.at4(n, c, 0, 0));
                    }
                }
            }
        }
    }
}
