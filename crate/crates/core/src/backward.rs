//! Hand-derived reverse-mode gradients. Each primitive exposes a backward
//! that maps an upstream gradient to input and parameter gradients; the
//! composed attention branches and the full block keep small caches from
//! their forward pass instead of a tape.

use crate::attention::{channel_shuffle, SaUnitParams, SeDescriptorParams, SpatialBranchParams};
use crate::dmsa::{
    fuse_splits, gate_norm, multi_scale_extract_strided, AggParams, BranchAgg, DmsaConfig,
    DmsaParams, GateParams, NormVariant,
};
use crate::error::{Error, Result};
use crate::ops::{
    add, concat, conv2d, conv_geometry, group_norm, matmul_abt_acc_into, matmul_abt_into,
    matmul_atb_into, matmul_into, mul, mul_channel, mul_nc11, relu, sigmoid, split,
};
use crate::ops::{col2im_add, im2col, row_softmax_inplace};
use crate::scalar::Element;
use crate::tensor::{Axis, Tensor};
use crate::NORM_EPS;

fn same_dims<T: Element>(a: &Tensor<T>, b: &Tensor<T>, who: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "{who}: gradient {:?} vs value {:?}",
            b.dims(),
            a.dims()
        )));
    }
    Ok(())
}

/// gx = gy where x > 0, else 0 (subgradient 0 at the kink).
pub fn relu_backward<T: Element>(x: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims(x, gy, "relu_backward")?;
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    Ok(gx)
}

/// gx = gy * y * (1 - y), with y the forward sigmoid output.
pub fn sigmoid_backward<T: Element>(y: &Tensor<T>, gy: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims(y, gy, "sigmoid_backward")?;
    let mut gx = gy.clone();
    for (g, &v) in gx.data_mut().iter_mut().zip(y.data()) {
        *g = *g * v * (T::one() - v);
    }
    Ok(gx)
}

/// Softmax backward along `axis`: gx_j = y_j (gy_j - sum_k gy_k y_k) per lane.
pub fn softmax_backward<T: Element>(
    y: &Tensor<T>,
    gy: &Tensor<T>,
    axis: usize,
) -> Result<Tensor<T>> {
    same_dims(y, gy, "softmax_backward")?;
    if axis >= y.rank() {
        return Err(Error::ShapeMismatch(format!(
            "softmax axis {axis} out of range for {:?}",
            y.dims()
        )));
    }
    let lane = y.dims()[axis];
    let stride = y.shape().strides()[axis];
    let block = stride * lane;
    let mut gx = gy.clone();
    let lanes = gx.numel() / lane;
    for li in 0..lanes {
        let base = (li / stride) * block + (li % stride);
        let mut dot = T::zero();
        for i in 0..lane {
            dot = dot + gy.data()[base + i * stride] * y.data()[base + i * stride];
        }
        for i in 0..lane {
            let p = base + i * stride;
            gx.data_mut()[p] = y.data()[p] * (gy.data()[p] - dot);
        }
    }
    Ok(gx)
}

/// Backward of a contiguous [rows, cols] row softmax.
fn row_softmax_backward_slice<T: Element>(y: &[T], gy: &[T], gx: &mut [T], rows: usize, cols: usize) {
    for r in 0..rows {
        let yr = &y[r * cols..(r + 1) * cols];
        let gr = &gy[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for (&a, &b) in gr.iter().zip(yr) {
            dot = dot + a * b;
        }
        for ((o, &yv), &gv) in gx[r * cols..(r + 1) * cols].iter_mut().zip(yr).zip(gr) {
            *o = yv * (gv - dot);
        }
    }
}

/// Spreads gy ([N,C,1,1] or [N,C]) uniformly over each input plane.
pub fn global_avg_pool_backward<T: Element>(
    x_dims: &[usize],
    gy: &Tensor<T>,
) -> Result<Tensor<T>> {
    if x_dims.len() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "global_avg_pool_backward input dims {x_dims:?}"
        )));
    }
    let (n, c, h, w) = (x_dims[0], x_dims[1], x_dims[2], x_dims[3]);
    if gy.numel() != n * c {
        return Err(Error::ShapeMismatch(format!(
            "pool gradient {:?} does not match [{n},{c}]",
            gy.dims()
        )));
    }
    let plane = h * w;
    let inv = T::from_f64(1.0 / plane as f64);
    let mut gx = Tensor::zeros(x_dims);
    for i in 0..n * c {
        let v = gy.data()[i] * inv;
        for o in gx.data_mut()[i * plane..(i + 1) * plane].iter_mut() {
            *o = v;
        }
    }
    Ok(gx)
}

/// (ga, gb) of c = a . b: ga = gy . b^T, gb = a^T . gy.
pub fn matmul_backward<T: Element>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (m, k) = (a.dims()[0], a.dims()[1]);
    let n = b.dims()[1];
    if b.dims()[0] != k || gy.dims() != [m, n] {
        return Err(Error::ShapeMismatch(format!(
            "matmul_backward: a {:?}, b {:?}, gy {:?}",
            a.dims(),
            b.dims(),
            gy.dims()
        )));
    }
    let mut ga = Tensor::zeros(&[m, k]);
    matmul_abt_into(gy.data(), b.data(), ga.data_mut(), m, n, k);
    let mut gb = Tensor::zeros(&[k, n]);
    matmul_atb_into(a.data(), gy.data(), gb.data_mut(), m, k, n);
    Ok((ga, gb))
}

/// (gx, gw, gb) of y = x . w + b, with x [N,K], w [K,M].
pub fn fully_connected_backward<T: Element>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (ga, gw) = matmul_backward(x, w, gy)?;
    let (n, m) = (gy.dims()[0], gy.dims()[1]);
    let mut gb = Tensor::zeros(&[m]);
    for r in 0..n {
        for j in 0..m {
            gb.data_mut()[j] = gb.data()[j] + gy.data()[r * m + j];
        }
    }
    Ok((ga, gw, gb))
}

/// (gx, gw, gb) of a grouped convolution; gb is the per-output-channel sum
/// of gy and only meaningful when the forward carried a bias.
pub fn conv2d_backward<T: Element>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
    groups: usize,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = conv_geometry(x, weight, None, stride, padding, groups)?;
    if gy.dims() != [g.n, g.cout, g.hp, g.wp] {
        return Err(Error::ShapeMismatch(format!(
            "conv gradient {:?}, want [{},{},{},{}]",
            gy.dims(),
            g.n,
            g.cout,
            g.hp,
            g.wp
        )));
    }
    let kk = g.cin_g * g.kh * g.kw;
    let l = g.hp * g.wp;
    let mut gx = Tensor::zeros(x.dims());
    let mut gw = Tensor::zeros(weight.dims());
    let mut gb = Tensor::zeros(&[g.cout]);
    let mut col = vec![T::zero(); kk * l];
    let mut dcol = vec![T::zero(); kk * l];
    for ni in 0..g.n {
        for gi in 0..groups {
            let xoff = (ni * g.cin + gi * g.cin_g) * g.h * g.w;
            let xlen = g.cin_g * g.h * g.w;
            im2col(
                &x.data()[xoff..xoff + xlen],
                g.cin_g,
                g.h,
                g.w,
                g.kh,
                g.kw,
                stride,
                padding,
                g.hp,
                g.wp,
                &mut col,
            );
            let yoff = (ni * g.cout + gi * g.cout_g) * l;
            let gys = &gy.data()[yoff..yoff + g.cout_g * l];
            let woff = gi * g.cout_g * kk;
            matmul_abt_acc_into(
                gys,
                &col,
                &mut gw.data_mut()[woff..woff + g.cout_g * kk],
                g.cout_g,
                l,
                kk,
            );
            for v in dcol.iter_mut() {
                *v = T::zero();
            }
            matmul_atb_into(
                &weight.data()[woff..woff + g.cout_g * kk],
                gys,
                &mut dcol,
                g.cout_g,
                kk,
                l,
            );
            col2im_add(
                &dcol,
                g.cin_g,
                g.h,
                g.w,
                g.kh,
                g.kw,
                stride,
                padding,
                g.hp,
                g.wp,
                &mut gx.data_mut()[xoff..xoff + xlen],
            );
            for oc in 0..g.cout_g {
                let mut s = T::zero();
                for &v in &gys[oc * l..(oc + 1) * l] {
                    s = s + v;
                }
                let bi = gi * g.cout_g + oc;
                gb.data_mut()[bi] = gb.data()[bi] + s;
            }
        }
    }
    Ok((gx, gw, gb))
}

/// (gx, dgamma, dbeta) of group normalization with per-channel affine;
/// statistics are recomputed from x rather than cached.
pub fn group_norm_backward<T: Element>(
    x: &Tensor<T>,
    num_groups: usize,
    gamma: &Tensor<T>,
    eps: T,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    same_dims(x, gy, "group_norm_backward")?;
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    if num_groups == 0 || c % num_groups != 0 || gamma.numel() != c {
        return Err(Error::InvalidGroups(format!(
            "group_norm_backward groups {num_groups} for {c} channels"
        )));
    }
    let cpg = c / num_groups;
    let plane = h * w;
    let m = cpg * plane;
    let inv_m = T::from_f64(1.0 / m as f64);
    let mut gx = Tensor::zeros(x.dims());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ni in 0..n {
        for gi in 0..num_groups {
            let off = (ni * c + gi * cpg) * plane;
            let xs = &x.data()[off..off + m];
            let gs = &gy.data()[off..off + m];
            let mut mean = T::zero();
            for &v in xs {
                mean = mean + v;
            }
            mean = mean * inv_m;
            let mut var = T::zero();
            for &v in xs {
                let d = v - mean;
                var = var + d * d;
            }
            var = var * inv_m;
            let istd = T::one() / (var + eps).sqrt();
            // gh = gy * gamma, reduced with xhat over the lane
            let mut mean_gh = T::zero();
            let mut mean_ghx = T::zero();
            for ci in 0..cpg {
                let ga = gamma.data()[gi * cpg + ci];
                for p in 0..plane {
                    let i = ci * plane + p;
                    let xh = (xs[i] - mean) * istd;
                    let gh = gs[i] * ga;
                    mean_gh = mean_gh + gh;
                    mean_ghx = mean_ghx + gh * xh;
                }
            }
            mean_gh = mean_gh * inv_m;
            mean_ghx = mean_ghx * inv_m;
            for ci in 0..cpg {
                let cidx = gi * cpg + ci;
                let ga = gamma.data()[cidx];
                let mut dgc = T::zero();
                let mut dbc = T::zero();
                for p in 0..plane {
                    let i = ci * plane + p;
                    let xh = (xs[i] - mean) * istd;
                    let gh = gs[i] * ga;
                    gx.data_mut()[off + i] = istd * (gh - mean_gh - xh * mean_ghx);
                    dgc = dgc + gs[i] * xh;
                    dbc = dbc + gs[i];
                }
                dgamma.data_mut()[cidx] = dgamma.data()[cidx] + dgc;
                dbeta.data_mut()[cidx] = dbeta.data()[cidx] + dbc;
            }
        }
    }
    Ok((gx, dgamma, dbeta))
}

/// Instance norm backward: group norm with one group per channel.
pub fn instance_norm_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    eps: T,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    group_norm_backward(x, x.dims()[1], gamma, eps, gy)
}

/// Inference-mode batch norm backward: the statistics are constants, so the
/// map is affine in x.
pub fn batch_norm_inference_backward<T: Element>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    running_mean: &Tensor<T>,
    running_var: &Tensor<T>,
    eps: T,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    same_dims(x, gy, "batch_norm_inference_backward")?;
    let (n, c, h, w) = (x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]);
    if gamma.numel() != c || running_mean.numel() != c || running_var.numel() != c {
        return Err(Error::ShapeMismatch(format!(
            "batch norm vectors must have {c} elements"
        )));
    }
    let plane = h * w;
    let mut gx = Tensor::zeros(x.dims());
    let mut dgamma = Tensor::zeros(&[c]);
    let mut dbeta = Tensor::zeros(&[c]);
    for ci in 0..c {
        let istd = T::one() / (running_var.data()[ci] + eps).sqrt();
        let mu = running_mean.data()[ci];
        let ga = gamma.data()[ci];
        for ni in 0..n {
            let off = (ni * c + ci) * plane;
            for p in 0..plane {
                let g = gy.data()[off + p];
                let xh = (x.data()[off + p] - mu) * istd;
                gx.data_mut()[off + p] = g * ga * istd;
                dgamma.data_mut()[ci] = dgamma.data()[ci] + g * xh;
                dbeta.data_mut()[ci] = dbeta.data()[ci] + g;
            }
        }
    }
    Ok((gx, dgamma, dbeta))
}

fn channel_sum_to<T: Element>(gy: &Tensor<T>, out: &mut Tensor<T>) {
    let (n, c, h, w) = (gy.dims()[0], gy.dims()[1], gy.dims()[2], gy.dims()[3]);
    debug_assert_eq!(out.numel(), c);
    let plane = h * w;
    for ni in 0..n {
        for ci in 0..c {
            let mut s = T::zero();
            for &v in &gy.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane] {
                s = s + v;
            }
            out.data_mut()[ci] = out.data()[ci] + s;
        }
    }
}

fn dot_all<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        s = s + x * y;
    }
    s
}

// ---------------------------------------------------------------------------
// SE descriptor
// ---------------------------------------------------------------------------

pub struct SeCache<T: Element> {
    /// pooled input [N,C]
    pub s: Tensor<T>,
    /// pre-relu bottleneck [N,C/r]
    pub u: Tensor<T>,
    /// post-relu bottleneck [N,C/r]
    pub h: Tensor<T>,
    /// sigmoid output [N,C]
    pub y: Tensor<T>,
}

pub fn se_weight_cached<T: Element>(
    x: &Tensor<T>,
    p: &SeDescriptorParams<T>,
) -> Result<(Tensor<T>, SeCache<T>)> {
    let (n, c) = (x.dims()[0], x.dims()[1]);
    let cr = p.w0.dims()[0];
    let s = crate::ops::global_avg_pool(x)?.reshape(&[n, c])?;
    let mut u = Tensor::zeros(&[n, cr]);
    matmul_abt_into(s.data(), p.w0.data(), u.data_mut(), n, c, cr);
    let h = relu(&u);
    let mut v = Tensor::zeros(&[n, c]);
    matmul_abt_into(h.data(), p.w1.data(), v.data_mut(), n, cr, c);
    let y = sigmoid(&v);
    let out = y.reshape(&[n, c, 1, 1])?;
    Ok((out, SeCache { s, u, h, y }))
}

/// Backward of the SE descriptor; gw is the gradient at the [N,C] weights.
/// Returns the input gradient and (dw0, dw1).
pub fn se_weight_backward<T: Element>(
    x_dims: &[usize],
    p: &SeDescriptorParams<T>,
    cache: &SeCache<T>,
    gw: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c) = (x_dims[0], x_dims[1]);
    let cr = p.w0.dims()[0];
    if gw.numel() != n * c {
        return Err(Error::ShapeMismatch(format!(
            "se gradient {:?}, want {n}x{c}",
            gw.dims()
        )));
    }
    // dv = gw * y(1-y)
    let mut dv = Tensor::zeros(&[n, c]);
    for i in 0..n * c {
        let y = cache.y.data()[i];
        dv.data_mut()[i] = gw.data()[i] * y * (T::one() - y);
    }
    // v = h . w1^T : dw1 = dv^T . h, dh = dv . w1
    let mut dw1 = Tensor::zeros(p.w1.dims());
    matmul_atb_into(dv.data(), cache.h.data(), dw1.data_mut(), n, c, cr);
    let mut dh = Tensor::zeros(&[n, cr]);
    matmul_into(dv.data(), p.w1.data(), dh.data_mut(), n, c, cr, 1);
    // relu
    for i in 0..n * cr {
        if cache.u.data()[i] <= T::zero() {
            dh.data_mut()[i] = T::zero();
        }
    }
    // u = s . w0^T : dw0 = dh^T . s, ds = dh . w0
    let mut dw0 = Tensor::zeros(p.w0.dims());
    matmul_atb_into(dh.data(), cache.s.data(), dw0.data_mut(), n, cr, c);
    let mut ds = Tensor::zeros(&[n, c]);
    matmul_into(dh.data(), p.w0.data(), ds.data_mut(), n, cr, c, 1);
    let gx = global_avg_pool_backward(x_dims, &ds)?;
    Ok((gx, dw0, dw1))
}

// ---------------------------------------------------------------------------
// channel branch
// ---------------------------------------------------------------------------

pub struct ChannelCache<T: Element> {
    /// row-softmaxed map [N,C,C]
    pub map: Tensor<T>,
    /// map-mixed features [N,C,HW]
    pub mixed: Tensor<T>,
}

pub fn channel_branch_cached<T: Element>(
    a: &Tensor<T>,
    beta: T,
) -> Result<(Tensor<T>, ChannelCache<T>)> {
    let (n, c, h, w) = (a.dims()[0], a.dims()[1], a.dims()[2], a.dims()[3]);
    let hw = h * w;
    let mut map = Tensor::zeros(&[n, c, c]);
    let mut mixed = Tensor::zeros(&[n, c, hw]);
    let mut out = a.clone();
    for ni in 0..n {
        let ar = &a.data()[ni * c * hw..(ni + 1) * c * hw];
        let m = &mut map.data_mut()[ni * c * c..(ni + 1) * c * c];
        matmul_abt_into(ar, ar, m, c, hw, c);
        row_softmax_inplace(m, c, c);
        let mx = &mut mixed.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        matmul_into(m, ar, mx, c, c, hw, 1);
        for (o, &v) in out.data_mut()[ni * c * hw..(ni + 1) * c * hw]
            .iter_mut()
            .zip(mx.iter())
        {
            *o = *o + beta * v;
        }
    }
    Ok((out, ChannelCache { map, mixed }))
}

/// Backward of E1 = A + beta * (M . A) with M the row-softmaxed Gram map.
/// Returns (gA, dbeta).
pub fn channel_branch_backward<T: Element>(
    a: &Tensor<T>,
    beta: T,
    cache: &ChannelCache<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, T)> {
    same_dims(a, gy, "channel_branch_backward")?;
    let (n, c, h, w) = (a.dims()[0], a.dims()[1], a.dims()[2], a.dims()[3]);
    let hw = h * w;
    let dbeta = dot_all(gy, &cache.mixed.reshape(&[n, c, h, w])?);
    let mut ga = gy.clone();
    let mut dmix = vec![T::zero(); c * hw];
    let mut dm = vec![T::zero(); c * c];
    let mut dlogits = vec![T::zero(); c * c];
    for ni in 0..n {
        let ar = &a.data()[ni * c * hw..(ni + 1) * c * hw];
        let m = &cache.map.data()[ni * c * c..(ni + 1) * c * c];
        let gn = &gy.data()[ni * c * hw..(ni + 1) * c * hw];
        for (d, &g) in dmix.iter_mut().zip(gn) {
            *d = beta * g;
        }
        // mixed = M . A: dM = dmix . A^T, gA += M^T . dmix
        matmul_abt_into(&dmix, ar, &mut dm, c, hw, c);
        matmul_atb_into(m, &dmix, &mut ga.data_mut()[ni * c * hw..(ni + 1) * c * hw], c, c, hw);
        // softmax rows, then logits = A . A^T on both operands
        row_softmax_backward_slice(m, &dm, &mut dlogits, c, c);
        let gslice = &mut ga.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        matmul_into(&dlogits, ar, gslice, c, c, hw, 1);
        matmul_atb_into(&dlogits, ar, gslice, c, c, hw);
    }
    Ok((ga, dbeta))
}

// ---------------------------------------------------------------------------
// spatial branch
// ---------------------------------------------------------------------------

pub struct SpatialCache<T: Element> {
    pub b: Tensor<T>,
    pub c: Tensor<T>,
    pub d: Tensor<T>,
    /// row-softmaxed position map [N,HW,HW]
    pub s: Tensor<T>,
    /// attention-mixed features [N,C,HW]
    pub mixed: Tensor<T>,
}

pub fn spatial_mix_cached<T: Element>(
    a_res: &Tensor<T>,
    a_att: &Tensor<T>,
    p: &SpatialBranchParams<T>,
) -> Result<(Tensor<T>, SpatialCache<T>)> {
    same_dims(a_res, a_att, "spatial_mix_cached")?;
    let (n, c, h, w) = (a_res.dims()[0], a_res.dims()[1], a_res.dims()[2], a_res.dims()[3]);
    let hw = h * w;
    let b = conv2d(a_att, &p.wb, None, 1, 0, 1)?;
    let cm = conv2d(a_att, &p.wc, None, 1, 0, 1)?;
    let d = conv2d(a_att, &p.wd, None, 1, 0, 1)?;
    let alpha = p.alpha.item();
    let mut s = Tensor::zeros(&[n, hw, hw]);
    let mut mixed = Tensor::zeros(&[n, c, hw]);
    let mut out = a_res.clone();
    for ni in 0..n {
        let br = &b.data()[ni * c * hw..(ni + 1) * c * hw];
        let cr = &cm.data()[ni * c * hw..(ni + 1) * c * hw];
        let dr = &d.data()[ni * c * hw..(ni + 1) * c * hw];
        let sn = &mut s.data_mut()[ni * hw * hw..(ni + 1) * hw * hw];
        matmul_atb_into(cr, br, sn, c, hw, hw);
        row_softmax_inplace(sn, hw, hw);
        let mx = &mut mixed.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        matmul_abt_into(dr, sn, mx, c, hw, hw);
        for (o, &v) in out.data_mut()[ni * c * hw..(ni + 1) * c * hw]
            .iter_mut()
            .zip(mx.iter())
        {
            *o = *o + alpha * v;
        }
    }
    Ok((out, SpatialCache { b, c: cm, d, s, mixed }))
}

/// Backward of E2 = A_res + alpha * (D . S^T). Returns the residual input
/// gradient, the attention input gradient, and the projection/alpha grads
/// packed as a SpatialBranchParams-shaped container.
pub fn spatial_mix_backward<T: Element>(
    a_att: &Tensor<T>,
    p: &SpatialBranchParams<T>,
    cache: &SpatialCache<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, SpatialBranchParams<T>)> {
    let (n, c, h, w) = (a_att.dims()[0], a_att.dims()[1], a_att.dims()[2], a_att.dims()[3]);
    let hw = h * w;
    let alpha = p.alpha.item();
    let ga_res = gy.clone();
    let dalpha = dot_all(gy, &cache.mixed.reshape(&[n, c, h, w])?);
    let mut db = Tensor::zeros(&[n, c, h, w]);
    let mut dc = Tensor::zeros(&[n, c, h, w]);
    let mut dd = Tensor::zeros(&[n, c, h, w]);
    let mut dmixed = vec![T::zero(); c * hw];
    let mut ds = vec![T::zero(); hw * hw];
    let mut dl = vec![T::zero(); hw * hw];
    for ni in 0..n {
        let gn = &gy.data()[ni * c * hw..(ni + 1) * c * hw];
        for (o, &g) in dmixed.iter_mut().zip(gn) {
            *o = alpha * g;
        }
        let sn = &cache.s.data()[ni * hw * hw..(ni + 1) * hw * hw];
        let br = &cache.b.data()[ni * c * hw..(ni + 1) * c * hw];
        let cr = &cache.c.data()[ni * c * hw..(ni + 1) * c * hw];
        let dr = &cache.d.data()[ni * c * hw..(ni + 1) * c * hw];
        // mixed = D . S^T
        let ddn = &mut dd.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        matmul_into(&dmixed, sn, ddn, c, hw, hw, 1);
        for v in ds.iter_mut() {
            *v = T::zero();
        }
        matmul_atb_into(&dmixed, dr, &mut ds, c, hw, hw);
        // softmax rows, then logits L = C^T . B
        row_softmax_backward_slice(sn, &ds, &mut dl, hw, hw);
        let dcn = &mut dc.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        matmul_abt_into(br, &dl, dcn, c, hw, hw);
        let dbn = &mut db.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        matmul_into(cr, &dl, dbn, c, hw, hw, 1);
    }
    let (gab, gwb, _) = conv2d_backward(a_att, &p.wb, 1, 0, 1, &db)?;
    let (gac, gwc, _) = conv2d_backward(a_att, &p.wc, 1, 0, 1, &dc)?;
    let (gad, gwd, _) = conv2d_backward(a_att, &p.wd, 1, 0, 1, &dd)?;
    let ga_att = add(&add(&gab, &gac)?, &gad)?;
    let grads = SpatialBranchParams {
        wb: gwb,
        wc: gwc,
        wd: gwd,
        alpha: Tensor::scalar(dalpha),
    };
    Ok((ga_res, ga_att, grads))
}

// ---------------------------------------------------------------------------
// F_c gate
// ---------------------------------------------------------------------------

pub struct GateGroupCache<T: Element> {
    /// the gated second half of this group
    pub x2: Tensor<T>,
    /// normalized features entering the gate
    pub t: Tensor<T>,
    /// sigmoid activations
    pub sig: Tensor<T>,
}

/// Backward through the configured gate normalization; returns (gx, dgamma,
/// dbeta) for the shared per-half affine.
fn gate_norm_backward<T: Element>(
    xk2: &Tensor<T>,
    cfg: &DmsaConfig,
    gamma: &Tensor<T>,
    gt: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let c = xk2.dims()[1];
    let eps = T::from_f64(NORM_EPS);
    match cfg.norm_variant {
        NormVariant::Instance => instance_norm_backward(xk2, gamma, eps, gt),
        NormVariant::Batch => batch_norm_inference_backward(
            xk2,
            gamma,
            &Tensor::zeros(&[c]),
            &Tensor::ones(&[c]),
            eps,
            gt,
        ),
        NormVariant::Group => {
            let ng = if c % 2 == 0 { 2 } else { 1 };
            group_norm_backward(xk2, ng, gamma, eps, gt)
        }
        NormVariant::ShuffleNorm => {
            let gs = if c % 2 == 0 { 2 } else { 1 };
            let ones = Tensor::ones(&[c]);
            let zeros = Tensor::zeros(&[c]);
            let sh = channel_shuffle(xk2, gs)?;
            let gn = group_norm(&sh, gs, &ones, &zeros, eps)?;
            let un = channel_shuffle(&gn, c / gs)?;
            let mut dgamma = Tensor::zeros(&[c]);
            let mut dbeta = Tensor::zeros(&[c]);
            channel_sum_to(gt, &mut dbeta);
            channel_sum_to(&mul(gt, &un)?, &mut dgamma);
            let dun = mul_channel(gt, gamma)?;
            let dgn = channel_shuffle(&dun, gs)?;
            let (dsh, _, _) = group_norm_backward(&sh, gs, &ones, eps, &dgn)?;
            let gx = channel_shuffle(&dsh, c / gs)?;
            Ok((gx, dgamma, dbeta))
        }
    }
}

pub fn gated_attention_input_cached<T: Element>(
    a: &Tensor<T>,
    cfg: &DmsaConfig,
    gate: &GateParams<T>,
) -> Result<(Tensor<T>, Vec<GateGroupCache<T>>)> {
    if matches!(gate, GateParams::Absent) {
        return Ok((a.clone(), Vec::new()));
    }
    let groups = split(a, cfg.sa_groups, Axis::Channel.index())?;
    let mut rebuilt = Vec::with_capacity(groups.len());
    let mut caches = Vec::with_capacity(groups.len());
    for xk in &groups {
        let halves = split(xk, 2, Axis::Channel.index())?;
        let (x1, x2) = (&halves[0], &halves[1]);
        let (t, z) = match gate {
            GateParams::Affine(p) => {
                let t = gate_norm(x2, cfg, &p.in_gamma, &p.in_beta)?;
                let z = crate::ops::add_channel(&mul_channel(&t, &p.w2)?, &p.b2)?;
                (t, z)
            }
            GateParams::Conv { weight, bias, in_gamma, in_beta } => {
                let t = gate_norm(x2, cfg, in_gamma, in_beta)?;
                let z = conv2d(&t, weight, Some(bias), 1, 0, 1)?;
                (t, z)
            }
            GateParams::Absent => unreachable!(),
        };
        let sig = sigmoid(&z);
        let gated = mul(&sig, x2)?;
        rebuilt.push(concat(&[x1, &gated], Axis::Channel.index())?);
        caches.push(GateGroupCache { x2: x2.clone(), t, sig });
    }
    let refs: Vec<&Tensor<T>> = rebuilt.iter().collect();
    Ok((concat(&refs, Axis::Channel.index())?, caches))
}

/// Backward of the gated attention input. Returns the gradient at the fused
/// features and the gate parameter grads packed as a GateParams container.
pub fn gated_attention_input_backward<T: Element>(
    cfg: &DmsaConfig,
    gate: &GateParams<T>,
    caches: &[GateGroupCache<T>],
    g_att: &Tensor<T>,
) -> Result<(Tensor<T>, GateParams<T>)> {
    if matches!(gate, GateParams::Absent) {
        return Ok((g_att.clone(), GateParams::Absent));
    }
    let cp = cfg.half_group_channels();
    let mut grads = match gate {
        GateParams::Affine(_) => GateParams::Affine(SaUnitParams {
            w2: Tensor::zeros(&[cp, 1, 1]),
            b2: Tensor::zeros(&[cp, 1, 1]),
            in_gamma: Tensor::zeros(&[cp]),
            in_beta: Tensor::zeros(&[cp]),
        }),
        GateParams::Conv { weight, .. } => GateParams::Conv {
            weight: Tensor::zeros(weight.dims()),
            bias: Tensor::zeros(&[cp]),
            in_gamma: Tensor::zeros(&[cp]),
            in_beta: Tensor::zeros(&[cp]),
        },
        GateParams::Absent => unreachable!(),
    };
    let ggroups = split(g_att, cfg.sa_groups, Axis::Channel.index())?;
    let mut parts = Vec::with_capacity(ggroups.len());
    for (gk, cacheg) in ggroups.iter().zip(caches) {
        let halves = split(gk, 2, Axis::Channel.index())?;
        let (g1, g2) = (&halves[0], &halves[1]);
        // y2 = sig * x2
        let dsig = mul(g2, &cacheg.x2)?;
        let mut gx2 = mul(g2, &cacheg.sig)?;
        let dz = sigmoid_backward(&cacheg.sig, &dsig)?;
        let dt = match (gate, &mut grads) {
            (GateParams::Affine(p), GateParams::Affine(g)) => {
                channel_sum_to(&dz, &mut g.b2);
                channel_sum_to(&mul(&dz, &cacheg.t)?, &mut g.w2);
                mul_channel(&dz, &p.w2)?
            }
            (
                GateParams::Conv { weight, .. },
                GateParams::Conv { weight: gw, bias: gb, .. },
            ) => {
                let (dt, dw, db) = conv2d_backward(&cacheg.t, weight, 1, 0, 1, &dz)?;
                *gw = add(gw, &dw)?;
                *gb = add(gb, &db)?;
                dt
            }
            _ => unreachable!(),
        };
        let (gamma, gg, gb) = match (gate, &mut grads) {
            (GateParams::Affine(p), GateParams::Affine(g)) => {
                (&p.in_gamma, &mut g.in_gamma, &mut g.in_beta)
            }
            (
                GateParams::Conv { in_gamma, .. },
                GateParams::Conv { in_gamma: gg, in_beta: gb, .. },
            ) => (in_gamma, gg, gb),
            _ => unreachable!(),
        };
        let (gx_norm, dgam, dbet) = gate_norm_backward(&cacheg.x2, cfg, gamma, &dt)?;
        gx2 = add(&gx2, &gx_norm)?;
        *gg = add(gg, &dgam)?;
        *gb = add(gb, &dbet)?;
        parts.push(concat(&[g1, &gx2], Axis::Channel.index())?);
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    Ok((concat(&refs, Axis::Channel.index())?, grads))
}

// ---------------------------------------------------------------------------
// branch aggregation
// ---------------------------------------------------------------------------

pub enum AggCache<T: Element> {
    Softmax {
        se1: SeCache<T>,
        se2: SeCache<T>,
        /// branch weights [N,C,1,1]
        a1: Tensor<T>,
        a2: Tensor<T>,
    },
    ConcatHalve {
        /// concatenated branch outputs [N,2C,H,W]
        f: Tensor<T>,
    },
}

pub fn aggregate_branches_cached<T: Element>(
    e1: &Tensor<T>,
    e2: &Tensor<T>,
    cfg: &DmsaConfig,
    params: &DmsaParams<T>,
) -> Result<(Tensor<T>, AggCache<T>)> {
    match (&params.agg, cfg.branch_agg) {
        (AggParams::Softmax { se }, BranchAgg::SoftmaxEq8) => {
            let (z1, se1) = se_weight_cached(e1, se)?;
            let (z2, se2) = se_weight_cached(e2, se)?;
            let (a1, a2) = crate::dmsa::branch_softmax(&z1, &z2);
            let y = add(&mul_nc11(e1, &a1)?, &mul_nc11(e2, &a2)?)?;
            Ok((y, AggCache::Softmax { se1, se2, a1, a2 }))
        }
        (AggParams::ConcatHalve { weight, bias }, BranchAgg::ConcatHalve) => {
            let f = concat(&[e1, e2], Axis::Channel.index())?;
            let y = conv2d(&f, weight, Some(bias), 1, 0, 1)?;
            Ok((y, AggCache::ConcatHalve { f }))
        }
        _ => Err(Error::InvalidConfig(
            "aggregation parameters do not match configured branch_agg".into(),
        )),
    }
}

/// Backward of the branch aggregation. Returns (gE1, gE2) and the
/// aggregation parameter grads packed as an AggParams container.
pub fn aggregate_branches_backward<T: Element>(
    e1: &Tensor<T>,
    e2: &Tensor<T>,
    params: &DmsaParams<T>,
    cache: &AggCache<T>,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, AggParams<T>)> {
    let (n, c, h, w) = (e1.dims()[0], e1.dims()[1], e1.dims()[2], e1.dims()[3]);
    match (&params.agg, cache) {
        (AggParams::Softmax { se }, AggCache::Softmax { se1, se2, a1, a2 }) => {
            let mut ge1 = mul_nc11(gy, a1)?;
            let mut ge2 = mul_nc11(gy, a2)?;
            // branch weight grads: da_i[n,c] = sum_hw gy * e_i
            let plane = h * w;
            let mut dd = Tensor::zeros(&[n, c]);
            for i in 0..n * c {
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for p in 0..plane {
                    let g = gy.data()[i * plane + p];
                    s1 = s1 + g * e1.data()[i * plane + p];
                    s2 = s2 + g * e2.data()[i * plane + p];
                }
                // a1 = sigmoid(z1 - z2): d(z1-z2) = a1 a2 (da1 - da2)
                dd.data_mut()[i] = a1.data()[i] * a2.data()[i] * (s1 - s2);
            }
            let mut dz2 = dd.clone();
            for v in dz2.data_mut() {
                *v = T::zero() - *v;
            }
            let (gx1, dw0a, dw1a) = se_weight_backward(e1.dims(), se, se1, &dd)?;
            let (gx2, dw0b, dw1b) = se_weight_backward(e2.dims(), se, se2, &dz2)?;
            ge1 = add(&ge1, &gx1)?;
            ge2 = add(&ge2, &gx2)?;
            Ok((
                ge1,
                ge2,
                AggParams::Softmax {
                    se: SeDescriptorParams {
                        w0: add(&dw0a, &dw0b)?,
                        w1: add(&dw1a, &dw1b)?,
                        reduction: se.reduction,
                    },
                },
            ))
        }
        (AggParams::ConcatHalve { weight, .. }, AggCache::ConcatHalve { f }) => {
            let (gf, gw, gb) = conv2d_backward(f, weight, 1, 0, 1, gy)?;
            let mut halves = split(&gf, 2, Axis::Channel.index())?;
            let ge2 = halves.pop().expect("two halves");
            let ge1 = halves.pop().expect("two halves");
            Ok((ge1, ge2, AggParams::ConcatHalve { weight: gw, bias: gb }))
        }
        _ => Err(Error::InvalidConfig("aggregation cache mismatch".into())),
    }
}

// ---------------------------------------------------------------------------
// full block
// ---------------------------------------------------------------------------

pub struct DmsaCache<T: Element> {
    pub a: Tensor<T>,
    pub channel: ChannelCache<T>,
    pub a_att: Tensor<T>,
    pub gate: Vec<GateGroupCache<T>>,
    pub spatial: SpatialCache<T>,
    pub e1: Tensor<T>,
    pub e2: Tensor<T>,
    pub agg: AggCache<T>,
}

/// Forward pass of the block retaining every intermediate the backward needs.
/// Matches `dmsa_forward_strided` exactly.
pub fn dmsa_forward_cached<T: Element>(
    x: &Tensor<T>,
    cfg: &DmsaConfig,
    params: &DmsaParams<T>,
    stride: usize,
) -> Result<(Tensor<T>, DmsaCache<T>)> {
    let parts = multi_scale_extract_strided(x, cfg, params, stride)?;
    let a = fuse_splits(&parts)?;
    let (e1, channel) = channel_branch_cached(&a, params.channel.beta.item())?;
    let (a_att, gate) = gated_attention_input_cached(&a, cfg, &params.gate)?;
    let (e2, spatial) = spatial_mix_cached(&a, &a_att, &params.spatial)?;
    let (y, agg) = aggregate_branches_cached(&e1, &e2, cfg, params)?;
    let out = channel_shuffle(&y, cfg.sa_groups)?;
    Ok((out, DmsaCache { a, channel, a_att, gate, spatial, e1, e2, agg }))
}

fn zeroed_params<T: Element>(params: &DmsaParams<T>) -> DmsaParams<T> {
    let mut g = params.clone();
    g.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v = T::zero();
        }
    });
    g
}

/// Full-block backward. Returns the input gradient and parameter grads in a
/// DmsaParams-shaped container (same visit order as the parameters).
pub fn dmsa_backward<T: Element>(
    x: &Tensor<T>,
    cfg: &DmsaConfig,
    params: &DmsaParams<T>,
    cache: &DmsaCache<T>,
    stride: usize,
    gy: &Tensor<T>,
) -> Result<(Tensor<T>, DmsaParams<T>)> {
    let mut grads = zeroed_params(params);
    // shuffle is a permutation; its adjoint is the inverse shuffle
    let c = cfg.channels;
    let gy_pre = channel_shuffle(gy, c / cfg.sa_groups)?;
    let (ge1, ge2, agg_grads) =
        aggregate_branches_backward(&cache.e1, &cache.e2, params, &cache.agg, &gy_pre)?;
    grads.agg = agg_grads;
    let (ga1, dbeta) =
        channel_branch_backward(&cache.a, params.channel.beta.item(), &cache.channel, &ge1)?;
    grads.channel.beta = Tensor::scalar(dbeta);
    let (ga2, g_att, spatial_grads) =
        spatial_mix_backward(&cache.a_att, &params.spatial, &cache.spatial, &ge2)?;
    grads.spatial = spatial_grads;
    let (ga3, gate_grads) =
        gated_attention_input_backward(cfg, &params.gate, &cache.gate, &g_att)?;
    grads.gate = gate_grads;
    let ga = add(&add(&ga1, &ga2)?, &ga3)?;
    // fusion was a concat of the extracted splits
    let gparts = split(&ga, cfg.splits, Axis::Channel.index())?;
    let xparts = split(x, cfg.splits, Axis::Channel.index())?;
    let mut gx_parts = Vec::with_capacity(cfg.splits);
    for i in 0..cfg.splits {
        let k = cfg.kernel_schedule[i];
        let (gxp, gwp, _) = conv2d_backward(
            &xparts[i],
            &params.extract[i],
            stride,
            (k - 1) / 2,
            cfg.conv_groups_schedule[i],
            &gparts[i],
        )?;
        grads.extract[i] = gwp;
        gx_parts.push(gxp);
    }
    let refs: Vec<&Tensor<T>> = gx_parts.iter().collect();
    let gx = concat(&refs, Axis::Channel.index())?;
    Ok((gx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dmsa::{apply_ablation, AblationVariant, DmsaConfig};
    use crate::init::seeded_rng;
    use crate::ops::{fully_connected, global_avg_pool, matmul, softmax};
    use crate::testutil::seeded_tensor;

    /// Central-difference gradient of a scalar function of one tensor.
    fn numeric<F>(x: &mut Tensor<f64>, f: &mut F, h: f64) -> Tensor<f64>
    where
        F: FnMut(&Tensor<f64>) -> f64,
    {
        let mut g = Tensor::zeros(x.dims());
        for i in 0..x.numel() {
            let v = x.data()[i];
            x.data_mut()[i] = v + h;
            let fp = f(x);
            x.data_mut()[i] = v - h;
            let fm = f(x);
            x.data_mut()[i] = v;
            g.data_mut()[i] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn max_rel(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-8))
            .fold(0.0, f64::max)
    }

    #[test]
    fn relu_subgradient_example() {
        let x = Tensor::from_vec(&[2], vec![-1.0f64, 2.0]).unwrap();
        let gy = Tensor::from_vec(&[2], vec![1.0, 1.0]).unwrap();
        let gx = relu_backward(&x, &gy).unwrap();
        assert_eq!(gx.data(), &[0.0, 1.0]);
        // the kink itself takes the zero branch
        let x0 = Tensor::from_vec(&[1], vec![0.0f64]).unwrap();
        let g0 = relu_backward(&x0, &Tensor::from_vec(&[1], vec![5.0]).unwrap()).unwrap();
        assert_eq!(g0.data(), &[0.0]);
    }

    #[test]
    fn softmax_backward_matches_numeric_on_length_5() {
        let mut x = seeded_tensor::<f64>(&[1, 5], 1);
        let u = seeded_tensor::<f64>(&[1, 5], 2);
        let y = softmax(&x, 1).unwrap();
        let ga = softmax_backward(&y, &u, 1).unwrap();
        let gn = numeric(&mut x, &mut |t| {
            let s = softmax(t, 1).unwrap();
            s.data().iter().zip(u.data()).map(|(&a, &b)| a * b).sum()
        }, 1e-6);
        assert!(max_rel(&ga, &gn) < 1e-6, "rel {}", max_rel(&ga, &gn));
    }

    #[test]
    fn matmul_backward_matches_numeric() {
        let mut a = seeded_tensor::<f64>(&[3, 4], 3);
        let b = seeded_tensor::<f64>(&[4, 2], 4);
        let u = seeded_tensor::<f64>(&[3, 2], 5);
        let (ga, gb) = matmul_backward(&a, &b, &u).unwrap();
        let gn = numeric(&mut a, &mut |t| {
            let y = matmul(t, &b).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-6);
        assert!(max_rel(&ga, &gn) < 1e-7);
        let mut bb = b.clone();
        let gnb = numeric(&mut bb, &mut |t| {
            let y = matmul(&a, t).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-6);
        assert!(max_rel(&gb, &gnb) < 1e-7);
    }

    #[test]
    fn conv_backward_matches_numeric_grouped_strided() {
        let mut x = seeded_tensor::<f64>(&[2, 4, 5, 5], 6);
        let w = seeded_tensor::<f64>(&[6, 2, 3, 3], 7);
        let u = seeded_tensor::<f64>(&[2, 6, 3, 3], 8);
        let (gx, gw, _) = conv2d_backward(&x, &w, 2, 1, 2, &u).unwrap();
        let gn = numeric(&mut x, &mut |t| {
            let y = conv2d(t, &w, None, 2, 1, 2).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-5);
        assert!(max_rel(&gx, &gn) < 1e-7, "gx rel {}", max_rel(&gx, &gn));
        let mut ww = w.clone();
        let gnw = numeric(&mut ww, &mut |t| {
            let y = conv2d(&x, t, None, 2, 1, 2).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-5);
        assert!(max_rel(&gw, &gnw) < 1e-7, "gw rel {}", max_rel(&gw, &gnw));
    }

    #[test]
    fn conv_bias_gradient_is_output_sum() {
        let x = seeded_tensor::<f64>(&[2, 3, 4, 4], 9);
        let w = seeded_tensor::<f64>(&[5, 3, 1, 1], 10);
        let u = seeded_tensor::<f64>(&[2, 5, 4, 4], 11);
        let (_, _, gb) = conv2d_backward(&x, &w, 1, 0, 1, &u).unwrap();
        for oc in 0..5 {
            let mut s = 0.0;
            for n in 0..2 {
                for h in 0..4 {
                    for wv in 0..4 {
                        s += u.at4(n, oc, h, wv);
                    }
                }
            }
            assert!((gb.data()[oc] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn group_norm_backward_matches_numeric() {
        let mut x = seeded_tensor::<f64>(&[2, 4, 3, 3], 12);
        let gamma = seeded_tensor::<f64>(&[4], 13);
        let u = seeded_tensor::<f64>(&[2, 4, 3, 3], 14);
        let eps = 1e-5;
        let beta = Tensor::zeros(&[4]);
        let (gx, dgamma, dbeta) = group_norm_backward(&x, 2, &gamma, eps, &u).unwrap();
        let gn = numeric(&mut x, &mut |t| {
            let y = group_norm(t, 2, &gamma, &beta, eps).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-5);
        assert!(max_rel(&gx, &gn) < 1e-6, "gx rel {}", max_rel(&gx, &gn));
        let mut gg = gamma.clone();
        let gng = numeric(&mut gg, &mut |t| {
            let y = group_norm(&x, 2, t, &beta, eps).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-5);
        assert!(max_rel(&dgamma, &gng) < 1e-7);
        let mut bb = beta.clone();
        let gnb = numeric(&mut bb, &mut |t| {
            let y = group_norm(&x, 2, &gamma, t, eps).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-5);
        assert!(max_rel(&dbeta, &gnb) < 1e-8);
    }

    #[test]
    fn se_backward_matches_numeric_on_weights() {
        let x = seeded_tensor::<f64>(&[2, 8, 3, 3], 15);
        let se = SeDescriptorParams::<f64>::init(8, 4, &mut seeded_rng(16)).unwrap();
        let u = seeded_tensor::<f64>(&[2, 8], 17);
        let (_, cache) = se_weight_cached(&x, &se).unwrap();
        let (gx, dw0, dw1) = se_weight_backward(x.dims(), &se, &cache, &u).unwrap();
        let objective = |xe: &Tensor<f64>, p: &SeDescriptorParams<f64>| -> f64 {
            let w = crate::attention::se_weight(xe, p).unwrap();
            w.data().iter().zip(u.data()).map(|(&a, &b)| a * b).sum()
        };
        let mut xm = x.clone();
        let gn = numeric(&mut xm, &mut |t| objective(t, &se), 1e-5);
        assert!(max_rel(&gx, &gn) < 1e-6);
        let mut w0m = se.w0.clone();
        let gnw0 = numeric(&mut w0m, &mut |t| {
            let p = SeDescriptorParams { w0: t.clone(), w1: se.w1.clone(), reduction: se.reduction };
            objective(&x, &p)
        }, 1e-5);
        assert!(max_rel(&dw0, &gnw0) < 1e-6);
        let mut w1m = se.w1.clone();
        let gnw1 = numeric(&mut w1m, &mut |t| {
            let p = SeDescriptorParams { w0: se.w0.clone(), w1: t.clone(), reduction: se.reduction };
            objective(&x, &p)
        }, 1e-5);
        assert!(max_rel(&dw1, &gnw1) < 1e-6);
    }

    #[test]
    fn channel_branch_backward_matches_numeric() {
        let mut a = seeded_tensor::<f64>(&[1, 4, 3, 3], 18);
        let u = seeded_tensor::<f64>(&[1, 4, 3, 3], 19);
        let beta = 0.7;
        let (_, cache) = channel_branch_cached(&a, beta).unwrap();
        let (ga, dbeta) = channel_branch_backward(&a, beta, &cache, &u).unwrap();
        let gn = numeric(&mut a, &mut |t| {
            let (y, _) = channel_branch_cached(t, beta).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-5);
        assert!(max_rel(&ga, &gn) < 1e-6, "rel {}", max_rel(&ga, &gn));
        let h = 1e-6;
        let fp: f64 = {
            let (y, _) = channel_branch_cached(&a, beta + h).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        };
        let fm: f64 = {
            let (y, _) = channel_branch_cached(&a, beta - h).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        };
        let nb = (fp - fm) / (2.0 * h);
        assert!((dbeta - nb).abs() / nb.abs().max(1e-8) < 1e-5);
    }

    #[test]
    fn spatial_backward_matches_numeric_on_inputs() {
        let a_res = seeded_tensor::<f64>(&[1, 4, 3, 3], 20);
        let mut a_att = seeded_tensor::<f64>(&[1, 4, 3, 3], 21);
        let mut p = SpatialBranchParams::<f64>::init(4, &mut seeded_rng(22));
        p.alpha = Tensor::scalar(0.5);
        let u = seeded_tensor::<f64>(&[1, 4, 3, 3], 23);
        let (_, cache) = spatial_mix_cached(&a_res, &a_att, &p).unwrap();
        let (ga_res, ga_att, grads) = spatial_mix_backward(&a_att, &p, &cache, &u).unwrap();
        assert_eq!(ga_res, u);
        let gn = numeric(&mut a_att, &mut |t| {
            let (y, _) = spatial_mix_cached(&a_res, t, &p).unwrap();
            y.data().iter().zip(u.data()).map(|(&x, &q)| x * q).sum()
        }, 1e-5);
        assert!(max_rel(&ga_att, &gn) < 1e-6, "rel {}", max_rel(&ga_att, &gn));
        let mut wbm = p.wb.clone();
        let gnwb = numeric(&mut wbm, &mut |t| {
            let mut pp = p.clone();
            pp.wb = t.clone();
            let (y, _) = spatial_mix_cached(&a_res, &a_att, &pp).unwrap();
            y.data().iter().zip(u.data()).map(|(&x, &q)| x * q).sum()
        }, 1e-5);
        assert!(max_rel(&grads.wb, &gnwb) < 1e-6);
    }

    #[test]
    fn full_block_backward_matches_numeric_spot_checks() {
        let cfg = DmsaConfig::with_splits(16, 2, 2, 4).unwrap();
        let params: DmsaParams<f64> = DmsaParams::init(&cfg, &mut seeded_rng(24)).unwrap();
        let mut x = seeded_tensor::<f64>(&[1, 16, 4, 4], 25);
        let u = seeded_tensor::<f64>(&[1, 16, 4, 4], 26);
        let (_, cache) = dmsa_forward_cached(&x, &cfg, &params, 1).unwrap();
        let (gx, grads) = dmsa_backward(&x, &cfg, &params, &cache, 1, &u).unwrap();
        let gn = numeric(&mut x, &mut |t| {
            let (y, _) = dmsa_forward_cached(t, &cfg, &params, 1).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-5);
        assert!(max_rel(&gx, &gn) < 1e-5, "input rel {}", max_rel(&gx, &gn));
        // spot-check one parameter tensor per component numerically
        let mut w0m = params.extract[0].clone();
        let gnw = numeric(&mut w0m, &mut |t| {
            let mut pp = params.clone();
            pp.extract[0] = t.clone();
            let (y, _) = dmsa_forward_cached(&x, &cfg, &pp, 1).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-5);
        assert!(max_rel(&grads.extract[0], &gnw) < 1e-5);
    }

    #[test]
    fn ablation_variants_backward_stays_consistent_with_numeric_input_grad() {
        let base = DmsaConfig::with_splits(8, 2, 2, 4).unwrap();
        for variant in AblationVariant::ALL {
            let cfg = apply_ablation(&base, variant);
            let params: DmsaParams<f64> = DmsaParams::init(&cfg, &mut seeded_rng(27)).unwrap();
            let mut x = seeded_tensor::<f64>(&[1, 8, 3, 3], 28);
            let u = seeded_tensor::<f64>(&[1, 8, 3, 3], 29);
            let (_, cache) = dmsa_forward_cached(&x, &cfg, &params, 1).unwrap();
            let (gx, _) = dmsa_backward(&x, &cfg, &params, &cache, 1, &u).unwrap();
            let gn = numeric(&mut x, &mut |t| {
                let (y, _) = dmsa_forward_cached(t, &cfg, &params, 1).unwrap();
                y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
            }, 1e-5);
            assert!(
                max_rel(&gx, &gn) < 1e-5,
                "variant {} rel {}",
                variant.name(),
                max_rel(&gx, &gn)
            );
        }
    }

    #[test]
    fn cached_forward_equals_plain_forward() {
        let cfg = DmsaConfig::with_splits(16, 4, 2, 4).unwrap();
        let params: DmsaParams<f64> = DmsaParams::init(&cfg, &mut seeded_rng(30)).unwrap();
        let x = seeded_tensor::<f64>(&[2, 16, 5, 5], 31);
        let plain = crate::dmsa::dmsa_forward(&x, &cfg, &params).unwrap();
        let (cached, _) = dmsa_forward_cached(&x, &cfg, &params, 1).unwrap();
        assert_eq!(plain, cached);
    }

    #[test]
    fn fc_and_pool_backwards_match_numeric() {
        let mut x = seeded_tensor::<f64>(&[3, 6], 32);
        let w = seeded_tensor::<f64>(&[6, 4], 33);
        let b = seeded_tensor::<f64>(&[4], 34);
        let u = seeded_tensor::<f64>(&[3, 4], 35);
        let (gx, gw, gb) = fully_connected_backward(&x, &w, &u).unwrap();
        let gn = numeric(&mut x, &mut |t| {
            let y = fully_connected(t, &w, &b).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-6);
        assert!(max_rel(&gx, &gn) < 1e-7);
        let mut wm = w.clone();
        let gnw = numeric(&mut wm, &mut |t| {
            let y = fully_connected(&x, t, &b).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-6);
        assert!(max_rel(&gw, &gnw) < 1e-7);
        let mut bm = b.clone();
        let gnb = numeric(&mut bm, &mut |t| {
            let y = fully_connected(&x, &w, t).unwrap();
            y.data().iter().zip(u.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-6);
        assert!(max_rel(&gb, &gnb) < 1e-8);

        let xp = seeded_tensor::<f64>(&[2, 3, 4, 4], 36);
        let up = seeded_tensor::<f64>(&[2, 3], 37);
        let gp = global_avg_pool_backward(xp.dims(), &up).unwrap();
        let mut xm = xp.clone();
        let gnp = numeric(&mut xm, &mut |t| {
            let y = global_avg_pool(t).unwrap();
            y.data().iter().zip(up.data()).map(|(&p, &q)| p * q).sum()
        }, 1e-6);
        assert!(max_rel(&gp, &gnp) < 1e-6);
    }
}
