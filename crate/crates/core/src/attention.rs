//! The two attention branches (channel and spatial/position), the SE channel
//! descriptor, feature grouping, and channel shuffle.
//!
//! Shape conventions: attention logits between channels j and i are the dot
//! products of their flattened spatial rows; softmax always normalizes over
//! the summed index i, so every mixed output is a convex combination. Both
//! branch scale parameters start at zero, which makes each branch begin as
//! the identity.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::kaiming_normal;
use crate::ops::{
    add_channel, conv2d, global_avg_pool, instance_norm, matmul_abt_into, matmul_atb_into,
    matmul_into, mul, mul_channel, relu, row_softmax_inplace, sigmoid, split,
};
use crate::scalar::Element;
use crate::tensor::{Axis, Tensor};
use crate::NORM_EPS;

/// Squeeze-and-excitation descriptor: sigmoid(W1 relu(W0 GAP(x))).
#[derive(Clone, Debug)]
pub struct SeDescriptorParams<T: Element> {
    /// [C/r, C]
    pub w0: Tensor<T>,
    /// [C, C/r]
    pub w1: Tensor<T>,
    pub reduction: usize,
}

impl<T: Element> SeDescriptorParams<T> {
    pub fn init(channels: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if reduction == 0 || channels % reduction != 0 {
            return Err(Error::InvalidConfig(format!(
                "reduction {reduction} must divide channels {channels}"
            )));
        }
        let cr = channels / reduction;
        Ok(SeDescriptorParams {
            w0: kaiming_normal(&[cr, channels], channels, rng),
            w1: kaiming_normal(&[channels, cr], cr, rng),
            reduction,
        })
    }

    fn validate(&self, channels: usize) -> Result<usize> {
        let cr = channels / self.reduction;
        if self.reduction == 0
            || channels % self.reduction != 0
            || self.w0.dims() != [cr, channels]
            || self.w1.dims() != [channels, cr]
        {
            return Err(Error::ShapeMismatch(format!(
                "SE descriptor shaped {:?}/{:?} does not fit {channels} channels at reduction {}",
                self.w0.dims(),
                self.w1.dims(),
                self.reduction
            )));
        }
        Ok(cr)
    }
}

/// Parameters of the spatial (position) attention branch: three 1x1
/// projections producing B, C, D, and the residual scale alpha.
#[derive(Clone, Debug)]
pub struct SpatialBranchParams<T: Element> {
    /// [C, C, 1, 1]
    pub wb: Tensor<T>,
    /// [C, C, 1, 1]
    pub wc: Tensor<T>,
    /// [C, C, 1, 1]
    pub wd: Tensor<T>,
    /// Scalar, initialized 0 so the branch starts as the identity.
    pub alpha: Tensor<T>,
}

impl<T: Element> SpatialBranchParams<T> {
    pub fn init(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let dims = [channels, channels, 1, 1];
        SpatialBranchParams {
            wb: kaiming_normal(&dims, channels, rng),
            wc: kaiming_normal(&dims, channels, rng),
            wd: kaiming_normal(&dims, channels, rng),
            alpha: Tensor::scalar(T::zero()),
        }
    }
}

/// Parameters of the channel attention branch; the map itself is
/// parameter-free.
#[derive(Clone, Debug)]
pub struct ChannelBranchParams<T: Element> {
    /// Scalar, initialized 0 so the branch starts as the identity.
    pub beta: Tensor<T>,
}

impl<T: Element> ChannelBranchParams<T> {
    pub fn init() -> Self {
        ChannelBranchParams { beta: Tensor::scalar(T::zero()) }
    }
}

/// Per-channel affine gate over instance-normalized spatial statistics,
/// shared across all feature groups; channel extent is C/(2G).
#[derive(Clone, Debug)]
pub struct SaUnitParams<T: Element> {
    /// [C/(2G), 1, 1]
    pub w2: Tensor<T>,
    /// [C/(2G), 1, 1]
    pub b2: Tensor<T>,
    /// [C/(2G)]
    pub in_gamma: Tensor<T>,
    /// [C/(2G)]
    pub in_beta: Tensor<T>,
}

impl<T: Element> SaUnitParams<T> {
    pub fn init(half_group_channels: usize) -> Self {
        let cp = half_group_channels;
        SaUnitParams {
            w2: Tensor::zeros(&[cp, 1, 1]),
            b2: Tensor::zeros(&[cp, 1, 1]),
            in_gamma: Tensor::ones(&[cp]),
            in_beta: Tensor::zeros(&[cp]),
        }
    }
}

fn require_rank4<T: Element>(x: &Tensor<T>, who: &str) -> Result<(usize, usize, usize, usize)> {
    if x.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "{who} wants rank-4 input, got {:?}",
            x.dims()
        )));
    }
    Ok((x.dims()[0], x.dims()[1], x.dims()[2], x.dims()[3]))
}

/// Splits x into G channel-contiguous groups; concatenating them back in
/// order restores x bit-exactly.
pub fn group_features<T: Element>(x: &Tensor<T>, groups: usize) -> Result<Vec<Tensor<T>>> {
    require_rank4(x, "group_features")?;
    split(x, groups, Axis::Channel.index())
}

/// Splits one group's channels into its two halves (Xk1, Xk2).
pub fn split_subfeature<T: Element>(xk: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c, _, _) = require_rank4(xk, "split_subfeature")?;
    if c % 2 != 0 {
        return Err(Error::InvalidGroups(format!(
            "cannot halve odd channel count {c}"
        )));
    }
    let mut halves = split(xk, 2, Axis::Channel.index())?;
    let second = halves.pop().expect("split returned two parts");
    let first = halves.pop().expect("split returned two parts");
    Ok((first, second))
}

/// Per-sample channel weights in (0,1): sigmoid(W1 relu(W0 GAP(x))).
pub fn se_weight<T: Element>(x: &Tensor<T>, p: &SeDescriptorParams<T>) -> Result<Tensor<T>> {
    let (n, c, _, _) = require_rank4(x, "se_weight")?;
    let cr = p.validate(c)?;
    let pooled = global_avg_pool(x)?.reshape(&[n, c])?;
    let mut u = Tensor::zeros(&[n, cr]);
    matmul_abt_into(pooled.data(), p.w0.data(), u.data_mut(), n, c, cr);
    let h = relu(&u);
    let mut v = Tensor::zeros(&[n, c]);
    matmul_abt_into(h.data(), p.w1.data(), v.data_mut(), n, cr, c);
    sigmoid(&v).reshape(&[n, c, 1, 1])
}

/// Channel attention map: entry [n, j, i] = softmax over i of (A_j . A_i)
/// with A flattened to [C, H*W]; each row is a distribution over i.
pub fn channel_attention_map<T: Element>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = require_rank4(a, "channel_attention_map")?;
    let hw = h * w;
    let mut out = Tensor::zeros(&[n, c, c]);
    for ni in 0..n {
        let ar = &a.data()[ni * c * hw..(ni + 1) * c * hw];
        let m = &mut out.data_mut()[ni * c * c..(ni + 1) * c * c];
        matmul_abt_into(ar, ar, m, c, hw, c);
        row_softmax_inplace(m, c, c);
    }
    Ok(out)
}

/// Channel branch: E1_j = beta * sum_i map[j,i] A_i + A_j. With beta = 0 the
/// output is the input.
pub fn channel_branch<T: Element>(
    a: &Tensor<T>,
    p: &ChannelBranchParams<T>,
) -> Result<Tensor<T>> {
    let map = channel_attention_map(a)?;
    channel_branch_from_map(a, &map, p.beta.item())
}

pub(crate) fn channel_branch_from_map<T: Element>(
    a: &Tensor<T>,
    map: &Tensor<T>,
    beta: T,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = require_rank4(a, "channel_branch")?;
    let hw = h * w;
    if map.dims() != [n, c, c] {
        return Err(Error::ShapeMismatch(format!(
            "channel map {:?}, want [{n},{c},{c}]",
            map.dims()
        )));
    }
    let mut out = a.clone();
    let mut mixed = vec![T::zero(); c * hw];
    for ni in 0..n {
        for v in mixed.iter_mut() {
            *v = T::zero();
        }
        let m = &map.data()[ni * c * c..(ni + 1) * c * c];
        let ar = &a.data()[ni * c * hw..(ni + 1) * c * hw];
        matmul_into(m, ar, &mut mixed, c, c, hw, 1);
        let dst = &mut out.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        for (o, &mv) in dst.iter_mut().zip(mixed.iter()) {
            *o = *o + beta * mv;
        }
    }
    Ok(out)
}

/// Spatial attention map: entry [n, j, i] = softmax over i of (B_i . C_j)
/// where B, C are 1x1 projections of the input flattened to [C, H*W]; each
/// row is a distribution over source positions i.
pub fn spatial_attention_map<T: Element>(
    a: &Tensor<T>,
    p: &SpatialBranchParams<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = require_rank4(a, "spatial_attention_map")?;
    let hw = h * w;
    let b = conv2d(a, &p.wb, None, 1, 0, 1)?;
    let cm = conv2d(a, &p.wc, None, 1, 0, 1)?;
    let mut out = Tensor::zeros(&[n, hw, hw]);
    for ni in 0..n {
        let br = &b.data()[ni * c * hw..(ni + 1) * c * hw];
        let cr = &cm.data()[ni * c * hw..(ni + 1) * c * hw];
        let s = &mut out.data_mut()[ni * hw * hw..(ni + 1) * hw * hw];
        // logits[j, i] = sum_ch C[ch, j] * B[ch, i]
        matmul_atb_into(cr, br, s, c, hw, hw);
        row_softmax_inplace(s, hw, hw);
    }
    Ok(out)
}

/// Spatial branch: E2 = alpha * (D . S^T) + A with D a 1x1 projection of A.
/// With alpha = 0 the output is the input.
pub fn spatial_branch<T: Element>(
    a: &Tensor<T>,
    p: &SpatialBranchParams<T>,
) -> Result<Tensor<T>> {
    spatial_mix(a, a, p)
}

/// Shared core of the spatial branch: `a_att` drives the B/C/D projections
/// and the attention map, `a_res` is the residual input added back. The
/// block-level forward feeds the gated map as `a_att` while keeping the raw
/// fused features as the residual.
pub(crate) fn spatial_mix<T: Element>(
    a_res: &Tensor<T>,
    a_att: &Tensor<T>,
    p: &SpatialBranchParams<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = require_rank4(a_res, "spatial_branch")?;
    if a_att.dims() != a_res.dims() {
        return Err(Error::ShapeMismatch(format!(
            "attention input {:?} vs residual {:?}",
            a_att.dims(),
            a_res.dims()
        )));
    }
    let hw = h * w;
    let s = spatial_attention_map(a_att, p)?;
    let d = conv2d(a_att, &p.wd, None, 1, 0, 1)?;
    let alpha = p.alpha.item();
    let mut out = a_res.clone();
    let mut mixed = vec![T::zero(); c * hw];
    for ni in 0..n {
        let dr = &d.data()[ni * c * hw..(ni + 1) * c * hw];
        let sn = &s.data()[ni * hw * hw..(ni + 1) * hw * hw];
        // mixed[ch, j] = sum_i D[ch, i] * S[j, i]
        matmul_abt_into(dr, sn, &mut mixed, c, hw, hw);
        let dst = &mut out.data_mut()[ni * c * hw..(ni + 1) * c * hw];
        for (o, &mv) in dst.iter_mut().zip(mixed.iter()) {
            *o = *o + alpha * mv;
        }
    }
    Ok(out)
}

/// F_c enhancement gate on one Xk2 half: sigmoid(w2 * IN(x) + b2) * x with
/// w2, b2 broadcast over space.
pub fn sa_spatial_unit<T: Element>(xk2: &Tensor<T>, p: &SaUnitParams<T>) -> Result<Tensor<T>> {
    let (_, c, _, _) = require_rank4(xk2, "sa_spatial_unit")?;
    if p.w2.numel() != c || p.b2.numel() != c || p.in_gamma.numel() != c || p.in_beta.numel() != c
    {
        return Err(Error::ShapeMismatch(format!(
            "gate parameters sized for {} channels, input has {c}",
            p.w2.numel()
        )));
    }
    let t = instance_norm(xk2, &p.in_gamma, &p.in_beta, T::from_f64(NORM_EPS))?;
    let z = add_channel(&mul_channel(&t, &p.w2)?, &p.b2)?;
    mul(&sigmoid(&z), xk2)
}

/// Fixed channel permutation: view channels as [G, C/G], transpose, flatten.
/// Pixel data within each channel is untouched; shuffling twice with G and
/// C/G restores the original order.
pub fn channel_shuffle<T: Element>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = require_rank4(x, "channel_shuffle")?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidGroups(format!(
            "channel_shuffle groups {groups} must divide channels {c}"
        )));
    }
    let cg = c / groups;
    let plane = h * w;
    let mut out = Tensor::zeros(x.dims());
    for ni in 0..n {
        for ci in 0..c {
            let (g, m) = (ci / cg, ci % cg);
            let co = m * groups + g;
            let src = &x.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            out.data_mut()[(ni * c + co) * plane..(ni * c + co + 1) * plane]
                .copy_from_slice(src);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::seeded_rng;
    use crate::ops::{concat, sigmoid_scalar};
    use crate::testutil::seeded_tensor;

    #[test]
    fn group_features_slices_and_restores() {
        let x = seeded_tensor::<f64>(&[2, 4, 3, 3], 1);
        let gs = group_features(&x, 2).unwrap();
        assert_eq!(gs.len(), 2);
        assert_eq!(gs[0].dims(), &[2, 2, 3, 3]);
        for c in 0..2 {
            for h in 0..3 {
                assert_eq!(gs[1].at4(0, c, h, 0), x.at4(0, 2 + c, h, 0));
            }
        }
        let refs: Vec<&Tensor<f64>> = gs.iter().collect();
        assert_eq!(concat(&refs, 1).unwrap(), x);

        let single = group_features(&x, 1).unwrap();
        assert_eq!(single[0], x);
        let per_channel = group_features(&x, 4).unwrap();
        assert_eq!(per_channel.len(), 4);
        let refs: Vec<&Tensor<f64>> = per_channel.iter().collect();
        assert_eq!(concat(&refs, 1).unwrap(), x);
    }

    #[test]
    fn split_subfeature_halves_channels() {
        let x = seeded_tensor::<f64>(&[1, 4, 2, 2], 2);
        let (a, b) = split_subfeature(&x).unwrap();
        assert_eq!(a.dims(), &[1, 2, 2, 2]);
        assert_eq!(concat(&[&a, &b], 1).unwrap(), x);
        let odd = seeded_tensor::<f64>(&[1, 3, 2, 2], 3);
        assert!(split_subfeature(&odd).is_err());
        let two = seeded_tensor::<f64>(&[1, 2, 2, 2], 4);
        let (a, b) = split_subfeature(&two).unwrap();
        assert_eq!(a.dims(), &[1, 1, 2, 2]);
        assert_eq!(b.dims(), &[1, 1, 2, 2]);
    }

    #[test]
    fn se_weight_is_half_with_zero_weights() {
        let x = seeded_tensor::<f64>(&[2, 8, 3, 3], 5);
        let p = SeDescriptorParams {
            w0: Tensor::zeros(&[2, 8]),
            w1: Tensor::zeros(&[8, 2]),
            reduction: 4,
        };
        let y = se_weight(&x, &p).unwrap();
        for &v in y.data() {
            assert_eq!(v, 0.5);
        }
    }

    #[test]
    fn se_weight_stays_in_open_unit_interval() {
        let x = seeded_tensor::<f64>(&[2, 8, 4, 4], 6);
        let p = SeDescriptorParams::init(8, 4, &mut seeded_rng(7)).unwrap();
        let y = se_weight(&x, &p).unwrap();
        for &v in y.data() {
            assert!(v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn se_weight_matches_two_matmul_oracle() {
        let x = seeded_tensor::<f64>(&[2, 8, 4, 4], 8);
        let p = SeDescriptorParams::init(8, 4, &mut seeded_rng(9)).unwrap();
        let y = se_weight(&x, &p).unwrap();
        for n in 0..2 {
            let mut s = [0.0f64; 8];
            for (c, sv) in s.iter_mut().enumerate() {
                for h in 0..4 {
                    for w in 0..4 {
                        *sv += x.at4(n, c, h, w);
                    }
                }
                *sv /= 16.0;
            }
            for c in 0..8 {
                let mut v = 0.0;
                for q in 0..2 {
                    let mut u = 0.0;
                    for i in 0..8 {
                        u += p.w0.at(&[q, i]) * s[i];
                    }
                    v += p.w1.at(&[c, q]) * u.max(0.0);
                }
                let want = 1.0 / (1.0 + (-v).exp());
                assert!((y.at4(n, c, 0, 0) - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn channel_map_uniform_when_channels_identical() {
        let plane = seeded_tensor::<f64>(&[1, 1, 3, 3], 10);
        let x = concat(&[&plane, &plane, &plane], 1).unwrap();
        let m = channel_attention_map(&x).unwrap();
        for &v in m.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_map_single_channel_is_one() {
        let x = seeded_tensor::<f64>(&[1, 1, 2, 2], 11);
        let m = channel_attention_map(&x).unwrap();
        assert_eq!(m.dims(), &[1, 1, 1]);
        assert!((m.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn channel_map_matches_loop_oracle() {
        let x = seeded_tensor::<f64>(&[1, 3, 2, 2], 12);
        let m = channel_attention_map(&x).unwrap();
        for j in 0..3 {
            let mut logits = [0.0f64; 3];
            for (i, li) in logits.iter_mut().enumerate() {
                for h in 0..2 {
                    for w in 0..2 {
                        *li += x.at4(0, j, h, w) * x.at4(0, i, h, w);
                    }
                }
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            let mut row_sum = 0.0;
            for i in 0..3 {
                let want = (logits[i] - mx).exp() / z;
                let got = m.at(&[0, j, i]);
                assert!((got - want).abs() < 1e-6);
                row_sum += got;
            }
            assert!((row_sum - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_branch_zero_beta_is_identity() {
        let x = seeded_tensor::<f64>(&[2, 3, 2, 2], 13);
        let p = ChannelBranchParams::init();
        assert_eq!(channel_branch(&x, &p).unwrap(), x);
    }

    #[test]
    fn channel_branch_doubles_identical_channels() {
        let plane = seeded_tensor::<f64>(&[1, 1, 3, 3], 14);
        let x = concat(&[&plane, &plane, &plane, &plane], 1).unwrap();
        let p = ChannelBranchParams { beta: Tensor::scalar(1.0) };
        let y = channel_branch(&x, &p).unwrap();
        let doubled = crate::ops::scale(&x, 2.0);
        assert!(y.max_abs_diff(&doubled) < 1e-9);
    }

    #[test]
    fn channel_branch_matches_loop_oracle() {
        let x = seeded_tensor::<f64>(&[1, 3, 2, 2], 15);
        let p = ChannelBranchParams { beta: Tensor::scalar(0.7) };
        let y = channel_branch(&x, &p).unwrap();
        let m = channel_attention_map(&x).unwrap();
        for j in 0..3 {
            for h in 0..2 {
                for w in 0..2 {
                    let mut mixed = 0.0;
                    for i in 0..3 {
                        mixed += m.at(&[0, j, i]) * x.at4(0, i, h, w);
                    }
                    let want = 0.7 * mixed + x.at4(0, j, h, w);
                    assert!((y.at4(0, j, h, w) - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn channel_branch_keeps_constant_planes_constant() {
        // Spatially constant input stays spatially constant through the
        // channel mix.
        let mut x = Tensor::<f64>::zeros(&[1, 3, 4, 4]);
        for c in 0..3 {
            for h in 0..4 {
                for w in 0..4 {
                    x.set4(0, c, h, w, (c as f64) - 1.0);
                }
            }
        }
        let p = ChannelBranchParams { beta: Tensor::scalar(0.9) };
        let y = channel_branch(&x, &p).unwrap();
        for c in 0..3 {
            let v0 = y.at4(0, c, 0, 0);
            for h in 0..4 {
                for w in 0..4 {
                    assert!((y.at4(0, c, h, w) - v0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn spatial_map_uniform_with_zero_projection() {
        let x = seeded_tensor::<f64>(&[1, 2, 2, 2], 16);
        let mut p = SpatialBranchParams::init(2, &mut seeded_rng(17));
        p.wb = Tensor::zeros(&[2, 2, 1, 1]);
        let m = spatial_attention_map(&x, &p).unwrap();
        for &v in m.data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_map_single_position_is_one() {
        let x = seeded_tensor::<f64>(&[1, 3, 1, 1], 18);
        let p = SpatialBranchParams::init(3, &mut seeded_rng(19));
        let m = spatial_attention_map(&x, &p).unwrap();
        assert_eq!(m.dims(), &[1, 1, 1]);
        assert!((m.item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn spatial_map_matches_loop_oracle() {
        let x = seeded_tensor::<f64>(&[1, 2, 2, 2], 20);
        let p = SpatialBranchParams::init(2, &mut seeded_rng(21));
        let m = spatial_attention_map(&x, &p).unwrap();
        // 1x1 conv projections written out by hand
        let proj = |w: &Tensor<f64>, c_out: usize, pos: usize| -> f64 {
            let (h, wd) = (pos / 2, pos % 2);
            (0..2).map(|ci| w.at(&[c_out, ci, 0, 0]) * x.at4(0, ci, h, wd)).sum()
        };
        for j in 0..4 {
            let mut logits = [0.0f64; 4];
            for (i, li) in logits.iter_mut().enumerate() {
                for ch in 0..2 {
                    *li += proj(&p.wc, ch, j) * proj(&p.wb, ch, i);
                }
            }
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for i in 0..4 {
                let want = (logits[i] - mx).exp() / z;
                assert!((m.at(&[0, j, i]) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn spatial_branch_zero_alpha_is_identity() {
        let x = seeded_tensor::<f64>(&[2, 3, 3, 3], 22);
        let p = SpatialBranchParams::init(3, &mut seeded_rng(23));
        assert_eq!(spatial_branch(&x, &p).unwrap(), x);
    }

    #[test]
    fn spatial_branch_single_position_reduces_to_alpha_d_plus_a() {
        let x = seeded_tensor::<f64>(&[1, 3, 1, 1], 24);
        let mut p = SpatialBranchParams::init(3, &mut seeded_rng(25));
        p.alpha = Tensor::scalar(0.5);
        let y = spatial_branch(&x, &p).unwrap();
        let d = conv2d(&x, &p.wd, None, 1, 0, 1).unwrap();
        for c in 0..3 {
            let want = 0.5 * d.at4(0, c, 0, 0) + x.at4(0, c, 0, 0);
            assert!((y.at4(0, c, 0, 0) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn spatial_branch_matches_loop_oracle() {
        let x = seeded_tensor::<f64>(&[1, 2, 2, 2], 26);
        let mut p = SpatialBranchParams::init(2, &mut seeded_rng(27));
        p.alpha = Tensor::scalar(0.3);
        let y = spatial_branch(&x, &p).unwrap();
        let s = spatial_attention_map(&x, &p).unwrap();
        let d = conv2d(&x, &p.wd, None, 1, 0, 1).unwrap();
        for ch in 0..2 {
            for j in 0..4 {
                let mut mixed = 0.0;
                for i in 0..4 {
                    mixed += d.at4(0, ch, i / 2, i % 2) * s.at(&[0, j, i]);
                }
                let want = 0.3 * mixed + x.at4(0, ch, j / 2, j % 2);
                assert!((y.at4(0, ch, j / 2, j % 2) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn sa_unit_saturated_gate_passes_input() {
        let x = seeded_tensor::<f64>(&[1, 2, 3, 3], 28);
        let mut p = SaUnitParams::init(2);
        p.b2 = Tensor::filled(&[2, 1, 1], 40.0);
        let y = sa_spatial_unit(&x, &p).unwrap();
        assert!(y.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn sa_unit_zero_gate_halves_input() {
        let x = seeded_tensor::<f64>(&[1, 2, 3, 3], 29);
        let p = SaUnitParams::init(2);
        let y = sa_spatial_unit(&x, &p).unwrap();
        let half = crate::ops::scale(&x, 0.5);
        assert!(y.max_abs_diff(&half) < 1e-15);
    }

    #[test]
    fn sa_unit_matches_composed_oracle() {
        let x = seeded_tensor::<f64>(&[2, 3, 3, 3], 30);
        let mut rng = seeded_rng(31);
        let p = SaUnitParams {
            w2: crate::init::normal_tensor(&[3, 1, 1], 0.0, 1.0, &mut rng),
            b2: crate::init::normal_tensor(&[3, 1, 1], 0.0, 1.0, &mut rng),
            in_gamma: crate::init::normal_tensor(&[3], 1.0, 0.1, &mut rng),
            in_beta: crate::init::normal_tensor(&[3], 0.0, 0.1, &mut rng),
        };
        let y = sa_spatial_unit(&x, &p).unwrap();
        let t = instance_norm(&x, &p.in_gamma, &p.in_beta, 1e-5).unwrap();
        for n in 0..2 {
            for c in 0..3 {
                for h in 0..3 {
                    for w in 0..3 {
                        let z = p.w2.data()[c] * t.at4(n, c, h, w) + p.b2.data()[c];
                        let want = sigmoid_scalar(z) * x.at4(n, c, h, w);
                        assert!((y.at4(n, c, h, w) - want).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn shuffle_interleaves_two_groups() {
        let mut x = Tensor::<f64>::zeros(&[1, 4, 1, 1]);
        for c in 0..4 {
            x.set4(0, c, 0, 0, c as f64);
        }
        let y = channel_shuffle(&x, 2).unwrap();
        let order: Vec<f64> = (0..4).map(|c| y.at4(0, c, 0, 0)).collect();
        assert_eq!(order, vec![0.0, 2.0, 1.0, 3.0]);
    }

    #[test]
    fn shuffle_degenerate_groups_are_identity() {
        let x = seeded_tensor::<f64>(&[2, 6, 2, 2], 33);
        assert_eq!(channel_shuffle(&x, 1).unwrap(), x);
        assert_eq!(channel_shuffle(&x, 6).unwrap(), x);
    }

    #[test]
    fn shuffle_inverse_restores_input() {
        let x = seeded_tensor::<f64>(&[1, 12, 2, 2], 34);
        for g in [2usize, 3, 4, 6] {
            let y = channel_shuffle(&x, g).unwrap();
            let back = channel_shuffle(&y, 12 / g).unwrap();
            assert_eq!(back, x, "groups {g}");
        }
    }

    #[test]
    fn shuffle_is_a_permutation_of_planes() {
        let x = seeded_tensor::<f64>(&[1, 8, 3, 3], 35);
        let y = channel_shuffle(&x, 4).unwrap();
        let plane = 9;
        let mut seen = vec![false; 8];
        for ci in 0..8 {
            let src = &x.data()[ci * plane..(ci + 1) * plane];
            let found = (0..8).find(|&co| {
                !seen[co] && &y.data()[co * plane..(co + 1) * plane] == src
            });
            let co = found.expect("every source plane must appear exactly once");
            seen[co] = true;
        }
    }
}
