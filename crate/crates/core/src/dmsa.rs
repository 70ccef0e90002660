//! The full DMSA block: S-way multi-scale extraction, fusion, parallel
//! channel/spatial branches, softmax branch aggregation, and channel shuffle,
//! plus the ablation variants (normalization and F_c replacements).

use rand_chacha::ChaCha8Rng;

use crate::attention::{
    channel_branch, group_features, se_weight, spatial_mix, split_subfeature, ChannelBranchParams,
    SaUnitParams, SeDescriptorParams, SpatialBranchParams,
};
use crate::error::{Error, Result};
use crate::init::kaiming_normal;
use crate::ops::{
    add, add_channel, batch_norm_inference, concat, conv2d, group_norm, instance_norm, mul,
    mul_channel, mul_nc11, sigmoid, sigmoid_scalar, split,
};
use crate::scalar::Element;
use crate::tensor::{Axis, Tensor};
use crate::NORM_EPS;

pub use crate::attention::channel_shuffle;

/// Normalization applied inside the F_c gate (the Table-8 style ablations).
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NormVariant {
    Instance,
    Batch,
    Group,
    ShuffleNorm,
}

impl NormVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(NormVariant::Instance),
            "batch" => Ok(NormVariant::Batch),
            "group" => Ok(NormVariant::Group),
            "shuffle_norm" | "shuffle-norm" => Ok(NormVariant::ShuffleNorm),
            _ => Err(Error::UnknownVariant(format!("norm variant '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NormVariant::Instance => "instance",
            NormVariant::Batch => "batch",
            NormVariant::Group => "group",
            NormVariant::ShuffleNorm => "shuffle_norm",
        }
    }
}

/// Form of the F_c enhancement applied to each Xk2 half in the spatial path.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum FcVariant {
    /// Per-channel affine gate sigmoid(w2 * norm(x) + b2) * x.
    AffineGate,
    /// No enhancement; the attention input is the fused map itself.
    None,
    /// 1x1 convolution replacing the per-channel affine: sigmoid(conv(norm(x)) + b) * x.
    Conv1x1,
}

impl FcVariant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "affine_gate" => Ok(FcVariant::AffineGate),
            "none" => Ok(FcVariant::None),
            "conv1x1" => Ok(FcVariant::Conv1x1),
            _ => Err(Error::UnknownVariant(format!("fc variant '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FcVariant::AffineGate => "affine_gate",
            FcVariant::None => "none",
            FcVariant::Conv1x1 => "conv1x1",
        }
    }
}

/// How the two branch outputs are merged back to C channels.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum BranchAgg {
    /// SE descriptors per branch, 2-way softmax over the branch axis,
    /// weighted sum (the default).
    SoftmaxEq8,
    /// Channel concat to 2C followed by a learned 1x1 halving projection.
    ConcatHalve,
}

impl BranchAgg {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "softmax_eq8" => Ok(BranchAgg::SoftmaxEq8),
            "concat_halve" => Ok(BranchAgg::ConcatHalve),
            _ => Err(Error::UnknownVariant(format!("branch aggregation '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BranchAgg::SoftmaxEq8 => "softmax_eq8",
            BranchAgg::ConcatHalve => "concat_halve",
        }
    }
}

/// Named ablation variants.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum AblationVariant {
    Origin,
    WBn,
    WGn,
    WSn,
    WoFc,
    Conv1x1Fc,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Origin,
        AblationVariant::WBn,
        AblationVariant::WGn,
        AblationVariant::WSn,
        AblationVariant::WoFc,
        AblationVariant::Conv1x1Fc,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "origin" => Ok(AblationVariant::Origin),
            "w_bn" => Ok(AblationVariant::WBn),
            "w_gn" => Ok(AblationVariant::WGn),
            "w_sn" => Ok(AblationVariant::WSn),
            "wo_fc" => Ok(AblationVariant::WoFc),
            "conv1x1_fc" => Ok(AblationVariant::Conv1x1Fc),
            _ => Err(Error::UnknownVariant(format!("ablation '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Origin => "origin",
            AblationVariant::WBn => "w_bn",
            AblationVariant::WGn => "w_gn",
            AblationVariant::WSn => "w_sn",
            AblationVariant::WoFc => "wo_fc",
            AblationVariant::Conv1x1Fc => "conv1x1_fc",
        }
    }
}

/// Default kernel sizes for the first splits; more splits continue the odd
/// progression, fewer truncate it.
fn default_kernel_schedule(splits: usize) -> Vec<usize> {
    (0..splits).map(|i| 3 + 2 * i).collect()
}

/// Default conv groups per split, extended by doubling and clipped to a
/// divisor of the split width.
fn default_groups_schedule(splits: usize, split_width: usize) -> Vec<usize> {
    let base = [1usize, 1, 2, 4];
    (0..splits)
        .map(|i| {
            let g = if i < base.len() {
                base[i]
            } else {
                base[base.len() - 1] << (i + 1 - base.len())
            };
            gcd(g, split_width)
        })
        .collect()
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// All hyperparameters of one DMSA block.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct DmsaConfig {
    pub channels: usize,
    pub splits: usize,
    pub kernel_schedule: Vec<usize>,
    pub conv_groups_schedule: Vec<usize>,
    pub sa_groups: usize,
    pub reduction: usize,
    pub norm_variant: NormVariant,
    pub fc_variant: FcVariant,
    pub branch_agg: BranchAgg,
}

impl DmsaConfig {
    /// Default block configuration for a channel width: S=4 splits with the
    /// 3/5/7/9 kernel ladder, G=8 attention groups, reduction 16.
    pub fn new(channels: usize) -> Result<DmsaConfig> {
        DmsaConfig::with_splits(channels, 4, 8, 16)
    }

    /// Defaults with explicit structural counts; schedules are derived.
    pub fn with_splits(
        channels: usize,
        splits: usize,
        sa_groups: usize,
        reduction: usize,
    ) -> Result<DmsaConfig> {
        if splits == 0 || channels == 0 || channels % splits != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels {channels} must be divisible by splits {splits}"
            )));
        }
        let cfg = DmsaConfig {
            channels,
            splits,
            kernel_schedule: default_kernel_schedule(splits),
            conv_groups_schedule: default_groups_schedule(splits, channels / splits),
            sa_groups,
            reduction,
            norm_variant: NormVariant::Instance,
            fc_variant: FcVariant::AffineGate,
            branch_agg: BranchAgg::SoftmaxEq8,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn split_width(&self) -> usize {
        self.channels / self.splits
    }

    /// Channels of each gated Xk2 half: C / (2G).
    pub fn half_group_channels(&self) -> usize {
        self.channels / (2 * self.sa_groups)
    }

    /// Re-targets this configuration to a different channel width, keeping
    /// splits, groups, reduction and variant toggles; conv groups are
    /// clipped to divisors of the new split width.
    pub fn at_width(&self, channels: usize) -> Result<DmsaConfig> {
        let mut out = self.clone();
        out.channels = channels;
        if self.splits > 0 && channels % self.splits == 0 {
            let w = channels / self.splits;
            for g in &mut out.conv_groups_schedule {
                *g = gcd(*g, w);
            }
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.splits == 0 || self.channels % self.splits != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels {} must be divisible by splits {}",
                self.channels, self.splits
            )));
        }
        let w = self.split_width();
        if self.kernel_schedule.len() != self.splits {
            return Err(Error::InvalidConfig(format!(
                "kernel schedule {:?} must list {} entries",
                self.kernel_schedule, self.splits
            )));
        }
        for &k in &self.kernel_schedule {
            if k == 0 || k % 2 == 0 {
                return Err(Error::InvalidConfig(format!(
                    "kernel sizes must be odd, got {k}"
                )));
            }
        }
        if self.conv_groups_schedule.len() != self.splits {
            return Err(Error::InvalidConfig(format!(
                "conv groups schedule {:?} must list {} entries",
                self.conv_groups_schedule, self.splits
            )));
        }
        for &g in &self.conv_groups_schedule {
            if g == 0 || w % g != 0 {
                return Err(Error::InvalidConfig(format!(
                    "conv groups {g} must divide split width {w}"
                )));
            }
        }
        if self.sa_groups == 0 || self.channels % (2 * self.sa_groups) != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels {} must be divisible by 2 x sa_groups {}",
                self.channels, self.sa_groups
            )));
        }
        if self.reduction == 0 || self.channels % self.reduction != 0 {
            return Err(Error::InvalidConfig(format!(
                "channels {} must be divisible by reduction {}",
                self.channels, self.reduction
            )));
        }
        Ok(())
    }

    /// Ordered (name, shape) listing of every learnable tensor in a block
    /// with this configuration. `DmsaParams::init` follows exactly this
    /// order, and the cost model sums these shapes, so the three can never
    /// drift apart.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let c = self.channels;
        let w = self.split_width();
        let cp = self.half_group_channels();
        let mut out = Vec::new();
        for i in 0..self.splits {
            let k = self.kernel_schedule[i];
            let g = self.conv_groups_schedule[i];
            out.push((format!("extract.{i}.weight"), vec![w, w / g, k, k]));
        }
        for name in ["spatial.wb", "spatial.wc", "spatial.wd"] {
            out.push((name.to_string(), vec![c, c, 1, 1]));
        }
        out.push(("spatial.alpha".to_string(), vec![1]));
        out.push(("channel.beta".to_string(), vec![1]));
        match self.fc_variant {
            FcVariant::AffineGate => {
                out.push(("gate.w2".to_string(), vec![cp, 1, 1]));
                out.push(("gate.b2".to_string(), vec![cp, 1, 1]));
                out.push(("gate.in_gamma".to_string(), vec![cp]));
                out.push(("gate.in_beta".to_string(), vec![cp]));
            }
            FcVariant::Conv1x1 => {
                out.push(("gate.weight".to_string(), vec![cp, cp, 1, 1]));
                out.push(("gate.bias".to_string(), vec![cp]));
                out.push(("gate.in_gamma".to_string(), vec![cp]));
                out.push(("gate.in_beta".to_string(), vec![cp]));
            }
            FcVariant::None => {}
        }
        match self.branch_agg {
            BranchAgg::SoftmaxEq8 => {
                out.push(("agg.w0".to_string(), vec![c / self.reduction, c]));
                out.push(("agg.w1".to_string(), vec![c, c / self.reduction]));
            }
            BranchAgg::ConcatHalve => {
                out.push(("agg.weight".to_string(), vec![c, 2 * c, 1, 1]));
                out.push(("agg.bias".to_string(), vec![c]));
            }
        }
        out
    }

    /// Total learnable parameter count of one block.
    pub fn param_count(&self) -> usize {
        self.param_shapes()
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum()
    }
}

/// Returns a copy of `cfg` with the normalization / F_c toggles of the named
/// ablation variant applied.
pub fn make_ablation(cfg: &DmsaConfig, variant: &str) -> Result<DmsaConfig> {
    let v = AblationVariant::parse(variant)?;
    Ok(apply_ablation(cfg, v))
}

pub fn apply_ablation(cfg: &DmsaConfig, v: AblationVariant) -> DmsaConfig {
    let mut out = cfg.clone();
    out.norm_variant = NormVariant::Instance;
    out.fc_variant = FcVariant::AffineGate;
    match v {
        AblationVariant::Origin => {}
        AblationVariant::WBn => out.norm_variant = NormVariant::Batch,
        AblationVariant::WGn => out.norm_variant = NormVariant::Group,
        AblationVariant::WSn => out.norm_variant = NormVariant::ShuffleNorm,
        AblationVariant::WoFc => out.fc_variant = FcVariant::None,
        AblationVariant::Conv1x1Fc => out.fc_variant = FcVariant::Conv1x1,
    }
    out
}

/// F_c gate parameters, shaped by the configured variant.
#[derive(Clone, Debug)]
pub enum GateParams<T: Element> {
    Affine(SaUnitParams<T>),
    Conv {
        /// [C/(2G), C/(2G), 1, 1]
        weight: Tensor<T>,
        /// [C/(2G)]
        bias: Tensor<T>,
        in_gamma: Tensor<T>,
        in_beta: Tensor<T>,
    },
    Absent,
}

/// Branch aggregation parameters.
#[derive(Clone, Debug)]
pub enum AggParams<T: Element> {
    /// One SE descriptor shared by both branch applications; sharing keeps
    /// the two descriptors identical whenever the branches agree, which in
    /// turn keeps the aggregation an exact average at initialization.
    Softmax { se: SeDescriptorParams<T> },
    ConcatHalve {
        /// [C, 2C, 1, 1], initialized to average the two branches.
        weight: Tensor<T>,
        /// [C]
        bias: Tensor<T>,
    },
}

/// All learnable tensors of one DMSA block.
#[derive(Clone, Debug)]
pub struct DmsaParams<T: Element> {
    pub extract: Vec<Tensor<T>>,
    pub spatial: SpatialBranchParams<T>,
    pub channel: ChannelBranchParams<T>,
    pub gate: GateParams<T>,
    pub agg: AggParams<T>,
}

impl<T: Element> DmsaParams<T> {
    /// Seeded construction; the draw order matches `DmsaConfig::param_shapes`.
    pub fn init(cfg: &DmsaConfig, rng: &mut ChaCha8Rng) -> Result<DmsaParams<T>> {
        cfg.validate()?;
        let c = cfg.channels;
        let w = cfg.split_width();
        let cp = cfg.half_group_channels();
        let mut extract = Vec::with_capacity(cfg.splits);
        for i in 0..cfg.splits {
            let k = cfg.kernel_schedule[i];
            let g = cfg.conv_groups_schedule[i];
            let fan_in = (w / g) * k * k;
            extract.push(kaiming_normal(&[w, w / g, k, k], fan_in, rng));
        }
        let spatial = SpatialBranchParams::init(c, rng);
        let channel = ChannelBranchParams::init();
        let gate = match cfg.fc_variant {
            FcVariant::AffineGate => GateParams::Affine(SaUnitParams::init(cp)),
            FcVariant::Conv1x1 => GateParams::Conv {
                weight: kaiming_normal(&[cp, cp, 1, 1], cp, rng),
                bias: Tensor::zeros(&[cp]),
                in_gamma: Tensor::ones(&[cp]),
                in_beta: Tensor::zeros(&[cp]),
            },
            FcVariant::None => GateParams::Absent,
        };
        let agg = match cfg.branch_agg {
            BranchAgg::SoftmaxEq8 => AggParams::Softmax {
                se: SeDescriptorParams::init(c, cfg.reduction, rng)?,
            },
            BranchAgg::ConcatHalve => {
                let mut weight = Tensor::zeros(&[c, 2 * c, 1, 1]);
                for o in 0..c {
                    weight.data_mut()[o * 2 * c + o] = T::from_f64(0.5);
                    weight.data_mut()[o * 2 * c + c + o] = T::from_f64(0.5);
                }
                AggParams::ConcatHalve { weight, bias: Tensor::zeros(&[c]) }
            }
        };
        Ok(DmsaParams { extract, spatial, channel, gate, agg })
    }

    /// Visits every learnable tensor in the fixed serialization order.
    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a Tensor<T>)) {
        for (i, t) in self.extract.iter().enumerate() {
            f(format!("{prefix}extract.{i}.weight"), t);
        }
        f(format!("{prefix}spatial.wb"), &self.spatial.wb);
        f(format!("{prefix}spatial.wc"), &self.spatial.wc);
        f(format!("{prefix}spatial.wd"), &self.spatial.wd);
        f(format!("{prefix}spatial.alpha"), &self.spatial.alpha);
        f(format!("{prefix}channel.beta"), &self.channel.beta);
        match &self.gate {
            GateParams::Affine(p) => {
                f(format!("{prefix}gate.w2"), &p.w2);
                f(format!("{prefix}gate.b2"), &p.b2);
                f(format!("{prefix}gate.in_gamma"), &p.in_gamma);
                f(format!("{prefix}gate.in_beta"), &p.in_beta);
            }
            GateParams::Conv { weight, bias, in_gamma, in_beta } => {
                f(format!("{prefix}gate.weight"), weight);
                f(format!("{prefix}gate.bias"), bias);
                f(format!("{prefix}gate.in_gamma"), in_gamma);
                f(format!("{prefix}gate.in_beta"), in_beta);
            }
            GateParams::Absent => {}
        }
        match &self.agg {
            AggParams::Softmax { se } => {
                f(format!("{prefix}agg.w0"), &se.w0);
                f(format!("{prefix}agg.w1"), &se.w1);
            }
            AggParams::ConcatHalve { weight, bias } => {
                f(format!("{prefix}agg.weight"), weight);
                f(format!("{prefix}agg.bias"), bias);
            }
        }
    }

    /// Mutable visit in the same order as `visit`.
    pub fn visit_mut(&mut self, prefix: &str, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        for (i, t) in self.extract.iter_mut().enumerate() {
            f(format!("{prefix}extract.{i}.weight"), t);
        }
        f(format!("{prefix}spatial.wb"), &mut self.spatial.wb);
        f(format!("{prefix}spatial.wc"), &mut self.spatial.wc);
        f(format!("{prefix}spatial.wd"), &mut self.spatial.wd);
        f(format!("{prefix}spatial.alpha"), &mut self.spatial.alpha);
        f(format!("{prefix}channel.beta"), &mut self.channel.beta);
        match &mut self.gate {
            GateParams::Affine(p) => {
                f(format!("{prefix}gate.w2"), &mut p.w2);
                f(format!("{prefix}gate.b2"), &mut p.b2);
                f(format!("{prefix}gate.in_gamma"), &mut p.in_gamma);
                f(format!("{prefix}gate.in_beta"), &mut p.in_beta);
            }
            GateParams::Conv { weight, bias, in_gamma, in_beta } => {
                f(format!("{prefix}gate.weight"), weight);
                f(format!("{prefix}gate.bias"), bias);
                f(format!("{prefix}gate.in_gamma"), in_gamma);
                f(format!("{prefix}gate.in_beta"), in_beta);
            }
            GateParams::Absent => {}
        }
        match &mut self.agg {
            AggParams::Softmax { se } => {
                f(format!("{prefix}agg.w0"), &mut se.w0);
                f(format!("{prefix}agg.w1"), &mut se.w1);
            }
            AggParams::ConcatHalve { weight, bias } => {
                f(format!("{prefix}agg.weight"), weight);
                f(format!("{prefix}agg.bias"), bias);
            }
        }
    }

    pub fn param_count(&self) -> usize {
        let mut total = 0usize;
        self.visit("", &mut |_, t| total += t.numel());
        total
    }

    fn validate_for(&self, cfg: &DmsaConfig) -> Result<()> {
        let c = cfg.channels;
        let w = cfg.split_width();
        let cp = cfg.half_group_channels();
        if self.extract.len() != cfg.splits {
            return Err(Error::ShapeMismatch(format!(
                "{} extraction kernels for {} splits",
                self.extract.len(),
                cfg.splits
            )));
        }
        for (i, t) in self.extract.iter().enumerate() {
            let k = cfg.kernel_schedule[i];
            let g = cfg.conv_groups_schedule[i];
            if t.dims() != [w, w / g, k, k] {
                return Err(Error::ShapeMismatch(format!(
                    "extraction kernel {i} shaped {:?}, want [{w},{},{k},{k}]",
                    t.dims(),
                    w / g
                )));
            }
        }
        for (t, name) in [
            (&self.spatial.wb, "wb"),
            (&self.spatial.wc, "wc"),
            (&self.spatial.wd, "wd"),
        ] {
            if t.dims() != [c, c, 1, 1] {
                return Err(Error::ShapeMismatch(format!(
                    "spatial {name} shaped {:?}, want [{c},{c},1,1]",
                    t.dims()
                )));
            }
        }
        let gate_ok = match (&self.gate, cfg.fc_variant) {
            (GateParams::Affine(p), FcVariant::AffineGate) => p.w2.numel() == cp,
            (GateParams::Conv { weight, .. }, FcVariant::Conv1x1) => {
                weight.dims() == [cp, cp, 1, 1]
            }
            (GateParams::Absent, FcVariant::None) => true,
            _ => false,
        };
        if !gate_ok {
            return Err(Error::ShapeMismatch(format!(
                "gate parameters do not match fc variant '{}'",
                cfg.fc_variant.name()
            )));
        }
        let agg_ok = match (&self.agg, cfg.branch_agg) {
            (AggParams::Softmax { se }, BranchAgg::SoftmaxEq8) => {
                se.w0.dims() == [c / cfg.reduction, c]
            }
            (AggParams::ConcatHalve { weight, .. }, BranchAgg::ConcatHalve) => {
                weight.dims() == [c, 2 * c, 1, 1]
            }
            _ => false,
        };
        if !agg_ok {
            return Err(Error::ShapeMismatch(format!(
                "aggregation parameters do not match '{}'",
                cfg.branch_agg.name()
            )));
        }
        Ok(())
    }
}

/// Identity extraction kernels: each split convolution passes its input
/// through unchanged (center tap 1 on the matching in-group channel).
pub fn identity_extract_kernels<T: Element>(cfg: &DmsaConfig) -> Vec<Tensor<T>> {
    let w = cfg.split_width();
    (0..cfg.splits)
        .map(|i| {
            let k = cfg.kernel_schedule[i];
            let g = cfg.conv_groups_schedule[i];
            let wg = w / g;
            let mut t = Tensor::zeros(&[w, wg, k, k]);
            for o in 0..w {
                t.data_mut()[((o * wg + o % wg) * k + k / 2) * k + k / 2] = T::one();
            }
            t
        })
        .collect()
}

/// Splits x into S channel parts and convolves part i with its scheduled
/// kernel size and group count; padding (k-1)/2 preserves the spatial size.
pub fn multi_scale_extract<T: Element>(
    x: &Tensor<T>,
    cfg: &DmsaConfig,
    params: &DmsaParams<T>,
) -> Result<Vec<Tensor<T>>> {
    multi_scale_extract_strided(x, cfg, params, 1)
}

/// Strided variant used at stage entries: every split conv shares the stride
/// so the parts stay spatially aligned for fusion.
pub fn multi_scale_extract_strided<T: Element>(
    x: &Tensor<T>,
    cfg: &DmsaConfig,
    params: &DmsaParams<T>,
    stride: usize,
) -> Result<Vec<Tensor<T>>> {
    cfg.validate()?;
    params.validate_for(cfg)?;
    if x.rank() != 4 || x.dims()[1] != cfg.channels {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} does not carry {} channels",
            x.dims(),
            cfg.channels
        )));
    }
    let parts = split(x, cfg.splits, Axis::Channel.index())?;
    let mut out = Vec::with_capacity(cfg.splits);
    for (i, p) in parts.iter().enumerate() {
        let k = cfg.kernel_schedule[i];
        let g = cfg.conv_groups_schedule[i];
        out.push(conv2d(p, &params.extract[i], None, stride, (k - 1) / 2, g)?);
    }
    Ok(out)
}

/// Fusion of the extracted splits: channel concatenation in split order.
pub fn fuse_splits<T: Element>(parts: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::ShapeMismatch("fuse_splits of zero parts".into()))?;
    for p in parts {
        if p.dims() != first.dims() {
            return Err(Error::ShapeMismatch(format!(
                "fuse_splits parts disagree: {:?} vs {:?}",
                first.dims(),
                p.dims()
            )));
        }
    }
    let refs: Vec<&Tensor<T>> = parts.iter().collect();
    concat(&refs, Axis::Channel.index())
}

/// Elementwise two-way softmax over per-channel descriptors z1, z2; the
/// outputs sum to 1 per (sample, channel).
pub(crate) fn branch_softmax<T: Element>(z1: &Tensor<T>, z2: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    debug_assert_eq!(z1.dims(), z2.dims());
    let mut a1 = z1.clone();
    let mut a2 = z2.clone();
    for (p, q) in a1.data_mut().iter_mut().zip(a2.data_mut().iter_mut()) {
        // 2-way softmax in the stable sigmoid form
        let s = sigmoid_scalar(*p - *q);
        *p = s;
        *q = T::one() - s;
    }
    (a1, a2)
}

/// Merges the channel and spatial branch outputs per the configured
/// aggregation: SE descriptors, softmax over the branch axis, weighted sum
/// (or the concat-and-halve alternative).
pub fn aggregate_branches<T: Element>(
    e1: &Tensor<T>,
    e2: &Tensor<T>,
    cfg: &DmsaConfig,
    params: &DmsaParams<T>,
) -> Result<Tensor<T>> {
    if e1.dims() != e2.dims() {
        return Err(Error::ShapeMismatch(format!(
            "branch outputs disagree: {:?} vs {:?}",
            e1.dims(),
            e2.dims()
        )));
    }
    match (&params.agg, cfg.branch_agg) {
        (AggParams::Softmax { se }, BranchAgg::SoftmaxEq8) => {
            let z1 = se_weight(e1, se)?;
            let z2 = se_weight(e2, se)?;
            let (a1, a2) = branch_softmax(&z1, &z2);
            add(&mul_nc11(e1, &a1)?, &mul_nc11(e2, &a2)?)
        }
        (AggParams::ConcatHalve { weight, bias }, BranchAgg::ConcatHalve) => {
            let f = concat(&[e1, e2], Axis::Channel.index())?;
            conv2d(&f, weight, Some(bias), 1, 0, 1)
        }
        _ => Err(Error::InvalidConfig(
            "aggregation parameters do not match configured branch_agg".into(),
        )),
    }
}

/// Applies the configured normalization to one gathered Xk2 block. Channel
/// parameters are the per-half vectors tiled across groups.
pub(crate) fn gate_norm<T: Element>(
    xk2: &Tensor<T>,
    cfg: &DmsaConfig,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
) -> Result<Tensor<T>> {
    let c = xk2.dims()[1];
    let eps = T::from_f64(NORM_EPS);
    match cfg.norm_variant {
        NormVariant::Instance => instance_norm(xk2, gamma, beta, eps),
        NormVariant::Batch => batch_norm_inference(
            xk2,
            gamma,
            beta,
            &Tensor::zeros(&[c]),
            &Tensor::ones(&[c]),
            eps,
        ),
        NormVariant::Group => {
            let ng = if c % 2 == 0 { 2 } else { 1 };
            group_norm(xk2, ng, gamma, beta, eps)
        }
        NormVariant::ShuffleNorm => {
            // Shuffle channels, normalize over the shuffled groups, restore
            // order, then apply the affine in original channel order.
            let gs = if c % 2 == 0 { 2 } else { 1 };
            let shuffled = channel_shuffle(xk2, gs)?;
            let normed = group_norm(
                &shuffled,
                gs,
                &Tensor::ones(&[c]),
                &Tensor::zeros(&[c]),
                eps,
            )?;
            // shuffling with C/gs groups inverts the gs-group shuffle
            let restored = channel_shuffle(&normed, c / gs)?;
            add_channel(&mul_channel(&restored, gamma)?, beta)
        }
    }
}

/// Computes the attention-side input of the spatial branch: each group's
/// second channel half passes through the F_c gate, the first half is kept,
/// and the groups are reassembled. With `fc_variant = none` this is the
/// fused map itself.
pub(crate) fn gated_attention_input<T: Element>(
    a: &Tensor<T>,
    cfg: &DmsaConfig,
    gate: &GateParams<T>,
) -> Result<Tensor<T>> {
    if matches!(gate, GateParams::Absent) {
        return Ok(a.clone());
    }
    let groups = group_features(a, cfg.sa_groups)?;
    let mut rebuilt = Vec::with_capacity(groups.len());
    for xk in &groups {
        let (xk1, xk2) = split_subfeature(xk)?;
        let gated = gate_half(&xk2, cfg, gate)?;
        rebuilt.push(concat(&[&xk1, &gated], Axis::Channel.index())?);
    }
    let refs: Vec<&Tensor<T>> = rebuilt.iter().collect();
    concat(&refs, Axis::Channel.index())
}

fn gate_half<T: Element>(
    xk2: &Tensor<T>,
    cfg: &DmsaConfig,
    gate: &GateParams<T>,
) -> Result<Tensor<T>> {
    match gate {
        GateParams::Affine(p) => {
            let t = gate_norm(xk2, cfg, &p.in_gamma, &p.in_beta)?;
            let z = add_channel(&mul_channel(&t, &p.w2)?, &p.b2)?;
            mul(&sigmoid(&z), xk2)
        }
        GateParams::Conv { weight, bias, in_gamma, in_beta } => {
            let t = gate_norm(xk2, cfg, in_gamma, in_beta)?;
            let z = conv2d(&t, weight, Some(bias), 1, 0, 1)?;
            mul(&sigmoid(&z), xk2)
        }
        GateParams::Absent => unreachable!("absent gate handled by caller"),
    }
}

/// Full block forward: extract, fuse, run both branches, aggregate, shuffle.
/// Output shape equals input shape.
pub fn dmsa_forward<T: Element>(
    x: &Tensor<T>,
    cfg: &DmsaConfig,
    params: &DmsaParams<T>,
) -> Result<Tensor<T>> {
    dmsa_forward_strided(x, cfg, params, 1)
}

/// Block forward with a shared extraction stride; stride 2 halves the
/// spatial size (used at stage entries inside the networks).
pub fn dmsa_forward_strided<T: Element>(
    x: &Tensor<T>,
    cfg: &DmsaConfig,
    params: &DmsaParams<T>,
    stride: usize,
) -> Result<Tensor<T>> {
    let parts = multi_scale_extract_strided(x, cfg, params, stride)?;
    let a = fuse_splits(&parts)?;
    let e1 = channel_branch(&a, &params.channel)?;
    let a_att = gated_attention_input(&a, cfg, &params.gate)?;
    let e2 = spatial_mix(&a, &a_att, &params.spatial)?;
    let y = aggregate_branches(&e1, &e2, cfg, params)?;
    channel_shuffle(&y, cfg.sa_groups)
}
