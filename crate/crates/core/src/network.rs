//! Residual networks at depths 50 and 101 with either plain bottlenecks or
//! DMSA bottlenecks (the DMSA block replacing the 3x3 convolution, its
//! following norm kept). Norm layers run in inference mode with fixed
//! zero-mean unit-variance statistics; their affine pairs are learnable.

use rand_chacha::ChaCha8Rng;

use crate::dmsa::{dmsa_forward_strided, DmsaConfig, DmsaParams};
use crate::error::{Error, Result};
use crate::init::kaiming_normal;
use crate::ops::{add, batch_norm_inference, conv2d, fully_connected, global_avg_pool, max_pool2d, relu};
use crate::scalar::Element;
use crate::tensor::Tensor;
use crate::NORM_EPS;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum NetKind {
    Plain,
    Dmsa,
}

impl NetKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(NetKind::Plain),
            "dmsa" => Ok(NetKind::Dmsa),
            _ => Err(Error::UnknownVariant(format!("block kind '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            NetKind::Plain => "plain",
            NetKind::Dmsa => "dmsa",
        }
    }
}

/// Geometry of one bottleneck block. The stride sits on the middle stage
/// (3x3 conv or DMSA extraction); the projection shortcut shares it.
#[derive(Clone, Debug)]
pub struct BlockDesc {
    pub in_channels: usize,
    pub mid_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub downsample: bool,
    /// None for the plain 3x3 middle conv.
    pub dmsa: Option<DmsaConfig>,
}

/// A built network: stem geometry is fixed (7x7/2 conv to 64 channels plus
/// 3x3/2 max pool), stages and head are described here.
#[derive(Clone, Debug)]
pub struct Network {
    pub depth: usize,
    pub kind: NetKind,
    pub num_classes: usize,
    pub stages: Vec<Vec<BlockDesc>>,
}

pub const STEM_CHANNELS: usize = 64;

fn stage_table(depth: usize) -> Result<[(usize, usize, usize); 4]> {
    match depth {
        50 => Ok([(3, 64, 256), (4, 128, 512), (6, 256, 1024), (3, 512, 2048)]),
        101 => Ok([(3, 64, 256), (4, 128, 512), (23, 256, 1024), (3, 512, 2048)]),
        _ => Err(Error::InvalidConfig(format!(
            "depth {depth} not supported, expected 50 or 101"
        ))),
    }
}

/// Builds the block layout for a depth and kind. The DMSA template supplies
/// splits, groups, reduction and variant toggles; its channel width is
/// re-targeted per stage.
pub fn build_network(depth: usize, kind: NetKind, template: &DmsaConfig) -> Result<Network> {
    let table = stage_table(depth)?;
    let mut stages = Vec::with_capacity(4);
    let mut cin = STEM_CHANNELS;
    for (si, &(blocks, mid, out)) in table.iter().enumerate() {
        let mut stage = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let dmsa = match kind {
                NetKind::Plain => None,
                NetKind::Dmsa => Some(template.at_width(mid)?),
            };
            stage.push(BlockDesc {
                in_channels: cin,
                mid_channels: mid,
                out_channels: out,
                stride: if si > 0 && b == 0 { 2 } else { 1 },
                downsample: b == 0,
                dmsa,
            });
            cin = out;
        }
        stages.push(stage);
    }
    Ok(Network { depth, kind, num_classes: 1000, stages })
}

/// A convolution with its inference-mode norm affine pair.
#[derive(Clone, Debug)]
pub struct ConvBnParams<T: Element> {
    pub weight: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Element> ConvBnParams<T> {
    fn init(
        out_c: usize,
        in_c_per_group: usize,
        k: usize,
        rng: &mut ChaCha8Rng,
    ) -> ConvBnParams<T> {
        ConvBnParams {
            weight: kaiming_normal(&[out_c, in_c_per_group, k, k], in_c_per_group * k * k, rng),
            gamma: Tensor::ones(&[out_c]),
            beta: Tensor::zeros(&[out_c]),
        }
    }
}

/// Middle stage of a bottleneck: plain 3x3 conv with its norm, or a DMSA
/// block followed by the same norm slot.
#[derive(Clone, Debug)]
pub enum MidParams<T: Element> {
    Conv(ConvBnParams<T>),
    Dmsa {
        block: DmsaParams<T>,
        bn_gamma: Tensor<T>,
        bn_beta: Tensor<T>,
    },
}

#[derive(Clone, Debug)]
pub struct BlockParams<T: Element> {
    pub conv1: ConvBnParams<T>,
    pub mid: MidParams<T>,
    pub conv3: ConvBnParams<T>,
    pub down: Option<ConvBnParams<T>>,
}

#[derive(Clone, Debug)]
pub struct NetParams<T: Element> {
    pub stem: ConvBnParams<T>,
    pub stages: Vec<Vec<BlockParams<T>>>,
    /// [width, classes]
    pub fc_weight: Tensor<T>,
    /// [classes]
    pub fc_bias: Tensor<T>,
}

impl<T: Element> NetParams<T> {
    pub fn init(net: &Network, rng: &mut ChaCha8Rng) -> Result<NetParams<T>> {
        let stem = ConvBnParams::init(STEM_CHANNELS, 3, 7, rng);
        let mut stages = Vec::with_capacity(net.stages.len());
        for stage in &net.stages {
            let mut blocks = Vec::with_capacity(stage.len());
            for desc in stage {
                let conv1 = ConvBnParams::init(desc.mid_channels, desc.in_channels, 1, rng);
                let mid = match &desc.dmsa {
                    None => MidParams::Conv(ConvBnParams::init(
                        desc.mid_channels,
                        desc.mid_channels,
                        3,
                        rng,
                    )),
                    Some(cfg) => MidParams::Dmsa {
                        block: DmsaParams::init(cfg, rng)?,
                        bn_gamma: Tensor::ones(&[desc.mid_channels]),
                        bn_beta: Tensor::zeros(&[desc.mid_channels]),
                    },
                };
                let conv3 = ConvBnParams::init(desc.out_channels, desc.mid_channels, 1, rng);
                let down = desc.downsample.then(|| {
                    ConvBnParams::init(desc.out_channels, desc.in_channels, 1, rng)
                });
                blocks.push(BlockParams { conv1, mid, conv3, down });
            }
            stages.push(blocks);
        }
        let width = net.stages.last().map(|s| s[0].out_channels).unwrap_or(STEM_CHANNELS);
        let fc_weight = kaiming_normal(&[width, net.num_classes], width, rng);
        let fc_bias = Tensor::zeros(&[net.num_classes]);
        Ok(NetParams { stem, stages, fc_weight, fc_bias })
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a Tensor<T>)) {
        f("stem.conv.weight".into(), &self.stem.weight);
        f("stem.bn.gamma".into(), &self.stem.gamma);
        f("stem.bn.beta".into(), &self.stem.beta);
        for (si, stage) in self.stages.iter().enumerate() {
            for (bi, b) in stage.iter().enumerate() {
                let p = format!("stage{}.block{}.", si + 1, bi);
                f(format!("{p}conv1.weight"), &b.conv1.weight);
                f(format!("{p}bn1.gamma"), &b.conv1.gamma);
                f(format!("{p}bn1.beta"), &b.conv1.beta);
                match &b.mid {
                    MidParams::Conv(c) => {
                        f(format!("{p}conv2.weight"), &c.weight);
                        f(format!("{p}bn2.gamma"), &c.gamma);
                        f(format!("{p}bn2.beta"), &c.beta);
                    }
                    MidParams::Dmsa { block, bn_gamma, bn_beta } => {
                        block.visit(&format!("{p}dmsa."), f);
                        f(format!("{p}bn2.gamma"), bn_gamma);
                        f(format!("{p}bn2.beta"), bn_beta);
                    }
                }
                f(format!("{p}conv3.weight"), &b.conv3.weight);
                f(format!("{p}bn3.gamma"), &b.conv3.gamma);
                f(format!("{p}bn3.beta"), &b.conv3.beta);
                if let Some(d) = &b.down {
                    f(format!("{p}down.conv.weight"), &d.weight);
                    f(format!("{p}down.bn.gamma"), &d.gamma);
                    f(format!("{p}down.bn.beta"), &d.beta);
                }
            }
        }
        f("head.fc.weight".into(), &self.fc_weight);
        f("head.fc.bias".into(), &self.fc_bias);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(String, &mut Tensor<T>)) {
        f("stem.conv.weight".into(), &mut self.stem.weight);
        f("stem.bn.gamma".into(), &mut self.stem.gamma);
        f("stem.bn.beta".into(), &mut self.stem.beta);
        for (si, stage) in self.stages.iter_mut().enumerate() {
            for (bi, b) in stage.iter_mut().enumerate() {
                let p = format!("stage{}.block{}.", si + 1, bi);
                f(format!("{p}conv1.weight"), &mut b.conv1.weight);
                f(format!("{p}bn1.gamma"), &mut b.conv1.gamma);
                f(format!("{p}bn1.beta"), &mut b.conv1.beta);
                match &mut b.mid {
                    MidParams::Conv(c) => {
                        f(format!("{p}conv2.weight"), &mut c.weight);
                        f(format!("{p}bn2.gamma"), &mut c.gamma);
                        f(format!("{p}bn2.beta"), &mut c.beta);
                    }
                    MidParams::Dmsa { block, bn_gamma, bn_beta } => {
                        block.visit_mut(&format!("{p}dmsa."), f);
                        f(format!("{p}bn2.gamma"), bn_gamma);
                        f(format!("{p}bn2.beta"), bn_beta);
                    }
                }
                f(format!("{p}conv3.weight"), &mut b.conv3.weight);
                f(format!("{p}bn3.gamma"), &mut b.conv3.gamma);
                f(format!("{p}bn3.beta"), &mut b.conv3.beta);
                if let Some(d) = &mut b.down {
                    f(format!("{p}down.conv.weight"), &mut d.weight);
                    f(format!("{p}down.bn.gamma"), &mut d.gamma);
                    f(format!("{p}down.bn.beta"), &mut d.beta);
                }
            }
        }
        f("head.fc.weight".into(), &mut self.fc_weight);
        f("head.fc.bias".into(), &mut self.fc_bias);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

/// Shape and activation statistics of one traced point.
#[derive(Clone, Debug)]
pub struct TraceEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

fn trace_of<T: Element>(name: &str, t: &Tensor<T>) -> TraceEntry {
    let n = t.numel() as f64;
    let mut sum = 0.0;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in t.data() {
        let v = v.to_f64();
        sum += v;
        min = min.min(v);
        max = max.max(v);
    }
    let mean = sum / n;
    let mut var = 0.0;
    for &v in t.data() {
        let d = v.to_f64() - mean;
        var += d * d;
    }
    TraceEntry {
        name: name.to_string(),
        dims: t.dims().to_vec(),
        mean,
        std: (var / n).sqrt(),
        min,
        max,
    }
}

fn conv_bn<T: Element>(
    x: &Tensor<T>,
    p: &ConvBnParams<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let c = p.weight.dims()[0];
    let y = conv2d(x, &p.weight, None, stride, padding, 1)?;
    batch_norm_inference(
        &y,
        &p.gamma,
        &p.beta,
        &Tensor::zeros(&[c]),
        &Tensor::ones(&[c]),
        T::from_f64(NORM_EPS),
    )
}

fn block_forward<T: Element>(
    x: &Tensor<T>,
    desc: &BlockDesc,
    p: &BlockParams<T>,
) -> Result<Tensor<T>> {
    let h = relu(&conv_bn(x, &p.conv1, 1, 0)?);
    let h = match (&desc.dmsa, &p.mid) {
        (None, MidParams::Conv(c)) => relu(&conv_bn(&h, c, desc.stride, 1)?),
        (Some(cfg), MidParams::Dmsa { block, bn_gamma, bn_beta }) => {
            let m = dmsa_forward_strided(&h, cfg, block, desc.stride)?;
            let c = desc.mid_channels;
            relu(&batch_norm_inference(
                &m,
                bn_gamma,
                bn_beta,
                &Tensor::zeros(&[c]),
                &Tensor::ones(&[c]),
                T::from_f64(NORM_EPS),
            )?)
        }
        _ => {
            return Err(Error::InvalidConfig(
                "block parameters do not match block kind".into(),
            ))
        }
    };
    let h = conv_bn(&h, &p.conv3, 1, 0)?;
    let shortcut = match &p.down {
        Some(d) => conv_bn(x, d, desc.stride, 0)?,
        None => x.clone(),
    };
    Ok(relu(&add(&h, &shortcut)?))
}

/// Full forward pass returning logits plus a trace of every named stage
/// output (stem conv, pool, stages 1-4, head).
pub fn forward_traced<T: Element>(
    x: &Tensor<T>,
    net: &Network,
    params: &NetParams<T>,
) -> Result<(Tensor<T>, Vec<TraceEntry>)> {
    if x.rank() != 4 || x.dims()[1] != 3 {
        return Err(Error::ShapeMismatch(format!(
            "network input {:?} must be [N,3,H,W]",
            x.dims()
        )));
    }
    let mut trace = Vec::new();
    let h = relu(&conv_bn(x, &params.stem, 2, 3)?);
    trace.push(trace_of("stem.conv", &h));
    let mut h = max_pool2d(&h, 3, 2, 1)?;
    trace.push(trace_of("stem.pool", &h));
    for (si, (stage, sp)) in net.stages.iter().zip(&params.stages).enumerate() {
        for (desc, bp) in stage.iter().zip(sp) {
            h = block_forward(&h, desc, bp)?;
        }
        trace.push(trace_of(&format!("stage{}", si + 1), &h));
    }
    let pooled = global_avg_pool(&h)?;
    trace.push(trace_of("head.gap", &pooled));
    let n = pooled.dims()[0];
    let c = pooled.dims()[1];
    let flat = pooled.reshape(&[n, c])?;
    let logits = fully_connected(&flat, &params.fc_weight, &params.fc_bias)?;
    trace.push(trace_of("head.fc", &logits));
    Ok((logits, trace))
}

pub fn forward<T: Element>(
    x: &Tensor<T>,
    net: &Network,
    params: &NetParams<T>,
) -> Result<Tensor<T>> {
    Ok(forward_traced(x, net, params)?.0)
}
