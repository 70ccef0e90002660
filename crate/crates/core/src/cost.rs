//! Exact parameter and FLOP accounting for built networks. The default
//! convention matches the published cost tables: one multiply-accumulate
//! counts as one FLOP, and only weighted layers (convolutions and fully
//! connected matmuls) are in scope. Flags widen this to 2x counting and to
//! a full scope that adds norms, activations, pooling and the
//! parameter-free attention products at documented per-element rates.

use crate::dmsa::{BranchAgg, DmsaConfig, FcVariant};
use crate::error::Result;
use crate::network::{Network, STEM_CHANNELS};
use crate::ops::conv_out_extent;

/// Per-element cost of a normalization (statistics plus affine transform).
const NORM_OPS_PER_EL: u64 = 5;
/// Per-element cost of a softmax (max, subtract, exp, sum, divide).
const SOFTMAX_OPS_PER_EL: u64 = 5;
/// Per-element cost of a sigmoid.
const SIGMOID_OPS_PER_EL: u64 = 4;

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Convention {
    /// true: one MAC = one FLOP (the tables' convention); false: 2x.
    pub count_macs: bool,
    /// true: weighted layers only; false: full per-element scope.
    pub weighted_only: bool,
}

impl Default for Convention {
    fn default() -> Self {
        Convention { count_macs: true, weighted_only: true }
    }
}

#[derive(Clone, Debug)]
pub struct LayerCost {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Clone, Debug)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: usize,
    pub total_flops: u64,
    pub convention: Convention,
    pub resolution: usize,
}

pub(crate) fn conv_params(out_c: usize, in_c_per_group: usize, k: usize) -> usize {
    out_c * in_c_per_group * k * k
}

pub(crate) fn conv_macs(out_c: usize, in_c_per_group: usize, k: usize, h: usize, w: usize) -> u64 {
    (out_c * in_c_per_group * k * k) as u64 * (h * w) as u64
}

struct Counter {
    conv: Convention,
    params: usize,
    macs: u64,
    elementwise: u64,
}

impl Counter {
    fn new(conv: Convention) -> Self {
        Counter { conv, params: 0, macs: 0, elementwise: 0 }
    }

    fn conv_bn(&mut self, out_c: usize, in_c_per_group: usize, k: usize, h: usize, w: usize) {
        self.params += conv_params(out_c, in_c_per_group, k) + 2 * out_c;
        self.macs += conv_macs(out_c, in_c_per_group, k, h, w);
        self.norm(out_c, h, w);
    }

    fn norm(&mut self, c: usize, h: usize, w: usize) {
        self.elementwise += (c * h * w) as u64 * NORM_OPS_PER_EL;
    }

    fn relu(&mut self, c: usize, h: usize, w: usize) {
        self.elementwise += (c * h * w) as u64;
    }

    fn finish(self) -> (usize, u64) {
        let mut flops = if self.conv.count_macs { self.macs } else { 2 * self.macs };
        if !self.conv.weighted_only {
            flops += self.elementwise;
        }
        (self.params, flops)
    }
}

/// Parameters and FLOPs of one DMSA block on an h x w output grid (the
/// extraction convs already include any stride in that grid).
fn dmsa_cost(cfg: &DmsaConfig, h: usize, w: usize, conv: Convention) -> (usize, u64) {
    let c = cfg.channels;
    let hw = (h * w) as u64;
    let mut k = Counter::new(conv);
    k.params = cfg.param_count();
    let wd = cfg.split_width();
    for i in 0..cfg.splits {
        k.macs += conv_macs(wd, wd / cfg.conv_groups_schedule[i], cfg.kernel_schedule[i], h, w);
    }
    // the three 1x1 attention projections
    k.macs += 3 * conv_macs(c, c, 1, h, w);
    // SE descriptor FC pair, applied once per branch
    k.macs += 2 * 2 * (c * (c / cfg.reduction)) as u64;
    match cfg.fc_variant {
        FcVariant::Conv1x1 => {
            // one shared 1x1 conv over every group's second half
            let cp = cfg.half_group_channels();
            k.macs += cfg.sa_groups as u64 * conv_macs(cp, cp, 1, h, w);
            k.elementwise += hw * (c / 2) as u64 * (NORM_OPS_PER_EL + SIGMOID_OPS_PER_EL + 1);
        }
        FcVariant::AffineGate => {
            // per-channel scale, norm, sigmoid, gating product on C/2 channels
            k.elementwise += hw * (c / 2) as u64 * (NORM_OPS_PER_EL + SIGMOID_OPS_PER_EL + 2 + 1);
        }
        FcVariant::None => {}
    }
    // parameter-free attention products count as MACs in the full scope
    if !conv.weighted_only {
        let chw = (c * h * w) as u64;
        k.macs += 2 * (c as u64) * chw; // channel map and its mixing
        k.macs += 2 * hw * chw; // spatial map and its mixing
        k.elementwise += (c * c) as u64 * SOFTMAX_OPS_PER_EL; // channel rows
        k.elementwise += hw * hw * SOFTMAX_OPS_PER_EL; // spatial rows
        k.elementwise += 2 * 2 * chw; // two scaled-residual adds
        // SE extras: pool, relu, sigmoid per application
        k.elementwise += 2 * (chw + (c / cfg.reduction) as u64 + c as u64 * SIGMOID_OPS_PER_EL);
    }
    match cfg.branch_agg {
        BranchAgg::SoftmaxEq8 => {
            if !conv.weighted_only {
                k.elementwise += c as u64 * SOFTMAX_OPS_PER_EL; // branch softmax
                k.elementwise += 3 * (c * h * w) as u64; // weighted sum
            }
        }
        BranchAgg::ConcatHalve => {
            k.macs += conv_macs(c, 2 * c, 1, h, w);
        }
    }
    k.finish()
}

/// Walks the network once, emitting one cost record per named layer
/// (stem, every block, head) plus exact totals.
pub fn cost_report(net: &Network, resolution: usize, conv: Convention) -> Result<CostReport> {
    let mut layers = Vec::new();

    let h1 = conv_out_extent(resolution, 7, 2, 3)?;
    let mut k = Counter::new(conv);
    k.conv_bn(STEM_CHANNELS, 3, 7, h1, h1);
    k.relu(STEM_CHANNELS, h1, h1);
    let h2 = conv_out_extent(h1, 3, 2, 1)?;
    // max pool: k*k-1 comparisons per output element
    k.elementwise += (STEM_CHANNELS * h2 * h2) as u64 * 8;
    let (p, f) = k.finish();
    layers.push(LayerCost { name: "stem".into(), params: p, flops: f });

    let mut h = h2;
    for (si, stage) in net.stages.iter().enumerate() {
        for (bi, d) in stage.iter().enumerate() {
            let ho = conv_out_extent(h, 3, d.stride, 1)?;
            let mut k = Counter::new(conv);
            k.conv_bn(d.mid_channels, d.in_channels, 1, h, h);
            k.relu(d.mid_channels, h, h);
            // dmsa_cost applies the convention itself; spliced in after finish
            let mut dmsa_flops = 0u64;
            match &d.dmsa {
                None => {
                    k.conv_bn(d.mid_channels, d.mid_channels, 3, ho, ho);
                }
                Some(cfg) => {
                    let (dp, df) = dmsa_cost(cfg, ho, ho, conv);
                    k.params += dp + 2 * d.mid_channels; // block + kept norm pair
                    dmsa_flops = df;
                    k.norm(d.mid_channels, ho, ho);
                }
            }
            k.relu(d.mid_channels, ho, ho);
            k.conv_bn(d.out_channels, d.mid_channels, 1, ho, ho);
            if d.downsample {
                k.conv_bn(d.out_channels, d.in_channels, 1, ho, ho);
            }
            // residual add and final relu
            k.elementwise += 2 * (d.out_channels * ho * ho) as u64;
            let (p, f) = k.finish();
            layers.push(LayerCost {
                name: format!("stage{}.block{}", si + 1, bi),
                params: p,
                flops: f + dmsa_flops,
            });
            h = ho;
        }
    }

    let width = net.stages.last().map(|s| s[0].out_channels).unwrap_or(STEM_CHANNELS);
    let mut k = Counter::new(conv);
    k.params += width * net.num_classes + net.num_classes;
    k.macs += (width * net.num_classes) as u64;
    // global average pool and bias add
    k.elementwise += (width * h * h) as u64 + net.num_classes as u64;
    let (p, f) = k.finish();
    layers.push(LayerCost { name: "head.fc".into(), params: p, flops: f });

    let total_params = layers.iter().map(|l| l.params).sum();
    let total_flops = layers.iter().map(|l| l.flops).sum();
    Ok(CostReport { layers, total_params, total_flops, convention: conv, resolution })
}

/// Exact parameter count (resolution-independent part of the report).
pub fn count_params(net: &Network) -> Result<CostReport> {
    cost_report(net, 224, Convention::default())
}

/// FLOP count at a given input resolution under the default convention.
pub fn count_flops(net: &Network, resolution: usize) -> Result<CostReport> {
    cost_report(net, resolution, Convention::default())
}

#[derive(Clone, Debug)]
pub struct CompareRow {
    pub name: String,
    pub params_a: usize,
    pub params_b: usize,
    pub flops_a: u64,
    pub flops_b: u64,
}

impl CompareRow {
    pub fn params_delta(&self) -> i64 {
        self.params_b as i64 - self.params_a as i64
    }

    pub fn flops_delta(&self) -> i64 {
        self.flops_b as i64 - self.flops_a as i64
    }
}

/// Aligns two reports by layer name (in a's order, then b-only rows).
pub fn compare_report(a: &CostReport, b: &CostReport) -> Vec<CompareRow> {
    let mut rows = Vec::with_capacity(a.layers.len().max(b.layers.len()));
    for la in &a.layers {
        let lb = b.layers.iter().find(|l| l.name == la.name);
        rows.push(CompareRow {
            name: la.name.clone(),
            params_a: la.params,
            params_b: lb.map_or(0, |l| l.params),
            flops_a: la.flops,
            flops_b: lb.map_or(0, |l| l.flops),
        });
    }
    for lb in &b.layers {
        if !a.layers.iter().any(|l| l.name == lb.name) {
            rows.push(CompareRow {
                name: lb.name.clone(),
                params_a: 0,
                params_b: lb.params,
                flops_a: 0,
                flops_b: lb.flops,
            });
        }
    }
    rows
}

/// Signed percentage gap of an achieved value against a published target.
pub fn gap_percent(actual: f64, target: f64) -> f64 {
    (actual - target) / target * 100.0
}
