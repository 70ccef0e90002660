//! JSON network configuration. Every field has a default, unknown keys are
//! rejected with serde's field diagnostic, and the effective configuration
//! (defaults filled in) can be echoed back as JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dmsa_core::dmsa::{BranchAgg, DmsaConfig, FcVariant, NormVariant};
use dmsa_core::error::{Error, Result};
use dmsa_core::network::{build_network, NetKind, Network};

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfigFile {
    #[serde(default = "default_depth")]
    pub depth: usize,
    #[serde(default = "default_block_kind")]
    pub block_kind: String,
    #[serde(default)]
    pub dmsa: DmsaSection,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DmsaSection {
    #[serde(default = "default_splits")]
    pub splits: usize,
    #[serde(default = "default_sa_groups")]
    pub sa_groups: usize,
    #[serde(default = "default_reduction")]
    pub reduction: usize,
    /// Odd kernel size per split; derived from the split count when null.
    #[serde(default)]
    pub kernel_schedule: Option<Vec<usize>>,
    /// Conv group count per split; derived when null.
    #[serde(default)]
    pub conv_groups_schedule: Option<Vec<usize>>,
    #[serde(default = "default_norm_variant")]
    pub norm_variant: String,
    #[serde(default = "default_fc_variant")]
    pub fc_variant: String,
    #[serde(default = "default_branch_agg")]
    pub branch_agg: String,
}

fn default_depth() -> usize {
    50
}

fn default_block_kind() -> String {
    "dmsa".into()
}

fn default_splits() -> usize {
    4
}

fn default_sa_groups() -> usize {
    8
}

fn default_reduction() -> usize {
    16
}

fn default_norm_variant() -> String {
    NormVariant::Instance.name().into()
}

fn default_fc_variant() -> String {
    FcVariant::AffineGate.name().into()
}

fn default_branch_agg() -> String {
    BranchAgg::SoftmaxEq8.name().into()
}

impl Default for NetConfigFile {
    fn default() -> Self {
        let cfg: NetConfigFile =
            serde_json::from_str("{}").expect("empty object fills every default");
        cfg.filled()
    }
}

impl Default for DmsaSection {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty object fills every default")
    }
}

impl NetConfigFile {
    pub fn load(path: &Path) -> Result<NetConfigFile> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str::<NetConfigFile>(&text)
            .map(NetConfigFile::filled)
            .map_err(|e| Error::InvalidConfig(format!("{path:?}: {e}")))
    }

    /// Materialize the derived schedules so the echo shows concrete values.
    /// A section the template rejects is left alone; the error surfaces when
    /// the network is built.
    fn filled(mut self) -> NetConfigFile {
        if self.dmsa.kernel_schedule.is_none() || self.dmsa.conv_groups_schedule.is_none() {
            if let Ok(t) = self.template() {
                self.dmsa.kernel_schedule.get_or_insert(t.kernel_schedule);
                self.dmsa
                    .conv_groups_schedule
                    .get_or_insert(t.conv_groups_schedule);
            }
        }
        self
    }

    /// The effective configuration with all defaults filled in.
    pub fn echo(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn kind(&self) -> Result<NetKind> {
        NetKind::parse(&self.block_kind)
    }

    /// The block template at the 64-channel reference width; the builder
    /// re-targets it per stage.
    pub fn template(&self) -> Result<DmsaConfig> {
        let d = &self.dmsa;
        let mut cfg = DmsaConfig::with_splits(64, d.splits, d.sa_groups, d.reduction)?;
        if let Some(ks) = &d.kernel_schedule {
            cfg.kernel_schedule = ks.clone();
        }
        if let Some(gs) = &d.conv_groups_schedule {
            cfg.conv_groups_schedule = gs.clone();
        }
        cfg.norm_variant = NormVariant::parse(&d.norm_variant)?;
        cfg.fc_variant = FcVariant::parse(&d.fc_variant)?;
        cfg.branch_agg = BranchAgg::parse(&d.branch_agg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build(&self) -> Result<Network> {
        build_network(self.depth, self.kind()?, &self.template()?)
    }
}
