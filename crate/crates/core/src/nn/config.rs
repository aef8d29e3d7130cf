use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filters::Direction;

/// On/off switches for every prunable subgraph. `true` keeps the subgraph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub hfdi: bool,
    pub msda: bool,
    pub fa: bool,
    pub mlrl_transfer: bool,
    pub faf: bool,
    #[serde(rename = "msda.mlrl")]
    pub msda_mlrl: bool,
    #[serde(rename = "msda.mdfa")]
    pub msda_mdfa: bool,
    #[serde(rename = "msda.se")]
    pub msda_se: bool,
    #[serde(rename = "mdfa.low")]
    pub mdfa_low: bool,
    #[serde(rename = "mdfa.horizontal")]
    pub mdfa_horizontal: bool,
    #[serde(rename = "mdfa.vertical")]
    pub mdfa_vertical: bool,
    #[serde(rename = "mdfa.diagonal")]
    pub mdfa_diagonal: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            hfdi: true,
            msda: true,
            fa: true,
            mlrl_transfer: true,
            faf: true,
            msda_mlrl: true,
            msda_mdfa: true,
            msda_se: true,
            mdfa_low: true,
            mdfa_horizontal: true,
            mdfa_vertical: true,
            mdfa_diagonal: true,
        }
    }
}

impl Ablation {
    pub const SWITCHES: [&'static str; 12] = [
        "hfdi",
        "msda",
        "fa",
        "mlrl_transfer",
        "faf",
        "msda.mlrl",
        "msda.mdfa",
        "msda.se",
        "mdfa.low",
        "mdfa.horizontal",
        "mdfa.vertical",
        "mdfa.diagonal",
    ];

    fn slot(&mut self, name: &str) -> Option<&mut bool> {
        Some(match name {
            "hfdi" => &mut self.hfdi,
            "msda" => &mut self.msda,
            "fa" => &mut self.fa,
            "mlrl_transfer" => &mut self.mlrl_transfer,
            "faf" => &mut self.faf,
            "msda.mlrl" => &mut self.msda_mlrl,
            "msda.mdfa" => &mut self.msda_mdfa,
            "msda.se" => &mut self.msda_se,
            "mdfa.low" => &mut self.mdfa_low,
            "mdfa.horizontal" => &mut self.mdfa_horizontal,
            "mdfa.vertical" => &mut self.mdfa_vertical,
            "mdfa.diagonal" => &mut self.mdfa_diagonal,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = self
            .slot(name)
            .ok_or_else(|| Error::Config(format!("unknown ablation switch {name:?}")))?;
        *slot = on;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<bool> {
        self.clone().slot(name).map(|v| *v)
    }

    /// Parses `NAME=on|off`.
    pub fn apply_assignment(&mut self, assignment: &str) -> Result<()> {
        let (name, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected NAME=on|off, got {assignment:?}")))?;
        let on = match value {
            "on" | "true" => true,
            "off" | "false" => false,
            other => return Err(Error::Config(format!("switch value must be on/off, got {other:?}"))),
        };
        self.set(name, on)
    }

    /// Directions whose MDFA branch is enabled, in summation order.
    pub fn mdfa_directions(&self) -> Vec<Direction> {
        Direction::ALL
            .into_iter()
            .filter(|d| match d {
                Direction::Horizontal => self.mdfa_horizontal,
                Direction::Vertical => self.mdfa_vertical,
                Direction::Diagonal => self.mdfa_diagonal,
                Direction::Low => self.mdfa_low,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetConfig {
    pub stage_channels: [usize; 5],
    /// Dilation of the 3×3 conv after the 1×1, 3×3 and 5×5 MLRL branches.
    pub mlrl_dilations: [usize; 3],
    pub mdfa_attn_kernel: usize,
    pub se_ratio: usize,
    /// Group normalization after each learned conv block.
    pub norm: bool,
    pub ablation: Ablation,
    pub binarize_threshold: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            stage_channels: [16, 32, 64, 64, 64],
            mlrl_dilations: [1, 3, 5],
            mdfa_attn_kernel: 3,
            se_ratio: 16,
            norm: true,
            ablation: Ablation::default(),
            binarize_threshold: 0.5,
        }
    }
}

impl NetConfig {
    /// Small widths for tests and desk-scale runs.
    pub fn tiny() -> Self {
        NetConfig {
            stage_channels: [4, 4, 8, 8, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [_, _, c3, c4, c5] = self.stage_channels;
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage_channels must all be ≥ 1".into()));
        }
        if c3 != c4 || c4 != c5 {
            return Err(Error::Config(format!(
                "stages 3–5 must share one width, got {c3}, {c4}, {c5}"
            )));
        }
        if self.mlrl_dilations.contains(&0) {
            return Err(Error::Config("mlrl_dilations must all be ≥ 1".into()));
        }
        if self.mdfa_attn_kernel == 0 || self.mdfa_attn_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "mdfa_attn_kernel must be odd and ≥ 1, got {}",
                self.mdfa_attn_kernel
            )));
        }
        if self.se_ratio == 0 {
            return Err(Error::Config("se_ratio must be ≥ 1".into()));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::Config(format!(
                "binarize_threshold must lie in (0, 1), got {}",
                self.binarize_threshold
            )));
        }
        Ok(())
    }

    pub fn se_hidden(&self, c: usize) -> usize {
        (c / self.se_ratio).max(1)
    }
}

/// Groups for a `c`-channel norm: the largest divisor of `c` not above 8.
pub fn norm_groups(c: usize) -> usize {
    (1..=c.min(8)).rev().find(|g| c.is_multiple_of(*g)).unwrap_or(1)
}
