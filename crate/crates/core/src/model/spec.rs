//! Declarative network descriptions and the named presets.
//!
//! A spec is JSON; every field except `depth` has a default:
//!
//! ```json
//! {
//!   "depth": 50,
//!   "blocks_per_group": [3, 4, 6, 3],
//!   "group_uses_gsa": [true, true, true, true],
//!   "branches": { "content": true, "column": true, "row": true },
//!   "variant": "standard",
//!   "input_size": [224, 224],
//!   "num_classes": 1000,
//!   "heads": 8,
//!   "softmax_on_queries": false,
//!   "zero_init_head": false,
//!   "stem": { "kernel": 7, "stride": 2, "channels": 64, "max_pool": true }
//! }
//! ```

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    AxialContent,
    MResnet50,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branches {
    pub content: bool,
    pub column: bool,
    pub row: bool,
}

impl Default for Branches {
    fn default() -> Self {
        Self {
            content: true,
            column: true,
            row: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
    pub max_pool: bool,
}

impl Default for StemSpec {
    fn default() -> Self {
        Self {
            kernel: 7,
            stride: 2,
            channels: 64,
            max_pool: true,
        }
    }
}

impl StemSpec {
    /// Total spatial reduction of the stem.
    pub fn reduction(&self) -> usize {
        self.stride * if self.max_pool { 2 } else { 1 }
    }
}

fn default_input() -> [usize; 2] {
    [224, 224]
}
fn default_classes() -> usize {
    1000
}
fn default_heads() -> usize {
    8
}
fn default_variant() -> Variant {
    Variant::Standard
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub depth: usize,
    /// Defaults to the canonical allocation for `depth`.
    #[serde(default)]
    pub blocks_per_group: Option<[usize; 4]>,
    #[serde(default)]
    pub group_uses_gsa: [bool; 4],
    #[serde(default)]
    pub branches: Branches,
    #[serde(default = "default_variant")]
    pub variant: Variant,
    #[serde(default = "default_input")]
    pub input_size: [usize; 2],
    #[serde(default = "default_classes")]
    pub num_classes: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default)]
    pub softmax_on_queries: bool,
    #[serde(default)]
    pub zero_init_head: bool,
    #[serde(default)]
    pub stem: StemSpec,
}

pub const PRESETS: [&str; 10] = [
    "resnet50",
    "resnet38",
    "resnet101",
    "gsa-resnet50",
    "gsa-resnet38",
    "gsa-resnet101",
    "m-gsa-resnet50",
    "axial-content-50",
    "table3:<content><column><row>",
    "table5:<g1><g2><g3><g4>",
];

/// Canonical bottleneck counts per group.
pub fn canonical_blocks(depth: usize) -> Option<[usize; 4]> {
    match depth {
        38 => Some([2, 3, 5, 2]),
        50 => Some([3, 4, 6, 3]),
        101 => Some([3, 4, 23, 3]),
        _ => None,
    }
}

fn bits<const N: usize>(text: &str) -> Option<[bool; N]> {
    let chars: Vec<char> = text.chars().collect();
    if chars.len() != N || !chars.iter().all(|c| matches!(c, '0' | '1')) {
        return None;
    }
    let mut out = [false; N];
    for (o, c) in out.iter_mut().zip(chars) {
        *o = c == '1';
    }
    Some(out)
}

impl ModelSpec {
    /// Convolutional ResNet with the canonical block allocation.
    pub fn resnet(depth: usize) -> Self {
        Self {
            depth,
            blocks_per_group: None,
            group_uses_gsa: [false; 4],
            branches: Branches::default(),
            variant: Variant::Standard,
            input_size: default_input(),
            num_classes: default_classes(),
            heads: default_heads(),
            softmax_on_queries: false,
            zero_init_head: false,
            stem: StemSpec::default(),
        }
    }

    /// Every 3x3 convolution replaced by a GSA module.
    pub fn gsa_resnet(depth: usize) -> Self {
        Self {
            group_uses_gsa: [true; 4],
            ..Self::resnet(depth)
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        let spec = match name {
            "resnet50" => Self::resnet(50),
            "resnet38" => Self::resnet(38),
            "resnet101" => Self::resnet(101),
            "gsa-resnet50" => Self::gsa_resnet(50),
            "gsa-resnet38" => Self::gsa_resnet(38),
            "gsa-resnet101" => Self::gsa_resnet(101),
            "m-gsa-resnet50" => Self {
                variant: Variant::MResnet50,
                ..Self::gsa_resnet(50)
            },
            "axial-content-50" => Self {
                variant: Variant::AxialContent,
                ..Self::gsa_resnet(50)
            },
            other => {
                if let Some(mask) = other.strip_prefix("table3:").and_then(bits::<3>) {
                    let [content, column, row] = mask;
                    Self {
                        branches: Branches {
                            content,
                            column,
                            row,
                        },
                        ..Self::gsa_resnet(50)
                    }
                } else if let Some(mask) = other.strip_prefix("table5:").and_then(bits::<4>) {
                    Self {
                        group_uses_gsa: mask,
                        ..Self::resnet(50)
                    }
                } else {
                    return Err(Error::Config(format!(
                        "unknown preset `{other}`; valid presets: {}",
                        PRESETS.join(", ")
                    )));
                }
            }
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Parses and validates a JSON spec. Syntax and type errors report line and column.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: Self =
            serde_json::from_str(text).map_err(|e| Error::Spec(vec![e.to_string()]))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serializes")
    }

    pub fn blocks(&self) -> [usize; 4] {
        self.blocks_per_group
            .or_else(|| canonical_blocks(self.depth))
            .unwrap_or([0; 4])
    }

    pub fn uses_gsa(&self) -> bool {
        self.group_uses_gsa.iter().any(|&g| g)
    }

    /// Collects every violation rather than stopping at the first.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        match canonical_blocks(self.depth) {
            None => problems.push(format!("depth: {} is not one of 38, 50, 101", self.depth)),
            Some(canon) => {
                if let Some(b) = self.blocks_per_group {
                    if b != canon {
                        problems.push(format!(
                            "blocks_per_group: {b:?} does not match depth {} ({canon:?})",
                            self.depth
                        ));
                    }
                }
            }
        }
        if self.variant == Variant::MResnet50 && self.depth != 50 {
            problems.push("variant: m_resnet50 requires depth 50".into());
        }
        if self.uses_gsa() && !(self.branches.content || self.branches.column || self.branches.row)
        {
            problems.push("branches: at least one of content, column, row must be enabled".into());
        }
        let s = &self.stem;
        if s.kernel == 0 || s.kernel.is_multiple_of(2) {
            problems.push(format!("stem.kernel: {} must be odd", s.kernel));
        }
        if !matches!(s.stride, 1 | 2) {
            problems.push(format!("stem.stride: {} must be 1 or 2", s.stride));
        }
        if s.channels == 0 {
            problems.push("stem.channels: must be positive".into());
        }
        let total = s.reduction().max(1) * 8;
        for (axis, &e) in ["height", "width"].iter().zip(&self.input_size) {
            if e == 0 || e % total != 0 {
                problems.push(format!(
                    "input_size: {axis} {e} must be a positive multiple of {total}"
                ));
            }
        }
        if self.num_classes == 0 {
            problems.push("num_classes: must be positive".into());
        }
        if self.heads == 0 {
            problems.push("heads: must be positive".into());
        } else if self.uses_gsa() {
            for (g, w) in self.widths().iter().enumerate() {
                if self.group_uses_gsa[g] && w % self.heads != 0 {
                    problems.push(format!(
                        "heads: group {} width {w} not divisible by {} heads",
                        g + 1,
                        self.heads
                    ));
                }
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(problems))
        }
    }

    pub fn stem_channels(&self) -> usize {
        match self.variant {
            Variant::MResnet50 => round8(self.stem.channels as f64 * M_SCALE),
            _ => self.stem.channels,
        }
    }

    /// Bottleneck widths (the channel count of the spatial layer) per group.
    pub fn widths(&self) -> [usize; 4] {
        let base = [64, 128, 256, 512];
        match self.variant {
            Variant::MResnet50 => base.map(|w| round8(w as f64 * M_SCALE)),
            _ => base,
        }
    }

    /// Block output channels per group.
    pub fn outputs(&self) -> [usize; 4] {
        let base = [256, 512, 1024, 2048];
        match self.variant {
            Variant::MResnet50 => base.map(|o| round8(o as f64 / 2.0 * M_SCALE)),
            _ => base,
        }
    }
}

const M_SCALE: f64 = 1.125;

fn round8(x: f64) -> usize {
    ((x / 8.0).round() as usize).max(1) * 8
}
