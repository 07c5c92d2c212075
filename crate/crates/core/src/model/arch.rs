//! Resolved layer graph of a spec: shapes and configurations, no parameters.

use serde::{Deserialize, Serialize};

use super::spec::{ModelSpec, Variant};
use crate::attention::GsaConfig;
use crate::Result;

/// Spatial extents and channels of an activation, `[height, width, channels]`.
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    /// Bias-free convolution followed by BN, `padding = kernel / 2`.
    Conv {
        kernel: usize,
        stride: usize,
        c_in: usize,
        c_out: usize,
    },
    Gsa {
        config: GsaConfig,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool2x2,
    GlobalAvgPool,
    Fc {
        c_in: usize,
        c_out: usize,
    },
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Conv { .. } => "conv",
            Op::Gsa { .. } => "gsa",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool2x2 => "avg_pool",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::Fc { .. } => "fc",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub op: Op,
    pub input: Shape3,
    pub output: Shape3,
}

fn conv(name: String, input: Shape3, kernel: usize, stride: usize, c_out: usize) -> Layer {
    let (h, w) = (input[0].div_ceil(stride), input[1].div_ceil(stride));
    Layer {
        name,
        op: Op::Conv {
            kernel,
            stride,
            c_in: input[2],
            c_out,
        },
        input,
        output: [h, w, c_out],
    }
}

fn avg_pool(name: String, input: Shape3) -> Layer {
    Layer {
        name,
        op: Op::AvgPool2x2,
        input,
        output: [input[0] / 2, input[1] / 2, input[2]],
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlockKind {
    Conv3x3,
    Gsa,
}

/// One bottleneck: reduce, spatial layer (with optional pool after it), expand,
/// and an optional projection shortcut.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub name: String,
    pub kind: BlockKind,
    pub downsample: bool,
    pub reduce: Layer,
    pub spatial: Layer,
    pub pool: Option<Layer>,
    pub expand: Layer,
    pub shortcut: Vec<Layer>,
}

impl Block {
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        [&self.reduce, &self.spatial]
            .into_iter()
            .chain(&self.pool)
            .chain([&self.expand])
            .chain(&self.shortcut)
    }

    pub fn gsa_config(&self) -> Option<&GsaConfig> {
        match &self.spatial.op {
            Op::Gsa { config } => Some(config),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input: Shape3,
    pub stem: Vec<Layer>,
    pub blocks: Vec<Block>,
    pub head: Vec<Layer>,
}

impl Architecture {
    /// Resolves a validated spec into layers. Groups and blocks are numbered from 1.
    pub fn from_spec(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let input = [spec.input_size[0], spec.input_size[1], 3];
        let mut stem = vec![conv(
            "stem.conv".into(),
            input,
            spec.stem.kernel,
            spec.stem.stride,
            spec.stem_channels(),
        )];
        let mut cur = stem[0].output;
        if spec.stem.max_pool {
            let out = [cur[0].div_ceil(2), cur[1].div_ceil(2), cur[2]];
            stem.push(Layer {
                name: "stem.max_pool".into(),
                op: Op::MaxPool {
                    kernel: 3,
                    stride: 2,
                },
                input: cur,
                output: out,
            });
            cur = out;
        }

        let (widths, outputs) = (spec.widths(), spec.outputs());
        let mut blocks = Vec::new();
        for (g, &count) in spec.blocks().iter().enumerate() {
            let gsa = spec.group_uses_gsa[g];
            for b in 0..count {
                let name = format!("group{}.block{}", g + 1, b + 1);
                let downsample = g > 0 && b == 0;
                let stride = if downsample { 2 } else { 1 };
                let (width, out_c) = (widths[g], outputs[g]);
                let reduce = conv(format!("{name}.conv1"), cur, 1, 1, width);
                let (spatial, pool) = if gsa {
                    let [h, w, _] = reduce.output;
                    let mut config = GsaConfig::new(width, width, width, spec.heads, h, w);
                    config.content = spec.branches.content;
                    config.column = spec.branches.column;
                    config.row = spec.branches.row;
                    config.softmax_on_queries = spec.softmax_on_queries;
                    config.axial_content = spec.variant == Variant::AxialContent;
                    config.validate()?;
                    let layer = Layer {
                        name: format!("{name}.gsa"),
                        op: Op::Gsa { config },
                        input: reduce.output,
                        output: reduce.output,
                    };
                    let pool = downsample.then(|| avg_pool(format!("{name}.pool"), reduce.output));
                    (layer, pool)
                } else {
                    (
                        conv(format!("{name}.conv2"), reduce.output, 3, stride, width),
                        None,
                    )
                };
                let mid = pool.as_ref().unwrap_or(&spatial).output;
                let expand = conv(format!("{name}.conv3"), mid, 1, 1, out_c);
                let shortcut = if b == 0 {
                    if gsa && downsample {
                        let p = avg_pool(format!("{name}.shortcut.pool"), cur);
                        let c = conv(format!("{name}.shortcut.conv"), p.output, 1, 1, out_c);
                        vec![p, c]
                    } else {
                        vec![conv(format!("{name}.shortcut.conv"), cur, 1, stride, out_c)]
                    }
                } else {
                    Vec::new()
                };
                cur = expand.output;
                let kind = if gsa {
                    BlockKind::Gsa
                } else {
                    BlockKind::Conv3x3
                };
                blocks.push(Block {
                    name,
                    kind,
                    downsample,
                    reduce,
                    spatial,
                    pool,
                    expand,
                    shortcut,
                });
            }
        }
        let gap = Layer {
            name: "head.pool".into(),
            op: Op::GlobalAvgPool,
            input: cur,
            output: [1, 1, cur[2]],
        };
        let fc = Layer {
            name: "fc".into(),
            op: Op::Fc {
                c_in: cur[2],
                c_out: spec.num_classes,
            },
            input: [1, 1, cur[2]],
            output: [1, 1, spec.num_classes],
        };
        Ok(Self {
            input,
            stem,
            blocks,
            head: vec![gap, fc],
        })
    }

    /// Every layer in execution order (shortcuts after their block's main path).
    pub fn layers(&self) -> Vec<&Layer> {
        self.stem
            .iter()
            .chain(self.blocks.iter().flat_map(Block::layers))
            .chain(&self.head)
            .collect()
    }

    pub fn gsa_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.kind == BlockKind::Gsa)
            .count()
    }

    pub fn conv3x3_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.kind == BlockKind::Conv3x3)
            .count()
    }

    /// Spatial extent at the output of each group.
    pub fn group_resolutions(&self) -> Vec<[usize; 2]> {
        let mut out: Vec<[usize; 2]> = Vec::new();
        let mut last_group = "";
        for b in &self.blocks {
            let group = b.name.split('.').next().unwrap_or("");
            let res = [b.expand.output[0], b.expand.output[1]];
            if group == last_group {
                *out.last_mut().expect("group seen") = res;
            } else {
                out.push(res);
                last_group = group;
            }
        }
        out
    }
}
