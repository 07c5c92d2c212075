//! Stable JSON summary of a built network.

use serde::{Deserialize, Serialize};

use super::arch::{Architecture, Op, Shape3};
use super::build::Model;
use super::spec::ModelSpec;
use crate::attention::GsaConfig;
use crate::cost::layer_cost;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSummary {
    pub name: String,
    pub kind: String,
    pub input: Shape3,
    pub output: Shape3,
    pub params: u64,
    pub mults: u64,
    pub adds: u64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gsa: Option<GsaConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub spec: ModelSpec,
    pub gsa_modules: usize,
    pub conv3x3_blocks: usize,
    pub layers: Vec<LayerSummary>,
    pub total_params: u64,
    pub total_flops: u64,
}

impl ModelSummary {
    pub fn count_kind(&self, kind: &str) -> usize {
        self.layers.iter().filter(|l| l.kind == kind).count()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

pub fn describe_architecture(spec: &ModelSpec, arch: &Architecture) -> ModelSummary {
    let layers: Vec<LayerSummary> = arch
        .layers()
        .into_iter()
        .map(|l| {
            let (cost, _) = layer_cost(l);
            LayerSummary {
                name: l.name.clone(),
                kind: cost.kind,
                input: l.input,
                output: l.output,
                params: cost.params,
                mults: cost.mults,
                adds: cost.adds,
                gsa: match &l.op {
                    Op::Gsa { config } => Some(config.clone()),
                    _ => None,
                },
            }
        })
        .collect();
    ModelSummary {
        spec: spec.clone(),
        gsa_modules: arch.gsa_count(),
        conv3x3_blocks: arch.conv3x3_count(),
        total_params: layers.iter().map(|l| l.params).sum(),
        total_flops: layers.iter().map(|l| l.mults + l.adds).sum(),
        layers,
    }
}

pub fn describe_model(model: &Model) -> ModelSummary {
    describe_architecture(&model.spec, &model.arch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(preset: &str) -> ModelSummary {
        let spec = ModelSpec::preset(preset).unwrap();
        describe_architecture(&spec, &Architecture::from_spec(&spec).unwrap())
    }

    #[test]
    fn resnet50_weighted_layers() {
        let s = summary("resnet50");
        // stem conv, 16 x 3 bottleneck convs, 4 projection shortcuts
        assert_eq!(s.count_kind("conv"), 53);
        assert_eq!(s.count_kind("fc"), 1);
        assert_eq!(s.count_kind("gsa"), 0);
    }

    #[test]
    fn gsa_resnet50_entries() {
        let s = summary("gsa-resnet50");
        assert_eq!(s.count_kind("gsa"), 16);
        assert_eq!(s.gsa_modules, 16);
    }

    #[test]
    fn json_round_trip() {
        let s = summary("table3:101");
        let back: ModelSummary = serde_json::from_str(&s.to_json()).unwrap();
        assert_eq!(back, s);
    }
}
