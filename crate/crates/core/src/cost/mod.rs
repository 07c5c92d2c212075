//! Parameter and FLOP accounting, and the empirical scaling benchmark.
//!
//! A contraction producing `M` outputs, each summing `k` products, costs
//! `M * k` multiplications and `M * k` additions. Softmax, BN, ReLU and pooling
//! are not included in the totals; their element counts go to the metadata.

mod bench;

pub use bench::{
    analytic_flops, bench_config, fit_slope, scaling_benchmark, BenchKernel, BenchReport, BenchRow,
    DEFAULT_SIDES,
};

use serde::{Deserialize, Serialize};

use crate::attention::GsaConfig;
use crate::model::{Architecture, Layer, Op};
use crate::tensor::{BN_EPSILON, BN_MOMENTUM};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub params: u64,
    pub mults: u64,
    pub adds: u64,
}

impl LayerCost {
    pub fn flops(&self) -> u64 {
        self.mults + self.adds
    }
}

/// Element-wise work left out of the FLOP totals.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExcludedOps {
    pub batch_norm_elements: u64,
    pub relu_elements: u64,
    pub softmax_elements: u64,
    pub pool_window_reads: u64,
    /// Embedding rows gathered when expanding relative to absolute positions.
    pub reindex_gathers: u64,
}

impl ExcludedOps {
    fn add(&mut self, o: &ExcludedOps) {
        self.batch_norm_elements += o.batch_norm_elements;
        self.relu_elements += o.relu_elements;
        self.softmax_elements += o.softmax_elements;
        self.pool_window_reads += o.pool_window_reads;
        self.reindex_gathers += o.reindex_gathers;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostMetadata {
    pub input_size: [usize; 2],
    pub flop_convention: String,
    pub params_include: String,
    pub bn_epsilon: f64,
    pub bn_momentum: f64,
    pub excluded: ExcludedOps,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub layers: Vec<LayerCost>,
    pub total_params: u64,
    pub total_mults: u64,
    pub total_adds: u64,
    pub metadata: CostMetadata,
}

impl CostReport {
    pub fn total_flops(&self) -> u64 {
        self.total_mults + self.total_adds
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> crate::Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// One line per layer plus a `total` line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,kind,params,mults,adds\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.name, l.kind, l.params, l.mults, l.adds
            ));
        }
        out.push_str(&format!(
            "total,,{},{},{}\n",
            self.total_params, self.total_mults, self.total_adds
        ));
        out
    }

    fn totals_from(layers: Vec<LayerCost>, metadata: CostMetadata) -> Self {
        Self {
            total_params: layers.iter().map(|l| l.params).sum(),
            total_mults: layers.iter().map(|l| l.mults).sum(),
            total_adds: layers.iter().map(|l| l.adds).sum(),
            layers,
            metadata,
        }
    }
}

/// Learnable scalars of a GSA module as configured (dead branches excluded),
/// output BN included.
pub fn gsa_param_count(cfg: &GsaConfig) -> u64 {
    let (d_in, dk, dv, kc) = (
        cfg.d_in as u64,
        cfg.d_k as u64,
        cfg.d_out as u64,
        cfg.key_channels() as u64,
    );
    let mut p = d_in * dk + 2 * dk + d_in * dv + 2 * dv + 2 * dv;
    if cfg.content {
        p += d_in * dk + 2 * dk;
    }
    if cfg.column {
        p += (2 * cfg.height as u64 - 1) * kc;
    }
    if cfg.row {
        p += (2 * cfg.width as u64 - 1) * kc;
    }
    if cfg.column && cfg.row {
        p += 2 * dv;
    }
    p
}

/// Multiply-accumulates of one GSA forward pass on a single image.
pub fn gsa_macs(cfg: &GsaConfig) -> u64 {
    let n = (cfg.height * cfg.width) as u64;
    let (d_in, dk, dv, kc) = (
        cfg.d_in as u64,
        cfg.d_k as u64,
        cfg.d_out as u64,
        cfg.key_channels() as u64,
    );
    let mut macs = n * d_in * (dk + dv);
    if cfg.content {
        macs += n * d_in * dk;
        // context K^T V and its application to Q, per pass
        let passes = if cfg.axial_content { 2 } else { 1 };
        macs += passes * 2 * n * kc * dv;
    }
    if cfg.column {
        macs += n * cfg.height as u64 * (dk + dv);
    }
    if cfg.row {
        macs += n * cfg.width as u64 * (dk + dv);
    }
    macs
}

fn numel(s: &[usize; 3]) -> u64 {
    (s[0] * s[1] * s[2]) as u64
}

/// Closed-form cost of one layer for a single image, and its excluded element-wise work.
pub fn layer_cost(layer: &Layer) -> (LayerCost, ExcludedOps) {
    let mut ex = ExcludedOps::default();
    let (params, macs) = match &layer.op {
        Op::Conv {
            kernel,
            c_in,
            c_out,
            ..
        } => {
            let k2 = (kernel * kernel) as u64;
            ex.batch_norm_elements = numel(&layer.output);
            (
                k2 * (*c_in as u64) * (*c_out as u64) + 2 * *c_out as u64,
                numel(&layer.output) * k2 * *c_in as u64,
            )
        }
        Op::Gsa { config } => {
            let n = (config.height * config.width) as u64;
            let (dk, dv) = (config.d_k as u64, config.d_out as u64);
            let projections = if config.content { 2 * dk + dv } else { dk + dv };
            let mid = if config.column && config.row { dv } else { 0 };
            ex.batch_norm_elements = n * (projections + mid + dv);
            if config.content {
                let passes = if config.axial_content { 2 } else { 1 };
                ex.softmax_elements = passes * n * dk;
                if config.softmax_on_queries {
                    ex.softmax_elements += passes * n * dk;
                }
            }
            let kc = config.key_channels() as u64;
            if config.column {
                ex.reindex_gathers += (config.height * config.height) as u64 * kc;
            }
            if config.row {
                ex.reindex_gathers += (config.width * config.width) as u64 * kc;
            }
            (gsa_param_count(config), gsa_macs(config))
        }
        Op::MaxPool { kernel, .. } => {
            ex.pool_window_reads = numel(&layer.output) * (kernel * kernel) as u64;
            (0, 0)
        }
        Op::AvgPool2x2 => {
            ex.pool_window_reads = numel(&layer.output) * 4;
            (0, 0)
        }
        Op::GlobalAvgPool => {
            ex.pool_window_reads = numel(&layer.input);
            (0, 0)
        }
        Op::Fc { c_in, c_out } => ((*c_in as u64 + 1) * *c_out as u64, (*c_in * *c_out) as u64),
    };
    let cost = LayerCost {
        name: layer.name.clone(),
        kind: layer.op.kind().to_string(),
        params,
        mults: macs,
        adds: macs,
    };
    (cost, ex)
}

fn relu_elements(arch: &Architecture) -> u64 {
    let mut total = numel(&arch.stem[0].output);
    for b in &arch.blocks {
        total += numel(&b.reduce.output) + numel(&b.spatial.output) + numel(&b.expand.output);
    }
    total
}

/// Full per-layer accounting of an architecture at its configured input size.
pub fn analyze(arch: &Architecture) -> CostReport {
    let mut excluded = ExcludedOps {
        relu_elements: relu_elements(arch),
        ..Default::default()
    };
    let mut layers = Vec::new();
    for layer in arch.layers() {
        let (cost, ex) = layer_cost(layer);
        excluded.add(&ex);
        layers.push(cost);
    }
    let metadata = CostMetadata {
        input_size: [arch.input[0], arch.input[1]],
        flop_convention: "mults = adds = output elements x contracted extent; FLOPs = mults + adds".into(),
        params_include: "weights, BN gamma/beta, relative embeddings, classifier weight and bias; not BN running statistics".into(),
        bn_epsilon: BN_EPSILON,
        bn_momentum: BN_MOMENTUM,
        excluded,
    };
    CostReport::totals_from(layers, metadata)
}

/// Parameter counts only (mults and adds left at zero).
pub fn count_params(arch: &Architecture) -> CostReport {
    let mut r = analyze(arch);
    for l in &mut r.layers {
        l.mults = 0;
        l.adds = 0;
    }
    CostReport::totals_from(r.layers, r.metadata)
}

/// FLOP counts only (params left at zero).
pub fn count_flops(arch: &Architecture) -> CostReport {
    let mut r = analyze(arch);
    for l in &mut r.layers {
        l.params = 0;
    }
    CostReport::totals_from(r.layers, r.metadata)
}

/// One row of a model comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub structure: String,
    pub operation: String,
    pub params: u64,
    pub flops: u64,
}

impl TableRow {
    pub fn new(
        structure: impl Into<String>,
        operation: impl Into<String>,
        report: &CostReport,
    ) -> Self {
        Self {
            structure: structure.into(),
            operation: operation.into(),
            params: report.total_params,
            flops: report.total_flops(),
        }
    }
}

/// Aligned text table with columns Structure, Operation, Params, FLOPs.
pub fn render_table(rows: &[TableRow]) -> String {
    let cells: Vec<[String; 4]> = rows
        .iter()
        .map(|r| {
            [
                r.structure.clone(),
                r.operation.clone(),
                format!("{:.1}M", r.params as f64 / 1e6),
                format!("{:.1}G", r.flops as f64 / 1e9),
            ]
        })
        .collect();
    let header = ["Structure", "Operation", "Params", "FLOPs"].map(String::from);
    let mut widths = header.clone().map(|h| h.len());
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let line = |row: &[String; 4]| {
        format!(
            "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}\n",
            row[0],
            row[1],
            row[2],
            row[3],
            w0 = widths[0],
            w1 = widths[1],
            w2 = widths[2],
            w3 = widths[3]
        )
    };
    let mut out = line(&header);
    out.push_str(&format!(
        "{}\n",
        "-".repeat(widths.iter().sum::<usize>() + 6)
    ));
    for row in &cells {
        out.push_str(&line(row));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::GsaParams;
    use crate::model::ModelSpec;

    #[test]
    fn pointwise_conv_with_bn() {
        let layer = Layer {
            name: "c".into(),
            op: Op::Conv {
                kernel: 1,
                stride: 1,
                c_in: 4,
                c_out: 8,
            },
            input: [1, 1, 4],
            output: [1, 1, 8],
        };
        assert_eq!(layer_cost(&layer).0.params, 48);
    }

    #[test]
    fn matrix_product_convention() {
        // (2x3)(3x4): 8 outputs, each a 3-term sum.
        let layer = Layer {
            name: "fc".into(),
            op: Op::Fc { c_in: 3, c_out: 4 },
            input: [1, 1, 3],
            output: [1, 1, 4],
        };
        let mut c = layer_cost(&layer).0;
        c.mults *= 2;
        c.adds *= 2;
        assert_eq!((c.mults, c.adds, c.flops()), (24, 24, 48));
    }

    #[test]
    fn gsa_params_match_live_tensors() {
        for (c, col, row) in [
            (true, true, true),
            (false, true, true),
            (true, false, false),
            (false, false, true),
        ] {
            for axial in [false, true] {
                let mut cfg = GsaConfig::new(16, 16, 16, 8, 7, 5).with_branches(c, col, row);
                cfg.axial_content = axial;
                let p = GsaParams::init(&cfg, 1).unwrap();
                assert_eq!(gsa_param_count(&cfg), p.live_param_count(&cfg) as u64);
            }
        }
    }

    #[test]
    fn totals_are_layer_sums_and_json_round_trips() {
        let arch = Architecture::from_spec(&ModelSpec::preset("gsa-resnet38").unwrap()).unwrap();
        let r = analyze(&arch);
        assert_eq!(
            r.total_params,
            r.layers.iter().map(|l| l.params).sum::<u64>()
        );
        assert_eq!(r.total_mults, r.layers.iter().map(|l| l.mults).sum::<u64>());
        assert_eq!(CostReport::from_json(&r.to_json()).unwrap(), r);
        assert_eq!(count_params(&arch).total_params, r.total_params);
        assert_eq!(count_flops(&arch).total_flops(), r.total_flops());
        assert_eq!(count_params(&arch).total_mults, 0);
    }

    #[test]
    fn table_layout() {
        let arch = Architecture::from_spec(&ModelSpec::preset("resnet50").unwrap()).unwrap();
        let text = render_table(&[TableRow::new("ResNet-50", "Convolution", &analyze(&arch))]);
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("Structure") && lines[0].ends_with("FLOPs"));
        assert!(
            lines[2].contains("25.6M") && lines[2].contains("8.2G"),
            "{text}"
        );
    }
}
