//! Parameterized networks and their forward pass.

use std::collections::BTreeMap;

use super::arch::{Architecture, Block, Layer, Op};
use super::spec::ModelSpec;
use crate::attention::{gsa_forward, GsaParams, ParamBundle};
use crate::tensor::{
    avg_pool_2x2, batch_norm, batched_matmul, contract, pointwise_conv, seeded_init,
    BatchNormState, BnMode, InitScheme, Tensor, TensorError,
};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    /// `[kernel, kernel, c_in, c_out]`.
    pub weight: Tensor,
    pub bn: BatchNormState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub arch: Architecture,
    pub convs: BTreeMap<String, ConvParams>,
    pub gsa: BTreeMap<String, GsaParams>,
    /// `[c_in, num_classes]`.
    pub fc_weight: Tensor,
    pub fc_bias: Tensor,
}

fn layer_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_mul(0x2545_F491_4F6C_DD1D)
        .wrapping_add(index as u64 + 1)
}

/// Builds the architecture and initializes every parameter deterministically from `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<Model> {
    let arch = Architecture::from_spec(spec)?;
    let mut convs = BTreeMap::new();
    let mut gsa = BTreeMap::new();
    let mut fc = None;
    for (i, layer) in arch.layers().into_iter().enumerate() {
        let s = layer_seed(seed, i);
        match &layer.op {
            Op::Conv {
                kernel,
                c_in,
                c_out,
                ..
            } => {
                let shape = [*kernel, *kernel, *c_in, *c_out];
                let weight = seeded_init(
                    &shape,
                    InitScheme::FanInNormal {
                        fan_in: kernel * kernel * c_in,
                    },
                    s,
                );
                convs.insert(
                    layer.name.clone(),
                    ConvParams {
                        weight,
                        bn: BatchNormState::identity(*c_out),
                    },
                );
            }
            Op::Gsa { config } => {
                gsa.insert(layer.name.clone(), GsaParams::init(config, s)?);
            }
            Op::Fc { c_in, c_out } => {
                let scheme = if spec.zero_init_head {
                    InitScheme::Zeros
                } else {
                    InitScheme::FanInNormal { fan_in: *c_in }
                };
                fc = Some((
                    seeded_init(&[*c_in, *c_out], scheme, s),
                    Tensor::zeros(&[*c_out]),
                ));
            }
            _ => {}
        }
    }
    let (fc_weight, fc_bias) = fc.expect("architecture ends in a classifier");
    Ok(Model {
        spec: spec.clone(),
        arch,
        convs,
        gsa,
        fc_weight,
        fc_bias,
    })
}

fn bn_entries(bundle: &mut ParamBundle, prefix: &str, bn: &BatchNormState) {
    bundle.insert(format!("{prefix}.gamma"), bn.gamma.clone());
    bundle.insert(format!("{prefix}.beta"), bn.beta.clone());
    bundle.insert(format!("{prefix}.running_mean"), bn.running_mean.clone());
    bundle.insert(format!("{prefix}.running_var"), bn.running_var.clone());
}

fn take(bundle: &ParamBundle, name: &str, like: &Tensor) -> Result<Tensor> {
    let t = bundle
        .get(name)
        .ok_or_else(|| Error::Bundle(format!("missing tensor `{name}`")))?;
    if t.shape() != like.shape() {
        return Err(Error::Bundle(format!(
            "`{name}` has shape {:?}, expected {:?}",
            t.shape(),
            like.shape()
        )));
    }
    Ok(t.clone())
}

fn load_bn(bundle: &ParamBundle, prefix: &str, bn: &mut BatchNormState) -> Result<()> {
    bn.gamma = take(bundle, &format!("{prefix}.gamma"), &bn.gamma)?;
    bn.beta = take(bundle, &format!("{prefix}.beta"), &bn.beta)?;
    bn.running_mean = take(bundle, &format!("{prefix}.running_mean"), &bn.running_mean)?;
    bn.running_var = take(bundle, &format!("{prefix}.running_var"), &bn.running_var)?;
    Ok(())
}

const GSA_BNS: [&str; 5] = ["bn_K", "bn_Q", "bn_V", "bn_mid", "bn_out"];

fn gsa_bns(p: &mut GsaParams) -> [&mut BatchNormState; 5] {
    [
        &mut p.kqv.bn_k,
        &mut p.kqv.bn_q,
        &mut p.kqv.bn_v,
        &mut p.bn_mid,
        &mut p.bn_out,
    ]
}

impl Model {
    /// Every parameter and running statistic, keyed like `group2.block1.gsa.W_Q`.
    pub fn to_bundle(&self) -> ParamBundle {
        let mut bundle = ParamBundle::default();
        for (name, c) in &self.convs {
            bundle.insert(format!("{name}.weight"), c.weight.clone());
            bn_entries(&mut bundle, &format!("{name}.bn"), &c.bn);
        }
        for (name, p) in &self.gsa {
            for (pname, t) in p.named() {
                if !pname.starts_with("bn_") {
                    bundle.insert(format!("{name}.{pname}"), t.clone());
                }
            }
            let mut p = p.clone();
            for (bn_name, bn) in GSA_BNS.iter().zip(gsa_bns(&mut p)) {
                bn_entries(&mut bundle, &format!("{name}.{bn_name}"), bn);
            }
        }
        bundle.insert("fc.weight", self.fc_weight.clone());
        bundle.insert("fc.bias", self.fc_bias.clone());
        bundle
    }

    /// Rebuilds a model for `spec` with tensors taken from `bundle`.
    pub fn from_bundle(spec: &ModelSpec, bundle: &ParamBundle) -> Result<Self> {
        let mut model = build_model(spec, 0)?;
        let expected = model.to_bundle();
        if let Some(extra) = bundle.tensors.keys().find(|k| expected.get(k).is_none()) {
            return Err(Error::Bundle(format!("unexpected tensor `{extra}`")));
        }
        for (name, c) in model.convs.iter_mut() {
            c.weight = take(bundle, &format!("{name}.weight"), &c.weight)?;
            load_bn(bundle, &format!("{name}.bn"), &mut c.bn)?;
        }
        for (name, p) in model.gsa.iter_mut() {
            for (pname, slot) in p.named_mut() {
                if !pname.starts_with("bn_") {
                    *slot = take(bundle, &format!("{name}.{pname}"), slot)?;
                }
            }
            for (bn_name, bn) in GSA_BNS.iter().zip(gsa_bns(p)) {
                load_bn(bundle, &format!("{name}.{bn_name}"), bn)?;
            }
        }
        model.fc_weight = take(bundle, "fc.weight", &model.fc_weight)?;
        model.fc_bias = take(bundle, "fc.bias", &model.fc_bias)?;
        Ok(model)
    }
}

pub(crate) fn relu(t: &Tensor) -> Tensor {
    t.map(|v| v.max(0.0))
}

/// Zero-padded `kernel x kernel` convolution with padding `kernel / 2`, via
/// patch extraction and one matrix product.
pub(crate) fn conv2d(x: &Tensor, w: &Tensor, stride: usize) -> Result<Tensor> {
    let [k, k2, c_in, c_out] = <[usize; 4]>::try_from(w.shape())
        .map_err(|_| TensorError::Shape(format!("conv weight of rank {}", w.rank())))?;
    let [b, h, wd, c] = <[usize; 4]>::try_from(x.shape())
        .map_err(|_| TensorError::Shape(format!("conv input of rank {}", x.rank())))?;
    if k != k2 || c != c_in {
        return Err(TensorError::Shape(format!(
            "conv weight {:?} on input {:?}",
            w.shape(),
            x.shape()
        ))
        .into());
    }
    let (oh, ow) = (h.div_ceil(stride), wd.div_ceil(stride));
    if k == 1 {
        let sub = if stride == 1 {
            x.clone()
        } else {
            Tensor::from_fn(&[b, oh, ow, c], |i| {
                x.at(&[i[0], i[1] * stride, i[2] * stride, i[3]])
            })
        };
        return Ok(pointwise_conv(&sub, &w.clone().reshape(&[c_in, c_out])?)?);
    }
    let pad = k / 2;
    let patch = k * k * c;
    let mut cols = vec![0.0; b * oh * ow * patch];
    let xd = x.data();
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((bi * oh + oy) * ow + ox) * patch;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        let src = ((bi * h + iy as usize) * wd + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&xd[src..src + c]);
                    }
                }
            }
        }
    }
    let out = batched_matmul(&cols, w.data(), 1, b * oh * ow, patch, c_out);
    Ok(Tensor::new(vec![b, oh, ow, c_out], out)?)
}

/// 3x3, stride 2, padding 1 max pool; padded cells never win.
pub(crate) fn max_pool_3x3(x: &Tensor) -> Result<Tensor> {
    let [b, h, w, c] = <[usize; 4]>::try_from(x.shape())
        .map_err(|_| TensorError::Shape(format!("max pool input of rank {}", x.rank())))?;
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    Ok(Tensor::from_fn(&[b, oh, ow, c], |i| {
        let mut best = f64::NEG_INFINITY;
        for ky in 0..3 {
            for kx in 0..3 {
                let (iy, ix) = ((i[1] * 2 + ky) as isize - 1, (i[2] * 2 + kx) as isize - 1);
                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    best = best.max(x.at(&[i[0], iy as usize, ix as usize, i[3]]));
                }
            }
        }
        best
    }))
}

/// Mean over the spatial axes: `[b, h, w, c] -> [b, c]`.
pub(crate) fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    if s.len() != 4 {
        return Err(TensorError::Shape(format!("global pool input {s:?}")).into());
    }
    let (b, px, c) = (s[0], s[1] * s[2], s[3]);
    let mut out = vec![0.0; b * c];
    for bi in 0..b {
        for p in 0..px {
            let src = &x.data()[(bi * px + p) * c..][..c];
            for (o, v) in out[bi * c..][..c].iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    Ok(Tensor::new(
        vec![b, c],
        out.into_iter().map(|v| v / px as f64).collect(),
    )?)
}

impl Model {
    fn conv_bn(&self, layer: &Layer, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let Op::Conv { stride, .. } = layer.op else {
            return Err(Error::Config(format!(
                "`{}` is not a convolution",
                layer.name
            )));
        };
        let p = &self.convs[&layer.name];
        Ok(batch_norm(&conv2d(x, &p.weight, stride)?, &p.bn, mode)?.0)
    }

    fn block_forward(&self, block: &Block, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let mut y = relu(&self.conv_bn(&block.reduce, x, mode)?);
        y = match &block.spatial.op {
            Op::Gsa { config } => relu(&gsa_forward(
                &y,
                &self.gsa[&block.spatial.name],
                config,
                mode,
            )?),
            _ => relu(&self.conv_bn(&block.spatial, &y, mode)?),
        };
        if block.pool.is_some() {
            y = avg_pool_2x2(&y)?;
        }
        y = self.conv_bn(&block.expand, &y, mode)?;
        let mut shortcut = x.clone();
        for layer in &block.shortcut {
            shortcut = match layer.op {
                Op::AvgPool2x2 => avg_pool_2x2(&shortcut)?,
                _ => self.conv_bn(layer, &shortcut, mode)?,
            };
        }
        Ok(relu(&y.add(&shortcut)?))
    }
}

/// Logits `[b, num_classes]` for images `[b, height, width, 3]`.
///
/// In train mode BN uses batch statistics; running statistics are not updated.
pub fn model_forward(model: &Model, x: &Tensor, mode: BnMode) -> Result<Tensor> {
    let [h, w, c] = model.arch.input;
    if x.rank() != 4 || x.shape()[1..] != [h, w, c] {
        return Err(TensorError::Shape(format!(
            "model expects [b, {h}, {w}, {c}], got {:?}",
            x.shape()
        ))
        .into());
    }
    let mut y = relu(&model.conv_bn(&model.arch.stem[0], x, mode)?);
    if model.arch.stem.len() > 1 {
        y = max_pool_3x3(&y)?;
    }
    for block in &model.arch.blocks {
        y = model.block_forward(block, &y, mode)?;
    }
    let pooled = global_avg_pool(&y)?;
    let logits = contract("bc,ck->bk", &[&pooled, &model.fc_weight])?;
    let bias = &model.fc_bias;
    let k = bias.numel();
    Ok(Tensor::from_fn(logits.shape(), |i| {
        logits.data()[i[0] * k + i[1]] + bias.data()[i[1]]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::randn;

    fn small(preset: &str) -> ModelSpec {
        ModelSpec {
            input_size: [32, 32],
            num_classes: 5,
            ..ModelSpec::preset(preset).unwrap()
        }
    }

    #[test]
    fn conv2d_matches_direct_loops() {
        let x = randn(&[2, 5, 4, 3], 1);
        let w = randn(&[3, 3, 3, 2], 2);
        for stride in [1, 2] {
            let y = conv2d(&x, &w, stride).unwrap();
            let (oh, ow) = (y.shape()[1], y.shape()[2]);
            for b in 0..2 {
                for oy in 0..oh {
                    for ox in 0..ow {
                        for co in 0..2 {
                            let mut acc = 0.0;
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (iy, ix) = (
                                        (oy * stride + ky) as isize - 1,
                                        (ox * stride + kx) as isize - 1,
                                    );
                                    if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                        continue;
                                    }
                                    for ci in 0..3 {
                                        acc += x.at(&[b, iy as usize, ix as usize, ci])
                                            * w.at(&[ky, kx, ci, co]);
                                    }
                                }
                            }
                            assert!((y.at(&[b, oy, ox, co]) - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn strided_pointwise_subsamples() {
        let x = randn(&[1, 4, 4, 2], 3);
        let w = randn(&[1, 1, 2, 3], 4);
        let y = conv2d(&x, &w, 2).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2, 3]);
        let expect: f64 = (0..2)
            .map(|c| x.at(&[0, 2, 2, c]) * w.at(&[0, 0, c, 1]))
            .sum();
        assert!((y.at(&[0, 1, 1, 1]) - expect).abs() < 1e-12);
    }

    #[test]
    fn max_pool_and_global_pool() {
        let x = Tensor::from_fn(&[1, 4, 4, 1], |i| (i[1] * 4 + i[2]) as f64);
        let y = max_pool_3x3(&x).unwrap();
        assert_eq!(y.data(), &[5.0, 7.0, 13.0, 15.0]);
        let g = global_avg_pool(&x).unwrap();
        assert_eq!(g.data(), &[7.5]);
    }

    #[test]
    fn same_seed_same_parameters() {
        let spec = small("gsa-resnet50");
        assert_eq!(
            build_model(&spec, 3).unwrap(),
            build_model(&spec, 3).unwrap()
        );
        assert_ne!(
            build_model(&spec, 3).unwrap().fc_weight,
            build_model(&spec, 4).unwrap().fc_weight
        );
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let spec = ModelSpec {
            zero_init_head: true,
            ..small("table5:0011")
        };
        let m = build_model(&spec, 1).unwrap();
        let y = model_forward(&m, &randn(&[2, 32, 32, 3], 5), BnMode::Infer).unwrap();
        assert_eq!(y.shape(), &[2, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_input_extent_is_rejected() {
        let m = build_model(&small("resnet50"), 1).unwrap();
        assert!(model_forward(&m, &randn(&[1, 64, 64, 3], 1), BnMode::Infer).is_err());
    }

    #[test]
    fn bundle_round_trip() {
        let spec = small("gsa-resnet38");
        let m = build_model(&spec, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        m.to_bundle().save(dir.path()).unwrap();
        let back = Model::from_bundle(&spec, &ParamBundle::load(dir.path()).unwrap()).unwrap();
        assert_eq!(back, m);
    }
}
