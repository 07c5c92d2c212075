//! Small GSA classifier trained end to end with the analytic backward pass.
//!
//! Network: pointwise stem conv, BN, ReLU; `gsa_blocks` residual blocks
//! `relu(x + gsa(x))`; global average pool; linear head.

use serde::{Deserialize, Serialize};

use super::build::{global_avg_pool, relu};
use crate::attention::{
    gsa_backward, gsa_forward, gsa_forward_recorded, GsaConfig, GsaParams, GsaPass,
};
use crate::tensor::{
    batch_norm, batch_norm_backward, batch_norm_cached, contract, pointwise_conv, seeded_init,
    BatchNormState, BnMode, InitScheme, Tensor, TensorError,
};
use crate::verify::randn;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySpec {
    pub input_size: usize,
    pub in_channels: usize,
    pub width: usize,
    pub n_heads: usize,
    pub gsa_blocks: usize,
    pub num_classes: usize,
    /// Zero classifier weights and bias, so the initial loss is `ln(num_classes)`.
    pub zero_init_head: bool,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self {
            input_size: 8,
            in_channels: 3,
            width: 8,
            n_heads: 2,
            gsa_blocks: 2,
            num_classes: 10,
            zero_init_head: true,
        }
    }
}

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.input_size == 0 || self.input_size > 32 {
            problems.push(format!("input_size: {} outside 1..=32", self.input_size));
        }
        if self.gsa_blocks == 0 || self.gsa_blocks > 3 {
            problems.push(format!("gsa_blocks: {} outside 1..=3", self.gsa_blocks));
        }
        if self.in_channels == 0 || self.num_classes < 2 {
            problems.push("in_channels must be positive and num_classes at least 2".into());
        }
        if self.n_heads == 0 || self.width == 0 || !self.width.is_multiple_of(self.n_heads) {
            problems.push(format!(
                "width {} must be a positive multiple of n_heads {}",
                self.width, self.n_heads
            ));
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Spec(problems))
        }
    }

    pub fn gsa_config(&self) -> GsaConfig {
        GsaConfig::new(
            self.width,
            self.width,
            self.width,
            self.n_heads,
            self.input_size,
            self.input_size,
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyModel {
    pub spec: ToySpec,
    pub stem_w: Tensor,
    pub stem_bn: BatchNormState,
    pub blocks: Vec<GsaParams>,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
}

impl ToyModel {
    pub fn init(spec: &ToySpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let cfg = spec.gsa_config();
        let blocks = (0..spec.gsa_blocks)
            .map(|i| GsaParams::init(&cfg, seed.wrapping_mul(97).wrapping_add(i as u64 + 10)))
            .collect::<Result<_>>()?;
        let head = if spec.zero_init_head {
            InitScheme::Zeros
        } else {
            InitScheme::FanInNormal { fan_in: spec.width }
        };
        Ok(Self {
            spec: spec.clone(),
            stem_w: seeded_init(
                &[spec.in_channels, spec.width],
                InitScheme::FanInNormal {
                    fan_in: spec.in_channels,
                },
                seed.wrapping_mul(97),
            ),
            stem_bn: BatchNormState::identity(spec.width),
            blocks,
            fc_w: seeded_init(
                &[spec.width, spec.num_classes],
                head,
                seed.wrapping_mul(97).wrapping_add(1),
            ),
            fc_b: Tensor::zeros(&[spec.num_classes]),
        })
    }

    /// Logits `[b, num_classes]`.
    pub fn forward(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let cfg = self.spec.gsa_config();
        let mut h = relu(&batch_norm(&pointwise_conv(x, &self.stem_w)?, &self.stem_bn, mode)?.0);
        for p in &self.blocks {
            h = relu(&h.add(&gsa_forward(&h, p, &cfg, mode)?)?);
        }
        linear(&global_avg_pool(&h)?, &self.fc_w, &self.fc_b)
    }

    /// Trainable tensors in a fixed order.
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = vec![
            &mut self.stem_w,
            &mut self.stem_bn.gamma,
            &mut self.stem_bn.beta,
        ];
        for p in &mut self.blocks {
            v.extend(p.named_mut().into_iter().map(|(_, t)| t));
        }
        v.push(&mut self.fc_w);
        v.push(&mut self.fc_b);
        v
    }
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let y = contract("bc,ck->bk", &[x, w])?;
    let k = b.numel();
    Ok(Tensor::from_fn(y.shape(), |i| {
        y.data()[i[0] * k + i[1]] + b.data()[i[1]]
    }))
}

/// Labeled images `[n, s, s, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// One Gaussian template per class plus independent Gaussian noise per sample.
pub fn synthetic_dataset(
    spec: &ToySpec,
    per_class: usize,
    noise: f64,
    seed: u64,
) -> Result<Dataset> {
    spec.validate()?;
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    let (s, c, k) = (spec.input_size, spec.in_channels, spec.num_classes);
    let templates = randn(&[k, s, s, c], seed);
    let n = k * per_class;
    let noise_t = randn(&[n, s, s, c], seed.wrapping_add(1));
    let px = s * s * c;
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    let mut data = Vec::with_capacity(n * px);
    for (i, &label) in labels.iter().enumerate() {
        let t = &templates.data()[label * px..][..px];
        let e = &noise_t.data()[i * px..][..px];
        data.extend(t.iter().zip(e).map(|(a, b)| a + noise * b));
    }
    Ok(Dataset {
        images: Tensor::new(vec![n, s, s, c], data)?,
        labels,
        num_classes: k,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.1,
            momentum: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Full-batch cross-entropy before each update.
    pub losses: Vec<f64>,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.losses.iter().enumerate() {
            out.push_str(&format!("{i},{l}\n"));
        }
        out
    }
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let k = logits.shape()[1];
    let b = labels.len();
    let mut grad = logits.clone();
    let mut loss = 0.0;
    for (row, &y) in grad.data_mut().chunks_mut(k).zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
        loss += total.ln() + max - row[y];
        for v in row.iter_mut() {
            *v = (*v - max).exp() / total / b as f64;
        }
        row[y] -= 1.0 / b as f64;
    }
    (loss / b as f64, grad)
}

fn relu_mask(dy: &Tensor, pre: &Tensor) -> Result<Tensor> {
    Ok(dy.zip_map(pre, |g, z| if z > 0.0 { g } else { 0.0 })?)
}

/// Loss and gradients (ordered as [`ToyModel::params_mut`]) on one full batch.
fn loss_and_grads(model: &mut ToyModel, data: &Dataset) -> Result<(f64, Vec<Tensor>)> {
    let cfg = model.spec.gsa_config();
    let x = &data.images;
    let (z, stem_state, stem_cache) = batch_norm_cached(
        &pointwise_conv(x, &model.stem_w)?,
        &model.stem_bn,
        BnMode::Train,
    )?;
    let mut h = relu(&z);
    let mut passes: Vec<(GsaPass, Tensor)> = Vec::new();
    for p in &model.blocks {
        let pass = gsa_forward_recorded(&h, p, &cfg, BnMode::Train)?;
        let u = h.add(&pass.output)?;
        h = relu(&u);
        passes.push((pass, u));
    }
    let pooled = global_avg_pool(&h)?;
    let logits = linear(&pooled, &model.fc_w, &model.fc_b)?;
    let (loss, d_logits) = cross_entropy(&logits, &data.labels);

    let d_fc_w = contract("bc,bk->ck", &[&pooled, &d_logits])?;
    let k = model.spec.num_classes;
    let d_fc_b = Tensor::from_fn(&[k], |i| {
        (0..data.labels.len())
            .map(|b| d_logits.data()[b * k + i[0]])
            .sum()
    });
    let d_pooled = contract("bk,ck->bc", &[&d_logits, &model.fc_w])?;
    let s = h.shape().to_vec();
    let area = (s[1] * s[2]) as f64;
    let mut dh = Tensor::from_fn(&s, |i| d_pooled.data()[i[0] * s[3] + i[3]] / area);

    let mut block_grads = Vec::with_capacity(passes.len());
    for (p, (pass, u)) in model.blocks.iter().zip(&passes).rev() {
        let du = relu_mask(&dh, u)?;
        let g = gsa_backward(pass, p, &cfg, &du)?;
        dh = du.add(&g.x)?;
        block_grads.push(g.params);
    }
    block_grads.reverse();

    let dz = relu_mask(&dh, &z)?;
    let (d_conv, d_gamma, d_beta) = batch_norm_backward(&dz, &stem_cache, &model.stem_bn.gamma)?;
    let pixels = x.numel() / model.spec.in_channels;
    let x2 = x.clone().reshape(&[pixels, model.spec.in_channels])?;
    let d2 = d_conv.reshape(&[pixels, model.spec.width])?;
    let d_stem = contract("pd,pe->de", &[&x2, &d2])?;

    model.stem_bn.running_mean = stem_state.running_mean;
    model.stem_bn.running_var = stem_state.running_var;
    for (p, (pass, _)) in model.blocks.iter_mut().zip(&passes) {
        p.absorb_running_stats(&pass.bn_states);
    }

    let mut grads = vec![d_stem, d_gamma, d_beta];
    for g in block_grads {
        grads.extend(g.named().into_iter().map(|(_, t)| t.clone()));
    }
    grads.push(d_fc_w);
    grads.push(d_fc_b);
    Ok((loss, grads))
}

/// Full-batch SGD with momentum (`v = momentum * v + g`, `p -= lr * v`).
/// A non-finite loss stops training with [`Error::Diverged`].
pub fn train_toy(model: &mut ToyModel, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    if data.images.shape()[1..]
        != [
            model.spec.input_size,
            model.spec.input_size,
            model.spec.in_channels,
        ]
    {
        return Err(TensorError::Shape(format!(
            "dataset images {:?} do not fit {:?}",
            data.images.shape(),
            model.spec
        ))
        .into());
    }
    if data.num_classes != model.spec.num_classes
        || data.labels.iter().any(|&l| l >= data.num_classes)
    {
        return Err(Error::Config(
            "dataset labels do not match num_classes".into(),
        ));
    }
    let mut velocity: Vec<Tensor> = model
        .params_mut()
        .iter()
        .map(|t| Tensor::zeros(t.shape()))
        .collect();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grads) = loss_and_grads(model, data)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        losses.push(loss);
        for ((p, v), g) in model
            .params_mut()
            .into_iter()
            .zip(&mut velocity)
            .zip(&grads)
        {
            for ((pv, vv), gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vv = cfg.momentum * *vv + gv;
                *pv -= cfg.lr * *vv;
            }
        }
    }
    Ok(TrainReport { losses })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ToySpec {
        ToySpec {
            input_size: 4,
            width: 4,
            num_classes: 3,
            ..ToySpec::default()
        }
    }

    #[test]
    fn zero_head_starts_at_log_classes() {
        let spec = tiny();
        let data = synthetic_dataset(&spec, 2, 0.5, 1).unwrap();
        let mut m = ToyModel::init(&spec, 1).unwrap();
        let r = train_toy(
            &mut m,
            &data,
            &TrainConfig {
                steps: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((r.initial_loss() - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let spec = ToySpec {
            zero_init_head: false,
            ..tiny()
        };
        let data = synthetic_dataset(&spec, 2, 0.5, 2).unwrap();
        let mut m = ToyModel::init(&spec, 2).unwrap();
        let r = train_toy(
            &mut m,
            &data,
            &TrainConfig {
                steps: 5,
                lr: 0.0,
                momentum: 0.9,
            },
        )
        .unwrap();
        assert!(r.losses.iter().all(|&l| l == r.losses[0]));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let spec = ToySpec {
            zero_init_head: false,
            gsa_blocks: 1,
            ..tiny()
        };
        let data = synthetic_dataset(&spec, 2, 0.5, 3).unwrap();
        let base = ToyModel::init(&spec, 3).unwrap();
        let (_, grads) = loss_and_grads(&mut base.clone(), &data).unwrap();
        let loss_at = |m: &ToyModel| {
            let (l, _) = cross_entropy(
                &m.forward(&data.images, BnMode::Train).unwrap(),
                &data.labels,
            );
            l
        };
        let step = 1e-5;
        let count = base.clone().params_mut().len();
        for (pi, g) in grads.iter().enumerate().take(count) {
            for i in (0..g.numel()).step_by(7) {
                let mut plus = base.clone();
                plus.params_mut()[pi].data_mut()[i] += step;
                let mut minus = base.clone();
                minus.params_mut()[pi].data_mut()[i] -= step;
                let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
                assert!(
                    (numeric - g.data()[i]).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "param {pi} index {i}: {numeric} vs {}",
                    g.data()[i]
                );
            }
        }
    }

    #[test]
    fn divergence_is_reported() {
        let spec = ToySpec {
            zero_init_head: false,
            ..tiny()
        };
        let data = synthetic_dataset(&spec, 2, 0.5, 4).unwrap();
        let mut m = ToyModel::init(&spec, 4).unwrap();
        m.fc_w = m.fc_w.map(|_| f64::NAN);
        match train_toy(&mut m, &data, &TrainConfig::default()) {
            Err(Error::Diverged { step: 0, .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn spec_limits() {
        assert!(ToySpec {
            input_size: 64,
            ..tiny()
        }
        .validate()
        .is_err());
        assert!(ToySpec {
            gsa_blocks: 4,
            ..tiny()
        }
        .validate()
        .is_err());
    }
}
