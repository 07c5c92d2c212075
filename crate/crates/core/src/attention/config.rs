use serde::{Deserialize, Serialize};

use crate::tensor::{seeded_init, BatchNormState, InitScheme, Tensor};
use crate::{Error, Result};

/// Hyperparameters of one GSA module.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GsaConfig {
    pub d_in: usize,
    /// Total key/query channels across heads.
    pub d_k: usize,
    /// Total value/output channels across heads.
    pub d_out: usize,
    pub n_heads: usize,
    pub height: usize,
    pub width: usize,
    /// Largest relative shift attended to by the positional passes.
    pub window: usize,
    pub content: bool,
    pub column: bool,
    pub row: bool,
    pub softmax_on_queries: bool,
    /// Replace global content attention with column-then-row content attention.
    pub axial_content: bool,
}

impl GsaConfig {
    /// All branches on, global window `max(height, width)`.
    pub fn new(
        d_in: usize,
        d_k: usize,
        d_out: usize,
        n_heads: usize,
        height: usize,
        width: usize,
    ) -> Self {
        Self {
            d_in,
            d_k,
            d_out,
            n_heads,
            height,
            width,
            window: height.max(width),
            content: true,
            column: true,
            row: true,
            softmax_on_queries: false,
            axial_content: false,
        }
    }

    pub fn with_branches(mut self, content: bool, column: bool, row: bool) -> Self {
        self.content = content;
        self.column = column;
        self.row = row;
        self
    }

    pub fn with_window(mut self, window: usize) -> Self {
        self.window = window;
        self
    }

    pub fn key_channels(&self) -> usize {
        self.d_k / self.n_heads
    }

    pub fn value_channels(&self) -> usize {
        self.d_out / self.n_heads
    }

    pub fn positional(&self) -> bool {
        self.column || self.row
    }

    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.d_in == 0 || self.d_k == 0 || self.d_out == 0 || self.height == 0 || self.width == 0
        {
            problems.push("channel and spatial extents must be positive".to_string());
        }
        if self.n_heads == 0 {
            problems.push("n_heads must be positive".to_string());
        } else {
            if !self.d_k.is_multiple_of(self.n_heads) {
                problems.push(format!(
                    "d_k {} not divisible by {} heads",
                    self.d_k, self.n_heads
                ));
            }
            if !self.d_out.is_multiple_of(self.n_heads) {
                problems.push(format!(
                    "d_out {} not divisible by {} heads",
                    self.d_out, self.n_heads
                ));
            }
        }
        let extent = self.height.max(self.width);
        if self.window < 1 || self.window > extent {
            problems.push(format!("window {} outside 1..={extent}", self.window));
        }
        if !(self.content || self.column || self.row) {
            problems.push("at least one branch must be enabled".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// 1x1 projection weights for keys, queries and values, each followed by BN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KqvWeights {
    pub w_k: Tensor,
    pub w_q: Tensor,
    pub w_v: Tensor,
    pub bn_k: BatchNormState,
    pub bn_q: BatchNormState,
    pub bn_v: BatchNormState,
}

/// Relative position embeddings shared by every head of one module.
///
/// Row `r` of `r_col` is the embedding of vertical shift `r - (height - 1)`;
/// `r_row` does the same for horizontal shifts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelPosEmbedding {
    pub r_col: Tensor,
    pub r_row: Tensor,
}

/// Every learnable tensor of a GSA module, including its output BN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GsaParams {
    pub kqv: KqvWeights,
    pub emb: RelPosEmbedding,
    pub bn_mid: BatchNormState,
    pub bn_out: BatchNormState,
}

impl GsaParams {
    /// Fan-in normal projections and embeddings, identity BN.
    pub fn init(cfg: &GsaConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let proj = |cols: usize, s: u64| {
            seeded_init(
                &[cfg.d_in, cols],
                InitScheme::FanInNormal { fan_in: cfg.d_in },
                s,
            )
        };
        let kc = cfg.key_channels();
        let emb_init = InitScheme::FanInNormal { fan_in: kc };
        Ok(Self {
            kqv: KqvWeights {
                w_k: proj(cfg.d_k, seed.wrapping_mul(6).wrapping_add(1)),
                w_q: proj(cfg.d_k, seed.wrapping_mul(6).wrapping_add(2)),
                w_v: proj(cfg.d_out, seed.wrapping_mul(6).wrapping_add(3)),
                bn_k: BatchNormState::identity(cfg.d_k),
                bn_q: BatchNormState::identity(cfg.d_k),
                bn_v: BatchNormState::identity(cfg.d_out),
            },
            emb: RelPosEmbedding {
                r_col: seeded_init(
                    &[2 * cfg.height - 1, kc],
                    emb_init,
                    seed.wrapping_mul(6).wrapping_add(4),
                ),
                r_row: seeded_init(
                    &[2 * cfg.width - 1, kc],
                    emb_init,
                    seed.wrapping_mul(6).wrapping_add(5),
                ),
            },
            bn_mid: BatchNormState::identity(cfg.d_out),
            bn_out: BatchNormState::identity(cfg.d_out),
        })
    }

    pub fn check_shapes(&self, cfg: &GsaConfig) -> Result<()> {
        let kc = cfg.key_channels();
        let expect: [(&str, &Tensor, Vec<usize>); 5] = [
            ("W_K", &self.kqv.w_k, vec![cfg.d_in, cfg.d_k]),
            ("W_Q", &self.kqv.w_q, vec![cfg.d_in, cfg.d_k]),
            ("W_V", &self.kqv.w_v, vec![cfg.d_in, cfg.d_out]),
            ("R_col", &self.emb.r_col, vec![2 * cfg.height - 1, kc]),
            ("R_row", &self.emb.r_row, vec![2 * cfg.width - 1, kc]),
        ];
        for (name, t, shape) in expect {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
        }
        for (name, bn, c) in [
            ("bn_K", &self.kqv.bn_k, cfg.d_k),
            ("bn_Q", &self.kqv.bn_q, cfg.d_k),
            ("bn_V", &self.kqv.bn_v, cfg.d_out),
            ("bn_mid", &self.bn_mid, cfg.d_out),
            ("bn_out", &self.bn_out, cfg.d_out),
        ] {
            bn.validate()?;
            if bn.channels() != c {
                return Err(Error::Config(format!(
                    "{name} has {} channels, expected {c}",
                    bn.channels()
                )));
            }
        }
        Ok(())
    }

    /// Learnable tensors by name, in a fixed order.
    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("W_K", &self.kqv.w_k),
            ("W_Q", &self.kqv.w_q),
            ("W_V", &self.kqv.w_v),
            ("bn_K.gamma", &self.kqv.bn_k.gamma),
            ("bn_K.beta", &self.kqv.bn_k.beta),
            ("bn_Q.gamma", &self.kqv.bn_q.gamma),
            ("bn_Q.beta", &self.kqv.bn_q.beta),
            ("bn_V.gamma", &self.kqv.bn_v.gamma),
            ("bn_V.beta", &self.kqv.bn_v.beta),
            ("R_col", &self.emb.r_col),
            ("R_row", &self.emb.r_row),
            ("bn_mid.gamma", &self.bn_mid.gamma),
            ("bn_mid.beta", &self.bn_mid.beta),
            ("bn_out.gamma", &self.bn_out.gamma),
            ("bn_out.beta", &self.bn_out.beta),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("W_K", &mut self.kqv.w_k),
            ("W_Q", &mut self.kqv.w_q),
            ("W_V", &mut self.kqv.w_v),
            ("bn_K.gamma", &mut self.kqv.bn_k.gamma),
            ("bn_K.beta", &mut self.kqv.bn_k.beta),
            ("bn_Q.gamma", &mut self.kqv.bn_q.gamma),
            ("bn_Q.beta", &mut self.kqv.bn_q.beta),
            ("bn_V.gamma", &mut self.kqv.bn_v.gamma),
            ("bn_V.beta", &mut self.kqv.bn_v.beta),
            ("R_col", &mut self.emb.r_col),
            ("R_row", &mut self.emb.r_row),
            ("bn_mid.gamma", &mut self.bn_mid.gamma),
            ("bn_mid.beta", &mut self.bn_mid.beta),
            ("bn_out.gamma", &mut self.bn_out.gamma),
            ("bn_out.beta", &mut self.bn_out.beta),
        ]
    }

    /// Running statistics by name (`bn_K`, ..., `bn_out`), as `(mean, var)`.
    pub fn running_stats(&self) -> Vec<(&'static str, &BatchNormState)> {
        vec![
            ("bn_K", &self.kqv.bn_k),
            ("bn_Q", &self.kqv.bn_q),
            ("bn_V", &self.kqv.bn_v),
            ("bn_mid", &self.bn_mid),
            ("bn_out", &self.bn_out),
        ]
    }

    /// Whether the configured forward pass reads the named tensor.
    pub fn is_live(cfg: &GsaConfig, name: &str) -> bool {
        match name {
            "W_K" | "bn_K.gamma" | "bn_K.beta" => cfg.content,
            "R_col" => cfg.column,
            "R_row" => cfg.row,
            "bn_mid.gamma" | "bn_mid.beta" => cfg.column && cfg.row,
            _ => true,
        }
    }

    /// Number of learnable scalars the configured module actually uses.
    pub fn live_param_count(&self, cfg: &GsaConfig) -> usize {
        self.named()
            .into_iter()
            .filter(|(n, _)| Self::is_live(cfg, n))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_catches_each_violation() {
        assert!(GsaConfig::new(8, 8, 8, 2, 3, 3).validate().is_ok());
        assert!(GsaConfig::new(8, 6, 8, 4, 3, 3).validate().is_err());
        assert!(GsaConfig::new(8, 8, 6, 4, 3, 3).validate().is_err());
        assert!(GsaConfig::new(8, 8, 8, 2, 3, 3)
            .with_window(0)
            .validate()
            .is_err());
        assert!(GsaConfig::new(8, 8, 8, 2, 3, 5)
            .with_window(5)
            .validate()
            .is_ok());
        assert!(GsaConfig::new(8, 8, 8, 2, 3, 3)
            .with_window(4)
            .validate()
            .is_err());
        assert!(GsaConfig::new(8, 8, 8, 2, 3, 3)
            .with_branches(false, false, false)
            .validate()
            .is_err());
    }

    #[test]
    fn default_window_is_global() {
        assert_eq!(GsaConfig::new(4, 4, 4, 1, 3, 7).window, 7);
    }

    #[test]
    fn init_shapes_and_live_counts() {
        let cfg = GsaConfig::new(6, 4, 8, 2, 3, 5);
        let p = GsaParams::init(&cfg, 9).unwrap();
        p.check_shapes(&cfg).unwrap();
        assert_eq!(p.emb.r_col.shape(), &[5, 2]);
        assert_eq!(p.emb.r_row.shape(), &[9, 2]);
        let all = p.named().iter().map(|(_, t)| t.numel()).sum::<usize>();
        assert_eq!(p.live_param_count(&cfg), all);
        let pos_only = cfg.clone().with_branches(false, true, true);
        assert_eq!(p.live_param_count(&pos_only), all - 6 * 4 - 2 * 4);
    }
}
