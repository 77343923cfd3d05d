//! The five networks (image encoder, image decoder, bridge, feature decoder,
//! text encoder), their projection heads and the momentum encoder.

mod momentum;
mod network;
mod vocab;

use serde::{Deserialize, Serialize};

pub use momentum::{ema_update, momentum_target, MomentumParams};
pub use network::{
    bridge_features, decode_features, decode_pixels, encode_full, encode_visible, image_embedding,
    text_embedding, ImagePath,
};
pub use vocab::{words, Vocab, PAD_ID, UNKNOWN_ID};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::patcher::PatchGrid;
use crate::rng::Rng;
use crate::tensor::{cast, Real, Tensor};

/// Initial inverse temperature of the contrastive softmax.
pub const INITIAL_TAU: f64 = 1.0 / 0.07;
/// Upper clamp on the inverse temperature.
pub const MAX_TAU: f64 = 100.0;
pub const INIT_STD: f64 = 0.02;

/// Shape of one transformer stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl StackConfig {
    pub const fn new(depth: usize, width: usize, heads: usize) -> Self {
        StackConfig {
            depth,
            width,
            heads,
            mlp_ratio: 4,
        }
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) || self.mlp_ratio == 0 {
            return Err(Error::invalid(format!(
                "{name}: width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    /// Scalars in one pre-norm block: two layer norms, fused QKV, output
    /// projection and a two-layer MLP, all with biases.
    pub fn block_param_count(&self) -> usize {
        let (d, r) = (self.width, self.mlp_ratio);
        (4 + 2 * r) * d * d + (9 + r) * d
    }

    /// Blocks plus the final layer norm.
    pub fn stack_param_count(&self) -> usize {
        self.depth * self.block_param_count() + 2 * self.width
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub grid: PatchGrid,
    pub encoder: StackConfig,
    pub image_decoder: StackConfig,
    pub bridge: StackConfig,
    pub feature_decoder: StackConfig,
    pub text: StackConfig,
    pub joint_dim: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
}

impl ModelConfig {
    /// Desk-scale defaults: 32x32x3 images with 4x4 patches.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            grid: PatchGrid {
                height: 32,
                width: 32,
                channels: 3,
                patch: 4,
            },
            encoder: StackConfig::new(4, 128, 4),
            image_decoder: StackConfig::new(2, 64, 4),
            bridge: StackConfig::new(4, 128, 4),
            feature_decoder: StackConfig::new(4, 64, 4),
            text: StackConfig::new(2, 128, 4),
            joint_dim: 64,
            vocab_size,
            max_text_len: 16,
        }
    }

    /// Narrow two-block encoder for multi-run comparisons on one CPU core.
    pub fn compact(grid: PatchGrid, vocab_size: usize) -> Self {
        ModelConfig {
            grid,
            encoder: StackConfig::new(2, 64, 4),
            image_decoder: StackConfig::new(1, 32, 4),
            bridge: StackConfig::new(2, 64, 4),
            feature_decoder: StackConfig::new(1, 32, 4),
            text: StackConfig::new(1, 64, 4),
            joint_dim: 32,
            vocab_size,
            max_text_len: 12,
        }
    }

    /// Very small configuration for unit tests.
    pub fn tiny(grid: PatchGrid, vocab_size: usize) -> Self {
        ModelConfig {
            grid,
            encoder: StackConfig::new(1, 8, 2),
            image_decoder: StackConfig::new(1, 8, 2),
            bridge: StackConfig::new(1, 8, 2),
            feature_decoder: StackConfig::new(1, 8, 2),
            text: StackConfig::new(1, 8, 2),
            joint_dim: 4,
            vocab_size,
            max_text_len: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.encoder.validate("encoder")?;
        self.image_decoder.validate("image_decoder")?;
        self.bridge.validate("bridge")?;
        self.feature_decoder.validate("feature_decoder")?;
        self.text.validate("text")?;
        for (name, w) in [
            ("encoder", self.encoder.width),
            ("image_decoder", self.image_decoder.width),
            ("feature_decoder", self.feature_decoder.width),
        ] {
            if w % 4 != 0 {
                return Err(Error::invalid(format!("{name} width {w} is not divisible by 4")));
            }
        }
        if self.bridge.width != self.encoder.width {
            return Err(Error::invalid(format!(
                "bridge width {} must equal encoder width {}",
                self.bridge.width, self.encoder.width
            )));
        }
        if self.joint_dim == 0 || self.max_text_len == 0 || self.vocab_size < 2 {
            return Err(Error::invalid("joint_dim, max_text_len and vocab_size must be positive"));
        }
        Ok(())
    }

    /// Closed-form number of scalars in [`ModelParams`].
    pub fn param_count(&self) -> usize {
        let px = self.grid.patch_dim();
        let (d, dd, db, df, dt, dj) = (
            self.encoder.width,
            self.image_decoder.width,
            self.bridge.width,
            self.feature_decoder.width,
            self.text.width,
            self.joint_dim,
        );
        let encoder = px * d + d + self.encoder.stack_param_count();
        let image_decoder = d * dd + dd + dd + self.image_decoder.stack_param_count() + dd * px + px;
        let bridge = self.bridge.stack_param_count();
        let feature_decoder = d * df + df + df + self.feature_decoder.stack_param_count() + df * db + db;
        let text = self.vocab_size * dt + self.max_text_len * dt + self.text.stack_param_count();
        encoder + image_decoder + bridge + feature_decoder + text + db * dj + dt * dj + 1
    }
}

/// Parameter-name prefixes of each network.
pub mod names {
    pub const ENCODER: &str = "encoder.";
    pub const IMAGE_DECODER: &str = "image_decoder.";
    pub const BRIDGE: &str = "bridge.";
    pub const FEATURE_DECODER: &str = "feature_decoder.";
    pub const TEXT: &str = "text.";
    pub const IMAGE_PROJ: &str = "image_proj.";
    pub const TEXT_PROJ: &str = "text_proj.";
    pub const LOG_TAU: &str = "log_tau";
    pub const IMAGE_MASK_TOKEN: &str = "image_decoder.mask_token";
    pub const FEATURE_MASK_TOKEN: &str = "feature_decoder.mask_token";
}

#[derive(Clone, Debug)]
pub struct ModelParams<T: Real> {
    pub config: ModelConfig,
    pub params: ParamSet<T>,
}

struct Init<'a, T> {
    params: ParamSet<T>,
    rng: &'a mut Rng,
}

impl<T: Real> Init<'_, T> {
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> Result<()> {
        let data = (0..rows * cols)
            .map(|_| cast(self.rng.next_trunc_normal(INIT_STD)))
            .collect();
        self.params.insert(name, Tensor::new(vec![rows, cols], data)?)
    }

    fn zeros(&mut self, name: String, rows: usize, cols: usize) -> Result<()> {
        self.params.insert(name, Tensor::zeros(vec![rows, cols]))
    }

    fn linear(&mut self, prefix: &str, inp: usize, out: usize) -> Result<()> {
        self.weight(format!("{prefix}.weight"), inp, out)?;
        self.zeros(format!("{prefix}.bias"), 1, out)
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.params.insert(format!("{prefix}.gamma"), Tensor::ones(vec![1, d]))?;
        self.zeros(format!("{prefix}.beta"), 1, d)
    }

    fn stack(&mut self, prefix: &str, cfg: &StackConfig) -> Result<()> {
        let d = cfg.width;
        for i in 0..cfg.depth {
            let b = format!("{prefix}.blocks.{i}");
            self.norm(&format!("{b}.norm1"), d)?;
            self.linear(&format!("{b}.attn.qkv"), d, 3 * d)?;
            self.linear(&format!("{b}.attn.proj"), d, d)?;
            self.norm(&format!("{b}.norm2"), d)?;
            self.linear(&format!("{b}.mlp.fc1"), d, cfg.mlp_ratio * d)?;
            self.linear(&format!("{b}.mlp.fc2"), cfg.mlp_ratio * d, d)?;
        }
        self.norm(&format!("{prefix}.norm"), d)
    }
}

impl<T: Real> ModelParams<T> {
    /// Truncated-normal weights, zero biases and mask tokens, unit layer-norm
    /// gains, and `tau = 1/0.07`.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let px = c.grid.patch_dim();
        let (d, dd, db, df, dt) = (
            c.encoder.width,
            c.image_decoder.width,
            c.bridge.width,
            c.feature_decoder.width,
            c.text.width,
        );
        let mut init = Init {
            params: ParamSet::new(),
            rng,
        };
        init.linear("encoder.patch_embed", px, d)?;
        init.stack("encoder", &c.encoder)?;

        init.linear("image_decoder.embed", d, dd)?;
        init.zeros(names::IMAGE_MASK_TOKEN.into(), 1, dd)?;
        init.stack("image_decoder", &c.image_decoder)?;
        init.linear("image_decoder.head", dd, px)?;

        init.stack("bridge", &c.bridge)?;

        init.linear("feature_decoder.embed", d, df)?;
        init.zeros(names::FEATURE_MASK_TOKEN.into(), 1, df)?;
        init.stack("feature_decoder", &c.feature_decoder)?;
        init.linear("feature_decoder.head", df, db)?;

        init.weight("text.token_embed".into(), c.vocab_size, dt)?;
        init.weight("text.pos_embed".into(), c.max_text_len, dt)?;
        init.stack("text", &c.text)?;

        init.weight("image_proj.weight".into(), db, c.joint_dim)?;
        init.weight("text_proj.weight".into(), dt, c.joint_dim)?;
        init.params
            .insert(names::LOG_TAU, Tensor::scalar(cast(INITIAL_TAU.ln())))?;

        Ok(ModelParams {
            config,
            params: init.params,
        })
    }

    pub fn tau(&self) -> T {
        self.params.require(names::LOG_TAU).expect("log_tau").item().exp()
    }

    /// Clamp `tau` to at most [`MAX_TAU`].
    pub fn clamp_tau(&mut self) {
        let max_log: T = cast(MAX_TAU.ln());
        if let Some(t) = self.params.get_mut(names::LOG_TAU) {
            let v = &mut t.data_mut()[0];
            if *v > max_log {
                *v = max_log;
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_parameter_count_matches_formula() {
        let cfg = ModelConfig::desk(40);
        let params = ModelParams::<f32>::init(cfg.clone(), &mut Rng::new(0)).unwrap();
        assert_eq!(params.params.num_scalars(), cfg.param_count());
        // spot-check the per-block formula for width 128, mlp ratio 4
        assert_eq!(cfg.encoder.block_param_count(), 12 * 128 * 128 + 13 * 128);
    }

    #[test]
    fn tiny_parameter_count_matches_formula() {
        let grid = PatchGrid::new(8, 8, 3, 4).unwrap();
        let cfg = ModelConfig::tiny(grid, 10);
        let params = ModelParams::<f64>::init(cfg.clone(), &mut Rng::new(0)).unwrap();
        assert_eq!(params.params.num_scalars(), cfg.param_count());
    }

    #[test]
    fn init_conventions() {
        let grid = PatchGrid::new(8, 8, 3, 4).unwrap();
        let p = ModelParams::<f64>::init(ModelConfig::tiny(grid, 10), &mut Rng::new(0)).unwrap();
        assert!((p.tau() - INITIAL_TAU).abs() < 1e-9);
        assert!(p.params.get(names::IMAGE_MASK_TOKEN).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(p.params.get(names::FEATURE_MASK_TOKEN).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(p.params.get("encoder.patch_embed.bias").unwrap().data().iter().all(|v| *v == 0.0));
        assert!(p.params.get("encoder.norm.gamma").unwrap().data().iter().all(|v| *v == 1.0));
        let w = p.params.get("encoder.patch_embed.weight").unwrap();
        assert!(w.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        assert!(w.data().iter().any(|v| *v != 0.0));
    }

    #[test]
    fn tau_clamp() {
        let grid = PatchGrid::new(8, 8, 3, 4).unwrap();
        let mut p = ModelParams::<f64>::init(ModelConfig::tiny(grid, 10), &mut Rng::new(0)).unwrap();
        p.params.get_mut(names::LOG_TAU).unwrap().data_mut()[0] = 10.0;
        p.clamp_tau();
        assert!((p.tau() - MAX_TAU).abs() < 1e-9);
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::desk(10);
        cfg.encoder.heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(10);
        cfg.bridge.width = 64;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk(10);
        cfg.image_decoder = StackConfig::new(0, 64, 4);
        assert!(cfg.validate().is_ok());
    }
}
