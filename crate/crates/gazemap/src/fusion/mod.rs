//! Scene-map fusion network: map encoder CNN, per-level cross-attention and
//! a 3-D decoder, all as plain forward passes over `ndarray` buffers.
//!
//! There is no training here. Weights come from a checkpoint file or a
//! seeded random init, and the scene backbone is replaced by a seeded
//! synthetic feature provider with the same pyramid geometry, which keeps
//! every stage runnable and reproducible on a bare CPU.

mod attention;
mod checkpoint;
mod conv;
mod decoder;

pub use attention::{cross_attention_forward, cross_attention_with_stats, AttentionParams, AttnStats, HeadParams};
pub use checkpoint::Checkpoint;
pub use conv::{leaky_relu_inplace, Conv2d, Conv3d};
pub use decoder::{decoder_forward, DecoderWeights};

use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeSet;

use crate::imgops;
use crate::patch::CLIP_LEN;

/// Pyramid levels produced by the scene encoder.
pub const N_LEVELS: usize = 4;

/// Attention heads per cross-attention block.
pub const N_HEADS: usize = 2;

/// Leaky-ReLU negative slope used throughout.
pub const LEAKY_SLOPE: f32 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum FusionError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("non-finite weights in {0}")]
    NonFinite(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Geometry of the 4-level feature pyramid. The defaults mirror a Swin-S
/// style backbone on a 224x224x16 clip; tests shrink the channel widths to
/// stay fast on a single core.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PyramidConfig {
    /// Channels per level, shallow to deep.
    pub channels: [usize; N_LEVELS],
    /// Level-1 spatial size; each deeper level halves it.
    pub base_hw: (usize, usize),
    /// Clip length; the pyramid never downsamples time.
    pub t: usize,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { channels: [96, 192, 384, 768], base_hw: (56, 56), t: CLIP_LEN }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let (h, w) = self.base_hw;
        if h == 0 || w == 0 || h % 8 != 0 || w % 8 != 0 {
            return Err(FusionError::BadConfig(format!(
                "base_hw {:?} must be positive and divisible by 8",
                self.base_hw
            )));
        }
        for (i, &c) in self.channels.iter().enumerate() {
            if c == 0 || c % N_HEADS != 0 {
                return Err(FusionError::BadConfig(format!(
                    "channels[{i}] = {c} must be a positive multiple of {N_HEADS} heads"
                )));
            }
        }
        if self.t != CLIP_LEN {
            return Err(FusionError::BadConfig(format!(
                "t = {} unsupported, the decoder collapses exactly {CLIP_LEN} frames",
                self.t
            )));
        }
        Ok(())
    }

    /// Spatial size of a level, 1-indexed shallow to deep.
    pub fn level_hw(&self, level: usize) -> (usize, usize) {
        debug_assert!((1..=N_LEVELS).contains(&level));
        (self.base_hw.0 >> (level - 1), self.base_hw.1 >> (level - 1))
    }

    /// Decoder output size: four x2 upsamples walk the pyramid back to
    /// 2 * base, and the final resize doubles once more.
    pub fn out_hw(&self) -> (usize, usize) {
        (self.base_hw.0 * 4, self.base_hw.1 * 4)
    }
}

/// One level of scene (or fused) features, `[C, T, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub level: usize,
    pub data: Array4<f32>,
}

impl FeatureTensor {
    pub fn new(level: usize, data: Array4<f32>, cfg: &PyramidConfig) -> Result<Self, FusionError> {
        if !(1..=N_LEVELS).contains(&level) {
            return Err(FusionError::BadConfig(format!("level {level} outside 1..={N_LEVELS}")));
        }
        let (h, w) = cfg.level_hw(level);
        let want = (cfg.channels[level - 1], cfg.t, h, w);
        if data.dim() != want {
            return Err(FusionError::ShapeMismatch(format!(
                "level {level} features are {:?}, expected {:?}",
                data.dim(),
                want
            )));
        }
        Ok(Self { level, data })
    }
}

/// Deterministic stand-in for the pretrained scene backbone: uniform
/// [-1, 1) features, independent per level, reproducible per seed.
pub fn synthetic_scene_features(seed: u64, cfg: &PyramidConfig) -> Result<Vec<FeatureTensor>, FusionError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(N_LEVELS);
    for level in 1..=N_LEVELS {
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ (level as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        let (h, w) = cfg.level_hw(level);
        let c = cfg.channels[level - 1];
        let data = Array4::from_shape_simple_fn((c, cfg.t, h, w), || rng.random_range(-1.0..1.0));
        out.push(FeatureTensor { level, data });
    }
    Ok(out)
}

/// Map-encoder weights: four 2-D convolutions with 10, 20, 10, 1 kernels of
/// sizes 5x5, 3x3, 3x3, 1x1, each followed by a leaky ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct MapEncoderWeights {
    pub layers: [Conv2d; 4],
}

/// `(out_channels, in_channels, kh, kw)` per map-encoder layer.
pub const MAP_ENCODER_LAYOUT: [(usize, usize, usize, usize); 4] =
    [(10, 2, 5, 5), (20, 10, 3, 3), (10, 20, 3, 3), (1, 10, 1, 1)];

impl MapEncoderWeights {
    pub fn new(layers: [Conv2d; 4]) -> Result<Self, FusionError> {
        for (i, (layer, want)) in layers.iter().zip(MAP_ENCODER_LAYOUT).enumerate() {
            if layer.weight.dim() != want {
                return Err(FusionError::ShapeMismatch(format!(
                    "map encoder layer {i} is {:?}, expected {want:?}",
                    layer.weight.dim()
                )));
            }
            layer.check_finite(&format!("map encoder layer {i}"))?;
        }
        Ok(Self { layers })
    }
}

/// Run the map encoder over a 2-channel patch of any spatial size.
/// Stride 1, zero same-padding; output keeps the input's H x W.
pub fn map_encoder_forward(
    patch: &Array3<f32>,
    weights: &MapEncoderWeights,
) -> Result<Array3<f32>, FusionError> {
    let (c, _, _) = patch.dim();
    if c != MAP_ENCODER_LAYOUT[0].1 {
        return Err(FusionError::ShapeMismatch(format!(
            "map encoder expects {} input channels, got {c}",
            MAP_ENCODER_LAYOUT[0].1
        )));
    }
    let mut x = patch.clone();
    for layer in &weights.layers {
        x = layer.forward_same(&x);
        leaky_relu_inplace(x.as_slice_mut().expect("contiguous"), LEAKY_SLOPE);
    }
    Ok(x)
}

/// Broadcast the single-channel map feature to every pyramid level:
/// bilinear resize to the level's H x W, then replicate across channels
/// and time.
pub fn align_map_features(feat2d: &Array2<f32>, cfg: &PyramidConfig) -> Result<Vec<FeatureTensor>, FusionError> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(N_LEVELS);
    for level in 1..=N_LEVELS {
        let (h, w) = cfg.level_hw(level);
        let resized = if feat2d.dim() == (h, w) {
            feat2d.clone()
        } else {
            imgops::resize_bilinear(&feat2d.view(), h, w)
        };
        let c = cfg.channels[level - 1];
        let data = Array4::from_shape_fn((c, cfg.t, h, w), |(_, _, i, j)| resized[(i, j)]);
        out.push(FeatureTensor { level, data });
    }
    Ok(out)
}

/// The full fusion network: weights plus the pyramid geometry and the set
/// of encoder blocks whose outputs pass through cross-attention.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub config: PyramidConfig,
    pub enc_blocks: BTreeSet<usize>,
    pub map_encoder: MapEncoderWeights,
    /// One attention parameter set per fused level, keyed by level.
    pub attention: std::collections::BTreeMap<usize, AttentionParams>,
    pub decoder: DecoderWeights,
}

impl FusionModel {
    fn validate_enc_blocks(enc_blocks: &BTreeSet<usize>) -> Result<(), FusionError> {
        for &b in enc_blocks {
            if !(1..=N_LEVELS).contains(&b) {
                return Err(FusionError::BadConfig(format!("enc block {b} outside 1..={N_LEVELS}")));
            }
        }
        Ok(())
    }

    /// Random init, uniform +-1/sqrt(fan_in), fully determined by the seed.
    /// Tensor draw order: map encoder layers, attention levels ascending,
    /// decoder blocks then head; weight before bias.
    pub fn seeded(config: PyramidConfig, enc_blocks: BTreeSet<usize>, seed: u64) -> Result<Self, FusionError> {
        config.validate()?;
        Self::validate_enc_blocks(&enc_blocks)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let map_encoder = MapEncoderWeights::new(
            MAP_ENCODER_LAYOUT.map(|(o, i, kh, kw)| Conv2d::seeded(o, i, kh, kw, &mut rng)),
        )?;
        let mut attention = std::collections::BTreeMap::new();
        for &level in &enc_blocks {
            let c = config.channels[level - 1];
            attention.insert(level, AttentionParams::seeded(c, N_HEADS, &mut rng)?);
        }
        let decoder = DecoderWeights::seeded(&config, &mut rng)?;
        Ok(Self { config, enc_blocks, map_encoder, attention, decoder })
    }

    /// All-zero weights; useful as a fixture (the decoder then emits a
    /// uniform 0.5 map).
    pub fn zeroed(config: PyramidConfig, enc_blocks: BTreeSet<usize>) -> Result<Self, FusionError> {
        config.validate()?;
        Self::validate_enc_blocks(&enc_blocks)?;
        let map_encoder = MapEncoderWeights::new(
            MAP_ENCODER_LAYOUT.map(|(o, i, kh, kw)| Conv2d::zeroed(o, i, kh, kw)),
        )?;
        let mut attention = std::collections::BTreeMap::new();
        for &level in &enc_blocks {
            let c = config.channels[level - 1];
            attention.insert(level, AttentionParams::zeroed(c, N_HEADS)?);
        }
        let decoder = DecoderWeights::zeroed(&config)?;
        Ok(Self { config, enc_blocks, map_encoder, attention, decoder })
    }

    /// Full forward pass: encode the map patch, align it to the pyramid,
    /// fuse the selected levels via cross-attention (replacing the scene
    /// features there), decode to a saliency map in (0, 1).
    pub fn forward(
        &self,
        patch: &Array3<f32>,
        scene: &[FeatureTensor],
    ) -> Result<Array2<f32>, FusionError> {
        if scene.len() != N_LEVELS {
            return Err(FusionError::ShapeMismatch(format!(
                "expected {N_LEVELS} scene levels, got {}",
                scene.len()
            )));
        }
        for (i, f) in scene.iter().enumerate() {
            FeatureTensor::new(i + 1, f.data.clone(), &self.config)?;
        }
        let enc = map_encoder_forward(patch, &self.map_encoder)?;
        let enc2d = enc.index_axis(ndarray::Axis(0), 0).to_owned();
        let map_feats = align_map_features(&enc2d, &self.config)?;

        let mut fused: Vec<FeatureTensor> = Vec::with_capacity(N_LEVELS);
        for level in 1..=N_LEVELS {
            let f_v = &scene[level - 1];
            if let Some(params) = self.attention.get(&level) {
                let out = cross_attention_forward(&f_v.data, &map_feats[level - 1].data, params)?;
                fused.push(FeatureTensor { level, data: out });
            } else {
                fused.push(f_v.clone());
            }
        }
        decoder_forward(&fused, &self.decoder, &self.config)
    }
}
