//! Decoder: four upsample + ReLU + 3-D conv blocks walking the pyramid from
//! the deepest level back to full resolution.
//!
//! Each block doubles H x W, concatenates the matching skip level (time-
//! aligned by linear interpolation), applies ReLU and a 3x3x3 convolution
//! with temporal stride 2, so the clip length collapses 16 -> 8 -> 4 -> 2
//! -> 1 across the four blocks while channels halve. A 1x1x1 head, a final
//! bilinear doubling and a sigmoid produce one saliency map in (0, 1).

use ndarray::{Array2, Array4, Axis};
use rand::Rng;

use super::conv::Conv3d;
use super::{FeatureTensor, FusionError, PyramidConfig, N_LEVELS};
use crate::imgops;

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderWeights {
    pub blocks: [Conv3d; N_LEVELS],
    pub head: Conv3d,
}

impl DecoderWeights {
    /// `(in_channels, out_channels)` per block for a given pyramid, plus the
    /// head. Blocks 1..3 consume the upsampled carry concatenated with the
    /// next-shallower skip level; block 4 has no skip left.
    pub fn channel_plan(cfg: &PyramidConfig) -> ([(usize, usize); N_LEVELS], (usize, usize)) {
        let [c1, c2, c3, c4] = cfg.channels;
        ([(c4 + c3, c3), (c3 + c2, c2), (c2 + c1, c1), (c1, c1 / 2)], (c1 / 2, 1))
    }

    pub fn new(blocks: [Conv3d; N_LEVELS], head: Conv3d, cfg: &PyramidConfig) -> Result<Self, FusionError> {
        cfg.validate()?;
        let (plan, head_plan) = Self::channel_plan(cfg);
        for (i, (b, (ci, co))) in blocks.iter().zip(plan).enumerate() {
            let want = (co, ci, 3, 3, 3);
            if b.weight.dim() != want || b.stride_t != 2 || b.pad != (1, 1, 1) {
                return Err(FusionError::ShapeMismatch(format!(
                    "decoder block {i} is {:?} stride {} pad {:?}, expected {want:?} stride 2 pad (1, 1, 1)",
                    b.weight.dim(),
                    b.stride_t,
                    b.pad
                )));
            }
            b.check_finite(&format!("decoder block {i}"))?;
        }
        let want = (head_plan.1, head_plan.0, 1, 1, 1);
        if head.weight.dim() != want || head.stride_t != 1 || head.pad != (0, 0, 0) {
            return Err(FusionError::ShapeMismatch(format!(
                "decoder head is {:?}, expected {want:?} stride 1 pad (0, 0, 0)",
                head.weight.dim()
            )));
        }
        head.check_finite("decoder head")?;
        Ok(Self { blocks, head })
    }

    pub fn seeded<R: Rng>(cfg: &PyramidConfig, rng: &mut R) -> Result<Self, FusionError> {
        let (plan, head_plan) = Self::channel_plan(cfg);
        let blocks = plan.map(|(ci, co)| Conv3d::seeded(co, ci, (3, 3, 3), 2, (1, 1, 1), rng));
        let head = Conv3d::seeded(head_plan.1, head_plan.0, (1, 1, 1), 1, (0, 0, 0), rng);
        Self::new(blocks, head, cfg)
    }

    pub fn zeroed(cfg: &PyramidConfig) -> Result<Self, FusionError> {
        let (plan, head_plan) = Self::channel_plan(cfg);
        let blocks = plan.map(|(ci, co)| Conv3d::zeroed(co, ci, (3, 3, 3), 2, (1, 1, 1)));
        let head = Conv3d::zeroed(head_plan.1, head_plan.0, (1, 1, 1), 1, (0, 0, 0));
        Self::new(blocks, head, cfg)
    }
}

/// Linear resample along the time axis, per channel and pixel.
fn resize_time(x: &Array4<f32>, t_out: usize) -> Array4<f32> {
    let (c, t, h, w) = x.dim();
    if t == t_out {
        return x.clone();
    }
    let mut out = Array4::<f32>::zeros((c, t_out, h, w));
    let mut fiber = vec![0.0f32; t];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                for (ti, f) in fiber.iter_mut().enumerate() {
                    *f = x[(ch, ti, i, j)];
                }
                for (ti, v) in imgops::resize_linear_1d(&fiber, t_out).into_iter().enumerate() {
                    out[(ch, ti, i, j)] = v;
                }
            }
        }
    }
    out
}

/// Double H and W of every (channel, frame) plane bilinearly.
fn upsample2_spatial(x: &Array4<f32>) -> Array4<f32> {
    let (c, t, h, w) = x.dim();
    let mut out = Array4::<f32>::zeros((c, t, h * 2, w * 2));
    for ch in 0..c {
        for ti in 0..t {
            let plane = x.index_axis(Axis(0), ch);
            let plane = plane.index_axis(Axis(0), ti);
            let up = imgops::resize_bilinear(&plane, h * 2, w * 2);
            out.index_axis_mut(Axis(0), ch).index_axis_mut(Axis(0), ti).assign(&up);
        }
    }
    out
}

fn sigmoid_strict(x: f32) -> f32 {
    // Stable in f64, then clamped to the nearest representable values
    // inside (0, 1) so saturation never touches the bounds themselves.
    let x = x as f64;
    let s = if x >= 0.0 { 1.0 / (1.0 + (-x).exp()) } else { x.exp() / (1.0 + x.exp()) };
    const BELOW_ONE: f32 = 1.0 - f32::EPSILON / 2.0;
    (s as f32).clamp(f32::MIN_POSITIVE, BELOW_ONE)
}

/// Decode four (fused or raw) pyramid levels into one saliency map of size
/// `cfg.out_hw()`, values strictly inside (0, 1).
pub fn decoder_forward(
    levels: &[FeatureTensor],
    weights: &DecoderWeights,
    cfg: &PyramidConfig,
) -> Result<Array2<f32>, FusionError> {
    cfg.validate()?;
    if levels.len() != N_LEVELS {
        return Err(FusionError::ShapeMismatch(format!(
            "decoder needs {N_LEVELS} levels, got {}",
            levels.len()
        )));
    }
    for (i, f) in levels.iter().enumerate() {
        FeatureTensor::new(i + 1, f.data.clone(), cfg)?;
    }

    let mut x = levels[N_LEVELS - 1].data.clone();
    for (bi, block) in weights.blocks.iter().enumerate() {
        let mut up = upsample2_spatial(&x);
        if bi < N_LEVELS - 1 {
            let skip = &levels[N_LEVELS - 2 - bi].data;
            let skip = resize_time(skip, up.dim().1);
            if skip.dim().2 != up.dim().2 || skip.dim().3 != up.dim().3 {
                return Err(FusionError::ShapeMismatch(format!(
                    "skip level {} is {:?}, carry is {:?}",
                    N_LEVELS - 1 - bi,
                    skip.dim(),
                    up.dim()
                )));
            }
            up = ndarray::concatenate(Axis(0), &[up.view(), skip.view()])
                .expect("channel concat of equal trailing dims");
        }
        up.mapv_inplace(|v| v.max(0.0));
        x = block.forward(&up);
    }
    let x = weights.head.forward(&x);
    let (c_out, t_out, h, w) = x.dim();
    debug_assert_eq!((c_out, t_out), (1, 1));
    let plane = x.index_axis(Axis(0), 0);
    let plane = plane.index_axis(Axis(0), 0);
    let (oh, ow) = cfg.out_hw();
    debug_assert_eq!((h * 2, w * 2), (oh, ow));
    let up = imgops::resize_bilinear(&plane, oh, ow);
    Ok(up.mapv(sigmoid_strict))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::synthetic_scene_features;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> PyramidConfig {
        PyramidConfig { channels: [4, 8, 16, 32], base_hw: (16, 16), t: 16 }
    }

    #[test]
    fn zero_weights_give_uniform_half() {
        let cfg = small_cfg();
        let w = DecoderWeights::zeroed(&cfg).unwrap();
        let levels = synthetic_scene_features(1, &cfg).unwrap();
        let out = decoder_forward(&levels, &w, &cfg).unwrap();
        assert_eq!(out.dim(), (64, 64));
        assert!(out.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn seeded_weights_stay_strictly_inside_unit_interval() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let w = DecoderWeights::seeded(&cfg, &mut rng).unwrap();
        let levels = synthetic_scene_features(2, &cfg).unwrap();
        let out = decoder_forward(&levels, &w, &cfg).unwrap();
        assert_eq!(out.dim(), (64, 64));
        assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
        // Not collapsed to a constant.
        let (lo, hi) = out.iter().fold((1.0f32, 0.0f32), |(a, b), &v| (a.min(v), b.max(v)));
        assert!(hi > lo);
    }

    #[test]
    fn default_spatial_pyramid_reaches_224() {
        // Production spatial dims with narrow channels to stay quick.
        let cfg = PyramidConfig { channels: [4, 8, 16, 32], base_hw: (56, 56), t: 16 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = DecoderWeights::seeded(&cfg, &mut rng).unwrap();
        let levels = synthetic_scene_features(3, &cfg).unwrap();
        let out = decoder_forward(&levels, &w, &cfg).unwrap();
        assert_eq!(out.dim(), (224, 224));
    }

    #[test]
    fn level_shape_mismatch_is_an_error() {
        let cfg = small_cfg();
        let w = DecoderWeights::zeroed(&cfg).unwrap();
        let mut levels = synthetic_scene_features(1, &cfg).unwrap();
        levels[1].data = Array4::zeros((8, 16, 4, 4));
        assert!(decoder_forward(&levels, &w, &cfg).is_err());
    }

    #[test]
    fn time_resize_is_linear() {
        let x = Array4::from_shape_fn((1, 4, 1, 1), |(_, t, _, _)| t as f32);
        let y = resize_time(&x, 2);
        // Half-pixel centers: out t=0 samples src t=0.5, t=1 samples 2.5.
        assert_eq!(y.dim(), (1, 2, 1, 1));
        assert!((y[(0, 0, 0, 0)] - 0.5).abs() < 1e-6);
        assert!((y[(0, 1, 0, 0)] - 2.5).abs() < 1e-6);
    }

    #[test]
    fn sigmoid_strictness_under_saturation() {
        assert!(sigmoid_strict(-1000.0) > 0.0);
        assert!(sigmoid_strict(1000.0) < 1.0);
        assert_eq!(sigmoid_strict(0.0), 0.5);
    }
}
