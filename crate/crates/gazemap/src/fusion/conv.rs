//! Direct convolution kernels. Desk-scale shapes only, so these are plain
//! loops ordered for cache locality rather than anything clever.

use ndarray::{Array1, Array3, Array4, Array5};
use rand::Rng;

use super::FusionError;

pub fn leaky_relu_inplace(xs: &mut [f32], slope: f32) {
    for v in xs {
        if *v < 0.0 {
            *v *= slope;
        }
    }
}

fn uniform_fan_in<R: Rng>(rng: &mut R, fan_in: usize) -> f32 {
    let bound = 1.0 / (fan_in as f32).sqrt();
    rng.random_range(-bound..bound)
}

/// 2-D convolution, stride 1, zero padding chosen to preserve H x W
/// (kernels must have odd extent).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `[out_channels, in_channels, kh, kw]`
    pub weight: Array4<f32>,
    pub bias: Array1<f32>,
}

impl Conv2d {
    pub fn new(weight: Array4<f32>, bias: Array1<f32>) -> Result<Self, FusionError> {
        let (o, _, kh, kw) = weight.dim();
        if bias.len() != o {
            return Err(FusionError::ShapeMismatch(format!(
                "conv2d bias has {} entries for {o} output channels",
                bias.len()
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(FusionError::BadConfig(format!("conv2d kernel {kh}x{kw} must be odd")));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeroed(o: usize, i: usize, kh: usize, kw: usize) -> Self {
        Self { weight: Array4::zeros((o, i, kh, kw)), bias: Array1::zeros(o) }
    }

    pub fn seeded<R: Rng>(o: usize, i: usize, kh: usize, kw: usize, rng: &mut R) -> Self {
        let fan_in = i * kh * kw;
        let weight = Array4::from_shape_simple_fn((o, i, kh, kw), || uniform_fan_in(rng, fan_in));
        let bias = Array1::from_shape_simple_fn(o, || uniform_fan_in(rng, fan_in));
        Self { weight, bias }
    }

    pub fn check_finite(&self, what: &str) -> Result<(), FusionError> {
        if self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(FusionError::NonFinite(what.to_string()))
        }
    }

    /// `[I, H, W] -> [O, H, W]`.
    pub fn forward_same(&self, input: &Array3<f32>) -> Array3<f32> {
        let (o_ch, i_ch, kh, kw) = self.weight.dim();
        let (ci, h, w) = input.dim();
        assert_eq!(ci, i_ch, "conv2d input channels");
        let (ph, pw) = (kh as isize / 2, kw as isize / 2);
        let mut out = Array3::<f32>::zeros((o_ch, h, w));
        for o in 0..o_ch {
            let mut plane = out.index_axis_mut(ndarray::Axis(0), o);
            plane.fill(self.bias[o]);
            for c in 0..i_ch {
                let src = input.index_axis(ndarray::Axis(0), c);
                for di in 0..kh {
                    for dj in 0..kw {
                        let k = self.weight[(o, c, di, dj)];
                        if k == 0.0 {
                            continue;
                        }
                        let oi = di as isize - ph;
                        let oj = dj as isize - pw;
                        let i0 = (-oi).max(0) as usize;
                        let i1 = (h as isize).min(h as isize - oi) as usize;
                        let j0 = (-oj).max(0) as usize;
                        let j1 = (w as isize).min(w as isize - oj) as usize;
                        for i in i0..i1 {
                            let si = (i as isize + oi) as usize;
                            for j in j0..j1 {
                                plane[(i, j)] += k * src[(si, (j as isize + oj) as usize)];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

/// 3-D convolution over `[C, T, H, W]`: odd kernels, zero padding 1 on
/// every padded axis, configurable temporal stride, spatial stride 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d {
    /// `[out_channels, in_channels, kt, kh, kw]`
    pub weight: Array5<f32>,
    pub bias: Array1<f32>,
    pub stride_t: usize,
    /// Symmetric zero padding on (t, h, w); `(1, 1, 1)` for 3x3x3 kernels,
    /// `(0, 0, 0)` for 1x1x1.
    pub pad: (usize, usize, usize),
}

impl Conv3d {
    pub fn new(
        weight: Array5<f32>,
        bias: Array1<f32>,
        stride_t: usize,
        pad: (usize, usize, usize),
    ) -> Result<Self, FusionError> {
        let (o, ..) = weight.dim();
        if bias.len() != o {
            return Err(FusionError::ShapeMismatch(format!(
                "conv3d bias has {} entries for {o} output channels",
                bias.len()
            )));
        }
        if stride_t == 0 {
            return Err(FusionError::BadConfig("conv3d stride_t must be >= 1".into()));
        }
        Ok(Self { weight, bias, stride_t, pad })
    }

    pub fn zeroed(o: usize, i: usize, k: (usize, usize, usize), stride_t: usize, pad: (usize, usize, usize)) -> Self {
        Self {
            weight: Array5::zeros((o, i, k.0, k.1, k.2)),
            bias: Array1::zeros(o),
            stride_t,
            pad,
        }
    }

    pub fn seeded<R: Rng>(
        o: usize,
        i: usize,
        k: (usize, usize, usize),
        stride_t: usize,
        pad: (usize, usize, usize),
        rng: &mut R,
    ) -> Self {
        let fan_in = i * k.0 * k.1 * k.2;
        let weight =
            Array5::from_shape_simple_fn((o, i, k.0, k.1, k.2), || uniform_fan_in(rng, fan_in));
        let bias = Array1::from_shape_simple_fn(o, || uniform_fan_in(rng, fan_in));
        Self { weight, bias, stride_t, pad }
    }

    pub fn check_finite(&self, what: &str) -> Result<(), FusionError> {
        if self.weight.iter().chain(self.bias.iter()).all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(FusionError::NonFinite(what.to_string()))
        }
    }

    pub fn out_t(&self, t_in: usize) -> usize {
        let (_, _, kt, _, _) = self.weight.dim();
        (t_in + 2 * self.pad.0 - kt) / self.stride_t + 1
    }

    /// `[I, T, H, W] -> [O, T', H, W]` with `T' = (T + 2p - kt)/stride + 1`.
    pub fn forward(&self, input: &Array4<f32>) -> Array4<f32> {
        let (o_ch, i_ch, kt, kh, kw) = self.weight.dim();
        let (ci, t, h, w) = input.dim();
        assert_eq!(ci, i_ch, "conv3d input channels");
        let (pt, ph, pw) = (self.pad.0 as isize, self.pad.1 as isize, self.pad.2 as isize);
        let t_out = self.out_t(t);
        let h_out = h + 2 * self.pad.1 - kh + 1;
        let w_out = w + 2 * self.pad.2 - kw + 1;
        let mut out = Array4::<f32>::zeros((o_ch, t_out, h_out, w_out));
        for o in 0..o_ch {
            for to in 0..t_out {
                let tbase = (to * self.stride_t) as isize - pt;
                let mut plane = out.index_axis_mut(ndarray::Axis(0), o);
                let mut plane = plane.index_axis_mut(ndarray::Axis(0), to);
                plane.fill(self.bias[o]);
                for c in 0..i_ch {
                    for dt in 0..kt {
                        let ti = tbase + dt as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        let src = input.index_axis(ndarray::Axis(0), c);
                        let src = src.index_axis(ndarray::Axis(0), ti as usize);
                        for di in 0..kh {
                            for dj in 0..kw {
                                let k = self.weight[(o, c, dt, di, dj)];
                                if k == 0.0 {
                                    continue;
                                }
                                let oi = di as isize - ph;
                                let oj = dj as isize - pw;
                                let i0 = (-oi).max(0) as usize;
                                let i1 = (h_out as isize).min(h as isize - oi) as usize;
                                let j0 = (-oj).max(0) as usize;
                                let j1 = (w_out as isize).min(w as isize - oj) as usize;
                                for i in i0..i1 {
                                    let si = (i as isize + oi) as usize;
                                    for j in j0..j1 {
                                        plane[(i, j)] += k * src[(si, (j as isize + oj) as usize)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Pad-then-loop oracle for conv3d, structured differently from the
    /// production kernel.
    fn naive_conv3d(x: &Array4<f32>, c: &Conv3d) -> Array4<f32> {
        let (o_ch, i_ch, kt, kh, kw) = c.weight.dim();
        let (ci, t, h, w) = x.dim();
        assert_eq!(ci, i_ch);
        let (pt, ph, pw) = c.pad;
        let mut padded = Array4::<f32>::zeros((i_ch, t + 2 * pt, h + 2 * ph, w + 2 * pw));
        for ((a, b, i, j), &v) in x.indexed_iter() {
            padded[(a, b + pt, i + ph, j + pw)] = v;
        }
        let t_out = (t + 2 * pt - kt) / c.stride_t + 1;
        let mut y = Array4::<f32>::zeros((o_ch, t_out, h + 2 * ph - kh + 1, w + 2 * pw - kw + 1));
        for o in 0..o_ch {
            for to in 0..t_out {
                for i in 0..y.dim().2 {
                    for j in 0..y.dim().3 {
                        let mut acc = c.bias[o];
                        for ci in 0..i_ch {
                            for a in 0..kt {
                                for b in 0..kh {
                                    for d in 0..kw {
                                        acc += c.weight[(o, ci, a, b, d)]
                                            * padded[(ci, to * c.stride_t + a, i + b, j + d)];
                                    }
                                }
                            }
                        }
                        y[(o, to, i, j)] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv3d_matches_naive_and_halves_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let conv = Conv3d::seeded(3, 2, (3, 3, 3), 2, (1, 1, 1), &mut rng);
        let x = Array4::from_shape_simple_fn((2, 8, 5, 6), || rng.random_range(-1.0f32..1.0));
        let got = conv.forward(&x);
        assert_eq!(got.dim(), (3, 4, 5, 6));
        let want = naive_conv3d(&x, &conv);
        let max = got.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max <= 1e-6, "max abs diff {max}");
        // The stride-2 time schedule collapses 16 -> 8 -> 4 -> 2 -> 1.
        let mut t = 16;
        for _ in 0..4 {
            t = conv.out_t(t);
        }
        assert_eq!(t, 1);
    }

    #[test]
    fn conv2d_identity_kernel_passes_through() {
        let mut w = Array4::<f32>::zeros((1, 1, 3, 3));
        w[(0, 0, 1, 1)] = 1.0;
        let conv = Conv2d::new(w, Array1::zeros(1)).unwrap();
        let x = Array3::from_shape_fn((1, 4, 5), |(_, i, j)| (i * 5 + j) as f32);
        assert_eq!(conv.forward_same(&x), x);
    }

    #[test]
    fn conv2d_shift_kernel_zero_pads() {
        // Kernel that reads the pixel above: the first row becomes 0.
        let mut w = Array4::<f32>::zeros((1, 1, 3, 3));
        w[(0, 0, 0, 1)] = 1.0;
        let conv = Conv2d::new(w, Array1::zeros(1)).unwrap();
        let x = Array3::from_elem((1, 3, 3), 1.0f32);
        let y = conv.forward_same(&x);
        for j in 0..3 {
            assert_eq!(y[(0, 0, j)], 0.0);
            assert_eq!(y[(0, 1, j)], 1.0);
            assert_eq!(y[(0, 2, j)], 1.0);
        }
    }

    #[test]
    fn leaky_relu_slope() {
        let mut xs = [2.0f32, -2.0, 0.0];
        leaky_relu_inplace(&mut xs, 0.01);
        assert_eq!(xs, [2.0, -0.02, 0.0]);
    }

    #[test]
    fn constructors_validate() {
        assert!(Conv2d::new(Array4::zeros((2, 1, 3, 3)), Array1::zeros(3)).is_err());
        assert!(Conv2d::new(Array4::zeros((2, 1, 2, 3)), Array1::zeros(2)).is_err());
        assert!(Conv3d::new(Array5::zeros((2, 1, 3, 3, 3)), Array1::zeros(2), 0, (1, 1, 1)).is_err());
        let mut bad = Conv2d::zeroed(1, 1, 3, 3);
        bad.weight[(0, 0, 0, 0)] = f32::NAN;
        assert!(bad.check_finite("x").is_err());
    }
}
