//! Multi-head cross-attention between scene features (keys, values) and the
//! aligned map features (queries).
//!
//! Tokens are the T*H*W cells of a level; logits and softmax run in f64 so
//! every attention row sums to 1 well inside 1e-6 even for long sequences,
//! and rows are processed one at a time so the L x L weight matrix is never
//! materialized.

use ndarray::{Array2, Array4};
use rand::Rng;

use super::FusionError;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    /// Each `c x d_head`.
    pub wq: Array2<f32>,
    pub wk: Array2<f32>,
    pub wv: Array2<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: Vec<HeadParams>,
    /// `(n_heads * d_head) x c`, merging the concatenated heads back.
    pub w_out: Array2<f32>,
}

impl AttentionParams {
    pub fn new(heads: Vec<HeadParams>, w_out: Array2<f32>) -> Result<Self, FusionError> {
        if heads.is_empty() {
            return Err(FusionError::BadConfig("attention needs at least one head".into()));
        }
        let (c, d) = heads[0].wq.dim();
        if c % heads.len() != 0 || d != c / heads.len() {
            return Err(FusionError::BadConfig(format!(
                "d_head {d} must equal c / n_heads = {c} / {}",
                heads.len()
            )));
        }
        for (i, h) in heads.iter().enumerate() {
            for (name, m) in [("wq", &h.wq), ("wk", &h.wk), ("wv", &h.wv)] {
                if m.dim() != (c, d) {
                    return Err(FusionError::ShapeMismatch(format!(
                        "head {i} {name} is {:?}, expected ({c}, {d})",
                        m.dim()
                    )));
                }
            }
        }
        if w_out.dim() != (heads.len() * d, c) {
            return Err(FusionError::ShapeMismatch(format!(
                "w_out is {:?}, expected ({}, {c})",
                w_out.dim(),
                heads.len() * d
            )));
        }
        let params = Self { heads, w_out };
        params.check_finite()?;
        Ok(params)
    }

    pub fn seeded<R: Rng>(c: usize, n_heads: usize, rng: &mut R) -> Result<Self, FusionError> {
        if n_heads == 0 || c % n_heads != 0 {
            return Err(FusionError::BadConfig(format!("c = {c} not divisible by {n_heads} heads")));
        }
        let d = c / n_heads;
        let bound_in = 1.0 / (c as f32).sqrt();
        let bound_out = 1.0 / ((n_heads * d) as f32).sqrt();
        let heads = (0..n_heads)
            .map(|_| HeadParams {
                wq: Array2::from_shape_simple_fn((c, d), || rng.random_range(-bound_in..bound_in)),
                wk: Array2::from_shape_simple_fn((c, d), || rng.random_range(-bound_in..bound_in)),
                wv: Array2::from_shape_simple_fn((c, d), || rng.random_range(-bound_in..bound_in)),
            })
            .collect();
        let w_out =
            Array2::from_shape_simple_fn((n_heads * d, c), || rng.random_range(-bound_out..bound_out));
        Self::new(heads, w_out)
    }

    pub fn zeroed(c: usize, n_heads: usize) -> Result<Self, FusionError> {
        if n_heads == 0 || c % n_heads != 0 {
            return Err(FusionError::BadConfig(format!("c = {c} not divisible by {n_heads} heads")));
        }
        let d = c / n_heads;
        let heads = (0..n_heads)
            .map(|_| HeadParams {
                wq: Array2::zeros((c, d)),
                wk: Array2::zeros((c, d)),
                wv: Array2::zeros((c, d)),
            })
            .collect();
        Self::new(heads, Array2::zeros((n_heads * d, c)))
    }

    pub fn channels(&self) -> usize {
        self.heads[0].wq.dim().0
    }

    pub fn check_finite(&self) -> Result<(), FusionError> {
        let all = self
            .heads
            .iter()
            .flat_map(|h| h.wq.iter().chain(h.wk.iter()).chain(h.wv.iter()))
            .chain(self.w_out.iter());
        for v in all {
            if !v.is_finite() {
                return Err(FusionError::NonFinite("attention params".into()));
            }
        }
        Ok(())
    }
}

/// Diagnostics from one forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnStats {
    /// Largest |row sum - 1| over every head and query, measured on the
    /// weights actually multiplied into the values.
    pub max_row_sum_dev: f64,
}

/// Numerically safe softmax over one logit row; returns the sum of the
/// normalized entries (1 up to f64 rounding).
pub(crate) fn softmax_row_inplace(xs: &mut [f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in xs.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in xs.iter_mut() {
        *v /= sum;
    }
    xs.iter().sum()
}

/// `[C, T, H, W] -> [L, C]` token matrix, tokens ordered (t, h, w) row-major.
fn to_tokens(x: &Array4<f32>) -> Array2<f32> {
    let (c, t, h, w) = x.dim();
    let mut out = Array2::<f32>::zeros((t * h * w, c));
    for ((ch, ti, i, j), &v) in x.indexed_iter() {
        out[((ti * h + i) * w + j, ch)] = v;
    }
    out
}

fn from_tokens(tokens: &Array2<f32>, like: (usize, usize, usize, usize)) -> Array4<f32> {
    let (c, t, h, w) = like;
    Array4::from_shape_fn((c, t, h, w), |(ch, ti, i, j)| tokens[((ti * h + i) * w + j, ch)])
}

/// CA(f_v, f_m) = Softmax(f_m W^Q (f_v W^K)^T / sqrt(d_head)) f_v W^V per
/// head, heads concatenated and projected back to c channels. Output shape
/// equals the query (map) feature shape.
pub fn cross_attention_forward(
    f_v: &Array4<f32>,
    f_m: &Array4<f32>,
    params: &AttentionParams,
) -> Result<Array4<f32>, FusionError> {
    cross_attention_with_stats(f_v, f_m, params).map(|(out, _)| out)
}

pub fn cross_attention_with_stats(
    f_v: &Array4<f32>,
    f_m: &Array4<f32>,
    params: &AttentionParams,
) -> Result<(Array4<f32>, AttnStats), FusionError> {
    if f_v.dim() != f_m.dim() {
        return Err(FusionError::ShapeMismatch(format!(
            "scene features {:?} vs map features {:?}",
            f_v.dim(),
            f_m.dim()
        )));
    }
    params.check_finite()?;
    let (c, ..) = f_v.dim();
    if c != params.channels() {
        return Err(FusionError::ShapeMismatch(format!(
            "features have {c} channels, attention params expect {}",
            params.channels()
        )));
    }
    let x_v = to_tokens(f_v);
    let x_m = to_tokens(f_m);
    let l = x_v.dim().0;
    let d = params.heads[0].wq.dim().1;
    let scale = 1.0 / (d as f64).sqrt();

    let mut concat = Array2::<f32>::zeros((l, params.heads.len() * d));
    let mut max_dev = 0.0f64;
    let mut logits = vec![0.0f64; l];
    for (hi, head) in params.heads.iter().enumerate() {
        let q = x_m.dot(&head.wq);
        let k = x_v.dot(&head.wk);
        let v = x_v.dot(&head.wv);
        for qi in 0..l {
            let qrow = q.row(qi);
            for (j, lj) in logits.iter_mut().enumerate() {
                let krow = k.row(j);
                let mut acc = 0.0f64;
                for dd in 0..d {
                    acc += qrow[dd] as f64 * krow[dd] as f64;
                }
                *lj = acc * scale;
            }
            let sum = softmax_row_inplace(&mut logits);
            max_dev = max_dev.max((sum - 1.0).abs());
            for dd in 0..d {
                let mut acc = 0.0f64;
                for (j, &wj) in logits.iter().enumerate() {
                    acc += wj * v[(j, dd)] as f64;
                }
                concat[(qi, hi * d + dd)] = acc as f32;
            }
        }
    }
    let projected = concat.dot(&params.w_out);
    Ok((from_tokens(&projected, f_m.dim()), AttnStats { max_row_sum_dev: max_dev }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_feature(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> Array4<f32> {
        Array4::from_shape_simple_fn(dim, || rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn params_validation() {
        assert!(AttentionParams::seeded(4, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_ok());
        assert!(AttentionParams::seeded(5, 2, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let mut p = AttentionParams::seeded(4, 2, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p.heads[1].wk[(0, 0)] = f32::INFINITY;
        let x = Array4::<f32>::zeros((4, 2, 1, 1));
        assert!(cross_attention_forward(&x, &x, &p).is_err());
    }

    #[test]
    fn single_key_softmax_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = AttentionParams::seeded(6, 2, &mut rng).unwrap();
        let f_v = rand_feature(&mut rng, (6, 1, 1, 1));
        let f_m = rand_feature(&mut rng, (6, 1, 1, 1));
        let (out, stats) = cross_attention_with_stats(&f_v, &f_m, &params).unwrap();
        assert_eq!(stats.max_row_sum_dev, 0.0, "one key: weight is exactly 1");
        // Expected output: project the concatenated V rows, no Q/K influence.
        let x: Vec<f32> = (0..6).map(|c| f_v[(c, 0, 0, 0)]).collect();
        let d = 3;
        let mut cat = vec![0.0f32; 6];
        for (hi, head) in params.heads.iter().enumerate() {
            for dd in 0..d {
                cat[hi * d + dd] = (0..6).map(|c| x[c] * head.wv[(c, dd)]).sum();
            }
        }
        for ch in 0..6 {
            let want: f32 = (0..6).map(|k| cat[k] * params.w_out[(k, ch)]).sum();
            assert!((out[(ch, 0, 0, 0)] - want).abs() <= 1e-6);
        }
    }

    /// Fully materialized L x L oracle with its own softmax.
    fn naive_attention(
        f_v: &Array4<f32>,
        f_m: &Array4<f32>,
        params: &AttentionParams,
    ) -> Array4<f32> {
        let (c, t, h, w) = f_v.dim();
        let l = t * h * w;
        let token = |x: &Array4<f32>, li: usize, ch: usize| {
            let (ti, rest) = (li / (h * w), li % (h * w));
            x[(ch, ti, rest / w, rest % w)]
        };
        let d = c / params.heads.len();
        let mut cat = vec![vec![0.0f64; params.heads.len() * d]; l];
        for (hi, head) in params.heads.iter().enumerate() {
            let lin = |x: &Array4<f32>, li: usize, m: &Array2<f32>, dd: usize| -> f64 {
                (0..c).map(|ch| token(x, li, ch) as f64 * m[(ch, dd)] as f64).sum()
            };
            let mut a = vec![vec![0.0f64; l]; l];
            for qi in 0..l {
                for ki in 0..l {
                    let dot: f64 =
                        (0..d).map(|dd| lin(f_m, qi, &head.wq, dd) * lin(f_v, ki, &head.wk, dd)).sum();
                    a[qi][ki] = dot / (d as f64).sqrt();
                }
                let m = a[qi].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = a[qi].iter().map(|&x| (x - m).exp()).sum();
                for ki in 0..l {
                    a[qi][ki] = (a[qi][ki] - m).exp() / s;
                }
                for dd in 0..d {
                    cat[qi][hi * d + dd] =
                        (0..l).map(|ki| a[qi][ki] * lin(f_v, ki, &head.wv, dd)).sum();
                }
            }
        }
        Array4::from_shape_fn((c, t, h, w), |(ch, ti, i, j)| {
            let li = (ti * h + i) * w + j;
            (0..params.heads.len() * d)
                .map(|k| cat[li][k] * params.w_out[(k, ch)] as f64)
                .sum::<f64>() as f32
        })
    }

    #[test]
    fn matches_naive_oracle_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        // L = 6 tokens (t=6, 1x1 spatial), c = 4, 2 heads.
        let params = AttentionParams::seeded(4, 2, &mut rng).unwrap();
        let f_v = rand_feature(&mut rng, (4, 6, 1, 1));
        let f_m = rand_feature(&mut rng, (4, 6, 1, 1));
        let got = cross_attention_forward(&f_v, &f_m, &params).unwrap();
        let want = naive_attention(&f_v, &f_m, &params);
        let max = got.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max <= 1e-6, "max abs diff {max}");
    }

    #[test]
    fn matches_naive_oracle_spatial() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let params = AttentionParams::seeded(8, 2, &mut rng).unwrap();
        let f_v = rand_feature(&mut rng, (8, 2, 3, 2));
        let f_m = rand_feature(&mut rng, (8, 2, 3, 2));
        let got = cross_attention_forward(&f_v, &f_m, &params).unwrap();
        let want = naive_attention(&f_v, &f_m, &params);
        let max = got.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
        assert!(max <= 1e-6, "max abs diff {max}");
    }

    #[test]
    fn rows_sum_to_one_and_shape_is_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let params = AttentionParams::seeded(8, 2, &mut rng).unwrap();
        let f_v = rand_feature(&mut rng, (8, 4, 8, 8));
        let f_m = rand_feature(&mut rng, (8, 4, 8, 8));
        let (out, stats) = cross_attention_with_stats(&f_v, &f_m, &params).unwrap();
        assert_eq!(out.dim(), f_m.dim());
        assert!(stats.max_row_sum_dev <= 1e-6, "dev {}", stats.max_row_sum_dev);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        for _ in 0..20 {
            let base: Vec<f64> = (0..11).map(|_| rng.random_range(-4.0..4.0)).collect();
            let shift: f64 = rng.random_range(-100.0..100.0);
            let mut a = base.clone();
            let mut b: Vec<f64> = base.iter().map(|v| v + shift).collect();
            softmax_row_inplace(&mut a);
            softmax_row_inplace(&mut b);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn key_value_permutation_leaves_outputs_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let params = AttentionParams::seeded(4, 2, &mut rng).unwrap();
        let f_v = rand_feature(&mut rng, (4, 6, 1, 1));
        let f_m = rand_feature(&mut rng, (4, 6, 1, 1));
        // Reverse the token order of keys/values only.
        let mut f_v_perm = f_v.clone();
        for c in 0..4 {
            for t in 0..6 {
                f_v_perm[(c, t, 0, 0)] = f_v[(c, 5 - t, 0, 0)];
            }
        }
        let a = cross_attention_forward(&f_v, &f_m, &params).unwrap();
        let b = cross_attention_forward(&f_v_perm, &f_m, &params).unwrap();
        let max = a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
        assert!(max <= 1e-6, "max abs diff {max}");
    }
}
