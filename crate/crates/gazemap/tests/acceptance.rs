//! Acceptance checklist for the whole toolchain, one test per item, each
//! ending in a single PASS/FAIL line (visible with `--nocapture`). The
//! checks pit every numeric component against an independent oracle written
//! from the definitions: straightforward loops, exhaustive enumeration, or
//! closed-form values.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use gazemap::fusion::{
    cross_attention_forward, cross_attention_with_stats, map_encoder_forward,
    synthetic_scene_features, AttentionParams, Conv2d, FusionModel, MapEncoderWeights,
    PyramidConfig, LEAKY_SLOPE, MAP_ENCODER_LAYOUT,
};
use gazemap::geo::{BBox, GeoPoint, LocalProjection, EARTH_RADIUS_M};
use gazemap::imgops;
use gazemap::matching::{viterbi_path, GpsSample, GpsTrace, MatchParams, Matcher};
use gazemap::metrics::{self, FixationSet, SaliencyMap};
use gazemap::osm::parse_osm;
use gazemap::patch::{sample_patch, PatchRequest, CLIP_LEN};
use gazemap::pipeline::{run_pipeline, PipelineConfig};
use gazemap::raster::{GeoTransform, RasterMap};
use ndarray::{Array2, Array3, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

const DEG_M: f64 = std::f64::consts::PI / 180.0 * EARTH_RADIUS_M;

fn check(name: &str, ok: bool, detail: &str) {
    println!("[{}] {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    assert!(ok, "{name}: {detail}");
}

fn p(lat: f64, lon: f64) -> GeoPoint {
    GeoPoint { lat, lon }
}

// ---------------------------------------------------------------------------
// saliency metrics

mod naive_metrics {
    use ndarray::Array2;

    pub fn kld(pred: &Array2<f64>, gt: &Array2<f64>, eps: f64) -> f64 {
        let (ps, gs) = (pred.sum(), gt.sum());
        let mut acc = 0.0;
        for (pi, gi) in pred.iter().zip(gt.iter()) {
            let (pn, gn) = (pi / ps, gi / gs);
            acc += gn * (eps + gn / (eps + pn)).ln();
        }
        acc
    }

    pub fn cc(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
        let n = pred.len() as f64;
        let mp = pred.iter().sum::<f64>() / n;
        let mg = gt.iter().sum::<f64>() / n;
        let cov: f64 = pred.iter().zip(gt.iter()).map(|(a, b)| (a - mp) * (b - mg)).sum();
        let vp: f64 = pred.iter().map(|a| (a - mp) * (a - mp)).sum();
        let vg: f64 = gt.iter().map(|b| (b - mg) * (b - mg)).sum();
        cov / (vp * vg).sqrt()
    }

    pub fn nss(pred: &Array2<f64>, fix: &[(usize, usize)]) -> f64 {
        let n = pred.len() as f64;
        let mean = pred.iter().sum::<f64>() / n;
        let sd = (pred.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
        fix.iter().map(|&(r, c)| (pred[(r, c)] - mean) / sd).sum::<f64>() / fix.len() as f64
    }

    pub fn sim(pred: &Array2<f64>, gt: &Array2<f64>) -> f64 {
        let (ps, gs) = (pred.sum(), gt.sum());
        pred.iter().zip(gt.iter()).map(|(a, b)| (a / ps).min(b / gs)).sum()
    }
}

#[test]
fn a1_saliency_metrics_match_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let t0 = Instant::now();
    let mut max_diff = 0.0f64;
    for _ in 0..1000 {
        let h = rng.random_range(8..=64);
        let w = rng.random_range(8..=64);
        let sparse = rng.random_bool(0.2);
        let mut gen = |_| {
            if sparse && rng.random_bool(0.9) {
                0.0
            } else {
                rng.random_range(1e-6..1.0f64)
            }
        };
        let mut pg = Array2::from_shape_fn((h, w), &mut gen);
        let gg = Array2::from_shape_fn((h, w), &mut gen);
        // Guard against an all-zero draw in sparse mode.
        pg[(0, 0)] = pg[(0, 0)].max(1e-3);
        let fix: Vec<(usize, usize)> = (0..rng.random_range(1..=20))
            .map(|_| (rng.random_range(0..h), rng.random_range(0..w)))
            .collect();

        let pred = SaliencyMap::new(pg.clone()).unwrap();
        let gt = SaliencyMap::new(gg.clone()).unwrap();
        let fixset = FixationSet { points: fix.clone() };

        let pairs = [
            (metrics::kld(&pred, &gt).unwrap(), naive_metrics::kld(&pg, &gg, metrics::DEFAULT_EPS)),
            (metrics::cc(&pred, &gt).unwrap(), naive_metrics::cc(&pg, &gg)),
            (metrics::nss(&pred, &fixset).unwrap(), naive_metrics::nss(&pg, &fix)),
            (metrics::sim(&pred, &gt).unwrap(), naive_metrics::sim(&pg, &gg)),
        ];
        for (got, want) in pairs {
            max_diff = max_diff.max((got - want).abs());
        }
    }
    let elapsed = t0.elapsed();
    check(
        "saliency metrics vs naive reference",
        max_diff <= 1e-9 && elapsed < Duration::from_secs(5),
        &format!("1000 random pairs, max |diff| {max_diff:.3e}, {elapsed:.2?}"),
    );
}

#[test]
fn a2_saliency_metric_definitional_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let grid = Array2::from_shape_fn((32, 32), |_| rng.random_range(0.01..1.0f64));
    let m = SaliencyMap::new(grid).unwrap();

    let kld_self = metrics::kld(&m, &m).unwrap();
    let cc_self = metrics::cc(&m, &m).unwrap();
    let sim_self = metrics::sim(&m, &m).unwrap();

    let uniform = SaliencyMap::new(Array2::from_elem((16, 16), 0.3)).unwrap();
    let fix = FixationSet { points: vec![(0, 0), (5, 9), (15, 15)] };
    let nss_uniform = metrics::nss(&uniform, &fix).unwrap();

    let mut gt = Array2::<f64>::zeros((20, 20));
    gt[(3, 4)] = 1.0;
    let mut pred = Array2::<f64>::zeros((20, 20));
    pred[(3, 4)] = 1.0;
    pred[(10, 11)] = 1.0;
    let kld_split = metrics::kld(
        &SaliencyMap::new(pred).unwrap(),
        &SaliencyMap::new(gt).unwrap(),
    )
    .unwrap();
    let ln2_err = (kld_split - std::f64::consts::LN_2).abs();

    let ok = kld_self.abs() <= 1e-6
        && (cc_self - 1.0).abs() <= 1e-9
        && (sim_self - 1.0).abs() <= 1e-9
        && nss_uniform == 0.0
        && ln2_err <= 1e-4;
    check(
        "saliency metric definitional values",
        ok,
        &format!(
            "KLD(self) {kld_self:.2e}, CC(self)-1 {:.2e}, SIM(self)-1 {:.2e}, \
             NSS(uniform) {nss_uniform}, |KLD(split) - ln 2| {ln2_err:.2e}",
            cc_self - 1.0,
            sim_self - 1.0
        ),
    );
}

// ---------------------------------------------------------------------------
// map matching

#[test]
fn a3_viterbi_equals_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let mut same_paths = 0usize;
    let mut exact_scores = true;
    for _ in 0..50 {
        let n_obs = rng.random_range(2..=6);
        let emit: Vec<Vec<f64>> = (0..n_obs)
            .map(|_| (0..rng.random_range(1..=3)).map(|_| rng.random_range(-8.0..0.0)).collect())
            .collect();
        let trans: Vec<Vec<Vec<f64>>> = (1..n_obs)
            .map(|t| {
                (0..emit[t - 1].len())
                    .map(|_| (0..emit[t].len()).map(|_| rng.random_range(-8.0..0.0)).collect())
                    .collect()
            })
            .collect();
        let got = viterbi_path(&emit, |t, i, j| trans[t - 1][i][j]);

        // Accumulate path scores left to right, the same association the
        // dynamic program uses, so equal paths give bitwise equal scores.
        let score_of = |path: &[usize]| {
            let mut s = emit[0][path[0]];
            for t in 1..n_obs {
                s = s + trans[t - 1][path[t - 1]][path[t]] + emit[t][path[t]];
            }
            s
        };

        let mut best: Option<(f64, Vec<usize>)> = None;
        let counts: Vec<usize> = emit.iter().map(Vec::len).collect();
        let mut idx = vec![0usize; n_obs];
        loop {
            let s = score_of(&idx);
            if best.as_ref().is_none_or(|(bs, _)| s > *bs) {
                best = Some((s, idx.clone()));
            }
            // Odometer increment, most significant digit first.
            let mut k = n_obs;
            while k > 0 {
                idx[k - 1] += 1;
                if idx[k - 1] < counts[k - 1] {
                    break;
                }
                idx[k - 1] = 0;
                k -= 1;
            }
            if k == 0 {
                break;
            }
        }
        let (best_score, best_path) = best.unwrap();
        exact_scores &= score_of(&got) == best_score;
        same_paths += usize::from(got == best_path);
    }
    check(
        "Viterbi vs exhaustive enumeration",
        exact_scores && same_paths == 50,
        &format!("50 random lattices, exact score equality, {same_paths}/50 identical paths"),
    );
}

fn grid_town_osm(n: usize, lat0: f64, lon0: f64) -> String {
    let dlat = 100.0 / DEG_M;
    let dlon = 100.0 / (DEG_M * lat0.to_radians().cos());
    let id = |i: usize, j: usize| 1 + i * n + j;
    let mut xml = String::from("<?xml version=\"1.0\"?>\n<osm version=\"0.6\">\n");
    for i in 0..n {
        for j in 0..n {
            writeln!(
                xml,
                "<node id=\"{}\" lat=\"{:.9}\" lon=\"{:.9}\"/>",
                id(i, j),
                lat0 + i as f64 * dlat,
                lon0 + j as f64 * dlon
            )
            .unwrap();
        }
    }
    for i in 0..n {
        writeln!(xml, "<way id=\"{}\">", 1000 + i).unwrap();
        for j in 0..n {
            writeln!(xml, "<nd ref=\"{}\"/>", id(i, j)).unwrap();
        }
        xml.push_str("<tag k=\"highway\" v=\"residential\"/></way>\n");
    }
    for j in 0..n {
        writeln!(xml, "<way id=\"{}\">", 2000 + j).unwrap();
        for i in 0..n {
            writeln!(xml, "<nd ref=\"{}\"/>", id(i, j)).unwrap();
        }
        xml.push_str("<tag k=\"highway\" v=\"residential\"/></way>\n");
    }
    xml.push_str("</osm>\n");
    xml
}

fn dist_to_polyline(q: [f64; 2], pts: &[[f64; 2]]) -> f64 {
    let mut best = f64::INFINITY;
    for w in pts.windows(2) {
        let (dx, dy) = (w[1][0] - w[0][0], w[1][1] - w[0][1]);
        let len2 = dx * dx + dy * dy;
        let t = if len2 > 0.0 {
            (((q[0] - w[0][0]) * dx + (q[1] - w[0][1]) * dy) / len2).clamp(0.0, 1.0)
        } else {
            0.0
        };
        let (sx, sy) = (w[0][0] + t * dx, w[0][1] + t * dy);
        best = best.min(((q[0] - sx).powi(2) + (q[1] - sy).powi(2)).sqrt());
    }
    best
}

#[test]
fn a4_grid_town_matching_accuracy_and_throughput() {
    let (lat0, lon0) = (52.0, 13.0);
    let parsed = parse_osm(grid_town_osm(11, lat0, lon0).as_bytes()).unwrap();
    let graph = parsed.graph;

    // True drive, axis-aligned through the grid: east 1000 m, north 500 m,
    // west 700 m, north 300 m, at 10 m/s. Corners in local meters.
    let corners: [[f64; 2]; 5] =
        [[0.0, 200.0], [1000.0, 200.0], [1000.0, 700.0], [300.0, 700.0], [300.0, 1000.0]];
    let to_geo = |x: f64, y: f64| p(lat0 + y / DEG_M, lon0 + x / (DEG_M * lat0.to_radians().cos()));
    let pos_at = |mut s: f64| -> [f64; 2] {
        for w in corners.windows(2) {
            let len = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            if s <= len {
                let f = s / len;
                return [w[0][0] + f * (w[1][0] - w[0][0]), w[0][1] + f * (w[1][1] - w[0][1])];
            }
            s -= len;
        }
        *corners.last().unwrap()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let noise = Normal::new(0.0, 5.0).unwrap();
    let n_pts = 251usize; // 2500 m at 10 m/s, 1 Hz
    let samples: Vec<GpsSample> = (0..n_pts)
        .map(|t| {
            let [x, y] = pos_at(10.0 * t as f64);
            let gp = to_geo(x + noise.sample(&mut rng), y + noise.sample(&mut rng));
            GpsSample { t: t as f64, point: gp }
        })
        .collect();
    let trace = GpsTrace::new(samples, 1.0).unwrap();

    let t0 = Instant::now();
    let matcher = Matcher::new(&graph).unwrap();
    let result = matcher.match_trace(&trace, &MatchParams::default()).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let pts_per_sec = n_pts as f64 / elapsed;

    let proj = LocalProjection::new(p(lat0, lon0), lat0);
    let within = result
        .states
        .iter()
        .filter(|s| {
            let st = s.as_ref().expect("no HMM breaks expected in town");
            dist_to_polyline(proj.to_xy(st.point), &corners) <= 5.0
        })
        .count();
    let frac = within as f64 / n_pts as f64;

    check(
        "grid town matching accuracy and throughput",
        frac >= 0.95 && pts_per_sec >= 1000.0,
        &format!(
            "{within}/{n_pts} matched within 5 m ({:.1}%), {pts_per_sec:.0} points/s",
            100.0 * frac
        ),
    );
}

// ---------------------------------------------------------------------------
// rasterization

#[test]
fn a5_raster_road_length_and_transform_round_trip() {
    let a = p(0.0, 0.0);
    let b = p(0.0, 1000.0 / DEG_M);
    let bbox = BBox::from_points([a, b]).unwrap().expanded(20.0);
    let t = GeoTransform::from_bbox(&bbox, 1.0).unwrap();
    let mut raster = RasterMap::new(t);
    raster.draw_polyline_geo(&[a, b], 2.0);

    let grid = raster.grid();
    let best_row = (0..grid.nrows())
        .max_by(|&r, &s| {
            grid.row(r).sum().partial_cmp(&grid.row(s).sum()).unwrap()
        })
        .unwrap();
    let mut run = 0usize;
    let mut longest = 0usize;
    for &v in grid.row(best_row) {
        run = if v > 0.5 { run + 1 } else { 0 };
        longest = longest.max(run);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(505);
    let mut max_err = 0.0f64;
    for _ in 0..1000 {
        let q = p(
            rng.random_range(bbox.min_lat..=bbox.max_lat),
            rng.random_range(bbox.min_lon..=bbox.max_lon),
        );
        let px1 = t.geo_to_pixel(q);
        let px2 = t.geo_to_pixel(t.pixel_to_geo(px1));
        max_err = max_err.max((px1[0] - px2[0]).abs()).max((px1[1] - px2[1]).abs());
    }

    check(
        "raster road length and geo round trip",
        (998..=1002).contains(&longest) && max_err < 0.01,
        &format!("lit run {longest} px (want 1000 +- 2), round-trip max err {max_err:.2e} px"),
    );
}

// ---------------------------------------------------------------------------
// patches

/// 1 m/px raster on the equator with an L-shaped road through the center.
fn l_world() -> (RasterMap, GeoPoint) {
    let c = p(0.0, 0.0);
    let bbox = BBox::from_points([c]).unwrap().expanded(400.0);
    let t = GeoTransform::from_bbox(&bbox, 1.0).unwrap();
    let mut r = RasterMap::new(t);
    r.draw_polyline_geo(
        &[p(0.0, -300.0 / DEG_M), p(0.0, 150.0 / DEG_M), p(250.0 / DEG_M, 150.0 / DEG_M)],
        2.0,
    );
    (r, c)
}

/// Independent patch sampler: rotate, crop and resize collapsed into one
/// bilinear lookup per output pixel, straight off the source raster.
fn oracle_patch(world: &RasterMap, center: GeoPoint, heading: f64, radius: f64, out: usize) -> Array2<f32> {
    let t = world.transform();
    let [cx, cy] = t.geo_to_pixel(center);
    let s2 = (2.0 * radius / t.m_per_px).round();
    let (sin, cos) = heading.to_radians().sin_cos();
    Array2::from_shape_fn((out, out), |(i, j)| {
        let ux = (j as f64 + 0.5) * s2 / out as f64 - s2 / 2.0;
        let uy = (i as f64 + 0.5) * s2 / out as f64 - s2 / 2.0;
        imgops::sample_zero(&world.grid().view(), cx + cos * ux - sin * uy, cy + sin * ux + cos * uy)
    })
}

#[test]
fn a6_patch_crop_size_and_rotation_oracle() {
    let (world, c) = l_world();
    let route: Vec<GeoPoint> = (0..CLIP_LEN)
        .map(|i| p(0.0, (-150.0 + 10.0 * i as f64) / DEG_M))
        .collect();

    let probe = sample_patch(&world, &PatchRequest::new(c, 90.0, 100.0, route.clone(), 128).unwrap()).unwrap();
    let sizes_ok = probe.meta.crop_px == 200 && probe.channels.dim() == (2, 128, 128);

    let mut worst = 0.0f32;
    for heading in [0.0, 37.0, 90.0, 180.0, 271.0] {
        let req = PatchRequest::new(c, heading, 100.0, route.clone(), 128).unwrap();
        let got = sample_patch(&world, &req).unwrap();
        let want = oracle_patch(&world, c, heading, 100.0, 128);
        let mae = got
            .map_channel()
            .iter()
            .zip(want.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / (128.0 * 128.0);
        worst = worst.max(mae);
    }

    check(
        "patch crop size and rotation oracle",
        sizes_ok && worst <= 0.05,
        &format!(
            "radius 100 m at 1 m/px: crop {} px, out {:?}; worst rotation MAE {worst:.4}",
            probe.meta.crop_px,
            probe.channels.dim()
        ),
    );
}

// ---------------------------------------------------------------------------
// fusion forward math

/// Zero-padded quadruple-loop conv + leaky ReLU chain, all in f32 like the
/// production path but with none of its bound precomputation.
fn naive_map_encoder(input: &Array3<f32>, weights: &MapEncoderWeights) -> Array3<f32> {
    let mut x = input.clone();
    for layer in &weights.layers {
        let (co, ci, kh, kw) = layer.weight.dim();
        let (_, h, w) = x.dim();
        let (ph, pw) = (kh / 2, kw / 2);
        let mut padded = Array3::<f32>::zeros((ci, h + 2 * ph, w + 2 * pw));
        for ((ch, i, j), &v) in x.indexed_iter() {
            padded[(ch, i + ph, j + pw)] = v;
        }
        let mut y = Array3::<f32>::zeros((co, h, w));
        for o in 0..co {
            for i in 0..h {
                for j in 0..w {
                    let mut acc = layer.bias[o];
                    for ch in 0..ci {
                        for di in 0..kh {
                            for dj in 0..kw {
                                acc += layer.weight[(o, ch, di, dj)] * padded[(ch, i + di, j + dj)];
                            }
                        }
                    }
                    y[(o, i, j)] = if acc >= 0.0 { acc } else { LEAKY_SLOPE * acc };
                }
            }
        }
        x = y;
    }
    x
}

/// Fully materialized attention: explicit L x L weight matrix per head,
/// f64 throughout.
fn naive_attention(f_v: &Array4<f32>, f_m: &Array4<f32>, params: &AttentionParams) -> Array4<f32> {
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
        for qi in 0..l {
            let mut row: Vec<f64> = (0..l)
                .map(|ki| {
                    (0..d).map(|dd| lin(f_m, qi, &head.wq, dd) * lin(f_v, ki, &head.wk, dd)).sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|&x| (x - m).exp()).sum();
            for v in row.iter_mut() {
                *v = (*v - m).exp() / s;
            }
            for dd in 0..d {
                cat[qi][hi * d + dd] = (0..l).map(|ki| row[ki] * lin(f_v, ki, &head.wv, dd)).sum();
            }
        }
    }
    Array4::from_shape_fn((c, t, h, w), |(ch, ti, i, j)| {
        let li = (ti * h + i) * w + j;
        (0..params.heads.len() * d).map(|k| cat[li][k] * params.w_out[(k, ch)] as f64).sum::<f64>()
            as f32
    })
}

#[test]
fn a7_fusion_attention_rows_oracles_and_output_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(707);

    // Attention weight rows must sum to 1 on a real-sized token grid.
    let params = AttentionParams::seeded(8, 2, &mut rng).unwrap();
    let shape = (8, CLIP_LEN, 8, 8);
    let f_v = Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0));
    let f_m = Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0));
    let (_, stats) = cross_attention_with_stats(&f_v, &f_m, &params).unwrap();
    let rows_ok = stats.max_row_sum_dev <= 1e-6;

    // Small-shape agreement with the materialized oracle.
    let small = (4, 2, 3, 2);
    let sp = AttentionParams::seeded(4, 2, &mut rng).unwrap();
    let sv = Array4::from_shape_simple_fn(small, || rng.random_range(-1.0f32..1.0));
    let sm = Array4::from_shape_simple_fn(small, || rng.random_range(-1.0f32..1.0));
    let got = cross_attention_forward(&sv, &sm, &sp).unwrap();
    let want = naive_attention(&sv, &sm, &sp);
    let attn_diff = got.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);

    // Map encoder against the quadruple-loop oracle.
    let enc = MapEncoderWeights::new(
        MAP_ENCODER_LAYOUT.map(|(o, i, kh, kw)| Conv2d::seeded(o, i, kh, kw, &mut rng)),
    )
    .unwrap();
    let patch9 = Array3::from_shape_simple_fn((2, 9, 9), || rng.random_range(0.0f32..1.0));
    let enc_got = map_encoder_forward(&patch9, &enc).unwrap();
    let enc_want = naive_map_encoder(&patch9, &enc);
    let enc_diff =
        enc_got.iter().zip(enc_want.iter()).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);

    // Full model at 224 x 224 output: strictly inside (0, 1), not constant.
    let cfg = PyramidConfig { channels: [4, 8, 16, 32], base_hw: (56, 56), t: CLIP_LEN };
    let model = FusionModel::seeded(cfg.clone(), BTreeSet::from([4]), 99).unwrap();
    let scene = synthetic_scene_features(1234, &cfg).unwrap();
    let patch = Array3::from_shape_simple_fn((2, 128, 128), || rng.random_range(0.0f32..1.0));
    let out = model.forward(&patch, &scene).unwrap();
    let (lo, hi) = out.iter().fold((1.0f32, 0.0f32), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range_ok = out.dim() == (224, 224) && lo > 0.0 && hi < 1.0 && lo < hi;

    // All-zero weights collapse to an exactly uniform 0.5 map.
    let cfg_small = PyramidConfig { channels: [4, 8, 16, 32], base_hw: (32, 32), t: CLIP_LEN };
    let zero = FusionModel::zeroed(cfg_small.clone(), BTreeSet::from([3])).unwrap();
    let scene_small = synthetic_scene_features(5, &cfg_small).unwrap();
    let patch_small = Array3::from_shape_simple_fn((2, 64, 64), || rng.random_range(0.0f32..1.0));
    let zero_out = zero.forward(&patch_small, &scene_small).unwrap();
    let uniform_ok = zero_out.iter().all(|&v| v == 0.5);

    check(
        "fusion attention rows, oracles and output range",
        rows_ok && attn_diff <= 1e-6 && enc_diff <= 1e-6 && range_ok && uniform_ok,
        &format!(
            "row-sum dev {:.2e}; attention vs oracle {attn_diff:.2e}; encoder vs oracle \
             {enc_diff:.2e}; 224x224 output in [{lo:.4}, {hi:.4}]; zero model uniform 0.5: {uniform_ok}",
            stats.max_row_sum_dev
        ),
    );
}

// ---------------------------------------------------------------------------
// dataset segmentation

#[test]
fn a8_segment_count_closed_form() {
    let mut mismatches = 0usize;
    for len in 16..=1000usize {
        let want = (len - 16) / 8 + 1;
        if gazemap::dataset::generate_segments("v", len, 16, 8).len() != want {
            mismatches += 1;
        }
    }
    let hundred = gazemap::dataset::generate_segments("v", 100, 16, 8).len();
    check(
        "segment count closed form",
        mismatches == 0 && hundred == 11,
        &format!("0 mismatches over lengths 16..=1000 (got {mismatches}); length 100 gives {hundred} segments"),
    );
}

// ---------------------------------------------------------------------------
// end-to-end pipeline

fn hash_tree(root: &Path) -> BTreeMap<String, [u8; 32]> {
    fn walk(dir: &Path, root: &Path, out: &mut BTreeMap<String, [u8; 32]>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(&path, root, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                let digest = Sha256::digest(std::fs::read(&path).unwrap());
                out.insert(rel, digest.into());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn a9_bundled_pipeline_is_fast_and_reproducible() {
    let fixtures = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures");
    let mut cfg = PipelineConfig::from_toml_file(fixtures.join("config.toml")).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    cfg.paths.out_dir = tmp.path().join("out");

    let t0 = Instant::now();
    let report = run_pipeline(&cfg, 1).unwrap();
    let elapsed = t0.elapsed();
    let first = hash_tree(&cfg.paths.out_dir);

    run_pipeline(&cfg, 1).unwrap();
    let second = hash_tree(&cfg.paths.out_dir);

    check(
        "bundled pipeline speed and reproducibility",
        elapsed < Duration::from_secs(60)
            && !first.is_empty()
            && first == second
            && report.evaluated > 0
            && report.errors.is_empty(),
        &format!(
            "{} segments evaluated in {elapsed:.2?}; {} output files byte-identical on re-run",
            report.evaluated,
            first.len()
        ),
    );
}
