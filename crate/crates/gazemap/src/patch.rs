//! Heading-up map/route patch extraction around a matched ego position.
//!
//! A patch is built crop-rotate-crop: an oversized square (side
//! `2 * radius * sqrt(2)`, so rotation never clips a corner) is cut from the
//! raster around the ego center, rotated so the direction of travel points
//! up, center-cropped to `2 * radius` meters and resized to the output
//! resolution. The route channel is an empty grid of the oversized crop's
//! geometry with the 16 per-frame route points plotted as a polyline, then
//! pushed through exactly the same rotate/crop/resize, which keeps the two
//! channels registered to the pixel.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::geo::{bearing_deg, haversine_m, GeoPoint};
use crate::imgops;
use crate::raster::{draw_polyline_px, RasterMap, DEFAULT_LINE_WIDTH_PX};

/// Frames per observation clip; route inputs must match it.
pub const CLIP_LEN: usize = 16;

/// Output resolution of a model-ready patch.
pub const DEFAULT_PATCH_SIZE_PX: usize = 128;

/// Lookahead radius bounds in meters.
pub const RADIUS_RANGE_M: (f64, f64) = (25.0, 200.0);

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error("radius {0} m outside [25, 200]")]
    RadiusOutOfRange(f64),
    #[error("route must contain exactly {CLIP_LEN} points, got {0}")]
    BadRouteLength(usize),
    #[error("heading needs at least 2 route points")]
    TooFewRoutePoints,
    #[error("out_size must be >= 1")]
    BadOutSize,
    #[error("tensor {path}: {message}")]
    Tensor { path: PathBuf, message: String },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Everything needed to cut one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchRequest {
    pub center: GeoPoint,
    pub heading_deg: f64,
    pub radius_m: f64,
    pub route_points: Vec<GeoPoint>,
    pub out_size_px: usize,
}

impl PatchRequest {
    pub fn new(
        center: GeoPoint,
        heading_deg: f64,
        radius_m: f64,
        route_points: Vec<GeoPoint>,
        out_size_px: usize,
    ) -> Result<Self, PatchError> {
        if !(RADIUS_RANGE_M.0..=RADIUS_RANGE_M.1).contains(&radius_m) {
            return Err(PatchError::RadiusOutOfRange(radius_m));
        }
        if route_points.len() != CLIP_LEN {
            return Err(PatchError::BadRouteLength(route_points.len()));
        }
        if out_size_px == 0 {
            return Err(PatchError::BadOutSize);
        }
        Ok(Self { center, heading_deg, radius_m, route_points, out_size_px })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PatchMeta {
    pub center_lat: f64,
    pub center_lon: f64,
    pub heading_deg: f64,
    pub radius_m: f64,
    pub m_per_px: f64,
    /// Side of the axis-aligned crop before the final resize, in raster px.
    pub crop_px: usize,
    pub out_size_px: usize,
}

/// Two registered channels, `[map, route]`, each `out_size x out_size` in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct MapPatch {
    pub channels: Array3<f32>,
    pub meta: PatchMeta,
}

/// Travel bearing of a route: first point to last point, clockwise from
/// north. A displacement under half a meter means the vehicle is standing;
/// the caller's previous heading (if any) is reused, else 0.
pub fn heading_from_route(route: &[GeoPoint], prior_heading_deg: Option<f64>) -> Result<f64, PatchError> {
    if route.len() < 2 {
        return Err(PatchError::TooFewRoutePoints);
    }
    let first = route[0];
    let last = *route.last().unwrap();
    if haversine_m(first, last) >= 0.5 {
        Ok(bearing_deg(first, last))
    } else {
        Ok(prior_heading_deg.unwrap_or(0.0))
    }
}

/// Cut a heading-up patch. The center may sit close to (or beyond) the
/// raster border; missing coverage reads as zero.
pub fn sample_patch(raster: &RasterMap, req: &PatchRequest) -> Result<MapPatch, PatchError> {
    // Re-validate: requests can arrive deserialized, not just via new().
    let req = PatchRequest::new(
        req.center,
        req.heading_deg,
        req.radius_m,
        req.route_points.clone(),
        req.out_size_px,
    )?;
    let t = raster.transform();
    let m_per_px = t.m_per_px;
    let s2 = (2.0 * req.radius_m / m_per_px).round().max(1.0) as usize;
    // Oversize for rotation: at least s2 * sqrt(2), padded symmetrically so
    // the later center crop is an exact pixel slice.
    let pad = 2.0 * ((s2 as f64 * (std::f64::consts::SQRT_2 - 1.0)) / 2.0).ceil();
    let s1 = s2 + pad as usize;

    let [cx, cy] = t.geo_to_pixel(req.center);
    let map1 = imgops::crop_centered(&raster.grid().view(), cx, cy, s1);

    // Route channel shares the oversized crop's frame; plot, then transform
    // identically to the map channel.
    let mut route1 = Array2::<f32>::zeros((s1, s1));
    let half = s1 as f64 / 2.0;
    let route_px: Vec<[f64; 2]> = req
        .route_points
        .iter()
        .map(|&p| {
            let [x, y] = t.geo_to_pixel(p);
            [x - cx + half, y - cy + half]
        })
        .collect();
    draw_polyline_px(&mut route1, &route_px, DEFAULT_LINE_WIDTH_PX);

    let finish = |grid: Array2<f32>| -> Array2<f32> {
        let rot = imgops::rotate_heading_up(&grid.view(), req.heading_deg);
        let cropped = imgops::crop_center_exact(&rot.view(), s2);
        let out = imgops::resize_bilinear(&cropped.view(), req.out_size_px, req.out_size_px);
        out.mapv(|v| v.clamp(0.0, 1.0))
    };
    let map_ch = finish(map1);
    let route_ch = finish(route1);

    let n = req.out_size_px;
    let mut channels = Array3::<f32>::zeros((2, n, n));
    channels.index_axis_mut(ndarray::Axis(0), 0).assign(&map_ch);
    channels.index_axis_mut(ndarray::Axis(0), 1).assign(&route_ch);
    Ok(MapPatch {
        channels,
        meta: PatchMeta {
            center_lat: req.center.lat,
            center_lon: req.center.lon,
            heading_deg: req.heading_deg,
            radius_m: req.radius_m,
            m_per_px,
            crop_px: s2,
            out_size_px: n,
        },
    })
}

// ---------------------------------------------------------------------------
// float tensor disk format
//
// Flat little-endian f32 binary next to a JSON sidecar that records at least
// {"shape": [...]} plus any extra metadata. Patches use shape [2, S, S];
// saliency maps and network outputs reuse the same format with [H, W].

#[derive(Serialize, Deserialize)]
struct TensorSidecar {
    shape: Vec<usize>,
    #[serde(flatten)]
    extra: serde_json::Map<String, serde_json::Value>,
}

pub fn write_f32_tensor<P: AsRef<Path>>(
    path: P,
    shape: &[usize],
    data: &[f32],
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<(), PatchError> {
    let expected: usize = shape.iter().product();
    if expected != data.len() {
        return Err(PatchError::Tensor {
            path: path.as_ref().into(),
            message: format!("shape {shape:?} needs {expected} values, got {}", data.len()),
        });
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(&path)?);
    for v in data {
        f.write_all(&v.to_le_bytes())?;
    }
    f.flush()?;
    let side = TensorSidecar { shape: shape.to_vec(), extra };
    std::fs::write(sidecar_of(path.as_ref()), serde_json::to_string_pretty(&side)?)?;
    Ok(())
}

pub fn read_f32_tensor<P: AsRef<Path>>(path: P) -> Result<(Vec<usize>, Vec<f32>), PatchError> {
    let side: TensorSidecar =
        serde_json::from_str(&std::fs::read_to_string(sidecar_of(path.as_ref()))?)?;
    let expected: usize = side.shape.iter().product();
    let mut bytes = Vec::new();
    std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
    if bytes.len() != expected * 4 {
        return Err(PatchError::Tensor {
            path: path.as_ref().into(),
            message: format!("sidecar shape {:?} needs {} bytes, file has {}", side.shape, expected * 4, bytes.len()),
        });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((side.shape, data))
}

fn sidecar_of(path: &Path) -> PathBuf {
    path.with_extension("json")
}

impl MapPatch {
    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<(), PatchError> {
        let (c, h, w) = self.channels.dim();
        let data: Vec<f32> = self.channels.iter().copied().collect();
        let extra = match serde_json::to_value(self.meta)? {
            serde_json::Value::Object(m) => m,
            _ => unreachable!("meta serializes to an object"),
        };
        write_f32_tensor(path, &[c, h, w], &data, extra)
    }

    pub fn load<P: AsRef<Path>>(path: P) -> Result<Self, PatchError> {
        let meta: PatchMeta =
            serde_json::from_str(&std::fs::read_to_string(sidecar_of(path.as_ref()))?)?;
        let (shape, data) = read_f32_tensor(&path)?;
        if shape.len() != 3 || shape[0] != 2 || shape[1] != shape[2] {
            return Err(PatchError::Tensor {
                path: path.as_ref().into(),
                message: format!("expected [2, S, S] patch, found {shape:?}"),
            });
        }
        let channels = Array3::from_shape_vec((shape[0], shape[1], shape[2]), data)
            .expect("length validated by read_f32_tensor");
        Ok(Self { channels, meta })
    }

    pub fn map_channel(&self) -> ArrayView2<'_, f32> {
        self.channels.index_axis(ndarray::Axis(0), 0)
    }

    pub fn route_channel(&self) -> ArrayView2<'_, f32> {
        self.channels.index_axis(ndarray::Axis(0), 1)
    }
}
