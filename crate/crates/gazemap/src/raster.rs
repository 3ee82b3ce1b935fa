//! Metric rasterization of street graphs and the PGM + sidecar disk format.
//!
//! A raster is anchored by a [`GeoTransform`]: north-up, square pixels,
//! origin at the north-west corner. Strokes are anti-aliased with a linear
//! coverage ramp and composed with max blending, so redrawing the same
//! geometry is idempotent and crossing streets do not bloom at the
//! intersection.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::geo::{BBox, GeoPoint, EARTH_RADIUS_M};
use crate::osm::StreetGraph;

/// Hard cap on either raster dimension; anything past this is a sign of a
/// wrong crop or resolution, not a real request.
pub const MAX_RASTER_DIM_PX: usize = 50_000;

/// Default stroke width in pixels, roughly one car lane at 1 m/px.
pub const DEFAULT_LINE_WIDTH_PX: f64 = 2.0;

#[derive(Debug, thiserror::Error)]
pub enum RasterError {
    #[error("m_per_px must be positive and finite, got {0}")]
    BadResolution(f64),
    #[error("raster dimension {0} px exceeds the {MAX_RASTER_DIM_PX} px limit")]
    TooLarge(usize),
    #[error("PGM {path}: {message}")]
    Pgm { path: PathBuf, message: String },
    #[error("I/O: {0}")]
    Io(#[from] std::io::Error),
    #[error("JSON: {0}")]
    Json(#[from] serde_json::Error),
}

/// Mapping between geographic coordinates and pixel coordinates.
///
/// Pixel coordinates are corner-origin: `(0, 0)` is the north-west corner of
/// the north-west pixel, x grows east (columns), y grows south (rows).
/// Serializes directly as the JSON sidecar written next to each PGM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoTransform {
    pub origin_lat: f64,
    pub origin_lon: f64,
    pub m_per_px: f64,
    pub width_px: usize,
    pub height_px: usize,
    pub lat_ref: f64,
}

impl GeoTransform {
    /// Transform covering `bbox` at the given resolution. The reference
    /// latitude is frozen at the box center; dimensions round up to whole
    /// pixels (with a tiny epsilon so exact-integer extents do not spill
    /// into an extra pixel).
    pub fn from_bbox(bbox: &BBox, m_per_px: f64) -> Result<Self, RasterError> {
        if !(m_per_px.is_finite() && m_per_px > 0.0) {
            return Err(RasterError::BadResolution(m_per_px));
        }
        let (width_m, height_m) = bbox.extent_m();
        let px = |extent: f64| ((extent / m_per_px - 1e-6).ceil().max(1.0)) as usize;
        let (width_px, height_px) = (px(width_m), px(height_m));
        for d in [width_px, height_px] {
            if d > MAX_RASTER_DIM_PX {
                return Err(RasterError::TooLarge(d));
            }
        }
        Ok(Self {
            origin_lat: bbox.max_lat,
            origin_lon: bbox.min_lon,
            m_per_px,
            width_px,
            height_px,
            lat_ref: bbox.center().lat,
        })
    }

    pub fn geo_to_pixel(&self, p: GeoPoint) -> [f64; 2] {
        let east = (p.lon - self.origin_lon).to_radians() * self.lat_ref.to_radians().cos() * EARTH_RADIUS_M;
        let south = (self.origin_lat - p.lat).to_radians() * EARTH_RADIUS_M;
        [east / self.m_per_px, south / self.m_per_px]
    }

    pub fn pixel_to_geo(&self, xy: [f64; 2]) -> GeoPoint {
        let east = xy[0] * self.m_per_px;
        let south = xy[1] * self.m_per_px;
        GeoPoint {
            lat: self.origin_lat - (south / EARTH_RADIUS_M).to_degrees(),
            lon: self.origin_lon
                + (east / (EARTH_RADIUS_M * self.lat_ref.to_radians().cos())).to_degrees(),
        }
    }

    /// Whether a pixel-space position falls inside the raster. Out-of-range
    /// positions are legal (callers clip), this is the soft flag.
    pub fn contains_pixel(&self, xy: [f64; 2]) -> bool {
        xy[0] >= 0.0 && xy[1] >= 0.0 && xy[0] <= self.width_px as f64 && xy[1] <= self.height_px as f64
    }
}

/// A single-channel occupancy raster plus its geo anchoring.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterMap {
    grid: Array2<f32>,
    transform: GeoTransform,
}

impl RasterMap {
    pub fn new(transform: GeoTransform) -> Self {
        Self { grid: Array2::zeros((transform.height_px, transform.width_px)), transform }
    }

    pub fn from_parts(grid: Array2<f32>, transform: GeoTransform) -> Self {
        assert_eq!(grid.dim(), (transform.height_px, transform.width_px), "grid/transform mismatch");
        Self { grid, transform }
    }

    pub fn grid(&self) -> &Array2<f32> {
        &self.grid
    }

    pub fn transform(&self) -> &GeoTransform {
        &self.transform
    }

    /// Rasterize every edge of a graph at `m_per_px`, covering its bbox.
    pub fn rasterize_graph(
        graph: &StreetGraph,
        m_per_px: f64,
        line_width_px: f64,
    ) -> Result<RasterMap, RasterError> {
        let transform = GeoTransform::from_bbox(graph.bbox(), m_per_px)?;
        let mut raster = RasterMap::new(transform);
        for e in graph.edges() {
            raster.draw_polyline_geo(&e.geometry, line_width_px);
        }
        Ok(raster)
    }

    pub fn draw_polyline_geo(&mut self, points: &[GeoPoint], width_px: f64) {
        let px: Vec<[f64; 2]> = points.iter().map(|&p| self.transform.geo_to_pixel(p)).collect();
        draw_polyline_px(&mut self.grid, &px, width_px);
    }

    pub fn save<P: AsRef<Path>>(&self, pgm_path: P) -> Result<(), RasterError> {
        write_pgm(&self.grid, &pgm_path)?;
        let side = sidecar_path(pgm_path.as_ref());
        std::fs::write(side, serde_json::to_string_pretty(&self.transform)?)?;
        Ok(())
    }

    pub fn load<P: AsRef<Path>>(pgm_path: P) -> Result<Self, RasterError> {
        let grid = read_pgm(&pgm_path)?;
        let transform: GeoTransform =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(pgm_path.as_ref()))?)?;
        if grid.dim() != (transform.height_px, transform.width_px) {
            return Err(RasterError::Pgm {
                path: pgm_path.as_ref().into(),
                message: format!(
                    "grid {}x{} does not match sidecar {}x{}",
                    grid.dim().0,
                    grid.dim().1,
                    transform.height_px,
                    transform.width_px
                ),
            });
        }
        Ok(Self { grid, transform })
    }
}

/// Sidecar JSON path for a PGM: same stem, `.json` extension.
pub fn sidecar_path(pgm: &Path) -> PathBuf {
    pgm.with_extension("json")
}

/// Stroke an anti-aliased polyline into a grid. Coverage of a pixel is
/// `clamp(width/2 + 0.5 - d, 0, 1)` where `d` is the distance from the pixel
/// center to the segment; pixels take the max of their current value and the
/// new coverage.
pub fn draw_polyline_px(grid: &mut Array2<f32>, points: &[[f64; 2]], width_px: f64) {
    let half = width_px / 2.0;
    for w in points.windows(2) {
        stroke_segment(grid, w[0], w[1], half);
    }
    if points.len() == 1 {
        stroke_segment(grid, points[0], points[0], half);
    }
}

fn stroke_segment(grid: &mut Array2<f32>, a: [f64; 2], b: [f64; 2], half: f64) {
    let (h, w) = grid.dim();
    let reach = half + 0.5;
    let x_lo = ((a[0].min(b[0]) - reach).floor().max(0.0)) as usize;
    let x_hi = ((a[0].max(b[0]) + reach).ceil().min(w as f64)) as usize;
    let y_lo = ((a[1].min(b[1]) - reach).floor().max(0.0)) as usize;
    let y_hi = ((a[1].max(b[1]) + reach).ceil().min(h as f64)) as usize;

    let dx = b[0] - a[0];
    let dy = b[1] - a[1];
    let len2 = dx * dx + dy * dy;
    for i in y_lo..y_hi {
        for j in x_lo..x_hi {
            let px = j as f64 + 0.5;
            let py = i as f64 + 0.5;
            let t = if len2 > 0.0 {
                (((px - a[0]) * dx + (py - a[1]) * dy) / len2).clamp(0.0, 1.0)
            } else {
                0.0
            };
            let d = ((px - (a[0] + t * dx)).powi(2) + (py - (a[1] + t * dy)).powi(2)).sqrt();
            let cov = (half + 0.5 - d).clamp(0.0, 1.0) as f32;
            if cov > grid[(i, j)] {
                grid[(i, j)] = cov;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// PGM I/O

/// Write a `[0, 1]` grid as binary 8-bit PGM (values scaled to 255).
pub fn write_pgm<P: AsRef<Path>>(grid: &Array2<f32>, path: P) -> Result<(), RasterError> {
    let (h, w) = grid.dim();
    let mut out = std::io::BufWriter::new(std::fs::File::create(&path)?);
    write!(out, "P5\n{w} {h}\n255\n")?;
    let bytes: Vec<u8> = grid.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// Read a binary PGM into a `[0, 1]` grid. 8-bit and 16-bit (big-endian)
/// sample depths are supported; values normalize by the stated maxval.
pub fn read_pgm<P: AsRef<Path>>(path: P) -> Result<Array2<f32>, RasterError> {
    let mut bytes = Vec::new();
    std::fs::File::open(&path)?.read_to_end(&mut bytes)?;
    let fail = |message: &str| RasterError::Pgm { path: path.as_ref().into(), message: message.into() };

    // Header: magic, width, height, maxval as whitespace-separated tokens,
    // with '#' comments running to end of line.
    let mut pos = 0usize;
    let mut token = || -> Result<String, RasterError> {
        while pos < bytes.len() {
            match bytes[pos] {
                b' ' | b'\t' | b'\r' | b'\n' => pos += 1,
                b'#' => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(RasterError::Pgm { path: path.as_ref().into(), message: "truncated header".into() });
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };

    if token()? != "P5" {
        return Err(fail("not a binary PGM (expected P5)"));
    }
    let w: usize = token()?.parse().map_err(|_| fail("bad width"))?;
    let h: usize = token()?.parse().map_err(|_| fail("bad height"))?;
    let maxval: u32 = token()?.parse().map_err(|_| fail("bad maxval"))?;
    if !(1..=65_535).contains(&maxval) {
        return Err(fail("maxval outside [1, 65535]"));
    }
    pos += 1; // single whitespace byte after maxval

    let data = &bytes[pos.min(bytes.len())..];
    let scale = 1.0 / maxval as f32;
    let grid = if maxval < 256 {
        if data.len() < w * h {
            return Err(fail("pixel data shorter than header promises"));
        }
        Array2::from_shape_fn((h, w), |(i, j)| data[i * w + j] as f32 * scale)
    } else {
        if data.len() < 2 * w * h {
            return Err(fail("pixel data shorter than header promises"));
        }
        Array2::from_shape_fn((h, w), |(i, j)| {
            let k = 2 * (i * w + j);
            u16::from_be_bytes([data[k], data[k + 1]]) as f32 * scale
        })
    };
    Ok(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn box_around(lat: f64, lon: f64, half_m: f64) -> BBox {
        BBox::from_points([GeoPoint { lat, lon }]).unwrap().expanded(half_m)
    }

    #[test]
    fn transform_round_trips_are_exact() {
        let bbox = box_around(45.0, 7.0, 500.0);
        let t = GeoTransform::from_bbox(&bbox, 1.0).unwrap();
        for &(x, y) in &[(0.0, 0.0), (123.25, 456.75), (999.5, 0.5)] {
            let p = t.pixel_to_geo([x, y]);
            let [x2, y2] = t.geo_to_pixel(p);
            assert!((x - x2).abs() < 0.01 && (y - y2).abs() < 0.01, "round trip drifted");
            assert!((x - x2).abs() < 1e-9, "should be exact, got {}", (x - x2).abs());
        }
        let p = GeoPoint { lat: 45.001, lon: 7.002 };
        let q = t.pixel_to_geo(t.geo_to_pixel(p));
        assert_relative_eq!(p.lat, q.lat, epsilon = 1e-12);
        assert_relative_eq!(p.lon, q.lon, epsilon = 1e-12);
    }

    #[test]
    fn transform_orientation() {
        let bbox = box_around(45.0, 7.0, 500.0);
        let t = GeoTransform::from_bbox(&bbox, 1.0).unwrap();
        // Origin is the NW corner: maps to pixel (0, 0).
        let [x0, y0] = t.geo_to_pixel(GeoPoint { lat: bbox.max_lat, lon: bbox.min_lon });
        assert!(x0.abs() < 1e-9 && y0.abs() < 1e-9);
        // North of the origin is negative y (off-raster), east is positive x.
        let [xn, yn] = t.geo_to_pixel(GeoPoint { lat: bbox.max_lat + 0.001, lon: bbox.min_lon });
        assert!(yn < 0.0 && xn.abs() < 1e-9);
        assert!(!t.contains_pixel([xn, yn]));
        assert!(t.contains_pixel([500.0, 500.0]));
    }

    #[test]
    fn transform_dimensions_and_limits() {
        // 1000 m extent at 1 m/px is exactly 1000 px, not 1001.
        let t = GeoTransform::from_bbox(&box_around(45.0, 7.0, 500.0), 1.0).unwrap();
        assert_eq!((t.width_px, t.height_px), (1000, 1000));
        let t2 = GeoTransform::from_bbox(&box_around(45.0, 7.0, 500.0), 2.0).unwrap();
        assert_eq!((t2.width_px, t2.height_px), (500, 500));
        assert!(matches!(
            GeoTransform::from_bbox(&box_around(45.0, 7.0, 30_000.0), 1.0),
            Err(RasterError::TooLarge(_))
        ));
        assert!(matches!(
            GeoTransform::from_bbox(&box_around(45.0, 7.0, 500.0), 0.0),
            Err(RasterError::BadResolution(_))
        ));
        assert!(matches!(
            GeoTransform::from_bbox(&box_around(45.0, 7.0, 500.0), f64::NAN),
            Err(RasterError::BadResolution(_))
        ));
    }

    #[test]
    fn stroke_coverage_profile() {
        // Horizontal 2 px wide segment through pixel-center row y = 5.5:
        // perpendicular distance 0 -> 1.0, 1.0 -> 0.5, >= 1.5 -> 0.
        let mut g = Array2::<f32>::zeros((11, 20));
        draw_polyline_px(&mut g, &[[2.0, 5.5], [18.0, 5.5]], 2.0);
        assert_relative_eq!(g[(5, 10)], 1.0);
        assert_relative_eq!(g[(4, 10)], 0.5);
        assert_relative_eq!(g[(6, 10)], 0.5);
        assert_eq!(g[(3, 10)], 0.0);
        assert_eq!(g[(7, 10)], 0.0);
        // Along the row, interior pixels are fully covered.
        for j in 2..18 {
            assert_relative_eq!(g[(5, j)], 1.0);
        }
    }

    #[test]
    fn stroke_blending_is_max_and_idempotent() {
        let mut once = Array2::<f32>::zeros((16, 16));
        draw_polyline_px(&mut once, &[[1.0, 8.0], [15.0, 8.0]], 2.0);
        let mut twice = once.clone();
        draw_polyline_px(&mut twice, &[[1.0, 8.0], [15.0, 8.0]], 2.0);
        assert_eq!(once, twice);
        // A crossing stroke does not push values past 1.
        draw_polyline_px(&mut twice, &[[8.0, 1.0], [8.0, 15.0]], 2.0);
        assert!(twice.iter().all(|&v| v <= 1.0));
        assert_relative_eq!(twice[(7, 7)], 1.0);
    }

    #[test]
    fn diagonal_stroke_distance_closed_form() {
        // 45 degree line x = y; pixel center (4.5, 2.5) sits at distance
        // 2/sqrt(2) from it.
        let mut g = Array2::<f32>::zeros((12, 12));
        draw_polyline_px(&mut g, &[[0.0, 0.0], [12.0, 12.0]], 2.0);
        let d = 2.0 / 2.0f64.sqrt();
        assert_relative_eq!(g[(2, 4)], (1.5 - d).clamp(0.0, 1.0) as f32, epsilon = 1e-6);
        assert_relative_eq!(g[(5, 5)], 1.0);
    }

    #[test]
    fn rasterized_graph_translation_consistency() {
        // The same geometry drawn into two rasters whose origins differ by
        // whole pixels must produce identical (shifted) pixels.
        let base = GeoTransform::from_bbox(&box_around(45.0, 7.0, 100.0), 1.0).unwrap();
        let mut shifted = base;
        // Move the origin exactly 3 px north and keep the same lat_ref.
        shifted.origin_lat += (3.0 * base.m_per_px / EARTH_RADIUS_M).to_degrees();
        let mut a = RasterMap::new(base);
        let mut b = RasterMap::new(shifted);
        let line = [GeoPoint { lat: 45.0, lon: 6.9995 }, GeoPoint { lat: 45.0003, lon: 7.0005 }];
        a.draw_polyline_geo(&line, 2.0);
        b.draw_polyline_geo(&line, 2.0);
        for i in 0..base.height_px - 3 {
            for j in 0..base.width_px {
                assert!(
                    (a.grid()[(i, j)] - b.grid()[(i + 3, j)]).abs() < 1e-5,
                    "mismatch at ({i}, {j})"
                );
            }
        }
    }

    #[test]
    fn pgm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pgm");
        let g = Array2::from_shape_fn((7, 13), |(i, j)| ((i * 13 + j) as f32 / 90.0).min(1.0));
        write_pgm(&g, &path).unwrap();
        let r = read_pgm(&path).unwrap();
        assert_eq!(r.dim(), (7, 13));
        for (a, b) in g.iter().zip(r.iter()) {
            assert_relative_eq!(*b, (a * 255.0).round() / 255.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn pgm_16_bit_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t16.pgm");
        let mut bytes = b"P5\n# a comment\n2 1\n65535\n".to_vec();
        bytes.extend_from_slice(&65535u16.to_be_bytes());
        bytes.extend_from_slice(&16384u16.to_be_bytes());
        std::fs::write(&path, bytes).unwrap();
        let g = read_pgm(&path).unwrap();
        assert_relative_eq!(g[(0, 0)], 1.0);
        assert_relative_eq!(g[(0, 1)], 16384.0 / 65535.0, epsilon = 1e-6);
    }

    #[test]
    fn pgm_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        std::fs::write(&path, b"P6\n2 2\n255\nxxxx").unwrap();
        assert!(matches!(read_pgm(&path), Err(RasterError::Pgm { .. })));
        std::fs::write(&path, b"P5\n4 4\n255\nxx").unwrap();
        assert!(matches!(read_pgm(&path), Err(RasterError::Pgm { .. })));
    }

    #[test]
    fn raster_map_save_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let t = GeoTransform::from_bbox(&box_around(45.0, 7.0, 50.0), 1.0).unwrap();
        let mut m = RasterMap::new(t);
        m.draw_polyline_geo(
            &[GeoPoint { lat: 45.0, lon: 6.9998 }, GeoPoint { lat: 45.0, lon: 7.0002 }],
            2.0,
        );
        m.save(&path).unwrap();
        assert!(sidecar_path(&path).exists());
        let back = RasterMap::load(&path).unwrap();
        assert_eq!(back.transform(), m.transform());
        for (a, b) in m.grid().iter().zip(back.grid().iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
