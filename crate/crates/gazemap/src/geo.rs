//! Geographic primitives: WGS-84 points, bounding boxes, great-circle
//! distance and the local equirectangular projection used for all planar
//! math in this crate.
//!
//! The projection treats the Earth as a sphere of radius [`EARTH_RADIUS_M`]
//! and scales longitude by the cosine of a fixed reference latitude. Over
//! the few-kilometer extents handled here that is accurate to well under a
//! meter, and it is exactly invertible, which the rasterizer depends on.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// WGS-84 semi-major axis in meters.
pub const EARTH_RADIUS_M: f64 = 6_378_137.0;

#[derive(Debug, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    LatitudeOutOfRange(f64),
    #[error("longitude {0} outside [-180, 180]")]
    LongitudeOutOfRange(f64),
    #[error("coordinates must be finite")]
    NonFinite,
    #[error("bounding box needs at least one point")]
    EmptyBBox,
}

/// A WGS-84 coordinate in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    /// Validating constructor; rejects NaN/inf and out-of-range coordinates.
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(GeoError::NonFinite);
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::LatitudeOutOfRange(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::LongitudeOutOfRange(lon));
        }
        Ok(Self { lat, lon })
    }
}

/// Great-circle distance in meters (haversine form, stable for short arcs).
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    let (la, lb) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lb - la;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + la.cos() * lb.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Compass bearing from `a` to `b` in degrees, 0 = north, 90 = east.
///
/// Computed on the local tangent plane at the midpoint latitude, which is
/// what the heading-up patch sampler expects.
pub fn bearing_deg(a: GeoPoint, b: GeoPoint) -> f64 {
    let cos_mid = ((a.lat + b.lat) * 0.5).to_radians().cos();
    let east = (b.lon - a.lon).to_radians() * cos_mid;
    let north = (b.lat - a.lat).to_radians();
    east.atan2(north).to_degrees().rem_euclid(360.0)
}

/// Geographic bounding box. `offset_m` records the metric padding that was
/// applied when the box was built (zero for a tight fit).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
    pub offset_m: f64,
}

impl BBox {
    /// Tight box around a set of points.
    pub fn from_points<I: IntoIterator<Item = GeoPoint>>(points: I) -> Result<Self, GeoError> {
        let mut it = points.into_iter();
        let first = it.next().ok_or(GeoError::EmptyBBox)?;
        let mut b = BBox {
            min_lat: first.lat,
            min_lon: first.lon,
            max_lat: first.lat,
            max_lon: first.lon,
            offset_m: 0.0,
        };
        for p in it {
            b.min_lat = b.min_lat.min(p.lat);
            b.min_lon = b.min_lon.min(p.lon);
            b.max_lat = b.max_lat.max(p.lat);
            b.max_lon = b.max_lon.max(p.lon);
        }
        Ok(b)
    }

    /// Expand every side by `offset_m` meters. Longitude padding is scaled
    /// by the center latitude so the padding is metric, not angular.
    pub fn expanded(&self, offset_m: f64) -> BBox {
        let dlat = (offset_m / EARTH_RADIUS_M).to_degrees();
        let cos_c = self.center().lat.to_radians().cos().max(1e-12);
        let dlon = (offset_m / (EARTH_RADIUS_M * cos_c)).to_degrees();
        BBox {
            min_lat: self.min_lat - dlat,
            min_lon: self.min_lon - dlon,
            max_lat: self.max_lat + dlat,
            max_lon: self.max_lon + dlon,
            offset_m: self.offset_m + offset_m,
        }
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: (self.min_lat + self.max_lat) * 0.5,
            lon: (self.min_lon + self.max_lon) * 0.5,
        }
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.min_lat && p.lat <= self.max_lat && p.lon >= self.min_lon && p.lon <= self.max_lon
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            min_lat: self.min_lat.min(other.min_lat),
            min_lon: self.min_lon.min(other.min_lon),
            max_lat: self.max_lat.max(other.max_lat),
            max_lon: self.max_lon.max(other.max_lon),
            offset_m: self.offset_m.max(other.offset_m),
        }
    }

    /// Planar extent in meters under a projection referenced to the box center.
    pub fn extent_m(&self) -> (f64, f64) {
        let proj = LocalProjection::centered_on(self);
        let [x0, y0] = proj.to_xy(GeoPoint { lat: self.min_lat, lon: self.min_lon });
        let [x1, y1] = proj.to_xy(GeoPoint { lat: self.max_lat, lon: self.max_lon });
        (x1 - x0, y1 - y0)
    }
}

/// Local equirectangular projection about an origin point.
///
/// `x` grows east and `y` grows north, both in meters. The longitude scale
/// is frozen at `lat_ref`, so the mapping is affine and exactly invertible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalProjection {
    origin: GeoPoint,
    lat_ref_deg: f64,
    cos_ref: f64,
}

impl LocalProjection {
    pub fn new(origin: GeoPoint, lat_ref_deg: f64) -> Self {
        Self { origin, lat_ref_deg, cos_ref: lat_ref_deg.to_radians().cos() }
    }

    /// Projection centered on a bounding box, with the reference latitude at
    /// the box center.
    pub fn centered_on(bbox: &BBox) -> Self {
        let c = bbox.center();
        Self::new(c, c.lat)
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn lat_ref_deg(&self) -> f64 {
        self.lat_ref_deg
    }

    pub fn to_xy(&self, p: GeoPoint) -> [f64; 2] {
        [
            (p.lon - self.origin.lon).to_radians() * self.cos_ref * EARTH_RADIUS_M,
            (p.lat - self.origin.lat).to_radians() * EARTH_RADIUS_M,
        ]
    }

    pub fn from_xy(&self, xy: [f64; 2]) -> GeoPoint {
        GeoPoint {
            lat: self.origin.lat + (xy[1] / EARTH_RADIUS_M).to_degrees(),
            lon: self.origin.lon + (xy[0] / (EARTH_RADIUS_M * self.cos_ref)).to_degrees(),
        }
    }
}
