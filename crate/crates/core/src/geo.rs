//! Coordinates, great-circle distance and point-in-polygon tests.

use serde::{Deserialize, Serialize};

/// Mean Earth radius used for all great-circle computations.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// A WGS84 coordinate in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLon {
    pub lat: f64,
    pub lon: f64,
}

impl LatLon {
    pub fn new(lat: f64, lon: f64) -> Self {
        Self { lat, lon }
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }

    /// Point displaced by `north_m` metres northwards and `east_m` metres eastwards
    /// (small-offset approximation on the sphere).
    pub fn offset_m(&self, north_m: f64, east_m: f64) -> Self {
        let dlat = (north_m / EARTH_RADIUS_M).to_degrees();
        let dlon = (east_m / (EARTH_RADIUS_M * self.lat.to_radians().cos())).to_degrees();
        Self::new(self.lat + dlat, self.lon + dlon)
    }
}

/// Haversine distance in metres.
pub fn haversine_m(a: LatLon, b: LatLon) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// A simple polygon given by its outer ring. The ring may or may not repeat
/// its first vertex at the end.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub ring: Vec<LatLon>,
}

impl Polygon {
    pub fn new(ring: Vec<LatLon>) -> Self {
        Self { ring }
    }

    /// Axis-aligned rectangle in degrees.
    pub fn rectangle(south: f64, west: f64, north: f64, east: f64) -> Self {
        Self::new(vec![
            LatLon::new(south, west),
            LatLon::new(south, east),
            LatLon::new(north, east),
            LatLon::new(north, west),
        ])
    }

    pub fn is_empty(&self) -> bool {
        self.ring.len() < 3 || self.area_deg2() == 0.0
    }

    fn area_deg2(&self) -> f64 {
        let n = self.ring.len();
        let mut twice = 0.0;
        for i in 0..n {
            let a = self.ring[i];
            let b = self.ring[(i + 1) % n];
            twice += a.lon * b.lat - b.lon * a.lat;
        }
        (twice / 2.0).abs()
    }

    /// Ray-casting test in the lon/lat plane. Points on an edge may land on
    /// either side.
    pub fn contains(&self, p: LatLon) -> bool {
        let n = self.ring.len();
        if n < 3 {
            return false;
        }
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (a, b) = (self.ring[i], self.ring[j]);
            if (a.lat > p.lat) != (b.lat > p.lat) {
                let x = (b.lon - a.lon) * (p.lat - a.lat) / (b.lat - a.lat) + a.lon;
                if p.lon < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Bounding box as (south, west, north, east).
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.ring {
            b.0 = b.0.min(p.lat);
            b.1 = b.1.min(p.lon);
            b.2 = b.2.max(p.lat);
            b.3 = b.3.max(p.lon);
        }
        b
    }
}
