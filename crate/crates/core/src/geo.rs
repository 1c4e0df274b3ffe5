//! Geographic primitives: geohash encode/decode, neighbor-inclusive proximity
//! search with precision widening, and great-circle distance.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const BASE32: &[u8; 32] = b"0123456789bcdefghjkmnpqrstuvwxyz";

pub const MAX_PRECISION: u8 = 12;

/// Default precision for coarse proximity matching (~39 km x 19.5 km cells).
pub const DEFAULT_PRECISION: u8 = 4;

pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("precision {0} outside 1..=12")]
    Precision(u8),
    #[error("invalid geohash {0:?}")]
    InvalidHash(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        Ok(GeoPoint { lat, lon })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

impl<'de> Deserialize<'de> for GeoPoint {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            lat: f64,
            lon: f64,
        }
        let raw = Raw::deserialize(de)?;
        GeoPoint::new(raw.lat, raw.lon).map_err(serde::de::Error::custom)
    }
}

impl fmt::Display for GeoPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.5}, {:.5})", self.lat, self.lon)
    }
}

/// Anything with a position that proximity search can filter.
pub trait Located {
    fn location(&self) -> GeoPoint;
}

impl Located for GeoPoint {
    fn location(&self) -> GeoPoint {
        *self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct GeoHash(String);

/// Bounding box of one geohash cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl Cell {
    pub fn center(&self) -> GeoPoint {
        GeoPoint {
            lat: (self.min_lat + self.max_lat) / 2.0,
            lon: (self.min_lon + self.max_lon) / 2.0,
        }
    }

    pub fn contains(&self, p: GeoPoint) -> bool {
        p.lat >= self.min_lat && p.lat <= self.max_lat && p.lon >= self.min_lon && p.lon <= self.max_lon
    }
}

impl GeoHash {
    pub fn parse(code: &str) -> Result<Self, GeoError> {
        if code.is_empty() || code.len() > MAX_PRECISION as usize {
            return Err(GeoError::InvalidHash(code.to_string()));
        }
        if !code.bytes().all(|b| BASE32.contains(&b)) {
            return Err(GeoError::InvalidHash(code.to_string()));
        }
        Ok(GeoHash(code.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn precision(&self) -> u8 {
        self.0.len() as u8
    }

    pub fn cell(&self) -> Cell {
        let mut lat = (-90.0_f64, 90.0_f64);
        let mut lon = (-180.0_f64, 180.0_f64);
        let mut even = true;
        for b in self.0.bytes() {
            let idx = BASE32.iter().position(|&c| c == b).expect("validated at parse");
            for shift in (0..5).rev() {
                let bit = (idx >> shift) & 1 == 1;
                let range = if even { &mut lon } else { &mut lat };
                let mid = (range.0 + range.1) / 2.0;
                if bit {
                    range.0 = mid;
                } else {
                    range.1 = mid;
                }
                even = !even;
            }
        }
        Cell {
            min_lat: lat.0,
            max_lat: lat.1,
            min_lon: lon.0,
            max_lon: lon.1,
        }
    }

    pub fn decode(&self) -> GeoPoint {
        self.cell().center()
    }

    /// True when `self` is a prefix of (and therefore contains) `other`.
    pub fn contains(&self, other: &GeoHash) -> bool {
        other.0.starts_with(&self.0)
    }

    /// The up-to-eight surrounding cells at the same precision. Cells past
    /// a pole are omitted; longitude wraps around the antimeridian.
    pub fn neighbors(&self) -> Vec<GeoHash> {
        let cell = self.cell();
        let dlat = cell.max_lat - cell.min_lat;
        let dlon = cell.max_lon - cell.min_lon;
        let c = cell.center();
        let mut out = Vec::with_capacity(8);
        for dy in [-1.0, 0.0, 1.0] {
            for dx in [-1.0, 0.0, 1.0] {
                if dy == 0.0 && dx == 0.0 {
                    continue;
                }
                let lat = c.lat + dy * dlat;
                if !(-90.0..=90.0).contains(&lat) {
                    continue;
                }
                let mut lon = c.lon + dx * dlon;
                if lon > 180.0 {
                    lon -= 360.0;
                } else if lon < -180.0 {
                    lon += 360.0;
                }
                let p = GeoPoint { lat, lon };
                let h = encode(p, self.precision()).expect("precision already valid");
                if h != *self && !out.contains(&h) {
                    out.push(h);
                }
            }
        }
        out
    }

    /// This cell plus its neighbors.
    pub fn neighborhood(&self) -> Vec<GeoHash> {
        let mut v = vec![self.clone()];
        v.extend(self.neighbors());
        v
    }
}

impl fmt::Display for GeoHash {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub fn check_precision(precision: u8) -> Result<(), GeoError> {
    if (1..=MAX_PRECISION).contains(&precision) {
        Ok(())
    } else {
        Err(GeoError::Precision(precision))
    }
}

pub fn encode(p: GeoPoint, precision: u8) -> Result<GeoHash, GeoError> {
    check_precision(precision)?;
    let mut lat = (-90.0_f64, 90.0_f64);
    let mut lon = (-180.0_f64, 180.0_f64);
    let mut code = String::with_capacity(precision as usize);
    let mut even = true;
    let mut idx = 0usize;
    let mut bits = 0;
    while code.len() < precision as usize {
        let (range, v) = if even { (&mut lon, p.lon) } else { (&mut lat, p.lat) };
        let mid = (range.0 + range.1) / 2.0;
        idx <<= 1;
        if v >= mid {
            idx |= 1;
            range.0 = mid;
        } else {
            range.1 = mid;
        }
        even = !even;
        bits += 1;
        if bits == 5 {
            code.push(BASE32[idx] as char);
            idx = 0;
            bits = 0;
        }
    }
    Ok(GeoHash(code))
}

/// Nodes whose cell at `precision` is the center's cell or one of its eight
/// neighbors. Returns items in input order.
pub fn proximity_search<'a, T: Located>(center: GeoPoint, nodes: &'a [T], precision: u8) -> Vec<&'a T> {
    let Ok(home) = encode(center, precision) else {
        return Vec::new();
    };
    let area = home.neighborhood();
    nodes
        .iter()
        .filter(|n| {
            let h = encode(n.location(), precision).expect("precision checked");
            area.contains(&h)
        })
        .collect()
}

/// Widen the search (decrement precision) until at least `min_count` nodes
/// match or precision reaches 1.
pub fn widen_until<'a, T: Located>(
    center: GeoPoint,
    nodes: &'a [T],
    min_count: usize,
    start_precision: u8,
) -> (Vec<&'a T>, u8) {
    let mut precision = start_precision.clamp(1, MAX_PRECISION);
    loop {
        let found = proximity_search(center, nodes, precision);
        if found.len() >= min_count.max(1) || precision == 1 {
            return (found, precision);
        }
        precision -= 1;
    }
}

/// The precision `widen_until` would settle on, without materializing results.
pub fn widened_precision<T: Located>(center: GeoPoint, nodes: &[T], min_count: usize, start_precision: u8) -> u8 {
    widen_until(center, nodes, min_count, start_precision).1
}

/// True if `p` falls in the cell-or-neighbors of `center` at `precision`.
pub fn in_neighborhood(center: GeoPoint, p: GeoPoint, precision: u8) -> bool {
    match (encode(center, precision), encode(p, precision)) {
        (Ok(c), Ok(h)) => c == h || c.neighbors().contains(&h),
        _ => false,
    }
}

pub fn haversine_km(a: GeoPoint, b: GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}
