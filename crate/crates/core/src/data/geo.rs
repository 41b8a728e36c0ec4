//! Great-circle distances, centroid assignment and the proximity matrix.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius (IUGG), kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceUnit {
    #[default]
    Kilometers,
    Miles,
    Meters,
}

impl DistanceUnit {
    fn per_km(self) -> f64 {
        match self {
            DistanceUnit::Kilometers => 1.0,
            DistanceUnit::Miles => 1.0 / 1.609_344,
            DistanceUnit::Meters => 1000.0,
        }
    }
}

/// Haversine great-circle distance in kilometers.
pub fn haversine_km(a: LatLon, b: LatLon) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = (b.lat - a.lat).to_radians();
    let dlon = (b.lon - a.lon).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

pub fn distance(a: LatLon, b: LatLon, unit: DistanceUnit) -> f64 {
    haversine_km(a, b) * unit.per_km()
}

/// `1 / sqrt(1 + dist)`.
pub fn proximity(dist: f64) -> f64 {
    1.0 / (1.0 + dist).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Centroid {
    pub id: String,
    pub name: String,
    pub position: LatLon,
}

#[derive(Deserialize)]
struct CentroidRow {
    neighborhood_id: String,
    name: String,
    lat: f64,
    lon: f64,
}

/// Reads `neighborhood_id,name,lat,lon`. Row order defines location indices.
pub fn load_centroids(path: &Path) -> Result<Vec<Centroid>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize::<CentroidRow>() {
        let row = row?;
        let position = LatLon::new(row.lat, row.lon);
        if !position.is_valid() {
            return Err(Error::Schema(format!(
                "centroid {} has invalid coordinates ({}, {})",
                row.neighborhood_id, row.lat, row.lon
            )));
        }
        out.push(Centroid {
            id: row.neighborhood_id.trim().to_string(),
            name: row.name.trim().to_string(),
            position,
        });
    }
    if out.is_empty() {
        return Err(Error::Schema(format!("no centroids in {}", path.display())));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub max_lat: f64,
    pub min_lon: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn contains(&self, p: LatLon) -> bool {
        (self.min_lat..=self.max_lat).contains(&p.lat) && (self.min_lon..=self.max_lon).contains(&p.lon)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Rejection {
    InvalidCoordinates,
    OutsideBoundingBox,
    NoCentroids,
}

/// Index of the nearest centroid by haversine distance; ties go to the lowest index.
pub fn assign_neighborhood(
    point: LatLon,
    centroids: &[Centroid],
    bbox: Option<&BoundingBox>,
) -> std::result::Result<usize, Rejection> {
    if !point.is_valid() {
        return Err(Rejection::InvalidCoordinates);
    }
    if bbox.is_some_and(|b| !b.contains(point)) {
        return Err(Rejection::OutsideBoundingBox);
    }
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in centroids.iter().enumerate() {
        let d = haversine_km(point, c.position);
        if best.map_or(true, |(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| i).ok_or(Rejection::NoCentroids)
}

/// Row-major `[L×L]` proximity matrix; exactly symmetric with a unit diagonal.
pub fn proximity_matrix(centroids: &[Centroid], unit: DistanceUnit) -> Vec<f64> {
    let l = centroids.len();
    let mut out = vec![0.0; l * l];
    for i in 0..l {
        out[i * l + i] = 1.0;
        for j in i + 1..l {
            let p = proximity(distance(centroids[i].position, centroids[j].position, unit));
            out[i * l + j] = p;
            out[j * l + i] = p;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centroid(i: usize, lat: f64, lon: f64) -> Centroid {
        Centroid {
            id: i.to_string(),
            name: format!("n{i}"),
            position: LatLon::new(lat, lon),
        }
    }

    #[test]
    fn proximity_formula() {
        assert_eq!(proximity(0.0), 1.0);
        assert_eq!(proximity(3.0), 0.5);
    }

    #[test]
    fn point_at_centroid_maps_to_it() {
        let cs: Vec<_> = (0..4).map(|i| centroid(i, 41.8 + 0.01 * i as f64, -87.7)).collect();
        assert_eq!(assign_neighborhood(cs[2].position, &cs, None), Ok(2));
    }

    #[test]
    fn tie_goes_to_lowest_index() {
        // Points symmetric about the equator/prime meridian give exactly equal distances.
        let cs = vec![
            centroid(0, 10.0, 10.0),
            centroid(1, 20.0, 20.0),
            centroid(2, 0.0, 1.0),
            centroid(3, 30.0, 30.0),
            centroid(4, -40.0, 40.0),
            centroid(5, 0.0, -1.0),
        ];
        assert_eq!(assign_neighborhood(LatLon::new(0.0, 0.0), &cs, None), Ok(2));
    }

    #[test]
    fn outside_bbox_rejected() {
        let cs = vec![centroid(0, 41.8, -87.7)];
        let bbox = BoundingBox {
            min_lat: 41.6,
            max_lat: 42.1,
            min_lon: -87.95,
            max_lon: -87.5,
        };
        assert_eq!(
            assign_neighborhood(LatLon::new(40.0, -87.7), &cs, Some(&bbox)),
            Err(Rejection::OutsideBoundingBox)
        );
        assert_eq!(assign_neighborhood(LatLon::new(41.9, -87.7), &cs, Some(&bbox)), Ok(0));
    }

    #[test]
    fn matrix_symmetric_unit_diagonal() {
        let cs: Vec<_> = (0..5)
            .map(|i| centroid(i, 41.7 + 0.05 * i as f64, -87.8 + 0.03 * (i * i) as f64))
            .collect();
        let p = proximity_matrix(&cs, DistanceUnit::Kilometers);
        for i in 0..5 {
            assert_eq!(p[i * 5 + i], 1.0);
            for j in 0..5 {
                assert_eq!(p[i * 5 + j], p[j * 5 + i]);
                assert!(p[i * 5 + j] > 0.0 && p[i * 5 + j] <= 1.0);
            }
        }
    }

    #[test]
    fn miles_shrink_distance() {
        let a = LatLon::new(41.88, -87.63);
        let b = LatLon::new(39.10, -84.51);
        let km = distance(a, b, DistanceUnit::Kilometers);
        let mi = distance(a, b, DistanceUnit::Miles);
        assert!((km / mi - 1.609_344).abs() < 1e-12);
    }
}
