//! File formats: `nodes.csv` + `network.csv`, `stations.geojson` and the
//! `amenities/<YYYY-MM>.csv` directory.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::amenity::{Amenity, AmenityArchive, AmenitySnapshot, YearMonth};
use super::network::RoadNetwork;
use super::station::{OutletEvent, OutletEventKind, StationSnapshot};
use super::SpatialError;
use crate::geo::LatLon;
use crate::Level;

#[derive(Debug, Serialize, Deserialize)]
struct NodeRow {
    node: String,
    lat: f64,
    lon: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct EdgeRow {
    node_a: String,
    node_b: String,
    length_m: f64,
}

pub fn read_network<R1: Read, R2: Read>(nodes: R1, edges: R2) -> Result<RoadNetwork, SpatialError> {
    let mut net = RoadNetwork::new();
    for row in csv::Reader::from_reader(nodes).deserialize() {
        let row: NodeRow = row?;
        net.add_node(row.node, LatLon::new(row.lat, row.lon))?;
    }
    for row in csv::Reader::from_reader(edges).deserialize() {
        let row: EdgeRow = row?;
        net.add_edge(&row.node_a, &row.node_b, row.length_m)?;
    }
    Ok(net)
}

pub fn load_network(nodes_csv: &Path, network_csv: &Path) -> Result<RoadNetwork, SpatialError> {
    read_network(fs::File::open(nodes_csv)?, fs::File::open(network_csv)?)
}

/// Writes `nodes.csv` and `network.csv` rows from explicit lists.
pub fn write_network<W1: Write, W2: Write>(
    nodes: &[(String, LatLon)],
    edges: &[(String, String, f64)],
    nodes_out: W1,
    edges_out: W2,
) -> Result<(), SpatialError> {
    let mut w = csv::Writer::from_writer(nodes_out);
    for (id, p) in nodes {
        w.serialize(NodeRow { node: id.clone(), lat: p.lat, lon: p.lon })?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(edges_out);
    for (a, b, len) in edges {
        w.serialize(EdgeRow { node_a: a.clone(), node_b: b.clone(), length_m: *len })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureCollection<P> {
    #[serde(rename = "type")]
    kind: String,
    features: Vec<Feature<P>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Feature<P> {
    #[serde(rename = "type")]
    kind: String,
    geometry: Point,
    properties: P,
}

#[derive(Debug, Serialize, Deserialize)]
struct Point {
    #[serde(rename = "type")]
    kind: String,
    /// `[lon, lat]`
    coordinates: [f64; 2],
}

#[derive(Debug, Serialize, Deserialize)]
struct EventJson {
    date: DateTime<Utc>,
    kind: OutletEventKind,
}

#[derive(Debug, Serialize, Deserialize)]
struct StationProps {
    station_id: String,
    level: Level,
    #[serde(default)]
    operator: String,
    outlet_events: Vec<EventJson>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    closed: Option<DateTime<Utc>>,
}

pub fn read_stations<R: Read>(reader: R) -> Result<Vec<StationSnapshot>, SpatialError> {
    let fc: FeatureCollection<StationProps> = serde_json::from_reader(reader)?;
    Ok(fc
        .features
        .into_iter()
        .map(|f| StationSnapshot {
            station_id: f.properties.station_id,
            pos: LatLon::new(f.geometry.coordinates[1], f.geometry.coordinates[0]),
            level: f.properties.level,
            operator: f.properties.operator,
            outlet_events: f.properties.outlet_events.into_iter().map(|e| OutletEvent { at: e.date, kind: e.kind }).collect(),
            closed: f.properties.closed,
        })
        .collect())
}

pub fn write_stations<W: Write>(stations: &[StationSnapshot], out: W) -> Result<(), SpatialError> {
    let fc = FeatureCollection {
        kind: "FeatureCollection".into(),
        features: stations
            .iter()
            .map(|s| Feature {
                kind: "Feature".into(),
                geometry: Point { kind: "Point".into(), coordinates: [s.pos.lon, s.pos.lat] },
                properties: StationProps {
                    station_id: s.station_id.clone(),
                    level: s.level,
                    operator: s.operator.clone(),
                    outlet_events: s.outlet_events.iter().map(|e| EventJson { date: e.at, kind: e.kind }).collect(),
                    closed: s.closed,
                },
            })
            .collect(),
    };
    serde_json::to_writer_pretty(out, &fc)?;
    Ok(())
}

/// Generic GeoJSON point writer used for solution maps.
pub fn write_point_features<W: Write, P: Serialize>(points: &[(LatLon, P)], out: W) -> Result<(), SpatialError> {
    let fc = FeatureCollection {
        kind: "FeatureCollection".into(),
        features: points
            .iter()
            .map(|(p, props)| Feature {
                kind: "Feature".into(),
                geometry: Point { kind: "Point".into(), coordinates: [p.lon, p.lat] },
                properties: props,
            })
            .collect(),
    };
    serde_json::to_writer_pretty(out, &fc)?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct AmenityRow {
    category: String,
    lat: f64,
    lon: f64,
}

pub fn read_amenity_snapshot<R: Read>(month: YearMonth, reader: R) -> Result<AmenitySnapshot, SpatialError> {
    let mut amenities = Vec::new();
    for row in csv::Reader::from_reader(reader).deserialize() {
        let row: AmenityRow = row?;
        amenities.push(Amenity { category: row.category.parse()?, pos: LatLon::new(row.lat, row.lon) });
    }
    Ok(AmenitySnapshot { month, amenities })
}

pub fn write_amenity_snapshot<W: Write>(snapshot: &AmenitySnapshot, out: W) -> Result<(), SpatialError> {
    let mut w = csv::Writer::from_writer(out);
    for a in &snapshot.amenities {
        w.serialize(AmenityRow { category: a.category.as_str().into(), lat: a.pos.lat, lon: a.pos.lon })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads every `<YYYY-MM>.csv` in `dir`; other files are ignored.
pub fn load_amenity_archive(dir: &Path) -> Result<AmenityArchive, SpatialError> {
    let mut archive = AmenityArchive::default();
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.extension().and_then(|x| x.to_str()) != Some("csv") {
            continue;
        }
        let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
        let Ok(month) = stem.parse::<YearMonth>() else { continue };
        archive.insert(read_amenity_snapshot(month, fs::File::open(&path)?)?);
    }
    Ok(archive)
}

pub fn save_amenity_archive(archive: &AmenityArchive, dir: &Path) -> Result<(), SpatialError> {
    fs::create_dir_all(dir)?;
    for snap in archive.snapshots.values() {
        write_amenity_snapshot(snap, fs::File::create(dir.join(format!("{}.csv", snap.month)))?)?;
    }
    Ok(())
}
