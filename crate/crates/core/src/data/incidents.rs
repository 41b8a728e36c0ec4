//! Incident CSV ingestion.

use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::data::geo::LatLon;
use crate::error::{Error, Result};

/// Column roles for an incident export. Either `neighborhood` or both
/// coordinate columns must be named.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaMap {
    pub timestamp: String,
    /// chrono format string; when absent a list of common portal formats is tried.
    #[serde(default)]
    pub timestamp_format: Option<String>,
    /// Category column. Absent for single-category exports such as overdose logs.
    #[serde(default)]
    pub category: Option<String>,
    /// Label used when `category` is absent.
    #[serde(default)]
    pub fixed_category: Option<String>,
    #[serde(default)]
    pub neighborhood: Option<String>,
    #[serde(default)]
    pub latitude: Option<String>,
    #[serde(default)]
    pub longitude: Option<String>,
}

impl SchemaMap {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Location {
    /// Neighborhood label as it appears in the export (id or name).
    Label(String),
    Coordinates(LatLon),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidentRecord {
    pub date: NaiveDate,
    pub location: Location,
    pub category: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub parsed: usize,
    pub malformed: usize,
    /// First few malformed rows as (1-based data row, reason).
    pub malformed_examples: Vec<(usize, String)>,
}

const MAX_EXAMPLES: usize = 20;

const DEFAULT_FORMATS: &[&str] = &[
    "%m/%d/%Y %I:%M:%S %p",
    "%m/%d/%Y %H:%M:%S",
    "%m/%d/%Y %H:%M",
    "%Y-%m-%dT%H:%M:%S%.f",
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
];

const DATE_FORMATS: &[&str] = &["%m/%d/%Y", "%Y-%m-%d"];

pub fn parse_date(raw: &str, format: Option<&str>) -> Option<NaiveDate> {
    let raw = raw.trim();
    if let Some(fmt) = format {
        return NaiveDateTime::parse_from_str(raw, fmt)
            .map(|dt| dt.date())
            .or_else(|_| NaiveDate::parse_from_str(raw, fmt))
            .ok();
    }
    DEFAULT_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok().map(|dt| dt.date()))
        .or_else(|| DATE_FORMATS.iter().find_map(|f| NaiveDate::parse_from_str(raw, f).ok()))
}

pub fn normalize_category(raw: &str) -> String {
    raw.trim().to_uppercase()
}

struct Columns {
    timestamp: usize,
    category: Option<usize>,
    neighborhood: Option<usize>,
    coords: Option<(usize, usize)>,
}

fn resolve_columns(headers: &csv::StringRecord, schema: &SchemaMap) -> Result<Columns> {
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Schema(format!("missing column {name:?}")))
    };
    let timestamp = find(&schema.timestamp)?;
    let category = match (&schema.category, &schema.fixed_category) {
        (Some(c), _) => Some(find(c)?),
        (None, Some(_)) => None,
        (None, None) => {
            return Err(Error::Schema(
                "schema names neither a category column nor a fixed category".into(),
            ))
        }
    };
    let neighborhood = schema.neighborhood.as_deref().map(find).transpose()?;
    let coords = match (&schema.latitude, &schema.longitude) {
        (Some(lat), Some(lon)) => Some((find(lat)?, find(lon)?)),
        (None, None) => None,
        _ => return Err(Error::Schema("latitude and longitude must be named together".into())),
    };
    if neighborhood.is_none() && coords.is_none() {
        return Err(Error::Schema(
            "schema names neither a neighborhood column nor coordinates".into(),
        ));
    }
    Ok(Columns {
        timestamp,
        category,
        neighborhood,
        coords,
    })
}

fn parse_row(
    row: &csv::StringRecord,
    cols: &Columns,
    schema: &SchemaMap,
) -> std::result::Result<IncidentRecord, String> {
    let field = |i: usize| row.get(i).map(str::trim).unwrap_or("");
    let raw_ts = field(cols.timestamp);
    let date = parse_date(raw_ts, schema.timestamp_format.as_deref())
        .ok_or_else(|| format!("unparseable timestamp {raw_ts:?}"))?;
    let category = match cols.category {
        Some(i) => normalize_category(field(i)),
        None => normalize_category(schema.fixed_category.as_deref().unwrap_or_default()),
    };
    if category.is_empty() {
        return Err("empty category".into());
    }
    let label = cols.neighborhood.map(field).filter(|s| !s.is_empty());
    let location = match (label, cols.coords) {
        (Some(label), _) => Location::Label(label.to_string()),
        (None, Some((lat_i, lon_i))) => {
            let (lat, lon) = (field(lat_i), field(lon_i));
            match (lat.parse::<f64>(), lon.parse::<f64>()) {
                (Ok(lat), Ok(lon)) if LatLon::new(lat, lon).is_valid() => {
                    Location::Coordinates(LatLon::new(lat, lon))
                }
                _ => return Err(format!("bad coordinates ({lat:?}, {lon:?})")),
            }
        }
        (None, None) => return Err("no location".into()),
    };
    Ok(IncidentRecord {
        date,
        location,
        category,
    })
}

/// Parses every row; malformed rows are counted and sampled in the report.
pub fn ingest_incidents(path: &Path, schema: &SchemaMap) -> Result<(Vec<IncidentRecord>, IngestReport)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, schema)
}

pub fn ingest_reader<R: std::io::Read>(
    reader: R,
    schema: &SchemaMap,
) -> Result<(Vec<IncidentRecord>, IngestReport)> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let headers = reader.headers()?.clone();
    let cols = resolve_columns(&headers, schema)?;
    let mut records = Vec::new();
    let mut report = IngestReport::default();
    let mut row = csv::StringRecord::new();
    loop {
        match reader.read_record(&mut row) {
            Ok(false) => break,
            Ok(true) => {
                report.rows += 1;
                match parse_row(&row, &cols, schema) {
                    Ok(rec) => records.push(rec),
                    Err(reason) => {
                        report.malformed += 1;
                        if report.malformed_examples.len() < MAX_EXAMPLES {
                            report.malformed_examples.push((report.rows, reason));
                        }
                    }
                }
            }
            // Broken quoting or invalid UTF-8 in one row.
            Err(e) if !matches!(e.kind(), csv::ErrorKind::Io(_)) => {
                report.rows += 1;
                report.malformed += 1;
                if report.malformed_examples.len() < MAX_EXAMPLES {
                    report.malformed_examples.push((report.rows, e.to_string()));
                }
            }
            Err(e) => return Err(e.into()),
        }
    }
    report.parsed = records.len();
    Ok((records, report))
}
