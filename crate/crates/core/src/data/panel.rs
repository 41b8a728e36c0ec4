//! Weekly per-neighborhood feature panels and their on-disk archive.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::geo::{assign_neighborhood, proximity_matrix, BoundingBox, Centroid, DistanceUnit};
use crate::data::incidents::{IncidentRecord, Location};
use crate::data::samples::Standardization;
use crate::error::{Error, Result};

pub const TOTAL_CRIMES: &str = "TOTAL_CRIMES";
pub const OVERDOSE: &str = "OVERDOSE";

/// Aligned panel: dynamic `[T×L×n]`, static `[L×n_s]`, targets `[T×L]`,
/// proximity `[L×L]`, all row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelDataset {
    pub num_weeks: usize,
    pub num_locations: usize,
    pub dynamic_names: Vec<String>,
    pub static_names: Vec<String>,
    pub location_names: Vec<String>,
    pub week_starts: Vec<NaiveDate>,
    /// Dynamic column that carries the target counts, if any.
    pub target_feature: Option<usize>,
    pub distance_unit: DistanceUnit,
    pub dynamic: Vec<f64>,
    pub statics: Vec<f64>,
    pub targets: Vec<f64>,
    pub proximity: Vec<f64>,
}

impl PanelDataset {
    pub fn num_features(&self) -> usize {
        self.dynamic_names.len()
    }

    pub fn num_static(&self) -> usize {
        self.static_names.len()
    }

    pub fn features(&self, week: usize, loc: usize) -> &[f64] {
        let n = self.num_features();
        let start = (week * self.num_locations + loc) * n;
        &self.dynamic[start..start + n]
    }

    pub fn target(&self, week: usize, loc: usize) -> f64 {
        self.targets[week * self.num_locations + loc]
    }

    pub fn static_row(&self, loc: usize) -> &[f64] {
        let ns = self.num_static();
        &self.statics[loc * ns..(loc + 1) * ns]
    }

    pub fn proximity_row(&self, loc: usize) -> &[f64] {
        let l = self.num_locations;
        &self.proximity[loc * l..(loc + 1) * l]
    }

    /// Checks every structural invariant of a raw (unstandardized) panel.
    pub fn validate(&self) -> Result<()> {
        let (t, l, n, ns) = (self.num_weeks, self.num_locations, self.num_features(), self.num_static());
        let check = |what: &str, got: usize, want: usize| {
            if got == want {
                Ok(())
            } else {
                Err(Error::contract(format!("panel {what} has {got} entries, expected {want}")))
            }
        };
        check("dynamic", self.dynamic.len(), t * l * n)?;
        check("statics", self.statics.len(), l * ns)?;
        check("targets", self.targets.len(), t * l)?;
        check("proximity", self.proximity.len(), l * l)?;
        check("location names", self.location_names.len(), l)?;
        check("week starts", self.week_starts.len(), t)?;
        let is_count = |v: &f64| *v >= 0.0 && v.fract() == 0.0;
        if !self.dynamic.iter().all(is_count) || !self.targets.iter().all(is_count) {
            return Err(Error::contract("panel counts must be non-negative integers"));
        }
        if !self.statics.iter().all(|v| v.is_finite()) {
            return Err(Error::contract("static features must be finite"));
        }
        if let Some(f) = self.target_feature {
            if f >= n {
                return Err(Error::contract(format!("target feature {f} out of range")));
            }
            for week in 0..t {
                for loc in 0..l {
                    if self.features(week, loc)[f] != self.target(week, loc) {
                        return Err(Error::contract(format!(
                            "target column differs from targets at week {week}, location {loc}"
                        )));
                    }
                }
            }
        }
        for i in 0..l {
            if self.proximity[i * l + i] != 1.0 {
                return Err(Error::contract(format!("proximity diagonal at {i} is not 1")));
            }
            for j in 0..l {
                let p = self.proximity[i * l + j];
                if !(p > 0.0 && p <= 1.0) || (p - self.proximity[j * l + i]).abs() > 1e-12 {
                    return Err(Error::contract(format!("proximity entry ({i},{j}) invalid")));
                }
            }
        }
        Ok(())
    }

    fn header(&self, standardization: Option<&Standardization>, fingerprint: &str) -> ArchiveHeader {
        ArchiveHeader {
            format_version: ARCHIVE_VERSION,
            num_weeks: self.num_weeks,
            num_locations: self.num_locations,
            dynamic_names: self.dynamic_names.clone(),
            static_names: self.static_names.clone(),
            location_names: self.location_names.clone(),
            week_starts: self.week_starts.clone(),
            target_feature: self.target_feature,
            distance_unit: self.distance_unit,
            standardization: standardization.cloned(),
            fingerprint: fingerprint.to_string(),
            metadata: BTreeMap::new(),
        }
    }

    fn arrays(&self) -> [&[f64]; 4] {
        [&self.dynamic, &self.statics, &self.targets, &self.proximity]
    }

    /// SHA-256 over the panel's structural header and raw array bytes.
    pub fn fingerprint(&self) -> String {
        let header = self.header(None, "");
        let mut hasher = Sha256::new();
        hasher.update(serde_json::to_vec(&header).expect("header serializes"));
        for arr in self.arrays() {
            for v in arr {
                hasher.update(v.to_le_bytes());
            }
        }
        hex(&hasher.finalize())
    }

    /// Writes magic, JSON header length and header, then little-endian
    /// `f64` arrays (dynamic, statics, targets, proximity).
    pub fn save(&self, path: &Path, extras: ArchiveExtras<'_>) -> Result<String> {
        let fingerprint = self.fingerprint();
        let mut header = self.header(extras.standardization, &fingerprint);
        header.metadata = extras.metadata;
        let header_bytes = serde_json::to_vec_pretty(&header)?;
        let mut buf = Vec::with_capacity(header_bytes.len() + 8 * self.dynamic.len() + 64);
        buf.extend_from_slice(ARCHIVE_MAGIC);
        buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        buf.extend_from_slice(&header_bytes);
        for arr in self.arrays() {
            for v in arr {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&buf).map_err(|e| Error::io(path, e))?;
        Ok(fingerprint)
    }

    pub fn load(path: &Path) -> Result<(Self, ArchiveHeader)> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        let bad = |reason: &str| Error::Archive {
            path: path.to_path_buf(),
            reason: reason.to_string(),
        };
        if bytes.len() < 16 || &bytes[..8] != ARCHIVE_MAGIC {
            return Err(bad("missing magic"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
        let header: ArchiveHeader = serde_json::from_slice(body)?;
        if header.format_version != ARCHIVE_VERSION {
            return Err(bad("unsupported format version"));
        }
        let (t, l) = (header.num_weeks, header.num_locations);
        let (n, ns) = (header.dynamic_names.len(), header.static_names.len());
        let lens = [t * l * n, l * ns, t * l, l * l];
        let mut data = &bytes[16 + hlen..];
        if data.len() != lens.iter().sum::<usize>() * 8 {
            return Err(bad("array section has wrong length"));
        }
        let mut take = |len: usize| {
            let (head, rest) = data.split_at(len * 8);
            data = rest;
            head.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect::<Vec<_>>()
        };
        let panel = PanelDataset {
            num_weeks: t,
            num_locations: l,
            dynamic_names: header.dynamic_names.clone(),
            static_names: header.static_names.clone(),
            location_names: header.location_names.clone(),
            week_starts: header.week_starts.clone(),
            target_feature: header.target_feature,
            distance_unit: header.distance_unit,
            dynamic: take(lens[0]),
            statics: take(lens[1]),
            targets: take(lens[2]),
            proximity: take(lens[3]),
        };
        let actual = panel.fingerprint();
        if actual != header.fingerprint {
            return Err(Error::Fingerprint {
                expected: header.fingerprint.clone(),
                found: actual,
            });
        }
        Ok((panel, header))
    }
}

pub const ARCHIVE_MAGIC: &[u8; 8] = b"CASTPNL\x01";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchiveHeader {
    pub format_version: u32,
    pub num_weeks: usize,
    pub num_locations: usize,
    pub dynamic_names: Vec<String>,
    pub static_names: Vec<String>,
    pub location_names: Vec<String>,
    pub week_starts: Vec<NaiveDate>,
    pub target_feature: Option<usize>,
    pub distance_unit: DistanceUnit,
    pub standardization: Option<Standardization>,
    pub fingerprint: String,
    /// Free-form build provenance (config fingerprint, ingest reports, ...).
    pub metadata: BTreeMap<String, serde_json::Value>,
}

#[derive(Default)]
pub struct ArchiveExtras<'a> {
    pub standardization: Option<&'a Standardization>,
    pub metadata: BTreeMap<String, serde_json::Value>,
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Categories whose share of all records is at least `min_share`, sorted by name.
pub fn category_whitelist(records: &[IncidentRecord], min_share: f64) -> Vec<String> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        *counts.entry(&r.category).or_default() += 1;
    }
    let total = records.len() as f64;
    counts
        .into_iter()
        .filter(|&(_, c)| total > 0.0 && c as f64 / total >= min_share)
        .map(|(k, _)| k.to_string())
        .collect()
}

/// Maps export labels (ids or names, case-insensitive) to location indices.
#[derive(Clone, Debug)]
pub struct NeighborhoodIndex {
    pub centroids: Vec<Centroid>,
    lookup: HashMap<String, usize>,
}

impl NeighborhoodIndex {
    /// Keeps only centroids whose id or name is in `whitelist`, when given.
    pub fn new(centroids: Vec<Centroid>, whitelist: Option<&[String]>) -> Result<Self> {
        let keep = |c: &Centroid| {
            whitelist.map_or(true, |w| {
                w.iter()
                    .any(|x| x.trim().eq_ignore_ascii_case(&c.id) || x.trim().eq_ignore_ascii_case(&c.name))
            })
        };
        let centroids: Vec<_> = centroids.into_iter().filter(keep).collect();
        if centroids.is_empty() {
            return Err(Error::Config("neighborhood selection is empty".into()));
        }
        let mut lookup = HashMap::new();
        for (i, c) in centroids.iter().enumerate() {
            for key in [&c.id, &c.name] {
                if let Some(prev) = lookup.insert(key.to_uppercase(), i) {
                    if prev != i {
                        return Err(Error::Schema(format!("ambiguous neighborhood label {key}")));
                    }
                }
            }
        }
        Ok(Self { centroids, lookup })
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn resolve(&self, label: &str) -> Option<usize> {
        let key = label.trim().to_uppercase();
        self.lookup.get(&key).copied().or_else(|| {
            // Numeric ids exported as floats ("25.0").
            key.parse::<f64>()
                .ok()
                .filter(|v| v.fract() == 0.0)
                .and_then(|v| self.lookup.get(&format!("{}", v as i64)).copied())
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PanelConfig {
    /// First Monday of the panel.
    pub week0: NaiveDate,
    /// Last covered day; the final week may be partial.
    pub end: NaiveDate,
    /// Minimum share for a crime category to get its own column.
    pub min_category_share: f64,
    /// Explicit category list overriding `min_category_share`.
    #[serde(default)]
    pub categories: Option<Vec<String>>,
    #[serde(default)]
    pub distance_unit: DistanceUnit,
    #[serde(default)]
    pub bounding_box: Option<BoundingBox>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PanelReport {
    pub crime_records_used: usize,
    pub overdose_records_used: usize,
    pub out_of_range: usize,
    pub unknown_neighborhood: usize,
    pub rejected_coordinates: usize,
    pub categories: Vec<String>,
}

pub fn num_weeks(week0: NaiveDate, end: NaiveDate) -> usize {
    ((end - week0).num_days().max(0) / 7 + 1) as usize
}

/// Aggregates incidents into weekly counts. Dynamic columns are one per
/// whitelisted category, then total crimes (all categories), then overdoses;
/// the overdose column doubles as the target.
pub fn build_panel(
    crimes: &[IncidentRecord],
    overdoses: &[IncidentRecord],
    index: &NeighborhoodIndex,
    statics: StaticFeatures,
    config: &PanelConfig,
) -> Result<(PanelDataset, PanelReport)> {
    if config.week0.weekday() != Weekday::Mon {
        return Err(Error::Config(format!("week0 {} is not a Monday", config.week0)));
    }
    if config.end < config.week0 {
        return Err(Error::Config("panel end precedes week0".into()));
    }
    if statics.values.len() != index.len() * statics.names.len() {
        return Err(Error::contract("static features do not cover every neighborhood"));
    }
    let categories = match &config.categories {
        Some(list) => list.iter().map(|c| c.trim().to_uppercase()).collect(),
        None => category_whitelist(crimes, config.min_category_share),
    };
    let cat_index: HashMap<&str, usize> = categories.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let t = num_weeks(config.week0, config.end);
    let l = index.len();
    let n = categories.len() + 2;
    let (total_col, od_col) = (categories.len(), categories.len() + 1);
    let mut dynamic = vec![0.0; t * l * n];
    let mut targets = vec![0.0; t * l];
    let mut report = PanelReport {
        categories: categories.clone(),
        ..Default::default()
    };

    let locate = |rec: &IncidentRecord, report: &mut PanelReport| -> Option<(usize, usize)> {
        if rec.date < config.week0 || rec.date > config.end {
            report.out_of_range += 1;
            return None;
        }
        let week = ((rec.date - config.week0).num_days() / 7) as usize;
        let loc = match &rec.location {
            Location::Label(label) => match index.resolve(label) {
                Some(i) => i,
                None => {
                    report.unknown_neighborhood += 1;
                    return None;
                }
            },
            Location::Coordinates(p) => {
                match assign_neighborhood(*p, &index.centroids, config.bounding_box.as_ref()) {
                    Ok(i) => i,
                    Err(_) => {
                        report.rejected_coordinates += 1;
                        return None;
                    }
                }
            }
        };
        Some((week, loc))
    };

    for rec in crimes {
        if let Some((week, loc)) = locate(rec, &mut report) {
            let row = (week * l + loc) * n;
            if let Some(&c) = cat_index.get(rec.category.as_str()) {
                dynamic[row + c] += 1.0;
            }
            dynamic[row + total_col] += 1.0;
            report.crime_records_used += 1;
        }
    }
    for rec in overdoses {
        if let Some((week, loc)) = locate(rec, &mut report) {
            dynamic[(week * l + loc) * n + od_col] += 1.0;
            targets[week * l + loc] += 1.0;
            report.overdose_records_used += 1;
        }
    }

    let mut dynamic_names = categories;
    dynamic_names.push(TOTAL_CRIMES.to_string());
    dynamic_names.push(OVERDOSE.to_string());
    let panel = PanelDataset {
        num_weeks: t,
        num_locations: l,
        dynamic_names,
        static_names: statics.names,
        location_names: index.centroids.iter().map(|c| c.name.clone()).collect(),
        week_starts: (0..t).map(|w| config.week0 + chrono::Duration::weeks(w as i64)).collect(),
        target_feature: Some(od_col),
        distance_unit: config.distance_unit,
        dynamic,
        statics: statics.values,
        targets,
        proximity: proximity_matrix(&index.centroids, config.distance_unit),
    };
    panel.validate()?;
    Ok((panel, report))
}

/// `[L×n_s]` static features aligned with a [`NeighborhoodIndex`].
#[derive(Clone, Debug, PartialEq)]
pub struct StaticFeatures {
    pub names: Vec<String>,
    pub values: Vec<f64>,
}

/// Reads a CSV whose first column is the neighborhood label and whose
/// remaining columns are numeric static features. Every indexed
/// neighborhood must appear exactly once; extra rows are ignored.
pub fn load_static_features(path: &Path, index: &NeighborhoodIndex) -> Result<StaticFeatures> {
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Schema("static CSV needs a label column and features".into()));
    }
    let names: Vec<String> = headers.iter().skip(1).map(|h| h.trim().to_string()).collect();
    let ns = names.len();
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; index.len()];
    for (line, rec) in reader.records().enumerate() {
        let rec = rec?;
        let Some(loc) = rec.get(0).and_then(|label| index.resolve(label)) else {
            continue;
        };
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
            .collect::<Option<Vec<_>>>()
            .filter(|v| v.len() == ns)
            .ok_or_else(|| Error::Schema(format!("static CSV row {} is not numeric", line + 2)))?;
        if rows[loc].replace(values).is_some() {
            return Err(Error::Schema(format!(
                "neighborhood {} appears twice in static CSV",
                index.centroids[loc].id
            )));
        }
    }
    let mut values = Vec::with_capacity(index.len() * ns);
    for (loc, row) in rows.into_iter().enumerate() {
        let row = row.ok_or_else(|| {
            Error::Schema(format!(
                "static CSV has no row for neighborhood {}",
                index.centroids[loc].id
            ))
        })?;
        values.extend(row);
    }
    Ok(StaticFeatures { names, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::geo::LatLon;

    fn index(l: usize) -> NeighborhoodIndex {
        let cs = (0..l)
            .map(|i| Centroid {
                id: (i + 1).to_string(),
                name: format!("Area {i}"),
                position: LatLon::new(41.8 + 0.02 * i as f64, -87.7 - 0.01 * i as f64),
            })
            .collect();
        NeighborhoodIndex::new(cs, None).unwrap()
    }

    fn statics(l: usize) -> StaticFeatures {
        StaticFeatures {
            names: vec!["income".into()],
            values: (0..l).map(|i| i as f64).collect(),
        }
    }

    fn rec(date: NaiveDate, label: &str, cat: &str) -> IncidentRecord {
        IncidentRecord {
            date,
            location: Location::Label(label.into()),
            category: cat.into(),
        }
    }

    fn config(week0: NaiveDate) -> PanelConfig {
        PanelConfig {
            week0,
            end: week0 + chrono::Duration::days(7 * 5 - 1),
            min_category_share: 0.0,
            categories: Some(vec!["A".into(), "B".into()]),
            distance_unit: DistanceUnit::Kilometers,
            bounding_box: None,
        }
    }

    #[test]
    fn single_incident_lands_in_one_cell() {
        let monday = NaiveDate::from_ymd_opt(2015, 8, 3).unwrap();
        let day = monday + chrono::Duration::days(3 * 7 + 2);
        let (panel, report) =
            build_panel(&[rec(day, "3", "A")], &[], &index(4), statics(4), &config(monday)).unwrap();
        assert_eq!(panel.num_features(), 4);
        let nonzero: Vec<_> = panel.dynamic.iter().enumerate().filter(|(_, v)| **v != 0.0).collect();
        assert_eq!(nonzero.len(), 2);
        assert_eq!(panel.features(3, 2), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(report.crime_records_used, 1);
    }

    #[test]
    fn overdoses_fill_target_and_column() {
        let monday = NaiveDate::from_ymd_opt(2015, 8, 3).unwrap();
        let ods = vec![rec(monday, "Area 1", "OVERDOSE"), rec(monday, "2", "OVERDOSE")];
        let (panel, _) = build_panel(&[], &ods, &index(3), statics(3), &config(monday)).unwrap();
        assert_eq!(panel.target(0, 1), 2.0);
        assert_eq!(panel.features(0, 1)[3], 2.0);
        panel.validate().unwrap();
    }

    #[test]
    fn rejects_non_monday() {
        let tuesday = NaiveDate::from_ymd_opt(2015, 8, 4).unwrap();
        assert!(build_panel(&[], &[], &index(2), statics(2), &config(tuesday)).is_err());
    }

    #[test]
    fn out_of_range_and_unknown_are_reported() {
        let monday = NaiveDate::from_ymd_opt(2015, 8, 3).unwrap();
        let crimes = vec![
            rec(monday - chrono::Duration::days(1), "1", "A"),
            rec(monday + chrono::Duration::days(400), "1", "A"),
            rec(monday, "99", "A"),
            rec(monday, "1", "RARE"),
        ];
        let (panel, report) = build_panel(&crimes, &[], &index(2), statics(2), &config(monday)).unwrap();
        assert_eq!(report.out_of_range, 2);
        assert_eq!(report.unknown_neighborhood, 1);
        assert_eq!(panel.features(0, 0), &[0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn whitelist_drops_rare_categories() {
        let d = NaiveDate::from_ymd_opt(2016, 1, 1).unwrap();
        let mut recs: Vec<_> = (0..99).map(|i| rec(d, "1", if i % 2 == 0 { "X" } else { "Y" })).collect();
        recs.push(rec(d, "1", "Z"));
        assert_eq!(category_whitelist(&recs, 0.01), vec!["X", "Y", "Z"]);
        assert_eq!(category_whitelist(&recs, 0.011), vec!["X", "Y"]);
    }

    #[test]
    fn float_labels_resolve() {
        let idx = index(3);
        assert_eq!(idx.resolve("2.0"), Some(1));
        assert_eq!(idx.resolve(" area 2 "), Some(2));
        assert_eq!(idx.resolve("7"), None);
    }
}
