//! File-driven panel construction: one JSON config names the incident
//! exports, their schema maps, the centroids and the static features.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::geo::load_centroids;
use crate::data::incidents::{ingest_incidents, IngestReport, SchemaMap};
use crate::data::panel::{build_panel, load_static_features, NeighborhoodIndex, PanelConfig, PanelDataset, PanelReport};
use crate::error::{Error, Result};

/// A schema map given inline or as a path to a JSON file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SchemaSource {
    Inline(SchemaMap),
    File(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncidentSource {
    pub path: PathBuf,
    pub schema: SchemaSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestConfig {
    pub crimes: IncidentSource,
    pub overdoses: IncidentSource,
    pub centroids: PathBuf,
    pub statics: PathBuf,
    /// Neighborhood ids or names to keep; all centroids when absent.
    #[serde(default)]
    pub neighborhoods: Option<Vec<String>>,
    pub panel: PanelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub crimes: IngestReport,
    pub overdoses: IngestReport,
    pub panel: PanelReport,
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl IngestConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: Self = serde_json::from_str(&text)?;
        config.rebase(path.parent().unwrap_or(Path::new(".")));
        Ok(config)
    }

    /// Makes relative paths relative to `base` (the config file's directory).
    pub fn rebase(&mut self, base: &Path) {
        for src in [&mut self.crimes, &mut self.overdoses] {
            src.path = resolve(base, &src.path);
            if let SchemaSource::File(p) = &mut src.schema {
                *p = resolve(base, p);
            }
        }
        self.centroids = resolve(base, &self.centroids);
        self.statics = resolve(base, &self.statics);
    }
}

fn schema(src: &SchemaSource) -> Result<SchemaMap> {
    match src {
        SchemaSource::Inline(s) => Ok(s.clone()),
        SchemaSource::File(p) => SchemaMap::load(p),
    }
}

/// Reads every input named by `config` and builds the weekly panel.
pub fn run_ingest(config: &IngestConfig) -> Result<(PanelDataset, IngestSummary)> {
    let (crimes, crime_report) = ingest_incidents(&config.crimes.path, &schema(&config.crimes.schema)?)?;
    let (overdoses, od_report) = ingest_incidents(&config.overdoses.path, &schema(&config.overdoses.schema)?)?;
    let index = NeighborhoodIndex::new(load_centroids(&config.centroids)?, config.neighborhoods.as_deref())?;
    let statics = load_static_features(&config.statics, &index)?;
    let (panel, panel_report) = build_panel(&crimes, &overdoses, &index, statics, &config.panel)?;
    Ok((
        panel,
        IngestSummary {
            crimes: crime_report,
            overdoses: od_report,
            panel: panel_report,
        },
    ))
}
