//! Ingestion, panel construction and sample generation.

pub mod geo;
pub mod incidents;
pub mod panel;
pub mod pipeline;
pub mod samples;

pub use geo::{assign_neighborhood, haversine_km, proximity_matrix, Centroid, DistanceUnit, LatLon};
pub use incidents::{ingest_incidents, IncidentRecord, IngestReport, Location, SchemaMap};
pub use panel::{build_panel, PanelConfig, PanelDataset, PanelReport};
pub use samples::{make_samples, PreparedPanel, Sample, SampleRef, SampleSplits, SplitSpec, Standardization, WindowBatch};
pub use pipeline::{run_ingest, IngestConfig, IngestSummary};
