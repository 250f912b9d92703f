//! Review service: projects and clustering rounds on disk, cluster-level
//! tagging with an append-only event log, categorization reports and the
//! HTTP API the review UI talks to.

pub mod api;
pub mod pipeline;
pub mod report;
pub mod store;
pub mod tags;
pub mod thumbnails;

pub use api::{router, serve};
pub use pipeline::{ExclusionParams, RoundParams, Stage, StageFailure};
pub use report::{CategorizationReport, ReportTotals};
pub use store::{RoundInfo, RoundStatus, Store, StoreError};
pub use tags::{Label, TagEvent, TagState};
