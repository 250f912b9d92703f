//! Categorization report: per-cluster labels and image totals that always
//! add up to the number of scanned files.

use std::collections::{HashMap, HashSet};

use imagetar_core::ingest::{DedupGroup, Exclusion, ImageRecord};
use imagetar_core::kmeans::ClusterSummary;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tags::{Label, TagState};

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("report totals sum to {sum} but the corpus has {expected} images")]
    Conservation { sum: usize, expected: usize },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportRow {
    pub cluster_index: usize,
    pub size_images: usize,
    pub label: Label,
    pub note: String,
    /// Content hash of the medoid, usable as a thumbnail key.
    pub medoid_thumbnail: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportTotals {
    pub images_responsive: usize,
    pub images_not_responsive: usize,
    pub images_further_review: usize,
    pub images_untagged: usize,
    pub images_excluded_prefilter: usize,
    pub images_invalid: usize,
}

impl ReportTotals {
    pub fn sum(&self) -> usize {
        self.images_responsive
            + self.images_not_responsive
            + self.images_further_review
            + self.images_untagged
            + self.images_excluded_prefilter
            + self.images_invalid
    }

    pub fn for_label(&self, label: Label) -> usize {
        match label {
            Label::Responsive => self.images_responsive,
            Label::NotResponsive => self.images_not_responsive,
            Label::FurtherReview => self.images_further_review,
            Label::Untagged => self.images_untagged,
        }
    }

    fn add(&mut self, label: Label, n: usize) {
        match label {
            Label::Responsive => self.images_responsive += n,
            Label::NotResponsive => self.images_not_responsive += n,
            Label::FurtherReview => self.images_further_review += n,
            Label::Untagged => self.images_untagged += n,
        }
    }

    pub fn named(&self) -> [(&'static str, usize); 6] {
        [
            ("images_responsive", self.images_responsive),
            ("images_not_responsive", self.images_not_responsive),
            ("images_further_review", self.images_further_review),
            ("images_untagged", self.images_untagged),
            ("images_excluded_prefilter", self.images_excluded_prefilter),
            ("images_invalid", self.images_invalid),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategorizationReport {
    pub round: u32,
    pub corpus_images: usize,
    pub rows: Vec<ReportRow>,
    pub totals: ReportTotals,
}

/// Everything the report is computed from.
pub struct ReportInputs<'a> {
    pub round: u32,
    pub records: &'a [ImageRecord],
    pub groups: &'a [DedupGroup],
    pub summaries: &'a [ClusterSummary],
    /// Representatives whose embedding failed; their whole group counts as
    /// invalid.
    pub failed_representatives: &'a HashSet<String>,
    pub tags: &'a TagState,
}

pub fn build_report(inputs: &ReportInputs<'_>) -> Result<CategorizationReport, ReportError> {
    let hash_of: HashMap<&str, &str> = inputs
        .records
        .iter()
        .map(|r| (r.image_id.as_str(), r.content_hash.as_str()))
        .collect();
    let mut totals = ReportTotals::default();
    for r in inputs.records {
        match r.excluded {
            Exclusion::Invalid => totals.images_invalid += 1,
            Exclusion::HighFrequency => totals.images_excluded_prefilter += 1,
            Exclusion::None => {}
        }
    }
    for g in inputs.groups {
        if inputs.failed_representatives.contains(&g.representative_image_id) {
            totals.images_invalid += g.frequency;
        }
    }

    let rows: Vec<ReportRow> = inputs
        .summaries
        .iter()
        .map(|s| {
            let tag = inputs.tags.get(inputs.round, s.cluster_index);
            let label = tag.map(|t| t.label).unwrap_or(Label::Untagged);
            totals.add(label, s.size_total_images);
            ReportRow {
                cluster_index: s.cluster_index,
                size_images: s.size_total_images,
                label,
                note: tag.map(|t| t.note.clone()).unwrap_or_default(),
                medoid_thumbnail: s
                    .medoid_image_id
                    .as_deref()
                    .and_then(|id| hash_of.get(id))
                    .map(|h| h.to_string()),
            }
        })
        .collect();

    let sum = totals.sum();
    if sum != inputs.records.len() {
        return Err(ReportError::Conservation {
            sum,
            expected: inputs.records.len(),
        });
    }
    Ok(CategorizationReport {
        round: inputs.round,
        corpus_images: inputs.records.len(),
        rows,
        totals,
    })
}

impl CategorizationReport {
    /// `cluster_index,size_images,label,note` rows, then a `#TOTALS` line
    /// followed by `name,count` lines for the six totals and the corpus size.
    pub fn to_csv(&self) -> Result<String, ReportError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["cluster_index", "size_images", "label", "note"])?;
        for r in &self.rows {
            w.write_record([
                r.cluster_index.to_string(),
                r.size_images.to_string(),
                r.label.to_string(),
                r.note.clone(),
            ])?;
        }
        let mut out = String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?)
            .expect("csv output is UTF-8");
        out.push_str("#TOTALS\n");
        for (name, n) in self.totals.named() {
            out.push_str(&format!("{name},{n}\n"));
        }
        out.push_str(&format!("corpus_images,{}\n", self.corpus_images));
        Ok(out)
    }
}
