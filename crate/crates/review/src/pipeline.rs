//! One clustering round: scan, dedup, optional frequency triage, embed,
//! fit and summarize.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use imagetar_core::ann::AnnParams;
use imagetar_core::embedding::{
    embed_all, representative_items, to_vector_set, Backend, BatchEmbedder, EmbedderConfig,
    ExternalEmbedder, FailedImage, ReferenceEmbedder,
};
use imagetar_core::ingest::{
    deduplicate, exclude_high_frequency, scan_corpus, DedupGroup, ExclusionRule, HashAlgorithm,
    ImageRecord, ScanOptions,
};
use imagetar_core::kmeans::{
    default_k, kmeans_fit, summarize_clusters, ClusterModel, ClusterSummary, KMeansParams,
    DEFAULT_SAMPLE_SIZE,
};
use imagetar_core::vectors::VectorSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::{info, warn};

use crate::thumbnails::ThumbnailCache;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Scan,
    Exclude,
    Embed,
    Fit,
    Summarize,
    Persist,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().unwrap_or("unknown"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: Stage,
    pub message: String,
}

impl StageFailure {
    pub fn new(stage: Stage, e: impl fmt::Display) -> Self {
        Self {
            stage,
            message: e.to_string(),
        }
    }
}

impl fmt::Display for StageFailure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} stage failed: {}", self.stage, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExclusionParams {
    /// Exclude groups with at least this many copies.
    pub min_frequency: Option<usize>,
    /// Exclude groups with these content hashes.
    pub hashes: Vec<String>,
}

impl ExclusionParams {
    pub fn is_empty(&self) -> bool {
        self.min_frequency.is_none() && self.hashes.is_empty()
    }

    pub fn rules(&self) -> Vec<ExclusionRule> {
        let mut rules = Vec::new();
        if let Some(t) = self.min_frequency {
            rules.push(ExclusionRule::MinFrequency(t));
        }
        if !self.hashes.is_empty() {
            rules.push(ExclusionRule::Hashes(
                self.hashes.iter().cloned().collect::<BTreeSet<_>>(),
            ));
        }
        rules
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoundParams {
    /// `None` means `min(150, representatives)`.
    pub k: Option<usize>,
    pub seed: u64,
    pub embedder: EmbedderConfig,
    pub exclusion: ExclusionParams,
    pub ann: AnnParams,
    pub hash: HashAlgorithm,
    pub sample_size: usize,
}

impl Default for RoundParams {
    fn default() -> Self {
        Self {
            k: None,
            seed: 0,
            embedder: EmbedderConfig::default(),
            exclusion: ExclusionParams::default(),
            ann: AnnParams::default(),
            hash: HashAlgorithm::Sha256,
            sample_size: DEFAULT_SAMPLE_SIZE,
        }
    }
}

impl RoundParams {
    pub fn validate(&self) -> Result<(), String> {
        if self.k == Some(0) {
            return Err("k must be at least 1".into());
        }
        self.embedder.validate().map_err(|e| e.to_string())?;
        if self.ann.tree_count == 0 || self.ann.leaf_size == 0 || self.ann.checks == 0 {
            return Err("tree_count, leaf_size and checks must be at least 1".into());
        }
        if matches!(self.exclusion.min_frequency, Some(t) if t < 2) {
            return Err("min_frequency must be at least 2".into());
        }
        Ok(())
    }
}

/// Corpus state after scan, dedup and triage.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub records: Vec<ImageRecord>,
    pub groups: Vec<DedupGroup>,
}

impl Ingested {
    /// Groups that will be embedded and clustered.
    pub fn representative_count(&self) -> usize {
        let clusterable: std::collections::HashSet<&str> = self
            .records
            .iter()
            .filter(|r| r.is_clusterable())
            .map(|r| r.image_id.as_str())
            .collect();
        self.groups
            .iter()
            .filter(|g| clusterable.contains(g.representative_image_id.as_str()))
            .count()
    }

    pub fn effective_k(&self, params: &RoundParams) -> usize {
        params.k.unwrap_or_else(|| default_k(self.representative_count()))
    }
}

pub fn ingest(root: &Path, params: &RoundParams) -> Result<Ingested, StageFailure> {
    let options = ScanOptions {
        hash: params.hash,
        ..ScanOptions::default()
    };
    let mut records = scan_corpus(root, &options).map_err(|e| StageFailure::new(Stage::Scan, e))?;
    let groups = deduplicate(&records);
    for rule in params.exclusion.rules() {
        records = exclude_high_frequency(&groups, &records, &rule)
            .map_err(|e| StageFailure::new(Stage::Exclude, e))?;
    }
    info!(files = records.len(), groups = groups.len(), "corpus ingested");
    Ok(Ingested { records, groups })
}

/// Everything a finished round persists.
#[derive(Debug, Clone)]
pub struct RoundArtifacts {
    pub records: Vec<ImageRecord>,
    pub groups: Vec<DedupGroup>,
    /// Ordinals index `records`.
    pub vectors: VectorSet,
    pub failures: Vec<FailedImage>,
    pub model: ClusterModel,
    pub summaries: Vec<ClusterSummary>,
}

fn embedder_for(
    config: &EmbedderConfig,
    root: &Path,
    records: &[ImageRecord],
) -> Result<Box<dyn BatchEmbedder>, StageFailure> {
    Ok(match &config.backend {
        Backend::Reference => Box::new(
            ReferenceEmbedder::new(config.dim, config.normalize)
                .map_err(|e| StageFailure::new(Stage::Embed, e))?,
        ),
        Backend::External { command } => Box::new(ExternalEmbedder {
            command: command.clone(),
            dim: config.dim,
            workdir: root.to_path_buf(),
            records: Arc::new(records.to_vec()),
        }),
    })
}

/// Render a thumbnail for every group representative; unreadable images
/// are skipped.
pub fn render_thumbnails(root: &Path, ingested: &Ingested, cache: &ThumbnailCache) {
    let path_of: std::collections::HashMap<&str, &str> = ingested
        .records
        .iter()
        .map(|r| (r.image_id.as_str(), r.path.as_str()))
        .collect();
    ingested.groups.par_iter().for_each(|g| {
        let Some(rel) = path_of.get(g.representative_image_id.as_str()) else {
            return;
        };
        if let Err(e) = cache.ensure(&g.content_hash, &root.join(rel)) {
            warn!(hash = %g.content_hash, error = %e, "thumbnail not rendered");
        }
    });
}

/// Embed the representatives, fit `k` clusters and summarize them.
pub fn compute(
    root: &Path,
    ingested: Ingested,
    params: &RoundParams,
    k: usize,
) -> Result<RoundArtifacts, StageFailure> {
    let Ingested { records, groups } = ingested;
    let items = representative_items(&records, &groups, root);
    let embedder = embedder_for(&params.embedder, root, &records)?;
    let result = embed_all(&items, embedder.as_ref(), params.embedder.batch_size);
    info!(
        embedded = result.succeeded.len(),
        failed = result.failed.len(),
        calls = result.attempts,
        "embedding finished"
    );
    let vectors = to_vector_set(&items, &result, params.embedder.dim)
        .map_err(|e| StageFailure::new(Stage::Embed, e))?;
    let model = kmeans_fit(&vectors, &KMeansParams::new(k, params.seed))
        .map_err(|e| StageFailure::new(Stage::Fit, e))?;
    info!(k, inertia = model.inertia, iterations = model.iterations_run, "model fitted");
    let summaries = summarize_clusters(&model, &vectors, &records, &groups, params.sample_size);
    Ok(RoundArtifacts {
        records,
        groups,
        vectors,
        failures: result.failed,
        model,
        summaries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_validation() {
        assert!(RoundParams::default().validate().is_ok());
        let bad = [
            RoundParams {
                k: Some(0),
                ..Default::default()
            },
            RoundParams {
                exclusion: ExclusionParams {
                    min_frequency: Some(1),
                    hashes: vec![],
                },
                ..Default::default()
            },
            RoundParams {
                embedder: EmbedderConfig {
                    dim: 12,
                    ..Default::default()
                },
                ..Default::default()
            },
        ];
        for p in bad {
            assert!(p.validate().is_err(), "{p:?}");
        }
    }

    #[test]
    fn params_deserialize_with_defaults() {
        let p: RoundParams = serde_json::from_str(r#"{"k": 5, "embedder": {"dim": 64}}"#).unwrap();
        assert_eq!(p.k, Some(5));
        assert_eq!(p.embedder.dim, 64);
        assert_eq!(p.embedder.backend, Backend::Reference);
        assert_eq!(p.sample_size, DEFAULT_SAMPLE_SIZE);
        let p: RoundParams = serde_json::from_str(
            r#"{"embedder": {"backend": {"kind": "external", "command": "/bin/embed"}}}"#,
        )
        .unwrap();
        assert_eq!(
            p.embedder.backend,
            Backend::External {
                command: "/bin/embed".into()
            }
        );
    }

    #[test]
    fn stage_names() {
        assert_eq!(Stage::Embed.to_string(), "embed");
        let f = StageFailure::new(Stage::Fit, "too few points");
        assert_eq!(f.to_string(), "fit stage failed: too few points");
    }
}
