//! Feature extraction for dedup-group representatives.
//!
//! Embedders process whole batches and a single bad image can fail the
//! batch. [`embed_batch_recursive`] recovers by halving failed batches until
//! the offending images are isolated.

mod external;
mod fvec;
mod reference;

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::ingest::{DedupGroup, ImageRecord};
use crate::vectors::VectorSet;

pub use external::{run_external_embedder, ExternalEmbedder};
pub use fvec::{read_vectors, read_vectors_file, write_vectors, write_vectors_file, FVEC_MAGIC};
pub use reference::{
    embed_reference, reference_features, ReferenceEmbedder, FEATURES_PER_BLOCK, GRID_BLOCKS,
};

pub const DEFAULT_DIM: usize = 4096;
pub const DEFAULT_BATCH_SIZE: usize = 64;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("image {image_id}: {message}")]
    Image { image_id: String, message: String },
    #[error("dimension {0} must be at least 2 and divisible by 8")]
    BadDim(usize),
    #[error("batch size must be at least 1")]
    BadBatchSize,
    #[error("embedder returned {got} vectors for a batch of {expected}")]
    WrongCount { expected: usize, got: usize },
    #[error("image {image_id}: embedder returned dimension {got}, expected {expected}")]
    WrongDim {
        image_id: String,
        expected: usize,
        got: usize,
    },
    #[error("image {image_id}: non-finite value at index {index}")]
    NonFinite { image_id: String, index: usize },
    #[error("vectors file at byte offset {offset}: {message}")]
    Format { offset: u64, message: String },
    #[error("vectors file row {ordinal} at byte offset {offset}: non-finite value")]
    NonFiniteRow { ordinal: u64, offset: u64 },
    #[error("external embedder exited with {status}: {stderr}")]
    ExternalFailed { status: String, stderr: String },
    #[error("representatives without vectors in groups: {0:?}")]
    MissingVectors(Vec<String>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Normalize {
    #[default]
    None,
    L2,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Backend {
    Reference,
    /// Program invoked as `command manifest_path output_path dim`.
    External { command: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedderConfig {
    pub backend: Backend,
    pub dim: usize,
    pub batch_size: usize,
    pub normalize: Normalize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Reference,
            dim: DEFAULT_DIM,
            batch_size: DEFAULT_BATCH_SIZE,
            normalize: Normalize::None,
        }
    }
}

impl EmbedderConfig {
    pub fn validate(&self) -> Result<(), EmbedError> {
        if self.dim < 2 || (self.backend == Backend::Reference && !self.dim.is_multiple_of(8)) {
            return Err(EmbedError::BadDim(self.dim));
        }
        if self.batch_size == 0 {
            return Err(EmbedError::BadBatchSize);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub image_id: String,
    pub values: Vec<f32>,
}

impl FeatureVector {
    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// One image handed to an embedder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedItem {
    /// Position in the corpus manifest.
    pub ordinal: u64,
    pub image_id: String,
    /// Absolute, or relative to the embedder's working directory.
    pub path: PathBuf,
}

/// Anything that turns a batch of images into vectors, all or nothing.
pub trait BatchEmbedder: Sync {
    fn dim(&self) -> usize;

    /// One vector per item, in item order.
    fn embed_batch(&self, items: &[EmbedItem]) -> Result<Vec<Vec<f32>>, EmbedError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailedImage {
    pub image_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BatchResult {
    pub succeeded: Vec<FeatureVector>,
    pub failed: Vec<FailedImage>,
    /// Calls made to the embedder, including the first.
    pub attempts: usize,
}

impl BatchResult {
    fn merge(&mut self, other: BatchResult) {
        self.succeeded.extend(other.succeeded);
        self.failed.extend(other.failed);
        self.attempts += other.attempts;
    }
}

fn checked_batch(
    embedder: &dyn BatchEmbedder,
    items: &[EmbedItem],
) -> Result<Vec<Vec<f32>>, EmbedError> {
    let out = embedder.embed_batch(items)?;
    if out.len() != items.len() {
        return Err(EmbedError::WrongCount {
            expected: items.len(),
            got: out.len(),
        });
    }
    for (item, v) in items.iter().zip(&out) {
        if v.len() != embedder.dim() {
            return Err(EmbedError::WrongDim {
                image_id: item.image_id.clone(),
                expected: embedder.dim(),
                got: v.len(),
            });
        }
        if let Some(index) = v.iter().position(|x| !x.is_finite()) {
            return Err(EmbedError::NonFinite {
                image_id: item.image_id.clone(),
                index,
            });
        }
    }
    Ok(out)
}

/// Embed `batch`; on failure split into halves and retry each. A singleton
/// that fails is recorded and not retried.
pub fn embed_batch_recursive(batch: &[EmbedItem], embedder: &dyn BatchEmbedder) -> BatchResult {
    let mut result = BatchResult::default();
    if batch.is_empty() {
        return result;
    }
    result.attempts = 1;
    match checked_batch(embedder, batch) {
        Ok(vectors) => {
            result.succeeded = batch
                .iter()
                .zip(vectors)
                .map(|(item, values)| FeatureVector {
                    image_id: item.image_id.clone(),
                    values,
                })
                .collect();
        }
        Err(e) if batch.len() == 1 => {
            warn!(image_id = %batch[0].image_id, error = %e, "image failed embedding");
            result.failed.push(FailedImage {
                image_id: batch[0].image_id.clone(),
                reason: e.to_string(),
            });
        }
        Err(e) => {
            debug!(size = batch.len(), error = %e, "batch failed, splitting");
            let (left, right) = batch.split_at(batch.len() / 2);
            result.merge(embed_batch_recursive(left, embedder));
            result.merge(embed_batch_recursive(right, embedder));
        }
    }
    result
}

/// Cut `items` into batches of `batch_size`, embed them on the worker pool
/// and merge the results in input order.
pub fn embed_all(
    items: &[EmbedItem],
    embedder: &dyn BatchEmbedder,
    batch_size: usize,
) -> BatchResult {
    let parts: Vec<BatchResult> = items
        .par_chunks(batch_size.max(1))
        .map(|chunk| embed_batch_recursive(chunk, embedder))
        .collect();
    let mut result = BatchResult::default();
    for p in parts {
        result.merge(p);
    }
    result
}

/// Items to embed: the representative of every group whose members are not
/// excluded, in manifest order.
pub fn representative_items(
    records: &[ImageRecord],
    groups: &[DedupGroup],
    root: &std::path::Path,
) -> Vec<EmbedItem> {
    let reps: std::collections::HashSet<&str> = groups
        .iter()
        .map(|g| g.representative_image_id.as_str())
        .collect();
    records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_clusterable() && reps.contains(r.image_id.as_str()))
        .map(|(i, r)| EmbedItem {
            ordinal: i as u64,
            image_id: r.image_id.clone(),
            path: root.join(&r.path),
        })
        .collect()
}

/// Pack a batch result into a vector set keyed by manifest ordinal.
pub fn to_vector_set(
    items: &[EmbedItem],
    result: &BatchResult,
    dim: usize,
) -> Result<VectorSet, EmbedError> {
    let ordinal_of: HashMap<&str, u64> = items
        .iter()
        .map(|i| (i.image_id.as_str(), i.ordinal))
        .collect();
    let mut rows: Vec<(u64, &[f32])> = result
        .succeeded
        .iter()
        .map(|fv| (ordinal_of[fv.image_id.as_str()], fv.values.as_slice()))
        .collect();
    rows.sort_by_key(|(o, _)| *o);
    let mut data = Vec::with_capacity(rows.len() * dim);
    for (_, v) in &rows {
        data.extend_from_slice(v);
    }
    VectorSet::new(dim, rows.iter().map(|(o, _)| *o).collect(), data).map_err(|e| {
        EmbedError::Format {
            offset: 0,
            message: e.to_string(),
        }
    })
}

/// Every clustered image id mapped to the row of its representative's vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VectorMapping {
    pub by_image: BTreeMap<String, usize>,
}

impl VectorMapping {
    pub fn len(&self) -> usize {
        self.by_image.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_image.is_empty()
    }

    pub fn row_of(&self, image_id: &str) -> Option<usize> {
        self.by_image.get(image_id).copied()
    }
}

/// Map each member of a non-excluded group onto its representative's row in
/// `vectors`. `rep_rows` gives the row of every embedded representative.
/// Groups whose representative failed embedding are listed in
/// `allowed_missing` and skipped; any other missing representative is an
/// error.
pub fn propagate_vectors(
    groups: &[DedupGroup],
    records: &[ImageRecord],
    rep_rows: &HashMap<String, usize>,
    allowed_missing: &std::collections::HashSet<String>,
) -> Result<VectorMapping, EmbedError> {
    let excluded: std::collections::HashSet<&str> = records
        .iter()
        .filter(|r| !r.is_clusterable())
        .map(|r| r.image_id.as_str())
        .collect();
    let mut by_image = BTreeMap::new();
    let mut missing = Vec::new();
    for g in groups {
        if excluded.contains(g.representative_image_id.as_str()) {
            continue;
        }
        match rep_rows.get(&g.representative_image_id) {
            Some(&row) => {
                for m in &g.member_ids {
                    by_image.insert(m.clone(), row);
                }
            }
            None if allowed_missing.contains(&g.representative_image_id) => {}
            None => missing.push(g.group_id.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(EmbedError::MissingVectors(missing));
    }
    Ok(VectorMapping { by_image })
}

pub(crate) fn l2_normalize(v: &mut [f32]) {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    if norm > 0.0 {
        for x in v.iter_mut() {
            *x = (*x as f64 / norm) as f32;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{image_id_for_path, Exclusion};
    use std::collections::HashSet;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Fails any batch containing a poisoned id; counts calls.
    struct FaultInjecting {
        poison: HashSet<String>,
        calls: AtomicUsize,
    }

    impl BatchEmbedder for FaultInjecting {
        fn dim(&self) -> usize {
            4
        }

        fn embed_batch(&self, items: &[EmbedItem]) -> Result<Vec<Vec<f32>>, EmbedError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            if let Some(bad) = items.iter().find(|i| self.poison.contains(&i.image_id)) {
                return Err(EmbedError::Image {
                    image_id: bad.image_id.clone(),
                    message: "poison".into(),
                });
            }
            Ok(items.iter().map(|i| vec![i.ordinal as f32; 4]).collect())
        }
    }

    fn items(n: usize) -> Vec<EmbedItem> {
        (0..n)
            .map(|i| EmbedItem {
                ordinal: i as u64,
                image_id: format!("i{i}"),
                path: PathBuf::from(format!("{i}.png")),
            })
            .collect()
    }

    fn faulty(poison: &[&str]) -> FaultInjecting {
        FaultInjecting {
            poison: poison.iter().map(|s| s.to_string()).collect(),
            calls: AtomicUsize::new(0),
        }
    }

    #[test]
    fn all_valid_batch() {
        let e = faulty(&[]);
        let r = embed_batch_recursive(&items(8), &e);
        assert_eq!((r.succeeded.len(), r.failed.len(), r.attempts), (8, 0, 1));
    }

    #[test]
    fn one_poison_in_eight() {
        let e = faulty(&["i5"]);
        let r = embed_batch_recursive(&items(8), &e);
        assert_eq!(r.succeeded.len(), 7);
        assert_eq!(r.failed.len(), 1);
        assert_eq!(r.failed[0].image_id, "i5");
        // 1 + 2 per halving level
        assert_eq!(r.attempts, 1 + 2 * 3);
        assert_eq!(e.calls.load(Ordering::SeqCst), r.attempts);
    }

    #[test]
    fn lone_poison() {
        let e = faulty(&["i0"]);
        let r = embed_batch_recursive(&items(1), &e);
        assert_eq!((r.succeeded.len(), r.failed.len(), r.attempts), (0, 1, 1));
    }

    #[test]
    fn several_poisons_are_isolated() {
        let e = faulty(&["i0", "i6", "i11"]);
        let r = embed_batch_recursive(&items(13), &e);
        assert_eq!(r.succeeded.len(), 10);
        let mut failed: Vec<_> = r.failed.iter().map(|f| f.image_id.as_str()).collect();
        failed.sort();
        assert_eq!(failed, vec!["i0", "i11", "i6"]);
    }

    struct Nan;
    impl BatchEmbedder for Nan {
        fn dim(&self) -> usize {
            2
        }
        fn embed_batch(&self, items: &[EmbedItem]) -> Result<Vec<Vec<f32>>, EmbedError> {
            Ok(items
                .iter()
                .map(|i| if i.ordinal == 2 { vec![0.0, f32::NAN] } else { vec![1.0, 1.0] })
                .collect())
        }
    }

    #[test]
    fn non_finite_output_is_a_failure() {
        let r = embed_batch_recursive(&items(4), &Nan);
        assert_eq!(r.succeeded.len(), 3);
        assert_eq!(r.failed[0].image_id, "i2");
        assert!(r.failed[0].reason.contains("non-finite"));
    }

    #[test]
    fn embed_all_keeps_order_and_coverage() {
        let e = faulty(&["i17"]);
        let its = items(100);
        let r = embed_all(&its, &e, 8);
        assert_eq!(r.succeeded.len() + r.failed.len(), 100);
        let vs = to_vector_set(&its, &r, 4).unwrap();
        assert_eq!(vs.len(), 99);
        assert!(vs.ordinals().windows(2).all(|w| w[0] < w[1]));
    }

    fn rec(path: &str, hash: &str, excluded: Exclusion) -> ImageRecord {
        ImageRecord {
            image_id: image_id_for_path(path),
            path: path.into(),
            byte_size: 1,
            content_hash: hash.into(),
            format: "png".into(),
            width: 1,
            height: 1,
            dedup_group_id: Some(hash.into()),
            excluded,
        }
    }

    #[test]
    fn propagation_shares_representative_rows() {
        let records = vec![
            rec("a", "h1", Exclusion::None),
            rec("b", "h1", Exclusion::None),
            rec("c", "h1", Exclusion::None),
            rec("d", "h2", Exclusion::None),
            rec("e", "h3", Exclusion::HighFrequency),
        ];
        let groups = crate::ingest::deduplicate(&records);
        let items = representative_items(&records, &groups, std::path::Path::new("/x"));
        assert_eq!(items.len(), 2);
        let rows: HashMap<String, usize> = items
            .iter()
            .enumerate()
            .map(|(i, it)| (it.image_id.clone(), i))
            .collect();
        let m = propagate_vectors(&groups, &records, &rows, &HashSet::new()).unwrap();
        assert_eq!(m.len(), 4);
        assert_eq!(m.row_of(&image_id_for_path("b")), m.row_of(&image_id_for_path("a")));
        assert_eq!(m.row_of(&image_id_for_path("e")), None);

        let err = propagate_vectors(&groups, &records, &HashMap::new(), &HashSet::new())
            .unwrap_err();
        match err {
            EmbedError::MissingVectors(ids) => assert_eq!(ids.len(), 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(EmbedderConfig::default().validate().is_ok());
        let bad = EmbedderConfig {
            dim: 12,
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(EmbedError::BadDim(12))));
        let bad = EmbedderConfig {
            batch_size: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn l2_normalization() {
        let mut v = vec![3.0, 4.0];
        l2_normalize(&mut v);
        assert!((v[0] - 0.6).abs() < 1e-7 && (v[1] - 0.8).abs() < 1e-7);
        let mut z = vec![0.0; 3];
        l2_normalize(&mut z);
        assert_eq!(z, vec![0.0; 3]);
    }
}
