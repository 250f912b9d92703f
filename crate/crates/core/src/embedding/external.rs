//! Out-of-process embedders.
//!
//! The child is run as `command manifest_path output_path dim` with the
//! corpus root as working directory. It reads the manifest (JSON lines of
//! image records) and writes a vectors file whose ordinals index into that
//! manifest. Exit status 0 means success.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;

use tracing::debug;

use super::fvec::read_vectors_file;
use super::{BatchEmbedder, EmbedError, EmbedItem};
use crate::ingest::{write_manifest_file, ImageRecord};
use crate::vectors::VectorSet;

const STDERR_TAIL: usize = 4096;

/// Run the child once over `manifest_path` and validate what it wrote.
/// `image_ids[i]` names manifest line `i` and is used in error messages.
pub fn run_external_embedder(
    command: &str,
    manifest_path: &Path,
    output_path: &Path,
    dim: usize,
    workdir: &Path,
    image_ids: &[String],
) -> Result<VectorSet, EmbedError> {
    debug!(command, manifest = %manifest_path.display(), "running external embedder");
    let output = Command::new(command)
        .arg(manifest_path)
        .arg(output_path)
        .arg(dim.to_string())
        .current_dir(workdir)
        .output()?;
    if !output.status.success() {
        let stderr = String::from_utf8_lossy(&output.stderr);
        let start = stderr.len().saturating_sub(STDERR_TAIL);
        let start = (start..stderr.len())
            .find(|i| stderr.is_char_boundary(*i))
            .unwrap_or(stderr.len());
        return Err(EmbedError::ExternalFailed {
            status: output.status.to_string(),
            stderr: stderr[start..].trim().to_string(),
        });
    }

    let vectors = read_vectors_file(output_path).map_err(|e| match e {
        EmbedError::NonFiniteRow { ordinal, offset } => EmbedError::Image {
            image_id: image_ids
                .get(ordinal as usize)
                .cloned()
                .unwrap_or_else(|| format!("ordinal {ordinal}")),
            message: format!("non-finite value at byte offset {offset}"),
        },
        other => other,
    })?;
    if vectors.dim() != dim {
        return Err(EmbedError::Format {
            offset: super::FVEC_MAGIC.len() as u64,
            message: format!("dim={} but {dim} was requested", vectors.dim()),
        });
    }
    if vectors.len() != image_ids.len() {
        return Err(EmbedError::Format {
            offset: super::FVEC_MAGIC.len() as u64,
            message: format!(
                "count={} but the manifest has {} images",
                vectors.len(),
                image_ids.len()
            ),
        });
    }
    if let Some(bad) = vectors.ordinals().iter().find(|o| **o as usize >= image_ids.len()) {
        return Err(EmbedError::Format {
            offset: 0,
            message: format!("ordinal {bad} outside manifest of {}", image_ids.len()),
        });
    }
    Ok(vectors)
}

/// Batch adapter around [`run_external_embedder`]: each batch becomes its
/// own temporary manifest.
#[derive(Debug, Clone)]
pub struct ExternalEmbedder {
    pub command: String,
    pub dim: usize,
    pub workdir: PathBuf,
    /// Full corpus manifest; `EmbedItem::ordinal` indexes into it.
    pub records: Arc<Vec<ImageRecord>>,
}

impl BatchEmbedder for ExternalEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, items: &[EmbedItem]) -> Result<Vec<Vec<f32>>, EmbedError> {
        let scratch = tempfile::tempdir()?;
        let manifest = scratch.path().join("batch.jsonl");
        let output = scratch.path().join("batch.fvec");
        let mut records = Vec::with_capacity(items.len());
        for item in items {
            let rec = self.records.get(item.ordinal as usize).ok_or_else(|| {
                EmbedError::Image {
                    image_id: item.image_id.clone(),
                    message: format!("ordinal {} not in manifest", item.ordinal),
                }
            })?;
            records.push(rec.clone());
        }
        write_manifest_file(&records, &manifest).map_err(|e| EmbedError::Format {
            offset: 0,
            message: e.to_string(),
        })?;
        let ids: Vec<String> = items.iter().map(|i| i.image_id.clone()).collect();
        let vectors =
            run_external_embedder(&self.command, &manifest, &output, self.dim, &self.workdir, &ids)?;
        let mut out = vec![Vec::new(); items.len()];
        for (row, values) in vectors.rows().enumerate() {
            out[vectors.ordinal(row) as usize] = values.to_vec();
        }
        Ok(out)
    }
}
