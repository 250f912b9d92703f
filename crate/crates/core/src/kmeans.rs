//! K-means over representative feature vectors.
//!
//! k-means++ seeding followed by Lloyd iterations. Points are processed in
//! ascending ordinal order internally, so the result depends only on the
//! (ordinal, vector) pairs and the seed, never on input order or the size
//! of the worker pool.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, warn};

use crate::ingest::{DedupGroup, ImageRecord};
use crate::vectors::{squared_distance, VectorSet};

/// Cluster count used when the caller does not choose one.
pub const DEFAULT_K: usize = 150;
pub const DEFAULT_MAX_ITERS: usize = 100;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_SAMPLE_SIZE: usize = 25;

#[derive(Debug, Error)]
pub enum KMeansError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("k = {k} exceeds the number of points ({points})")]
    TooFewPoints { k: usize, points: usize },
    #[error("vector has dimension {got}, model has {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("mixed dimensions: row {row} has {got}, expected {expected}")]
    MixedDims { row: usize, expected: usize, got: usize },
    #[error("row {0} contains a non-finite value")]
    NonFinite(usize),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the relative inertia improvement drops below this.
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

/// `min(DEFAULT_K, points)`: 150 clusters whenever the corpus allows it.
pub fn default_k(points: usize) -> usize {
    DEFAULT_K.min(points)
}

/// A fitted model. `ordinals[i]` is assigned to cluster `assignments[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<f32>,
    pub ordinals: Vec<u64>,
    pub assignments: Vec<u32>,
    pub inertia: f64,
    pub iterations_run: usize,
    pub seed: u64,
    /// Inertia after seeding and after every Lloyd iteration. Empty for
    /// models read back from disk.
    pub inertia_history: Vec<f64>,
}

impl ClusterModel {
    pub fn centroid(&self, c: usize) -> &[f32] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    pub fn cluster_of(&self, ordinal: u64) -> Option<usize> {
        self.ordinals
            .iter()
            .position(|o| *o == ordinal)
            .map(|i| self.assignments[i] as usize)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for a in &self.assignments {
            sizes[*a as usize] += 1;
        }
        sizes
    }
}

/// Nearest centroid by squared Euclidean distance; ties go to the lowest
/// index.
pub fn assign(model: &ClusterModel, vector: &[f32]) -> Result<usize, KMeansError> {
    if vector.len() != model.dim {
        return Err(KMeansError::DimMismatch {
            expected: model.dim,
            got: vector.len(),
        });
    }
    Ok(nearest(&model.centroids, model.dim, vector).0)
}

fn nearest(centroids: &[f32], dim: usize, v: &[f32]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.chunks_exact(dim).enumerate() {
        let d = squared_distance(v, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Rows in fitting order (ascending ordinal) as a flat slice view.
struct Points<'a> {
    data: &'a [f32],
    dim: usize,
    /// order[j] = row in `data` of the j-th point in fitting order
    order: Vec<usize>,
}

impl Points<'_> {
    fn get(&self, j: usize) -> &[f32] {
        let r = self.order[j];
        &self.data[r * self.dim..(r + 1) * self.dim]
    }

    fn len(&self) -> usize {
        self.order.len()
    }
}

fn assign_all(points: &Points, centroids: &[f32]) -> (Vec<u32>, Vec<f64>) {
    let pairs: Vec<(u32, f64)> = (0..points.len())
        .into_par_iter()
        .map(|j| {
            let (c, d) = nearest(centroids, points.dim, points.get(j));
            (c as u32, d)
        })
        .collect();
    pairs.into_iter().unzip()
}

fn plus_plus_init(points: &Points, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len();
    let dim = points.dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    centroids.extend_from_slice(points.get(first));
    let mut d2: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| squared_distance(points.get(j), points.get(first)))
        .collect();

    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (j, w) in d2.iter().enumerate() {
                if *w <= 0.0 {
                    continue;
                }
                acc += w;
                pick = Some(j);
                if acc > target {
                    break;
                }
            }
            pick.expect("positive total implies a positive weight")
        } else {
            // every point sits on a centre already; take any unused one
            let free: Vec<usize> = (0..n).filter(|j| !chosen[*j]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        let c = points.get(pick).to_vec();
        d2.par_iter_mut().enumerate().for_each(|(j, d)| {
            let nd = squared_distance(points.get(j), &c);
            if nd < *d {
                *d = nd;
            }
        });
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Mean of each cluster's members, accumulated in f64 in point order.
/// Empty clusters keep their old centroid and are reported.
fn update_centroids(points: &Points, labels: &[u32], old: &[f32], k: usize) -> (Vec<f32>, Vec<usize>) {
    let dim = points.dim;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (j, l) in labels.iter().enumerate() {
        members[*l as usize].push(j);
    }
    let rows: Vec<Option<Vec<f32>>> = members
        .par_iter()
        .map(|m| {
            if m.is_empty() {
                return None;
            }
            let mut sum = vec![0f64; dim];
            for &j in m {
                for (s, x) in sum.iter_mut().zip(points.get(j)) {
                    *s += *x as f64;
                }
            }
            let n = m.len() as f64;
            Some(sum.into_iter().map(|s| (s / n) as f32).collect())
        })
        .collect();
    let mut centroids = Vec::with_capacity(k * dim);
    let mut empty = Vec::new();
    for (c, row) in rows.into_iter().enumerate() {
        match row {
            Some(r) => centroids.extend_from_slice(&r),
            None => {
                empty.push(c);
                centroids.extend_from_slice(&old[c * dim..(c + 1) * dim]);
            }
        }
    }
    (centroids, empty)
}

/// Move each empty cluster's centroid onto the point farthest from its own
/// centroid, taking points only from clusters that keep at least one member.
fn repair_empty(points: &Points, labels: &[u32], centroids: &mut [f32], empty: &[usize], k: usize) {
    let dim = points.dim;
    let mut sizes = vec![0usize; k];
    for l in labels {
        sizes[*l as usize] += 1;
    }
    let mut far: Vec<(f64, usize)> = (0..points.len())
        .into_par_iter()
        .map(|j| {
            let c = labels[j] as usize;
            (squared_distance(points.get(j), &centroids[c * dim..(c + 1) * dim]), j)
        })
        .collect();
    // farthest first, lowest index among ties
    far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut candidates = far.into_iter();
    for &c in empty {
        let Some((_, j)) = candidates.find(|(_, j)| sizes[labels[*j] as usize] > 1) else {
            warn!(cluster = c, "no point available to refill empty cluster");
            continue;
        };
        sizes[labels[j] as usize] -= 1;
        sizes[c] += 1;
        centroids[c * dim..(c + 1) * dim].copy_from_slice(points.get(j));
    }
}

pub fn kmeans_fit(vectors: &VectorSet, params: &KMeansParams) -> Result<ClusterModel, KMeansError> {
    let n = vectors.len();
    let k = params.k;
    if k == 0 {
        return Err(KMeansError::ZeroK);
    }
    if k > n {
        return Err(KMeansError::TooFewPoints { k, points: n });
    }
    if let Some(row) = vectors.rows().position(|r| r.iter().any(|x| !x.is_finite())) {
        return Err(KMeansError::NonFinite(row));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&r| (vectors.ordinal(r), r));
    let points = Points {
        data: vectors.as_flat(),
        dim: vectors.dim(),
        order,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = plus_plus_init(&points, k, &mut rng);
    let (mut labels, d2) = assign_all(&points, &centroids);
    let mut inertia: f64 = d2.iter().sum();
    let mut history = vec![inertia];
    let mut iterations = 0;

    while iterations < params.max_iters {
        iterations += 1;
        let (mut next, empty) = update_centroids(&points, &labels, &centroids, k);
        if !empty.is_empty() {
            debug!(count = empty.len(), "repairing empty clusters");
            repair_empty(&points, &labels, &mut next, &empty, k);
        }
        centroids = next;
        let (new_labels, d2) = assign_all(&points, &centroids);
        labels = new_labels;
        let new_inertia: f64 = d2.iter().sum();
        history.push(new_inertia);
        let improvement = if inertia > 0.0 {
            (inertia - new_inertia) / inertia
        } else {
            0.0
        };
        inertia = new_inertia;
        if improvement < params.tol {
            break;
        }
    }
    debug!(iterations, inertia, "k-means finished");

    let mut assignments = vec![0u32; n];
    for (j, &r) in points.order.iter().enumerate() {
        assignments[r] = labels[j];
    }
    Ok(ClusterModel {
        k,
        dim: vectors.dim(),
        centroids,
        ordinals: vectors.ordinals().to_vec(),
        assignments,
        inertia,
        iterations_run: iterations,
        seed: params.seed,
        inertia_history: history,
    })
}

/// Convenience entry point for ragged input; rows get ordinals `0..n`.
pub fn kmeans_fit_rows(rows: &[Vec<f32>], params: &KMeansParams) -> Result<ClusterModel, KMeansError> {
    let vs = VectorSet::from_rows(rows).map_err(|e| match e {
        crate::vectors::VectorSetError::DimMismatch { row, expected, got } => {
            KMeansError::MixedDims { row, expected, got }
        }
        _ => KMeansError::TooFewPoints {
            k: params.k,
            points: 0,
        },
    })?;
    kmeans_fit(&vs, params)
}

/// Per-cluster view used by reviewers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster_index: usize,
    pub size_representatives: usize,
    /// Expanded through dedup groups.
    pub size_total_images: usize,
    pub medoid_image_id: Option<String>,
    /// Closest representatives first.
    pub sample_image_ids: Vec<String>,
}

/// A clustered representative and its distance to the centroid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterMember {
    pub image_id: String,
    pub distance: f64,
}

/// Members of every cluster sorted by distance to the centroid, image id
/// breaking ties. `vectors` must be the set the model was fitted on and its
/// ordinals index `records`.
pub fn cluster_members(
    model: &ClusterModel,
    vectors: &VectorSet,
    records: &[ImageRecord],
) -> Vec<Vec<ClusterMember>> {
    let mut members: Vec<Vec<ClusterMember>> = vec![Vec::new(); model.k];
    let cluster_of: HashMap<u64, usize> = model
        .ordinals
        .iter()
        .zip(&model.assignments)
        .map(|(o, a)| (*o, *a as usize))
        .collect();
    for (row, v) in vectors.rows().enumerate() {
        let ordinal = vectors.ordinal(row);
        let Some(&c) = cluster_of.get(&ordinal) else {
            continue;
        };
        let Some(rec) = records.get(ordinal as usize) else {
            continue;
        };
        members[c].push(ClusterMember {
            image_id: rec.image_id.clone(),
            distance: squared_distance(v, model.centroid(c)).sqrt(),
        });
    }
    for m in &mut members {
        m.sort_by(|a, b| a.distance.total_cmp(&b.distance).then_with(|| a.image_id.cmp(&b.image_id)));
    }
    members
}

pub fn summarize_clusters(
    model: &ClusterModel,
    vectors: &VectorSet,
    records: &[ImageRecord],
    groups: &[DedupGroup],
    sample_size: usize,
) -> Vec<ClusterSummary> {
    let frequency: HashMap<&str, usize> = groups
        .iter()
        .map(|g| (g.representative_image_id.as_str(), g.frequency))
        .collect();
    cluster_members(model, vectors, records)
        .into_iter()
        .enumerate()
        .map(|(c, members)| ClusterSummary {
            cluster_index: c,
            size_representatives: members.len(),
            size_total_images: members
                .iter()
                .map(|m| frequency.get(m.image_id.as_str()).copied().unwrap_or(1))
                .sum(),
            medoid_image_id: members.first().map(|m| m.image_id.clone()),
            sample_image_ids: members.iter().take(sample_size).map(|m| m.image_id.clone()).collect(),
        })
        .collect()
}

/// Model file: header line, centroids as f32 LE, then a u64 LE pair count
/// followed by (u64 LE ordinal, u32 LE cluster) pairs.
pub fn write_model<W: Write>(model: &ClusterModel, out: W) -> Result<(), KMeansError> {
    let mut w = BufWriter::new(out);
    writeln!(
        w,
        "KMEANS1 k={} dim={} seed={} inertia={}",
        model.k, model.dim, model.seed, model.inertia
    )?;
    for x in &model.centroids {
        w.write_all(&x.to_le_bytes())?;
    }
    w.write_all(&(model.ordinals.len() as u64).to_le_bytes())?;
    for (o, a) in model.ordinals.iter().zip(&model.assignments) {
        w.write_all(&o.to_le_bytes())?;
        w.write_all(&a.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_model_file(model: &ClusterModel, path: &Path) -> Result<(), KMeansError> {
    write_model(model, fs::File::create(path)?)
}

pub fn read_model(bytes: &[u8]) -> Result<ClusterModel, KMeansError> {
    let fmt = |m: &str| KMeansError::Format(m.to_string());
    let nl = bytes
        .iter()
        .take(256)
        .position(|b| *b == b'\n')
        .ok_or_else(|| fmt("missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl]).map_err(|_| fmt("header is not UTF-8"))?;
    let mut tokens = header.split(' ');
    if tokens.next() != Some("KMEANS1") {
        return Err(fmt("missing KMEANS1 magic"));
    }
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for t in tokens {
        let (key, value) = t.split_once('=').ok_or_else(|| fmt("malformed header token"))?;
        fields.insert(key, value);
    }
    let field = |key: &str| {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| KMeansError::Format(format!("header lacks {key}")))
    };
    let parse_err = |key: &str| KMeansError::Format(format!("bad {key} value"));
    let k: usize = field("k")?.parse().map_err(|_| parse_err("k"))?;
    let dim: usize = field("dim")?.parse().map_err(|_| parse_err("dim"))?;
    let seed: u64 = field("seed")?.parse().map_err(|_| parse_err("seed"))?;
    let inertia: f64 = field("inertia")?.parse().map_err(|_| parse_err("inertia"))?;

    let mut pos = nl + 1;
    let mut take = |n: usize| -> Result<&[u8], KMeansError> {
        let end = pos.checked_add(n).filter(|e| *e <= bytes.len()).ok_or_else(|| {
            KMeansError::Format(format!("truncated at byte offset {pos}"))
        })?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    let centroid_bytes = take(k.checked_mul(dim).and_then(|x| x.checked_mul(4)).ok_or_else(|| fmt("k x dim overflows"))?)?;
    let centroids: Vec<f32> = centroid_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let pairs = take(count.checked_mul(12).ok_or_else(|| fmt("assignment count overflows"))?)?;
    let mut ordinals = Vec::with_capacity(count);
    let mut assignments = Vec::with_capacity(count);
    for p in pairs.chunks_exact(12) {
        ordinals.push(u64::from_le_bytes(p[..8].try_into().unwrap()));
        let a = u32::from_le_bytes(p[8..].try_into().unwrap());
        if a as usize >= k {
            return Err(KMeansError::Format(format!("cluster {a} out of range for k={k}")));
        }
        assignments.push(a);
    }
    if pos != bytes.len() {
        return Err(KMeansError::Format(format!("trailing bytes at offset {pos}")));
    }
    Ok(ClusterModel {
        k,
        dim,
        centroids,
        ordinals,
        assignments,
        inertia,
        iterations_run: 0,
        seed,
        inertia_history: Vec::new(),
    })
}

pub fn read_model_file(path: &Path) -> Result<ClusterModel, KMeansError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_model(&bytes)
}
