//! Dense row-major vector storage shared by clustering and search.

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VectorSetError {
    #[error("dimension must be at least 1")]
    ZeroDim,
    #[error("row {row} has length {got}, expected {expected}")]
    DimMismatch { row: usize, expected: usize, got: usize },
    #[error("{values} values do not divide into rows of {dim}")]
    Ragged { values: usize, dim: usize },
    #[error("{ordinals} ordinals for {rows} rows")]
    OrdinalCount { ordinals: usize, rows: usize },
}

/// `len()` rows of `dim` floats, each tagged with a stable ordinal (the
/// row's position in the corpus manifest).
#[derive(Debug, Clone, PartialEq)]
pub struct VectorSet {
    dim: usize,
    ordinals: Vec<u64>,
    data: Vec<f32>,
}

impl VectorSet {
    pub fn new(dim: usize, ordinals: Vec<u64>, data: Vec<f32>) -> Result<Self, VectorSetError> {
        if dim == 0 {
            return Err(VectorSetError::ZeroDim);
        }
        if !data.len().is_multiple_of(dim) {
            return Err(VectorSetError::Ragged {
                values: data.len(),
                dim,
            });
        }
        let rows = data.len() / dim;
        if ordinals.len() != rows {
            return Err(VectorSetError::OrdinalCount {
                ordinals: ordinals.len(),
                rows,
            });
        }
        Ok(Self {
            dim,
            ordinals,
            data,
        })
    }

    /// Rows get ordinals `0..n`.
    pub fn from_flat(dim: usize, data: Vec<f32>) -> Result<Self, VectorSetError> {
        let rows = data.len().checked_div(dim).unwrap_or(0);
        Self::new(dim, (0..rows as u64).collect(), data)
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, VectorSetError> {
        let dim = rows.first().map(|r| r.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != dim {
                return Err(VectorSetError::DimMismatch {
                    row: i,
                    expected: dim,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_flat(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ordinals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ordinals.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn ordinal(&self, i: usize) -> u64 {
        self.ordinals[i]
    }

    pub fn ordinals(&self) -> &[u64] {
        &self.ordinals
    }

    pub fn as_flat(&self) -> &[f32] {
        &self.data
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.data.chunks_exact(self.dim)
    }

    /// Row index holding `ordinal`, by linear search.
    pub fn position_of(&self, ordinal: u64) -> Option<usize> {
        self.ordinals.iter().position(|&o| o == ordinal)
    }
}

/// Squared Euclidean distance with 64-bit accumulation.
#[inline]
pub fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four lanes let the compiler vectorize without changing the result
    // between runs
    let mut acc = [0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for lane in 0..4 {
            let d = a[i * 4 + lane] as f64 - b[i * 4 + lane] as f64;
            acc[lane] += d * d;
        }
    }
    let mut tail = 0f64;
    for i in chunks * 4..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        tail += d * d;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}
