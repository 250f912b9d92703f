//! Similar-image search.
//!
//! [`exact_knn`] is the linear-scan oracle. [`AnnIndex`] is a randomized
//! k-d forest: every tree splits at the median of a dimension drawn from
//! the few highest-variance dimensions of the node, and queries walk all
//! trees best-bin-first from one shared priority queue until a budget of
//! leaf visits is spent. Candidates are always ranked by their true
//! distance, so approximation shows up as missed neighbors only.

use std::cmp::{Ordering, Reverse};
use std::collections::{BinaryHeap, HashMap};
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vectors::{squared_distance, VectorSet};

pub const DEFAULT_TREE_COUNT: usize = 8;
pub const DEFAULT_LEAF_SIZE: usize = 16;
pub const DEFAULT_CHECKS: usize = 512;
/// Neighbors compared in the precision test.
pub const DEFAULT_PRECISION_K: usize = 50;
/// Split dimensions are drawn from this many highest-variance dimensions.
pub const TOP_VARIANCE_DIMS: usize = 5;
/// Points per node used to estimate per-dimension variance.
const VARIANCE_SAMPLE: usize = 100;
/// Passing this as `checks` visits every leaf.
pub const EXHAUSTIVE: usize = usize::MAX;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AnnError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("tree_count must be at least 1")]
    ZeroTrees,
    #[error("leaf_size must be at least 1")]
    ZeroLeafSize,
    #[error("cannot index an empty vector set")]
    Empty,
    #[error("query has dimension {got}, index has {expected}")]
    DimMismatch { expected: usize, got: usize },
    #[error("query row {row} out of range for {len} vectors")]
    NoSuchRow { row: usize, len: usize },
    #[error("index was built over {indexed} vectors, got {given}")]
    WrongVectorSet { indexed: usize, given: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnParams {
    pub tree_count: usize,
    pub leaf_size: usize,
    /// Maximum leaf visits per query.
    pub checks: usize,
    pub seed: u64,
}

impl Default for AnnParams {
    fn default() -> Self {
        Self {
            tree_count: DEFAULT_TREE_COUNT,
            leaf_size: DEFAULT_LEAF_SIZE,
            checks: DEFAULT_CHECKS,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    /// Row in the indexed vector set.
    pub row: usize,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeighborList {
    /// Row of the query when it is itself an indexed vector.
    pub query_row: Option<usize>,
    pub k: usize,
    /// Distance ascending, row ascending among ties.
    pub neighbors: Vec<Neighbor>,
}

impl NeighborList {
    pub fn rows(&self) -> Vec<usize> {
        self.neighbors.iter().map(|n| n.row).collect()
    }
}

/// Keeps the k smallest (squared distance, row) pairs.
struct TopK {
    k: usize,
    heap: BinaryHeap<(Key, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl TopK {
    fn new(k: usize) -> Self {
        Self {
            k,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    fn full(&self) -> bool {
        self.heap.len() >= self.k
    }

    fn worst(&self) -> f64 {
        self.heap.peek().map(|(d, _)| d.0).unwrap_or(f64::INFINITY)
    }

    fn offer(&mut self, d2: f64, row: usize) {
        if self.k == 0 {
            return;
        }
        let item = (Key(d2), row);
        if !self.full() {
            self.heap.push(item);
        } else if item < *self.heap.peek().unwrap() {
            self.heap.pop();
            self.heap.push(item);
        }
    }

    fn into_list(self, query_row: Option<usize>) -> NeighborList {
        let mut items = self.heap.into_vec();
        items.sort();
        NeighborList {
            query_row,
            k: self.k,
            neighbors: items
                .into_iter()
                .map(|(d, row)| Neighbor {
                    row,
                    distance: d.0.sqrt(),
                })
                .collect(),
        }
    }
}

/// Linear scan over every vector except `exclude`.
pub fn exact_knn_vector(
    vectors: &VectorSet,
    query: &[f32],
    k: usize,
    exclude: Option<usize>,
) -> Result<NeighborList, AnnError> {
    if k == 0 {
        return Err(AnnError::ZeroK);
    }
    if query.len() != vectors.dim() {
        return Err(AnnError::DimMismatch {
            expected: vectors.dim(),
            got: query.len(),
        });
    }
    let mut top = TopK::new(k);
    for (row, v) in vectors.rows().enumerate() {
        if Some(row) != exclude {
            top.offer(squared_distance(query, v), row);
        }
    }
    Ok(top.into_list(exclude))
}

/// The `k` nearest other rows to row `query_row`; the query itself is never
/// returned.
pub fn exact_knn(vectors: &VectorSet, query_row: usize, k: usize) -> Result<NeighborList, AnnError> {
    if query_row >= vectors.len() {
        return Err(AnnError::NoSuchRow {
            row: query_row,
            len: vectors.len(),
        });
    }
    exact_knn_vector(vectors, vectors.row(query_row), k, Some(query_row))
}

/// Unexplored subtree. `priority` accumulates squared distances to every
/// plane crossed on the way down and orders the search; `bound` is a true
/// lower bound on the distance to any point below and is used for pruning.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Branch {
    priority: Key,
    bound: f64,
    tree: usize,
    node: u32,
}

impl Eq for Branch {}

impl PartialOrd for Branch {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Branch {
    fn cmp(&self, other: &Self) -> Ordering {
        self.priority
            .cmp(&other.priority)
            .then(self.tree.cmp(&other.tree))
            .then(self.node.cmp(&other.node))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Node {
    Split {
        dim: u32,
        value: f32,
        left: u32,
        right: u32,
    },
    /// Range into the tree's `points`.
    Leaf { start: u32, end: u32 },
}

#[derive(Debug, Clone, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
    points: Vec<u32>,
}

impl Tree {
    const ROOT: u32 = 0;

    fn build(vectors: &VectorSet, leaf_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut tree = Tree {
            nodes: Vec::new(),
            points: (0..vectors.len() as u32).collect(),
        };
        tree.build_node(vectors, 0, vectors.len(), leaf_size, rng);
        tree
    }

    fn build_node(
        &mut self,
        vectors: &VectorSet,
        lo: usize,
        hi: usize,
        leaf_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> u32 {
        let id = self.nodes.len() as u32;
        if hi - lo <= leaf_size {
            self.nodes.push(Node::Leaf {
                start: lo as u32,
                end: hi as u32,
            });
            return id;
        }
        // placeholder, patched once the children exist
        self.nodes.push(Node::Leaf { start: 0, end: 0 });

        let dim = choose_split_dim(vectors, &self.points[lo..hi], rng);
        let mid = (hi - lo) / 2;
        let slice = &mut self.points[lo..hi];
        slice.select_nth_unstable_by(mid, |a, b| {
            let va = vectors.row(*a as usize)[dim];
            let vb = vectors.row(*b as usize)[dim];
            va.total_cmp(&vb).then(a.cmp(b))
        });
        let value = vectors.row(slice[mid] as usize)[dim];

        let left = self.build_node(vectors, lo, lo + mid, leaf_size, rng);
        let right = self.build_node(vectors, lo + mid, hi, leaf_size, rng);
        self.nodes[id as usize] = Node::Split {
            dim: dim as u32,
            value,
            left,
            right,
        };
        id
    }

    fn depth(&self) -> usize {
        fn walk(nodes: &[Node], id: u32) -> usize {
            match nodes[id as usize] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, Self::ROOT)
    }

    fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }

    fn footprint_bytes(&self) -> u64 {
        (self.nodes.len() * std::mem::size_of::<Node>() + self.points.len() * 4) as u64
    }
}

/// Pick uniformly among the highest-variance dimensions, estimated on the
/// first points of the node.
fn choose_split_dim(vectors: &VectorSet, points: &[u32], rng: &mut ChaCha8Rng) -> usize {
    let dim = vectors.dim();
    let sample = &points[..points.len().min(VARIANCE_SAMPLE)];
    let n = sample.len() as f64;
    let mut mean = vec![0f64; dim];
    for &p in sample {
        for (m, x) in mean.iter_mut().zip(vectors.row(p as usize)) {
            *m += *x as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0f64; dim];
    for &p in sample {
        for ((v, x), m) in var.iter_mut().zip(vectors.row(p as usize)).zip(&mean) {
            let d = *x as f64 - m;
            *v += d * d;
        }
    }
    let mut dims: Vec<usize> = (0..dim).collect();
    dims.sort_by(|a, b| var[*b].total_cmp(&var[*a]).then(a.cmp(b)));
    let top = TOP_VARIANCE_DIMS.min(dim);
    dims[rng.random_range(0..top)]
}

/// Randomized k-d forest over a [`VectorSet`]. Holds row indices only; the
/// vectors are passed back in at query time.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnIndex {
    params: AnnParams,
    dim: usize,
    len: usize,
    trees: Vec<Tree>,
    build_time: Duration,
}

/// Similar-image search backend.
pub trait NeighborIndex: Sync {
    fn search(
        &self,
        vectors: &VectorSet,
        query: &[f32],
        k: usize,
        exclude: Option<usize>,
    ) -> Result<NeighborList, AnnError>;

    fn footprint_bytes(&self) -> u64;
}

pub fn build_index(vectors: &VectorSet, params: &AnnParams) -> Result<AnnIndex, AnnError> {
    AnnIndex::build(vectors, params)
}

impl AnnIndex {
    pub fn build(vectors: &VectorSet, params: &AnnParams) -> Result<Self, AnnError> {
        if params.tree_count == 0 {
            return Err(AnnError::ZeroTrees);
        }
        if params.leaf_size == 0 {
            return Err(AnnError::ZeroLeafSize);
        }
        if vectors.is_empty() {
            return Err(AnnError::Empty);
        }
        let start = Instant::now();
        let trees = (0..params.tree_count)
            .into_par_iter()
            .map(|t| {
                let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
                rng.set_stream(t as u64);
                Tree::build(vectors, params.leaf_size, &mut rng)
            })
            .collect();
        Ok(Self {
            params: *params,
            dim: vectors.dim(),
            len: vectors.len(),
            trees,
            build_time: start.elapsed(),
        })
    }

    pub fn params(&self) -> &AnnParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn build_time(&self) -> Duration {
        self.build_time
    }

    /// Leaves summed over all trees.
    pub fn leaf_count(&self) -> usize {
        self.trees.iter().map(Tree::leaf_count).sum()
    }

    pub fn max_depth(&self) -> usize {
        self.trees.iter().map(Tree::depth).max().unwrap_or(0)
    }

    /// How many times each row occurs in each tree's leaves.
    pub fn census(&self) -> Vec<Vec<u32>> {
        self.trees
            .iter()
            .map(|t| {
                let mut counts = vec![0u32; self.len];
                for node in &t.nodes {
                    if let Node::Leaf { start, end } = node {
                        for p in &t.points[*start as usize..*end as usize] {
                            counts[*p as usize] += 1;
                        }
                    }
                }
                counts
            })
            .collect()
    }

    fn check_vectors(&self, vectors: &VectorSet, query: &[f32]) -> Result<(), AnnError> {
        if vectors.len() != self.len {
            return Err(AnnError::WrongVectorSet {
                indexed: self.len,
                given: vectors.len(),
            });
        }
        if query.len() != self.dim {
            return Err(AnnError::DimMismatch {
                expected: self.dim,
                got: query.len(),
            });
        }
        Ok(())
    }

    /// Best-bin-first search with an explicit leaf-visit budget.
    pub fn query_with_checks(
        &self,
        vectors: &VectorSet,
        query: &[f32],
        k: usize,
        checks: usize,
        exclude: Option<usize>,
    ) -> Result<NeighborList, AnnError> {
        if k == 0 {
            return Err(AnnError::ZeroK);
        }
        self.check_vectors(vectors, query)?;

        let mut top = TopK::new(k);
        let mut seen = vec![false; self.len];
        let mut branches: BinaryHeap<Reverse<Branch>> = BinaryHeap::new();
        for t in 0..self.trees.len() {
            branches.push(Reverse(Branch {
                priority: Key(0.0),
                bound: 0.0,
                tree: t,
                node: Tree::ROOT,
            }));
        }
        let mut visited = 0usize;
        while let Some(Reverse(branch)) = branches.pop() {
            if visited >= checks {
                break;
            }
            if top.full() && branch.bound > top.worst() {
                continue;
            }
            let tree = &self.trees[branch.tree];
            let mut node = branch.node;
            loop {
                match tree.nodes[node as usize] {
                    Node::Split {
                        dim,
                        value,
                        left,
                        right,
                    } => {
                        let diff = query[dim as usize] as f64 - value as f64;
                        let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                        let far_bound = branch.bound.max(diff * diff);
                        if !top.full() || far_bound <= top.worst() {
                            branches.push(Reverse(Branch {
                                priority: Key(branch.priority.0 + diff * diff),
                                bound: far_bound,
                                tree: branch.tree,
                                node: far,
                            }));
                        }
                        node = near;
                    }
                    Node::Leaf { start, end } => {
                        for &p in &tree.points[start as usize..end as usize] {
                            let p = p as usize;
                            if seen[p] || Some(p) == exclude {
                                continue;
                            }
                            seen[p] = true;
                            top.offer(squared_distance(query, vectors.row(p)), p);
                        }
                        visited += 1;
                        break;
                    }
                }
            }
        }
        Ok(top.into_list(exclude))
    }

    /// Query with the index's configured `checks`.
    pub fn query_knn(
        &self,
        vectors: &VectorSet,
        query: &[f32],
        k: usize,
    ) -> Result<NeighborList, AnnError> {
        self.query_with_checks(vectors, query, k, self.params.checks, None)
    }

    /// Neighbors of an indexed row, excluding the row itself.
    pub fn query_row(
        &self,
        vectors: &VectorSet,
        row: usize,
        k: usize,
        checks: usize,
    ) -> Result<NeighborList, AnnError> {
        if row >= vectors.len() {
            return Err(AnnError::NoSuchRow {
                row,
                len: vectors.len(),
            });
        }
        self.query_with_checks(vectors, vectors.row(row), k, checks, Some(row))
    }

    /// Bytes held by the forest structure (nodes and point lists).
    pub fn footprint_bytes(&self) -> u64 {
        self.trees.iter().map(Tree::footprint_bytes).sum()
    }
}

impl NeighborIndex for AnnIndex {
    fn search(
        &self,
        vectors: &VectorSet,
        query: &[f32],
        k: usize,
        exclude: Option<usize>,
    ) -> Result<NeighborList, AnnError> {
        self.query_with_checks(vectors, query, k, self.params.checks, exclude)
    }

    fn footprint_bytes(&self) -> u64 {
        AnnIndex::footprint_bytes(self)
    }
}

/// Brute-force backend; holds nothing.
#[derive(Debug, Clone, Copy, Default)]
pub struct ExactIndex;

impl NeighborIndex for ExactIndex {
    fn search(
        &self,
        vectors: &VectorSet,
        query: &[f32],
        k: usize,
        exclude: Option<usize>,
    ) -> Result<NeighborList, AnnError> {
        exact_knn_vector(vectors, query, k, exclude)
    }

    fn footprint_bytes(&self) -> u64 {
        0
    }
}

/// Memory needed by the full pairwise-distance matrix versus the forest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    pub points: u64,
    /// N x N x 4 bytes.
    pub similarity_matrix_bytes: u128,
    pub index_bytes: u64,
}

impl MemoryEstimate {
    /// Analytic forest footprint: median splits make the tree shape a pure
    /// function of N and the leaf size.
    pub fn for_forest(points: u64, params: &AnnParams) -> Self {
        fn nodes(n: u64, leaf: u64, memo: &mut HashMap<u64, u64>) -> u64 {
            if n <= leaf {
                return 1;
            }
            if let Some(v) = memo.get(&n) {
                return *v;
            }
            let half = n / 2;
            let v = 1 + nodes(half, leaf, memo) + nodes(n - half, leaf, memo);
            memo.insert(n, v);
            v
        }
        let per_tree = if points == 0 {
            0
        } else {
            nodes(points, params.leaf_size.max(1) as u64, &mut HashMap::new())
                * std::mem::size_of::<Node>() as u64
                + points * 4
        };
        Self {
            points,
            similarity_matrix_bytes: points as u128 * points as u128 * 4,
            index_bytes: per_tree * params.tree_count as u64,
        }
    }

    pub fn index_fraction(&self) -> f64 {
        if self.similarity_matrix_bytes == 0 {
            return 0.0;
        }
        self.index_bytes as f64 / self.similarity_matrix_bytes as f64
    }
}

/// Approximate-versus-exact comparison over a sample of queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionReport {
    pub k: usize,
    pub queries: usize,
    pub checks: usize,
    /// `per_rank[r - 1]`: mean over queries of |approx top-r ∩ exact top-r| / r.
    pub per_rank: Vec<f64>,
    pub build_time: Duration,
    pub exact_time: Duration,
    pub approx_time: Duration,
    pub memory: MemoryEstimate,
}

impl PrecisionReport {
    /// Mean precision over ranks `from..=to` (1-based).
    pub fn mean_over(&self, from: usize, to: usize) -> f64 {
        let slice = &self.per_rank[from - 1..to];
        slice.iter().sum::<f64>() / slice.len() as f64
    }

    /// `# key=value` comment line, then `rank,precision` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "# k={} queries={} checks={} build_ms={:.3} exact_ms={:.3} approx_ms={:.3} similarity_matrix_bytes={} index_bytes={}",
            self.k,
            self.queries,
            self.checks,
            self.build_time.as_secs_f64() * 1e3,
            self.exact_time.as_secs_f64() * 1e3,
            self.approx_time.as_secs_f64() * 1e3,
            self.memory.similarity_matrix_bytes,
            self.memory.index_bytes
        );
        out.push_str("rank,precision\n");
        for (r, p) in self.per_rank.iter().enumerate() {
            let _ = writeln!(out, "{},{:.6}", r + 1, p);
        }
        out
    }
}

/// |approx ∩ exact| / r over the first `r` entries of each list.
pub fn overlap_at(approx: &[usize], exact: &[usize], r: usize) -> f64 {
    let a = &approx[..r.min(approx.len())];
    let e = &exact[..r.min(exact.len())];
    a.iter().filter(|x| e.contains(x)).count() as f64 / r as f64
}

/// Sampled rows used as queries, ascending.
pub fn sample_queries(len: usize, sample: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = rand::seq::index::sample(&mut rng, len, sample.min(len)).into_vec();
    rows.sort_unstable();
    rows
}

/// Compare the forest against the exact scan on `queries` sampled rows.
pub fn precision_at_k(
    vectors: &VectorSet,
    index: &AnnIndex,
    k: usize,
    queries: usize,
    seed: u64,
) -> Result<PrecisionReport, AnnError> {
    if k == 0 {
        return Err(AnnError::ZeroK);
    }
    let rows = sample_queries(vectors.len(), queries, seed);
    let checks = index.params().checks;

    let start = Instant::now();
    let exact: Vec<Vec<usize>> = rows
        .iter()
        .map(|&q| exact_knn(vectors, q, k).map(|l| l.rows()))
        .collect::<Result<_, _>>()?;
    let exact_time = start.elapsed();

    let start = Instant::now();
    let approx: Vec<Vec<usize>> = rows
        .iter()
        .map(|&q| index.query_row(vectors, q, k, checks).map(|l| l.rows()))
        .collect::<Result<_, _>>()?;
    let approx_time = start.elapsed();

    let per_rank = (1..=k)
        .map(|r| {
            if rows.is_empty() {
                return 1.0;
            }
            approx
                .iter()
                .zip(&exact)
                .map(|(a, e)| overlap_at(a, e, r))
                .sum::<f64>()
                / rows.len() as f64
        })
        .collect();

    Ok(PrecisionReport {
        k,
        queries: rows.len(),
        checks,
        per_rank,
        build_time: index.build_time(),
        exact_time,
        approx_time,
        memory: MemoryEstimate::for_forest(vectors.len() as u64, index.params()),
    })
}

/// Mean |approx top-k ∩ exact top-k| / k over the given query rows.
pub fn mean_recall(
    vectors: &VectorSet,
    index: &AnnIndex,
    rows: &[usize],
    k: usize,
    checks: usize,
) -> Result<f64, AnnError> {
    let mut total = 0.0;
    for &q in rows {
        let exact = exact_knn(vectors, q, k)?.rows();
        let approx = index.query_row(vectors, q, k, checks)?.rows();
        total += approx.iter().filter(|x| exact.contains(x)).count() as f64 / exact.len().max(1) as f64;
    }
    Ok(total / rows.len().max(1) as f64)
}
