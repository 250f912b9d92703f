//! Project store.
//!
//! Layout under the data directory:
//!
//! ```text
//! projects/<project_id>/project.json        metadata and round list
//! projects/<project_id>/tags.jsonl          tag event log
//! projects/<project_id>/rounds/<n>/         frozen artifacts of round n
//!     manifest.jsonl groups.jsonl vectors.fvec failures.jsonl
//!     model.kmeans summaries.json round.json
//! thumbnails/<content_hash>.png
//! ```
//!
//! Round directories are written once, under a temporary name that is
//! renamed into place, and never touched again.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use imagetar_core::ann::AnnIndex;
use imagetar_core::embedding::{read_vectors_file, write_vectors_file, FailedImage};
use imagetar_core::ingest::{
    read_groups, read_manifest_file, write_groups, write_manifest_file, DedupGroup, ImageRecord,
};
use imagetar_core::kmeans::{
    cluster_members, read_model_file, write_model_file, ClusterMember, ClusterModel,
    ClusterSummary,
};
use imagetar_core::vectors::VectorSet;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{error, info, warn};
use uuid::Uuid;

use crate::pipeline::{self, Ingested, RoundArtifacts, RoundParams, Stage, StageFailure};
use crate::report::{build_report, CategorizationReport, ReportError, ReportInputs, ReportTotals};
use crate::tags::{Label, TagError, TagEvent, TagLog};
use crate::thumbnails::{ThumbnailCache, ThumbnailError};

pub const DEFAULT_SIMILAR_K: usize = 50;
pub const DEFAULT_PAGE_LIMIT: usize = 100;
pub const MAX_PAGE_LIMIT: usize = 1000;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("project '{0}' not found")]
    ProjectNotFound(String),
    #[error("a project named '{0}' already exists")]
    DuplicateName(String),
    #[error("project name must not be empty")]
    EmptyName,
    #[error("corpus root {path} is not a readable directory: {message}")]
    CorpusUnreadable { path: PathBuf, message: String },
    #[error("invalid round parameters: {0}")]
    InvalidParams(String),
    #[error("k={k} exceeds the {representatives} clusterable representatives")]
    KTooLarge { k: usize, representatives: usize },
    #[error("round {0} not found")]
    RoundNotFound(u32),
    #[error("round {round} is {status:?}, not complete")]
    RoundNotComplete { round: u32, status: RoundStatus },
    #[error("cluster {cluster} not found in round {round} (k={k})")]
    ClusterNotFound { round: u32, cluster: usize, k: usize },
    #[error("image '{0}' not found in this round")]
    ImageNotFound(String),
    #[error("image '{0}' has no vector in this round (excluded, invalid or failed embedding)")]
    ImageNotIndexed(String),
    #[error("{0}")]
    Stage(StageFailure),
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Tag(#[from] TagError),
    #[error(transparent)]
    Report(#[from] ReportError),
    #[error(transparent)]
    Thumbnail(#[from] ThumbnailError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RoundStatus {
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundCounts {
    pub images: usize,
    pub clusterable: usize,
    pub representatives: usize,
    pub embedded: usize,
    pub embed_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundInfo {
    pub round: u32,
    pub status: RoundStatus,
    pub k: usize,
    pub params: RoundParams,
    pub created_at: DateTime<Utc>,
    pub finished_at: Option<DateTime<Utc>>,
    pub failure: Option<StageFailure>,
    pub counts: Option<RoundCounts>,
    /// Relative to the project directory.
    pub manifest_ref: String,
    pub model_ref: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Project {
    pub project_id: String,
    pub name: String,
    pub corpus_root: PathBuf,
    pub created_at: DateTime<Utc>,
    pub rounds: Vec<RoundInfo>,
    /// Latest complete round.
    pub current_round: Option<u32>,
}

impl Project {
    pub fn round(&self, round: u32) -> Option<&RoundInfo> {
        self.rounds.iter().find(|r| r.round == round)
    }
}

/// Image reference with the key its thumbnail is served under.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    pub path: String,
    pub content_hash: String,
    pub thumbnail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterView {
    pub cluster_index: usize,
    pub size_images: usize,
    pub size_representatives: usize,
    pub medoid: Option<ImageRef>,
    pub samples: Vec<ImageRef>,
    pub label: Label,
    pub note: String,
    /// Tag events for this cluster, oldest first.
    pub history: Vec<TagEvent>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSort {
    Index,
    SizeDesc,
    SizeAsc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterImage {
    #[serde(flatten)]
    pub image: ImageRef,
    pub distance: f64,
    pub representative_image_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterImagesPage {
    pub cluster_index: usize,
    pub offset: usize,
    pub limit: usize,
    pub total: usize,
    pub images: Vec<ClusterImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarImage {
    #[serde(flatten)]
    pub image: ImageRef,
    pub distance: f64,
    pub cluster_index: usize,
    pub label: Label,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarResult {
    pub round: u32,
    pub query: ImageRef,
    pub k: usize,
    pub neighbors: Vec<SimilarImage>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundStats {
    pub round: u32,
    pub status: RoundStatus,
    pub clusters_total: usize,
    pub clusters_tagged: usize,
    pub clusters_untagged: usize,
    pub clusters_by_label: BTreeMap<Label, usize>,
    pub images: Option<ReportTotals>,
    /// Responsive plus not responsive.
    pub images_resolved: usize,
    /// Further review plus untagged.
    pub images_pending: usize,
    pub tag_events: usize,
    pub first_tag_at: Option<DateTime<Utc>>,
    pub last_tag_at: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectStats {
    pub project_id: String,
    pub current_round: Option<u32>,
    pub rounds: Vec<RoundStats>,
}

pub fn thumbnail_url(content_hash: &str) -> String {
    format!("/api/thumbnails/{content_hash}")
}

/// A complete round held in memory, with its search index rebuilt.
#[derive(Debug)]
pub struct RoundData {
    pub info: RoundInfo,
    pub records: Vec<ImageRecord>,
    pub groups: Vec<DedupGroup>,
    pub vectors: VectorSet,
    pub failures: Vec<FailedImage>,
    pub model: ClusterModel,
    pub summaries: Vec<ClusterSummary>,
    pub members: Vec<Vec<ClusterMember>>,
    pub index: AnnIndex,
    record_of: HashMap<String, usize>,
    group_of: HashMap<String, usize>,
    row_of: HashMap<String, usize>,
    cluster_of_row: Vec<usize>,
    failed_reps: HashSet<String>,
}

impl RoundData {
    fn assemble(info: RoundInfo, a: RoundArtifacts) -> Result<Self, StoreError> {
        let index = AnnIndex::build(&a.vectors, &info.params.ann)
            .map_err(|e| StoreError::Corrupt(format!("index: {e}")))?;
        let members = cluster_members(&a.model, &a.vectors, &a.records);
        let record_of = a
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_id.clone(), i))
            .collect();
        let mut group_of = HashMap::new();
        for (gi, g) in a.groups.iter().enumerate() {
            for m in &g.member_ids {
                group_of.insert(m.clone(), gi);
            }
        }
        let mut row_of = HashMap::new();
        for row in 0..a.vectors.len() {
            let rec = a.records.get(a.vectors.ordinal(row) as usize).ok_or_else(|| {
                StoreError::Corrupt(format!("vector ordinal {} outside manifest", a.vectors.ordinal(row)))
            })?;
            row_of.insert(rec.image_id.clone(), row);
        }
        let cluster_by_ordinal: HashMap<u64, usize> = a
            .model
            .ordinals
            .iter()
            .zip(&a.model.assignments)
            .map(|(o, c)| (*o, *c as usize))
            .collect();
        let cluster_of_row = a
            .vectors
            .ordinals()
            .iter()
            .map(|o| {
                cluster_by_ordinal
                    .get(o)
                    .copied()
                    .ok_or_else(|| StoreError::Corrupt(format!("ordinal {o} has no cluster")))
            })
            .collect::<Result<_, _>>()?;
        let failed_reps = a.failures.iter().map(|f| f.image_id.clone()).collect();
        Ok(Self {
            info,
            records: a.records,
            groups: a.groups,
            vectors: a.vectors,
            failures: a.failures,
            model: a.model,
            summaries: a.summaries,
            members,
            index,
            record_of,
            group_of,
            row_of,
            cluster_of_row,
            failed_reps,
        })
    }

    fn write_artifacts(dir: &Path, info: &RoundInfo, a: &RoundArtifacts) -> Result<(), StoreError> {
        fs::create_dir_all(dir)?;
        let io = |e: imagetar_core::ingest::IngestError| StoreError::Corrupt(e.to_string());
        write_manifest_file(&a.records, &dir.join("manifest.jsonl")).map_err(io)?;
        write_groups(&a.groups, File::create(dir.join("groups.jsonl"))?).map_err(io)?;
        write_vectors_file(&a.vectors, &dir.join("vectors.fvec"))
            .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        let mut f = BufWriter::new(File::create(dir.join("failures.jsonl"))?);
        for failure in &a.failures {
            serde_json::to_writer(&mut f, failure)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        write_model_file(&a.model, &dir.join("model.kmeans"))
            .map_err(|e| StoreError::Corrupt(e.to_string()))?;
        fs::write(dir.join("summaries.json"), serde_json::to_vec_pretty(&a.summaries)?)?;
        fs::write(dir.join("round.json"), serde_json::to_vec_pretty(info)?)?;
        Ok(())
    }

    fn load(dir: &Path, info: RoundInfo) -> Result<Self, StoreError> {
        let corrupt = |what: &str, e: &dyn std::fmt::Display| {
            StoreError::Corrupt(format!("{}: {what}: {e}", dir.display()))
        };
        let records =
            read_manifest_file(&dir.join("manifest.jsonl")).map_err(|e| corrupt("manifest", &e))?;
        let groups = read_groups(BufReader::new(File::open(dir.join("groups.jsonl"))?))
            .map_err(|e| corrupt("groups", &e))?;
        let vectors =
            read_vectors_file(&dir.join("vectors.fvec")).map_err(|e| corrupt("vectors", &e))?;
        let failures = fs::read_to_string(dir.join("failures.jsonl"))?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<Vec<FailedImage>, _>>()?;
        let model = read_model_file(&dir.join("model.kmeans")).map_err(|e| corrupt("model", &e))?;
        let summaries = serde_json::from_slice(&fs::read(dir.join("summaries.json"))?)?;
        Self::assemble(
            info,
            RoundArtifacts {
                records,
                groups,
                vectors,
                failures,
                model,
                summaries,
            },
        )
    }

    pub fn k(&self) -> usize {
        self.model.k
    }

    pub fn failed_representatives(&self) -> &HashSet<String> {
        &self.failed_reps
    }

    pub fn image_ref(&self, image_id: &str) -> Option<ImageRef> {
        let r = &self.records[*self.record_of.get(image_id)?];
        Some(ImageRef {
            image_id: r.image_id.clone(),
            path: r.path.clone(),
            content_hash: r.content_hash.clone(),
            thumbnail: thumbnail_url(&r.content_hash),
        })
    }

    /// Members of `image_id`'s dedup group, including itself.
    fn group_members(&self, image_id: &str) -> &[String] {
        match self.group_of.get(image_id) {
            Some(&g) => &self.groups[g].member_ids,
            None => &[],
        }
    }

    fn rep_of_row(&self, row: usize) -> &str {
        &self.records[self.vectors.ordinal(row) as usize].image_id
    }

    /// Vector row for any clustered image, through its group
    /// representative.
    pub fn row_for_image(&self, image_id: &str) -> Option<usize> {
        let g = *self.group_of.get(image_id)?;
        self.row_of.get(&self.groups[g].representative_image_id).copied()
    }

    pub fn cluster_for_image(&self, image_id: &str) -> Option<usize> {
        self.row_for_image(image_id).map(|r| self.cluster_of_row[r])
    }

    fn check_cluster(&self, cluster: usize) -> Result<(), StoreError> {
        if cluster >= self.k() {
            return Err(StoreError::ClusterNotFound {
                round: self.info.round,
                cluster,
                k: self.k(),
            });
        }
        Ok(())
    }
}

struct ProjectHandle {
    dir: PathBuf,
    meta: RwLock<Project>,
    rounds: RwLock<BTreeMap<u32, Arc<RoundData>>>,
    tags: RwLock<TagLog>,
    /// Serializes round number reservation and metadata rewrites.
    meta_lock: Mutex<()>,
}

impl ProjectHandle {
    fn save_meta(&self, project: &Project) -> Result<(), StoreError> {
        write_atomic(&self.dir.join("project.json"), &serde_json::to_vec_pretty(project)?)
    }

    /// Apply `f` to the metadata and persist it.
    fn update_meta(&self, f: impl FnOnce(&mut Project)) -> Result<Project, StoreError> {
        let _guard = self.meta_lock.lock().expect("meta lock poisoned");
        let mut next = self.meta.read().expect("meta poisoned").clone();
        f(&mut next);
        self.save_meta(&next)?;
        *self.meta.write().expect("meta poisoned") = next.clone();
        Ok(next)
    }

    fn round_data(&self, round: u32) -> Result<Arc<RoundData>, StoreError> {
        if let Some(r) = self.rounds.read().expect("rounds poisoned").get(&round) {
            return Ok(r.clone());
        }
        let meta = self.meta.read().expect("meta poisoned");
        match meta.round(round) {
            Some(info) => Err(StoreError::RoundNotComplete {
                round,
                status: info.status,
            }),
            None => Err(StoreError::RoundNotFound(round)),
        }
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), StoreError> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Work left after a round number has been reserved. Dropping a ticket
/// without running it leaves the round `running` until the next restart
/// marks it failed.
pub struct RoundTicket {
    project: Arc<ProjectHandle>,
    thumbnails: ThumbnailCache,
    round: u32,
    k: usize,
    root: PathBuf,
    params: RoundParams,
    ingested: Ingested,
}

impl RoundTicket {
    pub fn round(&self) -> u32 {
        self.round
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// Run the remaining stages and record the outcome. Errors end up in
    /// the returned round's `failure`.
    pub fn run(self) -> RoundInfo {
        let round = self.round;
        let outcome = self.execute();
        let finished = Utc::now();
        let result = match outcome {
            Ok(data) => {
                let info = data.info.clone();
                self.project
                    .rounds
                    .write()
                    .expect("rounds poisoned")
                    .insert(round, Arc::new(data));
                self.project.update_meta(|p| {
                    if let Some(r) = p.rounds.iter_mut().find(|r| r.round == round) {
                        *r = info.clone();
                    }
                    p.current_round = Some(p.current_round.map_or(round, |c| c.max(round)));
                })
            }
            Err(failure) => {
                warn!(round, %failure, "round failed");
                self.project.update_meta(|p| {
                    if let Some(r) = p.rounds.iter_mut().find(|r| r.round == round) {
                        r.status = RoundStatus::Failed;
                        r.finished_at = Some(finished);
                        r.failure = Some(failure.clone());
                    }
                })
            }
        };
        match result {
            Ok(p) => p.round(round).cloned().expect("reserved round present"),
            Err(e) => {
                error!(round, error = %e, "cannot record round outcome");
                let mut info = self
                    .project
                    .meta
                    .read()
                    .expect("meta poisoned")
                    .round(round)
                    .cloned()
                    .expect("reserved round present");
                info.status = RoundStatus::Failed;
                info.failure = Some(StageFailure::new(Stage::Persist, e));
                info
            }
        }
    }

    fn execute(&self) -> Result<RoundData, StageFailure> {
        pipeline::render_thumbnails(&self.root, &self.ingested, &self.thumbnails);
        let representatives = self.ingested.representative_count();
        let artifacts = pipeline::compute(&self.root, self.ingested.clone(), &self.params, self.k)?;
        let mut info = self
            .project
            .meta
            .read()
            .expect("meta poisoned")
            .round(self.round)
            .cloned()
            .expect("reserved round present");
        info.status = RoundStatus::Complete;
        info.finished_at = Some(Utc::now());
        info.counts = Some(RoundCounts {
            images: artifacts.records.len(),
            clusterable: artifacts.records.iter().filter(|r| r.is_clusterable()).count(),
            representatives,
            embedded: artifacts.vectors.len(),
            embed_failures: artifacts.failures.len(),
        });

        let persist = |e: StoreError| StageFailure::new(Stage::Persist, e);
        let rounds_dir = self.project.dir.join("rounds");
        let staging = rounds_dir.join(format!(".{}.partial", self.round));
        let final_dir = rounds_dir.join(self.round.to_string());
        if staging.exists() {
            fs::remove_dir_all(&staging).map_err(|e| persist(e.into()))?;
        }
        RoundData::write_artifacts(&staging, &info, &artifacts).map_err(persist)?;
        fs::rename(&staging, &final_dir).map_err(|e| persist(e.into()))?;
        let data = RoundData::assemble(info, artifacts).map_err(persist)?;
        info!(round = self.round, k = self.k, "round complete");
        Ok(data)
    }
}

pub struct Store {
    data_dir: PathBuf,
    thumbnails: ThumbnailCache,
    projects: RwLock<BTreeMap<String, Arc<ProjectHandle>>>,
    create_lock: Mutex<()>,
}

impl Store {
    /// Open (creating if needed) the store under `data_dir` and load every
    /// project. Rounds left running by a previous process are marked failed.
    pub fn open(data_dir: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let data_dir = data_dir.into();
        fs::create_dir_all(data_dir.join("projects"))?;
        let thumbnails = ThumbnailCache::new(data_dir.join("thumbnails"))?;
        let mut projects = BTreeMap::new();
        let mut dirs: Vec<PathBuf> = fs::read_dir(data_dir.join("projects"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("project.json").is_file())
            .collect();
        dirs.sort();
        for dir in dirs {
            let handle = Self::load_project(&dir)?;
            let id = handle.meta.read().expect("meta poisoned").project_id.clone();
            projects.insert(id, Arc::new(handle));
        }
        info!(data_dir = %data_dir.display(), projects = projects.len(), "store opened");
        Ok(Self {
            data_dir,
            thumbnails,
            projects: RwLock::new(projects),
            create_lock: Mutex::new(()),
        })
    }

    fn load_project(dir: &Path) -> Result<ProjectHandle, StoreError> {
        let project: Project = serde_json::from_slice(&fs::read(dir.join("project.json"))?)?;
        let tags = TagLog::open(&dir.join("tags.jsonl"))?;
        let handle = ProjectHandle {
            dir: dir.to_path_buf(),
            meta: RwLock::new(project.clone()),
            rounds: RwLock::new(BTreeMap::new()),
            tags: RwLock::new(tags),
            meta_lock: Mutex::new(()),
        };
        let mut interrupted = false;
        for info in &project.rounds {
            match info.status {
                RoundStatus::Complete => {
                    let data = RoundData::load(&dir.join("rounds").join(info.round.to_string()), info.clone())?;
                    handle
                        .rounds
                        .write()
                        .expect("rounds poisoned")
                        .insert(info.round, Arc::new(data));
                }
                RoundStatus::Running => interrupted = true,
                RoundStatus::Failed => {}
            }
        }
        if interrupted {
            handle.update_meta(|p| {
                for r in p.rounds.iter_mut().filter(|r| r.status == RoundStatus::Running) {
                    r.status = RoundStatus::Failed;
                    r.failure = Some(StageFailure::new(Stage::Persist, "interrupted by shutdown"));
                }
            })?;
        }
        Ok(handle)
    }

    pub fn data_dir(&self) -> &Path {
        &self.data_dir
    }

    pub fn thumbnails(&self) -> &ThumbnailCache {
        &self.thumbnails
    }

    fn handle(&self, project_id: &str) -> Result<Arc<ProjectHandle>, StoreError> {
        self.projects
            .read()
            .expect("projects poisoned")
            .get(project_id)
            .cloned()
            .ok_or_else(|| StoreError::ProjectNotFound(project_id.to_string()))
    }

    pub fn create_project(&self, name: &str, corpus_root: &Path) -> Result<Project, StoreError> {
        let name = name.trim();
        if name.is_empty() {
            return Err(StoreError::EmptyName);
        }
        let unreadable = |e: std::io::Error| StoreError::CorpusUnreadable {
            path: corpus_root.to_path_buf(),
            message: e.to_string(),
        };
        let root = corpus_root.canonicalize().map_err(unreadable)?;
        fs::read_dir(&root).map_err(unreadable)?;

        let _guard = self.create_lock.lock().expect("create lock poisoned");
        if self.list_projects().iter().any(|p| p.name == name) {
            return Err(StoreError::DuplicateName(name.to_string()));
        }
        let project = Project {
            project_id: Uuid::new_v4().to_string(),
            name: name.to_string(),
            corpus_root: root,
            created_at: Utc::now(),
            rounds: Vec::new(),
            current_round: None,
        };
        let dir = self.data_dir.join("projects").join(&project.project_id);
        fs::create_dir_all(dir.join("rounds"))?;
        let handle = ProjectHandle {
            tags: RwLock::new(TagLog::open(&dir.join("tags.jsonl"))?),
            dir,
            meta: RwLock::new(project.clone()),
            rounds: RwLock::new(BTreeMap::new()),
            meta_lock: Mutex::new(()),
        };
        handle.save_meta(&project)?;
        self.projects
            .write()
            .expect("projects poisoned")
            .insert(project.project_id.clone(), Arc::new(handle));
        info!(project_id = %project.project_id, name, "project created");
        Ok(project)
    }

    pub fn list_projects(&self) -> Vec<Project> {
        self.projects
            .read()
            .expect("projects poisoned")
            .values()
            .map(|h| h.meta.read().expect("meta poisoned").clone())
            .collect()
    }

    pub fn project(&self, project_id: &str) -> Result<Project, StoreError> {
        Ok(self.handle(project_id)?.meta.read().expect("meta poisoned").clone())
    }

    pub fn round_info(&self, project_id: &str, round: u32) -> Result<RoundInfo, StoreError> {
        self.project(project_id)?
            .round(round)
            .cloned()
            .ok_or(StoreError::RoundNotFound(round))
    }

    pub fn round(&self, project_id: &str, round: u32) -> Result<Arc<RoundData>, StoreError> {
        self.handle(project_id)?.round_data(round)
    }

    /// Scan the corpus, check `k` and reserve the next round number. A
    /// scan failure is recorded as a failed round; a `k` larger than the
    /// representative count creates no round.
    pub fn start_round(&self, project_id: &str, params: RoundParams) -> Result<RoundTicket, StoreError> {
        params.validate().map_err(StoreError::InvalidParams)?;
        let project = self.handle(project_id)?;
        let root = project.meta.read().expect("meta poisoned").corpus_root.clone();
        let (ingested, failure, k) = match pipeline::ingest(&root, &params) {
            Ok(ing) => {
                let k = ing.effective_k(&params);
                let representatives = ing.representative_count();
                if k > representatives || k == 0 {
                    return Err(StoreError::KTooLarge { k, representatives });
                }
                (Some(ing), None, k)
            }
            Err(f) => (None, Some(f), params.k.unwrap_or(0)),
        };

        let now = Utc::now();
        let mut reserved = 0;
        project.update_meta(|p| {
            reserved = p.rounds.iter().map(|r| r.round).max().unwrap_or(0) + 1;
            p.rounds.push(RoundInfo {
                round: reserved,
                status: if failure.is_some() {
                    RoundStatus::Failed
                } else {
                    RoundStatus::Running
                },
                k,
                params: params.clone(),
                created_at: now,
                finished_at: failure.as_ref().map(|_| now),
                failure: failure.clone(),
                counts: None,
                manifest_ref: format!("rounds/{reserved}/manifest.jsonl"),
                model_ref: format!("rounds/{reserved}/model.kmeans"),
            });
        })?;
        match (ingested, failure) {
            (Some(ingested), None) => Ok(RoundTicket {
                project,
                thumbnails: self.thumbnails.clone(),
                round: reserved,
                k,
                root,
                params,
                ingested,
            }),
            (_, Some(f)) => Err(StoreError::Stage(f)),
            (None, None) => unreachable!("scan either succeeded or produced a failure"),
        }
    }

    /// Run a whole round on the calling thread.
    pub fn run_round(&self, project_id: &str, params: RoundParams) -> Result<RoundInfo, StoreError> {
        let info = self.start_round(project_id, params)?.run();
        match info.status {
            RoundStatus::Complete => Ok(info),
            _ => Err(StoreError::Stage(info.failure.unwrap_or_else(|| {
                StageFailure::new(Stage::Persist, "round did not complete")
            }))),
        }
    }

    pub fn tag_cluster(
        &self,
        project_id: &str,
        round: u32,
        cluster_index: usize,
        label: Label,
        note: &str,
        author: &str,
    ) -> Result<TagEvent, StoreError> {
        let project = self.handle(project_id)?;
        project.round_data(round)?.check_cluster(cluster_index)?;
        let event = project
            .tags
            .write()
            .expect("tags poisoned")
            .append(round, cluster_index, label, note, author)?;
        Ok(event)
    }

    pub fn tag_events(&self, project_id: &str) -> Result<Vec<TagEvent>, StoreError> {
        Ok(self.handle(project_id)?.tags.read().expect("tags poisoned").events().to_vec())
    }

    pub fn tag_log_path(&self, project_id: &str) -> Result<PathBuf, StoreError> {
        Ok(self.handle(project_id)?.tags.read().expect("tags poisoned").path().to_path_buf())
    }

    pub fn current_labels(&self, project_id: &str) -> Result<Vec<u8>, StoreError> {
        Ok(self
            .handle(project_id)?
            .tags
            .read()
            .expect("tags poisoned")
            .state()
            .canonical_bytes())
    }

    pub fn clusters(
        &self,
        project_id: &str,
        round: u32,
        sort: ClusterSort,
    ) -> Result<Vec<ClusterView>, StoreError> {
        let project = self.handle(project_id)?;
        let data = project.round_data(round)?;
        let tags = project.tags.read().expect("tags poisoned");
        let mut views: Vec<ClusterView> = data
            .summaries
            .iter()
            .map(|s| {
                let current = tags.state().get(round, s.cluster_index);
                ClusterView {
                    cluster_index: s.cluster_index,
                    size_images: s.size_total_images,
                    size_representatives: s.size_representatives,
                    medoid: s.medoid_image_id.as_deref().and_then(|id| data.image_ref(id)),
                    samples: s
                        .sample_image_ids
                        .iter()
                        .filter_map(|id| data.image_ref(id))
                        .collect(),
                    label: current.map(|c| c.label).unwrap_or(Label::Untagged),
                    note: current.map(|c| c.note.clone()).unwrap_or_default(),
                    history: tags.history(round, s.cluster_index),
                }
            })
            .collect();
        match sort {
            ClusterSort::Index => {}
            ClusterSort::SizeDesc => views.sort_by(|a, b| {
                b.size_images
                    .cmp(&a.size_images)
                    .then(a.cluster_index.cmp(&b.cluster_index))
            }),
            ClusterSort::SizeAsc => views.sort_by(|a, b| {
                a.size_images
                    .cmp(&b.size_images)
                    .then(a.cluster_index.cmp(&b.cluster_index))
            }),
        }
        Ok(views)
    }

    /// Images of a cluster, representatives by distance to the centroid,
    /// each followed by the rest of its dedup group.
    pub fn cluster_images(
        &self,
        project_id: &str,
        round: u32,
        cluster_index: usize,
        offset: usize,
        limit: usize,
    ) -> Result<ClusterImagesPage, StoreError> {
        let data = self.round(project_id, round)?;
        data.check_cluster(cluster_index)?;
        let limit = limit.clamp(1, MAX_PAGE_LIMIT);
        let mut total = 0;
        let mut images = Vec::new();
        for m in &data.members[cluster_index] {
            for id in data.group_members(&m.image_id) {
                if total >= offset && images.len() < limit {
                    if let Some(image) = data.image_ref(id) {
                        images.push(ClusterImage {
                            image,
                            distance: m.distance,
                            representative_image_id: m.image_id.clone(),
                        });
                    }
                }
                total += 1;
            }
        }
        Ok(ClusterImagesPage {
            cluster_index,
            offset,
            limit,
            total,
            images,
        })
    }

    /// The `k` images most similar to `image_id`: its duplicates first at
    /// distance 0, then the groups of the nearest representatives.
    /// `checks` overrides the round's search budget.
    pub fn similar_images(
        &self,
        project_id: &str,
        round: u32,
        image_id: &str,
        k: usize,
        checks: Option<usize>,
    ) -> Result<SimilarResult, StoreError> {
        let project = self.handle(project_id)?;
        let data = project.round_data(round)?;
        let query = data
            .image_ref(image_id)
            .ok_or_else(|| StoreError::ImageNotFound(image_id.to_string()))?;
        let row = data
            .row_for_image(image_id)
            .ok_or_else(|| StoreError::ImageNotIndexed(image_id.to_string()))?;
        let k = k.max(1);
        let tags = project.tags.read().expect("tags poisoned");
        let annotate = |id: &str, distance: f64, row: usize| {
            let cluster_index = data.cluster_of_row[row];
            data.image_ref(id).map(|image| SimilarImage {
                image,
                distance,
                cluster_index,
                label: tags.state().label(round, cluster_index),
            })
        };

        let mut neighbors: Vec<SimilarImage> = data
            .group_members(image_id)
            .iter()
            .filter(|id| id.as_str() != image_id)
            .filter_map(|id| annotate(id, 0.0, row))
            .collect();
        if neighbors.len() < k {
            let wanted = k - neighbors.len();
            let checks = checks.unwrap_or(data.info.params.ann.checks);
            let found = data
                .index
                .query_row(&data.vectors, row, wanted, checks)
                .map_err(|e| StoreError::Corrupt(e.to_string()))?;
            'outer: for n in found.neighbors {
                for id in data.group_members(data.rep_of_row(n.row)) {
                    if neighbors.len() >= k {
                        break 'outer;
                    }
                    if let Some(s) = annotate(id, n.distance, n.row) {
                        neighbors.push(s);
                    }
                }
            }
        }
        neighbors.truncate(k);
        Ok(SimilarResult {
            round,
            query,
            k,
            neighbors,
        })
    }

    pub fn report(&self, project_id: &str, round: u32) -> Result<CategorizationReport, StoreError> {
        let project = self.handle(project_id)?;
        let data = project.round_data(round)?;
        let tags = project.tags.read().expect("tags poisoned");
        Ok(build_report(&ReportInputs {
            round,
            records: &data.records,
            groups: &data.groups,
            summaries: &data.summaries,
            failed_representatives: &data.failed_reps,
            tags: tags.state(),
        })?)
    }

    pub fn stats(&self, project_id: &str) -> Result<ProjectStats, StoreError> {
        let project = self.handle(project_id)?;
        let meta = project.meta.read().expect("meta poisoned").clone();
        let mut rounds = Vec::new();
        for info in &meta.rounds {
            let events: Vec<TagEvent> = project
                .tags
                .read()
                .expect("tags poisoned")
                .events()
                .iter()
                .filter(|e| e.round == info.round)
                .cloned()
                .collect();
            let mut stats = RoundStats {
                round: info.round,
                status: info.status,
                clusters_total: 0,
                clusters_tagged: 0,
                clusters_untagged: 0,
                clusters_by_label: BTreeMap::new(),
                images: None,
                images_resolved: 0,
                images_pending: 0,
                tag_events: events.len(),
                first_tag_at: events.iter().map(|e| e.timestamp).min(),
                last_tag_at: events.iter().map(|e| e.timestamp).max(),
            };
            if info.status == RoundStatus::Complete {
                let report = self.report(project_id, info.round)?;
                stats.clusters_total = report.rows.len();
                for row in &report.rows {
                    *stats.clusters_by_label.entry(row.label).or_default() += 1;
                }
                stats.clusters_untagged = stats
                    .clusters_by_label
                    .get(&Label::Untagged)
                    .copied()
                    .unwrap_or(0);
                stats.clusters_tagged = stats.clusters_total - stats.clusters_untagged;
                let t = report.totals;
                stats.images_resolved = t.images_responsive + t.images_not_responsive;
                stats.images_pending = t.images_further_review + t.images_untagged;
                stats.images = Some(t);
            }
            rounds.push(stats);
        }
        Ok(ProjectStats {
            project_id: meta.project_id,
            current_round: meta.current_round,
            rounds,
        })
    }
}
