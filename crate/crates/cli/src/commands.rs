use std::collections::{BTreeSet, HashSet};
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use imagetar_core::ann::{exact_knn, precision_at_k, AnnIndex, AnnParams};
use imagetar_core::embedding::{
    embed_all, read_vectors_file, representative_items, to_vector_set, write_vectors_file,
    BatchEmbedder, ExternalEmbedder, FailedImage, Normalize, ReferenceEmbedder,
};
use imagetar_core::ingest::{
    deduplicate, exclude_high_frequency, manifest_totals, read_groups, read_manifest_file,
    scan_corpus, tally_frequencies, write_groups, write_manifest_file, DedupGroup, ExclusionRule,
    ImageRecord, ScanOptions,
};
use imagetar_core::kmeans::{
    default_k, kmeans_fit, read_model_file, summarize_clusters, write_model_file, KMeansParams,
    DEFAULT_SAMPLE_SIZE,
};
use imagetar_core::vectors::VectorSet;
use imagetar_review::report::{build_report, ReportInputs};
use imagetar_review::tags::read_events;
use imagetar_review::{Store, TagState};
use serde::Serialize;
use thiserror::Error;
use tracing::{info, warn};

use crate::{
    ClusterArgs, Cli, Command, DedupArgs, EmbedArgs, EmbedWorkerArgs, ExcludeArgs, ForestArgs,
    KnnArgs, NormalizeArg, PrecisionArgs, ReportArgs, ReportFormat, ScanArgs, ServeArgs, TallyArgs,
};

const CORPUS_ROOT_FILE: &str = "corpus_root.txt";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Invalid(_) => 1,
            CliError::Failed(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn failed<E: Display>(context: impl Display) -> impl FnOnce(E) -> CliError {
    move |e| CliError::Failed(format!("{context}: {e}"))
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Invalid(msg.into())
}

fn check(cond: bool, msg: &str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(invalid(msg))
    }
}

/// Input and output locations, defaulting into the data directory.
struct Files {
    data: PathBuf,
}

impl Files {
    fn at(&self, given: &Option<PathBuf>, name: &str) -> PathBuf {
        given.clone().unwrap_or_else(|| self.data.join(name))
    }
}

fn create_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => {
            fs::create_dir_all(p).map_err(failed(format!("creating {}", p.display())))
        }
        _ => Ok(()),
    }
}

fn load_manifest(path: &Path) -> Result<Vec<ImageRecord>> {
    read_manifest_file(path).map_err(failed(format!("reading manifest {}", path.display())))
}

fn load_groups(path: &Path) -> Result<Vec<DedupGroup>> {
    let f = File::open(path).map_err(failed(format!("reading groups {}", path.display())))?;
    read_groups(BufReader::new(f)).map_err(failed(format!("reading groups {}", path.display())))
}

fn load_vectors(path: &Path) -> Result<VectorSet> {
    read_vectors_file(path).map_err(failed(format!("reading vectors {}", path.display())))
}

fn load_failures(path: &Path) -> Result<Vec<FailedImage>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let text =
        fs::read_to_string(path).map_err(failed(format!("reading failures {}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(failed(format!("reading failures {}", path.display()))))
        .collect()
}

fn write_json_lines<T: Serialize>(items: &[T], path: &Path) -> Result<()> {
    create_parent(path)?;
    let ctx = || format!("writing {}", path.display());
    let mut w = BufWriter::new(File::create(path).map_err(failed(ctx()))?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(failed(ctx()))?;
        w.write_all(b"\n").map_err(failed(ctx()))?;
    }
    w.flush().map_err(failed(ctx()))
}

fn normalize(arg: NormalizeArg) -> Normalize {
    match arg {
        NormalizeArg::None => Normalize::None,
        NormalizeArg::L2 => Normalize::L2,
    }
}

fn forest_params(args: &ForestArgs, seed: u64) -> Result<AnnParams> {
    check(args.trees > 0, "--trees must be at least 1")?;
    check(args.leaf_size > 0, "--leaf-size must be at least 1")?;
    check(args.checks > 0, "--checks must be at least 1")?;
    Ok(AnnParams {
        tree_count: args.trees,
        leaf_size: args.leaf_size,
        checks: args.checks,
        seed,
    })
}

pub fn run(cli: Cli) -> Result<()> {
    fs::create_dir_all(&cli.data_dir)
        .map_err(failed(format!("creating data directory {}", cli.data_dir.display())))?;
    let files = Files {
        data: cli.data_dir.clone(),
    };
    match cli.command {
        Command::Scan(a) => scan(&files, a),
        Command::Dedup(a) => dedup(&files, a),
        Command::Tally(a) => tally(&files, a),
        Command::Exclude(a) => exclude(&files, a),
        Command::Embed(a) => embed(&files, a),
        Command::Cluster(a) => cluster(&files, a, cli.seed),
        Command::Knn(a) => knn(&files, a, cli.seed),
        Command::Precision(a) => precision(&files, a, cli.seed),
        Command::Report(a) => report(&files, a),
        Command::Serve(a) => serve(&files, a),
        Command::EmbedWorker(a) => embed_worker(a),
    }
}

fn scan(files: &Files, a: ScanArgs) -> Result<()> {
    check(a.corpus.is_dir(), "corpus root is not a readable directory")?;
    let mut options = ScanOptions {
        recurse: !a.no_recurse,
        hash: a.hash,
        ..ScanOptions::default()
    };
    if let Some(ext) = a.extensions {
        check(!ext.is_empty(), "--extensions must name at least one extension")?;
        options.extensions = ext.into_iter().map(|e| e.trim_start_matches('.').to_string()).collect();
    }
    let root = a
        .corpus
        .canonicalize()
        .map_err(failed(format!("resolving {}", a.corpus.display())))?;
    let records = scan_corpus(&root, &options).map_err(failed("scan"))?;
    let out = files.at(&a.out, "manifest.jsonl");
    create_parent(&out)?;
    write_manifest_file(&records, &out).map_err(failed(format!("writing {}", out.display())))?;
    fs::write(files.data.join(CORPUS_ROOT_FILE), format!("{}\n", root.display()))
        .map_err(failed("recording corpus root"))?;
    let t = manifest_totals(&records);
    info!(files = t.total, invalid = t.invalid, out = %out.display(), "scan complete");
    Ok(())
}

fn dedup(files: &Files, a: DedupArgs) -> Result<()> {
    let records = load_manifest(&files.at(&a.manifest, "manifest.jsonl"))?;
    let groups = deduplicate(&records);
    let out = files.at(&a.out, "groups.jsonl");
    create_parent(&out)?;
    let f = File::create(&out).map_err(failed(format!("writing {}", out.display())))?;
    write_groups(&groups, f).map_err(failed(format!("writing {}", out.display())))?;
    info!(groups = groups.len(), out = %out.display(), "dedup complete");
    Ok(())
}

fn tally(files: &Files, a: TallyArgs) -> Result<()> {
    let records = load_manifest(&files.at(&a.manifest, "manifest.jsonl"))?;
    let groups = load_groups(&files.at(&a.groups, "groups.jsonl"))?;
    let table = tally_frequencies(&groups, &records);
    let out = files.at(&a.out, "tally.csv");
    create_parent(&out)?;
    let f = File::create(&out).map_err(failed(format!("writing {}", out.display())))?;
    table.write_csv(f).map_err(failed(format!("writing {}", out.display())))?;
    info!(rows = table.rows.len(), out = %out.display(), "tally complete");
    Ok(())
}

fn exclude(files: &Files, a: ExcludeArgs) -> Result<()> {
    let mut rules = Vec::new();
    if let Some(t) = a.min_frequency {
        check(t >= 2, "--min-frequency must be at least 2")?;
        rules.push(ExclusionRule::MinFrequency(t));
    }
    if let Some(path) = &a.hashes {
        let f = File::open(path).map_err(failed(format!("reading {}", path.display())))?;
        let mut hashes = BTreeSet::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(failed(format!("reading {}", path.display())))?;
            let h = line.trim();
            if !h.is_empty() && !h.starts_with('#') {
                hashes.insert(h.to_ascii_lowercase());
            }
        }
        rules.push(ExclusionRule::Hashes(hashes));
    }
    let manifest = files.at(&a.manifest, "manifest.jsonl");
    let mut records = load_manifest(&manifest)?;
    let groups = load_groups(&files.at(&a.groups, "groups.jsonl"))?;
    for rule in &rules {
        records = exclude_high_frequency(&groups, &records, rule)
            .map_err(|e| invalid(e.to_string()))?;
    }
    let out = a.out.clone().unwrap_or(manifest);
    create_parent(&out)?;
    write_manifest_file(&records, &out).map_err(failed(format!("writing {}", out.display())))?;
    let t = manifest_totals(&records);
    info!(excluded = t.high_frequency, out = %out.display(), "exclusion complete");
    Ok(())
}

fn corpus_root(files: &Files, given: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(root) = given {
        return Ok(root.clone());
    }
    let recorded = files.data.join(CORPUS_ROOT_FILE);
    let text = fs::read_to_string(&recorded).map_err(|_| {
        invalid("no --corpus given and no corpus root recorded by scan in the data directory")
    })?;
    Ok(PathBuf::from(text.trim_end_matches(['\n', '\r'])))
}

fn embed(files: &Files, a: EmbedArgs) -> Result<()> {
    check(a.batch_size > 0, "--batch-size must be at least 1")?;
    check(a.dim >= 2, "--dim must be at least 2")?;
    if a.external.is_none() {
        check(a.dim.is_multiple_of(8), "--dim must be a multiple of 8 for the reference embedder")?;
    }
    let root = corpus_root(files, &a.corpus)?;
    check(root.is_dir(), "corpus root is not a readable directory")?;
    let records = load_manifest(&files.at(&a.manifest, "manifest.jsonl"))?;
    let groups = load_groups(&files.at(&a.groups, "groups.jsonl"))?;

    let embedder: Box<dyn BatchEmbedder> = match &a.external {
        None => Box::new(
            ReferenceEmbedder::new(a.dim, normalize(a.normalize)).map_err(|e| invalid(e.to_string()))?,
        ),
        Some(command) => Box::new(ExternalEmbedder {
            command: command.clone(),
            dim: a.dim,
            workdir: root.clone(),
            records: Arc::new(records.clone()),
        }),
    };
    let items = representative_items(&records, &groups, &root);
    let result = embed_all(&items, embedder.as_ref(), a.batch_size);
    let vectors = to_vector_set(&items, &result, a.dim).map_err(failed("embedding"))?;

    let out = files.at(&a.out, "vectors.fvec");
    create_parent(&out)?;
    write_vectors_file(&vectors, &out).map_err(failed(format!("writing {}", out.display())))?;
    let mut failures = result.failed.clone();
    failures.sort_by(|x, y| x.image_id.cmp(&y.image_id));
    write_json_lines(&failures, &files.at(&a.failures, "failures.jsonl"))?;
    if !failures.is_empty() {
        warn!(failed = failures.len(), "some images could not be embedded");
    }
    info!(
        embedded = vectors.len(),
        failed = failures.len(),
        calls = result.attempts,
        out = %out.display(),
        "embedding complete"
    );
    Ok(())
}

fn cluster(files: &Files, a: ClusterArgs, seed: u64) -> Result<()> {
    if let Some(k) = a.k {
        check(k >= 1, "--k must be at least 1")?;
    }
    check(a.max_iters >= 1, "--max-iters must be at least 1")?;
    check(a.tol.is_finite() && a.tol >= 0.0, "--tol must be a non-negative number")?;
    let vectors = load_vectors(&files.at(&a.vectors, "vectors.fvec"))?;
    check(!vectors.is_empty(), "the vectors file is empty; nothing to cluster")?;
    let k = a.k.unwrap_or_else(|| default_k(vectors.len()));
    if k > vectors.len() {
        return Err(invalid(format!("--k {k} exceeds the {} embedded images", vectors.len())));
    }
    let params = KMeansParams {
        max_iters: a.max_iters,
        tol: a.tol,
        ..KMeansParams::new(k, seed)
    };
    let model = kmeans_fit(&vectors, &params).map_err(failed("k-means"))?;
    let out = files.at(&a.out, "model.kmeans");
    create_parent(&out)?;
    write_model_file(&model, &out).map_err(failed(format!("writing {}", out.display())))?;

    let manifest = files.at(&a.manifest, "manifest.jsonl");
    let groups = files.at(&a.groups, "groups.jsonl");
    if manifest.exists() && groups.exists() {
        let records = load_manifest(&manifest)?;
        let groups = load_groups(&groups)?;
        let summaries = summarize_clusters(&model, &vectors, &records, &groups, a.sample_size);
        let path = files.at(&a.summaries, "summaries.json");
        create_parent(&path)?;
        let bytes = serde_json::to_vec_pretty(&summaries).map_err(failed("summaries"))?;
        fs::write(&path, bytes).map_err(failed(format!("writing {}", path.display())))?;
    }
    info!(
        k,
        inertia = model.inertia,
        iterations = model.iterations_run,
        out = %out.display(),
        "clustering complete"
    );
    Ok(())
}

#[derive(Serialize)]
struct KnnRow<'a> {
    rank: usize,
    row: usize,
    ordinal: u64,
    image_id: &'a str,
    distance: f64,
}

/// Vector row for an image id, going through its duplicate group when the
/// image itself was not embedded.
fn row_for_image(
    image: &str,
    vectors: &VectorSet,
    records: &[ImageRecord],
    groups: &[DedupGroup],
) -> Result<usize> {
    let ordinal_of = |id: &str| records.iter().position(|r| r.image_id == id);
    let Some(ordinal) = ordinal_of(image) else {
        return Err(invalid(format!("image {image} is not in the manifest")));
    };
    if let Some(row) = vectors.position_of(ordinal as u64) {
        return Ok(row);
    }
    groups
        .iter()
        .find(|g| g.member_ids.iter().any(|m| m == image))
        .and_then(|g| ordinal_of(&g.representative_image_id))
        .and_then(|o| vectors.position_of(o as u64))
        .ok_or_else(|| invalid(format!("image {image} has no vector (excluded, invalid or failed)")))
}

fn knn(files: &Files, a: KnnArgs, seed: u64) -> Result<()> {
    check(a.k >= 1, "--k must be at least 1")?;
    let params = forest_params(&a.forest, seed)?;
    let vectors = load_vectors(&files.at(&a.vectors, "vectors.fvec"))?;
    let manifest = files.at(&a.manifest, "manifest.jsonl");
    let records = if manifest.exists() {
        load_manifest(&manifest)?
    } else {
        Vec::new()
    };
    let row = match (&a.image, a.row) {
        (Some(image), _) => {
            let groups = files.at(&a.groups, "groups.jsonl");
            let groups = if groups.exists() {
                load_groups(&groups)?
            } else {
                Vec::new()
            };
            row_for_image(image, &vectors, &records, &groups)?
        }
        (None, Some(row)) => row,
        (None, None) => return Err(invalid("give --image or --row")),
    };
    if row >= vectors.len() {
        return Err(invalid(format!("--row {row} outside the {} vectors", vectors.len())));
    }
    let neighbors = if a.exact {
        exact_knn(&vectors, row, a.k).map_err(failed("exact search"))?
    } else {
        let index = AnnIndex::build(&vectors, &params).map_err(failed("building index"))?;
        index
            .query_row(&vectors, row, a.k, params.checks)
            .map_err(failed("query"))?
    };

    let out = files.at(&a.out, "knn.csv");
    create_parent(&out)?;
    let ctx = || format!("writing {}", out.display());
    let mut w = csv::Writer::from_path(&out).map_err(failed(ctx()))?;
    for (i, n) in neighbors.neighbors.iter().enumerate() {
        let ordinal = vectors.ordinal(n.row);
        let image_id = records
            .get(ordinal as usize)
            .map(|r| r.image_id.as_str())
            .unwrap_or("");
        w.serialize(KnnRow {
            rank: i + 1,
            row: n.row,
            ordinal,
            image_id,
            distance: n.distance,
        })
        .map_err(failed(ctx()))?;
    }
    w.flush().map_err(failed(ctx()))?;
    info!(query_row = row, neighbors = neighbors.neighbors.len(), out = %out.display(), "knn complete");
    Ok(())
}

fn precision(files: &Files, a: PrecisionArgs, seed: u64) -> Result<()> {
    check(a.k >= 1, "--k must be at least 1")?;
    check(a.queries >= 1, "--queries must be at least 1")?;
    let params = forest_params(&a.forest, seed)?;
    let vectors = load_vectors(&files.at(&a.vectors, "vectors.fvec"))?;
    if a.k >= vectors.len() {
        return Err(invalid(format!(
            "--k {} needs more than {} vectors",
            a.k,
            vectors.len()
        )));
    }
    let index = AnnIndex::build(&vectors, &params).map_err(failed("building index"))?;
    let report = precision_at_k(&vectors, &index, a.k, a.queries, seed).map_err(failed("precision"))?;
    let out = files.at(&a.out, "precision.csv");
    create_parent(&out)?;
    fs::write(&out, report.to_csv()).map_err(failed(format!("writing {}", out.display())))?;
    info!(
        k = a.k,
        mean_first_half = report.mean_over(1, a.k.div_ceil(2)),
        similarity_matrix_bytes = %report.memory.similarity_matrix_bytes,
        index_bytes = report.memory.index_bytes,
        out = %out.display(),
        "precision complete"
    );
    Ok(())
}

fn report(files: &Files, a: ReportArgs) -> Result<()> {
    let records = load_manifest(&files.at(&a.manifest, "manifest.jsonl"))?;
    let groups = load_groups(&files.at(&a.groups, "groups.jsonl"))?;
    let vectors = load_vectors(&files.at(&a.vectors, "vectors.fvec"))?;
    let model_path = files.at(&a.model, "model.kmeans");
    let model =
        read_model_file(&model_path).map_err(failed(format!("reading model {}", model_path.display())))?;
    let failures = load_failures(&files.at(&a.failures, "failures.jsonl"))?;
    let failed_representatives: HashSet<String> =
        failures.into_iter().map(|f| f.image_id).collect();

    let tags_path = files.at(&a.tags, "tags.jsonl");
    let tags = if a.tags.is_some() || tags_path.exists() {
        let events =
            read_events(&tags_path).map_err(failed(format!("reading tags {}", tags_path.display())))?;
        TagState::replay(&events)
    } else {
        TagState::default()
    };
    let summaries = summarize_clusters(&model, &vectors, &records, &groups, DEFAULT_SAMPLE_SIZE);
    let report = build_report(&ReportInputs {
        round: a.round,
        records: &records,
        groups: &groups,
        summaries: &summaries,
        failed_representatives: &failed_representatives,
        tags: &tags,
    })
    .map_err(failed("report"))?;

    let (name, bytes) = match a.format {
        ReportFormat::Csv => ("report.csv", report.to_csv().map_err(failed("report"))?.into_bytes()),
        ReportFormat::Json => (
            "report.json",
            serde_json::to_vec_pretty(&report).map_err(failed("report"))?,
        ),
    };
    let out = files.at(&a.out, name);
    create_parent(&out)?;
    fs::write(&out, bytes).map_err(failed(format!("writing {}", out.display())))?;
    info!(clusters = report.rows.len(), images = report.corpus_images, out = %out.display(), "report complete");
    Ok(())
}

fn serve(files: &Files, a: ServeArgs) -> Result<()> {
    let store = Store::open(&files.data).map_err(failed("opening store"))?;
    let runtime = tokio::runtime::Runtime::new().map_err(failed("starting runtime"))?;
    runtime
        .block_on(imagetar_review::serve(Arc::new(store), a.addr))
        .map_err(failed(format!("serving on {}", a.addr)))
}

/// Embeds every manifest line with the reference embedder, resolving paths
/// against the working directory. Any unreadable image fails the whole call.
fn embed_worker(a: EmbedWorkerArgs) -> Result<()> {
    let embedder =
        ReferenceEmbedder::new(a.dim, normalize(a.normalize)).map_err(|e| invalid(e.to_string()))?;
    let records = load_manifest(&a.manifest)?;
    let mut data = Vec::with_capacity(records.len() * a.dim);
    for r in &records {
        let bytes = fs::read(&r.path).map_err(failed(format!("reading {}", r.path)))?;
        let v = embedder.embed_bytes(&r.image_id, &bytes).map_err(failed("embedding"))?;
        data.extend_from_slice(&v);
    }
    let vectors = VectorSet::new(a.dim, (0..records.len() as u64).collect(), data)
        .map_err(failed("packing vectors"))?;
    write_vectors_file(&vectors, &a.output).map_err(failed(format!("writing {}", a.output.display())))
}
