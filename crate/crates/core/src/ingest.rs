//! Corpus scanning, byte-exact deduplication and high-frequency triage.
//!
//! A scan produces one [`ImageRecord`] per candidate file, sorted by path.
//! Byte-identical files share a content hash and therefore a dedup group;
//! the group's representative is the only member that gets embedded.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use image::ImageReader;
use md5::Md5;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use tracing::{debug, warn};
use walkdir::WalkDir;

/// Extensions scanned when no explicit allow-list is given.
pub const DEFAULT_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg", "gif", "bmp", "tiff"];

/// Format tag stored for files that could not be read or decoded.
pub const INVALID_FORMAT: &str = "invalid";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot read corpus root {path}: {source}")]
    UnreadableRoot { path: PathBuf, source: io::Error },
    #[error("frequency threshold must be at least 2, got {0}")]
    ThresholdTooLow(usize),
    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },
    #[error("tally: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Digest used for content hashes.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HashAlgorithm {
    #[default]
    Sha256,
    Md5,
}

impl HashAlgorithm {
    pub fn digest_hex(self, bytes: &[u8]) -> String {
        match self {
            HashAlgorithm::Sha256 => hex::encode(Sha256::digest(bytes)),
            HashAlgorithm::Md5 => hex::encode(Md5::digest(bytes)),
        }
    }
}

impl std::str::FromStr for HashAlgorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sha256" => Ok(HashAlgorithm::Sha256),
            "md5" => Ok(HashAlgorithm::Md5),
            other => Err(format!("unknown hash algorithm '{other}' (expected sha256 or md5)")),
        }
    }
}

/// Why a record is left out of clustering.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exclusion {
    #[default]
    None,
    HighFrequency,
    Invalid,
}

/// One physical file of the corpus.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    /// Relative to the corpus root, `/`-separated.
    pub path: String,
    pub byte_size: u64,
    pub content_hash: String,
    pub format: String,
    pub width: u32,
    pub height: u32,
    /// Shared by byte-identical files; `None` for invalid records.
    pub dedup_group_id: Option<String>,
    pub excluded: Exclusion,
}

impl ImageRecord {
    pub fn is_valid(&self) -> bool {
        self.excluded != Exclusion::Invalid
    }

    /// Valid and not removed by triage.
    pub fn is_clusterable(&self) -> bool {
        self.excluded == Exclusion::None
    }
}

#[derive(Debug, Clone)]
pub struct ScanOptions {
    pub recurse: bool,
    pub extensions: Vec<String>,
    pub hash: HashAlgorithm,
}

impl Default for ScanOptions {
    fn default() -> Self {
        Self {
            recurse: true,
            extensions: DEFAULT_EXTENSIONS.iter().map(|s| s.to_string()).collect(),
            hash: HashAlgorithm::Sha256,
        }
    }
}

/// Stable identifier derived from the relative path, so ids survive rescans
/// of a growing corpus.
pub fn image_id_for_path(rel_path: &str) -> String {
    let digest = Sha256::digest(rel_path.as_bytes());
    format!("img-{}", &hex::encode(digest)[..16])
}

fn relative_path(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

fn has_allowed_extension(path: &Path, extensions: &[String]) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| extensions.iter().any(|allowed| allowed.eq_ignore_ascii_case(e)))
        .unwrap_or(false)
}

/// Decoded format tag and dimensions, or `None` if the bytes do not decode.
pub fn probe_image(bytes: &[u8]) -> Option<(String, u32, u32)> {
    let reader = ImageReader::new(io::Cursor::new(bytes))
        .with_guessed_format()
        .ok()?;
    let format = reader.format()?;
    let img = reader.decode().ok()?;
    let tag = format.extensions_str().first().copied().unwrap_or("unknown");
    Some((tag.to_string(), img.width(), img.height()))
}

fn scan_file(root: &Path, path: &Path, hash: HashAlgorithm) -> ImageRecord {
    let rel = relative_path(root, path);
    let image_id = image_id_for_path(&rel);
    let invalid = |byte_size: u64, content_hash: String| ImageRecord {
        image_id: image_id.clone(),
        path: rel.clone(),
        byte_size,
        content_hash,
        format: INVALID_FORMAT.to_string(),
        width: 0,
        height: 0,
        dedup_group_id: None,
        excluded: Exclusion::Invalid,
    };

    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) => {
            warn!(path = %rel, error = %e, "unreadable file marked invalid");
            return invalid(0, String::new());
        }
    };
    let content_hash = hash.digest_hex(&bytes);
    match probe_image(&bytes) {
        Some((format, width, height)) => ImageRecord {
            image_id: image_id.clone(),
            path: rel.clone(),
            byte_size: bytes.len() as u64,
            dedup_group_id: Some(content_hash.clone()),
            content_hash,
            format,
            width,
            height,
            excluded: Exclusion::None,
        },
        None => {
            debug!(path = %rel, "undecodable file marked invalid");
            invalid(bytes.len() as u64, content_hash)
        }
    }
}

/// Scan `root` for image files; output is sorted by relative path.
pub fn scan_corpus(root: &Path, options: &ScanOptions) -> Result<Vec<ImageRecord>, IngestError> {
    fs::read_dir(root).map_err(|source| IngestError::UnreadableRoot {
        path: root.to_path_buf(),
        source,
    })?;

    let max_depth = if options.recurse { usize::MAX } else { 1 };
    let mut paths = Vec::new();
    for entry in WalkDir::new(root).max_depth(max_depth) {
        let entry = match entry {
            Ok(e) => e,
            Err(e) => {
                warn!(error = %e, "skipping unreadable directory entry");
                continue;
            }
        };
        if entry.file_type().is_file() && has_allowed_extension(entry.path(), &options.extensions)
        {
            paths.push(entry.into_path());
        }
    }

    let mut records: Vec<ImageRecord> = paths
        .par_iter()
        .map(|p| scan_file(root, p, options.hash))
        .collect();
    records.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(records)
}

/// A set of byte-identical valid files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DedupGroup {
    pub group_id: String,
    pub content_hash: String,
    pub representative_image_id: String,
    /// Sorted by path.
    pub member_ids: Vec<String>,
    pub frequency: usize,
}

/// Partition valid records by content hash. Groups come out frequency
/// descending, content hash ascending.
pub fn deduplicate(records: &[ImageRecord]) -> Vec<DedupGroup> {
    let mut by_hash: BTreeMap<&str, Vec<&ImageRecord>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.is_valid()) {
        by_hash.entry(&r.content_hash).or_default().push(r);
    }
    let mut groups: Vec<DedupGroup> = by_hash
        .into_iter()
        .map(|(hash, mut members)| {
            members.sort_by(|a, b| a.path.cmp(&b.path));
            DedupGroup {
                group_id: members[0]
                    .dedup_group_id
                    .clone()
                    .unwrap_or_else(|| hash.to_string()),
                content_hash: hash.to_string(),
                representative_image_id: members[0].image_id.clone(),
                frequency: members.len(),
                member_ids: members.iter().map(|m| m.image_id.clone()).collect(),
            }
        })
        .collect();
    groups.sort_by(|a, b| {
        b.frequency
            .cmp(&a.frequency)
            .then_with(|| a.content_hash.cmp(&b.content_hash))
    });
    groups
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TallyRow {
    pub content_hash: String,
    pub byte_size: u64,
    pub frequency: usize,
    pub sample_path: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrequencyTally {
    pub rows: Vec<TallyRow>,
}

pub fn tally_frequencies(groups: &[DedupGroup], records: &[ImageRecord]) -> FrequencyTally {
    let by_id: BTreeMap<&str, &ImageRecord> =
        records.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut rows: Vec<TallyRow> = groups
        .iter()
        .map(|g| {
            let rep = by_id.get(g.representative_image_id.as_str());
            TallyRow {
                content_hash: g.content_hash.clone(),
                byte_size: rep.map(|r| r.byte_size).unwrap_or(0),
                frequency: g.frequency,
                sample_path: rep.map(|r| r.path.clone()).unwrap_or_default(),
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        b.frequency
            .cmp(&a.frequency)
            .then_with(|| a.content_hash.cmp(&b.content_hash))
    });
    FrequencyTally { rows }
}

impl FrequencyTally {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), IngestError> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        w.write_record(["content_hash", "byte_size", "frequency", "sample_path"])?;
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self, IngestError> {
        let mut r = csv::Reader::from_reader(input);
        let rows = r.deserialize().collect::<Result<Vec<TallyRow>, _>>()?;
        Ok(Self { rows })
    }
}

/// Which dedup groups the frequency triage removes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ExclusionRule {
    MinFrequency(usize),
    Hashes(BTreeSet<String>),
}

/// Mark every member of a matching group `high_frequency`. Records are never
/// dropped, and invalid records keep their tag.
pub fn exclude_high_frequency(
    groups: &[DedupGroup],
    records: &[ImageRecord],
    rule: &ExclusionRule,
) -> Result<Vec<ImageRecord>, IngestError> {
    let matching: BTreeSet<&str> = match rule {
        ExclusionRule::MinFrequency(t) if *t < 2 => return Err(IngestError::ThresholdTooLow(*t)),
        ExclusionRule::MinFrequency(t) => groups
            .iter()
            .filter(|g| g.frequency >= *t)
            .map(|g| g.content_hash.as_str())
            .collect(),
        ExclusionRule::Hashes(hashes) => groups
            .iter()
            .filter(|g| hashes.contains(&g.content_hash))
            .map(|g| g.content_hash.as_str())
            .collect(),
    };
    Ok(records
        .iter()
        .map(|r| {
            let mut r = r.clone();
            if r.is_valid() && matching.contains(r.content_hash.as_str()) {
                r.excluded = Exclusion::HighFrequency;
            }
            r
        })
        .collect())
}

/// Counts that must reconcile with the number of scanned files.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestTotals {
    pub total: usize,
    pub clusterable: usize,
    pub high_frequency: usize,
    pub invalid: usize,
}

pub fn manifest_totals(records: &[ImageRecord]) -> ManifestTotals {
    let mut t = ManifestTotals {
        total: records.len(),
        ..Default::default()
    };
    for r in records {
        match r.excluded {
            Exclusion::None => t.clusterable += 1,
            Exclusion::HighFrequency => t.high_frequency += 1,
            Exclusion::Invalid => t.invalid += 1,
        }
    }
    t
}

/// Manifest: one JSON object per line, in manifest (path) order.
pub fn write_manifest<W: Write>(records: &[ImageRecord], out: W) -> Result<(), IngestError> {
    write_json_lines(records, out)
}

pub fn read_manifest<R: Read>(input: R) -> Result<Vec<ImageRecord>, IngestError> {
    read_json_lines(input)
}

pub fn write_manifest_file(records: &[ImageRecord], path: &Path) -> Result<(), IngestError> {
    write_manifest(records, fs::File::create(path)?)
}

pub fn read_manifest_file(path: &Path) -> Result<Vec<ImageRecord>, IngestError> {
    read_manifest(fs::File::open(path)?)
}

pub fn write_groups<W: Write>(groups: &[DedupGroup], out: W) -> Result<(), IngestError> {
    write_json_lines(groups, out)
}

pub fn read_groups<R: Read>(input: R) -> Result<Vec<DedupGroup>, IngestError> {
    read_json_lines(input)
}

fn write_json_lines<T: Serialize, W: Write>(items: &[T], out: W) -> Result<(), IngestError> {
    let mut w = BufWriter::new(out);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn read_json_lines<T: for<'de> Deserialize<'de>, R: Read>(input: R) -> Result<Vec<T>, IngestError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| IngestError::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn png_bytes(w: u32, h: u32, seed: u8) -> Vec<u8> {
        let img = RgbImage::from_fn(w, h, |x, y| {
            Rgb([seed, (x as u8).wrapping_mul(3), (y as u8).wrapping_add(seed)])
        });
        let mut buf = io::Cursor::new(Vec::new());
        img.write_to(&mut buf, image::ImageFormat::Png).unwrap();
        buf.into_inner()
    }

    fn record(path: &str, hash: &str) -> ImageRecord {
        ImageRecord {
            image_id: image_id_for_path(path),
            path: path.to_string(),
            byte_size: 10,
            content_hash: hash.to_string(),
            format: "png".into(),
            width: 1,
            height: 1,
            dedup_group_id: Some(hash.to_string()),
            excluded: Exclusion::None,
        }
    }

    #[test]
    fn empty_directory_scans_to_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let records = scan_corpus(dir.path(), &ScanOptions::default()).unwrap();
        assert!(records.is_empty());
    }

    #[test]
    fn missing_root_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let err = scan_corpus(&dir.path().join("nope"), &ScanOptions::default()).unwrap_err();
        assert!(matches!(err, IngestError::UnreadableRoot { .. }));
    }

    #[test]
    fn truncated_jpeg_is_invalid() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.png"), png_bytes(64, 64, 1)).unwrap();
        let img = RgbImage::from_pixel(32, 32, Rgb([200, 10, 10]));
        let mut jpg = io::Cursor::new(Vec::new());
        img.write_to(&mut jpg, image::ImageFormat::Jpeg).unwrap();
        let jpg = jpg.into_inner();
        fs::write(dir.path().join("b.jpg"), &jpg[..jpg.len() / 3]).unwrap();

        let records = scan_corpus(dir.path(), &ScanOptions::default()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].path, "a.png");
        assert_eq!((records[0].width, records[0].height), (64, 64));
        assert_eq!(records[0].excluded, Exclusion::None);
        assert_eq!(records[1].format, INVALID_FORMAT);
        assert_eq!(records[1].excluded, Exclusion::Invalid);
        assert!(records[1].dedup_group_id.is_none());
        // independent decode attempt agrees
        assert!(image::load_from_memory(&jpg[..jpg.len() / 3]).is_err());
        assert!(image::load_from_memory(&png_bytes(64, 64, 1)).is_ok());
    }

    #[test]
    fn identical_bytes_share_hash_and_group() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        let bytes = png_bytes(8, 8, 7);
        fs::write(dir.path().join("x.png"), &bytes).unwrap();
        fs::write(dir.path().join("sub/y.png"), &bytes).unwrap();
        fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let records = scan_corpus(dir.path(), &ScanOptions::default()).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].content_hash, records[1].content_hash);
        assert_eq!(records[0].dedup_group_id, records[1].dedup_group_id);
        assert_eq!(records[0].path, "sub/y.png");

        let shallow = ScanOptions {
            recurse: false,
            ..Default::default()
        };
        assert_eq!(scan_corpus(dir.path(), &shallow).unwrap().len(), 1);
    }

    #[test]
    fn md5_mode_matches_reference_digest() {
        assert_eq!(
            HashAlgorithm::Md5.digest_hex(b"abc"),
            "900150983cd24fb0d6963f7d28e17f72"
        );
        assert_eq!(
            HashAlgorithm::Sha256.digest_hex(b"abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn dedup_three_files_two_identical() {
        let records = vec![record("a", "h1"), record("b", "h2"), record("c", "h1")];
        let groups = deduplicate(&records);
        assert_eq!(groups.len(), 2);
        assert_eq!(groups[0].frequency, 2);
        assert_eq!(groups[0].representative_image_id, image_id_for_path("a"));
        assert_eq!(groups[1].frequency, 1);
    }

    #[test]
    fn dedup_ignores_invalid_and_handles_empty() {
        assert!(deduplicate(&[]).is_empty());
        let mut bad = record("z", "h9");
        bad.excluded = Exclusion::Invalid;
        let groups = deduplicate(&[record("a", "h1"), bad]);
        assert_eq!(groups.len(), 1);
    }

    #[test]
    fn representative_is_smallest_path() {
        let records = vec![record("m/2.png", "h"), record("a/9.png", "h"), record("m/1.png", "h")];
        let groups = deduplicate(&records);
        assert_eq!(groups[0].representative_image_id, image_id_for_path("a/9.png"));
    }

    #[test]
    fn tally_puts_logo_first() {
        let mut records: Vec<_> = (0..500).map(|i| record(&format!("logo{i:03}"), "ff")).collect();
        records.extend((0..20).map(|i| record(&format!("u{i}"), &format!("{i:02}"))));
        let groups = deduplicate(&records);
        let tally = tally_frequencies(&groups, &records);
        assert_eq!(tally.rows[0].content_hash, "ff");
        assert_eq!(tally.rows[0].frequency, 500);
        assert_eq!(tally.rows[0].sample_path, "logo000");
        assert!(tally.rows[1..].iter().all(|r| r.frequency == 1));
        let total: usize = tally.rows.iter().map(|r| r.frequency).sum();
        assert_eq!(total, 520);

        let excluded =
            exclude_high_frequency(&groups, &records, &ExclusionRule::MinFrequency(100)).unwrap();
        assert_eq!(
            excluded.iter().filter(|r| r.excluded == Exclusion::HighFrequency).count(),
            500
        );
        let again =
            exclude_high_frequency(&groups, &excluded, &ExclusionRule::MinFrequency(100)).unwrap();
        assert_eq!(again, excluded);
    }

    #[test]
    fn tally_csv_header() {
        let tally = tally_frequencies(&deduplicate(&[record("a", "h1")]), &[record("a", "h1")]);
        let mut buf = Vec::new();
        tally.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("content_hash,byte_size,frequency,sample_path\n"));
        assert_eq!(FrequencyTally::read_csv(&buf[..]).unwrap(), tally);
        assert!(tally_frequencies(&[], &[]).rows.is_empty());
    }

    #[test]
    fn exclusion_rules() {
        let records = vec![record("a", "h1"), record("b", "h1"), record("c", "h2")];
        let groups = deduplicate(&records);
        assert!(matches!(
            exclude_high_frequency(&groups, &records, &ExclusionRule::MinFrequency(1)),
            Err(IngestError::ThresholdTooLow(1))
        ));
        let none =
            exclude_high_frequency(&groups, &records, &ExclusionRule::Hashes(BTreeSet::new()))
                .unwrap();
        assert_eq!(none, records);
        let by_hash = exclude_high_frequency(
            &groups,
            &records,
            &ExclusionRule::Hashes(["h2".to_string()].into()),
        )
        .unwrap();
        assert_eq!(by_hash[2].excluded, Exclusion::HighFrequency);
        let t = manifest_totals(&by_hash);
        assert_eq!(t.clusterable + t.high_frequency + t.invalid, t.total);
    }

    #[test]
    fn manifest_round_trip() {
        let records = vec![record("a", "h1"), record("b", "h2")];
        let mut buf = Vec::new();
        write_manifest(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 2);
        assert!(text.contains("\"excluded\":\"none\""));
        assert_eq!(read_manifest(&buf[..]).unwrap(), records);
        assert!(matches!(
            read_manifest(&b"{bad"[..]),
            Err(IngestError::Manifest { line: 1, .. })
        ));
    }
}
