#![allow(dead_code)]

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::{ImageFormat, Rgb, RgbImage};
use imagetar_core::embedding::EmbedderConfig;
use imagetar_review::{RoundParams, Store};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// File counts for a generated corpus. `duplicates` extra files are byte
/// copies of randomly chosen unique images.
#[derive(Debug, Clone, Copy)]
pub struct CorpusSpec {
    pub unique: usize,
    pub duplicates: usize,
    pub invalid: usize,
    pub themes: usize,
    pub edge: u32,
    pub seed: u64,
}

impl CorpusSpec {
    pub fn files(&self) -> usize {
        self.unique + self.duplicates + self.invalid
    }
}

#[derive(Debug, Clone)]
pub struct Generated {
    /// Relative path of every unique image, in generation order.
    pub unique_paths: Vec<String>,
    /// (copy path, original path)
    pub duplicate_of: Vec<(String, String)>,
    pub invalid_paths: Vec<String>,
}

/// A blocky image: theme colour with a diagonal gradient whose direction
/// depends on the theme, plus per-image noise so no two are identical.
pub fn themed_image(theme: usize, themes: usize, edge: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let t = theme as f32 / themes.max(1) as f32;
    let base = [
        (255.0 * t) as i32,
        (255.0 * (1.0 - t)) as i32,
        (128.0 + 127.0 * (std::f32::consts::TAU * t).sin()) as i32,
    ];
    let horizontal = theme.is_multiple_of(2);
    RgbImage::from_fn(edge, edge, |x, y| {
        let ramp = if horizontal { x } else { y } as i32 * 96 / edge as i32;
        let mut px = [0u8; 3];
        for (c, v) in px.iter_mut().enumerate() {
            let noise = rng.random_range(-12..=12);
            *v = (base[c] + ramp + noise).clamp(0, 255) as u8;
        }
        Rgb(px)
    })
}

pub fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut out = Vec::new();
    img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png)
        .expect("png encode");
    out
}

pub fn write_corpus(root: &Path, spec: &CorpusSpec) -> Generated {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut unique_paths = Vec::with_capacity(spec.unique);
    let mut bytes_of = Vec::with_capacity(spec.unique);
    for i in 0..spec.unique {
        let theme = i % spec.themes.max(1);
        let rel = format!("theme{theme:03}/img{i:05}.png");
        let bytes = png_bytes(&themed_image(theme, spec.themes, spec.edge, &mut rng));
        let path = root.join(&rel);
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(&path, &bytes).unwrap();
        unique_paths.push(rel);
        bytes_of.push(bytes);
    }
    let mut duplicate_of = Vec::with_capacity(spec.duplicates);
    fs::create_dir_all(root.join("copies")).unwrap();
    for i in 0..spec.duplicates {
        let src = rng.random_range(0..spec.unique);
        let rel = format!("copies/copy{i:05}.png");
        fs::write(root.join(&rel), &bytes_of[src]).unwrap();
        duplicate_of.push((rel, unique_paths[src].clone()));
    }
    let mut invalid_paths = Vec::with_capacity(spec.invalid);
    fs::create_dir_all(root.join("broken")).unwrap();
    for i in 0..spec.invalid {
        let rel = format!("broken/bad{i:04}.png");
        let len = rng.random_range(0..64);
        let junk: Vec<u8> = (0..len).map(|_| rng.random()).collect();
        fs::write(root.join(&rel), junk).unwrap();
        invalid_paths.push(rel);
    }
    Generated {
        unique_paths,
        duplicate_of,
        invalid_paths,
    }
}

/// Round parameters sized for tests: a small embedding unless `dim` says
/// otherwise.
pub fn params(k: usize, seed: u64, dim: usize) -> RoundParams {
    RoundParams {
        k: Some(k),
        seed,
        embedder: EmbedderConfig {
            dim,
            ..Default::default()
        },
        ..Default::default()
    }
}

pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub corpus: PathBuf,
    pub data: PathBuf,
    pub generated: Generated,
    pub store: Arc<Store>,
    pub project_id: String,
}

/// Corpus on disk, an open store and a project over the corpus.
pub fn fixture(spec: &CorpusSpec) -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    let data = dir.path().join("data");
    fs::create_dir_all(&corpus).unwrap();
    let generated = write_corpus(&corpus, spec);
    let store = Arc::new(Store::open(&data).unwrap());
    let project_id = store.create_project("fixture", &corpus).unwrap().project_id;
    Fixture {
        dir,
        corpus,
        data,
        generated,
        store,
        project_id,
    }
}

pub fn small_spec(seed: u64) -> CorpusSpec {
    CorpusSpec {
        unique: 60,
        duplicates: 12,
        invalid: 3,
        themes: 6,
        edge: 32,
        seed,
    }
}
