//! PNG thumbnails keyed by content hash, rendered once and kept on disk.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use image::ImageFormat;
use thiserror::Error;

pub const MAX_EDGE: u32 = 256;

#[derive(Debug, Error)]
pub enum ThumbnailError {
    #[error("'{0}' is not a content hash")]
    BadKey(String),
    #[error("cannot decode image: {0}")]
    Decode(#[from] image::ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Scale so the longer edge is at most [`MAX_EDGE`]; smaller images keep
/// their size.
pub fn render_thumbnail(bytes: &[u8]) -> Result<Vec<u8>, ThumbnailError> {
    let img = image::load_from_memory(bytes)?;
    let img = if img.width().max(img.height()) > MAX_EDGE {
        img.resize(MAX_EDGE, MAX_EDGE, FilterType::Triangle)
    } else {
        img
    };
    let mut out = Vec::new();
    img.to_rgba8()
        .write_to(&mut Cursor::new(&mut out), ImageFormat::Png)?;
    Ok(out)
}

fn valid_key(hash: &str) -> bool {
    !hash.is_empty() && hash.len() <= 128 && hash.bytes().all(|b| b.is_ascii_hexdigit())
}

#[derive(Debug, Clone)]
pub struct ThumbnailCache {
    dir: PathBuf,
}

impl ThumbnailCache {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self, ThumbnailError> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self { dir })
    }

    pub fn path_for(&self, hash: &str) -> Result<PathBuf, ThumbnailError> {
        if !valid_key(hash) {
            return Err(ThumbnailError::BadKey(hash.to_string()));
        }
        Ok(self.dir.join(format!("{}.png", hash.to_ascii_lowercase())))
    }

    /// Render `source` under `hash` unless a thumbnail already exists.
    pub fn ensure(&self, hash: &str, source: &Path) -> Result<PathBuf, ThumbnailError> {
        let path = self.path_for(hash)?;
        if path.exists() {
            return Ok(path);
        }
        let png = render_thumbnail(&fs::read(source)?)?;
        let tmp = path.with_extension(format!("png.{}.tmp", std::process::id()));
        fs::write(&tmp, png)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn get(&self, hash: &str) -> Result<Option<Vec<u8>>, ThumbnailError> {
        match fs::read(self.path_for(hash)?) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn png(w: u32, h: u32) -> Vec<u8> {
        let img = RgbImage::from_pixel(w, h, Rgb([10, 20, 30]));
        let mut out = Vec::new();
        img.write_to(&mut Cursor::new(&mut out), ImageFormat::Png).unwrap();
        out
    }

    #[test]
    fn long_edge_is_capped() {
        let t = image::load_from_memory(&render_thumbnail(&png(1000, 500)).unwrap()).unwrap();
        assert_eq!((t.width(), t.height()), (256, 128));
        let t = image::load_from_memory(&render_thumbnail(&png(40, 30)).unwrap()).unwrap();
        assert_eq!((t.width(), t.height()), (40, 30));
    }

    #[test]
    fn cache_round_trip_and_key_check() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ThumbnailCache::new(dir.path().join("thumbs")).unwrap();
        let src = dir.path().join("a.png");
        fs::write(&src, png(300, 300)).unwrap();
        assert!(cache.get("abc123").unwrap().is_none());
        cache.ensure("abc123", &src).unwrap();
        assert!(cache.get("abc123").unwrap().is_some());
        assert!(matches!(cache.get("../etc"), Err(ThumbnailError::BadKey(_))));
        fs::write(&src, b"not an image").unwrap();
        assert!(cache.ensure("abc123", &src).is_ok());
        assert!(cache.ensure("def", &src).is_err());
    }
}
