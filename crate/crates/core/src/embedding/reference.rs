//! Deterministic block-statistics embedder used when no neural model is
//! plugged in.
//!
//! The raster is cut into a `GRID_BLOCKS x GRID_BLOCKS` grid of pixel cells.
//! Each cell contributes its mean R, G, B and a 4-bin gradient orientation
//! histogram (0, 45, 90, 135 degrees, magnitude weighted). Gradients are
//! taken inside the cell only, so changing one pixel can only move the
//! features of the cells containing it. The base feature vector is tiled
//! or truncated to the requested dimension.

use std::f32::consts::PI;

use image::RgbImage;

use super::{l2_normalize, BatchEmbedder, EmbedError, EmbedItem, Normalize};

pub const GRID_BLOCKS: u32 = 16;
pub const FEATURES_PER_BLOCK: usize = 7;

fn cell_range(index: u32, extent: u32) -> (u32, u32) {
    let start = (index as u64 * extent as u64 / GRID_BLOCKS as u64) as u32;
    let end = ((index as u64 + 1) * extent as u64 / GRID_BLOCKS as u64) as u32;
    let start = start.min(extent - 1);
    (start, end.max(start + 1).min(extent))
}

fn luma(img: &RgbImage, x: u32, y: u32) -> f32 {
    let p = img.get_pixel(x, y).0;
    (0.299 * p[0] as f32 + 0.587 * p[1] as f32 + 0.114 * p[2] as f32) / 255.0
}

/// Base features: `GRID_BLOCKS^2 * FEATURES_PER_BLOCK` values, block-major
/// in row order.
pub fn reference_features(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let mut out = Vec::with_capacity((GRID_BLOCKS * GRID_BLOCKS) as usize * FEATURES_PER_BLOCK);
    for by in 0..GRID_BLOCKS {
        let (y0, y1) = cell_range(by, h);
        for bx in 0..GRID_BLOCKS {
            let (x0, x1) = cell_range(bx, w);
            let mut rgb = [0f64; 3];
            let mut bins = [0f32; 4];
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = img.get_pixel(x, y).0;
                    for c in 0..3 {
                        rgb[c] += p[c] as f64;
                    }
                    let gx = luma(img, (x + 1).min(x1 - 1), y) - luma(img, x.max(x0 + 1) - 1, y);
                    let gy = luma(img, x, (y + 1).min(y1 - 1)) - luma(img, x, y.max(y0 + 1) - 1);
                    let mag = (gx * gx + gy * gy).sqrt();
                    if mag > 0.0 {
                        let mut theta = gy.atan2(gx);
                        if theta < 0.0 {
                            theta += PI;
                        }
                        let bin = ((theta / (PI / 4.0)).round() as usize) % 4;
                        bins[bin] += mag;
                    }
                }
            }
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            for c in rgb {
                out.push((c / n / 255.0) as f32);
            }
            for b in bins {
                out.push((b as f64 / n) as f32);
            }
        }
    }
    out
}

/// Embed a decoded raster into `dim` values. `dim` must be a positive
/// multiple of 8.
pub fn embed_reference(img: &RgbImage, dim: usize) -> Result<Vec<f32>, EmbedError> {
    if dim < 8 || !dim.is_multiple_of(8) {
        return Err(EmbedError::BadDim(dim));
    }
    if img.width() == 0 || img.height() == 0 {
        return Err(EmbedError::Image {
            image_id: String::new(),
            message: "empty raster".into(),
        });
    }
    let base = reference_features(img);
    Ok((0..dim).map(|i| base[i % base.len()]).collect())
}

#[derive(Debug, Clone)]
pub struct ReferenceEmbedder {
    pub dim: usize,
    pub normalize: Normalize,
}

impl ReferenceEmbedder {
    pub fn new(dim: usize, normalize: Normalize) -> Result<Self, EmbedError> {
        if dim < 8 || !dim.is_multiple_of(8) {
            return Err(EmbedError::BadDim(dim));
        }
        Ok(Self { dim, normalize })
    }

    pub fn embed_bytes(&self, image_id: &str, bytes: &[u8]) -> Result<Vec<f32>, EmbedError> {
        let img = image::load_from_memory(bytes).map_err(|e| EmbedError::Image {
            image_id: image_id.to_string(),
            message: e.to_string(),
        })?;
        let mut v = embed_reference(&img.to_rgb8(), self.dim).map_err(|e| match e {
            EmbedError::Image { message, .. } => EmbedError::Image {
                image_id: image_id.to_string(),
                message,
            },
            other => other,
        })?;
        if self.normalize == Normalize::L2 {
            l2_normalize(&mut v);
        }
        Ok(v)
    }
}

impl BatchEmbedder for ReferenceEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, items: &[EmbedItem]) -> Result<Vec<Vec<f32>>, EmbedError> {
        items
            .iter()
            .map(|item| {
                let bytes = std::fs::read(&item.path).map_err(|e| EmbedError::Image {
                    image_id: item.image_id.clone(),
                    message: e.to_string(),
                })?;
                self.embed_bytes(&item.image_id, &bytes)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::Rgb;

    const BASE: usize = (GRID_BLOCKS * GRID_BLOCKS) as usize * FEATURES_PER_BLOCK;

    fn noisy(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| {
            let v = (x * 37 + y * 91 + x * y) % 256;
            Rgb([v as u8, (v * 3 % 256) as u8, (255 - v) as u8])
        })
    }

    #[test]
    fn black_image_is_all_zero() {
        let img = RgbImage::new(40, 30);
        let v = embed_reference(&img, 4096).unwrap();
        assert_eq!(v.len(), 4096);
        assert!(v.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn uniform_color_has_no_edges() {
        let img = RgbImage::from_pixel(33, 17, Rgb([255, 0, 51]));
        let f = reference_features(&img);
        for block in f.chunks(FEATURES_PER_BLOCK) {
            assert_eq!(block[0], 1.0);
            assert_eq!(block[1], 0.0);
            assert!((block[2] - 0.2).abs() < 1e-6);
            assert!(block[3..].iter().all(|x| *x == 0.0));
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let img = noisy(64, 48);
        let a = embed_reference(&img, 4096).unwrap();
        let b = embed_reference(&img.clone(), 4096).unwrap();
        assert_eq!(
            a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn one_pixel_change_stays_in_its_block() {
        let a = noisy(64, 64);
        let mut b = a.clone();
        // 64 px over 16 blocks: pixel (21, 9) lives in block (5, 2)
        b.put_pixel(21, 9, Rgb([0, 255, 0]));
        let fa = reference_features(&a);
        let fb = reference_features(&b);
        let changed: Vec<usize> = fa
            .chunks(FEATURES_PER_BLOCK)
            .zip(fb.chunks(FEATURES_PER_BLOCK))
            .enumerate()
            .filter(|(_, (x, y))| x != y)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(changed, vec![2 * GRID_BLOCKS as usize + 5]);
    }

    #[test]
    fn tiny_images_still_fill_every_block() {
        let img = noisy(3, 5);
        let f = reference_features(&img);
        assert_eq!(f.len(), BASE);
        assert!(f.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn tiling_and_truncation() {
        let img = noisy(20, 20);
        let base = reference_features(&img);
        let long = embed_reference(&img, 4096).unwrap();
        assert_eq!(&long[BASE..BASE + 10], &base[..10]);
        let short = embed_reference(&img, 64).unwrap();
        assert_eq!(&short[..], &base[..64]);
        assert!(matches!(embed_reference(&img, 12), Err(EmbedError::BadDim(12))));
    }

    #[test]
    fn undecodable_bytes_name_the_image() {
        let e = ReferenceEmbedder::new(64, Normalize::None).unwrap();
        match e.embed_bytes("img-7", b"not an image") {
            Err(EmbedError::Image { image_id, .. }) => assert_eq!(image_id, "img-7"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
