//! Image ingestion, normalization to `[-1, 1]`, seeded cropping and batching.
//!
//! # Random streams
//!
//! All randomness comes from ChaCha8 (`rand_chacha::ChaCha8Rng`) seeded with
//! `seed_from_u64(seed)`. Crops draw from stream 0 of that generator; the
//! record order of epoch `e` is a Fisher-Yates shuffle driven by stream
//! `e + 1`. An index in `0..n` is drawn from one `u64` word `x` as
//! `(x * n) >> 64` (128-bit product), and shuffles swap `i` with such an index
//! in `0..=i` for `i` from `n - 1` down to `1`.

pub mod pnm;

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};
use pnm::{decode_pgm, encode_pgm, GrayImage, PgmError};

/// 8-bit grey level to `[-1, 1]`.
#[inline]
pub fn normalize(level: f64) -> f64 {
    level / 127.5 - 1.0
}

/// `[-1, 1]` back to the nearest 8-bit grey level, clamped.
#[inline]
pub fn denormalize(value: f64) -> u8 {
    ((value + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// BT.601 luma.
#[inline]
pub fn luma(r: u8, g: u8, b: u8) -> f64 {
    0.299 * r as f64 + 0.587 * g as f64 + 0.114 * b as f64
}

/// One greyscale image scaled to `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub path: PathBuf,
    /// `1 x 1 x H x W`.
    pub pixels: Tensor<f32>,
}

impl ImageRecord {
    pub fn from_levels(path: impl Into<PathBuf>, width: usize, height: usize, levels: &[f64]) -> Result<Self> {
        let data = levels.iter().map(|&v| normalize(v) as f32).collect();
        Ok(ImageRecord {
            path: path.into(),
            pixels: Tensor::from_vec([1, 1, height, width], data)?,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    /// File stem used as the image label in reports.
    pub fn name(&self) -> String {
        self.path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.path.display().to_string())
    }
}

fn pgm_error(path: &Path, err: PgmError) -> Error {
    match err {
        PgmError::Malformed(reason) => Error::Format {
            path: path.to_path_buf(),
            reason,
        },
        PgmError::Unsupported(reason) => Error::Unsupported {
            path: path.to_path_buf(),
            reason,
        },
    }
}

fn load_png(path: &Path, bytes: &[u8]) -> Result<ImageRecord> {
    let format = |reason: String| Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut decoder = png::Decoder::new(std::io::Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| format(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| format(e.to_string()))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Unsupported {
            path: path.to_path_buf(),
            reason: format!("{:?}-bit PNG", info.bit_depth),
        });
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => {
            return Err(Error::Unsupported {
                path: path.to_path_buf(),
                reason: format!("PNG color type {other:?}"),
            })
        }
    };
    let mut levels = Vec::with_capacity(width * height);
    for row in buf.chunks(info.line_size).take(height) {
        for px in row[..width * channels].chunks(channels) {
            levels.push(if channels >= 3 {
                luma(px[0], px[1], px[2])
            } else {
                px[0] as f64
            });
        }
    }
    ImageRecord::from_levels(path, width, height, &levels)
}

/// Reads a binary PGM (or an 8-bit PNG) and scales it to `[-1, 1]`.
///
/// Colour PNGs are converted with BT.601 luma before scaling.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageRecord> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    if bytes.starts_with(b"\x89PNG") {
        return load_png(path, &bytes);
    }
    if bytes.starts_with(b"P") {
        let img = decode_pgm(&bytes).map_err(|e| pgm_error(path, e))?;
        let levels: Vec<f64> = img.pixels.iter().map(|&v| v as f64).collect();
        return ImageRecord::from_levels(path, img.width, img.height, &levels);
    }
    Err(Error::Unsupported {
        path: path.to_path_buf(),
        reason: "not a PGM or PNG file".into(),
    })
}

fn is_image_file(path: &Path) -> bool {
    path.is_file()
        && path
            .extension()
            .and_then(|e| e.to_str())
            .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "pgm" | "png"))
}

/// Loads every `.pgm`/`.png` file in `dir`, sorted by path.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<ImageRecord>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir.as_ref())?
        .map(|entry| entry.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| is_image_file(p));
    paths.sort();
    paths.par_iter().map(load_image).collect()
}

/// Writes a `1 x 1 x H x W` tensor in `[-1, 1]` as an 8-bit PGM.
pub fn save_pgm<T: Scalar>(image: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    if image.batch() != 1 || image.channels() != 1 {
        return Err(Error::shape("saved image batch x channels", 1, image.batch() * image.channels()));
    }
    let gray = GrayImage {
        width: image.width(),
        height: image.height(),
        pixels: image.data().iter().map(|v| denormalize(v.as_f64())).collect(),
    };
    fs::write(path, encode_pgm(&gray))?;
    Ok(())
}

/// Index in `0..n` from one 64-bit word.
#[inline]
pub(crate) fn uniform_index(rng: &mut impl RngCore, n: usize) -> usize {
    ((rng.next_u64() as u128 * n as u128) >> 64) as usize
}

/// A `crop x crop` window at a uniformly random top-left corner.
pub fn random_crop(record: &ImageRecord, crop: usize, rng: &mut impl RngCore) -> Result<Tensor<f32>> {
    let (h, w) = (record.height(), record.width());
    if crop == 0 || h < crop || w < crop {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            crop,
        });
    }
    let top = uniform_index(rng, h - crop + 1);
    let left = uniform_index(rng, w - crop + 1);
    Ok(crop_at(&record.pixels, top, left, crop, crop))
}

pub(crate) fn crop_at<T: Scalar>(image: &Tensor<T>, top: usize, left: usize, height: usize, width: usize) -> Tensor<T> {
    Tensor::from_fn([image.batch(), image.channels(), height, width], |[n, c, h, w]| {
        image.at(n, c, top + h, left + w)
    })
}

/// Crops to the largest centered extents divisible by `block`.
///
/// Returns the crop and whether anything was removed.
pub fn center_crop_to_multiple<T: Scalar>(image: &Tensor<T>, block: usize) -> Result<(Tensor<T>, bool)> {
    let (h, w) = (image.height(), image.width());
    let (ch, cw) = (h / block * block, w / block * block);
    if ch == 0 || cw == 0 {
        return Err(Error::TooSmall {
            height: h,
            width: w,
            crop: block,
        });
    }
    if (ch, cw) == (h, w) {
        return Ok((image.clone(), false));
    }
    Ok((crop_at(image, (h - ch) / 2, (w - cw) / 2, ch, cw), true))
}

fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch + 1);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = uniform_index(&mut rng, i + 1);
        order.swap(i, j);
    }
    order
}

/// Resumable position of a [`BatchIterator`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IteratorState {
    pub seed: u64,
    pub epoch: u64,
    pub cursor: u64,
    /// Word position of the crop stream.
    pub crop_word_pos: u128,
}

/// Endless batches of random crops; record order is reshuffled every pass.
///
/// The last batch of a pass keeps the leftover records, so a pass over `n`
/// records with batch size `T` yields `ceil(n / T)` batches.
#[derive(Debug, Clone)]
pub struct BatchIterator {
    records: Arc<Vec<ImageRecord>>,
    crop: usize,
    batch_size: usize,
    seed: u64,
    epoch: u64,
    cursor: usize,
    order: Vec<usize>,
    crop_rng: ChaCha8Rng,
}

impl BatchIterator {
    pub fn new(records: Arc<Vec<ImageRecord>>, crop: usize, batch_size: usize, seed: u64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        for r in records.iter() {
            if crop == 0 || r.height() < crop || r.width() < crop {
                return Err(Error::TooSmall {
                    height: r.height(),
                    width: r.width(),
                    crop,
                });
            }
        }
        let order = epoch_order(seed, 0, records.len());
        Ok(BatchIterator {
            records,
            crop,
            batch_size,
            seed,
            epoch: 0,
            cursor: 0,
            order,
            crop_rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn restore(records: Arc<Vec<ImageRecord>>, crop: usize, batch_size: usize, state: IteratorState) -> Result<Self> {
        let mut it = Self::new(records, crop, batch_size, state.seed)?;
        if state.cursor as usize >= it.records.len() {
            return Err(Error::checkpoint("iterator.cursor", "beyond dataset size"));
        }
        it.epoch = state.epoch;
        it.cursor = state.cursor as usize;
        it.order = epoch_order(state.seed, state.epoch, it.records.len());
        it.crop_rng.set_word_pos(state.crop_word_pos);
        Ok(it)
    }

    pub fn state(&self) -> IteratorState {
        IteratorState {
            seed: self.seed,
            epoch: self.epoch,
            cursor: self.cursor as u64,
            crop_word_pos: self.crop_rng.get_word_pos(),
        }
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.records.len().div_ceil(self.batch_size)
    }

    /// `T x 1 x crop x crop`.
    pub fn next_batch(&mut self) -> Result<Tensor<f32>> {
        let end = (self.cursor + self.batch_size).min(self.records.len());
        let crops = self.order[self.cursor..end]
            .iter()
            .map(|&i| random_crop(&self.records[i], self.crop, &mut self.crop_rng))
            .collect::<Result<Vec<_>>>()?;
        self.cursor = end;
        if self.cursor == self.records.len() {
            self.cursor = 0;
            self.epoch += 1;
            self.order = epoch_order(self.seed, self.epoch, self.records.len());
        }
        Tensor::stack(&crops)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(h: usize, w: usize, offset: f64) -> ImageRecord {
        let levels: Vec<f64> = (0..h * w).map(|i| ((i as f64 + offset) % 256.0).floor()).collect();
        ImageRecord::from_levels(format!("r{offset}.pgm"), w, h, &levels).unwrap()
    }

    #[test]
    fn normalization_endpoints() {
        assert_eq!(normalize(0.0), -1.0);
        assert_eq!(normalize(255.0), 1.0);
        assert!((normalize(128.0) - 0.003921568627).abs() < 1e-9);
        assert!((normalize(luma(255, 0, 0)) - (-0.402)).abs() < 1e-12);
    }

    #[test]
    fn normalization_round_trips_every_level() {
        for v in 0..=255u8 {
            assert_eq!(denormalize(normalize(v as f64)), v);
            assert_eq!(denormalize(normalize(v as f64) as f32 as f64), v);
        }
    }

    #[test]
    fn crop_of_exact_size_is_whole_image() {
        let r = record(8, 8, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&r, 8, &mut rng).unwrap(), r.pixels);
    }

    #[test]
    fn crop_too_small_reports_extents() {
        let r = record(4, 6, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = random_crop(&r, 5, &mut rng).unwrap_err();
        assert!(err.to_string().contains("4x6"), "{err}");
    }

    #[test]
    fn crop_is_seed_deterministic() {
        let r = record(20, 20, 0.0);
        let a = random_crop(&r, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = random_crop(&r, 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_corners_reach_both_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let span = 512 - 256 + 1;
        let (mut saw_zero, mut saw_max) = (false, false);
        for _ in 0..10_000 {
            let top = uniform_index(&mut rng, span);
            let left = uniform_index(&mut rng, span);
            saw_zero |= top == 0 || left == 0;
            saw_max |= top == 256 || left == 256;
            assert!(top <= 256 && left <= 256);
        }
        assert!(saw_zero && saw_max);
    }

    #[test]
    fn single_record_batch() {
        let r = record(8, 8, 3.0);
        let mut it = BatchIterator::new(Arc::new(vec![r.clone()]), 8, 1, 0).unwrap();
        assert_eq!(it.next_batch().unwrap(), r.pixels);
    }

    #[test]
    fn tail_batch_is_kept() {
        let recs = Arc::new(vec![record(8, 8, 0.0), record(8, 8, 1.0), record(8, 8, 2.0)]);
        let mut it = BatchIterator::new(recs, 8, 2, 4).unwrap();
        let sizes: Vec<usize> = (0..4).map(|_| it.next_batch().unwrap().batch()).collect();
        assert_eq!(sizes, vec![2, 1, 2, 1]);
        assert_eq!(it.epoch(), 2);
    }

    #[test]
    fn every_record_once_per_epoch() {
        let recs: Vec<_> = (0..5).map(|i| record(4, 4, 50.0 * i as f64)).collect();
        let mut it = BatchIterator::new(Arc::new(recs.clone()), 4, 2, 1).unwrap();
        let mut seen: Vec<f32> = (0..3)
            .flat_map(|_| {
                let b = it.next_batch().unwrap();
                (0..b.batch()).map(move |n| b.at(n, 0, 0, 0)).collect::<Vec<_>>()
            })
            .collect();
        let mut expected: Vec<f32> = recs.iter().map(|r| r.pixels.at(0, 0, 0, 0)).collect();
        seen.sort_by(f32::total_cmp);
        expected.sort_by(f32::total_cmp);
        assert_eq!(seen, expected);
    }

    #[test]
    fn same_seed_same_batches_and_restore() {
        let recs: Arc<Vec<_>> = Arc::new((0..3).map(|i| record(12, 12, 7.0 * i as f64)).collect());
        let mut a = BatchIterator::new(recs.clone(), 8, 2, 5).unwrap();
        let mut b = BatchIterator::new(recs.clone(), 8, 2, 5).unwrap();
        for _ in 0..3 {
            assert_eq!(a.next_batch().unwrap(), b.next_batch().unwrap());
        }
        let mut resumed = BatchIterator::restore(recs, 8, 2, a.state()).unwrap();
        for _ in 0..4 {
            assert_eq!(a.next_batch().unwrap(), resumed.next_batch().unwrap());
        }
    }

    #[test]
    fn empty_dataset_rejected() {
        assert!(matches!(
            BatchIterator::new(Arc::new(vec![]), 8, 2, 0),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn center_crop() {
        let t = Tensor::<f32>::from_fn([1, 1, 10, 7], |[_, _, h, w]| (h * 10 + w) as f32);
        let (c, cropped) = center_crop_to_multiple(&t, 4).unwrap();
        assert!(cropped);
        assert_eq!(c.shape(), [1, 1, 8, 4]);
        assert_eq!(c.at(0, 0, 0, 0), 11.0);
        let (same, cropped) = center_crop_to_multiple(&c, 4).unwrap();
        assert!(!cropped);
        assert_eq!(same, c);
    }
}
