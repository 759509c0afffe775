//! Reconstruction quality metrics and rate x method comparison reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::pnm::{encode_pgm, GrayImage};
use crate::data::{center_crop_to_multiple, load_dir, ImageRecord};
use crate::error::{Error, Result};
use crate::model::{AnyModel, CsModel, Method};
use crate::tensor::{Scalar, Tensor};
use crate::train::Checkpoint;

/// Mean PSNR of the proposed method in the published comparison, by rate.
pub const PUBLISHED_MEAN_PSNR: [(f64, f64); 4] = [(0.01, 22.12), (0.04, 25.97), (0.10, 28.94), (0.25, 33.57)];

/// Published average margin over the strongest competitor, in dB.
pub const PUBLISHED_MARGIN_DB: f64 = 1.8;

fn to_levels(value: f64) -> f64 {
    ((value + 1.0) * 127.5).clamp(0.0, 255.0)
}

/// Peak signal-to-noise ratio in dB over the `[0, 255]` range.
///
/// Both inputs are in `[-1, 1]`; they are mapped to grey levels and
/// clamped (without rounding) before the squared error is taken.
/// Identical inputs give `f64::INFINITY`.
pub fn psnr<T: Scalar>(reference: &Tensor<T>, candidate: &Tensor<T>) -> Result<f64> {
    reference.ensure_same_shape(candidate, "psnr candidate")?;
    if reference.is_empty() {
        return Err(Error::Metric("psnr of an empty image".into()));
    }
    let sse: f64 = reference
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(r, c)| {
            let d = to_levels(r.as_f64()) - to_levels(c.as_f64());
            d * d
        })
        .sum();
    let mse = sse / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (255.0f64 * 255.0 / mse).log10())
}

/// Ratio of the mean absolute step across block boundaries to the mean
/// absolute step between neighbours inside blocks.
///
/// Both horizontal and vertical neighbour pairs count. Equal means give
/// exactly 1.0 (including the all-flat case); a flat interior with a
/// non-flat boundary gives `f64::INFINITY`.
pub fn blockiness_index<T: Scalar>(image: &Tensor<T>, block: usize) -> Result<f64> {
    let (h, w) = (image.height(), image.width());
    if block == 0 {
        return Err(Error::Metric("block size must be positive".into()));
    }
    if h % block != 0 {
        return Err(Error::NotDivisible {
            axis: "height",
            extent: h,
            block,
        });
    }
    if w % block != 0 {
        return Err(Error::NotDivisible {
            axis: "width",
            extent: w,
            block,
        });
    }
    if h / block < 2 || w / block < 2 {
        return Err(Error::Metric(format!(
            "blockiness needs at least 2 blocks per axis, got {}x{} blocks of {block}",
            h / block,
            w / block
        )));
    }
    let (mut edge_sum, mut edge_count) = (0.0f64, 0u64);
    let (mut inner_sum, mut inner_count) = (0.0f64, 0u64);
    let mut add = |straddles: bool, a: T, b: T| {
        let d = (a.as_f64() - b.as_f64()).abs();
        if straddles {
            edge_sum += d;
            edge_count += 1;
        } else {
            inner_sum += d;
            inner_count += 1;
        }
    };
    for n in 0..image.batch() {
        for c in 0..image.channels() {
            for y in 0..h {
                for x in 0..w {
                    let v = image.at(n, c, y, x);
                    if x + 1 < w {
                        add((x + 1) % block == 0, v, image.at(n, c, y, x + 1));
                    }
                    if y + 1 < h {
                        add((y + 1) % block == 0, v, image.at(n, c, y + 1, x));
                    }
                }
            }
        }
    }
    let edge = edge_sum / edge_count as f64;
    let inner = inner_sum / inner_count as f64;
    if edge == inner {
        Ok(1.0)
    } else if inner == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(edge / inner)
    }
}

/// Writes `|reference - candidate|` as an 8-bit PGM, scaled so the largest
/// difference maps to 255.
pub fn emit_diff_image<T: Scalar>(reference: &Tensor<T>, candidate: &Tensor<T>, path: impl AsRef<Path>) -> Result<()> {
    reference.ensure_same_shape(candidate, "diff candidate")?;
    if reference.batch() != 1 || reference.channels() != 1 {
        return Err(Error::shape(
            "diff image batch x channels",
            1,
            reference.batch() * reference.channels(),
        ));
    }
    let diffs: Vec<f64> = reference
        .data()
        .iter()
        .zip(candidate.data())
        .map(|(r, c)| (r.as_f64() - c.as_f64()).abs())
        .collect();
    let peak = diffs.iter().cloned().fold(0.0, f64::max);
    let pixels = diffs
        .iter()
        .map(|&d| if peak > 0.0 { (d / peak * 255.0).round() as u8 } else { 0 })
        .collect();
    let gray = GrayImage {
        width: reference.width(),
        height: reference.height(),
        pixels,
    };
    fs::write(path, encode_pgm(&gray))?;
    Ok(())
}

/// Metrics of one reconstructed image, or the mean over a cell.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub image: String,
    pub rate: f64,
    pub method: Method,
    pub psnr_db: f64,
    pub blockiness: f64,
}

/// An image that had to be center-cropped to a multiple of the block size.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CropNote {
    pub image: String,
    pub block_size: usize,
    pub original: (usize, usize),
    pub cropped: (usize, usize),
}

/// A requested rate x method cell that had no checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct AbsentCell {
    pub rate: f64,
    pub method: Method,
    pub checkpoint: Option<PathBuf>,
}

/// SHA-256 of the checkpoint behind one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub rate: f64,
    pub method: Method,
    pub sha256: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EvalReport {
    /// Sorted by rate, method, then image name.
    pub rows: Vec<EvalRow>,
    /// One row per evaluated cell, `image == "Mean"`.
    pub means: Vec<EvalRow>,
    pub absent: Vec<AbsentCell>,
    pub crops: Vec<CropNote>,
    pub fingerprints: Vec<Fingerprint>,
}

/// One requested cell of the comparison grid.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCell {
    pub rate: f64,
    pub method: Method,
    pub checkpoint: PathBuf,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn method_order(m: Method) -> u8 {
    match m {
        Method::Full => 0,
        Method::Baseline => 1,
    }
}

fn eval_image(model: &AnyModel<f32>, record: &ImageRecord) -> Result<(EvalRow, Option<CropNote>)> {
    let config = model.config();
    let block = config.block_size;
    let (image, cropped) = center_crop_to_multiple(&record.pixels, block)?;
    let recon = model.reconstruct(&image)?;
    // Blockiness is undefined below two blocks per axis; such cells hold NaN.
    let blockiness = if image.height() / block < 2 || image.width() / block < 2 {
        log::warn!("{}: too small for a blockiness index at B={block}", record.name());
        f64::NAN
    } else {
        blockiness_index(&recon, block)?
    };
    let row = EvalRow {
        image: record.name(),
        rate: config.rate,
        method: model.method(),
        psnr_db: psnr(&image, &recon)?,
        blockiness,
    };
    let note = cropped.then(|| CropNote {
        image: record.name(),
        block_size: block,
        original: (record.height(), record.width()),
        cropped: (image.height(), image.width()),
    });
    Ok((row, note))
}

impl EvalReport {
    fn add_model(&mut self, model: &AnyModel<f32>, sha256: String, images: &[ImageRecord]) -> Result<()> {
        let results: Vec<(EvalRow, Option<CropNote>)> =
            images.par_iter().map(|r| eval_image(model, r)).collect::<Result<_>>()?;
        for (row, note) in results {
            self.rows.push(row);
            if let Some(note) = note {
                if !self.crops.contains(&note) {
                    self.crops.push(note);
                }
            }
        }
        let config = model.config();
        self.fingerprints.push(Fingerprint {
            rate: config.rate,
            method: model.method(),
            sha256,
        });
        Ok(())
    }

    fn finish(mut self) -> Self {
        let key = |rate: f64, method: Method| (rate.to_bits(), method_order(method));
        self.rows.sort_by(|a, b| {
            a.rate
                .total_cmp(&b.rate)
                .then(method_order(a.method).cmp(&method_order(b.method)))
                .then(a.image.cmp(&b.image))
        });
        let mut groups: BTreeMap<(u64, u8), Vec<&EvalRow>> = BTreeMap::new();
        for row in &self.rows {
            groups.entry(key(row.rate, row.method)).or_default().push(row);
        }
        self.means = groups
            .values()
            .map(|rows| {
                let n = rows.len() as f64;
                EvalRow {
                    image: "Mean".into(),
                    rate: rows[0].rate,
                    method: rows[0].method,
                    psnr_db: rows.iter().map(|r| r.psnr_db).sum::<f64>() / n,
                    blockiness: rows.iter().map(|r| r.blockiness).sum::<f64>() / n,
                }
            })
            .collect();
        self.means.sort_by(|a, b| {
            a.rate
                .total_cmp(&b.rate)
                .then(method_order(a.method).cmp(&method_order(b.method)))
        });
        self.fingerprints.sort_by(|a, b| {
            a.rate
                .total_cmp(&b.rate)
                .then(method_order(a.method).cmp(&method_order(b.method)))
        });
        self.absent.sort_by(|a, b| {
            a.rate
                .total_cmp(&b.rate)
                .then(method_order(a.method).cmp(&method_order(b.method)))
        });
        self.crops.sort_by(|a, b| (&a.image, a.block_size).cmp(&(&b.image, b.block_size)));
        self
    }

    pub fn mean(&self, rate: f64, method: Method) -> Option<&EvalRow> {
        self.means.iter().find(|r| r.rate == rate && r.method == method)
    }

    /// `image,rate,method,psnr_db,blockiness`, data rows then mean rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("image,rate,method,psnr_db,blockiness\n");
        for r in self.rows.iter().chain(&self.means) {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{:.6}",
                r.image, r.rate, r.method, r.psnr_db, r.blockiness
            );
        }
        out
    }

    /// Aligned table with rates as row groups and methods as columns.
    pub fn to_markdown(&self) -> String {
        let methods = [Method::Full, Method::Baseline];
        let mut rates: Vec<f64> = self
            .rows
            .iter()
            .map(|r| r.rate)
            .chain(self.absent.iter().map(|a| a.rate))
            .collect();
        rates.sort_by(f64::total_cmp);
        rates.dedup();

        let mut table: Vec<Vec<String>> = vec![vec![
            "Rate".into(),
            "Image".into(),
            "full PSNR (dB)".into(),
            "full BI".into(),
            "baseline PSNR (dB)".into(),
            "baseline BI".into(),
        ]];
        for &rate in &rates {
            let mut images: Vec<&str> = self
                .rows
                .iter()
                .filter(|r| r.rate == rate)
                .map(|r| r.image.as_str())
                .collect();
            images.sort();
            images.dedup();
            let source = |image: &str, method: Method| -> Option<&EvalRow> {
                if image == "Mean" {
                    self.mean(rate, method)
                } else {
                    self.rows
                        .iter()
                        .find(|r| r.rate == rate && r.method == method && r.image == image)
                }
            };
            for image in images.into_iter().chain(["Mean"]) {
                let mut line = vec![format!("{}%", rate * 100.0), image.to_string()];
                for method in methods {
                    match source(image, method) {
                        Some(r) => {
                            line.push(format!("{:.2}", r.psnr_db));
                            line.push(format!("{:.3}", r.blockiness));
                        }
                        None => {
                            line.push("absent".into());
                            line.push("absent".into());
                        }
                    }
                }
                table.push(line);
            }
        }

        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|row| row[c].len()).max().unwrap_or(0))
            .collect();
        let fmt_row = |row: &[String]| {
            let cells: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<w$}"))
                .collect();
            format!("| {} |\n", cells.join(" | "))
        };
        let mut out = fmt_row(&table[0]);
        let rule: Vec<String> = widths.iter().map(|&w| "-".repeat(w)).collect();
        out.push_str(&fmt_row(&rule));
        for row in &table[1..] {
            out.push_str(&fmt_row(row));
        }

        if !self.absent.is_empty() {
            out.push_str("\nAbsent cells:\n");
            for a in &self.absent {
                let what = a
                    .checkpoint
                    .as_ref()
                    .map(|p| format!(" (no checkpoint at {})", p.display()))
                    .unwrap_or_default();
                let _ = writeln!(out, "- {}% {}{what}", a.rate * 100.0, a.method);
            }
        }
        if !self.crops.is_empty() {
            out.push_str("\nCenter-cropped to a multiple of the block size:\n");
            for c in &self.crops {
                let _ = writeln!(
                    out,
                    "- {} (B={}): {}x{} -> {}x{}",
                    c.image, c.block_size, c.original.0, c.original.1, c.cropped.0, c.cropped.1
                );
            }
        }
        if !self.fingerprints.is_empty() {
            out.push_str("\nCheckpoint SHA-256:\n");
            for f in &self.fingerprints {
                let _ = writeln!(out, "- {}% {}: {}", f.rate * 100.0, f.method, f.sha256);
            }
        }
        out.push('\n');
        out.push_str(&published_footer());
        out
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.csv"), self.to_csv())?;
        fs::write(dir.join("report.md"), self.to_markdown())?;
        Ok(())
    }
}

/// Published numbers, listed for comparison only.
pub fn published_footer() -> String {
    let mut out = String::from("Published reference values (not reproduced by this run):\n");
    for (rate, db) in PUBLISHED_MEAN_PSNR {
        let _ = writeln!(out, "- proposed method, mean PSNR at {}%: {db:.2} dB", rate * 100.0);
    }
    let _ = writeln!(
        out,
        "- reported average margin over the best competing method: {PUBLISHED_MARGIN_DB} dB"
    );
    out
}

/// Evaluates in-memory models; each is fingerprinted by its encoded checkpoint.
pub fn evaluate_models(models: &[&AnyModel<f32>], images: &[ImageRecord]) -> Result<EvalReport> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut report = EvalReport::default();
    for model in models {
        let sha = sha256_hex(&Checkpoint::from_model(model).encode());
        report.add_model(model, sha, images)?;
    }
    Ok(report.finish())
}

/// Evaluates every requested cell whose checkpoint file exists on the images
/// in `test_dir`. Missing checkpoints become absent cells.
pub fn evaluate_suite(cells: &[EvalCell], test_dir: impl AsRef<Path>) -> Result<EvalReport> {
    let images = load_dir(test_dir)?;
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut report = EvalReport::default();
    for cell in cells {
        if !cell.checkpoint.is_file() {
            log::warn!("no checkpoint for {}% {} at {}", cell.rate * 100.0, cell.method, cell.checkpoint.display());
            report.absent.push(AbsentCell {
                rate: cell.rate,
                method: cell.method,
                checkpoint: Some(cell.checkpoint.clone()),
            });
            continue;
        }
        let bytes = fs::read(&cell.checkpoint)?;
        let checkpoint = Checkpoint::decode(&bytes)?;
        if checkpoint.method != cell.method || checkpoint.config.rate != cell.rate {
            return Err(Error::Config(format!(
                "{} holds a {} model at rate {}, requested {} at rate {}",
                cell.checkpoint.display(),
                checkpoint.method,
                checkpoint.config.rate,
                cell.method,
                cell.rate
            )));
        }
        let model = checkpoint.to_model()?;
        report.add_model(&model, sha256_hex(&bytes), &images)?;
    }
    Ok(report.finish())
}
