#![allow(dead_code)]

use std::path::{Path, PathBuf};

use blockcs::data::pnm::{encode_pgm, GrayImage};
use blockcs::data::ImageRecord;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

fn unit(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Procedural grey-level scene: a tilted plane, Gaussian blobs, soft-edged
/// discs and a faint sinusoid, clamped to 0..=255.
pub fn scene(seed: u64, height: usize, width: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = height.max(width) as f64;
    let base = 60.0 + 120.0 * unit(&mut rng);
    let (gx, gy) = (unit(&mut rng) - 0.5, unit(&mut rng) - 0.5);
    let blobs: Vec<[f64; 4]> = (0..4)
        .map(|_| {
            [
                unit(&mut rng) * size,
                unit(&mut rng) * size,
                6.0 + 20.0 * unit(&mut rng),
                120.0 * (unit(&mut rng) - 0.5),
            ]
        })
        .collect();
    let discs: Vec<[f64; 4]> = (0..3)
        .map(|_| {
            [
                unit(&mut rng) * size,
                unit(&mut rng) * size,
                5.0 + 15.0 * unit(&mut rng),
                100.0 * (unit(&mut rng) - 0.5),
            ]
        })
        .collect();
    let (fx, fy, amp) = (
        0.05 + 0.3 * unit(&mut rng),
        0.05 + 0.3 * unit(&mut rng),
        15.0 * unit(&mut rng),
    );
    let mut out = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let (xf, yf) = (x as f64, y as f64);
            let mut v = base + gx * xf + gy * yf + amp * (fx * xf + fy * yf).sin();
            for b in &blobs {
                let d2 = (xf - b[0]).powi(2) + (yf - b[1]).powi(2);
                v += b[3] * (-d2 / (2.0 * b[2] * b[2])).exp();
            }
            for d in &discs {
                let r = ((xf - d[0]).powi(2) + (yf - d[1]).powi(2)).sqrt();
                v += d[3] / (1.0 + (r - d[2]).exp());
            }
            out.push(v.clamp(0.0, 255.0).round());
        }
    }
    out
}

pub fn scene_record(seed: u64, height: usize, width: usize) -> ImageRecord {
    ImageRecord::from_levels(format!("scene{seed:04}.pgm"), width, height, &scene(seed, height, width)).unwrap()
}

pub fn write_pgm(path: &Path, height: usize, width: usize, levels: &[f64]) {
    let gray = GrayImage {
        width,
        height,
        pixels: levels.iter().map(|&v| v as u8).collect(),
    };
    std::fs::write(path, encode_pgm(&gray)).unwrap();
}

/// Writes `count` scenes as PGM files into `dir` and returns their paths.
pub fn write_scenes(dir: &Path, first_seed: u64, count: u64, height: usize, width: usize) -> Vec<PathBuf> {
    std::fs::create_dir_all(dir).unwrap();
    (first_seed..first_seed + count)
        .map(|seed| {
            let path = dir.join(format!("scene{seed:04}.pgm"));
            write_pgm(&path, height, width, &scene(seed, height, width));
            path
        })
        .collect()
}

/// Dead-leaves image: opaque discs with power-law radii painted over each
/// other, each carrying a faint linear shading. Hard occlusion edges make it
/// a rough stand-in for natural image statistics.
pub fn leaves(seed: u64, size: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![40.0 + 160.0 * unit(&mut rng); size * size];
    let count = 40 + (unit(&mut rng) * 30.0) as usize;
    let (rmin, rmax) = (3.0, size as f64 / 2.0);
    for _ in 0..count {
        let (cx, cy) = (unit(&mut rng) * size as f64, unit(&mut rng) * size as f64);
        let r = 1.0 / (1.0 / rmin - unit(&mut rng) * (1.0 / rmin - 1.0 / rmax));
        let level = 20.0 + 215.0 * unit(&mut rng);
        let (gx, gy) = (unit(&mut rng) - 0.5, unit(&mut rng) - 0.5);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                if dx * dx + dy * dy <= r * r {
                    out[y * size + x] = (level + 1.5 * (gx * dx + gy * dy)).clamp(0.0, 255.0);
                }
            }
        }
    }
    out
}

pub fn leaves_record(seed: u64, size: usize) -> ImageRecord {
    ImageRecord::from_levels(format!("leaves{seed:04}.pgm"), size, size, &leaves(seed, size)).unwrap()
}
