//! Procedural paired dataset: top-down "aerial" scenes (grass, one road,
//! a few coloured roofs) and matching "ground" views whose band layout is
//! a fixed function of the aerial layout.
//!
//! Ground classes: 0 sky, 1 vegetation, 2 road, 3.. one per roof kind.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{io_err, DataError, Result};
use crate::image_io::{write_indices, write_rgb};
use crate::manifest::{Manifest, ManifestEntry};
use crate::sample::RawPair;
use crate::seed::mix;

pub const TOY_MANIFEST: &str = "manifest.txt";
pub const MIN_TOY_CLASSES: usize = 4;

const ROOF_COLORS: [[u8; 3]; 6] =
    [[180, 60, 50], [60, 80, 170], [210, 190, 70], [150, 90, 160], [90, 160, 170], [230, 130, 40]];

#[derive(Clone, Copy, Debug)]
struct Building {
    x0: u32,
    x1: u32,
    y0: u32,
    y1: u32,
    kind: usize,
}

fn jitter(rng: &mut ChaCha8Rng, c: [u8; 3], amount: i32) -> [u8; 3] {
    c.map(|v| (v as i32 + rng.random_range(-amount..=amount)).clamp(0, 255) as u8)
}

fn roof_color(kind: usize) -> [u8; 3] {
    if kind < ROOF_COLORS.len() {
        ROOF_COLORS[kind]
    } else {
        let h = (kind as u32).wrapping_mul(2654435761);
        [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
    }
}

/// Renders sample `index` of the dataset determined by `seed`.
pub fn render_toy(index: usize, size: u32, classes: usize, seed: u64) -> RawPair {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(&[seed, index as u64]));
    let s = size as f64;
    let kinds = classes - 3;

    let road_w = rng.random_range((s / 10.0).max(2.0) as u32..=(s / 6.0).max(3.0) as u32);
    let road_x = rng.random_range((0.2 * s) as u32..=(0.8 * s) as u32 - road_w);
    let n_buildings = rng.random_range(1..=3);
    let buildings: Vec<Building> = (0..n_buildings)
        .map(|_| {
            let w = rng.random_range((s / 8.0) as u32..=(s / 4.0) as u32).max(2);
            let h = rng.random_range((s / 8.0) as u32..=(s / 4.0) as u32).max(2);
            let x0 = rng.random_range(0..=size - w);
            let y0 = rng.random_range(0..=size - h);
            Building { x0, x1: x0 + w, y0, y1: y0 + h, kind: rng.random_range(0..kinds) }
        })
        .collect();

    let grass = jitter(&mut rng, [70, 140, 60], 15);
    let asphalt = jitter(&mut rng, [110, 110, 115], 10);
    let roofs: Vec<[u8; 3]> = buildings.iter().map(|b| jitter(&mut rng, roof_color(b.kind), 12)).collect();
    let sky_top = jitter(&mut rng, [90, 150, 220], 15);

    let mut aerial = RgbImage::from_pixel(size, size, Rgb(grass));
    for y in 0..size {
        for x in road_x..road_x + road_w {
            aerial.put_pixel(x, y, Rgb(asphalt));
        }
    }
    for (b, c) in buildings.iter().zip(&roofs) {
        for y in b.y0..b.y1 {
            for x in b.x0..b.x1 {
                aerial.put_pixel(x, y, Rgb(*c));
            }
        }
    }

    let horizon = (0.45 * s).round() as u32;
    let mut ground = RgbImage::new(size, size);
    let mut semantic = GrayImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let (c, k) = if y < horizon {
                let t = y as f64 / horizon as f64;
                (sky_top.map(|v| (v as f64 + (255.0 - v as f64) * 0.5 * t) as u8), 0)
            } else {
                (grass.map(|v| (v as f64 * 0.85) as u8), 1)
            };
            ground.put_pixel(x, y, Rgb(c));
            semantic.put_pixel(x, y, Luma([k]));
        }
    }
    // Road: a wedge widening towards the viewer, centred on the aerial road.
    let centre = road_x as f64 + road_w as f64 / 2.0;
    for y in horizon..size {
        let t = (y - horizon) as f64 / (size - horizon) as f64;
        let half = road_w as f64 * (0.25 + 1.25 * t);
        for x in 0..size {
            if (x as f64 + 0.5 - centre).abs() < half {
                ground.put_pixel(x, y, Rgb(asphalt));
                semantic.put_pixel(x, y, Luma([2]));
            }
        }
    }
    // Buildings: same columns as from above, taller for bigger footprints,
    // nearer (larger y1) drawn last.
    let mut order: Vec<usize> = (0..buildings.len()).collect();
    order.sort_by_key(|&i| (buildings[i].y1, i));
    let base = (s / 16.0).round() as u32;
    for i in order {
        let b = buildings[i];
        let area = ((b.x1 - b.x0) * (b.y1 - b.y0)) as f64;
        let height = ((area / s) * 1.5).round().clamp(2.0, horizon as f64 - 2.0) as u32;
        let wall = roofs[i].map(|v| (v as f64 * 0.8) as u8);
        for y in horizon - height..(horizon + base).min(size) {
            for x in b.x0..b.x1 {
                ground.put_pixel(x, y, Rgb(wall));
                semantic.put_pixel(x, y, Luma([(3 + b.kind) as u8]));
            }
        }
    }
    RawPair { source: aerial, target: ground, semantic }
}

/// Writes `n` samples as `<id>_aerial.png`, `<id>_ground.png` and
/// `<id>_semantic.png` plus `manifest.txt` under `out`.
pub fn generate_toy_dataset(out: &Path, n: usize, size: u32, classes: usize, seed: u64) -> Result<Manifest> {
    if n == 0 {
        return Err(DataError::Config("toy dataset needs at least one sample".into()));
    }
    if size < 16 || !size.is_multiple_of(4) {
        return Err(DataError::Config(format!("toy image size {size} must be a multiple of 4 and at least 16")));
    }
    if !(MIN_TOY_CLASSES..=256).contains(&classes) {
        return Err(DataError::Config(format!("toy class count {classes} must be in {MIN_TOY_CLASSES}..=256")));
    }
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let width = n.to_string().len().max(4);
    let entries = (0..n)
        .into_par_iter()
        .map(|i| {
            let id = format!("toy{i:0width$}");
            let raw = render_toy(i, size, classes, seed);
            let entry = ManifestEntry {
                source: format!("{id}_aerial.png").into(),
                target: format!("{id}_ground.png").into(),
                semantic: format!("{id}_semantic.png").into(),
                id,
            };
            write_rgb(&out.join(&entry.source), &raw.source)?;
            write_rgb(&out.join(&entry.target), &raw.target)?;
            write_indices(&out.join(&entry.semantic), &raw.semantic)?;
            Ok(entry)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = Manifest { root: out.to_path_buf(), entries };
    manifest.save(&out.join(TOY_MANIFEST))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::{indices_to_one_hot, read_indices};

    fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut v: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap())
            })
            .collect();
        v.sort();
        v
    }

    #[test]
    fn counts_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_toy_dataset(dir.path(), 8, 64, 4, 1).unwrap();
        assert_eq!(m.len(), 8);
        let pngs = files(dir.path()).iter().filter(|(n, _)| n.ends_with(".png")).count();
        assert_eq!(pngs, 24);
        let loaded = Manifest::load(&dir.path().join(TOY_MANIFEST)).unwrap();
        assert_eq!(loaded.entries, m.entries);
        loaded.check_files().unwrap();
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate_toy_dataset(a.path(), 3, 32, 5, 9).unwrap();
        generate_toy_dataset(b.path(), 3, 32, 5, 9).unwrap();
        generate_toy_dataset(c.path(), 3, 32, 5, 10).unwrap();
        assert_eq!(files(a.path()), files(b.path()));
        assert_ne!(files(a.path()), files(c.path()));
    }

    #[test]
    fn semantic_maps_are_one_hot() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_toy_dataset(dir.path(), 4, 32, 4, 2).unwrap();
        for e in &m.entries {
            let map = read_indices(&m.resolve(&e.semantic)).unwrap();
            let oh = indices_to_one_hot::<f64>(&map, 4).unwrap();
            let hw = 32 * 32;
            for p in 0..hw {
                assert_eq!((0..4).map(|k| oh.data()[k * hw + p]).sum::<f64>(), 1.0);
            }
        }
    }

    #[test]
    fn ground_layout_follows_aerial_layout() {
        // The ground road sits under the aerial road's columns.
        let raw = render_toy(0, 64, 4, 5);
        let road_cols: Vec<u32> = (0..64).filter(|&x| raw.semantic.get_pixel(x, 63)[0] == 2).collect();
        let asphalt = *raw.target.get_pixel(road_cols[road_cols.len() / 2], 63);
        let mid = road_cols.iter().sum::<u32>() as f64 / road_cols.len() as f64;
        let aerial_cols: Vec<u32> =
            (0..64).filter(|&x| (0..64).filter(|&y| *raw.source.get_pixel(x, y) == asphalt).count() >= 32).collect();
        assert!(!aerial_cols.is_empty());
        let aerial_mid = aerial_cols.iter().sum::<u32>() as f64 / aerial_cols.len() as f64;
        assert!((mid - aerial_mid).abs() <= 1.0, "{mid} vs {aerial_mid}");
        // Sky at the top everywhere.
        assert!((0..64).all(|x| raw.semantic.get_pixel(x, 0)[0] == 0));
    }

    #[test]
    fn rejects_bad_arguments() {
        let dir = tempfile::tempdir().unwrap();
        assert!(generate_toy_dataset(dir.path(), 0, 64, 4, 0).is_err());
        assert!(generate_toy_dataset(dir.path(), 1, 30, 4, 0).is_err());
        assert!(generate_toy_dataset(dir.path(), 1, 64, 3, 0).is_err());
        let file = dir.path().join("f");
        std::fs::write(&file, b"").unwrap();
        assert!(generate_toy_dataset(&file.join("sub"), 1, 64, 4, 0).is_err());
    }
}
