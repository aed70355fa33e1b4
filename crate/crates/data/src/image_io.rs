//! PNG reading and writing plus tensor conversions.
//!
//! RGB images go through the `image` crate. Semantic maps are
//! single-channel PNGs holding class indices (palette or grey), handled
//! with `png` directly so indices are never colour-expanded.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crossmlp_autograd::{Scalar, Tensor};
use image::{GrayImage, RgbImage};

use crate::error::{io_err, DataError, Result};

fn decode_err(path: &Path, msg: impl ToString) -> DataError {
    DataError::Decode { path: path.to_path_buf(), msg: msg.to_string() }
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let reader = image::ImageReader::open(path).map_err(io_err(path))?;
    let img = reader.with_guessed_format().map_err(io_err(path))?.decode().map_err(|e| decode_err(path, e))?;
    Ok(img.into_rgb8())
}

pub fn write_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => DataError::Io { path: path.to_path_buf(), source: io },
        other => decode_err(path, other),
    })
}

pub fn write_gray(path: &Path, img: &GrayImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => DataError::Io { path: path.to_path_buf(), source: io },
        other => decode_err(path, other),
    })
}

/// Class indices stored as a `GrayImage` (one byte per pixel).
pub fn read_indices(path: &Path) -> Result<GrayImage> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| decode_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| decode_err(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| decode_err(path, e))?;
    let (w, h) = (info.width, info.height);
    match info.color_type {
        png::ColorType::Indexed | png::ColorType::Grayscale => {}
        other => return Err(decode_err(path, format!("semantic map must be single-channel, found {other:?}"))),
    }
    let bits = match info.bit_depth {
        png::BitDepth::One => 1,
        png::BitDepth::Two => 2,
        png::BitDepth::Four => 4,
        png::BitDepth::Eight => 8,
        png::BitDepth::Sixteen => return Err(decode_err(path, "16-bit semantic maps are not supported")),
    };
    let per_byte = 8 / bits;
    let mask = ((1u16 << bits) - 1) as u8;
    let mut out = Vec::with_capacity((w * h) as usize);
    for row in buf.chunks(info.line_size).take(h as usize) {
        for x in 0..w as usize {
            let byte = row[x / per_byte];
            let shift = 8 - bits * (x % per_byte + 1);
            out.push((byte >> shift) & mask);
        }
    }
    GrayImage::from_raw(w, h, out).ok_or_else(|| decode_err(path, "inconsistent dimensions"))
}

/// Colour for class `k` in written palettes; the first few are chosen
/// to be easy to tell apart.
pub fn palette_color(k: u8) -> [u8; 3] {
    const BASE: [[u8; 3]; 8] = [
        [70, 130, 180],
        [107, 142, 35],
        [128, 64, 128],
        [220, 20, 60],
        [250, 170, 30],
        [70, 70, 70],
        [152, 251, 152],
        [0, 0, 142],
    ];
    if (k as usize) < BASE.len() {
        return BASE[k as usize];
    }
    let h = (k as u32).wrapping_mul(2654435761);
    [(h >> 24) as u8, (h >> 16) as u8, (h >> 8) as u8]
}

/// 8-bit palette PNG.
pub fn write_indices(path: &Path, map: &GrayImage) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.width(), map.height());
    enc.set_color(png::ColorType::Indexed);
    enc.set_depth(png::BitDepth::Eight);
    let palette: Vec<u8> = (0..=255u8).flat_map(palette_color).collect();
    enc.set_palette(palette);
    let png_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => DataError::Io { path: path.to_path_buf(), source: io },
        other => decode_err(path, other),
    };
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(map.as_raw()).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// `[3, H, W]` with `v / 127.5 - 1`.
pub fn rgb_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let (c, p) = (i / (h * w), i % (h * w));
        T::lit(raw[p * 3 + c] as f64 / 127.5 - 1.0)
    })
}

/// Inverse of [`rgb_to_tensor`], clamping to `[-1, 1]`.
pub fn tensor_to_rgb<T: Scalar>(t: &Tensor<T>) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(DataError::Data(format!("expected a [3, H, W] image, got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = t.data();
    let raw = (0..h * w * 3)
        .map(|i| {
            let (p, c) = (i / 3, i % 3);
            let v = d[c * h * w + p].as_f64();
            ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
        })
        .collect();
    Ok(RgbImage::from_raw(w as u32, h as u32, raw).expect("sized buffer"))
}

/// `[K, H, W]` one-hot; an index `>= classes` is a data error.
pub fn indices_to_one_hot<T: Scalar>(map: &GrayImage, classes: usize) -> Result<Tensor<T>> {
    let (w, h) = (map.width() as usize, map.height() as usize);
    if let Some(&bad) = map.as_raw().iter().find(|&&k| k as usize >= classes) {
        return Err(DataError::Data(format!("semantic index {bad} is not below the class count {classes}")));
    }
    let mut t = Tensor::zeros(&[classes, h, w]);
    let d = t.data_mut();
    for (p, &k) in map.as_raw().iter().enumerate() {
        d[k as usize * h * w + p] = T::one();
    }
    Ok(t)
}

/// Per-pixel argmax over the channel axis of `[K, H, W]`; ties go to the
/// lower class.
pub fn argmax_indices<T: Scalar>(t: &Tensor<T>) -> Result<GrayImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] == 0 || s[0] > 256 {
        return Err(DataError::Data(format!("expected a [K<=256, H, W] map, got {s:?}")));
    }
    let (k, h, w) = (s[0], s[1], s[2]);
    let d = t.data();
    let raw = (0..h * w)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[c * h * w + p] > d[best * h * w + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, raw).expect("sized buffer"))
}

/// `[C, H, W]` min-max normalised then averaged over channels, for
/// visualising uncertainty maps.
pub fn tensor_to_heatmap<T: Scalar>(t: &Tensor<T>) -> Result<GrayImage> {
    let s = t.shape();
    if s.len() != 3 || s[0] == 0 {
        return Err(DataError::Data(format!("expected a [C, H, W] map, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let mean: Vec<f64> =
        (0..h * w).map(|p| (0..c).map(|k| t.data()[k * h * w + p].as_f64()).sum::<f64>() / c as f64).collect();
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let raw = mean.iter().map(|v| ((v - lo) / span * 255.0).round() as u8).collect();
    Ok(GrayImage::from_raw(w as u32, h as u32, raw).expect("sized buffer"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn indexed_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.png");
        let map = GrayImage::from_fn(5, 3, |x, y| image::Luma([((x + 2 * y) % 7) as u8]));
        write_indices(&path, &map).unwrap();
        assert_eq!(read_indices(&path).unwrap(), map);
    }

    #[test]
    fn grey_png_reads_as_indices() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        let map = GrayImage::from_fn(4, 4, |x, _| image::Luma([x as u8]));
        write_gray(&path, &map).unwrap();
        assert_eq!(read_indices(&path).unwrap(), map);
    }

    #[test]
    fn rgb_is_rejected_as_semantic_and_errors_name_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rgb.png");
        write_rgb(&path, &RgbImage::new(2, 2)).unwrap();
        assert!(read_indices(&path).unwrap_err().to_string().contains("rgb.png"));
        let junk = dir.path().join("junk.png");
        std::fs::write(&junk, b"not a png").unwrap();
        assert!(read_rgb(&junk).unwrap_err().to_string().contains("junk.png"));
        assert!(read_rgb(&dir.path().join("missing.png")).unwrap_err().to_string().contains("missing.png"));
    }

    #[test]
    fn tensor_conversions() {
        let img = RgbImage::from_fn(3, 2, |x, y| image::Rgb([0, 255, (40 * x + 7 * y) as u8]));
        let t = rgb_to_tensor::<f32>(&img);
        assert_eq!(t.shape(), &[3, 2, 3]);
        assert_eq!(t.at(&[0, 0, 0]), -1.0);
        assert_eq!(t.at(&[1, 1, 2]), 1.0);
        assert!(t.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert_eq!(tensor_to_rgb(&t).unwrap(), img);

        let map = GrayImage::from_fn(3, 2, |x, _| image::Luma([x as u8]));
        let oh = indices_to_one_hot::<f64>(&map, 4).unwrap();
        for p in 0..6 {
            assert_eq!((0..4).map(|k| oh.data()[k * 6 + p]).sum::<f64>(), 1.0);
        }
        assert_eq!(argmax_indices(&oh).unwrap(), map);
        assert!(indices_to_one_hot::<f64>(&map, 2).is_err());
    }
}
