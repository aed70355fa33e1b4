//! Loading one aligned (source, target, semantic) triple, with optional
//! flip / random-crop augmentation shared by all three maps.

use crossmlp_autograd::{Scalar, Tensor};
use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Pixel, RgbImage};
use rand::Rng;

use crate::error::{DataError, Result};
use crate::image_io::{indices_to_one_hot, read_indices, read_rgb, rgb_to_tensor};
use crate::manifest::{Manifest, ManifestEntry};

#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair<T: Scalar> {
    pub id: String,
    /// `[3, H, W]` in `[-1, 1]`
    pub source: Tensor<T>,
    /// `[3, H, W]` in `[-1, 1]`
    pub target: Tensor<T>,
    /// `[K, H, W]` one-hot
    pub semantic: Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LoadOptions {
    /// Output side length.
    pub size: u32,
    pub classes: usize,
    /// Centre-crop the source image to this side before resizing (aerial
    /// inputs that carry a wide border).
    pub source_center_crop: Option<u32>,
}

impl LoadOptions {
    pub fn new(size: u32, classes: usize) -> Self {
        Self { size, classes, source_center_crop: None }
    }
}

/// Geometry of one augmentation draw: resize to `load_size`, crop the
/// `size` window at `(x, y)`, then optionally mirror.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub load_size: u32,
    pub x: u32,
    pub y: u32,
    pub flip: bool,
}

impl Augment {
    /// 286 for 256, scaled proportionally for other sizes.
    pub fn load_size(size: u32) -> u32 {
        (size as f64 * 286.0 / 256.0).round() as u32
    }

    pub fn sample<R: Rng + ?Sized>(size: u32, rng: &mut R) -> Self {
        let load_size = Self::load_size(size);
        let slack = load_size - size;
        Self { load_size, x: rng.random_range(0..=slack), y: rng.random_range(0..=slack), flip: rng.random_bool(0.5) }
    }

    /// No resize slack, no flip.
    pub fn identity(size: u32) -> Self {
        Self { load_size: size, x: 0, y: 0, flip: false }
    }
}

fn resize_to<P>(img: &ImageBuffer<P, Vec<u8>>, side: u32, filter: FilterType) -> ImageBuffer<P, Vec<u8>>
where
    P: Pixel<Subpixel = u8> + 'static,
{
    if img.width() == side && img.height() == side {
        img.clone()
    } else {
        imageops::resize(img, side, side, filter)
    }
}

fn apply<P>(img: &ImageBuffer<P, Vec<u8>>, size: u32, aug: &Augment, filter: FilterType) -> ImageBuffer<P, Vec<u8>>
where
    P: Pixel<Subpixel = u8> + 'static,
{
    let loaded = resize_to(img, aug.load_size, filter);
    let cropped = imageops::crop_imm(&loaded, aug.x, aug.y, size, size).to_image();
    if aug.flip {
        imageops::flip_horizontal(&cropped)
    } else {
        cropped
    }
}

/// Square crop of side `side` around the centre.
pub fn center_crop(img: &RgbImage, side: u32) -> Result<RgbImage> {
    if img.width() < side || img.height() < side || side == 0 {
        return Err(DataError::Data(format!("cannot centre-crop {}x{} to {side}", img.width(), img.height())));
    }
    let (x, y) = ((img.width() - side) / 2, (img.height() - side) / 2);
    Ok(imageops::crop_imm(img, x, y, side, side).to_image())
}

/// Images use bilinear resampling, semantic indices nearest-neighbour.
pub fn transform_rgb(img: &RgbImage, size: u32, aug: &Augment) -> RgbImage {
    apply(img, size, aug, FilterType::Triangle)
}

pub fn transform_indices(map: &GrayImage, size: u32, aug: &Augment) -> GrayImage {
    apply(map, size, aug, FilterType::Nearest)
}

/// Decoded but untransformed images of one entry.
#[derive(Clone, Debug)]
pub struct RawPair {
    pub source: RgbImage,
    pub target: RgbImage,
    pub semantic: GrayImage,
}

pub fn read_raw(manifest: &Manifest, entry: &ManifestEntry) -> Result<RawPair> {
    Ok(RawPair {
        source: read_rgb(&manifest.resolve(&entry.source))?,
        target: read_rgb(&manifest.resolve(&entry.target))?,
        semantic: read_indices(&manifest.resolve(&entry.semantic))?,
    })
}

/// Applies `aug` (or a plain resize) identically to the three maps.
pub fn prepare<T: Scalar>(id: &str, raw: &RawPair, opts: &LoadOptions, aug: Option<&Augment>) -> Result<SamplePair<T>> {
    if opts.size == 0 || opts.classes == 0 {
        return Err(DataError::Config("image size and class count must be positive".into()));
    }
    let aug = aug.copied().unwrap_or_else(|| Augment::identity(opts.size));
    if aug.load_size < opts.size || aug.x + opts.size > aug.load_size || aug.y + opts.size > aug.load_size {
        return Err(DataError::Config(format!("crop {aug:?} does not fit size {}", opts.size)));
    }
    let source = match opts.source_center_crop {
        Some(side) => center_crop(&raw.source, side)?,
        None => raw.source.clone(),
    };
    Ok(SamplePair {
        id: id.to_string(),
        source: rgb_to_tensor(&transform_rgb(&source, opts.size, &aug)),
        target: rgb_to_tensor(&transform_rgb(&raw.target, opts.size, &aug)),
        semantic: indices_to_one_hot(&transform_indices(&raw.semantic, opts.size, &aug), opts.classes)?,
    })
}

pub fn load_pair<T: Scalar>(
    manifest: &Manifest,
    entry: &ManifestEntry,
    opts: &LoadOptions,
    aug: Option<&Augment>,
) -> Result<SamplePair<T>> {
    prepare(&entry.id, &read_raw(manifest, entry)?, opts, aug)
}
