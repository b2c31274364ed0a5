//! B-scan and shadow-mask data model with lossless raster I/O.
//!
//! Row 0 is the shallowest (vitreous) row; rows grow with depth and columns
//! index lateral A-scans. Pixel intensities are `f32` in `[0, 1]` once
//! normalized.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::{DynamicImage, ImageBuffer, Luma};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Native B-scan height reported for the acquisition device.
pub const NATIVE_HEIGHT: usize = 496;
/// Native B-scan width reported for the acquisition device.
pub const NATIVE_WIDTH: usize = 384;
/// Network input size.
pub const NETWORK_SIZE: usize = 512;

/// Raw 8-bit values above this threshold load as mask foreground.
pub const MASK_THRESHOLD_8BIT: u8 = 127;

/// A single-channel OCT B-scan.
#[derive(Debug, Clone, PartialEq)]
pub struct BScan {
    pixels: Array2<f32>,
    source_id: String,
    normalized: bool,
}

impl BScan {
    pub fn new(pixels: Array2<f32>, source_id: impl Into<String>) -> Result<Self> {
        let (h, w) = pixels.dim();
        if h < 2 || w < 2 {
            return Err(Error::Validation(format!(
                "B-scan must be at least 2x2, got {h}x{w}"
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("B-scan contains non-finite pixels".into()));
        }
        let normalized = pixels.iter().all(|&v| (0.0..=1.0).contains(&v));
        Ok(Self {
            pixels,
            source_id: source_id.into(),
            normalized,
        })
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Result<Self> {
        Self::new(Array2::from_elem((height, width), value), "constant")
    }

    pub fn height(&self) -> usize {
        self.pixels.nrows()
    }

    pub fn width(&self) -> usize {
        self.pixels.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.pixels.dim()
    }

    pub fn pixels(&self) -> &Array2<f32> {
        &self.pixels
    }

    pub fn into_pixels(self) -> Array2<f32> {
        self.pixels
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    pub fn with_source_id(mut self, id: impl Into<String>) -> Self {
        self.source_id = id.into();
        self
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Clamp into `[0, 1]`, marking the scan normalized.
    pub fn clipped(&self) -> Self {
        Self {
            pixels: self.pixels.mapv(|v| v.clamp(0.0, 1.0)),
            source_id: self.source_id.clone(),
            normalized: true,
        }
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().map(|&v| v as f64).sum::<f64>() / self.pixels.len() as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskKind {
    GroundTruthBinary,
    PredictedSoft,
}

/// Per-pixel shadow map aligned to a B-scan.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowMask {
    values: Array2<f32>,
    kind: MaskKind,
}

impl ShadowMask {
    /// A ground-truth mask; every value must be exactly 0 or 1.
    pub fn binary(values: Array2<f32>) -> Result<Self> {
        let bad = values.iter().filter(|&&v| v != 0.0 && v != 1.0).count();
        if bad > 0 {
            return Err(Error::Validation(format!(
                "binary mask has {bad} pixels outside {{0, 1}}"
            )));
        }
        Ok(Self {
            values,
            kind: MaskKind::GroundTruthBinary,
        })
    }

    /// A predicted soft mask with values in `[0, 1]`.
    pub fn soft(values: Array2<f32>) -> Result<Self> {
        let bad = values
            .iter()
            .filter(|&&v| !(0.0..=1.0).contains(&v))
            .count();
        if bad > 0 {
            return Err(Error::Validation(format!(
                "soft mask has {bad} pixels outside [0, 1]"
            )));
        }
        Ok(Self {
            values,
            kind: MaskKind::PredictedSoft,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
            kind: MaskKind::GroundTruthBinary,
        }
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn kind(&self) -> MaskKind {
        self.kind
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    /// Hard mask: 1 where `value >= threshold`.
    pub fn binarize(&self, threshold: f32) -> Self {
        Self {
            values: self
                .values
                .mapv(|v| if v >= threshold { 1.0 } else { 0.0 }),
            kind: MaskKind::GroundTruthBinary,
        }
    }

    pub fn count_ones(&self) -> usize {
        self.values.iter().filter(|&&v| v >= 0.5).count()
    }

    pub fn is_set(&self, row: usize, col: usize) -> bool {
        self.values[(row, col)] >= 0.5
    }

    /// Pixel-wise union of two hard masks.
    pub fn union(&self, other: &ShadowMask) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::shape(
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let mut values = self.binarize(0.5).values;
        values.zip_mut_with(&other.values, |a, &b| {
            if b >= 0.5 {
                *a = 1.0
            }
        });
        Ok(Self {
            values,
            kind: MaskKind::GroundTruthBinary,
        })
    }
}

/// Retinal layers where intralayer contrast is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Layer {
    #[serde(rename = "RNFL")]
    Rnfl,
    #[serde(rename = "IPL")]
    Ipl,
    #[serde(rename = "PR")]
    Pr,
    #[serde(rename = "RPE")]
    Rpe,
}

impl Layer {
    pub const ALL: [Layer; 4] = [Layer::Rnfl, Layer::Ipl, Layer::Pr, Layer::Rpe];

    pub fn as_str(&self) -> &'static str {
        match self {
            Layer::Rnfl => "RNFL",
            Layer::Ipl => "IPL",
            Layer::Pr => "PR",
            Layer::Rpe => "RPE",
        }
    }
}

impl fmt::Display for Layer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Layer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "RNFL" => Ok(Layer::Rnfl),
            "IPL" => Ok(Layer::Ipl),
            "PR" => Ok(Layer::Pr),
            "RPE" => Ok(Layer::Rpe),
            other => Err(Error::Validation(format!("unknown layer label {other:?}"))),
        }
    }
}

/// Default ROI side length in pixels.
pub const ROI_SIZE: usize = 5;

/// Square window used for intralayer contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionOfInterest {
    pub row: usize,
    pub col: usize,
    pub size: usize,
    pub layer: Layer,
    pub shadowed: bool,
}

impl RegionOfInterest {
    pub fn new(row: usize, col: usize, layer: Layer, shadowed: bool) -> Self {
        Self {
            row,
            col,
            size: ROI_SIZE,
            layer,
            shadowed,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.size == 0 || self.row + self.size > height || self.col + self.size > width {
            return Err(Error::Validation(format!(
                "ROI at ({}, {}) size {} exceeds {height}x{width} image",
                self.row, self.col, self.size
            )));
        }
        Ok(())
    }

    /// Pixel coordinates covered by this window.
    pub fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.row..self.row + self.size)
            .flat_map(move |r| (self.col..self.col + self.size).map(move |c| (r, c)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    pub fn from_bits(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(BitDepth::Eight),
            16 => Ok(BitDepth::Sixteen),
            other => Err(Error::Config(format!("bit depth must be 8 or 16, got {other}"))),
        }
    }

    pub fn max_value(&self) -> f32 {
        match self {
            BitDepth::Eight => u8::MAX as f32,
            BitDepth::Sixteen => u16::MAX as f32,
        }
    }
}

fn check_extension(path: &Path) -> Result<image::ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase());
    match ext.as_deref() {
        Some("png") => Ok(image::ImageFormat::Png),
        Some("tif") | Some("tiff") => Ok(image::ImageFormat::Tiff),
        _ => Err(Error::Format(format!(
            "{}: only lossless PNG and TIFF are accepted",
            path.display()
        ))),
    }
}

fn stem_of(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Raw single-channel raster plus its full-scale value.
enum Raster {
    Gray8(ImageBuffer<Luma<u8>, Vec<u8>>),
    Gray16(ImageBuffer<Luma<u16>, Vec<u16>>),
}

fn read_raster(path: &Path) -> Result<Raster> {
    let format = check_extension(path)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, format)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match img {
        DynamicImage::ImageLuma8(buf) => Ok(Raster::Gray8(buf)),
        DynamicImage::ImageLuma16(buf) => Ok(Raster::Gray16(buf)),
        other => Err(Error::Format(format!(
            "{}: expected a single-channel 8/16-bit raster, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn raster_to_array(raster: &Raster) -> Array2<f32> {
    match raster {
        Raster::Gray8(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                buf.get_pixel(c as u32, r as u32)[0] as f32 / u8::MAX as f32
            })
        }
        Raster::Gray16(buf) => {
            let (w, h) = buf.dimensions();
            Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                buf.get_pixel(c as u32, r as u32)[0] as f32 / u16::MAX as f32
            })
        }
    }
}

/// Load a grayscale PNG/TIFF, dividing by the format's maximum value.
pub fn load_image(path: impl AsRef<Path>) -> Result<BScan> {
    let path = path.as_ref();
    let raster = read_raster(path)?;
    BScan::new(raster_to_array(&raster), stem_of(path))
}

fn write_array(values: &Array2<f32>, path: &Path, depth: BitDepth) -> Result<()> {
    let format = check_extension(path)?;
    let (h, w) = values.dim();
    let scale = depth.max_value();
    let quantize = |v: f32| (v.clamp(0.0, 1.0) * scale).round();
    let result = match depth {
        BitDepth::Eight => {
            let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
                ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                    Luma([quantize(values[(y as usize, x as usize)]) as u8])
                });
            buf.save_with_format(path, format)
        }
        BitDepth::Sixteen => {
            let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
                    Luma([quantize(values[(y as usize, x as usize)]) as u16])
                });
            buf.save_with_format(path, format)
        }
    };
    result.map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("{}: {other}", path.display())),
    })
}

/// Write a normalized B-scan; quantization error is at most half a level.
pub fn save_image(img: &BScan, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    if !img.is_normalized() {
        return Err(Error::Validation(format!(
            "{}: refusing to save an unnormalized B-scan",
            img.source_id()
        )));
    }
    write_array(img.pixels(), path.as_ref(), depth)
}

/// Load a ground-truth mask stored as 0/max raster.
///
/// 8-bit masks are thresholded at 127; any value other than 0 or 255
/// (0 or 65535 for 16-bit) is still reported as an error.
pub fn load_mask(path: impl AsRef<Path>) -> Result<ShadowMask> {
    let path = path.as_ref();
    let raster = read_raster(path)?;
    let (values, bad) = match &raster {
        Raster::Gray8(buf) => {
            let (w, h) = buf.dimensions();
            let bad = buf.pixels().filter(|p| p[0] != 0 && p[0] != u8::MAX).count();
            let values = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                if buf.get_pixel(c as u32, r as u32)[0] > MASK_THRESHOLD_8BIT {
                    1.0
                } else {
                    0.0
                }
            });
            (values, bad)
        }
        Raster::Gray16(buf) => {
            let (w, h) = buf.dimensions();
            let bad = buf.pixels().filter(|p| p[0] != 0 && p[0] != u16::MAX).count();
            let values = Array2::from_shape_fn((h as usize, w as usize), |(r, c)| {
                if buf.get_pixel(c as u32, r as u32)[0] > u16::MAX / 2 {
                    1.0
                } else {
                    0.0
                }
            });
            (values, bad)
        }
    };
    if bad > 0 {
        return Err(Error::Validation(format!(
            "{}: mask has {bad} pixels with intermediate gray values",
            path.display()
        )));
    }
    ShadowMask::binary(values)
}

/// Masks are always written as 8-bit {0, 255}.
pub fn save_mask(mask: &ShadowMask, path: impl AsRef<Path>) -> Result<()> {
    write_array(&mask.binarize(0.5).values, path.as_ref(), BitDepth::Eight)
}

/// Source coordinate for a destination index under half-pixel alignment.
fn source_coord(dst: usize, src_len: usize, dst_len: usize) -> f64 {
    (dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5
}

pub(crate) fn sample_bilinear_clamped(src: &Array2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = src.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = y.floor() as usize;
    let x0 = x.floor() as usize;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = (y - y0 as f64) as f32;
    let tx = (x - x0 as f64) as f32;
    // lerp as a + t (b - a) so constant neighborhoods stay exact
    let lerp = |a: f32, b: f32, t: f32| a + t * (b - a);
    let top = lerp(src[(y0, x0)], src[(y0, x1)], tx);
    let bottom = lerp(src[(y1, x0)], src[(y1, x1)], tx);
    lerp(top, bottom, ty)
}

pub(crate) fn resize_bilinear(src: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((height, width), |(r, c)| {
        sample_bilinear_clamped(src, source_coord(r, h, height), source_coord(c, w, width))
    })
}

pub(crate) fn resize_nearest(src: &Array2<f32>, height: usize, width: usize) -> Array2<f32> {
    let (h, w) = src.dim();
    Array2::from_shape_fn((height, width), |(r, c)| {
        let y = ((r as f64 + 0.5) * h as f64 / height as f64).floor() as usize;
        let x = ((c as f64 + 0.5) * w as f64 / width as f64).floor() as usize;
        src[(y.min(h - 1), x.min(w - 1))]
    })
}

/// Bilinear resize of a B-scan.
pub fn resize_image(img: &BScan, height: usize, width: usize) -> Result<BScan> {
    if height < 2 || width < 2 {
        return Err(Error::Validation(format!(
            "resize target {height}x{width} too small"
        )));
    }
    let mut out = resize_bilinear(img.pixels(), height, width);
    if img.is_normalized() {
        out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    BScan::new(out, img.source_id())
}

/// Nearest-neighbor resize for ground-truth masks (re-binarized), bilinear
/// for soft predictions.
pub fn resize_mask(mask: &ShadowMask, height: usize, width: usize) -> Result<ShadowMask> {
    if height < 2 || width < 2 {
        return Err(Error::Validation(format!(
            "resize target {height}x{width} too small"
        )));
    }
    match mask.kind() {
        MaskKind::GroundTruthBinary => {
            let out = resize_nearest(mask.values(), height, width);
            Ok(ShadowMask {
                values: out,
                kind: MaskKind::GroundTruthBinary,
            }
            .binarize(0.5))
        }
        MaskKind::PredictedSoft => {
            let out = resize_bilinear(mask.values(), height, width);
            ShadowMask::soft(out.mapv(|v| v.clamp(0.0, 1.0)))
        }
    }
}

/// One image/mask pair from a dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairPaths {
    pub stem: String,
    pub image: PathBuf,
    pub mask: Option<PathBuf>,
    pub ground_truth: Option<PathBuf>,
}

pub const IMAGES_DIR: &str = "images";
pub const MASKS_DIR: &str = "masks";
pub const GROUND_TRUTH_DIR: &str = "ground_truth";
pub const PAIRS_MANIFEST: &str = "pairs.tsv";

/// Supported raster files directly inside `dir`, sorted by path.
pub fn raster_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && check_extension(&path).is_ok() {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn find_by_stem(files: &[PathBuf], stem: &str) -> Option<PathBuf> {
    files.iter().find(|p| stem_of(p) == stem).cloned()
}

/// Scan a dataset laid out as `images/`, `masks/` (and optionally
/// `ground_truth/`) with matching file stems. When `pairs.tsv` exists its
/// lines (`image_stem<TAB>mask_stem`) define the pairing instead.
///
/// With `require_masks`, every image must have a mask.
pub fn scan_dataset(root: impl AsRef<Path>, require_masks: bool) -> Result<Vec<PairPaths>> {
    let root = root.as_ref();
    let images = raster_files(&root.join(IMAGES_DIR))?;
    let mask_dir = root.join(MASKS_DIR);
    let masks = if mask_dir.is_dir() {
        raster_files(&mask_dir)?
    } else {
        Vec::new()
    };
    let gt_dir = root.join(GROUND_TRUTH_DIR);
    let gts = if gt_dir.is_dir() {
        raster_files(&gt_dir)?
    } else {
        Vec::new()
    };

    let manifest = root.join(PAIRS_MANIFEST);
    let pairs: Vec<(String, String)> = if manifest.is_file() {
        let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split('\t');
            match (parts.next(), parts.next()) {
                (Some(img), Some(mask)) => pairs.push((img.to_owned(), mask.to_owned())),
                _ => {
                    return Err(Error::Validation(format!(
                        "{}:{}: expected two tab-separated stems",
                        manifest.display(),
                        lineno + 1
                    )))
                }
            }
        }
        pairs
    } else {
        images
            .iter()
            .map(|p| (stem_of(p), stem_of(p)))
            .collect()
    };

    let mut out = Vec::with_capacity(pairs.len());
    for (img_stem, mask_stem) in pairs {
        let image = find_by_stem(&images, &img_stem).ok_or_else(|| {
            Error::Validation(format!("no image with stem {img_stem:?} in {}", root.display()))
        })?;
        let mask = find_by_stem(&masks, &mask_stem);
        if require_masks && mask.is_none() {
            return Err(Error::Validation(format!("no mask for image {img_stem:?}")));
        }
        out.push(PairPaths {
            ground_truth: find_by_stem(&gts, &img_stem),
            stem: img_stem,
            image,
            mask,
        });
    }
    if out.is_empty() {
        return Err(Error::Validation(format!(
            "dataset at {} contains no images",
            root.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> BScan {
        BScan::new(
            Array2::from_shape_fn((h, w), |(r, c)| ((r * w + c) % 97) as f32 / 96.0),
            "ramp",
        )
        .unwrap()
    }

    #[test]
    fn rejects_tiny_and_flags_unnormalized() {
        assert!(BScan::new(Array2::zeros((1, 5)), "x").is_err());
        let b = BScan::new(Array2::from_elem((2, 2), 1.5), "x").unwrap();
        assert!(!b.is_normalized());
        assert!(b.clipped().is_normalized());
    }

    #[test]
    fn eight_bit_extremes_map_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
            ImageBuffer::from_fn(3, 2, |x, _| Luma([if x == 0 { 0 } else { 255 }]));
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        assert_eq!(img.shape(), (2, 3));
        assert_eq!(img.pixels()[(0, 0)], 0.0);
        assert_eq!(img.pixels()[(1, 2)], 1.0);
        assert_eq!(img.source_id(), "a");
    }

    #[test]
    fn sixteen_bit_midpoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.tif");
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_pixel(2, 2, Luma([32768]));
        buf.save(&path).unwrap();
        let img = load_image(&path).unwrap();
        let expected = 32768.0_f64 / 65535.0;
        assert!((img.pixels()[(0, 0)] as f64 - expected).abs() < 1e-7);
        assert!((expected - 0.50000763).abs() < 1e-8);
    }

    #[test]
    fn rejects_lossy_and_multichannel() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_image(dir.path().join("x.jpg")),
            Err(Error::Format(_))
        ));
        let rgb = dir.path().join("rgb.png");
        image::RgbImage::from_pixel(2, 2, image::Rgb([1, 2, 3]))
            .save(&rgb)
            .unwrap();
        assert!(matches!(load_image(&rgb), Err(Error::Format(_))));
        assert!(matches!(
            load_image(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn exact_values_survive_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = BScan::new(
            Array2::from_shape_fn((4, 4), |(r, c)| ((r + c) % 2) as f32),
            "bin",
        )
        .unwrap();
        for (name, depth) in [("a.png", BitDepth::Eight), ("b.tiff", BitDepth::Sixteen)] {
            let p = dir.path().join(name);
            save_image(&img, &p, depth).unwrap();
            assert_eq!(load_image(&p).unwrap().pixels(), img.pixels());
        }
    }

    #[test]
    fn constant_half_round_trips_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = BScan::constant(8, 8, 0.5).unwrap();
        let p16 = dir.path().join("c.png");
        save_image(&img, &p16, BitDepth::Sixteen).unwrap();
        let back = load_image(&p16).unwrap();
        assert!(back.pixels().iter().all(|v| (v - 0.5).abs() <= 1.0 / 65535.0));
        let p8 = dir.path().join("c8.png");
        save_image(&img, &p8, BitDepth::Eight).unwrap();
        let back = load_image(&p8).unwrap();
        assert!(back.pixels().iter().all(|v| (v - 0.5).abs() <= 1.0 / 255.0));
    }

    #[test]
    fn save_refuses_unnormalized_and_unwritable() {
        let dir = tempfile::tempdir().unwrap();
        let raw = BScan::new(Array2::from_elem((2, 2), 2.0), "raw").unwrap();
        assert!(save_image(&raw, dir.path().join("r.png"), BitDepth::Eight).is_err());
        let ok = BScan::constant(2, 2, 0.1).unwrap();
        let err = save_image(&ok, dir.path().join("nope/r.png"), BitDepth::Eight).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err:?}");
    }

    fn write_gray8(path: &Path, w: u32, h: u32, f: impl Fn(u32, u32) -> u8) {
        let buf: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w, h, |x, y| Luma([f(x, y)]));
        buf.save(path).unwrap();
    }

    #[test]
    fn mask_loading() {
        let dir = tempfile::tempdir().unwrap();
        let zeros = dir.path().join("z.png");
        write_gray8(&zeros, 4, 3, |_, _| 0);
        let m = load_mask(&zeros).unwrap();
        assert_eq!(m.count_ones(), 0);
        assert_eq!(m.kind(), MaskKind::GroundTruthBinary);

        let ones = dir.path().join("o.png");
        write_gray8(&ones, 4, 3, |_, _| 255);
        assert_eq!(load_mask(&ones).unwrap().count_ones(), 12);

        let gray = dir.path().join("g.png");
        write_gray8(&gray, 4, 3, |x, y| if x == 1 && y == 1 { 128 } else { 0 });
        match load_mask(&gray) {
            Err(Error::Validation(msg)) => assert!(msg.contains("1 pixels"), "{msg}"),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn mask_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = ShadowMask::binary(Array2::from_shape_fn((5, 6), |(r, c)| ((r * c) % 3 == 0) as u8 as f32))
            .unwrap();
        let p = dir.path().join("m.png");
        save_mask(&m, &p).unwrap();
        assert_eq!(load_mask(&p).unwrap(), m);
    }

    #[test]
    fn resize_native_to_network() {
        let img = ramp(NATIVE_HEIGHT, NATIVE_WIDTH);
        let out = resize_image(&img, NETWORK_SIZE, NETWORK_SIZE).unwrap();
        assert_eq!(out.shape(), (512, 512));
        assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn resize_keeps_constants_exact() {
        for c in [0.0f32, 0.123, 0.7, 1.0] {
            let img = BScan::constant(NATIVE_HEIGHT, NATIVE_WIDTH, c).unwrap();
            let out = resize_image(&img, 512, 512).unwrap();
            assert!(out.pixels().iter().all(|&v| v == c));
        }
    }

    #[test]
    fn resize_mask_stays_binary() {
        let m = ShadowMask::binary(Array2::from_shape_fn((49, 38), |(r, c)| {
            (c > 10 && c < 20 && r > 5) as u8 as f32
        }))
        .unwrap();
        let out = resize_mask(&m, 512, 512).unwrap();
        assert_eq!(out.kind(), MaskKind::GroundTruthBinary);
        assert!(out.values().iter().all(|&v| v == 0.0 || v == 1.0));
        assert!(out.count_ones() > 0);
    }

    #[test]
    fn roi_bounds() {
        let roi = RegionOfInterest::new(10, 10, Layer::Rpe, false);
        assert!(roi.validate(15, 15).is_ok());
        assert!(roi.validate(14, 15).is_err());
        assert_eq!(roi.pixels().count(), 25);
        assert_eq!("rpe".parse::<Layer>().unwrap(), Layer::Rpe);
        assert!("ONL".parse::<Layer>().is_err());
    }

    #[test]
    fn dataset_scan_pairs_by_stem_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join(IMAGES_DIR)).unwrap();
        fs::create_dir_all(root.join(MASKS_DIR)).unwrap();
        for s in ["a", "b"] {
            write_gray8(&root.join(IMAGES_DIR).join(format!("{s}.png")), 2, 2, |_, _| 9);
        }
        write_gray8(&root.join(MASKS_DIR).join("a.png"), 2, 2, |_, _| 0);
        assert!(scan_dataset(root, true).is_err());
        let loose = scan_dataset(root, false).unwrap();
        assert_eq!(loose.len(), 2);
        assert!(loose[1].mask.is_none());

        write_gray8(&root.join(MASKS_DIR).join("mb.png"), 2, 2, |_, _| 0);
        fs::write(root.join(PAIRS_MANIFEST), "a\ta\nb\tmb\n").unwrap();
        let paired = scan_dataset(root, true).unwrap();
        assert_eq!(paired[1].mask.as_deref(), Some(root.join(MASKS_DIR).join("mb.png").as_path()));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn round_trip_error_bounded_by_quantization(
            h in 2usize..12, w in 2usize..12, seed in any::<u64>(), sixteen in any::<bool>()
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = BScan::new(Array2::from_shape_fn((h, w), |_| rng.random::<f32>()), "p").unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("p.png");
            let depth = if sixteen { BitDepth::Sixteen } else { BitDepth::Eight };
            save_image(&img, &p, depth).unwrap();
            let back = load_image(&p).unwrap();
            let bound = 1.0 / depth.max_value() + 1e-7;
            for (a, b) in img.pixels().iter().zip(back.pixels()) {
                prop_assert!((a - b).abs() <= bound);
            }
        }

        #[test]
        fn resize_stays_in_range(h in 2usize..40, w in 2usize..40, th in 2usize..64, tw in 2usize..64, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let img = BScan::new(Array2::from_shape_fn((h, w), |_| rng.random::<f32>()), "p").unwrap();
            let out = resize_image(&img, th, tw).unwrap();
            prop_assert_eq!(out.shape(), (th, tw));
            prop_assert!(out.pixels().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}
