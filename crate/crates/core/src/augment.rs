//! Paired geometric augmentation.
//!
//! One affine map is sampled per draw and applied to both the image
//! (bilinear) and its mask (nearest, re-binarized). The map is composed as
//! horizontal flip, then rotation/scale/shear about the image center, then
//! translation, and the result is sampled onto the `out_size` grid.
//! Regions exposed outside the source canvas are filled with 0.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{sample_bilinear_clamped, BScan, MaskKind, ShadowMask, NETWORK_SIZE};

/// Inclusive sampling range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub lo: f64,
    pub hi: f64,
}

impl Range {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub const fn point(v: f64) -> Self {
        Self { lo: v, hi: v }
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.lo == self.hi {
            // still consume a draw so the stream layout does not depend on ranges
            let _: f64 = rng.random();
            self.lo
        } else {
            rng.random_range(self.lo..=self.hi)
        }
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_hflip: f64,
    pub rot_deg: Range,
    /// Translation as a fraction of the image size, per axis.
    pub translate_frac: Range,
    pub scale: Range,
    pub shear_deg: Range,
    pub out_size: (usize, usize),
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_hflip: 0.5,
            rot_deg: Range::new(-40.0, 40.0),
            translate_frac: Range::new(-0.2, 0.2),
            scale: Range::new(0.8, 1.2),
            shear_deg: Range::new(-20.0, 20.0),
            out_size: (NETWORK_SIZE, NETWORK_SIZE),
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    /// No geometric change: output is a plain resize.
    pub fn identity(out_size: (usize, usize)) -> Self {
        Self {
            p_hflip: 0.0,
            rot_deg: Range::point(0.0),
            translate_frac: Range::point(0.0),
            scale: Range::point(1.0),
            shear_deg: Range::point(0.0),
            out_size,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_hflip) {
            return Err(Error::Config(format!("p_hflip {} not a probability", self.p_hflip)));
        }
        for (name, r) in [
            ("rot_deg", self.rot_deg),
            ("translate_frac", self.translate_frac),
            ("scale", self.scale),
            ("shear_deg", self.shear_deg),
        ] {
            if !(r.lo <= r.hi) {
                return Err(Error::Config(format!("{name} range [{}, {}] is empty", r.lo, r.hi)));
            }
        }
        if self.scale.lo <= 0.0 {
            return Err(Error::Config("scale must be positive".into()));
        }
        if self.shear_deg.lo <= -90.0 || self.shear_deg.hi >= 90.0 {
            return Err(Error::Config("shear must lie strictly within (-90, 90) degrees".into()));
        }
        if self.out_size.0 < 2 || self.out_size.1 < 2 {
            return Err(Error::Config("out_size must be at least 2x2".into()));
        }
        Ok(())
    }
}

/// One sampled transform.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub hflip: bool,
    pub rotation_deg: f64,
    pub translate_x_frac: f64,
    pub translate_y_frac: f64,
    pub scale: f64,
    pub shear_deg: f64,
}

fn draw_rng(cfg_seed: u64, draw_seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg_seed);
    rng.set_stream(draw_seed);
    rng
}

pub fn sample_params(cfg: &AugmentConfig, draw_seed: u64) -> AugmentParams {
    let mut rng = draw_rng(cfg.rng_seed, draw_seed);
    let flip_draw: f64 = rng.random();
    AugmentParams {
        hflip: flip_draw < cfg.p_hflip,
        rotation_deg: cfg.rot_deg.sample(&mut rng),
        translate_x_frac: cfg.translate_frac.sample(&mut rng),
        translate_y_frac: cfg.translate_frac.sample(&mut rng),
        scale: cfg.scale.sample(&mut rng),
        shear_deg: cfg.shear_deg.sample(&mut rng),
    }
}

/// Inverse of the linear part plus the translation, in pixel units about
/// the image center.
struct InverseMap {
    inv: [[f64; 2]; 2],
    tx: f64,
    ty: f64,
    cx: f64,
    cy: f64,
    hflip: bool,
}

impl InverseMap {
    fn new(p: &AugmentParams, height: usize, width: usize) -> Self {
        let theta = p.rotation_deg.to_radians();
        let (s, c) = theta.sin_cos();
        let k = p.shear_deg.to_radians().tan();
        // A = R * S * Sh with Sh = [[1, k], [0, 1]]
        let a = [
            [p.scale * c, p.scale * (c * k - s)],
            [p.scale * s, p.scale * (s * k + c)],
        ];
        let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
        let inv = [
            [a[1][1] / det, -a[0][1] / det],
            [-a[1][0] / det, a[0][0] / det],
        ];
        Self {
            inv,
            tx: p.translate_x_frac * width as f64,
            ty: p.translate_y_frac * height as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            hflip: p.hflip,
        }
    }

    /// Source (y, x) for a point in the transformed source frame.
    fn source(&self, y: f64, x: f64) -> (f64, f64) {
        let dx = x - self.cx - self.tx;
        let dy = y - self.cy - self.ty;
        let mut sx = self.inv[0][0] * dx + self.inv[0][1] * dy;
        let sy = self.inv[1][0] * dx + self.inv[1][1] * dy;
        if self.hflip {
            sx = -sx;
        }
        (sy + self.cy, sx + self.cx)
    }
}

fn warp<F>(src: &Array2<f32>, map: &InverseMap, out: (usize, usize), sample: F) -> Array2<f32>
where
    F: Fn(&Array2<f32>, f64, f64) -> f32,
{
    let (h, w) = src.dim();
    let (oh, ow) = out;
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    Array2::from_shape_fn(out, |(r, c)| {
        let qy = (r as f64 + 0.5) * sy - 0.5;
        let qx = (c as f64 + 0.5) * sx - 0.5;
        let (y, x) = map.source(qy, qx);
        // the source canvas spans [-0.5, n - 0.5] in pixel-center coordinates
        if y < -0.5 || x < -0.5 || y > h as f64 - 0.5 || x > w as f64 - 0.5 {
            0.0
        } else {
            sample(src, y, x)
        }
    })
}

fn sample_nearest(src: &Array2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = src.dim();
    let r = (y + 0.5).floor().clamp(0.0, (h - 1) as f64) as usize;
    let c = (x + 0.5).floor().clamp(0.0, (w - 1) as f64) as usize;
    src[(r, c)]
}

/// Apply one sampled transform to an image and its mask.
pub fn augment_pair(
    img: &BScan,
    mask: &ShadowMask,
    cfg: &AugmentConfig,
    draw_seed: u64,
) -> Result<(BScan, ShadowMask)> {
    let params = sample_params(cfg, draw_seed);
    apply_params(img, mask, &params, cfg.out_size)
}

pub fn apply_params(
    img: &BScan,
    mask: &ShadowMask,
    params: &AugmentParams,
    out_size: (usize, usize),
) -> Result<(BScan, ShadowMask)> {
    if img.shape() != mask.shape() {
        return Err(Error::shape(
            format!("mask shaped like image {:?}", img.shape()),
            format!("{:?}", mask.shape()),
        ));
    }
    let (h, w) = img.shape();
    let map = InverseMap::new(params, h, w);
    let mut pixels = warp(img.pixels(), &map, out_size, sample_bilinear_clamped);
    if img.is_normalized() {
        pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    let out_img = BScan::new(pixels, img.source_id())?;
    let out_mask = match mask.kind() {
        MaskKind::GroundTruthBinary => {
            ShadowMask::binary(warp(mask.values(), &map, out_size, sample_nearest))?.binarize(0.5)
        }
        MaskKind::PredictedSoft => ShadowMask::soft(
            warp(mask.values(), &map, out_size, sample_bilinear_clamped)
                .mapv(|v| v.clamp(0.0, 1.0)),
        )?,
    };
    Ok((out_img, out_mask))
}
