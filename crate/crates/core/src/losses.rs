//! Generator loss: masked content and style terms, total variation and the
//! adversarial shadow term, combined with fixed weights.
//!
//! All functions take `[N, 1, H, W]` batches (features `[N, C, H, W]`) and
//! average per-image values over the batch.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::backbone::{FeatureExtractor, FeatureStack};
use crate::detector::ShadowScorer;
use crate::error::{Error, Result};
use crate::imaging::{BScan, ShadowMask};
use crate::net;

/// Mask values at or above this count as shadow when masking images.
pub const MASK_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub shadow: f64,
    pub tv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            content: 100.0,
            style: 0.1,
            shadow: 100.0,
            tv: 1e-5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("content", self.content),
            ("style", self.style),
            ("shadow", self.shadow),
            ("tv", self.tv),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Config(format!("loss weight {name} = {w} must be >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub content: f64,
    pub style: f64,
    pub shadow: f64,
    pub tv: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(content: f64, style: f64, shadow: f64, tv: f64, w: &LossWeights) -> Self {
        Self {
            content,
            style,
            shadow,
            tv,
            total: w.content * content + w.style * style + w.shadow * shadow + w.tv * tv,
        }
    }
}

/// Differentiable loss components for one batch.
#[derive(Debug)]
pub struct LossTerms {
    pub content: Tensor,
    pub style: Tensor,
    pub shadow: Tensor,
    pub tv: Tensor,
    pub total: Tensor,
}

impl LossTerms {
    pub fn breakdown(&self, w: &LossWeights) -> LossBreakdown {
        let v = |t: &Tensor| t.double_value(&[]);
        LossBreakdown::new(v(&self.content), v(&self.style), v(&self.shadow), v(&self.tv), w)
    }
}

fn same_size(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::shape(format!("{:?}", a.size()), format!("{:?}", b.size())));
    }
    Ok(())
}

/// Zero the pixels where `pred_mask >= 0.5` in both images.
pub fn mask_images(baseline: &Tensor, deshadowed: &Tensor, pred_mask: &Tensor) -> Result<(Tensor, Tensor)> {
    same_size(baseline, deshadowed)?;
    same_size(baseline, pred_mask)?;
    let keep = pred_mask
        .detach()
        .lt(MASK_THRESHOLD)
        .to_kind(deshadowed.kind());
    Ok((baseline * &keep, deshadowed * &keep))
}

/// [`mask_images`] on B-scans.
pub fn mask_bscans(baseline: &BScan, deshadowed: &BScan, pred_mask: &ShadowMask) -> Result<(BScan, BScan)> {
    if baseline.shape() != deshadowed.shape() || baseline.shape() != pred_mask.shape() {
        return Err(Error::shape(
            format!("{:?}", baseline.shape()),
            format!("{:?} / {:?}", deshadowed.shape(), pred_mask.shape()),
        ));
    }
    let apply = |img: &BScan| {
        let mut px = img.pixels().clone();
        px.zip_mut_with(pred_mask.values(), |p, &m| {
            if f64::from(m) >= MASK_THRESHOLD {
                *p = 0.0;
            }
        });
        BScan::new(px, img.source_id())
    };
    Ok((apply(baseline)?, apply(deshadowed)?))
}

/// Sum over taps of the mean squared feature difference.
pub fn content_from_features(a: &FeatureStack, b: &FeatureStack) -> Result<Tensor> {
    check_stacks(a, b)?;
    Ok(a.maps
        .iter()
        .zip(&b.maps)
        .map(|(p, q)| (p - q).square().mean(p.kind()))
        .reduce(|x, y| x + y)
        .expect("at least one tap"))
}

/// Per-image Gram matrices `[N, C, C]` of `[N, C, H, W]` features,
/// summed (not averaged) over spatial positions.
pub fn gram(features: &Tensor) -> Tensor {
    let s = features.size();
    let flat = features.reshape([s[0], s[1], s[2] * s[3]]);
    flat.matmul(&flat.transpose(1, 2))
}

/// Sum over taps of the squared Frobenius distance between Gram matrices,
/// averaged over the batch.
pub fn style_from_features(a: &FeatureStack, b: &FeatureStack) -> Result<Tensor> {
    check_stacks(a, b)?;
    let n = a.maps[0].size()[0] as f64;
    Ok(a.maps
        .iter()
        .zip(&b.maps)
        .map(|(p, q)| (gram(p) - gram(q)).square().sum(p.kind()) / n)
        .reduce(|x, y| x + y)
        .expect("at least one tap"))
}

fn check_stacks(a: &FeatureStack, b: &FeatureStack) -> Result<()> {
    if a.maps.is_empty() || a.tap_ids != b.tap_ids || a.maps.len() != b.maps.len() {
        return Err(Error::Validation("feature stacks have different taps".into()));
    }
    for (p, q) in a.maps.iter().zip(&b.maps) {
        same_size(p, q)?;
    }
    Ok(())
}

pub fn content_loss(bm: &Tensor, dm: &Tensor, fx: &dyn FeatureExtractor) -> Result<Tensor> {
    same_size(bm, dm)?;
    let fb = tch::no_grad(|| fx.extract(bm))?;
    content_from_features(&fb, &fx.extract(dm)?)
}

pub fn style_loss(bm: &Tensor, dm: &Tensor, fx: &dyn FeatureExtractor) -> Result<Tensor> {
    same_size(bm, dm)?;
    let fb = tch::no_grad(|| fx.extract(bm))?;
    style_from_features(&fb, &fx.extract(dm)?)
}

/// Mean over the batch of (1/HW) times the sum of absolute vertical and
/// horizontal neighbor differences.
pub fn tv_loss(d: &Tensor) -> Result<Tensor> {
    let s = d.size();
    if s.len() != 4 || s[2] < 2 || s[3] < 2 {
        return Err(Error::shape("[N, C, H>=2, W>=2]", format!("{s:?}")));
    }
    let (h, w) = (s[2], s[3]);
    let dv = (d.narrow(2, 1, h - 1) - d.narrow(2, 0, h - 1)).abs().sum(d.kind());
    let dh = (d.narrow(3, 1, w - 1) - d.narrow(3, 0, w - 1)).abs().sum(d.kind());
    Ok((dv + dh) / (s[0] * h * w) as f64)
}

/// Sum of detector probabilities per image, averaged over the batch.
pub fn shadow_loss(d: &Tensor, scorer: &dyn ShadowScorer) -> Result<Tensor> {
    let p = scorer.score(d)?;
    same_size(d, &p)?;
    Ok(p.sum(d.kind()) / d.size()[0] as f64)
}

/// All four terms and their weighted sum. Content and style compare the
/// masked pair; TV and shadow see the raw deshadowed batch.
pub fn total_loss(
    baseline: &Tensor,
    deshadowed: &Tensor,
    pred_mask: &Tensor,
    fx: &dyn FeatureExtractor,
    scorer: &dyn ShadowScorer,
    w: &LossWeights,
) -> Result<LossTerms> {
    let (bm, dm) = mask_images(baseline, deshadowed, pred_mask)?;
    let fb = tch::no_grad(|| fx.extract(&bm))?;
    let fd = fx.extract(&dm)?;
    let content = content_from_features(&fb, &fd)?;
    let style = style_from_features(&fb, &fd)?;
    let tv = tv_loss(deshadowed)?;
    let shadow = shadow_loss(deshadowed, scorer)?;
    let total = &content * w.content + &style * w.style + &shadow * w.shadow + &tv * w.tv;
    Ok(LossTerms {
        content,
        style,
        shadow,
        tv,
        total,
    })
}

/// TV loss of a single B-scan, in double precision.
pub fn tv_loss_bscan(img: &BScan) -> Result<f64> {
    let t = net::array_to_tensor(img.pixels()).to_kind(Kind::Double);
    Ok(tv_loss(&t)?.double_value(&[]))
}
