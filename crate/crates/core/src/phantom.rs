//! Synthetic layered B-scans and artificial depth-decaying shadows.
//!
//! A phantom is a stack of horizontal layers with slightly wavy boundaries
//! and multiplicative speckle. Shadows attenuate every pixel below a start
//! row by `exp(-(row - start_row) / alpha)` over a band of columns; `alpha`
//! is a decay length in pixels.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BScan, Layer, ShadowMask};

/// Per-pixel layer index, 0 = shallowest layer.
pub type LayerMap = Array2<u8>;

pub const MIN_SHADOW_WIDTH: usize = 1;
pub const MAX_SHADOW_WIDTH: usize = 100;
pub const MIN_ALPHA: f64 = 100.0;
pub const MAX_ALPHA: f64 = 300.0;

/// Attempts before `make_validation_pair` gives up on placement.
const PLACEMENT_RETRIES: usize = 1000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub height: usize,
    pub width: usize,
    /// Boundary depths as fractions of the height, strictly increasing.
    pub layer_boundaries: Vec<f64>,
    /// One mean intensity per layer (`layer_boundaries.len() + 1`).
    pub layer_mean_intensities: Vec<f64>,
    pub speckle_std: f64,
    /// Peak lateral boundary undulation in pixels.
    pub boundary_wobble_amplitude: f64,
    pub rng_seed: u64,
    /// Which phantom layer stands in for each measured retinal layer.
    pub layer_roles: BTreeMap<Layer, u8>,
}

impl Default for PhantomSpec {
    /// Ten-layer retina: vitreous, RNFL, GCL, IPL, INL, OPL, ONL, PR, RPE,
    /// choroid.
    fn default() -> Self {
        Self {
            height: 512,
            width: 512,
            layer_boundaries: vec![0.15, 0.22, 0.30, 0.37, 0.44, 0.50, 0.60, 0.66, 0.72],
            layer_mean_intensities: vec![0.03, 0.75, 0.35, 0.60, 0.30, 0.50, 0.25, 0.65, 0.85, 0.45],
            speckle_std: 0.05,
            boundary_wobble_amplitude: 4.0,
            rng_seed: 0,
            layer_roles: BTreeMap::from([
                (Layer::Rnfl, 1),
                (Layer::Ipl, 3),
                (Layer::Pr, 7),
                (Layer::Rpe, 8),
            ]),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height < 2 || self.width < 2 {
            return Err(Error::Validation(format!(
                "phantom must be at least 2x2, got {}x{}",
                self.height, self.width
            )));
        }
        if self.layer_mean_intensities.len() != self.layer_boundaries.len() + 1 {
            return Err(Error::Validation(format!(
                "{} boundaries need {} layer means, got {}",
                self.layer_boundaries.len(),
                self.layer_boundaries.len() + 1,
                self.layer_mean_intensities.len()
            )));
        }
        if self.layer_mean_intensities.len() > u8::MAX as usize {
            return Err(Error::Validation("too many layers".into()));
        }
        for pair in self.layer_boundaries.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::Validation(format!(
                    "layer boundaries must be strictly increasing: {} then {}",
                    pair[0], pair[1]
                )));
            }
        }
        if self
            .layer_boundaries
            .iter()
            .any(|&b| !(b > 0.0 && b < 1.0))
        {
            return Err(Error::Validation("layer boundaries must lie in (0, 1)".into()));
        }
        if self
            .layer_mean_intensities
            .iter()
            .any(|m| !(0.0..=1.0).contains(m))
        {
            return Err(Error::Validation("layer means must lie in [0, 1]".into()));
        }
        if !(self.speckle_std >= 0.0) || !(self.boundary_wobble_amplitude >= 0.0) {
            return Err(Error::Validation(
                "speckle_std and wobble amplitude must be non-negative".into(),
            ));
        }
        for (layer, &idx) in &self.layer_roles {
            if idx as usize >= self.layer_mean_intensities.len() {
                return Err(Error::Validation(format!(
                    "{layer} mapped to missing phantom layer {idx}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phantom {
    pub image: BScan,
    pub layer_map: LayerMap,
}

impl Phantom {
    /// First tissue row (label >= 1) in each column.
    pub fn surface_rows(&self) -> Vec<usize> {
        surface_rows(&self.layer_map)
    }
}

pub fn surface_rows(layer_map: &LayerMap) -> Vec<usize> {
    let (h, w) = layer_map.dim();
    (0..w)
        .map(|c| (0..h).find(|&r| layer_map[(r, c)] >= 1).unwrap_or(h))
        .collect()
}

/// Render a layered phantom. Deterministic in `spec.rng_seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let cycles: f64 = rng.random_range(0.5..2.0);
    let phases: Vec<f64> = spec
        .layer_boundaries
        .iter()
        .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
        .collect();

    // boundary depth per (boundary, column)
    let boundary_rows: Vec<Vec<f64>> = spec
        .layer_boundaries
        .iter()
        .zip(&phases)
        .map(|(&frac, &phase)| {
            (0..w)
                .map(|c| {
                    let x = c as f64 / w as f64;
                    frac * h as f64
                        + spec.boundary_wobble_amplitude
                            * (std::f64::consts::TAU * cycles * x + phase).sin()
                })
                .collect()
        })
        .collect();

    let layer_map = Array2::from_shape_fn((h, w), |(r, c)| {
        boundary_rows
            .iter()
            .filter(|rows| r as f64 >= rows[c])
            .count() as u8
    });

    let mut pixels = layer_map.mapv(|l| spec.layer_mean_intensities[l as usize] as f32);
    if spec.speckle_std > 0.0 {
        for v in pixels.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            let noise = 1.0 + spec.speckle_std * z;
            *v = (*v as f64 * noise).clamp(0.0, 1.0) as f32;
        }
    }
    let image = BScan::new(pixels, format!("phantom_{}", spec.rng_seed))?;
    Ok(Phantom { image, layer_map })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShadowSpec {
    pub col_start: usize,
    pub width: usize,
    /// Decay length in pixels.
    pub alpha: f64,
    pub start_row: usize,
}

impl ShadowSpec {
    pub fn validate(&self) -> Result<()> {
        if !(MIN_SHADOW_WIDTH..=MAX_SHADOW_WIDTH).contains(&self.width) {
            return Err(Error::Validation(format!(
                "shadow width {} outside [{MIN_SHADOW_WIDTH}, {MAX_SHADOW_WIDTH}]",
                self.width
            )));
        }
        if !(MIN_ALPHA..=MAX_ALPHA).contains(&self.alpha) {
            return Err(Error::Validation(format!(
                "shadow alpha {} outside [{MIN_ALPHA}, {MAX_ALPHA}]",
                self.alpha
            )));
        }
        Ok(())
    }

    pub fn columns(&self) -> std::ops::Range<usize> {
        self.col_start..self.col_start + self.width
    }

    /// Attenuation factor at `row` (1 above the start row).
    pub fn multiplier(&self, row: usize) -> f64 {
        if row < self.start_row {
            1.0
        } else {
            (-((row - self.start_row) as f64) / self.alpha).exp()
        }
    }
}

/// Darken a column band below `start_row`; returns the shadowed scan and a
/// binary mask of exactly the attenuated pixels.
pub fn inject_shadow(img: &BScan, spec: &ShadowSpec) -> Result<(BScan, ShadowMask)> {
    spec.validate()?;
    let (h, w) = img.shape();
    if spec.col_start + spec.width > w {
        return Err(Error::Validation(format!(
            "shadow columns {}..{} exceed width {w}",
            spec.col_start,
            spec.col_start + spec.width
        )));
    }
    if spec.start_row >= h {
        return Err(Error::Validation(format!(
            "shadow start row {} outside height {h}",
            spec.start_row
        )));
    }
    let mut pixels = img.pixels().clone();
    let mut mask = Array2::<f32>::zeros((h, w));
    for r in spec.start_row..h {
        let m = spec.multiplier(r) as f32;
        for c in spec.columns() {
            pixels[(r, c)] *= m;
            mask[(r, c)] = 1.0;
        }
    }
    Ok((
        BScan::new(pixels, img.source_id())?,
        ShadowMask::binary(mask)?,
    ))
}

/// Where artificial shadows begin.
#[derive(Debug, Clone, Copy)]
pub enum ShadowStart<'a> {
    ImageTop,
    Row(usize),
    /// Shallowest tissue row under the shadow band.
    Surface(&'a LayerMap),
}

impl ShadowStart<'_> {
    fn row_for(&self, cols: std::ops::Range<usize>) -> usize {
        match self {
            ShadowStart::ImageTop => 0,
            ShadowStart::Row(r) => *r,
            ShadowStart::Surface(map) => {
                let h = map.nrows();
                cols.map(|c| (0..h).find(|&r| map[(r, c)] >= 1).unwrap_or(h - 1))
                    .min()
                    .unwrap_or(0)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationPair {
    pub shadowed: BScan,
    pub mask: ShadowMask,
    pub ground_truth: BScan,
    pub shadows: Vec<ShadowSpec>,
}

/// Inject `n_shadows` non-overlapping shadows with widths uniform in
/// [1, 100] and decay lengths uniform in [100, 300]. Bands are separated by
/// at least one clear column so each forms its own connected region.
pub fn make_validation_pair(
    img: &BScan,
    n_shadows: usize,
    rng_seed: u64,
    start: ShadowStart<'_>,
) -> Result<ValidationPair> {
    let (h, w) = img.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let max_width = MAX_SHADOW_WIDTH.min(w);
    let mut taken = vec![false; w];
    let mut shadows = Vec::with_capacity(n_shadows);
    let mut attempts = 0;
    while shadows.len() < n_shadows {
        attempts += 1;
        if attempts > PLACEMENT_RETRIES {
            return Err(Error::Placement(format!(
                "placed {} of {n_shadows} shadows in a {w}-column image after {PLACEMENT_RETRIES} tries",
                shadows.len()
            )));
        }
        let width = rng.random_range(MIN_SHADOW_WIDTH..=max_width);
        let col_start = rng.random_range(0..=w - width);
        let alpha = rng.random_range(MIN_ALPHA..=MAX_ALPHA);
        let guard_lo = col_start.saturating_sub(1);
        let guard_hi = (col_start + width + 1).min(w);
        if taken[guard_lo..guard_hi].iter().any(|&t| t) {
            continue;
        }
        let start_row = start.row_for(col_start..col_start + width).min(h - 1);
        taken[col_start..col_start + width]
            .iter_mut()
            .for_each(|t| *t = true);
        shadows.push(ShadowSpec {
            col_start,
            width,
            alpha,
            start_row,
        });
    }

    let mut shadowed = img.clone();
    let mut mask = ShadowMask::zeros(h, w);
    for spec in &shadows {
        let (next, m) = inject_shadow(&shadowed, spec)?;
        shadowed = next;
        mask = mask.union(&m)?;
    }
    Ok(ValidationPair {
        shadowed,
        mask,
        ground_truth: img.clone(),
        shadows,
    })
}

/// Number of maximal runs of columns containing any mask pixel.
pub fn column_bands(mask: &ShadowMask) -> usize {
    let (h, w) = mask.shape();
    let mut bands = 0;
    let mut inside = false;
    for c in 0..w {
        let any = (0..h).any(|r| mask.is_set(r, c));
        if any && !inside {
            bands += 1;
        }
        inside = any;
    }
    bands
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn small_spec() -> PhantomSpec {
        PhantomSpec {
            height: 64,
            width: 48,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn noiseless_rows_equal_layer_means() {
        let spec = PhantomSpec {
            speckle_std: 0.0,
            boundary_wobble_amplitude: 0.0,
            ..small_spec()
        };
        let ph = generate_phantom(&spec).unwrap();
        for r in 0..spec.height {
            let layer = ph.layer_map[(r, 0)] as usize;
            let mean = spec.layer_mean_intensities[layer] as f32;
            assert!(ph.image.pixels().row(r).iter().all(|&v| v == mean));
            assert!(ph.layer_map.row(r).iter().all(|&l| l as usize == layer));
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_phantom(&small_spec()).unwrap();
        let b = generate_phantom(&small_spec()).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&PhantomSpec {
            rng_seed: 1,
            ..small_spec()
        })
        .unwrap();
        assert_ne!(a.image, c.image);
    }

    #[test]
    fn four_layer_histogram_has_four_modes() {
        let means = [0.7, 0.3, 0.6, 0.8];
        let spec = PhantomSpec {
            height: 256,
            width: 256,
            layer_boundaries: vec![0.25, 0.5, 0.75],
            layer_mean_intensities: means.to_vec(),
            speckle_std: 0.05,
            boundary_wobble_amplitude: 0.0,
            rng_seed: 3,
            layer_roles: BTreeMap::new(),
        };
        let ph = generate_phantom(&spec).unwrap();
        let bins = 100;
        let mut hist = vec![0usize; bins];
        for &v in ph.image.pixels() {
            hist[((v * bins as f32) as usize).min(bins - 1)] += 1;
        }
        // local maxima over a +-3 bin neighborhood that hold real mass
        let peaks: Vec<f64> = (0..bins)
            .filter(|&i| {
                let lo = i.saturating_sub(3);
                let hi = (i + 4).min(bins);
                hist[i] > 500 && (lo..hi).all(|j| hist[j] <= hist[i])
            })
            .map(|i| (i as f64 + 0.5) / bins as f64)
            .collect();
        assert_eq!(peaks.len(), 4, "peaks {peaks:?}");
        let mut sorted = means;
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (p, m) in peaks.iter().zip(sorted) {
            assert!((p - m).abs() < 0.03, "peak {p} vs mean {m}");
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = small_spec();
        s.layer_boundaries[2] = s.layer_boundaries[1];
        assert!(matches!(generate_phantom(&s), Err(Error::Validation(_))));
        let mut s = small_spec();
        s.layer_mean_intensities.pop();
        assert!(generate_phantom(&s).is_err());
        let mut s = small_spec();
        s.layer_boundaries[0] = 0.0;
        assert!(generate_phantom(&s).is_err());
    }

    fn flat(h: usize, w: usize, v: f32) -> BScan {
        BScan::constant(h, w, v).unwrap()
    }

    #[test]
    fn shadow_profile_follows_decay_length() {
        let img = flat(400, 20, 0.8);
        let spec = ShadowSpec {
            col_start: 5,
            width: 3,
            alpha: 150.0,
            start_row: 10,
        };
        let (out, mask) = inject_shadow(&img, &spec).unwrap();
        assert_eq!(out.pixels()[(10, 6)], 0.8);
        let at_alpha = out.pixels()[(160, 6)] as f64 / 0.8;
        assert!((at_alpha - (-1.0f64).exp()).abs() < 1e-6);
        assert!(((-1.0f64).exp() - 0.36788).abs() < 1e-5);
        assert_eq!(out.pixels()[(9, 6)], 0.8);
        assert_eq!(out.pixels()[(200, 4)], 0.8);
        assert_eq!(mask.count_ones(), 3 * (400 - 10));
    }

    #[test]
    fn single_column_mask_count() {
        let img = flat(50, 10, 0.5);
        let spec = ShadowSpec {
            col_start: 9,
            width: 1,
            alpha: 100.0,
            start_row: 7,
        };
        let (_, mask) = inject_shadow(&img, &spec).unwrap();
        let ones = (0..50).filter(|&r| mask.is_set(r, 9)).count();
        assert_eq!(ones, 50 - 7);
        assert_eq!(mask.count_ones(), 43);
    }

    #[test]
    fn shadow_validation() {
        let img = flat(20, 20, 0.5);
        let ok = ShadowSpec {
            col_start: 0,
            width: 5,
            alpha: 200.0,
            start_row: 0,
        };
        assert!(inject_shadow(&img, &ShadowSpec { col_start: 16, ..ok }).is_err());
        assert!(inject_shadow(&img, &ShadowSpec { width: 0, ..ok }).is_err());
        assert!(inject_shadow(&img, &ShadowSpec { width: 101, ..ok }).is_err());
        assert!(inject_shadow(&img, &ShadowSpec { alpha: 99.0, ..ok }).is_err());
        assert!(inject_shadow(&img, &ShadowSpec { alpha: 301.0, ..ok }).is_err());
    }

    #[test]
    fn validation_pair_has_two_bands() {
        let ph = generate_phantom(&PhantomSpec {
            height: 128,
            width: 256,
            ..PhantomSpec::default()
        })
        .unwrap();
        for seed in 0..20 {
            let pair =
                make_validation_pair(&ph.image, 2, seed, ShadowStart::Surface(&ph.layer_map))
                    .unwrap();
            assert_eq!(column_bands(&pair.mask), 2, "seed {seed}");
            assert_eq!(pair.ground_truth, ph.image);
            let masked: usize = pair.shadows.iter().map(|s| s.width * (128 - s.start_row)).sum();
            assert_eq!(pair.mask.count_ones(), masked);
        }
    }

    #[test]
    fn drawn_parameters_stay_in_range() {
        let img = flat(32, 256, 0.5);
        for seed in 0..300 {
            let pair = make_validation_pair(&img, 2, seed, ShadowStart::ImageTop).unwrap();
            for s in &pair.shadows {
                assert!((1..=100).contains(&s.width));
                assert!((100.0..=300.0).contains(&s.alpha));
                assert_eq!(s.start_row, 0);
            }
        }
    }

    #[test]
    fn surface_start_tracks_first_tissue_row() {
        let spec = PhantomSpec {
            height: 100,
            width: 220,
            boundary_wobble_amplitude: 0.0,
            speckle_std: 0.0,
            ..PhantomSpec::default()
        };
        let ph = generate_phantom(&spec).unwrap();
        let pair = make_validation_pair(&ph.image, 2, 5, ShadowStart::Surface(&ph.layer_map)).unwrap();
        for s in &pair.shadows {
            assert_eq!(s.start_row, 15);
        }
    }

    #[test]
    fn placement_failure_is_reported() {
        let img = flat(10, 3, 0.5);
        assert!(matches!(
            make_validation_pair(&img, 2, 0, ShadowStart::ImageTop),
            Err(Error::Placement(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn injection_only_darkens_inside_mask(
            seed in any::<u64>(), col in 0usize..30, width in 1usize..=20,
            alpha in 100.0f64..=300.0, start in 0usize..40
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let img = BScan::new(Array2::from_shape_fn((48, 50), |_| rng.random::<f32>()), "r").unwrap();
            let spec = ShadowSpec { col_start: col, width, alpha, start_row: start };
            let (out, mask) = inject_shadow(&img, &spec).unwrap();
            for ((r, c), &v) in out.pixels().indexed_iter() {
                let orig = img.pixels()[(r, c)];
                prop_assert!(v <= orig);
                if mask.is_set(r, c) {
                    if orig > 0.0 {
                        let ratio = v as f64 / orig as f64;
                        prop_assert!((ratio - spec.multiplier(r)).abs() < 1e-6);
                    }
                } else {
                    prop_assert_eq!(v.to_bits(), orig.to_bits());
                }
            }
        }
    }
}
