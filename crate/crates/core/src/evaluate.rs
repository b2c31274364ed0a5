//! Evaluation metrics, the energy-based compensation baseline and report
//! assembly.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{BScan, Layer, RegionOfInterest, ShadowMask, ROI_SIZE};
use crate::phantom::LayerMap;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Ratio `|I1 - I2| / (I1 + I2)` of pooled mean intensities over clear
/// (`I1`) and shadowed (`I2`) windows of one layer.
pub fn intralayer_contrast(
    img: &BScan,
    clear: &[RegionOfInterest],
    shadowed: &[RegionOfInterest],
) -> Result<f64> {
    if clear.is_empty() || shadowed.is_empty() {
        return Err(Error::Validation("need clear and shadowed ROIs".into()));
    }
    let layer = clear[0].layer;
    let (h, w) = img.shape();
    for roi in clear.iter().chain(shadowed) {
        roi.validate(h, w)?;
        if roi.layer != layer {
            return Err(Error::Validation(format!(
                "ROIs mix layers {} and {}",
                layer, roi.layer
            )));
        }
    }
    if clear.iter().any(|r| r.shadowed) || shadowed.iter().any(|r| !r.shadowed) {
        return Err(Error::Validation("ROI shadow flags inconsistent".into()));
    }
    let pooled = |rois: &[RegionOfInterest]| {
        let (sum, n) = rois
            .iter()
            .flat_map(|r| r.pixels())
            .fold((0.0f64, 0usize), |(s, n), p| (s + f64::from(img.pixels()[p]), n + 1));
        sum / n as f64
    };
    let (i1, i2) = (pooled(clear), pooled(shadowed));
    if i1 + i2 == 0.0 {
        return Err(Error::UndefinedContrast(format!(
            "{layer}: both ROI sets have zero mean intensity"
        )));
    }
    Ok(((i1 - i2) / (i1 + i2)).abs())
}

/// Mean intensity of each column in `cols` over rows `rows`.
pub fn lateral_profile(
    img: &BScan,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
) -> Result<Vec<f64>> {
    let (h, w) = img.shape();
    if rows.is_empty() || cols.is_empty() || rows.end > h || cols.end > w {
        return Err(Error::Validation(format!(
            "profile band rows {rows:?} cols {cols:?} invalid for {h}x{w} image"
        )));
    }
    let n = rows.len() as f64;
    Ok(cols
        .map(|c| rows.clone().map(|r| f64::from(img.pixels()[(r, c)])).sum::<f64>() / n)
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompensationExponents {
    pub contrast: f64,
    pub decompression: f64,
    pub compression: f64,
    pub threshold: f64,
}

impl Default for CompensationExponents {
    fn default() -> Self {
        Self {
            contrast: 1.0,
            decompression: 4.0,
            compression: 4.0,
            threshold: 6.0,
        }
    }
}

impl CompensationExponents {
    pub fn validate(&self) -> Result<()> {
        let ok = [self.contrast, self.decompression, self.compression, self.threshold]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0);
        if !ok {
            return Err(Error::Config(format!(
                "compensation exponents must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compensated {
    pub image: BScan,
    /// Columns with no signal, left as they were.
    pub flagged_columns: Vec<usize>,
}

/// Remaining decompressed energy from each row to the bottom of a column.
pub fn column_energy(column: &[f64], decompression: f64) -> Vec<f64> {
    let mut energy = vec![0.0; column.len()];
    let mut acc = 0.0;
    for (z, &v) in column.iter().enumerate().rev() {
        acc += v.max(0.0).powf(decompression);
        energy[z] = acc;
    }
    energy
}

/// Energy-based attenuation compensation, column by column.
///
/// With `e = I^d` (`d` the decompression exponent) and `E(z)` the sum of
/// `e` from row `z` to the bottom, each pixel becomes
/// `(e / (2 max(E(z), E(0) 10^-t)))^(1/c)` raised to the contrast exponent,
/// then clipped to [0, 1]. `t` is the threshold exponent and `c` the
/// compression exponent. The floor keeps the deepest rows, where almost no
/// energy remains, from blowing up.
pub fn compensate(img: &BScan, exps: &CompensationExponents) -> Result<Compensated> {
    exps.validate().map_err(|e| Error::Validation(e.to_string()))?;
    let (h, w) = img.shape();
    let mut out = img.pixels().clone();
    let mut flagged = Vec::new();
    for c in 0..w {
        let column: Vec<f64> = (0..h).map(|r| f64::from(img.pixels()[(r, c)])).collect();
        let energy = column_energy(&column, exps.decompression);
        if energy[0] <= 0.0 {
            flagged.push(c);
            continue;
        }
        let floor = energy[0] * 10f64.powf(-exps.threshold);
        for r in 0..h {
            let e = column[r].max(0.0).powf(exps.decompression);
            let ratio = e / (2.0 * energy[r].max(floor));
            let v = ratio.powf(1.0 / exps.compression).powf(exps.contrast);
            out[(r, c)] = v.clamp(0.0, 1.0) as f32;
        }
    }
    if !flagged.is_empty() {
        log::warn!(
            "{}: {} zero-energy column(s) left uncompensated",
            img.source_id(),
            flagged.len()
        );
    }
    Ok(Compensated {
        image: BScan::new(out, img.source_id())?,
        flagged_columns: flagged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestorationError {
    pub mae: f64,
    pub psnr_db: f64,
}

fn check_triple(a: &BScan, b: &BScan, m: &ShadowMask) -> Result<()> {
    if a.shape() != b.shape() || a.shape() != m.shape() {
        return Err(Error::shape(
            format!("{:?}", b.shape()),
            format!("{:?} / mask {:?}", a.shape(), m.shape()),
        ));
    }
    Ok(())
}

/// Error against ground truth over pixels selected by `inside`.
fn masked_error(
    test: &BScan,
    truth: &BScan,
    mask: &ShadowMask,
    inside: bool,
    psnr_cap_db: f64,
) -> Result<RestorationError> {
    check_triple(test, truth, mask)?;
    let (mut abs, mut sq, mut n) = (0.0f64, 0.0f64, 0usize);
    for ((&t, &g), &m) in test.pixels().iter().zip(truth.pixels()).zip(mask.values()) {
        if (m >= 0.5) == inside {
            let d = f64::from(t) - f64::from(g);
            abs += d.abs();
            sq += d * d;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Validation(format!(
            "no pixels {} the mask",
            if inside { "inside" } else { "outside" }
        )));
    }
    let mse = sq / n as f64;
    let psnr = if mse == 0.0 {
        psnr_cap_db
    } else {
        (10.0 * (1.0 / mse).log10()).min(psnr_cap_db)
    };
    Ok(RestorationError {
        mae: abs / n as f64,
        psnr_db: psnr,
    })
}

/// MAE and PSNR (peak 1) over masked pixels.
pub fn restoration_error(
    deshadowed: &BScan,
    ground_truth: &BScan,
    mask: &ShadowMask,
    psnr_cap_db: f64,
) -> Result<RestorationError> {
    masked_error(deshadowed, ground_truth, mask, true, psnr_cap_db)
}

/// MAE and PSNR over pixels outside the mask, where nothing should change.
pub fn outside_mask_error(
    deshadowed: &BScan,
    ground_truth: &BScan,
    mask: &ShadowMask,
    psnr_cap_db: f64,
) -> Result<RestorationError> {
    masked_error(deshadowed, ground_truth, mask, false, psnr_cap_db)
}

/// One line of an ROI file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoiRecord {
    pub stem: String,
    pub roi: RegionOfInterest,
}

#[derive(Debug, Serialize, Deserialize)]
struct RoiRow {
    stem: String,
    layer: Layer,
    shadowed: u8,
    row: usize,
    col: usize,
}

pub fn write_rois(path: impl AsRef<Path>, rois: &[RoiRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    for r in rois {
        w.serialize(RoiRow {
            stem: r.stem.clone(),
            layer: r.roi.layer,
            shadowed: u8::from(r.roi.shadowed),
            row: r.roi.row,
            col: r.roi.col,
        })
        .map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Read a tab-separated ROI file with header
/// `stem layer shadowed row col`; `shadowed` is 0 or 1.
pub fn read_rois(path: impl AsRef<Path>) -> Result<Vec<RoiRecord>> {
    let path = path.as_ref();
    let mut r = csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Validation(format!("{}: {other:?}", path.display())),
        })?;
    let mut out = Vec::new();
    for row in r.deserialize::<RoiRow>() {
        let row = row.map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        if row.shadowed > 1 {
            return Err(Error::Validation(format!(
                "{}: shadowed flag must be 0 or 1",
                path.display()
            )));
        }
        out.push(RoiRecord {
            stem: row.stem,
            roi: RegionOfInterest::new(row.row, row.col, row.layer, row.shadowed == 1),
        });
    }
    Ok(out)
}

/// Pick up to `per_side` clear and `per_side` shadowed windows per layer.
///
/// A candidate window lies entirely inside the layer and entirely inside
/// (shadowed) or outside (clear) the mask; clear windows must also sit in
/// columns the mask never touches. Picks are spread evenly over the
/// candidates in column order. Layers lacking candidates on either side
/// are skipped.
pub fn auto_rois(
    stem: &str,
    layer_map: &LayerMap,
    mask: &ShadowMask,
    roles: &BTreeMap<Layer, u8>,
    per_side: usize,
) -> Result<Vec<RoiRecord>> {
    let (h, w) = layer_map.dim();
    if mask.shape() != (h, w) {
        return Err(Error::shape(format!("{h}x{w}"), format!("{:?}", mask.shape())));
    }
    let shadow_col: Vec<bool> = (0..w).map(|c| (0..h).any(|r| mask.is_set(r, c))).collect();
    let mut out = Vec::new();
    for (&layer, &label) in roles {
        let mut clear = Vec::new();
        let mut dark = Vec::new();
        if h < ROI_SIZE || w < ROI_SIZE {
            continue;
        }
        for c in 0..=w - ROI_SIZE {
            for r in 0..=h - ROI_SIZE {
                let roi = RegionOfInterest::new(r, c, layer, false);
                if !roi.pixels().all(|p| layer_map[p] == label) {
                    continue;
                }
                if roi.pixels().all(|p| mask.is_set(p.0, p.1)) {
                    dark.push(RegionOfInterest { shadowed: true, ..roi });
                } else if (c..c + ROI_SIZE).all(|cc| !shadow_col[cc]) {
                    clear.push(roi);
                }
            }
        }
        if clear.len() < per_side || dark.len() < per_side {
            log::debug!("{stem}: too few ROI candidates for {layer}");
            continue;
        }
        for set in [&clear, &dark] {
            for k in 0..per_side {
                let idx = (2 * k + 1) * set.len() / (2 * per_side);
                out.push(RoiRecord {
                    stem: stem.to_owned(),
                    roi: set[idx],
                });
            }
        }
    }
    Ok(out)
}

/// Inputs for one report row. Images must share a shape.
#[derive(Debug, Clone)]
pub struct EvalImage {
    pub stem: String,
    pub baseline: BScan,
    pub deshadowed: BScan,
    pub ground_truth: Option<BScan>,
    pub mask: Option<ShadowMask>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub baseline: f64,
    pub deshadowed: f64,
    pub compensated: Option<f64>,
    /// `(baseline - deshadowed) / baseline` in percent; absent when the
    /// baseline contrast is zero.
    pub improvement_pct: Option<f64>,
    pub compensated_improvement_pct: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestorationRow {
    pub baseline: RestorationError,
    pub deshadowed: RestorationError,
    pub compensated: Option<RestorationError>,
    pub outside_baseline_mae: Option<f64>,
    pub outside_deshadowed_mae: Option<f64>,
    pub outside_compensated_mae: Option<f64>,
    /// Mean intensity in the deeper half of the masked region.
    pub deep_mask_mean_baseline: f64,
    pub deep_mask_mean_deshadowed: f64,
    pub deep_mask_mean_compensated: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub stem: String,
    pub contrast: BTreeMap<Layer, ContrastRow>,
    pub restoration: Option<RestorationRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Mean and sample standard deviation (0 for fewer than two values).
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LayerAggregate {
    pub baseline: MeanStd,
    pub deshadowed: MeanStd,
    pub compensated: Option<MeanStd>,
    pub improvement_pct: MeanStd,
    pub compensated_improvement_pct: Option<MeanStd>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Summary {
    /// Mean contrast over every (image, layer) measurement.
    pub mean_contrast_baseline: Option<f64>,
    pub mean_contrast_deshadowed: Option<f64>,
    pub mean_contrast_compensated: Option<f64>,
    /// Relative drop of the mean contrast, percent.
    pub contrast_reduction_pct: Option<f64>,
    pub masked_mae_baseline: Option<f64>,
    pub masked_mae_deshadowed: Option<f64>,
    pub masked_mae_compensated: Option<f64>,
    pub masked_mae_improvement_pct: Option<f64>,
    pub outside_mae_deshadowed: Option<f64>,
    pub deep_mask_mean_baseline: Option<f64>,
    pub deep_mask_mean_compensated: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub with_compensation: bool,
    pub compensation_exponents: Option<CompensationExponents>,
    pub psnr_cap_db: f64,
    pub images: Vec<ImageReport>,
    pub layers: BTreeMap<Layer, LayerAggregate>,
    pub summary: Summary,
    /// Images without any ROI, skipped for contrast.
    pub skipped: Vec<String>,
    pub mean_ms_per_image: Option<f64>,
}

fn contrast_for(img: &BScan, rois: &[RegionOfInterest], layer: Layer) -> Result<Option<f64>> {
    let clear: Vec<_> = rois.iter().filter(|r| r.layer == layer && !r.shadowed).copied().collect();
    let dark: Vec<_> = rois.iter().filter(|r| r.layer == layer && r.shadowed).copied().collect();
    if clear.is_empty() || dark.is_empty() {
        return Ok(None);
    }
    intralayer_contrast(img, &clear, &dark).map(Some)
}

fn deep_mask_mean(img: &BScan, mask: &ShadowMask) -> f64 {
    let (h, w) = mask.shape();
    let mut sum = 0.0;
    let mut n = 0usize;
    for c in 0..w {
        let rows: Vec<usize> = (0..h).filter(|&r| mask.is_set(r, c)).collect();
        let (Some(&top), Some(&bottom)) = (rows.first(), rows.last()) else {
            continue;
        };
        let mid = (top + bottom).div_ceil(2);
        for &r in rows.iter().filter(|&&r| r >= mid) {
            sum += f64::from(img.pixels()[(r, c)]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn pct_drop(before: f64, after: f64) -> Option<f64> {
    (before != 0.0).then(|| 100.0 * (before - after) / before)
}

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

/// Contrast, restoration and compensation metrics for every image plus
/// per-layer aggregates. Undefined contrasts are logged and left out.
pub fn build_report(
    images: &[EvalImage],
    rois: &[RoiRecord],
    compensation: Option<&CompensationExponents>,
    psnr_cap_db: f64,
) -> Result<EvalReport> {
    let mut reports = Vec::with_capacity(images.len());
    let mut skipped = Vec::new();
    for item in images {
        let mine: Vec<RegionOfInterest> =
            rois.iter().filter(|r| r.stem == item.stem).map(|r| r.roi).collect();
        let comp = compensation
            .map(|e| compensate(&item.baseline, e).map(|c| c.image))
            .transpose()?;
        let mut contrast = BTreeMap::new();
        if mine.is_empty() {
            log::warn!("{}: no ROIs, skipped for contrast", item.stem);
            skipped.push(item.stem.clone());
        }
        for layer in Layer::ALL {
            let measured = (|| -> Result<Option<ContrastRow>> {
                let Some(b) = contrast_for(&item.baseline, &mine, layer)? else {
                    return Ok(None);
                };
                let d = contrast_for(&item.deshadowed, &mine, layer)?.expect("same ROIs");
                let c = match &comp {
                    Some(img) => contrast_for(img, &mine, layer)?,
                    None => None,
                };
                Ok(Some(ContrastRow {
                    baseline: b,
                    deshadowed: d,
                    compensated: c,
                    improvement_pct: pct_drop(b, d),
                    compensated_improvement_pct: c.and_then(|c| pct_drop(b, c)),
                }))
            })();
            match measured {
                Ok(Some(row)) => {
                    contrast.insert(layer, row);
                }
                Ok(None) => {}
                Err(Error::UndefinedContrast(msg)) => log::warn!("{}: {msg}", item.stem),
                Err(e) => return Err(e),
            }
        }
        let restoration = match (&item.ground_truth, &item.mask) {
            (Some(gt), Some(mask)) if mask.count_ones() > 0 => {
                let mask = mask.binarize(0.5);
                let any_outside = mask.count_ones() < mask.values().len();
                let outside = |img: &BScan| -> Result<Option<f64>> {
                    if any_outside {
                        Ok(Some(outside_mask_error(img, gt, &mask, psnr_cap_db)?.mae))
                    } else {
                        Ok(None)
                    }
                };
                Some(RestorationRow {
                    baseline: restoration_error(&item.baseline, gt, &mask, psnr_cap_db)?,
                    deshadowed: restoration_error(&item.deshadowed, gt, &mask, psnr_cap_db)?,
                    compensated: comp
                        .as_ref()
                        .map(|c| restoration_error(c, gt, &mask, psnr_cap_db))
                        .transpose()?,
                    outside_baseline_mae: outside(&item.baseline)?,
                    outside_deshadowed_mae: outside(&item.deshadowed)?,
                    outside_compensated_mae: comp.as_ref().map(outside).transpose()?.flatten(),
                    deep_mask_mean_baseline: deep_mask_mean(&item.baseline, &mask),
                    deep_mask_mean_deshadowed: deep_mask_mean(&item.deshadowed, &mask),
                    deep_mask_mean_compensated: comp.as_ref().map(|c| deep_mask_mean(c, &mask)),
                })
            }
            _ => None,
        };
        reports.push(ImageReport {
            stem: item.stem.clone(),
            contrast,
            restoration,
        });
    }

    let mut layers = BTreeMap::new();
    for layer in Layer::ALL {
        let rows: Vec<&ContrastRow> = reports.iter().filter_map(|r| r.contrast.get(&layer)).collect();
        let col = |f: &dyn Fn(&ContrastRow) -> Option<f64>| -> Vec<f64> {
            rows.iter().filter_map(|r| f(r)).collect()
        };
        let with_comp = compensation.is_some();
        layers.insert(
            layer,
            LayerAggregate {
                baseline: MeanStd::of(&col(&|r| Some(r.baseline))),
                deshadowed: MeanStd::of(&col(&|r| Some(r.deshadowed))),
                compensated: with_comp.then(|| MeanStd::of(&col(&|r| r.compensated))),
                improvement_pct: MeanStd::of(&col(&|r| r.improvement_pct)),
                compensated_improvement_pct: with_comp
                    .then(|| MeanStd::of(&col(&|r| r.compensated_improvement_pct))),
            },
        );
    }

    let all_rows: Vec<&ContrastRow> = reports.iter().flat_map(|r| r.contrast.values()).collect();
    let rest: Vec<&RestorationRow> = reports.iter().filter_map(|r| r.restoration.as_ref()).collect();
    let cb = mean(&all_rows.iter().map(|r| r.baseline).collect::<Vec<_>>());
    let cd = mean(&all_rows.iter().map(|r| r.deshadowed).collect::<Vec<_>>());
    let cc = mean(&all_rows.iter().filter_map(|r| r.compensated).collect::<Vec<_>>());
    let mb = mean(&rest.iter().map(|r| r.baseline.mae).collect::<Vec<_>>());
    let md = mean(&rest.iter().map(|r| r.deshadowed.mae).collect::<Vec<_>>());
    let summary = Summary {
        mean_contrast_baseline: cb,
        mean_contrast_deshadowed: cd,
        mean_contrast_compensated: cc,
        contrast_reduction_pct: cb.zip(cd).and_then(|(b, d)| pct_drop(b, d)),
        masked_mae_baseline: mb,
        masked_mae_deshadowed: md,
        masked_mae_compensated: mean(
            &rest.iter().filter_map(|r| r.compensated.map(|c| c.mae)).collect::<Vec<_>>(),
        ),
        masked_mae_improvement_pct: mb.zip(md).and_then(|(b, d)| pct_drop(b, d)),
        outside_mae_deshadowed: mean(
            &rest.iter().filter_map(|r| r.outside_deshadowed_mae).collect::<Vec<_>>(),
        ),
        deep_mask_mean_baseline: mean(
            &rest.iter().map(|r| r.deep_mask_mean_baseline).collect::<Vec<_>>(),
        ),
        deep_mask_mean_compensated: mean(
            &rest.iter().filter_map(|r| r.deep_mask_mean_compensated).collect::<Vec<_>>(),
        ),
    };

    Ok(EvalReport {
        schema_version: REPORT_SCHEMA_VERSION,
        with_compensation: compensation.is_some(),
        compensation_exponents: compensation.copied(),
        psnr_cap_db,
        images: reports,
        layers,
        summary,
        skipped,
        mean_ms_per_image: None,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// Write `report.json`, `per_image.csv` and `profiles.csv` into `out_dir`.
pub fn write_report(
    report: &EvalReport,
    images: &[EvalImage],
    rois: &[RoiRecord],
    out_dir: &Path,
) -> Result<()> {
    let json_path = out_dir.join("report.json");
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;

    let csv_err = |p: &Path, e: csv::Error| Error::Validation(format!("{}: {e}", p.display()));
    let per_image = out_dir.join("per_image.csv");
    let mut w = csv::Writer::from_path(&per_image).map_err(|e| csv_err(&per_image, e))?;
    let mut header = vec!["stem", "layer", "baseline", "deshadowed", "improvement_pct"];
    if report.with_compensation {
        header.extend(["compensated", "compensated_improvement_pct"]);
    }
    w.write_record(&header).map_err(|e| csv_err(&per_image, e))?;
    for img in &report.images {
        for (layer, row) in &img.contrast {
            let mut rec = vec![
                img.stem.clone(),
                layer.to_string(),
                format!("{:.6}", row.baseline),
                format!("{:.6}", row.deshadowed),
                opt(row.improvement_pct),
            ];
            if report.with_compensation {
                rec.push(opt(row.compensated));
                rec.push(opt(row.compensated_improvement_pct));
            }
            w.write_record(&rec).map_err(|e| csv_err(&per_image, e))?;
        }
    }
    w.flush().map_err(|e| Error::io(&per_image, e))?;

    // lateral profiles over the rows spanned by each layer's ROIs
    let profiles = out_dir.join("profiles.csv");
    let mut w = csv::Writer::from_path(&profiles).map_err(|e| csv_err(&profiles, e))?;
    w.write_record(["stem", "layer", "variant", "col", "value"])
        .map_err(|e| csv_err(&profiles, e))?;
    for item in images {
        let comp = report
            .compensation_exponents
            .map(|e| compensate(&item.baseline, &e).map(|c| c.image))
            .transpose()?;
        for layer in Layer::ALL {
            let rows: Vec<usize> = rois
                .iter()
                .filter(|r| r.stem == item.stem && r.roi.layer == layer)
                .flat_map(|r| [r.roi.row, r.roi.row + r.roi.size])
                .collect();
            let (Some(&top), Some(&bottom)) = (rows.iter().min(), rows.iter().max()) else {
                continue;
            };
            let mut variants = vec![("baseline", &item.baseline), ("deshadowed", &item.deshadowed)];
            if let Some(c) = &comp {
                variants.push(("compensated", c));
            }
            for (name, img) in variants {
                let prof = lateral_profile(img, top..bottom, 0..img.width())?;
                for (c, v) in prof.iter().enumerate() {
                    w.write_record([
                        item.stem.as_str(),
                        layer.as_str(),
                        name,
                        &c.to_string(),
                        &format!("{v:.6}"),
                    ])
                    .map_err(|e| csv_err(&profiles, e))?;
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io(&profiles, e))
}
