//! Command implementations behind the `deshadow` binary.

use std::path::{Path, PathBuf};
use std::time::Duration;

use crate::backbone::BackboneMode;
use crate::config::{Config, ShadowStartKind};
use crate::error::{Error, Result};
use crate::evaluate::{self, EvalImage, EvalReport, RoiRecord};
use crate::imaging::{self, BScan};
use crate::manifest::RunManifest;
use crate::net::mix_seed;
use crate::phantom::{self, PhantomSpec, ShadowStart};
use crate::remover::Remover;
use crate::trainer::{self, RunPaths, TrainCheckpoint, Trainer};

/// Directory searched for `resnet152.safetensors` when the config names
/// no weights file.
pub const WEIGHTS_DIR_ENV: &str = "DESHADOW_WEIGHTS_DIR";
pub const WEIGHTS_FILE: &str = "resnet152.safetensors";

pub use crate::imaging::{GROUND_TRUTH_DIR, IMAGES_DIR, MASKS_DIR};

pub const ROI_FILE: &str = "rois.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Fill in the backbone weights path from the environment if unset.
pub fn resolve_weights(cfg: &mut Config) {
    if cfg.backbone.mode == BackboneMode::Pretrained && cfg.backbone.weights.is_none() {
        if let Some(dir) = std::env::var_os(WEIGHTS_DIR_ENV) {
            cfg.backbone.weights = Some(PathBuf::from(dir).join(WEIGHTS_FILE));
        }
    }
}

/// Refuse a non-empty output directory unless `force`; with `force`, drop
/// the entries this tool writes.
pub fn prepare_out_dir(dir: &Path, force: bool, owned: &[&str]) -> Result<()> {
    if dir.exists() {
        let non_empty = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .next()
            .is_some();
        if non_empty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                dir.display()
            )));
        }
        for name in owned {
            let p = dir.join(name);
            let res = if p.is_dir() {
                std::fs::remove_dir_all(&p)
            } else if p.exists() {
                std::fs::remove_file(&p)
            } else {
                Ok(())
            };
            res.map_err(|e| Error::io(&p, e))?;
        }
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn rel(path: &Path, root: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).display().to_string()
}

pub fn phantom_stem(i: usize) -> String {
    format!("phantom_{i:04}")
}

/// Phantom triples, auto ROIs and a manifest under `out`.
pub fn simulate(cfg: &Config, out: &Path, force: bool) -> Result<RunManifest> {
    cfg.validate()?;
    let depth = cfg.output.depth()?;
    prepare_out_dir(out, force, &[IMAGES_DIR, MASKS_DIR, GROUND_TRUTH_DIR, ROI_FILE, MANIFEST_FILE])?;
    for sub in [IMAGES_DIR, MASKS_DIR, GROUND_TRUTH_DIR] {
        let p = out.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let sim = &cfg.simulate;
    let mut manifest = RunManifest::new("simulate", cfg, sim.seed);
    let mut rois = Vec::new();
    for i in 0..sim.count {
        let stem = phantom_stem(i);
        let spec = PhantomSpec {
            rng_seed: mix_seed(sim.seed, i as u64),
            ..cfg.phantom.clone()
        };
        let ph = phantom::generate_phantom(&spec)?;
        let start = match sim.shadow_start {
            ShadowStartKind::Surface => ShadowStart::Surface(&ph.layer_map),
            ShadowStartKind::ImageTop => ShadowStart::ImageTop,
        };
        let pair = phantom::make_validation_pair(
            &ph.image,
            sim.shadows_per_image,
            mix_seed(sim.seed ^ 0x5a4d_0000_0000, i as u64),
            start,
        )?;
        let name = format!("{stem}.png");
        let paths = [
            out.join(IMAGES_DIR).join(&name),
            out.join(MASKS_DIR).join(&name),
            out.join(GROUND_TRUTH_DIR).join(&name),
        ];
        imaging::save_image(&pair.shadowed, &paths[0], depth)?;
        imaging::save_mask(&pair.mask, &paths[1])?;
        imaging::save_image(&pair.ground_truth, &paths[2], depth)?;
        manifest.outputs.extend(paths.iter().map(|p| rel(p, out)));
        rois.extend(evaluate::auto_rois(
            &stem,
            &ph.layer_map,
            &pair.mask,
            &cfg.phantom.layer_roles,
            sim.rois_per_layer,
        )?);
    }
    evaluate::write_rois(out.join(ROI_FILE), &rois)?;
    manifest.outputs.push(ROI_FILE.into());
    manifest.write(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Run (or continue) the training schedule, writing checkpoints, the loss
/// log and a manifest under `out`.
pub fn train(
    cfg: &Config,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
    force: bool,
    max_phases: Option<usize>,
) -> Result<RunManifest> {
    let mut cfg = cfg.clone();
    resolve_weights(&mut cfg);
    cfg.validate()?;
    let samples = trainer::load_training_set(data, cfg.augment.out_size)?;
    let mut t = match resume {
        Some(path) => {
            let ckpt = TrainCheckpoint::load(path)?;
            std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
            Trainer::resume(&cfg, &samples, &ckpt)?
        }
        None => {
            prepare_out_dir(out, force, &["checkpoint.ckpt", "losses.csv", MANIFEST_FILE])?;
            Trainer::new(&cfg, &samples)?
        }
    }
    .with_output(out)?;
    t.run(max_phases)?;
    let paths = RunPaths {
        out_dir: out.to_path_buf(),
    };
    let mut manifest = RunManifest::new("train", &cfg, cfg.train.seed);
    manifest.backbone_checksum = Some(t.backbone().checksum().to_owned());
    manifest.phase_ledger = t.ledger().to_vec();
    manifest.stopped_early = t.header().stopped_early;
    manifest.outputs = vec![
        rel(&paths.latest_checkpoint(), out),
        rel(&paths.loss_log(), out),
    ];
    manifest.write(out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Deshadow one image at network resolution and map it back to its own size.
pub fn deshadow_image(remover: &Remover, cfg: &Config, img: &BScan) -> Result<(BScan, Duration)> {
    let (h, w) = img.shape();
    let (nh, nw) = cfg.augment.out_size;
    let input = if (h, w) == (nh, nw) {
        img.clone()
    } else {
        imaging::resize_image(img, nh, nw)?
    };
    let (mut out, took) = remover.infer_batch(std::slice::from_ref(&input))?;
    let y = out.pop().expect("one output per input");
    let y = if (h, w) == (nh, nw) {
        y
    } else {
        imaging::resize_image(&y, h, w)?
    };
    Ok((y.clipped().with_source_id(img.source_id()), took))
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferSummary {
    pub written: Vec<String>,
    pub failed: Vec<(String, String)>,
    pub mean_ms_per_image: Option<f64>,
}

/// Deshadow every image in `input` (or `input/images`) into `out`, keeping
/// file names. Per-file failures are collected rather than fatal.
pub fn infer(checkpoint: &Path, input: &Path, out: &Path, force: bool) -> Result<InferSummary> {
    let (remover, cfg) = trainer::load_remover(checkpoint)?;
    let depth = cfg.output.depth()?;
    let sub = input.join(IMAGES_DIR);
    let files = imaging::raster_files(if sub.is_dir() { &sub } else { input })?;
    if files.is_empty() {
        return Err(Error::Validation(format!("no images in {}", input.display())));
    }
    prepare_out_dir(out, force, &[MANIFEST_FILE])?;
    let mut summary = InferSummary {
        written: Vec::new(),
        failed: Vec::new(),
        mean_ms_per_image: None,
    };
    let mut total = Duration::ZERO;
    for path in &files {
        let stem = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
        let res = imaging::load_image(path)
            .and_then(|img| deshadow_image(&remover, &cfg, &img.with_source_id(&stem)))
            .and_then(|(y, took)| {
                let name = path.file_name().expect("listed files have names");
                let dst = out.join(name);
                imaging::save_image(&y, &dst, depth)?;
                Ok((rel(&dst, out), took))
            });
        match res {
            Ok((name, took)) => {
                total += took;
                summary.written.push(name);
            }
            Err(e) => {
                log::error!("{}: {e}", path.display());
                summary.failed.push((stem, e.to_string()));
            }
        }
    }
    if !summary.written.is_empty() {
        summary.mean_ms_per_image = Some(total.as_secs_f64() * 1e3 / summary.written.len() as f64);
    }
    let mut manifest = RunManifest::new("infer", &cfg, cfg.train.seed);
    manifest.outputs = summary.written.clone();
    manifest.write(out.join(MANIFEST_FILE))?;
    Ok(summary)
}

/// Score the checkpoint's remover on a dataset with ROIs; writes
/// `report.json`, `per_image.csv` and `profiles.csv`.
pub fn evaluate(
    checkpoint: &Path,
    data: &Path,
    roi_file: &Path,
    out: &Path,
    with_compensation: bool,
    force: bool,
) -> Result<EvalReport> {
    let rois: Vec<RoiRecord> = evaluate::read_rois(roi_file)?;
    let (remover, cfg) = trainer::load_remover(checkpoint)?;
    let pairs = imaging::scan_dataset(data, false)?;
    prepare_out_dir(
        out,
        force,
        &["report.json", "per_image.csv", "profiles.csv", MANIFEST_FILE],
    )?;
    let mut images = Vec::with_capacity(pairs.len());
    let mut total = Duration::ZERO;
    for p in &pairs {
        let baseline = imaging::load_image(&p.image)?.with_source_id(&p.stem);
        let (deshadowed, took) = deshadow_image(&remover, &cfg, &baseline)?;
        total += took;
        let ground_truth = p.ground_truth.as_ref().map(imaging::load_image).transpose()?;
        let mask = p.mask.as_ref().map(imaging::load_mask).transpose()?;
        images.push(EvalImage {
            stem: p.stem.clone(),
            baseline,
            deshadowed,
            ground_truth,
            mask,
        });
    }
    let comp = with_compensation.then_some(&cfg.evaluate.compensation);
    let mut report = evaluate::build_report(&images, &rois, comp, cfg.evaluate.psnr_cap_db)?;
    if !images.is_empty() {
        report.mean_ms_per_image = Some(total.as_secs_f64() * 1e3 / images.len() as f64);
    }
    evaluate::write_report(&report, &images, &rois, out)?;
    let mut manifest = RunManifest::new("evaluate", &cfg, cfg.train.seed);
    manifest.outputs = vec!["report.json".into(), "per_image.csv".into(), "profiles.csv".into()];
    manifest.write(out.join(MANIFEST_FILE))?;
    Ok(report)
}
