//! Alternating adversarial training schedule.
//!
//! The detector is pretrained once on (image, mask) pairs. Each cycle then
//! trains the remover against the frozen detector, and the detector on the
//! remover's current outputs followed by the original images, with the
//! remover frozen. Every random choice derives from `(seed, phase, epoch,
//! position)` or `(seed, step)`, so a checkpoint only needs counters to
//! continue bit-identically.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::augment::augment_pair;
use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::detector::{bce, Detector};
use crate::error::{Error, Result};
use crate::imaging::{self, BScan, ShadowMask};
use crate::losses::{total_loss, LossBreakdown};
use crate::net::{self, mix_seed};
use crate::optim::Adam;
use crate::remover::{Deshadower, ForwardMode, Remover};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    /// Each network's learning rate halves after this many of its own
    /// epochs.
    pub lr_halving_period: usize,
    pub detector_pretrain_epochs: usize,
    pub remover_epochs: usize,
    pub detector_on_removed_epochs: usize,
    pub detector_on_gt_epochs: usize,
    pub cycles: usize,
    pub seed: u64,
    pub augment: bool,
    /// Stop when the probe loss improves by less than
    /// `early_stop_min_improvement` this many cycles in a row; 0 disables.
    pub early_stop_cycles: usize,
    pub early_stop_min_improvement: f64,
    pub probe_size: usize,
    /// Keep one checkpoint per phase instead of only the latest.
    pub keep_checkpoints: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            batch: 2,
            lr_halving_period: 10,
            detector_pretrain_epochs: 5,
            remover_epochs: 1,
            detector_on_removed_epochs: 5,
            detector_on_gt_epochs: 5,
            cycles: 10,
            seed: 0,
            augment: true,
            early_stop_cycles: 3,
            early_stop_min_improvement: 0.01,
            probe_size: 2,
            keep_checkpoints: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("batch", self.batch),
            ("lr_halving_period", self.lr_halving_period),
            ("detector_pretrain_epochs", self.detector_pretrain_epochs),
            ("remover_epochs", self.remover_epochs),
            ("detector_on_removed_epochs", self.detector_on_removed_epochs),
            ("detector_on_gt_epochs", self.detector_on_gt_epochs),
            ("cycles", self.cycles),
            ("probe_size", self.probe_size),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("train.{name} must be >= 1")));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("train.lr = {} must be > 0", self.lr)));
        }
        if !(self.early_stop_min_improvement >= 0.0) {
            return Err(Error::Config("early_stop_min_improvement must be >= 0".into()));
        }
        Ok(())
    }

    /// Learning rate after `epochs` completed epochs of one network.
    pub fn lr_at(&self, epochs: u64) -> f64 {
        let halvings = epochs / self.lr_halving_period as u64;
        self.lr * 0.5f64.powi(halvings.min(1 << 20) as i32)
    }

    pub fn epochs_of(&self, phase: PhaseKind) -> usize {
        match phase {
            PhaseKind::DetectorPretrain => self.detector_pretrain_epochs,
            PhaseKind::Remover => self.remover_epochs,
            PhaseKind::DetectorOnRemoved => self.detector_on_removed_epochs,
            PhaseKind::DetectorOnGroundTruth => self.detector_on_gt_epochs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhaseKind {
    DetectorPretrain,
    Remover,
    DetectorOnRemoved,
    #[serde(rename = "detector-on-gt")]
    DetectorOnGroundTruth,
}

impl PhaseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PhaseKind::DetectorPretrain => "detector-pretrain",
            PhaseKind::Remover => "remover",
            PhaseKind::DetectorOnRemoved => "detector-on-removed",
            PhaseKind::DetectorOnGroundTruth => "detector-on-gt",
        }
    }

    pub fn trains_remover(&self) -> bool {
        matches!(self, PhaseKind::Remover)
    }
}

/// Flat phase list: pretraining (cycle 0), then three phases per cycle.
pub fn schedule(cfg: &TrainConfig) -> Vec<(usize, PhaseKind)> {
    let mut out = vec![(0, PhaseKind::DetectorPretrain)];
    for c in 1..=cfg.cycles {
        out.push((c, PhaseKind::Remover));
        out.push((c, PhaseKind::DetectorOnRemoved));
        out.push((c, PhaseKind::DetectorOnGroundTruth));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub index: usize,
    pub cycle: usize,
    pub phase: PhaseKind,
    pub network: String,
    pub epochs: usize,
    pub steps: u64,
    pub lr_first: f64,
    pub lr_last: f64,
    /// Mean loss per epoch (total generator loss or detector BCE).
    pub epoch_losses: Vec<f64>,
    pub trained_hash_before: String,
    pub trained_hash_after: String,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
}

/// Everything besides tensors needed to continue a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHeader {
    pub next_phase: usize,
    pub global_step: u64,
    pub detector_epochs: u64,
    pub remover_epochs: u64,
    pub detector_adam_steps: u64,
    pub remover_adam_steps: u64,
    /// All randomness derives from this seed and the counters above.
    pub rng_seed: u64,
    pub backbone_checksum: String,
    pub ledger: Vec<PhaseRecord>,
    pub probe_history: Vec<f64>,
    pub stopped_early: bool,
    pub config_toml: String,
}

pub type TrainCheckpoint = Checkpoint<TrainHeader>;

/// One training pair at network resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub stem: String,
    pub image: BScan,
    pub mask: ShadowMask,
}

/// Load `images/` + `masks/` and resize to the network input size.
pub fn load_training_set(root: impl AsRef<Path>, size: (usize, usize)) -> Result<Vec<TrainSample>> {
    let pairs = imaging::scan_dataset(root, true)?;
    pairs
        .into_iter()
        .map(|p| {
            let image = imaging::load_image(&p.image)?;
            let mask = imaging::load_mask(p.mask.as_ref().expect("masks required"))?;
            if mask.shape() != image.shape() {
                return Err(Error::shape(
                    format!("mask {:?}", image.shape()),
                    format!("{:?} for {}", mask.shape(), p.stem),
                ));
            }
            Ok(TrainSample {
                image: imaging::resize_image(&image, size.0, size.1)?.with_source_id(&p.stem),
                mask: imaging::resize_mask(&mask, size.0, size.1)?,
                stem: p.stem,
            })
        })
        .collect()
}

/// Run `deshadower` over every sample image, in batches.
pub fn regenerate_inputs(
    deshadower: &dyn Deshadower,
    samples: &[TrainSample],
    batch: usize,
) -> Result<Vec<BScan>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&BScan> = chunk.iter().map(|s| &s.image).collect();
        let y = deshadower.deshadow(&net::bscans_to_tensor(&refs)?)?;
        for (a, s) in net::tensor_to_arrays(&y)?.into_iter().zip(chunk) {
            out.push(BScan::new(a, s.image.source_id())?);
        }
    }
    Ok(out)
}

fn masks_tensor(masks: &[&ShadowMask]) -> Tensor {
    let (h, w) = masks[0].shape();
    let data: Vec<f32> = masks.iter().flat_map(|m| m.values().iter().copied()).collect();
    Tensor::from_slice(&data).view([masks.len() as i64, 1, h as i64, w as i64])
}

const CSV_HEADER: &str = "step,cycle,phase,epoch,lr,content,style,shadow,tv,total,bce";

/// Per-step loss log. On resume, rows past the checkpoint step are dropped.
struct LossLog {
    file: File,
}

impl LossLog {
    fn open(path: &Path, resume_step: Option<u64>) -> Result<Self> {
        let mut keep = Vec::new();
        if let (Some(step), true) = (resume_step, path.exists()) {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(path, e))?;
                let s: u64 = line
                    .split(',')
                    .next()
                    .and_then(|v| v.parse().ok())
                    .ok_or_else(|| Error::Validation(format!("bad loss log row {line:?}")))?;
                if s <= step {
                    keep.push(line);
                }
            }
        }
        let mut file = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        writeln!(file, "{CSV_HEADER}").map_err(|e| Error::io(path, e))?;
        for line in keep {
            writeln!(file, "{line}").map_err(|e| Error::io(path, e))?;
        }
        Ok(Self { file })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.file, "{}", fields.join(",")).map_err(|e| Error::io("loss log", e))
    }
}

/// Where a run writes its artifacts.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub out_dir: PathBuf,
}

impl RunPaths {
    pub fn latest_checkpoint(&self) -> PathBuf {
        self.out_dir.join("checkpoint.ckpt")
    }

    pub fn phase_checkpoint(&self, index: usize) -> PathBuf {
        self.out_dir.join(format!("checkpoint-phase{index:03}.ckpt"))
    }

    pub fn loss_log(&self) -> PathBuf {
        self.out_dir.join("losses.csv")
    }
}

pub struct Trainer<'a> {
    cfg: Config,
    data: &'a [TrainSample],
    backbone: Backbone,
    pub detector: Detector,
    pub remover: Remover,
    det_opt: Adam,
    rem_opt: Adam,
    header: TrainHeader,
    log: Option<LossLog>,
    paths: Option<RunPaths>,
}

impl<'a> Trainer<'a> {
    /// Fresh networks with weights derived from the training seed.
    pub fn new(cfg: &Config, data: &'a [TrainSample]) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(Error::Validation("training set is empty".into()));
        }
        for s in data {
            if s.image.shape() != cfg.augment.out_size || s.mask.shape() != cfg.augment.out_size {
                return Err(Error::shape(
                    format!("{:?}", cfg.augment.out_size),
                    format!("{:?} for {}", s.image.shape(), s.stem),
                ));
            }
        }
        let backbone = Backbone::load(&cfg.backbone)?;
        let seed = cfg.train.seed;
        let detector = Detector::new(&cfg.detector, mix_seed(seed, 1))?;
        let remover = Remover::new(&cfg.remover, mix_seed(seed, 2))?;
        let det_opt = Adam::new(detector.var_store(), cfg.adam);
        let rem_opt = Adam::new(remover.var_store(), cfg.adam);
        let header = TrainHeader {
            next_phase: 0,
            global_step: 0,
            detector_epochs: 0,
            remover_epochs: 0,
            detector_adam_steps: 0,
            remover_adam_steps: 0,
            rng_seed: seed,
            backbone_checksum: backbone.checksum().to_owned(),
            ledger: Vec::new(),
            probe_history: Vec::new(),
            stopped_early: false,
            config_toml: cfg.to_toml(),
        };
        Ok(Self {
            cfg: cfg.clone(),
            data,
            backbone,
            detector,
            remover,
            det_opt,
            rem_opt,
            header,
            log: None,
            paths: None,
        })
    }

    /// Continue from a checkpoint written by a run with the same config.
    pub fn resume(cfg: &Config, data: &'a [TrainSample], ckpt: &TrainCheckpoint) -> Result<Self> {
        if ckpt.config_hash != cfg.hash() {
            return Err(Error::Config(
                "checkpoint was written with a different configuration".into(),
            ));
        }
        let mut t = Self::new(cfg, data)?;
        if ckpt.header.backbone_checksum != t.backbone.checksum() {
            return Err(Error::Checkpoint("backbone weights differ from the checkpointed run".into()));
        }
        load_net_weights(t.detector.var_store(), "detector", &ckpt.tensors)?;
        load_net_weights(t.remover.var_store(), "remover", &ckpt.tensors)?;
        let lookup = |prefix: &'static str| {
            move |k: &str| ckpt.tensors.get(&format!("{prefix}.{k}")).map(|t| t.shallow_clone())
        };
        t.det_opt
            .load_state(ckpt.header.detector_adam_steps, &lookup("detector_adam"))?;
        t.rem_opt
            .load_state(ckpt.header.remover_adam_steps, &lookup("remover_adam"))?;
        t.header = ckpt.header.clone();
        Ok(t)
    }

    /// Write checkpoints and the loss log under `out_dir`.
    pub fn with_output(mut self, out_dir: impl Into<PathBuf>) -> Result<Self> {
        let paths = RunPaths {
            out_dir: out_dir.into(),
        };
        std::fs::create_dir_all(&paths.out_dir).map_err(|e| Error::io(&paths.out_dir, e))?;
        let resume_step = (self.header.next_phase > 0).then_some(self.header.global_step);
        self.log = Some(LossLog::open(&paths.loss_log(), resume_step)?);
        self.paths = Some(paths);
        Ok(self)
    }

    pub fn header(&self) -> &TrainHeader {
        &self.header
    }

    pub fn ledger(&self) -> &[PhaseRecord] {
        &self.header.ledger
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn is_finished(&self) -> bool {
        self.header.stopped_early || self.header.next_phase >= schedule(&self.cfg.train).len()
    }

    pub fn checkpoint(&self) -> Result<TrainCheckpoint> {
        let mut header = self.header.clone();
        header.detector_adam_steps = self.det_opt.step_count();
        header.remover_adam_steps = self.rem_opt.step_count();
        let mut tensors = BTreeMap::new();
        for (name, t) in net::sorted_variables(self.detector.var_store()) {
            tensors.insert(format!("detector.{name}"), t.detach().copy());
        }
        for (name, t) in net::sorted_variables(self.remover.var_store()) {
            tensors.insert(format!("remover.{name}"), t.detach().copy());
        }
        for (name, t) in self.det_opt.state() {
            tensors.insert(format!("detector_adam.{name}"), t.copy());
        }
        for (name, t) in self.rem_opt.state() {
            tensors.insert(format!("remover_adam.{name}"), t.copy());
        }
        Ok(Checkpoint {
            config_hash: self.cfg.hash(),
            header,
            tensors,
        })
    }

    /// Run remaining phases. `max_phases` stops early after that many
    /// phases of this call, leaving a resumable checkpoint.
    pub fn run(&mut self, max_phases: Option<usize>) -> Result<()> {
        let plan = schedule(&self.cfg.train);
        let mut done = 0;
        while !self.is_finished() && max_phases.is_none_or(|m| done < m) {
            let (cycle, phase) = plan[self.header.next_phase];
            self.run_phase(self.header.next_phase, cycle, phase)?;
            self.header.next_phase += 1;
            done += 1;
            if phase == PhaseKind::DetectorOnGroundTruth {
                self.after_cycle()?;
            }
            self.save_checkpoint()?;
        }
        Ok(())
    }

    fn save_checkpoint(&self) -> Result<()> {
        let Some(paths) = &self.paths else {
            return Ok(());
        };
        let ckpt = self.checkpoint()?;
        ckpt.save(paths.latest_checkpoint())?;
        if self.cfg.train.keep_checkpoints {
            ckpt.save(paths.phase_checkpoint(self.header.next_phase - 1))?;
        }
        Ok(())
    }

    fn after_cycle(&mut self) -> Result<()> {
        let probe = self.probe_loss()?;
        log::info!("probe loss {probe:.6}");
        self.header.probe_history.push(probe);
        let k = self.cfg.train.early_stop_cycles;
        let h = &self.header.probe_history;
        if k > 0 && h.len() > k {
            let stalled = h.windows(2).rev().take(k).all(|w| {
                let gain = if w[0] != 0.0 { (w[0] - w[1]) / w[0].abs() } else { 0.0 };
                gain < self.cfg.train.early_stop_min_improvement
            });
            if stalled {
                log::info!("stopping: probe loss stalled for {k} cycles");
                self.header.stopped_early = true;
            }
        }
        Ok(())
    }

    /// Generator loss on the first `probe_size` training images, eval mode.
    pub fn probe_loss(&self) -> Result<f64> {
        let n = self.cfg.train.probe_size.min(self.data.len());
        let refs: Vec<&BScan> = self.data[..n].iter().map(|s| &s.image).collect();
        let x = net::bscans_to_tensor(&refs)?;
        tch::no_grad(|| {
            let mask = self.detector.forward(&x)?;
            let d = self.remover.forward_t(&x, ForwardMode::EVAL)?;
            let terms = total_loss(&x, &d, &mask, &self.backbone, &self.detector, &self.cfg.loss)?;
            Ok(terms.breakdown(&self.cfg.loss).total)
        })
    }

    fn epoch_order(&self, phase_index: usize, epoch: usize) -> Vec<usize> {
        let n = self.data.len();
        let batch = self.cfg.train.batch;
        let key = mix_seed(mix_seed(self.cfg.train.seed, 0x5eed_0000 + phase_index as u64), epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(key));
        // fill a short final batch from the front so batches stay full
        let mut i = 0;
        while order.len() % batch != 0 {
            order.push(order[i % n]);
            i += 1;
        }
        order
    }

    fn draw_seed(&self, phase_index: usize, epoch: usize, position: usize) -> u64 {
        let a = mix_seed(self.cfg.train.seed, 0xa06_0000 + phase_index as u64);
        mix_seed(mix_seed(a, epoch as u64), position as u64)
    }

    fn augmented(&self, img: &BScan, mask: &ShadowMask, seed: u64) -> Result<(BScan, ShadowMask)> {
        if self.cfg.train.augment {
            augment_pair(img, mask, &self.cfg.augment, seed)
        } else {
            Ok((img.clone(), mask.clone()))
        }
    }

    fn run_phase(&mut self, index: usize, cycle: usize, phase: PhaseKind) -> Result<()> {
        let epochs = self.cfg.train.epochs_of(phase);
        log::info!("phase {index} (cycle {cycle}): {} for {epochs} epoch(s)", phase.as_str());
        let trains_remover = phase.trains_remover();
        if trains_remover {
            self.detector.freeze();
            self.remover.unfreeze();
        } else {
            self.remover.freeze();
            self.detector.unfreeze();
        }
        let (trained_before, frozen_before) = self.hashes(trains_remover)?;

        let inputs: Vec<BScan> = match phase {
            PhaseKind::DetectorOnRemoved => {
                regenerate_inputs(&self.remover, self.data, self.cfg.train.batch)?
            }
            _ => self.data.iter().map(|s| s.image.clone()).collect(),
        };

        let steps_before = self.header.global_step;
        let mut epoch_losses = Vec::with_capacity(epochs);
        let mut lr_first = None;
        let mut lr_last = 0.0;
        for epoch in 0..epochs {
            let lr = if trains_remover {
                self.cfg.train.lr_at(self.header.remover_epochs)
            } else {
                self.cfg.train.lr_at(self.header.detector_epochs)
            };
            lr_first.get_or_insert(lr);
            lr_last = lr;
            let order = self.epoch_order(index, epoch);
            let mut sum = 0.0;
            let mut count = 0usize;
            for (b, chunk) in order.chunks(self.cfg.train.batch).enumerate() {
                let mut imgs = Vec::with_capacity(chunk.len());
                let mut masks = Vec::with_capacity(chunk.len());
                for (k, &i) in chunk.iter().enumerate() {
                    let seed = self.draw_seed(index, epoch, b * self.cfg.train.batch + k);
                    let (img, mask) = self.augmented(&inputs[i], &self.data[i].mask, seed)?;
                    imgs.push(img);
                    masks.push(mask);
                }
                let loss = if trains_remover {
                    self.remover_step(&imgs, lr, cycle, phase, epoch)?
                } else {
                    self.detector_step(&imgs, &masks, lr, cycle, phase, epoch)?
                };
                sum += loss;
                count += 1;
            }
            let mean = sum / count.max(1) as f64;
            log::info!("  epoch {epoch}: mean loss {mean:.6} (lr {lr:e})");
            epoch_losses.push(mean);
            if trains_remover {
                self.header.remover_epochs += 1;
            } else {
                self.header.detector_epochs += 1;
            }
        }

        let (trained_after, frozen_after) = self.hashes(trains_remover)?;
        if frozen_before != frozen_after {
            return Err(Error::Contract(format!(
                "frozen network changed during {}",
                phase.as_str()
            )));
        }
        self.detector.unfreeze();
        self.remover.unfreeze();
        self.header.ledger.push(PhaseRecord {
            index,
            cycle,
            phase,
            network: if trains_remover { "remover" } else { "detector" }.into(),
            epochs,
            steps: self.header.global_step - steps_before,
            lr_first: lr_first.unwrap_or(lr_last),
            lr_last,
            epoch_losses,
            trained_hash_before: trained_before,
            trained_hash_after: trained_after,
            frozen_hash_before: frozen_before,
            frozen_hash_after: frozen_after,
        });
        Ok(())
    }

    fn hashes(&self, trains_remover: bool) -> Result<(String, String)> {
        let (d, r) = (self.detector.weight_hash()?, self.remover.weight_hash()?);
        Ok(if trains_remover { (r, d) } else { (d, r) })
    }

    fn detector_step(
        &mut self,
        imgs: &[BScan],
        masks: &[ShadowMask],
        lr: f64,
        cycle: usize,
        phase: PhaseKind,
        epoch: usize,
    ) -> Result<f64> {
        if self.detector.is_frozen() || !self.remover.is_frozen() {
            return Err(Error::Contract("detector step needs a frozen remover only".into()));
        }
        let refs: Vec<&BScan> = imgs.iter().collect();
        let x = net::bscans_to_tensor(&refs)?;
        let y = masks_tensor(&masks.iter().collect::<Vec<_>>());
        let loss = bce(&self.detector.forward(&x)?, &y);
        self.det_opt.zero_grad();
        loss.backward();
        self.det_opt.step(lr);
        self.header.global_step += 1;
        let v = loss.double_value(&[]);
        self.log_row(cycle, phase, epoch, lr, None, Some(v))?;
        Ok(v)
    }

    fn remover_step(
        &mut self,
        imgs: &[BScan],
        lr: f64,
        cycle: usize,
        phase: PhaseKind,
        epoch: usize,
    ) -> Result<f64> {
        if !self.detector.is_frozen() || self.remover.is_frozen() {
            return Err(Error::Contract("remover step needs a frozen detector".into()));
        }
        let refs: Vec<&BScan> = imgs.iter().collect();
        let x = net::bscans_to_tensor(&refs)?;
        let pred_mask = tch::no_grad(|| self.detector.forward(&x))?;
        let mode = self
            .remover
            .train_mode(mix_seed(self.cfg.train.seed ^ 0xd50, self.header.global_step));
        let d = self.remover.forward_t(&x, mode)?;
        let terms = total_loss(&x, &d, &pred_mask, &self.backbone, &self.detector, &self.cfg.loss)?;
        self.rem_opt.zero_grad();
        terms.total.backward();
        self.rem_opt.step(lr);
        self.header.global_step += 1;
        let bd = terms.breakdown(&self.cfg.loss);
        self.log_row(cycle, phase, epoch, lr, Some(bd), None)?;
        Ok(bd.total)
    }

    fn log_row(
        &mut self,
        cycle: usize,
        phase: PhaseKind,
        epoch: usize,
        lr: f64,
        gen: Option<LossBreakdown>,
        bce: Option<f64>,
    ) -> Result<()> {
        let Some(log) = &mut self.log else {
            return Ok(());
        };
        let f = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        log.row(&[
            self.header.global_step.to_string(),
            cycle.to_string(),
            phase.as_str().to_owned(),
            epoch.to_string(),
            format!("{lr:e}"),
            f(gen.map(|g| g.content)),
            f(gen.map(|g| g.style)),
            f(gen.map(|g| g.shadow)),
            f(gen.map(|g| g.tv)),
            f(gen.map(|g| g.total)),
            f(bce),
        ])
    }
}

fn load_net_weights(
    vs: &tch::nn::VarStore,
    prefix: &str,
    tensors: &BTreeMap<String, Tensor>,
) -> Result<()> {
    tch::no_grad(|| {
        for (name, var) in net::sorted_variables(vs) {
            let key = format!("{prefix}.{name}");
            let src = tensors
                .get(&key)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {key}")))?;
            if src.size() != var.size() {
                return Err(Error::Checkpoint(format!(
                    "{key}: shape {:?}, expected {:?}",
                    src.size(),
                    var.size()
                )));
            }
            var.shallow_clone().copy_(&src.to_kind(var.kind()));
        }
        Ok(())
    })
}

/// Rebuild the remover stored in a training checkpoint, with its config.
pub fn load_remover(path: impl AsRef<Path>) -> Result<(Remover, Config)> {
    let ckpt = TrainCheckpoint::load(path)?;
    let cfg = Config::from_toml(&ckpt.header.config_toml)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let remover = Remover::new(&cfg.remover, 0)?;
    load_net_weights(remover.var_store(), "remover", &ckpt.tensors)?;
    Ok((remover, cfg))
}

/// Rebuild the detector stored in a training checkpoint.
pub fn load_detector(path: impl AsRef<Path>) -> Result<Detector> {
    let ckpt = TrainCheckpoint::load(path)?;
    let cfg = Config::from_toml(&ckpt.header.config_toml)
        .map_err(|e| Error::Checkpoint(format!("embedded config: {e}")))?;
    let detector = Detector::new(&cfg.detector, 0)?;
    load_net_weights(detector.var_store(), "detector", &ckpt.tensors)?;
    Ok(detector)
}

/// Detector BCE over whole samples, without augmentation.
pub fn detector_bce(detector: &Detector, samples: &[TrainSample]) -> Result<f64> {
    let refs: Vec<&BScan> = samples.iter().map(|s| &s.image).collect();
    let x = net::bscans_to_tensor(&refs)?;
    let y = masks_tensor(&samples.iter().map(|s| &s.mask).collect::<Vec<_>>());
    tch::no_grad(|| Ok(bce(&detector.forward(&x)?, &y).to_kind(Kind::Double).double_value(&[])))
}
