//! Acceptance suite: one test per criterion, each printing a single
//! PASS/FAIL line straight to stderr so it shows even when output is
//! captured.

mod common;

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tch::{Kind, Tensor};

use deshadow::backbone::{Backbone, BackboneConfig, FeatureStack};
use deshadow::config::Config;
use deshadow::detector::{bce, Detector, DetectorConfig};
use deshadow::evaluate::{self, EvalImage, EvalReport};
use deshadow::losses::{self, gram, mask_images};
use deshadow::remover::{ForwardMode, Remover, RemoverConfig};
use deshadow::trainer::{TrainConfig, Trainer};

use common::{phantom_cases, samples, tiny_config};

fn verdict(n: u32, name: &str, pass: bool, detail: &str) {
    let line = format!(
        "criterion {n} {}: {name} ({detail})\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[i64], lo: f64, hi: f64) -> Tensor {
    let n: i64 = dims.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_slice(&v).view(dims)
}

fn to_vec(t: &Tensor) -> Vec<f64> {
    Vec::<f64>::try_from(&t.to_kind(Kind::Double).flatten(0, -1)).unwrap()
}

// Scalar-loop oracles over row-major [n, c, h, w] buffers.

fn oracle_content(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| {
            let mut s = 0.0;
            for i in 0..p.len() {
                s += (p[i] - q[i]) * (p[i] - q[i]);
            }
            s / p.len() as f64
        })
        .sum()
}

fn oracle_gram(f: &[f64], n: usize, c: usize, hw: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * c * c];
    for img in 0..n {
        for x in 0..c {
            for y in 0..c {
                let mut s = 0.0;
                for k in 0..hw {
                    s += f[(img * c + x) * hw + k] * f[(img * c + y) * hw + k];
                }
                g[(img * c + x) * c + y] = s;
            }
        }
    }
    g
}

fn oracle_style(a: &[Vec<f64>], b: &[Vec<f64>], shapes: &[[usize; 4]]) -> f64 {
    let mut total = 0.0;
    for ((p, q), s) in a.iter().zip(b).zip(shapes) {
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let gp = oracle_gram(p, n, c, hw);
        let gq = oracle_gram(q, n, c, hw);
        let mut sum = 0.0;
        for i in 0..gp.len() {
            sum += (gp[i] - gq[i]) * (gp[i] - gq[i]);
        }
        total += sum / n as f64;
    }
    total
}

fn oracle_tv(d: &[f64], n: usize, h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for img in 0..n {
        let at = |r: usize, c: usize| d[(img * h + r) * w + c];
        for r in 0..h {
            for c in 0..w {
                if r + 1 < h {
                    s += (at(r + 1, c) - at(r, c)).abs();
                }
                if c + 1 < w {
                    s += (at(r, c + 1) - at(r, c)).abs();
                }
            }
        }
    }
    s / (n * h * w) as f64
}

fn oracle_bce(p: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.len() {
        let lp = p[i].ln().max(-100.0);
        let lq = (1.0 - p[i]).ln().max(-100.0);
        s -= y[i] * lp + (1.0 - y[i]) * lq;
    }
    s / p.len() as f64
}

#[test]
fn criterion_1_loss_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..25 {
        let n = rng.random_range(1..=2usize);
        let taps = rng.random_range(1..=3usize);
        let mut shapes = Vec::new();
        let (mut fa, mut fb) = (Vec::new(), Vec::new());
        for _ in 0..taps {
            let s = [
                n,
                rng.random_range(1..=4usize),
                rng.random_range(1..=16usize),
                rng.random_range(1..=16usize),
            ];
            let dims: Vec<i64> = s.iter().map(|&v| v as i64).collect();
            fa.push(rand_tensor(&mut rng, &dims, -1.0, 1.0));
            fb.push(rand_tensor(&mut rng, &dims, -1.0, 1.0));
            shapes.push(s);
        }
        let va: Vec<Vec<f64>> = fa.iter().map(to_vec).collect();
        let vb: Vec<Vec<f64>> = fb.iter().map(to_vec).collect();
        let ids: Vec<usize> = (0..taps).collect();
        let sa = FeatureStack { tap_ids: ids.clone(), maps: fa };
        let sb = FeatureStack { tap_ids: ids, maps: fb };
        let content = losses::content_from_features(&sa, &sb).unwrap().double_value(&[]);
        let style = losses::style_from_features(&sa, &sb).unwrap().double_value(&[]);
        worst = worst.max((content - oracle_content(&va, &vb)).abs());
        worst = worst.max((style - oracle_style(&va, &vb, &shapes)).abs());

        let (h, w) = (rng.random_range(2..=16usize), rng.random_range(2..=16usize));
        let d = rand_tensor(&mut rng, &[n as i64, 1, h as i64, w as i64], 0.0, 1.0);
        let tv = losses::tv_loss(&d).unwrap().double_value(&[]);
        worst = worst.max((tv - oracle_tv(&to_vec(&d), n, h, w)).abs());

        let p = rand_tensor(&mut rng, &[n as i64, 1, h as i64, w as i64], 0.001, 0.999);
        let y = rand_tensor(&mut rng, &[n as i64, 1, h as i64, w as i64], 0.0, 1.0).ge(0.5).to_kind(Kind::Double);
        let got = bce(&p, &y).double_value(&[]);
        worst = worst.max((got - oracle_bce(&to_vec(&p), &to_vec(&y))).abs());
    }
    let checker = Tensor::from_slice(&[0.0f64, 1.0, 1.0, 0.0]).view([1, 1, 2, 2]);
    let tv_checker = losses::tv_loss(&checker).unwrap().double_value(&[]);
    let g = gram(&Tensor::from_slice(&[1.0f64, 2.0, 0.0, 1.0]).view([1, 2, 1, 2]));
    let gram_ok = to_vec(&g) == [5.0, 2.0, 2.0, 1.0];
    let pass = worst <= 1e-6 && tv_checker == 1.0 && gram_ok;
    verdict(
        1,
        "loss oracle equivalence",
        pass,
        &format!("max abs deviation {worst:.2e} over 25 random cases; checkerboard TV = {tv_checker}"),
    );
}

/// Central differences at a few pixels against autograd, in double precision.
fn grad_check(f: &dyn Fn(&Tensor) -> Tensor, d: &Tensor, pixels: &[i64]) -> f64 {
    let x = d.detach().copy().set_requires_grad(true);
    let l = f(&x);
    let g = to_vec(&Tensor::run_backward(&[&l], &[&x], false, false)[0]);
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for &i in pixels {
        let base = d.detach().flatten(0, -1);
        let shifted = |delta: f64| {
            let t = base.copy();
            let _ = t.get(i).f_add_scalar_(delta).unwrap();
            tch::no_grad(|| f(&t.view(d.size().as_slice())).double_value(&[]))
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let a = g[i as usize];
        let scale = a.abs().max(fd.abs());
        if scale > 1e-9 {
            worst = worst.max((a - fd).abs() / scale);
        }
    }
    worst
}

struct SmallNets {
    backbone: Backbone,
    detector: Detector,
}

fn small_nets() -> SmallNets {
    let mut backbone = Backbone::load(&BackboneConfig::random(7, 16)).unwrap();
    backbone.to_double();
    let mut detector = Detector::new(
        &DetectorConfig {
            width_divisor: 16,
            ..DetectorConfig::default()
        },
        3,
    )
    .unwrap();
    detector.to_double();
    detector.freeze();
    SmallNets { backbone, detector }
}

/// Baseline, deshadowed and a mask covering columns 10..18.
fn masked_case(rng: &mut ChaCha8Rng) -> (Tensor, Tensor, Tensor) {
    let b = rand_tensor(rng, &[1, 1, 32, 32], 0.05, 0.95);
    let d = rand_tensor(rng, &[1, 1, 32, 32], 0.05, 0.95);
    let mut m = vec![0.1f64; 32 * 32];
    for r in 0..32 {
        for c in 10..18 {
            m[r * 32 + c] = 0.9;
        }
    }
    (b, d, Tensor::from_slice(&m).view([1, 1, 32, 32]))
}

#[test]
fn criterion_2_gradient_checks() {
    let nets = small_nets();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, d, m) = masked_case(&mut rng);
    let pixels: Vec<i64> = (0..8).map(|_| rng.random_range(0..32 * 32)).collect();
    let content = |x: &Tensor| {
        let (bm, dm) = mask_images(&b, x, &m).unwrap();
        losses::content_loss(&bm, &dm, &nets.backbone).unwrap()
    };
    let style = |x: &Tensor| {
        let (bm, dm) = mask_images(&b, x, &m).unwrap();
        losses::style_loss(&bm, &dm, &nets.backbone).unwrap()
    };
    let tv = |x: &Tensor| losses::tv_loss(x).unwrap();
    let shadow = |x: &Tensor| losses::shadow_loss(x, &nets.detector).unwrap();
    let errs = [
        ("content", grad_check(&content, &d, &pixels)),
        ("style", grad_check(&style, &d, &pixels)),
        ("tv", grad_check(&tv, &d, &pixels)),
        ("shadow", grad_check(&shadow, &d, &pixels)),
    ];
    let pass = errs.iter().all(|(_, e)| *e < 1e-3);
    let detail: Vec<String> = errs.iter().map(|(n, e)| format!("{n} {e:.1e}")).collect();
    verdict(
        2,
        "gradient checks on 32x32",
        pass,
        &format!("max relative error: {}", detail.join(", ")),
    );
}

#[test]
fn criterion_3_architecture() {
    let det = Detector::new(&DetectorConfig::default(), 0).unwrap();
    let rem = Remover::new(&RemoverConfig::default(), 0).unwrap();
    let (dp, rp) = (det.parameter_count() as f64, rem.parameter_count() as f64);
    let within = |v: f64, target: f64| (v - target).abs() <= 0.15 * target;
    let x = Tensor::rand([1, 1, 512, 512], (Kind::Float, tch::Device::Cpu));
    let (dy, dsizes) = tch::no_grad(|| det.forward_traced(&x)).unwrap();
    let dy = dy.sigmoid();
    let (ry, rsizes) = tch::no_grad(|| rem.forward_traced(&x, ForwardMode::EVAL)).unwrap();
    let in_unit = |t: &Tensor| t.min().double_value(&[]) > 0.0 && t.max().double_value(&[]) < 1.0;
    let halvings = |s: &[(i64, i64)]| {
        s.windows(2)
            .all(|w| w[1].0 * 2 == w[0].0 && w[1].1 * 2 == w[0].1)
            .then(|| s.len() - 1)
    };
    let pass = within(dp, 13.4e6)
        && within(rp, 55.7e6)
        && dy.size() == [1, 1, 512, 512]
        && ry.size() == [1, 1, 512, 512]
        && in_unit(&dy)
        && in_unit(&ry)
        && halvings(&rsizes) == Some(8)
        && halvings(&dsizes) == Some(4);
    verdict(
        3,
        "architecture conformance",
        pass,
        &format!(
            "detector {dp} params, remover {rp} params, halvings {:?}/{:?}",
            halvings(&dsizes),
            halvings(&rsizes)
        ),
    );
}

#[test]
fn criterion_4_schedule() {
    let mut cfg = tiny_config();
    cfg.train = TrainConfig {
        cycles: 2,
        augment: false,
        early_stop_cycles: 0,
        ..TrainConfig::default()
    };
    let data = samples(&cfg, 2, 40);
    let mut t = Trainer::new(&cfg, &data).unwrap();
    t.run(None).unwrap();
    let ledger = t.ledger();
    let first: Vec<(&str, usize)> = ledger[..4].iter().map(|p| (p.phase.as_str(), p.epochs)).collect();
    let epochs_ok = first
        == [
            ("detector-pretrain", 5),
            ("remover", 1),
            ("detector-on-removed", 5),
            ("detector-on-gt", 5),
        ];
    let frozen_ok = ledger.iter().all(|p| p.frozen_hash_before == p.frozen_hash_after);
    // detector epochs before the last phase: 5 + 10 + 5 = 20
    let lr_run = ledger[6].lr_first;
    let lr_formula = TrainConfig::default().lr_at(20);
    let pass = epochs_ok && frozen_ok && lr_run == 2.5e-6 && lr_formula == 2.5e-6;
    verdict(
        4,
        "schedule conformance",
        pass,
        &format!(
            "cycle ledger {first:?}, frozen hashes stable: {frozen_ok}, lr after 20 detector epochs {lr_run:e}"
        ),
    );
}

#[test]
fn criterion_5_masking_division_of_labor() {
    let nets = small_nets();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = deshadow::losses::LossWeights::default();
    let mut ok = 0;
    let cases = 10;
    for _ in 0..cases {
        let (b, d, m) = masked_case(&mut rng);
        let r = rng.random_range(0..32i64);
        let c = rng.random_range(10..18i64);
        // a strict local maximum, so the absolute differences cannot cancel
        let bumped = d.copy();
        let _ = bumped.get(0).get(0).get(r).get(c).fill_(1.0);
        let eval = |x: &Tensor| {
            tch::no_grad(|| {
                losses::total_loss(&b, x, &m, &nets.backbone, &nets.detector, &w)
                    .unwrap()
                    .breakdown(&w)
            })
        };
        let (before, after) = (eval(&d), eval(&bumped));
        if before.content == after.content
            && before.style == after.style
            && before.tv != after.tv
            && before.shadow != after.shadow
        {
            ok += 1;
        }
    }
    verdict(
        5,
        "masking division of labor",
        ok == cases,
        &format!("{ok}/{cases} random masked-pixel perturbations left content/style fixed and moved tv/shadow"),
    );
}

// End-to-end phantom experiment shared by criteria 6 and 7.

const TRAIN_PHANTOMS: usize = 200;
const HELD_OUT_PHANTOMS: usize = 20;

fn experiment_config() -> Config {
    Config::from_toml(include_str!("../../../configs/phantom-experiment.toml")).unwrap()
}

struct Experiment {
    report: EvalReport,
    minutes: f64,
}

fn experiment() -> &'static Experiment {
    static CELL: OnceLock<Experiment> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let cfg = experiment_config();
        let train: Vec<_> = phantom_cases(&cfg.phantom, TRAIN_PHANTOMS, 600)
            .into_iter()
            .map(|c| c.sample)
            .collect();
        let held_out = phantom_cases(&cfg.phantom, HELD_OUT_PHANTOMS, 9_600);
        let mut t = Trainer::new(&cfg, &train).unwrap();
        t.run(None).unwrap();
        let mut images = Vec::new();
        let mut rois = Vec::new();
        for case in &held_out {
            let s = &case.sample;
            let (mut out, _) = t.remover.infer_batch(std::slice::from_ref(&s.image)).unwrap();
            images.push(EvalImage {
                stem: s.stem.clone(),
                baseline: s.image.clone(),
                deshadowed: out.remove(0),
                ground_truth: Some(case.ground_truth.clone()),
                mask: Some(s.mask.clone()),
            });
            rois.extend(
                evaluate::auto_rois(&s.stem, &case.layer_map, &s.mask, &cfg.phantom.layer_roles, 5).unwrap(),
            );
        }
        let report = evaluate::build_report(&images, &rois, None, cfg.evaluate.psnr_cap_db).unwrap();
        Experiment {
            report,
            minutes: start.elapsed().as_secs_f64() / 60.0,
        }
    })
}

#[test]
fn criterion_6_phantom_experiment() {
    let e = experiment();
    let s = &e.report.summary;
    let contrast = s.contrast_reduction_pct.unwrap_or(f64::NAN);
    let mae = s.masked_mae_improvement_pct.unwrap_or(f64::NAN);
    verdict(
        6,
        "end-to-end phantom experiment",
        contrast >= 25.0 && mae >= 30.0 && e.minutes <= 360.0,
        &format!(
            "contrast reduced {contrast:.1}% (need >= 25), masked MAE improved {mae:.1}% (need >= 30), {:.0} min",
            e.minutes
        ),
    );
}

#[test]
fn criterion_7_no_hallucination() {
    let e = experiment();
    let outside = e.report.summary.outside_mae_deshadowed.unwrap_or(f64::NAN);
    verdict(
        7,
        "no hallucination outside masks",
        outside < 0.02,
        &format!("outside-mask MAE vs ground truth {outside:.4} (need < 0.02)"),
    );
}

fn deshadow_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_deshadow"))
}

fn run_ok(cmd: &mut Command) {
    let out = cmd.env("RUST_LOG", "warn").output().unwrap();
    assert!(
        out.status.success(),
        "{:?} failed: {}",
        cmd,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn dir_bytes(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn write_tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = tiny_config();
    cfg.simulate.count = 3;
    cfg.simulate.rois_per_layer = 2;
    cfg.train.detector_pretrain_epochs = 2;
    cfg.train.detector_on_removed_epochs = 1;
    cfg.train.detector_on_gt_epochs = 1;
    cfg.train.cycles = 2;
    let p = dir.join("tiny.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

#[test]
fn criterion_8_determinism() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = write_tiny_config(root);
    for name in ["sim_a", "sim_b"] {
        run_ok(deshadow_bin()
            .args(["simulate", "--seed", "11", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(root.join(name)));
    }
    let sim_same = dir_bytes(&root.join("sim_a")) == dir_bytes(&root.join("sim_b"));

    let train = |out: &str, extra: &[&str]| {
        run_ok(deshadow_bin()
            .args(["train", "--seed", "11", "--config"])
            .arg(&cfg)
            .arg("--data")
            .arg(root.join("sim_a"))
            .arg("--out")
            .arg(root.join(out))
            .args(extra));
    };
    train("run_a", &[]);
    train("run_b", &[]);
    let train_same = dir_bytes(&root.join("run_a")) == dir_bytes(&root.join("run_b"));

    train("run_c", &["--max-phases", "3"]);
    let ckpt = root.join("run_c/checkpoint.ckpt");
    train("run_c", &["--resume", ckpt.to_str().unwrap()]);
    let a = std::fs::read(root.join("run_a/checkpoint.ckpt")).unwrap();
    let c = std::fs::read(ckpt).unwrap();
    let resume_same = a == c;
    verdict(
        8,
        "determinism and resume",
        sim_same && train_same && resume_same,
        &format!("simulate identical: {sim_same}, train identical: {train_same}, resumed checkpoint identical: {resume_same}"),
    );
}

#[test]
fn criterion_9_compensation_baseline() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let cfg = write_tiny_config(root);
    run_ok(deshadow_bin()
        .args(["simulate", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(root.join("sim")));
    run_ok(deshadow_bin()
        .args(["train", "--max-phases", "2", "--config"])
        .arg(&cfg)
        .arg("--data")
        .arg(root.join("sim"))
        .arg("--out")
        .arg(root.join("run")));
    run_ok(deshadow_bin()
        .args(["evaluate", "--with-compensation", "--checkpoint"])
        .arg(root.join("run/checkpoint.ckpt"))
        .arg("--data")
        .arg(root.join("sim"))
        .arg("--rois")
        .arg(root.join("sim/rois.tsv"))
        .arg("--out")
        .arg(root.join("eval")));
    let report: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(root.join("eval/report.json")).unwrap()).unwrap();
    let s = &report.summary;
    let (base, comp) = (
        s.deep_mask_mean_baseline.unwrap_or(f64::NAN),
        s.deep_mask_mean_compensated.unwrap_or(f64::NAN),
    );
    let csv = std::fs::read_to_string(root.join("eval/per_image.csv")).unwrap();
    let header = csv.lines().next().unwrap_or_default().to_owned();
    let columns_ok = ["baseline", "deshadowed", "compensated"]
        .iter()
        .all(|c| header.split(',').any(|h| h == *c));
    verdict(
        9,
        "compensation baseline sanity",
        comp > base && columns_ok,
        &format!("deep masked mean {base:.4} -> {comp:.4} compensated; columns: {header}"),
    );
}
