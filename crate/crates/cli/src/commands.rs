//! The subcommands. Each one reads inputs, writes its outputs into the
//! configured output directory only, and finishes with a manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use advlab::attacks::{
    fgsm_sweep, patch_evaluate, patch_reports, patch_train, AttackConfig, PatchOutcome, PatchSpec,
    PatchTrainConfig,
};
use advlab::checkpoint;
use advlab::dataset::{split, LabeledDataset};
use advlab::distillation::{
    distill, distilled_sweep, make_soft_labels, train_teacher, DistillConfig,
    DEFAULT_DISTILL_TEMPERATURE,
};
use advlab::evaluation::{accuracy, render_comparison, EvalReport};
use advlab::network::IMAGE_SIDE;
use advlab::training::{fit, TrainConfig};
use advlab::Network;

use crate::config::RunConfig;
use crate::manifest::{file_digest, RunManifest};
use crate::CliError;

pub const BASELINE_CKPT: &str = "baseline.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const FGSM_CSV: &str = "fgsm_sweep.csv";
pub const FGSM_SVG: &str = "fgsm_sweep.svg";
pub const TEACHER_CKPT: &str = "teacher.ckpt";
pub const TEACHER_LOG: &str = "teacher_log.csv";
pub const SOFT_LABELS: &str = "soft_labels.bin";
pub const STUDENT_CKPT: &str = "student.ckpt";
pub const STUDENT_LOG: &str = "student_log.csv";
pub const DISTILLED_CSV: &str = "distilled_sweep.csv";
pub const DISTILLED_SVG: &str = "distilled_sweep.svg";
pub const PATCH_TOP1: &str = "patch_top1.csv";
pub const PATCH_TOP5: &str = "patch_top5.csv";
pub const PATCH_RANDOM_TOP1: &str = "patch_random_top1.csv";
pub const PATCH_RANDOM_TOP5: &str = "patch_random_top5.csv";
pub const PATCH_SVG: &str = "patch_top1.svg";
pub const COMPARISON_SVG: &str = "fgsm_comparison.svg";
pub const SUMMARY: &str = "summary.txt";

const PATCH_TOP_K: usize = 5;

pub fn patch_file(size: usize) -> String {
    format!("patch_{size}x{size}.patch")
}

/// The split of the training file, trimmed to the configured limits.
pub fn load_data(cfg: &RunConfig) -> Result<(LabeledDataset, LabeledDataset), CliError> {
    let all = LabeledDataset::load_mnist_train(&cfg.data_dir)?;
    let (train, holdout, _, _) = split(&all, cfg.seed)?;
    let train = match cfg.train_limit {
        Some(n) => train.head(n),
        None => train,
    };
    let holdout = match cfg.eval_limit {
        Some(n) => holdout.head(n),
        None => holdout,
    };
    Ok((train, holdout))
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out_dir).map_err(|source| CliError::Io {
        path: cfg.out_dir.clone(),
        source,
    })
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn train_config(cfg: &RunConfig, temperature: f64) -> TrainConfig {
    TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        temperature,
        ..TrainConfig::default()
    }
}

fn attack_config(cfg: &RunConfig) -> Result<AttackConfig, CliError> {
    Ok(AttackConfig::new(cfg.epsilons.clone())?)
}

fn stamp(report: &mut EvalReport, cfg: &RunConfig, checkpoint: &Path) -> Result<(), CliError> {
    report.seed = cfg.seed;
    report.checkpoint = format!("sha256:{}", file_digest(checkpoint)?);
    Ok(())
}

/// CSV, plus an SVG curve when there are at least two rows.
fn write_report(
    report: &EvalReport,
    csv: PathBuf,
    svg: Option<PathBuf>,
    manifest: &mut RunManifest,
) -> Result<(), CliError> {
    report.write_csv(&csv)?;
    manifest.reports.push(csv);
    if let Some(svg) = svg {
        if report.rows.len() >= 2 {
            report.render_curve(&svg)?;
            manifest.reports.push(svg);
        }
    }
    Ok(())
}

fn finish(mut manifest: RunManifest, started: Instant) -> Result<PathBuf, CliError> {
    manifest.duration = started.elapsed();
    manifest.write()
}

/// Trains the baseline network and writes `baseline.ckpt` and its log.
pub fn cmd_train(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    let temperature = cfg.temperature.unwrap_or(1.0);
    let (train, holdout) = load_data(cfg)?;
    prepare_out_dir(cfg)?;
    let mut manifest = RunManifest::new("train", cfg);
    let mut net = Network::build(cfg.seed);
    let log = fit(&mut net, &train, &holdout, &train_config(cfg, temperature))?;
    let ckpt = out(cfg, BASELINE_CKPT);
    checkpoint::save(&net, &ckpt)?;
    manifest.checkpoints.push(ckpt);
    log.write_csv(out(cfg, TRAIN_LOG))?;
    manifest.reports.push(out(cfg, TRAIN_LOG));
    let acc = accuracy(&net, &holdout)?;
    println!("holdout accuracy {acc:.4} ({} images)", holdout.len());
    finish(manifest, started)
}

fn attacked_checkpoint(cfg: &RunConfig) -> PathBuf {
    cfg.checkpoint
        .clone()
        .unwrap_or_else(|| out(cfg, BASELINE_CKPT))
}

/// FGSM sweep over the epsilon grid against a trained checkpoint.
pub fn cmd_attack_fgsm(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    let attack = attack_config(cfg)?;
    let ckpt = attacked_checkpoint(cfg);
    let net = checkpoint::load(&ckpt)?;
    let (_, holdout) = load_data(cfg)?;
    prepare_out_dir(cfg)?;
    let mut manifest = RunManifest::new("attack-fgsm", cfg);
    let mut report = fgsm_sweep(&net, &holdout, &attack)?;
    stamp(&mut report, cfg, &ckpt)?;
    write_report(
        &report,
        out(cfg, FGSM_CSV),
        Some(out(cfg, FGSM_SVG)),
        &mut manifest,
    )?;
    print!("{}", report.to_csv());
    finish(manifest, started)
}

/// Trains one universal patch per size, evaluates each next to a
/// random-noise patch of the same size, and writes both tables.
pub fn cmd_attack_patch(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    if let Some(&s) = cfg.patch_sizes.iter().find(|&&s| s == 0 || s >= IMAGE_SIDE) {
        return Err(CliError::Config(format!(
            "patch size {s} must be in 1..{IMAGE_SIDE}"
        )));
    }
    let ckpt = attacked_checkpoint(cfg);
    let net = checkpoint::load(&ckpt)?;
    let (train, holdout) = load_data(cfg)?;
    prepare_out_dir(cfg)?;
    let mut manifest = RunManifest::new("attack-patch", cfg);
    let train_cfg = PatchTrainConfig {
        epochs: cfg.patch_epochs,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        ..PatchTrainConfig::default()
    };
    let mut trained: Vec<PatchOutcome> = Vec::new();
    let mut random: Vec<PatchOutcome> = Vec::new();
    for &size in &cfg.patch_sizes {
        let patch = patch_train(&net, &train, size, cfg.target_class, &train_cfg)?;
        let path = out(cfg, &patch_file(size));
        patch.save(&path)?;
        manifest.checkpoints.push(path);
        trained.push(patch_evaluate(
            &net,
            &holdout,
            &patch,
            cfg.seed,
            PATCH_TOP_K,
        )?);
        // the patch's own starting point: same size, untrained noise
        let noise = PatchSpec::random(size, cfg.target_class, cfg.seed)?;
        random.push(patch_evaluate(
            &net,
            &holdout,
            &noise,
            cfg.seed,
            PATCH_TOP_K,
        )?);
        log::info!(
            "patch {size}x{size}: top-1 success {:.4} (random {:.4})",
            trained.last().unwrap().top1.accuracy(),
            random.last().unwrap().top1.accuracy()
        );
    }
    let (mut t1, mut t5) = patch_reports("patch", &trained)?;
    let (mut r1, mut r5) = patch_reports("random patch", &random)?;
    for r in [&mut t1, &mut t5, &mut r1, &mut r5] {
        stamp(r, cfg, &ckpt)?;
        r.notes.push(format!("target class {}", cfg.target_class));
    }
    write_report(&t1, out(cfg, PATCH_TOP1), None, &mut manifest)?;
    write_report(&t5, out(cfg, PATCH_TOP5), None, &mut manifest)?;
    write_report(&r1, out(cfg, PATCH_RANDOM_TOP1), None, &mut manifest)?;
    write_report(&r5, out(cfg, PATCH_RANDOM_TOP5), None, &mut manifest)?;
    if t1.rows.len() >= 2 {
        let svg = render_comparison(
            &format!("patch success toward class {}", cfg.target_class),
            &[("trained", &t1), ("random", &r1)],
        )?;
        write_text(&out(cfg, PATCH_SVG), &svg)?;
        manifest.reports.push(out(cfg, PATCH_SVG));
    }
    print!("{}", t1.to_csv());
    finish(manifest, started)
}

/// Teacher at temperature T, soft labels, student at T, and the FGSM
/// sweep of the student at deployment temperature 1.
pub fn cmd_distill(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    let temperature = cfg.temperature.unwrap_or(DEFAULT_DISTILL_TEMPERATURE);
    let attack = attack_config(cfg)?;
    let (train, holdout) = load_data(cfg)?;
    prepare_out_dir(cfg)?;
    let mut manifest = RunManifest::new("distill", cfg);
    let dcfg = DistillConfig {
        train: train_config(cfg, temperature),
        temperature,
    };

    let (teacher, teacher_log) = train_teacher(&train, &holdout, &dcfg)?;
    checkpoint::save(&teacher, out(cfg, TEACHER_CKPT))?;
    manifest.checkpoints.push(out(cfg, TEACHER_CKPT));
    teacher_log.write_csv(out(cfg, TEACHER_LOG))?;
    manifest.reports.push(out(cfg, TEACHER_LOG));

    let soft = make_soft_labels(&teacher, &train, temperature)?;
    soft.save(out(cfg, SOFT_LABELS))?;
    manifest.reports.push(out(cfg, SOFT_LABELS));

    let (student, student_log) = distill(&train, &soft, &holdout, &dcfg)?;
    let ckpt = out(cfg, STUDENT_CKPT);
    checkpoint::save(&student, &ckpt)?;
    manifest.checkpoints.push(ckpt.clone());
    student_log.write_csv(out(cfg, STUDENT_LOG))?;
    manifest.reports.push(out(cfg, STUDENT_LOG));

    let mut report = distilled_sweep(&student, &holdout, &attack)?;
    stamp(&mut report, cfg, &ckpt)?;
    report.notes.push(format!(
        "trained at temperature {temperature}, evaluated at 1"
    ));
    write_report(
        &report,
        out(cfg, DISTILLED_CSV),
        Some(out(cfg, DISTILLED_SVG)),
        &mut manifest,
    )?;
    print!("{}", report.to_csv());
    finish(manifest, started)
}

fn read_report(path: &Path) -> Result<Option<EvalReport>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(Some(EvalReport::parse_csv(&text)?))
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Collects the tables already present in the output directory into one
/// text summary and overlays the undefended and distilled FGSM curves.
pub fn cmd_report(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let started = Instant::now();
    let mut manifest = RunManifest::new("report", cfg);
    let tables = [
        ("FGSM, undefended", FGSM_CSV),
        ("FGSM, distilled (attacked at T=1)", DISTILLED_CSV),
        ("Patch top-1 success", PATCH_TOP1),
        ("Patch top-5 success", PATCH_TOP5),
        ("Random patch top-1 success", PATCH_RANDOM_TOP1),
        ("Random patch top-5 success", PATCH_RANDOM_TOP5),
    ];
    let mut summary = String::new();
    let mut found = Vec::new();
    for (title, file) in tables {
        if let Some(report) = read_report(&out(cfg, file))? {
            summary.push_str(&format!("## {title}\n{}\n", report.to_csv()));
            found.push((file, report));
        }
    }
    if found.is_empty() {
        return Err(CliError::Config(format!(
            "no reports found in {}",
            cfg.out_dir.display()
        )));
    }
    if found.iter().any(|(f, _)| f.starts_with("patch_")) {
        summary.push_str(&format!("note: {}\n", advlab::evaluation::TOP5_CAVEAT));
    }
    let get = |name: &str| found.iter().find(|(f, _)| *f == name).map(|(_, r)| r);
    if let (Some(base), Some(dist)) = (get(FGSM_CSV), get(DISTILLED_CSV)) {
        if base.rows.len() >= 2 && dist.rows.len() >= 2 {
            let svg = render_comparison(
                "FGSM accuracy: undefended vs distilled",
                &[("undefended", base), ("distilled", dist)],
            )?;
            write_text(&out(cfg, COMPARISON_SVG), &svg)?;
            manifest.reports.push(out(cfg, COMPARISON_SVG));
        }
    }
    write_text(&out(cfg, SUMMARY), &summary)?;
    manifest.reports.push(out(cfg, SUMMARY));
    print!("{summary}");
    finish(manifest, started)
}
