use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use pyrdiff::data::{
    generate_dataset, load_checkpoint, load_image_pgm, load_split, save_checkpoint, save_image_pgm, LossRecord,
    Split,
};
use pyrdiff::image::Image;
use pyrdiff::metrics::{psnr, ssim, MetricReport, UNIT_RANGE};
use pyrdiff::pipeline::{compare_psnr, copy_source_report, evaluate, sample_hierarchical, TrainConfig, Trainer};
use pyrdiff::pyramid::{decompose, resize_bilinear};
use pyrdiff::{Error, Result};
use serde::Serialize;

use crate::config::{create_dir, resume_hash, RunConfig};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    std::fs::write(path, contents).map_err(|source| Error::Io { path: path.into(), source })
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).expect("records serialize");
    text.push('\n');
    write(path, text)
}

pub fn gen_data(config: &RunConfig) -> Result<()> {
    let dir = &config.paths.output_dir;
    config.echo(dir)?;
    let records = generate_dataset(dir, &config.data)?;
    eprintln!("wrote {} pairs and {}", records.len(), dir.join("manifest.jsonl").display());
    Ok(())
}

/// CSV of the loss history: one row per optimizer step, floats with 17
/// significant digits.
pub fn loss_csv(history: &[LossRecord], num_levels: usize) -> String {
    let mut out = String::from("epoch,step,loss_eps");
    for n in 0..num_levels {
        write!(out, ",cgr_level{n}").unwrap();
    }
    out.push_str(",combined\n");
    for r in history {
        write!(out, "{},{},{:.16e}", r.epoch, r.step, r.loss_eps).unwrap();
        for v in &r.cgr {
            write!(out, ",{v:.16e}").unwrap();
        }
        writeln!(out, ",{:.16e}", r.combined).unwrap();
    }
    out
}

pub const LATEST: &str = "latest.phmd";

fn open_trainer(config: &TrainConfig, latest: &Path, force: bool) -> Result<Trainer> {
    if !latest.exists() {
        return Trainer::new(config.clone());
    }
    let ck = load_checkpoint(latest)?;
    let previous: TrainConfig = serde_json::from_value(ck.train_config.clone())
        .map_err(|e| Error::Corrupt(format!("{}: {e}", latest.display())))?;
    if resume_hash(&previous) != resume_hash(config) {
        if force {
            eprintln!("configuration differs from {}; starting over", latest.display());
            return Trainer::new(config.clone());
        }
        return Err(Error::Config(format!(
            "configuration differs from the checkpoint at {} (hash {:016x} vs {:016x}); pass --force to start over",
            latest.display(),
            resume_hash(&previous),
            resume_hash(config)
        )));
    }
    let mut trainer = Trainer::from_checkpoint(&ck)?;
    trainer.config.epochs = config.epochs;
    trainer.config.checkpoint_every = config.checkpoint_every;
    eprintln!("resuming from epoch {}", trainer.epoch);
    Ok(trainer)
}

pub fn train(config: &RunConfig, force: bool) -> Result<()> {
    config.train.validate()?;
    let out = &config.paths.output_dir;
    let ck_dir = config.paths.checkpoint_dir();
    config.echo(out)?;
    create_dir(&ck_dir)?;
    let data = load_split(&config.paths.manifest, Split::Train)?;
    if data.is_empty() {
        return Err(Error::Config(format!("{} has no training pairs", config.paths.manifest.display())));
    }
    let latest = ck_dir.join(LATEST);
    let mut trainer = open_trainer(&config.train, &latest, force)?;
    let log = out.join("loss.csv");
    let every = config.train.checkpoint_every;
    while trainer.epoch < config.train.epochs {
        let records = trainer.train_epoch(&data)?;
        let mean = records.iter().map(|r| r.combined).sum::<f64>() / records.len() as f64;
        eprintln!("epoch {:>4}  step {:>6}  combined {mean:.6}", trainer.epoch, trainer.step);
        write(&log, loss_csv(&trainer.history, config.train.num_levels))?;
        let last = trainer.epoch == config.train.epochs;
        if last || (every > 0 && trainer.epoch % every == 0) {
            let ck = trainer.checkpoint()?;
            save_checkpoint(&ck, ck_dir.join(format!("epoch-{:04}.phmd", trainer.epoch)))?;
            save_checkpoint(&ck, &latest)?;
        }
    }
    if !log.exists() {
        write(&log, loss_csv(&trainer.history, config.train.num_levels))?;
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Trainer> {
    Trainer::from_checkpoint(&load_checkpoint(path)?)
}

#[derive(Serialize)]
struct LevelRecord {
    level: usize,
    height: usize,
    width: usize,
    timesteps: usize,
    image: PathBuf,
    error_map: Option<PathBuf>,
    /// PSNR of the written image, upsampled to full size, against the target.
    psnr_db: Option<f64>,
}

#[derive(Serialize)]
struct TraceRecord {
    checkpoint: PathBuf,
    source: PathBuf,
    target: Option<PathBuf>,
    seed: u64,
    ssim: Option<f64>,
    levels: Vec<LevelRecord>,
}

/// Error maps store `|prediction - target| - 1` so that zero error is black.
pub fn error_map(prediction: &Image, target: &Image) -> Result<Image> {
    Ok(prediction.abs_diff(target)?.map(|e| e - 1.0))
}

pub fn sample(
    config: &mut RunConfig,
    checkpoint: &Path,
    source: &Path,
    target: Option<&Path>,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    config.train = model.config.clone();
    let out = config.paths.output_dir.clone();
    config.echo(&out)?;
    let src = load_image_pgm(source)?;
    let tgt = target.map(load_image_pgm).transpose()?;
    if let Some(t) = &tgt {
        src.check_same_dims(t, "sample")?;
    }
    let trace = sample_hierarchical(&src, &model.params, &model.config, config.sample_seed)?;
    let c = &model.config;
    let target_levels = match &tgt {
        Some(t) => Some(decompose(t, c.alpha, c.num_levels, c.patch_size())?),
        None => None,
    };
    let mut levels = Vec::new();
    for (n, img) in trace.levels.iter().enumerate() {
        // Scores refer to the image as stored, which clamps to the PGM range.
        let img = img.clamped(-1.0, 1.0);
        let name = PathBuf::from(format!("level{n}.pgm"));
        save_image_pgm(&img, out.join(&name))?;
        let (error_map_path, psnr_db) = match (&tgt, &target_levels) {
            (Some(t), Some(tl)) => {
                let e = PathBuf::from(format!("error{n}.pgm"));
                save_image_pgm(&error_map(&img, tl.level(n))?, out.join(&e))?;
                let up = if img.dims() == t.dims() { img.clone() } else { resize_bilinear(&img, t.height(), t.width()) };
                let p = psnr(t, &up, UNIT_RANGE)?;
                (Some(e), p.is_finite().then_some(p))
            }
            _ => (None, None),
        };
        levels.push(LevelRecord {
            level: n,
            height: img.height(),
            width: img.width(),
            timesteps: trace.timesteps[n],
            image: name,
            error_map: error_map_path,
            psnr_db,
        });
    }
    let ssim = match &tgt {
        Some(t) => Some(ssim(t, &trace.output().clamped(-1.0, 1.0), UNIT_RANGE)?),
        None => None,
    };
    let record = TraceRecord {
        checkpoint: checkpoint.into(),
        source: source.into(),
        target: target.map(Into::into),
        seed: config.sample_seed,
        ssim,
        levels,
    };
    write_json(&out.join("trace.json"), &record)?;
    for l in &record.levels {
        match l.psnr_db {
            Some(p) => println!("level {}  {}x{}  PSNR {p:.2} dB", l.level, l.height, l.width),
            None => println!("level {}  {}x{}", l.level, l.height, l.width),
        }
    }
    Ok(())
}

/// Table rows as printed; the CSV repeats exactly these cells.
pub fn table_rows(reports: &[MetricReport]) -> Vec<[String; 4]> {
    reports
        .iter()
        .map(|r| [r.task.clone(), r.images.len().to_string(), r.psnr_cell(), r.ssim_cell()])
        .collect()
}

pub fn format_table(rows: &[[String; 4]]) -> String {
    let header = ["task", "n", "PSNR(dB)", "SSIM(%)"];
    let mut widths = header.map(|h| h.chars().count());
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: [&str; 4]| {
        let mut s = String::new();
        for (i, (cell, w)) in cells.iter().zip(widths).enumerate() {
            let pad = w - cell.chars().count();
            if i > 0 {
                s.push_str("  ");
            }
            s.push_str(cell);
            s.extend(std::iter::repeat_n(' ', pad));
        }
        s.trim_end().to_string() + "\n"
    };
    let mut out = line(header);
    for row in rows {
        out += &line([&row[0], &row[1], &row[2], &row[3]]);
    }
    out
}

pub fn format_csv(rows: &[[String; 4]]) -> String {
    let mut out = String::from("task,n,psnr_db,ssim_pct\n");
    for r in rows {
        writeln!(out, "{},{},{},{}", r[0], r[1], r[2], r[3]).unwrap();
    }
    out
}

fn images_csv(reports: &[MetricReport]) -> String {
    let mut out = String::from("task,id,psnr_db,ssim\n");
    for r in reports {
        for s in &r.images {
            writeln!(out, "{},{},{:.16e},{:.16e}", r.task, s.id, s.psnr_db, s.ssim).unwrap();
        }
    }
    out
}

#[derive(Serialize)]
struct TTestRecord {
    a: String,
    b: String,
    metric: &'static str,
    t_statistic: f64,
    p_value: f64,
    degrees_of_freedom: usize,
}

fn task_name(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "model".into())
}

pub fn eval(
    config: &mut RunConfig,
    checkpoint: &Path,
    compare: Option<&Path>,
    split: Split,
    limit: Option<usize>,
) -> Result<()> {
    let out = config.paths.output_dir.clone();
    let mut samples = load_split(&config.paths.manifest, split)?;
    if let Some(n) = limit {
        samples.truncate(n);
    }
    if samples.is_empty() {
        return Err(Error::Config(format!(
            "{} has no {} pairs",
            config.paths.manifest.display(),
            split.as_str()
        )));
    }
    let mut models = vec![(checkpoint, load_model(checkpoint)?)];
    if let Some(c) = compare {
        models.push((c, load_model(c)?));
    }
    config.train = models[0].1.config.clone();
    config.echo(&out)?;
    let mut reports = vec![copy_source_report(&samples, "copy-source")?];
    let mut names = vec!["copy-source".to_string()];
    for (path, model) in &models {
        let mut name = task_name(path);
        if names.contains(&name) {
            name = path.display().to_string();
        }
        if names.contains(&name) {
            name = format!("{name}#{}", names.len());
        }
        let e = evaluate(&samples, &model.params, &model.config, config.eval_seed, &name)?;
        names.push(name);
        reports.push(e.report);
    }
    let rows = table_rows(&reports);
    print!("{}", format_table(&rows));
    write(&out.join("metrics.csv"), format_csv(&rows))?;
    write(&out.join("images.csv"), images_csv(&reports))?;
    write_json(&out.join("metrics.json"), &reports)?;
    if reports.len() == 3 {
        let t = compare_psnr(&reports[1], &reports[2])?;
        println!(
            "paired t-test on PSNR ({} vs {}): t = {:.4}, p = {:.4e}, df = {}",
            names[1], names[2], t.t_statistic, t.p_value, t.degrees_of_freedom
        );
        let record = TTestRecord {
            a: names[1].clone(),
            b: names[2].clone(),
            metric: "psnr_db",
            t_statistic: t.t_statistic,
            p_value: t.p_value,
            degrees_of_freedom: t.degrees_of_freedom,
        };
        write_json(&out.join("ttest.json"), &record)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PyramidRecord {
    alpha: f64,
    patch_size: usize,
    levels: Vec<(usize, usize)>,
    files: Vec<PathBuf>,
}

pub fn decompose_image(config: &RunConfig, input: &Path) -> Result<()> {
    let out = &config.paths.output_dir;
    config.echo(out)?;
    let image = load_image_pgm(input)?;
    let c = &config.train;
    let pyramid = decompose(&image, c.alpha, c.num_levels, c.patch_size())?;
    let mut files = Vec::new();
    for (n, level) in pyramid.levels().iter().enumerate() {
        let name = PathBuf::from(format!("level{n}.pgm"));
        save_image_pgm(level, out.join(&name))?;
        println!("level {n}  {}x{}", level.height(), level.width());
        files.push(name);
    }
    let record = PyramidRecord { alpha: c.alpha, patch_size: c.patch_size(), levels: pyramid.dims(), files };
    write_json(&out.join("pyramid.json"), &record)
}

#[cfg(test)]
mod tests {
    use super::*;
    use pyrdiff::metrics::ImageScore;

    #[test]
    fn loss_csv_round_trips_bits() {
        let r = LossRecord { epoch: 0, step: 1, loss_eps: 0.1 + 0.2, cgr: vec![1.0 / 3.0, 2e-300], combined: std::f64::consts::PI };
        let csv = loss_csv(&[r.clone()], 2);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,step,loss_eps,cgr_level0,cgr_level1,combined");
        let cells: Vec<f64> = lines.next().unwrap().split(',').skip(2).map(|c| c.parse().unwrap()).collect();
        assert_eq!(cells, vec![r.loss_eps, r.cgr[0], r.cgr[1], r.combined]);
    }

    #[test]
    fn table_and_csv_share_cells() {
        let scores = vec![
            ImageScore { id: "a".into(), psnr_db: 20.0, ssim: 0.5 },
            ImageScore { id: "b".into(), psnr_db: 22.0, ssim: 0.7 },
        ];
        let rows = table_rows(&[MetricReport::from_scores("m", scores)]);
        let table = format_table(&rows);
        let csv = format_csv(&rows);
        assert!(table.lines().nth(1).unwrap().contains("21.00 ± 1.41"));
        assert_eq!(csv.lines().nth(1).unwrap(), "m,2,21.00 ± 1.41,60.00 ± 14.14");
    }

    #[test]
    fn error_map_zero_is_black() {
        let a = Image::filled(2, 2, 0.3);
        assert!(error_map(&a, &a).unwrap().pixels().iter().all(|&v| v == -1.0));
    }
}
