use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use candle_core::Device;
use serde::Serialize;

use hazekit::ablation::{grid_rows, run_row, AblationTable, Grid};
use hazekit::checkpoint::{Checkpoint, CheckpointKind};
use hazekit::config::RunConfig;
use hazekit::datapipe::{generate_micro_dataset, matched_png_names, png_names, MicroDatasetOptions, PairedDataset};
use hazekit::hazegen::{AhgModel, HazeSynthesisSpec};
use hazekit::image_io::{load_rgb, save_png};
use hazekit::metrics::{EvalReport, EvalRow, EvalSummary};
use hazekit::noise::{PerlinParams, DEFAULT_MODULATION_RANGE};
use hazekit::train::{load_ahg, load_dhr, AhgRun, DhrTrainer, JsonlLog, TRAIN_DTYPE};

use crate::{Command, Common, GridArg};

/// Bad or missing command-line arguments.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

const LOG_EVERY: u64 = 10;

pub fn run(common: &Common, command: Command) -> Result<()> {
    let device = Device::Cpu;
    match command {
        Command::TrainAhg { data, steps, resume } => train_ahg(common, data, steps, resume, &device),
        Command::GenHaze {
            ahg,
            clear,
            hazy,
            alpha,
            noise_seed,
        } => gen_haze(common, ahg, &clear, &hazy, alpha, noise_seed, &device),
        Command::TrainDhr {
            data,
            ahg,
            no_ahg,
            patch_size,
            steps,
            resume,
        } => train_dhr(common, data, ahg, no_ahg, patch_size, steps, resume, &device),
        Command::Dehaze { checkpoint, input } => dehaze(common, &checkpoint, &input, &device),
        Command::Eval { pred, gt } => eval(common, &pred, &gt, &device),
        Command::Ablate {
            data,
            eval_data,
            ahg,
            grid,
            steps,
        } => ablate(common, data, eval_data, ahg, grid, steps, &device),
        Command::GenMicroDataset { pairs, size } => gen_micro(common, pairs, size),
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf> {
    let out = common.out.clone().ok_or_else(|| usage("--out is required"))?;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn dataset_path(flag: Option<PathBuf>, configured: &Option<PathBuf>) -> Result<PathBuf> {
    flag.or_else(|| configured.clone())
        .ok_or_else(|| usage("no dataset: pass --data or set paths.dataset"))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn warn_ignored_on_resume(common: &Common) {
    if common.config.is_some() || common.seed.is_some() {
        log::warn!("resuming: the configuration stored in the checkpoint takes precedence over --config/--seed");
    }
}

fn train_ahg(
    common: &Common,
    data: Option<PathBuf>,
    steps: Option<u64>,
    resume: Option<PathBuf>,
    device: &Device,
) -> Result<()> {
    let out = out_dir(common)?;
    let (mut run, append) = match &resume {
        Some(path) => {
            warn_ignored_on_resume(common);
            let ckpt = Checkpoint::load_kind(path, CheckpointKind::Ahg, device)?;
            (AhgRun::from_checkpoint(&ckpt, device)?, true)
        }
        None => (AhgRun::new(load_config(common)?, device)?, false),
    };
    if let Some(steps) = steps {
        run.config.ahg_train.steps = steps;
    }
    let data = dataset_path(data, &run.config.paths.dataset)?;
    let dataset = PairedDataset::open(&data)?;
    run.config.paths.dataset = Some(data);
    write_text(&out.join("config.toml"), &run.config.to_toml_string()?)?;

    let total = run.config.ahg_train.steps;
    let every = run.config.ahg_train.checkpoint_every;
    log::info!("training haze generator on {} pairs, steps {} -> {total}", dataset.len(), run.step());
    let mut log_file = JsonlLog::open(out.join("ahg_log.jsonl"), append)?;
    run.run(&dataset, total, |rec, run| {
        log_file.write(rec)?;
        if rec.step % LOG_EVERY == 0 || rec.step == total {
            log::info!("step {} total {:.5} l1_hazy {:.5} critic {:.5}", rec.step, rec.total, rec.l1_hazy, rec.critic);
        }
        if every > 0 && rec.step % every == 0 {
            run.checkpoint().save(out.join(format!("ahg_step{:06}.safetensors", rec.step)))?;
        }
        Ok(())
    })?;
    let path = out.join("ahg.safetensors");
    run.checkpoint().save(&path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

#[derive(Serialize)]
struct HazeSidecar<'a> {
    clear: &'a str,
    hazy_reference: &'a str,
    alpha: f64,
    seed: u64,
    modulation: bool,
    modulation_range: (f64, f64),
    perlin: PerlinParams,
}

fn gen_haze(
    common: &Common,
    ahg: Option<PathBuf>,
    clear_dir: &Path,
    hazy_dir: &Path,
    alphas: Vec<f64>,
    seeds: Vec<u64>,
    device: &Device,
) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?;
    let ckpt = ahg
        .or_else(|| cfg.paths.ahg_checkpoint.clone())
        .ok_or_else(|| usage("no haze generator: pass --ahg or set paths.ahg_checkpoint"))?;
    let model = load_ahg(&ckpt, device)?;
    let alphas = if alphas.is_empty() { cfg.gen_haze.alphas.clone() } else { alphas };
    let seeds = if seeds.is_empty() { cfg.gen_haze.seeds.clone() } else { seeds };
    let names = matched_png_names(clear_dir, hazy_dir)?;
    let mut written = 0;
    for name in &names {
        let clear = load_rgb(clear_dir.join(name), device)?.to_dtype(TRAIN_DTYPE)?;
        let hazy = load_rgb(hazy_dir.join(name), device)?.to_dtype(TRAIN_DTYPE)?;
        let (m_c, m_h) = model.encode(&clear, &hazy).with_context(|| format!("encoding {name}"))?;
        let stem = name.strip_suffix(".png").unwrap_or(name);
        for &alpha in &alphas {
            for &seed in &seeds {
                let spec = HazeSynthesisSpec {
                    alpha,
                    perlin: cfg.sampling.perlin.with_seed(seed),
                    enable_modulation: cfg.gen_haze.modulation,
                    modulation_range: DEFAULT_MODULATION_RANGE,
                };
                let img = model.synthesize(&clear, &m_c, &m_h, &spec)?;
                let base = format!("{stem}_a{alpha:+.3}_s{seed}");
                save_png(&img, out.join(format!("{base}.png")))?;
                let sidecar = HazeSidecar {
                    clear: name,
                    hazy_reference: name,
                    alpha,
                    seed,
                    modulation: spec.enable_modulation,
                    modulation_range: spec.modulation_range,
                    perlin: spec.perlin,
                };
                write_json(&out.join(format!("{base}.json")), &sidecar)?;
                written += 1;
            }
        }
    }
    log::info!("wrote {written} hazy images to {}", out.display());
    Ok(())
}

fn load_generator(path: Option<&PathBuf>, device: &Device) -> Result<Option<AhgModel>> {
    path.map(|p| load_ahg(p, device)).transpose().map_err(Into::into)
}

#[allow(clippy::too_many_arguments)]
fn train_dhr(
    common: &Common,
    data: Option<PathBuf>,
    ahg: Option<PathBuf>,
    no_ahg: bool,
    patch_size: Option<usize>,
    steps: Option<u64>,
    resume: Option<PathBuf>,
    device: &Device,
) -> Result<()> {
    let out = out_dir(common)?;
    let (mut trainer, append) = match &resume {
        Some(path) => {
            warn_ignored_on_resume(common);
            if patch_size.is_some() {
                return Err(usage("--patch-size cannot change when resuming"));
            }
            let ckpt = Checkpoint::load_kind(path, CheckpointKind::Dhr, device)?;
            (DhrTrainer::from_checkpoint(&ckpt, device)?, true)
        }
        None => {
            let mut cfg = load_config(common)?;
            if let Some(p) = patch_size {
                cfg.dhr.patch_size = p;
            }
            (DhrTrainer::new(cfg, device)?, false)
        }
    };
    let cfg = &mut trainer.config;
    if no_ahg {
        cfg.train.use_ahg = false;
    }
    if let Some(steps) = steps {
        cfg.train.max_steps = Some(steps);
    }
    let data = dataset_path(data, &cfg.paths.dataset)?;
    let dataset = PairedDataset::open(&data)?;
    cfg.paths.dataset = Some(data);
    if let Some(path) = ahg {
        cfg.paths.ahg_checkpoint = Some(path);
    }
    let generator = if cfg.train.use_ahg {
        load_generator(cfg.paths.ahg_checkpoint.as_ref(), device)?
    } else {
        None
    };
    cfg.validate()?;
    write_text(&out.join("config.toml"), &cfg.to_toml_string()?)?;

    let total = trainer.total_steps(dataset.len());
    let every = trainer.config.train.checkpoint_every;
    log::info!(
        "training dehazer on {} pairs, steps {} -> {total}, generator {}",
        dataset.len(),
        trainer.step(),
        if generator.is_some() { "on" } else { "off" }
    );
    let mut log_file = JsonlLog::open(out.join("dhr_log.jsonl"), append)?;
    trainer.run(&dataset, generator.as_ref(), |rec, t| {
        log_file.write(rec)?;
        if rec.step % LOG_EVERY == 0 || rec.step == total {
            log::info!(
                "step {} epoch {} lr {:.3e} total {:.5} mncd {:.4}",
                rec.step,
                rec.epoch,
                rec.lr,
                rec.total,
                rec.mncd
            );
        }
        if every > 0 && rec.step % every == 0 {
            t.checkpoint().save(out.join(format!("dhr_step{:06}.safetensors", rec.step)))?;
        }
        Ok(())
    })?;
    let path = out.join("dhr.safetensors");
    trainer.checkpoint().save(&path)?;
    log::info!("wrote {}", path.display());
    Ok(())
}

fn dehaze(common: &Common, checkpoint: &Path, input: &Path, device: &Device) -> Result<()> {
    let out = out_dir(common)?;
    let (model, _) = load_dhr(checkpoint, device)?;
    let inputs: Vec<PathBuf> = if input.is_dir() {
        png_names(input)?.into_iter().map(|n| input.join(n)).collect()
    } else {
        vec![input.to_path_buf()]
    };
    if inputs.is_empty() {
        return Err(hazekit::Error::DatasetIntegrity(format!("no PNG files in {}", input.display())).into());
    }
    let mut failed = 0;
    for path in &inputs {
        let result = load_rgb(path, device).and_then(|x| {
            let y = model.forward(&x.to_dtype(TRAIN_DTYPE)?)?;
            let name = path.file_stem().unwrap_or_default().to_string_lossy();
            save_png(&y, out.join(format!("{name}.png")))
        });
        if let Err(e) = result {
            log::warn!("skipping {}: {e}", path.display());
            failed += 1;
        }
    }
    if failed == inputs.len() {
        anyhow::bail!("all {failed} inputs failed");
    }
    log::info!("dehazed {} of {} images into {}", inputs.len() - failed, inputs.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct EvalFile<'a> {
    summary: EvalSummary,
    rows: &'a [EvalRow],
}

fn eval(common: &Common, pred: &Path, gt: &Path, device: &Device) -> Result<()> {
    let out = out_dir(common)?;
    let names = matched_png_names(pred, gt)?;
    let mut report = EvalReport::default();
    for name in &names {
        let p = load_rgb(pred.join(name), device)?;
        let g = load_rgb(gt.join(name), device)?;
        report.push(name.clone(), &p, &g).with_context(|| format!("scoring {name}"))?;
    }
    write_text(&out.join("eval.csv"), &report.to_csv())?;
    let summary = report.summary();
    write_json(
        &out.join("eval.json"),
        &EvalFile {
            summary: summary.clone(),
            rows: &report.rows,
        },
    )?;
    log::info!(
        "{} images: PSNR {:.3} dB, SSIM {:.4}",
        summary.count,
        summary.mean_psnr,
        summary.mean_ssim
    );
    Ok(())
}

fn ablate(
    common: &Common,
    data: Option<PathBuf>,
    eval_data: Option<PathBuf>,
    ahg: Option<PathBuf>,
    grid: GridArg,
    steps: Option<u64>,
    device: &Device,
) -> Result<()> {
    let mut cfg = load_config(common)?;
    let out = out_dir(common)?;
    if let Some(steps) = steps {
        cfg.ablate.steps = steps;
    }
    let data = dataset_path(data, &cfg.paths.dataset)?;
    let train_set = PairedDataset::open(&data)?;
    let eval_path = eval_data.or_else(|| cfg.paths.eval_dataset.clone()).unwrap_or_else(|| data.clone());
    let eval_set = PairedDataset::open(&eval_path)?;
    cfg.paths.dataset = Some(data);
    cfg.paths.eval_dataset = Some(eval_path);

    let generator = match ahg.or_else(|| cfg.paths.ahg_checkpoint.clone()) {
        Some(path) => {
            let model = load_ahg(&path, device)?;
            cfg.paths.ahg_checkpoint = Some(path);
            model
        }
        None => {
            let steps = cfg.ablate.ahg_steps;
            log::info!("training a haze generator for {steps} steps");
            let mut run = AhgRun::new(cfg.clone(), device)?;
            let mut log_file = JsonlLog::open(out.join("ahg_log.jsonl"), false)?;
            run.run(&train_set, steps, |rec, _| log_file.write(rec))?;
            let path = out.join("ahg.safetensors");
            run.checkpoint().save(&path)?;
            cfg.paths.ahg_checkpoint = Some(path);
            run.trainer.model
        }
    };
    cfg.validate()?;
    write_text(&out.join("config.toml"), &cfg.to_toml_string()?)?;

    let grids: Vec<Grid> = match grid {
        GridArg::Modules => vec![Grid::Modules],
        GridArg::PatchSize => vec![Grid::PatchSize],
        GridArg::Lambda3 => vec![Grid::Lambda3],
        GridArg::All => Grid::ALL.to_vec(),
    };
    let mut tables = Vec::new();
    for grid in grids {
        let mut table = AblationTable { grid, rows: Vec::new() };
        for spec in grid_rows(grid, &cfg) {
            let row = run_row(&spec, &train_set, &eval_set, Some(&generator), device)?;
            log::info!("{:?} {}: PSNR {:.3} SSIM {:.4}", grid, row.label, row.psnr, row.ssim);
            table.rows.push(row);
        }
        write_text(&out.join(format!("{}.csv", grid.file_stem())), &table.to_csv())?;
        write_text(&out.join(format!("{}.md", grid.file_stem())), &table.to_markdown())?;
        tables.push(table);
    }
    write_json(&out.join("ablation.json"), &tables)?;
    log::info!("wrote ablation tables to {}", out.display());
    Ok(())
}

fn gen_micro(common: &Common, pairs: usize, size: u32) -> Result<()> {
    let cfg = load_config(common)?;
    let out = out_dir(common)?;
    let opts = MicroDatasetOptions {
        pairs,
        size,
        seed: cfg.seed,
        ..MicroDatasetOptions::default()
    };
    let ds = generate_micro_dataset(&out, &opts)?;
    log::info!("wrote {} pairs to {}", ds.len(), out.display());
    Ok(())
}
