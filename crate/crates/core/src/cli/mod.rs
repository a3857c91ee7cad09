//! Command-line surface: dataset synthesis, training, evaluation, single
//! image deraining, the ablation grid, and report plots.
//!
//! Exit codes: 0 on success, 1 for usage errors (bad flags, bad config
//! values), 2 for runtime failures.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ndarray::Array4;

use crate::data::{
    self, ImageTensor, PairNaming, RainPair, StreakParams, SynthSpec,
};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::network::{self, DerainNet};
use crate::plot::LinePlot;
use crate::training::{self, load_checkpoint, CheckpointData, EpochRecord};

pub use config::{AblationAxis, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "mhderain",
    version,
    about = "multi-stream single-image deraining: synthesis, training, evaluation, ablation"
)]
pub struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Override the training and synthesis seeds.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (each command has its own default).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,

    /// Allow writing into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic rainy/clean pair dataset.
    Synth {
        /// Number of image pairs.
        #[arg(long)]
        count: Option<usize>,
        /// Square image side length in pixels.
        #[arg(long)]
        size: Option<usize>,
        /// Dense multi-band streak preset.
        #[arg(long)]
        heavy: bool,
    },
    /// Train a model on a pair dataset.
    Train {
        /// Dataset directory (rainy/ + norain/, or flat prefixed files).
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Continue from a checkpoint.
        #[arg(long, value_name = "FILE")]
        resume: Option<PathBuf>,
    },
    /// Compute PSNR/SSIM of a checkpoint over a dataset.
    Eval {
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Derain one image or a directory of images.
    Derain {
        /// Input image file or directory.
        input: Option<PathBuf>,
        #[arg(long, value_name = "FILE")]
        checkpoint: Option<PathBuf>,
        /// Also write a side-by-side rainy|derained[|truth] panel.
        #[arg(long)]
        triptych: bool,
    },
    /// Train and evaluate a grid of model variants, one table per axis.
    Ablate {
        /// Axes to sweep: all, or a comma list of loss,lambda_p,streams,cascades.
        #[arg(long)]
        axes: Option<String>,
        /// Evaluate on this dataset instead of synthesizing one.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Use the configured (full) scale instead of the desk-scale preset.
        #[arg(long = "paper-scale")]
        paper_scale: bool,
    },
    /// Render loss and validation-metric plots from history files.
    Report {
        /// One or more training history files.
        histories: Vec<PathBuf>,
    },
}

pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .try_init()
        .ok();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            eprint!("{e}");
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = resolve_config(&cli)?;
    match &cli.command {
        Command::Synth { .. } => {
            cmd_synth(&cfg, cli.force)?;
        }
        Command::Train { resume, .. } => {
            cmd_train(&cfg, resume.as_deref())?;
        }
        Command::Eval { .. } => {
            cmd_eval(&cfg)?;
        }
        Command::Derain { triptych, .. } => {
            cmd_derain(&cfg, *triptych)?;
        }
        Command::Ablate { .. } => {
            cmd_ablate(&cfg)?;
        }
        Command::Report { histories } => {
            let out = out_dir(&cfg, "report");
            cmd_report(histories, &out, &cfg)?;
        }
    }
    Ok(())
}

/// Layer the configuration: defaults, then the desk-scale ablation preset
/// when applicable, then the config file, then flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let file_pairs = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            config::parse_flat(&text)?
        }
        None => Vec::new(),
    };

    let mut cfg = RunConfig::default();
    if let Command::Ablate { paper_scale, .. } = &cli.command {
        let file_paper = file_pairs
            .iter()
            .any(|(k, v)| k == "ablate.paper_scale" && v == "true");
        if !*paper_scale && !file_paper {
            apply_desk_ablation_preset(&mut cfg);
        }
    }
    for (key, value) in &file_pairs {
        cfg.apply(key, value)?;
    }

    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
        cfg.synth.streaks.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out = Some(out.clone());
    }

    match &cli.command {
        Command::Synth { count, size, heavy } => {
            if let Some(c) = count {
                cfg.synth.count = *c;
            }
            if let Some(s) = size {
                cfg.synth.height = *s;
                cfg.synth.width = *s;
            }
            if *heavy {
                cfg.synth.streaks = StreakParams::heavy(cfg.synth.streaks.seed);
            }
        }
        Command::Train { dataset, .. } => {
            if let Some(d) = dataset {
                cfg.paths.dataset = Some(d.clone());
            }
        }
        Command::Eval {
            checkpoint,
            dataset,
        } => {
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = Some(c.clone());
            }
            if let Some(d) = dataset {
                cfg.paths.dataset = Some(d.clone());
            }
        }
        Command::Derain {
            input, checkpoint, ..
        } => {
            if let Some(i) = input {
                cfg.paths.input = Some(i.clone());
            }
            if let Some(c) = checkpoint {
                cfg.paths.checkpoint = Some(c.clone());
            }
        }
        Command::Ablate {
            axes,
            dataset,
            paper_scale,
        } => {
            if let Some(a) = axes {
                cfg.ablate_axes = config::parse_axes(a)?;
            }
            if let Some(d) = dataset {
                cfg.paths.dataset = Some(d.clone());
            }
            if *paper_scale {
                cfg.paper_scale = true;
            }
        }
        Command::Report { .. } => {}
    }
    Ok(cfg)
}

/// Grid cells must finish in seconds, not hours, unless --paper-scale asks
/// otherwise.
fn apply_desk_ablation_preset(cfg: &mut RunConfig) {
    cfg.net = network::desk_config();
    cfg.train.batch_size = 4;
    cfg.train.epochs = 2;
    cfg.train.patches_per_image = 2;
    cfg.train.patch_size = 24;
    cfg.train.eval_every_epochs = 1;
    cfg.synth.count = 4;
    cfg.synth.height = 48;
    cfg.synth.width = 48;
}

fn out_dir(cfg: &RunConfig, default_name: &str) -> PathBuf {
    cfg.paths
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from(default_name))
}

/// Create the output directory and drop the resolved config next to the
/// outputs, so the run can be reproduced from that file alone.
fn prepare_out(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut resolved = cfg.clone();
    resolved.paths.out = Some(out.to_path_buf());
    resolved.save(&out.join("resolved.cfg"))
}

pub fn cmd_synth(cfg: &RunConfig, force: bool) -> Result<()> {
    let out = out_dir(cfg, "dataset");
    if out.exists() {
        let occupied = fs::read_dir(&out)
            .map_err(|e| Error::io(&out, e))?
            .next()
            .is_some();
        if occupied && !force {
            return Err(Error::Data(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
    }
    prepare_out(cfg, &out)?;
    let spec = SynthSpec {
        count: cfg.synth.count,
        height: cfg.synth.height,
        width: cfg.synth.width,
        streaks: cfg.synth.streaks.clone(),
    };
    data::synth_dataset(&out, &spec)?;
    println!(
        "wrote {} pair(s) of {}x{} images under {}",
        spec.count,
        spec.height,
        spec.width,
        out.display()
    );
    Ok(())
}

fn load_pairs(dataset: &Path) -> Result<Vec<RainPair<f32>>> {
    let loaded = data::load_pair_dataset::<f32>(dataset, &PairNaming::default())?;
    Ok(loaded.pairs)
}

/// Load the checkpoint and reconcile its stored network shape with the
/// configured one: adopt it unless the user pinned `net.*` keys, in which
/// case any difference is a refusal.
fn network_from_checkpoint(
    cfg: &RunConfig,
    path: &Path,
) -> Result<(DerainNet<f32>, CheckpointData)> {
    let ckpt = load_checkpoint(path)?;
    if cfg.net_explicit {
        ckpt.check_network_config(&cfg.net)?;
    }
    let net = ckpt.build_network()?;
    Ok((net, ckpt))
}

pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>) -> Result<training::TrainOutcome> {
    let dataset = cfg.paths.dataset.clone().ok_or_else(|| {
        Error::Config("train needs a dataset (--dataset or paths.dataset)".into())
    })?;
    let pairs = load_pairs(&dataset)?;

    let (mut net, ckpt) = match resume {
        Some(path) => {
            let (net, ckpt) = network_from_checkpoint(cfg, path)?;
            (net, Some(ckpt))
        }
        None => (
            DerainNet::build(cfg.net.clone(), cfg.train.seed)?,
            None,
        ),
    };

    let out = out_dir(cfg, "run");
    let mut resolved = cfg.clone();
    resolved.net = net.config().clone();
    prepare_out(&resolved, &out)?;

    let outcome = training::train(&mut net, &pairs, &cfg.train, &out, ckpt.as_ref())?;
    for record in &outcome.records {
        println!("{}", record.line());
    }
    println!("checkpoint: {}", outcome.checkpoint_path.display());
    Ok(outcome)
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<training::MetricsReport> {
    let ckpt_path = cfg.paths.checkpoint.clone().ok_or_else(|| {
        Error::Config("eval needs a checkpoint (--checkpoint or paths.checkpoint)".into())
    })?;
    let dataset = cfg.paths.dataset.clone().ok_or_else(|| {
        Error::Config("eval needs a dataset (--dataset or paths.dataset)".into())
    })?;
    let (net, _) = network_from_checkpoint(cfg, &ckpt_path)?;
    let pairs = load_pairs(&dataset)?;

    let out = out_dir(cfg, "eval");
    let mut resolved = cfg.clone();
    resolved.net = net.config().clone();
    prepare_out(&resolved, &out)?;

    let report = training::evaluate(&net, &pairs, &cfg.train.loss.ssim)?;
    report.write_csv(&out.join("metrics.csv"))?;
    println!("{}", report.summary());
    Ok(report)
}

#[derive(Debug)]
pub struct DerainSummary {
    pub written: usize,
    pub skipped: Vec<(PathBuf, String)>,
}

fn is_image_path(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg")
    )
}

/// Side-by-side panel with a white gutter between images.
fn hcat_panels(images: &[&Array4<f32>], gutter: usize) -> Array4<f32> {
    let (_, c, h, _) = images[0].dim();
    let total_w: usize =
        images.iter().map(|a| a.dim().3).sum::<usize>() + gutter * (images.len() - 1);
    let mut out = Array4::<f32>::ones((1, c, h, total_w));
    let mut x0 = 0;
    for img in images {
        let w = img.dim().3;
        out.slice_mut(ndarray::s![.., .., .., x0..x0 + w])
            .assign(&img.slice(ndarray::s![0..1, .., .., ..]));
        x0 += w + gutter;
    }
    out
}

/// Look for the matching clean image of a rainy input, for triptych panels.
fn find_ground_truth(input: &Path, naming: &PairNaming) -> Option<PathBuf> {
    let stem = input.file_stem()?.to_str()?;
    let id = stem.strip_prefix(&naming.rainy_prefix)?;
    let clean_name = format!("{}{}", naming.clean_prefix, id);
    let parent = input.parent()?;
    let mut candidates = Vec::new();
    for ext in ["png", "jpg", "jpeg"] {
        candidates.push(parent.join(format!("{clean_name}.{ext}")));
        if let Some(grandparent) = parent.parent() {
            candidates.push(grandparent.join("norain").join(format!("{clean_name}.{ext}")));
        }
    }
    candidates.into_iter().find(|p| p.is_file())
}

pub fn cmd_derain(cfg: &RunConfig, triptych: bool) -> Result<DerainSummary> {
    let ckpt_path = cfg.paths.checkpoint.clone().ok_or_else(|| {
        Error::Config("derain needs a checkpoint (--checkpoint or paths.checkpoint)".into())
    })?;
    let input = cfg.paths.input.clone().ok_or_else(|| {
        Error::Config("derain needs an input image or directory".into())
    })?;
    let (net, _) = network_from_checkpoint(cfg, &ckpt_path)?;

    let files: Vec<PathBuf> = if input.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(&input)
            .map_err(|e| Error::io(&input, e))?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && is_image_path(p))
            .collect();
        entries.sort();
        entries
    } else {
        vec![input.clone()]
    };
    if files.is_empty() {
        return Err(Error::Data(format!(
            "no image files found under {}",
            input.display()
        )));
    }

    let out = out_dir(cfg, "derained");
    let mut resolved = cfg.clone();
    resolved.net = net.config().clone();
    prepare_out(&resolved, &out)?;

    let naming = PairNaming::default();
    let mut written = 0;
    let mut skipped: Vec<(PathBuf, String)> = Vec::new();
    for file in &files {
        let img = match data::load_image::<f32>(file) {
            Ok(img) => img,
            Err(e) => {
                log::warn!("skipping {}: {e}", file.display());
                skipped.push((file.clone(), e.to_string()));
                continue;
            }
        };
        let stem = file
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or("image")
            .to_string();
        let result = net.derain(img.array())?;
        let derained = ImageTensor::new(result.derained)?;
        data::save_image(&out.join(format!("{stem}_derained.png")), &derained)?;

        if triptych {
            let mut panels: Vec<&Array4<f32>> = vec![img.array(), derained.array()];
            let truth = find_ground_truth(file, &naming)
                .and_then(|p| data::load_image::<f32>(&p).ok())
                .filter(|t| t.array().dim() == img.array().dim());
            if let Some(t) = &truth {
                panels.push(t.array());
            }
            let panel = ImageTensor::new(hcat_panels(&panels, 4))?;
            data::save_image(&out.join(format!("{stem}_triptych.png")), &panel)?;
        }
        written += 1;
    }
    if written == 0 {
        return Err(Error::Data(format!(
            "none of the {} input file(s) under {} could be decoded",
            files.len(),
            input.display()
        )));
    }
    println!(
        "derained {written} image(s) into {}; skipped {}",
        out.display(),
        skipped.len()
    );
    for (file, reason) in &skipped {
        println!("  skipped {}: {reason}", file.display());
    }
    Ok(DerainSummary { written, skipped })
}

/// Drop long shortcuts whose destination cascade no longer exists when the
/// cascade count shrinks below the configured pairs.
fn filter_shortcut_pairs(
    pairs: &[(usize, usize)],
    cascades: usize,
) -> Vec<(usize, usize)> {
    pairs
        .iter()
        .copied()
        .filter(|&(src, dst)| src < dst && dst <= cascades)
        .collect()
}

fn sanitize_label(label: &str) -> String {
    label
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

/// The column set of one ablation table: `(label, cell configuration)`.
fn axis_columns(axis: AblationAxis, base: &RunConfig) -> Vec<(String, RunConfig)> {
    match axis {
        AblationAxis::Loss => LossKind::ALL
            .iter()
            .map(|kind| {
                let mut cell = base.clone();
                cell.train.loss.loss_kind = *kind;
                (kind.name().to_string(), cell)
            })
            .collect(),
        AblationAxis::LambdaP => [0.1f64, 1.0, 10.0]
            .iter()
            .map(|&v| {
                let mut cell = base.clone();
                cell.train.loss.lambda_p = v;
                if !cell.train.loss.loss_kind.uses_perceptual() {
                    cell.train.loss.loss_kind = LossKind::SsimPerceptual;
                }
                (format!("lambda_p={v}"), cell)
            })
            .collect(),
        AblationAxis::Streams => {
            let variants: [(&str, &[usize]); 4] = [
                ("MHDN-ss", &[3]),
                ("MHDN-ds", &[3, 5]),
                ("MHDN-ts", &[3, 5, 7]),
                ("MHDN-fs", &[1, 3, 5, 7]),
            ];
            variants
                .iter()
                .map(|(label, kernels)| {
                    let mut cell = base.clone();
                    cell.net.stream_kernels = kernels.to_vec();
                    (label.to_string(), cell)
                })
                .collect()
        }
        AblationAxis::Cascades => [4usize, 5, 6, 7]
            .iter()
            .map(|&n| {
                let mut cell = base.clone();
                cell.net.cascades_per_stream = n;
                cell.net.shortcut_pairs =
                    filter_shortcut_pairs(&base.net.shortcut_pairs, n);
                (format!("MHDN-{n}"), cell)
            })
            .collect(),
    }
}

/// Train a fresh model for one grid cell and evaluate it, preferring the
/// held-out identifier-hash split when it is non-empty.
fn run_cell(
    cell: &RunConfig,
    pairs: &[RainPair<f32>],
    cell_dir: &Path,
) -> Result<String> {
    let mut resolved = cell.clone();
    resolved.paths.out = Some(cell_dir.to_path_buf());
    fs::create_dir_all(cell_dir).map_err(|e| Error::io(cell_dir, e))?;
    resolved.save(&cell_dir.join("resolved.cfg"))?;

    let mut net = DerainNet::build(cell.net.clone(), cell.train.seed)?;
    training::train(&mut net, pairs, &cell.train, cell_dir, None)?;

    let val: Vec<RainPair<f32>> = pairs
        .iter()
        .filter(|p| training::id_hash(&p.id) % 10 == 0)
        .cloned()
        .collect();
    let eval_pairs: &[RainPair<f32>] = if val.is_empty() { pairs } else { &val };
    let report = training::evaluate(&net, eval_pairs, &cell.train.loss.ssim)?;
    Ok(report.summary())
}

/// Synthesize the two-density evaluation datasets unless a dataset path was
/// supplied; reuse them when already present.
fn ablation_rows(cfg: &RunConfig, out: &Path) -> Result<Vec<(String, PathBuf)>> {
    if let Some(dir) = &cfg.paths.dataset {
        let name = dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or("dataset")
            .to_string();
        return Ok(vec![(name, dir.clone())]);
    }
    let mut rows = Vec::new();
    let light = StreakParams {
        seed: cfg.synth.streaks.seed,
        ..cfg.synth.streaks.clone()
    };
    let heavy = StreakParams::heavy(cfg.synth.streaks.seed.wrapping_add(1));
    for (name, streaks) in [("synth-light", light), ("synth-heavy", heavy)] {
        let dir = out.join("data").join(name);
        let occupied = dir.is_dir()
            && fs::read_dir(&dir)
                .map_err(|e| Error::io(&dir, e))?
                .next()
                .is_some();
        if !occupied {
            let spec = SynthSpec {
                count: cfg.synth.count,
                height: cfg.synth.height,
                width: cfg.synth.width,
                streaks,
            };
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            data::synth_dataset(&dir, &spec)?;
        }
        rows.push((name.to_string(), dir));
    }
    Ok(rows)
}

/// Sweep each requested axis: one CSV per axis, rows are datasets, columns
/// are the variants, cells are `psnr/ssim` or `FAIL`.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let out = out_dir(cfg, "ablation");
    prepare_out(cfg, &out)?;
    let rows = ablation_rows(cfg, &out)?;

    let mut csv_paths = Vec::new();
    for &axis in &cfg.ablate_axes {
        let columns = axis_columns(axis, cfg);
        let mut csv = String::from("dataset");
        for (label, _) in &columns {
            csv.push(',');
            csv.push_str(label);
        }
        csv.push('\n');

        for (row_name, dataset_dir) in &rows {
            let pairs = load_pairs(dataset_dir)?;
            csv.push_str(row_name);
            for (label, cell) in &columns {
                let cell_dir = out
                    .join("cells")
                    .join(axis.name())
                    .join(sanitize_label(label))
                    .join(row_name);
                let value = match run_cell(cell, &pairs, &cell_dir) {
                    Ok(summary) => summary,
                    Err(e) => {
                        log::warn!(
                            "ablation cell {axis}/{label} on {row_name} failed: {e}"
                        );
                        "FAIL".to_string()
                    }
                };
                csv.push(',');
                csv.push_str(&value);
            }
            csv.push('\n');
        }

        let csv_path = out.join(format!("{}.csv", axis.name()));
        crate::util::atomic_write(&csv_path, csv.as_bytes())?;
        println!("== {axis} ==");
        print!("{csv}");
        csv_paths.push(csv_path);
    }
    Ok(csv_paths)
}

fn run_name(path: &Path, used: &[String]) -> String {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("run")
        .to_string();
    let mut base = if stem == "history" {
        path.parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or("run")
            .to_string()
    } else {
        stem
    };
    let original = base.clone();
    let mut k = 2;
    while used.contains(&base) {
        base = format!("{original}-{k}");
        k += 1;
    }
    base
}

fn fmt_best(v: Option<f64>, decimals: usize) -> String {
    match v {
        Some(x) => format!("{x:.decimals$}"),
        None => "n/a".into(),
    }
}

pub fn cmd_report(histories: &[PathBuf], out: &Path, cfg: &RunConfig) -> Result<()> {
    if histories.is_empty() {
        return Err(Error::Config(
            "report needs at least one history file".into(),
        ));
    }
    let mut runs: Vec<(String, Vec<EpochRecord>)> = Vec::new();
    for path in histories {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut records = Vec::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            match EpochRecord::parse(line) {
                Ok(r) => records.push(r),
                Err(e) => {
                    log::warn!("skipping malformed line in {}: {e}", path.display());
                }
            }
        }
        if records.is_empty() {
            return Err(Error::Data(format!(
                "history {} contains no valid epoch records",
                path.display()
            )));
        }
        let names: Vec<String> = runs.iter().map(|(n, _)| n.clone()).collect();
        runs.push((run_name(path, &names), records));
    }

    prepare_out(cfg, out)?;

    let mut loss_plot = LinePlot::new("training loss", "epoch", "loss");
    for (name, records) in &runs {
        loss_plot.add_series(
            name,
            records
                .iter()
                .map(|r| (r.epoch as f64, r.mean_loss))
                .collect(),
        );
    }
    loss_plot.save_png(&out.join("loss.png"), 720, 480)?;

    let mut val_plot = LinePlot::new("validation ssim", "epoch", "ssim");
    for (name, records) in &runs {
        val_plot.add_series(
            name,
            records
                .iter()
                .map(|r| (r.epoch as f64, r.mean_ssim_val))
                .collect(),
        );
    }
    match val_plot.save_png(&out.join("val_ssim.png"), 720, 480) {
        Ok(()) => {}
        Err(e) => log::warn!("no validation metrics to plot: {e}"),
    }

    let mut md = String::from("# training report\n\n");
    md.push_str("| run | epochs | final loss | best val PSNR (dB) | best val SSIM |\n");
    md.push_str("|---|---|---|---|---|\n");
    for (name, records) in &runs {
        let last = records.last().expect("non-empty by construction");
        let best_psnr = records
            .iter()
            .map(|r| r.mean_psnr_val)
            .filter(|v| v.is_finite())
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            });
        let best_ssim = records
            .iter()
            .map(|r| r.mean_ssim_val)
            .filter(|v| v.is_finite())
            .fold(None, |acc: Option<f64>, v| {
                Some(acc.map_or(v, |a| a.max(v)))
            });
        md.push_str(&format!(
            "| {name} | {} | {:.6} | {} | {} |\n",
            records.len(),
            last.mean_loss,
            fmt_best(best_psnr, 2),
            fmt_best(best_ssim, 3),
        ));
    }
    crate::util::atomic_write(&out.join("summary.md"), md.as_bytes())?;
    println!("report written to {}", out.display());
    Ok(())
}
