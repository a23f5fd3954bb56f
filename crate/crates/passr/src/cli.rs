//! Command-line surface: train / eval / sr / inspect / ablate / synth.
//!
//! Training options can come from a plain key=value config file (the same
//! format the trainer echoes into `run.cfg`); explicit flags override it.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::ckpt;
use crate::data;
use crate::metrics::{psnr, ssim, EvalConfig};
use crate::net::Network;
use crate::nn::ParamStore;
use crate::pam::expected_disparity;
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::train::{self, DataSource, TrainConfig};

#[derive(Parser)]
#[command(name = "passr", about = "Stereo super-resolution with parallax attention", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model on synthetic scenes or a manifest of HR pairs.
    Train(TrainArgs),
    /// Score SR output against HR ground truth over a manifest.
    Eval(EvalArgs),
    /// Super-resolve one LR pair into a PNG.
    Sr(SrArgs),
    /// Dump attention-map rows, valid masks and the expected-disparity map.
    Inspect(InspectArgs),
    /// Train and score a set of network/input/loss variants.
    Ablate(AblateArgs),
    /// Generate a synthetic stereo dataset with ground-truth disparity.
    Synth(SynthArgs),
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Key=value config file; flags below override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Start from the full-width reference protocol instead of desk scale.
    #[arg(long)]
    reference: bool,
    #[arg(long, value_parser = parse_scale)]
    scale: Option<u64>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Steps per epoch.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    patch_h: Option<usize>,
    #[arg(long)]
    patch_w: Option<usize>,
    #[arg(long)]
    synth_h: Option<usize>,
    #[arg(long)]
    synth_w: Option<usize>,
    #[arg(long)]
    val_samples: Option<usize>,
    /// Drop the attention module and its consistency losses.
    #[arg(long)]
    no_pam: bool,
    /// Left view only, duplicated into the fusion stack.
    #[arg(long)]
    single_input: bool,
    /// Remove the transition block in front of the attention convs.
    #[arg(long)]
    no_transition: bool,
    /// Collapse all dilations to 1.
    #[arg(long)]
    no_atrous: bool,
    /// Drop the residual skips inside multi-scale groups.
    #[arg(long)]
    no_aspp_residual: bool,
    /// Feed the left view into both inputs at run time.
    #[arg(long)]
    replicate_left: bool,
    /// Disable the photometric consistency term.
    #[arg(long)]
    no_photometric: bool,
    /// Disable the smoothness term.
    #[arg(long)]
    no_smooth: bool,
    /// Disable the cycle term.
    #[arg(long)]
    no_cycle: bool,
}

fn parse_scale(v: &str) -> Result<u64, String> {
    match v {
        "2" => Ok(2),
        "4" => Ok(4),
        _ => Err(format!("scale must be 2 or 4, got {v}")),
    }
}

fn parse_bool(v: &str) -> Result<bool, String> {
    match v {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(format!("expected true/false, got {v}")),
    }
}

fn apply_kv(cfg: &mut TrainConfig, key: &str, value: &str) -> Result<(), String> {
    let num = |v: &str| v.parse::<usize>().map_err(|e| format!("{key}: {e}"));
    let float = |v: &str| v.parse::<f64>().map_err(|e| format!("{key}: {e}"));
    match key {
        "scale" => cfg.scale = num(value)?,
        "channels" => cfg.channels = num(value)?,
        "seed" => cfg.seed = value.parse().map_err(|e| format!("{key}: {e}"))?,
        "epochs" => cfg.epochs = num(value)?,
        "steps_per_epoch" => cfg.steps_per_epoch = num(value)?,
        "batch" => cfg.batch = num(value)?,
        "lr" => cfg.initial_lr = float(value)?,
        "halve_every_epochs" => cfg.halve_every_epochs = num(value)?,
        "lambda" => cfg.lambda = float(value)?,
        "loss_photometric" => cfg.components.photometric = parse_bool(value)?,
        "loss_smooth" => cfg.components.smooth = parse_bool(value)?,
        "loss_cycle" => cfg.components.cycle = parse_bool(value)?,
        "single_input" => cfg.ablation.single_input = parse_bool(value)?,
        "no_pam" => cfg.ablation.no_pam = parse_bool(value)?,
        "no_transition" => cfg.ablation.no_transition = parse_bool(value)?,
        "no_atrous" => cfg.ablation.no_atrous = parse_bool(value)?,
        "no_aspp_residual" => cfg.ablation.no_aspp_residual = parse_bool(value)?,
        "replicate_left" => cfg.replicate_left = parse_bool(value)?,
        "patch_h" => cfg.patch_h = num(value)?,
        "patch_w" => cfg.patch_w = num(value)?,
        "synth_h" => cfg.synth_h = num(value)?,
        "synth_w" => cfg.synth_w = num(value)?,
        "val_samples" => cfg.val_samples = num(value)?,
        other => return Err(format!("unknown config key {other}")),
    }
    Ok(())
}

fn load_config_file(cfg: &mut TrainConfig, path: &Path) -> Result<(), String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("{}:{}: expected key=value", path.display(), lineno + 1))?;
        apply_kv(cfg, key.trim(), value.trim())?;
    }
    Ok(())
}

impl ConfigArgs {
    fn build(&self) -> Result<TrainConfig, String> {
        let scale = self.scale.unwrap_or(2) as usize;
        let mut cfg = if self.reference {
            TrainConfig::reference(scale)
        } else {
            TrainConfig::desk(scale)
        };
        if let Some(path) = &self.config {
            load_config_file(&mut cfg, path)?;
        }
        if let Some(v) = self.scale {
            cfg.scale = v as usize;
        }
        if let Some(v) = self.channels {
            cfg.channels = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.steps {
            cfg.steps_per_epoch = v;
        }
        if let Some(v) = self.batch {
            cfg.batch = v;
        }
        if let Some(v) = self.lr {
            cfg.initial_lr = v;
        }
        if let Some(v) = self.lambda {
            cfg.lambda = v;
        }
        if let Some(v) = self.patch_h {
            cfg.patch_h = v;
        }
        if let Some(v) = self.patch_w {
            cfg.patch_w = v;
        }
        if let Some(v) = self.synth_h {
            cfg.synth_h = v;
        }
        if let Some(v) = self.synth_w {
            cfg.synth_w = v;
        }
        if let Some(v) = self.val_samples {
            cfg.val_samples = v;
        }
        cfg.ablation.no_pam |= self.no_pam;
        cfg.ablation.single_input |= self.single_input;
        cfg.ablation.no_transition |= self.no_transition;
        cfg.ablation.no_atrous |= self.no_atrous;
        cfg.ablation.no_aspp_residual |= self.no_aspp_residual;
        cfg.replicate_left |= self.replicate_left;
        cfg.components.photometric &= !self.no_photometric;
        cfg.components.smooth &= !self.no_smooth;
        cfg.components.cycle &= !self.no_cycle;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// HR pair manifest; omitted means synthetic training data.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "runs/train")]
    out_dir: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Pixels cropped per side before scoring (default: the scale).
    #[arg(long)]
    border_crop: Option<usize>,
    /// Quantize to 8-bit levels before scoring.
    #[arg(long)]
    quantized: bool,
}

#[derive(Args)]
struct SrArgs {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    left: PathBuf,
    #[arg(long)]
    right: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Image row whose attention slice is exported.
    #[arg(long, default_value_t = 0)]
    row: usize,
    #[arg(long, default_value = "runs/inspect")]
    out_dir: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated axes; defaults to every known axis.
    #[arg(long, value_delimiter = ',')]
    axes: Option<Vec<String>>,
    #[arg(long, default_value = "runs/ablate")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "runs/synth")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// LR extents of each generated sample.
    #[arg(long, default_value_t = 32)]
    height: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 2, value_parser = parse_scale)]
    scale: u64,
}

/// Rebuild a network whose weights live in `path`. Scale/channels come
/// from the checkpoint when recorded; flags override.
fn load_network(
    args: &ConfigArgs,
    path: &Path,
) -> Result<(Network, ParamStore<f32>, TrainConfig), String> {
    let c = ckpt::load(path).map_err(|e| e.to_string())?;
    let mut cfg = args.build()?;
    if args.scale.is_none() {
        if let Some(s) = c.get_scalar("state.scale") {
            cfg.scale = s as usize;
        }
    }
    if args.channels.is_none() {
        if let Some(ch) = c.get_scalar("state.channels") {
            cfg.channels = ch as usize;
        }
    }
    let (net, mut store) =
        Network::build::<f32>(cfg.network_config(), cfg.seed).map_err(|e| e.to_string())?;
    c.restore_store("net.", &mut store).map_err(|e| e.to_string())?;
    Ok((net, store, cfg))
}

fn cmd_train(args: &TrainArgs) -> Result<(), String> {
    let cfg = args.config.build()?;
    let source = match &args.manifest {
        Some(path) => DataSource::from_manifest(path).map_err(|e| e.to_string())?,
        None => DataSource::Synthetic,
    };
    let mut print_line = |line: &str| println!("{line}");
    let outcome = train::train(
        &cfg,
        &source,
        &args.out_dir,
        args.resume.as_deref(),
        Some(&mut print_line),
    )
    .map_err(|e| e.to_string())?;
    std::fs::write(args.out_dir.join("train.log"), outcome.log.join("\n") + "\n")
        .map_err(|e| format!("cannot write train.log: {e}"))?;
    println!(
        "best val_psnr {:.4} at epoch {} ({})",
        outcome.best_psnr,
        outcome.best_epoch,
        outcome.best_path.display()
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), String> {
    let (net, store, cfg) = load_network(&args.config, &args.ckpt)?;
    let entries = data::load_manifest(&args.manifest).map_err(|e| e.to_string())?;
    if entries.is_empty() {
        return Err("manifest has no entries".into());
    }
    let eval = EvalConfig {
        border_crop: args.border_crop.unwrap_or(cfg.scale),
        quantized: args.quantized,
    };
    let mut psnr_total = 0.0;
    let mut ssim_total = 0.0;
    for (i, entry) in entries.iter().enumerate() {
        let left_hr = data::load_image(&entry.left).map_err(|e| e.to_string())?;
        let right_hr = data::load_image(&entry.right).map_err(|e| e.to_string())?;
        let s = cfg.scale as f64;
        let left_lr = data::bicubic_resize(&left_hr, 1.0 / s).map_err(|e| e.to_string())?;
        let right_lr = data::bicubic_resize(&right_hr, 1.0 / s).map_err(|e| e.to_string())?;
        let sr = train::super_resolve(&net, &store, &left_lr, &right_lr, cfg.replicate_left)
            .map_err(|e| e.to_string())?;
        let p = psnr(&sr, &left_hr, &eval).map_err(|e| e.to_string())?;
        let si = ssim(&sr, &left_hr, &eval).map_err(|e| e.to_string())?;
        println!("image {i} psnr {p:.4} ssim {si:.4}");
        psnr_total += p;
        ssim_total += si;
    }
    let n = entries.len() as f64;
    println!("mean psnr {:.4} ssim {:.4}", psnr_total / n, ssim_total / n);
    Ok(())
}

fn cmd_sr(args: &SrArgs) -> Result<(), String> {
    let (net, store, cfg) = load_network(&args.config, &args.ckpt)?;
    let left = data::load_image(&args.left).map_err(|e| e.to_string())?;
    let right = data::load_image(&args.right).map_err(|e| e.to_string())?;
    let sr = train::super_resolve(&net, &store, &left, &right, cfg.replicate_left)
        .map_err(|e| e.to_string())?;
    if let Some(parent) = args.out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| e.to_string())?;
        }
    }
    data::save_image(&sr, &args.out).map_err(|e| e.to_string())?;
    println!(
        "wrote {} ({}x{})",
        args.out.display(),
        sr.shape()[1],
        sr.shape()[0]
    );
    Ok(())
}

fn cmd_inspect(args: &InspectArgs) -> Result<(), String> {
    let (net, store, cfg) = load_network(&args.config, &args.ckpt)?;
    if cfg.ablation.no_pam || cfg.ablation.single_input {
        return Err("this variant has no attention maps to inspect".into());
    }
    let left = data::load_image(&args.left).map_err(|e| e.to_string())?;
    let right = data::load_image(&args.right).map_err(|e| e.to_string())?;
    let (h, w) = (left.shape()[0], left.shape()[1]);
    if args.row >= h {
        return Err(format!("row {} outside image of height {h}", args.row));
    }

    let tape = Tape::<f32>::no_grad();
    let p = store.bind(&tape);
    let lv = tape.constant(left.cast::<f32>());
    let rv = tape.constant(right.cast::<f32>());
    let out = net.forward(&p, &lv, &rv).map_err(|e| e.to_string())?;

    std::fs::create_dir_all(&args.out_dir).map_err(|e| e.to_string())?;
    let slice_of = |m: &Tensor<f32>, row: usize| -> Tensor<f64> {
        Tensor::from_fn(&[w, w], |idx| m.at(&[row, idx[0], idx[1]]) as f64)
    };
    let save = |t: &Tensor<f64>, name: &str| -> Result<(), String> {
        let path = args.out_dir.join(name);
        data::save_grayscale(t, &path).map_err(|e| e.to_string())?;
        println!("wrote {}", path.display());
        Ok(())
    };

    let m_rl = out.m_right_to_left.as_ref().expect("attention maps present");
    let m_lr = out.m_left_to_right.as_ref().expect("attention maps present");
    save(&slice_of(m_rl.value(), args.row), &format!("attention_right_to_left_row{}.png", args.row))?;
    save(&slice_of(m_lr.value(), args.row), &format!("attention_left_to_right_row{}.png", args.row))?;

    let mask_to64 = |m: &Tensor<f32>| Tensor::from_fn(&[h, w], |idx| m.at(idx) as f64);
    save(&mask_to64(out.v_left_to_right.as_ref().unwrap()), "valid_left_to_right.png")?;
    save(&mask_to64(out.v_right_to_left.as_ref().unwrap()), "valid_right_to_left.png")?;

    let map64 = crate::pam::AttentionMap::new(
        m_rl.value().cast::<f64>(),
        crate::pam::Direction::RightToLeft,
    )
    .map_err(|e| e.to_string())?;
    let disp = expected_disparity(&map64);
    save(&disp.values, "expected_disparity.png")?;
    Ok(())
}

fn cmd_ablate(args: &AblateArgs) -> Result<(), String> {
    let cfg = args.config.build()?;
    let axes = args
        .axes
        .clone()
        .unwrap_or_else(|| train::ablation_axes().iter().map(|s| s.to_string()).collect());
    let mut print_line = |line: &str| println!("{line}");
    let rows = train::ablate(&cfg, &axes, &args.out_dir, Some(&mut print_line))
        .map_err(|e| e.to_string())?;
    let mut table = String::from("variant                params     psnr    ssim    time_s\n");
    for r in &rows {
        table.push_str(&format!(
            "{:<22} {:>9} {:>8.4} {:>7.4} {:>9.1}\n",
            r.name, r.params, r.val_psnr, r.val_ssim, r.seconds
        ));
    }
    std::fs::create_dir_all(&args.out_dir).map_err(|e| e.to_string())?;
    std::fs::write(args.out_dir.join("report.txt"), &table).map_err(|e| e.to_string())?;
    print!("{table}");
    Ok(())
}

fn cmd_synth(args: &SynthArgs) -> Result<(), String> {
    let manifest = data::synth_dataset(
        &args.out_dir,
        args.seed,
        args.count,
        args.height,
        args.width,
        args.scale as usize,
    )
    .map_err(|e| e.to_string())?;
    println!("wrote {}", manifest.display());
    Ok(())
}

/// Entry point behind `main`; returns the process exit code.
pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Sr(args) => cmd_sr(args),
        Cmd::Inspect(args) => cmd_inspect(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => 0,
        Err(msg) => {
            eprintln!("error: {msg}");
            1
        }
    }
}
