//! Training loop: index-derived sampling, random patch cropping with
//! geometry-preserving flips, batched gradient accumulation, Adam with
//! the halving schedule, per-epoch validation PSNR, and resumable
//! checkpoints. All training state is f32 so checkpoints capture it
//! exactly and a resumed run continues bit-for-bit.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::ckpt::{self, Checkpoint};
use crate::data::{
    self, bicubic_resize, derive_seed, DisparityProfile, ManifestEntry, StereoSample,
};
use crate::error::TrainError;
use crate::loss::{total_loss, LossComponents, LossWeights};
use crate::metrics::{psnr, ssim, EvalConfig};
use crate::net::{Ablation, Network, NetworkConfig};
use crate::nn::ParamStore;
use crate::optim::{lr_schedule, Adam};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub scale: usize,
    pub channels: usize,
    pub seed: u64,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub initial_lr: f64,
    pub halve_every_epochs: usize,
    pub lambda: f64,
    pub components: LossComponents,
    pub ablation: Ablation,
    /// Feed the left view into both network inputs.
    pub replicate_left: bool,
    /// LR patch extents cropped from each sample.
    pub patch_h: usize,
    pub patch_w: usize,
    /// LR extents of generated synthetic samples.
    pub synth_h: usize,
    pub synth_w: usize,
    /// Held-out synthetic pairs scored after each epoch.
    pub val_samples: usize,
}

impl TrainConfig {
    /// Reference protocol: full-width network, batch 32, 30×90 patches,
    /// lr 2e-4 halved every 30 epochs, 80 epochs.
    pub fn reference(scale: usize) -> Self {
        TrainConfig {
            scale,
            channels: 64,
            seed: 0,
            epochs: 80,
            steps_per_epoch: 1000,
            batch: 32,
            initial_lr: 2e-4,
            halve_every_epochs: 30,
            lambda: 0.005,
            components: LossComponents::default(),
            ablation: Ablation::default(),
            replicate_left: false,
            patch_h: 30,
            patch_w: 90,
            synth_h: 48,
            synth_w: 120,
            val_samples: 8,
        }
    }

    /// Desk protocol: a few-minute CPU run that still shows learning.
    pub fn desk(scale: usize) -> Self {
        TrainConfig {
            scale,
            channels: 8,
            seed: 0,
            epochs: 3,
            steps_per_epoch: 100,
            batch: 8,
            initial_lr: 5e-3,
            halve_every_epochs: 2,
            lambda: 0.005,
            components: LossComponents::default(),
            ablation: Ablation::default(),
            replicate_left: false,
            patch_h: 16,
            patch_w: 48,
            synth_h: 24,
            synth_w: 64,
            val_samples: 8,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [
            ("epochs", self.epochs),
            ("steps_per_epoch", self.steps_per_epoch),
            ("batch", self.batch),
            ("patch_h", self.patch_h),
            ("patch_w", self.patch_w),
            ("synth_h", self.synth_h),
            ("synth_w", self.synth_w),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.initial_lr <= 0.0 || !self.initial_lr.is_finite() {
            return Err(TrainError::Config("initial_lr must be positive".into()));
        }
        if self.halve_every_epochs == 0 {
            return Err(TrainError::Config("halve_every_epochs must be positive".into()));
        }
        if self.patch_h > self.synth_h || self.patch_w > self.synth_w {
            return Err(TrainError::Config("patch larger than synthetic sample".into()));
        }
        self.network_config().validate().map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn network_config(&self) -> NetworkConfig {
        let mut cfg = if self.channels >= 64 {
            NetworkConfig::reference(self.scale)
        } else {
            NetworkConfig::desk(self.scale)
        };
        cfg.channels = self.channels;
        cfg.ablation = self.ablation;
        cfg
    }

    /// Echoes every field as key=value lines for the run manifest.
    pub fn manifest_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "scale={}", self.scale);
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "steps_per_epoch={}", self.steps_per_epoch);
        let _ = writeln!(s, "batch={}", self.batch);
        let _ = writeln!(s, "lr={}", self.initial_lr);
        let _ = writeln!(s, "halve_every_epochs={}", self.halve_every_epochs);
        let _ = writeln!(s, "lambda={}", self.lambda);
        let _ = writeln!(s, "loss_photometric={}", self.components.photometric);
        let _ = writeln!(s, "loss_smooth={}", self.components.smooth);
        let _ = writeln!(s, "loss_cycle={}", self.components.cycle);
        let _ = writeln!(s, "single_input={}", self.ablation.single_input);
        let _ = writeln!(s, "no_pam={}", self.ablation.no_pam);
        let _ = writeln!(s, "no_transition={}", self.ablation.no_transition);
        let _ = writeln!(s, "no_atrous={}", self.ablation.no_atrous);
        let _ = writeln!(s, "no_aspp_residual={}", self.ablation.no_aspp_residual);
        let _ = writeln!(s, "replicate_left={}", self.replicate_left);
        let _ = writeln!(s, "patch_h={}", self.patch_h);
        let _ = writeln!(s, "patch_w={}", self.patch_w);
        let _ = writeln!(s, "synth_h={}", self.synth_h);
        let _ = writeln!(s, "synth_w={}", self.synth_w);
        let _ = writeln!(s, "val_samples={}", self.val_samples);
        s
    }
}

/// Where training pairs come from: regenerated synthetic scenes, or HR
/// pairs listed in a manifest (downscaled on load).
pub enum DataSource {
    Synthetic,
    Manifest(Vec<ManifestEntry>),
}

impl DataSource {
    pub fn from_manifest(path: &Path) -> Result<Self, TrainError> {
        let entries = data::load_manifest(path)?;
        if entries.is_empty() {
            return Err(TrainError::EmptyDataset(path.display().to_string()));
        }
        Ok(DataSource::Manifest(entries))
    }
}

const VAL_SEED_SALT: u64 = 0x76616c69646174; // disjoint from training indices

/// Training profile rotation: constants (fractional where the scale
/// allows), an occluding block, and a gradient.
fn train_profile(scale: usize, index: u64) -> DisparityProfile {
    let q = 1.0 / scale as f64;
    match index % 4 {
        0 => DisparityProfile::Constant(1.0 + q * (index % (3 * scale as u64)) as f64),
        1 => DisparityProfile::Constant(2.0 + q),
        2 => DisparityProfile::ForegroundBlock { background: 1.0, foreground: 3.0 + q },
        _ => DisparityProfile::Gradient { min: 0.0, max: 3.0 },
    }
}

/// The i-th held-out pair used for epoch validation; a seed salt keeps
/// the stream disjoint from training samples.
pub fn validation_sample(cfg: &TrainConfig, i: usize) -> Result<StereoSample, TrainError> {
    let seed = derive_seed(cfg.seed ^ VAL_SEED_SALT, i as u64);
    let profile = train_profile(cfg.scale, i as u64 + 2);
    Ok(data::synth_stereo(seed, cfg.synth_h, cfg.synth_w, cfg.scale, profile)?)
}

fn training_sample(cfg: &TrainConfig, source: &DataSource, index: u64) -> Result<StereoSample, TrainError> {
    match source {
        DataSource::Synthetic => {
            let seed = derive_seed(cfg.seed, index);
            let profile = train_profile(cfg.scale, index);
            Ok(data::synth_stereo(seed, cfg.synth_h, cfg.synth_w, cfg.scale, profile)?)
        }
        DataSource::Manifest(entries) => {
            let entry = &entries[(index % entries.len() as u64) as usize];
            let left_hr = data::load_image(&entry.left)?;
            let right_hr = data::load_image(&entry.right)?;
            let gt = match &entry.disparity {
                Some(p) => Some(data::load_disparity(p)?),
                None => None,
            };
            let s = cfg.scale as f64;
            let sample = StereoSample {
                left_lr: bicubic_resize(&left_hr, 1.0 / s)?,
                right_lr: bicubic_resize(&right_hr, 1.0 / s)?,
                left_hr,
                right_hr,
                gt_disparity: gt,
            };
            sample.validate(cfg.scale).map_err(TrainError::Tensor)?;
            Ok(sample)
        }
    }
}

/// Deterministic patch crop + flips for one training slot.
fn patch_for_step(cfg: &TrainConfig, source: &DataSource, index: u64) -> Result<StereoSample, TrainError> {
    let sample = training_sample(cfg, source, index)?;
    let aug_seed = derive_seed(cfg.seed ^ 0x617567, index);
    let sample = data::augment(&sample, aug_seed);
    let (h, w) = (sample.left_lr.shape()[0], sample.left_lr.shape()[1]);
    if h < cfg.patch_h || w < cfg.patch_w {
        return Err(TrainError::Config(format!(
            "sample {h}x{w} smaller than patch {}x{}",
            cfg.patch_h, cfg.patch_w
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed ^ 0x63726f70, index));
    let top = rng.gen_range(0..=h - cfg.patch_h);
    let left = rng.gen_range(0..=w - cfg.patch_w);
    let s = cfg.scale;
    let cut = |img: &Tensor<f64>, t: usize, l: usize, ph: usize, pw: usize| {
        Tensor::from_fn(&[ph, pw, img.shape()[2]], |idx| img.at(&[t + idx[0], l + idx[1], idx[2]]))
    };
    Ok(StereoSample {
        left_hr: cut(&sample.left_hr, top * s, left * s, cfg.patch_h * s, cfg.patch_w * s),
        right_hr: cut(&sample.right_hr, top * s, left * s, cfg.patch_h * s, cfg.patch_w * s),
        left_lr: cut(&sample.left_lr, top, left, cfg.patch_h, cfg.patch_w),
        right_lr: cut(&sample.right_lr, top, left, cfg.patch_h, cfg.patch_w),
        gt_disparity: None,
    })
}

#[derive(Clone, Debug, Default)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub val_psnr: f64,
    pub val_bicubic_psnr: f64,
}

#[derive(Debug, Default)]
pub struct TrainOutcome {
    pub log: Vec<String>,
    /// Per-step SR-loss values across the whole run.
    pub sr_history: Vec<f64>,
    pub epoch_stats: Vec<EpochStats>,
    pub best_psnr: f64,
    pub best_epoch: usize,
    pub latest_path: PathBuf,
    pub best_path: PathBuf,
    pub store: ParamStore<f32>,
}

fn save_state(
    path: &Path,
    cfg: &TrainConfig,
    store: &ParamStore<f32>,
    opt: &Adam<f32>,
    epoch_done: usize,
    best_psnr: f64,
    best_epoch: usize,
) -> Result<(), TrainError> {
    let mut c = Checkpoint::new();
    c.insert_store("net.", store);
    opt.save_into(&mut c, "optim.");
    c.insert_scalar("state.epochs_done", epoch_done as f64);
    c.insert_scalar("state.best_psnr", best_psnr);
    c.insert_scalar("state.best_epoch", best_epoch as f64);
    c.insert_scalar("state.scale", cfg.scale as f64);
    c.insert_scalar("state.channels", cfg.channels as f64);
    ckpt::save(&c, path).map_err(TrainError::Data)
}

/// PSNR of the network and of plain bicubic upscaling over the same
/// held-out pairs, border-cropped by the scale.
pub fn validate(
    net: &Network,
    store: &ParamStore<f32>,
    cfg: &TrainConfig,
) -> Result<(f64, f64), TrainError> {
    let eval = EvalConfig::for_scale(cfg.scale);
    let mut net_total = 0.0;
    let mut bi_total = 0.0;
    for i in 0..cfg.val_samples {
        let sample = validation_sample(cfg, i)?;
        let sr = super_resolve(net, store, &sample.left_lr, &sample.right_lr, cfg.replicate_left)?;
        net_total += psnr(&sr, &sample.left_hr, &eval)?;
        let bi = bicubic_resize(&sample.left_lr, cfg.scale as f64)?;
        bi_total += psnr(&bi, &sample.left_hr, &eval)?;
    }
    let n = cfg.val_samples as f64;
    Ok((net_total / n, bi_total / n))
}

/// Runs the network on one LR pair (f64 in, f64 out; weights stay f32).
pub fn super_resolve(
    net: &Network,
    store: &ParamStore<f32>,
    left_lr: &Tensor<f64>,
    right_lr: &Tensor<f64>,
    replicate_left: bool,
) -> Result<Tensor<f64>, TrainError> {
    let tape = Tape::<f32>::no_grad();
    let p = store.bind(&tape);
    let left = tape.constant(left_lr.cast::<f32>());
    let right = if replicate_left {
        tape.constant(left_lr.cast::<f32>())
    } else {
        tape.constant(right_lr.cast::<f32>())
    };
    let out = net.forward(&p, &left, &right).map_err(TrainError::Tensor)?;
    Ok(out.sr.value().cast::<f64>())
}

/// The full loop. `resume_from` restores parameters, optimizer moments
/// and epoch counters, then continues on the same index-derived stream,
/// reproducing an uninterrupted run exactly.
pub fn train(
    cfg: &TrainConfig,
    source: &DataSource,
    out_dir: &Path,
    resume_from: Option<&Path>,
    mut on_line: Option<&mut dyn FnMut(&str)>,
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if let DataSource::Manifest(entries) = source {
        if entries.is_empty() {
            return Err(TrainError::EmptyDataset("manifest has no entries".into()));
        }
    }
    std::fs::create_dir_all(out_dir).map_err(|e| {
        TrainError::Config(format!("cannot create {}: {e}", out_dir.display()))
    })?;
    std::fs::write(out_dir.join("run.cfg"), cfg.manifest_text())
        .map_err(|e| TrainError::Config(format!("cannot write run manifest: {e}")))?;

    let net_cfg = cfg.network_config();
    let (net, mut store) = Network::build::<f32>(net_cfg, cfg.seed).map_err(TrainError::Tensor)?;
    let mut opt = Adam::new(&store);
    let mut start_epoch = 0usize;
    let mut best_psnr = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;

    if let Some(path) = resume_from {
        let c = ckpt::load(path)?;
        c.restore_store("net.", &mut store)?;
        opt.restore_from(&c, "optim.").map_err(TrainError::Tensor)?;
        start_epoch = c.get_scalar("state.epochs_done").unwrap_or(0.0) as usize;
        best_psnr = c.get_scalar("state.best_psnr").unwrap_or(f64::NEG_INFINITY);
        best_epoch = c.get_scalar("state.best_epoch").unwrap_or(0.0) as usize;
    }

    let latest_path = out_dir.join("latest.bin");
    let best_path = out_dir.join("best.bin");
    let mut outcome = TrainOutcome {
        latest_path: latest_path.clone(),
        best_path: best_path.clone(),
        ..Default::default()
    };
    let mut emit = |line: String, log: &mut Vec<String>| {
        if let Some(f) = on_line.as_deref_mut() {
            f(&line);
        }
        log.push(line);
    };

    let weights = LossWeights { lambda: cfg.lambda };
    let started = Instant::now();

    for epoch in start_epoch..cfg.epochs {
        let lr = lr_schedule(cfg.initial_lr, cfg.halve_every_epochs, epoch);
        for step_in_epoch in 0..cfg.steps_per_epoch {
            let step = epoch * cfg.steps_per_epoch + step_in_epoch;
            let mut grad_sum: IndexMap<String, Tensor<f32>> = IndexMap::new();
            let mut report_sum = crate::loss::LossReport::default();

            for slot in 0..cfg.batch {
                let index = (step * cfg.batch + slot) as u64;
                let patch = patch_for_step(cfg, source, index)?;

                let tape = Tape::<f32>::new();
                let p = store.bind(&tape);
                let left = tape.constant(patch.left_lr.cast::<f32>());
                let right = if cfg.replicate_left {
                    tape.constant(patch.left_lr.cast::<f32>())
                } else {
                    tape.constant(patch.right_lr.cast::<f32>())
                };
                let hr = tape.constant(patch.left_hr.cast::<f32>());
                let out = net.forward(&p, &left, &right).map_err(TrainError::Tensor)?;
                let (total, report) =
                    total_loss(&out, &left, &right, &hr, weights, cfg.components)
                        .map_err(TrainError::Tensor)?;
                if !report.total.is_finite() {
                    return Err(TrainError::NonFiniteLoss { step });
                }
                let grads = tape.backward(&total).map_err(TrainError::Tensor)?;
                let by_name = p.grads_by_name(&grads);
                for (name, g) in by_name {
                    match grad_sum.get_mut(&name) {
                        Some(acc) => {
                            let acc_data = acc.data_mut();
                            for (a, b) in acc_data.iter_mut().zip(g.data()) {
                                *a += *b;
                            }
                        }
                        None => {
                            grad_sum.insert(name, g);
                        }
                    }
                }
                report_sum.sr += report.sr;
                report_sum.photometric += report.photometric;
                report_sum.smooth += report.smooth;
                report_sum.cycle += report.cycle;
                report_sum.total += report.total;
                report_sum.degenerate_masks |= report.degenerate_masks;
            }

            let inv = 1.0 / cfg.batch as f32;
            for (_, g) in grad_sum.iter_mut() {
                for v in g.data_mut() {
                    *v *= inv;
                }
            }
            let invf = f64::from(inv);
            report_sum.sr *= invf;
            report_sum.photometric *= invf;
            report_sum.smooth *= invf;
            report_sum.cycle *= invf;
            report_sum.total *= invf;

            opt.step(&mut store, &grad_sum, lr).map_err(TrainError::Tensor)?;
            outcome.sr_history.push(report_sum.sr);
            emit(report_sum.log_line(step), &mut outcome.log);
        }

        let (val_psnr, bi_psnr) = validate(&net, &store, cfg)?;
        let stats = EpochStats { epoch, lr, val_psnr, val_bicubic_psnr: bi_psnr };
        emit(
            format!(
                "epoch {} lr {:.3e} val_psnr {:.4} bicubic_psnr {:.4} elapsed {:.1}s",
                epoch,
                lr,
                val_psnr,
                bi_psnr,
                started.elapsed().as_secs_f64()
            ),
            &mut outcome.log,
        );
        outcome.epoch_stats.push(stats);

        // ties keep the earlier epoch
        if val_psnr > best_psnr {
            best_psnr = val_psnr;
            best_epoch = epoch;
            save_state(&best_path, cfg, &store, &opt, epoch + 1, best_psnr, best_epoch)?;
        }
        save_state(&latest_path, cfg, &store, &opt, epoch + 1, best_psnr, best_epoch)?;
    }

    outcome.best_psnr = best_psnr;
    outcome.best_epoch = best_epoch;
    outcome.store = store;
    Ok(outcome)
}

#[derive(Clone, Debug)]
pub struct AblateRow {
    pub name: String,
    pub params: usize,
    pub val_psnr: f64,
    pub val_ssim: f64,
    pub seconds: f64,
}

/// Named network/input variants trained under identical seed and budget.
pub fn ablation_axes() -> Vec<&'static str> {
    vec![
        "full",
        "single_input",
        "replicated_inputs",
        "no_pam",
        "no_transition",
        "no_atrous",
        "no_aspp_residual",
        "loss_subsets",
    ]
}

fn apply_axis(base: &TrainConfig, axis: &str) -> Result<Vec<(String, TrainConfig)>, TrainError> {
    let mut cfg = base.clone();
    match axis {
        "full" => Ok(vec![("full".into(), cfg)]),
        "single_input" => {
            cfg.ablation.single_input = true;
            Ok(vec![("single_input".into(), cfg)])
        }
        "replicated_inputs" => {
            cfg.replicate_left = true;
            Ok(vec![("replicated_inputs".into(), cfg)])
        }
        "no_pam" => {
            cfg.ablation.no_pam = true;
            Ok(vec![("no_pam".into(), cfg)])
        }
        "no_transition" => {
            cfg.ablation.no_transition = true;
            Ok(vec![("no_transition".into(), cfg)])
        }
        "no_atrous" => {
            cfg.ablation.no_atrous = true;
            Ok(vec![("no_atrous".into(), cfg)])
        }
        "no_aspp_residual" => {
            cfg.ablation.no_aspp_residual = true;
            Ok(vec![("no_aspp_residual".into(), cfg)])
        }
        "loss_subsets" => {
            let rows = [
                ("loss_sr", LossComponents::sr_only()),
                ("loss_sr_photo", LossComponents { photometric: true, smooth: false, cycle: false }),
                ("loss_sr_photo_smooth", LossComponents { photometric: true, smooth: true, cycle: false }),
                ("loss_all", LossComponents::default()),
            ];
            Ok(rows
                .into_iter()
                .map(|(name, comps)| {
                    let mut c = base.clone();
                    c.components = comps;
                    (name.to_string(), c)
                })
                .collect())
        }
        other => Err(TrainError::Config(format!("unknown ablation axis {other}"))),
    }
}

/// Trains every variant of the requested axes and scores the held-out
/// pairs; same seed and budget throughout.
pub fn ablate(
    base: &TrainConfig,
    axes: &[String],
    out_dir: &Path,
    mut on_line: Option<&mut dyn FnMut(&str)>,
) -> Result<Vec<AblateRow>, TrainError> {
    let mut rows = Vec::new();
    for axis in axes {
        for (name, cfg) in apply_axis(base, axis)? {
            let t0 = Instant::now();
            let run_dir = out_dir.join(&name);
            let outcome = train(&cfg, &DataSource::Synthetic, &run_dir, None, None)?;
            let (net, _) = Network::build::<f32>(cfg.network_config(), cfg.seed)
                .map_err(TrainError::Tensor)?;
            let params = crate::net::param_count(&outcome.store);

            // score SSIM on the validation pairs with the best parameters
            let eval = EvalConfig::for_scale(cfg.scale);
            let mut ssim_total = 0.0;
            for i in 0..cfg.val_samples {
                let sample = validation_sample(&cfg, i)?;
                let sr = super_resolve(&net, &outcome.store, &sample.left_lr, &sample.right_lr, cfg.replicate_left)?;
                ssim_total += ssim(&sr, &sample.left_hr, &eval)?;
            }
            let row = AblateRow {
                name: name.clone(),
                params,
                val_psnr: outcome.epoch_stats.last().map(|s| s.val_psnr).unwrap_or(f64::NAN),
                val_ssim: ssim_total / cfg.val_samples as f64,
                seconds: t0.elapsed().as_secs_f64(),
            };
            if let Some(f) = on_line.as_deref_mut() {
                f(&format!(
                    "{:<22} params {:>9} psnr {:>8.4} ssim {:>7.4} time {:>7.1}s",
                    row.name, row.params, row.val_psnr, row.val_ssim, row.seconds
                ));
            }
            rows.push(row);
        }
    }
    Ok(rows)
}
