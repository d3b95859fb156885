//! `smgan`: phantom generation, training, denoising, evaluation and numeric
//! self-verification for the low-dose CT denoising pipeline.
//!
//! Exit codes: 0 ok, 2 usage/config, 3 numeric abort, 4 format/version
//! mismatch, 1 other failures. `SMGAN_THREADS` caps worker parallelism.

mod config;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use config::RunConfig;
use smgan_core::data::{
    self, extract_patches, generate_phantom, load_volume, make_folds, save_volume, HuRange,
    Manifest, ManifestEntry, PhantomSpec,
};
use smgan_core::eval::{
    emit_report, psnr, rmse, roi_stats, ssim_metric, write_slice_png, DisplayWindow,
    MetricsRecord, Roi, SdMode,
};
use smgan_core::loss::WindowSpec;
use smgan_core::nets::Checkpoint;
use smgan_core::train::{denoise_with_checkpoint, train, TrainSet};
use smgan_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "smgan",
    version,
    about = "Structurally-sensitive multi-scale GAN toolkit for low-dose CT denoising"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate paired NDCT/LDCT phantom volumes plus a dataset manifest.
    Phantom {
        /// Number of volume pairs.
        #[arg(long, default_value_t = 4)]
        count: usize,
        /// Volume shape as D,H,W.
        #[arg(long, default_value = "16,96,96")]
        shape: String,
        /// Dose fraction in (0, 1]; 0.25 is the quarter-dose surrogate.
        #[arg(long, default_value_t = 0.25)]
        dose: f64,
        /// Electronic noise standard deviation in HU.
        #[arg(long = "sigma-e", default_value_t = 5.0)]
        sigma_e: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Ellipsoids per phantom.
        #[arg(long, default_value_t = 8)]
        ellipsoids: usize,
        /// Ellipsoid HU intensity range as lo,hi.
        #[arg(long, default_value = "-200,400")]
        intensity: String,
    },
    /// Train a denoising variant on a dataset manifest.
    Train {
        /// smgan3d | smgan2d | l1 | l2 | sl | msl | wgan | ssl
        #[arg(long)]
        variant: Option<String>,
        /// Dataset manifest (JSON list of {ldct_path, ndct_path, id}).
        #[arg(long)]
        data: PathBuf,
        /// key=value config file with # comments.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Override any config key, repeatable: --set key=value.
        #[arg(long = "set")]
        set: Vec<String>,
    },
    /// Run a trained generator over a volume.
    Denoise {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics and ROI statistics over a dataset manifest.
    Eval {
        #[arg(long)]
        pairs: PathBuf,
        /// JSON list of {label, origin:[z,y,x], extent:[d,h,w]}.
        #[arg(long)]
        rois: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for rendered mid-slice PNGs.
        #[arg(long)]
        render: Option<PathBuf>,
        /// Method label recorded in the CSV rows.
        #[arg(long, default_value = "ldct")]
        method: String,
        /// Display window for rendering, lo,hi in HU.
        #[arg(long, default_value = "-160,240")]
        window: String,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
}

#[derive(Serialize)]
struct BuildInfo {
    name: &'static str,
    version: &'static str,
}

fn build_info() -> BuildInfo {
    BuildInfo {
        name: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
    }
}

fn write_run_manifest<T: Serialize>(path: &Path, command: &str, seed: u64, cfg: &T) -> Result<()> {
    #[derive(Serialize)]
    struct RunManifest<'a, T> {
        command: &'a str,
        seed: u64,
        config: &'a T,
        build: BuildInfo,
    }
    let manifest = RunManifest {
        command,
        seed,
        config: cfg,
        build: build_info(),
    };
    std::fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

fn parse_triple(s: &str, what: &str) -> Result<[usize; 3]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(Error::config(format!("{what} expects D,H,W, got '{s}'")));
    }
    let mut out = [0usize; 3];
    for (o, p) in out.iter_mut().zip(&parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("{what}: bad integer '{p}'")))?;
    }
    Ok(out)
}

fn parse_pair_f64(s: &str, what: &str) -> Result<(f64, f64)> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(Error::config(format!("{what} expects lo,hi, got '{s}'")));
    }
    let lo = parts[0]
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{what}: bad number '{}'", parts[0])))?;
    let hi = parts[1]
        .trim()
        .parse()
        .map_err(|_| Error::config(format!("{what}: bad number '{}'", parts[1])))?;
    Ok((lo, hi))
}

fn cmd_phantom(
    count: usize,
    shape: [usize; 3],
    dose: f64,
    sigma_e: f64,
    seed: u64,
    out: &Path,
    ellipsoids: usize,
    intensity: (f64, f64),
) -> Result<()> {
    std::fs::create_dir_all(out)?;
    let spec = PhantomSpec {
        shape,
        n_ellipsoids: ellipsoids,
        intensity_range: intensity,
        ..PhantomSpec::default()
    };
    let mut entries = Vec::with_capacity(count);
    for i in 0..count {
        // Independent streams per volume keep generation order-free.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1000 + i as u64);
        let ndct = generate_phantom(&mut rng, &spec, &format!("phantom_{i:03}"))?;
        let ldct = data::degrade(&ndct, dose, sigma_e, &mut rng)?;
        let ndct_path = out.join(format!("phantom_{i:03}_ndct.raw"));
        let ldct_path = out.join(format!("phantom_{i:03}_ldct.raw"));
        save_volume(&ndct, &ndct_path)?;
        save_volume(&ldct, &ldct_path)?;
        entries.push(ManifestEntry {
            ldct_path: PathBuf::from(format!("phantom_{i:03}_ldct.raw")),
            ndct_path: PathBuf::from(format!("phantom_{i:03}_ndct.raw")),
            id: format!("phantom_{i:03}"),
        });
    }
    Manifest(entries).save(&out.join("manifest.json"))?;

    #[derive(Serialize)]
    struct PhantomRun {
        count: usize,
        shape: [usize; 3],
        dose: f64,
        sigma_e: f64,
        ellipsoids: usize,
        intensity: (f64, f64),
    }
    write_run_manifest(
        &out.join("run_manifest.json"),
        "phantom",
        seed,
        &PhantomRun {
            count,
            shape,
            dose,
            sigma_e,
            ellipsoids,
            intensity,
        },
    )
}

/// Splits manifest volumes into train/validation folds and extracts patch
/// budgets from each side.
fn build_train_set(manifest: &Manifest, run: &RunConfig) -> Result<TrainSet> {
    if manifest.0.is_empty() {
        return Err(Error::data("dataset manifest is empty".to_string()));
    }
    let ids: Vec<String> = manifest.0.iter().map(|e| e.id.clone()).collect();
    let (train_ids, val_ids): (Vec<String>, Vec<String>) = if run.folds <= 1 {
        (ids.clone(), ids.clone())
    } else {
        let plan = make_folds(&ids, run.folds, run.seed)?;
        if run.val_fold >= run.folds {
            return Err(Error::config(format!(
                "val_fold {} out of range for {} folds",
                run.val_fold, run.folds
            )));
        }
        let val: Vec<String> = plan
            .ids_in_fold(run.val_fold)
            .into_iter()
            .map(str::to_string)
            .collect();
        let train = ids
            .iter()
            .filter(|i| !val.contains(i))
            .cloned()
            .collect();
        (train, val)
    };

    let patch = {
        let cfg = run.to_train_config()?;
        cfg.patch
    };
    let mut set = TrainSet::default();
    for (side, ids, budget) in [
        ("train", &train_ids, run.train_budget),
        ("val", &val_ids, run.val_budget),
    ] {
        if ids.is_empty() {
            return Err(Error::data(format!("{side} split has no volumes")));
        }
        let per_volume = budget.div_ceil(ids.len());
        let mut patches = Vec::new();
        for (vi, id) in ids.iter().enumerate() {
            let entry = manifest
                .0
                .iter()
                .find(|e| &e.id == id)
                .expect("id from manifest");
            let ldct = load_volume(&entry.ldct_path)?;
            let ndct = load_volume(&entry.ndct_path)?;
            let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
            rng.set_stream(2000 + vi as u64 + if side == "val" { 500_000 } else { 0 });
            patches.extend(extract_patches(
                &ldct,
                &ndct,
                patch,
                run.stride(),
                per_volume,
                run.hu_range(),
                &mut rng,
            )?);
        }
        patches.truncate(budget);
        if side == "train" {
            set.train = patches;
        } else {
            set.val = patches;
        }
    }
    Ok(set)
}

fn cmd_train(
    variant: Option<String>,
    data_path: &Path,
    config_path: Option<&Path>,
    out: &Path,
    epochs: Option<usize>,
    seed: Option<u64>,
    sets: &[String],
) -> Result<()> {
    let mut run = RunConfig::default();
    if let Some(cfg) = config_path {
        run.apply_file(cfg)?;
    }
    for assignment in sets {
        run.apply_assignment(assignment)?;
    }
    if let Some(v) = variant {
        run.apply("variant", &v)?;
    }
    if let Some(e) = epochs {
        run.apply("epochs", &e.to_string())?;
    }
    if let Some(s) = seed {
        run.apply("seed", &s.to_string())?;
    }

    let cfg = run.to_train_config()?;
    std::fs::create_dir_all(out)?;
    write_run_manifest(&out.join("run_manifest.json"), "train", run.seed, &run)?;

    let manifest = Manifest::load(data_path)?.resolved(data_path);
    let set = build_train_set(&manifest, &run)?;
    eprintln!(
        "training variant={} on {} train / {} val patches, {} epochs",
        cfg.variant_label,
        set.train.len(),
        set.val.len(),
        cfg.epochs
    );
    match train(&set, &cfg, Some(out)) {
        Ok(result) => {
            eprintln!(
                "done: {} steps, final l1 {:.6}",
                result.steps,
                result.logs.last().map(|l| l.l1).unwrap_or(f64::NAN)
            );
            Ok(())
        }
        Err(Error::Numeric(dump)) => {
            std::fs::write(out.join("nan_dump.json"), &dump)?;
            Err(Error::Numeric(dump))
        }
        Err(e) => Err(e),
    }
}

fn cmd_denoise(ckpt_path: &Path, input: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(ckpt_path)?;
    let vol = load_volume(input)?;
    let denoised = denoise_with_checkpoint(&ckpt, &vol)?;
    save_volume(&denoised, out)?;
    #[derive(Serialize)]
    struct DenoiseRun {
        ckpt: PathBuf,
        input: PathBuf,
        output: PathBuf,
        ckpt_step: u64,
    }
    let manifest_path = out.with_extension("run_manifest.json");
    write_run_manifest(
        &manifest_path,
        "denoise",
        0,
        &DenoiseRun {
            ckpt: ckpt_path.to_path_buf(),
            input: input.to_path_buf(),
            output: out.to_path_buf(),
            ckpt_step: ckpt.step,
        },
    )
}

fn cmd_eval(
    pairs: &Path,
    rois: Option<&Path>,
    out: &Path,
    render: Option<&Path>,
    method: &str,
    window: (f64, f64),
) -> Result<()> {
    let manifest = Manifest::load(pairs)?.resolved(pairs);
    if manifest.0.is_empty() {
        return Err(Error::data("eval manifest is empty".to_string()));
    }
    let roi_list: Vec<Roi> = match rois {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| Error::Format(format!("roi file {} unreadable: {e}", path.display())))?,
        None => Vec::new(),
    };
    let display = DisplayWindow {
        lo: window.0,
        hi: window.1,
    };
    display.validate()?;
    let hu = HuRange::default();
    let wspec = WindowSpec::default();

    let mut records = Vec::new();
    for entry in &manifest.0 {
        let test = load_volume(&entry.ldct_path)?;
        let reference = load_volume(&entry.ndct_path)?;
        if test.shape() != reference.shape() {
            return Err(Error::shape(format!(
                "pair '{}': volumes {:?} vs {:?} are not aligned",
                entry.id,
                test.shape(),
                reference.shape()
            )));
        }
        let tn = data::normalize_hu(&test, hu)?;
        let rn = data::normalize_hu(&reference, hu)?;
        let psnr_db = psnr(&tn, &rn, 1.0)?;
        let ssim = ssim_metric(&tn, &rn, &wspec)?;
        let rmse_v = rmse(&tn, &rn)?;

        let base = MetricsRecord {
            id: entry.id.clone(),
            method: method.to_string(),
            psnr_db,
            ssim,
            rmse: rmse_v,
            roi_label: None,
            roi_mean_hu: None,
            roi_sd_hu: None,
            pct_diff_mean: None,
            pct_diff_sd: None,
        };
        if roi_list.is_empty() {
            records.push(base);
        } else {
            for roi in &roi_list {
                let ref_stats = roi_stats(&reference.voxels, roi, None, SdMode::Population)?;
                let stats = roi_stats(
                    &test.voxels,
                    roi,
                    Some((ref_stats.mean_hu, ref_stats.sd_hu)),
                    SdMode::Population,
                )?;
                let mut rec = base.clone();
                rec.roi_label = Some(roi.label.clone());
                rec.roi_mean_hu = Some(stats.mean_hu);
                rec.roi_sd_hu = Some(stats.sd_hu);
                rec.pct_diff_mean = stats.pct_diff_mean;
                rec.pct_diff_sd = stats.pct_diff_sd;
                records.push(rec);
            }
        }

        if let Some(dir) = render {
            std::fs::create_dir_all(dir)?;
            let mid = test.shape()[0] / 2;
            write_slice_png(
                &test.voxels,
                mid,
                display,
                &dir.join(format!("{}_{}.png", entry.id, method)),
            )?;
            write_slice_png(
                &reference.voxels,
                mid,
                display,
                &dir.join(format!("{}_reference.png", entry.id)),
            )?;
        }
    }
    emit_report(&records, out)?;

    #[derive(Serialize)]
    struct EvalRun<'a> {
        pairs: &'a Path,
        method: &'a str,
        window: (f64, f64),
        rois: usize,
    }
    write_run_manifest(
        &out.with_extension("run_manifest.json"),
        "eval",
        0,
        &EvalRun {
            pairs,
            method,
            window,
            rois: roi_list.len(),
        },
    )
}

fn cmd_gradcheck(tol: f64) -> Result<bool> {
    let results = smgan_core::gradcheck::run_suite(tol)?;
    let mut ok = true;
    for r in &results {
        println!("{r}");
        ok &= r.pass();
    }
    println!(
        "gradcheck: {}/{} checks passed",
        results.iter().filter(|r| r.pass()).count(),
        results.len()
    );
    Ok(ok)
}

fn dispatch(cli: Cli) -> Result<i32> {
    match cli.cmd {
        Cmd::Phantom {
            count,
            shape,
            dose,
            sigma_e,
            seed,
            out,
            ellipsoids,
            intensity,
        } => {
            let shape = parse_triple(&shape, "--shape")?;
            let intensity = parse_pair_f64(&intensity, "--intensity")?;
            cmd_phantom(
                count, shape, dose, sigma_e, seed, &out, ellipsoids, intensity,
            )?;
            Ok(0)
        }
        Cmd::Train {
            variant,
            data,
            config,
            out,
            epochs,
            seed,
            set,
        } => {
            cmd_train(
                variant,
                &data,
                config.as_deref(),
                &out,
                epochs,
                seed,
                &set,
            )?;
            Ok(0)
        }
        Cmd::Denoise { ckpt, input, out } => {
            cmd_denoise(&ckpt, &input, &out)?;
            Ok(0)
        }
        Cmd::Eval {
            pairs,
            rois,
            out,
            render,
            method,
            window,
        } => {
            let window = parse_pair_f64(&window, "--window")?;
            cmd_eval(&pairs, rois.as_deref(), &out, render.as_deref(), &method, window)?;
            Ok(0)
        }
        Cmd::Gradcheck { tol } => Ok(if cmd_gradcheck(tol)? { 0 } else { 1 }),
    }
}

fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Data(_) => 2,
        Error::Numeric(_) => 3,
        Error::Format(_) => 4,
        _ => 1,
    }
}

fn main() {
    if let Ok(threads) = std::env::var("SMGAN_THREADS") {
        if let Ok(n) = threads.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(exit_code_for(&e));
        }
    }
}
