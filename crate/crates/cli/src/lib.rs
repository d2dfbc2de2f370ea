//! Command-line driver: one subcommand per pipeline stage, files between
//! stages.
//!
//! Exit codes: 0 on success, 1 for usage and validation errors, 2 when a
//! stage fails while running.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use agct_core::evaluation::{self, SWEEP_LAMBDA_P, SWEEP_LAMBDA_S};
use agct_core::fanbeam::{build_geometry, GeometryConfig, Projector, View};
use agct_core::fsutil::{prepare_output_dir, write_atomic};
use agct_core::phantoms::{axial_slice_pgm, make_corpus, mask_slice_pgm, projection_pgm, read_volume, simulate_projection_pair, write_mask, write_volume, MANIFEST_FILE};
use agct_core::storage::{read_f64, write_array, ArrayData, Role, Units};
use agct_core::training::{self, load_generator, load_segnet, pretrain_segnet, reconstruct, train_from_config, CHECKPOINT_DIR, LOSS_LOG};
use agct_core::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::config::PipelineConfig;

/// Name of the configuration snapshot written beside every stage's outputs.
pub const SNAPSHOT: &str = "resolved_config.json";

/// Environment variable holding the worker thread count.
pub const THREADS_ENV: &str = "AGCT_THREADS";

#[derive(Parser, Debug)]
#[command(name = "agct", version, about = "Two-view X-ray to CT reconstruction pipeline")]
pub struct Cli {
    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Pipeline configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override one configuration field, e.g. `run.gan.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Force deterministic reductions.
    #[arg(long)]
    deterministic: bool,
    /// Replace existing results.
    #[arg(long)]
    overwrite: bool,
    /// Output directory of this stage.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the phantom corpus and its projections.
    GenData(Common),
    /// Pretrain and freeze the segmentation network.
    PretrainSeg(Common),
    /// Adversarial training of the generator.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the latest checkpoint.
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a trained generator on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Run directory or checkpoint; defaults to the configured output.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Reconstruct one volume from a projection pair.
    Reconstruct {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        ap: PathBuf,
        #[arg(long)]
        lat: PathBuf,
        /// Segmentation checkpoint; defaults to the one beside the run.
        #[arg(long)]
        segnet: Option<PathBuf>,
        #[arg(long, default_value = "reconstruction")]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Simulate both projections of a volume.
    Project {
        #[arg(long)]
        volume: PathBuf,
        /// Geometry block (JSON).
        #[arg(long)]
        geometry: PathBuf,
        #[arg(long, default_value = "projections")]
        out: PathBuf,
        #[arg(long)]
        overwrite: bool,
    },
    /// Train and evaluate one run per loss-weight pair.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long = "lambda-s", value_delimiter = ',')]
        lambda_s: Option<Vec<f64>>,
        #[arg(long = "lambda-p", value_delimiter = ',')]
        lambda_p: Option<Vec<f64>>,
    },
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    init_logging(&cli);
    match configure_threads().and_then(|_| run(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn init_logging(cli: &Cli) {
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Warn,
        (false, 0) => log::LevelFilter::Info,
        (false, 1) => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new().filter_level(level).format_timestamp(None).try_init();
}

fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::config(THREADS_ENV, format!("expected a positive integer, got {raw:?}")))?;
    // A pool built earlier in this process (tests) stays in place.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn load_config(c: &Common) -> Result<PipelineConfig> {
    let mut cfg = config::load(Some(&c.config), &c.set)?;
    if c.deterministic {
        cfg.run.deterministic = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn snapshot(dir: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("snapshot serializes");
    bytes.push(b'\n');
    write_atomic(&dir.join(SNAPSHOT), &bytes)
}

fn non_empty(dir: &Path) -> bool {
    fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false)
}

fn remove_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|source| Error::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::GenData(c) => gen_data(&c),
        Command::PretrainSeg(c) => pretrain_seg(&c),
        Command::Train { common, resume } => train(&common, resume),
        Command::Evaluate { common, checkpoint } => evaluate(&common, checkpoint),
        Command::Reconstruct {
            checkpoint,
            ap,
            lat,
            segnet,
            out,
            overwrite,
        } => reconstruct_cmd(&checkpoint, &ap, &lat, segnet, &out, overwrite),
        Command::Project {
            volume,
            geometry,
            out,
            overwrite,
        } => project(&volume, &geometry, &out, overwrite),
        Command::Sweep { common, lambda_s, lambda_p } => sweep(&common, lambda_s, lambda_p),
    }
}

fn gen_data(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    let out = match &c.out {
        Some(d) => {
            cfg.run.corpus = d.join(MANIFEST_FILE);
            d.clone()
        }
        None => cfg.run.corpus.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let m = make_corpus(&cfg.data, &out, c.overwrite)?;
    log::info!(
        "wrote {} reconstruction and {} segmentation phantoms to {}",
        m.recon.train.len() + m.recon.test.len(),
        m.seg.train.len() + m.seg.test.len(),
        out.display()
    );
    snapshot(&out, &cfg)
}

fn with_out(c: &Common, cfg: &mut PipelineConfig) {
    if let Some(d) = &c.out {
        cfg.run.output_dir = d.clone();
    }
}

fn pretrain_seg(c: &Common) -> Result<()> {
    let mut cfg = load_config(c)?;
    with_out(c, &mut cfg);
    let dir = cfg.run.output_dir.join("segnet");
    if non_empty(&dir) {
        if !c.overwrite {
            return Err(Error::AlreadyExists { path: dir });
        }
        remove_dir(&dir)?;
    }
    let (_, report) = pretrain_segnet(&cfg.run, |e| {
        log::info!("segnet epoch {} loss {:.5} dsc {:?} mean {:.4}", e.epoch, e.train_loss, e.dsc, e.dsc_mean)
    })?;
    log::info!("best held-out mean DSC {:.4} at epoch {}", report.best_dsc, report.best_epoch);
    snapshot(&dir, &cfg)
}

fn train(c: &Common, resume: bool) -> Result<()> {
    let mut cfg = load_config(c)?;
    with_out(c, &mut cfg);
    let out = &cfg.run.output_dir;
    let ckpt = out.join(CHECKPOINT_DIR);
    if !resume && non_empty(&ckpt) {
        if !c.overwrite {
            return Err(Error::AlreadyExists { path: ckpt });
        }
        remove_dir(&ckpt)?;
        let _ = fs::remove_file(out.join(LOSS_LOG));
    }
    let report = train_from_config(&cfg.run, resume, |epoch, b| {
        log::info!("epoch {epoch} dis {:.5} gen {:.5} r {:.5} proj {:.5} s {:.5} p {:.5} total {:.5}", b.dis, b.gen, b.r, b.proj, b.s, b.p, b.total)
    })?;
    log::info!("{} epochs, {} steps, latest checkpoint {}", report.epochs_completed, report.steps, report.checkpoint.display());
    snapshot(out, &cfg)
}

fn evaluate(c: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(c)?;
    let run_dir = checkpoint.unwrap_or_else(|| cfg.run.output_dir.clone());
    let out = c.out.clone().unwrap_or_else(|| evaluation::default_eval_dir(&cfg.run.output_dir));
    prepare_output_dir(&out, c.overwrite)?;
    let seg = load_segnet(&cfg.run.segnet_path())?;
    let r = evaluation::evaluate_testset(&run_dir, &cfg.run.corpus, &seg, &out)?;
    let m = &r.aggregate.mean;
    log::info!(
        "{} samples: PSNR {:.3} dB, SSIM {:.4}, RMSE {:.2} HU, DSC_gt {:.4}, DSC_S {:.4}",
        r.aggregate.count,
        m[0],
        m[1],
        m[2],
        m[6],
        m[10]
    );
    if !r.missing.is_empty() {
        log::warn!("{} test samples missing: {:?}", r.missing.len(), r.missing);
    }
    snapshot(&out, &cfg)
}

fn reconstruct_cmd(checkpoint: &Path, ap: &Path, lat: &Path, segnet: Option<PathBuf>, out: &Path, overwrite: bool) -> Result<()> {
    let segnet = match segnet {
        Some(p) => p,
        None if checkpoint.is_dir() => checkpoint.join("segnet").join(training::SEG_BEST),
        None => return Err(Error::config("--segnet", "required when --checkpoint is not a run directory")),
    };
    let (_, x_ap) = read_f64(ap, Role::Projection)?;
    let (_, x_lat) = read_f64(lat, Role::Projection)?;
    let (gen, info) = load_generator(checkpoint)?;
    let seg = load_segnet(&segnet)?;
    prepare_output_dir(out, overwrite)?;
    let (volume, mask) = reconstruct(&gen, &seg, &x_ap, &x_lat)?;
    write_volume(&volume, &out.join("volume.json"))?;
    write_mask(&mask, volume.voxel_pitch_mm, &out.join("mask.json"))?;
    let iz = volume.grid[2] / 2;
    axial_slice_pgm(&out.join("volume_axial.pgm"), &volume, iz, 1500.0, -300.0)?;
    mask_slice_pgm(&out.join("mask_axial.pgm"), &mask, iz)?;
    snapshot(
        out,
        &json!({
            "checkpoint": checkpoint,
            "epoch": info.epoch,
            "segnet": segnet,
            "ap": ap,
            "lat": lat,
        }),
    )
}

fn project(volume: &Path, geometry: &Path, out: &Path, overwrite: bool) -> Result<()> {
    let text = fs::read_to_string(geometry).map_err(|e| Error::config("--geometry", format!("cannot read {}: {e}", geometry.display())))?;
    let g: GeometryConfig = serde_json::from_str(&text).map_err(|e| Error::config("--geometry", format!("{}: {e}", geometry.display())))?;
    let fan = build_geometry(&g, View::Ap)?;
    let v = read_volume(volume)?;
    let projector = Projector::new(&fan)?;
    let (ap, lat) = simulate_projection_pair(&v, &projector)?;
    prepare_output_dir(out, overwrite)?;
    for (view, t) in [(View::Ap, ap), (View::Lat, lat)] {
        let shape = t.shape().to_vec();
        let (bins, rows) = (shape[0], shape[1]);
        projection_pgm(&out.join(format!("{}.pgm", view.name())), t.data(), bins, rows)?;
        write_array(
            &out.join(format!("{}.json", view.name())),
            &shape,
            v.voxel_pitch_mm,
            Role::Projection,
            Units::Normalized,
            &ArrayData::F64(t.into_data()),
        )?;
    }
    snapshot(
        out,
        &json!({
            "volume": volume,
            "geometry": g,
            "geometry_fingerprint": fan.fingerprint(),
        }),
    )
}

fn sweep(c: &Common, lambda_s: Option<Vec<f64>>, lambda_p: Option<Vec<f64>>) -> Result<()> {
    let mut cfg = load_config(c)?;
    let ls = lambda_s.unwrap_or_else(|| SWEEP_LAMBDA_S.to_vec());
    let lp = lambda_p.unwrap_or_else(|| SWEEP_LAMBDA_P.to_vec());
    for (name, v) in [("--lambda-s", &ls), ("--lambda-p", &lp)] {
        if let Some(bad) = v.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
            return Err(Error::config(name, format!("weights must be finite and >= 0, got {bad}")));
        }
    }
    cfg.run.segnet_checkpoint = Some(cfg.run.segnet_path());
    cfg.run.output_dir = c.out.clone().unwrap_or_else(|| cfg.run.output_dir.join("sweep"));
    let out = cfg.run.output_dir.clone();
    for &s in &ls {
        for &p in &lp {
            let cell = out.join(evaluation::sweep_cell_name(s, p));
            if non_empty(&cell) {
                if !c.overwrite {
                    return Err(Error::AlreadyExists { path: cell });
                }
                remove_dir(&cell)?;
            }
        }
    }
    let reports = evaluation::sweep(&cfg.run, &ls, &lp, |cell| log::info!("sweep cell {cell}"))?;
    log::info!("{} runs evaluated; summary in {}", reports.len(), out.join(evaluation::SWEEP_SUMMARY).display());
    snapshot(&out, &json!({ "config": cfg, "lambda_s": ls, "lambda_p": lp }))
}
