//! Command-line workflows: dataset generation, training, transfer,
//! evaluation, and clip inspection.
//!
//! Every command resolves one [`RunConfig`] (file, then flag overrides) and
//! is reproducible from (config, seed) alone. Exit codes: 0 success, 1
//! internal error, 2 input or configuration error, 3 checkpoint error.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{load_config, RunConfig};
use crate::diffusion::make_schedule;
use crate::error::{Error, Result};
use crate::io;
use crate::metrics::{self, extract_features, Extractor, LabelKind};
use crate::motion::{foot_contact_mask, MotionClip};
use crate::nn::init_params;
use crate::par;
use crate::synth;
use crate::train::{load_checkpoint, save_checkpoint, Checkpoint, TrainState};
use crate::transfer;

#[derive(Parser, Debug)]
#[command(
    name = "umsd",
    version,
    about = "Motion style transfer on skeletal animation"
)]
pub struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Master seed override; fans out to every stage.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<String>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic stylized-gait dataset.
    GenData,
    /// Train the denoiser; writes a loss CSV and a checkpoint.
    Train {
        /// Dataset manifest or its directory; defaults to <out>/dataset.
        dataset: Option<PathBuf>,
        /// Training step count override.
        #[arg(long, value_name = "INT")]
        steps: Option<usize>,
        /// Resume from this checkpoint instead of initializing fresh.
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
    },
    /// Re-draw a content clip under the style of another clip.
    Transfer {
        /// Clip whose action is kept.
        content: PathBuf,
        /// Clip whose manner is transferred.
        style: PathBuf,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Score a checkpoint against a dataset: fmd, kmd, diversity, cra, sra.
    Eval {
        /// Dataset manifest or its directory; defaults to <out>/dataset.
        dataset: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Summarize a clip file (.json or .bvh).
    Inspect {
        clip: PathBuf,
        #[arg(long, value_enum, default_value_t = OutputFormat::Text)]
        format: OutputFormat,
    },
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum OutputFormat {
    Text,
    Csv,
}

/// Entry point behind `main`; separated so tests can drive it in-process.
pub fn run(cli: Cli) -> Result<()> {
    configure_threads()?;
    let mut config = match &cli.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    let steps = match &cli.command {
        Command::Train { steps, .. } => *steps,
        _ => None,
    };
    config.resolve(cli.seed, steps, cli.out.as_deref());
    config.validate()?;

    match cli.command {
        Command::GenData => cmd_gen_data(&config),
        Command::Train {
            dataset,
            checkpoint,
            ..
        } => cmd_train(&config, dataset.as_deref(), checkpoint.as_deref()),
        Command::Transfer {
            content,
            style,
            checkpoint,
        } => cmd_transfer(&config, &checkpoint, &content, &style),
        Command::Eval {
            dataset,
            checkpoint,
        } => cmd_eval(&config, &checkpoint, dataset.as_deref()),
        Command::Inspect { clip, format } => cmd_inspect(&clip, format),
    }
}

// Caps the worker pool from UMSD_THREADS before any parallel region runs.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("UMSD_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("UMSD_THREADS '{raw}' is not a thread count")))?;
    if n == 0 {
        return Err(Error::Config("UMSD_THREADS must be at least 1".into()));
    }
    #[cfg(feature = "parallel")]
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(())
}

fn dataset_manifest_path(config: &RunConfig, explicit: Option<&Path>) -> PathBuf {
    match explicit {
        Some(p) if p.is_dir() => p.join("manifest.json"),
        Some(p) => p.to_path_buf(),
        None => Path::new(&config.out).join("dataset").join("manifest.json"),
    }
}

fn check_compatible(checkpoint: &Checkpoint, config: &RunConfig) -> Result<()> {
    let expected = config.model_hash();
    if checkpoint.config_hash != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint was trained under config {} but this run resolves to {}",
            checkpoint.config_hash, expected
        )));
    }
    Ok(())
}

fn cmd_gen_data(config: &RunConfig) -> Result<()> {
    let dir = Path::new(&config.out).join("dataset");
    let manifest = synth::build_dataset(&config.data, &dir)?;
    println!(
        "dataset: {} clips ({} contents x {} styles) in {}",
        manifest.entries.len(),
        manifest.content_labels.len(),
        manifest.style_labels.len(),
        dir.display()
    );
    println!(
        "seed {}, data hash {}, config hash {}",
        manifest.seed,
        manifest.config_hash,
        config.hash()
    );
    Ok(())
}

fn cmd_train(config: &RunConfig, dataset: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let manifest_path = dataset_manifest_path(config, dataset);
    let clips = synth::load_dataset(&manifest_path)?;
    let schedule = make_schedule(config.diffusion.schedule, config.diffusion.steps)?;
    let mut state = match resume {
        Some(path) => {
            let checkpoint = load_checkpoint(path)?;
            check_compatible(&checkpoint, config)?;
            TrainState::resume(checkpoint)
        }
        None => TrainState::new(init_params(&config.model, config.seed)?),
    };

    let train_dir = Path::new(&config.out).join("train");
    let mut checkpoint = state.run(
        &clips,
        &config.training,
        &config.loss_weights,
        &schedule,
        &train_dir,
        &config.model_hash(),
    )?;

    // Same-style reconstruction error on a fixed holdout; recorded in the
    // checkpoint as the yardstick for later transfers.
    let holdout: Vec<&MotionClip> = clips.iter().step_by(6).collect();
    let rmse = transfer::reconstruction_rmse(&checkpoint.params, &holdout, &schedule, config.seed)?;
    checkpoint.validation_rmse = Some(rmse);
    let checkpoint_path = train_dir.join("checkpoint.json");
    save_checkpoint(&checkpoint_path, &checkpoint)?;

    println!(
        "trained to step {} on {} clips; validation rmse {rmse:.6}",
        checkpoint.step,
        clips.len()
    );
    println!("log {}", train_dir.join("train_log.csv").display());
    println!("checkpoint {}", checkpoint_path.display());
    Ok(())
}

fn cmd_transfer(
    config: &RunConfig,
    checkpoint_path: &Path,
    content_path: &Path,
    style_path: &Path,
) -> Result<()> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    check_compatible(&checkpoint, config)?;
    let content = load_clip_any(content_path)?;
    let style = load_clip_any(style_path)?;
    let schedule = make_schedule(config.diffusion.schedule, config.diffusion.steps)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let result = transfer::transfer(&checkpoint.params, &content, &style, &schedule, &mut rng)?;

    let dir = Path::new(&config.out).join("transfer");
    fs::create_dir_all(&dir)?;
    let clip_path = dir.join("stylized.json");
    io::save_clip(&clip_path, &result)?;
    let csv_path = dir.join("stylized_positions.csv");
    io::write_positions_csv(&csv_path, &result.positions()?, &result.skeleton)?;

    let rmse = transfer::position_rmse(&result, &content)?;
    println!(
        "stylized {} frames: content '{}' + style '{}'",
        result.frame_count(),
        result.content_label,
        result.style_label
    );
    println!("position rmse vs content {rmse:.6}");
    if let Some(v) = checkpoint.validation_rmse {
        println!("checkpoint validation rmse {v:.6}");
    }
    println!("clip {}", clip_path.display());
    println!("positions {}", csv_path.display());
    Ok(())
}

fn cmd_eval(config: &RunConfig, checkpoint_path: &Path, dataset: Option<&Path>) -> Result<()> {
    let checkpoint = load_checkpoint(checkpoint_path)?;
    check_compatible(&checkpoint, config)?;
    let manifest_path = dataset_manifest_path(config, dataset);
    let clips = synth::load_dataset(&manifest_path)?;
    if clips.len() < 2 {
        return Err(Error::Config("evaluation needs at least 2 clips".into()));
    }
    let schedule = make_schedule(config.diffusion.schedule, config.diffusion.steps)?;

    // One transfer per dataset clip; the style donor sits halfway across the
    // manifest so most pairs cross styles.
    let offset = (clips.len() / 2).max(1);
    let params = &checkpoint.params;
    let generated = par::try_run_indexed(clips.len(), |i| {
        let style = &clips[(i + offset) % clips.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(synth::mix64(config.seed ^ i as u64));
        transfer::transfer(params, &clips[i], style, &schedule, &mut rng)
    })?;

    let style_ext = Extractor::train(&clips, LabelKind::Style, &config.eval.extractor)?;
    let content_ext = Extractor::train(&clips, LabelKind::Content, &config.eval.extractor)?;
    let real = extract_features(&clips, &style_ext)?;
    let gen = extract_features(&generated, &style_ext)?;

    let n = generated.len();
    let rows = [
        ("fmd", metrics::fmd(&real, &gen)?, n),
        ("kmd", metrics::kmd(&real, &gen, config.seed)?, n),
        (
            "diversity",
            metrics::diversity(&gen, config.eval.diversity_pairs, config.seed)?,
            config.eval.diversity_pairs,
        ),
        (
            "cra",
            metrics::recognition_accuracy(
                &generated,
                |c| content_ext.classify(c),
                LabelKind::Content,
            )?,
            n,
        ),
        (
            "sra",
            metrics::recognition_accuracy(&generated, |c| style_ext.classify(c), LabelKind::Style)?,
            n,
        ),
    ];

    let dir = Path::new(&config.out).join("eval");
    fs::create_dir_all(&dir)?;
    let csv_path = dir.join("metrics.csv");
    let mut text = String::from("metric,value,n,seed\n");
    for (metric, value, count) in &rows {
        text.push_str(&format!("{metric},{value},{count},{}\n", config.seed));
    }
    fs::write(&csv_path, text)?;

    for (metric, value, _) in &rows {
        println!("{metric} {value:.6}");
    }
    println!("metrics {}", csv_path.display());
    Ok(())
}

/// Everything `inspect` reports about a clip.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSummary {
    pub frames: usize,
    pub fps: f64,
    pub joints: usize,
    pub content_label: String,
    pub style_label: String,
    /// (min, max) joint rotation norm; `None` when the clip has no rotations.
    pub quat_norm: Option<(f64, f64)>,
    /// Frames with at least one planted foot.
    pub contact_frames: usize,
}

pub fn summarize(clip: &MotionClip) -> Result<ClipSummary> {
    clip.validate()?;
    let positions = clip.positions()?;
    let mask = foot_contact_mask(&positions, clip.skeleton.foot_joints());
    let contact_frames = (0..mask.rows())
        .filter(|&r| mask.row(r).iter().any(|&v| v > 0.5))
        .count();
    let quat_norm = clip.content.as_ref().map(|c| {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for f in 0..c.frames() {
            for j in 0..c.joints() {
                let n = c.quat(f, j).norm();
                lo = lo.min(n);
                hi = hi.max(n);
            }
        }
        (lo, hi)
    });
    Ok(ClipSummary {
        frames: clip.frame_count(),
        fps: clip.fps,
        joints: clip.skeleton.joint_count(),
        content_label: clip.content_label.clone(),
        style_label: clip.style_label.clone(),
        quat_norm,
        contact_frames,
    })
}

pub fn format_summary(s: &ClipSummary, format: OutputFormat) -> String {
    match format {
        OutputFormat::Text => {
            let norms = match s.quat_norm {
                Some((lo, hi)) => format!("quat norm min {lo:.9} max {hi:.9}"),
                None => "no rotations".into(),
            };
            format!(
                "frames {}\nfps {}\njoints {}\ncontent {}\nstyle {}\n{}\ncontact frames {}\n",
                s.frames, s.fps, s.joints, s.content_label, s.style_label, norms, s.contact_frames
            )
        }
        OutputFormat::Csv => {
            let (lo, hi) = match s.quat_norm {
                Some((lo, hi)) => (format!("{lo:.9}"), format!("{hi:.9}")),
                None => (String::new(), String::new()),
            };
            format!(
                "frames,fps,joints,content,style,min_quat_norm,max_quat_norm,contact_frames\n{},{},{},{},{},{lo},{hi},{}\n",
                s.frames, s.fps, s.joints, s.content_label, s.style_label, s.contact_frames
            )
        }
    }
}

fn cmd_inspect(path: &Path, format: OutputFormat) -> Result<()> {
    let clip = load_clip_any(path)?;
    let summary = summarize(&clip)?;
    print!("{}", format_summary(&summary, format));
    Ok(())
}

// Clip files are JSON; .bvh imports get filename-derived labels.
fn load_clip_any(path: &Path) -> Result<MotionClip> {
    let is_bvh = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("bvh"));
    if !is_bvh {
        return io::load_clip(path);
    }
    let text = fs::read_to_string(path)?;
    let (skeleton, content, fps) = io::bvh::parse_bvh(&text)?;
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(MotionClip {
        skeleton,
        fps,
        content_label: stem,
        style_label: "unknown".into(),
        content: Some(content),
        style: None,
    })
}
