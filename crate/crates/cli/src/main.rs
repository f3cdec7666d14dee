use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use slotforge::checkpoint::{Checkpoint, RngState};
use slotforge::config::RunConfig;
use slotforge::data::{extract_features, generate_sprite_video, list_clips, load_clip, save_clip, ClipMeta, SpriteVideo};
use slotforge::eval::{export_masks, run_clip, run_eval, score_clip, write_json};
use slotforge::model::{Model, ModelDims};
use slotforge::training::{derive_seed, pipeline_gradcheck, ClipFeatures, Stage, StepRecord, Trainer};

/// Object-centric video learning with a dynamic number of slots.
#[derive(Parser)]
#[command(name = "slotforge", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set K=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Directory of clip directories.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue an interrupted run of the same stage.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Per-step JSON-lines log (default: `<out>.log.jsonl`).
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum DimsPreset {
    Tiny,
    Default,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic moving-sprite dataset.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 64)]
        num_clips: usize,
    },
    /// Stage 1: recurrent-initialization pretraining.
    Pretrain(TrainArgs),
    /// Stage 2: transformer refinement, merging and next-slot prediction.
    Train {
        #[command(flatten)]
        args: TrainArgs,
        /// Pretrained checkpoint to start from.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        no_dtst: bool,
        #[arg(long)]
        no_merger: bool,
        #[arg(long)]
        no_xslot: bool,
    },
    /// Score a checkpoint on an annotated dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output directory for JSON reports.
        #[arg(long)]
        report: PathBuf,
        /// Comma-separated merge thresholds; one aggregate per value.
        #[arg(long, value_delimiter = ',')]
        theta_sweep: Option<Vec<f64>>,
        /// Also write label maps, overlays and soft masks.
        #[arg(long)]
        export_masks: bool,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Segment a single clip directory.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        export_masks: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Finite-difference check of the training gradients in 64-bit floats.
    Gradcheck {
        #[arg(long, value_enum, default_value = "tiny")]
        dims: DimsPreset,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

const GRADCHECK_TOLERANCE: f64 = 1e-4;

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Gen { cfg, seed, out, num_clips } => gen(&cfg, seed, &out, num_clips)?,
        Cmd::Pretrain(args) => train(&args, Stage::Pretrain, None, |_| {})?,
        Cmd::Train {
            args,
            init,
            no_dtst,
            no_merger,
            no_xslot,
        } => train(&args, Stage::Stage2, init.as_deref(), |c| {
            if no_dtst {
                c.use_dtst = false;
                c.use_xslot = false;
            }
            if no_merger {
                c.use_merger = false;
            }
            if no_xslot {
                c.use_xslot = false;
            }
        })?,
        Cmd::Eval {
            ckpt,
            data,
            report,
            theta_sweep,
            export_masks,
            overrides,
        } => eval(&ckpt, &data, &report, theta_sweep, export_masks, &overrides)?,
        Cmd::Infer {
            ckpt,
            video,
            export_masks,
            overrides,
        } => infer(&ckpt, &video, &export_masks, &overrides)?,
        Cmd::Gradcheck { dims, seed } => return gradcheck(dims, seed),
    }
    Ok(ExitCode::SUCCESS)
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    RunConfig::load(args.config.as_deref(), &args.overrides).context("invalid configuration")
}

fn gen(args: &ConfigArgs, seed: u64, out: &Path, num_clips: usize) -> Result<()> {
    let cfg = load_config(args)?;
    let gen = cfg.gen_config();
    fs::create_dir_all(out)?;
    for i in 0..num_clips {
        let clip_seed = derive_seed(&[seed, i as u64]);
        let video = generate_sprite_video(&gen, clip_seed)?;
        let meta = ClipMeta {
            seed: clip_seed,
            config: gen.clone(),
            object_ids: video.object_ids(),
        };
        save_clip(&out.join(format!("clip_{i:05}")), &video, &meta)?;
    }
    write_json(&out.join("config.json"), &cfg.to_json())?;
    println!("wrote {num_clips} clips to {}", out.display());
    Ok(())
}

fn load_videos(data: &Path) -> Result<Vec<(String, SpriteVideo, bool)>> {
    list_clips(data)?
        .into_iter()
        .map(|dir| {
            let (video, annotated) = load_clip(&dir)?;
            let name = dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
            Ok((name, video, annotated))
        })
        .collect()
}

fn features(model: &Model<f32>, videos: &[(String, SpriteVideo, bool)]) -> Result<Vec<ClipFeatures<f32>>> {
    let enc = model.encoder()?;
    videos
        .iter()
        .map(|(name, v, _)| {
            let f = extract_features(&v.frames, v.height, v.width, &enc).with_context(|| format!("clip `{name}`"))?;
            Ok(f.into_iter().map(|g| g.x).collect())
        })
        .collect()
}

fn check_dims(ckpt: &ModelDims, cfg: &ModelDims, path: &Path) -> Result<()> {
    if ckpt != cfg {
        bail!(
            "model dimensions differ: checkpoint {} has {ckpt:?}, configuration has {cfg:?}",
            path.display()
        );
    }
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn train(args: &TrainArgs, stage: Stage, init: Option<&Path>, adjust: impl FnOnce(&mut RunConfig)) -> Result<()> {
    let mut cfg = load_config(&args.cfg)?;
    adjust(&mut cfg);
    cfg.validate().context("invalid configuration")?;
    let dims = cfg.model_dims();
    let tcfg = cfg.train_config(stage);
    let videos = load_videos(&args.data)?;

    let mut trainer = if let Some(path) = &args.resume {
        let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
        if ck.stage != stage {
            bail!("{} is a {:?} checkpoint, cannot resume {:?}", path.display(), ck.stage, stage);
        }
        check_dims(&ck.model.dims, &dims, path)?;
        let clips = features(&ck.model, &videos)?;
        Trainer::resume(ck.model, ck.opt, ck.step, tcfg, clips)?
    } else {
        let model = match (stage, init) {
            (Stage::Stage2, Some(path)) => {
                let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
                check_dims(&ck.model.dims, &dims, path)?;
                ck.model
            }
            (Stage::Stage2, None) if !cfg.cold_start => {
                bail!("stage-2 training needs --init <pretrained checkpoint> or cold_start=true")
            }
            _ => Model::init(&dims, cfg.seed)?,
        };
        let clips = features(&model, &videos)?;
        Trainer::new(model, tcfg, clips)?
    };

    let log_path = args.log.clone().unwrap_or_else(|| with_suffix(&args.out, ".log.jsonl"));
    let file = if args.resume.is_some() {
        OpenOptions::new().create(true).append(true).open(&log_path)?
    } else {
        File::create(&log_path)?
    };
    let mut log = BufWriter::new(file);
    let total = trainer.cfg.steps;
    trainer.run(Some(&mut log), |r: &StepRecord| {
        if r.step % 50 == 0 || r.step + 1 == total {
            eprintln!("[{:?}] step {:>5}/{total}  loss {:.5}  active {:.2}", r.stage, r.step, r.loss, r.active_slots);
        }
    })?;
    log.flush()?;

    let ck = Checkpoint {
        model: trainer.model,
        opt: trainer.opt,
        config: cfg.to_json(),
        stage,
        step: trainer.step,
        rng: RngState {
            seed: cfg.seed,
            step: trainer.step,
        },
    };
    ck.save(&args.out)?;
    write_json(&with_suffix(&args.out, ".config.json"), &cfg.to_json())?;
    println!("saved {} after {} steps", args.out.display(), ck.step);
    Ok(())
}

fn checkpoint_config(ck: &Checkpoint, overrides: &[String]) -> Result<RunConfig> {
    let text = serde_json::to_string(&ck.config)?;
    let cfg = RunConfig::parse(&text, overrides).context("invalid configuration")?;
    if cfg.model_dims() != ck.model.dims {
        bail!("overrides change the model dimensions stored in the checkpoint");
    }
    Ok(cfg)
}

fn eval(
    ckpt: &Path,
    data: &Path,
    report: &Path,
    sweep: Option<Vec<f64>>,
    export: bool,
    overrides: &[String],
) -> Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let base = checkpoint_config(&ck, overrides)?;
    let mut clips = Vec::new();
    for (name, video, annotated) in load_videos(data)? {
        if !annotated {
            bail!("clip `{name}` in {} has no masks/ directory to evaluate against", data.display());
        }
        if video.height != ck.model.dims.canvas || video.width != ck.model.dims.canvas {
            bail!(
                "clip `{name}` in {} is {}x{}, checkpoint {} expects {}x{}",
                data.display(),
                video.height,
                video.width,
                ckpt.display(),
                ck.model.dims.canvas,
                ck.model.dims.canvas
            );
        }
        clips.push((name, video));
    }
    let thetas = sweep.clone().unwrap_or_else(|| vec![base.theta]);
    let mut aggregates = Vec::new();
    let (mut secs, mut runs) = (0.0, 0);
    for theta in thetas {
        let mut cfg = base.clone();
        cfg.theta = theta;
        cfg.validate().context("invalid theta in sweep")?;
        let dir = if sweep.is_some() {
            report.join(format!("theta_{theta:.2}"))
        } else {
            report.to_path_buf()
        };
        let out = run_eval(&ck.model, &clips, &cfg.rollout_config(), cfg.to_json(), &dir, export)?;
        secs += out.seconds_per_frame;
        runs += 1;
        println!("{}", serde_json::to_string(&summary(&out.aggregate))?);
        aggregates.push(out.aggregate);
    }
    if sweep.is_some() {
        write_json(&report.join("sweep.json"), &aggregates)?;
    }
    println!("latency: {:.2} ms/frame", 1e3 * secs / runs as f64);
    Ok(())
}

fn summary(a: &slotforge::eval::AggregateReport) -> serde_json::Value {
    serde_json::json!({
        "theta": a.theta,
        "clips": a.clips,
        "mbo_v": a.mbo_v,
        "mbo_f": a.mbo_f,
        "mbhd": a.mbhd,
        "fg_ari": a.fg_ari,
        "corloc": a.corloc,
        "mean_active_slots": a.mean_active_slots,
    })
}

fn infer(ckpt: &Path, video_dir: &Path, out: &Path, overrides: &[String]) -> Result<()> {
    let ck = Checkpoint::load(ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    let cfg = checkpoint_config(&ck, overrides)?;
    let (video, annotated) = load_clip(video_dir)?;
    let run = run_clip(&ck.model, &video, &cfg.rollout_config())?;
    export_masks(out, &video, &run)?;
    let mut info = serde_json::json!({
        "frames": video.len(),
        "mean_active_slots": run.rollout.mean_active_slots(),
        "ms_per_frame": 1e3 * run.seconds / video.len() as f64,
    });
    if annotated {
        let name = video_dir.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
        info["scores"] = serde_json::to_value(score_clip(&name, &video, &run.segmentation)?)?;
    }
    println!("{}", serde_json::to_string(&info)?);
    Ok(())
}

fn gradcheck(preset: DimsPreset, seed: u64) -> Result<ExitCode> {
    let dims = match preset {
        DimsPreset::Tiny => ModelDims::tiny(),
        DimsPreset::Default => ModelDims::default(),
    };
    let mut worst = 0.0f64;
    for (path, r) in pipeline_gradcheck(&dims, seed)? {
        println!(
            "{path}: max relative error {:.3e} over {} entries (worst: {:?})",
            r.max_rel_error, r.checked, r.worst
        );
        worst = worst.max(r.max_rel_error);
    }
    if worst < GRADCHECK_TOLERANCE {
        println!("gradcheck passed (< {GRADCHECK_TOLERANCE:e})");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("gradcheck FAILED (>= {GRADCHECK_TOLERANCE:e})");
        Ok(ExitCode::from(2))
    }
}
