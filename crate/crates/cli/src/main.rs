use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use stereoflow::geometry::StereoRig;
use stereoflow::pipeline::io::{self, POSES_FILE};
use stereoflow::pipeline::{evaluate_dirs, viz, Config, PairInput, Pipeline, Profile};
use stereoflow::synthetic::SceneSpec;

/// Multi-frame stereo scene flow.
#[derive(Parser, Debug)]
#[command(name = "stereoflow", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate disparity, flow, camera motion and moving-object masks.
    Run(RunArgs),
    /// Score a result directory against ground truth.
    Eval(EvalArgs),
    /// Render a synthetic sequence with ground truth.
    Synth(SynthArgs),
    /// Color-code a disparity, flow or mask PNG.
    Viz(VizArgs),
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Left images: a directory or a pattern with `%d` / `%06d`.
    #[arg(long)]
    left: String,
    #[arg(long)]
    right: String,
    /// Calibration text file (f, cx, cy, baseline, width, height).
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "general")]
    profile: Profile,
    /// Parameter file of `key = value` lines, applied after the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one parameter, `key=value`; may repeat.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// External flow `t -> t+1` per frame, in the flow PNG format.
    #[arg(long)]
    prior_flow: Option<String>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    est: PathBuf,
    #[arg(long)]
    gt: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Scene description in TOML.
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct VizArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(&a),
        Command::Eval(a) => eval(&a),
        Command::Synth(a) => synth(&a),
        Command::Viz(a) => viz_cmd(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(a: &RunArgs) -> Result<Config> {
    let mut config = Config::profile(a.profile);
    if let Some(path) = &a.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading --config {}", path.display()))?;
        config.apply_text(&text).with_context(|| format!("--config {}", path.display()))?;
    }
    for kv in &a.set {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set `{kv}`: expected key=value"))?;
        config.set(k.trim(), v.trim()).with_context(|| format!("--set `{kv}`"))?;
    }
    Ok(config)
}

fn frames(flag: &str, pattern: &str) -> Result<Vec<PathBuf>> {
    let files = io::expand_pattern(pattern).with_context(|| format!("--{flag}"))?;
    if files.is_empty() {
        bail!("--{flag} {pattern}: no images found");
    }
    Ok(files)
}

fn read_image(path: &Path, rig: &StereoRig) -> Result<stereoflow::grid::ColorImage> {
    let img = io::read_color(path)?;
    if img.dims() != (rig.width, rig.height) {
        bail!(
            "{}: image is {}x{}, calibration says {}x{}",
            path.display(),
            img.width(),
            img.height(),
            rig.width,
            rig.height
        );
    }
    Ok(img)
}

fn run(a: &RunArgs) -> Result<()> {
    let config = load_config(a)?;
    let rig = io::read_calibration(&a.calib).context("--calib")?;
    let left = frames("left", &a.left)?;
    let right = frames("right", &a.right)?;
    if left.len() != right.len() {
        bail!("--left has {} images but --right has {}", left.len(), right.len());
    }
    if left.len() < 2 {
        bail!("--left: need at least two stereo pairs, found {}", left.len());
    }
    let prior = match &a.prior_flow {
        Some(p) => frames("prior-flow", p)?,
        None => Vec::new(),
    };
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.threads)
        .build()
        .context("--threads")?;
    fs::create_dir_all(&a.out).with_context(|| format!("--out {}", a.out.display()))?;

    pool.install(|| {
        let mut pipeline = Pipeline::new(rig, config)?;
        let mut poses = Vec::new();
        for (i, (l, r)) in left.iter().zip(&right).enumerate() {
            let prior_flow = match prior.get(i) {
                Some(p) if i + 1 < left.len() => {
                    let f = io::read_flow(p)?;
                    if f.dims() != (rig.width, rig.height) {
                        bail!("{}: prior flow size does not match the calibration", p.display());
                    }
                    Some(f)
                }
                _ => None,
            };
            let pair = PairInput {
                left: read_image(l, &rig)?,
                right: read_image(r, &rig)?,
                prior_flow,
            };
            let start = Instant::now();
            let Some(out) = pipeline.push(pair).with_context(|| format!("frame {}", i.saturating_sub(1)))? else {
                continue;
            };
            if let Some(reason) = &out.fallback {
                log::warn!("frame {}: rigid-only output ({reason})", out.index);
            }
            io::write_frame_maps(&a.out, out.index, &out.maps())?;
            poses.push(out.pose);
            log::info!("frame {} done in {:.2} s", out.index, start.elapsed().as_secs_f64());
        }
        io::write_poses(&a.out.join(POSES_FILE), &poses)?;
        println!("wrote {} frames to {}", poses.len(), a.out.display());
        Ok(())
    })
}

fn eval(a: &EvalArgs) -> Result<()> {
    for (flag, dir) in [("est", &a.est), ("gt", &a.gt)] {
        if !dir.is_dir() {
            bail!("--{flag} {}: not a directory", dir.display());
        }
    }
    let m = evaluate_dirs(&a.est, &a.gt)?;
    print!("{m}");
    let (pe, pg) = (a.est.join(POSES_FILE), a.gt.join(POSES_FILE));
    if pe.is_file() && pg.is_file() {
        let (est, gt) = (io::read_poses(&pe)?, io::read_poses(&pg)?);
        let n = est.len().min(gt.len());
        if n > 0 {
            let (mut rot, mut trans) = (0.0, 0.0);
            for (e, g) in est.iter().zip(&gt) {
                let d = e.compose(&g.inverse());
                rot += d.rotation_angle().to_degrees();
                trans += d.t.norm();
            }
            println!("pose  rotation {:.4} deg  translation {:.4} (mean over {n})", rot / n as f64, trans / n as f64);
        }
    }
    Ok(())
}

fn synth(a: &SynthArgs) -> Result<()> {
    let text = fs::read_to_string(&a.spec).with_context(|| format!("reading --spec {}", a.spec.display()))?;
    let spec = SceneSpec::from_toml(&text).with_context(|| format!("--spec {}", a.spec.display()))?;
    let seq = spec.render().with_context(|| format!("--spec {}", a.spec.display()))?;
    io::write_sequence(&a.out, &seq)?;
    println!("wrote {} stereo pairs to {}", seq.frames.len(), a.out.display());
    Ok(())
}

fn viz_cmd(a: &VizArgs) -> Result<()> {
    let img = viz::render_file(&a.input).context("--input")?;
    viz::write_rgb8(&a.out, &img).context("--out")?;
    Ok(())
}
