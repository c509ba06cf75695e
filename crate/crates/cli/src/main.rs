use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use featreg::features::{extract_fallback_features, reduce_channels};
use featreg::field::{warp, warp_labels};
use featreg::metrics::{evaluate, jacobian_stats};
use featreg::mvf::{
    read_features, read_field, read_labels, read_mvf, read_volume, write_mvf, write_volume, Role,
    Tensor,
};
use featreg::phantom::{endpoint_error, synthesize, DeformKind, PhantomKind, SynthConfig};
use featreg::solver::{register, LabelPair, RegistrationResult, SolverConfig};
use featreg::{Error, FeatureVolume, Grid, Spacing};

#[derive(Parser)]
#[command(
    name = "featreg",
    version,
    about = "Feature-guided deformable registration of 3D volumes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving volume onto a fixed one.
    Register(RegisterArgs),
    /// Warp a volume, feature stack, label map or field by a displacement field.
    Warp(WarpArgs),
    /// Dice, HD95 and Jacobian statistics.
    Metrics(MetricsArgs),
    /// Generate a synthetic phantom pair with its ground-truth deformation.
    Synth(SynthArgs),
    /// Extract fallback features, optionally reducing the channel count.
    Features(FeaturesArgs),
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    feat_moving: Option<PathBuf>,
    #[arg(long)]
    feat_fixed: Option<PathBuf>,
    /// Moving segmentation; warped into `warped_labels.mvf`.
    #[arg(long)]
    labels_moving: Option<PathBuf>,
    /// Fixed segmentation; together with `--labels-moving` enables the Dice term.
    #[arg(long)]
    labels_fixed: Option<PathBuf>,
    /// Reference labels used only for reporting (Dice, HD95, endpoint-error mask).
    #[arg(long)]
    eval_labels: Option<PathBuf>,
    /// Ground-truth field; adds the endpoint error to the report.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Solver configuration JSON; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Args)]
struct WarpArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Nearest-neighbor sampling; required for label maps.
    #[arg(long)]
    nearest: bool,
}

#[derive(Args)]
struct MetricsArgs {
    /// Predicted (e.g. warped moving) labels.
    #[arg(long)]
    labels_a: PathBuf,
    /// Reference labels.
    #[arg(long)]
    labels_b: PathBuf,
    #[arg(long)]
    field: Option<PathBuf>,
    #[arg(long, value_parser = parse_spacing, default_value = "1,1,1")]
    spacing: Spacing,
    /// Directory for `metrics.json` and `metrics.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "spheres")]
    kind: PhantomKind,
    #[arg(long, value_parser = parse_dims, default_value = "64,64,64")]
    dims: [usize; 3],
    #[arg(long, default_value = "svf")]
    deform: DeformKind,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    /// Scalar volume, or an existing feature stack to reduce.
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    channels: Option<usize>,
}

fn parse_triple<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("invalid value {p:?}"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

fn parse_dims(s: &str) -> std::result::Result<[usize; 3], String> {
    let dims = parse_triple::<usize>(s)?;
    if dims.contains(&0) {
        return Err("dims must be positive".into());
    }
    Ok(dims)
}

fn parse_spacing(s: &str) -> std::result::Result<Spacing, String> {
    let sp = parse_triple::<f64>(s)?;
    if sp.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err("spacing must be positive".into());
    }
    Ok(sp)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn loss_trace_csv(result: &RegistrationResult) -> String {
    let mut out = String::from("level,iteration,loss\n");
    for level in &result.levels {
        for (it, loss) in level.losses.iter().enumerate() {
            out.push_str(&format!("{},{it},{loss}\n", level.level));
        }
    }
    out
}

fn load_features(
    moving: Option<&Path>,
    fixed: Option<&Path>,
    moving_vol: &featreg::Volume,
    fixed_vol: &featreg::Volume,
) -> Result<(FeatureVolume, FeatureVolume)> {
    match (moving, fixed) {
        (Some(m), Some(f)) => Ok((
            read_features(m).with_context(|| format!("reading {}", m.display()))?,
            read_features(f).with_context(|| format!("reading {}", f.display()))?,
        )),
        (None, None) => Ok((
            extract_fallback_features(moving_vol)?,
            extract_fallback_features(fixed_vol)?,
        )),
        _ => bail!("--feat-moving and --feat-fixed must be given together"),
    }
}

fn cmd_register(args: RegisterArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => {
            let text =
                fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            SolverConfig::from_json(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => SolverConfig::default(),
    };
    let moving =
        read_volume(&args.moving).with_context(|| format!("reading {}", args.moving.display()))?;
    let fixed =
        read_volume(&args.fixed).with_context(|| format!("reading {}", args.fixed.display()))?;
    let (fm, ff) = load_features(
        args.feat_moving.as_deref(),
        args.feat_fixed.as_deref(),
        &moving,
        &fixed,
    )?;
    let read_opt = |p: &Option<PathBuf>| -> Result<Option<featreg::LabelVolume>> {
        p.as_ref()
            .map(|p| read_labels(p).with_context(|| format!("reading {}", p.display())))
            .transpose()
    };
    let labels_moving = read_opt(&args.labels_moving)?;
    let labels_fixed = read_opt(&args.labels_fixed)?;
    let eval_labels = read_opt(&args.eval_labels)?;
    let truth = args
        .truth
        .as_ref()
        .map(|p| read_field(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let pair = match (&labels_moving, &labels_fixed) {
        (Some(m), Some(f)) => Some(LabelPair {
            moving: m,
            fixed: f,
        }),
        _ => None,
    };
    if labels_fixed.is_some() && labels_moving.is_none() {
        bail!("--labels-fixed needs --labels-moving");
    }

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let start = Instant::now();
    let result = register(&moving, &fixed, &fm, &ff, pair, &cfg)?;
    let seconds = start.elapsed().as_secs_f64();

    let spacing = fixed.spacing();
    write_mvf(
        args.out.join("field.mvf"),
        &Tensor::Field(result.field.clone()),
    )?;
    let mut warped = warp(&moving, &result.field)?;
    warped.set_spacing(spacing)?;
    write_volume(args.out.join("warped.mvf"), &warped)?;
    fs::write(args.out.join("loss_trace.csv"), loss_trace_csv(&result))?;

    let jac = jacobian_stats(&result.field, spacing)?;
    let mut report = json!({
        "initial": result.initial,
        "final": result.report,
        "levels": result.levels.iter().map(|l| json!({
            "level": l.level,
            "dims": l.dims,
            "iterations": l.iterations,
            "accepted": l.accepted,
            "seconds": l.seconds,
        })).collect::<Vec<_>>(),
        "sdlogj": jac.sdlogj,
        "folding": jac.folding,
        "seconds": seconds,
    });
    let reference = eval_labels.as_ref().or(labels_fixed.as_ref());
    if let Some(lm) = &labels_moving {
        let warped_labels = warp_labels(lm, &result.field)?;
        write_mvf(
            args.out.join("warped_labels.mvf"),
            &Tensor::Labels(warped_labels.clone()),
        )?;
        if let Some(reference) = reference {
            let metrics = evaluate(&warped_labels, reference, None, spacing)?;
            report["metrics"] = serde_json::to_value(&metrics)?;
        }
    }
    if let Some(truth) = &truth {
        if truth.dims() != result.field.dims() {
            bail!(Error::ShapeMismatch(
                "truth field dims differ from the images".into()
            ));
        }
        let mask: Vec<bool> = match reference {
            Some(r) => r.labels().iter().map(|&l| l != 0).collect(),
            None => vec![true; result.field.data().len() / 3],
        };
        report["endpoint_error"] = json!(endpoint_error(&result.field, truth, &mask));
    }
    write_json(&args.out.join("report.json"), &report)?;
    println!(
        "loss {:.6} -> {:.6} in {seconds:.1} s",
        result.initial.total, result.report.total
    );
    Ok(())
}

fn cmd_warp(args: WarpArgs) -> Result<()> {
    let field =
        read_field(&args.field).with_context(|| format!("reading {}", args.field.display()))?;
    let input = read_mvf(&args.input, Role::Auto)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let out = match input {
        Tensor::Labels(labels) => Tensor::Labels(warp_labels(&labels, &field)?),
        _ if args.nearest => bail!("--nearest applies to label maps only"),
        Tensor::Volume(_) => {
            let vol = read_volume(&args.input)?;
            let mut warped = warp(&vol, &field)?;
            warped.set_spacing(vol.spacing())?;
            write_volume(&args.out, &warped)?;
            return Ok(());
        }
        Tensor::Features(f) => Tensor::Features(warp(&f, &field)?),
        Tensor::Field(f) => Tensor::Field(warp(&f, &field)?),
    };
    write_mvf(&args.out, &out)?;
    Ok(())
}

fn cmd_metrics(args: MetricsArgs) -> Result<()> {
    let a = read_labels(&args.labels_a)
        .with_context(|| format!("reading {}", args.labels_a.display()))?;
    let b = read_labels(&args.labels_b)
        .with_context(|| format!("reading {}", args.labels_b.display()))?;
    let field = args
        .field
        .as_ref()
        .map(|p| read_field(p).with_context(|| format!("reading {}", p.display())))
        .transpose()?;
    let report = evaluate(&a, &b, field.as_ref(), args.spacing)?;
    let case = args
        .labels_a
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(dir) = &args.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        fs::write(dir.join("metrics.json"), text + "\n")?;
        fs::write(dir.join("metrics.csv"), report.to_csv(&case))?;
    }
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        kind: args.kind,
        dims: args.dims,
        deform: args.deform,
        gamma: args.gamma,
        noise_sigma: args.noise_sigma,
        seed: args.seed,
    };
    let case = synthesize(&cfg)?;
    let dir = &args.out;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    write_volume(dir.join("moving.mvf"), &case.moving)?;
    write_volume(dir.join("fixed.mvf"), &case.fixed)?;
    write_volume(dir.join("moving_perturbed.mvf"), &case.moving_perturbed)?;
    write_volume(dir.join("fixed_perturbed.mvf"), &case.fixed_perturbed)?;
    write_mvf(
        dir.join("moving_labels.mvf"),
        &Tensor::Labels(case.moving_labels),
    )?;
    write_mvf(
        dir.join("fixed_labels.mvf"),
        &Tensor::Labels(case.fixed_labels),
    )?;
    write_mvf(dir.join("g_true.mvf"), &Tensor::Field(case.truth))?;
    write_json(&dir.join("synth.json"), &cfg)?;
    Ok(())
}

fn cmd_features(args: FeaturesArgs) -> Result<()> {
    let input = read_mvf(&args.input, Role::Auto)
        .with_context(|| format!("reading {}", args.input.display()))?;
    let feats = match input {
        Tensor::Volume(v) => extract_fallback_features(&v)?,
        Tensor::Features(f) => f,
        other => bail!(Error::ShapeMismatch(format!(
            "{}: expected a volume or feature stack, found {}",
            args.input.display(),
            other.kind()
        ))),
    };
    let feats = match args.channels {
        Some(c) => reduce_channels(&feats, c)?,
        None => feats,
    };
    write_mvf(&args.out, &Tensor::Features(feats))?;
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::NonFiniteLoss { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Warp(a) => cmd_warp(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Features(a) => cmd_features(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
