use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use lfsr_core::coarse::CoarseConfig;
use lfsr_core::imaging::evaluate;
use lfsr_core::lightfield::io::{
    disparity_file_name, read_disparity, read_lf_dir, read_png, read_regular, write_atomic, write_lf_dir, write_png,
    LfData,
};
use lfsr_core::lightfield::{extract_epi, render_constant_disparity, AngularPosition, DisparityMap, EpiOrientation};
use lfsr_core::pipeline::{self, SrOptions};
use lfsr_core::refine::RefineConfig;
use lfsr_core::train::{load_checkpoint, save_checkpoint, train_stage, write_loss_log, Model, Stage, TrainConfig, TrainItem};
use lfsr_core::Error;
use serde_json::json;

/// Light-field spatial super-resolution.
#[derive(Parser, Debug)]
#[command(name = "lfsr", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Bicubic-downscale every view of a light field.
    Degrade {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        scale: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage and write a checkpoint.
    Train(TrainArgs),
    /// Super-resolve a light field with a trained checkpoint.
    SuperResolve(SrArgs),
    /// Compare a light field against a reference and write a JSON report.
    Evaluate {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one epipolar-plane image as a PNG.
    Epi {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, value_enum)]
        orientation: Orientation,
        /// Row `y` (horizontal) or column `x` (vertical).
        #[arg(long)]
        spatial: usize,
        /// View row `v` (horizontal) or column `u` (vertical).
        #[arg(long)]
        angular: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump selector scores and the chosen auxiliary views for one target.
    SelectViews {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, num_args = 2, value_names = ["U", "V"])]
        target: Vec<i32>,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a constant-disparity light field from one image.
    Synth {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        disparity: f32,
        #[arg(long, num_args = 2, value_names = ["M", "N"])]
        views: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Orientation {
    Horizontal,
    Vertical,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum StageArg {
    Coarse,
    Refine,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// High-resolution training light fields (repeatable).
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long, value_enum)]
    stage: StageArg,
    #[arg(long)]
    scale: usize,
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint to continue from; required for the refine stage.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Loss log path; defaults to the checkpoint path with a `.csv` extension.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    /// Low-resolution patch side.
    #[arg(long, default_value_t = 64)]
    patch: usize,
    #[arg(long)]
    k_min: Option<usize>,
    #[arg(long)]
    k_max: Option<usize>,
    #[arg(long)]
    patch_selector: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Feature channels of a new model.
    #[arg(long, default_value_t = 64)]
    channels: usize,
    /// Pooling width of a new model.
    #[arg(long, default_value_t = 9)]
    p: usize,
    /// Residual blocks per coarse stage of a new model.
    #[arg(long, num_args = 4, value_names = ["N1", "N2", "N3", "N4"])]
    blocks: Option<Vec<usize>>,
    /// Build a new model without the learned view selector.
    #[arg(long)]
    no_sai_selector: bool,
    #[arg(long, default_value_t = 16)]
    selector_channels: usize,
    #[arg(long, default_value_t = 10)]
    refine_layers: usize,
    #[arg(long)]
    refine_channels: Option<usize>,
    #[arg(long, default_value_t = 1.0)]
    lambda_epi: f32,
}

#[derive(Args, Debug)]
struct SrArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    scale: usize,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    patch_selector: bool,
    /// Directory of `disp_UU_VV.lfd` maps at input resolution.
    #[arg(long)]
    disparity: Option<PathBuf>,
    /// Low-resolution tile side for the patch selector.
    #[arg(long, default_value_t = 32)]
    tile: usize,
    #[arg(long)]
    coarse_only: bool,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Numeric(_) | Error::Tape(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(command: Command) -> lfsr_core::Result<()> {
    match command {
        Command::Degrade { input, scale, out } => {
            let lf = read_lf_dir(&input)?;
            write_lf_dir(&out, &pipeline::degrade(&lf, scale)?)
        }
        Command::Train(args) => train(args),
        Command::SuperResolve(args) => super_resolve(args),
        Command::Evaluate { reference, test, out } => {
            let report = evaluate(&read_regular(&reference)?, &read_regular(&test)?)?;
            write_json(&out, &report)
        }
        Command::Epi { input, orientation, spatial, angular, out } => {
            let lf = read_regular(&input)?;
            let o = match orientation {
                Orientation::Horizontal => EpiOrientation::Horizontal,
                Orientation::Vertical => EpiOrientation::Vertical,
            };
            write_png(&out, &extract_epi(&lf, o, spatial, angular)?.image)
        }
        Command::SelectViews { input, ckpt, target, k, out } => {
            let model = load_checkpoint(&ckpt)?;
            let lf = read_lf_dir(&input)?;
            let target = AngularPosition::new(target[0], target[1]);
            let sel = pipeline::select_views(&model, &lf, target, k)?;
            let (m, n) = grid_extent(&sel.positions);
            let report = json!({
                "target": [target.u, target.v],
                "k": k,
                "scores": sel.score_grid(m, n),
                "mask": sel.mask(m, n),
                "chosen": sel.chosen.iter().map(|p| [p.u, p.v]).collect::<Vec<_>>(),
            });
            write_json(&out, &report)
        }
        Command::Synth { base, disparity, views, out } => {
            let base = read_png(&base)?;
            let lf = render_constant_disparity(&base, disparity, views[0], views[1])?;
            write_lf_dir(&out, &LfData::Regular(lf))
        }
    }
}

fn grid_extent(positions: &[AngularPosition]) -> (usize, usize) {
    let m = positions.iter().map(|p| p.u).max().unwrap_or(0) as usize + 1;
    let n = positions.iter().map(|p| p.v).max().unwrap_or(0) as usize + 1;
    (m, n)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> lfsr_core::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn train(args: TrainArgs) -> lfsr_core::Result<()> {
    let stage = match args.stage {
        StageArg::Coarse => Stage::Coarse,
        StageArg::Refine => Stage::Refine,
    };
    let model = match &args.ckpt {
        Some(path) => load_checkpoint(path)?,
        None if stage == Stage::Refine => {
            return Err(Error::InvalidArgument("the refine stage needs --ckpt with a trained coarse model".into()))
        }
        None => {
            let [n1, n2, n3, n4] = match args.blocks.as_deref() {
                Some(&[a, b, c, d]) => [a, b, c, d],
                _ => [5, 5, 3, 3],
            };
            let coarse = CoarseConfig {
                channels: args.channels,
                n1,
                n2,
                n3,
                n4,
                p: args.p,
                scale: args.scale,
                selector: !args.no_sai_selector,
                selector_channels: args.selector_channels,
            };
            let refine = RefineConfig {
                channels: args.refine_channels.unwrap_or(args.channels),
                layers: args.refine_layers,
                lambda_epi: args.lambda_epi,
            };
            Model::new(coarse, Some(refine), args.seed)?
        }
    };
    if model.scale() != args.scale {
        return Err(Error::InvalidArgument(format!(
            "checkpoint is for scale {}, asked for {}",
            model.scale(),
            args.scale
        )));
    }
    let items = args
        .data
        .iter()
        .map(|d| TrainItem::new(read_regular(d)?))
        .collect::<lfsr_core::Result<Vec<_>>>()?;
    let k_range = match (args.k_min, args.k_max) {
        (None, None) => None,
        (lo, hi) => {
            let views = items.iter().map(|i| i.hr.angular().0 * i.hr.angular().1).min().unwrap_or(0);
            Some((lo.unwrap_or(model.coarse.config().p), hi.unwrap_or(views)))
        }
    };
    let config = TrainConfig {
        stage,
        epochs: args.epochs,
        lr0: args.lr,
        patch: args.patch,
        k_range,
        patch_selector: args.patch_selector,
        seed: args.seed,
        ..TrainConfig::default()
    };
    let outcome = train_stage(&items, &config, model)?;
    save_checkpoint(&args.out, &outcome.model)?;
    let log_path = args.loss_log.unwrap_or_else(|| args.out.with_extension("csv"));
    write_loss_log(&log_path, &outcome.log)
}

fn load_disparity_dir(dir: &Path, lf: &LfData) -> lfsr_core::Result<Vec<DisparityMap>> {
    let positions = lf.to_irregular().positions().to_vec();
    let mut maps = Vec::new();
    for pos in positions {
        let path = dir.join(disparity_file_name(pos));
        if path.exists() {
            maps.push(read_disparity(&path, pos)?);
        }
    }
    if maps.is_empty() {
        return Err(Error::Format(format!("no disparity maps found in {}", dir.display())));
    }
    Ok(maps)
}

fn super_resolve(args: SrArgs) -> lfsr_core::Result<()> {
    let model = load_checkpoint(&args.ckpt)?;
    let lf = read_lf_dir(&args.input)?;
    let disparity = match &args.disparity {
        Some(dir) => load_disparity_dir(dir, &lf)?,
        None => Vec::new(),
    };
    let opts = SrOptions {
        scale: args.scale,
        k: args.k,
        patch_selector: args.patch_selector,
        tile: args.tile,
        disparity,
        coarse_only: args.coarse_only,
    };
    write_lf_dir(&args.out, &pipeline::super_resolve(&model, &lf, &opts)?)
}
