//! `xtrack`: run the stereo tracking experiments from one config file.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use xtrack_core::config::{ExperimentConfig, Scale};
use xtrack_core::experiment::{cmd_eval, cmd_gen, cmd_track, DATASET_DIR, RUN_DIR};
use xtrack_core::features::{detect_features_2d_with, extract_polylines};
use xtrack_core::io::{mip_y, read_image, read_polylines, read_volume, write_field2, write_field3, write_image,
    write_pgm, write_polylines, write_volume};
use xtrack_core::projector::{forward_project, make_bp_evidence};
use xtrack_core::registration::{register_2d, register_3d_prior};
use xtrack_core::{rasterize_polylines, warp_image, warp_volume};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ScaleArg {
    Desk,
    Paper,
}

#[derive(Debug, Parser)]
#[command(name = "xtrack", version, about = "Simulated stereo X-ray line tracking")]
struct Cli {
    /// Experiment config (TOML). Keys not given fall back to the scale preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output root. Defaults to `output.dir` of the config.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    scale: Option<ScaleArg>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a phantom sequence with projections into OUT/dataset.
    Gen,
    /// Forward-project a volume for both views.
    Project {
        #[arg(long, value_name = "VOLUME")]
        volume: PathBuf,
    },
    /// Register a moving image onto a fixed one.
    Register2d {
        #[arg(long, value_name = "IMAGE")]
        moving: PathBuf,
        #[arg(long, value_name = "IMAGE")]
        fixed: PathBuf,
    },
    /// Detect line features in an image.
    Detect {
        #[arg(long, value_name = "IMAGE")]
        image: PathBuf,
    },
    /// Back-project two views' feature maps into evidence.
    Backproject {
        #[arg(long, value_name = "IMAGE")]
        map0: PathBuf,
        #[arg(long, value_name = "IMAGE")]
        map1: PathBuf,
    },
    /// Register prior lines onto evidence and extract the mapped lines.
    Map3d {
        #[arg(long, value_name = "VOLUME")]
        evidence: PathBuf,
        #[arg(long, value_name = "CSV")]
        prior_lines: PathBuf,
    },
    /// Track a generated dataset into OUT/run.
    Track {
        /// Dataset directory. Defaults to OUT/dataset.
        #[arg(long, value_name = "DIR")]
        dataset: Option<PathBuf>,
    },
    /// Report on a run and check the acceptance thresholds.
    Eval {
        /// Run directory. Defaults to OUT/run.
        #[arg(long, value_name = "DIR")]
        run: Option<PathBuf>,
    },
}

fn stem(out: &Path, name: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out.join(name))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let scale = cli.scale.map(|s| match s {
        ScaleArg::Desk => Scale::Desk,
        ScaleArg::Paper => Scale::Paper,
    });
    let cfg = ExperimentConfig::load(cli.config.as_deref(), scale, cli.seed)?;
    let out = cli.out.clone().unwrap_or_else(|| cfg.output.dir.clone());

    match cli.command {
        Command::Gen => {
            let dir = out.join(DATASET_DIR);
            let m = cmd_gen(&cfg, &dir)?;
            println!("{}: {} frames, {} artifacts", dir.display(), m.frames, m.artifacts.len());
        }
        Command::Project { volume } => {
            let vol = read_volume(&volume)?;
            for v in 0..2 {
                let img = forward_project(&vol, &cfg.geometry, v)?;
                write_image(&stem(&out, &format!("proj_v{v}"))?, &img)?;
                write_pgm(&stem(&out, &format!("proj_v{v}.pgm"))?, &img)?;
            }
            println!("{}: proj_v0, proj_v1", out.display());
        }
        Command::Register2d { moving, fixed } => {
            let (m, f) = (read_image(&moving)?, read_image(&fixed)?);
            let r = register_2d(&m, &f, &cfg.reg2d)?;
            let moved = warp_image(&m, &r.field)?;
            write_field2(&stem(&out, "field")?, &r.field)?;
            write_image(&stem(&out, "moved")?, &moved)?;
            write_pgm(&stem(&out, "moved.pgm")?, &moved)?;
            std::fs::write(stem(&out, "trace.csv")?, r.trace_csv())?;
            println!("{}: field, moved, trace.csv", out.display());
        }
        Command::Detect { image } => {
            let img = read_image(&image)?;
            let feat = detect_features_2d_with(&img, &cfg.detector)?;
            let binary = feat.binary();
            write_image(&stem(&out, "response")?, &feat.response)?;
            write_image(&stem(&out, "binary")?, &binary)?;
            write_pgm(&stem(&out, "response.pgm")?, &feat.response)?;
            println!("{}: response, binary (threshold {:.4})", out.display(), feat.threshold);
        }
        Command::Backproject { map0, map1 } => {
            let (a, b) = (read_image(&map0)?, read_image(&map1)?);
            let ev = make_bp_evidence(&a, &b, &cfg.geometry, cfg.phantom.dims)?;
            if ev.empty {
                eprintln!("warning: a feature map carried no signal; evidence is empty");
            }
            write_volume(&stem(&out, "evidence")?, &ev.volume)?;
            write_pgm(&stem(&out, "evidence_mip.pgm")?, &mip_y(&ev.volume))?;
            println!("{}: evidence", out.display());
        }
        Command::Map3d { evidence, prior_lines } => {
            let ev = read_volume(&evidence)?;
            let lines = read_polylines(&prior_lines, cfg.phantom.line_radius)?;
            let prior = rasterize_polylines(&lines, ev.dims())?;
            let psi = register_3d_prior(&prior, &ev, &cfg.reg3d)?.field;
            let fv = warp_volume(&prior, &psi)?;
            let ex = extract_polylines(&fv, lines.len())?;
            if let Some(w) = &ex.warning {
                eprintln!("warning: {w}");
            }
            write_field3(&stem(&out, "field")?, &psi)?;
            write_volume(&stem(&out, "feature_volume")?, &fv)?;
            write_polylines(&stem(&out, "lines.csv")?, &ex.lines)?;
            write_pgm(&stem(&out, "feature_mip.pgm")?, &mip_y(&fv))?;
            println!("{}: field, feature_volume, lines.csv ({} lines)", out.display(), ex.lines.len());
        }
        Command::Track { dataset } => {
            let data = dataset.unwrap_or_else(|| out.join(DATASET_DIR));
            if !data.join("manifest.json").exists() {
                bail!("no dataset at {} (run `xtrack gen` first)", data.display());
            }
            let dir = out.join(RUN_DIR);
            let m = cmd_track(&cfg, &data, &dir)?;
            for s in &m.strategies {
                print!("{}", std::fs::read_to_string(dir.join(s.name()).join("metrics.csv"))?.replacen("frame", &format!("{}:frame", s.name()), 1));
            }
        }
        Command::Eval { run } => {
            let dir = run.unwrap_or_else(|| out.join(RUN_DIR));
            let report = cmd_eval(&dir)?;
            std::fs::write(dir.join("report.csv"), report.to_csv())?;
            std::fs::write(dir.join("report.txt"), report.to_text())?;
            print!("{}", report.to_text());
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
