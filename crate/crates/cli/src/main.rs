//! `dfreloc`: run experiment stages from a flat config file.
//!
//! Failures print one line `error: <CODE>: <message>` to stderr and exit
//! with status 1 (2 for command-line usage errors).

mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfreloc::config::{ExperimentConfig, SEED_ENV};
use dfreloc::data::{format_manifest, make_toy_scene, save_scene};
use dfreloc::fsutil::write_atomic;
use dfreloc::pipeline::{self, Experiment};
use dfreloc::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "dfreloc", version, about = "Pose regression with a histogram-conditioned radiance field")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Debug, Clone)]
struct ConfigArgs {
    /// Experiment config (`key = value` lines); defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Extra `key=value` settings applied after the config file.
    #[arg(long = "override", short = 'o', value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the histogram-conditioned radiance field.
    TrainNerf(ConfigArgs),
    /// Render every validation view with the trained field.
    Render(ConfigArgs),
    /// Train the pose regressor and its feature heads.
    TrainDfnet(ConfigArgs),
    /// Finetune the pose regressor on unposed frames by direct matching.
    FinetuneDm(ConfigArgs),
    /// Refine single validation images by direct matching.
    Refine(ConfigArgs),
    /// Write the metrics report for every trained model.
    Eval(ConfigArgs),
    /// Draw trajectory, loss-landscape and training-curve plots.
    Plot(ConfigArgs),
    /// Write the configured toy scene in the posed-folder layout.
    MakeToy {
        #[command(flatten)]
        args: ConfigArgs,
        /// Destination directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Print every config key with its resolved value.
    ShowConfig(ConfigArgs),
}

fn resolve(args: &ConfigArgs) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| Error::InvalidArgument(format!("config {}: {e}", path.display())))?;
        cfg.apply_text(&text)?;
    }
    for kv in &args.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.apply_seed_override(std::env::var(SEED_ENV).ok().as_deref())?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::TrainNerf(a) => {
            let exp = Experiment::open(resolve(&a)?)?;
            for e in exp.train_nerf()? {
                let val = e.val_psnr.map_or(String::new(), |v| format!(" val_psnr={v:.2}"));
                println!("epoch={} lr={:.3e} loss={:.5} train_psnr={:.2}{val}", e.epoch, e.lr, e.loss, e.train_psnr);
            }
            println!("wrote {}", exp.path(pipeline::NERF_CKPT).display());
        }
        Command::Render(a) => {
            let exp = Experiment::open(resolve(&a)?)?;
            let v = exp.render()?;
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            println!("rendered {} views, mean psnr {mean:.2} dB", v.len());
        }
        Command::TrainDfnet(a) => {
            let exp = Experiment::open(resolve(&a)?)?;
            for e in exp.train_dfnet()? {
                println!("{e}");
            }
            println!("wrote {}", exp.path(pipeline::DFNET_CKPT).display());
        }
        Command::FinetuneDm(a) => {
            let exp = Experiment::open(resolve(&a)?)?;
            let log = exp.finetune_dm()?;
            if let (Some(first), Some(last)) = (log.first(), log.last()) {
                println!("steps={} loss {:.5} -> {:.5}", log.len(), first.loss, last.loss);
            }
            println!("wrote {}", exp.path(pipeline::DFNET_DM_CKPT).display());
        }
        Command::Refine(a) => {
            let exp = Experiment::open(resolve(&a)?)?;
            let poses = exp.refine()?;
            println!("refined {} frames; wrote {}", poses.len(), exp.path(pipeline::REFINE_LOG).display());
        }
        Command::Eval(a) => {
            let exp = Experiment::open(resolve(&a)?)?;
            let report = exp.eval()?;
            let text = report.to_text();
            if let Some(pos) = text.find("# summary") {
                print!("{}", &text[pos..]);
            }
            println!("wrote {}", exp.path(pipeline::REPORT).display());
        }
        Command::Plot(a) => {
            let exp = Experiment::open(resolve(&a)?)?;
            for p in plot::plot_all(&exp)? {
                println!("wrote {}", p.display());
            }
        }
        Command::MakeToy { args, out } => {
            let cfg = resolve(&args)?;
            let opts = cfg
                .toy_options()
                .ok_or_else(|| Error::InvalidArgument("make-toy needs `scene = toy:<seed>`".into()))?;
            let (scene, ds) = make_toy_scene(&opts);
            save_scene(&out, &ds)?;
            write_atomic(&out.join("toy_scene.txt"), format_manifest(&scene, &opts).as_bytes())?;
            println!("wrote toy scene ({} train, {} val) to {}", ds.train.len(), ds.val.len(), out.display());
        }
        Command::ShowConfig(a) => print!("{}", resolve(&a)?.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: USAGE: {first}");
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {}: {msg}", e.code());
            ExitCode::FAILURE
        }
    }
}
