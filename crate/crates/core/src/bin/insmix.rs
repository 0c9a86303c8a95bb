use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use insmix::bank::InstanceBank;
use insmix::baselines::{apply_mix, MixConfig, MixMethod, Rect};
use insmix::dataset::{label_path_for, load_dir, save_labeled_image};
use insmix::gan::{train, write_metrics_csv};
use insmix::pipeline::{read_manifest, run_augment, run_verify, PipelineConfig, Stage};
use insmix::synth::{synth_dataset, SynthConfig};
use insmix::tensor::save_checkpoint;
use insmix::{rng, Error, Result};

#[derive(Parser)]
#[command(name = "insmix", version, about = "Copy-paste-smooth nuclei augmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Instance bank utilities.
    Bank {
        #[command(subcommand)]
        command: BankCommand,
    },
    /// Run the configured stages over the input directory.
    Augment {
        #[arg(long)]
        config: PathBuf,
    },
    /// Smoothing network utilities.
    Gan {
        #[command(subcommand)]
        command: GanCommand,
    },
    /// Apply a mixing baseline to one or two images.
    Baseline {
        #[arg(long, value_enum)]
        method: MixMethod,
        #[arg(long)]
        a: PathBuf,
        /// Second image (mixup, cutmix, cowmix).
        #[arg(long)]
        b: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        weight: f64,
        /// Fixed rectangle as `x,y,w,h`; random when omitted.
        #[arg(long, value_parser = parse_rect)]
        rect: Option<Rect>,
        #[arg(long, default_value_t = 8.0)]
        cow_sigma: f64,
        #[arg(long, default_value_t = 0.5)]
        cow_p: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-check a manifest against its inputs and outputs.
    Verify {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Write a synthetic labelled dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 6)]
        nuclei: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum BankCommand {
    Build {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum GanCommand {
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-step losses; defaults to the checkpoint path with `.csv`.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// `augment` with the given checkpoint, adding the smooth stage if absent.
    Smooth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
}

fn parse_rect(s: &str) -> std::result::Result<Rect, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<std::result::Result<_, _>>()?;
    match v[..] {
        [x, y, w, h] => Ok(Rect { x, y, w, h }),
        _ => Err(format!("expected x,y,w,h, got {s:?}")),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidConfig(_) => 2,
        Error::MissingCheckpoint | Error::Checkpoint(_) => 3,
        Error::Io { .. } | Error::Decode { .. } | Error::UnsupportedFormat { .. } | Error::MissingArtifact(_) => 4,
        _ => 1,
    }
}

fn open_rgb(path: &Path) -> Result<image::RgbImage> {
    image::open(path)
        .map(|i| i.into_rgb8())
        .map_err(|source| Error::Decode {
            path: path.to_path_buf(),
            source,
        })
}

fn run(cli: Cli) -> Result<u8> {
    match cli.command {
        Command::Bank {
            command: BankCommand::Build { data, out },
        } => {
            let bank = InstanceBank::build(&load_dir(&data)?)?;
            bank.save_jsonl(&out)?;
            println!("{} instances -> {}", bank.len(), out.display());
        }
        Command::Augment { config } => {
            let cfg = PipelineConfig::load(&config)?;
            let recs = run_augment(&cfg)?;
            println!("{} samples -> {}", recs.len(), cfg.output_dir.display());
        }
        Command::Gan {
            command: GanCommand::Train { config, out, metrics },
        } => {
            let cfg = PipelineConfig::load(&config)?;
            let data = load_dir(&cfg.input_dir)?;
            let bank = InstanceBank::build(&data)?;
            let outcome = train(&data, &bank, &cfg.compositor(), &cfg.gan)?;
            save_checkpoint(&out, &outcome.params.to_records())?;
            let metrics = metrics.unwrap_or_else(|| out.with_extension("csv"));
            write_metrics_csv(&metrics, &outcome.metrics)?;
            println!("{} steps -> {}", outcome.metrics.len(), out.display());
        }
        Command::Gan {
            command: GanCommand::Smooth { config, ckpt },
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if !ckpt.is_file() {
                return Err(Error::MissingCheckpoint);
            }
            cfg.gan_checkpoint = Some(ckpt);
            if !cfg.stages.contains(&Stage::Smooth) {
                cfg.stages.push(Stage::Smooth);
            }
            let recs = run_augment(&cfg)?;
            println!("{} samples -> {}", recs.len(), cfg.output_dir.display());
        }
        Command::Baseline {
            method,
            a,
            b,
            out,
            weight,
            rect,
            cow_sigma,
            cow_p,
            seed,
        } => {
            let cfg = MixConfig {
                method,
                mix_weight: weight,
                rect,
                cow_sigma,
                cow_p,
            };
            let ia = open_rgb(&a)?;
            let ib = match (&b, method) {
                (Some(p), _) => open_rgb(p)?,
                (None, MixMethod::Cutout | MixMethod::Cowout) => ia.clone(),
                (None, _) => return Err(Error::InvalidConfig(format!("{method:?} needs --b"))),
            };
            let mixed = apply_mix(&ia, &ib, &cfg, &mut rng::stream(seed))?;
            mixed.save(&out).map_err(|source| Error::Decode { path: out.clone(), source })?;
        }
        Command::Verify { manifest } => {
            let report = run_verify(&read_manifest(&manifest)?)?;
            println!("{}", serde_json::to_string_pretty(&report).expect("serializable report"));
            if !report.is_clean() {
                return Ok(1);
            }
        }
        Command::Synth {
            out,
            count,
            size,
            nuclei,
            seed,
        } => {
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            let cfg = SynthConfig {
                width: size,
                height: size,
                nuclei,
                ..SynthConfig::default()
            };
            for img in synth_dataset(count, &cfg, seed) {
                let p = out.join(format!("{}.png", img.id));
                save_labeled_image(&img, &p, &label_path_for(&p))?;
            }
            println!("{count} images -> {}", out.display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
