use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use holoseg::bae::LabelMask;
use holoseg::checks;
use holoseg::lrd::{influence_probe, influence_radius};
use holoseg::offload::budget_from_env;
use holoseg::segnet::{
    compute_loss, holistic_forward, load_image, load_mask, miou, save_image, save_mask, synth,
    write_outputs, NetworkConfig, NetworkParams, SegnetError,
};
use holoseg::tensor::{Shape, Tensor};

#[derive(Parser)]
#[command(name = "holoseg", version, about = "Memory-budgeted semantic segmentation of large rasters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Segment an image; writes class_map.raster and stats.json.
    Run {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Weight container to load instead of seeded weights.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Also write the weights used to this path.
        #[arg(long)]
        save_weights: Option<PathBuf>,
    },
    /// Segment an image and report the loss and mIoU against a mask.
    Loss {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Measure the LRD block's influence map around one output pixel.
    Erf {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        /// Side of the square probe image.
        #[arg(long, default_value_t = 37)]
        size: usize,
        /// Probe pixel as `y,x`; defaults to the centre.
        #[arg(long, value_parser = parse_pixel)]
        probe: Option<(usize, usize)>,
        #[arg(long)]
        weights: Option<PathBuf>,
    },
    /// Run the verification suite; exits nonzero on any failure.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write a deterministic synthetic image.raster and mask.raster.
    Synth {
        #[arg(long)]
        height: usize,
        #[arg(long)]
        width: usize,
        #[arg(long, default_value_t = 4)]
        bands: usize,
        #[arg(long, default_value_t = 24)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct Common {
    /// JSON network config; missing fields take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Arena budget in bytes; overrides the environment and the config.
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn parse_pixel(s: &str) -> Result<(usize, usize), String> {
    let (y, x) = s.split_once(',').ok_or("expected y,x")?;
    let p = |v: &str| v.trim().parse::<usize>().map_err(|e| e.to_string());
    Ok((p(y)?, p(x)?))
}

impl Common {
    fn config(&self) -> Result<NetworkConfig, Box<dyn std::error::Error>> {
        let mut config = match &self.config {
            Some(path) => NetworkConfig::load(path)?,
            None => NetworkConfig::default(),
        };
        if let Some(b) = budget_from_env()? {
            config.arena_budget = b;
        }
        if let Some(b) = self.budget {
            config.arena_budget = b;
        }
        if let Some(s) = self.seed {
            config.seed = s;
        }
        config.validate()?;
        Ok(config)
    }
}

fn params(config: &NetworkConfig, weights: Option<&Path>) -> Result<NetworkParams, SegnetError> {
    match weights {
        Some(path) => NetworkParams::load(path, config),
        None => Ok(NetworkParams::seeded(config)),
    }
}

fn run(command: Command) -> Result<bool, Box<dyn std::error::Error>> {
    match command {
        Command::Run {
            common,
            image,
            out,
            weights,
            save_weights,
        } => {
            let config = common.config()?;
            let params = params(&config, weights.as_deref())?;
            if let Some(path) = save_weights {
                params.save(&path)?;
            }
            let output = holistic_forward(load_image(&image)?, &config, &params)?;
            write_outputs(&output, &out)?;
            println!("{}", serde_json::to_string(&output.stats)?);
        }
        Command::Loss {
            common,
            image,
            mask,
            weights,
        } => {
            let config = common.config()?;
            let params = params(&config, weights.as_deref())?;
            let mut mask = load_mask(&mask)?;
            mask.ignore_id = config.ignore_id;
            mask.validate(config.num_classes)?;
            let output = holistic_forward(load_image(&image)?, &config, &params)?;
            let loss = compute_loss(&output, &mask, &config)?;
            let report = miou(&output.class_map, &mask, config.num_classes)?;
            println!("{}", json!({ "loss": loss, "miou": report.mean, "per_class_iou": report.per_class }));
        }
        Command::Erf {
            common,
            out,
            size,
            probe,
            weights,
        } => {
            let config = common.config()?;
            let lrd = params(&config, weights.as_deref())?.lrd;
            let probe = probe.unwrap_or((size / 2, size / 2));
            let base = Tensor::zeros(Shape::new(1, lrd.in_channels(), size, size));
            let map = influence_probe(&lrd, &base, probe)?;
            std::fs::create_dir_all(&out)?;
            save_image(&out.join("influence.raster"), &map)?;
            println!("{}", json!({ "probe": [probe.0, probe.1], "radius": influence_radius(&map, probe) }));
        }
        Command::Check { seed } => {
            let scratch = tempfile::tempdir()?;
            let results = checks::run_all(seed, scratch.path(), |r| println!("{r}"));
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} of {} checks passed", results.len() - failed, results.len());
            return Ok(failed == 0);
        }
        Command::Synth {
            height,
            width,
            bands,
            classes,
            seed,
            out,
        } => {
            if !(1..=255).contains(&classes) || height == 0 || width == 0 || bands == 0 {
                return Err("synth needs a non-empty size, at least one band and 1..=255 classes".into());
            }
            let (image, mask): (Tensor, LabelMask) = synth(height, width, bands, classes, seed);
            std::fs::create_dir_all(&out)?;
            save_image(&out.join("image.raster"), &image)?;
            save_mask(&out.join("mask.raster"), &mask)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
