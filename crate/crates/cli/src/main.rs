use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use vesselseg_core::backbone::LdcaSites;
use vesselseg_core::error::ErrorCategory;
use vesselseg_core::harness::data::{load_images, load_probability, save_mask, save_probability};
use vesselseg_core::harness::{checkpoint, plot, predict, synth, train};
use vesselseg_core::harness::{ingest, DatasetSpec, Layout, Model, NoiseMode, Normalization, Sample, TrainConfig};
use vesselseg_core::metrics::{binarize, evaluate, Report};
use vesselseg_core::topology::diagram_of;
use vesselseg_core::Error;

#[derive(Parser)]
#[command(name = "vesselseg", version, about = "Curvilinear structure segmentation toolkit")]
struct Cli {
    /// Root for all outputs; each subcommand writes to its own sub-directory.
    #[arg(long, global = true, env = "VESSELSEG_OUT", default_value = "vesselseg-out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic vessel phantoms with exact masks.
    Synth {
        #[arg(long, default_value_t = 64)]
        count: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Main training phase followed by topological fine-tuning.
    Train {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Topological fine-tuning of an existing checkpoint.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Probability maps and masks for an image or a directory of images.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "standardize")]
        normalization: String,
    },
    /// Metrics of saved probability maps against a dataset's ground truth.
    Eval {
        /// Directory of `<id>.png` probability maps written by `predict`.
        #[arg(long)]
        pred: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Overlays, offset quiver and persistence diagrams.
    Plot {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Probability maps from `predict`; computed on the fly when absent.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Plot at most this many images.
        #[arg(long, default_value_t = 4)]
        limit: usize,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset root.
    #[arg(long)]
    data: PathBuf,
    /// drive, chase, stare, fives, octa or synthetic.
    #[arg(long, default_value = "synthetic")]
    layout: String,
    #[arg(long)]
    split: Option<String>,
    #[arg(long)]
    no_fov: bool,
}

impl DataArgs {
    fn spec(&self) -> Result<DatasetSpec> {
        let layout: Layout = self.layout.parse()?;
        let mut spec = DatasetSpec::new(&self.data, layout);
        if let Some(s) = &self.split {
            spec = spec.with_split(s.clone());
        }
        spec.use_fov = !self.no_fov;
        Ok(spec)
    }

    fn load(&self, mode: Normalization) -> Result<Vec<Sample>> {
        let got = ingest(&self.spec()?, mode)?;
        for (path, why) in &got.rejected {
            log::warn!("skipped {}: {why}", path.display());
        }
        Ok(got.samples)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// Full architecture: width 32, LDCA at every nested node.
    Default,
    /// Width 8, LDCA below full resolution; trains in minutes on one core.
    Desk,
}

/// Overrides applied on top of the preset or `--config` file.
#[derive(Args)]
struct ConfigArgs {
    /// TOML file with `TrainConfig` keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs_main: Option<usize>,
    #[arg(long)]
    epochs_finetune: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    skeleton_iters: Option<usize>,
    #[arg(long)]
    val_fraction: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// smoothed-noise or blur-plus-noise.
    #[arg(long)]
    noise_mode: Option<String>,
    /// standardize or min-max.
    #[arg(long)]
    normalization: Option<String>,
    #[arg(long)]
    topo_fraction: Option<f64>,
    #[arg(long)]
    target_val_dice: Option<f64>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    patch_size: Option<usize>,
    /// `all`, `none`, or `i,j;i,j;...`.
    #[arg(long)]
    ldca_sites: Option<String>,
    /// Kalman measurement noise `r`.
    #[arg(long)]
    kalman_r: Option<f64>,
    #[arg(long)]
    kernel_length: Option<usize>,
    #[arg(long)]
    offset_extent: Option<f64>,
}

fn parse_sites(s: &str) -> Result<LdcaSites, Error> {
    match s {
        "all" => Ok(LdcaSites::all()),
        "none" => Ok(LdcaSites::none()),
        list => list
            .split(';')
            .map(|pair| {
                let v: Vec<usize> = pair.split(',').map(|t| t.trim().parse()).collect::<Result<_, _>>().map_err(|_| {
                    Error::Config(format!("bad LDCA site {pair:?}, expected i,j"))
                })?;
                match v[..] {
                    [i, j] => Ok([i, j]),
                    _ => Err(Error::Config(format!("bad LDCA site {pair:?}, expected i,j"))),
                }
            })
            .collect::<Result<_, _>>()
            .map(LdcaSites::List),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut c = match (&self.config, self.preset) {
            (Some(path), _) => TrainConfig::load(path)?,
            (None, Some(Preset::Desk)) => TrainConfig::desk(),
            (None, _) => TrainConfig::default(),
        };
        if let (Some(_), Some(Preset::Desk)) = (&self.config, self.preset) {
            c.model = TrainConfig::desk().model;
        }
        macro_rules! set {
            ($($field:ident).+ <- $arg:ident) => {
                if let Some(v) = self.$arg.clone() {
                    c.$($field).+ = v;
                }
            };
        }
        set!(learning_rate <- learning_rate);
        set!(weight_decay <- weight_decay);
        set!(epochs_main <- epochs_main);
        set!(epochs_finetune <- epochs_finetune);
        set!(batch_size <- batch_size);
        set!(seed <- seed);
        set!(alpha <- alpha);
        set!(skeleton_iters <- skeleton_iters);
        set!(val_fraction <- val_fraction);
        set!(stride <- stride);
        set!(noise_sigma <- noise_sigma);
        set!(topo_fraction <- topo_fraction);
        set!(model.depth <- depth);
        set!(model.base_width <- base_width);
        set!(model.patch_size <- patch_size);
        set!(model.ld.r <- kalman_r);
        set!(model.ld.kernel_length <- kernel_length);
        set!(model.ld.extent <- offset_extent);
        if let Some(v) = self.target_val_dice {
            c.target_val_dice = Some(v);
        }
        if let Some(s) = &self.noise_mode {
            c.noise_mode = s.parse::<NoiseMode>()?;
        }
        if let Some(s) = &self.normalization {
            c.normalization = s.parse::<Normalization>()?;
        }
        if let Some(s) = &self.ldca_sites {
            c.model.ldca_sites = parse_sites(s)?;
        }
        c.validate()?;
        Ok(c)
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_model(path: &Path) -> Result<Model> {
    let (model, manifest) = checkpoint::load(path)?;
    log::info!(
        "loaded {} ({} phase, epoch {}, val dice {:?})",
        path.display(),
        manifest.phase,
        manifest.epoch,
        manifest.val_dice
    );
    Ok(model)
}

fn report_training(out: &train::TrainOutcome) {
    for r in &out.curve {
        println!(
            "{:>8} epoch {:>2}: loss {:.4}  val dice {:.4}  cldice {:.4}  cc err {:.2}  ({:.0}s)",
            r.phase.as_str(),
            r.epoch,
            r.train_loss,
            r.val_dice,
            r.val_cldice,
            r.val_cc_error,
            r.seconds
        );
    }
    println!("best checkpoint: {}", out.best_path.display());
}

fn run(cli: Cli) -> Result<()> {
    let out = &cli.out_dir;
    match cli.command {
        Command::Synth { count, size, seed } => {
            let dir = out.join("synth");
            let phantoms = synth::synth_generate(count, size, seed)?;
            synth::write_dataset(&dir, &phantoms)?;
            println!("wrote {count} phantoms to {}", dir.display());
        }
        Command::Train { data, config } => {
            let cfg = config.resolve()?;
            let dir = out.join("train");
            mkdir(&dir)?;
            cfg.save(&dir.join("config.toml"))?;
            let samples = data.load(cfg.normalization)?;
            let result = train::train(&cfg, &samples, &dir)?;
            report_training(&result);
        }
        Command::Finetune { checkpoint, data, config } => {
            let mut cfg = config.resolve()?;
            let model = load_model(&checkpoint)?;
            cfg.model = model.config().clone();
            let dir = out.join("finetune");
            mkdir(&dir)?;
            cfg.save(&dir.join("config.toml"))?;
            let samples = data.load(cfg.normalization)?;
            let result = train::finetune(&cfg, model, &samples, &dir)?;
            report_training(&result);
        }
        Command::Predict {
            checkpoint,
            input,
            normalization,
        } => {
            let model = load_model(&checkpoint)?;
            let mode: Normalization = normalization.parse()?;
            let dir = out.join("predict");
            for (id, image) in load_images(&input, mode)? {
                let p = predict::predict(&model, &image)?;
                save_probability(&dir.join("prob").join(format!("{id}.png")), &p.probs)?;
                save_mask(&dir.join("mask").join(format!("{id}.png")), &p.mask)?;
                println!("{id}: {} foreground pixels", p.mask.iter().filter(|&&v| v).count());
            }
            println!("wrote predictions to {}", dir.display());
        }
        Command::Eval { pred, data } => {
            let samples = data.load(Normalization::default())?;
            let mut rows = Vec::new();
            for s in &samples {
                let path = pred.join(format!("{}.png", s.id));
                let probs = load_probability(&path)?;
                let m = evaluate(&s.id, probs.view(), s.mask.view(), s.fov.as_ref().map(|f| f.view()))?;
                println!("{m}");
                rows.push(m);
            }
            let report = Report::new(rows);
            if let Some(mean) = &report.mean {
                println!("mean: {mean}");
            }
            let dir = out.join("eval");
            mkdir(&dir)?;
            report.write_json(&dir.join("metrics.json"))?;
            report.write_csv(&dir.join("metrics.csv"))?;
            println!("wrote metrics to {}", dir.display());
        }
        Command::Plot {
            checkpoint,
            data,
            pred,
            limit,
        } => {
            let model = load_model(&checkpoint)?;
            let samples = data.load(Normalization::default())?;
            let dir = out.join("plots");
            mkdir(&dir)?;
            for s in samples.iter().take(limit.max(1)) {
                let probs = match &pred {
                    Some(p) => load_probability(&p.join(format!("{}.png", s.id)))?,
                    None => predict::predict(&model, &s.image)?.probs,
                };
                plot::save_overlay(
                    &dir.join(format!("overlay_{}.png", s.id)),
                    s.image.view(),
                    binarize(probs.view()).view(),
                    s.mask.view(),
                )?;
                plot::diagram_svg(
                    &dir.join(format!("diagram_{}.svg", s.id)),
                    &diagram_of(&probs),
                    Some(&diagram_of(&s.mask.mapv(|v| if v { 1.0 } else { 0.0 }))),
                )?;
            }
            // Offsets for the top-left patch of the first image.
            let first = &samples[0];
            let size = model.config().patch_size;
            let grid = vesselseg_core::tiling::PatchGrid::new(first.image.nrows(), first.image.ncols(), size, size)?;
            let patch = grid.extract(first.image.view())?.swap_remove(0);
            let (site, fields) = plot::model_offsets(&model, &patch)?;
            let (dx, dy) = plot::mean_displacement(&fields, 0)?;
            let arrows = plot::quiver_arrows(dx.view(), dy.view(), 2)?;
            let n = plot::quiver_svg(&dir.join("quiver.svg"), &arrows, dx.nrows(), dx.ncols(), 1.0)?;
            println!("quiver: {n} arrows at LDCA site {site:?}");
            println!("wrote figures to {}", dir.display());
        }
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>().map(Error::category) {
        Some(ErrorCategory::Config) => 2,
        Some(ErrorCategory::Data) => 3,
        Some(ErrorCategory::Numeric) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
