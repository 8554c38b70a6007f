//! `semireg` command-line driver.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use semireg::experiment::{parse_methods, read_results, run_experiment, ExperimentConfig, Method};
use semireg::fusion::{mas_segment, FusionConfig};
use semireg::io::{
    load_dataset, read_labelmap, read_regnet, read_segnet, read_toml, read_volume,
    write_dataset, write_field, write_json, write_labelmap, write_regnet, write_segnet, write_volume,
};
use semireg::metrics::evaluate;
use semireg::plots::emit_plots;
use semireg::regnet::RegNetConfig;
use semireg::segnet::SegNetConfig;
use semireg::synth::{synth_population, Dataset, SyntheticPopConfig};
use semireg::trainer::{train_registration, train_segmentation, TrainConfig};
use semireg::{argmax_labels, make_one_hot, warp_probmap, warp_scalar, Atlas};

#[derive(Parser)]
#[command(name = "semireg", version, about = "Semi-supervised registration and multi-atlas segmentation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every subcommand.
#[derive(Args)]
struct Common {
    /// TOML configuration file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed; overrides any seed in the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic population and write it with a manifest.
    SynthData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a registration network.
    TrainReg(TrainRegArgs),
    /// Train a patch segmentation network.
    TrainSeg(TrainSegArgs),
    /// Register a moving image to a fixed image with a trained network.
    Register(RegisterArgs),
    /// Segment an image by multi-atlas label fusion.
    SegmentMas(SegmentMasArgs),
    /// Segment an image with a trained segmentation network.
    SegmentNet {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare a predicted label map against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Comma-separated labels; defaults to foreground labels present.
        #[arg(long)]
        labels: Option<String>,
        /// Write the report as JSON here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run (or resume) the comparative grid.
    Experiment(ExperimentArgs),
    /// Render figures from a results table.
    Plot {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct DataArgs {
    /// Dataset manifest; a synthetic population is generated when omitted.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Comma-separated atlas ids from the training split.
    #[arg(long)]
    atlases: Option<String>,
}

#[derive(Args)]
struct TrainRegArgs {
    #[command(flatten)]
    data: DataArgs,
    /// MAS, MAS-DA or MAS-SS; sets the supervision and augmentation switches.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Training history as JSON.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct TrainSegArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Deform training atlases each iteration (SegNet-DA).
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    #[arg(long)]
    fixed: PathBuf,
    /// Displacement field output.
    #[arg(long)]
    out_field: PathBuf,
    /// Warped moving image output.
    #[arg(long)]
    out_warped: Option<PathBuf>,
    /// Moving label map to propagate.
    #[arg(long, requires = "out_labels")]
    moving_labels: Option<PathBuf>,
    #[arg(long)]
    out_labels: Option<PathBuf>,
}

#[derive(Args)]
struct SegmentMasArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Comma-separated atlas ids; defaults to the whole training split.
    #[arg(long)]
    atlases: Option<String>,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Augmented atlas copies added to the fusion pool.
    #[arg(long)]
    n_augmented: Option<usize>,
}

#[derive(Args)]
struct ExperimentArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated method names.
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated atlas counts, e.g. `1,2,3`.
    #[arg(long)]
    n_atlases: Option<String>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Iterations for every training run.
    #[arg(long)]
    iterations: Option<usize>,
    /// Write figures into `<out>/plots` after the grid finishes.
    #[arg(long)]
    plot: bool,
}

/// `train-reg` config file.
#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RegFile {
    train: TrainConfig,
    network: RegNetConfig,
    data: SyntheticPopConfig,
    max_unlabeled: Option<usize>,
}

/// `train-seg` config file.
#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SegFile {
    train: TrainConfig,
    network: SegNetConfig,
    data: SyntheticPopConfig,
}

impl Default for SegFile {
    fn default() -> Self {
        SegFile {
            train: TrainConfig::segmentation_default(),
            network: SegNetConfig::default(),
            data: SyntheticPopConfig::default(),
        }
    }
}

/// `experiment` config file: the grid plus the population to generate when
/// no manifest is given.
#[derive(Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentFile {
    experiment: ExperimentConfig,
    data: SyntheticPopConfig,
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        Some(p) => Ok(read_toml(p).with_context(|| format!("loading config {}", p.display()))?),
        None => Ok(T::default()),
    }
}

fn load_data(manifest: Option<&Path>, synth: &SyntheticPopConfig) -> Result<Dataset> {
    match manifest {
        Some(m) => Ok(load_dataset(m)?),
        None => Ok(synth_population(synth)?),
    }
}

fn pick_atlases(ds: &Dataset, ids: Option<&str>) -> Result<Vec<Atlas>> {
    let Some(ids) = ids else {
        return Ok(ds.train.clone());
    };
    ids.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|id| {
            ds.train
                .iter()
                .find(|a| a.id == id)
                .cloned()
                .with_context(|| format!("atlas {id} is not in the training split"))
        })
        .collect()
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(|x| x.parse::<T>().map_err(|_| anyhow::anyhow!("cannot parse {x:?}")))
        .collect()
}

fn train_reg(common: &Common, a: &TrainRegArgs) -> Result<()> {
    let mut file: RegFile = load_config(common.config.as_deref())?;
    if let Some(m) = &a.method {
        let m: Method = m.parse()?;
        if !m.is_registration() {
            bail!("{m} is not a registration method");
        }
        file.train = m.registration_config(&file.train);
    }
    if let Some(s) = common.seed {
        file.train.rng_seed = s;
        file.data.rng_seed = s;
    }
    if let Some(n) = a.iterations {
        file.train.iterations = n;
    }
    if let Some(lr) = a.learning_rate {
        file.train.learning_rate = lr;
    }
    let ds = load_data(a.data.manifest.as_deref(), &file.data)?;
    let atlases = pick_atlases(&ds, a.data.atlases.as_deref())?;
    let k = file.max_unlabeled.unwrap_or(ds.unlabeled.len()).min(ds.unlabeled.len());
    let (net, history) = train_registration(&file.train, &file.network, &atlases, &ds.unlabeled[..k], &ds.validation)?;
    write_regnet(&net, &a.out)?;
    if let Some(h) = &a.history {
        write_json(h, &history)?;
    }
    eprintln!(
        "trained {} iterations, best checkpoint at {}, wrote {}",
        history.iterations.len(),
        history.best_iteration,
        a.out.display()
    );
    Ok(())
}

fn train_seg(common: &Common, a: &TrainSegArgs) -> Result<()> {
    let mut file: SegFile = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        file.train.rng_seed = s;
        file.data.rng_seed = s;
    }
    if let Some(n) = a.iterations {
        file.train.iterations = n;
    }
    if let Some(lr) = a.learning_rate {
        file.train.learning_rate = lr;
    }
    let ds = load_data(a.data.manifest.as_deref(), &file.data)?;
    let atlases = pick_atlases(&ds, a.data.atlases.as_deref())?;
    let (net, history) = train_segmentation(&file.train, &file.network, &atlases, &ds.validation, a.augment)?;
    write_segnet(&net, &a.out)?;
    if let Some(h) = &a.history {
        write_json(h, &history)?;
    }
    eprintln!(
        "trained {} iterations, best checkpoint at {}, wrote {}",
        history.iterations.len(),
        history.best_iteration,
        a.out.display()
    );
    Ok(())
}

/// Optional `[network]` section used to check a checkpoint's architecture.
#[derive(Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RegisterFile {
    network: Option<RegNetConfig>,
}

fn register(common: &Common, a: &RegisterArgs) -> Result<()> {
    let file: RegisterFile = load_config(common.config.as_deref())?;
    let moving = read_volume(&a.moving)?;
    let fixed = read_volume(&a.fixed)?;
    let net = match &file.network {
        Some(cfg) => read_regnet(&a.checkpoint, Some((cfg, moving.shape())))?,
        None => read_regnet(&a.checkpoint, None)?,
    };
    let field = net.forward(&moving, &fixed)?;
    write_field(&field, &a.out_field)?;
    if let Some(p) = &a.out_warped {
        write_volume(&warp_scalar(&moving, &field)?, p)?;
    }
    if let (Some(lp), Some(out)) = (&a.moving_labels, &a.out_labels) {
        let labels = read_labelmap(lp)?;
        let warped = argmax_labels(&warp_probmap(&make_one_hot(&labels)?, &field)?)?;
        write_labelmap(&warped, out)?;
    }
    eprintln!("max displacement {:.3} voxels", field.max_abs());
    Ok(())
}

fn segment_mas(common: &Common, a: &SegmentMasArgs) -> Result<()> {
    let mut fusion: FusionConfig = load_config(common.config.as_deref())?;
    if let Some(s) = common.seed {
        fusion.rng_seed = s;
    }
    if let Some(n) = a.n_augmented {
        fusion.n_augmented = n;
    }
    let ds = load_dataset(&a.manifest)?;
    let atlases = pick_atlases(&ds, a.atlases.as_deref())?;
    let target = read_volume(&a.target)?;
    let net = read_regnet(&a.checkpoint, None)?;
    let seg = mas_segment(&net, &atlases, &target, &fusion)?;
    write_labelmap(&seg, &a.out)?;
    Ok(())
}

fn experiment(common: &Common, a: &ExperimentArgs) -> Result<()> {
    let mut file: ExperimentFile = load_config(common.config.as_deref())?;
    let cfg = &mut file.experiment;
    if let Some(s) = common.seed {
        cfg.seed = s;
        file.data.rng_seed = s;
    }
    if let Some(out) = &a.out {
        cfg.output_dir = out.clone();
    }
    if let Some(m) = &a.methods {
        cfg.methods = parse_methods(m)?;
    }
    if let Some(n) = &a.n_atlases {
        cfg.n_atlases = parse_list(n)?;
    }
    if let Some(r) = a.repeats {
        cfg.n_repeats = r;
    }
    if let Some(n) = a.iterations {
        cfg.registration.iterations = n;
        cfg.segmentation.iterations = n;
    }
    let ds = load_data(a.manifest.as_deref(), &file.data)?;
    let res = run_experiment(&file.experiment, &ds)?;
    for s in &res.summary {
        println!(
            "{:<10} N={:<2} repeats={} dice={:.4} mean_sd={:.3} max_sd={:.3}",
            s.method.name(),
            s.n_atlases,
            s.repeats,
            s.mean_dice,
            s.mean_sd,
            s.max_sd
        );
    }
    eprintln!("results in {}", res.results_path.display());
    if a.plot {
        emit_plots(&res.rows, &file.experiment.output_dir.join("plots"))?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let Cli { common, command } = Cli::parse();
    match &command {
        Command::SynthData { out } => {
            let mut cfg: SyntheticPopConfig = load_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                cfg.rng_seed = s;
            }
            let ds = synth_population(&cfg)?;
            let manifest = write_dataset(&ds, out)?;
            eprintln!("wrote {}", manifest.display());
        }
        Command::TrainReg(a) => train_reg(&common, a)?,
        Command::TrainSeg(a) => train_seg(&common, a)?,
        Command::Register(a) => register(&common, a)?,
        Command::SegmentMas(a) => segment_mas(&common, a)?,
        Command::SegmentNet { checkpoint, image, out } => {
            let net = read_segnet(checkpoint, None)?;
            let seg = argmax_labels(&net.forward_full(&read_volume(image)?)?)?;
            write_labelmap(&seg, out)?;
        }
        Command::Evaluate { pred, truth, labels, out } => {
            let pred = read_labelmap(pred)?;
            let truth = read_labelmap(truth)?;
            let labels: Option<Vec<u32>> = labels.as_deref().map(parse_list).transpose()?;
            let report = evaluate(&pred, &truth, truth.spacing(), labels.as_deref())?;
            match out {
                Some(p) => write_json(p, &report)?,
                None => println!("{}", serde_json::to_string_pretty(&report)?),
            }
        }
        Command::Experiment(a) => experiment(&common, a)?,
        Command::Plot { results, out } => {
            let files = emit_plots(&read_results(results)?, out)?;
            for f in files {
                eprintln!("wrote {}", f.display());
            }
        }
    }
    Ok(())
}
