use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use pirl_core::analysis;
use pirl_core::data::{self, SynthConfig};
use pirl_core::losses::KernelConfig;
use pirl_core::models::Preset;
use pirl_core::training::{OptimizerKind, TrainingConfig};

use pirl::config::{RunConfig, Variant};
use pirl::{experiment, io, Error};

/// Participant-invariant representation learning for subject-independent
/// time-series classification.
#[derive(Parser, Debug)]
#[command(name = "pirl", version)]
struct Cli {
    /// More log output (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-subject dataset as canonical CSV
    Synth(SynthArgs),
    /// Pretrain, fine-tune and evaluate model variants over several trials
    Run(RunArgs),
    /// Write per-sample latents and their 2-D PCA projection for a checkpoint
    ExportLatents(ExportArgs),
}

fn positive(s: &str) -> Result<usize, String> {
    match s.parse::<usize>() {
        Ok(0) => Err("must be at least 1".into()),
        Ok(n) => Ok(n),
        Err(e) => Err(e.to_string()),
    }
}

fn parse_bandwidth(s: &str) -> Result<KernelConfig, String> {
    if s == "median" {
        return Ok(KernelConfig::default());
    }
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(KernelConfig::fixed(v)),
        _ => Err("expected 'median' or a positive number".into()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum SynthPreset {
    /// Generator defaults
    Default,
    /// Large subject offsets relative to noise, for subject-independent evaluation
    ShiftHeavy,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Starting point for every other setting
    #[arg(long, value_enum, default_value_t = SynthPreset::Default)]
    preset: SynthPreset,
    /// Number of subjects
    #[arg(long, value_parser = positive, default_value_t = 6)]
    subjects: usize,
    /// Samples per subject
    #[arg(long, value_parser = positive, default_value_t = 40)]
    per_subject: usize,
    /// Series length
    #[arg(long, value_parser = positive, default_value_t = 128)]
    length: usize,
    /// Cycles per window for class 0
    #[arg(long, default_value_t = 3.0)]
    freq0: f64,
    /// Cycles per window for class 1
    #[arg(long, default_value_t = 5.0)]
    freq1: f64,
    /// Subject offsets are spread evenly over [-scale, scale]
    #[arg(long, default_value_t = 1.0)]
    shift_scale: f64,
    /// Subject amplitudes are drawn from 1 + U(-j, j)
    #[arg(long, default_value_t = 0.3)]
    amplitude_jitter: f64,
    /// Standard deviation of the additive Gaussian noise
    #[arg(long, default_value_t = 0.2)]
    noise_sd: f64,
    /// Fraction of class-1 samples per subject
    #[arg(long, default_value_t = 0.5)]
    class_ratio: f64,
    /// Generator seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Canonical dataset CSV
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory
    #[arg(long, default_value = "pirl-out")]
    out: PathBuf,
    /// TOML config file; flags given on the command line override it
    #[arg(long)]
    config: Option<PathBuf>,
    /// Architecture preset
    #[arg(long, value_enum, default_value_t = PresetArg::Clas)]
    preset: PresetArg,
    /// Comma-separated variants: baseline, dann, mmd, triplet, mmd+triplet, person-specific
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "baseline,dann,mmd,triplet,mmd+triplet,person-specific"
    )]
    variants: Vec<Variant>,
    /// Comma-separated held-out subject ids (overrides --train-fraction)
    #[arg(long, value_delimiter = ',')]
    test_subjects: Vec<String>,
    /// Fraction of sorted subject ids used for training when no test subjects are named
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    /// Per-sample min-max normalization
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
    /// Trials per variant; trial t uses seed + t
    #[arg(long, value_parser = positive, default_value_t = 10)]
    trials: usize,
    /// Base seed
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Epochs for each of pretraining and fine-tuning
    #[arg(long, value_parser = positive, default_value_t = 100)]
    epochs: usize,
    /// Minibatch size (256 under the apnea preset unless given)
    #[arg(long, value_parser = positive, default_value_t = 32)]
    batch_size: usize,
    /// Learning rate
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    /// Optimizer
    #[arg(long, value_enum, default_value_t = OptimizerArg::Adam)]
    optimizer: OptimizerArg,
    /// Weight of the MMD term during pretraining
    #[arg(long, default_value_t = 0.2)]
    lambda_mmd: f64,
    /// Weight of the triplet term during fine-tuning
    #[arg(long, default_value_t = 0.2)]
    lambda_triplet: f64,
    /// Weight of the domain loss behind the gradient reversal layer
    #[arg(long, default_value_t = 1.0)]
    lambda_domain: f64,
    /// Gradient reversal scale
    #[arg(long, default_value_t = 1.0)]
    grl_scale: f64,
    /// Triplet margin
    #[arg(long, default_value_t = 1.0)]
    margin: f64,
    /// MMD kernel bandwidth: 'median' or a fixed sigma
    #[arg(long, value_parser = parse_bandwidth, default_value = "median")]
    kernel_sigma: KernelConfig,
    /// Keep the encoder fixed while fine-tuning
    #[arg(long, default_value_t = false, action = clap::ArgAction::Set)]
    freeze_encoder: bool,
    /// Trials trained concurrently (results do not depend on it)
    #[arg(long, value_parser = positive, default_value_t = 1)]
    parallel_trials: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum PresetArg {
    Clas,
    Apnea,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Clas => Preset::Clas,
            PresetArg::Apnea => Preset::Apnea,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
enum OptimizerArg {
    Adam,
    Sgd,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Checkpoint written by `run`
    #[arg(long)]
    checkpoint: PathBuf,
    /// Canonical dataset CSV
    #[arg(long)]
    data: PathBuf,
    /// Output CSV path
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated held-out subject ids (overrides --train-fraction)
    #[arg(long, value_delimiter = ',')]
    test_subjects: Vec<String>,
    /// Fraction of sorted subject ids tagged as training rows
    #[arg(long, default_value_t = 0.7)]
    train_fraction: f64,
    /// Per-sample min-max normalization
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    normalize: bool,
}

fn given(m: &ArgMatches, id: &str) -> bool {
    m.value_source(id) == Some(ValueSource::CommandLine)
}

fn synth(args: &SynthArgs, m: &ArgMatches) -> Result<(), Error> {
    let mut cfg = match args.preset {
        SynthPreset::Default => SynthConfig::default(),
        SynthPreset::ShiftHeavy => SynthConfig::shift_heavy(),
    };
    let preset_default = args.preset == SynthPreset::Default;
    let set = |id: &str, apply: &mut dyn FnMut()| {
        if preset_default || given(m, id) {
            apply();
        }
    };
    set("subjects", &mut || cfg.n_subjects = args.subjects);
    set("per_subject", &mut || cfg.samples_per_subject = args.per_subject);
    set("length", &mut || cfg.length = args.length);
    set("freq0", &mut || cfg.class_freqs.0 = args.freq0);
    set("freq1", &mut || cfg.class_freqs.1 = args.freq1);
    set("shift_scale", &mut || cfg.subject_shift_scale = args.shift_scale);
    set("amplitude_jitter", &mut || cfg.amplitude_jitter = args.amplitude_jitter);
    set("noise_sd", &mut || cfg.noise_sd = args.noise_sd);
    set("class_ratio", &mut || cfg.class_ratio = args.class_ratio);
    set("seed", &mut || cfg.seed = args.seed);
    let dataset = data::synth_generate(&cfg)?;
    io::write_dataset(&args.out, &dataset)?;
    println!(
        "wrote {} samples of length {} to {}",
        dataset.len(),
        cfg.length,
        args.out.display()
    );
    println!("{:<8} {:<10} {:>5} {:>7}", "split", "subject", "label", "samples");
    for ((split, label, subject), n) in dataset.manifest() {
        println!("{:<8} {:<10} {:>5} {:>7}", split.name(), subject, label, n);
    }
    Ok(())
}

fn run_config(args: &RunArgs, m: &ArgMatches) -> Result<RunConfig, Error> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let batch_before = cfg.training.batch_size;
    let preset_before = cfg.preset;
    if let Some(d) = &args.data {
        cfg.data = d.display().to_string();
    }
    if given(m, "out") || args.config.is_none() {
        cfg.output = args.out.display().to_string();
    }
    let file = args.config.is_some();
    let t = &mut cfg.training;
    macro_rules! apply {
        ($id:literal, $field:expr, $value:expr) => {
            if !file || given(m, $id) {
                $field = $value;
            }
        };
    }
    apply!("preset", cfg.preset, args.preset.into());
    apply!("variants", cfg.variants, args.variants.clone());
    apply!("test_subjects", cfg.test_subjects, args.test_subjects.clone());
    apply!("train_fraction", cfg.train_fraction, args.train_fraction);
    apply!("normalize", cfg.normalize, args.normalize);
    apply!("parallel_trials", cfg.parallel_trials, args.parallel_trials);
    apply!("trials", t.trials, args.trials);
    apply!("seed", t.seed, args.seed);
    apply!("epochs", t.epochs, args.epochs);
    apply!("lr", t.learning_rate, args.lr);
    apply!(
        "optimizer",
        t.optimizer,
        match args.optimizer {
            OptimizerArg::Adam => OptimizerKind::Adam,
            OptimizerArg::Sgd => OptimizerKind::Sgd,
        }
    );
    apply!("lambda_mmd", t.lambda_mmd, args.lambda_mmd);
    apply!("lambda_triplet", t.lambda_triplet, args.lambda_triplet);
    apply!("lambda_domain", t.lambda_domain, args.lambda_domain);
    apply!("grl_scale", t.grl_scale, args.grl_scale);
    apply!("margin", t.triplet_margin, args.margin);
    apply!("kernel_sigma", t.kernel, args.kernel_sigma);
    apply!("freeze_encoder", t.freeze_encoder, args.freeze_encoder);
    if given(m, "batch_size") {
        t.batch_size = args.batch_size;
    } else if !file
        || (cfg.preset != preset_before && batch_before == TrainingConfig::for_preset(preset_before).batch_size)
    {
        t.batch_size = TrainingConfig::for_preset(cfg.preset).batch_size;
    }
    if cfg.data.is_empty() {
        return Err(Error::Config(
            "no dataset: pass --data or set `data` in the config file".into(),
        ));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs, m: &ArgMatches) -> Result<(), Error> {
    let cfg = run_config(args, m)?;
    let dataset = io::read_dataset(Path::new(&cfg.data))?;
    let started = Instant::now();
    let exp = experiment::run(&cfg, &dataset)?;
    let out = Path::new(&cfg.output);
    experiment::write_outputs(out, &cfg, &exp)?;
    print!("{}", exp.report.to_text());
    eprintln!(
        "finished in {:.1} s; outputs in {}",
        started.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn export_latents(args: &ExportArgs) -> Result<(), Error> {
    let params = io::read_checkpoint(&args.checkpoint)?;
    let dataset = io::read_dataset(&args.data)?;
    let len = dataset.series_len().unwrap_or(0);
    if len != params.spec.input_len {
        return Err(Error::Mismatch {
            path: args.checkpoint.clone(),
            expected: format!("series of length {}", params.spec.input_len),
            found: format!("dataset {} has length {len}", args.data.display()),
        });
    }
    let cfg = RunConfig {
        test_subjects: args.test_subjects.clone(),
        train_fraction: args.train_fraction,
        normalize: args.normalize,
        ..RunConfig::default()
    };
    let (train, test) = experiment::prepare(&cfg, &dataset)?;
    let tagged = train.concat(&test);
    let dump = analysis::export_latents(&params, &tagged)?;
    io::write_file(&args.out, io::latent_dump_csv(&dump).as_bytes())?;
    let (z, subjects) = dump.matrix()?;
    let disp = analysis::subject_dispersion(&z, &subjects)?;
    let evr = dump.explained_variance_ratio;
    println!("wrote {} rows to {}", dump.rows.len(), args.out.display());
    println!("explained variance: pc1 {:.4}, pc2 {:.4}", evr[0], evr[1]);
    println!(
        "heterogeneity score: {:.6} (between-subject {:.6}, within-subject {:.6})",
        disp.score, disp.between, disp.within
    );
    Ok(())
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .init();
    let (_, sub) = matches.subcommand().expect("subcommand is required");
    let result = match &cli.command {
        Command::Synth(args) => synth(args, sub),
        Command::Run(args) => run(args, sub),
        Command::ExportLatents(args) => export_latents(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
