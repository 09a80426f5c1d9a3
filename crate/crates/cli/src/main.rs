use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use drm_core::analysis::{
    confidence_region_check, gap_table, landscape_histogram, quantile, rate_study, sup_gaps, ConfidenceStudy,
    DirectionSet, GammaMode, Interval, RateStudy, DEFAULT_POINTS_PER_UNIT,
};
use drm_core::experiment::{make_data, run_label_noise_experiment, ExperimentConfig};
use drm_core::losses::{FairCoin, ReciprocalLoss, TentLoss};
use drm_core::mlp::{Mlp, MlpSpec};
use drm_core::output::{csv_string, fmt_f64, write_file};
use drm_core::{DrmError, LossModel, NormKind, ParamVector};

#[derive(Parser)]
#[command(name = "drm", version, about = "Diametrical risk minimization experiments")]
struct Cli {
    /// Seed for every random stream of the command.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long, global = true, default_value = "drm-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train SGD-ERM and SGD-DRM on noisy blobs and compare them.
    Run(RunArgs),
    /// Monte-Carlo quantiles of the sup generalization gap over m.
    Rate(RateArgs),
    /// Pass rate of the two confidence-region excess conditions.
    Confidence(ConfidenceArgs),
    /// Histogram of the empirical risk on a sphere around a checkpoint.
    Landscape(LandscapeArgs),
    /// ERM vs DRM generalization gaps on the scalar examples.
    Examples(ExamplesArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Experiment config (JSON). Without it the built-in default is used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Keep the seeds from the config instead of overriding them with --seed.
    #[arg(long)]
    keep_seeds: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossKind {
    Tent,
    Reciprocal,
}

#[derive(Args, Clone)]
struct ScalarArgs {
    #[arg(long, value_enum, default_value = "tent")]
    loss: LossKind,
    #[arg(long, default_value_t = 2.0)]
    kappa: f64,
    #[arg(long, default_value_t = 0.5)]
    gamma_loss: f64,
    /// Diametrical radius; defaults to 0.5.
    #[arg(long)]
    gamma: Option<f64>,
    /// Lower end of W (default: -1 for tent, gamma for reciprocal).
    #[arg(long, allow_hyphen_values = true)]
    lo: Option<f64>,
    /// Upper end of W (default: 1 for tent, 2 for reciprocal).
    #[arg(long, allow_hyphen_values = true)]
    hi: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_POINTS_PER_UNIT)]
    points_per_unit: usize,
}

enum Scalar {
    Tent(TentLoss),
    Reciprocal(ReciprocalLoss),
}

impl ScalarArgs {
    fn gamma(&self) -> f64 {
        self.gamma.unwrap_or(0.5)
    }

    fn model(&self) -> drm_core::Result<Scalar> {
        Ok(match self.loss {
            LossKind::Tent => Scalar::Tent(TentLoss::new(self.kappa, self.gamma_loss)?),
            LossKind::Reciprocal => Scalar::Reciprocal(ReciprocalLoss::new()),
        })
    }

    fn interval(&self) -> drm_core::Result<Interval> {
        let (lo, hi) = match self.loss {
            LossKind::Tent => (-1.0, 1.0),
            LossKind::Reciprocal => (self.gamma(), 2.0),
        };
        Interval::new(self.lo.unwrap_or(lo), self.hi.unwrap_or(hi))
    }
}

impl Scalar {
    fn as_model(&self) -> &dyn LossModel {
        match self {
            Scalar::Tent(t) => t,
            Scalar::Reciprocal(r) => r,
        }
    }
}

#[derive(Args)]
struct RateArgs {
    #[command(flatten)]
    scalar: ScalarArgs,
    #[arg(long, value_delimiter = ',', default_value = "250,1000,4000,16000")]
    m: Vec<usize>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Use gamma = c / m instead of a fixed radius.
    #[arg(long)]
    inverse_m: Option<f64>,
}

#[derive(Args)]
struct ConfidenceArgs {
    #[command(flatten)]
    scalar: ScalarArgs,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    delta: f64,
    #[arg(long, default_value_t = 1000)]
    m: usize,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Slack values; by default a sweep around the 95% sup-gap quantile.
    #[arg(long, value_delimiter = ',')]
    epsilons: Vec<f64>,
}

#[derive(Args)]
struct LandscapeArgs {
    /// Parameter checkpoint (JSON).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Experiment config providing the training data (default config otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5.0)]
    gamma: f64,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long, value_enum, default_value = "layerwise")]
    norm: NormArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum NormArg {
    Euclidean,
    Sup,
    Layerwise,
}

impl From<NormArg> for NormKind {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::Euclidean => NormKind::Euclidean,
            NormArg::Sup => NormKind::Sup,
            NormArg::Layerwise => NormKind::LayerwiseFrobenius,
        }
    }
}

#[derive(Args)]
struct ExamplesArgs {
    #[command(flatten)]
    scalar: ScalarArgs,
    #[arg(long, default_value_t = 1000)]
    m: usize,
    #[arg(long, default_value_t = 200)]
    trials: usize,
    /// Also write examples.csv to the output directory.
    #[arg(long)]
    save: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    if let Some(n) = std::env::var("DRM_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_config_error() { 2 } else { 1 })
        }
    }
}

fn dispatch(cli: &Cli) -> drm_core::Result<()> {
    match &cli.command {
        Command::Run(a) => run(cli, a),
        Command::Rate(a) => rate(cli, a),
        Command::Confidence(a) => confidence(cli, a),
        Command::Landscape(a) => landscape(cli, a),
        Command::Examples(a) => examples(cli, a),
    }
}

fn load_config(path: Option<&Path>) -> drm_core::Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(p),
        None => Ok(ExperimentConfig::label_noise_default()),
    }
}

fn run(cli: &Cli, a: &RunArgs) -> drm_core::Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if !a.keep_seeds {
        cfg = cfg.with_seed(cli.seed);
    }
    let outcome = run_label_noise_experiment(&cfg)?;
    outcome.write(&cfg, &cli.out)?;
    let s = &outcome.summary;
    println!("method  train_risk  test_acc  peak_test_acc  neighborhood_gap");
    for (name, m, gap) in [("erm", &s.erm, s.flatness.erm.gap), ("drm", &s.drm, s.flatness.drm.gap)] {
        println!(
            "{name:<6}  {:>10.4}  {:>8.4}  {:>13.4}  {:>16.4}",
            m.final_train_risk, m.final_test_acc, m.peak_test_acc, gap
        );
    }
    println!("artifacts written to {}", cli.out.display());
    Ok(())
}

fn rate(cli: &Cli, a: &RateArgs) -> drm_core::Result<()> {
    let scalar = a.scalar.model()?;
    let study = RateStudy {
        w_set: a.scalar.interval()?,
        gamma: match a.inverse_m {
            Some(c) => GammaMode::InverseM(c),
            None => GammaMode::Fixed(a.scalar.gamma()),
        },
        m_list: a.m.clone(),
        trials: a.trials,
        alpha: a.alpha,
        points_per_unit: a.scalar.points_per_unit,
        seed: cli.seed,
    };
    let res = rate_study(scalar.as_model(), &FairCoin, &study)?;
    let path = cli.out.join("rate.csv");
    write_file(&path, res.to_csv()?)?;
    println!("{:>8}  {:>12}  {:>12}  {:>12}", "m", "q05", "q50", "q95");
    for r in &res.records {
        println!("{:>8}  {:>12.4e}  {:>12.4e}  {:>12.4e}", r.m, r.q05, r.q50, r.q95);
    }
    match res.slope {
        Some(s) => println!("log-log slope of the {:.0}% quantile: {s:.4}", 100.0 * (1.0 - a.alpha)),
        None => println!("no positive quantiles: the gap never exceeded zero"),
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn confidence(cli: &Cli, a: &ConfidenceArgs) -> drm_core::Result<()> {
    let scalar = a.scalar.model()?;
    let model = scalar.as_model();
    let w_set = a.scalar.interval()?;
    let gamma = a.scalar.gamma();
    let ppu = a.scalar.points_per_unit;
    let epsilons = if a.epsilons.is_empty() {
        let mut gaps = sup_gaps(model, &FairCoin, w_set, gamma, a.m, a.trials.max(30), ppu, cli.seed ^ 0x5eed)?;
        gaps.sort_by(f64::total_cmp);
        let q = quantile(&gaps, 0.95).max(0.0);
        let base = if q > 0.0 { q } else { 1.0 / a.m as f64 };
        (0..=8).map(|k| base * k as f64 / 4.0).collect()
    } else {
        a.epsilons.clone()
    };
    let study = ConfidenceStudy {
        w_set,
        gamma,
        delta: a.delta,
        m: a.m,
        trials: a.trials,
        points_per_unit: ppu,
        seed: cli.seed,
        epsilons,
    };
    let res = confidence_region_check(model, &FairCoin, &study)?;
    let path = cli.out.join("confidence.csv");
    write_file(&path, res.to_csv()?)?;
    println!("{:>12}  {:>9}  {:>10}  {:>11}", "epsilon", "pass_rate", "level_only", "argmin_only");
    for p in &res.points {
        println!(
            "{:>12.4e}  {:>9.3}  {:>10.3}  {:>11.3}",
            p.epsilon, p.pass_rate, p.level_pass_rate, p.argmin_pass_rate
        );
    }
    if res.empty_level_sets > 0 {
        println!("empty right-hand level sets: {}", res.empty_level_sets);
    }
    println!("wrote {}", path.display());
    Ok(())
}

fn landscape(cli: &Cli, a: &LandscapeArgs) -> drm_core::Result<()> {
    let w = ParamVector::load(&a.checkpoint)?;
    let cfg = load_config(a.config.as_deref())?;
    let spec = MlpSpec::from_params(&w, cfg.model.seed)?;
    if spec.input_dim != cfg.dataset.input_dim || spec.num_classes != cfg.dataset.num_classes {
        return Err(DrmError::InvalidConfig(
            "checkpoint does not match the dataset's input_dim/num_classes".into(),
        ));
    }
    let (train, _) = make_data(&cfg.dataset)?;
    let model = Mlp::new(spec)?;
    let dirs = DirectionSet::new(cli.seed, a.n, a.gamma, a.norm.into());
    let hist = landscape_histogram(&model, &w, &train.samples, &dirs, a.bins)?;
    let path = cli.out.join("hist.csv");
    write_file(&path, hist.to_csv()?)?;
    println!("reference risk {:.6}", hist.reference);
    println!("max neighborhood risk {:.6}", hist.max_value());
    println!("wrote {} ({} values)", path.display(), hist.values.len());
    Ok(())
}

fn examples(cli: &Cli, a: &ExamplesArgs) -> drm_core::Result<()> {
    let scalar = a.scalar.model()?;
    let rows = gap_table(
        scalar.as_model(),
        &FairCoin,
        a.scalar.interval()?,
        a.scalar.gamma(),
        a.m,
        a.trials,
        a.scalar.points_per_unit,
        cli.seed,
    )?;
    println!("{:>5}  {:>5}  {:>10}  {:>12}  {:>10}  {:>12}", "trial", "rho", "erm_w", "erm_gap", "drm_w", "drm_gap");
    for r in &rows {
        println!(
            "{:>5}  {:>5}  {:>10.5}  {:>12.5e}  {:>10.5}  {:>12.5e}",
            r.trial, r.rho, r.erm_w, r.erm_gap, r.drm_w, r.drm_gap
        );
    }
    let n = rows.len() as f64;
    let erm_pos = rows.iter().filter(|r| r.erm_gap > 0.0).count() as f64;
    let drm_max = rows.iter().map(|r| r.drm_gap).fold(f64::NEG_INFINITY, f64::max);
    println!("ERM gap > 0 in {:.1}% of trials", 100.0 * erm_pos / n);
    println!("largest DRM gap {drm_max:.5e}");
    if a.save {
        let path = cli.out.join("examples.csv");
        let csv = csv_string(
            &["trial", "rho", "erm_w", "erm_gap", "drm_w", "drm_gap"],
            rows.iter().map(|r| {
                vec![
                    r.trial.to_string(),
                    r.rho.to_string(),
                    fmt_f64(r.erm_w),
                    fmt_f64(r.erm_gap),
                    fmt_f64(r.drm_w),
                    fmt_f64(r.drm_gap),
                ]
            }),
        )?;
        write_file(&path, csv)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
