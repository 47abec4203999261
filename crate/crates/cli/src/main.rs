mod input;
mod report;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use bartvs::sampler::{DartSettings, SamplerConfig};
use bartvs::selection::{
    self, AbcConfig, PermImportance,
};
use bartvs::simbench::{self, Method, ScenarioId, ScenarioSpec};

#[derive(Parser)]
#[command(name = "bartvs", version, about = "BART fitting, variable selection, and benchmarks")]
struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a BART model to a CSV dataset and write importance reports.
    Fit(FitArgs),
    /// Run a variable-selection method on a CSV dataset.
    Select(SelectArgs),
    /// Run replicated benchmarks on a synthetic scenario.
    Bench(BenchArgs),
}

#[derive(Args)]
struct SamplerArgs {
    /// Number of trees.
    #[arg(long)]
    trees: Option<usize>,
    /// Burn-in iterations.
    #[arg(long, default_value_t = 1000)]
    burn: usize,
    /// Kept draws.
    #[arg(long, default_value_t = 1000)]
    keep: usize,
    /// Keep every t-th post-burn-in draw.
    #[arg(long, default_value_t = 1)]
    thin: usize,
    /// Cutpoints per continuous predictor.
    #[arg(long, default_value_t = 100)]
    cutpoints: usize,
    /// Master seed; all randomness derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SamplerArgs {
    fn config(&self, default_trees: usize) -> SamplerConfig {
        SamplerConfig {
            n_trees: self.trees.unwrap_or(default_trees),
            n_burn: self.burn,
            n_keep: self.keep,
            thin: self.thin,
            n_cutpoints: self.cutpoints,
            seed: self.seed,
            ..SamplerConfig::default()
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Input CSV with a header row.
    data: PathBuf,
    /// Response column name.
    #[arg(long)]
    response: String,
    /// Per-column type overrides, e.g. "x3=binary,x7=continuous".
    #[arg(long)]
    types: Option<String>,
    /// Use the sparse Dirichlet split-variable prior.
    #[arg(long)]
    dart: bool,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Output path (stdout if omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Output format.
    #[arg(long, default_value = "json")]
    format: String,
}

#[derive(Args)]
struct SelectArgs {
    /// Input CSV with a header row.
    data: PathBuf,
    /// Response column name.
    #[arg(long)]
    response: String,
    /// Per-column type overrides, e.g. "x3=binary,x7=continuous".
    #[arg(long)]
    types: Option<String>,
    /// permute-vip | permute-wtvip | permute-mi | backward | dart | abc.
    #[arg(long)]
    method: String,
    /// Null permutations (permute methods).
    #[arg(long, default_value_t = 100)]
    permutations: usize,
    /// Repeated fits on the original data (permute methods).
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    /// Selection level for the permutation threshold.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Training fraction (backward and abc splits).
    #[arg(long)]
    split: Option<f64>,
    /// Inclusion threshold (dart and abc).
    #[arg(long)]
    threshold: Option<f64>,
    /// ABC iterations.
    #[arg(long, default_value_t = 1000)]
    abc_samples: usize,
    /// Fraction of best ABC samples kept.
    #[arg(long, default_value_t = 0.1)]
    keep_frac: f64,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Output path (stdout if omitted).
    #[arg(long)]
    output: Option<PathBuf>,
    /// Output format.
    #[arg(long, default_value = "json")]
    format: String,
}

#[derive(Args)]
struct BenchArgs {
    /// Scenario id: CC1 CC2 CM1 CM2 BC1 BC2 BM1 BM2 EX1 EX2.
    #[arg(long)]
    scenario: String,
    /// Observations per replication.
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Number of predictors (fixed by some scenarios).
    #[arg(long)]
    p: Option<usize>,
    /// Error variance for continuous-response scenarios.
    #[arg(long, default_value_t = 1.0)]
    sigma2: f64,
    /// Replications.
    #[arg(long, default_value_t = 10)]
    reps: usize,
    /// Comma-separated methods, e.g.
    /// "permute-vip,permute-mi,backward,dart-200,abc-10-0.50".
    #[arg(long)]
    methods: String,
    /// Null permutations for the permute methods.
    #[arg(long, default_value_t = 100)]
    permutations: usize,
    /// Repeated fits for the permute methods.
    #[arg(long, default_value_t = 10)]
    repetitions: usize,
    /// Selection level for the permutation threshold.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    #[command(flatten)]
    sampler: SamplerArgs,
    /// Directory for the result files.
    #[arg(long, default_value = ".")]
    output_dir: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if cli.threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
            .ok();
    }
    let run = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Select(args) => cmd_select(args),
        Command::Bench(args) => cmd_bench(args),
    };
    if let Err(err) = run {
        let obj = serde_json::json!({ "error": { "message": format!("{err:#}") } });
        eprintln!("{obj}");
        std::process::exit(1);
    }
}

fn cmd_fit(args: FitArgs) -> Result<()> {
    let data = input::load_csv(&args.data, &args.response, args.types.as_deref())?;
    let mut cfg = args.sampler.config(200);
    if args.dart {
        cfg.dart = Some(DartSettings::default());
    }
    let rendered = report::fit_report(&data, &cfg)?;
    report::write_output(&rendered, &args.format, args.output.as_deref())
}

fn cmd_select(args: SelectArgs) -> Result<()> {
    let data = input::load_csv(&args.data, &args.response, args.types.as_deref())?;
    let seed = args.sampler.seed;
    let report = match args.method.as_str() {
        "permute-vip" | "permute-wtvip" | "permute-mi" => {
            let kind = match args.method.as_str() {
                "permute-vip" => PermImportance::Vip,
                "permute-wtvip" => PermImportance::WithinTypeVip,
                _ => PermImportance::Mi,
            };
            let sampler = args.sampler.config(20);
            selection::permutation_select(
                &data,
                kind,
                args.permutations,
                args.repetitions,
                args.alpha,
                &sampler,
                seed,
            )?
        }
        "backward" => {
            let sampler = args.sampler.config(50);
            selection::backward_select(&data, args.split.unwrap_or(0.8), &sampler, seed)?
        }
        "dart" => {
            let sampler = args.sampler.config(20);
            selection::dart_select(&data, args.threshold.unwrap_or(0.5), &sampler, seed)?
        }
        "abc" => {
            let mut sampler = args.sampler.config(10);
            sampler.n_burn = 200;
            sampler.n_keep = 1;
            if args.sampler.trees.is_none() {
                sampler.n_trees = 10;
            }
            let cfg = AbcConfig {
                n_samples: args.abc_samples,
                keep_frac: args.keep_frac,
                train_frac: args.split.unwrap_or(0.5),
                threshold: args.threshold.unwrap_or(0.5),
                sampler,
                ..AbcConfig::default()
            };
            selection::abc_forest_select(&data, &cfg, seed)?
        }
        other => bail!("unknown method '{other}'"),
    };
    let rendered = report::select_report(&report)?;
    report::write_output(&rendered, &args.format, args.output.as_deref())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let id = ScenarioId::parse(&args.scenario).context("parsing scenario id")?;
    let p = args.p.or(id.fixed_p()).context("scenario needs --p")?;
    let spec = ScenarioSpec::new(id, args.n, p, args.sigma2)?;
    let sampler_base = args.sampler.config(20);
    let methods = parse_methods(
        &args.methods,
        &sampler_base,
        args.permutations,
        args.repetitions,
        args.alpha,
    )?;
    let result = simbench::run_benchmark(&spec, &methods, args.reps, args.sampler.seed)?;
    report::write_bench(&result, &args.output_dir)
}

fn parse_methods(
    spec: &str,
    base: &SamplerConfig,
    n_null: usize,
    n_rep: usize,
    alpha: f64,
) -> Result<Vec<Method>> {
    let mut methods = Vec::new();
    for raw in spec.split(',') {
        let name = raw.trim();
        if name.is_empty() {
            continue;
        }
        let method = if let Some(kind) = match name {
            "permute-vip" => Some(PermImportance::Vip),
            "permute-wtvip" => Some(PermImportance::WithinTypeVip),
            "permute-mi" => Some(PermImportance::Mi),
            _ => None,
        } {
            Method::Permute {
                kind,
                n_null,
                n_rep,
                alpha,
                sampler: with_trees(base, base.n_trees),
            }
        } else if name == "backward" {
            Method::Backward {
                train_frac: 0.8,
                sampler: with_trees(base, 50),
            }
        } else if let Some(rest) = name.strip_prefix("dart") {
            let trees = parse_suffix_number(rest)?.unwrap_or(20);
            Method::Dart {
                threshold: 0.5,
                sampler: with_trees(base, trees),
            }
        } else if let Some(rest) = name.strip_prefix("abc") {
            let (trees, threshold) = parse_abc_suffix(rest)?;
            let mut sampler = with_trees(base, trees.unwrap_or(10));
            sampler.n_burn = 200;
            sampler.n_keep = 1;
            Method::Abc(AbcConfig {
                threshold: threshold.unwrap_or(0.5),
                sampler,
                ..AbcConfig::default()
            })
        } else {
            bail!("unknown method '{name}'");
        };
        methods.push(method);
    }
    if methods.is_empty() {
        bail!("no methods given");
    }
    Ok(methods)
}

fn with_trees(base: &SamplerConfig, trees: usize) -> SamplerConfig {
    SamplerConfig {
        n_trees: trees,
        ..base.clone()
    }
}

/// "-200" -> Some(200); "" -> None.
fn parse_suffix_number(rest: &str) -> Result<Option<usize>> {
    if rest.is_empty() {
        return Ok(None);
    }
    let digits = rest
        .strip_prefix('-')
        .context("method suffix must look like '-200'")?;
    Ok(Some(digits.parse().context("parsing tree count suffix")?))
}

/// "-10-0.50" -> (Some(10), Some(0.5)); "-10" -> (Some(10), None); "" -> none.
fn parse_abc_suffix(rest: &str) -> Result<(Option<usize>, Option<f64>)> {
    if rest.is_empty() {
        return Ok((None, None));
    }
    let body = rest
        .strip_prefix('-')
        .context("abc suffix must look like '-10-0.50'")?;
    match body.split_once('-') {
        None => Ok((Some(body.parse().context("parsing abc tree count")?), None)),
        Some((trees, thr)) => Ok((
            Some(trees.parse().context("parsing abc tree count")?),
            Some(thr.parse().context("parsing abc threshold")?),
        )),
    }
}
