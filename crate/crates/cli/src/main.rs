use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use twostep::orchestrator::{cost_report, Method};
use twostep::selection::StrategyKind;
use twostep::study::{run_study, Study, StudyConfig};
use twostep::summary::{compare_reports, read_run, write_comparison_csv, write_run, RunDocument};
use twostep::models::PriorKind;

/// Propagates first-step uncertainty (imputations, surrogate parameter
/// draws) into second-step posteriors.
#[derive(Parser)]
#[command(name = "twostep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Runs one study configuration and writes its artifacts.
    Run(Box<RunArgs>),
    /// Compares the posterior summaries of two run directories.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// Comparison CSV; printed to stdout when absent.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_parser = parse_enum::<Study>)]
    study: Option<Study>,
    #[arg(long, value_parser = parse_enum::<Method>)]
    method: Option<Method>,
    #[arg(long, value_parser = parse_enum::<StrategyKind>)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    m: Option<usize>,
    /// Draws per target; must be a multiple of the chain count.
    #[arg(long = "S", alias = "draws")]
    s: Option<usize>,
    #[arg(long)]
    chains: Option<usize>,
    #[arg(long)]
    warmup: Option<usize>,
    /// Seed for data, imputation and selection.
    #[arg(long)]
    seed: Option<u64>,
    /// Seed for the second-step sampler.
    #[arg(long)]
    hmc_seed: Option<u64>,
    #[arg(long, value_parser = parse_enum::<PriorKind>)]
    prior_kind: Option<PriorKind>,
    #[arg(long)]
    pi: Option<f64>,
    #[arg(long = "N", alias = "rows")]
    n: Option<usize>,
    #[arg(long)]
    p: Option<usize>,
    #[arg(long)]
    n_mix: Option<usize>,
    #[arg(long)]
    pce_degree: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// A brute-force run directory; adds `cost.json` and `comparison.csv`.
    #[arg(long)]
    baseline: Option<PathBuf>,
    #[arg(long)]
    output: PathBuf,
}

fn parse_enum<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown value {s:?}"))
}

enum Failure {
    Config(anyhow::Error),
    Runtime(anyhow::Error),
}

fn build_config(args: &RunArgs) -> anyhow::Result<StudyConfig> {
    let mut cfg: StudyConfig = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => StudyConfig::default(),
    };
    macro_rules! set {
        ($field:ident) => {
            if let Some(v) = args.$field.clone() {
                cfg.$field = v;
            }
        };
    }
    set!(study);
    set!(method);
    set!(strategy);
    set!(m);
    set!(seed);
    set!(prior_kind);
    set!(pi);
    set!(n);
    set!(p);
    set!(n_mix);
    set!(pce_degree);
    if let Some(v) = &args.manifest {
        cfg.manifest = Some(v.clone());
    }
    if let Some(c) = args.chains {
        cfg.hmc.n_chains = c;
    }
    if let Some(w) = args.warmup {
        cfg.hmc.n_warmup = w;
    }
    if let Some(seed) = args.hmc_seed {
        cfg.hmc.seed = seed;
    }
    if let Some(s) = args.s {
        let chains = cfg.hmc.n_chains;
        if chains == 0 || s == 0 || s % chains != 0 {
            bail!("S = {s} is not a positive multiple of the chain count {chains}");
        }
        cfg.hmc.n_sampling = s / chains;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: RunArgs) -> Result<(), Failure> {
    let cfg = build_config(&args).map_err(Failure::Config)?;
    let baseline = match &args.baseline {
        Some(dir) => Some(read_run(dir).with_context(|| format!("reading baseline {}", dir.display())).map_err(Failure::Config)?),
        None => None,
    };
    let config_value = serde_json::to_value(&cfg).map_err(|e| Failure::Runtime(e.into()))?;
    let start = Instant::now();
    let report = match run_study(&cfg) {
        Ok(r) => r,
        Err(twostep::Error::Orchestration { message, partial, .. }) => {
            if let Some(p) = partial {
                let doc = RunDocument {
                    config: config_value,
                    report: *p,
                    elapsed_secs: start.elapsed().as_secs_f64(),
                };
                // The partial report is best effort; the orchestration error is what matters.
                let _ = write_run(&args.output, &doc);
            }
            return Err(Failure::Runtime(anyhow!("{message}")));
        }
        Err(e) => return Err(Failure::Runtime(e.into())),
    };
    let doc = RunDocument {
        config: config_value,
        report,
        elapsed_secs: start.elapsed().as_secs_f64(),
    };
    write_run(&args.output, &doc).map_err(|e| Failure::Runtime(e.into()))?;
    if let Some(base) = baseline {
        let cost = cost_report(&doc.report, &base.report.totals).map_err(|e| Failure::Runtime(e.into()))?;
        std::fs::write(
            args.output.join("cost.json"),
            serde_json::to_string_pretty(&cost).map_err(|e| Failure::Runtime(e.into()))?,
        )
        .map_err(|e| Failure::Runtime(e.into()))?;
        let rows = compare_reports(&base.report, &doc.report).map_err(|e| Failure::Runtime(e.into()))?;
        write_comparison_csv(&rows, &args.output.join("comparison.csv")).map_err(|e| Failure::Runtime(e.into()))?;
    }
    let routes: std::collections::BTreeMap<String, usize> = doc
        .report
        .route_counts()
        .into_iter()
        .map(|(r, n)| (serde_json::to_value(r).unwrap_or_default().as_str().unwrap_or("?").to_string(), n))
        .collect();
    println!(
        "{}",
        serde_json::json!({
            "study": cfg.study,
            "method": cfg.method,
            "m": doc.report.m,
            "n_mcmc_runs": doc.report.n_mcmc_runs,
            "routes": routes,
            "elapsed_secs": doc.elapsed_secs,
            "output": args.output,
        })
    );
    Ok(())
}

fn compare(a: &Path, b: &Path, output: Option<PathBuf>) -> Result<(), Failure> {
    let ra = read_run(a).with_context(|| format!("reading {}", a.display())).map_err(Failure::Config)?;
    let rb = read_run(b).with_context(|| format!("reading {}", b.display())).map_err(Failure::Config)?;
    let rows = compare_reports(&ra.report, &rb.report).map_err(|e| Failure::Config(e.into()))?;
    match output {
        Some(path) => write_comparison_csv(&rows, &path).map_err(|e| Failure::Runtime(e.into()))?,
        None => {
            println!("scope,d_mean,d_sd,d_q05,d_q95");
            for r in rows {
                println!("{},{},{},{},{}", r.scope, r.d_mean, r.d_sd, r.d_q05, r.d_q95);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Run(args) => run(*args),
        Command::Compare { a, b, output } => compare(&a, &b, output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("configuration error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
