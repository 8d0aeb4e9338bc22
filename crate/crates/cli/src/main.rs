use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use fldp::accountant::{self, ConversionRule};
use fldp::config::{parse_config, parse_population_str};
use fldp::data_synth::{generate_population, iid_shuffle, partition_stats};
use fldp::dp_mechanism::{convert_noise, sensitivity, SigmaKind};
use fldp::fed_engine::RunOptions;
use fldp::telemetry::{read_metrics, simulate_to_dir, summarize, write_summary};
use fldp::{Error, Result};

/// Federated learning with user-level DP: simulator and privacy accountant.
///
/// Log verbosity is read from FLDP_LOG (error, warn, info, debug, trace).
#[derive(Parser)]
#[command(name = "fldp", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a federated simulation described by a TOML config.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Client worker threads (0 = all cores, 1 = inline). Never changes results.
        #[arg(long, default_value_t = 0)]
        threads: usize,
    },
    /// (ε, δ) of the subsampled Gaussian mechanism composed over T steps.
    Accountant(AccountantArgs),
    /// Convert a noise std between the client, avg and sum parametrizations.
    ConvertNoise {
        #[arg(long)]
        sigma: f64,
        #[arg(long, value_parser = parse_kind)]
        from: SigmaKind,
        /// Target kind; all three are printed when omitted.
        #[arg(long, value_parser = parse_kind)]
        to: Option<SigmaKind>,
        /// Cohort size L.
        #[arg(long)]
        cohort: f64,
    },
    /// Table of examples-per-client statistics for a population.
    PartitionStats {
        /// Run config or bare population TOML.
        #[arg(long)]
        config: PathBuf,
        /// Report the IID reshuffle of the population instead.
        #[arg(long)]
        iid_shuffle: bool,
        /// Also write the JSON to this file.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Pool per-layer delta statistics of a metrics.jsonl into CSV and JSON.
    Summarize {
        #[arg(long)]
        metrics: PathBuf,
        /// Directory for summary.csv and summary.json.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct AccountantArgs {
    /// Noise multiplier z; alternatively give --sigma, --clip and --population.
    #[arg(long, conflicts_with_all = ["sigma", "clip", "population"])]
    z: Option<f64>,
    #[arg(long, requires_all = ["clip", "population"])]
    sigma: Option<f64>,
    #[arg(long, value_parser = parse_kind, default_value = "avg")]
    sigma_kind: SigmaKind,
    #[arg(long)]
    clip: Option<f64>,
    /// Population size N.
    #[arg(long)]
    population: Option<f64>,
    /// Cohort size L for converting --sigma-kind; defaults to qN.
    #[arg(long)]
    cohort: Option<f64>,
    /// Sampling rate q.
    #[arg(long)]
    q: f64,
    /// Central steps T.
    #[arg(long)]
    steps: u64,
    #[arg(long, default_value_t = 1e-9)]
    delta: f64,
    /// Comma-separated Rényi orders (default grid when omitted).
    #[arg(long, value_delimiter = ',')]
    orders: Option<Vec<f64>>,
    #[arg(long, value_enum, default_value_t = Rule::Tight)]
    rule: Rule,
    /// Also write the JSON to this file.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Rule {
    Tight,
    Classic,
}

fn parse_kind(s: &str) -> std::result::Result<SigmaKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn emit_json(value: &serde_json::Value, file: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    // a closed pipe (e.g. `| head`) is not an error worth reporting
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    if let Some(path) = file {
        std::fs::write(path, text + "\n").map_err(|e| Error::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

fn num(v: f64) -> serde_json::Value {
    if v.is_finite() {
        json!(v)
    } else {
        json!(if v > 0.0 { "inf" } else { "-inf" })
    }
}

fn run_accountant(a: AccountantArgs) -> Result<()> {
    let z = match (a.z, a.sigma) {
        (Some(z), _) => z,
        (None, Some(sigma)) => {
            let clip = a.clip.expect("clap enforces --clip");
            let n = a.population.expect("clap enforces --population");
            let cohort = a.cohort.unwrap_or(a.q * n);
            let sigma_avg = convert_noise(sigma, a.sigma_kind, SigmaKind::Avg, cohort);
            let s = sensitivity(clip, a.q, n)?;
            let z = sigma_avg / s;
            println!("sigma_{:<6} = {sigma:e}", format!("{:?}", a.sigma_kind).to_lowercase());
            if a.sigma_kind != SigmaKind::Avg {
                println!("sigma_avg    = {sigma_avg:e}   (cohort L = {cohort})");
            }
            println!("S = C/(qN)   = {clip:e} / ({} * {n}) = {s:e}", a.q);
            println!("z = sigma_avg/S = {sigma_avg:e} / {s:e} = {z:.6e}");
            z
        }
        (None, None) => {
            return Err(Error::Config {
                field: "accountant".into(),
                reason: "give either --z or --sigma with --clip and --population".into(),
            })
        }
    };
    let orders = a.orders.unwrap_or_else(accountant::default_orders);
    let rule = match a.rule {
        Rule::Tight => ConversionRule::Tight,
        Rule::Classic => ConversionRule::Classic,
    };
    let spent = accountant::privacy_spent(z, a.q, a.steps, a.delta, &orders, rule)?;
    let curve: Vec<serde_json::Value> = if z > 0.0 && a.q > 0.0 && a.steps > 0 {
        let c = accountant::rdp_sampled_gaussian(z, a.q, &orders)?.compose(a.steps);
        c.orders.iter().zip(c.total()).map(|(&o, r)| json!({"order": o, "rdp": num(r)})).collect()
    } else {
        Vec::new()
    };
    println!(
        "epsilon = {} at delta = {} (best order {})",
        spent.epsilon,
        a.delta,
        spent.best_order.map_or("-".to_string(), |o| o.to_string())
    );
    emit_json(
        &json!({
            "epsilon": num(spent.epsilon),
            "best_order": spent.best_order,
            "noise_multiplier": z,
            "q": a.q,
            "steps": a.steps,
            "delta": a.delta,
            "conversion": rule,
            "curve": curve,
        }),
        a.json.as_deref(),
    )
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Simulate { config, out, threads } => {
            let cfg = parse_config(&config)?;
            let opts = RunOptions {
                threads,
                ..RunOptions::default()
            };
            let (res, files) = simulate_to_dir(&cfg, &out, &opts)?;
            if let Some(last) = res.metrics.last() {
                println!("rounds: {}  final probe loss: {:.6}  accuracy: {:.4}", res.metrics.len(), last.loss, last.accuracy);
            }
            println!(
                "z = {:.6e}  epsilon = {} at delta = {}{}",
                res.privacy.noise_multiplier,
                res.privacy.spent.epsilon,
                res.privacy.delta,
                if res.privacy.dp_valid { "" } else { "  (partial noise mask: not a DP guarantee)" }
            );
            for p in [&files.metrics, &files.privacy_report, &files.final_params, &files.manifest] {
                println!("wrote {}", p.display());
            }
            Ok(())
        }
        Command::Accountant(a) => run_accountant(a),
        Command::ConvertNoise { sigma, from, to, cohort } => {
            if !(sigma >= 0.0 && cohort >= 1.0) {
                return Err(Error::Domain("need sigma ≥ 0 and cohort ≥ 1".into()));
            }
            let kinds = match to {
                Some(k) => vec![k],
                None => SigmaKind::ALL.to_vec(),
            };
            let mut out = serde_json::Map::new();
            for k in kinds {
                let v = convert_noise(sigma, from, k, cohort);
                let name = format!("{k:?}").to_lowercase();
                println!("sigma_{name} = {v:e}");
                out.insert(format!("sigma_{name}"), json!(v));
            }
            out.insert("cohort".into(), json!(cohort));
            emit_json(&serde_json::Value::Object(out), None)
        }
        Command::PartitionStats { config, iid_shuffle: shuffle, json } => {
            let text = std::fs::read_to_string(&config).map_err(|e| Error::Io {
                path: config.display().to_string(),
                source: e,
            })?;
            let spec = parse_population_str(&text)?;
            let mut pop = generate_population::<f64>(&spec)?;
            if shuffle {
                pop = iid_shuffle(&pop, spec.seed);
            }
            let stats = partition_stats(&pop)?;
            print!("{}", stats.to_table());
            emit_json(&serde_json::to_value(&stats).expect("stats serialize"), json.as_deref())
        }
        Command::Summarize { metrics, out } => {
            let rounds = read_metrics(&metrics)?;
            let s = summarize(&rounds)?;
            println!("{:<16} {:>14} {:>14} {:>8}", "layer", "mean", "std", "count");
            for (name, l) in &s.per_layer {
                println!("{name:<16} {:>14.6e} {:>14.6e} {:>8}", l.mean, l.std, l.count);
            }
            println!("final loss {:.6}  best loss {:.6} (round {})", s.final_loss, s.best_loss, s.best_round);
            let (csv, js) = write_summary(&s, &out)?;
            println!("wrote {}\nwrote {}", csv.display(), js.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("FLDP_LOG", "warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
