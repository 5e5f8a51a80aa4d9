use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use saltv_core::costs::{self, CostTable};
use saltv_core::report::ReportDocument;
use saltv_core::revocation::{optimal_params, RevocationFilter, RevocationId};
use saltv_core::{sim, ScenarioConfig, SchemeId};

#[derive(Parser)]
#[command(name = "saltv", version, about = "Slot-keyed V2X broadcast authentication toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario and write a report.
    Sim(SimArgs),
    /// Benchmark the cryptographic primitives used by the cost model.
    Bench(BenchArgs),
    /// Build or query revocation filters.
    #[command(subcommand)]
    Bloom(BloomCommand),
}

#[derive(Args)]
struct SimArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated schemes to compare, overriding the config's `scheme`.
    #[arg(long, value_delimiter = ',')]
    schemes: Option<Vec<String>>,
    #[arg(long)]
    seed: Option<u64>,
    /// Cost table written by `saltv bench`; nominal costs otherwise.
    #[arg(long)]
    costs: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, default_value_t = 10_000)]
    iters: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BloomCommand {
    /// Size a filter for n entries at false-positive rate p and fill it with
    /// n random ids.
    Build {
        #[arg(long)]
        n: u64,
        #[arg(long)]
        p: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write the inserted ids, one hex id per line.
        #[arg(long)]
        emit_rids: Option<PathBuf>,
    },
    /// Test membership of one id.
    Query {
        #[arg(long)]
        filter: PathBuf,
        #[arg(long)]
        rid: String,
    },
}

enum Failure {
    /// Bad input: exit status 2.
    Usage(String),
    /// Everything else: exit status 1.
    Internal(String),
}

fn read(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure::Usage(format!("cannot write {}: {e}", path.display())))
}

fn cmd_sim(args: SimArgs) -> Result<(), Failure> {
    let text = String::from_utf8(read(&args.config)?)
        .map_err(|_| Failure::Usage(format!("{} is not UTF-8", args.config.display())))?;
    let mut config =
        ScenarioConfig::parse(&text).map_err(|e| Failure::Usage(format!("{}: {e}", args.config.display())))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let schemes = match &args.schemes {
        Some(list) => list
            .iter()
            .map(|s| s.parse::<SchemeId>().map_err(|e| Failure::Usage(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?,
        None => vec![config.scheme],
    };
    let cost_table = match &args.costs {
        Some(p) => {
            let text =
                String::from_utf8(read(p)?).map_err(|_| Failure::Usage(format!("{} is not UTF-8", p.display())))?;
            CostTable::from_json(&text).map_err(|e| Failure::Usage(format!("{}: {e}", p.display())))?
        }
        None => CostTable::nominal(),
    };
    let mut reports = Vec::with_capacity(schemes.len());
    for scheme in schemes {
        let cfg = ScenarioConfig {
            scheme,
            ..config.clone()
        };
        let report = sim::run_with_costs(&cfg, &cost_table).map_err(|e| match e {
            sim::SimError::Config(_) | sim::SimError::Cost(_) => Failure::Usage(e.to_string()),
            _ => Failure::Internal(e.to_string()),
        })?;
        reports.push(report);
    }
    let doc = ReportDocument::new(config, reports, cost_table);
    write(&args.out, doc.to_json().as_bytes())?;
    print!("{}", doc.render_table());
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<(), Failure> {
    let table = costs::benchmark(args.iters);
    println!(
        "{:<18} {:>12} {:>12} {:>10}",
        "primitive", "median_us", "p95_us", "iters"
    );
    for (name, c) in &table.entries {
        println!(
            "{name:<18} {:>12.3} {:>12.3} {:>10}",
            c.median_us, c.p95_us, c.iterations
        );
    }
    if let Some(out) = &args.out {
        write(out, table.to_json().as_bytes())?;
    }
    Ok(())
}

fn cmd_bloom(cmd: BloomCommand) -> Result<(), Failure> {
    match cmd {
        BloomCommand::Build {
            n,
            p,
            out,
            seed,
            emit_rids,
        } => {
            let (m, k) = optimal_params(n, p).map_err(|e| Failure::Usage(e.to_string()))?;
            let mut filter = RevocationFilter::new(n, p).map_err(|e| Failure::Usage(e.to_string()))?;
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut listed = String::new();
            for _ in 0..n {
                let rid = RevocationId(rng.gen());
                filter.insert(&rid);
                if emit_rids.is_some() {
                    listed.push_str(&rid.to_hex());
                    listed.push('\n');
                }
            }
            write(&out, &filter.to_bytes())?;
            if let Some(path) = emit_rids {
                write(&path, listed.as_bytes())?;
            }
            let bytes = filter.byte_len();
            let per_entry = bytes as f64 / n as f64;
            println!("m = {m} bits");
            println!("k = {k}");
            println!(
                "bytes = {bytes} ({:.2} MB, {per_entry:.2} bytes per entry)",
                bytes as f64 / 1e6
            );
            println!("expected_fpr = {:.6}", filter.expected_fpr());
            if n == 1_000_000 && (p - 0.001).abs() < 1e-12 {
                println!(
                    "note: a 3.6 MB size for this filter is {:.2}x the sizing formula",
                    3.6e6 / bytes as f64
                );
            }
            Ok(())
        }
        BloomCommand::Query { filter, rid } => {
            let bytes = read(&filter)?;
            let f = RevocationFilter::from_bytes(&bytes)
                .map_err(|e| Failure::Usage(format!("{}: {e}", filter.display())))?;
            let rid = RevocationId::from_hex(&rid)
                .ok_or_else(|| Failure::Usage(format!("`{rid}` is not a 32-digit hex id")))?;
            println!("{}", f.contains(&rid));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sim(a) => cmd_sim(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Bloom(b) => cmd_bloom(b),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(1)
        }
    }
}
