use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use singflow::harness::{cmd_build, cmd_entropy, cmd_verify, field_catalog, ExperimentConfig, HarnessError, SUITES};

const FILES_HELP: &str = "\
Output files (floats use 17 significant digits):
  build:
    profile_<s>.json       singularity profile s
    partition.json         partition metadata
    layers.csv             sigma, n, r_n, log_count, max_diameter, diameter_bound, materialized
    layer_points.csv       sigma, n, cell, x0..x<d-1>, t_minus, t_plus
  verify:
    verify_<suite>.json    checks with bound, measured, margin, pass; informational values
    verify_<suite>.csv     name, bound, measured, margin, pass
  entropy:
    entropy_report.json    H_C, H_A, block rate, bound ledger, constants
    entropy_report.csv     name, bound, measured, margin, pass
    measure.json           element weights and source statistics
    measure.csv            id, kind, weight
    block_entropy.csv      k, h_k, h_per_k, diff, occupancy
    truncation_gap.csv     sigma, N, conditional, mu_O_N, mu_C_N, L2, u_cardinality,
                           u_tail_mass, u_exponential, bound, margin, pass

Exit status: 0 when every check passes, 1 when a check fails, 2 on errors.";

#[derive(Parser)]
#[command(name = "singflow", version, about = "Countable partitions and entropy checks for flows with hyperbolic singularities", after_help = FILES_HELP)]
struct Cli {
    /// Worker threads for orbit and pair batches (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Build profiles and partitions and write their artifacts.
    Build(Common),
    /// Run one verification suite.
    Verify {
        #[command(flatten)]
        common: Common,
        /// One of: speeds, exit-times, crossings, tower-sums, entropy-bounds,
        /// tubes, truncation-gap, mane, shadowed, partition, blocks.
        #[arg(long)]
        suite: String,
    },
    /// Estimate the configured measure and write the entropy ledgers.
    Entropy(Common),
    /// List the built-in vector fields.
    ListFields,
}

fn load(c: &Common) -> Result<(ExperimentConfig, PathBuf), HarnessError> {
    let cfg = ExperimentConfig::load(&c.config)?;
    let out = c.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    Ok((cfg, out))
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::Build(c) => {
            let (cfg, out) = load(&c)?;
            let exp = cmd_build(&cfg, &out)?;
            for (s, rp) in exp.global.refined.iter().enumerate() {
                println!(
                    "sigma{s}: n0 = {}, K0 = {}, K1 = {}, layers {}..={}",
                    rp.n0(),
                    rp.profile.k0,
                    rp.profile.k1,
                    rp.n0() + 1,
                    rp.n_max
                );
            }
            Ok(true)
        }
        Command::Verify { common, suite } => {
            if !SUITES.contains(&suite.as_str()) {
                return Err(HarnessError::UnknownSuite(suite));
            }
            let (cfg, out) = load(&common)?;
            let rep = cmd_verify(&cfg, &suite, &out)?;
            for c in &rep.checks {
                println!("{} {}: measured {} bound {}", if c.pass { "PASS" } else { "FAIL" }, c.name, c.measured, c.bound);
            }
            Ok(rep.pass())
        }
        Command::Entropy(c) => {
            let (cfg, out) = load(&c)?;
            let rep = cmd_entropy(&cfg, &out)?;
            println!("H_C = {}, H_A = {}, h = {:?}", rep.h_c, rep.h_a, rep.h_rate);
            for (k, b) in &rep.bounds {
                println!("{} {k}: measured {} bound {}", if b.pass { "PASS" } else { "FAIL" }, b.measured, b.bound);
            }
            for (k, n) in &rep.notes {
                println!("note {k}: {n}");
            }
            Ok(rep.pass())
        }
        Command::ListFields => {
            for (name, params, what) in field_catalog() {
                println!("{name:<18} {params:<36} {what}");
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
