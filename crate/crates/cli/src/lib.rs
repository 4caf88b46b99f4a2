//! Command-line campaigns over a persistent orbit store.

pub mod config;
pub mod failure;
pub mod find;
pub mod homotopy;
pub mod modify;
pub mod report;
pub mod store;

use std::path::PathBuf;

use brakekit::dynamics::{integrate_twisted, IntegratorOptions};
use brakekit::model::fixed_set_point;
use clap::{Parser, Subcommand, ValueEnum};

use config::{Config, Overrides};
use failure::Failure;
use homotopy::{BangertArgs, FamilySource};
use store::Store;

pub const STORE_ENV: &str = "BRAKEKIT_STORE";
pub const DEFAULT_STORE: &str = "brakekit-store";

#[derive(Debug, Parser)]
#[command(name = "brakekit", version, about = "Brake orbits, indices, modifications and Bangert homotopies")]
pub struct Cli {
    /// System config: a JSON file or `builtin:NAME`.
    #[arg(long, global = true)]
    pub config: Option<String>,
    /// Result store directory; the BRAKEKIT_STORE variable takes precedence.
    #[arg(long, global = true)]
    pub store: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub grid: Option<usize>,
    /// Gradient tolerance of the variational search.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Search for brake orbits from seeded guesses and store the distinct ones.
    FindOrbits {
        #[arg(long)]
        period: Option<usize>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Morse and Maslov-type index report for a stored orbit.
    Index {
        #[arg(long)]
        orbit: String,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4")]
        k: Vec<usize>,
    },
    /// Certificates for the convex quadratic modification at each speed.
    ModifyCheck {
        #[arg(long = "t", value_delimiter = ',')]
        t: Vec<f64>,
    },
    /// Even Bangert loops, action bound and homotopy certificates.
    Bangert {
        /// Two stored orbit ids, comma separated.
        #[arg(long, conflicts_with = "family_file")]
        family: Option<String>,
        /// JSON `{x0, x1, nodes: [loop…]}`.
        #[arg(long)]
        family_file: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "2,4,8")]
        n: Vec<usize>,
        #[arg(long)]
        c1: Option<f64>,
        #[arg(long)]
        c2: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        eps: f64,
    },
    /// Write a stored orbit as CSV or JSON.
    Export {
        #[arg(long)]
        orbit: String,
        #[arg(long, value_enum, default_value_t = ExportKind::Loop)]
        what: ExportKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExportKind {
    /// `t, q…` over one period.
    Loop,
    /// `t, q…, p…` of the twisted flow from the brake point.
    Trajectory,
    /// The JSON record.
    Record,
}

fn store_root(cli: &Cli) -> PathBuf {
    match std::env::var_os(STORE_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cli.store.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_STORE)),
    }
}

fn load_config(cli: &Cli) -> Result<Config, Failure> {
    let src = cli.config.as_deref().ok_or_else(|| Failure::schema("--config is required"))?;
    Config::load(src)?.apply(&Overrides { grid: cli.grid, tol: cli.tol, seed: cli.seed })
}

fn json(value: &impl serde::Serialize) -> Result<String, Failure> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

/// Runs a parsed command; the string is what goes to stdout.
pub fn run(cli: &Cli) -> Result<String, Failure> {
    let store = Store::open(store_root(cli))?;
    match &cli.command {
        Command::FindOrbits { period, seeds } => {
            let mut cfg = load_config(cli)?;
            if let Some(p) = period {
                cfg.numerics.period = *p;
            }
            if let Some(s) = seeds {
                cfg.numerics.seeds = *s;
            }
            if cfg.numerics.period == 0 {
                return Err(Failure::schema("period must be positive"));
            }
            json(&find::find_orbits(&cfg, &store)?)
        }
        Command::Index { orbit, k } => {
            let cfg = load_config(cli)?;
            let rep = report::index_report(&cfg, &store, orbit, k)?;
            report::index_status(&rep)?;
            json(&rep)
        }
        Command::ModifyCheck { t } => {
            let cfg = load_config(cli)?;
            let speeds = modify::speed_list(&cfg, &store, t)?;
            let cert = modify::modify_check(&cfg, &store, &speeds)?;
            modify::modify_status(&cert)?;
            json(&cert)
        }
        Command::Bangert { family, family_file, n, c1, c2, eps } => {
            let cfg = load_config(cli)?;
            let args = BangertArgs { ns: n.clone(), c1: *c1, c2: *c2, epsilon: *eps };
            let source = match (family, family_file) {
                (Some(f), None) => match f.split_once(',') {
                    Some((a, b)) => FamilySource::Orbits(a, b),
                    None => return Err(Failure::schema("--family needs two orbit ids separated by a comma")),
                },
                (None, Some(p)) => FamilySource::File(p),
                _ => return Err(Failure::schema("give exactly one of --family and --family-file")),
            };
            let m = homotopy::bangert(&cfg, &store, &source, &args)?;
            homotopy::bangert_status(&m)?;
            json(&m)
        }
        Command::Export { orbit, what, out } => {
            let rec = store.orbit(orbit)?;
            let text = match what {
                ExportKind::Loop => rec.curve.to_csv(),
                ExportKind::Record => json(&rec)?,
                ExportKind::Trajectory => {
                    let cfg = load_config(cli)?;
                    report::check_integrity(&cfg, &rec)?;
                    let sys = &cfg.system;
                    let start = fixed_set_point(&sys.theta, rec.curve.half_node(0));
                    let opts = IntegratorOptions::with_tol(cfg.numerics.integrator_tol);
                    let tr = integrate_twisted(&sys.hamiltonian, &sys.theta, &start, 0.0, rec.period as f64, &opts)?;
                    let n = rec.dim;
                    let labels: Vec<String> =
                        (1..=n).map(|i| format!("q{i}")).chain((1..=n).map(|i| format!("p{i}"))).collect();
                    tr.to_csv(rec.grid * rec.period, &labels)
                }
            };
            match out {
                Some(path) => {
                    std::fs::write(path, &text)?;
                    Ok(String::new())
                }
                None => Ok(text),
            }
        }
    }
}

/// Parses arguments, runs, prints, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { failure::code::SCHEMA } else { 0 };
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            f.code
        }
    }
}
