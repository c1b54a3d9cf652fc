use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dipsd_core::baselines::{dipsd_fixed_l, run_method, Method, DEFAULT_FIXED_LENGTH};
use dipsd_core::instance::{default_instance, heterogeneous_case, ProblemInstance};
use dipsd_core::montecarlo::{simulate, SimConfig};
use dipsd_core::schedule::Plan;
use dipsd_core::solver::{oracle_check, solve, SolverConfig};
use dipsd_core::sweep::{run_sweep, write_csv, SweepSpec};
use dipsd_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_INFEASIBLE: u8 = 2;
const EXIT_TRUNCATED: u8 = 3;
const EXIT_MISMATCH: u8 = 4;

/// Joint batching and draft-length planner for distributed speculative decoding.
#[derive(Parser)]
#[command(name = "dipsd", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve an instance and print the report as JSON.
    Solve {
        /// Instance file, or `-` for stdin.
        input: String,
        /// Exit with status 3 if any search hit its budget.
        #[arg(long)]
        require_exact: bool,
        /// Also consider a single batch.
        #[arg(long)]
        allow_single_batch: bool,
        /// Skip the partition sweep and report the alternation fixed point.
        #[arg(long)]
        alternation_only: bool,
    },
    /// Run one comparison method.
    Baseline {
        input: String,
        #[arg(long)]
        method: String,
        /// Draft length for `dipsd_fixed_l`.
        #[arg(long, default_value_t = DEFAULT_FIXED_LENGTH)]
        fixed_l: u32,
        #[arg(long)]
        allow_single_batch: bool,
    },
    /// Run a parameter sweep and write CSV.
    Sweep {
        spec: PathBuf,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Template instance for the user_count and accept_rate axes.
        #[arg(long)]
        instance: Option<String>,
    },
    /// Monte-Carlo replay of a plan (the solver's optimum by default).
    Simulate {
        input: String,
        #[arg(long, default_value_t = 100_000)]
        rounds: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Plan JSON file to replay instead of the optimum.
        #[arg(long)]
        plan: Option<PathBuf>,
    },
    /// Compare the solver with exhaustive search on random instances.
    OracleCheck {
        #[arg(long, default_value_t = 5)]
        max_users: usize,
        #[arg(long, default_value_t = 6)]
        max_len: u32,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 2024)]
        seed: u64,
        /// Print every trial as JSON on stdout.
        #[arg(long)]
        verbose: bool,
    },
    /// Print the reference instance.
    Defaults {
        #[arg(long, default_value_t = 6)]
        users: usize,
        /// Heterogeneous six-user case (1, 2 or 3) instead.
        #[arg(long)]
        case: Option<u8>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Infeasible(_) | Error::NoFeasiblePlan(_) | Error::InvalidPlan(_) => {
                EXIT_INFEASIBLE
            }
            _ => EXIT_USAGE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Error::Io(e).into()
    }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        message: message.into(),
    }
}

fn read_text(source: &str) -> Result<String, Failure> {
    if source == "-" {
        let mut text = String::new();
        io::stdin().read_to_string(&mut text)?;
        Ok(text)
    } else {
        fs::read_to_string(source).map_err(|e| usage(format!("cannot read {source}: {e}")))
    }
}

fn read_instance(source: &str) -> Result<ProblemInstance, Failure> {
    Ok(ProblemInstance::from_json_str(&read_text(source)?)?)
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| usage(e.to_string()))?;
    let mut out = io::stdout().lock();
    writeln!(out, "{text}")?;
    Ok(())
}

fn config(allow_single_batch: bool) -> Result<SolverConfig, Failure> {
    let mut cfg = SolverConfig::from_env()?;
    cfg.allow_single_batch = allow_single_batch;
    Ok(cfg)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Solve {
            input,
            require_exact,
            allow_single_batch,
            alternation_only,
        } => {
            let inst = read_instance(&input)?;
            let mut cfg = config(allow_single_batch)?;
            if alternation_only {
                cfg.refine_partition_limit = 0;
            }
            let report = solve(&inst, &cfg)?;
            print_json(&report)?;
            if require_exact && !report.optimality_status.is_exact() {
                return Err(Failure {
                    code: EXIT_TRUNCATED,
                    message: "search budget exhausted; result is not certified optimal".into(),
                });
            }
        }
        Command::Baseline {
            input,
            method,
            fixed_l,
            allow_single_batch,
        } => {
            let method: Method = method.parse()?;
            let inst = read_instance(&input)?;
            let cfg = config(allow_single_batch)?;
            let result = match method {
                Method::DipsdFixedL => dipsd_fixed_l(&inst, fixed_l, &cfg)?,
                other => run_method(other, &inst, &cfg)?,
            };
            print_json(&result)?;
        }
        Command::Sweep {
            spec,
            output,
            instance,
        } => {
            let spec = SweepSpec::from_json_str(
                &fs::read_to_string(&spec)
                    .map_err(|e| usage(format!("cannot read {}: {e}", spec.display())))?,
            )?;
            let template = match instance {
                Some(src) => read_instance(&src)?,
                None => default_instance(6),
            };
            let rows = run_sweep(&spec, &template, &config(false)?)?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            match output {
                Some(path) => write_csv(&rows, fs::File::create(&path)?)?,
                None => write_csv(&rows, io::stdout().lock())?,
            }
            if failed > 0 {
                eprintln!(
                    "{failed} of {} sweep points failed; see the status column",
                    rows.len()
                );
            }
        }
        Command::Simulate {
            input,
            rounds,
            seed,
            plan,
        } => {
            let inst = read_instance(&input)?;
            let plan = match plan {
                Some(path) => load_plan(&path)?,
                None => solve(&inst, &config(false)?)?.best_plan,
            };
            let result = simulate(&SimConfig { rounds, seed, plan }, &inst)?;
            print_json(&result)?;
        }
        Command::OracleCheck {
            max_users,
            max_len,
            trials,
            seed,
            verbose,
        } => {
            if max_users < 2 || max_len < 2 || trials == 0 {
                return Err(usage(
                    "oracle-check needs max-users >= 2, max-len >= 2 and trials >= 1",
                ));
            }
            let report = oracle_check(seed, trials, max_users, max_len, 1e-9, &config(false)?)?;
            if verbose {
                print_json(&report)?;
            }
            for (k, t) in report.trials.iter().enumerate().filter(|(_, t)| !t.matched) {
                eprintln!(
                    "trial {k}: solver {} vs exhaustive {} tokens/s (rel diff {:e})",
                    t.solver_tps, t.oracle_tps, t.rel_diff
                );
            }
            println!("{}/{} matched", report.matched, trials);
            if report.matched != trials {
                return Err(Failure {
                    code: EXIT_MISMATCH,
                    message: "solver disagrees with exhaustive search".into(),
                });
            }
        }
        Command::Defaults { users, case } => {
            let inst = match case {
                Some(c) => heterogeneous_case(c)?,
                None if users >= 1 => default_instance(users),
                None => return Err(usage("--users must be at least 1")),
            };
            println!("{}", inst.to_json_string());
        }
    }
    Ok(())
}

fn load_plan(path: &Path) -> Result<Plan, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(e.to_string()).into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("dipsd: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
