//! Command-line front end: run the benchmark experiment, replay a recorded
//! trajectory, or query the demonstrator at chosen states.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use onirl::benchmark;
use onirl::error::Error;
use onirl::harness::{
    export_report, export_trajectory, ingest_trajectory, parse_state_list, run_experiment,
    run_from_trajectory, ExperimentConfig,
};

const USAGE: &str = "\
onirl - online inverse reinforcement learning on the nonlinear benchmark

USAGE:
  onirl run <CONFIG> --out <DIR> [--seed N]
  onirl replay <TRAJECTORY_CSV> <CONFIG> [--out <DIR>] [--seed N]
  onirl query-demo <STATES_FILE> [--out <FILE>]

SUBCOMMANDS:
  run         Simulate the demonstrator and run the full online loop
  replay      Run the online loop over a prerecorded trajectory CSV
  query-demo  Print the demonstrator's control at each state in the list

ARGUMENTS:
  CONFIG          Sectioned `key = value` configuration file; an empty file
                  runs the stock benchmark experiment
  TRAJECTORY_CSV  Header `t,x1,...,x2n,u1,...,um`, one sample per row
  STATES_FILE     One state per line, comma-separated components

OPTIONS:
  --out PATH   Output directory (run/replay) or file (query-demo)
  --seed N     Override the configured pseudo-random seed

OUTPUT FILES (run/replay):
  theta_error.csv   t,err_norm,theta1..thetaP
  weight_error.csv  t,err_norm,w1..wK
  purges.csv        t,s,eta_bar,kappa
  summary.json      config echo, final estimates, purge count, wall time
  trajectory.csv    the observed trajectory (run only)

EXIT CODES:
  0 success, 2 invalid config, 3 parse error, 4 numerical divergence
";

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().skip(1).collect();
    match dispatch(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{USAGE}");
            ExitCode::from(2)
        }
        Err(CliError::Run(err)) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

enum CliError {
    Usage(String),
    Run(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Run(e)
    }
}

fn dispatch(args: &[String]) -> Result<(), CliError> {
    let Some(cmd) = args.first() else {
        return Err(CliError::Usage("missing subcommand".into()));
    };
    match cmd.as_str() {
        "run" => cmd_run(&args[1..]),
        "replay" => cmd_replay(&args[1..]),
        "query-demo" => cmd_query_demo(&args[1..]),
        "-h" | "--help" | "help" => {
            println!("{USAGE}");
            Ok(())
        }
        other => Err(CliError::Usage(format!("unknown subcommand `{other}`"))),
    }
}

struct CommonOpts {
    positional: Vec<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
}

fn parse_opts(args: &[String]) -> Result<CommonOpts, CliError> {
    let mut opts = CommonOpts {
        positional: Vec::new(),
        out: None,
        seed: None,
    };
    let mut it = args.iter();
    while let Some(a) = it.next() {
        match a.as_str() {
            "--out" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage("--out needs a path".into()))?;
                opts.out = Some(PathBuf::from(v));
            }
            "--seed" => {
                let v = it
                    .next()
                    .ok_or_else(|| CliError::Usage("--seed needs a value".into()))?;
                let seed = v
                    .parse::<u64>()
                    .map_err(|_| CliError::Usage(format!("invalid seed `{v}`")))?;
                opts.seed = Some(seed);
            }
            flag if flag.starts_with("--") => {
                return Err(CliError::Usage(format!("unknown option `{flag}`")));
            }
            path => opts.positional.push(PathBuf::from(path)),
        }
    }
    Ok(opts)
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn cmd_run(args: &[String]) -> Result<(), CliError> {
    let opts = parse_opts(args)?;
    let [config_path] = opts.positional.as_slice() else {
        return Err(CliError::Usage("run needs exactly one config path".into()));
    };
    let out = opts
        .out
        .ok_or_else(|| CliError::Usage("run needs --out <DIR>".into()))?;

    let cfg = load_config(config_path, opts.seed)?;
    let report = run_experiment(&cfg)?;
    export_report(&report, &out)?;
    export_trajectory(&report.trajectory, &out.join("trajectory.csv"))?;
    print_summary(&report);
    Ok(())
}

fn cmd_replay(args: &[String]) -> Result<(), CliError> {
    let opts = parse_opts(args)?;
    let [traj_path, config_path] = opts.positional.as_slice() else {
        return Err(CliError::Usage(
            "replay needs a trajectory CSV and a config path".into(),
        ));
    };
    let cfg = load_config(config_path, opts.seed)?;
    let traj = ingest_trajectory(traj_path)?;
    let report = run_from_trajectory(&cfg, traj)?;
    if let Some(out) = opts.out {
        export_report(&report, &out)?;
    }
    print_summary(&report);
    Ok(())
}

fn cmd_query_demo(args: &[String]) -> Result<(), CliError> {
    let opts = parse_opts(args)?;
    let [states_path] = opts.positional.as_slice() else {
        return Err(CliError::Usage("query-demo needs a states file".into()));
    };
    let text = std::fs::read_to_string(states_path).map_err(|source| Error::Io {
        path: states_path.display().to_string(),
        source,
    })?;
    let states = parse_state_list(&text, 2)?;

    let mut out = String::from("x1,x2,u1\n");
    for x in &states {
        let u = benchmark::optimal_policy(x);
        out.push_str(&format!("{},{},{}\n", x[0], x[1], u[0]));
    }
    match opts.out {
        Some(path) => std::fs::write(&path, out).map_err(|source| {
            CliError::Run(Error::Io {
                path: path.display().to_string(),
                source,
            })
        })?,
        None => print!("{out}"),
    }
    Ok(())
}

fn print_summary(report: &onirl::harness::RunReport) {
    let theta: Vec<String> = report
        .final_theta
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect();
    let w: Vec<String> = report
        .final_weights
        .iter()
        .map(|v| format!("{v:.6}"))
        .collect();
    println!(
        "finished in {:.2} s: theta_hat = [{}], w_hat = [{}], purges = {}",
        report.wall_time_s,
        theta.join(", "),
        w.join(", "),
        report.purge_count
    );
}
