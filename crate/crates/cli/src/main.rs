use freqlab::config::ExperimentConfig;
use freqlab::runner::{Runner, Stage};
use std::path::PathBuf;
use std::process::ExitCode;

const USAGE: &str = "\
freqlab - pixel/magnitude/phase adversarial attack laboratory

USAGE:
    freqlab <COMMAND> --config <FILE> --out <DIR> [--seed <N>]

COMMANDS:
    train      ingest the dataset and train (or load) the configured models
    attack     run the configured attack grid and emit per-image tables
    sweep      run attacks over the standard 8-value lambda grid
    analyze    full pipeline: attacks plus all diagnostic analyses
    report     summarize an existing run directory into summary.txt

OPTIONS:
    --config <FILE>   key-value experiment configuration (see README)
    --out <DIR>       run directory for checkpoints, tables and manifest
    --seed <N>        override the configured seed
    --quiet           suppress progress logging

Worker-pool size honors the FREQLAB_WORKERS environment variable.
";

struct Args {
    command: String,
    config: Option<PathBuf>,
    out: Option<PathBuf>,
    seed: Option<u64>,
    quiet: bool,
}

fn parse_args() -> Result<Args, String> {
    let mut argv = std::env::args().skip(1);
    let command = argv.next().ok_or("missing command")?;
    let mut args = Args { command, config: None, out: None, seed: None, quiet: false };
    while let Some(flag) = argv.next() {
        match flag.as_str() {
            "--config" => {
                args.config = Some(PathBuf::from(argv.next().ok_or("--config needs a path")?))
            }
            "--out" => args.out = Some(PathBuf::from(argv.next().ok_or("--out needs a path")?)),
            "--seed" => {
                let raw = argv.next().ok_or("--seed needs a number")?;
                args.seed = Some(raw.parse().map_err(|_| format!("bad seed '{raw}'"))?);
            }
            "--quiet" => args.quiet = true,
            "-h" | "--help" => {
                print!("{USAGE}");
                std::process::exit(0);
            }
            other => return Err(format!("unknown flag '{other}'")),
        }
    }
    Ok(args)
}

fn stages_for(command: &str) -> Option<Vec<Stage>> {
    Some(match command {
        "train" => vec![Stage::Dataset, Stage::Models],
        "attack" => vec![Stage::Dataset, Stage::Models, Stage::Attack, Stage::Baselines],
        "sweep" => vec![Stage::Dataset, Stage::Models, Stage::Attack],
        "analyze" => vec![
            Stage::Dataset,
            Stage::Models,
            Stage::Attack,
            Stage::Baselines,
            Stage::Analysis,
            Stage::Report,
        ],
        "report" => vec![Stage::Report],
        _ => return None,
    })
}

fn main() -> ExitCode {
    let args = match parse_args() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}\n\n{USAGE}");
            return ExitCode::from(2);
        }
    };
    let Some(stages) = stages_for(&args.command) else {
        eprintln!("error: unknown command '{}'\n\n{USAGE}", args.command);
        return ExitCode::from(2);
    };

    let mut cfg = match &args.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if args.command == "sweep" {
        cfg.lambdas = freqlab_core::attacks::DEFAULT_LAMBDA_SWEEP.to_vec();
    }

    let out = args.out.unwrap_or_else(|| PathBuf::from("runs/default"));
    let mut runner = match Runner::new(cfg, &out) {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: cannot prepare run directory: {e}");
            return ExitCode::from(1);
        }
    };
    runner.quiet = args.quiet;
    match runner.run(&stages) {
        Ok(()) => {
            eprintln!("[freqlab] run complete; outputs in {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
