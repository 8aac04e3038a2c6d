mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use serde_json::json;

use args::{Cli, Command};
use commands::{Context, Failure, Outcome, EXIT_USAGE};

fn init_logging(verbose: u8) {
    let level = match verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
}

fn run(cli: &Cli) -> Result<Outcome, Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Failure::usage("thread count must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::usage(format!("cannot size the thread pool: {e}")))?;
    }
    let ctx = Context {
        workdir: cli.workdir.clone(),
    };
    match &cli.command {
        Command::Prepare(a) => commands::prepare(&ctx, a),
        Command::Train(a) => commands::train_cmd(&ctx, a),
        Command::Eval(a) => commands::eval_cmd(&ctx, a),
        Command::Gradcheck(a) => commands::gradcheck_cmd(a),
        Command::Experiment(a) => commands::experiment_cmd(&ctx, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if e.use_stderr() && std::env::args().any(|a| a == "--json") => {
            let doc = json!({ "error": { "kind": "usage", "message": e.to_string().trim_end(), "exit_code": EXIT_USAGE } });
            println!(
                "{}",
                serde_json::to_string_pretty(&doc).expect("serializable")
            );
            let _ = e.print();
            return ExitCode::from(EXIT_USAGE as u8);
        }
        Err(e) => e.exit(),
    };
    init_logging(cli.verbose);
    let (code, doc) = match run(&cli) {
        Ok(out) => {
            if !cli.json {
                println!("{}", out.text);
            }
            (out.code, out.json)
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            let doc =
                json!({ "error": { "kind": f.kind(), "message": f.message, "exit_code": f.code } });
            (f.code, doc)
        }
    };
    if cli.json {
        println!(
            "{}",
            serde_json::to_string_pretty(&doc).expect("serializable")
        );
    }
    ExitCode::from(code as u8)
}
