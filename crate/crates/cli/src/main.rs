use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mscgc_cli::{
    cmd_ablate, cmd_eval, cmd_gen_data, cmd_gradcheck, cmd_interpret, cmd_train, exit_code, RunConfig, EXIT_OK,
    EXIT_PARTIAL, EXIT_VERIFY_FAILED,
};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

#[derive(Parser)]
#[command(name = "mscgc", version, about = "Graph-convolution and KAN head for EEG emotion recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file with flat dotted or nested keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides of the form --section.key=value.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset into data.dir.
    GenData(Common),
    /// Train one variant and evaluate it on the test split.
    Train(Common),
    /// Evaluate eval.checkpoint on the test split.
    Eval(Common),
    /// Train all four variants over ablate.seeds.
    Ablate(Common),
    /// Export adjacency, hubs, saliency, KAN importance and activations.
    Interpret(Common),
    /// Compare every backward pass against central differences.
    Gradcheck(Common),
}

fn run(cli: Cli) -> i32 {
    let (Command::GenData(common)
    | Command::Train(common)
    | Command::Eval(common)
    | Command::Ablate(common)
    | Command::Interpret(common)
    | Command::Gradcheck(common)) = &cli.command;
    let cfg = match RunConfig::load(common.config.as_deref(), &common.overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code(&e);
        }
    };
    let result = match cli.command {
        Command::GenData(_) => cmd_gen_data(&cfg).map(|_| EXIT_OK),
        Command::Train(_) => cmd_train(&cfg).map(|_| EXIT_OK),
        Command::Eval(_) => cmd_eval(&cfg).map(|_| EXIT_OK),
        Command::Ablate(_) => cmd_ablate(&cfg).map(|o| if o.complete() { EXIT_OK } else { EXIT_PARTIAL }),
        Command::Interpret(_) => cmd_interpret(&cfg).map(|_| EXIT_OK),
        Command::Gradcheck(_) => cmd_gradcheck(&cfg).map(|r| if r.passed() { EXIT_OK } else { EXIT_VERIFY_FAILED }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e}");
        exit_code(&e)
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match Cli::try_parse() {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() { 2 } else { 0 }
        }
    };
    ExitCode::from(code as u8)
}
