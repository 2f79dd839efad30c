use clap::Parser;

use direcnet_cli::commands;
use direcnet_cli::{Cli, Command};

fn main() {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(args) => commands::cmd_train(args),
        Command::Evaluate(args) => commands::cmd_evaluate(args),
        Command::Predict(args) => commands::cmd_predict(args),
        Command::Bench(args) => commands::cmd_bench(args),
        Command::Score(args) => commands::cmd_score(args),
    };
    if let Err(err) = result {
        eprintln!("error: {:#}", err);
        std::process::exit(1);
    }
}
