mod args;
mod commands;
mod settings;

use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = args::Cli::parse();
    let result = match &cli.command {
        args::Command::GenData(a) => commands::gen_data(a),
        args::Command::Train(a) => commands::cmd_train(a),
        args::Command::Eval(a) => commands::cmd_eval(a),
        args::Command::Score(a) => commands::cmd_score(a),
        args::Command::MinePairs(a) => commands::cmd_mine_pairs(a),
        args::Command::Caption(a) => commands::cmd_caption(a),
        args::Command::SelfTrain(a) => commands::cmd_self_train(a),
        args::Command::Report(a) => commands::cmd_report(a),
    };
    match result {
        Ok(()) => std::process::ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            std::process::ExitCode::FAILURE
        }
    }
}
