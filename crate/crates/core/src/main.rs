use std::process::ExitCode;

fn main() -> ExitCode {
    let cli = match <ovcd::app::Cli as clap::Parser>::try_parse() {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match ovcd::app::execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
