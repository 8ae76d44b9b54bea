use clap::Parser;

use nslab::cli::{dispatch, load_config, Cli};

fn main() {
    let cli = Cli::parse();
    nslab::exec::configure_threads(cli.threads);
    let cfg = match load_config(&cli) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    };
    let lab = match cfg.build(cli.seed) {
        Ok(lab) => lab,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    };
    match dispatch(&cli.command, &lab, &cli.out) {
        Ok(code) => std::process::exit(code),
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(e.exit_code());
        }
    }
}
