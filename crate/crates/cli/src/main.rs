use clap::Parser;

fn main() -> std::process::ExitCode {
    let cli = groundseg_cli::Cli::parse();
    groundseg_cli::init_tracing();
    groundseg_cli::run(cli)
}
