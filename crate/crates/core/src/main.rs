use clap::Parser;
use mqgate::cli::{execute, Cli};

#[tokio::main]
async fn main() {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_default_env())
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = execute(cli, &mut stdout).await {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
