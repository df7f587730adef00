use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .target(env_logger::Target::Stderr)
        .init();
    let cli = hvq::cli::Cli::parse();
    match hvq::cli::run(cli) {
        Ok(summary) => println!("{summary}"),
        Err(e) => {
            eprintln!("error: {e}");
            println!(
                "{}",
                serde_json::json!({ "error": e.to_string(), "exit_code": e.exit_code() })
            );
            std::process::exit(e.exit_code());
        }
    }
}
