use clap::Parser;

use heightcomp_harness::cli::{run, Cli};

fn error_kind(e: &anyhow::Error) -> String {
    match e.downcast_ref::<heightcomp::Error>() {
        Some(inner) => format!("{inner:?}").split([' ', '{', '(']).next().unwrap_or("Error").to_string(),
        None => "Harness".into(),
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let line = serde_json::json!({
            "error": format!("{e:#}"),
            "kind": error_kind(&e),
        });
        eprintln!("{line}");
        std::process::exit(1);
    }
}
