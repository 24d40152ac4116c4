use std::path::PathBuf;

use clap::Parser;
use forgedit::config::Settings;
use forgedit::service::{apply_env, serve, App};

/// HTTP service for editing sessions.
#[derive(Parser)]
#[command(name = "forgedit-service", version)]
struct Args {
    /// TOML settings file shared with the CLI.
    #[arg(long, env = "FORGEDIT_CONFIG")]
    config: Option<PathBuf>,
    /// Listen address.
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();
    let settings = Settings::load_optional(args.config.as_deref()).and_then(|mut s| {
        apply_env(&mut s)?;
        Ok(s)
    });
    let settings = match settings {
        Ok(s) => s,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(2);
        }
    };
    let addr = format!("{}:{}", args.host, settings.port());
    let app = match App::start(settings) {
        Ok(a) => a,
        Err(e) => {
            eprintln!("error: {e}");
            std::process::exit(1);
        }
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().expect("tokio runtime");
    let result = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(&addr).await?;
        log::info!("listening on http://{}", listener.local_addr()?);
        serve(listener, app).await
    });
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
