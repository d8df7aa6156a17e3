mod commands;
mod options;

use std::process::ExitCode;

use ce_nmt::Error;
use log::LevelFilter;

fn init_logging() -> Result<(), String> {
    let level = match std::env::var("CE_NMT_LOG").as_deref() {
        Err(_) | Ok("info") => LevelFilter::Info,
        Ok("quiet") => LevelFilter::Error,
        Ok("debug") => LevelFilter::Debug,
        Ok(other) => return Err(format!("CE_NMT_LOG must be quiet, info or debug, got `{other}`")),
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    Ok(())
}

fn exit_code(err: &Error, out: Option<&std::path::Path>) -> u8 {
    match err {
        Error::Collapse(report) => {
            if let Some(dir) = out {
                let text = serde_json::to_string_pretty(report.as_ref()).expect("serializable");
                let _ = std::fs::write(dir.join("collapse.json"), text);
            }
            3
        }
        Error::Divergence { checkpoint, .. } => {
            if let Some(dir) = out {
                let path = dir.join(format!("diverged-{}", checkpoint.file_name()));
                if checkpoint.save(&path).is_ok() {
                    log::error!("last finite state saved to {}", path.display());
                }
            }
            4
        }
        _ => 2,
    }
}

fn main() -> ExitCode {
    if let Err(msg) = init_logging() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let opts = match options::parse(std::env::args_os().collect()) {
        Ok(o) => o,
        Err(e) => e.exit(),
    };
    match commands::run(&opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            let out = opts.out.clone().unwrap_or_else(|| "out".into());
            ExitCode::from(exit_code(&err, out.is_dir().then_some(out.as_path())))
        }
    }
}
