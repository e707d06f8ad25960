//! Minimal stderr logging gated by the `POSEFORGE_LOG` environment
//! variable: `off` (default), `error`, `info`, or `debug`.

use std::sync::OnceLock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Level {
    Off,
    Error,
    Info,
    Debug,
}

fn configured() -> Level {
    static LEVEL: OnceLock<Level> = OnceLock::new();
    *LEVEL.get_or_init(|| {
        match std::env::var("POSEFORGE_LOG")
            .unwrap_or_default()
            .to_ascii_lowercase()
            .as_str()
        {
            "error" => Level::Error,
            "info" => Level::Info,
            "debug" => Level::Debug,
            _ => Level::Off,
        }
    })
}

pub fn enabled(level: Level) -> bool {
    level <= configured()
}

pub fn info(message: impl AsRef<str>) {
    if enabled(Level::Info) {
        eprintln!("[info] {}", message.as_ref());
    }
}

pub fn debug(message: impl AsRef<str>) {
    if enabled(Level::Debug) {
        eprintln!("[debug] {}", message.as_ref());
    }
}
