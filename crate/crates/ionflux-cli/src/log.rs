//! Leveled stderr logging with an optional machine-readable JSON mode for CI.
//! Level comes from the IONFLUX_LOG environment variable (debug|info|warn),
//! defaulting to info.

use std::sync::atomic::{AtomicBool, AtomicU8, Ordering};

static JSON_MODE: AtomicBool = AtomicBool::new(false);
static LEVEL: AtomicU8 = AtomicU8::new(1); // 0 debug, 1 info, 2 warn

pub fn init(json_logs: bool) {
    JSON_MODE.store(json_logs, Ordering::Relaxed);
    let level = match std::env::var("IONFLUX_LOG").as_deref() {
        Ok("debug") => 0,
        Ok("warn") => 2,
        _ => 1,
    };
    LEVEL.store(level, Ordering::Relaxed);
}

fn emit(level: &str, rank: u8, msg: &str) {
    if rank < LEVEL.load(Ordering::Relaxed) {
        return;
    }
    if JSON_MODE.load(Ordering::Relaxed) {
        let line = serde_json::json!({ "level": level, "msg": msg });
        eprintln!("{line}");
    } else {
        eprintln!("[{level}] {msg}");
    }
}

pub fn debug(msg: &str) {
    emit("debug", 0, msg);
}

pub fn info(msg: &str) {
    emit("info", 1, msg);
}

pub fn warn(msg: &str) {
    emit("warn", 2, msg);
}
