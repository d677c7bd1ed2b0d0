//! Line-oriented `key=value` records on stderr.

use std::sync::atomic::{AtomicBool, Ordering};

static QUIET: AtomicBool = AtomicBool::new(false);

/// Suppresses every later record in this process.
pub fn set_quiet(quiet: bool) {
    QUIET.store(quiet, Ordering::Relaxed);
}

/// Quotes values that contain spaces, quotes or `=`.
pub fn format(event: &str, fields: &[(&str, String)]) -> String {
    let mut line = format!("event={event}");
    for (k, v) in fields {
        if v.is_empty() || v.contains([' ', '"', '=']) {
            line.push_str(&format!(" {k}={v:?}"));
        } else {
            line.push_str(&format!(" {k}={v}"));
        }
    }
    line
}

pub fn event(event: &str, fields: &[(&str, String)]) {
    if !QUIET.load(Ordering::Relaxed) {
        eprintln!("{}", format(event, fields));
    }
}
