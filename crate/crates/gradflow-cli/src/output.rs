//! CSV emission: comma-separated, '.' decimal point, header row, LF line
//! endings. The optional timestamp line is a `#` comment so downstream
//! parsers can skip it.

use std::io::Write;
use std::time::{SystemTime, UNIX_EPOCH};

use gradflow::{Error, Result};

pub struct CsvWriter {
    buf: String,
}

impl CsvWriter {
    pub fn new(header: &[&str], reproducible: bool) -> Self {
        let mut buf = String::new();
        if !reproducible {
            let now = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            buf.push_str(&format!("# generated unix_time={now}\n"));
        }
        buf.push_str(&header.join(","));
        buf.push('\n');
        Self { buf }
    }

    pub fn row(&mut self, cells: &[String]) {
        self.buf.push_str(&cells.join(","));
        self.buf.push('\n');
    }

    /// Writes to the path, or stdout when none.
    pub fn finish(self, output: Option<&str>) -> Result<()> {
        match output {
            Some(path) => std::fs::write(path, self.buf.as_bytes())
                .map_err(|e| Error::Config(format!("cannot write '{path}': {e}"))),
            None => {
                let mut out = std::io::stdout().lock();
                out.write_all(self.buf.as_bytes())
                    .map_err(|e| Error::Config(format!("stdout: {e}")))
            }
        }
    }
}

pub fn fmt(v: f64) -> String {
    if v.is_nan() {
        "NaN".to_string()
    } else {
        format!("{v}")
    }
}
