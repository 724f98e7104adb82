use std::io::Write;
use std::path::Path;

use anyhow::Context;
use mapbot_core::report::{write_report, ReportLine};

/// Write a report to `out`, or stdout when absent.
pub fn emit(out: Option<&Path>, header: &str, lines: &[ReportLine]) -> anyhow::Result<()> {
    let text = write_report(header, lines);
    match out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

/// Open `out` for writing, or stdout when absent.
pub fn sink(out: Option<&Path>) -> anyhow::Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?),
        None => Box::new(std::io::stdout()),
    })
}
