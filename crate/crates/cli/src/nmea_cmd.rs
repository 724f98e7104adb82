use std::io::{Read, Write};
use std::path::PathBuf;

use anyhow::Context;
use clap::Subcommand;
use mapbot_core::nmea::{decode_gprmc, encode_gprmc, GprmcFields, GprmcTemplate};
use mapbot_core::report::{fmt_f64, ReportLine};

use crate::{load_config, usage, CliError, CliResult};

#[derive(Debug, Subcommand)]
pub enum NmeaCmd {
    /// Print the GPRMC sentence (with CRLF) for explicit fields or a master second.
    Encode {
        /// JSON file holding the sentence fields.
        #[arg(long, conflicts_with_all = ["second", "config"])]
        fields: Option<PathBuf>,
        /// Master second to stamp with the config's (or the default) template.
        #[arg(long)]
        second: Option<i64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Verify and parse a sentence; `-` reads it from stdin.
    Decode {
        sentence: String,
        /// Print the fields as JSON instead of a report line.
        #[arg(long)]
        json: bool,
    },
}

pub fn exec(cmd: NmeaCmd) -> CliResult {
    match cmd {
        NmeaCmd::Encode { fields, second, config } => {
            let f: GprmcFields = match (fields, second) {
                (Some(path), _) => {
                    let text = std::fs::read_to_string(&path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                    serde_json::from_str(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
                }
                (None, Some(s)) => {
                    let template = match config {
                        Some(p) => load_config(&p)?.gprmc,
                        None => GprmcTemplate::default(),
                    };
                    template.fields_for(s).map_err(|e| usage(e.to_string()))?
                }
                (None, None) => return Err(usage("--fields or --second is required")),
            };
            let sentence = encode_gprmc(&f).map_err(|e| usage(e.to_string()))?;
            std::io::stdout().write_all(sentence.as_bytes()).map_err(anyhow::Error::from)?;
            Ok(())
        }
        NmeaCmd::Decode { sentence, json } => {
            let sentence = if sentence == "-" {
                let mut s = String::new();
                std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
                s
            } else {
                sentence
            };
            let f = decode_gprmc(&sentence).map_err(|e| CliError::Runtime(anyhow::anyhow!(e)))?;
            if json {
                println!("{}", serde_json::to_string_pretty(&f).expect("fields serialize"));
            } else {
                println!("{}", fields_line(&f));
            }
            Ok(())
        }
    }
}

fn fields_line(f: &GprmcFields) -> ReportLine {
    let t = &f.utc_time;
    let d = &f.date;
    let mut l = ReportLine::new("gprmc")
        .with("utc", format!("{:02}:{:02}:{:02}.{:03}", t.hour, t.minute, t.second, t.millis))
        .with("date", format!("{:02}-{:02}-{:02}", d.day, d.month, d.year))
        .with("status", format!("{:?}", f.status).to_lowercase())
        .with("latitude_deg", fmt_f64(f.latitude_deg()))
        .with("longitude_deg", fmt_f64(f.longitude_deg()))
        .with("speed_knots", f.speed_knots())
        .with("course_deg", f.course_deg());
    if let Some(m) = &f.magvar {
        l = l.with("magvar", format!("{:.1}{:?}", m.tenths_deg as f64 / 10.0, m.direction));
    }
    l
}
