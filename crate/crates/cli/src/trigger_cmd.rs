use std::path::PathBuf;

use clap::Subcommand;
use mapbot_core::cluster::run::write_schedule_csv;
use mapbot_core::trigger::{generate_schedule, Polarity, TriggerChannelConfig};

use crate::{load_config, usage, CliResult};

#[derive(Debug, Subcommand)]
pub enum TriggerCmd {
    /// Edges in [start, end) as CSV: channel_id,time_ns,edge,seq.
    ///
    /// Either every channel of `--config`, or one channel described by flags.
    Schedule {
        #[arg(long, conflicts_with_all = ["frequency", "polarity"])]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        channel: u8,
        #[arg(long)]
        frequency: Option<f64>,
        #[arg(long, value_parser = parse_polarity)]
        polarity: Option<Polarity>,
        #[arg(long, default_value_t = 0.0)]
        offset: f64,
        #[arg(long, default_value_t = 0.5)]
        duty: f64,
        #[arg(long, default_value_t = 0.0)]
        start: f64,
        #[arg(long)]
        end: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_polarity(s: &str) -> Result<Polarity, String> {
    match s {
        "rising" => Ok(Polarity::Rising),
        "falling" => Ok(Polarity::Falling),
        "both" => Ok(Polarity::Both),
        other => Err(format!("{other:?} is not rising, falling or both")),
    }
}

pub fn exec(cmd: TriggerCmd) -> CliResult {
    let TriggerCmd::Schedule {
        config,
        channel,
        frequency,
        polarity,
        offset,
        duty,
        start,
        end,
        out,
    } = cmd;
    if !(end > start && start >= 0.0) {
        return Err(usage(format!("empty or reversed interval [{start}, {end})")));
    }
    let events = match config {
        Some(path) => {
            let cfg = load_config(&path)?;
            let mut all = Vec::new();
            for ch in &cfg.syncboard.channels {
                all.extend(generate_schedule(ch, start, end).map_err(|e| usage(e.to_string()))?);
            }
            all.sort_by_key(|e| (e.true_time_ns, e.channel_id, e.sequence_index));
            all
        }
        None => {
            let frequency = frequency.ok_or_else(|| usage("--frequency or --config is required"))?;
            let ch = TriggerChannelConfig {
                offset_s: offset,
                duty_ratio: duty,
                ..TriggerChannelConfig::new(channel, frequency, polarity.unwrap_or(Polarity::Rising))
            };
            generate_schedule(&ch, start, end).map_err(|e| usage(e.to_string()))?
        }
    };
    write_schedule_csv(crate::io::sink(out.as_deref())?, &events).map_err(anyhow::Error::from)?;
    Ok(())
}
