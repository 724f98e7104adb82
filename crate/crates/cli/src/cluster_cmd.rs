use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use anyhow::{anyhow, Context};
use base64::Engine;
use clap::Subcommand;
use mapbot_core::cluster::{decode_chunk, Coordinator};
use mapbot_gateway::{ChunkInfo, Gateway};

use crate::{load_config, usage, CliError, CliResult, RunArgs};

#[derive(Debug, clap::Args)]
pub struct ServeArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    /// Root of the node stores; defaults to `<output_dir>/store`.
    #[arg(long)]
    store: Option<PathBuf>,
    /// Advance simulated recording by one second every this many wall-clock
    /// milliseconds; 0 leaves time to `POST /clock/advance`.
    #[arg(long, default_value_t = 1000)]
    tick_ms: u64,
}

#[derive(Debug, Subcommand)]
pub enum ClusterCmd {
    /// Full collection run in-process (same as `mapbot run`).
    Run(RunArgs),
    /// Print the gateway's cluster snapshot.
    Status {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
    },
    /// Drive one lifecycle step: bringup, sync, launch, start, stop or finish.
    Lifecycle {
        action: String,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
        /// Run label for `start`.
        #[arg(long)]
        label: Option<String>,
    },
    /// Advance simulated recording time.
    Advance {
        seconds: f64,
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
    },
    /// Download sealed chunks, verify each checksum and mirror the store layout.
    Collect {
        #[arg(long, default_value = "http://127.0.0.1:8080")]
        server: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        node: Option<u8>,
        #[arg(long)]
        sensor: Option<String>,
    },
}

pub fn serve(a: ServeArgs) -> CliResult {
    let cfg = load_config(&a.config)?;
    let store = a.store.unwrap_or_else(|| PathBuf::from(&cfg.output_dir).join("store"));
    let coord = Coordinator::new(cfg, store).map_err(|e| usage(e.to_string()))?;
    let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
    rt.block_on(async move {
        let gw = Gateway::new(coord);
        if a.tick_ms > 0 {
            gw.spawn_ticker(Duration::from_millis(a.tick_ms));
        }
        let listener = tokio::net::TcpListener::bind(a.addr)
            .await
            .with_context(|| format!("binding {}", a.addr))?;
        eprintln!("gateway listening on http://{}", listener.local_addr()?);
        mapbot_gateway::serve(listener, gw).await.context("serving")
    })?;
    Ok(())
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

fn check(mut resp: ureq::http::Response<ureq::Body>) -> anyhow::Result<serde_json::Value> {
    let status = resp.status();
    let body: serde_json::Value = resp.body_mut().read_json().context("reading response")?;
    if !status.is_success() {
        let msg = body.get("error").and_then(|v| v.as_str()).unwrap_or("request failed");
        return Err(anyhow!("{status}: {msg}"));
    }
    Ok(body)
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

pub fn exec(cmd: ClusterCmd) -> CliResult {
    let base = |s: &str| s.trim_end_matches('/').to_string();
    match cmd {
        ClusterCmd::Run(a) => crate::run(&a),
        ClusterCmd::Status { server } => {
            let resp = agent().get(format!("{}/status", base(&server))).call().context("contacting gateway")?;
            print_json(&check(resp)?);
            Ok(())
        }
        ClusterCmd::Lifecycle { action, server, label } => {
            let body = serde_json::json!({ "run_label": label });
            let resp = agent()
                .post(format!("{}/lifecycle/{action}", base(&server)))
                .send_json(body)
                .context("contacting gateway")?;
            print_json(&check(resp)?);
            Ok(())
        }
        ClusterCmd::Advance { seconds, server } => {
            let resp = agent()
                .post(format!("{}/clock/advance", base(&server)))
                .send_json(serde_json::json!({ "seconds": seconds }))
                .context("contacting gateway")?;
            print_json(&check(resp)?);
            Ok(())
        }
        ClusterCmd::Collect {
            server,
            out,
            node,
            sensor,
        } => {
            let mut req = agent().get(format!("{}/chunks", base(&server))).query("data", "true");
            if let Some(n) = node {
                req = req.query("node", n.to_string());
            }
            if let Some(s) = &sensor {
                req = req.query("sensor", s);
            }
            let list: Vec<ChunkInfo> =
                serde_json::from_value(check(req.call().context("contacting gateway")?)?).context("chunk list")?;
            let mut corrupt = 0;
            for c in &list {
                let rel = std::path::Path::new(&c.path);
                if rel.is_absolute() || rel.components().any(|p| matches!(p, std::path::Component::ParentDir)) {
                    return Err(CliError::Runtime(anyhow!("refusing chunk path {:?}", c.path)));
                }
                let bytes = base64::engine::general_purpose::STANDARD
                    .decode(c.data.as_deref().unwrap_or_default())
                    .with_context(|| format!("{}: bad base64", c.path))?;
                let dest = out.join(rel);
                if let Some(dir) = dest.parent() {
                    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
                }
                std::fs::write(&dest, &bytes).with_context(|| format!("writing {}", dest.display()))?;
                match decode_chunk(&bytes) {
                    Ok(rc) => println!("ok       {} ({} records)", c.path, rc.records.len()),
                    Err(e) => {
                        corrupt += 1;
                        println!("CORRUPT  {} ({e})", c.path);
                    }
                }
            }
            println!("{} chunks, {corrupt} corrupt", list.len());
            if corrupt > 0 {
                return Err(CliError::Runtime(anyhow!("{corrupt} corrupt chunk(s)")));
            }
            Ok(())
        }
    }
}
