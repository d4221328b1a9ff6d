//! `bluetrack` command line.
//!
//! Exit codes: 0 ok, 1 unexpected runtime failure, 2 bad input (script,
//! config, CSV, event file, flags), 3 fewer than five calibration pairs,
//! 4 cannot bind the listen address, 5 cannot reach the service.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use bluetrack_cms::config::ServiceConfig;
use bluetrack_cms::Cms;
use bluetrack_core::calibration::{fit, CalibrationError, CalibrationSet, MIN_SAMPLES};
use bluetrack_core::monitor::ShutdownCheck;
use bluetrack_core::sim::{read_events, run_script_file, write_events, EventRecord, ScriptFile};

const EXIT_RUNTIME: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_TOO_FEW: u8 = 3;
const EXIT_BIND: u8 = 4;
const EXIT_UNREACHABLE: u8 = 5;

#[derive(Debug, Parser)]
#[command(
    name = "bluetrack",
    version,
    about = "Indoor Bluetooth tracker: simulate, calibrate, serve, replay"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a simulation script and write its event file (JSON lines).
    Sim {
        script: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the script's channel seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the channel law from a `distance_m,total_time_s` CSV.
    Calibrate {
        csv: PathBuf,
        /// Also write the fitted parameters as TOML.
        #[arg(long)]
        export: Option<PathBuf>,
    },
    /// Run the monitoring service over HTTP.
    Serve {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        /// 0 picks a free port; the bound address is printed on stdout.
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Stop on SIGTERM/ctrl-c even while devices are still connected.
        #[arg(long)]
        force: bool,
    },
    /// Post a simulator event file to a running service.
    Replay {
        events: PathBuf,
        #[arg(long)]
        url: String,
        /// Pace by event time divided by this factor. Default: no pacing.
        #[arg(long)]
        speed: Option<f64>,
    },
}

struct Failure {
    code: u8,
    message: String,
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Sim { script, out, seed } => cmd_sim(&script, &out, seed),
        Command::Calibrate { csv, export } => cmd_calibrate(&csv, export.as_deref()),
        Command::Serve {
            config,
            host,
            port,
            force,
        } => cmd_serve(config.as_deref(), &host, port, force),
        Command::Replay { events, url, speed } => cmd_replay(&events, &url, speed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_sim(script: &Path, out: &Path, seed: Option<u64>) -> Result<(), Failure> {
    let mut file = ScriptFile::load(script).map_err(|e| fail(EXIT_INPUT, e.to_string()))?;
    if let Some(seed) = seed {
        file.channel.seed = seed;
    }
    let events = run_script_file(&file).map_err(|e| fail(EXIT_INPUT, e.to_string()))?;
    std::fs::write(out, write_events(&events))
        .map_err(|e| fail(EXIT_INPUT, format!("cannot write {}: {e}", out.display())))?;
    Ok(())
}

fn cmd_calibrate(csv: &Path, export: Option<&Path>) -> Result<(), Failure> {
    let reader = std::fs::File::open(csv)
        .map_err(|e| fail(EXIT_INPUT, format!("cannot read {}: {e}", csv.display())))?;
    let set = CalibrationSet::read_csv(reader).map_err(|e| fail(EXIT_INPUT, e.to_string()))?;
    let params = match fit(&set) {
        Ok(p) => p,
        Err(CalibrationError::InsufficientSamples(n)) => {
            return Err(fail(
                EXIT_TOO_FEW,
                format!(
                    "only {n} distance-time pairs entered; at least {MIN_SAMPLES} are needed. \
                     Add more pairs to continue, or abort."
                ),
            ))
        }
        Err(e) => return Err(fail(EXIT_INPUT, e.to_string())),
    };
    let doc = params.export();
    println!("V = {} m/s", doc.speed_mps);
    println!("C = {} m", doc.error_m);
    println!("residual_rms = {} m", doc.residual_rms_m);
    println!("n = {}", doc.n_samples);
    if let Some(path) = export {
        std::fs::write(path, doc.to_toml())
            .map_err(|e| fail(EXIT_INPUT, format!("cannot write {}: {e}", path.display())))?;
    }
    Ok(())
}

fn cmd_serve(config: Option<&Path>, host: &str, port: u16, force: bool) -> Result<(), Failure> {
    tracing_subscriber::fmt()
        .with_writer(std::io::stderr)
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .init();
    let cfg = match config {
        Some(path) => ServiceConfig::load(path).map_err(|e| fail(EXIT_INPUT, e.to_string()))?,
        None => ServiceConfig::default(),
    };
    let cms = Arc::new(cfg.build().map_err(|e| fail(EXIT_INPUT, e.to_string()))?);
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| fail(EXIT_INPUT, format!("bad listen address {host}:{port}: {e}")))?;

    let rt = tokio::runtime::Runtime::new().map_err(|e| fail(EXIT_RUNTIME, e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| fail(EXIT_BIND, format!("cannot bind {addr}: {e}")))?;
        let local = listener
            .local_addr()
            .map_err(|e| fail(EXIT_RUNTIME, e.to_string()))?;
        println!("listening on {local}");
        tracing::info!(%local, phase = ?cms.phase(), "service started");

        tokio::spawn(watch_signals(cms.clone(), force));
        bluetrack_cms::http::serve(listener, cms)
            .await
            .map_err(|e| fail(EXIT_RUNTIME, e.to_string()))?;
        tracing::info!("service stopped");
        Ok(())
    })
}

/// Stop requests honour the shutdown gate unless `force` is set.
async fn watch_signals(cms: Arc<Cms>, force: bool) {
    #[cfg(unix)]
    let mut term = match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
        Ok(s) => s,
        Err(e) => {
            tracing::error!("cannot install SIGTERM handler: {e}");
            return;
        }
    };
    loop {
        #[cfg(unix)]
        tokio::select! {
            _ = term.recv() => {},
            _ = tokio::signal::ctrl_c() => {},
        }
        #[cfg(not(unix))]
        let _ = tokio::signal::ctrl_c().await;

        match cms.shutdown() {
            ShutdownCheck::Allowed => {
                tracing::info!("no connected devices, shutting down");
                return;
            }
            ShutdownCheck::Blocked { connected } => {
                let ids: Vec<String> = connected.iter().map(ToString::to_string).collect();
                if force {
                    tracing::warn!(connected = %ids.join(","), "shutdown blocked; forcing stop");
                    cms.force_stop();
                    return;
                }
                tracing::warn!(connected = %ids.join(","), "shutdown blocked; still serving");
            }
        }
    }
}

fn cmd_replay(events: &Path, url: &str, speed: Option<f64>) -> Result<(), Failure> {
    if let Some(s) = speed {
        if !(s.is_finite() && s > 0.0) {
            return Err(fail(EXIT_INPUT, format!("--speed must be > 0, got {s}")));
        }
    }
    let text = std::fs::read_to_string(events)
        .map_err(|e| fail(EXIT_INPUT, format!("cannot read {}: {e}", events.display())))?;
    let records =
        read_events(&text).map_err(|e| fail(EXIT_INPUT, format!("bad event file: {e}")))?;

    let base = url.trim_end_matches('/');
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(30))
        .build()
        .map_err(|e| fail(EXIT_RUNTIME, e.to_string()))?;
    let unreachable =
        |e: reqwest::Error| fail(EXIT_UNREACHABLE, format!("cannot reach {base}: {e}"));
    client
        .get(format!("{base}/state"))
        .send()
        .map_err(unreachable)?;

    let (mut posted, mut rejected) = (0usize, 0usize);
    let mut clock: Option<f64> = None;
    for record in &records {
        if let (Some(speed), Some(prev)) = (speed, clock) {
            let wait = (record.at() - prev) / speed;
            if wait > 0.0 {
                std::thread::sleep(Duration::from_secs_f64(wait));
            }
        }
        clock = Some(record.at());
        let Some((path, body)) = request_for(record) else {
            continue;
        };
        let resp = client
            .post(format!("{base}{path}"))
            .json(&body)
            .send()
            .map_err(unreachable)?;
        posted += 1;
        if !resp.status().is_success() {
            rejected += 1;
            let status = resp.status();
            let detail = resp.text().unwrap_or_default();
            eprintln!(
                "warning: {path} at t={} rejected ({status}): {detail}",
                record.at()
            );
        }
    }
    println!("replayed {posted} events ({rejected} rejected)");
    Ok(())
}

fn request_for(record: &EventRecord) -> Option<(&'static str, Value)> {
    Some(match record {
        EventRecord::SignalEmitted { at, signal } => {
            ("/signal", json!({ "line": signal, "at": at }))
        }
        EventRecord::ApDisconnected { at, ap } => (
            "/fault",
            json!({ "kind": "ap_disconnected", "ap": ap, "at": at }),
        ),
        EventRecord::ApReconnected { at, ap } => (
            "/fault",
            json!({ "kind": "ap_reconnected", "ap": ap, "at": at }),
        ),
        EventRecord::DeviceOffline { at, device } => (
            "/fault",
            json!({ "kind": "device_offline", "device": device, "at": at }),
        ),
        // simulator-side diagnostic; nothing reaches the service
        EventRecord::OutOfRange { .. } => return None,
    })
}
