//! Line-delimited JSON service over TCP.
//!
//! One JSON object per line in each direction. A malformed line gets an
//! error response and the connection stays open.

use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};

use super::{AccountId, Gateway, GatewayConfig, GatewayMode};
use crate::bucketing::BucketModel;
use crate::error::{LadsError, Result};
use crate::noise::{MixingCoefficient, SeedSpec};

const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Request {
    Serve { account: String, embedding: Vec<f64> },
    ServeSimple { account: String },
    ResetStage,
    Snapshot { path: PathBuf },
    Shutdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Response {
    Error {
        error: String,
        code: String,
    },
    Served {
        bucket: u64,
        depth: u64,
        seed_hex: String,
        noise: Vec<f64>,
    },
    Stage {
        stage_id: u64,
    },
    Snapshot {
        path: PathBuf,
        bytes: u64,
    },
    Ack {
        ok: bool,
    },
}

impl Response {
    fn error(code: &str, error: impl ToString) -> Self {
        Response::Error {
            error: error.to_string(),
            code: code.to_string(),
        }
    }
}

pub fn error_code(e: &LadsError) -> &'static str {
    match e {
        LadsError::DimensionMismatch { .. } => "dimension-mismatch",
        LadsError::QuotaExceeded { .. } => "account-quota-exceeded",
        LadsError::WrongMode { .. } => "unknown-mode",
        LadsError::InvalidAccount(_) => "invalid-account",
        LadsError::DomainOverflow { .. } => "domain-overflow",
        LadsError::Io(_) => "io",
        LadsError::ConfigInvalid(_) | LadsError::Parse(_) | LadsError::InvalidAlpha(_) => "config-invalid",
        LadsError::DegenerateGrid(_) => "degenerate-grid",
        LadsError::CorruptSnapshot(_) => "corrupt-snapshot",
        LadsError::VersionMismatch { .. } => "version-mismatch",
        _ => "internal",
    }
}

/// Gateway settings as read from the service config file (TOML).
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    /// `simple` or `conditional`.
    pub mode: String,
    pub seed_spec: SeedSpec,
    #[serde(default)]
    pub fresh_key: u64,
    pub noise_dim: usize,
    #[serde(default = "default_alpha")]
    pub alpha: MixingCoefficient,
    #[serde(default)]
    pub stage_cap: Option<u64>,
    /// Bucket model file, required in conditional mode.
    #[serde(default)]
    pub bucket_model: Option<PathBuf>,
    /// Restored at startup if present; written on graceful shutdown.
    #[serde(default)]
    pub snapshot_path: Option<PathBuf>,
}

fn default_alpha() -> MixingCoefficient {
    MixingCoefficient::new(1.0).unwrap()
}

impl ServiceConfig {
    /// Parses a config; relative paths are resolved against `base_dir`.
    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| LadsError::Parse(e.to_string()))?;
        if let Some(dir) = base_dir {
            for p in [&mut cfg.bucket_model, &mut cfg.snapshot_path].into_iter().flatten() {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?, path.parent())
    }

    pub fn build_gateway(&self) -> Result<Gateway> {
        let mode = match self.mode.as_str() {
            "simple" => GatewayMode::Simple,
            "conditional" => {
                let path = self
                    .bucket_model
                    .as_ref()
                    .ok_or_else(|| LadsError::ConfigInvalid("conditional mode needs bucket_model".into()))?;
                GatewayMode::Conditional(BucketModel::load(path)?)
            }
            other => return Err(LadsError::ConfigInvalid(format!("unknown mode {other:?}"))),
        };
        Gateway::new(GatewayConfig {
            mode,
            seed_gen: self.seed_spec,
            fresh_key: self.fresh_key,
            noise_dim: self.noise_dim,
            alpha: self.alpha,
            stage_cap: self.stage_cap,
        })
    }

    /// Restores from `snapshot_path` when it exists, otherwise builds fresh.
    pub fn open_gateway(&self) -> Result<Gateway> {
        if let Some(path) = &self.snapshot_path {
            if path.exists() {
                info!("restoring gateway state from {}", path.display());
                return Gateway::restore(&fs::read(path)?);
            }
        }
        self.build_gateway()
    }
}

/// Writes atomically via a sibling temp file.
pub fn write_snapshot(gateway: &Gateway, path: &Path) -> Result<u64> {
    let bytes = gateway.snapshot();
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, &bytes)?;
    fs::rename(&tmp, path)?;
    Ok(bytes.len() as u64)
}

/// Handles one request line. The flag is true for a shutdown request.
pub fn handle_line(gateway: &Gateway, line: &str) -> (Response, bool) {
    let req: Request = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return (Response::error("bad-request", e), false),
    };
    let outcome = match req {
        Request::Serve { account, embedding } => {
            AccountId::new(account).and_then(|a| gateway.serve_conditional(&a, &embedding))
        }
        Request::ServeSimple { account } => AccountId::new(account).and_then(|a| gateway.serve_simple(&a)),
        Request::ResetStage => {
            return (
                Response::Stage {
                    stage_id: gateway.reset_stage(),
                },
                false,
            )
        }
        Request::Snapshot { path } => {
            let resp = match write_snapshot(gateway, &path) {
                Ok(bytes) => Response::Snapshot { path, bytes },
                Err(e) => Response::error(error_code(&e), e),
            };
            return (resp, false);
        }
        Request::Shutdown => return (Response::Ack { ok: true }, true),
    };
    let resp = match outcome {
        Ok(o) => Response::Served {
            bucket: o.bucket.0,
            depth: o.depth,
            seed_hex: o.seed.to_hex(),
            noise: o.noise.into_values(),
        },
        Err(e) => Response::error(error_code(&e), e),
    };
    (resp, false)
}

pub struct Server {
    gateway: Arc<Gateway>,
    listener: TcpListener,
    shutdown: Arc<AtomicBool>,
    snapshot_path: Option<PathBuf>,
}

impl Server {
    pub fn bind(gateway: Gateway, addr: impl ToSocketAddrs, snapshot_path: Option<PathBuf>) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(Self {
            gateway: Arc::new(gateway),
            listener,
            shutdown: Arc::new(AtomicBool::new(false)),
            snapshot_path,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    /// Setting the flag stops the accept loop; used by signal handlers.
    pub fn shutdown_handle(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.shutdown)
    }

    pub fn gateway(&self) -> Arc<Gateway> {
        Arc::clone(&self.gateway)
    }

    /// Runs until a shutdown request or the shutdown flag, then waits for
    /// open connections and writes the final snapshot.
    pub fn run(self) -> Result<()> {
        info!("listening on {}", self.local_addr()?);
        let mut workers = Vec::new();
        while !self.shutdown.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    debug!("connection from {peer}");
                    let gw = Arc::clone(&self.gateway);
                    let flag = Arc::clone(&self.shutdown);
                    workers.push(thread::spawn(move || {
                        if let Err(e) = serve_connection(&gw, stream, &flag) {
                            warn!("connection {peer}: {e}");
                        }
                    }));
                    workers.retain(|h| !h.is_finished());
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(POLL),
                Err(e) => return Err(e.into()),
            }
        }
        for h in workers {
            let _ = h.join();
        }
        if let Some(path) = &self.snapshot_path {
            let bytes = write_snapshot(&self.gateway, path)?;
            info!("wrote {bytes}-byte snapshot to {}", path.display());
        }
        info!("shut down");
        Ok(())
    }
}

fn serve_connection(gateway: &Gateway, stream: TcpStream, shutdown: &AtomicBool) -> io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(POLL))?;
    let mut reader = BufReader::new(stream.try_clone()?);
    let mut writer = BufWriter::new(stream);
    let mut buf = Vec::new();
    loop {
        if shutdown.load(Ordering::SeqCst) {
            return Ok(());
        }
        // partial reads stay in `buf` across timeouts
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => return Ok(()),
            Ok(_) if buf.last() != Some(&b'\n') => return Ok(()),
            Ok(_) => {}
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => continue,
            Err(e) => return Err(e),
        }
        let line = String::from_utf8_lossy(&buf).trim().to_string();
        buf.clear();
        if line.is_empty() {
            continue;
        }
        let (resp, stop) = handle_line(gateway, &line);
        serde_json::to_writer(&mut writer, &resp)?;
        writer.write_all(b"\n")?;
        writer.flush()?;
        if stop {
            shutdown.store(true, Ordering::SeqCst);
            return Ok(());
        }
    }
}

/// Minimal blocking client used by the CLI and tests.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Ok(Self {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    pub fn send_raw(&mut self, line: &str) -> Result<Response> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        self.writer.flush()?;
        let mut resp = String::new();
        if self.reader.read_line(&mut resp)? == 0 {
            return Err(io::Error::new(ErrorKind::UnexpectedEof, "server closed the connection").into());
        }
        serde_json::from_str(&resp).map_err(|e| LadsError::Parse(e.to_string()))
    }

    pub fn send(&mut self, req: &Request) -> Result<Response> {
        let line = serde_json::to_string(req).map_err(|e| LadsError::Parse(e.to_string()))?;
        self.send_raw(&line)
    }
}
