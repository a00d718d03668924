//! Client for a scorer sidecar speaking the wire protocol over TCP or a
//! child process's stdio.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::str::FromStr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use super::protocol::{
    encode_score_request, parse_embed_response, parse_health_response, parse_score_response, WireEmbedRequest,
    WireHealthRequest,
};
use super::{Result, ScoreRequest, ScoreResponse, Scorer, ScoringError};
use crate::embed::{EmbedError, Embedder, Embedding};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Tcp(String),
    /// Program and arguments of a sidecar speaking the protocol on stdio.
    Stdio(Vec<String>),
}

impl FromStr for Endpoint {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        if let Some(cmd) = s.strip_prefix("stdio:") {
            let parts: Vec<String> = cmd.split_whitespace().map(str::to_string).collect();
            if parts.is_empty() {
                return Err("stdio endpoint needs a command".into());
            }
            return Ok(Endpoint::Stdio(parts));
        }
        let addr = s.strip_prefix("tcp://").unwrap_or(s);
        if addr
            .rsplit_once(':')
            .is_none_or(|(host, port)| host.is_empty() || port.parse::<u16>().is_err())
        {
            return Err(format!("endpoint `{s}` is neither tcp://host:port nor stdio:<command>"));
        }
        Ok(Endpoint::Tcp(addr.to_string()))
    }
}

impl std::fmt::Display for Endpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Endpoint::Tcp(addr) => write!(f, "tcp://{addr}"),
            Endpoint::Stdio(cmd) => write!(f, "stdio:{}", cmd.join(" ")),
        }
    }
}

enum Connection {
    Tcp {
        reader: BufReader<TcpStream>,
        writer: TcpStream,
    },
    Stdio {
        child: Child,
        stdin: ChildStdin,
        stdout: BufReader<ChildStdout>,
    },
}

impl Connection {
    fn open(endpoint: &Endpoint, timeout: Duration) -> io::Result<Self> {
        match endpoint {
            Endpoint::Tcp(addr) => {
                let sock = addr
                    .to_socket_addrs()?
                    .next()
                    .ok_or_else(|| io::Error::new(io::ErrorKind::NotFound, "address did not resolve"))?;
                let stream = TcpStream::connect_timeout(&sock, timeout)?;
                stream.set_read_timeout(Some(timeout))?;
                stream.set_write_timeout(Some(timeout))?;
                stream.set_nodelay(true)?;
                Ok(Connection::Tcp {
                    reader: BufReader::new(stream.try_clone()?),
                    writer: stream,
                })
            }
            Endpoint::Stdio(cmd) => {
                let mut child = Command::new(&cmd[0])
                    .args(&cmd[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .spawn()?;
                let stdin = child.stdin.take().expect("piped stdin");
                let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
                Ok(Connection::Stdio { child, stdin, stdout })
            }
        }
    }

    fn send(&mut self, line: &str) -> io::Result<()> {
        let w: &mut dyn Write = match self {
            Connection::Tcp { writer, .. } => writer,
            Connection::Stdio { stdin, .. } => stdin,
        };
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
        w.flush()
    }

    fn recv(&mut self) -> io::Result<String> {
        let r: &mut dyn BufRead = match self {
            Connection::Tcp { reader, .. } => reader,
            Connection::Stdio { stdout, .. } => stdout,
        };
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(io::Error::new(
                io::ErrorKind::UnexpectedEof,
                "sidecar closed the connection",
            ));
        }
        Ok(line)
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Connection::Stdio { child, .. } = self {
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

/// Lines read while waiting for a matching id before giving up.
const MAX_STALE_LINES: usize = 64;

/// Scorer backed by a sidecar process.
///
/// Requests are serialised over one connection. I/O failures drop the
/// connection and the request is resent with a fresh id, up to
/// `max_retries` times; protocol violations are not retried.
pub struct RemoteScorer {
    endpoint: Endpoint,
    timeout: Duration,
    max_retries: u32,
    dim: usize,
    conn: Mutex<Option<Connection>>,
    next_id: AtomicU64,
    fingerprint: Mutex<Option<String>>,
    truncations: AtomicU64,
}

impl RemoteScorer {
    pub fn new(endpoint: Endpoint, timeout: Duration, dim: usize) -> Self {
        RemoteScorer {
            endpoint,
            timeout,
            max_retries: 2,
            dim,
            conn: Mutex::new(None),
            next_id: AtomicU64::new(1),
            fingerprint: Mutex::new(None),
            truncations: AtomicU64::new(0),
        }
    }

    pub fn with_max_retries(mut self, retries: u32) -> Self {
        self.max_retries = retries;
        self
    }

    pub fn endpoint(&self) -> &Endpoint {
        &self.endpoint
    }

    /// Responses that arrived flagged as truncated by the sidecar.
    pub fn truncation_warnings(&self) -> u64 {
        self.truncations.load(Ordering::Relaxed)
    }

    fn roundtrip<T>(&self, encode: impl Fn(u64) -> String, decode: impl Fn(&str) -> Result<(u64, T)>) -> Result<T> {
        let mut guard = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let mut last_cause = String::new();
        for attempt in 0..=self.max_retries {
            if guard.is_none() {
                match Connection::open(&self.endpoint, self.timeout) {
                    Ok(c) => *guard = Some(c),
                    Err(e) => {
                        last_cause = format!("connect to {}: {e}", self.endpoint);
                        log::warn!("attempt {attempt}: {last_cause}");
                        continue;
                    }
                }
            }
            let conn = guard.as_mut().expect("connected");
            let id = self.next_id.fetch_add(1, Ordering::Relaxed);
            let outcome = conn.send(&encode(id)).and_then(|_| {
                for _ in 0..MAX_STALE_LINES {
                    let line = conn.recv()?;
                    match decode(&line) {
                        Ok((got, value)) if got == id => return Ok(Ok(value)),
                        Ok(_) => continue,
                        Err(e) => return Ok(Err(e)),
                    }
                }
                Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    "no response carried the request id",
                ))
            });
            match outcome {
                Ok(result) => return result,
                Err(e) => {
                    last_cause = format!("{}: {e}", self.endpoint);
                    log::warn!("attempt {attempt}: {last_cause}");
                    *guard = None;
                }
            }
        }
        Err(ScoringError::Unavailable {
            block_id: None,
            cause: last_cause,
        })
    }

    fn remember_fingerprint(&self, fp: &str) {
        let mut slot = self.fingerprint.lock().unwrap_or_else(|p| p.into_inner());
        if slot.as_deref() != Some(fp) {
            *slot = Some(fp.to_string());
        }
    }

    /// Asks the sidecar for its fingerprint.
    pub fn health(&self) -> Result<String> {
        let fp = self.roundtrip(
            |id| serde_json::to_string(&WireHealthRequest { id, health: true }).expect("serialises"),
            parse_health_response,
        )?;
        self.remember_fingerprint(&fp);
        Ok(fp)
    }
}

impl Scorer for RemoteScorer {
    fn fingerprint(&self) -> String {
        if let Some(fp) = self.fingerprint.lock().unwrap_or_else(|p| p.into_inner()).clone() {
            return fp;
        }
        self.health().unwrap_or_else(|_| format!("remote:{}", self.endpoint))
    }

    fn score(&self, request: &ScoreRequest) -> Result<ScoreResponse> {
        let response = self.roundtrip(
            |id| encode_score_request(id, request),
            |line| parse_score_response(line).map(|r| (r.id, r.response)),
        )?;
        response.validate(request)?;
        if response.truncated {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            log::warn!(
                "sidecar truncated a request ({} target tokens kept)",
                response.token_count
            );
        }
        self.remember_fingerprint(&response.fingerprint);
        Ok(response)
    }

    fn embedder(&self) -> &dyn Embedder {
        self
    }
}

impl Embedder for RemoteScorer {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_batch(&self, texts: &[&str]) -> std::result::Result<Vec<Embedding>, EmbedError> {
        let resp = self
            .roundtrip(
                |id| serde_json::to_string(&WireEmbedRequest { id, embed: texts }).expect("serialises"),
                |line| parse_embed_response(line).map(|r| (r.id, r)),
            )
            .map_err(|e| EmbedError::Provider(e.to_string()))?;
        if resp.embeddings.len() != texts.len() {
            return Err(EmbedError::Provider(format!(
                "asked for {} embeddings, got {}",
                texts.len(),
                resp.embeddings.len()
            )));
        }
        resp.embeddings
            .into_iter()
            .map(|row| {
                let e = Embedding::new(row.into_iter().map(|v| v as f32).collect())?;
                e.check_dim(self.dim)?;
                Ok(e)
            })
            .collect()
    }
}
