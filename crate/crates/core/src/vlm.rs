//! HTTP client for external captioning models, plus a scriptable mock server.
//!
//! Wire contract: `POST <endpoint>` with JSON body
//! `{"model", "image" (base64 SVG), "prompt", "n_segments"}`; the endpoint
//! answers `{"captions": ["...", ...]}` with exactly `n_segments` non-empty
//! strings in segment-index order. Transport and validation failures are
//! retried with a configurable backoff schedule.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Client-side knobs for the captioning endpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VlmClientConfig {
    /// Full endpoint URL, e.g. `http://127.0.0.1:8080/caption`.
    pub endpoint: String,
    /// Model identifier echoed in the request body.
    pub model: String,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    /// Retries after the first attempt; total attempts = max_retries + 1.
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    /// Sleep schedule between attempts, in milliseconds; the last entry
    /// repeats. Empty means no sleeping.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: Vec<u64>,
}

fn default_timeout_secs() -> u64 {
    30
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> Vec<u64> {
    vec![250, 1000, 4000]
}

impl Default for VlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8080/caption".into(),
            model: "mock-captioner".into(),
            timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

#[derive(Serialize)]
struct CaptionRequest<'a> {
    model: &'a str,
    image: String,
    prompt: String,
    n_segments: usize,
}

#[derive(Deserialize)]
struct CaptionResponse {
    captions: Vec<String>,
}

/// Captions plus how many attempts the exchange took.
#[derive(Debug, Clone, PartialEq)]
pub struct VlmCaptions {
    pub captions: Vec<String>,
    pub attempts: u32,
}

impl VlmCaptions {
    pub fn retries(&self) -> u32 {
        self.attempts.saturating_sub(1)
    }
}

/// Abstracts the POST so tests can swap the transport.
pub trait VlmTransport {
    fn post_json(&self, endpoint: &str, body: &str, timeout: Duration) -> Result<String>;
}

/// Minimal blocking HTTP/1.1 transport over a plain socket. Expects
/// `http://host[:port]/path` endpoints and `Content-Length` responses,
/// which is all the mock (and any simple proxy) speaks.
pub struct HttpTransport;

impl VlmTransport for HttpTransport {
    fn post_json(&self, endpoint: &str, body: &str, timeout: Duration) -> Result<String> {
        let (host, port, path) = parse_http_url(endpoint)?;
        let stream = TcpStream::connect((host.as_str(), port)).map_err(|e| {
            Error::CaptioningFailed {
                attempts: 1,
                message: format!("connect {host}:{port}: {e}"),
            }
        })?;
        stream.set_read_timeout(Some(timeout)).ok();
        stream.set_write_timeout(Some(timeout)).ok();
        let mut stream = stream;
        let request = format!(
            "POST {path} HTTP/1.1\r\nHost: {host}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        );
        stream
            .write_all(request.as_bytes())
            .map_err(|e| Error::CaptioningFailed {
                attempts: 1,
                message: format!("write request: {e}"),
            })?;
        let mut raw = Vec::new();
        stream
            .read_to_end(&mut raw)
            .map_err(|e| Error::CaptioningFailed {
                attempts: 1,
                message: format!("read response: {e}"),
            })?;
        let text = String::from_utf8_lossy(&raw);
        let (head, body) = text
            .split_once("\r\n\r\n")
            .ok_or_else(|| Error::ValidationFailed("response has no header/body split".into()))?;
        let status_line = head.lines().next().unwrap_or_default();
        let status: u16 = status_line
            .split_whitespace()
            .nth(1)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::ValidationFailed(format!("bad status line: {status_line}")))?;
        if status != 200 {
            return Err(Error::CaptioningFailed {
                attempts: 1,
                message: format!("HTTP {status}: {}", truncate(body, 200)),
            });
        }
        Ok(body.to_string())
    }
}

fn parse_http_url(url: &str) -> Result<(String, u16, String)> {
    let rest = url.strip_prefix("http://").ok_or_else(|| {
        Error::InvalidInput(format!("endpoint must be an http:// URL, got {url:?}"))
    })?;
    let (authority, path) = match rest.find('/') {
        Some(i) => (&rest[..i], &rest[i..]),
        None => (rest, "/"),
    };
    let (host, port) = match authority.rsplit_once(':') {
        Some((h, p)) => (
            h.to_string(),
            p.parse::<u16>()
                .map_err(|_| Error::InvalidInput(format!("bad port in {url:?}")))?,
        ),
        None => (authority.to_string(), 80),
    };
    if host.is_empty() {
        return Err(Error::InvalidInput(format!("empty host in {url:?}")));
    }
    Ok((host, port, path.to_string()))
}

fn truncate(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn prompt_for(n_segments: usize) -> String {
    format!(
        "The image shows one time series in gray with {n_segments} highlighted segment(s), numbered 1 to {n_segments} above their centers. For each segment, describe its local behavior and how it sits relative to the rest of the series. Respond with only a JSON array of exactly {n_segments} strings, one caption per segment, in index order."
    )
}

fn validate_captions(body: &str, n_segments: usize) -> Result<Vec<String>> {
    let parsed: CaptionResponse = serde_json::from_str(body).map_err(|e| {
        Error::ValidationFailed(format!("response is not a captions object: {e}; body: {}", truncate(body, 200)))
    })?;
    if parsed.captions.len() != n_segments {
        return Err(Error::ValidationFailed(format!(
            "expected {n_segments} caption(s), got {}",
            parsed.captions.len()
        )));
    }
    if let Some(i) = parsed.captions.iter().position(|c| c.trim().is_empty()) {
        return Err(Error::ValidationFailed(format!("caption {} is empty", i + 1)));
    }
    Ok(parsed.captions)
}

/// Posts the rendered plot and asks for one caption per segment, retrying
/// with backoff on transport errors and contract violations.
pub fn caption_via_vlm(plot_svg: &str, n_segments: usize, cfg: &VlmClientConfig) -> Result<VlmCaptions> {
    caption_via_vlm_with(&HttpTransport, plot_svg, n_segments, cfg)
}

/// [`caption_via_vlm`] with an injected transport.
pub fn caption_via_vlm_with(
    transport: &dyn VlmTransport,
    plot_svg: &str,
    n_segments: usize,
    cfg: &VlmClientConfig,
) -> Result<VlmCaptions> {
    if n_segments == 0 {
        return Err(Error::InvalidInput("n_segments must be >= 1".into()));
    }
    let request = CaptionRequest {
        model: &cfg.model,
        image: base64::engine::general_purpose::STANDARD.encode(plot_svg.as_bytes()),
        prompt: prompt_for(n_segments),
        n_segments,
    };
    let body = serde_json::to_string(&request).expect("request serialization cannot fail");
    let timeout = Duration::from_secs(cfg.timeout_secs.max(1));

    let total_attempts = cfg.max_retries + 1;
    let mut last_error = None;
    for attempt in 1..=total_attempts {
        if attempt > 1 {
            let idx = (attempt as usize - 2).min(cfg.backoff_ms.len().saturating_sub(1));
            if let Some(&ms) = cfg.backoff_ms.get(idx) {
                std::thread::sleep(Duration::from_millis(ms));
            }
        }
        match transport
            .post_json(&cfg.endpoint, &body, timeout)
            .and_then(|response| validate_captions(&response, n_segments))
        {
            Ok(captions) => {
                return Ok(VlmCaptions {
                    captions,
                    attempts: attempt,
                })
            }
            Err(e) => {
                log::warn!("caption attempt {attempt}/{total_attempts} failed: {e}");
                last_error = Some(e);
            }
        }
    }
    match last_error.expect("at least one attempt ran") {
        Error::ValidationFailed(message) => Err(Error::ValidationFailed(format!(
            "{message} (after {total_attempts} attempt(s))"
        ))),
        other => Err(Error::CaptioningFailed {
            attempts: total_attempts,
            message: other.to_string(),
        }),
    }
}

/// What the mock should do with one request, in arrival order; the last
/// entry repeats for any further requests.
#[derive(Debug, Clone)]
pub enum MockBehavior {
    /// Reply 200 with these captions.
    Captions(Vec<String>),
    /// Reply with an arbitrary status and raw body.
    Raw(u16, String),
    /// Close the connection without answering.
    Hangup,
}

/// A tiny scriptable captioning endpoint bound to a loopback port. Serves
/// one thread, one request at a time; drops cleanly when it goes out of
/// scope.
pub struct MockVlmServer {
    endpoint: String,
    requests: Arc<AtomicUsize>,
    stop: Arc<AtomicBool>,
    port: u16,
    handle: Option<std::thread::JoinHandle<()>>,
}

impl MockVlmServer {
    pub fn start(script: Vec<MockBehavior>) -> std::io::Result<Self> {
        let listener = TcpListener::bind(("127.0.0.1", 0))?;
        let port = listener.local_addr()?.port();
        let requests = Arc::new(AtomicUsize::new(0));
        let stop = Arc::new(AtomicBool::new(false));
        let handle = {
            let requests = Arc::clone(&requests);
            let stop = Arc::clone(&stop);
            std::thread::spawn(move || {
                for stream in listener.incoming() {
                    if stop.load(Ordering::SeqCst) {
                        break;
                    }
                    let Ok(mut stream) = stream else { continue };
                    if read_http_request(&mut stream).is_none() {
                        continue;
                    }
                    let n = requests.fetch_add(1, Ordering::SeqCst);
                    let behavior = script
                        .get(n)
                        .or_else(|| script.last())
                        .cloned()
                        .unwrap_or(MockBehavior::Raw(500, "unscripted".into()));
                    match behavior {
                        MockBehavior::Captions(captions) => {
                            let body =
                                serde_json::json!({ "captions": captions }).to_string();
                            write_http_response(&mut stream, 200, &body);
                        }
                        MockBehavior::Raw(status, body) => {
                            write_http_response(&mut stream, status, &body);
                        }
                        MockBehavior::Hangup => drop(stream),
                    }
                }
            })
        };
        Ok(Self {
            endpoint: format!("http://127.0.0.1:{port}/caption"),
            requests,
            stop,
            port,
            handle: Some(handle),
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }

    pub fn request_count(&self) -> usize {
        self.requests.load(Ordering::SeqCst)
    }
}

impl Drop for MockVlmServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // poke the accept loop so it observes the stop flag
        let _ = TcpStream::connect(("127.0.0.1", self.port));
        if let Some(handle) = self.handle.take() {
            let _ = handle.join();
        }
    }
}

/// Reads one request (headers plus Content-Length body); returns None on a
/// bare wakeup connection with no data.
fn read_http_request(stream: &mut TcpStream) -> Option<String> {
    stream
        .set_read_timeout(Some(Duration::from_millis(500)))
        .ok();
    let mut buf = Vec::new();
    let mut chunk = [0u8; 4096];
    loop {
        let header_end = find_subslice(&buf, b"\r\n\r\n");
        if let Some(end) = header_end {
            let head = String::from_utf8_lossy(&buf[..end]).to_string();
            let content_length = head
                .lines()
                .find_map(|l| {
                    let (k, v) = l.split_once(':')?;
                    k.eq_ignore_ascii_case("content-length")
                        .then(|| v.trim().parse::<usize>().ok())?
                })
                .unwrap_or(0);
            let body_start = end + 4;
            while buf.len() < body_start + content_length {
                match stream.read(&mut chunk) {
                    Ok(0) => break,
                    Ok(n) => buf.extend_from_slice(&chunk[..n]),
                    Err(_) => break,
                }
            }
            let body = String::from_utf8_lossy(&buf[body_start..]).to_string();
            return Some(format!("{head}\r\n\r\n{body}"));
        }
        match stream.read(&mut chunk) {
            Ok(0) => return if buf.is_empty() { None } else { Some(String::new()) },
            Ok(n) => buf.extend_from_slice(&chunk[..n]),
            Err(_) => return if buf.is_empty() { None } else { Some(String::new()) },
        }
    }
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
}

fn write_http_response(stream: &mut TcpStream, status: u16, body: &str) {
    let reason = match status {
        200 => "OK",
        400 => "Bad Request",
        429 => "Too Many Requests",
        500 => "Internal Server Error",
        503 => "Service Unavailable",
        _ => "Status",
    };
    let response = format!(
        "HTTP/1.1 {status} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(response.as_bytes());
}
