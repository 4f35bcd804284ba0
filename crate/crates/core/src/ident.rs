//! Ident-style identity query: line codec, responder and client.
//!
//! Wire format, one ASCII line each way:
//!
//! ```text
//! UBFIDENT/1 <TCP|UDP> <client_ip> <client_port> <server_ip> <server_port>\n
//! OK <uid> <egid> <username>\n
//! ERR <NO-SOCKET|INVALID|UNSUPPORTED-PROTO>\n
//! ```
//!
//! The receiving host sends the query to the initiating host, naming the
//! initiator's socket by its local port and the remote end it is connected to.

use std::fmt;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::str;
use std::sync::{Arc, RwLock};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::directory::{is_valid_name, Directory, GroupId, UserId};
use crate::host::{Host, SocketOwner, SocketRole};
use crate::net::{is_valid_addr, Endpoint, Proto};

pub const VERSION_TAG: &str = "UBFIDENT/1";
pub const MAX_LINE_LEN: usize = 256;
pub const DEFAULT_PORT: u16 = 10113;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(200);

const MAX_PROTO_TOKEN: usize = 16;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct IdentQuery {
    pub proto: Proto,
    pub client_ip: String,
    pub client_port: u16,
    pub server_ip: String,
    pub server_port: u16,
}

impl IdentQuery {
    pub fn new(proto: Proto, client: &Endpoint, server: &Endpoint) -> Self {
        Self {
            proto,
            client_ip: client.host.clone(),
            client_port: client.port,
            server_ip: server.host.clone(),
            server_port: server.port,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    #[serde(rename = "NO-SOCKET")]
    NoSocket,
    #[serde(rename = "INVALID")]
    Invalid,
    #[serde(rename = "UNSUPPORTED-PROTO")]
    UnsupportedProto,
}

impl ErrorCode {
    pub const ALL: [ErrorCode; 3] = [ErrorCode::NoSocket, ErrorCode::Invalid, ErrorCode::UnsupportedProto];

    pub fn as_str(self) -> &'static str {
        match self {
            ErrorCode::NoSocket => "NO-SOCKET",
            ErrorCode::Invalid => "INVALID",
            ErrorCode::UnsupportedProto => "UNSUPPORTED-PROTO",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == s)
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum IdentResponse {
    Ok { uid: UserId, egid: GroupId, username: String },
    Err(ErrorCode),
}

impl From<SocketOwner> for IdentResponse {
    fn from(o: SocketOwner) -> Self {
        IdentResponse::Ok { uid: o.uid, egid: o.egid, username: o.username }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("line longer than {MAX_LINE_LEN} bytes")]
    TooLong,
    #[error("line is not terminated by a single trailing newline")]
    Unterminated,
    #[error("line contains non-printable or non-ASCII bytes")]
    BadBytes,
    #[error("expected {expected} fields, found {found}")]
    FieldCount { expected: usize, found: usize },
    #[error("unknown version tag")]
    BadVersion,
    #[error("bad token {0:?}")]
    BadToken(String),
    #[error("unsupported protocol {0:?}")]
    UnsupportedProto(String),
    #[error("bad port {0:?}")]
    BadPort(String),
    #[error("bad number {0:?}")]
    BadNumber(String),
    #[error("unknown response code {0:?}")]
    BadCode(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EncodeError {
    #[error("bad address token {0:?}")]
    BadAddr(String),
    #[error("bad username {0:?}")]
    BadUsername(String),
}

fn split_line(line: &[u8]) -> Result<Vec<&str>, DecodeError> {
    if line.len() > MAX_LINE_LEN {
        return Err(DecodeError::TooLong);
    }
    let body = match line.split_last() {
        Some((b'\n', body)) => body,
        _ => return Err(DecodeError::Unterminated),
    };
    if body.contains(&b'\n') {
        return Err(DecodeError::Unterminated);
    }
    if !body.iter().all(|b| (0x20..0x7f).contains(b)) {
        return Err(DecodeError::BadBytes);
    }
    // printable ASCII is valid UTF-8
    Ok(str::from_utf8(body).unwrap().split(' ').collect())
}

fn parse_decimal(tok: &str, max: u64) -> Option<u64> {
    let canonical = !tok.is_empty()
        && tok.len() <= 10
        && tok.bytes().all(|b| b.is_ascii_digit())
        && (tok == "0" || !tok.starts_with('0'));
    if !canonical {
        return None;
    }
    tok.parse::<u64>().ok().filter(|v| *v <= max)
}

fn parse_port(tok: &str) -> Result<u16, DecodeError> {
    parse_decimal(tok, u16::MAX as u64)
        .map(|v| v as u16)
        .ok_or_else(|| DecodeError::BadPort(tok.to_owned()))
}

fn parse_addr(tok: &str) -> Result<String, DecodeError> {
    if is_valid_addr(tok) {
        Ok(tok.to_owned())
    } else {
        Err(DecodeError::BadToken(tok.to_owned()))
    }
}

pub fn encode_query(q: &IdentQuery) -> Result<Vec<u8>, EncodeError> {
    for addr in [&q.client_ip, &q.server_ip] {
        if !is_valid_addr(addr) {
            return Err(EncodeError::BadAddr(addr.clone()));
        }
    }
    Ok(format!(
        "{VERSION_TAG} {} {} {} {} {}\n",
        q.proto, q.client_ip, q.client_port, q.server_ip, q.server_port
    )
    .into_bytes())
}

pub fn decode_query(line: &[u8]) -> Result<IdentQuery, DecodeError> {
    let fields = split_line(line)?;
    if fields.len() != 6 {
        return Err(DecodeError::FieldCount { expected: 6, found: fields.len() });
    }
    if fields[0] != VERSION_TAG {
        return Err(DecodeError::BadVersion);
    }
    let proto_tok = fields[1];
    let proto_shaped = !proto_tok.is_empty()
        && proto_tok.len() <= MAX_PROTO_TOKEN
        && proto_tok.bytes().all(|b| b.is_ascii_uppercase() || b.is_ascii_digit());
    if !proto_shaped {
        return Err(DecodeError::BadToken(proto_tok.to_owned()));
    }
    let proto = proto_tok
        .parse::<Proto>()
        .map_err(|e| DecodeError::UnsupportedProto(e.0))?;
    Ok(IdentQuery {
        proto,
        client_ip: parse_addr(fields[2])?,
        client_port: parse_port(fields[3])?,
        server_ip: parse_addr(fields[4])?,
        server_port: parse_port(fields[5])?,
    })
}

pub fn encode_response(r: &IdentResponse) -> Result<Vec<u8>, EncodeError> {
    let line = match r {
        IdentResponse::Ok { uid, egid, username } => {
            if !is_valid_name(username) {
                return Err(EncodeError::BadUsername(username.clone()));
            }
            format!("OK {uid} {egid} {username}\n")
        }
        IdentResponse::Err(code) => format!("ERR {code}\n"),
    };
    Ok(line.into_bytes())
}

pub fn decode_response(line: &[u8]) -> Result<IdentResponse, DecodeError> {
    let fields = split_line(line)?;
    match fields.first().copied() {
        Some("OK") => {
            if fields.len() != 4 {
                return Err(DecodeError::FieldCount { expected: 4, found: fields.len() });
            }
            let num = |tok: &str| {
                parse_decimal(tok, u32::MAX as u64)
                    .map(|v| v as u32)
                    .ok_or_else(|| DecodeError::BadNumber(tok.to_owned()))
            };
            let uid = UserId(num(fields[1])?);
            let egid = GroupId(num(fields[2])?);
            if !is_valid_name(fields[3]) {
                return Err(DecodeError::BadToken(fields[3].to_owned()));
            }
            Ok(IdentResponse::Ok { uid, egid, username: fields[3].to_owned() })
        }
        Some("ERR") => {
            if fields.len() != 2 {
                return Err(DecodeError::FieldCount { expected: 2, found: fields.len() });
            }
            ErrorCode::parse(fields[1])
                .map(IdentResponse::Err)
                .ok_or_else(|| DecodeError::BadCode(fields[1].to_owned()))
        }
        _ => Err(DecodeError::BadToken(fields[0].to_owned())),
    }
}

/// Answers a query about one of `host`'s outbound sockets. Never mutates the host.
pub fn respond(host: &Host, dir: &Directory, q: &IdentQuery) -> IdentResponse {
    if q.client_ip != host.address {
        return IdentResponse::Err(ErrorCode::NoSocket);
    }
    let remote = Endpoint::new(q.server_ip.clone(), q.server_port);
    host.lookup_socket_owner(dir, q.proto, q.client_port, SocketRole::Outbound, Some(&remote))
        .map_or(IdentResponse::Err(ErrorCode::NoSocket), IdentResponse::from)
}

/// Decodes a raw request line and answers it; malformed input maps to an `ERR` response.
pub fn respond_line(host: &Host, dir: &Directory, line: &[u8]) -> IdentResponse {
    match decode_query(line) {
        Ok(q) => respond(host, dir, &q),
        Err(DecodeError::UnsupportedProto(_)) => IdentResponse::Err(ErrorCode::UnsupportedProto),
        Err(_) => IdentResponse::Err(ErrorCode::Invalid),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportFailure {
    #[error("deadline exceeded")]
    TimedOut,
    #[error("transport failure: {0}")]
    Failed(String),
}

/// Carries one request line to a peer's responder and returns the reply line.
///
/// Implementations must give up once `timeout` has elapsed.
pub trait IdentTransport {
    fn exchange(&self, peer: &str, request: &[u8], timeout: Duration) -> Result<Vec<u8>, TransportFailure>;
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QueryOutcome {
    Response(IdentResponse),
    Timeout,
    TransportError,
}

pub fn query_remote(
    transport: &dyn IdentTransport,
    peer: &str,
    q: &IdentQuery,
    timeout: Duration,
) -> QueryOutcome {
    if timeout.is_zero() {
        return QueryOutcome::Timeout;
    }
    let Ok(request) = encode_query(q) else {
        return QueryOutcome::TransportError;
    };
    match transport.exchange(peer, &request, timeout) {
        Ok(reply) => match decode_response(&reply) {
            Ok(resp) => QueryOutcome::Response(resp),
            Err(_) => QueryOutcome::TransportError,
        },
        Err(TransportFailure::TimedOut) => QueryOutcome::Timeout,
        Err(TransportFailure::Failed(_)) => QueryOutcome::TransportError,
    }
}

/// Reads bytes up to and including the first newline, at most `MAX_LINE_LEN + 1` bytes.
fn read_line_bounded(stream: &mut TcpStream, deadline: Option<Instant>) -> io::Result<Vec<u8>> {
    let mut buf = Vec::with_capacity(64);
    let mut byte = [0u8; 1];
    while buf.len() <= MAX_LINE_LEN {
        if let Some(deadline) = deadline {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(io::ErrorKind::TimedOut.into());
            }
            stream.set_read_timeout(Some(left))?;
        }
        match stream.read(&mut byte)? {
            0 => break,
            _ => {
                buf.push(byte[0]);
                if byte[0] == b'\n' {
                    break;
                }
            }
        }
    }
    Ok(buf)
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), io::ErrorKind::TimedOut | io::ErrorKind::WouldBlock)
}

/// TCP transport to a responder listening on a fixed port of every peer.
#[derive(Debug, Clone)]
pub struct TcpTransport {
    pub port: u16,
}

impl Default for TcpTransport {
    fn default() -> Self {
        Self { port: DEFAULT_PORT }
    }
}

impl IdentTransport for TcpTransport {
    fn exchange(&self, peer: &str, request: &[u8], timeout: Duration) -> Result<Vec<u8>, TransportFailure> {
        let deadline = Instant::now() + timeout;
        let fail = |e: io::Error| {
            if is_timeout(&e) {
                TransportFailure::TimedOut
            } else {
                TransportFailure::Failed(e.to_string())
            }
        };
        let addr = (peer, self.port)
            .to_socket_addrs()
            .map_err(fail)?
            .next()
            .ok_or_else(|| TransportFailure::Failed(format!("no address for {peer}")))?;
        let mut stream = TcpStream::connect_timeout(&addr, timeout).map_err(fail)?;
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(TransportFailure::TimedOut);
        }
        stream.set_write_timeout(Some(left)).map_err(fail)?;
        stream.write_all(request).map_err(fail)?;
        read_line_bounded(&mut stream, Some(deadline)).map_err(fail)
    }
}

/// The state a responder answers from.
#[derive(Debug, Clone)]
pub struct Registry {
    pub directory: Directory,
    pub host: Host,
}

/// Blocking TCP responder, one thread per connection.
pub struct IdentServer {
    listener: TcpListener,
    registry: Arc<RwLock<Registry>>,
}

const SERVER_READ_TIMEOUT: Duration = Duration::from_secs(5);

impl IdentServer {
    pub fn bind(addr: impl ToSocketAddrs, registry: Arc<RwLock<Registry>>) -> io::Result<Self> {
        Ok(Self { listener: TcpListener::bind(addr)?, registry })
    }

    pub fn local_addr(&self) -> io::Result<std::net::SocketAddr> {
        self.listener.local_addr()
    }

    pub fn run(self) -> io::Result<()> {
        for conn in self.listener.incoming() {
            let Ok(stream) = conn else { continue };
            let registry = Arc::clone(&self.registry);
            thread::spawn(move || {
                let _ = handle_connection(stream, &registry);
            });
        }
        Ok(())
    }

    pub fn spawn(self) -> thread::JoinHandle<io::Result<()>> {
        thread::spawn(move || self.run())
    }
}

fn handle_connection(mut stream: TcpStream, registry: &RwLock<Registry>) -> io::Result<()> {
    stream.set_read_timeout(Some(SERVER_READ_TIMEOUT))?;
    let line = read_line_bounded(&mut stream, None)?;
    let response = {
        let reg = registry.read().unwrap_or_else(|e| e.into_inner());
        respond_line(&reg.host, &reg.directory, &line)
    };
    let bytes = encode_response(&response).unwrap_or_else(|_| b"ERR INVALID\n".to_vec());
    stream.write_all(&bytes)?;
    stream.flush()
}
