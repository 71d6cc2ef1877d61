//! Binary TCP protocol for driving environments remotely.
//!
//! Every frame is `u32` little-endian payload length, `u8` tag, payload.
//!
//! | tag | message | payload |
//! |-----|---------|---------|
//! | 1 | HELLO | `u32` protocol version |
//! | 2 | CONFIG | environment TOML (UTF-8); the reply echoes the effective config |
//! | 3 | RESET | empty; reply OBS |
//! | 4 | STEP | `u8` action 0..=3; reply OBS then RESULT |
//! | 5 | OBS | `u8` dtype, `u8` rank, rank x `u32` extents, values |
//! | 6 | RESULT | `f32` reward, `u8` terminated, `u8` truncated, `u8` success |
//! | 7 | ERROR | `u16` code, UTF-8 message |
//! | 8 | CLOSE | empty |

use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use thiserror::Error;

use crate::env::{Action, Env, EnvConfig};
use crate::obs::{AgentEnv, Observation};

pub const PROTOCOL_VERSION: u32 = 1;
pub const DEFAULT_PORT: u16 = 7480;
pub const MAX_PAYLOAD: usize = 64 << 20;

pub const TAG_HELLO: u8 = 1;
pub const TAG_CONFIG: u8 = 2;
pub const TAG_RESET: u8 = 3;
pub const TAG_STEP: u8 = 4;
pub const TAG_OBS: u8 = 5;
pub const TAG_RESULT: u8 = 6;
pub const TAG_ERROR: u8 = 7;
pub const TAG_CLOSE: u8 = 8;

pub const DTYPE_F32: u8 = 1;

pub mod codes {
    pub const MALFORMED: u16 = 1;
    pub const UNKNOWN_TAG: u16 = 2;
    pub const NOT_HELLO: u16 = 3;
    pub const VERSION: u16 = 4;
    pub const BAD_CONFIG: u16 = 5;
    pub const UNEXPECTED: u16 = 6;
    pub const TIMEOUT: u16 = 8;
    pub const TOO_LARGE: u16 = 9;
    pub const NO_EPISODE: u16 = 10;
    pub const BAD_ACTION: u16 = 11;
    pub const ENV_FAILURE: u16 = 12;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObsPayload {
    pub extents: Vec<u32>,
    pub data: Vec<f32>,
}

impl ObsPayload {
    /// Values in the layout selected by `transpose`, cast to `f32`.
    pub fn from_observation(obs: &Observation, transpose: bool) -> ObsPayload {
        ObsPayload {
            extents: obs
                .values_shape(transpose)
                .iter()
                .map(|&d| d as u32)
                .collect(),
            data: obs
                .values(transpose)
                .into_iter()
                .map(|v| v as f32)
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello {
        version: u32,
    },
    Config {
        toml: String,
    },
    Reset,
    Step {
        action: u8,
    },
    Obs(ObsPayload),
    Result {
        reward: f32,
        terminated: bool,
        truncated: bool,
        success: bool,
    },
    Error {
        code: u16,
        message: String,
    },
    Close,
}

#[derive(Debug, Error)]
pub enum WireError {
    #[error("short frame: need {need} bytes, have {have}")]
    Short { need: usize, have: usize },
    #[error("payload of {0} bytes exceeds the 64 MiB limit")]
    TooLarge(usize),
    #[error("unknown tag {0}")]
    UnknownTag(u8),
    #[error("malformed {tag} payload: {reason}")]
    Malformed { tag: u8, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Message {
    pub fn tag(&self) -> u8 {
        match self {
            Message::Hello { .. } => TAG_HELLO,
            Message::Config { .. } => TAG_CONFIG,
            Message::Reset => TAG_RESET,
            Message::Step { .. } => TAG_STEP,
            Message::Obs(_) => TAG_OBS,
            Message::Result { .. } => TAG_RESULT,
            Message::Error { .. } => TAG_ERROR,
            Message::Close => TAG_CLOSE,
        }
    }

    pub fn error(code: u16, message: impl Into<String>) -> Message {
        Message::Error {
            code,
            message: message.into(),
        }
    }

    fn payload(&self) -> Vec<u8> {
        match self {
            Message::Hello { version } => version.to_le_bytes().to_vec(),
            Message::Config { toml } => toml.as_bytes().to_vec(),
            Message::Reset | Message::Close => vec![],
            Message::Step { action } => vec![*action],
            Message::Obs(o) => {
                let mut p = Vec::with_capacity(2 + 4 * o.extents.len() + 4 * o.data.len());
                p.push(DTYPE_F32);
                p.push(o.extents.len() as u8);
                for e in &o.extents {
                    p.extend_from_slice(&e.to_le_bytes());
                }
                for v in &o.data {
                    p.extend_from_slice(&v.to_le_bytes());
                }
                p
            }
            Message::Result {
                reward,
                terminated,
                truncated,
                success,
            } => {
                let mut p = reward.to_le_bytes().to_vec();
                p.extend([*terminated as u8, *truncated as u8, *success as u8]);
                p
            }
            Message::Error { code, message } => {
                let mut p = code.to_le_bytes().to_vec();
                p.extend_from_slice(message.as_bytes());
                p
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload = self.payload();
        let mut out = Vec::with_capacity(5 + payload.len());
        out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
        out.push(self.tag());
        out.extend_from_slice(&payload);
        out
    }

    /// Parses a payload for `tag`.
    pub fn from_payload(tag: u8, p: &[u8]) -> Result<Message, WireError> {
        let bad = |reason: &str| WireError::Malformed {
            tag,
            reason: reason.into(),
        };
        let exact = |n: usize| {
            if p.len() == n {
                Ok(())
            } else {
                Err(bad(&format!("expected {n} bytes, got {}", p.len())))
            }
        };
        Ok(match tag {
            TAG_HELLO => {
                exact(4)?;
                Message::Hello {
                    version: u32::from_le_bytes(p.try_into().expect("4 bytes")),
                }
            }
            TAG_CONFIG => Message::Config {
                toml: String::from_utf8(p.to_vec()).map_err(|_| bad("config is not UTF-8"))?,
            },
            TAG_RESET => {
                exact(0)?;
                Message::Reset
            }
            TAG_STEP => {
                exact(1)?;
                Message::Step { action: p[0] }
            }
            TAG_OBS => {
                if p.len() < 2 {
                    return Err(bad("missing dtype/rank"));
                }
                if p[0] != DTYPE_F32 {
                    return Err(bad(&format!("unsupported dtype {}", p[0])));
                }
                let rank = p[1] as usize;
                let head = 2 + 4 * rank;
                if p.len() < head {
                    return Err(bad("truncated extents"));
                }
                let extents: Vec<u32> = p[2..head]
                    .chunks_exact(4)
                    .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                let n = extents
                    .iter()
                    .try_fold(1usize, |a, &e| a.checked_mul(e as usize));
                match n.and_then(|n| n.checked_mul(4)) {
                    Some(bytes) if bytes == p.len() - head => {}
                    _ => return Err(bad("value count does not match extents")),
                }
                Message::Obs(ObsPayload {
                    extents,
                    data: p[head..]
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect(),
                })
            }
            TAG_RESULT => {
                exact(7)?;
                let flag = |b: u8| match b {
                    0 => Ok(false),
                    1 => Ok(true),
                    _ => Err(bad("flag is not 0 or 1")),
                };
                Message::Result {
                    reward: f32::from_le_bytes(p[0..4].try_into().expect("4 bytes")),
                    terminated: flag(p[4])?,
                    truncated: flag(p[5])?,
                    success: flag(p[6])?,
                }
            }
            TAG_ERROR => {
                if p.len() < 2 {
                    return Err(bad("missing code"));
                }
                Message::Error {
                    code: u16::from_le_bytes([p[0], p[1]]),
                    message: String::from_utf8(p[2..].to_vec())
                        .map_err(|_| bad("message is not UTF-8"))?,
                }
            }
            TAG_CLOSE => {
                exact(0)?;
                Message::Close
            }
            other => return Err(WireError::UnknownTag(other)),
        })
    }

    /// Decodes one frame from the front of `bytes`, returning the message and
    /// the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(Message, usize), WireError> {
        if bytes.len() < 5 {
            return Err(WireError::Short {
                need: 5,
                have: bytes.len(),
            });
        }
        let len = u32::from_le_bytes(bytes[0..4].try_into().expect("4 bytes")) as usize;
        if len > MAX_PAYLOAD {
            return Err(WireError::TooLarge(len));
        }
        if bytes.len() < 5 + len {
            return Err(WireError::Short {
                need: 5 + len,
                have: bytes.len(),
            });
        }
        Ok((
            Message::from_payload(bytes[4], &bytes[5..5 + len])?,
            5 + len,
        ))
    }
}

/// A frame read from a stream whose payload may not parse.
pub struct RawFrame {
    pub tag: u8,
    pub payload: Vec<u8>,
}

/// Reads exactly one frame. Oversized frames are rejected before their
/// payload is read.
pub fn read_frame<R: Read>(r: &mut R) -> Result<RawFrame, WireError> {
    let mut head = [0u8; 5];
    r.read_exact(&mut head)?;
    let len = u32::from_le_bytes(head[0..4].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let mut payload = vec![0u8; len];
    r.read_exact(&mut payload)?;
    Ok(RawFrame {
        tag: head[4],
        payload,
    })
}

pub fn read_message<R: Read>(r: &mut R) -> Result<Message, WireError> {
    let f = read_frame(r)?;
    Message::from_payload(f.tag, &f.payload)
}

pub fn write_message<W: Write>(w: &mut W, m: &Message) -> io::Result<()> {
    w.write_all(&m.encode())?;
    w.flush()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SessionState {
    AwaitingHello,
    Configured,
    EpisodeActive,
    Closed,
}

/// Protocol state for one connection; transport-independent.
pub struct Session {
    state: SessionState,
    config: EnvConfig,
    env: Option<AgentEnv>,
}

impl Session {
    pub fn new(config: EnvConfig) -> Session {
        Session {
            state: SessionState::AwaitingHello,
            config,
            env: None,
        }
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    fn violation(&mut self, code: u16, message: impl Into<String>) -> Vec<Message> {
        if self.state == SessionState::EpisodeActive {
            self.state = SessionState::Configured;
        }
        vec![Message::error(code, message)]
    }

    fn env(&mut self) -> Result<&mut AgentEnv, crate::env::EnvError> {
        if self.env.is_none() {
            self.env = Some(AgentEnv::new(Env::new(self.config.clone())?));
        }
        Ok(self.env.as_mut().expect("just created"))
    }

    /// Replies to one decoded request.
    pub fn handle(&mut self, msg: Message) -> Vec<Message> {
        use SessionState::*;
        match (self.state, msg) {
            (Closed, _) => vec![],
            (_, Message::Close) => {
                self.state = Closed;
                self.env = None;
                vec![Message::Close]
            }
            (AwaitingHello, Message::Hello { version }) => {
                if version != PROTOCOL_VERSION {
                    return vec![Message::error(
                        codes::VERSION,
                        format!("unsupported protocol version {version}; server speaks {PROTOCOL_VERSION}"),
                    )];
                }
                self.state = Configured;
                vec![Message::Hello {
                    version: PROTOCOL_VERSION,
                }]
            }
            (AwaitingHello, _) => vec![Message::error(codes::NOT_HELLO, "expected HELLO")],
            (_, Message::Hello { .. }) => {
                self.violation(codes::UNEXPECTED, "HELLO already received")
            }
            (_, Message::Config { toml }) => match EnvConfig::from_toml(&toml) {
                Ok(c) => {
                    self.config = c;
                    self.env = None;
                    self.state = Configured;
                    vec![Message::Config {
                        toml: self.config.to_toml(),
                    }]
                }
                Err(e) => self.violation(codes::BAD_CONFIG, e.to_string()),
            },
            (_, Message::Reset) => {
                let transpose = self.config.transpose;
                let obs = match self.env().map_err(|e| e.to_string()) {
                    Ok(env) => env.reset().map_err(|e| e.to_string()),
                    Err(e) => Err(e),
                };
                match obs {
                    Ok(o) => {
                        self.state = EpisodeActive;
                        vec![Message::Obs(ObsPayload::from_observation(&o, transpose))]
                    }
                    Err(e) => self.violation(codes::ENV_FAILURE, e),
                }
            }
            (Configured, Message::Step { .. }) => {
                vec![Message::error(codes::NO_EPISODE, "no active episode")]
            }
            (EpisodeActive, Message::Step { action }) => {
                let Some(a) = Action::from_index(action as usize) else {
                    return self.violation(
                        codes::BAD_ACTION,
                        format!("action {action} is not in 0..=3"),
                    );
                };
                let transpose = self.config.transpose;
                let env = self.env.as_mut().expect("active episode has an env");
                match env.step(a) {
                    Ok((o, s)) => {
                        if s.terminated || s.truncated {
                            self.state = Configured;
                        }
                        vec![
                            Message::Obs(ObsPayload::from_observation(&o, transpose)),
                            Message::Result {
                                reward: s.reward as f32,
                                terminated: s.terminated,
                                truncated: s.truncated,
                                success: s.info.success,
                            },
                        ]
                    }
                    Err(e) => self.violation(codes::ENV_FAILURE, e.to_string()),
                }
            }
            (_, m) => self.violation(
                codes::UNEXPECTED,
                format!("tag {} is a server-to-client message", m.tag()),
            ),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ServerConfig {
    pub env: EnvConfig,
    /// Longest wait for the next byte of a frame before the session is closed.
    pub read_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        ServerConfig {
            env: EnvConfig::default(),
            read_timeout: Duration::from_secs(60),
        }
    }
}

fn serve_connection(mut stream: TcpStream, cfg: &ServerConfig) -> io::Result<()> {
    stream.set_read_timeout(Some(cfg.read_timeout))?;
    stream.set_nodelay(true)?;
    let mut session = Session::new(cfg.env.clone());
    let mut reader = io::BufReader::new(stream.try_clone()?);
    while session.state() != SessionState::Closed {
        let frame = match read_frame(&mut reader) {
            Ok(f) => f,
            Err(WireError::Io(e))
                if matches!(
                    e.kind(),
                    io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut
                ) =>
            {
                write_message(
                    &mut stream,
                    &Message::error(codes::TIMEOUT, "read timed out"),
                )?;
                write_message(&mut stream, &Message::Close)?;
                return Ok(());
            }
            Err(WireError::Io(e)) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(WireError::TooLarge(n)) => {
                write_message(
                    &mut stream,
                    &Message::error(
                        codes::TOO_LARGE,
                        format!("payload of {n} bytes exceeds 64 MiB"),
                    ),
                )?;
                write_message(&mut stream, &Message::Close)?;
                return Ok(());
            }
            Err(e) => return Err(io::Error::other(e)),
        };
        let replies = match Message::from_payload(frame.tag, &frame.payload) {
            Ok(m) => session.handle(m),
            Err(WireError::UnknownTag(t)) => vec![Message::error(
                codes::UNKNOWN_TAG,
                format!("unknown tag {t}"),
            )],
            Err(e) => vec![Message::error(codes::MALFORMED, e.to_string())],
        };
        let mut out = Vec::new();
        for m in &replies {
            out.extend_from_slice(&m.encode());
        }
        stream.write_all(&out)?;
        stream.flush()?;
    }
    Ok(())
}

/// A bound listener; each accepted connection gets its own thread and
/// environment.
pub struct Server {
    listener: TcpListener,
    config: ServerConfig,
    shutdown: Arc<AtomicBool>,
}

impl Server {
    pub fn bind<A: ToSocketAddrs>(addr: A, config: ServerConfig) -> io::Result<Server> {
        Ok(Server {
            listener: TcpListener::bind(addr)?,
            config,
            shutdown: Arc::new(AtomicBool::new(false)),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Accepts connections until [`ServerHandle::shutdown`] is called.
    pub fn run(self) -> io::Result<()> {
        for conn in self.listener.incoming() {
            if self.shutdown.load(Ordering::SeqCst) {
                break;
            }
            let stream = match conn {
                Ok(s) => s,
                Err(_) => continue,
            };
            let cfg = self.config.clone();
            std::thread::spawn(move || {
                let _ = serve_connection(stream, &cfg);
            });
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> io::Result<ServerHandle> {
        let addr = self.local_addr()?;
        let shutdown = self.shutdown.clone();
        let thread = std::thread::spawn(move || self.run());
        Ok(ServerHandle {
            addr,
            shutdown,
            thread: Some(thread),
        })
    }
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    shutdown: Arc<AtomicBool>,
    thread: Option<JoinHandle<io::Result<()>>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves the default environment configuration forever.
pub fn serve(addr: &str) -> io::Result<()> {
    let server = Server::bind(addr, ServerConfig::default())?;
    eprintln!("listening on {}", server.local_addr()?);
    server.run()
}

/// Blocking client for the protocol.
pub struct Client {
    stream: TcpStream,
}

impl Client {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> io::Result<Client> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(Client { stream })
    }

    pub fn send(&mut self, m: &Message) -> io::Result<()> {
        write_message(&mut self.stream, m)
    }

    pub fn send_raw(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.stream.write_all(bytes)?;
        self.stream.flush()
    }

    pub fn recv(&mut self) -> Result<Message, WireError> {
        read_message(&mut self.stream)
    }

    pub fn request(&mut self, m: &Message) -> Result<Message, WireError> {
        self.send(m)?;
        self.recv()
    }

    pub fn set_read_timeout(&self, d: Option<Duration>) -> io::Result<()> {
        self.stream.set_read_timeout(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn step_is_one_byte() {
        assert_eq!(
            Message::Step { action: 2 }.encode(),
            vec![1, 0, 0, 0, TAG_STEP, 2]
        );
    }

    #[test]
    fn short_and_oversized_frames() {
        assert!(matches!(
            Message::decode(&[1, 0, 0]),
            Err(WireError::Short { .. })
        ));
        assert!(matches!(
            Message::decode(&[2, 0, 0, 0, TAG_STEP, 1]),
            Err(WireError::Short { .. })
        ));
        let big = ((MAX_PAYLOAD + 1) as u32).to_le_bytes();
        assert!(matches!(
            Message::decode(&[big[0], big[1], big[2], big[3], TAG_RESET]),
            Err(WireError::TooLarge(_))
        ));
    }

    #[test]
    fn session_state_machine() {
        let mut s = Session::new(EnvConfig {
            obs_size: 28,
            noops: 2,
            ..EnvConfig::default()
        });
        assert!(matches!(
            s.handle(Message::Reset)[0],
            Message::Error {
                code: codes::NOT_HELLO,
                ..
            }
        ));
        assert_eq!(
            s.handle(Message::Hello { version: 1 }),
            vec![Message::Hello { version: 1 }]
        );
        assert!(matches!(
            s.handle(Message::Step { action: 0 })[0],
            Message::Error {
                code: codes::NO_EPISODE,
                ..
            }
        ));
        assert!(matches!(s.handle(Message::Reset)[0], Message::Obs(_)));
        assert_eq!(s.state(), SessionState::EpisodeActive);
        assert!(matches!(
            s.handle(Message::Step { action: 9 })[0],
            Message::Error {
                code: codes::BAD_ACTION,
                ..
            }
        ));
        assert_eq!(s.state(), SessionState::Configured);
        assert_eq!(s.handle(Message::Close), vec![Message::Close]);
        assert_eq!(s.state(), SessionState::Closed);
    }
}
