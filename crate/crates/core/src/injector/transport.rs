use std::fmt;
use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

use super::{InjectorError, WireMessage};

/// Environment variable naming the engine endpoint (`host:port`).
pub const ENDPOINT_ENV: &str = "KUBEADAPTOR_ENDPOINT";

/// The environment wins over the configured value; with neither, an
/// ephemeral local port.
pub fn resolve_endpoint(configured: Option<&str>) -> String {
    std::env::var(ENDPOINT_ENV)
        .ok()
        .filter(|v| !v.trim().is_empty())
        .or_else(|| configured.map(str::to_string))
        .unwrap_or_else(|| "127.0.0.1:0".to_string())
}

/// A reliable, strictly alternating message pipe.
pub trait Transport: Send {
    fn send(&mut self, msg: &WireMessage) -> Result<(), InjectorError>;
    fn recv(&mut self) -> Result<WireMessage, InjectorError>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, msg: &WireMessage) -> Result<(), InjectorError> {
        (**self).send(msg)
    }

    fn recv(&mut self) -> Result<WireMessage, InjectorError> {
        (**self).recv()
    }
}

/// In-process transport. Frames are still encoded to text so that both
/// transports exercise the same codec.
pub struct ChannelTransport {
    tx: Sender<String>,
    rx: Receiver<String>,
}

pub fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        ChannelTransport { tx: a_tx, rx: a_rx },
        ChannelTransport { tx: b_tx, rx: b_rx },
    )
}

impl Transport for ChannelTransport {
    fn send(&mut self, msg: &WireMessage) -> Result<(), InjectorError> {
        self.tx
            .send(msg.encode())
            .map_err(|_| InjectorError::Disconnected)
    }

    fn recv(&mut self) -> Result<WireMessage, InjectorError> {
        let line = self.rx.recv().map_err(|_| InjectorError::Disconnected)?;
        WireMessage::decode(&line)
    }
}

/// Newline-delimited JSON over a TCP stream.
pub struct StreamTransport {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl StreamTransport {
    pub fn new(stream: TcpStream) -> Result<Self, InjectorError> {
        let writer = stream
            .try_clone()
            .map_err(|e| InjectorError::Transport(e.to_string()))?;
        Ok(StreamTransport {
            reader: BufReader::new(stream),
            writer,
        })
    }

    pub fn connect(endpoint: &str) -> Result<Self, InjectorError> {
        let stream = TcpStream::connect(endpoint).map_err(|e| match e.kind() {
            ErrorKind::ConnectionRefused => InjectorError::ConnectionRefused(endpoint.to_string()),
            _ => InjectorError::Transport(e.to_string()),
        })?;
        Self::new(stream)
    }
}

impl Transport for StreamTransport {
    fn send(&mut self, msg: &WireMessage) -> Result<(), InjectorError> {
        self.writer
            .write_all(msg.encode().as_bytes())
            .and_then(|_| self.writer.flush())
            .map_err(|e| InjectorError::Transport(e.to_string()))
    }

    fn recv(&mut self) -> Result<WireMessage, InjectorError> {
        let mut line = String::new();
        let n = self
            .reader
            .read_line(&mut line)
            .map_err(|e| InjectorError::Transport(e.to_string()))?;
        if n == 0 {
            return Err(InjectorError::Disconnected);
        }
        WireMessage::decode(&line)
    }
}

/// The engine's listening socket.
pub struct EngineListener {
    listener: TcpListener,
}

impl EngineListener {
    pub fn bind(endpoint: &str) -> Result<Self, InjectorError> {
        let listener =
            TcpListener::bind(endpoint).map_err(|e| InjectorError::Transport(e.to_string()))?;
        Ok(EngineListener { listener })
    }

    pub fn local_addr(&self) -> String {
        self.listener
            .local_addr()
            .map(|a| a.to_string())
            .unwrap_or_default()
    }

    pub fn accept(&self) -> Result<StreamTransport, InjectorError> {
        let (stream, _) = self
            .listener
            .accept()
            .map_err(|e| InjectorError::Transport(e.to_string()))?;
        StreamTransport::new(stream)
    }
}

/// One observed frame, from the wrapped side's point of view.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TranscriptEntry {
    pub from: String,
    pub to: String,
    pub message: String,
}

impl fmt::Display for TranscriptEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {}: {}", self.from, self.to, self.message)
    }
}

/// Wraps a transport and logs the type of every frame in order.
pub struct RecordingTransport<T> {
    inner: T,
    local: String,
    peer: String,
    log: Arc<Mutex<Vec<TranscriptEntry>>>,
}

impl<T: Transport> RecordingTransport<T> {
    pub fn new(inner: T, local: &str, peer: &str) -> Self {
        RecordingTransport {
            inner,
            local: local.to_string(),
            peer: peer.to_string(),
            log: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn transcript(&self) -> Arc<Mutex<Vec<TranscriptEntry>>> {
        Arc::clone(&self.log)
    }

    fn note(&self, from: &str, to: &str, msg: &WireMessage) {
        self.log.lock().expect("transcript lock").push(TranscriptEntry {
            from: from.to_string(),
            to: to.to_string(),
            message: msg.type_name().to_string(),
        });
    }
}

impl<T: Transport> Transport for RecordingTransport<T> {
    fn send(&mut self, msg: &WireMessage) -> Result<(), InjectorError> {
        self.note(&self.local, &self.peer, msg);
        self.inner.send(msg)
    }

    fn recv(&mut self) -> Result<WireMessage, InjectorError> {
        let msg = self.inner.recv()?;
        self.note(&self.peer, &self.local, &msg);
        Ok(msg)
    }
}
