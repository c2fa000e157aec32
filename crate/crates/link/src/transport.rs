//! Ordered, reliable byte-stream transports.

use std::io::{self, Read, Write};
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recv {
    Data(Vec<u8>),
    Timeout,
    Closed,
}

pub trait Transport: Send {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()>;

    /// Waits up to `timeout` for bytes.
    fn recv(&mut self, timeout: Duration) -> io::Result<Recv>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        (**self).send(bytes)
    }

    fn recv(&mut self, timeout: Duration) -> io::Result<Recv> {
        (**self).recv(timeout)
    }
}

/// One end of an in-process duplex pipe.
#[derive(Debug)]
pub struct MemoryTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl MemoryTransport {
    pub fn pair() -> (Self, Self) {
        let (a_tx, b_rx) = channel();
        let (b_tx, a_rx) = channel();
        (Self { tx: a_tx, rx: a_rx }, Self { tx: b_tx, rx: b_rx })
    }
}

impl Transport for MemoryTransport {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.tx
            .send(bytes.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "peer closed"))
    }

    fn recv(&mut self, timeout: Duration) -> io::Result<Recv> {
        match self.rx.recv_timeout(timeout) {
            Ok(bytes) => Ok(Recv::Data(bytes)),
            Err(RecvTimeoutError::Timeout) => Ok(Recv::Timeout),
            Err(RecvTimeoutError::Disconnected) => Ok(Recv::Closed),
        }
    }
}

#[derive(Debug)]
pub struct TcpTransport {
    stream: TcpStream,
    buf: Box<[u8]>,
}

impl TcpTransport {
    pub fn new(stream: TcpStream) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        Ok(Self {
            stream,
            buf: vec![0; 64 * 1024].into_boxed_slice(),
        })
    }

    pub fn connect(addr: impl std::net::ToSocketAddrs) -> io::Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }

    pub fn try_clone(&self) -> io::Result<Self> {
        Self::new(self.stream.try_clone()?)
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, bytes: &[u8]) -> io::Result<()> {
        self.stream.write_all(bytes)
    }

    fn recv(&mut self, timeout: Duration) -> io::Result<Recv> {
        self.stream
            .set_read_timeout(Some(timeout.max(Duration::from_micros(1))))?;
        match self.stream.read(&mut self.buf) {
            Ok(0) => Ok(Recv::Closed),
            Ok(n) => Ok(Recv::Data(self.buf[..n].to_vec())),
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => Ok(Recv::Timeout),
            Err(e) if e.kind() == io::ErrorKind::ConnectionReset => Ok(Recv::Closed),
            Err(e) => Err(e),
        }
    }
}
