//! Channel management: TCP for inter-node paths, in-process queues for
//! co-located endpoints. Both kinds carry the same frames with the same
//! per-channel FIFO contract and differ only in latency.

use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::transport::hub::{local_connect, LocalPipe};
use crate::transport::wire::{decode_prefix, encode_frame, Frame, FRAME_PREFIX_LEN};

/// Which transport backs a channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelKind {
    Tcp,
    Local,
}

enum Inner {
    Tcp {
        read: Mutex<TcpStream>,
        write: Mutex<TcpStream>,
    },
    Local {
        tx: Sender<Frame>,
        rx: Mutex<Receiver<Frame>>,
    },
}

/// A connected, full-duplex frame channel. One logical activity may send
/// while another receives; two concurrent senders require external
/// serialization.
pub struct Channel {
    kind: ChannelKind,
    peer: String,
    inner: Inner,
    closed: AtomicBool,
}

impl std::fmt::Debug for Channel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Channel")
            .field("kind", &self.kind)
            .field("peer", &self.peer)
            .field("closed", &self.closed.load(Ordering::Relaxed))
            .finish()
    }
}

/// Open a channel to `ip:port`. When the peer endpoint is registered in this
/// process (same launch, same host), the in-process queue kind is selected
/// automatically; otherwise a TCP connection is established within
/// `timeout_ms`.
pub fn open_channel(ip: &str, port: u16, timeout_ms: u64) -> Result<Channel> {
    if let Some(pipe) = local_connect(ip, port) {
        return Ok(Channel::from_pipe(pipe, format!("{ip}:{port}")));
    }
    let peer = format!("{ip}:{port}");
    let addr = peer
        .to_socket_addrs()
        .map_err(|e| Error::Address(format!("{peer}: {e}")))?
        .next()
        .ok_or_else(|| Error::Address(format!("{peer}: no usable address")))?;
    let stream = TcpStream::connect_timeout(&addr, Duration::from_millis(timeout_ms.max(1)))
        .map_err(|e| match e.kind() {
            std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock => {
                Error::Timeout(timeout_ms)
            }
            _ => Error::Connect(format!("{peer}: {e}")),
        })?;
    Channel::from_tcp(stream, peer)
}

impl Channel {
    pub(crate) fn from_tcp(stream: TcpStream, peer: String) -> Result<Channel> {
        stream.set_nodelay(true)?;
        let write = stream.try_clone()?;
        Ok(Channel {
            kind: ChannelKind::Tcp,
            peer,
            inner: Inner::Tcp {
                read: Mutex::new(stream),
                write: Mutex::new(write),
            },
            closed: AtomicBool::new(false),
        })
    }

    pub(crate) fn from_pipe(pipe: LocalPipe, peer: String) -> Channel {
        Channel {
            kind: ChannelKind::Local,
            peer,
            inner: Inner::Local {
                tx: pipe.tx,
                rx: Mutex::new(pipe.rx),
            },
            closed: AtomicBool::new(false),
        }
    }

    pub fn kind(&self) -> ChannelKind {
        self.kind
    }

    pub fn peer(&self) -> &str {
        &self.peer
    }

    pub fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    /// Mark the channel closed and shut the underlying transport down.
    pub fn close(&self) {
        self.closed.store(true, Ordering::Release);
        if let Inner::Tcp { read, .. } = &self.inner {
            if let Ok(stream) = read.lock() {
                let _ = stream.shutdown(std::net::Shutdown::Both);
            }
        }
    }

    fn closed_err(&self) -> Error {
        Error::ChannelClosed(self.peer.clone())
    }

    /// Send one frame. Payload bytes move without copying on the local kind.
    pub fn send_frame(&self, frame: Frame) -> Result<()> {
        if self.is_closed() {
            return Err(self.closed_err());
        }
        match &self.inner {
            Inner::Tcp { write, .. } => {
                let bytes = encode_frame(&frame.envelope, &frame.payload)?;
                let mut stream = write.lock().unwrap();
                stream.write_all(&bytes).map_err(|_| {
                    self.closed.store(true, Ordering::Release);
                    self.closed_err()
                })?;
                Ok(())
            }
            Inner::Local { tx, .. } => tx.send(frame).map_err(|_| {
                self.closed.store(true, Ordering::Release);
                self.closed_err()
            }),
        }
    }

    /// Receive the next frame, blocking up to `timeout_ms` for one to start
    /// arriving. A timeout with no bytes seen is clean and leaves the channel
    /// usable. Once a frame has started, completing it is granted a separate
    /// grace budget (senders write whole frames, so the remainder is already
    /// in flight); a stall beyond that grace desyncs the byte stream and
    /// poisons the channel.
    pub fn recv_frame(&self, timeout_ms: u64) -> Result<Frame> {
        if self.is_closed() {
            return Err(self.closed_err());
        }
        match &self.inner {
            Inner::Tcp { read, .. } => {
                let start_deadline = Instant::now() + Duration::from_millis(timeout_ms);
                let mut stream = read.lock().unwrap();
                let mut prefix = [0u8; FRAME_PREFIX_LEN];
                self.read_exact_by(&mut stream, &mut prefix, start_deadline, timeout_ms, true)?;
                let env = decode_prefix(&prefix).inspect_err(|_| {
                    // A malformed prefix means the byte stream is desynced.
                    self.closed.store(true, Ordering::Release);
                })?;
                let completion = Instant::now() + self.completion_grace(timeout_ms);
                let mut payload = vec![0u8; env.payload_len as usize];
                self.read_exact_by(&mut stream, &mut payload, completion, timeout_ms, false)?;
                Ok(Frame::new(env, payload))
            }
            Inner::Local { rx, .. } => {
                let rx = rx.lock().unwrap();
                match rx.recv_timeout(Duration::from_millis(timeout_ms)) {
                    Ok(frame) => Ok(frame),
                    Err(RecvTimeoutError::Timeout) => Err(Error::Timeout(timeout_ms)),
                    Err(RecvTimeoutError::Disconnected) => {
                        self.closed.store(true, Ordering::Release);
                        Err(self.closed_err())
                    }
                }
            }
        }
    }

    /// How long an in-flight frame may take to finish once its first byte
    /// has been read.
    fn completion_grace(&self, timeout_ms: u64) -> Duration {
        Duration::from_millis(timeout_ms.max(2000))
    }

    fn read_exact_by(
        &self,
        stream: &mut TcpStream,
        buf: &mut [u8],
        mut deadline: Instant,
        timeout_ms: u64,
        idle_ok: bool,
    ) -> Result<()> {
        let mut filled = 0usize;
        let mut committed = !idle_ok;
        while filled < buf.len() {
            if filled > 0 && !committed {
                // First byte seen: the frame is committed, switch from the
                // caller's poll budget to the completion grace.
                committed = true;
                deadline = deadline.max(Instant::now() + self.completion_grace(timeout_ms));
            }
            let now = Instant::now();
            if now >= deadline {
                if committed {
                    // A genuine mid-frame stall: the stream is desynced.
                    self.closed.store(true, Ordering::Release);
                }
                return Err(Error::Timeout(timeout_ms));
            }
            stream.set_read_timeout(Some(deadline - now))?;
            match stream.read(&mut buf[filled..]) {
                Ok(0) => {
                    self.closed.store(true, Ordering::Release);
                    return Err(self.closed_err());
                }
                Ok(n) => filled += n,
                Err(e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut
                        || e.kind() == std::io::ErrorKind::Interrupted =>
                {
                    continue;
                }
                Err(_) => {
                    self.closed.store(true, Ordering::Release);
                    return Err(self.closed_err());
                }
            }
        }
        Ok(())
    }
}
