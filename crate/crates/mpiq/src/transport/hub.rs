//! Process-local endpoint registry backing the in-process "zero-copy" channel
//! kind. Endpoints that live in the same launch process register here; a
//! connect to a registered (ip, port) yields a queue pair instead of a socket,
//! and frames move by handle without byte copying.

use std::collections::HashMap;
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Mutex, OnceLock};

use crate::error::{Error, Result};
use crate::transport::wire::Frame;

/// One direction of an in-process connection.
pub(crate) struct LocalPipe {
    pub tx: Sender<Frame>,
    pub rx: Receiver<Frame>,
}

type HubMap = HashMap<(String, u16), Sender<LocalPipe>>;

fn hub() -> &'static Mutex<HubMap> {
    static HUB: OnceLock<Mutex<HubMap>> = OnceLock::new();
    HUB.get_or_init(|| Mutex::new(HashMap::new()))
}

/// Accepts in-process connections for one registered endpoint. Unregisters on
/// drop, after which connects to the endpoint fall back to TCP.
pub struct LocalListener {
    key: (String, u16),
    incoming: Receiver<LocalPipe>,
}

impl LocalListener {
    /// Blocking accept of the next in-process connection. Returns `None` once
    /// the listener is unregistered and drained.
    pub(crate) fn accept(&self) -> Option<LocalPipe> {
        self.incoming.recv().ok()
    }
}

impl Drop for LocalListener {
    fn drop(&mut self) {
        hub().lock().unwrap().remove(&self.key);
    }
}

/// Register an in-process endpoint. Fails if the (ip, port) key is taken.
pub fn register_local(ip: &str, port: u16) -> Result<LocalListener> {
    let key = (ip.to_string(), port);
    let mut map = hub().lock().unwrap();
    if map.contains_key(&key) {
        return Err(Error::Launch(format!(
            "local endpoint {ip}:{port} already registered"
        )));
    }
    let (tx, rx) = channel();
    map.insert(key.clone(), tx);
    Ok(LocalListener { key, incoming: rx })
}

/// Force-remove a registration, severing pending accepts. Used to simulate an
/// abrupt endpoint death.
pub fn unregister_local(ip: &str, port: u16) {
    hub().lock().unwrap().remove(&(ip.to_string(), port));
}

/// Try to connect in-process. `None` when no such endpoint is registered in
/// this process.
pub(crate) fn local_connect(ip: &str, port: u16) -> Option<LocalPipe> {
    let acceptor = {
        let map = hub().lock().unwrap();
        map.get(&(ip.to_string(), port))?.clone()
    };
    let (client_tx, server_rx) = channel();
    let (server_tx, client_rx) = channel();
    acceptor
        .send(LocalPipe {
            tx: server_tx,
            rx: server_rx,
        })
        .ok()?;
    Some(LocalPipe {
        tx: client_tx,
        rx: client_rx,
    })
}
