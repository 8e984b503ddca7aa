//! WebSocket transport around a [`ServiceCore`].
//!
//! All session writes go through one lock. Outgoing messages are queued to
//! each connection's writer while that lock is held, so every client sees
//! its `seq` in order.

use std::collections::HashMap;
use std::future::Future;
use std::net::SocketAddr;
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio_tungstenite::tungstenite::Message;

use crate::error::{Result, ServiceError};
use crate::session::{ClientId, Outgoing, ServiceCore};

struct Hub {
    core: ServiceCore,
    peers: HashMap<ClientId, mpsc::UnboundedSender<String>>,
}

impl Hub {
    fn deliver(&self, out: Vec<Outgoing>) {
        for o in out {
            let Some(tx) = self.peers.get(&o.to) else { continue };
            match o.msg.to_json() {
                Ok(text) => {
                    let _ = tx.send(text);
                }
                Err(e) => eprintln!("exo: dropping unserializable {} message: {e}", o.msg.body.kind()),
            }
        }
    }
}

#[derive(Clone)]
struct Shared(Arc<Mutex<Hub>>);

impl Shared {
    fn lock(&self) -> MutexGuard<'_, Hub> {
        self.0.lock().unwrap_or_else(|p| p.into_inner())
    }
}

/// Binds the listening socket; an address in use is a startup error.
pub async fn bind(host: &str, port: u16) -> Result<TcpListener> {
    TcpListener::bind((host, port)).await.map_err(|source| ServiceError::PortBusy { port, source })
}

/// Serves until `shutdown` resolves. Wall-clock sessions tick at the
/// control rate; virtual-time sessions only move on client requests.
pub async fn serve(listener: TcpListener, core: ServiceCore, shutdown: impl Future<Output = ()>) -> Result<()> {
    let period = Duration::from_secs_f64(core.control().period_s());
    let lockstep = core.virtual_time();
    let shared = Shared(Arc::new(Mutex::new(Hub { core, peers: HashMap::new() })));

    let ticker = (!lockstep).then(|| {
        let shared = shared.clone();
        tokio::spawn(async move {
            let mut interval = tokio::time::interval(period);
            interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                interval.tick().await;
                let mut hub = shared.lock();
                match hub.core.tick() {
                    Ok(out) => hub.deliver(out),
                    Err(e) => eprintln!("exo: tick failed: {e}"),
                }
            }
        })
    });

    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            accepted = listener.accept() => {
                let (stream, peer) = accepted?;
                tokio::spawn(connection(stream, peer, shared.clone()));
            }
            _ = &mut shutdown => break,
        }
    }
    if let Some(t) = ticker {
        t.abort();
    }
    Ok(())
}

async fn connection(stream: TcpStream, peer: SocketAddr, shared: Shared) {
    let ws = match tokio_tungstenite::accept_async(stream).await {
        Ok(ws) => ws,
        Err(e) => {
            eprintln!("exo: handshake with {peer} failed: {e}");
            return;
        }
    };
    let (mut sink, mut incoming) = ws.split();
    let (tx, mut rx) = mpsc::unbounded_channel::<String>();
    let id = {
        let mut hub = shared.lock();
        let (id, out) = hub.core.connect();
        hub.peers.insert(id, tx);
        hub.deliver(out);
        id
    };
    let writer = tokio::spawn(async move {
        while let Some(text) = rx.recv().await {
            if sink.send(Message::Text(text)).await.is_err() {
                break;
            }
        }
        let _ = sink.close().await;
    });

    while let Some(frame) = incoming.next().await {
        match frame {
            Ok(Message::Text(text)) => {
                let mut hub = shared.lock();
                let out = hub.core.handle_text(id, &text);
                hub.deliver(out);
            }
            Ok(Message::Binary(_)) => {
                let mut hub = shared.lock();
                let out = hub.core.reject(id, "binary frames are not part of the protocol".into(), None);
                hub.deliver(out);
            }
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => {}
        }
    }

    let mut hub = shared.lock();
    hub.peers.remove(&id);
    let out = hub.core.disconnect(id);
    hub.deliver(out);
    drop(hub);
    writer.abort();
}
