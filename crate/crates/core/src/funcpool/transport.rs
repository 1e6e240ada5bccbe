//! Message passing between pool ranks.
//!
//! Two fabrics carry the same [`Envelope`]s: in-process channels, and
//! loopback TCP sockets with length-prefixed frames. Messages between a
//! given pair of ranks are delivered in send order on both.

use std::collections::VecDeque;
use std::net::{Shutdown, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};

use super::protocol::{read_frame, write_frame, ProtocolError, Reader, Writer};
use super::{ContextGuard, PoolError};
use crate::functions::CommError;

/// Source rank used by the pool handle when it talks to the master.
pub const CLIENT_RANK: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    Channel,
    Socket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum MsgKind {
    Intake = 1,
    Assign = 2,
    Done = 3,
    Shutdown = 4,
    Abort = 5,
    Join = 6,
    JoinAck = 7,
    BarrierEnter = 8,
    BarrierRelease = 9,
    Bcast = 10,
    Gather = 11,
}

impl MsgKind {
    fn from_u8(v: u8) -> Option<Self> {
        use MsgKind::*;
        Some(match v {
            1 => Intake,
            2 => Assign,
            3 => Done,
            4 => Shutdown,
            5 => Abort,
            6 => Join,
            7 => JoinAck,
            8 => BarrierEnter,
            9 => BarrierRelease,
            10 => Bcast,
            11 => Gather,
            _ => return None,
        })
    }

    /// Kinds that travel inside a group scope.
    pub fn is_group_scoped(self) -> bool {
        !matches!(
            self,
            MsgKind::Intake | MsgKind::Assign | MsgKind::Done | MsgKind::Shutdown
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub src: u32,
    pub dst: u32,
    pub kind: MsgKind,
    /// Group id; zero for messages outside any group.
    pub gid: u64,
    /// Dispatch epoch, unique per group formation or reuse.
    pub epoch: u64,
    /// Collective sequence number within one epoch.
    pub seq: u32,
    pub payload: Vec<u8>,
}

pub(crate) fn encode_envelope(e: &Envelope) -> Vec<u8> {
    let mut w = Writer::default();
    w.u32(e.src)
        .u32(e.dst)
        .u8(e.kind as u8)
        .u64(e.gid)
        .u64(e.epoch)
        .u32(e.seq)
        .bytes(&e.payload);
    w.finish()
}

pub(crate) fn decode_envelope(b: &[u8]) -> Result<Envelope, ProtocolError> {
    let mut r = Reader::new(b);
    let src = r.u32()?;
    let dst = r.u32()?;
    let kind = r.u8()?;
    let kind = MsgKind::from_u8(kind).ok_or(ProtocolError::MessageType(kind))?;
    let env = Envelope {
        src,
        dst,
        kind,
        gid: r.u64()?,
        epoch: r.u64()?,
        seq: r.u32()?,
        payload: r.bytes()?,
    };
    r.end()?;
    Ok(env)
}

/// One message observed arriving at a rank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Delivery {
    pub src: u32,
    pub dst: u32,
    pub kind: MsgKind,
    pub gid: u64,
    pub epoch: u64,
}

pub(crate) type DeliveryLog = Arc<Mutex<Vec<Delivery>>>;

pub(crate) trait Net: Send + Sync {
    fn send(&self, env: Envelope) -> Result<(), CommError>;
    /// Stops the fabric; background readers exit afterwards.
    fn close(&self);
}

struct ChannelNet {
    inboxes: Vec<Sender<Envelope>>,
}

impl Net for ChannelNet {
    fn send(&self, env: Envelope) -> Result<(), CommError> {
        let tx = self
            .inboxes
            .get(env.dst as usize)
            .ok_or_else(|| CommError::Transport(format!("no rank {}", env.dst)))?;
        tx.send(env).map_err(|_| CommError::Transport("receiver gone".into()))
    }

    fn close(&self) {}
}

struct SocketNet {
    streams: Vec<Mutex<TcpStream>>,
}

impl Net for SocketNet {
    fn send(&self, env: Envelope) -> Result<(), CommError> {
        let stream = self
            .streams
            .get(env.dst as usize)
            .ok_or_else(|| CommError::Transport(format!("no rank {}", env.dst)))?;
        let body = encode_envelope(&env);
        let mut s = stream.lock().unwrap();
        write_frame(&mut *s, &body).map_err(|e| CommError::Transport(e.to_string()))
    }

    fn close(&self) {
        for s in &self.streams {
            let _ = s.lock().unwrap().shutdown(Shutdown::Write);
        }
    }
}

pub(crate) struct Endpoint {
    pub rank: u32,
    inbox: Receiver<Envelope>,
    net: Arc<dyn Net>,
    deliveries: Option<DeliveryLog>,
}

impl Endpoint {
    pub fn send(&self, env: Envelope) -> Result<(), CommError> {
        self.net.send(env)
    }

    pub fn recv(&self) -> Result<Envelope, CommError> {
        let env = self
            .inbox
            .recv()
            .map_err(|_| CommError::Transport("fabric closed".into()))?;
        if let Some(log) = &self.deliveries {
            log.lock().unwrap().push(Delivery {
                src: env.src,
                dst: env.dst,
                kind: env.kind,
                gid: env.gid,
                epoch: env.epoch,
            });
        }
        Ok(env)
    }
}

/// Endpoint plus a buffer of messages that arrived before anyone asked
/// for them.
pub(crate) struct Mailbox {
    pub ep: Endpoint,
    held: VecDeque<Envelope>,
}

impl Mailbox {
    pub fn new(ep: Endpoint) -> Self {
        Mailbox {
            ep,
            held: VecDeque::new(),
        }
    }

    pub fn rank(&self) -> u32 {
        self.ep.rank
    }

    pub fn send(&self, env: Envelope) -> Result<(), CommError> {
        self.ep.send(env)
    }

    /// Returns the first message (buffered or new) accepted by `want`.
    pub fn recv_match(&mut self, want: impl Fn(&Envelope) -> bool) -> Result<Envelope, CommError> {
        if let Some(i) = self.held.iter().position(&want) {
            return Ok(self.held.remove(i).unwrap());
        }
        loop {
            let env = self.ep.recv()?;
            if want(&env) {
                return Ok(env);
            }
            self.held.push_back(env);
        }
    }

    pub fn discard(&mut self, stale: impl Fn(&Envelope) -> bool) {
        self.held.retain(|e| !stale(e));
    }
}

pub(crate) struct Fabric {
    pub endpoints: Vec<Endpoint>,
    pub client: Arc<dyn Net>,
    threads: Vec<JoinHandle<()>>,
}

impl Fabric {
    pub fn build(kind: TransportKind, size: usize, deliveries: Option<DeliveryLog>) -> Result<Fabric, PoolError> {
        match kind {
            TransportKind::Channel => Ok(Self::channels(size, deliveries)),
            TransportKind::Socket => Self::sockets(size, deliveries),
        }
    }

    fn channels(size: usize, deliveries: Option<DeliveryLog>) -> Fabric {
        let (txs, rxs): (Vec<_>, Vec<_>) = (0..size).map(|_| channel()).unzip();
        let net: Arc<dyn Net> = Arc::new(ChannelNet { inboxes: txs });
        let endpoints = rxs
            .into_iter()
            .enumerate()
            .map(|(rank, inbox)| Endpoint {
                rank: rank as u32,
                inbox,
                net: net.clone(),
                deliveries: deliveries.clone(),
            })
            .collect();
        Fabric {
            endpoints,
            client: net,
            threads: Vec::new(),
        }
    }

    fn sockets(size: usize, deliveries: Option<DeliveryLog>) -> Result<Fabric, PoolError> {
        let fail = |e: std::io::Error| PoolError::TransportFailure(e.to_string());
        let mut threads = Vec::with_capacity(size);
        let mut addrs = Vec::with_capacity(size);
        let mut rxs = Vec::with_capacity(size);
        for _ in 0..size {
            let listener = TcpListener::bind("127.0.0.1:0").map_err(fail)?;
            addrs.push(listener.local_addr().map_err(fail)?);
            let (tx, rx) = channel();
            rxs.push(rx);
            threads.push(thread::spawn(move || {
                let _guard = ContextGuard::new();
                let Ok((mut stream, _)) = listener.accept() else {
                    return;
                };
                drop(listener);
                while let Ok(Some(frame)) = read_frame(&mut stream) {
                    match decode_envelope(&frame) {
                        Ok(env) => {
                            if tx.send(env).is_err() {
                                break;
                            }
                        }
                        Err(e) => {
                            log::error!("dropping undecodable frame: {e}");
                            break;
                        }
                    }
                }
            }));
        }
        let mut streams = Vec::with_capacity(size);
        for addr in addrs {
            let s = TcpStream::connect(addr).map_err(fail)?;
            s.set_nodelay(true).map_err(fail)?;
            streams.push(Mutex::new(s));
        }
        let net: Arc<dyn Net> = Arc::new(SocketNet { streams });
        let endpoints = rxs
            .into_iter()
            .enumerate()
            .map(|(rank, inbox)| Endpoint {
                rank: rank as u32,
                inbox,
                net: net.clone(),
                deliveries: deliveries.clone(),
            })
            .collect();
        Ok(Fabric {
            endpoints,
            client: net,
            threads,
        })
    }

    pub fn take_endpoints(&mut self) -> Vec<Endpoint> {
        std::mem::take(&mut self.endpoints)
    }

    /// Closes the fabric and joins its reader threads.
    pub fn close(self) {
        self.client.close();
        for t in self.threads {
            let _ = t.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn env(src: u32, dst: u32, seq: u32) -> Envelope {
        Envelope {
            src,
            dst,
            kind: MsgKind::Bcast,
            gid: 7,
            epoch: 3,
            seq,
            payload: vec![seq as u8; 3],
        }
    }

    #[test]
    fn envelope_codec_round_trips() {
        let e = env(1, 2, 9);
        assert_eq!(decode_envelope(&encode_envelope(&e)).unwrap(), e);
        let mut bad = encode_envelope(&e);
        bad[8] = 99;
        assert!(decode_envelope(&bad).is_err());
    }

    fn exchange(kind: TransportKind) {
        let log: DeliveryLog = Arc::default();
        let mut fabric = Fabric::build(kind, 3, Some(log.clone())).unwrap();
        let eps = fabric.take_endpoints();
        for seq in 0..5 {
            eps[0].send(env(0, 2, seq)).unwrap();
        }
        eps[1].send(env(1, 2, 100)).unwrap();
        let mut mb = Mailbox::new(eps.into_iter().nth(2).unwrap());
        let late = mb.recv_match(|e| e.src == 1).unwrap();
        assert_eq!(late.seq, 100);
        let order: Vec<u32> = (0..5).map(|_| mb.recv_match(|e| e.src == 0).unwrap().seq).collect();
        assert_eq!(order, vec![0, 1, 2, 3, 4]);
        assert_eq!(log.lock().unwrap().len(), 6);
        drop(mb);
        fabric.close();
    }

    #[test]
    fn channel_fabric_preserves_pair_order() {
        exchange(TransportKind::Channel);
    }

    #[test]
    fn socket_fabric_preserves_pair_order() {
        exchange(TransportKind::Socket);
    }
}
