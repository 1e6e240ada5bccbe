use std::sync::Arc;

use super::transport::{Envelope, Mailbox, MsgKind};
use super::{CollectiveOp, PoolEvent, PoolShared};
use crate::functions::{Collective, CommError};

/// One member's view of a worker group. All traffic is tagged with the
/// group id and dispatch epoch, and receives only match those tags, so
/// concurrent groups never see each other's messages.
pub(crate) struct GroupComm<'m> {
    mb: &'m mut Mailbox,
    gid: u64,
    epoch: u64,
    members: &'m [u32],
    intra: usize,
    seq: u32,
    shared: &'m Arc<PoolShared>,
    pub aborted_by: Option<usize>,
}

impl<'m> GroupComm<'m> {
    pub fn new(
        mb: &'m mut Mailbox,
        gid: u64,
        epoch: u64,
        members: &'m [u32],
        intra: usize,
        shared: &'m Arc<PoolShared>,
    ) -> Self {
        GroupComm {
            mb,
            gid,
            epoch,
            members,
            intra,
            seq: 0,
            shared,
            aborted_by: None,
        }
    }

    fn root(&self) -> u32 {
        self.members[0]
    }

    fn is_root(&self) -> bool {
        self.intra == 0
    }

    fn send(&self, to: u32, kind: MsgKind, seq: u32, payload: Vec<u8>) -> Result<(), CommError> {
        self.mb.send(Envelope {
            src: self.members[self.intra],
            dst: to,
            kind,
            gid: self.gid,
            epoch: self.epoch,
            seq,
            payload,
        })
    }

    fn others(&self) -> impl Iterator<Item = u32> + '_ {
        self.members
            .iter()
            .enumerate()
            .filter(move |(i, _)| *i != self.intra)
            .map(|(_, r)| *r)
    }

    fn recv(&mut self, kind: MsgKind, from: Option<u32>, seq: u32) -> Result<Envelope, CommError> {
        if let Some(r) = self.aborted_by {
            return Err(CommError::MemberFailure(r));
        }
        let (gid, epoch) = (self.gid, self.epoch);
        let env = self.mb.recv_match(|e| {
            e.gid == gid
                && e.epoch == epoch
                && (e.kind == MsgKind::Abort || (e.kind == kind && e.seq == seq && from.is_none_or(|f| e.src == f)))
        })?;
        if env.kind == MsgKind::Abort {
            let rank = env
                .payload
                .get(..4)
                .map(|b| u32::from_be_bytes(b.try_into().unwrap()) as usize)
                .unwrap_or(usize::MAX);
            self.aborted_by = Some(rank);
            return Err(CommError::MemberFailure(rank));
        }
        Ok(env)
    }

    fn next_seq(&mut self) -> u32 {
        self.seq += 1;
        self.seq
    }

    /// Two-phase fan-in/fan-out through intra-rank 0.
    fn fence(&mut self, enter: MsgKind, release: MsgKind, seq: u32) -> Result<(), CommError> {
        if self.is_root() {
            for _ in 1..self.members.len() {
                self.recv(enter, None, seq)?;
            }
            let others: Vec<u32> = self.others().collect();
            for r in others {
                self.send(r, release, seq, Vec::new())?;
            }
        } else {
            self.send(self.root(), enter, seq, Vec::new())?;
            self.recv(release, Some(self.root()), seq)?;
        }
        Ok(())
    }

    /// Communicator construction handshake, run once for each freshly
    /// built group before the function starts.
    pub fn join(&mut self) -> Result<(), CommError> {
        self.fence(MsgKind::Join, MsgKind::JoinAck, 0)
    }

    /// Tells the rest of the group that this member failed.
    pub fn abort(&self) {
        let payload = (self.intra as u32).to_be_bytes().to_vec();
        for r in self.others() {
            let _ = self.send(r, MsgKind::Abort, 0, payload.clone());
        }
    }

    fn note(&self, op: CollectiveOp) {
        if self.is_root() {
            self.shared.push_event(PoolEvent::Collective {
                gid: self.gid,
                epoch: self.epoch,
                op,
            });
        }
    }
}

impl Collective for GroupComm<'_> {
    fn barrier(&mut self) -> Result<(), CommError> {
        let seq = self.next_seq();
        self.fence(MsgKind::BarrierEnter, MsgKind::BarrierRelease, seq)?;
        self.note(CollectiveOp::Barrier);
        Ok(())
    }

    fn broadcast(&mut self, data: Option<Vec<u8>>) -> Result<Vec<u8>, CommError> {
        let seq = self.next_seq();
        let out = if self.is_root() {
            let data = data.unwrap_or_default();
            let others: Vec<u32> = self.others().collect();
            for r in others {
                self.send(r, MsgKind::Bcast, seq, data.clone())?;
            }
            data
        } else {
            self.recv(MsgKind::Bcast, Some(self.root()), seq)?.payload
        };
        self.note(CollectiveOp::Broadcast);
        Ok(out)
    }

    fn gather(&mut self, data: Vec<u8>) -> Result<Option<Vec<Vec<u8>>>, CommError> {
        let seq = self.next_seq();
        if !self.is_root() {
            self.send(self.root(), MsgKind::Gather, seq, data)?;
            return Ok(None);
        }
        let k = self.members.len();
        let mut parts: Vec<Option<Vec<u8>>> = vec![None; k];
        parts[0] = Some(data);
        for _ in 1..k {
            let env = self.recv(MsgKind::Gather, None, seq)?;
            let idx = self
                .members
                .iter()
                .position(|m| *m == env.src)
                .ok_or_else(|| CommError::Transport(format!("gather from non-member {}", env.src)))?;
            parts[idx] = Some(env.payload);
        }
        self.note(CollectiveOp::Gather);
        Ok(Some(parts.into_iter().map(Option::unwrap_or_default).collect()))
    }
}
