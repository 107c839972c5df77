//! Flow-control bookkeeping shared by the channel families.
//!
//! Receivers release resources (slots, buffers, ring bytes) possibly out of
//! order; only the contiguous released prefix is reported back to the sender
//! as a monotone 64-bit counter over a reverse path.

use std::collections::{BTreeMap, VecDeque};

use super::ChanError;
use crate::fabric::{
    CqId, EndpointId, Fabric, Purpose, QpId, RegionId, RemoteTarget, Sge, TransportProfile, WorkRequest,
};
use crate::memory::{Access, Location};

/// Resources consumed in sequence and freed in any order.
#[derive(Debug, Default, Clone)]
pub struct FreeTracker {
    base_seq: u64,
    base_bytes: u64,
    items: VecDeque<(u64, bool)>,
}

impl FreeTracker {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records the next consumed resource and returns its sequence number.
    pub fn push(&mut self, size: u64) -> u64 {
        self.items.push_back((size, false));
        self.base_seq + self.items.len() as u64 - 1
    }

    pub fn free(&mut self, seq: u64) -> Result<(), ChanError> {
        let idx = seq.checked_sub(self.base_seq).ok_or(ChanError::DoubleFree)? as usize;
        let item = self.items.get_mut(idx).ok_or(ChanError::DoubleFree)?;
        if item.1 {
            return Err(ChanError::DoubleFree);
        }
        item.1 = true;
        while let Some(&(size, true)) = self.items.front() {
            self.items.pop_front();
            self.base_seq += 1;
            self.base_bytes += size;
        }
        Ok(())
    }

    /// Resources in the released prefix.
    pub fn released(&self) -> u64 {
        self.base_seq
    }

    pub fn released_bytes(&self) -> u64 {
        self.base_bytes
    }

    /// Next sequence number to be pushed.
    pub fn next_seq(&self) -> u64 {
        self.base_seq + self.items.len() as u64
    }

    pub fn outstanding(&self) -> usize {
        self.items.len()
    }

    pub fn is_freed(&self, seq: u64) -> bool {
        match seq.checked_sub(self.base_seq) {
            None => true,
            Some(i) => self.items.get(i as usize).is_some_and(|x| x.1),
        }
    }
}

/// Completions keyed by position, possibly out of order; the base advances
/// over the contiguous completed prefix. Each entry names where the next
/// entry starts (`seq + 1` for slots, `offset + record` for rings).
#[derive(Debug, Default, Clone)]
pub struct PrefixTracker {
    base: u64,
    count: u64,
    done: BTreeMap<u64, u64>,
}

impl PrefixTracker {
    pub fn new(base: u64) -> Self {
        PrefixTracker { base, ..Default::default() }
    }

    pub fn complete(&mut self, key: u64, next: u64) -> Result<(), ChanError> {
        if key < self.base || self.done.insert(key, next).is_some() {
            return Err(ChanError::DoubleFree);
        }
        while let Some(n) = self.done.remove(&self.base) {
            self.base = n;
            self.count += 1;
        }
        Ok(())
    }

    /// Start of the first incomplete entry.
    pub fn base(&self) -> u64 {
        self.base
    }

    /// Entries in the completed prefix.
    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn pending(&self) -> usize {
        self.done.len()
    }
}

/// How a receiver reports its released counter to the sender.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckMode {
    /// An unsignaled WRITE of the counter into sender memory.
    WriteCounter,
    /// A payload-less SEND whose immediate carries the low 32 bits.
    SendImm,
}

impl AckMode {
    pub fn for_profile(p: &TransportProfile) -> AckMode {
        if p.supports(crate::fabric::RequestKind::Write) {
            AckMode::WriteCounter
        } else {
            AckMode::SendImm
        }
    }
}

/// Receiver half of an acknowledgment path.
#[derive(Debug)]
pub(crate) struct AckTx {
    mode: AckMode,
    qp: QpId,
    scratch: RegionId,
    remote: RemoteTarget,
    acked: u64,
    batch: u64,
}

/// Sender half of an acknowledgment path.
#[derive(Debug)]
pub(crate) struct AckRx {
    mode: AckMode,
    qp: QpId,
    recv_cq: CqId,
    counter: RegionId,
    value: u64,
}

/// Wires an ack path over a connected QP pair (`tx_qp` at the sender,
/// `rx_qp` at the receiver). `window` bounds the acks in flight.
pub(crate) fn ack_path(
    fab: &mut Fabric,
    sender: EndpointId,
    receiver: EndpointId,
    tx_qp: QpId,
    rx_qp: QpId,
    window: u64,
    batch: u64,
) -> Result<(AckRx, AckTx), ChanError> {
    let mode = AckMode::for_profile(fab.profile());
    let counter = fab.register(sender, 8, Access::REMOTE_WRITE | Access::LOCAL_WRITE, Location::Host)?;
    let scratch = fab.register(receiver, 8, Access::NONE, Location::Host)?;
    if mode == AckMode::SendImm {
        for _ in 0..window + 1 {
            fab.post(tx_qp, WorkRequest::recv(0, vec![]).with_purpose(Purpose::Control))?;
        }
    }
    let recv_cq = fab.qp_config(tx_qp)?.recv_cq;
    let rx = AckRx { mode, qp: tx_qp, recv_cq, counter, value: 0 };
    let tx = AckTx {
        mode,
        qp: rx_qp,
        scratch,
        remote: RemoteTarget { endpoint: sender, region: counter, offset: 0 },
        acked: 0,
        batch: batch.max(1),
    };
    Ok((rx, tx))
}

impl AckTx {
    /// Reports `released` when enough has accumulated, or whenever anything
    /// is pending and the receiver is idle.
    pub fn update(&mut self, fab: &mut Fabric, released: u64, idle: bool) -> Result<bool, ChanError> {
        debug_assert!(released >= self.acked);
        let pending = released - self.acked;
        if pending == 0 || (pending < self.batch && !idle) {
            return Ok(false);
        }
        match self.mode {
            AckMode::WriteCounter => {
                fab.store_u64(self.scratch, 0, released)?;
                let wr = WorkRequest::write(0, vec![Sge::new(self.scratch, 0, 8)], self.remote)
                    .unsignaled()
                    .with_purpose(Purpose::Control);
                fab.post(self.qp, wr)?;
            }
            AckMode::SendImm => {
                let wr = WorkRequest::send_imm(0, vec![], released as u32).unsignaled().with_purpose(Purpose::Control);
                fab.post(self.qp, wr)?;
            }
        }
        self.acked = released;
        Ok(true)
    }
}

impl AckRx {
    /// Latest released counter reported by the receiver.
    pub fn released(&mut self, fab: &mut Fabric) -> Result<u64, ChanError> {
        match self.mode {
            AckMode::WriteCounter => {
                self.value = self.value.max(fab.load_u64(self.counter, 0)?);
            }
            AckMode::SendImm => {
                while let Some(ev) = fab.poll_one(self.recv_cq) {
                    super::status_ok(&ev)?;
                    let imm = ev.imm.unwrap_or(0);
                    let delta = imm.wrapping_sub(self.value as u32) as u64;
                    if delta < 1 << 31 {
                        self.value += delta;
                    }
                    fab.post(self.qp, WorkRequest::recv(0, vec![]).with_purpose(Purpose::Control))?;
                }
            }
        }
        Ok(self.value)
    }

    /// Last value seen, without polling.
    pub fn cached(&self) -> u64 {
        self.value
    }
}
