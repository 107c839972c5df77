//! Ring-buffer channels: variable-size records written into one remotely
//! writable circular buffer at the receiver.
//!
//! Offsets are logical byte counters; the physical position is the counter
//! modulo the capacity. The no-zeroing variant fills the ring toward
//! decreasing addresses so that each record's leading zero word clears the
//! bell of the record after it.

use super::Pair;
use std::collections::{HashMap, HashSet, VecDeque};

use super::credit::{ack_path, AckRx, AckTx, PrefixTracker};
use super::{status_ok, too_large, ChanError, ChannelConfig, ChannelReceiver, ChannelSender, SendHandle};
use crate::fabric::{CqId, EndpointId, Fabric, QpId, RegionId, RemoteTarget, Sge, WorkRequest};
use crate::memory::{align4, ring_view, Access, Location, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Detached,
    Imm,
    Zeroing,
    NoZeroing,
}

// Sender scratch layout, gathered into records at post time.
const S_LEN: u64 = 0;
const S_DONE: u64 = 4; // 0,0,0,0 then done=1
const S_ZERO: u64 = 12; // eight zero bytes
const S_HEAD: u64 = 24;
const SCRATCH: u64 = 32;

const DONE: [u8; 8] = [0, 0, 0, 0, 1, 0, 0, 0];

/// Logical bytes a record advances the ring by.
pub fn record_advance(v: Variant, len: u64) -> u64 {
    let a = align4(len);
    match v {
        Variant::Detached => 4 + a,
        Variant::Imm => a.max(4),
        Variant::Zeroing => a + 8,
        Variant::NoZeroing => a + 4,
    }
}

/// Logical bytes a record touches; the no-zeroing record also clears the
/// next bell.
pub fn record_footprint(v: Variant, len: u64) -> u64 {
    match v {
        Variant::NoZeroing => align4(len) + 8,
        _ => record_advance(v, len),
    }
}

/// Physical position of the bell for the no-zeroing record at logical `l`.
pub fn nozero_bell(cap: u64, l: u64) -> u64 {
    (cap as i128 - 4 - l as i128).rem_euclid(cap as i128) as u64
}

pub struct RingSender {
    ep: EndpointId,
    peer: EndpointId,
    qp: QpId,
    send_cq: CqId,
    variant: Variant,
    ring: RegionId,
    bell: Option<RegionId>,
    scratch: RegionId,
    cap: u64,
    head: u64,
    sizes: VecDeque<u64>,
    acked: u64,
    released: u64,
    ack: AckRx,
    sent: u64,
    inflight: HashSet<u64>,
}

impl RingSender {
    fn refresh(&mut self, fab: &mut Fabric) -> Result<(), ChanError> {
        let n = self.ack.released(fab)?;
        while self.acked < n {
            self.released += self.sizes.pop_front().ok_or(ChanError::Transport("ack beyond sent".into()))?;
            self.acked += 1;
        }
        Ok(())
    }

    fn to(&self, region: RegionId, offset: u64) -> RemoteTarget {
        RemoteTarget { endpoint: self.peer, region, offset }
    }

    /// Logical head: bytes consumed so far.
    pub fn head(&self) -> u64 {
        self.head
    }
}

impl ChannelSender for RingSender {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn max_message_size(&self) -> u64 {
        self.cap / 4
    }

    fn send_region(&mut self, fab: &mut Fabric, r: Region) -> Result<SendHandle, ChanError> {
        too_large(r.len, self.cap / 4)?;
        if r.len == 0 && matches!(self.variant, Variant::Zeroing | Variant::NoZeroing) {
            return Err(ChanError::EmptyMessage);
        }
        self.refresh(fab)?;
        let need = record_footprint(self.variant, r.len);
        if self.head + need - self.released > self.cap {
            return Err(ChanError::NoCredit);
        }
        let seq = self.sent;
        let cap = self.cap;
        let a = align4(r.len);
        let pad = a - r.len;
        let sc = |off: u64, len: u64| Sge::new(self.scratch, off, len as u32);
        match self.variant {
            Variant::Detached => {
                fab.store_u32(self.scratch, S_LEN, r.len as u32)?;
                let rec = vec![sc(S_LEN, 4), r.sge()];
                fab.post(self.qp, WorkRequest::write(seq, rec, self.to(self.ring, self.head % cap)).unsignaled())?;
                let new_head = self.head + record_advance(self.variant, r.len);
                fab.store_u64(self.scratch, S_HEAD, new_head)?;
                let bell = self.to(self.bell.expect("bell region"), 0);
                fab.post(self.qp, WorkRequest::write(seq, vec![sc(S_HEAD, 8)], bell))?;
            }
            Variant::Imm => {
                let to = self.to(self.ring, self.head % cap);
                fab.post(self.qp, WorkRequest::write_imm(seq, vec![r.sge()], to, (self.head % cap) as u32))?;
            }
            Variant::Zeroing => {
                fab.store_u32(self.scratch, S_LEN, r.len as u32)?;
                let rec = vec![sc(S_LEN, 4), r.sge(), sc(S_DONE + 4 - pad, pad + 4)];
                fab.post(self.qp, WorkRequest::write(seq, rec, self.to(self.ring, self.head % cap)))?;
            }
            Variant::NoZeroing => {
                fab.store_u32(self.scratch, S_LEN, r.len as u32)?;
                let bell = nozero_bell(cap, self.head);
                let start = (bell as i128 - a as i128 - 4).rem_euclid(cap as i128) as u64;
                let rec = vec![sc(S_ZERO, 4 + pad), r.sge(), sc(S_LEN, 4)];
                fab.post(self.qp, WorkRequest::write(seq, rec, self.to(self.ring, start)))?;
            }
        }
        let adv = record_advance(self.variant, r.len);
        self.head += adv;
        self.sizes.push_back(adv);
        self.sent += 1;
        self.inflight.insert(seq);
        Ok(SendHandle(seq))
    }

    fn test_send_request(&mut self, fab: &mut Fabric, h: SendHandle) -> Result<bool, ChanError> {
        if h.0 >= self.sent {
            return Err(ChanError::UnknownHandle);
        }
        self.progress(fab)?;
        Ok(!self.inflight.contains(&h.0))
    }

    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = false;
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
            any |= self.inflight.remove(&ev.wr_id);
        }
        Ok(any)
    }

    fn occupied_bytes(&self) -> u64 {
        let mut released = self.released;
        let extra = self.ack.cached().saturating_sub(self.acked) as usize;
        released += self.sizes.iter().take(extra).sum::<u64>();
        self.head - released
    }
}

#[derive(Debug, Clone, Copy)]
struct Held {
    start: u64,
    advance: u64,
}

pub struct RingReceiver {
    ep: EndpointId,
    qp: QpId,
    recv_cq: CqId,
    send_cq: CqId,
    variant: Variant,
    ring: RegionId,
    bell: Option<RegionId>,
    cap: u64,
    tail: u64,
    ready: VecDeque<Region>,
    held: HashMap<u64, Held>,
    freed: PrefixTracker,
    ack: AckTx,
}

impl RingReceiver {
    fn deliver(&mut self, start: u64, payload_at: u64, len: u64, advance: u64) {
        let r = Region::pool(self.ring, payload_at % self.cap, len);
        self.held.insert(r.offset, Held { start, advance });
        self.ready.push_back(r);
    }

    fn poll(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let (cap, max) = (self.cap, self.cap / 4);
        let before = self.ready.len();
        match self.variant {
            Variant::Detached => {
                let head = fab.load_u64(self.bell.expect("bell region"), 0)?;
                while self.tail < head && self.tail < self.freed.base() + cap {
                    let len = (fab.load_u32(self.ring, self.tail % cap)? as u64).min(max);
                    let adv = record_advance(self.variant, len);
                    self.deliver(self.tail, self.tail + 4, len, adv);
                    self.tail += adv;
                }
            }
            Variant::Imm => {
                while let Some(ev) = fab.poll_one(self.recv_cq) {
                    status_ok(&ev)?;
                    let phys = ev.imm.unwrap_or(0) as u64 % cap;
                    let base = self.freed.base();
                    let start = base + (phys + cap - base % cap) % cap;
                    let len = ev.byte_len as u64;
                    self.deliver(start, start, len, record_advance(self.variant, len));
                    fab.post(self.qp, WorkRequest::recv(0, vec![]))?;
                }
            }
            Variant::Zeroing => {
                while self.tail + 8 <= self.freed.base() + cap {
                    let len = (fab.load_u32(self.ring, self.tail % cap)? as u64).min(max);
                    if len == 0 {
                        break;
                    }
                    let done = fab.load_u32(self.ring, (self.tail + 4 + align4(len)) % cap)?;
                    if done == 0 {
                        break;
                    }
                    let adv = record_advance(self.variant, len);
                    self.deliver(self.tail, self.tail + 4, len, adv);
                    self.tail += adv;
                }
            }
            Variant::NoZeroing => {
                while self.tail + 8 <= self.freed.base() + cap {
                    let bell = nozero_bell(cap, self.tail);
                    let len = (fab.load_u32(self.ring, bell)? as u64).min(max);
                    if len == 0 {
                        break;
                    }
                    let at = (bell as i128 - len as i128).rem_euclid(cap as i128) as u64;
                    let adv = record_advance(self.variant, len);
                    self.deliver(self.tail, at, len, adv);
                    self.tail += adv;
                }
            }
        }
        Ok(self.ready.len() > before)
    }

    /// Logical offset of the next record to parse.
    pub fn tail(&self) -> u64 {
        self.tail
    }
}

impl ChannelReceiver for RingReceiver {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn receive_region(&mut self, fab: &mut Fabric) -> Result<Option<Region>, ChanError> {
        if self.ready.is_empty() {
            self.progress(fab)?;
        }
        Ok(self.ready.pop_front())
    }

    fn free_receive_region(&mut self, fab: &mut Fabric, r: Region) -> Result<(), ChanError> {
        if r.region != self.ring {
            return Err(ChanError::DoubleFree);
        }
        let h = self.held.remove(&r.offset).ok_or(ChanError::DoubleFree)?;
        if self.variant == Variant::Zeroing {
            fab.zero(self.ring, h.start % self.cap, h.advance)?;
        }
        self.freed.complete(h.start, h.start + h.advance)
    }

    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = self.poll(fab)?;
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
        }
        any |= self.ack.update(fab, self.freed.count(), self.ready.is_empty())?;
        Ok(any)
    }

    fn notify_cqs(&self) -> Vec<CqId> {
        if self.variant == Variant::Imm {
            vec![self.recv_cq]
        } else {
            vec![]
        }
    }

    fn own_cqs(&self) -> Vec<CqId> {
        vec![self.send_cq]
    }
}

pub(crate) fn open_concrete(
    fab: &mut Fabric,
    s: EndpointId,
    r: EndpointId,
    cfg: &ChannelConfig,
    variant: Variant,
) -> Result<(RingSender, RingReceiver), ChanError> {
    let cap = cfg.ring_capacity;
    let (qs, qr) = fab.connect_endpoints(s, r);
    let ring = fab.register(r, cap, Access::REMOTE_WRITE | Access::LOCAL_WRITE, Location::Host)?;
    ring_view(fab, ring, cap)?;
    let bell = match variant {
        Variant::Detached => Some(fab.register(r, 8, Access::REMOTE_WRITE | Access::LOCAL_WRITE, Location::Host)?),
        _ => None,
    };
    if variant == Variant::Imm {
        // Every record advances at least 4 bytes, so cap/4 receives cover a full ring.
        for _ in 0..cap / 4 {
            fab.post(qr, WorkRequest::recv(0, vec![]))?;
        }
    }
    let scratch = fab.register(s, SCRATCH, Access::NONE, Location::Host)?;
    fab.store(scratch, S_DONE, &DONE)?;
    let window = cfg.slots as u64;
    let (ack_rx, ack_tx) = ack_path(fab, s, r, qs, qr, window, cfg.batch_for(window))?;
    let qcr = fab.qp_config(qr)?;
    let tx = RingSender {
        ep: s,
        peer: r,
        qp: qs,
        send_cq: fab.qp_config(qs)?.send_cq,
        variant,
        ring,
        bell,
        scratch,
        cap,
        head: 0,
        sizes: VecDeque::new(),
        acked: 0,
        released: 0,
        ack: ack_rx,
        sent: 0,
        inflight: HashSet::new(),
    };
    let rx = RingReceiver {
        ep: r,
        qp: qr,
        recv_cq: qcr.recv_cq,
        send_cq: qcr.send_cq,
        variant,
        ring,
        bell,
        cap,
        tail: 0,
        ready: VecDeque::new(),
        held: HashMap::new(),
        freed: PrefixTracker::new(0),
        ack: ack_tx,
    };
    Ok((tx, rx))
}

pub(crate) fn open(
    fab: &mut Fabric,
    s: EndpointId,
    r: EndpointId,
    cfg: &ChannelConfig,
    variant: Variant,
) -> Result<Pair, ChanError> {
    let (tx, rx) = open_concrete(fab, s, r, cfg, variant)?;
    Ok((Box::new(tx), Box::new(rx)))
}

#[cfg(test)]
mod tests;
