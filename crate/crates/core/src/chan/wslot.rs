//! Write-slot channels: the receiver exposes fixed-size remotely writable
//! slots and the sender WRITEs each message into the next free one.
//!
//! The bell that announces a message is either inlined at the slot end,
//! detached into a separate bell array, or carried as the immediate of a
//! WRITE_IMM. The reserve variant shares one pool among many senders and hands
//! out slots over a bufferless SEND exchange.

use super::{FanIn, Pair};
use std::collections::{HashMap, HashSet, VecDeque};

use super::credit::{ack_path, AckRx, AckTx, PrefixTracker};
use super::opts::OptionBook;
use super::{
    status_ok, too_large, ChanError, ChannelConfig, ChannelReceiver, ChannelSender, RecvHandle, RegionOption,
    SendHandle,
};
use crate::fabric::{CqId, EndpointId, Fabric, Purpose, QpConfig, QpId, RegionId, RemoteTarget, Sge, WorkRequest};
use crate::memory::{copy_instrumented, Access, Location, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bell {
    Inlined,
    Detached,
    Imm,
}

const BELL: u64 = 4;

pub struct SlotSender {
    ep: EndpointId,
    peer: EndpointId,
    qp: QpId,
    send_cq: CqId,
    bell: Bell,
    pool: RegionId,
    bells: Option<RegionId>,
    scratch: RegionId,
    size: u64,
    stride: u64,
    slots: u64,
    ack: AckRx,
    sent: u64,
    inflight: HashSet<u64>,
}

impl SlotSender {
    fn target(&self, region: RegionId, offset: u64) -> RemoteTarget {
        RemoteTarget { endpoint: self.peer, region, offset }
    }
}

impl ChannelSender for SlotSender {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn max_message_size(&self) -> u64 {
        self.size
    }

    fn send_region(&mut self, fab: &mut Fabric, r: Region) -> Result<SendHandle, ChanError> {
        too_large(r.len, self.size)?;
        if r.len == 0 && self.bell != Bell::Imm {
            return Err(ChanError::EmptyMessage);
        }
        if self.sent - self.ack.released(fab)? >= self.slots {
            return Err(ChanError::NoCredit);
        }
        let seq = self.sent;
        let slot = seq % self.slots;
        let base = slot * self.stride;
        match self.bell {
            Bell::Inlined => {
                fab.store_u32(self.scratch, 0, r.len as u32)?;
                let gather = vec![r.sge(), Sge::new(self.scratch, 0, BELL as u32)];
                let to = self.target(self.pool, base + self.size - r.len);
                fab.post(self.qp, WorkRequest::write(seq, gather, to))?;
            }
            Bell::Detached => {
                let to = self.target(self.pool, base);
                fab.post(self.qp, WorkRequest::write(seq, vec![r.sge()], to).unsignaled())?;
                fab.store_u32(self.scratch, 0, r.len as u32)?;
                let bell = self.target(self.bells.expect("detached bell array"), slot * BELL);
                fab.post(self.qp, WorkRequest::write(seq, vec![Sge::new(self.scratch, 0, BELL as u32)], bell))?;
            }
            Bell::Imm => {
                let to = self.target(self.pool, base);
                fab.post(self.qp, WorkRequest::write_imm(seq, vec![r.sge()], to, slot as u32))?;
            }
        }
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
        (self.sent - self.ack.cached()) * self.size
    }
}

pub struct SlotReceiver {
    ep: EndpointId,
    qp: QpId,
    recv_cq: CqId,
    send_cq: CqId,
    bell: Bell,
    pool: RegionId,
    bells: Option<RegionId>,
    size: u64,
    stride: u64,
    slots: u64,
    next: u64,
    ready: VecDeque<(u64, Region)>,
    held: HashMap<u64, u64>,
    freed: PrefixTracker,
    ack: AckTx,
    opts: OptionBook<(u64, Region), u64>,
}

impl SlotReceiver {
    fn bell_at(&self, slot: u64) -> (RegionId, u64) {
        match self.bell {
            Bell::Inlined => (self.pool, slot * self.stride + self.size),
            _ => (self.bells.expect("bell array"), slot * BELL),
        }
    }

    fn payload(&self, slot: u64, len: u64) -> Region {
        let base = slot * self.stride;
        match self.bell {
            Bell::Inlined => Region::pool(self.pool, base + self.size - len, len),
            _ => Region::pool(self.pool, base, len),
        }
    }

    fn poll(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = false;
        if self.bell == Bell::Imm {
            while let Some(ev) = fab.poll_one(self.recv_cq) {
                status_ok(&ev)?;
                let slot = ev.imm.unwrap_or(0) as u64 % self.slots;
                let base = self.freed.base();
                let seq = base + (slot + self.slots - base % self.slots) % self.slots;
                let region = self.payload(slot, ev.byte_len as u64);
                self.ready.push_back((seq, region));
                fab.post(self.qp, WorkRequest::recv(0, vec![]))?;
                any = true;
            }
        } else {
            while self.next < self.freed.base() + self.slots {
                let slot = self.next % self.slots;
                let (region, off) = self.bell_at(slot);
                let len = fab.load_u32(region, off)? as u64;
                if len == 0 {
                    break;
                }
                let region = self.payload(slot, len.min(self.size));
                self.ready.push_back((self.next, region));
                self.next += 1;
                any = true;
            }
        }
        Ok(any)
    }

    fn pop(&mut self, fab: &mut Fabric) -> Result<Option<(u64, Region)>, ChanError> {
        if self.ready.is_empty() {
            self.progress(fab)?;
        }
        Ok(self.ready.pop_front().inspect(|(seq, r)| {
            self.held.insert(r.offset, *seq);
        }))
    }
}

impl ChannelReceiver for SlotReceiver {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn receive_region(&mut self, fab: &mut Fabric) -> Result<Option<Region>, ChanError> {
        Ok(self.pop(fab)?.map(|(_, r)| r))
    }

    fn free_receive_region(&mut self, fab: &mut Fabric, r: Region) -> Result<(), ChanError> {
        if r.region != self.pool {
            return Err(ChanError::DoubleFree);
        }
        let seq = self.held.remove(&r.offset).ok_or(ChanError::DoubleFree)?;
        if self.bell != Bell::Imm {
            let (region, off) = self.bell_at(seq % self.slots);
            fab.zero(region, off, BELL)?;
        }
        self.freed.complete(seq, seq + 1)
    }

    fn supports_options(&self) -> bool {
        true
    }

    fn can_receive_region(&mut self, fab: &mut Fabric) -> Result<Option<RegionOption>, ChanError> {
        let Some((seq, r)) = self.pop(fab)? else { return Ok(None) };
        let token = self.opts.offer((seq, r));
        Ok(Some(RegionOption { source: (self.ep, r.region, r.offset), length: r.len, token, in_place: Some(r) }))
    }

    fn receive_region_into(&mut self, fab: &mut Fabric, o: RegionOption, dst: Region) -> Result<RecvHandle, ChanError> {
        let (seq, r) = self.opts.take(o.token)?;
        if dst.len < r.len {
            self.opts.restore(o.token, (seq, r));
            return Err(ChanError::DstTooSmall { dst: dst.len, len: r.len });
        }
        if dst.region != r.region || dst.offset != r.offset {
            // Payload wanted elsewhere: copy it out and release the slot.
            copy_instrumented(fab, &r, &dst.sub(0, r.len))?;
            self.free_receive_region(fab, r)?;
        }
        Ok(self.opts.start(r.len))
    }

    fn test_receive_request(&mut self, _fab: &mut Fabric, h: RecvHandle) -> Result<Option<u64>, ChanError> {
        self.opts.finish(h).map(Some).ok_or(ChanError::UnknownHandle)
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
        if self.bell == Bell::Imm {
            vec![self.recv_cq]
        } else {
            vec![]
        }
    }

    fn own_cqs(&self) -> Vec<CqId> {
        vec![self.send_cq]
    }
}

pub(crate) fn open(
    fab: &mut Fabric,
    s: EndpointId,
    r: EndpointId,
    cfg: &ChannelConfig,
    bell: Bell,
) -> Result<Pair, ChanError> {
    let slots = cfg.slots as u64;
    let size = cfg.slot_size;
    let stride = if bell == Bell::Inlined { size + BELL } else { size };
    let (qs, qr) = fab.connect_endpoints(s, r);
    let pool = fab.register(r, stride * slots, Access::REMOTE_WRITE | Access::LOCAL_WRITE, Location::Host)?;
    let bells = match bell {
        Bell::Detached => {
            Some(fab.register(r, BELL * slots, Access::REMOTE_WRITE | Access::LOCAL_WRITE, Location::Host)?)
        }
        _ => None,
    };
    if bell == Bell::Imm {
        for _ in 0..slots {
            fab.post(qr, WorkRequest::recv(0, vec![]))?;
        }
    }
    let scratch = fab.register(s, BELL, Access::NONE, Location::Host)?;
    let (ack_rx, ack_tx) = ack_path(fab, s, r, qs, qr, slots, cfg.batch_for(slots))?;
    let qcr = fab.qp_config(qr)?;
    let tx = SlotSender {
        ep: s,
        peer: r,
        qp: qs,
        send_cq: fab.qp_config(qs)?.send_cq,
        bell,
        pool,
        bells,
        scratch,
        size,
        stride,
        slots,
        ack: ack_rx,
        sent: 0,
        inflight: HashSet::new(),
    };
    let rx = SlotReceiver {
        ep: r,
        qp: qr,
        recv_cq: qcr.recv_cq,
        send_cq: qcr.send_cq,
        bell,
        pool,
        bells,
        size,
        stride,
        slots,
        next: 0,
        ready: VecDeque::new(),
        held: HashMap::new(),
        freed: PrefixTracker::new(0),
        ack: ack_tx,
        opts: OptionBook::default(),
    };
    Ok((Box::new(tx), Box::new(rx)))
}

/// Immediate of a reservation request; grants and data writes carry a slot.
const RESERVE: u32 = u32::MAX;

/// Sender of the reserve variant: each message first obtains a slot from the
/// receiver, then WRITEs into it with the slot index as immediate.
pub struct ReserveSender {
    ep: EndpointId,
    peer: EndpointId,
    qp: QpId,
    send_cq: CqId,
    recv_cq: CqId,
    pool: RegionId,
    size: u64,
    window: u64,
    sent: u64,
    waiting: VecDeque<(u64, Region)>,
    inflight: HashSet<u64>,
}

impl ChannelSender for ReserveSender {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn max_message_size(&self) -> u64 {
        self.size
    }

    fn send_region(&mut self, fab: &mut Fabric, r: Region) -> Result<SendHandle, ChanError> {
        too_large(r.len, self.size)?;
        if self.waiting.len() as u64 >= self.window {
            return Err(ChanError::NoCredit);
        }
        let seq = self.sent;
        let wr = WorkRequest::send_imm(seq, vec![], RESERVE).unsignaled().with_purpose(Purpose::Aux);
        fab.post(self.qp, wr)?;
        self.waiting.push_back((seq, r));
        self.inflight.insert(seq);
        self.sent += 1;
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
        while let Some(ev) = fab.poll_one(self.recv_cq) {
            status_ok(&ev)?;
            let slot = ev.imm.unwrap_or(0);
            let (seq, r) = self.waiting.pop_front().ok_or(ChanError::Transport("unexpected grant".into()))?;
            let to = RemoteTarget { endpoint: self.peer, region: self.pool, offset: slot as u64 * self.size };
            fab.post(self.qp, WorkRequest::write_imm(seq, vec![r.sge()], to, slot))?;
            fab.post(self.qp, WorkRequest::recv(0, vec![]))?;
            any = true;
        }
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
            any |= self.inflight.remove(&ev.wr_id);
        }
        Ok(any)
    }

    fn occupied_bytes(&self) -> u64 {
        self.inflight.len() as u64 * self.size
    }
}

/// One slot pool shared by every sender; slots return to the pool on free.
pub struct ReserveReceiver {
    ep: EndpointId,
    recv_cq: CqId,
    send_cq: CqId,
    pool: RegionId,
    size: u64,
    free: VecDeque<u32>,
    requests: VecDeque<QpId>,
    ready: VecDeque<(u32, Region)>,
    held: HashMap<u64, u32>,
    opts: OptionBook<(u32, Region), u64>,
}

impl ReserveReceiver {
    fn grant(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = false;
        while !self.requests.is_empty() && !self.free.is_empty() {
            let qp = self.requests.pop_front().expect("non-empty");
            let slot = self.free.pop_front().expect("non-empty");
            let wr = WorkRequest::send_imm(slot as u64, vec![], slot).unsignaled().with_purpose(Purpose::Aux);
            fab.post(qp, wr)?;
            any = true;
        }
        Ok(any)
    }

    fn pop(&mut self, fab: &mut Fabric) -> Result<Option<(u32, Region)>, ChanError> {
        if self.ready.is_empty() {
            self.progress(fab)?;
        }
        Ok(self.ready.pop_front().inspect(|(slot, r)| {
            self.held.insert(r.offset, *slot);
        }))
    }
}

impl ChannelReceiver for ReserveReceiver {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn receive_region(&mut self, fab: &mut Fabric) -> Result<Option<Region>, ChanError> {
        Ok(self.pop(fab)?.map(|(_, r)| r))
    }

    fn free_receive_region(&mut self, fab: &mut Fabric, r: Region) -> Result<(), ChanError> {
        if r.region != self.pool {
            return Err(ChanError::DoubleFree);
        }
        let slot = self.held.remove(&r.offset).ok_or(ChanError::DoubleFree)?;
        self.free.push_back(slot);
        self.grant(fab)?;
        Ok(())
    }

    fn supports_options(&self) -> bool {
        true
    }

    fn can_receive_region(&mut self, fab: &mut Fabric) -> Result<Option<RegionOption>, ChanError> {
        let Some((slot, r)) = self.pop(fab)? else { return Ok(None) };
        let token = self.opts.offer((slot, r));
        Ok(Some(RegionOption { source: (self.ep, r.region, r.offset), length: r.len, token, in_place: Some(r) }))
    }

    fn receive_region_into(&mut self, fab: &mut Fabric, o: RegionOption, dst: Region) -> Result<RecvHandle, ChanError> {
        let (slot, r) = self.opts.take(o.token)?;
        if dst.len < r.len {
            self.opts.restore(o.token, (slot, r));
            return Err(ChanError::DstTooSmall { dst: dst.len, len: r.len });
        }
        if dst.region != r.region || dst.offset != r.offset {
            copy_instrumented(fab, &r, &dst.sub(0, r.len))?;
            self.free_receive_region(fab, r)?;
        }
        Ok(self.opts.start(r.len))
    }

    fn test_receive_request(&mut self, _fab: &mut Fabric, h: RecvHandle) -> Result<Option<u64>, ChanError> {
        self.opts.finish(h).map(Some).ok_or(ChanError::UnknownHandle)
    }

    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = false;
        while let Some(ev) = fab.poll_one(self.recv_cq) {
            status_ok(&ev)?;
            match ev.imm {
                Some(RESERVE) => self.requests.push_back(ev.qp),
                imm => {
                    let slot = imm.unwrap_or(0);
                    let r = Region::pool(self.pool, slot as u64 * self.size, ev.byte_len as u64);
                    self.ready.push_back((slot, r));
                }
            }
            fab.post(ev.qp, WorkRequest::recv(0, vec![]))?;
            any = true;
        }
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
        }
        any |= self.grant(fab)?;
        Ok(any)
    }

    fn notify_cqs(&self) -> Vec<CqId> {
        vec![self.recv_cq]
    }

    fn own_cqs(&self) -> Vec<CqId> {
        vec![self.send_cq]
    }
}

pub(crate) fn open_reserve(
    fab: &mut Fabric,
    senders: &[EndpointId],
    r: EndpointId,
    cfg: &ChannelConfig,
) -> Result<FanIn, ChanError> {
    let slots = cfg.slots as u64;
    let window = cfg.reserve_window.max(1) as u64;
    let pool = fab.register(r, cfg.slot_size * slots, Access::REMOTE_WRITE | Access::LOCAL_WRITE, Location::Host)?;
    let recv_cq = fab.create_cq(r);
    let send_cq = fab.create_cq(r);
    let mut txs: Vec<Box<dyn ChannelSender>> = Vec::new();
    for &s in senders {
        let (scq, srcq) = (fab.create_cq(s), fab.create_cq(s));
        let qs = fab.create_qp(s, QpConfig { send_cq: scq, recv_cq: srcq, srq: None });
        let qr = fab.create_qp(r, QpConfig { send_cq, recv_cq, srq: None });
        fab.connect(qs, qr)?;
        // Reservations and data writes each consume a receive.
        for _ in 0..2 * window {
            fab.post(qr, WorkRequest::recv(0, vec![]))?;
        }
        for _ in 0..window {
            fab.post(qs, WorkRequest::recv(0, vec![]))?;
        }
        txs.push(Box::new(ReserveSender {
            ep: s,
            peer: r,
            qp: qs,
            send_cq: scq,
            recv_cq: srcq,
            pool,
            size: cfg.slot_size,
            window,
            sent: 0,
            waiting: VecDeque::new(),
            inflight: HashSet::new(),
        }));
    }
    let rx = ReserveReceiver {
        ep: r,
        recv_cq,
        send_cq,
        pool,
        size: cfg.slot_size,
        free: (0..slots as u32).collect(),
        requests: VecDeque::new(),
        ready: VecDeque::new(),
        held: HashMap::new(),
        opts: OptionBook::default(),
    };
    Ok((txs, Box::new(rx)))
}
