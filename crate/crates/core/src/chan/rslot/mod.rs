//! Read-slot channels: the sender exposes each message in remotely readable
//! memory and the receiver pulls it with READ.
//!
//! * inlined: fixed slots, each ending in an 8-byte bell `{len, seq}` that the
//!   receiver fetches together with the payload.
//! * detached: one bell word `{seq, offset, len}` naming the exposed message.
//! * notify: the sender announces each message with a payload-less SEND whose
//!   immediate packs offset and length.
//! * indirect (see [`indirect`]): the receiver advertises a destination and the
//!   sender WRITEs into it.

mod indirect;

use crate::chan::Pair;
use std::collections::VecDeque;

pub use indirect::{IndirectReceiver, IndirectSender};

use super::credit::{ack_path, AckRx, AckTx, PrefixTracker};
use super::opts::OptionBook;
use super::{
    status_ok, too_large, ChanError, ChannelConfig, ChannelReceiver, ChannelSender, RecvHandle, RegionOption,
    SendHandle,
};
use crate::fabric::{CqId, EndpointId, Fabric, Purpose, QpId, RegionId, RemoteTarget, Sge, WorkRequest};
use crate::memory::{align4, copy_instrumented, ring_view, Access, Location, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Inlined,
    Detached,
    Notify,
    Indirect,
}

const INLINE_BELL: u64 = 8;
const DETACHED_BELL: u64 = 16;
const BELL_READ: u64 = u64::MAX;

/// Immediate of a notification: word offset in the high half, length in the low.
pub fn notify_imm(offset: u64, len: u64) -> u32 {
    debug_assert!(offset.is_multiple_of(4) && offset / 4 <= 0xffff && len <= 0xffff);
    (((offset / 4) as u32) << 16) | len as u32
}

pub fn notify_decode(imm: u32) -> (u64, u64) {
    (((imm >> 16) as u64) * 4, (imm & 0xffff) as u64)
}

/// Sender of the inlined, detached and notify variants.
pub struct ExposeSender {
    ep: EndpointId,
    variant: Variant,
    qp: QpId,
    send_cq: CqId,
    arena: RegionId,
    bell: Option<RegionId>,
    max: u64,
    slots: u64,
    cap: u64,
    head: u64,
    sizes: VecDeque<(u64, u64)>,
    released: u64,
    acked: u64,
    ack: AckRx,
    sent: u64,
}

impl ExposeSender {
    fn refresh(&mut self, fab: &mut Fabric) -> Result<(), ChanError> {
        let n = self.ack.released(fab)?;
        while self.acked < n {
            let (_, size) = self.sizes.pop_front().ok_or(ChanError::Transport("ack beyond sent".into()))?;
            self.released += size;
            self.acked += 1;
        }
        Ok(())
    }

    /// Arena offset the next message occupies, if credit allows it.
    fn next_slot(&mut self, fab: &mut Fabric, len: u64) -> Result<u64, ChanError> {
        too_large(len, self.max)?;
        self.refresh(fab)?;
        let outstanding = self.sent - self.acked;
        let ok = match self.variant {
            Variant::Inlined => outstanding < self.slots,
            Variant::Detached => outstanding == 0,
            _ => outstanding < self.slots && self.head + align4(len).max(4) - self.released <= self.cap,
        };
        if !ok {
            return Err(ChanError::NoCredit);
        }
        Ok(match self.variant {
            Variant::Inlined => (self.sent % self.slots) * (self.max + INLINE_BELL),
            Variant::Detached => 0,
            _ => self.head % self.cap,
        })
    }
}

impl ChannelSender for ExposeSender {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn max_message_size(&self) -> u64 {
        self.max
    }

    fn send_buffer(&mut self, fab: &mut Fabric, len: u64) -> Result<Option<Region>, ChanError> {
        let off = self.next_slot(fab, len)?;
        Ok(Some(Region::app(self.arena, off, len)))
    }

    fn send_region(&mut self, fab: &mut Fabric, r: Region) -> Result<SendHandle, ChanError> {
        let off = self.next_slot(fab, r.len)?;
        if r.region != self.arena || r.offset != off {
            copy_instrumented(fab, &r, &Region::app(self.arena, off, r.len))?;
        }
        let seq = self.sent;
        let size = match self.variant {
            Variant::Inlined => {
                let mut bell = [0u8; 8];
                bell[..4].copy_from_slice(&(r.len as u32).to_le_bytes());
                bell[4..].copy_from_slice(&(seq as u32).wrapping_add(1).to_le_bytes());
                fab.store(self.arena, off + self.max, &bell)?;
                self.max
            }
            Variant::Detached => {
                let mut bell = [0u8; 16];
                bell[..8].copy_from_slice(&(seq + 1).to_le_bytes());
                bell[8..12].copy_from_slice(&(off as u32).to_le_bytes());
                bell[12..].copy_from_slice(&(r.len as u32).to_le_bytes());
                fab.store(self.bell.expect("bell region"), 0, &bell)?;
                r.len
            }
            _ => {
                let wr =
                    WorkRequest::send_imm(seq, vec![], notify_imm(off, r.len)).unsignaled().with_purpose(Purpose::Aux);
                fab.post(self.qp, wr)?;
                let adv = align4(r.len).max(4);
                self.head += adv;
                adv
            }
        };
        self.sizes.push_back((seq, size));
        self.sent += 1;
        Ok(SendHandle(seq))
    }

    /// Complete once the receiver has pulled the message and released it.
    fn test_send_request(&mut self, fab: &mut Fabric, h: SendHandle) -> Result<bool, ChanError> {
        if h.0 >= self.sent {
            return Err(ChanError::UnknownHandle);
        }
        self.progress(fab)?;
        Ok(h.0 < self.acked)
    }

    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let before = self.acked;
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
        }
        self.refresh(fab)?;
        Ok(self.acked != before)
    }

    fn occupied_bytes(&self) -> u64 {
        let extra = self.ack.cached().saturating_sub(self.acked) as usize;
        self.sizes.iter().skip(extra).map(|(_, s)| s).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Offer {
    seq: u64,
    offset: u64,
    len: u64,
    /// Logical arena offset (notify) used to release in order.
    start: u64,
}

#[derive(Debug, Clone, Copy)]
enum ReqState {
    Reading,
    Retry(u64),
    Done(u64),
}

#[derive(Debug, Clone, Copy)]
struct Req {
    offer: Offer,
    dst: Region,
    state: ReqState,
}

/// Receiver of the inlined, detached and notify variants.
pub struct PullReceiver {
    ep: EndpointId,
    peer: EndpointId,
    variant: Variant,
    qp: QpId,
    send_cq: CqId,
    recv_cq: CqId,
    arena: RegionId,
    bell: Option<RegionId>,
    scratch: RegionId,
    max: u64,
    slots: u64,
    cap: u64,
    backoff: u64,
    next_offer: u64,
    bell_reading: bool,
    bell_seen: Option<Offer>,
    notes: VecDeque<(u64, u64)>,
    freed: PrefixTracker,
    ack: AckTx,
    opts: OptionBook<Offer, Req>,
    stage: Stage,
    reads: u64,
}

/// Staging for `receive_region`, which pulls into receiver-owned memory.
#[derive(Debug)]
pub(crate) struct Stage {
    pub region: Region,
    pub req: Option<RecvHandle>,
    pub held: bool,
}

impl PullReceiver {
    fn remote(&self, region: RegionId, offset: u64) -> RemoteTarget {
        RemoteTarget { endpoint: self.peer, region, offset }
    }

    fn post_read(&mut self, fab: &mut Fabric, h: u64, req: &Req) -> Result<(), ChanError> {
        let o = req.offer;
        let wr = match self.variant {
            Variant::Inlined => {
                let scatter = vec![req.dst.sub(0, self.max).sge(), Sge::new(self.scratch, (o.seq % self.slots) * 8, 8)];
                WorkRequest::read(h, scatter, self.remote(self.arena, o.offset))
            }
            _ => WorkRequest::read(h, vec![req.dst.sub(0, o.len).sge()], self.remote(self.arena, o.offset)),
        };
        fab.post(self.qp, wr)?;
        self.reads += 1;
        Ok(())
    }

    /// READ requests issued so far, retries included.
    pub fn reads(&self) -> u64 {
        self.reads
    }

    fn release(&mut self, o: Offer) -> Result<(), ChanError> {
        match self.variant {
            Variant::Notify => self.freed.complete(o.start, o.start + align4(o.len).max(4)),
            _ => self.freed.complete(o.seq, o.seq + 1),
        }
    }

    fn on_read(&mut self, fab: &mut Fabric, h: u64) -> Result<(), ChanError> {
        let Ok(req) = self.opts.req(RecvHandle(h)).copied() else { return Ok(()) };
        let o = req.offer;
        let state = if self.variant == Variant::Inlined {
            let off = (o.seq % self.slots) * 8;
            let len = fab.load_u32(self.scratch, off)? as u64;
            let seq = fab.load_u32(self.scratch, off + 4)?;
            if seq == (o.seq as u32).wrapping_add(1) {
                ReqState::Done(len.min(self.max))
            } else if self.backoff == 0 {
                self.post_read(fab, h, &req)?;
                ReqState::Reading
            } else {
                ReqState::Retry(fab.now() + self.backoff)
            }
        } else {
            ReqState::Done(o.len)
        };
        if let ReqState::Done(_) = state {
            self.release(o)?;
        }
        self.opts.req_mut(RecvHandle(h))?.state = state;
        Ok(())
    }

    fn stage_poll(&mut self, fab: &mut Fabric) -> Result<Option<Region>, ChanError> {
        if self.stage.held {
            return Ok(None);
        }
        if self.stage.req.is_none() {
            let Some(o) = self.can_receive_region(fab)? else { return Ok(None) };
            let dst = self.stage.region;
            self.stage.req = Some(self.receive_region_into(fab, o, dst)?);
        }
        let h = self.stage.req.expect("staged");
        match self.test_receive_request(fab, h)? {
            Some(len) => {
                self.stage.req = None;
                self.stage.held = true;
                Ok(Some(self.stage.region.sub(0, len)))
            }
            None => Ok(None),
        }
    }
}

impl ChannelReceiver for PullReceiver {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn receive_region(&mut self, fab: &mut Fabric) -> Result<Option<Region>, ChanError> {
        self.stage_poll(fab)
    }

    fn free_receive_region(&mut self, _fab: &mut Fabric, r: Region) -> Result<(), ChanError> {
        if !self.stage.held || r.region != self.stage.region.region || r.offset != self.stage.region.offset {
            return Err(ChanError::DoubleFree);
        }
        self.stage.held = false;
        Ok(())
    }

    fn supports_options(&self) -> bool {
        true
    }

    fn can_receive_region(&mut self, fab: &mut Fabric) -> Result<Option<RegionOption>, ChanError> {
        self.progress(fab)?;
        let offer = match self.variant {
            Variant::Inlined => {
                if self.next_offer >= self.freed.count() + self.slots {
                    return Ok(None);
                }
                let seq = self.next_offer;
                self.next_offer += 1;
                Offer { seq, offset: (seq % self.slots) * (self.max + INLINE_BELL), len: self.max, start: seq }
            }
            Variant::Detached => match self.bell_seen.take() {
                Some(o) => o,
                None => {
                    if !self.bell_reading && self.freed.count() == self.next_offer {
                        let bell = self.remote(self.bell.expect("bell region"), 0);
                        let sge = Sge::new(self.scratch, 0, DETACHED_BELL as u32);
                        fab.post(self.qp, WorkRequest::read(BELL_READ, vec![sge], bell))?;
                        self.bell_reading = true;
                        self.reads += 1;
                    }
                    return Ok(None);
                }
            },
            _ => {
                let Some((phys, len)) = self.notes.pop_front() else { return Ok(None) };
                let base = self.freed.base();
                let start = base + (phys + self.cap - base % self.cap) % self.cap;
                let seq = self.next_offer;
                self.next_offer += 1;
                Offer { seq, offset: phys, len, start }
            }
        };
        let token = self.opts.offer(offer);
        Ok(Some(RegionOption {
            source: (self.peer, self.arena, offer.offset),
            length: offer.len,
            token,
            in_place: None,
        }))
    }

    fn receive_region_into(&mut self, fab: &mut Fabric, o: RegionOption, dst: Region) -> Result<RecvHandle, ChanError> {
        let offer = self.opts.take(o.token)?;
        if dst.len < offer.len {
            self.opts.restore(o.token, offer);
            return Err(ChanError::DstTooSmall { dst: dst.len, len: offer.len });
        }
        let req = Req { offer, dst, state: ReqState::Reading };
        let h = self.opts.start(req);
        self.post_read(fab, h.0, &req)?;
        Ok(h)
    }

    fn test_receive_request(&mut self, fab: &mut Fabric, h: RecvHandle) -> Result<Option<u64>, ChanError> {
        if let ReqState::Done(len) = self.opts.req(h)?.state {
            self.opts.finish(h);
            return Ok(Some(len));
        }
        self.progress(fab)?;
        if let ReqState::Done(len) = self.opts.req(h)?.state {
            self.opts.finish(h);
            return Ok(Some(len));
        }
        Ok(None)
    }

    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = false;
        while let Some(ev) = fab.poll_one(self.recv_cq) {
            status_ok(&ev)?;
            self.notes.push_back(notify_decode(ev.imm.unwrap_or(0)));
            fab.post(self.qp, WorkRequest::recv(0, vec![]))?;
            any = true;
        }
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
            any = true;
            if ev.wr_id == BELL_READ {
                self.bell_reading = false;
                let b = fab.load(self.scratch, 0, DETACHED_BELL)?;
                let seq = u64::from_le_bytes(b[..8].try_into().expect("8 bytes"));
                if seq == self.next_offer + 1 {
                    let offset = u32::from_le_bytes(b[8..12].try_into().expect("4 bytes")) as u64;
                    let len = (u32::from_le_bytes(b[12..].try_into().expect("4 bytes")) as u64).min(self.max);
                    self.bell_seen = Some(Offer { seq: self.next_offer, offset, len, start: self.next_offer });
                    self.next_offer += 1;
                }
            } else if ev.opcode == crate::fabric::Opcode::Read {
                self.on_read(fab, ev.wr_id)?;
            }
        }
        let now = fab.now();
        let due: Vec<u64> = self
            .opts
            .reqs_mut()
            .filter(|(_, r)| matches!(r.state, ReqState::Retry(at) if at <= now))
            .map(|(h, _)| *h)
            .collect();
        for h in due {
            let req = *self.opts.req(RecvHandle(h))?;
            self.post_read(fab, h, &req)?;
            self.opts.req_mut(RecvHandle(h))?.state = ReqState::Reading;
        }
        let idle = self.opts.is_idle() && self.notes.is_empty();
        any |= self.ack.update(fab, self.freed.count(), idle)?;
        Ok(any)
    }

    fn notify_cqs(&self) -> Vec<CqId> {
        if self.variant == Variant::Notify {
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
    variant: Variant,
) -> Result<Pair, ChanError> {
    if variant == Variant::Indirect {
        return indirect::open(fab, s, r, cfg);
    }
    let (tx, rx) = open_concrete(fab, s, r, cfg, variant)?;
    Ok((Box::new(tx), Box::new(rx)))
}

pub fn open_concrete(
    fab: &mut Fabric,
    s: EndpointId,
    r: EndpointId,
    cfg: &ChannelConfig,
    variant: Variant,
) -> Result<(ExposeSender, PullReceiver), ChanError> {
    let slots = cfg.slots as u64;
    let (qs, qr) = fab.connect_endpoints(s, r);
    let readable = Access::REMOTE_READ | Access::LOCAL_WRITE;
    let (max, cap, arena) = match variant {
        Variant::Inlined => (cfg.slot_size, 0, fab.register_app(s, slots * (cfg.slot_size + INLINE_BELL), readable)?),
        Variant::Detached => (cfg.slot_size, 0, fab.register_app(s, cfg.slot_size, readable)?),
        _ => {
            let cap = cfg.ring_capacity.min(1 << 18);
            let arena = fab.register_app(s, cap, readable)?;
            ring_view(fab, arena, cap)?;
            ((cap / 4).min(0xffff), cap, arena)
        }
    };
    let bell = match variant {
        Variant::Detached => Some(fab.register(s, DETACHED_BELL, readable, Location::Host)?),
        _ => None,
    };
    if variant == Variant::Notify {
        for _ in 0..slots {
            fab.post(qr, WorkRequest::recv(0, vec![]))?;
        }
    }
    let scratch_len = if variant == Variant::Inlined { slots * INLINE_BELL } else { DETACHED_BELL };
    let scratch = fab.register(r, scratch_len, Access::LOCAL_WRITE, Location::Host)?;
    let stage = fab.register_app(r, max, Access::LOCAL_WRITE | Access::REMOTE_WRITE)?;
    let (ack_rx, ack_tx) = ack_path(fab, s, r, qs, qr, slots, cfg.batch_for(slots))?;
    let qcs = fab.qp_config(qs)?;
    let qcr = fab.qp_config(qr)?;
    let tx = ExposeSender {
        ep: s,
        variant,
        qp: qs,
        send_cq: qcs.send_cq,
        arena,
        bell,
        max,
        slots,
        cap,
        head: 0,
        sizes: VecDeque::new(),
        released: 0,
        acked: 0,
        ack: ack_rx,
        sent: 0,
    };
    let rx = PullReceiver {
        ep: r,
        peer: s,
        variant,
        qp: qr,
        send_cq: qcr.send_cq,
        recv_cq: qcr.recv_cq,
        arena,
        bell,
        scratch,
        max,
        slots,
        cap: cap.max(1),
        backoff: cfg.read_backoff,
        next_offer: 0,
        bell_reading: false,
        bell_seen: None,
        notes: VecDeque::new(),
        freed: PrefixTracker::new(0),
        ack: ack_tx,
        opts: OptionBook::default(),
        stage: Stage { region: Region::app(stage, 0, max), req: None, held: false },
        reads: 0,
    };
    Ok((tx, rx))
}
