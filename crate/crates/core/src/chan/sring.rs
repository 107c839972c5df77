//! Shared ring: one receive ring written by many senders. Each sender
//! reserves its record with a FETCH_ADD on the receiver's head counter, then
//! WRITEs the record at the returned offset. The receiver publishes its tail
//! in a remotely readable word that senders fetch when they run short of
//! space, so the receiver never posts a request.

use super::FanIn;
use std::collections::{HashMap, VecDeque};

use super::credit::PrefixTracker;
use super::{status_ok, too_large, ChanError, ChannelConfig, ChannelReceiver, ChannelSender, SendHandle};
use crate::fabric::{
    CqId, EndpointId, Fabric, Purpose, QpConfig, QpId, RegionId, RemoteTarget, Sge, SrqId, WorkRequest,
};
use crate::memory::{align4, ring_view, Access, Location, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Imm,
    Zeroing,
}

pub fn record_size(v: Variant, len: u64) -> u64 {
    match v {
        Variant::Imm => align4(len).max(4),
        Variant::Zeroing => align4(len) + 8,
    }
}

const TAIL_READ: u64 = u64::MAX;
const S_LEN: u64 = 0;
const S_DONE: u64 = 4;
const DONE: [u8; 8] = [0, 0, 0, 0, 1, 0, 0, 0];

#[derive(Debug)]
struct Pending {
    seq: u64,
    r: Region,
    size: u64,
    offset: Option<u64>,
    ready_at: u64,
    posted: u64,
}

pub struct SringSender {
    ep: EndpointId,
    peer: EndpointId,
    qp: QpId,
    send_cq: CqId,
    variant: Variant,
    ring: RegionId,
    head: RegionId,
    tail: RegionId,
    result: RegionId,
    tail_copy: RegionId,
    scratch: RegionId,
    cap: u64,
    window: u64,
    cached_tail: u64,
    seen_head: u64,
    tail_reading: bool,
    sent: u64,
    pending: VecDeque<Pending>,
    writing: HashMap<u64, u64>,
    delay: u64,
    offsets: Vec<u64>,
    reservations: Vec<u64>,
    record_offsets: bool,
}

impl SringSender {
    fn to(&self, region: RegionId, offset: u64) -> RemoteTarget {
        RemoteTarget { endpoint: self.peer, region, offset }
    }

    fn read_tail(&mut self, fab: &mut Fabric) -> Result<(), ChanError> {
        if !self.tail_reading {
            let wr = WorkRequest::read(TAIL_READ, vec![Sge::new(self.tail_copy, 0, 8)], self.to(self.tail, 0))
                .with_purpose(Purpose::Control);
            fab.post(self.qp, wr)?;
            self.tail_reading = true;
        }
        Ok(())
    }

    /// Holds every record WRITE for `ticks` after its reservation returns.
    pub fn set_write_delay(&mut self, ticks: u64) {
        self.delay = ticks;
    }

    /// Keeps the offsets returned by FETCH_ADD, for chain checks.
    pub fn record_offsets(&mut self, on: bool) {
        self.record_offsets = on;
    }

    pub fn offsets(&self) -> &[u64] {
        &self.offsets
    }

    /// Ticks from each FETCH_ADD post to its completion, while recording.
    pub fn reservation_latencies(&self) -> &[u64] {
        &self.reservations
    }

    fn write_ready(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = false;
        while let Some(p) = self.pending.front() {
            let Some(o) = p.offset else { break };
            if fab.now() < p.ready_at {
                break;
            }
            if o + p.size > self.cached_tail + self.cap {
                self.read_tail(fab)?;
                break;
            }
            let p = self.pending.pop_front().expect("front");
            let to = self.to(self.ring, o % self.cap);
            let wr = match self.variant {
                Variant::Imm => WorkRequest::write_imm(p.seq, vec![p.r.sge()], to, (o % self.cap) as u32),
                Variant::Zeroing => {
                    let pad = align4(p.r.len) - p.r.len;
                    fab.store_u32(self.scratch, S_LEN, p.r.len as u32)?;
                    let rec = vec![
                        Sge::new(self.scratch, S_LEN, 4),
                        p.r.sge(),
                        Sge::new(self.scratch, S_DONE + 4 - pad, (pad + 4) as u32),
                    ];
                    WorkRequest::write(p.seq, rec, to)
                }
            };
            fab.post(self.qp, wr)?;
            self.writing.insert(p.seq, p.size);
            any = true;
        }
        Ok(any)
    }
}

impl ChannelSender for SringSender {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn max_message_size(&self) -> u64 {
        self.cap / 4
    }

    fn send_region(&mut self, fab: &mut Fabric, r: Region) -> Result<SendHandle, ChanError> {
        too_large(r.len, self.cap / 4)?;
        if r.len == 0 && self.variant == Variant::Zeroing {
            return Err(ChanError::EmptyMessage);
        }
        if self.pending.len() as u64 >= self.window {
            return Err(ChanError::NoCredit);
        }
        let size = record_size(self.variant, r.len);
        let seq = self.sent;
        let wr = WorkRequest::fetch_add(seq, Sge::new(self.result, 0, 8), self.to(self.head, 0), size);
        fab.post(self.qp, wr)?;
        if self.cached_tail + self.cap < self.seen_head + 2 * size {
            self.read_tail(fab)?;
        }
        self.pending.push_back(Pending { seq, r, size, offset: None, ready_at: 0, posted: fab.now() });
        self.sent += 1;
        Ok(SendHandle(seq))
    }

    fn test_send_request(&mut self, fab: &mut Fabric, h: SendHandle) -> Result<bool, ChanError> {
        if h.0 >= self.sent {
            return Err(ChanError::UnknownHandle);
        }
        self.progress(fab)?;
        Ok(!self.writing.contains_key(&h.0) && !self.pending.iter().any(|p| p.seq == h.0))
    }

    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = false;
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
            any = true;
            if ev.wr_id == TAIL_READ {
                self.cached_tail = self.cached_tail.max(fab.load_u64(self.tail_copy, 0)?);
                self.tail_reading = false;
            } else if let Some(p) = self.pending.iter_mut().find(|p| p.seq == ev.wr_id) {
                let o = ev.atomic_old_value.unwrap_or(0);
                p.offset = Some(o);
                p.ready_at = ev.tick + self.delay;
                self.seen_head = self.seen_head.max(o + p.size);
                if self.record_offsets {
                    self.offsets.push(o);
                    self.reservations.push(ev.tick - p.posted);
                }
            } else {
                self.writing.remove(&ev.wr_id);
            }
        }
        any |= self.write_ready(fab)?;
        Ok(any)
    }

    fn occupied_bytes(&self) -> u64 {
        self.pending.iter().map(|p| p.size).sum::<u64>() + self.writing.values().sum::<u64>()
    }
}

#[derive(Debug, Clone, Copy)]
struct Held {
    start: u64,
    size: u64,
}

pub struct SringReceiver {
    ep: EndpointId,
    srq: SrqId,
    recv_cq: CqId,
    send_cq: CqId,
    variant: Variant,
    ring: RegionId,
    head: RegionId,
    tail: RegionId,
    cap: u64,
    parse: u64,
    ready: VecDeque<Region>,
    held: HashMap<u64, Held>,
    freed: PrefixTracker,
}

impl SringReceiver {
    fn deliver(&mut self, start: u64, payload_at: u64, len: u64, size: u64) {
        let r = Region::pool(self.ring, payload_at % self.cap, len);
        self.held.insert(r.offset, Held { start, size });
        self.ready.push_back(r);
    }

    fn poll(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let cap = self.cap;
        let before = self.ready.len();
        match self.variant {
            Variant::Imm => {
                while let Some(ev) = fab.poll_one(self.recv_cq) {
                    status_ok(&ev)?;
                    let phys = ev.imm.unwrap_or(0) as u64 % cap;
                    let base = self.freed.base();
                    let start = base + (phys + cap - base % cap) % cap;
                    let len = ev.byte_len as u64;
                    self.deliver(start, start, len, record_size(self.variant, len));
                    fab.post_srq_recv(self.srq, WorkRequest::recv(0, vec![]))?;
                }
            }
            Variant::Zeroing => {
                while self.parse + 8 <= self.freed.base() + cap {
                    let len = (fab.load_u32(self.ring, self.parse % cap)? as u64).min(cap / 4);
                    if len == 0 {
                        break;
                    }
                    if fab.load_u32(self.ring, (self.parse + 4 + align4(len)) % cap)? == 0 {
                        break;
                    }
                    let size = record_size(self.variant, len);
                    self.deliver(self.parse, self.parse + 4, len, size);
                    self.parse += size;
                }
            }
        }
        Ok(self.ready.len() > before)
    }

    /// Offset the receiver has released up to (the published tail).
    pub fn tail(&self) -> u64 {
        self.freed.base()
    }

    /// Offset of the next record the zeroing receiver waits for.
    pub fn parse_offset(&self) -> u64 {
        self.parse
    }

    pub fn head(&self, fab: &Fabric) -> Result<u64, ChanError> {
        Ok(fab.load_u64(self.head, 0)?)
    }
}

impl ChannelReceiver for SringReceiver {
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
            fab.zero(self.ring, h.start % self.cap, h.size)?;
        }
        let before = self.freed.base();
        self.freed.complete(h.start, h.start + h.size)?;
        if self.freed.base() != before {
            fab.store_u64(self.tail, 0, self.freed.base())?;
        }
        Ok(())
    }

    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let any = self.poll(fab)?;
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
        }
        Ok(any)
    }

    fn notify_cqs(&self) -> Vec<CqId> {
        match self.variant {
            Variant::Imm => vec![self.recv_cq],
            Variant::Zeroing => vec![],
        }
    }

    fn own_cqs(&self) -> Vec<CqId> {
        vec![]
    }
}

pub fn open_concrete(
    fab: &mut Fabric,
    senders: &[EndpointId],
    r: EndpointId,
    cfg: &ChannelConfig,
    variant: Variant,
) -> Result<(Vec<SringSender>, SringReceiver), ChanError> {
    let cap = cfg.ring_capacity;
    let ring = fab.register(r, cap, Access::REMOTE_WRITE | Access::LOCAL_WRITE, Location::Host)?;
    ring_view(fab, ring, cap)?;
    let head = fab.register(r, 8, Access::REMOTE_ATOMIC | Access::LOCAL_WRITE, cfg.head_loc)?;
    let tail = fab.register(r, 8, Access::REMOTE_READ | Access::LOCAL_WRITE, cfg.tail_loc)?;
    let srq = fab.create_srq(r);
    let recv_cq = fab.create_cq(r);
    let send_cq = fab.create_cq(r);
    if variant == Variant::Imm {
        for _ in 0..cap / 4 {
            fab.post_srq_recv(srq, WorkRequest::recv(0, vec![]))?;
        }
    }
    let mut txs = Vec::new();
    for &s in senders {
        let (scq, srcq) = (fab.create_cq(s), fab.create_cq(s));
        let qs = fab.create_qp(s, QpConfig { send_cq: scq, recv_cq: srcq, srq: None });
        let qr = fab.create_qp(r, QpConfig { send_cq, recv_cq, srq: Some(srq) });
        fab.connect(qs, qr)?;
        let result = fab.register(s, 8, Access::LOCAL_WRITE, Location::Host)?;
        let tail_copy = fab.register(s, 8, Access::LOCAL_WRITE, Location::Host)?;
        let scratch = fab.register(s, 12, Access::NONE, Location::Host)?;
        fab.store(scratch, S_DONE, &DONE)?;
        txs.push(SringSender {
            ep: s,
            peer: r,
            qp: qs,
            send_cq: scq,
            variant,
            ring,
            head,
            tail,
            result,
            tail_copy,
            scratch,
            cap,
            window: cfg.slots as u64,
            cached_tail: 0,
            seen_head: 0,
            tail_reading: false,
            sent: 0,
            pending: VecDeque::new(),
            writing: HashMap::new(),
            delay: 0,
            offsets: Vec::new(),
            reservations: Vec::new(),
            record_offsets: false,
        });
    }
    let rx = SringReceiver {
        ep: r,
        srq,
        recv_cq,
        send_cq,
        variant,
        ring,
        head,
        tail,
        cap,
        parse: 0,
        ready: VecDeque::new(),
        held: HashMap::new(),
        freed: PrefixTracker::new(0),
    };
    Ok((txs, rx))
}

pub(crate) fn open(
    fab: &mut Fabric,
    senders: &[EndpointId],
    r: EndpointId,
    cfg: &ChannelConfig,
    variant: Variant,
) -> Result<FanIn, ChanError> {
    let (txs, rx) = open_concrete(fab, senders, r, cfg, variant)?;
    Ok((txs.into_iter().map(|t| Box::new(t) as Box<dyn ChannelSender>).collect(), Box::new(rx)))
}
