//! Read ring: the sender publishes records into its own remotely readable
//! ring and any number of readers pull them with READ.
//!
//! Publishing is a local copy followed by local stores, so the inlined and
//! detached senders never post a request. Readers fetch into a local mirror
//! of the ring (same physical offsets) and hand out regions of the mirror in
//! place. Each reader reports its released tail back; the sender may only
//! overwrite bytes every reader has released.

use super::FanOut;
use std::collections::{HashMap, VecDeque};

use super::credit::{ack_path, AckRx, AckTx, PrefixTracker};
use super::opts::OptionBook;
use super::{
    status_ok, too_large, ChanError, ChannelConfig, ChannelReceiver, ChannelSender, RecvHandle, RegionOption, Selector,
    SendHandle,
};
use crate::fabric::{CqId, EndpointId, Fabric, Purpose, QpId, RegionId, RemoteTarget, Sge, WorkRequest};
use crate::memory::{align4, copy_instrumented, ring_view, Access, Location, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Inlined,
    Detached,
    Notify,
}

impl Variant {
    pub fn of(sel: Selector) -> Option<Variant> {
        match sel {
            Selector::RringInlined => Some(Variant::Inlined),
            Selector::RringDetached => Some(Variant::Detached),
            Selector::RringNotify => Some(Variant::Notify),
            _ => None,
        }
    }
}

struct Reader {
    qp: QpId,
    tail: AckRx,
}

pub struct RringSender {
    ep: EndpointId,
    variant: Variant,
    ring: RegionId,
    head_region: Option<RegionId>,
    send_cq: CqId,
    cap: u64,
    fixed: Option<u64>,
    write_ticks: u64,
    notify_batch: u64,
    head: u64,
    announced: u64,
    readers: Vec<Reader>,
    min_tail: u64,
    sent: u64,
}

impl RringSender {
    fn record_len(&self, len: u64) -> u64 {
        match self.fixed {
            Some(f) => f,
            None => 4 + align4(len),
        }
    }

    fn refresh(&mut self, fab: &mut Fabric) -> Result<u64, ChanError> {
        let mut min = u64::MAX;
        for r in &mut self.readers {
            min = min.min(r.tail.released(fab)?);
        }
        self.min_tail = min;
        Ok(min)
    }

    fn announce(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        if self.announced == self.head {
            return Ok(false);
        }
        for r in &self.readers {
            let wr = WorkRequest::send_imm(self.sent, vec![], self.head as u32).unsignaled().with_purpose(Purpose::Aux);
            fab.post(r.qp, wr)?;
        }
        self.announced = self.head;
        Ok(true)
    }

    /// Smallest tail reported by any reader.
    pub fn min_tail(&self) -> u64 {
        self.min_tail
    }

    pub fn head(&self) -> u64 {
        self.head
    }
}

impl ChannelSender for RringSender {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn max_message_size(&self) -> u64 {
        self.fixed.unwrap_or(self.cap / 4)
    }

    fn send_region(&mut self, fab: &mut Fabric, r: Region) -> Result<SendHandle, ChanError> {
        too_large(r.len, self.max_message_size())?;
        if r.len == 0 && self.fixed.is_none() {
            return Err(ChanError::EmptyMessage);
        }
        if self.fixed.is_some_and(|f| f != r.len) {
            return Err(ChanError::Unsupported("fixed-size records need messages of exactly the record size"));
        }
        let rec = self.record_len(r.len);
        let guard = if self.variant == Variant::Inlined { 4 } else { 0 };
        let tail = self.refresh(fab)?;
        if self.head + rec + guard - tail > self.cap {
            return Err(ChanError::NoCredit);
        }
        let (cap, h) = (self.cap, self.head);
        let body = if self.fixed.is_some() { h } else { h + 4 };
        copy_instrumented(fab, &r, &Region::pool(self.ring, body % cap, r.len))?;
        self.head += rec;
        let len = (r.len as u32).to_le_bytes();
        match self.variant {
            Variant::Inlined => {
                // Payload, then clear the next bell, then publish the length.
                fab.store(self.ring, self.head % cap, &[0; 4])?;
                fab.store_at(self.write_ticks, self.ring, h % cap, len.to_vec())?;
            }
            Variant::Detached | Variant::Notify => {
                if self.fixed.is_none() {
                    fab.store(self.ring, h % cap, &len)?;
                }
                if let Some(hr) = self.head_region {
                    fab.store_at(self.write_ticks, hr, 0, self.head.to_le_bytes().to_vec())?;
                }
            }
        }
        let seq = self.sent;
        self.sent += 1;
        if self.variant == Variant::Notify && self.sent.is_multiple_of(self.notify_batch) {
            self.announce(fab)?;
        }
        Ok(SendHandle(seq))
    }

    /// The payload is copied at publish time, so the source is free at once.
    fn test_send_request(&mut self, _fab: &mut Fabric, h: SendHandle) -> Result<bool, ChanError> {
        if h.0 >= self.sent {
            return Err(ChanError::UnknownHandle);
        }
        Ok(true)
    }

    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = false;
        if self.variant == Variant::Notify {
            any |= self.announce(fab)?;
            while let Some(ev) = fab.poll_one(self.send_cq) {
                status_ok(&ev)?;
            }
        }
        Ok(any)
    }

    fn occupied_bytes(&self) -> u64 {
        let min = self.readers.iter().map(|r| r.tail.cached()).min().unwrap_or(0);
        self.head - min
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Pull {
    Idle,
    /// Inlined: bytes `[at, at + len)` requested.
    Window {
        at: u64,
        len: u64,
    },
    /// Inlined: the payload of the record at `at`.
    Payload {
        at: u64,
    },
    HeadWord,
    /// Detached and notify: records up to `to`.
    Range {
        to: u64,
    },
    Backoff(u64),
}

const HEAD_READ: u64 = 1;
const DATA_READ: u64 = 2;

pub struct RringReader {
    ep: EndpointId,
    peer: EndpointId,
    variant: Variant,
    qp: QpId,
    send_cq: CqId,
    recv_cq: CqId,
    ring: RegionId,
    head_region: Option<RegionId>,
    mirror: RegionId,
    scratch: RegionId,
    cap: u64,
    fixed: Option<u64>,
    prefetch: u64,
    backoff: u64,
    head: u64,
    announced: u64,
    pull: Pull,
    ready: VecDeque<Region>,
    held: HashMap<u64, (u64, u64)>,
    freed: PrefixTracker,
    ack: AckTx,
    opts: OptionBook<Region, u64>,
    reads: u64,
    records: u64,
}

impl RringReader {
    fn remote(&self, region: RegionId, offset: u64) -> RemoteTarget {
        RemoteTarget { endpoint: self.peer, region, offset }
    }

    fn read_into_mirror(&mut self, fab: &mut Fabric, at: u64, len: u64) -> Result<(), ChanError> {
        let sge = Sge::new(self.mirror, at % self.cap, len as u32);
        fab.post(self.qp, WorkRequest::read(DATA_READ, vec![sge], self.remote(self.ring, at % self.cap)))?;
        self.reads += 1;
        Ok(())
    }

    fn deliver(&mut self, at: u64, payload_at: u64, len: u64, rec: u64) {
        let r = Region::pool(self.mirror, payload_at % self.cap, len);
        self.held.insert(r.offset, (at, rec));
        self.ready.push_back(r);
        self.records += 1;
    }

    /// Room in the mirror ahead of the parse position.
    fn room(&self) -> u64 {
        self.freed.base() + self.cap - self.head
    }

    fn start_pull(&mut self, fab: &mut Fabric) -> Result<(), ChanError> {
        match self.variant {
            Variant::Inlined => {
                let len = self.prefetch.min(self.room());
                if len >= 4 {
                    self.read_into_mirror(fab, self.head, len)?;
                    self.pull = Pull::Window { at: self.head, len };
                }
            }
            Variant::Detached => {
                let sge = Sge::new(self.scratch, 0, 8);
                let wr = WorkRequest::read(HEAD_READ, vec![sge], self.remote(self.head_region.expect("head"), 0));
                fab.post(self.qp, wr)?;
                self.reads += 1;
                self.pull = Pull::HeadWord;
            }
            Variant::Notify => {
                if self.announced > self.head {
                    self.read_range(fab, self.announced)?;
                }
            }
        }
        Ok(())
    }

    fn read_range(&mut self, fab: &mut Fabric, to: u64) -> Result<(), ChanError> {
        let to = to.min(self.freed.base() + self.cap);
        self.read_into_mirror(fab, self.head, to - self.head)?;
        self.pull = Pull::Range { to };
        Ok(())
    }

    /// Parses length-prefixed (or fixed-size) records in `[head, to)`.
    fn parse_range(&mut self, fab: &mut Fabric, to: u64) -> Result<(), ChanError> {
        let max = self.cap / 4;
        while self.head < to {
            let (len, body, rec) = match self.fixed {
                Some(f) => (f, self.head, f),
                None => {
                    let len = (fab.load_u32(self.mirror, self.head % self.cap)? as u64).min(max);
                    (len, self.head + 4, 4 + align4(len))
                }
            };
            self.deliver(self.head, body, len, rec);
            self.head += rec;
        }
        Ok(())
    }

    fn on_read(&mut self, fab: &mut Fabric, wr: u64) -> Result<(), ChanError> {
        let max = self.cap / 4;
        match (self.pull, wr) {
            (Pull::Window { at, len }, DATA_READ) => {
                let end = at + len;
                self.pull = Pull::Idle;
                while self.head + 4 <= end {
                    let n = (fab.load_u32(self.mirror, self.head % self.cap)? as u64).min(max);
                    if n == 0 {
                        break;
                    }
                    let rec = 4 + align4(n);
                    if self.head + 4 + n > end {
                        self.read_into_mirror(fab, self.head + 4, n)?;
                        self.pull = Pull::Payload { at: self.head };
                        return Ok(());
                    }
                    self.deliver(self.head, self.head + 4, n, rec);
                    self.head += rec;
                }
                if self.ready.is_empty() && self.backoff > 0 {
                    self.pull = Pull::Backoff(fab.now() + self.backoff);
                }
            }
            (Pull::Payload { at }, DATA_READ) => {
                let n = (fab.load_u32(self.mirror, at % self.cap)? as u64).min(max);
                self.deliver(at, at + 4, n, 4 + align4(n));
                self.head = at + 4 + align4(n);
                self.pull = Pull::Idle;
            }
            (Pull::HeadWord, HEAD_READ) => {
                let h = fab.load_u64(self.scratch, 0)?;
                self.pull = Pull::Idle;
                if h > self.head {
                    self.read_range(fab, h)?;
                } else if self.backoff > 0 {
                    self.pull = Pull::Backoff(fab.now() + self.backoff);
                }
            }
            (Pull::Range { to }, DATA_READ) => {
                self.pull = Pull::Idle;
                self.parse_range(fab, to)?;
            }
            _ => return Err(ChanError::Transport("unexpected READ completion".into())),
        }
        Ok(())
    }

    pub fn reads(&self) -> u64 {
        self.reads
    }

    /// Records delivered so far.
    pub fn records(&self) -> u64 {
        self.records
    }

    pub fn released(&self) -> u64 {
        self.freed.base()
    }
}

impl ChannelReceiver for RringReader {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn receive_region(&mut self, fab: &mut Fabric) -> Result<Option<Region>, ChanError> {
        if self.ready.is_empty() {
            self.progress(fab)?;
        }
        // Pulls are issued on behalf of the application only, so an idle
        // reader leaves the network alone.
        if self.ready.is_empty() && self.pull == Pull::Idle {
            self.start_pull(fab)?;
        }
        Ok(self.ready.pop_front())
    }

    fn free_receive_region(&mut self, _fab: &mut Fabric, r: Region) -> Result<(), ChanError> {
        if r.region != self.mirror {
            return Err(ChanError::DoubleFree);
        }
        let (at, rec) = self.held.remove(&r.offset).ok_or(ChanError::DoubleFree)?;
        self.freed.complete(at, at + rec)
    }

    fn supports_options(&self) -> bool {
        true
    }

    fn can_receive_region(&mut self, fab: &mut Fabric) -> Result<Option<RegionOption>, ChanError> {
        let Some(r) = self.receive_region(fab)? else { return Ok(None) };
        let token = self.opts.offer(r);
        Ok(Some(RegionOption { source: (self.peer, self.ring, r.offset), length: r.len, token, in_place: Some(r) }))
    }

    fn receive_region_into(&mut self, fab: &mut Fabric, o: RegionOption, dst: Region) -> Result<RecvHandle, ChanError> {
        let r = self.opts.take(o.token)?;
        if dst.len < r.len {
            self.opts.restore(o.token, r);
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
        let before = (self.ready.len(), self.pull);
        while let Some(ev) = fab.poll_one(self.recv_cq) {
            status_ok(&ev)?;
            let imm = ev.imm.unwrap_or(0);
            let delta = imm.wrapping_sub(self.announced as u32) as u64;
            if delta < 1 << 31 {
                self.announced += delta;
            }
            fab.post(self.qp, WorkRequest::recv(0, vec![]))?;
        }
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
            if ev.opcode == crate::fabric::Opcode::Read {
                self.on_read(fab, ev.wr_id)?;
            }
        }
        if let Pull::Backoff(at) = self.pull {
            if fab.now() >= at {
                self.pull = Pull::Idle;
            }
        }
        let acked = self.ack.update(fab, self.freed.base(), self.ready.is_empty())?;
        Ok(acked || before != (self.ready.len(), self.pull))
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

pub fn open_concrete(
    fab: &mut Fabric,
    s: EndpointId,
    readers: &[EndpointId],
    cfg: &ChannelConfig,
    variant: Variant,
) -> Result<(RringSender, Vec<RringReader>), ChanError> {
    let cap = cfg.ring_capacity;
    let ring = fab.register(s, cap, Access::REMOTE_READ | Access::LOCAL_WRITE, Location::Host)?;
    ring_view(fab, ring, cap)?;
    let head_region = match variant {
        Variant::Inlined => None,
        _ => Some(fab.register(s, 8, Access::REMOTE_READ | Access::LOCAL_WRITE, Location::Host)?),
    };
    let fixed = if variant == Variant::Detached { cfg.fixed_size } else { None };
    let send_cq = fab.create_cq(s);
    let mut tx = RringSender {
        ep: s,
        variant,
        ring,
        head_region,
        send_cq,
        cap,
        fixed,
        write_ticks: cfg.write_ticks,
        notify_batch: cfg.notify_batch.max(1) as u64,
        head: 0,
        announced: 0,
        readers: Vec::new(),
        min_tail: 0,
        sent: 0,
    };
    // Tail acknowledgments are byte counters; bound their number by the
    // smallest record.
    let ack_window = cap / 8;
    let mut rxs = Vec::new();
    for &r in readers {
        let recv_cq = fab.create_cq(s);
        let qs = fab.create_qp(s, crate::fabric::QpConfig { send_cq, recv_cq, srq: None });
        let (rsc, rrc) = (fab.create_cq(r), fab.create_cq(r));
        let qr = fab.create_qp(r, crate::fabric::QpConfig { send_cq: rsc, recv_cq: rrc, srq: None });
        fab.connect(qs, qr)?;
        if variant == Variant::Notify {
            for _ in 0..cap / 8 {
                fab.post(qr, WorkRequest::recv(0, vec![]))?;
            }
        }
        let (ack_rx, ack_tx) = ack_path(fab, s, r, qs, qr, ack_window, cap / 4)?;
        tx.readers.push(Reader { qp: qs, tail: ack_rx });
        let mirror = fab.register_app(r, cap, Access::LOCAL_WRITE)?;
        ring_view(fab, mirror, cap)?;
        let scratch = fab.register(r, 8, Access::LOCAL_WRITE, Location::Host)?;
        rxs.push(RringReader {
            ep: r,
            peer: s,
            variant,
            qp: qr,
            send_cq: rsc,
            recv_cq: rrc,
            ring,
            head_region,
            mirror,
            scratch,
            cap,
            fixed,
            prefetch: cfg.prefetch_bytes.clamp(4, cap / 2),
            backoff: cfg.read_backoff,
            head: 0,
            announced: 0,
            pull: Pull::Idle,
            ready: VecDeque::new(),
            held: HashMap::new(),
            freed: PrefixTracker::new(0),
            ack: ack_tx,
            opts: OptionBook::default(),
            reads: 0,
            records: 0,
        });
    }
    Ok((tx, rxs))
}

pub(crate) fn open(
    fab: &mut Fabric,
    s: EndpointId,
    readers: &[EndpointId],
    cfg: &ChannelConfig,
    sel: Selector,
) -> Result<FanOut, ChanError> {
    let variant = Variant::of(sel).ok_or(ChanError::Topology("not a read-ring selector"))?;
    let (tx, rxs) = open_concrete(fab, s, readers, cfg, variant)?;
    Ok((Box::new(tx), rxs.into_iter().map(|r| Box::new(r) as Box<dyn ChannelReceiver>).collect()))
}
