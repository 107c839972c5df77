//! Two-sided channels: every message is a SEND consuming a pre-posted RECV.

use super::{FanIn, Pair};
use std::collections::{HashMap, HashSet, VecDeque};

use super::credit::{ack_path, AckRx, AckTx};
use super::opts::OptionBook;
use super::{
    status_ok, too_large, ChanError, ChannelConfig, ChannelReceiver, ChannelSender, RecvHandle, RegionOption,
    SendHandle,
};
use crate::fabric::{CqId, EndpointId, Fabric, QpConfig, QpId, RegionId, Sge, SrqId, WorkRequest};
use crate::memory::{copy_instrumented, Access, Location, Region};

/// Largest payload a bufferless channel carries inside the immediate.
pub const BUFFERLESS_MAX: u64 = 3;

/// Packs up to three payload bytes and their count into an immediate.
pub fn encode_imm(payload: &[u8]) -> u32 {
    assert!(payload.len() as u64 <= BUFFERLESS_MAX);
    let mut imm = (payload.len() as u32) << 24;
    for (i, b) in payload.iter().enumerate() {
        imm |= (*b as u32) << (16 - 8 * i);
    }
    imm
}

pub fn decode_imm(imm: u32) -> Vec<u8> {
    let n = ((imm >> 24) as usize).min(3);
    (0..n).map(|i| (imm >> (16 - 8 * i)) as u8).collect()
}

pub struct SrSender {
    ep: EndpointId,
    qp: QpId,
    send_cq: CqId,
    ack: AckRx,
    sent: u64,
    window: u64,
    max: u64,
    bufferless: bool,
    inflight: HashSet<u64>,
}

impl SrSender {
    fn credit(&mut self, fab: &mut Fabric) -> Result<u64, ChanError> {
        let released = self.ack.released(fab)?;
        Ok(self.window - (self.sent - released))
    }
}

impl ChannelSender for SrSender {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn max_message_size(&self) -> u64 {
        self.max
    }

    fn send_region(&mut self, fab: &mut Fabric, r: Region) -> Result<SendHandle, ChanError> {
        too_large(r.len, self.max)?;
        if self.credit(fab)? == 0 {
            return Err(ChanError::NoCredit);
        }
        let id = self.sent;
        let wr = if self.bufferless {
            let bytes = fab.load(r.region, r.offset, r.len)?;
            WorkRequest::send_imm(id, vec![], encode_imm(&bytes))
        } else {
            WorkRequest::send(id, vec![r.sge()])
        };
        fab.post(self.qp, wr)?;
        self.sent += 1;
        self.inflight.insert(id);
        Ok(SendHandle(id))
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
            self.inflight.remove(&ev.wr_id);
            any = true;
        }
        Ok(any)
    }

    fn occupied_bytes(&self) -> u64 {
        // Every message pins a whole receive buffer until it is reposted.
        let slot = if self.bufferless { 0 } else { self.max };
        (self.sent - self.ack.cached()) * slot
    }
}

/// Receiver with a private pool of buffers, or a bufferless one.
pub struct SrReceiver {
    ep: EndpointId,
    qp: QpId,
    recv_cq: CqId,
    send_cq: CqId,
    pool: RegionId,
    slot: u64,
    bufferless: bool,
    ready: VecDeque<(Region, u64)>,
    held: HashMap<u64, u64>,
    opts: OptionBook<Region, u64>,
    freed: u64,
    ack: AckTx,
}

impl SrReceiver {
    fn post_slot(&mut self, fab: &mut Fabric, slot: u64) -> Result<(), ChanError> {
        let scatter =
            if self.bufferless { vec![] } else { vec![Sge::new(self.pool, slot * self.slot, self.slot as u32)] };
        fab.post(self.qp, WorkRequest::recv(slot, scatter))?;
        Ok(())
    }
}

impl ChannelReceiver for SrReceiver {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn receive_region(&mut self, fab: &mut Fabric) -> Result<Option<Region>, ChanError> {
        if self.ready.is_empty() {
            self.progress(fab)?;
        }
        Ok(self.ready.pop_front().map(|(r, slot)| {
            self.held.insert(r.offset, slot);
            r
        }))
    }

    fn free_receive_region(&mut self, fab: &mut Fabric, r: Region) -> Result<(), ChanError> {
        if r.region != self.pool {
            return Err(ChanError::DoubleFree);
        }
        let slot = self.held.remove(&r.offset).ok_or(ChanError::DoubleFree)?;
        self.post_slot(fab, slot)?;
        self.freed += 1;
        Ok(())
    }

    fn supports_options(&self) -> bool {
        true
    }

    fn can_receive_region(&mut self, fab: &mut Fabric) -> Result<Option<RegionOption>, ChanError> {
        let Some(r) = self.receive_region(fab)? else { return Ok(None) };
        let token = self.opts.offer(r);
        Ok(Some(RegionOption { source: (self.ep, r.region, r.offset), length: r.len, token, in_place: None }))
    }

    fn receive_region_into(&mut self, fab: &mut Fabric, o: RegionOption, dst: Region) -> Result<RecvHandle, ChanError> {
        let r = take_into(fab, &mut self.opts, o, dst)?;
        self.free_receive_region(fab, r)?;
        Ok(self.opts.start(r.len))
    }

    fn test_receive_request(&mut self, _fab: &mut Fabric, h: RecvHandle) -> Result<Option<u64>, ChanError> {
        self.opts.finish(h).map(Some).ok_or(ChanError::UnknownHandle)
    }

    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = false;
        while let Some(ev) = fab.poll_one(self.recv_cq) {
            status_ok(&ev)?;
            let slot = ev.wr_id;
            let region = if self.bufferless {
                let bytes = decode_imm(ev.imm.unwrap_or(0));
                fab.store(self.pool, slot * 4, &bytes)?;
                Region::pool(self.pool, slot * 4, bytes.len() as u64)
            } else {
                Region::pool(self.pool, slot * self.slot, ev.byte_len as u64)
            };
            self.ready.push_back((region, slot));
            any = true;
        }
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
        }
        any |= self.ack.update(fab, self.freed, self.ready.is_empty())?;
        Ok(any)
    }

    fn notify_cqs(&self) -> Vec<CqId> {
        vec![self.recv_cq]
    }

    fn own_cqs(&self) -> Vec<CqId> {
        vec![self.send_cq]
    }
}

/// The message already sits in a receive buffer, so landing it at the
/// application's destination costs a copy.
fn take_into(
    fab: &mut Fabric,
    opts: &mut OptionBook<Region, u64>,
    o: RegionOption,
    dst: Region,
) -> Result<Region, ChanError> {
    let r = opts.take(o.token)?;
    if dst.len < r.len {
        opts.restore(o.token, r);
        return Err(ChanError::DstTooSmall { dst: dst.len, len: r.len });
    }
    copy_instrumented(fab, &r, &dst.sub(0, r.len))?;
    Ok(r)
}

fn open_one(
    fab: &mut Fabric,
    s: EndpointId,
    r: EndpointId,
    cfg: &ChannelConfig,
    bufferless: bool,
) -> Result<Pair, ChanError> {
    let depth = cfg.slots as u64;
    let (qs, qr) = fab.connect_endpoints(s, r);
    let (slot, pool) = if bufferless {
        (4, fab.register_app(r, 4 * depth, Access::LOCAL_WRITE)?)
    } else {
        (cfg.slot_size, fab.register(r, cfg.slot_size * depth, Access::LOCAL_WRITE, Location::Host)?)
    };
    let (ack_rx, ack_tx) = ack_path(fab, s, r, qs, qr, depth, cfg.batch_for(depth))?;
    let qcr = fab.qp_config(qr)?;
    let mut rx = SrReceiver {
        ep: r,
        qp: qr,
        recv_cq: qcr.recv_cq,
        send_cq: qcr.send_cq,
        pool,
        slot,
        bufferless,
        ready: VecDeque::new(),
        held: HashMap::new(),
        opts: OptionBook::default(),
        freed: 0,
        ack: ack_tx,
    };
    for i in 0..depth {
        rx.post_slot(fab, i)?;
    }
    let tx = SrSender {
        ep: s,
        qp: qs,
        send_cq: fab.qp_config(qs)?.send_cq,
        ack: ack_rx,
        sent: 0,
        window: depth,
        max: if bufferless { BUFFERLESS_MAX } else { cfg.slot_size },
        bufferless,
        inflight: HashSet::new(),
    };
    Ok((Box::new(tx), Box::new(rx)))
}

pub(crate) fn open_normal(
    fab: &mut Fabric,
    s: EndpointId,
    r: EndpointId,
    cfg: &ChannelConfig,
) -> Result<Pair, ChanError> {
    open_one(fab, s, r, cfg, false)
}

pub(crate) fn open_bufferless(
    fab: &mut Fabric,
    s: EndpointId,
    r: EndpointId,
    cfg: &ChannelConfig,
) -> Result<Pair, ChanError> {
    open_one(fab, s, r, cfg, true)
}

/// One receive pool on a shared receive queue serving every sender.
pub struct SharedReceiver {
    ep: EndpointId,
    srq: SrqId,
    recv_cq: CqId,
    send_cq: CqId,
    pool: RegionId,
    slot: u64,
    senders: HashMap<QpId, usize>,
    ready: VecDeque<(Region, u64, usize)>,
    held: HashMap<u64, (u64, usize)>,
    opts: OptionBook<Region, u64>,
    freed: Vec<u64>,
    acks: Vec<AckTx>,
}

impl ChannelReceiver for SharedReceiver {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn receive_region(&mut self, fab: &mut Fabric) -> Result<Option<Region>, ChanError> {
        if self.ready.is_empty() {
            self.progress(fab)?;
        }
        Ok(self.ready.pop_front().map(|(r, slot, sender)| {
            self.held.insert(r.offset, (slot, sender));
            r
        }))
    }

    fn free_receive_region(&mut self, fab: &mut Fabric, r: Region) -> Result<(), ChanError> {
        if r.region != self.pool {
            return Err(ChanError::DoubleFree);
        }
        let (slot, sender) = self.held.remove(&r.offset).ok_or(ChanError::DoubleFree)?;
        let sge = Sge::new(self.pool, slot * self.slot, self.slot as u32);
        fab.post_srq_recv(self.srq, WorkRequest::recv(slot, vec![sge]))?;
        self.freed[sender] += 1;
        Ok(())
    }

    fn supports_options(&self) -> bool {
        true
    }

    fn can_receive_region(&mut self, fab: &mut Fabric) -> Result<Option<RegionOption>, ChanError> {
        let Some(r) = self.receive_region(fab)? else { return Ok(None) };
        let token = self.opts.offer(r);
        Ok(Some(RegionOption { source: (self.ep, r.region, r.offset), length: r.len, token, in_place: None }))
    }

    fn receive_region_into(&mut self, fab: &mut Fabric, o: RegionOption, dst: Region) -> Result<RecvHandle, ChanError> {
        let r = take_into(fab, &mut self.opts, o, dst)?;
        self.free_receive_region(fab, r)?;
        Ok(self.opts.start(r.len))
    }

    fn test_receive_request(&mut self, _fab: &mut Fabric, h: RecvHandle) -> Result<Option<u64>, ChanError> {
        self.opts.finish(h).map(Some).ok_or(ChanError::UnknownHandle)
    }

    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = false;
        while let Some(ev) = fab.poll_one(self.recv_cq) {
            status_ok(&ev)?;
            let sender = self.senders[&ev.qp];
            let region = Region::pool(self.pool, ev.wr_id * self.slot, ev.byte_len as u64);
            self.ready.push_back((region, ev.wr_id, sender));
            any = true;
        }
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
        }
        let idle = self.ready.is_empty();
        for (ack, freed) in self.acks.iter_mut().zip(&self.freed) {
            any |= ack.update(fab, *freed, idle)?;
        }
        Ok(any)
    }

    fn notify_cqs(&self) -> Vec<CqId> {
        vec![self.recv_cq]
    }

    fn own_cqs(&self) -> Vec<CqId> {
        vec![self.send_cq]
    }
}

pub(crate) fn open_shared(
    fab: &mut Fabric,
    senders: &[EndpointId],
    r: EndpointId,
    cfg: &ChannelConfig,
) -> Result<FanIn, ChanError> {
    let depth = cfg.slots as u64;
    let n = senders.len() as u64;
    if depth < n {
        return Err(ChanError::Topology("shared pool smaller than the number of senders"));
    }
    // Each sender may hold an equal share of the pool; a freed buffer returns
    // credit to the sender that used it.
    let share = depth / n;
    let pool = fab.register(r, cfg.slot_size * depth, Access::LOCAL_WRITE, Location::Host)?;
    let srq = fab.create_srq(r);
    let recv_cq = fab.create_cq(r);
    let send_cq = fab.create_cq(r);
    for i in 0..depth {
        let sge = Sge::new(pool, i * cfg.slot_size, cfg.slot_size as u32);
        fab.post_srq_recv(srq, WorkRequest::recv(i, vec![sge]))?;
    }
    let mut txs: Vec<Box<dyn ChannelSender>> = Vec::new();
    let mut map = HashMap::new();
    let mut acks = Vec::new();
    for (i, &s) in senders.iter().enumerate() {
        let (scq, srcq) = (fab.create_cq(s), fab.create_cq(s));
        let qs = fab.create_qp(s, QpConfig { send_cq: scq, recv_cq: srcq, srq: None });
        let qr = fab.create_qp(r, QpConfig { send_cq, recv_cq, srq: Some(srq) });
        fab.connect(qs, qr)?;
        map.insert(qr, i);
        let (ack_rx, ack_tx) = ack_path(fab, s, r, qs, qr, share, cfg.batch_for(share))?;
        acks.push(ack_tx);
        txs.push(Box::new(SrSender {
            ep: s,
            qp: qs,
            send_cq: scq,
            ack: ack_rx,
            sent: 0,
            window: share,
            max: cfg.slot_size,
            bufferless: false,
            inflight: HashSet::new(),
        }));
    }
    let rx = SharedReceiver {
        ep: r,
        srq,
        recv_cq,
        send_cq,
        pool,
        slot: cfg.slot_size,
        senders: map,
        ready: VecDeque::new(),
        held: HashMap::new(),
        opts: OptionBook::default(),
        freed: vec![0; senders.len()],
        acks,
    };
    Ok((txs, Box::new(rx)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn imm_packing_round_trips() {
        for p in [&b""[..], b"a", b"ab", b"xyz"] {
            assert_eq!(decode_imm(encode_imm(p)), p);
        }
        assert_eq!(encode_imm(&[7]), (1 << 24) | (7 << 16));
    }
}
