//! Indirect read: the receiver advertises a destination buffer with a SEND and
//! the sender WRITEs the message straight into it, naming the advertisement
//! in the immediate.

use crate::chan::Pair;
use std::collections::{HashMap, HashSet, VecDeque};

use super::super::opts::OptionBook;
use super::super::{
    status_ok, too_large, ChanError, ChannelConfig, ChannelReceiver, ChannelSender, RecvHandle, RegionOption,
    SendHandle,
};
use super::Stage;
use crate::fabric::{CqId, EndpointId, Fabric, Purpose, QpId, RegionId, RemoteTarget, Sge, WorkRequest};
use crate::memory::{Access, Location, Region};

/// Advertisement: region u32, length u32, offset u64.
pub const AD_LEN: u64 = 16;

pub fn encode_ad(r: &Region) -> [u8; 16] {
    let mut b = [0u8; 16];
    b[..4].copy_from_slice(&r.region.0.to_le_bytes());
    b[4..8].copy_from_slice(&(r.len as u32).to_le_bytes());
    b[8..].copy_from_slice(&r.offset.to_le_bytes());
    b
}

pub fn decode_ad(b: &[u8]) -> (RegionId, u64, u64) {
    let region = RegionId(u32::from_le_bytes(b[..4].try_into().expect("4 bytes")));
    let len = u32::from_le_bytes(b[4..8].try_into().expect("4 bytes")) as u64;
    let offset = u64::from_le_bytes(b[8..16].try_into().expect("8 bytes"));
    (region, len, offset)
}

pub struct IndirectSender {
    ep: EndpointId,
    peer: EndpointId,
    qp: QpId,
    send_cq: CqId,
    recv_cq: CqId,
    ads: RegionId,
    max: u64,
    window: u64,
    sent: u64,
    offered: VecDeque<(u32, RemoteTarget, u64)>,
    queue: VecDeque<(u64, Region)>,
    inflight: HashSet<u64>,
}

impl IndirectSender {
    fn flush(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = false;
        while !self.queue.is_empty() && !self.offered.is_empty() {
            let (seq, r) = self.queue.pop_front().expect("non-empty");
            let (id, to, cap) = self.offered.pop_front().expect("non-empty");
            if r.len > cap {
                return Err(ChanError::DstTooSmall { dst: cap, len: r.len });
            }
            fab.post(self.qp, WorkRequest::write_imm(seq, vec![r.sge()], to, id))?;
            self.inflight.insert(seq);
            any = true;
        }
        Ok(any)
    }
}

impl ChannelSender for IndirectSender {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn max_message_size(&self) -> u64 {
        self.max
    }

    fn send_region(&mut self, fab: &mut Fabric, r: Region) -> Result<SendHandle, ChanError> {
        too_large(r.len, self.max)?;
        if self.queue.len() as u64 >= self.window {
            return Err(ChanError::NoCredit);
        }
        let seq = self.sent;
        self.sent += 1;
        self.queue.push_back((seq, r));
        self.inflight.insert(seq);
        self.flush(fab)?;
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
            let slot = ev.wr_id;
            let (region, len, offset) = decode_ad(&fab.load(self.ads, slot * AD_LEN, AD_LEN)?);
            let to = RemoteTarget { endpoint: self.peer, region, offset };
            self.offered.push_back((ev.imm.unwrap_or(0), to, len));
            fab.post(self.qp, WorkRequest::recv(slot, vec![Sge::new(self.ads, slot * AD_LEN, AD_LEN as u32)]))?;
            any = true;
        }
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
            any |= self.inflight.remove(&ev.wr_id);
        }
        any |= self.flush(fab)?;
        Ok(any)
    }

    fn occupied_bytes(&self) -> u64 {
        self.inflight.len() as u64 * self.max
    }
}

#[derive(Debug, Clone, Copy)]
enum Req {
    Waiting,
    Done(u64),
}

pub struct IndirectReceiver {
    ep: EndpointId,
    peer: EndpointId,
    qp: QpId,
    send_cq: CqId,
    recv_cq: CqId,
    scratch: RegionId,
    max: u64,
    slots: u64,
    next_ad: u32,
    waiting: HashMap<u32, RecvHandle>,
    opts: OptionBook<(), Req>,
    stage: Stage,
}

impl ChannelReceiver for IndirectReceiver {
    fn endpoint(&self) -> EndpointId {
        self.ep
    }

    fn receive_region(&mut self, fab: &mut Fabric) -> Result<Option<Region>, ChanError> {
        if self.stage.held {
            return Ok(None);
        }
        if self.stage.req.is_none() {
            let Some(o) = self.can_receive_region(fab)? else { return Ok(None) };
            let dst = self.stage.region;
            self.stage.req = Some(self.receive_region_into(fab, o, dst)?);
        }
        match self.test_receive_request(fab, self.stage.req.expect("staged"))? {
            Some(len) => {
                self.stage.req = None;
                self.stage.held = true;
                Ok(Some(self.stage.region.sub(0, len)))
            }
            None => Ok(None),
        }
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

    /// One option per free advertisement; the message length is only known
    /// once the WRITE lands, so the option carries the maximum.
    fn can_receive_region(&mut self, fab: &mut Fabric) -> Result<Option<RegionOption>, ChanError> {
        self.progress(fab)?;
        if self.waiting.len() as u64 >= self.slots {
            return Ok(None);
        }
        let token = self.opts.offer(());
        Ok(Some(RegionOption { source: (self.peer, self.scratch, 0), length: self.max, token, in_place: None }))
    }

    fn receive_region_into(&mut self, fab: &mut Fabric, o: RegionOption, dst: Region) -> Result<RecvHandle, ChanError> {
        self.opts.take(o.token)?;
        if dst.len < self.max {
            self.opts.restore(o.token, ());
            return Err(ChanError::DstTooSmall { dst: dst.len, len: self.max });
        }
        let id = self.next_ad;
        self.next_ad = self.next_ad.wrapping_add(1);
        let at = (id as u64 % self.slots) * AD_LEN;
        fab.store(self.scratch, at, &encode_ad(&dst.sub(0, self.max)))?;
        let sge = Sge::new(self.scratch, at, AD_LEN as u32);
        fab.post(self.qp, WorkRequest::send_imm(id as u64, vec![sge], id).unsignaled().with_purpose(Purpose::Aux))?;
        let h = self.opts.start(Req::Waiting);
        self.waiting.insert(id, h);
        Ok(h)
    }

    fn test_receive_request(&mut self, fab: &mut Fabric, h: RecvHandle) -> Result<Option<u64>, ChanError> {
        if let Req::Waiting = self.opts.req(h)? {
            self.progress(fab)?;
        }
        match *self.opts.req(h)? {
            Req::Done(len) => {
                self.opts.finish(h);
                Ok(Some(len))
            }
            Req::Waiting => Ok(None),
        }
    }

    fn progress(&mut self, fab: &mut Fabric) -> Result<bool, ChanError> {
        let mut any = false;
        while let Some(ev) = fab.poll_one(self.recv_cq) {
            status_ok(&ev)?;
            let id = ev.imm.unwrap_or(0);
            let h = self.waiting.remove(&id).ok_or(ChanError::Transport("write for unknown advertisement".into()))?;
            *self.opts.req_mut(h)? = Req::Done(ev.byte_len as u64);
            fab.post(self.qp, WorkRequest::recv(0, vec![]))?;
            any = true;
        }
        while let Some(ev) = fab.poll_one(self.send_cq) {
            status_ok(&ev)?;
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

pub(crate) fn open(fab: &mut Fabric, s: EndpointId, r: EndpointId, cfg: &ChannelConfig) -> Result<Pair, ChanError> {
    let slots = cfg.slots as u64;
    let max = cfg.slot_size;
    let (qs, qr) = fab.connect_endpoints(s, r);
    let ads = fab.register(s, slots * AD_LEN, Access::LOCAL_WRITE, Location::Host)?;
    for i in 0..slots {
        fab.post(qs, WorkRequest::recv(i, vec![Sge::new(ads, i * AD_LEN, AD_LEN as u32)]))?;
    }
    for _ in 0..slots {
        fab.post(qr, WorkRequest::recv(0, vec![]))?;
    }
    let scratch = fab.register(r, slots * AD_LEN, Access::NONE, Location::Host)?;
    let stage = fab.register_app(r, max, Access::LOCAL_WRITE | Access::REMOTE_WRITE)?;
    let qcs = fab.qp_config(qs)?;
    let qcr = fab.qp_config(qr)?;
    let tx = IndirectSender {
        ep: s,
        peer: r,
        qp: qs,
        send_cq: qcs.send_cq,
        recv_cq: qcs.recv_cq,
        ads,
        max,
        window: slots,
        sent: 0,
        offered: VecDeque::new(),
        queue: VecDeque::new(),
        inflight: HashSet::new(),
    };
    let rx = IndirectReceiver {
        ep: r,
        peer: s,
        qp: qr,
        send_cq: qcr.send_cq,
        recv_cq: qcr.recv_cq,
        scratch,
        max,
        slots,
        next_ad: 0,
        waiting: HashMap::new(),
        opts: OptionBook::default(),
        stage: Stage { region: Region::app(stage, 0, max), req: None, held: false },
    };
    Ok((Box::new(tx), Box::new(rx)))
}
