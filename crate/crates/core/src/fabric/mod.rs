//! Deterministic in-process RDMA fabric.
//!
//! Endpoints own registered regions, completion queues and queue pairs. Posted
//! work requests become timed events on a single event loop; time advances in
//! integer ticks and one network traversal costs `hrt_cost` ticks. Identical
//! seeds and call sequences yield identical traces.

mod counters;
mod profile;
mod types;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, VecDeque};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use counters::{dump_csv, Counters};
pub use profile::{ByteOrder, MessageOrder, ProfileName, RequestKind, RequestSet, TransportProfile};
pub use types::*;

use crate::memory::{Access, Location, MemoryRegion};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FabricError {
    #[error("unknown {0}")]
    Unknown(&'static str),
    #[error("window [{offset}, +{len}) outside {region}")]
    OutOfBounds { region: RegionId, offset: u64, len: u64 },
    #[error("ring capacity {0} must be a power of two equal to the region length")]
    BadRingCapacity(u64),
    #[error("copy length mismatch: {src} vs {dst}")]
    LengthMismatch { src: u64, dst: u64 },
    #[error("overlapping copy within one region")]
    OverlappingCopy,
    #[error("device memory request of {len} B exceeds cap {cap} B")]
    DeviceCapExceeded { len: u64, cap: u64 },
    #[error("zero-length registration")]
    ZeroLength,
    #[error("gather list of {0} elements exceeds 16")]
    TooManySges(usize),
    #[error("invalid work request: {0}")]
    InvalidRequest(&'static str),
    #[error("{0} is not connected")]
    NotConnected(QpId),
    #[error("{0} not owned by the posting endpoint")]
    NotOwned(RegionId),
    #[error("reorder policy {0:?} rejected on an in-order profile")]
    ReorderRejected(ReorderPolicy),
    #[error("global stall: no pending events")]
    Stall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClockParams {
    pub hrt_cost: u64,
    pub pcie_rt: u64,
}

impl Default for ClockParams {
    fn default() -> Self {
        ClockParams { hrt_cost: 10, pcie_rt: 0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FabricConfig {
    pub clock: ClockParams,
    /// Granularity of intra-message placement reordering.
    pub chunk_size: usize,
    pub device_cap: u64,
}

impl Default for FabricConfig {
    fn default() -> Self {
        FabricConfig { clock: ClockParams::default(), chunk_size: 4096, device_cap: 256 * 1024 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReorderPolicy {
    None,
    ShuffleMessages,
    ShuffleBytes,
}

#[derive(Debug, Clone, Copy)]
pub struct QpConfig {
    pub send_cq: CqId,
    pub recv_cq: CqId,
    pub srq: Option<SrqId>,
}

#[derive(Debug, Clone)]
struct RecvEntry {
    wr_id: u64,
    scatter: Vec<Sge>,
}

#[derive(Debug)]
struct Qp {
    ep: EndpointId,
    peer: Option<QpId>,
    cfg: QpConfig,
    rq: VecDeque<RecvEntry>,
}

#[derive(Debug, Default)]
struct Cq {
    ep: u32,
    queue: VecDeque<CompletionEvent>,
    outstanding: u64,
}

#[derive(Debug)]
struct Srq {
    ep: EndpointId,
    queue: VecDeque<RecvEntry>,
}

#[derive(Debug)]
struct Delivery {
    qp: QpId,
    wr_id: u64,
    opcode: Opcode,
    payload: Vec<u8>,
    target: Option<(RegionId, u64)>,
    /// Byte range still to place at delivery; earlier chunks arrived separately.
    tail: (usize, usize),
    imm: Option<u32>,
    signaled: bool,
}

#[derive(Debug)]
enum Event {
    Deliver(Box<Delivery>),
    PlaceChunk {
        region: RegionId,
        offset: u64,
        bytes: Vec<u8>,
    },
    ReadAtTarget {
        qp: QpId,
        wr_id: u64,
        region: RegionId,
        offset: u64,
        scatter: Vec<Sge>,
        signaled: bool,
    },
    ReadResponse {
        qp: QpId,
        wr_id: u64,
        data: Vec<u8>,
        scatter: Vec<Sge>,
        signaled: bool,
    },
    AtomicAtTarget {
        qp: QpId,
        wr_id: u64,
        op: Opcode,
        args: AtomicArgs,
        region: RegionId,
        offset: u64,
        result: Sge,
        signaled: bool,
    },
    AtomicResponse {
        qp: QpId,
        wr_id: u64,
        op: Opcode,
        old: u64,
        result: Sge,
        signaled: bool,
    },
    LocalStore {
        region: RegionId,
        offset: u64,
        bytes: Vec<u8>,
    },
}

#[derive(Debug)]
struct Scheduled {
    tick: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        (self.tick, self.seq) == (other.tick, other.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.tick, self.seq).cmp(&(other.tick, other.seq))
    }
}

pub struct Fabric {
    profile: TransportProfile,
    cfg: FabricConfig,
    seed: u64,
    now: u64,
    seq: u64,
    rng: ChaCha8Rng,
    counters: Vec<Counters>,
    regions: Vec<MemoryRegion>,
    cqs: Vec<Cq>,
    qps: Vec<Qp>,
    srqs: Vec<Srq>,
    events: BinaryHeap<Reverse<Scheduled>>,
    reorder: ReorderPolicy,
    window: u64,
    trace: Option<String>,
}

impl Fabric {
    pub fn new(profile: TransportProfile, seed: u64, cfg: FabricConfig) -> Self {
        assert!(cfg.clock.hrt_cost > 0, "hrt_cost must be positive");
        assert!(cfg.chunk_size > 0, "chunk_size must be positive");
        Fabric {
            profile,
            cfg,
            seed,
            now: 0,
            seq: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            counters: Vec::new(),
            regions: Vec::new(),
            cqs: Vec::new(),
            qps: Vec::new(),
            srqs: Vec::new(),
            events: BinaryHeap::new(),
            reorder: ReorderPolicy::None,
            window: 0,
            trace: None,
        }
    }

    pub fn profile(&self) -> &TransportProfile {
        &self.profile
    }

    pub fn config(&self) -> &FabricConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn hrt(&self) -> u64 {
        self.cfg.clock.hrt_cost
    }

    /// Independent deterministic stream for callers (schedulers, workloads).
    pub fn fork_rng(&self, stream: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(String::new);
    }

    pub fn trace(&self) -> Option<&str> {
        self.trace.as_deref()
    }

    // ---- topology -------------------------------------------------------

    pub fn add_endpoint(&mut self) -> EndpointId {
        self.counters.push(Counters::default());
        EndpointId(self.counters.len() as u32 - 1)
    }

    pub fn endpoints(&self) -> impl Iterator<Item = EndpointId> {
        (0..self.counters.len() as u32).map(EndpointId)
    }

    pub fn create_cq(&mut self, ep: EndpointId) -> CqId {
        self.cqs.push(Cq { ep: ep.0, ..Default::default() });
        CqId(self.cqs.len() as u32 - 1)
    }

    pub fn create_srq(&mut self, ep: EndpointId) -> SrqId {
        self.srqs.push(Srq { ep, queue: VecDeque::new() });
        SrqId(self.srqs.len() as u32 - 1)
    }

    pub fn create_qp(&mut self, ep: EndpointId, cfg: QpConfig) -> QpId {
        self.qps.push(Qp { ep, peer: None, cfg, rq: VecDeque::new() });
        QpId(self.qps.len() as u32 - 1)
    }

    pub fn connect(&mut self, a: QpId, b: QpId) -> Result<(), FabricError> {
        self.qp(a)?;
        self.qp(b)?;
        self.qps[a.index()].peer = Some(b);
        self.qps[b.index()].peer = Some(a);
        Ok(())
    }

    /// Creates a connected QP pair, each side with a fresh send and recv CQ.
    pub fn connect_endpoints(&mut self, a: EndpointId, b: EndpointId) -> (QpId, QpId) {
        let qa = {
            let (s, r) = (self.create_cq(a), self.create_cq(a));
            self.create_qp(a, QpConfig { send_cq: s, recv_cq: r, srq: None })
        };
        let qb = {
            let (s, r) = (self.create_cq(b), self.create_cq(b));
            self.create_qp(b, QpConfig { send_cq: s, recv_cq: r, srq: None })
        };
        self.connect(qa, qb).expect("fresh qps");
        (qa, qb)
    }

    pub fn qp_config(&self, qp: QpId) -> Result<QpConfig, FabricError> {
        Ok(self.qp(qp)?.cfg)
    }

    pub fn qp_endpoint(&self, qp: QpId) -> Result<EndpointId, FabricError> {
        Ok(self.qp(qp)?.ep)
    }

    pub fn peer_endpoint(&self, qp: QpId) -> Result<EndpointId, FabricError> {
        let peer = self.qp(qp)?.peer.ok_or(FabricError::NotConnected(qp))?;
        Ok(self.qps[peer.index()].ep)
    }

    fn qp(&self, qp: QpId) -> Result<&Qp, FabricError> {
        self.qps.get(qp.index()).ok_or(FabricError::Unknown("queue pair"))
    }

    // ---- memory ---------------------------------------------------------

    /// Registers channel memory; counted in `registered_bytes`.
    pub fn register(
        &mut self,
        ep: EndpointId,
        len: u64,
        access: Access,
        location: Location,
    ) -> Result<RegionId, FabricError> {
        self.register_as(ep, len, access, location, false)
    }

    /// Registers an application buffer; counted in `app_registered_bytes`.
    pub fn register_app(&mut self, ep: EndpointId, len: u64, access: Access) -> Result<RegionId, FabricError> {
        self.register_as(ep, len, access, Location::Host, true)
    }

    fn register_as(
        &mut self,
        ep: EndpointId,
        len: u64,
        access: Access,
        location: Location,
        app: bool,
    ) -> Result<RegionId, FabricError> {
        if ep.index() >= self.counters.len() {
            return Err(FabricError::Unknown("endpoint"));
        }
        if len == 0 {
            return Err(FabricError::ZeroLength);
        }
        if location == Location::Device && len > self.cfg.device_cap {
            return Err(FabricError::DeviceCapExceeded { len, cap: self.cfg.device_cap });
        }
        let id = RegionId(self.regions.len() as u32);
        self.regions.push(MemoryRegion {
            id,
            owner: ep,
            access,
            location,
            circular: false,
            app,
            data: vec![0; len as usize],
            live: true,
        });
        let c = &mut self.counters[ep.index()];
        if app {
            c.app_registered_bytes += len;
        } else {
            c.registered_bytes += len;
        }
        Ok(id)
    }

    pub fn deregister(&mut self, id: RegionId) -> Result<(), FabricError> {
        let mr = self.region_mut(id)?;
        mr.live = false;
        let (owner, len, app) = (mr.owner, mr.len(), mr.app);
        let c = &mut self.counters[owner.index()];
        if app {
            c.app_registered_bytes -= len;
        } else {
            c.registered_bytes -= len;
        }
        Ok(())
    }

    pub fn region(&self, id: RegionId) -> Result<&MemoryRegion, FabricError> {
        self.regions.get(id.index()).filter(|r| r.live).ok_or(FabricError::Unknown("region"))
    }

    pub(crate) fn region_mut(&mut self, id: RegionId) -> Result<&mut MemoryRegion, FabricError> {
        self.regions.get_mut(id.index()).filter(|r| r.live).ok_or(FabricError::Unknown("region"))
    }

    /// Local CPU load. Loads from device memory count one PCIe round trip.
    pub fn load(&self, id: RegionId, offset: u64, len: u64) -> Result<Vec<u8>, FabricError> {
        let mut out = vec![0; len as usize];
        self.region(id)?.read_into(offset, &mut out)?;
        Ok(out)
    }

    pub fn load_into(&self, id: RegionId, offset: u64, out: &mut [u8]) -> Result<(), FabricError> {
        self.region(id)?.read_into(offset, out)
    }

    pub fn load_u32(&self, id: RegionId, offset: u64) -> Result<u32, FabricError> {
        let mut b = [0u8; 4];
        self.load_into(id, offset, &mut b)?;
        Ok(u32::from_le_bytes(b))
    }

    pub fn load_u64(&self, id: RegionId, offset: u64) -> Result<u64, FabricError> {
        let mut b = [0u8; 8];
        self.load_into(id, offset, &mut b)?;
        Ok(u64::from_le_bytes(b))
    }

    /// Local CPU store.
    pub fn store(&mut self, id: RegionId, offset: u64, bytes: &[u8]) -> Result<(), FabricError> {
        let mr = self.region_mut(id)?;
        mr.write_from(offset, bytes)?;
        if mr.location == Location::Device {
            let owner = mr.owner;
            self.counters[owner.index()].pcie_round_trips += 1;
        }
        Ok(())
    }

    pub fn store_u32(&mut self, id: RegionId, offset: u64, v: u32) -> Result<(), FabricError> {
        self.store(id, offset, &v.to_le_bytes())
    }

    pub fn store_u64(&mut self, id: RegionId, offset: u64, v: u64) -> Result<(), FabricError> {
        self.store(id, offset, &v.to_le_bytes())
    }

    /// Local store scheduled `delay` ticks from now.
    pub fn store_at(&mut self, delay: u64, id: RegionId, offset: u64, bytes: Vec<u8>) -> Result<(), FabricError> {
        self.region(id)?.ranges(offset, bytes.len() as u64)?;
        if delay == 0 {
            return self.store(id, offset, &bytes);
        }
        self.schedule(self.now + delay, Event::LocalStore { region: id, offset, bytes });
        Ok(())
    }

    /// Clears a window and accounts the bytes as receiver-side zeroing.
    pub fn zero(&mut self, id: RegionId, offset: u64, len: u64) -> Result<(), FabricError> {
        let mr = self.region_mut(id)?;
        mr.fill(offset, len, 0)?;
        let owner = mr.owner;
        self.counters[owner.index()].zeroed_bytes += len;
        Ok(())
    }

    // ---- counters -------------------------------------------------------

    pub fn counters(&self, ep: EndpointId) -> &Counters {
        &self.counters[ep.index()]
    }

    pub(crate) fn counters_mut(&mut self, ep: EndpointId) -> &mut Counters {
        &mut self.counters[ep.index()]
    }

    pub fn reset_counters(&mut self) {
        self.counters.iter_mut().for_each(Counters::clear_activity);
    }

    pub fn counter_dump(&self) -> String {
        dump_csv(self.endpoints().map(|e| (e, &self.counters[e.index()])))
    }

    // ---- fault injection ------------------------------------------------

    pub fn inject_reorder(&mut self, policy: ReorderPolicy, window: u64, force: bool) -> Result<(), FabricError> {
        let ordered = match policy {
            ReorderPolicy::None => false,
            ReorderPolicy::ShuffleMessages => self.profile.message_order == MessageOrder::InOrder,
            ReorderPolicy::ShuffleBytes => self.profile.byte_order_within_message == ByteOrder::InOrder,
        };
        if ordered && !force {
            return Err(FabricError::ReorderRejected(policy));
        }
        self.reorder = policy;
        self.window = window.max(1);
        Ok(())
    }

    // ---- verbs ----------------------------------------------------------

    /// Posts a RECV onto a shared receive queue.
    pub fn post_srq_recv(&mut self, srq: SrqId, wr: WorkRequest) -> Result<(), FabricError> {
        let ep = self.srqs.get(srq.index()).ok_or(FabricError::Unknown("srq"))?.ep;
        if wr.opcode != Opcode::Recv {
            return Err(FabricError::InvalidRequest("only RECV can be posted to an SRQ"));
        }
        self.check_scatter(ep, &wr.gather)?;
        self.counters[ep.index()].record_post(Opcode::Recv, wr.purpose);
        self.srqs[srq.index()].queue.push_back(RecvEntry { wr_id: wr.wr_id, scatter: wr.gather });
        Ok(())
    }

    pub fn srq_depth(&self, srq: SrqId) -> usize {
        self.srqs[srq.index()].queue.len()
    }

    pub fn rq_depth(&self, qp: QpId) -> usize {
        self.qps[qp.index()].rq.len()
    }

    /// Submits a work request. Structural errors are returned directly;
    /// transport-level failures surface as completion events.
    pub fn post(&mut self, qp_id: QpId, wr: WorkRequest) -> Result<(), FabricError> {
        let qp = self.qp(qp_id)?;
        let ep = qp.ep;
        let cfg = qp.cfg;
        let peer = qp.peer;

        if wr.opcode == Opcode::Recv {
            if cfg.srq.is_some() {
                return Err(FabricError::InvalidRequest("QP uses an SRQ"));
            }
            self.check_scatter(ep, &wr.gather)?;
            self.counters[ep.index()].record_post(Opcode::Recv, wr.purpose);
            self.qps[qp_id.index()].rq.push_back(RecvEntry { wr_id: wr.wr_id, scatter: wr.gather });
            return Ok(());
        }

        validate_shape(&wr)?;
        let peer = peer.ok_or(FabricError::NotConnected(qp_id))?;
        let peer_ep = self.qps[peer.index()].ep;
        self.counters[ep.index()].record_post(wr.opcode, wr.purpose);
        if wr.purpose == Purpose::Data {
            self.counters[ep.index()].data_bytes += wr.total_len();
        }

        let kind = RequestKind::of(wr.opcode).expect("network opcode");
        if !self.profile.supports(kind) {
            self.complete_error(qp_id, &wr, Status::Unsupported);
            return Ok(());
        }

        // Local buffers.
        for s in &wr.gather {
            let mr = self.region(s.region)?;
            if mr.owner != ep {
                return Err(FabricError::NotOwned(s.region));
            }
            mr.ranges(s.offset, s.len as u64)?;
            let writes_local = matches!(wr.opcode, Opcode::Read) || wr.opcode.is_atomic();
            if writes_local && !mr.access.contains(Access::LOCAL_WRITE) {
                self.complete_error(qp_id, &wr, Status::AccessError);
                return Ok(());
            }
        }

        // Remote target.
        let mut target_pcie = 0;
        let mut target = None;
        if let Some(rt) = wr.remote {
            let len = if wr.opcode.is_atomic() { 8 } else { wr.total_len() };
            let ok = match self.region(rt.region) {
                Ok(mr) => {
                    mr.owner == peer_ep
                        && rt.endpoint == peer_ep
                        && mr.access.contains(Access::required_for(wr.opcode).expect("remote op"))
                        && mr.ranges(rt.offset, len).is_ok()
                }
                Err(_) => false,
            };
            if !ok {
                self.complete_error(qp_id, &wr, Status::AccessError);
                return Ok(());
            }
            if self.regions[rt.region.index()].location == Location::Host {
                target_pcie = self.cfg.clock.pcie_rt;
                self.counters[peer_ep.index()].pcie_round_trips += 1;
            }
            target = Some((rt.region, rt.offset));
        }

        let h = self.cfg.clock.hrt_cost;
        let jitter = if self.reorder == ReorderPolicy::ShuffleMessages && wr.purpose != Purpose::Control {
            self.rng.random_range(0..self.window)
        } else {
            0
        };
        if wr.signaled {
            self.cqs[cfg.send_cq.index()].outstanding += 1;
        }

        match wr.opcode {
            Opcode::Send | Opcode::Write | Opcode::WriteImm => {
                let payload = self.gather(&wr.gather)?;
                self.counters[ep.index()].dma_bytes += payload.len() as u64;
                let emulated = wr.opcode != Opcode::Send && self.profile.write_emulated_as_read;
                let hops = if emulated { 4 } else { 1 };
                let c = &mut self.counters[ep.index()];
                c.hrts_traversed += hops;
                if emulated {
                    c.emulated_read_trips += 2;
                }
                let pcie = if wr.opcode == Opcode::Send { self.cfg.clock.pcie_rt } else { target_pcie };
                let arrive = self.now + hops * h + pcie + jitter;
                let mut tail = (0, payload.len());
                if let (Some((region, offset)), ReorderPolicy::ShuffleBytes) = (target, self.reorder) {
                    if wr.purpose != Purpose::Control && payload.len() > self.cfg.chunk_size {
                        tail = self.scatter_chunks(region, offset, &payload, arrive);
                    }
                }
                let d = Delivery {
                    qp: qp_id,
                    wr_id: wr.wr_id,
                    opcode: wr.opcode,
                    payload,
                    target,
                    tail,
                    imm: wr.imm,
                    signaled: wr.signaled,
                };
                self.schedule(arrive, Event::Deliver(Box::new(d)));
            }
            Opcode::Read => {
                self.counters[ep.index()].hrts_traversed += 2;
                let (region, offset) = target.expect("validated");
                let at = self.now + h + target_pcie + jitter;
                self.schedule(
                    at,
                    Event::ReadAtTarget {
                        qp: qp_id,
                        wr_id: wr.wr_id,
                        region,
                        offset,
                        scatter: wr.gather,
                        signaled: wr.signaled,
                    },
                );
            }
            Opcode::FetchAdd | Opcode::CmpSwap => {
                self.counters[ep.index()].hrts_traversed += 2;
                let (region, offset) = target.expect("validated");
                let at = self.now + h + target_pcie + jitter;
                self.schedule(
                    at,
                    Event::AtomicAtTarget {
                        qp: qp_id,
                        wr_id: wr.wr_id,
                        op: wr.opcode,
                        args: wr.atomic.expect("validated"),
                        region,
                        offset,
                        result: wr.gather[0],
                        signaled: wr.signaled,
                    },
                );
            }
            Opcode::Recv => unreachable!(),
        }
        Ok(())
    }

    /// Splits a placement into chunks landing in a seeded order; the returned
    /// byte range is placed by the delivery itself at `arrive`.
    fn scatter_chunks(&mut self, region: RegionId, offset: u64, payload: &[u8], arrive: u64) -> (usize, usize) {
        let cs = self.cfg.chunk_size;
        let n = payload.len().div_ceil(cs);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.rng);
        let mut last = (0, 0);
        for (rank, &chunk) in order.iter().enumerate() {
            let lo = chunk * cs;
            let hi = (lo + cs).min(payload.len());
            if rank == n - 1 {
                last = (lo, hi);
                break;
            }
            let back = (n - 1 - rank) as u64;
            let tick = arrive.saturating_sub(back).max(self.now + 1);
            self.schedule(
                tick,
                Event::PlaceChunk { region, offset: offset + lo as u64, bytes: payload[lo..hi].to_vec() },
            );
        }
        last
    }

    fn gather(&self, sges: &[Sge]) -> Result<Vec<u8>, FabricError> {
        let total: usize = sges.iter().map(|s| s.len as usize).sum();
        let mut out = vec![0u8; total];
        let mut at = 0;
        for s in sges {
            let end = at + s.len as usize;
            self.region(s.region)?.read_into(s.offset, &mut out[at..end])?;
            at = end;
        }
        Ok(out)
    }

    fn scatter(&mut self, sges: &[Sge], data: &[u8]) -> Result<(), FabricError> {
        let mut at = 0;
        for s in sges {
            if at >= data.len() {
                break;
            }
            let n = (s.len as usize).min(data.len() - at);
            self.region_mut(s.region)?.write_from(s.offset, &data[at..at + n])?;
            at += n;
        }
        Ok(())
    }

    fn check_scatter(&self, ep: EndpointId, sges: &[Sge]) -> Result<(), FabricError> {
        if sges.len() > MAX_SGE {
            return Err(FabricError::TooManySges(sges.len()));
        }
        for s in sges {
            let mr = self.region(s.region)?;
            if mr.owner != ep {
                return Err(FabricError::NotOwned(s.region));
            }
            if !mr.access.contains(Access::LOCAL_WRITE) {
                return Err(FabricError::InvalidRequest("receive buffer lacks LOCAL_WRITE"));
            }
            mr.ranges(s.offset, s.len as u64)?;
        }
        Ok(())
    }

    fn schedule(&mut self, tick: u64, event: Event) {
        debug_assert!(tick >= self.now);
        self.seq += 1;
        self.events.push(Reverse(Scheduled { tick, seq: self.seq, event }));
    }

    fn complete_error(&mut self, qp: QpId, wr: &WorkRequest, status: Status) {
        let cq = self.qps[qp.index()].cfg.send_cq;
        let ev = CompletionEvent {
            wr_id: wr.wr_id,
            qp,
            status,
            opcode: wr.opcode,
            byte_len: 0,
            imm: None,
            atomic_old_value: None,
            tick: self.now,
        };
        self.push_completion(cq, ev, false);
    }

    fn push_completion(&mut self, cq: CqId, ev: CompletionEvent, was_outstanding: bool) {
        let c = &mut self.cqs[cq.index()];
        if was_outstanding {
            c.outstanding -= 1;
        }
        if let Some(t) = self.trace.as_mut() {
            let imm = ev.imm.map_or_else(|| "-".to_string(), |v| v.to_string());
            let _ = writeln!(
                t,
                "tick={} ep={} kind={} wr={} status={} len={} imm={}",
                ev.tick,
                c.ep,
                ev.opcode,
                ev.wr_id,
                ev.status.as_str(),
                ev.byte_len,
                imm
            );
        }
        c.queue.push_back(ev);
    }

    #[allow(clippy::too_many_arguments)]
    fn send_completion(
        &mut self,
        qp: QpId,
        wr_id: u64,
        opcode: Opcode,
        status: Status,
        byte_len: u32,
        signaled: bool,
        old: Option<u64>,
    ) {
        if !signaled && status == Status::Ok {
            return;
        }
        let cq = self.qps[qp.index()].cfg.send_cq;
        let ev =
            CompletionEvent { wr_id, qp, status, opcode, byte_len, imm: None, atomic_old_value: old, tick: self.now };
        self.push_completion(cq, ev, signaled);
    }

    fn take_recv(&mut self, qp: QpId) -> Option<RecvEntry> {
        match self.qps[qp.index()].cfg.srq {
            Some(srq) => self.srqs[srq.index()].queue.pop_front(),
            None => self.qps[qp.index()].rq.pop_front(),
        }
    }

    // ---- event loop -----------------------------------------------------

    pub fn has_pending_events(&self) -> bool {
        !self.events.is_empty()
    }

    pub fn next_event_tick(&self) -> Option<u64> {
        self.events.peek().map(|Reverse(s)| s.tick)
    }

    /// Applies every event at the next pending tick. Returns false when idle.
    pub fn advance(&mut self) -> bool {
        let Some(tick) = self.next_event_tick() else {
            return false;
        };
        self.now = tick;
        while let Some(Reverse(s)) = self.events.peek() {
            if s.tick != tick {
                break;
            }
            let Reverse(s) = self.events.pop().expect("peeked");
            self.apply(s.event);
        }
        true
    }

    pub fn run_until_idle(&mut self) {
        while self.advance() {}
    }

    /// Advances time to `tick` (applying any events on the way).
    pub fn advance_to(&mut self, tick: u64) {
        while self.next_event_tick().is_some_and(|t| t <= tick) {
            self.advance();
        }
        self.now = self.now.max(tick);
    }

    fn apply(&mut self, ev: Event) {
        // Every region referenced here was validated at post time and regions
        // are never reused, so internal lookups cannot fail.
        match ev {
            Event::Deliver(d) => self.deliver(*d),
            Event::PlaceChunk { region, offset, bytes } => {
                let mr = &mut self.regions[region.index()];
                mr.write_from(offset, &bytes).expect("validated window");
                let owner = mr.owner;
                self.counters[owner.index()].dma_bytes += bytes.len() as u64;
            }
            Event::LocalStore { region, offset, bytes } => {
                self.regions[region.index()].write_from(offset, &bytes).expect("validated window");
            }
            Event::ReadAtTarget { qp, wr_id, region, offset, scatter, signaled } => {
                let len: u64 = scatter.iter().map(|s| s.len as u64).sum();
                let mut data = vec![0; len as usize];
                self.regions[region.index()].read_into(offset, &mut data).expect("validated window");
                let at = self.now + self.cfg.clock.hrt_cost;
                self.schedule(at, Event::ReadResponse { qp, wr_id, data, scatter, signaled });
            }
            Event::ReadResponse { qp, wr_id, data, scatter, signaled } => {
                let ep = self.qps[qp.index()].ep;
                self.counters[ep.index()].dma_bytes += data.len() as u64;
                self.scatter(&scatter, &data).expect("validated scatter");
                self.send_completion(qp, wr_id, Opcode::Read, Status::Ok, data.len() as u32, signaled, None);
            }
            Event::AtomicAtTarget { qp, wr_id, op, args, region, offset, result, signaled } => {
                let mr = &mut self.regions[region.index()];
                let mut b = [0u8; 8];
                mr.read_into(offset, &mut b).expect("validated window");
                let old = u64::from_le_bytes(b);
                let new = match args {
                    AtomicArgs::FetchAdd { add } => old.wrapping_add(add),
                    AtomicArgs::CmpSwap { compare, swap } => {
                        if old == compare {
                            swap
                        } else {
                            old
                        }
                    }
                };
                mr.write_from(offset, &new.to_le_bytes()).expect("validated window");
                let at = self.now + self.cfg.clock.hrt_cost;
                self.schedule(at, Event::AtomicResponse { qp, wr_id, op, old, result, signaled });
            }
            Event::AtomicResponse { qp, wr_id, op, old, result, signaled } => {
                self.scatter(&[result], &old.to_le_bytes()).expect("validated scatter");
                self.send_completion(qp, wr_id, op, Status::Ok, 8, signaled, Some(old));
            }
        }
    }

    fn deliver(&mut self, d: Delivery) {
        let peer = self.qps[d.qp.index()].peer.expect("connected at post");
        let peer_ep = self.qps[peer.index()].ep;
        let len = d.payload.len() as u32;

        let consumes_recv = d.opcode == Opcode::Send || d.opcode == Opcode::WriteImm;
        let recv = if consumes_recv {
            match self.take_recv(peer) {
                Some(r) => Some(r),
                None => {
                    self.send_completion(d.qp, d.wr_id, d.opcode, Status::RemoteNoReceive, 0, d.signaled, None);
                    return;
                }
            }
        } else {
            None
        };

        let mut status = Status::Ok;
        match d.opcode {
            Opcode::Send => {
                let entry = recv.as_ref().expect("send consumed a recv");
                let cap: u64 = entry.scatter.iter().map(|s| s.len as u64).sum();
                if (len as u64) > cap {
                    status = Status::AccessError;
                } else {
                    self.scatter(&entry.scatter, &d.payload).expect("validated scatter");
                    self.counters[peer_ep.index()].dma_bytes += len as u64;
                }
            }
            Opcode::Write | Opcode::WriteImm => {
                let (region, offset) = d.target.expect("validated");
                let (lo, hi) = d.tail;
                self.regions[region.index()]
                    .write_from(offset + lo as u64, &d.payload[lo..hi])
                    .expect("validated window");
                self.counters[peer_ep.index()].dma_bytes += (hi - lo) as u64;
            }
            _ => unreachable!("not a delivery opcode"),
        }

        if let Some(entry) = recv {
            let cq = self.qps[peer.index()].cfg.recv_cq;
            let ev = CompletionEvent {
                wr_id: entry.wr_id,
                qp: peer,
                status,
                opcode: Opcode::Recv,
                byte_len: len,
                imm: d.imm,
                atomic_old_value: None,
                tick: self.now,
            };
            self.push_completion(cq, ev, false);
        }
        self.send_completion(d.qp, d.wr_id, d.opcode, status, len, d.signaled, None);
    }

    // ---- completion queues ---------------------------------------------

    pub fn poll_cq(&mut self, cq: CqId, max: usize) -> Vec<CompletionEvent> {
        let c = &mut self.cqs[cq.index()];
        let n = max.min(c.queue.len());
        let out: Vec<_> = c.queue.drain(..n).collect();
        let counters = &mut self.counters[c.ep as usize];
        counters.cq_polls += 1;
        if out.is_empty() {
            counters.cq_empty_polls += 1;
        }
        out
    }

    pub fn poll_one(&mut self, cq: CqId) -> Option<CompletionEvent> {
        let c = &mut self.cqs[cq.index()];
        let ev = c.queue.pop_front();
        let counters = &mut self.counters[c.ep as usize];
        counters.cq_polls += 1;
        if ev.is_none() {
            counters.cq_empty_polls += 1;
        }
        ev
    }

    pub fn cq_len(&self, cq: CqId) -> usize {
        self.cqs[cq.index()].queue.len()
    }

    /// Signaled requests on this CQ whose completion has not been generated yet.
    pub fn cq_outstanding(&self, cq: CqId) -> u64 {
        self.cqs[cq.index()].outstanding
    }

    /// Blocks (in simulated time) until `cq` has an event.
    pub fn wait_cq(&mut self, cq: CqId) -> Result<CompletionEvent, FabricError> {
        self.wait_any(&[cq]).map(|(_, ev)| ev)
    }

    /// Blocks until any of `cqs` has an event; a global stall is an error.
    pub fn wait_any(&mut self, cqs: &[CqId]) -> Result<(CqId, CompletionEvent), FabricError> {
        loop {
            for &cq in cqs {
                if let Some(ev) = self.cqs[cq.index()].queue.pop_front() {
                    return Ok((cq, ev));
                }
            }
            if !self.advance() {
                return Err(FabricError::Stall);
            }
        }
    }
}

fn validate_shape(wr: &WorkRequest) -> Result<(), FabricError> {
    if wr.gather.len() > MAX_SGE {
        return Err(FabricError::TooManySges(wr.gather.len()));
    }
    if wr.total_len() > MAX_MESSAGE {
        return Err(FabricError::InvalidRequest("message longer than 2^31 bytes"));
    }
    match (wr.opcode.needs_remote(), wr.remote.is_some()) {
        (true, false) => return Err(FabricError::InvalidRequest("request needs a remote target")),
        (false, true) => return Err(FabricError::InvalidRequest("SEND carries no remote target")),
        _ => {}
    }
    if wr.opcode.is_atomic() {
        let rt = wr.remote.expect("checked");
        if !rt.offset.is_multiple_of(8) {
            return Err(FabricError::InvalidRequest("atomic target must be 8-byte aligned"));
        }
        if wr.gather.len() != 1 || wr.gather[0].len != 8 || wr.atomic.is_none() {
            return Err(FabricError::InvalidRequest("atomics address exactly 8 bytes"));
        }
    }
    if wr.opcode == Opcode::WriteImm && wr.imm.is_none() {
        return Err(FabricError::InvalidRequest("WRITE_IMM without immediate"));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
