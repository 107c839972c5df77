//! Single-property measurements on fresh fabrics.

use crate::chan::{
    open_channel, ChanError, Channel, ChannelConfig, MemClass, Ordering, RecvHandle, Selector, Transport,
};
use crate::fabric::{ClockParams, EndpointId, Fabric, FabricConfig, Opcode, Purpose, ReorderPolicy, TransportProfile};
use crate::memory::{Access, Region};
use crate::workload::{self, payload, RecvMode, RunError, SizeDist, Workload};

/// Ticks per half round trip in every measurement fabric.
pub const HRT: u64 = 10;

/// Registered bytes below which two footprints count as the same.
pub const ALLOC_UNIT: u64 = 4096;

pub fn measurement_fabric(profile: &TransportProfile, seed: u64) -> Fabric {
    let cfg = FabricConfig { clock: ClockParams { hrt_cost: HRT, pcie_rt: 0 }, ..Default::default() };
    Fabric::new(profile.clone(), seed, cfg)
}

fn open(
    sel: Selector,
    fab: &mut Fabric,
    senders: usize,
    receivers: usize,
    cfg: &ChannelConfig,
) -> Result<(Channel, Vec<EndpointId>, Vec<EndpointId>), ChanError> {
    let s: Vec<_> = (0..senders).map(|_| fab.add_endpoint()).collect();
    let r: Vec<_> = (0..receivers).map(|_| fab.add_endpoint()).collect();
    let ch = open_channel(sel, fab, &s, &r, cfg)?;
    Ok((ch, s, r))
}

#[derive(Debug, Clone, Default)]
pub struct SyncStats {
    /// Send-to-delivery ticks per message.
    pub latencies: Vec<u64>,
    pub reqs_send: f64,
    pub reqs_recv: f64,
    /// Every request the sender posted, RECV and control included.
    pub all_send: u64,
    pub all_recv: u64,
    pub ops: Vec<(Opcode, Purpose)>,
    pub dma_send: u64,
}

impl SyncStats {
    pub fn hrt(&self) -> f64 {
        let mut l = self.latencies.clone();
        l.sort_unstable();
        l.get(l.len() / 2).copied().unwrap_or(0) as f64 / HRT as f64
    }
}

enum Pending {
    None,
    Req(RecvHandle, Region, bool),
}

fn try_receive(
    fab: &mut Fabric,
    ch: &mut Channel,
    opt: bool,
    dst: Region,
    pending: &mut Pending,
) -> Result<Option<(Region, bool)>, ChanError> {
    let rx = &mut ch.receivers[0];
    if !opt {
        return Ok(rx.receive_region(fab)?.map(|r| (r, true)));
    }
    if let Pending::None = pending {
        if let Some(o) = rx.can_receive_region(fab)? {
            let (d, in_place) = o.in_place.map(|r| (r, true)).unwrap_or((dst, false));
            *pending = Pending::Req(rx.receive_region_into(fab, o, d)?, d, in_place);
        }
    }
    if let Pending::Req(h, d, in_place) = *pending {
        if let Some(len) = rx.test_receive_request(fab, h)? {
            *pending = Pending::None;
            return Ok(Some((d.sub(0, len), in_place)));
        }
    }
    Ok(None)
}

/// Runs the sender side until the fabric is idle, leaving receivers alone.
fn quiesce(fab: &mut Fabric, ch: &mut Channel, handles: &mut Vec<crate::chan::SendHandle>) -> Result<(), ChanError> {
    loop {
        let tx = &mut ch.senders[0];
        let mut keep = Vec::new();
        for h in handles.drain(..) {
            if !tx.test_send_request(fab, h)? {
                keep.push(h);
            }
        }
        *handles = keep;
        tx.progress(fab)?;
        if !fab.advance() {
            return Ok(());
        }
    }
}

/// Synchronized one-message-at-a-time run: each message is sent on a quiet
/// fabric and the receiver starts pulling in the same tick, so lower-bound
/// latencies and request counts are met exactly.
pub fn sync_run(
    sel: Selector,
    profile: &TransportProfile,
    cfg: &ChannelConfig,
    m: u64,
    size: u64,
) -> Result<SyncStats, RunError> {
    let mut fab = measurement_fabric(profile, 0);
    let (mut ch, s, r) = open(sel, &mut fab, 1, 1, cfg)?;
    let max = ch.senders[0].max_message_size();
    let len = size.min(max);
    let src = fab.register_app(s[0], len.max(1), Access::LOCAL_WRITE)?;
    let dst = fab.register_app(r[0], max.max(1), Access::LOCAL_WRITE | Access::REMOTE_WRITE)?;
    let dst = Region::app(dst, 0, max.max(1));
    let opt = ch.receivers[0].supports_options();
    let mut handles = Vec::new();
    // Let setup traffic settle before counting.
    quiesce(&mut fab, &mut ch, &mut handles)?;
    fab.reset_counters();
    let mut out = SyncStats::default();
    for k in 0..m {
        quiesce(&mut fab, &mut ch, &mut handles)?;
        let t0 = fab.now();
        let bytes = payload(0, 0, k, len);
        let region = ch.senders[0].send_buffer(&mut fab, len)?.unwrap_or(Region::app(src, 0, len));
        fab.store(region.region, region.offset, &bytes)?;
        handles.push(ch.senders[0].send_region(&mut fab, region)?);
        let mut pending = Pending::None;
        let mut spins = 0;
        let (got, owned) = loop {
            if let Some(g) = try_receive(&mut fab, &mut ch, opt, dst, &mut pending)? {
                break g;
            }
            let changed = ch.senders[0].progress(&mut fab)? | ch.receivers[0].progress(&mut fab)?;
            spins += 1;
            if changed && spins < 10_000 {
                continue;
            }
            if !fab.advance() || spins >= 10_000 {
                return Err(RunError::Stall { tick: fab.now(), delivered: k, expected: m });
            }
        };
        if fab.load(got.region, got.offset, got.len)? != bytes {
            return Err(ChanError::Transport(format!("{sel}: corrupt delivery in synchronized run")).into());
        }
        out.latencies.push(fab.now() - t0);
        if owned {
            ch.receivers[0].free_receive_region(&mut fab, got)?;
        }
        ch.receivers[0].progress(&mut fab)?;
    }
    quiesce(&mut fab, &mut ch, &mut handles)?;
    let (cs, cr) = (fab.counters(s[0]).clone(), fab.counters(r[0]).clone());
    out.reqs_send = cs.channel_requests() as f64 / m as f64;
    out.reqs_recv = cr.channel_requests() as f64 / m as f64;
    out.all_send = cs.all_requests();
    out.all_recv = cr.all_requests();
    out.dma_send = cs.dma_bytes;
    for op in Opcode::ALL {
        for p in Purpose::ALL {
            if cs.posted(op, p) + cr.posted(op, p) > 0 {
                out.ops.push((op, p));
            }
        }
    }
    Ok(out)
}

/// Transport family implied by the requests a run posted.
pub fn transport_of(ops: &[(Opcode, Purpose)]) -> Option<Transport> {
    let has = |f: &dyn Fn(Opcode, Purpose) -> bool| ops.iter().any(|&(o, p)| f(o, p));
    if has(&|o, p| o.is_atomic() && p != Purpose::Control) {
        return Some(Transport::WriteAtomic);
    }
    if has(&|o, p| o == Opcode::Read && p == Purpose::Data) {
        return Some(Transport::Read);
    }
    if has(&|o, p| matches!(o, Opcode::Write | Opcode::WriteImm) && p == Purpose::Data) {
        return Some(Transport::Write);
    }
    if has(&|o, p| o == Opcode::Send && p == Purpose::Data) {
        return Some(Transport::Send);
    }
    None
}

/// Whether a receiver that sleeps until one of its completion queues has an
/// event still gets every message without spinning on requests.
pub fn blocking_ok(
    sel: Selector,
    profile: &TransportProfile,
    cfg: &ChannelConfig,
    reqs_recv: f64,
) -> Result<bool, ChanError> {
    let mut fab = measurement_fabric(profile, 0);
    let (mut ch, _, r) = open(sel, &mut fab, 1, 1, cfg)?;
    let count = 20;
    let w = Workload {
        count,
        sizes: SizeDist::Fixed(64),
        outstanding: 1,
        blocking: true,
        send_gap: 20 * HRT,
        stall_ticks: 100 * HRT,
        ..Default::default()
    };
    fab.reset_counters();
    match workload::run(&mut fab, &mut ch, &w) {
        Ok(rep) if rep.clean() => {
            let per_msg = fab.counters(r[0]).channel_requests() as f64 / count as f64;
            Ok(per_msg <= reqs_recv + 0.5)
        }
        Ok(_) | Err(RunError::Stall { .. }) => Ok(false),
        Err(RunError::Chan(e)) => Err(e),
        Err(RunError::Fabric(e)) => Err(e.into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CopyStats {
    pub send_copy: u64,
    pub recv_copy: u64,
    /// Payload bytes named by data requests on either side.
    pub data_bytes: u64,
    pub bytes: u64,
}

/// CPU copy bytes on each side for a run over the zero-copy paths
/// (`send_buffer` when offered, the option path when offered).
pub fn copy_run(sel: Selector, profile: &TransportProfile, cfg: &ChannelConfig) -> Result<CopyStats, RunError> {
    let mut fab = measurement_fabric(profile, 0);
    let (mut ch, s, r) = open(sel, &mut fab, 1, 1, cfg)?;
    let mode = if ch.receivers[0].supports_options() { RecvMode::Option } else { RecvMode::Region };
    let w =
        Workload { count: 50, sizes: SizeDist::Uniform(1, 512), outstanding: 2, recv_mode: mode, ..Default::default() };
    fab.reset_counters();
    let rep = workload::run(&mut fab, &mut ch, &w)?;
    if !rep.clean() {
        return Err(ChanError::Transport(format!("{sel}: copy run delivered incorrectly")).into());
    }
    let max = ch.senders[0].max_message_size();
    let bytes = (0..w.count).map(|k| workload::message_len(w.sizes, max, 0, 0, k)).sum();
    Ok(CopyStats {
        send_copy: fab.counters(s[0]).cpu_copy_bytes,
        recv_copy: fab.counters(r[0]).cpu_copy_bytes,
        data_bytes: fab.counters(s[0]).data_bytes + fab.counters(r[0]).data_bytes,
        bytes,
    })
}

/// Whether channel buffer occupancy follows the message size.
pub fn variable_ok(sel: Selector, profile: &TransportProfile, cfg: &ChannelConfig) -> Result<bool, ChanError> {
    let mut occ = Vec::new();
    for len in [8u64, 64] {
        let mut fab = measurement_fabric(profile, 0);
        let (mut ch, s, _) = open(sel, &mut fab, 1, 1, cfg)?;
        let len = len.min(ch.senders[0].max_message_size());
        let src = fab.register_app(s[0], len.max(1), Access::LOCAL_WRITE)?;
        let region = ch.senders[0].send_buffer(&mut fab, len)?.unwrap_or(Region::app(src, 0, len));
        ch.senders[0].send_region(&mut fab, region)?;
        occ.push(ch.senders[0].occupied_bytes());
    }
    Ok(occ[1] > occ[0])
}

/// Which side of a topology a memory measurement looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// One sender, N receivers; the sender's footprint.
    OneToN,
    /// N senders, one receiver; the receiver's footprint.
    NToOne,
}

/// Channel-registered bytes of the single endpoint for each N.
pub fn memory_points(
    sel: Selector,
    profile: &TransportProfile,
    cfg: &ChannelConfig,
    side: Side,
    ns: &[u64],
) -> Result<Vec<(u64, u64)>, ChanError> {
    let mut out = Vec::new();
    for &n in ns {
        let mut fab = measurement_fabric(profile, 0);
        let (ns_, nr) = match side {
            Side::OneToN => (1, n as usize),
            Side::NToOne => (n as usize, 1),
        };
        let (_ch, s, r) = open(sel, &mut fab, ns_, nr, cfg)?;
        let ep = match side {
            Side::OneToN => s[0],
            Side::NToOne => r[0],
        };
        out.push((n, fab.counters(ep).registered_bytes));
    }
    Ok(out)
}

/// O(1) when the footprint varies by less than one allocation unit; O(N)
/// when a line fits with R² > 0.99 and positive slope.
pub fn classify(points: &[(u64, u64)]) -> MemClass {
    if points.len() < 2 {
        return MemClass::Unclassified;
    }
    let ys: Vec<f64> = points.iter().map(|p| p.1 as f64).collect();
    let (lo, hi) = ys.iter().fold((f64::MAX, f64::MIN), |(a, b), &y| (a.min(y), b.max(y)));
    if hi - lo < ALLOC_UNIT as f64 {
        return MemClass::O1;
    }
    let n = ys.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / n, ys.iter().sum::<f64>() / n);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return MemClass::Unclassified;
    }
    let slope = sxy / sxx;
    let r2 = sxy * sxy / (sxx * syy);
    if slope > 0.0 && r2 > 0.99 {
        MemClass::ON
    } else {
        MemClass::Unclassified
    }
}

/// Outcome of one forced-reordering run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShuffleOutcome {
    pub corrupt: u64,
    pub failed: bool,
}

impl ShuffleOutcome {
    pub fn broken(&self) -> bool {
        self.corrupt > 0 || self.failed
    }
}

/// Runs `sel` on an in-order fabric with `policy` forced on and reports
/// payload corruption. Message order is not checked: channels that need no
/// ordering may legitimately deliver out of order.
pub fn shuffle_run(
    sel: Selector,
    policy: ReorderPolicy,
    seed: u64,
    count: u64,
    cfg: &ChannelConfig,
) -> Result<ShuffleOutcome, ChanError> {
    let fcfg = FabricConfig { clock: ClockParams { hrt_cost: HRT, pcie_rt: 0 }, chunk_size: 8, ..Default::default() };
    let mut fab = Fabric::new(TransportProfile::ib_roce(), seed, fcfg);
    let (mut ch, _, _) = open(sel, &mut fab, 1, 1, cfg)?;
    fab.inject_reorder(policy, 4 * HRT, true)?;
    let w = Workload {
        seed,
        count,
        sizes: SizeDist::Uniform(1, 256),
        outstanding: 4,
        stall_ticks: 1000 * HRT,
        ..Default::default()
    };
    Ok(match workload::run(&mut fab, &mut ch, &w) {
        Ok(rep) => ShuffleOutcome { corrupt: rep.corrupt + rep.duplicates, failed: !rep.intact() },
        Err(_) => ShuffleOutcome { corrupt: 0, failed: true },
    })
}

/// Ordering the channel needs, observed as corruption under forced
/// message and byte reordering.
pub fn ordering_needed(sel: Selector, cfg: &ChannelConfig, seeds: u64, count: u64) -> Result<Ordering, ChanError> {
    let mut o = Ordering::NONE;
    for seed in 0..seeds {
        o.messages |= shuffle_run(sel, ReorderPolicy::ShuffleMessages, seed, count, cfg)?.broken();
        o.bytes |= shuffle_run(sel, ReorderPolicy::ShuffleBytes, seed, count, cfg)?.broken();
    }
    Ok(o)
}
