use std::collections::BTreeSet;

use rdmachan::chan::sring::{self, Variant};
use rdmachan::chan::{declared, ChannelConfig, ChannelReceiver, ChannelSender, Flag, Selector};
use rdmachan::fabric::{ClockParams, Opcode, Purpose};
use rdmachan::metrics::dist::{histogram, modes, pull_latencies, DistParams};
use rdmachan::metrics::measure::copy_run;
use rdmachan::metrics::{least_capable_profile, HRT};
use rdmachan::{Access, Fabric, FabricConfig, Location, Region, TransportProfile};

use crate::{ensure, Outcome};

const PCIE_RT: u64 = 3;
const SYNC_MESSAGES: u64 = 200;

struct SendPath {
    reservations: Vec<u64>,
    deliveries: Vec<u64>,
    tail_reads: u64,
}

/// One shared-ring sender, one message at a time through a small ring so
/// the sender keeps fetching the tail.
fn send_path(head: Location, tail: Location) -> Result<SendPath, String> {
    let e = |e: rdmachan::chan::ChanError| e.to_string();
    let clock = ClockParams { hrt_cost: HRT, pcie_rt: PCIE_RT };
    let mut fab = Fabric::new(TransportProfile::ib_roce(), 0, FabricConfig { clock, ..Default::default() });
    let (s, r) = (fab.add_endpoint(), fab.add_endpoint());
    let cfg = ChannelConfig { ring_capacity: 1024, head_loc: head, tail_loc: tail, ..Default::default() };
    let (mut txs, mut rx) = sring::open_concrete(&mut fab, &[s], r, &cfg, Variant::Zeroing).map_err(e)?;
    let tx = &mut txs[0];
    tx.record_offsets(true);
    let buf = fab.register_app(s, 64, Access::LOCAL_WRITE).map_err(|e| e.to_string())?;
    let mut deliveries = Vec::new();
    for k in 0..SYNC_MESSAGES {
        loop {
            let any = tx.progress(&mut fab).map_err(e)? | rx.progress(&mut fab).map_err(e)?;
            if !fab.advance() && !any {
                break;
            }
        }
        let t0 = fab.now();
        fab.store(buf, 0, &[k as u8; 64]).map_err(|e| e.to_string())?;
        tx.send_region(&mut fab, Region::app(buf, 0, 64)).map_err(e)?;
        loop {
            tx.progress(&mut fab).map_err(e)?;
            if let Some(reg) = rx.receive_region(&mut fab).map_err(e)? {
                deliveries.push(fab.now() - t0);
                rx.free_receive_region(&mut fab, reg).map_err(e)?;
                break;
            }
            if !fab.advance() {
                return Err(format!("message {k} never arrived"));
            }
        }
    }
    let tail_reads = fab.counters(s).posted(Opcode::Read, Purpose::Control);
    Ok(SendPath { reservations: tx.reservation_latencies().to_vec(), deliveries, tail_reads })
}

pub fn device_memory() -> Outcome {
    let host = send_path(Location::Host, Location::Host)?;
    let dev = send_path(Location::Device, Location::Host)?;
    ensure(host.reservations.len() as u64 == SYNC_MESSAGES, || "missing reservations".into())?;
    let saved: BTreeSet<i64> =
        host.reservations.iter().zip(&dev.reservations).map(|(&h, &d)| h as i64 - d as i64).collect();
    ensure(saved == BTreeSet::from([PCIE_RT as i64]), || format!("head-on-device saves {saved:?}, want {PCIE_RT}"))?;
    for head in [Location::Host, Location::Device] {
        let a = send_path(head, Location::Host)?;
        let b = send_path(head, Location::Device)?;
        ensure(a.tail_reads > 0, || "the sender never fetched the tail".into())?;
        ensure(a.reservations == b.reservations && a.deliveries == b.deliveries, || {
            format!("tail location changed the send path with head on {head:?}")
        })?;
    }
    Ok(format!(
        "pcie_rt {PCIE_RT}: reservation {} vs {} ticks (host vs device head); tail location leaves {SYNC_MESSAGES} sends and {} tail fetches unchanged",
        host.reservations[0], dev.reservations[0], host.tail_reads
    ))
}

pub fn zero_copy() -> Outcome {
    let cfg = ChannelConfig::default();
    let (mut zc_send, mut zc_recv) = (0, 0);
    let mut contrast = Vec::new();
    for sel in Selector::ALL {
        let spec = declared(sel).effective();
        let c = copy_run(sel, &least_capable_profile(sel), &cfg).map_err(|e| format!("{sel}: {e}"))?;
        if spec.zero_copy_send == Flag::Yes {
            ensure(c.send_copy == 0, || format!("{sel}: {} B copied on send", c.send_copy))?;
            zc_send += 1;
        }
        if spec.zero_copy_recv == Flag::Yes {
            ensure(c.recv_copy == 0, || format!("{sel}: {} B copied on receive", c.recv_copy))?;
            zc_recv += 1;
        }
        if matches!(sel, Selector::SendRecvNormal | Selector::SendRecvShared) {
            ensure(c.recv_copy == c.bytes, || {
                format!("{sel}: copied {} of {} B into the destination", c.recv_copy, c.bytes)
            })?;
            contrast.push(format!("{sel} copied {} B", c.recv_copy));
        }
    }
    Ok(format!(
        "{zc_send} zero-copy senders and {zc_recv} zero-copy receivers copy 0 B; {} (= message bytes)",
        contrast.join(", ")
    ))
}

pub fn bimodal() -> Outcome {
    let mut out = Vec::new();
    for sel in [Selector::RringInlined, Selector::RringDetached] {
        let l = pull_latencies(&DistParams::phase_shifted(sel, HRT)).map_err(|e| format!("{sel}: {e}"))?;
        let distinct: Vec<u64> = l.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let m = modes(&histogram(&l, HRT));
        ensure(m.len() == 2 && m[1] - m[0] == 2 * HRT, || format!("{sel}: modes {m:?}"))?;
        ensure(distinct.len() == 2 && distinct[1] - distinct[0] == 2 * HRT, || {
            format!("{sel}: latencies {distinct:?}")
        })?;
        let share = l.iter().filter(|&&x| x == distinct[0]).count();
        out.push(format!("{sel} {}/{} ticks ({share}/{} fast)", distinct[0], distinct[1], l.len()));
        let sync = DistParams { jitter: 0, write_ticks: 0, ..DistParams::phase_shifted(sel, HRT) };
        let one = modes(&histogram(&pull_latencies(&sync).map_err(|e| e.to_string())?, HRT));
        ensure(one.len() == 1, || format!("{sel}: synchronized reader has modes {one:?}"))?;
    }
    Ok(format!("modes 2*hrt apart: {}; synchronized readers unimodal", out.join(", ")))
}
