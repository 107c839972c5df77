use rdmachan::chan::sring::{self, record_size, SringReceiver, SringSender, Variant};
use rdmachan::chan::{open_channel, ChanError, ChannelConfig, ChannelReceiver, ChannelSender, Selector, SendHandle};
use rdmachan::workload::{message_len, payload, run, SizeDist, Workload};
use rdmachan::{Access, EndpointId, Fabric, FabricConfig, Region, TransportProfile};

use crate::{ensure, Outcome};

const SENDERS: usize = 8;
const PER_SENDER: u64 = 10_000;
const OUTSTANDING: u64 = 4;
const READERS: usize = 4;
const BROADCAST_MESSAGES: u64 = 10_000;
const SIZES: SizeDist = SizeDist::Uniform(1, 256);

struct Ring {
    fab: Fabric,
    txs: Vec<SringSender>,
    rx: SringReceiver,
    bufs: Vec<Region>,
}

fn ring(variant: Variant, senders: usize, seed: u64) -> Result<Ring, ChanError> {
    let mut fab = Fabric::new(TransportProfile::ib_roce(), seed, FabricConfig::default());
    let eps: Vec<EndpointId> = (0..senders).map(|_| fab.add_endpoint()).collect();
    let r = fab.add_endpoint();
    let (mut txs, rx) = sring::open_concrete(&mut fab, &eps, r, &ChannelConfig::default(), variant)?;
    let mut bufs = Vec::new();
    for (tx, &ep) in txs.iter_mut().zip(&eps) {
        tx.record_offsets(true);
        let id = fab.register_app(ep, OUTSTANDING * 256, Access::LOCAL_WRITE)?;
        bufs.push(Region::app(id, 0, OUTSTANDING * 256));
    }
    Ok(Ring { fab, txs, rx, bufs })
}

/// All senders stream concurrently; checks exactly-once per-sender FIFO
/// delivery, `tail <= head` after every step, and the FETCH_ADD chain.
fn stream(variant: Variant, seed: u64) -> Result<String, String> {
    let mut g = ring(variant, SENDERS, seed).map_err(|e| e.to_string())?;
    let fab = &mut g.fab;
    let max = g.txs[0].max_message_size();
    let len = |i: usize, k: u64| message_len(SIZES, max, seed, i, k);
    let mut next = [0u64; SENDERS];
    let mut inflight: Vec<Vec<(SendHandle, u64)>> = vec![Vec::new(); SENDERS];
    let mut expect = [0u64; SENDERS];
    let mut delivered = 0u64;
    let total = SENDERS as u64 * PER_SENDER;
    let e = |e: ChanError| e.to_string();
    while delivered < total {
        let mut any = false;
        for i in 0..SENDERS {
            let tx = &mut g.txs[i];
            let before = inflight[i].len();
            let mut kept = Vec::new();
            for (h, slot) in inflight[i].drain(..) {
                if !tx.test_send_request(fab, h).map_err(e)? {
                    kept.push((h, slot));
                }
            }
            any |= kept.len() != before;
            inflight[i] = kept;
            while next[i] < PER_SENDER && (inflight[i].len() as u64) < OUTSTANDING {
                let slot = (0..OUTSTANDING).find(|s| !inflight[i].iter().any(|x| x.1 == *s)).expect("free slot");
                let n = len(i, next[i]);
                let r = g.bufs[i].sub(slot * 256, n);
                fab.store(r.region, r.offset, &payload(seed, i, next[i], n)).map_err(|e| e.to_string())?;
                match tx.send_region(fab, r) {
                    Ok(h) => inflight[i].push((h, slot)),
                    Err(ChanError::NoCredit) => break,
                    Err(x) => return Err(x.to_string()),
                }
                next[i] += 1;
                any = true;
            }
            any |= tx.progress(fab).map_err(e)?;
        }
        while let Some(reg) = g.rx.receive_region(fab).map_err(e)? {
            let bytes = fab.load(reg.region, reg.offset, reg.len).map_err(|e| e.to_string())?;
            let i = bytes[0] as usize;
            ensure(i < SENDERS && expect[i] < PER_SENDER, || {
                format!("unknown record {:?}", &bytes[..4.min(bytes.len())])
            })?;
            ensure(bytes == payload(seed, i, expect[i], len(i, expect[i])), || {
                format!("sender {i} message {}: wrong, duplicated or out of order", expect[i])
            })?;
            expect[i] += 1;
            delivered += 1;
            g.rx.free_receive_region(fab, reg).map_err(e)?;
            any = true;
        }
        any |= g.rx.progress(fab).map_err(e)?;
        let head = g.rx.head(fab).map_err(e)?;
        ensure(g.rx.tail() <= head, || format!("tail {} passed head {head}", g.rx.tail()))?;
        if !any && !fab.advance() {
            return Err(format!("stalled after {delivered} of {total}"));
        }
    }
    let mut chain: Vec<(u64, u64)> = Vec::new();
    for (i, tx) in g.txs.iter().enumerate() {
        ensure(tx.offsets().len() as u64 == PER_SENDER, || {
            format!("sender {i} saw {} reservations", tx.offsets().len())
        })?;
        chain.extend(tx.offsets().iter().enumerate().map(|(k, &o)| (o, record_size(variant, len(i, k as u64)))));
    }
    chain.sort_unstable();
    let mut at = 0;
    for &(o, size) in &chain {
        ensure(o == at, || format!("reservation chain gap: expected offset {at}, found {o}"))?;
        at += size;
    }
    let head = g.rx.head(fab).map_err(e)?;
    ensure(at == head, || format!("chain ends at {at}, head is {head}"))?;
    Ok(format!("{variant:?} {total} messages, chain of {} reservations to {head}", chain.len()))
}

/// Sends one 16-byte message from sender `i` and runs until its reservation
/// returns.
fn reserve(g: &mut Ring, i: usize, seq: u64) -> Result<u64, String> {
    let r = g.bufs[i].sub(0, 16);
    g.fab.store(r.region, r.offset, &payload(0, i, seq, 16)).map_err(|e| e.to_string())?;
    g.txs[i].send_region(&mut g.fab, r).map_err(|e| e.to_string())?;
    let want = g.txs[i].offsets().len() + 1;
    loop {
        g.txs[i].progress(&mut g.fab).map_err(|e| e.to_string())?;
        if g.txs[i].offsets().len() == want {
            break;
        }
        if !g.fab.advance() {
            return Err("reservation never returned".into());
        }
    }
    Ok(*g.txs[i].offsets().last().expect("offset"))
}

/// Lets every sender post whatever is ready and drains the fabric.
fn settle(g: &mut Ring) -> Result<(), String> {
    loop {
        let mut any = false;
        for tx in &mut g.txs {
            any |= tx.progress(&mut g.fab).map_err(|e| e.to_string())?;
        }
        if !g.fab.advance() && !any {
            return Ok(());
        }
    }
}

fn drain(g: &mut Ring) -> Result<Vec<usize>, String> {
    let mut got = Vec::new();
    while let Some(reg) = g.rx.receive_region(&mut g.fab).map_err(|e| e.to_string())? {
        got.push(g.fab.load(reg.region, reg.offset, 1).map_err(|e| e.to_string())?[0] as usize);
        g.rx.free_receive_region(&mut g.fab, reg).map_err(|e| e.to_string())?;
    }
    g.rx.progress(&mut g.fab).map_err(|e| e.to_string())?;
    Ok(got)
}

/// A slow writer holds its reservation; the zeroing receiver stops exactly
/// there even though a later record has landed.
fn head_of_line() -> Result<String, String> {
    let mut g = ring(Variant::Zeroing, 2, 0).map_err(|e| e.to_string())?;
    g.txs[0].set_write_delay(1000);
    let slow = reserve(&mut g, 0, 0)?;
    reserve(&mut g, 1, 0)?;
    settle(&mut g)?;
    let early = drain(&mut g)?;
    ensure(early.is_empty(), || format!("delivered {early:?} past the unwritten record"))?;
    ensure(g.rx.parse_offset() == slow, || format!("receiver at {}, unwritten record at {slow}", g.rx.parse_offset()))?;
    let t = g.fab.now();
    g.fab.advance_to(t + 1000);
    settle(&mut g)?;
    let late = drain(&mut g)?;
    ensure(late == [0, 1], || format!("after the slow write landed: {late:?}"))?;
    Ok(format!("zeroing receiver held at offset {slow} until the slow write landed"))
}

/// With immediates the receiver delivers around the slow record and its
/// tail stops at the first unreleased byte.
fn out_of_order_prefix() -> Result<String, String> {
    let mut g = ring(Variant::Imm, 3, 0).map_err(|e| e.to_string())?;
    g.txs[1].set_write_delay(1000);
    reserve(&mut g, 0, 0)?;
    let slow = reserve(&mut g, 1, 0)?;
    reserve(&mut g, 2, 0)?;
    settle(&mut g)?;
    let early = drain(&mut g)?;
    ensure(early == [0, 2], || format!("expected senders [0, 2] first, got {early:?}"))?;
    ensure(g.rx.tail() == slow, || format!("tail {} should stop at {slow}", g.rx.tail()))?;
    let t = g.fab.now();
    g.fab.advance_to(t + 1000);
    settle(&mut g)?;
    let late = drain(&mut g)?;
    let head = g.rx.head(&g.fab).map_err(|e| e.to_string())?;
    ensure(late == [1] && g.rx.tail() == head, || format!("late {late:?}, tail {} head {head}", g.rx.tail()))?;
    Ok(format!("imm receiver delivered around offset {slow}, tail held there, then advanced to {head}"))
}

pub fn shared_ring() -> Outcome {
    let a = stream(Variant::Zeroing, 1)?;
    let b = stream(Variant::Imm, 2)?;
    let c = head_of_line()?;
    let d = out_of_order_prefix()?;
    Ok(format!("{SENDERS} senders: {a}; {b}; {c}; {d}"))
}

pub fn broadcast() -> Outcome {
    let mut out = Vec::new();
    for sel in [Selector::RringInlined, Selector::RringDetached, Selector::RringNotify] {
        let mut fab = Fabric::new(TransportProfile::ib_roce(), 5, FabricConfig::default());
        let p = fab.add_endpoint();
        let readers: Vec<_> = (0..READERS).map(|_| fab.add_endpoint()).collect();
        let mut ch =
            open_channel(sel, &mut fab, &[p], &readers, &ChannelConfig::default()).map_err(|e| e.to_string())?;
        let max = ch.senders[0].max_message_size();
        let w = Workload {
            seed: 5,
            count: BROADCAST_MESSAGES,
            sizes: SizeDist::Uniform(1, max.min(2048)),
            hold: 2,
            record_deliveries: true,
            ..Default::default()
        };
        let rep = run(&mut fab, &mut ch, &w).map_err(|e| format!("{sel}: {e}"))?;
        ensure(rep.clean(), || format!("{sel}: unclean broadcast"))?;
        ensure(rep.deliveries.len() == READERS, || format!("{sel}: {} delivery logs", rep.deliveries.len()))?;
        let first = &rep.deliveries[0];
        ensure(first.len() as u64 == BROADCAST_MESSAGES, || format!("{sel}: reader 0 got {}", first.len()))?;
        ensure(rep.deliveries.iter().all(|d| d == first), || format!("{sel}: readers disagree"))?;
        let posted = fab.counters(p).all_requests();
        if sel != Selector::RringNotify {
            ensure(posted == 0, || format!("{sel}: publisher posted {posted} requests"))?;
        }
        out.push(format!("{sel} publisher posted {posted}"));
    }
    Ok(format!("{READERS} readers x {BROADCAST_MESSAGES} messages identical; {}", out.join(", ")))
}
