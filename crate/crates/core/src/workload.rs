//! Deterministic one-way workload driver.
//!
//! Every sender pushes a seeded stream of messages to the receivers it is
//! linked to; every receiver checks that each sender's stream arrives exactly
//! once, in order and byte-exact. Payloads are a pure function of
//! `(seed, sender, seq)`, so verification needs no side channel: byte 0 holds
//! the sender index and the rest is keyed pseudo-random data.

use std::collections::{BTreeSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::chan::{ChanError, Channel, RecvHandle, SendHandle};
use crate::fabric::{Fabric, FabricError};
use crate::memory::{Access, Region};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SizeDist {
    Fixed(u64),
    /// Inclusive bounds, clamped to the channel maximum.
    Uniform(u64, u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecvMode {
    /// `receive_region` and verify in channel memory.
    Region,
    /// `can_receive_region` + `receive_region_into`, using the in-place
    /// region whenever one is offered.
    Option,
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub seed: u64,
    /// Messages per sender.
    pub count: u64,
    pub sizes: SizeDist,
    /// In-flight sends per sender.
    pub outstanding: usize,
    pub recv_mode: RecvMode,
    /// Received regions a receiver may hold before freeing one at random.
    pub hold: usize,
    /// Send message k only once every linked receiver delivered k-1.
    pub lockstep: bool,
    /// Receivers only run when one of their completion queues has an event.
    pub blocking: bool,
    /// Minimum ticks between two sends of one sender.
    pub send_gap: u64,
    /// Tick at which each receiver starts (missing entries start at 0).
    pub recv_start: Vec<u64>,
    /// Ticks without a delivery before the run counts as stalled.
    pub stall_ticks: u64,
    pub record_deliveries: bool,
}

impl Default for Workload {
    fn default() -> Self {
        Workload {
            seed: 0,
            count: 100,
            sizes: SizeDist::Uniform(1, 256),
            outstanding: 4,
            recv_mode: RecvMode::Region,
            hold: 0,
            lockstep: false,
            blocking: false,
            send_gap: 0,
            recv_start: Vec::new(),
            stall_ticks: 100_000,
            record_deliveries: false,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RunError {
    #[error(transparent)]
    Chan(#[from] ChanError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("stalled at tick {tick} after {delivered} of {expected} deliveries")]
    Stall { tick: u64, delivered: u64, expected: u64 },
}

#[derive(Debug, Clone, Default)]
pub struct RunReport {
    pub delivered: u64,
    pub expected: u64,
    /// Deliveries whose payload matched no message of the stream.
    pub corrupt: u64,
    /// Deliveries ahead of an earlier message of the same sender.
    pub out_of_order: u64,
    /// Deliveries of a message that was already delivered.
    pub duplicates: u64,
    /// Send-to-delivery ticks, one entry per delivery.
    pub latencies: Vec<u64>,
    /// `(sender, seq)` per receiver in delivery order, when recorded.
    pub deliveries: Vec<Vec<(usize, u64)>>,
    pub start_tick: u64,
    pub end_tick: u64,
}

impl RunReport {
    pub fn clean(&self) -> bool {
        self.corrupt == 0 && self.duplicates == 0 && self.out_of_order == 0 && self.delivered == self.expected
    }

    /// Exactly-once and byte-exact, ignoring order.
    pub fn intact(&self) -> bool {
        self.corrupt == 0 && self.duplicates == 0 && self.delivered == self.expected
    }
}

/// How far from its FIFO position a message is searched for.
const REORDER_WINDOW: u64 = 256;

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn key(seed: u64, sender: usize, seq: u64) -> u64 {
    mix(seed ^ mix((sender as u64) << 40 ^ seq))
}

/// Length of message `seq` of `sender`.
pub fn message_len(sizes: SizeDist, max: u64, seed: u64, sender: usize, seq: u64) -> u64 {
    match sizes {
        SizeDist::Fixed(n) => n.min(max),
        SizeDist::Uniform(lo, hi) => {
            let (lo, hi) = (lo.min(max), hi.min(max));
            lo + key(seed ^ 0x5157, sender, seq) % (hi - lo + 1)
        }
    }
}

/// Payload of message `seq` of `sender`.
pub fn payload(seed: u64, sender: usize, seq: u64, len: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(len as usize);
    let k = key(seed, sender, seq);
    let mut i = 0u64;
    while (out.len() as u64) < len {
        out.extend_from_slice(&mix(k ^ i).to_le_bytes());
        i += 1;
    }
    out.truncate(len as usize);
    if let Some(b) = out.first_mut() {
        *b = sender as u8;
    }
    out
}

struct SenderState {
    next: u64,
    buf: Region,
    free_slots: Vec<u64>,
    inflight: VecDeque<(SendHandle, u64)>,
    last_send: Option<u64>,
    sent_at: Vec<u64>,
}

struct ReceiverState {
    /// Sender indices linked to this receiver.
    from: Vec<usize>,
    /// Next expected seq per sender index.
    next: Vec<u64>,
    /// Messages delivered ahead of `next`, per sender index.
    early: Vec<BTreeSet<u64>>,
    held: Vec<Region>,
    pending: Option<(RecvHandle, Region, bool)>,
    dst: Region,
    awake: bool,
    delivered: u64,
}

/// Runs `w` over an opened channel until every receiver has every message.
pub fn run(fab: &mut Fabric, ch: &mut Channel, w: &Workload) -> Result<RunReport, RunError> {
    let max = ch.senders.iter().map(|s| s.max_message_size()).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(w.seed ^ 0xd1ce);
    let n_senders = ch.senders.len();
    let mut senders = Vec::new();
    for s in &ch.senders {
        let slots = w.outstanding.max(1) as u64;
        let stride = max.max(1);
        let region = fab.register_app(s.endpoint(), slots * stride, Access::LOCAL_WRITE)?;
        senders.push(SenderState {
            next: 0,
            buf: Region::app(region, 0, slots * stride),
            free_slots: (0..slots).rev().collect(),
            inflight: VecDeque::new(),
            last_send: None,
            sent_at: Vec::new(),
        });
    }
    let mut receivers = Vec::new();
    for (ri, r) in ch.receivers.iter().enumerate() {
        let dst = fab.register_app(r.endpoint(), max.max(1), Access::LOCAL_WRITE | Access::REMOTE_WRITE)?;
        receivers.push(ReceiverState {
            from: ch.senders_of(ri),
            next: vec![0; n_senders],
            early: vec![BTreeSet::new(); n_senders],
            held: Vec::new(),
            pending: None,
            dst: Region::app(dst, 0, max.max(1)),
            awake: true,
            delivered: 0,
        });
    }
    let expected: u64 = receivers.iter().map(|r| r.from.len() as u64 * w.count).sum();
    let mut rep = RunReport {
        expected,
        deliveries: vec![Vec::new(); receivers.len()],
        start_tick: fab.now(),
        ..Default::default()
    };
    let mut last_delivery = fab.now();
    let mut spins = 0u32;

    loop {
        let mut any = false;

        // Senders.
        for (i, st) in senders.iter_mut().enumerate() {
            let tx = &mut ch.senders[i];
            let mut k = 0;
            while k < st.inflight.len() {
                let (h, slot) = st.inflight[k];
                if tx.test_send_request(fab, h)? {
                    st.inflight.remove(k);
                    st.free_slots.push(slot);
                    any = true;
                } else {
                    k += 1;
                }
            }
            while st.next < w.count && !st.free_slots.is_empty() {
                if st.last_send.is_some_and(|t| fab.now() < t + w.send_gap) {
                    break;
                }
                if w.lockstep
                    && !ch.links.iter().filter(|(s, _)| *s == i).all(|(_, r)| receivers[*r].next[i] == st.next)
                {
                    break;
                }
                let len = message_len(w.sizes, max, w.seed, i, st.next);
                let bytes = payload(w.seed, i, st.next, len);
                let slot = *st.free_slots.last().expect("non-empty");
                let region = match tx.send_buffer(fab, len) {
                    Ok(Some(r)) => r,
                    Ok(None) => st.buf.sub(slot * max.max(1), len),
                    Err(ChanError::NoCredit) => break,
                    Err(e) => return Err(e.into()),
                };
                fab.store(region.region, region.offset, &bytes)?;
                match tx.send_region(fab, region) {
                    Ok(h) => {
                        st.free_slots.pop();
                        st.inflight.push_back((h, slot));
                        st.sent_at.push(fab.now());
                        st.last_send = Some(fab.now());
                        st.next += 1;
                        any = true;
                    }
                    Err(ChanError::NoCredit) => break,
                    Err(e) => return Err(e.into()),
                }
            }
            any |= tx.progress(fab)?;
        }

        // Receivers.
        for (ri, rs) in receivers.iter_mut().enumerate() {
            if fab.now() < w.recv_start.get(ri).copied().unwrap_or(0) {
                continue;
            }
            let rx = &mut ch.receivers[ri];
            if w.blocking && !rs.awake {
                let cqs: Vec<_> = rx.notify_cqs().into_iter().chain(rx.own_cqs()).collect();
                if !cqs.iter().any(|&c| fab.cq_len(c) > 0) {
                    continue;
                }
                rs.awake = true;
            }
            let mut got = false;
            loop {
                let msg = match w.recv_mode {
                    RecvMode::Region => rx.receive_region(fab)?.map(|r| (r, true)),
                    RecvMode::Option => {
                        if rs.pending.is_none() {
                            if let Some(o) = rx.can_receive_region(fab)? {
                                let (dst, in_place) = match o.in_place {
                                    Some(r) => (r, true),
                                    None => (rs.dst, false),
                                };
                                let h = rx.receive_region_into(fab, o, dst)?;
                                rs.pending = Some((h, dst, in_place));
                            }
                        }
                        match rs.pending {
                            Some((h, dst, in_place)) => match rx.test_receive_request(fab, h)? {
                                Some(len) => {
                                    rs.pending = None;
                                    Some((dst.sub(0, len), in_place))
                                }
                                None => None,
                            },
                            None => None,
                        }
                    }
                };
                let Some((r, owned)) = msg else { break };
                got = true;
                let bytes = fab.load(r.region, r.offset, r.len)?;
                check(&bytes, w, max, rs, &senders, fab.now(), &mut rep, ri);
                if owned {
                    rs.held.push(r);
                }
                while rs.held.len() > w.hold {
                    let k = rng.random_range(0..rs.held.len());
                    let r = rs.held.swap_remove(k);
                    rx.free_receive_region(fab, r)?;
                }
            }
            if !got && !rs.held.is_empty() {
                for r in rs.held.drain(..) {
                    rx.free_receive_region(fab, r)?;
                }
                any = true;
            }
            any |= got;
            any |= rx.progress(fab)?;
            if got {
                last_delivery = fab.now();
            }
            if w.blocking && !got && rs.pending.is_none() {
                rs.awake = false;
            }
        }

        let done = rep.delivered + rep.corrupt + rep.duplicates >= expected
            && senders.iter().all(|s| s.inflight.is_empty() && s.next == w.count);
        if done {
            break;
        }
        let stalled =
            |fab: &Fabric, rep: &RunReport| RunError::Stall { tick: fab.now(), delivered: rep.delivered, expected };
        if fab.now() > last_delivery + w.stall_ticks {
            return Err(stalled(fab, &rep));
        }
        if any {
            spins += 1;
            if spins < 100_000 {
                continue;
            }
            return Err(stalled(fab, &rep));
        }
        spins = 0;
        if !fab.advance() {
            let wake = senders
                .iter()
                .filter(|s| s.next < w.count)
                .filter_map(|s| s.last_send.map(|t| t + w.send_gap))
                .chain(w.recv_start.iter().copied())
                .filter(|&t| t > fab.now())
                .min();
            match wake {
                Some(t) => fab.advance_to(t),
                None => return Err(stalled(fab, &rep)),
            }
        }
    }
    for (ri, rs) in receivers.iter_mut().enumerate() {
        for r in rs.held.drain(..) {
            ch.receivers[ri].free_receive_region(fab, r)?;
        }
    }
    rep.end_tick = fab.now();
    Ok(rep)
}

#[allow(clippy::too_many_arguments)]
fn check(
    bytes: &[u8],
    w: &Workload,
    max: u64,
    rs: &mut ReceiverState,
    senders: &[SenderState],
    now: u64,
    rep: &mut RunReport,
    ri: usize,
) {
    let s = bytes.first().map(|b| *b as usize).unwrap_or(0);
    if !rs.from.contains(&s) {
        rep.corrupt += 1;
        return;
    }
    let is = |seq: u64| bytes == payload(w.seed, s, seq, message_len(w.sizes, max, w.seed, s, seq)).as_slice();
    let next = rs.next[s];
    let seq = if next < w.count && is(next) {
        next
    } else {
        // Some other message of this stream? Search a window around the
        // FIFO position, both for early arrivals and repeats.
        let sent = senders[s].next;
        // Short messages can be identical, so prefer one not yet delivered.
        let early = &rs.early[s];
        let fresh = (next + 1..sent.min(next + REORDER_WINDOW)).find(|&k| !early.contains(&k) && is(k));
        match fresh {
            Some(k) => {
                rs.early[s].insert(k);
                rep.out_of_order += 1;
                k
            }
            None if (next.saturating_sub(REORDER_WINDOW)..sent.min(next + REORDER_WINDOW)).any(is) => {
                rep.duplicates += 1;
                return;
            }
            None => {
                rep.corrupt += 1;
                return;
            }
        }
    };
    if seq == next {
        rs.next[s] += 1;
        while rs.early[s].remove(&rs.next[s]) {
            rs.next[s] += 1;
        }
    }
    rs.delivered += 1;
    rep.delivered += 1;
    rep.latencies.push(now - senders[s].sent_at[seq as usize]);
    if w.record_deliveries {
        rep.deliveries[ri].push((s, seq));
    }
}
