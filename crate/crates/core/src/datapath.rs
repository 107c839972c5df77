//! Request/response datapaths built from two uni-directional channels.
//!
//! Point-to-point channels are mirrored. A read ring's readers answer through
//! per-reader inlined write slots, so the publisher keeps posting nothing; a
//! shared ring's receiver answers through per-sender inlined read slots that
//! the senders pull, so the receiver stays passive.

use std::collections::{HashMap, VecDeque};
use std::fmt::Write as _;

use crate::chan::{open_channel, ChanError, Channel, ChannelConfig, Family, Selector, SendHandle};
use crate::fabric::{EndpointId, Fabric};
use crate::memory::{Access, Region};
use crate::metrics::fmt_g6;
use crate::workload::{payload, RunError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AckPolicy {
    PerMessage,
    Batched(u32),
}

pub struct Datapath {
    pub selector: Selector,
    pub reverse_selector: Selector,
    pub forward: Channel,
    pub reverse: Channel,
    pub clients: Vec<EndpointId>,
    pub servers: Vec<EndpointId>,
}

/// Channel used for responses when `forward` carries the requests.
pub fn reverse_of(forward: Selector) -> Selector {
    match forward.family() {
        Family::ReadRing => Selector::WslotInlined,
        Family::SharedRing => Selector::RslotInlined,
        _ => forward,
    }
}

/// Opens `forward` from `clients` to `servers` and the matching reverse
/// channel.
pub fn compose(
    forward: Selector,
    fab: &mut Fabric,
    clients: &[EndpointId],
    servers: &[EndpointId],
    ack: AckPolicy,
    cfg: &ChannelConfig,
) -> Result<Datapath, ChanError> {
    let mut cfg = *cfg;
    cfg.ack_batch = match ack {
        AckPolicy::PerMessage => 1,
        AckPolicy::Batched(n) => n.max(1),
    };
    let fwd = open_channel(forward, fab, clients, servers, &cfg)?;
    let rev_sel = reverse_of(forward);
    let rev = open_channel(rev_sel, fab, servers, clients, &cfg)?;
    Ok(Datapath {
        selector: forward,
        reverse_selector: rev_sel,
        forward: fwd,
        reverse: rev,
        clients: clients.to_vec(),
        servers: servers.to_vec(),
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunStats {
    pub channel: String,
    pub profile: String,
    pub msg_size: u64,
    pub count: u64,
    pub outstanding: usize,
    /// Request send to response delivery, one entry per response.
    pub round_trips: Vec<u64>,
    /// Request send to the forward sender's completion.
    pub send_completions: Vec<u64>,
    pub reqs_send: u64,
    pub reqs_recv: u64,
    pub copies_send: u64,
    pub copies_recv: u64,
    pub recv_registered_bytes: u64,
    pub ticks: u64,
}

pub const RUN_HEADER: &str =
    "channel,profile,msg_size,count,outstanding,p50_ticks,p90_ticks,reqs_send,reqs_recv,copies_send,copies_recv,recv_registered_bytes";

pub fn percentile(v: &[u64], p: f64) -> u64 {
    if v.is_empty() {
        return 0;
    }
    let mut s = v.to_vec();
    s.sort_unstable();
    let k = ((p / 100.0) * (s.len() - 1) as f64).round() as usize;
    s[k]
}

impl RunStats {
    pub fn csv_row(&self) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.channel,
            self.profile,
            self.msg_size,
            self.count,
            self.outstanding,
            fmt_g6(percentile(&self.round_trips, 50.0) as f64),
            fmt_g6(percentile(&self.round_trips, 90.0) as f64),
            self.reqs_send,
            self.reqs_recv,
            self.copies_send,
            self.copies_recv,
            self.recv_registered_bytes
        );
        s
    }
}

/// Link from a sender endpoint to a receiver endpoint, as channel indices.
fn link_map(ch: &Channel) -> HashMap<(EndpointId, EndpointId), (usize, usize)> {
    ch.links.iter().map(|&(s, r)| ((ch.senders[s].endpoint(), ch.receivers[r].endpoint()), (s, r))).collect()
}

/// Client index and sequence number of a request.
type Tag = Option<(usize, u64)>;

struct Outbox {
    buf: Region,
    stride: u64,
    free: Vec<u64>,
    inflight: Vec<(SendHandle, u64, Tag)>,
}

impl Outbox {
    fn new(fab: &mut Fabric, ep: EndpointId, slots: usize, stride: u64) -> Result<Outbox, ChanError> {
        let stride = stride.max(1);
        let id = fab.register_app(ep, slots as u64 * stride, Access::LOCAL_WRITE)?;
        Ok(Outbox {
            buf: Region::app(id, 0, slots as u64 * stride),
            stride,
            free: (0..slots as u64).rev().collect(),
            inflight: Vec::new(),
        })
    }
}

/// Sends `bytes`; `Ok(None)` when out of credit or buffers.
fn send(
    fab: &mut Fabric,
    tx: &mut dyn crate::chan::ChannelSender,
    out: &mut Outbox,
    bytes: &[u8],
    tag: Tag,
) -> Result<Option<SendHandle>, ChanError> {
    let Some(&slot) = out.free.last() else { return Ok(None) };
    let len = bytes.len() as u64;
    let region = match tx.send_buffer(fab, len) {
        Ok(Some(r)) => r,
        Ok(None) => out.buf.sub(slot * out.stride, len),
        Err(ChanError::NoCredit) => return Ok(None),
        Err(e) => return Err(e),
    };
    fab.store(region.region, region.offset, bytes)?;
    match tx.send_region(fab, region) {
        Ok(h) => {
            out.free.pop();
            out.inflight.push((h, slot, tag));
            Ok(Some(h))
        }
        Err(ChanError::NoCredit) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Retires completed sends; returns the tags of those completed.
fn retire(fab: &mut Fabric, tx: &mut dyn crate::chan::ChannelSender, out: &mut Outbox) -> Result<Vec<Tag>, ChanError> {
    let mut done = Vec::new();
    let mut k = 0;
    while k < out.inflight.len() {
        let (h, slot, tag) = out.inflight[k];
        if tx.test_send_request(fab, h)? {
            out.inflight.swap_remove(k);
            out.free.push(slot);
            done.push(tag);
        } else {
            k += 1;
        }
    }
    Ok(done)
}

/// Each client sends `count` requests of `msg_size` bytes, at most
/// `outstanding` awaiting responses; every server that receives a request
/// echoes it back on the reverse channel.
pub fn echo_workload(
    fab: &mut Fabric,
    dp: &mut Datapath,
    msg_size: u64,
    count: u64,
    outstanding: usize,
    seed: u64,
) -> Result<RunStats, RunError> {
    let outstanding = outstanding.max(1);
    let fmax = dp.forward.senders.iter().map(|s| s.max_message_size()).min().unwrap_or(0);
    let rmax = dp.reverse.senders.iter().map(|s| s.max_message_size()).min().unwrap_or(0);
    let len = msg_size.min(fmax).min(rmax);
    let fwd_links = link_map(&dp.forward);
    let rev_links = link_map(&dp.reverse);
    let n_clients = dp.forward.senders.len();
    let client_of: HashMap<EndpointId, usize> =
        dp.forward.senders.iter().enumerate().map(|(i, s)| (s.endpoint(), i)).collect();
    // Responses each request waits for: one per server it reaches.
    let fanout: Vec<usize> = (0..n_clients).map(|c| dp.forward.receivers_of(c).len()).collect();

    let mut outs = Vec::new();
    for s in &dp.forward.senders {
        outs.push(Outbox::new(fab, s.endpoint(), outstanding, len)?);
    }
    let mut rev_outs = Vec::new();
    for s in &dp.reverse.senders {
        rev_outs.push(Outbox::new(fab, s.endpoint(), outstanding, len)?);
    }
    let mut next = vec![0u64; n_clients];
    let mut sent_at: Vec<Vec<u64>> = vec![Vec::new(); n_clients];
    let mut waiting: Vec<HashMap<u64, usize>> = vec![HashMap::new(); n_clients];
    let mut pending_resp: Vec<VecDeque<Vec<u8>>> = vec![VecDeque::new(); dp.reverse.senders.len()];
    let mut server_next: HashMap<(usize, usize), u64> = HashMap::new();
    let mut client_next: HashMap<(usize, usize), u64> = HashMap::new();
    let mut stats =
        RunStats { msg_size: len, count, outstanding, channel: dp.selector.to_string(), ..Default::default() };
    let expected: u64 = fanout.iter().map(|&f| f as u64 * count).sum();
    let mut responses = 0u64;
    let start = fab.now();
    let mut last = fab.now();
    let mut spins = 0u32;
    fab.reset_counters();
    let check = |ok: bool, what: &str| -> Result<(), RunError> {
        if ok {
            Ok(())
        } else {
            Err(ChanError::Transport(format!("echo: {what}")).into())
        }
    };

    while responses < expected {
        let mut any = false;
        // Clients issue requests.
        for c in 0..n_clients {
            let tx = dp.forward.senders[c].as_mut();
            for tag in retire(fab, tx, &mut outs[c])? {
                let (c, seq) = tag.expect("tagged");
                stats.send_completions.push(fab.now() - sent_at[c][seq as usize]);
                any = true;
            }
            while next[c] < count && waiting[c].len() < outstanding {
                let bytes = payload(seed, c, next[c], len);
                let tx = dp.forward.senders[c].as_mut();
                if send(fab, tx, &mut outs[c], &bytes, Some((c, next[c])))?.is_none() {
                    break;
                }
                sent_at[c].push(fab.now());
                waiting[c].insert(next[c], fanout[c]);
                next[c] += 1;
                any = true;
            }
            any |= dp.forward.senders[c].progress(fab)?;
        }
        // Servers answer.
        for r in 0..dp.forward.receivers.len() {
            let server = dp.forward.receivers[r].endpoint();
            while let Some(reg) = dp.forward.receivers[r].receive_region(fab)? {
                let bytes = fab.load(reg.region, reg.offset, reg.len)?;
                dp.forward.receivers[r].free_receive_region(fab, reg)?;
                let c = *bytes.first().unwrap_or(&0) as usize;
                check(c < n_clients, "request from unknown client")?;
                let seq = server_next.entry((r, c)).or_default();
                check(bytes == payload(seed, c, *seq, len), "request payload mismatch")?;
                *seq += 1;
                let client = dp.forward.senders[c].endpoint();
                check(fwd_links.contains_key(&(client, server)), "request over a missing link")?;
                let &(rs, _) = rev_links.get(&(server, client)).ok_or(ChanError::Topology("no reverse link"))?;
                pending_resp[rs].push_back(bytes);
                any = true;
            }
            any |= dp.forward.receivers[r].progress(fab)?;
        }
        for rs in 0..dp.reverse.senders.len() {
            let tx = dp.reverse.senders[rs].as_mut();
            any |= !retire(fab, tx, &mut rev_outs[rs])?.is_empty();
            while let Some(bytes) = pending_resp[rs].front() {
                if send(fab, tx, &mut rev_outs[rs], bytes, None)?.is_none() {
                    break;
                }
                pending_resp[rs].pop_front();
                any = true;
            }
            any |= tx.progress(fab)?;
        }
        // Clients collect responses.
        for rr in 0..dp.reverse.receivers.len() {
            let rx = dp.reverse.receivers[rr].as_mut();
            while let Some(reg) = rx.receive_region(fab)? {
                let bytes = fab.load(reg.region, reg.offset, reg.len)?;
                rx.free_receive_region(fab, reg)?;
                let c = *client_of.get(&rx.endpoint()).ok_or(ChanError::Topology("response at a non-client"))?;
                let seq = client_next.entry((rr, c)).or_default();
                check(bytes == payload(seed, c, *seq, len), "response payload mismatch")?;
                stats.round_trips.push(fab.now() - sent_at[c][*seq as usize]);
                let left = waiting[c].get_mut(seq).ok_or(ChanError::Transport("unexpected response".into()))?;
                *left -= 1;
                if *left == 0 {
                    waiting[c].remove(seq);
                }
                *seq += 1;
                responses += 1;
                last = fab.now();
                any = true;
            }
            any |= rx.progress(fab)?;
        }

        if fab.now() > last + 1_000_000 {
            return Err(RunError::Stall { tick: fab.now(), delivered: responses, expected });
        }
        if any {
            spins += 1;
            if spins < 100_000 {
                continue;
            }
        }
        spins = 0;
        if !fab.advance() && !any {
            return Err(RunError::Stall { tick: fab.now(), delivered: responses, expected });
        }
    }
    stats.profile = fab.profile().cli_name().to_string();
    stats.ticks = fab.now() - start;
    for &c in &dp.clients {
        let k = fab.counters(c);
        stats.reqs_send += k.channel_requests();
        stats.copies_send += k.cpu_copy_bytes;
    }
    for &s in &dp.servers {
        let k = fab.counters(s);
        stats.reqs_recv += k.channel_requests();
        stats.copies_recv += k.cpu_copy_bytes;
        stats.recv_registered_bytes += k.registered_bytes;
    }
    Ok(stats)
}
