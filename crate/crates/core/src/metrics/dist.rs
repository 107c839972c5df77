//! Pull latency of read rings when the reader polls out of phase with the
//! publisher.
//!
//! Each message is published at `t0` and becomes visible `write_ticks` later.
//! The reader starts pulling at `t0 + phase` with the phase drawn from
//! `[0, jitter)`. A pull that lands before the record is visible comes back
//! empty and the reader retries at once, so latencies cluster one READ round
//! trip apart.

use rand::Rng;

use crate::chan::{open_channel, ChannelConfig, Family, Selector};
use crate::fabric::TransportProfile;
use crate::memory::{Access, Region};
use crate::workload::{payload, RunError};

use super::measure::measurement_fabric;

#[derive(Debug, Clone)]
pub struct DistParams {
    pub selector: Selector,
    pub count: u64,
    pub seed: u64,
    pub msg_size: u64,
    /// Delay between the publisher's store and its visibility.
    pub write_ticks: u64,
    /// Upper bound (exclusive) of the reader's start phase; 0 keeps it in sync.
    pub jitter: u64,
    pub cfg: ChannelConfig,
}

impl DistParams {
    /// The out-of-phase setup: visibility after one and a half HRT, reader
    /// phase uniform over one HRT.
    pub fn phase_shifted(selector: Selector, hrt: u64) -> Self {
        DistParams {
            selector,
            count: 1000,
            seed: 0,
            msg_size: 32,
            write_ticks: 3 * hrt / 2,
            jitter: hrt,
            cfg: ChannelConfig::default(),
        }
    }
}

/// Ticks from the reader's first pull to delivery, one per message.
pub fn pull_latencies(p: &DistParams) -> Result<Vec<u64>, RunError> {
    if p.selector.family() != Family::ReadRing {
        return Err(crate::chan::ChanError::Unsupported("pull latency needs a read ring").into());
    }
    let mut fab = measurement_fabric(&TransportProfile::ib_roce(), p.seed);
    let (s, r) = (fab.add_endpoint(), fab.add_endpoint());
    let cfg = ChannelConfig { write_ticks: p.write_ticks, ..p.cfg };
    let mut ch = open_channel(p.selector, &mut fab, &[s], &[r], &cfg)?;
    let len = p.msg_size.clamp(1, ch.senders[0].max_message_size());
    let buf = fab.register_app(s, len, Access::LOCAL_WRITE)?;
    let mut rng = fab.fork_rng(0xd157);
    let mut out = Vec::with_capacity(p.count as usize);
    for seq in 0..p.count {
        fab.run_until_idle();
        let t0 = fab.now();
        let bytes = payload(p.seed, 0, seq, len);
        fab.store(buf, 0, &bytes)?;
        ch.senders[0].send_region(&mut fab, Region::app(buf, 0, len))?;
        let phase = if p.jitter > 0 { rng.random_range(0..p.jitter) } else { 0 };
        fab.advance_to(t0 + phase);
        let start = fab.now();
        loop {
            if let Some(reg) = ch.receivers[0].receive_region(&mut fab)? {
                if fab.load(reg.region, reg.offset, reg.len)? != bytes {
                    return Err(crate::chan::ChanError::Transport(format!("message {seq} corrupted")).into());
                }
                ch.receivers[0].free_receive_region(&mut fab, reg)?;
                break;
            }
            ch.senders[0].progress(&mut fab)?;
            if !fab.advance() {
                return Err(RunError::Stall { tick: fab.now(), delivered: seq, expected: p.count });
            }
        }
        out.push(fab.now() - start);
        ch.senders[0].progress(&mut fab)?;
        ch.receivers[0].progress(&mut fab)?;
    }
    Ok(out)
}

/// `(bin_start, count)` for every bin between the smallest and largest value.
pub fn histogram(values: &[u64], bin: u64) -> Vec<(u64, u64)> {
    let bin = bin.max(1);
    let (Some(&lo), Some(&hi)) = (values.iter().min(), values.iter().max()) else { return Vec::new() };
    let (lo, hi) = (lo / bin, hi / bin);
    let mut h: Vec<(u64, u64)> = (lo..=hi).map(|b| (b * bin, 0)).collect();
    for &v in values {
        h[(v / bin - lo) as usize].1 += 1;
    }
    h
}

/// Bin starts of the local maxima holding at least 5% of the values.
pub fn modes(hist: &[(u64, u64)]) -> Vec<u64> {
    let total: u64 = hist.iter().map(|h| h.1).sum();
    let floor = (total / 20).max(1);
    let at = |i: isize| if i < 0 { 0 } else { hist.get(i as usize).map_or(0, |h| h.1) };
    (0..hist.len())
        .filter(|&i| {
            let c = hist[i].1;
            c >= floor && c > at(i as isize - 1) && c >= at(i as isize + 1)
        })
        .map(|i| hist[i].0)
        .collect()
}

pub const DIST_HEADER: &str = "bin_start_ticks,count";

pub fn histogram_csv(hist: &[(u64, u64)]) -> String {
    let mut s = String::from(DIST_HEADER);
    s.push('\n');
    for (b, c) in hist {
        s.push_str(&format!("{b},{c}\n"));
    }
    s
}
