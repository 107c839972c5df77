//! Workloads shared by the criterion benches in `benches/`.

use rdmachan::chan::{open_channel, ChannelConfig, Selector};
use rdmachan::datapath::{compose, echo_workload, AckPolicy};
use rdmachan::workload::{run, SizeDist, Workload};
use rdmachan::{Fabric, FabricConfig, TransportProfile};

/// Streams `count` messages of `size` bytes over one sender and one
/// receiver; returns the simulated ticks taken.
pub fn stream(sel: Selector, count: u64, size: u64) -> u64 {
    let mut fab = Fabric::new(TransportProfile::ib_roce(), 0, FabricConfig::default());
    let (a, b) = (fab.add_endpoint(), fab.add_endpoint());
    let mut ch = open_channel(sel, &mut fab, &[a], &[b], &ChannelConfig::default()).expect("open");
    let size = size.min(ch.senders[0].max_message_size());
    let w = Workload { count, sizes: SizeDist::Fixed(size), outstanding: 8, ..Default::default() };
    let rep = run(&mut fab, &mut ch, &w).expect("run");
    assert!(rep.clean());
    rep.end_tick - rep.start_tick
}

/// Echo round trips over the composed datapath of `sel`.
pub fn echo(sel: Selector, count: u64, size: u64) -> u64 {
    let mut fab = Fabric::new(TransportProfile::ib_roce(), 0, FabricConfig::default());
    let (a, b) = (fab.add_endpoint(), fab.add_endpoint());
    let mut dp = compose(sel, &mut fab, &[a], &[b], AckPolicy::PerMessage, &ChannelConfig::default()).expect("compose");
    echo_workload(&mut fab, &mut dp, size, count, 4, 0).expect("echo").ticks
}
