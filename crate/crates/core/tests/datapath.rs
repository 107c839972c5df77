use rdmachan::chan::{ChannelConfig, Family, Selector};
use rdmachan::datapath::{compose, echo_workload, AckPolicy, RunStats, RUN_HEADER};
use rdmachan::{Fabric, FabricConfig, TransportProfile};

fn echo(sel: Selector, ack: AckPolicy, count: u64) -> Result<RunStats, String> {
    let mut fab = Fabric::new(TransportProfile::ib_roce(), 3, FabricConfig::default());
    let eps: Vec<_> = (0..4).map(|_| fab.add_endpoint()).collect();
    let (clients, servers) = match sel.family() {
        Family::ReadRing => (&eps[..1], &eps[1..]),
        Family::SharedRing => (&eps[..3], &eps[3..]),
        _ if sel.native_multi_sender() => (&eps[..3], &eps[3..]),
        _ => (&eps[..1], &eps[1..2]),
    };
    let cfg = ChannelConfig { slot_size: 512, ring_capacity: 8192, ..Default::default() };
    let mut dp = compose(sel, &mut fab, clients, servers, ack, &cfg).map_err(|e| e.to_string())?;
    echo_workload(&mut fab, &mut dp, 64, count, 4, 9).map_err(|e| e.to_string())
}

#[test]
fn every_channel_echoes() {
    let mut failures = Vec::new();
    for sel in Selector::ALL {
        match echo(sel, AckPolicy::PerMessage, 200) {
            Ok(s) => {
                assert!(!s.round_trips.is_empty(), "{sel}");
                assert!(s.csv_row().starts_with(sel.as_str()));
            }
            Err(e) => failures.push(format!("{sel}: {e}")),
        }
    }
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn ring_echo_keeps_publisher_and_shared_receiver_passive() {
    // Reverse channels are chosen so the passive side stays passive.
    let s = echo(Selector::RringInlined, AckPolicy::PerMessage, 100).unwrap();
    assert_eq!(s.round_trips.len(), 300);
    assert_eq!(s.reqs_send, 0, "publisher posted data requests");
    let s = echo(Selector::SringZeroing, AckPolicy::PerMessage, 100).unwrap();
    assert_eq!(s.round_trips.len(), 300);
    assert_eq!(s.reqs_recv, 0, "shared-ring receiver posted data requests");
}

#[test]
fn ack_batching_preserves_delivery() {
    for sel in [Selector::WslotInlined, Selector::RingZeroing, Selector::RslotInlined] {
        let a = echo(sel, AckPolicy::PerMessage, 300).unwrap();
        let b = echo(sel, AckPolicy::Batched(8), 300).unwrap();
        assert_eq!(a.round_trips.len(), b.round_trips.len(), "{sel}");
    }
}

#[test]
fn run_header_is_stable() {
    assert_eq!(
        RUN_HEADER,
        "channel,profile,msg_size,count,outstanding,p50_ticks,p90_ticks,reqs_send,reqs_recv,copies_send,copies_recv,recv_registered_bytes"
    );
}
