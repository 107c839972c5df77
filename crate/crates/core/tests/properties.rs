use proptest::prelude::*;
use rdmachan::chan::{open_channel, ChannelConfig, PrefixTracker, Selector};
use rdmachan::metrics::dist::{histogram, modes};
use rdmachan::metrics::{least_capable_profile, measure, MeasureParams};
use rdmachan::workload::{run, RunReport, SizeDist, Workload};
use rdmachan::{Fabric, FabricConfig, TransportProfile};

fn selector() -> impl Strategy<Value = Selector> {
    (0..Selector::ALL.len()).prop_map(|i| Selector::ALL[i])
}

fn stream(sel: Selector, seed: u64, hi: u64, outstanding: usize, hold: usize, count: u64) -> RunReport {
    let mut fab = Fabric::new(TransportProfile::ib_roce(), seed, FabricConfig::default());
    let (a, b) = (fab.add_endpoint(), fab.add_endpoint());
    let cfg = ChannelConfig { ring_capacity: 8192, slot_size: 1024, ..Default::default() };
    let mut ch = open_channel(sel, &mut fab, &[a], &[b], &cfg).unwrap();
    let w = Workload {
        seed,
        count,
        sizes: SizeDist::Uniform(1, hi),
        outstanding,
        hold,
        record_deliveries: true,
        ..Default::default()
    };
    run(&mut fab, &mut ch, &w).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn any_channel_delivers_exactly_once_in_order(
        sel in selector(), seed in any::<u64>(), hi in 1u64..2048, outstanding in 1usize..9, hold in 0usize..5,
    ) {
        let rep = stream(sel, seed, hi, outstanding, hold, 150);
        prop_assert!(rep.clean(), "{sel}: {rep:?}");
    }

    #[test]
    fn runs_are_deterministic(sel in selector(), seed in any::<u64>()) {
        let a = stream(sel, seed, 512, 4, 2, 60);
        let b = stream(sel, seed, 512, 4, 2, 60);
        prop_assert_eq!(a.latencies, b.latencies);
        prop_assert_eq!(a.deliveries, b.deliveries);
        prop_assert_eq!(a.end_tick, b.end_tick);
    }

    #[test]
    fn nozeroing_matches_zeroing(seed in any::<u64>(), hi in 1u64..2048, outstanding in 1usize..9) {
        let z = stream(Selector::RingZeroing, seed, hi, outstanding, 0, 200);
        let n = stream(Selector::RingNoZeroing, seed, hi, outstanding, 0, 200);
        prop_assert!(z.clean() && n.clean());
        prop_assert_eq!(z.deliveries, n.deliveries);
    }

    /// The tracker's base is the end of the longest completed prefix, checked
    /// against a plain list of done flags.
    #[test]
    fn prefix_tracker_matches_model(lens in prop::collection::vec(1u64..64, 1..40), order in any::<u64>()) {
        let mut starts = Vec::new();
        let mut at = 100;
        for l in &lens {
            starts.push((at, at + l));
            at += l;
        }
        let mut perm: Vec<usize> = (0..lens.len()).collect();
        let mut x = order | 1;
        for i in (1..perm.len()).rev() {
            x ^= x << 13;
            x ^= x >> 7;
            x ^= x << 17;
            perm.swap(i, (x % (i as u64 + 1)) as usize);
        }
        let mut t = PrefixTracker::new(100);
        let mut done = vec![false; lens.len()];
        for &i in &perm {
            t.complete(starts[i].0, starts[i].1).unwrap();
            done[i] = true;
            let k = done.iter().take_while(|d| **d).count();
            let want = if k == 0 { 100 } else { starts[k - 1].1 };
            prop_assert_eq!(t.base(), want);
        }
        prop_assert_eq!(t.base(), at);
    }

    #[test]
    fn histogram_conserves_counts(values in prop::collection::vec(0u64..500, 1..200), bin in 1u64..40) {
        let h = histogram(&values, bin);
        prop_assert_eq!(h.iter().map(|b| b.1).sum::<u64>(), values.len() as u64);
        prop_assert!(h.windows(2).all(|w| w[1].0 == w[0].0 + bin));
        for m in modes(&h) {
            prop_assert!(h.iter().any(|b| b.0 == m && b.1 > 0));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn measurement_is_idempotent(sel in selector()) {
        let p = MeasureParams::default();
        let profile = least_capable_profile(sel);
        prop_assert_eq!(measure(sel, &profile, &p).unwrap(), measure(sel, &profile, &p).unwrap());
    }
}
