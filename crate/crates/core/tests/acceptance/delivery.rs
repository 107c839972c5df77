use rdmachan::chan::ring::{record_advance, Variant};
use rdmachan::chan::{check_requirements, declared, open_channel, ChanError, ChannelConfig, Selector};
use rdmachan::metrics::measure::shuffle_run;
use rdmachan::workload::{message_len, run, RunReport, SizeDist, Workload};
use rdmachan::{EndpointId, Fabric, FabricConfig, ReorderPolicy, TransportProfile};

use crate::{ensure, Outcome};

const FUZZ_SEEDS: u64 = 10;
const FUZZ_MESSAGES: u64 = 100_000;
const SHUFFLE_SEEDS: u64 = 32;
const SHUFFLE_MESSAGES: u64 = 300;
const COMPLIANT_MESSAGES: u64 = 1_000_000;

fn profiles() -> [TransportProfile; 3] {
    [TransportProfile::ib_roce(), TransportProfile::efa(), TransportProfile::one_rma()]
}

/// One sender, one receiver; returns the report and the receiver's fabric.
fn run_pair(
    sel: Selector,
    profile: &TransportProfile,
    w: &Workload,
) -> Result<(RunReport, Fabric, u64, EndpointId), String> {
    let mut fab = Fabric::new(profile.clone(), w.seed, FabricConfig::default());
    let (a, b) = (fab.add_endpoint(), fab.add_endpoint());
    let mut ch = open_channel(sel, &mut fab, &[a], &[b], &ChannelConfig::default()).map_err(|e| e.to_string())?;
    let max = ch.senders[0].max_message_size();
    let w = Workload { sizes: SizeDist::Uniform(1, max), ..w.clone() };
    let rep = run(&mut fab, &mut ch, &w).map_err(|e| e.to_string())?;
    Ok((rep, fab, max, b))
}

pub fn fuzz() -> Outcome {
    let mut pairs = 0;
    let mut total = 0u64;
    for sel in Selector::ALL {
        for profile in profiles() {
            let probe = Fabric::new(profile.clone(), 0, FabricConfig::default());
            if check_requirements(&declared(sel).effective(), &probe).is_err() {
                continue;
            }
            pairs += 1;
            for seed in 0..FUZZ_SEEDS {
                let w = Workload {
                    seed,
                    count: FUZZ_MESSAGES,
                    outstanding: 1 + seed as usize % 8,
                    hold: seed as usize % 4,
                    ..Default::default()
                };
                let name = profile.cli_name();
                let (rep, ..) = run_pair(sel, &profile, &w).map_err(|e| format!("{sel} on {name} seed {seed}: {e}"))?;
                ensure(rep.clean(), || {
                    format!(
                        "{sel} on {name} seed {seed}: delivered {}/{} corrupt {} duplicates {} out of order {}",
                        rep.delivered, rep.expected, rep.corrupt, rep.duplicates, rep.out_of_order
                    )
                })?;
                total += rep.delivered;
            }
        }
    }
    Ok(format!("{pairs} channel/profile pairs x {FUZZ_SEEDS} seeds, {total} messages exactly once in FIFO order"))
}

pub fn nozeroing_equivalence() -> Outcome {
    let ib = TransportProfile::ib_roce();
    let mut record_bytes = 0;
    for seed in 0..FUZZ_SEEDS {
        let w = Workload { seed, count: FUZZ_MESSAGES, outstanding: 4, record_deliveries: true, ..Default::default() };
        let (z, zfab, max, rx) = run_pair(Selector::RingZeroing, &ib, &w)?;
        let (n, nfab, nmax, _) = run_pair(Selector::RingNoZeroing, &ib, &w)?;
        ensure(max == nmax, || format!("maximum sizes differ: {max} vs {nmax}"))?;
        ensure(z.clean() && n.clean(), || format!("seed {seed}: unclean run"))?;
        ensure(z.deliveries == n.deliveries, || format!("seed {seed}: delivered streams differ"))?;
        let want: u64 = (0..FUZZ_MESSAGES)
            .map(|k| record_advance(Variant::Zeroing, message_len(SizeDist::Uniform(1, max), max, seed, 0, k)))
            .sum::<u64>();
        let (zz, nz) = (zfab.counters(rx).zeroed_bytes, nfab.counters(rx).zeroed_bytes);
        ensure(zz == want && nz == 0, || format!("seed {seed}: zeroed {zz} (want {want}) and {nz} (want 0)"))?;
        record_bytes += want;
    }
    Ok(format!(
        "{FUZZ_SEEDS} seeds x {FUZZ_MESSAGES} messages: identical streams; zeroing cleared {record_bytes} B, no-zeroing 0 B"
    ))
}

pub fn ordering_enforcement() -> Outcome {
    let cfg = ChannelConfig::default();
    // A record landing early has its length word cleared by the late
    // record before it, so the damage shows as lost records and a stalled
    // receiver as often as mismatched payloads.
    let (mut broken, mut mismatched) = (0, 0);
    for seed in 0..SHUFFLE_SEEDS {
        let o = shuffle_run(Selector::RingNoZeroing, ReorderPolicy::ShuffleMessages, seed, SHUFFLE_MESSAGES, &cfg)
            .map_err(|e| e.to_string())?;
        broken += u64::from(o.broken());
        mismatched += u64::from(o.corrupt > 0);
    }
    ensure(broken >= 1, || format!("no corruption detected in {SHUFFLE_SEEDS} shuffled seeds"))?;
    let w = Workload { seed: 7, count: COMPLIANT_MESSAGES, outstanding: 8, ..Default::default() };
    let (rep, ..) = run_pair(Selector::RingNoZeroing, &TransportProfile::ib_roce(), &w)?;
    ensure(rep.clean(), || format!("compliant run: corrupt {} of {}", rep.corrupt, rep.expected))?;
    for p in [TransportProfile::efa(), TransportProfile::one_rma()] {
        let mut fab = Fabric::new(p.clone(), 0, FabricConfig::default());
        let (a, b) = (fab.add_endpoint(), fab.add_endpoint());
        let r = open_channel(Selector::RingNoZeroing, &mut fab, &[a], &[b], &cfg);
        ensure(matches!(r, Err(ChanError::RequirementUnmet(_))), || format!("{} was not rejected", p.cli_name()))?;
    }
    Ok(format!(
        "corruption flagged in {broken}/{SHUFFLE_SEEDS} shuffled seeds ({mismatched} with bad payloads), 0 in {COMPLIANT_MESSAGES} compliant messages, efa and 1rma rejected"
    ))
}
