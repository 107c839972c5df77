use rdmachan::chan::{declared, open_channel, ChannelConfig, Selector};
use rdmachan::workload::{run, RecvMode, SizeDist, Workload};
use rdmachan::{Fabric, TransportProfile};

fn profiles() -> Vec<TransportProfile> {
    vec![TransportProfile::ib_roce(), TransportProfile::efa(), TransportProfile::one_rma()]
}

fn compatible(sel: Selector) -> Vec<TransportProfile> {
    let spec = declared(sel).effective();
    profiles()
        .into_iter()
        .filter(|p| {
            let f = Fabric::new(p.clone(), 0, Default::default());
            rdmachan::chan::check_requirements(&spec, &f).is_ok()
        })
        .collect()
}

fn topology(sel: Selector) -> (usize, usize) {
    if sel.native_multi_sender() {
        (3, 1)
    } else if sel.native_multi_reader() {
        (1, 3)
    } else {
        (1, 1)
    }
}

fn deliver(
    sel: Selector,
    p: &TransportProfile,
    seed: u64,
    count: u64,
    mode: RecvMode,
    hold: usize,
) -> Result<(), String> {
    let mut f = Fabric::new(p.clone(), seed, Default::default());
    let (ns, nr) = topology(sel);
    let s: Vec<_> = (0..ns).map(|_| f.add_endpoint()).collect();
    let r: Vec<_> = (0..nr).map(|_| f.add_endpoint()).collect();
    let cfg = ChannelConfig { slot_size: 512, ring_capacity: 4096, ..Default::default() };
    let mut ch = open_channel(sel, &mut f, &s, &r, &cfg).unwrap();
    let w = Workload { seed, count, sizes: SizeDist::Uniform(1, 1024), recv_mode: mode, hold, ..Default::default() };
    let rep = run(&mut f, &mut ch, &w).map_err(|e| format!("{sel} on {}: {e}", p.cli_name()))?;
    if !rep.clean() {
        return Err(format!(
            "{sel} on {}: delivered {}/{} corrupt {} duplicates {} out of order {}",
            p.cli_name(),
            rep.delivered,
            rep.expected,
            rep.corrupt,
            rep.duplicates,
            rep.out_of_order
        ));
    }
    Ok(())
}

fn report(errs: Vec<String>) {
    assert!(errs.is_empty(), "{}", errs.join("\n"));
}

#[test]
fn every_channel_delivers_on_every_compatible_profile() {
    let mut errs = Vec::new();
    for sel in Selector::ALL {
        let ps = compatible(sel);
        assert!(!ps.is_empty(), "{sel} has no compatible profile");
        for p in &ps {
            errs.extend(deliver(sel, p, 1, 500, RecvMode::Region, 3).err());
        }
    }
    report(errs);
}

#[test]
fn option_path_delivers() {
    let mut errs = Vec::new();
    for sel in Selector::ALL {
        let ps = compatible(sel);
        let mut f = Fabric::new(ps[0].clone(), 0, Default::default());
        let (a, b) = (f.add_endpoint(), f.add_endpoint());
        let ch = open_channel(sel, &mut f, &[a], &[b], &ChannelConfig::default()).unwrap();
        if ch.receivers[0].supports_options() {
            errs.extend(deliver(sel, &ps[0], 2, 300, RecvMode::Option, 0).err());
        }
    }
    report(errs);
}
