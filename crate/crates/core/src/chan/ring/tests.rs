use super::*;
use crate::fabric::TransportProfile;
use crate::memory::hexdump;

fn setup(variant: Variant, cap: u64) -> (Fabric, RingSender, RingReceiver, RegionId) {
    let mut f = Fabric::new(TransportProfile::ib_roce(), 0, Default::default());
    let s = f.add_endpoint();
    let r = f.add_endpoint();
    let cfg = ChannelConfig { ring_capacity: cap, ..Default::default() };
    let (tx, rx) = open_concrete(&mut f, s, r, &cfg, variant).unwrap();
    let app = f.register_app(s, 4096, Access::LOCAL_WRITE).unwrap();
    (f, tx, rx, app)
}

fn send(f: &mut Fabric, tx: &mut RingSender, app: RegionId, bytes: &[u8]) {
    f.store(app, 0, bytes).unwrap();
    tx.send_region(f, Region::app(app, 0, bytes.len() as u64)).unwrap();
    f.run_until_idle();
}

fn recv(f: &mut Fabric, rx: &mut RingReceiver) -> Option<Vec<u8>> {
    let r = rx.receive_region(f).unwrap()?;
    let out = f.load(r.region, r.offset, r.len).unwrap();
    rx.free_receive_region(f, r).unwrap();
    Some(out)
}

#[test]
fn nozeroing_bells_step_down() {
    let cap = 256;
    let (mut f, mut tx, mut rx, app) = setup(Variant::NoZeroing, cap);
    for k in 0..3u8 {
        send(&mut f, &mut tx, app, &[k + 1; 8]);
    }
    let b0 = cap - 4;
    for (k, b) in [b0, b0 - 12, b0 - 24].into_iter().enumerate() {
        assert_eq!(nozero_bell(cap, 12 * k as u64), b);
        assert_eq!(f.load_u32(rx.ring, b).unwrap(), 8);
        assert_eq!(f.load(rx.ring, b - 8, 8).unwrap(), vec![k as u8 + 1; 8]);
    }
    assert_eq!(f.load_u32(rx.ring, b0 - 36).unwrap(), 0);
    for k in 0..3u8 {
        assert_eq!(recv(&mut f, &mut rx).unwrap(), vec![k + 1; 8]);
    }
    assert_eq!(f.counters(rx.ep).zeroed_bytes, 0);
}

#[test]
fn nozeroing_golden_layout() {
    let (mut f, mut tx, rx, app) = setup(Variant::NoZeroing, 64);
    send(&mut f, &mut tx, app, b"abcdef");
    let raw = f.load(rx.ring, 48, 16).unwrap();
    // zero word, two padding bytes, payload, then the length bell.
    assert_eq!(hexdump(&raw, 48), "00000030: 00 00 00 00 00 00 61 62 63 64 65 66 06 00 00 00\n");
}

#[test]
fn zeroing_golden_layout_and_clear_on_free() {
    let (mut f, mut tx, mut rx, app) = setup(Variant::Zeroing, 64);
    send(&mut f, &mut tx, app, b"abcdef");
    let raw = f.load(rx.ring, 0, 16).unwrap();
    assert_eq!(hexdump(&raw, 0), "00000000: 06 00 00 00 61 62 63 64 65 66 00 00 01 00 00 00\n");
    assert_eq!(recv(&mut f, &mut rx).unwrap(), b"abcdef");
    assert!(f.load(rx.ring, 0, 64).unwrap().iter().all(|b| *b == 0));
    assert_eq!(f.counters(rx.ep).zeroed_bytes, 16);
}

#[test]
fn detached_record_and_head() {
    let (mut f, mut tx, mut rx, app) = setup(Variant::Detached, 1024);
    send(&mut f, &mut tx, app, &[7; 64]);
    assert_eq!(f.load_u64(rx.bell.unwrap(), 0).unwrap(), 68);
    assert_eq!(f.counters(tx.ep).channel_requests(), 2);
    assert_eq!(recv(&mut f, &mut rx).unwrap(), vec![7; 64]);
}

#[test]
fn records_wrap_around_the_end() {
    for v in [Variant::Detached, Variant::Imm, Variant::Zeroing, Variant::NoZeroing] {
        let (mut f, mut tx, mut rx, app) = setup(v, 64);
        for k in 0..40u8 {
            let msg: Vec<u8> = (0..(k % 13 + 1)).map(|i| k ^ i).collect();
            send(&mut f, &mut tx, app, &msg);
            rx.progress(&mut f).unwrap();
            assert_eq!(recv(&mut f, &mut rx).unwrap(), msg, "{v:?} message {k}");
            rx.progress(&mut f).unwrap();
            f.run_until_idle();
        }
    }
}

#[test]
fn credit_blocks_until_free() {
    let (mut f, mut tx, mut rx, app) = setup(Variant::Zeroing, 64);
    f.store(app, 0, &[1; 16]).unwrap();
    let m = Region::app(app, 0, 16);
    for _ in 0..2 {
        tx.send_region(&mut f, m).unwrap();
    }
    assert_eq!(tx.send_region(&mut f, m), Err(ChanError::NoCredit));
    f.run_until_idle();
    // Acks are batched until the receiver goes idle.
    assert!(recv(&mut f, &mut rx).is_some());
    rx.progress(&mut f).unwrap();
    f.run_until_idle();
    assert_eq!(tx.send_region(&mut f, m), Err(ChanError::NoCredit));
    assert!(recv(&mut f, &mut rx).is_some());
    rx.progress(&mut f).unwrap();
    f.run_until_idle();
    assert!(tx.send_region(&mut f, m).is_ok());
    assert_eq!(tx.send_region(&mut f, Region::app(app, 0, 17)), Err(ChanError::MessageTooLarge { len: 17, max: 16 }));
}
