use super::*;
use crate::memory::{Access, Location};

fn pair(profile: TransportProfile) -> (Fabric, EndpointId, EndpointId, QpId, QpId) {
    let mut f = Fabric::new(profile, 7, FabricConfig::default());
    let a = f.add_endpoint();
    let b = f.add_endpoint();
    let (qa, qb) = f.connect_endpoints(a, b);
    (f, a, b, qa, qb)
}

fn rt(ep: EndpointId, region: RegionId, offset: u64) -> RemoteTarget {
    RemoteTarget { endpoint: ep, region, offset }
}

#[test]
fn send_lands_in_posted_recv() {
    let (mut f, a, b, qa, qb) = pair(TransportProfile::ib_roce());
    let src = f.register(a, 64, Access::NONE, Location::Host).unwrap();
    let dst = f.register(b, 64, Access::LOCAL_WRITE, Location::Host).unwrap();
    f.store(src, 0, b"hello").unwrap();
    f.post(qb, WorkRequest::recv(9, vec![Sge::new(dst, 8, 32)])).unwrap();
    f.post(qa, WorkRequest::send_imm(1, vec![Sge::new(src, 0, 5)], 77)).unwrap();

    let cq_b = f.qp_config(qb).unwrap().recv_cq;
    let ev = f.wait_cq(cq_b).unwrap();
    assert_eq!((ev.wr_id, ev.byte_len, ev.imm, ev.tick), (9, 5, Some(77), 10));
    assert_eq!(f.load(dst, 8, 5).unwrap(), b"hello");
    let sc = f.wait_cq(f.qp_config(qa).unwrap().send_cq).unwrap();
    assert!(sc.is_ok());
    assert_eq!(f.counters(a).hrts_traversed, 1);
}

#[test]
fn unsignaled_send_without_recv_still_reports_failure() {
    let (mut f, a, _b, qa, _qb) = pair(TransportProfile::ib_roce());
    let src = f.register(a, 8, Access::NONE, Location::Host).unwrap();
    f.post(qa, WorkRequest::send(1, vec![Sge::new(src, 0, 8)]).unsignaled()).unwrap();
    let ev = f.wait_cq(f.qp_config(qa).unwrap().send_cq).unwrap();
    assert_eq!(ev.status, Status::RemoteNoReceive);
}

#[test]
fn unsupported_verb_completes_immediately() {
    let (mut f, a, b, qa, _qb) = pair(TransportProfile::efa());
    let src = f.register(a, 8, Access::NONE, Location::Host).unwrap();
    let dst = f.register(b, 8, Access::REMOTE_WRITE, Location::Host).unwrap();
    f.post(qa, WorkRequest::write(3, vec![Sge::new(src, 0, 8)], rt(b, dst, 0))).unwrap();
    let cq = f.qp_config(qa).unwrap().send_cq;
    let ev = f.poll_one(cq).expect("synchronous completion");
    assert_eq!((ev.status, ev.tick), (Status::Unsupported, 0));
}

#[test]
fn write_and_read_latency() {
    let (mut f, a, b, qa, _qb) = pair(TransportProfile::ib_roce());
    let src = f.register(a, 16, Access::LOCAL_WRITE, Location::Host).unwrap();
    let dst = f.register(b, 16, Access::REMOTE_WRITE | Access::REMOTE_READ, Location::Host).unwrap();
    f.store(src, 0, &[5; 16]).unwrap();
    let cq = f.qp_config(qa).unwrap().send_cq;
    f.post(qa, WorkRequest::write(1, vec![Sge::new(src, 0, 16)], rt(b, dst, 0))).unwrap();
    assert_eq!(f.wait_cq(cq).unwrap().tick, 10);
    assert_eq!(f.load(dst, 0, 16).unwrap(), vec![5; 16]);

    f.store(dst, 0, &[6; 16]).unwrap();
    f.post(qa, WorkRequest::read(2, vec![Sge::new(src, 0, 16)], rt(b, dst, 0))).unwrap();
    assert_eq!(f.wait_cq(cq).unwrap().tick, 30);
    assert_eq!(f.load(src, 0, 16).unwrap(), vec![6; 16]);
}

#[test]
fn emulated_write_costs_four_traversals() {
    let (mut f, a, b, qa, _qb) = pair(TransportProfile::one_rma());
    let src = f.register(a, 8, Access::NONE, Location::Host).unwrap();
    let dst = f.register(b, 8, Access::REMOTE_WRITE, Location::Host).unwrap();
    f.post(qa, WorkRequest::write(1, vec![Sge::new(src, 0, 8)], rt(b, dst, 0))).unwrap();
    let ev = f.wait_cq(f.qp_config(qa).unwrap().send_cq).unwrap();
    assert_eq!(ev.tick, 40);
    assert_eq!(f.counters(a).hrts_traversed, 4);
    assert_eq!(f.counters(a).emulated_read_trips, 2);
}

#[test]
fn pcie_round_trip_only_for_host_targets() {
    let cfg = FabricConfig { clock: ClockParams { hrt_cost: 10, pcie_rt: 3 }, ..Default::default() };
    let mut f = Fabric::new(TransportProfile::ib_roce(), 0, cfg);
    let a = f.add_endpoint();
    let b = f.add_endpoint();
    let (qa, _) = f.connect_endpoints(a, b);
    let res = f.register(a, 8, Access::LOCAL_WRITE, Location::Host).unwrap();
    let host = f.register(b, 8, Access::REMOTE_ATOMIC, Location::Host).unwrap();
    let dev = f.register(b, 8, Access::REMOTE_ATOMIC, Location::Device).unwrap();
    let cq = f.qp_config(qa).unwrap().send_cq;
    f.post(qa, WorkRequest::fetch_add(1, Sge::new(res, 0, 8), rt(b, host, 0), 1)).unwrap();
    assert_eq!(f.wait_cq(cq).unwrap().tick, 23);
    let t0 = f.now();
    f.post(qa, WorkRequest::fetch_add(2, Sge::new(res, 0, 8), rt(b, dev, 0), 1)).unwrap();
    assert_eq!(f.wait_cq(cq).unwrap().tick - t0, 20);
}

#[test]
fn access_matrix() {
    // Each opcode succeeds only when the target carries its own flag.
    let flags = [Access::REMOTE_WRITE, Access::REMOTE_READ, Access::REMOTE_ATOMIC, Access::LOCAL_WRITE];
    let ops = [Opcode::Write, Opcode::WriteImm, Opcode::Read, Opcode::FetchAdd, Opcode::CmpSwap];
    for flag in flags {
        for op in ops {
            let (mut f, a, b, qa, qb) = pair(TransportProfile::ib_roce());
            let local = f.register(a, 8, Access::LOCAL_WRITE, Location::Host).unwrap();
            let target = f.register(b, 8, flag, Location::Host).unwrap();
            f.post(qb, WorkRequest::recv(0, vec![])).unwrap();
            let sge = Sge::new(local, 0, 8);
            let r = rt(b, target, 0);
            let wr = match op {
                Opcode::Write => WorkRequest::write(1, vec![sge], r),
                Opcode::WriteImm => WorkRequest::write_imm(1, vec![sge], r, 0),
                Opcode::Read => WorkRequest::read(1, vec![sge], r),
                Opcode::FetchAdd => WorkRequest::fetch_add(1, sge, r, 1),
                _ => WorkRequest::cmp_swap(1, sge, r, 0, 1),
            };
            f.post(qa, wr).unwrap();
            let ev = f.wait_cq(f.qp_config(qa).unwrap().send_cq).unwrap();
            let want = Access::required_for(op).unwrap() == flag;
            assert_eq!(ev.is_ok(), want, "{op} on {flag:?}");
            if !want {
                assert_eq!(ev.status, Status::AccessError);
            }
        }
    }
}

#[test]
fn structural_errors_are_synchronous() {
    let (mut f, a, b, qa, _qb) = pair(TransportProfile::ib_roce());
    let local = f.register(a, 4096, Access::LOCAL_WRITE, Location::Host).unwrap();
    let target = f.register(b, 16, Access::ALL, Location::Host).unwrap();
    let sge = Sge::new(local, 0, 8);
    let bad = WorkRequest::fetch_add(1, sge, rt(b, target, 4), 1);
    assert!(matches!(f.post(qa, bad), Err(FabricError::InvalidRequest(_))));
    let many = vec![Sge::new(local, 0, 1); 17];
    assert_eq!(f.post(qa, WorkRequest::send(1, many)), Err(FabricError::TooManySges(17)));
    let mut no_remote = WorkRequest::read(1, vec![sge], rt(b, target, 0));
    no_remote.remote = None;
    assert!(f.post(qa, no_remote).is_err());
}

#[test]
fn atomic_chain_is_linearizable() {
    let mut f = Fabric::new(TransportProfile::ib_roce(), 3, FabricConfig::default());
    let home = f.add_endpoint();
    let word = f.register(home, 8, Access::REMOTE_ATOMIC, Location::Device).unwrap();
    let mut qps = Vec::new();
    for _ in 0..4 {
        let e = f.add_endpoint();
        let res = f.register(e, 8 * 25, Access::LOCAL_WRITE, Location::Host).unwrap();
        let (q, _) = f.connect_endpoints(e, home);
        qps.push((q, res));
    }
    for i in 0..25u64 {
        for &(q, res) in &qps {
            f.post(q, WorkRequest::fetch_add(i, Sge::new(res, i * 8, 8), rt(home, word, 0), 3)).unwrap();
        }
    }
    f.run_until_idle();
    let mut olds = Vec::new();
    for &(q, _) in &qps {
        olds.extend(f.poll_cq(f.qp_config(q).unwrap().send_cq, 100).iter().map(|e| e.atomic_old_value.unwrap()));
    }
    olds.sort_unstable();
    assert_eq!(olds, (0..100).map(|k| 3 * k).collect::<Vec<_>>());
    assert_eq!(f.load_u64(word, 0).unwrap(), 300);
}

#[test]
fn in_order_profile_rejects_reordering() {
    let (mut f, ..) = pair(TransportProfile::ib_roce());
    assert!(f.inject_reorder(ReorderPolicy::ShuffleMessages, 8, false).is_err());
    assert!(f.inject_reorder(ReorderPolicy::ShuffleMessages, 8, true).is_ok());
    let (mut g, ..) = pair(TransportProfile::efa());
    assert!(g.inject_reorder(ReorderPolicy::ShuffleMessages, 8, false).is_ok());
}

#[test]
fn shuffled_bytes_arrive_before_completion() {
    let mut seen_high_first = false;
    for seed in 0..32 {
        let cfg = FabricConfig { chunk_size: 64, ..Default::default() };
        let mut f = Fabric::new(TransportProfile::one_rma(), seed, cfg);
        let a = f.add_endpoint();
        let b = f.add_endpoint();
        let (qa, _) = f.connect_endpoints(a, b);
        f.inject_reorder(ReorderPolicy::ShuffleBytes, 1, false).unwrap();
        let src = f.register(a, 256, Access::NONE, Location::Host).unwrap();
        let dst = f.register(b, 256, Access::REMOTE_WRITE, Location::Host).unwrap();
        f.store(src, 0, &[1; 256]).unwrap();
        f.post(qa, WorkRequest::write(1, vec![Sge::new(src, 0, 256)], rt(b, dst, 0))).unwrap();
        let cq = f.qp_config(qa).unwrap().send_cq;
        while f.cq_len(cq) == 0 {
            let first = f.load(dst, 0, 1).unwrap()[0];
            let last = f.load(dst, 255, 1).unwrap()[0];
            seen_high_first |= last == 1 && first == 0;
            assert!(f.advance());
        }
        assert_eq!(f.load(dst, 0, 256).unwrap(), vec![1; 256]);
    }
    assert!(seen_high_first);
}

#[test]
fn identical_seeds_yield_identical_traces() {
    let run = || {
        let (mut f, a, b, qa, qb) = pair(TransportProfile::efa());
        f.enable_trace();
        f.inject_reorder(ReorderPolicy::ShuffleMessages, 20, false).unwrap();
        let src = f.register(a, 64, Access::NONE, Location::Host).unwrap();
        let dst = f.register(b, 64 * 16, Access::LOCAL_WRITE, Location::Host).unwrap();
        for i in 0..16 {
            f.post(qb, WorkRequest::recv(i, vec![Sge::new(dst, i * 64, 64)])).unwrap();
            f.post(qa, WorkRequest::send_imm(i, vec![Sge::new(src, 0, 64)], i as u32)).unwrap();
        }
        f.run_until_idle();
        f.trace().unwrap().to_string()
    };
    assert_eq!(run(), run());
    assert!(run().lines().count() >= 32);
}

#[test]
fn srq_serves_many_qps() {
    let mut f = Fabric::new(TransportProfile::ib_roce(), 0, FabricConfig::default());
    let rx = f.add_endpoint();
    let srq = f.create_srq(rx);
    let rcq = f.create_cq(rx);
    let buf = f.register(rx, 256, Access::LOCAL_WRITE, Location::Host).unwrap();
    for i in 0..4 {
        f.post_srq_recv(srq, WorkRequest::recv(i, vec![Sge::new(buf, i * 64, 64)])).unwrap();
    }
    for _ in 0..4 {
        let tx = f.add_endpoint();
        let scq = f.create_cq(tx);
        let q = f.create_qp(tx, QpConfig { send_cq: scq, recv_cq: scq, srq: None });
        let r = f.create_qp(rx, QpConfig { send_cq: rcq, recv_cq: rcq, srq: Some(srq) });
        f.connect(q, r).unwrap();
        let src = f.register(tx, 8, Access::NONE, Location::Host).unwrap();
        f.post(q, WorkRequest::send(0, vec![Sge::new(src, 0, 8)])).unwrap();
    }
    f.run_until_idle();
    assert_eq!(f.poll_cq(rcq, 10).len(), 4);
    assert_eq!(f.srq_depth(srq), 0);
}

#[test]
fn wait_reports_global_stall() {
    let (mut f, _a, _b, qa, _qb) = pair(TransportProfile::ib_roce());
    assert_eq!(f.wait_cq(f.qp_config(qa).unwrap().send_cq), Err(FabricError::Stall));
}
