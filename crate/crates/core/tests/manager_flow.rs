//! Manager state-machine behavior: validation, queueing, scheduling, and
//! response ordering, driven in-process exactly as the socket server drives
//! it.

use grd_core::interp::ArgValue;
use grd_core::manager::wire::{Response, Status, WireMessage};
use grd_core::manager::{ConnId, Manager, ManagerConfig, TaskKind};
use grd_core::palloc::{DEFAULT_DEVICE_BASE, DEFAULT_DEVICE_SIZE};

const STORE_TID: &str = include_str!("fixtures/store_tid.ptx");

fn manager() -> Manager {
    Manager::new(ManagerConfig::default()).unwrap()
}

fn expect_one(responses: Vec<(ConnId, Response)>) -> Response {
    assert_eq!(
        responses.len(),
        1,
        "expected exactly one deliverable response"
    );
    responses.into_iter().next().unwrap().1
}

fn init(m: &mut Manager, conn: ConnId, bytes: u64) -> (u64, u64, u64) {
    let r = expect_one(m.submit(conn, WireMessage::Init { req_bytes: bytes }));
    assert_eq!(r.status, Status::Ok, "{}", r.message());
    let at = |i: usize| u64::from_le_bytes(r.payload[i * 8..i * 8 + 8].try_into().unwrap());
    (at(0), at(1), at(2))
}

#[test]
fn init_then_malloc_returns_partition_base() {
    let mut m = manager();
    m.connect(ConnId(1));
    let (app, base, size) = init(&mut m, ConnId(1), 16 << 20);
    assert_eq!(app, 1);
    assert_eq!(base, DEFAULT_DEVICE_BASE);
    assert_eq!(size, 16 << 20);
    let r = expect_one(m.submit(ConnId(1), WireMessage::Malloc { size: 1024 }));
    assert_eq!(r.status, Status::Ok);
    assert_eq!(u64::from_le_bytes(r.payload[..8].try_into().unwrap()), base);
}

#[test]
fn requests_before_init_get_no_partition() {
    let mut m = manager();
    m.connect(ConnId(1));
    let r = expect_one(m.submit(ConnId(1), WireMessage::Malloc { size: 64 }));
    assert_eq!(r.status, Status::NoPartition);
    let r = expect_one(m.submit(ConnId(1), WireMessage::Init { req_bytes: 4096 }));
    assert_eq!(r.status, Status::Ok);
    let r = expect_one(m.submit(ConnId(1), WireMessage::Init { req_bytes: 4096 }));
    assert_eq!(r.status, Status::DuplicateInit);
}

#[test]
fn h2d_d2h_round_trip() {
    let mut m = manager();
    m.connect(ConnId(1));
    let (_, base, _) = init(&mut m, ConnId(1), 4096);
    let payload = vec![7u8; 64];
    let r = expect_one(m.submit(
        ConnId(1),
        WireMessage::MemcpyH2d {
            dst: base,
            bytes: payload.clone(),
        },
    ));
    assert_eq!(r.status, Status::Ok);
    let r = expect_one(m.submit(ConnId(1), WireMessage::MemcpyD2h { src: base, len: 64 }));
    assert_eq!(r.status, Status::Ok);
    assert_eq!(r.payload, payload);
}

#[test]
fn boundary_crossing_h2d_is_rejected_and_neighbor_untouched() {
    let mut m = manager();
    m.connect(ConnId(1));
    m.connect(ConnId(2));
    let (_, base1, size1) = init(&mut m, ConnId(1), 4096);
    let (_, base2, _) = init(&mut m, ConnId(2), 4096);
    assert_eq!(
        base2,
        base1 + size1,
        "partitions are adjacent in this layout"
    );

    // Straddles the shared edge by 32 bytes.
    let r = expect_one(m.submit(
        ConnId(1),
        WireMessage::MemcpyH2d {
            dst: base1 + size1 - 32,
            bytes: vec![0xAA; 64],
        },
    ));
    assert_eq!(r.status, Status::OobTransfer);

    // The neighbor's first 32 bytes read back untouched, and the sender's
    // last 32 bytes were not partially written.
    let r = expect_one(m.submit(
        ConnId(2),
        WireMessage::MemcpyD2h {
            src: base2,
            len: 32,
        },
    ));
    assert_eq!(r.payload, vec![0u8; 32]);
    let r = expect_one(m.submit(
        ConnId(1),
        WireMessage::MemcpyD2h {
            src: base1 + size1 - 32,
            len: 32,
        },
    ));
    assert_eq!(r.payload, vec![0u8; 32]);
}

#[test]
fn d2d_validates_both_ends() {
    let mut m = manager();
    m.connect(ConnId(1));
    m.connect(ConnId(2));
    let (_, base1, _) = init(&mut m, ConnId(1), 4096);
    let (_, base2, _) = init(&mut m, ConnId(2), 4096);

    // In-partition copy succeeds.
    expect_one(m.submit(
        ConnId(1),
        WireMessage::MemcpyH2d {
            dst: base1,
            bytes: vec![3; 16],
        },
    ));
    let none = m.submit(
        ConnId(1),
        WireMessage::MemcpyD2d {
            dst: base1 + 256,
            src: base1,
            len: 16,
        },
    );
    assert!(none.is_empty(), "d2d queues until dispatched");
    let r = expect_one(m.dispatch_until_idle());
    assert_eq!(r.status, Status::Ok);
    let r = expect_one(m.submit(
        ConnId(1),
        WireMessage::MemcpyD2h {
            src: base1 + 256,
            len: 16,
        },
    ));
    assert_eq!(r.payload, vec![3; 16]);

    // Cross-partition destination is rejected at dispatch.
    m.submit(
        ConnId(1),
        WireMessage::MemcpyD2d {
            dst: base2,
            src: base1,
            len: 16,
        },
    );
    let r = expect_one(m.dispatch_until_idle());
    assert_eq!(r.status, Status::OobTransfer);
}

#[test]
fn launch_requires_loaded_kernel_and_leaves_queue_unchanged() {
    let mut m = manager();
    m.connect(ConnId(1));
    init(&mut m, ConnId(1), 1 << 20);
    let r = expect_one(m.submit(
        ConnId(1),
        WireMessage::Launch {
            name: "ghost".into(),
            grid: 1,
            block: 1,
            args: vec![],
        },
    ));
    assert_eq!(r.status, Status::UnknownKernel);
    assert!(!m.has_pending_tasks());
}

#[test]
fn load_module_registers_and_replaces() {
    let mut m = manager();
    m.connect(ConnId(1));
    init(&mut m, ConnId(1), 1 << 20);
    let r = expect_one(m.submit(
        ConnId(1),
        WireMessage::LoadModule {
            text: STORE_TID.into(),
        },
    ));
    assert_eq!(r.status, Status::Ok);
    assert!(m.symbols().contains("store_tid"));
    // Second load replaces and logs.
    let r = expect_one(m.submit(
        ConnId(1),
        WireMessage::LoadModule {
            text: STORE_TID.into(),
        },
    ));
    assert_eq!(r.status, Status::Ok);
    let events = m.take_events();
    assert!(events.iter().any(|e| e.contains("replaced")), "{events:?}");
}

#[test]
fn symbol_lookup_covers_all_loaded_kernels() {
    let two = "\
.version 7.7
.target sm_86
.address_size 64

.visible .entry a()
{
\tret;
}

.visible .entry b()
{
\tret;
}
";
    let mut m = manager();
    m.connect(ConnId(1));
    init(&mut m, ConnId(1), 4096);
    let r = expect_one(m.submit(ConnId(1), WireMessage::LoadModule { text: two.into() }));
    assert_eq!(r.status, Status::Ok);
    assert!(m.symbols().contains("a"));
    assert!(m.symbols().contains("b"));
    assert!(!m.symbols().contains("c"));
    let r = expect_one(m.submit(
        ConnId(1),
        WireMessage::Launch {
            name: "c".into(),
            grid: 1,
            block: 1,
            args: vec![],
        },
    ));
    assert_eq!(r.status, Status::UnknownKernel);
}

#[test]
fn malformed_module_reports_syntax_error_and_session_survives() {
    let mut m = manager();
    m.connect(ConnId(1));
    init(&mut m, ConnId(1), 4096);
    let r = expect_one(m.submit(
        ConnId(1),
        WireMessage::LoadModule {
            text: "not ptx at all".into(),
        },
    ));
    assert_eq!(r.status, Status::SyntaxError);
    // The session keeps working.
    let r = expect_one(m.submit(ConnId(1), WireMessage::Malloc { size: 64 }));
    assert_eq!(r.status, Status::Ok);
}

#[test]
fn launch_arity_and_width_checks() {
    let mut m = manager();
    m.connect(ConnId(1));
    let (_, base, _) = init(&mut m, ConnId(1), 1 << 20);
    expect_one(m.submit(
        ConnId(1),
        WireMessage::LoadModule {
            text: STORE_TID.into(),
        },
    ));

    let r = expect_one(m.submit(
        ConnId(1),
        WireMessage::Launch {
            name: "store_tid".into(),
            grid: 1,
            block: 1,
            args: vec![],
        },
    ));
    assert_eq!(r.status, Status::BadMessage);

    // A 64-bit integer too large for the .u32 parameter is rejected.
    let r = expect_one(m.submit(
        ConnId(1),
        WireMessage::Launch {
            name: "store_tid".into(),
            grid: 1,
            block: 1,
            args: vec![ArgValue::DevAddr(base), ArgValue::Scalar64(1 << 40)],
        },
    ));
    assert_eq!(r.status, Status::BadMessage);

    // The same value in range coerces and launches.
    m.submit(
        ConnId(1),
        WireMessage::Launch {
            name: "store_tid".into(),
            grid: 1,
            block: 4,
            args: vec![ArgValue::DevAddr(base), ArgValue::Scalar64(9)],
        },
    );
    let r = expect_one(m.dispatch_until_idle());
    assert_eq!(r.status, Status::Ok, "{}", r.message());
}

#[test]
fn responses_deliver_in_request_order() {
    let mut m = manager();
    m.connect(ConnId(1));
    let (_, base, _) = init(&mut m, ConnId(1), 1 << 20);
    expect_one(m.submit(
        ConnId(1),
        WireMessage::LoadModule {
            text: STORE_TID.into(),
        },
    ));

    // A malloc submitted after a queued launch is answered immediately
    // internally, but held until the launch completes.
    m.submit(
        ConnId(1),
        WireMessage::Launch {
            name: "store_tid".into(),
            grid: 1,
            block: 1,
            args: vec![ArgValue::DevAddr(base), ArgValue::Scalar64(0)],
        },
    );
    let held = m.submit(ConnId(1), WireMessage::Malloc { size: 64 });
    assert!(held.is_empty(), "malloc response is held behind the launch");
    let all = m.dispatch_until_idle();
    assert_eq!(all.len(), 2);
    assert_eq!(all[0].1.status, Status::Ok); // launch
    assert_eq!(all[1].1.status, Status::Ok); // malloc, in order
    assert_eq!(
        u64::from_le_bytes(all[1].1.payload[..8].try_into().unwrap()),
        base
    );
}

fn queue_launch(m: &mut Manager, conn: ConnId, base: u64) {
    let out = m.submit(
        conn,
        WireMessage::Launch {
            name: "store_tid".into(),
            grid: 1,
            block: 1,
            args: vec![ArgValue::DevAddr(base), ArgValue::Scalar64(0)],
        },
    );
    assert!(out.is_empty());
}

#[test]
fn round_robin_alternates_between_clients() {
    let mut m = manager();
    m.connect(ConnId(1));
    m.connect(ConnId(2));
    let (_, base_a, _) = init(&mut m, ConnId(1), 1 << 20);
    let (_, base_b, _) = init(&mut m, ConnId(2), 1 << 20);
    expect_one(m.submit(
        ConnId(1),
        WireMessage::LoadModule {
            text: STORE_TID.into(),
        },
    ));

    for _ in 0..4 {
        queue_launch(&mut m, ConnId(1), base_a);
    }
    for _ in 0..4 {
        queue_launch(&mut m, ConnId(2), base_b);
    }
    m.submit(ConnId(1), WireMessage::Sync);
    m.submit(ConnId(2), WireMessage::Sync);
    m.dispatch_until_idle();

    let order: Vec<u64> = m.dispatch_log().iter().map(|e| e.conn.0).collect();
    assert_eq!(order, vec![1, 2, 1, 2, 1, 2, 1, 2]);
}

#[test]
fn skips_empty_queues_preserving_fifo() {
    let mut m = manager();
    m.connect(ConnId(1));
    m.connect(ConnId(2));
    let (_, base_a, _) = init(&mut m, ConnId(1), 1 << 20);
    let (_, base_b, _) = init(&mut m, ConnId(2), 1 << 20);
    expect_one(m.submit(
        ConnId(1),
        WireMessage::LoadModule {
            text: STORE_TID.into(),
        },
    ));

    // Queues: A = [a1, a2], B = [b1]; execution order a1, b1, a2.
    queue_launch(&mut m, ConnId(1), base_a);
    queue_launch(&mut m, ConnId(1), base_a + 256);
    queue_launch(&mut m, ConnId(2), base_b);
    m.dispatch_until_idle();
    let order: Vec<u64> = m.dispatch_log().iter().map(|e| e.conn.0).collect();
    assert_eq!(order, vec![1, 2, 1]);

    // A single non-empty queue is pure FIFO over its own tasks.
    for i in 0..3 {
        queue_launch(&mut m, ConnId(1), base_a + 512 * i);
    }
    m.dispatch_until_idle();
    let tail: Vec<u64> = m.dispatch_log()[3..].iter().map(|e| e.conn.0).collect();
    assert_eq!(tail, vec![1, 1, 1]);
}

#[test]
fn step_limit_fault_is_contained_to_one_client() {
    let spin = "\
.version 7.7
.target sm_86
.address_size 64

.visible .entry spin()
{
LOOP:
\tbra LOOP;
}
";
    let cfg = ManagerConfig {
        step_limit: 5_000,
        ..ManagerConfig::default()
    };
    let mut m = Manager::new(cfg).unwrap();
    m.connect(ConnId(1));
    m.connect(ConnId(2));
    init(&mut m, ConnId(1), 1 << 20);
    let (_, base_b, _) = init(&mut m, ConnId(2), 1 << 20);
    expect_one(m.submit(ConnId(1), WireMessage::LoadModule { text: spin.into() }));
    expect_one(m.submit(
        ConnId(2),
        WireMessage::LoadModule {
            text: STORE_TID.into(),
        },
    ));

    let out = m.submit(
        ConnId(1),
        WireMessage::Launch {
            name: "spin".into(),
            grid: 1,
            block: 1,
            args: vec![],
        },
    );
    assert!(out.is_empty());
    queue_launch(&mut m, ConnId(2), base_b);
    queue_launch(&mut m, ConnId(2), base_b + 256);

    let all = m.dispatch_until_idle();
    let spin_response = all.iter().find(|(c, _)| *c == ConnId(1)).unwrap();
    assert_eq!(spin_response.1.status, Status::LaunchFault);
    assert!(spin_response.1.message().contains("step limit"));
    let ok_count = all
        .iter()
        .filter(|(c, r)| *c == ConnId(2) && r.status == Status::Ok)
        .count();
    assert_eq!(ok_count, 2, "the other client's tasks all complete");
}

#[test]
fn shutdown_with_empty_queues_drains_cleanly() {
    let mut m = manager();
    m.connect(ConnId(1));
    init(&mut m, ConnId(1), 4096);
    let r = expect_one(m.submit(ConnId(1), WireMessage::Shutdown));
    assert_eq!(r.status, Status::Ok);
    assert!(m.shutdown_requested());
    assert!(!m.has_pending_tasks());
}

#[test]
fn disconnect_frees_partition_for_reuse() {
    let mut m = manager();
    m.connect(ConnId(1));
    m.connect(ConnId(2));
    let (_, base1, _) = init(&mut m, ConnId(1), 16 << 20);
    let (_, base2, _) = init(&mut m, ConnId(2), 4096);
    m.disconnect(ConnId(1));
    // A newcomer of the same size lands on the freed block.
    m.connect(ConnId(3));
    let (_, base3, _) = init(&mut m, ConnId(3), 16 << 20);
    assert_eq!(base3, base1);
    let _ = base2;
}

#[test]
fn native_when_solo_skips_instrumentation() {
    let cfg = ManagerConfig {
        native_when_solo: true,
        ..ManagerConfig::default()
    };
    let mut m = Manager::new(cfg).unwrap();
    m.connect(ConnId(1));
    // Partition away from the device base so a raw out-of-partition store
    // is observable.
    let (_, base, size) = init(&mut m, ConnId(1), 16 << 20);
    expect_one(m.submit(
        ConnId(1),
        WireMessage::LoadModule {
            text: STORE_TID.into(),
        },
    ));
    let target = base + size; // next partition's territory, still in device
    let out = m.submit(
        ConnId(1),
        WireMessage::Launch {
            name: "store_tid".into(),
            grid: 1,
            block: 1,
            args: vec![ArgValue::DevAddr(target), ArgValue::Scalar64(0)],
        },
    );
    assert!(out.is_empty());
    let r = expect_one(m.dispatch_until_idle());
    assert_eq!(r.status, Status::Ok, "{}", r.message());
    let ev = m.dispatch_log().last().unwrap();
    assert!(matches!(&ev.kind, TaskKind::Launch { kernel } if kernel == "store_tid"));
    // The store landed at the raw address: fencing was bypassed.
    let got = m
        .submit(ConnId(1), WireMessage::MemcpyD2h { src: base, len: 4 })
        .pop()
        .unwrap()
        .1;
    assert_eq!(got.payload, vec![0; 4], "own partition untouched");
}

#[test]
fn device_size_limits_partitions() {
    let cfg = ManagerConfig {
        device_size: 32 << 20,
        ..ManagerConfig::default()
    };
    let mut m = Manager::new(cfg).unwrap();
    m.connect(ConnId(1));
    m.connect(ConnId(2));
    m.connect(ConnId(3));
    init(&mut m, ConnId(1), 16 << 20);
    init(&mut m, ConnId(2), 16 << 20);
    let r = expect_one(m.submit(
        ConnId(3),
        WireMessage::Init {
            req_bytes: 16 << 20,
        },
    ));
    assert_eq!(r.status, Status::DeviceOom);
}

#[test]
fn default_device_size_is_256_mib() {
    assert_eq!(DEFAULT_DEVICE_SIZE, 256 << 20);
}
