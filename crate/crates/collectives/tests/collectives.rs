//! Group formation, collective correctness against local oracles, ordering
//! and symmetry guarantees, and the round-robin composite.

use std::sync::Mutex;
use std::thread;
use std::time::{Duration, Instant};

use bks_autograd::rng::SplitMix64;
use bks_collectives::{
    rendezvous, CollectiveError, GroupConfig, LatencyModel, LoopbackFabric, ProcessGroup,
};
use proptest::prelude::*;

/// Serialize timing- and port-sensitive tests within this binary.
static EXCLUSIVE: Mutex<()> = Mutex::new(());

fn lock_exclusive() -> std::sync::MutexGuard<'static, ()> {
    EXCLUSIVE.lock().unwrap_or_else(|e| e.into_inner())
}

fn free_port() -> u16 {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.local_addr().unwrap().port()
}

/// Run one closure per rank on its own thread and collect results in rank order.
fn run_ranks<T, F>(configs: Vec<GroupConfig>, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(GroupConfig) -> T + Send + Sync,
{
    thread::scope(|scope| {
        let handles: Vec<_> = configs
            .into_iter()
            .map(|cfg| scope.spawn(|| f(cfg)))
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    })
}

fn tcp_configs(world: u32, group_id: u32) -> Vec<GroupConfig> {
    let addr = format!("127.0.0.1:{}", free_port());
    (0..world)
        .map(|rank| {
            GroupConfig::tcp(addr.clone(), rank, world, group_id)
                .with_timeout(Duration::from_secs(10))
        })
        .collect()
}

// ---------------------------------------------------------------- rendezvous

#[test]
fn world_one_rendezvous_returns_immediately() {
    let cfg = GroupConfig::loopback_world(1, 1).pop().unwrap();
    let group = rendezvous(cfg).unwrap();
    assert_eq!((group.rank(), group.world()), (0, 1));
}

#[test]
fn four_logical_ranks_in_one_process_all_construct() {
    let groups = run_ranks(GroupConfig::loopback_world(4, 2), |cfg| {
        rendezvous(cfg).map(|g| (g.rank(), g.world()))
    });
    for (rank, result) in groups.into_iter().enumerate() {
        assert_eq!(result.unwrap(), (rank as u32, 4));
    }
}

#[test]
fn duplicate_rank_is_a_protocol_error() {
    // Two claims on rank 0: whichever loses the race must fail with a
    // duplicate-rank protocol error; the winner times out alone.
    let fabric = LoopbackFabric::new(2);
    let cfg_a =
        GroupConfig::loopback(fabric.clone(), 0, 2, 3).with_timeout(Duration::from_millis(400));
    let cfg_b = GroupConfig::loopback(fabric, 0, 2, 3).with_timeout(Duration::from_millis(400));
    let results = thread::scope(|scope| {
        let a = scope.spawn(|| rendezvous(cfg_a));
        let b = scope.spawn(|| rendezvous(cfg_b));
        (a.join().unwrap(), b.join().unwrap())
    });
    let errors = [results.0.err(), results.1.err()];
    assert!(
        errors.iter().flatten().count() == 2,
        "both claims must fail: rank 1 never arrives"
    );
    assert!(
        errors.iter().flatten().any(|e| e.is_protocol()),
        "one claim must be rejected as a duplicate: {errors:?}"
    );
}

#[test]
fn tcp_rendezvous_times_out_when_a_rank_never_starts() {
    let _guard = lock_exclusive();
    let addr = format!("127.0.0.1:{}", free_port());
    let configs: Vec<_> = (0..2)
        .map(|rank| {
            GroupConfig::tcp(addr.clone(), rank, 3, 4).with_timeout(Duration::from_millis(800))
        })
        .collect();
    let results = run_ranks(configs, rendezvous);
    for result in results {
        let err = result.err().expect("rendezvous must fail without rank 2");
        // Whichever deadline fires first closes the hub, so the peer may see
        // either its own timeout or the hub abandoning the rendezvous.
        assert!(
            err.is_timeout() || matches!(err, CollectiveError::Rendezvous(_)),
            "got {err}"
        );
    }
}

#[test]
fn default_timeout_is_thirty_seconds() {
    assert_eq!(
        bks_collectives::DEFAULT_RENDEZVOUS_TIMEOUT,
        Duration::from_secs(30)
    );
}

// ---------------------------------------------------------------- broadcast

#[test]
fn broadcast_world_two() {
    let results = run_ranks(GroupConfig::loopback_world(2, 5), |cfg| {
        let rank = cfg.rank;
        let group = rendezvous(cfg).unwrap();
        let data = if rank == 0 {
            vec![1.0, 2.0, 3.0]
        } else {
            vec![9.0, 9.0, 9.0]
        };
        group.broadcast(data, 0).unwrap().wait().unwrap()
    });
    assert_eq!(results[0], vec![1.0, 2.0, 3.0]);
    assert_eq!(results[1], vec![1.0, 2.0, 3.0]);
}

#[test]
fn broadcast_world_one_is_identity() {
    let cfg = GroupConfig::loopback_world(1, 6).pop().unwrap();
    let group = rendezvous(cfg).unwrap();
    let out = group.broadcast(vec![4.0, 5.0], 0).unwrap().wait().unwrap();
    assert_eq!(out, vec![4.0, 5.0]);
}

#[test]
fn broadcast_world_four_bit_identical_to_src() {
    let mut rng = SplitMix64::new(77);
    let src_data = rng.fill_uniform(1009, -10.0, 10.0);
    let src_clone = src_data.clone();
    let results = run_ranks(GroupConfig::loopback_world(4, 7), |cfg| {
        let rank = cfg.rank;
        let group = rendezvous(cfg).unwrap();
        let data = if rank == 2 {
            src_clone.clone()
        } else {
            vec![0.0; 1009]
        };
        group.broadcast(data, 2).unwrap().wait().unwrap()
    });
    for out in results {
        assert_eq!(out.len(), src_data.len());
        for (a, b) in out.iter().zip(&src_data) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn broadcast_length_mismatch_is_protocol_error() {
    let results = run_ranks(GroupConfig::loopback_world(2, 8), |cfg| {
        let rank = cfg.rank;
        let group = rendezvous(cfg).unwrap();
        let data = if rank == 0 {
            vec![1.0, 2.0]
        } else {
            vec![0.0; 5]
        };
        group.broadcast(data, 0).unwrap().wait()
    });
    let err = results[1].as_ref().expect_err("receiver must reject");
    assert!(
        matches!(
            err,
            CollectiveError::LengthMismatch {
                local: 5,
                remote: 2
            }
        ),
        "got {err}"
    );
}

// ------------------------------------------------------------- allreduce sum

fn sum_oracle(inputs: &[Vec<f64>]) -> Vec<f64> {
    let mut out = vec![0.0; inputs[0].len()];
    for input in inputs {
        for (o, v) in out.iter_mut().zip(input) {
            *o += v;
        }
    }
    out
}

#[test]
fn allreduce_sum_world_two_hand_case() {
    let results = run_ranks(GroupConfig::loopback_world(2, 9), |cfg| {
        let rank = cfg.rank;
        let group = rendezvous(cfg).unwrap();
        let data = if rank == 0 {
            vec![1.0, 2.0]
        } else {
            vec![3.0, 4.0]
        };
        group.allreduce_sum(data).unwrap().wait().unwrap()
    });
    assert_eq!(results[0], vec![4.0, 6.0]);
    assert_eq!(results[1], vec![4.0, 6.0]);
}

#[test]
fn allreduce_sum_world_one_identity() {
    let cfg = GroupConfig::loopback_world(1, 10).pop().unwrap();
    let group = rendezvous(cfg).unwrap();
    let out = group.allreduce_sum(vec![5.0, 5.0]).unwrap().wait().unwrap();
    assert_eq!(out, vec![5.0, 5.0]);
}

fn check_allreduce_against_oracle(world: u32, len: usize, group_id: u32, seed: u64) {
    let mut rng = SplitMix64::new(seed);
    let inputs: Vec<Vec<f64>> = (0..world)
        .map(|_| rng.fill_uniform(len, -1.0, 1.0))
        .collect();
    let expected = sum_oracle(&inputs);
    let inputs_ref = &inputs;
    let results = run_ranks(GroupConfig::loopback_world(world, group_id), |cfg| {
        let rank = cfg.rank as usize;
        let group = rendezvous(cfg).unwrap();
        group
            .allreduce_sum(inputs_ref[rank].clone())
            .unwrap()
            .wait()
            .unwrap()
    });
    for out in &results {
        assert_eq!(out.len(), expected.len());
        for (got, want) in out.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12, "world {world} len {len}");
        }
    }
    // Symmetry: all ranks hold bit-identical buffers.
    for out in &results[1..] {
        for (a, b) in out.iter().zip(&results[0]) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn allreduce_sum_length_seventeen_world_three() {
    check_allreduce_against_oracle(3, 17, 11, 101);
}

#[test]
fn allreduce_sum_across_worlds_and_lengths() {
    let mut group_id = 20;
    for world in 1..=8u32 {
        for len in [1usize, 2, 17, 1000] {
            check_allreduce_against_oracle(world, len, group_id, 500 + group_id as u64);
            group_id += 1;
        }
    }
}

#[test]
fn allreduce_length_mismatch_across_ranks_is_protocol_error() {
    let results = run_ranks(GroupConfig::loopback_world(2, 90), |cfg| {
        let rank = cfg.rank;
        let group = rendezvous(cfg).unwrap();
        let data = vec![1.0; if rank == 0 { 4 } else { 9 }];
        group.allreduce_sum(data).unwrap().wait()
    });
    assert!(results.iter().any(|r| matches!(
        r.as_ref().err(),
        Some(CollectiveError::LengthMismatch { .. }) | Some(CollectiveError::Protocol(_))
    )));
}

// ------------------------------------------------------------ allreduce max

#[test]
fn max_u8_hand_cases() {
    let results = run_ranks(GroupConfig::loopback_world(2, 91), |cfg| {
        let rank = cfg.rank;
        let group = rendezvous(cfg).unwrap();
        let bits = if rank == 0 {
            vec![1, 0, 0]
        } else {
            vec![0, 0, 1]
        };
        let ored = group.allreduce_max_u8(bits).unwrap().wait().unwrap();
        let zeros = group.allreduce_max_u8(vec![0; 4]).unwrap().wait().unwrap();
        (ored, zeros)
    });
    for (ored, zeros) in results {
        assert_eq!(ored, vec![1, 0, 1]);
        assert_eq!(zeros, vec![0, 0, 0, 0]);
    }
}

#[test]
fn max_u8_random_bits_match_or_oracle() {
    let mut rng = SplitMix64::new(365);
    let inputs: Vec<Vec<u8>> = (0..4)
        .map(|_| (0..33).map(|_| (rng.next_u64() & 1) as u8).collect())
        .collect();
    let mut expected = vec![0u8; 33];
    for input in &inputs {
        for (e, &v) in expected.iter_mut().zip(input) {
            *e |= v;
        }
    }
    let inputs_ref = &inputs;
    let results = run_ranks(GroupConfig::loopback_world(4, 92), |cfg| {
        let rank = cfg.rank as usize;
        let group = rendezvous(cfg).unwrap();
        group
            .allreduce_max_u8(inputs_ref[rank].clone())
            .unwrap()
            .wait()
            .unwrap()
    });
    for out in results {
        assert_eq!(out, expected);
    }
}

// ------------------------------------------------------------------ ordering

#[test]
fn completion_follows_issue_order_within_a_group() {
    let results = run_ranks(GroupConfig::loopback_world(2, 93), |cfg| {
        let group = rendezvous(cfg).unwrap();
        let h1 = group.allreduce_sum(vec![1.0; 64]).unwrap();
        let h2 = group.allreduce_sum(vec![2.0; 64]).unwrap();
        let h3 = group.allreduce_sum(vec![3.0; 64]).unwrap();
        assert_eq!((h1.seq(), h2.seq(), h3.seq()), (0, 1, 2));
        let out3 = h3.wait().unwrap();
        // The worker is strictly serial: op 3 done implies 1 and 2 done.
        let earlier_done = h1.is_done() && h2.is_done();
        let out1 = h1.wait().unwrap();
        (out1, out3, earlier_done)
    });
    for (out1, out3, earlier_done) in results {
        assert!(earlier_done);
        // Both ranks contributed the same values per op: sums are 2x and 6x.
        assert_eq!(out1, vec![2.0; 64]);
        assert_eq!(out3, vec![6.0; 64]);
    }
}

// --------------------------------------------------------------- round robin

#[test]
fn round_robin_of_one_behaves_like_inner_group() {
    let cfg = GroupConfig::loopback_world(1, 94).pop().unwrap();
    let inner = rendezvous(cfg).unwrap();
    let rr = ProcessGroup::round_robin(vec![inner]).unwrap();
    let out = rr.allreduce_sum(vec![2.0, 4.0]).unwrap().wait().unwrap();
    assert_eq!(out, vec![2.0, 4.0]);
    assert_eq!((rr.rank(), rr.world()), (0, 1));
}

#[test]
fn round_robin_dispatches_mod_n() {
    let groups: Vec<ProcessGroup> = (0..3)
        .map(|i| rendezvous(GroupConfig::loopback_world(1, 95 + i).pop().unwrap()).unwrap())
        .collect();
    let rr = ProcessGroup::round_robin(groups).unwrap();
    let handles: Vec<_> = (0..6)
        .map(|k| rr.allreduce_sum(vec![k as f64]).unwrap())
        .collect();
    let pattern: Vec<(u32, u64)> = handles.iter().map(|h| (h.group_id(), h.seq())).collect();
    assert_eq!(
        pattern,
        vec![(95, 0), (96, 0), (97, 0), (95, 1), (96, 1), (97, 1)]
    );
    for h in handles {
        h.wait().unwrap();
    }
}

#[test]
fn round_robin_rejects_empty_and_mismatched_groups() {
    assert!(matches!(
        ProcessGroup::round_robin(vec![]),
        Err(CollectiveError::Usage(_))
    ));
}

#[test]
fn round_robin_overlaps_equal_sized_collectives() {
    let _guard = lock_exclusive();
    let alpha = 0.04;
    let model = LatencyModel::new(alpha, f64::INFINITY);

    // Single-group baseline: one op's wall time.
    let single_op = {
        let configs: Vec<_> = GroupConfig::loopback_world(2, 200)
            .into_iter()
            .map(|c| c.with_latency(model))
            .collect();
        let times = run_ranks(configs, |cfg| {
            let group = rendezvous(cfg).unwrap();
            let start = Instant::now();
            group.allreduce_sum(vec![1.0; 512]).unwrap().wait().unwrap();
            start.elapsed()
        });
        times.into_iter().max().unwrap()
    };

    // Three equal ops through rr3: per-group serialization means they overlap.
    let rr3_total = {
        let fabrics: Vec<LoopbackFabric> = (0..3).map(|_| LoopbackFabric::new(2)).collect();
        let fabrics_ref = &fabrics;
        let times = run_ranks(GroupConfig::loopback_world(2, 201), |outer_cfg| {
            let rank = outer_cfg.rank;
            drop(rendezvous(outer_cfg)); // unused; keeps rank threads symmetric
            let groups: Vec<ProcessGroup> = fabrics_ref
                .iter()
                .enumerate()
                .map(|(i, fabric)| {
                    rendezvous(
                        GroupConfig::loopback(fabric.clone(), rank, 2, 210 + i as u32)
                            .with_latency(model),
                    )
                    .unwrap()
                })
                .collect();
            let rr = ProcessGroup::round_robin(groups).unwrap();
            let start = Instant::now();
            let handles: Vec<_> = (0..3)
                .map(|_| rr.allreduce_sum(vec![1.0; 512]).unwrap())
                .collect();
            for h in handles {
                h.wait().unwrap();
            }
            start.elapsed()
        });
        times.into_iter().max().unwrap()
    };

    assert!(
        rr3_total < single_op * 3,
        "rr3 {rr3_total:?} !< 3x single {single_op:?}"
    );
}

// ----------------------------------------------------------------------- tcp

#[test]
fn tcp_allreduce_matches_oracle_for_worlds_two_to_four() {
    let _guard = lock_exclusive();
    for world in 2..=4u32 {
        let mut rng = SplitMix64::new(4000 + world as u64);
        let inputs: Vec<Vec<f64>> = (0..world)
            .map(|_| rng.fill_uniform(17, -1.0, 1.0))
            .collect();
        let expected = sum_oracle(&inputs);
        let inputs_ref = &inputs;
        let results = run_ranks(tcp_configs(world, 300 + world), |cfg| {
            let rank = cfg.rank as usize;
            let group = rendezvous(cfg).unwrap();
            group
                .allreduce_sum(inputs_ref[rank].clone())
                .unwrap()
                .wait()
                .unwrap()
        });
        for out in &results {
            for (got, want) in out.iter().zip(&expected) {
                assert!((got - want).abs() < 1e-12);
            }
        }
        for out in &results[1..] {
            for (a, b) in out.iter().zip(&results[0]) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}

#[test]
fn tcp_broadcast_and_bitmap_roundtrip() {
    let _guard = lock_exclusive();
    let results = run_ranks(tcp_configs(3, 310), |cfg| {
        let rank = cfg.rank;
        let group = rendezvous(cfg).unwrap();
        let data = if rank == 1 {
            vec![7.0, 8.0, 9.0]
        } else {
            vec![0.0; 3]
        };
        let b = group.broadcast(data, 1).unwrap().wait().unwrap();
        let bits = vec![u8::from(rank == 2), 0, u8::from(rank == 0)];
        let m = group.allreduce_max_u8(bits).unwrap().wait().unwrap();
        (b, m)
    });
    for (b, m) in results {
        assert_eq!(b, vec![7.0, 8.0, 9.0]);
        assert_eq!(m, vec![1, 0, 1]);
    }
}

/// Issue order mismatch across ranks (test rig only): the per-op header check
/// must fail with a protocol error instead of silently corrupting data.
#[test]
fn tcp_out_of_order_issue_is_caught_by_header_check() {
    let _guard = lock_exclusive();
    let results = run_ranks(tcp_configs(2, 320), |cfg| {
        let rank = cfg.rank;
        let group = rendezvous(cfg).unwrap();
        let (first, second) = if rank == 0 { (4, 9) } else { (9, 4) };
        let h1 = group.allreduce_sum(vec![1.0; first]).unwrap();
        let h2 = group.allreduce_sum(vec![1.0; second]).unwrap();
        (h1.wait(), h2.wait())
    });
    let mut protocol_errors = 0;
    for (r1, r2) in &results {
        for r in [r1, r2] {
            if let Err(e) = r {
                assert!(
                    e.is_protocol(),
                    "order mismatch must be a protocol error, got {e}"
                );
                protocol_errors += 1;
            }
        }
    }
    assert!(
        protocol_errors >= 2,
        "both ranks should observe the mismatch"
    );
}

#[test]
fn tcp_world_one_runs_solo() {
    let _guard = lock_exclusive();
    let cfg = tcp_configs(1, 330).pop().unwrap();
    let group = rendezvous(cfg).unwrap();
    let out = group.allreduce_sum(vec![1.5, 2.5]).unwrap().wait().unwrap();
    assert_eq!(out, vec![1.5, 2.5]);
}

// ------------------------------------------------------------------ property

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    /// Ring allreduce equals the local-sum oracle for arbitrary small shapes.
    #[test]
    fn allreduce_matches_oracle_prop(world in 1u32..=5, len in 1usize..=64, seed in 0u64..1000) {
        let mut rng = SplitMix64::new(seed);
        let inputs: Vec<Vec<f64>> = (0..world).map(|_| rng.fill_uniform(len, -8.0, 8.0)).collect();
        let expected = sum_oracle(&inputs);
        let inputs_ref = &inputs;
        let results = run_ranks(GroupConfig::loopback_world(world, 400), |cfg| {
            let rank = cfg.rank as usize;
            let group = rendezvous(cfg).unwrap();
            group.allreduce_sum(inputs_ref[rank].clone()).unwrap().wait().unwrap()
        });
        for out in results {
            for (got, want) in out.iter().zip(&expected) {
                prop_assert!((got - want).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn rank_out_of_range_is_usage_error() {
    let fabric = LoopbackFabric::new(2);
    let cfg = GroupConfig::loopback(fabric, 5, 2, 95);
    assert!(matches!(rendezvous(cfg), Err(CollectiveError::Usage(_))));
}

#[test]
fn max_u8_length_mismatch_is_protocol_error() {
    let results = run_ranks(GroupConfig::loopback_world(2, 96), |cfg| {
        let rank = cfg.rank;
        let group = rendezvous(cfg).unwrap();
        let bits = vec![1u8; if rank == 0 { 3 } else { 8 }];
        group.allreduce_max_u8(bits).unwrap().wait()
    });
    assert!(results.iter().any(|r| matches!(
        r.as_ref().err(),
        Some(CollectiveError::LengthMismatch { .. }) | Some(CollectiveError::Protocol(_))
    )));
}

#[test]
fn broadcast_src_out_of_range_is_usage_error() {
    let cfg = GroupConfig::loopback_world(1, 97).pop().unwrap();
    let group = rendezvous(cfg).unwrap();
    assert!(matches!(
        group.broadcast(vec![1.0], 3),
        Err(CollectiveError::Usage(_))
    ));
}

#[test]
fn tcp_duplicate_rank_is_rejected_by_the_hub() {
    let _guard = lock_exclusive();
    let addr = format!("127.0.0.1:{}", free_port());
    let mk =
        |rank| GroupConfig::tcp(addr.clone(), rank, 3, 98).with_timeout(Duration::from_secs(5));
    // Ranks 0, 1 and a second claim on rank 1; rank 2 never arrives, so the
    // hub must reject the duplicate registration.
    let configs = vec![mk(0), mk(1), mk(1)];
    let results = run_ranks(configs, rendezvous);
    let hub_err = results[0].as_ref().err().expect("hub must fail");
    assert!(
        hub_err.is_protocol() && hub_err.to_string().contains("duplicate rank 1"),
        "got {hub_err}"
    );
}
