mod common;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use ringbench::alloc::{Allocator, HighWaterCache, SlotCache};
use ringbench::collectives::{
    ring_elements_sent, ring_messages, ring_order_sum, CollectiveError, Reducible, RingAllreduce,
    Scratch,
};
use ringbench::partition::partition;
use ringbench::transport::{Endpoint, ModelSetup};

use common::{on_all, quick};

fn allreduce_all<T: Reducible>(inputs: &[Vec<T>], channels: usize) -> Vec<Vec<T>> {
    let eps = Endpoint::in_proc(inputs.len(), quick()).unwrap();
    on_all(&eps, |ep| {
        let chans = ep.duplicate_channels(channels).unwrap();
        let ring = RingAllreduce::with_allocator(Allocator::standard());
        let mut data = inputs[ep.rank()].clone();
        ring.allreduce(ep, &chans, &mut data).unwrap();
        data
    })
}

fn random_ints(p: usize, len: usize, seed: u64) -> Vec<Vec<i64>> {
    let mut rng = StdRng::seed_from_u64(seed);
    (0..p)
        .map(|_| (0..len).map(|_| rng.gen_range(-1_000_000..1_000_000)).collect())
        .collect()
}

fn brute_sum(inputs: &[Vec<i64>]) -> Vec<i64> {
    (0..inputs[0].len())
        .map(|i| inputs.iter().map(|v| v[i]).sum())
        .collect()
}

#[test]
fn all_ranks_hold_the_constant_sum() {
    let inputs: Vec<Vec<i64>> = (0..4).map(|r| vec![r as i64 + 1; 8]).collect();
    for out in allreduce_all(&inputs, 1) {
        assert_eq!(out, vec![10; 8]);
    }
}

#[test]
fn shorter_than_ranks() {
    let inputs = random_ints(4, 3, 1);
    let expected = brute_sum(&inputs);
    for out in allreduce_all(&inputs, 2) {
        assert_eq!(out, expected);
    }
}

#[test]
fn integer_oracle_over_ranks_and_lengths() {
    for p in 1..=8usize {
        let lengths = [0, 1, p.saturating_sub(1), p, p + 1, 1000, 96 * 8 * 8 * 8 / 4];
        for (k, &len) in lengths.iter().enumerate() {
            let inputs = random_ints(p, len, (p * 100 + k) as u64);
            let expected = brute_sum(&inputs);
            for out in allreduce_all(&inputs, 1 + (k % 2)) {
                assert_eq!(out, expected, "P={p} len={len}");
            }
        }
    }
}

#[test]
fn float_results_follow_ring_order_bitwise() {
    let mut rng = StdRng::seed_from_u64(7);
    let inputs: Vec<Vec<f32>> = (0..3)
        .map(|_| (0..1001).map(|_| rng.gen_range(-1e3f32..1e3) * rng.gen::<f32>()).collect())
        .collect();
    let oracle = ring_order_sum(&inputs);
    for channels in [1, 2, 8] {
        for out in allreduce_all(&inputs, channels) {
            let bits: Vec<u32> = out.iter().map(|v| v.to_bits()).collect();
            let expected: Vec<u32> = oracle.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits, expected, "channels {channels}");
        }
    }
}

#[test]
fn message_and_element_counts() {
    for p in [2usize, 3, 5] {
        for channels in [1usize, 3] {
            let len = 1003;
            let eps = Endpoint::in_proc(p, quick()).unwrap();
            let counts = on_all(&eps, |ep| {
                let chans = ep.duplicate_channels(channels).unwrap();
                let ring = RingAllreduce::with_allocator(Allocator::standard());
                let mut data = vec![1i64; len];
                let bytes0 = ep.traffic().bytes();
                let stats = ring.allreduce(ep, &chans, &mut data).unwrap();
                (stats.messages, ep.traffic().bytes() - bytes0)
            });
            for (r, (messages, bytes)) in counts.into_iter().enumerate() {
                assert_eq!(messages, ring_messages(p, channels));
                let preamble = 16 * (p - 1) as u64;
                let elements = (bytes - preamble) / 8;
                assert_eq!(elements as usize, ring_elements_sent(len, p, r));
            }
            // Elements per rank sum to 2(P-1)/P of the vector on average.
            let total: usize = (0..p).map(|r| ring_elements_sent(len, p, r)).sum();
            assert_eq!(total, 2 * (p - 1) * len);
        }
    }
    let chunks = partition(10, 4).unwrap();
    assert_eq!(ring_elements_sent(10, 4, 0), 20 - chunks[1].length - chunks[2].length);
}

#[test]
fn high_water_scratch_stops_allocating() {
    let eps = Endpoint::in_proc(3, quick()).unwrap();
    let allocs = on_all(&eps, |ep| {
        let ring = RingAllreduce::with_allocator(Allocator::standard());
        let stats = ring.scratch().allocator().stats().clone();
        let chans = [ep.channel().clone()];
        let mut after_first = 0;
        for (i, len) in [5000usize, 5000, 4000, 10, 0, 5000].into_iter().enumerate() {
            let mut data = vec![1.0f32; len];
            ring.allreduce(ep, &chans, &mut data).unwrap();
            assert!(data.iter().all(|&v| v == 3.0));
            if i == 0 {
                after_first = stats.allocations();
            }
        }
        (after_first, stats.allocations())
    });
    for (first, last) in allocs {
        assert_eq!(first, 2);
        assert_eq!(last, first);
    }
}

#[test]
fn every_scratch_policy_gives_the_same_answer() {
    let inputs = random_ints(4, 777, 9);
    let expected = brute_sum(&inputs);
    let eps = Endpoint::in_proc(4, quick()).unwrap();
    let outs = on_all(&eps, |ep| {
        let policies = [
            Scratch::Fresh(Allocator::standard()),
            Scratch::HighWater(HighWaterCache::new(Allocator::standard(), 1)),
            Scratch::Slots(SlotCache::new(Allocator::standard())),
        ];
        let mut results = Vec::new();
        for scratch in policies {
            let ring = RingAllreduce::new(scratch, 4);
            for _ in 0..3 {
                let mut data = inputs[ep.rank()].clone();
                ring.allreduce(ep, &[ep.channel().clone()], &mut data).unwrap();
                results.push(data);
            }
            let live = ring.scratch().allocator().stats().live();
            if let Scratch::Slots(cache) = ring.scratch() {
                assert_eq!(live as usize, cache.len());
            }
        }
        results
    });
    for results in outs {
        for r in results {
            assert_eq!(r, expected);
        }
    }
}

#[test]
fn mismatched_lengths_fail_on_every_rank() {
    let eps = Endpoint::in_proc(3, quick()).unwrap();
    let errs = on_all(&eps, |ep| {
        let ring = RingAllreduce::with_allocator(Allocator::standard());
        let mut data = vec![0i64; if ep.rank() == 1 { 5 } else { 4 }];
        ring.allreduce(ep, &[ep.channel().clone()], &mut data).unwrap_err()
    });
    for e in errs {
        assert!(matches!(e, CollectiveError::RankMismatch { .. }), "{e:?}");
    }
}

#[test]
fn mismatched_element_kinds_fail() {
    let eps = Endpoint::in_proc(2, quick()).unwrap();
    let errs = on_all(&eps, |ep| {
        let ring = RingAllreduce::with_allocator(Allocator::standard());
        let chans = [ep.channel().clone()];
        if ep.rank() == 0 {
            ring.allreduce(ep, &chans, &mut [0f32; 4]).is_err()
        } else {
            ring.allreduce(ep, &chans, &mut [0i32; 4]).is_err()
        }
    });
    assert_eq!(errs, vec![true, true]);
}

#[test]
fn modeled_backend_reports_virtual_comms_time() {
    let eps = Endpoint::modeled(4, ModelSetup::default(), quick()).unwrap();
    let stats = on_all(&eps, |ep| {
        let ring = RingAllreduce::with_allocator(Allocator::standard());
        let mut data = vec![2.0f32; 1 << 16];
        let s = ring.allreduce(ep, &[ep.channel().clone()], &mut data).unwrap();
        assert!(data.iter().all(|&v| v == 8.0));
        s
    });
    for s in stats {
        assert!(s.comms_seconds > 0.0);
        assert!((s.total_seconds - s.comms_seconds - s.compute_seconds).abs() < 1e-12);
        assert!(s.percent_comms() > 0.0 && s.percent_comms() <= 100.0);
    }
}
