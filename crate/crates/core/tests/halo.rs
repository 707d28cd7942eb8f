mod common;

use ringbench::alloc::Allocator;
use ringbench::halo::{
    self, exchange_stats, fill_pattern, halo_exchange, pattern_mismatch, verify_exchange,
    CartComm4D, Direction, ExchangeMode, ExchangeSample, HaloError, HaloPlan,
};
use ringbench::perfmodel::{self, CostParams, PageLayout};
use ringbench::transport::{Channel, Endpoint, ModelSetup};

use common::{on_all, quick};

/// Run one exchange on every rank and return each rank's receive buffers.
fn exchange(eps: &[Endpoint], cart: CartComm4D, l: usize, mode: ExchangeMode) -> Vec<Vec<Vec<u8>>> {
    let plan = HaloPlan::new(l, mode).unwrap();
    on_all(eps, |ep| {
        let channels: Vec<Channel> = match mode {
            ExchangeMode::Threaded(n) => ep.duplicate_channels(n).unwrap(),
            _ => vec![ep.channel().clone()],
        };
        let bytes = plan.packet_bytes();
        let mut send = vec![vec![0u8; bytes]; 8];
        for (d, buf) in Direction::ALL.into_iter().zip(send.iter_mut()) {
            fill_pattern(ep.rank(), d, buf);
        }
        let mut recv = vec![vec![0u8; bytes]; 8];
        let sample = halo_exchange(&plan, &cart, ep, &channels, &send, &mut recv).unwrap();
        assert_eq!(sample.bytes_sent, 8 * bytes as u64);
        assert_eq!(sample.bytes_received, 8 * bytes as u64);
        recv
    })
}

#[test]
fn every_byte_matches_the_neighbour_pattern() {
    let cart = CartComm4D::default();
    for l in [1, 8] {
        for mode in [
            ExchangeMode::Sequential,
            ExchangeMode::Concurrent,
            ExchangeMode::Threaded(8),
            ExchangeMode::Threaded(3),
        ] {
            let eps = Endpoint::in_proc(16, quick()).unwrap();
            for (rank, recv) in exchange(&eps, cart, l, mode).iter().enumerate() {
                verify_exchange(&cart, rank, recv).unwrap();
            }
        }
    }
}

#[test]
fn rank_zero_plus_x_holds_rank_one_minus_x() {
    let cart = CartComm4D::default();
    let eps = Endpoint::in_proc(16, quick()).unwrap();
    let recv = exchange(&eps, cart, 8, ExchangeMode::Sequential);
    let plus_x = Direction::ALL[0];
    let mut expected = vec![0u8; 49152];
    fill_pattern(1, plus_x.opposite(), &mut expected);
    assert_eq!(recv[0][plus_x.index()], expected);
}

#[test]
fn both_packets_arrive_when_neighbours_coincide() {
    // Extent 2: rank 0's +x and -x neighbour are both rank 1, so only the
    // tags keep the two packets apart.
    let cart = CartComm4D::default();
    assert_eq!(cart.neighbor(0, 0, true).unwrap(), cart.neighbor(0, 0, false).unwrap());
    let eps = Endpoint::in_proc(16, quick()).unwrap();
    let recv = exchange(&eps, cart, 1, ExchangeMode::Concurrent);
    let (plus, minus) = (&recv[0][0], &recv[0][1]);
    assert_ne!(plus, minus);
    assert_eq!(pattern_mismatch(1, Direction::ALL[1], plus), None);
    assert_eq!(pattern_mismatch(1, Direction::ALL[0], minus), None);
}

#[test]
fn modes_give_identical_bytes() {
    let cart = CartComm4D::new([2, 2, 1, 2]).unwrap();
    let runs: Vec<_> = [
        ExchangeMode::Sequential,
        ExchangeMode::Concurrent,
        ExchangeMode::Threaded(8),
    ]
    .into_iter()
    .map(|mode| exchange(&Endpoint::in_proc(8, quick()).unwrap(), cart, 4, mode))
    .collect();
    assert_eq!(runs[0], runs[1]);
    assert_eq!(runs[0], runs[2]);
}

#[test]
fn wider_grid_and_single_rank() {
    let cart = CartComm4D::new([3, 1, 2, 1]).unwrap();
    let eps = Endpoint::in_proc(6, quick()).unwrap();
    for (rank, recv) in exchange(&eps, cart, 2, ExchangeMode::Threaded(2)).iter().enumerate() {
        verify_exchange(&cart, rank, recv).unwrap();
    }
    let solo = CartComm4D::new([1, 1, 1, 1]).unwrap();
    let eps = Endpoint::in_proc(1, quick()).unwrap();
    let recv = exchange(&eps, solo, 2, ExchangeMode::Sequential);
    verify_exchange(&solo, 0, &recv[0]).unwrap();
}

#[test]
fn bad_buffers_and_grids_are_rejected() {
    let eps = Endpoint::in_proc(16, quick()).unwrap();
    let plan = HaloPlan::new(2, ExchangeMode::Sequential).unwrap();
    let cart = CartComm4D::default();
    let send = vec![vec![0u8; 768]; 8];
    let mut recv = vec![vec![0u8; 767]; 8];
    let chans = [eps[0].channel().clone()];
    assert!(matches!(
        halo_exchange(&plan, &cart, &eps[0], &chans, &send, &mut recv),
        Err(HaloError::BufferSize { expected: 768, actual: 767, .. })
    ));
    let small = CartComm4D::new([2, 2, 2, 1]).unwrap();
    let mut recv = vec![vec![0u8; 768]; 8];
    assert!(matches!(
        halo_exchange(&plan, &small, &eps[0], &chans, &send, &mut recv),
        Err(HaloError::SizeMismatch { .. })
    ));
    let threaded = HaloPlan::new(2, ExchangeMode::Threaded(4)).unwrap();
    assert!(halo_exchange(&threaded, &cart, &eps[0], &chans, &send, &mut recv).is_err());
}

#[test]
fn wire_bytes_per_node_per_iteration() {
    let s = ExchangeSample {
        seconds: 1.0,
        bytes_sent: 8 * 49_152,
        bytes_received: 8 * 49_152,
    };
    let stats = exchange_stats(&[s]).unwrap();
    assert_eq!(stats.bytes_sent_per_node, 393_216.0);
    assert_eq!(
        stats.bytes_sent_per_node + stats.bytes_received_per_node,
        (16 * 96 * 8 * 8 * 8) as f64
    );
}

#[test]
fn modeled_exchange_matches_the_model_sweep() {
    // Each rank sends its eight faces in direction order, so its clock
    // advances exactly as the model's eight-buffer cycle does.
    let setup = ModelSetup::default();
    let (warmup, iters) = (1, 3);
    for l in [8usize, 16, 24, 32] {
        let plan = HaloPlan::new(l, ExchangeMode::Threaded(8)).unwrap();
        let bytes = plan.packet_bytes();
        let cart = CartComm4D::new([2, 1, 1, 1]).unwrap();
        let eps = Endpoint::modeled(2, setup, quick()).unwrap();
        let samples = on_all(&eps, |ep| {
            let alloc = Allocator::standard();
            let chans = ep.duplicate_channels(8).unwrap();
            let mut send: Vec<_> = (0..8).map(|_| alloc.allocate(bytes).unwrap()).collect();
            for (d, b) in Direction::ALL.into_iter().zip(send.iter_mut()) {
                fill_pattern(ep.rank(), d, b.as_bytes_mut());
            }
            let mut recv: Vec<_> = (0..8).map(|_| alloc.allocate(bytes).unwrap()).collect();
            let mut out = Vec::new();
            for i in 0..warmup + iters {
                let s = halo_exchange(&plan, &cart, ep, &chans, &send, &mut recv).unwrap();
                if i >= warmup {
                    out.push(s);
                }
            }
            verify_exchange(&cart, ep.rank(), &recv).unwrap();
            out
        });
        let row = perfmodel::simulate(
            bytes,
            setup.layout,
            setup.cache_regions,
            &setup.params,
            8,
            warmup,
            iters,
        );
        for s in samples.iter().flatten() {
            let expected = 8.0 * row.seconds;
            assert!((s.seconds - expected).abs() <= 1e-12 * expected, "L={l}: {} vs {expected}", s.seconds);
        }
        let stats = exchange_stats(&samples.concat()).unwrap();
        assert!((stats.bandwidth_mbps - 2.0 * row.bandwidth / 1e6).abs() < 1e-6 * stats.bandwidth_mbps);
    }
}

#[test]
fn default_layouts_in_the_model() {
    assert_eq!(halo::default_packet_sizes().len(), 8);
    let params = CostParams::default();
    let huge = perfmodel::simulate(25_165_824, PageLayout::huge(), 1360, &params, 8, 1, 2);
    assert!(huge.bandwidth >= 0.8 * params.wire_bw);
}
