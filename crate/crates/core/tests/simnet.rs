use aqsgd_core::simnet::{
    bandwidth_sweep, epoch_time, log_grid, preset, ratio_bands, Compression, LinkSpec, PipelineSpec,
    StageCost,
};
use proptest::prelude::*;

fn pipeline(k: usize, m: usize, fwd: f64, bwd: f64, dims: usize, fetch: f64) -> PipelineSpec {
    PipelineSpec {
        stages: vec![
            StageCost {
                forward: fwd,
                backward: bwd,
                payload_dims: dims,
                fetch,
                store: 0.0,
            };
            k
        ],
        micro_batches: m,
        micro_batch_size: 1,
        batches_per_epoch: 3,
    }
}

#[test]
fn preset_ratio_bands() {
    let pipe = preset("gpt2xl-8stage").unwrap();
    let bands = ratio_bands(&pipe, 1e10, 1e8, Compression::AqSgd { fw_bits: 4, bw_bits: 4 }).unwrap();
    assert!(bands.raw_slowdown >= 5.0, "{bands:?}");
    assert!(bands.compressed_degradation <= 0.25, "{bands:?}");
}

#[test]
fn hundred_point_sweep_is_monotone() {
    let pipe = preset("gpt2xl-8stage").unwrap();
    let grid = log_grid(1e7, 1e11, 100);
    assert_eq!(grid.len(), 100);
    let modes = [
        Compression::AqSgd { fw_bits: 2, bw_bits: 4 },
        Compression::AqSgd { fw_bits: 4, bw_bits: 8 },
        Compression::DirectQ { fw_bits: 4, bw_bits: 8 },
        Compression::Raw32,
    ];
    let rows = bandwidth_sweep(&pipe, &grid, &modes).unwrap();
    assert_eq!(rows.len(), 400);
    for (mi, _) in modes.iter().enumerate() {
        let series: Vec<f64> = rows.iter().skip(mi).step_by(4).map(|r| r.samples_per_sec).collect();
        assert!(series.windows(2).all(|w| w[1] >= w[0]), "mode {mi}");
    }
    // Fewer bits never slow things down at a given bandwidth.
    for chunk in rows.chunks(4) {
        assert!(chunk[0].samples_per_sec >= chunk[1].samples_per_sec);
        assert!(chunk[2].samples_per_sec >= chunk[3].samples_per_sec);
    }
}

#[test]
fn infinite_bandwidth_ignores_compression() {
    let pipe = preset("gpt2xl-8stage").unwrap();
    let link = LinkSpec::bandwidth(f64::INFINITY).unwrap();
    let raw = epoch_time(&pipe, &link, Compression::Raw32).unwrap();
    let q = epoch_time(&pipe, &link, Compression::DirectQ { fw_bits: 2, bw_bits: 4 }).unwrap();
    let aq = epoch_time(&pipe, &link, Compression::AqSgd { fw_bits: 2, bw_bits: 4 }).unwrap();
    assert_eq!(raw.batch_seconds, q.batch_seconds);
    assert_eq!(raw.batch_seconds, aq.batch_seconds);
    // (M + K − 1)(f + b) for equal stages.
    assert!((raw.batch_seconds - 39.0 * 0.132).abs() < 1e-9);
}

#[test]
fn single_stage_has_no_communication() {
    let pipe = pipeline(1, 5, 0.1, 0.2, 1 << 20, 1.0);
    for bw in [1.0, 1e3, 1e12] {
        for c in [Compression::Raw32, Compression::AqSgd { fw_bits: 2, bw_bits: 2 }] {
            let t = epoch_time(&pipe, &LinkSpec::new(bw, 0.5).unwrap(), c).unwrap();
            assert!((t.batch_seconds - 5.0 * 0.3).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn throughput_monotone_in_bandwidth_and_payload(
        k in 2usize..6,
        m in 1usize..12,
        fwd in 0.001f64..0.1,
        bwd in 0.001f64..0.2,
        dims in 64usize..100_000,
        bw in 1e6f64..1e10,
        factor in 1.0f64..10.0,
        latency in 0.0f64..0.01,
        bits in 2u8..9,
    ) {
        let pipe = pipeline(k, m, fwd, bwd, dims, 0.0);
        let c = Compression::DirectQ { fw_bits: bits, bw_bits: bits };
        let slow = epoch_time(&pipe, &LinkSpec::new(bw, latency).unwrap(), c).unwrap();
        let fast = epoch_time(&pipe, &LinkSpec::new(bw * factor, latency).unwrap(), c).unwrap();
        prop_assert!(fast.samples_per_sec >= slow.samples_per_sec);
        let bigger = pipeline(k, m, fwd, bwd, dims * 2, 0.0);
        let big = epoch_time(&bigger, &LinkSpec::new(bw, latency).unwrap(), c).unwrap();
        prop_assert!(big.samples_per_sec <= slow.samples_per_sec);
        let more = pipeline(k, m + 1, fwd, bwd, dims, 0.0);
        prop_assert!(epoch_time(&more, &LinkSpec::new(bw, latency).unwrap(), c).unwrap().epoch_seconds > slow.epoch_seconds);
    }

    #[test]
    fn compression_never_loses_to_raw(
        k in 2usize..6,
        m in 1usize..12,
        fwd in 0.001f64..0.1,
        dims in 64usize..100_000,
        bw in 1e6f64..1e10,
        bits in 2u8..17,
        fetch_share in 0.0f64..1.0,
    ) {
        // Buffer I/O that fits inside one forward pass is hidden.
        let pipe = pipeline(k, m, fwd, 2.0 * fwd, dims, fetch_share * fwd);
        let link = LinkSpec::bandwidth(bw).unwrap();
        let raw = epoch_time(&pipe, &link, Compression::Raw32).unwrap().epoch_seconds;
        let q = Compression::DirectQ { fw_bits: bits, bw_bits: bits };
        let aq = Compression::AqSgd { fw_bits: bits, bw_bits: bits };
        prop_assert!(epoch_time(&pipe, &link, q).unwrap().epoch_seconds <= raw);
        prop_assert!(epoch_time(&pipe, &link, aq).unwrap().epoch_seconds <= raw);
    }
}
