//! Standalone exchange benchmarking: time repeated collective calls on
//! random buffers and report the exact per-rank payload bytes alongside.
//!
//! Timing is informational — at desk scale the transport/compute ratios of
//! a GPU cluster invert — but byte counts are exact and asserted in tests.

use parexch::buffer::ParamBuffer;
use parexch::collectives::{
    ar_root_payload_bytes, asa_payload_bytes_per_rank, ExchangeStrategy, Exchanger,
};
use parexch::transport::spawn_world;
use parexch::Result;
use std::time::Instant;

/// Parameter-count presets named after well-known architectures.
pub fn preset_param_count(name: &str) -> Option<usize> {
    match name {
        "alexnet" => Some(60_965_224),
        "googlenet" => Some(13_378_280),
        "vggnet" => Some(138_357_544),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchRow {
    pub strategy: ExchangeStrategy,
    pub param_count: usize,
    pub workers: usize,
    pub repetitions: usize,
    pub mean_seconds: f64,
    /// ASA/ASA16: payload bytes each rank transmits per call. AR: payload
    /// bytes through rank 0 (sent + received) per call — the bottleneck.
    pub per_rank_bytes: u64,
}

fn filler(rank: usize, p: usize) -> ParamBuffer<f32> {
    let values = (0..p)
        .map(|i| {
            let x = (rank as u64)
                .wrapping_mul(0x9E3779B97F4A7C15)
                .wrapping_add((i as u64).wrapping_mul(0xBF58476D1CE4E5B9));
            ((x >> 40) as i32 % 1000) as f32 / 1000.0
        })
        .collect();
    ParamBuffer::new(values).expect("finite filler")
}

/// Time `repetitions` collective calls over the in-process backend.
pub fn bench_exchange(
    p: usize,
    k: usize,
    strategy: ExchangeStrategy,
    repetitions: usize,
) -> Result<BenchRow> {
    assert!(repetitions >= 1);
    let results = spawn_world(k, |comm| {
        let mut ex = Exchanger::new(comm);
        let buf = filler(ex.rank(), p);
        // one warmup call outside the timed window
        ex.strategy_allreduce(strategy, &buf)?;
        ex.reset_meter();
        let started = Instant::now();
        for _ in 0..repetitions {
            ex.strategy_allreduce(strategy, &buf)?;
        }
        let elapsed = started.elapsed().as_secs_f64();
        Ok((elapsed, ex.meter()))
    })?;

    // the collective is as slow as its slowest rank
    let mean_seconds = results
        .iter()
        .map(|(e, _)| e / repetitions as f64)
        .fold(0.0f64, f64::max);
    let reps = repetitions as u64;
    let per_rank_bytes = match strategy {
        ExchangeStrategy::Ar => {
            (results[0].1.payload_bytes_sent + results[0].1.payload_bytes_received) / reps
        }
        ExchangeStrategy::Asa | ExchangeStrategy::Asa16 => results[0].1.payload_bytes_sent / reps,
    };

    Ok(BenchRow {
        strategy,
        param_count: p,
        workers: k,
        repetitions,
        mean_seconds,
        per_rank_bytes,
    })
}

/// Expected `per_rank_bytes` for a row, from the counting formulas.
pub fn expected_per_rank_bytes(strategy: ExchangeStrategy, p: usize, k: usize) -> u64 {
    match strategy {
        ExchangeStrategy::Ar => ar_root_payload_bytes(p, k, 4),
        ExchangeStrategy::Asa => asa_payload_bytes_per_rank(p, k, 4),
        ExchangeStrategy::Asa16 => asa_payload_bytes_per_rank(p, k, 2),
    }
}

pub fn render_row(row: &BenchRow) -> String {
    format!(
        "{:<6} p={:<10} k={:<2} reps={:<4} mean_s={:<12.6} per_rank_bytes={}",
        row.strategy.name(),
        row.param_count,
        row.workers,
        row.repetitions,
        row.mean_seconds,
        row.per_rank_bytes
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bench_reports_exact_bytes_p1024_k4() {
        let asa = bench_exchange(1024, 4, ExchangeStrategy::Asa, 2).unwrap();
        assert_eq!(asa.per_rank_bytes, 6144);

        let asa16 = bench_exchange(1024, 4, ExchangeStrategy::Asa16, 2).unwrap();
        assert_eq!(asa16.per_rank_bytes, 3072);
        assert_eq!(asa16.per_rank_bytes * 2, asa.per_rank_bytes);

        let ar = bench_exchange(1024, 4, ExchangeStrategy::Ar, 2).unwrap();
        assert_eq!(ar.per_rank_bytes, 24576);
        assert_eq!(ar.per_rank_bytes, 4 * asa.per_rank_bytes);
    }

    #[test]
    fn bench_bytes_match_formulas_with_padding() {
        // P not divisible by k exercises the padded tail
        for (p, k) in [(1000usize, 3usize), (7, 4), (1025, 8)] {
            for strategy in [
                ExchangeStrategy::Ar,
                ExchangeStrategy::Asa,
                ExchangeStrategy::Asa16,
            ] {
                let row = bench_exchange(p, k, strategy, 1).unwrap();
                assert_eq!(
                    row.per_rank_bytes,
                    expected_per_rank_bytes(strategy, p, k),
                    "{} p={p} k={k}",
                    strategy.name()
                );
            }
        }
    }

    #[test]
    fn presets_carry_the_benchmark_model_sizes() {
        assert_eq!(preset_param_count("alexnet"), Some(60_965_224));
        assert_eq!(preset_param_count("googlenet"), Some(13_378_280));
        assert_eq!(preset_param_count("vggnet"), Some(138_357_544));
        assert_eq!(preset_param_count("resnet"), None);
    }
}
