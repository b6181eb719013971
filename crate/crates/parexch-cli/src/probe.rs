//! Collective probe: run the reduction case matrix in an existing world and
//! fingerprint every result. The same seed produces the same per-rank
//! buffers on any backend, so hashes must agree between an in-process world
//! and a TCP world of separate OS processes.

use parexch::buffer::ParamBuffer;
use parexch::collectives::{ExchangeStrategy, Exchanger};
use parexch::transport::Communicator;
use parexch::util::hash_values;
use parexch::Result;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProbeCase {
    pub strategy: String,
    pub p: usize,
    pub hash: u64,
    pub payload_sent: u64,
    pub payload_received: u64,
}

/// The buffer-length matrix exercised per world size.
pub fn case_params(k: usize) -> Vec<usize> {
    let mut ps: Vec<usize> = [1, k.saturating_sub(1), k, k + 1, 1024, 100_003]
        .into_iter()
        .filter(|&p| p > 0)
        .collect();
    ps.dedup();
    ps
}

/// Deterministic per-(seed, rank) buffer with values in [-1, 1].
pub fn probe_buffer(seed: u64, rank: usize, p: usize) -> ParamBuffer<f32> {
    let values = (0..p)
        .map(|i| {
            let mut z = seed
                ^ (rank as u64).wrapping_mul(0xA076_1D64_78BD_642F)
                ^ (i as u64).wrapping_mul(0xE703_7ED1_A0B4_28DB);
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            ((z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0) as f32
        })
        .collect();
    ParamBuffer::new(values).expect("finite probe values")
}

/// Run every (P, strategy) case and return the fingerprints.
pub fn run_probe(comm: Communicator, seed: u64) -> Result<Vec<ProbeCase>> {
    let k = comm.world_size();
    let rank = comm.rank();
    let mut ex = Exchanger::new(comm);
    let mut cases = Vec::new();
    for p in case_params(k) {
        for strategy in [
            ExchangeStrategy::Ar,
            ExchangeStrategy::Asa,
            ExchangeStrategy::Asa16,
        ] {
            let buf = probe_buffer(seed, rank, p);
            ex.reset_meter();
            let result = ex.strategy_allreduce(strategy, &buf)?;
            let meter = ex.meter();
            cases.push(ProbeCase {
                strategy: strategy.name().to_string(),
                p,
                hash: hash_values(result.as_slice()),
                payload_sent: meter.payload_bytes_sent,
                payload_received: meter.payload_bytes_received,
            });
        }
    }
    Ok(cases)
}

pub fn render_case(case: &ProbeCase) -> String {
    format!(
        "PROBE p={} strategy={} hash={:016x} sent={} received={}",
        case.p, case.strategy, case.hash, case.payload_sent, case.payload_received
    )
}

pub fn parse_case(line: &str) -> Option<ProbeCase> {
    let rest = line.strip_prefix("PROBE ")?;
    let mut p = None;
    let mut strategy = None;
    let mut hash = None;
    let mut sent = None;
    let mut received = None;
    for field in rest.split_whitespace() {
        let (key, value) = field.split_once('=')?;
        match key {
            "p" => p = value.parse().ok(),
            "strategy" => strategy = Some(value.to_string()),
            "hash" => hash = u64::from_str_radix(value, 16).ok(),
            "sent" => sent = value.parse().ok(),
            "received" => received = value.parse().ok(),
            _ => return None,
        }
    }
    Some(ProbeCase {
        strategy: strategy?,
        p: p?,
        hash: hash?,
        payload_sent: sent?,
        payload_received: received?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probe_lines_round_trip() {
        let case = ProbeCase {
            strategy: "asa".to_string(),
            p: 1024,
            hash: 0xDEADBEEF,
            payload_sent: 6144,
            payload_received: 6144,
        };
        assert_eq!(parse_case(&render_case(&case)), Some(case));
    }

    #[test]
    fn case_matrix_shapes() {
        assert_eq!(case_params(2), vec![1, 2, 3, 1024, 100_003]);
        assert_eq!(case_params(4), vec![1, 3, 4, 5, 1024, 100_003]);
    }

    #[test]
    fn probe_buffers_are_in_range_and_deterministic() {
        let a = probe_buffer(7, 3, 4096);
        let b = probe_buffer(7, 3, 4096);
        assert_eq!(a, b);
        assert!(a.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
        let c = probe_buffer(7, 4, 4096);
        assert_ne!(a, c);
    }
}
