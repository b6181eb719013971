//! Parameter-exchange strategies with exact traffic accounting.
//!
//! Three ways to leave every rank holding the elementwise sum of all ranks'
//! buffers:
//!
//! * `allreduce_ref` (AR) — gather to rank 0, sum there, broadcast back. The
//!   reference. Concentrates 2(k-1)P elements of traffic on rank 0.
//! * `asa_allreduce` (ASA) — partition into k slices, alltoall so rank r
//!   holds every rank's slice r, sum locally, allgather the sums. Per-rank
//!   traffic drops to 2(k-1)·ceil(P/k) elements.
//! * `asa16_allreduce` (ASA16) — same dataflow but every transported slice
//!   is rounded to binary16 before the wire and widened before summation;
//!   the sums themselves stay at full precision. Half the bytes of ASA.
//!
//! Every collective frame carries a header (u32-LE sequence, u8 collective
//! id, u8 dtype, u32-LE element count) so interleaved or mis-shaped calls
//! surface as errors instead of silent corruption. The meter counts payload
//! element bytes only — headers and barrier tokens are excluded — which is
//! what the traffic invariants are stated over.

use crate::buffer::{HalfBuffer, ParamBuffer, Slice};
use crate::error::{Error, Result};
use crate::scalar::{Dtype, Scalar};
use crate::transport::Communicator;

/// Which allreduce implementation a trainer exchanges parameters with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExchangeStrategy {
    /// MPI-Allreduce-style: gather, sum at root, broadcast.
    Ar,
    /// Alltoall, local partial sums, allgather.
    Asa,
    /// ASA with binary16 transfer and full-precision summation.
    Asa16,
}

impl ExchangeStrategy {
    pub fn parse(s: &str) -> Option<ExchangeStrategy> {
        match s {
            "ar" => Some(ExchangeStrategy::Ar),
            "asa" => Some(ExchangeStrategy::Asa),
            "asa16" => Some(ExchangeStrategy::Asa16),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ExchangeStrategy::Ar => "ar",
            ExchangeStrategy::Asa => "asa",
            ExchangeStrategy::Asa16 => "asa16",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum CollectiveId {
    Allreduce = 0,
    Alltoall = 1,
    Allgather = 2,
    Broadcast = 3,
}

impl CollectiveId {
    fn from_code(code: u8) -> Option<CollectiveId> {
        match code {
            0 => Some(CollectiveId::Allreduce),
            1 => Some(CollectiveId::Alltoall),
            2 => Some(CollectiveId::Allgather),
            3 => Some(CollectiveId::Broadcast),
            _ => None,
        }
    }
}

const HEADER_LEN: usize = 10;

/// Payload-byte accounting for one rank, element data only.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ExchangeMeter {
    pub payload_bytes_sent: u64,
    pub payload_bytes_received: u64,
}

/// Per-rank traffic snapshot assembled by `traffic_report`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrafficReport {
    pub per_rank: Vec<ExchangeMeter>,
}

impl TrafficReport {
    /// Heaviest rank by total payload moved (sent + received).
    pub fn max_rank_bytes(&self) -> u64 {
        self.per_rank
            .iter()
            .map(|m| m.payload_bytes_sent + m.payload_bytes_received)
            .max()
            .unwrap_or(0)
    }
}

/// A rank's collective-operations handle: wraps the communicator with a call
/// sequence number and the payload meter.
///
/// Collectives are synchronous rendezvous: every rank must call the same
/// collective in the same order. A mismatch shows up as a
/// `CollectiveMismatch` when headers disagree.
pub struct Exchanger {
    comm: Communicator,
    seq: u32,
    meter: ExchangeMeter,
}

impl Exchanger {
    pub fn new(comm: Communicator) -> Exchanger {
        Exchanger {
            comm,
            seq: 0,
            meter: ExchangeMeter::default(),
        }
    }

    pub fn rank(&self) -> usize {
        self.comm.rank()
    }

    pub fn world_size(&self) -> usize {
        self.comm.world_size()
    }

    /// Raw transport access for point-to-point traffic (EASGD exchanges,
    /// lockstep checks). Raw messages do not touch the payload meter.
    pub fn comm_mut(&mut self) -> &mut Communicator {
        &mut self.comm
    }

    pub fn comm(&self) -> &Communicator {
        &self.comm
    }

    pub fn into_comm(self) -> Communicator {
        self.comm
    }

    pub fn meter(&self) -> ExchangeMeter {
        self.meter
    }

    pub fn reset_meter(&mut self) {
        self.meter = ExchangeMeter::default();
    }

    fn next_seq(&mut self) -> u32 {
        let s = self.seq;
        self.seq = self.seq.wrapping_add(1);
        s
    }

    fn send_frame(
        &mut self,
        peer: usize,
        seq: u32,
        id: CollectiveId,
        dtype: Dtype,
        count: usize,
        payload: &[u8],
    ) -> Result<()> {
        debug_assert_eq!(payload.len(), count * dtype.size());
        let mut msg = Vec::with_capacity(HEADER_LEN + payload.len());
        msg.extend_from_slice(&seq.to_le_bytes());
        msg.push(id as u8);
        msg.push(dtype as u8);
        msg.extend_from_slice(&(count as u32).to_le_bytes());
        msg.extend_from_slice(payload);
        self.comm.send(peer, &msg)?;
        self.meter.payload_bytes_sent += payload.len() as u64;
        Ok(())
    }

    fn recv_frame(
        &mut self,
        peer: usize,
        seq: u32,
        id: CollectiveId,
        dtype: Dtype,
        expect_count: usize,
    ) -> Result<Vec<u8>> {
        let msg = self.comm.recv(peer)?;
        if msg.len() < HEADER_LEN {
            return Err(Error::CollectiveMismatch {
                peer,
                expected: "collective frame".to_string(),
                got: format!("{} byte message", msg.len()),
            });
        }
        let got_seq = u32::from_le_bytes(msg[0..4].try_into().unwrap());
        let got_id = CollectiveId::from_code(msg[4]);
        let got_dtype = Dtype::from_code(msg[5]);
        let got_count = u32::from_le_bytes(msg[6..10].try_into().unwrap()) as usize;

        if got_seq != seq || got_id != Some(id) || got_dtype != Some(dtype) {
            return Err(Error::CollectiveMismatch {
                peer,
                expected: format!("seq {seq} id {:?} dtype {dtype}", id),
                got: format!("seq {got_seq} id {:?} dtype {:?}", msg[4], msg[5]),
            });
        }
        if got_count != expect_count {
            return Err(Error::LengthMismatch {
                left: expect_count,
                right: got_count,
            });
        }
        let payload = &msg[HEADER_LEN..];
        if payload.len() != got_count * dtype.size() {
            return Err(Error::TruncatedPayload {
                path: format!("frame from rank {peer}"),
                expected: got_count * dtype.size(),
                got: payload.len(),
            });
        }
        self.meter.payload_bytes_received += payload.len() as u64;
        Ok(payload.to_vec())
    }

    fn send_values<T: Scalar>(
        &mut self,
        peer: usize,
        seq: u32,
        id: CollectiveId,
        values: &[T],
    ) -> Result<()> {
        let payload = crate::scalar::encode(values);
        self.send_frame(peer, seq, id, T::DTYPE, values.len(), &payload)
    }

    fn recv_values<T: Scalar>(
        &mut self,
        peer: usize,
        seq: u32,
        id: CollectiveId,
        expect_count: usize,
    ) -> Result<Vec<T>> {
        let payload = self.recv_frame(peer, seq, id, T::DTYPE, expect_count)?;
        Ok(crate::scalar::decode(&payload))
    }

    fn send_halves(
        &mut self,
        peer: usize,
        seq: u32,
        id: CollectiveId,
        halves: &HalfBuffer,
    ) -> Result<()> {
        let payload = halves.encode_le();
        self.send_frame(peer, seq, id, Dtype::F16, halves.len(), &payload)
    }

    fn recv_halves(
        &mut self,
        peer: usize,
        seq: u32,
        id: CollectiveId,
        expect_count: usize,
    ) -> Result<HalfBuffer> {
        let payload = self.recv_frame(peer, seq, id, Dtype::F16, expect_count)?;
        Ok(HalfBuffer::decode_le(&payload))
    }

    /// Root sends its buffer to every rank; everyone returns the root's
    /// values. Used for initial weight distribution.
    pub fn broadcast<T: Scalar>(&mut self, root: usize, buf: &ParamBuffer<T>) -> Result<ParamBuffer<T>> {
        let seq = self.next_seq();
        let k = self.world_size();
        if k == 1 {
            return Ok(buf.clone());
        }
        if self.rank() == root {
            for peer in (0..k).filter(|&p| p != root) {
                self.send_values(peer, seq, CollectiveId::Broadcast, buf.as_slice())?;
            }
            Ok(buf.clone())
        } else {
            let values =
                self.recv_values::<T>(root, seq, CollectiveId::Broadcast, buf.len())?;
            ParamBuffer::new(values)
        }
    }

    /// Reference allreduce: gather at rank 0, sum there in ascending rank
    /// order, broadcast the sum. Every rank returns identical values.
    pub fn allreduce_ref<T: Scalar>(&mut self, buf: &ParamBuffer<T>) -> Result<ParamBuffer<T>> {
        let seq = self.next_seq();
        let k = self.world_size();
        if k == 1 {
            return Ok(buf.clone());
        }
        if self.rank() == 0 {
            let mut acc = buf.clone();
            for peer in 1..k {
                let values =
                    self.recv_values::<T>(peer, seq, CollectiveId::Allreduce, buf.len())?;
                for (a, v) in acc.as_mut_slice().iter_mut().zip(&values) {
                    *a = *a + *v;
                }
            }
            acc.check_finite()?;
            for peer in 1..k {
                self.send_values(peer, seq, CollectiveId::Allreduce, acc.as_slice())?;
            }
            Ok(acc)
        } else {
            self.send_values(0, seq, CollectiveId::Allreduce, buf.as_slice())?;
            let values = self.recv_values::<T>(0, seq, CollectiveId::Allreduce, buf.len())?;
            ParamBuffer::new(values)
        }
    }

    /// All-to-all transpose of k equal-length slices. Rank r's output slot j
    /// holds what rank j put in its input slot r. The local slice moves
    /// without transport bytes. Output owner tags are this rank's region.
    pub fn alltoall<T: Scalar>(&mut self, slices: Vec<Slice<T>>) -> Result<Vec<Slice<T>>> {
        let seq = self.next_seq();
        let k = self.world_size();
        let rank = self.rank();
        if slices.len() != k {
            return Err(Error::LengthMismatch {
                left: k,
                right: slices.len(),
            });
        }
        let chunk = slices[0].len();
        for s in &slices {
            if s.len() != chunk {
                return Err(Error::LengthMismatch {
                    left: chunk,
                    right: s.len(),
                });
            }
        }
        for (peer, s) in slices.iter().enumerate() {
            if peer != rank {
                self.send_values(peer, seq, CollectiveId::Alltoall, &s.values)?;
            }
        }
        let mut out = Vec::with_capacity(k);
        for peer in 0..k {
            if peer == rank {
                out.push(Slice {
                    owner: rank,
                    values: slices[rank].values.clone(),
                });
            } else {
                let values =
                    self.recv_values::<T>(peer, seq, CollectiveId::Alltoall, chunk)?;
                out.push(Slice {
                    owner: rank,
                    values,
                });
            }
        }
        Ok(out)
    }

    /// Every rank contributes one slice; every rank returns all k slices in
    /// rank order.
    pub fn allgather<T: Scalar>(&mut self, s: &Slice<T>) -> Result<Vec<Slice<T>>> {
        let seq = self.next_seq();
        let k = self.world_size();
        let rank = self.rank();
        for peer in (0..k).filter(|&p| p != rank) {
            self.send_values(peer, seq, CollectiveId::Allgather, &s.values)?;
        }
        let mut out = Vec::with_capacity(k);
        for peer in 0..k {
            if peer == rank {
                out.push(Slice {
                    owner: rank,
                    values: s.values.clone(),
                });
            } else {
                let values =
                    self.recv_values::<T>(peer, seq, CollectiveId::Allgather, s.len())?;
                out.push(Slice {
                    owner: peer,
                    values,
                });
            }
        }
        Ok(out)
    }

    /// Alltoall-sum-Allgather reduction. Equals `allreduce_ref` up to float
    /// reordering; partial sums accumulate in ascending source-rank order so
    /// results are bit-deterministic per (world, inputs).
    pub fn asa_allreduce<T: Scalar>(&mut self, buf: &ParamBuffer<T>) -> Result<ParamBuffer<T>> {
        let k = self.world_size();
        if k == 1 {
            return Ok(buf.clone());
        }
        let parts = buf.partition(k);
        let chunk = parts[0].len();
        let received = self.alltoall(parts)?;

        let mut sum = vec![T::zero(); chunk];
        for slice in &received {
            for (a, v) in sum.iter_mut().zip(&slice.values) {
                *a = *a + *v;
            }
        }
        let summed = Slice {
            owner: self.rank(),
            values: sum,
        };

        let gathered = self.allgather(&summed)?;
        let out = ParamBuffer::unpartition(&gathered, buf.len());
        out.check_finite()?;
        Ok(out)
    }

    /// ASA with binary16 transport. Every slice is rounded to half precision
    /// at both phases — the local slice too, so all ranks sum identical bits
    /// and return identical results. Summation stays at full precision.
    /// A single-rank world skips quantization entirely: nothing is
    /// transferred, so nothing is rounded.
    pub fn asa16_allreduce<T: Scalar>(&mut self, buf: &ParamBuffer<T>) -> Result<ParamBuffer<T>> {
        let k = self.world_size();
        let rank = self.rank();
        if k == 1 {
            return Ok(buf.clone());
        }
        let parts = buf.partition(k);
        let chunk = parts[0].len();

        // Alltoall phase at half precision.
        let seq = self.next_seq();
        let mut halves: Vec<Option<HalfBuffer>> = (0..k).map(|_| None).collect();
        for (peer, part) in parts.iter().enumerate() {
            let h = ParamBuffer::new(part.values.clone())?.to_half()?;
            if peer == rank {
                halves[peer] = Some(h);
            } else {
                self.send_halves(peer, seq, CollectiveId::Alltoall, &h)?;
            }
        }
        for peer in (0..k).filter(|&p| p != rank) {
            halves[peer] = Some(self.recv_halves(peer, seq, CollectiveId::Alltoall, chunk)?);
        }

        // Full-precision summation in ascending source-rank order.
        let mut sum = ParamBuffer::<T>::zeros(chunk);
        for h in halves.iter().flatten() {
            sum.add_inplace(&h.widen::<T>())?;
        }
        let summed_half = sum.to_half()?;

        // Allgather phase, also at half precision.
        let seq = self.next_seq();
        for peer in (0..k).filter(|&p| p != rank) {
            self.send_halves(peer, seq, CollectiveId::Allgather, &summed_half)?;
        }
        let mut gathered = Vec::with_capacity(k);
        for peer in 0..k {
            let h = if peer == rank {
                summed_half.clone()
            } else {
                self.recv_halves(peer, seq, CollectiveId::Allgather, chunk)?
            };
            gathered.push(Slice {
                owner: peer,
                values: h.widen::<T>().into_vec(),
            });
        }
        let out = ParamBuffer::unpartition(&gathered, buf.len());
        out.check_finite()?;
        Ok(out)
    }

    /// Allreduce through whichever strategy the trainer was configured with.
    pub fn strategy_allreduce<T: Scalar>(
        &mut self,
        strategy: ExchangeStrategy,
        buf: &ParamBuffer<T>,
    ) -> Result<ParamBuffer<T>> {
        match strategy {
            ExchangeStrategy::Ar => self.allreduce_ref(buf),
            ExchangeStrategy::Asa => self.asa_allreduce(buf),
            ExchangeStrategy::Asa16 => self.asa16_allreduce(buf),
        }
    }

    /// Gather every rank's payload meter so each rank holds the full table.
    /// Rides the raw transport, so the report itself never shifts the
    /// payload counters it reports.
    pub fn traffic_report(&mut self) -> Result<TrafficReport> {
        let k = self.world_size();
        let rank = self.rank();
        let snapshot = self.meter;
        let mut per_rank = vec![ExchangeMeter::default(); k];
        per_rank[rank] = snapshot;

        if k > 1 {
            let mut mine = Vec::with_capacity(16);
            mine.extend_from_slice(&snapshot.payload_bytes_sent.to_le_bytes());
            mine.extend_from_slice(&snapshot.payload_bytes_received.to_le_bytes());

            if rank == 0 {
                for peer in 1..k {
                    let bytes = self.comm.recv(peer)?;
                    if bytes.len() != 16 {
                        return Err(Error::ProtocolViolation(
                            "malformed traffic snapshot".to_string(),
                        ));
                    }
                    per_rank[peer] = ExchangeMeter {
                        payload_bytes_sent: u64::from_le_bytes(bytes[0..8].try_into().unwrap()),
                        payload_bytes_received: u64::from_le_bytes(
                            bytes[8..16].try_into().unwrap(),
                        ),
                    };
                }
                let mut table = Vec::with_capacity(k * 16);
                for m in &per_rank {
                    table.extend_from_slice(&m.payload_bytes_sent.to_le_bytes());
                    table.extend_from_slice(&m.payload_bytes_received.to_le_bytes());
                }
                for peer in 1..k {
                    self.comm.send(peer, &table)?;
                }
            } else {
                self.comm.send(0, &mine)?;
                let table = self.comm.recv(0)?;
                if table.len() != k * 16 {
                    return Err(Error::ProtocolViolation(
                        "malformed traffic table".to_string(),
                    ));
                }
                for (r, chunk) in table.chunks_exact(16).enumerate() {
                    per_rank[r] = ExchangeMeter {
                        payload_bytes_sent: u64::from_le_bytes(chunk[0..8].try_into().unwrap()),
                        payload_bytes_received: u64::from_le_bytes(
                            chunk[8..16].try_into().unwrap(),
                        ),
                    };
                }
            }
        }

        Ok(TrafficReport { per_rank })
    }
}

/// Exact per-rank payload bytes the ASA strategy sends for a P-element
/// buffer: (k-1) slices out in the alltoall phase plus (k-1) copies of the
/// summed slice in the allgather phase.
pub fn asa_payload_bytes_per_rank(p: usize, k: usize, elem_size: usize) -> u64 {
    if k <= 1 {
        return 0;
    }
    (2 * (k - 1) * p.div_ceil(k) * elem_size) as u64
}

/// Exact payload bytes through rank 0 (sent + received) under the reference
/// allreduce: k-1 full buffers in, k-1 full buffers out.
pub fn ar_root_payload_bytes(p: usize, k: usize, elem_size: usize) -> u64 {
    if k <= 1 {
        return 0;
    }
    (2 * (k - 1) * p * elem_size) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::spawn_world;

    fn seeded_buffer(rank: usize, p: usize) -> ParamBuffer<f32> {
        let values = (0..p)
            .map(|i| {
                let x = ((rank * 1_000_003 + i * 97) % 2011) as f32;
                (x - 1005.0) / 503.0
            })
            .collect();
        ParamBuffer::new(values).unwrap()
    }

    /// Independent oracle: elementwise sum computed in one context.
    fn brute_force_sum(k: usize, p: usize) -> Vec<f32> {
        (0..p)
            .map(|i| {
                (0..k)
                    .map(|r| seeded_buffer(r, p).as_slice()[i])
                    .sum::<f32>()
            })
            .collect()
    }

    fn assert_close(got: &[f32], want: &[f32], rtol: f32) {
        assert_eq!(got.len(), want.len());
        for (i, (g, w)) in got.iter().zip(want).enumerate() {
            let tol = rtol * w.abs().max(1.0);
            assert!(
                (g - w).abs() <= tol,
                "index {i}: got {g}, want {w} (tol {tol})"
            );
        }
    }

    #[test]
    fn allreduce_ref_small() {
        let results = spawn_world(2, |comm| {
            let mut ex = Exchanger::new(comm);
            let buf = if ex.rank() == 0 {
                ParamBuffer::new(vec![1.0f32, 2.0]).unwrap()
            } else {
                ParamBuffer::new(vec![3.0f32, 4.0]).unwrap()
            };
            ex.allreduce_ref(&buf)
        })
        .unwrap();
        for r in &results {
            assert_eq!(r.as_slice(), &[4.0, 6.0]);
        }
    }

    #[test]
    fn allreduce_ref_zero_rank_is_identity_contribution() {
        let results = spawn_world(4, |comm| {
            let mut ex = Exchanger::new(comm);
            let buf = if ex.rank() == 3 {
                ParamBuffer::zeros(5)
            } else {
                seeded_buffer(ex.rank(), 5)
            };
            ex.allreduce_ref(&buf)
        })
        .unwrap();
        let want: Vec<f32> = (0..5)
            .map(|i| (0..3).map(|r| seeded_buffer(r, 5).as_slice()[i]).sum())
            .collect();
        for r in &results {
            assert_close(r.as_slice(), &want, 1e-6);
        }
    }

    #[test]
    fn alltoall_two_ranks_transposes() {
        let results = spawn_world(2, |comm| {
            let rank = comm.rank();
            let mut ex = Exchanger::new(comm);
            let slices = vec![
                Slice {
                    owner: 0,
                    values: vec![10.0f32 * rank as f32],
                },
                Slice {
                    owner: 1,
                    values: vec![10.0f32 * rank as f32 + 1.0],
                },
            ];
            ex.alltoall(slices)
        })
        .unwrap();
        // rank0 in [A0,A1]=[0,1], rank1 in [B0,B1]=[10,11]
        assert_eq!(results[0][0].values, vec![0.0]);
        assert_eq!(results[0][1].values, vec![10.0]);
        assert_eq!(results[1][0].values, vec![1.0]);
        assert_eq!(results[1][1].values, vec![11.0]);
    }

    #[test]
    fn alltoall_is_involution() {
        for k in [1usize, 2, 3, 5, 8] {
            let results = spawn_world(k, |comm| {
                let rank = comm.rank();
                let mut ex = Exchanger::new(comm);
                let input: Vec<Slice<f32>> = (0..k)
                    .map(|j| Slice {
                        owner: j,
                        values: vec![(rank * 100 + j) as f32, 0.5],
                    })
                    .collect();
                let once = ex.alltoall(input.clone())?;
                let twice = ex.alltoall(once)?;
                Ok((input, twice))
            })
            .unwrap();
            for (input, twice) in &results {
                for (a, b) in input.iter().zip(twice) {
                    assert_eq!(a.values, b.values);
                }
            }
        }
    }

    #[test]
    fn allgather_matches_root_gather() {
        let results = spawn_world(3, |comm| {
            let rank = comm.rank();
            let mut ex = Exchanger::new(comm);
            let s = Slice {
                owner: rank,
                values: vec![rank as f32, rank as f32 + 0.5],
            };
            ex.allgather(&s)
        })
        .unwrap();
        let concat: Vec<f32> = (0..3).flat_map(|r| vec![r as f32, r as f32 + 0.5]).collect();
        for slices in &results {
            let got: Vec<f32> = slices.iter().flat_map(|s| s.values.clone()).collect();
            assert_eq!(got, concat);
        }
    }

    #[test]
    fn asa_small_sum() {
        let results = spawn_world(2, |comm| {
            let mut ex = Exchanger::new(comm);
            let buf = if ex.rank() == 0 {
                ParamBuffer::new(vec![1.0f32, 2.0, 3.0, 4.0]).unwrap()
            } else {
                ParamBuffer::new(vec![10.0f32, 20.0, 30.0, 40.0]).unwrap()
            };
            ex.asa_allreduce(&buf)
        })
        .unwrap();
        for r in &results {
            assert_eq!(r.as_slice(), &[11.0, 22.0, 33.0, 44.0]);
        }
    }

    #[test]
    fn asa_padding_path_exact_on_integers() {
        // k=3, P=7: padding in play; integer-valued floats sum exactly, so
        // ASA must equal AR bit for bit.
        let results = spawn_world(3, |comm| {
            let rank = comm.rank();
            let mut ex = Exchanger::new(comm);
            let values: Vec<f32> = (0..7).map(|i| ((rank + 1) * (i + 1)) as f32).collect();
            let buf = ParamBuffer::new(values).unwrap();
            let asa = ex.asa_allreduce(&buf)?;
            let ar = ex.allreduce_ref(&buf)?;
            Ok((asa, ar))
        })
        .unwrap();
        for (asa, ar) in &results {
            assert_eq!(asa.as_slice(), ar.as_slice());
        }
    }

    #[test]
    fn asa_matches_brute_force_oracle() {
        for (k, p) in [(2usize, 17usize), (4, 64), (3, 100)] {
            let want = brute_force_sum(k, p);
            let results = spawn_world(k, |comm| {
                let rank = comm.rank();
                let mut ex = Exchanger::new(comm);
                ex.asa_allreduce(&seeded_buffer(rank, p))
            })
            .unwrap();
            for r in &results {
                assert_close(r.as_slice(), &want, 1e-6);
            }
        }
    }

    #[test]
    fn asa16_exact_on_small_integers() {
        // values and sums stay within binary16's exact-integer range
        let results = spawn_world(4, |comm| {
            let rank = comm.rank();
            let mut ex = Exchanger::new(comm);
            let values: Vec<f32> = (0..9).map(|i| ((rank * 7 + i) % 100) as f32 - 50.0).collect();
            let buf = ParamBuffer::new(values).unwrap();
            let a16 = ex.asa16_allreduce(&buf)?;
            let asa = ex.asa_allreduce(&buf)?;
            Ok((a16, asa))
        })
        .unwrap();
        for (a16, asa) in &results {
            assert_eq!(a16.as_slice(), asa.as_slice());
        }
    }

    #[test]
    fn asa16_known_rounding() {
        // two ranks contribute 0.1; the exchanged halves widen to
        // 0.0999755859375, so the sum is exactly twice that.
        let results = spawn_world(2, |comm| {
            let mut ex = Exchanger::new(comm);
            ex.asa16_allreduce(&ParamBuffer::new(vec![0.1f32]).unwrap())
        })
        .unwrap();
        for r in &results {
            assert_eq!(r.as_slice(), &[0.199951171875f32]);
        }
    }

    #[test]
    fn asa16_overflow_is_error() {
        let err = spawn_world(2, |comm| {
            let mut ex = Exchanger::new(comm);
            ex.asa16_allreduce(&ParamBuffer::new(vec![70000.0f32]).unwrap())
        })
        .unwrap_err();
        assert!(matches!(err, Error::OverflowToInfinity { .. }));
    }

    #[test]
    fn traffic_formulas_hold_on_meter() {
        let (p, k) = (1024usize, 4usize);
        let reports = spawn_world(k, |comm| {
            let rank = comm.rank();
            let mut ex = Exchanger::new(comm);

            ex.asa_allreduce(&seeded_buffer(rank, p))?;
            let asa_report = ex.traffic_report()?;
            ex.reset_meter();

            ex.asa16_allreduce(&seeded_buffer(rank, p))?;
            let asa16_report = ex.traffic_report()?;
            ex.reset_meter();

            ex.allreduce_ref(&seeded_buffer(rank, p))?;
            let ar_report = ex.traffic_report()?;

            Ok((asa_report, asa16_report, ar_report))
        })
        .unwrap();

        let (asa, asa16, ar) = &reports[0];
        for r in 0..k {
            assert_eq!(
                asa.per_rank[r].payload_bytes_sent,
                asa_payload_bytes_per_rank(p, k, 4)
            );
            assert_eq!(
                asa16.per_rank[r].payload_bytes_sent,
                asa_payload_bytes_per_rank(p, k, 2)
            );
        }
        assert_eq!(
            ar.per_rank[0].payload_bytes_sent + ar.per_rank[0].payload_bytes_received,
            ar_root_payload_bytes(p, k, 4)
        );
        assert_eq!(asa_payload_bytes_per_rank(p, k, 4), 6144);
        assert_eq!(asa_payload_bytes_per_rank(p, k, 2), 3072);
        assert_eq!(ar_root_payload_bytes(p, k, 4), 24576);
    }

    #[test]
    fn interleaved_collectives_are_detected() {
        let err = spawn_world(2, |comm| {
            let rank = comm.rank();
            let mut ex = Exchanger::new(comm);
            ex.comm_mut().set_timeout(std::time::Duration::from_secs(5));
            let buf = ParamBuffer::new(vec![1.0f32]).unwrap();
            if rank == 0 {
                ex.allreduce_ref(&buf).map(|_| ())
            } else {
                // wrong collective: the frame headers disagree
                ex.allgather(&Slice {
                    owner: 1,
                    values: vec![1.0f32],
                })
                .map(|_| ())
            }
        })
        .unwrap_err();
        assert!(
            matches!(err, Error::CollectiveMismatch { .. }),
            "got {err:?}"
        );
    }
}
