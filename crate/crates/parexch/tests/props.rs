//! Property tests for the numeric core and small collective worlds.

use parexch::buffer::ParamBuffer;
use parexch::collectives::Exchanger;
use parexch::optim::Schedule;
use parexch::transport::spawn_world;
use parexch::{Scalar, Slice};
use proptest::prelude::*;

fn values_from_seed(seed: u64, len: usize, scale: f32) -> Vec<f32> {
    // cheap deterministic pseudo-values, no rng machinery needed
    (0..len)
        .map(|i| {
            let x = seed
                .wrapping_mul(6364136223846793005)
                .wrapping_add((i as u64).wrapping_mul(1442695040888963407));
            ((x >> 33) as i32 % 1000) as f32 / 1000.0 * scale
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn partition_unpartition_round_trips(
        p in 1usize..10_000,
        k in 1usize..=16,
        seed in any::<u64>(),
    ) {
        let buf = ParamBuffer::new(values_from_seed(seed, p, 10.0)).unwrap();
        let slices = buf.partition(k);
        prop_assert_eq!(slices.len(), k);
        let chunk = p.div_ceil(k);
        for (i, s) in slices.iter().enumerate() {
            prop_assert_eq!(s.len(), chunk);
            prop_assert_eq!(s.owner, i);
        }
        // pad region is zero
        let tail = &slices[k - 1].values[chunk - (chunk * k - p)..];
        prop_assert!(tail.iter().all(|v| *v == 0.0));

        let back = ParamBuffer::unpartition(&slices, p);
        prop_assert_eq!(back, buf);
    }

    #[test]
    fn half_precision_error_bound(x in -65504.0f32..=65504.0) {
        let buf = ParamBuffer::new(vec![x]).unwrap();
        let widened = buf.to_half().unwrap().widen::<f32>();
        let err = (widened.as_slice()[0] - x).abs();
        let bound = 2f32.powi(-11) * x.abs().max(2f32.powi(-14));
        prop_assert!(
            err <= bound,
            "x={x}, widened={}, err={err}, bound={bound}",
            widened.as_slice()[0]
        );
    }

    #[test]
    fn half_round_trip_idempotent(seed in any::<u64>(), len in 1usize..64) {
        let buf = ParamBuffer::new(values_from_seed(seed, len, 100.0)).unwrap();
        let h1 = buf.to_half().unwrap();
        let h2 = h1.widen::<f32>().to_half().unwrap();
        prop_assert_eq!(h1, h2);
    }

    #[test]
    fn addition_tolerates_reordering(
        seed in any::<u64>(),
        len in 1usize..128,
        k in 2usize..6,
    ) {
        // summing k buffers in opposite orders agrees to 1e-6 relative
        let inputs: Vec<Vec<f32>> = (0..k)
            .map(|r| values_from_seed(seed.wrapping_add(r as u64), len, 1e3))
            .collect();
        let mut fwd = ParamBuffer::zeros(len);
        for v in &inputs {
            fwd.add_inplace(&ParamBuffer::new(v.clone()).unwrap()).unwrap();
        }
        let mut rev = ParamBuffer::zeros(len);
        for v in inputs.iter().rev() {
            rev.add_inplace(&ParamBuffer::new(v.clone()).unwrap()).unwrap();
        }
        for (a, b) in fwd.as_slice().iter().zip(rev.as_slice()) {
            let tol = 1e-6 * a.abs().max(1.0);
            prop_assert!((a - b).abs() <= tol);
        }
    }

    #[test]
    fn poly_schedule_non_increasing(
        base in 1e-4f64..1.0,
        max_iter in 1u64..500,
    ) {
        let s = Schedule::poly_decay(base, max_iter);
        let mut prev = f64::INFINITY;
        for it in 0..=max_iter {
            let lr = s.lr_at(0, it);
            prop_assert!(lr >= 0.0);
            prop_assert!(lr <= prev + 1e-15);
            prev = lr;
        }
    }
}

proptest! {
    // world-spawning cases are heavier; keep the count modest
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn alltoall_transpose_involution(
        k in 1usize..=8,
        chunk in 1usize..16,
        seed in any::<u64>(),
    ) {
        let results = spawn_world(k, |comm| {
            let rank = comm.rank();
            let mut ex = Exchanger::new(comm);
            let input: Vec<Slice<f32>> = (0..k)
                .map(|j| Slice {
                    owner: j,
                    values: values_from_seed(
                        seed.wrapping_add((rank * k + j) as u64),
                        chunk,
                        5.0,
                    ),
                })
                .collect();
            let once = ex.alltoall(input.clone())?;
            let twice = ex.alltoall(once)?;
            Ok((input, twice))
        })
        .unwrap();
        for (input, twice) in &results {
            for (a, b) in input.iter().zip(twice) {
                prop_assert_eq!(&a.values, &b.values);
            }
        }
    }

    #[test]
    fn collectives_agree_across_ranks(
        k in 2usize..=6,
        p in 1usize..300,
        seed in any::<u64>(),
    ) {
        // every collective returns identical buffers on every rank
        let results = spawn_world(k, |comm| {
            let rank = comm.rank();
            let mut ex = Exchanger::new(comm);
            let buf = ParamBuffer::new(values_from_seed(
                seed.wrapping_add(rank as u64),
                p,
                1.0,
            ))
            .unwrap();
            let ar = ex.allreduce_ref(&buf)?;
            let asa = ex.asa_allreduce(&buf)?;
            let asa16 = ex.asa16_allreduce(&buf)?;
            Ok((ar, asa, asa16))
        })
        .unwrap();
        let (ar0, asa0, a160) = &results[0];
        for (ar, asa, a16) in &results {
            prop_assert_eq!(ar.as_slice(), ar0.as_slice());
            prop_assert_eq!(asa.as_slice(), asa0.as_slice());
            prop_assert_eq!(a16.as_slice(), a160.as_slice());
        }
        // length is preserved
        prop_assert_eq!(ar0.len(), p);
        prop_assert_eq!(asa0.len(), p);
        prop_assert_eq!(a160.len(), p);
    }
}
