use proptest::prelude::*;

use sepkit::css::{chunk, ramp, stitch, ChunkPlan};
use sepkit::dsp::{feature_transform, AudioBuffer, Mat, MelTransform, StftConfig, StftProcessor};
use sepkit::eval::{edit_distance, si_sdr_slices};
use sepkit::losses::{best_permutation, cost_table, os_weight, pit_loss_value, OsSchedule, Permutation};
use sepkit::trainer::{lr_at, Stage, TrainPlan};

fn words() -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 0..12)
}

fn signal(min: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, min..max)
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(0.0f64..2.0, rows * cols).prop_map(move |d| Mat::new(rows, cols, d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edit_distance_is_a_metric(a in words(), b in words(), c in words()) {
        prop_assert_eq!(edit_distance(&a, &b), edit_distance(&b, &a));
        prop_assert_eq!(edit_distance(&a, &a), 0);
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
        prop_assert!(edit_distance(&a, &b) <= a.len().max(b.len()));
    }

    #[test]
    fn si_sdr_ignores_estimate_scale(est in signal(32, 200), k in 0.01f64..100.0) {
        let reference: Vec<f64> = est.iter().enumerate().map(|(i, x)| x + 0.3 * (i as f64 * 0.37).sin()).collect();
        let scaled: Vec<f64> = est.iter().map(|x| k * x).collect();
        let (a, b) = (si_sdr_slices(&est, &reference).unwrap(), si_sdr_slices(&scaled, &reference).unwrap());
        prop_assert!((a - b).abs() < 1e-8 * a.abs().max(1.0), "{a} vs {b}");
    }

    #[test]
    fn crossfade_ramps_are_complementary(n in 1usize..5000, i in 0usize..5000) {
        let i = i % n;
        let (r, mirror) = (ramp(i, n), ramp(n - 1 - i, n));
        prop_assert!(r > 0.0 && r < 1.0);
        prop_assert!((r + mirror - 1.0).abs() < 1e-12);
    }

    #[test]
    fn chunks_cover_every_sample(len in 1usize..20_000, chunk_ms in 20u32..400, hop_frac in 0.1f64..0.9) {
        let chunk_secs = chunk_ms as f64 / 1000.0;
        let plan = ChunkPlan::new(chunk_secs, chunk_secs * hop_frac).unwrap();
        let audio = AudioBuffer::new(vec![1.0; len]).unwrap();
        let chunks = chunk(&audio, &plan).unwrap();
        let (clen, hop) = plan.geometry(len);
        prop_assert_eq!(chunks[0].offset, 0);
        for w in chunks.windows(2) {
            prop_assert_eq!(w[1].offset - w[0].offset, hop);
        }
        let last = chunks.last().unwrap();
        prop_assert!(last.offset < len && last.offset + clen >= len);
        prop_assert!(chunks.iter().all(|c| c.audio.len() == clen));
    }

    #[test]
    fn stitching_exact_chunks_restores_the_signal(x in signal(1, 6000)) {
        let plan = ChunkPlan::new(0.05, 0.02).unwrap();
        let audio = AudioBuffer::new(x.clone()).unwrap();
        let chunks = chunk(&audio, &plan).unwrap();
        let offsets: Vec<usize> = chunks.iter().map(|c| c.offset).collect();
        let outputs: Vec<Vec<Vec<f64>>> =
            chunks.iter().map(|c| vec![c.audio.samples().to_vec(), vec![0.0; c.audio.len()]]).collect();
        let streams = stitch(&outputs, &offsets, x.len()).unwrap();
        prop_assert_eq!(streams[0].len(), x.len());
        for (a, b) in streams[0].samples().iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        prop_assert!(streams[1].samples().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn best_permutation_matches_enumeration(c in 1usize..5, costs in prop::collection::vec(0.0f64..10.0, 16)) {
        let table: Vec<Vec<f64>> = (0..c).map(|i| costs[i * 4..i * 4 + c].to_vec()).collect();
        let (value, perm) = best_permutation(&table);
        prop_assert!(perm.is_bijection());
        let brute = Permutation::all(c)
            .iter()
            .map(|p| p.0.iter().enumerate().map(|(i, &j)| table[i][j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        prop_assert_eq!(value, brute);
    }

    #[test]
    fn pit_value_ignores_output_order(a in mat(3, 6), b in mat(3, 6), ra in mat(3, 6), rb in mat(3, 6)) {
        let refs = [ra, rb];
        let est = [a, b];
        let swapped = [est[1].clone(), est[0].clone()];
        let (v1, p1) = pit_loss_value(&est, &refs, None).unwrap();
        let (v2, p2) = pit_loss_value(&swapped, &refs, None).unwrap();
        prop_assert!((v1 - v2).abs() < 1e-12);
        let cost = cost_table(&est, &refs, None).unwrap();
        let tie = ((cost[0][0] + cost[1][1]) - (cost[0][1] + cost[1][0])).abs() < 1e-9;
        if !tie {
            prop_assert_eq!(p2.0, vec![p1.0[1], p1.0[0]]);
        }
    }

    #[test]
    fn mel_features_are_linear(a in mat(2, 257), b in mat(2, 257), k in -3.0f64..3.0) {
        let mel = MelTransform::standard();
        let sum = Mat::new(2, 257, a.data.iter().zip(&b.data).map(|(x, y)| x + k * y).collect()).unwrap();
        let (fa, fb, fs) = (feature_transform(&a, &mel).unwrap(), feature_transform(&b, &mel).unwrap(), feature_transform(&sum, &mel).unwrap());
        for i in 0..fs.data.len() {
            prop_assert!((fs.data[i] - fa.data[i] - k * fb.data[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn stft_round_trip_in_the_interior(x in signal(1200, 4000)) {
        let cfg = StftConfig::default();
        let proc = StftProcessor::new(cfg).unwrap();
        let audio = AudioBuffer::new(x.clone()).unwrap();
        let covered = cfg.span(cfg.num_frames(x.len()));
        let y = proc.istft(&proc.stft(&audio).unwrap(), covered).unwrap();
        for i in cfg.frame_length..covered.saturating_sub(cfg.frame_length) {
            prop_assert!((y.samples()[i] - x[i]).abs() < 1e-9);
        }
    }

    #[test]
    fn objective_shift_decreases_from_one_to_zero(t in 0.0f64..3e5, dt in 0.0f64..1e5) {
        let s = OsSchedule::reference();
        let (a, b) = (os_weight(&s, t), os_weight(&s, t + dt));
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!(b <= a);
    }

    #[test]
    fn learning_rate_stays_in_range(total in 2u64..5000, warm_frac in 0.0f64..0.9, step in 0u64..5000, hold in any::<bool>()) {
        let stage = if hold { Stage::AsrFt } else { Stage::Fa };
        let plan = TrainPlan {
            total_steps: total,
            warmup_or_hold: (total as f64 * warm_frac) as u64,
            peak_lr: 1e-3,
            ..TrainPlan::reference(stage)
        };
        let step = step % (total + 1);
        let lr = lr_at(&plan, step).unwrap();
        prop_assert!((0.0..=1e-3).contains(&lr));
        prop_assert_eq!(lr_at(&plan, total).unwrap(), 0.0);
        prop_assert!(lr_at(&plan, total + 1).is_err());
    }
}
